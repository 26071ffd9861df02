"""
Byte transports carrying encoded frames.

The in-process channel is the reference. ``StreamTransport`` pushes the same
bytes through any pyserial URL (``loop://``, ``socket://host:port``, a serial
or RFCOMM device) and reassembles frames on a reader thread; the far end is
expected to echo the stream back, e.g.

    python -m serial.tools.tcp_serial_redirect -P 7777 loop://
"""

import logging
import queue
from collections import deque

import serial
import serial.threaded

from splitcom.errors import ProtocolError, TransportError
from splitcom.protocol.ledger import CommLedger
from splitcom.protocol.wire import FrameDecoder, encode_frame

logger = logging.getLogger(__name__)


class InProcChannel:
    """FIFO of raw bytes between the two parties of one process"""

    def __init__(self):
        self._chunks = deque()
        self._decoder = FrameDecoder()
        self._ready = deque()

    def connect(self):
        return True, "Connected to in-process channel"

    def write(self, data):
        self._chunks.append(bytes(data))

    def read_frame(self, timeout=None):
        while not self._ready:
            if not self._chunks:
                raise TransportError("in-process channel is empty")
            self._ready.extend(self._decoder.feed(self._chunks.popleft()))
        return self._ready.popleft()

    def close(self):
        self._chunks.clear()
        self._ready.clear()


class FrameProtocol(serial.threaded.Protocol):
    """Feeds received bytes to a FrameDecoder and queues whole frames"""

    def __init__(self, frames):
        self.frames = frames
        self.decoder = FrameDecoder()
        self.transport = None

    def connection_made(self, transport):
        self.transport = transport

    def data_received(self, data):
        try:
            for frame in self.decoder.feed(data):
                self.frames.put(frame)
        except ProtocolError as e:
            self.frames.put(e)

    def connection_lost(self, exc):
        self.frames.put(TransportError(f"stream closed: {exc}" if exc else "stream closed"))


class StreamTransport:
    """Frames over a pyserial URL, reassembled by a ReaderThread"""

    def __init__(self, url, timeout=10.0):
        self.url = url
        self.timeout = timeout
        self.ser = None
        self.reader = None
        self.frames = queue.Queue()
        self.connected = False

    def connect(self):
        """Open the URL and start the reader thread

        Returns:
            (success, message)
        """
        try:
            self.ser = serial.serial_for_url(self.url, timeout=self.timeout)
            self.reader = serial.threaded.ReaderThread(self.ser, lambda: FrameProtocol(self.frames))
            self.reader.start()
            self.reader.connect()
            self.connected = True
            return True, f"Connected to {self.url}"
        except (serial.SerialException, OSError, ValueError) as e:
            self.connected = False
            return False, f"Error connecting to {self.url}: {e}"

    def write(self, data):
        if not self.connected:
            raise TransportError(f"not connected to {self.url}")
        try:
            self.reader.write(data)
        except (serial.SerialException, OSError) as e:
            raise TransportError(f"write to {self.url} failed: {e}") from e

    def read_frame(self, timeout=None):
        try:
            item = self.frames.get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            raise TransportError(f"no frame from {self.url} within {self.timeout} s") from None
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        if self.reader is not None:
            self.reader.close()
            self.reader = None
        self.connected = False


def open_channel(url, timeout=10.0):
    """Channel for ``inproc`` or a pyserial URL, connected"""
    channel = InProcChannel() if url == 'inproc' else StreamTransport(url, timeout)
    ok, message = channel.connect()
    if not ok:
        raise TransportError(message)
    logger.info(message)
    return channel


class Link:
    """Delivers frames between clients and server, accounting on both ends

    ``sent`` is the sender-side ledger, ``received`` the receiver-side one;
    conservation means they agree for every key.
    """

    def __init__(self, channel):
        self.channel = channel
        self.sent = CommLedger('sent')
        self.received = CommLedger('received')

    @property
    def ledger(self):
        return self.sent

    def deliver(self, frame, direction, interface='', counterfactual=True):
        """Send one frame and return it as decoded by the receiver

        Args:
            frame: Frame to send
            direction: 'up' (client to server) or 'down'
            interface: Gated interface the frame belongs to, if any
            counterfactual: Also count the frame in the fp32 baseline tally
        """
        self.sent.record(frame, direction, interface)
        if counterfactual:
            self.sent.record_baseline(frame.epoch, direction, frame.type, len(frame.payload), interface)
        self.channel.write(encode_frame(frame))
        got = self.channel.read_frame()
        if (got.type, got.client_id, got.epoch, got.step, len(got.payload)) != (
                frame.type, frame.client_id, frame.epoch, frame.step, len(frame.payload)):
            raise ProtocolError(f"frame mismatch on the wire: sent {frame.type.name} got {got.type.name}")
        self.received.record(got, direction, interface)
        logger.debug("%s %s client=%d epoch=%d step=%d %dB", direction, got.type.name,
                     got.client_id, got.epoch, got.step, got.size)
        return got

    def close(self):
        self.channel.close()

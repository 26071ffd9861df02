"""
Configuration settings for splitcom runs.

Every default lives here. A config file is a flat text file with one
``section.key: value`` per line (``#`` starts a comment); run directories
carry the fully materialized file so they describe themselves.
"""

import dataclasses
import hashlib
import math
from dataclasses import dataclass

from splitcom.errors import ConfigError

TOPOLOGIES = ('standard', 'bidirectional', 'ushape')
POLICIES = ('fixed', 'bbc', 'ddpg')
INTERFACES = ('f2s', 's2t', 't2s', 's2f')


@dataclass
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 4
    seq_len: int = 16
    lora_rank: int = 8
    lora_alpha: float = 4.0
    lora_dropout: float = 0.1
    frontend_layers: int = 1
    tail_layers: int = 0        # forced to 1 for ushape when left at 0

    def validate(self):
        if self.vocab_size < 2 or self.seq_len < 1 or self.d_model < 1:
            raise ConfigError("vocab_size >= 2, seq_len >= 1 and d_model >= 1 required")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.frontend_layers < 1 or self.tail_layers < 0:
            raise ConfigError("frontend_layers must be >= 1 and tail_layers >= 0")
        if self.frontend_layers + self.tail_layers >= self.n_layers:
            raise ConfigError(
                f"frontend_layers + tail_layers ({self.frontend_layers + self.tail_layers}) "
                f"must be < n_layers ({self.n_layers})")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError("lora_dropout must lie in [0, 1)")


@dataclass
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 10
    peak_lr: float = 1e-3
    warmup_ratio: float = 0.5
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    reused_backward: str = 'through_current'     # or 'freeze'
    pretrain_steps: int = 300
    pretrain_batch: int = 32
    pretrain_lr: float = 3e-3

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1]")
        if self.peak_lr < 0 or self.clip_norm <= 0:
            raise ConfigError("peak_lr must be >= 0 and clip_norm > 0")
        if self.reused_backward not in ('through_current', 'freeze'):
            raise ConfigError(f"unknown reused_backward mode {self.reused_backward!r}")


@dataclass
class CompressionConfig:
    enabled: bool = True
    projection_dim: int = 0      # 0 -> max(16, d_in / 4)
    similarity_space: str = 'projected'   # or 'full'
    quantize_int8: bool = False

    def validate(self):
        if self.projection_dim < 0:
            raise ConfigError("projection_dim must be >= 0")
        if self.similarity_space not in ('projected', 'full'):
            raise ConfigError(f"unknown similarity_space {self.similarity_space!r}")


@dataclass
class ControlConfig:
    policy: str = 'fixed'
    theta: float = 0.98
    theta_overrides: str = ''    # e.g. "s2f=-1.01,f2s=0.98"
    ema_factor: float = 0.9

    def validate(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {', '.join(POLICIES)}")
        if not 0.0 <= self.ema_factor < 1.0:
            raise ConfigError("ema_factor must lie in [0, 1)")
        self.overrides()

    def overrides(self):
        """Parse ``theta_overrides`` into {interface: theta}"""
        result = {}
        for part in filter(None, (p.strip() for p in self.theta_overrides.split(','))):
            name, sep, value = part.partition('=')
            if not sep or name.strip() not in INTERFACES:
                raise ConfigError(f"bad theta override {part!r}")
            try:
                result[name.strip()] = float(value)
            except ValueError:
                raise ConfigError(f"bad theta override {part!r}") from None
        return result


@dataclass
class BbcConfig:
    theta_low: float = 0.98
    theta_high: float = 0.995
    tolerance: float = 0.02
    window: int = 2
    consecutive: int = 2
    random_init: bool = False

    def validate(self):
        if not -1.0 <= self.theta_low < self.theta_high <= 1.0:
            raise ConfigError("BBC thresholds need -1 <= theta_low < theta_high <= 1")
        if self.tolerance < 0:
            raise ConfigError("BBC tolerance must be >= 0")
        if self.window < 1 or self.consecutive < 1:
            raise ConfigError("BBC window and consecutive must be >= 1")


@dataclass
class DdpgConfig:
    hidden1: int = 400
    hidden2: int = 300
    ou_mu: float = 0.0
    ou_theta: float = 0.15
    sigma0: float = 0.002
    sigma0_ushape: float = 0.005
    sigma_decay: float = 0.98
    replay_capacity: int = 50
    minibatch: int = 4
    gamma: float = 0.95
    soft_update: float = 0.01
    alpha: float = 2.0
    beta: float = 1.0
    alpha_ushape: float = 1.5
    beta_ushape: float = 2.0
    p_zero: float = 1.0
    p_full: float = 1.0
    zero_ratio: float = 0.01
    full_ratio: float = 0.99
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    updates_per_epoch: int = 1

    def validate(self):
        if self.replay_capacity < 1 or self.minibatch < 1:
            raise ConfigError("replay_capacity and minibatch must be >= 1")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 < self.soft_update <= 1.0:
            raise ConfigError("gamma must lie in [0, 1] and soft_update in (0, 1]")
        if self.sigma0 < 0 or self.sigma0_ushape < 0 or not 0.0 < self.sigma_decay <= 1.0:
            raise ConfigError("OU sigma must be >= 0 and decay in (0, 1]")


@dataclass
class FederationConfig:
    clients: int = 10
    interval: int = 0            # local steps between FedAvg rounds; 0 -> once per epoch
    server_adapters: str = 'shared'   # or 'per_stream'

    def validate(self):
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.interval < 0:
            raise ConfigError("aggregation interval must be >= 1 (or 0 for once per epoch)")
        if self.server_adapters not in ('shared', 'per_stream'):
            raise ConfigError(f"unknown server_adapters mode {self.server_adapters!r}")


@dataclass
class ProtocolConfig:
    topology: str = 'standard'
    transport: str = 'inproc'    # or any pyserial URL, e.g. loop:// or socket://host:port
    uplink_mbps: float = 30.6
    downlink_mbps: float = 166.8
    concurrent: bool = False
    stream_timeout: float = 10.0

    def validate(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}; choose from {', '.join(TOPOLOGIES)}")
        if self.uplink_mbps <= 0 or self.downlink_mbps <= 0:
            raise ConfigError("link rates must be > 0")


@dataclass
class CorpusConfig:
    seed: int = 2024
    samples_per_client: int = 100
    val_size: int = 200
    test_size: int = 200
    pretrain_size: int = 2000
    logit_scale: float = 3.0
    shift_scale: float = 1.5

    def validate(self):
        if self.samples_per_client < 1 or self.val_size < 1:
            raise ConfigError("samples_per_client and val_size must be >= 1")


@dataclass
class RunConfig:
    seed: int = 7
    preset: str = ''
    out_dir: str = 'runs'
    checkpoints: bool = True
    record_wall_clock: bool = True


_SECTIONS = ('model', 'training', 'compression', 'control', 'bbc', 'ddpg',
             'federation', 'protocol', 'corpus', 'run')


def _parse(raw, default):
    """Parse a config text value to the type of its default"""
    raw = raw.strip()
    if isinstance(default, bool):
        lowered = raw.lower()
        if lowered in ('1', 'true', 'yes', 'on'):
            return True
        if lowered in ('0', 'false', 'no', 'off'):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _format(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Settings:
    """Configuration settings for a splitcom run"""

    def __init__(self):
        # Model layout and LoRA
        self.model = ModelConfig()

        # Optimizer, schedule and pre-training budget
        self.training = TrainingConfig()

        # Projection, similarity space and wire quantization
        self.compression = CompressionConfig()

        # Threshold policy
        self.control = ControlConfig()
        self.bbc = BbcConfig()
        self.ddpg = DdpgConfig()

        # Clients and aggregation
        self.federation = FederationConfig()

        # Topology, transport and link rates (Mbps)
        self.protocol = ProtocolConfig()

        # Synthetic data
        self.corpus = CorpusConfig()

        self.run = RunConfig()

        self.update_derived()

    def update_derived(self):
        """Recompute values derived from the primary settings"""
        if self.protocol.topology == 'ushape' and self.model.tail_layers == 0:
            self.model.tail_layers = 1
        self.cut_dim = self.model.seq_len * self.model.d_model
        self.projection_dim = self.compression.projection_dim or max(16, self.cut_dim // 4)
        self.steps_per_epoch = math.ceil(self.corpus.samples_per_client / self.training.batch_size)
        self.total_client_steps = self.training.epochs * self.steps_per_epoch
        self.aggregation_interval = self.federation.interval or self.steps_per_epoch

    def validate(self):
        for section in _SECTIONS:
            validator = getattr(getattr(self, section), 'validate', None)
            if validator:
                validator()
        if self.protocol.topology != 'ushape' and self.model.tail_layers != 0:
            raise ConfigError("tail_layers > 0 requires the ushape topology")
        return self

    def active_interfaces(self):
        """Interfaces whose payloads are gated under the current topology"""
        topology = self.protocol.topology
        if topology == 'standard':
            return ('f2s',)
        if topology == 'bidirectional':
            return ('f2s', 's2f')
        return INTERFACES

    def items(self):
        """Flat (key, value) pairs for every setting, in a stable order"""
        pairs = []
        for section in _SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                pairs.append((f"{section}.{f.name}", getattr(getattr(self, section), f.name)))
        return pairs

    def set(self, key, raw):
        """Set one ``section.key`` from its text form"""
        section, _, name = key.partition('.')
        if section not in _SECTIONS or not hasattr(getattr(self, section), name):
            raise ConfigError(f"unknown setting {key!r}")
        group = getattr(self, section)
        default = getattr(group, name)
        try:
            value = raw if not isinstance(raw, str) else _parse(raw, default)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
        setattr(group, name, value)

    def apply_overrides(self, overrides):
        """Apply a {key: value} mapping (values may be text or typed)"""
        for key, value in overrides.items():
            self.set(key, value)
        self.update_derived()
        return self

    def to_text(self):
        lines = ["# splitcom resolved configuration"]
        lines.extend(f"{key}: {_format(value)}" for key, value in self.items())
        return "\n".join(lines) + "\n"

    def save(self, filename):
        """Write every setting, defaults included

        Args:
            filename: Output path

        Returns:
            The path written
        """
        with open(filename, 'w') as f:
            f.write(self.to_text())
        return filename

    @classmethod
    def from_text(cls, text):
        settings = cls()
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if ':' not in line:
                raise ConfigError(f"line {number}: expected 'key: value'")
            key, value = line.split(':', 1)
            settings.set(key.strip(), value.strip())
        settings.update_derived()
        return settings

    @classmethod
    def load(cls, filename):
        with open(filename, 'r') as f:
            return cls.from_text(f.read())

    def config_hash(self):
        """Short digest of the resolved configuration (sent in SessionHello)"""
        return hashlib.sha256(self.to_text().encode('utf-8')).digest()[:16]

    def copy(self):
        return Settings.from_text(self.to_text())



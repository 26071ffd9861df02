"""
Epoch feedback and the running controller state shared by every policy.
"""

import math
from dataclasses import dataclass, field


@dataclass
class EpochFeedback:
    """What the engine reports to the controllers at the end of an epoch"""
    epoch: int
    total_epochs: int
    val_ppl: float
    val_loss: float
    # {interface: {client_id: mean gate similarity this epoch}}; empty at epoch 1
    similarity: dict = field(default_factory=dict)
    gated_bytes: int = 0
    baseline_bytes: int = 0

    @property
    def comm_ratio(self):
        return self.gated_bytes / self.baseline_bytes if self.baseline_bytes else 1.0


class ControllerState:
    """EMA similarities, PPL and communication histories, current thresholds"""

    def __init__(self, interfaces, clients, thetas, ema_factor=0.9):
        self.interfaces = tuple(interfaces)
        self.clients = int(clients)
        self.ema_factor = ema_factor
        self.ema = {name: [1.0] * self.clients for name in self.interfaces}
        self._seen = {name: [False] * self.clients for name in self.interfaces}
        self.ppl_history = []
        self.loss_history = []
        self.comm_history = []
        self.thetas = dict(thetas)
        self.progress = 0.0

    def record(self, feedback):
        self.ppl_history.append(feedback.val_ppl)
        self.loss_history.append(feedback.val_loss)
        self.comm_history.append(feedback.comm_ratio)
        self.progress = feedback.epoch / max(1, feedback.total_epochs)
        f = self.ema_factor
        for name in self.interfaces:
            for client, value in feedback.similarity.get(name, {}).items():
                if value is None or math.isnan(value):
                    continue
                if not self._seen[name][client]:
                    self.ema[name][client] = value
                    self._seen[name][client] = True
                else:
                    self.ema[name][client] = f * self.ema[name][client] + (1.0 - f) * value

    def ppl_trend(self):
        if len(self.ppl_history) < 2 or self.ppl_history[-2] == 0:
            return 0.0
        return (self.ppl_history[-1] - self.ppl_history[-2]) / self.ppl_history[-2]

    def comm_trend(self):
        if len(self.comm_history) < 2:
            return 0.0
        return self.comm_history[-1] - self.comm_history[-2]

    def vector(self, interface):
        """Agent state: [EMA per client, PPL trend, comm trend, theta, progress]"""
        return list(self.ema[interface]) + [
            self.ppl_trend(), self.comm_trend(), self.thetas[interface], self.progress]

"""
DDPG threshold agents.

Actor   state -> hidden1 -> hidden2 -> 1, relu/relu/sigmoid
Critic  [state, action] -> hidden1 -> hidden2 -> 1, relu/relu/linear

Both networks run on the splitcom kernel and are trained with the same AdamW
used for the adapters (no weight decay, no clipping). Exploration adds
Ornstein-Uhlenbeck noise whose scale decays per epoch:

    n <- n + theta_ou * (mu - n) + sigma_t * N(0, 1),  sigma_t = sigma0 * decay**t
"""

import logging
from collections import OrderedDict, deque
from dataclasses import dataclass

import numpy as np

from splitcom.errors import ConfigError, ShapeError
from splitcom.kernel import ops
from splitcom.kernel.rng import Rng
from splitcom.kernel.tensor import DTYPE, constant, leaf
from splitcom.model.checkpoint import decode_container, encode_container
from splitcom.model.optimizer import AdamW, ConstantSchedule

logger = logging.getLogger(__name__)

SKIPPED = 'skipped'
UPDATED = 'updated'


def clamp_action(value):
    return float(min(1.0, max(0.0, value)))


def reward(loss, loss0, comm, comm0, zero_flag, full_flag, alpha, beta, p_zero=1.0, p_full=1.0):
    """r = -alpha * loss/loss0 - beta * comm/comm0 - P_zero[zero_flag] - P_full[full_flag]"""
    if loss0 <= 0 or comm0 <= 0:
        raise ConfigError(f"reward baselines must be > 0 (loss0={loss0}, comm0={comm0})")
    r = -alpha * loss / loss0 - beta * comm / comm0
    if zero_flag:
        r -= p_zero
    if full_flag:
        r -= p_full
    return r


class OuNoise:
    def __init__(self, mu=0.0, theta=0.15, value=None):
        self.mu = mu
        self.theta = theta
        self.value = mu if value is None else value

    def reset(self):
        self.value = self.mu


def ou_noise_step(noise_state, sigma_t, rng):
    """Advance the OU process one step and return the new sample"""
    if sigma_t < 0:
        raise ConfigError("OU sigma must be >= 0")
    shock = float(rng.gaussian((1,))[0]) if sigma_t > 0 else 0.0
    noise_state.value = noise_state.value + noise_state.theta * (noise_state.mu - noise_state.value) + sigma_t * shock
    return noise_state.value


def ou_sigma(sigma0, decay, epoch):
    return sigma0 * decay ** epoch


@dataclass
class Transition:
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray


class ReplayBuffer:
    """Fixed-capacity experience store, evicting oldest first"""

    def __init__(self, capacity):
        self.capacity = int(capacity)
        self._items = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._items)

    def add(self, transition):
        self._items.append(transition)

    def sample(self, n, rng):
        idx = rng.permutation(len(self._items))[:n]
        return [self._items[i] for i in sorted(idx)]

    def items(self):
        return list(self._items)


class Mlp:
    """Fully connected network on kernel tensors"""

    def __init__(self, sizes, rng, final_limit=3e-3, output='linear'):
        self.sizes = tuple(sizes)
        self.output = output
        self.params = OrderedDict()
        last = len(self.sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            limit = final_limit if i == last else 1.0 / np.sqrt(fan_in)
            stream = rng.fork(f"l{i}")
            self.params[f"l{i}.w"] = self._uniform(stream.fork('w'), (fan_in, fan_out), limit)
            self.params[f"l{i}.b"] = self._uniform(stream.fork('b'), (fan_out,), limit)

    @staticmethod
    def _uniform(rng, dims, limit):
        n = int(np.prod(dims))
        return ((2.0 * rng.uniform(n) - 1.0) * limit).astype(DTYPE).reshape(dims)

    def bind(self, trainable):
        make = leaf if trainable else constant
        return OrderedDict((name, make(value, name=name)) for name, value in self.params.items())

    def forward(self, x, bound):
        n = len(self.sizes) - 1
        for i in range(n):
            x = ops.add_bias(ops.linear(x, bound[f"l{i}.w"]), bound[f"l{i}.b"])
            if i < n - 1:
                x = ops.relu(x)
        if self.output == 'sigmoid':
            x = ops.sigmoid(x)
        return x

    def __call__(self, x):
        return self.forward(x, self.bind(False)).data

    def copy(self):
        clone = Mlp.__new__(Mlp)
        clone.sizes = self.sizes
        clone.output = self.output
        clone.params = OrderedDict((name, value.copy()) for name, value in self.params.items())
        return clone

    def soft_update(self, source, tau):
        for name, value in source.params.items():
            self.params[name] = (DTYPE(tau) * value + DTYPE(1.0 - tau) * self.params[name]).astype(DTYPE)


@dataclass
class UpdateResult:
    status: str
    critic_loss: float = None
    actor_loss: float = None


class DdpgAgent:
    """One actor-critic pair emitting a threshold in [0, 1]"""

    def __init__(self, state_dim, cfg, sigma0, seed, name='agent'):
        self.state_dim = int(state_dim)
        self.cfg = cfg
        self.sigma0 = sigma0
        self.name = name
        rng = Rng(seed, 'ddpg', name)
        self.actor = Mlp((self.state_dim, cfg.hidden1, cfg.hidden2, 1), rng.fork('actor'), output='sigmoid')
        self.critic = Mlp((self.state_dim + 1, cfg.hidden1, cfg.hidden2, 1), rng.fork('critic'))
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = AdamW(ConstantSchedule(cfg.actor_lr), weight_decay=0.0, clip_norm=None)
        self.critic_opt = AdamW(ConstantSchedule(cfg.critic_lr), weight_decay=0.0, clip_norm=None)
        self.buffer = ReplayBuffer(cfg.replay_capacity)
        self.noise = OuNoise(cfg.ou_mu, cfg.ou_theta)
        self._noise_rng = rng.fork('noise')
        self._sample_rng = rng.fork('replay')
        self.epoch = 0

    def _check(self, state):
        state = np.asarray(state, dtype=DTYPE).reshape(-1)
        if state.size != self.state_dim:
            raise ShapeError(f"{self.name}: state of length {state.size}, actor expects {self.state_dim}")
        return state

    @property
    def sigma(self):
        return ou_sigma(self.sigma0, self.cfg.sigma_decay, self.epoch)

    def act(self, state, explore=False):
        state = self._check(state)
        value = float(self.actor(state.reshape(1, -1))[0, 0])
        if explore:
            value += ou_noise_step(self.noise, self.sigma, self._noise_rng)
        return clamp_action(value)

    def end_epoch(self):
        self.epoch += 1

    def remember(self, state, action, r, next_state):
        self.buffer.add(Transition(self._check(state), float(action), float(r), self._check(next_state)))

    def _stack(self, batch):
        states = np.stack([t.state for t in batch]).astype(DTYPE)
        actions = np.array([[t.action] for t in batch], dtype=DTYPE)
        rewards = np.array([[t.reward] for t in batch], dtype=DTYPE)
        next_states = np.stack([t.next_state for t in batch]).astype(DTYPE)
        return states, actions, rewards, next_states

    def critic_step(self, batch):
        """One regression step of Q(s, a) toward r + gamma * Q'(s', mu'(s'))"""
        states, actions, rewards, next_states = self._stack(batch)
        next_actions = self.target_actor(next_states)
        next_q = self.target_critic(np.concatenate([next_states, next_actions], axis=1))
        target = (rewards + DTYPE(self.cfg.gamma) * next_q).astype(DTYPE)
        bound = self.critic.bind(True)
        q = self.critic.forward(constant(np.concatenate([states, actions], axis=1)), bound)
        loss = ops.mse(q, target)
        loss.backward()
        grads = {name: t.grad if t.grad is not None else np.zeros_like(t.data) for name, t in bound.items()}
        self.critic.params = OrderedDict(self.critic_opt.step(self.critic.params, grads))
        return loss.data.item()

    def actor_step(self, batch):
        """One ascent step on Q(s, mu(s)) through a frozen critic"""
        states = self._stack(batch)[0]
        bound = self.actor.bind(True)
        actions = self.actor.forward(constant(states), bound)
        q = self.critic.forward(ops.concat([constant(states), actions], axis=-1), self.critic.bind(False))
        loss = ops.scale(ops.mean(q), -1.0)
        loss.backward()
        grads = {name: t.grad if t.grad is not None else np.zeros_like(t.data) for name, t in bound.items()}
        self.actor.params = OrderedDict(self.actor_opt.step(self.actor.params, grads))
        return loss.data.item()

    def update(self):
        """Critic step, actor step, soft target update; skipped until the buffer holds a minibatch"""
        if len(self.buffer) < self.cfg.minibatch:
            return UpdateResult(SKIPPED)
        batch = self.buffer.sample(self.cfg.minibatch, self._sample_rng)
        critic_loss = self.critic_step(batch)
        actor_loss = self.actor_step(batch)
        self.target_critic.soft_update(self.critic, self.cfg.soft_update)
        self.target_actor.soft_update(self.actor, self.cfg.soft_update)
        return UpdateResult(UPDATED, critic_loss, actor_loss)

    def learn(self):
        """Run ``updates_per_epoch`` updates, stopping at the first skipped one"""
        result = UpdateResult(SKIPPED)
        for _ in range(self.cfg.updates_per_epoch):
            result = self.update()
            if result.status == SKIPPED:
                break
        return result

    def state_tensors(self):
        tensors = OrderedDict()
        for prefix, net in (('actor', self.actor), ('critic', self.critic),
                            ('target_actor', self.target_actor), ('target_critic', self.target_critic)):
            for name, value in net.params.items():
                tensors[f"{prefix}.{name}"] = value
        return tensors

    def save(self, filename, config_text=""):
        with open(filename, 'wb') as f:
            f.write(encode_container(self.state_tensors(), config_text))
        return filename

    def load(self, filename):
        with open(filename, 'rb') as f:
            _, tensors = decode_container(f.read())
        for prefix, net in (('actor', self.actor), ('critic', self.critic),
                            ('target_actor', self.target_actor), ('target_critic', self.target_critic)):
            for name in net.params:
                net.params[name] = tensors[f"{prefix}.{name}"].astype(DTYPE)


def ddpg_act(agent, state, explore=False):
    return agent.act(state, explore)


def ddpg_update(agent):
    return agent.update()


class DdpgController:
    """One agent per gated interface, sharing the epoch reward"""

    def __init__(self, cfg, interfaces, clients, ushape, initial_thetas, seed):
        cfg.validate()
        self.cfg = cfg
        self.alpha = cfg.alpha_ushape if ushape else cfg.alpha
        self.beta = cfg.beta_ushape if ushape else cfg.beta
        sigma0 = cfg.sigma0_ushape if ushape else cfg.sigma0
        self.agents = OrderedDict(
            (name, DdpgAgent(clients + 4, cfg, sigma0, seed, name=name)) for name in interfaces)
        self.thetas = dict(initial_thetas)
        self._previous = {}
        self._loss0 = None
        self.last_updates = {}

    def observe(self, feedback, state):
        if self._loss0 is None:
            self._loss0 = feedback.val_loss
        ratio = feedback.comm_ratio
        r = reward(feedback.val_loss, self._loss0, feedback.gated_bytes, max(1, feedback.baseline_bytes),
                   ratio < self.cfg.zero_ratio, ratio > self.cfg.full_ratio,
                   self.alpha, self.beta, self.cfg.p_zero, self.cfg.p_full)
        for name, agent in self.agents.items():
            vector = state.vector(name)
            if name in self._previous:
                prev_state, prev_action = self._previous[name]
                agent.remember(prev_state, prev_action, r, vector)
            result = agent.learn()
            self.last_updates[name] = result
            if result.status == SKIPPED:
                logger.warning("DDPG %s update skipped: %d/%d transitions buffered",
                               name, len(agent.buffer), self.cfg.minibatch)
            theta = agent.act(vector, explore=True)
            agent.end_epoch()
            self._previous[name] = (vector, theta)
            self.thetas[name] = theta
        logger.debug("DDPG reward %.4f -> thetas %s", r, self.thetas)
        return dict(self.thetas)

    def save(self, directory, config_text=""):
        return [agent.save(f"{directory}/agent_{name}.scmd", config_text) for name, agent in self.agents.items()]

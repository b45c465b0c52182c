"""
Module: DQN
Description: dense Q-network with manual backpropagation, double-DQN targets, experience
replay, soft target updates, Adam optimizer and epsilon-greedy exploration in numpy
"""

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from functions.data_reader import config_hash
from functions.relay_env import N_ACTIONS

FORMAT_VERSION = 1


class TrainingFaultError(RuntimeError):
    """non-finite loss or parameters during training

    Args:
        message (str): what went wrong
        diagnostics (dict): loss, step and parameter norms at the time of failure
    """

    def __init__(self, message: str, diagnostics: dict = None) -> None:
        self.diagnostics = diagnostics or {}
        super().__init__(f'{message} {self.diagnostics}')


class ReplayNotReady(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    tau: float = 0.005
    # * rewards enter the TD targets multiplied by this; greedy actions do not depend on it
    reward_scale: float = 0.01
    batch_size: int = 32
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal: float = 0.6
    double_dqn: bool = True
    buffer_capacity: int = 2000
    warmup: int = 200
    hidden: tuple = (128, 256, 128)
    episodes_single: int = 1500
    episodes_nested: int = 800

    def __post_init__(self):
        for name in ('learning_rate', 'tau'):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f'{name} must be in (0, 1)')
        if self.reward_scale <= 0:
            raise ValueError('reward_scale must be positive')
        for name in ('epsilon_start', 'epsilon_end', 'epsilon_anneal'):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f'{name} must be in [0, 1]')
        for name in ('batch_size', 'buffer_capacity', 'episodes_single', 'episodes_nested'):
            if getattr(self, name) < 1:
                raise ValueError(f'{name} must be positive')
        if self.batch_size > self.buffer_capacity or self.warmup > self.buffer_capacity:
            raise ValueError('batch_size and warmup must not exceed buffer_capacity')
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))

    def epsilon(self, episode: int, n_episodes: int) -> float:
        """linear annealing over the first epsilon_anneal share of episodes, constant afterwards"""
        horizon = self.epsilon_anneal * n_episodes
        if horizon <= 0 or episode >= horizon:
            return self.epsilon_end
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * episode / horizon

    def config_hash(self) -> str:
        return config_hash(self)


class QNetwork():
    """fully connected ReLU network with a linear head"""

    def __init__(self, weights: list, biases: list) -> None:
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]

    @classmethod
    def initialize(cls, dims: list, rng: np.random.Generator) -> 'QNetwork':
        """He-uniform weights scaled by fan-in, zero biases"""
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def dims(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> 'QNetwork':
        return QNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def _forward(self, x: np.ndarray) -> tuple:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dims[0]:
            raise ValueError(f'observation has {x.shape[-1]} features, network expects {self.dims[0]}')
        activations, pre = [x], []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = activations[-1] @ w + b
            pre.append(z)
            activations.append(z if k == len(self.weights) - 1 else np.maximum(z, 0))
        return activations, pre

    def forward(self, x) -> np.ndarray:
        """action values for one observation (d,) or a batch (B, d)"""
        return self._forward(x)[0][-1]

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(p.tobytes())
        return h.hexdigest()

    def to_dict(self, **meta) -> dict:
        return {'format_version': FORMAT_VERSION, 'dims': self.dims,
                'layers': [{'W': w.tolist(), 'b': b.tolist()} for w, b in zip(self.weights, self.biases)],
                **meta}

    def to_json(self, path: str, **meta) -> None:
        with open(path, 'w') as f:
            json.dump(self.to_dict(**meta), f)

    @classmethod
    def from_dict(cls, doc: dict) -> 'QNetwork':
        if doc.get('format_version') != FORMAT_VERSION:
            raise ValueError(f'unsupported weights format {doc.get("format_version")}')
        net = cls([layer['W'] for layer in doc['layers']], [layer['b'] for layer in doc['layers']])
        if net.dims != list(doc['dims']):
            raise ValueError(f'layer shapes {net.dims} do not match dims {doc["dims"]}')
        return net

    @classmethod
    def from_json(cls, path: str) -> 'QNetwork':
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))


def gradients(net: QNetwork, obs: np.ndarray, actions: np.ndarray, targets: np.ndarray) -> tuple:
    """gradients of the mean squared TD error (1/B) sum (y - Q(s, a))^2

    Raises:
        TrainingFaultError: the loss is not finite

    Returns:
        tuple: (loss, weight gradients, bias gradients)
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    actions = np.asarray(actions, dtype=int)
    targets = np.asarray(targets, dtype=float)
    batch = obs.shape[0]
    activations, pre = net._forward(obs)
    q_taken = activations[-1][np.arange(batch), actions]
    residual = targets - q_taken
    loss = float(np.mean(residual ** 2))
    if not np.isfinite(loss):
        raise TrainingFaultError('non-finite loss', {'loss': loss, 'max_abs_q': float(np.max(np.abs(activations[-1])))})

    delta = np.zeros_like(activations[-1])
    delta[np.arange(batch), actions] = -2.0 * residual / batch
    grad_w, grad_b = [None] * len(net.weights), [None] * len(net.weights)
    for k in reversed(range(len(net.weights))):
        grad_w[k] = activations[k].T @ delta
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ net.weights[k].T) * (pre[k - 1] > 0)
    return loss, grad_w, grad_b


def td_targets(
        rewards: np.ndarray,
        next_obs: np.ndarray,
        terminals: np.ndarray,
        online: QNetwork,
        target: QNetwork,
        gamma: float,
        double: bool = True) -> np.ndarray:
    """bootstrapped targets; double DQN picks the next action with the online net and scores it with the target net"""
    rewards = np.asarray(rewards, dtype=float)
    q_next_target = target.forward(np.atleast_2d(next_obs))
    if double:
        best = np.argmax(online.forward(np.atleast_2d(next_obs)), axis=1)
        bootstrap = q_next_target[np.arange(len(best)), best]
    else:
        bootstrap = q_next_target.max(axis=1)
    return rewards + gamma * bootstrap * (1.0 - np.asarray(terminals, dtype=float))


def adam_step(
        params: list,
        grads: list,
        m: list,
        v: list,
        step: int,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8) -> tuple:
    """one bias-corrected Adam update; step counts from 1

    Returns:
        tuple: (new params, new first moments, new second moments)
    """
    new_p, new_m, new_v = [], [], []
    for p, g, m_k, v_k in zip(params, grads, m, v):
        m_k = beta1 * m_k + (1 - beta1) * g
        v_k = beta2 * v_k + (1 - beta2) * g * g
        m_hat = m_k / (1 - beta1 ** step)
        v_hat = v_k / (1 - beta2 ** step)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m_k)
        new_v.append(v_k)
    return new_p, new_m, new_v


class AdamOptimizer():
    def __init__(self, net: QNetwork, lr: float) -> None:
        self.lr = lr
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in net.params()]
        self.v = [np.zeros_like(p) for p in net.params()]

    def step(self, net: QNetwork, grad_w: list, grad_b: list) -> None:
        self.step_count += 1
        params, self.m, self.v = adam_step(
            net.params(), [*grad_w, *grad_b], self.m, self.v, self.step_count, self.lr)
        n = len(net.weights)
        net.weights, net.biases = params[:n], params[n:]


def soft_update(target: QNetwork, online: QNetwork, tau: float) -> QNetwork:
    target.weights = [(1 - tau) * t + tau * o for t, o in zip(target.weights, online.weights)]
    target.biases = [(1 - tau) * t + tau * o for t, o in zip(target.biases, online.biases)]
    return target


def select_action(q_values: np.ndarray, epsilon: float, rng: np.random.Generator = None) -> int:
    """epsilon-greedy choice; ties go to the lowest index"""
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(len(q_values)))
    return int(np.argmax(q_values))


class ReplayBuffer():
    """fixed-capacity FIFO ring of transitions (s, a, r, s', terminal)"""

    def __init__(self, capacity: int, obs_dim: int) -> None:
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def push(self, obs, action: int, reward: float, next_obs, terminal: bool) -> None:
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f'action must be in [0, {N_ACTIONS - 1}], got {action}')
        k = self.cursor
        self.obs[k] = obs
        self.actions[k] = action
        self.rewards[k] = reward
        self.next_obs[k] = next_obs
        self.terminals[k] = terminal
        self.cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ordered_indices(self) -> np.ndarray:
        """slots from oldest to newest"""
        start = self.cursor if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> tuple:
        """uniform sample with replacement

        Raises:
            ReplayNotReady: fewer stored transitions than batch_size

        Returns:
            tuple: (obs, actions, rewards, next_obs, terminals)
        """
        if self.size < batch_size:
            raise ReplayNotReady(f'buffer holds {self.size} transitions, need {batch_size}')
        idx = rng.integers(0, self.size, size=batch_size)
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.terminals[idx]


class DQNAgent():
    """online/target network pair with replay and Adam for one agent unit; gamma is the environment discount"""

    def __init__(self, obs_dim: int, config: TrainConfig, rng: np.random.Generator, gamma: float = 0.99) -> None:
        if not 0 <= gamma < 1:
            raise ValueError('gamma must be in [0, 1)')
        self.config = config
        self.gamma = gamma
        self.rng = rng
        self.online = QNetwork.initialize([obs_dim, *config.hidden, N_ACTIONS], rng)
        self.target = self.online.copy()
        self.optimizer = AdamOptimizer(self.online, config.learning_rate)
        self.buffer = ReplayBuffer(config.buffer_capacity, obs_dim)
        self.updates = 0

    def act(self, obs: np.ndarray, epsilon: float) -> int:
        return select_action(self.online.forward(obs), epsilon, self.rng)

    def remember(self, obs, action: int, reward: float, next_obs, terminal: bool) -> None:
        self.buffer.push(obs, action, reward, next_obs, terminal)

    def learn(self) -> float:
        """one replay gradient step and soft target update; None while warming up"""
        cfg = self.config
        if len(self.buffer) < max(cfg.warmup, cfg.batch_size):
            return None
        try:
            obs, actions, rewards, next_obs, terminals = self.buffer.sample(cfg.batch_size, self.rng)
        except ReplayNotReady:
            return None
        targets = td_targets(rewards * cfg.reward_scale, next_obs, terminals, self.online, self.target, self.gamma,
                             cfg.double_dqn)
        loss, grad_w, grad_b = gradients(self.online, obs, actions, targets)
        self.optimizer.step(self.online, grad_w, grad_b)
        soft_update(self.target, self.online, cfg.tau)
        self.updates += 1
        if not self.online.all_finite():
            raise TrainingFaultError('non-finite weights', {'loss': loss, 'update': self.updates})
        if self.updates % 1000 == 0:
            logging.debug(f'update {self.updates}: loss {loss:.4f}')
        return loss


class GreedyPolicy():
    """frozen greedy policy of a trained network"""

    def __init__(self, net: QNetwork) -> None:
        self.net = net

    def __call__(self, obs: np.ndarray) -> int:
        return int(np.argmax(self.net.forward(obs)))


class NullPolicy():
    """always resets the counter, so the breaker never opens"""

    def __call__(self, obs: np.ndarray) -> int:
        return 0

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from omnidrl.configurator.settings.config import TrainConfig
from omnidrl.domain.exceptions import ContractViolationError
from omnidrl.service.network import QNetwork, softmax

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Batch:
    states: NDArray[np.float32]
    actions: NDArray[np.int64]
    rewards: NDArray[np.float64]
    next_states: NDArray[np.float32]
    terminals: NDArray[np.bool_]

    def __len__(self) -> int:
        return len(self.actions)


class _Ring:
    """Fixed-capacity ring of equally shaped observations"""

    def __init__(self, capacity: int, shape: Tuple[int, ...], quantize: bool):
        self.quantize = quantize
        self.data = np.zeros((capacity,) + tuple(shape), dtype=np.uint8 if quantize else np.float32)

    def put(self, slot: int, value: NDArray) -> None:
        # crops are multiples of 1/255, so the uint8 form is lossless
        self.data[slot] = np.rint(np.asarray(value) * 255.0) if self.quantize else value

    def get(self, idx: NDArray[np.int64]) -> NDArray[np.float32]:
        values = self.data[idx]
        return values.astype(np.float32) / 255.0 if self.quantize else values


class ReplayMemory:
    """Uniform experience replay D with a separate store of labelled crops for the classification branch"""

    def __init__(self, capacity: int, state_shape: Tuple[int, ...], quantize: bool = True):
        if capacity <= 0:
            raise ValueError("Replay capacity must be positive")
        self.capacity = capacity
        self.state_shape = tuple(state_shape)
        self.quantize = quantize
        self._states = _Ring(capacity, self.state_shape, quantize)
        self._next_states = _Ring(capacity, self.state_shape, quantize)
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._rewards = np.zeros(capacity, dtype=np.float64)
        self._terminals = np.zeros(capacity, dtype=bool)
        self._crops = _Ring(capacity, self.state_shape, quantize)
        self._labels = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.position = 0
        self.labelled_size = 0
        self.labelled_position = 0

    def __len__(self) -> int:
        return self.size

    def push(self, state: NDArray, action: int, reward: float, next_state: NDArray, terminal: bool) -> None:
        slot = self.position
        self._states.put(slot, state)
        self._next_states.put(slot, next_state)
        self._actions[slot] = action
        self._rewards[slot] = reward
        self._terminals[slot] = terminal
        self.position = (slot + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_labelled(self, crop: NDArray, label: int) -> None:
        slot = self.labelled_position
        self._crops.put(slot, crop)
        self._labels[slot] = label
        self.labelled_position = (slot + 1) % self.capacity
        self.labelled_size = min(self.labelled_size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> NDArray[np.int64]:
        if self.size == 0:
            raise ContractViolationError("Cannot sample from an empty replay memory")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(batch_size, rng)
        return Batch(
            states=self._states.get(idx),
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_states=self._next_states.get(idx),
            terminals=self._terminals[idx],
        )

    def sample_labelled(self, batch_size: int, rng: np.random.Generator) -> Tuple[NDArray[np.float32], NDArray[np.int64]]:
        if self.labelled_size == 0:
            raise ContractViolationError("No labelled crops stored")
        idx = rng.integers(0, self.labelled_size, size=batch_size)
        return self._crops.get(idx), self._labels[idx]

    def state_dict(self) -> Dict[str, NDArray]:
        return {
            "states": self._states.data,
            "next_states": self._next_states.data,
            "actions": self._actions,
            "rewards": self._rewards,
            "terminals": self._terminals,
            "crops": self._crops.data,
            "labels": self._labels,
            "counters": np.array([self.size, self.position, self.labelled_size, self.labelled_position], dtype=np.int64),
        }

    def load_state_dict(self, state: Dict[str, NDArray]) -> None:
        if state["states"].shape != self._states.data.shape or state["states"].dtype != self._states.data.dtype:
            raise ContractViolationError(f"Replay snapshot shape {state['states'].shape} does not match memory {self._states.data.shape}")
        self._states.data[...] = state["states"]
        self._next_states.data[...] = state["next_states"]
        self._actions[...] = state["actions"]
        self._rewards[...] = state["rewards"]
        self._terminals[...] = state["terminals"]
        self._crops.data[...] = state["crops"]
        self._labels[...] = state["labels"]
        self.size, self.position, self.labelled_size, self.labelled_position = (int(c) for c in state["counters"])


class TargetNetwork:
    """Snapshot of the online parameters, refreshed every sync_period steps"""

    def __init__(self, online: QNetwork, sync_period: int):
        self.net = online.clone()
        self.sync_period = sync_period
        self.sync_steps: List[int] = []

    def sync(self, online: QNetwork, step: int) -> None:
        self.net.set_flat(online.get_flat())
        self.sync_steps.append(step)
        logger.debug(f"Target network synced at step {step}")

    def maybe_sync(self, online: QNetwork, step: int) -> bool:
        if step > 0 and step % self.sync_period == 0:
            self.sync(online, step)
            return True
        return False


class SGD:
    """Plain stochastic gradient descent with optional momentum"""

    def __init__(self, params: Sequence[NDArray[np.float64]], learning_rate: float, momentum: float = 0.0):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[NDArray[np.float64]]) -> None:
        for param, grad, velocity in zip(self.params, grads, self.velocity):
            if self.momentum > 0.0:
                velocity *= self.momentum
                velocity += grad
                param -= self.learning_rate * velocity
            else:
                param -= self.learning_rate * grad

    def flat_velocity(self) -> NDArray[np.float64]:
        return np.concatenate([v.ravel() for v in self.velocity]) if self.velocity else np.empty(0)

    def set_flat_velocity(self, flat: NDArray[np.float64]) -> None:
        offset = 0
        for v in self.velocity:
            v[...] = flat[offset : offset + v.size].reshape(v.shape)
            offset += v.size


def ddqn_target(batch: Batch, online: QNetwork, target: TargetNetwork, gamma: float) -> NDArray[np.float64]:
    """r + gamma * Q(s', argmax_a Q(s', a; online); target), or r alone for terminal samples"""
    if len(batch) == 0:
        raise ContractViolationError("Empty batch")
    best_next = np.argmax(online.q_values(batch.next_states), axis=1)
    q_next = target.net.q_values(batch.next_states)[np.arange(len(batch)), best_next]
    return batch.rewards + gamma * np.where(batch.terminals, 0.0, q_next)


def drl_loss(batch: Batch, online: QNetwork, target: TargetNetwork, gamma: float) -> Tuple[float, NDArray[np.float64]]:
    """Mean squared TD error and its gradient; only the taken action's output receives gradient"""
    targets = ddqn_target(batch, online, target, gamma)
    online.zero_grads()
    q = online.q_values(batch.states)
    rows = np.arange(len(batch))
    residual = q[rows, batch.actions] - targets
    grad_q = np.zeros_like(q)
    grad_q[rows, batch.actions] = 2.0 * residual / len(batch)
    online.backward(grad_q=grad_q)
    return float(np.mean(residual**2)), online.flat_grads()


def cls_loss(crops: NDArray, labels: NDArray[np.int64], net: QNetwork) -> Tuple[float, NDArray[np.float64]]:
    """Mean softmax cross-entropy of the class head and its gradient"""
    labels = np.asarray(labels, dtype=np.int64)
    if np.any((labels < 0) | (labels >= net.spec.n_classes)):
        raise ContractViolationError(f"Labels must lie in [0, {net.spec.n_classes})")
    net.zero_grads()
    logits = net.class_logits(crops)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -float(np.mean(log_probs[rows, labels]))

    grad_logits = np.exp(log_probs)
    grad_logits[rows, labels] -= 1.0
    net.backward(grad_logits=grad_logits / len(labels))
    return loss, net.flat_grads()


def boltzmann_probabilities(q: NDArray, temperature: float) -> NDArray[np.float64]:
    if temperature <= 0.0:
        raise ValueError("Temperature must be positive")
    return softmax(np.asarray(q, dtype=np.float64) / temperature)


def select_action_boltzmann(q: NDArray, temperature: float, rng: np.random.Generator) -> int:
    probabilities = boltzmann_probabilities(q, temperature)
    return int(rng.choice(len(probabilities), p=probabilities))


def select_action_greedy(q: NDArray) -> int:
    return int(np.argmax(q))


def classify(net: QNetwork, crop: NDArray) -> int:
    """Class with the highest softmax probability; ties go to class 0"""
    return int(np.argmax(net.class_probabilities(np.asarray(crop)[None])[0]))


def temperature_at(step: int, config: TrainConfig) -> float:
    """Linear decay from temperature_start to temperature_end over the first decay fraction of training"""
    horizon = config.temperature_decay_fraction * config.max_steps
    progress = min(step / horizon, 1.0) if horizon > 0 else 1.0
    return config.temperature_start + progress * (config.temperature_end - config.temperature_start)

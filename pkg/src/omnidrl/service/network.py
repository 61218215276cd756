"""Multi-task Q-network written directly in numpy.

A shared convolutional trunk feeds two branches with hard parameter sharing:
the Q-branch (one value per action) and the classification branch (two
logits). Every layer implements its own forward and backward pass; the
gradients of both branches accumulate into the shared trunk.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray

from omnidrl.configurator.settings.config import ArchitectureSpec, ConvSpec
from omnidrl.domain.exceptions import ContractViolationError

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]


class Layer:
    params: List[Array]
    grads: List[Array]

    def __init__(self) -> None:
        self.params = []
        self.grads = []

    def forward(self, x: Array) -> Array:
        raise NotImplementedError

    def backward(self, grad: Array) -> Array:
        raise NotImplementedError

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return shape

    def zero_grads(self) -> None:
        for g in self.grads:
            g.fill(0.0)


class Conv2D(Layer):
    """Zero-padded 2D convolution over (N, C, H, W) inputs"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2
        fan_in = in_channels * kernel * kernel
        self.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel, kernel))
        self.bias = np.zeros(out_channels)
        self.params = [self.weight, self.bias]
        self.grads = [np.zeros_like(self.weight), np.zeros_like(self.bias)]
        self._windows: Optional[Array] = None
        self._padded_shape: Tuple[int, ...] = ()

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        _, height, width = shape
        out_h = (height + 2 * self.padding - self.kernel) // self.stride + 1
        out_w = (width + 2 * self.padding - self.kernel) // self.stride + 1
        return (self.weight.shape[0], out_h, out_w)

    def forward(self, x: Array) -> Array:
        p = self.padding
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self._padded_shape = padded.shape
        windows = sliding_window_view(padded, (self.kernel, self.kernel), axis=(2, 3))[:, :, :: self.stride, :: self.stride]
        self._windows = windows
        return np.einsum("nchwij,ocij->nohw", windows, self.weight, optimize=True) + self.bias[None, :, None, None]

    def backward(self, grad: Array) -> Array:
        windows = self._windows
        self.grads[0] += np.einsum("nchwij,nohw->ocij", windows, grad, optimize=True)
        self.grads[1] += grad.sum(axis=(0, 2, 3))

        grad_windows = np.einsum("nohw,ocij->nchwij", grad, self.weight, optimize=True)
        grad_padded = np.zeros(self._padded_shape)
        out_h, out_w = grad.shape[2], grad.shape[3]
        s = self.stride
        for i in range(self.kernel):
            for j in range(self.kernel):
                grad_padded[:, :, i : i + s * out_h : s, j : j + s * out_w : s] += grad_windows[..., i, j]
        p = self.padding
        return grad_padded[:, :, p : self._padded_shape[2] - p, p : self._padded_shape[3] - p]


class ReLU(Layer):
    def __init__(self) -> None:
        super().__init__()
        self._mask: Optional[NDArray[np.bool_]] = None

    def forward(self, x: Array) -> Array:
        self._mask = x > 0.0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad: Array) -> Array:
        return np.where(self._mask, grad, 0.0)


class Flatten(Layer):
    def __init__(self) -> None:
        super().__init__()
        self._shape: Tuple[int, ...] = ()

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return (int(np.prod(shape)),)

    def forward(self, x: Array) -> Array:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: Array) -> Array:
        return grad.reshape(self._shape)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(in_features, out_features))
        self.bias = np.zeros(out_features)
        self.params = [self.weight, self.bias]
        self.grads = [np.zeros_like(self.weight), np.zeros_like(self.bias)]
        self._input: Optional[Array] = None

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return (self.weight.shape[1],)

    def forward(self, x: Array) -> Array:
        self._input = x
        return x @ self.weight + self.bias

    def backward(self, grad: Array) -> Array:
        self.grads[0] += self._input.T @ grad
        self.grads[1] += grad.sum(axis=0)
        return grad @ self.weight.T


class Sequential:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def forward(self, x: Array) -> Array:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: Array) -> Array:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    @property
    def params(self) -> List[Array]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self) -> List[Array]:
        return [g for layer in self.layers for g in layer.grads]


def _conv_stack(specs: Sequence[ConvSpec], in_channels: int, rng: np.random.Generator) -> Tuple[List[Layer], int]:
    layers: List[Layer] = []
    for spec in specs:
        layers += [Conv2D(in_channels, spec.out_channels, spec.kernel, spec.stride, rng), ReLU()]
        in_channels = spec.out_channels
    return layers, in_channels


def softmax(logits: Array) -> Array:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class QNetwork:
    """Shared trunk with a Q-branch and an optional classification branch"""

    def __init__(self, spec: ArchitectureSpec, rng: np.random.Generator):
        self.spec = spec
        if spec.feature_size is not None:
            self.input_shape: Tuple[int, ...] = (spec.feature_size,)
        else:
            self.input_shape = (spec.channels, spec.input_resolution, spec.input_resolution)

        trunk_layers, channels = _conv_stack(spec.shared_conv, spec.channels, rng)
        self.trunk = Sequential(trunk_layers)
        trunk_shape = self.trunk.output_shape(self.input_shape)

        self.q_branch = self._build_branch(trunk_shape, channels, spec.n_actions, rng)
        self.cls_branch = self._build_branch(trunk_shape, channels, spec.n_classes, rng) if spec.multi_task else None
        self._trunk_out: Optional[Array] = None
        logger.debug(f"QNetwork with {self.n_params} parameters, input {self.input_shape}, multi_task={spec.multi_task}")

    def _build_branch(self, trunk_shape: Tuple[int, ...], channels: int, n_out: int, rng: np.random.Generator) -> Sequential:
        layers, _ = _conv_stack(self.spec.branch_conv, channels, rng)
        shape = Sequential(layers).output_shape(trunk_shape)
        if len(shape) > 1:
            layers.append(Flatten())
        features = int(np.prod(shape))
        for hidden in self.spec.fc_hidden:
            layers += [Dense(features, hidden, rng), ReLU()]
            features = hidden
        layers.append(Dense(features, n_out, rng))
        return Sequential(layers)

    @property
    def branches(self) -> List[Sequential]:
        return [self.trunk, self.q_branch] + ([self.cls_branch] if self.cls_branch is not None else [])

    @property
    def params(self) -> List[Array]:
        return [p for branch in self.branches for p in branch.params]

    @property
    def grads(self) -> List[Array]:
        return [g for branch in self.branches for g in branch.grads]

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def _check_input(self, x: NDArray) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ContractViolationError(f"Network expects inputs of shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        return x

    def forward(self, x: NDArray) -> Tuple[Array, Optional[Array]]:
        """(q values (N, n_actions), class logits (N, n_classes) or None)"""
        features = self.trunk.forward(self._check_input(x))
        self._trunk_out = features
        q = self.q_branch.forward(features)
        logits = self.cls_branch.forward(features) if self.cls_branch is not None else None
        return q, logits

    def q_values(self, x: NDArray) -> Array:
        features = self.trunk.forward(self._check_input(x))
        self._trunk_out = features
        return self.q_branch.forward(features)

    def class_logits(self, x: NDArray) -> Array:
        if self.cls_branch is None:
            raise ContractViolationError("Single-task network has no classification branch")
        features = self.trunk.forward(self._check_input(x))
        self._trunk_out = features
        return self.cls_branch.forward(features)

    def class_probabilities(self, x: NDArray) -> Array:
        return softmax(self.class_logits(x))

    def backward(self, grad_q: Optional[Array] = None, grad_logits: Optional[Array] = None) -> None:
        """Accumulate parameter gradients for the branch outputs of the most recent forward pass"""
        grad_features = np.zeros_like(self._trunk_out)
        if grad_q is not None:
            grad_features += self.q_branch.backward(grad_q)
        if grad_logits is not None:
            if self.cls_branch is None:
                raise ContractViolationError("Single-task network has no classification branch")
            grad_features += self.cls_branch.backward(grad_logits)
        self.trunk.backward(grad_features)

    def zero_grads(self) -> None:
        for g in self.grads:
            g.fill(0.0)

    def get_flat(self) -> Array:
        return np.concatenate([p.ravel() for p in self.params]) if self.params else np.empty(0)

    def set_flat(self, flat: NDArray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ContractViolationError(f"Parameter vector has {flat.size} entries, network has {self.n_params}")
        offset = 0
        for p in self.params:
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def flat_grads(self) -> Array:
        return np.concatenate([g.ravel() for g in self.grads]) if self.grads else np.empty(0)

    def clone(self) -> "QNetwork":
        twin = QNetwork(self.spec, np.random.default_rng(0))
        twin.set_flat(self.get_flat())
        return twin

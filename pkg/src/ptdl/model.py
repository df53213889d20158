"""Feed-forward ReLU classifier over a flat float64 parameter vector.

Parameters are plain 1-D ``np.ndarray`` values; the layout (per layer, a
row-major ``(d_in, d_out)`` weight block followed by a ``d_out`` bias) is
owned by :class:`ModelSpec`.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .data import Dataset


class LayoutError(ValueError):
    """Parameter vector does not match the model layout."""


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (128,)
    num_classes: int = 10
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if min(self.dims) < 1:
            raise ValueError("all layer widths must be >= 1")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    @property
    def dims_array(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.int64)

    @property
    def num_params(self) -> int:
        d = self.dims
        return sum((d_in + 1) * d_out for d_in, d_out in zip(d[:-1], d[1:]))

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        d = self.dims
        for i, (d_in, d_out) in enumerate(zip(d[:-1], d[1:])):
            out.append((f"w{i}", (d_in, d_out)))
            out.append((f"b{i}", (d_out,)))
        return out

    def check(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta)
        if theta.shape != (self.num_params,):
            raise LayoutError(f"expected {self.num_params} parameters, got shape {theta.shape}")
        return theta


def init_params(spec: ModelSpec, seed: int | None = None) -> np.ndarray:
    """All-zero vector when ``seed`` is None, else fan-in scaled uniform weights.

    The randomized init draws weights from U(-1/sqrt(d_in), 1/sqrt(d_in)) and
    sets biases to zero.
    """
    theta = np.zeros(spec.num_params)
    if seed is None:
        return theta
    rng = np.random.default_rng(seed)
    off = 0
    for name, shape in spec.layout:
        size = int(np.prod(shape))
        if name.startswith("w"):
            bound = 1.0 / np.sqrt(shape[0])
            theta[off : off + size] = rng.uniform(-bound, bound, size)
        off += size
    return theta


def forward(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one example ``(d,)`` or a batch ``(n, d)``."""
    theta = spec.check(theta)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != spec.input_dim:
        raise LayoutError(f"input has {X.shape[1]} features, model expects {spec.input_dim}")
    probs = _kernels._softmax(_kernels.logits_np(theta, spec.dims_array, X))
    return probs[0] if single else probs


def loss_and_grad(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: int) -> tuple[float, np.ndarray]:
    """Cross-entropy loss of one example and its gradient w.r.t. ``theta``."""
    theta = spec.check(theta)
    grad, loss = _kernels.clipped_grad_sum_np(
        theta, spec.dims_array, np.asarray(x, dtype=np.float64)[None, :], np.array([y]), np.inf
    )
    return loss, grad


def batch_loss(spec: ModelSpec, theta: np.ndarray, data: Dataset) -> float:
    """Mean cross-entropy over ``data``."""
    probs = forward(spec, theta, data.X)
    py = probs[np.arange(len(data)), data.y]
    return float(-np.log(np.maximum(py, _kernels.PROB_FLOOR)).mean())


def clipped_grad_sum(spec: ModelSpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray, clip: float):
    """Sum of per-example gradients clipped to L2 norm ``clip``; returns (grad, loss_sum)."""
    theta = spec.check(theta)
    if X.shape[0] == 0:
        return np.zeros_like(theta), 0.0
    return _kernels.clipped_grad_sum(theta, spec.dims_array, X, y, clip)


def predict(spec: ModelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    return _kernels.predict(spec.check(theta), spec.dims_array, X)


def evaluate(spec: ModelSpec, theta: np.ndarray, test: Dataset) -> float:
    """Accuracy on ``test``; argmax ties resolve to the lowest class index."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    return float(np.mean(predict(spec, theta, test.X) == test.y))


# ------------------------------------------------------------------- serialization


def serialize_params(spec: ModelSpec, theta: np.ndarray) -> bytes:
    """Layout descriptor followed by little-endian float64 values.

    Descriptor: u32 layer count, then per layer u32 d_in, u32 d_out (all
    little-endian).
    """
    theta = spec.check(theta)
    d = spec.dims
    head = struct.pack("<I", len(d) - 1)
    head += b"".join(struct.pack("<II", a, b) for a, b in zip(d[:-1], d[1:]))
    return head + np.ascontiguousarray(theta, dtype="<f8").tobytes()


def deserialize_params(blob: bytes) -> tuple[ModelSpec, np.ndarray]:
    (n_layers,) = struct.unpack_from("<I", blob, 0)
    pairs = [struct.unpack_from("<II", blob, 4 + 8 * i) for i in range(n_layers)]
    dims = [pairs[0][0]] + [p[1] for p in pairs]
    spec = ModelSpec(dims[0], tuple(dims[1:-1]), dims[-1])
    theta = np.frombuffer(blob, dtype="<f8", offset=4 + 8 * n_layers).astype(np.float64)
    return spec, spec.check(theta)


def params_digest(spec: ModelSpec, theta: np.ndarray) -> bytes:
    return hashlib.sha256(serialize_params(spec, theta)).digest()

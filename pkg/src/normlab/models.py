"""Classifiers and losses.

Two architectures are available: ``paper_cnn`` (the two-conv MNIST network)
and ``toy_mlp`` (a tiny fully connected net for fast tests). Parameters are
plain ``dict[str, np.ndarray]`` mappings; nothing here mutates them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = Dict[str, np.ndarray]

ARCHITECTURES = ("paper_cnn", "toy_mlp")


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "paper_cnn"
    conv_channels: tuple[int, ...] = (32, 64)
    kernel: int = 5
    hidden: tuple[int, ...] = (1024,)
    input_shape: tuple[int, ...] = (1, 28, 28)
    num_classes: int = 10

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.arch == "paper_cnn":
            if len(self.input_shape) != 3:
                raise ValueError("paper_cnn expects a (C, H, W) input shape")
            _, h, w = self.input_shape
            div = 2 ** len(self.conv_channels)
            if h % div or w % div:
                raise ValueError(f"input {h}x{w} not divisible by {div} for pooling")
            if self.kernel % 2 != 1:
                raise ValueError("kernel size must be odd for same padding")

    @classmethod
    def paper_cnn(cls, **overrides) -> "ModelSpec":
        return cls(**overrides)

    @classmethod
    def toy_mlp(cls, input_dim: int = 2, hidden: tuple[int, ...] = (8,), num_classes: int = 2) -> "ModelSpec":
        return cls(arch="toy_mlp", conv_channels=(), kernel=1, hidden=tuple(hidden),
                   input_shape=(input_dim,), num_classes=num_classes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        if self.arch == "paper_cnn":
            c, h, w = self.input_shape
            for i, out_c in enumerate(self.conv_channels):
                shapes.append((f"conv{i}.w", (out_c, c, self.kernel, self.kernel)))
                shapes.append((f"conv{i}.b", (out_c,)))
                c, h, w = out_c, h // 2, w // 2
            width = c * h * w
        else:
            width = int(np.prod(self.input_shape))
        for i, units in enumerate(self.hidden):
            shapes.append((f"fc{i}.w", (width, units)))
            shapes.append((f"fc{i}.b", (units,)))
            width = units
        shapes.append(("out.w", (width, self.num_classes)))
        shapes.append(("out.b", (self.num_classes,)))
        return shapes


def init_params(spec: ModelSpec, seed: int) -> Params:
    """He-normal weights (std sqrt(2/fan_in)) and zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in spec.layer_shapes():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


def param_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def logits(spec: ModelSpec, params: Mapping[str, Tensor | np.ndarray], x) -> Tensor:
    p = {k: T.as_tensor(v) for k, v in params.items()}
    h = T.as_tensor(x)
    if spec.arch == "paper_cnn":
        if h.ndim != 4 or h.shape[1:] != tuple(spec.input_shape):
            raise T.ShapeError(f"paper_cnn input: expected (N, {', '.join(map(str, spec.input_shape))}), got {h.shape}")
        for i in range(len(spec.conv_channels)):
            h = T.maxpool2x2(T.relu(T.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"])))
        h = h.reshape(h.shape[0], -1)
    else:
        if h.ndim != 2 or h.shape[1] != spec.input_shape[0]:
            raise T.ShapeError(f"toy_mlp input: expected (N, {spec.input_shape[0]}), got {h.shape}")
    for i in range(len(spec.hidden)):
        h = T.relu(T.dense(h, p[f"fc{i}.w"], p[f"fc{i}.b"]))
    return T.dense(h, p["out.w"], p["out.b"])


# -- loss heads on logits --------------------------------------------------------


def check_labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes - 1}], got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def cross_entropy(z: Tensor, y, reduction: str = "mean") -> Tensor:
    """Negative log-softmax probability of the true class."""
    y = check_labels(y, z.shape[1])
    nll = -T.pick(T.log_softmax(z), y)
    return _reduce(nll, reduction)


def kl_consistency(z_clean: Tensor, z_adv: Tensor, reduction: str = "mean") -> Tensor:
    """KL(softmax(z_clean) || softmax(z_adv)) per example."""
    if z_clean.shape != z_adv.shape:
        raise T.ShapeError(f"kl_consistency: logits {z_clean.shape} vs {z_adv.shape}")
    lp = T.log_softmax(z_clean)
    lq = T.log_softmax(z_adv)
    kl = (T.exp(lp) * (lp - lq)).sum(axis=1)
    return _reduce(kl, reduction)


def _reduce(per_example: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return per_example.mean()
    if reduction == "sum":
        return per_example.sum()
    if reduction == "none":
        return per_example
    raise ValueError(f"unknown reduction {reduction!r}")


# -- Network: the model interface the attacks use ----------------------------


@dataclass
class Network:
    """A classifier bound to fixed parameters.

    Implements the attack-facing interface: :meth:`input_gradient` returns
    per-example losses and d(loss_i)/d(x_i), and :meth:`predict` returns labels.
    """

    spec: ModelSpec
    params: Params = field(repr=False)

    def logits(self, x) -> np.ndarray:
        return logits(self.spec, self.params, x).data

    def predict(self, x) -> np.ndarray:
        return predict(self, x)

    def input_gradient(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        xt = Tensor(x, requires_grad=True)
        per = cross_entropy(logits(self.spec, self.params, xt), y, reduction="none")
        (g,) = T.grad(per.sum(), [xt])
        return per.data.copy(), g


class ConsistencyObjective:
    """KL divergence from the clean predictions, as a function of the perturbed input.

    Used as the inner objective for TRADES; labels passed to
    :meth:`input_gradient` are ignored.
    """

    def __init__(self, net: Network, x_clean: np.ndarray):
        self.net = net
        self.x_clean = np.asarray(x_clean, dtype=np.float64)
        self._clean_logits = Tensor(net.logits(self.x_clean))

    def predict(self, x) -> np.ndarray:
        return self.net.predict(x)

    def input_gradient(self, x, y=None) -> tuple[np.ndarray, np.ndarray]:
        xt = Tensor(x, requires_grad=True)
        z = logits(self.net.spec, self.net.params, xt)
        per = kl_consistency(self._clean_logits, z, reduction="none")
        (g,) = T.grad(per.sum(), [xt])
        return per.data.copy(), g


def predict(net: Network, x, batch_size: int = 500) -> np.ndarray:
    """Argmax class per example; ties resolve to the smallest index."""
    x = np.asarray(x, dtype=np.float64)
    out = [np.argmax(net.logits(x[i:i + batch_size]), axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def cross_entropy_loss(net: Network, x, y) -> float:
    return float(cross_entropy(logits(net.spec, net.params, x), y).data)


def consistency_loss(net: Network, x, x_adv) -> float:
    z = logits(net.spec, net.params, x)
    z_adv = logits(net.spec, net.params, x_adv)
    return float(kl_consistency(z, z_adv).data)

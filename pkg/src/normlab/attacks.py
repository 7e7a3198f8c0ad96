"""Gradient attacks: FGSM, PGD and the second-order (S-O) attack.

Attacks work against any object with

* ``input_gradient(x, y) -> (per_example_loss, d loss_i / d x_i)``
* ``predict(x) -> labels``

:class:`~normlab.models.Network` is the main implementation; :class:`FunctionModel`
wraps a plain differentiable function for analytic tests.

Randomness is drawn from one generator per example, seeded by
``(seed, example index)``, so splitting a batch into chunks never changes
the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .geometry import DEGENERATE_NORM, Budget, Norm, batch_norms, clip_box, project_ball, steepest_direction


class AttackModel(Protocol):
    def input_gradient(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def predict(self, x: np.ndarray) -> np.ndarray: ...


class FlatDirectionError(ArithmeticError):
    """The finite-difference Hessian-vector product vanished."""


class FunctionModel:
    """Attack target built from a per-example loss written with tensor ops.

    ``loss_fn`` maps a (batch, ...) Tensor to a (batch,) Tensor of losses.
    ``classify`` is optional; without it every prediction is 0.
    """

    def __init__(self, loss_fn: Callable[[T.Tensor], T.Tensor], classify: Callable | None = None):
        self.loss_fn = loss_fn
        self.classify = classify

    def input_gradient(self, x, y=None):
        xt = T.Tensor(x, requires_grad=True)
        per = self.loss_fn(xt)
        (g,) = T.grad(per.sum(), [xt])
        return per.data.copy(), g

    def gradient(self, x) -> np.ndarray:
        """Gradient at a single unbatched point."""
        x = np.asarray(x, dtype=np.float64)
        return self.input_gradient(x[None])[1][0]

    def loss(self, x) -> np.ndarray:
        return self.loss_fn(T.Tensor(x)).data

    def predict(self, x):
        if self.classify is None:
            return np.zeros(len(x), dtype=np.int64)
        return np.asarray(self.classify(np.asarray(x)))


def linear_model(w) -> FunctionModel:
    """Loss ``w . x`` per example."""
    w = np.asarray(w, dtype=np.float64)
    return FunctionModel(lambda x: (x * T.Tensor(np.broadcast_to(w, x.shape))).sum(axis=1))


def quadratic_model(h) -> FunctionModel:
    """Loss ``0.5 x^T H x`` per example, H symmetric."""
    h = np.asarray(h, dtype=np.float64)
    return FunctionModel(lambda x: ((x @ T.Tensor(h)) * x).sum(axis=1) * 0.5)


@dataclass(frozen=True)
class SoConfig:
    """Settings of the noisy-gradient estimator behind the S-O attack.

    estimator="gaussian" averages gradients at ``x + d`` with d ~ N(0, sigma^2 I)
    over ``samples`` draws. estimator="fd" uses a unit random vector ``d``
    (refined by ``power_iters`` finite-difference power steps) and the gradient
    at ``x + xi*d``.
    """

    sigma: float = 0.05
    samples: int = 10
    xi: float = 1e-6
    power_iters: int = 0
    estimator: str = "gaussian"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.xi > 0:
            raise ValueError(f"xi must be > 0, got {self.xi}")
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if self.power_iters < 0:
            raise ValueError(f"power_iters must be >= 0, got {self.power_iters}")
        if self.estimator not in ("gaussian", "fd"):
            raise ValueError(f"unknown estimator {self.estimator!r}")

    def to_dict(self) -> dict:
        return dict(sigma=self.sigma, samples=self.samples, xi=self.xi,
                    power_iters=self.power_iters, estimator=self.estimator)


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    grad_norms: list[float]
    success: np.ndarray
    name: str = ""

    def feasible(self, x, budget: Budget | None, box=(0.0, 1.0), tol: float = 1e-9) -> np.ndarray:
        """Per-example check of the ball (and box) constraints."""
        ok = np.ones(len(x), dtype=bool)
        if budget is not None:
            ok &= batch_norms(self.x_adv - x, budget.norm) <= budget.epsilon + tol
        if box is not None:
            flat = self.x_adv.reshape(len(x), -1)
            ok &= (flat >= box[0] - tol).all(axis=1) & (flat <= box[1] + tol).all(axis=1)
        return ok


def example_rngs(seed: int, indices) -> list[np.random.Generator]:
    return [np.random.default_rng([int(seed), int(i)]) for i in indices]


def _normal(rngs, shape) -> np.ndarray:
    return np.stack([r.standard_normal(shape) for r in rngs])


def _step(x0, xt, direction, budget: Budget, box) -> np.ndarray:
    nxt = project_ball(x0, xt + budget.alpha * direction, budget)
    return clip_box(nxt, *box) if box is not None else nxt


def _mean_norm(g) -> float:
    return float(batch_norms(g, Norm.L2).mean())


def _prepare(x, y, indices):
    x = np.asarray(x, dtype=np.float64)
    y = None if y is None else np.asarray(y)
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    return x, y, indices


def _outcome(model, x, x_adv, trace, name) -> AttackOutcome:
    success = model.predict(x_adv) != model.predict(x)
    return AttackOutcome(x_adv=x_adv, grad_norms=trace, success=np.asarray(success), name=name)


def random_start_point(x, budget: Budget, rngs, box=(0.0, 1.0)) -> np.ndarray:
    """Uniform draw from the ball (linf) or a uniformly random radius-direction pair (l2)."""
    shape = x.shape[1:]
    if budget.norm is Norm.LINF:
        noise = np.stack([r.uniform(-budget.epsilon, budget.epsilon, size=shape) for r in rngs])
    else:
        noise = _normal(rngs, shape)
        dims = int(np.prod(shape))
        radii = np.array([r.uniform() ** (1.0 / dims) for r in rngs]) * budget.epsilon
        noise = steepest_direction(noise, Norm.L2) * radii.reshape((-1,) + (1,) * len(shape))
    start = project_ball(x, x + noise, budget)
    return clip_box(start, *box) if box is not None else start


def pgd(model, x, y, budget: Budget, random_start: bool = False, seed: int = 0, *,
        raw_gradient: bool = False, box=(0.0, 1.0), indices=None, start=None,
        record_trace: bool = True, name: str = "pgd") -> AttackOutcome:
    """Projected gradient ascent on the model loss inside ``budget``.

    Each step moves by ``alpha`` along the steepest ascent direction for the
    budget's norm (or along the raw gradient if ``raw_gradient``), projects
    back into the ball and clips to ``box``. The trace holds the batch-mean
    gradient l2 norm at every iterate, starting with the initial point.
    An explicit ``start`` (projected into the ball and box) overrides
    ``random_start``.
    """
    x, y, indices = _prepare(x, y, indices)
    if start is not None:
        xt = project_ball(x, np.asarray(start, dtype=np.float64), budget)
        xt = clip_box(xt, *box) if box is not None else xt
    elif random_start:
        xt = random_start_point(x, budget, example_rngs(seed, indices), box)
    else:
        xt = x.copy()
    trace: list[float] = []
    for _ in range(budget.steps):
        _, g = model.input_gradient(xt, y)
        trace.append(_mean_norm(g))
        direction = g if raw_gradient else steepest_direction(g, budget.norm)
        xt = _step(x, xt, direction, budget, box)
    if record_trace:
        trace.append(_mean_norm(model.input_gradient(xt, y)[1]))
    return _outcome(model, x, xt, trace, name)


def fgsm(model, x, y, budget: Budget, **kwargs) -> AttackOutcome:
    """A single step of size ``alpha``; ``budget.steps`` is ignored."""
    kwargs.setdefault("name", "fgsm")
    return pgd(model, x, y, replace(budget, steps=1), **kwargs)


def so_gradient_estimate(model, x, y, cfg: SoConfig, seed: int = 0, *, indices=None,
                         rngs=None, base_grad=None) -> np.ndarray:
    """Noise-averaged gradient used as the S-O ascent direction.

    Pass ``rngs`` (one generator per example) to continue existing noise
    streams; otherwise fresh ones are derived from ``seed`` and ``indices``.
    ``base_grad`` (the gradient at ``x``) is only needed by the "fd"
    estimator with ``power_iters > 0`` and is computed when missing.
    """
    x, y, indices = _prepare(x, y, indices)
    if rngs is None:
        rngs = example_rngs(seed, indices)
    shape = x.shape[1:]
    total = np.zeros_like(x)
    for _ in range(cfg.samples):
        if cfg.estimator == "gaussian":
            d = cfg.sigma * _normal(rngs, shape)
        else:
            d = steepest_direction(_normal(rngs, shape), Norm.L2)
            for _ in range(cfg.power_iters):
                if base_grad is None:
                    base_grad = model.input_gradient(x, y)[1]
                hd = model.input_gradient(x + cfg.xi * d, y)[1] - base_grad
                d = steepest_direction(hd, Norm.L2)
            d = cfg.xi * d
        total += model.input_gradient(x + d, y)[1]
    return total / cfg.samples


def so_attack(model, x, y, budget: Budget, cfg: SoConfig | None = None, seed: int = 0, *,
              sign_direction: bool = False, box=(0.0, 1.0), indices=None,
              record_trace: bool = True, name: str = "so") -> AttackOutcome:
    """PGD driven by the noise-averaged gradient, stepping along its l2 direction.

    ``sign_direction`` steps along sign(g) instead (an linf variant). When the
    estimate vanishes for an example, its noise is re-drawn once; if that
    also vanishes the example takes a random unit step.
    """
    cfg = cfg or SoConfig()
    x, y, indices = _prepare(x, y, indices)
    rngs = example_rngs(seed, indices)
    xt = x.copy()
    trace: list[float] = []
    for _ in range(budget.steps):
        base = None
        if record_trace or (cfg.estimator == "fd" and cfg.power_iters):
            base = model.input_gradient(xt, y)[1]
            trace.append(_mean_norm(base))
        g = so_gradient_estimate(model, xt, y, cfg, rngs=rngs, base_grad=base)
        dead = batch_norms(g, Norm.L2) < DEGENERATE_NORM
        if dead.any():
            idx = np.flatnonzero(dead)
            sub_rngs = [rngs[i] for i in idx]
            sub_y = None if y is None else y[idx]
            sub_base = None if base is None else base[idx]
            g[idx] = so_gradient_estimate(model, xt[idx], sub_y, cfg, rngs=sub_rngs, base_grad=sub_base)
            still = idx[batch_norms(g[idx], Norm.L2) < DEGENERATE_NORM]
            if still.size:
                g[still] = _normal([rngs[i] for i in still], x.shape[1:])
        direction = np.sign(g) if sign_direction else steepest_direction(g, Norm.L2)
        xt = _step(x, xt, direction, budget, box)
    if record_trace:
        trace.append(_mean_norm(model.input_gradient(xt, y)[1]))
    return _outcome(model, x, xt, trace, name)


def dominant_eigvec_powerfd(grad_fn: Callable[[np.ndarray], np.ndarray], x, xi: float = 1e-4,
                            iters: int = 20, seed: int = 0, *, fast: bool = False) -> np.ndarray:
    """Dominant Hessian eigenvector at ``x`` by power iteration.

    The Hessian-vector product is the finite difference
    ``(grad(x + xi d) - grad(x)) / xi``; ``fast=True`` drops the ``grad(x)``
    term, which is only valid where the gradient vanishes. Returns a unit
    vector with the shape of ``x``.
    """
    if iters < 0:
        raise ValueError(f"iters must be >= 0, got {iters}")
    if not xi > 0:
        raise ValueError(f"xi must be > 0, got {xi}")
    x = np.asarray(x, dtype=np.float64)
    d = np.random.default_rng(seed).standard_normal(x.shape)
    d /= np.linalg.norm(d)
    base = 0.0 if fast else grad_fn(x)
    for _ in range(iters):
        hd = (grad_fn(x + xi * d) - base) / xi
        n = np.linalg.norm(hd)
        if n < DEGENERATE_NORM:
            raise FlatDirectionError("Hessian-vector product vanished; the loss is flat along d")
        d = hd / n
    return d


# -- suites ---------------------------------------------------------------------

ATTACK_KINDS = ("natural", "fgsm", "pgd", "so")
TABLE_ROWS = ("Natural", "PGD-L2", "PGD-Linf", "SO-L2", "SO-Linf")


@dataclass(frozen=True)
class AttackSpec:
    name: str
    kind: str
    budget: Budget | None = None
    so: SoConfig = field(default_factory=SoConfig)
    seed: int = 0
    random_start: bool = False
    sign_direction: bool = False

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind != "natural" and self.budget is None:
            raise ValueError(f"attack {self.name!r} needs a budget")

    @property
    def steps(self) -> int:
        if self.kind == "natural":
            return 0
        return 1 if self.kind == "fgsm" else self.budget.steps

    def to_dict(self) -> dict:
        return dict(name=self.name, kind=self.kind,
                    budget=None if self.budget is None else self.budget.to_dict(),
                    so=self.so.to_dict(), seed=self.seed, random_start=self.random_start,
                    sign_direction=self.sign_direction)

    @classmethod
    def from_dict(cls, d) -> "AttackSpec":
        return cls(name=d["name"], kind=d["kind"],
                   budget=None if d.get("budget") is None else Budget.from_dict(d["budget"]),
                   so=SoConfig(**d.get("so", {})), seed=int(d.get("seed", 0)),
                   random_start=bool(d.get("random_start", False)),
                   sign_direction=bool(d.get("sign_direction", False)))


def default_suite(l2_eps: float = 4.0, linf_eps: float = 0.3, steps: int = 40,
                  so: SoConfig | None = None, seed: int = 0,
                  l2_alpha: float | None = None, linf_alpha: float | None = None) -> list[AttackSpec]:
    """The five evaluation rows: Natural, PGD-L2, PGD-Linf, SO-L2, SO-Linf."""
    so = so or SoConfig()
    l2 = Budget.default(Norm.L2, l2_eps, steps)
    linf = Budget.default(Norm.LINF, linf_eps, steps)
    if l2_alpha is not None:
        l2 = replace(l2, alpha=l2_alpha)
    if linf_alpha is not None:
        linf = replace(linf, alpha=linf_alpha)
    return [
        AttackSpec("Natural", "natural", seed=seed),
        AttackSpec("PGD-L2", "pgd", l2, so, seed=seed),
        AttackSpec("PGD-Linf", "pgd", linf, so, seed=seed),
        AttackSpec("SO-L2", "so", l2, so, seed=seed),
        AttackSpec("SO-Linf", "so", linf, so, seed=seed),
    ]


def select_suite(names: Sequence[str], suite: Sequence[AttackSpec] | None = None) -> list[AttackSpec]:
    """Pick attacks from ``suite`` (default: :func:`default_suite`) by name, in the given order."""
    table = {s.name.lower(): s for s in (suite or default_suite())}
    picked = []
    for n in names:
        if n.lower() not in table:
            raise KeyError(f"unknown attack {n!r}; known: {', '.join(s.name for s in table.values())}")
        picked.append(table[n.lower()])
    return picked


def run_attack(model, x, y, spec: AttackSpec, *, indices=None, box=(0.0, 1.0),
               record_trace: bool = True) -> AttackOutcome:
    if spec.kind == "natural":
        x = np.asarray(x, dtype=np.float64)
        trace = [_mean_norm(model.input_gradient(x, y)[1])] if record_trace else []
        return _outcome(model, x, x.copy(), trace, spec.name)
    common = dict(box=box, indices=indices, record_trace=record_trace, name=spec.name)
    if spec.kind == "fgsm":
        return fgsm(model, x, y, spec.budget, random_start=spec.random_start, seed=spec.seed, **common)
    if spec.kind == "pgd":
        return pgd(model, x, y, spec.budget, random_start=spec.random_start, seed=spec.seed, **common)
    return so_attack(model, x, y, spec.budget, spec.so, spec.seed, sign_direction=spec.sign_direction, **common)


def attack_suite(model, x, y, suite: Sequence[AttackSpec], *, indices=None,
                 box=(0.0, 1.0)) -> list[AttackOutcome]:
    """Run every attack in ``suite`` over the same examples, in order."""
    return [run_attack(model, x, y, spec, indices=indices, box=box) for spec in suite]

"""Natural, Madry, TRADES, mixed-norm and ensemble adversarial training.

All regimes share one loop: draw a batch, build its training inputs
(possibly adversarial), take one SGD step. Every random choice comes from a
stream derived from ``TrainConfig.seed``, so a run is reproducible bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attacks import pgd
from .data_io import Checkpoint, Dataset, DataError, batches, load_checkpoint
from .geometry import Budget
from .models import ConsistencyObjective, ModelSpec, Network, Params, cross_entropy, init_params, kl_consistency, logits
from .seeding import derive_seed

log = logging.getLogger(__name__)

REGIMES = ("natural", "madry", "trades", "mixed", "ensemble")

# TRADES starts its inner ascent this far from x: the KL gradient is exactly zero at x_adv == x.
TRADES_START_SCALE = 1e-3


class EnsembleLoadError(DataError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "natural"
    budgets: tuple[Budget, ...] = ()
    lam: float = 1.0
    epochs: int = 1
    batch_size: int = 50
    lr: float = 0.01
    momentum: float = 0.0
    seed: int = 0
    ensemble: tuple[str, ...] = ()
    alternation: str = "batch"
    random_start: bool = False
    eps_warmup: int = 0

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(self.budgets))
        object.__setattr__(self, "ensemble", tuple(str(p) for p in self.ensemble))
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {', '.join(REGIMES)}")
        if self.regime in ("madry", "trades", "ensemble") and len(self.budgets) != 1:
            raise ValueError(f"{self.regime} needs exactly one budget, got {len(self.budgets)}")
        if self.regime == "mixed":
            if len(self.budgets) != 2 or self.budgets[0].norm == self.budgets[1].norm:
                raise ValueError("mixed needs two budgets with distinct norms")
        if self.regime == "ensemble" and not self.ensemble:
            raise ValueError("ensemble needs at least one pre-trained checkpoint")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.alternation not in ("batch", "epoch"):
            raise ValueError(f"alternation must be 'batch' or 'epoch', got {self.alternation!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.eps_warmup < 0:
            raise ValueError(f"eps_warmup must be >= 0, got {self.eps_warmup}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    def provenance(self) -> dict:
        return {
            "regime": self.regime,
            "budgets": [b.to_dict() for b in self.budgets],
            "lambda": self.lam,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "seed": self.seed,
            "ensemble": list(self.ensemble),
            "alternation": self.alternation,
            "random_start": self.random_start,
            "eps_warmup": self.eps_warmup,
        }

    def epoch_budgets(self, epoch: int) -> tuple[Budget, ...]:
        """Budgets in force during ``epoch``: during warmup, epsilon and alpha scale by epoch / eps_warmup."""
        if epoch >= self.eps_warmup:
            return self.budgets
        scale = epoch / self.eps_warmup
        return tuple(b.with_(epsilon=b.epsilon * scale, alpha=b.alpha * scale if scale else b.alpha)
                     for b in self.budgets)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    natural_accuracy: float
    inner_loss: float | None


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs": [vars(r) for r in self.epochs]}


def alternation_schedule(batch_index: int, budgets: Sequence[Budget]) -> Budget:
    """Even index -> first budget, odd -> second."""
    if len(budgets) != 2 or budgets[0].norm == budgets[1].norm:
        raise ValueError("alternation needs two budgets with distinct norms")
    return budgets[batch_index % 2]


def inner_maximize(net: Network, x, y, regime: str, budget: Budget, seed: int = 0, *,
                   random_start: bool = False, indices=None) -> np.ndarray:
    """Adversarial inputs for one training batch.

    madry/mixed/ensemble ascend the cross-entropy; trades ascends the KL
    divergence from the clean predictions, starting from a tiny Gaussian
    offset of x.
    """
    if regime not in ("madry", "mixed", "ensemble", "trades"):
        raise ValueError(f"no inner maximization for regime {regime!r}")
    x = np.asarray(x, dtype=np.float64)
    if budget.steps == 0 or budget.epsilon == 0:
        return x.copy()
    if regime != "trades":
        return pgd(net, x, y, budget, random_start=random_start, seed=seed,
                   indices=indices, record_trace=False).x_adv
    rng = np.random.default_rng(seed)
    start = x + TRADES_START_SCALE * rng.standard_normal(x.shape)
    return pgd(ConsistencyObjective(net, x), x, None, budget, start=start, record_trace=False).x_adv


def load_ensemble(paths: Sequence[str]) -> list[Network]:
    nets = []
    for p in paths:
        try:
            cp = load_checkpoint(p)
        except (OSError, DataError) as exc:
            raise EnsembleLoadError(f"cannot load ensemble checkpoint {p}: {exc}") from exc
        nets.append(Network(cp.spec, cp.params))
    return nets


def _batch_loss(spec, pt, x, y, x_adv, cfg: TrainConfig):
    """Training loss, clean-input logits (None if not computed) and inner-objective value."""
    if cfg.regime == "natural":
        z = logits(spec, pt, x)
        return cross_entropy(z, y), z.data, None
    if cfg.regime == "trades":
        z = logits(spec, pt, x)
        kl = kl_consistency(z, logits(spec, pt, x_adv))
        return cross_entropy(z, y) + kl * cfg.lam, z.data, float(kl.data)
    loss = cross_entropy(logits(spec, pt, x_adv), y)
    return loss, None, float(loss.data)


def train(spec: ModelSpec, data: Dataset, cfg: TrainConfig, *, init: Params | None = None,
          ensemble: Sequence[Network] | None = None,
          on_batch: Callable[[int, int, float], None] | None = None) -> tuple[Params, TrainLog]:
    """Train a model from scratch (or from ``init``) under ``cfg.regime``.

    ``ensemble`` supplies already-loaded static models; otherwise they are read
    from ``cfg.ensemble``. ``on_batch(epoch, batch, loss)`` is an optional
    progress hook.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    params = {k: v.copy() for k, v in (init or init_params(spec, derive_seed(cfg.seed, "train.init"))).items()}
    if cfg.regime == "ensemble" and ensemble is None:
        ensemble = load_ensemble(cfg.ensemble)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    choice_rng = np.random.default_rng(derive_seed(cfg.seed, "train.ensemble"))
    trainlog = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        losses, inner_losses, correct, seen = [], [], 0, 0
        budgets = cfg.epoch_budgets(epoch)
        order_seed = derive_seed(cfg.seed, f"train.shuffle.{epoch}")
        for b, (x, y, idx) in enumerate(batches(data, cfg.batch_size, order_seed, shuffle=True)):
            net = Network(spec, params)
            inner_seed = derive_seed(cfg.seed, f"train.inner.{step}")
            x_adv = None
            if cfg.regime in ("madry", "trades"):
                x_adv = inner_maximize(net, x, y, cfg.regime, budgets[0], inner_seed,
                                       random_start=cfg.random_start, indices=idx)
            elif cfg.regime == "mixed":
                which = step if cfg.alternation == "batch" else epoch
                budget = alternation_schedule(which, budgets)
                x_adv = inner_maximize(net, x, y, "mixed", budget, inner_seed,
                                       random_start=cfg.random_start, indices=idx)
            elif cfg.regime == "ensemble":
                k = int(choice_rng.integers(len(ensemble) + 1))
                source = net if k == 0 else ensemble[k - 1]
                x_adv = inner_maximize(source, x, y, "ensemble", budgets[0], inner_seed,
                                       random_start=cfg.random_start, indices=idx)

            pt = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
            loss, clean_logits, inner = _batch_loss(spec, pt, x, y, x_adv, cfg)
            grads = T.grad(loss, list(pt.values()))
            for (name, value), g in zip(params.items(), grads):
                if cfg.momentum:
                    velocity[name] = cfg.momentum * velocity[name] + g
                    g = velocity[name]
                params[name] = value - cfg.lr * g

            if clean_logits is None:
                clean_logits = net.logits(x)
            correct += int((np.argmax(clean_logits, axis=1) == y).sum())
            seen += len(y)
            losses.append(float(loss.data) * len(y))
            if inner is not None:
                inner_losses.append(inner * len(y))
            if on_batch is not None:
                on_batch(epoch, b, float(loss.data))
            step += 1
        record = EpochRecord(epoch, sum(losses) / seen, correct / seen,
                             sum(inner_losses) / seen if inner_losses else None)
        log.info("epoch %d: loss %.4f, natural acc %.4f", epoch, record.train_loss, record.natural_accuracy)
        trainlog.epochs.append(record)
    return params, trainlog


def make_checkpoint(spec: ModelSpec, params: Params, cfg: TrainConfig, **extra) -> Checkpoint:
    return Checkpoint(spec, params, {**cfg.provenance(), **extra})

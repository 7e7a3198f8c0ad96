"""Command-line entry point: ``normlab train | attack | matrix``.

Configuration is a flat JSON object with dotted keys (``"train.eps": 0.3``).
Values come from the built-in defaults, then ``--config FILE``, then flags.
Every run writes the fully resolved configuration next to its outputs;
passing that file back with ``--config`` reproduces the outputs exactly.

Exit codes: 0 success, 1 runtime error, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, SoConfig, TABLE_ROWS, default_suite, select_suite
from .data_io import DataError, Dataset, load_checkpoint, load_mnist, save_checkpoint
from .evaluation import (accuracy, accuracy_matrix, attack_dataset, export_image_grid,
                         gradient_norm_trace)
from .geometry import Budget, Norm
from .models import ModelSpec, Network
from .seeding import derive_seed
from .training import TrainConfig, make_checkpoint, train

log = logging.getLogger("normlab")


class ConfigError(ValueError):
    pass


def _data_dir_default() -> str:
    return os.environ.get("NORMLAB_DATA_DIR", "data/mnist")


COMMON = {"data.dir": None, "seed": 0, "jobs": 1}

SO_KEYS = {"so.sigma": 0.05, "so.samples": 10, "so.xi": 1e-6, "so.power_iters": 0, "so.estimator": "gaussian"}

EVAL_KEYS = {"eval.split": "test", "eval.offset": 0, "eval.limit": 1000, "eval.batch_size": 100}

DEFAULTS = {
    "train": {
        **COMMON,
        "data.limit": None,
        "model.arch": "paper_cnn",
        "model.conv_channels": [32, 64],
        "model.hidden": [1024],
        "train.regime": "natural",
        "train.norm": "linf",
        "train.eps": 0.3,
        "train.alpha": None,
        "train.steps": 40,
        "train.norm2": "l2",
        "train.eps2": 4.0,
        "train.alpha2": None,
        "train.steps2": 40,
        "train.lambda": 1.0,
        "train.epochs": 1,
        "train.batch_size": 50,
        "train.lr": 0.01,
        "train.momentum": 0.0,
        "train.ensemble": [],
        "train.alternation": "batch",
        "train.random_start": False,
        "train.eps_warmup": 0,
        "out": "runs/model.ckpt",
    },
    "attack": {
        **COMMON,
        **EVAL_KEYS,
        **SO_KEYS,
        "model": None,
        "attack.kind": "pgd",
        "attack.norm": "linf",
        "attack.eps": 0.3,
        "attack.alpha": None,
        "attack.steps": 40,
        "attack.random_start": False,
        "attack.sign": False,
        "trace.batch_size": 128,
        "export_grid": None,
        "grid.count": 6,
        "out": "runs/attack",
    },
    "matrix": {
        **COMMON,
        **EVAL_KEYS,
        **SO_KEYS,
        "models_dir": None,
        "suite": list(TABLE_ROWS),
        "suite.l2_eps": 4.0,
        "suite.linf_eps": 0.3,
        "suite.l2_alpha": None,
        "suite.linf_alpha": None,
        "suite.steps": 40,
        "strict": False,
        "out": "runs/matrix",
    },
}

# flag name -> config key, per command
FLAGS = {
    "train": {
        "data_dir": "data.dir", "data_limit": "data.limit", "arch": "model.arch",
        "conv_channels": "model.conv_channels", "hidden": "model.hidden",
        "regime": "train.regime", "norm": "train.norm", "eps": "train.eps", "alpha": "train.alpha",
        "steps": "train.steps", "norm2": "train.norm2", "eps2": "train.eps2", "alpha2": "train.alpha2",
        "steps2": "train.steps2", "lambda_": "train.lambda", "epochs": "train.epochs",
        "batch_size": "train.batch_size", "lr": "train.lr", "momentum": "train.momentum",
        "ensemble": "train.ensemble", "alternation": "train.alternation",
        "random_start": "train.random_start", "eps_warmup": "train.eps_warmup",
        "seed": "seed", "jobs": "jobs", "out": "out",
    },
    "attack": {
        "data_dir": "data.dir", "model": "model", "kind": "attack.kind", "norm": "attack.norm",
        "eps": "attack.eps", "alpha": "attack.alpha", "steps": "attack.steps",
        "random_start": "attack.random_start", "sign": "attack.sign",
        "sigma": "so.sigma", "samples": "so.samples", "xi": "so.xi", "power_iters": "so.power_iters",
        "estimator": "so.estimator", "split": "eval.split", "offset": "eval.offset", "limit": "eval.limit",
        "eval_batch_size": "eval.batch_size", "trace_batch_size": "trace.batch_size",
        "export_grid": "export_grid", "grid_count": "grid.count", "seed": "seed", "jobs": "jobs", "out": "out",
    },
    "matrix": {
        "data_dir": "data.dir", "models_dir": "models_dir", "suite": "suite",
        "l2_eps": "suite.l2_eps", "linf_eps": "suite.linf_eps", "l2_alpha": "suite.l2_alpha",
        "linf_alpha": "suite.linf_alpha", "steps": "suite.steps",
        "sigma": "so.sigma", "samples": "so.samples", "xi": "so.xi", "power_iters": "so.power_iters",
        "estimator": "so.estimator", "split": "eval.split", "offset": "eval.offset", "limit": "eval.limit",
        "eval_batch_size": "eval.batch_size", "strict": "strict", "seed": "seed", "jobs": "jobs", "out": "out",
    },
}


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _str_list(text: str) -> list[str]:
    return [v for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="normlab", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(p, *names, **kw):
        kw.setdefault("default", None)
        p.add_argument(*names, **kw)

    tr = sub.add_parser("train", help="train a model and write a checkpoint")
    at = sub.add_parser("attack", help="attack one checkpoint on a slice of the test set")
    mx = sub.add_parser("matrix", help="accuracy of every checkpoint in a directory under an attack suite")
    for p in (tr, at, mx):
        add(p, "--config", dest="config")
        add(p, "--data-dir", dest="data_dir")
        add(p, "--seed", type=int)
        add(p, "--jobs", type=int)
        add(p, "--out")

    add(tr, "--data-limit", type=int)
    add(tr, "--arch", choices=["paper_cnn", "toy_mlp"])
    add(tr, "--conv-channels", type=_int_list)
    add(tr, "--hidden", type=_int_list)
    add(tr, "--regime", choices=["natural", "madry", "trades", "mixed", "ensemble"])
    add(tr, "--norm")
    add(tr, "--eps", type=float)
    add(tr, "--alpha", type=float)
    add(tr, "--steps", type=int)
    add(tr, "--norm2")
    add(tr, "--eps2", type=float)
    add(tr, "--alpha2", type=float)
    add(tr, "--steps2", type=int)
    add(tr, "--lambda", dest="lambda_", type=float)
    add(tr, "--epochs", type=int)
    add(tr, "--batch-size", type=int)
    add(tr, "--lr", type=float)
    add(tr, "--momentum", type=float)
    add(tr, "--ensemble", type=_str_list)
    add(tr, "--alternation", choices=["batch", "epoch"])
    add(tr, "--random-start", action="store_const", const=True)
    add(tr, "--eps-warmup", type=int, help="epochs over which epsilon ramps up from 0")

    for p in (at, mx):
        add(p, "--sigma", type=float)
        add(p, "--samples", type=int)
        add(p, "--xi", type=float)
        add(p, "--power-iters", type=int)
        add(p, "--estimator", choices=["gaussian", "fd"])
        add(p, "--split", choices=["train", "test"])
        add(p, "--offset", type=int)
        add(p, "--limit", type=int)
        add(p, "--eval-batch-size", type=int)

    add(at, "--model")
    add(at, "--kind", choices=["natural", "fgsm", "pgd", "so"])
    add(at, "--norm")
    add(at, "--eps", type=float)
    add(at, "--alpha", type=float)
    add(at, "--steps", type=int)
    add(at, "--random-start", action="store_const", const=True)
    add(at, "--sign", action="store_const", const=True, help="S-O: step along sign(g) instead of g/||g||")
    add(at, "--trace-batch-size", type=int)
    add(at, "--export-grid")
    add(at, "--grid-count", type=int)

    add(mx, "--models-dir")
    add(mx, "--suite", type=_str_list)
    add(mx, "--l2-eps", type=float)
    add(mx, "--linf-eps", type=float)
    add(mx, "--l2-alpha", type=float)
    add(mx, "--linf-alpha", type=float)
    add(mx, "--steps", type=int)
    add(mx, "--strict", action="store_const", const=True)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags. Unknown keys are rejected."""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if cfg.get("data.dir") is None:
        cfg["data.dir"] = _data_dir_default()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {', '.join(unknown)}")
        cfg.update(loaded)
    for flag, key in FLAGS[command].items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _budget(norm, eps, alpha, steps) -> Budget:
    b = Budget.default(norm, float(eps), int(steps))
    return b if alpha is None else Budget(b.norm, b.epsilon, float(alpha), b.steps)


def _so(cfg) -> SoConfig:
    return SoConfig(sigma=float(cfg["so.sigma"]), samples=int(cfg["so.samples"]), xi=float(cfg["so.xi"]),
                    power_iters=int(cfg["so.power_iters"]), estimator=cfg["so.estimator"])


def validate(command: str, cfg: dict) -> dict:
    """Build the typed objects a command needs; any bad value raises ConfigError."""
    try:
        if int(cfg["jobs"]) < 1:
            raise ValueError("jobs must be >= 1")
        if command == "train":
            spec = ModelSpec(arch=cfg["model.arch"], conv_channels=tuple(cfg["model.conv_channels"]),
                             hidden=tuple(cfg["model.hidden"])) if cfg["model.arch"] == "paper_cnn" else \
                ModelSpec.toy_mlp(hidden=tuple(cfg["model.hidden"]))
            regime = cfg["train.regime"]
            first = _budget(cfg["train.norm"], cfg["train.eps"], cfg["train.alpha"], cfg["train.steps"])
            second = _budget(cfg["train.norm2"], cfg["train.eps2"], cfg["train.alpha2"], cfg["train.steps2"])
            budgets = {"natural": (), "mixed": (first, second)}.get(regime, (first,))
            tcfg = TrainConfig(regime=regime, budgets=budgets, lam=float(cfg["train.lambda"]),
                               epochs=int(cfg["train.epochs"]), batch_size=int(cfg["train.batch_size"]),
                               lr=float(cfg["train.lr"]), momentum=float(cfg["train.momentum"]),
                               seed=int(cfg["seed"]), ensemble=tuple(cfg["train.ensemble"]),
                               alternation=cfg["train.alternation"], random_start=bool(cfg["train.random_start"]),
                               eps_warmup=int(cfg["train.eps_warmup"]))
            if cfg["data.limit"] is not None and int(cfg["data.limit"]) < 1:
                raise ValueError("data.limit must be >= 1")
            return {"spec": spec, "train": tcfg}
        _check_eval(cfg)
        if command == "attack":
            if not cfg["model"]:
                raise ValueError("--model is required")
            kind = cfg["attack.kind"]
            budget = None if kind == "natural" else _budget(cfg["attack.norm"], cfg["attack.eps"],
                                                            cfg["attack.alpha"], cfg["attack.steps"])
            spec = AttackSpec(name=kind, kind=kind, budget=budget, so=_so(cfg),
                              seed=derive_seed(cfg["seed"], f"attack.{kind}"),
                              random_start=bool(cfg["attack.random_start"]), sign_direction=bool(cfg["attack.sign"]))
            if int(cfg["trace.batch_size"]) < 1 or int(cfg["grid.count"]) < 1:
                raise ValueError("trace.batch_size and grid.count must be >= 1")
            return {"attack": spec}
        if not cfg["models_dir"]:
            raise ValueError("--models-dir is required")
        suite = default_suite(l2_eps=float(cfg["suite.l2_eps"]), linf_eps=float(cfg["suite.linf_eps"]),
                              steps=int(cfg["suite.steps"]), so=_so(cfg),
                              l2_alpha=cfg["suite.l2_alpha"], linf_alpha=cfg["suite.linf_alpha"])
        suite = [AttackSpec(s.name, s.kind, s.budget, s.so, derive_seed(cfg["seed"], f"matrix.{s.name}"))
                 for s in suite]
        try:
            suite = select_suite(cfg["suite"], suite)
        except KeyError as exc:
            raise ValueError(exc.args[0]) from exc
        order = {name: i for i, name in enumerate(TABLE_ROWS)}
        return {"suite": sorted(suite, key=lambda s: order[s.name])}
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _check_eval(cfg):
    if cfg["eval.split"] not in ("train", "test"):
        raise ValueError("eval.split must be train or test")
    if int(cfg["eval.offset"]) < 0 or int(cfg["eval.limit"]) < 1 or int(cfg["eval.batch_size"]) < 1:
        raise ValueError("eval.offset >= 0, eval.limit >= 1 and eval.batch_size >= 1 required")


def _eval_slice(cfg) -> Dataset:
    ds = load_mnist(cfg["eval.split"], cfg["data.dir"])
    start = int(cfg["eval.offset"])
    return ds.subset(start, start + int(cfg["eval.limit"]))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def cmd_train(cfg: dict) -> int:
    typed = validate("train", cfg)
    data = load_mnist("train", cfg["data.dir"])
    if cfg["data.limit"] is not None:
        data = data.subset(0, int(cfg["data.limit"]))
    out = Path(cfg["out"])

    def progress(epoch, b, loss):
        if b % 100 == 0:
            log.info("epoch %d batch %d loss %.4f", epoch, b, loss)

    params, trainlog = train(typed["spec"], data, typed["train"], on_batch=progress)
    _write_json(_sidecar(out, ".config.json"), cfg)
    save_checkpoint(out, make_checkpoint(typed["spec"], params, typed["train"], train_examples=len(data)))
    _write_json(_sidecar(out, ".trainlog.json"), trainlog.to_dict())
    log.info("wrote %s", out)
    return 0


def _load_net(path) -> Network:
    cp = load_checkpoint(path)
    return Network(cp.spec, cp.params)


def cmd_attack(cfg: dict) -> int:
    typed = validate("attack", cfg)
    spec: AttackSpec = typed["attack"]
    net = _load_net(cfg["model"])
    ds = _eval_slice(cfg)
    out_dir = Path(cfg["out"])
    _write_json(out_dir / "config.json", cfg)
    jobs, bs = int(cfg["jobs"]), int(cfg["eval.batch_size"])
    outcome = attack_dataset(net, spec, ds.images, ds.labels, batch_size=bs, jobs=jobs,
                             indices=np.arange(len(ds)) + int(cfg["eval.offset"]))
    pred_adv = net.predict(outcome.x_adv)
    correct = pred_adv == ds.labels
    n_trace = min(int(cfg["trace.batch_size"]), len(ds))
    trace = gradient_norm_trace(net, spec, ds.images[:n_trace], ds.labels[:n_trace], model_name=Path(cfg["model"]).stem)
    (out_dir / "trace.csv").write_text(trace.to_csv())
    report = {
        "attack": spec.to_dict(),
        "model_sha256": _sha256(cfg["model"]),
        "examples": len(ds),
        "split": cfg["eval.split"],
        "offset": int(cfg["eval.offset"]),
        "natural_accuracy": accuracy(net, ds.images, ds.labels),
        "accuracy": float(correct.mean()),
        "success": outcome.success.astype(int).tolist(),
        "trace": trace.values,
    }
    _write_json(out_dir / "report.json", report)
    if cfg["export_grid"]:
        k = min(int(cfg["grid.count"]), len(ds))
        export_image_grid(ds.images[:k], outcome.x_adv[:k], pred_adv[:k], cfg["export_grid"])
    log.info("%s accuracy %.4f (natural %.4f)", spec.name, report["accuracy"], report["natural_accuracy"])
    return 0


def cmd_matrix(cfg: dict) -> int:
    typed = validate("matrix", cfg)
    models_dir = Path(cfg["models_dir"])
    paths = sorted(models_dir.glob("*.ckpt")) if models_dir.is_dir() else []
    if not paths:
        raise ConfigError(f"no checkpoints (*.ckpt) in {models_dir}")
    nets, digests = {}, {}
    for p in paths:
        try:
            nets[p.stem] = _load_net(p)
            digests[p.stem] = _sha256(p)
        except (OSError, DataError) as exc:
            if cfg["strict"]:
                raise DataError(f"unreadable checkpoint {p}: {exc}") from exc
            log.warning("skipping unreadable checkpoint %s: %s", p, exc)
    if not nets:
        raise DataError(f"no readable checkpoints in {models_dir}")
    ds = _eval_slice(cfg)
    out_dir = Path(cfg["out"])
    _write_json(out_dir / "config.json", cfg)
    report = accuracy_matrix(nets, typed["suite"], ds.images, ds.labels,
                             batch_size=int(cfg["eval.batch_size"]), jobs=int(cfg["jobs"]),
                             metadata={"model_sha256": digests, "split": cfg["eval.split"],
                                       "offset": int(cfg["eval.offset"])})
    report.write(out_dir)
    log.info("wrote %d x %d matrix to %s", len(report.rows), len(report.columns), out_dir)
    return 0


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "matrix": cmd_matrix}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"normlab: config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"normlab: data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"normlab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

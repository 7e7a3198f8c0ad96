"""Robust-accuracy matrices, gradient-norm traces and image grids.

Work is split into fixed-size chunks of examples. Chunk boundaries depend only
on ``batch_size``, never on ``jobs``, and attack noise is keyed by the
example's index, so any number of worker processes gives identical numbers.
"""

from __future__ import annotations

import csv
import io
import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attacks import AttackOutcome, AttackSpec, run_attack

DEFAULT_BATCH = 100


class InfeasibleExampleError(AssertionError):
    """An attack returned a point outside its ball or the pixel box."""


@dataclass
class EvalReport:
    rows: list[str]
    columns: list[str]
    cells: list[list[float]]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.cells) != len(self.rows) or any(len(r) != len(self.columns) for r in self.cells):
            raise ValueError("report matrix must be complete: one cell per (attack, model)")
        if any(not 0.0 <= c <= 1.0 for r in self.cells for c in r):
            raise ValueError("accuracy cells must lie in [0, 1]")

    def cell(self, row: str, column: str) -> float:
        return self.cells[self.rows.index(row)][self.columns.index(column)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", *self.columns])
        for name, row in zip(self.rows, self.cells):
            w.writerow([name, *(repr(float(c)) for c in row)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "columns": self.columns, "cells": self.cells,
                           "metadata": self.metadata}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["rows"], d["columns"], d["cells"], d.get("metadata", {}))

    def write(self, out_dir, stem: str = "matrix") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path


@dataclass
class GradTrace:
    values: list[float]
    model: str = ""
    attack: str = ""

    def to_csv(self) -> str:
        lines = ["iteration,mean_grad_l2"]
        lines += [f"{t},{v!r}" for t, v in enumerate(self.values)]
        return "\n".join(lines) + "\n"


def accuracy(model, x, y, batch_size: int = 500) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    pred = np.concatenate([model.predict(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    return float((pred == np.asarray(y)).mean())


def _attack_chunk(args):
    model, x, y, spec, indices = args
    return run_attack(model, x, y, spec, indices=indices, record_trace=False)


def attack_dataset(model, spec: AttackSpec, x, y, *, batch_size: int = DEFAULT_BATCH,
                   jobs: int = 1, indices=None) -> AttackOutcome:
    """Run one attack over all examples chunk by chunk and check feasibility."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    tasks = [(model, x[i:i + batch_size], y[i:i + batch_size], spec, indices[i:i + batch_size])
             for i in range(0, len(x), batch_size)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_attack_chunk, tasks))
    else:
        parts = [_attack_chunk(t) for t in tasks]
    out = AttackOutcome(np.concatenate([p.x_adv for p in parts]), [],
                        np.concatenate([p.success for p in parts]), spec.name)
    ok = out.feasible(x, spec.budget)
    if not ok.all():
        bad = np.flatnonzero(~ok)
        raise InfeasibleExampleError(f"{spec.name}: {bad.size} infeasible adversarial examples, first index {indices[bad[0]]}")
    return out


def robust_accuracy(model, spec: AttackSpec, x, y, *, batch_size: int = DEFAULT_BATCH,
                    jobs: int = 1, return_outcome: bool = False):
    """Accuracy on the attacked inputs; every example is checked for feasibility."""
    out = attack_dataset(model, spec, x, y, batch_size=batch_size, jobs=jobs)
    acc = accuracy(model, out.x_adv, y)
    return (acc, out) if return_outcome else acc


def accuracy_matrix(models: Mapping[str, object], suite: Sequence[AttackSpec], x, y, *,
                    batch_size: int = DEFAULT_BATCH, jobs: int = 1, metadata: dict | None = None) -> EvalReport:
    """Attack x model accuracy table with rows in suite order."""
    if not models or not suite:
        raise ValueError("need at least one model and one attack")
    cells = [[robust_accuracy(m, spec, x, y, batch_size=batch_size, jobs=jobs) for m in models.values()]
             for spec in suite]
    meta = {"attacks": [s.to_dict() for s in suite], "examples": int(len(y)), "batch_size": batch_size}
    meta.update(metadata or {})
    return EvalReport([s.name for s in suite], list(models), cells, meta)


def gradient_norm_trace(model, spec: AttackSpec, x, y, *, model_name: str = "") -> GradTrace:
    """Batch-mean input-gradient l2 norm at every iterate of one attack on one batch.

    The first entry is the clean batch, so the trace has ``steps + 1`` values.
    """
    out = run_attack(model, x, y, spec, record_trace=True)
    return GradTrace(list(out.grad_norms), model_name, spec.name)


# -- image export ---------------------------------------------------------------------

GRID_PAD = 2


def grid_size(count: int, tile: int = 28, pad: int = GRID_PAD) -> tuple[int, int]:
    """(height, width) of a two-row grid: ``pad`` pixels around and between tiles."""
    return 2 * tile + 3 * pad, count * tile + (count + 1) * pad


def export_image_grid(clean, adv, predictions, path, pad: int = GRID_PAD) -> Path:
    """Write clean images (top row) over adversarial ones (bottom row) as binary PGM.

    Predictions are not drawn; they go to a ``.txt`` sidecar next to the image,
    one label per line in column order.
    """
    clean = np.asarray(clean, dtype=np.float64).reshape(len(clean), 28, 28)
    adv = np.asarray(adv, dtype=np.float64).reshape(len(adv), 28, 28)
    if len(clean) != len(adv) or len(predictions) != len(clean):
        raise ValueError("clean, adversarial and prediction counts must match")
    h, w = grid_size(len(clean), 28, pad)
    canvas = np.zeros((h, w), dtype=np.uint8)
    for row, imgs in enumerate((clean, adv)):
        top = pad + row * (28 + pad)
        for i, img in enumerate(imgs):
            left = pad + i * (28 + pad)
            canvas[top:top + 28, left:left + 28] = np.round(255 * np.clip(img, 0, 1)).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + canvas.tobytes())
    path.with_suffix(".txt").write_text("".join(f"{int(p)}\n" for p in predictions))
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def grid_tiles(canvas: np.ndarray, count: int, row: int, pad: int = GRID_PAD) -> np.ndarray:
    """Cut one row of tiles back out of a grid, scaled to [0, 1]."""
    top = pad + row * (28 + pad)
    return np.stack([canvas[top:top + 28, pad + i * (28 + pad):pad + i * (28 + pad) + 28]
                     for i in range(count)]).astype(np.float64) / 255.0

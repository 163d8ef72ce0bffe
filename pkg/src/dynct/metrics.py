"""Error measures for flow estimates and reconstructions."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .grid import FlowField, ImageGrid, _ddx, _ddy

CSV_SCHEMA = "dynct-metrics/1"


@dataclass(frozen=True)
class ActiveMask:
    mask: np.ndarray

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def active_set(recons: list[ImageGrid], beta: float = 0.15) -> ActiveMask:
    """Pixels where some reconstruction has a gradient component above ``beta``."""
    if not recons:
        raise ValueError("need at least one reconstruction")
    if not beta > 0:
        raise ValueError("beta must be positive")
    mask = np.zeros(recons[0].values.shape, dtype=bool)
    for r in recons:
        mask |= (np.abs(_ddx(r.values)) > beta) | (np.abs(_ddy(r.values)) > beta)
    return ActiveMask(mask)


def rmse_active(v: FlowField, v_hat: FlowField, mask: ActiveMask) -> float:
    if v.vx.shape != v_hat.vx.shape or v.vx.shape != mask.mask.shape:
        raise ValueError("shape mismatch")
    if mask.count == 0:
        raise ValueError("active set is empty")
    m = mask.mask
    sq = (v.vx[m] - v_hat.vx[m]) ** 2 + (v.vy[m] - v_hat.vy[m]) ** 2
    return math.sqrt(sq.sum() / mask.count)


def l2_error(img: ImageGrid, ref: ImageGrid) -> float:
    if img.values.shape != ref.values.shape:
        raise ValueError("shape mismatch")
    return float(np.linalg.norm((img.values - ref.values).ravel()))


def format_value(x: float) -> str:
    return f"{x:.6g}"


def metrics_csv(rows) -> str:
    """``(experiment, variant, value)`` rows as CSV text with a schema line."""
    buf = io.StringIO()
    buf.write(f"# schema={CSV_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment", "variant", "value"])
    for exp, variant, value in rows:
        w.writerow([exp, variant, format_value(value)])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[tuple[str, str, float]]:
    lines = text.splitlines()
    if not lines or lines[0] != f"# schema={CSV_SCHEMA}":
        raise ValueError("missing or unknown metrics schema line")
    reader = csv.reader(lines[1:])
    header = next(reader)
    if header != ["experiment", "variant", "value"]:
        raise ValueError(f"unexpected header {header}")
    return [(e, v, float(x)) for e, v, x in reader]

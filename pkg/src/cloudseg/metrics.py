"""Confusion-matrix evaluation of binary cloud masks.

Cloud (sample value 255, or target 1) is the positive class. Metrics are
micro-averaged: one confusion matrix is pooled over every evaluated pixel,
then the four ratios are computed once. Ratios with a zero denominator are
reported as None and rendered "NA" in CSV reports, never coerced to 0/100.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import ConfigError, ShapeError, ValidationError
from .network import Network, forward


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            tp=self.tp + other.tp, fp=self.fp + other.fp,
            fn=self.fn + other.fn, tn=self.tn + other.tn,
        )


@dataclass
class MetricsRow:
    method: str
    acc: float | None
    prec: float | None
    sn: float | None
    sp: float | None


def _check_binary(mask: np.ndarray, label: str) -> np.ndarray:
    bad = (mask != 0) & (mask != 255)
    if bad.any():
        coords = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(
            f"{label} mask has non-binary sample {mask[coords]} at {coords}"
        )
    return mask == 255


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """Pixelwise tally of u8 {0, 255} masks; 255 (cloud) is positive."""
    if pred.shape != gt.shape:
        raise ShapeError(f"pred shape {pred.shape} != ground truth shape {gt.shape}")
    p = _check_binary(np.asarray(pred), "predicted")
    g = _check_binary(np.asarray(gt), "ground truth")
    return ConfusionMatrix(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def compute_metrics(cm: ConfusionMatrix, method: str = "") -> MetricsRow:
    """ACC, PREC, SN (recall), SP as percentages; None where undefined."""
    return MetricsRow(
        method=method,
        acc=_ratio(cm.tp + cm.tn, cm.total),
        prec=_ratio(cm.tp, cm.tp + cm.fp),
        sn=_ratio(cm.tp, cm.tp + cm.fn),
        sp=_ratio(cm.tn, cm.tn + cm.fp),
    )


def evaluate_split(
    net: Network,
    patches,
    threshold: float = 0.5,
    method: str = "cloudseg",
    batch_size: int = 8,
) -> MetricsRow:
    """Micro-averaged metrics of `net` over (pixels, mask) patch pairs.

    `patches` is a sequence of (x, y) with x float32 (4, s, s) reflectance
    and y in {0, 1} of shape (1, s, s) or (s, s).
    """
    patches = list(patches)
    if not patches:
        raise ConfigError("cannot evaluate an empty split")
    if net.mode != "inference":
        raise ConfigError("evaluation requires the network in inference mode")
    cm = ConfusionMatrix()
    with no_grad():
        for start in range(0, len(patches), batch_size):
            chunk = patches[start : start + batch_size]
            x = np.stack([c[0] for c in chunk])
            y = np.stack([np.asarray(c[1]).reshape(c[0].shape[-2:]) for c in chunk])
            out = forward(net, Tensor(x)).data[:, 0]
            pred = np.where(out >= threshold, 255, 0).astype(np.uint8)
            gt = np.where(y >= 0.5, 255, 0).astype(np.uint8)
            cm = cm + confusion(pred, gt)
    return compute_metrics(cm, method=method)


def _cell(value: float | None) -> str:
    return "NA" if value is None else f"{value:.2f}"


def emit_report(rows: list[MetricsRow], path) -> None:
    """CSV report `method,acc,prec,sn,sp`, two-decimal fixed point."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method,acc,prec,sn,sp\n")
        for r in rows:
            fh.write(
                f"{r.method},{_cell(r.acc)},{_cell(r.prec)},{_cell(r.sn)},{_cell(r.sp)}\n"
            )

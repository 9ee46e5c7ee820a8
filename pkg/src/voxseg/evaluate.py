"""Dice Similarity Coefficient and aggregate reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch
from .volio import Volume, VolumeKind

TISSUE_NAMES = {0: "BG", 1: "CSF", 2: "GM", 3: "WM"}


def dice(pred: Volume, truth: Volume, class_id: int) -> float:
    """2|P∩T| / (|P|+|T|); defined as 1.0 when both masks are empty.

    All counting is integer; only the final ratio is floating point.
    """
    if pred.dims != truth.dims:
        raise DimMismatch(f"pred dims {pred.dims} != truth dims {truth.dims}")
    if pred.kind is not VolumeKind.LABEL or truth.kind is not VolumeKind.LABEL:
        raise DimMismatch("dice expects two Label volumes")
    p = pred.data.astype(np.int64) == class_id
    t = truth.data.astype(np.int64) == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2 * int(np.logical_and(p, t).sum()) / denom


@dataclass(frozen=True)
class DiceReport:
    volume_ids: tuple[str, ...]
    per_volume: dict  # id -> {class_id: dsc}
    classes: tuple[int, ...]
    sample_std: bool = False

    def mean(self, class_id: int) -> float:
        return float(np.mean([self.per_volume[v][class_id] for v in self.volume_ids]))

    def std(self, class_id: int) -> float:
        vals = [self.per_volume[v][class_id] for v in self.volume_ids]
        ddof = 1 if (self.sample_std and len(vals) > 1) else 0
        return float(np.std(vals, ddof=ddof))

    def to_json(self) -> str:
        return json.dumps(
            {
                "volumes": {
                    vid: {str(c): self.per_volume[vid][c] for c in self.classes}
                    for vid in self.volume_ids
                },
                "aggregate": {
                    str(c): {"mean": self.mean(c), "std": self.std(c)} for c in self.classes
                },
            },
            indent=2,
        )

    def to_text(self) -> str:
        names = [TISSUE_NAMES.get(c, f"class{c}") for c in self.classes]
        width = max(12, max(len(v) for v in self.volume_ids) + 2)
        lines = [f"{'volume':<{width}}" + "".join(f"{n:>12}" for n in names)]
        for vid in self.volume_ids:
            row = "".join(f"{self.per_volume[vid][c]:>12.4f}" for c in self.classes)
            lines.append(f"{vid:<{width}}" + row)
        agg = "".join(f"{self.mean(c):>7.2f}±{self.std(c):<4.2f}" for c in self.classes)
        lines.append(f"{'mean±std':<{width}}" + agg)
        return "\n".join(lines)


def report(pairs, classes=(1, 2, 3), sample_std: bool = False) -> DiceReport:
    """Per-volume DSCs plus per-class mean ± std over (pred, truth, id) pairs.

    The aggregate uses population std by default.
    """
    pairs = list(pairs)
    if not pairs:
        raise DimMismatch("report needs at least one (pred, truth, id) pair")
    per_volume = {}
    ids = []
    for pred, truth, vid in sorted(pairs, key=lambda p: p[2]):
        per_volume[vid] = {c: dice(pred, truth, c) for c in classes}
        ids.append(vid)
    return DiceReport(tuple(ids), per_volume, tuple(classes), sample_std)

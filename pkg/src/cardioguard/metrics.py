"""Agreement metrics between label maps: Dice, Hausdorff, area-based EF proxy."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from .errors import DimensionMismatch, EmptyClass
from .grid import SCHEMES, LabelMap


def _masks(a: LabelMap, b: LabelMap, cls: int):
    if a.pixels.shape != b.pixels.shape:
        raise DimensionMismatch(f"{a.pixels.shape} vs {b.pixels.shape}")
    return a.pixels == cls, b.pixels == cls


def dice(a: LabelMap, b: LabelMap, cls: int) -> float:
    ma, mb = _masks(a, b, cls)
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / total


def hausdorff(a: LabelMap, b: LabelMap, cls: int, spacing: float = 1.0) -> float:
    """Symmetric Hausdorff distance between the pixel sets of ``cls`` (pixels times ``spacing``)."""
    ma, mb = _masks(a, b, cls)
    pa, pb = np.argwhere(ma), np.argwhere(mb)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyClass(f"class {cls} is empty in {'first' if len(pa) == 0 else 'second'} map")
    d = max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0])
    return float(d) * spacing


def area_fraction(ed: LabelMap, es: LabelMap, cls: int) -> float:
    a_ed = int((ed.pixels == cls).sum())
    if a_ed == 0:
        raise EmptyClass(f"class {cls} is empty at end-diastole")
    return 1.0 - int((es.pixels == cls).sum()) / a_ed


def area_fraction_error(pred_ed: LabelMap, pred_es: LabelMap, gt_ed: LabelMap, gt_es: LabelMap,
                        cls: int) -> float:
    """|ejection-fraction proxy of prediction - that of ground truth| using 2D areas."""
    for m in (pred_es, gt_ed, gt_es):
        if m.pixels.shape != pred_ed.pixels.shape:
            raise DimensionMismatch("ED/ES maps differ in size")
    return abs(area_fraction(pred_ed, pred_es, cls) - area_fraction(gt_ed, gt_es, cls))


@dataclass
class MetricReport:
    dice: dict = field(default_factory=dict)
    hausdorff: dict = field(default_factory=dict)
    area_fraction_error: dict = field(default_factory=dict)


def compare(pred: LabelMap, gt: LabelMap, spacing: float = 1.0) -> MetricReport:
    """Per-class Dice and Hausdorff over the foreground classes of the view.

    Hausdorff is NaN when a class is missing from either map.
    """
    rep = MetricReport()
    for cls in sorted(v for v in SCHEMES[gt.view].values() if v != 0):
        rep.dice[cls] = dice(pred, gt, cls)
        try:
            rep.hausdorff[cls] = hausdorff(pred, gt, cls, spacing)
        except EmptyClass:
            rep.hausdorff[cls] = float("nan")
    return rep


def write_eval_csv(path, rows: list[dict]) -> dict:
    """Write per-file rows (file, class, dice, hd, ef_err) plus a mean row per class."""
    cols = ["file", "class", "dice", "hd", "ef_err"]
    by_cls: dict = {}
    for r in rows:
        by_cls.setdefault(r["class"], []).append(r)
    means = {}
    for cls, rs in sorted(by_cls.items()):
        means[cls] = {k: float(np.nanmean([np.nan if r.get(k) in (None, "") else r[k] for r in rs]))
                      if any(r.get(k) not in (None, "") for r in rs) else float("nan")
                      for k in ("dice", "hd", "ef_err")}
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in cols})
        for cls, m in means.items():
            w.writerow({"file": "MEAN", "class": cls, **m})
    return means

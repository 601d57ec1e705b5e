"""Anatomical validity criteria for short-axis and long-axis label maps.

Everything here is plain image processing; there is no learned component.
Foreground structures use 8-connectivity, background/holes 4-connectivity.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import ConvexHull, QhullError

from .errors import ConfigError, EmptyCalibrationSet, MissingStructure
from .grid import (BG, LA_LA, LA_LV, LA_MYO, SA_LV, SA_MYO, SA_RV, STRUCT4, Component,
                   LabelMap, View, connected_components, count_components)

SA_CRITERIA = [
    ("SA01", "hole in LV"),
    ("SA02", "hole in RV"),
    ("SA03", "hole in MYO"),
    ("SA04", "hole between LV and MYO"),
    ("SA05", "hole between RV and MYO"),
    ("SA06", "more than one LV"),
    ("SA07", "more than one RV"),
    ("SA08", "more than one MYO"),
    ("SA09", "RV disconnected from MYO"),
    ("SA10", "LV touches RV"),
    ("SA11", "LV touches background"),
    ("SA12", "LV concavity"),
    ("SA13", "RV concavity"),
    ("SA14", "MYO concavity"),
    ("SA15", "LV circularity"),
    ("SA16", "MYO circularity"),
]

LA_CRITERIA = [
    ("LA01", "hole in LV"),
    ("LA02", "hole in MYO"),
    ("LA03", "hole in LA"),
    ("LA04", "hole between LV and MYO"),
    ("LA05", "hole between LV and LA"),
    ("LA06", "more than one LV"),
    ("LA07", "more than one MYO"),
    ("LA08", "more than one LA"),
    ("LA09", "LV touches background"),
    ("LA10", "MYO touches LA"),
    ("LA11", "MYO thickness ratio"),
    ("LA12", "LV width over MYO thickness"),
]

CRITERIA = {View.SA: SA_CRITERIA, View.LA: LA_CRITERIA}


@dataclass(frozen=True)
class Thresholds:
    """Numeric limits of the threshold-based criteria.

    Contact limits are in pixels at ``ref_size``; they scale linearly with the
    side length of the checked map.
    """

    circularity_min_lv: float = 0.70
    circularity_min_myo: float = 0.30
    convexity_min_lv: float = 0.85
    convexity_min_rv: float = 0.85
    convexity_min_myo: float = 0.30
    lv_bg_contact_max: float = 4.0
    myo_la_contact_max: float = 12.0
    myo_thickness_ratio_min: float = 0.30
    lv_width_over_myo_max: float = 8.0
    ref_size: int = 64
    # "below": flag circularity < min (default). "above": flag circularity > min.
    circularity_direction: str = "below"

    def __post_init__(self):
        for f in ("circularity_min_lv", "circularity_min_myo", "convexity_min_lv",
                  "convexity_min_rv", "convexity_min_myo", "myo_thickness_ratio_min"):
            v = getattr(self, f)
            if not 0 < v <= 1:
                raise ConfigError(f"{f}={v} must lie in (0, 1]")
        if self.lv_bg_contact_max < 0 or self.myo_la_contact_max < 0:
            raise ConfigError("contact limits must be >= 0")
        if self.circularity_direction not in ("below", "above"):
            raise ConfigError("circularity_direction must be 'below' or 'above'")

    @classmethod
    def lenient(cls) -> "Thresholds":
        """Limits that never fire: only the threshold-free criteria remain active."""
        return cls(circularity_min_lv=1e-9, circularity_min_myo=1e-9, convexity_min_lv=1e-9,
                   convexity_min_rv=1e-9, convexity_min_myo=1e-9, lv_bg_contact_max=1e9,
                   myo_la_contact_max=1e9, myo_thickness_ratio_min=1e-9, lv_width_over_myo_max=1e9)

    def contact_scale(self, lmap: LabelMap) -> float:
        return max(lmap.width, lmap.height) / self.ref_size

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Thresholds":
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown threshold keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class CriterionReport:
    view: View
    violated: tuple  # of bool, in CRITERIA[view] order

    @property
    def valid(self) -> bool:
        return not any(self.violated)

    @property
    def ids(self) -> list[str]:
        return [cid for cid, _ in CRITERIA[self.view]]

    @property
    def violations(self) -> list[str]:
        return [cid for cid, v in zip(self.ids, self.violated) if v]

    def __getitem__(self, cid: str) -> bool:
        return self.violated[self.ids.index(cid)]


# ---------------------------------------------------------------- primitives

def _enclosed_bg(lmap: LabelMap):
    """4-connected background components not touching the image border.

    Returns (labels, n, neighbour-class sets per component).
    """
    bg = lmap.pixels == BG
    lab, n = ndi.label(bg, structure=STRUCT4)
    if n == 0:
        return lab, 0, []
    border = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
    keep = np.ones(n + 1, dtype=bool)
    keep[0] = False
    keep[border] = False
    # neighbour classes of each component through 4-adjacency
    px = lmap.pixels
    nb = [set() for _ in range(n + 1)]
    for a, b, pa, pb in ((lab[:, :-1], lab[:, 1:], px[:, :-1], px[:, 1:]),
                         (lab[:-1, :], lab[1:, :], px[:-1, :], px[1:, :])):
        for la, pcls in ((a, pb), (b, pa)):
            sel = (la > 0) & (pcls != BG)
            if sel.any():
                pairs = np.unique(np.stack([la[sel], pcls[sel]]), axis=1)
                for comp, cls in pairs.T:
                    nb[comp].add(int(cls))
    enclosed = [(i, nb[i]) for i in range(1, n + 1) if keep[i]]
    return lab, n, enclosed


def holes_within(lmap: LabelMap, cls: int) -> int:
    """Enclosed background regions bordered only by ``cls``."""
    _, _, enclosed = _enclosed_bg(lmap)
    return sum(1 for _, nb in enclosed if nb == {cls})


def holes_between(lmap: LabelMap, a: int, b: int) -> int:
    """Enclosed background regions adjacent to both ``a`` and ``b``."""
    if a == b:
        raise ValueError("holes_between needs two distinct classes")
    _, _, enclosed = _enclosed_bg(lmap)
    return sum(1 for _, nb in enclosed if a in nb and b in nb)


def fragment_count(lmap: LabelMap, cls: int) -> int:
    return count_components(lmap.pixels == cls, 8)


def contact_length(lmap: LabelMap, a: int, b: int) -> int:
    """Number of 4-adjacent pixel pairs with one pixel in ``a`` and one in ``b``."""
    if a == b:
        raise ValueError("contact_length needs two distinct classes")
    px = lmap.pixels
    h = px[:, :-1], px[:, 1:]
    v = px[:-1, :], px[1:, :]
    n = 0
    for p, q in (h, v):
        n += int(np.count_nonzero((p == a) & (q == b)) + np.count_nonzero((p == b) & (q == a)))
    return n


EXTERIOR = 255


def with_exterior(lmap: LabelMap) -> LabelMap:
    """Copy of ``lmap`` whose border-connected background is relabelled EXTERIOR.

    Enclosed background (holes) keeps label BG; contact criteria against the
    background use the exterior only, holes being flagged separately.
    """
    lab, n = ndi.label(lmap.pixels == BG, structure=STRUCT4)
    px = lmap.pixels.copy()
    if n:
        border = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
        border = border[border > 0]
        px[np.isin(lab, border)] = EXTERIOR
    return _Raw(px, lmap.view)


class _Raw:
    """Minimal label-map stand-in that skips class-scheme validation."""

    def __init__(self, pixels, view):
        self.pixels = pixels
        self.view = view
        self.height, self.width = pixels.shape


def exterior_contact(lmap: LabelMap, cls: int) -> int:
    return contact_length(with_exterior(lmap), cls, EXTERIOR)


def touches(lmap: LabelMap, a: int, b: int) -> bool:
    """8-adjacency contact between classes ``a`` and ``b``."""
    ma = lmap.pixels == a
    if not ma.any():
        return False
    return bool((ndi.binary_dilation(ma, structure=np.ones((3, 3), bool)) & (lmap.pixels == b)).any())


def hull_mask(c: Component) -> np.ndarray:
    """Pixels of the component's bounding box whose centers lie in the convex
    hull of the component's pixel centers (boundary inclusive)."""
    r0, c0, r1, c1 = c.bbox
    pts = np.stack([c.cols - c0, c.rows - r0], axis=1).astype(np.float64)
    shape = (r1 - r0, c1 - c0)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        # collinear or single point: the hull is the component itself
        m = np.zeros(shape, dtype=bool)
        m[c.rows - r0, c.cols - c0] = True
        return m
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    inside = np.ones(shape, dtype=bool)
    for nx, ny, off in hull.equations:
        inside &= nx * xx + ny * yy + off <= 1e-9
    return inside


def convexity_ratio(c: Component) -> float:
    """area / rasterized convex-hull area, in (0, 1]."""
    if c.area <= 0:
        raise ValueError("empty component")
    return c.area / max(int(hull_mask(c).sum()), c.area)


def circularity(c: Component) -> float:
    """4*pi*area / perimeter**2 with the traced 8-boundary perimeter."""
    p = c.perimeter
    if p <= 0:
        raise ValueError("component has zero perimeter")
    return 4 * math.pi * c.area / (p * p)


def _ridge(dt: np.ndarray) -> np.ndarray:
    """Medial ridge: pixels whose distance value is the maximum of their 5x5
    neighbourhood. Boundary corners (distance 1 next to thicker tissue) drop out."""
    return (dt > 0) & (dt >= ndi.maximum_filter(dt, size=5, mode="constant"))


def myo_thickness_samples(lmap: LabelMap) -> np.ndarray:
    myo_id = SA_MYO if lmap.view == View.SA else LA_MYO
    myo = lmap.pixels == myo_id
    if not myo.any():
        raise MissingStructure("MYO")
    dt = ndi.distance_transform_edt(myo)
    ridge = _ridge(dt)
    if lmap.view == View.LA:
        la = lmap.pixels == LA_LA
        if la.any() and ridge.any():
            # ignore the open ends of the MYO, which abut the atrium
            d_la = ndi.distance_transform_edt(~la)
            ridge &= d_la >= 2.0 * dt[ridge].max()
    vals = 2.0 * dt[ridge]
    if vals.size == 0:
        vals = 2.0 * dt[myo]
    return vals


def myo_thickness_stats(lmap: LabelMap) -> tuple[float, float, float]:
    """(min, max, mean) MYO thickness in pixels, from 2x the distance transform
    on the medial ridge."""
    s = myo_thickness_samples(lmap)
    return float(s.min()), float(s.max()), float(s.mean())


def _runs(row: np.ndarray) -> list[tuple[int, int]]:
    """(start, stop) of True runs in a 1D boolean array."""
    d = np.diff(np.concatenate([[0], row.astype(np.int8), [0]]))
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1)
    return list(zip(starts, stops))


def lv_width_myo_ratio(lmap: LabelMap) -> float:
    """LV width on the mid-row of the LV bounding box divided by the average
    MYO limb thickness on that same row."""
    lv_id = SA_LV if lmap.view == View.SA else LA_LV
    myo_id = SA_MYO if lmap.view == View.SA else LA_MYO
    lv = lmap.pixels == lv_id
    myo = lmap.pixels == myo_id
    if not lv.any():
        raise MissingStructure("LV")
    if not myo.any():
        raise MissingStructure("MYO")
    rows = np.flatnonzero(lv.any(axis=1))
    mid = (rows[0] + rows[-1]) // 2
    lv_cols = np.flatnonzero(lv[mid])
    width = lv_cols.size
    if width == 0:
        return math.inf
    left, right = lv_cols[0], lv_cols[-1]
    limbs = []
    for start, stop in _runs(myo[mid]):
        if stop <= left or start > right:
            limbs.append((start, stop))
    left_limbs = [stop - start for start, stop in limbs if stop <= left]
    right_limbs = [stop - start for start, stop in limbs if start > right]
    thick = []
    if left_limbs:
        thick.append(sum(left_limbs))
    if right_limbs:
        thick.append(sum(right_limbs))
    if not thick:
        return math.inf
    return width / (sum(thick) / len(thick))


# ---------------------------------------------------------------- checks

def _structure_stats(lmap: LabelMap, cls: int):
    comps = connected_components(lmap, cls, 8)
    if len(comps) != 1:
        return None
    return comps[0]


def _circ_flag(value: float, limit: float, th: Thresholds) -> bool:
    return value < limit if th.circularity_direction == "below" else value > limit


def sa_stats(lmap: LabelMap) -> dict:
    """Threshold-relevant statistics of a short-axis map (None when undefined)."""
    out = {}
    for name, cls in (("lv", SA_LV), ("rv", SA_RV), ("myo", SA_MYO)):
        c = _structure_stats(lmap, cls)
        out[f"convexity_{name}"] = convexity_ratio(c) if c is not None else None
        if name != "rv":
            out[f"circularity_{name}"] = (circularity(c)
                                          if c is not None and c.perimeter > 0 else None)
    return out


def la_stats(lmap: LabelMap) -> dict:
    out = {
        "lv_bg_contact": exterior_contact(lmap, LA_LV),
        "myo_la_contact": contact_length(lmap, LA_MYO, LA_LA),
        "myo_thickness_ratio": None,
        "lv_width_over_myo": None,
    }
    if (lmap.pixels == LA_MYO).any():
        mn, mx, _ = myo_thickness_stats(lmap)
        out["myo_thickness_ratio"] = mn / mx if mx > 0 else 0.0
        if (lmap.pixels == LA_LV).any():
            out["lv_width_over_myo"] = lv_width_myo_ratio(lmap)
    return out


def _hole_flags(lmap: LabelMap, within: list[int], between: list[tuple[int, int]]) -> list[bool]:
    _, _, enclosed = _enclosed_bg(lmap)
    flags = [any(nb == {c} for _, nb in enclosed) for c in within]
    flags += [any(a in nb and b in nb for _, nb in enclosed) for a, b in between]
    return flags


def check_sa(lmap: LabelMap, th: Thresholds | None = None) -> CriterionReport:
    th = th or Thresholds()
    if lmap.view != View.SA:
        raise ValueError("check_sa needs a short-axis map")
    v = _hole_flags(lmap, [SA_LV, SA_RV, SA_MYO], [(SA_LV, SA_MYO), (SA_RV, SA_MYO)])
    comps = {cls: connected_components(lmap, cls, 8) for cls in (SA_LV, SA_RV, SA_MYO)}
    v += [len(comps[cls]) != 1 for cls in (SA_LV, SA_RV, SA_MYO)]
    rv_present = len(comps[SA_RV]) > 0
    v.append(rv_present and not touches(lmap, SA_RV, SA_MYO))
    v.append(contact_length(lmap, SA_LV, SA_RV) > 0)
    v.append(exterior_contact(lmap, SA_LV) > 0)
    limits = {SA_LV: th.convexity_min_lv, SA_RV: th.convexity_min_rv, SA_MYO: th.convexity_min_myo}
    for cls in (SA_LV, SA_RV, SA_MYO):
        v.append(any(convexity_ratio(c) < limits[cls] for c in comps[cls]))
    for cls, lim in ((SA_LV, th.circularity_min_lv), (SA_MYO, th.circularity_min_myo)):
        flag = False
        for c in comps[cls]:
            p = c.perimeter
            circ = 0.0 if p <= 0 else circularity(c)
            flag |= _circ_flag(circ, lim, th)
        v.append(flag)
    return CriterionReport(View.SA, tuple(bool(x) for x in v))


def check_la(lmap: LabelMap, th: Thresholds | None = None) -> CriterionReport:
    th = th or Thresholds()
    if lmap.view != View.LA:
        raise ValueError("check_la needs a long-axis map")
    v = _hole_flags(lmap, [LA_LV, LA_MYO, LA_LA], [(LA_LV, LA_MYO), (LA_LV, LA_LA)])
    counts = [fragment_count(lmap, cls) for cls in (LA_LV, LA_MYO, LA_LA)]
    v += [n != 1 for n in counts]
    s = th.contact_scale(lmap)
    v.append(exterior_contact(lmap, LA_LV) > th.lv_bg_contact_max * s)
    v.append(contact_length(lmap, LA_MYO, LA_LA) > th.myo_la_contact_max * s)
    has_myo = counts[1] > 0
    has_lv = counts[0] > 0
    if has_myo:
        mn, mx, _ = myo_thickness_stats(lmap)
        v.append(mx <= 0 or mn / mx < th.myo_thickness_ratio_min)
    else:
        v.append(True)
    if has_myo and has_lv:
        v.append(lv_width_myo_ratio(lmap) > th.lv_width_over_myo_max)
    else:
        v.append(True)
    return CriterionReport(View.LA, tuple(bool(x) for x in v))


def check(lmap: LabelMap, th: Thresholds | None = None) -> CriterionReport:
    return check_sa(lmap, th) if lmap.view == View.SA else check_la(lmap, th)


def is_valid(lmap: LabelMap, th: Thresholds | None = None) -> bool:
    return check(lmap, th).valid


def stats(lmap: LabelMap) -> dict:
    return sa_stats(lmap) if lmap.view == View.SA else la_stats(lmap)


# ---------------------------------------------------------------- calibration

_SA_MIN_KEYS = {
    "circularity_lv": "circularity_min_lv",
    "circularity_myo": "circularity_min_myo",
    "convexity_lv": "convexity_min_lv",
    "convexity_rv": "convexity_min_rv",
    "convexity_myo": "convexity_min_myo",
}
_LA_MIN_KEYS = {"myo_thickness_ratio": "myo_thickness_ratio_min"}
_LA_MAX_KEYS = {
    "lv_bg_contact": "lv_bg_contact_max",
    "myo_la_contact": "myo_la_contact_max",
    "lv_width_over_myo": "lv_width_over_myo_max",
}


def lower_limit(values, quantile: float, margin: float) -> float:
    """Quantile of ``values`` widened downward by ``margin``, never above the minimum."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(min(np.quantile(v, quantile) * (1 - margin), v[0]))


def upper_limit(values, quantile: float, margin: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(max(np.quantile(v, 1 - quantile) * (1 + margin), v[-1]))


def calibrate_thresholds(valid_set: list[LabelMap], quantile: float = 0.001,
                         margin: float = 0.10, base: Thresholds | None = None) -> Thresholds:
    """Fit thresholds so that every map of ``valid_set`` passes."""
    if not valid_set:
        raise EmptyCalibrationSet("calibration needs at least one map")
    if not 0 < quantile < 0.5:
        raise ValueError("quantile must lie in (0, 0.5)")
    base = base or Thresholds()
    view = valid_set[0].view
    sizes = {max(m.width, m.height) for m in valid_set}
    ref = sizes.pop() if len(sizes) == 1 else base.ref_size
    collected: dict[str, list[float]] = {}
    for m in valid_set:
        if m.view != view:
            raise ValueError("calibration set mixes views")
        for k, val in stats(m).items():
            if val is not None:
                scale = max(m.width, m.height) / ref if k.endswith("contact") else 1.0
                collected.setdefault(k, []).append(val / scale)
    updates = {"ref_size": ref}
    mins = _SA_MIN_KEYS if view == View.SA else _LA_MIN_KEYS
    for key, field_name in mins.items():
        if key in collected:
            updates[field_name] = min(1.0, max(lower_limit(collected[key], quantile, margin), 1e-6))
    if view == View.LA:
        for key, field_name in _LA_MAX_KEYS.items():
            if key in collected:
                updates[field_name] = upper_limit(collected[key], quantile, margin)
    return replace(base, **updates)

"""Synthetic short-axis and long-axis label maps and a defect injector.

Shapes are rasterized from implicit functions (ellipses, annuli, crescents)
with low-frequency boundary jitter, then placed with a small random pose.
The target ``t`` enters as a monotone geometric factor: SA structures shrink
toward the apex (t=1), the LA ventricle contracts toward end-systole (t=1).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage as ndi

from . import criteria
from .errors import CouldNotInject, ParameterOutOfRange
from .grid import (BG, LA_LA, LA_LV, LA_MYO, SA_LV, SA_MYO, SA_RV, LabelMap, View, register)


@dataclass(frozen=True)
class SaShapeParams:
    lv_radius: float = 9.0
    myo_thickness: float = 3.6
    rv_span: float = 150.0  # degrees
    rv_thickness: float = 6.0
    t: float = 0.0
    eccentricity: float = 0.06
    rotation: float = 0.0  # degrees
    offset: tuple = (0.0, 0.0)
    jitter_seed: int = 0
    jitter: float = 0.03

    def check(self):
        _in(self, "lv_radius", 5.0, 14.0)
        _in(self, "myo_thickness", 2.8, 6.0)
        _in(self, "rv_span", 90.0, 220.0)
        _in(self, "rv_thickness", 3.0, 12.0)
        _in(self, "t", 0.0, 1.0)
        _in(self, "eccentricity", 0.0, 0.2)
        _in(self, "rotation", -30.0, 30.0)
        _in(self, "jitter", 0.0, 0.06)


@dataclass(frozen=True)
class LaShapeParams:
    lv_width: float = 9.0  # half width
    lv_length: float = 24.0
    myo_thickness: float = 3.5
    la_width: float = 9.0  # half width
    la_height: float = 8.0
    t: float = 0.0
    rotation: float = 0.0
    offset: tuple = (0.0, 0.0)
    jitter_seed: int = 0
    jitter: float = 0.03

    def check(self):
        _in(self, "lv_width", 5.0, 14.0)
        _in(self, "lv_length", 14.0, 32.0)
        _in(self, "myo_thickness", 2.8, 6.0)
        _in(self, "la_width", 5.0, 14.0)
        _in(self, "la_height", 4.0, 12.0)
        _in(self, "t", 0.0, 1.0)
        _in(self, "rotation", -30.0, 30.0)
        _in(self, "jitter", 0.0, 0.06)


def _in(p, name, lo, hi):
    v = getattr(p, name)
    if not lo <= v <= hi:
        raise ParameterOutOfRange(f"{name}={v} outside [{lo}, {hi}]")


def random_sa_params(rng: np.random.Generator, t: float | None = None) -> SaShapeParams:
    return SaShapeParams(
        lv_radius=rng.uniform(7.5, 10.5),
        myo_thickness=rng.uniform(3.2, 4.4),
        rv_span=rng.uniform(130, 180),
        rv_thickness=rng.uniform(5.0, 8.0),
        t=float(rng.uniform(0, 1) if t is None else t),
        eccentricity=rng.uniform(0.0, 0.1),
        rotation=rng.uniform(-8, 8),
        offset=(rng.uniform(-3, 3), rng.uniform(-3, 3)),
        jitter_seed=int(rng.integers(2**31)),
        jitter=rng.uniform(0.0, 0.04),
    )


def random_la_params(rng: np.random.Generator, t: float | None = None) -> LaShapeParams:
    return LaShapeParams(
        lv_width=rng.uniform(7.5, 9.5),
        lv_length=rng.uniform(21, 25),
        myo_thickness=rng.uniform(3.2, 4.2),
        la_width=rng.uniform(7.0, 10.0),
        la_height=rng.uniform(6.0, 8.0),
        t=float(rng.uniform(0, 1) if t is None else t),
        rotation=rng.uniform(-8, 8),
        offset=(rng.uniform(-3, 3), rng.uniform(-3, 3)),
        jitter_seed=int(rng.integers(2**31)),
        jitter=rng.uniform(0.0, 0.04),
    )


def _coords(size: int, scale: float, rotation_deg: float, center: tuple[float, float]):
    """Pixel centers mapped into the shape frame (64-pixel units, origin at ``center``)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    th = math.radians(rotation_deg)
    c, s = math.cos(th), math.sin(th)
    dx = (xx - center[0]) / scale
    dy = (yy - center[1]) / scale
    # inverse rotation
    return c * dx + s * dy, -s * dx + c * dy


def _radial_jitter(rng: np.random.Generator, amp: float):
    coefs = [(k, amp * rng.uniform(-1, 1) / k, rng.uniform(0, 2 * math.pi)) for k in (2, 3, 4)]

    def f(theta):
        out = np.ones_like(theta)
        for k, a, ph in coefs:
            out = out + a * np.cos(k * theta + ph)
        return out

    return f


def render_sa(p: SaShapeParams, size: int = 64) -> np.ndarray:
    p.check()
    s = size / 64.0
    jr = np.random.default_rng(p.jitter_seed)
    jit_lv = _radial_jitter(jr, p.jitter)
    jit_th = _radial_jitter(jr, 2 * p.jitter)
    cx = size / 2 + p.offset[0] * s
    cy = size / 2 + p.offset[1] * s
    # LV sits slightly right of center so that LV + RV fit the canvas
    x, y = _coords(size, s, p.rotation, (cx + 3 * s, cy))
    r = np.hypot(x, y)
    theta = np.arctan2(y, x)
    lv_r = p.lv_radius * (1 - 0.40 * p.t)
    ell = 1 + p.eccentricity * np.cos(2 * theta)
    r_lv = lv_r * ell * jit_lv(theta)
    r_myo = r_lv + p.myo_thickness * (1 + 0.15 * p.t) * jit_th(theta)
    span = math.radians(p.rv_span * (1 - 0.25 * p.t)) / 2
    dtheta = np.abs(np.angle(np.exp(1j * (theta - math.pi))))
    frac = np.clip(1 - (dtheta / span) ** 2, 0, None)
    rv_w = p.rv_thickness * (1 - 0.4 * p.t) * np.sqrt(frac)
    out = np.zeros((size, size), dtype=np.uint8)
    out[(r >= r_myo) & (r < r_myo + rv_w) & (rv_w >= 1.6)] = SA_RV
    out[(r >= r_lv) & (r < r_myo)] = SA_MYO
    out[r < r_lv] = SA_LV
    return out


def render_la(p: LaShapeParams, size: int = 64) -> np.ndarray:
    p.check()
    s = size / 64.0
    jr = np.random.default_rng(p.jitter_seed)
    ph = jr.uniform(0, 2 * math.pi, size=2)
    amp = p.jitter * jr.uniform(-1, 1, size=2)
    w = p.lv_width * (1 - 0.32 * p.t)
    length = p.lv_length * (1 - 0.16 * p.t)
    th = p.myo_thickness * (1 + 0.35 * p.t)
    cx = size / 2 + p.offset[0] * s
    cy = size / 2 + p.offset[1] * s
    # frame origin at the middle of the mitral plane; apex toward -y
    x, y = _coords(size, s, p.rotation, (cx, cy + 0.42 * length * s))
    # LV ellipse centred 0.45 L above the base, clipped at the base
    yc = -0.45 * length
    a = 0.55 * length
    mod = 1 + amp[0] * np.sin(2 * math.pi * y / length + ph[0]) + amp[1] * np.sin(4 * math.pi * y / length + ph[1])
    lv_in = (x / (w * mod)) ** 2 + ((y - yc) / a) ** 2 < 1
    myo_in = (x / (w * mod + th)) ** 2 + ((y - yc) / (a + 0.9 * th)) ** 2 < 1
    above = y < 0
    la_cy = 0.75 * p.la_height
    la_in = (x / p.la_width) ** 2 + ((y - la_cy) / p.la_height) ** 2 < 1
    out = np.zeros((size, size), dtype=np.uint8)
    out[la_in & ~above] = LA_LA
    out[myo_in & above] = LA_MYO
    out[lv_in & above] = LA_LV
    return out


def _passes(lmap: LabelMap, th: criteria.Thresholds | None) -> bool:
    th = th or criteria.Thresholds.lenient()
    if not criteria.check(lmap, th).valid:
        return False
    reg, _ = register(lmap)
    return criteria.check(reg, th).valid


def _redraw(p, rng):
    return replace(p, jitter_seed=int(rng.integers(2**31)), jitter=p.jitter * 0.7,
                   rotation=float(np.clip(p.rotation + rng.uniform(-2, 2), -30, 30)),
                   offset=(p.offset[0] + rng.uniform(-0.5, 0.5), p.offset[1] + rng.uniform(-0.5, 0.5)))


def gen_sa(params: SaShapeParams, rng: np.random.Generator | None = None, size: int = 64,
           thresholds: criteria.Thresholds | None = None, max_tries: int = 50) -> tuple[LabelMap, float]:
    """Render a short-axis map. If the rendered map (or its registered version)
    fails the criteria, jitter and pose are redrawn from ``rng``.

    ``thresholds=None`` checks only the threshold-free criteria.
    """
    rng = rng or np.random.default_rng(params.jitter_seed)
    p = params
    for _ in range(max_tries):
        m = LabelMap(render_sa(p, size), View.SA)
        if _passes(m, thresholds):
            return m, p.t
        p = _redraw(p, rng)
    raise ParameterOutOfRange(f"could not render a valid SA map from {params}")


def gen_la(params: LaShapeParams, rng: np.random.Generator | None = None, size: int = 64,
           thresholds: criteria.Thresholds | None = None, max_tries: int = 50) -> tuple[LabelMap, float]:
    rng = rng or np.random.default_rng(params.jitter_seed)
    p = params
    for _ in range(max_tries):
        m = LabelMap(render_la(p, size), View.LA)
        if _passes(m, thresholds):
            return m, p.t
        p = _redraw(p, rng)
    raise ParameterOutOfRange(f"could not render a valid LA map from {params}")


def generate(view: View | str, count: int, seed: int, size: int = 64,
             thresholds: criteria.Thresholds | None = None) -> list[tuple[LabelMap, float]]:
    """``count`` random valid maps with their targets; item i uses its own derived seed."""
    view = View(view)
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        if view == View.SA:
            out.append(gen_sa(random_sa_params(rng), rng, size, thresholds))
        else:
            out.append(gen_la(random_la_params(rng), rng, size, thresholds))
    return out


# ---------------------------------------------------------------- defects

class DefectKind(str, enum.Enum):
    HOLE_PUNCH = "HolePunch"
    INTERFACE_GAP = "InterfaceGap"
    DUPLICATE_FRAGMENT = "DuplicateFragment"
    DETACH_RV = "DetachRV"
    TOUCH_BRIDGE = "TouchBridge"
    CONCAVITY_NOTCH = "ConcavityNotch"
    THIN_MYO = "ThinMyo"


@dataclass(frozen=True)
class DefectSpec:
    kind: DefectKind
    magnitude: float = 1.0
    seed: int = 0
    structure: str | None = None  # class name, where the kind needs one


# (view, kind, structure) -> criterion expected to fire
_TARGETS = {
    (View.SA, DefectKind.HOLE_PUNCH, "LV"): "SA01",
    (View.SA, DefectKind.HOLE_PUNCH, "RV"): "SA02",
    (View.SA, DefectKind.HOLE_PUNCH, "MYO"): "SA03",
    (View.SA, DefectKind.INTERFACE_GAP, "LV"): "SA04",
    (View.SA, DefectKind.INTERFACE_GAP, "RV"): "SA05",
    (View.SA, DefectKind.DUPLICATE_FRAGMENT, "LV"): "SA06",
    (View.SA, DefectKind.DUPLICATE_FRAGMENT, "RV"): "SA07",
    (View.SA, DefectKind.DUPLICATE_FRAGMENT, "MYO"): "SA08",
    (View.SA, DefectKind.DETACH_RV, None): "SA09",
    (View.SA, DefectKind.TOUCH_BRIDGE, None): "SA10",
    (View.SA, DefectKind.THIN_MYO, None): "SA11",
    (View.SA, DefectKind.CONCAVITY_NOTCH, "LV"): "SA12",
    (View.LA, DefectKind.HOLE_PUNCH, "LV"): "LA01",
    (View.LA, DefectKind.HOLE_PUNCH, "MYO"): "LA02",
    (View.LA, DefectKind.HOLE_PUNCH, "LA"): "LA03",
    (View.LA, DefectKind.INTERFACE_GAP, "MYO"): "LA04",
    (View.LA, DefectKind.INTERFACE_GAP, "LA"): "LA05",
    (View.LA, DefectKind.DUPLICATE_FRAGMENT, "LV"): "LA06",
    (View.LA, DefectKind.DUPLICATE_FRAGMENT, "MYO"): "LA07",
    (View.LA, DefectKind.DUPLICATE_FRAGMENT, "LA"): "LA08",
    (View.LA, DefectKind.DETACH_RV, None): "LA09",
    (View.LA, DefectKind.TOUCH_BRIDGE, None): "LA09",
    (View.LA, DefectKind.THIN_MYO, None): "LA11",
    (View.LA, DefectKind.CONCAVITY_NOTCH, "MYO"): "LA11",
}

_DEFAULT_STRUCTURE = {
    (View.SA, DefectKind.HOLE_PUNCH): "LV",
    (View.SA, DefectKind.INTERFACE_GAP): "LV",
    (View.SA, DefectKind.DUPLICATE_FRAGMENT): "RV",
    (View.SA, DefectKind.CONCAVITY_NOTCH): "LV",
    (View.LA, DefectKind.HOLE_PUNCH): "LV",
    (View.LA, DefectKind.INTERFACE_GAP): "MYO",
    (View.LA, DefectKind.DUPLICATE_FRAGMENT): "LA",
    (View.LA, DefectKind.CONCAVITY_NOTCH): "MYO",
}


def defect_catalog(view: View) -> list[tuple[DefectKind, str | None]]:
    return [(k, s) for (v, k, s) in _TARGETS if v == View(view)]


def target_criterion(view: View, spec: DefectSpec) -> str:
    structure = spec.structure or _DEFAULT_STRUCTURE.get((View(view), DefectKind(spec.kind)))
    key = (View(view), DefectKind(spec.kind), structure)
    if key not in _TARGETS:
        raise ValueError(f"defect {spec.kind} on {structure} is not defined for the {view} view")
    return _TARGETS[key]


def _disk(shape, cy, cx, r):
    yy, xx = np.ogrid[0:shape[0], 0:shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _pick(rng, mask):
    rr, cc = np.nonzero(mask)
    if rr.size == 0:
        return None
    i = rng.integers(rr.size)
    return int(rr[i]), int(cc[i])


def _ids(view):
    from .grid import SCHEMES
    return SCHEMES[view]


def _apply(px, view, spec, rng):
    ids = _ids(view)
    kind = DefectKind(spec.kind)
    structure = spec.structure or _DEFAULT_STRUCTURE.get((view, kind))
    mag = max(spec.magnitude, 0.0)
    out = px.copy()
    sq = np.ones((3, 3), bool)
    if kind == DefectKind.HOLE_PUNCH:
        cls = ids[structure]
        r = 0.5 + 0.7 * mag
        inner = ndi.binary_erosion(px == cls, structure=sq, iterations=int(math.ceil(r)) + 1)
        loc = _pick(rng, inner)
        if loc is None:
            inner = ndi.binary_erosion(px == cls, structure=sq)
            loc = _pick(rng, inner)
        if loc is None:
            return None
        out[_disk(px.shape, loc[0], loc[1], r) & (px == cls)] = BG
        return out
    if kind == DefectKind.INTERFACE_GAP:
        if view == View.SA:
            a, b = (SA_LV, SA_MYO) if structure == "LV" else (SA_RV, SA_MYO)
        else:
            a, b = (LA_LV, LA_MYO) if structure == "MYO" else (LA_LV, LA_LA)
        ma, mb = px == a, px == b
        iface = ma & ndi.binary_dilation(mb, structure=ndi.generate_binary_structure(2, 1))
        # stay away from the background so the gap is enclosed
        far_bg = ndi.distance_transform_edt(px != BG) > 2.5 + mag
        loc = _pick(rng, iface & far_bg)
        if loc is None:
            return None
        d = _disk(px.shape, loc[0], loc[1], 0.8 + 0.6 * mag)
        out[d & (ma | mb)] = BG
        return out
    if kind == DefectKind.DUPLICATE_FRAGMENT:
        cls = ids[structure]
        r = 1.5 + mag
        free = ndi.distance_transform_edt(px == BG) > r + 2.5
        free[: int(r) + 2] = free[-int(r) - 2:] = False
        free[:, : int(r) + 2] = free[:, -int(r) - 2:] = False
        loc = _pick(rng, free)
        if loc is None:
            return None
        out[_disk(px.shape, loc[0], loc[1], r)] = cls
        return out
    if kind == DefectKind.DETACH_RV:
        cls = SA_RV if view == View.SA else LA_LA
        m = px == cls
        if not m.any():
            return None
        shift = int(round(2 + mag))
        if view == View.SA:
            cy, cx = ndi.center_of_mass(px == SA_LV)
            ry, rx = ndi.center_of_mass(m)
            vec = np.array([ry - cy, rx - cx])
        else:
            ly, lx = ndi.center_of_mass(px == LA_LV)
            ay, ax = ndi.center_of_mass(m)
            vec = np.array([ay - ly, ax - lx])
        vec = vec / (np.linalg.norm(vec) + 1e-9)
        dy, dx = np.round(vec * shift).astype(int)
        if dy == 0 and dx == 0:
            return None
        out[m] = BG
        moved = np.roll(np.roll(m, dy, axis=0), dx, axis=1)
        out[moved & (out == BG)] = cls
        return out
    if kind == DefectKind.TOUCH_BRIDGE:
        if view == View.SA:
            # open the septum: MYO pixels close to both LV and RV become LV
            near_lv = ndi.distance_transform_edt(px != SA_LV)
            near_rv = ndi.distance_transform_edt(px != SA_RV)
            cand = (px == SA_MYO) & (near_lv + near_rv <= np.percentile(
                (near_lv + near_rv)[px == SA_MYO], 30))
            loc = _pick(rng, cand)
            if loc is None:
                return None
            band = _disk(px.shape, loc[0], loc[1], 1.5 + mag) & (px == SA_MYO)
            out[band] = SA_LV
            return out
        # LA: open the apex so the LV touches the background
        myo = px == LA_MYO
        rows = np.flatnonzero(myo.any(axis=1))
        if rows.size == 0:
            return None
        apex_rows = myo & (np.arange(px.shape[0])[:, None] <= rows[0] + 6)
        loc = _pick(rng, apex_rows & ndi.binary_dilation(px == LA_LV, iterations=2))
        if loc is None:
            return None
        hole = _disk(px.shape, loc[0], loc[1], 2.5 + mag) & myo
        out[hole] = BG
        return out
    if kind == DefectKind.CONCAVITY_NOTCH:
        if view == View.SA:
            cls = ids[structure]
            m = px == cls
            rr, cc = np.nonzero(m)
            if rr.size == 0:
                return None
            cy, cx = rr.mean(), cc.mean()
            edge = m & ~ndi.binary_erosion(m)
            loc = _pick(rng, edge)
            if loc is None:
                return None
            # wedge from the boundary toward the centroid
            depth = 1.25 + 0.1 * mag
            yy, xx = np.mgrid[0:px.shape[0], 0:px.shape[1]]
            vy, vx = cy - loc[0], cx - loc[1]
            L = math.hypot(vy, vx) + 1e-9
            proj = ((yy - loc[0]) * vy + (xx - loc[1]) * vx) / L
            perp = np.abs((yy - loc[0]) * vx - (xx - loc[1]) * vy) / L
            mouth = 2.8 + 0.6 * mag
            wedge = (proj >= -2) & (proj <= depth * L) & (perp <= mouth * (1 - proj / (depth * L)))
            fill = SA_MYO if cls == SA_LV else BG
            out[wedge & m] = fill
            return out
        return _thin_la_wall(px, rng, mag, notch=True)
    if kind == DefectKind.THIN_MYO:
        if view == View.SA:
            # remove a sector of the free wall so the LV meets the background
            myo = px == SA_MYO
            outer = myo & ndi.binary_dilation(px == BG, structure=ndi.generate_binary_structure(2, 1))
            loc = _pick(rng, outer & ~ndi.binary_dilation(px == SA_RV, iterations=3))
            if loc is None:
                return None
            out[_disk(px.shape, loc[0], loc[1], 3.0 + mag) & myo] = BG
            return out
        return _thin_la_wall(px, rng, mag, notch=False)
    raise ValueError(f"unknown defect kind {kind}")


def _thin_la_wall(px, rng, mag, notch):
    myo = px == LA_MYO
    rows = np.flatnonzero((px == LA_LV).any(axis=1))
    if rows.size == 0 or not myo.any():
        return None
    mid = (rows[0] + rows[-1]) // 2
    side = rng.integers(2)
    out = px.copy()
    half = 2 + int(mag) if notch else 5 + int(2 * mag)
    r0, r1 = max(mid - half, 0), mid + half + 1
    for r in range(r0, r1):
        cols = np.flatnonzero(myo[r])
        lv_cols = np.flatnonzero(px[r] == LA_LV)
        if cols.size == 0 or lv_cols.size == 0:
            continue
        wall = cols[cols < lv_cols[0]] if side == 0 else cols[cols > lv_cols[-1]]
        if wall.size < 2:
            continue
        keep = 1
        strip = wall[:-keep] if side == 0 else wall[keep:]
        out[r, strip] = BG
    return out


def inject_defect(lmap: LabelMap, spec: DefectSpec, thresholds: criteria.Thresholds | None = None,
                  max_tries: int = 16) -> LabelMap:
    """Return a copy of ``lmap`` with one defect whose target criterion fires."""
    view = lmap.view
    target = target_criterion(view, spec)
    rng = np.random.default_rng(spec.seed)
    for _ in range(max_tries):
        px = _apply(lmap.pixels, view, spec, rng)
        if px is None:
            continue
        cand = LabelMap(px, view)
        if criteria.check(cand, thresholds)[target]:
            return cand
    raise CouldNotInject(f"{spec.kind} ({spec.structure}) did not trigger {target} after {max_tries} tries")


def defect_corpus(view: View | str, count: int, seed: int, size: int = 64,
                  thresholds: criteria.Thresholds | None = None, max_misses: int = 64,
                  kinds=None):
    """``count`` (ground truth, defective, spec) triples cycling through the catalog.

    ``kinds`` optionally restricts the catalog to the named defect kinds.
    """
    view = View(view)
    catalog = defect_catalog(view)
    if kinds:
        wanted = {DefectKind(k) for k in kinds}
        catalog = [(k, s) for k, s in catalog if k in wanted]
        if not catalog:
            raise ValueError(f"none of {sorted(map(str, kinds))} applies to the {view.value} view")
    out = []
    i = 0
    attempt = 0
    misses = 0
    while len(out) < count:
        rng = np.random.default_rng([seed, 7, attempt])
        attempt += 1
        gt, t = generate(view, 1, seed=int(rng.integers(2**31)), size=size, thresholds=thresholds)[0]
        kind, structure = catalog[i % len(catalog)]
        spec = DefectSpec(kind, magnitude=float(rng.uniform(0.0, 2.0)), seed=int(rng.integers(2**31)),
                          structure=structure)
        try:
            bad = inject_defect(gt, spec, thresholds)
        except CouldNotInject:
            misses += 1
            if misses >= max_misses:
                raise CouldNotInject(f"{kind.value} ({structure}) never triggered "
                                     f"{target_criterion(view, spec)}; are the thresholds calibrated?")
            continue
        misses = 0
        out.append((gt, bad, spec))
        i += 1
    return out

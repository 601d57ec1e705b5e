"""Label maps, connected components, registration and resizing."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage as ndi

from .errors import MissingStructure, ViewMismatch

STRUCT8 = np.ones((3, 3), dtype=bool)
STRUCT4 = ndi.generate_binary_structure(2, 1)


class View(str, enum.Enum):
    SA = "sa"
    LA = "la"


SCHEMES = {
    View.SA: {"BG": 0, "RV": 1, "MYO": 2, "LV": 3},
    View.LA: {"BG": 0, "LV": 1, "MYO": 2, "LA": 3},
}

BG = 0
# short axis
SA_RV, SA_MYO, SA_LV = 1, 2, 3
# long axis
LA_LV, LA_MYO, LA_LA = 1, 2, 3


def class_id(view: View, name: str) -> int:
    return SCHEMES[View(view)][name]


@dataclass(frozen=True, eq=False)
class LabelMap:
    pixels: np.ndarray
    view: View

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError(f"label map must be a non-empty 2D array, got shape {px.shape}")
        px = px.astype(np.uint8, copy=True)
        if px.max(initial=0) >= len(SCHEMES[View(self.view)]):
            raise ValueError(f"pixel value {int(px.max())} outside the {self.view} class scheme")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "view", View(self.view))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def mask(self, cls: int) -> np.ndarray:
        return self.pixels == cls

    def replace(self, pixels: np.ndarray) -> "LabelMap":
        return LabelMap(pixels, self.view)

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.view == other.view and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.view, self.pixels.shape, self.pixels.tobytes()))


@dataclass(frozen=True)
class Transform:
    """Maps input coords p to output coords: scale * R(rotation) (p + translation - c) + c.

    ``c`` is the integer image center (width // 2, height // 2). Coordinates
    are (x, y) with y pointing down; rotation is in radians.
    """

    translation: tuple = (0.0, 0.0)
    rotation: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("transform scale must be positive")

    @property
    def is_identity(self) -> bool:
        return self.translation == (0.0, 0.0) and self.rotation == 0.0 and self.scale == 1.0


IDENTITY = Transform()


@dataclass(eq=False)
class Component:
    cls: int
    rows: np.ndarray
    cols: np.ndarray
    bbox: tuple  # (row0, col0, row1, col1), exclusive ends
    area: int = field(init=False)

    def __post_init__(self):
        self.area = int(self.rows.size)

    def crop_mask(self, pad: int = 1) -> np.ndarray:
        r0, c0, r1, c1 = self.bbox
        m = np.zeros((r1 - r0 + 2 * pad, c1 - c0 + 2 * pad), dtype=np.uint8)
        m[self.rows - r0 + pad, self.cols - c0 + pad] = 1
        return m

    @cached_property
    def perimeter(self) -> float:
        """Length of the traced outer 8-boundary (axis steps 1, diagonal steps sqrt 2)."""
        contours, _ = cv2.findContours(self.crop_mask(), cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
        if not contours:
            return 0.0
        c = max(contours, key=len)
        if len(c) == 1:
            return 0.0
        return float(cv2.arcLength(c, closed=True))


def label(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    return ndi.label(mask, structure=STRUCT8 if connectivity == 8 else STRUCT4)


def count_components(mask: np.ndarray, connectivity: int = 8) -> int:
    return label(mask, connectivity)[1]


def connected_components(lmap: LabelMap, cls: int, connectivity: int = 8) -> list[Component]:
    if cls not in SCHEMES[lmap.view].values():
        raise ValueError(f"class {cls} not in the {lmap.view.value} scheme")
    lab, n = label(lmap.pixels == cls, connectivity)
    if n == 0:
        return []
    out = []
    slices = ndi.find_objects(lab)
    for i, sl in enumerate(slices, start=1):
        sub = lab[sl] == i
        rr, cc = np.nonzero(sub)
        rr = rr + sl[0].start
        cc = cc + sl[1].start
        out.append(Component(cls, rr, cc, (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)))
    return out


def centroid(mask: np.ndarray) -> tuple[float, float] | None:
    """(x, y) centroid of a boolean mask, or None if empty."""
    rr, cc = np.nonzero(mask)
    if rr.size == 0:
        return None
    return float(cc.mean()), float(rr.mean())


def _center(shape) -> tuple[int, int]:
    return shape[1] // 2, shape[0] // 2


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _wrap_angle(a: float) -> float:
    a = math.remainder(a, 2 * math.pi)
    return math.pi if a == -math.pi else a


def _sample(pixels: np.ndarray, src_x: np.ndarray, src_y: np.ndarray) -> np.ndarray:
    h, w = pixels.shape
    xi = np.floor(src_x + 0.5).astype(np.int64)
    yi = np.floor(src_y + 0.5).astype(np.int64)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros(src_x.shape, dtype=pixels.dtype)
    out[inside] = pixels[yi[inside], xi[inside]]
    return out


def _sample_linear(pixels: np.ndarray, n_classes: int, src_x: np.ndarray, src_y: np.ndarray) -> np.ndarray:
    # bilinear interpolation of each class indicator, then argmax (ties -> lowest ID)
    coords = [src_y, src_x]
    scores = np.stack([
        ndi.map_coordinates((pixels == c).astype(np.float64), coords, order=1, mode="constant",
                            cval=1.0 if c == BG else 0.0)
        for c in range(n_classes)
    ])
    return np.argmax(scores, axis=0).astype(pixels.dtype)


def apply_transform(lmap: LabelMap, t: Transform, interpolation: str = "linear") -> LabelMap:
    """Resample ``lmap`` under ``t`` with background fill.

    ``"linear"`` interpolates the one-hot class indicators and takes the
    argmax; ``"nearest"`` copies the nearest source label. Both are exact for
    integer translations.
    """
    if t.is_identity:
        return lmap
    h, w = lmap.pixels.shape
    cx, cy = _center((h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    inv = _rot(-t.rotation) / t.scale
    dx, dy = xx - cx, yy - cy
    sx = inv[0, 0] * dx + inv[0, 1] * dy + cx - t.translation[0]
    sy = inv[1, 0] * dx + inv[1, 1] * dy + cy - t.translation[1]
    if interpolation == "nearest":
        return lmap.replace(_sample(lmap.pixels, sx, sy))
    if interpolation != "linear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    return lmap.replace(_sample_linear(lmap.pixels, len(SCHEMES[lmap.view]), sx, sy))


def invert(t: Transform) -> Transform:
    """The exact inverse transform (as a mapping of continuous coordinates)."""
    # out = sR(p + t - c) + c  =>  p = R^-1 (out - c)/s + c - t
    # written in the same form: p = s' R' (out + t' - c) + c with
    # s' = 1/s, R' = R^-1, t' = -s R t
    r = _rot(t.rotation)
    tx, ty = t.translation
    nt = -t.scale * (r @ np.array([tx, ty]))
    return Transform((float(nt[0]), float(nt[1])), -t.rotation, 1.0 / t.scale)


def apply_inverse(lmap: LabelMap, t: Transform, interpolation: str = "linear") -> LabelMap:
    return apply_transform(lmap, invert(t), interpolation)


def register_sa(lmap: LabelMap, rv_left: bool = True) -> tuple[LabelMap, Transform]:
    """Center on the LV centroid and put the RV centroid on the horizontal line
    through it (to the left by default)."""
    if lmap.view != View.SA:
        raise ViewMismatch("register_sa needs a short-axis map")
    lv = centroid(lmap.pixels == SA_LV)
    if lv is None:
        raise MissingStructure("LV")
    cx, cy = _center(lmap.pixels.shape)
    translation = (float(round(cx - lv[0])), float(round(cy - lv[1])))
    rv = centroid(lmap.pixels == SA_RV)
    rotation = 0.0
    if rv is not None and (rv[0] != lv[0] or rv[1] != lv[1]):
        phi = math.atan2(rv[1] - lv[1], rv[0] - lv[0])
        target = math.pi if rv_left else 0.0
        rotation = _wrap_angle(target - phi)
    t = Transform(translation, rotation)
    return apply_transform(lmap, t), t


def principal_angle(mask: np.ndarray) -> float:
    """Orientation of the major axis of ``mask`` (radians, in (-pi/2, pi/2])."""
    rr, cc = np.nonzero(mask)
    x = cc - cc.mean()
    y = rr - rr.mean()
    cxx, cyy, cxy = (x * x).mean(), (y * y).mean(), (x * y).mean()
    return 0.5 * math.atan2(2 * cxy, cxx - cyy)


def register_la(lmap: LabelMap) -> tuple[LabelMap, Transform]:
    """Center on the LV+MYO centroid and make the LV principal axis vertical,
    apex up (atrium below the LV)."""
    if lmap.view != View.LA:
        raise ViewMismatch("register_la needs a long-axis map")
    lv_mask = lmap.pixels == LA_LV
    if not lv_mask.any():
        raise MissingStructure("LV")
    union = centroid(lv_mask | (lmap.pixels == LA_MYO))
    cx, cy = _center(lmap.pixels.shape)
    translation = (float(round(cx - union[0])), float(round(cy - union[1])))
    phi = principal_angle(lv_mask)
    cands = [_wrap_angle(math.pi / 2 - phi), _wrap_angle(-math.pi / 2 - phi)]
    la = centroid(lmap.pixels == LA_LA)
    lv = centroid(lv_mask)
    if la is not None:
        v = np.array([la[0] - lv[0], la[1] - lv[1]])
        rotation = max(cands, key=lambda a: (_rot(a) @ v)[1])
    else:
        rotation = min(cands, key=abs)
    if abs(rotation) < 1e-12:
        rotation = 0.0
    t = Transform(translation, rotation)
    return apply_transform(lmap, t), t


def register(lmap: LabelMap) -> tuple[LabelMap, Transform]:
    return register_sa(lmap) if lmap.view == View.SA else register_la(lmap)


def resize(lmap: LabelMap, size: int) -> LabelMap:
    """Nearest-neighbour resize to ``size`` x ``size``."""
    if size <= 0:
        raise ValueError("size must be positive")
    h, w = lmap.pixels.shape
    if h == size and w == size:
        return lmap
    ri = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return lmap.replace(lmap.pixels[np.ix_(ri, ci)])


def resize_to(lmap: LabelMap, shape: tuple[int, int]) -> LabelMap:
    h, w = lmap.pixels.shape
    if (h, w) == tuple(shape):
        return lmap
    ri = np.minimum(((np.arange(shape[0]) + 0.5) * h / shape[0]).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(shape[1]) + 0.5) * w / shape[1]).astype(np.int64), w - 1)
    return lmap.replace(lmap.pixels[np.ix_(ri, ci)])


# ---------------------------------------------------------------- file IO

def write_png(lmap: LabelMap, path) -> None:
    """8-bit single-channel PNG (pixel value = class ID) plus a JSON sidecar."""
    path = Path(path)
    ok, buf = cv2.imencode(".png", lmap.pixels)
    if not ok:
        raise OSError(f"could not encode {path}")
    path.write_bytes(buf.tobytes())
    sidecar = {"view": lmap.view.value, "classes": SCHEMES[lmap.view]}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_png(path, view: View | str | None = None) -> LabelMap:
    path = Path(path)
    side = path.with_suffix(".json")
    if view is None:
        if not side.exists():
            raise ValueError(f"{path}: no sidecar JSON and no view given")
        view = json.loads(side.read_text())["view"]
    px = cv2.imdecode(np.frombuffer(path.read_bytes(), np.uint8), cv2.IMREAD_UNCHANGED)
    if px is None or px.ndim != 2:
        raise ValueError(f"{path} is not a single-channel label PNG")
    return LabelMap(px, View(view))

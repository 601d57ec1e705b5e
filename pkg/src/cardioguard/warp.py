"""Post-processing that maps invalid label maps to valid ones.

The map is registered and resized to the model canvas, encoded to its
posterior mean z, and then either decoded directly (VaeOnly, Robust) or moved
along the segment toward its nearest banked vector until the decoding passes
the criteria (NnSwap, NnSwapRS, Dicho).
"""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import bank as bank_mod
from . import criteria, vae
from .errors import EmptyBank, MissingStructure, TooFewMaps, ViewMismatch
from .grid import LabelMap, Transform, apply_inverse, register, resize, resize_to

log = logging.getLogger(__name__)

GRID_ITERATIONS = 5


class WarpMode(str, enum.Enum):
    VAE_ONLY = "VaeOnly"
    ROBUST = "Robust"
    NN_SWAP = "NnSwap"
    NN_SWAP_RS = "NnSwapRS"
    DICHO = "Dicho"

    @property
    def guaranteed(self) -> bool:
        return self in (WarpMode.NN_SWAP, WarpMode.NN_SWAP_RS, WarpMode.DICHO)

    @classmethod
    def parse(cls, s: str) -> "WarpMode":
        low = s.replace("-", "").replace("_", "").lower()
        for m in cls:
            if m.value.lower() == low:
                return m
        raise ValueError(f"unknown mode {s!r}; choose from {[m.value for m in cls]}")


class WarpPath(str, enum.Enum):
    IDENTITY = "Identity"
    VAE_RECONSTRUCTION = "VaeReconstruction"
    LATENT_WARP = "LatentWarp"


@dataclass
class WarpOutcome:
    input_report: criteria.CriterionReport
    path: WarpPath
    alpha: float
    delta: np.ndarray | None
    output: LabelMap
    report: criteria.CriterionReport
    seconds: float
    registration_failed: bool = False
    fallback: bool = False
    evaluations: int = 0
    nn_index: int | None = None

    def to_json(self) -> dict:
        return {
            "path": self.path.value,
            "alpha": self.alpha,
            "valid_before": self.input_report.valid,
            "valid_after": self.report.valid,
            "violations_before": self.input_report.violations,
            "violations_after": self.report.violations,
            "registration_failed": self.registration_failed,
            "fallback": self.fallback,
            "evaluations": self.evaluations,
            "nn_index": self.nn_index,
            "seconds": round(self.seconds, 6),
        }


def dichotomic_alpha(is_valid, iterations: int = GRID_ITERATIONS) -> tuple[float, int]:
    """Bisection on [0, 1] for the smallest alpha with ``is_valid(alpha)``.

    Assumes alpha = 0 is invalid and alpha = 1 valid. Each step halves the
    bracket, so the answer lies on the grid m / 2**iterations. Returns
    (alpha, number of evaluations).
    """
    lo, hi = 0.0, 1.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if is_valid(mid):
            hi = mid
        else:
            lo = mid
    return hi, iterations


def latent_alpha(model: vae.VaeParams, thresholds: criteria.Thresholds | None, z: np.ndarray,
                 z_nn: np.ndarray, iterations: int = GRID_ITERATIONS) -> tuple[float, int]:
    """Smallest step along z_nn - z (on the bisection grid) whose decoding passes the criteria.

    Validity is judged on the model canvas. Returns 0 without any search when
    z itself decodes valid.
    """
    z = np.asarray(z, np.float32)
    delta = np.asarray(z_nn, np.float32) - z

    def ok(a):
        return criteria.check(vae.decode_map(model, z + np.float32(a) * delta), thresholds).valid

    if ok(0.0):
        return 0.0, 0
    return dichotomic_alpha(ok, iterations)


class _Frame:
    """Canonical frame of one input map: registration plus resize to canvas."""

    def __init__(self, lmap: LabelMap, canvas: int):
        self.shape = lmap.pixels.shape
        self.registered, self.transform = register(lmap)
        self.canvas_map = resize(self.registered, canvas) if self.shape != (canvas, canvas) else self.registered

    def back(self, canvas_map: LabelMap) -> LabelMap:
        m = canvas_map if canvas_map.pixels.shape == self.shape else resize_to(canvas_map, self.shape)
        return apply_inverse(m, self.transform)


def _seed_prefix(b: bank_mod.LatentBank) -> bank_mod.LatentBank:
    n = int(b.meta.get("stats", {}).get("seed_vectors", b.count))
    if n == 0:
        raise EmptyBank("bank holds no seed vectors")
    return bank_mod.LatentBank(b.vectors[:n], b.meta)


def postprocess(lmap: LabelMap, model: vae.VaeParams, bank: bank_mod.LatentBank | None = None,
                mode: WarpMode | str = WarpMode.DICHO, thresholds: criteria.Thresholds | None = None,
                robust_model: vae.VaeParams | None = None, iterations: int = GRID_ITERATIONS,
                threads: int = 1, fallback_neighbours: int = 8) -> WarpOutcome:
    """Return a valid version of ``lmap`` (guaranteed for NnSwap, NnSwapRS and Dicho).

    NnSwap searches only the seed latents stored at the front of the bank;
    NnSwapRS and Dicho search the whole bank.
    """
    t0 = time.perf_counter()
    mode = WarpMode.parse(mode) if isinstance(mode, str) else mode
    if lmap.view != model.view:
        raise ViewMismatch(f"map is {lmap.view.value}, model is {model.view.value}")
    if mode.guaranteed and bank is None:
        raise EmptyBank(f"mode {mode.value} needs a latent bank")
    if mode == WarpMode.ROBUST and robust_model is None:
        raise ValueError("Robust mode needs the robust encoder")

    def done(path, out, rep, **kw):
        return WarpOutcome(in_rep, path, kw.pop("alpha", 0.0), kw.pop("delta", None), out, rep,
                           time.perf_counter() - t0, **kw)

    in_rep = criteria.check(lmap, thresholds)
    if in_rep.valid:
        return done(WarpPath.IDENTITY, lmap, in_rep)
    try:
        frame = _Frame(lmap, model.arch.canvas)
    except MissingStructure as exc:
        log.warning("registration failed (%s); map passed through", exc)
        return done(WarpPath.IDENTITY, lmap, in_rep, registration_failed=True)

    encoder = robust_model if mode == WarpMode.ROBUST else model
    z = vae.encode(encoder, frame.canvas_map).mu
    evals = 0

    def final(zv):
        nonlocal evals
        evals += 1
        canvas = vae.decode_map(model, zv)
        out = frame.back(canvas)
        ok = criteria.check(canvas, thresholds).valid
        rep = criteria.check(out, thresholds)
        return ok and rep.valid, out, rep

    ok, out, rep = final(z)
    if not mode.guaranteed or ok:
        return done(WarpPath.VAE_RECONSTRUCTION, out, rep, evaluations=evals)

    search = _seed_prefix(bank) if mode == WarpMode.NN_SWAP else bank
    idx, z_nn, _ = bank_mod.nearest(search, z, threads)
    candidates = [idx]
    fallback = False
    while True:
        delta = z_nn.astype(np.float32) - z
        ok1, out1, rep1 = final(z + delta)
        if ok1:
            break
        # the banked vector is valid in the canvas frame but the map back to
        # the input frame broke it; try the next neighbours
        fallback = True
        if len(candidates) > fallback_neighbours:
            log.error("no neighbour survives the inverse mapping; returning canvas-frame decode")
            return done(WarpPath.LATENT_WARP, out1, rep1, alpha=1.0, delta=delta, fallback=True,
                        evaluations=evals, nn_index=idx)
        d2 = ((search.vectors.astype(np.float64) - z) ** 2).sum(1)
        d2[candidates] = np.inf
        idx = int(np.argmin(d2))
        candidates.append(idx)
        z_nn = search.vectors[idx]

    alpha = 1.0
    if mode == WarpMode.DICHO:
        cache = {}

        def valid_at(a):
            r = final(z + np.float32(a) * delta)
            cache[a] = r
            return r[0]

        alpha, _ = dichotomic_alpha(valid_at, iterations)
        if alpha < 1.0:
            _, out1, rep1 = cache[alpha]
    return done(WarpPath.LATENT_WARP, out1, rep1, alpha=alpha, delta=delta, fallback=fallback,
                evaluations=evals, nn_index=idx)


def interpolation_audit(model: vae.VaeParams, maps, pairs: int = 300, points: int = 25,
                        seed: int = 0, thresholds: criteria.Thresholds | None = None) -> float:
    """Fraction of decoded linear interpolants between random map pairs that fail the criteria."""
    maps = list(maps)
    if len(maps) < 2:
        raise TooFewMaps("need at least two maps")
    mu = vae.encode(model, maps).mu
    rng = np.random.default_rng([seed, 9])
    steps = np.linspace(0.0, 1.0, points + 2)[1:-1].astype(np.float32)
    bad = total = 0
    for _ in range(pairs):
        i, j = rng.choice(len(maps), size=2, replace=False)
        zs = mu[i][None] + steps[:, None] * (mu[j] - mu[i])[None]
        for px in vae.decode_labels(model, zs):
            bad += not criteria.check(LabelMap(px, model.view), thresholds).valid
            total += 1
    return bad / total

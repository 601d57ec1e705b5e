"""Bank of latent vectors that decode to valid maps.

Built by rejection sampling from a diagonal Gaussian proposal against a Parzen
estimate of the seed-latent density, keeping only draws whose decoding passes
the criteria. Queries are exact nearest-neighbour scans.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import criteria
from .errors import (AcceptanceStall, ChecksumMismatch, EmptyBank, FormatVersionMismatch,
                     ShapeMismatch, TooFewSeeds)
from .grid import LabelMap

log = logging.getLogger(__name__)

MAGIC = b"ACLB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHQ")


# ---------------------------------------------------------------- densities

@dataclass(frozen=True)
class ParzenEstimator:
    refs: np.ndarray  # (N, d) float64
    h: np.ndarray  # (d,) bandwidth per dimension; all equal when isotropic

    @property
    def dim(self) -> int:
        return self.refs.shape[1]


def fit_parzen(seeds, bandwidth: str = "isotropic", scale: float = 1.0) -> ParzenEstimator:
    """Gaussian-kernel estimator with Scott's-rule bandwidth.

    ``bandwidth="isotropic"`` pools the per-dimension Scott bandwidths by
    geometric mean; ``"diagonal"`` keeps one bandwidth per dimension. ``scale``
    multiplies the result.
    """
    z = np.asarray(seeds, dtype=np.float64)
    if z.ndim != 2 or len(z) < 2:
        raise TooFewSeeds("need at least two seed vectors")
    n, d = z.shape
    sd = z.std(axis=0, ddof=1)
    if np.any(sd <= 0):
        raise TooFewSeeds("seed vectors have zero variance in some dimension")
    h = sd * n ** (-1.0 / (d + 4)) * scale
    if bandwidth == "isotropic":
        h = np.full(d, math.exp(np.log(h).mean()))
    elif bandwidth != "diagonal":
        raise ValueError(f"unknown bandwidth mode {bandwidth!r}")
    return ParzenEstimator(z, h)


def parzen_log_density(est: ParzenEstimator, z, chunk: int = 2048) -> np.ndarray | float:
    """log((1/N) sum_i K_h(z - z_i)) for one query or a batch."""
    q = np.asarray(z, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != est.dim:
        raise ShapeMismatch(f"query dim {q.shape[1]} != {est.dim}")
    refs = est.refs / est.h
    r2 = (refs ** 2).sum(1)
    const = -np.log(est.h).sum() - 0.5 * est.dim * math.log(2 * math.pi) - math.log(len(refs))
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        qs = q[s:s + chunk] / est.h
        d2 = (qs ** 2).sum(1)[:, None] + r2[None, :] - 2 * qs @ refs.T
        out[s:s + chunk] = logsumexp(-0.5 * np.maximum(d2, 0.0), axis=1) + const
    return float(out[0]) if single else out


def parzen_density(est: ParzenEstimator, z):
    return np.exp(parzen_log_density(est, z))


@dataclass(frozen=True)
class ProposalGaussian:
    mean: np.ndarray
    var: np.ndarray
    log_m: float

    @property
    def m(self) -> float:
        return math.exp(self.log_m)

    def log_pdf(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return -0.5 * (((z - self.mean) ** 2 / self.var).sum(1) + np.log(2 * math.pi * self.var).sum())

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + rng.standard_normal((n, len(self.mean))) * np.sqrt(self.var)


def fit_proposal(seeds, parzen: ParzenEstimator | None = None, inflate: bool = True,
                 pilot: int = 4096, seed: int = 0, margin: float = 1.1) -> ProposalGaussian:
    """Diagonal Gaussian at the seed mean; envelope M = margin * max P/Q.

    With ``inflate`` the variance is the seed variance plus h**2, which is the
    variance of the Parzen mixture itself. The max is taken over the seeds and
    ``pilot`` draws from the proposal.
    """
    z = np.asarray(seeds, dtype=np.float64)
    if z.ndim != 2 or len(z) < 2:
        raise TooFewSeeds("need at least two seed vectors")
    var = z.var(axis=0, ddof=1)
    if np.any(var <= 0):
        raise TooFewSeeds("seed vectors have zero variance in some dimension")
    parzen = parzen or fit_parzen(z)
    if inflate:
        var = var + parzen.h ** 2
    q = ProposalGaussian(z.mean(axis=0), var, 0.0)
    probe = z
    if pilot:
        probe = np.vstack([z, q.draw(np.random.default_rng([seed, 7]), pilot)])
    ratio = parzen_log_density(parzen, probe) - q.log_pdf(probe)
    log_m = math.log(margin) + float(ratio.max())
    out = ProposalGaussian(q.mean, q.var, log_m)
    assert np.all(out.log_m + out.log_pdf(z) >= parzen_log_density(parzen, z))
    return out


# ---------------------------------------------------------------- bank

@dataclass(frozen=True, eq=False)
class LatentBank:
    vectors: np.ndarray  # (count, dim) float32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if v.ndim != 2:
            raise ShapeMismatch("bank vectors must be a 2-D matrix")
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.count

    def __eq__(self, other):
        return (isinstance(other, LatentBank) and self.meta == other.meta
                and self.vectors.shape == other.vectors.shape
                and self.vectors.tobytes() == other.vectors.tobytes())


def _decodes_valid(model, zs: np.ndarray, thresholds) -> np.ndarray:
    from . import vae  # local import keeps bank usable without the model code loaded

    labels = vae.decode_labels(model, zs)
    return np.array([criteria.check(LabelMap(px, model.view), thresholds).valid for px in labels], bool)


def thresholds_digest(thresholds: criteria.Thresholds | None) -> str:
    th = thresholds or criteria.Thresholds()
    return hashlib.sha256(th.to_json().encode()).hexdigest()[:16]


def rejection_sample(model, thresholds: criteria.Thresholds | None, proposal: ProposalGaussian,
                     parzen: ParzenEstimator, n: int, rng: np.random.Generator,
                     seeds=None, use_criteria: bool = True, batch: int = 1024,
                     stall_window: int = 100_000, stall_rate: float = 1e-4, progress=None,
                     decode_batch: int = 128) -> LatentBank:
    """Draw until exactly ``n`` vectors are accepted.

    A draw z is accepted when u < 1[decode(z) valid] * P(z) / (M Q(z)). Seed
    vectors that decode valid are inserted first. With ``use_criteria=False``
    the indicator is constant 1 and ``model`` may be None.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    accepted: list[np.ndarray] = []
    n_seed = 0
    if seeds is not None and len(seeds):
        s = np.asarray(seeds, dtype=np.float32)
        ok = _decodes_valid(model, s, thresholds) if use_criteria else np.ones(len(s), bool)
        keep = s[ok][:n]
        accepted.append(keep)
        n_seed = len(keep)
    have = n_seed
    draws = candidates = rejected_invalid = 0
    window_draws = window_acc = 0
    pending: list[np.ndarray] = []
    n_pending = 0
    while have < n:
        z = proposal.draw(rng, batch)
        u = rng.random(batch)
        log_ratio = parzen_log_density(parzen, z) - proposal.log_pdf(z) - proposal.log_m
        cand = np.log(np.maximum(u, 1e-300)) < log_ratio
        zc = z[cand].astype(np.float32)
        candidates += len(zc)
        draws += batch
        window_draws += batch
        pending.append(zc)
        n_pending += len(zc)
        # decoding is cheaper in batches; flush once enough candidates wait
        if n_pending >= min(decode_batch, n - have) or window_draws >= stall_window:
            zc = np.concatenate(pending)
            pending, n_pending = [], 0
            if use_criteria and len(zc):
                ok = _decodes_valid(model, zc, thresholds)
                rejected_invalid += int((~ok).sum())
                zc = zc[ok]
            take = zc[: n - have]
            accepted.append(take)
            have += len(take)
            window_acc += len(take)
        if window_draws >= stall_window:
            if window_acc / window_draws < stall_rate:
                raise AcceptanceStall(f"acceptance {window_acc}/{window_draws} below {stall_rate}")
            window_draws = window_acc = 0
        if progress:
            progress(have, draws)
    vectors = np.concatenate(accepted)[:n] if accepted else np.empty((0, parzen.dim), np.float32)
    stats = {"draws": draws, "density_candidates": candidates, "rejected_invalid": rejected_invalid,
             "seed_vectors": n_seed, "acceptance_rate": (n - n_seed) / max(draws, 1)}
    log.info("bank built: %s", stats)
    meta = {"model": model.digest() if model is not None else None,
            "criteria": thresholds_digest(thresholds) if use_criteria else None,
            "view": model.view.value if model is not None else None,
            "stats": stats, "log_m": proposal.log_m}
    return LatentBank(vectors, meta)


def build_bank(model, seeds, n: int, seed: int, thresholds: criteria.Thresholds | None = None,
               bandwidth: str = "diagonal", scale: float = 2.5, progress=None) -> LatentBank:
    """Convenience wrapper: fit Parzen + proposal on ``seeds`` and sample ``n`` vectors."""
    parzen = fit_parzen(seeds, bandwidth, scale)
    prop = fit_proposal(seeds, parzen, seed=seed)
    bank = rejection_sample(model, thresholds, prop, parzen, n, np.random.default_rng([seed, 5]),
                            seeds=seeds, progress=progress)
    bank.meta.update({"bandwidth": bandwidth, "bandwidth_scale": scale, "seed": seed})
    return bank


# ---------------------------------------------------------------- queries

def _scan(vectors: np.ndarray, q: np.ndarray, offset: int) -> tuple[float, int]:
    d2 = ((vectors.astype(np.float64) - q) ** 2).sum(1)
    i = int(np.argmin(d2))
    return float(d2[i]), i + offset


def nearest(bank: LatentBank, z, threads: int = 1) -> tuple[int, np.ndarray, float]:
    """Exact Euclidean nearest neighbour; ties resolve to the lowest index."""
    if bank.count == 0:
        raise EmptyBank("bank has no vectors")
    q = np.asarray(z, dtype=np.float64)
    if q.shape != (bank.dim,):
        raise ShapeMismatch(f"query shape {q.shape} != ({bank.dim},)")
    if threads <= 1 or bank.count < 2 * threads:
        d2, i = _scan(bank.vectors, q, 0)
    else:
        bounds = np.linspace(0, bank.count, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda k: _scan(bank.vectors[bounds[k]:bounds[k + 1]], q, bounds[k]),
                                range(threads)))
        d2, i = min(parts)
    return i, bank.vectors[i], math.sqrt(d2)


def audit(bank: LatentBank, model, thresholds: criteria.Thresholds | None = None) -> list[int]:
    """Indices of stored vectors whose decoding fails the criteria."""
    bad = []
    for s in range(0, bank.count, 1024):
        ok = _decodes_valid(model, bank.vectors[s:s + 1024], thresholds)
        bad.extend(int(s + i) for i in np.flatnonzero(~ok))
    return bad


# ---------------------------------------------------------------- persistence

def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def save(bank: LatentBank, path) -> None:
    meta = json.dumps(bank.meta, sort_keys=True).encode()
    body = (_HEADER.pack(MAGIC, FORMAT_VERSION, bank.dim, bank.count)
            + bank.vectors.astype("<f4").tobytes()
            + struct.pack("<I", len(meta)) + meta)
    Path(path).write_bytes(body + struct.pack("<Q", _checksum(body)))


def load(path) -> LatentBank:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 12:
        raise ChecksumMismatch("file too short")
    magic, version, dim, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatVersionMismatch("not a latent bank file")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"bank format {version}, expected {FORMAT_VERSION}")
    body, (stored,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if _checksum(body) != stored:
        raise ChecksumMismatch("bank file checksum does not match")
    off = _HEADER.size
    n_bytes = count * dim * 4
    vectors = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    off += n_bytes
    (mlen,) = struct.unpack_from("<I", raw, off)
    meta = json.loads(raw[off + 4:off + 4 + mlen].decode())
    return LatentBank(vectors.copy(), meta)


def file_size(count: int, dim: int, meta_len: int) -> int:
    return _HEADER.size + count * dim * 4 + 4 + meta_len + 8

"""Constrained VAE over one-hot label maps.

Encoder: 4 blocks of [3x3 conv stride 2, ELU, 3x3 conv stride 1, ELU], then
two dense heads for the posterior mean and log-variance. Decoder: dense
projection, 4 blocks of [2x2 transposed conv stride 2, ELU, 3x3 conv, ELU],
and a final 3x3 conv producing class scores. A single linear neuron regresses
the target ``t`` from the latent vector.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import criteria
from . import numerics as nx
from .errors import EmptyDataset, ShapeMismatch
from .grid import LabelMap, View

log = logging.getLogger(__name__)

N_CLASSES = 4
LATENT_DIM = 32
ENCODER_PREFIX = "enc."
DECODER_PREFIX = "dec."
REGRESSOR_PREFIX = "reg."


@dataclass(frozen=True)
class Architecture:
    view: str = "sa"
    canvas: int = 64
    widths: tuple = (12, 24, 48, 96)
    latent_dim: int = LATENT_DIM
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.canvas % 16:
            raise ValueError("canvas must be divisible by 16")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def bottleneck(self) -> tuple[int, int, int]:
        s = self.canvas // 16
        return self.widths[-1], s, s


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    reg_weight: float = 30.0  # 0 disables the regression constraint

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class Posterior:
    mu: np.ndarray
    logvar: np.ndarray


@dataclass
class VaeParams:
    arch: Architecture
    params: dict
    latent_std: np.ndarray | None = None
    robust: bool = False
    train_config: TrainConfig | None = None
    log: list = field(default_factory=list)

    @property
    def view(self) -> View:
        return View(self.arch.view)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        meta = {
            "kind": "cvae",
            "arch": asdict(self.arch),
            "robust_encoder": self.robust,
            "train_config": asdict(self.train_config) if self.train_config else None,
            "log": self.log,
        }
        params = dict(self.params)
        if self.latent_std is not None:
            params["stats.latent_std"] = self.latent_std
        nx.save_params(path, params, meta)

    @classmethod
    def load(cls, path) -> "VaeParams":
        params, meta = nx.load_params(path)
        arch = meta["arch"]
        arch["widths"] = tuple(arch["widths"])
        std = params.pop("stats.latent_std", None)
        tc = TrainConfig(**meta["train_config"]) if meta.get("train_config") else None
        return cls(Architecture(**arch), params, std, bool(meta.get("robust_encoder")), tc,
                   meta.get("log") or [])


# ---------------------------------------------------------------- init

def _normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) * math.sqrt(1.0 / fan_in)).astype(np.float32)


def init_params(arch: Architecture, seed: int = 0) -> VaeParams:
    rng = np.random.default_rng(seed)
    p = {}
    cin = arch.n_classes
    for i, w in enumerate(arch.widths):
        p[f"enc.b{i}.c1.w"] = _normal(rng, (w, cin, 3, 3), cin * 9)
        p[f"enc.b{i}.c1.b"] = np.zeros(w, np.float32)
        p[f"enc.b{i}.c2.w"] = _normal(rng, (w, w, 3, 3), w * 9)
        p[f"enc.b{i}.c2.b"] = np.zeros(w, np.float32)
        cin = w
    flat = int(np.prod(arch.bottleneck))
    k = arch.latent_dim
    p["enc.mu.w"] = _normal(rng, (flat, k), flat)
    p["enc.mu.b"] = np.zeros(k, np.float32)
    p["enc.logvar.w"] = _normal(rng, (flat, k), flat) * 0.1
    p["enc.logvar.b"] = np.zeros(k, np.float32)
    p["dec.fc.w"] = _normal(rng, (k, flat), k)
    p["dec.fc.b"] = np.zeros(flat, np.float32)
    dec_widths = _decoder_widths(arch)
    cin = arch.widths[-1]
    for i, w in enumerate(dec_widths):
        p[f"dec.b{i}.up.w"] = _normal(rng, (cin, w, 2, 2), cin)
        p[f"dec.b{i}.up.b"] = np.zeros(w, np.float32)
        p[f"dec.b{i}.c.w"] = _normal(rng, (w, w, 3, 3), w * 9)
        p[f"dec.b{i}.c.b"] = np.zeros(w, np.float32)
        cin = w
    p["dec.out.w"] = _normal(rng, (arch.n_classes, cin, 3, 3), cin * 9)
    p["dec.out.b"] = np.zeros(arch.n_classes, np.float32)
    p["reg.w"] = _normal(rng, (k, 1), k)
    p["reg.b"] = np.zeros(1, np.float32)
    return VaeParams(arch, p)


def _decoder_widths(arch: Architecture) -> list[int]:
    # mirror of the encoder, halving per block and ending at the first width
    w = list(reversed(arch.widths[:-1])) + [arch.widths[0]]
    return w


# ---------------------------------------------------------------- forward

def _t(params, name):
    v = params[name]
    return v if isinstance(v, nx.Tensor) else nx.Tensor(v)


def encoder_forward(params: dict, arch: Architecture, x: np.ndarray):
    """x: (N, K, H, W) one-hot -> (mu, logvar) tensors of shape (N, latent)."""
    h = nx.Tensor(x)
    for i in range(len(arch.widths)):
        h = nx.elu(nx.conv2d(h, _t(params, f"enc.b{i}.c1.w"), _t(params, f"enc.b{i}.c1.b"), stride=2))
        h = nx.elu(nx.conv2d(h, _t(params, f"enc.b{i}.c2.w"), _t(params, f"enc.b{i}.c2.b"), stride=1))
    flat = nx.reshape(h, (h.shape[0], -1))
    mu = nx.dense(flat, _t(params, "enc.mu.w"), _t(params, "enc.mu.b"))
    logvar = nx.dense(flat, _t(params, "enc.logvar.w"), _t(params, "enc.logvar.b"))
    return mu, logvar


def decoder_forward(params: dict, arch: Architecture, z):
    """z: (N, latent) -> class logits (N, K, H, W)."""
    z = z if isinstance(z, nx.Tensor) else nx.Tensor(np.asarray(z, dtype=np.float32))
    h = nx.elu(nx.dense(z, _t(params, "dec.fc.w"), _t(params, "dec.fc.b")))
    h = nx.reshape(h, (z.shape[0],) + arch.bottleneck)
    for i in range(len(arch.widths)):
        h = nx.elu(nx.conv2d_transposed(h, _t(params, f"dec.b{i}.up.w"), _t(params, f"dec.b{i}.up.b")))
        h = nx.elu(nx.conv2d(h, _t(params, f"dec.b{i}.c.w"), _t(params, f"dec.b{i}.c.b"), stride=1))
    return nx.conv2d(h, _t(params, "dec.out.w"), _t(params, "dec.out.b"), stride=1)


def regressor_forward(params: dict, z):
    z = z if isinstance(z, nx.Tensor) else nx.Tensor(np.atleast_2d(np.asarray(z, dtype=np.float32)))
    return nx.dense(z, _t(params, "reg.w"), _t(params, "reg.b"))


# ---------------------------------------------------------------- public ops

def to_onehot(maps, arch: Architecture) -> np.ndarray:
    if isinstance(maps, LabelMap):
        maps = [maps]
    px = np.stack([m.pixels if isinstance(m, LabelMap) else np.asarray(m) for m in maps])
    if px.shape[1:] != (arch.canvas, arch.canvas):
        raise ShapeMismatch(f"maps are {px.shape[1:]}, model canvas is {arch.canvas}")
    return nx.one_hot(px.astype(np.int64), arch.n_classes)


def encode(model: VaeParams, x) -> Posterior:
    """Posterior of one map (vectors of length 32) or a batch of maps ((N, 32))."""
    single = isinstance(x, LabelMap)
    maps = [x] if single else list(x)
    mus, lvs = [], []
    for i in range(0, len(maps), 64):
        mu, lv = encoder_forward(model.params, model.arch, to_onehot(maps[i:i + 64], model.arch))
        mus.append(mu.data)
        lvs.append(lv.data)
    mu, lv = np.concatenate(mus), np.concatenate(lvs)
    return Posterior(mu[0], lv[0]) if single else Posterior(mu, lv)


def sample_z(post: Posterior, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal(np.shape(post.mu)).astype(np.float32)
    return (post.mu + eps * np.exp(0.5 * post.logvar)).astype(np.float32)


def decode_probs(model: VaeParams, z: np.ndarray, batch: int = 128) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float32))
    if z.shape[1] != model.arch.latent_dim:
        raise ShapeMismatch(f"latent vectors must have {model.arch.latent_dim} entries")
    out = []
    for i in range(0, len(z), batch):
        logits = decoder_forward(model.params, model.arch, z[i:i + batch]).data
        out.append(np.exp(nx._log_softmax(logits)))
    return np.concatenate(out)


def decode_labels(model: VaeParams, z: np.ndarray, batch: int = 128) -> np.ndarray:
    """Argmax label arrays (N, H, W); ties go to the lowest class ID."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float32))
    out = []
    for i in range(0, len(z), batch):
        logits = decoder_forward(model.params, model.arch, z[i:i + batch]).data
        out.append(np.argmax(logits, axis=1).astype(np.uint8))
    return np.concatenate(out)


def decode(model: VaeParams, z: np.ndarray) -> tuple[np.ndarray, LabelMap]:
    """Decode one latent vector to (probabilities (K, H, W), argmax label map)."""
    z = np.asarray(z, dtype=np.float32)
    if z.shape != (model.arch.latent_dim,):
        raise ShapeMismatch(f"z must have shape ({model.arch.latent_dim},)")
    probs = decode_probs(model, z[None])[0]
    return probs, LabelMap(np.argmax(probs, axis=0).astype(np.uint8), model.view)


def decode_map(model: VaeParams, z: np.ndarray) -> LabelMap:
    return LabelMap(decode_labels(model, z)[0], model.view)


def regress(model: VaeParams, z: np.ndarray) -> np.ndarray | float:
    z = np.asarray(z, dtype=np.float32)
    out = np.atleast_2d(z) @ model.params["reg.w"] + model.params["reg.b"]
    return float(out[0, 0]) if z.ndim == 1 else out[:, 0]


def regression_direction(model: VaeParams) -> np.ndarray:
    """Unit regressor axis scaled per dimension by the latent std, renormalized."""
    w = model.params["reg.w"][:, 0].astype(np.float64)
    d = w / (np.linalg.norm(w) + 1e-12)
    if model.latent_std is not None:
        d = d * model.latent_std
    return (d / (np.linalg.norm(d) + 1e-12)).astype(np.float32)


# ---------------------------------------------------------------- losses

def _loss_terms(tensors, arch, x_onehot, labels, t, eps, reg_weight):
    mu, logvar = encoder_forward(tensors, arch, x_onehot)
    std = nx.exp(nx.scale(logvar, 0.5))
    z = nx.add(mu, nx.mul(std, nx.Tensor(eps)))
    logits = decoder_forward(tensors, arch, z)
    nll = nx.softmax_nll(logits, labels)
    kl = nx.kl_diag_vs_standard(mu, logvar)
    terms = {"nll": nll, "kl": kl}
    total = nx.add(nll, kl)
    if reg_weight:
        pred = regressor_forward(tensors, z)
        reg = nx.l2(pred, np.asarray(t, np.float32).reshape(-1, 1))
        terms["reg"] = reg
        total = nx.add(total, nx.scale(reg, reg_weight))
    return total, terms, mu, logvar


def cvae_loss(model: VaeParams, x, t, rng: np.random.Generator, reg_weight: float = 1.0) -> tuple[float, dict]:
    """Reconstruction NLL + KL to N(0, I) + squared regression error (batch mean).

    Returns the total and the individual terms.
    """
    maps = [x] if isinstance(x, LabelMap) else list(x)
    t = np.atleast_1d(np.asarray(t, dtype=np.float32))
    if len(t) != len(maps):
        raise ShapeMismatch("one target per map required")
    if np.any((t < 0) | (t > 1)):
        raise ValueError("targets must lie in [0, 1]")
    onehot = to_onehot(maps, model.arch)
    labels = np.stack([m.pixels for m in maps]).astype(np.int64)
    eps = rng.standard_normal((len(maps), model.arch.latent_dim)).astype(np.float32)
    total, terms, _, _ = _loss_terms(model.params, model.arch, onehot, labels, t, eps, reg_weight)
    out = {k: float(v.data) for k, v in terms.items()}
    out.setdefault("reg", 0.0)
    return float(total.data), out


# ---------------------------------------------------------------- training

def _fit_latent_std(model: VaeParams, maps) -> np.ndarray:
    mu = encode(model, maps).mu
    return np.maximum(mu.std(axis=0), 1e-3).astype(np.float32)


def train(dataset, cfg: TrainConfig, arch: Architecture | None = None, init: VaeParams | None = None,
          progress=None) -> VaeParams:
    """Train the cVAE on (LabelMap, t) pairs. Deterministic for a given seed."""
    if not dataset:
        raise EmptyDataset("training needs at least one map")
    maps = [m for m, _ in dataset]
    targets = np.array([t for _, t in dataset], dtype=np.float32)
    if arch is None:
        arch = init.arch if init is not None else Architecture(view=maps[0].view.value, canvas=maps[0].width)
    model = init or init_params(arch, cfg.seed)
    params = dict(model.params)
    if init is None and cfg.reg_weight:
        # start the regressor at the target mean so the encoder need not encode the offset
        params["reg.b"] = np.array([targets.mean()], np.float32)
    onehot_all = to_onehot(maps, arch)
    labels_all = np.stack([m.pixels for m in maps]).astype(np.int64)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = nx.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    frozen = frozenset() if cfg.reg_weight else frozenset(k for k in params if k.startswith(REGRESSOR_PREFIX))
    history = []
    n = len(maps)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = {"total": 0.0, "nll": 0.0, "kl": 0.0, "reg": 0.0}
        t0 = time.time()
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            eps = rng.standard_normal((len(idx), arch.latent_dim)).astype(np.float32)
            box = {}

            def loss_fn(tensors):
                total, terms, _, _ = _loss_terms(tensors, arch, onehot_all[idx], labels_all[idx],
                                                 targets[idx], eps, cfg.reg_weight)
                box.update({k: float(v.data) for k, v in terms.items()})
                return total

            loss, grads = nx.grad_of(loss_fn, params)
            params = nx.adam_step(opt, params, grads, frozen)
            w = len(idx) / n
            sums["total"] += loss * w
            for k, v in box.items():
                sums[k] += v * w
        sums["epoch"] = epoch
        sums["seconds"] = round(time.time() - t0, 3)
        history.append(sums)
        log.info("epoch %d loss %.3f (nll %.3f kl %.3f reg %.4f)", epoch, sums["total"],
                 sums["nll"], sums["kl"], sums["reg"])
        if progress:
            progress(sums)
    out = VaeParams(arch, params, None, False, cfg, [{k: v for k, v in h.items() if k != "seconds"}
                                                    for h in history])
    out.latent_std = _fit_latent_std(out, maps)
    return out


# ---------------------------------------------------------------- robust VAE

@dataclass
class PairedSample:
    x: LabelMap
    x_star: LabelMap
    t: float


@dataclass(frozen=True)
class AlphaDist:
    """alpha ~ sign * Uniform(low, high), in latent-std units."""

    low: float = 2.0
    high: float = 8.0

    def draw(self, rng: np.random.Generator) -> float:
        a = rng.uniform(self.low, self.high)
        return float(a if rng.random() < 0.5 else -a)


def make_invalid_pair(model: VaeParams, x: LabelMap, t: float, rng: np.random.Generator,
                      alpha_dist: AlphaDist | float = AlphaDist(),
                      thresholds: criteria.Thresholds | None = None, tries: int = 8) -> PairedSample | None:
    """Shift the posterior mean of ``x`` along the regressor axis and decode.

    Returns a pair whose corrupted map fails the criteria, or None when every
    try decoded to a valid map.
    """
    z = encode(model, x).mu
    d = regression_direction(model)
    scale = float(np.linalg.norm(model.latent_std)) if model.latent_std is not None else 1.0
    scale /= math.sqrt(model.arch.latent_dim)
    for _ in range(tries):
        a = alpha_dist if isinstance(alpha_dist, (int, float)) else alpha_dist.draw(rng)
        x_star = decode_map(model, z + a * scale * d)
        if not criteria.check(x_star, thresholds).valid:
            return PairedSample(x, x_star, float(t))
        if isinstance(alpha_dist, (int, float)):
            return None
    return None


def harvest_pairs(model: VaeParams, dataset, count: int, seed: int,
                  thresholds: criteria.Thresholds | None = None,
                  alpha_dist: AlphaDist = AlphaDist()) -> list[PairedSample]:
    if not dataset:
        raise EmptyDataset("no maps to corrupt")
    rng = np.random.default_rng([seed, 2])
    pairs = []
    misses = 0
    while len(pairs) < count:
        m, t = dataset[int(rng.integers(len(dataset)))]
        p = make_invalid_pair(model, m, t, rng, alpha_dist, thresholds)
        if p is None:
            misses += 1
            if misses > 20 * count + 100:
                raise RuntimeError(f"latent shifts of {alpha_dist.low}..{alpha_dist.high} latent std keep "
                                   "decoding to valid maps; widen the alpha range")
            continue
        pairs.append(p)
    return pairs


def robust_loss_terms(tensors, frozen_model: VaeParams, x_oh, x_lab, xs_oh, t, eps, ref_mu, ref_lv,
                      reg_weight=1.0):
    arch = frozen_model.arch
    mu_s, lv_s = encoder_forward(tensors, arch, xs_oh)
    mu_c, lv_c = encoder_forward(tensors, arch, x_oh)
    z = nx.add(mu_s, nx.mul(nx.exp(nx.scale(lv_s, 0.5)), nx.Tensor(eps)))
    logits = decoder_forward(tensors, arch, z)
    nll = nx.softmax_nll(logits, x_lab)
    kl_prior = nx.kl_diag_vs_standard(mu_c, lv_c)
    kl_anchor = nx.kl_diag_vs_diag(mu_s, lv_s, nx.Tensor(ref_mu), nx.Tensor(ref_lv))
    total = nx.add(nx.add(nll, kl_prior), kl_anchor)
    terms = {"nll": nll, "kl": kl_prior, "kl_anchor": kl_anchor}
    if reg_weight:
        reg = nx.l2(regressor_forward(tensors, z), np.asarray(t, np.float32).reshape(-1, 1))
        terms["reg"] = reg
        total = nx.add(total, nx.scale(reg, reg_weight))
    return total, terms


def finetune_robust(model: VaeParams, pairs: list[PairedSample], cfg: TrainConfig,
                    clean=None) -> VaeParams:
    """Denoising fine-tune of the encoder only; decoder and regressor stay frozen.

    ``clean`` is an optional list of (LabelMap, t) added as identity pairs.
    Without them the encoder drifts on inputs that are already nearly valid.
    """
    if not pairs:
        raise EmptyDataset("fine-tuning needs at least one pair")
    pairs = list(pairs) + [PairedSample(m, m, float(t)) for m, t in (clean or [])]
    arch = model.arch
    params = {k: v.copy() for k, v in model.params.items()}
    frozen = frozenset(k for k in params if not k.startswith(ENCODER_PREFIX))
    x_oh = to_onehot([p.x for p in pairs], arch)
    xs_oh = to_onehot([p.x_star for p in pairs], arch)
    x_lab = np.stack([p.x.pixels for p in pairs]).astype(np.int64)
    ts = np.array([p.t for p in pairs], np.float32)
    ref = encode(model, [p.x for p in pairs])
    rng = np.random.default_rng([cfg.seed, 3])
    opt = nx.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(pairs)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        acc = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            eps = rng.standard_normal((len(idx), arch.latent_dim)).astype(np.float32)

            def loss_fn(tensors):
                return robust_loss_terms(tensors, model, x_oh[idx], x_lab[idx], xs_oh[idx], ts[idx], eps,
                                         ref.mu[idx], ref.logvar[idx], cfg.reg_weight)[0]

            enc_only = {k: v for k, v in params.items()}
            loss, grads = nx.grad_of(loss_fn, enc_only)
            params = nx.adam_step(opt, params, grads, frozen)
            acc += loss * len(idx) / n
        history.append({"epoch": epoch, "total": acc})
        log.info("robust epoch %d loss %.3f", epoch, acc)
    return VaeParams(arch, params, model.latent_std, True, cfg, history)


# ---------------------------------------------------------------- evaluation helpers

def reconstruct(model: VaeParams, maps) -> list[LabelMap]:
    mu = encode(model, list(maps)).mu
    return [LabelMap(px, model.view) for px in decode_labels(model, mu)]

"""Small reverse-mode autodiff engine on numpy arrays, plus Adam.

Only the operations needed by the convolutional VAE are provided. Arrays are
NCHW for images and (N, features) for dense layers. Values are float32 unless
a caller explicitly passes float64 data (used by some gradient checks).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, NotScalarLoss, ShapeMismatch

FORMAT_VERSION = 1

_active: list["Tape"] = []


class Tape:
    """Records operation nodes in execution order while active.

    Execution order is already a topological order, so ``backward`` simply
    walks the recorded list in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False


@dataclass
class _Node:
    out: "Tensor"
    parents: tuple
    backward: object  # callable(grad_out) -> tuple of parent grads


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, parents, backward) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError("non-finite value produced by tensor op")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _active:
        _active[-1].nodes.append(_Node(out, parents, backward))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tensor on the tape."""
    if loss.data.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgrads = node.backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # leaves: whatever is left in grads that belongs to a leaf tensor
    leaves = {}
    for node in tape.nodes:
        for p in node.parents:
            if p.requires_grad:
                leaves[id(p)] = p
    for key, g in grads.items():
        p = leaves.get(key)
        if p is None:
            continue
        p.grad = g if p.grad is None else p.grad + g


def grad_of(loss_fn, params: dict) -> tuple[float, dict]:
    """Evaluate ``loss_fn(tensors)`` and return (loss, {name: gradient})."""
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with Tape() as tape:
        loss = loss_fn(tensors)
    backward(tape, loss)
    grads = {}
    for k, t in tensors.items():
        grads[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return float(loss.data), grads


# ---------------------------------------------------------------- elementwise

def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def total(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _record(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def elu(x: Tensor) -> Tensor:
    xd = x.data
    neg = xd < 0
    out = np.where(neg, np.expm1(np.minimum(xd, 0)), xd)
    return _record(out, (x,), lambda g: (np.where(neg, g * (out + 1), g),))


# ---------------------------------------------------------------- layers

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N, in) @ w (in, out) + b (out,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: x{x.shape} w{w.shape} b{b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _record(out, (x, w, b), bw)


def _pad_amount(k: int, padding: str) -> int:
    if padding == "same":
        return (k - 1) // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation. x (N, C, H, W), w (O, C, kh, kw), b (O,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: x{x.shape} w{w.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"conv2d bias {b.shape} for {w.shape[0]} outputs")
    n, c, h, wd_ = x.shape
    o, _, kh, kw = w.shape
    p = _pad_amount(kh, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ShapeMismatch(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # cols: (C, kh, kw, N, Ho, Wo); the copy runs along contiguous image rows
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, c * kh * kw)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    wdata = w.data

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (gm @ cols.T).reshape(wdata.shape)
        gcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, p:p + h, p:p + wd_] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _record(out, parents, bw)


def conv2d_transposed(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2x2 transposed convolution with stride 2. x (N, C, H, W), w (C, O, 2, 2).

    This is the adjoint of ``conv2d(., w, stride=2, padding='valid')``, which
    maps O channels back to C.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2:] != (2, 2):
        raise ShapeMismatch(f"conv2d_transposed: x{x.shape} w{w.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeMismatch(f"conv2d_transposed bias {b.shape}")
    n, c, h, wd_ = x.shape
    o = w.shape[1]
    xm = x.data.transpose(0, 2, 3, 1).reshape(n * h * wd_, c)
    wm = w.data.reshape(c, o * 4)
    out = (xm @ wm).reshape(n, h, wd_, o, 2, 2)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd_)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    wdata = w.data

    def bw(g):
        gr = g.reshape(n, o, h, 2, wd_, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * wd_, o * 4)
        gx = (gr @ wdata.reshape(c, o * 4).T).reshape(n, h, wd_, c).transpose(0, 3, 1, 2)
        gw = (xm.T @ gr).reshape(wdata.shape)
        if b is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3))

    parents = (x, w, b) if b is not None else (x, w)
    return _record(out, parents, bw)


# ---------------------------------------------------------------- softmax / losses

def _log_softmax(d: np.ndarray) -> np.ndarray:
    m = d.max(axis=1, keepdims=True)
    s = d - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 (the class channel), per pixel."""
    p = np.exp(_log_softmax(x.data))

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(p, (x,), bw)


def softmax_nll(logits: Tensor, target: np.ndarray) -> Tensor:
    """Pixel-wise negative log-likelihood of integer ``target`` (N, H, W) under
    softmax(logits), summed over pixels and averaged over the batch."""
    if logits.data.ndim != 4 or target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeMismatch(f"softmax_nll: logits{logits.shape} target{target.shape}")
    n = logits.shape[0]
    lsm = _log_softmax(logits.data)
    onehot = one_hot(target, logits.shape[1]).astype(lsm.dtype)
    loss = -(lsm * onehot).sum() / n

    def bw(g):
        return (g * (np.exp(lsm) - onehot) / n,)

    return _record(np.asarray(loss, dtype=lsm.dtype), (logits,), bw)


def nll_pixelwise(probs: Tensor, target: np.ndarray) -> Tensor:
    """NLL of integer ``target`` under per-pixel class probabilities."""
    if probs.data.ndim != 4 or target.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ShapeMismatch(f"nll_pixelwise: probs{probs.shape} target{target.shape}")
    n = probs.shape[0]
    onehot = one_hot(target, probs.shape[1]).astype(probs.data.dtype)
    tiny = np.finfo(probs.data.dtype).tiny
    pd = np.maximum(probs.data, tiny)
    loss = -(np.log(pd) * onehot).sum() / n
    return _record(np.asarray(loss, dtype=pd.dtype), (probs,),
                   lambda g: (-g * onehot / pd / n,))


def kl_diag_vs_standard(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over dims, mean over batch."""
    _check_same(mu, logvar, "kl_diag_vs_standard")
    n = mu.shape[0] if mu.data.ndim > 1 else 1
    m, lv = mu.data, logvar.data
    e = np.exp(lv)
    val = 0.5 * (m * m + e - lv - 1.0).sum() / n
    return _record(np.asarray(val, dtype=m.dtype), (mu, logvar),
                   lambda g: (g * m / n, g * 0.5 * (e - 1.0) / n))


def kl_diag_vs_diag(mu1: Tensor, logvar1: Tensor, mu2: Tensor, logvar2: Tensor) -> Tensor:
    """KL(N(mu1, exp(logvar1)) || N(mu2, exp(logvar2))), summed, mean over batch."""
    mu1, logvar1, mu2, logvar2 = map(_as_tensor, (mu1, logvar1, mu2, logvar2))
    for t in (logvar1, mu2, logvar2):
        _check_same(mu1, t, "kl_diag_vs_diag")
    n = mu1.shape[0] if mu1.data.ndim > 1 else 1
    m1, l1, m2, l2 = mu1.data, logvar1.data, mu2.data, logvar2.data
    inv2 = np.exp(-l2)
    e1 = np.exp(l1)
    d = m1 - m2
    val = 0.5 * (l2 - l1 + (e1 + d * d) * inv2 - 1.0).sum() / n

    def bw(g):
        gm1 = g * d * inv2 / n
        gl1 = g * 0.5 * (e1 * inv2 - 1.0) / n
        gl2 = g * 0.5 * (1.0 - (e1 + d * d) * inv2) / n
        return gm1, gl1, -gm1, gl2

    return _record(np.asarray(val, dtype=m1.dtype), (mu1, logvar1, mu2, logvar2), bw)


def l2(pred: Tensor, target) -> Tensor:
    """Squared error summed over features, mean over batch."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_same(pred, target, "l2")
    n = pred.shape[0] if pred.data.ndim > 0 else 1
    d = pred.data - target.data
    return _record(np.asarray((d * d).sum() / n, dtype=d.dtype), (pred, target),
                   lambda g: (2 * g * d / n, -2 * g * d / n))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """(N, H, W) int labels -> (N, K, H, W) float32 one-hot."""
    eye = np.eye(n_classes, dtype=np.float32)
    return np.moveaxis(eye[labels], -1, 1)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, frozen: frozenset = frozenset()) -> dict:
    """One Adam update with decoupled weight decay; returns new params.

    Names in ``frozen`` are returned untouched (same array object).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        if name in frozen:
            out[name] = p
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"adam_step: grad {g.shape} vs param {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        upd = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = (p - state.lr * (upd + state.weight_decay * p)).astype(p.dtype)
    return out


# ---------------------------------------------------------------- serialization

def save_params(path, params: dict, meta: dict | None = None) -> None:
    """Write ``<path>.json`` manifest and ``<path>.bin`` little-endian f32 blob."""
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "meta": meta or {},
    }
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_params(path) -> tuple[dict, dict]:
    from .errors import ChecksumMismatch, FormatVersionMismatch

    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"model format {manifest.get('format_version')} != {FORMAT_VERSION}")
    blob = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ChecksumMismatch(f"{path.with_suffix('.bin')} does not match its manifest")
    params = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return params, manifest["meta"]

"""Query-conditioned mask network with hand-written gradients.

A small U-Net maps the mixture magnitude to ``k`` intermediate masks. A
linear layer turns the query embedding into ``k`` channel weights, and the
final mask is a single sigmoid over the query-weighted channel sum::

    mask = sigmoid(sum_j w[j] * q[j] * inter[j] + b)

Activations are laid out ``(channels, batch, frames, bins)`` throughout so
the convolutions reduce to one matmul over an im2col buffer.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SIGMOID_CLAMP = 30.0
_ids = itertools.count()


def default_widths(depth: int) -> tuple[int, ...]:
    return tuple(min(8 * 2 ** ((level + 1) // 2), 64) for level in range(depth))


@dataclass(frozen=True)
class SepNetHyper:
    depth: int = 5
    k: int = 8
    embedding_dim: int = 64
    widths: tuple[int, ...] | None = None
    in_channels: int = 2  # log-magnitude plus a normalised frequency coordinate
    leak: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.k < 1 or self.embedding_dim < 1:
            raise ValueError("k and embedding_dim must be positive")
        widths = default_widths(self.depth) if self.widths is None else tuple(self.widths)
        if len(widths) != self.depth or min(widths) < 1:
            raise ValueError(f"need {self.depth} positive widths, got {widths}")
        if self.in_channels not in (1, 2):
            raise ValueError("in_channels must be 1 (magnitude) or 2 (magnitude + frequency)")
        object.__setattr__(self, "widths", widths)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in declaration order."""
        c = (self.in_channels,) + self.widths
        shapes: dict[str, tuple[int, ...]] = {}
        for level in range(self.depth):
            shapes[f"enc{level}.W"] = (c[level + 1], c[level], 3, 3)
            shapes[f"enc{level}.b"] = (c[level + 1],)
        for level in reversed(range(self.depth)):
            out = self.k if level == 0 else c[level]
            shapes[f"dec{level}.W"] = (out, c[level + 1] + c[level], 3, 3)
            shapes[f"dec{level}.b"] = (out,)
        shapes["query.W"] = (self.embedding_dim, self.k)
        shapes["query.b"] = (self.k,)
        shapes["combine.w"] = (self.k,)
        shapes["combine.b"] = (1,)
        return shapes

    def param_count(self) -> int:
        c = (self.in_channels,) + self.widths
        enc = sum(9 * c[i] * c[i + 1] + c[i + 1] for i in range(self.depth))
        dec = 0
        for level in range(self.depth):
            out = self.k if level == 0 else c[level]
            dec += 9 * (c[level + 1] + c[level]) * out + out
        return enc + dec + self.embedding_dim * self.k + 2 * self.k + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass(eq=False)
class SeparationModel:
    hyper: SepNetHyper
    params: dict[str, np.ndarray]
    trained_steps: int = 0
    version: int = 0
    uid: int = field(default_factory=lambda: next(_ids))

    @property
    def dtype(self):
        return self.params["combine.b"].dtype

    def bump(self) -> None:
        """Mark parameters as changed; traces from earlier versions go stale."""
        self.version += 1

    def astype(self, dtype) -> "SeparationModel":
        return SeparationModel(
            self.hyper, {n: p.astype(dtype) for n, p in self.params.items()}, self.trained_steps
        )

    def copy(self) -> "SeparationModel":
        return SeparationModel(
            self.hyper, {n: p.copy() for n, p in self.params.items()}, self.trained_steps
        )

    def check(self) -> None:
        shapes = self.hyper.param_shapes()
        if list(shapes) != list(self.params):
            raise ValueError("parameter names do not match hyperparameters")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"{name}: non-finite values")


def init_model(hyper: SepNetHyper, seed: int = 0, dtype=np.float32) -> SeparationModel:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in hyper.param_shapes().items():
        if name == "combine.w":
            value = np.ones(shape)
        elif name.endswith(".b"):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name != "query.W" else shape[0]
            # layers feeding a leaky rectifier get the He bound, linear ones unit variance
            gain = 6.0 if name.startswith("enc") or (name.startswith("dec") and name != "dec0.W") else 3.0
            bound = np.sqrt(gain / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = value.astype(dtype)
    return SeparationModel(hyper, params)


# ------------------------------------------------------------ conv kernels


def _conv_forward(x, W, b, stride):
    C, B, H, Wd = x.shape
    Co = W.shape[0]
    Ho, Wo = -(-H // stride), -(-Wd // stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((C, 3, 3, B, Ho, Wo), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[
                :, :, dy : dy + stride * (Ho - 1) + 1 : stride, dx : dx + stride * (Wo - 1) + 1 : stride
            ]
    # (N, 9C) @ (9C, Co) is markedly faster in BLAS than the (Co, 9C) @ (9C, N) form
    out = (cols.reshape(C * 9, -1).T @ W.reshape(Co, -1).T).T.reshape(Co, B, Ho, Wo)
    out += b[:, None, None, None]
    return out, cols


def _conv_backward(g, cols, W, x_shape, stride):
    C, B, H, Wd = x_shape
    Co = W.shape[0]
    Ho, Wo = g.shape[2], g.shape[3]
    g2 = g.reshape(Co, -1)
    dW = (g2 @ cols.reshape(C * 9, -1).T).reshape(W.shape)
    db = g2.sum(axis=1, dtype=np.float64).astype(g.dtype)
    dcols = (W.reshape(Co, -1).T @ g2).reshape(C, 3, 3, B, Ho, Wo)
    dxp = np.zeros((C, B, H + 2, Wd + 2), dtype=g.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[
                :, :, dy : dy + stride * (Ho - 1) + 1 : stride, dx : dx + stride * (Wo - 1) + 1 : stride
            ] += dcols[:, dy, dx]
    return dxp[:, :, 1:-1, 1:-1], dW, db


def _upsample(x, size):
    up = x.repeat(2, axis=2).repeat(2, axis=3)
    return up[:, :, : size[0], : size[1]]


def _upsample_backward(g, src_shape):
    C, B, H, W = src_shape
    full = np.zeros((C, B, 2 * H, 2 * W), dtype=g.dtype)
    full[:, :, : g.shape[2], : g.shape[3]] = g
    return full.reshape(C, B, H, 2, W, 2).sum(axis=(3, 5))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -SIGMOID_CLAMP, SIGMOID_CLAMP)))


# ----------------------------------------------------------------- forward


@dataclass
class ForwardTrace:
    model_uid: int
    model_version: int
    out_shape: tuple
    unet_cache: list
    intermediate: np.ndarray  # (k, B, T, F)
    queries: np.ndarray  # (S, B, D)
    channel_weights: np.ndarray  # (S, B, k)
    preact: np.ndarray  # (S, B, T, F)
    mask: np.ndarray  # (S, B, T, F)

    def final_mask(self) -> np.ndarray:
        """Mask in the caller's original layout."""
        return self.mask.reshape(self.out_shape)


def network_input(X: np.ndarray, in_channels: int) -> np.ndarray:
    """Stack log-compressed magnitude (and frequency coordinate) as channels."""
    logmag = np.log1p(X)
    if in_channels == 1:
        return logmag[None]
    n_bins = X.shape[-1]
    coord = np.broadcast_to(np.linspace(-1.0, 1.0, n_bins, dtype=X.dtype), X.shape)
    return np.stack([logmag, coord])


def unet_forward(model: SeparationModel, X: np.ndarray):
    """Run the U-Net on a ``(B, T, F)`` magnitude batch; returns (inter masks, cache)."""
    h = model.hyper
    p = model.params
    x = network_input(X, h.in_channels)
    skips = [x]
    cache = []
    for level in range(h.depth):
        out, cols = _conv_forward(skips[-1], p[f"enc{level}.W"], p[f"enc{level}.b"], 2)
        act = np.where(out > 0, out, h.leak * out)
        cache.append(("enc", level, cols, skips[-1].shape, out))
        skips.append(act)
    cur = skips[-1]
    for level in reversed(range(h.depth)):
        skip = skips[level]
        up = _upsample(cur, skip.shape[2:])
        cat = np.concatenate([up, skip], axis=0)
        out, cols = _conv_forward(cat, p[f"dec{level}.W"], p[f"dec{level}.b"], 1)
        cache.append(("dec", level, cols, cat.shape, out, cur.shape, up.shape[0]))
        cur = out if level == 0 else np.where(out > 0, out, h.leak * out)
    return cur, cache


def unet_backward(model: SeparationModel, cache, d_inter: np.ndarray, grads: dict) -> None:
    h = model.hyper
    p = model.params
    # gradients flowing into each encoder activation from the skip connections
    skip_grads: dict[int, np.ndarray] = {}
    g = d_inter
    for entry in reversed(cache[h.depth :]):
        _, level, cols, cat_shape, out, cur_shape, n_up = entry
        if level != 0:
            g = np.where(out > 0, g, h.leak * g)
        dcat, dW, db = _conv_backward(g, cols, p[f"dec{level}.W"], cat_shape, 1)
        grads[f"dec{level}.W"] = dW
        grads[f"dec{level}.b"] = db
        skip_grads[level] = dcat[n_up:]
        g = _upsample_backward(dcat[:n_up], cur_shape)
    # g is now the gradient w.r.t. the deepest encoder activation
    for level in reversed(range(h.depth)):
        _, _, cols, x_shape, out = cache[level]
        g = np.where(out > 0, g, h.leak * g)
        dx, dW, db = _conv_backward(g, cols, p[f"enc{level}.W"], x_shape, 2)
        grads[f"enc{level}.W"] = dW
        grads[f"enc{level}.b"] = db
        if level > 0:
            g = dx + skip_grads[level]


def head_forward(model: SeparationModel, inter: np.ndarray, queries: np.ndarray):
    """Combine intermediate masks ``(k,B,T,F)`` under queries ``(S,B,D)``."""
    p = model.params
    q = queries @ p["query.W"] + p["query.b"]
    coef = q * p["combine.w"]
    preact = np.einsum("sbj,jbtf->sbtf", coef, inter) + p["combine.b"][0]
    return q, preact, _sigmoid(preact)


def forward(model: SeparationModel, X: np.ndarray, q_emb) -> ForwardTrace:
    """Predict masks for magnitude grid(s) ``X`` conditioned on query vector(s).

    ``X`` is ``(T, F)`` or ``(B, T, F)``. ``q_emb`` is a QueryEmbedding or an
    array shaped ``(D,)``, ``(B, D)`` or ``(S, B, D)``; with ``S`` query sets
    the U-Net still runs once per mixture.
    """
    h = model.hyper
    dtype = model.dtype
    X = np.asarray(X)
    if X.ndim not in (2, 3):
        raise ValueError(f"X must be (T, F) or (B, T, F), got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("magnitude input contains non-finite values")
    Q = np.asarray(getattr(q_emb, "vector", q_emb))
    if Q.shape[-1] != h.embedding_dim:
        raise ValueError(
            f"query dimension {Q.shape[-1]} does not match model embedding_dim {h.embedding_dim}"
        )
    if not np.all(np.isfinite(Q)):
        raise ValueError("query embedding contains non-finite values")
    Xb = X.reshape((-1,) + X.shape[-2:]).astype(dtype)
    B = Xb.shape[0]
    if Q.ndim == 1:
        Qb = np.broadcast_to(Q, (1, B, Q.size))
        out_shape = X.shape
    elif Q.ndim == 2 and X.ndim == 3:
        Qb = Q[None]
        out_shape = X.shape
    elif Q.ndim == 3 and X.ndim == 3:
        Qb = Q
        out_shape = (Q.shape[0],) + X.shape
    else:
        raise ValueError(f"query shape {Q.shape} is incompatible with X shape {X.shape}")
    if Qb.shape[1] != B:
        raise ValueError(f"query batch {Qb.shape[1]} does not match mixture batch {B}")
    Qb = np.ascontiguousarray(Qb, dtype=dtype)
    inter, cache = unet_forward(model, Xb)
    q, preact, mask = head_forward(model, inter, Qb)
    return ForwardTrace(model.uid, model.version, out_shape, cache, inter, Qb, q, preact, mask)


def backward(
    model: SeparationModel, trace: ForwardTrace, d_mask: np.ndarray, return_query_grad: bool = False
):
    """Gradients of a scalar loss given ``dLoss/dMask`` in the trace's layout.

    Returns a dict keyed like ``model.params``; with ``return_query_grad`` also
    the gradient w.r.t. the query array as fed to the head, shaped ``(S,B,D)``.
    """
    if trace.model_uid != model.uid or trace.model_version != model.version:
        raise RuntimeError("stale forward trace: model parameters changed since forward()")
    p = model.params
    dtype = model.dtype
    g = np.asarray(d_mask, dtype=dtype).reshape(trace.mask.shape)
    m = trace.mask
    dz = g * m * (1.0 - m)
    grads: dict[str, np.ndarray] = {}
    grads["combine.b"] = np.array([dz.sum(dtype=np.float64)], dtype=dtype)
    dcoef = np.einsum("sbtf,jbtf->sbj", dz, trace.intermediate)
    q = trace.channel_weights
    grads["combine.w"] = (dcoef * q).sum(axis=(0, 1), dtype=np.float64).astype(dtype)
    dq = dcoef * p["combine.w"]
    grads["query.W"] = np.einsum("sbd,sbj->dj", trace.queries, dq)
    grads["query.b"] = dq.sum(axis=(0, 1), dtype=np.float64).astype(dtype)
    coef = q * p["combine.w"]
    d_inter = np.einsum("sbj,sbtf->jbtf", coef, dz)
    unet_backward(model, trace.unet_cache, d_inter, grads)
    ordered = {name: grads[name] for name in p}
    if return_query_grad:
        return ordered, dq @ p["query.W"].T
    return ordered


def separate_mask(model: SeparationModel, X: np.ndarray, q_emb) -> np.ndarray:
    """Inference helper returning just the final mask."""
    return forward(model, X, q_emb).final_mask()


# -------------------------------------------------------------- checkpoint

_CKPT_MAGIC = b"QSEPCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: SeparationModel, path: str | Path) -> None:
    meta = {"hyper": model.hyper.to_dict(), "trained_steps": model.trained_steps}
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [_CKPT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    parts.append(struct.pack("<I", len(model.params)))
    for name, value in model.params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> SeparationModel:
    data = Path(path).read_bytes()
    if data[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(_CKPT_MAGIC)
    try:
        version, header_len = struct.unpack_from("<II", data, pos)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
            )
        pos += 8
        meta = json.loads(data[pos : pos + header_len].decode("utf-8"))
        pos += header_len
        hyper_dict = dict(meta["hyper"])
        hyper_dict["widths"] = tuple(hyper_dict["widths"])
        hyper = SepNetHyper(**hyper_dict)
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape))
            if len(data) < pos + 4 * size:
                raise CheckpointError(f"{path}: truncated tensor {name}")
            params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    model = SeparationModel(hyper, params, int(meta.get("trained_steps", 0)))
    try:
        model.check()
    except ValueError as exc:
        raise CheckpointError(f"{path}: incompatible checkpoint ({exc})") from exc
    return model

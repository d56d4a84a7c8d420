"""Mix-and-separate training: mixtures, weighted BCE, query mixup and Adam."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import SpectralConfig, TrainConfig
from .embedding import MODALITIES, MixupWeights, QueryEmbedding, mix_queries
from .sepnet import SeparationModel, SepNetHyper, backward, forward, init_model, save_checkpoint
from .spectral import Mask, Spectrogram, Waveform, ideal_binary_masks, stft
from .synthdata import SynthDataset

log = logging.getLogger(__name__)

MASK_CLAMP = 1e-7
NORM_EPS = 1e-8


@dataclass
class TrainingExample:
    mixture: Spectrogram
    mixture_wave: Waveform
    sources: list[Waveform]
    masks: list[Mask]
    class_ids: list[int]
    instance_seeds: list[int]
    queries: list[tuple[QueryEmbedding, QueryEmbedding, QueryEmbedding]]  # (audio, image, text)

    @property
    def n_sources(self) -> int:
        return len(self.sources)


def sample_mixture(
    dataset: SynthDataset,
    n: int,
    rng: np.random.Generator,
    split: str = "train",
    spectral: SpectralConfig | None = None,
) -> TrainingExample:
    """Sum ``n`` random segments from distinct classes into one training example."""
    spectral = spectral or SpectralConfig()
    if dataset.n_classes < n:
        raise ValueError(f"dataset has {dataset.n_classes} classes, need at least {n}")
    classes = [int(c) for c in rng.choice(dataset.n_classes, size=n, replace=False)]
    seeds_pool = dataset.split_seeds(split)
    sources, seeds = [], []
    for c in classes:
        seed = int(seeds_pool[rng.integers(len(seeds_pool))])
        offset = int(rng.integers(dataset.clip_len - dataset.segment_len + 1))
        sources.append(dataset.segment(c, seed, offset))
        seeds.append(seed)
    mix = Waveform(np.sum([s.samples for s in sources], axis=0), dataset.sample_rate)
    args = (spectral.fft_size, spectral.hop, spectral.window_size)
    source_specs = [stft(s, *args) for s in sources]
    space = dataset.space
    queries = [
        (space.embed(c, "audio", seed), space.embed(c, "image", seed), space.embed(c, "text"))
        for c, seed in zip(classes, seeds)
    ]
    return TrainingExample(
        mixture=stft(mix, *args),
        mixture_wave=mix,
        sources=sources,
        masks=ideal_binary_masks(source_specs),
        class_ids=classes,
        instance_seeds=seeds,
        queries=queries,
    )


# ------------------------------------------------------------------- loss


def wbce_loss(X: np.ndarray, M: np.ndarray, M_hat: np.ndarray, normalize: bool = True) -> float:
    """Magnitude-weighted binary cross entropy between a target and predicted mask.

    With ``normalize`` the sum is divided by ``frames * bins * mean(X) + 1e-8``
    so the value does not depend on grid size or input gain.
    """
    X = np.asarray(X, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    M_hat = np.asarray(M_hat, dtype=np.float64)
    if not X.shape == M.shape == M_hat.shape:
        raise ValueError(f"shape mismatch: X {X.shape}, M {M.shape}, M_hat {M_hat.shape}")
    p = np.clip(M_hat, MASK_CLAMP, 1.0 - MASK_CLAMP)
    total = float(np.sum(X * (-M * np.log(p) - (1.0 - M) * np.log(1.0 - p))))
    if normalize:
        total /= X.sum() + NORM_EPS
    return total


def wbce_grad(X: np.ndarray, M: np.ndarray, M_hat: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Analytic ``dLoss/dM_hat`` of :func:`wbce_loss`, evaluated at the clamped mask."""
    p = np.clip(M_hat.astype(np.float64), MASK_CLAMP, 1.0 - MASK_CLAMP)
    g = X * (p - M) / (p * (1.0 - p))
    if normalize:
        g = g / (X.sum() + NORM_EPS)
    return g


def batch_loss_and_grad(
    model: SeparationModel,
    X: np.ndarray,
    M: np.ndarray,
    Q: np.ndarray,
    return_query_grad: bool = False,
):
    """Loss and gradients for mixtures ``X (B,T,F)``, targets ``M (n,B,T,F)``, queries ``Q (n,B,D)``.

    Per-example losses are summed over sources, then averaged over the batch.
    """
    B = X.shape[0]
    trace = forward(model, X, Q)
    M_hat = trace.mask
    total = 0.0
    d_mask = np.empty(M_hat.shape, dtype=np.float64)
    for b in range(B):
        for i in range(M.shape[0]):
            total += wbce_loss(X[b], M[i, b], M_hat[i, b])
            d_mask[i, b] = wbce_grad(X[b], M[i, b], M_hat[i, b])
    result = backward(model, trace, d_mask / B, return_query_grad)
    return (total / B,) + (result if return_query_grad else (result,))


def example_queries(example: TrainingExample, weights: MixupWeights) -> np.ndarray:
    return np.stack([mix_queries(qa, qv, qt, weights).vector for qa, qv, qt in example.queries])


def loss_and_grad(model: SeparationModel, example: TrainingExample, mixup_weights: MixupWeights):
    """Summed WBCE over the example's sources with mixup-combined queries."""
    if model.hyper.k < example.n_sources:
        raise ValueError(f"model k={model.hyper.k} < {example.n_sources} sources")
    X = example.mixture.magnitude[None]
    M = np.stack([m.values for m in example.masks])[:, None]
    Q = example_queries(example, mixup_weights)[:, None]
    loss, grads = batch_loss_and_grad(model, X, M, Q)
    return loss, grads


# -------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({n: np.zeros_like(p) for n, p in params.items()}, {n: np.zeros_like(p) for n, p in params.items()})


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def lr_schedule(step: int, peak: float, warmup_steps: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps == 0 or step >= warmup_steps:
        return peak
    return peak * step / warmup_steps


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in grads.values())))


def clip_gradients(grads: dict, clip_norm: float) -> dict:
    norm = global_norm(grads)
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return {n: (g * scale).astype(g.dtype) for n, g in grads.items()}


# --------------------------------------------------------------- training


def draw_weights(config: TrainConfig, rng: np.random.Generator) -> MixupWeights:
    """Per-example query weights honouring the modality subset.

    With mixup the subset's weights are independent uniforms (others zero);
    without it one modality of the subset is picked per example.
    """
    subset = [m for m in MODALITIES if m in config.modality_subset]
    if not config.mixup_enabled or len(subset) == 1:
        return MixupWeights.only(subset[int(rng.integers(len(subset)))])
    while True:
        w = {m: float(rng.uniform()) if m in subset else 0.0 for m in MODALITIES}
        if sum(w.values()) >= 1e-6:
            return MixupWeights(w["audio"], w["image"], w["text"])


def make_batch(dataset, config: TrainConfig, spectral: SpectralConfig, rng):
    examples = [sample_mixture(dataset, config.n_sources, rng, "train", spectral) for _ in range(config.batch_size)]
    weights = [draw_weights(config, rng) for _ in examples]
    X = np.stack([e.mixture.magnitude for e in examples])
    M = np.stack([np.stack([m.values for m in e.masks]) for e in examples], axis=1)
    Q = np.stack([example_queries(e, w) for e, w in zip(examples, weights)], axis=1)
    return X, M, Q


def train(
    dataset: SynthDataset,
    config: TrainConfig,
    hyper: SepNetHyper,
    spectral: SpectralConfig | None = None,
    out_dir: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[SeparationModel, list[dict]]:
    """Train from scratch; fully determined by ``config.seed``.

    When ``out_dir`` is given, ``loss_history.jsonl`` is appended every step
    and ``model.ckpt`` (plus ``model_step<N>.ckpt`` at ``checkpoint_every``)
    is written.
    """
    spectral = spectral or SpectralConfig()
    config.validate(hyper.k)
    if hyper.embedding_dim != dataset.space.embedding_dim:
        raise ValueError(
            f"model embedding_dim {hyper.embedding_dim} != dataset embedding dim "
            f"{dataset.space.embedding_dim}"
        )
    rng = np.random.default_rng(config.seed)
    model = init_model(hyper, config.seed)
    state = AdamState.zeros_like(model.params)
    history: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    hist_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        hist_fh = open(out / "loss_history.jsonl", "w")
    started = time.perf_counter()
    try:
        for step in range(1, config.total_steps + 1):
            X, M, Q = make_batch(dataset, config, spectral, rng)
            loss, grads = batch_loss_and_grad(model, X, M, Q)
            grads = clip_gradients(grads, config.clip_norm)
            lr = lr_schedule(step, config.lr, config.warmup_steps)
            adam_step(model.params, grads, state, lr, config.beta1, config.beta2, config.eps)
            model.bump()
            model.trained_steps = step
            record = {"step": step, "lr": lr, "loss": loss}
            history.append(record)
            if hist_fh is not None:
                hist_fh.write(json.dumps(record) + "\n")
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(model, out / f"model_step{step}.ckpt")
            if config.log_every and step % config.log_every == 0:
                recent = np.mean([h["loss"] for h in history[-config.log_every :]])
                log.info(
                    "step %d/%d loss %.4f lr %.2e (%.0fs)",
                    step, config.total_steps, recent, lr, time.perf_counter() - started,
                )
                if progress is not None:
                    progress({"step": step, "loss": float(recent), "lr": lr})
    finally:
        if hist_fh is not None:
            hist_fh.close()
    if out is not None:
        save_checkpoint(model, out / "model.ckpt")
    return model, history

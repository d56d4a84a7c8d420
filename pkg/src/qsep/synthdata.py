"""Parametric sound classes, dataset manifests and the out-of-domain query simulator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .embedding import QueryEmbedding, SyntheticEmbeddingSpace
from .spectral import Waveform, stft

MANIFEST_SCHEMA = 1
SEPARABILITY_BOUND = 0.9

KINDS = (
    "pure_tone",
    "harmonic_stack",
    "chirp",
    "am_noise",
    "filtered_noise",
    "click_train",
    "fm_tone",
    "beating_pair",
)

# frequency ranges in Hz, rates in Hz, chosen to tile 0-4 kHz with little overlap
DEFAULT_PARAMS = {
    "pure_tone": {"f0": [220.0, 420.0]},
    "harmonic_stack": {"f0": [90.0, 160.0], "harmonics": 8},
    "chirp": {"f_low": [500.0, 700.0], "f_high": [1500.0, 1900.0], "period": [0.4, 0.8]},
    "am_noise": {"band": [2600.0, 3800.0], "rate": [2.0, 6.0]},
    "filtered_noise": {"center": [950.0, 1250.0], "bandwidth": [200.0, 350.0]},
    "click_train": {"rate": [6.0, 14.0], "click_ms": 3.0},
    "fm_tone": {"carrier": [620.0, 820.0], "mod_rate": [3.0, 7.0], "deviation": [60.0, 140.0]},
    "beating_pair": {"f0": [2000.0, 2300.0], "beat": [3.0, 7.0]},
}


@dataclass(frozen=True)
class SoundClass:
    class_id: int
    label: str
    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi))


def _band_noise(rng, n, sr, low, high):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < low) | (freqs > high)] = 0.0
    return np.fft.irfft(spec, n=n)


def _render(cls: SoundClass, seed: int, n: int, sr: int) -> np.ndarray:
    rng = np.random.default_rng([KINDS.index(cls.kind), cls.class_id, seed])
    p = cls.params
    t = np.arange(n) / sr
    phase0 = rng.uniform(0, 2 * np.pi)
    kind = cls.kind
    if kind == "pure_tone":
        return np.sin(2 * np.pi * _uniform(rng, p["f0"]) * t + phase0)
    if kind == "harmonic_stack":
        f0 = _uniform(rng, p["f0"])
        out = np.zeros(n)
        for h in range(1, int(p["harmonics"]) + 1):
            if h * f0 >= 0.45 * sr:
                break
            out += np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h
        return out
    if kind == "chirp":
        lo, hi = _uniform(rng, p["f_low"]), _uniform(rng, p["f_high"])
        period = _uniform(rng, p["period"])
        ramp = np.mod(t / period + rng.uniform(), 1.0)
        if rng.uniform() < 0.5:
            ramp = 1.0 - ramp
        freq = lo + (hi - lo) * ramp
        return np.sin(2 * np.pi * np.cumsum(freq) / sr + phase0)
    if kind == "am_noise":
        noise = _band_noise(rng, n, sr, *p["band"])
        rate = _uniform(rng, p["rate"])
        return noise * (1.0 + 0.9 * np.sin(2 * np.pi * rate * t + phase0))
    if kind == "filtered_noise":
        center, bw = _uniform(rng, p["center"]), _uniform(rng, p["bandwidth"])
        return _band_noise(rng, n, sr, center - bw / 2, center + bw / 2)
    if kind == "click_train":
        rate = _uniform(rng, p["rate"])
        click_len = max(int(p["click_ms"] * 1e-3 * sr), 2)
        out = np.zeros(n)
        start = rng.uniform(0, 1.0 / rate)
        decay = np.exp(-np.arange(click_len) / (click_len / 4))
        for onset in np.arange(start, n / sr, 1.0 / rate):
            i = int(onset * sr)
            seg = rng.standard_normal(click_len) * decay
            end = min(i + click_len, n)
            out[i:end] += seg[: end - i]
        return out
    if kind == "fm_tone":
        fc, fm = _uniform(rng, p["carrier"]), _uniform(rng, p["mod_rate"])
        dev = _uniform(rng, p["deviation"])
        freq = fc + dev * np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi))
        return np.sin(2 * np.pi * np.cumsum(freq) / sr + phase0)
    if kind == "beating_pair":
        f0, beat = _uniform(rng, p["f0"]), _uniform(rng, p["beat"])
        return np.sin(2 * np.pi * f0 * t + phase0) + np.sin(2 * np.pi * (f0 + beat) * t)
    raise AssertionError(kind)


def generate_source(cls: SoundClass, seed: int, duration_s: float, sample_rate: int) -> Waveform:
    """Deterministic clip for ``(cls, seed)``, peak-normalised to 0.5."""
    if duration_s <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    if sample_rate <= 0:
        raise ValueError(f"sample_rate must be positive, got {sample_rate}")
    n = int(round(duration_s * sample_rate))
    if n < 1:
        raise ValueError("duration is shorter than one sample")
    x = _render(cls, seed, n, sample_rate)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = 0.5 * x / peak
    return Waveform(x, sample_rate)


def average_spectrum(
    cls: SoundClass, seeds, duration_s: float, sample_rate: int, fft_size: int = 512, hop: int = 128
) -> np.ndarray:
    spectra = [
        stft(generate_source(cls, s, duration_s, sample_rate), fft_size, hop).magnitude.mean(axis=0)
        for s in seeds
    ]
    return np.mean(spectra, axis=0)


def separability_matrix(classes, sample_rate: int, duration_s: float = 1.0, n_seeds: int = 4):
    spectra = np.stack(
        [average_spectrum(c, range(n_seeds), duration_s, sample_rate) for c in classes]
    )
    unit = spectra / np.linalg.norm(spectra, axis=1, keepdims=True)
    return unit @ unit.T


# ---------------------------------------------------------------- manifest


@dataclass
class EmbeddingSpec:
    dim: int = 64
    seed: int = 0
    modality_gap: float = 0.5
    instance_noise: float = 0.05
    normalize: bool = False


@dataclass
class DatasetManifest:
    classes: list[SoundClass]
    train_seeds: list[int]
    eval_seeds: list[int]
    seed: int
    sample_rate: int = 8000
    segment_s: float = 0.5
    clip_s: float = 1.0
    embedding: EmbeddingSpec = field(default_factory=EmbeddingSpec)

    def __post_init__(self):
        if set(self.train_seeds) & set(self.eval_seeds):
            raise ValueError("train and eval instance seeds overlap")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_by_label(self, label: str) -> SoundClass:
        for c in self.classes:
            if c.label == label:
                return c
        raise KeyError(f"unknown class label {label!r}")

    def embedding_space(self, instance_noise: float | None = None) -> SyntheticEmbeddingSpace:
        e = self.embedding
        return SyntheticEmbeddingSpace(
            self.n_classes,
            e.dim,
            e.seed,
            e.modality_gap,
            e.instance_noise if instance_noise is None else instance_noise,
            e.normalize,
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA,
            "seed": self.seed,
            "sample_rate": self.sample_rate,
            "segment_s": self.segment_s,
            "clip_s": self.clip_s,
            "classes": [asdict(c) for c in self.classes],
            "train_seeds": list(self.train_seeds),
            "eval_seeds": list(self.eval_seeds),
            "embedding": asdict(self.embedding),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        version = d.get("schema_version")
        if version != MANIFEST_SCHEMA:
            raise ValueError(f"unsupported manifest schema version {version!r}")
        return cls(
            classes=[SoundClass(**c) for c in d["classes"]],
            train_seeds=list(d["train_seeds"]),
            eval_seeds=list(d["eval_seeds"]),
            seed=d["seed"],
            sample_rate=d["sample_rate"],
            segment_s=d["segment_s"],
            clip_s=d["clip_s"],
            embedding=EmbeddingSpec(**d["embedding"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: manifest is not valid JSON ({exc})") from exc
        return cls.from_dict(data)


class CatalogAuditError(RuntimeError):
    pass


def _jittered_params(kind: str, rng) -> dict:
    """Default ranges shifted by a random factor, for catalogs beyond the base eight."""
    scale = float(rng.uniform(0.6, 1.6))
    params = json.loads(json.dumps(DEFAULT_PARAMS[kind]))
    for key in ("f0", "f_low", "f_high", "band", "center", "carrier"):
        if key in params:
            params[key] = [min(v * scale, 3900.0) for v in params[key]]
    return params


def build_catalog(
    n_classes: int = 8,
    seed: int = 0,
    n_train: int = 32,
    n_eval: int = 16,
    sample_rate: int = 8000,
    segment_s: float = 0.5,
    clip_s: float = 1.0,
    embedding: EmbeddingSpec | None = None,
    max_attempts: int = 20,
) -> DatasetManifest:
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if clip_s < segment_s:
        raise ValueError("clip_s must be at least segment_s")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        classes = []
        for cid in range(n_classes):
            kind = KINDS[cid % len(KINDS)]
            if cid < len(KINDS):
                label, params = kind, json.loads(json.dumps(DEFAULT_PARAMS[kind]))
            else:
                label, params = f"{kind}_{cid // len(KINDS) + 1}", _jittered_params(kind, rng)
            classes.append(SoundClass(cid, label, kind, params))
        sim = separability_matrix(classes, sample_rate)
        off_diag = sim[~np.eye(n_classes, dtype=bool)]
        if off_diag.max() < SEPARABILITY_BOUND:
            break
    else:
        raise CatalogAuditError(
            f"could not build {n_classes} separable classes in {max_attempts} attempts"
        )
    seeds = rng.choice(2**31 - 1, size=n_train + n_eval, replace=False)
    return DatasetManifest(
        classes=classes,
        train_seeds=sorted(int(s) for s in seeds[:n_train]),
        eval_seeds=sorted(int(s) for s in seeds[n_train:]),
        seed=seed,
        sample_rate=sample_rate,
        segment_s=segment_s,
        clip_s=clip_s,
        embedding=embedding or EmbeddingSpec(seed=seed),
    )


class SynthDataset:
    """A manifest plus its embedding space; clips are regenerated on demand."""

    def __init__(self, manifest: DatasetManifest, instance_noise: float | None = None):
        self.manifest = manifest
        self.space = manifest.embedding_space(instance_noise)
        self._clip = lru_cache(maxsize=4096)(self._make_clip)

    @property
    def n_classes(self) -> int:
        return self.manifest.n_classes

    @property
    def sample_rate(self) -> int:
        return self.manifest.sample_rate

    @property
    def segment_len(self) -> int:
        return int(round(self.manifest.segment_s * self.manifest.sample_rate))

    @property
    def clip_len(self) -> int:
        return int(round(self.manifest.clip_s * self.manifest.sample_rate))

    def split_seeds(self, split: str) -> list[int]:
        if split == "train":
            return self.manifest.train_seeds
        if split == "eval":
            return self.manifest.eval_seeds
        raise ValueError(f"unknown split {split!r}")

    def _make_clip(self, class_id: int, seed: int) -> np.ndarray:
        cls = self.manifest.classes[class_id]
        return generate_source(cls, seed, self.manifest.clip_s, self.sample_rate).samples

    def segment(self, class_id: int, seed: int, offset: int) -> Waveform:
        clip = self._clip(class_id, seed)
        return Waveform(clip[offset : offset + self.segment_len], self.sample_rate)

    def with_noise(self, instance_noise: float) -> "SynthDataset":
        return SynthDataset(self.manifest, instance_noise)


# ---------------------------------------------------------- OOD simulation


@dataclass(frozen=True)
class OodDescription:
    class_id: int
    embedding: QueryEmbedding
    magnitude: float


PARAPHRASE_SHIFT = 0.5


def simulate_ood_description(
    class_id: int,
    space: SyntheticEmbeddingSpace,
    magnitude: float,
    rng: np.random.Generator,
) -> OodDescription:
    """Stand-in for a free-form rewrite of a class label.

    The text anchor is moved by an isotropic random vector of norm
    ``magnitude`` plus a shared paraphrase shift of norm
    ``PARAPHRASE_SHIFT * magnitude`` along a direction orthogonal to all
    anchors.
    """
    if magnitude < 0:
        raise ValueError(f"magnitude must be non-negative, got {magnitude}")
    anchor = space.embed(class_id, "text")
    if magnitude == 0:
        return OodDescription(class_id, anchor, 0.0)
    direction = rng.standard_normal(space.embedding_dim)
    direction /= np.linalg.norm(direction)
    vec = (
        anchor.vector
        + magnitude * direction
        + PARAPHRASE_SHIFT * magnitude * space.paraphrase_direction
    )
    return OodDescription(class_id, QueryEmbedding(vec, "text"), float(magnitude))

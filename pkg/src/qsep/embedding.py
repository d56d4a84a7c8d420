"""Query embeddings and query algebra.

Covers modality mixing, negative queries, nearest-class retrieval against a
stored query set, and the deterministic synthetic embedding space used in
place of a frozen pretrained encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

MODALITIES = ("audio", "image", "text")
_ALL_MODALITIES = MODALITIES + ("mixed",)


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class QueryEmbedding:
    vector: np.ndarray
    modality: str = "mixed"

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise ValueError(f"embedding must be a non-empty 1-D vector, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("embedding contains non-finite components")
        if self.modality not in _ALL_MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.size

    def __eq__(self, other):
        if not isinstance(other, QueryEmbedding):
            return NotImplemented
        return self.modality == other.modality and np.array_equal(self.vector, other.vector)

    __hash__ = None


def _same_dim(*embs: QueryEmbedding) -> int:
    dims = {e.dim for e in embs}
    if len(dims) != 1:
        raise DimensionMismatch(f"embedding dimensions differ: {sorted(dims)}")
    return dims.pop()


@dataclass(frozen=True)
class MixupWeights:
    w_a: float
    w_v: float
    w_t: float

    def __post_init__(self):
        for name in ("w_a", "w_v", "w_t"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if self.total < 1e-6:
            raise ValueError("mixup weights sum to less than 1e-6")

    @property
    def total(self) -> float:
        return self.w_a + self.w_v + self.w_t

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_a, self.w_v, self.w_t)

    @classmethod
    def only(cls, modality: str) -> "MixupWeights":
        return cls(*(1.0 if m == modality else 0.0 for m in MODALITIES))


def mix_queries(
    qa: QueryEmbedding, qv: QueryEmbedding, qt: QueryEmbedding, w: MixupWeights
) -> QueryEmbedding:
    """Weighted average of the audio, image and text queries."""
    _same_dim(qa, qv, qt)
    mixed = (w.w_a * qa.vector + w.w_v * qv.vector + w.w_t * qt.vector) / w.total
    return QueryEmbedding(mixed, "mixed")


def sample_mixup_weights(rng: np.random.Generator) -> MixupWeights:
    while True:
        w = rng.uniform(0.0, 1.0, size=3)
        if w.sum() >= 1e-6:
            return MixupWeights(float(w[0]), float(w[1]), float(w[2]))


def negative_query(q: QueryEmbedding, qn: QueryEmbedding, alpha: float) -> QueryEmbedding:
    """Proportionally re-weighted removal of ``qn`` from ``q``."""
    _same_dim(q, qn)
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0:
        return q
    return QueryEmbedding((1.0 + alpha) * q.vector - alpha * qn.vector, "mixed")


def naive_negative_query(q: QueryEmbedding, qn: QueryEmbedding, alpha: float) -> QueryEmbedding:
    """Plain vector subtraction ``q - alpha * qn`` (the retrieval-style baseline)."""
    _same_dim(q, qn)
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0:
        return q
    return QueryEmbedding(q.vector - alpha * qn.vector, "mixed")


def cosine_similarity(a: QueryEmbedding, b: QueryEmbedding) -> float:
    _same_dim(a, b)
    na = np.linalg.norm(a.vector)
    nb = np.linalg.norm(b.vector)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.dot(a.vector, b.vector) / (na * nb))


def average_audio_queries(samples: Sequence[QueryEmbedding]) -> QueryEmbedding:
    if len(samples) == 0:
        raise ValueError("need at least one audio query")
    _same_dim(*samples)
    for s in samples:
        if s.modality != "audio":
            raise ValueError(f"expected audio queries, got modality {s.modality!r}")
    return QueryEmbedding(np.mean([s.vector for s in samples], axis=0), "audio")


# ---------------------------------------------------------------- query sets


@dataclass(frozen=True)
class QueryEntry:
    class_id: int
    label: str
    embedding: QueryEmbedding


class QuerySet:
    """Immutable catalogue of one query embedding per class.

    Vectors are held at float32 precision so that a save/load round trip is
    exact.
    """

    def __init__(self, entries: Iterable[QueryEntry], embedding_dim: int):
        entries = sorted(entries, key=lambda e: e.class_id)
        ids = [e.class_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate class ids in query set")
        stored = []
        for e in entries:
            if e.embedding.dim != embedding_dim:
                raise DimensionMismatch(
                    f"class {e.class_id} has dimension {e.embedding.dim}, expected {embedding_dim}"
                )
            if not 0 <= e.class_id < 2**32:
                raise ValueError(f"class id {e.class_id} does not fit in 32 bits")
            vec = e.embedding.vector.astype(np.float32).astype(np.float64)
            stored.append(QueryEntry(e.class_id, e.label, QueryEmbedding(vec, e.embedding.modality)))
        self.entries: tuple[QueryEntry, ...] = tuple(stored)
        self.embedding_dim = embedding_dim
        self._matrix = (
            np.stack([e.embedding.vector for e in stored])
            if stored
            else np.zeros((0, embedding_dim))
        )

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, QuerySet):
            return NotImplemented
        return (
            self.embedding_dim == other.embedding_dim
            and [(e.class_id, e.label) for e in self.entries]
            == [(e.class_id, e.label) for e in other.entries]
            and np.array_equal(self._matrix, other._matrix)
        )

    __hash__ = None

    def by_class(self, class_id: int) -> QueryEntry:
        for e in self.entries:
            if e.class_id == class_id:
                return e
        raise KeyError(f"class {class_id} not in query set")

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix


def query_aug(q_des: QueryEmbedding, qs: QuerySet) -> tuple[int, QueryEmbedding]:
    """Swap a free-form query for its most cosine-similar stored class query."""
    if len(qs) == 0:
        raise ValueError("query set is empty")
    if q_des.dim != qs.embedding_dim:
        raise DimensionMismatch(
            f"query has dimension {q_des.dim}, query set has {qs.embedding_dim}"
        )
    nq = np.linalg.norm(q_des.vector)
    norms = np.linalg.norm(qs.matrix, axis=1)
    if nq == 0.0 or np.any(norms == 0.0):
        raise ValueError("cosine similarity is undefined for a zero vector")
    sims = (qs.matrix @ q_des.vector) / (norms * nq)
    # entries are sorted by class id, so the first maximum is the lowest id
    best = int(np.argmax(sims))
    entry = qs.entries[best]
    return entry.class_id, entry.embedding


class EmbeddingProvider(Protocol):
    """Frozen encoder contract: identical inputs give identical vectors."""

    embedding_dim: int

    def embed(self, class_id: int, modality: str, instance_seed: int | None = None) -> QueryEmbedding:
        ...


def build_query_set(
    provider: EmbeddingProvider, classes: Sequence[tuple[int, str]], modality: str = "text"
) -> QuerySet:
    """One anchor embedding per ``(class_id, label)`` pair."""
    ids = [c for c, _ in classes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate class ids")
    entries = [QueryEntry(c, label, provider.embed(c, modality)) for c, label in classes]
    return QuerySet(entries, provider.embedding_dim)


_QSET_MAGIC = b"QSEPQSET"
_QSET_VERSION = 1


class QuerySetFormatError(ValueError):
    pass


def save_query_set(qs: QuerySet, path: str | Path) -> None:
    parts = [_QSET_MAGIC, struct.pack("<III", _QSET_VERSION, qs.embedding_dim, len(qs))]
    for e in qs.entries:
        label = e.label.encode("utf-8")
        parts.append(struct.pack("<II", e.class_id, len(label)))
        parts.append(label)
        parts.append(e.embedding.vector.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_query_set(path: str | Path, modality: str = "text") -> QuerySet:
    data = Path(path).read_bytes()
    if data[: len(_QSET_MAGIC)] != _QSET_MAGIC:
        raise QuerySetFormatError(f"{path}: not a query-set file (bad magic)")
    pos = len(_QSET_MAGIC)
    try:
        version, dim, count = struct.unpack_from("<III", data, pos)
        pos += 12
        if version != _QSET_VERSION:
            raise QuerySetFormatError(f"{path}: unsupported query-set version {version}")
        entries = []
        for _ in range(count):
            class_id, n = struct.unpack_from("<II", data, pos)
            pos += 8
            label = data[pos : pos + n].decode("utf-8")
            if len(data) < pos + n + 4 * dim:
                raise QuerySetFormatError(f"{path}: truncated entry for class {class_id}")
            pos += n
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float64)
            pos += 4 * dim
            entries.append(QueryEntry(class_id, label, QueryEmbedding(vec, modality)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise QuerySetFormatError(f"{path}: corrupt query-set file ({exc})") from exc
    if pos != len(data):
        raise QuerySetFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return QuerySet(entries, dim)


# ------------------------------------------------------- synthetic provider


class SyntheticEmbeddingSpace:
    """Clustered multi-modal embedding space.

    Each class owns a unit anchor direction; every modality adds a fixed
    offset of norm ``modality_gap``; instance-level queries add isotropic
    noise whose expected norm is ``instance_noise``. Class anchors, modality
    offsets and the paraphrase direction are mutually orthonormal.
    """

    def __init__(
        self,
        n_classes: int,
        embedding_dim: int = 64,
        seed: int = 0,
        modality_gap: float = 0.5,
        instance_noise: float = 0.05,
        normalize: bool = False,
    ):
        if n_classes + len(MODALITIES) + 1 > embedding_dim:
            raise ValueError(
                f"embedding_dim={embedding_dim} too small for {n_classes} classes"
            )
        self.n_classes = n_classes
        self.embedding_dim = embedding_dim
        self.seed = seed
        self.modality_gap = modality_gap
        self.instance_noise = instance_noise
        self.normalize = normalize
        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.standard_normal((embedding_dim, n_classes + 4)))
        basis = basis.T.copy()
        basis.flags.writeable = False
        self._anchors = basis[:n_classes]
        self._offsets = {m: modality_gap * basis[n_classes + i] for i, m in enumerate(MODALITIES)}
        self.paraphrase_direction = basis[n_classes + 3]

    def with_noise(self, instance_noise: float) -> "SyntheticEmbeddingSpace":
        return SyntheticEmbeddingSpace(
            self.n_classes,
            self.embedding_dim,
            self.seed,
            self.modality_gap,
            instance_noise,
            self.normalize,
        )

    def _check_class(self, class_id: int) -> None:
        if not 0 <= class_id < self.n_classes:
            raise KeyError(f"unknown class id {class_id}")

    def anchor(self, class_id: int, modality: str) -> np.ndarray:
        self._check_class(class_id)
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        return self._anchors[class_id] + self._offsets[modality]

    def embed(self, class_id: int, modality: str, instance_seed: int | None = None) -> QueryEmbedding:
        vec = self.anchor(class_id, modality)
        if instance_seed is not None and self.instance_noise > 0:
            rng = np.random.default_rng(
                [self.seed, class_id, MODALITIES.index(modality), int(instance_seed)]
            )
            noise = rng.standard_normal(self.embedding_dim)
            vec = vec + self.instance_noise * noise / np.sqrt(self.embedding_dim)
        if self.normalize:
            vec = vec / np.linalg.norm(vec)
        return QueryEmbedding(vec, modality)

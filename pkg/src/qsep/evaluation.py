"""SDR metrics, report aggregation and the separation experiment harness."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import EvalConfig, SpectralConfig
from .embedding import (
    MODALITIES,
    MixupWeights,
    QueryEmbedding,
    QuerySet,
    average_audio_queries,
    build_query_set,
    mix_queries,
    naive_negative_query,
    negative_query,
    query_aug,
)
from .sepnet import SeparationModel, forward
from .spectral import Mask, Spectrogram, Waveform, apply_mask, istft
from .synthdata import SynthDataset, simulate_ood_description
from .training import TrainingExample, sample_mixture

SDR_CAP = 60.0
TASKS = ("TQSS", "IQSS", "AQSS", "composed")
TASK_MODALITY = {"TQSS": "text", "IQSS": "image", "AQSS": "audio"}


def sdr(reference: Waveform, estimate: Waveform) -> float:
    """Plain signal-to-distortion ratio in dB, capped to +/-60 dB.

    No projection filter and no permutation search: every estimate is tied to
    a known reference by its query. The estimate is never rescaled.
    """
    ref = reference.samples
    est = estimate.samples
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: reference {ref.size}, estimate {est.size}")
    signal = float(np.dot(ref, ref))
    if signal == 0.0:
        raise ValueError("reference is silent")
    err = ref - est
    noise = float(np.dot(err, err))
    if noise == 0.0:
        return SDR_CAP
    return float(np.clip(10.0 * np.log10(signal / noise), -SDR_CAP, SDR_CAP))


def bootstrap_stats(values: Sequence[float], n_resamples: int = 1000, seed: int = 0):
    """Mean, bootstrap standard deviation of the mean, and median."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to summarise")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(n_resamples, v.size))
    means = v[idx].mean(axis=1)
    return float(v.mean()), float(means.std()), float(np.median(v))


# ------------------------------------------------------------------ records


@dataclass(frozen=True)
class SdrRecord:
    sample_id: str
    task: str
    target_class: int
    interferer_class: int
    sdr: float
    sdr_mixture: float
    sdr_improvement: float
    alpha: float = 0.0
    nq_method: str = "proportional"
    query_aug: bool = False
    retrieved_class: int | None = None
    ood_magnitude: float | None = None

    def __post_init__(self):
        if not -SDR_CAP <= self.sdr <= SDR_CAP:
            raise ValueError(f"sdr {self.sdr} outside the +/-{SDR_CAP} dB cap")


@dataclass
class TaskSummary:
    n: int
    mean_sdr: float
    std_sdr: float
    median_sdr: float
    mean_sdri: float
    median_sdri: float
    sample_std_sdr: float


def summarize(records: Sequence[SdrRecord], n_resamples: int = 1000, seed: int = 0) -> TaskSummary:
    sdrs = [r.sdr for r in records]
    mean, std, median = bootstrap_stats(sdrs, n_resamples, seed)
    imp = np.array([r.sdr_improvement for r in records])
    return TaskSummary(
        n=len(sdrs),
        mean_sdr=mean,
        std_sdr=std,
        median_sdr=median,
        mean_sdri=float(imp.mean()),
        median_sdri=float(np.median(imp)),
        sample_std_sdr=float(np.std(sdrs)),
    )


@dataclass
class ExperimentReport:
    records: list[SdrRecord]
    config: dict = field(default_factory=dict)
    n_resamples: int = 1000
    seed: int = 0

    def tasks(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.task not in seen:
                seen.append(r.task)
        return seen

    def summary(self) -> dict[str, TaskSummary]:
        return {
            task: summarize([r for r in self.records if r.task == task], self.n_resamples, self.seed)
            for task in self.tasks()
        }

    def table(self) -> str:
        lines = [
            f"{'task':<10} {'n':>5} {'Mean SDR':>16} {'Med SDR':>8} {'Mean SDRi':>10} {'Med SDRi':>9}"
        ]
        for task, s in self.summary().items():
            lines.append(
                f"{task:<10} {s.n:>5} {s.mean_sdr:>8.2f} ± {s.std_sdr:<5.2f} {s.median_sdr:>8.2f} "
                f"{s.mean_sdri:>10.2f} {s.median_sdri:>9.2f}"
            )
        return "\n".join(lines)

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{stem}_records.jsonl", "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        summary = {task: asdict(s) for task, s in self.summary().items()}
        payload = {"config": self.config, "summary": summary, "n_resamples": self.n_resamples, "seed": self.seed}
        (out / f"{stem}_summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        (out / f"{stem}_summary.txt").write_text(self.table() + "\n")

    @classmethod
    def load(cls, out_dir: str | Path, stem: str = "report") -> "ExperimentReport":
        out = Path(out_dir)
        records = [
            SdrRecord(**json.loads(line))
            for line in (out / f"{stem}_records.jsonl").read_text().splitlines()
            if line.strip()
        ]
        payload = json.loads((out / f"{stem}_summary.json").read_text())
        return cls(records, payload["config"], payload["n_resamples"], payload["seed"])


# ------------------------------------------------------------------ harness


class QueryBuilder:
    """Builds task queries for eval mixtures from a dataset's embedding space.

    ``query_noise`` swaps in instance-level embeddings of that noise level for
    every modality, text included.
    """

    def __init__(self, dataset: SynthDataset, config: EvalConfig, query_noise: float | None = None):
        self.dataset = dataset
        self.config = config
        self.space = dataset.space if query_noise is None else dataset.space.with_noise(query_noise)
        self.noisy_text = query_noise is not None
        weights = config.composed_weights
        self.composed_weights = MixupWeights(*weights)
        self._audio_cache: dict[int, QueryEmbedding] = {}
        self._sets: dict[str, QuerySet] = {}

    def audio_query(self, class_id: int) -> QueryEmbedding:
        """Mean of S train-split audio embeddings for the class."""
        if class_id not in self._audio_cache:
            seeds = self.dataset.split_seeds("train")[: self.config.audio_queries]
            self._audio_cache[class_id] = average_audio_queries(
                [self.space.embed(class_id, "audio", s) for s in seeds]
            )
        return self._audio_cache[class_id]

    def query(self, task: str, class_id: int, instance_seed: int) -> QueryEmbedding:
        text_seed = instance_seed if self.noisy_text else None
        if task == "TQSS":
            return self.space.embed(class_id, "text", text_seed)
        if task == "IQSS":
            return self.space.embed(class_id, "image", instance_seed)
        if task == "AQSS":
            return self.audio_query(class_id)
        if task == "composed":
            return mix_queries(
                self.audio_query(class_id),
                self.space.embed(class_id, "image", instance_seed),
                self.space.embed(class_id, "text", text_seed),
                self.composed_weights,
            )
        raise ValueError(f"unknown task {task!r}")

    def anchor(self, task: str, class_id: int) -> QueryEmbedding:
        """Noise-free class anchor in the task's modality (negative queries, query sets)."""
        if task in TASK_MODALITY:
            return self.dataset.space.embed(class_id, TASK_MODALITY[task])
        if task == "composed":
            a, v, t = (self.dataset.space.embed(class_id, m) for m in MODALITIES)
            return mix_queries(a, v, t, self.composed_weights)
        raise ValueError(f"unknown task {task!r}")

    def query_set(self, task: str) -> QuerySet:
        if task not in self._sets:
            if task in TASK_MODALITY:
                classes = [(c.class_id, c.label) for c in self.dataset.manifest.classes]
                self._sets[task] = build_query_set(self.dataset.space, classes, TASK_MODALITY[task])
            else:
                from .embedding import QueryEntry

                entries = [
                    QueryEntry(c.class_id, c.label, self.anchor(task, c.class_id))
                    for c in self.dataset.manifest.classes
                ]
                self._sets[task] = QuerySet(entries, self.dataset.space.embedding_dim)
        return self._sets[task]


def eval_mixtures(
    dataset: SynthDataset, n_eval: int, seed: int, spectral: SpectralConfig, n_sources: int = 2
) -> list[TrainingExample]:
    """The fixed eval-split mixture set for a seed (identical across tasks and alphas)."""
    rng = np.random.default_rng(seed)
    return [sample_mixture(dataset, n_sources, rng, "eval", spectral) for _ in range(n_eval)]


def separate(model: SeparationModel, mixture: Spectrogram, n_samples: int, query) -> tuple[Waveform, Mask]:
    mask = forward(model, mixture.magnitude, query).final_mask().astype(np.float64)
    est = istft(apply_mask(mixture, Mask(mask, "soft")), n_samples)
    return est, Mask(mask, "soft")


def run_task(
    model: SeparationModel,
    dataset: SynthDataset,
    task: str,
    n_eval: int = 100,
    alpha: float = 0.0,
    negative_source: bool = True,
    use_query_aug: bool = False,
    nq_method: str = "proportional",
    ood_magnitude: float | None = None,
    query_noise: float | None = None,
    config: EvalConfig | None = None,
    spectral: SpectralConfig | None = None,
    mixtures: list[TrainingExample] | None = None,
    batch_size: int = 16,
    allow_untrained: bool = False,
) -> ExperimentReport:
    """Evaluate one query task over ``n_eval`` two-source eval mixtures.

    Each source of each mixture is a target once, giving ``2 * n_eval``
    records. Query-Aug (if enabled) replaces the raw query first; the
    negative query is then applied with the interferer's class anchor.
    ``ood_magnitude`` (TQSS only) replaces the text query by a simulated
    free-form description.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if model.trained_steps == 0 and not allow_untrained:
        raise ValueError("model is untrained (0 training steps recorded)")
    if nq_method not in ("proportional", "naive"):
        raise ValueError(f"unknown negative-query method {nq_method!r}")
    if ood_magnitude is not None and task != "TQSS":
        raise ValueError("out-of-domain descriptions are only defined for TQSS")
    config = config or EvalConfig()
    spectral = spectral or SpectralConfig()
    if mixtures is None:
        mixtures = eval_mixtures(dataset, n_eval, config.seed, spectral)
    builder = QueryBuilder(dataset, config, query_noise)
    nq = negative_query if nq_method == "proportional" else naive_negative_query
    ood_rng = np.random.default_rng([config.seed, 7])

    jobs = []
    for mi, ex in enumerate(mixtures):
        for ti in range(ex.n_sources):
            target = ex.class_ids[ti]
            others = [c for j, c in enumerate(ex.class_ids) if j != ti]
            q = builder.query(task, target, ex.instance_seeds[ti])
            if ood_magnitude is not None:
                q = simulate_ood_description(target, builder.space, ood_magnitude, ood_rng).embedding
            retrieved = None
            if use_query_aug:
                retrieved, q = query_aug(q, builder.query_set(task))
            if negative_source and alpha > 0:
                q = nq(q, builder.anchor(task, others[0]), alpha)
            jobs.append((mi, ti, others[0], q, retrieved))

    records = []
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start : start + batch_size]
        X = np.stack([mixtures[mi].mixture.magnitude for mi, *_ in chunk])
        Q = np.stack([job[3].vector for job in chunk])
        masks = forward(model, X, Q).final_mask().astype(np.float64)
        for (mi, ti, interferer, _, retrieved), mask in zip(chunk, masks):
            ex = mixtures[mi]
            n = len(ex.mixture_wave)
            est = istft(apply_mask(ex.mixture, Mask(mask, "soft")), n)
            ref = ex.sources[ti]
            value = sdr(ref, est)
            base = sdr(ref, ex.mixture_wave)
            records.append(
                SdrRecord(
                    sample_id=f"{mi}:{ti}",
                    task=task,
                    target_class=ex.class_ids[ti],
                    interferer_class=interferer,
                    sdr=value,
                    sdr_mixture=base,
                    sdr_improvement=value - base,
                    alpha=float(alpha) if negative_source else 0.0,
                    nq_method=nq_method,
                    query_aug=use_query_aug,
                    retrieved_class=retrieved,
                    ood_magnitude=ood_magnitude,
                )
            )
    snapshot = {
        "task": task,
        "n_eval": len(mixtures),
        "alpha": alpha,
        "nq_method": nq_method,
        "query_aug": use_query_aug,
        "ood_magnitude": ood_magnitude,
        "query_noise": query_noise,
        "seed": config.seed,
    }
    return ExperimentReport(records, snapshot, config.bootstrap_resamples, config.seed)


def run_tasks(model, dataset, tasks=TASKS, **kwargs) -> ExperimentReport:
    """Several tasks over one shared mixture set, merged into one report."""
    config = kwargs.get("config") or EvalConfig()
    spectral = kwargs.get("spectral") or SpectralConfig()
    n_eval = kwargs.pop("n_eval", config.n_eval)
    if kwargs.get("mixtures") is None:
        kwargs["mixtures"] = eval_mixtures(dataset, n_eval, config.seed, spectral)
    records = []
    snapshot = {}
    for task in tasks:
        rep = run_task(model, dataset, task, n_eval=n_eval, **kwargs)
        records.extend(rep.records)
        snapshot = dict(rep.config, task=list(tasks))
    return ExperimentReport(records, snapshot, config.bootstrap_resamples, config.seed)


# ------------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    alpha: float
    method: str
    mean_sdr: float
    std_sdr: float
    median_sdr: float
    sample_std_sdr: float


def nq_sweep(
    model,
    dataset,
    task: str = "TQSS",
    alpha_grid: Sequence[float] = (0.0, 0.25, 0.5, 1.0, 2.0),
    methods: Sequence[str] = ("proportional", "naive"),
    plot_path: str | Path | None = None,
    **kwargs,
) -> list[SweepRow]:
    """Mean SDR per (alpha, method) on one shared mixture set."""
    if len(alpha_grid) == 0:
        raise ValueError("alpha grid is empty")
    config = kwargs.get("config") or EvalConfig()
    spectral = kwargs.get("spectral") or SpectralConfig()
    n_eval = kwargs.pop("n_eval", config.n_eval)
    if kwargs.get("mixtures") is None:
        kwargs["mixtures"] = eval_mixtures(dataset, n_eval, config.seed, spectral)
    rows = []
    for alpha in alpha_grid:
        for method in methods:
            rep = run_task(model, dataset, task, n_eval=n_eval, alpha=alpha, nq_method=method, **kwargs)
            s = rep.summary()[task]
            rows.append(SweepRow(float(alpha), method, s.mean_sdr, s.std_sdr, s.median_sdr, s.sample_std_sdr))
    if plot_path is not None:
        series = {
            m: [r.mean_sdr for r in rows if r.method == m] for m in methods
        }
        write_line_plot(plot_path, list(alpha_grid), series)
    return rows


def sweep_range(rows: Sequence[SweepRow], method: str) -> float:
    means = [r.mean_sdr for r in rows if r.method == method]
    return max(means) - min(means)


def sweep_table(rows: Sequence[SweepRow]) -> str:
    lines = [f"{'alpha':>6} {'method':<13} {'Mean SDR':>16} {'Med SDR':>8}"]
    for r in rows:
        lines.append(f"{r.alpha:>6.2f} {r.method:<13} {r.mean_sdr:>8.2f} ± {r.std_sdr:<5.2f} {r.median_sdr:>8.2f}")
    return "\n".join(lines)


@dataclass
class AugRow:
    name: str
    mean_sdr: float
    std_sdr: float
    median_sdr: float
    retrieval_accuracy: float | None = None


def query_aug_comparison(
    model, dataset, ood_magnitude: float = 0.3, **kwargs
) -> list[AugRow]:
    """In-domain vs out-of-domain text queries, each with and without Query-Aug."""
    config = kwargs.get("config") or EvalConfig()
    spectral = kwargs.get("spectral") or SpectralConfig()
    n_eval = kwargs.pop("n_eval", config.n_eval)
    if kwargs.get("mixtures") is None:
        kwargs["mixtures"] = eval_mixtures(dataset, n_eval, config.seed, spectral)
    settings = [
        ("in-domain", None, False),
        ("in-domain + Query-Aug", None, True),
        ("out-of-domain", ood_magnitude, False),
        ("out-of-domain + Query-Aug", ood_magnitude, True),
    ]
    rows = []
    for name, magnitude, aug in settings:
        rep = run_task(model, dataset, "TQSS", n_eval=n_eval, use_query_aug=aug, ood_magnitude=magnitude, **kwargs)
        s = rep.summary()["TQSS"]
        acc = None
        if aug:
            acc = float(np.mean([r.retrieved_class == r.target_class for r in rep.records]))
        rows.append(AugRow(name, s.mean_sdr, s.std_sdr, s.median_sdr, acc))
    return rows


def aug_table(rows: Sequence[AugRow]) -> str:
    lines = [f"{'query':<28} {'Mean SDR':>16} {'Med SDR':>8} {'retrieval':>10}"]
    for r in rows:
        acc = "" if r.retrieval_accuracy is None else f"{100 * r.retrieval_accuracy:.1f}%"
        lines.append(f"{r.name:<28} {r.mean_sdr:>8.2f} ± {r.std_sdr:<5.2f} {r.median_sdr:>8.2f} {acc:>10}")
    return "\n".join(lines)


def retrieval_accuracy(dataset: SynthDataset, magnitude: float, trials: int = 1000, seed: int = 0) -> float:
    """Monte-Carlo rate at which Query-Aug recovers the true class of a perturbed text anchor."""
    rng = np.random.default_rng(seed)
    classes = [(c.class_id, c.label) for c in dataset.manifest.classes]
    qs = build_query_set(dataset.space, classes, "text")
    hits = 0
    for _ in range(trials):
        c = int(rng.integers(dataset.n_classes))
        desc = simulate_ood_description(c, dataset.space, magnitude, rng)
        hits += query_aug(desc.embedding, qs)[0] == c
    return hits / trials


# -------------------------------------------------------------------- images


def _write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = data.split(b"\n", 3)
    if header[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in header[1].split())
    return np.frombuffer(header[3], dtype=np.uint8).reshape(h, w)


def render_spectrogram(s: Spectrogram | np.ndarray, path: str | Path) -> None:
    """Grayscale log-magnitude image, one column per frame, DC on the bottom row."""
    mag = s.magnitude if isinstance(s, Spectrogram) else np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(mag)):
        raise ValueError("spectrogram has non-finite magnitudes")
    logmag = np.log1p(np.abs(mag))
    peak = logmag.max()
    scaled = np.zeros_like(logmag) if peak == 0 else 255.0 * logmag / peak
    image = np.round(scaled.T[::-1]).astype(np.uint8)
    _write_pgm(path, image)


def write_line_plot(
    path: str | Path, xs: Sequence[float], series: dict[str, Sequence[float]], size=(320, 200)
) -> None:
    """Minimal line chart as PGM: first series solid, later ones dashed."""
    width, height = size
    img = np.full((height, width), 255, dtype=np.uint8)
    margin = 20
    ys_all = np.concatenate([np.asarray(v, dtype=float) for v in series.values()])
    lo, hi = float(ys_all.min()), float(ys_all.max())
    if hi - lo < 1e-9:
        lo, hi = lo - 1.0, hi + 1.0
    x_lo, x_hi = min(xs), max(xs)
    if x_hi - x_lo < 1e-12:
        x_hi = x_lo + 1.0

    def to_px(x, y):
        px = margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)
        py = height - margin - (y - lo) / (hi - lo) * (height - 2 * margin)
        return px, py

    img[height - margin, margin : width - margin] = 0
    img[margin : height - margin, margin] = 0
    for idx, ys in enumerate(series.values()):
        pts = [to_px(x, y) for x, y in zip(xs, ys)]
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
            for s in range(n):
                if idx > 0 and (s // 4) % 2 == 1:
                    continue
                f = s / max(n - 1, 1)
                x = int(round(x0 + f * (x1 - x0)))
                y = int(round(y0 + f * (y1 - y0)))
                img[max(y - 1, 0) : y + 1, max(x - 1, 0) : x + 1] = 60 * idx
    _write_pgm(path, img)

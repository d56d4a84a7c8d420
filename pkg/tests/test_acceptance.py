"""Acceptance criteria 1-9.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts. Criteria 4-8 share two desk-scale training runs with the
default config: a Query-Mixup model and a text-only model with the same
seeds and step budget.
"""

import time

import numpy as np
import pytest

from qsep import evaluation as ev
from qsep.cli import main
from qsep.config import Config, EvalConfig
from qsep.embedding import (
    MixupWeights,
    QueryEmbedding,
    SyntheticEmbeddingSpace,
    build_query_set,
    mix_queries,
    negative_query,
    query_aug,
)
from qsep.sepnet import SepNetHyper, init_model
from qsep.spectral import Waveform, frame_layout, hann_window, ideal_binary_masks, istft, stft
from qsep.synthdata import SynthDataset, build_catalog
from qsep.training import batch_loss_and_grad, train

TRAIN_BUDGET_S = 20 * 60
MAX_STEPS = 5000


def verdict(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    log.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------ shared models


@pytest.fixture(scope="module")
def dataset():
    d = Config().data
    return SynthDataset(build_catalog(d.n_classes, d.seed, d.n_train, d.n_eval))


def _train(dataset, tmp_path_factory, tag, **overrides):
    cfg = Config()
    for key, value in overrides.items():
        setattr(cfg.train, key, value)
    hyper = SepNetHyper(cfg.model.depth, cfg.model.k, cfg.data.embedding_dim)
    start = time.perf_counter()
    model, _ = train(dataset, cfg.train, hyper, cfg.spectral, out_dir=tmp_path_factory.mktemp(tag))
    return model, time.perf_counter() - start, cfg.train.total_steps


@pytest.fixture(scope="module")
def mixup_run(dataset, tmp_path_factory):
    return _train(dataset, tmp_path_factory, "mixup")


@pytest.fixture(scope="module")
def text_run(dataset, tmp_path_factory):
    return _train(dataset, tmp_path_factory, "text", mixup_enabled=False, modality_subset=["text"])


@pytest.fixture(scope="module")
def mixup_report(mixup_run, dataset):
    return ev.run_tasks(mixup_run[0], dataset, n_eval=EvalConfig().n_eval).summary()


# ---------------------------------------------------------------- criteria


def test_criterion_1_formula_identities(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        a, v, t = (QueryEmbedding(rng.standard_normal(64), "mixed") for _ in range(3))
        wts = rng.uniform(0.05, 1, 3)
        c = rng.uniform(0.05, 1.0 / wts.max())
        base = mix_queries(a, v, t, MixupWeights(*wts)).vector
        scaled = mix_queries(a, v, t, MixupWeights(*(c * wts))).vector
        worst = max(worst, np.max(np.abs(base - scaled)))
        q, n = a, v
        worst = max(worst, np.max(np.abs(negative_query(q, n, 0.0).vector - q.vector)))
        a1, a2 = rng.uniform(0, 3, 2)
        d = negative_query(q, n, a2).vector - negative_query(q, n, a1).vector
        worst = max(worst, np.max(np.abs(d - (a2 - a1) * (q.vector - n.vector))))
    space = SyntheticEmbeddingSpace(8, 64, seed=0)
    qs = build_query_set(space, [(c, str(c)) for c in range(8)], "text")
    self_retrieval = all(query_aug(e.embedding, qs)[0] == e.class_id for e in qs.entries)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and self_retrieval and elapsed < 1.0
    verdict(
        acceptance_log, 1, ok, f"max identity error {worst:.1e}, self-retrieval {self_retrieval}, {elapsed:.2f}s"
    )


def test_criterion_2_gradient_check(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    model = init_model(SepNetHyper(depth=2, k=2, embedding_dim=8), seed=1, dtype=np.float64)
    X = rng.uniform(0, 3, (2, 8, 8))
    M = np.zeros((2, 2, 8, 8))
    dom = rng.integers(0, 2, (2, 8, 8))
    M[0], M[1] = dom == 0, dom == 1
    Q = rng.standard_normal((2, 2, 8))
    _, grads = batch_loss_and_grad(model, X, M, Q)
    # step near the cube root of machine epsilon: smaller steps let round-off in the
    # O(1) loss swamp the ~1e-7 gradients of some deep weights
    h = 1e-5
    worst = 0.0
    for name, p in model.params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = batch_loss_and_grad(model, X, M, Q)[0]
            p[idx] = old - h
            down = batch_loss_and_grad(model, X, M, Q)[0]
            p[idx] = old
            fd = (up - down) / (2 * h)
            an = grads[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 30
    verdict(acceptance_log, 2, ok, f"max relative error {worst:.1e} over all parameters, {elapsed:.1f}s")


def test_criterion_3_spectral_fidelity(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 8000)
    round_trip = 0.0
    for n_fft, hop in [(512, 128), (1024, 256), (256, 64)]:
        y = istft(stft(Waveform(x, 8000), n_fft, hop), x.size).samples
        round_trip = max(round_trip, np.linalg.norm(y - x) / np.linalg.norm(x))
    specs = [stft(Waveform(rng.standard_normal(4000), 8000), 512, 128) for _ in range(3)]
    partition = bool(np.all(sum(m.values for m in ideal_binary_masks(specs)) == 1))
    n_fft, hop = 64, 16
    sig = rng.standard_normal(200)
    s = stft(Waveform(sig, 8000), n_fft, hop)
    n_frames, pad_left, pad_right = frame_layout(sig.size, hop, n_fft)
    padded = np.concatenate([np.zeros(pad_left), sig, np.zeros(pad_right)])
    k = np.arange(n_fft // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(n_fft) / n_fft)
    dft_err = 0.0
    for t in range(n_frames):
        oracle = basis @ (padded[t * hop : t * hop + n_fft] * hann_window(n_fft))
        dft_err = max(dft_err, np.max(np.abs(s.complex_bins[t] - oracle)) / np.max(np.abs(oracle)))
    elapsed = time.perf_counter() - start
    ok = round_trip < 1e-6 and partition and dft_err < 1e-6 and elapsed < 10
    verdict(
        acceptance_log,
        3,
        ok,
        f"round trip {round_trip:.1e}, partition {partition}, naive DFT {dft_err:.1e}, {elapsed:.2f}s",
    )


def test_criterion_4_separation_works(acceptance_log, mixup_run, mixup_report):
    _, elapsed, steps = mixup_run
    medians = {t: mixup_report[t].median_sdri for t in ("TQSS", "IQSS", "AQSS")}
    counts = {mixup_report[t].n for t in medians}
    ok = all(v >= 3.0 for v in medians.values()) and steps <= MAX_STEPS and elapsed <= TRAIN_BUDGET_S
    ok = ok and min(counts) >= 2 * 100
    detail = ", ".join(f"{t} median SDRi {v:.2f} dB" for t, v in medians.items())
    verdict(acceptance_log, 4, ok, f"{detail}; {steps} steps in {elapsed / 60:.1f} min")


def test_criterion_5_query_mixup(acceptance_log, mixup_report, text_run, dataset):
    text = ev.run_tasks(text_run[0], dataset, ("TQSS", "IQSS"), n_eval=EvalConfig().n_eval).summary()
    mix_avg = (mixup_report["TQSS"].mean_sdr + mixup_report["IQSS"].mean_sdr) / 2
    text_avg = (text["TQSS"].mean_sdr + text["IQSS"].mean_sdr) / 2
    tqss_gap = abs(mixup_report["TQSS"].mean_sdr - text["TQSS"].mean_sdr)
    ok = mix_avg >= text_avg + 0.3 and tqss_gap <= 1.0
    verdict(
        acceptance_log,
        5,
        ok,
        f"TQSS+IQSS average {mix_avg:.2f} (mixup) vs {text_avg:.2f} (text-only); TQSS gap {tqss_gap:.2f} dB",
    )


def test_criterion_6_composed_queries(acceptance_log, mixup_run, dataset):
    summary = ev.run_tasks(mixup_run[0], dataset, n_eval=EvalConfig().n_eval, query_noise=0.2).summary()
    best_single = max(summary[t].mean_sdr for t in ("TQSS", "IQSS", "AQSS"))
    composed = summary["composed"].mean_sdr
    ok = composed >= best_single - 0.2
    verdict(acceptance_log, 6, ok, f"composed {composed:.2f} dB vs best single modality {best_single:.2f} dB")


def test_criterion_7_negative_query(acceptance_log, mixup_run, dataset):
    rows = ev.nq_sweep(mixup_run[0], dataset, "TQSS", EvalConfig().alpha_grid, n_eval=EvalConfig().n_eval)
    prop = {r.alpha: r.mean_sdr for r in rows if r.method == "proportional"}
    r_prop, r_naive = ev.sweep_range(rows, "proportional"), ev.sweep_range(rows, "naive")
    gain = prop[0.5] - prop[0.0]
    ok = gain >= 0.2 and r_prop < r_naive
    verdict(
        acceptance_log,
        7,
        ok,
        f"alpha=0.5 gain {gain:.2f} dB; range proportional {r_prop:.3f} vs naive {r_naive:.3f} dB",
    )


def test_criterion_8_query_aug(acceptance_log, mixup_run, dataset):
    magnitude = EvalConfig().ood_magnitude
    rows = {r.name: r for r in ev.query_aug_comparison(mixup_run[0], dataset, magnitude, n_eval=EvalConfig().n_eval)}
    raw_in = rows["in-domain"].mean_sdr
    ood = rows["out-of-domain"].mean_sdr
    ood_aug = rows["out-of-domain + Query-Aug"].mean_sdr
    accuracy = ev.retrieval_accuracy(dataset, magnitude, trials=1000)
    ok = ood_aug >= ood + 0.5 and abs(ood_aug - raw_in) <= 0.5 and accuracy >= 0.95
    verdict(
        acceptance_log,
        8,
        ok,
        f"magnitude {magnitude}: OOD {ood:.2f}, OOD+Query-Aug {ood_aug:.2f}, in-domain {raw_in:.2f} dB; "
        f"retrieval {100 * accuracy:.1f}%",
    )


def test_criterion_9_cli_determinism(acceptance_log, tmp_path):
    tiny = ["--set", "model.depth=3", "--set", "model.k=4", "--set", "train.total_steps=6", "--set", "train.batch_size=2"]

    def run(root):
        data, model = root / "data", root / "model"
        codes = [
            main(["dataset", "build", "--seed", "3", "--n-mixtures", "1", "--out", str(data)]),
            main(["train", "--manifest", str(data / "manifest.json"), "--seed", "5", "--out", str(model), *tiny]),
        ]
        common = ["--manifest", str(data / "manifest.json"), "--checkpoint", str(model / "model.ckpt"), "--seed", "7"]
        codes.append(main(["eval", *common, "--n-eval", "3", "--out", str(root / "eval")]))
        codes.append(main(["sweep", "nq", *common, "--n-eval", "2", "--out", str(root / "sweep")]))
        codes.append(main(["sweep", "ood", *common, "--n-eval", "2", "--out", str(root / "sweep")]))
        codes.append(
            main(["separate", str(data / "mixtures" / "mix000.wav"), *common, "--query", "text:chirp", "--out", str(root / "sep")])
        )
        assert codes == [0] * len(codes)
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    differing = [str(k) for k in a if a[k] != b.get(k)]
    ok = set(a) == set(b) and not differing and len(a) > 10
    verdict(acceptance_log, 9, ok, f"{len(a)} output files compared, {len(differing)} differ")

"""Command-line entry point: ``qsep <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad flags, bad config keys, bad query
specs), 2 runtime failure (missing or corrupt files, incompatible
checkpoints, numerical errors). Errors are printed as one line on stderr,
never as a traceback.

The default output directory is ``$QSEP_OUTPUT_DIR`` (falling back to
``./qsep_out``); ``--out`` overrides it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import Config, ConfigError, load_config
from .embedding import (
    MODALITIES,
    MixupWeights,
    QueryEmbedding,
    QuerySetFormatError,
    build_query_set,
    load_query_set,
    mix_queries,
    naive_negative_query,
    negative_query,
    query_aug,
    save_query_set,
)
from .sepnet import CheckpointError, SepNetHyper, forward, load_checkpoint
from .spectral import Mask, apply_mask, istft, stft
from .synthdata import CatalogAuditError, DatasetManifest, SynthDataset, build_catalog, simulate_ood_description
from .training import sample_mixture, train
from .wavio import WavFormatError, read_wav, write_wav

log = logging.getLogger("qsep")

OUTPUT_ENV = "QSEP_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
TASK_CHOICES = ("TQSS", "IQSS", "AQSS", "composed", "all")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports usage errors with exit status 2; we want 1 and no exit."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------- config glue


def _config(args) -> Config:
    cfg = load_config(args.config, args.overrides)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "qsep_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_manifest(cfg: Config) -> DatasetManifest:
    from .synthdata import EmbeddingSpec

    d = cfg.data
    return build_catalog(
        n_classes=d.n_classes,
        seed=d.seed,
        n_train=d.n_train,
        n_eval=d.n_eval,
        sample_rate=d.sample_rate,
        segment_s=d.segment_s,
        clip_s=d.clip_s,
        embedding=EmbeddingSpec(d.embedding_dim, d.seed, d.modality_gap, d.instance_noise, d.normalize_embeddings),
    )


def _dataset(args, cfg: Config) -> SynthDataset:
    if args.manifest is None:
        return SynthDataset(_build_manifest(cfg))
    try:
        return SynthDataset(DatasetManifest.load(args.manifest))
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest {args.manifest} not found") from None
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{args.manifest}: malformed manifest ({exc})") from None


def _model(args, dataset: SynthDataset):
    model = load_checkpoint(args.checkpoint)
    if model.hyper.embedding_dim != dataset.space.embedding_dim:
        raise CheckpointError(
            f"checkpoint embedding_dim {model.hyper.embedding_dim} does not match the "
            f"dataset's {dataset.space.embedding_dim}"
        )
    return model


def _hyper(cfg: Config) -> SepNetHyper:
    m = cfg.model
    return SepNetHyper(
        depth=m.depth,
        k=m.k,
        embedding_dim=cfg.data.embedding_dim,
        widths=tuple(m.widths) if m.widths else None,
        in_channels=m.in_channels,
        leak=m.leak,
    )


# ------------------------------------------------------------- query specs


def parse_query_spec(spec: str, dataset: SynthDataset, builder: ev.QueryBuilder) -> QueryEmbedding:
    """``modality:label[@w](+modality:label[@w])*`` -> one query embedding.

    A single term is that modality's class embedding (text/image: the class
    anchor; audio: the mean of S train-split audio embeddings). Several terms
    are blended by the weighted query mix with equal weights unless ``@w``
    suffixes are given; each modality may appear at most once.
    """
    terms: dict[str, tuple[QueryEmbedding, float]] = {}
    for raw in spec.split("+"):
        term = raw.strip()
        weight = 1.0
        if "@" in term:
            term, w = term.rsplit("@", 1)
            try:
                weight = float(w)
            except ValueError:
                raise UsageError(f"bad weight {w!r} in query spec {spec!r}") from None
        if ":" not in term:
            raise UsageError(f"query term {raw!r} is not of the form modality:label")
        modality, label = (p.strip() for p in term.split(":", 1))
        if modality not in MODALITIES:
            raise UsageError(f"unknown modality {modality!r} in {spec!r}; expected one of {MODALITIES}")
        if modality in terms:
            raise UsageError(f"modality {modality!r} appears twice in {spec!r}")
        try:
            cid = dataset.manifest.class_by_label(label).class_id
        except KeyError:
            known = ", ".join(c.label for c in dataset.manifest.classes)
            raise UsageError(f"unknown class label {label!r}; known labels: {known}") from None
        emb = builder.audio_query(cid) if modality == "audio" else dataset.space.embed(cid, modality)
        terms[modality] = (emb, weight)
    if len(terms) == 1:
        return next(iter(terms.values()))[0]
    try:
        weights = MixupWeights(*(terms.get(m, (None, 0.0))[1] for m in MODALITIES))
    except ValueError as exc:
        raise UsageError(f"bad weights in {spec!r}: {exc}") from None
    zero = QueryEmbedding(np.zeros(dataset.space.embedding_dim), "mixed")
    a, v, t = (terms[m][0] if m in terms else zero for m in MODALITIES)
    return mix_queries(a, v, t, weights)


def _spec_modality(spec: str) -> str:
    mods = {t.split(":", 1)[0].strip() for t in spec.split("+")}
    return mods.pop() if len(mods) == 1 else "mixed"


# ---------------------------------------------------------------- commands


def cmd_dataset(args) -> int:
    cfg = _config(args)
    if args.action == "build":
        if args.seed is not None:
            cfg.data.seed = args.seed
        manifest = _build_manifest(cfg)
        out = _out_dir(args)
        manifest.save(out / "manifest.json")
        dataset = SynthDataset(manifest)
        classes = [(c.class_id, c.label) for c in manifest.classes]
        for modality in MODALITIES:
            save_query_set(build_query_set(dataset.space, classes, modality), out / f"queryset_{modality}.bin")
        mix_dir = out / "mixtures"
        mix_dir.mkdir(exist_ok=True)
        rng = np.random.default_rng([cfg.data.seed, 99])
        index = []
        for i in range(args.n_mixtures):
            ex = sample_mixture(dataset, 2, rng, "eval", cfg.spectral)
            name = f"mix{i:03d}"
            write_wav(mix_dir / f"{name}.wav", ex.mixture_wave)
            for j, src in enumerate(ex.sources):
                write_wav(mix_dir / f"{name}_src{j}.wav", src)
            index.append({"name": name, "labels": [manifest.classes[c].label for c in ex.class_ids]})
        (mix_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n")
        print(f"wrote {out / 'manifest.json'} ({manifest.n_classes} classes) and {args.n_mixtures} mixtures")
        return EXIT_OK
    dataset = _dataset(args, cfg)
    m = dataset.manifest
    print(f"classes: {m.n_classes}  sample_rate: {m.sample_rate}  segment: {m.segment_s}s  clip: {m.clip_s}s")
    print(f"train seeds: {len(m.train_seeds)}  eval seeds: {len(m.eval_seeds)}  embedding dim: {m.embedding.dim}")
    from .synthdata import separability_matrix

    sim = separability_matrix(m.classes, m.sample_rate)
    for c in m.classes:
        others = np.delete(sim[c.class_id], c.class_id)
        print(f"  {c.class_id:>3} {c.label:<16} {c.kind:<16} max spectral cosine to others {others.max():.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    dataset = _dataset(args, cfg)
    out = _out_dir(args)
    cfg.save(out / "config.json")
    history_file = out / "loss_history.jsonl"
    if history_file.exists():
        history_file.unlink()
    model, history = train(dataset, cfg.train, _hyper(cfg), cfg.spectral, out_dir=out)
    print(f"trained {model.trained_steps} steps, final loss {history[-1]['loss']:.4f}; wrote {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_separate(args) -> int:
    cfg = _config(args)
    dataset = _dataset(args, cfg)
    model = _model(args, dataset)
    builder = ev.QueryBuilder(dataset, cfg.eval)
    query = parse_query_spec(args.query, dataset, builder)
    modality = _spec_modality(args.query)
    if args.perturb is not None:
        if modality != "text" or "+" in args.query:
            raise UsageError("--perturb applies to a single text query")
        seed = cfg.eval.seed if args.seed is None else args.seed
        cid = dataset.manifest.class_by_label(args.query.split(":", 1)[1].split("@")[0].strip()).class_id
        query = simulate_ood_description(cid, dataset.space, args.perturb, np.random.default_rng(seed)).embedding
    retrieved = None
    if args.query_aug:
        if args.query_set is not None:
            qset = load_query_set(args.query_set, modality if modality in MODALITIES else "text")
        else:
            task = {"text": "TQSS", "image": "IQSS", "audio": "AQSS"}.get(modality, "composed")
            qset = builder.query_set(task)
        retrieved, query = query_aug(query, qset)
    if args.neg is not None:
        neg = parse_query_spec(args.neg, dataset, builder)
        method = negative_query if args.nq_method == "proportional" else naive_negative_query
        query = method(query, neg, args.alpha)
    elif args.alpha != 0:
        raise UsageError("--alpha needs --neg")
    mixture = read_wav(args.mixture, expected_rate=dataset.sample_rate)
    s = stft(mixture, cfg.spectral.fft_size, cfg.spectral.hop, cfg.spectral.window_size)
    mask = forward(model, s.magnitude, query).final_mask().astype(np.float64)
    est_spec = apply_mask(s, Mask(mask, "soft"))
    estimate = istft(est_spec, len(mixture))
    out = _out_dir(args)
    write_wav(out / "separated.wav", estimate)
    ev._write_pgm(out / "mask.pgm", np.round(255 * mask.T[::-1]).astype(np.uint8))
    ev.render_spectrogram(est_spec, out / "separated_spectrogram.pgm")
    msg = f"wrote {out / 'separated.wav'} and {out / 'mask.pgm'}"
    if retrieved is not None:
        msg += f" (Query-Aug retrieved {dataset.manifest.classes[retrieved].label})"
    print(msg)
    return EXIT_OK


def _eval_seed(args, cfg: Config) -> None:
    if args.seed is not None:
        cfg.eval.seed = args.seed
    if args.n_eval is not None:
        cfg.eval.n_eval = args.n_eval


def cmd_eval(args) -> int:
    cfg = _config(args)
    _eval_seed(args, cfg)
    dataset = _dataset(args, cfg)
    model = _model(args, dataset)
    tasks = []
    for t in args.task:
        tasks.extend(ev.TASKS if t == "all" else [t])
    tasks = list(dict.fromkeys(tasks))
    alpha = cfg.eval.alpha if args.alpha is None else args.alpha
    report = ev.run_tasks(
        model,
        dataset,
        tasks,
        n_eval=cfg.eval.n_eval,
        alpha=alpha,
        nq_method=args.nq_method,
        use_query_aug=args.query_aug,
        query_noise=args.query_noise,
        config=cfg.eval,
        spectral=cfg.spectral,
    )
    out = _out_dir(args)
    report.write(out, args.stem)
    print(report.table())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    _eval_seed(args, cfg)
    dataset = _dataset(args, cfg)
    model = _model(args, dataset)
    out = _out_dir(args)
    common = dict(n_eval=cfg.eval.n_eval, config=cfg.eval, spectral=cfg.spectral)
    if args.kind == "nq":
        grid = cfg.eval.alpha_grid if args.grid is None else args.grid
        rows = ev.nq_sweep(model, dataset, args.task, grid, plot_path=out / "nq_sweep.pgm", **common)
        payload = {
            "rows": [r.__dict__ for r in rows],
            "range": {m: ev.sweep_range(rows, m) for m in ("proportional", "naive")},
        }
        (out / "nq_sweep.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        table = ev.sweep_table(rows)
        (out / "nq_sweep.txt").write_text(table + "\n")
    else:
        magnitude = cfg.eval.ood_magnitude if args.magnitude is None else args.magnitude
        rows = ev.query_aug_comparison(model, dataset, magnitude, **common)
        accuracy = ev.retrieval_accuracy(dataset, magnitude, seed=cfg.eval.seed)
        payload = {"rows": [r.__dict__ for r in rows], "magnitude": magnitude, "retrieval_accuracy_mc": accuracy}
        (out / "ood_comparison.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        table = ev.aug_table(rows) + f"\nMonte-Carlo retrieval accuracy at magnitude {magnitude}: {100 * accuracy:.1f}%"
        (out / "ood_comparison.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections data/spectral/model/train/eval)")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key by dot path, e.g. train.total_steps=200 (repeatable)",
    )
    common.add_argument("--seed", type=int, help="seed for the stage being run (data.seed, train.seed or eval.seed)")
    common.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./qsep_out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    data_src = _Parser(add_help=False)
    data_src.add_argument("--manifest", help="dataset manifest.json (default: build the catalog from the config)")

    model_src = _Parser(add_help=False)
    model_src.add_argument("--checkpoint", required=True, help="model checkpoint written by `qsep train`")

    parser = _Parser(prog="qsep", description="Query-conditioned sound separation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("dataset", parents=[common, data_src], help="build or inspect the synthetic catalog")
    p.add_argument("action", choices=("build", "inspect"))
    p.add_argument(
        "--n-mixtures", type=int, default=4, help="build: example two-source eval mixtures written as WAV files"
    )
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser(
        "train",
        parents=[common, data_src],
        help="mix-and-separate training with the magnitude-weighted BCE loss",
        description="Train from scratch. Query-Mixup (random convex blending of the audio, image and text "
        "query of each target) is controlled by train.mixup_enabled; train.modality_subset restricts "
        "which modalities are used when mixup is off.",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "separate",
        parents=[common, data_src, model_src],
        help="separate one mixture WAV with a query",
        description="Inference path: query spec -> (optional Query-Aug) -> (optional negative query) -> "
        "mask -> WAV.",
    )
    p.add_argument("mixture", help="mono 16-bit WAV at the dataset sample rate")
    p.add_argument(
        "--query",
        required=True,
        help="query spec modality:label, blended with '+' and optional '@w' weights via the weighted "
        "query mix, e.g. text:chirp+image:chirp@0.5",
    )
    p.add_argument("--neg", help="negative query spec describing the interference to suppress")
    p.add_argument(
        "--alpha", type=float, default=0.0, help="negative-query strength: q + alpha*(q - q_neg) (proportional)"
    )
    p.add_argument(
        "--nq-method",
        choices=("proportional", "naive"),
        default="proportional",
        help="proportional re-weighting (default) or naive subtraction q - alpha*q_neg",
    )
    p.add_argument(
        "--query-aug",
        action="store_true",
        help="Query-Aug: replace the query by its most cosine-similar entry in the stored query set",
    )
    p.add_argument("--query-set", help="query-set file for --query-aug (default: the catalog's anchors)")
    p.add_argument(
        "--perturb",
        type=float,
        metavar="MAGNITUDE",
        help="replace a text query by a simulated free-form description of this out-of-domain magnitude",
    )
    p.set_defaults(func=cmd_separate)

    def eval_flags(p):
        p.add_argument("--n-eval", type=int, help="number of two-source eval mixtures (default eval.n_eval)")

    p = sub.add_parser("eval", parents=[common, data_src, model_src], help="SDR report for query tasks")
    eval_flags(p)
    p.add_argument(
        "--task",
        nargs="+",
        choices=TASK_CHOICES,
        default=["all"],
        help="TQSS/IQSS/AQSS (text/image/audio query), composed (equal-weight query mix), or all",
    )
    p.add_argument("--alpha", type=float, help="negative-query strength with the interferer's anchor as q_neg")
    p.add_argument("--nq-method", choices=("proportional", "naive"), default="proportional")
    p.add_argument("--query-aug", action="store_true", help="apply Query-Aug before the negative query")
    p.add_argument(
        "--query-noise",
        type=float,
        help="use instance-level query embeddings with this noise level for every modality",
    )
    p.add_argument("--stem", default="report", help="file name stem of the written report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "sweep", parents=[common, data_src, model_src], help="negative-query alpha sweep or Query-Aug OOD comparison"
    )
    p.add_argument("kind", choices=("nq", "ood"))
    eval_flags(p)
    p.add_argument("--task", choices=TASK_CHOICES[:-1], default="TQSS", help="nq: task to sweep")
    p.add_argument("--grid", type=float, nargs="+", help="nq: alpha grid (default eval.alpha_grid)")
    p.add_argument("--magnitude", type=float, help="ood: out-of-domain magnitude (default eval.ood_magnitude)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        OSError,
        ValueError,
        RuntimeError,
        KeyError,
        CheckpointError,
        WavFormatError,
        QuerySetFormatError,
        CatalogAuditError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

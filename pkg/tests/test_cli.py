"""End-to-end runs of every subcommand on the shipped 8-class catalog (tiny training budget)."""

import json

import numpy as np
import pytest

from qsep.cli import main
from qsep.evaluation import read_pgm
from qsep.wavio import read_wav

TINY = ["--set", "model.depth=2", "--set", "model.k=2", "--set", "train.total_steps=4", "--set", "train.batch_size=2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["dataset", "build", "--n-mixtures", "2", "--out", str(root / "data")]) == 0
    assert main(["train", "--manifest", str(root / "data" / "manifest.json"), "--out", str(root / "model"), *TINY]) == 0
    return root


def test_dataset_build_outputs(workspace):
    data = workspace / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["classes"]) == 8
    for m in ("audio", "image", "text"):
        assert (data / f"queryset_{m}.bin").exists()
    index = json.loads((data / "mixtures" / "index.json").read_text())
    assert len(index) == 2
    mix = read_wav(data / "mixtures" / "mix000.wav", 8000)
    srcs = [read_wav(data / "mixtures" / f"mix000_src{j}.wav").samples for j in range(2)]
    # 16-bit quantisation of each file bounds the reconstruction error
    assert np.max(np.abs(mix.samples - srcs[0] - srcs[1])) <= 3 / 32768


def test_dataset_inspect(workspace, capsys):
    assert main(["dataset", "inspect", "--manifest", str(workspace / "data" / "manifest.json")]) == 0
    out = capsys.readouterr().out
    assert "chirp" in out and "classes: 8" in out


def test_train_outputs(workspace):
    model = workspace / "model"
    assert (model / "model.ckpt").exists()
    assert len((model / "loss_history.jsonl").read_text().splitlines()) == 4
    assert json.loads((model / "config.json").read_text())["train"]["total_steps"] == 4


def _sep_args(workspace, out, *extra):
    return [
        "separate",
        str(workspace / "data" / "mixtures" / "mix000.wav"),
        "--manifest",
        str(workspace / "data" / "manifest.json"),
        "--checkpoint",
        str(workspace / "model" / "model.ckpt"),
        "--out",
        str(out),
        *extra,
    ]


def test_separate_with_negative_query(workspace, tmp_path):
    args = _sep_args(workspace, tmp_path, "--query", "text:chirp", "--neg", "text:am_noise", "--alpha", "0.5")
    assert main(args) == 0
    est = read_wav(tmp_path / "separated.wav", 8000)
    assert len(est) == len(read_wav(workspace / "data" / "mixtures" / "mix000.wav"))
    mask = read_pgm(tmp_path / "mask.pgm")
    assert mask.shape[0] == 257


def test_separate_composed_and_query_aug(workspace, tmp_path, capsys):
    spec = "text:pure_tone+image:pure_tone@0.5+audio:pure_tone@0.25"
    assert main(_sep_args(workspace, tmp_path / "a", "--query", spec)) == 0
    qs = str(workspace / "data" / "queryset_text.bin")
    args = _sep_args(workspace, tmp_path / "b", "--query", "text:chirp", "--perturb", "0.5", "--query-aug", "--query-set", qs)
    assert main(args) == 0
    assert "retrieved chirp" in capsys.readouterr().out


def test_separate_usage_errors(workspace, tmp_path, capsys):
    assert main(_sep_args(workspace, tmp_path, "--query", "text:whale")) == 1
    assert "unknown class label" in capsys.readouterr().err
    assert main(_sep_args(workspace, tmp_path, "--query", "smell:chirp")) == 1
    assert main(_sep_args(workspace, tmp_path, "--query", "text:chirp+text:pure_tone")) == 1
    assert main(_sep_args(workspace, tmp_path, "--query", "text:chirp", "--alpha", "0.5")) == 1


def test_eval_and_sweeps(workspace, tmp_path):
    common = ["--manifest", str(workspace / "data" / "manifest.json"), "--checkpoint", str(workspace / "model" / "model.ckpt")]
    assert main(["eval", *common, "--task", "all", "--n-eval", "2", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "report_summary.json").read_text())["summary"]
    assert set(summary) == {"TQSS", "IQSS", "AQSS", "composed"}
    assert main(["sweep", "nq", *common, "--n-eval", "2", "--grid", "0", "1", "--out", str(tmp_path)]) == 0
    assert len(json.loads((tmp_path / "nq_sweep.json").read_text())["rows"]) == 4
    assert main(["sweep", "ood", *common, "--n-eval", "2", "--out", str(tmp_path)]) == 0
    assert len(json.loads((tmp_path / "ood_comparison.json").read_text())["rows"]) == 4


def test_output_dir_from_environment(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("QSEP_OUTPUT_DIR", str(tmp_path / "env"))
    args = _sep_args(workspace, "x", "--query", "text:chirp")
    args = args[: args.index("--out")] + args[args.index("--out") + 2 :]
    assert main(args) == 0
    assert (tmp_path / "env" / "separated.wav").exists()


def test_error_exit_codes(workspace, tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert main(["train", "--set", "train.nonsense=3", "--out", str(tmp_path)]) == 1
    assert "train.nonsense" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.ckpt").write_bytes(b"nonsense")
    assert main(["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "Traceback" not in err and err.startswith("error:")


def test_incompatible_checkpoint(workspace, tmp_path):
    args = [
        "eval",
        "--checkpoint",
        str(workspace / "model" / "model.ckpt"),
        "--set",
        "data.embedding_dim=32",
        "--n-eval",
        "1",
        "--out",
        str(tmp_path),
    ]
    assert main(args) == 2


def test_help_names_mechanisms(capsys):
    assert main(["separate", "--help"]) == 0
    text = capsys.readouterr().out
    assert "Query-Aug" in text and "negative-query" in text and "query mix" in text

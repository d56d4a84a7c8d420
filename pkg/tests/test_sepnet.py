import numpy as np
import pytest

from qsep.sepnet import (
    CheckpointError,
    SepNetHyper,
    backward,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
)

TINY = SepNetHyper(depth=2, k=2, embedding_dim=6)


def tiny_model(seed=0, hyper=TINY):
    return init_model(hyper, seed, dtype=np.float64)


def rand_inputs(rng, B=2, T=8, F=8, D=6, S=None):
    X = rng.uniform(0, 3, (B, T, F))
    Q = rng.standard_normal((B, D) if S is None else (S, B, D))
    return X, Q


def test_init_deterministic():
    a = init_model(SepNetHyper(), 7)
    b = init_model(SepNetHyper(), 7)
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()
    c = init_model(SepNetHyper(), 8)
    assert not np.array_equal(a.params["enc0.W"], c.params["enc0.W"])


def test_param_count_closed_form():
    h = SepNetHyper(depth=5, k=8, embedding_dim=64)
    model = init_model(h, 0)
    assert sum(p.size for p in model.params.values()) == h.param_count()
    # widths (8,16,16,32,32), two input channels
    c = (2, 8, 16, 16, 32, 32)
    enc = sum(9 * c[i] * c[i + 1] + c[i + 1] for i in range(5))
    dec = sum(9 * (c[i + 1] + c[i]) * c[i] + c[i] for i in range(1, 5)) + 9 * (8 + 2) * 8 + 8
    assert h.param_count() == enc + dec + 64 * 8 + 8 + 8 + 1


def test_full_scale_config_constructible():
    h = SepNetHyper(depth=7, k=32, embedding_dim=1024)
    model = init_model(h, 0)
    assert model.params["query.W"].shape == (1024, 32)
    assert model.params["dec0.W"].shape[0] == 32


def test_invalid_hyper():
    with pytest.raises(ValueError):
        SepNetHyper(depth=0)
    with pytest.raises(ValueError):
        SepNetHyper(depth=2, widths=(4,))


def test_zero_query_projection_gives_half():
    model = tiny_model()
    model.params["query.W"][:] = 0
    model.params["query.b"][:] = 0
    X, Q = rand_inputs(np.random.default_rng(0))
    assert np.all(forward(model, X, Q).final_mask() == 0.5)


def test_single_channel_head_matches_scalar_sigmoid():
    h = SepNetHyper(depth=2, k=1, embedding_dim=3)
    model = init_model(h, 1, np.float64)
    model.params["query.W"][:] = 0
    model.params["query.b"][:] = 1
    model.params["combine.w"][:] = 1
    model.params["combine.b"][:] = 0
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 2, (1, 6, 9))
    tr = forward(model, X, rng.standard_normal(3))
    inter = tr.intermediate[0, 0]
    mask = tr.final_mask()[0]
    for t in range(6):
        for f in range(9):
            assert abs(mask[t, f] - 1.0 / (1.0 + np.exp(-inter[t, f]))) < 1e-12


def test_mask_range_and_shapes():
    model = init_model(SepNetHyper(depth=3, k=4, embedding_dim=6), 0)
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 50, (3, 13, 33)).astype(np.float32)
    tr = forward(model, X, rng.standard_normal((3, 6)) * 100)
    m = tr.final_mask()
    assert m.shape == X.shape
    assert np.all(m >= 0) and np.all(m <= 1)
    assert tr.intermediate.shape == (4, 3, 13, 33)
    # single grid plus single query keeps the grid layout
    assert forward(model, X[0], rng.standard_normal(6)).final_mask().shape == (13, 33)


def test_mask_open_interval_in_float64():
    model = tiny_model()
    X, Q = rand_inputs(np.random.default_rng(4))
    m = forward(model, X, Q).final_mask()
    assert np.all((m > 0) & (m < 1))


def test_forward_errors():
    model = tiny_model()
    X, Q = rand_inputs(np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(model, X, Q[:, :3])
    bad = X.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        forward(model, bad, Q)


def test_forward_deterministic():
    model = tiny_model()
    X, Q = rand_inputs(np.random.default_rng(0))
    a = forward(model, X, Q).final_mask()
    b = forward(model, X, Q).final_mask()
    assert a.tobytes() == b.tobytes()


def _fd_check(model, X, Q, G, h=1e-5):
    def loss():
        return float(np.sum(forward(model, X, Q).final_mask() * G))

    trace = forward(model, X, Q)
    grads = backward(model, trace, G)
    worst = 0.0
    for name, p in model.params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss()
            p[idx] = old - h
            down = loss()
            p[idx] = old
            fd = (up - down) / (2 * h)
            an = grads[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(9)
    model = tiny_model(3)
    X, Q = rand_inputs(rng, S=2)
    G = rng.standard_normal((2,) + X.shape)
    assert _fd_check(model, X, Q, G) < 1e-4


def test_backward_odd_sizes():
    # frames/bins that are not powers of two exercise the crop-after-upsample path
    rng = np.random.default_rng(1)
    model = init_model(SepNetHyper(depth=3, k=2, embedding_dim=4), 2, np.float64)
    X = rng.uniform(0, 2, (1, 7, 11))
    Q = rng.standard_normal((1, 4))
    G = rng.standard_normal(X.shape)
    assert _fd_check(model, X, Q, G) < 1e-4


def test_zero_upstream_gives_zero_gradients():
    model = tiny_model()
    X, Q = rand_inputs(np.random.default_rng(0))
    tr = forward(model, X, Q)
    grads = backward(model, tr, np.zeros(tr.mask.shape))
    assert all(np.all(g == 0) for g in grads.values())


def test_bias_gradient_is_sum_of_sigmoid_derivative():
    model = tiny_model()
    X, Q = rand_inputs(np.random.default_rng(6))
    tr = forward(model, X, Q)
    grads = backward(model, tr, np.ones(tr.mask.shape))
    total = 0.0
    for z in tr.preact.ravel():
        s = 1.0 / (1.0 + np.exp(-z))
        total += s * (1 - s)
    assert grads["combine.b"][0] == pytest.approx(total, rel=1e-12)


def test_query_gradient():
    rng = np.random.default_rng(8)
    model = tiny_model()
    X, Q = rand_inputs(rng)
    G = rng.standard_normal(X.shape)
    _, dQ = backward(model, forward(model, X, Q), G, return_query_grad=True)
    h = 1e-6
    for idx in [(0, 1), (1, 4)]:
        Qp, Qm = Q.copy(), Q.copy()
        Qp[idx] += h
        Qm[idx] -= h
        fd = (np.sum(forward(model, X, Qp).final_mask() * G) - np.sum(forward(model, X, Qm).final_mask() * G)) / (2 * h)
        assert dQ[0][idx] == pytest.approx(fd, rel=1e-6)


def test_stale_trace_rejected():
    model = tiny_model()
    X, Q = rand_inputs(np.random.default_rng(0))
    tr = forward(model, X, Q)
    model.bump()
    with pytest.raises(RuntimeError, match="stale"):
        backward(model, tr, np.ones(tr.mask.shape))
    with pytest.raises(RuntimeError):
        backward(tiny_model(), tr, np.ones(tr.mask.shape))


def test_channel_permutation_symmetry():
    h = SepNetHyper(depth=2, k=4, embedding_dim=5)
    model = init_model(h, 3, np.float64)
    rng = np.random.default_rng(0)
    model.params["combine.w"][:] = rng.uniform(0.5, 2, 4)
    X = rng.uniform(0, 2, (2, 8, 10))
    Q = rng.standard_normal((2, 5))
    base = forward(model, X, Q).final_mask()
    perm = np.array([2, 0, 3, 1])
    p = model.params
    p["dec0.W"] = p["dec0.W"][perm]
    p["dec0.b"] = p["dec0.b"][perm]
    p["query.W"] = p["query.W"][:, perm]
    p["query.b"] = p["query.b"][perm]
    p["combine.w"] = p["combine.w"][perm]
    np.testing.assert_allclose(forward(model, X, Q).final_mask(), base, atol=1e-14)


def test_checkpoint_round_trip(tmp_path):
    model = init_model(SepNetHyper(depth=3, k=4, embedding_dim=8), 5)
    model.trained_steps = 12
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.hyper == model.hyper
    assert back.trained_steps == 12
    for name in model.params:
        assert back.params[name].tobytes() == model.params[name].tobytes()
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 2, (2, 9, 17)).astype(np.float32)
    Q = rng.standard_normal((2, 8))
    assert forward(back, X, Q).final_mask().tobytes() == forward(model, X, Q).final_mask().tobytes()


def test_checkpoint_errors(tmp_path):
    model = init_model(SepNetHyper(depth=2, k=2, embedding_dim=4), 0)
    save_checkpoint(model, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "v.ckpt").write_bytes(raw[:8] + (2).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"garbage!" * 4)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")

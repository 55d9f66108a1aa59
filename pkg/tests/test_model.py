import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fishmask.model import (ModelSpec, forward, forward_cache, init_params, load_params,
                            logprob_grad, loss_and_grad, predict, save_params)

from conftest import away_from_kinks


def _fd_grad(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _complex_step_logprob(spec, params, x, c):
    """Independent tanh-MLP log-probability gradient by complex-step differentiation."""
    h = 1e-30
    g = np.empty(params.size)
    for i in range(params.size):
        p = params.astype(np.complex128)
        p[i] += 1j * h
        a = x.astype(np.complex128)
        off = 0
        sizes = spec.layer_sizes
        for layer, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            W = p[off:off + fi * fo].reshape(fi, fo)
            off += fi * fo
            b = p[off:off + fo]
            off += fo
            a = a @ W + b
            if layer < len(sizes) - 2:
                a = np.tanh(a)
        logits = a
        # log-sum-exp without max subtraction keeps the complex part analytic
        lp = logits[c] - np.log(np.sum(np.exp(logits)))
        g[i] = lp.imag / h
    return g


def test_param_counts_and_layout():
    assert ModelSpec((2, 2)).n_params == 6
    spec = ModelSpec((4, 8, 3))
    assert spec.n_params == 4 * 8 + 8 + 8 * 3 + 3 == 67
    assert spec.classifier_slice == range(40, 67)
    names = [row["name"] for row in spec.layout()]
    assert names == ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"]


@pytest.mark.parametrize("sizes", [(3,), (3, 1), (3, 0, 2)])
def test_invalid_spec(sizes):
    with pytest.raises(ValueError):
        ModelSpec(sizes)


def test_init_deterministic_and_zero_bias():
    spec = ModelSpec((2, 2))
    a, b = init_params(spec, 7), init_params(spec, 7)
    assert a.size == 6
    assert a.tobytes() == b.tobytes()
    assert np.all(a[spec.layers[0].bias] == 0.0)
    assert not np.array_equal(a, init_params(spec, 8))


def test_spec_json_round_trip():
    spec = ModelSpec((4, 8, 3), "tanh")
    d = json.loads(spec.to_json(seed=3))
    assert d == {"layer_sizes": [4, 8, 3], "activation": "tanh", "seed": 3}
    assert ModelSpec.from_json(spec.to_json()) == spec


def test_zero_params_uniform():
    spec = ModelSpec((5, 7, 4))
    lp = forward(spec, np.zeros(spec.n_params), np.arange(5.0))
    np.testing.assert_array_equal(lp, np.full(4, np.log(0.25)))
    loss, _ = loss_and_grad(spec, np.zeros(spec.n_params), np.ones((3, 5)), [0, 1, 3])
    assert loss == pytest.approx(np.log(4), abs=1e-15)


def test_logistic_hand_example():
    spec = ModelSpec((2, 2))
    # weight matrix stored fan_in x fan_out: rows are inputs
    W = np.array([[1.0, -2.0], [0.5, 3.0]])
    params = np.concatenate([W.ravel(), [0.0, 0.0]])
    lp = forward(spec, params, np.array([1.0, 0.0]))
    # input (1, 0) selects the first row of W as logits: (1, -2)
    z = np.log(np.exp(1.0) + np.exp(-2.0))
    np.testing.assert_allclose(lp, [1.0 - z, -2.0 - z], rtol=0, atol=1e-15)


def test_logistic_closed_form_score(rng):
    spec = ModelSpec((3, 4))
    params = rng.normal(size=spec.n_params)
    x = rng.normal(size=3)
    W, b = spec.unpack(params)[0]
    logits = x @ W + b
    p = np.exp(logits - logits.max())
    p /= p.sum()
    for c in range(4):
        r = np.eye(4)[c] - p
        expected = np.concatenate([np.outer(x, r).ravel(), r])
        np.testing.assert_allclose(logprob_grad(spec, params, x, c), expected, atol=1e-14)


def test_forward_stable_for_large_logits():
    spec = ModelSpec((1, 3))
    params = np.array([1000.0, -1000.0, 0.0, 0.0, 0.0, 0.0])
    lp = forward(spec, params, np.array([1.0]))
    assert np.all(np.isfinite(lp))
    assert lp[0] == 0.0
    assert lp[1] == pytest.approx(-2000.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), act=st.sampled_from(["relu", "tanh"]))
def test_normalization_and_score_zero_mean(seed, act):
    spec = ModelSpec((4, 6, 5), act)
    r = np.random.default_rng(seed)
    params = r.normal(size=spec.n_params) * 2
    x = r.normal(size=4) * 3
    lp = forward(spec, params, x)
    assert abs(np.exp(lp).sum() - 1.0) <= 1e-9
    mean_score = sum(np.exp(lp[c]) * logprob_grad(spec, params, x, c) for c in range(5))
    assert np.max(np.abs(mean_score)) < 1e-8


def test_gradients_match_finite_differences(rng):
    spec = ModelSpec((3, 4, 3), "relu")
    checked = 0
    while checked < 20:
        params = rng.normal(size=spec.n_params)
        X = rng.normal(size=(2, 3))
        y = rng.integers(0, 3, size=2)
        if not away_from_kinks(spec, params, X, 1e-3):
            continue
        _, g = loss_and_grad(spec, params, X, y)
        fd = _fd_grad(lambda p: loss_and_grad(spec, p, X, y)[0], params)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)
        checked += 1


def test_logprob_grad_matches_complex_step(rng, small_mlp):
    for _ in range(10):
        params = rng.normal(size=small_mlp.n_params)
        x = rng.normal(size=4)
        c = int(rng.integers(0, 3))
        np.testing.assert_allclose(logprob_grad(small_mlp, params, x, c),
                                   _complex_step_logprob(small_mlp, params, x, c),
                                   rtol=1e-10, atol=1e-12)


def test_duplicated_example_same_loss(rng, small_mlp):
    params = rng.normal(size=small_mlp.n_params)
    x = rng.normal(size=(1, 4))
    l1, g1 = loss_and_grad(small_mlp, params, x, [2])
    l2, g2 = loss_and_grad(small_mlp, params, np.vstack([x, x]), [2, 2])
    assert l1 == pytest.approx(l2, abs=1e-15)
    np.testing.assert_allclose(g1, g2, atol=1e-15)


def test_errors(small_mlp):
    p = np.zeros(small_mlp.n_params)
    with pytest.raises(ValueError):
        loss_and_grad(small_mlp, p, np.empty((0, 4)), [])
    with pytest.raises(ValueError):
        forward(small_mlp, p, np.zeros(5))
    with pytest.raises(ValueError):
        logprob_grad(small_mlp, p, np.zeros(4), 3)
    with pytest.raises(ValueError):
        forward(small_mlp, np.zeros(3), np.zeros(4))


def test_predict_tie_goes_to_lowest_class(small_mlp):
    assert predict(small_mlp, np.zeros(small_mlp.n_params), np.ones((3, 4))).tolist() == [0, 0, 0]


def test_determinism(rng, small_mlp):
    params = rng.normal(size=small_mlp.n_params)
    X = rng.normal(size=(8, 4))
    a = forward_cache(small_mlp, params, X).log_probs
    b = forward_cache(small_mlp, params, X).log_probs
    assert a.tobytes() == b.tobytes()


def test_params_file_round_trip(tmp_path, rng):
    p = rng.normal(size=17)
    save_params(tmp_path / "p.bin", p)
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:4] == b"FSHP"
    assert load_params(tmp_path / "p.bin").tobytes() == p.tobytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="offset 0"):
        load_params(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_params(tmp_path / "short.bin")

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fishmask.fisher import (FisherDiag, compute_fisher, empirical_fisher, fisher_rank_overlap,
                             load_fisher, save_fisher, top_k_order, true_fisher_exact,
                             true_fisher_sampled)
from fishmask.model import ModelSpec, forward, logprob_grad

from test_model import _complex_step_logprob


def _data(rng, spec, n):
    return rng.normal(size=(n, spec.input_dim)), rng.integers(0, spec.n_classes, size=n)


def brute_force_true_fisher(spec, params, X):
    """Class enumeration with complex-step scores; shares no code with the estimator."""
    total = np.zeros(params.size)
    for x in X:
        logits_lp = forward(spec, params, x)
        for c in range(spec.n_classes):
            g = _complex_step_logprob(spec, params, x, c)
            total += np.exp(logits_lp[c]) * g * g
    return total / len(X)


def test_true_exact_matches_enumeration_oracle(rng, small_mlp):
    assert small_mlp.n_params <= 100
    params = rng.normal(size=small_mlp.n_params)
    X, y = _data(rng, small_mlp, 12)
    got = true_fisher_exact(small_mlp, params, X, y, 12).scores
    np.testing.assert_allclose(got, brute_force_true_fisher(small_mlp, params, X), rtol=0, atol=1e-10)


def test_batched_empirical_matches_per_example_definition(rng):
    spec = ModelSpec((5, 7, 4), "relu")
    params = rng.normal(size=spec.n_params)
    X, y = _data(rng, spec, 40)
    expected = np.mean([logprob_grad(spec, params, x, t) ** 2 for x, t in zip(X, y)], axis=0)
    np.testing.assert_allclose(empirical_fisher(spec, params, X, y, 40).scores, expected,
                               rtol=0, atol=1e-12)


def test_empirical_single_example_logistic(rng):
    spec = ModelSpec((3, 2))
    params = np.array([0.5, -1.0, 2.0, 0.0, -0.3, 0.7, 0.1, -0.1])
    x = np.array([1.0, -2.0, 0.5])
    W, b = params[:6].reshape(3, 2), params[6:]
    logits = x @ W + b
    p = np.exp(logits) / np.exp(logits).sum()
    r = np.eye(2)[1] - p
    score = np.concatenate([np.outer(x, r).ravel(), r])
    got = empirical_fisher(spec, params, x[None], [1], 1).scores
    np.testing.assert_allclose(got, score ** 2, atol=1e-15)


def test_dead_input_feature_scores_zero(rng):
    spec = ModelSpec((3, 4, 2))
    params = rng.normal(size=spec.n_params)
    X, y = _data(rng, spec, 20)
    X[:, 1] = 0.0
    f = empirical_fisher(spec, params, X, y, 20).scores
    w = f[spec.layers[0].weight].reshape(3, 4)
    assert np.all(w[1] == 0.0)
    assert np.all(w[[0, 2]] > 0.0)


def test_first_n_only(rng, small_mlp):
    params = rng.normal(size=small_mlp.n_params)
    X, y = _data(rng, small_mlp, 30)
    a = empirical_fisher(small_mlp, params, X, y, 10)
    b = empirical_fisher(small_mlp, params, X[:10], y[:10], 10)
    assert a.scores.tobytes() == b.scores.tobytes()
    assert a.sample_count == 10


@pytest.mark.parametrize("n", [0, 31])
def test_bad_sample_count(rng, small_mlp, n):
    X, y = _data(rng, small_mlp, 30)
    with pytest.raises(ValueError):
        empirical_fisher(small_mlp, np.zeros(small_mlp.n_params), X, y, n)


def test_sampled_converges_to_exact():
    spec = ModelSpec((4, 5, 3), "tanh")
    r = np.random.default_rng(5)
    params = r.normal(size=spec.n_params)
    X, y = _data(r, spec, 8)
    exact = true_fisher_exact(spec, params, X, y, 8).scores
    errs = []
    for draws in (1, 10, 10_000):
        est = true_fisher_sampled(spec, params, X, y, 8, draws, seed=0).scores
        errs.append(np.max(np.abs(est - exact)))
    assert errs[0] > errs[1] > errs[2]
    est = true_fisher_sampled(spec, params, X, y, 8, 10_000, seed=0).scores
    big = exact > 1e-6
    assert np.max(np.abs(est[big] - exact[big]) / exact[big]) < 0.05


def test_sampled_deterministic(rng, small_mlp):
    params = rng.normal(size=small_mlp.n_params)
    X, y = _data(rng, small_mlp, 6)
    a = true_fisher_sampled(small_mlp, params, X, y, 6, 7, seed=3)
    b = true_fisher_sampled(small_mlp, params, X, y, 6, 7, seed=3)
    assert a.scores.tobytes() == b.scores.tobytes()
    assert a.draws == 7


def _confident_logistic():
    # p(y=1|x) = 1 to double precision for both examples
    spec = ModelSpec((2, 2))
    params = np.array([0.0, 50.0, 0.0, 50.0, 0.0, 0.0])
    X = np.array([[1.0, 0.5], [0.3, 1.0]])
    return spec, params, X, np.array([1, 1])


def test_degenerate_distribution_all_variants_agree():
    spec, params, X, y = _confident_logistic()
    assert np.all(forward(spec, params, X)[:, 0] < np.log(1e-9))
    emp = empirical_fisher(spec, params, X, y, 2).scores
    exact = true_fisher_exact(spec, params, X, y, 2).scores
    sampled = true_fisher_sampled(spec, params, X, y, 2, 50, seed=1).scores
    np.testing.assert_allclose(exact, emp, atol=1e-6)
    np.testing.assert_array_equal(sampled, emp)


def test_confident_mlp_agreement(rng):
    spec = ModelSpec((3, 4, 3), "tanh")
    params = rng.normal(size=spec.n_params)
    params[spec.classifier_slice] *= 40.0
    X, _ = _data(rng, spec, 10)
    lp = forward(spec, params, X)
    keep = lp.max(axis=1) > np.log1p(-1e-9)
    X = X[keep]
    y = lp[keep].argmax(axis=1)
    assert len(X) >= 3
    emp = empirical_fisher(spec, params, X, y, len(X)).scores
    exact = true_fisher_exact(spec, params, X, y, len(X)).scores
    np.testing.assert_allclose(exact, emp, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), variant=st.sampled_from(["empirical", "true_exact", "true_sampled"]))
def test_nonnegative(seed, variant):
    spec = ModelSpec((3, 4, 3))
    r = np.random.default_rng(seed)
    X, y = _data(r, spec, 5)
    f = compute_fisher(spec, r.normal(size=spec.n_params) * 3, X, y, 5, variant, draws=3, seed=seed)
    assert f.scores.shape == (spec.n_params,)
    assert np.all(f.scores >= 0)


def test_rank_overlap_examples():
    b = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
    assert fisher_rank_overlap(b, b, 2) == 1.0
    assert fisher_rank_overlap(b[::-1].copy(), b, 5) == 1.0
    a = np.array([1.0, 1.0, 0.0, 0.0])
    c = np.array([0.0, 0.0, 1.0, 1.0])
    assert fisher_rank_overlap(a, c, 2) == 0.0
    with pytest.raises(ValueError):
        fisher_rank_overlap(a, b, 2)
    with pytest.raises(ValueError):
        fisher_rank_overlap(a, c, 0)


def test_top_k_order_ties_lowest_index_first():
    assert top_k_order(np.array([0.5, 0.9, 0.5, 0.9])).tolist() == [1, 3, 0, 2]


def test_overlap_between_disjoint_sets_grows_with_n():
    from fishmask.experiments import REFERENCE_TASK, prepare

    prep = prepare(REFERENCE_TASK)
    k = prep.spec.n_params // 10
    means = []
    for n in (4, 32, 256):
        vals = []
        for seed in range(3):
            p = prep.init(seed)
            X, y = prep.train.X, prep.train.y
            a = empirical_fisher(prep.spec, p, X[:n], y[:n], n)
            b = empirical_fisher(prep.spec, p, X[n:2 * n], y[n:2 * n], n)
            vals.append(fisher_rank_overlap(a, b, k))
        means.append(np.mean(vals))
    assert means[0] < means[1] < means[2]


def test_file_round_trip(tmp_path, rng):
    f = FisherDiag(rng.random(11), 9, "true_sampled", 4)
    save_fisher(tmp_path / "f.bin", f)
    g = load_fisher(tmp_path / "f.bin")
    assert (g.sample_count, g.variant, g.draws) == (9, "true_sampled", 4)
    assert g.scores.tobytes() == f.scores.tobytes()
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_fisher(tmp_path / "bad.bin")
    s = f.summary(3)
    assert s["top_indices"] == top_k_order(f.scores)[:3].tolist()
    assert s["min"] == f.scores.min() and s["max"] == f.scores.max()

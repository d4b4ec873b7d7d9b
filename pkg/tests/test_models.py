import numpy as np
import pytest

from kronshampoo import models
from kronshampoo.curvature import assemble
from kronshampoo.data import Dataset, synth_gaussian_classes
from kronshampoo.errors import EnumerationLimitError, ShapeError
from kronshampoo.models import GradientEnsemble, Model, ModelConfig
from kronshampoo.seeding import rng_for


def mlp(act="tanh", layer="W2", seed=0):
    return Model.init(ModelConfig("mlp2", 4, 3, hidden_dim=5, probe_layer=layer, activation=act),
                      seed)


def fd_gradient(model, name, x, label, h=1e-5):
    W = model.params[name]
    out = np.zeros_like(W)
    for idx in np.ndindex(*W.shape):
        E = np.zeros_like(W)
        E[idx] = h
        up = models.loss(model.with_params(**{name: W + E}), x[None], [label])
        dn = models.loss(model.with_params(**{name: W - E}), x[None], [label])
        out[idx] = (up - dn) / (2 * h)
    return out


# configuration ---------------------------------------------------------------


def test_config_defaults_and_shapes():
    assert ModelConfig("binary_logistic", 7).probe_shape == (7, 1)
    assert ModelConfig("multinomial_linear", 7, 4).probe_shape == (4, 7)
    cfg = ModelConfig("mlp2", 7, 3, hidden_dim=5)
    assert cfg.probe_layer == "W2" and cfg.probe_shape == (3, 5)
    assert ModelConfig("mlp2", 7, 3, hidden_dim=5, probe_layer="W1").probe_shape == (5, 7)


@pytest.mark.parametrize("kwargs", [
    dict(kind="cnn", input_dim=3),
    dict(kind="binary_logistic", input_dim=3, num_classes=3),
    dict(kind="multinomial_linear", input_dim=0, num_classes=3),
    dict(kind="mlp2", input_dim=3, num_classes=3),
    dict(kind="mlp2", input_dim=3, num_classes=3, hidden_dim=2, activation="gelu"),
    dict(kind="multinomial_linear", input_dim=3, num_classes=3, probe_layer="W2"),
    dict(kind="multinomial_linear", input_dim=600, num_classes=2),
])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_glorot_init_is_bounded_and_seeded():
    cfg = ModelConfig("mlp2", 20, 3, hidden_dim=10)
    a = Model.init(cfg, 3)
    b = Model.init(cfg, 3)
    assert np.array_equal(a.params["W1"], b.params["W1"])
    assert np.max(np.abs(a.params["W1"])) <= np.sqrt(6 / 30)
    assert np.max(np.abs(a.params["W2"])) <= np.sqrt(6 / 13)
    assert not np.array_equal(a.params["W1"], Model.init(cfg, 4).params["W1"])
    with pytest.raises(ShapeError):
        a.with_params(W1=np.zeros((3, 3)))


# forward pass ----------------------------------------------------------------


def test_forward_examples(rng):
    m = Model.init(ModelConfig("binary_logistic", 3)).with_params(W=np.zeros((3, 1)))
    assert np.array_equal(models.forward(m, rng.standard_normal(3)), [0.5, 0.5])
    m = Model.init(ModelConfig("multinomial_linear", 3, 4)).with_params(W=np.zeros((4, 3)))
    assert np.allclose(models.forward(m, rng.standard_normal(3)), 0.25, rtol=0, atol=1e-15)
    for act in ("relu", "tanh"):
        p = models.predict_proba(mlp(act), rng.standard_normal((10, 4)))
        assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        models.forward(m, np.zeros(4))


def test_sigmoid_is_stable_for_large_logits():
    m = Model.init(ModelConfig("binary_logistic", 1)).with_params(W=[[1000.0]])
    p = models.predict_proba(m, np.array([[1.0], [-1.0]]))
    assert np.array_equal(p, [[0.0, 1.0], [1.0, 0.0]])


# per-sample gradients --------------------------------------------------------


def test_binary_gradient_closed_form_and_perfect_prediction(rng):
    m = Model.init(ModelConfig("binary_logistic", 3), 0)
    x = rng.standard_normal(3)
    p1 = models.forward(m, x)[1]
    assert np.allclose(models.per_sample_gradient(m, x, 1), ((p1 - 1) * x)[:, None])
    sat = Model.init(ModelConfig("binary_logistic", 1)).with_params(W=[[1000.0]])
    assert not np.any(models.per_sample_gradient(sat, np.array([1.0]), 1))


def test_multinomial_closed_form(rng):
    m = Model.init(ModelConfig("multinomial_linear", 4, 3), 0)
    x = rng.standard_normal(4)
    p = models.forward(m, x)
    assert np.allclose(models.per_sample_gradient(m, x, 2), np.outer(p - np.eye(3)[2], x))
    with pytest.raises(ValueError):
        models.per_sample_gradient(m, x, 3)


@pytest.mark.parametrize("model,layer", [
    (Model.init(ModelConfig("binary_logistic", 4), 1), "W"),
    (Model.init(ModelConfig("multinomial_linear", 4, 3), 1), "W"),
    (mlp("tanh", "W2", 1), "W2"),
    (mlp("tanh", "W1", 1), "W1"),
    (mlp("relu", "W1", 2), "W1"),
])
def test_gradients_match_finite_differences(model, layer):
    rng = rng_for(7, "test")
    for _ in range(3):
        x = rng.standard_normal(4)
        label = int(rng.integers(0, model.config.num_classes))
        G = models.per_sample_gradient(model, x, label, layer)
        ref = fd_gradient(model, layer, x, label)
        assert np.linalg.norm(G - ref) <= 1e-6 * np.linalg.norm(ref)


def test_full_gradient_is_mean_of_per_sample(rng):
    m = mlp()
    X = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, size=6)
    g = models.full_gradient(m, X, y)
    assert set(g) == {"W1", "W2"}
    assert np.allclose(g["W1"], models.per_sample_gradients(m, X, y, "W1").mean(axis=0))


def test_gradient_table_limit():
    m = Model.init(ModelConfig("multinomial_linear", 2, 65))
    with pytest.raises(EnumerationLimitError):
        models.gradient_table(m, np.zeros((1, 2)))


# ensembles -------------------------------------------------------------------


def test_ensemble_validation(rng):
    G = rng.standard_normal((3, 2, 2))
    with pytest.raises(ShapeError):
        GradientEnsemble(G, np.array([0.5, 0.5, 0.5]))
    with pytest.raises(ShapeError):
        GradientEnsemble(G, np.array([1.0, 0.0]))
    with pytest.raises(ShapeError):
        GradientEnsemble(np.zeros((0, 2, 2)), np.zeros(0))
    bad = G.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ShapeError):
        GradientEnsemble.uniform(bad)
    e = GradientEnsemble.weighted(G, [1, 2, 1])
    assert np.allclose(e.weights, [0.25, 0.5, 0.25])
    assert np.allclose(e.mean(), 0.25 * G[0] + 0.5 * G[1] + 0.25 * G[2])
    assert np.array_equal(e.vectors()[1], G[1].reshape(-1, order="F"))


def test_gn_ensemble_single_point_at_zero_weights():
    x = np.array([1.0, -2.0, 0.5])
    m = Model.init(ModelConfig("binary_logistic", 3)).with_params(W=np.zeros((3, 1)))
    e = models.gn_ensemble_exact(m, x[None])
    assert len(e) == 2 and np.allclose(e.weights, 0.5)
    assert np.allclose(np.abs(e.grads[:, :, 0]), 0.5 * np.abs(x))
    assert np.allclose(assemble(e).H, 0.25 * np.outer(x, x))


def test_gn_ensemble_bookkeeping_and_mean_zero(rng):
    ds = synth_gaussian_classes(4, 3, 5, 2.0, 0)
    m = mlp(seed=3)
    e = models.gn_ensemble_exact(m, ds)
    assert len(e) == len(ds) * 3
    assert abs(e.weights.sum() - 1) <= 1e-12
    table = models.gradient_table(m, ds)
    P = models.predict_proba(m, ds)
    for i in range(len(ds)):
        mean = np.einsum("c,cij->ij", P[i], table[i])
        assert np.linalg.norm(mean) <= 1e-12 * max(np.linalg.norm(t) for t in table[i])
    H = assemble(e).H
    assert np.linalg.eigvalsh(H)[0] >= -1e-10 * np.trace(H) / H.shape[0]


def test_sampled_labels_monte_carlo_matches_exact_gn():
    ds = synth_gaussian_classes(4, 3, 5, 2.0, 0)
    m = mlp(seed=3)
    H = assemble(models.gn_ensemble_exact(m, ds)).H
    rng = rng_for(0, "labels")
    idx = rng.integers(0, len(ds), size=100_000)
    labels = models.sample_labels(models.predict_proba(m, ds.X[idx]), rng)
    mc = assemble(GradientEnsemble.uniform(models.per_sample_gradients(m, ds.X[idx], labels))).H
    assert np.linalg.norm(mc - H) <= 0.05 * np.linalg.norm(H)


def test_empirical_ensemble_uses_real_labels():
    ds = synth_gaussian_classes(4, 3, 3, 2.0, 0)
    m = mlp()
    e = models.empirical_ensemble(m, ds)
    assert np.array_equal(e.grads, models.per_sample_gradients(m, ds.X, ds.y))


def test_sample_gradient_batch_examples():
    ds = synth_gaussian_classes(4, 3, 4, 2.0, 0)
    m = mlp()
    G = models.sample_gradient_batch(m, ds, 1, "real", seed=5)
    i = rng_for(5, "batch").integers(0, len(ds), size=1)[0]
    assert np.array_equal(G, models.per_sample_gradient(m, ds.X[i], ds.y[i]))
    point = Dataset(np.tile(ds.X[:1], (4, 1)), np.repeat(ds.y[:1], 4), 3)
    full = models.full_gradient(m, point.X, point.y)["W2"]
    assert np.allclose(models.sample_gradient_batch(m, point, 4, "real", seed=1), full)
    a = models.sample_gradient_batch(m, ds, 3, "sampled", seed=9)
    b = models.sample_gradient_batch(m, ds, 3, "sampled", seed=9)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        models.sample_gradient_batch(m, ds, 0)
    with pytest.raises(ValueError):
        models.sample_gradient_batch(m, ds, 1, "bogus")


def test_loss_and_accuracy():
    ds = synth_gaussian_classes(2, 2, 10, 50.0, 0)
    m = Model.init(ModelConfig("multinomial_linear", 2, 2)).with_params(
        W=np.array([[10.0, -10.0], [-10.0, 10.0]]))
    assert models.accuracy(m, ds) == 1.0
    assert models.loss(m, ds) < 1e-6
    zero = m.with_params(W=np.zeros((2, 2)))
    assert np.isclose(models.loss(zero, ds), np.log(2))

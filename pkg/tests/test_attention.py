import numpy as np
import pytest

from gradient_cases import attention_path_only_differs
from leanet import tensor as T
from leanet.attention import (
    LeaModel,
    TrainConfig,
    apply_attention,
    attention_map,
    load_model,
    minibatches,
    predict,
    save_model,
    total_loss,
    train,
    zero_attention,
)
from leanet.errors import ModelError, ShapeError, SpecError
from leanet.netspec import build_adn, build_caan
from leanet.network import Network
from leanet.rng import derive

EXTENT = 32


def _specs(variant="resnet_based", extent=EXTENT):
    return build_caan(variant, 0.125, extent, outputs=1), build_adn("basic_cnn", 0.125, extent)


def _batch(rng, n=4, extent=EXTENT):
    x = rng.uniform(0, 1, size=(n, extent, extent, 3)).astype(np.float32)
    xa = rng.uniform(0, 1, size=(n, extent, extent, 1)).astype(np.float32)
    return x, xa, np.arange(n) % 2


def separable_set(seed, n=64, extent=EXTENT):
    """Positives are brighter and carry a bright anomaly map."""
    rng = derive(seed, "separable")
    y = np.arange(n) % 2
    x = rng.uniform(0, 0.5, size=(n, extent, extent, 3)) + 0.5 * y[:, None, None, None]
    xa = rng.uniform(0, 0.2, size=(n, extent, extent, 1)) + 0.6 * y[:, None, None, None]
    return x.astype(np.float32), xa.astype(np.float32), y


# ------------------------------------------------------------ attention identities


def test_zero_map_is_identity_and_unit_map_doubles(rng):
    f = T.Tensor(rng.normal(size=(3, 4, 4, 5)).astype(np.float32))
    zero = T.Tensor(np.zeros((3, 4, 4, 1), np.float32))
    one = T.Tensor(np.ones((3, 4, 4, 1), np.float32))
    assert np.array_equal(apply_attention(f, zero).data, f.data)
    assert np.array_equal(apply_attention(f, one).data, 2 * f.data)


def test_single_location_example():
    f = T.Tensor(np.array([[[[1.0, -2.0]]]]))
    np.testing.assert_array_equal(apply_attention(f, T.Tensor(np.full((1, 1, 1, 1), 0.5))).data, [[[[1.5, -3.0]]]])


def test_sign_and_magnitude_bounds(rng):
    f = rng.normal(size=(10_000, 1, 1, 3))
    att = attention_map(T.Tensor(rng.normal(scale=5, size=(10_000, 1, 1, 4))))
    out = apply_attention(T.Tensor(f), att).data
    assert np.array_equal(np.sign(out), np.sign(f))
    assert np.all(np.abs(f) <= np.abs(out)) and np.all(np.abs(out) <= 2 * np.abs(f))


def test_attention_map_is_strictly_inside_unit_interval(rng):
    feats = T.Tensor(np.concatenate([rng.normal(scale=50, size=(2, 4, 4, 3)), np.full((1, 4, 4, 3), 1e4)]))
    att = attention_map(feats).data
    assert att.shape == (3, 4, 4, 1)
    assert np.all((att > 0) & (att < 1))


def test_apply_attention_rejects_mismatch():
    with pytest.raises(ShapeError):
        apply_attention(T.Tensor(np.ones((1, 4, 4, 2))), T.Tensor(np.ones((1, 2, 2, 1))))
    with pytest.raises(ShapeError):
        apply_attention(T.Tensor(np.ones((1, 4, 4, 2))), T.Tensor(np.ones((1, 4, 4, 2))))


# ------------------------------------------------------------------------ loss


def test_loss_examples():
    half = T.Tensor(np.array([[0.5]]))
    assert float(total_loss(half, half, [1]).total.data) == pytest.approx(2 * np.log(2), abs=1e-6)
    parts = total_loss(T.Tensor(np.array([[0.9]])), T.Tensor(np.array([[0.6]])), [1])
    assert float(parts.total.data) == pytest.approx(0.6162, abs=1e-4)
    near = T.Tensor(np.array([[1 - 1e-6]]))
    assert float(total_loss(near, near, [1]).total.data) < 1e-4


def test_loss_total_is_exact_sum(rng):
    p = T.Tensor(rng.uniform(0.05, 0.95, size=(8, 1)))
    q = T.Tensor(rng.uniform(0.05, 0.95, size=(8, 1)))
    parts = total_loss(p, q, rng.integers(0, 2, 8))
    assert float(parts.total.data) == float(parts.attention.data) + float(parts.detection.data)


# ---------------------------------------------------------------------- model


def test_zero_hook_reproduces_standalone_detector(rng):
    caan, adn = _specs()
    x, xa, _ = _batch(rng)
    for p in range(1, 6):
        lea = LeaModel(caan, adn, p, seed=9, hook=zero_attention)
        plain = Network(adn, derive(9, "adn", "init"))
        for train_mode in (True, False):
            got = lea.forward(x, xa, train=train_mode).y_ad.data
            assert np.array_equal(got, plain.forward(x, train=train_mode).data)


def test_forward_matches_manual_composition(rng):
    caan, adn = _specs("mobilenet_like")
    x, xa, _ = _batch(rng)
    model = LeaModel(caan, adn, 3, seed=2)
    res = model.forward(x, xa, train=True, capture=True)
    taps = {}
    y_att = model.caan.forward(xa, train=True, taps=taps)
    att = attention_map(taps[3])
    y_ad = model.adn.forward(x, train=True, point=3, hook=lambda f: apply_attention(f, att))
    assert np.array_equal(res.y_ad.data, y_ad.data)
    assert np.array_equal(res.y_att.data, y_att.data)
    assert np.array_equal(res.taps["attention"].data, att.data)
    assert set(res.taps) == {"attention", "caan", "before", "after"}
    assert np.all((res.y_ad.data > 0) & (res.y_ad.data < 1))
    assert np.all((res.y_att.data > 0) & (res.y_att.data < 1))


def test_model_construction_errors():
    caan, adn = _specs()
    with pytest.raises(SpecError):
        LeaModel(caan, adn, 6)
    with pytest.raises(SpecError):
        LeaModel(build_caan("resnet_based", 0.125, 16, outputs=1), adn, 2)
    with pytest.raises(ModelError):
        LeaModel(build_caan("resnet_based", 0.125, EXTENT, outputs=2), adn, 2)


def test_params_are_namespaced_per_branch():
    model = LeaModel(*_specs(), 1)
    names = list(model.params)
    assert all(n.startswith(("caan/", "adn/")) for n in names)
    assert len(names) == len(model.caan.params) + len(model.adn.params)


def test_attention_pathway_carries_gradient(rng):
    assert attention_path_only_differs(rng) > 0


def test_save_load_roundtrip(tmp_path, rng):
    model = LeaModel(*_specs(), 4, seed=3)
    x, xa, y = _batch(rng)
    train(model, (x, xa, y), TrainConfig(epochs=1, batch_size=4))
    save_model(tmp_path / "m.ckpt", model, {"variant": "caan_resnet_based"})
    back, meta = load_model(tmp_path / "m.ckpt")
    assert meta["variant"] == "caan_resnet_based" and meta["point"] == 4
    assert np.array_equal(back.predict(x, xa), model.predict(x, xa))


# ------------------------------------------------------------------- training


def test_training_rejects_single_class_and_empty():
    model = LeaModel(*_specs(), 1)
    x, xa, _ = separable_set(0, n=8)
    with pytest.raises(ModelError, match="both labels"):
        train(model, (x, xa, np.zeros(8, int)), TrainConfig(epochs=1))
    with pytest.raises(ModelError):
        train(model, (x[:0], xa[:0], np.zeros(0, int)), TrainConfig(epochs=1))
    with pytest.raises(ModelError):
        TrainConfig(epochs=0).validate()


def test_minibatches_drop_lone_trailing_sample():
    sizes = [len(b) for b in minibatches(33, 16, np.random.default_rng(0))]
    assert sizes == [16, 16]
    assert sorted(np.concatenate(minibatches(34, 16, np.random.default_rng(0)))) == list(range(34))


def test_same_seed_gives_identical_history():
    data = separable_set(1, n=16)
    runs = []
    for _ in range(2):
        model = LeaModel(*_specs(), 2, seed=4)
        runs.append((train(model, data, TrainConfig(epochs=2, batch_size=8)), model.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k, v in runs[0][1].items():
        assert np.array_equal(v, runs[1][1][k])


def test_total_loss_decreases_on_separable_data():
    # full-batch steps, so the epoch loss is not confounded by minibatch sampling
    decreasing = 0
    for seed in range(10):
        model = LeaModel(*_specs(), 2, seed=seed)
        hist = [h[0] for h in train(model, separable_set(seed), TrainConfig(epochs=10, batch_size=64, seed=seed))]
        decreasing += all(b < a for a, b in zip(hist, hist[1:]))
    assert decreasing >= 8


def test_predict_preserves_order_and_count():
    model = LeaModel(*_specs(), 5, seed=1)
    x, xa, y = separable_set(2, n=20)
    train(model, (x, xa, y), TrainConfig(epochs=1))
    p = predict(model, (x, xa, y), batch_size=7)
    assert p.shape == (20,)
    assert np.array_equal(p[7:14], model.predict(x[7:14], xa[7:14]))

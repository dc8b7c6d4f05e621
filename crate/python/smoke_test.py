"""Smoke test for the ibcnn Python bindings.

Build and install the extension first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/ibcnn-*.whl

Then run `python python/smoke_test.py` or `pytest python/smoke_test.py`.
"""

import math
import os
import tempfile

import numpy as np

import ibcnn


def test_smooth_sign():
    for f, eta in [(0.0, 1.0), (0.3, 0.5), (-2.0, 0.1), (50.0, 1.0)]:
        assert math.isclose(ibcnn.smooth_sign(f, eta), f / math.sqrt(f * f + eta * eta), rel_tol=1e-12)
    assert abs(ibcnn.smooth_sign(1e3, 1e-3)) <= 1.0


def test_estimate_eta_is_scaled_population_std():
    v = np.random.default_rng(0).normal(size=50)
    assert math.isclose(ibcnn.estimate_eta(list(v), 2.0), v.std() / 2.0, rel_tol=1e-12)


def test_adaboost_on_separable_features():
    rng = np.random.default_rng(1)
    y = np.where(rng.random(40) < 0.5, 1.0, -1.0)
    x = rng.normal(size=(40, 6))
    x[:, 3] = y * 2.0 + rng.normal(scale=0.1, size=40)
    h = ibcnn.adaboost_select(x.tolist(), y.tolist())
    assert math.isclose(sum(h.alphas), 1.0, rel_tol=1e-12)
    assert h.active[0][0] == 3
    preds = [1.0 if h.score(row) >= 0 else -1.0 for row in x.tolist()]
    assert ibcnn.f1(preds, y.tolist()) == 1.0
    grads, dthr = h.backward(x.tolist(), y.tolist())
    assert np.asarray(grads).shape == (40, 6) and len(dthr) == 6


def test_incremental_merge_keeps_simplex():
    rng = np.random.default_rng(2)
    inc = ibcnn.IncrementalStrongClassifier(6)
    for _ in range(3):
        y = np.where(rng.random(30) < 0.5, 1.0, -1.0)
        x = rng.normal(size=(30, 6)) + y[:, None] * rng.random(6)
        inc.merge(ibcnn.adaboost_select(x.tolist(), y.tolist(), rounds=3))
    assert inc.iteration == 3
    assert math.isclose(sum(inc.weights), 1.0, rel_tol=1e-12)
    assert inc.active_count == sum(w > 0 for w in inc.weights)


def test_two_afc_matches_pair_count():
    rng = np.random.default_rng(3)
    s = rng.normal(size=30)
    y = np.where(rng.random(30) < 0.4, 1.0, -1.0)
    pos, neg = s[y > 0], s[y < 0]
    pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    assert math.isclose(ibcnn.two_afc(s.tolist(), y.tolist()), pairs / (len(pos) * len(neg)), rel_tol=1e-12)


def test_model_round_trip():
    train = ibcnn.Dataset.synth_blobs(seed=7, n=300)
    test = ibcnn.Dataset.synth_blobs(seed=8, n=100)
    assert len(train) == 300 and train.image_shape == [1, 32, 32]
    model = ibcnn.Model("ibcnn", overrides={"train.epochs": 2, "train.learning_rate": 0.2})
    losses = model.fit(train)
    assert len(losses) == 6 and all(math.isfinite(l) for l in losses)
    report = model.evaluate(test)
    assert 0.0 <= report["f1"] <= 1.0
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ibck")
        model.save(path)
        assert ibcnn.Model.load(path).scores(test) == model.scores(test)
        data = os.path.join(d, "test.ibds")
        test.write(data)
        assert ibcnn.Dataset.read(data).labels == test.labels


def test_errors_are_raised():
    try:
        ibcnn.Model("nope")
    except ibcnn.IbcnnError:
        pass
    else:
        raise AssertionError("unknown head accepted")
    try:
        ibcnn.Model("bcnn").scores(ibcnn.Dataset.synth_blobs(n=10))
    except ibcnn.IbcnnError as e:
        assert "untrained" in str(e)
    else:
        raise AssertionError("untrained head scored")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"ok {name}")

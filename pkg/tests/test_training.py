import json

import numpy as np
import pytest

from cmmlp import data, losses, network, training
from cmmlp.network import ModelConfig
from cmmlp.params import ParamStore
from cmmlp.training import SGD, Adam, Lookahead, NumericError, TrainConfig

TINY = ModelConfig(widths=(2, 2, 4, 4, 4), decoder_channels=2)


@pytest.fixture(scope="module")
def samples():
    return data.generate(data.SynthSpec(seed=0, count=2, size=64))


def quadratic_grads(params, A, target):
    x = params["x"]
    return {"x": A @ (x - target)}


def toy_problem(rng):
    M = rng.normal(size=(4, 4))
    A = M @ M.T + np.eye(4)
    A /= np.linalg.eigvalsh(A).max()
    return A, rng.normal(size=4)


@pytest.mark.parametrize("make_inner", [lambda: SGD(0.1, 0.9), lambda: Adam(0.05)])
def test_lookahead_alpha_one_matches_inner(make_inner, rng):
    A, target = toy_problem(rng)
    p1 = ParamStore({"x": np.zeros(4)})
    p2 = ParamStore({"x": np.zeros(4)})
    plain = make_inner()
    wrapped = Lookahead(make_inner(), p2, k=3, alpha=1.0)
    for _ in range(20):
        plain.step(p1, quadratic_grads(p1, A, target))
        wrapped.step(p2, quadratic_grads(p2, A, target))
        assert p1["x"].tobytes() == p2["x"].tobytes()


def test_lookahead_syncs_every_k(rng):
    p = ParamStore({"x": np.zeros(2)})
    la = Lookahead(SGD(1.0, 0.0), p, k=2, alpha=0.5)
    la.step(p, {"x": np.array([-2.0, 0.0])})
    np.testing.assert_array_equal(p["x"], [2.0, 0.0])
    la.step(p, {"x": np.array([-2.0, 0.0])})
    # fast reached 4; slow moves half way from 0
    np.testing.assert_array_equal(p["x"], [2.0, 0.0])
    np.testing.assert_array_equal(la.slow["x"], [2.0, 0.0])


def test_momentum_sgd_converges_on_quadratic(rng):
    A, target = toy_problem(rng)
    p = ParamStore({"x": np.zeros(4)})
    opt = Lookahead(SGD(0.3, 0.9), p, k=5, alpha=0.5)
    for _ in range(200):
        opt.step(p, quadratic_grads(p, A, target))
    assert np.abs(p["x"] - target).max() < 1e-4


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    norm = training.clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    total = np.sqrt(sum((g ** 2).sum() for g in grads.values()))
    assert total == pytest.approx(1.0)
    untouched = {"a": np.array([0.3])}
    training.clip_by_global_norm(untouched, 1.0)
    assert untouched["a"][0] == 0.3


def test_config_validation():
    for bad in ({"lookahead_k": 0}, {"lookahead_alpha": 0.0}, {"lookahead_alpha": 1.5},
                {"optimizer": "rmsprop"}, {"lr": -1.0}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_zero_lr_leaves_params_unchanged(samples):
    params = network.init_params(TINY, 64, seed=0)
    before = params.copy()
    cfg = TrainConfig(lr=0.0, lookahead_k=1)
    opt = training.make_optimizer(cfg, params)
    params, summary = training.train_step(params, samples, cfg, TINY, opt)
    assert np.isfinite(summary["loss"])
    for k in before:
        assert params[k].tobytes() == before[k].tobytes(), k


def test_train_step_reduces_loss(samples):
    params = network.init_params(TINY, 64, seed=0)
    cfg = TrainConfig(lr=5e-3)
    opt = training.make_optimizer(cfg, params)
    seen = []
    for _ in range(15):
        params, summary = training.train_step(params, samples, cfg, TINY, opt)
        seen.append(summary["loss"])
    assert seen[-1] < seen[0]
    assert len(summary["branches"]) == 4


def test_nan_loss_names_a_tensor(samples):
    params = network.init_params(TINY, 64, seed=0)
    params["dec.down2.b"] = np.array([np.nan], dtype=np.float32)
    cfg = TrainConfig()
    with pytest.raises(NumericError, match="M0"):
        training.train_step(params, samples[:1], cfg, TINY, training.make_optimizer(cfg, params))


def test_empty_batch_rejected():
    params = network.init_params(TINY, 64)
    cfg = TrainConfig()
    with pytest.raises(ValueError):
        training.train_step(params, [], cfg, TINY, training.make_optimizer(cfg, params))


def test_checkpoint_roundtrip_is_bitwise(tmp_path, samples):
    params = network.init_params(TINY, 64, seed=4)
    params.save(tmp_path / "p.cmml")
    loaded = ParamStore.load(tmp_path / "p.cmml")
    assert sorted(loaded) == sorted(params)
    a = training.predict(params, samples[0].image, TINY)
    b = training.predict(loaded, samples[0].image, TINY)
    assert a.tobytes() == b.tobytes()


def test_fit_one_epoch_one_sample(tmp_path, samples):
    cfg = TrainConfig(epochs=1, deterministic=True)
    res = training.fit(samples[:1], samples[:1], cfg, TINY, out_dir=tmp_path)
    assert len(res.history) == 1
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert len(lines) == 1
    record = json.loads(lines[0])
    assert record["epoch"] == 1 and "val_dice" in record and "seconds" not in record
    assert (tmp_path / "checkpoint.cmml").exists() and (tmp_path / "last.cmml").exists()


def test_fit_is_deterministic(tmp_path, samples):
    cfg = TrainConfig(epochs=3, batch_size=1, deterministic=True, augment=True)
    a = training.fit(samples, samples[:1], cfg, TINY, out_dir=tmp_path / "a")
    b = training.fit(samples, samples[:1], cfg, TINY, out_dir=tmp_path / "b")
    assert a.history == b.history
    for name in ("history.jsonl", "checkpoint.cmml", "last.cmml"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fit_keeps_best_checkpoint(samples):
    cfg = TrainConfig(epochs=4, lr=5e-3)
    scores = []
    res = training.fit(samples, samples, cfg, TINY, on_epoch=lambda r: scores.append(r["val_dice"]))
    assert res.best_epoch == int(np.argmax(scores)) + 1
    best = losses.aggregate(training.evaluate(res.params, samples, TINY)).dice
    assert best == pytest.approx(max(scores))


def test_fit_requires_training_data():
    with pytest.raises(ValueError):
        training.fit([], [], TrainConfig(), TINY)


def test_thread_limit_env(monkeypatch):
    monkeypatch.setenv("CMMLP_DETERMINISTIC", "1")
    assert training.deterministic_from_env()
    monkeypatch.setenv("CMMLP_DETERMINISTIC", "0")
    assert not training.deterministic_from_env()
    monkeypatch.setenv("CMMLP_THREADS", "1")
    with training.thread_limits():
        pass

import struct

import numpy as np
import pytest

from seqdepth.errors import (
    CheckpointCorruptError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DatasetTooShortError,
    DimensionMismatchError,
    InvalidConfigError,
    NumericalError,
)
from seqdepth.network import NetworkConfig
from seqdepth.scenegen import GeneratorConfig, make_episode
from seqdepth.training import (
    AdamState,
    TrainConfig,
    adam_step,
    batch_loss,
    evaluate_loss,
    init_train_state,
    l1_loss,
    load_checkpoint,
    read_loss_csv,
    sample_minibatch,
    save_checkpoint,
    sequence_window,
    train,
    updates_per_epoch,
    write_loss_csv,
    _Prepared,
)


@pytest.fixture(scope="module")
def tiny_episodes():
    cfg = GeneratorConfig(frames=12, height=16, width=16, n_boxes=15)
    return [make_episode(cfg, i)[0] for i in range(2)]


def tiny_config(**kw):
    base = dict(seq_len=4, burn_len=4, max_updates=6, seed=3,
                network=NetworkConfig(width_scale=0.0625, height=16, width=16))
    base.update(kw)
    return TrainConfig(**base)


def test_l1_examples(rng):
    assert l1_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0
    assert l1_loss(np.array([1.0, 2.0]), np.array([0.0, 4.0])) == 3
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    assert l1_loss(a, b) == l1_loss(b, a) >= 0


def test_batch_loss(rng):
    a, b = rng.standard_normal(5), rng.standard_normal(5)
    assert batch_loss([a], [b]) == l1_loss(a, b)
    assert batch_loss([np.zeros(2), np.zeros(2)], [np.array([1.0, 1.0]), np.array([2.0, 2.0])]) == 3
    assert batch_loss([a, a], [a, a]) == 0
    ys, yh = [rng.standard_normal(4) for _ in range(5)], [rng.standard_normal(4) for _ in range(5)]
    assert batch_loss(ys, yh) == pytest.approx(batch_loss(ys[::-1], yh[::-1]), rel=1e-15)
    with pytest.raises(DimensionMismatchError):
        batch_loss([a], [a, a])
    with pytest.raises(InvalidConfigError):
        batch_loss([], [])


def test_adam_zero_gradient_no_change():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, s := AdamState())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert s.t == 1


def test_adam_first_step():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState())
    # m_hat = v_hat = 1 at t=1, so the step is -lr / (1 + eps)
    assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert p["w"][0] == pytest.approx(-9.99999995e-4, rel=1e-8)


def test_adam_scale_invariance_steady_state():
    deltas = []
    for g in (1.0, 10.0):
        p, s = {"w": np.array([0.0])}, AdamState()
        for _ in range(3000):
            before = p["w"][0]
            adam_step(p, {"w": np.array([g])}, s)
        deltas.append(abs(p["w"][0] - before))
    assert deltas[0] == pytest.approx(deltas[1], rel=1e-6)


def test_adam_state_invariants(rng):
    p = {"a": rng.standard_normal((2, 3))}
    s = AdamState()
    for i in range(5):
        adam_step(p, {"a": rng.standard_normal((2, 3))}, s)
        assert s.t == i + 1
        assert s.m["a"].shape == s.v["a"].shape == (2, 3)
        assert np.all(s.v["a"] >= 0)


def test_adam_refuses_nonfinite():
    p = {"w": np.zeros(2)}
    with pytest.raises(NumericalError):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, AdamState())
    np.testing.assert_array_equal(p["w"], 0)


def test_window_examples():
    w = sequence_window(0, 40, 32, 32)
    assert (w.burn.start, w.burn.stop, w.train.start, w.train.stop) == (8, 40, 40, 72)
    w = sequence_window(0, 10, 32, 32)
    assert list(w.burn) == list(range(10))


def test_sampler(rng):
    for _ in range(20):
        s = sample_minibatch([32], rng, 32, 32)
        assert s.start == 0 and len(s.burn) == 0
    starts = set()
    for _ in range(500):
        s = sample_minibatch([10, 100, 40], rng, 32, 32)
        assert s.episode in (1, 2)
        n = [10, 100, 40][s.episode]
        assert 0 <= s.start <= n - 32
        assert s.burn.stop == s.train.start and len(s.train) == 32
        starts.add(s.start)
    assert min(starts) == 0 and max(starts) == 68
    with pytest.raises(DatasetTooShortError):
        sample_minibatch([5, 8], rng, 32, 32)


def test_epoch_accounting(tiny_episodes):
    assert updates_per_epoch(24 * 96, 32) == 72
    assert updates_per_epoch(100, 32) == 4
    st = init_train_state(tiny_config(max_updates=None, epochs=2.5), tiny_episodes)
    assert st.updates_per_epoch == 6  # ceil(24 / 4)
    assert st.total_updates == 15


def test_determinism_and_burn_in(tiny_episodes):
    a = train(tiny_config(), tiny_episodes)
    b = train(tiny_config(), tiny_episodes)
    assert [r["train_loss"] for r in a.history] == [r["train_loss"] for r in b.history]
    for k in a.net.params:
        np.testing.assert_array_equal(a.net.params[k], b.net.params[k])
    c = train(tiny_config(burn_len=0), tiny_episodes)
    assert any(not np.array_equal(a.net.params[k], c.net.params[k]) for k in a.net.params)


def test_training_reduces_loss(tiny_episodes):
    ep = tiny_episodes[:1]
    cfg = tiny_config(max_updates=50, lr=3e-3)
    st = init_train_state(cfg, ep)
    prep = _Prepared(ep, st.net.dtype)
    before = evaluate_loss(st.net, prep)
    train(cfg, ep, state=st)
    assert evaluate_loss(st.net, prep) < before


def test_nonfinite_loss_aborts(tiny_episodes):
    st = init_train_state(tiny_config(), tiny_episodes)
    st.net.params["D5.b"][:] = np.nan
    with pytest.raises(NumericalError, match="step 0"):
        train(st.config, tiny_episodes, state=st)


def test_validation_rows(tiny_episodes):
    st = train(tiny_config(val_every=3), tiny_episodes[:1], tiny_episodes[1:])
    vals = [r["val_loss"] for r in st.history]
    assert vals[2] is not None and vals[5] is not None and vals[0] is None


def test_checkpoint_round_trip(tmp_path, tiny_episodes):
    st = train(tiny_config(), tiny_episodes)
    p1, p2 = tmp_path / "a.sqd", tmp_path / "b.sqd"
    save_checkpoint(p1, st)
    ck = load_checkpoint(p1)
    for k, v in st.net.params.items():
        np.testing.assert_array_equal(ck.net.params[k], v)
        np.testing.assert_array_equal(ck.adam.m[k], st.adam.m[k])
        np.testing.assert_array_equal(ck.adam.v[k], st.adam.v[k])
    assert ck.step == st.step and ck.adam.t == st.adam.t
    save_checkpoint(p2, ck.train_state())
    assert p1.read_bytes() == p2.read_bytes()


def test_resume_matches_uninterrupted(tmp_path, tiny_episodes):
    full = train(tiny_config(max_updates=8), tiny_episodes)
    part = train(tiny_config(max_updates=8), tiny_episodes, until=3)
    save_checkpoint(tmp_path / "mid.sqd", part)
    resumed = load_checkpoint(tmp_path / "mid.sqd").train_state()
    resumed.history = list(part.history)
    train(resumed.config, tiny_episodes, state=resumed)
    assert [r["train_loss"] for r in resumed.history] == [r["train_loss"] for r in full.history]
    for k in full.net.params:
        np.testing.assert_array_equal(resumed.net.params[k], full.net.params[k])


def test_checkpoint_errors(tmp_path, tiny_episodes):
    st = init_train_state(tiny_config(), tiny_episodes)
    path = tmp_path / "c.sqd"
    save_checkpoint(path, st)
    data = path.read_bytes()
    (tmp_path / "t1").write_bytes(data[:10])
    (tmp_path / "t2").write_bytes(data[:40])
    (tmp_path / "t3").write_bytes(data[:-4])
    (tmp_path / "magic").write_bytes(b"NOTMAGIC" + data[8:])
    (tmp_path / "trail").write_bytes(data + b"\0\0\0\0")
    n = struct.unpack("<Q", data[8:16])[0]
    header = data[16:16 + n].replace(b'"version": 1', b'"version": 9')
    (tmp_path / "ver").write_bytes(data[:16] + header + data[16 + n:])
    for name in ("t1", "t2", "t3"):
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(tmp_path / name)
    for name in ("magic", "trail"):
        with pytest.raises(CheckpointCorruptError):
            load_checkpoint(tmp_path / name)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "ver")


def test_loss_csv_round_trip(tmp_path, tiny_episodes):
    st = train(tiny_config(val_every=2), tiny_episodes[:1], tiny_episodes[1:])
    write_loss_csv(st.history, tmp_path / "loss.csv")
    rows = read_loss_csv(tmp_path / "loss.csv")
    assert [r["train_loss"] for r in rows] == [r["train_loss"] for r in st.history]
    assert [r["val_loss"] for r in rows] == [r["val_loss"] for r in st.history]
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "step,train_loss,val_loss,wall_ms"

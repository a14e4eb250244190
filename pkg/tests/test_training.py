import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY
from perceparator.data import SeparationBatch, synth_dataset
from perceparator.errors import (
    CheckpointError,
    CorruptChecksum,
    FormatVersionMismatch,
    NonFiniteGradient,
    ShapeMismatch,
    TrainingDiverged,
)
from perceparator.model import init_params
from perceparator.training import (
    AdamPState,
    Checkpoint,
    LrSchedule,
    adamp_step,
    checkpoint_bytes,
    clip_grad_norm,
    evaluate,
    load_checkpoint,
    lr_at,
    parse_checkpoint,
    project_update,
    save_checkpoint,
    train_epoch,
    train_step,
)


def adam_oracle(w, g, m, v, t, lr, b1=0.9, b2=0.999, wd=1e-2, eps=1e-8):
    """Decoupled-weight-decay Adam written out elementwise."""
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    denom = np.sqrt(v) / math.sqrt(1 - b2 ** t) + eps
    w = w * (1 - lr * wd) - (lr / (1 - b1 ** t)) * (m / denom)
    return w, m, v


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(6, seed=4, duration_s=0.01)


class TestAdamP:
    def test_hand_first_step(self):
        w = {"w": np.array([1.0])}
        state = AdamPState(weight_decay=0.0)
        adamp_step(w, {"w": np.array([1.0])}, state, lr=1e-4)
        assert w["w"][0] == 1.0 - 1e-4 / (1 + 1e-8)
        assert state.step == 1

    def test_zero_gradient_keeps_params_and_decays_moments(self, rng):
        w0 = rng.standard_normal((3, 4))
        w = {"w": w0.copy()}
        state = AdamPState(weight_decay=0.0)
        adamp_step(w, {"w": rng.standard_normal((3, 4))}, state, 1e-3)
        before = w["w"].copy()
        m_before = np.abs(state.exp_avg["w"]).sum()
        adamp_step(w, {"w": np.zeros((3, 4))}, state, 1e-3)
        # the update is driven by the first moment, which is still nonzero; with a
        # fresh state zero gradients leave parameters untouched
        fresh = {"w": w0.copy()}
        adamp_step(fresh, {"w": np.zeros((3, 4))}, AdamPState(weight_decay=0.0), 1e-3)
        np.testing.assert_array_equal(fresh["w"], w0)
        assert np.abs(state.exp_avg["w"]).sum() < m_before
        assert not np.array_equal(before, w["w"])

    @given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**16))
    @settings(max_examples=40, deadline=None)
    def test_delta_zero_is_plain_adam(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((rows, cols))
        params = {"w": w.copy(), "b": w[0].copy()}
        state = AdamPState(delta=0.0)
        m, v = np.zeros_like(w), np.zeros_like(w)
        mb, vb = np.zeros(cols), np.zeros(cols)
        ow, ob = w.copy(), w[0].copy()
        for t in range(1, 4):
            g = rng.standard_normal((rows, cols))
            adamp_step(params, {"w": g, "b": g[0]}, state, lr=1e-2)
            ow, m, v = adam_oracle(ow, g, m, v, t, 1e-2)
            ob, mb, vb = adam_oracle(ob, g[0], mb, vb, t, 1e-2)
            np.testing.assert_array_equal(params["w"], ow)
            np.testing.assert_array_equal(params["b"], ob)

    def test_projection_is_orthogonal(self, rng):
        # gradient orthogonal to every row of w forces the channel-wise projection
        w = rng.standard_normal((4, 16))
        g = rng.standard_normal((4, 16))
        g -= w * ((w * g).sum(axis=1, keepdims=True) / (w * w).sum(axis=1, keepdims=True))
        params = {"w": w.copy()}
        state = AdamPState(weight_decay=0.0)
        hit = adamp_step(params, {"w": g}, state, lr=1e-2)
        assert hit["w"]
        dw = params["w"] - w
        cos = np.abs((w * dw).sum()) / (np.linalg.norm(w) * np.linalg.norm(dw))
        assert cos < 1e-6
        row_cos = np.abs((w * dw).sum(1)) / (np.linalg.norm(w, axis=1) * np.linalg.norm(dw, axis=1))
        assert row_cos.max() < 1e-6

    def test_projected_update_removes_radial_part(self, rng):
        w = rng.standard_normal((3, 5))
        u = rng.standard_normal((3, 5))
        g = np.zeros_like(w)
        out, hit = project_update(w, g, u, 0.1, 1e-8)
        assert hit
        assert np.abs((w * out).sum(axis=1)).max() < 1e-6

    def test_aligned_gradient_is_not_projected(self, rng):
        w = rng.standard_normal((3, 5))
        out, hit = project_update(w, w.copy(), w.copy(), 0.1, 1e-8)
        assert not hit and out is not None

    def test_projection_scales_weight_decay(self, rng):
        w = rng.standard_normal((2, 8))
        g = np.zeros_like(w)
        params = {"w": w.copy()}
        adamp_step(params, {"w": g}, AdamPState(weight_decay=0.5, wd_ratio=0.1), lr=0.1)
        np.testing.assert_allclose(params["w"], w * (1 - 0.1 * 0.5 * 0.1))

    def test_errors(self):
        with pytest.raises(ShapeMismatch):
            adamp_step({"w": np.ones(3)}, {"w": np.ones(2)}, AdamPState(), 1e-3)
        with pytest.raises(NonFiniteGradient):
            adamp_step({"w": np.ones(3)}, {"w": np.array([1.0, np.nan, 0])}, AdamPState(), 1e-3)


class TestSchedule:
    def test_examples(self):
        s = LrSchedule()
        assert lr_at(s, 0) == 1e-4
        assert lr_at(s, 63) == 1e-4
        assert lr_at(s, 64) == 5e-5
        assert lr_at(s, 200) == 1e-4 * 2.0**-3 == 1.25e-5

    @given(st.integers(1, 50), st.integers(0, 500))
    def test_non_increasing(self, interval, epoch):
        s = LrSchedule(1e-3, interval)
        assert lr_at(s, epoch + 1) <= lr_at(s, epoch)

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(grads, 1.0) == 5.0
        assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0, abs=1e-6)
        untouched = {"a": np.array([0.3])}
        clip_grad_norm(untouched, 1.0)
        assert untouched["a"][0] == 0.3


class TestTraining:
    def test_zero_lr_leaves_params_bit_identical(self, tiny_data):
        params = init_params(TINY, seed=0)
        before = {k: v.copy() for k, v in params.arrays().items()}
        train_epoch(params, TINY, tiny_data, AdamPState(), LrSchedule(0.0), 0, batch_size=3)
        for k, v in params.arrays().items():
            np.testing.assert_array_equal(v, before[k])

    def test_same_seed_same_metrics(self, tiny_data):
        runs = []
        for _ in range(2):
            params, state = init_params(TINY, seed=1), AdamPState()
            runs.append([train_epoch(params, TINY, tiny_data, state, LrSchedule(1e-3), e,
                                     seed=5, batch_size=2) for e in range(2)])
        assert runs[0] == runs[1]

    def test_metrics_are_consistent_with_evaluation(self, tiny_data):
        params = init_params(TINY, seed=2)
        gains = evaluate(params, TINY, tiny_data)
        assert gains.shape == (len(tiny_data),)
        assert np.isfinite(gains).all()

    def test_train_step_returns_per_item_gains(self, tiny_data):
        params = init_params(TINY, seed=2)
        loss, gains = train_step(params, TINY, tiny_data.mixtures[:3], tiny_data.references[:3],
                                 AdamPState(), 1e-3)
        assert gains.shape == (3,) and np.isfinite(loss)

    def test_non_finite_batch_reports_index(self, tiny_data):
        params = init_params(TINY, seed=0)
        bad = SeparationBatch(tiny_data.mixtures.copy(), tiny_data.references, 8000)
        bad.mixtures[4, 0] = np.inf
        with pytest.raises(TrainingDiverged) as info:
            train_epoch(params, TINY, bad, AdamPState(), LrSchedule(1e-3), 0, seed=0,
                        batch_size=1)
        order = np.random.default_rng([0, 0]).permutation(len(bad))
        assert info.value.batch_index == int(np.where(order == 4)[0][0])

    def test_loss_decreases_on_toy_task(self):
        data = synth_dataset(16, seed=0, duration_s=0.05)
        cfg = TINY.replace(channels=16, heads=2, chunk_size=20)
        params, state = init_params(cfg, seed=0), AdamPState()
        losses = [train_epoch(params, cfg, data, state, LrSchedule(3e-3), e, batch_size=4).loss
                  for e in range(5)]
        assert losses[4] < losses[0]


class TestCheckpoint:
    @pytest.fixture
    def trained(self, tiny_data):
        params, state = init_params(TINY, seed=0), AdamPState()
        train_epoch(params, TINY, tiny_data, state, LrSchedule(1e-3), 0, seed=3, batch_size=3)
        return params, state

    def test_round_trip_bit_exact(self, tmp_path, trained):
        params, state = trained
        ckpt = Checkpoint.from_training(TINY, params, state, 1, 3, {"note": "x y"})
        save_checkpoint(tmp_path / "a.pcpr", ckpt)
        back = load_checkpoint(tmp_path / "a.pcpr")
        assert back.config == TINY and back.epoch == 1 and back.seed == 3
        assert back.extra == {"note": "x y"}
        assert back.optimizer.step == state.step
        for k, v in params.arrays().items():
            assert back.params[k].dtype == np.float32
            np.testing.assert_array_equal(back.params[k], v)
            np.testing.assert_array_equal(back.optimizer.exp_avg[k], state.exp_avg[k])
            np.testing.assert_array_equal(back.optimizer.exp_avg_sq[k], state.exp_avg_sq[k])
        assert checkpoint_bytes(back) == checkpoint_bytes(ckpt)

    def test_layout(self, trained):
        params, state = trained
        data = checkpoint_bytes(Checkpoint.from_training(TINY, params, state, 1, 0))
        assert data[:4] == b"PCPR"
        assert struct.unpack("<I", data[4:8])[0] == 1
        n = struct.unpack("<I", data[8:12])[0]
        header = data[12:12 + n].decode("utf-8")
        assert "channels = 8" in header and "state.epoch = 1" in header
        assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])
        count = struct.unpack("<I", data[12 + n:16 + n])[0]
        assert count == 3 * len(params.arrays())

    def test_resume_matches_uninterrupted(self, tmp_path, tiny_data):
        sched = LrSchedule(1e-3)
        params, state = init_params(TINY, seed=0), AdamPState()
        train_epoch(params, TINY, tiny_data, state, sched, 0, seed=1, batch_size=2)
        save_checkpoint(tmp_path / "c.pcpr", Checkpoint.from_training(TINY, params, state, 1, 1))
        straight = [train_epoch(params, TINY, tiny_data, state, sched, e, seed=1, batch_size=2)
                    for e in (1, 2)]
        ck = load_checkpoint(tmp_path / "c.pcpr")
        p2, s2 = ck.build_params(), ck.optimizer
        resumed = [train_epoch(p2, TINY, tiny_data, s2, sched, e, seed=ck.seed, batch_size=2)
                   for e in (1, 2)]
        assert resumed == straight
        for k, v in params.arrays().items():
            np.testing.assert_array_equal(p2.arrays()[k], v)

    @pytest.mark.parametrize("cut", [0, 3, 11, 40, -5, -1])
    def test_truncation_detected(self, trained, cut):
        params, state = trained
        data = checkpoint_bytes(Checkpoint.from_training(TINY, params, state, 1, 0))
        with pytest.raises(CorruptChecksum):
            parse_checkpoint(data[:cut])

    def test_bit_flip_detected(self, trained):
        params, state = trained
        data = bytearray(checkpoint_bytes(Checkpoint.from_training(TINY, params, state, 1, 0)))
        data[len(data) // 2] ^= 0x10
        with pytest.raises(CorruptChecksum):
            parse_checkpoint(bytes(data))

    def test_version_and_magic(self, trained):
        params, state = trained
        data = bytearray(checkpoint_bytes(Checkpoint.from_training(TINY, params, state, 1, 0)))
        data[4:8] = struct.pack("<I", 2)
        body = bytes(data[:-4])
        with pytest.raises(FormatVersionMismatch):
            parse_checkpoint(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(CheckpointError):
            parse_checkpoint(b"RIFF" + bytes(data[4:]))

    def test_failed_write_leaves_no_file(self, tmp_path, trained, monkeypatch):
        params, state = trained
        import perceparator.training as tr

        def boom(*_):
            raise OSError("disk full")

        monkeypatch.setattr(tr.os, "replace", boom)
        with pytest.raises(OSError):
            save_checkpoint(tmp_path / "d.pcpr", Checkpoint.from_training(TINY, params, state, 1, 0))
        assert list(tmp_path.iterdir()) == []

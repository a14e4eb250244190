import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL, TINY, tree_inputs
from perceparator import tensor as T
from perceparator.errors import InputTooShort, InvalidConfig, LayoutMismatch, ShapeMismatch
from perceparator.model import (
    ModelConfig,
    add_positional,
    chunk,
    count_params,
    decode,
    encode,
    forward,
    init_params,
    make_layout,
    masking_forward,
    overlap_add,
    positional_table,
    separate,
)
from perceparator.tensor import Tensor, grad_check


@pytest.fixture(scope="module")
def small_params():
    return init_params(SMALL, seed=3)


class TestConfig:
    @pytest.mark.parametrize("changes", [
        {"heads": 3}, {"chunk_size": 0}, {"latent_len": 0}, {"n_blocks": 0},
        {"n_speakers": 1}, {"overlap": "quarter"}, {"overlap": "half", "chunk_size": 7},
    ])
    def test_rejects_invalid(self, changes):
        with pytest.raises(InvalidConfig):
            ModelConfig(**changes)

    def test_defaults(self):
        c = ModelConfig()
        assert (c.channels, c.kernel_size, c.stride, c.padding) == (256, 3, 1, 0)
        assert (c.chunk_size, c.overlap, c.n_blocks, c.heads) == (250, "none", 15, 16)
        assert c.ffw_width == 256 and c.hop == 250


class TestEncoder:
    def test_default_length(self):
        params = init_params(ModelConfig(n_blocks=1), seed=0)
        e = encode(Tensor(np.zeros((1, 16000))), params, ModelConfig())
        assert e.shape == (256, 15998)

    def test_zero_input_gives_relu_of_bias(self):
        params = init_params(TINY, seed=0)
        params.encoder_b.data = np.linspace(-1, 1, 8).astype(np.float32)
        e = encode(Tensor(np.zeros((1, 20))), params, TINY).data
        np.testing.assert_array_equal(e, np.broadcast_to(np.maximum(params.encoder_b.data, 0)[:, None],
                                                         (8, 18)))

    def test_non_negative(self, rng):
        params = init_params(TINY, seed=0)
        assert encode(Tensor(rng.standard_normal((1, 50))), params, TINY).data.min() >= 0

    def test_too_short(self):
        with pytest.raises(InputTooShort):
            encode(Tensor(np.zeros((1, 2))), init_params(TINY, seed=0), TINY)


class TestChunking:
    @pytest.mark.parametrize("length,overlap,hop,n_chunks,pad", [
        (500, "none", 250, 2, 0),
        (600, "none", 250, 3, 150),
        (500, "half", 125, 3, 0),
        (1, "none", 250, 1, 249),
        (250, "half", 125, 1, 0),
    ])
    def test_layout_examples(self, length, overlap, hop, n_chunks, pad):
        lay = make_layout(length, 250, overlap)
        assert (lay.hop, lay.n_chunks, lay.pad_len) == (hop, n_chunks, pad)

    @given(st.integers(1, 400), st.integers(1, 60), st.sampled_from(["none", "half"]))
    @settings(max_examples=100, deadline=None)
    def test_layout_invariants(self, length, c, overlap):
        if overlap == "half" and c % 2:
            c += 1
        lay = make_layout(length, c, overlap)
        assert lay.hop * (lay.n_chunks - 1) + c >= length + lay.pad_len
        assert 0 <= lay.pad_len < lay.hop + c
        assert lay.padded_length == length + lay.pad_len

    def test_odd_chunk_with_half_overlap(self):
        with pytest.raises(InvalidConfig):
            chunk(Tensor(np.zeros((4, 20))), 7, "half")

    def test_chunk_shape_and_content(self, rng):
        y = rng.standard_normal((3, 600))
        h, lay = chunk(Tensor(y), 250)
        assert h.shape == (3, 250, 3)
        np.testing.assert_array_equal(h.data[1, :, 0], y[0, 250:500].astype(np.float32))
        np.testing.assert_array_equal(h.data[2, 100:], 0)

    @given(st.integers(1, 300), st.integers(1, 40))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_exact_without_overlap(self, length, c):
        y = np.random.default_rng(length).standard_normal((3, length)).astype(np.float32)
        h, lay = chunk(Tensor(y), c)
        np.testing.assert_array_equal(overlap_add(h, lay).data, y)

    def test_round_trip_half_overlap(self, rng):
        y = rng.standard_normal((4, 500))
        with T.default_dtype(np.float64):
            h, lay = chunk(Tensor(y), 250, "half")
            back = overlap_add(h, lay).data
        assert np.abs(back - y).max() <= 1e-6

    @given(st.integers(1, 300), st.sampled_from([2, 4, 10, 30]))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_half_overlap_any_length(self, length, c):
        y = np.random.default_rng(length).standard_normal((2, length)).astype(np.float32)
        h, lay = chunk(Tensor(y), c, "half")
        assert np.abs(overlap_add(h, lay).data - y).max() <= 1e-6

    def test_all_ones_half_overlap(self):
        lay = make_layout(500, 250, "half")
        out = overlap_add(Tensor(np.ones((lay.n_chunks, 250, 2))), lay)
        np.testing.assert_array_equal(out.data, np.ones((2, 500)))

    def test_layout_mismatch(self):
        lay = make_layout(500, 250)
        with pytest.raises(LayoutMismatch):
            overlap_add(Tensor(np.ones((3, 250, 2))), lay)


class TestPositional:
    def test_position_zero(self):
        pe = positional_table(10, 8)
        np.testing.assert_array_equal(pe[0, 0::2], 0)
        np.testing.assert_array_equal(pe[0, 1::2], 1)

    def test_not_idempotent_and_shared_across_chunks(self, rng):
        h = Tensor(rng.standard_normal((2, 5, 4)))
        once = add_positional(h)
        twice = add_positional(once)
        assert not np.array_equal(once.data, twice.data)
        on_zeros = add_positional(Tensor(np.zeros((2, 5, 4)))).data
        np.testing.assert_array_equal(on_zeros[0], on_zeros[1])

    def test_table_is_read_only(self):
        with pytest.raises(ValueError):
            positional_table(4, 4)[0, 0] = 1.0

    def test_odd_width(self):
        pe = positional_table(3, 5)
        assert pe.shape == (3, 5) and np.all(pe[0, 0::2] == 0)


class TestMaskingNetwork:
    @pytest.mark.parametrize("length", [1, 7, 20, 53])
    def test_shapes_and_non_negative(self, small_params, length, rng):
        e = Tensor(np.abs(rng.standard_normal((16, length))))
        m = masking_forward(e, small_params, SMALL)
        assert m.shape == (2, 16, length)
        assert m.data.min() >= 0

    def test_batched_matches_single(self, small_params, rng):
        e = np.abs(rng.standard_normal((3, 16, 45)))
        batched = masking_forward(Tensor(e), small_params, SMALL).data
        for b in range(3):
            single = masking_forward(Tensor(e[b]), small_params, SMALL).data
            np.testing.assert_allclose(batched[b], single, atol=1e-5)

    def test_chunk_processing_order_is_irrelevant(self, small_params, rng):
        # with no overlap and an exact chunk grid every chunk is processed independently
        c = SMALL.chunk_size
        e = np.abs(rng.standard_normal((16, 3 * c)))
        order = [2, 0, 1]
        shuffled = np.concatenate([e[:, i * c:(i + 1) * c] for i in order], axis=1)
        a = masking_forward(Tensor(e), small_params, SMALL).data
        b = masking_forward(Tensor(shuffled), small_params, SMALL).data
        for pos, i in enumerate(order):
            np.testing.assert_allclose(b[..., pos * c:(pos + 1) * c], a[..., i * c:(i + 1) * c],
                                       atol=1e-5)

    def test_channel_mismatch(self, small_params):
        with pytest.raises(ShapeMismatch):
            masking_forward(Tensor(np.ones((8, 10))), small_params, SMALL)

    def test_gradient_tiny(self, rng):
        params = init_params(TINY, seed=1, dtype=np.float64)
        arrays, rebuild = tree_inputs(params)
        arrays["e"] = np.abs(rng.standard_normal((8, 23)))

        def f(d):
            return masking_forward(d["e"], rebuild(d), TINY)

        rep = grad_check(f, arrays)
        assert rep.max_error < 1e-3, rep


class TestDecoder:
    def test_identity_mask(self, rng):
        params = init_params(TINY, seed=0)
        e = Tensor(np.abs(rng.standard_normal((8, 30))))
        out = decode(Tensor(np.ones((2, 8, 30))), e, params, TINY).data
        ref = T.conv1d_transpose(e, params.decoder_w, params.decoder_b).data[0]
        np.testing.assert_array_equal(out[0], ref)
        np.testing.assert_array_equal(out[1], ref)

    def test_zero_mask_gives_bias(self, rng):
        params = init_params(TINY, seed=0)
        params.decoder_b.data = np.array([0.125], dtype=np.float32)
        e = Tensor(np.abs(rng.standard_normal((8, 30))))
        out = decode(Tensor(np.zeros((2, 8, 30))), e, params, TINY).data
        np.testing.assert_array_equal(out, np.full((2, 32), 0.125, dtype=np.float32))

    def test_restores_default_length(self):
        cfg = ModelConfig(n_blocks=1)
        params = init_params(cfg, seed=0)
        out = decode(Tensor(np.zeros((2, 256, 15998))), Tensor(np.zeros((256, 15998))),
                     params, cfg)
        assert out.shape == (2, 16000)

    def test_mask_shape_checked(self):
        params = init_params(TINY, seed=0)
        with pytest.raises(ShapeMismatch):
            decode(Tensor(np.ones((2, 8, 29))), Tensor(np.ones((8, 30))), params, TINY)


class TestForward:
    @pytest.mark.parametrize("length", [3, 100, 4000, 16000])
    def test_output_lengths(self, small_params, length):
        x = Tensor(np.random.default_rng(length).standard_normal((1, length)) * 0.1)
        out = forward(x, small_params, SMALL)
        assert out.shape == (1, SMALL.n_speakers, length)

    @pytest.mark.parametrize("cfg", [
        TINY.replace(stride=2, padding=1),
        TINY.replace(kernel_size=4, stride=2),
        TINY.replace(overlap="half", n_speakers=3),
    ])
    def test_output_lengths_other_encoders(self, cfg):
        params = init_params(cfg, seed=0)
        for length in (5, 37, 64):
            out = forward(Tensor(np.ones((2, length))), params, cfg)
            assert out.shape == (2, cfg.n_speakers, length)

    def test_zero_input_zero_biases_zero_output(self, small_params):
        out = forward(Tensor(np.zeros((1, 300))), small_params, SMALL)
        np.testing.assert_array_equal(out.data, 0)

    def test_deterministic(self, small_params, rng):
        x = rng.standard_normal(400)
        np.testing.assert_array_equal(separate(x, small_params, SMALL),
                                      separate(x, small_params, SMALL))

    def test_rank_checked(self, small_params):
        with pytest.raises(ShapeMismatch):
            forward(Tensor(np.zeros(10)), small_params, SMALL)


class TestParameters:
    def test_same_seed_same_params(self):
        a, b = init_params(TINY, seed=9), init_params(TINY, seed=9)
        for (na, ta), (nb, tb) in zip(a.named(), b.named()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)
        c = init_params(TINY, seed=10)
        assert not np.array_equal(a.latent.data, c.latent.data)

    def test_latent_distribution(self):
        cfg = ModelConfig(channels=256, latent_len=64, n_blocks=1)
        lat = init_params(cfg, seed=0).latent.data
        assert lat.size >= 10_000
        assert lat.min() >= -2 and lat.max() <= 2
        assert abs(lat.std() - 0.02) <= 0.1 * 0.02

    def test_count_linear_in_blocks(self):
        counts = [count_params(init_params(TINY.replace(n_blocks=n), seed=0)) for n in (1, 2, 3, 4)]
        diffs = np.diff(counts)
        assert len(set(diffs)) == 1

    def test_shared_blocks(self):
        shared = init_params(TINY.replace(n_blocks=4, share_blocks=True), seed=0)
        single = init_params(TINY.replace(n_blocks=1), seed=0)
        assert count_params(shared) == count_params(single)
        out = forward(Tensor(np.ones((1, 40))), shared, TINY.replace(n_blocks=4, share_blocks=True))
        assert out.shape == (1, 2, 40)

    def test_per_block_count_formula(self):
        f = 256
        one = count_params(init_params(ModelConfig(n_blocks=1), seed=0))
        two = count_params(init_params(ModelConfig(n_blocks=2), seed=0))
        # two MHA sublayers plus three layer norms
        assert two - one == 2 * (4 * f * f + 4 * f) + 3 * 2 * f

    def test_astype_and_load_arrays(self):
        p = init_params(TINY, seed=0)
        q = p.astype(np.float64)
        assert q.latent.dtype == np.float64
        r = init_params(TINY, seed=5)
        r.load_arrays(p.arrays())
        np.testing.assert_array_equal(r.in_w.data, p.in_w.data)
        with pytest.raises(ShapeMismatch):
            r.load_arrays({})

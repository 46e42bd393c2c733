"""Decoder behavior: permutation invariance, pruning inertness, persistence."""

import numpy as np
import pytest

from voxloc import diffcore as dc
from voxloc.containers import FormatError
from voxloc.decoder import (DecoderParams, attention_scores, decode,
                            encode_feature, params_from_bytes,
                            params_to_bytes)
from voxloc.diffcore import DTensor, DimensionError, Tape
from voxloc.scene import CodeBank

T, N, D, DRAW = 3, 5, 16, 24


def make_params(seed=0, num_blocks=T, d=D, d_raw=DRAW, encoder_hidden=8):
    return DecoderParams.init(np.random.default_rng(seed), d_raw=d_raw, d=d,
                              num_blocks=num_blocks,
                              encoder_hidden=encoder_hidden,
                              block_hidden=8, head_hidden=8)


def make_bank(seed=1, t=T, n=N, d=D, scale_std=0.3):
    rng = np.random.default_rng(seed)
    bank = CodeBank.init(t, n, d, rng, "v")
    for bt in range(t):
        bank.codes[bt].values[...] = rng.normal(size=(n, d))
        bank.scales[bt].values[...] = 1.0 + rng.normal(size=(n, 1)) * scale_std
    return bank


def run_decode(params, bank, feats_raw):
    feats = encode_feature(None, params, dc.constant(feats_raw))
    return decode(None, params, feats, bank, np.zeros(3))


class TestPermutationInvariance:
    def test_decode_bit_identical_under_row_permutation(self):
        params = make_params()
        bank = make_bank()
        raw = np.random.default_rng(2).normal(size=(7, DRAW))
        base = run_decode(params, bank, raw)
        for seed in range(3):
            rng = np.random.default_rng(seed + 10)
            shuffled = make_bank()
            for bt in range(T):
                perm = rng.permutation(N)
                shuffled.codes[bt].values[...] = bank.codes[bt].values[perm]
                shuffled.scales[bt].values[...] = bank.scales[bt].values[perm]
                shuffled.pruned[bt] = bank.pruned[bt][perm]
            out = run_decode(params, shuffled, raw)
            assert np.array_equal(base.local.values, out.local.values)
            assert np.array_equal(base.confidence.values,
                                  out.confidence.values)

    def test_gradients_follow_the_permutation(self):
        params = make_params()
        raw = np.random.default_rng(3).normal(size=(4, DRAW))
        perm = np.random.default_rng(4).permutation(N)

        def grads(bank):
            tape = Tape()
            feats = encode_feature(tape, params, dc.constant(raw))
            res = decode(tape, params, feats, bank, np.zeros(3))
            loss = dc.sum_all(tape, res.local)
            tape.backward(loss)
            return bank

        a = grads(make_bank())
        b = make_bank()
        for bt in range(T):
            b.codes[bt].values[...] = a.codes[bt].values[perm]
            b.scales[bt].values[...] = a.scales[bt].values[perm]
        b = grads(b)
        for bt in range(T):
            assert np.array_equal(a.codes[bt].grad[perm], b.codes[bt].grad)
            assert np.array_equal(a.scales[bt].grad[perm], b.scales[bt].grad)


class TestPrunedCodes:
    def test_zero_scale_row_is_inert(self):
        params = make_params()
        raw = np.random.default_rng(5).normal(size=(6, DRAW))
        bank = make_bank()
        for bt in range(T):
            bank.scales[bt].values[2, 0] = 0.0
        # physically removing the row must give bit-identical outputs
        smaller = make_bank(n=N - 1)
        keep = [i for i in range(N) if i != 2]
        for bt in range(T):
            smaller.codes[bt].values[...] = bank.codes[bt].values[keep]
            smaller.scales[bt].values[...] = bank.scales[bt].values[keep]
        a = run_decode(params, bank, raw)
        b = run_decode(params, smaller, raw)
        assert np.array_equal(a.local.values, b.local.values)
        assert np.array_equal(a.confidence.values, b.confidence.values)

    def test_pruned_mask_excludes_rows(self):
        params = make_params()
        raw = np.random.default_rng(6).normal(size=(6, DRAW))
        a = make_bank()
        a.pruned[0][3] = True
        b = make_bank()
        b.scales[0].values[3, 0] = 0.0
        out_a = run_decode(params, a, raw)
        out_b = run_decode(params, b, raw)
        assert np.array_equal(out_a.local.values, out_b.local.values)

    def test_fully_pruned_block_is_identity_skip(self):
        params = make_params()
        raw = np.random.default_rng(7).normal(size=(6, DRAW))
        bank = make_bank()
        bank.pruned[1][:] = True
        res = run_decode(params, bank, raw)
        assert res.stats.skipped_blocks == [1]

    def test_pruned_rows_get_no_gradient(self):
        params = make_params()
        raw = np.random.default_rng(8).normal(size=(4, DRAW))
        bank = make_bank()
        bank.pruned[0][1] = True
        tape = Tape()
        feats = encode_feature(tape, params, dc.constant(raw))
        res = decode(tape, params, feats, bank, np.zeros(3))
        tape.backward(dc.sum_all(tape, res.local))
        assert np.all(bank.codes[0].grad[1] == 0.0)
        assert np.all(bank.scales[0].grad[1] == 0.0)
        assert np.any(bank.codes[0].grad[0] != 0.0)


class TestDecodeShape:
    def test_output_shapes_and_ranges(self):
        params = make_params()
        raw = np.random.default_rng(9).normal(size=(11, DRAW))
        res = run_decode(params, make_bank(), raw)
        assert res.local.shape == (11, 3)
        assert res.confidence.shape == (11, 1)
        assert np.all((res.confidence.values > 0)
                      & (res.confidence.values < 1))

    def test_world_adds_origin(self):
        params = make_params()
        raw = np.random.default_rng(10).normal(size=(3, DRAW))
        feats = encode_feature(None, params, dc.constant(raw))
        origin = np.array([4.0, -2.0, 6.0])
        res = decode(None, params, feats, make_bank(), origin)
        np.testing.assert_array_equal(res.world(), res.local.values + origin)

    def test_dimension_mismatches_raise(self):
        params = make_params()
        with pytest.raises(DimensionError):
            encode_feature(None, params, dc.constant(np.zeros((2, DRAW + 1))))
        feats = dc.constant(np.zeros((2, D + 1)))
        with pytest.raises(DimensionError):
            decode(None, params, feats, make_bank(), np.zeros(3))
        feats = dc.constant(np.zeros((2, D)))
        with pytest.raises(DimensionError):
            decode(None, params, feats, make_bank(d=D + 2), np.zeros(3))


class TestLinearEncoder:
    def test_hidden_zero_is_single_affine(self):
        params = make_params(encoder_hidden=0)
        assert len(params.encoder.weights) == 1
        raw = np.random.default_rng(11).normal(size=(5, DRAW))
        out = encode_feature(None, params, dc.constant(raw))
        ref = raw @ params.encoder.weights[0].values \
            + params.encoder.biases[0].values
        np.testing.assert_array_equal(out.values, ref)

    def test_roundtrips_through_bytes(self):
        params = make_params(encoder_hidden=0)
        loaded = params_from_bytes(params_to_bytes(params))
        assert loaded.encoder_hidden == 0
        assert len(loaded.encoder.weights) == 1


class TestAttentionScores:
    def test_matches_manual_softmax_column(self):
        params = make_params()
        bank = make_bank()
        raw = np.random.default_rng(12).normal(size=(9, DRAW))
        feats = encode_feature(None, params, dc.constant(raw))
        s, s_norm = attention_scores(params, feats, bank, block=0, code=2)
        assert s.shape == (9,)
        assert abs(s_norm.min()) == 0.0 and s_norm.max() == 1.0
        # scores are probabilities from a softmax row: all in (0, 1)
        assert np.all((s > 0) & (s < 1))

    def test_pruned_code_rejected(self):
        params = make_params()
        bank = make_bank()
        bank.pruned[0][2] = True
        feats = encode_feature(None, params, dc.constant(
            np.zeros((2, DRAW))))
        with pytest.raises(ValueError):
            attention_scores(params, feats, bank, block=0, code=2)

    def test_identical_rows_give_flat_normalization(self):
        params = make_params()
        bank = make_bank()
        raw = np.tile(np.random.default_rng(13).normal(size=(1, DRAW)), (4, 1))
        feats = encode_feature(None, params, dc.constant(raw))
        s, s_norm = attention_scores(params, feats, bank, block=0, code=1)
        assert np.allclose(s, s[0])
        np.testing.assert_array_equal(s_norm, np.zeros(4))


class TestWeightsPersistence:
    def test_roundtrip_byte_identical(self):
        params = make_params()
        blob = params_to_bytes(params)
        again = params_to_bytes(params_from_bytes(blob))
        assert blob == again

    def test_roundtrip_values_f32_quantized(self):
        params = make_params()
        loaded = params_from_bytes(params_to_bytes(params))
        for name, p in params.named_parameters().items():
            np.testing.assert_array_equal(
                p.values.astype("<f4"),
                loaded.named_parameters()[name].values.astype("<f4"))

    def test_bad_magic(self):
        blob = bytearray(params_to_bytes(make_params()))
        blob[:4] = b"ZZZZ"
        with pytest.raises(FormatError):
            params_from_bytes(bytes(blob))

    def test_truncated(self):
        blob = params_to_bytes(make_params())
        with pytest.raises(FormatError):
            params_from_bytes(blob[:-3])

    def test_loaded_grads_are_zero(self):
        loaded = params_from_bytes(params_to_bytes(make_params()))
        for p in loaded.named_parameters().values():
            assert np.all(p.grad == 0.0)

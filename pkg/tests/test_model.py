import math

import numpy as np
import pytest

from diffrec import engine
from diffrec.data import PAD_ID
from diffrec.diffusion import HiddenSequence
from diffrec.model import (FORWARD_COUNTER, DsrConfig, assemble_input, denoise,
                           init_params, step_embedding)
from diffrec.rng import RngStreams
from diffrec.schedule import make_schedule
from diffrec.training import compute_loss

from conftest import finite_diff

TINY = DsrConfig(dim=8, seq_len=4, layers=1, heads=2, dropout=0.0, steps=16,
                 schedule="sqrt")


def tiny_params(seed=0, vocab=20, dtype=np.float32, config=TINY):
    rng = RngStreams(seed).get("init")
    return init_params(config, vocab, rng, dtype=dtype)


class TestStepEmbedding:
    def test_step_zero_alternates(self):
        z = step_embedding(0, 10)
        np.testing.assert_array_equal(z, np.tile([0.0, 1.0], 5))

    def test_step_one_width_four(self):
        z = step_embedding(1, 4)
        expected = [math.sin(1.0), math.cos(1.0), math.sin(0.01), math.cos(0.01)]
        np.testing.assert_allclose(z, expected, rtol=1e-12)
        np.testing.assert_allclose(z, [0.84147, 0.54030, 0.0100, 0.99995], atol=5e-5)

    def test_distinct_steps_are_separated(self, rng):
        steps = np.unique(np.concatenate([np.arange(200),
                                          rng.integers(0, 10001, size=200)]))
        z = step_embedding(steps, 64)
        for i in range(len(steps)):
            gaps = np.abs(z[i + 1:] - z[i]).max(axis=1)
            assert (gaps > 1e-6).all()

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            step_embedding(3, 7)


class TestAssembleInput:
    def test_both_flags_off_is_identity(self, rng):
        params = tiny_params()
        cfg = DsrConfig(**{**TINY.__dict__, "use_position_embedding": False,
                           "use_step_embedding": False})
        h = rng.standard_normal((4, 8)).astype(np.float32)
        np.testing.assert_array_equal(assemble_input(h, 5, params, cfg), h)

    def test_zero_hidden_without_positions(self):
        params = tiny_params()
        cfg = DsrConfig(**{**TINY.__dict__, "use_position_embedding": False})
        out = assemble_input(np.zeros((4, 8), dtype=np.float32), 3, params, cfg)
        z = step_embedding(3, 8)
        for row in out:
            np.testing.assert_allclose(row, z, rtol=1e-6)

    def test_sum_of_three_parts(self, rng):
        params = tiny_params()
        h = rng.standard_normal((4, 8)).astype(np.float32)
        out = assemble_input(h, 6, params, TINY)
        expected = (h.astype(np.float64)
                    + params["position_embedding"].data
                    + step_embedding(6, 8))
        np.testing.assert_allclose(out, expected, atol=1e-7)

    def test_accepts_hidden_sequence(self, rng):
        params = tiny_params()
        h = HiddenSequence(values=rng.standard_normal((4, 8)).astype(np.float32), step=2)
        np.testing.assert_array_equal(assemble_input(h, None, params, TINY),
                                      assemble_input(h.values, 2, params, TINY))


class TestInitParams:
    def test_seed_determinism(self):
        a, b = tiny_params(seed=3), tiny_params(seed=3)
        for name in a.names():
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_different_seeds_differ(self):
        a, b = tiny_params(seed=3), tiny_params(seed=4)
        assert not np.array_equal(a["item_embedding"].data, b["item_embedding"].data)

    def test_shape_contract(self):
        params = tiny_params(vocab=10)
        assert params["item_embedding"].shape == (10, 8)
        assert params["output.w"].shape == (10, 8)
        assert params["output.b"].shape == (10,)
        assert params["position_embedding"].shape == (4, 8)

    def test_vocab_floor(self):
        with pytest.raises(ValueError):
            tiny_params(vocab=2)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DsrConfig(dim=10, heads=3).validate()
        with pytest.raises(ValueError):
            DsrConfig(dropout=1.0).validate()


class TestDenoise:
    def test_eval_mode_deterministic(self, rng):
        params = tiny_params()
        h = rng.standard_normal((4, 8)).astype(np.float32)
        ids = np.array([2, 5, 7, 1])
        a = denoise(h, 3, params, ids)
        b = denoise(h, 3, params, ids)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (8,)

    def test_batched_matches_single(self, rng):
        params = tiny_params()
        h = rng.standard_normal((3, 4, 8)).astype(np.float32)
        ids = rng.integers(2, 20, size=(3, 4))
        batched = denoise(h, np.array([1, 5, 9]), params, ids)
        for i, n in enumerate((1, 5, 9)):
            np.testing.assert_allclose(batched[i], denoise(h[i], n, params, ids[i]),
                                       atol=1e-6)

    def test_order_sensitivity_with_position_embedding(self, rng):
        # randomize position and item embeddings at unit-ish scale (the 0.02
        # init makes the effect vanish below float32 resolution)
        params = tiny_params(dtype=np.float64)
        params["position_embedding"].data[...] = rng.standard_normal((4, 8)) * 0.5
        params["item_embedding"].data[...] = rng.standard_normal((20, 8)) * 0.5
        ids = np.array([4, 9, 6, 3])
        swapped = ids.copy()
        swapped[[0, 1]] = swapped[[1, 0]]
        out_a = denoise(params.embedding[ids], 2, params, ids)
        out_b = denoise(params.embedding[swapped], 2, params, swapped)
        assert np.abs(out_a - out_b).max() > 1e-6

    def test_padding_mask_blocks_influence(self, rng):
        params = tiny_params()
        ids = np.array([PAD_ID, PAD_ID, 6, 3])
        h = params.embedding[ids].copy()
        out_a = denoise(h, 4, params, ids)
        h2 = h.copy()
        h2[:2] += rng.standard_normal((2, 8)).astype(np.float32) * 100.0
        out_b = denoise(h2, 4, params, ids)
        np.testing.assert_array_equal(out_a, out_b)

    def test_output_width_across_geometries(self, rng):
        for seq_len, layers, heads in ((3, 1, 1), (6, 2, 4), (5, 3, 2)):
            cfg = DsrConfig(dim=8, seq_len=seq_len, layers=layers, heads=heads,
                            dropout=0.0, steps=16)
            params = init_params(cfg, 15, RngStreams(1).get("init"))
            h = rng.standard_normal((2, seq_len, 8)).astype(np.float32)
            assert denoise(h, 2, params).shape == (2, 8)

    def test_dropout_only_in_train_mode(self, rng):
        cfg = DsrConfig(**{**TINY.__dict__, "dropout": 0.5})
        params = init_params(cfg, 20, RngStreams(0).get("init"))
        h = rng.standard_normal((4, 8)).astype(np.float32)
        eval_a = denoise(h, 2, params)
        eval_b = denoise(h, 2, params, train=False, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(eval_a, eval_b)
        train_out = denoise(h, 2, params, train=True, rng=np.random.default_rng(0))
        assert not np.array_equal(eval_a, train_out)


class TestGradientFlow:
    def test_finite_difference_on_tiny_config(self, rng):
        # d=8, T=4, L=1, A=2, |V|=20 in float64; checked blocks: embeddings,
        # positions and the output projection
        params = tiny_params(vocab=20, dtype=np.float64)
        table = make_schedule("sqrt", TINY.steps)
        items = rng.integers(2, 20, size=(3, 4))
        targets = items[:, -1].copy()
        steps_n = np.array([2, 9, 16])
        probs = np.full(3, 1.0 / TINY.steps)
        eps_fixed = rng.standard_normal((3, 1, 8))

        class FixedRng:
            def __init__(self, eps):
                self.eps = eps

            def standard_normal(self, shape):
                assert shape == self.eps.shape
                return self.eps

        def loss_value(arrays):
            for name, arr in arrays.items():
                params[name].data[...] = arr
            loss, _ = compute_loss(items, targets, steps_n, probs, params, table,
                                   FixedRng(eps_fixed))
            return float(loss.data)

        arrays = {name: params[name].data.copy()
                  for name in ("item_embedding", "position_embedding", "output.w")}
        loss, _ = compute_loss(items, targets, steps_n, probs, params, table,
                               FixedRng(eps_fixed))
        engine.backward(loss)
        got = {name: params[name].grad.copy() for name in arrays}
        for name, base in arrays.items():
            params[name].data[...] = base  # restore before differencing
        for name in arrays:
            fd = finite_diff(loss_value, arrays, name, h=1e-5)
            rel = np.linalg.norm(got[name] - fd) / max(np.linalg.norm(fd), 1e-10)
            assert rel < 1e-3, f"{name}: rel={rel:.2e}"


class TestForwardCounter:
    def test_counts_calls_and_rows(self, rng):
        params = tiny_params()
        FORWARD_COUNTER.reset()
        h = rng.standard_normal((5, 4, 8)).astype(np.float32)
        denoise(h, 2, params)
        denoise(h[0], 2, params)
        assert FORWARD_COUNTER.calls == 2
        assert FORWARD_COUNTER.rows == 6

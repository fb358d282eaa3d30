import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowseg import autodiff as ad
from flowseg import netcore
from flowseg.autodiff import Tensor
from flowseg.errors import NumericError, ShapeError, UsageError
from flowseg.flowdata import Image, Mask, Prompt, PromptKind, generate_volume_flow
from flowseg.netcore import (MemoryFeature, NetConfig, ObjectPointer, attention,
                             condition, forward_frame, image_encode, init_params,
                             load_params, mask_decode, memory_encode, prompt_encode,
                             save_params)


def scalar_softmax_attention(q, k, v, bias=None):
    """Independent oracle: per-row softmax attention with python floats."""
    m, d = len(q), len(q[0])
    out = []
    for i in range(m):
        logits = []
        for j in range(len(k)):
            dot = sum(q[i][t] * k[j][t] for t in range(d)) / math.sqrt(d)
            logits.append(dot + (bias[j] if bias is not None else 0.0))
        mx = max(logits)
        exps = [math.exp(z - mx) for z in logits]
        total = sum(exps)
        weights = [e / total for e in exps]
        out.append([sum(weights[j] * v[j][t] for j in range(len(k)))
                    for t in range(len(v[0]))])
    return np.array(out)


class TestAttention:
    def test_single_key_returns_value_row(self, rng):
        q = rng.standard_normal((3, 4))
        k = rng.standard_normal((1, 4))
        v = rng.standard_normal((1, 4))
        out = attention(q, k, v).data
        assert np.allclose(out, np.repeat(v, 3, axis=0), atol=1e-15)

    def test_equal_logits_average_values(self, rng):
        # q orthogonal to every key -> all logits equal -> uniform softmax
        q = np.zeros((2, 4))
        k = rng.standard_normal((5, 4))
        v = rng.standard_normal((5, 4))
        out = attention(q, k, v).data
        assert np.allclose(out, np.repeat(v.mean(axis=0, keepdims=True), 2, axis=0),
                           atol=1e-12)

    def test_matches_scalar_oracle_2x2(self):
        q = [[0.3], [-1.2]]
        k = [[0.7], [2.0]]
        v = [[1.0], [-0.5]]
        out = attention(np.array(q), np.array(k), np.array(v)).data
        assert np.allclose(out, scalar_softmax_attention(q, k, v), atol=1e-12)

    def test_matches_scalar_oracle_with_bias(self, rng):
        q = rng.standard_normal((3, 5))
        k = rng.standard_normal((4, 5))
        v = rng.standard_normal((4, 5))
        bias = rng.standard_normal(4)
        out = attention(q, k, v, logit_bias=bias).data
        assert np.allclose(out, scalar_softmax_attention(q.tolist(), k.tolist(),
                                                         v.tolist(), bias.tolist()),
                           atol=1e-10)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ShapeError):
            attention(rng.standard_normal((2, 3)), rng.standard_normal((2, 4)),
                      rng.standard_normal((2, 4)))
        with pytest.raises(ShapeError):
            attention(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)),
                      rng.standard_normal((2, 3)), logit_bias=np.zeros(3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_softmax_rows_sum_to_one(self, seed):
        r = np.random.default_rng(seed)
        m, n, d = int(r.integers(1, 6)), int(r.integers(1, 7)), int(r.integers(1, 8))
        q, k = r.standard_normal((m, d)), r.standard_normal((n, d))
        rows = attention(q, k, np.eye(n)).data  # v = I recovers the softmax matrix
        assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-12)
        assert rows.min() >= 0.0

    def test_weight_bias_equivalence(self, rng):
        """Adding log(w) to logits == reweighting post-softmax mass."""
        q = rng.standard_normal((3, 6))
        k = rng.standard_normal((5, 6))
        v = rng.standard_normal((5, 6))
        w = rng.random(5) + 0.05
        biased = attention(q, k, v, logit_bias=np.log(w)).data
        plain = attention(q, k, np.eye(5)).data  # softmax rows
        reweighted = plain * w[None, :]
        reweighted /= reweighted.sum(axis=1, keepdims=True)
        assert np.allclose(biased, reweighted @ v, atol=1e-10)


class TestImageEncode:
    def test_grid_shape(self, small_params):
        img = np.zeros((16, 16), dtype=np.float32)
        emb = image_encode(img, small_params)
        assert emb.grid == (4, 4)
        assert emb.tokens.shape == (16, small_params.config.embed_dim)

    def test_default_config_grid(self):
        params = init_params(NetConfig(), seed=0)
        emb = image_encode(np.zeros((64, 64), dtype=np.float32), params)
        assert emb.grid == (8, 8)
        assert emb.tokens.shape == (64, 64)

    def test_purity(self, small_params, rng):
        img = rng.random((16, 16)).astype(np.float32)
        a = image_encode(img, small_params).tokens.data
        b = image_encode(img, small_params).tokens.data
        assert np.array_equal(a, b)

    def test_single_patch_perturbation_changes_embedding(self, small_params, rng):
        img = rng.random((16, 16)).astype(np.float64)
        other = img.copy()
        other[0:4, 0:4] += 0.25  # one patch
        a = image_encode(img, small_params).tokens.data
        b = image_encode(other, small_params).tokens.data
        assert not np.allclose(a, b)

    def test_indivisible_shape_raises(self, small_params):
        with pytest.raises(ShapeError):
            image_encode(np.zeros((18, 16)), small_params)


class TestPromptEncode:
    def test_point_prompt(self, small_params):
        p = Prompt(frame_index=0, kind=PromptKind.POINT, row=5, col=7)
        toks = prompt_encode(p, (4, 4), small_params)
        assert toks.sparse.shape == (1, small_params.config.embed_dim)
        assert toks.dense is None

    def test_box_prompt(self, small_params):
        p = Prompt(frame_index=0, kind=PromptKind.BOX, r0=1, c0=2, r1=9, c1=12)
        toks = prompt_encode(p, (4, 4), small_params)
        assert toks.sparse.shape == (2, small_params.config.embed_dim)
        assert toks.dense is None

    def test_mask_prompt_dense_maps_differ(self, small_params):
        zeros = Prompt(frame_index=0, kind=PromptKind.MASK, mask=Mask(np.zeros((16, 16))))
        ones = Prompt(frame_index=0, kind=PromptKind.MASK, mask=Mask(np.ones((16, 16))))
        a = prompt_encode(zeros, (4, 4), small_params)
        b = prompt_encode(ones, (4, 4), small_params)
        assert a.dense is not None and b.dense is not None
        assert not np.allclose(a.dense.data, b.dense.data)

    def test_out_of_bounds_point(self, small_params):
        p = Prompt(frame_index=0, kind=PromptKind.POINT, row=16, col=0)
        with pytest.raises(Exception):
            prompt_encode(p, (4, 4), small_params)


class TestMemoryEncode:
    def test_probs_zero_vs_one_differ(self, small_params, rng):
        emb = image_encode(rng.random((16, 16)), small_params)
        a = memory_encode(emb, np.zeros((16, 16)), small_params)
        b = memory_encode(emb, np.ones((16, 16)), small_params)
        assert not np.allclose(a.tokens, b.tokens)

    def test_deterministic(self, small_params, rng):
        emb = image_encode(rng.random((16, 16)), small_params)
        probs = rng.random((16, 16))
        a = memory_encode(emb, probs, small_params)
        b = memory_encode(emb, probs, small_params)
        assert np.array_equal(a.tokens, b.tokens)

    def test_grid_preserved(self, small_params, rng):
        emb = image_encode(rng.random((16, 16)), small_params)
        feat = memory_encode(emb, rng.random((16, 16)), small_params)
        assert feat.grid == emb.grid
        assert feat.tokens.shape == (16, small_params.config.embed_dim)

    def test_probs_out_of_range(self, small_params, rng):
        emb = image_encode(rng.random((16, 16)), small_params)
        with pytest.raises(Exception):
            memory_encode(emb, np.full((16, 16), 1.5), small_params)


def _entry_parts(params, rng, scale=1.0):
    emb = image_encode(rng.random((16, 16)), params)
    feat = memory_encode(emb, rng.random((16, 16)), params)
    ptr = ObjectPointer(rng.standard_normal(params.config.embed_dim) * scale)
    return feat, ptr


class TestCondition:
    def test_empty_entries_independent_of_memory(self, small_params, rng):
        emb = image_encode(rng.random((16, 16)), small_params)
        a = condition(emb, [], [], small_params)
        b = condition(emb, [], [], small_params)
        assert np.array_equal(a.tokens.data, b.tokens.data)

    def test_memory_changes_output(self, small_params, rng):
        emb = image_encode(rng.random((16, 16)), small_params)
        plain = condition(emb, [], [], small_params)
        entry = _entry_parts(small_params, rng)
        conditioned = condition(emb, [entry], [1.0], small_params)
        assert not np.allclose(plain.tokens.data, conditioned.tokens.data)

    def test_single_entry_weight_one_matches_zero_bias(self, small_params, rng):
        emb = image_encode(rng.random((16, 16)), small_params)
        entry = _entry_parts(small_params, rng)
        a = condition(emb, [entry], [1.0], small_params)
        b = condition(emb, [entry], np.array([1.0]), small_params)
        assert np.array_equal(a.tokens.data, b.tokens.data)

    def test_zero_weight_entry_is_fully_masked(self, small_params, rng):
        emb = image_encode(rng.random((16, 16)), small_params)
        entry = _entry_parts(small_params, rng)
        single = condition(emb, [entry], [1.0], small_params)
        doubled = condition(emb, [entry, entry], [1.0, 0.0], small_params)
        assert np.allclose(single.tokens.data, doubled.tokens.data, atol=1e-9)

    def test_negative_weight_rejected(self, small_params, rng):
        emb = image_encode(rng.random((16, 16)), small_params)
        entry = _entry_parts(small_params, rng)
        with pytest.raises(Exception):
            condition(emb, [entry, entry], [1.5, -0.5], small_params)

    def test_weights_must_sum_to_one(self, small_params, rng):
        emb = image_encode(rng.random((16, 16)), small_params)
        entry = _entry_parts(small_params, rng)
        with pytest.raises(Exception):
            condition(emb, [entry], [0.25], small_params)


class TestMaskDecode:
    def test_output_shape_and_range(self, small_params, rng):
        emb = image_encode(rng.random((16, 16)), small_params)
        cond = condition(emb, [], [], small_params)
        prompt = prompt_encode(Prompt(frame_index=0, kind=PromptKind.POINT, row=3, col=3),
                               emb.grid, small_params)
        out = mask_decode(cond, prompt, small_params)
        assert out.logits.shape == (16, 16)
        assert 0.0 <= float(out.confidence.data) <= 1.0
        assert out.object_pointer.shape == (small_params.config.embed_dim,)

    def test_confidence_in_unit_interval_many_trials(self, rng):
        cfg = NetConfig.tiny()
        for trial in range(40):
            params = init_params(cfg, seed=trial)
            img = rng.random((16, 16))
            emb = image_encode(img, params)
            cond = condition(emb, [], [], params)
            out = mask_decode(cond, None, params)
            assert 0.0 <= float(out.confidence.data) <= 1.0

    def test_deterministic(self, small_params, rng):
        img = rng.random((16, 16))
        outs = []
        for _ in range(2):
            emb = image_encode(img, small_params)
            cond = condition(emb, [], [], small_params)
            outs.append(mask_decode(cond, None, small_params).logits.data)
        assert np.array_equal(outs[0], outs[1])


class TestForwardFrame:
    def test_prompted_frame_empty_bank(self, small_params):
        flow = generate_volume_flow(0, 1, "ellipse", 16)
        prompt = Prompt(frame_index=0, kind=PromptKind.POINT, row=8, col=8)
        pred, entry = forward_frame(flow.image(0), prompt, [], [], small_params, 0)
        assert pred.mask.shape == (16, 16)
        assert entry.is_template is True
        assert 0.0 <= entry.confidence <= 1.0

    def test_unprompted_empty_bank_raises(self, small_params):
        flow = generate_volume_flow(0, 1, "ellipse", 16)
        with pytest.raises(UsageError):
            forward_frame(flow.image(0), None, [], [], small_params, 0)

    def test_two_runs_identical(self, small_params):
        flow = generate_volume_flow(1, 1, "ring", 16)
        prompt = Prompt(frame_index=0, kind=PromptKind.POINT, row=8, col=8)
        a, _ = forward_frame(flow.image(0), prompt, [], [], small_params, 0)
        b, _ = forward_frame(flow.image(0), prompt, [], [], small_params, 0)
        assert np.array_equal(a.probs, b.probs)
        assert a.confidence == b.confidence


class TestGrad:
    def test_constant_loss_zero_gradient(self, tiny_params):
        grads = netcore.grad(tiny_params, lambda p: Tensor(3.5) * 1.0)
        assert all(np.all(g == 0) for g in grads.values())

    def test_quadratic_loss_gradient_is_theta(self, tiny_params):
        name = "enc.patch.w"

        def loss(p):
            return 0.5 * ad.sumt(p.tensors[name] ** 2)

        grads = netcore.grad(tiny_params, loss)
        assert np.allclose(grads[name], tiny_params.tensors[name].data)
        assert np.all(grads["cal.w1"] == 0)

    def test_nan_loss_raises(self, tiny_params):
        with pytest.raises(NumericError):
            netcore.grad(tiny_params, lambda p: Tensor(float("nan")) * 1.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, small_params):
        path = tmp_path / "model.ckpt"
        small_params.steps = 17
        save_params(small_params, path)
        loaded = load_params(path)
        assert loaded.config == small_params.config
        assert loaded.steps == 17
        assert loaded.seed == small_params.seed
        for name, t in small_params.tensors.items():
            assert np.array_equal(t.data, loaded.tensors[name].data)

    def test_truncated_rejected(self, tmp_path, tiny_params):
        path = tmp_path / "model.ckpt"
        save_params(tiny_params, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(Exception, match="truncated"):
            load_params(path)

    def test_wrong_magic_rejected(self, tmp_path, tiny_params):
        path = tmp_path / "model.ckpt"
        save_params(tiny_params, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(Exception, match="magic"):
            load_params(path)

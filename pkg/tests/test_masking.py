import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from neuronal_prune.engine import LayerId, layer_ids
from neuronal_prune.exceptions import ValidationError
from neuronal_prune.masking import (
    SaliencyScores,
    SparsityMask,
    achieved_sparsity,
    kept_count,
    read_mask,
    score_magnitude,
    score_wanda,
    topk_mask,
    wanda_scores_from_norms,
    write_mask,
)
from neuronal_prune.model_store import ModelBundle, ModelDims, TokenStream, generate_model, generate_tokens
from neuronal_prune.schedules import SparsityPlan, uniform_schedule

from conftest import TINY
from oracles import NAMES, brute_topk

LID = LayerId(0, "attn_q")


def _single(scores):
    return SaliencyScores({LID: np.asarray(scores, dtype=np.float64)}, "magnitude")


def _plan(s, per_row=None):
    rows = None if per_row is None else {LID: np.asarray(per_row)}
    return SparsityPlan(s, 0.0, [s], rows)


def _model_with_q(w):
    dims = ModelDims(d_model=2, n_heads=1, d_ff=2, n_blocks=1, vocab=3)
    block = {n: np.eye(2, dtype=np.float32) for n in NAMES}
    block["attn_q"] = np.asarray(w, dtype=np.float32)
    emb = np.array([[1, 0], [0, 1], [1, 1]], np.float32)
    return ModelBundle(dims, emb, (block,), np.ones(2, np.float32), emb.copy())


class TestMagnitude:
    def test_absolute_value(self):
        scores = score_magnitude(_model_with_q([[-2.5, 1], [0, 3]]))
        np.testing.assert_array_equal(scores.layers[LID], [[2.5, 1], [0, 3]])

    def test_zero_layer(self):
        scores = score_magnitude(_model_with_q(np.zeros((2, 2))))
        assert np.all(scores.layers[LID] == 0)

    def test_order_matches_sorted_abs(self, tiny_model):
        scores = score_magnitude(tiny_model)
        for lid in layer_ids(2):
            w = tiny_model.blocks[lid.block][lid.name].ravel().tolist()
            oracle = sorted(range(len(w)), key=lambda i: (abs(w[i]), i))
            got = np.argsort(scores.layers[lid].ravel(), kind="stable").tolist()
            assert got == oracle


class TestWanda:
    def test_hand_example(self):
        model = _model_with_q([[1, -2], [3, 4]])
        norms = {lid: np.ones(2) for lid in layer_ids(1)}
        norms[LID] = np.array([1.0, 2.0])
        scores = wanda_scores_from_norms(model, norms)
        np.testing.assert_array_equal(scores.layers[LID], [[1, 4], [3, 8]])
        assert scores.scorer_tag == "wanda"

    def test_input_norm_for_query_layer(self, tiny_model, tiny_tokens):
        # attn_q in block 0 reads rms(embedding[id]); compute its feature norms directly
        x = tiny_model.embedding[tiny_tokens.ids].astype(np.float64)
        h = x / np.sqrt((x * x).mean(axis=1, keepdims=True) + 1e-5)
        norms = np.sqrt((h * h).sum(axis=0))
        scores = score_wanda(tiny_model, tiny_tokens, 16)
        w = np.abs(tiny_model.blocks[0]["attn_q"].astype(np.float64))
        np.testing.assert_allclose(scores.layers[LayerId(0, "attn_q")], w * norms, rtol=1e-5)

    def test_zero_activations(self):
        dims = ModelDims(4, 2, 8, 1, 5)
        model = generate_model(dims, 1)
        named = dict(model.tensors())
        named["embedding"] = np.zeros((5, 4), np.float32)
        model = ModelBundle.from_tensors(dims, named)
        scores = score_wanda(model, generate_tokens(5, 20, 0), 10)
        assert all(np.all(v == 0) for v in scores.layers.values())

    def test_scaling_activations_preserves_masks(self, tiny_model, tiny_tokens):
        from neuronal_prune.engine import capture_input_norms

        norms = capture_input_norms(tiny_model, tiny_tokens, 16)
        a = wanda_scores_from_norms(tiny_model, norms)
        b = wanda_scores_from_norms(tiny_model, {k: 3.5 * v for k, v in norms.items()})
        for lid in a.layers:
            np.testing.assert_allclose(b.layers[lid], 3.5 * a.layers[lid], rtol=1e-12)
        plan = uniform_schedule(0.6, 2)
        for group in ("layer", "row"):
            assert topk_mask(a, plan, group).equals(topk_mask(b, plan, group))

    def test_empty_calibration(self, tiny_model):
        with pytest.raises(ValidationError):
            score_wanda(tiny_model, TokenStream(11, np.array([], dtype=np.int64)), 4)


class TestTopk:
    @pytest.mark.parametrize("group", ["layer", "row"])
    def test_boundaries(self, group):
        scores = _single(np.arange(12.0).reshape(3, 4))
        assert topk_mask(scores, _plan(0.0), group).layers[LID].all()
        assert not topk_mask(scores, _plan(1.0), group).layers[LID].any()

    def test_layer_example(self):
        mask = topk_mask(_single([[3, 1], [2, 5]]), _plan(0.5), "layer")
        np.testing.assert_array_equal(mask.layers[LID], [[1, 0], [0, 1]])

    def test_row_tie_break(self):
        mask = topk_mask(_single([[5, 5], [5, 5]]), _plan(0.5), "row")
        np.testing.assert_array_equal(mask.layers[LID], [[1, 0], [1, 0]])

    def test_layer_tie_break_prefers_small_flat_index(self):
        mask = topk_mask(_single([[1, 2], [2, 2]]), _plan(0.5), "layer")
        np.testing.assert_array_equal(mask.layers[LID], [[0, 1], [1, 0]])

    def test_per_row_sparsity(self):
        scores = _single(np.arange(8.0).reshape(2, 4))
        mask = topk_mask(scores, _plan(0.5, [0.25, 0.75]), "row")
        np.testing.assert_array_equal(mask.layers[LID], [[0, 1, 1, 1], [0, 0, 0, 1]])

    def test_round_half_up(self):
        assert kept_count(0.5, 3) == 2
        assert kept_count(0.7, 10) == 3
        assert kept_count(0.0, 5) == 5 and kept_count(1.0, 5) == 0

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            topk_mask(_single([[np.nan, 1.0]]), _plan(0.5), "layer")

    @settings(max_examples=60, deadline=None)
    @given(
        hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12),
                   elements=st.integers(0, 6).map(float)),
        st.floats(0, 1),
        st.sampled_from(["layer", "row"]),
    )
    def test_matches_brute_force(self, scores, s, group):
        mask = topk_mask(_single(scores), _plan(s), group).layers[LID]
        if group == "layer":
            want = brute_topk(scores, s)
        else:
            want = np.stack([brute_topk(row, s) for row in scores])
        np.testing.assert_array_equal(mask, want)

    @settings(max_examples=40, deadline=None)
    @given(
        hnp.arrays(np.float64, (6, 9), elements=st.integers(0, 1000).map(float)),
        st.floats(0, 1),
    )
    def test_group_invariants(self, scores, s):
        mask = topk_mask(_single(scores), _plan(s), "row").layers[LID]
        k = kept_count(s, 9)
        for row, m in zip(scores, mask):
            assert m.sum() == k
            if 0 < k < 9:
                assert row[m].min() >= row[~m].max()
        # strictly increasing transform leaves the mask alone
        again = topk_mask(_single(np.sqrt(scores) * 7 + 1), _plan(s), "row").layers[LID]
        np.testing.assert_array_equal(mask, again)


class TestAchieved:
    def test_extremes(self, tiny_model):
        ones = SparsityMask.ones(tiny_model)
        zeros = SparsityMask({k: np.zeros_like(v) for k, v in ones.layers.items()})
        a, z = achieved_sparsity(ones), achieved_sparsity(zeros)
        assert a.global_sparsity == 0.0 and set(a.per_block) == {0.0} and set(a.per_layer.values()) == {0.0}
        assert z.global_sparsity == 1.0 and set(z.per_block) == {1.0} and set(z.per_layer.values()) == {1.0}

    def test_uniform_layer_groups_close_to_target(self):
        dims = ModelDims(d_model=40, n_heads=2, d_ff=80, n_blocks=2, vocab=10)
        model = generate_model(dims, 0)
        mask = topk_mask(score_magnitude(model), uniform_schedule(0.7, 2), "layer")
        zeros = sum(int((~m).sum()) for m in mask.layers.values())
        total = sum(m.size for m in mask.layers.values())
        assert abs(zeros / total - 0.7) < 1e-3
        assert achieved_sparsity(mask).global_sparsity == zeros / total


class TestMaskFiles:
    def test_round_trip(self, tiny_model, tmp_path):
        mask = topk_mask(score_magnitude(tiny_model), uniform_schedule(0.37, 2), "row")
        write_mask(mask, tmp_path)
        assert read_mask(tmp_path).equals(mask)

    def test_bit_order(self, tmp_path):
        bits = np.zeros((2, 2), dtype=bool)
        bits[0, 0] = True  # flat index 0 -> least significant bit
        bits[1, 1] = True  # flat index 3 -> bit 3
        write_mask(SparsityMask({LID: bits}), tmp_path)
        assert (tmp_path / "mask.bin").read_bytes() == bytes([0b1001])
        manifest = json.loads((tmp_path / "mask_manifest.json").read_text())
        assert manifest["tensors"] == [{"name": "blocks.0.attn_q", "shape": [2, 2], "offset": 0, "nbytes": 1}]

    def test_truncated(self, tiny_model, tmp_path):
        write_mask(SparsityMask.ones(tiny_model), tmp_path)
        blob = tmp_path / "mask.bin"
        blob.write_bytes(blob.read_bytes()[:-1])
        with pytest.raises(ValidationError):
            read_mask(tmp_path)

import math

import pytest
import torch

from motrefine.fusion_decoder import (
    DecoderState,
    DualDecoderLayer,
    FusionAttention,
    FusionDecoder,
    build_fusion_mask,
)
from motrefine.nn_core import FeatureMap

NEG_INF = float("-inf")


def mask_entry_oracle(i: int, j: int, n: int, beta: float) -> float:
    """Literal per-index three-case rule, independent of the builder."""
    center = (2 * n - 1) / 2.0
    opposite = (i - center) * (j - center) < 0
    if opposite and i % n == j % n:
        return 0.0
    if not opposite or i == j:
        return NEG_INF
    return beta


def same(a: float, b: float) -> bool:
    return a == b or (math.isinf(a) and math.isinf(b) and a < 0 and b < 0)


class TestBuildFusionMask:
    def test_n1(self):
        m = build_fusion_mask(1, -10.0)
        assert same(float(m[0, 0]), NEG_INF) and same(float(m[1, 1]), NEG_INF)
        assert float(m[0, 1]) == 0.0 and float(m[1, 0]) == 0.0

    def test_n2_rows(self):
        m = build_fusion_mask(2, -10.0)
        want = [
            [NEG_INF, NEG_INF, 0.0, -10.0],
            [NEG_INF, NEG_INF, -10.0, 0.0],
            [0.0, -10.0, NEG_INF, NEG_INF],
            [-10.0, 0.0, NEG_INF, NEG_INF],
        ]
        for i in range(4):
            for j in range(4):
                assert same(float(m[i, j]), want[i][j]), (i, j)

    @pytest.mark.parametrize("beta", [0.0, -5.0, -10.0, NEG_INF])
    @pytest.mark.parametrize("n", list(range(1, 9)))
    def test_exhaustive_oracle(self, n, beta):
        m = build_fusion_mask(n, beta)
        for i in range(2 * n):
            for j in range(2 * n):
                assert same(float(m[i, j]), mask_entry_oracle(i, j, n, beta)), (n, beta, i, j)

    def test_symmetric(self):
        for n in (1, 3, 5):
            m = build_fusion_mask(n, -7.0)
            finite = torch.isfinite(m)
            assert torch.equal(finite, finite.T)
            assert torch.equal(m[finite], m.T[finite.T])

    def test_beta_neg_inf_pure_pairing(self):
        n = 4
        m = build_fusion_mask(n, NEG_INF)
        for i in range(2 * n):
            open_cols = [j for j in range(2 * n) if math.isfinite(float(m[i, j]))]
            assert open_cols == [i + n if i < n else i - n]

    def test_invalid_n(self):
        with pytest.raises(ValueError):
            build_fusion_mask(0, -10.0)


class TestFusionAttention:
    def test_beta_neg_inf_blocks_intra_half(self):
        torch.manual_seed(0)
        n, dim = 3, 8
        fa = FusionAttention(dim, 2)
        q_det = torch.randn(n, dim)
        q_asso = torch.randn(n, dim)
        mask = build_fusion_mask(n, NEG_INF)
        _, _, w = fa(q_det, q_asso, mask, return_weights=True)
        w = w.detach()
        # attention weight mass within either half is exactly zero
        assert float(w[:, :n, :n].abs().max()) == 0.0
        assert float(w[:, n:, n:].abs().max()) == 0.0
        # each query attends only to its partner
        for i in range(n):
            assert float(w[:, i, n + i].min()) == 1.0

    def test_permutation_equivariance(self):
        torch.manual_seed(1)
        n, dim = 5, 8
        fa = FusionAttention(dim, 4)
        q_det = torch.randn(n, dim)
        q_asso = torch.randn(n, dim)
        mask = build_fusion_mask(n, -10.0)
        out_det, out_asso, _ = fa(q_det, q_asso, mask)
        perm = torch.tensor([2, 0, 4, 1, 3])
        pd, pa, _ = fa(q_det[perm], q_asso[perm], mask)
        assert torch.allclose(pd, out_det[perm], atol=1e-6)
        assert torch.allclose(pa, out_asso[perm], atol=1e-6)

    def test_zero_value_projection_residual_passthrough(self):
        torch.manual_seed(2)
        n, dim = 2, 4
        fa = FusionAttention(dim, 1)
        with torch.no_grad():
            fa.attn.v_proj.weight.zero_()
            fa.attn.v_proj.bias.zero_()
            fa.attn.out_proj.weight.zero_()
            fa.attn.out_proj.bias.zero_()
        q_det = torch.randn(n, dim)
        q_asso = torch.randn(n, dim)
        out_det, out_asso, _ = fa(q_det, q_asso, build_fusion_mask(n, -10.0))
        fused = torch.cat([q_det, q_asso])
        want = fa.norm(fused)
        assert torch.allclose(out_det, want[:n], atol=1e-6)
        assert torch.allclose(out_asso, want[n:], atol=1e-6)


def make_layer_inputs(n=4, dim=8, size=8, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    f_t = FeatureMap(torch.randn(dim, size, size, dtype=dtype), 4.0)
    f_prev = FeatureMap(torch.randn(dim, size, size, dtype=dtype), 4.0)
    refs = torch.rand(n, 6, dtype=dtype) * 0.2 + 0.2
    state = DecoderState(
        q_det=torch.randn(n, dim, dtype=dtype),
        q_asso=torch.randn(n, dim, dtype=dtype),
        ref_det=refs,
        ref_asso=refs.clone(),
    )
    return state, f_t, f_prev


class TestDualDecoderLayer:
    def test_zero_heads_fixed_point(self):
        state, f_t, f_prev = make_layer_inputs()
        layer = DualDecoderLayer(8, 2, channels=8)
        with torch.no_grad():
            # zero the whole box/motion heads, not just their final layers
            for head in (layer.box_head, layer.motion_head):
                for p in head.parameters():
                    p.zero_()
        mask = build_fusion_mask(4, -10.0)
        next_state, out = layer(state, f_t, f_prev, mask)
        assert torch.allclose(out.boxes_det, state.ref_det, atol=1e-7)
        assert torch.allclose(out.boxes_asso, state.ref_det, atol=1e-7)
        assert next_state.layer == 1

    def test_fresh_heads_start_at_reference(self):
        # zero-initialized final linears: first forward emits the refs
        state, f_t, f_prev = make_layer_inputs(seed=3)
        layer = DualDecoderLayer(8, 2, channels=8)
        mask = build_fusion_mask(4, -10.0)
        _, out = layer(state, f_t, f_prev, mask)
        assert torch.allclose(out.boxes_det, state.ref_det, atol=1e-7)

    def test_hand_set_delta_shifts_center(self):
        state, f_t, f_prev = make_layer_inputs(seed=4)
        layer = DualDecoderLayer(8, 2, channels=8)
        with torch.no_grad():
            layer.box_head.fc2.bias.copy_(torch.tensor([0.1, 0, 0, 0, 0, 0]))
        mask = build_fusion_mask(4, -10.0)
        _, out = layer(state, f_t, f_prev, mask)
        assert torch.allclose(out.boxes_det[:, 0], state.ref_det[:, 0] + 0.1, atol=1e-7)
        assert torch.allclose(out.boxes_det[:, 1:], state.ref_det[:, 1:], atol=1e-7)

    def test_update_ledger_identity(self):
        # emitted boxes minus incoming refs equal the emitted deltas/motions
        for seed in range(100):
            state, f_t, f_prev = make_layer_inputs(n=3, seed=seed)
            layer = DualDecoderLayer(8, 2, channels=8)
            with torch.no_grad():
                layer.box_head.fc2.weight.normal_(std=0.3)
                layer.motion_head.fc2.weight.normal_(std=0.3)
            mask = build_fusion_mask(3, -10.0)
            _, out = layer(state, f_t, f_prev, mask)
            assert torch.allclose(out.boxes_det_raw - out.ref_prev, out.delta_box, atol=1e-6)
            assert torch.allclose(out.boxes_asso_raw - out.ref_prev, out.motion, atol=1e-6)

    def test_clamped_boxes_non_negative(self):
        state, f_t, f_prev = make_layer_inputs(seed=6)
        layer = DualDecoderLayer(8, 2, channels=8)
        with torch.no_grad():
            layer.box_head.fc2.bias.fill_(-5.0)  # drive distances negative
        mask = build_fusion_mask(4, -10.0)
        _, out = layer(state, f_t, f_prev, mask)
        assert float(out.boxes_det.detach()[:, 2:].min()) >= 0.0
        assert float(out.boxes_det_raw.detach()[:, 2:].min()) < 0.0

    def test_motion_form_center_pads_edge_deltas(self):
        state, f_t, f_prev = make_layer_inputs(seed=7)
        layer = DualDecoderLayer(8, 2, channels=8, motion_form="center")
        with torch.no_grad():
            layer.motion_head.fc2.bias.fill_(0.2)
        mask = build_fusion_mask(4, -10.0)
        _, out = layer(state, f_t, f_prev, mask)
        assert torch.all(out.motion[:, :2] != 0)
        assert torch.all(out.motion[:, 2:] == 0)

    def test_motion_form_none_zero_motion(self):
        state, f_t, f_prev = make_layer_inputs(seed=8)
        layer = DualDecoderLayer(8, 2, channels=8, motion_form="none")
        mask = build_fusion_mask(4, -10.0)
        _, out = layer(state, f_t, f_prev, mask)
        assert layer.motion_head is None
        assert torch.all(out.motion == 0)
        assert torch.allclose(out.boxes_asso, out.ref_prev, atol=1e-7)


class TestFusionDecoder:
    def test_single_layer_equals_one_layer_call(self):
        state, f_t, f_prev = make_layer_inputs(seed=9)
        torch.manual_seed(9)
        dec = FusionDecoder(8, 2, channels=8, layers=1)
        outs = dec(state, f_t, f_prev)
        assert len(outs) == 1
        mask = build_fusion_mask(4, dec.beta)
        _, direct = dec.layers[0](state, f_t, f_prev, mask)
        assert torch.allclose(outs[0].boxes_det, direct.boxes_det)
        assert torch.allclose(outs[0].cls_logits, direct.cls_logits)

    def test_zero_heads_all_layers_stay_at_init(self):
        state, f_t, f_prev = make_layer_inputs(seed=10)
        dec = FusionDecoder(8, 2, channels=8, layers=3)
        with torch.no_grad():
            for layer in dec.layers:
                for head in (layer.box_head, layer.motion_head):
                    for p in head.parameters():
                        p.zero_()
        outs = dec(state, f_t, f_prev)
        for out in outs:
            assert torch.allclose(out.boxes_det, state.ref_det, atol=1e-6)

    def test_gradients_reach_every_layer_head(self):
        state, f_t, f_prev = make_layer_inputs(seed=11)
        dec = FusionDecoder(8, 2, channels=8, layers=2)
        outs = dec(state, f_t, f_prev)
        loss = sum(
            o.cls_logits.sum() + o.boxes_det.sum() + o.boxes_asso.sum() for o in outs
        )
        loss.backward()
        for layer in dec.layers:
            for name in ("cls_head", "box_head", "motion_head"):
                grads = [p.grad for p in getattr(layer, name).parameters()]
                assert any(g is not None and g.abs().sum() > 0 for g in grads), name

    def test_ledger_across_layers(self):
        state, f_t, f_prev = make_layer_inputs(seed=12)
        dec = FusionDecoder(8, 2, channels=8, layers=3)
        with torch.no_grad():
            for layer in dec.layers:
                layer.box_head.fc2.weight.normal_(std=0.2)
                layer.motion_head.fc2.weight.normal_(std=0.2)
        outs = dec(state, f_t, f_prev)
        prev_ref = state.ref_det
        for out in outs:
            assert torch.allclose(out.ref_prev, prev_ref, atol=1e-7)
            assert torch.allclose(out.boxes_det_raw, out.ref_prev + out.delta_box, atol=1e-6)
            assert torch.allclose(out.boxes_asso_raw, out.ref_prev + out.motion, atol=1e-6)
            prev_ref = out.boxes_det

    def test_return_weights_shape(self):
        state, f_t, f_prev = make_layer_inputs(n=3, seed=13)
        dec = FusionDecoder(8, 4, channels=8, layers=1)
        outs = dec(state, f_t, f_prev, return_weights=True)
        assert outs[0].fusion_weights.shape == (4, 6, 6)

    def test_invalid_layer_count(self):
        with pytest.raises(ValueError):
            FusionDecoder(8, 2, channels=8, layers=0)

import numpy as np
import pytest

from flowseg import engine, membank, netcore
from flowseg.engine import (add_prompt, propagate, propagation_order, refine_from,
                            start_session)
from flowseg.errors import ArgumentError, ConfigError, UsageError
from flowseg.flowdata import (FlowMode, Prompt, PromptKind, auto_prompt,
                              generate_unordered_flow, generate_volume_flow)
from flowseg.membank import BankConfig, BankMode


@pytest.fixture(scope="module")
def params():
    cfg = netcore.NetConfig(embed_dim=16, patch=4, heads=2, mlp_hidden=32,
                            pixel_hidden=8, calib_hidden=8)
    return netcore.init_params(cfg, seed=3)


@pytest.fixture()
def vol_session(params):
    flow = generate_volume_flow(5, 8, "ellipse", 16)
    return start_session(flow, params, BankConfig(mode=BankMode.FIFO))


@pytest.fixture()
def unord_session(params):
    flow = generate_unordered_flow(6, 6, "ring", 16)
    return start_session(flow, params, BankConfig(mode=BankMode.CONFIDENCE_FIRST))


def point_prompt(session, frame):
    return auto_prompt(session.flow.mask(frame), PromptKind.POINT, seed=frame,
                       frame_index=frame)


class TestPropagationOrder:
    def test_volumetric_mid_prompt(self):
        assert propagation_order(8, {3}, FlowMode.VOLUMETRIC) == [3, 4, 5, 6, 7, 2, 1, 0]

    def test_volumetric_forward_only(self):
        assert propagation_order(8, {3}, FlowMode.VOLUMETRIC, bidirectional=False) == \
            [3, 4, 5, 6, 7]

    def test_unordered_wraps(self):
        assert propagation_order(6, {3}, FlowMode.UNORDERED) == [3, 4, 5, 0, 1, 2]

    def test_earliest_prompt_starts(self):
        assert propagation_order(5, {4, 2}, FlowMode.VOLUMETRIC)[0] == 2

    def test_requires_prompt(self):
        with pytest.raises(UsageError):
            propagation_order(4, set(), FlowMode.VOLUMETRIC)


class TestStartSession:
    def test_fresh_session_is_empty(self, vol_session):
        assert all(p is None for p in vol_session.predictions)
        assert vol_session.prompt_log == []
        assert len(vol_session.bank) == 0

    def test_mode_mismatch_rejected(self, params):
        flow = generate_volume_flow(1, 2, "ellipse", 16)
        with pytest.raises(ConfigError):
            start_session(flow, params, BankConfig(mode=BankMode.CONFIDENCE_FIRST))
        unord = generate_unordered_flow(1, 2, "ellipse", 16)
        with pytest.raises(ConfigError):
            start_session(unord, params, BankConfig(mode=BankMode.FIFO))

    def test_ids_unique(self, params):
        flow = generate_volume_flow(1, 1, "ellipse", 16)
        ids = {start_session(flow, params, BankConfig(mode=BankMode.FIFO)).id
               for _ in range(20)}
        assert len(ids) == 20


class TestAddPrompt:
    def test_first_prompt_produces_prediction(self, vol_session):
        pred = add_prompt(vol_session, 2, point_prompt(vol_session, 2))
        assert pred.mask.shape == (16, 16)
        assert vol_session.predictions[2] is pred
        assert len(vol_session.bank.templates) == 1

    def test_same_frame_twice_replaces_prediction_keeps_log(self, vol_session):
        first = add_prompt(vol_session, 1, point_prompt(vol_session, 1))
        mask_p = auto_prompt(vol_session.flow.mask(1), PromptKind.MASK, seed=0, frame_index=1)
        second = add_prompt(vol_session, 1, mask_p)
        assert vol_session.predictions[1] is second
        assert len(vol_session.prompt_log) == 2
        assert second is not first

    def test_out_of_range_frame(self, vol_session):
        with pytest.raises(ArgumentError):
            add_prompt(vol_session, 8, point_prompt(vol_session, 0))


class TestPropagate:
    def test_requires_prompt(self, vol_session):
        with pytest.raises(UsageError):
            propagate(vol_session)

    def test_single_frame_flow(self, params):
        flow = generate_volume_flow(2, 1, "ellipse", 16)
        session = start_session(flow, params, BankConfig(mode=BankMode.FIFO))
        add_prompt(session, 0, point_prompt(session, 0))
        result = propagate(session)
        assert result.order == (0,)
        assert len(result.masks) == 1
        assert result.masks[0] is not None

    def test_full_coverage_and_order(self, vol_session):
        add_prompt(vol_session, 3, point_prompt(vol_session, 3))
        result = propagate(vol_session)
        assert result.order == (3, 4, 5, 6, 7, 2, 1, 0)
        assert all(m is not None for m in result.masks)
        assert all(p is not None for p in vol_session.predictions)

    def test_idempotent(self, vol_session):
        add_prompt(vol_session, 0, point_prompt(vol_session, 0))
        a = propagate(vol_session)
        b = propagate(vol_session)
        for ma, mb in zip(a.masks, b.masks):
            assert np.array_equal(ma.mask, mb.mask)
            assert ma.confidence == mb.confidence

    def test_bank_snapshots_per_step(self, unord_session):
        add_prompt(unord_session, 1, point_prompt(unord_session, 1))
        result = propagate(unord_session)
        assert len(result.bank_snapshots) == len(result.order)
        for snap in result.bank_snapshots:
            weights = [e["last_weight"] for e in snap if e["last_weight"] is not None]
            if weights:
                assert sum(weights) == pytest.approx(1.0, abs=1e-9)

    def test_bank_invariants_hold_during_propagation(self, unord_session):
        add_prompt(unord_session, 0, point_prompt(unord_session, 0))
        result = propagate(unord_session)
        cap = unord_session.bank.config.capacity
        for snap in result.bank_snapshots:
            assert sum(1 for e in snap if not e["is_template"]) <= cap

    def test_deterministic_across_sessions(self, params):
        flow = generate_volume_flow(9, 4, "polygon_blob", 16)
        masks = []
        for _ in range(2):
            s = start_session(flow, params, BankConfig(mode=BankMode.FIFO))
            add_prompt(s, 0, auto_prompt(flow.mask(0), PromptKind.MASK, seed=1, frame_index=0))
            masks.append(propagate(s).masks)
        for a, b in zip(*masks):
            assert np.array_equal(a.probs, b.probs)


class TestRefine:
    def test_requires_propagation(self, vol_session):
        add_prompt(vol_session, 0, point_prompt(vol_session, 0))
        with pytest.raises(UsageError):
            refine_from(vol_session, 0, point_prompt(vol_session, 0))

    def test_refine_last_visited_recomputes_only_it(self, vol_session):
        add_prompt(vol_session, 3, point_prompt(vol_session, 3))
        result = propagate(vol_session)
        last = result.order[-1]
        refined = refine_from(vol_session, last, point_prompt(vol_session, last))
        assert refined.recomputed == (last,)

    def test_refine_first_visited_recomputes_all(self, vol_session):
        add_prompt(vol_session, 0, point_prompt(vol_session, 0))
        result = propagate(vol_session)
        refined = refine_from(vol_session, 0, point_prompt(vol_session, 0))
        assert set(refined.recomputed) == set(result.order)

    def test_midpoint_refine_recomputes_downstream_only(self, unord_session):
        add_prompt(unord_session, 0, point_prompt(unord_session, 0))
        before = propagate(unord_session)
        mid = before.order[3]
        downstream = set(before.order[4:])
        old_masks = [m.mask.copy() for m in before.masks]
        refined = refine_from(unord_session, mid, point_prompt(unord_session, mid))
        assert set(refined.recomputed) == {mid} | downstream
        untouched = set(before.order[:3])
        for f in untouched:
            assert np.array_equal(refined.masks[f].mask, old_masks[f])

    def test_bank_has_two_templates_after_refine(self, vol_session):
        add_prompt(vol_session, 0, point_prompt(vol_session, 0))
        propagate(vol_session)
        refine_from(vol_session, 5, point_prompt(vol_session, 5))
        assert len(vol_session.bank.templates) >= 2

    def test_stacked_refinements_keep_all_templates(self, vol_session):
        # refine late, then refine earlier: the earlier replay must still
        # see the later refinement's template (templates are permanent)
        add_prompt(vol_session, 0, point_prompt(vol_session, 0))
        propagate(vol_session)
        refine_from(vol_session, 6, point_prompt(vol_session, 6))
        result = refine_from(vol_session, 2, point_prompt(vol_session, 2))
        assert len(vol_session.bank.templates) == 3
        pos = result.order.index(6)
        snap_frames = {e["frame_index"] for e in result.bank_snapshots[pos]
                       if e["is_template"]}
        assert {0, 2, 6} <= snap_frames

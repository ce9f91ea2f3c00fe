"""Temporal blocks: clip selection, memory assembly, channel aggregation."""

import numpy as np
import pytest

from hubnet.attention import attend_stack
from hubnet.errors import ConfigError
from hubnet.hub import (
    CHANNELS,
    ClipFeatures,
    HubParams,
    SelectionConfig,
    TemporalMemory,
    actor_hub,
    build_memory,
    context_hub,
    hub_forward,
    merge_token_banks,
    np_cosine,
    select_clips,
)
from hubnet.rng import Rng
from hubnet.tensor import Tensor, concat, grad_check, matmul, mul, sum_all


def bank(tokens, ids=None):
    return ClipFeatures(tokens=np.asarray(tokens, dtype=float), token_ids=ids)


def summaries_bank(summaries):
    """One token per clip, so clip summaries equal the tokens."""
    arr = np.asarray(summaries, dtype=float)[:, None, :]
    return ClipFeatures(tokens=arr)


def brute_force_select(features, t, cfg):
    """Independent oracle: sort every candidate by the documented key."""
    anchor = features.clip_summary[t]

    def pick(cands):
        ranked = sorted(
            cands, key=lambda c: (-np_cosine(features.clip_summary[c], anchor), abs(c - t), c)
        )
        return sorted(ranked[: cfg.top_k])

    past = pick([c for c in range(features.num_clips) if t - cfg.window <= c < t])
    future = pick([c for c in range(features.num_clips) if t < c <= t + cfg.window])
    return past, future


class TestClipFeatures:
    def test_summary_computed_as_token_mean(self):
        b = bank(np.arange(24).reshape(2, 3, 4))
        assert np.allclose(b.clip_summary, b.tokens.mean(axis=1))

    def test_wrong_summary_rejected(self):
        with pytest.raises(Exception):
            ClipFeatures(tokens=np.ones((2, 2, 2)), clip_summary=np.zeros((2, 2)))

    def test_merge_token_banks(self):
        a = bank(np.ones((2, 2, 3)), ids=np.array([[1, 2], [1, 2]]))
        c = bank(np.zeros((2, 4, 3)))
        merged = merge_token_banks(a, c)
        assert merged.tokens.shape == (2, 6, 3)
        assert merged.token_ids[0].tolist() == [1, 2, -1, -1, -1, -1]


class TestSelectClips:
    def test_boundary_clip_has_empty_past(self):
        b = summaries_bank(Rng(0).normal_array((5, 3)))
        past, future = select_clips(b, 0, SelectionConfig(window=2, top_k=2))
        assert past == []
        assert future != []

    def test_k_equals_w_saturates(self):
        b = summaries_bank(Rng(1).normal_array((7, 3)))
        past, future = select_clips(b, 3, SelectionConfig(window=3, top_k=3))
        assert past == [0, 1, 2]
        assert future == [4, 5, 6]

    def test_worked_example(self):
        s = 1 / np.sqrt(2)
        b = summaries_bank([(1, 0), (0, 1), (s, s), (1, 0), (-1, 0)])
        past, future = select_clips(b, 3, SelectionConfig(window=3, top_k=2))
        assert past == [0, 2]
        assert future == [4]

    def test_matches_brute_force_exhaustively(self):
        rng = Rng(2)
        for total in range(1, 13):
            b = summaries_bank(rng.normal_array((total, 3)))
            for w in range(1, 6):
                for k in range(1, w + 1):
                    cfg = SelectionConfig(window=w, top_k=k)
                    for t in range(total):
                        assert select_clips(b, t, cfg) == brute_force_select(b, t, cfg)

    def test_tie_break_prefers_temporal_proximity(self):
        b = summaries_bank([(1.0, 0.0)] * 5)  # all clips identical
        past, future = select_clips(b, 2, SelectionConfig(window=2, top_k=1))
        assert past == [1]
        assert future == [3]


class TestBuildMemory:
    def test_selected_past_concatenates_tokens(self):
        rng = Rng(3)
        b = bank(rng.normal_array((5, 4, 3)))
        mem = build_memory(b, 4, SelectionConfig(window=4, top_k=2))
        assert len(mem.past) == 1
        assert mem.past[0].shape == (8, 3)

    def test_empty_future_is_null_marker(self):
        b = bank(Rng(4).normal_array((3, 2, 3)))
        mem = build_memory(b, 2, SelectionConfig(window=2, top_k=1))
        assert mem.future == []
        assert len(mem.current) == 1

    def test_deterministic_and_cached(self):
        b = bank(Rng(5).normal_array((4, 2, 3)))
        cfg = SelectionConfig(window=2, top_k=1)
        m1 = build_memory(b, 2, cfg)
        m2 = build_memory(b, 2, cfg)
        assert m1 is m2  # same immutable memory is reused

    def test_exclusion_scopes(self):
        ids = np.tile(np.array([7, 8]), (4, 1))
        b = bank(Rng(6).normal_array((4, 2, 3)), ids=ids)
        cfg = SelectionConfig(window=1, top_k=1)
        everywhere = build_memory(b, 1, cfg, exclude_actor=7, exclusion_scope="all")
        current_only = build_memory(b, 1, cfg, exclude_actor=7, exclusion_scope="current")
        assert everywhere.past[0].shape[0] == 1
        assert current_only.past[0].shape[0] == 2
        assert everywhere.current[0].shape[0] == 1
        assert current_only.current[0].shape[0] == 1

    def test_selection_off_keeps_per_clip_items(self):
        b = bank(Rng(7).normal_array((6, 2, 3)))
        mem = build_memory(b, 3, SelectionConfig(window=2, top_k=1), use_selection=False)
        assert len(mem.past) == 2
        assert len(mem.future) == 2

    def test_temporal_off_empties_sides(self):
        b = bank(Rng(8).normal_array((6, 2, 3)))
        mem = build_memory(b, 3, SelectionConfig(window=2, top_k=1), use_temporal=False)
        assert mem.past == [] and mem.future == []
        assert len(mem.current) == 1


def make_hub(rng, dim, layers=2, **kw):
    return HubParams.init(dim, layers, rng, **kw)


class TestHubForward:
    def test_channel_symmetry_with_shared_stacks(self):
        rng = Rng(9)
        p = make_hub(rng, 4, share_channels=True)
        row = rng.normal_array((1, 4))
        mem = TemporalMemory(
            past=[Tensor(row.copy())], current=[Tensor(row.copy())], future=[Tensor(row.copy())]
        )
        q = Tensor(rng.normal_array((1, 4)))
        out = hub_forward(q, mem, p)
        c = attend_stack(q, Tensor(row), Tensor(row), p.stacks["past"])
        expected = matmul(concat([c, c, c], axis=1), p.w_agg)
        assert np.allclose(out.data, expected.data, atol=1e-12)
        blocks = [c.data for _ in range(3)]
        assert np.allclose(blocks[0], blocks[1], atol=1e-12)

    def test_averaging_aggregator(self):
        rng = Rng(10)
        p = make_hub(rng, 3, share_channels=True)
        eye = np.eye(3)
        p.w_agg = Tensor(np.vstack([eye, eye, eye]) / 3.0, requires_grad=True)
        mem = TemporalMemory(
            past=[Tensor(rng.normal_array((2, 3)))],
            current=[Tensor(rng.normal_array((2, 3)))],
            future=[Tensor(rng.normal_array((2, 3)))],
        )
        q = Tensor(rng.normal_array((1, 3)))
        out = hub_forward(q, mem, p)
        parts = [
            attend_stack(q, mem.channel(n)[0], mem.channel(n)[0], p.stacks[n]).data
            for n in CHANNELS
        ]
        assert np.allclose(out.data, np.mean(parts, axis=0), atol=1e-12)

    def test_empty_channel_uses_null_token(self):
        rng = Rng(11)
        p = make_hub(rng, 4)
        mem = TemporalMemory(past=[], current=[Tensor(rng.normal_array((2, 4)))], future=[])
        q = Tensor(rng.normal_array((1, 4)))
        out = hub_forward(q, mem, p)
        null = p.null_tokens["past"]
        manual_past = attend_stack(q, null, null, p.stacks["past"])
        assert out.shape == (1, 4)
        # gradient reaches the null token
        err = grad_check(
            lambda: sum_all(hub_forward(q, mem, p)),
            [p.null_tokens["past"], p.null_tokens["future"]],
        )
        assert err < 1e-5
        assert manual_past.shape == (1, 4)

    def test_output_dim_fixed_across_memory_sizes(self):
        rng = Rng(12)
        p = make_hub(rng, 4)
        q = Tensor(rng.normal_array((1, 4)))
        for rows in (1, 3, 9):
            mem = TemporalMemory(
                past=[Tensor(rng.normal_array((rows, 4)))],
                current=[Tensor(rng.normal_array((2, 4)))],
                future=[],
            )
            assert hub_forward(q, mem, p).shape == (1, 4)

    def test_gradients_through_hub(self):
        rng = Rng(13)
        p = make_hub(rng, 4, layers=1)
        q = Tensor(rng.normal_array((1, 4)), requires_grad=True)
        b = bank(rng.normal_array((4, 2, 4)))
        probe = Tensor(rng.normal_array((1, 4)))
        named = [("q", q)] + list(p.named_tensors("hub"))

        def f():
            mem = build_memory(b, 1, SelectionConfig(window=2, top_k=1))
            return sum_all(mul(hub_forward(q, mem, p), probe))

        assert grad_check(f, [t for _, t in named]) < 1e-5

    def test_clip_index_shift_invariance(self):
        rng = Rng(14)
        p = make_hub(rng, 3)
        cfg = SelectionConfig(window=2, top_k=2)
        tokens = rng.normal_array((6, 2, 3))
        q = Tensor(rng.normal_array((1, 3)))
        base = hub_forward(q, build_memory(bank(tokens), 2, cfg), p).data
        shifted = np.concatenate([np.zeros((1, 2, 3)), tokens], axis=0)  # shift indices by +1
        out = hub_forward(q, build_memory(bank(shifted), 3, cfg), p).data
        assert np.allclose(out, base, atol=1e-12)


class TestSpecializations:
    def test_lone_actor_collapses_to_null_channels(self):
        rng = Rng(15)
        p = make_hub(rng, 4)
        ids = np.zeros((3, 1), dtype=int) + 5
        b = bank(rng.normal_array((3, 1, 4)), ids=ids)
        q = Tensor(rng.normal_array((1, 4)))
        out = actor_hub(q, 5, 1, b, SelectionConfig(window=1, top_k=1), p)
        nulls = TemporalMemory(past=[], current=[], future=[])
        manual = hub_forward(q, nulls, p)
        assert np.array_equal(out.data, manual.data)

    def test_two_actor_memory_is_other_actor(self):
        rng = Rng(16)
        p = make_hub(rng, 4)
        ids = np.tile(np.array([1, 2]), (3, 1))
        tokens = rng.normal_array((3, 2, 4))
        b = bank(tokens, ids=ids)
        cfg = SelectionConfig(window=1, top_k=1)
        q = Tensor(rng.normal_array((1, 4)))
        got = actor_hub(q, 1, 1, b, cfg, p)
        other = tokens[:, 1:2, :]
        manual_mem = TemporalMemory(
            past=[Tensor(other[0])], current=[Tensor(other[1])], future=[Tensor(other[2])]
        )
        manual = hub_forward(q, manual_mem, p)
        assert np.allclose(got.data, manual.data, atol=1e-14)

    def test_self_exclusion_changes_output(self):
        rng = Rng(17)
        p = make_hub(rng, 4)
        ids = np.tile(np.array([1, 2]), (3, 1))
        b = bank(rng.normal_array((3, 2, 4)), ids=ids)
        cfg = SelectionConfig(window=1, top_k=1)
        q = Tensor(rng.normal_array((1, 4)))
        excluded = actor_hub(q, 1, 1, b, cfg, p)
        mem_all = build_memory(b, 1, cfg)  # nothing excluded
        not_excluded = hub_forward(q, mem_all, p)
        assert not np.allclose(excluded.data, not_excluded.data)

    def test_context_hub_single_token_symmetry(self):
        rng = Rng(18)
        p = make_hub(rng, 4, share_channels=True)
        token = rng.normal_array((1, 1, 4))
        tokens = np.repeat(token, 3, axis=0)
        b = bank(tokens)
        q = Tensor(rng.normal_array((1, 4)))
        out = context_hub(q, 1, b, SelectionConfig(window=1, top_k=1), p)
        row = Tensor(token[0])
        c = attend_stack(q, row, row, p.stacks["past"])
        expected = matmul(concat([c, c, c], axis=1), p.w_agg)
        assert np.allclose(out.data, expected.data, atol=1e-12)

    def test_composite_grad_check(self):
        rng = Rng(19)
        hh = make_hub(rng, 4, layers=1)
        hc = make_hub(rng, 4, layers=1)
        ids = np.tile(np.array([1, 2]), (4, 1))
        human = bank(rng.normal_array((4, 2, 4)), ids=ids)
        ctx = bank(rng.normal_array((4, 3, 4)))
        cfg = SelectionConfig(window=2, top_k=1)
        q = Tensor(rng.normal_array((1, 4)), requires_grad=True)
        probe = Tensor(rng.normal_array((1, 4)))
        params = [q] + [t for _, t in hh.named_tensors("hh")] + [t for _, t in hc.named_tensors("hc")]

        def f():
            mid = actor_hub(q, 1, 2, human, cfg, hh)
            out = context_hub(mid, 2, ctx, cfg, hc)
            return sum_all(mul(out, probe))

        assert grad_check(f, params) < 1e-5


def test_selection_config_validation():
    with pytest.raises(ConfigError):
        SelectionConfig(window=2, top_k=3)
    with pytest.raises(ConfigError):
        SelectionConfig(window=1, top_k=0)

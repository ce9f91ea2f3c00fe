"""Model composition: ablation semantics, heads, init, keypoint embedding."""

import numpy as np
import pytest

from hubnet.data import SyntheticConfig, generate
from hubnet.errors import ConfigError, ShapeError
from hubnet.hub import build_memory, hub_forward
from hubnet.model import (
    ActorQuery,
    AblationFlags,
    MlpParams,
    ModelConfig,
    TaskMode,
    count_params,
    embed_keypoints,
    init_params,
    modality_forward,
    predict,
)
from hubnet.rng import Rng
from hubnet.tensor import Tensor, grad_check, mul, sum_all

TOY = dict(dim=8, classes=3, attn_layers=1, head_hidden=6, kp_hidden=5, window=2, top_k=1)


def toy_setup(seed=0, task=TaskMode.STAL, flags=None, **cfg_kw):
    merged = {**TOY, **cfg_kw}
    mcfg = ModelConfig(**merged)
    flags = flags or AblationFlags()
    data_cfg = SyntheticConfig(
        seed=seed, num_videos=2, clips=4, actors=2, tokens=3,
        dim=merged["dim"], classes=merged["classes"], task=task,
        raw_keypoints=merged.get("raw_keypoints", False),
    )
    videos = generate(data_cfg)
    params = init_params(mcfg, flags, Rng(seed).spawn(100))
    return mcfg, flags, videos, params


class TestAblationFlags:
    def test_requires_a_modality(self):
        with pytest.raises(ConfigError):
            AblationFlags(modalities=())

    def test_requires_some_block(self):
        with pytest.raises(ConfigError):
            AblationFlags(use_hh=False, use_hc=False)

    def test_merged_variant_needs_both_blocks(self):
        with pytest.raises(ConfigError):
            AblationFlags(use_hierarchy=False, use_hh=False)

    def test_consistency_needs_two_modalities(self):
        with pytest.raises(ConfigError):
            AblationFlags(modalities=("vis",), use_consistency=True)
        AblationFlags(modalities=("vis",), use_consistency=False)

    def test_active_order_is_canonical(self):
        flags = AblationFlags(modalities=("key", "vis"))
        assert flags.active_modalities() == ("vis", "key")


class TestModalityForward:
    def test_full_composition_equals_manual_chaining(self):
        mcfg, flags, videos, params = toy_setup()
        video = videos[0]
        machine = params.machines["vis"]
        q = ActorQuery(vec=video.query_vec("vis", 0, 1, params), actor_id=video.actor_ids[0], time=1, modality="vis")
        got = modality_forward(q, video, machine, flags, mcfg)

        from hubnet.hub import actor_hub, context_hub

        mid = actor_hub(
            q.vec, q.actor_id, q.time, video.human_bank(), mcfg.selection, machine.hh,
            self_exclusion=mcfg.self_exclusion,
        )
        want = context_hub(mid, q.time, video.context, mcfg.selection, machine.hc)
        assert np.array_equal(got.data, want.data)

    def test_skip_hh_goes_straight_to_context(self):
        mcfg, _, videos, params = toy_setup()
        flags = AblationFlags(use_hh=False, use_consistency=False)
        video = videos[0]
        machine = params.machines["vis"]
        q = ActorQuery(vec=video.query_vec("vis", 1, 2, params), actor_id=video.actor_ids[1], time=2, modality="vis")
        got = modality_forward(q, video, machine, flags, mcfg)

        from hubnet.hub import context_hub

        want = context_hub(q.vec, 2, video.context, mcfg.selection, machine.hc)
        assert np.array_equal(got.data, want.data)

    def test_skip_hc_is_actor_block_only(self):
        mcfg, _, videos, params = toy_setup()
        flags = AblationFlags(use_hc=False, use_consistency=False)
        video = videos[0]
        machine = params.machines["vis"]
        q = ActorQuery(vec=video.query_vec("vis", 0, 0, params), actor_id=video.actor_ids[0], time=0, modality="vis")
        got = modality_forward(q, video, machine, flags, mcfg)

        from hubnet.hub import actor_hub

        want = actor_hub(
            q.vec, q.actor_id, 0, video.human_bank(), mcfg.selection, machine.hh,
            self_exclusion=mcfg.self_exclusion,
        )
        assert np.array_equal(got.data, want.data)

    def test_merged_variant_attends_over_union(self):
        mcfg, _, videos, params = toy_setup()
        flags = AblationFlags(use_hierarchy=False, use_consistency=False)
        video = videos[0]
        machine = params.machines["vis"]
        q = ActorQuery(vec=video.query_vec("vis", 0, 1, params), actor_id=video.actor_ids[0], time=1, modality="vis")
        got = modality_forward(q, video, machine, flags, mcfg)
        merged = video.merged_bank("vis")
        mem = build_memory(
            merged, 1, mcfg.selection, exclude_actor=video.actor_ids[0], exclusion_scope="all"
        )
        want = hub_forward(q.vec, mem, machine.hh)
        assert np.array_equal(got.data, want.data)
        assert merged.tokens.shape[1] == 2 + 3  # actors + context tokens

    def test_temporal_off_equals_boundary_free_null_channels(self):
        # on a single-clip video the sides are already null: the ablation
        # is a strict generalization and outputs must be identical
        mcfg, flags_on, videos, params = toy_setup()
        flags_off = AblationFlags(use_temporal=False)
        data_cfg = SyntheticConfig(
            seed=3, num_videos=1, clips=1, actors=2, tokens=3, dim=8, classes=3
        )
        video = generate(data_cfg)[0]
        machine = params.machines["vis"]
        q = ActorQuery(vec=video.query_vec("vis", 0, 0, params), actor_id=video.actor_ids[0], time=0, modality="vis")
        on = modality_forward(q, video, machine, flags_on, mcfg)
        off = modality_forward(q, video, machine, flags_off, mcfg)
        assert np.array_equal(on.data, off.data)

    def test_depth_two_applies_stage_twice(self):
        mcfg, flags, videos, params = toy_setup(depth=2)
        video = videos[0]
        machine = params.machines["vis"]
        machine_d1 = type(machine)(hh=machine.hh, hc=machine.hc, depth=1)
        q = ActorQuery(vec=video.query_vec("vis", 0, 1, params), actor_id=video.actor_ids[0], time=1, modality="vis")
        once = modality_forward(q, video, machine_d1, flags, mcfg)
        q2 = ActorQuery(vec=once, actor_id=q.actor_id, time=1, modality="vis")
        twice_manual = modality_forward(q2, video, machine_d1, flags, mcfg)
        got = modality_forward(q, video, machine, flags, mcfg)
        assert np.array_equal(got.data, twice_manual.data)

    def test_gradcheck_through_modality_forward(self):
        mcfg, flags, videos, params = toy_setup(dim=4, attn_layers=1, classes=3)
        video = videos[0]
        machine = params.machines["vis"]
        q_vec = Tensor(video.vis[1, 0][None, :].copy(), requires_grad=True)
        probe = Tensor(Rng(5).normal_array((1, 4)))
        named = [("q", q_vec)] + list(machine.named_tensors("m"))

        def f():
            q = ActorQuery(vec=q_vec, actor_id=video.actor_ids[0], time=1, modality="vis")
            return sum_all(mul(modality_forward(q, video, machine, flags, mcfg), probe))

        assert grad_check(f, [t for _, t in named]) < 1e-5


class TestPredict:
    def test_stal_scores_in_unit_interval(self):
        mcfg, flags, videos, params = toy_setup()
        out = predict(videos[0], params, TaskMode.STAL, flags, mcfg)
        n_rows = videos[0].num_clips * len(videos[0].actor_ids)
        assert out.scores.shape == (n_rows, 3)
        assert ((out.scores.data > 0) & (out.scores.data < 1)).all()
        assert len(out.rows) == n_rows

    def test_stal_classes_independent(self):
        mcfg, flags, videos, params = toy_setup()
        out1 = predict(videos[0], params, TaskMode.STAL, flags, mcfg)
        params.head.b2.data[0, 0] += 3.0  # shift one class logit
        out2 = predict(videos[0], params, TaskMode.STAL, flags, mcfg)
        assert not np.allclose(out1.scores.data[:, 0], out2.scores.data[:, 0])
        assert np.allclose(out1.scores.data[:, 1:], out2.scores.data[:, 1:])

    def test_gar_scores_form_simplex(self):
        mcfg, flags, videos, params = toy_setup(task=TaskMode.GAR)
        out = predict(videos[0], params, TaskMode.GAR, flags, mcfg)
        assert out.scores.shape == (1, 3)
        assert out.scores.data.sum() == pytest.approx(1.0, abs=1e-12)

    def test_gar_single_actor_single_clip_degenerate_mean(self):
        mcfg = ModelConfig(**TOY)
        flags = AblationFlags()
        data_cfg = SyntheticConfig(
            seed=4, num_videos=1, clips=1, actors=1, tokens=3, dim=8, classes=3,
            task=TaskMode.GAR,
        )
        video = generate(data_cfg)[0]
        params = init_params(mcfg, flags, Rng(4).spawn(100))
        out = predict(video, params, TaskMode.GAR, flags, mcfg)
        emb = {m: e.data.copy() for m, e in out.embeddings.items()}
        fused = np.concatenate([emb["vis"], emb["key"]], axis=1)
        logits = np.maximum(fused @ params.head.w1.data + params.head.b1.data, 0.0)
        logits = logits @ params.head.w2.data + params.head.b2.data
        want = np.exp(logits - logits.max())
        want /= want.sum()
        assert np.allclose(out.scores.data, want, atol=1e-12)

    def test_gar_actor_order_invariance(self):
        mcfg, flags, videos, params = toy_setup(task=TaskMode.GAR)
        video = videos[0]
        out = predict(video, params, TaskMode.GAR, flags, mcfg)
        swapped = type(video)(
            video_id=video.video_id,
            actor_ids=list(reversed(video.actor_ids)),
            context=video.context,
            vis=video.vis[:, ::-1].copy(),
            key=video.key[:, ::-1].copy(),
            stal_labels=None,
            gar_class=video.gar_class,
        )
        out2 = predict(swapped, params, TaskMode.GAR, flags, mcfg)
        assert np.allclose(out.scores.data, out2.scores.data, atol=1e-12)

    def test_relabeling_actor_ids_preserves_predictions(self):
        mcfg, flags, videos, params = toy_setup()
        video = videos[0]
        out = predict(video, params, TaskMode.STAL, flags, mcfg)
        relabeled = type(video)(
            video_id=video.video_id,
            actor_ids=[a + 1000 for a in video.actor_ids],
            context=video.context,
            vis=video.vis,
            key=video.key,
            stal_labels=video.stal_labels,
            gar_class=None,
        )
        out2 = predict(relabeled, params, TaskMode.STAL, flags, mcfg)
        assert np.array_equal(out.scores.data, out2.scores.data)

    def test_single_modality_head_width(self):
        flags = AblationFlags(modalities=("vis",), use_consistency=False)
        mcfg, _, videos, _ = toy_setup()
        params = init_params(mcfg, flags, Rng(0).spawn(100))
        assert params.head.w1.shape == (mcfg.dim, TOY["head_hidden"])
        out = predict(videos[0], params, TaskMode.STAL, flags, mcfg)
        assert "key" not in out.embeddings


class TestInitParams:
    def test_same_seed_same_params(self):
        mcfg = ModelConfig(**TOY)
        flags = AblationFlags()
        a = init_params(mcfg, flags, Rng(7).spawn(100))
        b = init_params(mcfg, flags, Rng(7).spawn(100))
        for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_glorot_bound_for_dxd(self):
        mcfg = ModelConfig(**{**TOY, "dim": 4})
        params = init_params(mcfg, AblationFlags(), Rng(1).spawn(100))
        bound = np.sqrt(6.0 / 8.0)
        w = params.machines["vis"].hh.stacks["past"].layers[0].w_q.data
        assert np.abs(w).max() <= bound

    def test_param_count_matches_formula(self):
        for share in (False, True):
            for mods in (("vis", "key"), ("vis",)):
                flags = AblationFlags(modalities=mods, use_consistency=len(mods) == 2)
                mcfg = ModelConfig(**{**TOY, "dim": 4, "share_channels": share, "raw_keypoints": True})
                params = init_params(mcfg, flags, Rng(2).spawn(100))
                actual = sum(t.data.size for _, t in params.named_tensors())
                assert actual == count_params(mcfg, flags)

    def test_null_token_scale(self):
        mcfg = ModelConfig(**TOY)
        params = init_params(mcfg, AblationFlags(), Rng(3).spawn(100))
        nulls = np.concatenate(
            [params.machines["vis"].hh.null_tokens[c].data.ravel() for c in ("past", "current", "future")]
        )
        assert np.abs(nulls).max() < 0.1  # draws from N(0, 0.02^2)


class TestEmbedKeypoints:
    def make_embedder(self, seed=0, dim=6):
        return MlpParams.init(51, 5, dim, Rng(seed))

    def test_zero_weights_zero_embedding(self):
        emb = self.make_embedder()
        for t in (emb.w1, emb.b1, emb.w2, emb.b2):
            t.data[:] = 0.0
        kp = Rng(1).uniform_array((17, 3))
        assert np.array_equal(embed_keypoints(kp, emb).data, np.zeros((1, 6)))

    def test_out_of_range_clamped_with_warning(self):
        emb = self.make_embedder()
        kp = Rng(2).uniform_array((17, 3))
        kp[0, 0] = 1.7
        with pytest.warns(RuntimeWarning):
            out = embed_keypoints(kp, emb)
        clamped = kp.copy()
        clamped[0, 0] = 1.0
        assert np.array_equal(out.data, embed_keypoints(clamped, emb).data)

    def test_fixed_weight_regression(self):
        emb = self.make_embedder(seed=42, dim=4)
        kp = Rng(43).uniform_array((17, 3))
        out = embed_keypoints(kp, emb)
        hidden = np.maximum(kp.reshape(1, 51) @ emb.w1.data + emb.b1.data, 0.0)
        want = hidden @ emb.w2.data + emb.b2.data
        assert np.allclose(out.data, want, atol=1e-14)

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            embed_keypoints(np.zeros((16, 3)), self.make_embedder())

    def test_gradient(self):
        emb = self.make_embedder(seed=5, dim=4)
        kp = Rng(6).uniform_array((17, 3))
        probe = Tensor(Rng(7).normal_array((1, 4)))
        params = [emb.w1, emb.b1, emb.w2, emb.b2]
        err = grad_check(lambda: sum_all(mul(embed_keypoints(kp, emb), probe)), params)
        assert err < 1e-5

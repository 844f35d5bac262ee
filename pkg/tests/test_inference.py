"""Unmasking schedule, iterative generation, refinement, and text decoding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import semar.toyworld as tw
from semar import inference as inf
from semar.backbone import BackboneConfig
from semar.config import spec_by_id
from semar.diffusion import DiffusionHeadConfig
from semar.model import UnifiedModel

SMALL_BB = dict(num_layers=2, dim=32, num_heads=2)
SMALL_HEAD = dict(timesteps=20, width=32, depth=2, time_dim=8)


def tiny_model(exp="exp3", seed=0):
    return UnifiedModel(np.random.default_rng(seed), spec_by_id(exp),
                        BackboneConfig(**SMALL_BB), DiffusionHeadConfig(**SMALL_HEAD))


class TestUnmaskSchedule:
    def test_single_step_commits_everything(self):
        sch = inf.UnmaskSchedule(1)
        assert sch.remaining() == [tw.NUM_SLOTS, 0]
        assert sch.commit_counts() == [tw.NUM_SLOTS]

    def test_four_step_cosine_counts(self):
        # ceil(cos(pi/2 * s/4) * 16) for s=1..3 gives 15, 12, 7
        sch = inf.UnmaskSchedule(4)
        assert sch.remaining() == [16, 15, 12, 7, 0]
        assert sch.commit_counts() == [1, 3, 5, 7]

    def test_one_commit_per_slot_max_steps(self):
        sch = inf.UnmaskSchedule(tw.NUM_SLOTS)
        assert sch.commit_counts() == [1] * tw.NUM_SLOTS

    @given(steps=st.integers(1, tw.NUM_SLOTS))
    @settings(max_examples=30, deadline=None)
    def test_schedule_invariants(self, steps):
        sch = inf.UnmaskSchedule(steps)
        rem = sch.remaining()
        counts = sch.commit_counts()
        assert rem[0] == tw.NUM_SLOTS and rem[-1] == 0
        assert all(a > b for a, b in zip(rem, rem[1:]))  # strict progress
        assert all(c >= 1 for c in counts)
        assert sum(counts) == tw.NUM_SLOTS

    def test_fraction_endpoints(self):
        sch = inf.UnmaskSchedule(5)
        assert sch.fraction(0) == pytest.approx(1.0)
        assert sch.fraction(5) == pytest.approx(0.0, abs=1e-12)

    def test_invalid_steps_rejected(self):
        with pytest.raises(ValueError):
            inf.UnmaskSchedule(0)
        with pytest.raises(ValueError):
            inf.UnmaskSchedule(tw.NUM_SLOTS + 1)


class TestGeneration:
    def _caption(self, seed=3):
        scene = tw.generate_corpus(1, seed=seed)[0]
        return tw.caption(scene)

    def test_all_slots_committed_no_doubles(self):
        model = tiny_model()
        sch = inf.UnmaskSchedule(4)
        state = inf.generate_image_semantic(
            model, [tw.VOCAB.bos] + self._caption(), sch, np.random.default_rng(0))
        assert state.is_committed.all()
        assert state.z_slots.shape == (tw.NUM_SLOTS, model.bb_cfg.dim)
        committed = [s for entry in state.trace for s in entry["committed"]]
        assert sorted(committed) == list(range(tw.NUM_SLOTS))

    def test_trace_matches_schedule(self):
        model = tiny_model()
        sch = inf.UnmaskSchedule(4)
        state = inf.generate_image_semantic(
            model, [tw.VOCAB.bos] + self._caption(), sch, np.random.default_rng(1))
        assert [len(e["committed"]) for e in state.trace] == sch.commit_counts()
        assert [e["remaining"] for e in state.trace] == sch.remaining()[1:]

    def test_generation_deterministic(self):
        model = tiny_model()
        outs = []
        for _ in range(2):
            state = inf.generate_image_semantic(
                model, [tw.VOCAB.bos] + self._caption(), inf.UnmaskSchedule(3),
                np.random.default_rng(7))
            outs.append(state.committed.copy())
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_decode_image_shape_and_range(self):
        model = tiny_model()
        state = inf.generate_image_semantic(
            model, [tw.VOCAB.bos] + self._caption(), inf.UnmaskSchedule(2),
            np.random.default_rng(2))
        raster = inf.decode_image(model, state.z_slots, np.random.default_rng(3))
        side = tw.GRID * tw.CELL
        assert raster.shape == (side, side, 3)
        assert raster.min() >= 0.0 and raster.max() <= 1.0

    def test_decode_image_rejects_bad_shape(self):
        model = tiny_model()
        with pytest.raises(ValueError, match="slot states"):
            inf.decode_image(model, np.zeros((3, model.bb_cfg.dim)),
                             np.random.default_rng(0))


class TestRefine:
    def _completed_state(self, model, seed=0):
        cap = tw.caption(tw.generate_corpus(1, seed=5)[0])
        return inf.generate_image_semantic(
            model, [tw.VOCAB.bos] + cap, inf.UnmaskSchedule(2),
            np.random.default_rng(seed))

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            inf.RefineConfig(regenerate_fraction=1.5)
        with pytest.raises(ValueError):
            inf.RefineConfig(order="backwards")

    def test_zero_rounds_is_identity(self):
        model = tiny_model()
        state = self._completed_state(model)
        before = state.committed.copy()
        trace_len = len(state.trace)
        inf.refine(model, state, inf.RefineConfig(rounds=0), np.random.default_rng(0))
        np.testing.assert_array_equal(state.committed, before)
        assert len(state.trace) == trace_len

    def test_zero_fraction_scores_only(self):
        model = tiny_model()
        state = self._completed_state(model)
        before = state.committed.copy()
        inf.refine(model, state,
                   inf.RefineConfig(rounds=2, regenerate_fraction=0.0),
                   np.random.default_rng(0))
        np.testing.assert_array_equal(state.committed, before)
        assert [set(e) for e in state.trace[-2:]] == [{"refine_score"}] * 2

    def test_refine_rewrites_selected_slots(self):
        model = tiny_model()
        state = self._completed_state(model)
        inf.refine(model, state,
                   inf.RefineConfig(rounds=1, regenerate_fraction=0.25),
                   np.random.default_rng(4))
        assert state.is_committed.all()
        entry = state.trace[-1]
        assert len(entry["refined"]) == 4  # ceil(0.25 * 16)
        assert "refine_score" in entry

    def test_sequential_order_also_completes(self):
        model = tiny_model()
        state = self._completed_state(model)
        inf.refine(model, state,
                   inf.RefineConfig(rounds=1, regenerate_fraction=0.2,
                                    order="original"),
                   np.random.default_rng(4))
        assert state.is_committed.all()
        assert len(state.trace[-1]["refined"]) == 4  # ceil(0.2 * 16)

    def test_incomplete_state_rejected(self):
        model = tiny_model()
        state = self._completed_state(model)
        state.is_committed[0] = False
        with pytest.raises(ValueError, match="completed"):
            inf.refine(model, state, inf.RefineConfig(), np.random.default_rng(0))


class TestGenerateText:
    def test_stop_prompt_returns_empty(self):
        model = tiny_model()
        out = inf.generate_text(model, [tw.VOCAB.bos, tw.VOCAB.eos])
        assert out == []

    def test_respects_max_len_and_vocab(self):
        model = tiny_model()
        out = inf.generate_text(model, [tw.VOCAB.bos], max_len=5)
        assert len(out) <= 5
        assert all(0 <= t < len(tw.VOCAB) for t in out)

    def test_sampling_without_rng_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError, match="rng"):
            inf.generate_text(model, [tw.VOCAB.bos], temperature=1.0)

    def test_greedy_deterministic(self):
        model = tiny_model()
        a = inf.generate_text(model, [tw.VOCAB.bos], max_len=8)
        b = inf.generate_text(model, [tw.VOCAB.bos], max_len=8)
        assert a == b

    def test_embedding_prompt_entries(self):
        model = tiny_model()
        emb = np.zeros(model.bb_cfg.dim, dtype=np.float32)
        prompt = [tw.VOCAB.bos, tw.VOCAB.boi, ("emb", emb), ("emb", emb), tw.VOCAB.eoi]
        out = inf.generate_text(model, prompt, max_len=4)
        assert isinstance(out, list)


class TestRoundtrip:
    def test_terminates_and_returns_tokens(self):
        model = tiny_model()
        cap = tw.caption(tw.generate_corpus(1, seed=9)[0])
        out = inf.roundtrip_caption(model, cap, inf.UnmaskSchedule(2),
                                    np.random.default_rng(0), max_len=10)
        assert isinstance(out, list) and len(out) <= 10
        assert all(0 <= t < len(tw.VOCAB) for t in out)

    def test_deterministic_given_rng(self):
        model = tiny_model()
        cap = tw.caption(tw.generate_corpus(1, seed=9)[0])
        runs = [inf.roundtrip_caption(model, cap, inf.UnmaskSchedule(2),
                                      np.random.default_rng(11)) for _ in range(2)]
        assert runs[0] == runs[1]

"""Trainer tests: mask-rate statistics, batch layout, loss switching,
overfitting a small corpus, determinism, and failure handling."""

import json

import numpy as np
import pytest

import semar.tensor as T
from semar import nn
from semar import toyworld as tw
from semar import trainer
from semar.backbone import IMAGE, PAD, TEXT, BackboneConfig
from semar.config import TrainConfig, spec_by_id
from semar.diffusion import DiffusionHeadConfig
from semar.model import UnifiedModel

SMALL_BB = dict(num_layers=2, dim=32, num_heads=2)
SMALL_HEAD = dict(timesteps=20, width=32, depth=2, time_dim=8)


def samples(n=16, seed=0):
    return [tw.make_sample(s) for s in tw.generate_corpus(n, seed=seed)]


class TestMaskRate:
    def test_within_clamp(self):
        cfg = TrainConfig()
        rng = np.random.default_rng(0)
        draws = [trainer.draw_mask_rate(cfg, rng) for _ in range(2000)]
        lo, hi = cfg.mask_clamp
        assert min(draws) >= lo and max(draws) <= hi

    def test_mean_near_mask_mean(self):
        cfg = TrainConfig()
        rng = np.random.default_rng(1)
        draws = [trainer.draw_mask_rate(cfg, rng) for _ in range(20000)]
        # clamping at 1.0 pulls the mean slightly below 0.7
        assert abs(float(np.mean(draws)) - cfg.mask_mean) < 0.02

    def test_respects_custom_clamp(self):
        cfg = TrainConfig(mask_mean=0.5, mask_std=10.0, mask_clamp=(0.2, 0.4))
        rng = np.random.default_rng(2)
        draws = [trainer.draw_mask_rate(cfg, rng) for _ in range(200)]
        assert min(draws) >= 0.2 and max(draws) <= 0.4


class TestBatchLayout:
    def test_understanding_rows(self):
        cfg = TrainConfig(gen_fraction=0.0, caption_drop=0.0)  # caption always kept
        batch = trainer.make_batch(samples(4), cfg, np.random.default_rng(0))
        v = tw.VOCAB
        for row in range(4):
            ids = batch.token_ids[row]
            assert ids[0] == v.bos and ids[1] == v.boi
            assert (batch.modality[row, 2:18] == IMAGE).all()
            assert ids[18] == v.eoi
            assert not batch.masked[row].any()          # understanding: no masking
            # caption follows eoi, then <q> question <a> answer <eos>
            rest = list(ids[19:])
            q_at = rest.index(v.q)
            assert rest[q_at + 7] == v.a                # questions are 6 tokens
            # next-token targets start at eoi and stop before eos
            t_on = np.flatnonzero(batch.text_targets[row] >= 0)
            assert t_on[0] == 18
            tgts = batch.text_targets[row, t_on]
            assert (tgts == batch.token_ids[row, t_on + 1]).all()
            assert tgts[-1] == v.eos

    def test_understanding_caption_dropped(self):
        cfg = TrainConfig(gen_fraction=0.0, caption_drop=1.0)  # never keep caption
        batch = trainer.make_batch(samples(4), cfg, np.random.default_rng(0))
        v = tw.VOCAB
        for row in range(4):
            assert batch.token_ids[row, 19] == v.q      # question right after eoi

    def test_generation_rows(self):
        cfg = TrainConfig(gen_fraction=1.0)
        batch = trainer.make_batch(samples(6), cfg, np.random.default_rng(0))
        v = tw.VOCAB
        for row in range(6):
            ids = batch.token_ids[row]
            boi = int(np.flatnonzero(ids == v.boi)[0])
            assert ids[0] == v.bos
            assert (batch.modality[row, boi + 1:boi + 17] == IMAGE).all()
            eoi = boi + 17
            assert ids[eoi] == v.eoi and ids[eoi + 1] == v.eos
            assert batch.masked[row].any()              # generation rows mask slots
            # caption tokens and the eos-after-eoi are supervised
            t_on = np.flatnonzero(batch.text_targets[row] >= 0)
            assert list(t_on[:boi]) == list(range(boi))
            assert batch.text_targets[row, eoi] == v.eos
            # no supervision inside the image span
            assert (batch.text_targets[row, boi + 1:eoi] == -1).all()

    def test_masked_counts_follow_rate(self):
        cfg = TrainConfig(gen_fraction=1.0, mask_mean=0.5, mask_std=0.0)
        batch = trainer.make_batch(samples(8), cfg, np.random.default_rng(0))
        assert (batch.masked.sum(axis=1) == 8).all()    # ceil(0.5 * 16)

    def test_pixel_targets_only_on_masked(self):
        cfg = TrainConfig(gen_fraction=1.0)
        sams = samples(4)
        batch = trainer.make_batch(sams, cfg, np.random.default_rng(0))
        norms = np.linalg.norm(batch.pixel_targets, axis=-1)
        assert (norms[~batch.masked] == 0).all()
        # masked positions carry the sample's true cell latent (may be a zero
        # vector when the cell is empty)
        for row in range(4):
            for t in np.flatnonzero(batch.masked[row]):
                cell = batch.slot_index[row, t]
                assert np.array_equal(batch.pixel_targets[row, t],
                                      sams[row].pixel_latents[cell])

    def test_padding_rows_marked(self):
        cfg = TrainConfig(gen_fraction=0.5)
        batch = trainer.make_batch(samples(8), cfg, np.random.default_rng(0))
        for row in range(8):
            pads = batch.modality[row] == PAD
            if pads.any():
                assert (batch.token_ids[row, pads] == tw.VOCAB.pad).all()
                assert (batch.text_targets[row, pads] == -1).all()

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            trainer.make_batch([], TrainConfig(), np.random.default_rng(0))

    def test_construction_spec_independent_rng(self):
        # identical rng stream regardless of which experiment will consume it
        cfg = TrainConfig()
        a = trainer.make_batch(samples(8), cfg, np.random.default_rng(9))
        b = trainer.make_batch(samples(8), cfg, np.random.default_rng(9))
        assert np.array_equal(a.token_ids, b.token_ids)
        assert np.array_equal(a.masked, b.masked)


class TestTotalLoss:
    def _comps(self, spec, seed=0):
        model = UnifiedModel(np.random.default_rng(seed), spec,
                             BackboneConfig(**SMALL_BB), DiffusionHeadConfig(**SMALL_HEAD))
        cfg = TrainConfig(gen_fraction=1.0)
        batch = trainer.make_batch(samples(4), cfg, np.random.default_rng(1))
        return model.forward_batch(batch, np.random.default_rng(2)), cfg

    def test_exp1_is_text_only(self):
        comps, cfg = self._comps(spec_by_id("exp1"))
        loss = trainer.total_loss(comps, spec_by_id("exp1"), cfg)
        want = float(comps["text"].data) + float(comps["zloss"].data)
        assert float(loss.data) == pytest.approx(want, rel=1e-6)

    def test_exp3_adds_weighted_components(self):
        comps, cfg = self._comps(spec_by_id("exp3"))
        loss = trainer.total_loss(comps, spec_by_id("exp3"), cfg)
        want = float(comps["text"].data) + float(comps["zloss"].data) \
            + cfg.alpha * float(comps["ploss"].data) \
            + cfg.beta * float(comps["diffu"].data)
        assert float(loss.data) == pytest.approx(want, rel=1e-5)

    def test_nan_component_aborts(self):
        comps, cfg = self._comps(spec_by_id("exp3"))
        comps["ploss"].data = np.array(np.nan, dtype=np.float32)
        with pytest.raises(trainer.TrainerError, match="ploss"):
            trainer.total_loss(comps, spec_by_id("exp3"), cfg)


class TestMetricTimeline:
    def test_strictly_increasing_steps(self):
        tl = trainer.MetricTimeline()
        tl.append({"step": 1})
        tl.append({"step": 5})
        with pytest.raises(ValueError, match="increasing"):
            tl.append({"step": 5})
        assert tl.final()["step"] == 5


class TestTraining:
    def _run(self, tmp_path, exp="exp3", steps=8, seed=0, name="r", corpus=24):
        scenes = tw.generate_corpus(corpus, seed=5)
        cfg = TrainConfig(batch_size=4, steps=steps, eval_every=max(steps // 2, 1),
                          eval_qa=8, eval_roundtrips=1, eval_size=8, seed=seed,
                          warmup_steps=10)
        return trainer.train(spec_by_id(exp), cfg, scenes, tmp_path / name,
                             bb_cfg=BackboneConfig(**SMALL_BB),
                             head_cfg=DiffusionHeadConfig(**SMALL_HEAD)), cfg

    def test_writes_metrics_and_checkpoint(self, tmp_path):
        tl, cfg = self._run(tmp_path)
        rows = [json.loads(l) for l in
                (tmp_path / "r" / "metrics.jsonl").read_text().splitlines()]
        assert rows[-1]["step"] == 8
        assert set(rows[0]) == {"step", "samples_seen", "loss_text", "loss_ploss",
                                "loss_diffu", "qa_accuracy", "attribute_preservation"}
        assert (tmp_path / "r" / "checkpoints" / "step000008.ckpt").is_file()
        assert (tmp_path / "r" / "timings.json").is_file()
        assert tl.final()["step"] == 8

    def test_metrics_deterministic(self, tmp_path):
        self._run(tmp_path, name="a")
        self._run(tmp_path, name="b")
        assert (tmp_path / "a" / "metrics.jsonl").read_text() == \
            (tmp_path / "b" / "metrics.jsonl").read_text()

    def test_seed_changes_metrics(self, tmp_path):
        self._run(tmp_path, name="a", seed=0)
        self._run(tmp_path, name="b", seed=1)
        assert (tmp_path / "a" / "metrics.jsonl").read_text() != \
            (tmp_path / "b" / "metrics.jsonl").read_text()

    def test_evaluate_qa_limit_override(self):
        from semar.evals import qa_accuracy
        model = UnifiedModel(np.random.default_rng(0), spec_by_id("exp3"),
                             BackboneConfig(**SMALL_BB),
                             DiffusionHeadConfig(**SMALL_HEAD))
        samples = [tw.make_sample(s) for s in tw.generate_corpus(6, seed=3)]
        cfg = TrainConfig(eval_qa=4, eval_roundtrips=0)
        small = trainer.evaluate(model, samples, cfg, seed=0, step=1)
        big = trainer.evaluate(model, samples, cfg, seed=0, step=1, qa_limit=16)
        assert small["qa_accuracy"] == qa_accuracy(model, samples, limit=4)
        assert big["qa_accuracy"] == qa_accuracy(model, samples, limit=16)

    def test_final_eval_qa_budget(self, tmp_path):
        # eval_qa_final touches only the last metrics row
        scenes = tw.generate_corpus(24, seed=5)
        rows = {}
        for name, final in (("a", None), ("b", 64)):
            cfg = TrainConfig(batch_size=4, steps=4, eval_every=2, eval_qa=1,
                              eval_qa_final=final, eval_roundtrips=0,
                              eval_size=8, warmup_steps=10)
            trainer.train(spec_by_id("exp3"), cfg, scenes, tmp_path / name,
                          bb_cfg=BackboneConfig(**SMALL_BB),
                          head_cfg=DiffusionHeadConfig(**SMALL_HEAD))
            rows[name] = [json.loads(l) for l in
                          (tmp_path / name / "metrics.jsonl").read_text().splitlines()]
        assert rows["a"][:-1] == rows["b"][:-1]
        assert rows["a"][-1]["qa_accuracy"] in (0.0, 1.0)  # one question
        assert rows["b"][-1]["qa_accuracy"] not in (0.0, 1.0)

    def test_overfit_small_corpus(self, tmp_path):
        # text loss halves and the cosine alignment turns strongly positive;
        # the diffusion term only shrinks (it floors at irreducible noise)
        scenes = tw.generate_corpus(4, seed=6)
        cfg = TrainConfig(batch_size=4, steps=200, eval_every=200, eval_qa=4,
                          eval_roundtrips=0, eval_size=4, lr=5e-3,
                          gen_fraction=1.0)
        spec = spec_by_id("exp3")
        rng = np.random.default_rng(0)
        model = UnifiedModel(np.random.default_rng(0), spec,
                             BackboneConfig(**SMALL_BB), DiffusionHeadConfig(**SMALL_HEAD))
        opt = nn.AdamW(model.named_params(), lr=cfg.lr, weight_decay=0.0)
        sams = [tw.make_sample(s) for s in scenes]
        text, plosses, diffu = [], [], []
        for step in range(cfg.steps):
            batch = trainer.make_batch(sams, cfg, rng)
            comps = model.forward_batch(batch, rng)
            loss = trainer.total_loss(comps, spec, cfg)
            model.zero_grad()
            T.backward(loss)
            opt.step(nn.cosine_lr(step, cfg.steps, cfg.lr))
            model.update_target(cfg.ema_momentum)
            text.append(float(comps["text"].data))
            plosses.append(float(comps["ploss"].data))
            diffu.append(float(comps["diffu"].data))
        assert np.mean(text[-10:]) < 0.5 * np.mean(text[:10]), (text[:10], text[-10:])
        assert np.mean(plosses[-10:]) < -0.8, plosses[-10:]
        assert np.mean(diffu[-10:]) < np.mean(diffu[:10])

    def test_warm_start_trains_head_first(self, tmp_path):
        tl, _ = self._run(tmp_path, exp="exp4", steps=4, name="w")
        assert (tmp_path / "w" / "metrics.jsonl").is_file()

    def test_empty_corpus_rejected(self, tmp_path):
        with pytest.raises(trainer.TrainerError, match="empty"):
            trainer.train(spec_by_id("exp1"), TrainConfig(), [], tmp_path / "x")

    def test_resolve_steps_default(self):
        cfg = TrainConfig(batch_size=32)
        assert cfg.resolve_steps(20000) == 1875
        assert TrainConfig(batch_size=32, steps=7).resolve_steps(20000) == 7


class TestWarmupDataset:
    def test_classes_and_latents(self):
        scenes = tw.generate_corpus(50, seed=3)
        data = trainer.warmup_dataset(scenes)
        assert len(data) == sum(len(s.objects) for s in scenes)
        n_classes = len(tw.SHAPES) * len(tw.COLORS)
        for cls, lat in data:
            assert 0 <= cls < n_classes
            assert lat.shape == (tw.DP,)
            assert np.linalg.norm(lat) > 0

    def test_class_is_shape_color_bijection(self):
        seen = {}
        for scenes in (tw.generate_corpus(200, seed=4),):
            for s in scenes:
                for o in s.objects:
                    seen.setdefault(trainer.shape_color_class(o), set()).add((o.shape, o.color))
        for cls, combos in seen.items():
            assert len(combos) == 1

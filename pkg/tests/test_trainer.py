"""Trainer tests: optimizer wiring, determinism, descent, and failure modes."""

import json
import math

import numpy as np
import pytest
import torch

from locret.losses import LossConfig, triplet_loss
from locret.mining import embed_condition_queries, sample_triplets
from locret.model import VisionLanguageModel, load_checkpoint, save_checkpoint
from locret.trainer import (TrainConfig, TrainingError, TrainReport,
                            evaluate_stage1_loss, stage1_steps_per_epoch,
                            train_stage1, train_stage2)

from conftest import tiny_model_config


def fresh_model(meta, seed=11):
    return VisionLanguageModel(tiny_model_config(meta)).init_weights(seed)


def snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def states_equal(a, b):
    return set(a) == set(b) and all(torch.equal(a[k], b[k]) for k in a)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(stage=3), dict(epochs=0),
                                        dict(lr_attention=-1e-3),
                                        dict(stage=1, batch_size=1)])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_stage2_allows_batch_of_one(self):
        assert TrainConfig(stage=2, batch_size=1).batch_size == 1

    def test_paper_preset_sets_published_rates(self):
        cfg = TrainConfig.paper()
        assert cfg.lr_attention == 5e-6 and cfg.lr_encoders == 5e-6
        assert TrainConfig.paper(lr_attention=1e-3).lr_attention == 1e-3

    def test_desk_default_rate(self):
        cfg = TrainConfig()
        assert cfg.lr_attention == 1e-3 and cfg.lr_encoders == 1e-3


class TestBatching:
    @pytest.mark.parametrize("n,batch,expected", [(5, 2, 2), (4, 2, 2), (6, 2, 3),
                                                  (2, 3, 1), (7, 3, 2), (9, 4, 2)])
    def test_trailing_singletons_dropped(self, n, batch, expected):
        assert stage1_steps_per_epoch(n, batch) == expected


class TestStage1:
    def test_zero_lr_leaves_weights_bitwise_unchanged(self, meta, small_corpus):
        model = fresh_model(meta)
        before = snapshot(model)
        cfg = TrainConfig(stage=1, epochs=1, batch_size=8,
                          lr_attention=0.0, lr_encoders=0.0)
        model, report = train_stage1(cfg, small_corpus, model)
        assert states_equal(before, snapshot(model))
        assert len(report.curves) == report.steps_per_epoch

    def test_same_seed_reproduces_curves_and_weights(self, meta, small_corpus):
        runs = []
        for _ in range(2):
            model = fresh_model(meta)
            cfg = TrainConfig(stage=1, epochs=2, batch_size=8, seed=4)
            model, report = train_stage1(cfg, small_corpus, model)
            runs.append((snapshot(model), report.curves))
        assert states_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_loss_descends_on_training_data(self, meta, small_corpus):
        model = fresh_model(meta)
        loss_cfg = LossConfig()
        before = evaluate_stage1_loss(model, small_corpus, loss_cfg)
        cfg = TrainConfig(stage=1, epochs=4, batch_size=8, seed=0)
        model, report = train_stage1(cfg, small_corpus, model)
        after = evaluate_stage1_loss(model, small_corpus, loss_cfg)
        assert after < before
        assert report.final_loss() < report.curves[0]["loss"]

    def test_curve_layout(self, meta, small_corpus):
        model = fresh_model(meta)
        cfg = TrainConfig(stage=1, epochs=3, batch_size=10, seed=1)
        _, report = train_stage1(cfg, small_corpus, model)
        assert report.steps_per_epoch == stage1_steps_per_epoch(len(small_corpus), 10)
        assert len(report.curves) == 3 * report.steps_per_epoch
        for i, rec in enumerate(report.curves):
            assert rec["step"] == i
            assert rec["stage"] == 1
            assert math.isfinite(rec["loss"])
            assert rec["loss"] == pytest.approx(
                rec["global"] + cfg.loss.beta * rec["local"], abs=1e-12)

    def test_flip_augment_changes_trajectory(self, meta, small_corpus):
        curves = {}
        for flip in (False, True):
            model = fresh_model(meta)
            cfg = TrainConfig(stage=1, epochs=1, batch_size=8, seed=2,
                              flip_augment=flip)
            _, report = train_stage1(cfg, small_corpus, model, meta.vocab)
            curves[flip] = report.curves
        assert curves[False] != curves[True]

    def test_flip_augment_without_vocab_is_rejected(self, meta, small_corpus):
        cfg = TrainConfig(stage=1, epochs=1, batch_size=8, flip_augment=True)
        with pytest.raises(TrainingError, match="vocabulary"):
            train_stage1(cfg, small_corpus, fresh_model(meta))

    def test_rejects_wrong_stage_config(self, meta, small_corpus):
        with pytest.raises(ValueError, match="stage must be 1"):
            train_stage1(TrainConfig(stage=2), small_corpus, fresh_model(meta))

    def test_rejects_tiny_corpus(self, meta, small_corpus):
        with pytest.raises(TrainingError, match="at least 2"):
            train_stage1(TrainConfig(stage=1), small_corpus[:1], fresh_model(meta))

    def test_non_finite_loss_aborts_with_step(self, meta, small_corpus):
        model = fresh_model(meta)
        with torch.no_grad():
            model.cls_proj.weight[0, 0] = float("nan")
        cfg = TrainConfig(stage=1, epochs=1, batch_size=8)
        with pytest.raises(TrainingError, match="non-finite") as exc:
            train_stage1(cfg, small_corpus, model)
        assert exc.value.step == 0


class TestStage2:
    def test_held_out_triplet_loss_decreases(self, meta, small_corpus):
        vocab = meta.vocab
        model = fresh_model(meta)
        held_out = sample_triplets(small_corpus, 24, seed=999)
        by_id = {s.id: s for s in small_corpus}

        def held_out_loss():
            conds = [t.condition for t in held_out]
            with torch.no_grad():
                a = embed_condition_queries(
                    model, vocab, [by_id[t.anchor_id] for t in held_out], conds)
                p = embed_condition_queries(
                    model, vocab, [by_id[t.positive_id] for t in held_out], conds)
                n = embed_condition_queries(
                    model, vocab, [by_id[t.negative_id] for t in held_out], conds)
            return triplet_loss(LossConfig(), a, p, n).item()

        before = held_out_loss()
        cfg = TrainConfig(stage=2, epochs=4, batch_size=8, seed=0)
        model, report = train_stage2(cfg, small_corpus, model, vocab)
        after = held_out_loss()
        assert after < before
        assert len(report.curves) == 4 * report.steps_per_epoch
        assert report.steps_per_epoch == len(small_corpus) // 8

    def test_same_seed_reproduces(self, meta, small_corpus):
        finals = []
        for _ in range(2):
            model = fresh_model(meta)
            cfg = TrainConfig(stage=2, epochs=1, batch_size=8, seed=3)
            model, report = train_stage2(cfg, small_corpus, model, meta.vocab)
            finals.append((snapshot(model), report.curves))
        assert states_equal(finals[0][0], finals[1][0])
        assert finals[0][1] == finals[1][1]

    def test_small_corpus_still_yields_one_step(self, meta, small_corpus):
        model = fresh_model(meta)
        cfg = TrainConfig(stage=2, epochs=1, batch_size=100, seed=0)
        _, report = train_stage2(cfg, small_corpus, model, meta.vocab)
        assert report.steps_per_epoch == 1
        assert len(report.curves) == 1

    def test_rejects_wrong_stage_config(self, meta, small_corpus):
        with pytest.raises(ValueError, match="stage must be 2"):
            train_stage2(TrainConfig(stage=1), small_corpus, fresh_model(meta),
                         meta.vocab)

    def test_resumes_from_stage1_checkpoint(self, meta, small_corpus, tmp_path):
        model = fresh_model(meta)
        cfg1 = TrainConfig(stage=1, epochs=1, batch_size=8, seed=0)
        model, _ = train_stage1(cfg1, small_corpus, model)
        path = tmp_path / "stage1.pt"
        save_checkpoint(model, path)
        resumed = load_checkpoint(path)
        assert states_equal(snapshot(model), snapshot(resumed))
        cfg2 = TrainConfig(stage=2, epochs=1, batch_size=8, seed=0)
        resumed, report = train_stage2(cfg2, small_corpus, resumed, meta.vocab)
        assert not states_equal(snapshot(model), snapshot(resumed))
        assert all(math.isfinite(r["loss"]) for r in report.curves)


class TestEvaluateAndReport:
    def test_evaluate_is_deterministic(self, meta, small_corpus):
        model = fresh_model(meta)
        a = evaluate_stage1_loss(model, small_corpus, LossConfig())
        b = evaluate_stage1_loss(model, small_corpus, LossConfig())
        assert a == b

    def test_evaluate_rejects_single_sample(self, meta, small_corpus):
        with pytest.raises(ValueError, match="at least 2"):
            evaluate_stage1_loss(fresh_model(meta), small_corpus[:1], LossConfig())

    def test_write_log_round_trips(self, meta, small_corpus, tmp_path):
        model = fresh_model(meta)
        cfg = TrainConfig(stage=1, epochs=1, batch_size=12, seed=0)
        _, report = train_stage1(cfg, small_corpus, model)
        path = tmp_path / "log.jsonl"
        report.write_log(path)
        parsed = [json.loads(line) for line in path.read_text().splitlines()]
        assert parsed == report.curves
        assert report.final_loss() == report.curves[-1]["loss"]

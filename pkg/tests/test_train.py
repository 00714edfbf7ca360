"""Tests for the training loop, schedules and training-time evaluation."""

import json

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from ctxfeat.checkpoint import load_checkpoint, save_checkpoint
from ctxfeat.config import (
    DataConfig,
    InferenceConfig,
    OptimizerConfig,
    RunConfig,
)
from ctxfeat.features import sample_at_keypoints
from ctxfeat.model import ModelConfig, build_model
from ctxfeat.sampling import sample_correspondences
from ctxfeat.synth import build_synthetic_dataset, load_training_example, read_manifest
from ctxfeat.train import (
    DESCRIPTOR_HEAD_PREFIXES,
    TrainingAborted,
    attention_consistency,
    evaluate_synthetic_pairs,
    pair_losses,
    polynomial_lr,
    prepare_pairs,
    set_descriptor_only,
    train,
    trainable_parameters,
)

torch.set_num_threads(1)

TINY = ModelConfig(
    backbone_channels=(4, 8, 16, 16),
    descriptor_dim=16,
    sub_descriptor_dim=4,
    agca_pool_size=16,
    agca_patch_size=8,
    agca_embed_dim=16,
    agca_depth=1,
    agca_heads=2,
)


def _tiny_config(epochs=2):
    return RunConfig(
        model=TINY,
        optimizer=OptimizerConfig(lr=1e-3, batch_size=2, epochs=epochs),
        data=DataConfig(
            pair_count=3, crop_size=128, seed=7, n_points=32, grid=(8, 8),
            nms_radius=2,
        ),
    )


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_ds")
    build_synthetic_dataset(out, 3, canvas_size=(128, 128), seed=7)
    return out


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory, dataset):
    """One completed 2-epoch run shared by the artifact tests."""
    out = tmp_path_factory.mktemp("run")
    final = train(_tiny_config(), out, dataset_dir=dataset)
    return out, final


class TestLearningRate:
    def test_first_step_is_base_lr(self):
        assert polynomial_lr(0.25, 0, 100, 0.9) == 0.25

    def test_midpoint_value(self):
        assert_allclose(
            polynomial_lr(0.001, 50, 100, 0.9), 0.001 * 0.5**0.9, rtol=1e-12
        )

    def test_linear_exponent(self):
        assert_allclose(polynomial_lr(1.0, 25, 100, 1.0), 0.75, rtol=1e-12)

    def test_monotonically_decreasing(self):
        values = [polynomial_lr(0.01, t, 40, 0.9) for t in range(40)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] > 0

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            polynomial_lr(0.01, 40, 40, 0.9)
        with pytest.raises(ValueError):
            polynomial_lr(0.01, -1, 40, 0.9)


class TestDescriptorOnlyFreeze:
    def test_freezes_everything_but_heads(self):
        model = build_model(TINY, seed=0)
        set_descriptor_only(model, True)
        for name, param in model.named_parameters():
            assert param.requires_grad == name.startswith(
                DESCRIPTOR_HEAD_PREFIXES
            ), name
        n_trainable = len(trainable_parameters(model))
        assert 0 < n_trainable < len(list(model.parameters()))

    def test_disable_restores_all(self):
        model = build_model(TINY, seed=0)
        set_descriptor_only(model, True)
        set_descriptor_only(model, False)
        assert all(p.requires_grad for p in model.parameters())


class TestPreparePairs:
    def test_correspondences_sampled_per_pair(self, dataset):
        records = read_manifest(dataset)
        prepared, skipped = prepare_pairs(dataset, records, 32, (8, 8), 2)
        assert skipped == []
        assert [p.record.pair_dir for p in prepared] == [
            r.pair_dir for r in records
        ]
        for item in prepared:
            assert len(item.correspondences.points_a) >= 2

    def test_matches_direct_sampling(self, dataset):
        records = read_manifest(dataset)
        prepared, _ = prepare_pairs(dataset, records[:1], 32, (8, 8), 2)
        example = load_training_example(dataset, records[0])
        direct = sample_correspondences(example.pair, example.teacher, 32, (8, 8), 2)
        assert_allclose(prepared[0].correspondences.points_a, direct.points_a)
        assert_allclose(prepared[0].correspondences.points_b, direct.points_b)


class TestPairLosses:
    def test_finite_scalars_with_gradients(self, dataset):
        records = read_manifest(dataset)
        example = load_training_example(dataset, records[0])
        corr = sample_correspondences(example.pair, example.teacher, 32, (8, 8), 2)
        model = build_model(TINY, seed=1)
        cfg = _tiny_config()
        l_det, l_des = pair_losses(model, example, corr, cfg.loss)
        assert l_det.shape == () and l_des.shape == ()
        assert torch.isfinite(l_det) and torch.isfinite(l_des)
        (l_det + l_des).backward()
        grads = [p.grad for p in model.parameters() if p.grad is not None]
        assert grads and all(torch.isfinite(g).all() for g in grads)


class TestTrainRun:
    def test_final_and_epoch_checkpoints_written(self, finished_run):
        out, final = finished_run
        assert final == out / "model.npz"
        assert final.exists()
        assert (out / "checkpoint_epoch001.npz").exists()
        assert (out / "checkpoint_epoch002.npz").exists()

    def test_final_checkpoint_counters(self, finished_run):
        _, final = finished_run
        ckpt = load_checkpoint(final)
        # 3 pairs, batch 2 -> 2 steps per epoch, 2 epochs
        assert ckpt.epoch == 2
        assert ckpt.step == 4
        assert ckpt.config == TINY

    def test_log_records_every_step(self, finished_run):
        out, _ = finished_run
        lines = (out / "train_log.jsonl").read_text().splitlines()
        entries = [json.loads(line) for line in lines]
        assert [e["step"] for e in entries] == [1, 2, 3, 4]
        assert [e["epoch"] for e in entries] == [0, 0, 1, 1]
        lrs = [e["lr"] for e in entries]
        assert lrs[0] == 1e-3
        assert all(a > b for a, b in zip(lrs, lrs[1:]))
        for e in entries:
            assert np.isfinite(e["loss_det"])
            assert np.isfinite(e["loss_des"])
            assert_allclose(e["loss_total"], e["loss_det"] + e["loss_des"], rtol=1e-5)

    def test_resolved_config_written(self, finished_run):
        out, _ = finished_run
        text = (out / "config.resolved").read_text()
        assert "optimizer.epochs = 2" in text
        assert "data.n_points = 32" in text

    def test_deterministic_rerun(self, dataset, finished_run, tmp_path):
        _, final = finished_run
        repeat = train(_tiny_config(), tmp_path / "again", dataset_dir=dataset)
        first = load_checkpoint(final).model_state
        second = load_checkpoint(repeat).model_state
        assert set(first) == set(second)
        for name in first:
            assert torch.equal(first[name], second[name]), name

    def test_resume_replays_uninterrupted_run(self, dataset, finished_run, tmp_path):
        out, final = finished_run
        resumed = train(
            _tiny_config(),
            tmp_path / "resumed",
            dataset_dir=dataset,
            resume=out / "checkpoint_epoch001.npz",
        )
        straight = load_checkpoint(final).model_state
        replayed = load_checkpoint(resumed).model_state
        for name in straight:
            assert torch.equal(straight[name], replayed[name]), name
        lines = (tmp_path / "resumed" / "train_log.jsonl").read_text().splitlines()
        assert [json.loads(l)["step"] for l in lines] == [3, 4]

    def test_resume_and_init_mutually_exclusive(self, dataset, tmp_path):
        with pytest.raises(ValueError, match="not both"):
            train(
                _tiny_config(),
                tmp_path / "o",
                dataset_dir=dataset,
                resume="a.npz",
                init_checkpoint="b.npz",
            )

    def test_empty_manifest_rejected(self, tmp_path):
        ds = tmp_path / "empty"
        ds.mkdir()
        (ds / "manifest.jsonl").write_text("")
        with pytest.raises(ValueError, match="no training pairs"):
            train(_tiny_config(), tmp_path / "out", dataset_dir=ds)


class TestDescriptorOnlyTraining:
    def test_backbone_untouched_heads_move(self, dataset, tmp_path):
        init = build_model(TINY, seed=11)
        init_path = tmp_path / "init.npz"
        save_checkpoint(init_path, init)
        final = train(
            _tiny_config(epochs=1),
            tmp_path / "run",
            dataset_dir=dataset,
            init_checkpoint=init_path,
            descriptor_only=True,
        )
        before = init.state_dict()
        after = load_checkpoint(final).model_state
        changed = []
        for name in before:
            if torch.equal(before[name], after[name]):
                continue
            changed.append(name)
            assert name.startswith(DESCRIPTOR_HEAD_PREFIXES), name
        assert changed


class TestAbortOnNonFinite:
    def test_poisoned_weights_abort_with_dump(self, dataset, tmp_path):
        model = build_model(TINY, seed=0)
        with torch.no_grad():
            model.desc_conv.weight.fill_(float("nan"))
        init_path = tmp_path / "poisoned.npz"
        save_checkpoint(init_path, model)
        out = tmp_path / "run"
        with pytest.raises(TrainingAborted, match="diagnostics"):
            train(
                _tiny_config(),
                out,
                dataset_dir=dataset,
                init_checkpoint=init_path,
            )
        assert list(out.glob("nonfinite_step*.npz"))


class TestAttentionConsistency:
    def test_matches_manual_average(self, dataset):
        records = read_manifest(dataset)
        model = build_model(TINY, seed=3).eval()
        total, count = 0.0, 0
        for record in records:
            example = load_training_example(dataset, record)
            corr = sample_correspondences(
                example.pair, example.teacher, 32, (8, 8), 2
            )
            images = np.stack([example.pair.image_a, example.pair.image_b])
            with torch.no_grad():
                desc, att, _ = model(
                    torch.from_numpy(images.astype(np.float32)).unsqueeze(1)
                )
            _, w_a = sample_at_keypoints(
                desc.d[0].double().numpy(),
                att.w[0].double().numpy(),
                corr.points_a.astype(np.float64),
            )
            _, w_b = sample_at_keypoints(
                desc.d[1].double().numpy(),
                att.w[1].double().numpy(),
                corr.points_b,
            )
            total += float(np.abs(w_a - w_b).sum())
            count += len(corr.points_a)
        expected = total / count
        got = attention_consistency(
            model, dataset, records, n_points=32, grid=(8, 8), nms_radius=2
        )
        assert_allclose(got, expected, rtol=1e-12)

    def test_no_usable_pairs_rejected(self, dataset):
        model = build_model(TINY, seed=3)
        with pytest.raises(ValueError, match="no usable correspondences"):
            attention_consistency(model, dataset, [])


class TestEvaluateSyntheticPairs:
    def test_report_covers_every_pair(self, dataset):
        records = read_manifest(dataset)
        model = build_model(TINY, seed=5).eval()
        report = evaluate_synthetic_pairs(
            model,
            dataset,
            records,
            InferenceConfig(alpha=0.2, nms_radius=2, max_keypoints=200),
        )
        assert report.n_pairs == len(records)
        assert report.counts["keypoints"] > 0
        for t, value in report.mma_per_threshold.items():
            assert 0.0 <= value <= 1.0, t
        assert 0.0 <= report.ha_per_threshold[3] <= 1.0

"""Training loop for the joint detector/descriptor on synthetic pairs.

One step draws a mini-batch of image pairs, runs both images of each pair
through the model in a single forward, and optimizes the sum of the
weighted-BCE detector loss (averaged over the two images) and the
attention-weighted triplet descriptor loss over precomputed pixel
correspondences. The learning rate follows a polynomial decay
lr0 * (1 - t/T)^exponent set before every step.

Everything is deterministic given the run seed: the per-epoch shuffle is
seeded by (seed, epoch), correspondence sampling has no randomness, and
checkpoints carry the Adam state, so a run resumed from an epoch
checkpoint replays the exact steps of an uninterrupted one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import InferenceConfig, RunConfig, write_config
from .features import extract_features, sample_at_keypoints, sample_descriptors_torch
from .losses import CorrespondenceBatch, LossConfig, descriptor_loss, detector_loss
from .metrics import DEFAULT_THRESHOLDS, MetricReport, evaluate_pair
from .model import FeatureModel, build_model
from .sampling import SampledCorrespondences, SamplingError, sample_correspondences
from .synth import PairRecord, TrainingExample, load_training_example, read_manifest

# Modules that shape the descriptor and attention outputs; the backbone and
# the detection headers stay frozen in descriptor-only mode.
DESCRIPTOR_HEAD_PREFIXES = ("agca.", "local_context.", "desc_conv.", "att_conv.")


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss stops the run."""


def polynomial_lr(
    base_lr: float, step: int, total_steps: int, exponent: float
) -> float:
    """lr0 * (1 - t/T)^exponent for 0-based step t of T total."""
    if not 0 <= step < max(total_steps, 1):
        raise ValueError(f"step {step} outside [0, {total_steps})")
    return base_lr * (1.0 - step / max(total_steps, 1)) ** exponent


def set_descriptor_only(model: FeatureModel, enabled: bool):
    """Freeze everything except the descriptor/attention heads."""
    for name, param in model.named_parameters():
        param.requires_grad_(
            not enabled or name.startswith(DESCRIPTOR_HEAD_PREFIXES)
        )


def trainable_parameters(model: FeatureModel) -> list[torch.nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


@dataclass(frozen=True)
class PreparedPair:
    """A manifest record with its frozen pixel correspondences."""

    record: PairRecord
    correspondences: SampledCorrespondences


def prepare_pairs(
    dataset_dir: str | Path,
    records: list[PairRecord],
    n_points: int,
    grid: tuple[int, int],
    nms_radius: int,
) -> tuple[list[PreparedPair], list[str]]:
    """Sample correspondences once per pair; drop pairs that yield < 2."""
    prepared, skipped = [], []
    for record in records:
        example = load_training_example(dataset_dir, record)
        try:
            corr = sample_correspondences(
                example.pair, example.teacher, n_points, grid, nms_radius
            )
        except SamplingError as exc:
            skipped.append(f"{record.pair_dir}: {exc}")
            continue
        prepared.append(PreparedPair(record=record, correspondences=corr))
    return prepared, skipped


def _pair_tensor(example: TrainingExample) -> torch.Tensor:
    stack = np.stack([example.pair.image_a, example.pair.image_b])
    return torch.from_numpy(stack.astype(np.float32)).unsqueeze(1)


def pair_losses(
    model: FeatureModel,
    example: TrainingExample,
    corr: SampledCorrespondences,
    loss_cfg: LossConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Detector and descriptor losses for one pair (single forward)."""
    desc, att, heat = model(_pair_tensor(example))
    labels_a = torch.from_numpy(example.labels_a.g.astype(np.float32))
    labels_b = torch.from_numpy(example.labels_b.g.astype(np.float32))
    l_det = 0.5 * (
        detector_loss(heat.fused[0], labels_a, loss_cfg.bce_weight)
        + detector_loss(heat.fused[1], labels_b, loss_cfg.bce_weight)
    )
    pts_a = torch.from_numpy(corr.points_a.astype(np.float64))
    pts_b = torch.from_numpy(corr.points_b)
    d_a, w_a = sample_descriptors_torch(desc.d[0:1], att.w[0:1], pts_a)
    d_b, w_b = sample_descriptors_torch(desc.d[1:2], att.w[1:2], pts_b)
    batch = CorrespondenceBatch(desc_a=d_a, desc_b=d_b, att_a=w_a, att_b=w_b)
    return l_det, descriptor_loss(batch, loss_cfg)


def _dump_nonfinite(
    out_dir: Path, epoch: int, step: int, lr: float, indices, dets, dess
) -> Path:
    path = out_dir / f"nonfinite_step{step:06d}.npz"
    np.savez(
        path,
        epoch=np.int64(epoch),
        step=np.int64(step),
        lr=np.float64(lr),
        pair_indices=np.asarray(indices, dtype=np.int64),
        loss_det=np.asarray([float(x) for x in dets]),
        loss_des=np.asarray([float(x) for x in dess]),
    )
    return path


def train(
    cfg: RunConfig,
    out_dir: str | Path,
    dataset_dir: str | Path | None = None,
    resume: str | Path | None = None,
    init_checkpoint: str | Path | None = None,
    descriptor_only: bool = False,
    log=None,
) -> Path:
    """Run the training loop; returns the path of the final checkpoint.

    resume continues an interrupted run from an epoch checkpoint
    (restoring weights, Adam state, epoch and step counters), while
    init_checkpoint only seeds the starting weights for a fresh run,
    which is how the temperature sweep retrains the descriptor heads.
    """
    if resume is not None and init_checkpoint is not None:
        raise ValueError("pass either resume or init_checkpoint, not both")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(out_dir / "config.resolved", cfg)
    dataset_dir = Path(dataset_dir or cfg.data.dataset_dir)
    say = log if log is not None else (lambda msg: None)

    records = read_manifest(dataset_dir)
    if not records:
        raise ValueError(f"no training pairs found under {dataset_dir}")
    prepared, skipped = prepare_pairs(
        dataset_dir,
        records,
        cfg.data.n_points,
        cfg.data.grid,
        cfg.data.nms_radius,
    )
    for note in skipped:
        say(f"skipping pair without correspondences: {note}")
    if not prepared:
        raise ValueError("every pair failed correspondence sampling")

    torch.manual_seed(cfg.data.seed)
    start_epoch, global_step = 0, 0
    if resume is not None:
        ck = load_checkpoint(resume)
        model = ck.build_model()
        start_epoch, global_step = ck.epoch, ck.step
    elif init_checkpoint is not None:
        model = load_checkpoint(init_checkpoint).build_model()
    else:
        model = build_model(cfg.model, seed=cfg.data.seed)
    set_descriptor_only(model, descriptor_only)
    model.train()

    optimizer = torch.optim.Adam(trainable_parameters(model), lr=cfg.optimizer.lr)
    if resume is not None and ck.optimizer_state is not None:
        optimizer.load_state_dict(ck.optimizer_state)

    n_batches = -(-len(prepared) // cfg.optimizer.batch_size)
    total_steps = cfg.optimizer.epochs * n_batches
    extra = {"run_seed": cfg.data.seed, "descriptor_only": descriptor_only}

    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "a" if resume is not None else "w") as log_file:
        for epoch in range(start_epoch, cfg.optimizer.epochs):
            order = np.random.default_rng([cfg.data.seed, epoch]).permutation(
                len(prepared)
            )
            for first in range(0, len(prepared), cfg.optimizer.batch_size):
                indices = order[first : first + cfg.optimizer.batch_size]
                lr = polynomial_lr(
                    cfg.optimizer.lr,
                    global_step,
                    total_steps,
                    cfg.optimizer.poly_exponent,
                )
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad()

                dets, dess = [], []
                for idx in indices:
                    item = prepared[idx]
                    example = load_training_example(dataset_dir, item.record)
                    try:
                        l_det, l_des = pair_losses(
                            model, example, item.correspondences, cfg.loss
                        )
                    except ValueError as exc:
                        # model outputs already non-finite (weights blew up
                        # on an earlier step): same abort path as below
                        dump = _dump_nonfinite(
                            out_dir, epoch, global_step, lr, indices, dets, dess
                        )
                        raise TrainingAborted(
                            f"invalid model output at epoch {epoch} step "
                            f"{global_step} ({exc}); diagnostics in {dump}"
                        ) from exc
                    dets.append(l_det)
                    dess.append(l_des)
                l_det = torch.stack(dets).mean()
                l_des = torch.stack(dess).mean()
                loss = l_det + l_des
                if not torch.isfinite(loss):
                    dump = _dump_nonfinite(
                        out_dir, epoch, global_step, lr, indices, dets, dess
                    )
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch} step {global_step}; "
                        f"diagnostics in {dump}"
                    )
                loss.backward()
                optimizer.step()
                global_step += 1
                l_det, l_des, loss = l_det.detach(), l_des.detach(), loss.detach()

                log_file.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "step": global_step,
                            "lr": lr,
                            "loss_det": float(l_det),
                            "loss_des": float(l_des),
                            "loss_total": float(loss),
                        }
                    )
                    + "\n"
                )
            log_file.flush()
            save_checkpoint(
                out_dir / f"checkpoint_epoch{epoch + 1:03d}.npz",
                model,
                optimizer,
                epoch=epoch + 1,
                step=global_step,
                extra=extra,
            )
            say(
                f"epoch {epoch + 1}/{cfg.optimizer.epochs}: "
                f"loss_det={float(l_det):.4f} loss_des={float(l_des):.4f} lr={lr:.2e}"
            )

    final = out_dir / "model.npz"
    save_checkpoint(
        final,
        model,
        optimizer,
        epoch=cfg.optimizer.epochs,
        step=global_step,
        extra=extra,
    )
    return final


def attention_consistency(
    model: FeatureModel,
    dataset_dir: str | Path,
    records: list[PairRecord],
    n_points: int = 128,
    grid: tuple[int, int] = (16, 16),
    nms_radius: int = 4,
) -> float:
    """Mean |w(p) - w'(warp(p))| over ground-truth correspondences.

    The points are drawn by the same teacher-guided protocol that
    produces training correspondences, so the score measures attention
    agreement exactly where descriptors are supervised. A head whose
    attention is stable under viewpoint and lighting change scores low;
    the value averages over every point of every pair, so pairs with
    more co-visible structure weigh proportionally.
    """
    model.eval()
    total, count = 0.0, 0
    for record in records:
        example = load_training_example(dataset_dir, record)
        try:
            corr = sample_correspondences(
                example.pair, example.teacher, n_points, grid, nms_radius
            )
        except SamplingError:
            continue
        pts_a = corr.points_a.astype(np.float64)
        pts_b = corr.points_b
        with torch.no_grad():
            desc, att, _ = model(_pair_tensor(example))
            d_a = desc.d[0].double().numpy()
            d_b = desc.d[1].double().numpy()
            w_a = att.w[0].double().numpy()
            w_b = att.w[1].double().numpy()
        _, att_a = sample_at_keypoints(d_a, w_a, pts_a)
        _, att_b = sample_at_keypoints(d_b, w_b, pts_b)
        total += float(np.abs(att_a - att_b).sum())
        count += len(pts_a)
    if count == 0:
        raise ValueError("no usable correspondences in any pair")
    return total / count


def evaluate_synthetic_pairs(
    model: FeatureModel,
    dataset_dir: str | Path,
    records: list[PairRecord],
    inference: InferenceConfig = InferenceConfig(),
    thresholds: tuple[int, ...] = DEFAULT_THRESHOLDS,
    ransac_seed: int = 0,
) -> MetricReport:
    """Extract, match and score every pair of a synthetic dataset."""
    model.eval()
    results = []
    for record in records:
        example = load_training_example(dataset_dir, record)
        pair = example.pair
        set_a = extract_features(
            model,
            pair.image_a,
            inference.alpha,
            inference.nms_radius,
            inference.max_keypoints,
        )
        set_b = extract_features(
            model,
            pair.image_b,
            inference.alpha,
            inference.nms_radius,
            inference.max_keypoints,
        )
        results.append(
            evaluate_pair(
                set_a,
                set_b,
                pair.homography,
                pair.image_a.shape,
                mode=inference.match_mode,
                thresholds=thresholds,
                ransac_seed=ransac_seed,
            )
        )
    return MetricReport.aggregate(results)

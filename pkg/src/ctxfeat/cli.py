"""Command-line operator surface.

Subcommands: synth, train, extract, match, eval, gradcheck, t-sweep.
All of them take --config (flat key=value file), --set dotted.key=value
overrides, --seed and --threads. Relative output paths resolve under
$CTXFEAT_OUTPUT_ROOT when it is set. Every command that produces files
also writes the fully resolved configuration next to them, so re-running
from that file reproduces the outputs under the same seeds.

Exit status is 0 on success and 1 on any failure; failures print a
single line to stderr prefixed "ctxfeat: error:".
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import cv2
import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import (
    RunConfig,
    apply_overrides,
    read_config,
    set_config_value,
    write_config,
)
from .features import (
    MATCH_MODES,
    extract_features,
    match,
    read_features,
    write_features,
)
from .homography import HomographyParams
from .hpatches import read_hpatches_layout
from .losses import (
    CorrespondenceBatch,
    LossConfig,
    descriptor_loss,
    run_gradient_checks,
)
from .metrics import MetricReport, evaluate_pair, save_mma_curve
from .synth import (
    PhotometricParams,
    build_corpus_dataset,
    build_synthetic_dataset,
    read_manifest,
    to_gray_unit,
)
from .train import TrainingAborted, evaluate_synthetic_pairs, train

OUTPUT_ROOT_ENV = "CTXFEAT_OUTPUT_ROOT"
ERROR_PREFIX = "ctxfeat: error:"
WARNING_PREFIX = "ctxfeat: warning:"

# The hand-checkable two-pair descriptor-loss example: orthogonal second
# pair, first pair rotated by acos(0.6), unit attention, T=15.
WORKED_EXAMPLE_VALUE = 0.4239
WORKED_EXAMPLE_TOL = 1e-4


class CliError(RuntimeError):
    pass


def _warn(msg: str):
    print(f"{WARNING_PREFIX} {msg}", file=sys.stderr)


def _resolve_out(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.toy() if getattr(args, "toy", False) else RunConfig()
    if args.config is not None:
        cfg = read_config(args.config, base=cfg)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = set_config_value(cfg, "data.seed", str(args.seed))
    return cfg


def _apply_threads(threads: int | None):
    if threads is not None:
        if threads < 1:
            raise CliError("--threads must be >= 1")
        torch.set_num_threads(threads)
        cv2.setNumThreads(threads)


def _load_model(checkpoint: str | Path):
    model = load_checkpoint(checkpoint).build_model()
    model.eval()
    return model


def _crop_to_model_size(image: np.ndarray) -> np.ndarray | None:
    """Top-left crop to dimensions divisible by 8, or None if too small."""
    h8, w8 = (image.shape[0] // 8) * 8, (image.shape[1] // 8) * 8
    if h8 < 32 or w8 < 32:
        return None
    if (h8, w8) != image.shape:
        image = image[:h8, :w8]
    return image


def _read_image_for_model(path: str | Path) -> np.ndarray | None:
    """Grayscale [0,1] image cropped to dimensions divisible by 8."""
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        return None
    return _crop_to_model_size(to_gray_unit(raw))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out)
    count = args.count if args.count is not None else cfg.data.pair_count
    crop = cfg.data.crop_size
    if cfg.data.corpus_dir:
        summary = build_corpus_dataset(
            out,
            cfg.data.corpus_dir,
            count,
            crop_size=crop,
            seed=cfg.data.seed,
        )
    else:
        summary = build_synthetic_dataset(
            out, count, canvas_size=(crop, crop), seed=cfg.data.seed
        )
    write_config(out / "config.resolved", cfg)
    print(
        f"synth: wrote {summary['count']} pairs to {out} "
        f"(mean valid-mask coverage {summary['mean_valid_mask_coverage']:.3f})"
    )
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out)
    try:
        final = train(
            cfg,
            out,
            dataset_dir=args.data,
            resume=args.resume,
            init_checkpoint=args.init,
            descriptor_only=args.descriptor_only,
            log=print,
        )
    except TrainingAborted as exc:
        raise CliError(str(exc)) from exc
    print(f"train: final checkpoint {final}")
    return 0


def cmd_extract(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.checkpoint)
    inf = cfg.inference
    written = 0
    for image_path in args.images:
        image = _read_image_for_model(image_path)
        if image is None:
            _warn(f"skipping unreadable or too-small image: {image_path}")
            continue
        kp = extract_features(
            model, image, inf.alpha, inf.nms_radius, inf.max_keypoints
        )
        dest = out / (Path(image_path).stem + ".features.txt")
        write_features(dest, str(image_path), image.shape, kp)
        print(f"extract: {image_path} -> {dest} ({len(kp)} keypoints)")
        written += 1
    write_config(out / "config.resolved", cfg)
    if written == 0:
        raise CliError("no readable input images")
    return 0


def cmd_match(args, cfg: RunConfig) -> int:
    _, _, set_a = read_features(args.features_a)
    _, _, set_b = read_features(args.features_b)
    mode = args.mode or cfg.inference.match_mode
    matches = match(set_a, set_b, mode)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        f.write(f"{len(matches)} {matches.mode}\n")
        for ia, ib, dist in zip(
            matches.indices_a, matches.indices_b, matches.distances
        ):
            xa, ya = set_a.coords[ia]
            xb, yb = set_b.coords[ib]
            f.write(f"{ia} {ib} {xa:.9g} {ya:.9g} {xb:.9g} {yb:.9g} {dist:.9g}\n")
    print(f"match: {len(matches)} mutual matches ({mode}) -> {out}")
    return 0


def _write_eval_outputs(out: Path, cfg: RunConfig, report: MetricReport, skipped):
    out.mkdir(parents=True, exist_ok=True)
    payload = json.loads(report.to_json())
    payload["skipped_sequences"] = list(skipped)
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    table = report.to_table()
    if skipped:
        table += "\n" + "\n".join(f"skipped: {s}" for s in skipped)
    (out / "report.txt").write_text(table + "\n")
    save_mma_curve(report, str(out / "mma_curve.png"))
    write_config(out / "config.resolved", cfg)
    print(table)
    print(f"eval: report written to {out}")


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _load_model(args.checkpoint)
    inf = cfg.inference
    if args.mode:
        inf = replace(inf, match_mode=args.mode)
    out = _resolve_out(args.out)
    if args.synthetic:
        records = read_manifest(args.dataset)
        report = evaluate_synthetic_pairs(
            model, args.dataset, records, inf, ransac_seed=cfg.data.seed
        )
        _write_eval_outputs(out, cfg, report, [])
        return 0

    pairs, skipped = read_hpatches_layout(args.dataset, args.sequences)
    if not pairs:
        raise CliError(f"no usable sequences under {args.dataset}")
    results = []
    for pair in pairs:
        ref = _crop_to_model_size(pair.ref_image)
        tgt = _crop_to_model_size(pair.tgt_image)
        if ref is None or tgt is None:
            skipped.append(f"{pair.sequence}/{pair.pair_name}: image too small")
            continue
        set_a = extract_features(
            model, ref, inf.alpha, inf.nms_radius, inf.max_keypoints
        )
        set_b = extract_features(
            model, tgt, inf.alpha, inf.nms_radius, inf.max_keypoints
        )
        results.append(
            evaluate_pair(
                set_a,
                set_b,
                pair.gt_homography,
                ref.shape,
                mode=inf.match_mode,
                ransac_seed=cfg.data.seed,
            )
        )
    if not results:
        raise CliError("every sequence pair was skipped")
    _write_eval_outputs(out, cfg, MetricReport.aggregate(results), skipped)
    return 0


def _worked_example_loss() -> float:
    desc_a = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    desc_b = torch.tensor([[0.6, 0.8], [0.0, 1.0]], dtype=torch.float64)
    ones = torch.ones(2, dtype=torch.float64)
    batch = CorrespondenceBatch(
        desc_a=desc_a, desc_b=desc_b, att_a=ones, att_b=ones.clone()
    )
    return float(descriptor_loss(batch, LossConfig(temperature=15.0)))


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    value = _worked_example_loss()
    example_ok = abs(value - WORKED_EXAMPLE_VALUE) <= WORKED_EXAMPLE_TOL
    print(
        f"gradcheck: worked_example value={value:.10f} "
        f"expected={WORKED_EXAMPLE_VALUE} tol={WORKED_EXAMPLE_TOL} "
        f"status={'pass' if example_ok else 'fail'}"
    )
    report = run_gradient_checks(trials=args.trials, seed=cfg.data.seed, cfg=cfg.loss)
    print(
        f"gradcheck: closed_form max_abs_err={report.positive_grad_max_abs_err:.3e} "
        f"tol=1e-06"
    )
    for group in sorted(report.group_rel_err):
        print(
            f"gradcheck: group={group} "
            f"max_abs_err={report.group_max_abs_err[group]:.3e} "
            f"rel_err={report.group_rel_err[group]:.3e}"
        )
    print(f"gradcheck: degenerate_skipped={report.degenerate_skipped}")
    ok = report.passed() and example_ok
    if not ok:
        worst = max(report.group_rel_err, key=report.group_rel_err.get, default="-")
        print(
            f"gradcheck: status=fail worst_group={worst} "
            f"worst_rel_err={report.max_rel_err:.3e} tol=1e-04"
        )
        raise CliError("gradient check failed")
    print(f"gradcheck: status=pass max_rel_err={report.max_rel_err:.3e} tol=1e-04")
    return 0


def cmd_t_sweep(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    temperatures = [float(t) for t in args.temperatures.split(",") if t]
    if not temperatures:
        raise CliError("no temperatures given")
    eval_records = read_manifest(args.eval_data)
    rows = {}
    for t in temperatures:
        cfg_t = replace(cfg, loss=replace(cfg.loss, temperature=t))
        run_dir = out / f"T{t:g}"
        final = train(
            cfg_t,
            run_dir,
            dataset_dir=args.data,
            init_checkpoint=args.init,
            descriptor_only=True,
            log=print,
        )
        model = _load_model(final)
        report = evaluate_synthetic_pairs(
            model, args.eval_data, eval_records, cfg.inference,
            ransac_seed=cfg.data.seed,
        )
        rows[f"{t:g}"] = {
            "temperature": t,
            "mma_at_3": report.mma_per_threshold[3],
            "matching_score": report.matching_score,
            "ha_at_3": report.ha_per_threshold[3],
            "n_pairs": report.n_pairs,
            "checkpoint": str(final),
        }
        print(
            f"t-sweep: T={t:g} mma@3={rows[f'{t:g}']['mma_at_3']:.4f} "
            f"ms={report.matching_score:.4f}"
        )
    (out / "t_sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    lines = [f"{'T':>8} {'MMA@3':>8} {'M.S.':>8} {'HA@3':>8}"]
    for key in rows:
        r = rows[key]
        lines.append(
            f"{key:>8} {r['mma_at_3']:8.4f} {r['matching_score']:8.4f} "
            f"{r['ha_at_3']:8.4f}"
        )
    (out / "t_sweep.txt").write_text("\n".join(lines) + "\n")
    write_config(out / "config.resolved", cfg)
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    sub.add_argument("--seed", type=int, help="run seed (sets data.seed)")
    sub.add_argument("--threads", type=int, help="torch/opencv thread count")
    sub.add_argument(
        "--toy", action="store_true", help="start from the toy preset"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxfeat",
        description="Context-aware local feature pipeline: data synthesis, "
        "training, extraction, matching and evaluation.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic training dataset")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--count", type=int, help="pair count (default data.pair_count)")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="train the detector/descriptor model")
    p.add_argument("--data", help="dataset directory (default data.dataset_dir)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", help="continue from an epoch checkpoint")
    p.add_argument("--init", help="initial weights for a fresh run")
    p.add_argument(
        "--descriptor-only",
        action="store_true",
        help="freeze backbone and detector, train descriptor heads only",
    )
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("extract", help="extract keypoints and descriptors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="directory for feature files")
    p.add_argument("images", nargs="+", help="input image files")
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = subs.add_parser("match", help="match two feature export files")
    p.add_argument("--features-a", required=True)
    p.add_argument("--features-b", required=True)
    p.add_argument("--out", required=True, help="match output file")
    p.add_argument("--mode", choices=MATCH_MODES)
    _add_common(p)
    p.set_defaults(func=cmd_match)

    p = subs.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument(
        "--synthetic",
        action="store_true",
        help="dataset is a generated manifest dataset, not sequence folders",
    )
    p.add_argument("--sequences", help="file listing sequence names to evaluate")
    p.add_argument("--mode", choices=MATCH_MODES)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck", help="verify loss gradients numerically")
    p.add_argument("--trials", type=int, default=100)
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser(
        "t-sweep",
        help="retrain descriptor heads over a temperature range and report",
    )
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--eval-data", required=True, help="held-out dataset directory")
    p.add_argument("--init", required=True, help="base checkpoint to start from")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--temperatures", default="1,15,100", help="comma-separated list"
    )
    _add_common(p)
    p.set_defaults(func=cmd_t_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_threads(args.threads)
        cfg = _load_run_config(args)
        return args.func(args, cfg)
    except CliError as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

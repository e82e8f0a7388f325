"""Command-line entry points: train, infer, eval, ablate, synth-gen.

Progress goes to stderr; machine-readable artifacts (CSV tables, PNG
masks and figures, checkpoints) land under the ``--out`` directory.
Exit codes: 0 on success, 2 for configuration/usage problems, 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .checkpoint import (
    CheckpointConfigError,
    apply_overrides,
    build_configs,
    load_checkpoint,
    load_config_file,
    save_config_file,
)
from .data import (
    ManifestError,
    SegmentationData,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
)
from .inference import iterative_predict, predict_once
from .mask_codec import export_mask_png
from .metrics import evaluate_dataset
from .network import ABLATIONS, NetworkConfig, count_parameters
from .training import fit

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

_CONFIG_ERRORS = (
    ManifestError,
    CheckpointConfigError,
    ValueError,
    KeyError,
    FileNotFoundError,
    yaml.YAMLError,
)

EVAL_BATCH = 8


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _add_common(p: argparse.ArgumentParser, with_config: bool = True) -> None:
    p.add_argument("--out", required=True, help="output directory for all artifacts")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    if with_config:
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a config value, e.g. train.epochs=5",
        )
    p.add_argument(
        "--device",
        default=os.environ.get("FANET_DEVICE", "cpu"),
        help="compute device (or set FANET_DEVICE)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fanet",
        description="Feedback-attention segmentation: training, iterative "
        "inference, evaluation, ablations, synthetic data.",
    )
    parser.add_argument("--version", action="version", version=f"fanet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    p.add_argument("--dataset", required=True, help="dataset manifest file")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
    p.add_argument(
        "--export-mask",
        default=None,
        metavar="SAMPLE_ID",
        help="debug: export this sample's stored feedback mask as a 0/255 PNG",
    )
    p.add_argument("--quiet", action="store_true")
    _add_common(p)

    p = sub.add_parser("infer", help="run iterative inference from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="dataset manifest or directory of images")
    p.add_argument("--split", default="test", help="manifest split to use")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--save-iterations", action="store_true", help="write a PNG per iteration")
    p.add_argument("--overlay", action="store_true", help="write side-by-side overlays")
    _add_common(p, with_config=False)

    p = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--two-class-miou", action="store_true")
    p.add_argument("--pooled", action="store_true")
    p.add_argument("--method-name", default="FANet")
    _add_common(p, with_config=False)

    p = sub.add_parser("ablate", help="train and compare configurations B1-B4")
    p.add_argument("--dataset", required=True)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--quiet", action="store_true")
    _add_common(p)

    p = sub.add_parser("synth-gen", help="generate a synthetic blob dataset")
    p.add_argument("--count", type=int, default=200, help="training samples")
    p.add_argument("--val-count", type=int, default=0)
    p.add_argument("--test-count", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--blobs", default="1,4", help="min,max blobs per image")
    p.add_argument("--noise", type=float, default=0.08)
    _add_common(p, with_config=False)

    return parser


def _resolve_configs(args):
    doc = load_config_file(args.config) if args.config else {"network": {}, "train": {}}
    if getattr(args, "ablation", None):
        doc["network"].update(ABLATIONS[args.ablation])
    apply_overrides(doc, args.overrides)
    if args.seed is not None:
        doc["train"]["seed"] = args.seed
    return build_configs(doc)


def _save_mask_png(mask: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path)


def cmd_train(args) -> int:
    net_cfg, train_cfg = _resolve_configs(args)
    manifest = load_manifest(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config_file(out / "config.yaml", net_cfg, train_cfg)

    train_data = SegmentationData(manifest, "train")
    val_data = SegmentationData(manifest, "val") if manifest.split_ids("val") else None
    log = None if args.quiet else _log
    _log(f"training on {manifest.name}: {len(train_data)} samples, device={args.device}")
    result = fit(
        train_cfg,
        net_cfg,
        train_data,
        val_data=val_data,
        out_dir=out,
        device=args.device,
        log=log,
    )

    from .reports import plot_loss_curve

    plot_loss_curve(result.history, out / "loss_curve.png")
    if args.export_mask is not None:
        export_mask_png(
            result.state.train_store, args.export_mask, out / f"mask_{args.export_mask}.png"
        )
    _log(f"done: checkpoints and training_log.csv under {out}")
    return EXIT_OK


def _trace_dataset(model, data: SegmentationData, iterations: int, device: str):
    """Batched refinement over a split; returns final masks, traces, and timing."""
    finals, rows = [], []
    per_iter_f1 = per_iter_iou = None
    targets_all = []
    n_images = 0
    t0 = time.perf_counter()
    iterate = model.cfg.feedback_at_inference
    for start in range(0, len(data.sample_ids), EVAL_BATCH):
        ids = data.sample_ids[start : start + EVAL_BATCH]
        samples = [data.get(sid) for sid in ids]
        images = np.stack([s.image for s in samples])
        targets = np.stack([s.mask for s in samples])
        targets_all.extend(targets)
        n_images += len(ids)
        if iterate:
            trace = iterative_predict(
                model, images, iterations=iterations, targets=targets, device=device
            )
            finals.extend(trace.masks[-1])
            if per_iter_f1 is None:
                per_iter_f1 = [[] for _ in range(len(trace.masks))]
                per_iter_iou = [[] for _ in range(len(trace.masks))]
            for t in range(len(trace.masks)):
                per_iter_f1[t].extend(trace.f1_per_iteration[t])
                per_iter_iou[t].extend(trace.iou_per_iteration[t])
            for i, sid in enumerate(ids):
                for t in range(len(trace.masks)):
                    prev = trace.masks[t - 1][i] if t else None
                    rows.append(
                        {
                            "sample_id": sid,
                            "iteration": t,
                            "foreground": int(trace.masks[t][i].sum()),
                            "changed": "" if prev is None else int((trace.masks[t][i] != prev).sum()),
                            "f1": float(trace.f1_per_iteration[t][i]),
                            "miou": float(trace.iou_per_iteration[t][i]),
                        }
                    )
        else:
            _, masks = predict_once(model, images, device=device)
            finals.extend(masks)
            for i, sid in enumerate(ids):
                rows.append(
                    {
                        "sample_id": sid,
                        "iteration": 0,
                        "foreground": int(masks[i].sum()),
                        "changed": "",
                        "f1": "",
                        "miou": "",
                    }
                )
    elapsed = time.perf_counter() - t0
    mean_f1 = [float(np.mean(v)) for v in per_iter_f1] if per_iter_f1 else None
    mean_iou = [float(np.mean(v)) for v in per_iter_iou] if per_iter_iou else None
    return finals, targets_all, rows, (mean_f1, mean_iou), n_images / max(elapsed, 1e-9)


def cmd_eval(args) -> int:
    model, net_cfg, _ = load_checkpoint(args.checkpoint, device=args.device)
    manifest = load_manifest(args.dataset)
    data = SegmentationData(manifest, args.split)
    if len(data) == 0:
        raise ValueError(f"split {args.split!r} of {manifest.name} is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    _log(f"evaluating {len(data)} {args.split} samples (iterative={net_cfg.feedback_at_inference})")
    finals, targets, rows, (mean_f1, mean_iou), images_per_s = _trace_dataset(
        model, data, args.iterations, args.device
    )
    report = evaluate_dataset(
        finals,
        targets,
        method=args.method_name,
        sample_ids=data.sample_ids,
        two_class_miou=args.two_class_miou,
        pooled=args.pooled,
    )

    from .reports import (
        plot_iteration_curve,
        plot_metrics_summary,
        write_metrics_csv,
        write_metrics_markdown,
        write_trace_csv,
    )

    row = report.row(extra={"images_per_s": f"{images_per_s:.2f}"})
    write_metrics_csv([row], out / "report.csv")
    write_metrics_markdown([row], out / "report.md")
    per_image_rows = [
        {"method": args.method_name, **{k: v for k, v in r.items()}} for r in report.per_image
    ]
    write_trace_csv(per_image_rows, out / "per_image.csv")
    write_trace_csv(rows, out / "trace.csv")
    plot_metrics_summary(report.aggregate, out / "metrics_summary.png", title=args.method_name)
    if mean_f1 is not None:
        write_trace_csv(
            [
                {"iteration": t, "mean_f1": f1, "mean_miou": iou}
                for t, (f1, iou) in enumerate(zip(mean_f1, mean_iou))
            ],
            out / "iteration_f1.csv",
        )
        plot_iteration_curve(mean_f1, out / "iteration_f1.png")
    _log(f"F1 {report.aggregate['f1']:.4f}  mIoU {report.aggregate['miou']:.4f} -> {out}")
    return EXIT_OK


def _collect_images(args):
    """Images for inference: (sample_id, image, target-or-None) triples."""
    path = Path(args.images)
    if path.is_dir():
        from PIL import Image

        files = sorted(
            p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
        )
        if not files:
            raise ValueError(f"no images found in {path}")
        for f in files:
            with Image.open(f) as im:
                image = np.asarray(im.convert("RGB")).astype(np.float32) / 255.0
            yield f.stem, image, None
    else:
        manifest = load_manifest(path)
        data = SegmentationData(manifest, args.split)
        if len(data) == 0:
            raise ValueError(f"split {args.split!r} of {manifest.name} is empty")
        for sample in data.samples():
            yield sample.sample_id, sample.image, sample.mask


def cmd_infer(args) -> int:
    model, net_cfg, _ = load_checkpoint(args.checkpoint, device=args.device)
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if args.overlay:
        (out / "overlays").mkdir(exist_ok=True)

    from .reports import plot_iteration_curve, save_overlay, write_trace_csv

    rows = []
    f1_curves = []
    for sample_id, image, target in _collect_images(args):
        if net_cfg.feedback_at_inference:
            trace = iterative_predict(
                model,
                image,
                iterations=args.iterations,
                targets=None if target is None else target[None],
                device=args.device,
            )
            masks = [m[0] for m in trace.masks]
            with_gt = trace.f1_per_iteration is not None
            f1s = [float(v[0]) for v in trace.f1_per_iteration] if with_gt else None
            ious = [float(v[0]) for v in trace.iou_per_iteration] if with_gt else None
        else:
            _, mask = predict_once(model, image, device=args.device)
            masks, f1s, ious = [mask[0]], None, None
        if f1s is not None:
            f1_curves.append(f1s)
        final = masks[-1]
        _save_mask_png(final, out / "masks" / f"{sample_id}.png")
        if args.save_iterations:
            for t, m in enumerate(masks):
                _save_mask_png(m, out / "masks" / f"{sample_id}_iter{t}.png")
        if args.overlay:
            save_overlay(image, final, out / "overlays" / f"{sample_id}.png")
        for t, m in enumerate(masks):
            rows.append(
                {
                    "sample_id": sample_id,
                    "iteration": t,
                    "foreground": int(m.sum()),
                    "changed": "" if t == 0 else int((m != masks[t - 1]).sum()),
                    "f1": "" if f1s is None else f1s[t],
                    "miou": "" if ious is None else ious[t],
                }
            )
    write_trace_csv(rows, out / "trace.csv")
    if f1_curves:
        curve = np.mean(np.array(f1_curves), axis=0).tolist()
        plot_iteration_curve(curve, out / "iteration_f1.png")
    _log(f"wrote masks and trace.csv under {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    doc = load_config_file(args.config) if args.config else {"network": {}, "train": {}}
    apply_overrides(doc, args.overrides)
    if args.seed is not None:
        doc["train"]["seed"] = args.seed
    manifest = load_manifest(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    from .reports import plot_ablation_chart, write_metrics_csv, write_metrics_markdown

    rows = []
    for label in sorted(ABLATIONS):
        net_doc = dict(doc["network"])
        net_doc.update(ABLATIONS[label])
        net_cfg = NetworkConfig.from_dict(net_doc)
        _, train_cfg = build_configs({"network": {}, "train": doc["train"]})
        run_dir = out / label
        _log(f"[{label}] training ({net_cfg.mixpool_placement}, "
             f"feedback={net_cfg.feedback_at_inference})")
        train_data = SegmentationData(manifest, "train")
        val_data = SegmentationData(manifest, "val") if manifest.split_ids("val") else None
        result = fit(
            train_cfg,
            net_cfg,
            train_data,
            val_data=val_data,
            out_dir=run_dir,
            device=args.device,
            log=None if args.quiet else _log,
        )
        test_data = SegmentationData(manifest, "test")
        if len(test_data) == 0:
            raise ValueError(f"{manifest.name} has no test split to ablate against")
        finals, targets, _, _, images_per_s = _trace_dataset(
            result.state.model, test_data, args.iterations, args.device
        )
        report = evaluate_dataset(finals, targets, method=label, sample_ids=test_data.sample_ids)
        rows.append(
            report.row(
                extra={
                    "parameters": count_parameters(net_cfg),
                    "images_per_s": f"{images_per_s:.2f}",
                }
            )
        )
        _log(f"[{label}] test F1 {report.aggregate['f1']:.4f}")

    write_metrics_csv(rows, out / "ablation.csv")
    write_metrics_markdown(rows, out / "ablation.md")
    plot_ablation_chart(rows, out / "ablation_f1.png")
    _log(f"ablation table -> {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_synth_gen(args) -> int:
    try:
        lo, hi = (int(v) for v in args.blobs.split(","))
    except ValueError:
        raise ValueError(f"--blobs must be 'min,max', got {args.blobs!r}") from None
    spec = SyntheticSpec(
        count=args.count,
        val_count=args.val_count,
        test_count=args.test_count,
        image_size=args.size,
        blob_range=(lo, hi),
        noise=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    manifest = generate_synthetic(spec, args.out)
    counts = manifest.counts()
    _log(
        f"wrote {counts['train']}/{counts['val']}/{counts['test']} train/val/test "
        f"samples to {Path(args.out) / 'manifest.txt'}"
    )
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "synth-gen": cmd_synth_gen,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except _CONFIG_ERRORS as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _log(f"runtime error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

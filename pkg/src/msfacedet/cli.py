"""Command-line entry points: data generation, training, detection,
evaluation, gradient checking and the fusion-vs-single-tap ablation."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .annotations import AnnotationRecord, format_annotations, load_annotations
from .checks import run_suite
from .config import RunConfig, load_run_config
from .evaluation import evaluate_dataset, format_report
from .imageio import load_image, overlay_boxes, write_pgm, write_ppm
from .model import MultiScaleDetector
from .toydata import ToyScene, generate_toy_dataset
from .training import train


class _OutputTracker:
    """Records files created by a command so failures leave no partial output."""

    def __init__(self):
        self.paths = []

    def write_text(self, path, text: str):
        Path(path).write_text(text)
        self.paths.append(Path(path))

    def note(self, path):
        self.paths.append(Path(path))
        return path

    def discard_all(self):
        for p in self.paths:
            try:
                p.unlink()
            except OSError:
                pass


def _load_scenes(data_dir: Path):
    """Scenes from a directory holding images plus annotations.txt."""
    ann_path = data_dir / "annotations.txt"
    if not ann_path.is_file():
        raise FileNotFoundError(f"{ann_path} not found")
    scenes = []
    for rec in load_annotations(ann_path):
        img_path = data_dir / rec.image_path
        if not img_path.is_file():
            raise FileNotFoundError(f"annotated image {img_path} not found")
        tensor, orig_w, orig_h = load_image(img_path)
        scenes.append(
            ToyScene(
                name=Path(rec.image_path).stem,
                image=tensor,
                gt_boxes=rec.boxes,
                face_scale_range=(0, 0),
                requested_faces=len(rec.boxes),
            )
        )
    return scenes


def _write_dataset(out_dir: Path, scenes, tracker: _OutputTracker):
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for scene in scenes:
        name = f"{scene.name}.pgm"
        write_pgm(tracker.note(out_dir / name), scene.image[0, 0])
        records.append(AnnotationRecord(image_path=name, boxes=scene.gt_boxes))
    tracker.write_text(out_dir / "annotations.txt", format_annotations(records))


def cmd_gen_data(args, tracker) -> int:
    scenes = generate_toy_dataset(
        n_images=args.n_images,
        image_size=args.image_size,
        face_scale_range=(args.face_min, args.face_max),
        seed=args.seed,
    )
    _write_dataset(Path(args.out), scenes, tracker)
    short = sum(1 for s in scenes if len(s.gt_boxes) < s.requested_faces)
    print(f"wrote {len(scenes)} scenes to {args.out}" + (f" ({short} with reduced face count)" if short else ""))
    return 0


def _config_from_args(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.validate()
    return cfg


def cmd_train(args, tracker) -> int:
    cfg = _config_from_args(args)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.fusion_mode:
        cfg.fusion_mode = args.fusion_mode
    data_dir = Path(args.data or cfg.data_dir)
    out_dir = Path(args.out or cfg.out_dir or ".")
    scenes = _load_scenes(data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(
        scenes,
        cfg.train_config(),
        cfg.model_config(),
        progress=lambda it, c: print(f"iter {it}: total {c['total']:.4f}") if it % 200 == 0 else None,
    )
    trace_lines = [
        f"{it} {tot:.6f} {rc:.6f} {rr:.6f} {dc:.6f} {dr:.6f}"
        for it, tot, rc, rr, dc, dr in result.trace
    ]
    tracker.write_text(out_dir / "loss_trace.txt", "\n".join(trace_lines) + "\n")
    ckpt_path = tracker.note(out_dir / "checkpoint.msfr")
    result.model.save(ckpt_path)
    print(f"trained {cfg.iterations} iterations; checkpoint at {ckpt_path}")
    return 0


def _detections_to_text(dets) -> str:
    lines = [
        f"{d.box[0]:.6f} {d.box[1]:.6f} {d.box[2]:.6f} {d.box[3]:.6f} {d.score:.6f}"
        for d in dets
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def cmd_detect(args, tracker) -> int:
    cfg = _config_from_args(args)
    if args.score_thresh is not None:
        cfg.score_thresh = args.score_thresh
    if args.fusion_mode:
        cfg.fusion_mode = args.fusion_mode
    data_dir = Path(args.data or cfg.data_dir)
    out_dir = Path(args.out or cfg.out_dir or ".")
    ckpt = Path(args.checkpoint or cfg.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    images = sorted(p for p in data_dir.iterdir() if p.suffix in (".pgm", ".ppm"))
    if not images:
        raise FileNotFoundError(f"no .pgm/.ppm images in {data_dir}")
    model = MultiScaleDetector(cfg.model_config(), seed=0)
    model.load(ckpt)
    out_dir.mkdir(parents=True, exist_ok=True)
    for img_path in images:
        tensor, orig_w, orig_h = load_image(img_path)
        dets = model.detect(
            tensor,
            orig_w,
            orig_h,
            score_thresh=cfg.score_thresh,
            det_nms_thresh=cfg.det_nms_thresh,
            rpn_nms_thresh=cfg.rpn_nms_thresh,
            pre_nms_top_n=cfg.pre_nms_top_n,
            post_nms_top_n=cfg.post_nms_top_n,
            min_size=cfg.min_size,
        )
        tracker.write_text(out_dir / f"{img_path.stem}.txt", _detections_to_text(dets))
        if args.overlay:
            rgb = overlay_boxes(tensor[0, 0, :orig_h, :orig_w], [d.box for d in dets])
            write_ppm(tracker.note(out_dir / f"{img_path.stem}_overlay.ppm"), rgb)
    print(f"detections for {len(images)} images written to {out_dir}")
    return 0


def _parse_detection_file(path: Path):
    boxes, scores = [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}: malformed detection line {line!r}")
        vals = [float(v) for v in parts]
        boxes.append(vals[:4])
        scores.append(vals[4])
    return np.array(boxes).reshape(-1, 4), np.array(scores)


def cmd_eval(args, tracker) -> int:
    cfg = _config_from_args(args)
    ann_path = Path(args.annotations or cfg.annotations)
    det_dir = Path(args.detections or cfg.detections)
    if not ann_path.is_file():
        raise FileNotFoundError(f"annotation file {ann_path} not found")
    if not det_dir.is_dir():
        raise FileNotFoundError(f"detection directory {det_dir} not found")
    gts = {Path(rec.image_path).stem: rec.boxes for rec in load_annotations(ann_path)}
    dets = {p.stem: _parse_detection_file(p) for p in sorted(det_dir.glob("*.txt"))}
    report = evaluate_dataset(dets, gts, cfg.eval_config())
    text = format_report(report)
    if args.out:
        tracker.write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args, tracker) -> int:
    from .checks import MODEL_CHECK_SEEDS

    seeds = tuple(range(args.seeds))
    results = run_suite(
        seeds=seeds,
        model_seeds=MODEL_CHECK_SEEDS[: args.seeds],
        include_model=not args.skip_model,
    )
    width = max(len(name) for name, _ in results)
    failed = False
    for name, err in results:
        ok = err <= 1e-4
        failed |= not ok
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_ablate(args, tracker) -> int:
    cfg = _config_from_args(args)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    train_scenes = _load_scenes(Path(args.data))
    eval_scenes = _load_scenes(Path(args.eval_data))
    out_dir = Path(args.out or cfg.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    aps = {}
    for mode in ("multi", "tap5"):
        cfg.fusion_mode = mode
        result = train(train_scenes, cfg.train_config(), cfg.model_config())
        dets = {}
        for scene in eval_scenes:
            found = result.model.detect(
                scene.image,
                scene.image.shape[3],
                scene.image.shape[2],
                score_thresh=0.05,
                det_nms_thresh=cfg.det_nms_thresh,
                rpn_nms_thresh=cfg.rpn_nms_thresh,
                pre_nms_top_n=cfg.pre_nms_top_n,
                post_nms_top_n=cfg.post_nms_top_n,
                min_size=cfg.min_size,
            )
            dets[scene.name] = (
                np.array([d.box for d in found]).reshape(-1, 4),
                np.array([d.score for d in found]),
            )
        gts = {scene.name: scene.gt_boxes for scene in eval_scenes}
        report = evaluate_dataset(dets, gts, cfg.eval_config())
        tracker.write_text(out_dir / f"report_{mode}.txt", format_report(report))
        aps[mode] = report.overall.ap if report.overall.ap is not None else float("nan")
        print(f"{mode} ap_overall {aps[mode]:.6f}")
    print(f"multi-scale margin {aps['multi'] - aps['tap5']:+.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msfacedet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--face-min", type=int, default=16)
    p.add_argument("--face-max", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--data", help="dataset directory (images + annotations.txt)")
    p.add_argument("--out", help="output directory for checkpoint + loss trace")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--fusion-mode", choices=("multi", "tap5"))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("detect", help="run a checkpoint over images")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="directory of .pgm/.ppm images")
    p.add_argument("--out", help="output directory for detection files")
    p.add_argument("--config")
    p.add_argument("--score-thresh", type=float)
    p.add_argument("--overlay", action="store_true", help="also write box-overlay PPMs")
    p.add_argument("--fusion-mode", choices=("multi", "tap5"))
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("eval", help="score detection files against annotations")
    p.add_argument("--detections", help="directory of per-image detection files")
    p.add_argument("--annotations", help="annotation file")
    p.add_argument("--out", help="report file (also printed)")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seeds", type=int, default=2, help="number of seeds per check")
    p.add_argument("--skip-model", action="store_true", help="skip the end-to-end model check")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train multi-scale and tap5-only on the same data, report both")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--eval-data", required=True, help="held-out dataset directory")
    p.add_argument("--out", help="output directory for the two reports")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.set_defaults(fn=cmd_ablate)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    tracker = _OutputTracker()
    try:
        return args.fn(args, tracker)
    except Exception as e:  # runtime failure: report, remove partial outputs
        tracker.discard_all()
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())

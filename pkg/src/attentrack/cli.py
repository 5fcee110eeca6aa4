"""Command-line entry point: track, eval, simulate, gradcheck, overlay.

Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import gradcheck as gradcheck_mod
from . import io as mot_io
from . import metrics, sim
from .engine import ABLATION_PRESETS, TrackerEngine
from .features import GradientHistogramBackend, PrecomputedBackend


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attentrack",
        description="Online multi-object tracker with per-target attention branches.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_track = sub.add_parser("track", help="run the tracker over a sequence directory")
    p_track.add_argument("--seq", required=True, help="sequence directory (seqinfo.ini inside)")
    p_track.add_argument("--det", help="detection file (default SEQ/det/det.txt)")
    p_track.add_argument("--config", help="engine config file (key = value lines)")
    p_track.add_argument("--out", required=True, help="result file to write")
    p_track.add_argument("--seed", type=int, help="override the config seed")
    p_track.add_argument("--ablation", choices=sorted(ABLATION_PRESETS),
                         help="component preset p1..p5")
    p_track.add_argument("--threads", type=int, help="parallel target evaluation")
    p_track.add_argument("--checkpoint", help="write an engine checkpoint here at the end")
    p_track.set_defaults(func=cmd_track)

    p_eval = sub.add_parser("eval", help="CLEAR MOT evaluation of a result file")
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--res", required=True)
    p_eval.add_argument("--iou", type=float, default=0.5)
    p_eval.add_argument("--kv", help="also write a key=value report file")
    p_eval.set_defaults(func=cmd_eval)

    p_sim = sub.add_parser("simulate", help="generate synthetic sequences")
    group = p_sim.add_mutually_exclusive_group(required=True)
    group.add_argument("--suite", action="store_true",
                       help="write the 20-sequence standard suite")
    group.add_argument("--script", help="JSON scene script file")
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.set_defaults(func=cmd_simulate)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--trials", type=int, default=100,
                        help="seeded random inputs per layer check")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_ovl = sub.add_parser("overlay", help="render result boxes onto frames")
    p_ovl.add_argument("--seq", required=True)
    p_ovl.add_argument("--res", required=True)
    p_ovl.add_argument("--out", required=True)
    p_ovl.set_defaults(func=cmd_overlay)
    return parser


def _load_frame_source(seq_dir: Path, cfg):
    """Backend plus a frame-reference loader for CLI sequences."""
    feat = seq_dir / "feat"
    img = seq_dir / "img1"
    kind = cfg.feature_backend
    if kind == "synthetic":
        raise ValueError("the synthetic backend is in-process only; "
                         "write feature files with `simulate` and use precomputed")
    if kind == "precomputed":
        if not feat.is_dir():
            raise FileNotFoundError(f"{seq_dir}: no feat/ directory for the precomputed backend")
        backend = PrecomputedBackend(feat, channels=cfg.geom_channels)
        return backend, lambda idx: idx
    if kind == "gradient":
        if not img.is_dir():
            raise FileNotFoundError(f"{seq_dir}: no img1/ directory for the gradient backend")
        from PIL import Image
        import numpy as np

        backend = GradientHistogramBackend(cfg.geom_channels, stride=cfg.feature_stride)

        def load(idx: int):
            matches = sorted(img.glob(f"{idx:06d}.*"))
            if not matches:
                raise FileNotFoundError(f"missing frame image for frame {idx}")
            return np.asarray(Image.open(matches[0]))

        return backend, load
    raise ValueError(f"unknown feature_backend {kind!r}")


def cmd_track(args) -> int:
    seq_dir = Path(args.seq)
    meta = mot_io.read_seqinfo(seq_dir / "seqinfo.ini")
    overrides = {"frame_rate": meta.frame_rate}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    cfg = mot_io.load_config(args.config, **overrides)
    if args.ablation:
        cfg = cfg.with_ablation(args.ablation)

    det_path = Path(args.det) if args.det else seq_dir / "det" / "det.txt"
    detections = mot_io.read_detections(det_path)
    backend, load_frame = _load_frame_source(seq_dir, cfg)
    if cfg.feature_backend == "gradient":
        # feature-map cells, not pixels
        frame_size = (meta.width / cfg.feature_stride, meta.height / cfg.feature_stride)
    else:
        frame_size = (meta.width, meta.height)
    engine = TrackerEngine(cfg, backend, frame_size)

    results: dict = {}
    t0 = time.perf_counter()
    for frame in range(1, meta.frame_count + 1):
        outputs = engine.step(load_frame(frame), detections.get(frame, []))
        if outputs:
            results[frame] = [(o.id, o.state, o.score) for o in outputs]
    elapsed = time.perf_counter() - t0

    mot_io.write_results(results, args.out)
    if args.checkpoint:
        mot_io.save_checkpoint(engine, args.checkpoint)
    fps = meta.frame_count / elapsed if elapsed > 0 else float("inf")
    print(f"{meta.name}: {meta.frame_count} frames in {elapsed:.2f}s ({fps:.2f} frames/s)")
    return 0


def cmd_eval(args) -> int:
    gt = {f: [(tid, s.as_array()) for tid, s, _ in rows]
          for f, rows in mot_io.read_mot_boxes(args.gt).items()}
    hyp = {f: [(tid, s.as_array()) for tid, s, _ in rows]
           for f, rows in mot_io.read_mot_boxes(args.res).items()}
    report = metrics.evaluate(gt, hyp, iou_min=args.iou)
    print(metrics.format_report(report))
    sys.stdout.write(metrics.report_kv(report))
    if args.kv:
        with open(args.kv, "w", encoding="utf-8", newline="\n") as f:
            f.write(metrics.report_kv(report))
    return 0


def cmd_simulate(args) -> int:
    out = Path(args.out)
    if args.suite:
        scripts = sim.standard_suite(args.seed)
        out.mkdir(parents=True, exist_ok=True)
        cfg = sim.suite_config(seed=args.seed, feature_backend="precomputed")
        with open(out / "engine.cfg", "w", encoding="utf-8", newline="\n") as f:
            f.write(mot_io.config_to_text(cfg))
    else:
        scripts = [sim.script_from_json(Path(args.script).read_text(encoding="utf-8"))]
    for script in scripts:
        seq = sim.generate_sequence(script)
        sim.write_sequence(seq, out / script.name)
        print(f"wrote {out / script.name} ({script.n_frames} frames, "
              f"{len(script.targets)} targets)")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = gradcheck_mod.run_suite(seed=args.seed, layer_trials=args.trials)
    elapsed = time.perf_counter() - t0
    ok = True
    for name, err in results.items():
        status = "ok" if err < gradcheck_mod.REL_TOL else "FAIL"
        print(f"{name}: max_rel_err={err:.3e} [{status}]")
        ok = ok and err < gradcheck_mod.REL_TOL
    print(f"gradcheck finished in {elapsed:.1f}s")
    if not ok:
        print("error: gradient check failed", file=sys.stderr)
        return 1
    return 0


def cmd_overlay(args) -> int:
    from .overlay import render_overlays

    seq_dir = Path(args.seq)
    meta = mot_io.read_seqinfo(seq_dir / "seqinfo.ini")
    results = mot_io.read_mot_boxes(args.res)
    n = render_overlays(seq_dir, results, args.out, meta.frame_count)
    print(f"wrote {n} overlay frames to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except Exception as exc:  # uniform machine-readable failure line
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

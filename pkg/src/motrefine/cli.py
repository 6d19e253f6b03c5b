"""Command-line entry point: synthesize data, simulate a tracker, train,
refine, evaluate, run ablation suites and self checks.

A sequence directory holds frames/frame_NNNNNN.pgm, gt.txt (MOT format),
and after simulation dets.txt plus baseline.txt. All randomness funnels
through the per-command --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import torch

from . import data_io, metrics
from .config import RefineConfig, parse_kv_file
from .data_io import NoiseProfile, SynthScenario
from .nn_core import CheckpointError
from .pipeline import (
    Refiner,
    build_training_samples,
    load_model,
    refine_sequence,
    save_model,
    train,
)
from .selftest import run_selftest


class CliError(Exception):
    pass


def _echo_config(cfg: RefineConfig) -> None:
    print("# resolved config")
    for line in cfg.resolved_text().splitlines():
        print("#   " + line)


def _load_frames(frames_dir: Path) -> np.ndarray:
    files = sorted(frames_dir.glob("frame_*.pgm"))
    if not files:
        raise CliError(f"no frame_*.pgm files in {frames_dir}")
    return np.stack([data_io.read_pgm(f) for f in files])


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {what}: {path}")
    return path


def _dets_to_tracker_outputs(recs) -> dict:
    from .geometry import corner_to_edge
    from .init_matching import TrackerOutput

    out = {}
    for frame, items in recs.items():
        out[frame] = [
            TrackerOutput(r.conf, corner_to_edge(r.box), r.motion) for r in items
        ]
    return out


def cmd_synth(args) -> int:
    scenario = SynthScenario()
    if args.scenario:
        scenario = SynthScenario(**parse_kv_file(_require(Path(args.scenario), "scenario file"), SynthScenario))
    overrides = {k: getattr(args, k) for k in ("frames", "objects", "crossings", "image_size")
                 if getattr(args, k) is not None}
    scenario = dataclasses.replace(scenario, seed=args.seed, **overrides)
    print("# scenario: " + ", ".join(
        f"{f.name}={getattr(scenario, f.name)}" for f in dataclasses.fields(scenario)))
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    frames, gt = data_io.generate_scenario(scenario)
    for i, img in enumerate(frames, 1):
        data_io.write_pgm(out / "frames" / f"frame_{i:06d}.pgm", img)
    (out / "gt.txt").write_text(data_io.gt_to_mot(gt))
    print(f"wrote {len(frames)} frames and gt.txt to {out}")
    return 0


def cmd_simulate(args) -> int:
    gt_path = _require(Path(args.gt), "gt file")
    noise = NoiseProfile()
    if args.noise:
        noise = NoiseProfile(**parse_kv_file(_require(Path(args.noise), "noise file"), NoiseProfile))
    print("# noise: " + ", ".join(
        f"{f.name}={getattr(noise, f.name)}" for f in dataclasses.fields(noise)))
    gt = data_io.records_to_frames(data_io.read_mot(gt_path, "gt"))
    dets, baseline = data_io.simulate_tracker(gt, noise, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dets.txt").write_text(data_io.write_detections(dets))
    (out / "baseline.txt").write_text(data_io.write_mot(baseline))
    print(f"wrote dets.txt and baseline.txt to {out}")
    return 0


def _config_from_args(args) -> RefineConfig:
    cfg = RefineConfig.from_file(_require(Path(args.config), "config file")) if args.config else RefineConfig()
    overrides = {}
    for flag, field in (
        ("beta", "beta"), ("thr_out", "thr_out"), ("motion", "motion_form"),
        ("queries", "num_queries"), ("layers", "layers"), ("epochs", None),
    ):
        if not hasattr(args, flag):
            continue
        v = getattr(args, flag)
        if v is not None and field:
            overrides[field] = float("-inf") if field == "beta" and v == "-inf" else v
    if overrides.get("beta") is not None:
        overrides["beta"] = float(overrides["beta"])
    if getattr(args, "dr_split", None) is not None:
        overrides["dr_split"] = args.dr_split == "on"
    if getattr(args, "dr_embeddings", None) is not None:
        overrides["dr_embeddings"] = args.dr_embeddings == "on"
    if getattr(args, "back_refer", None) is not None:
        overrides["back_refer"] = args.back_refer == "on"
    return cfg.replace(**overrides)


def _load_sequence_dirs(dirs) -> list[tuple[np.ndarray, dict, dict]]:
    seqs = []
    for d in dirs:
        d = Path(d)
        frames = _load_frames(_require(d / "frames", "frames directory"))
        gt = data_io.records_to_frames(data_io.read_mot(_require(d / "gt.txt", "gt file"), "gt"))
        dets = _dets_to_tracker_outputs(data_io.read_mot(_require(d / "dets.txt", "dets file"), "det"))
        seqs.append((frames, gt, dets))
    return seqs


def _train_model(cfg: RefineConfig, seqs, epochs: int, seed: int, log_every: int = 0) -> Refiner:
    samples = []
    img_h = img_w = None
    for frames, gt, dets in seqs:
        samples.extend(build_training_samples(frames, gt, dets))
        img_h, img_w = frames.shape[1:]
    torch.manual_seed(seed)
    model = Refiner(cfg)
    train(model, samples, cfg, epochs, seed, float(img_w), float(img_h), log_every=log_every)
    return model


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    _echo_config(cfg)
    seqs = _load_sequence_dirs(args.data)
    model = _train_model(cfg, seqs, args.epochs, args.seed, log_every=args.log_every)
    save_model(args.out, model)
    print(f"wrote checkpoint to {args.out}")
    return 0


def cmd_refine(args) -> int:
    frames = _load_frames(_require(Path(args.frames), "frames directory"))
    dets = _dets_to_tracker_outputs(
        data_io.read_mot(_require(Path(args.dets), "dets file"), "det"))
    try:
        model = load_model(_require(Path(args.weights), "checkpoint"))
    except CheckpointError as e:
        raise CliError(str(e)) from None
    cfg = model.cfg
    if args.beta is not None:
        cfg = cfg.replace(beta=float(args.beta))
        model.decoder.beta = cfg.beta
    if args.thr_out is not None:
        cfg = cfg.replace(thr_out=args.thr_out)
    if args.emit is not None:
        cfg = cfg.replace(emit_threshold=args.emit)
    model.cfg = cfg
    _echo_config(cfg)
    records = refine_sequence(model, frames, dets, cfg)
    Path(args.out).write_text(data_io.write_mot(records))
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_eval(args) -> int:
    gt = data_io.records_to_frames(data_io.read_mot(_require(Path(args.gt), "gt file"), "gt"))
    pred = data_io.records_to_frames(
        data_io.read_mot(_require(Path(args.pred), "pred file"), "result"))
    missing = sorted(set(gt) - set(pred))
    if missing:
        print(f"# warning: {len(missing)} gt frames without predictions "
              f"(evaluated frames {min(gt)}..{max(gt)})")
    try:
        report = metrics.evaluate(gt, pred, args.iou_gate)
    except metrics.EmptyGroundTruthError as e:
        raise CliError(str(e)) from None
    print(report.as_table())
    print(report.as_kv())
    if args.pred2:
        pred2 = data_io.records_to_frames(
            data_io.read_mot(_require(Path(args.pred2), "pred2 file"), "result"))
        report2 = metrics.evaluate(gt, pred2, args.iou_gate)
        print(metrics.format_compare(report, report2))
    return 0


SUITES = {
    "beta": [("beta=0", {"beta": 0.0}), ("beta=-5", {"beta": -5.0}),
             ("beta=-10", {"beta": -10.0}), ("beta=-inf", {"beta": float("-inf")})],
    "drsplit": [("split=on", {"dr_split": True}), ("split=off", {"dr_split": False})],
    "motion": [("center+box", {"motion_form": "center+box"}),
               ("center", {"motion_form": "center"}),
               ("none", {"motion_form": "none"})],
    "backrefer": [("backrefer=off", {"back_refer": False}),
                  ("backrefer=on", {"back_refer": True})],
}


def cmd_ablate(args) -> int:
    base = _config_from_args(args)
    _echo_config(base)
    seqs = _load_sequence_dirs(args.data)
    print(f"{'setting':>14} {'MOTA':>8} {'IDF1':>8}")
    for name, overrides in SUITES[args.suite]:
        cfg = base.replace(**overrides)
        model = _train_model(cfg, seqs, args.epochs, args.seed)
        motas, idf1s = [], []
        for frames, gt, dets in seqs:
            records = refine_sequence(model, frames, dets, cfg)
            pred = {f: [] for f in gt}
            for r in records:
                pred.setdefault(r.frame, []).append((r.track_id, r.box))
            rep = metrics.evaluate(gt, pred)
            motas.append(rep.mota)
            idf1s.append(rep.idf1)
        print(f"{name:>14} {np.mean(motas):8.4f} {np.mean(idf1s):8.4f}")
    return 0


def cmd_selftest(args) -> int:
    results = run_selftest(inject_fault=args.inject_fault)
    bad = 0
    for name, ok, msg in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}" + ("" if ok else f": {msg}"))
        bad += 0 if ok else 1
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motrefine", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic sequence")
    sp.add_argument("--scenario", help="scenario key=value file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--objects", type=int)
    sp.add_argument("--crossings", type=int)
    sp.add_argument("--image-size", dest="image_size", type=int)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("simulate", help="simulate the original tracker over gt")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--noise", help="noise-profile key=value file")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("train", help="train a refiner on sequence directories")
    sp.add_argument("--data", action="append", required=True,
                    help="sequence dir with frames/, gt.txt, dets.txt (repeatable)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--epochs", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--log-every", type=int, default=0)
    sp.add_argument("--beta")
    sp.add_argument("--thr-out", dest="thr_out", type=float)
    sp.add_argument("--motion", choices=("center+box", "center", "none"))
    sp.add_argument("--queries", type=int)
    sp.add_argument("--layers", type=int)
    sp.add_argument("--dr-split", dest="dr_split", choices=("on", "off"))
    sp.add_argument("--dr-embeddings", dest="dr_embeddings", choices=("on", "off"))
    sp.add_argument("--back-refer", dest="back_refer", choices=("on", "off"))
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("refine", help="refine a sequence with a trained model")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--dets", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--beta")
    sp.add_argument("--thr-out", dest="thr_out", type=float)
    sp.add_argument("--emit", type=float)
    sp.set_defaults(fn=cmd_refine)

    sp = sub.add_parser("eval", help="CLEAR/IDF1 metrics against gt")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--pred2")
    sp.add_argument("--iou-gate", dest="iou_gate", type=float, default=0.5)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="train and evaluate one ablation suite")
    sp.add_argument("--suite", required=True, choices=sorted(SUITES))
    sp.add_argument("--data", action="append", required=True)
    sp.add_argument("--epochs", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("selftest", help="run release-gate self checks")
    sp.add_argument("--inject-fault", help=argparse.SUPPRESS)
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Single entry point for all executables."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roadwatch",
                                     description="Road anomaly detection pipeline and V2I harness")
    parser.add_argument("--log-level", default=os.environ.get("ROADWATCH_LOG", "WARNING"))
    parser.add_argument("--format", choices=["text", "json"], default="text")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("endnode", help="run a vehicle-side session")
    p.add_argument("--mode", type=int, choices=[1, 2], required=True)
    p.add_argument("--source", required=True,
                   help="frames directory or scenario JSON file")
    p.add_argument("--labels", help="replay label directory (Mode-I)")
    p.add_argument("--rsu", type=_addr, help="RSU control address host:port")
    p.add_argument("--stream", type=_addr, help="RSU stream address host:port")
    p.add_argument("--speed-kmh", type=float, default=20.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--node-id", default="endnode-1")
    p.add_argument("--fast", action="store_true", help="disable frame pacing")

    p = sub.add_parser("rsu", help="run the roadside unit service")
    p.add_argument("--mode", type=int, choices=[1, 2], default=1)
    p.add_argument("--control-port", type=int, default=7401)
    p.add_argument("--stream-port", type=int, default=7402)
    p.add_argument("--api-port", type=int, default=7403)
    p.add_argument("--threshold", type=int, default=10)
    p.add_argument("--labels", help="replay label directory (Mode-II detector)")
    p.add_argument("--bridge", help="bridge detector endpoint (Mode-II detector)")
    p.add_argument("--sink", default="", help="cloud sink: directory or http(s) URL")
    p.add_argument("--static", help="directory of console assets to serve at /")
    p.add_argument("--autostart", action="store_true",
                   help="begin processing immediately instead of waiting for POST /start")

    p = sub.add_parser("vehicle", help="listen for warnings as a nearby vehicle")
    p.add_argument("--rsu", type=_addr, required=True)
    p.add_argument("--node-id", default="vehicle-1")

    p = sub.add_parser("simulate", help="render a scenario to frames + labels")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("equivalence", help="compare Mode-I and Mode-II over loopback")
    p.add_argument("--scenario", required=True)
    p.add_argument("--work-dir", help="scratch directory (default: temp)")
    p.add_argument("--loss-rate", type=float, default=0.0,
                   help="fraction of stream chunks to drop (fault injection)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep", help="misses/duplicates grid over speeds and skip values")
    p.add_argument("--scenario", required=True)
    p.add_argument("--speeds-kmh", default="10,20,40,60",
                   help="comma-separated vehicle speeds")
    p.add_argument("--skips", default="5,30", help="comma-separated skip values")

    p = sub.add_parser("evaluate", help="detection metrics from prediction and truth label dirs")
    p.add_argument("--preds", required=True, help="directory of predicted label files")
    p.add_argument("--truths", required=True, help="directory of ground-truth label files")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=640)

    p = sub.add_parser("latency", help="per-frame detection latency of a backend")
    p.add_argument("--labels", help="replay label directory")
    p.add_argument("--bridge", help="bridge detector endpoint")
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)

    p = sub.add_parser("storage-report", help="aggregate a directory sink's stored evidence")
    p.add_argument("--sink", required=True)

    return parser


def _emit(args, payload: dict, text: str | None = None):
    if args.format == "json":
        print(json.dumps(payload))
    else:
        print(text if text is not None else json.dumps(payload, indent=2))


def _load_scenario(path: str):
    from .simharness import Scenario

    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"scenario file not found: {path}")
    return Scenario.load(p)


def _cmd_endnode(args) -> int:
    from .core import MotionState, kmh_to_mps
    from .detector import replay_load
    from .endnode import DirectoryFrameSource, EndnodeConfig, ScenarioFrameSource, run_mode1, run_mode2

    source_path = Path(args.source)
    if source_path.is_file() and source_path.suffix == ".json":
        frames = iter(ScenarioFrameSource(_load_scenario(args.source)))
    elif source_path.is_dir():
        motion = MotionState(speed_mps=kmh_to_mps(args.speed_kmh), fps=args.fps)
        frames = iter(DirectoryFrameSource(frames_dir=source_path, motion=motion))
    else:
        raise FileNotFoundError(f"frame source not found: {args.source}")

    detector = replay_load(args.labels) if args.labels else None
    cfg = EndnodeConfig(mode=args.mode, node_id=args.node_id, rsu_addr=args.rsu,
                        stream_addr=args.stream, detector=detector, fast=args.fast)
    summary = run_mode1(cfg, frames) if args.mode == 1 else run_mode2(cfg, frames)
    payload = {k: v for k, v in summary.items() if k != "counter"}
    if "counter" in summary:
        payload["counts"] = {c.name: n for c, n in summary["counter"].counts.items()}
        payload["total"] = summary["counter"].total
    _emit(args, payload)
    return 0


def _cmd_rsu(args) -> int:
    from .rsu import RsuConfig, RsuServer

    cfg = RsuConfig(mode=args.mode, control_port=args.control_port,
                    stream_port=args.stream_port, api_port=args.api_port,
                    threshold=args.threshold,
                    label_dir=Path(args.labels) if args.labels else None,
                    bridge_endpoint=args.bridge, sink_spec=args.sink,
                    static_dir=Path(args.static) if args.static else None,
                    autostart=args.autostart)
    server = RsuServer(cfg)
    server.start()
    print(json.dumps({"control_port": server.control_port, "stream_port": server.stream_port,
                      "api_port": server.api_port, "mode": server.mode}), flush=True)
    try:
        import threading
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def _cmd_vehicle(args) -> int:
    from .endnode import run_vehicle_listener

    if args.format == "json":
        def on_message(text):
            print(json.dumps({"warning": text}), flush=True)
    else:
        def on_message(text):
            print(text, flush=True)
    try:
        run_vehicle_listener(args.rsu, node_id=args.node_id, on_message=on_message)
    except KeyboardInterrupt:
        pass
    return 0


def _cmd_simulate(args) -> int:
    from .simharness import render_scenario

    manifest = render_scenario(_load_scenario(args.scenario), args.out)
    _emit(args, manifest)
    return 0


def _cmd_equivalence(args) -> int:
    import tempfile

    from .simharness import run_equivalence

    scenario = _load_scenario(args.scenario)
    if args.work_dir:
        report = run_equivalence(scenario, args.work_dir,
                                 chunk_loss_rate=args.loss_rate, loss_seed=args.seed)
    else:
        with tempfile.TemporaryDirectory(prefix="roadwatch-eq-") as tmp:
            report = run_equivalence(scenario, tmp,
                                     chunk_loss_rate=args.loss_rate, loss_seed=args.seed)
    _emit(args, report)
    if "error" in report:
        print(f"equivalence run failed: {report['error']}", file=sys.stderr)
        return 1
    return 0 if report["equal"] else 1


def _cmd_sweep(args) -> int:
    from .simharness import sweep

    scenario = _load_scenario(args.scenario)
    speeds = [float(v) for v in args.speeds_kmh.split(",")]
    skips = [int(v) for v in args.skips.split(",")]
    rows = sweep(scenario, speeds, skips)
    if args.format == "json":
        print(json.dumps(rows))
    else:
        print(f"{'km/h':>6}{'skip':>6}{'frames':>8}{'distinct':>10}{'misses':>8}{'dups':>6}")
        for r in rows:
            print(f"{r['speed_kmh']:>6.0f}{r['skip']:>6}{r['processed_frames']:>8}"
                  f"{r['distinct']:>10}{r['misses']:>8}{r['duplicates']:>6}")
    return 0


def _cmd_evaluate(args) -> int:
    from .core import AnomalyClass, Detection
    from .detector import ReplayDetector
    from .metrics import GroundTruth, evaluate, format_report, report_to_dict

    preds_dir, truths_dir = Path(args.preds), Path(args.truths)
    for d in (preds_dir, truths_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"label directory not found: {d}")

    from .core import ClassSet
    pred_replay = ReplayDetector(label_dir=preds_dir, class_set=ClassSet.EIGHT)
    truth_replay = ReplayDetector(label_dir=truths_dir, class_set=ClassSet.EIGHT)
    seqs = sorted({int(p.stem) for d in (preds_dir, truths_dir)
                   for p in d.glob("*.txt") if p.stem.isdigit()})
    pred_frames, truth_frames = {}, {}
    for seq in seqs:
        pred_frames[seq] = [
            Detection(cls=AnomalyClass.from_id(r.class_id),
                      box=r.denormalize(args.width, args.height), confidence=r.conf)
            for r in pred_replay.labels_for(seq)]
        truth_frames[seq] = [
            GroundTruth(cls=AnomalyClass.from_id(r.class_id),
                        box=r.denormalize(args.width, args.height))
            for r in truth_replay.labels_for(seq)]
    report = evaluate(pred_frames, truth_frames, iou_threshold=args.iou,
                      confidence_threshold=args.conf)
    _emit(args, report_to_dict(report), format_report(report))
    return 0


def _cmd_latency(args) -> int:
    from .detector import BridgeDetector, Frame, replay_load
    from .simharness import measure_latency

    if args.labels:
        detector = replay_load(args.labels)
    elif args.bridge:
        detector = BridgeDetector(endpoint=args.bridge)
    else:
        raise ValueError("latency needs --labels or --bridge")
    frames = [Frame(seq=i, width=640, height=640, payload=b"\xff\xd8\xff\xd9")
              for i in range(args.frames)]
    import platform
    result = measure_latency(detector, frames, n_warmup=args.warmup)
    result["host"] = platform.node() or platform.machine()
    _emit(args, result,
          f"host: {result['host']}  frames: {result['frames']}\n"
          f"mean {result['mean_s'] * 1e3:.3f} ms  p50 {result['p50_s'] * 1e3:.3f} ms  "
          f"p95 {result['p95_s'] * 1e3:.3f} ms")
    return 0


def _cmd_storage_report(args) -> int:
    from .cloudsink import storage_report

    report = storage_report(args.sink)
    payload = {"objects": report.objects, "total_bytes": report.total_bytes,
               "bytes_by_size": report.bytes_by_size,
               "bytes_by_mode": {str(k): v for k, v in report.bytes_by_mode.items()}}
    _emit(args, payload,
          f"objects: {report.objects}\ntotal bytes: {report.total_bytes}\n"
          f"by size: {report.bytes_by_size}\nby mode: {report.bytes_by_mode}")
    return 0


_COMMANDS = {
    "endnode": _cmd_endnode,
    "rsu": _cmd_rsu,
    "vehicle": _cmd_vehicle,
    "simulate": _cmd_simulate,
    "equivalence": _cmd_equivalence,
    "sweep": _cmd_sweep,
    "evaluate": _cmd_evaluate,
    "latency": _cmd_latency,
    "storage-report": _cmd_storage_report,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

"""Scenario-driven verification: synthetic drives, replay labels, and a brute-force counting oracle."""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from .core import AnomalyClass, MotionState, SkipPolicy, compute_fsi, skip_policy
from .detector import DetectorConfig, Frame

ROAD_GRAY = 120
ANOMALY_GRAY = 40


@dataclass(frozen=True)
class PlantedAnomaly:
    position_m: float
    cls: AnomalyClass
    bbox_fraction: float

    def __post_init__(self):
        if not 0.0 < self.bbox_fraction <= 1.0:
            raise ValueError(f"bbox_fraction must be in (0,1], got {self.bbox_fraction}")


@dataclass(frozen=True)
class Scenario:
    road_length_m: float
    anomalies: tuple[PlantedAnomaly, ...]
    speed_mps: float
    fps: float
    camera_span_m: float
    frame_width: int = 640
    frame_height: int = 640
    seed: int = 0

    def __post_init__(self):
        if self.camera_span_m <= 0:
            raise ValueError(f"camera_span_m must be positive, got {self.camera_span_m}")
        for a in self.anomalies:
            if not 0 <= a.position_m < self.road_length_m:
                raise ValueError(f"anomaly at {a.position_m} outside road [0,{self.road_length_m})")

    @property
    def motion(self) -> MotionState:
        return MotionState(speed_mps=self.speed_mps, fps=self.fps)

    @property
    def fsi(self) -> float:
        return compute_fsi(self.motion)

    @property
    def total_frames(self) -> int:
        if self.fsi <= 0:
            raise ValueError("scenario speed must be positive (FSI = 0 yields infinite frames)")
        return math.ceil(self.road_length_m / self.fsi)

    def frame_interval(self, seq: int) -> tuple[float, float]:
        """Half-open road interval [start, start + span) covered by frame seq."""
        start = seq * self.fsi
        return start, start + self.camera_span_m

    def to_dict(self) -> dict:
        return {
            "road_length_m": self.road_length_m,
            "anomalies": [
                {"position_m": a.position_m, "class": a.cls.name,
                 "bbox_fraction": a.bbox_fraction}
                for a in self.anomalies
            ],
            "speed_mps": self.speed_mps,
            "fps": self.fps,
            "camera_span_m": self.camera_span_m,
            "frame_width": self.frame_width,
            "frame_height": self.frame_height,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Scenario:
        return cls(
            road_length_m=float(data["road_length_m"]),
            anomalies=tuple(
                PlantedAnomaly(
                    position_m=float(a["position_m"]),
                    cls=AnomalyClass[a["class"]],
                    bbox_fraction=float(a["bbox_fraction"]),
                )
                for a in data["anomalies"]
            ),
            speed_mps=float(data["speed_mps"]),
            fps=float(data["fps"]),
            camera_span_m=float(data["camera_span_m"]),
            frame_width=int(data.get("frame_width", 640)),
            frame_height=int(data.get("frame_height", 640)),
            seed=int(data.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class OracleResult:
    per_class: dict[AnomalyClass, int] = field(default_factory=dict)
    sightings: list[int] = field(default_factory=list)
    misses: int = 0
    duplicates: int = 0

    @property
    def distinct_total(self) -> int:
        return sum(self.per_class.values())

    @property
    def sighting_events(self) -> int:
        return sum(self.sightings)


def box_dims_for_fraction(fraction: float, frame_w: int, frame_h: int) -> tuple[int, int]:
    """Integer (length, width) whose product equals round(fraction * frame area) when a
    divisor pair fits the frame; falls back to the nearest rectangle otherwise."""
    target = round(fraction * frame_w * frame_h)
    target = max(1, target)
    for d in range(math.isqrt(target), 0, -1):
        if target % d == 0 and target // d <= frame_w and d <= frame_h:
            return target // d, d
    width = min(frame_h, max(1, round(math.sqrt(target))))
    length = min(frame_w, max(1, round(target / width)))
    return length, width


def labels_for_frame(s: Scenario, seq: int) -> list[tuple[PlantedAnomaly, str]]:
    """Label lines for every planted anomaly visible in frame seq."""
    start, end = s.frame_interval(seq)
    lines = []
    for anomaly in s.anomalies:
        if not start <= anomaly.position_m < end:
            continue
        length, width = box_dims_for_fraction(anomaly.bbox_fraction, s.frame_width, s.frame_height)
        rel = (anomaly.position_m - start) / s.camera_span_m
        x = min(max(round(rel * s.frame_width - length / 2), 0), s.frame_width - length)
        y = (s.frame_height - width) // 2
        cx = (x + length / 2) / s.frame_width
        cy = (y + width / 2) / s.frame_height
        w = length / s.frame_width
        h = width / s.frame_height
        lines.append((anomaly, f"{anomaly.cls.class_id} {cx!r} {cy!r} {w!r} {h!r}"))
    return lines


def render_frame_image(s: Scenario, seq: int) -> bytes:
    """Flat-gray JPEG with dark rectangles at the frame's label positions."""
    from PIL import Image, ImageDraw

    img = Image.new("L", (s.frame_width, s.frame_height), ROAD_GRAY)
    draw = ImageDraw.Draw(img)
    for anomaly, line in labels_for_frame(s, seq):
        parts = line.split()
        cx, cy, w, h = (float(p) for p in parts[1:5])
        length = round(w * s.frame_width)
        width = round(h * s.frame_height)
        x = round(cx * s.frame_width - length / 2)
        y = round(cy * s.frame_height - width / 2)
        draw.rectangle([x, y, x + length - 1, y + width - 1], fill=ANOMALY_GRAY)
    import io

    buf = io.BytesIO()
    img.convert("RGB").save(buf, format="JPEG", quality=80)
    return buf.getvalue()


def render_scenario(s: Scenario, out_dir: str | Path) -> dict:
    """Materialize the drive: seq-numbered JPEGs, replay label files, and a manifest."""
    out = Path(out_dir)
    frames_dir = out / "frames"
    labels_dir = out / "labels"
    frames_dir.mkdir(parents=True, exist_ok=True)
    labels_dir.mkdir(parents=True, exist_ok=True)
    n = s.total_frames
    for seq in range(n):
        (frames_dir / f"{seq}.jpg").write_bytes(render_frame_image(s, seq))
        lines = [line for _, line in labels_for_frame(s, seq)]
        if lines:
            (labels_dir / f"{seq}.txt").write_text("\n".join(lines) + "\n")
    manifest = {
        "scenario": s.to_dict(),
        "total_frames": n,
        "fsi": s.fsi,
        "frames_dir": str(frames_dir),
        "labels_dir": str(labels_dir),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def oracle_count(s: Scenario, policy: SkipPolicy | None = None) -> OracleResult:
    """Exhaustive recount over every processed frame: sightings, distinct, misses, duplicates."""
    if policy is None:
        policy = skip_policy(s.fsi)
    result = OracleResult(sightings=[0] * len(s.anomalies))
    for seq in range(0, s.total_frames, policy.stride):
        start, end = s.frame_interval(seq)
        for i, anomaly in enumerate(s.anomalies):
            if start <= anomaly.position_m < end:
                result.sightings[i] += 1
    for anomaly, n in zip(s.anomalies, result.sightings):
        if n >= 1:
            result.per_class[anomaly.cls] = result.per_class.get(anomaly.cls, 0) + 1
        else:
            result.misses += 1
        result.duplicates += max(0, n - 1)
    return result


def sweep(s: Scenario, speeds_kmh: list[float], skips: list[int]) -> list[dict]:
    """Misses/duplicates grid across vehicle speeds and forced skip values."""
    from dataclasses import replace

    rows = []
    for v in speeds_kmh:
        speed = v / 3.6
        variant = replace(s, speed_mps=speed)
        for skip in skips:
            policy = SkipPolicy(fsi=variant.fsi, skip=skip)
            result = oracle_count(variant, policy)
            rows.append({
                "speed_kmh": v,
                "skip": skip,
                "processed_frames": len(range(0, variant.total_frames, policy.stride)),
                "distinct": result.distinct_total,
                "misses": result.misses,
                "duplicates": result.duplicates,
            })
    return rows


def measure_latency(detector, frames: list[Frame],
                    cfg: DetectorConfig = DetectorConfig(),
                    n_warmup: int = 5) -> dict:
    """Wall-clock seconds per detect call, warmup excluded."""
    if len(frames) < n_warmup + 10:
        raise ValueError(f"need at least {n_warmup + 10} frames, got {len(frames)}")
    for frame in frames[:n_warmup]:
        detector.detect(frame, cfg)
    samples = []
    for frame in frames[n_warmup:]:
        t0 = time.perf_counter()
        detector.detect(frame, cfg)
        samples.append(time.perf_counter() - t0)
    ordered = sorted(samples)
    return {
        "frames": len(samples),
        "mean_s": statistics.fmean(samples),
        "p50_s": ordered[len(ordered) // 2],
        "p95_s": ordered[min(len(ordered) - 1, math.ceil(0.95 * len(ordered)) - 1)],
    }


def run_equivalence(s: Scenario, work_dir: str | Path,
                    chunk_loss_rate: float = 0.0, loss_seed: int = 0) -> dict:
    """Run Mode-I and Mode-II sessions over loopback on the same rendered scenario
    and compare final counts, upload frame sets, and warning multisets."""
    from collections import Counter as Multiset

    from .endnode import EndnodeConfig, ScenarioFrameSource, run_mode1, run_mode2
    from .detector import replay_load
    from .rsu import RsuConfig, RsuServer

    work = Path(work_dir)
    manifest = render_scenario(s, work)
    labels_dir = Path(manifest["labels_dir"])
    report: dict = {"scenario": s.to_dict(), "equal": False}

    def session(mode: int) -> dict:
        sink_dir = work / f"sink_mode{mode}"
        rsu = RsuServer(RsuConfig(
            mode=mode, control_port=0, stream_port=0, api_port=0,
            label_dir=labels_dir if mode == 2 else None,
            sink_spec=str(sink_dir), autostart=True))
        rsu.start()
        try:
            frames = iter(ScenarioFrameSource(s))
            if mode == 1:
                cfg = EndnodeConfig(mode=1, rsu_addr=("127.0.0.1", rsu.control_port),
                                    detector=replay_load(labels_dir), fast=True)
                summary = run_mode1(cfg, frames)
            else:
                cfg = EndnodeConfig(mode=2, stream_addr=("127.0.0.1", rsu.stream_port),
                                    fast=True, chunk_loss_rate=chunk_loss_rate,
                                    loss_seed=loss_seed)
                summary = run_mode2(cfg, frames)
                deadline = time.monotonic() + 5.0
                while time.monotonic() < deadline:
                    # wait for in-flight datagrams and reassembly to settle
                    time.sleep(0.2)
                    if not rsu.reassembler._pending:
                        break
            status = rsu.status()
            return {
                "summary": {k: v for k, v in summary.items() if k != "counter"},
                "counts": status["counts"],
                "total": status["total"],
                "dropped_frames": status["dropped_frames"],
                "upload_seqs": sorted(seq for _, seq in rsu.uploaded_seqs),
                "warnings": sorted(
                    (w.text, w.class_id, w.size_class, w.frame_seq)
                    for w in rsu.warning_log),
            }
        finally:
            rsu.stop()

    try:
        mode1 = session(1)
        mode2 = session(2)
    except Exception as exc:  # session error: report the cause, not a traceback
        report["error"] = f"{type(exc).__name__}: {exc}"
        return report
    report["mode1"] = mode1
    report["mode2"] = mode2
    report["equal"] = (
        mode1["counts"] == mode2["counts"]
        and mode1["upload_seqs"] == mode2["upload_seqs"]
        and Multiset(tuple(w) for w in mode1["warnings"])
        == Multiset(tuple(w) for w in mode2["warnings"])
    )
    return report

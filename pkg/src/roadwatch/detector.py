"""Detector backends: deterministic label-file replay and an external-process bridge."""

from __future__ import annotations

import base64
import json
import shlex
import socket
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

from .core import AnomalyClass, BoundingBox, ClassSet, Detection


class DetectorError(Exception):
    """Backend failure while producing detections."""


class LabelParseError(Exception):
    """Malformed label file; message names file and line."""


class BridgeProtocolError(Exception):
    """Bridge response violated the request/response contract."""


@dataclass(frozen=True)
class Frame:
    seq: int
    width: int
    height: int
    payload: bytes = b""
    timestamp_ms: int = 0
    speed_mps: float = 0.0
    fps: float = 30.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"frame dimensions must be positive, got {self.width}x{self.height}")
        if self.seq < 0:
            raise ValueError(f"frame seq must be nonnegative, got {self.seq}")


@dataclass(frozen=True)
class DetectorConfig:
    confidence_threshold: float = 0.25
    class_set: ClassSet = ClassSet.FOUR

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError(f"threshold must be in [0,1], got {self.confidence_threshold}")


@dataclass(frozen=True)
class LabelRecord:
    """One normalized annotation line: class id plus center/extent fractions of the frame."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    conf: float = 1.0

    def denormalize(self, frame_w: int, frame_h: int) -> BoundingBox:
        """Map to pixel coordinates, clamped to frame bounds."""
        length = max(1, round(self.w * frame_w))
        width = max(1, round(self.h * frame_h))
        x = round(self.cx * frame_w - length / 2)
        y = round(self.cy * frame_h - width / 2)
        x = min(max(x, 0), frame_w - 1)
        y = min(max(y, 0), frame_h - 1)
        length = min(length, frame_w - x)
        width = min(width, frame_h - y)
        return BoundingBox(x=x, y=y, length=length, width=width)


def normalize_box(box: BoundingBox, frame_w: int, frame_h: int) -> tuple[float, float, float, float]:
    """Inverse of LabelRecord.denormalize: pixel box to (cx, cy, w, h) fractions."""
    return (
        (box.x + box.length / 2) / frame_w,
        (box.y + box.width / 2) / frame_h,
        box.length / frame_w,
        box.width / frame_h,
    )


def parse_label_line(line: str, class_set: ClassSet, source: str, lineno: int) -> LabelRecord:
    parts = line.split()
    if len(parts) not in (5, 6):
        raise LabelParseError(f"{source}:{lineno}: expected 5 or 6 fields, got {len(parts)}")
    try:
        class_id = int(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:5])
        conf = float(parts[5]) if len(parts) == 6 else 1.0
    except ValueError as exc:
        raise LabelParseError(f"{source}:{lineno}: {exc}") from None
    try:
        cls = AnomalyClass.from_id(class_id)
    except ValueError:
        raise LabelParseError(f"{source}:{lineno}: unknown class id {class_id}") from None
    if cls not in AnomalyClass.members(class_set):
        raise LabelParseError(f"{source}:{lineno}: class {cls.name} outside {class_set.name} set")
    for name, val in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not 0.0 <= val <= 1.0:
            raise LabelParseError(f"{source}:{lineno}: {name}={val} outside [0,1]")
    return LabelRecord(class_id=class_id, cx=cx, cy=cy, w=w, h=h, conf=conf)


def _record_to_detection(rec: LabelRecord, frame: Frame) -> Detection:
    return Detection(
        cls=AnomalyClass.from_id(rec.class_id),
        box=rec.denormalize(frame.width, frame.height),
        confidence=rec.conf,
    )


@dataclass
class ReplayDetector:
    """Returns detections read from ``{seq}.txt`` label files; absent file means empty road."""

    label_dir: Path
    class_set: ClassSet = ClassSet.FOUR

    def labels_for(self, seq: int) -> list[LabelRecord]:
        path = self.label_dir / f"{seq}.txt"
        if not path.is_file():
            return []
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            records.append(parse_label_line(line, self.class_set, str(path), lineno))
        return records

    def detect(self, frame: Frame, cfg: DetectorConfig) -> list[Detection]:
        return [
            _record_to_detection(rec, frame)
            for rec in self.labels_for(frame.seq)
            if rec.conf >= cfg.confidence_threshold
        ]


def replay_load(label_dir: str | Path, class_set: ClassSet = ClassSet.FOUR) -> ReplayDetector:
    path = Path(label_dir)
    if not path.is_dir():
        raise DetectorError(f"label directory not found: {path}")
    return ReplayDetector(label_dir=path, class_set=class_set)


@dataclass
class BridgeDetector:
    """Talks newline-delimited JSON to an external detector over stdio or a TCP socket.

    Endpoint forms: ``exec:<command line>`` (subprocess stdio) or ``host:port``.
    One request in flight at a time.
    """

    endpoint: str
    timeout_s: float = 10.0
    _proc: subprocess.Popen | None = field(default=None, repr=False)
    _sock_file: object | None = field(default=None, repr=False)

    def _ensure_started(self):
        if self.endpoint.startswith("exec:"):
            if self._proc is None or self._proc.poll() is not None:
                self._proc = subprocess.Popen(
                    shlex.split(self.endpoint[len("exec:"):]),
                    stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                )
        elif self._sock_file is None:
            host, _, port = self.endpoint.rpartition(":")
            try:
                sock = socket.create_connection((host, int(port)), timeout=self.timeout_s)
            except OSError as exc:
                raise DetectorError(f"bridge endpoint {self.endpoint} unreachable: {exc}") from exc
            sock.settimeout(self.timeout_s)
            self._sock_file = sock.makefile("rwb")

    def _roundtrip(self, request: bytes) -> bytes:
        self._ensure_started()
        if self._proc is not None:
            try:
                self._proc.stdin.write(request)
                self._proc.stdin.flush()
                line = self._proc.stdout.readline()
            except OSError as exc:
                raise DetectorError(f"bridge process failed: {exc}") from exc
        else:
            try:
                self._sock_file.write(request)
                self._sock_file.flush()
                line = self._sock_file.readline()
            except (OSError, socket.timeout) as exc:
                raise DetectorError(f"bridge socket failed: {exc}") from exc
        if not line:
            raise DetectorError("bridge closed the stream without responding")
        return line

    def detect(self, frame: Frame, cfg: DetectorConfig) -> list[Detection]:
        request = json.dumps({
            "seq": frame.seq,
            "width": frame.width,
            "height": frame.height,
            "image_b64": base64.b64encode(frame.payload).decode("ascii"),
        }).encode("utf-8") + b"\n"
        line = self._roundtrip(request)
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BridgeProtocolError(f"unparseable bridge response: {exc}") from None
        if response.get("seq") != frame.seq:
            raise BridgeProtocolError(
                f"bridge responded for seq {response.get('seq')}, expected {frame.seq}")
        detections = []
        for item in response.get("detections", []):
            rec = LabelRecord(
                class_id=int(item["class_id"]),
                cx=float(item["cx"]), cy=float(item["cy"]),
                w=float(item["w"]), h=float(item["h"]),
                conf=float(item.get("conf", 1.0)),
            )
            if rec.conf >= cfg.confidence_threshold:
                detections.append(_record_to_detection(rec, frame))
        return detections

    def close(self):
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)
            self._proc = None
        if self._sock_file is not None:
            self._sock_file.close()
            self._sock_file = None


def bridge_detect(frame: Frame, endpoint: str,
                  cfg: DetectorConfig = DetectorConfig()) -> list[Detection]:
    bridge = BridgeDetector(endpoint=endpoint)
    try:
        return bridge.detect(frame, cfg)
    finally:
        bridge.close()

"""Vehicle-side pipeline: frame sources, Mode-I detect-and-report, Mode-II streaming, warning listener."""

from __future__ import annotations

import base64
import logging
import random
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

from .core import (AnomalyCounter, MotionState, SizeClass, SizeConfig, classify_size,
                   compute_fsi, counter_observe, should_process, skip_policy)
from .detector import DetectorConfig, DetectorError, Frame
from .protocol import (AnomalyReport, Bye, ControlMessage, FrameMeta, GeneralWarning, Hello,
                       ReportedDetection, Warning, chunk_frame, encode_control,
                       encode_frame_payload, read_control)

log = logging.getLogger(__name__)

CONNECT_RETRIES = 3
RETRY_BACKOFF_S = 1.0


class SessionError(Exception):
    """Unrecoverable failure of an endnode session."""


@dataclass
class DirectoryFrameSource:
    """Reads seq-numbered JPEGs (``0.jpg``, ``1.jpg``, ...) from a directory."""

    frames_dir: Path
    motion: MotionState

    def __iter__(self) -> Iterator[Frame]:
        from PIL import Image
        import io

        seq = 0
        while True:
            path = self.frames_dir / f"{seq}.jpg"
            if not path.is_file():
                return
            payload = path.read_bytes()
            with Image.open(io.BytesIO(payload)) as img:
                width, height = img.size
            yield Frame(seq=seq, width=width, height=height, payload=payload,
                        timestamp_ms=int(time.time() * 1000),
                        speed_mps=self.motion.speed_mps, fps=self.motion.fps)
            seq += 1


@dataclass
class ScenarioFrameSource:
    """Synthesizes frames directly from a scenario, without touching disk."""

    scenario: object  # simharness.Scenario

    def __iter__(self) -> Iterator[Frame]:
        from .simharness import render_frame_image

        s = self.scenario
        for seq in range(s.total_frames):
            yield Frame(seq=seq, width=s.frame_width, height=s.frame_height,
                        payload=render_frame_image(s, seq),
                        timestamp_ms=int(time.time() * 1000),
                        speed_mps=s.speed_mps, fps=s.fps)


@dataclass
class EndnodeConfig:
    mode: int
    node_id: str = "endnode-1"
    rsu_addr: tuple[str, int] | None = None
    stream_addr: tuple[str, int] | None = None
    detector: object = None
    detector_cfg: DetectorConfig = field(default_factory=DetectorConfig)
    size_cfg: SizeConfig = field(default_factory=SizeConfig)
    fast: bool = False
    stream_id: int = 1
    mtu: int = 1400
    # test hook: fraction of datagram chunks to drop before sending
    chunk_loss_rate: float = 0.0
    loss_seed: int = 0

    def __post_init__(self):
        if self.mode == 1 and self.detector is None:
            raise ValueError("Mode-I requires a detector backend")
        if self.mode == 2 and self.stream_addr is None:
            raise ValueError("Mode-II requires a stream address")


def _connect_control(addr: tuple[str, int]) -> socket.socket:
    last_exc = None
    for attempt in range(CONNECT_RETRIES):
        try:
            return socket.create_connection(addr, timeout=10)
        except OSError as exc:
            last_exc = exc
            log.warning("RSU connect attempt %d/%d failed: %s", attempt + 1, CONNECT_RETRIES, exc)
            if attempt < CONNECT_RETRIES - 1:
                time.sleep(RETRY_BACKOFF_S)
    raise SessionError(f"RSU at {addr} unreachable: {last_exc}")


def _send(sock: socket.socket, msg: ControlMessage):
    sock.sendall(encode_control(msg))


def run_mode1(cfg: EndnodeConfig, frames: Iterator[Frame]) -> dict:
    """On-board detection: gate frames by the skip policy, report frames bearing anomalies."""
    sock = _connect_control(cfg.rsu_addr)
    counter = AnomalyCounter()
    frames_seen = frames_processed = reports_sent = 0
    try:
        _send(sock, Hello(role="endnode", node_id=cfg.node_id))
        policy = None
        last_motion = None
        for frame in frames:
            frames_seen += 1
            motion = MotionState(speed_mps=frame.speed_mps, fps=frame.fps)
            if motion != last_motion:
                policy = skip_policy(compute_fsi(motion))
                last_motion = motion
            detections = []
            if should_process(frame.seq, policy):
                frames_processed += 1
                try:
                    detections = cfg.detector.detect(frame, cfg.detector_cfg)
                except DetectorError as exc:
                    log.warning("detector failed on frame %d, skipping: %s", frame.seq, exc)
                    detections = []
            counter_observe(counter, frame.seq, detections, policy)
            if detections:
                sizes = [classify_size(d.box, frame.width, frame.height, cfg.size_cfg)
                         for d in detections]
                report = AnomalyReport(
                    frame_seq=frame.seq,
                    detections=tuple(
                        ReportedDetection(class_id=d.cls.class_id, x=d.box.x, y=d.box.y,
                                          length=d.box.length, width=d.box.width,
                                          conf=d.confidence)
                        for d in detections),
                    size_class="large" if SizeClass.LARGE in sizes else "small",
                    speed_mps=frame.speed_mps,
                    timestamp_ms=frame.timestamp_ms,
                    image_b64=base64.b64encode(frame.payload).decode("ascii"),
                    node_id=cfg.node_id,
                )
                try:
                    _send(sock, report)
                except OSError:
                    sock.close()
                    sock = _connect_control(cfg.rsu_addr)
                    _send(sock, Hello(role="endnode", node_id=cfg.node_id))
                    _send(sock, report)
                reports_sent += 1
            if not cfg.fast:
                time.sleep(1.0 / frame.fps)
        _send(sock, Bye(node_id=cfg.node_id))
    finally:
        sock.close()
    return {
        "frames_seen": frames_seen,
        "frames_processed": frames_processed,
        "reports_sent": reports_sent,
        "counter": counter,
    }


def run_mode2(cfg: EndnodeConfig, frames: Iterator[Frame]) -> dict:
    """Stream every frame to the RSU as chunked datagrams; no on-board detection."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    rng = random.Random(cfg.loss_seed)
    frames_seen = frames_streamed = bytes_sent = 0
    try:
        for frame in frames:
            frames_seen += 1
            meta = FrameMeta(timestamp_ms=frame.timestamp_ms, speed_mps=frame.speed_mps,
                             fps=frame.fps, width=frame.width, height=frame.height)
            payload = encode_frame_payload(meta, frame.payload)
            try:
                sent = 0
                for chunk in chunk_frame(payload, cfg.stream_id, frame.seq, cfg.mtu):
                    if cfg.chunk_loss_rate and rng.random() < cfg.chunk_loss_rate:
                        continue
                    sent += sock.sendto(chunk.encode(), cfg.stream_addr)
                bytes_sent += sent
                frames_streamed += 1
            except OSError as exc:
                log.warning("dropped frame %d, datagram send failed: %s", frame.seq, exc)
            if cfg.fast:
                time.sleep(0.002)  # keep loopback receive buffers ahead of the burst
            else:
                time.sleep(1.0 / frame.fps)
    finally:
        sock.close()
    return {
        "frames_seen": frames_seen,
        "frames_streamed": frames_streamed,
        "bytes_sent": bytes_sent,
    }


def run_vehicle_listener(rsu_addr: tuple[str, int], node_id: str = "vehicle-1",
                         on_message: Callable[[str], None] = print,
                         stop: threading.Event | None = None,
                         max_messages: int | None = None,
                         reconnect: bool = True) -> int:
    """Passive nearby-vehicle client: prints each received warning line verbatim."""
    received = 0
    stop = stop or threading.Event()
    while not stop.is_set():
        try:
            sock = socket.create_connection(rsu_addr, timeout=10)
        except OSError as exc:
            if not reconnect:
                raise SessionError(f"RSU at {rsu_addr} unreachable: {exc}") from exc
            time.sleep(RETRY_BACKOFF_S)
            continue
        try:
            sock.sendall(encode_control(Hello(role="vehicle", node_id=node_id)))
            reader = sock.makefile("rb")
            while not stop.is_set():
                msg = read_control(reader.read)
                if msg is None:
                    break
                if isinstance(msg, (Warning, GeneralWarning)):
                    on_message(msg.text)
                    received += 1
                    if max_messages is not None and received >= max_messages:
                        return received
        except OSError:
            pass
        finally:
            sock.close()
        if not reconnect:
            break
        if not stop.is_set():
            time.sleep(RETRY_BACKOFF_S)
    return received

"""Roadside Unit: control server, datagram stream receiver, operator API, warning broadcast."""

from __future__ import annotations

import base64
import io
import json
import logging
import mimetypes
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .cloudsink import UploadQueue, UploadRecord, open_sink
from .core import (AnomalyClass, AnomalyCounter, BoundingBox, ClassSet, Detection, MotionState,
                   SizeClass, SizeConfig, SkipPolicy, classify_size, compute_fsi, counter_reset,
                   should_process, skip_policy)
from .detector import DetectorConfig, DetectorError, Frame, replay_load
from .protocol import (WARNING_TEXT, AnomalyReport, Bye, Counts, FrameChunk, GeneralWarning,
                       Hello, ProtocolError, Reassembler, Warning, decode_frame_payload,
                       encode_control, read_control)

log = logging.getLogger(__name__)

INDICATOR_SIZE = 24
GENERAL_WARNING_TEXT = "Caution: this road contains many anomalies ({count} detected)."


def annotate_frame(jpeg: bytes, detections: list[Detection], large: bool) -> bytes:
    """Draw box outlines with class labels plus the green/red corner indicator."""
    from PIL import Image, ImageDraw

    with Image.open(io.BytesIO(jpeg)) as img:
        img = img.convert("RGB")
        draw = ImageDraw.Draw(img)
        for det in detections:
            b = det.box
            draw.rectangle([b.x, b.y, b.x + b.length - 1, b.y + b.width - 1],
                           outline=(255, 64, 64), width=3)
            draw.text((b.x + 4, max(0, b.y - 14)), det.cls.name, fill=(255, 64, 64))
        color = (220, 30, 30) if large else (30, 180, 30)
        draw.rectangle([0, 0, INDICATOR_SIZE - 1, INDICATOR_SIZE - 1], fill=color)
        buf = io.BytesIO()
        img.save(buf, format="JPEG", quality=85)
        return buf.getvalue()


@dataclass
class RsuConfig:
    mode: int = 1
    control_port: int = 7401
    stream_port: int = 7402
    api_port: int = 7403
    host: str = "127.0.0.1"
    threshold: int = 10
    size_cfg: SizeConfig = field(default_factory=SizeConfig)
    detector_cfg: DetectorConfig = field(default_factory=DetectorConfig)
    label_dir: Path | None = None
    bridge_endpoint: str | None = None
    sink_spec: str = ""
    static_dir: Path | None = None
    autostart: bool = False

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError(f"general warning threshold must be >= 1, got {self.threshold}")


class RsuServer:
    """Owns all RSU state; mutation is serialized under a single lock."""

    def __init__(self, cfg: RsuConfig):
        self.cfg = cfg
        self._lock = threading.RLock()
        self.mode = cfg.mode
        self.running = cfg.autostart
        self.counter = AnomalyCounter()
        self.general_fired = False
        self.dropped_frames = 0
        self.skip_override: int | None = None
        self.current_policy: SkipPolicy | None = None
        self.latest_frame: bytes | None = None
        self.latest_large = False
        self.warning_log: list[Warning] = []
        self.general_log: list[GeneralWarning] = []
        self.uploaded_seqs: set[tuple[str, int]] = set()
        self._vehicles: dict[socket.socket, str] = {}
        self._event_subscribers: list[queue.Queue] = []
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._last_stream_seq: dict[int, int] = {}

        self.detector = None
        if cfg.label_dir is not None:
            self.detector = replay_load(cfg.label_dir, cfg.detector_cfg.class_set)
        elif cfg.bridge_endpoint is not None:
            from .detector import BridgeDetector
            self.detector = BridgeDetector(endpoint=cfg.bridge_endpoint)

        sink = open_sink(cfg.sink_spec) if cfg.sink_spec else None
        dead_dir = None
        if sink is not None and hasattr(sink, "root"):
            dead_dir = Path(sink.root).parent / "failed"
        self.uploads = UploadQueue(sink=sink, dead_letter_dir=dead_dir) if sink else None

        self._control_sock: socket.socket | None = None
        self._stream_sock: socket.socket | None = None
        self._api_server: ThreadingHTTPServer | None = None
        self.reassembler = Reassembler()

    # ---- lifecycle ----

    def start(self):
        cfg = self.cfg
        self._control_sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._control_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._control_sock.bind((cfg.host, cfg.control_port))
        self._control_sock.listen(16)
        self._control_sock.settimeout(0.2)

        self._stream_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._stream_sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 8 * 1024 * 1024)
        self._stream_sock.bind((cfg.host, cfg.stream_port))
        self._stream_sock.settimeout(0.2)

        self._api_server = _build_api_server(self, (cfg.host, cfg.api_port))

        if self.uploads is not None:
            self.uploads.start()
        for name, target in (("rsu-control", self._accept_loop),
                             ("rsu-stream", self._stream_loop),
                             ("rsu-api", self._api_server.serve_forever)):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        log.info("RSU up: control=%s stream=%s api=%s mode=%d",
                 self.control_port, self.stream_port, self.api_port, self.mode)

    @property
    def control_port(self) -> int:
        return self._control_sock.getsockname()[1]

    @property
    def stream_port(self) -> int:
        return self._stream_sock.getsockname()[1]

    @property
    def api_port(self) -> int:
        return self._api_server.server_address[1]

    def stop(self, drain_uploads: bool = True):
        self._stop.set()
        if self._api_server is not None:
            self._api_server.shutdown()
        if self._control_sock is not None:
            self._control_sock.close()
        with self._lock:
            for sock in list(self._vehicles):
                sock.close()
            self._vehicles.clear()
        if self.uploads is not None and drain_uploads:
            self.uploads.drain_and_stop()
        for t in self._threads:
            t.join(timeout=5)
        if self._stream_sock is not None:
            self._stream_sock.close()

    # ---- control channel ----

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, addr = self._control_sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._serve_connection, args=(conn, addr),
                             name=f"rsu-conn-{addr[1]}", daemon=True).start()

    def _serve_connection(self, conn: socket.socket, addr):
        conn.settimeout(None)
        reader = conn.makefile("rb")
        node_id = None
        is_vehicle = False
        try:
            while not self._stop.is_set():
                try:
                    msg = read_control(reader.read)
                except ProtocolError as exc:
                    log.warning("rejecting malformed message from %s: %s", addr, exc)
                    continue
                if msg is None:
                    break
                if isinstance(msg, Hello):
                    node_id = msg.node_id
                    if msg.role in ("vehicle", "console"):
                        is_vehicle = True
                        with self._lock:
                            self._vehicles[conn] = node_id
                        log.info("%s %s connected", msg.role, node_id)
                elif isinstance(msg, AnomalyReport):
                    self.handle_report(msg)
                elif isinstance(msg, Bye):
                    break
        except OSError:
            pass
        finally:
            if is_vehicle:
                with self._lock:
                    self._vehicles.pop(conn, None)
            conn.close()

    def _broadcast(self, msg):
        payload = encode_control(msg)
        with self._lock:
            targets = list(self._vehicles)
        delivered = 0
        for sock in targets:
            try:
                sock.sendall(payload)
                delivered += 1
            except OSError:
                with self._lock:
                    self._vehicles.pop(sock, None)
        return delivered

    def _publish(self, event: str, data: dict):
        with self._lock:
            subscribers = list(self._event_subscribers)
        for q in subscribers:
            try:
                q.put_nowait((event, data))
            except queue.Full:
                pass

    # ---- ingest (both modes) ----

    def handle_report(self, report: AnomalyReport):
        """Mode-I entry point: one report per anomalous frame from an endnode."""
        with self._lock:
            if not self.running or self.mode != 1:
                log.info("ignoring report (running=%s mode=%d)", self.running, self.mode)
                return
        try:
            jpeg = base64.b64decode(report.image_b64)
            detections = [
                Detection(cls=AnomalyClass.from_id(d.class_id),
                          box=BoundingBox(x=d.x, y=d.y, length=d.length, width=d.width),
                          confidence=d.conf)
                for d in report.detections
            ]
        except (ValueError, KeyError) as exc:
            log.warning("rejecting malformed report for frame %s: %s", report.frame_seq, exc)
            return
        from PIL import Image, UnidentifiedImageError
        try:
            with Image.open(io.BytesIO(jpeg)) as img:
                frame_w, frame_h = img.size
        except UnidentifiedImageError as exc:
            log.warning("rejecting report with undecodable image for frame %s: %s",
                        report.frame_seq, exc)
            return
        self._ingest(frame_seq=report.frame_seq, detections=detections, jpeg=jpeg,
                     frame_w=frame_w, frame_h=frame_h, size_class=report.size_class,
                     timestamp_ms=report.timestamp_ms, node_id=report.node_id, mode=1)

    def handle_datagram(self, data: bytes):
        """Mode-II entry point: one raw datagram from the stream socket."""
        try:
            chunk = FrameChunk.decode(data)
            payload = self.reassembler.add(chunk)
        except ProtocolError as exc:
            log.warning("bad datagram: %s", exc)
            return
        before = self.dropped_frames
        self.dropped_frames = self.reassembler.dropped_frames
        if payload is None:
            return
        self._process_streamed_frame(chunk.frame_seq, payload)

    def _process_streamed_frame(self, frame_seq: int, payload: bytes):
        with self._lock:
            if not self.running or self.mode != 2:
                return
            if self.detector is None:
                log.warning("no detector configured for Mode-II, dropping frame %d", frame_seq)
                return
        try:
            meta, jpeg = decode_frame_payload(payload)
        except ProtocolError as exc:
            log.warning("undecodable frame %d: %s", frame_seq, exc)
            return
        motion = MotionState(speed_mps=meta.speed_mps, fps=meta.fps)
        with self._lock:
            if self.skip_override is not None:
                policy = SkipPolicy(fsi=compute_fsi(motion), skip=self.skip_override)
            else:
                policy = skip_policy(compute_fsi(motion))
            self.current_policy = policy
        if not should_process(frame_seq, policy):
            return
        frame = Frame(seq=frame_seq, width=meta.width, height=meta.height, payload=jpeg,
                      timestamp_ms=meta.timestamp_ms, speed_mps=meta.speed_mps, fps=meta.fps)
        try:
            detections = self.detector.detect(frame, self.cfg.detector_cfg)
        except DetectorError as exc:
            log.warning("detector failed on streamed frame %d, skipping: %s", frame_seq, exc)
            return
        if not detections:
            with self._lock:
                self.latest_large = False
            self.latest_frame = annotate_frame(jpeg, [], large=False)
            return
        sizes = [classify_size(d.box, meta.width, meta.height, self.cfg.size_cfg)
                 for d in detections]
        size_class = "large" if SizeClass.LARGE in sizes else "small"
        self._ingest(frame_seq=frame_seq, detections=detections, jpeg=jpeg,
                     frame_w=meta.width, frame_h=meta.height, size_class=size_class,
                     timestamp_ms=meta.timestamp_ms, node_id="stream", mode=2)

    def _ingest(self, frame_seq: int, detections: list[Detection], jpeg: bytes,
                frame_w: int | None, frame_h: int | None, size_class: str,
                timestamp_ms: int, node_id: str, mode: int):
        """Count, warn, annotate, and enqueue the evidence upload for one anomalous frame."""
        large = size_class == "large"
        large_class_id = detections[0].cls.class_id if detections else 0
        if frame_w is not None:
            for det in detections:
                if classify_size(det.box, frame_w, frame_h, self.cfg.size_cfg) is SizeClass.LARGE:
                    large_class_id = det.cls.class_id
                    break
        with self._lock:
            for det in detections:
                self.counter.add(det.cls)
            self.counter.last_seq = frame_seq
            total = self.counter.total
            fire_general = total > self.cfg.threshold and not self.general_fired
            if fire_general:
                self.general_fired = True
            self.latest_large = large

        self.latest_frame = annotate_frame(jpeg, detections, large=large)

        if large:
            warning = Warning(text=WARNING_TEXT, class_id=large_class_id,
                              size_class=size_class, frame_seq=frame_seq,
                              timestamp_ms=timestamp_ms)
            with self._lock:
                self.warning_log.append(warning)
            self._broadcast(warning)
            self._publish("warning", {"text": warning.text, "frame_seq": frame_seq,
                                      "size_class": size_class, "class_id": large_class_id})
        if fire_general:
            general = GeneralWarning(count=total, threshold=self.cfg.threshold,
                                     text=GENERAL_WARNING_TEXT.format(count=total),
                                     timestamp_ms=timestamp_ms)
            with self._lock:
                self.general_log.append(general)
            self._broadcast(general)
            self._publish("general_warning", {"text": general.text, "count": total,
                                              "threshold": self.cfg.threshold})
        if self.uploads is not None:
            record = UploadRecord(
                frame_seq=frame_seq, timestamp_ms=timestamp_ms,
                classes=tuple(sorted({d.cls.class_id for d in detections})),
                size_class=size_class, image=jpeg, node_id=node_id, mode=mode)
            self.uploads.submit(record)
            with self._lock:
                self.uploaded_seqs.add((node_id, frame_seq))
        self._publish("counts", self._counts_payload())
        self._broadcast(Counts(**self._counts_payload()))

    # ---- stream loop ----

    def _stream_loop(self):
        while not self._stop.is_set():
            try:
                data, _ = self._stream_sock.recvfrom(65536)
            except socket.timeout:
                self.reassembler.expire()
                self.dropped_frames = self.reassembler.dropped_frames
                continue
            except OSError:
                return
            self.handle_datagram(data)

    # ---- operator API state ----

    def _counts_payload(self) -> dict:
        with self._lock:
            return {
                "per_class": {cls.name: n for cls, n in sorted(
                    self.counter.counts.items(), key=lambda kv: kv[0].class_id)},
                "total": self.counter.total,
            }

    def status(self) -> dict:
        with self._lock:
            skip = self.skip_override
            if skip is None:
                skip = self.current_policy.skip if self.current_policy else None
            return {
                "mode": self.mode,
                "running": self.running,
                "counts": {cls.name: n for cls, n in sorted(
                    self.counter.counts.items(), key=lambda kv: kv[0].class_id)},
                "total": self.counter.total,
                "dropped_frames": self.dropped_frames,
                "skip": skip,
                "threshold": self.cfg.threshold,
                "fired": self.general_fired,
                "latest_large": self.latest_large,
                "connected_vehicles": len(self._vehicles),
                "upload_queue_depth": self.uploads.depth if self.uploads else 0,
            }

    def api_start(self):
        with self._lock:
            self.running = True

    def api_stop(self):
        with self._lock:
            self.running = False

    def api_set_mode(self, mode: int) -> bool:
        """Returns False (409 upstream) when processing is running."""
        if mode not in (1, 2):
            raise ValueError(f"mode must be 1 or 2, got {mode}")
        with self._lock:
            if self.running:
                return False
            self.mode = mode
            return True

    def api_set_skip(self, frames: int):
        if frames < 0:
            raise ValueError(f"skip must be nonnegative, got {frames}")
        with self._lock:
            self.skip_override = frames

    def api_reset(self):
        with self._lock:
            counter_reset(self.counter)
            self.general_fired = False
            self.skip_override = None
            self.latest_large = False
        self._publish("counts", self._counts_payload())

    def subscribe(self) -> queue.Queue:
        q = queue.Queue(maxsize=256)
        with self._lock:
            self._event_subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue):
        with self._lock:
            if q in self._event_subscribers:
                self._event_subscribers.remove(q)


def _build_api_server(rsu: RsuServer, addr) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("api: " + fmt, *args)

        def _json(self, code: int, payload: dict):
            body = json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _read_body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if not length:
                return {}
            return json.loads(self.rfile.read(length).decode("utf-8"))

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            if self.path == "/status":
                self._json(200, rsu.status())
            elif self.path == "/counts":
                self._json(200, rsu._counts_payload())
            elif self.path.startswith("/frame/latest"):
                frame = rsu.latest_frame
                if frame is None:
                    self._json(404, {"error": "no frame processed yet"})
                    return
                self.send_response(200)
                self.send_header("Content-Type", "image/jpeg")
                self.send_header("Content-Length", str(len(frame)))
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                self.wfile.write(frame)
            elif self.path == "/events":
                self._serve_events()
            else:
                self._serve_static()

        def _serve_events(self):
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            q = rsu.subscribe()
            try:
                self.wfile.write(b": connected\n\n")
                self.wfile.flush()
                while not rsu._stop.is_set():
                    try:
                        event, data = q.get(timeout=1.0)
                    except queue.Empty:
                        self.wfile.write(b": keepalive\n\n")
                        self.wfile.flush()
                        continue
                    frame = f"event: {event}\ndata: {json.dumps(data)}\n\n"
                    self.wfile.write(frame.encode("utf-8"))
                    self.wfile.flush()
            except OSError:
                pass
            finally:
                rsu.unsubscribe(q)

        def _serve_static(self):
            static_dir = rsu.cfg.static_dir
            path = self.path.split("?", 1)[0]
            if path == "/":
                path = "/index.html"
            if static_dir is not None:
                target = (static_dir / path.lstrip("/")).resolve()
                if target.is_file() and str(target).startswith(str(static_dir.resolve())):
                    body = target.read_bytes()
                    ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
                    self.send_response(200)
                    self.send_header("Content-Type", ctype)
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                    return
            self._json(404, {"error": f"no such endpoint: {self.path}"})

        def do_POST(self):
            try:
                body = self._read_body()
            except (json.JSONDecodeError, ValueError):
                self._json(400, {"error": "malformed JSON body"})
                return
            try:
                if self.path == "/start":
                    rsu.api_start()
                    self._json(200, rsu.status())
                elif self.path == "/stop":
                    rsu.api_stop()
                    self._json(200, rsu.status())
                elif self.path == "/mode":
                    if rsu.api_set_mode(int(body.get("mode", 0))):
                        self._json(200, rsu.status())
                    else:
                        self._json(409, {"error": "cannot change mode while running"})
                elif self.path == "/skip":
                    rsu.api_set_skip(int(body.get("frames", -1)))
                    self._json(200, rsu.status())
                elif self.path == "/reset":
                    rsu.api_reset()
                    self._json(200, rsu.status())
                else:
                    self._json(404, {"error": f"no such endpoint: {self.path}"})
            except (ValueError, TypeError) as exc:
                self._json(400, {"error": str(exc)})

    server = ThreadingHTTPServer(addr, Handler)
    server.daemon_threads = True
    return server

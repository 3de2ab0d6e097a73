"""Exactly-once persistence of anomaly evidence plus storage accounting."""

from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

QUEUE_CAPACITY = 1024
MAX_RETRIES = 3


class UploadError(Exception):
    """Sink rejected or failed to persist a record."""


@dataclass(frozen=True)
class UploadRecord:
    frame_seq: int
    timestamp_ms: int
    classes: tuple[int, ...]  # anomaly class ids present on the frame
    size_class: str  # "large" | "small"
    image: bytes
    node_id: str
    mode: int = 1

    def __post_init__(self):
        if not self.image:
            raise ValueError("upload image must be nonempty")

    @property
    def dedup_key(self) -> tuple[str, int]:
        return (self.node_id, self.frame_seq)

    def sidecar(self) -> dict:
        return {
            "timestamp_ms": self.timestamp_ms,
            "frame_seq": self.frame_seq,
            "node_id": self.node_id,
            "classes": list(self.classes),
            "size_class": self.size_class,
            "mode": self.mode,
        }


@dataclass
class StorageReport:
    objects: int = 0
    total_bytes: int = 0
    bytes_by_size: dict[str, int] = field(default_factory=dict)
    bytes_by_mode: dict[int, int] = field(default_factory=dict)


def _class_list(classes: tuple[int, ...]) -> str:
    from .core import AnomalyClass
    return "-".join(AnomalyClass.from_id(c).name for c in sorted(set(classes)))


@dataclass
class DirectorySink:
    """Writes image + JSON sidecar pairs; duplicate (node_id, frame_seq) returns the original receipt."""

    root: Path
    _receipts: dict[tuple[str, int], str] = field(default_factory=dict)

    def upload(self, record: UploadRecord) -> str:
        existing = self._receipts.get(record.dedup_key)
        if existing is not None:
            return existing
        stem = (f"{record.timestamp_ms}_{record.frame_seq}_"
                f"{_class_list(record.classes)}_{record.size_class}")
        jpg_path = self.root / f"{stem}.jpg"
        json_path = self.root / f"{stem}.json"
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            jpg_path.write_bytes(record.image)
            json_path.write_text(json.dumps(record.sidecar(), indent=2))
        except OSError as exc:
            try:
                jpg_path.unlink(missing_ok=True)
            except OSError:
                pass
            raise UploadError(f"directory sink write failed: {exc}") from exc
        receipt = stem
        self._receipts[record.dedup_key] = receipt
        return receipt


@dataclass
class HttpSink:
    """POSTs each record as multipart form data; any 2xx response is the receipt."""

    url: str
    timeout_s: float = 10.0
    _receipts: dict[tuple[str, int], str] = field(default_factory=dict)

    def upload(self, record: UploadRecord) -> str:
        import requests

        existing = self._receipts.get(record.dedup_key)
        if existing is not None:
            return existing
        try:
            resp = requests.post(
                self.url,
                files={"image": (f"{record.frame_seq}.jpg", record.image, "image/jpeg")},
                data={"metadata": json.dumps(record.sidecar())},
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise UploadError(f"http sink unreachable: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise UploadError(f"http sink returned {resp.status_code}")
        receipt = f"{record.node_id}/{record.frame_seq}"
        self._receipts[record.dedup_key] = receipt
        return receipt


def open_sink(spec: str | Path):
    spec = str(spec)
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpSink(url=spec)
    return DirectorySink(root=Path(spec))


@dataclass
class UploadQueue:
    """Bounded queue drained by one worker; failed records retry, then dead-letter."""

    sink: object
    dead_letter_dir: Path | None = None
    capacity: int = QUEUE_CAPACITY
    max_retries: int = MAX_RETRIES
    uploaded: int = 0
    dead_lettered: int = 0
    overflowed: int = 0

    def __post_init__(self):
        self._queue: queue.Queue = queue.Queue(maxsize=self.capacity)
        self._worker: threading.Thread | None = None
        self._stop = threading.Event()

    def start(self):
        self._worker = threading.Thread(target=self._drain, name="upload-worker", daemon=True)
        self._worker.start()

    def submit(self, record: UploadRecord):
        while True:
            try:
                self._queue.put_nowait(record)
                return
            except queue.Full:
                try:
                    dropped = self._queue.get_nowait()
                    self._queue.task_done()
                    self.overflowed += 1
                    log.warning("upload queue full, dropping oldest (frame %s)",
                                dropped.frame_seq)
                except queue.Empty:
                    pass

    @property
    def depth(self) -> int:
        return self._queue.qsize()

    def _drain(self):
        while not self._stop.is_set() or not self._queue.empty():
            try:
                record = self._queue.get(timeout=0.1)
            except queue.Empty:
                continue
            self._handle(record)
            self._queue.task_done()

    def _handle(self, record: UploadRecord):
        for attempt in range(1, self.max_retries + 1):
            try:
                self.sink.upload(record)
                self.uploaded += 1
                return
            except UploadError as exc:
                log.warning("upload of frame %s failed (attempt %d/%d): %s",
                            record.frame_seq, attempt, self.max_retries, exc)
        self._dead_letter(record)

    def _dead_letter(self, record: UploadRecord):
        self.dead_lettered += 1
        if self.dead_letter_dir is None:
            log.error("frame %s dead-lettered with no dead-letter directory", record.frame_seq)
            return
        try:
            self.dead_letter_dir.mkdir(parents=True, exist_ok=True)
            stem = f"{record.node_id}_{record.frame_seq}"
            (self.dead_letter_dir / f"{stem}.jpg").write_bytes(record.image)
            (self.dead_letter_dir / f"{stem}.json").write_text(
                json.dumps(record.sidecar(), indent=2))
        except OSError as exc:
            log.error("dead-letter write failed for frame %s: %s", record.frame_seq, exc)

    def drain_and_stop(self, timeout_s: float = 30.0):
        self._queue.join()
        self._stop.set()
        if self._worker is not None:
            self._worker.join(timeout=timeout_s)


def storage_report(sink_dir: str | Path) -> StorageReport:
    """Aggregate object count and byte totals for a directory sink."""
    root = Path(sink_dir)
    report = StorageReport()
    if not root.is_dir():
        return report
    for jpg in sorted(root.glob("*.jpg")):
        size = jpg.stat().st_size
        sidecar_path = jpg.with_suffix(".json")
        size_class, mode = "unknown", 0
        if sidecar_path.is_file():
            size += sidecar_path.stat().st_size
            try:
                meta = json.loads(sidecar_path.read_text())
                size_class = meta.get("size_class", "unknown")
                mode = int(meta.get("mode", 0))
            except (json.JSONDecodeError, ValueError):
                pass
        report.objects += 1
        report.total_bytes += size
        report.bytes_by_size[size_class] = report.bytes_by_size.get(size_class, 0) + size
        report.bytes_by_mode[mode] = report.bytes_by_mode.get(mode, 0) + size
    return report

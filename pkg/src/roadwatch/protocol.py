"""Wire vocabulary: length-prefixed JSON control channel and chunked datagram frame stream."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

WARNING_TEXT = "There is large anomaly within your range, be carefull!"

MAX_CONTROL_BODY = 16 * 1024 * 1024
CHUNK_MTU = 1400
CHUNK_MAGIC = b"RW"
CHUNK_VERSION = 1
FLAG_LAST = 0x01
REASSEMBLY_TIMEOUT_MS = 2000

# magic[2] version[1] flags[1] stream_id[4] frame_seq[4] chunk_index[2] chunk_count[2]
_HEADER = struct.Struct("!2sBBIIHH")
HEADER_SIZE = _HEADER.size
assert HEADER_SIZE == 16


class ProtocolError(Exception):
    """Malformed or contract-violating wire data."""


class FramingError(ProtocolError):
    """Truncated or oversized control frame."""


@dataclass(frozen=True)
class Hello:
    role: str  # "endnode" | "vehicle" | "console"
    node_id: str


@dataclass(frozen=True)
class ReportedDetection:
    class_id: int
    x: int
    y: int
    length: int
    width: int
    conf: float


@dataclass(frozen=True)
class AnomalyReport:
    frame_seq: int
    detections: tuple[ReportedDetection, ...]
    size_class: str  # "large" | "small"
    speed_mps: float
    timestamp_ms: int
    image_b64: str
    node_id: str = ""


@dataclass(frozen=True)
class Warning:
    text: str
    class_id: int
    size_class: str
    frame_seq: int
    timestamp_ms: int


@dataclass(frozen=True)
class GeneralWarning:
    count: int
    threshold: int
    text: str
    timestamp_ms: int


@dataclass(frozen=True)
class Counts:
    per_class: dict[str, int]
    total: int

    def __hash__(self):
        return hash((tuple(sorted(self.per_class.items())), self.total))


@dataclass(frozen=True)
class Bye:
    node_id: str


ControlMessage = Hello | AnomalyReport | Warning | GeneralWarning | Counts | Bye

_TYPE_TAGS = {
    Hello: "HELLO",
    AnomalyReport: "ANOMALY_REPORT",
    Warning: "WARNING",
    GeneralWarning: "GENERAL_WARNING",
    Counts: "COUNTS",
    Bye: "BYE",
}
_TAG_TYPES = {tag: cls for cls, tag in _TYPE_TAGS.items()}


def _to_body(msg: ControlMessage) -> dict:
    body = {"type": _TYPE_TAGS[type(msg)]}
    if isinstance(msg, AnomalyReport):
        body.update(
            frame_seq=msg.frame_seq,
            detections=[vars(d) | {} for d in msg.detections],
            size_class=msg.size_class,
            speed_mps=msg.speed_mps,
            timestamp_ms=msg.timestamp_ms,
            image_b64=msg.image_b64,
            node_id=msg.node_id,
        )
    else:
        body.update({k: v for k, v in vars(msg).items()})
    return body


def _from_body(body: dict) -> ControlMessage:
    tag = body.get("type")
    cls = _TAG_TYPES.get(tag)
    if cls is None:
        raise ProtocolError(f"unknown control message type {tag!r}")
    fields = {k: v for k, v in body.items() if k != "type"}
    try:
        if cls is AnomalyReport:
            fields["detections"] = tuple(
                ReportedDetection(**d) for d in fields.get("detections", []))
            return AnomalyReport(**fields)
        return cls(**fields)
    except TypeError as exc:
        raise ProtocolError(f"bad {tag} body: {exc}") from None


def encode_control(msg: ControlMessage) -> bytes:
    body = json.dumps(_to_body(msg), separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_CONTROL_BODY:
        raise FramingError(f"control body {len(body)} bytes exceeds {MAX_CONTROL_BODY}")
    return struct.pack("!I", len(body)) + body


def decode_control(data: bytes) -> ControlMessage:
    if len(data) < 4:
        raise FramingError("control frame shorter than length prefix")
    (length,) = struct.unpack_from("!I", data)
    if length > MAX_CONTROL_BODY:
        raise FramingError(f"declared body {length} bytes exceeds {MAX_CONTROL_BODY}")
    body = data[4:4 + length]
    if len(body) != length:
        raise FramingError(f"truncated control body: {len(body)} of {length} bytes")
    try:
        parsed = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"unparseable control body: {exc}") from None
    return _from_body(parsed)


def read_control(read_exactly) -> ControlMessage | None:
    """Read one framed message via ``read_exactly(n) -> bytes``; None on clean EOF."""
    prefix = read_exactly(4)
    if not prefix:
        return None
    if len(prefix) != 4:
        raise FramingError("stream ended inside length prefix")
    (length,) = struct.unpack("!I", prefix)
    if length > MAX_CONTROL_BODY:
        raise FramingError(f"declared body {length} bytes exceeds {MAX_CONTROL_BODY}")
    body = read_exactly(length)
    if len(body) != length:
        raise FramingError(f"stream ended inside body: {len(body)} of {length} bytes")
    return decode_control(prefix + body)


@dataclass(frozen=True)
class FrameChunk:
    stream_id: int
    frame_seq: int
    chunk_index: int
    chunk_count: int
    payload: bytes
    last: bool = False

    def encode(self) -> bytes:
        flags = FLAG_LAST if self.last else 0
        return _HEADER.pack(CHUNK_MAGIC, CHUNK_VERSION, flags, self.stream_id,
                            self.frame_seq, self.chunk_index, self.chunk_count) + self.payload

    @classmethod
    def decode(cls, datagram: bytes) -> FrameChunk:
        if len(datagram) < HEADER_SIZE:
            raise ProtocolError(f"datagram shorter than header: {len(datagram)} bytes")
        magic, version, flags, stream_id, frame_seq, index, count = _HEADER.unpack_from(datagram)
        if magic != CHUNK_MAGIC:
            raise ProtocolError(f"bad chunk magic {magic!r}")
        if version != CHUNK_VERSION:
            raise ProtocolError(f"unsupported chunk version {version}")
        if index >= count:
            raise ProtocolError(f"chunk_index {index} >= chunk_count {count}")
        return cls(stream_id=stream_id, frame_seq=frame_seq, chunk_index=index,
                   chunk_count=count, payload=datagram[HEADER_SIZE:],
                   last=bool(flags & FLAG_LAST))


def chunk_frame(payload: bytes, stream_id: int, frame_seq: int,
                mtu: int = CHUNK_MTU) -> list[FrameChunk]:
    """Split a frame payload into at most mtu-sized chunks; last chunk flagged."""
    if not payload:
        raise ValueError("cannot chunk an empty payload")
    count = (len(payload) + mtu - 1) // mtu
    if count > 0xFFFF:
        raise ValueError(f"payload needs {count} chunks, limit is 65535")
    return [
        FrameChunk(stream_id=stream_id, frame_seq=frame_seq, chunk_index=i,
                   chunk_count=count, payload=payload[i * mtu:(i + 1) * mtu],
                   last=(i == count - 1))
        for i in range(count)
    ]


@dataclass(frozen=True)
class FrameMeta:
    timestamp_ms: int
    speed_mps: float
    fps: float
    width: int
    height: int


def encode_frame_payload(meta: FrameMeta, jpeg: bytes) -> bytes:
    if not jpeg:
        raise ValueError("jpeg bytes must be nonempty")
    meta_json = json.dumps(vars(meta), separators=(",", ":")).encode("utf-8")
    return struct.pack("!H", len(meta_json)) + meta_json + jpeg


def decode_frame_payload(payload: bytes) -> tuple[FrameMeta, bytes]:
    if len(payload) < 2:
        raise ProtocolError("frame payload shorter than metadata length prefix")
    (meta_len,) = struct.unpack_from("!H", payload)
    meta_bytes = payload[2:2 + meta_len]
    if len(meta_bytes) != meta_len:
        raise ProtocolError("frame payload truncated inside metadata")
    jpeg = payload[2 + meta_len:]
    if not jpeg:
        raise ProtocolError("frame payload carries no image bytes")
    try:
        meta = FrameMeta(**json.loads(meta_bytes.decode("utf-8")))
    except (json.JSONDecodeError, TypeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"bad frame metadata: {exc}") from None
    return meta, jpeg


@dataclass
class _PartialFrame:
    chunk_count: int
    parts: dict[int, bytes] = field(default_factory=dict)
    first_seen_ms: float = 0.0


@dataclass
class Reassembler:
    """Rebuilds frame payloads from out-of-order, possibly duplicated chunks.

    Frames still incomplete after the timeout are dropped and counted. The clock
    is injectable for tests; it returns milliseconds.
    """

    timeout_ms: float = REASSEMBLY_TIMEOUT_MS
    clock: object = None
    dropped_frames: int = 0
    _pending: dict[tuple[int, int], _PartialFrame] = field(default_factory=dict)
    _completed: dict[tuple[int, int], float] = field(default_factory=dict)

    def _now_ms(self) -> float:
        if self.clock is not None:
            return self.clock()
        return time.monotonic() * 1000.0

    def add(self, chunk: FrameChunk) -> bytes | None:
        """Feed one chunk; returns the complete payload when the frame finishes."""
        self.expire()
        key = (chunk.stream_id, chunk.frame_seq)
        if key in self._completed:
            return None
        partial = self._pending.get(key)
        if partial is None:
            partial = _PartialFrame(chunk_count=chunk.chunk_count, first_seen_ms=self._now_ms())
            self._pending[key] = partial
        elif partial.chunk_count != chunk.chunk_count:
            raise ProtocolError(
                f"conflicting chunk_count for frame {chunk.frame_seq}: "
                f"{partial.chunk_count} vs {chunk.chunk_count}")
        partial.parts.setdefault(chunk.chunk_index, chunk.payload)
        if len(partial.parts) == partial.chunk_count:
            del self._pending[key]
            self._completed[key] = self._now_ms()
            return b"".join(partial.parts[i] for i in range(partial.chunk_count))
        return None

    def expire(self) -> int:
        """Drop frames whose assembly window has passed; returns how many were dropped now."""
        now = self._now_ms()
        stale = [k for k, p in self._pending.items()
                 if now - p.first_seen_ms >= self.timeout_ms]
        for key in stale:
            del self._pending[key]
        self.dropped_frames += len(stale)
        for key in [k for k, t in self._completed.items() if now - t >= self.timeout_ms]:
            del self._completed[key]
        return len(stale)

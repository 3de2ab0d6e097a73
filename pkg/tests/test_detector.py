import json
import socket
import sys
import textwrap
import threading

import pytest
from hypothesis import given, strategies as st

from roadwatch.core import AnomalyClass, ClassSet
from roadwatch.detector import (BridgeDetector, BridgeProtocolError, DetectorConfig,
                                DetectorError, Frame, LabelParseError, LabelRecord,
                                bridge_detect, normalize_box, parse_label_line, replay_load)


def frame(seq=0, w=640, h=640):
    return Frame(seq=seq, width=w, height=h, payload=b"\xff\xd8\xff\xd9")


class TestLabelParsing:
    def test_basic_line(self):
        rec = parse_label_line("3 0.5 0.5 0.4 0.25", ClassSet.FOUR, "0.txt", 1)
        assert rec.class_id == 3
        assert rec.conf == 1.0

    def test_fifth_column_confidence(self):
        rec = parse_label_line("3 0.5 0.5 0.4 0.25 0.8", ClassSet.FOUR, "0.txt", 1)
        assert rec.conf == 0.8

    def test_unknown_class_under_four_set(self):
        with pytest.raises(LabelParseError, match="outside FOUR"):
            parse_label_line("6 0.5 0.5 0.1 0.1", ClassSet.FOUR, "0.txt", 1)

    def test_unknown_class_id(self):
        with pytest.raises(LabelParseError, match="unknown class id"):
            parse_label_line("9 0.5 0.5 0.1 0.1", ClassSet.EIGHT, "7.txt", 2)

    def test_malformed_names_file_and_line(self):
        with pytest.raises(LabelParseError, match=r"7\.txt:2"):
            parse_label_line("3 0.5 nope 0.1 0.1", ClassSet.FOUR, "7.txt", 2)

    def test_out_of_range_value(self):
        with pytest.raises(LabelParseError, match="outside"):
            parse_label_line("3 1.5 0.5 0.1 0.1", ClassSet.FOUR, "0.txt", 1)


class TestDenormalize:
    def test_centered_box_pixel_dims(self):
        rec = LabelRecord(class_id=3, cx=0.5, cy=0.5, w=0.4, h=0.25)
        box = rec.denormalize(640, 640)
        assert (box.length, box.width) == (256, 160)
        assert (box.x, box.y) == (192, 240)

    def test_clamped_to_frame(self):
        rec = LabelRecord(class_id=3, cx=0.0, cy=0.0, w=0.5, h=0.5)
        box = rec.denormalize(640, 640)
        assert box.x >= 0 and box.y >= 0
        assert box.x + box.length <= 640 and box.y + box.width <= 640

    @given(cx=st.floats(0.1, 0.9), cy=st.floats(0.1, 0.9),
           w=st.floats(0.01, 0.2), h=st.floats(0.01, 0.2))
    def test_roundtrip_within_half_pixel(self, cx, cy, w, h):
        rec = LabelRecord(class_id=3, cx=cx, cy=cy, w=w, h=h)
        box = rec.denormalize(640, 640)
        ncx, ncy, nw, nh = normalize_box(box, 640, 640)
        for orig, back in ((cx, ncx), (cy, ncy), (w, nw), (h, nh)):
            assert abs(orig - back) <= 0.5 / 640 + 1e-9


class TestReplayDetector:
    def test_file_keyed_lookup(self, tmp_path):
        (tmp_path / "0.txt").write_text("3 0.5 0.5 0.4 0.25\n")
        det = replay_load(tmp_path)
        cfg = DetectorConfig()
        assert len(det.detect(frame(0), cfg)) == 1
        assert det.detect(frame(1), cfg) == []

    def test_empty_directory(self, tmp_path):
        det = replay_load(tmp_path)
        assert all(det.detect(frame(i), DetectorConfig()) == [] for i in range(5))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DetectorError):
            replay_load(tmp_path / "nope")

    def test_denormalized_detection(self, tmp_path):
        (tmp_path / "0.txt").write_text("3 0.5 0.5 0.4 0.25\n")
        det = replay_load(tmp_path)
        [d] = det.detect(frame(0), DetectorConfig())
        assert d.cls is AnomalyClass.D40
        assert (d.box.length, d.box.width) == (256, 160)
        assert d.confidence == 1.0

    def test_threshold_excludes_all(self, tmp_path):
        (tmp_path / "0.txt").write_text("3 0.5 0.5 0.4 0.25 0.99\n")
        det = replay_load(tmp_path)
        assert det.detect(frame(0), DetectorConfig(confidence_threshold=1.0)) == []

    def test_confidence_filter_monotone(self, tmp_path):
        (tmp_path / "0.txt").write_text(
            "0 0.2 0.2 0.1 0.1 0.3\n1 0.5 0.5 0.1 0.1 0.6\n3 0.8 0.8 0.1 0.1 0.9\n")
        det = replay_load(tmp_path)
        for t1, t2 in [(0.0, 0.5), (0.3, 0.7), (0.5, 1.0)]:
            low = det.detect(frame(0), DetectorConfig(confidence_threshold=t1))
            high = det.detect(frame(0), DetectorConfig(confidence_threshold=t2))
            assert set(high) <= set(low)

    def test_deterministic_across_runs(self, tmp_path):
        (tmp_path / "0.txt").write_text("3 0.5 0.5 0.4 0.25\n0 0.1 0.1 0.05 0.05\n")
        runs = [replay_load(tmp_path).detect(frame(0), DetectorConfig()) for _ in range(3)]
        assert runs[0] == runs[1] == runs[2]


ECHO_STUB = textwrap.dedent("""
    import json, sys
    for line in sys.stdin:
        req = json.loads(line)
        dets = []
        if req["seq"] == 0:
            dets = [{"class_id": 3, "cx": 0.5, "cy": 0.5, "w": 0.4, "h": 0.25, "conf": 0.9}]
        print(json.dumps({"seq": req["seq"], "detections": dets}), flush=True)
""")

MISMATCH_STUB = textwrap.dedent("""
    import json, sys
    for line in sys.stdin:
        req = json.loads(line)
        print(json.dumps({"seq": req["seq"] + 1, "detections": []}), flush=True)
""")


class TestBridgeDetector:
    def _stub_endpoint(self, tmp_path, code):
        script = tmp_path / "stub.py"
        script.write_text(code)
        return f"exec:{sys.executable} {script}"

    def test_zero_detections(self, tmp_path):
        dets = bridge_detect(frame(5), self._stub_endpoint(tmp_path, ECHO_STUB))
        assert dets == []

    def test_one_box_denormalized(self, tmp_path):
        [d] = bridge_detect(frame(0), self._stub_endpoint(tmp_path, ECHO_STUB))
        assert d.cls is AnomalyClass.D40
        assert (d.box.length, d.box.width) == (256, 160)
        assert d.confidence == 0.9

    def test_seq_mismatch(self, tmp_path):
        with pytest.raises(BridgeProtocolError, match="seq"):
            bridge_detect(frame(0), self._stub_endpoint(tmp_path, MISMATCH_STUB))

    def test_socket_endpoint(self):
        server = socket.socket()
        server.bind(("127.0.0.1", 0))
        server.listen(1)
        port = server.getsockname()[1]

        def serve():
            conn, _ = server.accept()
            f = conn.makefile("rwb")
            req = json.loads(f.readline())
            f.write((json.dumps({"seq": req["seq"], "detections": []}) + "\n").encode())
            f.flush()
            conn.close()

        t = threading.Thread(target=serve, daemon=True)
        t.start()
        bridge = BridgeDetector(endpoint=f"127.0.0.1:{port}")
        try:
            assert bridge.detect(frame(2), DetectorConfig()) == []
        finally:
            bridge.close()
            server.close()

    def test_unreachable_socket(self):
        bridge = BridgeDetector(endpoint="127.0.0.1:1", timeout_s=0.5)
        with pytest.raises(DetectorError):
            bridge.detect(frame(0), DetectorConfig())

import math

import pytest
from hypothesis import given, strategies as st

from roadwatch.core import (AnomalyClass, AnomalyCounter, BoundingBox, ClassSet, Detection,
                            MotionState, OrderingError, SizeClass, SizeConfig, SkipPolicy,
                            bbox_area, classify_size, compute_fsi, counter_observe,
                            counter_reset, kmh_to_mps, should_process, skip_policy)


def det(cls, length=10, width=10):
    return Detection(cls=cls, box=BoundingBox(x=0, y=0, length=length, width=width))


class TestAnomalyClass:
    def test_four_set(self):
        assert AnomalyClass.members(ClassSet.FOUR) == (
            AnomalyClass.D00, AnomalyClass.D10, AnomalyClass.D20, AnomalyClass.D40)

    def test_ids_stable_and_unique(self):
        ids = [c.class_id for c in AnomalyClass]
        assert ids == sorted(ids) == list(range(8))
        assert AnomalyClass.from_id(3) is AnomalyClass.D40

    def test_display_names(self):
        assert AnomalyClass.D00.display_name == "Longitudinal crack"
        assert AnomalyClass.D40.display_name == "Pothole"


class TestBboxArea:
    def test_full_frame(self):
        assert bbox_area(BoundingBox(0, 0, 640, 640)) == 409600

    def test_unit(self):
        assert bbox_area(BoundingBox(0, 0, 1, 1)) == 1

    def test_rho_example(self):
        assert bbox_area(BoundingBox(0, 0, 256, 160)) == 40960

    def test_rejects_nonpositive_dims(self):
        with pytest.raises(ValueError):
            BoundingBox(0, 0, 0, 10)
        with pytest.raises(ValueError):
            BoundingBox(0, 0, 10, -1)


class TestClassifySize:
    def test_boundary_is_large(self):
        # 256*160 = 40960 = exactly 10% of 640*640; inclusive comparison
        assert classify_size(BoundingBox(0, 0, 256, 160), 640, 640) is SizeClass.LARGE

    def test_below_threshold_small(self):
        assert classify_size(BoundingBox(0, 0, 200, 200), 640, 640) is SizeClass.SMALL

    def test_full_frame_large(self):
        assert classify_size(BoundingBox(0, 0, 640, 640), 640, 640) is SizeClass.LARGE

    def test_invalid_frame_dims(self):
        with pytest.raises(ValueError):
            classify_size(BoundingBox(0, 0, 10, 10), 0, 640)

    @given(length=st.integers(1, 640), width=st.integers(1, 640))
    def test_matches_direct_inequality(self, length, width):
        box = BoundingBox(0, 0, length, width)
        expected = SizeClass.LARGE if length * width >= 40960 else SizeClass.SMALL
        assert classify_size(box, 640, 640) is expected


class TestFsi:
    def test_stationary(self):
        assert compute_fsi(MotionState(0.0, 30.0)) == 0.0

    def test_half_meter(self):
        assert compute_fsi(MotionState(15.0, 30.0)) == 0.5

    def test_20_kmh(self):
        assert compute_fsi(MotionState(kmh_to_mps(20.0), 30.0)) == pytest.approx(0.18519, abs=1e-4)

    def test_fps_must_be_positive(self):
        with pytest.raises(ValueError):
            MotionState(10.0, 0.0)

    @given(s1=st.floats(0.01, 100), s2=st.floats(0.01, 100), fps=st.floats(1, 120))
    def test_strictly_increasing_in_speed(self, s1, s2, fps):
        if s1 < s2:
            assert compute_fsi(MotionState(s1, fps)) < compute_fsi(MotionState(s2, fps))

    @given(speed=st.floats(0.01, 100), f1=st.floats(1, 120), f2=st.floats(1, 120))
    def test_strictly_decreasing_in_fps(self, speed, f1, f2):
        if f1 < f2:
            assert compute_fsi(MotionState(speed, f1)) > compute_fsi(MotionState(speed, f2))


class TestSkipPolicy:
    def test_boundary_inclusive(self):
        assert skip_policy(0.5).skip == 5

    def test_slow_vehicle(self):
        assert skip_policy(0.18519).skip == 30

    def test_fast_vehicle(self):
        assert skip_policy(10.0).skip == 5

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            skip_policy(-0.1)

    @given(fsi=st.floats(0, 10))
    def test_step_function(self, fsi):
        assert skip_policy(fsi).skip == (5 if fsi >= 0.5 else 30)
        assert skip_policy(fsi).stride == skip_policy(fsi).skip + 1


class TestKmhToMps:
    @pytest.mark.parametrize("kmh,mps", [(0, 0), (36, 10)])
    def test_exact(self, kmh, mps):
        assert kmh_to_mps(kmh) == mps

    def test_20(self):
        assert kmh_to_mps(20) == pytest.approx(5.5556, abs=1e-4)


class TestShouldProcess:
    def test_first_frame_always(self):
        for skip in (5, 30):
            assert should_process(0, SkipPolicy(fsi=1.0, skip=skip))

    def test_stride_six(self):
        policy = SkipPolicy(fsi=1.0, skip=5)
        assert should_process(6, policy)
        assert not should_process(3, policy)

    @given(n=st.integers(1, 500), skip=st.integers(0, 40))
    def test_processed_count_is_ceiling(self, n, skip):
        policy = SkipPolicy(fsi=1.0, skip=skip)
        processed = sum(should_process(i, policy) for i in range(n))
        assert processed == math.ceil(n / policy.stride)


class TestCounter:
    def test_single_observation(self):
        c = AnomalyCounter()
        counter_observe(c, 0, [det(AnomalyClass.D40)], SkipPolicy(fsi=1.0, skip=5))
        assert c.counts == {AnomalyClass.D40: 1}
        assert c.total == 1

    def test_skipped_frame_unchanged(self):
        c = AnomalyCounter()
        counter_observe(c, 0, [det(AnomalyClass.D40)], SkipPolicy(fsi=1.0, skip=5))
        counter_observe(c, 3, [det(AnomalyClass.D40)], SkipPolicy(fsi=1.0, skip=5))
        assert c.counts == {AnomalyClass.D40: 1}

    def test_per_detection_increments(self):
        c = AnomalyCounter()
        dets = [det(AnomalyClass.D00), det(AnomalyClass.D00), det(AnomalyClass.D40)]
        counter_observe(c, 0, dets, SkipPolicy(fsi=1.0, skip=5))
        assert c.counts == {AnomalyClass.D00: 2, AnomalyClass.D40: 1}

    def test_out_of_order_rejected(self):
        c = AnomalyCounter()
        counter_observe(c, 5, [], SkipPolicy(fsi=1.0, skip=5))
        with pytest.raises(OrderingError):
            counter_observe(c, 5, [], SkipPolicy(fsi=1.0, skip=5))

    def test_reset(self):
        c = AnomalyCounter()
        counter_observe(c, 0, [det(AnomalyClass.D40)] * 7, SkipPolicy(fsi=1.0, skip=5))
        counter_reset(c)
        assert c.total == 0 and c.last_seq is None
        counter_reset(c)  # idempotent
        assert c.total == 0

    @given(
        skip=st.sampled_from([5, 30]),
        frames=st.lists(st.lists(st.sampled_from(list(AnomalyClass)), max_size=4), max_size=60),
    )
    def test_brute_force_recount(self, skip, frames):
        policy = SkipPolicy(fsi=1.0, skip=skip)
        c = AnomalyCounter()
        log = []
        for seq, classes in enumerate(frames):
            dets = [det(cls) for cls in classes]
            counter_observe(c, seq, dets, policy)
            log.append((seq, classes))
        # independent recount straight off the observation log
        expected = sum(len(classes) for seq, classes in log if seq % (skip + 1) == 0)
        assert c.total == expected
        assert c.total == sum(c.counts.values())

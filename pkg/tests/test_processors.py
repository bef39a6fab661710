import math

import numpy as np
import pytest

from arbor import tree as T
from arbor.errors import AlignmentError, DecompositionError, NotReadyError
from arbor.factors import MOTION, RANGE_BEARING, RELATIVE_POSE
from arbor.manifold import ANGLE, Pose2, StateBlock
from arbor.processors import (
    FeatureInfo,
    KeyframeEvent,
    KeyframePolicy,
    LandmarkInfo,
    LandmarkTracker,
    LoopCloser,
    LoopPolicy,
    MotionProcessor,
    Pipeline,
    SensorInfo,
)

C_NOM = np.array([0.1, 0.1, 0.5])


def build_tree():
    tr = T.ProblemTree()
    odom = tr.emplace(T.SENSOR, tr.hardware_id,
                      payload=SensorInfo("odom0", "diff_drive", {"tick_std": 0.001}),
                      state_blocks={
                          "ext_p": StateBlock(np.zeros(2), fixed=True),
                          "ext_o": StateBlock(np.zeros(1), ANGLE, fixed=True),
                          "intrinsic": StateBlock(C_NOM.copy()),
                      })
    rb = tr.emplace(T.SENSOR, tr.hardware_id,
                    payload=SensorInfo("rb0", "range_bearing_2d",
                                       {"range_std": 0.02, "bearing_std": 0.01}),
                    state_blocks={
                        "ext_p": StateBlock(np.zeros(2), fixed=True),
                        "ext_o": StateBlock(np.zeros(1), ANGLE, fixed=True),
                    })
    first = tr.emplace(T.FRAME, tr.trajectory_id, timestamp=0.0, state_blocks={
        "p": StateBlock(np.zeros(2)),
        "o": StateBlock(np.zeros(1), ANGLE),
    })
    return tr, odom, rb, first


def make_motion(tr, odom, first, **policy):
    proc = MotionProcessor("odom", odom, "odom0",
                           KeyframePolicy(**policy), time_tolerance=0.01,
                           tick_std=0.001)
    proc.initialize(tr, first)
    return proc


def straight_step(r=0.1):
    # both wheels advance 0.1 m / r rad -> 0.1 m arc
    return np.array([0.1 / r, 0.1 / r])


class TestMotionProcessor:
    def test_distance_policy_exact_crossing(self):
        tr, odom, _, first = build_tree()
        proc = make_motion(tr, odom, first, max_dist=1.0)
        events = []
        for k in range(1, 15):
            ev = proc.process_capture(tr, 0.1 * k, straight_step())
            if ev:
                events.append((k, ev))
        # 10 steps reach exactly 1.0 (not an exceedance); the 11th crosses
        assert events[0][0] == 11

    def test_time_policy_zero_motion(self):
        # the vote fires at the first sample with t - origin_t > 5; a fully
        # motionless interval has a singular covariance, which surfaces as a
        # decomposition error at keyframe time rather than silent jitter
        tr, odom, _, first = build_tree()
        proc = make_motion(tr, odom, first, max_time=5.0)
        for k in range(1, 6):
            assert proc.process_capture(tr, 1.0 * k, np.zeros(2)) is None
        with pytest.raises(DecompositionError):
            proc.process_capture(tr, 6.0, np.zeros(2))
        # atomic failure: the vote left no partial keyframe behind
        assert len(tr.frames()) == 1

    def test_time_policy_with_motion(self):
        tr, odom, _, first = build_tree()
        proc = make_motion(tr, odom, first, max_time=5.0)
        events = []
        for k in range(1, 10):
            ev = proc.process_capture(tr, 1.0 * k,
                                      straight_step() * (0.1 + 0.02 * (k % 3)))
            if ev:
                events.append(k)
        assert events[0] == 6  # first sample with t - origin_t > 5

    def test_angle_policy(self):
        tr, odom, _, first = build_tree()
        proc = make_motion(tr, odom, first, max_angle=0.31)
        events = []
        # arcs: each step turns by (r*dphi_r - r*dphi_l)/d = 0.02 rad
        for k in range(1, 30):
            ev = proc.process_capture(tr, 0.1 * k, np.array([0.95, 1.05]))
            if ev:
                events.append(k)
        assert events[0] == 16  # 15 steps stay at 0.30 < 0.31; the 16th crosses

    def test_removed_origin_is_reported(self):
        tr, odom, _, first = build_tree()
        proc = make_motion(tr, odom, first, max_dist=10.0)
        proc.process_capture(tr, 0.1, straight_step())
        tr.remove(first)
        with pytest.raises(NotReadyError):
            proc.high_rate_pose(tr, 0.1)

    def test_buffer_reset_after_keyframe(self):
        tr, odom, _, first = build_tree()
        proc = make_motion(tr, odom, first, max_dist=0.45)
        for k in range(1, 6):
            proc.process_capture(tr, 0.1 * k, straight_step())
        assert len(proc.buffer.entries) == 0
        np.testing.assert_allclose(proc.buffer.delta_bar.as_array(), [0, 0, 0])

    def test_keyframe_carries_motion_factor(self):
        tr, odom, _, first = build_tree()
        proc = make_motion(tr, odom, first, max_dist=0.45)
        event = None
        for k in range(1, 6):
            event = proc.process_capture(tr, 0.1 * k, straight_step()) or event
        assert event is not None
        factors = tr.factors_referencing(event.frame)
        kinds = [tr.node(f).payload.kind for f in factors]
        assert kinds == [MOTION]
        assert set(tr.node(event.frame).state_blocks) == {"p", "o"}
        # frame seeded by dead reckoning: 0.5 m straight
        np.testing.assert_allclose(tr.frame_pose(event.frame).as_array(),
                                   [0.5, 0.0, 0.0], atol=1e-12)

    def test_join_within_tolerance(self):
        tr, odom, _, first = build_tree()
        proc = make_motion(tr, odom, first, max_dist=10.0)
        for k in range(1, 6):
            proc.process_capture(tr, 0.1 * k, straight_step())
        foreign = tr.emplace(T.FRAME, tr.trajectory_id, timestamp=0.305,
                             state_blocks={"p": StateBlock(np.zeros(2)),
                                           "o": StateBlock(np.zeros(1), ANGLE)})
        result = proc.on_keyframe_broadcast(tr, KeyframeEvent(0.305, foreign, "other"))
        assert result.joined
        assert proc.buffer.origin_frame == foreign
        assert len(proc.buffer.entries) == 2  # samples at 0.4, 0.5 re-integrated
        kinds = [tr.node(f).payload.kind for f in tr.factors_referencing(foreign)]
        assert MOTION in kinds

    def test_join_declined_out_of_tolerance(self):
        tr, odom, _, first = build_tree()
        proc = make_motion(tr, odom, first, max_dist=10.0)
        for k in range(1, 6):
            proc.process_capture(tr, 0.1 * k, straight_step())
        foreign = tr.emplace(T.FRAME, tr.trajectory_id, timestamp=0.35,
                             state_blocks={"p": StateBlock(np.zeros(2)),
                                           "o": StateBlock(np.zeros(1), ANGLE)})
        before = tr.print_tree()
        result = proc.on_keyframe_broadcast(tr, KeyframeEvent(0.35, foreign, "other"))
        assert not result.joined
        assert result.gap == pytest.approx(0.05)
        assert tr.print_tree() == before  # decline never mutates

    def test_join_adds_missing_blocks(self):
        tr, odom, _, first = build_tree()
        proc = make_motion(tr, odom, first, max_dist=10.0)
        for k in range(1, 4):
            proc.process_capture(tr, 0.1 * k, straight_step())
        bare = tr.emplace(T.FRAME, tr.trajectory_id, timestamp=0.2)
        result = proc.on_keyframe_broadcast(tr, KeyframeEvent(0.2, bare, "other"))
        assert result.joined
        assert set(tr.node(bare).state_blocks) == {"p", "o"}

    def test_vote_joins_coincident_frame_instead_of_twin(self):
        tr, odom, _, first = build_tree()
        proc = make_motion(tr, odom, first, max_dist=0.45)
        foreign = None
        event = None
        for k in range(1, 6):
            t = 0.1 * k
            if k == 5:
                # another processor created a frame at the vote's timestamp
                foreign = tr.emplace(T.FRAME, tr.trajectory_id, timestamp=t,
                                     state_blocks={"p": StateBlock(np.zeros(2)),
                                                   "o": StateBlock(np.zeros(1), ANGLE)})
            event = proc.process_capture(tr, t, straight_step()) or event
        assert event is None  # joined, never twinned
        assert len(tr.frames()) == 2
        kinds = [tr.node(f).payload.kind for f in tr.factors_referencing(foreign)]
        assert kinds == [MOTION]
        assert proc.buffer.origin_frame == foreign

    def test_uninitialized_rejected(self):
        tr, odom, _, _ = build_tree()
        proc = MotionProcessor("odom", odom, "odom0", KeyframePolicy(max_dist=1.0),
                               0.01, 0.001)
        with pytest.raises(NotReadyError):
            proc.process_capture(tr, 0.1, straight_step())


def make_tracker(tr, rb, pose=Pose2.identity(), **kw):
    kw.setdefault("policy", KeyframePolicy(min_tracks=3))
    tracker = LandmarkTracker("tracker", rb, "rb0", kw.pop("policy"),
                              time_tolerance=0.01, range_std=0.02,
                              bearing_std=0.01,
                              pose_provider=lambda tree, t: pose, **kw)
    return tracker


class TestLandmarkTracker:
    def test_empty_map_creates_landmarks(self):
        tr, _, rb, first = build_tree()
        tracker = make_tracker(tr, rb)
        scan = [[0, 1.0, 0.0], [1, 2.0, 1.0], [2, 1.5, -0.5]]
        tracker.process_capture(tr, 0.0, scan)  # votes; joins the t=0 frame
        landmarks = tr.children(tr.map_id, T.LANDMARK)
        assert len(landmarks) == 3
        factors = [f for lm in landmarks for f in tr.factors_referencing(lm)]
        assert len(factors) == 3
        assert all(tr.node(f).payload.kind == RANGE_BEARING for f in factors)

    def test_gate_association_exact_inversion(self):
        tr, _, rb, first = build_tree()
        lm = tr.emplace(T.LANDMARK, tr.map_id, payload=LandmarkInfo(7),
                        state_blocks={"p": StateBlock(np.array([1.0, 0.0]))})
        tracker = make_tracker(tr, rb, policy=KeyframePolicy(min_tracks=1))
        out = tracker._associate(tr, Pose2.identity(), [[1.0, 0.0]])
        raw_id, z, matched, world = out[0]
        assert matched == lm
        np.testing.assert_allclose(world, [1.0, 0.0], atol=1e-12)

    def test_gate_tie_breaks_to_lowest_index(self):
        tr, _, rb, first = build_tree()
        lm_a = tr.emplace(T.LANDMARK, tr.map_id,
                          state_blocks={"p": StateBlock(np.array([1.0, 0.1]))})
        lm_b = tr.emplace(T.LANDMARK, tr.map_id,
                          state_blocks={"p": StateBlock(np.array([1.0, -0.1]))})
        tracker = make_tracker(tr, rb)
        out = tracker._associate(tr, Pose2.identity(), [[1.0, 0.0]])
        assert out[0][2] == lm_a

    def test_vote_below_min_tracks(self):
        tr, _, rb, first = build_tree()
        # 4 known landmarks straight ahead, min_tracks=5 -> vote
        for k in range(4):
            tr.emplace(T.LANDMARK, tr.map_id, payload=LandmarkInfo(k),
                       state_blocks={"p": StateBlock(np.array([1.0 + k, 0.0]))})
        tracker = make_tracker(tr, rb, policy=KeyframePolicy(min_tracks=5))
        scan = [[k, 1.0 + k, 0.0] for k in range(4)]
        tracker.association = "id"
        for k in range(4):
            tracker._by_raw_id[k] = tr.children(tr.map_id, T.LANDMARK)[k]
        event = tracker.process_capture(tr, 0.5, scan)
        assert event is not None or tr.find_frame_near(0.5, 0.01) is not None

    def test_no_vote_when_tracks_sufficient(self):
        tr, _, rb, first = build_tree()
        lms = []
        for k in range(3):
            lms.append(tr.emplace(T.LANDMARK, tr.map_id, payload=LandmarkInfo(k),
                                  state_blocks={"p": StateBlock(np.array([1.0 + k, 0.0]))}))
        tracker = make_tracker(tr, rb, policy=KeyframePolicy(min_tracks=3),
                               association="id")
        for k, lm in enumerate(lms):
            tracker._by_raw_id[k] = lm
        event = tracker.process_capture(tr, 0.5, [[k, 1.0 + k, 0.0] for k in range(3)])
        assert event is None
        assert tracker._pending is not None  # buffered until a keyframe

    def test_unseen_window_spawns_fresh_landmark(self):
        tr, _, rb, first = build_tree()
        tracker = make_tracker(tr, rb, policy=KeyframePolicy(min_tracks=5),
                               association="id", max_unseen_frames=2)
        tracker._kf_count = 10
        stale = tr.emplace(T.LANDMARK, tr.map_id, payload=LandmarkInfo(3),
                           state_blocks={"p": StateBlock(np.array([1.0, 0.0]))})
        tracker._by_raw_id[3] = stale
        tracker._last_seen[stale] = 1  # last seen 9 keyframes ago
        out = tracker._associate(tr, Pose2.identity(), [[3, 1.0, 0.0]])
        assert out[0][2] is None


class TestLoopCloser:
    def _frame_with_observations(self, tr, rb, t, pose, obs):
        frame = tr.emplace(T.FRAME, tr.trajectory_id, timestamp=t, state_blocks={
            "p": StateBlock(pose.p), "o": StateBlock(np.array([pose.theta]), ANGLE)})
        cap = tr.emplace(T.CAPTURE, frame, timestamp=t,
                         cross_refs=[(T.CAPTURE_SENSOR, rb)])
        for raw_id, rng, brg in obs:
            tr.emplace(T.FEATURE, cap,
                       payload=FeatureInfo(np.array([rng, brg]), raw_id))
        return frame

    def test_identity_loop(self):
        tr, _, rb, first = build_tree()
        obs = [(0, 1.0, 0.2), (1, 2.0, -0.4), (2, 1.5, 1.0)]
        pose = Pose2(np.zeros(2), 0.0)
        closer = LoopCloser("loop", rb, "rb0", LoopPolicy(1.0, 2, 2))
        frames = [self._frame_with_observations(tr, rb, float(k), pose, obs if k in (0, 4) else [])
                  for k in range(5)]
        factor = closer.detect_and_close(tr, frames[4])
        assert factor is not None
        payload = tr.node(factor).payload
        assert payload.kind == RELATIVE_POSE
        np.testing.assert_allclose(payload.z, [0.0, 0.0, 0.0], atol=1e-9)

    def test_quarter_turn_recovered(self):
        tr, _, rb, first = build_tree()
        closer = LoopCloser("loop", rb, "rb0", LoopPolicy(1.0, 2, 2))
        # same world points seen from poses rotated by pi/2 about the sensor
        points = [np.array([1.0, 0.3]), np.array([0.4, -1.2]), np.array([-0.8, 0.9])]

        def scan_from(theta):
            out = []
            for i, w in enumerate(points):
                c, s = math.cos(theta), math.sin(theta)
                local = np.array([c * w[0] + s * w[1], -s * w[0] + c * w[1]])
                out.append((i, float(np.linalg.norm(local)),
                            math.atan2(local[1], local[0])))
            return out

        f_a = self._frame_with_observations(tr, rb, 0.0, Pose2(np.zeros(2), 0.0),
                                            scan_from(0.0))
        for k in range(1, 4):
            self._frame_with_observations(tr, rb, float(k), Pose2(np.zeros(2), 0.0), [])
        f_b = self._frame_with_observations(tr, rb, 4.0,
                                            Pose2(np.zeros(2), math.pi / 2),
                                            scan_from(math.pi / 2))
        factor = closer.detect_and_close(tr, f_b)
        assert factor is not None
        np.testing.assert_allclose(tr.node(factor).payload.z, [0.0, 0.0, math.pi / 2],
                                   atol=1e-9)

    def test_gap_too_small(self):
        tr, _, rb, first = build_tree()
        obs = [(0, 1.0, 0.2), (1, 2.0, -0.4)]
        closer = LoopCloser("loop", rb, "rb0", LoopPolicy(1.0, 5, 2))
        pose = Pose2(np.zeros(2), 0.0)
        f_a = self._frame_with_observations(tr, rb, 0.0, pose, obs)
        f_b = self._frame_with_observations(tr, rb, 1.0, pose, obs)
        assert closer.detect_and_close(tr, f_b) is None

    def test_random_rigid_transform_recovered(self):
        rng = np.random.default_rng(60)
        for _ in range(100):
            theta = rng.uniform(-np.pi, np.pi)
            t = rng.uniform(-2, 2, 2)
            b_pts = [rng.uniform(-3, 3, 2) for _ in range(5)]
            c, s = math.cos(theta), math.sin(theta)
            a_pts = [np.array([c * p[0] - s * p[1] + t[0],
                               s * p[0] + c * p[1] + t[1]]) for p in b_pts]
            got_theta, got_t = LoopCloser.align(a_pts, b_pts)
            assert abs(math.remainder(got_theta - theta, math.tau)) < 1e-9
            np.testing.assert_allclose(got_t, t, atol=1e-9)

    def test_degenerate_alignment(self):
        with pytest.raises(AlignmentError):
            LoopCloser.align([np.zeros(2)], [np.zeros(2)])
        same = [np.array([1.0, 1.0])] * 3
        with pytest.raises(AlignmentError):
            LoopCloser.align(same, same)


class TestPipeline:
    def test_motion_keyframe_joined_by_tracker(self):
        tr, odom, rb, first = build_tree()
        motion = make_motion(tr, odom, first, max_dist=0.45)
        tracker = LandmarkTracker("tracker", rb, "rb0", KeyframePolicy(min_tracks=1),
                                  time_tolerance=0.01, range_std=0.02, bearing_std=0.01)
        pipe = Pipeline(tr, [motion, tracker])
        pipe.initialize(first)
        # seed the map so the tracker does not vote on its own
        pipe.dispatch("rb0", 0.0, [[0, 1.0, 0.0], [1, 2.0, 0.5]])
        events = []
        for k in range(1, 7):
            pipe.dispatch("rb0", 0.1 * k - 0.001, [[0, 1.0, 0.0], [1, 2.0, 0.5]])
            events += pipe.dispatch("odom0", 0.1 * k, straight_step())
        assert len(events) == 1
        kf = events[0].frame
        kinds = sorted(tr.node(f).payload.kind for f in tr.factors_referencing(kf))
        assert MOTION in kinds and RANGE_BEARING in kinds
        # the joined frame still has exactly the pose blocks
        assert set(tr.node(kf).state_blocks) == {"p", "o"}
        assert tr.check_consistency() == []

    def test_pose_provider_uses_high_rate(self):
        tr, odom, rb, first = build_tree()
        motion = make_motion(tr, odom, first, max_dist=100.0)
        tracker = LandmarkTracker("tracker", rb, "rb0", KeyframePolicy(min_tracks=1),
                                  time_tolerance=0.01, range_std=0.02, bearing_std=0.01)
        pipe = Pipeline(tr, [motion, tracker])
        pipe.initialize(first)
        for k in range(1, 6):
            pipe.dispatch("odom0", 0.1 * k, straight_step())
        pose = pipe.pose_at(tr, 0.5)
        np.testing.assert_allclose(pose.as_array(), [0.5, 0.0, 0.0], atol=1e-12)

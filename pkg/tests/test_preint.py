import math

import numpy as np
import pytest

from arbor.errors import CalibrationError, JoinToleranceError, OrderingError
from arbor.manifold import Delta2, Pose2, delta_compose, delta_minus
from arbor.preint import (
    DiffDriveModel,
    PreintBuffer,
    RawMotion,
    correct_delta,
    integrate_step,
    split_buffer,
    state_at_high_rate,
)

from fdcheck import central_diff, wrap_angle

MODEL = DiffDriveModel()
C_NOM = np.array([0.1, 0.1, 0.5])


def make_buffer(c_bar=C_NOM, origin_t=0.0):
    return PreintBuffer(origin_frame=None, origin_t=origin_t, c_bar=c_bar, model=MODEL)


def random_samples(rng, n, dt=0.1, tick_std=0.0, t0=0.0):
    """Wheel increment stream with mixed straight and turning motion."""
    samples = []
    for k in range(n):
        base = rng.uniform(0.02, 0.12)
        turn = rng.uniform(-0.04, 0.04)
        u = np.array([base - turn, base + turn])
        q = np.eye(2) * tick_std**2
        samples.append(RawMotion(t0 + (k + 1) * dt, u, q))
    return samples


class TestPrecalibrate:
    def test_hand_values(self):
        v, _, _ = MODEL.precalibrate(np.array([1.0, 1.0]), C_NOM)
        # ((0.1*1 + 0.1*1)/2, (0.1*1 - 0.1*1)/0.5) = (0.1, 0)
        np.testing.assert_allclose(v, [0.1, 0.0])

    def test_zero_motion(self):
        v, _, _ = MODEL.precalibrate(np.zeros(2), np.array([0.3, 0.2, 1.0]))
        np.testing.assert_allclose(v, [0.0, 0.0])

    def test_invalid_calibration(self):
        with pytest.raises(CalibrationError):
            MODEL.precalibrate(np.zeros(2), np.array([0.1, 0.1, 0.0]))
        with pytest.raises(CalibrationError):
            MODEL.precalibrate(np.zeros(2), np.array([-0.1, 0.1, 0.5]))

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            u = rng.uniform(-0.5, 0.5, 2)
            c = rng.uniform(0.05, 0.8, 3)
            _, j_u, j_c = MODEL.precalibrate(u, c)
            fd_u = central_diff(lambda uu: MODEL.precalibrate(uu, c)[0], u)
            fd_c = central_diff(lambda cc: MODEL.precalibrate(u, cc)[0], c)
            assert np.max(np.abs(j_u - fd_u)) < 1e-5
            assert np.max(np.abs(j_c - fd_c)) < 1e-5


class TestComputeDelta:
    def test_straight(self):
        d, _ = MODEL.compute_delta(np.array([0.1, 0.0]))
        np.testing.assert_allclose(d.as_array(), [0.1, 0.0, 0.0])

    def test_turn_in_place(self):
        d, _ = MODEL.compute_delta(np.array([0.0, math.pi / 2]))
        np.testing.assert_allclose(d.as_array(), [0.0, 0.0, math.pi / 2])

    def test_chord_hand_value(self):
        # (cos(pi/2), sin(pi/2), pi) = (0, 1, pi)
        d, _ = MODEL.compute_delta(np.array([1.0, math.pi]))
        np.testing.assert_allclose(d.as_array(), [0.0, 1.0, math.pi], atol=1e-15)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            v = np.array([rng.uniform(-1, 1), rng.uniform(-2, 2)])
            _, j = MODEL.compute_delta(v)
            fd = central_diff(lambda vv: MODEL.compute_delta(vv)[0].as_array(), v)
            assert np.max(np.abs(j - fd)) < 1e-5


class TestIntegrateStep:
    def test_first_step_from_zero_initial(self):
        buf = make_buffer()
        entry = integrate_step(buf, RawMotion(0.1, np.array([1.0, 1.0]), np.zeros((2, 2))))
        np.testing.assert_allclose(entry.delta_bar.as_array(), [0.1, 0.0, 0.0])
        np.testing.assert_allclose(entry.q_delta, np.zeros((3, 3)))
        # prior J is zero, so the first step is the bare chain
        v, _, j_v_c = MODEL.precalibrate(np.array([1.0, 1.0]), C_NOM)
        _, j_delta_v = MODEL.compute_delta(v)
        _, _, j_dd = delta_compose(Delta2.identity(), MODEL.compute_delta(v)[0])
        np.testing.assert_allclose(entry.j_delta_c, j_dd @ j_delta_v @ j_v_c, atol=1e-12)

    def test_two_straight_steps_compose(self):
        buf = make_buffer()
        u = np.array([1.0, 1.0])
        integrate_step(buf, RawMotion(0.1, u, np.zeros((2, 2))))
        integrate_step(buf, RawMotion(0.2, u, np.zeros((2, 2))))
        np.testing.assert_allclose(buf.delta_bar.as_array(), [0.2, 0.0, 0.0], atol=1e-15)

    def test_nonmonotonic_rejected(self):
        buf = make_buffer()
        integrate_step(buf, RawMotion(0.1, np.zeros(2), np.zeros((2, 2))))
        with pytest.raises(OrderingError):
            integrate_step(buf, RawMotion(0.1, np.zeros(2), np.zeros((2, 2))))
        with pytest.raises(OrderingError):
            integrate_step(buf, RawMotion(0.05, np.zeros(2), np.zeros((2, 2))))

    def test_covariance_zero_when_noise_free(self):
        rng = np.random.default_rng(5)
        buf = make_buffer()
        for s in random_samples(rng, 30):
            integrate_step(buf, s)
        np.testing.assert_allclose(buf.q_delta, np.zeros((3, 3)))

    def test_covariance_symmetric_psd(self):
        rng = np.random.default_rng(6)
        buf = make_buffer()
        for s in random_samples(rng, 50, tick_std=0.01):
            integrate_step(buf, s)
            q = buf.q_delta
            np.testing.assert_allclose(q, q.T, atol=1e-15)
            assert np.min(np.linalg.eigvalsh(q)) > -1e-15

    def test_covariance_against_monte_carlo(self):
        # independent oracle: vectorized noisy re-integration written from
        # the kinematics, compared against the propagated covariance
        rng = np.random.default_rng(7)
        tick_std = 0.01
        samples = random_samples(rng, 50, tick_std=tick_std)
        buf = make_buffer()
        for s in samples:
            integrate_step(buf, s)

        n_mc = 4000
        r_l, r_r, d = C_NOM
        x = np.zeros(n_mc)
        y = np.zeros(n_mc)
        th = np.zeros(n_mc)
        mc_rng = np.random.default_rng(8)
        for s in samples:
            noisy = s.u[None, :] + mc_rng.normal(0.0, tick_std, size=(n_mc, 2))
            arc = 0.5 * (r_l * noisy[:, 0] + r_r * noisy[:, 1])
            turn = (r_r * noisy[:, 1] - r_l * noisy[:, 0]) / d
            cx = arc * np.cos(0.5 * turn)
            cy = arc * np.sin(0.5 * turn)
            x = x + cx * np.cos(th) - cy * np.sin(th)
            y = y + cx * np.sin(th) + cy * np.cos(th)
            th = th + turn
        nominal = buf.delta_bar.as_array()
        devs = np.stack([x - nominal[0], y - nominal[1], wrap_angle(th - nominal[2])], axis=1)
        sample_cov = np.cov(devs.T)
        rel = np.linalg.norm(sample_cov - buf.q_delta) / np.linalg.norm(buf.q_delta)
        assert rel < 0.15

    def test_one_step_jacobian_chain_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            pre = random_samples(rng, 5)
            u_probe = rng.uniform(-0.3, 0.3, 2)

            def one_step(u_vec):
                buf = make_buffer()
                for s in pre:
                    integrate_step(buf, RawMotion(s.t, s.u, s.q_u))
                entry = integrate_step(buf, RawMotion(1.0, u_vec, np.zeros((2, 2))))
                return entry.delta_bar.as_array()

            buf = make_buffer()
            for s in pre:
                integrate_step(buf, RawMotion(s.t, s.u, s.q_u))
            v, j_v_u, _ = MODEL.precalibrate(u_probe, C_NOM)
            delta, j_delta_v = MODEL.compute_delta(v)
            _, _, j_dd = delta_compose(buf.delta_bar, delta)
            chain = j_dd @ j_delta_v @ j_v_u
            fd = central_diff(one_step, u_probe)
            assert np.max(np.abs(chain - fd)) < 1e-5


class ScaledTwistModel:
    """Alternative motion model: raw (ds, dtheta) with a single scale factor.

    Exercises the pipeline's specialization surface: only pre-calibration
    and the delta model are sensor specific.
    """

    calib_dim = 1

    def precalibrate(self, u, c):
        scale = float(c[0])
        v = np.array([scale * u[0], u[1]])
        j_v_u = np.array([[scale, 0.0], [0.0, 1.0]])
        j_v_c = np.array([[u[0]], [0.0]])
        return v, j_v_u, j_v_c

    def compute_delta(self, v):
        s, w = float(v[0]), float(v[1])
        half = 0.5 * w
        delta = Delta2(np.array([s * math.cos(half), s * math.sin(half)]), w)
        j = np.array([[math.cos(half), -0.5 * s * math.sin(half)],
                      [math.sin(half), 0.5 * s * math.cos(half)],
                      [0.0, 1.0]])
        return delta, j


class TestAlternativeModel:
    def test_pipeline_is_model_generic(self):
        rng = np.random.default_rng(77)
        c_scale = np.array([1.25])
        buf = PreintBuffer(None, 0.0, c_scale, ScaledTwistModel())
        twists = [np.array([rng.uniform(0.0, 0.2), rng.uniform(-0.3, 0.3)])
                  for _ in range(20)]
        for k, u in enumerate(twists):
            integrate_step(buf, RawMotion(0.1 * (k + 1), u, 1e-4 * np.eye(2)))
        # reference: compose the per-sample chords by hand
        x = y = th = 0.0
        for u in twists:
            s, w = 1.25 * u[0], u[1]
            cx, cy = s * math.cos(0.5 * w), s * math.sin(0.5 * w)
            x, y = x + cx * math.cos(th) - cy * math.sin(th), \
                y + cx * math.sin(th) + cy * math.cos(th)
            th += w
        np.testing.assert_allclose(buf.delta_bar.as_array(),
                                   [x, y, wrap_angle(th)], atol=1e-12)
        # calibration correction stays first order for the scalar scale too
        eps = 1e-3
        corrected = correct_delta(buf.entries[-1], c_scale + eps, c_scale)
        reint = PreintBuffer(None, 0.0, c_scale + eps, ScaledTwistModel())
        for k, u in enumerate(twists):
            integrate_step(reint, RawMotion(0.1 * (k + 1), u, 1e-4 * np.eye(2)))
        err = np.linalg.norm(delta_minus(corrected, reint.delta_bar))
        assert err < 10.0 * eps**2

    def test_covariance_chain_with_alternative_model(self):
        buf = PreintBuffer(None, 0.0, np.array([2.0]), ScaledTwistModel())
        for k in range(10):
            integrate_step(buf, RawMotion(0.1 * (k + 1), np.array([0.1, 0.05]),
                                          np.diag([1e-4, 4e-4])))
        q = buf.q_delta
        np.testing.assert_allclose(q, q.T, atol=1e-15)
        assert np.min(np.linalg.eigvalsh(q)) > 0.0
        assert buf.j_delta_c.shape == (3, 1)


class TestSegmentComposition:
    def test_split_then_compose_equals_direct(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            n = rng.integers(5, 40)
            samples = random_samples(rng, int(n), tick_std=0.01)
            k = int(rng.integers(0, n + 1))
            full = make_buffer()
            for s in samples:
                integrate_step(full, RawMotion(s.t, s.u, s.q_u))
            head = make_buffer()
            for s in samples[:k]:
                integrate_step(head, RawMotion(s.t, s.u, s.q_u))
            tail = make_buffer(origin_t=samples[k - 1].t if k else 0.0)
            for s in samples[k:]:
                integrate_step(tail, RawMotion(s.t, s.u, s.q_u))
            composed, j_a, j_b = delta_compose(head.delta_bar, tail.delta_bar)
            assert np.max(np.abs(delta_minus(composed, full.delta_bar))) < 1e-12
            # calibration Jacobian transports across the cut by the chain rule
            j_total = j_a @ head.j_delta_c + j_b @ tail.j_delta_c
            np.testing.assert_allclose(j_total, full.j_delta_c, atol=1e-12)


class TestCorrectDelta:
    def _integrated(self, c_bar, rng):
        buf = make_buffer(c_bar=c_bar)
        for s in random_samples(rng, 50):
            integrate_step(buf, s)
        return buf

    def test_identity_correction(self):
        rng = np.random.default_rng(11)
        buf = self._integrated(C_NOM, rng)
        out = correct_delta(buf.entries[-1], C_NOM, C_NOM)
        np.testing.assert_allclose(out.as_array(), buf.delta_bar.as_array())

    def test_zero_jacobian_ignores_calibration(self):
        entry_like = make_buffer()
        integrate_step(entry_like, RawMotion(0.1, np.zeros(2), np.zeros((2, 2))))
        tail = entry_like.entries[-1]
        tail.j_delta_c = np.zeros((3, 3))
        out = correct_delta(tail, C_NOM * 1.5, C_NOM)
        np.testing.assert_allclose(out.as_array(), tail.delta_bar.as_array())

    def test_first_order_accuracy_slope_two(self):
        rng = np.random.default_rng(12)
        samples = random_samples(rng, 50)
        base = make_buffer()
        for s in samples:
            integrate_step(base, s)
        direction = np.array([0.7, -0.5, 0.8])
        direction /= np.linalg.norm(direction)
        epsilons = np.logspace(-4, -2, 7)
        errs = []
        for eps in epsilons:
            c = C_NOM + eps * direction
            corrected = correct_delta(base.entries[-1], c, C_NOM)
            reint = make_buffer(c_bar=c)
            for s in samples:
                integrate_step(reint, s)
            errs.append(np.linalg.norm(delta_minus(corrected, reint.delta_bar)))
        slope = np.polyfit(np.log(epsilons), np.log(errs), 1)[0]
        assert 1.8 <= slope <= 2.2


class TestHighRateState:
    def _straight_buffer(self, n=10):
        buf = make_buffer()
        for k in range(n):
            integrate_step(buf, RawMotion(0.1 * (k + 1), np.array([1.0, 1.0]), np.zeros((2, 2))))
        return buf

    def test_at_origin_time(self):
        buf = self._straight_buffer()
        x0 = Pose2(np.array([2.0, 3.0]), 0.5)
        out = state_at_high_rate(buf, x0, 0.0)
        np.testing.assert_allclose(out.as_array(), x0.as_array())

    def test_straight_line_entries(self):
        buf = self._straight_buffer()
        x0 = Pose2(np.array([0.0, 0.0]), math.pi / 2)
        for k in range(1, 11):
            out = state_at_high_rate(buf, x0, 0.1 * k)
            # each step advances 0.1 m along the +y heading
            np.testing.assert_allclose(out.as_array(), [0.0, 0.1 * k, math.pi / 2], atol=1e-12)

    def test_holds_last_beyond_buffer(self):
        buf = self._straight_buffer()
        out = state_at_high_rate(buf, Pose2.identity(), 99.0)
        np.testing.assert_allclose(out.as_array(), [1.0, 0.0, 0.0], atol=1e-12)

    def test_before_origin_rejected(self):
        buf = self._straight_buffer()
        with pytest.raises(OrderingError):
            state_at_high_rate(buf, Pose2.identity(), -0.01)


class TestSplitBuffer:
    def _buffer(self, n=6, tick_std=0.02):
        rng = np.random.default_rng(13)
        buf = make_buffer()
        for s in random_samples(rng, n, tick_std=tick_std):
            integrate_step(buf, s)
        return buf

    def test_split_at_exact_entry(self):
        buf = self._buffer(6)
        first, second = split_buffer(buf, 0.3, tol=1e-9)
        assert len(first.entries) == 3 and len(second.entries) == 3
        composed, _, _ = delta_compose(first.delta_bar, second.delta_bar)
        assert np.max(np.abs(delta_minus(composed, buf.delta_bar))) < 1e-12
        assert second.origin_t == pytest.approx(0.3)

    def test_degenerate_split_at_origin(self):
        buf = self._buffer(6)
        first, second = split_buffer(buf, 0.004, tol=0.01)
        assert len(first.entries) == 0
        assert len(second.entries) == 6
        assert np.max(np.abs(delta_minus(second.delta_bar, buf.delta_bar))) < 1e-12

    def test_out_of_tolerance(self):
        buf = self._buffer(6)
        with pytest.raises(JoinToleranceError):
            split_buffer(buf, 0.35, tol=0.01)

    def test_tie_goes_earlier(self):
        buf = self._buffer(6)
        first, _ = split_buffer(buf, 0.25, tol=0.06)
        assert len(first.entries) == 2

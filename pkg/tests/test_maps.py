"""Map catalog, schedules, orbits, observables, targets."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import seqdyn as sd

GOLDEN = (1 + math.sqrt(5)) / 2


# a piecewise-C2 catalog entry used across tests: three expanding branches,
# the first genuinely cubic, the last needing a negative noise shift
CUBIC_SPECS = [
    (0.0, (0.0, 2.6, 0.3, 0.4), "auto"),
    (1 / 3, (-0.9, 2.7), "auto"),
    (2 / 3, (-1.7, 2.7), "auto"),
]


def make_cubic(eps=0.0):
    return sd.piecewise_c2(CUBIC_SPECS, eps)


class TestEvalMap:
    def test_linear_noise_plain(self):
        assert sd.eval_map(sd.linear_noise(2, 0.0), 0.3) == pytest.approx(0.6, abs=1e-15)

    def test_beta_wraps(self):
        assert sd.eval_map(sd.beta_map(1.5), 0.8) == pytest.approx(0.2, abs=1e-15)

    def test_linear_noise_shift(self):
        assert sd.eval_map(sd.linear_noise(2, 0.1), 0.3) == pytest.approx(0.7, abs=1e-15)

    def test_domain_check(self):
        with pytest.raises(sd.MapError):
            sd.eval_map(sd.doubling(), 1.0)

    def test_breakpoint_right_continuous(self):
        m = sd.doubling()
        assert sd.eval_map(m, 0.5) == pytest.approx(0.0, abs=1e-15)


class TestBranchInverses:
    def test_doubling(self):
        assert sd.branch_inverses(sd.linear_noise(2, 0.0), 0.5) == [(0.25, 2.0), (0.75, 2.0)]

    def test_golden(self):
        inv = sd.branch_inverses(sd.golden_beta(), 0.5)
        assert len(inv) == 2
        assert inv[0][0] == pytest.approx(0.5 / GOLDEN, abs=1e-14)
        assert inv[1][0] == pytest.approx(1.5 / GOLDEN, abs=1e-14)
        assert inv[0][1] == pytest.approx(GOLDEN, abs=1e-14)

    def test_non_onto_branch_rejected(self):
        # second candidate (0.9 + 1)/1.2 = 1.583... leaves [0,1)
        inv = sd.branch_inverses(sd.beta_map(1.2), 0.9)
        assert len(inv) == 1
        assert inv[0][0] == pytest.approx(0.75, abs=1e-14)
        assert inv[0][1] == pytest.approx(1.2, abs=1e-14)

    @given(st.floats(0.0, 1.0, exclude_max=True),
           st.sampled_from(["doubling", "golden", "b12", "noise", "cubic", "cubic_eps"]))
    @settings(max_examples=300, deadline=None)
    def test_roundtrip(self, y, which):
        m = {
            "doubling": sd.doubling(),
            "golden": sd.golden_beta(),
            "b12": sd.beta_map(1.2),
            "noise": sd.linear_noise(3, 0.37),
            "cubic": make_cubic(),
            "cubic_eps": make_cubic(0.05),
        }[which]
        for x, deriv in sd.branch_inverses(m, y):
            assert abs(sd.eval_map(m, x) - y) <= 1e-12 * m.expansion
            assert deriv >= m.expansion - 1e-12

    @given(st.floats(0.0, 1.0, exclude_max=True), st.integers(2, 5),
           st.floats(-0.9, 0.9))
    @settings(max_examples=200, deadline=None)
    def test_linear_noise_full_branches(self, y, a, eps):
        assert len(sd.branch_inverses(sd.linear_noise(a, eps), y)) == a


class TestSequentialOrbit:
    def test_doubling_orbit(self):
        sys = sd.doubling_system(8)
        assert sd.sequential_orbit(sys, 0.1, 3) == pytest.approx([0.2, 0.4, 0.8], abs=1e-14)

    def test_empty(self):
        assert sd.sequential_orbit(sd.doubling_system(4), 0.1, 0) == []

    def test_matches_manual_composition(self):
        sys = sd.beta_system(2.0, 1.0, 0.6, horizon=4)
        orbit = sd.sequential_orbit(sys, 0.5, 2)
        x1 = sd.eval_map(sys.map_at(1), 0.5)
        x2 = sd.eval_map(sys.map_at(2), x1)
        assert orbit == pytest.approx([x1, x2], abs=1e-14)

    @given(st.floats(0.0, 1.0, exclude_max=True))
    @settings(max_examples=50, deadline=None)
    def test_beta_orbit_stays_in_unit_interval(self, x0):
        sys = sd.beta_system(1.8, 0.5, 0.7, horizon=50)
        for x in sd.sequential_orbit(sys, x0, 50):
            assert 0.0 <= x < 1.0


class TestSchedule:
    def test_first_value(self):
        s = sd.ParameterSchedule(0.0, 0.1, 0.6)
        assert sd.schedule_param(s, 1) == pytest.approx(0.1)

    def test_k8(self):
        s = sd.ParameterSchedule(0.0, 0.1, 0.6)
        assert sd.schedule_param(s, 8) == pytest.approx(0.1 * 8 ** -0.6, rel=1e-12)

    def test_frozen(self):
        s = sd.ParameterSchedule(2.0, mode="frozen")
        assert all(sd.schedule_param(s, k) == 2.0 for k in (1, 5, 1000))

    def test_slow_decay_flagged(self):
        with pytest.warns(UserWarning):
            s = sd.ParameterSchedule(0.0, 0.1, 0.5)
        assert s.outside_hypothesis

    @given(st.floats(0.51, 3.0), st.floats(0.01, 2.0), st.integers(1, 500))
    @settings(max_examples=200, deadline=None)
    def test_monotone_toward_limit(self, theta, c4, k):
        s = sd.ParameterSchedule(1.0, c4, theta)
        assert s.param(k) > s.param(k + 1) > s.limit


class TestPiecewiseC2:
    def test_certified_bounds(self):
        m = make_cubic()
        # first branch derivative 2.6 + 0.6x + 1.2x^2 on [0,1/3]
        assert m.expansion == pytest.approx(2.6, abs=1e-12)
        assert m.distortion == pytest.approx((0.6 + 2.4 / 3) / 2.6, abs=1e-12)

    def test_noise_signs(self):
        m = make_cubic(0.05)
        # first two branches shift up (image sup < 1), third must shift down
        assert m.branches[0].coeffs[0] == pytest.approx(0.05)
        assert m.branches[2].coeffs[0] == pytest.approx(-1.7 - 0.05)
        lo, hi = m.branches[2].image()
        assert lo >= 0.0 and hi <= 1.0

    def test_noise_suppressed_when_trapped(self):
        # a full branch [0,1) -> [0,1) cannot move in either direction
        m = sd.piecewise_c2([(0.0, (0.0, 2.0), "auto"), (0.5, (-1.0, 2.0), "auto")], 0.25)
        assert m.branches[0].coeffs[0] == pytest.approx(0.0)

    def test_requested_sign_fallback(self):
        m = sd.piecewise_c2([(0.0, (0.0, 2.0), "-"), (0.5, (-1.0, 2.0), "-")], 0.25)
        assert all(b.coeffs[0] in (0.0, -1.0) for b in m.branches)

    def test_non_monotone_rejected(self):
        with pytest.raises(sd.MapError):
            sd.piecewise_c2([(0.0, (0.0, 1.0, -3.0, 0.0), "auto"),
                             (0.5, (-1.0, 2.0), "auto")])

    def test_non_expanding_rejected(self):
        with pytest.raises(sd.MapError):
            sd.piecewise_c2([(0.0, (0.0, 0.9), "auto")])


class TestObservable:
    @pytest.mark.parametrize("obs", [
        sd.trig_observable(),
        sd.trig_observable(frequency=3, phase=0.7),
        sd.sawtooth_observable(),
        sd.indicator_observable(0.2, 0.7, centered=True),
        sd.grid_observable(np.sin(np.arange(64)), centered=True),
    ])
    def test_centered_integral_vanishes(self, obs):
        assert abs(np.mean(obs.cell_values(256))) < 1e-12

    def test_cell_values_match_quadrature(self):
        obs = sd.trig_observable(frequency=2)
        N = 32
        cells = obs.cell_values(N)
        for i in (0, 7, 21):
            xs = (i + (np.arange(4000) + 0.5) / 4000) / N
            assert cells[i] == pytest.approx(np.mean(obs.value(xs)), abs=1e-6)

    def test_grid_refinement(self):
        obs = sd.grid_observable([1.0, 2.0, 3.0, 4.0])
        assert np.array_equal(obs.cell_values(8), np.repeat([1, 2, 3, 4], 2))

    def test_descriptor_roundtrip(self):
        for obs in (sd.trig_observable(2, 0.3), sd.indicator_observable(0.1, 0.4),
                    sd.sawtooth_observable(False)):
            back = sd.observable_from_descriptor(obs.descriptor())
            xs = np.linspace(0, 0.999, 57)
            assert np.allclose(back.value(xs), obs.value(xs))


class TestTargets:
    def test_radius_clipped(self):
        t = sd.TargetSequence(0.5, scale=3.0)
        assert t.radius(1) == 1.0
        assert t.radius(100) == pytest.approx(0.3)

    @given(st.floats(0.05, 0.95), st.floats(0.01, 5.0), st.integers(1, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_nested(self, gamma, scale, n):
        t = sd.TargetSequence(gamma, scale)
        l1, r1 = t.interval(n)
        l2, r2 = t.interval(n + 1)
        assert l1 == l2 and r2 <= r1

    def test_outside_hypothesis_warns(self):
        with pytest.warns(UserWarning):
            t = sd.TargetSequence(1.5)
        assert t.outside_hypothesis


class TestDescriptors:
    @pytest.mark.parametrize("m", [sd.doubling(), sd.golden_beta(),
                                   sd.linear_noise(3, -0.2), make_cubic(0.05)])
    def test_map_roundtrip(self, m):
        back = sd.map_from_descriptor(m.descriptor())
        xs = np.linspace(0, 0.999, 211)
        assert np.allclose(back.eval_array(xs), m.eval_array(xs), atol=1e-15)

    def test_system_roundtrip(self):
        sys = sd.beta_system(2.0, 1.0, 0.6, horizon=16)
        back = sd.system_from_descriptor(sys.descriptor())
        assert back.schedule.param(5) == sys.schedule.param(5)
        assert back.horizon == 16

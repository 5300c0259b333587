"""Reverse-martingale decomposition, Q-operators, and CM diagnostics."""

import numpy as np
import pytest

import seqdyn as sd
from seqdyn._streams import OrbitStreams


def doubling_frame(N):
    U = sd.build_ulam(sd.doubling(), N)
    h, _ = sd.invariant_density(U)
    return sd.StationaryFrame(U, h)


def golden_frame(N):
    U = sd.build_ulam(sd.golden_beta(), N)
    h, _ = sd.invariant_density(U)
    return sd.StationaryFrame(U, h)


def beta_schedule_frame(N, horizon):
    system = sd.beta_system(2.0, 1.0, 0.6, horizon=horizon)
    return sd.SequentialFrame(sd.ChainState(system, N))


class TestQApply:
    def test_preserves_constants(self):
        frame = beta_schedule_frame(256, 12)
        one = sd.StepFunction(np.ones(256))
        for k in (1, 5, 11):
            out = sd.q_apply(frame, k, one)
            assert np.allclose(out.values, 1.0, atol=1e-12)

    def test_doubling_kills_cos(self):
        frame = doubling_frame(4096)
        f = sd.StepFunction(sd.trig_observable().cell_values(4096))
        out = sd.q_apply(frame, 1, f)
        assert out.sup() <= 1e-3

    def test_koopman_inverse_identity_refines(self):
        # Q_k(g o T_k) = g for exact operators; grid error decreases in N
        errs = []
        for N in (512, 1024, 2048):
            frame = golden_frame(N)
            g = sd.StepFunction(sd.sawtooth_observable().cell_values(N))
            comp = sd.StepFunction(frame.koopman(1, g.values))
            back = sd.q_apply(frame, 1, comp)
            errs.append(float(np.mean(np.abs(back.values - g.values))))
        assert errs[2] < errs[1] < errs[0]

    def test_denominator_guard(self):
        frame = beta_schedule_frame(128, 6)
        frame.delta_min = 10.0  # force the guard
        with pytest.raises(sd.DenominatorTooSmall):
            sd.q_apply(frame, 2, sd.StepFunction(np.ones(128)))


class TestBuildDecomposition:
    def test_zero_observable(self):
        frame = doubling_frame(256)
        zero = sd.grid_observable(np.zeros(256))
        dec = sd.build_decomposition(frame, zero, "stationary", n_max=10)
        for k in range(1, 11):
            assert not dec.h[k].any()
            assert not dec.psi[k].any()

    def test_stationary_doubling_cos(self):
        frame = doubling_frame(4096)
        dec = sd.build_decomposition(frame, sd.trig_observable(), "stationary", n_max=12)
        assert max(np.abs(dec.h[k]).max() for k in range(1, 13)) <= 1e-3
        phi = dec.phi_tilde[3]
        assert np.abs(dec.psi[3] - phi).max() <= 1e-3

    def test_sequential_two_resolution_h_bound(self):
        sup = {}
        for N in (512, 1024):
            frame = beta_schedule_frame(N, 61)
            dec = sd.build_decomposition(frame, sd.sawtooth_observable(),
                                         "sequential", n_max=60)
            sup[N] = dec.sup_h_bv
        assert abs(sup[1024] - sup[512]) <= 0.1 * max(sup.values())

    def test_mode_frame_mismatch(self):
        frame = doubling_frame(128)
        with pytest.raises(ValueError):
            sd.build_decomposition(frame, sd.trig_observable(), "sequential", n_max=4)

    def test_varying_observables_match_identical_when_equal(self):
        frame = doubling_frame(512)
        obs = sd.trig_observable()
        d1 = sd.build_decomposition(frame, obs, "stationary", n_max=8)
        d2 = sd.build_decomposition(frame, [sd.trig_observable() for _ in range(8)],
                                    "stationary", n_max=8)
        for k in range(1, 9):
            assert np.allclose(d1.psi[k], d2.psi[k], atol=1e-12)

    def test_decomposition_container_roundtrip(self, tmp_path):
        frame = doubling_frame(256)
        dec = sd.build_decomposition(frame, sd.trig_observable(), "stationary", n_max=6)
        path = tmp_path / "dec.bin"
        dec.save(path)
        back = sd.Decomposition.load(path)
        assert back.n_max == dec.n_max
        for k in range(1, 7):
            assert np.array_equal(back.psi[k], dec.psi[k])
            assert np.array_equal(back.h[k], dec.h[k])


class TestReverseMartingale:
    def test_zero_residuals_for_zero_observable(self):
        frame = doubling_frame(128)
        zero = sd.grid_observable(np.zeros(128))
        dec = sd.build_decomposition(frame, zero, "stationary", n_max=6)
        assert sd.check_reverse_martingale(dec, frame).max() == 0.0

    def test_doubling_cos_residual(self):
        frame = doubling_frame(4096)
        dec = sd.build_decomposition(frame, sd.trig_observable(), "stationary", n_max=8)
        assert sd.check_reverse_martingale(dec, frame).max() <= 1e-3

    def test_beta_schedule_residual_refines(self):
        res = {}
        for N in (512, 1024):
            frame = beta_schedule_frame(N, 42)
            dec = sd.build_decomposition(frame, sd.sawtooth_observable(),
                                         "sequential", n_max=40)
            res[N] = sd.check_reverse_martingale(dec, frame).max()
        assert res[1024] < res[512]


class TestConditionalVariance:
    def test_zero_psi(self):
        frame = doubling_frame(128)
        zero = sd.grid_observable(np.zeros(128))
        dec = sd.build_decomposition(frame, zero, "stationary", n_max=4)
        g, eu2 = sd.conditional_variance_function(dec, frame, 2)
        assert g.sup() == 0.0 and eu2 == 0.0

    def test_doubling_cos_formula(self):
        N = 4096
        frame = doubling_frame(N)
        dec = sd.build_decomposition(frame, sd.trig_observable(), "stationary", n_max=6)
        g, eu2 = sd.conditional_variance_function(dec, frame, 3)
        mids = (np.arange(N) + 0.5) / N
        assert np.abs(g.values - (0.5 + 0.5 * np.cos(2 * np.pi * mids))).max() <= 1e-3
        assert eu2 == pytest.approx(0.5, abs=1e-3)

    def test_tower_property_exact(self):
        frame = beta_schedule_frame(512, 22)
        dec = sd.build_decomposition(frame, sd.sawtooth_observable(), "sequential",
                                     n_max=20)
        for k in (1, 7, 19):
            g, eu2 = sd.conditional_variance_function(dec, frame, k)
            lhs = float(np.mean(g.values * frame.density_values(k + 1)))
            assert abs(lhs - eu2) <= 1e-10


class TestOrbitIdentities:
    def test_telescoping_along_orbits(self):
        # sum of U_j equals the Birkhoff sum plus boundary h terms, pointwise
        N, n = 1024, 30
        frame = beta_schedule_frame(N, n + 2)
        dec = sd.build_decomposition(frame, sd.sawtooth_observable(), "sequential",
                                     n_max=n + 1)
        rng = np.random.default_rng(0)
        x0 = rng.random(100)
        pts = np.empty((n + 2, 100))
        x = x0.copy()
        for k in range(1, n + 2):
            x = frame.system.map_at(k).eval_array(x)
            pts[k - 1] = x
        pts = pts[: n + 1]
        U = sd.u_along_orbit(dec, pts)
        cells = np.minimum((pts * N).astype(np.int64), N - 1)
        birkhoff = sum(dec.phi_tilde[j][cells[j - 1]] for j in range(1, n + 1))
        lhs = U[:n].sum(axis=0)
        rhs = (birkhoff + dec.h[1][np.minimum((x0 * N).astype(np.int64), N - 1)] * 0
               + dec.h[1][cells[0]] - dec.h[n + 1][cells[n]])
        assert np.abs(lhs - rhs).max() <= n * 1e-10

    def test_orthogonality_monte_carlo(self):
        # E[U_i U_j] = 0 for i != j within 3 standard errors
        N, n = 2048, 12
        frame = doubling_frame(N)
        dec = sd.build_decomposition(frame, sd.trig_observable(), "stationary",
                                     n_max=n)
        M = 100_000
        streams = OrbitStreams(sd.doubling_system(n + 1), M, seed=123)
        pts = np.empty((n + 1, M))
        for k in range(n + 1):
            pts[k] = streams.advance()
        U = sd.u_along_orbit(dec, pts)
        for (i, j) in ((0, 5), (2, 9), (1, 10)):
            prod = U[i] * U[j]
            se = prod.std(ddof=1) / np.sqrt(M)
            assert abs(prod.mean()) <= 3 * se

    def test_h_sup_bounded_by_observable_bv(self):
        sups = {}
        for N in (512, 1024):
            frame = beta_schedule_frame(N, 41)
            dec = sd.build_decomposition(frame, sd.sawtooth_observable(),
                                         "sequential", n_max=40)
            hsup = max(np.abs(dec.h[k]).max() for k in range(1, 42))
            sups[N] = hsup / sd.sawtooth_observable().holder_norm_bound
        assert sups[1024] <= 5.0
        assert abs(sups[1024] - sups[512]) <= 0.2 * max(sups.values())


class TestCmDiagnostics:
    def test_zero_observable(self):
        frame = doubling_frame(256)
        zero = sd.grid_observable(np.zeros(256))
        dec = sd.build_decomposition(frame, zero, "stationary", n_max=256)
        diag = sd.cm_diagnostics(dec, frame, 8, 0.75, seed=5)
        assert np.all(diag.ratios == 0.0)
        assert np.all(diag.b_partial == 0.0)

    def test_doubling_cos_medians_shrink(self):
        frame = doubling_frame(1024)
        dec = sd.build_decomposition(frame, sd.trig_observable(), "stationary",
                                     n_max=2 ** 12)
        diag = sd.cm_diagnostics(dec, frame, 64, 0.75, seed=9)
        assert diag.median_abs[-1] < diag.median_abs[1]
        # condition-B partial sums increase and their block increments shrink
        b = diag.b_partial
        assert np.all(np.diff(b) >= 0.0)
        inc1 = b[3] - b[0]
        inc2 = b[6] - b[3]
        assert inc2 <= inc1 / 2.0

    def test_explicit_sample_points(self):
        frame = golden_frame(512)
        dec = sd.build_decomposition(frame, sd.trig_observable(), "stationary",
                                     n_max=256)
        diag = sd.cm_diagnostics(dec, frame, np.linspace(0.05, 0.95, 16), 0.75)
        assert diag.ratios.shape[1] == 16

    def test_sigma_based_normalization(self):
        frame = doubling_frame(512)
        dec = sd.build_decomposition(frame, sd.trig_observable(), "stationary",
                                     n_max=512)
        diag = sd.cm_diagnostics(dec, frame, 8, 1.5, a_base="sigma", seed=2)
        # sigma_n^2 ~ n/2 so a_n ~ (n/2)^{0.75}
        expected = (np.asarray(diag.checkpoints) / 2.0) ** 0.75
        assert np.allclose(diag.a_values, expected, rtol=0.05)

    def test_csv_rows_schema(self):
        frame = doubling_frame(256)
        dec = sd.build_decomposition(frame, sd.trig_observable(), "stationary",
                                     n_max=128)
        diag = sd.cm_diagnostics(dec, frame, 4, 0.75, seed=1)
        row = next(iter(diag.csv_rows()))
        assert set(row) == {"n", "median_A_ratio", "max_A_ratio", "B_partial_sum"}

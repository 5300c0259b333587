"""Monte Carlo ensembles of Birkhoff sums and statistical limit-theorem tests.

Ensembles record S_n(x_i) = sum_{k<=n} phi~_k(T_k ... T_1 x_i) for M
independent streams at geometric checkpoints (ratio 2 starting at 64); every
operation is a pure function of (config, seed, version), so re-runs are
byte-identical under any thread count.

Self-norming uses the ensemble standard deviation: KS statistics against the
standard normal get p-values from the asymptotic Kolmogorov distribution, and
the iterated-logarithm profile uses the classical normalization
L_n = S_n / sqrt(2 sigma_n^2 loglog sigma_n^2) with acceptance bands
calibrated by running the identical code on injected i.i.d. Gaussians.

The Green-Kubo operation evaluates the asymptotic variance of a mu-centered
observable through the normalized-operator series G = sum_k P^^k phi and the
quadrature of P^[G phi - P^ G phi]^2 against the invariant density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from ._streams import NormalStreams, OrbitStreams
from .cache import canonical_json
from .maps import Observable, SequentialSystem, TargetSequence
from .martingale import NonConvergentTail
from .transfer import ChainState, HypothesisReport, StepFunction, UlamMatrix, decay_rate

E_CONST = math.e


class DegenerateVariance(RuntimeError):
    """Ensemble variance vanished where a positive variance is required."""


def default_checkpoints(n_max: int, start: int = 64) -> np.ndarray:
    """Geometric checkpoints with ratio 2 from ``start``, always ending at n_max."""
    if n_max < start:
        return np.array([n_max], dtype=np.int64)
    cps = []
    c = start
    while c <= n_max:
        cps.append(c)
        c *= 2
    if cps[-1] != n_max:
        cps.append(n_max)
    return np.array(cps, dtype=np.int64)


@dataclass(eq=False)
class EnsembleResult:
    """Birkhoff-sum snapshots of M streams at geometric checkpoints."""

    checkpoints: np.ndarray
    sums: np.ndarray                  # (n_checkpoints, M)
    seed: int
    system: dict | None
    observable: dict | list | None
    mode: str
    lil_window: tuple[int, int] | None = None
    lil_window_sup: np.ndarray | None = None
    expected_curve: np.ndarray | None = None   # analytic E_n at checkpoints, if known

    @property
    def M(self) -> int:
        return self.sums.shape[1]

    def at(self, n: int) -> np.ndarray:
        idx = np.nonzero(self.checkpoints == n)[0]
        if idx.size == 0:
            raise KeyError(f"n={n} is not a recorded checkpoint")
        return self.sums[idx[0]]

    def content_bytes(self) -> bytes:
        """Canonical byte encoding of the numerical content (determinism checks)."""
        parts = [self.checkpoints.astype("<i8").tobytes(), self.sums.astype("<f8").tobytes()]
        if self.lil_window_sup is not None:
            parts.append(self.lil_window_sup.astype("<f8").tobytes())
        return b"".join(parts)


def _run_streams(stepper, value_at, n_max: int, M: int, checkpoints: np.ndarray,
                 lil_window: bool) -> tuple[np.ndarray, tuple | None, np.ndarray | None]:
    sums = np.empty((len(checkpoints), M))
    S = np.zeros(M)
    win = None
    wsup = None
    if lil_window:
        lo = n_max // 10
        win = (lo + 1, n_max)
        wsup = np.full(M, -np.inf)
    ci = 0
    for k in range(1, n_max + 1):
        x = stepper.advance()
        S += value_at(k, x)
        if lil_window and k > win[0] - 1:
            v = _ensemble_var(S)
            if v > E_CONST:
                denom = math.sqrt(2.0 * v * math.log(math.log(v)))
                np.maximum(wsup, S / denom, out=wsup)
        if ci < len(checkpoints) and k == checkpoints[ci]:
            sums[ci] = S
            ci += 1
    return sums, win, wsup


def _ensemble_var(S: np.ndarray) -> float:
    m = S.mean()
    return float(np.dot(S, S) / S.size - m * m) * (S.size / (S.size - 1))


def sequential_centering(system: SequentialSystem, observable: Observable,
                         n_max: int, N: int, cache=None) -> np.ndarray:
    """Centering constants m(phi o T_k ... T_1) = int phi * (P_k...P_1 1) dm, k=1..n_max."""
    chain = ChainState(system, N, cache=cache)
    grid = observable.cell_values(N)
    return np.array([float(np.mean(grid * chain.density(k).values)) for k in range(1, n_max + 1)])


def ensemble_birkhoff(system: SequentialSystem, observables, n_max: int, M: int,
                      seed: int, mode: str = "stationary", centering=None,
                      chain_N: int = 4096, init="lebesgue",
                      checkpoints: np.ndarray | None = None,
                      lil_window: bool = False, cache=None) -> EnsembleResult:
    """Monte Carlo Birkhoff sums of centered observables along M seeded streams.

    Sequential mode subtracts the Lebesgue mean of the composed observable at
    every step (computed from the transfer chain at resolution ``chain_N``
    unless explicit ``centering`` constants are supplied); stationary mode
    expects observables already centered for the relevant invariant measure,
    with ``init=("mu", density_values)`` drawing initial points from it.
    """
    if M < 2:
        raise ValueError("need at least two streams")
    if checkpoints is None:
        checkpoints = default_checkpoints(n_max)
    single = isinstance(observables, Observable)
    obs_list = None if single else list(observables)
    if mode == "sequential" and centering is None and single:
        centering = sequential_centering(system, observables, n_max, chain_N, cache=cache)
    if centering is None:
        centering = np.zeros(n_max)
    streams = OrbitStreams(system, M, seed, init=init)

    if single:
        def value_at(k, x):
            return observables.value(x) - centering[k - 1]
    else:
        def value_at(k, x):
            return obs_list[k - 1].value(x) - centering[k - 1]

    sums, win, wsup = _run_streams(streams, value_at, n_max, M, checkpoints, lil_window)
    return EnsembleResult(
        checkpoints, sums, seed, system.descriptor(),
        observables.descriptor() if single else [o.descriptor() for o in obs_list],
        mode, win, wsup,
    )


def injected_normal_ensemble(n_max: int, M: int, seed: int,
                             checkpoints: np.ndarray | None = None,
                             lil_window: bool = False) -> EnsembleResult:
    """Random walk of i.i.d. N(0,1) increments through the identical pipeline.

    This is the calibration oracle: variance curves, CLT p-values, and LIL
    bands computed from it share every code path with the dynamical runs.
    """
    if checkpoints is None:
        checkpoints = default_checkpoints(n_max)
    streams = NormalStreams(M, seed)
    sums, win, wsup = _run_streams(streams, lambda k, x: x, n_max, M, checkpoints, lil_window)
    return EnsembleResult(checkpoints, sums, seed, None, {"kind": "iid_normal"},
                          "injected", win, wsup)


@dataclass(eq=False)
class VarianceCurve:
    """Ensemble variances at checkpoints with a log-log growth-exponent fit."""

    checkpoints: np.ndarray
    sigma2: np.ndarray
    std_error: np.ndarray
    exponent: float
    exponent_ci: tuple[float, float]
    n_boot: int

    def csv_rows(self):
        for i, n in enumerate(self.checkpoints):
            yield {"n": int(n), "sigma2": self.sigma2[i], "std_error": self.std_error[i],
                   "exponent": self.exponent, "ci_lo": self.exponent_ci[0],
                   "ci_hi": self.exponent_ci[1]}


def variance_curve(ens: EnsembleResult, n_boot: int = 1000) -> VarianceCurve:
    """Unbiased ensemble variances and the fitted growth exponent of sigma_n^2.

    The exponent is the least-squares slope of log sigma^2 against log n; its
    confidence interval comes from ``n_boot`` seeded bootstrap resamples of the
    streams (percentiles 2.5 and 97.5).
    """
    if len(ens.checkpoints) < 5:
        raise ValueError("exponent fit needs at least 5 checkpoints")
    sums = ens.sums
    M = ens.M
    sig2 = sums.var(axis=1, ddof=1)
    if sig2[-1] == 0.0:
        raise DegenerateVariance("zero ensemble variance at the final checkpoint")
    # standard error of the variance from the fourth central moment
    mu = sums.mean(axis=1, keepdims=True)
    m4 = np.mean((sums - mu) ** 4, axis=1)
    se = np.sqrt(np.maximum(m4 - (M - 3) / (M - 1) * sig2 ** 2, 0.0) / M)
    logn = np.log(ens.checkpoints.astype(float))
    mask = sig2 > 0.0
    exponent = float(np.polyfit(logn[mask], np.log(sig2[mask]), 1)[0])
    rng = np.random.default_rng(np.random.SeedSequence((ens.seed, 0xB007)))
    boots = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, M, size=M)
        s2 = sums[:, idx].var(axis=1, ddof=1)
        ok = s2 > 0.0
        boots[b] = np.polyfit(logn[ok], np.log(s2[ok]), 1)[0] if ok.sum() >= 2 else np.nan
    lo, hi = np.nanpercentile(boots, [2.5, 97.5])
    return VarianceCurve(ens.checkpoints, sig2, se, exponent, (float(lo), float(hi)), n_boot)


@dataclass(eq=False)
class CltReport:
    n: int
    M: int
    ks_statistic: float
    p_value: float
    sample: str

    def csv_rows(self):
        yield {"n": self.n, "M": self.M, "ks_statistic": self.ks_statistic,
               "p_value": self.p_value}


def ks_normal(z: np.ndarray) -> tuple[float, float]:
    """One-sample KS statistic against N(0,1) with the asymptotic p-value."""
    z = np.sort(np.asarray(z, dtype=float))
    M = z.size
    F = special.ndtr(z)
    i = np.arange(1, M + 1)
    d = max(float(np.max(i / M - F)), float(np.max(F - (i - 1) / M)))
    p = float(special.kolmogorov(math.sqrt(M) * d))
    return d, p


def clt_test(ens: EnsembleResult, at_n: int) -> CltReport:
    """KS test of the self-normed sums S_n / sigma^_n against the standard normal."""
    s = ens.at(at_n)
    sig = float(s.std(ddof=1))
    if sig == 0.0:
        raise DegenerateVariance(f"zero ensemble deviation at n={at_n}")
    d, p = ks_normal(s / sig)
    return CltReport(int(at_n), ens.M, d, p,
                     f"self-normed ensemble, seed={ens.seed}, mode={ens.mode}")


def clt_null_calibration(M: int, n_seeds: int, master_seed: int,
                         level: float = 0.01) -> tuple[int, float]:
    """Rejection count/rate of the KS test on injected i.i.d. standard normals.

    Injected Gaussian increments make S_n / sqrt(n) exactly standard normal,
    so each replicate draws the standardized sample directly; the sample is
    still self-normed by its ensemble deviation, exactly as clt_test does.
    """
    rejections = 0
    for j in range(n_seeds):
        rng = np.random.default_rng(np.random.SeedSequence((master_seed, j)))
        z = rng.standard_normal(M)
        sig = z.std(ddof=1)
        _, p = ks_normal(z / sig)
        if p < level:
            rejections += 1
    return rejections, rejections / n_seeds


@dataclass(eq=False)
class LilReport:
    """Iterated-logarithm profile L_n = S_n / sqrt(2 sigma_n^2 loglog sigma_n^2)."""

    checkpoints: np.ndarray  # checkpoints with sigma_n^2 > e
    profiles: np.ndarray     # (len(checkpoints), M)
    window: tuple[int, int]
    sup_median: float
    sup_q05: float
    sup_q95: float

    def csv_rows(self):
        med = np.median(self.profiles, axis=1)
        for i, n in enumerate(self.checkpoints):
            yield {"n": int(n), "median_L": med[i], "sup_median": self.sup_median,
                   "sup_q05": self.sup_q05, "sup_q95": self.sup_q95}


def lil_profile(ens: EnsembleResult) -> LilReport:
    """Per-trajectory LIL profile and quantiles of the windowed running sup.

    The sup is taken over every step of the trailing decade (n_max/10, n_max],
    accumulated online during the ensemble run (``lil_window=True``).
    """
    sig2 = ens.sums.var(axis=1, ddof=1)
    if sig2[-1] <= E_CONST:
        raise DegenerateVariance("final ensemble variance must exceed e for loglog")
    keep = sig2 > E_CONST
    cps = ens.checkpoints[keep]
    denom = np.sqrt(2.0 * sig2[keep] * np.log(np.log(sig2[keep])))
    profiles = ens.sums[keep] / denom[:, None]
    if ens.lil_window_sup is None:
        raise ValueError("ensemble was run without lil_window=True")
    q05, med, q95 = np.quantile(ens.lil_window_sup, [0.05, 0.5, 0.95])
    return LilReport(cps, profiles, ens.lil_window, float(med), float(q05), float(q95))


def green_kubo_variance(M0: UlamMatrix, h: StepFunction, phi: Observable,
                        tail_tol: float = 1e-10,
                        decay: HypothesisReport | None = None) -> float:
    """Asymptotic variance of a mu-centered observable via the resolvent series.

    With the normalized transfer operator P^ f = P(h f)/h and
    G phi = sum_{k>=0} P^^k phi, the Gordin martingale part is
    psi = G phi - (P^ G phi) o T, and

        sigma^2 = int P^[psi^2] dmu = int [P^(G phi)^2 - (P^ G phi)^2] dmu,

    the conditional-variance form (manifestly >= 0, and exactly 0 for
    coboundaries).  The series is summed until the estimated spectral-gap
    bound pushes the tail below ``tail_tol``.  The observable must be
    mu-centered; its residual grid mean is projected out (a constant
    component would make the series diverge).
    """
    hv = h.values
    if np.min(hv) <= 0.0:
        raise ValueError("invariant density must be strictly positive")
    phi_g = phi.cell_values(M0.N)
    mu_mean = float(np.mean(phi_g * hv))
    if abs(mu_mean) > 1e-8:
        raise ValueError(f"observable is not mu-centered (residual mean {mu_mean:.3e})")
    phi_g = phi_g - mu_mean
    if decay is None:
        decay = decay_rate(M0, h, normalized=True)
    gamma0 = decay.constants["gamma0"]
    if not 0.0 < gamma0 < 1.0:
        raise NonConvergentTail(f"decay rate gamma0={gamma0:.4f} outside (0,1)")
    max_terms = max(16, int(10.0 * math.log(1.0 / tail_tol) / math.log(1.0 / gamma0)))
    G = phi_g.copy()
    dens = phi_g * hv
    for _ in range(max_terms):
        dens = M0.push(dens)
        term = dens / hv
        G += term
        tail = StepFunction(term).bv() * gamma0 / (1.0 - gamma0)
        if tail < tail_tol:
            break
    else:
        raise NonConvergentTail("operator-power series failed to decay within the term budget")

    def p_hat(v):
        return M0.push(v * hv) / hv

    pg = p_hat(G)
    return float(np.mean((p_hat(G * G) - pg * pg) * hv))


@dataclass(eq=False)
class ShrinkingTargetResult:
    """Hit-count statistics for nested shrinking targets."""

    ensemble: EnsembleResult          # raw (uncentered) hit counts
    e_hat: np.ndarray                 # ensemble mean hit count at checkpoints
    e_analytic: np.ndarray            # sum of target measures at checkpoints
    variance: VarianceCurve
    clt: CltReport

    def csv_rows(self):
        for i, n in enumerate(self.ensemble.checkpoints):
            yield {"n": int(n), "E_hat": self.e_hat[i], "E_analytic": self.e_analytic[i],
                   "sigma2": self.variance.sigma2[i]}


def shrinking_target(system: SequentialSystem, targets: TargetSequence, n_max: int,
                     M: int, seed: int, mu_density: StepFunction | None = None,
                     n_boot: int = 1000) -> ShrinkingTargetResult:
    """Hit statistics of orbits into nested targets A_n, with CLT at the last checkpoint.

    ``system`` must be frozen (a single map); initial points are drawn from
    ``mu_density`` when given (otherwise Lebesgue, exact for the doubling
    map).  The analytic expectation curve uses the target measures under the
    same density.
    """
    if not system.frozen:
        raise ValueError("shrinking-target runs require a frozen schedule")
    checkpoints = default_checkpoints(n_max)
    N_mu = mu_density.N if mu_density is not None else 0
    radii = np.array([targets.radius(k) for k in range(1, n_max + 1)])
    anchor = targets.anchor
    if mu_density is None:
        measures = np.minimum(anchor + radii, 1.0) - anchor
    else:
        cdf = np.concatenate([[0.0], np.cumsum(mu_density.values)]) / N_mu

        def mu_of(l, r):
            def at(t):
                i = min(int(t * N_mu), N_mu - 1)
                return cdf[i] + (t - i / N_mu) * N_mu * (cdf[i + 1] - cdf[i])
            return at(min(r, 1.0)) - at(l)

        measures = np.array([mu_of(anchor, anchor + r) for r in radii])
    e_analytic_full = np.cumsum(measures)

    init = ("mu", mu_density.values) if mu_density is not None else "lebesgue"
    streams = OrbitStreams(system, M, seed, init=init)
    hi = anchor + radii

    def value_at(k, x):
        r = radii[k - 1]
        if r <= 0.0:
            return 0.0
        if anchor == 0.0:
            return (x < hi[k - 1]).astype(float)
        return ((x >= anchor) & (x < hi[k - 1])).astype(float)

    sums, _, _ = _run_streams(streams, value_at, n_max, M, checkpoints, False)
    ens = EnsembleResult(checkpoints, sums, seed, system.descriptor(),
                         {"kind": "shrinking_target", "parameters": targets.descriptor()},
                         "shrinking_target", None, None,
                         expected_curve=e_analytic_full[checkpoints - 1])
    e_hat = sums.mean(axis=1)
    var = variance_curve(ens, n_boot=n_boot)
    centered = EnsembleResult(checkpoints, sums - e_hat[:, None], seed, ens.system,
                              ens.observable, "shrinking_target_centered")
    clt = clt_test(centered, int(checkpoints[-1]))
    return ShrinkingTargetResult(ens, e_hat, e_analytic_full[checkpoints - 1], var, clt)

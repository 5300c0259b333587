"""Reverse-martingale decomposition on the Ulam grid and its diagnostics.

Given a chain of transfer operators P_k with pushforward densities
rho_k = P_k ... P_1 1, the operators

    Q_k f = P_k(f * rho_{k-1}) / rho_k

satisfy Q_k(f o T_k) = f for the exact dynamics.  With centered observables
phi~_k the functions

    h_{k+1} = Q_{k+1}(phi~_k + h_k),   h_1 = 0,
    psi_k   = phi~_k + h_k - h_{k+1} o T_{k+1}

make U_k = psi_k o (T_k ... T_1) a reverse-martingale difference sequence:
Q_{k+1} psi_k = 0 for the exact operators, so the discretized residual
measures grid error only.

Two frames share the construction: the sequential frame (reference measure
Lebesgue, operators from a ChainState) and the stationary frame (reference
measure the invariant mu, normalized operator f -> P(h f)/h, densities
identically 1).  Compositions h o T on the grid use the Koopman-averaged
matrix action M @ h (cell-conditional average over T-images), which keeps the
tower property exact on the grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _streams
from .maps import Observable, map_from_descriptor, stationary_system
from .transfer import (
    ChainState,
    HypothesisReport,
    StepFunction,
    UlamMatrix,
    decay_rate,
)


class DenominatorTooSmall(RuntimeError):
    """A pushforward density dipped below the configured floor (LB failure)."""


class NonConvergentTail(RuntimeError):
    """The operator-power series does not decay (no usable spectral gap)."""


class SequentialFrame:
    """Q-operator frame over a sequential chain, reference measure Lebesgue."""

    kind = "sequential"

    def __init__(self, chain: ChainState, delta_min: float = 1e-12):
        self.chain = chain
        self.delta_min = delta_min
        self.N = chain.N
        self.horizon = chain.system.horizon
        self.weight = np.ones(chain.N)
        self.system = chain.system

    def density_values(self, k: int) -> np.ndarray:
        return self.chain.density(k).values

    def push(self, k: int, v: np.ndarray) -> np.ndarray:
        return self.chain.matrix(k).push(v)

    def koopman(self, k: int, v: np.ndarray) -> np.ndarray:
        return self.chain.matrix(k).koopman(v)

    def use_lb_report(self, report: HypothesisReport):
        """Tie the Q-operator denominator floor to a measured LB bound."""
        self.delta_min = 0.5 * report.constants["delta"]


class StationaryFrame:
    """Normalized-operator frame: reference measure mu, P^ f = P(h f)/h."""

    kind = "stationary"

    def __init__(self, ulam: UlamMatrix, h: StepFunction, delta_min: float = 1e-12):
        if np.min(h.values) <= 0.0:
            raise ValueError("stationary frame needs a strictly positive density")
        self.ulam = ulam
        self.h = h
        self.delta_min = delta_min
        self.N = ulam.N
        self.horizon = np.inf
        self.weight = h.values
        self._ones = np.ones(ulam.N)
        self.system = stationary_system(
            map_from_descriptor(json.loads(ulam.map_descriptor)), horizon=1
        )

    def density_values(self, k: int) -> np.ndarray:
        return self._ones

    def push(self, k: int, v: np.ndarray) -> np.ndarray:
        return self.ulam.push(v * self.h.values) / self.h.values

    def koopman(self, k: int, v: np.ndarray) -> np.ndarray:
        return self.ulam.koopman(v)

    def use_lb_report(self, report: HypothesisReport):
        self.delta_min = 0.5 * report.constants["delta"]


def q_apply(frame, k: int, f: StepFunction) -> StepFunction:
    """Q_k f = P_k(f * rho_{k-1}) / rho_k on the grid (cellwise product/quotient)."""
    rho_prev = frame.density_values(k - 1)
    rho_k = frame.density_values(k)
    floor = float(np.min(rho_k))
    if floor < frame.delta_min:
        raise DenominatorTooSmall(
            f"min P_{k}...P_1 1 = {floor:.3e} below delta_min={frame.delta_min:.3e}"
        )
    return StepFunction(frame.push(k, f.values * rho_prev) / rho_k)


def expect_at(frame, k: int, values: np.ndarray) -> float:
    """E[v o chain_k] w.r.t. the frame's reference measure: integral of v * rho_k."""
    return float(np.mean(values * frame.density_values(k) * frame.weight))


@dataclass(eq=False)
class Decomposition:
    """Per-index grid functions h_k, psi_k realizing the martingale differences.

    ``h[k]`` is defined for k = 1..n_max+1 (h[0] is a zero placeholder) and
    ``psi[k]`` for k = 1..n_max.  In stationary mode with identical observables
    the lists alias a small set of distinct arrays, so long horizons stay
    cheap.  ``tail_truncation`` is the largest operator power kept in the
    stationary series (0 in sequential mode).
    """

    mode: str
    N: int
    n_max: int
    tail_truncation: int
    h: list
    psi: list
    phi_tilde: list
    centering: np.ndarray
    sup_h_bv: float = field(init=False)

    def __post_init__(self):
        seen = {}
        sup_bv = 0.0
        for arr in self.h[1:]:
            if id(arr) not in seen:
                f = StepFunction(arr)
                seen[id(arr)] = f.bv()
            sup_bv = max(sup_bv, seen[id(arr)])
        self.sup_h_bv = sup_bv

    def h_at(self, k: int) -> StepFunction:
        return StepFunction(self.h[k])

    def psi_at(self, k: int) -> StepFunction:
        return StepFunction(self.psi[k])

    def save(self, path):
        from .cache import write_container

        distinct = []
        index = {}
        for arr in self.h[1:] + self.psi[1:]:
            if id(arr) not in index:
                index[id(arr)] = len(distinct)
                distinct.append(np.asarray(arr))
        meta = {
            "container": "decomposition",
            "mode": self.mode,
            "N": self.N,
            "n_max": self.n_max,
            "tail_truncation": self.tail_truncation,
            "h_index": [index[id(a)] for a in self.h[1:]],
            "psi_index": [index[id(a)] for a in self.psi[1:]],
        }
        arrays = {f"a{i}": a for i, a in enumerate(distinct)}
        arrays["centering"] = self.centering
        return write_container(path, meta, arrays)

    @classmethod
    def load(cls, path):
        from .cache import read_container

        meta, arrays = read_container(path)
        if meta.get("container") != "decomposition":
            raise ValueError("not a decomposition container")
        distinct = [arrays[f"a{i}"] for i in range(len(arrays) - 1)]
        n_max = meta["n_max"]
        h = [np.zeros(meta["N"])] + [distinct[i] for i in meta["h_index"]]
        psi = [None] + [distinct[i] for i in meta["psi_index"]]
        phi = [None] * (n_max + 1)
        return cls(meta["mode"], meta["N"], n_max, meta["tail_truncation"],
                   h, psi, phi, arrays["centering"])


def _as_observable_list(observables, n_max: int) -> list[Observable]:
    if isinstance(observables, Observable):
        return [observables] * n_max
    obs = list(observables)
    if len(obs) < n_max:
        raise ValueError(f"need {n_max} observables, got {len(obs)}")
    return obs[:n_max]


def build_decomposition(frame, observables, mode: str, n_max: int | None = None,
                        tail_tol: float = 1e-10,
                        decay: HypothesisReport | None = None) -> Decomposition:
    """Construct h_k and psi_k for k = 1..n_max.

    Sequential mode centers each observable by the Lebesgue mean of its
    composed value (phi~_k = phi_k - int phi_k rho_k dm) and runs the
    recursion h_{k+1} = Q_{k+1}(phi~_k + h_k), which is algebraically the
    operator-product sum.  Stationary mode centers by the invariant measure
    and sums the normalized-operator power series, truncated once the
    spectral-gap estimate bounds the tail below ``tail_tol``.
    """
    if mode not in ("sequential", "stationary"):
        raise ValueError("mode must be 'sequential' or 'stationary'")
    if mode != frame.kind:
        raise ValueError(f"{mode} decomposition requires a {mode} frame")
    N = frame.N
    if n_max is None:
        n_max = (frame.horizon - 1) if np.isfinite(frame.horizon) else 0
    n_max = int(n_max)
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if np.isfinite(frame.horizon) and n_max + 1 > frame.horizon:
        raise ValueError("decomposition needs chain horizon >= n_max + 1")
    obs = _as_observable_list(observables, n_max)
    grids = _dedup_grids(obs, N)

    if mode == "sequential":
        centering = np.array([
            float(np.mean(grids[k - 1] * frame.density_values(k))) for k in range(1, n_max + 1)
        ])
        phi_t = [None] + [grids[k - 1] - centering[k - 1] for k in range(1, n_max + 1)]
        h = [np.zeros(N), np.zeros(N)]
        for k in range(1, n_max + 1):
            h.append(q_apply(frame, k + 1, StepFunction(phi_t[k] + h[k])).values)
        J = 0
    else:
        hv = frame.weight
        identical = all(g is grids[0] for g in grids)
        centering = np.array([float(np.mean(g * hv)) for g in grids])
        phi_t = [None] + [grids[k - 1] - centering[k - 1] for k in range(1, n_max + 1)]
        if decay is None:
            decay = decay_rate(frame.ulam, frame.h, normalized=True)
        gamma0 = decay.constants["gamma0"]
        c1 = max(decay.constants["C1"], 1.0)
        if not 0.0 < gamma0 < 1.0:
            raise NonConvergentTail(f"estimated decay rate gamma0={gamma0:.4f} is not in (0,1)")
        max_bv = max(StepFunction(p).bv() for p in phi_t[1:]) or 1.0
        J = max(1, math.ceil(math.log(tail_tol / (c1 * max_bv)) / math.log(gamma0)))
        J = min(J, 100000)
        if identical:
            # powers P^j phi~ computed once; h_n = sum_{j<=min(n-1,J)} of them
            partial = [np.zeros(N)]
            term = phi_t[1]
            for _ in range(J):
                term = frame.push(1, term)
                partial.append(partial[-1] + term)
            h = [np.zeros(N)] + [partial[min(max(n - 1, 0), J)] for n in range(1, n_max + 2)]
        else:
            h = [np.zeros(N), np.zeros(N)]
            terms: list[np.ndarray] = []
            for n in range(2, n_max + 2):
                terms = [frame.push(1, t) for t in terms[: J - 1]]
                terms.insert(0, frame.push(1, phi_t[n - 1]))
                h.append(np.sum(terms, axis=0))

    psi = [None]
    koop_cache: dict[int, np.ndarray] = {}
    for k in range(1, n_max + 1):
        key = id(h[k + 1])
        if frame.kind == "stationary" and key in koop_cache:
            comp = koop_cache[key]
        else:
            comp = frame.koopman(k + 1, h[k + 1])
            if frame.kind == "stationary":
                koop_cache[key] = comp
        # alias identical psi arrays in the stabilized stationary regime
        if (frame.kind == "stationary" and k >= 2 and h[k] is h[k - 1]
                and h[k + 1] is h[k] and phi_t[k] is phi_t[k - 1]):
            psi.append(psi[-1])
        else:
            psi.append(phi_t[k] + h[k] - comp)
    return Decomposition(mode, N, n_max, J, h, psi, phi_t, centering)


def _dedup_grids(obs: list[Observable], N: int) -> list[np.ndarray]:
    """Cell-value grids with identical observables aliasing one array."""
    grids = []
    memo = {}
    for o in obs:
        key = id(o)
        if key not in memo:
            memo[key] = o.cell_values(N)
        grids.append(memo[key])
    return grids


def check_reverse_martingale(dec: Decomposition, frame) -> np.ndarray:
    """||Q_{k+1} psi_k||_1 for k = 1..n_max; zero for exact operators."""
    out = np.empty(dec.n_max)
    memo = {}
    for k in range(1, dec.n_max + 1):
        key = id(dec.psi[k])
        if frame.kind == "stationary" and key in memo:
            out[k - 1] = memo[key]
            continue
        r = q_apply(frame, k + 1, StepFunction(dec.psi[k])).l1()
        out[k - 1] = r
        if frame.kind == "stationary":
            memo[key] = r
    return out


def conditional_variance_function(dec: Decomposition, frame, k: int
                                  ) -> tuple[StepFunction, float]:
    """g_k = P_{k+1}(psi_k^2 rho_k)/rho_{k+1} and E[U_k^2].

    The conditional expectation of U_k^2 given the (k+1)-pullback algebra is
    g_k evaluated at the (k+1)-step orbit point; integrating g_k against
    rho_{k+1} recovers E[U_k^2] exactly on the grid (tower property).
    """
    psi2 = dec.psi[k] ** 2
    g = q_apply(frame, k + 1, StepFunction(psi2))
    return g, expect_at(frame, k, psi2)


def u_along_orbit(dec: Decomposition, points: np.ndarray) -> np.ndarray:
    """Martingale differences U_k evaluated along orbit points.

    ``points[k]`` holds the k-step orbit positions for k = 1..n_max+1 (axis 0);
    the composition h_{k+1} o T_{k+1} is evaluated pointwise at the next orbit
    point, so the telescoping identity holds to rounding.
    """
    points = np.asarray(points, dtype=float)
    npts = points.shape[0] - 1
    if npts > dec.n_max:
        raise ValueError("orbit longer than the decomposition")
    N = dec.N
    out = np.empty((npts,) + points.shape[1:], dtype=float)
    cells = np.minimum((points * N).astype(np.int64), N - 1)
    for k in range(1, npts + 1):
        out[k - 1] = (dec.phi_tilde[k][cells[k - 1]] + dec.h[k][cells[k - 1]]
                      - dec.h[k + 1][cells[k]])
    return out


@dataclass(eq=False)
class CMDiagnostics:
    """Numerical state of the almost-sure variance condition and moment condition.

    ``ratios[i, j]`` is S_n(x_j)/a_n at checkpoint n = checkpoints[i], where
    S_n sums the centered conditional second moments along the orbit of sample
    j.  ``b_partial`` tracks sum a_n^{-v} E|U_n|^{2v} with v = 2.
    """

    a_exponent: float
    a_base: str
    checkpoints: np.ndarray
    a_values: np.ndarray
    ratios: np.ndarray
    median_abs: np.ndarray
    max_abs: np.ndarray
    b_partial: np.ndarray
    v: int
    sample: str

    def csv_rows(self):
        for i, n in enumerate(self.checkpoints):
            yield {
                "n": int(n),
                "median_A_ratio": self.median_abs[i],
                "max_A_ratio": self.max_abs[i],
                "B_partial_sum": self.b_partial[i],
            }


def cm_diagnostics(dec: Decomposition, frame, sample_points, a_exponent: float,
                   a_base: str = "n", seed: int = 0,
                   checkpoint_start: int = 64) -> CMDiagnostics:
    """Track condition (A) trajectories and condition (B) partial sums.

    ``sample_points`` is either a count (orbits drawn through the exact stream
    engine, which stays distributionally faithful for dyadic maps) or an
    explicit array of starting points (plain float iteration; fine for maps
    whose multiplier is not a power of two).  Checkpoints are the powers of
    two in [checkpoint_start, n_max].
    """
    n_max = dec.n_max
    if a_base not in ("n", "sigma"):
        raise ValueError("a_base must be 'n' or 'sigma'")

    # per-step grid data, memoized across aliased psi arrays
    g_list, eu2, eu4 = [], np.empty(n_max), np.empty(n_max)
    memo = {}
    for k in range(1, n_max + 1):
        key = id(dec.psi[k])
        if key not in memo:
            g, e2 = conditional_variance_function(dec, frame, k)
            e4 = expect_at(frame, k, dec.psi[k] ** 4)
            memo[key] = (g.values, e2, e4)
        gv, e2, e4 = memo[key]
        g_list.append(gv)
        eu2[k - 1] = e2
        eu4[k - 1] = e4

    ns = np.arange(1, n_max + 1, dtype=float)
    if a_base == "n":
        a_all = ns ** a_exponent
    else:
        sigma2 = np.cumsum(eu2)
        a_all = np.sqrt(np.maximum(sigma2, 1e-300)) ** a_exponent
    b_all = np.cumsum(eu4 / a_all ** 2)

    cps = _pow2_checkpoints(checkpoint_start, n_max)
    if isinstance(sample_points, (int, np.integer)):
        M = int(sample_points)
        horizon_sys = _with_horizon(frame.system, n_max + 1)
        init = ("mu", frame.weight) if frame.kind == "stationary" else "lebesgue"
        streams = _streams.OrbitStreams(horizon_sys, M, seed, init=init)
        sample_desc = f"{M} seeded sample orbits (seed={seed})"
    else:
        x0 = np.asarray(sample_points, dtype=float)
        M = x0.size
        streams = _FixedStartStreams(_with_horizon(frame.system, n_max + 1), x0)
        sample_desc = f"{M} explicit sample points"

    N = dec.N
    S = np.zeros(M)
    ratios = np.empty((len(cps), M))
    ci = 0
    for k in range(1, n_max + 1):
        if k == 1:
            streams.advance()  # x_1 unused: S starts at the (k+1)-st point
        xk1 = streams.advance()
        cells = np.minimum((xk1 * N).astype(np.int64), N - 1)
        S += g_list[k - 1][cells] - eu2[k - 1]
        if ci < len(cps) and k == cps[ci]:
            ratios[ci] = S / a_all[k - 1]
            ci += 1
    absr = np.abs(ratios)
    return CMDiagnostics(
        a_exponent, a_base, cps, a_all[cps - 1], ratios,
        np.median(absr, axis=1), np.max(absr, axis=1),
        b_all[cps - 1], 2, sample_desc,
    )


def _pow2_checkpoints(start: int, n_max: int) -> np.ndarray:
    cps = []
    c = start
    while c <= n_max:
        cps.append(c)
        c *= 2
    if not cps or cps[-1] != n_max:
        cps.append(n_max)
    return np.array(cps, dtype=np.int64)


def _with_horizon(system, horizon: int):
    from .maps import SequentialSystem

    if system.horizon >= horizon:
        return system
    return SequentialSystem(system.kind, system.fixed, system.schedule, horizon)


class _FixedStartStreams:
    """Float iteration from explicit starting points (no injected entropy)."""

    def __init__(self, system, x0: np.ndarray):
        self.system = system
        self.x = np.array(x0, dtype=float)
        self.k = 0

    def advance(self) -> np.ndarray:
        self.k += 1
        m = self.system.map_at(self.k)
        self.x = m.eval_array(self.x)
        return self.x

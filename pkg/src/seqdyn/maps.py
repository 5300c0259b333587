"""Catalog of one-dimensional expanding maps, parameter schedules, and sequential orbits.

All maps act on the half-open unit interval [0, 1); for circle-type maps the
point 1 is identified with 0.  Internally every map is a finite list of
strictly monotone polynomial branches of degree <= 3 whose images stay inside
[0, 1].  This representation makes branch inverses and exact preimages of
intervals available to the transfer-operator layer, which is what allows the
Ulam matrices of piecewise-linear maps to be computed exactly.

Breakpoint convention: branches own their *left* endpoint (right-continuous
selection); x = 1 is excluded everywhere.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NEWTON_RESIDUAL = 1e-14
_GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


class MapError(ValueError):
    """Invalid map descriptor (non-monotone branch, image escaping [0,1), ...)."""


def _poly_val(coeffs, x):
    c0, c1, c2, c3 = coeffs
    return ((c3 * x + c2) * x + c1) * x + c0


def _poly_deriv(coeffs, x):
    _, c1, c2, c3 = coeffs
    return (3.0 * c3 * x + 2.0 * c2) * x + c1


@dataclass(frozen=True)
class Branch:
    """One strictly monotone polynomial piece of an interval map.

    ``coeffs`` are global polynomial coefficients (c0, c1, c2, c3); the branch
    is defined on [lo, hi) and its image is contained in [0, 1].  ``min_slope``
    and ``max_curve`` are certified bounds: inf |p'| and sup |p''| over the
    closed branch domain, obtained from the exact extrema of the (at most
    quadratic) derivative.
    """

    lo: float
    hi: float
    coeffs: tuple[float, float, float, float]
    increasing: bool
    lo_value: float
    hi_value: float
    min_slope: float
    max_curve: float

    @property
    def linear(self) -> bool:
        return self.coeffs[2] == 0.0 and self.coeffs[3] == 0.0

    def value(self, x):
        return _poly_val(self.coeffs, x)

    def deriv(self, x):
        return _poly_deriv(self.coeffs, x)

    def image(self) -> tuple[float, float]:
        """(inf, sup) of the branch image."""
        if self.increasing:
            return self.lo_value, self.hi_value
        return self.hi_value, self.lo_value

    def inverse(self, y):
        """Preimages of ``y`` (scalar or array) under this branch.

        Linear branches invert in closed form; curved branches use a
        safeguarded Newton iteration driven to an absolute residual of
        ``NEWTON_RESIDUAL``.  Raises MapError if Newton stalls, which signals
        an invalid PiecewiseC2 descriptor.
        """
        y = np.asarray(y, dtype=float)
        if self.linear:
            return (y - self.coeffs[0]) / self.coeffs[1]
        scalar = y.ndim == 0
        y = np.atleast_1d(y)
        lo, hi = self.lo, self.hi
        a = np.full(y.shape, lo)
        b = np.full(y.shape, hi)
        # linear initial guess from the endpoint values
        span = self.hi_value - self.lo_value
        x = np.clip(lo + (y - self.lo_value) / span * (hi - lo), lo, hi)
        sign = 1.0 if self.increasing else -1.0
        for _ in range(80):
            f = self.value(x) - y
            if np.all(np.abs(f) <= NEWTON_RESIDUAL):
                return x[0] if scalar else x
            # shrink the bracket, then Newton with bisection fallback
            below = sign * f < 0.0
            a = np.where(below, x, a)
            b = np.where(below, b, x)
            fp = self.deriv(x)
            step = np.where(fp != 0.0, f / np.where(fp != 0.0, fp, 1.0), 0.0)
            xn = x - step
            bad = (xn <= a) | (xn >= b) | (fp == 0.0)
            x = np.where(bad, 0.5 * (a + b), xn)
        raise MapError("branch inverse Newton iteration failed to converge")


def _make_branch(lo: float, hi: float, coeffs, image: tuple[float, float] | None = None
                 ) -> Branch:
    """Build one branch; ``image`` pins exact endpoint values when they are
    known in closed form (seam points of mod-1 maps), avoiding 1-ulp drift in
    image-membership tests."""
    c = tuple(float(v) for v in coeffs)
    while len(c) < 4:
        c = c + (0.0,)
    if len(c) > 4:
        raise MapError("branch polynomials are restricted to degree <= 3")
    # certified derivative extrema: endpoints plus the vertex of p''=0
    cand = [lo, hi]
    if c[3] != 0.0:
        xs = -c[2] / (3.0 * c[3])
        if lo < xs < hi:
            cand.append(xs)
    dvals = [_poly_deriv(c, x) for x in cand]
    dmin, dmax = min(dvals), max(dvals)
    if dmin > 0.0:
        increasing, min_slope = True, dmin
    elif dmax < 0.0:
        increasing, min_slope = False, -dmax
    else:
        raise MapError(f"branch on [{lo}, {hi}) is not strictly monotone")
    max_curve = max(abs(2.0 * c[2] + 6.0 * c[3] * lo), abs(2.0 * c[2] + 6.0 * c[3] * hi))
    if image is not None:
        lo_v, hi_v = image
    else:
        lo_v = _poly_val(c, lo)
        hi_v = _poly_val(c, hi)
    tol = 1e-12
    if min(lo_v, hi_v) < -tol or max(lo_v, hi_v) > 1.0 + tol:
        raise MapError(f"branch image [{min(lo_v, hi_v)}, {max(lo_v, hi_v)}] escapes [0,1]")
    return Branch(lo, hi, c, increasing, lo_v, hi_v, min_slope, max_curve)


@dataclass(frozen=True, eq=False)
class IntervalMap:
    """A piecewise-expanding map of [0,1) with certified expansion/distortion bounds.

    ``expansion`` is a certified lower bound on inf |T'| (> 1) and
    ``distortion`` a certified upper bound on sup |T''/T'| (0 for the
    piecewise-linear kinds).  Instances are immutable and safe to share.
    """

    kind: str
    params: dict
    branches: tuple[Branch, ...]
    expansion: float
    distortion: float
    circle: bool

    def __post_init__(self):
        if self.expansion <= 1.0:
            raise MapError("map expansion bound must exceed 1")
        los = np.array([b.lo for b in self.branches])
        object.__setattr__(self, "_los", los)

    def eval(self, x: float) -> float:
        return float(self.eval_array(np.asarray([x]))[0])

    def eval_array(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        idx = np.searchsorted(self._los, xs, side="right") - 1
        out = np.empty_like(xs)
        for i, b in enumerate(self.branches):
            m = idx == i
            if np.any(m):
                out[m] = b.value(xs[m])
        # images live in [0,1]; fold the closed right endpoint back for circle kinds
        if self.circle:
            out = np.where(out >= 1.0, out - 1.0, out)
        else:
            out = np.minimum(out, np.nextafter(1.0, 0.0))
        return out

    def descriptor(self) -> dict:
        return {"kind": self.kind, "parameters": dict(self.params)}


def beta_map(beta: float) -> IntervalMap:
    """T(x) = beta * x mod 1 on the circle, beta > 1.

    Branches sit on [k/beta, (k+1)/beta); the last branch of a non-integer
    beta is not onto.
    """
    beta = float(beta)
    if not beta > 1.0:
        raise MapError("beta must exceed 1")
    nb = math.ceil(beta)
    branches = []
    for k in range(nb):
        lo = k / beta
        hi = min((k + 1) / beta, 1.0)
        if lo >= 1.0 or hi <= lo:
            continue
        full = (k + 1) / beta <= 1.0
        image = (0.0, 1.0) if full else (0.0, beta - k)
        branches.append(_make_branch(lo, hi, (-float(k), beta), image=image))
    return IntervalMap("beta", {"beta": beta}, tuple(branches), beta, 0.0, True)


def linear_noise(slope: int, eps: float = 0.0) -> IntervalMap:
    """T(x) = slope * x + eps mod 1 with integer slope >= 2 (additive noise on the circle)."""
    slope = int(slope)
    eps = float(eps)
    if slope < 2:
        raise MapError("slope must be an integer >= 2")
    if not -1.0 < eps < 1.0:
        raise MapError("eps must lie in (-1, 1)")
    # continuity pieces of frac(slope*x + eps): cut where slope*x + eps crosses integers
    cuts = [0.0]
    m_lo = math.floor(eps) + 1
    m_hi = math.ceil(slope + eps) - 1
    for m in range(m_lo, m_hi + 1):
        x = (m - eps) / slope
        if 0.0 < x < 1.0:
            cuts.append(x)
    cuts.append(1.0)
    eps_wrapped = eps - math.floor(eps)
    pieces = [(lo, hi) for lo, hi in zip(cuts[:-1], cuts[1:]) if hi > lo]
    # seam values are known exactly: with a fractional shift resolvable on the
    # cut grid (slope+1 pieces) the first piece covers [frac(eps), 1), interior
    # pieces are full, and the last wraps back to [0, frac(eps)); otherwise the
    # wrap is below resolution and every piece is full
    partial = len(pieces) == slope + 1 and eps_wrapped > 0.0
    branches = []
    for j, (lo, hi) in enumerate(pieces):
        mid = 0.5 * (lo + hi)
        shift = math.floor(slope * mid + eps)
        if partial:
            lo_v = eps_wrapped if j == 0 else 0.0
            hi_v = eps_wrapped if j == len(pieces) - 1 else 1.0
            image = (lo_v, hi_v)
        else:
            image = (0.0, 1.0)
        branches.append(_make_branch(lo, hi, (eps - shift, float(slope)),
                                     image=image))
    return IntervalMap(
        "linear_noise", {"slope": slope, "eps": eps}, tuple(branches), float(slope), 0.0, True
    )


def doubling() -> IntervalMap:
    return linear_noise(2, 0.0)


def golden_beta() -> IntervalMap:
    return beta_map(_GOLDEN)


def piecewise_c2(branch_specs: Sequence, eps: float = 0.0) -> IntervalMap:
    """Piecewise-C2 interval map with local additive noise.

    ``branch_specs`` is a sequence of (left_endpoint, coeffs, sign_rule)
    entries; coefficients are global polynomial coefficients of degree <= 3
    and ``sign_rule`` is one of "auto", "+", "-", "none".  The shift eps is
    applied per branch with the sign chosen so the branch image stays inside
    the unit interval; if neither sign keeps it inside (or the requested sign
    fails), that branch is left unmoved.
    """
    eps = float(eps)
    specs = []
    for s in branch_specs:
        if isinstance(s, dict):
            specs.append((float(s["left"]), tuple(s["coeffs"]), s.get("sign_rule", "auto")))
        else:
            left, coeffs = s[0], tuple(s[1])
            rule = s[2] if len(s) > 2 else "auto"
            specs.append((float(left), coeffs, rule))
    specs.sort(key=lambda t: t[0])
    if not specs or specs[0][0] != 0.0:
        raise MapError("piecewise_c2 branches must cover [0,1) starting at 0")
    lefts = [s[0] for s in specs] + [1.0]
    branches = []
    signs = []
    for (left, coeffs, rule), hi in zip(specs, lefts[1:]):
        if hi <= left:
            raise MapError("piecewise_c2 branch domains must be nondegenerate and sorted")
        base = _make_branch(left, hi, coeffs)
        signs.append(_resolve_noise_sign(base, eps, rule))
    for (left, coeffs, rule), hi, sgn in zip(specs, lefts[1:], signs):
        c = list(coeffs) + [0.0] * (4 - len(coeffs))
        c[0] += sgn * eps
        branches.append(_make_branch(left, hi, tuple(c)))
    expansion = min(b.min_slope for b in branches)
    distortion = max(b.max_curve / b.min_slope for b in branches)
    if expansion <= 1.0:
        raise MapError("piecewise_c2 map must be uniformly expanding (inf |T'| > 1)")
    return IntervalMap(
        "piecewise_c2",
        {
            "branches": [
                {"left": s[0], "coeffs": list(s[1]), "sign_rule": s[2]} for s in specs
            ],
            "eps": eps,
        },
        tuple(branches),
        expansion,
        distortion,
        False,
    )


def _resolve_noise_sign(branch: Branch, eps: float, rule: str) -> float:
    """Pick the shift sign keeping the branch image inside [0,1]; 0 if impossible."""
    if eps == 0.0 or rule == "none":
        return 0.0
    lo_img, hi_img = branch.image()

    def fits(s):
        return lo_img + s * eps >= 0.0 and hi_img + s * eps <= 1.0

    if rule == "+":
        return 1.0 if fits(1.0) else 0.0
    if rule == "-":
        return -1.0 if fits(-1.0) else 0.0
    if rule == "auto":
        if fits(1.0):
            return 1.0
        if fits(-1.0):
            return -1.0
        return 0.0
    raise MapError(f"unknown noise sign rule {rule!r}")


def eval_map(m: IntervalMap, x: float) -> float:
    """Apply the map at one point; branch selected by binary search on breakpoints."""
    if not 0.0 <= x < 1.0:
        raise MapError("x must lie in [0,1)")
    return m.eval(x)


def branch_inverses(m: IntervalMap, y: float) -> list[tuple[float, float]]:
    """All preimages of y with |T'| at the preimage, ordered by position.

    The list may be shorter than the branch count (non-onto branches of
    beta maps are skipped when y falls outside their image).
    """
    if not 0.0 <= y < 1.0:
        raise MapError("y must lie in [0,1)")
    out = []
    for b in m.branches:
        lo_img, hi_img = b.image()
        # images are half-open on the side delivered by the open domain end
        if b.increasing:
            inside = lo_img <= y < hi_img
        else:
            inside = lo_img < y <= hi_img
        if not inside:
            continue
        x = float(b.inverse(y))
        x = min(max(x, b.lo), np.nextafter(b.hi, b.lo))
        out.append((x, abs(float(b.deriv(x)))))
    out.sort(key=lambda t: t[0])
    return out


@dataclass(frozen=True)
class ParameterSchedule:
    """Algebraically decaying parameter sequence param_k = limit + amplitude * k**(-exponent).

    ``frozen`` mode pins param_k = limit.  Decay exponents <= 1/2 fall outside
    the convergence hypothesis used by the sequential theory; such schedules
    still evaluate but carry ``outside_hypothesis=True`` and emit a warning.
    """

    limit: float
    amplitude: float = 0.0
    exponent: float = 1.0
    mode: str = "additive"
    outside_hypothesis: bool = field(init=False, default=False)

    def __post_init__(self):
        if self.mode not in ("additive", "frozen"):
            raise ValueError("schedule mode must be 'additive' or 'frozen'")
        if self.amplitude < 0.0:
            raise ValueError("schedule amplitude must be >= 0")
        if self.mode == "additive" and self.amplitude > 0.0 and self.exponent <= 0.5:
            object.__setattr__(self, "outside_hypothesis", True)
            warnings.warn(
                "schedule exponent <= 1/2 is outside the algebraic-convergence hypothesis",
                stacklevel=2,
            )

    def param(self, k: int) -> float:
        if k < 1:
            raise ValueError("schedule index k must be >= 1")
        if self.mode == "frozen" or self.amplitude == 0.0:
            return self.limit
        return self.limit + self.amplitude * float(k) ** (-self.exponent)


def schedule_param(schedule: ParameterSchedule, k: int) -> float:
    return schedule.param(k)


_MAP_BUILDERS: dict[str, Callable[..., IntervalMap]] = {}


def _register_family(kind, builder):
    _MAP_BUILDERS[kind] = builder


_register_family("beta", lambda fixed, p: beta_map(p))
_register_family("linear_noise", lambda fixed, p: linear_noise(fixed["slope"], p))
_register_family("piecewise_c2", lambda fixed, p: piecewise_c2(fixed["branches"], p))


@dataclass(frozen=True, eq=False)
class SequentialSystem:
    """A map family template plus a parameter schedule: T_k = family(param_k).

    For kind "beta" the schedule drives beta itself; for "linear_noise" and
    "piecewise_c2" it drives the additive noise eps.
    """

    kind: str
    fixed: dict
    schedule: ParameterSchedule
    horizon: int

    def __post_init__(self):
        if self.kind not in _MAP_BUILDERS:
            raise MapError(f"unknown map family kind {self.kind!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        object.__setattr__(self, "_memo", {})
        # probe both ends of the schedule so invalid systems fail fast
        self.map_at(1)
        self.map_at(self.horizon)

    def map_at(self, k: int) -> IntervalMap:
        if not 1 <= k <= self.horizon:
            raise ValueError(f"k must lie in [1, horizon={self.horizon}]")
        p = self.schedule.param(k)
        memo = self._memo
        m = memo.get(p)
        if m is None:
            m = _MAP_BUILDERS[self.kind](self.fixed, p)
            if len(memo) < 64:
                memo[p] = m
        return m

    @property
    def frozen(self) -> bool:
        return self.schedule.mode == "frozen" or self.schedule.amplitude == 0.0

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "parameters": dict(self.fixed),
            "schedule": {
                "limit": self.schedule.limit,
                "amplitude": self.schedule.amplitude,
                "exponent": self.schedule.exponent,
                "mode": self.schedule.mode,
            },
            "horizon": self.horizon,
        }


def beta_system(limit, amplitude, exponent, horizon, mode="additive") -> SequentialSystem:
    return SequentialSystem(
        "beta", {}, ParameterSchedule(limit, amplitude, exponent, mode), horizon
    )


def doubling_system(horizon: int) -> SequentialSystem:
    return SequentialSystem(
        "linear_noise", {"slope": 2}, ParameterSchedule(0.0, 0.0, 1.0, "frozen"), horizon
    )


def stationary_system(m: IntervalMap, horizon: int) -> SequentialSystem:
    """Wrap a single map as a frozen sequential system."""
    if m.kind == "beta":
        sched = ParameterSchedule(m.params["beta"], 0.0, 1.0, "frozen")
        return SequentialSystem("beta", {}, sched, horizon)
    if m.kind == "linear_noise":
        sched = ParameterSchedule(m.params["eps"], 0.0, 1.0, "frozen")
        return SequentialSystem("linear_noise", {"slope": m.params["slope"]}, sched, horizon)
    sched = ParameterSchedule(m.params["eps"], 0.0, 1.0, "frozen")
    return SequentialSystem("piecewise_c2", {"branches": m.params["branches"]}, sched, horizon)


def sequential_orbit(system: SequentialSystem, x0: float, n: int) -> list[float]:
    """Orbit points T_1 x0, T_2 T_1 x0, ..., up to n compositions (mod 1 each step)."""
    if n > system.horizon:
        raise ValueError("n exceeds the system horizon")
    x = float(x0)
    out = []
    for k in range(1, n + 1):
        x = system.map_at(k).eval(x)
        out.append(x)
    return out


@dataclass(frozen=True, eq=False)
class Observable:
    """Observable on [0,1) with exact cell-average discretization.

    Catalog kinds: "trig" cos(2*pi*frequency*x + phase), "indicator" of
    [l, r), "sawtooth" x, and "grid" (piecewise constant on a fixed grid).
    When ``centered`` the exact Lebesgue mean (cell-sum for grid kind) is
    subtracted, so the discretized integral vanishes to rounding.
    """

    kind: str
    params: dict
    centered: bool = True
    holder_norm_bound: float = 0.0

    def __post_init__(self):
        if self.kind not in ("trig", "indicator", "sawtooth", "grid"):
            raise ValueError(f"unknown observable kind {self.kind!r}")
        if self.holder_norm_bound == 0.0:
            object.__setattr__(self, "holder_norm_bound", self._default_bv_bound())
        if self.kind == "grid":
            vals = np.asarray(self.params["values"], dtype=float)
            vals = np.array(vals, copy=True)
            vals.setflags(write=False)
            self.params["values"] = vals

    def _default_bv_bound(self) -> float:
        if self.kind == "trig":
            return 1.0 + 4.0 * abs(self.params.get("frequency", 1.0))
        if self.kind == "indicator":
            l, r = self.params["l"], self.params["r"]
            return (r - l) + 2.0
        if self.kind == "sawtooth":
            return 1.5
        vals = np.asarray(self.params["values"], dtype=float)
        return float(np.mean(np.abs(vals)) + np.abs(np.diff(vals)).sum())

    def raw_integral(self) -> float:
        """Exact Lebesgue integral of the uncentered observable."""
        if self.kind == "trig":
            f = self.params.get("frequency", 1.0)
            ph = self.params.get("phase", 0.0)
            return (math.sin(2.0 * math.pi * f + ph) - math.sin(ph)) / (2.0 * math.pi * f)
        if self.kind == "indicator":
            return self.params["r"] - self.params["l"]
        if self.kind == "sawtooth":
            return 0.5
        return float(np.mean(self.params["values"]))

    def _offset(self) -> float:
        return self.raw_integral() if self.centered else 0.0

    def value(self, x):
        """Pointwise evaluation (vectorized)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "trig":
            f = self.params.get("frequency", 1.0)
            ph = self.params.get("phase", 0.0)
            v = np.cos(2.0 * math.pi * f * x + ph)
        elif self.kind == "indicator":
            l, r = self.params["l"], self.params["r"]
            v = ((x >= l) & (x < r)).astype(float)
        elif self.kind == "sawtooth":
            v = x.copy()
        else:
            vals = self.params["values"]
            n0 = len(vals)
            v = vals[np.minimum((x * n0).astype(np.int64), n0 - 1)]
        return v - self._offset()

    def cell_values(self, N: int) -> np.ndarray:
        """Exact cell averages on the uniform N-cell grid."""
        if self.kind == "trig":
            f = self.params.get("frequency", 1.0)
            ph = self.params.get("phase", 0.0)
            mids = (np.arange(N) + 0.5) / N
            u = math.pi * f / N
            damp = math.sin(u) / u if u != 0.0 else 1.0
            v = damp * np.cos(2.0 * math.pi * f * mids + ph)
        elif self.kind == "indicator":
            l, r = self.params["l"], self.params["r"]
            edges = np.arange(N + 1) / N
            overlap = np.minimum(edges[1:], r) - np.maximum(edges[:-1], l)
            v = np.clip(overlap, 0.0, None) * N
        elif self.kind == "sawtooth":
            v = (np.arange(N) + 0.5) / N
        else:
            vals = self.params["values"]
            n0 = len(vals)
            if N == n0:
                v = np.array(vals, dtype=float)
            elif N % n0 == 0:
                v = np.repeat(vals, N // n0).astype(float)
            elif n0 % N == 0:
                v = np.asarray(vals, dtype=float).reshape(N, n0 // N).mean(axis=1)
            else:
                raise ValueError("grid observable resolution incompatible with N")
        return v - self._offset()

    def descriptor(self) -> dict:
        p = dict(self.params)
        if self.kind == "grid":
            p["values"] = [float(v) for v in p["values"]]
        return {
            "kind": self.kind,
            "parameters": p,
            "centered": self.centered,
            "holder_norm_bound": self.holder_norm_bound,
        }


def trig_observable(frequency=1.0, phase=0.0, centered=True) -> Observable:
    return Observable("trig", {"frequency": float(frequency), "phase": float(phase)}, centered)


def indicator_observable(l: float, r: float, centered=False) -> Observable:
    if not 0.0 <= l < r <= 1.0:
        raise ValueError("indicator interval must satisfy 0 <= l < r <= 1")
    return Observable("indicator", {"l": float(l), "r": float(r)}, centered)


def sawtooth_observable(centered=True) -> Observable:
    return Observable("sawtooth", {}, centered)


def grid_observable(values, centered=False) -> Observable:
    return Observable("grid", {"values": np.asarray(values, dtype=float)}, centered)


@dataclass(frozen=True)
class TargetSequence:
    """Nested shrinking targets A_n = [anchor, anchor + min(1, scale * n**(-gamma))).

    gamma outside (0,1) is outside the paper's hypothesis; construction still
    succeeds but flags it (and warns), matching the exploratory-run contract.
    """

    gamma: float
    scale: float = 1.0
    anchor: float = 0.0
    outside_hypothesis: bool = field(init=False, default=False)

    def __post_init__(self):
        if self.scale < 0.0:
            raise ValueError("target scale must be >= 0")
        if not 0.0 <= self.anchor < 1.0:
            raise ValueError("anchor must lie in [0,1)")
        if not 0.0 < self.gamma < 1.0:
            object.__setattr__(self, "outside_hypothesis", True)
            warnings.warn("target decay exponent outside (0,1)", stacklevel=2)

    def radius(self, n: int) -> float:
        if n < 1:
            raise ValueError("target index must be >= 1")
        return min(1.0, self.scale * float(n) ** (-self.gamma))

    def interval(self, n: int) -> tuple[float, float]:
        r = self.radius(n)
        return self.anchor, min(self.anchor + r, 1.0)

    def indicator(self, n: int) -> Observable:
        l, r = self.interval(n)
        if r <= l:
            r = l  # empty target
        return Observable("indicator", {"l": l, "r": max(r, l)}, centered=False)

    def descriptor(self) -> dict:
        return {"gamma": self.gamma, "scale": self.scale, "anchor": self.anchor}


def map_from_descriptor(d: dict) -> IntervalMap:
    """Rebuild a map from its JSON descriptor ({"kind": ..., "parameters": ...})."""
    kind = d["kind"]
    p = d["parameters"]
    if kind == "beta":
        return beta_map(p["beta"])
    if kind == "linear_noise":
        return linear_noise(p["slope"], p["eps"])
    if kind == "piecewise_c2":
        return piecewise_c2(p["branches"], p["eps"])
    raise MapError(f"unknown map kind {kind!r}")


def system_from_descriptor(d: dict) -> SequentialSystem:
    s = d["schedule"]
    sched = ParameterSchedule(s["limit"], s.get("amplitude", 0.0), s.get("exponent", 1.0), s.get("mode", "additive"))
    return SequentialSystem(d["kind"], dict(d.get("parameters", {})), sched, d["horizon"])


def observable_from_descriptor(d: dict) -> Observable:
    p = dict(d["parameters"])
    if d["kind"] == "grid":
        p["values"] = np.asarray(p["values"], dtype=float)
    return Observable(d["kind"], p, d.get("centered", True), d.get("holder_norm_bound", 0.0))

"""Moduli of continuity, the singular Dini integral and the smaller modulus psi.

A modulus here is a concave, strictly increasing function ``phi`` with
``phi(0) = 0``.  Three families are supported:

``power``    phi(t) = t**beta, 0 < beta <= 1
``tlog2``    phi(t) = t*log(t)**2 on (0, e**-4], continued by its tangent line
``sampled``  piecewise-linear through user samples, with a power-law germ
             below the first sample and the last slope beyond the last one

The integral of ``1/phi`` over ``[0, x]`` is enclosed by the dyadic shell
sandwich: shell endpoints ``a_j = phi^{-1}(2**-j)``, and inside every shell
the convexity of ``1/phi`` gives midpoint-rule lower and trapezoid-rule upper
bounds on geometrically refined partitions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import lambertw

from .errors import BudgetError, DomainError, RangeError

TLOG2_GLUE = math.exp(-4.0)
_EPS = np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class Modulus:
    kind: str
    params: tuple = ()
    domain_cap: float = math.inf
    # sampled family only: knots and values, strictly increasing
    ts: np.ndarray | None = field(default=None, repr=False)
    vals: np.ndarray | None = field(default=None, repr=False)

    # -- constructors -------------------------------------------------------

    @classmethod
    def power(cls, beta: float) -> "Modulus":
        if not 0.0 < beta <= 1.0:
            raise DomainError(f"power exponent must lie in (0, 1], got {beta}")
        return cls("power", (float(beta),))

    @classmethod
    def tlog2(cls) -> "Modulus":
        return cls("tlog2", ())

    @classmethod
    def sampled(cls, ts, vals, *, check_density: bool = True) -> "Modulus":
        ts = np.asarray(ts, dtype=float)
        vals = np.asarray(vals, dtype=float)
        if ts.ndim != 1 or ts.shape != vals.shape or ts.size < 2:
            raise DomainError("samples must be two 1-d arrays of equal length >= 2")
        if ts[0] == 0.0:
            if vals[0] != 0.0:
                raise DomainError("phi(0) must be 0")
            ts, vals = ts[1:], vals[1:]
        if np.any(ts <= 0) or np.any(np.diff(ts) <= 0) or np.any(np.diff(vals) <= 0):
            raise DomainError("samples must be strictly increasing in t and phi")
        if np.any(vals <= 0):
            raise DomainError("phi must be positive for t > 0")
        if check_density:
            decades = math.log10(ts[-1] / ts[0])
            if decades > 0 and ts.size / decades < 64:
                raise DomainError("sampled modulus needs at least 64 samples per decade")
        slopes = np.diff(vals) / np.diff(ts)
        if np.any(np.diff(slopes) > 1e-12 * np.abs(slopes[:-1])):
            raise DomainError("samples are not concave")
        if slopes[0] > vals[0] / ts[0] * (1 + 1e-12):
            raise DomainError("samples are not concave through the origin")
        return cls("sampled", (), math.inf, ts, vals)

    # -- helpers for the sampled family --------------------------------------

    def _germ(self):
        """Exponent and coefficient of the power germ c*t**g below ts[0]."""
        t0, v0 = self.ts[0], self.vals[0]
        s0 = (self.vals[1] - v0) / (self.ts[1] - t0)
        g = s0 * t0 / v0
        return g, v0 / t0**g

    # -- evaluation -----------------------------------------------------------

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.domain_cap):
            raise DomainError("t outside the domain of the modulus")
        out = self._eval(t)
        return float(out) if out.ndim == 0 else out

    def _eval(self, t):
        if self.kind == "power":
            return np.power(t, self.params[0])
        if self.kind == "tlog2":
            out = np.empty_like(t)
            small = t <= TLOG2_GLUE
            ts = t[small]
            with np.errstate(divide="ignore", invalid="ignore"):
                lg = np.log(ts)
                out[small] = np.where(ts > 0, ts * lg * lg, 0.0)
            out[~small] = 16.0 * TLOG2_GLUE + 8.0 * (t[~small] - TLOG2_GLUE)
            return out
        if self.kind == "sampled":
            shape = np.shape(t)
            t = np.atleast_1d(t)
            ts, vs = self.ts, self.vals
            out = np.interp(t, ts, vs)
            lo = t < ts[0]
            g, c = self._germ()
            out[lo] = c * np.power(t[lo], g)
            hi = t > ts[-1]
            s_last = (vs[-1] - vs[-2]) / (ts[-1] - ts[-2])
            out[hi] = vs[-1] + s_last * (t[hi] - ts[-1])
            return out.reshape(shape)
        raise DomainError(f"unknown modulus kind {self.kind!r}")

    def inverse(self, v):
        v = np.asarray(v, dtype=float)
        if np.any(v < 0) or np.any(~np.isfinite(v)):
            raise RangeError("value outside the range of the modulus")
        if math.isfinite(self.domain_cap) and np.any(v > self._eval(np.float64(self.domain_cap))):
            raise RangeError("value outside the range of the modulus")
        out = self._inverse(v)
        return float(out) if out.ndim == 0 else out

    def _inverse(self, v):
        if self.kind == "power":
            return np.power(v, 1.0 / self.params[0])
        if self.kind == "tlog2":
            out = np.empty_like(v)
            phi_glue = 16.0 * TLOG2_GLUE
            small = v <= phi_glue
            vs = v[small]
            with np.errstate(divide="ignore", invalid="ignore"):
                w = lambertw(-np.sqrt(vs) / 2.0, -1).real
                t = np.where(vs > 0, np.exp(2.0 * w), 0.0)
                # one Newton step in log space polishes lambertw's rounding
                lg = np.log(t)
                f = t * lg * lg - vs
                df = lg * (lg + 2.0)
                t = np.where(vs > 0, t - f / df, 0.0)
            out[small] = t
            out[~small] = TLOG2_GLUE + (v[~small] - phi_glue) / 8.0
            return out
        if self.kind == "sampled":
            shape = np.shape(v)
            v = np.atleast_1d(v)
            ts, vs = self.ts, self.vals
            out = np.interp(v, vs, ts)
            lo = v < vs[0]
            g, c = self._germ()
            out[lo] = np.power(v[lo] / c, 1.0 / g)
            hi = v > vs[-1]
            s_last = (vs[-1] - vs[-2]) / (ts[-1] - ts[-2])
            out[hi] = ts[-1] + (v[hi] - vs[-1]) / s_last
            return out.reshape(shape)
        raise DomainError(f"unknown modulus kind {self.kind!r}")

    # -- integral germ --------------------------------------------------------

    def tail_integral(self, t: float):
        """Closed-form value of the integral of 1/phi over [0, t], if known."""
        if self.kind == "power":
            b = self.params[0]
            return math.inf if b >= 1.0 else t ** (1.0 - b) / (1.0 - b)
        if self.kind == "tlog2" and t <= TLOG2_GLUE:
            return 0.0 if t == 0 else -1.0 / math.log(t)
        if self.kind == "sampled" and t <= self.ts[0]:
            g, c = self._germ()
            return t ** (1.0 - g) / (c * (1.0 - g))
        return None

    def antiderivative(self, t: float):
        """Closed-form integral of 1/phi over [0, t], or None."""
        t = float(t)
        if self.kind == "power":
            b = self.params[0]
            return math.inf if b >= 1.0 else t ** (1.0 - b) / (1.0 - b)
        if self.kind == "tlog2":
            if t <= TLOG2_GLUE:
                return 0.0 if t == 0 else -1.0 / math.log(t)
            base = -1.0 / math.log(TLOG2_GLUE)
            return base + math.log1p((t - TLOG2_GLUE) / (2.0 * TLOG2_GLUE)) / 8.0
        if self.kind == "sampled":
            return _linear_pieces_integral(self, 0.0, t)
        return None

    def holder_ceiling(self, t: float):
        """Exponent g < 1 with s**-g * phi(s) non-increasing on (0, t], or None."""
        if self.kind == "power":
            b = self.params[0]
            return b if b < 1.0 else None
        if self.kind == "sampled" and t <= self.ts[0]:
            return self._germ()[0]
        return None

    @property
    def spec(self) -> str:
        if self.kind == "power":
            return f"power:{self.params[0]!r}"
        if self.kind == "tlog2":
            return "tlog2"
        return "sampled"


def evaluate(m: Modulus, t):
    return m(t)


def inverse(m: Modulus, v):
    return m.inverse(v)


def parse_modulus(spec: str) -> Modulus:
    """Parse ``power:<beta>``, ``tlog2`` or ``file:<path>`` (CSV rows ``t,phi``)."""
    if spec == "tlog2":
        return Modulus.tlog2()
    kind, _, arg = spec.partition(":")
    if kind == "power" and arg:
        return Modulus.power(float(arg))
    if kind == "file" and arg:
        data = np.loadtxt(arg, delimiter=",", ndmin=2, comments="#")
        return Modulus.sampled(data[:, 0], data[:, 1])
    raise DomainError(f"bad modulus spec {spec!r}")


# ---------------------------------------------------------------------------
# Dini integral enclosures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiniEnclosure:
    lower: float
    upper: float
    terms_used: int

    def __post_init__(self):
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))
        object.__setattr__(self, "terms_used", int(self.terms_used))

    @property
    def mid(self) -> float:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> float:
        return self.upper - self.lower


def _recip(m: Modulus, s):
    return 1.0 / m._eval(s)


def _sandwich(m: Modulus, left, right, level: int):
    """Midpoint/trapezoid sums of 1/phi over each [left_i, right_i].

    Every interval is split geometrically into 2**level pieces.  Convexity of
    1/phi makes the midpoint sum a lower and the trapezoid sum an upper bound.
    """
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    pieces = 2**level
    frac = np.arange(pieces + 1) / pieces
    nodes = left[:, None] * (right / left)[:, None] ** frac[None, :]
    nodes[:, 0] = left
    nodes[:, -1] = right
    h = np.diff(nodes, axis=1)
    f = _recip(m, nodes)
    lo = np.sum(h * _recip(m, 0.5 * (nodes[:, 1:] + nodes[:, :-1])), axis=1)
    hi = np.sum(h * 0.5 * (f[:, 1:] + f[:, :-1]), axis=1)
    pad = 64 * _EPS
    return lo * (1 - pad), hi * (1 + pad)


def _linear_pieces_integral(m: Modulus, a: float, b: float) -> float:
    """Exact integral of 1/phi over [a, b] for a piecewise-linear modulus."""
    ts = m.ts
    inner = ts[(ts > a) & (ts < b)]
    nodes = np.concatenate([[a], inner, [b]])
    vals = m._eval(nodes)
    dv = np.diff(vals)
    dt = np.diff(nodes)
    total = 0.0
    for i in range(dt.size):
        if nodes[i] < ts[0]:
            continue
        # on a linear piece: integral = dt * log(v1/v0) / dv
        total += dt[i] * math.log1p(dv[i] / vals[i]) / dv[i]
    if a < ts[0]:
        g, c = m._germ()
        top = min(b, ts[0])
        total += (top ** (1 - g) - a ** (1 - g)) / (c * (1 - g))
    return total


def _closed_enclosure(m: Modulus, a: float, b: float):
    """Enclosure from the closed-form antiderivative, padded for rounding."""
    if m.kind == "sampled":
        val = _linear_pieces_integral(m, a, b)
        pad = 64 * _EPS * (1 + int(np.count_nonzero((m.ts > a) & (m.ts < b)))) * val
        return DiniEnclosure(val - pad, val + pad, 0)
    fa = m.antiderivative(a)
    fb = m.antiderivative(b)
    if fa is None or fb is None or not math.isfinite(fb):
        return None
    val = fb - fa
    pad = 16 * _EPS * (abs(fa) + abs(fb))
    return DiniEnclosure(max(val - pad, 0.0), val + pad, 0)


def shell_enclosure(m: Modulus, a: float, b: float, rtol: float = 1e-13, max_level: int = 22,
                    method: str = "auto"):
    """Enclose the integral of 1/phi over [a, b] with 0 < a < b.

    ``method="auto"`` uses the family's closed form when there is one;
    ``method="sandwich"`` always refines the convexity sandwich.
    """
    if not 0.0 < a < b:
        raise DomainError("shell endpoints must satisfy 0 < a < b")
    if method == "auto":
        enc = _closed_enclosure(m, a, b)
        if enc is not None:
            return enc
    lo = hi = None
    for level in range(2, max_level + 1):
        lo, hi = _sandwich(m, [a], [b], level)
        lo, hi = float(lo[0]), float(hi[0])
        if hi - lo <= rtol * lo:
            return DiniEnclosure(lo, hi, 2**level)
    raise BudgetError("shell sandwich did not reach the requested tolerance",
                      DiniEnclosure(lo, hi, 2**max_level))


def _shell_index(m: Modulus, x: float) -> int:
    """Smallest j with a_j <= x."""
    j = math.ceil(-math.log2(float(m._eval(np.float64(x)))))
    while m._inverse(np.float64(2.0**-j)) > x:
        j += 1
    while j > -1074 and m._inverse(np.float64(2.0 ** -(j - 1))) <= x:
        j -= 1
    return j


def _tail_enclosure(m: Modulus, t: float, mode: str):
    if t == 0:
        return 0.0, 0.0
    if mode == "auto":
        exact = m.tail_integral(t)
        if exact is not None:
            return exact * (1 - 8 * _EPS), exact * (1 + 8 * _EPS)
    g = m.holder_ceiling(t)
    phi_t = float(m._eval(np.float64(t)))
    if g is None:
        return t / phi_t, math.inf
    return t / phi_t, t / (phi_t * (1.0 - g))


def dini_enclosure(m: Modulus, x: float, tol: float = 1e-10, *, coarse: bool = False,
                   tail: str = "auto", method: str = "auto", max_level: int = 22,
                   max_shells: int = 4000) -> DiniEnclosure:
    """Two-sided enclosure of the integral of ds/phi(s) over [0, x].

    ``method="auto"`` returns the closed form of the family, padded for
    rounding, when there is one.  Otherwise, or with ``method="sandwich"``,
    the integral is split at the shell ends a_j = phi^{-1}(2^-j) and each
    shell is enclosed by the convexity sandwich.  ``coarse=True`` returns the
    plain dyadic-shell sums.  ``tail="auto"`` uses the closed-form germ below
    the deepest shell when one exists; ``tail="bound"`` uses the
    Holder-ceiling bound instead.
    """
    x = float(x)
    if x < 0 or x > m.domain_cap:
        raise DomainError("x outside the domain of the modulus")
    if x == 0.0:
        return DiniEnclosure(0.0, 0.0, 0)
    if m.tail_integral(x) == math.inf:
        raise BudgetError("integral of 1/phi diverges at 0",
                          DiniEnclosure(x / float(m._eval(np.float64(x))), math.inf, 0))
    if method == "auto" and not coarse and tail == "auto":
        enc = _closed_enclosure(m, 0.0, x)
        if enc is not None:
            return enc
    j0 = _shell_index(m, x)

    closed = tail == "auto" and m.tail_integral(x) is not None
    ends = [x]
    j = j0
    while True:
        a = float(m._inverse(np.float64(2.0**-j)))
        if a <= 0.0:
            break
        if a < ends[-1]:
            ends.append(a)
        t_lo, t_hi = _tail_enclosure(m, a, tail)
        depth = j - j0
        if coarse:
            if a < 1e-300 or (t_hi - t_lo) <= 1e-3 * tol or depth >= max_shells:
                break
        elif closed and depth >= 2:
            break
        elif (t_hi - t_lo) <= 0.25 * tol or depth >= max_shells:
            break
        j += 1
    ends = np.array(ends)
    t_lo, t_hi = _tail_enclosure(m, float(ends[-1]), tail)
    if len(ends) == 1:
        return DiniEnclosure(float(t_lo), float(t_hi), 0)

    right, left = ends[:-1], ends[1:]
    if coarse:
        # level of the shell [left_i, right_i]: phi(right) lies in (2^-(j+1), 2^-j]
        phi_r = m._eval(right)
        phi_l = m._eval(left)
        lo = np.sum((right - left) / phi_r)
        hi = np.sum((right - left) / phi_l)
        pad = 64 * _EPS
        return DiniEnclosure(float(lo * (1 - pad) + t_lo), float(hi * (1 + pad) + t_hi), len(left))

    best = None
    for level in range(1, max_level + 1):
        lo, hi = _sandwich(m, left, right, level)
        enc = DiniEnclosure(float(np.sum(lo)) + t_lo, float(np.sum(hi)) + t_hi, len(left) * 2**level)
        best = enc
        if enc.width <= tol:
            return enc
        if not math.isfinite(t_hi):
            break
    raise BudgetError("Dini enclosure did not converge within the shell budget", best)


# ---------------------------------------------------------------------------
# Condition report
# ---------------------------------------------------------------------------


@dataclass
class ConditionReport:
    alpha: float
    checks: dict

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())


def _grid(lo=1e-10, hi=1.0, count=200):
    return np.geomspace(lo, hi, count, endpoint=False)


def validate(m: Modulus, alpha: float) -> ConditionReport:
    """Check increase/concavity, the Dini condition and the Holder floor."""
    t = _grid()
    v = m._eval(t)
    t0 = np.concatenate([[0.0], t])
    v0 = np.concatenate([[float(m._eval(np.float64(0.0)))], v])
    slopes = np.diff(v0) / np.diff(t0)
    ratio = t / v
    c1 = {
        "passed": bool(v0[0] == 0.0 and np.all(np.diff(v0) > 0)
                       and np.all(np.diff(slopes) <= 1e-12 * slopes[:-1])
                       and np.all(np.diff(ratio) >= -1e-12 * ratio[1:])),
        "detail": "phi(0)=0, strictly increasing, concave, t/phi(t) non-decreasing",
    }
    try:
        enc = dini_enclosure(m, 1.0, tol=1e-6)
        c2 = {"passed": math.isfinite(enc.upper), "lower": enc.lower, "upper": enc.upper}
    except BudgetError as exc:
        best = exc.best
        c2 = {"passed": False, "lower": None if best is None else best.lower,
              "upper": None if best is None else best.upper}
    g = np.power(t, -alpha) * v
    c3 = {"passed": bool(0.0 < alpha < 1.0 and np.all(np.diff(g) > 0)),
          "detail": "t^-alpha phi(t) strictly increasing on a 200-point grid in [1e-10, 1)"}
    return ConditionReport(alpha, {"increasing_concave": c1, "dini": c2, "holder_floor": c3})


# ---------------------------------------------------------------------------
# The smaller modulus psi
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PsiPiecewise:
    breakpoints: np.ndarray  # b_0 > b_1 > ... > b_K
    values: np.ndarray  # 2**-k
    slopes: np.ndarray  # 1/A''_k on [b_{k+1}, b_k]
    a: np.ndarray
    A: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    tail_enclosure: tuple

    @property
    def K(self) -> int:
        return len(self.breakpoints) - 1

    @cached_property
    def modulus(self) -> Modulus:
        """psi as a sampled modulus (power germ below b_K, last slope above b_0)."""
        return Modulus.sampled(self.breakpoints[::-1].copy(), self.values[::-1].copy(),
                               check_density=False)

    def __call__(self, t):
        return self.modulus(t)


def build_psi(m: Modulus, K: int = 40, *, max_terms: int = 400, tail_rtol: float = 1e-12) -> PsiPiecewise:
    """Piecewise-linear modulus psi with psi(b_k) = 2**-k and psi/phi -> 0."""
    if K < 8:
        raise DomainError("build_psi needs K >= 8")
    a_list = [float(m._inverse(np.float64(1.0)))]
    A_list = []
    J = None
    tail = None
    for k in range(max_terms):
        a_next = float(m._inverse(np.float64(2.0 ** -(k + 1))))
        if a_next <= 0.0:
            break
        a_list.append(a_next)
        A_list.append(2.0 ** (k + 1) * (a_list[k] - a_next))
        if k + 1 >= K + 20:
            # sum_{l>=J} A_l lies in [I(a_J), 2 I(a_J)]
            enc_t = _tail_enclosure(m, a_next, "auto")
            t_lo, t_hi = enc_t[0], 2.0 * enc_t[1]
            head = sum(A_list)
            if t_hi <= tail_rtol * head:
                J = k + 1
                tail = (t_lo, t_hi)
                break
    if J is None:
        head = sum(A_list) if A_list else 0.0
        raise BudgetError("psi tail not below 1e-12 of the head within the term budget",
                          best={"terms": len(A_list), "head": head})

    a = np.array(a_list[: J + 1])
    A = np.array(A_list[:J])
    t_mid = 0.5 * (tail[0] + tail[1])
    S = np.concatenate([np.cumsum(A[::-1])[::-1], [0.0]]) + t_mid  # S_k = sum_{l>=k} A_l
    A1 = A / (np.sqrt(S[:-1]) + np.sqrt(S[1:]))
    A2 = np.minimum.accumulate(A1)
    d = A2 / 2.0 ** (np.arange(J) + 1)
    # terms beyond J contribute at most A2[-1] / 2**J; included at half weight
    b_tail = 0.5 * A2[-1] / 2.0**J
    b = np.cumsum(d[::-1])[::-1] + b_tail
    b = b[: K + 1]
    values = 2.0 ** -np.arange(K + 1, dtype=float)
    slopes = 1.0 / A2[:K]
    return PsiPiecewise(b, values, slopes, a, A, A1, A2, tail)


def psi_ratio_profile(psi: PsiPiecewise, m: Modulus, K: int | None = None):
    """Samples of psi(t)/phi(t) at breakpoints and segment midpoints."""
    K = psi.K if K is None else min(K, psi.K)
    b = psi.breakpoints
    ts = []
    for k in range(K + 1):
        ts.append(b[k])
        if k < K:
            ts.append(0.5 * (b[k] + b[k + 1]))
    ts = np.array(ts)
    r = psi(ts) / m._eval(ts)
    return list(zip(ts.tolist(), np.atleast_1d(r).tolist()))

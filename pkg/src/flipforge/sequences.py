"""Capacity exponent N and the Cantor scales alpha_k, beta_k, lambda_k.

    alpha_k  = 2**-(N+k) * (1 + I(phi^{-1}(2**-(N+k))))
    beta_k   = (alpha_{k-1} - 2 alpha_k) / 4
             = 2**-(N+k+1) * integral of 1/phi over the shell
               [phi^{-1}(2**-(N+k)), phi^{-1}(2**-(N+k-1))]
    lambda_k = alpha_{k-1} / beta_k

where I(x) is the integral of 1/phi over [0, x] and N solves alpha_0 = 1.
Every quantity is held as an enclosure; the lemma checks use the outward
ends, never the midpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, CertificateError, InconsistencyError
from .modulus import Modulus, dini_enclosure, shell_enclosure


def capacity_enclosure(m: Modulus, u: float, tol: float) -> tuple[float, float]:
    """Enclosure of h(u) = u * (1 + I(phi^{-1}(u)))."""
    enc = dini_enclosure(m, float(m.inverse(u)), tol)
    return u * (1.0 + enc.lower), u * (1.0 + enc.upper)


def solve_capacity(m: Modulus, tol: float = 1e-12) -> float:
    """N > 0 with h(2**-N) = 1, by interval bisection on N.

    h is strictly increasing in u, so each bisection step only needs an
    enclosure of h tight enough to exclude 1; the quadrature tolerance is
    tightened only when the enclosure straddles 1.
    """
    lo_h, hi_h = capacity_enclosure(m, 1.0, 1e-8)
    if hi_h < 1.0:
        raise InconsistencyError("h(1) < 1: modulus data violate phi(0)=0/increase")
    n_lo, n_hi = 0.0, 1.0
    while capacity_enclosure(m, 2.0**-n_hi, 1e-6)[1] >= 1.0:
        n_lo, n_hi = n_hi, 2.0 * n_hi
        if n_hi > 1024:
            raise InconsistencyError("no capacity root found below N = 1024")
    while n_hi - n_lo > tol:
        mid = 0.5 * (n_lo + n_hi)
        u = 2.0**-mid
        qtol = 1e-4
        while True:
            try:
                lo, hi = capacity_enclosure(m, u, qtol)
            except BudgetError:
                return mid
            if lo > 1.0:
                n_lo = mid
                break
            if hi < 1.0:
                n_hi = mid
                break
            if qtol < 1e-14:
                return mid
            qtol *= 1e-3
    return 0.5 * (n_lo + n_hi)


@dataclass(frozen=True, eq=False)
class ScaleSequence:
    N: float
    alphas: np.ndarray  # index 0..K
    alpha_lo: np.ndarray
    alpha_hi: np.ndarray
    betas: np.ndarray  # index 0..K, entry 0 unused (nan)
    beta_lo: np.ndarray
    beta_hi: np.ndarray
    lambdas: np.ndarray  # index 0..K, entry 0 unused (nan)
    K_o: int
    enclosure_tol: float
    modulus: Modulus = field(repr=False)

    @property
    def K(self) -> int:
        return len(self.alphas) - 1

    def rows(self):
        """(k, alpha_k, beta_k, lambda_k) for k = 1..K."""
        return [(k, float(self.alphas[k]), float(self.betas[k]), float(self.lambdas[k]))
                for k in range(1, self.K + 1)]


def build_scales(m: Modulus, N: float, K: int = 40, tol: float = 1e-12) -> ScaleSequence:
    if K < 2:
        raise ValueError("build_scales needs K >= 2")
    ks = np.arange(K + 1)
    levels = 2.0 ** -(N + ks)
    xs = np.asarray(m.inverse(levels), dtype=float)

    a_lo = np.empty(K + 1)
    a_hi = np.empty(K + 1)
    for k in range(K + 1):
        enc = dini_enclosure(m, float(xs[k]), tol)
        a_lo[k] = levels[k] * (1.0 + enc.lower)
        a_hi[k] = levels[k] * (1.0 + enc.upper)
    alphas = 0.5 * (a_lo + a_hi)

    b_lo = np.full(K + 1, np.nan)
    b_hi = np.full(K + 1, np.nan)
    for k in range(1, K + 1):
        enc = shell_enclosure(m, float(xs[k]), float(xs[k - 1]), rtol=1e-13)
        b_lo[k] = enc.lower * levels[k] / 2.0
        b_hi[k] = enc.upper * levels[k] / 2.0
    betas = 0.5 * (b_lo + b_hi)
    # the difference formula must agree with the shell integral
    diff = (alphas[:-1] - 2.0 * alphas[1:]) / 4.0
    slack = (a_hi[:-1] - a_lo[:-1] + 2.0 * (a_hi[1:] - a_lo[1:])) / 4.0 + 1e-15
    bad = np.abs(diff - betas[1:]) > slack + (b_hi[1:] - b_lo[1:])
    if np.any(bad):
        k = int(np.argmax(bad)) + 1
        raise CertificateError(f"beta_{k}: difference formula disagrees with shell integral")
    if np.any(b_lo[1:] <= 0):
        raise CertificateError("2 alpha_{k+1} < alpha_k not certified")
    if np.any(b_lo[1:-1] <= b_hi[2:]):
        k = int(np.argmax(b_lo[1:-1] <= b_hi[2:])) + 1
        raise CertificateError(f"beta_{k} > beta_{k + 1} not certified")

    lambdas = np.full(K + 1, np.nan)
    lambdas[1:] = alphas[:-1] / betas[1:]

    ok = (a_lo > levels) & (a_hi < 2.0 * levels)
    K_o = K + 1
    for k in range(K, -1, -1):
        if not ok[k]:
            break
        K_o = k
    return ScaleSequence(float(N), alphas, a_lo, a_hi, betas, b_lo, b_hi, lambdas,
                         int(K_o), tol, m)


@dataclass
class Check:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass
class Certificate:
    checks: list
    ratio_constant: float
    ratio_bound: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self):
        return {
            "passed": self.passed,
            "ratio_constant": self.ratio_constant,
            "ratio_bound": self.ratio_bound,
            "checks": [vars(c) for c in self.checks],
        }


def _min_check(name, margins, detail=""):
    margins = np.asarray(margins, dtype=float)
    if margins.size == 0:
        return Check(name, True, math.inf, detail)
    worst = float(np.min(margins))
    return Check(name, bool(worst > 0), worst, detail)


def verify_scales(seq: ScaleSequence, m: Modulus) -> Certificate:
    """Re-check every scale inequality with outward margins."""
    K, N = seq.K, seq.N
    ks = np.arange(1, K + 1)
    checks = []
    checks.append(Check("alpha0_is_one", abs(seq.alphas[0] - 1.0) <= 1e-10,
                        1e-10 - abs(seq.alphas[0] - 1.0)))
    checks.append(_min_check("halving", seq.alpha_lo[:-1] - 2.0 * seq.alpha_hi[1:],
                             "2 alpha_{k+1} < alpha_k"))
    checks.append(_min_check("dyadic_cap", 1.0 - seq.alpha_hi * 2.0 ** np.arange(K + 1) + 1e-12,
                             "alpha_k <= 2^-k"))
    ko = seq.K_o
    if ko <= K:
        kk = np.arange(ko, K + 1)
        lv = 2.0 ** -(N + kk)
        est = np.minimum(seq.alpha_lo[kk] / lv - 1.0, 1.0 - seq.alpha_hi[kk] / (2.0 * lv))
        checks.append(_min_check("two_sided_from_K_o", est, f"K_o = {ko}"))
    else:
        checks.append(Check("two_sided_from_K_o", False, -math.inf, "no K_o within K"))
    checks.append(_min_check("beta_positive", seq.beta_lo[1:] / seq.beta_hi[1:]))
    checks.append(_min_check("beta_decreasing", seq.beta_lo[1:-1] / seq.beta_hi[2:] - 1.0))
    up = 2.0 ** (-(N + ks) + 1)
    gap_a = 1.0 - np.asarray(m(2.0 * seq.beta_hi[1:])) / up
    checks.append(_min_check("gap_a", gap_a, "phi(2 beta_k) < 2^{-(N+k)+1}"))
    gap_b = np.asarray(m(4.0 * seq.beta_lo[1:])) / (up / 2.0) - 1.0
    checks.append(_min_check("gap_b", gap_b + 0.0, "2^{-(N+k)} <= phi(4 beta_k)"))
    # a zero margin is allowed by the non-strict inequality only when exact
    if checks[-1].margin == 0.0:
        checks[-1].passed = True

    lam = seq.lambdas[1:]
    running = np.maximum.accumulate(lam)
    ratios = running[:-1] / lam[1:]
    C = float(max(1.0, np.max(ratios))) if ratios.size else 1.0
    # a priori bound max_{l <= K_o} lambda_l + 8
    head = lam[: max(1, min(ko, K))]
    bound = float(np.max(head)) + 8.0
    checks.append(Check("ratio_lemma", C <= bound, bound - C,
                        "sup_{l<k} lambda_l <= C lambda_k"))

    lhs = np.cumsum(2.0 ** ks * seq.betas[1:])
    rhs = 0.5 * (1.0 - 2.0 ** ks * seq.alphas[1:])
    width = np.cumsum(2.0 ** ks * (seq.beta_hi[1:] - seq.beta_lo[1:])) \
        + 2.0 ** ks * (seq.alpha_hi[1:] - seq.alpha_lo[1:]) + 1e-12
    checks.append(_min_check("remark_identity", width - np.abs(lhs - rhs),
                             "sum 2^k beta_k = (1 - 2^K alpha_K)/2"))
    return Certificate(checks, C, bound)


def cantor_volume(seq: ScaleSequence, n: int, K: int) -> float:
    return float((2.0**K * seq.alphas[K]) ** n)


def cantor_limit(seq: ScaleSequence, n: int) -> float:
    return float(2.0 ** (-seq.N * n))

"""Cantor-cube addressing and the depth-limited flip homeomorphism.

Generation-k cubes have edge alpha_k.  Inside a generation-k cube with
origin o, the 2^n children of edge alpha_{k+1} have per-axis origins
o + alpha_k/4 - alpha_{k+1}/2 and o + 3 alpha_k/4 - alpha_{k+1}/2.

Phi_K = R_{K-1} o ... o R_0, where R_l applies the box exchange of ratio
alpha_{l+1}/alpha_l in the generation-l cube containing the running point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .boxswap import BoxExchange, jacobians
from .errors import CapacityError, DomainError, StencilError
from .modulus import Modulus
from .sequences import ScaleSequence

INSIDE, TUBE, GAP = "inside", "tube", "gap"


@dataclass(frozen=True)
class CubeAddress:
    digits: tuple
    n: int

    def __len__(self):
        return len(self.digits)

    @property
    def generation(self) -> int:
        return len(self.digits)


@dataclass(frozen=True)
class CubeFrame:
    origin: np.ndarray
    edge: float

    @property
    def center(self):
        return self.origin + self.edge / 2.0

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.origin) and np.all(x <= self.origin + self.edge))


def _bits_to_digit(bits, n):
    """Per-axis child bits -> digit in 1..2^n (top layer first)."""
    j = 1
    for i in range(n - 1):
        j += int(bits[i]) << i
    if not bits[n - 1]:
        j += 1 << (n - 1)
    return j


def _digit_to_bits(j, n):
    j -= 1
    top = j < (1 << (n - 1))
    j %= 1 << (n - 1)
    bits = [(j >> i) & 1 for i in range(n - 1)]
    return np.array(bits + [1 if top else 0])


def child_origin(seq: ScaleSequence, k: int, origin, bits):
    a, a1 = seq.alphas[k], seq.alphas[k + 1]
    return origin + a / 4.0 - a1 / 2.0 + np.asarray(bits) * (a / 2.0)


def frame_of(seq: ScaleSequence, address: CubeAddress) -> CubeFrame:
    o = np.zeros(address.n)
    for k, j in enumerate(address.digits):
        o = child_origin(seq, k, o, _digit_to_bits(j, address.n))
    return CubeFrame(o, float(seq.alphas[len(address.digits)]))


def descend(seq: ScaleSequence, x, g: int):
    """Origins of the generation-g cubes over the rows of x and a mask of
    rows that lie in a generation-g cube."""
    x = np.atleast_2d(x)
    o = np.zeros_like(x)
    inside = np.all((x >= 0.0) & (x <= 1.0), axis=1)
    for k in range(g):
        a, a1 = seq.alphas[k], seq.alphas[k + 1]
        bits = (x - o) >= a / 2.0
        o = o + a / 4.0 - a1 / 2.0 + bits * (a / 2.0)
        inside &= np.all((x >= o) & (x <= o + a1), axis=1)
    return o, inside


def locate(seq: ScaleSequence, n: int, x, K: int):
    """Deepest generation <= K containing x and its relation to the next one."""
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise DomainError("point has the wrong dimension")
    o = np.zeros(n)
    digits = []
    for k in range(K):
        a, a1 = seq.alphas[k], seq.alphas[k + 1]
        bits = (x - o) >= a / 2.0
        co = o + a / 4.0 - a1 / 2.0 + bits * (a / 2.0)
        if np.all(x >= co) and np.all(x <= co + a1):
            digits.append(_bits_to_digit(bits, n))
            o = co
            continue
        d = np.linalg.norm(np.maximum(np.maximum(co - x, x - (co + a1)), 0.0))
        status = TUBE if 0.0 < d < seq.betas[k + 1] / 10.0 else GAP
        return CubeAddress(tuple(digits), n), status
    return CubeAddress(tuple(digits), n), INSIDE


def reflect(x):
    y = np.array(x, dtype=float, copy=True)
    y[..., -1] = 1.0 - y[..., -1]
    return y


@dataclass(frozen=True, eq=False)
class FlipHomeo:
    seq: ScaleSequence
    n: int
    depth: int

    def __post_init__(self):
        if self.depth > self.seq.K - 1:
            raise CapacityError("scale sequence too short for this depth",
                                required_depth=self.depth + 1)

    @cached_property
    def exchanges(self):
        a = self.seq.alphas
        return tuple(BoxExchange(float(a[l + 1] / a[l]), self.n) for l in range(self.depth))

    def layer(self, l: int, y, direction="forward"):
        """R_l (or its inverse) on the rows of y."""
        y = np.array(y, dtype=float, copy=True)
        o, ins = descend(self.seq, y, l)
        if np.any(ins):
            a = self.seq.alphas[l]
            z = (y[ins] - o[ins]) / a
            z = self.exchanges[l](z, direction)
            y[ins] = o[ins] + a * z
        return y

    def __call__(self, x, K=None, direction="forward"):
        return eval_depth(self, x, self.depth if K is None else K, direction)


def build_flip(seq: ScaleSequence, n: int, depth: int) -> FlipHomeo:
    return FlipHomeo(seq, n, depth)


def eval_depth(fh: FlipHomeo, x, K: int, direction: str = "forward"):
    if K > fh.depth:
        raise CapacityError(f"depth {K} exceeds the built depth {fh.depth}", required_depth=K)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    y = np.atleast_2d(x)
    levels = range(K) if direction == "forward" else range(K - 1, -1, -1)
    for l in levels:
        y = fh.layer(l, y, direction)
    return y[0] if single else y


def required_depth(seq: ScaleSequence, n: int, tol: float) -> int:
    bounds = math.sqrt(n) * seq.alphas
    ok = np.nonzero(bounds <= tol)[0]
    if ok.size == 0:
        raise CapacityError("scale sequence too short for this tolerance", required_depth=seq.K + 1)
    return int(ok[0])


def eval_limit(fh: FlipHomeo, x, tol: float, direction: str = "forward"):
    """Phi_K(x) with the least K whose cubes have diameter <= tol."""
    K = required_depth(fh.seq, fh.n, tol)
    if K > fh.depth:
        raise CapacityError(f"tolerance {tol} needs depth {K}", required_depth=K)
    return eval_depth(fh, x, K, direction), float(math.sqrt(fh.n) * fh.seq.alphas[K])


def reflection_defect(fh: FlipHomeo, x, K: int) -> float:
    _, status = locate(fh.seq, fh.n, x, K)
    if status != INSIDE:
        raise DomainError("point is not in a depth-K Cantor cube")
    return float(np.linalg.norm(eval_depth(fh, x, K) - reflect(x)))


def pair_reflection_error(fh: FlipHomeo, x, y, K: int) -> float:
    """|Phi_K(x) - Phi_K(y) - R(x - y)| with R the reflection's linear part."""
    d = eval_depth(fh, np.vstack([x, y]), K)
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    diff[-1] = -diff[-1]
    return float(np.linalg.norm(d[0] - d[1] - diff))


def random_centers(seq: ScaleSequence, n: int, K: int, count: int, rng):
    """Centres of ``count`` random generation-K cubes."""
    o = np.zeros((count, n))
    for k in range(K):
        bits = rng.integers(0, 2, size=(count, n))
        o = child_origin(seq, k, o, bits)
    return o + seq.alphas[K] / 2.0


def approx_jacobian(fh: FlipHomeo, x, K: int, h: float = 1e-7) -> float:
    """Central-difference determinant of Phi_K at x."""
    x = np.asarray(x, dtype=float)
    ref = locate(fh.seq, fh.n, x, K)
    for i in range(fh.n):
        for s in (-h, h):
            p = x.copy()
            p[i] += s
            if np.any(p < 0) or np.any(p > 1) or locate(fh.seq, fh.n, p, K) != ref:
                raise StencilError("difference stencil crosses a region boundary")
    J = jacobians(lambda z: eval_depth(fh, z, K), x[None, :], h)[0]
    return float(np.linalg.det(J))


def cantor_stats(seq: ScaleSequence, n: int, K: int):
    return float((2.0**K * seq.alphas[K]) ** n), float(2.0 ** (-seq.N * n))


def cantor_membership(seq: ScaleSequence, n: int, K: int, samples: int, seed=0):
    """Monte-Carlo volume of the generation-K cubes: (estimate, std error)."""
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < samples:
        m = min(65536, samples - done)
        _, ins = descend(seq, rng.random((m, n)), K)
        hits += int(np.count_nonzero(ins))
        done += m
    p = hits / samples
    return p, math.sqrt(max(p * (1 - p), 1e-300) / samples)


def uniform_step(fh: FlipHomeo, K: int, samples: int, seed=0) -> float:
    """max over samples of |Phi_{K+1}(x) - Phi_K(x)|."""
    x = np.random.default_rng(seed).random((samples, fh.n))
    a = eval_depth(fh, x, K)
    b = fh.layer(K, a)
    return float(np.max(np.linalg.norm(b - a, axis=1)))


@dataclass
class RatioScan:
    max_ratio: float
    forward_max: float
    inverse_max: float
    profile: dict = field(default_factory=dict)  # decade exponent -> max ratio


def _pairs(n, count, rng):
    x = rng.random((count, n))
    d = np.exp(rng.uniform(math.log(1e-9), math.log(math.sqrt(n)), count))
    u = rng.normal(size=(count, n))
    u /= np.linalg.norm(u, axis=1)[:, None]
    y = np.clip(x + d[:, None] * u, 0.0, 1.0)
    dist = np.linalg.norm(x - y, axis=1)
    keep = dist > 0
    return x[keep], y[keep], dist[keep]


def ratio_scan(forward, inverse, n: int, m: Modulus, pairs: int = 10_000, seed=0) -> RatioScan:
    """max |f(x) - f(y)| / m(|x - y|) over log-uniform pairs for f and its inverse."""
    if pairs < 1000:
        raise DomainError("modulus scan needs at least 1000 pairs")
    rng = np.random.default_rng(seed)
    maxima = {}
    profile: dict = {}
    for direction, f in (("forward", forward), ("inverse", inverse)):
        x, y, dist = _pairs(n, pairs, rng)
        fx = f(x)
        fy = f(y)
        r = np.linalg.norm(fx - fy, axis=1) / np.asarray(m(dist))
        maxima[direction] = float(r.max())
        dec = np.floor(np.log10(dist)).astype(int)
        for e in np.unique(dec):
            v = float(r[dec == e].max())
            profile[int(e)] = max(profile.get(int(e), 0.0), v)
    return RatioScan(max(maxima.values()), maxima["forward"], maxima["inverse"],
                     dict(sorted(profile.items())))


def modulus_ratio_scan(fh: FlipHomeo, m: Modulus, pairs: int = 10_000, seed=0, K=None) -> RatioScan:
    """Ratio scan of Phi_K and its inverse."""
    K = fh.depth if K is None else K
    return ratio_scan(lambda z: eval_depth(fh, z, K), lambda z: eval_depth(fh, z, K, "inverse"),
                      fh.n, m, pairs, seed)

"""Box-exchange diffeomorphisms of the unit cube.

Building blocks, all vectorised over point arrays of shape (m, n):

* ``RadialScaler``: a radial map of [-1, 1]^n that is a homothety on an
  inner p-norm ball, the identity outside an outer p-norm ball, and blends
  the two with a C-infinity profile in between.
* ``CellShrinker``: one radial scaler applied in each of the 2^n dyadic
  half-cells of [0, 1]^n (this is H_alpha when built from G_{1-2 alpha}).
* ``Twist``: the exact time-1 map of a compactly supported rotation field,
  rigid on a core disc.
* ``QuarterSwap``: exchanges the top and bottom quarter cubes, with their
  1/40 tubes, by shrink, twists and unshrink.
* ``BoxExchange``: F_alpha = H_alpha^{-1} o F o H_alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.stats import qmc

from ._smooth import plateau, smoothstep
from .errors import ConditioningError, DomainError, GeometryError

_BISECT_STEPS = 80


def _as_points(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x), single


def _out(y, single):
    return y[0] if single else y


def pnorm(z, p):
    """Row-wise p-norm, scaled by the max coordinate to avoid overflow."""
    a = np.abs(z)
    mx = a.max(axis=1)
    safe = np.where(mx > 0, mx, 1.0)
    r = safe * np.sum((a / safe[:, None]) ** p, axis=1) ** (1.0 / p)
    return np.where(mx > 0, r, 0.0)


def _bisect(f, target, lo, hi, steps=_BISECT_STEPS):
    """Vectorised bisection for increasing f with f(lo) <= target <= f(hi)."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        below = f(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 4e-16 * np.maximum(1.0, np.abs(hi))):
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Radial scaler
# ---------------------------------------------------------------------------


def smallest_even_p(n: int, eps: float, inner: float = None, core: float = None) -> int:
    """Smallest even p with (1 - n^{-1/p}) sqrt(n) < eps (and core ball inside inner)."""
    if n == 1:
        return 2
    p = 2
    while True:
        ok = (1.0 - n ** (-1.0 / p)) * math.sqrt(n) < eps
        if ok and inner is not None and core is not None:
            ok = n ** (1.0 / p) * core < inner
        if ok:
            return p
        p += 2


@dataclass(frozen=True)
class RadialScaler:
    """z -> z * xi(tau(|z|_p)) on [-1, 1]^n.

    tau = (rho - inner) / (outer - inner); xi equals ``kappa`` for
    tau <= eps and 1 for tau >= 1 - eps.  Homothety for rho <= inner,
    identity for rho >= outer.
    """

    kappa: float
    inner: float
    outer: float
    p_norm: int
    eps: float = 0.0
    gamma: float | None = None

    @classmethod
    def for_gamma(cls, gamma: float, n: int, eps: float | None = None) -> "RadialScaler":
        """G_gamma: maps [-(1-gamma), 1-gamma]^n onto [-1/2, 1/2]^n."""
        if not 0.0 < gamma <= 0.5:
            raise DomainError("gamma must lie in (0, 1/2]")
        eps = gamma / 100.0 if eps is None else eps
        inner = 1.0 - 0.9 * gamma + 2.0 * eps
        p = smallest_even_p(n, eps, inner, 1.0 - 0.9 * gamma)
        return cls(1.0 / (2.0 * (1.0 - gamma)), inner, 1.0, p, eps, gamma)

    @property
    def is_identity(self) -> bool:
        return self.kappa == 1.0

    def xi(self, t):
        t = np.asarray(t, dtype=float)
        s = smoothstep((t - self.eps) / (1.0 - 2.0 * self.eps))
        return self.kappa + (1.0 - self.kappa) * s

    def radial(self, rho):
        """rho -> |G(z)|_p for |z|_p = rho."""
        rho = np.asarray(rho, dtype=float)
        tau = (rho - self.inner) / (self.outer - self.inner)
        return rho * self.xi(tau)

    def radial_derivative(self, rho):
        from ._smooth import smoothstep_deriv

        rho = np.asarray(rho, dtype=float)
        w = self.outer - self.inner
        tau = (rho - self.inner) / w
        u = (tau - self.eps) / (1.0 - 2.0 * self.eps)
        dxi = (1.0 - self.kappa) * smoothstep_deriv(u) / ((1.0 - 2.0 * self.eps) * w)
        return self.xi(tau) + rho * dxi

    def fixes(self, z):
        """Rows of z where the map is the identity."""
        rho = pnorm(z, self.p_norm)
        return rho >= self.inner + (1.0 - self.eps) * (self.outer - self.inner)

    def forward(self, z):
        z, single = _as_points(z)
        if self.is_identity:
            return _out(z.copy(), single)
        rho = pnorm(z, self.p_norm)
        tau = (rho - self.inner) / (self.outer - self.inner)
        return _out(z * self.xi(tau)[:, None], single)

    def inverse(self, y):
        y, single = _as_points(y)
        if self.is_identity:
            return _out(y.copy(), single)
        rho_y = pnorm(y, self.p_norm)
        scale = np.ones_like(rho_y)
        core = rho_y <= self.kappa * self.inner
        scale[core] = 1.0 / self.kappa
        mid = ~core & (rho_y < self.outer)
        if np.any(mid):
            r = rho_y[mid]
            rho = _bisect(self.radial, r, r, np.minimum(r / self.kappa, self.outer))
            scale[mid] = rho / r
        return _out(y * scale[:, None], single)

    def __call__(self, z, direction="forward"):
        return self.forward(z) if direction == "forward" else self.inverse(z)


def scaler_map(s: RadialScaler, x, direction: str = "forward"):
    return s(x, direction)


# ---------------------------------------------------------------------------
# Per-cell scaling (H_alpha and the shrink stage of F)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellShrinker:
    """Apply one radial scaler in every dyadic half-cell of [0, 1]^n."""

    scaler: RadialScaler

    @staticmethod
    def _local(x):
        c = np.where(x < 0.5, 0.25, 0.75)
        return c, 4.0 * (x - c)

    def _apply(self, x, direction):
        x, single = _as_points(x)
        c, z = self._local(x)
        y = c + self.scaler(z, direction) / 4.0
        # keep fixed points bit-exact
        keep = self.scaler.fixes(z)
        y[keep] = x[keep]
        return _out(y, single)

    def forward(self, x):
        return self._apply(x, "forward")

    def inverse(self, y):
        return self._apply(y, "inverse")


# ---------------------------------------------------------------------------
# Twist maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Twist:
    """Time-1 flow of the rotation field theta(x) J (x - c) in the (x_1, x_n) plane.

    theta = angle on the planar disc of radius ``r_in`` (times a transverse
    plateau), tapering to 0 at ``r_out``.  The planar radius is preserved,
    so the map is the rotation by theta and the inverse rotates back.
    """

    c1: float
    cn: float
    angle: float
    r_in: float
    r_out: float
    transverse: tuple = ()  # ((axis, lo, hi), ...)
    t_margin: float = 0.0
    s1: float = 1.0  # planar radius is measured in coordinates scaled by (s1, sn)
    sn: float = 1.0

    def theta(self, w):
        r = np.hypot((w[:, 0] - self.c1) / self.s1, (w[:, -1] - self.cn) / self.sn)
        th = self.angle * (1.0 - smoothstep((r - self.r_in) / (self.r_out - self.r_in)))
        for ax, lo, hi in self.transverse:
            th = th * plateau(w[:, ax], lo, hi, self.t_margin)
        return th

    def velocity(self, w):
        """The rotation field; constant along its own orbits."""
        w = np.atleast_2d(np.asarray(w, dtype=float))
        th = self.theta(w)
        v = np.zeros_like(w)
        v[:, 0] = -th * (w[:, -1] - self.cn) * self.s1 / self.sn
        v[:, -1] = th * (w[:, 0] - self.c1) * self.sn / self.s1
        return v

    def _rotate(self, w, sign):
        th = sign * self.theta(w)
        act = th != 0.0
        if not np.any(act):
            return w
        w = w.copy()
        c, s = np.cos(th[act]), np.sin(th[act])
        u = (w[act, 0] - self.c1) / self.s1
        v = (w[act, -1] - self.cn) / self.sn
        w[act, 0] = self.c1 + self.s1 * (c * u - s * v)
        w[act, -1] = self.cn + self.sn * (s * u + c * v)
        return w

    def forward(self, w):
        return self._rotate(w, 1.0)

    def inverse(self, w):
        return self._rotate(w, -1.0)


# ---------------------------------------------------------------------------
# The quarter-cube swap F
# ---------------------------------------------------------------------------

# column-local template: column [0, 1/2]^{n-1} x [0, 1], tubes centred at
# (1/4, ..., 1/4, 3/4) and (1/4, ..., 1/4, 1/4)
_SHRINK = 0.25            # homothety about each quarter-cube centre
_SHRUNK = 0.15 * _SHRINK  # tube half-width after the shrink
_BIG_IN, _BIG_OUT = 0.62, 0.97   # radii in column-normalised coordinates
_LOC_IN, _LOC_OUT = 0.055, 0.23
_SIDE_MARGIN = 0.2


def _swap_geometry(n: int):
    if n < 2:
        raise DomainError("the quarter swap needs n >= 2")
    side = tuple((ax, 0.25 - _SHRUNK, 0.25 + _SHRUNK) for ax in range(1, n - 1))
    # elliptic twist: rotation in coordinates ((x_1 - 1/4)/(1/4), (x_n - 1/2)/(1/2))
    big = Twist(0.25, 0.5, math.pi, _BIG_IN, _BIG_OUT, side, _SIDE_MARGIN, 0.25, 0.5)
    local = tuple(Twist(0.25, q, math.pi, _LOC_IN, _LOC_OUT, side, _SIDE_MARGIN)
                  for q in (0.75, 0.25))
    return big, local


def check_swap_plan(n: int):
    """Containment and separation checks for the twist stages."""
    corner = math.hypot(_SHRUNK / 0.25, (0.25 + _SHRUNK) / 0.5)
    if corner >= _BIG_IN:
        raise GeometryError("shrunk tubes leave the rigid core of the big twist")
    if _BIG_OUT >= 1.0:
        raise GeometryError("big twist support leaves the column")
    if math.hypot(_SHRUNK, _SHRUNK) >= _LOC_IN:
        raise GeometryError("tube leaves the rigid core of its local twist")
    if _LOC_OUT >= 0.25:
        raise GeometryError("local twists overlap or leave the column")
    if 0.25 - _SHRUNK - _SIDE_MARGIN <= 0.0:
        raise GeometryError("transverse plateau leaves the column")
    return True


@dataclass(frozen=True)
class QuarterSwap:
    """F: exchanges top and bottom 1/4-cubes with their 1/40 tubes.

    F = shrink^-1 o local twists o big twist o shrink.  The big twist rotates
    the column core by pi, which swaps the shrunk tubes but turns them over;
    the local twists turn each tube back about its new centre, so on the
    tubes F is the translation by -+ e_n / 2.
    """

    n: int
    shrink: CellShrinker = field(init=False)
    big: Twist = field(init=False)
    local: tuple = field(init=False)

    def __post_init__(self):
        check_swap_plan(self.n)
        # the 1/40 tube is the local sup-ball of radius 0.6 in each half-cell
        p = 2
        while self.n ** (1.0 / p) * 0.6 >= 0.62:
            p += 2
        object.__setattr__(self, "shrink", CellShrinker(RadialScaler(_SHRINK, 0.62, 0.85, p)))
        big, local = _swap_geometry(self.n)
        object.__setattr__(self, "big", big)
        object.__setattr__(self, "local", local)

    @staticmethod
    def _column(x):
        off = np.zeros_like(x)
        off[:, :-1] = np.where(x[:, :-1] < 0.5, 0.0, 0.5)
        return off

    def twist(self, x, direction="forward"):
        off = self._column(x)
        w = x - off
        if direction == "forward":
            w = self.big.forward(w)
            for t in self.local:
                w = t.forward(w)
        else:
            for t in self.local:
                w = t.inverse(w)
            w = self.big.inverse(w)
        return w + off

    def forward(self, x):
        x, single = _as_points(x)
        y = self.twist(self.shrink.forward(x), "forward")
        return _out(self.shrink.inverse(y), single)

    def inverse(self, y):
        y, single = _as_points(y)
        x = self.twist(self.shrink.forward(y), "inverse")
        return _out(self.shrink.inverse(x), single)


_SWAPS: dict = {}


def quarter_swap(x, direction: str = "forward", n: int | None = None):
    x = np.asarray(x, dtype=float)
    n = x.shape[-1] if n is None else n
    if n not in _SWAPS:
        _SWAPS[n] = QuarterSwap(n)
    F = _SWAPS[n]
    return F.forward(x) if direction == "forward" else F.inverse(x)


# ---------------------------------------------------------------------------
# F_alpha
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxExchange:
    alpha: float
    n: int

    def __post_init__(self):
        if not 0.0 < self.alpha < 0.5:
            raise DomainError("alpha must lie in (0, 1/2)")

    @property
    def effective_alpha(self) -> float:
        return max(self.alpha, 0.25)

    @property
    def beta(self) -> float:
        return (1.0 - 2.0 * self.alpha) / 4.0

    @property
    def collar(self) -> float:
        """Width of the band along the boundary of Q where F_alpha is the identity."""
        s = self.cell_map.scaler
        return s.eps * (s.outer - s.inner) / 4.0

    @cached_property
    def cell_map(self) -> CellShrinker:
        """H_alpha."""
        return CellShrinker(RadialScaler.for_gamma(1.0 - 2.0 * self.effective_alpha, self.n))

    @cached_property
    def swap(self) -> QuarterSwap:
        if self.n not in _SWAPS:
            _SWAPS[self.n] = QuarterSwap(self.n)
        return _SWAPS[self.n]

    def forward(self, x):
        x, single = _as_points(x)
        y = self.cell_map.forward(x)
        y = self.swap.forward(y)
        return _out(self.cell_map.inverse(y), single)

    def inverse(self, y):
        y, single = _as_points(y)
        x = self.cell_map.forward(y)
        x = self.swap.inverse(x)
        return _out(self.cell_map.inverse(x), single)

    def __call__(self, x, direction="forward"):
        return self.forward(x) if direction == "forward" else self.inverse(x)


def box_exchange(alpha: float, x, direction: str = "forward"):
    x = np.asarray(x, dtype=float)
    return BoxExchange(alpha, x.shape[-1])(x, direction)


# ---------------------------------------------------------------------------
# Derivative probes
# ---------------------------------------------------------------------------


def jacobians(f, x, h: float):
    """Central-difference Jacobians of f at the rows of x, shape (m, n, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = x.shape
    J = np.empty((m, n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        J[:, :, i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return J


def sobol_points(n: int, count: int, lo=0.0, hi=1.0, seed=0):
    s = qmc.Sobol(d=n, scramble=True, seed=seed)
    m = int(math.ceil(math.log2(max(count, 2))))
    pts = s.random_base2(m)[:count]
    return qmc.scale(pts, np.broadcast_to(lo, (n,)), np.broadcast_to(hi, (n,))) if (
        np.any(np.asarray(lo) != 0.0) or np.any(np.asarray(hi) != 1.0)) else pts


def operator_norm_probe(f, region, samples: int = 1024, h: float = 1e-7, seed: int = 0):
    """(sup |Df|, sup |Df^{-1}|) over quasi-random points of a box region.

    ``region`` is a pair of corner vectors (lo, hi).
    """
    lo, hi = (np.atleast_1d(np.asarray(r, dtype=float)) for r in region)
    if lo.shape != hi.shape:
        raise DomainError("region corners must have the same shape")
    pts = sobol_points(lo.size, samples, lo, hi, seed)
    J = jacobians(f, pts, h)
    sv = np.linalg.svd(J, compute_uv=False)
    if np.any(sv[:, -1] <= 1e-14 * sv[:, 0]):
        raise ConditioningError("singular difference Jacobian")
    return float(sv[:, 0].max()), float((1.0 / sv[:, -1]).max())

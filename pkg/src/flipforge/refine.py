"""Refinement steps F_k -> F_{k+1}: tangent patches and implanted flips.

Each step packs disjoint balls B_i into a region Omega away from the
current Cantor copies, replaces F_k on B_i by its tangent map T_i near the
centre, and inside the cube Q_i inscribed in the half-radius ball implants
a rescaled flip built over the smaller modulus psi:

    F_{k+1} = T_i o S_i^{-1} o Phi_psi o S_i   on Q_i,
    F_{k+1} = T_i + bump * (F_k - T_i)        on B_i minus Q_i,
    F_{k+1} = F_k                             elsewhere.

S_i maps Q_i onto the unit cube.  The composition tree is the base flip
plus one ``Level`` of balls per step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from ._io import atomic_write_text
from ._smooth import smoothstep
from .boxswap import jacobians, sobol_points
from .errors import (BoundError, DegenerateModulusError, DomainError, FlipforgeError,
                     GeometryError, PackingError, ValidationError)
from .flipmap import FlipHomeo, RatioScan, descend, eval_depth, ratio_scan
from .modulus import Modulus, build_psi, parse_modulus
from .sequences import ScaleSequence, build_scales, solve_capacity

STATE_VERSION = 1
PATCH_INNER, PATCH_OUTER = 0.6, 0.8
FLATNESS = 0.05  # sup of |DG - DG(x_o)| |DG(x_o)^-1| accepted on a ball's 2r-neighbourhood
NEWTON_TOL = 1e-11


class DomainRetry(FlipforgeError):
    """Measure conditions on Omega failed; retry with a deeper cover."""

    def __init__(self, message, suggested_depth):
        super().__init__(message)
        self.suggested_depth = suggested_depth


def bump(t):
    """0 for t <= 3/5, 1 for t >= 4/5."""
    return smoothstep((np.asarray(t, dtype=float) - PATCH_INNER) / (PATCH_OUTER - PATCH_INNER))


def ball_volume(n: int, r=1.0):
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * np.asarray(r, dtype=float) ** n


def _probe_directions(n: int):
    """Axis directions plus a fixed set of unit diagonals."""
    eye = np.eye(n)
    diag = np.random.default_rng(20240601).normal(size=(2 * n, n))
    diag /= np.linalg.norm(diag, axis=1)[:, None]
    return np.vstack([eye, -eye, diag])


def _spectral(J):
    s = np.linalg.svd(J, compute_uv=False)
    return s[..., 0], 1.0 / s[..., -1]


# ---------------------------------------------------------------------------
# Finite-depth covers and distances
# ---------------------------------------------------------------------------


def cover_intervals(seq: ScaleSequence, m: int):
    """Sorted per-axis origins of the generation-m intervals and their length."""
    o = np.array([0.0])
    for k in range(m):
        a, a1 = seq.alphas[k], seq.alphas[k + 1]
        o = np.concatenate([o + a / 4.0 - a1 / 2.0, o + 3.0 * a / 4.0 - a1 / 2.0])
    return np.sort(o), float(seq.alphas[m])


def _dist_1d(x, origins, edge):
    i = np.clip(np.searchsorted(origins, x), 1, len(origins) - 1)
    lo = origins[i - 1]
    hi = origins[i]
    d_lo = np.maximum(np.maximum(lo - x, x - lo - edge), 0.0)
    d_hi = np.maximum(np.maximum(hi - x, x - hi - edge), 0.0)
    d = np.minimum(d_lo, d_hi)
    if len(origins) == 1:
        d = np.maximum(np.maximum(origins[0] - x, x - origins[0] - edge), 0.0)
    return d


def dist_to_cover(x, origins, edge):
    """Euclidean distance from the rows of x to the product cover."""
    x = np.atleast_2d(x)
    return np.sqrt(np.sum(_dist_1d(x, origins, edge) ** 2, axis=1))


# ---------------------------------------------------------------------------
# Tangent patch
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TangentPatch:
    center: np.ndarray
    radius: float
    level: int
    value: np.ndarray
    jac: np.ndarray
    M: float
    G: object = field(repr=False)
    G_inv: object = field(default=None, repr=False)

    @property
    def Lambda(self) -> float:
        return 2.0 * self.M

    @cached_property
    def jac_inv(self):
        return np.linalg.inv(self.jac)

    def T(self, x):
        return self.value + (np.atleast_2d(x) - self.center) @ self.jac.T

    def T_inv(self, y):
        return self.center + (np.atleast_2d(y) - self.value) @ self.jac_inv.T

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = self.T(x)
        t = np.linalg.norm(x - self.center, axis=1) / self.radius
        blend = t > PATCH_INNER
        if np.any(blend):
            g = np.asarray(self.G(x[blend]))
            out[blend] += bump(t[blend])[:, None] * (g - out[blend])
        return out

    def inverse(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        x = self.T_inv(y)
        t = np.linalg.norm(x - self.center, axis=1) / self.radius
        todo = t > PATCH_INNER
        if np.any(todo):
            x[todo] = _damped_newton(lambda z, rows: self.forward(z), y[todo], x[todo],
                                     self.radius)
        return x


def _damped_newton(f, y, x0, scale, tol=NEWTON_TOL, steps=60):
    """Solve f(x, rows) = y row-wise with step halving on residual increase.

    ``rows`` indexes the rows of y that x holds, for maps that differ per row.
    """
    x = np.array(x0, dtype=float)
    h = 1e-7 * max(scale, 1e-3)
    res = np.linalg.norm(f(x, np.arange(len(x))) - y, axis=1)
    for _ in range(steps):
        act = res > tol
        if not np.any(act):
            return x
        rows = np.nonzero(act)[0]
        xa = x[act]
        J = jacobians(lambda z: f(z, rows), xa, h)
        step = np.linalg.solve(J, (f(xa, rows) - y[act])[..., None])[..., 0]
        lam = np.ones(len(xa))
        best = xa.copy()
        best_res = res[act].copy()
        for _ in range(20):
            trial = xa - lam[:, None] * step
            tr = np.linalg.norm(f(trial, rows) - y[act], axis=1)
            better = tr < best_res
            best[better] = trial[better]
            best_res[better] = tr[better]
            if np.all(better | (best_res <= tol)):
                break
            lam = np.where(better, lam, lam / 2.0)
        stalled = np.all(best_res >= res[act])
        x[act] = best
        res[act] = best_res
        if stalled:
            break
    if np.any(res > tol):
        raise ValidationError(f"Newton inverse did not converge (residual {res.max():.3e})")
    return x


def lemma_radius_bound(M: float, level: int) -> float:
    return 1.0 / (10.0 * (M + 1.0) ** 2 * 2.0**level)


def local_bounds(G, x, r: float, h: float = 1e-7):
    """First and second derivative bounds of G over probes of B(x, 2r).

    Returns (jac at x, M, flatness) with M = 1 + |DG| + |DG^-1| + |D^2 G|
    and flatness = max |DG(p) - DG(x)| |DG(x)^-1| over the probes.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    J0 = jacobians(G, x, h)
    s_max, s_inv = _spectral(J0)
    inv0 = s_inv.copy()
    flat = np.zeros(len(x))
    d2 = np.zeros(len(x))
    for d in _probe_directions(x.shape[1]):
        Jp = jacobians(G, x + 2.0 * r * d, h)
        a, b = _spectral(Jp)
        s_max = np.maximum(s_max, a)
        s_inv = np.maximum(s_inv, b)
        dj = np.linalg.norm(Jp - J0, 2, axis=(1, 2))
        flat = np.maximum(flat, dj * inv0)
        d2 = np.maximum(d2, dj / (2.0 * r))
    return J0, 1.0 + s_max + s_inv + d2, flat


def _ring_directions(n: int, count: int = 16):
    if n == 2:
        a = 2.0 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(a), np.sin(a)])
    d = np.random.default_rng(20240602).normal(size=(count * n, n))
    return d / np.linalg.norm(d, axis=1)[:, None]


def affine_residual(G, x, J0, r: float, rings=(0.5, 1.0, 2.0)):
    """max |G(p) - G(x) - J0 (p - x)| |J0^-1| / |p - x| over ring probes of B(x, 2r).

    Catches jumps between regions with equal Jacobians, which derivative
    probes cannot see.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g0 = np.asarray(G(x))
    _, inv0 = _spectral(J0)
    worst = np.zeros(len(x))
    for d in _ring_directions(x.shape[1]):
        for t in rings:
            step = t * r * d
            pred = g0 + step @ np.swapaxes(J0, 1, 2)
            res = np.linalg.norm(np.asarray(G(x + step)) - pred, axis=1)
            worst = np.maximum(worst, res * inv0 / (t * r))
    return worst


def tangent_patch(G, x_o, r: float, level: int, probes: int = 64, *, G_inv=None,
                  enforce_bound: bool = True, h: float = 1e-7, seed: int = 0) -> TangentPatch:
    """Tangent patch of G on B(x_o, r), validated by sampling."""
    x_o = np.asarray(x_o, dtype=float)
    J0, M, _ = local_bounds(G, x_o, r, h)
    M = float(M[0])
    if enforce_bound and not r < lemma_radius_bound(M, level):
        raise BoundError(f"radius {r:.3e} too large for M = {M:.4g} at level {level}")
    value = np.asarray(G(x_o[None, :]))[0]
    p = TangentPatch(x_o, float(r), int(level), value, J0[0], M, G, G_inv)
    validate_patch(p, probes, seed, check_diameter=enforce_bound)
    return p


def _ball_samples(n, count, rng, lo=0.0, hi=1.0):
    u = rng.normal(size=(count, n))
    u /= np.linalg.norm(u, axis=1)[:, None]
    rad = (lo**n + (hi**n - lo**n) * rng.random(count)) ** (1.0 / n)
    return u * rad[:, None]


def validate_patch(p: TangentPatch, probes: int = 64, seed: int = 0, check_diameter=True):
    """Sampled checks of the four patch invariants."""
    rng = np.random.default_rng(seed)
    n = p.center.size
    r = p.radius
    x = p.center + r * _ball_samples(n, probes, rng)
    fx = p.forward(x)
    t = np.linalg.norm(x - p.center, axis=1) / r
    g = np.asarray(p.G(x))
    far = t >= PATCH_OUTER
    near = t <= PATCH_INNER
    if np.any(np.abs(fx[far] - g[far]) > 1e-12 * (1 + np.abs(g[far]))):
        raise ValidationError("patch differs from G outside 4r/5")
    if np.any(np.abs(fx[near] - p.T(x[near])) > 1e-12 * (1 + np.abs(fx[near]))):
        raise ValidationError("patch differs from T inside 3r/5")
    y = p.center + r * _ball_samples(n, probes, rng)
    fy = p.forward(y)
    dx = np.linalg.norm(x - y, axis=1)
    df = np.linalg.norm(fx - fy, axis=1)
    ok = dx > 0
    lam = p.Lambda
    if np.any(df[ok] > lam * dx[ok]) or np.any(df[ok] * lam < dx[ok]):
        raise ValidationError("patch is not bi-Lipschitz with constant 2M on sampled pairs")
    # G(B) inside T(E)
    if np.any(np.linalg.norm(p.T_inv(g) - p.center, axis=1) >= 2.0 * r):
        raise ValidationError("G(B) is not inside T(E)")
    # T(D) inside G(B)
    if p.G_inv is not None:
        u = p.center + 0.5 * r * _ball_samples(n, probes, rng)
        back = np.asarray(p.G_inv(p.T(u)))
        if np.any(np.linalg.norm(back - p.center, axis=1) >= r):
            raise ValidationError("T(D) is not inside G(B)")
    if check_diameter:
        ring = p.center + r * _ball_samples(n, probes, rng, 1.0, 1.0)
        gr = np.asarray(p.G(ring))
        diam = np.max(np.linalg.norm(gr[:, None, :] - gr[None, :, :], axis=2))
        if diam >= 2.0 ** -p.level:
            raise ValidationError("diam G(B) is not below 2^-level")
    return True


def patch_eval(p: TangentPatch, x, direction: str = "forward"):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    out = p.forward(x) if direction == "forward" else p.inverse(x)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Composition tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Level:
    """Balls of one refinement step with their tangent maps and implants."""

    centers: np.ndarray  # (B, n)
    radii: np.ndarray  # (B,)
    values: np.ndarray  # (B, n) = F_k(centers)
    jacs: np.ndarray  # (B, n, n) = DF_k(centers)

    @property
    def count(self) -> int:
        return len(self.radii)

    @property
    def n(self) -> int:
        return self.centers.shape[1]

    @cached_property
    def jac_invs(self):
        return np.linalg.inv(self.jacs) if self.count else self.jacs.copy()

    @cached_property
    def edges(self):
        """Edge of the cube inscribed in the half-radius ball."""
        return self.radii / math.sqrt(self.n)

    @cached_property
    def origins(self):
        return self.centers - self.edges[:, None] / 2.0

    @cached_property
    def _groups(self):
        out = []
        for r in np.unique(self.radii):
            idx = np.nonzero(self.radii == r)[0]
            out.append((float(r), idx, cKDTree(self.centers[idx])))
        return out

    def find(self, x):
        """Index of the ball containing each row of x, or -1."""
        x = np.atleast_2d(x)
        hit = np.full(len(x), -1, dtype=np.int64)
        for r, idx, tree in self._groups:
            d, j = tree.query(x, k=1, distance_upper_bound=r)
            inside = d < r
            hit[inside] = idx[j[inside]]
        return hit

    def tangent(self, i, x):
        return self.values[i] + np.einsum("bij,bj->bi", self.jacs[i], x - self.centers[i])

    def tangent_inv(self, i, y):
        return self.centers[i] + np.einsum("bij,bj->bi", self.jac_invs[i], y - self.values[i])

    def to_dict(self):
        return {"centers": self.centers.tolist(), "radii": self.radii.tolist(),
                "values": self.values.tolist(), "jacs": self.jacs.tolist()}

    @classmethod
    def from_dict(cls, d, n):
        c = np.asarray(d["centers"], dtype=float).reshape(-1, n)
        return cls(c, np.asarray(d["radii"], dtype=float),
                   np.asarray(d["values"], dtype=float).reshape(-1, n),
                   np.asarray(d["jacs"], dtype=float).reshape(-1, n, n))


@dataclass(frozen=True, eq=False)
class Evaluator:
    """F_k = base flip refined by ``levels`` (F_1 when there are none)."""

    base: FlipHomeo
    base_depth: int
    implant: FlipHomeo
    implant_depth: int
    levels: tuple = ()

    @property
    def n(self) -> int:
        return self.base.n

    def truncated(self, depth: int) -> "Evaluator":
        """Same map off the depth-``depth`` covers of every Cantor copy."""
        return Evaluator(self.base, min(self.base_depth, depth), self.implant,
                         min(self.implant_depth, depth), self.levels)

    def forward(self, x, upto=None):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        y = self._fwd(np.atleast_2d(x), len(self.levels) if upto is None else upto)
        return y[0] if single else y

    def inverse(self, y, upto=None):
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        x = self._inv(np.atleast_2d(y), len(self.levels) if upto is None else upto)
        return x[0] if single else x

    def __call__(self, x, direction="forward"):
        return self.forward(x) if direction == "forward" else self.inverse(x)

    def _implant(self, lev, i, x, direction):
        e = lev.edges[i][:, None]
        o = lev.origins[i]
        v = eval_depth(self.implant, (x - o) / e, self.implant_depth, direction)
        return o + e * v

    def _in_cube(self, lev, i, x):
        u = (x - lev.origins[i]) / lev.edges[i][:, None]
        return np.all((u >= 0.0) & (u <= 1.0), axis=1)

    def _fwd(self, x, j):
        if j == 0:
            return eval_depth(self.base, x, self.base_depth)
        lev = self.levels[j - 1]
        idx = lev.find(x)
        out = np.empty_like(x)
        free = idx < 0
        if np.any(free):
            out[free] = self._fwd(x[free], j - 1)
        sel = np.nonzero(~free)[0]
        if sel.size:
            i = idx[sel]
            xi = x[sel]
            res = lev.tangent(i, xi)
            cube = self._in_cube(lev, i, xi)
            if np.any(cube):
                w = self._implant(lev, i[cube], xi[cube], "forward")
                res[cube] = lev.tangent(i[cube], w)
            t = np.linalg.norm(xi - lev.centers[i], axis=1) / lev.radii[i]
            ann = t > PATCH_INNER
            if np.any(ann):
                g = self._fwd(xi[ann], j - 1)
                res[ann] += bump(t[ann])[:, None] * (g - res[ann])
            out[sel] = res
        return out

    def patch(self, j: int, i: int, x):
        """F_j on ball i of level j with the implant left out."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self._patched(self.levels[j - 1], np.full(len(x), int(i)), x, j)

    def _patched(self, lev, i, x, j):
        """Patched F_j on ball i without the implant (annulus formula)."""
        res = lev.tangent(i, x)
        t = np.linalg.norm(x - lev.centers[i], axis=1) / lev.radii[i]
        ann = t > PATCH_INNER
        if np.any(ann):
            g = self._fwd(x[ann], j - 1)
            res[ann] += bump(t[ann])[:, None] * (g - res[ann])
        return res

    def _inv(self, y, j):
        if j == 0:
            return eval_depth(self.base, y, self.base_depth, "inverse")
        lev = self.levels[j - 1]
        x0 = self._inv(y, j - 1)
        idx = lev.find(x0)
        x = x0.copy()
        sel = np.nonzero(idx >= 0)[0]
        if sel.size == 0:
            return x
        i = idx[sel]
        ys = y[sel]
        u = lev.tangent_inv(i, ys)
        t = np.linalg.norm(u - lev.centers[i], axis=1) / lev.radii[i]
        core = t <= PATCH_INNER
        res = x0[sel].copy()
        if np.any(core):
            uc = u[core]
            ic = i[core]
            cube = self._in_cube(lev, ic, uc)
            if np.any(cube):
                uc[cube] = self._implant(lev, ic[cube], uc[cube], "inverse")
            res[core] = uc
        ann = np.nonzero(~core)[0]
        if ann.size:
            ia = i[ann]
            xa = res[ann]
            ya = ys[ann]
            r = np.linalg.norm(self._patched(lev, ia, xa, j) - ya, axis=1)
            bad = np.nonzero(r > NEWTON_TOL)[0]
            if bad.size:
                ib = ia[bad]
                f = lambda z, rows, ib=ib: self._patched(lev, ib[rows], z, j)  # noqa: E731
                xa[bad] = _damped_newton(f, ya[bad], xa[bad], float(lev.radii[ib].min()))
            res[ann] = xa
        x[sel] = res
        return x

    def cantor_membership(self, x, depth: int):
        """Rows of x in the depth-limited cover of some Cantor copy."""
        x = np.atleast_2d(x)
        _, inside = descend(self.base.seq, x, depth)
        for lev in self.levels:
            idx = lev.find(x)
            sel = np.nonzero(idx >= 0)[0]
            if sel.size == 0:
                continue
            i = idx[sel]
            u = (x[sel] - lev.origins[i]) / lev.edges[i][:, None]
            _, ins = descend(self.implant.seq, u, depth)
            inside[sel] |= ins
        return inside


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Models:
    """Moduli, scale sequences and flips shared by every state of a run."""

    phi: Modulus
    psi: Modulus
    phi_seq: ScaleSequence
    psi_seq: ScaleSequence
    n: int
    base_depth: int
    implant_depth: int

    @classmethod
    def build(cls, phi_spec="power:0.5", n=2, base_depth=8, implant_depth=6, psi_K=40, K=40):
        phi = parse_modulus(phi_spec)
        psi = build_psi(phi, psi_K).modulus
        phi_seq = build_scales(phi, solve_capacity(phi), K=K)
        psi_seq = build_scales(psi, solve_capacity(psi), K=K)
        return cls(phi, psi, phi_seq, psi_seq, n, base_depth, implant_depth)

    @cached_property
    def base(self):
        return FlipHomeo(self.phi_seq, self.n, self.base_depth)

    @cached_property
    def implant(self):
        return FlipHomeo(self.psi_seq, self.n, self.implant_depth)

    @property
    def phi_cantor(self) -> float:
        return 2.0 ** (-self.phi_seq.N * self.n)

    @property
    def psi_cantor(self) -> float:
        return 2.0 ** (-self.psi_seq.N * self.n)


@dataclass(frozen=True, eq=False)
class RefinementState:
    """F_k as a composition tree plus its Cantor copies and constants."""

    k: int
    phi_spec: str
    psi_K: int
    models: Models = field(repr=False)
    levels: tuple = ()
    constants: dict = field(default_factory=dict)
    history: tuple = ()

    @property
    def n(self) -> int:
        return self.models.n

    @cached_property
    def evaluator(self) -> Evaluator:
        md = self.models
        return Evaluator(md.base, md.base_depth, md.implant, md.implant_depth, tuple(self.levels))

    def implant_volume(self) -> float:
        """Sum of |Q_i| over every implant."""
        return float(sum(np.sum(lev.edges**self.n) for lev in self.levels))

    def cantor_measure(self) -> float:
        """|C_k| = |A_phi| + |A_psi| * sum |Q_i|."""
        return self.models.phi_cantor + self.models.psi_cantor * self.implant_volume()

    def cantor_measure_lower(self) -> float:
        """Lower bound using the upper ends of the capacity roots."""
        md = self.models
        pad = 1e-11
        a = 2.0 ** (-(md.phi_seq.N + pad) * self.n)
        b = 2.0 ** (-(md.psi_seq.N + pad) * self.n)
        return a + b * self.implant_volume()

    def image_cantor_measure(self) -> float:
        """|F_k(C_k)|: the base set keeps its volume, implants scale by det T_i."""
        tot = self.models.phi_cantor
        for lev in self.levels:
            tot += self.models.psi_cantor * float(np.sum(np.abs(np.linalg.det(lev.jacs)) * lev.edges**self.n))
        return tot

    def to_dict(self):
        md = self.models
        return {
            "version": STATE_VERSION,
            "k": self.k,
            "n": self.n,
            "phi": self.phi_spec,
            "psi_K": self.psi_K,
            "base_depth": md.base_depth,
            "implant_depth": md.implant_depth,
            "sequences": {
                "phi": {"N": md.phi_seq.N, "alphas": md.phi_seq.alphas.tolist()},
                "psi": {"N": md.psi_seq.N, "alphas": md.psi_seq.alphas.tolist()},
            },
            "constants": self.constants,
            "history": list(self.history),
            "levels": [lev.to_dict() for lev in self.levels],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def save(self, path):
        atomic_write_text(path, self.to_json())

    @classmethod
    def from_dict(cls, d, models: Models | None = None):
        if d.get("version") != STATE_VERSION:
            raise DomainError(f"unsupported state version {d.get('version')}")
        n = int(d["n"])
        if models is None:
            models = Models.build(d["phi"], n, int(d["base_depth"]), int(d["implant_depth"]),
                                  int(d["psi_K"]))
        for name, seq in (("phi", models.phi_seq), ("psi", models.psi_seq)):
            stored = d["sequences"][name]
            if stored["N"] != seq.N or stored["alphas"] != seq.alphas.tolist():
                raise ValidationError(f"stored {name} sequence does not match the rebuilt one")
        levels = tuple(Level.from_dict(lv, n) for lv in d["levels"])
        return cls(int(d["k"]), d["phi"], int(d["psi_K"]), models, levels,
                   dict(d["constants"]), tuple(d["history"]))

    @classmethod
    def from_json(cls, text: str, models: Models | None = None):
        return cls.from_dict(json.loads(text), models)

    @classmethod
    def load(cls, path, models: Models | None = None):
        with open(path) as f:
            return cls.from_json(f.read(), models)


def measured_constant(state: RefinementState, pairs=10_000, seed=0) -> RatioScan:
    ev = state.evaluator
    return ratio_scan(ev.forward, ev.inverse, state.n, state.models.phi, pairs, seed)


def initial_state(phi_spec="power:0.5", n=2, *, base_depth=8, implant_depth=6, psi_K=40,
                  pairs=10_000, seed=0, models: Models | None = None) -> RefinementState:
    """State for F_1 with measured modulus constants of F_1 and the psi flip."""
    md = models or Models.build(phi_spec, n, base_depth, implant_depth, psi_K)
    st = RefinementState(1, phi_spec, psi_K, md)
    c_phi = measured_constant(st, pairs, seed).max_ratio
    imp = md.implant
    c_psi = ratio_scan(lambda z: eval_depth(imp, z, md.implant_depth),
                       lambda z: eval_depth(imp, z, md.implant_depth, "inverse"),
                       n, md.psi, pairs, seed).max_ratio
    consts = {"C_F": [c_phi], "C_psi": c_psi, "C_phi": c_phi / 1.5, "scan_pairs": pairs,
              "scan_seed": seed}
    return RefinementState(1, phi_spec, psi_K, md, (), consts, ())


# ---------------------------------------------------------------------------
# Omega
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Domain:
    """Open cube minus a collar and the depth-m covers of every Cantor copy."""

    n: int
    m: int
    collar: float
    base_cover: tuple  # (origins, edge) per axis
    implant_cover: tuple  # (origins, edge) per axis, unit cube
    implant_origins: np.ndarray  # (I, n)
    implant_edges: np.ndarray  # (I,)
    measure: float  # exact |Omega|
    complement: float  # exact |Q minus C_k|
    image_fraction: float = math.nan  # MC |F_k(Omega)| / |Q minus F_k(C_k)|
    image_sigma: float = math.nan

    @cached_property
    def _implant_tree(self):
        if len(self.implant_edges) == 0:
            return None
        return cKDTree(self.implant_origins + self.implant_edges[:, None] / 2.0)

    def distance(self, x):
        """Distance to the complement of Omega (negative outside the collar)."""
        x = np.atleast_2d(x)
        d = np.min(np.minimum(x - self.collar, 1.0 - self.collar - x), axis=1)
        d = np.minimum(d, dist_to_cover(x, *self.base_cover))
        tree = self._implant_tree
        if tree is not None:
            kk = min(8, len(self.implant_edges))
            dd, jj = tree.query(x, k=kk)
            dd = dd.reshape(len(x), kk)
            jj = jj.reshape(len(x), kk)
            o, e = self.implant_cover
            half = math.sqrt(self.n) * self.implant_edges.max() / 2.0
            # cubes beyond the k nearest centres are at least this far away
            best = dd[:, -1] - half if kk < len(self.implant_edges) else np.full(len(x), np.inf)
            for c in range(kk):
                j = jj[:, c]
                ej = self.implant_edges[j]
                u = (x - self.implant_origins[j]) / ej[:, None]
                best = np.minimum(best, ej * dist_to_cover(u, o, e))
            d = np.minimum(d, best)
        return d

    def contains(self, x):
        return self.distance(x) > 0.0


def _cover_excess(state: RefinementState, m: int) -> float:
    md = state.models
    n = state.n
    base = (2.0**m * md.phi_seq.alphas[m]) ** n - md.phi_cantor
    imp = ((2.0**m * md.psi_seq.alphas[m]) ** n - md.psi_cantor) * state.implant_volume()
    return base + imp


def minimal_cover_depth(state: RefinementState, max_depth: int = 30) -> int:
    comp = 1.0 - state.cantor_measure()
    for m in range(1, max_depth + 1):
        if _cover_excess(state, m) < comp / 8.0:
            return m
    raise DomainError("no cover depth within the limit meets the excess condition")


def choose_domain(state: RefinementState, m: int | None = None, *, collar: float = 0.01,
                  samples: int = 100_000, seed: int = 0) -> Domain:
    """Omega with |Omega| > 3/4 |Q minus C_k| (exact) and the image condition by MC."""
    md = state.models
    n = state.n
    m = minimal_cover_depth(state) if m is None else m
    comp = 1.0 - state.cantor_measure()
    cover = (2.0**m * md.phi_seq.alphas[m]) ** n + \
        (2.0**m * md.psi_seq.alphas[m]) ** n * state.implant_volume()
    measure = (1.0 - 2.0 * collar) ** n - cover
    if not measure > 0.75 * comp:
        raise DomainRetry(f"|Omega| = {measure:.6f} is not above 3/4 |Q minus C_k|", m + 1)
    origins = np.concatenate([lev.origins for lev in state.levels]) if state.levels \
        else np.zeros((0, n))
    edges = np.concatenate([lev.edges for lev in state.levels]) if state.levels else np.zeros(0)
    dom = Domain(n, m, collar, cover_intervals(md.phi_seq, m), cover_intervals(md.psi_seq, m),
                 origins, edges, float(measure), float(comp))
    # image condition: y counts iff F_k^{-1}(y) lies in Omega
    y = np.random.default_rng(seed).random((samples, n))
    hit = dom.contains(state.evaluator.inverse(y))
    p = float(np.mean(hit))
    sigma = math.sqrt(max(p * (1 - p), 1e-300) / samples)
    frac = p / (1.0 - state.image_cantor_measure())
    frac_sigma = sigma / (1.0 - state.image_cantor_measure())
    if not frac - 2.0 * frac_sigma > 0.75:
        raise DomainRetry(f"image fraction {frac:.4f} +- {frac_sigma:.4f} not above 3/4", m + 1)
    return Domain(n, m, collar, dom.base_cover, dom.implant_cover, origins, edges,
                  float(measure), float(comp), frac, frac_sigma)


def omega_samples(domain: Domain, count: int, seed: int = 0, margin: float = 0.0):
    """Quasi-random points of Omega at distance > margin from its complement."""
    out = []
    got = 0
    batch = 0
    while got < count:
        x = sobol_points(domain.n, max(1024, 2 * count), seed=seed + batch)
        x = x[domain.distance(x) > margin]
        out.append(x)
        got += len(x)
        batch += 1
        if batch > 64:
            raise GeometryError("Omega has too little room for the requested samples")
    return np.vstack(out)[:count]


@dataclass
class Bounds:
    M: float  # safety-scaled
    first: float
    inverse: float
    second: float
    samples: int


def estimate_bounds(state: RefinementState, domain: Domain, samples: int = 512,
                    h: float = 1e-7, seed: int = 0, safety: float = 2.0) -> Bounds:
    """M = 1 + |DF_k| + |DF_k^-1| + |D^2 F_k| over Omega, times ``safety``."""
    h2 = 1e-5
    x = omega_samples(domain, samples, seed, margin=4.0 * h2)
    f = state.evaluator.truncated(domain.m).forward
    J = jacobians(f, x, h)
    s_max, s_inv = _spectral(J)
    d2 = np.zeros(len(x))
    for i in range(state.n):
        e = np.zeros(state.n)
        e[i] = h2
        dJ = (jacobians(f, x + e, h) - jacobians(f, x - e, h)) / (2.0 * h2)
        d2 += np.linalg.norm(dJ, 2, axis=(1, 2)) ** 2
    d2 = np.sqrt(d2)
    if not np.all(np.isfinite(s_inv)):
        raise GeometryError("singular Jacobian on Omega")
    first, inv, second = float(s_max.max()), float(s_inv.max()), float(d2.max())
    return Bounds(safety * (1.0 + first + inv + second), first, inv, second, len(x))


@dataclass
class RhoChoice:
    rho: float
    bounds: tuple  # (lemma, modulus, psi) radius bounds

    def to_dict(self):
        return {"rho": self.rho, "lemma": self.bounds[0], "modulus": self.bounds[1],
                "psi": self.bounds[2]}


def _largest_below(ratio, target, lo=1e-300, hi=1.0, grid=4000):
    """Largest t in [lo, hi] with ratio(s) < target for every grid s <= t."""
    ts = np.geomspace(lo, hi, grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.asarray(ratio(ts), dtype=float)
    bad = np.nonzero(~(r < target))[0]
    if bad.size == 0:
        return hi
    j = bad[0]
    if j == 0:
        return 0.0
    a, b = ts[j - 1], ts[j]
    for _ in range(200):
        mid = math.sqrt(a * b)
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = float(np.asarray(ratio(np.array([mid])))[0]) < target
        if ok:
            a = mid
        else:
            b = mid
        if b / a - 1.0 < 1e-14:
            break
    return a


def choose_rho(k: int, M: float, Lambda: float, m: Modulus, psi: Modulus, C_psi: float) -> RhoChoice:
    """Minimum of the three radius bounds of the refinement step."""
    lemma = lemma_radius_bound(M, k + 1)
    t2 = _largest_below(lambda t: t / m(t), 1.0 / (Lambda * 2.0 ** (k + 1)))
    t3 = _largest_below(lambda t: psi(t) / m(t), 1.0 / (C_psi * Lambda * 2.0**k))
    if t2 <= 0.0 or t3 <= 0.0:
        raise DegenerateModulusError("no positive radius satisfies the modulus bounds")
    b2 = t2 / (2.0 * Lambda)
    b3 = t3 / (2.0 * Lambda)
    return RhoChoice(min(lemma, b2, b3), (lemma, b2, b3))


# ---------------------------------------------------------------------------
# Ball packing
# ---------------------------------------------------------------------------


def implant_edge_cap(models: Models, C_psi: float, budget: float, Lambda):
    """Largest implant edge e with C_psi * Lambda * sup_s e psi(s)/phi(e s) <= budget.

    Pairs inside an implant satisfy |F(x) - F(y)| <= Lambda e C_psi psi(|x-y|/e),
    so the sup over s <= sqrt(n) bounds their ratio against phi.
    """
    n = models.n
    es = np.geomspace(1e-10, 1.0, 400)
    s = np.geomspace(1e-12, math.sqrt(n), 800)
    ps = np.asarray(models.psi(s))
    sig = np.array([np.max(e * ps / np.asarray(models.phi(e * s))) for e in es])
    sig = np.maximum.accumulate(sig)
    want = budget / (C_psi * np.asarray(Lambda, dtype=float))
    j = np.searchsorted(sig, want, side="right") - 1
    return np.where(j >= 0, es[np.clip(j, 0, None)], 0.0)


def _lattice(n, lo, hi, r):
    """Centres of a packing lattice of radius-r balls in [lo, hi]^n."""
    if n == 2:
        ys = np.arange(lo + r, hi - r + 1e-15, math.sqrt(3.0) * r)
        rows = []
        for j, y in enumerate(ys):
            xs = np.arange(lo + r + (r if j % 2 else 0.0), hi - r + 1e-15, 2.0 * r)
            rows.append(np.column_stack([xs, np.full(len(xs), y)]))
        return np.vstack(rows) if rows else np.zeros((0, 2))
    g = np.arange(lo + r, hi - r + 1e-15, 2.0 * r)
    return np.stack(np.meshgrid(*([g] * n), indexing="ij"), -1).reshape(-1, n)


@dataclass
class Packing:
    centers: np.ndarray
    radii: np.ndarray
    jacs: np.ndarray
    M: np.ndarray  # local M = 1 + |DG| + |DG^-1| + |D^2 G| over B(x_i, 2 r_i)
    coverage: float
    image_coverage: float
    image_sigma: float
    scales: list

    @property
    def count(self) -> int:
        return len(self.radii)


def _ball_index(centers, radii):
    n = centers.shape[1] if len(centers) else 1
    return Level(centers.reshape(-1, n), radii, np.zeros_like(centers), np.zeros((len(radii), n, n)))


def image_coverage(state: RefinementState, domain: Domain, centers, radii, samples=20_000, seed=0):
    """MC share of F_k(Omega) covered by the images of the balls."""
    y = np.random.default_rng(seed).random((samples, state.n))
    x = state.evaluator.inverse(y)
    inside = domain.contains(x)
    cnt = int(np.count_nonzero(inside))
    if cnt == 0:
        return 0.0, 1.0
    hit = _ball_index(centers, radii).find(x[inside]) >= 0
    p = float(np.mean(hit))
    return p, math.sqrt(max(p * (1 - p), 1e-300) / cnt)


def pack_balls(domain: Domain, rho: float, target: float = 2.0 / 3.0, state: RefinementState = None,
               *, scales: int = 4, flatness: float = FLATNESS, budget: float | None = None,
               samples: int = 20_000, seed: int = 0, chunk: int = 4096) -> Packing:
    """Greedy multi-scale packing of flat balls compactly inside Omega.

    Scale s uses a lattice of radius rho / 2^s; a candidate is kept when its
    2r-ball lies in Omega, it misses every earlier ball, F_k is flat on it
    and its implant respects the edge cap.
    """
    if not rho > 0:
        raise DomainError("rho must be positive")
    if state is None:
        raise DomainError("pack_balls needs the current state")
    n = state.n
    G = state.evaluator.truncated(domain.m).forward
    C_psi = state.constants["C_psi"]
    if budget is None:
        budget = state.constants["C_phi"] / 2.0**state.k
    centers = np.zeros((0, n))
    radii = np.zeros(0)
    jacs = np.zeros((0, n, n))
    Ms = np.zeros(0)
    groups = []
    log = []
    cov = 0.0
    img, sig = 0.0, 1.0
    rng = np.random.default_rng(seed)
    for s in range(scales):
        r = rho / 2.0**s
        rr = 0.999 * r
        X = _lattice(n, domain.collar, 1.0 - domain.collar, r)
        X = X[domain.distance(X) > 2.0 * r]
        for rg, tree in groups:
            d, _ = tree.query(X, k=1)
            X = X[d > r + rg]
        # chunks in random order, so a scale stops once the target is met
        X = X[rng.permutation(len(X))]
        placed = []
        tried = 0
        done = False
        for lo in range(0, len(X), chunk):
            C = X[lo:lo + chunk]
            tried += len(C)
            # widest ring first; inner rings only on survivors
            J = jacobians(G, C, 1e-7)
            keep = affine_residual(G, C, J, r, rings=(2.0,)) <= flatness
            C, J = C[keep], J[keep]
            if len(C) == 0:
                continue
            C = C[affine_residual(G, C, J, r, rings=(0.5, 1.0)) <= flatness]
            if len(C) == 0:
                continue
            J0, M, flat = local_bounds(G, C, r)
            s_max, s_inv = _spectral(J0)
            lam = np.maximum(s_max, s_inv)
            cap = math.sqrt(n) * implant_edge_cap(state.models, C_psi, budget, lam)
            ok = (flat <= flatness) & (r <= cap)
            placed.append(C[ok])
            centers = np.vstack([centers, C[ok]])
            radii = np.concatenate([radii, np.full(int(ok.sum()), rr)])
            jacs = np.concatenate([jacs, J0[ok]])
            Ms = np.concatenate([Ms, M[ok]])
            cov = float(np.sum(ball_volume(n, radii)) / domain.measure)
            if cov >= target:
                img, sig = image_coverage(state, domain, centers, radii, samples, seed)
                done = img - 2.0 * sig >= target
                if done:
                    break
        if placed and sum(len(p) for p in placed):
            groups.append((rr, cKDTree(np.vstack(placed))))
        entry = {"radius": r, "candidates": int(len(X)), "tried": tried,
                 "placed": int(len(radii)), "coverage": cov}
        if cov >= target:
            entry["image_coverage"] = img
        log.append(entry)
        if done:
            return Packing(centers, radii, jacs, Ms, cov, img, sig, log)
    img, sig = image_coverage(state, domain, centers, radii, samples, seed)
    err = PackingError(f"coverage {cov:.4f} / image {img:.4f} below target {target:.4f} "
                       f"after {scales} scales")
    err.packing = Packing(centers, radii, jacs, Ms, cov, img, sig, log)
    raise err


# ---------------------------------------------------------------------------
# Refinement step
# ---------------------------------------------------------------------------


def orientation_witness(state: RefinementState, level: Level, count: int = 64, seed: int = 0):
    """Share of sampled implants whose Cantor copy is reversed by F.

    Three depth-K centres of the psi-set that differ in one top-level bit
    give difference vectors X; the images give D.  A reflection composed
    with T_i has det(D) det(X) < 0.
    """
    md = state.models
    ev = state.evaluator
    rng = np.random.default_rng(seed)
    n = state.n
    K = md.implant_depth
    pick = rng.choice(level.count, size=min(count, level.count), replace=False)
    bits = rng.integers(0, 2, size=(len(pick), K, n))
    pts = []
    for j in range(n + 1):
        b = bits.copy()
        if j > 0:
            b[:, 0, j - 1] ^= 1
        o = np.zeros((len(pick), n))
        for k in range(K):
            a, a1 = md.psi_seq.alphas[k], md.psi_seq.alphas[k + 1]
            o = o + a / 4.0 - a1 / 2.0 + b[:, k, :] * (a / 2.0)
        u = o + md.psi_seq.alphas[K] / 2.0
        pts.append(level.origins[pick] + level.edges[pick][:, None] * u)
    imgs = [ev.forward(p) for p in pts]
    X = np.stack([pts[j] - pts[0] for j in range(1, n + 1)], axis=-1)
    D = np.stack([imgs[j] - imgs[0] for j in range(1, n + 1)], axis=-1)
    s = np.linalg.det(D) * np.linalg.det(X)
    return float(np.mean(s < 0))


def _validate_sample(state, level, k, count, seed):
    """Full sampled patch validation on ``count`` random balls."""
    ev = state.evaluator
    rng = np.random.default_rng(seed)
    pick = rng.choice(level.count, size=min(count, level.count), replace=False)
    lemma_ok = 0
    for i in pick:
        c = level.centers[i]
        r = float(level.radii[i])
        _, M, _ = local_bounds(ev.forward, c, r)
        M = float(M[0])
        lemma_ok += r < lemma_radius_bound(M, k + 1)
        p = TangentPatch(c, r, k + 1, level.values[i], level.jacs[i], M, ev.forward, ev.inverse)
        validate_patch(p, probes=32, seed=int(i))
    return len(pick), lemma_ok


def refinement_step(state: RefinementState, *, m: int | None = None,
                    coverage_target: float = 2.0 / 3.0, scales: int = 4,
                    flatness: float = FLATNESS, validate: int = 64, samples: int = 100_000,
                    seed: int = 0, max_retries: int = 3) -> RefinementState:
    """F_k -> F_{k+1}.  Returns a new state; ``state`` is never modified."""
    k = state.k
    md = state.models
    n = state.n
    for attempt in range(max_retries + 1):
        try:
            domain = choose_domain(state, m, samples=samples, seed=seed)
            break
        except DomainRetry as e:
            if attempt == max_retries:
                raise
            m = e.suggested_depth
    bounds = estimate_bounds(state, domain, seed=seed)
    C_psi = state.constants["C_psi"]
    rho = choose_rho(k, bounds.M, 2.0 * bounds.M, md.phi, md.psi, 2.0 * C_psi)
    budget = state.constants["C_phi"] / 2.0**k
    top = min(float(math.sqrt(n) * implant_edge_cap(md, C_psi, budget, 1.0)), 2.0 ** -(k + 7))
    packing = pack_balls(domain, top, coverage_target, state, scales=scales, flatness=flatness,
                         budget=budget, samples=samples // 5, seed=seed)
    G = state.evaluator.truncated(domain.m).forward
    values = np.asarray(G(packing.centers))
    level = Level(packing.centers, packing.radii, values, packing.jacs)
    checked, lemma_ok = _validate_sample(state, level, k, validate, seed)
    new = RefinementState(k + 1, state.phi_spec, state.psi_K, md, tuple(state.levels) + (level,),
                          dict(state.constants), tuple(state.history))
    witness = orientation_witness(new, level, seed=seed)
    if witness < 1.0:
        raise ValidationError(f"only {witness:.3f} of sampled implants reverse orientation")
    scan = measured_constant(new, state.constants["scan_pairs"], state.constants["scan_seed"])
    consts = dict(state.constants)
    consts["C_F"] = list(state.constants["C_F"]) + [scan.max_ratio]
    gain = md.psi_cantor * float(np.sum(level.edges**n))
    entry = {
        "k": k,
        "cover_depth": domain.m,
        "omega_measure": domain.measure,
        "complement_measure": domain.complement,
        "image_fraction": domain.image_fraction,
        "image_sigma": domain.image_sigma,
        "M": bounds.M,
        "rho_certified": rho.to_dict(),
        "rho_top": top,
        "implant_budget": budget,
        "balls": level.count,
        "coverage": packing.coverage,
        "image_coverage": packing.image_coverage,
        "image_coverage_sigma": packing.image_sigma,
        "coverage_target": coverage_target,
        "scales": packing.scales,
        "patches_validated": checked,
        "patches_within_lemma_radius": int(lemma_ok),
        "orientation_witness": witness,
        "measure_gain": gain,
        "cantor_measure": new.cantor_measure(),
        "modulus_constant": scan.max_ratio,
        "modulus_budget": sum(2.0**-j for j in range(k + 2)) * state.constants["C_phi"],
    }
    return RefinementState(k + 1, state.phi_spec, state.psi_K, md, new.levels, consts,
                           tuple(state.history) + (entry,))


@dataclass
class NegativeMeasure:
    lower: float  # exact lower bound on |C_k|
    mc: float  # MC volume of the depth-limited covers
    sigma: float
    cover: float  # exact volume of the depth-limited covers
    depth: int

    def __iter__(self):
        return iter((self.lower, self.mc))


def negative_measure(state: RefinementState, samples: int = 100_000, seed: int = 0,
                     depth: int = 8) -> NegativeMeasure:
    md = state.models
    n = state.n
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < samples:
        b = min(65536, samples - done)
        hits += int(np.count_nonzero(state.evaluator.cantor_membership(rng.random((b, n)), depth)))
        done += b
    p = hits / samples
    cover = (2.0**depth * md.phi_seq.alphas[depth]) ** n + \
        (2.0**depth * md.psi_seq.alphas[depth]) ** n * state.implant_volume()
    return NegativeMeasure(state.cantor_measure_lower(), p,
                           math.sqrt(max(p * (1 - p), 1e-300) / samples), float(cover), depth)

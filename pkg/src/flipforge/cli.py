"""Command-line entry point: ``flipforge <subcommand> [flags]``.

Exit codes: 0 when every requested check passes, 1 on failed checks or
library errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import colorsys
import csv
import io
import json
import math
import os
import platform
import sys

import numpy as np

from . import __version__
from ._io import atomic_write_bytes, atomic_write_text
from .boxswap import BoxExchange, operator_norm_probe, sobol_points
from .errors import FlipforgeError
from .flipmap import (build_flip, cantor_membership, eval_depth, modulus_ratio_scan,
                      random_centers, reflection_defect, uniform_step)
from .modulus import build_psi, parse_modulus, psi_ratio_profile
from .refine import RefinementState, initial_state, negative_measure, refinement_step
from .sequences import build_scales, cantor_volume, solve_capacity, verify_scales


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FLIPFORGE_THREADS", "1")))
    except ValueError:
        return 1


def _environment(args):
    return {"flipforge": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "seed": args.seed, "threads": _threads()}


def task_seeds(seed: int, count: int):
    """Independent per-task seeds derived from the run seed."""
    return [int(s.generate_state(1, np.uint64)[0])
            for s in np.random.SeedSequence(seed).spawn(count)]


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"


def _scales(spec, K, tol):
    m = parse_modulus(spec)
    return m, build_scales(m, solve_capacity(m, tol), K=K)


def _flip(args, K):
    """Flip homeomorphism over phi, or over psi with --psi."""
    m = parse_modulus(args.phi)
    if args.psi:
        m = build_psi(m).modulus
    seq = build_scales(m, solve_capacity(m, args.tol), K=max(K + 2, 12))
    return m, seq, build_flip(seq, args.n, K)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_sequences(args):
    m, seq = _scales(args.phi, args.k, args.tol)
    rows = [(k, seq.alphas[k], seq.betas[k], seq.lambdas[k]) for k in range(1, seq.K + 1)]
    if args.format == "json":
        _write(args.out, _json({"phi": args.phi, "N": seq.N, "K_o": seq.K_o, "seed": args.seed,
                                "rows": [dict(zip(("k", "alpha", "beta", "lambda"), r)) for r in rows]}))
    else:
        _write(args.out, _csv(["k", "alpha", "beta", "lambda"], rows))
    return 0


def cmd_psi(args):
    m = parse_modulus(args.phi)
    psi = build_psi(m, args.k)
    prof = psi_ratio_profile(psi, m)
    if args.format == "json":
        _write(args.out, _json({"phi": args.phi, "seed": args.seed,
                                "breakpoints": psi.breakpoints.tolist(),
                                "values": psi.values.tolist(), "slopes": psi.slopes.tolist(),
                                "ratio_profile": prof}))
    else:
        rows = [(k, psi.breakpoints[k], psi.values[k]) for k in range(psi.K + 1)]
        _write(args.out, _csv(["k", "breakpoint", "value"], rows))
    return 0


def _parse_point(text, n):
    try:
        p = np.array([float(v) for v in text.split(",")])
    except ValueError as e:
        raise UsageError(f"bad point {text!r}") from e
    if p.size != n:
        raise UsageError(f"point needs {n} coordinates")
    return p


def cmd_eval(args):
    _, seq, fh = _flip(args, args.depth)
    x = _parse_point(args.point, args.n)
    direction = "inverse" if args.inverse else "forward"
    y = eval_depth(fh, x, args.depth, direction)
    out = {"point": x.tolist(), "image": y.tolist(), "depth": args.depth, "direction": direction,
           "error_bound": math.sqrt(args.n) * float(seq.alphas[args.depth]), "seed": args.seed}
    _write(args.out, _json(out))
    return 0


def _grid_points(n, count):
    g = (np.arange(count) + 0.5) / count
    mesh = np.meshgrid(*([g] * n), indexing="ij")
    return np.stack([a.ravel() for a in mesh], axis=1)


def _pgm(values, count):
    img = values.reshape(count, count).T[::-1]  # row 0 is the top (x_n = 1)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    data = np.round(scaled * 65535).astype(">u2")
    return f"P5\n{count} {count}\n65535\n".encode() + data.tobytes(), (lo, hi)


def _ppm(disp, count):
    ang = np.arctan2(disp[:, 1], disp[:, 0])
    mag = np.linalg.norm(disp, axis=1)
    top = float(mag.max()) if mag.size else 0.0
    val = mag / top if top > 0 else mag
    hue = (ang / (2 * math.pi)) % 1.0
    rgb = np.array([colorsys.hsv_to_rgb(h, 1.0, v) for h, v in zip(hue, val)])
    rgb = rgb.reshape(count, count, 3).transpose(1, 0, 2)[::-1]
    data = np.round(rgb * 255).astype(np.uint8)
    return f"P6\n{count} {count}\n255\n".encode() + data.tobytes(), (0.0, top)


def cmd_grid(args):
    _, seq, fh = _flip(args, args.depth)
    count = args.samples
    x = _grid_points(args.n, count)
    y = eval_depth(fh, x, args.depth)
    if args.format in ("pgm", "ppm"):
        if args.out in (None, "-"):
            raise UsageError("image output needs --out")
        if args.n != 2:
            raise UsageError("images are available for n = 2 only")
        disp = y - x
        if args.format == "pgm":
            data, rng = _pgm(np.linalg.norm(disp, axis=1), count)
            quantity = "displacement magnitude"
        else:
            data, rng = _ppm(disp, count)
            quantity = "displacement direction (hue) and magnitude (value)"
        atomic_write_bytes(args.out, data)
        atomic_write_text(args.out + ".json", _json({
            "quantity": quantity, "range": list(rng), "size": count, "depth": args.depth,
            "phi": args.phi, "psi": args.psi, "seed": args.seed}))
    elif args.format == "json":
        _write(args.out, _json({"x": x.tolist(), "y": y.tolist(), "seed": args.seed}))
    else:
        header = [f"x{i + 1}" for i in range(args.n)] + [f"y{i + 1}" for i in range(args.n)]
        _write(args.out, _csv(header, np.hstack([x, y])))
    return 0


def _check(name, passed, margin, tolerance, **extra):
    return {"name": name, "passed": bool(passed), "margin": float(margin),
            "tolerance": float(tolerance), **extra}


def _guard(checks, name, fn):
    """Run one check; an exception fails only that check."""
    try:
        checks.extend(fn())
    except FlipforgeError as e:
        checks.append(_check(name, False, -math.inf, 0.0, error=str(e)))


def suite_scales(args, seeds):
    m, seq = _scales(args.phi, max(args.depth, 40), args.tol)
    cert = verify_scales(seq, m)
    return [_check(c.name, c.passed, c.margin, 0.0, detail=c.detail) for c in cert.checks]


def suite_boxswap(args, seeds):
    out = []
    for i, a in enumerate((0.26, 0.3, 0.375, 0.45)):
        F = BoxExchange(a, args.n)
        x = sobol_points(args.n, args.samples, seed=seeds[i])
        err = float(np.max(np.abs(F.inverse(F.forward(x)) - x)))
        out.append(_check(f"round_trip_{a}", err <= 1e-8, 1e-8 - err, 1e-8))
        c = np.full(args.n, 0.25)
        c[-1] = 0.75
        tgt = c.copy()
        tgt[-1] = 0.25
        d = float(np.max(np.abs(F.forward(c) - tgt)))
        out.append(_check(f"center_swap_{a}", d <= 1e-9, 1e-9 - d, 1e-9))
        s_max, s_inv = operator_norm_probe(F.forward, (np.zeros(args.n), np.ones(args.n)), samples=1024,
                                           seed=seeds[i])
        out.append(_check(f"norm_probe_{a}", math.isfinite(s_max + s_inv), 0.0, 0.0,
                          score=(s_max + s_inv) * F.beta))
    return out


def suite_flip(args, seeds):
    _, seq, fh = _flip(args, 6)
    out = []
    for K in range(0, 6):
        step = uniform_step(fh, K, args.samples, seed=seeds[K])
        bound = math.sqrt(args.n) * seq.alphas[K]
        out.append(_check(f"uniform_step_{K}", step <= bound, bound - step, bound))
    rng = np.random.default_rng(seeds[6])
    cs = random_centers(seq, args.n, 6, 100, rng)
    worst = max(reflection_defect(fh, c, 6) for c in cs)
    bound = math.sqrt(args.n) * seq.alphas[6]
    out.append(_check("reflection_defect", worst <= bound, bound - worst, bound))
    return out


def suite_modulus(args, seeds):
    m, _, fh = _flip(args, 6)
    maxima = [modulus_ratio_scan(fh, m, max(args.samples, 1000), seed=seeds[0], K=K).max_ratio
              for K in range(2, 7)]
    spread = max(maxima) / min(maxima)
    return [_check("ratio_spread", spread <= 2.0, 2.0 - spread, 2.0, maxima=maxima)]


def suite_cantor(args, seeds):
    _, seq = _scales(args.phi, 40, args.tol)
    p, s = cantor_membership(seq, args.n, 8, args.samples, seed=seeds[0])
    exact = cantor_volume(seq, args.n, 8)
    return [_check("cantor_mc", abs(p - exact) <= 2 * s, 2 * s - abs(p - exact), 2 * s,
                   estimate=p, exact=exact)]


SUITES = {"scales": suite_scales, "boxswap": suite_boxswap, "flip": suite_flip,
          "modulus": suite_modulus, "cantor": suite_cantor}


def cmd_verify(args):
    names = list(SUITES) if args.suite == "all" else [args.suite]
    seeds = task_seeds(args.seed, 16)
    checks = []
    for name in names:
        _guard(checks, name, lambda name=name: [dict(c, suite=name) for c in SUITES[name](args, seeds)])
    report = {"suite": args.suite, "phi": args.phi, "passed": all(c["passed"] for c in checks),
              "checks": checks, "environment": _environment(args)}
    _write(args.out, _json(report))
    return 0 if report["passed"] else 1


def cmd_refine(args):
    if args.n != 2:
        raise UsageError("refinement steps are implemented for n = 2")
    seeds = task_seeds(args.seed, args.steps + 1)
    if args.state:
        state = RefinementState.load(args.state)
    else:
        state = initial_state(args.phi, args.n, pairs=max(args.samples, 1000), seed=seeds[0])
    for s in range(args.steps):
        state = refinement_step(state, coverage_target=args.coverage_target, seed=seeds[s + 1])
    if args.out not in (None, "-"):
        state.save(args.out)
    neg = negative_measure(state, seed=seeds[0])
    summary = {"k": state.k, "cantor_measure_lower": neg.lower, "cover_mc": neg.mc,
               "cover_sigma": neg.sigma, "constants": state.constants,
               "history": list(state.history), "environment": _environment(args)}
    sys.stdout.write(_json(summary))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _parser():
    p = _Parser(prog="flipforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, fmt=("csv", "json")):
        sp.add_argument("--phi", default="power:0.5")
        sp.add_argument("--psi", action="store_true", help="use the flip built over psi")
        sp.add_argument("--n", type=int, default=2, choices=(2, 3, 4))
        sp.add_argument("--depth", type=int, default=4)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--samples", type=int, default=10_000)
        sp.add_argument("--tol", type=float, default=1e-12)
        sp.add_argument("--out", default=None)
        sp.add_argument("--format", choices=fmt, default=fmt[0])
        return sp

    s = common(sub.add_parser("sequences", help="scale sequences alpha, beta, lambda"))
    s.add_argument("--k", type=int, default=40)
    s = common(sub.add_parser("psi", help="breakpoints of the smaller modulus"))
    s.add_argument("--k", type=int, default=40)
    s = common(sub.add_parser("eval", help="evaluate the depth-K flip at a point"), ("json",))
    s.add_argument("--point", required=True)
    s.add_argument("--inverse", action="store_true")
    s = common(sub.add_parser("grid", help="flip on a lattice"), ("csv", "json", "pgm", "ppm"))
    s.set_defaults(samples=64)
    s = common(sub.add_parser("verify", help="run a verification suite"), ("json",))
    s.add_argument("suite", choices=list(SUITES) + ["all"])
    s.set_defaults(samples=10_000)
    s = common(sub.add_parser("refine", help="refinement steps F_k -> F_{k+1}"), ("json",))
    s.add_argument("--steps", type=int, default=2)
    s.add_argument("--state", default=None, help="resume from a saved state")
    s.add_argument("--coverage-target", type=float, default=2.0 / 3.0)
    return p


def run(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if getattr(args, "depth", 0) > 60 or getattr(args, "depth", 0) < 0:
            raise UsageError("--depth must lie in 0..60")
        if not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be a 64-bit unsigned integer")
        return {"sequences": cmd_sequences, "psi": cmd_psi, "eval": cmd_eval, "grid": cmd_grid,
                "verify": cmd_verify, "refine": cmd_refine}[args.command](args)
    except UsageError as e:
        sys.stderr.write(f"flipforge: usage error: {e}\n")
        return 2
    except FlipforgeError as e:
        sys.stderr.write(f"flipforge: {type(e).__name__}: {e}\n")
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

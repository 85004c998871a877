"""Batch driver: run / convergence / probe / project subcommands.

Configuration is a flat ``key = value`` text file overridable by ``--key
value`` flags; the effective configuration is always copied into the output
directory so artifacts are self-describing. Exit codes are a stable
contract: 0 success, 1 usage, 2 config or solver failure, 3 invariant
violation.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from . import analysis, report
from .forms import coercivity_estimate, default_sigma
from .mesh import build_structured_mesh, import_mesh
from .operators import DiscreteOperators
from .scheme import CahnHilliardScheme, StepFailure
from .space import FeSpace
from .vtu import write_vtu

__all__ = ["main", "RunConfig", "ConfigError"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

OUT_ROOT_ENV = "HDGCH_OUT_ROOT"


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract says 1
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def parse_number(text: str) -> float:
    """Floats plus the 2^-k notation used for interface parameters."""
    text = text.strip()
    if "^" in text:
        base, expo = text.split("^", 1)
        return float(base) ** float(expo)
    return float(text)


@dataclass
class RunConfig:
    level: int = 3               # structured mesh with 2^level cells per side
    mesh_file: str = ""          # overrides level when set
    k: int = 1
    sigma: float = -1.0          # <0 means the 8 k^2 default
    kappa: float = 2.0 ** -8
    tau: float = 0.1 / 2 ** 6
    T: float = 0.1
    potential: str = "ginzburg-landau"
    ic: str = "droplet"          # droplet | constant:<m> | expr:<formula>
    init_mode: str = ""          # '' = pick by ic; l2 | elliptic
    outdir: str = "run"
    checkpoint_stride: int = 0
    snapshot_stride: int = 0
    seed: int = 0
    threads: int = 1
    detail: int = 1              # extended stability columns in ledger.csv

    def validate(self) -> None:
        if self.tau <= 0 or self.T <= 0 or self.kappa <= 0:
            raise ConfigError("tau, T and kappa must be positive")
        if self.potential != "ginzburg-landau":
            raise ConfigError(f"unknown potential {self.potential!r}")
        ratio = self.T / self.tau
        if abs(ratio - round(ratio)) > 1e-9 * max(ratio, 1.0):
            raise ConfigError(
                f"T={self.T} is not an integer multiple of tau={self.tau}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.tau))

    def resolved_sigma(self) -> float:
        return default_sigma(self.k) if self.sigma < 0 else self.sigma


_NUMERIC = {"sigma", "kappa", "tau", "T"}
_INT = {"level", "k", "checkpoint_stride", "snapshot_stride", "seed",
        "threads", "detail"}


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    cfg = RunConfig()
    valid = {f.name for f in dc_fields(RunConfig)}

    def assign(key: str, value: str):
        key = key.strip().replace("-", "_")
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _NUMERIC:
            setattr(cfg, key, parse_number(value))
        elif key in _INT:
            setattr(cfg, key, int(value))
        else:
            setattr(cfg, key, value.strip())

    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            assign(key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        assign(key, value)
    return cfg


def write_config_copy(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        for f in sorted(dc_fields(RunConfig), key=lambda f: f.name):
            value = getattr(cfg, f.name)
            if isinstance(value, float):
                fh.write(f"{f.name} = {value:.17g}\n")
            else:
                fh.write(f"{f.name} = {value}\n")


def resolve_outdir(name: str) -> Path:
    p = Path(name)
    if not p.is_absolute():
        p = Path(os.environ.get(OUT_ROOT_ENV, ".")) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# initial conditions


def make_initial_condition(cfg: RunConfig):
    """Returns (f, grad_f_or_None, default_mode, subdivide)."""
    ic = cfg.ic.strip()
    if ic == "droplet":
        return analysis.droplet_indicator, None, "l2", 1
    if ic.startswith("constant:"):
        m = parse_number(ic.split(":", 1)[1])
        f = lambda x, y: np.full(np.broadcast(x, y).shape, m)
        g = lambda x, y: np.zeros(np.broadcast(x, y).shape + (2,))
        return f, g, "l2", 0
    if ic.startswith("expr:"):
        import sympy

        x, y = sympy.symbols("x y")
        try:
            expr = sympy.sympify(ic.split(":", 1)[1], locals={"x": x, "y": y})
        except (sympy.SympifyError, SyntaxError) as exc:
            raise ConfigError(f"cannot parse ic expression: {exc}") from exc
        f = sympy.lambdify((x, y), expr, "numpy")
        gx = sympy.lambdify((x, y), sympy.diff(expr, x), "numpy")
        gy = sympy.lambdify((x, y), sympy.diff(expr, y), "numpy")

        def fnum(xx, yy):
            return np.broadcast_to(np.asarray(f(xx, yy), dtype=float),
                                   np.broadcast(xx, yy).shape)

        def gnum(xx, yy):
            shape = np.broadcast(xx, yy).shape
            out = np.empty(shape + (2,))
            out[..., 0] = np.broadcast_to(np.asarray(gx(xx, yy), dtype=float), shape)
            out[..., 1] = np.broadcast_to(np.asarray(gy(xx, yy), dtype=float), shape)
            return out

        return fnum, gnum, "l2", 0
    raise ConfigError(f"unknown initial condition {ic!r}")


def startup_sigma_check(k: int, sigma: float) -> float:
    """Rayleigh probe on the level-2 structured family member.

    The coercivity constant of the penalized form is mesh-size independent
    on the structured family, so a small dense probe certifies the run.
    """
    space = FeSpace(build_structured_mesh(4), k)
    est = coercivity_estimate(space, sigma)
    if est < 1e-8:
        raise ConfigError(
            f"penalty sigma={sigma:g} fails the coercivity probe "
            f"(Rayleigh minimum {est:.3e}); use a larger sigma")
    return est


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set or [])
    if args.preset == "table1":
        cfg.ic = "droplet"
        cfg.k = 1
        cfg.T = 0.1
        if args.j is not None:
            cfg.level = args.j
        cfg.tau = 0.1 / 4.0 ** cfg.level
    elif args.j is not None:
        cfg.level = args.j
    if args.kappa is not None:
        cfg.kappa = parse_number(args.kappa)
    cfg.validate()

    sigma = cfg.resolved_sigma()
    startup_sigma_check(cfg.k, sigma)

    if cfg.mesh_file:
        mesh = import_mesh(cfg.mesh_file)
    else:
        mesh = build_structured_mesh(2 ** cfg.level)
    space = FeSpace(mesh, cfg.k)
    scheme = CahnHilliardScheme(space, kappa=cfg.kappa, tau=cfg.tau,
                                sigma=sigma)

    f, grad_f, default_mode, subdivide = make_initial_condition(cfg)
    mode = cfg.init_mode or default_mode
    ops = DiscreteOperators(space, sigma=sigma, suite=scheme.suite,
                            aD=scheme.aD)
    c0 = ops.initial_projection(f, mode=mode, grad_f=grad_f,
                                subdivide=subdivide)
    state = scheme.new_state(c0)

    out = resolve_outdir(cfg.outdir)
    write_config_copy(cfg, out / "config.txt")
    detail_ops = ops if cfg.detail else None
    monitor = analysis.Monitor(out / "ledger.csv", scheme,
                               operators=detail_ops)
    monitor.write_state(state)

    def on_step(sch, st, rep):
        monitor(sch, st, rep)
        if cfg.snapshot_stride and st.n % cfg.snapshot_stride == 0:
            write_vtu(out / f"state_{st.n:06d}.vtu", space,
                      {"c": st.c, "mu": st.mu})

    try:
        scheme.advance(state, cfg.n_steps, on_step=on_step,
                       checkpoint_every=cfg.checkpoint_stride,
                       checkpoint_dir=out)
    except StepFailure as exc:
        monitor.close()
        print(f"step failure at n={state.n + 1}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    monitor.close()

    write_vtu(out / "state_final.vtu", space, {"c": state.c, "mu": state.mu})
    report.field_figure(out / "field_final.png", space, state.c,
                        title=f"t={state.t:g} kappa={cfg.kappa:g}")
    report.ledger_figure(out / "ledgers.png", state.times, state.mass,
                         state.energy)

    mass = np.asarray(state.mass)
    energy = np.asarray(state.energy)
    drift = np.abs(mass - mass[0]).max()
    e_tol = 1e-9 * (1.0 + abs(energy[0]))
    energy_ok = bool(np.all(np.diff(energy) <= e_tol))
    print(f"steps={state.n} mass_drift={drift:.3e} "
          f"energy_monotone={energy_ok} "
          f"newton_median={np.median(state.newton_iters[1:]):.1f}")
    if drift > 1e-10 * max(1.0, abs(mass[0])) or not energy_ok:
        print("invariant violation (mass conservation or energy decay)",
              file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_convergence(args) -> int:
    if args.preset == "table1-full":
        cfg = analysis.StudyConfig(j_min=3, j_max=5, j_fine=6,
                                   kappas=(2.0 ** -8, 2.0 ** -10, 2.0 ** -12))
    else:  # desk preset
        cfg = analysis.StudyConfig(j_min=2, j_max=4, j_fine=5,
                                   kappas=(2.0 ** -8,))
    if args.j_min is not None:
        cfg.j_min = args.j_min
    if args.j_max is not None:
        cfg.j_max = args.j_max
    if args.j_fine is not None:
        cfg.j_fine = args.j_fine
    if args.kappa is not None:
        cfg.kappas = tuple(parse_number(v) for v in args.kappa.split(","))
    if args.T is not None:
        cfg.T = args.T
    if args.k is not None:
        cfg.k = args.k
    out = resolve_outdir(args.outdir)

    def on_level(j, kappa, wall):
        print(f"level j={j} kappa={kappa:.3g} done in {wall:.1f}s")

    try:
        rep = analysis.convergence_study(cfg, out_dir=out, on_level=on_level)
    except (StepFailure, ValueError) as exc:
        print(f"study failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rep.write_table1(out / "table1.csv")
    rep.write_summary(out / "summary.txt")
    report.convergence_figure(out / "table1.png", rep)
    for r in rep.levels:
        rate = "---" if r.rate is None else f"{r.rate:.3f}"
        print(f"j={r.j} kappa={r.kappa:.3g} error={r.error:.4e} rate={rate}")
    return EXIT_OK


def cmd_probe(args) -> int:
    levels = tuple(int(v) for v in args.levels.split(","))
    out = resolve_outdir(args.outdir)
    records = analysis.probe_inequalities(
        levels=levels, k=args.k, samples=args.samples, seed=args.seed,
        dual_samples=args.dual_samples)
    analysis.write_probe_csv(records, out / "probes.csv")
    report.probe_figure(out / "probes.png", records)
    families = sorted({r.family for r in records})
    print(f"probe families: {', '.join(families)}")
    print(f"{len(records)} rows -> {out / 'probes.csv'}")
    return EXIT_OK


def cmd_project(args) -> int:
    """Projection rate study for the L2 and penalized-form projections."""
    out = resolve_outdir(args.outdir)
    f = lambda x, y: np.cos(np.pi * x) * np.cos(np.pi * y)
    gf = lambda x, y: np.stack(
        [-np.pi * np.sin(np.pi * x) * np.cos(np.pi * y),
         -np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)], axis=-1)
    levels = tuple(int(v) for v in args.levels.split(","))
    table: list[dict] = []
    for n in levels:
        space = FeSpace(build_structured_mesh(n), args.k)
        ops = DiscreteOperators(space)
        for op_name, field in (("l2", space.project_l2(f)),
                               ("elliptic", ops.elliptic_projection(f, gf))):
            xq = space.elem_qpts
            vals = space.elem_values_at_quad(field)
            err_l2 = np.sqrt(space.integrate_elem(
                (vals - f(xq[..., 0], xq[..., 1])) ** 2))
            err_star = None
            if op_name == "elliptic":
                err_star = _err_1h_star(space, ops, field, f, gf)
            table.append({"op": op_name, "n": n, "h": 1.0 / n,
                          "err_l2": float(err_l2), "err_1h_star": err_star})
    for op_name in ("l2", "elliptic"):
        rows = [r for r in table if r["op"] == op_name]
        rates = analysis.compute_rates([r["err_l2"] for r in rows])
        for r, rate in zip(rows, rates):
            r["rate_l2"] = rate
        if rows[0]["err_1h_star"] is not None:
            rates = analysis.compute_rates([r["err_1h_star"] for r in rows])
            for r, rate in zip(rows, rates):
                r["rate_1h_star"] = rate
    with open(out / "project.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["op", "n", "h", "err_l2", "rate_l2",
                    "err_1h_star", "rate_1h_star"])
        for r in table:
            w.writerow([
                r["op"], r["n"], f"{r['h']:.17g}", f"{r['err_l2']:.17g}",
                "" if r.get("rate_l2") is None else f"{r['rate_l2']:.17g}",
                "" if r.get("err_1h_star") is None else f"{r['err_1h_star']:.17g}",
                "" if r.get("rate_1h_star") is None else f"{r['rate_1h_star']:.17g}",
            ])
    report.projection_figure(out / "project.png", table)
    for r in table:
        extra = ("" if r.get("rate_l2") is None
                 else f" rate={r['rate_l2']:.3f}")
        print(f"{r['op']} n={r['n']}: L2 err={r['err_l2']:.4e}{extra}")
    return EXIT_OK


def _err_1h_star(space, ops, field, f, gf) -> float:
    """1,h,* norm of the projection error against the exact pair (f, f|_G)."""
    mesh = space.mesh
    grads = space.elem_grads_at_quad(field)
    xq = space.elem_qpts
    gex = gf(xq[..., 0], xq[..., 1])
    total = space.integrate_elem(((grads - gex) ** 2).sum(axis=2))
    ws = space.quad.seg_weights
    fvals = space.facet_values(field)
    xf = space.facet_qpts
    for loc in range(3):
        fid = mesh.elem_facets[:, loc]
        he = mesh.facet_lengths[fid]
        # the exact pair has facet part equal to its trace, so the error's
        # element-to-facet difference is that of the projection alone
        diff = space.trace_values(field, loc) - fvals[fid]
        total += np.einsum("eq,q,e->", diff ** 2, ws, he / mesh.diameters)
        # normal-gradient trace part
        gfac = gf(xf[fid][..., 0], xf[fid][..., 1])
        gn_ex = np.einsum("eqa,ea->eq", gfac,
                          space.elem_outward_normals[:, loc])
        gn = np.einsum("em,emq->eq", field.elem_coeffs,
                       space.trace_dpsi_n[:, loc])
        total += np.einsum("eq,q,e->", (gn - gn_ex) ** 2, ws,
                           he * mesh.diameters)
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="hdgch",
                description="HDG Cahn-Hilliard solver and verification harness")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="time-step a single configuration")
    run.add_argument("--config", help="flat key = value config file")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config entry")
    run.add_argument("--preset", choices=["table1"],
                     help="droplet experiment preset (tau from the level)")
    run.add_argument("--j", type=int, help="structured mesh level (2^j cells)")
    run.add_argument("--kappa", help="interface parameter (floats or 2^-k)")
    run.set_defaults(func=cmd_run)

    conv = sub.add_parser("convergence", help="self-convergence study")
    conv.add_argument("--preset", choices=["desk", "table1-full"],
                      default="desk")
    conv.add_argument("--j-min", type=int, dest="j_min")
    conv.add_argument("--j-max", type=int, dest="j_max")
    conv.add_argument("--j-fine", type=int, dest="j_fine")
    conv.add_argument("--kappa", help="comma-separated list, 2^-k allowed")
    conv.add_argument("--T", type=float)
    conv.add_argument("--k", type=int)
    conv.add_argument("--outdir", default="convergence")
    conv.set_defaults(func=cmd_convergence)

    probe = sub.add_parser("probe", help="discrete inequality probe suite")
    probe.add_argument("--levels", default="4,8,16,32")
    probe.add_argument("--k", type=int, default=1)
    probe.add_argument("--samples", type=int, default=100)
    probe.add_argument("--seed", type=int, default=0)
    probe.add_argument("--dual-samples", type=int, default=8,
                       dest="dual_samples")
    probe.add_argument("--outdir", default="probes")
    probe.set_defaults(func=cmd_probe)

    proj = sub.add_parser("project", help="projection rate study")
    proj.add_argument("--levels", default="4,8,16,32")
    proj.add_argument("--k", type=int, default=1)
    proj.add_argument("--outdir", default="project")
    proj.set_defaults(func=cmd_project)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line experiment runner.

    qpnormal run --config configs/ising-small.cfg --out out/
    qpnormal recurrence --omega 1,1.41421356 --delta 0.05 --count 10

Exit status: 0 ok, 2 config, 3 resonance or regime, 4 resource cap, 5 invariant.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .diophantine import estimate_gamma, find_recurrence_times, torus_distance
from .dynamics import (DenseModel, compare_effective, default_dt, drift_curve, propagate)
from .errors import ConfigError, QPError
from .homological import homological_residual, solve_hom_inv, solve_hom_obs
from .models import (HubbardSpec, IsingSpec, build_custom, build_hubbard_1d, build_ising,
                     first_order_zeff_hubbard, pauli_word)
from .normalform import TRACE_COLUMNS, fast_params, make_schedule, run_normal_form
from .opalg import (dense_cap, double_bracket, norm_kappa, norm_kappa_rho, site_operator,
                    to_dense)
from . import serialize

GNUPLOT_RECIPE = """\
set datafile separator ","
set key autotitle columnhead
set logscale y
set terminal pngcairo size 900,600
set output "trace.png"
plot "trace.csv" using 1:4 with linespoints title "norm_V"
set output "drift.png"
plot for [a=1:4] "drift.csv" using 1:(column(2)==a ? column(3) : 1/0) with lines title sprintf("alpha=%d", a)
set output "compare.png"
plot "compare.csv" using 1:2 with lines title "error_true_vs_eff"
"""


class StageError(QPError):
    """A QPError tagged with the pipeline stage it came from."""

    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.exit_code = exc.exit_code
        self.cause = exc


@contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except QPError as exc:
        raise StageError(name, exc) from exc


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (tuple, list)):
        return " ".join(_fmt(v) for v in x)
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    if isinstance(o, np.integer):
        return int(o)
    return o


# -------------------------------------------------------------- building

def _modes(cfg):
    m = len(cfg["frequencies"])
    out = {}
    for d in cfg["model.drive.modes"]:
        l = tuple(d["l"])
        if len(l) != m:
            raise ConfigError(f"drive mode {l} does not match {m} frequencies")
        a = d["amplitude"]
        out[l] = complex(a[0], a[1]) if isinstance(a, list) else float(a)
    return out


def build_model(cfg):
    """(family, V, info) from a config."""
    kind = cfg["model.kind"]
    m = len(cfg["frequencies"])
    regime = cfg["model.regime"]
    if kind == "ising":
        J = cfg["model.J"]
        if isinstance(J, list):
            raise ConfigError("model.J is a single number for the Ising model")
        h = cfg["model.h"]
        if len(h) != 3:
            raise ConfigError("model.h needs three sublattice fields")
        spec = IsingSpec(L=cfg["model.L"], J=float(J), h=tuple(h), drive_modes=_modes(cfg), m=m,
                         regime=regime, epsilon=cfg["model.epsilon"], lam=cfg["model.lambda"])
        fam, V = build_ising(spec)
        return fam, V, spec
    if kind == "hubbard":
        if regime != "small":
            raise ConfigError("the Hubbard builder supports the small regime only")
        J = cfg["model.J"]
        J = tuple(J) if isinstance(J, list) else (float(J),)
        spec = HubbardSpec(L=cfg["model.L"], r=cfg["model.range"], J=J,
                           hopping_modes=_modes(cfg), m=m, epsilon=cfg["model.epsilon"])
        fam, V = build_hubbard_1d(spec)
        return fam, V, spec
    custom = dict(cfg["model.custom"])
    custom.setdefault("m", m)
    fam, V = build_custom(custom)
    return fam, V, None


def _site(lattice, site):
    if site == "center":
        return lattice.n_sites // 2
    return lattice.site_index(site)


def observables(cfg, lattice, q):
    out = []
    for d in cfg["dynamics.observables"]:
        i = _site(lattice, d["site"])
        M = pauli_word(d["pauli"]) if "pauli" in d else np.asarray(d["matrix"], dtype=complex)
        if q != 2 and "pauli" in d:
            raise ConfigError("Pauli observables need q = 2; give a matrix")
        if M.shape != (q, q):
            raise ConfigError(f"observable on site {d['site']} must be {q}x{q}")
        out.append((d, to_dense(site_operator(lattice, q, M, [i]))))
    return out


def certify(cfg, fam):
    """Certificates for omega and for the joint vector (J, omega)."""
    omega = np.asarray(cfg["frequencies"], dtype=float)
    tau = cfg["diophantine.tau"]
    info = {}
    c = estimate_gamma(omega, tau, cfg["diophantine.k_max"]) if len(omega) else None
    if c is not None:
        info["omega"] = {"gamma_est": c.gamma_est, "worst_k": c.worst_k, "k_max": c.k_max,
                         "tau": tau}
    joint = None
    if fam.r:
        vec = np.concatenate([fam.J, omega])
        joint = estimate_gamma(vec, tau, cfg["diophantine.joint_k_max"])
        info["joint"] = {"gamma_est": joint.gamma_est, "worst_k": joint.worst_k,
                         "k_max": joint.k_max, "tau": tau}
    return c, joint, info


def schedule_for(cfg, fam, steps=None):
    regime = cfg["model.regime"]
    steps = cfg["normalform.steps"] if steps is None else steps
    tau = cfg["diophantine.tau"]
    tau_J = cfg["diophantine.tau_J"] if cfg["diophantine.tau_J"] is not None else tau
    return make_schedule(cfg["normalform.kappa"], cfg["normalform.rho"], fam.r, fam.max_norm0(),
                         regime, cfg["normalform.variant"], epsilon=cfg["model.epsilon"],
                         lam=cfg["model.lambda"], tau=tau, tau_J=tau_J, tau_omega=tau,
                         override_steps=steps)


def normal_form(cfg, fam, V, cert_omega, steps=None):
    sched = schedule_for(cfg, fam, steps)
    fast = None
    if sched.regime == "fast":
        tau = cfg["diophantine.tau"]
        tau_J = cfg["diophantine.tau_J"] if cfg["diophantine.tau_J"] is not None else tau
        cJ = estimate_gamma(fam.J, tau_J, cfg["diophantine.joint_k_max"])
        fast = fast_params(sched.param, cfg["frequencies"], fam.J, cert_omega.gamma_est, tau,
                           cJ.gamma_est, tau_J)
    out = run_normal_form(fam, V, cfg["frequencies"], sched, tol=cfg["normalform.tol"],
                          lmax=cfg["normalform.lmax"], guard=cfg["normalform.guard"], fast=fast)
    if out.error is not None:
        raise _reraise(out.error)
    return out


def _reraise(message):
    from .errors import ConvergenceError, ResonanceError
    low = message.lower()
    if "resonan" in low or "regime" in low:
        return ResonanceError(message)
    return ConvergenceError(message)


def trace_rows(out):
    return out.trace_rows()


def nf_manifest(out):
    s = out.schedule
    return {"n_steps": s.n_steps, "paper_steps": s.paper_steps, "param": s.param,
            "regime": s.regime, "variant": s.variant, "kappa_seq": s.kappa_seq,
            "rho_seq": s.rho_seq, "constants": s.constants,
            "divisor_min": [r.get("divisor_min") for r in out.trace if "divisor_min" in r],
            "guard_ratio": [r.get("guard_ratio") for r in out.trace if "guard_ratio" in r],
            "best_step": out.best_step, "stopped_early": out.stopped_early,
            "truncation": out.truncation, "nu": out.nu}


# ------------------------------------------------------------ subcommands

def _load(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if getattr(args, "steps", None) is not None:
        cfg.set("normalform.steps", args.steps)
    if getattr(args, "delta", None) is not None:
        cfg.set("recurrence.delta", args.delta)
    if getattr(args, "k_max", None) is not None:
        cfg.set("diophantine.k_max", args.k_max)
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    if getattr(args, "omega", None) is not None:
        cfg.set("frequencies", _omega(args.omega))
    return cfg


def _omega(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--omega: {exc}") from exc


def _outdir(args, cfg=None):
    d = Path(args.out if args.out else (cfg["output.directory"] if cfg else "out"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _recurrence(omega, delta, count, window, max_windows=None):
    """First `count` hits, one per window, starting with window 1 (window 0 holds t = 0)."""
    rows = []
    j = 1
    limit = max_windows or 50 * count
    while len(rows) < count and j <= limit:
        s = find_recurrence_times(omega, delta, 1, window, j_start=j)
        rows.extend(s.rows())
        j += 1
    for (_, t, d, _, _) in rows:
        if not torus_distance(np.multiply(t, omega)) < delta:
            raise QPError(f"recurrence time {t} fails self-verification")
    return rows


REC_HEADER = ("j", "t_j", "torus_distance", "window_start", "window_end")


def cmd_recurrence(args):
    if args.config:
        cfg = _load(args)
        omega, delta = cfg["frequencies"], cfg["recurrence.delta"]
        count = args.count or cfg["recurrence.j_count"]
        window = cfg["recurrence.window"]
    else:
        if args.omega is None:
            raise ConfigError("recurrence needs --omega or --config")
        omega = _omega(args.omega)
        delta = args.delta if args.delta is not None else 0.05
        count = args.count or 5
        window = args.window
    with stage("recurrence"):
        rows = _recurrence(np.asarray(omega), delta, count, window)
    if args.out:
        write_csv(_outdir(args) / "recurrence.csv", REC_HEADER, rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(REC_HEADER)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    if len(rows) < count:
        print(f"warning: only {len(rows)} of {count} windows had a hit", file=sys.stderr)
    return 0


def cmd_diophantine(args):
    tau = args.tau
    if args.config:
        cfg = _load(args)
        with stage("build"):
            fam, V, _ = build_model(cfg)
        with stage("certify"):
            _, _, info = certify(cfg, fam)
    else:
        if args.omega is None:
            raise ConfigError("diophantine needs --omega or --config")
        with stage("certify"):
            c = estimate_gamma(_omega(args.omega), tau, args.k_max or 20)
        info = {"omega": {"gamma_est": c.gamma_est, "worst_k": c.worst_k, "k_max": c.k_max,
                          "tau": tau}}
    print(json.dumps(_jsonable(info), indent=1, sort_keys=True))
    if args.out:
        (_outdir(args) / "diophantine.json").write_text(
            json.dumps(_jsonable(info), indent=1, sort_keys=True) + "\n")
    return 0


def cmd_norms(args):
    cfg = _load(args)
    with stage("build"):
        fam, V, _ = build_model(cfg)
    k, r = cfg["normalform.kappa"], cfg["normalform.rho"]
    rows = []
    for a, N in enumerate(fam.operators):
        rows.append((f"N^({a + 1})", k, 0.0, norm_kappa(N, k)))
        rows.append((f"N^({a + 1})", 2 * k, 0.0, norm_kappa(N, 2 * k)))
    rows.append(("V", k, r, norm_kappa_rho(V, k, r)))
    rows.append(("V", 0.0, 0.0, norm_kappa_rho(V, 0.0, 0.0)))
    header = ("operator", "kappa", "rho", "norm")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    if args.out:
        write_csv(_outdir(args, cfg) / "norms.csv", header, rows)
    return 0


def cmd_normal_form(args):
    cfg = _load(args)
    d = _outdir(args, cfg)
    manifest = {"version": __version__, "command": "normal-form", "config": cfg.resolved()}
    try:
        with stage("build"):
            fam, V, _ = build_model(cfg)
        with stage("certify"):
            c, _, manifest["certificates"] = certify(cfg, fam)
        with stage("normal-form"):
            out = normal_form(cfg, fam, V, c)
        manifest["normal_form"] = nf_manifest(out)
        write_csv(d / "trace.csv", TRACE_COLUMNS, trace_rows(out))
        serialize.save_normal_form(out, d / "operators")
    finally:
        _write_manifest(d, manifest)
    return 0


def cmd_evolve(args):
    cfg = _load(args)
    d = _outdir(args, cfg)
    manifest = {"version": __version__, "command": "evolve", "config": cfg.resolved()}
    try:
        with stage("build"):
            fam, V, _ = build_model(cfg)
        with stage("propagate"):
            nu = _nu(cfg)
            tr = _propagate(cfg, fam, V, nu, manifest)
        with stage("diagnostics"):
            dc = drift_curve(tr, fam, _param(cfg))
            write_csv(d / "drift.csv", ("t", "alpha", "drift"), dc.rows())
    finally:
        _write_manifest(d, manifest)
    return 0


def cmd_zeff(args):
    cfg = _load(args)
    if cfg["model.kind"] != "hubbard":
        raise ConfigError("zeff needs a Hubbard config")
    d = _outdir(args, cfg)
    manifest = {"version": __version__, "command": "zeff", "config": cfg.resolved()}
    try:
        with stage("build"):
            fam, V, spec = build_model(cfg)
        with stage("zeff"):
            omega = np.asarray(cfg["frequencies"], dtype=float)
            Z1 = first_order_zeff_hubbard(spec, omega)
            Zdb = double_bracket(V, fam, omega=omega)
            dev = float(np.abs(to_dense(Z1) - to_dense(Zdb)).max())
            serialize.save(Z1, d / "Z1.op")
        manifest["zeff"] = {"dense_oracle_deviation": dev, "norm_Z1": norm_kappa(Z1, 0.0)}
        print(f"Z1 written to {d / 'Z1.op'}; max entry deviation from the dense oracle {dev:.3e}")
    finally:
        _write_manifest(d, manifest)
    return 0


def _nu(cfg):
    om = np.asarray(cfg["frequencies"], dtype=float)
    return om * cfg["model.lambda"] if cfg["model.regime"] == "fast" else om


def _param(cfg):
    return cfg["model.lambda"] if cfg["model.regime"] == "fast" else cfg["model.epsilon"]


def _propagate(cfg, fam, V, nu, manifest):
    model = DenseModel.from_ops([fam.h0(V.m), V], nu)
    dt = cfg["dynamics.dt"]
    if dt is None:
        lmax = max((sum(map(abs, l)) for l in V.modes()), default=0)
        dt = default_dt(fam, nu, lmax, fam.lattice.n_sites)
    tr = propagate(model, cfg["dynamics.t_max"], dt, cfg["dynamics.method"],
                   snapshot_every=cfg["dynamics.snapshot_every"])
    manifest["dynamics"] = {"dt": dt, "method": tr.method, "unitarity_defect": tr.unitarity_defect,
                            "n_snapshots": len(tr.t_grid), "dense_dim": model.dim,
                            "dense_cap": dense_cap()}
    return tr


def _write_manifest(d, manifest):
    (d / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=1, sort_keys=True)
                                     + "\n")


def cmd_run(args):
    cfg = _load(args)
    d = _outdir(args, cfg)
    manifest = {"version": __version__, "command": "run", "config": cfg.resolved()}
    try:
        with stage("build"):
            fam, V, _ = build_model(cfg)
        with stage("certify"):
            c, _, manifest["certificates"] = certify(cfg, fam)
        with stage("normal-form"):
            out = normal_form(cfg, fam, V, c)
            manifest["normal_form"] = nf_manifest(out)
            write_csv(d / "trace.csv", TRACE_COLUMNS, trace_rows(out))
            if "op" in cfg["output.formats"]:
                serialize.save_normal_form(out, d / "operators")
            if out.schedule.regime == "small" and V.terms:
                solver = solve_hom_inv if out.variant == "inv" else solve_hom_obs
                sol = solver(V, fam, out.nu, check=False, residual=False)
                manifest["homological_residual_step0"] = homological_residual(
                    sol.G, V, sol.Z, fam, out.nu, seed=cfg["seed"])
        with stage("propagate"):
            tr = _propagate(cfg, fam, V, out.nu, manifest)
        with stage("diagnostics"):
            dc = drift_curve(tr, fam, _param(cfg))
            write_csv(d / "drift.csv", ("t", "alpha", "drift"), dc.rows())
            H_eff = to_dense(fam.h0(V.m) + out.Z)
            for i, (spec_o, O) in enumerate(observables(cfg, fam.lattice, fam.q)):
                err = compare_effective(tr, H_eff, O)
                name = "compare.csv" if i == 0 else f"compare_{i}.csv"
                write_csv(d / name, ("t", "error_true_vs_eff"), zip(tr.t_grid, err))
            manifest["observables"] = cfg["dynamics.observables"]
        with stage("recurrence"):
            rows = _recurrence(out.nu, cfg["recurrence.delta"], cfg["recurrence.j_count"],
                               cfg["recurrence.window"])
            write_csv(d / "recurrence.csv", REC_HEADER, rows)
        (d / "plot.gp").write_text(GNUPLOT_RECIPE)
    finally:
        _write_manifest(d, manifest)
    if args.figures:
        render_figures(d)
    return 0


def render_figures(d):
    """PNG previews of the CSV tables; needs the optional matplotlib extra."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("--figures: matplotlib is not installed (pip install artifact[figures]); "
              "CSV files and plot.gp are still written", file=sys.stderr)
        return
    d = Path(d)
    for name, xcol, ycol in (("trace", 0, 3), ("drift", 0, 2), ("compare", 0, 1)):
        p = d / f"{name}.csv"
        if not p.exists():
            continue
        data = np.genfromtxt(p, delimiter=",", skip_header=1)
        if data.ndim == 1:
            data = data[None, :]
        fig, ax = plt.subplots(figsize=(7, 4))
        if name == "drift":
            for a in np.unique(data[:, 1]):
                sel = data[:, 1] == a
                ax.plot(data[sel, 0], data[sel, 2], label=f"alpha={int(a)}")
            ax.legend()
        else:
            ax.plot(data[:, xcol], data[:, ycol], marker="o" if name == "trace" else None)
            if name == "trace":
                ax.set_yscale("log")
        ax.set_title(name)
        fig.savefig(d / f"{name}.png", dpi=100)
        plt.close(fig)


def build_parser():
    p = argparse.ArgumentParser(prog="qpnormal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=False, help="experiment config file")
        sp.add_argument("--out", help="output directory (default: output.directory)")
        sp.add_argument("--steps", type=int, help="override the normal-form step count")
        sp.add_argument("--delta", type=float, help="recurrence tolerance")
        sp.add_argument("--k-max", dest="k_max", type=int, help="Diophantine search range")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--omega", help="comma separated frequencies")
        sp.add_argument("--count", type=int, help="number of recurrence times")
        sp.add_argument("--figures", action="store_true", help="also render PNGs (matplotlib)")
        return sp

    common(sub.add_parser("run", help="full pipeline")).set_defaults(func=cmd_run)
    sp = common(sub.add_parser("diophantine", help="Diophantine certificates"))
    sp.add_argument("--tau", type=float, default=1.0)
    sp.set_defaults(func=cmd_diophantine)
    common(sub.add_parser("norms", help="kappa-norms of the model operators")).set_defaults(
        func=cmd_norms)
    common(sub.add_parser("normal-form", help="normal form only")).set_defaults(
        func=cmd_normal_form)
    common(sub.add_parser("evolve", help="propagate and write the drift curve")).set_defaults(
        func=cmd_evolve)
    sp = common(sub.add_parser("recurrence", help="recurrence times"))
    sp.add_argument("--window", type=float, default=300.0)
    sp.set_defaults(func=cmd_recurrence)
    common(sub.add_parser("zeff", help="first-order Hubbard effective term")).set_defaults(
        func=cmd_zeff)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except QPError as exc:
        msg = str(exc)
        if isinstance(exc, StageError):
            cause = exc.cause
        else:
            cause = exc
        from .errors import ResonanceError
        if isinstance(cause, ResonanceError) and "resonan" not in msg.lower():
            msg += " (resonant or outside the regime)"
        print(f"error: {msg}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver for the multiscale consolidation pipeline.

Each subcommand runs one stage and writes a fresh output directory holding
delimiter-separated tables, plain-text artifacts and ``manifest.json``
(config snapshot, input hashes, output hashes, versions, wall time).
``porohyper rerun DIR --out NEW`` repeats a stage from its manifest.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import artifacts as art
from .config import characteristic_set, load_config
from .exceptions import ConfigError, PorohyperError

log = logging.getLogger("porohyper")

_COMPONENTS = ("11", "12", "13", "21", "22", "23", "31", "32", "33")


def _f(v):
    return format(float(v), ".17g")


# -- input loaders ---------------------------------------------------------------

def _rve(path):
    from .mesh import load_mesh

    art.verify(path)
    stats = art.read_kv(Path(path) / "rve.tsv")
    return {"solid": load_mesh(Path(path) / "solid.msh"),
            "fluid_path": Path(path) / "fluid.msh",
            "solid_sha256": art.sha256_file(Path(path) / "solid.msh"),
            "porosity": float(stats["porosity"]), "solid_fraction": float(stats["solid_fraction"])}


def _conductivity(path):
    art.verify(path)
    _, rows = art.read_table(Path(path) / "conductivity.tsv")
    return np.array([r[1:4] for r in rows])


def _tangents(path):
    art.verify(path)
    _, rows = art.read_table(Path(path) / "tangents.tsv")
    M = np.zeros((3, 3, 3, 3))
    Q = np.zeros((3, 3))
    for r in rows:
        kind, i, j, k, l, v = r
        if kind == 0:
            M[int(i), int(j), int(k), int(l)] = v
        else:
            Q[int(i), int(j)] = v
    return M, Q


def _model(path):
    from .surrogate import MLPSurrogate

    man = art.verify(path)
    if not man["info"].get("gate_passed", False):
        raise PorohyperError(f"{path}: surrogate failed its accuracy gate; refusing macro use")
    return MLPSurrogate.load(Path(path) / "model.txt")


def _need(args, name):
    v = getattr(args, name)
    if v is None:
        raise ConfigError([f"--{name.replace('_', '-')}: required for this command"])
    return v


def _solid_problem(cfg, rve):
    from .cell import SolidCellProblem
    from .material import MaterialParams

    return SolidCellProblem(rve["solid"], MaterialParams(cfg["material"]["poisson_ratio"]))


# -- subcommands -----------------------------------------------------------------

def cmd_rve_gen(cfg, args, out):
    from .mesh import generate_voxel_rve, mesh_stats, three_channel_porosity, write_mesh

    g = cfg["geometry"]
    solid, fluid, phi = generate_voxel_rve(g["resolution"], g["channel_radius"])
    out.outputs["solid.msh"] = write_mesh(solid, out.path / "solid.msh")
    out.outputs["fluid.msh"] = write_mesh(fluid, out.path / "fluid.msh")
    out.adopt("solid.msh")
    out.adopt("fluid.msh")
    out.write_text("rve.tsv", art.write_kv([
        ("resolution", g["resolution"]), ("channel_radius", float(g["channel_radius"])),
        ("porosity", float(phi)), ("solid_fraction", float(1.0 - phi)),
        ("porosity_exact_geometry", float(three_channel_porosity(g["channel_radius"]))),
        ("solid_nodes", solid.n_nodes), ("solid_cells", solid.n_cells),
        ("fluid_nodes", fluid.n_nodes), ("fluid_cells", fluid.n_cells)]))
    out.write_text("solid_stats.tsv", mesh_stats(solid))
    out.write_text("fluid_stats.tsv", mesh_stats(fluid))
    out.info["porosity"] = float(phi)
    return f"porosity {phi:.6g}"


def cmd_cell_fluid(cfg, args, out):
    from .mesh import load_mesh
    from .stokes import solve_stokes_cell

    rdir = _need(args, "rve")
    art.verify(rdir)
    out.add_input("rve", rdir)
    fl = cfg["fluid"]
    sol = solve_stokes_cell(load_mesh(Path(rdir) / "fluid.msh"), viscosity=fl["viscosity"],
                            beta_coef=fl["beta_coef"], consistent=fl["consistent"])
    out.write_text("conductivity.tsv", sol.table())
    out.info["K_diag"] = np.diag(sol.K).tolist()
    return "K diagonal " + " ".join(f"{v:.6g}" for v in np.diag(sol.K))


def cmd_cell_solid(cfg, args, out):
    from .cell import MacroState, biot_modulus, tangents

    rdir = _need(args, "rve")
    rve = _rve(rdir)
    out.add_input("rve", rdir)
    s = cfg["solid"]
    problem = _solid_problem(cfg, rve)
    state = MacroState(np.reshape(s["grad_u0"], (3, 3)), s["p0"])
    resp, x = problem.solve(state, s["n_increments"])
    tp = tangents(problem.mesh, problem.pmap, problem.params, base=state, delta=s["delta"],
                  problem=problem, base_solution=x)
    rows = ["component\tavg_grad_u1\tmax_abs_grad_u1"]
    rows += [f"{c}\t{_f(a)}\t{_f(m)}" for c, a, m in zip(_COMPONENTS, resp.avg_grad_u1.ravel(),
                                                          resp.max_grad_u1.ravel())]
    out.write_text("response.tsv", "\n".join(rows) + "\n")
    rows = ["kind\ti\tj\tk\tl\tvalue"]
    for idx in np.ndindex(3, 3, 3, 3):
        rows.append("0\t" + "\t".join(str(v) for v in idx) + f"\t{_f(tp.M[idx])}")
    for i, j in np.ndindex(3, 3):
        rows.append(f"1\t{i}\t{j}\t0\t0\t{_f(tp.Q[i, j])}")
    out.write_text("tangents.tsv", "\n".join(rows) + "\n")
    Vs = problem.volume
    summary = [("solid_fraction", float(Vs)), ("psi_avg", resp.psi_avg), ("psi_max", resp.psi_max),
               ("biot_modulus", float(biot_modulus(tp.Q, Vs))),
               ("M2222", float(tp.M[1, 1, 1, 1])), ("M2211", float(tp.M[1, 1, 0, 0])),
               ("M1212", float(tp.M[0, 1, 0, 1])), ("Q22", float(tp.Q[1, 1])),
               ("solid_scaled_M2222", float(Vs * tp.M[1, 1, 1, 1])),
               ("solid_scaled_M2211", float(Vs * tp.M[1, 1, 0, 0])),
               ("solid_scaled_Q22", float(Vs * tp.Q[1, 1]))]
    out.write_text("summary.tsv", art.write_kv(summary))
    out.info.update({k: v for k, v in summary})
    return f"M2222 {tp.M[1, 1, 1, 1]:.6g}  M2211 {tp.M[1, 1, 0, 0]:.6g}  Q22 {tp.Q[1, 1]:.6g}"


def cmd_rve_sweep(cfg, args, out):
    from .cell import oat_sweep

    rdir = _need(args, "rve")
    rve = _rve(rdir)
    out.add_input("rve", rdir)
    K = None
    if args.fluid:
        K = _conductivity(args.fluid)
        out.add_input("fluid", args.fluid)
    sw = cfg["sweep"]
    values = np.linspace(sw["start"], sw["stop"], sw["num"])
    rows = oat_sweep(_solid_problem(cfg, rve), sw["component"], values, conductivity=K)
    head = (["value", "ok"] + [f"avg_{c}" for c in _COMPONENTS] + [f"max_{c}" for c in _COMPONENTS]
            + ["psi_avg", "psi_max"] + (["K11", "K22", "K33"] if K is not None else []))
    lines = ["\t".join(head)]
    nan = "nan"
    for r in rows:
        vals = [_f(r["value"]), "1" if r["ok"] else "0"]
        if r["ok"]:
            vals += [_f(v) for v in r["avg"].ravel()] + [_f(v) for v in r["max"].ravel()]
            vals += [_f(r["psi_avg"]), _f(r["psi_max"])]
            if K is not None:
                vals += [_f(v) for v in r["K_diag"]]
        else:
            vals += [nan] * (len(head) - 2)
        lines.append("\t".join(vals))
    out.write_text("sweep.tsv", "\n".join(lines) + "\n")
    failed = sum(not r["ok"] for r in rows)
    out.info["failed_points"] = failed
    return f"{len(rows) - failed}/{len(rows)} points converged"


def dataset_from_config(cfg, rve):
    from .surrogate import SamplerConfig, cell_dataset

    sm = cfg["sampler"]
    box = (tuple(sm["grad_range"]), tuple(sm["p_range"]))
    sc = SamplerConfig(steps=(sm["grad_step"], sm["p_step"]), tol=sm["tol"], max_depth=sm["max_depth"])
    return cell_dataset(_solid_problem(cfg, rve), box, sc, provenance={"rve_sha256": rve["solid_sha256"]})


def cmd_dataset(cfg, args, out):
    rdir = _need(args, "rve")
    rve = _rve(rdir)
    out.add_input("rve", rdir)
    ds = dataset_from_config(cfg, rve)
    out.write_text("dataset.tsv", ds.to_text())
    out.info.update({"samples": len(ds), "flagged": int(ds.flagged.sum()),
                     "failures": int(ds.provenance.get("failures", 0))})
    return f"{len(ds)} samples ({int(ds.flagged.sum())} flagged)"


def cmd_train(cfg, args, out):
    from .surrogate import Dataset, train

    ddir = _need(args, "dataset")
    art.verify(ddir)
    out.add_input("dataset", ddir)
    ds = Dataset.load(Path(ddir) / "dataset.tsv")
    tr = cfg["training"]
    model, rep = train(ds, holdout=tr["holdout"], seed=tr["seed"],
                       hidden_layer_sizes=tuple(int(k) for k in tr["hidden_layer_sizes"]),
                       learning_rate=tr["learning_rate"], max_epochs=tr["max_epochs"], tol=tr["tol"])
    out.write_text("model.txt", model.to_text())
    curve = ["epoch\tcost"] + [f"{k + 1}\t{_f(c)}" for k, c in enumerate(model.loss_curve_)
                               if k % 100 == 0 or k == len(model.loss_curve_) - 1]
    out.write_text("training.tsv", "\n".join(curve) + "\n")
    passed = rep.holdout_max_abs_error <= tr["gate"]
    report = [("samples", len(ds)), ("train_samples", len(rep.train_index)),
              ("holdout_samples", len(rep.test_index)), ("epochs", rep.epochs),
              ("final_cost", rep.final_cost), ("train_max_abs_error", rep.train_max_abs_error),
              ("holdout_max_abs_error", rep.holdout_max_abs_error), ("gate", float(tr["gate"])),
              ("gate_passed", int(passed))]
    out.write_text("report.tsv", art.write_kv(report))
    out.info.update({"gate_passed": bool(passed), "holdout_max_abs_error": rep.holdout_max_abs_error,
                     "model_sha256": model.digest()})
    return f"held-out max abs error {rep.holdout_max_abs_error:.3e} (gate {tr['gate']:g}: {'pass' if passed else 'FAIL'})"


def _column_setup(cfg):
    from .macro import ColumnSetup

    m = cfg["macro"]
    return ColumnSetup(height=m["height"], breadth=m["breadth"], divisions=tuple(int(d) for d in m["divisions"]),
                       load=m["load"], dt=m["dt"], t_end=m["t_end"], n_ramp=m["n_ramp"],
                       steady_tol=m["steady_tol"], stabilization=m["stabilization"],
                       refresh=m["refresh"], profile_every=m["profile_every"])


def cmd_consolidate(cfg, args, out):
    from .macro import (CellProvider, LinearMicroProvider, SurrogateProvider, derive_linear_params,
                        run_consolidation, run_linear_reference)
    from .material import MaterialParams

    m = cfg["macro"]
    setup = _column_setup(cfg)
    rdir = _need(args, "rve")
    rve = _rve(rdir)
    out.add_input("rve", rdir)
    fdir = _need(args, "fluid")
    K = _conductivity(fdir)
    out.add_input("fluid", fdir)
    params = MaterialParams(cfg["material"]["poisson_ratio"])
    Vs = rve["solid_fraction"]
    if m["solver"] == "linear":
        sdir = _need(args, "solid")
        M, Q = _tangents(sdir)
        out.add_input("solid", sdir)
        lin = derive_linear_params(M, Q, K, Vs, 1.0 - Vs, params)
        series = run_linear_reference(setup, lin)
    else:
        if m["provider"] == "surrogate":
            mdir = _need(args, "model")
            provider = SurrogateProvider(_model(mdir))
            out.add_input("model", mdir)
        elif m["provider"] == "cell":
            provider = CellProvider(_solid_problem(cfg, rve))
        else:
            provider = LinearMicroProvider()
        series = run_consolidation(setup, provider, K, Vs, params)
        if m["provider"] == "surrogate":
            out.info["extrapolated_evaluations"] = provider.n_extrapolated
    for which in ("history", "nodes", "cells"):
        out.write_text(f"{which}.tsv", series.table(which))
    s = series.settlement
    p = series.p_bottom
    summary = [("solver", m["solver"]), ("provider", m["provider"] if m["solver"] == "ale" else "none"),
               ("steps", series.meta["steps"]), ("steady", int(series.meta["steady"])),
               ("final_time", float(series.times[-1])), ("final_settlement", float(s[-1])),
               ("final_settlement_over_height", float(s[-1] / setup.height)),
               ("peak_bottom_pressure", float(p.max())), ("final_max_pressure", float(series.column("p_max")[-1])),
               ("drained_volume", float(series.drained[-1])),
               ("pore_volume_change", float(series.column("pore_volume_change")[-1]))]
    out.write_text("summary.tsv", art.write_kv(summary))
    out.info.update({k: v for k, v in summary})
    return f"{m['solver']}: final settlement {s[-1]:.6g} ({100 * s[-1] / setup.height:.2f}% of height) after {series.meta['steps']} steps"


def _decay_time(t, p, fraction=0.05):
    t, p = np.asarray(t, dtype=float), np.asarray(p, dtype=float)
    k = int(np.argmax(p))
    below = np.flatnonzero(p[k:] <= fraction * p[k])
    return float(t[k + below[0]]) if len(below) else float("nan")


def cmd_compare(cfg, args, out):
    a_dir, l_dir = _need(args, "ale"), _need(args, "linear")
    out.add_input("ale", a_dir)
    out.add_input("linear", l_dir)
    ha, ra = art.read_table(Path(a_dir) / "history.tsv")
    hl, rl = art.read_table(Path(l_dir) / "history.tsv")
    A, L = np.array(ra), np.array(rl)
    ia = {n: ha.index(n) for n in ha}
    n = max(len(A), len(L))
    chars = characteristic_set(cfg)
    lines = ["\t".join(["step", "time", "time_s", "settlement_ale", "settlement_linear", "p_bottom_ale",
                        "p_bottom_linear", "drained_ale", "drained_linear"])]
    for k in range(n):
        a = A[min(k, len(A) - 1)]
        lrow = L[min(k, len(L) - 1)]
        t = (A if len(A) >= len(L) else L)[k][ia["time"]]
        lines.append("\t".join([str(k), _f(t), _f(t * chars.time_scale)]
                               + [_f(x[ia[c]]) for c in ("settlement", "p_bottom", "drained") for x in (a, lrow)]))
    out.write_text("compare.tsv", "\n".join(lines) + "\n")
    sa, sl = A[-1, ia["settlement"]], L[-1, ia["settlement"]]
    ta = _decay_time(A[:, ia["time"]], A[:, ia["p_bottom"]])
    tl = _decay_time(L[:, ia["time"]], L[:, ia["p_bottom"]])
    summary = [("final_settlement_ale", float(sa)), ("final_settlement_linear", float(sl)),
               ("settlement_reduction", float(1.0 - sa / sl) if sl else float("nan")),
               ("pressure_5pct_time_ale", ta), ("pressure_5pct_time_linear", tl),
               ("drained_ale", float(A[-1, ia["drained"]])), ("drained_linear", float(L[-1, ia["drained"]])),
               ("time_scale_s", float(chars.time_scale))]
    out.write_text("summary.tsv", art.write_kv(summary))
    out.info.update({k: v for k, v in summary})
    return f"ALE/linear final settlement {sa:.6g}/{sl:.6g}"


def cmd_dimensionalize(cfg, args, out=None):
    from .scaling import dimensionalize, format_quantity, get_preset, nondimensionalize, KINDS

    chars = get_preset(args.preset) if args.preset else characteristic_set(cfg)
    if args.quantity not in KINDS:
        raise ConfigError([f"--quantity: unknown kind {args.quantity!r} (expected one of {sorted(KINDS)})"])
    if args.inverse:
        return f"{nondimensionalize(args.quantity, args.value, chars):.6g}"
    v, unit = dimensionalize(args.quantity, args.value, chars)
    return format_quantity(v, unit)


COMMANDS = {
    "rve-gen": cmd_rve_gen, "cell-fluid": cmd_cell_fluid, "cell-solid": cmd_cell_solid,
    "rve-sweep": cmd_rve_sweep, "dataset": cmd_dataset, "train": cmd_train,
    "consolidate": cmd_consolidate, "compare": cmd_compare,
}
_INPUT_FLAGS = ("rve", "fluid", "solid", "dataset", "model", "ale", "linear")


def _parse_set(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError([f"--set {item!r}: expected section.field=value"])
        out[key] = yaml.safe_load(value)
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="porohyper", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML run configuration")
        s.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE", help="override one config value")
        s.add_argument("--out", required=True, help="new output directory")
        for flag in _INPUT_FLAGS:
            s.add_argument(f"--{flag}", help=f"{flag} artifact directory")
        if name == "consolidate":
            s.add_argument("--provider", choices=("surrogate", "cell", "rigid"), help="overrides macro.provider")
            s.add_argument("--solver", choices=("ale", "linear"), help="overrides macro.solver")
            s.add_argument("--load", type=float, help="overrides macro.load")
    d = sub.add_parser("dimensionalize")
    d.add_argument("--preset", help="characteristic set (brain, soil)")
    d.add_argument("--quantity", required=True)
    d.add_argument("--value", type=float, required=True)
    d.add_argument("--inverse", action="store_true", help="convert an SI value to dimensionless")
    d.add_argument("--config")
    d.add_argument("--set", action="append")
    r = sub.add_parser("rerun", help="repeat a stage from its manifest")
    r.add_argument("manifest_dir")
    r.add_argument("--out", required=True)
    sub.add_parser("config-doc", help="print every configuration field with its default")
    return p


def _run_stage(command, cfg, args, argv):
    out = art.OutputDir(args.out, command)
    try:
        msg = COMMANDS[command](cfg, args, out)
    except BaseException as exc:
        out.finish(cfg, status="incomplete", error=f"{type(exc).__name__}: {exc}", argv=argv)
        raise
    out.finish(cfg, argv=argv)
    return msg


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "config-doc":
            from .config import describe

            print(describe(), end="")
            return 0
        if args.command == "rerun":
            man = art.read_manifest(args.manifest_dir)
            cfg = _validated(man["config"])
            ns = argparse.Namespace(out=args.out, **{f: man["inputs"].get(f, {}).get("path") for f in _INPUT_FLAGS})
            print(_run_stage(man["command"], cfg, ns, ["rerun", args.manifest_dir]))
            return 0
        overrides = _parse_set(args.set)
        for flag, key in (("provider", "macro.provider"), ("solver", "macro.solver"), ("load", "macro.load")):
            if getattr(args, flag, None) is not None:
                overrides[key] = getattr(args, flag)
        cfg = load_config(args.config, overrides)
        if args.command == "dimensionalize":
            print(cmd_dimensionalize(cfg, args))
            return 0
        print(_run_stage(args.command, cfg, args, argv))
        return 0
    except (PorohyperError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


def _validated(cfg):
    from .config import validate

    return validate(cfg)


def _one_line(exc):
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())

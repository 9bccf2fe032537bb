"""Command-line interface: run, verify, analyze-cost, decompose, make-mesh."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import cost
from .engine import SimConfig, TIMESERIES_COLUMNS, init_lattice, read_snapshot, run_serial, snapshot_text
from .mesh import Mesh, MeshError, dump_mesh, load_mesh
from .meshgen import extruded_polygon_box, hex_box

ORACLE_CAP = 2000
PARALLEL_TOL = 1e-10
FORCE_TOL = 1e-10
ERROR_PREFIX = "aica: error:"


class CliError(Exception):
    pass


# -- config and files -------------------------------------------------------------

_ALIASES = {"T": "temperature", "m": "mass", "eps": "epsilon", "rcut": "r_cut",
            "guard": "guard_fraction", "n_steps": "steps", "interval": "measure_interval"}


def parse_config(text: str, source: str = "<config>") -> SimConfig:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    fields = {f.name: f.type for f in dataclasses.fields(SimConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in fields:
            raise CliError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = int(val) if fields[key] == "int" else float(val)
        except ValueError:
            raise CliError(f"{source}:{lineno}: bad value {val!r} for {key}") from None
    try:
        return SimConfig(**values)
    except ValueError as exc:
        raise CliError(f"{source}: {exc}") from None


def read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {p}")
    return p.read_text()


def read_mesh(path) -> Mesh:
    text = read_text(path)
    try:
        return load_mesh(text)
    except MeshError as exc:
        raise CliError(f"{path}: {exc}") from None


def read_assignment(path, n_cells: int) -> np.ndarray:
    a = np.full(n_cells, -1, dtype=np.int64)
    for lineno, line in enumerate(read_text(path).splitlines(), 1):
        line = line.split("#", 1)[0].split()
        if not line:
            continue
        if len(line) != 2:
            raise CliError(f"{path}:{lineno}: expected 'cell_id rank'")
        c, r = int(line[0]), int(line[1])
        if not 0 <= c < n_cells:
            raise CliError(f"{path}:{lineno}: cell {c} out of range")
        a[c] = r
    if (a < 0).any():
        raise CliError(f"{path}: no rank given for cell {int(np.flatnonzero(a < 0)[0])}")
    return a


def slab_partition(mesh: Mesh, n_ranks: int, axis: str = "x") -> np.ndarray:
    """Equal-count slabs by sorting cell centroids along ``axis``."""
    if n_ranks < 1:
        raise CliError("ranks must be >= 1")
    if n_ranks > mesh.n_cells:
        raise CliError(f"{n_ranks} ranks for {mesh.n_cells} cells")
    a = "xyz".index(axis)
    order = np.lexsort((np.arange(mesh.n_cells), mesh.cell_centres[:, a]))
    out = np.empty(mesh.n_cells, dtype=np.int64)
    out[order] = np.arange(mesh.n_cells) * n_ranks // mesh.n_cells
    return out


def output_dir(arg) -> Path:
    d = Path(os.environ.get("AICA_OUT") or arg or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_timeseries(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(TIMESERIES_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(r[k])) if isinstance(r[k], float) else str(r[k])
                              for k in TIMESERIES_COLUMNS) + "\n")


def write_fields(path, fields: dict):
    with open(path, "w") as fh:
        fh.write("# cell count px py pz kinetic potential samples\n")
        for c, f in fields.items():
            p = f["momentum"]
            fh.write(f"{c} {f['count']!r} {p[0]!r} {p[1]!r} {p[2]!r} {f['kinetic']!r} "
                     f"{f['potential']!r} {f['samples']}\n")


# -- simulation helpers -------------------------------------------------------------

def _simulate(mesh, config, ranks, assignment=None, molecules=None, axis="x"):
    if ranks == 1 and assignment is None:
        return run_serial(mesh, config, molecules)
    from .parallel import run_parallel
    if assignment is None:
        assignment = slab_partition(mesh, ranks, axis)
    return run_parallel(mesh, assignment, config, molecules)


def periodic_box(mesh: Mesh):
    """Box lengths if ``mesh`` is a fully periodic axis-aligned box, else None."""
    lo, hi = mesh.bbox
    L = hi - lo
    shifts = set()
    for p in mesh.patches:
        if p.kind == "wall":
            return None
        if p.kind == "periodic":
            y = np.abs(p.transform.y)
            if p.transform.has_rotation or np.count_nonzero(y > mesh.tol) != 1:
                return None
            a = int(np.argmax(y))
            if abs(y[a] - L[a]) > 1e-9 * L[a]:
                return None
            shifts.add(a)
    return L if shifts == {0, 1, 2} else None


def force_deviation(forces, reference) -> float:
    """Largest per-molecule ``|F - F_ref| / |F_ref|``."""
    norm = np.linalg.norm(reference, axis=1)
    err = np.linalg.norm(forces - reference, axis=1)
    scale = np.where(norm > 0, norm, 1.0)
    return float((err / scale).max()) if len(err) else 0.0


def series_deviation(rows_a, rows_b, key) -> float:
    dev = 0.0
    for a, b in zip(rows_a, rows_b):
        den = max(abs(b[key]), 1e-300)
        dev = max(dev, abs(a[key] - b[key]) / den)
    return dev


# -- commands --------------------------------------------------------------------------

def cmd_run(args) -> int:
    mesh = read_mesh(args.mesh)
    config = parse_config(read_text(args.config), args.config) if args.config else SimConfig()
    if args.steps is not None:
        config = dataclasses.replace(config, steps=args.steps)
    assignment = read_assignment(args.assignment, mesh.n_cells) if args.assignment else None
    mols = read_snapshot(read_text(args.restart), mesh) if args.restart else None
    out = output_dir(args.out)
    res = _simulate(mesh, config, args.ranks, assignment, mols, args.axis)
    write_timeseries(out / "energy.csv", res.rows)
    (out / "snapshot.txt").write_text(snapshot_text(res.molecules))
    write_fields(out / "fields.txt", res.fields)
    (out / "topology.txt").write_text("".join(json.dumps(r) + "\n" for r in res.topology_reports))
    last = res.rows[-1]
    print(f"ran {config.steps} steps on {args.ranks} rank(s): N={last['n_molecules']} "
          f"TE/N={last['te_per_mol']:.10g}; outputs in {out}")
    return 0


def cmd_verify(args) -> int:
    from .oracle import minimum_image_forces
    mesh = read_mesh(args.mesh)
    config = parse_config(read_text(args.config), args.config) if args.config else SimConfig()
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.guard_fraction is not None:
        overrides["guard_fraction"] = args.guard_fraction
    config = dataclasses.replace(config, **overrides)
    mols = init_lattice(mesh, config.lattice, config.temperature, config.mass, config.seed,
                        config.max_molecules)
    ok = True
    serial = run_serial(mesh, config, mols)
    if args.ranks > 1:
        par = _simulate(mesh, config, args.ranks, None, mols, args.axis)
        for key in ("ke_per_mol", "pe_per_mol", "te_per_mol"):
            d = series_deviation(par.rows, serial.rows, key)
            good = d <= PARALLEL_TOL
            ok &= good
            print(f"{key:12s} max rel diff {d:.3e}  {'PASS' if good else 'FAIL'}")
        for key in ("px", "py", "pz"):
            scale = max(r["abs_momentum"] for r in serial.rows)
            d = max(abs(a[key] - b[key]) for a, b in zip(par.rows, serial.rows)) / scale
            good = d <= PARALLEL_TOL
            ok &= good
            print(f"{key:12s} max diff/sum|p| {d:.3e}  {'PASS' if good else 'FAIL'}")
    box = periodic_box(mesh)
    if len(mols) > ORACLE_CAP:
        print(f"oracle       skipped: N={len(mols)} exceeds cap {ORACLE_CAP}")
    elif box is None or box.min() <= 2 * config.r_cut:
        print("oracle       skipped: mesh is not a periodic box wider than 2 r_cut")
    else:
        # final state of the serial run; a perfect lattice has near-zero forces
        ref, _, _ = minimum_image_forces(serial.molecules.positions - mesh.bbox[0], box,
                                         config.epsilon, config.sigma, config.r_cut)
        d = force_deviation(serial.forces, ref)
        good = d <= FORCE_TOL
        ok &= good
        print(f"oracle       max rel force dev {d:.3e}  {'PASS' if good else 'FAIL'}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_analyze_cost(args) -> int:
    params = cost.CostParams(args.r_cut, args.delta_r, args.N, args.T, args.m, args.dt, args.L)
    out = output_dir(args.out)
    rows = cost.cost_curves(params)
    cost.write_csv(out / "cost_curves.csv", cost.COST_COLUMNS, rows)
    Ts = np.round(np.linspace(0.5, 2.0, 31), 10)
    Ns = [10 ** k for k in range(3, 7)]
    cost.write_csv(out / "lifetime.csv", cost.LIFETIME_COLUMNS,
                   cost.lifetime_table(Ts, Ns, args.delta_r, args.dt, args.m))
    print(f"L={params.lifetime()} v_N={cost.v_n(params.N, params.T, params.m):.6g} "
          f"crossover w/r_cut={cost.crossover(params):.6g}; outputs in {out}")
    return 0


def cmd_decompose(args) -> int:
    mesh = read_mesh(args.mesh)
    a = slab_partition(mesh, args.ranks, args.axis)
    text = "".join(f"{c} {r}\n" for c, r in enumerate(a))
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_make_mesh(args) -> int:
    if args.kind == "hex":
        mesh = hex_box(args.n, args.length, args.periodic, args.grading)
    else:
        mesh = extruded_polygon_box(args.n, args.length, periodic=args.periodic, seed=args.seed)
    Path(args.output).write_text(dump_mesh(mesh))
    s = mesh.summary()
    print(f"wrote {args.output}: {s['cells']} cells, {s['faces']} faces")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aica", description="Cell-list MD on arbitrary polyhedral meshes")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a simulation")
    p.add_argument("--mesh", required=True)
    p.add_argument("--config")
    p.add_argument("--ranks", type=int, default=1)
    p.add_argument("--assignment", help="file of 'cell_id rank' lines")
    p.add_argument("--axis", choices="xyz", default="x")
    p.add_argument("--steps", type=int)
    p.add_argument("--restart", help="snapshot to start from")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="serial/parallel and oracle checks")
    p.add_argument("--mesh", required=True)
    p.add_argument("--config")
    p.add_argument("--ranks", type=int, default=4)
    p.add_argument("--axis", choices="xyz", default="x")
    p.add_argument("--steps", type=int)
    p.add_argument("--guard-fraction", type=float)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze-cost", help="cost curves and list lifetime tables")
    p.add_argument("--r-cut", type=float, default=2.5)
    p.add_argument("--delta-r", type=float, default=0.4)
    p.add_argument("--N", type=int, default=27000)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=0.005)
    p.add_argument("--L", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_cost)

    p = sub.add_parser("decompose", help="slab partition of a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--ranks", type=int, required=True)
    p.add_argument("--axis", choices="xyz", default="x")
    p.add_argument("--output")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("make-mesh", help="write a box mesh")
    p.add_argument("kind", choices=["hex", "polygon"])
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--length", type=float, default=1.0)
    p.add_argument("--periodic", default="xyz")
    p.add_argument("--grading", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_make_mesh)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "ranks", 1) is not None and getattr(args, "ranks", 1) < 1:
        print(f"{ERROR_PREFIX} CliError: ranks must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes one diagnostic line
        msg = " ".join(str(exc).split())
        print(f"{ERROR_PREFIX} {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

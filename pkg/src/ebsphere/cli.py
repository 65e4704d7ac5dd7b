"""Command-line entry point.

Usage:  ebsphere <subcommand> --config run.yaml [--output DIR] [--resume] [--threads N]

Exit codes: 0 ok, 2 configuration/validation, 3 solver, 4 identity check, 5 I/O.
The output directory is taken from --output, else from $EB_OUTPUT_DIR, else
from the config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import diagnostics as dg
from . import ode_solver as od
from . import pde_solver as pde
from .errors import CheckpointError, ConfigurationError, EBError, IdentityCheckError, SolverError
from .model import Divisor, Mode, ModelParams, lambda_critical
from .sphere_grid import (ScalarField, build_grid, higgs_data, read_field_binary, write_field_binary,
                          write_field_csv, write_json)

log = logging.getLogger("ebsphere")

SUBCOMMANDS = ("solve-pde", "maximal-branch", "continue-volume", "solve-symmetric",
               "solve-cylindrical", "solve-chmy", "report-dissolving", "report-large-volume", "diagnose")
SCHEDULE_KINDS = ("lambda_list", "volume_list", "b_list", "c", "chmy")
NEEDS = {
    "solve-pde": "lambda_list", "maximal-branch": "lambda_list", "report-large-volume": "lambda_list",
    "continue-volume": "volume_list", "report-dissolving": "volume_list",
    "solve-symmetric": "b_list", "solve-cylindrical": "c", "solve-chmy": "chmy", "diagnose": None,
}


# ------------------------------------------------------------------ config

@dataclass
class ModelCfg:
    tau: float = 1.0
    N: int = 2
    mode: str = "compact"
    a: float | None = None          # planar only


@dataclass
class GridCfg:
    resolution: int = 128
    R_c: float = 1.2


@dataclass
class SolverCfg:
    newton_tol: float = pde.DEFAULT_TOL
    vol_tol: float = pde.DEFAULT_VOL_TOL
    max_iter: int = 60
    damping: str = "backtrack"
    init: str = "singular"          # singular | dissolving | ode_transfer
    ode_T: float = od.DEFAULT_T
    ode_step: float = od.DEFAULT_STEP


@dataclass
class SeedCfg:
    lam: float | None = None
    b: float | None = None          # seed from the symmetric ODE solution (N'*0 + N'*inf only)
    guess: str = "singular"


@dataclass
class OutputCfg:
    directory: str = "out"
    formats: list = field(default_factory=lambda: ["json", "csv", "binary"])


@dataclass
class CheckpointCfg:
    path: str | None = None
    resume: bool = False


@dataclass
class DiagnoseCfg:
    gauss_bonnet_tol: float = 1e-2
    flux_tol: float = 1e-2
    K_radius: float = 0.5
    gh_samples: int = 48


@dataclass
class RunConfig:
    model: ModelCfg
    divisor: list | dict | None
    grid: GridCfg
    solver: SolverCfg
    schedule: dict
    seed: SeedCfg
    output: OutputCfg
    checkpoint: CheckpointCfg
    diagnose: DiagnoseCfg

    @property
    def params(self) -> ModelParams:
        m = self.model
        if m.mode == "planar":
            return ModelParams.planar(self.schedule.get("chmy", {}).get("a", m.a), m.N)
        return ModelParams.compact(m.tau, m.N)

    def resolved(self) -> dict:
        out = dataclasses.asdict(self)
        try:
            out["model"]["alpha"] = self.params.alpha
        except EBError:
            pass
        return out


_SECTIONS = {"model": ModelCfg, "grid": GridCfg, "solver": SolverCfg, "seed": SeedCfg,
             "output": OutputCfg, "checkpoint": CheckpointCfg, "diagnose": DiagnoseCfg}


def _section(raw: dict, name: str, cls):
    sub = raw.get(name, {}) or {}
    if not isinstance(sub, dict):
        raise ConfigurationError(f"{name}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    alias = {"lambda": "lam"}
    kw = {}
    for k, v in sub.items():
        k2 = alias.get(k, k)
        if k2 not in names:
            raise ConfigurationError(f"{name}.{k}: unknown key (allowed: {sorted(names)})")
        kw[k2] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


def _positive(path, x):
    if not isinstance(x, (int, float)) or isinstance(x, bool) or not x > 0 or not math.isfinite(x):
        raise ConfigurationError(f"{path}: must be a positive number, got {x!r}")


def parse_config(raw) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    unknown = set(raw) - set(_SECTIONS) - {"divisor", "schedule"}
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
    secs = {k: _section(raw, k, c) for k, c in _SECTIONS.items()}
    sched = raw.get("schedule", {}) or {}
    if not isinstance(sched, dict):
        raise ConfigurationError("schedule: expected a mapping")
    kinds = [k for k in sched if k in SCHEDULE_KINDS]
    extra = set(sched) - set(SCHEDULE_KINDS) - {"steps", "spacing"}
    if extra:
        raise ConfigurationError(f"schedule: unknown keys {sorted(extra)}")
    if len(kinds) > 1:
        raise ConfigurationError(f"schedule: exactly one kind allowed, got {kinds}")
    s = secs["solver"]
    for k in ("newton_tol", "vol_tol", "ode_T", "ode_step"):
        _positive(f"solver.{k}", getattr(s, k))
    if not isinstance(s.max_iter, int) or s.max_iter < 1:
        raise ConfigurationError("solver.max_iter: must be a positive integer")
    if s.damping not in ("backtrack", "none"):
        raise ConfigurationError(f"solver.damping: unknown schedule {s.damping!r}")
    for k in ("lambda_list", "volume_list", "b_list"):
        if k in sched:
            vals = sched[k]
            if not isinstance(vals, list) or not vals:
                raise ConfigurationError(f"schedule.{k}: expected a non-empty list")
            for i, v in enumerate(vals):
                _positive(f"schedule.{k}[{i}]", v)
    if "c" in sched:
        _positive("schedule.c", sched["c"])
    if "chmy" in sched:
        ch = sched["chmy"]
        if not isinstance(ch, dict):
            raise ConfigurationError("schedule.chmy: expected a mapping")
        bad = set(ch) - {"a", "lambda", "r0", "r_max", "tol", "dt"}
        if bad:
            raise ConfigurationError(f"schedule.chmy: unknown keys {sorted(bad)}")
        for k, v in ch.items():
            if k != "a":
                _positive(f"schedule.chmy.{k}", v)
    if "steps" in sched and (not isinstance(sched["steps"], int) or sched["steps"] < 1):
        raise ConfigurationError("schedule.steps: must be a positive integer")
    m = secs["model"]
    if m.mode not in ("compact", "planar"):
        raise ConfigurationError(f"model.mode: must be 'compact' or 'planar', got {m.mode!r}")
    cfg = RunConfig(divisor=raw.get("divisor"), schedule=sched, **secs)
    try:
        cfg.params
    except EBError as exc:
        raise ConfigurationError(f"model: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from None
    return parse_config(raw)


def build_divisor(entry, N: int) -> Divisor:
    if entry is None:
        raise ConfigurationError("divisor: required for this subcommand")
    if isinstance(entry, dict):
        kind = entry.get("kind")
        if kind == "roots_of_unity":
            return Divisor.roots_of_unity(N)
        if kind == "polystable_pair":
            if N % 2:
                raise ConfigurationError("divisor.kind=polystable_pair needs even N")
            return Divisor.polystable_pair(N // 2)
        raise ConfigurationError(f"divisor.kind: unknown value {kind!r}")
    if isinstance(entry, list):
        try:
            return Divisor.from_records(entry)
        except EBError as exc:
            raise ConfigurationError(f"divisor: {exc}") from None
    raise ConfigurationError("divisor: expected a list of records or {kind: ...}")


# ------------------------------------------------------------------ checkpoints

def save_solution(sol: pde.EBSolutionCompact, stem: Path, formats=("binary",)) -> dict:
    stem = Path(stem)
    files = {}
    if "binary" in formats:
        files["binary"] = str(write_field_binary(sol.v, stem.with_suffix(".bin")))
        side = sol.summary()
        write_json(side, stem.with_suffix(".json"))
        files["sidecar"] = str(stem.with_suffix(".json"))
    if "csv" in formats:
        files["csv"] = str(write_field_csv(sol.v, stem.with_suffix(".csv")))
    return files


def load_solution(stem, grid=None) -> pde.EBSolutionCompact:
    stem = Path(stem)
    if stem.suffix in (".bin", ".json"):
        stem = stem.with_suffix("")
    try:
        side = json.loads(stem.with_suffix(".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read sidecar for {stem}: {exc}") from None
    try:
        v = read_field_binary(stem.with_suffix(".bin"), grid)
        v = ScalarField(np.nan_to_num(v.values), v.grid, "v")    # padding nodes are stored as nan
        params = ModelParams.compact(side["tau"], side["N"])
        D = Divisor.from_records(side["divisor"])
        hd = higgs_data(D, v.grid, scale=side.get("gauge_scale", 1.0))
        return pde.EBSolutionCompact(v=v, lam=float(side["lambda"]), params=params, divisor=D, higgs=hd,
                                     residual_norm=float(side["residual_norm"]), tol=float("nan"),
                                     iterations=int(side.get("iterations", 0)))
    except KeyError as exc:
        raise CheckpointError(f"sidecar {stem}.json lacks key {exc}") from None


# ------------------------------------------------------------------ commands

def _grid(cfg):
    return build_grid(cfg.grid.resolution, cfg.grid.R_c)


def _initial(cfg, hd, lam, params, grid):
    kind = cfg.solver.init
    if kind == "singular":
        return pde.singular_limit_guess(hd, lam, params)
    if kind == "dissolving":
        return pde.dissolving_guess(grid, lam, params)
    if kind == "ode_transfer":
        b = cfg.seed.b
        if b is None:
            raise ConfigurationError("solver.init=ode_transfer needs seed.b")
        prof = od.shoot_compact(b, params, T=cfg.solver.ode_T, step=cfg.solver.ode_step)
        return pde.ode_transfer_guess(prof, hd, params)
    raise ConfigurationError(f"solver.init: unknown value {kind!r}")


def cmd_solve_pde(cfg, out):
    params = cfg.params
    lams = cfg.schedule["lambda_list"]
    if len(lams) != 1:
        raise ConfigurationError("solve-pde takes exactly one value in schedule.lambda_list")
    lam = float(lams[0])
    grid = _grid(cfg)
    D = build_divisor(cfg.divisor, params.N)
    hd = higgs_data(D, grid)
    sol = pde.newton_solve(_initial(cfg, hd, lam, params, grid), lam, hd, params,
                           tol=cfg.solver.newton_tol, max_iter=cfg.solver.max_iter, damping=cfg.solver.damping)
    files = save_solution(sol, out / "solution", cfg.output.formats)
    return {"solution": sol.summary(), "diagnostics": dg.diagnose(sol), "files": files}


def _step_stem(out, lam):
    return out / "steps" / ("lambda_" + repr(float(lam)).replace(".", "p"))


def _maximal(cfg, out, resume):
    params = cfg.params
    lams = sorted((float(x) for x in cfg.schedule["lambda_list"]), reverse=True)
    grid = _grid(cfg)
    D = build_divisor(cfg.divisor, params.N)
    hd = higgs_data(D, grid)
    ck = Path(cfg.checkpoint.path) if cfg.checkpoint.path else out
    (ck / "steps").mkdir(parents=True, exist_ok=True)
    prior = None
    if resume:
        prior = pde.ContinuationPath(parameter="lambda")
        done = []
        for lam in sorted(lams):
            stem = _step_stem(ck, lam)
            if stem.with_suffix(".bin").exists():
                s = load_solution(stem, grid)
                s.higgs = hd
                s.__dict__.pop("Phi", None)
                s.__dict__.pop("rho", None)
                done.append((lam, s))
            else:
                break   # only a contiguous prefix from the smallest lam is reusable
        for lam, s in done:
            prior.solutions.append(s)
            prior.values.append(lam)
        log.info("resuming with %d stored steps", len(done))

    def on_step(sol):
        save_solution(sol, _step_stem(ck, sol.lam), ("binary",))

    path = pde.maximal_branch(lams, D, grid, params, tol=cfg.solver.newton_tol, max_iter=cfg.solver.max_iter,
                              higgs=hd, resume=prior, on_step=on_step)
    return path, D, grid, params


def cmd_maximal_branch(cfg, out, resume=False):
    path, D, grid, params = _maximal(cfg, out, resume)
    rows = []
    for s in path:
        vol, temper = dg.volume_and_temper(s)
        rows.append({"lambda": s.lam, "volume": vol, "temper": temper, "lambda_volume": s.lam * vol,
                     "residual_norm": s.residual_norm, "iterations": s.iterations, "sup_phi": s.Phi.sup(),
                     "v_sha256": _digest(s.v)})
    ok, margin = dg.comparison_check(path)
    if "csv" in cfg.output.formats:
        dg.write_steps_csv([{k: v for k, v in r.items() if k != "v_sha256"} for r in rows], out / "branch.csv")
    if not ok:
        raise IdentityCheckError(f"comparison inequality violated (margin {margin:.3e})")
    return {"steps": rows, "comparison_ok": ok, "comparison_margin": margin}


def _digest(field_):
    """sha256 of the active nodal values (padding is not stored in checkpoints)."""
    return hashlib.sha256(np.ascontiguousarray(field_.values[:, field_.grid.active]).tobytes()).hexdigest()


def _seed_solution(cfg, params, grid, hd):
    sd = cfg.seed
    if sd.b is not None:
        prof = od.shoot_compact(sd.b, params, T=cfg.solver.ode_T, step=cfg.solver.ode_step)
        lam = 2 * prof.lam
        guess = pde.ode_transfer_guess(prof, hd, params)
    else:
        if sd.lam is None:
            raise ConfigurationError("seed: give seed.lambda or seed.b")
        lam = float(sd.lam)
        guess = (pde.dissolving_guess(grid, lam, params) if sd.guess == "dissolving"
                 else pde.singular_limit_guess(hd, lam, params))
    return pde.newton_solve(guess, lam, hd, params, tol=cfg.solver.newton_tol, max_iter=cfg.solver.max_iter)


def _volume_path(cfg):
    params = cfg.params
    grid = _grid(cfg)
    D = build_divisor(cfg.divisor, params.N)
    hd = higgs_data(D, grid)
    seed = _seed_solution(cfg, params, grid, hd)
    targets = [float(x) for x in cfg.schedule["volume_list"]]
    path = pde.ContinuationPath(parameter="volume")
    cur = seed
    for V in targets:
        try:
            cur = pde.volume_constrained_solve(V, cur, tol=cfg.solver.newton_tol, vol_tol=cfg.solver.vol_tol,
                                               max_iter=cfg.solver.max_iter)
        except SolverError as exc:
            path.complete = False
            path.message = str(exc)
            break
        path.append(cur, V, {"lambda": cur.lam, "dlogV_dloglam": cur.dlogV_dloglam})
    return path


def cmd_continue_volume(cfg, out):
    path = _volume_path(cfg)
    rows = [{"volume": v, **d} for v, d in zip(path.values, path.diagnostics)]
    if rows and "csv" in cfg.output.formats:
        dg.write_steps_csv(rows, out / "volume_path.csv")
    if path.solutions and "binary" in cfg.output.formats:
        save_solution(path[-1], out / "final", ("binary",))
    if not path.complete:
        raise SolverError(f"continuation incomplete after {len(path)} steps: {path.message}")
    return {"steps": rows, "complete": path.complete}


def cmd_report_dissolving(cfg, out):
    path = _volume_path(cfg)
    rep = dg.dissolving_report(path)
    rep["complete"] = path.complete
    if rep["steps"] and "csv" in cfg.output.formats:
        dg.write_steps_csv(rep["steps"], out / "dissolving.csv")
    return rep


def cmd_report_large_volume(cfg, out, resume=False):
    path, D, grid, params = _maximal(cfg, out, resume)
    cone = dg.cone_metric(D, params, grid)
    rep = dg.large_volume_report(path, cfg.diagnose.K_radius, cone)
    ok, margin = dg.comparison_check(path)
    ex = dg.divisor_exclusion(grid, D)
    gh = [dg.gh_upper_bound(ScalarField(s.lam * s.rho.values, grid), cone.density, grid,
                            cfg.diagnose.gh_samples, exclude=ex) for s in path]
    for row, g in zip(rep["steps"], gh):
        row["gh_upper_bound"] = g
    rep.update({"comparison_ok": ok, "comparison_margin": margin, "cone_angles": [str(b) for b in cone.betas],
                "metrication_rel": dg.METRICATION_REL})
    if "csv" in cfg.output.formats:
        dg.write_steps_csv(rep["steps"], out / "large_volume.csv")
    return rep


def cmd_solve_symmetric(cfg, out):
    params = cfg.params
    res = []
    for b in cfg.schedule["b_list"]:
        prof = od.shoot_compact(float(b), params, T=cfg.solver.ode_T, step=cfg.solver.ode_step)
        geo = od.profile_geometry(prof)
        entry = {"b": float(b), "lambda": prof.lam, "lambda_pde": 2 * prof.lam,
                 "conserved_defect": od.conserved_defect(prof), **geo}
        stem = out / ("symmetric_b" + f"{float(b):g}".replace(".", "p"))
        if "csv" in cfg.output.formats:
            prof.to_csv(stem.with_suffix(".csv"))
        if "json" in cfg.output.formats:
            prof.to_json(stem.with_suffix(".json"), {"geometry": geo})
        res.append(entry)
    return {"profiles": res, "lambda": res[0]["lambda"] if len(res) == 1 else [r["lambda"] for r in res]}


def cmd_solve_cylindrical(cfg, out):
    params = cfg.params
    c = float(cfg.schedule["c"])
    prof = od.solve_cylindrical(c, params, step=cfg.solver.ode_step)
    geo = od.profile_geometry(prof)
    geo["second_order_crosscheck"] = od.second_order_crosscheck(prof)
    if "csv" in cfg.output.formats:
        prof.to_csv(out / "cylindrical.csv")
    return {"c": c, "lambda": prof.lam, "diagnostics": prof.meta, "geometry": geo}


def cmd_solve_chmy(cfg, out):
    ch = dict(cfg.schedule["chmy"])
    a = ch.pop("a", cfg.model.a)
    if a is None:
        raise ConfigurationError("schedule.chmy.a: required (or model.a)")
    params = ModelParams.planar(a, cfg.model.N)
    lam = ch.pop("lambda", 1.0)
    s, prof = od.chmy_solve(params, lam, r0=ch.get("r0", 1e-3), r_max=ch.get("r_max", 50.0),
                            tol=ch.get("tol", 1e-3), dt=ch.get("dt", od.DEFAULT_STEP))
    geo = od.profile_geometry(prof)
    decay = od.chmy_decay_checks(prof)
    if "csv" in cfg.output.formats:
        prof.to_csv(out / "chmy.csv")
    return {"s_star": s, "lambda": lam, "a": a, "geometry": geo, "decay": decay, "diagnostics": prof.meta}


def cmd_diagnose(cfg, out):
    if not cfg.checkpoint.path:
        raise ConfigurationError("checkpoint.path: required for diagnose")
    sol = load_solution(cfg.checkpoint.path)
    rep = dg.diagnose(sol)
    tol = cfg.diagnose
    rep["gauss_bonnet_tol"] = tol.gauss_bonnet_tol
    rep["flux_tol"] = tol.flux_tol
    if rep["gauss_bonnet_defect"] > tol.gauss_bonnet_tol or rep["flux_defect_rel"] > tol.flux_tol:
        write_json({"summary": rep}, out / "summary.json")
        raise IdentityCheckError(
            f"identity defects above tolerance (gauss_bonnet {rep['gauss_bonnet_defect']:.3e}, "
            f"flux {rep['flux_defect_rel']:.3e})")
    return rep


def run(subcommand: str, cfg: RunConfig, output: Path, resume: bool = False, threads: int | None = None) -> dict:
    if subcommand not in SUBCOMMANDS:
        raise ConfigurationError(f"unknown subcommand {subcommand!r}")
    need = NEEDS[subcommand]
    if need is not None and need not in cfg.schedule:
        raise ConfigurationError(f"{subcommand}: schedule.{need} is required")
    try:
        output.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create output directory {output}: {exc}") from None
    fn = {
        "solve-pde": cmd_solve_pde, "continue-volume": cmd_continue_volume,
        "solve-symmetric": cmd_solve_symmetric, "solve-cylindrical": cmd_solve_cylindrical,
        "solve-chmy": cmd_solve_chmy, "report-dissolving": cmd_report_dissolving, "diagnose": cmd_diagnose,
    }.get(subcommand)
    if subcommand == "maximal-branch":
        result = cmd_maximal_branch(cfg, output, resume)
    elif subcommand == "report-large-volume":
        result = cmd_report_large_volume(cfg, output, resume)
    else:
        result = fn(cfg, output)
    summary = {"subcommand": subcommand, "config": cfg.resolved(), "threads": threads, "result": result}
    write_json(summary, output / "summary.json")
    return summary


def build_parser():
    ap = argparse.ArgumentParser(prog="ebsphere", description=__doc__.split("\n")[0])
    ap.add_argument("subcommand", help=", ".join(SUBCOMMANDS))
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--output", help="output directory (overrides $EB_OUTPUT_DIR and the config)")
    ap.add_argument("--resume", action="store_true", help="reuse stored continuation steps")
    ap.add_argument("--threads", type=int, default=None, help="worker threads (speed only)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        if args.subcommand not in SUBCOMMANDS:
            raise ConfigurationError(f"unknown subcommand {args.subcommand!r} (choose from {', '.join(SUBCOMMANDS)})")
        cfg = load_config(args.config)
        out = Path(args.output or os.environ.get("EB_OUTPUT_DIR") or cfg.output.directory)
        if args.resume:
            cfg.checkpoint.resume = True
        summary = run(args.subcommand, cfg, out, resume=cfg.checkpoint.resume, threads=args.threads)
    except EBError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    log.info("wrote %s", out / "summary.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())

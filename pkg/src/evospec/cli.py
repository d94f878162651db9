"""Command-line pipeline: ingest, fit-trend, fit, gridsearch, simulate, evaluate, synth, verify, run.

Every command writes its artifacts through a staging directory, so a failed
or invalid run leaves existing outputs untouched. Each artifact embeds a
config hash computed from the command, its parameters and the content of its
inputs; a manifest next to the artifact records the hash, input and output
digests, seeds and library versions. ``evospec verify`` recomputes all of it.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import platform
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .evospectrum import smooth_radiation
from .fitting import (VARIANTS, FitError, FitResult, fit_model, grid_search_alpha, grid_search_offsets,
                      refine_quadratic)
from .ingest import (MINUTES_PER_DAY, IngestError, StationRecord, load_dataset, load_station_csv, local_phase_offset,
                     station_meta, write_station_csv)
from .likelihood import SolverError
from .simulate import (TargetSites, day_mask, evaluate_coverage, format_width_row, simulate_conditional,
                       simulate_unconditional)
from .synthetic import SyntheticConfig, make_synthetic
from .trend import TrendFit, fit_trend, residuals

log = logging.getLogger("evospec")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (FitError, SolverError, np.linalg.LinAlgError, FloatingPointError)
MANIFEST_SUFFIX = ".manifest.json"
DIR_MANIFEST = "manifest.json"


class ValidationError(Exception):
    """Invalid command-line input or configuration."""


# ---------------------------------------------------------------- hashing

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_path(path) -> str:
    """Digest of a file, or of every file in a directory except its manifest."""
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != DIR_MANIFEST):
        h.update(f.relative_to(path).as_posix().encode())
        h.update(sha256_file(f).encode())
    return h.hexdigest()


def config_hash(command: str, params: dict, input_digests: dict) -> str:
    payload = json.dumps({"command": command, "params": params, "inputs": input_digests},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def versions() -> dict:
    return {"evospec": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def embedded_hash(path) -> str | None:
    """Config hash stored inside an artifact, if it carries one."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text()).get("config_hash")
    if path.suffix == ".csv":
        with open(path) as fh:
            first = fh.readline().strip()
        return first.split("=", 1)[1] if first.startswith("# config_hash=") else None
    if path.suffix in (".bin", ".npz"):
        with np.load(path, allow_pickle=False) as z:
            return str(z["config_hash"]) if "config_hash" in z else None
    return None


# ---------------------------------------------------------------- staged output

@contextmanager
def staged_output(out: Path, is_dir: bool):
    """Directory to write outputs into; moved into place only on success."""
    out = Path(out)
    parent = out.parent
    parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=parent))
    try:
        yield stage
        if is_dir:
            backup = None
            if out.exists():
                backup = parent / f".{out.name}.old"
                if backup.exists():
                    shutil.rmtree(backup)
                out.rename(backup)
            stage.rename(out)
            if backup is not None:
                shutil.rmtree(backup)
        else:
            for f in sorted(stage.iterdir()):
                f.replace(parent / f.name)
    finally:
        if stage.exists():
            shutil.rmtree(stage)


def manifest_path(out: Path, is_dir: bool) -> Path:
    return out / DIR_MANIFEST if is_dir else out.with_name(out.name + MANIFEST_SUFFIX)


def _csv_header_line(h: str) -> str:
    return f"# config_hash={h}\n"


# ---------------------------------------------------------------- input helpers

def _require(path, role: str) -> Path:
    if path is None:
        raise ValidationError(f"--{role} is required")
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{role} input not found: {p}")
    return p


def _read_json(path, role: str) -> dict:
    try:
        return json.loads(_require(path, role).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def _load_model(path, data) -> FitResult:
    d = _read_json(path, "model")
    try:
        return FitResult.from_dict(d, _radiation(data))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: not a model artifact ({exc})") from None


def _radiation(data):
    return smooth_radiation(data.radiation)


def _targets(path) -> TargetSites:
    d = _read_json(path, "targets")
    try:
        return TargetSites.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: targets need sites with id, lon, lat ({exc})") from None


def read_series_csv(path) -> tuple[list, np.ndarray]:
    """Columns of a ``minute,<ids...>[,radiation]`` CSV, skipping ``#`` lines."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0][0] != "minute":
        raise ValidationError(f"{path}: header must start with 'minute'")
    header = rows[0][1:]
    try:
        vals = np.array([[float(c) if c.strip() else np.nan for c in r[1:]] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return header, vals.reshape(len(rows) - 1, len(header))


def write_series_csv(path, columns, names, comment: str) -> None:
    cols = np.asarray(columns, dtype=float)
    with open(path, "w", newline="") as fh:
        fh.write(comment)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["minute", *names])
        for t in range(cols.shape[1]):
            w.writerow([t + 1, *(repr(float(v)) for v in cols[:, t])])


def _runs(mask) -> list:
    """1-based inclusive [start, end] runs where ``mask`` is true."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(m.astype(int)))
    return [[int(a) + 1, int(b)] for a, b in zip(edges[::2], edges[1::2])]


def _mask_from_runs(runs, T: int) -> np.ndarray:
    mask = np.zeros(T, dtype=bool)
    for a, b in runs:
        mask[a - 1:b] = True
    return mask


def _trend_residuals(data_path, trend_path):
    data = load_dataset(_require(data_path, "data"))
    trend = TrendFit.from_json(_require(trend_path, "trend"))
    if len(trend.means.s) != data.n or len(trend.means.m_hat) != data.T:
        raise ValidationError("trend artifact does not match the dataset")
    return data, trend, residuals(data.temps, trend)


# ---------------------------------------------------------------- commands

def cmd_ingest(args, stage: Path, h: str) -> dict:
    data = load_station_csv(_require(args.csv, "csv"), _require(args.meta, "meta"))
    gaps = data.n_missing
    data = data.filled()
    with open(stage / Path(args.out).name, "wb") as fh:
        np.savez(fh, temps=data.temps, radiation=data.radiation,
                 meta=np.array(json.dumps(_meta_of(data))), config_hash=np.array(h))
    return {"sites": data.n, "T": data.T, "filled_gaps": gaps}


def _meta_of(data):
    return station_meta(data)


def cmd_fit_trend(args, stage: Path, h: str) -> dict:
    data = load_dataset(_require(args.data, "data"))
    bursts = _read_json(args.bursts, "bursts") if args.bursts else {}
    jump_day = None if args.no_jump else args.jump_day
    trend = fit_trend(data, bursts, jump_day=jump_day)
    trend.to_json(stage / Path(args.out).name, config_hash=h)
    flags = trend.jump.flags if trend.jump is not None else {}
    return {"jump_flags": flags}


def cmd_fit(args, stage: Path, h: str) -> dict:
    data, _, resid = _trend_residuals(args.data, args.trend)
    _, fit = fit_model(data, resid, args.offsets, args.alpha, args.variant,
                       hessian=not args.no_hessian, maxiter=args.maxiter)
    out = fit.to_dict()
    out["config_hash"] = h
    (stage / Path(args.out).name).write_text(json.dumps(out, indent=1))
    return {"negloglik": fit.negloglik, "convergence": fit.convergence}


def cmd_gridsearch(args, stage: Path, h: str) -> dict:
    spec = _read_json(args.grid, "grid")
    data, _, resid = _trend_residuals(args.data, args.trend)
    info = {}
    if "alphas" in spec:
        if "offsets" not in spec:
            raise ValidationError("an alpha search needs fixed 'offsets'")
        best, table = grid_search_alpha(data, resid, [float(a) for a in spec["alphas"]],
                                        tuple(spec["offsets"]), workers=args.parallel, maxiter=args.maxiter)
        info["best_alpha"] = best
    else:
        if "alpha" not in spec:
            raise ValidationError("an offset search needs a fixed 'alpha'")
        if "offsets" in spec:
            grid = [tuple(map(float, g)) for g in spec["offsets"]]
        elif "sunrise" in spec and "sunset" in spec:
            grid = list(itertools.product(map(float, spec["sunrise"]), map(float, spec["sunset"])))
        else:
            raise ValidationError("grid needs 'offsets' or 'sunrise' and 'sunset' lists")
        table = grid_search_offsets(data, resid, grid, float(spec["alpha"]), workers=args.parallel,
                                    maxiter=args.maxiter)
        point, refined = refine_quadratic(table)
        info.update(best=list(table.best[0]), refined=list(point), refined_by_quadratic=refined)
    table.to_csv(stage / Path(args.out).name, comment=f"config_hash={h}")
    info["failed_cells"] = int(sum(not np.isfinite(r[1]) for r in table.rows))
    return info


def cmd_simulate(args, stage: Path, h: str) -> dict:
    data, trend, resid = _trend_residuals(args.data, args.trend)
    fit = _load_model(args.model, data)
    targets = _targets(args.targets)
    ens = simulate_conditional(fit, trend, data, resid, targets, n_sims=args.nsims, seed=args.seed,
                               allow_unit_root=args.allow_unit_root, perturb=not args.no_perturb)
    lower, upper = ens.bands(args.level)
    part = fit.evo.partition
    info = []
    comment = _csv_header_line(h)
    for k, sid in enumerate(ens.site_ids):
        write_series_csv(stage / f"{sid}.csv", ens.draws[:, k], [f"draw_{i + 1}" for i in range(args.nsims)],
                         comment)
        write_series_csv(stage / f"{sid}_bands.csv", [lower[k], upper[k]], ["lower", "upper"], comment)
        lon, lat = targets.lonlat[k]
        phase = local_phase_offset(data.clock, lon, data.central_lon, lat, data.ref_lat)
        info.append({"id": sid, "lon": float(lon), "lat": float(lat), "elev": float(targets.elev[k]),
                     "phase": phase, "daytime": _runs(day_mask(part, phase))})
    summary = {"config_hash": h, "level": args.level, "nsims": args.nsims, "T": int(ens.draws.shape[2]),
               "targets": info, "seeds": ens.seeds, "weight_flags": ens.flags}
    (stage / "ensemble.json").write_text(json.dumps(summary, indent=1))
    return {"seed": args.seed, "nsims": args.nsims}


def cmd_evaluate(args, stage: Path, h: str) -> dict:
    ens_dir = _require(args.ens, "ens")
    summary = _read_json(ens_dir / "ensemble.json", "ens")
    names, truth = read_series_csv(_require(args.truth, "truth"))
    T = summary["T"]
    if truth.shape[0] != T:
        raise ValidationError(f"truth has {truth.shape[0]} minutes, ensemble has {T}")
    report = {"config_hash": h, "level": summary["level"], "sites": {}, "table": []}
    inside = []
    for tgt in summary["targets"]:
        sid = tgt["id"]
        if sid not in names:
            raise ValidationError(f"truth has no column for target {sid}")
        _, bands = read_series_csv(ens_dir / f"{sid}_bands.csv")
        lower, upper = bands[:, 0], bands[:, 1]
        x = truth[:, names.index(sid)]
        mask = _mask_from_runs(tgt["daytime"], T)
        rep = evaluate_coverage(lower, upper, x, mask)
        report["sites"][sid] = rep
        report["table"].append(format_width_row(sid, rep))
        inside.append((x >= lower) & (x <= upper))
    report["coverage"] = float(np.mean(inside))
    (stage / Path(args.out).name).write_text(json.dumps(report, indent=1))
    return {"coverage": report["coverage"]}


def _synth_config(spec: dict, args) -> SyntheticConfig:
    known = {f.name for f in fields(SyntheticConfig)}
    overrides = dict(spec.get("config", {}))
    bad = set(overrides) - known
    if bad:
        raise ValidationError(f"unknown synthetic settings: {sorted(bad)}")
    for key in ("offsets", "day_weights", "night_weights", "gamma", "central", "spread"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    if args.T % MINUTES_PER_DAY:
        raise ValidationError("--T must be a whole number of days (multiple of 1440)")
    overrides.update(days=args.T // MINUTES_PER_DAY, seed=args.seed)
    return SyntheticConfig(**overrides)


def cmd_synth(args, stage: Path, h: str) -> dict:
    spec = _read_json(args.sites, "sites")
    out = stage / Path(args.out).name
    sites = spec.get("sites")
    layout = None
    if sites:
        layout = ([s["id"] for s in sites], [[s["lon"], s["lat"]] for s in sites],
                  [s.get("elev", 0.0) for s in sites])
    if args.model is not None:
        # unconditional draw of the fitted model at the layout's sites
        base = load_dataset(_require(args.data, "data"))
        if base.T != args.T:
            raise ValidationError(f"--T {args.T} does not match the dataset length {base.T}")
        fit = _load_model(args.model, base)
        if layout is None:
            raise ValidationError("synth with --model needs explicit sites")
        data = _layout_dataset(base, layout)
        m = TrendFit.from_json(args.trend).means.m_hat if args.trend else None
        sim = simulate_unconditional(fit.evo, fit.coh, data, np.random.default_rng(args.seed), m=m)
        write_station_csv(sim, out)
        truth = {}
    else:
        cfg = _synth_config(spec, args)
        syn = make_synthetic(cfg, layout)
        write_station_csv(syn.data, out)
        truth = {"config": {f.name: getattr(cfg, f.name) for f in fields(cfg)},
                 "evo": syn.evo.to_dict(), "coherence": syn.coh.to_dict(), "s": syn.s.tolist(),
                 "jump": {k: np.asarray(v).tolist() for k, v in syn.jump_params.items() if k != "model"}}
    meta_file = out.with_suffix(".json")
    meta = json.loads(meta_file.read_text())
    meta["config_hash"] = h
    if truth:
        meta["truth"] = truth
    meta_file.write_text(json.dumps(meta, indent=1))
    return {"seed": args.seed}


def _layout_dataset(base, layout):
    ids, ll, elev = layout
    recs = tuple(StationRecord(sid, float(lo), float(la), float(e), np.zeros(base.T))
                 for sid, (lo, la), e in zip(ids, ll, elev))
    return replace(base, records=recs)


# ---------------------------------------------------------------- registry

# name -> (handler, input argument names, output is a directory)
COMMANDS = {
    "ingest": (cmd_ingest, ("csv", "meta"), False),
    "fit-trend": (cmd_fit_trend, ("data", "bursts"), False),
    "fit": (cmd_fit, ("data", "trend"), False),
    "gridsearch": (cmd_gridsearch, ("grid", "data", "trend"), False),
    "simulate": (cmd_simulate, ("model", "trend", "data", "targets"), True),
    "evaluate": (cmd_evaluate, ("ens", "truth"), False),
    "synth": (cmd_synth, ("sites", "model", "data", "trend"), False),
}
SKIP_PARAMS = {"command", "out", "verbose", "parallel"}


def _input_paths(args, names) -> dict:
    out = {}
    for name in names:
        p = getattr(args, name, None)
        if p is not None:
            out[name] = Path(p)
    return out


def _params(args, inputs) -> dict:
    return {k: v for k, v in sorted(vars(args).items())
            if k not in SKIP_PARAMS and k not in inputs and not callable(v)}


def _with_trend_sidecar(inputs: dict) -> dict:
    """Trend artifacts keep their arrays in a sibling file; hash both."""
    digests = {}
    for role, p in inputs.items():
        digests[role] = sha256_path(p)
        if role == "trend":
            side = p.with_suffix(".npz")
            if side.exists():
                digests["trend_arrays"] = sha256_file(side)
    return digests


def execute(args) -> dict:
    """Run one command with staged output; returns its manifest."""
    handler, input_names, is_dir = COMMANDS[args.command]
    if args.command == "gridsearch":
        spec = _read_json(args.grid, "grid")
        args.data = args.data or spec.get("data")
        args.trend = args.trend or spec.get("trend")
    inputs = _input_paths(args, input_names)
    for role, p in inputs.items():
        _require(p, role)
    digests = _with_trend_sidecar(inputs)
    params = _params(args, input_names)
    h = config_hash(args.command, params, digests)
    out = Path(args.out)
    with staged_output(out, is_dir) as stage:
        info = handler(args, stage, h)
        files = sorted(p for p in stage.rglob("*") if p.is_file())
        if is_dir:
            outputs = {p.relative_to(stage).as_posix(): sha256_file(p) for p in files}
        else:
            outputs = {p.name: sha256_file(p) for p in files}
        manifest = {"command": args.command, "config_hash": h, "params": params,
                    "inputs": {role: {"path": str(p), "sha256": digests[role]} for role, p in inputs.items()},
                    "input_digests": digests, "outputs": outputs, "primary": out.name,
                    "versions": versions(), "info": info}
        target = stage / DIR_MANIFEST if is_dir else stage / (out.name + MANIFEST_SUFFIX)
        target.write_text(json.dumps(manifest, indent=1, default=_json_default))
    return manifest


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def verify(path) -> list[str]:
    """Problems found re-checking an artifact against its manifest (empty when consistent)."""
    path = Path(path)
    if path.is_dir():
        man_path, base, is_dir = path / DIR_MANIFEST, path, True
    elif path.name.endswith(MANIFEST_SUFFIX):
        man_path, base, is_dir = path, path.parent, False
    else:
        man_path, base, is_dir = path.with_name(path.name + MANIFEST_SUFFIX), path.parent, False
    if not man_path.exists():
        raise ValidationError(f"no manifest found for {path}")
    man = json.loads(man_path.read_text())
    problems = []
    digests = {}
    for role, rec in man["inputs"].items():
        p = Path(rec["path"])
        if not p.exists():
            problems.append(f"input {role} missing: {p}")
            continue
    if not problems:
        digests = _with_trend_sidecar({role: Path(rec["path"]) for role, rec in man["inputs"].items()})
        if digests != man["input_digests"]:
            changed = sorted(k for k in set(digests) | set(man["input_digests"])
                             if digests.get(k) != man["input_digests"].get(k))
            problems.append(f"inputs changed since the run: {changed}")
        h = config_hash(man["command"], man["params"], digests)
        if h != man["config_hash"]:
            problems.append("recomputed config hash differs from the manifest")
    for name, digest in man["outputs"].items():
        if name == man_path.name and not is_dir:
            continue
        p = base / name
        if not p.exists():
            problems.append(f"output missing: {name}")
            continue
        if sha256_file(p) != digest:
            problems.append(f"output modified: {name}")
        emb = embedded_hash(p)
        if emb is not None and emb != man["config_hash"]:
            problems.append(f"embedded config hash differs in {name}")
    return problems


# ---------------------------------------------------------------- pipeline

def run_pipeline(config: dict, workdir: Path) -> dict:
    """Stages ``synth|ingest -> fit-trend -> gridsearch -> fit -> simulate -> evaluate``.

    Stages exchange files in ``workdir``; a failing stage raises
    :class:`StageError` naming it, and earlier artifacts stay in place.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    seed = config.get("seed")
    if seed is None:
        raise ValidationError("run config needs a 'seed'")
    stages = []

    def stage(name, argv):
        try:
            man = execute(build_parser().parse_args([name, *map(str, argv)]))
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            raise StageError(name, exc) from exc
        stages.append({"stage": name, "config_hash": man["config_hash"], "out": argv[argv.index("--out") + 1]})
        return man

    held_out = []
    if "synth" in config:
        sy = config["synth"]
        layout = workdir / "layout.json"
        layout.write_text(json.dumps({"config": sy.get("config", {}), "sites": sy.get("sites", [])}, indent=1))
        stage("synth", ["--sites", layout, "--T", sy["T"], "--seed", sy.get("seed", seed),
                        "--out", workdir / "synth.csv"])
        held_out = list(sy.get("hold_out", []))
        _split_held_out(workdir / "synth.csv", held_out, workdir)
        csv_path, meta_path = workdir / "observed.csv", workdir / "observed.json"
    elif "data" in config:
        csv_path, meta_path = Path(config["data"]["csv"]), Path(config["data"]["meta"])
    else:
        raise ValidationError("run config needs 'synth' or 'data'")
    dataset = workdir / "dataset.bin"
    stage("ingest", ["--csv", csv_path, "--meta", meta_path, "--out", dataset])

    tr = config.get("trend", {})
    trend_argv = ["--data", dataset, "--out", workdir / "trend.json"]
    if tr.get("jump_day") is None:
        trend_argv.append("--no-jump")
    else:
        trend_argv += ["--jump-day", tr["jump_day"]]
    if tr.get("bursts"):
        trend_argv += ["--bursts", tr["bursts"]]
    stage("fit-trend", trend_argv)

    fit_cfg = dict(config.get("fit", {}))
    offsets = tuple(fit_cfg.get("offsets", (0.0, 0.0)))
    alpha = float(fit_cfg.get("alpha", 0.99))
    common = ["--data", dataset, "--trend", workdir / "trend.json", "--parallel", config.get("parallel", 1)]
    if "gridsearch" in config:
        gs = config["gridsearch"]
        if "alphas" in gs:
            grid = workdir / "alpha_grid.json"
            grid.write_text(json.dumps({"alphas": gs["alphas"], "offsets": list(offsets)}))
            man = stage("gridsearch", ["--grid", grid, *common, "--out", workdir / "alpha_table.csv"])
            alpha = float(man["info"]["best_alpha"])
        if "offsets" in gs or "sunrise" in gs:
            grid = workdir / "offset_grid.json"
            grid.write_text(json.dumps({k: gs[k] for k in ("offsets", "sunrise", "sunset") if k in gs}
                                       | {"alpha": alpha}))
            man = stage("gridsearch", ["--grid", grid, *common, "--out", workdir / "offset_table.csv"])
            offsets = tuple(man["info"]["best"])
    model = workdir / "model.json"
    fit_argv = ["--data", dataset, "--trend", workdir / "trend.json", "--offsets", f"{offsets[0]},{offsets[1]}",
                "--alpha", alpha, "--variant", fit_cfg.get("variant", "full"), "--out", model]
    stage("fit", fit_argv)

    sim = config.get("simulate")
    if sim is not None:
        targets = Path(sim["targets"]) if "targets" in sim else workdir / "targets.json"
        if "targets" not in sim:
            if not held_out:
                raise ValidationError("simulate needs 'targets' or held-out synthetic sites")
            meta = json.loads((workdir / "synth.json").read_text())
            tsites = [s for s in meta["sites"] if s["id"] in held_out]
            targets.write_text(json.dumps({"sites": tsites}, indent=1))
        ens = workdir / "ens"
        sim_argv = ["--model", model, "--trend", workdir / "trend.json", "--data", dataset, "--targets", targets,
                    "--nsims", sim.get("nsims", 99), "--seed", sim.get("seed", seed),
                    "--level", sim.get("level", 0.9), "--out", ens]
        if sim.get("allow_unit_root"):
            sim_argv.append("--allow-unit-root")
        stage("simulate", sim_argv)
        truth = Path(config["evaluate"]["truth"]) if "evaluate" in config and "truth" in config["evaluate"] \
            else (workdir / "held_out.csv" if held_out else None)
        if truth is not None:
            stage("evaluate", ["--ens", ens, "--truth", truth, "--out", workdir / "report.json"])

    manifest = {"config": config, "config_hash": config_hash("run", config, {}), "stages": stages,
                "versions": versions()}
    (workdir / "run_manifest.json").write_text(json.dumps(manifest, indent=1, default=_json_default))
    return manifest


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _split_held_out(csv_path: Path, held_out, workdir: Path) -> None:
    """Write observed.csv/json without the held-out sites and held_out.csv with them."""
    data = load_station_csv(csv_path)
    ids = data.site_ids
    missing = set(held_out) - set(ids)
    if missing:
        raise ValidationError(f"held-out sites not in the synthetic layout: {sorted(missing)}")
    observed = data.subset([s for s in ids if s not in set(held_out)])
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    write_station_csv(observed, workdir / "observed.csv")
    om = json.loads((workdir / "observed.json").read_text())
    om["central"] = meta["central"]
    (workdir / "observed.json").write_text(json.dumps(om, indent=1))
    held = data.subset(held_out)
    write_series_csv(workdir / "held_out.csv", held.temps, held.site_ids, "")


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evospec", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="load a station CSV and sidecar JSON, fill gaps, write a dataset")
    s.add_argument("--csv", required=True, help="minute,<site ids>,radiation CSV")
    s.add_argument("--meta", required=True, help="sidecar JSON with sites, central site and days")
    s.add_argument("--out", required=True, help="dataset file to write")

    s = sub.add_parser("fit-trend", help="fit the mean curve, site means and the cold-front jump")
    s.add_argument("--data", required=True, help="dataset from ingest")
    s.add_argument("--bursts", help="JSON mapping site id to [[start, end], ...] minutes to replace")
    s.add_argument("--jump-day", type=int, default=5, help="day (1-based) containing the front")
    s.add_argument("--no-jump", action="store_true", help="skip the jump process")
    s.add_argument("--out", required=True, help="trend JSON (arrays go to a sibling .npz)")

    s = sub.add_parser("fit", help="maximize the space-time likelihood at fixed offsets and alpha")
    s.add_argument("--data", required=True)
    s.add_argument("--trend", required=True)
    s.add_argument("--offsets", type=_pair, default=(0.0, 0.0), help="sunrise,sunset offsets in minutes")
    s.add_argument("--alpha", type=float, default=0.99, help="partial differencing coefficient")
    s.add_argument("--variant", choices=VARIANTS, default="full")
    s.add_argument("--maxiter", type=int, default=200)
    s.add_argument("--no-hessian", action="store_true", help="skip the weight Hessian")
    s.add_argument("--out", required=True, help="model JSON")

    s = sub.add_parser("gridsearch", help="profile the likelihood over offsets or alpha")
    s.add_argument("--grid", required=True,
                   help="JSON: {alpha, sunrise:[..], sunset:[..]} or {alpha, offsets:[[a,b],..]} "
                        "or {offsets:[a,b], alphas:[..]}; may also name data and trend")
    s.add_argument("--data")
    s.add_argument("--trend")
    s.add_argument("--parallel", type=int, default=1, help="worker processes")
    s.add_argument("--maxiter", type=int, default=200)
    s.add_argument("--out", required=True, help="table CSV")

    s = sub.add_parser("simulate", help="conditional ensembles at target sites")
    s.add_argument("--model", required=True)
    s.add_argument("--trend", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--targets", required=True, help="JSON {sites:[{id,lon,lat,elev}]}")
    s.add_argument("--nsims", type=int, default=99)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--level", type=float, default=0.9, help="central band probability")
    s.add_argument("--allow-unit-root", action="store_true", help="simulate even when alpha = 1")
    s.add_argument("--no-perturb", action="store_true", help="keep the fitted weights in every draw")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("evaluate", help="coverage and band widths against held-out series")
    s.add_argument("--ens", required=True, help="directory from simulate")
    s.add_argument("--truth", required=True, help="minute,<site ids> CSV of held-out temperatures")
    s.add_argument("--out", required=True, help="report JSON")

    s = sub.add_parser("synth", help="simulate a station network")
    s.add_argument("--sites", required=True,
                   help="JSON with optional sites:[{id,lon,lat,elev}] and config:{synthetic settings}")
    s.add_argument("--model", help="draw from a fitted model instead of the built-in truth")
    s.add_argument("--data", help="dataset supplying radiation and days (with --model)")
    s.add_argument("--trend", help="trend whose mean curve is added (with --model)")
    s.add_argument("--T", type=int, required=True, help="record length in minutes")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="station CSV (metadata and truth go to a sibling .json)")

    s = sub.add_parser("verify", help="recompute an artifact's config hash and digests")
    s.add_argument("artifact", help="artifact file, its manifest, or an output directory")

    s = sub.add_parser("run", help="run the whole pipeline from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--workdir", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            problems = verify(args.artifact)
            for msg in problems:
                print(msg, file=sys.stderr)
            print("ok" if not problems else "mismatch")
            return EXIT_OK if not problems else EXIT_INVALID
        if args.command == "run":
            cfg = _read_json(args.config, "config")
            man = run_pipeline(cfg, Path(args.workdir))
            print(f"run complete: {len(man['stages'])} stages, manifest {Path(args.workdir) / 'run_manifest.json'}")
            return EXIT_OK
        man = execute(args)
        print(f"{args.command}: wrote {args.out} (config {man['config_hash'][:12]})")
        return EXIT_OK
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(exc.cause, NUMERICAL_ERRORS) else EXIT_INVALID
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, IngestError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver: configured runs, k-step verification, seed studies.

Commands
--------
run <config.json>      identify an invariant set, write result/history/samples
verify <result.json>   re-certify a finished run over k = 1..k_max map steps
study <config.json>    repeat a run over consecutive seeds and aggregate
systems                list built-in systems and their default parameters

A run directory contains config-echo.json, result.json, history.csv,
timings.csv, and samples/iter_####.csv.  Everything except timings.csv is a
pure function of (config, seed): re-running a command with the same inputs
reproduces those files byte for byte at any --threads setting.
"""

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .algorithm import CollapseError, RbfOptions, run, verify_k_step
from .ellipsoid import Ellipsoid
from .hybrid import (
    IntegrationOptions,
    NoConvergence,
    UnstableLinearization,
    contraction_init,
    fd_jacobian,
    find_fixed_point,
)
from .rbf import GAMMA_BALL, RBFSet
from .systems import SYSTEM_NAMES, build_system

OUTPUT_ROOT_ENV = "INVSET_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUDGET = 2


class ConfigError(ValueError):
    """Configuration file failed validation."""


_INTEGRATION_KEYS = {"rel_tol", "abs_tol", "guard_tol", "t_min", "max_flow_time", "method"}
_TOP_KEYS = {
    "system",
    "system_params",
    "representation",
    "N",
    "eps_target",
    "beta",
    "max_iters",
    "seed",
    "init",
    "integration",
    "rbf",
    "k_max",
    "output_dir",
}


def _reject_unknown(mapping, allowed, path):
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {path}")


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


def load_config(path) -> dict:
    """Parse and validate a run configuration, filling in defaults."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config {path} is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}"
        ) from exc
    _require(isinstance(raw, dict), "config root must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")

    cfg = {
        "system": raw.get("system"),
        "system_params": dict(raw.get("system_params", {})),
        "representation": raw.get("representation", "ellipsoid"),
        "N": int(raw.get("N", 1000)),
        "eps_target": float(raw.get("eps_target", 0.03)),
        "beta": float(raw.get("beta", 1e-9)),
        "max_iters": int(raw.get("max_iters", 500)),
        "seed": int(raw.get("seed", 0)),
        "init": dict(raw.get("init", {"mode": "contraction", "r": 5.0})),
        "integration": dict(raw.get("integration", {})),
        "rbf": dict(raw.get("rbf", {})),
        "k_max": int(raw.get("k_max", 20)),
        "output_dir": raw.get("output_dir", "invset-run"),
    }
    _require(cfg["system"] in SYSTEM_NAMES, f"system must be one of {SYSTEM_NAMES}")
    _require(cfg["representation"] in ("ellipsoid", "rbf"), "representation must be 'ellipsoid' or 'rbf'")
    _require(cfg["N"] >= 1, "N must be >= 1")
    _require(0.0 < cfg["eps_target"] < 1.0, "eps_target must be in (0, 1)")
    _require(0.0 < cfg["beta"] < 1.0, "beta must be in (0, 1)")
    _require(cfg["max_iters"] >= 1, "max_iters must be >= 1")
    _require(cfg["k_max"] >= 1, "k_max must be >= 1")

    _reject_unknown(cfg["integration"], _INTEGRATION_KEYS, "config.integration")
    defaults = IntegrationOptions()
    merged = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(defaults)}
    merged.update(cfg["integration"])
    try:
        IntegrationOptions(**merged)
    except ValueError as exc:
        raise ConfigError(f"config.integration: {exc}") from exc
    cfg["integration"] = merged

    init = cfg["init"]
    mode = init.get("mode")
    if mode == "explicit":
        _reject_unknown(init, {"mode", "ellipsoid"}, "config.init")
        _require("ellipsoid" in init, "explicit init requires an 'ellipsoid' block")
        try:
            Ellipsoid.from_dict(init["ellipsoid"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"config.init.ellipsoid: {exc}") from exc
    elif mode == "contraction":
        _reject_unknown(init, {"mode", "r", "fixed_point_seed"}, "config.init")
        init.setdefault("r", 5.0)
        _require(float(init["r"]) > 1.0, "contraction init requires r > 1")
    else:
        raise ConfigError("config.init.mode must be 'explicit' or 'contraction'")

    _reject_unknown(cfg["rbf"], {"m", "gamma", "coverage"}, "config.rbf")
    cfg["rbf"].setdefault("m", 2)
    cfg["rbf"].setdefault("gamma", GAMMA_BALL)
    cfg["rbf"].setdefault("coverage", 4.0)
    _require(int(cfg["rbf"]["m"]) >= 1, "rbf.m must be >= 1")
    _require(float(cfg["rbf"]["gamma"]) > 0.0, "rbf.gamma must be positive")
    return cfg


def _resolve_output_dir(cfg_dir: str) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
    path = Path(cfg_dir)
    return path if path.is_absolute() else root / path


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _float_cell(value) -> str:
    return repr(float(value))


def _write_history(outdir: Path, history):
    lines = ["iter,volume,violations,epsilon_star"]
    times = ["iter,wall_ms"]
    for rec in history.records:
        lines.append(
            f"{rec.iteration},{_float_cell(rec.volume)},{rec.violations},{_float_cell(rec.epsilon_star)}"
        )
        times.append(f"{rec.iteration},{_float_cell(rec.wall_ms)}")
    (outdir / "history.csv").write_text("\n".join(lines) + "\n")
    (outdir / "timings.csv").write_text("\n".join(times) + "\n")


def _write_samples(outdir: Path, history, dim: int):
    samples_dir = outdir / "samples"
    samples_dir.mkdir(exist_ok=True)
    header = (
        ",".join(f"x{i}" for i in range(dim))
        + ","
        + ",".join(f"y{i}" for i in range(dim))
        + ",contained"
    )
    for rec in history.records:
        if rec.batch is None:
            continue
        rows = [header]
        for xi, yi, flag in zip(rec.batch.inputs, rec.batch.outputs, rec.batch.flags):
            cells = [_float_cell(v) for v in xi] + [_float_cell(v) for v in yi]
            cells.append("1" if flag else "0")
            rows.append(",".join(cells))
        (samples_dir / f"iter_{rec.iteration:04d}.csv").write_text("\n".join(rows) + "\n")


def _set_payload(invariant_set) -> dict:
    if isinstance(invariant_set, Ellipsoid):
        return {"type": "ellipsoid", **invariant_set.to_dict()}
    if isinstance(invariant_set, RBFSet):
        return {"type": "rbf", **invariant_set.to_dict()}
    raise TypeError(f"unsupported set type {type(invariant_set)!r}")


def _set_from_payload(payload: dict):
    kind = payload.get("type")
    if kind == "ellipsoid":
        return Ellipsoid.from_dict(payload)
    if kind == "rbf":
        return RBFSet.from_dict(payload)
    raise ConfigError(f"unknown invariant set type {kind!r}")


def _build_from_config(cfg: dict, tightened: bool = False):
    options = IntegrationOptions(**cfg["integration"])
    if tightened:
        options = options.tightened()
    return build_system(cfg["system"], cfg["system_params"], options)


def _initial_ellipsoid(cfg: dict):
    """Initial set plus (fixed point, Floquet magnitudes) when linearizing."""
    init = cfg["init"]
    if init["mode"] == "explicit":
        return Ellipsoid.from_dict(init["ellipsoid"]), None, None
    bundle = _build_from_config(cfg, tightened=True)
    seed_point = init.get("fixed_point_seed", bundle.fixed_point_seed)
    if seed_point is None:
        raise ConfigError(f"system {cfg['system']} needs init.fixed_point_seed")
    fixed_point = find_fixed_point(bundle.poincare_map, np.asarray(seed_point, dtype=float))
    jacobian = fd_jacobian(bundle.poincare_map, fixed_point)
    magnitudes = sorted(np.abs(np.linalg.eigvals(jacobian)), reverse=True)
    initial = contraction_init(jacobian, float(init["r"]), center=fixed_point)
    return initial, fixed_point, [float(v) for v in magnitudes]


def _make_executor(threads: int, pmap):
    if threads > 1 and pmap.batch_evaluator is None:
        return ProcessPoolExecutor(max_workers=threads)
    return None


def cmd_run(config_path, threads: int) -> int:
    cfg = load_config(config_path)
    outdir = _resolve_output_dir(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    _write_json(outdir / "config-echo.json", cfg)

    bundle = _build_from_config(cfg)
    initial, fixed_point, floquet = _initial_ellipsoid(cfg)
    executor = _make_executor(threads, bundle.poincare_map)
    try:
        result = run(
            bundle.poincare_map,
            initial,
            cfg["N"],
            cfg["eps_target"],
            cfg["beta"],
            cfg["max_iters"],
            cfg["seed"],
            representation=cfg["representation"],
            rbf_options=RbfOptions(
                m=int(cfg["rbf"]["m"]),
                gamma=float(cfg["rbf"]["gamma"]),
                coverage=float(cfg["rbf"]["coverage"]),
            ),
            executor=executor,
        )
    finally:
        if executor is not None:
            executor.shutdown()

    payload = {
        "system": cfg["system"],
        "representation": cfg["representation"],
        "termination": result.history.termination,
        "iterations": result.history.iterations,
        "invariant_set": _set_payload(result.invariant_set),
        "certificate": result.certificate.to_dict(),
        "initial_set": _set_payload(initial),
        "fixed_point": None if fixed_point is None else [float(v) for v in fixed_point],
        "floquet_magnitudes": floquet,
        "config": cfg,
    }
    _write_json(outdir / "result.json", payload)
    _write_history(outdir, result.history)
    _write_samples(outdir, result.history, bundle.reduced_dim)
    print(
        f"{cfg['system']}: {result.history.termination} after "
        f"{result.history.iterations} iterations, epsilon_star = "
        f"{result.certificate.epsilon_star:.6f} -> {outdir}"
    )
    return EXIT_OK if result.history.termination == "certified" else EXIT_BUDGET


def cmd_verify(result_path, k_max: int, n_samples: int, seed: int, threads: int) -> int:
    result_file = Path(result_path)
    try:
        payload = json.loads(result_file.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load result file {result_path}: {exc}") from exc
    for key in ("config", "invariant_set"):
        if key not in payload:
            raise ConfigError(f"result file {result_path} is missing '{key}'")
    cfg = payload["config"]
    invariant_set = _set_from_payload(payload["invariant_set"])
    bundle = _build_from_config(cfg)
    executor = _make_executor(threads, bundle.poincare_map)
    try:
        records = verify_k_step(
            bundle.poincare_map,
            invariant_set,
            n_samples,
            k_max,
            float(cfg["beta"]),
            seed,
            executor=executor,
            coverage=float(cfg["rbf"]["coverage"]),
        )
    finally:
        if executor is not None:
            executor.shutdown()
    lines = ["k,violations,epsilon_star"]
    for rec in records:
        lines.append(f"{rec.steps},{rec.violations},{_float_cell(rec.epsilon_star)}")
    out = result_file.parent / "kstep.csv"
    out.write_text("\n".join(lines) + "\n")
    worst = max(rec.epsilon_star for rec in records)
    print(f"k-step verification: k <= {k_max}, worst epsilon_star = {worst:.6f} -> {out}")
    return EXIT_OK


def cmd_study(config_path, runs: int, threads: int) -> int:
    if runs < 2:
        raise ConfigError("study needs runs >= 2")
    cfg = load_config(config_path)
    outdir = _resolve_output_dir(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    _write_json(outdir / "config-echo.json", cfg)

    bundle = _build_from_config(cfg)
    initial, _, _ = _initial_ellipsoid(cfg)
    rbf_options = RbfOptions(
        m=int(cfg["rbf"]["m"]),
        gamma=float(cfg["rbf"]["gamma"]),
        coverage=float(cfg["rbf"]["coverage"]),
    )
    executor = _make_executor(threads, bundle.poincare_map)
    outcomes = []
    failures = []
    try:
        for offset in range(runs):
            seed = cfg["seed"] + offset
            try:
                result = run(
                    bundle.poincare_map,
                    initial,
                    cfg["N"],
                    cfg["eps_target"],
                    cfg["beta"],
                    cfg["max_iters"],
                    seed,
                    representation=cfg["representation"],
                    rbf_options=rbf_options,
                    executor=executor,
                    store_samples=False,
                )
                outcomes.append((seed, result))
            except (CollapseError, NoConvergence, UnstableLinearization) as exc:
                failures.append((seed, f"{type(exc).__name__}: {exc}"))
                print(f"seed {seed}: failed ({type(exc).__name__})", file=sys.stderr)
    finally:
        if executor is not None:
            executor.shutdown()
    if not outcomes:
        for seed, message in failures:
            print(f"seed {seed}: {message}", file=sys.stderr)
        return EXIT_ERROR

    run_lines = ["seed,termination,iterations,violations,epsilon_star,volume"]
    for seed, result in outcomes:
        vol = result.history.records[result.history.final_iteration - 1].volume
        run_lines.append(
            f"{seed},{result.history.termination},{result.history.iterations},"
            f"{result.certificate.violations},{_float_cell(result.certificate.epsilon_star)},"
            f"{_float_cell(vol)}"
        )
    (outdir / "study_runs.csv").write_text("\n".join(run_lines) + "\n")

    longest = max(result.history.iterations for _, result in outcomes)
    summary = ["iter,accuracy_mean,accuracy_std,volume_mean,volume_std"]
    for index in range(longest):
        accs, vols = [], []
        for _, result in outcomes:
            records = result.history.records
            rec = records[min(index, len(records) - 1)]  # carry the final iterate forward
            accs.append(1.0 - rec.epsilon_star)
            vols.append(rec.volume)
        accs, vols = np.asarray(accs), np.asarray(vols)
        summary.append(
            f"{index + 1},{_float_cell(accs.mean())},{_float_cell(accs.std())},"
            f"{_float_cell(vols.mean())},{_float_cell(vols.std())}"
        )
    (outdir / "study_summary.csv").write_text("\n".join(summary) + "\n")

    mean_iters = float(np.mean([result.history.iterations for _, result in outcomes]))
    print(
        f"study: {len(outcomes)}/{runs} runs completed, mean iterations "
        f"{mean_iters:.2f} -> {outdir}"
    )
    if failures or any(r.history.termination != "certified" for _, r in outcomes):
        return EXIT_BUDGET
    return EXIT_OK


def cmd_systems() -> int:
    for name in SYSTEM_NAMES:
        bundle = build_system(name)
        params = dataclasses.asdict(bundle.params)
        rendered = json.dumps(
            {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in params.items()}
        )
        print(f"{name} (reduced dim {bundle.reduced_dim}): {rendered}")
    return EXIT_OK


def _default_threads() -> int:
    return os.cpu_count() or 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="invset",
        description="Finite-step invariant sets for return maps with PAC certificates.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the identification pipeline from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--threads", type=int, default=_default_threads())

    p_verify = sub.add_parser("verify", help="k-step verification of a finished run")
    p_verify.add_argument("result")
    p_verify.add_argument("--kmax", type=int, default=20)
    p_verify.add_argument("--samples", type=int, default=1000)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--threads", type=int, default=_default_threads())

    p_study = sub.add_parser("study", help="repeat a run over consecutive seeds")
    p_study.add_argument("config")
    p_study.add_argument("--runs", type=int, default=10)
    p_study.add_argument("--threads", type=int, default=_default_threads())

    sub.add_parser("systems", help="list built-in systems with default parameters")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.threads)
        if args.command == "verify":
            return cmd_verify(args.result, args.kmax, args.samples, args.seed, args.threads)
        if args.command == "study":
            return cmd_study(args.config, args.runs, args.threads)
        return cmd_systems()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except CollapseError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except UnstableLinearization as exc:
        print(
            f"run failed: {exc}\nhint: the fixed point is not attracting; "
            "check the fixed_point_seed or system parameters",
            file=sys.stderr,
        )
        return EXIT_ERROR
    except NoConvergence as exc:
        print(
            f"run failed: {exc}\nhint: provide a better init.fixed_point_seed",
            file=sys.stderr,
        )
        return EXIT_ERROR


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()

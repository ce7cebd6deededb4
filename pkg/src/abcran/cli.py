"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure.  Option precedence is flags > ``--config`` JSON file > defaults.
Every run that produces artifacts writes a ``manifest.json`` next to them.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .decomposition import LossWeights, decompose, decompose_batched
from .diffcore import NonFiniteError
from .evaluator import compare_models, evaluate_rollout, write_error_field, write_report_csv
from .model import AbcranModel, ArchConfig, ModelFormatError, load_model, save_model
from .pde_data import (
    DatasetFormatError,
    GridSpec,
    InitialProfile,
    generate_dataset,
    make_parameter_grid,
    read_dataset,
    write_dataset,
)
from .trainer import TrainConfig, TrainingDivergedError, fit, sweep_alpha_beta

log = logging.getLogger("abcran")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


# (flag, type, default, help); defaults here are the documented built-in values
GRID_OPTS = [
    ("nx", int, 256, "spatial grid points"),
    ("x0", float, 0.0, "left boundary"),
    ("x1", float, 1.0, "right boundary"),
    ("nt", int, 200, "time steps"),
    ("t_final", float, 1.0, "total simulated time"),
    ("sigma_g", float, 5e-3, "Gaussian width (variance) of the initial pulse"),
    ("x_center", float, 0.0, "initial pulse centre"),
    ("mu_min", float, 0.775, "smallest training wave speed"),
    ("mu_max", float, 1.25, "largest training wave speed"),
    ("n_train", int, 20, "number of training wave speeds"),
]
ARCH_OPTS = [
    ("latent_dim", int, 2, "latent width r"),
    ("conv_channels", _ints, (8, 16), "encoder conv channels, comma separated"),
    ("kernel_sizes", _ints, (5, 5), "conv kernel sizes, comma separated"),
    ("dense_widths", _ints, (128,), "encoder hidden dense widths, comma separated"),
    ("lstm_hidden", int, 64, "LSTM hidden width"),
    ("k_in", int, 10, "input window length"),
    ("k_out", int, 10, "output window length"),
    ("field_scale", float, None, "input/output field scale (default: max |U| of the data)"),
]
TRAIN_OPTS = [
    ("loss", str, "decomposed", "propagator loss: mse or decomposed"),
    ("alpha", float, 0.7, "weight of the propagator term"),
    ("beta", float, 0.7, "weight of dissipation inside the propagator term"),
    ("noise_std", float, None, "denoising noise std (default: 1%% of max |U|)"),
    ("lr", float, 1e-3, "peak learning rate"),
    ("lr_min", float, 1e-5, "floor learning rate"),
    ("weight_decay", float, 1e-4, "AdamW decoupled weight decay"),
    ("t0", int, 25, "first restart period in epochs"),
    ("t_mult", int, 2, "restart period multiplier"),
    ("patience", int, 50, "early-stopping patience in epochs"),
    ("max_epochs", int, 500, "epoch budget"),
    ("batch_size", int, 16, "windows per optimisation step"),
    ("n_val", int, 2, "wave speeds held out for validation"),
]
SEED_OPT = [("seed", int, 0, "random seed")]


def _add_opts(p: argparse.ArgumentParser, table) -> None:
    for name, typ, default, help_ in table:
        flag = "--" + name.replace("_", "-")
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        p.add_argument(flag, dest=name, type=typ, default=argparse.SUPPRESS,
                       help=f"{help_} (default: {shown})")


def _resolve(ns: argparse.Namespace, tables) -> dict:
    values = {name: default for table in tables for name, _, default, _ in table}
    cfg_path = getattr(ns, "config", None)
    if cfg_path:
        try:
            file_cfg = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"cannot read config {cfg_path}: {exc}") from exc
        if isinstance(file_cfg.get("config"), dict) and "command" in file_cfg:
            # a previous run's manifest: reuse its resolved options, skip derived entries
            file_cfg = {k: val for k, val in file_cfg["config"].items() if k.replace("-", "_") in values}
        for key, val in file_cfg.items():
            key = key.replace("-", "_")
            if key not in values:
                raise UsageError(f"unknown config key {key!r}")
            typ = next(t for table in tables for n, t, _, _ in table if n == key)
            if typ in (_ints, _floats) and isinstance(val, list):
                val = ",".join(map(str, val))
            values[key] = typ(val) if val is not None else None
    for key in values:
        if key in vars(ns):
            values[key] = getattr(ns, key)
    return values


def _arch_from(values: dict, nx: int, data_scale: float) -> ArchConfig:
    return ArchConfig(
        nx=nx, latent_dim=values["latent_dim"], conv_channels=values["conv_channels"],
        kernel_sizes=values["kernel_sizes"], dense_widths=values["dense_widths"],
        lstm_hidden=values["lstm_hidden"], k_in=values["k_in"], k_out=values["k_out"],
        field_scale=values["field_scale"] if values["field_scale"] is not None else data_scale,
    )


def _train_config_from(values: dict) -> TrainConfig:
    return TrainConfig(
        alpha=values["alpha"], beta=values["beta"], noise_std=values["noise_std"], lr=values["lr"],
        lr_min=values["lr_min"], weight_decay=values["weight_decay"], restart_period=values["t0"],
        restart_mult=values["t_mult"], patience=values["patience"], max_epochs=values["max_epochs"],
        batch_size=values["batch_size"], seed=values["seed"], loss_mode=values["loss"], n_val=values["n_val"],
    )


def _write_manifest(out: Path, command: str, argv, config: dict, seed, artifacts, started: float) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "artifacts": sorted(str(a) for a in artifacts),
        "version": __version__,
        "duration_s": time.perf_counter() - started,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=list), encoding="utf-8")


def _data_scale(ds) -> float:
    return float(np.max(np.abs(ds.snapshots)))


# ----------------------------------------------------------------------------
# subcommands

def cmd_gen(ns, argv, started) -> int:
    v = _resolve(ns, [GRID_OPTS, SEED_OPT])
    grid = GridSpec(v["nx"], v["x0"], v["x1"], v["nt"], v["t_final"])
    profile = InitialProfile(v["sigma_g"], v["x_center"])
    pgrid = make_parameter_grid(v["mu_min"], v["mu_max"], v["n_train"])
    out = Path(ns.out)
    write_dataset(generate_dataset(grid, profile, pgrid.mu_train), out)
    write_dataset(generate_dataset(grid, profile, pgrid.mu_test), out / "test")
    listing = {"mu_train": list(pgrid.mu_train), "mu_test": list(pgrid.mu_test)}
    (out / "parameters.json").write_text(json.dumps(listing, indent=2), encoding="utf-8")
    print(json.dumps(listing))
    _write_manifest(out, "gen", argv, v, v["seed"],
                    ["meta.json", "snapshots.bin", "test/meta.json", "test/snapshots.bin", "parameters.json"],
                    started)
    return EXIT_OK


def cmd_train(ns, argv, started) -> int:
    v = _resolve(ns, [ARCH_OPTS, TRAIN_OPTS, SEED_OPT])
    ds = read_dataset(ns.data)
    arch = _arch_from(v, ds.grid.nx, _data_scale(ds))
    cfg = _train_config_from(v)
    model = AbcranModel(arch, seed=cfg.seed)
    report = fit(model, ds, cfg)
    out = Path(ns.out)
    save_model(model, out)
    report.write(out)
    _write_manifest(out, "train", argv, {**v, "arch": arch.to_dict()}, cfg.seed,
                    ["arch.json", "weights.bin", "report.csv", "summary.json"], started)
    print(json.dumps({"best_epoch": report.best_epoch, "stopped_epoch": report.stopped_epoch,
                      "best_val_loss": report.best_val_loss}))
    return EXIT_OK


def cmd_sweep(ns, argv, started) -> int:
    v = _resolve(ns, [ARCH_OPTS, TRAIN_OPTS, SEED_OPT])
    ds = read_dataset(ns.data)
    arch = _arch_from(v, ds.grid.nx, _data_scale(ds))
    base = _train_config_from(v)
    grid = [LossWeights(a, b) for a in _floats(ns.alphas) for b in _floats(ns.betas)]
    result = sweep_alpha_beta(grid, arch, ds, base, min_epochs=ns.min_epochs, jobs=ns.jobs)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "sweep.csv")
    (out / "best.json").write_text(json.dumps(result.best.as_dict(), indent=2), encoding="utf-8")
    _write_manifest(out, "sweep", argv, {**v, "alphas": ns.alphas, "betas": ns.betas,
                                         "min_epochs": ns.min_epochs, "jobs": ns.jobs},
                    base.seed, ["sweep.csv", "best.json"], started)
    print(json.dumps(result.best.as_dict()))
    return EXIT_OK


def _mu_indices(ns, ds) -> list[int]:
    if ns.mu is not None:
        idx = []
        for mu in ns.mu:
            hits = [i for i, m in enumerate(ds.mu_values) if abs(m - mu) <= 1e-12 * max(1.0, abs(mu))]
            if not hits:
                raise ValueError(f"mu={mu} not present in dataset {list(ds.mu_values)}")
            idx.append(hits[0])
        return idx
    return list(ns.mu_index) if ns.mu_index else list(range(ds.n_mu))


def cmd_eval(ns, argv, started) -> int:
    ds = read_dataset(ns.data)
    model = load_model(ns.model)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = [evaluate_rollout(model, ds, i, ns.start, ns.horizon) for i in _mu_indices(ns, ds)]
    write_report_csv(reports, out / "rollout.csv")
    artifacts = ["rollout.csv"]
    if ns.horizon >= 2:
        for i, rep in enumerate(reports):
            name = f"error_field_{i:03d}"
            write_error_field(rep, ds, out / name)
            artifacts += [f"{name}/meta.json", f"{name}/snapshots.bin"]
    summary = [{"mu": r.mu, "mean_mse": float(np.mean([s.mse for s in r.records])),
                "mean_abs_phase_lag": r.mean_abs_phase_lag()} for r in reports]
    print(json.dumps(summary))
    _write_manifest(out, "eval", argv, {"start": ns.start, "horizon": ns.horizon}, None, artifacts, started)
    return EXIT_OK


def cmd_compare(ns, argv, started) -> int:
    ds = read_dataset(ns.data)
    a, b = load_model(ns.model_a), load_model(ns.model_b)
    cmp = compare_models(a, b, ds, _mu_indices(ns, ds), ns.horizon, ns.start)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    cmp.write_csv(out / "compare.csv")
    (out / "summary.json").write_text(json.dumps(cmp.summary, indent=2), encoding="utf-8")
    print(json.dumps(cmp.summary))
    _write_manifest(out, "compare", argv, {"start": ns.start, "horizon": ns.horizon}, None,
                    ["compare.csv", "summary.json"], started)
    return EXIT_OK


def _read_raw(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 8:
        raise DatasetFormatError(f"{path}: length {len(raw)} is not a multiple of 8")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def cmd_decompose(ns, argv, started) -> int:
    truth, pred = _read_raw(ns.truth), _read_raw(ns.pred)
    if truth.shape != pred.shape:
        raise ValueError(f"size mismatch: {truth.size} vs {pred.size} values")
    if ns.nx:
        if truth.size % ns.nx:
            raise ValueError(f"{truth.size} values do not split into rows of {ns.nx}")
        dec = decompose_batched(truth.reshape(-1, ns.nx), pred.reshape(-1, ns.nx))
    else:
        dec = decompose(truth, pred)
    text = json.dumps(dec.to_dict(), indent=2)
    if ns.out:
        Path(ns.out).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_info(ns, argv, started) -> int:
    info: dict = {"version": __version__}
    if ns.data:
        ds = read_dataset(ns.data)
        info["dataset"] = {
            "shape": list(ds.snapshots.shape), "mu": ds.mu_values,
            "grid": vars(ds.grid), "profile": vars(ds.profile),
            "max_abs": _data_scale(ds),
        }
    if ns.model:
        m = load_model(ns.model)
        info["model"] = {"config": m.config.to_dict(), "layers": m.config.layer_names(),
                         "n_parameters": m.n_parameters(), "seed": m.seed}
    print(json.dumps(info, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="abcran", description=__doc__.splitlines()[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate train/test datasets of exact solutions")
    _add_opts(p, GRID_OPTS + SEED_OPT)
    p.add_argument("--config", help="JSON file of option values, or a previous manifest.json")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("sweep", cmd_sweep, "successive-halving sweep over alpha/beta")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON file of option values, or a previous manifest.json")
        _add_opts(p, ARCH_OPTS + TRAIN_OPTS + SEED_OPT)
        if name == "sweep":
            p.add_argument("--alphas", default="0.3,0.7", help="candidate alphas (default: 0.3,0.7)")
            p.add_argument("--betas", default="0.3,0.7", help="candidate betas (default: 0.3,0.7)")
            p.add_argument("--min-epochs", type=int, default=10, help="first-rung epoch budget (default: 10)")
            p.add_argument("--jobs", type=int, default=1, help="parallel candidate fits (default: 1)")
        p.set_defaults(func=func)

    for name, func, helptext in (("eval", cmd_eval, "rollout diagnostics for one model"),
                                 ("compare", cmd_compare, "side-by-side rollout comparison")):
        p = sub.add_parser(name, help=helptext)
        if name == "eval":
            p.add_argument("--model", required=True, help="model directory")
        else:
            p.add_argument("--model-a", required=True, help="baseline model directory")
            p.add_argument("--model-b", required=True, help="candidate model directory")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--mu-index", type=int, action="append", help="dataset index (repeatable; default: all)")
        p.add_argument("--mu", type=float, action="append", help="wave speed to select (repeatable)")
        p.add_argument("--start", type=int, default=0, help="first seed snapshot index (default: 0)")
        p.add_argument("--horizon", type=int, default=10, help="predicted steps (default: 10)")
        p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)

    p = sub.add_parser("decompose", help="dissipation/dispersion split of two raw f64le files")
    p.add_argument("--truth", required=True, help="reference values (raw little-endian f64)")
    p.add_argument("--pred", required=True, help="predicted values (raw little-endian f64)")
    p.add_argument("--nx", type=int, default=0, help="row width for per-row averaging (default: whole file)")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    p.add_argument("--out", help="also write the JSON here")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("info", help="describe a dataset and/or model directory")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--model", help="model directory")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    started = time.perf_counter()
    try:
        ns = parser.parse_args(argv)
        if not getattr(ns, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=getattr(logging, str(ns.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        return ns.func(ns, argv, started)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, ModelFormatError, ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

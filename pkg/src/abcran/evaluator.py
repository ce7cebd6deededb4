"""Long-horizon rollout diagnostics against the exact solution."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decomposition import decompose
from .model import AbcranModel, rollout
from .pde_data import GridSpec, WaveDataset, write_dataset

REPORT_COLUMNS = ["mu", "step", "t", "mse", "tau_diss", "tau_disp", "rho", "phase_lag"]


def pointwise_error(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return np.abs(pred - truth)


def phase_lag(pred_slice, truth_slice) -> int:
    """Integer shift (in cells) that best aligns ``pred`` with ``truth``.

    Maximises ``sum_i pred[i] * truth[(i + s) % nx]`` over
    ``s in [-nx//2, nx//2]``, taking the first maximum.  A positive value
    means the prediction sits behind the truth (lags, for rightward motion).
    """
    pred = np.asarray(pred_slice, dtype=np.float64)
    truth = np.asarray(truth_slice, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError("phase_lag expects two vectors of equal length")
    if np.ptp(truth) == 0:
        raise ValueError("phase lag is undefined for a constant truth slice")
    nx = truth.size
    shifts = np.arange(-(nx // 2), nx // 2 + 1)
    idx = (np.arange(nx)[None, :] + shifts[:, None]) % nx
    corr = truth[idx] @ pred
    return int(shifts[int(np.argmax(corr))])


@dataclass
class StepRecord:
    step: int
    t: float
    mse: float
    tau_diss: float
    tau_disp: float
    rho: float
    phase_lag: int


@dataclass
class RolloutReport:
    mu: float
    horizon: int
    start_index: int
    records: list[StepRecord]
    error_field: np.ndarray = field(repr=False)
    prediction: np.ndarray = field(repr=False)

    def rows(self) -> list[dict]:
        return [
            {"mu": self.mu, "step": r.step, "t": r.t, "mse": r.mse, "tau_diss": r.tau_diss,
             "tau_disp": r.tau_disp, "rho": r.rho, "phase_lag": r.phase_lag}
            for r in self.records
        ]

    def mean_abs_phase_lag(self) -> float:
        return float(np.mean([abs(r.phase_lag) for r in self.records]))


def write_report_csv(reports: Sequence[RolloutReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_error_field(report: RolloutReport, dataset: WaveDataset, path) -> None:
    """Store ``|pred - truth|`` in the dataset directory format.

    The time axis restarts at zero at the first predicted step.
    """
    if report.horizon < 2:
        raise ValueError("error fields need a horizon of at least 2 steps")
    g = dataset.grid
    grid = GridSpec(g.nx, g.x0, g.x1, report.horizon, g.dt * (report.horizon - 1))
    write_dataset(WaveDataset(grid, dataset.profile, [report.mu], report.error_field[None]), path)


def evaluate_rollout(
    model: AbcranModel,
    dataset: WaveDataset,
    mu_index: int,
    start_index: int,
    horizon: int,
) -> RolloutReport:
    cfg = model.config
    g = dataset.grid
    if not 0 <= mu_index < dataset.n_mu:
        raise IndexError(f"mu_index {mu_index} out of range")
    if horizon < 1 or start_index < 0 or start_index + cfg.k_in + horizon > g.nt:
        raise IndexError(
            f"start_index={start_index} + k_in={cfg.k_in} + horizon={horizon} exceeds nt={g.nt}"
        )
    if g.nx != cfg.nx:
        raise ValueError(f"dataset nx={g.nx} does not match model nx={cfg.nx}")
    snaps = dataset.snapshots[mu_index]
    first = start_index + cfg.k_in
    pred = rollout(model, snaps[start_index:first], horizon)
    truth = snaps[first:first + horizon]
    times = g.t()
    records = []
    for j in range(horizon):
        dec = decompose(truth[j], pred[j])
        records.append(StepRecord(
            step=j + 1, t=float(times[first + j]), mse=dec.tau, tau_diss=dec.tau_diss,
            tau_disp=dec.tau_disp, rho=dec.stats.rho, phase_lag=phase_lag(pred[j], truth[j]),
        ))
    return RolloutReport(
        mu=dataset.mu_values[mu_index], horizon=horizon, start_index=start_index,
        records=records, error_field=pointwise_error(pred, truth), prediction=pred,
    )


COMPARE_COLUMNS = [
    "mu", "step", "t",
    "mse_a", "mse_b", "delta_mse",
    "tau_diss_a", "tau_diss_b", "delta_tau_diss",
    "tau_disp_a", "tau_disp_b", "delta_tau_disp",
    "phase_lag_a", "phase_lag_b", "delta_abs_phase_lag",
]


@dataclass
class Comparison:
    rows: list[dict]
    summary: dict

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def compare_models(
    model_a: AbcranModel,
    model_b: AbcranModel,
    dataset: WaveDataset,
    mu_indices: Sequence[int],
    horizon: int,
    start_index: int = 0,
) -> Comparison:
    """Side-by-side rollout metrics; deltas are ``b - a``."""
    ca, cb = model_a.config, model_b.config
    if ca.nx != cb.nx or ca.nx != dataset.grid.nx:
        raise ValueError("models and dataset must share the spatial grid")
    if ca.k_in != cb.k_in:
        raise ValueError("models must consume the same seed window length")
    rows = []
    for mi in mu_indices:
        ra = evaluate_rollout(model_a, dataset, mi, start_index, horizon)
        rb = evaluate_rollout(model_b, dataset, mi, start_index, horizon)
        for a, b in zip(ra.records, rb.records):
            rows.append({
                "mu": ra.mu, "step": a.step, "t": a.t,
                "mse_a": a.mse, "mse_b": b.mse, "delta_mse": b.mse - a.mse,
                "tau_diss_a": a.tau_diss, "tau_diss_b": b.tau_diss, "delta_tau_diss": b.tau_diss - a.tau_diss,
                "tau_disp_a": a.tau_disp, "tau_disp_b": b.tau_disp, "delta_tau_disp": b.tau_disp - a.tau_disp,
                "phase_lag_a": a.phase_lag, "phase_lag_b": b.phase_lag,
                "delta_abs_phase_lag": abs(b.phase_lag) - abs(a.phase_lag),
            })
    summary = {}
    for tag in ("a", "b"):
        summary[f"mean_mse_{tag}"] = float(np.mean([r[f"mse_{tag}"] for r in rows]))
        summary[f"mean_tau_diss_{tag}"] = float(np.mean([r[f"tau_diss_{tag}"] for r in rows]))
        summary[f"mean_tau_disp_{tag}"] = float(np.mean([r[f"tau_disp_{tag}"] for r in rows]))
        summary[f"mean_abs_phase_lag_{tag}"] = float(np.mean([abs(r[f"phase_lag_{tag}"]) for r in rows]))
    return Comparison(rows, summary)

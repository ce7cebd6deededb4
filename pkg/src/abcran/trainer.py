"""Training loop: denoising reconstruction plus a decomposed propagator loss.

Each optimisation step encodes a noise-corrupted input window, scores the
reconstruction against the clean window, advances the latents with the
propagator, decodes the predictions back to physical space and scores them
against the true target window.  The two terms are blended as
``(1 - alpha) * decoder + alpha * propagator`` where the propagator term is
either plain MSE or ``(1 - beta) * disp + beta * diss``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .decomposition import ErrorDecomposition, LossWeights, decompose_batched, weighted_decomposition_loss
from .diffcore import Parameter, Tape
from .model import AbcranModel, ArchConfig
from .pde_data import WaveDataset

log = logging.getLogger(__name__)

LOSS_MODES = ("mse", "decomposed")


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.7
    beta: float = 0.7
    noise_std: float | None = None  # None: 1% of the largest |value| in the data
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-4
    restart_period: int = 25
    restart_mult: int = 2
    patience: int = 50
    max_epochs: int = 500
    batch_size: int = 16
    seed: int = 0
    loss_mode: str = "decomposed"
    n_val: int = 2

    def __post_init__(self) -> None:
        LossWeights(self.alpha, self.beta)
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.noise_std is not None and self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if not self.lr > 0 or self.lr_min < 0 or self.weight_decay < 0:
            raise ValueError("need lr > 0, lr_min >= 0, weight_decay >= 0")
        if self.restart_period < 1 or self.restart_mult < 1:
            raise ValueError("restart_period and restart_mult must be positive")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs, batch_size and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.n_val < 1:
            raise ValueError("n_val must be >= 1")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    tau_diss: float
    tau_disp: float
    decoder_loss: float
    propagator_loss: float
    val_mse: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    config: dict = field(default_factory=dict)
    train_mu: list[float] = field(default_factory=list)
    val_mu: list[float] = field(default_factory=list)

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch - 1].val_loss

    @property
    def best_val_mse(self) -> float:
        return self.records[self.best_epoch - 1].val_mse

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "best_val_loss": self.best_val_loss,
            "train_mu": self.train_mu,
            "val_mu": self.val_mu,
            "config": self.config,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["epoch", "lr", "train_loss", "val_loss", "tau_diss", "tau_disp",
                "decoder_loss", "propagator_loss", "val_mse"]
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                row = asdict(r)
                w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2), encoding="utf-8")


# ----------------------------------------------------------------------------
# schedule and optimiser

def cosine_warm_restart_lr(epoch: int, lr_max: float, lr_min: float, t0: int, mult: int = 1) -> float:
    """Cosine annealing with warm restarts; cycle lengths t0, t0*mult, t0*mult**2, ..."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    t_cur, period = epoch, t0
    while t_cur >= period:
        t_cur -= period
        period *= mult
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t_cur / period))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, Parameter],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr_t: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamWState:
    """In-place AdamW update with decoupled weight decay; returns ``state``."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name}")
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if not p.trainable:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p.value
        p.value = p.value - lr_t * step
    return state


# ----------------------------------------------------------------------------
# losses

def add_noise(batch: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    if noise_std == 0:
        return batch.copy()
    return batch + rng.normal(0.0, noise_std, size=batch.shape)


def _flat_frames(x: np.ndarray, nx: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != nx:
        raise ValueError(f"expected trailing width {nx}, got {x.shape}")
    return x.reshape(-1, nx)


def _decoder_loss_graph(tape: Tape, model: AbcranModel, latents: dc.Tensor, clean: np.ndarray) -> dc.Tensor:
    return dc.mse(model.decode_graph(tape, latents), clean)


def _propagator_loss_graph(
    tape: Tape,
    model: AbcranModel,
    latents_in: dc.Tensor,
    target: np.ndarray,
    mode: str,
    beta: float,
) -> tuple[dc.Tensor, ErrorDecomposition]:
    cfg = model.config
    bsz = latents_in.shape[0]
    pred_lat = model.propagate_graph(tape, latents_in)
    pred = model.decode_graph(tape, dc.reshape(pred_lat, (bsz * cfg.k_out, cfg.latent_dim)))
    pred = dc.reshape(pred, (bsz, cfg.k_out, cfg.nx))
    if mode == "decomposed":
        return weighted_decomposition_loss(pred, target, w_diss=beta, w_disp=1.0 - beta)
    if mode == "mse":
        return dc.mse(pred, target), decompose_batched(target, pred.value)
    raise ValueError(f"unknown loss mode {mode!r}")


def denoising_decoder_loss(model: AbcranModel, clean_batch, rng: np.random.Generator, noise_std: float) -> float:
    """MSE between the reconstruction of a noisy copy and the clean fields."""
    clean = _flat_frames(clean_batch, model.config.nx)
    noisy = add_noise(clean, noise_std, rng)
    tape = Tape()
    latents = model.encode_graph(tape, tape.constant(noisy))
    return float(_decoder_loss_graph(tape, model, latents, clean).value)


def propagator_loss(
    model: AbcranModel,
    window_in,
    window_target,
    mode: str,
    weights: LossWeights,
) -> tuple[float, ErrorDecomposition]:
    cfg = model.config
    window_in = np.asarray(window_in, dtype=np.float64)
    target = np.asarray(window_target, dtype=np.float64)
    bsz = window_in.shape[0]
    if window_in.shape != (bsz, cfg.k_in, cfg.nx) or target.shape != (bsz, cfg.k_out, cfg.nx):
        raise ValueError(f"window shapes {window_in.shape}, {target.shape} do not fit the model")
    tape = Tape()
    lat = model.encode_graph(tape, tape.constant(window_in.reshape(-1, cfg.nx)))
    lat = dc.reshape(lat, (bsz, cfg.k_in, cfg.latent_dim))
    loss, dec = _propagator_loss_graph(tape, model, lat, target, mode, weights.beta)
    return float(loss.value), dec


@dataclass
class StepResult:
    loss: float
    decoder_loss: float
    propagator_loss: float
    decomposition: ErrorDecomposition
    grads: dict[str, np.ndarray] | None


def composite_step(
    model: AbcranModel,
    window_in: np.ndarray,
    window_target: np.ndarray,
    noisy_in: np.ndarray,
    config: TrainConfig,
    with_grad: bool = True,
) -> StepResult:
    """One forward (and optionally backward) pass of the blended objective."""
    cfg = model.config
    bsz = window_in.shape[0]
    tape = Tape()
    lat = model.encode_graph(tape, tape.constant(noisy_in.reshape(-1, cfg.nx)))
    dec_loss = _decoder_loss_graph(tape, model, lat, window_in.reshape(-1, cfg.nx))
    lat_seq = dc.reshape(lat, (bsz, cfg.k_in, cfg.latent_dim))
    prop_loss, decomp = _propagator_loss_graph(tape, model, lat_seq, window_target, config.loss_mode, config.beta)
    total = dec_loss * (1.0 - config.alpha) + prop_loss * config.alpha
    grads = dc.backward(tape, total) if with_grad else None
    return StepResult(float(total.value), float(dec_loss.value), float(prop_loss.value), decomp, grads)


# ----------------------------------------------------------------------------
# data handling

def validation_indices(n_mu: int, n_val: int) -> list[int]:
    """Evenly spread interior indices to hold out for validation."""
    if n_mu < 3 or n_val > n_mu - 2:
        raise ValueError(f"cannot hold out {n_val} of {n_mu} instances and keep both ends for training")
    picks = np.round(np.linspace(0, n_mu - 1, n_val + 2)[1:-1]).astype(int)
    return sorted(set(int(i) for i in picks))


def make_windows(snapshots: np.ndarray, k_in: int, k_out: int) -> tuple[np.ndarray, np.ndarray]:
    """All consecutive (input, target) window pairs from ``[n_mu, nt, nx]`` snapshots."""
    n_mu, nt, nx = snapshots.shape
    n_start = nt - k_in - k_out + 1
    if n_start < 1:
        raise ValueError(f"nt={nt} too short for windows {k_in}+{k_out}")
    ins, outs = [], []
    for m in range(n_mu):
        for s in range(n_start):
            ins.append(snapshots[m, s:s + k_in])
            outs.append(snapshots[m, s + k_in:s + k_in + k_out])
    return np.stack(ins), np.stack(outs)


def default_noise_std(dataset: WaveDataset) -> float:
    return 0.01 * float(np.max(np.abs(dataset.snapshots)))


# ----------------------------------------------------------------------------

def fit(model: AbcranModel, dataset: WaveDataset, config: TrainConfig) -> TrainReport:
    cfg = model.config
    if dataset.n_mu == 0:
        raise ValueError("empty dataset")
    if dataset.grid.nx != cfg.nx:
        raise ValueError(f"dataset nx={dataset.grid.nx} does not match model nx={cfg.nx}")
    val_idx = validation_indices(dataset.n_mu, config.n_val)
    train_idx = [i for i in range(dataset.n_mu) if i not in val_idx]
    x_tr, y_tr = make_windows(dataset.snapshots[train_idx], cfg.k_in, cfg.k_out)
    x_va, y_va = make_windows(dataset.snapshots[val_idx], cfg.k_in, cfg.k_out)
    noise_std = default_noise_std(dataset) if config.noise_std is None else config.noise_std
    rng = np.random.default_rng(config.seed)
    opt = AdamWState()

    report = TrainReport(
        config=config.to_dict(),
        train_mu=[dataset.mu_values[i] for i in train_idx],
        val_mu=[dataset.mu_values[i] for i in val_idx],
    )
    best_val = math.inf
    best_state = model.state()
    n = x_tr.shape[0]
    for epoch in range(1, config.max_epochs + 1):
        lr_t = cosine_warm_restart_lr(epoch - 1, config.lr, config.lr_min, config.restart_period, config.restart_mult)
        order = rng.permutation(n)
        sums = np.zeros(5)
        n_batches = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xin, yout = x_tr[idx], y_tr[idx]
            noisy = add_noise(xin, noise_std, rng)
            try:
                res = composite_step(model, xin, yout, noisy, config)
            except dc.NonFiniteError as exc:
                raise TrainingDivergedError(f"epoch {epoch}: {exc}") from exc
            if not math.isfinite(res.loss):
                raise TrainingDivergedError(f"epoch {epoch}: non-finite loss {res.loss}")
            adamw_step(model.params, res.grads, opt, lr_t, config.weight_decay)
            sums += (res.loss, res.decoder_loss, res.propagator_loss,
                     res.decomposition.tau_diss, res.decomposition.tau_disp)
            n_batches += 1
        means = sums / n_batches

        val = composite_step(model, x_va, y_va, x_va, config, with_grad=False)
        if not math.isfinite(val.loss):
            raise TrainingDivergedError(f"epoch {epoch}: non-finite validation loss")
        report.records.append(EpochRecord(
            epoch=epoch, lr=lr_t, train_loss=float(means[0]), val_loss=val.loss,
            tau_diss=float(means[3]), tau_disp=float(means[4]),
            decoder_loss=float(means[1]), propagator_loss=float(means[2]),
            val_mse=val.decomposition.tau,
        ))
        log.debug("epoch %d lr %.3g train %.5g val %.5g", epoch, lr_t, means[0], val.loss)
        if val.loss < best_val:
            best_val = val.loss
            report.best_epoch = epoch
            best_state = model.state()
        report.stopped_epoch = epoch
        if epoch - report.best_epoch >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, report.best_epoch)
            break
    model.load_state(best_state)
    return report


# ----------------------------------------------------------------------------
# successive-halving sweep over (alpha, beta)

@dataclass
class SweepResult:
    best: LossWeights
    table: list[dict]

    def write_csv(self, path) -> None:
        cols = ["rung", "alpha", "beta", "epochs", "val_mse", "val_loss", "best_epoch", "kept"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in self.table:
                w.writerow(row)


def _sweep_job(args):
    arch, model_seed, dataset, config = args
    model = AbcranModel(arch, seed=model_seed)
    rep = fit(model, dataset, config)
    return rep.best_val_mse, rep.best_val_loss, rep.best_epoch


def sweep_alpha_beta(
    grid: Sequence[LossWeights],
    arch: ArchConfig,
    dataset: WaveDataset,
    base: TrainConfig,
    min_epochs: int = 10,
    model_seed: int | None = None,
    jobs: int = 1,
) -> SweepResult:
    """Successive halving: train every survivor, keep the better half, double the budget.

    Candidates are ranked by validation propagator MSE, which does not depend
    on the weights being compared.  Each rung retrains from the same seed.
    """
    if not grid:
        raise ValueError("empty grid")
    seed = base.seed if model_seed is None else model_seed
    survivors = list(range(len(grid)))
    budget = min_epochs
    table: list[dict] = []
    rung = 0
    while True:
        cfgs = [
            replace(base, alpha=grid[i].alpha, beta=grid[i].beta, max_epochs=budget,
                    patience=min(base.patience, budget))
            for i in survivors
        ]
        jobs_args = [(arch, seed, dataset, c) for c in cfgs]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_sweep_job, jobs_args))
        else:
            results = [_sweep_job(a) for a in jobs_args]
        ranked = sorted(range(len(survivors)), key=lambda j: (results[j][0], j))
        keep = 1 if len(survivors) == 1 else max(1, len(survivors) // 2)
        kept = {survivors[j] for j in ranked[:keep]}
        for j, i in enumerate(survivors):
            table.append({
                "rung": rung, "alpha": grid[i].alpha, "beta": grid[i].beta, "epochs": budget,
                "val_mse": results[j][0], "val_loss": results[j][1], "best_epoch": results[j][2],
                "kept": i in kept,
            })
        if len(survivors) == 1:
            return SweepResult(grid[survivors[0]], table)
        survivors = [survivors[j] for j in ranked[:keep]]
        budget *= 2
        rung += 1

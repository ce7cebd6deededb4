"""Exact solutions of the parametric 1D linear advection problem.

The solution of ``u_t + mu * u_x = 0`` with ``u(x, 0) = f(x)`` is the
translated profile ``f(x - mu * t)``.  Snapshots are evaluated directly from
that formula on a uniform space-time grid, with no boundary wrapping.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1
META_NAME = "meta.json"
SNAPSHOT_NAME = "snapshots.bin"


class DatasetFormatError(ValueError):
    """Raised when a dataset directory is malformed or of an unknown version."""


@dataclass(frozen=True)
class GridSpec:
    nx: int = 256
    x0: float = 0.0
    x1: float = 1.0
    nt: int = 200
    t_final: float = 1.0

    def __post_init__(self) -> None:
        if self.nx < 2 or self.nt < 2:
            raise ValueError(f"need nx >= 2 and nt >= 2, got nx={self.nx}, nt={self.nt}")
        if not self.x1 > self.x0:
            raise ValueError(f"x1 must exceed x0 ({self.x0}, {self.x1})")
        if not self.t_final > 0:
            raise ValueError(f"t_final must be positive, got {self.t_final}")

    @property
    def dx(self) -> float:
        return (self.x1 - self.x0) / (self.nx - 1)

    @property
    def dt(self) -> float:
        return self.t_final / (self.nt - 1)

    def x(self) -> np.ndarray:
        return self.x0 + np.arange(self.nx) * self.dx

    def t(self) -> np.ndarray:
        return np.arange(self.nt) * self.dt


@dataclass(frozen=True)
class InitialProfile:
    """Gaussian pulse ``exp(-(x - x_center)^2 / (2 sigma_g)) / sqrt(2 pi sigma_g)``.

    ``sigma_g`` plays the role of a variance, not a standard deviation.
    """

    sigma_g: float = 5e-3
    x_center: float = 0.0

    def __post_init__(self) -> None:
        if not self.sigma_g > 0:
            raise ValueError(f"sigma_g must be positive, got {self.sigma_g}")

    def __call__(self, x):
        z = np.asarray(x, dtype=np.float64) - self.x_center
        return np.exp(-(z * z) / (2.0 * self.sigma_g)) / math.sqrt(2.0 * math.pi * self.sigma_g)

    @property
    def peak(self) -> float:
        return 1.0 / math.sqrt(2.0 * math.pi * self.sigma_g)


@dataclass(frozen=True)
class ParameterGrid:
    mu_train: tuple[float, ...]
    mu_test: tuple[float, ...]


@dataclass
class WaveDataset:
    grid: GridSpec
    profile: InitialProfile
    mu_values: list[float]
    snapshots: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        expected = (len(self.mu_values), self.grid.nt, self.grid.nx)
        if self.snapshots.shape != expected:
            raise DatasetFormatError(
                f"snapshot shape {self.snapshots.shape} does not match metadata {expected}"
            )

    @property
    def n_mu(self) -> int:
        return len(self.mu_values)

    def subset(self, indices: Sequence[int]) -> "WaveDataset":
        idx = list(indices)
        return WaveDataset(
            grid=self.grid,
            profile=self.profile,
            mu_values=[self.mu_values[i] for i in idx],
            snapshots=self.snapshots[idx].copy(),
        )


def exact_solution(mu, x, t, profile: InitialProfile = InitialProfile()):
    """Evaluate ``f(x - mu t)``; accepts scalars or broadcastable arrays."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be nonnegative")
    out = profile(np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64) * np.asarray(t, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def make_parameter_grid(mu_min: float, mu_max: float, n_train: int) -> ParameterGrid:
    if n_train < 2:
        raise ValueError(f"n_train must be >= 2, got {n_train}")
    if not mu_max > mu_min:
        raise ValueError(f"degenerate range [{mu_min}, {mu_max}]")
    train = np.linspace(mu_min, mu_max, n_train)
    test = (train[:-1] + train[1:]) / 2.0
    return ParameterGrid(tuple(float(m) for m in train), tuple(float(m) for m in test))


def generate_dataset(
    grid: GridSpec,
    profile: InitialProfile,
    mu_values: Sequence[float],
) -> WaveDataset:
    mu = np.asarray(list(mu_values), dtype=np.float64)
    if mu.size == 0:
        raise ValueError("mu_values is empty")
    if np.any(mu <= 0):
        raise ValueError("wave speeds must be positive")
    x = grid.x()
    t = grid.t()
    snaps = profile(x[None, None, :] - mu[:, None, None] * t[None, :, None])
    if not np.all(np.isfinite(snaps)):
        raise ValueError("non-finite snapshot values")
    return WaveDataset(grid, profile, [float(m) for m in mu], np.ascontiguousarray(snaps))


def _meta_dict(ds: WaveDataset) -> dict:
    g, p = ds.grid, ds.profile
    return {
        "version": FORMAT_VERSION,
        "nx": g.nx,
        "x0": g.x0,
        "x1": g.x1,
        "nt": g.nt,
        "t_final": g.t_final,
        "sigma_g": p.sigma_g,
        "x_center": p.x_center,
        "mu": list(ds.mu_values),
        "dtype": "f64le",
        "layout": "mu,t,x",
    }


def write_dataset(ds: WaveDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(ds.snapshots, dtype="<f8")
    (path / SNAPSHOT_NAME).write_bytes(data.tobytes(order="C"))
    (path / META_NAME).write_text(json.dumps(_meta_dict(ds), indent=2), encoding="utf-8")


def read_dataset(path) -> WaveDataset:
    path = Path(path)
    try:
        meta = json.loads((path / META_NAME).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"missing {META_NAME} in {path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"unparseable {META_NAME}: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {meta.get('version')!r}")
    if meta.get("dtype") != "f64le" or meta.get("layout") != "mu,t,x":
        raise DatasetFormatError("unsupported dtype/layout")
    try:
        grid = GridSpec(int(meta["nx"]), float(meta["x0"]), float(meta["x1"]), int(meta["nt"]), float(meta["t_final"]))
        profile = InitialProfile(float(meta["sigma_g"]), float(meta["x_center"]))
        mu = [float(m) for m in meta["mu"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"invalid metadata: {exc}") from exc
    raw = (path / SNAPSHOT_NAME).read_bytes()
    expected = len(mu) * grid.nt * grid.nx
    if len(raw) != 8 * expected:
        raise DatasetFormatError(
            f"{SNAPSHOT_NAME} holds {len(raw)} bytes, metadata implies {8 * expected}"
        )
    snaps = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(len(mu), grid.nt, grid.nx)
    return WaveDataset(grid, profile, mu, snaps)

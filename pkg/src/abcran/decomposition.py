"""Split the mean squared error into dissipation and dispersion parts.

With population statistics of the truth ``ua`` and prediction ``ud``::

    mse      = diss + disp
    diss     = (std_a - std_d)**2 + (mean_a - mean_d)**2
    disp     = 2 * (std_a * std_d - cov)          # == 2 (1 - rho) std_a std_d

``disp`` is evaluated without dividing by the standard deviations so that
constant signals stay well defined; ``rho`` is kept for reporting only.
Batched inputs are reduced over the last (spatial) axis first, then the
components are averaged over every leading axis.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc

STD_EPS = 1e-30


@dataclass(frozen=True)
class SignalStats:
    mean_a: float
    mean_d: float
    std_a: float
    std_d: float
    cov: float
    rho: float


@dataclass(frozen=True)
class ErrorDecomposition:
    tau: float
    tau_diss: float
    tau_disp: float
    stats: SignalStats

    def to_dict(self) -> dict:
        s = self.stats
        return {
            "tau": self.tau,
            "tau_diss": self.tau_diss,
            "tau_disp": self.tau_disp,
            "rho": s.rho,
            "mean_a": s.mean_a,
            "mean_d": s.mean_d,
            "std_a": s.std_a,
            "std_d": s.std_d,
        }


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.7
    beta: float = 0.7

    def __post_init__(self) -> None:
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(ua, ud) -> tuple[np.ndarray, np.ndarray]:
    ua = np.asarray(ua, dtype=np.float64)
    ud = np.asarray(ud, dtype=np.float64)
    if ua.shape != ud.shape:
        raise ValueError(f"shape mismatch: {ua.shape} vs {ud.shape}")
    if ua.ndim == 0 or ua.shape[-1] == 0:
        raise ValueError("empty input")
    return ua, ud


def _rho_eps(ua: np.ndarray, ud: np.ndarray) -> float:
    return 1e-15 * max(1.0, float(np.max(np.abs(ua))), float(np.max(np.abs(ud))))


def _moments(ua: np.ndarray, ud: np.ndarray):
    """Per-slice population moments along the last axis."""
    ma = ua.mean(axis=-1)
    md = ud.mean(axis=-1)
    da = ua - ma[..., None]
    dd = ud - md[..., None]
    sa = np.sqrt((da * da).mean(axis=-1))
    sd = np.sqrt((dd * dd).mean(axis=-1))
    cov = (da * dd).mean(axis=-1)
    return ma, md, sa, sd, cov


def signal_stats(ua, ud) -> SignalStats:
    ua, ud = _pair(ua, ud)
    if ua.ndim != 1:
        raise ValueError("signal_stats expects vectors")
    ma, md, sa, sd, cov = (float(v) for v in _moments(ua, ud))
    prod = sa * sd
    rho = cov / prod if prod >= _rho_eps(ua, ud) else 1.0
    return SignalStats(ma, md, sa, sd, cov, float(np.clip(rho, -1.0, 1.0)))


def decompose(ua, ud) -> ErrorDecomposition:
    ua, ud = _pair(ua, ud)
    if ua.ndim != 1:
        raise ValueError("decompose expects vectors; use decompose_batched")
    if not (np.all(np.isfinite(ua)) and np.all(np.isfinite(ud))):
        raise ValueError("non-finite values")
    st = signal_stats(ua, ud)
    diff = ua - ud
    tau = float(np.mean(diff * diff))
    tau_diss = (st.std_a - st.std_d) ** 2 + (st.mean_a - st.mean_d) ** 2
    tau_disp = 2.0 * (st.std_a * st.std_d - st.cov)
    return ErrorDecomposition(tau, tau_diss, tau_disp, st)


def decompose_batched(ua, ud) -> ErrorDecomposition:
    """Decompose each spatial slice and average the components.

    The attached ``stats`` are averages of the per-slice statistics.
    """
    ua, ud = _pair(ua, ud)
    if not (np.all(np.isfinite(ua)) and np.all(np.isfinite(ud))):
        raise ValueError("non-finite values")
    ma, md, sa, sd, cov = _moments(ua, ud)
    diff = ua - ud
    tau = (diff * diff).mean(axis=-1)
    diss = (sa - sd) ** 2 + (ma - md) ** 2
    disp = 2.0 * (sa * sd - cov)
    prod = sa * sd
    eps = _rho_eps(ua, ud)
    rho = np.where(prod >= eps, cov / np.where(prod >= eps, prod, 1.0), 1.0)
    stats = SignalStats(
        float(ma.mean()), float(md.mean()), float(sa.mean()), float(sd.mean()),
        float(cov.mean()), float(np.clip(rho, -1.0, 1.0).mean()),
    )
    return ErrorDecomposition(float(tau.mean()), float(diss.mean()), float(disp.mean()), stats)


def composite_loss(decoder_loss: float, propagator_decomp: ErrorDecomposition, w: LossWeights) -> float:
    LossWeights(w.alpha, w.beta)  # re-validate in case of a duck-typed object
    prop = (1.0 - w.beta) * propagator_decomp.tau_disp + w.beta * propagator_decomp.tau_diss
    return (1.0 - w.alpha) * decoder_loss + w.alpha * prop


def _weighted_grad(ua: np.ndarray, ud: np.ndarray, w_diss: float, w_disp: float) -> np.ndarray:
    n = ua.shape[-1]
    ma, md, sa, sd, _ = _moments(ua, ud)
    live = sd >= STD_EPS
    safe_sd = np.where(live, sd, 1.0)
    # d std_d / d ud_k, zero where the prediction slice is (numerically) constant
    dsd = np.where(live[..., None], (ud - md[..., None]) / (n * safe_sd[..., None]), 0.0)
    dcov = (ua - ma[..., None]) / n
    g_diss = -2.0 * (sa - sd)[..., None] * dsd - 2.0 * (ma - md)[..., None] / n
    g_disp = 2.0 * (sa[..., None] * dsd - dcov)
    return w_diss * g_diss + w_disp * g_disp


def decompose_gradient(ua, ud, w_diss: float, w_disp: float) -> np.ndarray:
    """Gradient of ``w_diss * tau_diss + w_disp * tau_disp`` with respect to ``ud``."""
    ua, ud = _pair(ua, ud)
    if ua.ndim != 1 or ua.size < 2:
        raise ValueError("decompose_gradient expects vectors of length >= 2")
    return _weighted_grad(ua, ud, w_diss, w_disp)


def decompose_gradient_batched(ua, ud, w_diss: float, w_disp: float) -> np.ndarray:
    """Gradient of the slice-averaged weighted components of ``decompose_batched``."""
    ua, ud = _pair(ua, ud)
    n_slices = ua.size // ua.shape[-1]
    return _weighted_grad(ua, ud, w_diss, w_disp) / n_slices


def weighted_decomposition_loss(pred: dc.Tensor, target, w_diss: float, w_disp: float):
    """Differentiable ``w_diss * tau_diss + w_disp * tau_disp`` of ``pred`` against ``target``.

    Returns the scalar loss node together with the full decomposition.
    """
    target = np.asarray(target, dtype=np.float64)
    dec = decompose_batched(target, pred.value)
    value = np.array(w_diss * dec.tau_diss + w_disp * dec.tau_disp)
    pred_value = pred.value

    def backward(g):
        return (g * decompose_gradient_batched(target, pred_value, w_diss, w_disp),)

    return dc.custom_op("decomposition_loss", value, (pred,), backward), dec

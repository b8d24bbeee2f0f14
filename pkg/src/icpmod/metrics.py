"""Tracking and pressure-modulation performance metrics.

Tracking quality is summarized by the normalized root-mean-square error
(percent of reference range) and the maximum absolute tracking error.
Pressure modulation is summarized per cardiac period: pulse amplitudes are
averaged over periods, mean-pressure increases are reported as worst case
over periods.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TrackingReport",
    "ModulationReport",
    "nrmse",
    "mate",
    "tracking_report",
    "modulation_report",
]


def _as_sequence(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite samples")
    return arr


def _paired(r, y) -> tuple[np.ndarray, np.ndarray]:
    r = _as_sequence(r, "reference")
    y = _as_sequence(y, "measurement")
    if r.shape != y.shape:
        raise ValueError(
            f"length mismatch: reference {r.size}, measurement {y.size}")
    return r, y


def nrmse(r, y) -> float:
    """Root-mean-square tracking error as a percentage of reference range.

    Raises ValueError for a constant reference (zero range), where the
    normalization is undefined.
    """
    r, y = _paired(r, y)
    if r.size < 2:
        raise ValueError("need at least 2 samples")
    span = float(r.max() - r.min())
    if span <= 0.0:
        raise ValueError("constant reference: range normalization undefined")
    rmse = float(np.sqrt(np.mean((r - y) ** 2)))
    return 100.0 * rmse / span


def mate(r, y) -> float:
    """Maximum absolute tracking error, max_k |r_k - y_k|."""
    r, y = _paired(r, y)
    if r.size < 1:
        raise ValueError("need at least 1 sample")
    return float(np.max(np.abs(r - y)))


@dataclass(frozen=True)
class TrackingReport:
    """Tracking summary over a paired reference/measurement record."""

    nrmse_pct: float
    mate_mm: float
    length: int


def tracking_report(r, y) -> TrackingReport:
    r, y = _paired(r, y)
    return TrackingReport(nrmse_pct=nrmse(r, y), mate_mm=mate(r, y),
                          length=int(r.size))


@dataclass(frozen=True)
class ModulationReport:
    """Per-period pressure modulation summary.

    Amplitudes are peak-to-peak pressure per period, averaged over whole
    periods. Mean-pressure increases are worst case (max) over actuated
    periods, relative to the baseline trace mean.
    """

    baseline_amp_mmhg: float
    actuated_amp_mmhg: float
    amplification: float
    baseline_mean_mmhg: float
    max_abs_mean_increase_mmhg: float
    max_rel_mean_increase_pct: float
    periods_used: int


def _whole_periods(trace: np.ndarray, period: int, name: str) -> np.ndarray:
    n_whole, rem = divmod(trace.size, period)
    if rem:
        warnings.warn(
            f"{name} trace length {trace.size} is not a multiple of the "
            f"period {period}; trimming {rem} trailing samples",
            stacklevel=3)
        trace = trace[: n_whole * period]
    if n_whole < 3:
        raise ValueError(
            f"{name} trace covers {n_whole} whole periods, need >= 3")
    return trace.reshape(n_whole, period)


def modulation_report(baseline, actuated, period: int) -> ModulationReport:
    """Compare an actuated pressure trace against an unactuated baseline.

    Both traces are split into whole periods of `period` samples (trailing
    partial periods are trimmed with a warning). The amplification factor is
    the ratio of mean per-period peak-to-peak amplitudes; mean-pressure
    increase is the worst actuated-period mean minus the baseline mean.
    """
    if period < 2:
        raise ValueError(f"period must be >= 2, got {period}")
    base = _whole_periods(_as_sequence(baseline, "baseline"), period,
                          "baseline")
    act = _whole_periods(_as_sequence(actuated, "actuated"), period,
                         "actuated")

    base_amp = float(np.mean(base.max(axis=1) - base.min(axis=1)))
    act_amp = float(np.mean(act.max(axis=1) - act.min(axis=1)))
    if base_amp <= 0.0:
        raise ValueError("baseline amplitude is zero; amplification undefined")

    base_mean = float(base.mean())
    if base_mean <= 0.0:
        raise ValueError("baseline mean must be positive")
    abs_inc = float(np.max(act.mean(axis=1)) - base_mean)

    return ModulationReport(
        baseline_amp_mmhg=base_amp,
        actuated_amp_mmhg=act_amp,
        amplification=act_amp / base_amp,
        baseline_mean_mmhg=base_mean,
        max_abs_mean_increase_mmhg=abs_inc,
        max_rel_mean_increase_pct=100.0 * abs_inc / base_mean,
        periods_used=int(act.shape[0]),
    )

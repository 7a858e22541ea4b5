"""Feed-forward gating: herald click -> AOM window -> delivered idler photons.

Loss order (fiber, then AOM, then taper) mirrors the optical path; for
independent Bernoulli survival the order is statistically irrelevant.
"""

from __future__ import annotations

import numpy as np

from .config import LossBudget, TimingConfig

__all__ = [
    "aom_gate",
    "loss_chain_transmission",
    "propagate_idler",
    "propagate_idler_array",
]

_NS = 1e-9


def aom_gate(herald_time_s: float, timing: TimingConfig) -> tuple[float, float]:
    """Open interval of the AOM (seconds) for a herald at herald_time_s."""
    if herald_time_s < 0:
        raise ValueError("herald_time_s must be >= 0")
    start = herald_time_s + timing.aom_activation_delay_ns * _NS
    return (start, start + timing.aom_open_duration_ns * _NS)


def loss_chain_transmission(losses: LossBudget) -> float:
    """Probability that a gated idler photon reaches the cell."""
    return losses.transmission


def propagate_idler_array(
    idler_counts: np.ndarray,
    herald_times_s: np.ndarray,
    timing: TimingConfig,
    losses: LossBudget,
    rng: np.random.Generator,
) -> np.ndarray:
    """Delivered photon count per heralded pulse.

    All photons of one pulse share the fiber, so the delay jitter (if any) is
    drawn once per pulse; arrival outside the AOM window loses the whole
    pulse, otherwise each photon survives the loss chain independently.
    """
    counts = np.asarray(idler_counts, dtype=np.int64)
    times = np.asarray(herald_times_s, dtype=float)
    if np.any(counts < 0):
        raise ValueError("idler counts must be non-negative")
    delay = np.full(times.shape, timing.fiber_delay_ns * _NS)
    if timing.fiber_delay_jitter_sd_ns > 0:
        delay = delay + rng.normal(0.0, timing.fiber_delay_jitter_sd_ns * _NS, times.shape)
    arrival = times + delay
    start = times + timing.aom_activation_delay_ns * _NS
    end = start + timing.aom_open_duration_ns * _NS
    in_gate = (arrival >= start) & (arrival <= end)
    return np.where(in_gate, rng.binomial(counts, losses.transmission), 0).astype(np.int64)


def propagate_idler(
    idler_count: int,
    herald_time_s: float,
    timing: TimingConfig,
    losses: LossBudget,
    rng: np.random.Generator,
) -> int:
    if herald_time_s < 0:
        raise ValueError("herald_time_s must be >= 0")
    out = propagate_idler_array(
        np.asarray([idler_count]), np.asarray([herald_time_s]), timing, losses, rng
    )
    return int(out[0])

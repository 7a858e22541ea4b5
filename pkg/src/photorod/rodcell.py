"""Rod-cell membrane-current synthesis.

A single absorbed photon produces the stereotyped multi-stage filter impulse
response i(t) = A0 * [t/t0 * exp(1 - t/t0)]^(m-1).  Trials superpose one such
pulse per isomerization (linear regime; an optional saturation ceiling clips
the summed cellular response) on top of three noise sources: low-passed
continuous physiological noise, spontaneous discrete events that look like
photon responses, and white recording-amplifier noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.signal import lfilter

from .config import ProtocolConfig, RodCellParams

__all__ = [
    "TrialRecord",
    "classify_trial",
    "single_photon_waveform",
    "waveform_fwhm_duration",
    "fwhm_of",
    "absorb",
    "synthesize_trial",
    "lowpass_single_pole",
    "derive_amplitude_jitter_sd",
]

TRIAL_CLASSES = ("zero_herald", "single_herald", "multi_herald")

# Spontaneous events are drawn starting this long before the record so that a
# bump whose tail extends into the record is not missed (stationary noise).
_EVENT_LEAD_S = 5.0


def classify_trial(herald_count: int) -> str:
    if herald_count < 0:
        raise ValueError("herald_count must be >= 0")
    if herald_count == 0:
        return "zero_herald"
    return "single_herald" if herald_count == 1 else "multi_herald"


@dataclass(frozen=True)
class TrialRecord:
    """One shutter cycle: sampled current plus per-trial bookkeeping."""

    times_s: np.ndarray
    current_pa: np.ndarray
    shutter_interval: tuple[float, float]
    herald_count: int
    true_isomerizations: int  # simulation ground truth; not used by analysis
    trial_class: str
    trial_id: int = 0
    seed_hex: str = ""

    def __post_init__(self) -> None:
        if self.times_s.shape != self.current_pa.shape:
            raise ValueError("times and current must have the same shape")
        if self.trial_class != classify_trial(self.herald_count):
            raise ValueError(
                f"trial_class {self.trial_class!r} inconsistent with "
                f"herald_count {self.herald_count}"
            )

    @property
    def duration_s(self) -> float:
        return float(self.times_s[-1] - self.times_s[0]) if self.times_s.size else 0.0


def _pulse_shape(t, t0: float, m: int) -> np.ndarray:
    """Unit-amplitude response: [x exp(1-x)]^(m-1) with x = t/t0, 0 for t <= 0."""
    x = np.asarray(t, dtype=float) / t0
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = (x[pos] * np.exp(1.0 - x[pos])) ** (m - 1)
    return out


def single_photon_waveform(t, params: RodCellParams):
    """Current (pA) at time t after a photon absorption at t = 0."""
    out = params.response_amplitude_pa * _pulse_shape(t, params.time_to_peak_s, params.filter_stages)
    if np.isscalar(t):
        return float(out)
    return out


def fwhm_of(time_to_peak_s: float, stages: float) -> float:
    """FWHM of the pulse for arbitrary (possibly fractional) stage count.

    Root-finds the two crossings of x*exp(1-x) = 2^(-1/(m-1)) around the
    peak at x = 1; the width scales linearly with the time to peak.
    """
    if stages < 2:
        raise ValueError("stages must be >= 2 for a unimodal pulse")
    level = 2.0 ** (-1.0 / (stages - 1))
    f = lambda x: x * np.exp(1.0 - x) - level
    lo = brentq(f, 1e-12, 1.0, xtol=1e-12)
    hi = brentq(f, 1.0, 60.0, xtol=1e-12)
    return float((hi - lo) * time_to_peak_s)


def waveform_fwhm_duration(params: RodCellParams) -> float:
    """Full width at half maximum of the single-photon pulse (seconds)."""
    return fwhm_of(params.time_to_peak_s, params.filter_stages)


def absorb(delivered_photons: int, quantum_efficiency: float, rng: np.random.Generator) -> int:
    """Binomial thinning of delivered photons into isomerizations."""
    if delivered_photons < 0:
        raise ValueError("delivered_photons must be >= 0")
    if not 0.0 <= quantum_efficiency <= 1.0:
        raise ValueError("quantum_efficiency must be in [0, 1]")
    if delivered_photons == 0:
        return 0
    return int(rng.binomial(delivered_photons, quantum_efficiency))


def lowpass_single_pole(x: np.ndarray, cutoff_hz: float, sample_rate_hz: float,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Single-pole low-pass.  With an rng the filter state is initialized from
    the stationary distribution instead of zero (no start-up transient)."""
    rho = float(np.exp(-2.0 * np.pi * cutoff_hz / sample_rate_hz))
    zi = None
    if rng is not None and x.size:
        sd = float(np.std(x)) if x.size > 1 else 0.0
        y0 = rng.normal(0.0, sd * np.sqrt((1.0 - rho) / (1.0 + rho)))
        zi = np.asarray([rho * y0])
    if zi is None:
        return lfilter([1.0 - rho], [1.0, -rho], x)
    y, _ = lfilter([1.0 - rho], [1.0, -rho], x, zi=zi)
    return y


def derive_amplitude_jitter_sd(dark_amplitude_variance_pa2: float,
                               target_peak_fwhm_pa: float = 0.5) -> float:
    """Response-amplitude jitter that would widen the single-photon histogram
    peak to the target FWHM on top of the dark amplitude noise.

    jitter^2 = (FWHM/2.3548)^2 - dark variance, clamped at zero: with the
    default dark amplitude variance (0.07 pA^2, i.e. FWHM 0.62 pA) the dark
    noise alone is already wider than the 0.5 pA target, so the default
    jitter is 0.
    """
    sigma_target = target_peak_fwhm_pa / (2.0 * np.sqrt(2.0 * np.log(2.0)))
    return float(np.sqrt(max(0.0, sigma_target**2 - dark_amplitude_variance_pa2)))


def synthesize_trial(
    protocol: ProtocolConfig,
    cell: RodCellParams,
    absorption_times_s,
    rng: np.random.Generator,
    herald_count: int | None = None,
    trial_id: int = 0,
    seed_hex: str = "",
) -> TrialRecord:
    """Synthesize one sampled trial.

    absorption_times_s are the light-driven isomerization times and must lie
    inside the shutter interval.  herald_count defaults to the number of
    absorptions (callers that simulate the source pass the true click count).
    """
    absorption_times = np.asarray(absorption_times_s, dtype=float)
    t_open, t_close = protocol.shutter_interval
    if absorption_times.size and (
        absorption_times.min() < t_open or absorption_times.max() > t_close
    ):
        raise ValueError(
            f"absorption times must lie inside the shutter interval "
            f"[{t_open}, {t_close}]"
        )

    dt = 1.0 / cell.sample_rate_hz
    n = int(round(protocol.trial_duration_s * cell.sample_rate_hz))
    t = np.arange(n) * dt

    a0 = cell.response_amplitude_pa
    response = np.zeros(n)
    for t_k in absorption_times:
        amp = a0 if cell.amplitude_jitter_sd_pa == 0 else rng.normal(a0, cell.amplitude_jitter_sd_pa)
        response += amp * _pulse_shape(t - t_k, cell.time_to_peak_s, cell.filter_stages)

    if cell.discrete_event_rate_hz > 0:
        span = protocol.trial_duration_s + _EVENT_LEAD_S
        n_events = rng.poisson(cell.discrete_event_rate_hz * span)
        for t_e in rng.uniform(-_EVENT_LEAD_S, protocol.trial_duration_s, n_events):
            amp = a0 if cell.amplitude_jitter_sd_pa == 0 else rng.normal(a0, cell.amplitude_jitter_sd_pa)
            response += amp * _pulse_shape(t - t_e, cell.time_to_peak_s, cell.filter_stages)

    if cell.saturation_pa is not None:
        response = np.minimum(response, cell.saturation_pa)

    current = response
    if cell.continuous_noise_variance_pa2 > 0:
        rho = np.exp(-2.0 * np.pi * cell.recording_bandwidth_hz / cell.sample_rate_hz)
        # white input scaled so the filtered output has the configured variance
        in_sd = np.sqrt(cell.continuous_noise_variance_pa2 * (1.0 + rho) / (1.0 - rho))
        white = rng.normal(0.0, in_sd, n)
        y0 = rng.normal(0.0, np.sqrt(cell.continuous_noise_variance_pa2))
        filtered, _ = lfilter([1.0 - rho], [1.0, -rho], white, zi=np.asarray([rho * y0]))
        current = current + filtered
    if cell.amplifier_noise_variance_pa2 > 0:
        current = current + rng.normal(0.0, np.sqrt(cell.amplifier_noise_variance_pa2), n)

    heralds = int(herald_count) if herald_count is not None else int(absorption_times.size)
    return TrialRecord(
        times_s=t,
        current_pa=current,
        shutter_interval=(t_open, t_close),
        herald_count=heralds,
        true_isomerizations=int(absorption_times.size),
        trial_class=classify_trial(heralds),
        trial_id=trial_id,
        seed_hex=seed_hex,
    )

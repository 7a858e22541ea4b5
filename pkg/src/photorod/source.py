"""Per-pulse pair statistics, gated APD detection and g2 estimation.

The pair number per pump pulse is Poissonian (multimode limit); the idler
beam inherits that statistics, which is what makes the unconditional idler
g2 sit at unity while heralding drives it toward zero.  Coincidences are
per-pulse events: the pulse separation (40 us) dwarfs the coincidence
window, so two clicks coincide iff they come from the same pulse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, LossBudget, SourceConfig, TimingConfig
from .feedforward import loss_chain_transmission
from .seeds import spawn_rng

__all__ = [
    "EstimatorUndefined",
    "G2Estimate",
    "sample_pair_counts",
    "click_probabilities",
    "detect_signal",
    "detect_signal_array",
    "moment_g2",
    "coincidence_g2",
    "run_g2_configuration",
    "herald_probability",
    "mu_for_herald_mean",
    "g2_scan",
]

G2_MODES = ("cross", "unconditional_idler", "heralded")


class EstimatorUndefined(ValueError):
    """The requested estimator is undefined for the given counts."""


@dataclass(frozen=True)
class G2Estimate:
    value: float
    std_dev: float
    n_samples: int

    def __post_init__(self) -> None:
        if self.value < 0 or self.std_dev < 0:
            raise ValueError("g2 value and std_dev must be non-negative")


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return spawn_rng(int(seed))


def sample_pair_counts(config: SourceConfig, n_pulses: int, seed) -> np.ndarray:
    """Draw per-pulse pair numbers; deterministic for a fixed seed.

    Poisson(mu) in the default multimode limit; with a finite spectral_modes
    count the pair number is negative-binomial (sum of thermal modes of equal
    mean), converging back to Poisson as the mode count grows.
    """
    if n_pulses < 1:
        raise ValueError("n_pulses must be >= 1")
    mu = config.mean_pairs_per_pulse
    rng = _as_rng(seed)
    if mu == 0.0:
        return np.zeros(n_pulses, dtype=np.int64)
    modes = config.spectral_modes
    if modes is None:
        return rng.poisson(mu, n_pulses).astype(np.int64)
    p = modes / (modes + mu)
    return rng.negative_binomial(modes, p, n_pulses).astype(np.int64)


def click_probabilities(pair_counts: np.ndarray, config: SourceConfig) -> np.ndarray:
    """Per-gate click probability: photon detection or a dark count."""
    eta = config.signal_detection_efficiency
    pd = config.dark_count_prob_per_gate
    miss = (1.0 - eta) ** np.asarray(pair_counts) * (1.0 - pd)
    return 1.0 - miss


def detect_signal_array(pair_counts: np.ndarray, config: SourceConfig, rng: np.random.Generator) -> np.ndarray:
    """Vectorized gated detection; at most one click per gate by construction
    (the dead time covers the APD pulse width)."""
    counts = np.asarray(pair_counts)
    if np.any(counts < 0):
        raise ValueError("pair counts must be non-negative")
    return rng.random(counts.shape) < click_probabilities(counts, config)


def detect_signal(pair_count: int, config: SourceConfig, rng: np.random.Generator) -> bool:
    return bool(detect_signal_array(np.asarray([pair_count]), config, rng)[0])


def moment_g2(counts, n_bootstrap: int = 1000, seed: int = 0) -> G2Estimate:
    """g2 from the mean and variance of a photon-number sample.

    value = 1 + (Var - mean) / mean^2.  The uncertainty is a nonparametric
    bootstrap over the empirical count distribution (resampling the histogram
    is equivalent to resampling the data for any histogram statistic, and is
    much faster for small count alphabets).
    """
    counts = np.asarray(counts)
    if counts.size == 0:
        raise EstimatorUndefined("empty count sequence")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    mean = counts.mean()
    if mean == 0:
        raise EstimatorUndefined("zero mean photon number")
    var = counts.var(ddof=1) if counts.size > 1 else 0.0
    value = 1.0 + (var - mean) / mean**2

    n = counts.size
    hist = np.bincount(counts.astype(np.int64))
    levels = np.arange(hist.size, dtype=float)
    rng = _as_rng(seed)
    resampled = rng.multinomial(n, hist / n, size=n_bootstrap).astype(float)
    tot = resampled.sum(axis=1)
    m1 = resampled @ levels / tot
    m2 = resampled @ levels**2 / tot
    bvar = (m2 - m1**2) * (n / max(n - 1, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        bg2 = 1.0 + (bvar - m1) / m1**2
    bg2 = bg2[np.isfinite(bg2)]
    std = float(bg2.std(ddof=1)) if bg2.size > 1 else 0.0
    return G2Estimate(value=float(max(value, 0.0)), std_dev=std, n_samples=int(n))


def coincidence_g2(n1: float, n2: float, nc: float, f: float) -> G2Estimate:
    """g2 = f * Nc / (N1 * N2) with Poissonian counting errors.

    N1, N2 are the singles counts of the two detectors, Nc the number of
    coincidences and f the normalization count: the number of pulses (or the
    repetition rate when the singles are per-second rates), or the number of
    heralds in the feed-forward configuration.
    """
    if n1 <= 0 or n2 <= 0:
        raise EstimatorUndefined("singles counts must be positive")
    if nc < 0 or f <= 0:
        raise ValueError("nc must be >= 0 and f > 0")
    value = f * nc / (n1 * n2)
    if nc > 0:
        rel = np.sqrt(1.0 / nc + 1.0 / n1 + 1.0 / n2)
        std = value * rel
    else:
        # one-count scale: the resolution of the measurement
        std = f / (n1 * n2)
    return G2Estimate(value=float(value), std_dev=float(std), n_samples=int(round(nc)))


def herald_probability(config: SourceConfig) -> float:
    """Per-pulse probability of a signal-APD click at the configured rate."""
    eta = config.signal_detection_efficiency
    pd = config.dark_count_prob_per_gate
    mu = config.mean_pairs_per_pulse
    if config.spectral_modes is None:
        miss = np.exp(-mu * eta)
    else:
        k = config.spectral_modes
        miss = (k / (k + mu * eta)) ** k
    return float(1.0 - miss * (1.0 - pd))


def mu_for_herald_mean(target_heralds: float, config: SourceConfig, pulses_per_window: int = 2500) -> float:
    """Pair rate giving the requested mean herald count per shutter window."""
    if target_heralds <= 0:
        raise ValueError("target_heralds must be positive")
    p_needed = target_heralds / pulses_per_window
    pd = config.dark_count_prob_per_gate
    p_photon = (p_needed - pd) / (1.0 - pd)
    if p_photon <= 0:
        raise ConfigError("dark counts alone exceed the requested herald rate")
    eta = config.signal_detection_efficiency
    if eta <= 0:
        raise ConfigError("signal_detection_efficiency must be positive")
    return float(-np.log1p(-p_photon) / eta)


def _idler_clicks(photons: np.ndarray, eta: float, pd: float, rng: np.random.Generator) -> np.ndarray:
    miss = (1.0 - eta) ** photons * (1.0 - pd)
    return rng.random(photons.shape) < 1.0 - miss


def run_g2_configuration(
    mode: str,
    config: SourceConfig,
    timing: TimingConfig | None = None,
    losses: LossBudget | None = None,
    n_pulses: int = 1_000_000,
    seed=0,
    coincidence_window_ns: float = 120.0,
) -> G2Estimate:
    """Simulate one of the three source-characterization arrangements.

    cross               one APD per beam, feed-forward inactive
    unconditional_idler 50/50 split of the idler onto two APDs, all pulses
    heralded            signal clicks gate the delivery chain; the surviving
                        idler photons are split onto two APDs and normalized
                        by the herald count

    All APDs share the signal detector model (efficiency, per-gate dark
    probability).  The coincidence window only needs to cover one pulse and
    is recorded for traceability; clicks from different pulses are separated
    by the full pulse period and can never coincide.
    """
    if mode not in G2_MODES:
        raise ValueError(f"unknown g2 mode {mode!r}; expected one of {G2_MODES}")
    if coincidence_window_ns <= config.apd_pulse_width_ns:
        raise ConfigError("coincidence window must exceed the APD pulse width")
    rng = seed if isinstance(seed, np.random.Generator) else spawn_rng(int(seed))
    eta = config.signal_detection_efficiency
    pd = config.dark_count_prob_per_gate
    pairs = sample_pair_counts(config, n_pulses, rng)

    if mode == "cross":
        sig = detect_signal_array(pairs, config, rng)
        idl = _idler_clicks(pairs, eta, pd, rng)
        n1, n2 = int(sig.sum()), int(idl.sum())
        nc = int((sig & idl).sum())
        return coincidence_g2(n1, n2, nc, n_pulses)

    if mode == "unconditional_idler":
        arm_a = rng.binomial(pairs, 0.5)
        arm_b = pairs - arm_a
        c1 = _idler_clicks(arm_a, eta, pd, rng)
        c2 = _idler_clicks(arm_b, eta, pd, rng)
        n1, n2 = int(c1.sum()), int(c2.sum())
        nc = int((c1 & c2).sum())
        return coincidence_g2(n1, n2, nc, n_pulses)

    # heralded: feed-forward gate plus delivery losses up to the splitter
    # (the 50/50 splitter replaces the taper at the end of the chain).
    timing = timing or TimingConfig()
    losses = losses or LossBudget()
    herald = detect_signal_array(pairs, config, rng)
    n_her = int(herald.sum())
    if n_her == 0:
        raise EstimatorUndefined("no heralds produced; increase n_pulses or mu")
    idler = pairs[herald]
    if timing.delivery_feasible:
        p_chain = losses.eta_fiber * losses.eta_aom
        arrived = rng.binomial(idler, p_chain)
    else:
        arrived = np.zeros_like(idler)
    arm_a = rng.binomial(arrived, 0.5)
    arm_b = arrived - arm_a
    c1 = _idler_clicks(arm_a, eta, pd, rng)
    c2 = _idler_clicks(arm_b, eta, pd, rng)
    n1, n2 = int(c1.sum()), int(c2.sum())
    nc = int((c1 & c2).sum())
    return coincidence_g2(n1, n2, nc, n_her)


def g2_scan(
    mode: str,
    config: SourceConfig,
    mu_values,
    timing: TimingConfig | None = None,
    losses: LossBudget | None = None,
    n_pulses: int = 1_000_000,
    seed: int = 0,
) -> list[dict]:
    """Sweep the pair rate and estimate g2 at each point.

    Returns one row per mu with the signal clicks-per-pulse proxy that stands
    in for absolute pump power.
    """
    from dataclasses import replace

    rows = []
    for i, mu in enumerate(mu_values):
        cfg = replace(config, mean_pairs_per_pulse=float(mu))
        rng = spawn_rng(seed, i)
        est = run_g2_configuration(mode, cfg, timing, losses, n_pulses, rng)
        rows.append(
            {
                "pump_power_proxy_mu": float(mu),
                "signal_clicks_per_pulse": herald_probability(cfg),
                "mode": mode,
                "g2": est.value,
                "sd": est.std_dev,
                "n_pulses": int(n_pulses),
            }
        )
    return rows

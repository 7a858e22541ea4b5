"""Inference pipeline: amplitudes, histograms, fits, classification, testing.

Amplitude extraction follows the recording protocol: the response amplitude
of a trial is the mean current in a window around the response peak minus
the mean current in a baseline window inside the dark segment.  Everything
downstream (histogram fits, criterion classification, significance testing,
efficiency estimation) operates on those amplitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import LossBudget, ProtocolConfig, RodCellParams
from .fitting import (
    FWHM_TO_SIGMA,
    LMResult,
    gaussian_sum,
    gaussian_sum_jacobian,
    levenberg_marquardt,
    pulse_model,
    pulse_model_jacobian,
)
from .rodcell import TrialRecord, fwhm_of, lowpass_single_pole
from .stats import binomial_se, normal_cdf, student_t_sf

__all__ = [
    "AmplitudeWindows",
    "default_windows",
    "extract_amplitude",
    "Histogram",
    "build_histogram",
    "GaussianComponent",
    "GaussianFitResult",
    "fit_gaussians",
    "classify_response",
    "response_probability",
    "exceedance_probability",
    "TTestResult",
    "welch_t_test",
    "welch_on_proportions",
    "QEEstimate",
    "estimate_qe",
    "WaveformFitResult",
    "average_and_fit_waveform",
    "CellAnalysis",
    "AnalysisReport",
    "analyze_run",
    "amplitude_noise_factor",
    "continuous_variance_for_amplitude_sd",
]

DEFAULT_CRITERION_PA = 0.45


@dataclass(frozen=True)
class AmplitudeWindows:
    """Baseline and peak averaging windows, as [start, stop) in seconds."""

    baseline: tuple[float, float]
    peak: tuple[float, float]

    def __post_init__(self) -> None:
        (a, b), (c, d) = self.baseline, self.peak
        if not (a < b and c < d):
            raise ValueError("windows must have positive length")
        if b > c:
            raise ValueError("baseline window must end before the peak window starts")


def default_windows(cell: RodCellParams, protocol: ProtocolConfig,
                    peak_halfwidth_s: float = 0.5) -> AmplitudeWindows:
    """Baseline: last 400 ms of the dark segment.  Peak: around the expected
    response peak (mid-shutter absorption plus the configured time to peak)."""
    t_open, t_close = protocol.shutter_interval
    center = 0.5 * (t_open + t_close) + cell.time_to_peak_s
    return AmplitudeWindows(
        baseline=(t_open - 0.4, t_open),
        peak=(center - peak_halfwidth_s, center + peak_halfwidth_s),
    )


def _window_mask(trial: TrialRecord, window: tuple[float, float]) -> np.ndarray:
    lo, hi = window
    t = trial.times_s
    if lo < t[0] - 1e-12 or hi > t[-1] + 1.0 / len(t):
        raise ValueError(f"window [{lo}, {hi}] outside the recorded interval")
    mask = (t >= lo) & (t < hi)
    if not mask.any():
        raise ValueError(f"window [{lo}, {hi}] contains no samples")
    return mask


def extract_amplitude(trial: TrialRecord, windows: AmplitudeWindows) -> float:
    """Peak-window mean current minus baseline-window mean current (pA)."""
    base = trial.current_pa[_window_mask(trial, windows.baseline)]
    peak = trial.current_pa[_window_mask(trial, windows.peak)]
    return float(peak.mean() - base.mean())


# --- histogramming and Gaussian fits --------------------------------------

@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])


def build_histogram(amplitudes, bin_width: float = 0.1,
                    lo: float | None = None, hi: float | None = None) -> Histogram:
    """Bin amplitudes on a grid aligned to multiples of the bin width."""
    amps = np.asarray(amplitudes, dtype=float)
    if amps.size == 0:
        raise ValueError("no amplitudes to bin")
    lo = math.floor((amps.min() if lo is None else lo) / bin_width) * bin_width
    hi = math.ceil((amps.max() if hi is None else hi) / bin_width) * bin_width
    hi = max(hi, lo + bin_width)
    n_bins = int(round((hi - lo) / bin_width))
    edges = lo + bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(amps, bins=edges)
    return Histogram(bin_edges=edges, counts=counts.astype(float))


@dataclass(frozen=True)
class GaussianComponent:
    weight: float  # fraction of the total fitted mass
    center_pa: float
    fwhm_pa: float


@dataclass(frozen=True)
class GaussianFitResult:
    components: tuple[GaussianComponent, ...]
    r_squared: float
    converged: bool
    iterations: int

    def __post_init__(self) -> None:
        if self.r_squared > 1.0 + 1e-12:
            raise ValueError("r_squared cannot exceed 1")
        for comp in self.components:
            if comp.fwhm_pa <= 0:
                raise ValueError("component FWHM must be positive")


def _default_gaussian_init(hist: Histogram, n_components: int) -> np.ndarray:
    x, y = hist.centers, hist.counts
    total = y.sum()
    mean = float((x * y).sum() / total)
    var = float(((x - mean) ** 2 * y).sum() / total)
    fwhm = max(2.3548 * math.sqrt(var), hist.bin_width)
    if n_components == 1:
        return np.asarray([y.max(), mean, fwhm])
    i_main = int(np.argmax(y))
    masked = y.copy()
    lo = max(i_main - 2, 0)
    masked[lo : i_main + 3] = -np.inf
    i_second = int(np.argmax(masked))
    return np.asarray(
        [y[i_main], x[i_main], fwhm / 1.5, max(y[i_second], 1.0), x[i_second], fwhm / 1.5]
    )


def _normalize_init(init, hist: Histogram, n_components: int) -> np.ndarray:
    comps = []
    for item in init:
        item = list(item)
        if len(item) == 2:  # (center, fwhm): pick the height off the data
            idx = int(np.argmin(np.abs(hist.centers - item[0])))
            comps.append([max(hist.counts[idx], 1.0), item[0], item[1]])
        elif len(item) == 3:
            comps.append(item)
        else:
            raise ValueError("init components must be (center, fwhm) or (height, center, fwhm)")
    if len(comps) != n_components:
        raise ValueError(f"init must provide {n_components} components")
    return np.asarray(comps, dtype=float).ravel()


def fit_gaussians(hist: Histogram, n_components: int, init=None,
                  equal_fwhm: bool = False) -> GaussianFitResult:
    """Least-squares Gaussian-sum fit to histogram bin heights.

    Needs at least 3 non-empty bins per free parameter.  Non-convergence is
    reported through the flag, not raised.  equal_fwhm constrains all
    components to one shared width.
    """
    if n_components not in (1, 2):
        raise ValueError("n_components must be 1 or 2")
    n_free = (2 * n_components + 1) if equal_fwhm else 3 * n_components
    n_nonempty = int((hist.counts > 0).sum())
    if n_nonempty < 3 * n_free:
        raise ValueError(
            f"histogram too sparse: {n_nonempty} non-empty bins for {n_free} parameters"
        )
    x, y = hist.centers, hist.counts
    p0 = _default_gaussian_init(hist, n_components) if init is None else _normalize_init(init, hist, n_components)

    if equal_fwhm and n_components > 1:
        shared0 = float(np.mean(p0.reshape(-1, 3)[:, 2]))
        q0 = np.concatenate([p0.reshape(-1, 3)[:, :2].ravel(), [shared0]])

        def expand(q: np.ndarray) -> np.ndarray:
            hc = q[:-1].reshape(-1, 2)
            return np.column_stack([hc, np.full(len(hc), q[-1])]).ravel()

        residual = lambda q: gaussian_sum(x, expand(q)) - y

        def jacobian(q: np.ndarray) -> np.ndarray:
            full = gaussian_sum_jacobian(x, expand(q))
            cols = []
            for i in range(n_components):
                cols.append(full[:, 3 * i])
                cols.append(full[:, 3 * i + 1])
            cols.append(sum(full[:, 3 * i + 2] for i in range(n_components)))
            return np.column_stack(cols)

        res = levenberg_marquardt(residual, jacobian, q0)
        params = expand(res.params)
    else:
        residual = lambda p: gaussian_sum(x, p) - y
        jacobian = lambda p: gaussian_sum_jacobian(x, p)
        res = levenberg_marquardt(residual, jacobian, p0)
        params = res.params

    model = gaussian_sum(x, params)
    ss_res = float(((y - model) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)

    comps = params.reshape(-1, 3)
    masses = np.abs(comps[:, 0]) * np.abs(comps[:, 2])
    total_mass = masses.sum()
    weights = masses / total_mass if total_mass > 0 else np.full(len(comps), 1.0 / len(comps))
    components = tuple(
        GaussianComponent(weight=float(w), center_pa=float(c[1]), fwhm_pa=float(abs(c[2])))
        for w, c in zip(weights, comps)
    )
    components = tuple(sorted(components, key=lambda comp: comp.center_pa))
    return GaussianFitResult(
        components=components,
        r_squared=min(r2, 1.0),
        converged=res.converged,
        iterations=res.iterations,
    )


# --- criterion classification ----------------------------------------------

def classify_response(amplitude_pa: float, criterion_pa: float = DEFAULT_CRITERION_PA) -> bool:
    """True iff the amplitude is strictly above the criterion level."""
    if not math.isfinite(amplitude_pa):
        raise ValueError("amplitude must be finite")
    return amplitude_pa > criterion_pa


def response_probability(amplitudes, criterion_pa: float = DEFAULT_CRITERION_PA) -> tuple[float, float]:
    """Fraction of amplitudes above criterion, with binomial standard error."""
    amps = np.asarray(amplitudes, dtype=float)
    if amps.size == 0:
        raise ValueError("no amplitudes")
    p = float((amps > criterion_pa).mean())
    return p, binomial_se(p, amps.size)


def exceedance_probability(fit, threshold_pa: float) -> float:
    """P(amplitude > threshold) under a single fitted Gaussian."""
    if isinstance(fit, GaussianFitResult):
        if len(fit.components) != 1:
            raise ValueError("exceedance probability needs a single-component fit")
        comp = fit.components[0]
    else:
        comp = fit
    sigma = comp.fwhm_pa * FWHM_TO_SIGMA
    if sigma <= 0:
        return 0.0 if threshold_pa >= comp.center_pa else 1.0
    return 1.0 - normal_cdf((threshold_pa - comp.center_pa) / sigma)


# --- significance testing ----------------------------------------------------

@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    one_tailed_p: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.one_tailed_p <= 1.0:
            raise ValueError("p-value out of range")
        if self.degrees_of_freedom <= 0:
            raise ValueError("degrees of freedom must be positive")


def welch_t_test(group_a, group_b) -> TTestResult:
    """Welch's unpaired t-test of mean(a) > mean(b), one-tailed.

    Satterthwaite (fractional) degrees of freedom; tail probability from the
    incomplete-beta form of the Student-t distribution.
    """
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least two samples")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        raise ValueError("degenerate groups: both variances are zero")
    na, nb = a.size, b.size
    sa, sb = va / na, vb / nb
    se = math.sqrt(sa + sb)
    t = (a.mean() - b.mean()) / se
    df = (sa + sb) ** 2 / (sa**2 / (na - 1) + sb**2 / (nb - 1))
    return TTestResult(t_statistic=float(t), degrees_of_freedom=float(df),
                       one_tailed_p=student_t_sf(t, df))


def welch_on_proportions(amps_a, amps_b, criterion_pa: float = DEFAULT_CRITERION_PA,
                         blocks: int = 10) -> TTestResult:
    """Alternative test input: block-wise response proportions.

    Splits each amplitude sample into contiguous blocks, computes the
    criterion-exceedance proportion per block and applies the same Welch
    test to the two proportion samples.
    """
    def proportions(amps) -> np.ndarray:
        amps = np.asarray(amps, dtype=float)
        if amps.size < 2 * blocks:
            raise ValueError("too few trials for the requested block count")
        return np.asarray([
            (chunk > criterion_pa).mean() for chunk in np.array_split(amps, blocks)
        ])

    return welch_t_test(proportions(amps_a), proportions(amps_b))


# --- quantum efficiency -------------------------------------------------------

@dataclass(frozen=True)
class QEEstimate:
    eta: float
    std_err: float
    p_sph: float
    p_dn: float
    losses: LossBudget
    negative: bool = False

    def __post_init__(self) -> None:
        if self.p_sph < 0 or self.p_dn < 0:
            raise ValueError("probabilities must be non-negative")


def estimate_qe(p_sph: float, p_dn: float, losses: LossBudget,
                n_sph: int | None = None, n_dn: int | None = None) -> QEEstimate:
    """Quantum efficiency corrected for dark noise and delivery losses:
    eta = (p_sph - p_dn) / (eta_taper * eta_aom * eta_fiber).

    The standard error propagates binomial errors of the two proportions and
    needs the sample counts; without them it is NaN.  A negative eta (a
    downward statistical fluctuation) is returned as-is but flagged.
    """
    transmission = losses.transmission
    if transmission <= 0:
        raise ValueError("loss-chain transmission must be positive")
    eta = (p_sph - p_dn) / transmission
    if n_sph and n_dn:
        std_err = math.hypot(binomial_se(p_sph, n_sph), binomial_se(p_dn, n_dn)) / transmission
    else:
        std_err = math.nan
    return QEEstimate(eta=float(eta), std_err=float(std_err), p_sph=float(p_sph),
                      p_dn=float(p_dn), losses=losses, negative=bool(eta < 0))


# --- averaged waveform fit ----------------------------------------------------

@dataclass(frozen=True)
class WaveformFitResult:
    amplitude_pa: float
    time_to_peak_s: float
    stages: float
    fwhm_duration_s: float
    converged: bool
    iterations: int
    onset_s: float
    times_s: np.ndarray = field(repr=False)
    mean_current_pa: np.ndarray = field(repr=False)


def average_and_fit_waveform(trials, bandwidth_hz: float = 20.0,
                             onset_s: float | None = None) -> WaveformFitResult:
    """Average response trials, low-pass for display bandwidth and fit the
    multi-stage impulse-response model.

    The fit origin defaults to the middle of the shutter window (the photon
    arrival time is not observable); time-to-peak is the fitted t0 measured
    from that origin.
    """
    trials = list(trials)
    if not trials:
        raise ValueError("no trials to average")
    t = trials[0].times_s
    for trial in trials[1:]:
        if trial.times_s.shape != t.shape or abs(trial.times_s[0] - t[0]) > 1e-12:
            raise ValueError("trials must share one time base")
    mean_wave = np.mean([trial.current_pa for trial in trials], axis=0)
    sample_rate = 1.0 / float(t[1] - t[0])
    filtered = lowpass_single_pole(mean_wave, bandwidth_hz, sample_rate)

    if onset_s is None:
        onset_s = float(np.mean([0.5 * (tr.shutter_interval[0] + tr.shutter_interval[1])
                                 for tr in trials]))
    rel = t - onset_s
    sel = rel > 0
    tt, yy = rel[sel], filtered[sel]

    i_peak = int(np.argmax(yy))
    p0 = np.asarray([max(yy[i_peak], 1e-3), max(tt[i_peak], 1e-3), 3.0])
    residual = lambda p: pulse_model(tt, p) - yy
    jacobian = lambda p: pulse_model_jacobian(tt, p)
    res = levenberg_marquardt(residual, jacobian, p0)
    a0, t0, m = res.params
    return WaveformFitResult(
        amplitude_pa=float(a0),
        time_to_peak_s=float(t0),
        stages=float(m),
        fwhm_duration_s=fwhm_of(float(t0), float(m)),
        converged=res.converged,
        iterations=res.iterations,
        onset_s=onset_s,
        times_s=t,
        mean_current_pa=filtered,
    )


# --- run-level report ----------------------------------------------------------

def amplitude_noise_factor(cell: RodCellParams, windows: AmplitudeWindows) -> float:
    """Variance of the extracted amplitude per unit waveform variance of the
    low-passed continuous noise (AR(1) window-averaging closed form)."""
    rho = math.exp(-2.0 * math.pi * cell.recording_bandwidth_hz / cell.sample_rate_hz)

    def var_of_mean(window: tuple[float, float]) -> float:
        n = int(round((window[1] - window[0]) * cell.sample_rate_hz))
        s = n * (1 + rho) / (1 - rho) - 2 * rho * (1 - rho**n) / (1 - rho) ** 2
        return s / n**2

    return var_of_mean(windows.peak) + var_of_mean(windows.baseline)


def continuous_variance_for_amplitude_sd(target_amplitude_sd_pa: float,
                                         cell: RodCellParams,
                                         windows: AmplitudeWindows) -> float:
    """Waveform-level continuous-noise variance whose window-averaged
    amplitude contribution has the requested standard deviation."""
    return target_amplitude_sd_pa**2 / amplitude_noise_factor(cell, windows)


@dataclass
class CellAnalysis:
    cell_index: int
    n_zero: int
    n_single: int
    n_multi: int
    amplitudes_single: np.ndarray
    amplitudes_zero: np.ndarray
    p_sph: float
    p_sph_sd: float
    p_dn: float
    p_dn_sd: float
    welch: TTestResult | None
    qe: QEEstimate
    dark_fit: GaussianFitResult | None
    single_fit: GaussianFitResult | None
    waveform_fit: WaveformFitResult | None
    fit_errors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def fit_dict(fit):
            if fit is None:
                return None
            return {
                "components": [
                    {"weight": c.weight, "center_pa": c.center_pa, "fwhm_pa": c.fwhm_pa}
                    for c in fit.components
                ],
                "r_squared": fit.r_squared,
                "converged": fit.converged,
                "iterations": fit.iterations,
            }

        wf = self.waveform_fit
        return {
            "cell_index": self.cell_index,
            "trials": {"zero_herald": self.n_zero, "single_herald": self.n_single,
                       "multi_herald": self.n_multi},
            "p_sph": self.p_sph, "p_sph_sd": self.p_sph_sd,
            "p_dn": self.p_dn, "p_dn_sd": self.p_dn_sd,
            "welch": None if self.welch is None else {
                "t_statistic": self.welch.t_statistic,
                "degrees_of_freedom": self.welch.degrees_of_freedom,
                "one_tailed_p": self.welch.one_tailed_p,
            },
            "quantum_efficiency": {
                "eta": self.qe.eta, "std_err": self.qe.std_err,
                "negative_flag": self.qe.negative,
            },
            "dark_fit": fit_dict(self.dark_fit),
            "single_herald_fit": fit_dict(self.single_fit),
            "waveform_fit": None if wf is None else {
                "amplitude_pa": wf.amplitude_pa,
                "time_to_peak_s": wf.time_to_peak_s,
                "stages": wf.stages,
                "fwhm_duration_s": wf.fwhm_duration_s,
                "converged": wf.converged,
                "iterations": wf.iterations,
            },
            "fit_errors": self.fit_errors,
        }


@dataclass
class AnalysisReport:
    cells: list[CellAnalysis]
    criterion_pa: float
    windows: AmplitudeWindows
    bin_width_pa: float
    welch_on: str

    def to_dict(self) -> dict:
        return {
            "settings": {
                "criterion_pa": self.criterion_pa,
                "baseline_window_s": list(self.windows.baseline),
                "peak_window_s": list(self.windows.peak),
                "bin_width_pa": self.bin_width_pa,
                "welch_on": self.welch_on,
            },
            "cells": [cell.to_dict() for cell in self.cells],
        }


def analyze_run(dataset, windows: AmplitudeWindows | None = None,
                criterion_pa: float = DEFAULT_CRITERION_PA,
                bin_width_pa: float = 0.1,
                welch_on: str = "amplitudes",
                welch_blocks: int = 10) -> AnalysisReport:
    """Run the full inference pipeline on a simulated dataset.

    Multi-herald trials are counted but excluded from every estimate; the
    quantum efficiency uses single-herald vs zero-herald criterion
    probabilities and the loss budget stored with the run.
    """
    if welch_on not in ("amplitudes", "proportions"):
        raise ValueError("welch_on must be 'amplitudes' or 'proportions'")
    losses = dataset.config.losses
    protocol = dataset.config.protocol
    cells_out: list[CellAnalysis] = []
    for idx, cell_rec in enumerate(dataset.cells):
        cell = cell_rec.params
        win = windows or default_windows(cell, protocol)
        by_class: dict[str, list] = {"zero_herald": [], "single_herald": [], "multi_herald": []}
        for trial in cell_rec.trials:
            by_class[trial.trial_class].append(trial)
        amps_single = np.asarray([extract_amplitude(t, win) for t in by_class["single_herald"]])
        amps_zero = np.asarray([extract_amplitude(t, win) for t in by_class["zero_herald"]])

        p_sph, p_sph_sd = response_probability(amps_single, criterion_pa) if amps_single.size else (0.0, math.nan)
        p_dn, p_dn_sd = response_probability(amps_zero, criterion_pa) if amps_zero.size else (0.0, math.nan)

        welch = None
        fit_errors: dict[str, str] = {}
        if amps_single.size >= 2 and amps_zero.size >= 2:
            try:
                if welch_on == "amplitudes":
                    welch = welch_t_test(amps_single, amps_zero)
                else:
                    welch = welch_on_proportions(amps_single, amps_zero, criterion_pa, welch_blocks)
            except ValueError as exc:
                fit_errors["welch"] = str(exc)

        qe = estimate_qe(p_sph, p_dn, losses,
                         n_sph=amps_single.size or None, n_dn=amps_zero.size or None)

        dark_fit = single_fit = None
        if amps_zero.size:
            try:
                dark_fit = fit_gaussians(build_histogram(amps_zero, bin_width_pa), 1)
            except ValueError as exc:
                fit_errors["dark_fit"] = str(exc)
        if amps_single.size:
            try:
                init = [(0.0, 0.5), (cell.response_amplitude_pa, 0.5)]
                single_fit = fit_gaussians(build_histogram(amps_single, bin_width_pa), 2, init=init)
            except ValueError as exc:
                fit_errors["single_fit"] = str(exc)

        waveform_fit = None
        responders = [t for t, a in zip(by_class["single_herald"], amps_single)
                      if classify_response(a, criterion_pa)]
        if responders:
            try:
                waveform_fit = average_and_fit_waveform(responders)
            except ValueError as exc:
                fit_errors["waveform_fit"] = str(exc)

        cells_out.append(CellAnalysis(
            cell_index=idx,
            n_zero=len(by_class["zero_herald"]),
            n_single=len(by_class["single_herald"]),
            n_multi=len(by_class["multi_herald"]),
            amplitudes_single=amps_single,
            amplitudes_zero=amps_zero,
            p_sph=p_sph, p_sph_sd=p_sph_sd, p_dn=p_dn, p_dn_sd=p_dn_sd,
            welch=welch, qe=qe,
            dark_fit=dark_fit, single_fit=single_fit, waveform_fit=waveform_fit,
            fit_errors=fit_errors,
        ))
    win = windows or default_windows(dataset.cells[0].params, protocol)
    return AnalysisReport(cells=cells_out, criterion_pa=criterion_pa, windows=win,
                          bin_width_pa=bin_width_pa, welch_on=welch_on)

"""Physical parameterization of the source, delivery optics, timing and cell.

All dataclasses validate on construction.  Field names carry explicit units
(_nm, _ns, _us, _s, _hz, _pa, _pa2) to keep unit bugs out of the config file
and the math; probabilities and efficiencies are bare fractions in [0, 1].
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

__all__ = [
    "ConfigError",
    "SourceConfig",
    "TimingConfig",
    "LossBudget",
    "RodCellParams",
    "ProtocolConfig",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "dump_config",
    "default_experiment",
]

# Pair generation rate calibrated so the heralded-source second-order
# correlation lands at 0.08 with the default detection efficiency.
DEFAULT_MEAN_PAIRS = 0.0566

# Per-gate dark-click probability of a gated APD (40 Hz dark rate in a 70 ns
# gate), set so heralding SNR is about 60 at the rod-cell operating point
# where the mean photon-click probability is 1.7e-4 per pulse.
DEFAULT_DARK_PROB = 2.83e-6

# Waveform-level variance (pA^2) of the low-passed continuous physiological
# noise.  Chosen so that amplitude extraction with the default analysis
# windows yields a total dark amplitude variance of about 0.07 pA^2 once the
# discrete dark events and the amplifier noise are added.
DEFAULT_CONTINUOUS_NOISE_VAR = 4.85


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _check_prob(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must be in [0, 1], got {value}")


def _check_pos(name: str, value: float) -> None:
    if value <= 0:
        raise ConfigError(f"{name} must be > 0, got {value}")


def _check_nonneg(name: str, value: float) -> None:
    if value < 0:
        raise ConfigError(f"{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class SourceConfig:
    """Pulsed degenerate pair source with a gated heralding APD."""

    pump_wavelength_nm: float = 266.0
    signal_wavelength_nm: float = 532.0
    idler_wavelength_nm: float = 532.0
    rep_rate_hz: float = 25_000.0
    mean_pairs_per_pulse: float = DEFAULT_MEAN_PAIRS
    signal_detection_efficiency: float = 0.5
    dark_count_prob_per_gate: float = DEFAULT_DARK_PROB
    gate_width_ns: float = 70.0
    apd_dead_time_ns: float = 35.0
    apd_pulse_width_ns: float = 35.0
    # None selects the multimode (Poissonian) limit; a finite count switches
    # the per-pulse pair number to a sum of that many thermal modes.
    spectral_modes: int | None = None

    def __post_init__(self) -> None:
        _check_pos("rep_rate_hz", self.rep_rate_hz)
        _check_nonneg("mean_pairs_per_pulse", self.mean_pairs_per_pulse)
        _check_prob("signal_detection_efficiency", self.signal_detection_efficiency)
        _check_prob("dark_count_prob_per_gate", self.dark_count_prob_per_gate)
        _check_pos("gate_width_ns", self.gate_width_ns)
        _check_nonneg("apd_dead_time_ns", self.apd_dead_time_ns)
        _check_pos("apd_pulse_width_ns", self.apd_pulse_width_ns)
        for name in ("pump_wavelength_nm", "signal_wavelength_nm", "idler_wavelength_nm"):
            _check_pos(name, getattr(self, name))
        if self.spectral_modes is not None and self.spectral_modes < 1:
            raise ConfigError("spectral_modes must be None or >= 1")
        # Energy conservation for the pair process: 1/lp = 1/ls + 1/li.
        lhs = 1.0 / self.pump_wavelength_nm
        rhs = 1.0 / self.signal_wavelength_nm + 1.0 / self.idler_wavelength_nm
        if abs(lhs - rhs) > 1e-12 * lhs:
            raise ConfigError(
                "wavelengths violate pair energy conservation: "
                f"1/{self.pump_wavelength_nm} != 1/{self.signal_wavelength_nm}"
                f" + 1/{self.idler_wavelength_nm}"
            )

    @property
    def pulse_period_s(self) -> float:
        return 1.0 / self.rep_rate_hz


@dataclass(frozen=True)
class TimingConfig:
    """Feed-forward electronics and optical delay line."""

    generator_period_us: float = 40.0
    apd_pulse_width_ns: float = 35.0
    and_gate_window_ns: float = 120.0
    aom_activation_delay_ns: float = 190.0
    aom_open_duration_ns: float = 100.0
    fiber_delay_ns: float = 230.0
    fiber_delay_jitter_sd_ns: float = 0.0

    def __post_init__(self) -> None:
        for name in (
            "generator_period_us",
            "apd_pulse_width_ns",
            "and_gate_window_ns",
            "aom_activation_delay_ns",
            "aom_open_duration_ns",
            "fiber_delay_ns",
        ):
            _check_pos(name, getattr(self, name))
        _check_nonneg("fiber_delay_jitter_sd_ns", self.fiber_delay_jitter_sd_ns)

    @property
    def delivery_feasible(self) -> bool:
        """True iff a photon delayed by the fiber arrives while the gate is open."""
        lo = self.aom_activation_delay_ns
        return lo <= self.fiber_delay_ns <= lo + self.aom_open_duration_ns


@dataclass(frozen=True)
class LossBudget:
    """Transmissions of the idler delivery chain."""

    eta_aom: float = 0.60
    eta_taper: float = 0.70
    eta_fiber: float = 0.50

    def __post_init__(self) -> None:
        _check_prob("eta_aom", self.eta_aom)
        _check_prob("eta_taper", self.eta_taper)
        _check_prob("eta_fiber", self.eta_fiber)

    @property
    def transmission(self) -> float:
        return self.eta_aom * self.eta_taper * self.eta_fiber


@dataclass(frozen=True)
class RodCellParams:
    """Rod-cell response model: efficiency, pulse shape and noise."""

    quantum_efficiency: float = 0.29
    response_amplitude_pa: float = 0.58
    time_to_peak_s: float = 1.75
    filter_stages: int = 4
    amplitude_jitter_sd_pa: float = 0.0
    continuous_noise_variance_pa2: float = DEFAULT_CONTINUOUS_NOISE_VAR
    discrete_event_rate_hz: float = 0.02
    amplifier_noise_variance_pa2: float = 0.032
    sample_rate_hz: float = 1000.0
    recording_bandwidth_hz: float = 100.0
    saturation_pa: float | None = None

    def __post_init__(self) -> None:
        _check_prob("quantum_efficiency", self.quantum_efficiency)
        _check_pos("response_amplitude_pa", self.response_amplitude_pa)
        _check_pos("time_to_peak_s", self.time_to_peak_s)
        if self.filter_stages < 2:
            raise ConfigError("filter_stages must be >= 2 for a unimodal pulse")
        _check_nonneg("amplitude_jitter_sd_pa", self.amplitude_jitter_sd_pa)
        _check_nonneg("continuous_noise_variance_pa2", self.continuous_noise_variance_pa2)
        _check_nonneg("discrete_event_rate_hz", self.discrete_event_rate_hz)
        _check_nonneg("amplifier_noise_variance_pa2", self.amplifier_noise_variance_pa2)
        _check_pos("sample_rate_hz", self.sample_rate_hz)
        _check_pos("recording_bandwidth_hz", self.recording_bandwidth_hz)
        if self.saturation_pa is not None:
            _check_pos("saturation_pa", self.saturation_pa)


@dataclass(frozen=True)
class ProtocolConfig:
    """Shutter cycle and per-run bookkeeping.

    The functionality-check fields are metadata from the lab protocol (no
    drift model is simulated).
    """

    dark_duration_s: float = 0.6
    shutter_open_s: float = 0.1
    post_record_s: float = 5.0
    pulses_per_window: int = 2500
    trials_per_cell: int = 400
    master_seed: int = 20240
    functionality_check_interval_min: float = 20.0
    session_limit_min: float = 120.0

    def __post_init__(self) -> None:
        _check_pos("dark_duration_s", self.dark_duration_s)
        _check_pos("shutter_open_s", self.shutter_open_s)
        _check_pos("post_record_s", self.post_record_s)
        if self.pulses_per_window < 1:
            raise ConfigError("pulses_per_window must be >= 1")
        if self.trials_per_cell < 1:
            raise ConfigError("trials_per_cell must be >= 1")

    @property
    def trial_duration_s(self) -> float:
        return self.dark_duration_s + self.post_record_s

    @property
    def shutter_interval(self) -> tuple[float, float]:
        return (self.dark_duration_s, self.dark_duration_s + self.shutter_open_s)

    def validate_against_source(self, source: SourceConfig) -> None:
        expected = round(self.shutter_open_s * source.rep_rate_hz)
        if self.pulses_per_window != expected:
            raise ConfigError(
                f"pulses_per_window={self.pulses_per_window} inconsistent with "
                f"shutter_open_s * rep_rate_hz = {expected}"
            )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one run."""

    source: SourceConfig = field(default_factory=SourceConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    losses: LossBudget = field(default_factory=LossBudget)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    cells: tuple[RodCellParams, ...] = field(default_factory=lambda: (RodCellParams(),))

    def __post_init__(self) -> None:
        if not self.cells:
            raise ConfigError("at least one cell must be configured")
        self.protocol.validate_against_source(self.source)
        if not self.timing.delivery_feasible:
            raise ConfigError(
                "timing infeasible: fiber_delay_ns must fall inside "
                "[aom_activation_delay_ns, aom_activation_delay_ns + aom_open_duration_ns]"
            )


_SECTION_TYPES = {
    "source": SourceConfig,
    "timing": TimingConfig,
    "losses": LossBudget,
    "protocol": ProtocolConfig,
    "cell": RodCellParams,
}

_INT_FIELDS = {
    "filter_stages",
    "pulses_per_window",
    "trials_per_cell",
    "master_seed",
    "spectral_modes",
}


def _parse_section(cls, section: configparser.SectionProxy, name: str):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section [{name}]")
        raw = raw.strip()
        if raw.lower() in ("none", ""):
            kwargs[key] = None
        elif key in _INT_FIELDS:
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad section [{name}]: {exc}") from exc


def load_config(path_or_text) -> ExperimentConfig:
    """Read an experiment configuration from a sectioned key-value file.

    Sections: [source], [timing], [losses], [protocol] and one or more cell
    sections named [cell] (or [cell:1], [cell:2], ... for multi-cell runs).
    Missing sections take the defaults; unknown keys are an error.
    """
    parser = configparser.ConfigParser()
    text = str(path_or_text)
    if "\n" in text or "=" in text:
        parser.read_string(text)
    else:
        read = parser.read(text)
        if not read:
            raise ConfigError(f"cannot read config file: {text}")

    parts: dict[str, object] = {}
    cells: list[tuple[str, RodCellParams]] = []
    for name in parser.sections():
        base = name.split(":", 1)[0].strip().lower()
        if base == "cell":
            cells.append((name, _parse_section(RodCellParams, parser[name], name)))
        elif base in _SECTION_TYPES:
            parts[base] = _parse_section(_SECTION_TYPES[base], parser[name], name)
        else:
            raise ConfigError(f"unknown section [{name}]")
    cells.sort(key=lambda item: item[0])
    kwargs: dict[str, object] = dict(parts)
    if cells:
        kwargs["cells"] = tuple(cell for _, cell in cells)
    return ExperimentConfig(**kwargs)  # type: ignore[arg-type]


def _emit_section(buf: io.StringIO, name: str, obj) -> None:
    buf.write(f"[{name}]\n")
    for f in fields(obj):
        value = getattr(obj, f.name)
        if value is None:
            buf.write(f"{f.name} = none\n")
        else:
            buf.write(f"{f.name} = {value!r}\n")
    buf.write("\n")


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a configuration in the same format load_config accepts."""
    buf = io.StringIO()
    _emit_section(buf, "source", cfg.source)
    _emit_section(buf, "timing", cfg.timing)
    _emit_section(buf, "losses", cfg.losses)
    _emit_section(buf, "protocol", cfg.protocol)
    if len(cfg.cells) == 1:
        _emit_section(buf, "cell", cfg.cells[0])
    else:
        for i, cell in enumerate(cfg.cells, start=1):
            _emit_section(buf, f"cell:{i}", cell)
    return buf.getvalue()


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def default_experiment(**overrides) -> ExperimentConfig:
    """Default experiment at the rod-cell operating point.

    The source rate is lowered from the characterization default so the mean
    number of heralds per 2500-pulse shutter window is about 0.43, which puts
    the multi-herald fraction near 7%.
    """
    from .source import mu_for_herald_mean

    source = SourceConfig()
    protocol = ProtocolConfig()
    mu = mu_for_herald_mean(0.431, source, protocol.pulses_per_window)
    source = replace(source, mean_pairs_per_pulse=mu)
    base = ExperimentConfig(source=source, protocol=protocol)
    if overrides:
        base = replace(base, **overrides)
    return base

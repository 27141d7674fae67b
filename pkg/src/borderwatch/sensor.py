"""Distance-to-analog model of an IR obstacle sensor.

The real sensor reports a 10-bit analog value; firmware treats any
reading strictly below the detection threshold as an obstacle. Here the
reflection strength is modeled as a linear function of obstacle
distance: the near edge of the sensing range maps to 0, the far edge to
one count below the threshold, so an obstacle anywhere inside the range
always reads as a detection. A clear path reads a configurable baseline
above the threshold. Uniform integer noise can be layered on top; the
clamps guarantee noise never flips a reading across the threshold.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

# A single ADC sample; always an integer in [0, adc_full_scale].
AnalogReading = int


class InvalidDistanceError(ValueError):
    """Raised when a sample is requested for a non-positive distance."""


@dataclass(frozen=True)
class IrSensorConfig:
    """Sensing-range and ADC parameters for one IR sensor.

    Defaults follow the reference hardware: a roughly 2-30 cm sensing
    gap on a 10-bit ADC with detections strictly below 824.
    """

    range_min_cm: float = 2.0
    range_max_cm: float = 30.0
    adc_full_scale: int = 1023
    baseline_value: int = 1000
    detect_threshold: int = 824
    noise_amplitude: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.range_min_cm < self.range_max_cm:
            raise ValueError("require 0 < range_min_cm < range_max_cm")
        if not self.detect_threshold <= self.baseline_value <= self.adc_full_scale:
            raise ValueError("require detect_threshold <= baseline_value <= adc_full_scale")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be >= 0")
        # A clear path must never read below the threshold, however noisy.
        if self.baseline_value - self.noise_amplitude < self.detect_threshold:
            raise ValueError("baseline_value - noise_amplitude must stay >= detect_threshold")


def sample(cfg: IrSensorConfig, distance_cm: float | None, rng: random.Random) -> AnalogReading:
    """Read the sensor with an obstacle at ``distance_cm`` (None = clear path).

    In-range obstacles map linearly onto [0, detect_threshold - 1]; the
    clamp keeps noisy in-range readings below the threshold. Everything
    else reads the baseline, clamped to the ADC scale.
    """
    if distance_cm is not None and distance_cm <= 0:
        raise InvalidDistanceError(f"distance_cm must be positive, got {distance_cm}")

    noise = rng.randint(-cfg.noise_amplitude, cfg.noise_amplitude) if cfg.noise_amplitude else 0

    if distance_cm is None or not cfg.range_min_cm <= distance_cm <= cfg.range_max_cm:
        value = cfg.baseline_value + noise
        return _clamp(value, 0, cfg.adc_full_scale)

    span = cfg.range_max_cm - cfg.range_min_cm
    base = round((distance_cm - cfg.range_min_cm) / span * (cfg.detect_threshold - 1))
    return _clamp(base + noise, 0, cfg.detect_threshold - 1)


def is_detection(reading: AnalogReading, cfg: IrSensorConfig) -> bool:
    """True iff the reading is strictly below the detection threshold."""
    if not 0 <= reading <= cfg.adc_full_scale:
        raise ValueError(f"reading {reading} outside ADC scale 0..{cfg.adc_full_scale}")
    return reading < cfg.detect_threshold


def _clamp(value: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, value))

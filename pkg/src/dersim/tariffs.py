"""Time-of-use tariffs with peak / part-peak / off-peak tiers.

Tier windows partition the day at simulation step resolution.  The peak
window is centered on the most frequent network peak demand hour; the two
part-peak bands sit immediately before and after it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OFF_PEAK, PART_PEAK, PEAK = 0, 1, 2


@dataclass
class Tariff:
    name: str
    off_price: float  # $/kWh
    part_price: float
    peak_price: float
    tier_of_day: np.ndarray  # (steps_per_day,) int8

    def __post_init__(self):
        if not (self.peak_price >= self.part_price >= self.off_price > 0):
            raise ValueError(
                f"tariff {self.name}: prices must satisfy peak >= part >= off > 0"
            )

    @property
    def steps_per_day(self) -> int:
        return len(self.tier_of_day)

    def day_prices(self) -> np.ndarray:
        table = np.array([self.off_price, self.part_price, self.peak_price])
        return table[self.tier_of_day]

    def price_series(self, T: int) -> np.ndarray:
        """Per-step $/kWh over a horizon (daily pattern, all days alike)."""
        return np.resize(self.day_prices(), T)

    def tier_series(self, T: int) -> np.ndarray:
        return np.resize(self.tier_of_day, T)


def build_tariff(
    name: str,
    prices: tuple[float, float, float],
    peak_center_step: int,
    peak_hours: float = 4.0,
    part_hours: float = 2.0,
    steps_per_day: int = 96,
) -> Tariff:
    """Build a tariff whose peak window is centered on ``peak_center_step``.

    ``prices`` is (off, part, peak) in $/kWh.  Windows wrap around
    midnight when the center sits near the day boundary.
    """
    steps_per_hour = steps_per_day / 24.0
    n_peak = max(1, int(round(peak_hours * steps_per_hour)))
    n_part = max(0, int(round(part_hours * steps_per_hour)))
    tier = np.full(steps_per_day, OFF_PEAK, dtype=np.int8)
    start = peak_center_step - n_peak // 2
    for k in range(n_peak):
        tier[(start + k) % steps_per_day] = PEAK
    for k in range(n_part):
        tier[(start - 1 - k) % steps_per_day] = PART_PEAK
        tier[(start + n_peak + k) % steps_per_day] = PART_PEAK
    return Tariff(name, prices[0], prices[1], prices[2], tier)


def most_frequent_peak_step(total_load: np.ndarray, steps_per_day: int = 96) -> int:
    """Step-of-day at which the network total peaks most often across days."""
    T = len(total_load)
    n_days = T // steps_per_day
    if n_days == 0:
        return int(np.argmax(total_load)) % steps_per_day
    days = total_load[: n_days * steps_per_day].reshape(n_days, steps_per_day)
    peak_steps = np.argmax(days, axis=1)
    counts = np.bincount(peak_steps, minlength=steps_per_day)
    return int(np.argmax(counts))

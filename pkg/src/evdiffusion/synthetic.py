"""Synthetic corpora with known structure, used for smoke runs and the
acceptance experiments.

Battery curves come in two tail families (linear ramp, exponential decay)
after a noisy plateau at 8, 16 or 32 A. Station profiles come in two classes
with non-overlapping peak hours.
"""
from __future__ import annotations

import numpy as np

PLATEAU_LEVELS = (8.0, 16.0, 32.0)


def battery_curves(
    n: int,
    rng: np.random.Generator,
    length: int = 144,
    step_minutes: float = 5.0,
    duration_hours: tuple[float, float] = (2.0, 7.0),
    noise: float = 0.4,
) -> tuple[np.ndarray, np.ndarray]:
    """Plateau-then-decline charging curves, zero padded to ``length``.

    Returns ``(values, valid_len)``. Durations are drawn uniformly in hours
    and rounded to the time grid; the absorption tail takes 15-40 % of the
    session. Half the curves decline linearly to zero, half exponentially.
    """
    values = np.zeros((n, length))
    valid = np.zeros(n, dtype=np.int64)
    for k in range(n):
        steps = int(round(rng.uniform(*duration_hours) * 60.0 / step_minutes))
        steps = int(np.clip(steps, 4, length))
        level = PLATEAU_LEVELS[rng.integers(len(PLATEAU_LEVELS))]
        tail = max(2, int(round(steps * rng.uniform(0.15, 0.4))))
        bulk = steps - tail
        curve = np.empty(steps)
        curve[:bulk] = level + noise * rng.standard_normal(bulk)
        u = np.arange(1, tail + 1) / tail
        if k % 2 == 0:
            curve[bulk:] = level * (1.0 - u)
        else:
            curve[bulk:] = level * np.exp(-3.0 * u)
        curve[bulk:] += 0.5 * noise * rng.standard_normal(tail) * (1.0 - u)
        values[k, :steps] = np.clip(curve, 0.0, None)
        valid[k] = steps
    return values, valid


def station_profiles(
    n_per_class: int,
    rng: np.random.Generator,
    length: int = 96,
    peaks_hours: tuple[float, float] = (9.0, 19.0),
    width_hours: float = 1.5,
    peak_kw: tuple[tuple[float, float], ...] = ((30.0, 50.0), (70.0, 100.0)),
    noise: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Daily load profiles for two station classes with disjoint peaks.

    Class ``c`` has a single Gaussian-shaped load bump centred near
    ``peaks_hours[c]`` with height drawn from ``peak_kw[c]``. The classes
    differ in height as well as timing: a pure time shift leaves the pooled
    value distribution unchanged. Returns ``(values, labels)`` with rows
    grouped by class.
    """
    if len(peak_kw) != len(peaks_hours):
        raise ValueError("need one peak height range per class")
    hours = np.arange(length) * 24.0 / length
    rows, labels = [], []
    for c, centre in enumerate(peaks_hours):
        for _ in range(n_per_class):
            mu = centre + rng.normal(0.0, 0.5)
            amp = rng.uniform(*peak_kw[c])
            w = width_hours * rng.uniform(0.8, 1.2)
            prof = amp * np.exp(-0.5 * ((hours - mu) / w) ** 2)
            prof += noise * np.abs(rng.standard_normal(length))
            rows.append(np.clip(prof, 0.0, None))
            labels.append(c)
    return np.array(rows), np.array(labels, dtype=np.int64)

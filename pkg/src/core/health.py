from __future__ import annotations

import pandas as pd

CRITICAL_FRACTION = 0.20


def crossed_below(prev_level: float, level: float, capacity: float, fraction: float = CRITICAL_FRACTION) -> bool:
    threshold = fraction * capacity
    return prev_level >= threshold and level < threshold


def flag_critical_battery(
    levels: pd.Series, capacity: float, fraction: float = CRITICAL_FRACTION
) -> pd.Series:
    return levels < fraction * capacity


def count_critical_transitions(
    levels: pd.Series, capacity: float, fraction: float = CRITICAL_FRACTION
) -> int:
    """
    Number of moves from at-or-above the critical level to below it.
    The series is read in order; the first sample alone is never a transition.
    """
    if levels.empty:
        return 0
    critical = flag_critical_battery(levels.reset_index(drop=True), capacity, fraction)
    entered = critical & ~critical.shift(1, fill_value=True)
    return int(entered.sum())


def classify_battery_band(soc: pd.Series) -> pd.Series:
    """
    Textual state-of-charge bands for reports.
    """
    return pd.cut(
        soc,
        bins=[-0.001, CRITICAL_FRACTION, 0.5, 1.001],
        labels=["critical", "low", "healthy"],
        right=False,
    ).astype(str)

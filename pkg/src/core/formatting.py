from __future__ import annotations

import math


def fmt_pct(x: float, decimals: int = 1) -> str:
    return f"{x:.{decimals}%}"


def fmt_int(n: int) -> str:
    return f"{n:,}"


def fmt_lbs(x: float, decimals: int = 2) -> str:
    return f"{x:,.{decimals}f} lbs"


def fmt_seconds(s: float) -> str:
    """Compact duration, e.g. 3723 -> '1h 02m 03s'."""
    if not math.isfinite(s):
        return "-"
    total = int(round(s))
    sign = "-" if total < 0 else ""
    h, rem = divmod(abs(total), 3600)
    m, sec = divmod(rem, 60)
    if h:
        return f"{sign}{h}h {m:02d}m {sec:02d}s"
    if m:
        return f"{sign}{m}m {sec:02d}s"
    return f"{sign}{sec}s"

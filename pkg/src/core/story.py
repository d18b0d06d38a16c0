from __future__ import annotations

import pandas as pd

from src.core.formatting import fmt_lbs, fmt_pct
from src.core.metrics import BASELINE_POLICY


def headline_emissions_avoided(summary: pd.DataFrame) -> str:
    """
    Executive headline like:
    'carbon-aware avoided 12.34 lbs CO2 (3.1%) versus openwhisk over 18 servers.'
    Requires summary_table columns.
    """
    if summary is None or summary.empty:
        return "No runs to summarize."

    candidates = summary[
        (summary["policy"] != BASELINE_POLICY) & summary["emissions_avoided_lbs"].notna()
    ]
    if candidates.empty:
        return f"No policy was compared against the {BASELINE_POLICY} baseline."

    top = candidates.sort_values(
        ["emissions_avoided_lbs", "policy"], ascending=[False, True]
    ).iloc[0]
    avoided = float(top["emissions_avoided_lbs"])
    verb = "avoided" if avoided >= 0 else "added"
    pct = top["avoided_pct"]
    pct_txt = f" ({fmt_pct(abs(float(pct)))})" if pd.notna(pct) else ""

    return (
        f"{top['policy']} {verb} {fmt_lbs(abs(avoided))} CO2{pct_txt} versus {BASELINE_POLICY} "
        f"over {int(top['num_servers'])} servers."
    )

"""Popularity-bias metrics (PER, PSR, PCU) and recommendation metrics (SR, AT, HSR, TSR).

All functions aggregate :class:`~crsdebias.simulator.EpisodeLog` records.
Quantities that cannot be computed come back as :class:`~crsdebias.util.NoValue`
rather than 0.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import HEAD, TAIL
from .util import NoValue, is_value

METRIC_FIELDS = ("per", "psr", "pcu", "sr", "at", "hsr", "tsr")


def exposure_bias_turn(popularities, head_threshold: float) -> float:
    """Rank-discounted share of popular items in one recommendation list.

    ``popularities`` lists item popularity in rank order (rank 1 first). An
    item counts as popular when its popularity exceeds ``head_threshold``.
    Returns ``rho * P`` with ``rho = sum 1/ln(rank + 1)`` over popular items
    and ``P`` the popular fraction of the list.
    """
    pops = list(popularities)
    if not pops:
        return 0.0
    rho = 0.0
    n_pop = 0
    for rank, p in enumerate(pops, start=1):
        if p > head_threshold:
            rho += 1.0 / math.log(rank + 1)
            n_pop += 1
    return rho * (n_pop / len(pops))


def per(logs):
    if not logs:
        return NoValue("no data")
    means = []
    for log in logs:
        vals = [t.exposure for t in log.turns]
        means.append(sum(vals) / len(vals) if vals else 0.0)
    return float(sum(means) / len(means))


def success_by_item(logs) -> dict:
    """item -> (popularity, attempts, successes)."""
    out: dict[int, list] = {}
    for log in logs:
        rec = out.setdefault(log.target, [log.target_popularity, 0, 0])
        rec[1] += 1
        rec[2] += int(log.success)
    return {k: tuple(v) for k, v in out.items()}


def lorenz_points(success_rates_sorted) -> tuple[np.ndarray, np.ndarray]:
    sr = np.asarray(success_rates_sorted, dtype=np.float64)
    n = sr.size
    x = np.concatenate([[0.0], np.arange(1, n + 1) / n])
    y = np.concatenate([[0.0], np.cumsum(sr) / sr.sum()])
    return x, y


def psr(logs):
    """Gini coefficient of per-item success rates along ascending popularity."""
    items = success_by_item(logs)
    if not items:
        return NoValue("no data")
    ordered = sorted(items.items(), key=lambda kv: (kv[1][0], kv[0]))
    rates = [s / a for _, (_, a, s) in ordered]
    if sum(rates) == 0:
        return NoValue("degenerate")
    x, y = lorenz_points(rates)
    area = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))
    return 1.0 - 2.0 * area


def pcu(logs, max_turns: int):
    """Normalised gap in mean turns-to-success between tail and head targets."""
    head = [lg.turns_used for lg in logs if lg.success and lg.target_tier == HEAD]
    tail = [lg.turns_used for lg in logs if lg.success and lg.target_tier == TAIL]
    if not head or not tail:
        return NoValue("undefined")
    return (sum(tail) / len(tail) - sum(head) / len(head)) / max_turns


def performance(logs, max_turns: int) -> tuple:
    """(SR, AT, HSR, TSR). AT charges every failed episode the full ``max_turns``."""
    if not logs:
        raise ValueError("performance() needs at least one episode")
    sr = sum(lg.success for lg in logs) / len(logs)
    at = sum(lg.turns_used if lg.success else max_turns for lg in logs) / len(logs)

    def tier_sr(tier):
        sel = [lg for lg in logs if lg.target_tier == tier]
        return sum(lg.success for lg in sel) / len(sel) if sel else NoValue("no data")

    return sr, at, tier_sr(HEAD), tier_sr(TAIL)


@dataclass
class MetricsReport:
    per: float | None
    psr: float | None
    pcu: float | None
    sr: float | None
    at: float | None
    hsr: float | None
    tsr: float | None
    episodes: int = 0
    counts: dict = field(default_factory=dict)  # episodes per target tier
    flags: dict = field(default_factory=dict)  # metric -> reason it is missing
    config: dict = field(default_factory=dict)  # t_pop, K, T echo

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def to_csv(self, label: str | None = None) -> str:
        return rows_to_csv([(label, self)] if label is not None else [(None, self)], with_label=label is not None)


def rows_to_csv(rows, with_label: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow((["variant"] if with_label else []) + list(METRIC_FIELDS))
    for label, rep in rows:
        vals = ["" if getattr(rep, f) is None else repr(float(getattr(rep, f))) for f in METRIC_FIELDS]
        writer.writerow(([label] if with_label else []) + vals)
    return buf.getvalue()


def compute_report(logs, max_turns: int, top_k: int, head_threshold: float) -> MetricsReport:
    values = {"per": per(logs), "psr": psr(logs), "pcu": pcu(logs, max_turns)}
    if logs:
        values.update(zip(("sr", "at", "hsr", "tsr"), performance(logs, max_turns)))
    else:
        values.update({k: NoValue("no data") for k in ("sr", "at", "hsr", "tsr")})
    flags = {k: str(v) for k, v in values.items() if not is_value(v)}
    clean = {k: (float(v) if is_value(v) else None) for k, v in values.items()}
    counts = {tier: sum(1 for lg in logs if lg.target_tier == tier) for tier in (HEAD, "mid", TAIL)}
    return MetricsReport(
        **clean,
        episodes=len(logs),
        counts=counts,
        flags=flags,
        config={"t_pop": head_threshold, "K": top_k, "T": max_turns},
    )

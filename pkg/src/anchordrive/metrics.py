"""Closed-loop scoring: route completion, multiplicative infraction
score, driving score, and multi-run aggregation.

Route completion is the furthest in-corridor projected progress along
the route as a percentage; frames spent outside the drivable corridor do
not advance it. The infraction score starts at 1.0 and multiplies in a
penalty factor per recorded event; driving score is their product. Red
lights and stop signs do not exist in these scenarios, so their
categories are carried as not-applicable rather than dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Polyline
from .simulator import RolloutLog

__all__ = ["INFRACTION_CATEGORIES", "NOT_APPLICABLE", "MetricsError",
           "PenaltyTable", "EpisodeResult", "route_completion",
           "infraction_score", "driving_score", "score_episode",
           "BenchmarkReport", "aggregate_report"]

# Table layout order: collisions, traffic violations, then terminal flags
INFRACTION_CATEGORIES = ("CP", "CV", "CL", "RL", "SS", "Off", "RD", "TO", "AB")
NOT_APPLICABLE = ("RL", "SS")

_DEFAULT_FACTORS = {
    "CP": 0.50, "CV": 0.60, "CL": 0.65, "RL": 0.70, "SS": 0.80,
    "Off": 1.0, "RD": 1.0, "TO": 1.0, "AB": 1.0,
}


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class PenaltyTable:
    factors: dict[str, float]

    def __post_init__(self):
        for cat, f in self.factors.items():
            if not 0.0 < f <= 1.0:
                raise MetricsError(f"penalty factor for {cat} must be in (0, 1], got {f}")

    @staticmethod
    def default() -> "PenaltyTable":
        return PenaltyTable(dict(_DEFAULT_FACTORS))

    def factor(self, category: str) -> float:
        if category not in self.factors:
            raise MetricsError(f"unknown infraction category {category!r}; "
                               f"known: {sorted(self.factors)}")
        return self.factors[category]


def route_completion(log: RolloutLog, route: np.ndarray | Polyline) -> float:
    """Percent of the route's arc length covered by in-corridor progress.

    Projection uses the log's corridor half width for the exclusion test;
    a completed episode scores exactly 100.
    """
    try:
        poly = route if isinstance(route, Polyline) else Polyline(np.asarray(route, dtype=np.float64))
    except ValueError as err:
        raise MetricsError(f"degenerate route: {err}") from None
    if poly.length <= 0.0:
        raise MetricsError("degenerate route with zero length")
    if log.termination == "completed":
        return 100.0
    best = 0.0
    for f in log.frames:
        s, dist = poly.project((f.state.x, f.state.y))
        if dist <= log.corridor_half_width:
            best = max(best, s)
    return float(min(max(100.0 * best / poly.length, 0.0), 100.0))


def infraction_score(events, penalties: PenaltyTable) -> float:
    """Product of per-event penalty factors; no events gives 1.0."""
    score = 1.0
    for e in events:
        score *= penalties.factor(e.category)
    return score


def driving_score(rc: float, is_factor: float) -> float:
    if not 0.0 <= rc <= 100.0:
        raise MetricsError(f"route completion {rc} outside [0, 100]")
    if not 0.0 <= is_factor <= 1.0:
        raise MetricsError(f"infraction score {is_factor} outside [0, 1]")
    return rc * is_factor


@dataclass(frozen=True)
class EpisodeResult:
    scenario_name: str
    scenario_kind: str
    scenario_seed: int
    rc: float
    is_factor: float
    ds: float
    counts: dict[str, int]
    route_length_m: float
    distance_driven_m: float
    termination: str

    def __post_init__(self):
        if abs(self.ds - self.rc * self.is_factor) > 1e-9:
            raise MetricsError(
                f"driving score {self.ds} is not rc * is = {self.rc * self.is_factor}"
            )
        if any(c < 0 for c in self.counts.values()):
            raise MetricsError("negative infraction count")


def score_episode(log: RolloutLog, penalties: PenaltyTable) -> EpisodeResult:
    """RC over the best corridor route, IS from the event list, DS = RC * IS."""
    rc = max(route_completion(log, pts) for pts in log.corridor)
    counts = {cat: 0 for cat in INFRACTION_CATEGORIES}
    for e in log.events:
        if e.category not in counts:
            raise MetricsError(f"unknown infraction category {e.category!r} in log")
        counts[e.category] += 1
    is_factor = infraction_score(log.events, penalties)
    return EpisodeResult(
        scenario_name=log.scenario_name, scenario_kind=log.scenario_kind,
        scenario_seed=log.scenario_seed, rc=rc, is_factor=is_factor,
        ds=driving_score(rc, is_factor), counts=counts,
        route_length_m=log.route_length, distance_driven_m=log.distance_driven(),
        termination=log.termination)


def _mean(vals) -> float:
    return float(np.mean(vals))


@dataclass
class BenchmarkReport:
    """Aggregated scores across runs, plus per-kilometer infraction rates."""

    per_kind: dict[str, dict[str, float]]
    overall: dict[str, float]
    per_run: list[dict[str, float]]
    infraction_counts: dict[str, int]
    infraction_rates_per_km: dict[str, float | None]
    total_km: float
    n_runs: int
    n_episodes: int
    penalties: dict[str, float]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_kind": self.per_kind, "overall": self.overall,
            "per_run": self.per_run,
            "infraction_counts": self.infraction_counts,
            "infraction_rates_per_km": self.infraction_rates_per_km,
            "total_km": self.total_km, "n_runs": self.n_runs,
            "n_episodes": self.n_episodes, "penalties": self.penalties,
            "config": self.config,
        }

    def to_text(self) -> str:
        lines = []
        lines.append(f"closed-loop benchmark: {self.n_runs} run(s), "
                     f"{self.n_episodes} episodes, {self.total_km:.3f} km driven")
        lines.append("")
        lines.append(f"{'scenario':<20s} {'DS':>8s} {'RC':>8s} {'IS':>8s}")
        for kind in sorted(self.per_kind):
            row = self.per_kind[kind]
            lines.append(f"{kind:<20s} {row['ds']:>8.2f} {row['rc']:>8.2f} {row['is']:>8.4f}")
        lines.append(f"{'mean':<20s} {self.overall['ds']:>8.2f} "
                     f"{self.overall['rc']:>8.2f} {self.overall['is']:>8.4f}")
        lines.append("")
        lines.append("per-run driving score: " +
                     ", ".join(f"{r['ds']:.2f}" for r in self.per_run))
        lines.append("")
        lines.append(f"{'infraction':<12s} {'count':>6s} {'per km':>10s} {'penalty':>8s}")
        for cat in INFRACTION_CATEGORIES:
            rate = self.infraction_rates_per_km[cat]
            rate_s = "n/a" if rate is None else f"{rate:.3f}"
            lines.append(f"{cat:<12s} {self.infraction_counts[cat]:>6d} {rate_s:>10s} "
                         f"{self.penalties.get(cat, 1.0):>8.2f}")
        return "\n".join(lines) + "\n"


def aggregate_report(runs: list[list[EpisodeResult]], penalties: PenaltyTable,
                     config: dict | None = None) -> BenchmarkReport:
    """Mean DS/RC/IS per scenario kind and overall, across independent runs.

    Every run must cover the same scenario set; per-kilometer infraction
    rates use the total distance actually driven.
    """
    if not runs or any(not run for run in runs):
        raise MetricsError("need at least one non-empty run")
    names0 = sorted(r.scenario_name for r in runs[0])
    for i, run in enumerate(runs[1:], start=2):
        names = sorted(r.scenario_name for r in run)
        if names != names0:
            raise MetricsError(
                f"run {i} scenario set mismatch: {len(names)} episodes vs {len(names0)}; "
                "runs must cover identical scenarios"
            )

    episodes = [r for run in runs for r in run]
    kinds = sorted({r.scenario_kind for r in episodes})
    per_kind = {}
    for kind in kinds:
        sel = [r for r in episodes if r.scenario_kind == kind]
        per_kind[kind] = {"ds": _mean([r.ds for r in sel]),
                          "rc": _mean([r.rc for r in sel]),
                          "is": _mean([r.is_factor for r in sel])}
    overall = {"ds": _mean([r.ds for r in episodes]),
               "rc": _mean([r.rc for r in episodes]),
               "is": _mean([r.is_factor for r in episodes])}
    per_run = [{"ds": _mean([r.ds for r in run]),
                "rc": _mean([r.rc for r in run]),
                "is": _mean([r.is_factor for r in run])} for run in runs]

    counts = {cat: 0 for cat in INFRACTION_CATEGORIES}
    for r in episodes:
        for cat, c in r.counts.items():
            counts[cat] += c
    total_km = sum(r.distance_driven_m for r in episodes) / 1000.0
    rates: dict[str, float | None] = {}
    for cat in INFRACTION_CATEGORIES:
        if cat in NOT_APPLICABLE:
            rates[cat] = None
        else:
            rates[cat] = counts[cat] / total_km if total_km > 0 else 0.0

    return BenchmarkReport(
        per_kind=per_kind, overall=overall, per_run=per_run,
        infraction_counts=counts, infraction_rates_per_km=rates,
        total_km=total_km, n_runs=len(runs), n_episodes=len(episodes),
        penalties=dict(penalties.factors), config=dict(config or {}))

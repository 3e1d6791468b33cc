"""Step-wise mediator-count scheduling for iterative samplers.

Early denoising steps move the latent a lot and deserve more mediators;
late steps barely move it. The schedule watches the per-step latent
displacement relative to the first step's and advances through capacity
levels as the displacement decays below configured fractions. Advancing
is latched by default: trajectories are treated as settling, so a noisy
uptick never drops capacity back down.

Also hosts the sweep machinery for exploring threshold grids and the
Pareto envelope over (cost, quality) points.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import FlopsReport
from .errors import (
    ConfigError,
    DegenerateTrajectoryError,
    DimensionError,
    DomainError,
    NumericError,
)
from .tensor import Tensor

METRICS = ("l1", "l2")


def latent_distance(a, b, metric="l1"):
    """Per-element displacement between two latents.

    "l1" is the mean absolute difference, "l2" the root mean square
    difference. Both are invariant to latent size, and schedule
    decisions compare ratios, so the overall scale cancels anyway.
    """
    ad = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if ad.shape != bd.shape:
        raise DimensionError(f"latent shapes differ: {ad.shape} vs {bd.shape}")
    diff = ad - bd
    if metric == "l1":
        return float(np.mean(np.abs(diff)))
    if metric == "l2":
        return float(np.sqrt(np.mean(diff * diff)))
    raise ConfigError(f"unknown distance metric {metric!r}")


@dataclass(frozen=True)
class ScheduleLevel:
    """One advancement rule: once the displacement falls to ``threshold``
    times the first step's, use ``count`` mediators."""

    threshold: float
    count: int


@dataclass(frozen=True)
class MediatorSchedule:
    """Ordered capacity levels for a sampling run.

    ``start_count`` applies until the first threshold is crossed.
    Thresholds are fractions in [0, 1], strictly decreasing; a grid that
    wants two coincident thresholds should merge them into one level
    that jumps straight to the larger count. Counts must never shrink.
    ``latching`` keeps the level monotone over the run; turning it off
    re-evaluates every step from scratch, so capacity can drop again.
    """

    start_count: int
    levels: tuple = ()
    metric: str = "l1"
    latching: bool = True

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if self.start_count < 1:
            raise ConfigError(f"start count must be positive, got {self.start_count}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        prev_rho, prev_count = None, self.start_count
        for level in self.levels:
            if not isinstance(level, ScheduleLevel):
                raise ConfigError("levels must be ScheduleLevel instances")
            if not (0.0 <= level.threshold <= 1.0):
                raise ConfigError(f"threshold {level.threshold} outside [0, 1]")
            if prev_rho is not None and level.threshold >= prev_rho:
                raise ConfigError(
                    f"thresholds must be strictly decreasing, got {prev_rho} then {level.threshold}"
                )
            if level.count < prev_count:
                raise ConfigError(
                    f"counts must never shrink, got {prev_count} then {level.count}"
                )
            prev_rho, prev_count = level.threshold, level.count

    @property
    def level_count(self):
        return len(self.levels) + 1

    def count_at(self, level):
        if not (0 <= level <= len(self.levels)):
            raise DomainError(f"level {level} outside schedule with {self.level_count} levels")
        return self.start_count if level == 0 else self.levels[level - 1].count

    def to_json_dict(self):
        payload = {
            "n1": self.start_count,
            "levels": [{"rho": lv.threshold, "n": lv.count} for lv in self.levels],
            "metric": self.metric,
        }
        if not self.latching:
            payload["latching"] = False
        return payload

    @classmethod
    def from_json_dict(cls, payload):
        try:
            start = int(payload["n1"])
            levels = tuple(
                ScheduleLevel(float(lv["rho"]), int(lv["n"])) for lv in payload.get("levels", [])
            )
            metric = str(payload.get("metric", "l1"))
            latching = bool(payload.get("latching", True))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed schedule: {exc}") from exc
        return cls(start_count=start, levels=levels, metric=metric, latching=latching)


def select_mediator_count(delta_t, delta0, level, schedule):
    """Pick the mediator count for the next step.

    ``delta_t`` is the latest step displacement, ``delta0`` the first
    step's, ``level`` the current schedule level. Crossing threshold i
    (delta_t <= rho_i * delta0, boundary inclusive) makes level i+1
    eligible; thresholds decrease, so the eligible set is a prefix and
    the deepest crossed level wins, possibly advancing several levels in
    one step. Returns (count, new_level).
    """
    if delta0 <= 0.0:
        raise DegenerateTrajectoryError(
            "first-step displacement is zero; relative thresholds are undefined"
        )
    if delta_t < 0.0 or not math.isfinite(delta_t) or not math.isfinite(delta0):
        raise DomainError(f"displacements must be finite and non-negative: {delta_t}, {delta0}")
    if not (0 <= level < schedule.level_count):
        raise DomainError(f"level {level} outside schedule with {schedule.level_count} levels")
    candidate = 0
    for idx, rule in enumerate(schedule.levels):
        if delta_t <= rule.threshold * delta0:
            candidate = idx + 1
    new_level = max(level, candidate) if schedule.latching else candidate
    return schedule.count_at(new_level), new_level


@dataclass
class LatentTrace:
    """Per-step record of one sampling run: displacements, the mediator
    count each step ran with, and that step's MAC bill."""

    deltas: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    step_macs: list = field(default_factory=list)
    metric: str = "l1"
    delta0: float = 0.0

    def to_csv(self):
        lines = ["step,delta,n_t,step_macs"]
        rows = zip(self.deltas, self.selected, self.step_macs)
        for step, (delta, count, macs) in enumerate(rows):
            lines.append(f"{step},{repr(float(delta))},{count},{macs}")
        return "\n".join(lines) + "\n"


def run_scheduled_sampling(bundle, x_init, steps, schedule=None, on_step=None):
    """Deterministic Euler sampling from t=1 noise down to t=0.

    ``bundle`` supplies ``velocity(x, t, count)`` and
    ``step_flops(count)``; with no schedule it must also expose
    ``default_count``. The displacement of each completed step selects
    the mediator count for the next one. A first step that does not move
    the latent at all leaves the schedule at its starting level for the
    whole run, since relative thresholds are meaningless there.

    Returns (final latent, LatentTrace, summed FlopsReport).
    """
    steps = int(steps)
    if steps < 1:
        raise DomainError(f"sampling needs at least one step, got {steps}")
    x = np.array(x_init, dtype=np.float64)
    if schedule is not None:
        count, metric = schedule.start_count, schedule.metric
    else:
        count, metric = int(bundle.default_count), "l1"
    level = 0
    trace = LatentTrace(metric=metric)
    total = FlopsReport()
    for k in range(steps):
        t = 1.0 - k / steps
        velocity = np.asarray(bundle.velocity(x, t, count), dtype=np.float64)
        if velocity.shape != x.shape:
            raise DimensionError(
                f"velocity shape {velocity.shape} does not match latent {x.shape}"
            )
        x_next = x - velocity / steps
        if not np.all(np.isfinite(x_next)):
            raise NumericError(f"sampling diverged at step {k}")
        delta = latent_distance(x, x_next, metric)
        step_report = bundle.step_flops(count)
        trace.deltas.append(delta)
        trace.selected.append(count)
        trace.step_macs.append(step_report.total_macs)
        total = total + step_report
        if k == 0:
            trace.delta0 = delta
        if schedule is not None and trace.delta0 > 0.0:
            count, level = select_mediator_count(delta, trace.delta0, level, schedule)
        x = x_next
        if on_step is not None:
            on_step(k, x)
    return x, trace, total


# ---------------------------------------------------------------------------
# threshold sweeps and the cost/quality envelope


@dataclass(frozen=True)
class SweepPoint:
    """One grid entry: the thresholds that built ``schedule``.

    ``rho1`` is None for two-level schedules.
    """

    index: int
    rho0: float
    rho1: object
    metric: str
    schedule: MediatorSchedule


def default_rho_values():
    return tuple(round(1.0 - 0.1 * i, 1) for i in range(11))


def threshold_grid(rho_values=None, counts=(4, 16, 64), metrics=("l1",), two_level=True):
    """Enumerate sweep points in a stable order.

    For each metric: every (rho0, rho1) pair with rho1 <= rho0 builds a
    three-level schedule over ``counts``; then, when ``two_level`` is
    set, each rho0 alone builds a two-level schedule over the first two
    counts. Requires three counts for the pair block. A pair with
    rho1 == rho0 means the middle level is unreachable, so it collapses
    to a single level that jumps straight to the largest count.
    """
    values = tuple(rho_values) if rho_values is not None else default_rho_values()
    counts = tuple(int(c) for c in counts)
    if len(counts) < 2:
        raise ConfigError("threshold_grid needs at least two mediator counts")
    points = []
    for metric in metrics:
        if len(counts) >= 3:
            for rho0 in values:
                for rho1 in values:
                    if rho1 > rho0:
                        continue
                    if rho1 == rho0:
                        levels = (ScheduleLevel(rho0, counts[2]),)
                    else:
                        levels = (
                            ScheduleLevel(rho0, counts[1]),
                            ScheduleLevel(rho1, counts[2]),
                        )
                    schedule = MediatorSchedule(
                        start_count=counts[0], levels=levels, metric=metric
                    )
                    points.append(SweepPoint(len(points), rho0, rho1, metric, schedule))
        if two_level:
            for rho0 in values:
                schedule = MediatorSchedule(
                    start_count=counts[0],
                    levels=(ScheduleLevel(rho0, counts[1]),),
                    metric=metric,
                )
                points.append(SweepPoint(len(points), rho0, None, metric, schedule))
    return points


def sweep_thresholds(points, evaluate, workers=1):
    """Evaluate every sweep point, optionally in a thread pool.

    ``evaluate(point)`` returns (cost, quality). Successful results come
    back as (point, cost, quality) in input order regardless of worker
    count. A point that raises is recorded as (point, exception) in the
    failure list and omitted from the results; the sweep keeps going.
    """
    outcomes = [None] * len(points)
    failures = []
    if workers <= 1:
        for k, point in enumerate(points):
            try:
                outcomes[k] = evaluate(point)
            except Exception as exc:  # noqa: BLE001 - sweep points fail independently
                failures.append((point, exc))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(evaluate, point) for point in points]
            for k, future in enumerate(futures):
                try:
                    outcomes[k] = future.result()
                except Exception as exc:  # noqa: BLE001
                    failures.append((points[k], exc))
    results = [
        (point, float(outcome[0]), float(outcome[1]))
        for point, outcome in zip(points, outcomes)
        if outcome is not None
    ]
    return results, failures


def pareto_envelope(points):
    """Ids of the non-dominated points, sorted by cost; lower is better
    on both axes.

    Accepts (cost, quality) pairs, identified by position, or
    (cost, quality, id) triples with mutually comparable ids. A point is
    dominated when another is at least as good on both axes and strictly
    better on one. Exact duplicates keep one representative, the one
    with the smallest id.
    """
    cleaned = []
    for idx, entry in enumerate(points):
        if len(entry) == 3:
            cost, quality, tag = entry
        else:
            (cost, quality), tag = entry, idx
        if not (math.isfinite(cost) and math.isfinite(quality)):
            raise NumericError(f"envelope point {tag} is not finite: ({cost}, {quality})")
        cleaned.append((float(cost), float(quality), tag))
    kept = []
    best_quality = math.inf
    last_pair = None
    for cost, quality, tag in sorted(cleaned):
        if (cost, quality) == last_pair:
            continue
        if quality < best_quality:
            kept.append(tag)
            best_quality = quality
            last_pair = (cost, quality)
    return kept

"""Idle-time analytics for three parallelization strategies.

Closed-form idle-to-busy ratios (ITR) for model parallelism, pipeline
parallelism, and the grouped-submodule strategy, plus a discrete timeline
simulator that lays out per-GPU forward/backward/idle cells and measures
the same ratio by counting.  Communication time is excluded throughout.

The three schedules:

  MP     one GPU per layer; layers run strictly sequentially forward,
         then in reverse order backward.
  PP     one stage per GPU, S microbatches, all forwards first with the
         classic fill bubble, then all backwards with the drain bubble.
  HSVIT  K submodules run forward in parallel, GPU 0 alone runs the
         aggregation forward and backward while the other K-1 devices
         wait, then all submodules run backward in parallel.

Note on the grouped strategy: itr_hsvit counts the aggregation span once
in its numerator, independent of K.  The simulated schedule necessarily
accumulates that span on each of the K-1 waiting devices, so its
idle-to-busy ratio has a (K-1) factor instead (see
itr_hsvit_simulated).  The two coincide for K <= 2 or when aggregation
costs nothing; measured_itr always reports what the timeline contains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, ShapeError, UsageError

MP = "mp"
PP = "pp"
HSVIT = "hsvit"
STRATEGIES = (MP, PP, HSVIT)

FORWARD = "forward"
BACKWARD = "backward"
IDLE = "idle"


@dataclass(frozen=True)
class Cell:
    kind: str
    tag: str
    start: float
    duration: float


@dataclass
class CostModel:
    """Per-operation times and cluster geometry for the closed forms."""

    t_f: float = 0.0
    t_b: float = 0.0
    k: int = 1
    s: int = 1
    t_f_sub: float = 0.0
    t_b_sub: float = 0.0
    t_f_agg: float = 0.0
    t_b_agg: float = 0.0

    def __post_init__(self):
        if self.k < 1 or self.s < 1:
            raise ConfigError(f"K and S must be >= 1, got K={self.k}, S={self.s}")
        for name in ("t_f", "t_b", "t_f_sub", "t_b_sub", "t_f_agg", "t_b_agg"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")
            setattr(self, name, value)


@dataclass
class Timeline:
    """Per-GPU cell rows tiling [0, makespan] with no gaps or overlaps."""

    rows: list  # list over GPUs of list[Cell]
    makespan: float

    @property
    def num_gpus(self) -> int:
        return len(self.rows)

    @property
    def busy_time(self) -> float:
        return math.fsum(
            c.duration for row in self.rows for c in row if c.kind != IDLE
        )

    @property
    def idle_time(self) -> float:
        return math.fsum(c.duration for row in self.rows for c in row if c.kind == IDLE)

    def validate(self, tol: float = 1e-9) -> None:
        if not self.rows:
            raise UsageError("timeline has no GPU rows")
        for gpu, row in enumerate(self.rows):
            cursor = 0.0
            for cell in row:
                if cell.duration <= 0:
                    raise UsageError(f"GPU {gpu} holds a non-positive cell {cell}")
                if abs(cell.start - cursor) > tol:
                    raise UsageError(
                        f"GPU {gpu} cell '{cell.tag}' starts at {cell.start}, "
                        f"expected {cursor}"
                    )
                cursor = cell.start + cell.duration
            if abs(cursor - self.makespan) > tol:
                raise UsageError(
                    f"GPU {gpu} row ends at {cursor}, makespan is {self.makespan}"
                )
        total = self.busy_time + self.idle_time
        if abs(total - self.num_gpus * self.makespan) > tol * max(1.0, self.makespan):
            raise UsageError("busy + idle does not equal GPUs x makespan")


# ---------------------------------------------------------------------------
# closed forms


def itr_mp(cost: CostModel) -> float:
    """Idle/busy ratio of strictly sequential layer-per-GPU execution."""
    return float(cost.k - 1)


def itr_pp(cost: CostModel) -> float:
    """Idle/busy ratio of the fill/drain pipeline over S microbatches."""
    return (cost.k - 1) / cost.s


def itr_hsvit(cost: CostModel) -> float:
    """Aggregation overhead ratio: (T_f_agg + T_b_agg) over total work.

    The numerator counts the aggregation span once, so the ratio shrinks
    as K grows and submodule work dominates.
    """
    agg = cost.t_f_agg + cost.t_b_agg
    denom = cost.k * (cost.t_f_sub + cost.t_b_sub) + agg
    if denom <= 0:
        raise ConfigError("all-zero cost model: the ratio is undefined")
    return agg / denom


def itr_hsvit_simulated(cost: CostModel) -> float:
    """Closed form of the simulated grouped schedule's idle/busy ratio.

    Each of the K-1 non-aggregating devices idles for the whole
    aggregation span, so the numerator carries a (K-1) factor that
    itr_hsvit does not; the two agree for K <= 2 or zero aggregation
    cost.
    """
    agg = cost.t_f_agg + cost.t_b_agg
    denom = cost.k * (cost.t_f_sub + cost.t_b_sub) + agg
    if denom <= 0:
        raise ConfigError("all-zero cost model: the ratio is undefined")
    return (cost.k - 1) * agg / denom


# ---------------------------------------------------------------------------
# timeline construction


def _expand(value: float, count: int, override, label: str) -> list:
    if override is None:
        return [value] * count
    times = [float(v) for v in override]
    if len(times) != count:
        raise ShapeError(f"{label} needs {count} entries, got {len(times)}")
    for v in times:
        if not math.isfinite(v) or v < 0:
            raise ConfigError(f"{label} entries must be finite and >= 0, got {v}")
    return times


def _fill_row(busy_cells: list, makespan: float) -> list:
    """Order busy cells and fill every gap with an explicit idle cell."""
    row = []
    cursor = 0.0
    for cell in sorted(busy_cells, key=lambda c: c.start):
        if cell.duration <= 0:
            continue
        gap = cell.start - cursor
        if gap < -1e-12:
            raise UsageError(f"overlapping cells near t={cell.start}")
        if gap > 0:
            row.append(Cell(IDLE, "", cursor, gap))
        row.append(Cell(cell.kind, cell.tag, cell.start, cell.duration))
        cursor = cell.start + cell.duration
    tail = makespan - cursor
    if tail > 0:
        row.append(Cell(IDLE, "", cursor, tail))
    return row


def _simulate_mp(cost: CostModel, forward_times, backward_times) -> Timeline:
    k = cost.k
    tf = _expand(cost.t_f, k, forward_times, "forward_times")
    tb = _expand(cost.t_b, k, backward_times, "backward_times")
    forward_total = math.fsum(tf)
    makespan = forward_total + math.fsum(tb)
    rows = []
    for i in range(k):
        cells = [
            Cell(FORWARD, f"f{i}", math.fsum(tf[:i]), tf[i]),
            Cell(BACKWARD, f"b{i}", forward_total + math.fsum(tb[i + 1 :]), tb[i]),
        ]
        rows.append(_fill_row(cells, makespan))
    return Timeline(rows, makespan)


def _simulate_pp(cost: CostModel, forward_times, backward_times) -> Timeline:
    k, s = cost.k, cost.s
    tf = _expand(cost.t_f, k, forward_times, "forward_times")
    tb = _expand(cost.t_b, k, backward_times, "backward_times")
    uniform = forward_times is None and backward_times is None

    if uniform:
        # closed positions keep the grid exact
        t_f, t_b = cost.t_f, cost.t_b
        drain_start = (s + k - 1) * t_f
        start_f = [[(stage + micro) * t_f for micro in range(s)] for stage in range(k)]
        start_b = [
            [drain_start + (k - 1 - stage + micro) * t_b for micro in range(s)]
            for stage in range(k)
        ]
        makespan = drain_start + (k - 1 + s) * t_b
    else:
        finish_f = [[0.0] * s for _ in range(k)]
        start_f = [[0.0] * s for _ in range(k)]
        for stage in range(k):
            for micro in range(s):
                ready = finish_f[stage - 1][micro] if stage else 0.0
                free = finish_f[stage][micro - 1] if micro else 0.0
                start_f[stage][micro] = max(ready, free)
                finish_f[stage][micro] = start_f[stage][micro] + tf[stage]
        finish_b = [[0.0] * s for _ in range(k)]
        start_b = [[0.0] * s for _ in range(k)]
        for stage in range(k - 1, -1, -1):
            for micro in range(s):
                ready = finish_b[stage + 1][micro] if stage + 1 < k else 0.0
                free = finish_b[stage][micro - 1] if micro else finish_f[stage][s - 1]
                start_b[stage][micro] = max(ready, free, finish_f[stage][s - 1])
                finish_b[stage][micro] = start_b[stage][micro] + tb[stage]
        makespan = max(finish_b[stage][s - 1] for stage in range(k))

    rows = []
    for stage in range(k):
        cells = [
            Cell(FORWARD, f"f{stage}.{micro}", start_f[stage][micro], tf[stage])
            for micro in range(s)
        ] + [
            Cell(BACKWARD, f"b{stage}.{micro}", start_b[stage][micro], tb[stage])
            for micro in range(s)
        ]
        rows.append(_fill_row(cells, makespan))
    return Timeline(rows, makespan)


def _simulate_hsvit(cost: CostModel, forward_times, backward_times) -> Timeline:
    k = cost.k
    tf = _expand(cost.t_f_sub, k, forward_times, "forward_times")
    tb = _expand(cost.t_b_sub, k, backward_times, "backward_times")
    agg_start = max(tf)
    backward_start = agg_start + cost.t_f_agg + cost.t_b_agg
    makespan = backward_start + max(tb)
    rows = []
    for i in range(k):
        cells = [
            Cell(FORWARD, f"f_sub{i}", 0.0, tf[i]),
            Cell(BACKWARD, f"b_sub{i}", backward_start, tb[i]),
        ]
        if i == 0:
            cells.append(Cell(FORWARD, "f_agg", agg_start, cost.t_f_agg))
            cells.append(Cell(BACKWARD, "b_agg", agg_start + cost.t_f_agg, cost.t_b_agg))
        rows.append(_fill_row(cells, makespan))
    return Timeline(rows, makespan)


def simulate_timeline(strategy: str, cost: CostModel, forward_times=None,
                      backward_times=None) -> Timeline:
    """Build the occupancy timeline for one strategy.

    forward_times/backward_times optionally replace the uniform per-unit
    times with per-layer (MP), per-stage (PP), or per-submodule (HSVIT)
    values; this non-uniform mode is for exploration and the closed
    forms above do not apply to it.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy '{strategy}', expected one of {STRATEGIES}")
    if strategy == MP:
        return _simulate_mp(cost, forward_times, backward_times)
    if strategy == PP:
        return _simulate_pp(cost, forward_times, backward_times)
    return _simulate_hsvit(cost, forward_times, backward_times)


def measured_itr(timeline: Timeline) -> float:
    """Idle time divided by busy time, summed over all GPUs."""
    busy = timeline.busy_time
    if busy <= 0:
        raise UsageError("timeline has zero busy time; the ratio is undefined")
    return timeline.idle_time / busy


def closed_form_itr(strategy: str, cost: CostModel) -> float:
    if strategy == MP:
        return itr_mp(cost)
    if strategy == PP:
        return itr_pp(cost)
    if strategy == HSVIT:
        return itr_hsvit(cost)
    raise ConfigError(f"unknown strategy '{strategy}', expected one of {STRATEGIES}")


# ---------------------------------------------------------------------------
# export


def timeline_to_csv(timeline: Timeline) -> str:
    lines = ["gpu,start,duration,kind,tag"]
    for gpu, row in enumerate(timeline.rows):
        for cell in row:
            lines.append(f"{gpu},{cell.start:.12g},{cell.duration:.12g},{cell.kind},{cell.tag}")
    return "\n".join(lines) + "\n"


def render_timeline(timeline: Timeline, width: int = 72) -> str:
    """Compact fixed-width text grid, one row per GPU."""
    if timeline.makespan <= 0:
        return "\n".join(f"GPU {g} |" for g in range(timeline.num_gpus))
    lines = []
    for gpu, row in enumerate(timeline.rows):
        parts = []
        for cell in row:
            span = max(1, round(width * cell.duration / timeline.makespan))
            if cell.kind == IDLE:
                parts.append("." * span)
            else:
                label = cell.tag[: span - 2] if span > 3 else ""
                body = f"[{label:^{span - 2}}]" if span > 2 else "#" * span
                parts.append(body)
        lines.append(f"GPU {gpu} |{''.join(parts)}|")
    return "\n".join(lines)

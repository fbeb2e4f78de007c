"""Search for the stage split, replication and placement minimising batch latency.

The planner grows a plan from the bottom of the model upward.  A *prefix*
fixes the stages for layers ``[0, j)``; the remaining layers always form one
final stage.  Prefixes are memoised per ``(j, free GPUs per server)`` and only
the best few (by the latency of their cheapest completion) are extended.

Estimated latency only depends on how many GPUs each stage holds on each
server, so internally a stage placement is a per-server count vector; GPU ids
are materialised lowest-first when the plan is returned.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .costmodel import allreduce_time_counts, splitconcat_time_counts
import numpy as np

from .estimator import (LatencyBreakdown, _estimate, build_stage_sequence, compute_acr,
                        estimate_many)
from .model import (ClusterSpec, ModelProfile, PipelinePlan, Stage, StageCost,
                    StageCostSequence, ValidationError)
from .simulator import optimize_phi

FRESH_FIRST = "fresh-first"
APPEND_FIRST = "append-first"
SCATTER_FIRST = "scatter-first"
POLICIES = (FRESH_FIRST, APPEND_FIRST, SCATTER_FIRST)

REL_TOL = 1e-9


class InfeasiblePlanError(RuntimeError):
    """No plan satisfies the memory constraints."""


@dataclass(frozen=True)
class DeviceState:
    """Which GPUs are still free, plus the order in which sets were handed out."""

    seps: tuple[int, ...]
    allocated: frozenset[int] = frozenset()
    history: tuple[frozenset[int], ...] = ()

    @classmethod
    def fresh(cls, cluster: ClusterSpec) -> "DeviceState":
        return cls(cluster.seps)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(itertools.accumulate((0,) + self.seps[:-1]))

    @property
    def free_counts(self) -> tuple[int, ...]:
        return tuple(len(self.free_ids(k)) for k in range(len(self.seps)))

    @property
    def num_free(self) -> int:
        return sum(self.seps) - len(self.allocated)

    def used(self, k: int) -> int:
        return self.seps[k] - len(self.free_ids(k))

    def free_ids(self, k: int) -> list[int]:
        lo = self.offsets[k]
        return [g for g in range(lo, lo + self.seps[k]) if g not in self.allocated]

    def allocate(self, devices: Iterable[int]) -> "DeviceState":
        devices = frozenset(devices)
        if devices & self.allocated:
            raise ValidationError("devices already allocated")
        return DeviceState(self.seps, self.allocated | devices, self.history + (devices,))


def _take(state: DeviceState, counts: list[int]) -> frozenset[int]:
    out: list[int] = []
    for k, c in enumerate(counts):
        out.extend(state.free_ids(k)[:c])
    return frozenset(out)


def _fill(free: tuple[int, ...], order: list[int], m: int) -> tuple[int, ...]:
    counts = [0] * len(free)
    for k in order:
        c = min(free[k], m)
        counts[k] += c
        m -= c
        if m == 0:
            break
    return tuple(counts)


def _scatter(seps: tuple[int, ...], free: tuple[int, ...], m: int) -> tuple[int, ...]:
    servers = range(len(free))
    touched = [k for k in servers if free[k] < seps[k]]
    used = [k for k in touched if free[k]]
    if not touched or sum(free[k] for k in used) < m:
        eligible = [k for k in servers if free[k]]
    else:
        eligible = used
    counts = [0] * len(free)
    while m:
        for k in eligible:
            if m and counts[k] < free[k]:
                counts[k] += 1
                m -= 1
    return tuple(counts)


def _best_fit(free: tuple[int, ...], group: list[int], m: int,
              roomiest: bool = False) -> list[int]:
    """Server order for filling ``m`` GPUs from ``group``.

    A single server that can take the whole request wins: the smallest such,
    or with ``roomiest`` the largest, which leaves space for the next stage to
    append next to it.  Otherwise the roomiest servers come first so the stage
    spans few machines.
    """
    fits = [k for k in group if free[k] >= m]
    if fits:
        pick = max if roomiest else min
        k = pick(fits, key=lambda k: (free[k], -k if roomiest else k))
        return [k] + [g for g in group if g != k]
    return sorted(group, key=lambda k: (-free[k], k))


@lru_cache(maxsize=65536)
def _policy_counts(seps: tuple[int, ...], free: tuple[int, ...], m: int):
    fresh = [k for k in range(len(free)) if free[k] and free[k] == seps[k]]
    partial = [k for k in range(len(free)) if free[k] and free[k] < seps[k]]
    found: list[tuple[str, tuple[int, ...]]] = []

    def order(first, then, roomiest):
        head = _best_fit(free, first, m, roomiest)
        need = m - sum(free[k] for k in first)
        return head + (_best_fit(free, then, need, roomiest) if need > 0 else then)

    for name, counts in (
        (FRESH_FIRST, _fill(free, order(fresh, partial, True), m)),
        (APPEND_FIRST, _fill(free, order(partial, fresh, False), m)),
        (SCATTER_FIRST, _scatter(seps, free, m)),
    ):
        if all(c != counts for _, c in found):
            found.append((name, counts))
    return tuple(found)


def placement_counts(state: DeviceState, m_prime: int) -> list[tuple[str, tuple[int, ...]]]:
    """Per-server GPU counts chosen by each policy, duplicates removed."""
    if not 1 <= m_prime <= state.num_free:
        raise ValidationError(
            f"cannot place {m_prime} GPUs with {state.num_free} free"
        )
    return list(_policy_counts(state.seps, state.free_counts, m_prime))


def enumerate_placements(state: DeviceState, m_prime: int) -> list[frozenset[int]]:
    """Candidate device sets for the next stage under fresh/append/scatter-first."""
    return [_take(state, list(c)) for _, c in placement_counts(state, m_prime)]


def memory_feasible(stage: StageCost, phi_x: int, capacity: float,
                    optimizer_multiplier: float = 8.0) -> bool:
    if capacity <= 0:
        raise ValidationError("capacity must be > 0")
    need = stage.param_bytes * optimizer_multiplier + phi_x * stage.activation_working_bytes
    return need <= capacity


def memory_caps(seq: StageCostSequence, capacity: float, M: int,
                optimizer_multiplier: float = 8.0) -> list[int]:
    """Largest injection count each stage's memory allows (at least 1, at most M)."""
    caps = []
    for s in seq:
        if not s.is_compute or s.activation_working_bytes <= 0 or math.isinf(capacity):
            caps.append(M)
            continue
        spare = capacity - s.param_bytes * optimizer_multiplier
        caps.append(max(1, min(M, int(spare // s.activation_working_bytes))))
    return caps


# --- evaluation ------------------------------------------------------------

# a stage in count form: (layer_lo, layer_hi, per-server counts)
CountStage = tuple[int, int, tuple[int, ...]]


class _Evaluator:
    """Cached estimator over count-form plans."""

    def __init__(self, profile: ModelProfile, cluster: ClusterSpec, M: int,
                 optimizer_multiplier: float):
        self.profile = profile
        self.cluster = cluster
        self.M = M
        self.mult = optimizer_multiplier
        layers = profile.layers
        self._f = list(itertools.accumulate((l.fwd_time for l in layers), initial=0.0))
        self._b = list(itertools.accumulate((l.bwd_time for l in layers), initial=0.0))
        self._p = list(itertools.accumulate((l.param_bytes for l in layers), initial=0))
        self._a = list(itertools.accumulate((l.activation_bytes for l in layers), initial=0))
        self._stage_cache: dict = {}
        self._comm_cache: dict = {}
        self.evaluations = 0

    def stage(self, lo: int, hi: int, counts: tuple[int, ...]):
        key = (lo, hi, counts)
        hit = self._stage_cache.get(key)
        if hit is None:
            r = sum(counts)
            params = self._p[hi] - self._p[lo]
            working = (self._a[hi] - self._a[lo]) / r
            feasible = params * self.mult + working <= self.cluster.per_gpu_memory
            ar = allreduce_time_counts(params, counts, self.cluster)
            hit = ((self._f[hi] - self._f[lo]) / r, (self._b[hi] - self._b[lo]) / r, ar, feasible)
            self._stage_cache[key] = hit
        return hit

    def comm(self, size: int, src: tuple[int, ...], dst: tuple[int, ...]) -> float:
        key = (size, src, dst)
        hit = self._comm_cache.get(key)
        if hit is None:
            hit = splitconcat_time_counts(size, src, dst, self.cluster)
            self._comm_cache[key] = hit
        return hit

    def feasible(self, st: CountStage) -> bool:
        return self.stage(*st)[3]

    def arrays(self, stages: tuple[CountStage, ...], base=None):
        """Expanded (fwd, bwd, allreduce) lists; ``base`` holds those of a prefix."""
        if base is None:
            fwd, bwd, ar = [], [], []
            prev = None
        else:
            fwd, bwd, ar, prev = list(base[0]), list(base[1]), list(base[2]), base[3]
        for lo, hi, counts in stages:
            f, b, a, _ = self.stage(lo, hi, counts)
            if prev is not None:
                c = self.comm(self.profile.layers[lo - 1].activation_bytes, prev, counts)
                fwd.append(c)
                bwd.append(c)
                ar.append(0.0)
            fwd.append(f)
            bwd.append(b)
            ar.append(a)
            prev = counts
        return fwd, bwd, ar, prev

    def estimate(self, stages: tuple[CountStage, ...], base=None) -> LatencyBreakdown:
        self.evaluations += 1
        fwd, bwd, ar, _ = self.arrays(stages, base)
        return _estimate(fwd, bwd, ar, self.M)


def _better(a: tuple, b: Optional[tuple]) -> bool:
    """Ranking of (latency, stage count, split points); latencies within REL_TOL tie."""
    if b is None:
        return True
    la, lb = a[0], b[0]
    if la < lb - REL_TOL * max(abs(lb), 1e-300):
        return True
    if lb < la - REL_TOL * max(abs(la), 1e-300):
        return False
    return a[1:] < b[1:]


def _rank_key(lat: float, stages: tuple[CountStage, ...]) -> tuple:
    return (lat, len(stages), tuple(s[1] for s in stages[:-1]))


def _materialize(cluster: ClusterSpec, stages: tuple[CountStage, ...]) -> tuple[Stage, ...]:
    state = DeviceState.fresh(cluster)
    out = []
    for lo, hi, counts in stages:
        devs = _take(state, list(counts))
        state = state.allocate(devs)
        out.append(Stage(lo, hi, devs))
    return tuple(out)


def _counts_of(cluster: ClusterSpec, stages: Iterable[Stage]) -> tuple[CountStage, ...]:
    return tuple((s.layer_lo, s.layer_hi, cluster.server_counts(s.devices)) for s in stages)


# --- the dynamic program -----------------------------------------------------

@dataclass
class PlannerOptions:
    phi_policy: str = "search"
    optimizer_multiplier: float = 8.0
    # prefixes kept per memo state; None keeps all (exhaustive over the policy space)
    beam: Optional[int] = 4
    top_k: int = 8
    max_stages: Optional[int] = None
    allow_idle: bool = True


@dataclass
class PlanCandidate:
    stages: tuple[CountStage, ...]
    latency: float


@dataclass
class Planner:
    profile: ModelProfile
    cluster: ClusterSpec
    M: int
    options: PlannerOptions = field(default_factory=PlannerOptions)

    def __post_init__(self):
        if self.M < 1:
            raise ValidationError("M must be >= 1")
        self.evaluator = _Evaluator(self.profile, self.cluster, self.M,
                                    self.options.optimizer_multiplier)
        self.states_expanded = 0
        self.candidates: list[PlanCandidate] = []

    def _score_batch(self, base, tails: list[tuple[CountStage, ...]]) -> list[float]:
        """Estimated latency of ``prefix + tail`` for each tail (same length)."""
        ev = self.evaluator
        ev.evaluations += len(tails)
        rows = [ev.arrays(tail, base) for tail in tails]
        fwd = np.array([r[0] for r in rows])
        bwd = np.array([r[1] for r in rows])
        ar = np.array([r[2] for r in rows])
        totals, _ = estimate_many(fwd, bwd, ar, self.M)
        return totals.tolist()

    def _complete(self, prefix, base, j, free, record):
        N = self.profile.num_layers
        seps = self.cluster.seps
        n_free = sum(free)
        choices = range(1, n_free + 1) if self.options.allow_idle else (n_free,)
        tails = []
        for m_last in choices:
            for _, counts in _policy_counts(seps, free, m_last):
                last = (j, N, counts)
                if self.evaluator.feasible(last):
                    tails.append((last,))
        if tails:
            for tail, total in zip(tails, self._score_batch(base, tails)):
                record(prefix + tail, total)

    def search(self) -> list[PlanCandidate]:
        N = self.profile.num_layers
        seps = self.cluster.seps
        opts = self.options
        ev = self.evaluator
        max_stages = opts.max_stages or N
        keep = max(opts.top_k, 1)
        top: list[tuple[tuple, tuple[CountStage, ...]]] = []

        def record(stages, total):
            top.append((_rank_key(total, stages), stages))

        # memo: (j, canonical free signature) -> [(score key, prefix, free counts)]
        memo: dict[tuple, list] = {(0, _signature(seps, seps)): [(None, (), seps)]}
        for j in range(N):
            for key in sorted(k for k in memo if k[0] == j):
                for _, prefix, free in self._trim(memo.pop(key)):
                    self.states_expanded += 1
                    base = ev.arrays(prefix) if prefix else None
                    self._complete(prefix, base, j, free, record)
                    n_free = sum(free)
                    if len(prefix) + 2 > max_stages or n_free < 2:
                        continue
                    grown, tails = [], []
                    for j2 in range(j + 1, N):
                        for m in range(1, n_free):
                            for _, counts in _policy_counts(seps, free, m):
                                st = (j, j2, counts)
                                if not ev.feasible(st):
                                    continue
                                new_free = tuple(f - c for f, c in zip(free, counts))
                                grown.append((prefix + (st,), new_free))
                                tails.append((st, (j2, N, new_free)))
                    if not tails:
                        continue
                    # T_PL: the unplanned layers replicated on every remaining GPU
                    for (new_prefix, new_free), tail, total in zip(
                            grown, tails, self._score_batch(base, tails)):
                        if not ev.feasible(tail[1]):
                            total = math.inf
                        score = _rank_key(total, new_prefix + (tail[1],))
                        bucket = memo.setdefault((new_prefix[-1][1], _signature(seps, new_free)), [])
                        self._insert(bucket, (score, new_prefix, new_free))
            if opts.beam is not None and len(top) > 4 * keep:
                top.sort(key=_cmp_key)
                del top[2 * keep:]
        if not top:
            raise InfeasiblePlanError("no plan satisfies the per-GPU memory capacity")
        top.sort(key=_cmp_key)
        self.candidates = [PlanCandidate(st, k[0]) for k, st in _dedupe(top)[:keep]]
        return self.candidates

    def _trim(self, bucket: list) -> list:
        if self.options.beam is not None and len(bucket) > self.options.beam:
            bucket.sort(key=_raw_key)
            del bucket[self.options.beam:]
        return bucket

    def _insert(self, bucket: list, entry) -> None:
        bucket.append(entry)
        beam = self.options.beam
        if beam is not None and len(bucket) > 2 * beam:
            bucket.sort(key=_raw_key)
            del bucket[beam:]

    def best(self) -> PipelinePlan:
        cands = self.candidates or self.search()
        return self._finish(cands[0])

    def _finish(self, cand: PlanCandidate) -> PipelinePlan:
        stages = _materialize(self.cluster, cand.stages)
        draft = PipelinePlan(stages, micro_batches=self.M)
        seq = build_stage_sequence(draft, self.profile, self.cluster)
        caps = memory_caps(seq, self.cluster.per_gpu_memory, self.M,
                           self.options.optimizer_multiplier)
        phi, sim = optimize_phi(seq, self.M, self.options.phi_policy, D=caps)
        est = _estimate([s.fwd for s in seq], [s.bwd for s in seq],
                        [s.allreduce_time for s in seq], self.M)
        return PipelinePlan(stages, phi, est.pivot, est.total, sim, self.M, compute_acr(seq))

    def ranked_plans(self) -> list[PipelinePlan]:
        """Top-k estimator candidates, each re-scored by the simulator."""
        cands = self.candidates or self.search()
        return [self._finish(c) for c in cands]


class _Cmp:
    __slots__ = ("key",)

    def __init__(self, key):
        self.key = key

    def __lt__(self, other):
        return _better(self.key, other.key)


def _raw_key(entry) -> tuple:
    return entry[0]


def _cmp_key(entry) -> _Cmp:
    key = entry[0]
    return _Cmp(key if key is not None else (-math.inf,))


def _signature(seps: tuple[int, ...], free: tuple[int, ...]) -> tuple:
    # servers of equal size and equal free count are interchangeable
    return tuple(sorted(zip(seps, free)))


def _dedupe(entries):
    seen, out = set(), []
    for e in entries:
        if e[1] not in seen:
            seen.add(e[1])
            out.append(e)
    return out


def plan(profile: ModelProfile, cluster: ClusterSpec, M: int,
         options: Optional[PlannerOptions] = None, **kwargs) -> PipelinePlan:
    """Latency-optimal hybrid plan found by the memoised search."""
    if options is None:
        options = PlannerOptions(**kwargs)
    elif kwargs:
        raise TypeError("pass either options or keyword overrides, not both")
    return Planner(profile, cluster, M, options).best()


# --- exhaustive oracle -------------------------------------------------------

BRUTE_FORCE_LIMITS = {"max_layers": 8, "max_gpus": 4}


def _compositions(n: int):
    """Split points of [0, n) into consecutive non-empty ranges."""
    for k in range(n):
        for cuts in itertools.combinations(range(1, n), k):
            bounds = (0,) + cuts + (n,)
            yield tuple(zip(bounds[:-1], bounds[1:]))


def _device_sequences(gpus: list[int], k: int):
    """Ordered tuples of ``k`` disjoint non-empty subsets of ``gpus`` (not necessarily covering)."""
    # label each GPU with a stage 0..k-1 or -1 (idle)
    for labels in itertools.product(range(-1, k), repeat=len(gpus)):
        sets = [frozenset(g for g, l in zip(gpus, labels) if l == s) for s in range(k)]
        if all(sets):
            yield tuple(sets)


def brute_force_candidates(profile: ModelProfile, cluster: ClusterSpec, M: int,
                           optimizer_multiplier: float = 8.0, allow_idle: bool = True):
    """Yield ``(latency, stages)`` for every memory-feasible plan."""
    N, G = profile.num_layers, cluster.num_gpus
    if N > BRUTE_FORCE_LIMITS["max_layers"] or G > BRUTE_FORCE_LIMITS["max_gpus"]:
        raise ValidationError(
            f"brute force limited to N <= {BRUTE_FORCE_LIMITS['max_layers']} and "
            f"G <= {BRUTE_FORCE_LIMITS['max_gpus']} (got N={N}, G={G})"
        )
    from .costmodel import allreduce_time, splitconcat_time
    from .model import aggregate_stage

    gpus = list(range(G))
    for ranges in _compositions(N):
        k = len(ranges)
        if k > G:
            continue
        for sets in _device_sequences(gpus, k):
            if not allow_idle and sum(len(s) for s in sets) != G:
                continue
            fwd, bwd, ar = [], [], []
            ok = True
            prev = None
            for (lo, hi), devs in zip(ranges, sets):
                cost = aggregate_stage(profile, lo, hi, len(devs))
                if not memory_feasible(cost, 1, cluster.per_gpu_memory, optimizer_multiplier):
                    ok = False
                    break
                if prev is not None:
                    c = splitconcat_time(profile.layers[lo - 1].activation_bytes, prev, devs, cluster)
                    fwd.append(c)
                    bwd.append(c)
                    ar.append(0.0)
                fwd.append(cost.fwd)
                bwd.append(cost.bwd)
                ar.append(allreduce_time(cost.param_bytes, devs, cluster))
                prev = devs
            if not ok:
                continue
            stages = tuple(Stage(lo, hi, d) for (lo, hi), d in zip(ranges, sets))
            yield _estimate(fwd, bwd, ar, M).total, stages


def brute_force_plan(profile: ModelProfile, cluster: ClusterSpec, M: int,
                     phi_policy: str = "search", optimizer_multiplier: float = 8.0,
                     allow_idle: bool = True) -> PipelinePlan:
    """Global optimum over all splits and all device subsets (small instances only)."""
    best = None
    for lat, stages in brute_force_candidates(profile, cluster, M, optimizer_multiplier, allow_idle):
        key = (lat, len(stages), tuple(s.layer_hi for s in stages[:-1]))
        if _better(key, best[0] if best else None):
            best = (key, stages)
    if best is None:
        raise InfeasiblePlanError("no plan satisfies the per-GPU memory capacity")
    stages = best[1]
    draft = PipelinePlan(stages, micro_batches=M)
    seq = build_stage_sequence(draft, profile, cluster)
    caps = memory_caps(seq, cluster.per_gpu_memory, M, optimizer_multiplier)
    phi, sim = optimize_phi(seq, M, phi_policy, D=caps)
    est = _estimate([s.fwd for s in seq], [s.bwd for s in seq],
                    [s.allreduce_time for s in seq], M)
    return PipelinePlan(stages, phi, est.pivot, est.total, sim, M, compute_acr(seq))


def policy_expressible(stages: Iterable[Stage], cluster: ClusterSpec,
                       allow_idle: bool = True) -> bool:
    """Whether a plan's placement is reachable by composing the three policies.

    Placements are compared by per-server GPU counts, which is all the cost
    model looks at.
    """
    state = DeviceState.fresh(cluster)
    stages = list(stages)
    for idx, s in enumerate(stages):
        counts = cluster.server_counts(s.devices)
        if idx == len(stages) - 1 and not allow_idle:
            if sum(counts) != state.num_free:
                return False
        if sum(counts) > state.num_free:
            return False
        options = [c for _, c in placement_counts(state, sum(counts))]
        if counts not in options:
            return False
        state = state.allocate(_take(state, list(counts)))
    return True

"""Exact block-level simulation of 1F1B (early backward) and GPipe schedules.

Every forward block ``f[i, x]`` and backward block ``b[i, x]`` starts at the
latest end time among the blocks it depends on.  For the early-backward
schedule with injection vector ``phi``::

    f[i, x] after b[i - phi[x], x], f[i - 1, x], f[i, x - 1]
    b[i, x] after f[i + phi[x] - 1, x], b[i - 1, x], b[i, x + 1]

Dependencies whose index falls outside the grid are dropped.  The dependency
graph only depends on ``(S, M, phi)``, so its topological order is cached and
reused for any block durations.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from functools import lru_cache
from graphlib import CycleError, TopologicalSorter
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .model import StageCost, StageCostSequence, ValidationError

DAPPLE = "dapple"
GPIPE = "gpipe"


class ScheduleError(RuntimeError):
    """The dependency graph has a cycle (an internal invariant was broken)."""


@dataclass(frozen=True)
class Block:
    stage: int
    micro_batch: int
    kind: str  # "forward" | "backward"
    start: float
    end: float


@dataclass(frozen=True, eq=False)
class Timeline:
    """Start/end times of every block, indexed ``[micro_batch, stage]``."""

    f_start: np.ndarray
    f_end: np.ndarray
    b_start: np.ndarray
    b_end: np.ndarray
    phi: tuple[int, ...]
    schedule: str = DAPPLE

    @property
    def M(self) -> int:
        return self.f_start.shape[0]

    @property
    def S(self) -> int:
        return self.f_start.shape[1]

    @property
    def makespan(self) -> float:
        return float(max(self.f_end.max(), self.b_end.max()))

    def blocks(self) -> Iterator[Block]:
        for x in range(self.S):
            for i in range(self.M):
                yield Block(x, i, "forward", float(self.f_start[i, x]), float(self.f_end[i, x]))
                yield Block(x, i, "backward", float(self.b_start[i, x]), float(self.b_end[i, x]))

    def stage_blocks(self, x: int) -> list[Block]:
        return sorted((b for b in self.blocks() if b.stage == x), key=lambda b: (b.start, b.end))


def validate_phi(phi: Sequence[int], S: int, M: int) -> None:
    if len(phi) != S:
        raise ValidationError(f"phi has {len(phi)} entries, expected {S}")
    for x, p in enumerate(phi):
        if not 1 <= p <= M:
            raise ValidationError(f"phi[{x}]={p} outside [1, M={M}]")
        if x and p > phi[x - 1]:
            raise ValidationError("phi must be non-increasing from stage 0 upward")
    if phi[-1] != 1:
        raise ValidationError("phi of the topmost stage must be 1")


def expand_phi(phi: Sequence[int], num_compute: int) -> tuple[int, ...]:
    """Spread a per-compute-stage vector over the alternating sequence.

    Each communication stage reuses the count of the compute stage below it.
    A vector that already has ``2 * num_compute - 1`` entries passes through.
    """
    phi = tuple(int(p) for p in phi)
    full = 2 * num_compute - 1
    if len(phi) == full:
        return phi
    if len(phi) != num_compute:
        raise ValidationError(
            f"phi has {len(phi)} entries, expected {num_compute} or {full}"
        )
    out = []
    for k, p in enumerate(phi):
        out.append(p)
        if k < num_compute - 1:
            out.append(p)
    return tuple(out)


@lru_cache(maxsize=256)
def _graph(S: int, M: int, phi: tuple[int, ...], schedule: str):
    """Topological order and dependency lists for the block DAG.

    Node ``i * S + x`` is ``f[i, x]``; node ``M * S + i * S + x`` is ``b[i, x]``.
    """
    nf = M * S

    def f(i, x):
        return i * S + x

    def b(i, x):
        return nf + i * S + x

    deps: list[tuple[int, ...]] = [()] * (2 * nf)
    for i in range(M):
        for x in range(S):
            d = []
            if schedule == DAPPLE and i - phi[x] >= 0:
                d.append(b(i - phi[x], x))
            if i >= 1:
                d.append(f(i - 1, x))
            if x >= 1:
                d.append(f(i, x - 1))
            deps[f(i, x)] = tuple(d)

            d = []
            if schedule == DAPPLE:
                if i + phi[x] - 1 < M:
                    d.append(f(i + phi[x] - 1, x))
            else:
                d.append(f(M - 1, x))
            if i >= 1:
                d.append(b(i - 1, x))
            if x + 1 < S:
                d.append(b(i, x + 1))
            deps[b(i, x)] = tuple(d)
    try:
        order = tuple(TopologicalSorter({n: deps[n] for n in range(2 * nf)}).static_order())
    except CycleError as exc:
        raise ScheduleError(f"dependency cycle for S={S}, M={M}, phi={phi}") from exc
    return order, tuple(deps)


def _run(fwd: Sequence[float], bwd: Sequence[float], M: int, phi: tuple[int, ...],
         schedule: str) -> Timeline:
    S = len(fwd)
    order, deps = _graph(S, M, phi, schedule)
    nf = M * S
    dur = [fwd[n % S] for n in range(nf)] + [bwd[n % S] for n in range(nf)]
    start = [0.0] * (2 * nf)
    end = [0.0] * (2 * nf)
    for n in order:
        t = 0.0
        for d in deps[n]:
            if end[d] > t:
                t = end[d]
        start[n] = t
        end[n] = t + dur[n]
    st = np.asarray(start).reshape(2, M, S)
    en = np.asarray(end).reshape(2, M, S)
    return Timeline(st[0], en[0], st[1], en[1], phi, schedule)


def _times(seq: Union[StageCostSequence, tuple]) -> tuple[list[float], list[float]]:
    return [s.fwd for s in seq], [s.bwd for s in seq]


def dapple_schedule(seq: StageCostSequence, M: int, phi: Sequence[int]) -> Timeline:
    """Early-backward (1F1B) schedule with ``phi[x]`` warm-up injections at stage ``x``."""
    if M < 1:
        raise ValidationError("M must be >= 1")
    phi = tuple(int(p) for p in phi)
    validate_phi(phi, len(seq), M)
    fwd, bwd = _times(seq)
    return _run(fwd, bwd, M, phi, DAPPLE)


def gpipe_schedule(seq: StageCostSequence, M: int) -> Timeline:
    """All forwards of the batch first, then all backwards, on every stage."""
    if M < 1:
        raise ValidationError("M must be >= 1")
    fwd, bwd = _times(seq)
    return _run(fwd, bwd, M, (M,) * len(seq), GPIPE)


def batch_latency(tl: Timeline, seq: StageCostSequence) -> float:
    """Last backward end plus AllReduce, maximised over stages."""
    ar = np.array([s.allreduce_time for s in seq])
    return float(np.max(tl.b_end[-1] + ar))


def simulate_latency_batch(fwd: np.ndarray, bwd: np.ndarray, M: int, phi: Sequence[int],
                           allreduce: Optional[np.ndarray] = None,
                           schedule: str = DAPPLE) -> np.ndarray:
    """Batch latency of many pipelines with the same shape at once.

    ``fwd`` and ``bwd`` have shape ``(n, S)``; returns shape ``(n,)``.
    """
    fwd = np.atleast_2d(np.asarray(fwd, dtype=float))
    bwd = np.atleast_2d(np.asarray(bwd, dtype=float))
    n, S = fwd.shape
    phi = tuple(int(p) for p in phi) if schedule == DAPPLE else (M,) * S
    if schedule == DAPPLE:
        validate_phi(phi, S, M)
    order, deps = _graph(S, M, phi, schedule)
    nf = M * S
    end = np.zeros((2 * nf, n))
    zero = np.zeros(n)
    for node in order:
        d = deps[node]
        if not d:
            t = zero
        elif len(d) == 1:
            t = end[d[0]]
        else:
            t = np.maximum(end[d[0]], end[d[1]])
            for extra in d[2:]:
                t = np.maximum(t, end[extra])
        x = node % S
        dur = fwd[:, x] if node < nf else bwd[:, x]
        end[node] = t + dur
    last = end[nf + (M - 1) * S: nf + M * S].T  # (n, S)
    if allreduce is not None:
        last = last + np.atleast_2d(np.asarray(allreduce, dtype=float))
    return last.max(axis=1)


def peak_activations(tl: Timeline) -> list[int]:
    """Per stage, the most micro-batches whose forward is done and backward is not."""
    peaks = []
    for x in range(tl.S):
        fe = tl.f_end[:, x]
        be = tl.b_end[:, x]
        best = 0
        for t in fe:
            live = int(np.count_nonzero((fe <= t) & (t < be)))
            best = max(best, live)
        peaks.append(best)
    return peaks


def apply_recompute(seq: StageCostSequence) -> StageCostSequence:
    """Re-run each compute stage's forward inside its backward.

    Only the stage input needs to be kept per micro-batch, so the working set
    shrinks to the boundary activation.
    """
    out = []
    for s in seq:
        if s.is_compute:
            s = replace(s, bwd=s.bwd + s.fwd,
                        activation_working_bytes=float(s.activation_out_bytes))
        out.append(s)
    return tuple(out)


# --- injection vector selection -------------------------------------------

PRESET_A = "A"
PRESET_B = "B"
SEARCH = "search"
_ALIASES = {"A": PRESET_A, "preset-A": PRESET_A, "a": PRESET_A,
            "B": PRESET_B, "preset-B": PRESET_B, "b": PRESET_B,
            "search": SEARCH}


def _caps(S: int, M: int, D) -> list[int]:
    if D is None:
        caps = [M] * S
    elif isinstance(D, (int, np.integer)):
        if D < 1:
            raise ValidationError("memory cap D must be >= 1")
        caps = [min(int(D), M)] * S
    else:
        if len(D) != S or any(d < 1 for d in D):
            raise ValidationError("per-stage memory caps must be >= 1, one per stage")
        caps = [min(int(d), M) for d in D]
    # a lower stage must inject at least as much as the one above it
    for x in range(1, S):
        caps[x] = min(caps[x], caps[x - 1])
    return caps


def preset_phi(S: int, M: int, policy: str, D=None) -> tuple[int, ...]:
    caps = _caps(S, M, D)
    policy = _ALIASES[policy]
    if policy == PRESET_A:
        return tuple(min(S - i, caps[i]) for i in range(S))
    if policy == PRESET_B:
        return tuple(min(2 * (S - i) - 1, caps[i]) for i in range(S))
    raise ValidationError(f"{policy!r} is not a preset policy")


def _phi_vectors(upper: Sequence[int]) -> Iterator[tuple[int, ...]]:
    """All non-increasing vectors with last entry 1 and ``phi[x] <= upper[x]``."""
    S = len(upper)

    def rec(x, floor):
        if x < 0:
            yield ()
            return
        for p in range(floor, upper[x] + 1):
            for rest in rec(x - 1, p):
                yield rest + (p,)

    for head in rec(S - 2, 1):
        yield head + (1,)


def _count_phi_vectors(upper: Sequence[int]) -> int:
    # ways[p]: number of valid suffixes whose first entry equals p
    ways = {1: 1}
    for x in range(len(upper) - 2, -1, -1):
        nxt, running = {}, 0
        for p in range(1, upper[x] + 1):
            running += ways.get(p, 0)
            nxt[p] = running
        ways = nxt
    return sum(ways.values())


def optimize_phi(seq: StageCostSequence, M: int, strategy: str = SEARCH, D=None,
                 max_candidates: int = 20000) -> tuple[tuple[int, ...], float]:
    """Choose an injection vector; returns it with its simulated batch latency.

    ``search`` scores every valid vector bounded by the preset-B values and
    keeps the fastest, preferring a smaller total (less memory) on ties.
    When there are more than ``max_candidates`` vectors it hill-climbs from
    the better preset instead.
    """
    if strategy not in _ALIASES:
        raise ValidationError(f"unknown phi strategy {strategy!r}")
    strategy = _ALIASES[strategy]
    S = len(seq)
    fwd, bwd = _times(seq)
    ar = np.array([s.allreduce_time for s in seq])

    def score(phi):
        tl = _run(fwd, bwd, M, phi, DAPPLE)
        return float(np.max(tl.b_end[-1] + ar))

    if strategy != SEARCH:
        phi = preset_phi(S, M, strategy, D)
        return phi, score(phi)

    upper = preset_phi(S, M, PRESET_B, D)
    key = lambda item: (item[1], sum(item[0]), item[0])
    if _count_phi_vectors(upper) <= max_candidates:
        return min(((p, score(p)) for p in _phi_vectors(upper)), key=key)

    best = min(((p, score(p)) for p in (preset_phi(S, M, PRESET_A, D), upper)), key=key)
    improved = True
    while improved:
        improved = False
        for x, delta in itertools.product(range(S - 1), (-1, 1)):
            cand = list(best[0])
            cand[x] += delta
            cand = tuple(cand)
            if not 1 <= cand[x] <= upper[x] or (x and cand[x] > cand[x - 1]) or cand[x] < cand[x + 1]:
                continue
            item = (cand, score(cand))
            if key(item) < key(best):
                best, improved = item, True
    return best

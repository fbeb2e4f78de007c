"""Closed-form batch latency: warmup + steady + ending around a pivot stage."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .costmodel import allreduce_time, splitconcat_time
from .model import (ClusterSpec, ModelProfile, PipelinePlan, StageCost, StageCostSequence,
                    aggregate_stage)


@dataclass(frozen=True)
class LatencyBreakdown:
    warmup: float
    steady: float
    ending: float
    total: float
    pivot: int


def build_stage_sequence(plan: PipelinePlan, profile: ModelProfile,
                         cluster: ClusterSpec) -> StageCostSequence:
    """Expand a plan into alternating compute / communication stage costs."""
    plan.validate(profile, cluster)
    seq: list[StageCost] = []
    prev = None
    for stage in plan.stages:
        cost = aggregate_stage(profile, stage.layer_lo, stage.layer_hi, stage.replication)
        ar = allreduce_time(cost.param_bytes, stage.devices, cluster)
        if prev is not None:
            prev_stage, prev_cost = prev
            sc = splitconcat_time(prev_cost.activation_out_bytes, prev_stage.devices,
                                  stage.devices, cluster)
            seq.append(StageCost("communication", sc, sc,
                                 activation_out_bytes=prev_cost.activation_out_bytes))
        cost = StageCost("compute", cost.fwd, cost.bwd, cost.param_bytes, ar,
                         cost.activation_out_bytes, cost.activation_working_bytes)
        seq.append(cost)
        prev = (stage, cost)
    return tuple(seq)


def select_pivot(seq: StageCostSequence, M: int) -> int:
    """Pick the stage whose steady phase dominates, scanning from the top down."""
    return _pivot([s.fwd + s.bwd for s in seq], M)


def _pivot(fb: Sequence[float], M: int) -> int:
    # A lower stage s takes over when its bubble-free steady phase outlasts the
    # current pivot's steady phase plus every F+B from just above s up to and
    # including the pivot.  Strict comparison keeps the higher stage on ties.
    S = len(fb)
    if S == 0:
        raise ValueError("empty stage sequence")
    q = S - 1
    between = 0.0  # sum of F+B strictly between s and q
    for s in range(S - 2, -1, -1):
        if (M - 1) * fb[s] > (M - 1) * fb[q] + between + fb[q]:
            q = s
            between = 0.0
        else:
            between += fb[s]
    return q


def estimate_latency(seq: StageCostSequence, M: int) -> LatencyBreakdown:
    if M < 1:
        raise ValueError("M must be >= 1")
    fwd = [s.fwd for s in seq]
    bwd = [s.bwd for s in seq]
    ar = [s.allreduce_time for s in seq]
    return _estimate(fwd, bwd, ar, M)


def _estimate(fwd, bwd, ar, M) -> LatencyBreakdown:
    S = len(fwd)
    q = _pivot([f + b for f, b in zip(fwd, bwd)], M)
    warmup = sum(fwd[: q + 1])
    steady = (M - 1) * (fwd[q] + bwd[q])
    # stages at or below the pivot drain their backward after it; stages above
    # finished theirs earlier and only their AllReduce can stick out
    ending = float("-inf")
    acc = 0.0
    for s in range(q, -1, -1):
        acc += bwd[s]
        ending = max(ending, acc + ar[s])
    acc = bwd[q]
    for s in range(q + 1, S):
        acc += bwd[s]
        ending = max(ending, ar[s] - acc)
    return LatencyBreakdown(warmup, steady, ending, warmup + steady + ending, q)


def compute_acr(seq: StageCostSequence) -> float:
    """Mean communication-stage F+B over mean compute-stage F+B."""
    comp = [s.fwd + s.bwd for s in seq if s.is_compute]
    comm = [s.fwd + s.bwd for s in seq if not s.is_compute]
    if not comp:
        raise ValueError("sequence has no compute stage")
    if not comm:
        return 0.0
    mean_comp = sum(comp) / len(comp)
    if mean_comp == 0:
        return float("inf") if sum(comm) > 0 else 0.0
    return (sum(comm) / len(comm)) / mean_comp


def estimate_many(fwd, bwd, allreduce, M: int):
    """Vectorised :func:`estimate_latency` over rows of ``(n, S)`` arrays.

    Additions happen in the same order as the scalar path, so each row's
    total matches it bit for bit.  Returns ``(total, pivot)`` arrays.
    """
    fwd = np.asarray(fwd, dtype=float)
    bwd = np.asarray(bwd, dtype=float)
    ar = np.asarray(allreduce, dtype=float)
    n, S = fwd.shape
    fb = fwd + bwd
    rows = np.arange(n)
    q = np.full(n, S - 1)
    between = np.zeros(n)
    for s in range(S - 2, -1, -1):
        fq = fb[rows, q]
        take = (M - 1) * fb[:, s] > (M - 1) * fq + between + fq
        q = np.where(take, s, q)
        between = np.where(take, 0.0, between + fb[:, s])
    warm = np.zeros(n)
    for s in range(S):
        warm = np.where(s <= q, warm + fwd[:, s], warm)
    fq = fb[rows, q]
    steady = (M - 1) * fq
    ending = np.full(n, -np.inf)
    acc = np.zeros(n)
    for s in range(S - 1, -1, -1):
        below = s <= q
        acc = np.where(below, acc + bwd[:, s], acc)
        ending = np.where(below, np.maximum(ending, acc + ar[:, s]), ending)
    acc = np.zeros(n)
    for s in range(S):
        acc = np.where(s == q, bwd[:, s], np.where(s > q, acc + bwd[:, s], acc))
        ending = np.where(s > q, np.maximum(ending, ar[:, s] - acc), ending)
    return warm + steady + ending, q

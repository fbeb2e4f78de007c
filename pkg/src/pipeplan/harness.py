"""Desk-scale experiments: ranking fidelity, partition insights, schedule tables."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .estimator import estimate_latency, estimate_many
from .model import StageCostSequence, ValidationError, compute_stages
from .simulator import (DAPPLE, GPIPE, PRESET_A, apply_recompute, batch_latency,
                        dapple_schedule, gpipe_schedule, optimize_phi, peak_activations,
                        preset_phi, simulate_latency_batch, validate_phi)

CHUNK = 10_000  # pairs per RNG stream; fixed so results ignore the worker count
THREADS_ENV = "PIPEPLAN_THREADS"


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return 1


@dataclass(frozen=True)
class RankingReport:
    pairs_tested: int
    errors: int
    error_rate: float
    seed: int
    M: int = 16
    phi: tuple[int, ...] = (5, 3, 1)
    fwd_fraction: float = 1 / 3

    def __post_init__(self):
        if self.errors > self.pairs_tested:
            raise ValidationError("errors cannot exceed pairs_tested")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phi"] = list(self.phi)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        rows = [
            ("pairs_tested", str(self.pairs_tested)),
            ("errors", str(self.errors)),
            ("error_rate", f"{self.error_rate:.6%}"),
            ("seed", str(self.seed)),
            ("M", str(self.M)),
            ("phi", ",".join(map(str, self.phi))),
            ("fwd_fraction", f"{self.fwd_fraction:.6g}"),
        ]
        return format_table(["field", "value"], rows)

    def append_csv(self, path) -> None:
        """Append one row to a CSV log, writing the header for a new file."""
        d = self.to_dict()
        d["phi"] = ",".join(map(str, self.phi))
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(d))
            if new:
                w.writeheader()
            w.writerow(d)


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Aligned-column plain text table."""
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _random_partitions(rng: np.random.Generator, n: int, S: int, total: float, fwd_fraction):
    e = rng.exponential(size=(n, S))
    share = total * e / e.sum(axis=1, keepdims=True)
    fwd = share * fwd_fraction
    return fwd, share - fwd


def _ranking_chunk(seed: int, chunk: int, n: int, M: int, phi, total: float, fwd_fraction):
    rng = np.random.default_rng([seed, chunk])
    S = len(phi)
    fa, ba = _random_partitions(rng, n, S, total, fwd_fraction)
    fb, bb = _random_partitions(rng, n, S, total, fwd_fraction)
    zero = np.zeros((n, S))
    sim_a = simulate_latency_batch(fa, ba, M, phi)
    sim_b = simulate_latency_batch(fb, bb, M, phi)
    est_a, _ = estimate_many(fa, ba, zero, M)
    est_b, _ = estimate_many(fb, bb, zero, M)
    return int(np.count_nonzero((sim_a - sim_b) * (est_a - est_b) < 0))


def ranking_experiment(n_pairs: int = 100_000, M: int = 16, phi: Sequence[int] = (5, 3, 1),
                       total_compute: float = 1.0, seed: int = 0,
                       fwd_fraction: float = 1 / 3,
                       workers: Optional[int] = None) -> RankingReport:
    """Count pairs of random 3-stage plans that the estimator ranks differently
    from the simulator.

    Each plan splits ``total_compute`` over the stages uniformly on the simplex;
    every stage spends ``fwd_fraction`` of its share on forward.
    """
    if n_pairs < 1:
        raise ValidationError("n_pairs must be >= 1")
    if not 0 < fwd_fraction < 1:
        raise ValidationError("fwd_fraction must lie strictly between 0 and 1")
    phi = tuple(int(p) for p in phi)
    validate_phi(phi, len(phi), M)
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(c, min(CHUNK, n_pairs - c * CHUNK)) for c in range((n_pairs + CHUNK - 1) // CHUNK)]

    def run(job):
        c, n = job
        return _ranking_chunk(seed, c, n, M, phi, total_compute, fwd_fraction)

    if workers == 1 or len(jobs) == 1:
        errors = sum(map(run, jobs))
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            errors = sum(ex.map(run, jobs))
    return RankingReport(n_pairs, errors, errors / n_pairs, seed, M, phi, fwd_fraction)


@dataclass
class Comparison:
    """Two named latencies plus any analytical reference values."""
    name: str
    values: dict = field(default_factory=dict)
    analytical: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        rows = [(k, f"{v:.9g}", "") for k, v in self.values.items()]
        rows += [(k, f"{v:.9g}", "analytical") for k, v in self.analytical.items()]
        rows += [(k, str(v), "check") for k, v in self.checks.items()]
        return f"{self.name}\n" + format_table(["quantity", "value", "note"], rows)


def straight_pipeline(stage_compute: Sequence[float], fwd_fraction: float = 1 / 3) -> StageCostSequence:
    """Compute-only stages, each split into forward and backward by ``fwd_fraction``."""
    fwd = [c * fwd_fraction for c in stage_compute]
    bwd = [c - f for c, f in zip(stage_compute, fwd)]
    return compute_stages(fwd, bwd)


def _dapple_latency(seq, M, phi=None):
    if phi is None:
        phi, lat = optimize_phi(seq, M)
        return lat
    return batch_latency(dapple_schedule(seq, M, phi), seq)


def insight_fewer_stages(total_compute: float = 16.0, M: int = 32,
                         fwd_fraction: float = 1 / 3) -> Comparison:
    """16 straight stages with M micro-batches vs 2 stages with M/8 larger ones.

    Every stage of the 16-way split gets C/16 for a small micro-batch; the
    2-way split packs 8 of them per micro-batch, so each of its stages costs
    C/2.  Both use the preset-A injection vector, which leaves no bubble
    beyond the fill and drain.
    """
    if M < 8 or M % 8:
        raise ValidationError("M must be a positive multiple of 8")
    C = float(total_compute)
    m2 = M // 8
    deep = straight_pipeline([C / 16] * 16, fwd_fraction)
    shallow = straight_pipeline([C / 2] * 2, fwd_fraction)
    l1 = _dapple_latency(deep, M, preset_phi(16, M, PRESET_A))
    l2 = _dapple_latency(shallow, m2, preset_phi(2, m2, PRESET_A))
    a1 = C * (m2 / 2 + 15 / 16)
    a2 = C * (m2 / 2 + 1 / 2)
    return Comparison(
        "fewer stages",
        values={"L1_16_stage": l1, "L2_2_stage": l2, "difference": l1 - l2},
        analytical={"L1": a1, "L2": a2, "difference": 7 * C / 16},
        checks={"L1 > L2": l1 > l2},
    )


def increasing_allocation_ok(ratio: Sequence[float], M: int) -> bool:
    """Each lower stage carries at least the stage above it, but not so much
    that it outweighs one extra micro-batch of that stage."""
    for s in range(1, len(ratio)):
        upper, lower = ratio[s], ratio[s - 1]
        if not (upper * (M - 1) <= lower * (M - 1) <= upper * M):
            return False
    return True


def insight_uneven(M: int = 8, ratio: Sequence[float] = (8, 7, 6), total_compute: float = 21.0,
                   fwd_fraction: float = 1 / 3) -> Comparison:
    """Uneven (heavier at the bottom) vs even 3-stage split of the same work.

    The early-backward schedule uses the best injection vector for each split;
    GPipe has no such knob.
    """
    if M < 2:
        raise ValidationError("M must be >= 2")
    S = len(ratio)
    uneven = [total_compute * r / sum(ratio) for r in ratio]
    even = [total_compute / S] * S
    su, se = straight_pipeline(uneven, fwd_fraction), straight_pipeline(even, fwd_fraction)
    du, de = _dapple_latency(su, M), _dapple_latency(se, M)
    gu = batch_latency(gpipe_schedule(su, M), su)
    ge = batch_latency(gpipe_schedule(se, M), se)
    return Comparison(
        f"uneven {':'.join(f'{r:g}' for r in ratio)} vs even, M={M}",
        values={"dapple_uneven": du, "dapple_even": de, "gpipe_uneven": gu, "gpipe_even": ge},
        checks={
            "dapple uneven faster": du < de,
            "gpipe uneven not faster": gu >= ge,
            "increasing allocation condition": increasing_allocation_ok(ratio, M),
        },
    )


@dataclass(frozen=True)
class ScheduleRow:
    M: int
    schedule: str
    latency: float
    throughput: float
    peak_activations: tuple[int, ...]


def gpipe_comparison(seq: StageCostSequence, M_list: Sequence[int], recompute: bool = False,
                     micro_batch_size: int = 1, phi_policy: str = "A",
                     phi: Optional[Sequence[int]] = None) -> list[ScheduleRow]:
    """Latency, samples per second and per-stage live activations for both schedules.

    The early-backward rows use ``phi`` when given, otherwise the vector from
    ``phi_policy``.  Preset A keeps the vector the same for every M >= S.
    """
    if not M_list:
        raise ValidationError("M_list must not be empty")
    if recompute:
        seq = apply_recompute(seq)
    rows = []
    for M in M_list:
        if phi is None:
            use, _ = optimize_phi(seq, M, phi_policy)
        else:
            use = tuple(phi)
        tl = dapple_schedule(seq, M, use)
        lat = batch_latency(tl, seq)
        rows.append(ScheduleRow(M, DAPPLE, lat, M * micro_batch_size / lat,
                                tuple(peak_activations(tl))))
        tl = gpipe_schedule(seq, M)
        lat = batch_latency(tl, seq)
        rows.append(ScheduleRow(M, GPIPE, lat, M * micro_batch_size / lat,
                                tuple(peak_activations(tl))))
    return rows


def schedule_table(rows: Sequence[ScheduleRow]) -> str:
    return format_table(
        ["M", "schedule", "latency", "throughput", "peak activations"],
        [(r.M, r.schedule, f"{r.latency:.6g}", f"{r.throughput:.6g}",
          ",".join(map(str, r.peak_activations))) for r in rows],
    )


def estimator_gap(seq: StageCostSequence, M: int, phi: Sequence[int]) -> float:
    """Estimated minus simulated latency for one sequence."""
    return estimate_latency(seq, M).total - batch_latency(dapple_schedule(seq, M, phi), seq)

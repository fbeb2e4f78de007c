"""Domain types: layer profiles, cluster topology, stages and plans.

Times are seconds (float), sizes are bytes (int).  Files store times in
microseconds and bandwidths in GB/s; conversion happens at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence, Union

US = 1e-6
GB = 1_000_000_000


class ValidationError(ValueError):
    """An input violates a domain invariant."""


class ProfileParseError(ValueError):
    """An input file is not well-formed."""


@dataclass(frozen=True)
class LayerProfile:
    index: int
    fwd_time: float
    bwd_time: float
    activation_bytes: int = 0
    param_bytes: int = 0

    def __post_init__(self):
        for name in ("fwd_time", "bwd_time", "activation_bytes", "param_bytes"):
            if getattr(self, name) < 0:
                raise ValidationError(f"layer {self.index}: {name} must be >= 0")


@dataclass(frozen=True)
class ModelProfile:
    layers: tuple[LayerProfile, ...]
    profile_batch_size: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 1:
            raise ValidationError("profile must have N >= 1 layers")
        for i, layer in enumerate(self.layers):
            if layer.index != i:
                raise ValidationError(
                    f"layer indices must be contiguous from 0 (got {layer.index} at position {i})"
                )
        if self.profile_batch_size < 1:
            raise ValidationError("profile_batch_size must be >= 1")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def from_arrays(
        cls,
        fwd: Sequence[float],
        bwd: Sequence[float],
        activation_bytes: Optional[Sequence[int]] = None,
        param_bytes: Optional[Sequence[int]] = None,
        profile_batch_size: int = 1,
    ) -> "ModelProfile":
        n = len(fwd)
        if len(bwd) != n:
            raise ValidationError("fwd and bwd must have equal length")
        act = list(activation_bytes) if activation_bytes is not None else [0] * n
        par = list(param_bytes) if param_bytes is not None else [0] * n
        layers = [
            LayerProfile(i, float(fwd[i]), float(bwd[i]), int(act[i]), int(par[i]))
            for i in range(n)
        ]
        return cls(tuple(layers), profile_batch_size)


@dataclass(frozen=True)
class ClusterSpec:
    """Servers with ``seps[k]`` GPUs each; GPU ids are assigned server by server."""

    seps: tuple[int, ...]
    intra_bw: float
    inter_bw: float
    intra_latency: float = 0.0
    inter_latency: float = 0.0
    per_gpu_memory: float = float("inf")

    def __post_init__(self):
        object.__setattr__(self, "seps", tuple(int(s) for s in self.seps))
        if not self.seps or any(s < 1 for s in self.seps):
            raise ValidationError("every server must hold >= 1 GPU")
        if self.intra_bw <= 0 or self.inter_bw <= 0:
            raise ValidationError("bandwidths must be > 0")
        if self.intra_latency < 0 or self.inter_latency < 0:
            raise ValidationError("latencies must be >= 0")
        if self.per_gpu_memory <= 0:
            raise ValidationError("per_gpu_memory must be > 0")

    @property
    def num_gpus(self) -> int:
        return sum(self.seps)

    @property
    def server_offsets(self) -> tuple[int, ...]:
        offsets, acc = [], 0
        for s in self.seps:
            offsets.append(acc)
            acc += s
        return tuple(offsets)

    def server_of(self, gpu: int) -> int:
        if gpu < 0 or gpu >= self.num_gpus:
            raise ValidationError(f"unknown device id {gpu} (cluster has {self.num_gpus} GPUs)")
        acc = 0
        for k, s in enumerate(self.seps):
            acc += s
            if gpu < acc:
                return k
        raise AssertionError("unreachable")

    def server_counts(self, devices: Iterable[int]) -> tuple[int, ...]:
        """Number of GPUs of ``devices`` on each server."""
        counts = [0] * len(self.seps)
        for d in devices:
            counts[self.server_of(d)] += 1
        return tuple(counts)


@dataclass(frozen=True)
class Stage:
    layer_lo: int
    layer_hi: int
    devices: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "devices", frozenset(self.devices))
        if not self.layer_lo < self.layer_hi:
            raise ValidationError(f"empty layer range [{self.layer_lo}, {self.layer_hi})")
        if not self.devices:
            raise ValidationError("stage needs at least one device")

    @property
    def replication(self) -> int:
        return len(self.devices)


@dataclass(frozen=True)
class StageCost:
    kind: str  # "compute" | "communication"
    fwd: float
    bwd: float
    param_bytes: int = 0
    allreduce_time: float = 0.0
    activation_out_bytes: int = 0
    # per-replica bytes kept alive by one in-flight micro-batch
    activation_working_bytes: float = 0.0

    def __post_init__(self):
        if self.kind not in ("compute", "communication"):
            raise ValidationError(f"unknown stage kind {self.kind!r}")
        if self.fwd < 0 or self.bwd < 0:
            raise ValidationError("stage times must be >= 0")
        if self.kind == "communication" and self.allreduce_time != 0:
            raise ValidationError("communication stages have no AllReduce")

    @property
    def is_compute(self) -> bool:
        return self.kind == "compute"


StageCostSequence = tuple[StageCost, ...]


def compute_stages(fwd: Sequence[float], bwd: Sequence[float],
                   allreduce: Optional[Sequence[float]] = None) -> StageCostSequence:
    """Build a plain compute-only sequence from per-stage times."""
    ar = allreduce if allreduce is not None else [0.0] * len(fwd)
    return tuple(StageCost("compute", float(f), float(b), allreduce_time=float(a))
                 for f, b, a in zip(fwd, bwd, ar, strict=True))


@dataclass(frozen=True)
class PipelinePlan:
    """A hybrid plan.

    ``phi`` holds one injection count per entry of the expanded stage-cost
    sequence (compute and communication stages alternating), so its length is
    ``2 * len(stages) - 1``.
    """

    stages: tuple[Stage, ...]
    phi: tuple[int, ...] = ()
    pivot: int = 0
    est_latency: float = 0.0
    sim_latency: Optional[float] = None
    micro_batches: int = 1
    acr: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "phi", tuple(int(p) for p in self.phi))

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def split_points(self) -> tuple[int, ...]:
        return tuple(s.layer_hi for s in self.stages[:-1])

    def validate(self, profile: ModelProfile, cluster: ClusterSpec) -> None:
        if not self.stages:
            raise ValidationError("plan has no stages")
        expect = 0
        for s in self.stages:
            if s.layer_lo != expect:
                raise ValidationError("stage layer ranges must partition [0, N) in order")
            expect = s.layer_hi
        if expect != profile.num_layers:
            raise ValidationError("stage layer ranges must cover all layers")
        seen: set[int] = set()
        for s in self.stages:
            for d in s.devices:
                cluster.server_of(d)
            if seen & s.devices:
                raise ValidationError("stage device sets must be disjoint")
            seen |= s.devices
        if self.phi:
            from .simulator import validate_phi

            validate_phi(self.phi, 2 * len(self.stages) - 1, self.micro_batches)

    def to_dict(self) -> dict:
        return {
            "stages": [
                {"layers": [s.layer_lo, s.layer_hi], "gpus": sorted(s.devices),
                 "replication": s.replication}
                for s in self.stages
            ],
            "phi": list(self.phi),
            "pivot": self.pivot,
            "micro_batches": self.micro_batches,
            "est_latency_us": self.est_latency / US,
            "sim_latency_us": None if self.sim_latency is None else self.sim_latency / US,
            "acr": self.acr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelinePlan":
        try:
            stages = tuple(
                Stage(int(s["layers"][0]), int(s["layers"][1]), frozenset(int(g) for g in s["gpus"]))
                for s in d["stages"]
            )
        except (KeyError, IndexError, TypeError) as exc:
            raise ProfileParseError(f"malformed plan stage entry: {exc}") from exc
        sim = d.get("sim_latency_us")
        return cls(
            stages=stages,
            phi=tuple(d.get("phi", ())),
            pivot=int(d.get("pivot", 0)),
            est_latency=float(d.get("est_latency_us", 0.0)) * US,
            sim_latency=None if sim is None else float(sim) * US,
            micro_batches=int(d.get("micro_batches", 1)),
            acr=float(d.get("acr", 0.0)),
        )


# --- aggregation -----------------------------------------------------------

def aggregate_stage(profile: ModelProfile, lo: int, hi: int, replication: int = 1) -> StageCost:
    """Collapse layers ``[lo, hi)`` replicated ``replication`` times into one stage.

    Replicas split each micro-batch evenly, so compute time scales by
    ``1 / replication``; every replica still holds (and all-reduces) the full
    parameter set.
    """
    n = profile.num_layers
    if not (0 <= lo < hi <= n):
        raise ValidationError(f"layer range [{lo}, {hi}) is empty or outside [0, {n})")
    if replication < 1:
        raise ValidationError("replication must be >= 1")
    layers = profile.layers[lo:hi]
    fwd = sum(l.fwd_time for l in layers)
    bwd = sum(l.bwd_time for l in layers)
    return StageCost(
        kind="compute",
        fwd=fwd / replication,
        bwd=bwd / replication,
        param_bytes=sum(l.param_bytes for l in layers),
        activation_out_bytes=layers[-1].activation_bytes,
        activation_working_bytes=sum(l.activation_bytes for l in layers) / replication,
    )


# --- file I/O --------------------------------------------------------------

Source = Union[str, bytes, IO]


def _read_json(source: Source, what: str) -> dict:
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        data = json.loads(source)
    except json.JSONDecodeError as exc:
        raise ProfileParseError(
            f"{what}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(data, dict):
        raise ProfileParseError(f"{what}: top-level value must be an object")
    return data


def _field(obj: dict, key: str, where: str, kind=(int, float)):
    if key not in obj:
        raise ProfileParseError(f"{where}: missing field {key!r}")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ProfileParseError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def load_profile(source: Source) -> ModelProfile:
    data = _read_json(source, "profile")
    batch = _field(data, "profile_batch_size", "profile", int)
    raw_layers = data.get("layers")
    if not isinstance(raw_layers, list):
        raise ProfileParseError("profile: field 'layers' must be a list")
    layers = []
    for i, entry in enumerate(raw_layers):
        where = f"profile.layers[{i}]"
        if not isinstance(entry, dict):
            raise ProfileParseError(f"{where}: must be an object")
        layers.append(LayerProfile(
            index=i,
            fwd_time=_field(entry, "fwd_time_us", where) * US,
            bwd_time=_field(entry, "bwd_time_us", where) * US,
            activation_bytes=_field(entry, "activation_bytes", where, int),
            param_bytes=_field(entry, "param_bytes", where, int),
        ))
    return ModelProfile(tuple(layers), batch)


def profile_to_dict(profile: ModelProfile) -> dict:
    return {
        "profile_batch_size": profile.profile_batch_size,
        "layers": [
            {"fwd_time_us": l.fwd_time / US, "bwd_time_us": l.bwd_time / US,
             "activation_bytes": l.activation_bytes, "param_bytes": l.param_bytes}
            for l in profile.layers
        ],
    }


def dump_profile(profile: ModelProfile) -> str:
    return json.dumps(profile_to_dict(profile), indent=2)


def load_cluster(source: Source) -> ClusterSpec:
    data = _read_json(source, "cluster")
    seps = data.get("seps")
    if not isinstance(seps, list) or not all(isinstance(s, int) for s in seps):
        raise ProfileParseError("cluster: field 'seps' must be a list of integers")
    mem = data.get("per_gpu_memory_gb")
    return ClusterSpec(
        seps=tuple(seps),
        intra_bw=_field(data, "intra_bw_gbps", "cluster") * GB,
        inter_bw=_field(data, "inter_bw_gbps", "cluster") * GB,
        intra_latency=data.get("intra_latency_us", 0.0) * US,
        inter_latency=data.get("inter_latency_us", 0.0) * US,
        per_gpu_memory=float("inf") if mem is None else mem * GB,
    )


def cluster_to_dict(cluster: ClusterSpec) -> dict:
    return {
        "seps": list(cluster.seps),
        "intra_bw_gbps": cluster.intra_bw / GB,
        "inter_bw_gbps": cluster.inter_bw / GB,
        "intra_latency_us": cluster.intra_latency / US,
        "inter_latency_us": cluster.inter_latency / US,
        "per_gpu_memory_gb": None if cluster.per_gpu_memory == float("inf")
        else cluster.per_gpu_memory / GB,
    }

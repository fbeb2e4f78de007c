"""Communication cost laws over a two-level (intra/inter server) topology."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

from .model import ClusterSpec, ValidationError


@dataclass(frozen=True)
class LinkClass:
    kind: str  # "intra-server" | "inter-server"
    bandwidth: float
    latency: float

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValidationError("link bandwidth must be > 0")


def link(cluster: ClusterSpec, same_server: bool) -> LinkClass:
    if same_server:
        return LinkClass("intra-server", cluster.intra_bw, cluster.intra_latency)
    return LinkClass("inter-server", cluster.inter_bw, cluster.inter_latency)


def allreduce_time(size: float, devices: Iterable[int], cluster: ClusterSpec) -> float:
    """Ring AllReduce of ``size`` bytes among ``devices``.

    The ring is bottlenecked by the inter-server link as soon as the devices
    span more than one server.
    """
    devices = list(devices)
    if not devices:
        raise ValidationError("allreduce needs at least one device")
    servers = {cluster.server_of(d) for d in devices}
    r = len(set(devices))
    if r == 1:
        return 0.0
    ln = link(cluster, same_server=len(servers) == 1)
    return 2.0 * (r - 1) / r * size / ln.bandwidth + 2.0 * (r - 1) * ln.latency


def allreduce_time_counts(size: float, counts: tuple[int, ...], cluster: ClusterSpec) -> float:
    """Same as :func:`allreduce_time` for a device set given as per-server counts."""
    r = sum(counts)
    if r <= 1:
        return 0.0
    spanned = sum(1 for c in counts if c)
    ln = link(cluster, same_server=spanned == 1)
    return 2.0 * (r - 1) / r * size / ln.bandwidth + 2.0 * (r - 1) * ln.latency


def splitconcat_time(size: float, src: Iterable[int], dst: Iterable[int],
                     cluster: ClusterSpec) -> float:
    """Time to move ``size`` bytes of activations from ``src`` GPUs to ``dst`` GPUs.

    The payload is cut into ``|src| * |dst|`` equal flows.  Flows that share a
    (source server, destination server) link are summed, and the slowest
    aggregated link bounds the transfer.  A flow from a GPU to itself is free.
    """
    src, dst = sorted(set(src)), sorted(set(dst))
    if not src or not dst:
        raise ValidationError("split-concat needs non-empty source and destination sets")
    flow = size / (len(src) * len(dst))
    per_link: Counter = Counter()
    for a in src:
        sa = cluster.server_of(a)
        for b in dst:
            sb = cluster.server_of(b)
            if a == b:
                continue
            per_link[(sa, sb)] += flow
    return _slowest(per_link, cluster)


def splitconcat_time_counts(size: float, src: tuple[int, ...], dst: tuple[int, ...],
                            cluster: ClusterSpec) -> float:
    """Split-concat over per-server counts of disjoint source/destination sets."""
    n_src, n_dst = sum(src), sum(dst)
    flow = size / (n_src * n_dst)
    per_link: Counter = Counter()
    for sa, ca in enumerate(src):
        if not ca:
            continue
        for sb, cb in enumerate(dst):
            if cb:
                per_link[(sa, sb)] += flow * ca * cb
    return _slowest(per_link, cluster)


def _slowest(per_link: Counter, cluster: ClusterSpec) -> float:
    worst = 0.0
    for (sa, sb), nbytes in per_link.items():
        ln = link(cluster, same_server=sa == sb)
        worst = max(worst, nbytes / ln.bandwidth + ln.latency)
    return worst

"""Timeline exports: per-block CSV and an SVG Gantt chart."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional
from xml.sax.saxutils import escape

from .model import US, StageCostSequence, ValidationError
from .simulator import Timeline

KINDS = ("forward", "backward", "comm", "allreduce")
COLORS = {"forward": "#4c78a8", "backward": "#f58518", "comm": "#9d9d9d", "allreduce": "#54a24b"}


@dataclass(frozen=True)
class Row:
    stage: int
    micro_batch: Optional[int]
    kind: str
    start: float
    end: float


def timeline_rows(tl: Timeline, seq: Optional[StageCostSequence] = None) -> list[Row]:
    """Flatten a timeline into rows ordered by stage then start time.

    With ``seq`` given, communication stages are tagged ``comm`` and each
    stage with a non-zero AllReduce gets one trailing ``allreduce`` row.
    """
    if seq is not None and len(seq) != tl.S:
        raise ValidationError("sequence and timeline disagree on the number of stages")
    rows = []
    for x in range(tl.S):
        comm = seq is not None and not seq[x].is_compute
        for b in tl.stage_blocks(x):
            rows.append(Row(x, b.micro_batch, "comm" if comm else b.kind, b.start, b.end))
        if seq is not None and seq[x].allreduce_time > 0:
            t = float(tl.b_end[-1, x])
            rows.append(Row(x, None, "allreduce", t, t + seq[x].allreduce_time))
    return rows


def timeline_csv(tl: Timeline, seq: Optional[StageCostSequence] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "micro_batch", "kind", "start_us", "end_us"])
    for r in timeline_rows(tl, seq):
        mb = "" if r.micro_batch is None else r.micro_batch
        w.writerow([r.stage, mb, r.kind, f"{r.start / US:.6f}", f"{r.end / US:.6f}"])
    return buf.getvalue()


def gantt_svg(tl: Timeline, seq: Optional[StageCostSequence] = None,
              us_per_px: Optional[float] = None, row_height: int = 22,
              title: str = "") -> str:
    """Render one row per stage, stage 0 at the bottom.

    ``us_per_px`` fixes the horizontal scale; by default the chart is about
    1000 px wide.
    """
    rows = timeline_rows(tl, seq)
    end_us = max((r.end for r in rows), default=0.0) / US
    if us_per_px is None:
        us_per_px = max(end_us / 1000.0, 1e-9)
    if us_per_px <= 0:
        raise ValidationError("us_per_px must be > 0")
    left, top, pad = 70, 28 if title else 8, 8
    width = left + end_us / us_per_px + pad
    height = top + tl.S * row_height + 30
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1f}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        "<style>" + "".join(f".{k}{{fill:{c}}}" for k, c in COLORS.items())
        + "rect{stroke:#fff;stroke-width:0.5}</style>",
    ]
    if title:
        out.append(f'<text x="{left}" y="18">{escape(title)}</text>')
    for x in range(tl.S):
        y = top + (tl.S - 1 - x) * row_height
        out.append(f'<text x="4" y="{y + row_height * 0.7:.1f}">stage {x}</text>')
    for r in rows:
        y = top + (tl.S - 1 - r.stage) * row_height
        x0 = left + r.start / US / us_per_px
        w = (r.end - r.start) / US / us_per_px
        label = r.kind if r.micro_batch is None else f"{r.kind} {r.micro_batch}"
        out.append(
            f'<rect class="{r.kind}" x="{x0:.2f}" y="{y + 2}" width="{w:.2f}" '
            f'height="{row_height - 4}"><title>{label}</title></rect>'
        )
    axis_y = top + tl.S * row_height + 14
    out.append(f'<text x="{left}" y="{axis_y}">0 us</text>')
    out.append(f'<text x="{left + end_us / us_per_px:.1f}" y="{axis_y}" '
               f'text-anchor="end">{end_us:.6g} us</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

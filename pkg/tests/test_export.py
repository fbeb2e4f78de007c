import csv
import io
import xml.etree.ElementTree as ET

from pipeplan.export import gantt_svg, timeline_csv, timeline_rows
from pipeplan.model import StageCost
from pipeplan.simulator import dapple_schedule

SEQ = (StageCost("compute", 1e-3, 2e-3, allreduce_time=5e-4),
       StageCost("communication", 1e-4, 1e-4),
       StageCost("compute", 1e-3, 2e-3))


def test_csv_columns_and_kinds():
    tl = dapple_schedule(SEQ, 3, (2, 2, 1))
    rows = list(csv.DictReader(io.StringIO(timeline_csv(tl, SEQ))))
    assert list(rows[0]) == ["stage", "micro_batch", "kind", "start_us", "end_us"]
    kinds = {r["kind"] for r in rows}
    assert kinds == {"forward", "backward", "comm", "allreduce"}
    assert len(rows) == 2 * 3 * 3 + 1
    first = rows[0]
    assert float(first["end_us"]) - float(first["start_us"]) == 1000.0


def test_rows_without_sequence_are_plain():
    tl = dapple_schedule(SEQ, 2, (2, 2, 1))
    assert {r.kind for r in timeline_rows(tl)} == {"forward", "backward"}


def test_svg_is_well_formed_and_scaled():
    tl = dapple_schedule(SEQ, 2, (2, 2, 1))
    svg = gantt_svg(tl, SEQ, us_per_px=10.0, title="demo")
    root = ET.fromstring(svg)
    rects = root.findall("{http://www.w3.org/2000/svg}rect")
    assert len(rects) == 2 * 2 * 3 + 1
    assert {r.get("class") for r in rects} == {"forward", "backward", "comm", "allreduce"}
    # forward block on stage 0 is 1000 us wide, i.e. 100 px at 10 us/px
    widths = {float(r.get("width")) for r in rects if r.get("class") == "forward"}
    assert 100.0 in widths

"""Write a timeline CSV and an SVG Gantt chart for a small planned pipeline."""

import sys
from pathlib import Path

from pipeplan import build_stage_sequence, dapple_schedule, plan
from pipeplan.export import gantt_svg, timeline_csv
from pipeplan.model import ClusterSpec, ModelProfile

out = Path(sys.argv[1] if len(sys.argv) > 1 else ".")
profile = ModelProfile.from_arrays([1e-3, 3e-3, 1e-3, 2e-3], [2e-3, 6e-3, 2e-3, 4e-3],
                                   [4e6] * 4, [2e8] * 4)
cluster = ClusterSpec((2, 2), 100e9, 5e9, 1e-6, 1e-5)
best = plan(profile, cluster, 6)
seq = build_stage_sequence(best, profile, cluster)
tl = dapple_schedule(seq, best.micro_batches, best.phi)
(out / "timeline.csv").write_text(timeline_csv(tl, seq))
(out / "timeline.svg").write_text(gantt_svg(tl, seq, us_per_px=20, title="demo plan"))
print(f"wrote {out / 'timeline.csv'} and {out / 'timeline.svg'}")

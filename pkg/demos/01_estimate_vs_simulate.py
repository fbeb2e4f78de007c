"""Closed-form estimate next to the exact block-level simulation.

A balanced pipeline is predicted exactly.  A pipeline with a heavy middle
stage shows where the estimate anchors its steady phase.
"""

from pipeplan import batch_latency, dapple_schedule, estimate_latency, optimize_phi
from pipeplan.model import compute_stages


def show(title, fwd, bwd, M):
    seq = compute_stages(fwd, bwd)
    est = estimate_latency(seq, M)
    phi, sim = optimize_phi(seq, M)
    print(f"{title}: M={M}")
    print(f"  warmup {est.warmup:g} + steady {est.steady:g} + ending {est.ending:g}"
          f" = {est.total:g}  (pivot stage {est.pivot})")
    print(f"  simulated {sim:g} with phi={phi}")


show("balanced, 4 stages", [1] * 4, [2] * 4, 7)
show("heavy middle stage", [1, 3, 1], [2, 6, 2], 4)

# with phi fixed to one injection per stage the pipeline degenerates to
# running micro-batches one after another
seq = compute_stages([1] * 4, [2] * 4)
print("phi all ones:", batch_latency(dapple_schedule(seq, 7, [1, 1, 1, 1]), seq))

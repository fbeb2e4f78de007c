"""Early-backward vs all-forwards-first on a 2-stage pipeline.

Latency is the same here, but the number of live activations differs: it
stays at phi for the early-backward schedule and grows with M otherwise.
"""

from pipeplan.harness import gpipe_comparison, schedule_table, straight_pipeline

seq = straight_pipeline([1.0, 1.0])
print(schedule_table(gpipe_comparison(seq, [2, 4, 8, 16])))
print()
print("with recomputation:")
print(schedule_table(gpipe_comparison(seq, [2, 16], recompute=True)))

"""Two partitioning rules of thumb, checked with the simulator.

Fewer, fatter stages beat many thin ones at equal work.  A slightly heavier
bottom stage helps the early-backward schedule while M is small, and stops
helping once the heaviest stage's own work dominates.
"""

from pipeplan.harness import insight_fewer_stages, insight_uneven

for m2 in (2, 4, 8):
    print(insight_fewer_stages(16.0, 8 * m2).to_text())
    print()

print("M   8:7:6(dapple)  1:1:1(dapple)  8:7:6(gpipe)  1:1:1(gpipe)")
for M in range(2, 17):
    v = insight_uneven(M).values
    print(f"{M:<3} {v['dapple_uneven']:>13.3f}  {v['dapple_even']:>13.3f}  "
          f"{v['gpipe_uneven']:>12.3f}  {v['gpipe_even']:>12.3f}")

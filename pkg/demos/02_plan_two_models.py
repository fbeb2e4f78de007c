"""Plan two synthetic models and print the chosen layouts.

The transformer-like model has heavy, evenly spread weights, so gradient
sync wants to stay inside a server.  The convnet-like model keeps most
weights in its last layer, which ends up on a single GPU.
"""

from pathlib import Path

from pipeplan import load_cluster, load_profile, plan
from pipeplan.cli import plan_summary

DATA = Path(__file__).parent / "data"

cases = [
    ("bert_like_profile.json", "two_server_cluster.json"),
    ("vgg_like_profile.json", "flat_slow_cluster.json"),
]
for prof_name, cl_name in cases:
    profile = load_profile((DATA / prof_name).read_bytes())
    cluster = load_cluster((DATA / cl_name).read_bytes())
    best = plan(profile, cluster, 16)
    print(f"== {prof_name} on {cl_name}")
    print(plan_summary(best, profile))
    print()

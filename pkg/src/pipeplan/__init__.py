"""Hybrid pipeline/data parallel planning: cost model, latency estimator,
schedule simulator and a placement-aware planner."""

from .costmodel import allreduce_time, splitconcat_time
from .estimator import (LatencyBreakdown, build_stage_sequence, compute_acr, estimate_latency,
                        select_pivot)
from .harness import (RankingReport, gpipe_comparison, insight_fewer_stages, insight_uneven,
                      ranking_experiment)
from .model import (ClusterSpec, LayerProfile, ModelProfile, PipelinePlan, ProfileParseError,
                    Stage, StageCost, ValidationError, aggregate_stage, compute_stages,
                    load_cluster, load_profile)
from .planner import (InfeasiblePlanError, Planner, PlannerOptions, brute_force_plan,
                      enumerate_placements, plan, policy_expressible)
from .simulator import (DAPPLE, GPIPE, Timeline, batch_latency, dapple_schedule,
                        gpipe_schedule, optimize_phi, peak_activations, preset_phi)

__version__ = "0.1.0"

"""Command-line driver: ``pipeplan {plan,estimate,simulate,validate,gantt}``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from . import harness
from .estimator import build_stage_sequence, compute_acr, estimate_latency
from .export import gantt_svg, timeline_csv
from .model import (US, ModelProfile, PipelinePlan, ProfileParseError, ValidationError,
                    load_cluster, load_profile)
from .planner import InfeasiblePlanError, PlannerOptions, Planner
from .simulator import (DAPPLE, GPIPE, apply_recompute, batch_latency, dapple_schedule,
                        expand_phi, gpipe_schedule, optimize_phi, peak_activations)


class UsageError(Exception):
    """Bad flag combination or input file; reported with exit status 2."""


@dataclass
class RunConfig:
    subcommand: str
    profile: Optional[str] = None
    cluster: Optional[str] = None
    plan: Optional[str] = None
    gbs: Optional[int] = None
    micro_batch_size: Optional[int] = None
    micro_batches: Optional[int] = None
    phi: Optional[tuple[int, ...]] = None
    policy: str = "search"
    schedule: str = DAPPLE
    recompute: bool = False
    seed: int = 0
    output: str = "-"
    format: Optional[str] = None
    pairs: int = 100_000
    max_error_rate: float = 0.001
    fwd_fraction: float = 1 / 3
    csv_log: Optional[str] = None
    us_per_px: Optional[float] = None
    beam: Optional[int] = 4

    def resolve_M(self, fallback: Optional[int] = None) -> int:
        """Micro-batch count: explicit, else global batch / micro-batch size."""
        if self.micro_batches is not None:
            M = self.micro_batches
        elif self.gbs is not None:
            mbs = self.micro_batch_size or 1
            if self.gbs % mbs:
                raise UsageError(f"--gbs {self.gbs} is not divisible by --micro-batch-size {mbs}")
            M = self.gbs // mbs
        elif fallback is not None:
            M = fallback
        else:
            raise UsageError("give --micro-batches or --gbs")
        if M < 1:
            raise UsageError("number of micro-batches must be >= 1")
        return M


def _phi_arg(text: str) -> tuple[int, ...]:
    try:
        phi = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"phi must be comma-separated integers, got {text!r}")
    if not phi:
        raise argparse.ArgumentTypeError("phi must not be empty")
    return phi


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", help="model profile JSON")
    common.add_argument("--cluster", help="cluster JSON")
    common.add_argument("--plan", help="plan JSON written by 'plan'")
    common.add_argument("--gbs", type=_positive, help="global batch size")
    common.add_argument("--micro-batch-size", type=_positive,
                        help="samples per micro-batch; rescales profiled times")
    common.add_argument("--micro-batches", type=_positive, help="set M directly")
    common.add_argument("--phi", type=_phi_arg, help="injection vector, e.g. 5,3,1")
    common.add_argument("--policy", default="search", choices=["A", "B", "search"],
                        help="injection vector policy")
    common.add_argument("--schedule", default=DAPPLE, choices=[DAPPLE, GPIPE])
    common.add_argument("--recompute", action="store_true",
                        help="recompute activations in the backward pass")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--output", default="-", help="output path, '-' for stdout")
    common.add_argument("--format", choices=["json", "text", "csv", "svg"])
    common.add_argument("--beam", type=int, default=4, help="planner beam width (0 = unbounded)")

    p = argparse.ArgumentParser(prog="pipeplan", description="Pipeline planning toolkit.")
    sub = p.add_subparsers(dest="subcommand", required=True)
    sub.add_parser("plan", parents=[common], help="search for a hybrid plan")
    sub.add_parser("estimate", parents=[common], help="closed-form latency of a plan")
    sim = sub.add_parser("simulate", parents=[common], help="simulate a plan block by block")
    sim.add_argument("--us-per-px", type=float)
    val = sub.add_parser("validate", parents=[common], help="estimator ranking experiment")
    val.add_argument("--pairs", type=_positive, default=100_000)
    val.add_argument("--max-error-rate", type=float, default=0.001)
    val.add_argument("--fwd-fraction", type=float, default=1 / 3)
    val.add_argument("--csv-log", help="append the report to this CSV file")
    g = sub.add_parser("gantt", parents=[common], help="SVG Gantt chart of a plan")
    g.add_argument("--us-per-px", type=float)
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    fields = {k: v for k, v in vars(ns).items() if k in RunConfig.__dataclass_fields__}
    cfg = RunConfig(**fields)
    if cfg.beam is not None and cfg.beam <= 0:
        cfg.beam = None
    return cfg


# --- helpers -----------------------------------------------------------------

def _read(path: Optional[str], what: str):
    if not path:
        raise UsageError(f"--{what} is required")
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {what} file {path}: {exc.strerror}") from exc


def _profile(cfg: RunConfig) -> ModelProfile:
    profile = load_profile(_read(cfg.profile, "profile"))
    if cfg.micro_batch_size is not None:
        profile = scale_profile(profile, cfg.micro_batch_size)
    return profile


def scale_profile(profile: ModelProfile, micro_batch_size: int) -> ModelProfile:
    """Rescale per-sample quantities from the profiled batch size to a micro-batch."""
    k = micro_batch_size / profile.profile_batch_size
    layers = tuple(replace(l, fwd_time=l.fwd_time * k, bwd_time=l.bwd_time * k,
                           activation_bytes=round(l.activation_bytes * k))
                   for l in profile.layers)
    return ModelProfile(layers, micro_batch_size)


def _load_plan(cfg: RunConfig) -> PipelinePlan:
    try:
        return PipelinePlan.from_dict(json.loads(_read(cfg.plan, "plan")))
    except json.JSONDecodeError as exc:
        raise UsageError(f"plan file {cfg.plan}: invalid JSON: {exc.msg}") from exc


def _emit(cfg: RunConfig, text: str) -> None:
    if cfg.output == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    with open(cfg.output, "w") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def _plan_inline(cfg: RunConfig, profile, cluster, M) -> PipelinePlan:
    opts = PlannerOptions(phi_policy=cfg.policy, beam=cfg.beam)
    return Planner(profile, cluster, M, opts).best()


def _sequence(cfg: RunConfig, plan, profile, cluster):
    seq = build_stage_sequence(plan, profile, cluster)
    return apply_recompute(seq) if cfg.recompute else seq


def plan_summary(plan: PipelinePlan, profile: ModelProfile) -> str:
    seq_total = sum(l.fwd_time + l.bwd_time for l in profile.layers)
    lines = [f"stages: {plan.num_stages}",
             f"split points: {','.join(map(str, plan.split_points)) or '-'}"]
    for k, s in enumerate(plan.stages):
        gpus = ",".join(map(str, sorted(s.devices)))
        lines.append(f"  stage {k}: layers [{s.layer_lo}, {s.layer_hi}) replication "
                     f"{s.replication} gpus {gpus}")
    lines += [
        f"micro-batches: {plan.micro_batches}",
        f"phi: {','.join(map(str, plan.phi))}",
        f"pivot: {plan.pivot}",
        f"acr: {plan.acr:.4g}",
        f"estimated latency: {plan.est_latency / US:.3f} us",
    ]
    if plan.sim_latency:
        lines.append(f"simulated latency: {plan.sim_latency / US:.3f} us")
        speedup = plan.micro_batches * seq_total / plan.sim_latency
        lines.append(f"speedup vs sequential: {speedup:.3f}")
    return "\n".join(lines)


# --- subcommands -------------------------------------------------------------

def cmd_plan(cfg: RunConfig) -> int:
    profile = _profile(cfg)
    cluster = load_cluster(_read(cfg.cluster, "cluster"))
    M = cfg.resolve_M()
    plan = _plan_inline(cfg, profile, cluster, M)
    fmt = cfg.format or "json"
    if fmt not in ("json", "text"):
        raise UsageError("plan supports --format json or text")
    if fmt == "json":
        _emit(cfg, json.dumps(plan.to_dict(), indent=2))
        if cfg.output != "-":
            print(plan_summary(plan, profile))
    else:
        _emit(cfg, plan_summary(plan, profile))
    return 0


def cmd_estimate(cfg: RunConfig) -> int:
    profile = _profile(cfg)
    cluster = load_cluster(_read(cfg.cluster, "cluster"))
    plan = _load_plan(cfg)
    M = cfg.resolve_M(plan.micro_batches)
    plan = replace(plan, micro_batches=M, phi=())
    seq = _sequence(cfg, plan, profile, cluster)
    est = estimate_latency(seq, M)
    out = {"micro_batches": M, "pivot": est.pivot, "warmup_us": est.warmup / US,
           "steady_us": est.steady / US, "ending_us": est.ending / US,
           "total_us": est.total / US, "acr": compute_acr(seq)}
    if (cfg.format or "json") == "json":
        _emit(cfg, json.dumps(out, indent=2))
    else:
        _emit(cfg, harness.format_table(["field", "value"],
                                        [(k, f"{v:.6g}") for k, v in out.items()]))
    return 0


def _simulated(cfg: RunConfig):
    profile = _profile(cfg)
    cluster = load_cluster(_read(cfg.cluster, "cluster"))
    if cfg.plan:
        plan = _load_plan(cfg)
        M = cfg.resolve_M(plan.micro_batches)
    else:
        M = cfg.resolve_M()
        plan = _plan_inline(cfg, profile, cluster, M)
    seq = _sequence(cfg, replace(plan, micro_batches=M, phi=()), profile, cluster)
    if cfg.schedule == GPIPE:
        phi = (M,) * len(seq)
        tl = gpipe_schedule(seq, M)
    else:
        if cfg.phi is not None:
            phi = expand_phi(cfg.phi, plan.num_stages)
        elif plan.phi and M == plan.micro_batches and not cfg.recompute:
            phi = plan.phi
        else:
            phi, _ = optimize_phi(seq, M, cfg.policy)
        tl = dapple_schedule(seq, M, phi)
    return plan, seq, tl, phi, M


def cmd_simulate(cfg: RunConfig) -> int:
    plan, seq, tl, phi, M = _simulated(cfg)
    latency = batch_latency(tl, seq)
    peaks = peak_activations(tl)
    fmt = cfg.format or "text"
    if fmt == "csv":
        _emit(cfg, timeline_csv(tl, seq))
    elif fmt == "svg":
        _emit(cfg, gantt_svg(tl, seq, cfg.us_per_px))
    elif fmt == "json":
        _emit(cfg, json.dumps({"schedule": cfg.schedule, "micro_batches": M, "phi": list(phi),
                               "latency_us": latency / US, "peak_activations": peaks},
                              indent=2))
        return 0
    else:
        _emit(cfg, "\n".join([
            f"schedule: {cfg.schedule}",
            f"micro-batches: {M}",
            f"phi: {','.join(map(str, phi))}",
            f"batch latency: {latency / US:.3f} us",
            f"peak activations: {','.join(map(str, peaks))}",
        ]))
        return 0
    # timeline went to the output; the summary goes to stderr
    print(f"phi: {','.join(map(str, phi))}  batch latency: {latency / US:.3f} us  "
          f"peak activations: {','.join(map(str, peaks))}", file=sys.stderr)
    return 0


def cmd_gantt(cfg: RunConfig) -> int:
    plan, seq, tl, phi, M = _simulated(cfg)
    title = f"{cfg.schedule} M={M} phi={','.join(map(str, phi))}"
    _emit(cfg, gantt_svg(tl, seq, cfg.us_per_px, title=title))
    return 0


def cmd_validate(cfg: RunConfig) -> int:
    report = harness.ranking_experiment(n_pairs=cfg.pairs, seed=cfg.seed,
                                        phi=cfg.phi or (5, 3, 1),
                                        M=cfg.micro_batches or 16,
                                        fwd_fraction=cfg.fwd_fraction)
    if cfg.csv_log:
        report.append_csv(cfg.csv_log)
    _emit(cfg, report.to_json() if cfg.format == "json" else report.to_text())
    if report.error_rate > cfg.max_error_rate:
        print(f"error rate {report.error_rate:.6%} exceeds {cfg.max_error_rate:.6%}",
              file=sys.stderr)
        return 1
    return 0


COMMANDS = {"plan": cmd_plan, "estimate": cmd_estimate, "simulate": cmd_simulate,
            "validate": cmd_validate, "gantt": cmd_gantt}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    cfg = config_from_args(parser.parse_args(argv))
    try:
        return COMMANDS[cfg.subcommand](cfg)
    except (UsageError, ProfileParseError) as exc:
        print(f"pipeplan: error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, InfeasiblePlanError) as exc:
        print(f"pipeplan: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

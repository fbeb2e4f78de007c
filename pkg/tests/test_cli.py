import json

import pytest

from pipeplan.cli import main

LAYER = {"fwd_time_us": 100.0, "bwd_time_us": 200.0, "activation_bytes": 0, "param_bytes": 0}


@pytest.fixture
def files(tmp_path):
    prof = tmp_path / "profile.json"
    prof.write_text(json.dumps({"profile_batch_size": 1, "layers": [LAYER] * 4}))
    cl = tmp_path / "cluster.json"
    cl.write_text(json.dumps({"seps": [2, 2], "intra_bw_gbps": 100, "inter_bw_gbps": 100,
                              "intra_latency_us": 0, "inter_latency_us": 0}))
    return tmp_path, ["--profile", str(prof), "--cluster", str(cl)]


def test_plan_uniform_is_data_parallel(files, capsys):
    tmp, common = files
    assert main(["plan", *common, "--micro-batches", "4"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert len(d["stages"]) == 1 and d["stages"][0]["replication"] == 4


def test_plan_text_summary(files, capsys):
    tmp, common = files
    assert main(["plan", *common, "--gbs", "8", "--micro-batch-size", "2", "--format", "text"]) == 0
    out = capsys.readouterr().out
    assert "speedup vs sequential: 4.000" in out
    assert "micro-batches: 4" in out


def test_missing_profile_names_path(files, capsys):
    tmp, common = files
    missing = str(tmp / "nope.json")
    assert main(["plan", "--profile", missing, "--cluster", common[3], "--micro-batches", "2"]) != 0
    assert missing in capsys.readouterr().err


def test_gbs_must_divide(files, capsys):
    tmp, common = files
    assert main(["plan", *common, "--gbs", "7", "--micro-batch-size", "2"]) != 0


def test_simulate_roundtrip(files, capsys):
    tmp, common = files
    out = tmp / "plan.json"
    assert main(["plan", *common, "--micro-batches", "4", "--output", str(out)]) == 0
    capsys.readouterr()
    saved = json.loads(out.read_text())
    assert main(["simulate", *common, "--plan", str(out), "--format", "json"]) == 0
    sim = json.loads(capsys.readouterr().out)
    assert sim["latency_us"] == pytest.approx(saved["sim_latency_us"])


def _two_stage_plan(tmp):
    p = tmp / "two.json"
    p.write_text(json.dumps({"stages": [{"layers": [0, 2], "gpus": [0]},
                                        {"layers": [2, 4], "gpus": [1]}],
                             "micro_batches": 6}))
    return p


def test_simulate_gpipe_peaks_equal_m(files, capsys):
    tmp, common = files
    plan = _two_stage_plan(tmp)
    assert main(["simulate", *common, "--plan", str(plan), "--schedule", "gpipe",
                 "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["peak_activations"] == [6, 6, 6]


def test_simulate_phi_override_echoed(files, capsys):
    tmp, common = files
    plan = _two_stage_plan(tmp)
    assert main(["simulate", *common, "--plan", str(plan), "--phi", "3,1"]) == 0
    assert "phi: 3,3,1" in capsys.readouterr().out


def test_simulate_bad_phi(files, capsys):
    tmp, common = files
    plan = _two_stage_plan(tmp)
    assert main(["simulate", *common, "--plan", str(plan), "--phi", "1,3"]) != 0


def test_simulate_csv_and_gantt(files, capsys):
    tmp, common = files
    plan = _two_stage_plan(tmp)
    assert main(["simulate", *common, "--plan", str(plan), "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("stage,micro_batch,kind,start_us,end_us")
    svg = tmp / "g.svg"
    assert main(["gantt", *common, "--plan", str(plan), "--output", str(svg),
                 "--us-per-px", "5"]) == 0
    assert svg.read_text().startswith("<svg")


def test_estimate(files, capsys):
    tmp, common = files
    plan = _two_stage_plan(tmp)
    assert main(["estimate", *common, "--plan", str(plan)]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["total_us"] == pytest.approx(d["warmup_us"] + d["steady_us"] + d["ending_us"])


def test_validate_pairs_zero_is_argument_error():
    with pytest.raises(SystemExit) as exc:
        main(["validate", "--pairs", "0"])
    assert exc.value.code == 2


def test_validate_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        main(["validate", "--pairs", "5000", "--seed", "4", "--format", "json",
              "--output", str(out), "--max-error-rate", "1"])
    assert a.read_bytes() == b.read_bytes()


def test_validate_threshold_sets_exit_code(capsys):
    assert main(["validate", "--pairs", "5000", "--max-error-rate", "1"]) == 0
    assert main(["validate", "--pairs", "5000", "--max-error-rate", "0"]) == 1

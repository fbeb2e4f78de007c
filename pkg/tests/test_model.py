import io
import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pipeplan.model import (ClusterSpec, LayerProfile, ModelProfile, PipelinePlan,
                            ProfileParseError, Stage, ValidationError, aggregate_stage,
                            cluster_to_dict, dump_profile, load_cluster, load_profile)


def _profile_json(layers, batch=1):
    return json.dumps({"profile_batch_size": batch, "layers": layers})


def _layer(f, b, a=0, p=0):
    return {"fwd_time_us": f, "bwd_time_us": b, "activation_bytes": a, "param_bytes": p}


def test_load_two_layers():
    prof = load_profile(_profile_json([_layer(1000, 2000), _layer(2000, 4000)]))
    assert prof.num_layers == 2
    assert [l.fwd_time for l in prof.layers] == pytest.approx([1e-3, 2e-3])


def test_load_accepts_bytes_and_streams():
    text = _profile_json([_layer(1, 2)])
    assert load_profile(text.encode()).num_layers == 1
    assert load_profile(io.StringIO(text)).num_layers == 1


def test_negative_bwd_rejected():
    with pytest.raises(ValidationError):
        load_profile(_profile_json([_layer(1, -2)]))


def test_empty_layer_list_rejected():
    with pytest.raises(ValidationError, match="N"):
        load_profile(_profile_json([]))


def test_parse_error_has_position():
    with pytest.raises(ProfileParseError, match="line 1"):
        load_profile('{"layers": [')


def test_parse_error_names_field():
    bad = json.dumps({"profile_batch_size": 1, "layers": [{"fwd_time_us": 1}]})
    with pytest.raises(ProfileParseError, match="bwd_time_us"):
        load_profile(bad)


@given(st.lists(st.tuples(st.floats(0, 1e6), st.floats(0, 1e6),
                          st.integers(0, 2**40), st.integers(0, 2**40)),
                min_size=1, max_size=12),
       st.integers(1, 64))
def test_profile_roundtrip(rows, batch):
    prof = ModelProfile.from_arrays([r[0] * 1e-6 for r in rows], [r[1] * 1e-6 for r in rows],
                                    [r[2] for r in rows], [r[3] for r in rows], batch)
    back = load_profile(dump_profile(prof))
    assert back.profile_batch_size == batch
    for a, b in zip(prof.layers, back.layers):
        assert math.isclose(a.fwd_time, b.fwd_time, rel_tol=1e-15, abs_tol=1e-300)
        assert math.isclose(a.bwd_time, b.bwd_time, rel_tol=1e-15, abs_tol=1e-300)
        assert (a.activation_bytes, a.param_bytes) == (b.activation_bytes, b.param_bytes)


def test_cluster_roundtrip_and_units():
    data = {"seps": [8, 8], "intra_bw_gbps": 100, "inter_bw_gbps": 10,
            "intra_latency_us": 1, "inter_latency_us": 5, "per_gpu_memory_gb": 16}
    cl = load_cluster(json.dumps(data))
    assert cl.num_gpus == 16
    assert cl.intra_bw == 100e9
    assert cl.inter_latency == pytest.approx(5e-6)
    assert load_cluster(json.dumps(cluster_to_dict(cl))) == cl


def test_cluster_memory_defaults_to_unbounded():
    cl = load_cluster(json.dumps({"seps": [2], "intra_bw_gbps": 1, "inter_bw_gbps": 1}))
    assert math.isinf(cl.per_gpu_memory)


@pytest.mark.parametrize("kwargs", [
    {"seps": (0, 2)}, {"seps": ()}, {"intra_bw": 0}, {"inter_latency": -1},
])
def test_cluster_invariants(kwargs):
    base = dict(seps=(2, 2), intra_bw=1.0, inter_bw=1.0)
    base.update(kwargs)
    with pytest.raises(ValidationError):
        ClusterSpec(**base)


def test_server_of():
    cl = ClusterSpec((2, 3), 1.0, 1.0)
    assert [cl.server_of(g) for g in range(5)] == [0, 0, 1, 1, 1]
    with pytest.raises(ValidationError):
        cl.server_of(5)
    assert cl.server_counts([0, 3, 4]) == (1, 2)


def test_layer_indices_must_be_contiguous():
    with pytest.raises(ValidationError):
        ModelProfile((LayerProfile(1, 1.0, 1.0),))


def test_aggregate_sum():
    prof = ModelProfile.from_arrays([1, 3], [2, 6], [10, 20], [100, 200])
    c = aggregate_stage(prof, 0, 2, 1)
    assert (c.fwd, c.bwd, c.param_bytes, c.activation_out_bytes) == (4, 8, 300, 20)


def test_aggregate_replicated():
    prof = ModelProfile.from_arrays([1, 3], [2, 6], [10, 20], [100, 200])
    c = aggregate_stage(prof, 0, 2, 2)
    assert (c.fwd, c.bwd, c.param_bytes) == (2, 4, 300)


def test_aggregate_single_layer_is_identity():
    prof = ModelProfile.from_arrays([1, 3], [2, 6], [10, 20], [100, 200])
    c = aggregate_stage(prof, 0, 1)
    l0 = prof.layers[0]
    assert (c.fwd, c.bwd, c.activation_out_bytes, c.param_bytes) == (
        l0.fwd_time, l0.bwd_time, l0.activation_bytes, l0.param_bytes)


@pytest.mark.parametrize("lo,hi", [(1, 1), (-1, 1), (0, 3), (2, 1)])
def test_aggregate_bad_range(lo, hi):
    prof = ModelProfile.from_arrays([1, 3], [2, 6])
    with pytest.raises(ValidationError):
        aggregate_stage(prof, lo, hi)


small_ints = st.integers(0, 1000)


@given(st.lists(st.tuples(small_ints, small_ints, small_ints, small_ints), min_size=2, max_size=10),
       st.data())
def test_aggregate_additive(rows, data):
    prof = ModelProfile.from_arrays(*[[r[k] for r in rows] for k in range(4)])
    n = len(rows)
    a = data.draw(st.integers(0, n - 2))
    b = data.draw(st.integers(a + 1, n - 1))
    c = data.draw(st.integers(b + 1, n))
    whole, left, right = (aggregate_stage(prof, a, c), aggregate_stage(prof, a, b),
                          aggregate_stage(prof, b, c))
    assert whole.fwd == left.fwd + right.fwd
    assert whole.bwd == left.bwd + right.bwd
    assert whole.param_bytes == left.param_bytes + right.param_bytes
    assert whole.activation_out_bytes == right.activation_out_bytes


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=8), st.integers(1, 16))
def test_replication_scaling(fwd, r):
    prof = ModelProfile.from_arrays(fwd, fwd, None, [7] * len(fwd))
    one, many = aggregate_stage(prof, 0, len(fwd), 1), aggregate_stage(prof, 0, len(fwd), r)
    assert many.fwd == one.fwd / r
    assert many.param_bytes == one.param_bytes


def _two_stage_plan(**kw):
    return PipelinePlan((Stage(0, 1, frozenset({0})), Stage(1, 2, frozenset({1, 2}))), **kw)


def test_plan_validation():
    prof = ModelProfile.from_arrays([1, 1], [1, 1])
    cl = ClusterSpec((4,), 1.0, 1.0)
    _two_stage_plan().validate(prof, cl)
    _two_stage_plan(phi=(2, 2, 1), micro_batches=2).validate(prof, cl)
    with pytest.raises(ValidationError):
        _two_stage_plan(phi=(1, 2, 1), micro_batches=2).validate(prof, cl)
    overlap = PipelinePlan((Stage(0, 1, frozenset({0})), Stage(1, 2, frozenset({0}))))
    with pytest.raises(ValidationError):
        overlap.validate(prof, cl)
    gap = PipelinePlan((Stage(0, 1, frozenset({0})),))
    with pytest.raises(ValidationError):
        gap.validate(prof, cl)


def test_stage_invariants():
    with pytest.raises(ValidationError):
        Stage(1, 1, frozenset({0}))
    with pytest.raises(ValidationError):
        Stage(0, 1, frozenset())
    assert Stage(0, 1, frozenset({3, 4})).replication == 2


def test_plan_dict_roundtrip():
    p = _two_stage_plan(phi=(2, 2, 1), pivot=1, est_latency=1e-3, sim_latency=2e-3,
                        micro_batches=4, acr=0.5)
    d = json.loads(json.dumps(p.to_dict()))
    assert set(d) >= {"stages", "phi", "pivot", "est_latency_us", "sim_latency_us", "acr"}
    q = PipelinePlan.from_dict(d)
    assert q.stages == p.stages and q.phi == p.phi and q.micro_batches == 4
    assert q.sim_latency == pytest.approx(2e-3)

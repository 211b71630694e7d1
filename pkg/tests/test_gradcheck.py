import pytest

from errors import VerificationFailed
from gradcheck import BACKWARD_RULES, PRIMITIVE_TOL, PRIMITIVES, CheckResult, run_suite, verify


def test_primitive_gradients_pass():
    results = run_suite(instances=3, only=list(PRIMITIVES))
    assert [r.name for r in results] == list(PRIMITIVES)
    failed = [r.to_line() for r in results if not r.passed]
    assert not failed


@pytest.mark.parametrize("rule", ["relu", "matmul", "softmax"])
def test_injected_fault_is_detected(rule):
    results = run_suite(fault=rule, instances=2, only=[rule])
    assert len(results) == 1
    assert not results[0].passed
    with pytest.raises(VerificationFailed) as info:
        verify(results)
    assert info.value.failed == [rule]


def test_fault_in_one_rule_leaves_others_passing():
    results = run_suite(fault="relu", instances=2, only=["add", "mul"])
    verify(results)


@pytest.mark.parametrize("block", ["lxformer", "scformer", "gxformer", "sparse_conv", "etb_concat"])
def test_block_gradients_pass(block):
    (result,) = run_suite(instances=2, only=[block])
    assert result.kind == "block"
    assert result.passed, result.to_line()
    assert result.relative is not None


def test_oracles_agree_with_fast_paths():
    names = ["lxformer_dense", "gxformer_dense", "sparse_conv_dense", "fps_exhaustive", "knn_temporal_exhaustive",
             "group_exhaustive"]
    results = run_suite(oracle_instances=20, only=names)
    assert [r.name for r in results] == names
    assert [r.kind for r in results] == ["oracle"] * 6
    verify(results)


def test_unknown_fault_is_rejected():
    with pytest.raises(ValueError):
        run_suite(fault="conv3d")


def test_every_backward_rule_can_be_faulted():
    assert {"relu", "sparse_conv", "segment_sum", "layer_norm"} <= set(BACKWARD_RULES)


def test_result_line_and_verdict():
    result = CheckResult("relu", "primitive", 2e-6, PRIMITIVE_TOL, 10, relative=4e-3)
    assert result.passed
    assert result.to_line() == "PASS\tprimitive\trelu\tscaled_err=2.000e-06\trel_err=4.000e-03\ttol=1e-05\tn=10"
    oracle = CheckResult("fps_exhaustive", "oracle", 0.0, 0.0, 100)
    assert oracle.to_line() == "PASS\toracle\tfps_exhaustive\tmax_dev=0.000e+00\ttol=0e+00\tn=100"
    assert not CheckResult("relu", "primitive", 0.3, PRIMITIVE_TOL, 10).passed

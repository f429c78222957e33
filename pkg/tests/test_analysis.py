import numpy as np
import pytest

from moelab.analysis import (
    EvalResult,
    check_reference_rows,
    correlation_csv,
    cumulative_curve,
    evaluate,
    gain_profile,
    head_expert_correlation,
    hit_at_10,
    json_dump,
    layer_efficiency,
    mrr,
    peak_gain_position,
    profile_total,
    qwen_like_boundaries,
    stage_contributions,
    table1_csv,
    table1_row,
    thirds_boundaries,
)
from moelab.errors import DatasetError, DomainError


def test_metric_examples():
    assert hit_at_10([1, 5, 11, 20]) == 0.5
    assert mrr([1, 2, 4]) == pytest.approx(0.58333, abs=1e-5)
    assert hit_at_10([11, 12]) == 0.0
    r = EvalResult([1, 10, 11])
    assert r.hit_at_10 == pytest.approx(2 / 3)
    with pytest.raises(DomainError):
        mrr([0, 1])
    with pytest.raises(DomainError):
        hit_at_10([])


def test_efficiency_and_peaks():
    assert layer_efficiency(6.49, 32) == pytest.approx(0.2028, abs=1e-4)
    P = [[0, 1, 3, 3], [5, 0, 0, 0], [0, 0, 0, 2]]
    mean_peak, pct = peak_gain_position(P)
    assert mean_peak == pytest.approx((3 + 1 + 4) / 3)
    assert pct == pytest.approx(mean_peak / 4 * 100)
    with pytest.raises(DomainError):
        peak_gain_position([])


def test_cumulative_curve():
    prof = [0.1, -0.2, 0.7, 0.4]
    c = cumulative_curve(prof)
    assert c[-1] == profile_total(prof)
    assert np.allclose(np.diff([0.0] + c), prof)


def test_stage_shares():
    prof = [1.0, 0.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]
    sb = stage_contributions(prof, [(1, 1), (2, 3), (4, 10)])
    assert sb.shares == pytest.approx((10.0, 20.0, 70.0))
    assert sum(sb.shares) == pytest.approx(100.0)
    assert stage_contributions([-1.0, 0.5, 0.2]).shares is None
    with pytest.raises(DomainError):
        stage_contributions(prof, [(1, 3), (5, 10)])
    with pytest.raises(DomainError):
        stage_contributions(prof, [(1, 3), (4, 9)])


def test_boundaries():
    assert thirds_boundaries(8) == [(1, 3), (4, 5), (6, 8)]
    assert qwen_like_boundaries(24) == [(1, 13), (14, 19), (20, 24)]
    for L in range(3, 40):
        for b in (thirds_boundaries(L), qwen_like_boundaries(L)):
            assert b[0][0] == 1 and b[-1][1] == L
            assert all(x[1] + 1 == y[0] and x[0] <= x[1] for x, y in zip(b, b[1:]))


def test_reference_rows():
    checks = {c.model: c for c in check_reference_rows()}
    assert not checks["Qwen1.5-7B"].consistent
    assert checks["Qwen1.5-7B"].computed_pct == pytest.approx(84.625)
    assert all(c.consistent for m, c in checks.items() if m != "Qwen1.5-7B")
    assert checks["Qwen1.5-MoE"].computed_efficiency == pytest.approx(0.3067, abs=1e-4)


def test_evaluate_checks_vocabulary(shallow, dataset):
    weights, _ = shallow
    bad = [p.__class__(p.tokens, p.subject_pos, p.query_pos, 999, p.relation) for p in dataset.prompts[:2]]
    with pytest.raises(DatasetError):
        evaluate(weights, bad)
    with pytest.raises(DatasetError):
        evaluate(weights, [])


def test_table1_from_shallow(shallow, dataset):
    weights, _ = shallow
    prompts = dataset.prompts_for(dataset.relation_names()[0])
    prof = gain_profile(weights, prompts)
    row = table1_row("shallow", evaluate(weights, prompts), prof)
    assert row.layer_efficiency == pytest.approx(prof.total_ffn / 4)
    lines = table1_csv([row]).strip().split("\n")
    assert lines[0].startswith("model,hit_at_10,mrr")
    assert len(lines) == 2
    assert prof.curve_csv().split("\n")[0] == "layer,ffn_gain,attn_gain,cumulative"


def test_correlation_finds_copy_head_pair(deep, dataset):
    weights, plan = deep
    for name in dataset.relation_names()[:2]:
        rep = head_expert_correlation(weights, dataset.prompts_for(name), relation=name)
        best = rep.best_pair()
        assert best.head == plan.copy_head
        assert best.expert == plan.refinement_experts()[name]
        assert best.result.r > 0.9 and best.result.p < 1e-6
        assert rep.top_experts[0][1] == 1.0
        csv_lines = correlation_csv([rep]).strip().split("\n")
        assert csv_lines[0] == "head_layer,head,expert_layer,expert,r,p,n"


def test_correlation_is_permutation_invariant(shallow, dataset):
    weights, plan = shallow
    ps = dataset.prompts_for(dataset.relation_names()[2])
    heads = [plan.copy_head, (0, 1)]
    a = head_expert_correlation(weights, ps, heads=heads)
    b = head_expert_correlation(weights, ps[::-1], heads=heads)
    for x, y in zip(a.pairs, b.pairs):
        assert (x.result is None) == (y.result is None)
        if x.result is not None:
            assert x.result.r == pytest.approx(y.result.r, abs=1e-12)


def test_json_dump_nan():
    assert json_dump({"b": float("nan"), "a": 1}) == '{\n "a": 1,\n "b": null\n}\n'

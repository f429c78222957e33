import numpy as np
import pytest

from moelab.core import finite_diff_gradient
from moelab.errors import DegenerateSeriesError, DomainError, SpecError
from moelab.interventions import (
    GateReplay,
    IGAttribution,
    LinearProbe,
    attribution_fraction,
    block_sweep,
    force_expert,
    ig_path,
    integrated_gradients,
    live_heads_upto,
    run_config,
    suppress_head,
)
from moelab.knowledge import PromptInstance
from moelab.model import InterventionSpec, forward, init_model

from conftest import small_config

PROMPT = PromptInstance((3, 7, 1, 12), 1, 3, 4, "r")


def test_run_config_default_matches_plain_eval(shallow, dataset):
    weights, _ = shallow
    assert run_config(weights, dataset, "default").mrr == 1.0
    with pytest.raises(SpecError):
        run_config(weights, dataset, "only_shared:3")


def test_block_sweep_baseline_and_csv(shallow, dataset):
    weights, plan = shallow
    name = dataset.relation_names()[0]
    data = dataset.prompts_for(name)
    res = block_sweep(weights, data, [plan.refinement_experts()[name]], sizes=(1, 5), relation=name)
    assert [r.n_blocked for r in res.rows] == [0, 1, 5]
    assert res.rows[0].result.mrr == 1.0
    assert res.rows[2].blocked == res.rows[1].blocked
    assert res.relative_drop(1) > 0.5
    lines = res.to_csv().strip().split("\n")
    assert lines[0] == "relation,n_blocked,hit_at_10,mrr" and len(lines) == 4
    with pytest.raises(DomainError):
        block_sweep(weights, data, [], sizes=(-1,))


def test_suppression_and_forcing(shallow, dataset):
    weights, plan = shallow
    name = dataset.relation_names()[1]
    data = dataset.prompts_for(name)
    expert = plan.refinement_experts()[name]
    rep = suppress_head(weights, data, plan.copy_head, watch=[expert])
    b, a = rep.watched[expert]
    assert (a - b) / b < -0.5
    assert rep.suppressed.mrr < rep.baseline.mrr
    spec = InterventionSpec(suppressed_heads=frozenset([plan.copy_head]))
    assert force_expert(weights, data, expert, alongside=spec).mrr == pytest.approx(1.0)
    with pytest.raises(SpecError):
        force_expert(weights, data, expert, alongside=InterventionSpec(blocked_experts=frozenset([expert])))


def test_linear_probe_is_exact_at_one_step(rng):
    w = rng.normal(size=16)
    x = rng.normal(size=16)
    attr, delta = integrated_gradients(LinearProbe(w), x, steps=1)
    assert np.allclose(attr, w * x)
    assert attr.sum() == pytest.approx(delta)


def test_ig_zero_when_input_is_baseline(tiny):
    tr = forward(tiny, PROMPT.tokens)
    rp = GateReplay(tiny, tr, (0, 1), (2, 0), 3)
    attr, delta = integrated_gradients(rp, rp.x, baseline=rp.x, steps=8)
    assert not attr.any() and delta == 0.0


@pytest.mark.parametrize("act", ["relu", "gelu"])
def test_replay_matches_forward_and_fd(act, rng):
    w = init_model(small_config(activation=act, seed=3))
    tr = forward(w, PROMPT.tokens)
    for src, sink in [((0, 0), (1, 2)), ((1, 1), (2, 4)), ((0, 1), (2, 0))]:
        rp = GateReplay(w, tr, src, sink, 3)
        assert rp.value(rp.x) == pytest.approx(tr.layers[sink[0]].gates[3].probs[sink[1]], abs=1e-12)
        v = rp.x + 0.1 * rng.normal(size=rp.x.shape)
        g = rp.gradient(v)
        fd = finite_diff_gradient(rp.value, v, 1e-5)
        assert np.abs(g - fd).max() <= 1e-6 * max(1.0, np.abs(fd).max())


def test_ig_gap_shrinks_with_steps(tiny):
    gaps = [ig_path(tiny, PROMPT, (0, 0), (2, 1), steps=m).gap for m in (4, 8, 16, 32)]
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))
    fd = ig_path(tiny, PROMPT, (0, 0), (2, 1), steps=8, gradient="fd", h=1e-5)
    an = ig_path(tiny, PROMPT, (0, 0), (2, 1), steps=8)
    assert np.allclose(fd.attributions, an.attributions, atol=1e-7)


def test_ig_error_cases(tiny):
    with pytest.raises(DomainError):
        ig_path(tiny, PROMPT, (0, 9), (2, 1))
    with pytest.raises(DomainError):
        ig_path(tiny, PROMPT, (0, 0), (2, 1), steps=0)
    with pytest.raises(DomainError):
        ig_path(tiny, PROMPT, (0, 0), (2, 1), gradient="magic")


def _fake(src, prompt, vals):
    a = np.asarray(vals, dtype=float)
    return IGAttribution(src, (1, 0), a, float(a.sum()), float(a.sum()), 0.0, 4, prompt)


def test_attribution_fraction():
    runs = [_fake((0, 0), 0, [1, -1]), _fake((0, 1), 0, [2, 0]),
            _fake((0, 0), 1, [3, 0]), _fake((0, 1), 1, [0, 1])]
    assert attribution_fraction(runs, [(0, 0), (0, 1)]) == 1.0
    assert attribution_fraction(runs, []) == 0.0
    assert attribution_fraction(runs, [(0, 0)]) == pytest.approx((0.5 + 0.75) / 2)
    with pytest.raises(DegenerateSeriesError):
        attribution_fraction([_fake((0, 0), 0, [0, 0])], [(0, 0)])
    with pytest.raises(DegenerateSeriesError):
        attribution_fraction([], [])


def test_live_heads(deep, tiny):
    weights, plan = deep
    heads = live_heads_upto(weights, 5)
    assert plan.copy_head in heads
    assert len(live_heads_upto(tiny, 1)) == 4

"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import itertools
import struct

import numpy as np
import pytest
from scipy.special import log_softmax as sp_log_softmax

from moelab.analysis import (
    check_reference_rows,
    cumulative_curve,
    head_expert_correlation,
    hit_at_10,
    layer_efficiency,
    mrr,
    profile_total,
    relative_position,
    stage_contributions,
)
from moelab.attribution import (
    attribute_relation,
    expert_neuron_importance,
    ffn_neuron_importance,
    head_importance,
    neuron_overlap,
)
from moelab.cli import main
from moelab.core import pearson
from moelab.errors import FormatError, MoELabError
from moelab.interventions import LinearProbe, block_sweep, causal_suite, integrated_gradients, run_config
from moelab.model import SHARED, forward, init_model
from moelab.moefile import decode, encode

from conftest import small_config


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def reports(deep, shallow, dataset):
    out = {}
    for name, (weights, _) in (("deep", deep), ("shallow", shallow)):
        out[name] = {r: attribute_relation(weights, dataset, r, topk=100) for r in dataset.relation_names()}
    return out


def test_1_table1_arithmetic(capsys):
    effs = [abs(layer_efficiency(7.36, 24) - 0.307), abs(layer_efficiency(6.49, 32) - 0.203)]
    cases = [(24.82, 32, 77.6), (20.36, 24, 84.8), (13.53, 16, 84.6), (26.64, 32, 83.2), (26.66, 32, 83.3)]
    pcts = [abs(relative_position(p, L) - printed) for p, L, printed in cases]
    checks = {c.model: c for c in check_reference_rows()}
    qwen = checks["Qwen1.5-7B"]
    flagged = not qwen.consistent and abs(qwen.computed_pct - 84.6) < 0.1 and qwen.printed_pct == 90.2
    others = all(c.consistent for m, c in checks.items() if m != "Qwen1.5-7B")
    ok = max(effs) <= 5e-3 and max(pcts) <= 0.1 and flagged and others
    verdict(capsys, 1, ok, f"max eff err {max(effs):.2e}, max pct err {max(pcts):.3f}, "
                           f"Qwen1.5-7B flagged={flagged} ({qwen.computed_pct:.2f}% vs {qwen.printed_pct}%)")


def test_2_attribution_oracle(capsys):
    rng = np.random.default_rng(7)
    worst, n, zeros_ok = 0.0, 0, True
    models = [init_model(small_config(seed=s, activation=a)) for s, a in [(1, "relu"), (2, "gelu"), (3, "relu")]]
    while n < 200:
        w = models[n % 3]
        U = w.unembedding
        toks = tuple(int(t) for t in rng.integers(0, 23, size=int(rng.integers(2, 6))))
        tr = forward(w, toks)
        pos = int(rng.integers(0, len(toks)))
        l = int(rng.integers(0, 3))
        t = int(rng.integers(0, 23))
        lt = tr.layers[l]
        g = lt.gates[pos]
        kind = n % 3
        if kind == 0:
            h = int(rng.integers(0, 2))
            got = head_importance(w, tr, l, h, t, pos)
            ref = sp_log_softmax((lt.h_in[pos] + lt.head_out[h, pos]) @ U)[t] - sp_log_softmax(lt.h_in[pos] @ U)[t]
        else:
            j = SHARED if kind == 1 and rng.random() < 0.5 else int(rng.integers(0, 5))
            lw = w.layers[l]
            W1, b1, W2 = (lw.shared_w1, lw.shared_b1, lw.shared_w2) if j == SHARED else (lw.w1[j], lw.b1[j], lw.w2[j])
            pre = W1 @ lt.u[pos] + b1
            a = np.maximum(pre, 0) if w.config.activation == "relu" else \
                0.5 * pre * (1 + np.tanh(np.sqrt(2 / np.pi) * (pre + 0.044715 * pre ** 3)))
            nn = int(rng.integers(0, W2.shape[1]))
            gw = g.shared_weight if j == SHARED else dict(g.active).get(j, 0.0)
            if kind == 1:
                scale = gw if j == SHARED else 1.0
                got = ffn_neuron_importance(w, tr, l, j, nn, t, pos)
            else:
                scale = gw
                got = expert_neuron_importance(w, tr, l, j, nn, t, pos)
                if gw == 0.0:
                    zeros_ok &= got == 0.0
            v = scale * a[nn] * W2[:, nn]
            ref = 0.0 if not v.any() else \
                sp_log_softmax((lt.u[pos] + v) @ U)[t] - sp_log_softmax(lt.u[pos] @ U)[t]
            if not v.any():
                zeros_ok &= got == 0.0
        worst = max(worst, abs(got - ref))
        n += 1
    ok = worst <= 1e-12 and zeros_ok
    verdict(capsys, 2, ok, f"{n} triples, max |diff| {worst:.2e}, exact zeros={zeros_ok}")


def test_3_planted_localization(capsys, deep, dataset, reports):
    weights, plan = deep
    reps = reports["deep"]
    hits = sum(reps[r].membership.top(1) == [plan.refinement_experts()[r]] for r in reps)
    frac = hits / len(reps)
    overlaps = [neuron_overlap(reps[a].ranked, reps[b].ranked) for a, b in itertools.combinations(reps, 2)]
    cfg = weights.config
    shape_ok = cfg.num_layers == 8 and cfg.num_experts >= 16 and len(reps) >= 5 and \
        all(len(dataset.prompts_for(r)) >= 20 for r in reps)
    ok = shape_ok and frac >= 0.95 and max(overlaps) < 0.05
    verdict(capsys, 3, ok, f"refinement expert top-1 for {frac:.0%} of relations, "
                           f"max cross-relation overlap {max(overlaps):.3f}")


def test_4_routing_ablation(capsys, deep, dataset):
    weights, _ = deep
    m = {mode: run_config(weights, dataset, mode).mrr
         for mode in ("default", "top_zero", "only_shared", "shared_plus_top:1")}
    ok = m["default"] == 1.0 and m["top_zero"] <= 0.05 and m["only_shared"] <= 0.1 and m["shared_plus_top:1"] >= 0.9
    ok &= m["default"] >= m["shared_plus_top:1"] > m["only_shared"] > m["top_zero"]
    verdict(capsys, 4, ok, ", ".join(f"{k}={v:.4f}" for k, v in m.items()))


def _sweep_mrr(weights, dataset, reps, sizes):
    per = []
    for r, rep in reps.items():
        res = block_sweep(weights, dataset.prompts_for(r), rep.ranked_experts(), sizes, relation=r)
        per.append([row.result.mrr for row in res.rows])
    return np.mean(per, axis=0)


def test_5_robustness_contrast(capsys, deep, shallow, dataset, reports):
    sizes = (1, 5, 10)
    d = _sweep_mrr(deep[0], dataset, reports["deep"], sizes)
    s = _sweep_mrr(shallow[0], dataset, reports["shallow"], sizes)
    drop_d = (d[0] - d[1]) / d[0]
    drop_s = (s[0] - s[1]) / s[0]
    dominates = all(d[i] / d[0] >= s[i] / s[0] for i in range(1, len(sizes) + 1))
    ok = drop_d <= 0.10 and drop_s >= 0.50 and dominates
    verdict(capsys, 5, ok, f"n=1 drop deep {drop_d:.1%} shallow {drop_s:.1%}; relative MRR deep "
                           f"{np.round(d / d[0], 3).tolist()} shallow {np.round(s / s[0], 3).tolist()}")


def test_6_causal_suite(capsys, deep, dataset):
    weights, plan = deep
    gate_drops, mrr_drops, recov, gaps, fracs = [], [], [], [], []
    for r in dataset.relation_names():
        b = causal_suite(weights, dataset.prompts_for(r), plan.copy_head, plan.refinement_experts()[r],
                         ig_steps=256)
        gate_drops.append(-b.expert_gate_change)
        mrr_drops.append(-b.suppression.mrr_delta / b.suppression.baseline.mrr)
        recov.append(b.recovery)
        gaps.append(max(x.relative_gap for x in b.ig if x.source == plan.copy_head))
        fracs.append(b.fraction)
    rng = np.random.default_rng(3)
    w, x = rng.normal(size=128), rng.normal(size=128)
    attr, delta = integrated_gradients(LinearProbe(w), x, steps=1)
    linear_ok = np.allclose(attr, w * x, rtol=0, atol=1e-12) and abs(attr.sum() - delta) <= 1e-12
    ok = min(gate_drops) >= 0.5 and min(mrr_drops) >= 0.25 and min(recov) >= 0.8 and max(gaps) <= 0.01 \
        and linear_ok and min(fracs) >= 0.25
    verdict(capsys, 6, ok, f"min gate drop {min(gate_drops):.1%}, min MRR drop {min(mrr_drops):.1%}, "
                           f"min recovery {min(recov):.3f}, max IG gap {max(gaps):.2e}, linear exact={linear_ok}, "
                           f"min copy-head fraction {min(fracs):.3f}")


def test_7_correlation_suite(capsys, deep, dataset):
    x = np.arange(10.0)
    ident = max(abs(pearson(x, 2 * x + 1).r - 1), abs(pearson(x, -3 * x).r + 1))
    hand = abs(pearson([1, 2, 3, 4], [1, 2, 3, 5]).r - 0.9827)
    weights, plan = deep
    wins, worst_p = 0, 0.0
    for r in dataset.relation_names():
        ps = dataset.prompts_for(r)
        rep = head_expert_correlation(weights, ps, relation=r)
        best = rep.best_pair()
        target = (plan.copy_head, plan.refinement_experts()[r])
        if best is not None and (best.head, best.expert) == target and best.result.n >= 20:
            wins += 1
            worst_p = max(worst_p, best.result.p)
    frac = wins / len(dataset.relation_names())
    ok = ident <= 1e-12 and hand <= 1e-4 and frac >= 0.9 and worst_p < 0.01
    verdict(capsys, 7, ok, f"identity err {ident:.1e}, 0.9827 err {hand:.1e}, "
                           f"copy/refinement pair max for {frac:.0%} of relations, max p {worst_p:.1e}")


def test_8_metric_formulas(capsys):
    exact = hit_at_10([1, 5, 11, 20]) == 0.5 and hit_at_10([11, 12]) == 0.0 and \
        mrr([1, 2, 4]) == (1 + 0.5 + 0.25) / 3 and mrr([1]) == 1.0 and hit_at_10([10]) == 1.0
    rng = np.random.default_rng(5)
    curve_err, share_err = 0.0, 0.0
    for L in (4, 8, 24, 32):
        prof = rng.random(L)
        curve_err = max(curve_err, abs(cumulative_curve(prof)[-1] - float(np.sum(prof))),
                        abs(cumulative_curve(prof)[-1] - profile_total(prof)))
        share_err = max(share_err, abs(sum(stage_contributions(prof).shares) - 100.0))
    ok = exact and curve_err <= 1e-12 and share_err <= 0.1
    verdict(capsys, 8, ok, f"metric examples exact={exact}, curve err {curve_err:.1e}, share err {share_err:.1e}")


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def _pipeline(root):
    codes = [main(["gen-data", "--seed", "3", "--out", str(root / "data")]),
             main(["plant", "--data", str(root / "data"), "--plan", "shallow", "--seed", "3",
                   "--out", str(root / "model")]),
             main(["report", "--inputs", f"shallow={root / 'model' / 'model.moem'}", "--data", str(root / "data"),
                   "--out", str(root / "report")])]
    return codes


def test_9_determinism_and_formats(capsys, tmp_path):
    codes = _pipeline(tmp_path)
    first = _snapshot(tmp_path)
    codes += _pipeline(tmp_path)
    second = _snapshot(tmp_path)
    same = first == second and any(k.endswith("manifest.json") for k in first) and "model/model.moem" in first
    w = init_model(small_config())
    blob = encode(w)
    round_trip = decode(blob).equals(w) and encode(decode(blob)) == blob
    n = struct.unpack_from("<I", blob, 6)[0]
    corrupt = [b"NOPE" + blob[4:], blob[:-3], blob + b"\0", blob[:10 + n] + b"XXXX" + blob[14 + n:]]
    typed = 0
    for c in corrupt:
        try:
            decode(c)
        except FormatError:
            typed += 1
        except MoELabError:
            pass
    ok = codes == [0] * 6 and same and round_trip and typed == len(corrupt)
    verdict(capsys, 9, ok, f"{len(first)} files byte-identical={same}, round-trip bitwise={round_trip}, "
                           f"corruptions rejected {typed}/{len(corrupt)}")

"""Metrics, gain profiles, stage breakdowns and head/expert correlation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .attribution import head_importance, layer_gain, selection_frequency
from .core import CorrelationResult, pearson
from .errors import DatasetError, DegenerateSeriesError, DomainError
from .model import NO_INTERVENTION, InterventionSpec, ModelWeights, answer_rank, forward

# ---------------------------------------------------------------------------
# Retrieval metrics
# ---------------------------------------------------------------------------


def _ranks(ranks) -> list[int]:
    rs = [int(r) for r in ranks]
    if not rs:
        raise DomainError("no ranks")
    if min(rs) < 1:
        raise DomainError("ranks start at 1")
    return rs


def hit_at_10(ranks) -> float:
    rs = _ranks(ranks)
    return sum(1 for r in rs if r <= 10) / len(rs)


def mrr(ranks) -> float:
    rs = _ranks(ranks)
    return sum(1.0 / r for r in rs) / len(rs)


@dataclass(frozen=True)
class EvalResult:
    ranks: tuple[int, ...]

    @property
    def hit_at_10(self) -> float:
        return hit_at_10(self.ranks)

    @property
    def mrr(self) -> float:
        return mrr(self.ranks)

    def to_dict(self) -> dict:
        return dict(n=len(self.ranks), hit_at_10=self.hit_at_10, mrr=self.mrr, ranks=list(self.ranks))


def evaluate(weights: ModelWeights, prompts, spec: InterventionSpec = NO_INTERVENTION) -> EvalResult:
    """Rank of the answer token at the query position of each prompt."""
    prompts = list(getattr(prompts, "prompts", prompts))
    if not prompts:
        raise DatasetError("no prompts to evaluate")
    V = weights.config.vocab_size
    ranks = []
    for p in prompts:
        if any(not 0 <= t < V for t in p.tokens) or not 0 <= p.answer_id < V:
            raise DatasetError(f"prompt tokens do not fit the model vocabulary of size {V}")
        tr = forward(weights, p.tokens, spec)
        ranks.append(answer_rank(tr.logprobs[p.query_pos], p.answer_id))
    return EvalResult(tuple(ranks))


# ---------------------------------------------------------------------------
# Gain profiles
# ---------------------------------------------------------------------------


def layer_efficiency(total_ffn_gain: float, num_layers: int) -> float:
    if num_layers < 1:
        raise DomainError("need at least one layer")
    return total_ffn_gain / num_layers


def relative_position(mean_peak: float, num_layers: int) -> float:
    if num_layers < 1:
        raise DomainError("need at least one layer")
    return mean_peak / num_layers * 100.0


def peak_gain_position(profiles) -> tuple[float, float]:
    """Mean over prompts of the 1-based argmax FFN-gain layer (lowest layer on ties), and its % of depth."""
    P = np.asarray(profiles, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0 or P.shape[1] == 0:
        raise DomainError("need a non-empty (prompts, layers) array")
    peaks = np.argmax(P, axis=1) + 1  # argmax returns the first maximum
    mean_peak = float(peaks.mean())
    return mean_peak, relative_position(mean_peak, P.shape[1])


def cumulative_curve(profile) -> list[float]:
    out, acc = [], 0.0
    for g in profile:
        acc += float(g)
        out.append(acc)
    return out


def profile_total(profile) -> float:
    """Sequential sum in layer order (the same reduction as cumulative_curve)."""
    acc = 0.0
    for g in profile:
        acc += float(g)
    return acc


@dataclass(frozen=True)
class StageBreakdown:
    boundaries: tuple[tuple[int, int], ...]  # 1-based inclusive layer ranges
    gains: tuple[float, ...]
    shares: tuple[float, ...] | None  # percent of total; None when total <= 0

    def to_dict(self) -> dict:
        names = ["early", "mid", "late"] if len(self.boundaries) == 3 else \
            [f"stage{i + 1}" for i in range(len(self.boundaries))]
        return dict(stages=[dict(name=n, first_layer=a, last_layer=b, gain=g,
                                 share_pct=None if self.shares is None else s)
                            for n, (a, b), g, s in zip(names, self.boundaries, self.gains,
                                                       self.shares or [None] * len(self.gains))],
                    total=profile_total(self.gains))


def thirds_boundaries(num_layers: int) -> list[tuple[int, int]]:
    if num_layers < 3:
        raise DomainError("thirds need at least three layers")
    a = round(num_layers / 3)
    b = round(2 * num_layers / 3)
    return [(1, a), (a + 1, b), (b + 1, num_layers)]


def qwen_like_boundaries(num_layers: int) -> list[tuple[int, int]]:
    """Early/mid/late split at 13/24 and 19/24 of the depth."""
    if num_layers < 3:
        raise DomainError("need at least three layers")
    a = max(1, min(num_layers - 2, round(num_layers * 13 / 24)))
    b = max(a + 1, min(num_layers - 1, round(num_layers * 19 / 24)))
    return [(1, a), (a + 1, b), (b + 1, num_layers)]


def stage_contributions(profile, boundaries=None) -> StageBreakdown:
    prof = [float(x) for x in profile]
    L = len(prof)
    bounds = thirds_boundaries(L) if boundaries is None else [tuple(map(int, b)) for b in boundaries]
    expect = 1
    for a, b in bounds:
        if a != expect or b < a:
            raise DomainError(f"stage boundaries {bounds} do not partition layers 1..{L}")
        expect = b + 1
    if expect != L + 1:
        raise DomainError(f"stage boundaries {bounds} do not partition layers 1..{L}")
    gains = tuple(profile_total(prof[a - 1:b]) for a, b in bounds)
    total = profile_total(prof)
    shares = tuple(g / total * 100.0 for g in gains) if total > 0 else None
    return StageBreakdown(tuple(bounds), gains, shares)


@dataclass
class LayerGainProfile:
    ffn: list[float]
    attn: list[float]
    per_prompt_ffn: list[list[float]] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.ffn)

    @property
    def total_ffn(self) -> float:
        return profile_total(self.ffn)

    @property
    def total_attn(self) -> float:
        return profile_total(self.attn)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "ffn_gain", "attn_gain", "cumulative"])
        for l, (f, a, c) in enumerate(zip(self.ffn, self.attn, cumulative_curve(self.ffn))):
            w.writerow([l + 1, repr(f), repr(a), repr(c)])
        return buf.getvalue()


def gain_profile(weights: ModelWeights, prompts, spec: InterventionSpec = NO_INTERVENTION) -> LayerGainProfile:
    prompts = list(getattr(prompts, "prompts", prompts))
    if not prompts:
        raise DomainError("no prompts")
    L = weights.config.num_layers
    per_ffn, per_attn = [], []
    for p in prompts:
        tr = forward(weights, p.tokens, spec)
        per_ffn.append([layer_gain(weights, tr, l, "ffn", p.answer_id, p.query_pos) for l in range(L)])
        per_attn.append([layer_gain(weights, tr, l, "attn", p.answer_id, p.query_pos) for l in range(L)])
    n = len(prompts)
    # fixed-order reductions over prompts
    ffn = [profile_total(row[l] for row in per_ffn) / n for l in range(L)]
    attn = [profile_total(row[l] for row in per_attn) / n for l in range(L)]
    return LayerGainProfile(ffn, attn, per_ffn)


@dataclass(frozen=True)
class Table1Row:
    model: str
    hit_at_10: float
    mrr: float
    total_ffn_gain: float
    total_attn_gain: float
    peak_layer: float
    peak_relative_pct: float
    layer_efficiency: float


TABLE1_COLUMNS = ["model", "hit_at_10", "mrr", "total_ffn_gain", "total_attn_gain", "peak_layer",
                  "peak_relative_pct", "layer_efficiency"]


def table1_row(name: str, result: EvalResult, profile: LayerGainProfile) -> Table1Row:
    peak, rel = peak_gain_position(profile.per_prompt_ffn)
    return Table1Row(name, result.hit_at_10, result.mrr, profile.total_ffn, profile.total_attn, peak, rel,
                     layer_efficiency(profile.total_ffn, profile.num_layers))


def table1_csv(rows: list[Table1Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE1_COLUMNS)
    for r in rows:
        w.writerow([r.model] + [repr(float(getattr(r, c))) for c in TABLE1_COLUMNS[1:]])
    return buf.getvalue()


# Reference measurements on pretrained models: (model, layers, total FFN gain or None,
# printed efficiency or None, mean peak layer, printed relative position %)
REFERENCE_ROWS = [
    ("Llama-7B", 32, None, None, 24.82, 77.6),
    ("Qwen1.5-7B", 32, 6.49, 0.203, 27.08, 90.2),
    ("Mistral-7B", 32, None, None, 26.64, 83.2),
    ("Qwen1.5-MoE", 24, 7.36, 0.307, 20.36, 84.8),
    ("OLMoE", 16, None, None, 13.53, 84.6),
    ("Mixtral-8x7B", 32, None, None, 26.66, 83.3),
]


@dataclass(frozen=True)
class ReferenceCheck:
    model: str
    computed_efficiency: float | None
    printed_efficiency: float | None
    computed_pct: float
    printed_pct: float
    consistent: bool


def check_reference_rows(eff_tol: float = 5e-3, pct_tol: float = 0.1) -> list[ReferenceCheck]:
    """Recompute the derived columns of the reference rows and flag rows that disagree."""
    out = []
    for model, L, gain, eff, peak, pct in REFERENCE_ROWS:
        ce = None if gain is None else layer_efficiency(gain, L)
        cp = relative_position(peak, L)
        ok = abs(cp - pct) <= pct_tol and (ce is None or abs(ce - eff) <= eff_tol)
        out.append(ReferenceCheck(model, ce, eff, cp, pct, ok))
    return out


# ---------------------------------------------------------------------------
# Head/expert correlation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairCorrelation:
    head: tuple[int, int]
    expert: tuple[int, int]
    result: CorrelationResult | None  # None when a series is degenerate


@dataclass
class CorrelationReport:
    relation: str
    pairs: list[PairCorrelation]
    top_heads: list[tuple[tuple[int, int], float]]
    top_experts: list[tuple[tuple[int, int], float]]

    def valid_pairs(self) -> list[PairCorrelation]:
        return [p for p in self.pairs if p.result is not None]

    def best_pair(self) -> PairCorrelation | None:
        valid = self.valid_pairs()
        if not valid:
            return None
        return max(valid, key=lambda p: (p.result.r, -p.head[0], -p.head[1], -p.expert[0], -p.expert[1]))

    def to_rows(self) -> list[list]:
        rows = []
        for p in self.pairs:
            r = p.result
            rows.append([p.head[0], p.head[1], p.expert[0], p.expert[1],
                         "nan" if r is None else repr(r.r), "nan" if r is None else repr(r.p),
                         0 if r is None else r.n])
        return rows

    def to_dict(self) -> dict:
        return dict(
            relation=self.relation,
            pairs=[dict(head_layer=p.head[0], head=p.head[1], expert_layer=p.expert[0], expert=p.expert[1],
                        r=None if p.result is None else p.result.r, p=None if p.result is None else p.result.p,
                        n=0 if p.result is None else p.result.n, degenerate=p.result is None)
                   for p in self.pairs],
            top_heads=[dict(layer=h[0], head=h[1], mean_importance=v) for h, v in self.top_heads],
            top_experts=[dict(layer=e[0], expert=e[1], frequency=v) for e, v in self.top_experts],
        )


CORRELATION_COLUMNS = ["head_layer", "head", "expert_layer", "expert", "r", "p", "n"]


def correlation_csv(reports: list[CorrelationReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CORRELATION_COLUMNS)
    for rep in reports:
        w.writerows(rep.to_rows())
    return buf.getvalue()


def head_expert_correlation(weights: ModelWeights, prompts, heads=None, experts=None,
                            spec: InterventionSpec = NO_INTERVENTION, relation: str = "",
                            flat_tol: float = 1e-12) -> CorrelationReport:
    """Across-prompt Pearson correlation of head importance with expert gate probability.

    Pairs where either series is constant (up to ``flat_tol`` relative spread) are
    reported as degenerate and left out of the top lists.
    """
    prompts = list(prompts)
    if len(prompts) < 3:
        raise DomainError("correlation needs at least 3 prompts")
    cfg = weights.config
    traces = [forward(weights, p.tokens, spec) for p in prompts]
    if heads is None:
        heads = [(l, h) for l in range(cfg.num_layers) for h in range(cfg.num_heads)]
    freq = selection_frequency(traces, [p.query_pos for p in prompts])
    if experts is None:
        experts = sorted(e for e, _ in freq)
    head_series = {h: np.array([head_importance(weights, tr, h[0], h[1], p.answer_id, p.query_pos)
                                for tr, p in zip(traces, prompts)]) for h in heads}
    gate_series = {e: np.array([tr.layers[e[0]].gates[p.query_pos].probs[e[1]]
                                for tr, p in zip(traces, prompts)]) for e in experts}
    def flat(x: np.ndarray) -> bool:
        # variation at the level of float rounding carries no signal
        return float(np.ptp(x)) <= flat_tol * max(1.0, float(np.abs(x).max()))

    pairs = []
    for h in heads:
        for e in experts:
            if flat(head_series[h]) or flat(gate_series[e]):
                pairs.append(PairCorrelation(h, e, None))
                continue
            try:
                res = pearson(head_series[h], gate_series[e])
            except DegenerateSeriesError:
                res = None
            pairs.append(PairCorrelation(h, e, res))
    live_heads = {p.head for p in pairs if p.result is not None}
    head_means = sorted(((h, float(np.mean(head_series[h]))) for h in heads if h in live_heads),
                        key=lambda kv: (-kv[1], kv[0]))
    return CorrelationReport(relation, pairs, head_means[:3], freq[:3])


def json_dump(obj) -> str:
    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        return x

    return json.dumps(clean(obj), sort_keys=True, indent=1) + "\n"

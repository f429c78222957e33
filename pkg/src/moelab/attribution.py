"""Logit-lens importance scores for heads, FFN neurons and gated expert neurons.

All scores are log-probability differences (nats) of the target token at one
position, projected through the final unembedding.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, TraceError
from .model import (
    NO_INTERVENTION,
    SHARED,
    ForwardTrace,
    InterventionSpec,
    ModelWeights,
    expert_hidden,
    expert_w2,
    forward,
    logit_lens_logprob,
    logit_lens_logprobs,
)


@dataclass(frozen=True, order=True)
class NeuronId:
    """``expert`` is SHARED (-1) for the shared expert; ``head`` ids use kind "head"."""

    layer: int
    expert: int
    neuron: int

    @property
    def site(self) -> str:
        return "shared" if self.expert == SHARED else "routed"

    @property
    def expert_key(self) -> tuple[int, int]:
        return (self.layer, self.expert)

    def label(self) -> str:
        return f"L{self.layer}.shared.n{self.neuron}" if self.expert == SHARED \
            else f"L{self.layer}.E{self.expert}.n{self.neuron}"


@dataclass(frozen=True)
class HeadId:
    layer: int
    head: int


@dataclass(frozen=True)
class ImportanceRecord:
    neuron: NeuronId
    score: float
    prompt: int
    target: int


def _layer_trace(trace: ForwardTrace, l: int):
    if not 0 <= l < len(trace.layers):
        raise TraceError(f"trace has no layer {l}")
    return trace.layers[l]


def _pos(trace: ForwardTrace, pos: int | None) -> int:
    T = len(trace.tokens)
    p = T - 1 if pos is None else pos
    if not 0 <= p < T:
        raise TraceError(f"position {p} outside trace of length {T}")
    return p


def lens_gain(weights: ModelWeights, base: np.ndarray, v: np.ndarray, target: int) -> float:
    """log p(target | base + v) - log p(target | base)."""
    if not np.any(v):
        return 0.0
    return logit_lens_logprob(weights, base + v, target) - logit_lens_logprob(weights, base, target)


def head_importance(weights: ModelWeights, trace: ForwardTrace, l: int, head: int, target: int,
                    pos: int | None = None) -> float:
    lt = _layer_trace(trace, l)
    if not 0 <= head < weights.config.num_heads:
        raise DomainError(f"head {head} out of range")
    p = _pos(trace, pos)
    return lens_gain(weights, lt.h_in[p], lt.head_out[head, p], target)


def _check_neuron(weights: ModelWeights, expert: int, n: int) -> None:
    cfg = weights.config
    if expert == SHARED:
        if not cfg.has_shared_expert:
            raise DomainError("model has no shared expert")
        if not 0 <= n < cfg.shared_hidden:
            raise DomainError(f"shared neuron {n} out of range")
    else:
        if not 0 <= expert < cfg.num_experts:
            raise DomainError(f"expert {expert} out of range")
        if not 0 <= n < cfg.expert_hidden:
            raise DomainError(f"neuron {n} out of range")


def neuron_contribution(weights: ModelWeights, trace: ForwardTrace, l: int, expert: int, n: int,
                        pos: int | None = None) -> np.ndarray:
    """Ungated a_n * W2[:, n] of one neuron."""
    _check_neuron(weights, expert, n)
    lt = _layer_trace(trace, l)
    p = _pos(trace, pos)
    a = expert_hidden(weights, l, expert, lt.u[p])
    return a[n] * expert_w2(weights, l, expert)[:, n]


def gate_weight(trace: ForwardTrace, l: int, expert: int, pos: int | None = None) -> float:
    g = _layer_trace(trace, l).gates[_pos(trace, pos)]
    if expert == SHARED:
        return g.shared_weight
    return dict(g.active).get(expert, 0.0)


def ffn_neuron_importance(weights: ModelWeights, trace: ForwardTrace, l: int, expert: int, n: int,
                          target: int, pos: int | None = None) -> float:
    """Ungated for routed experts; shared-expert neurons carry their gate weight."""
    v = neuron_contribution(weights, trace, l, expert, n, pos)
    if expert == SHARED:
        v = gate_weight(trace, l, SHARED, pos) * v
    return lens_gain(weights, _layer_trace(trace, l).u[_pos(trace, pos)], v, target)


def expert_neuron_importance(weights: ModelWeights, trace: ForwardTrace, l: int, expert: int, n: int,
                             target: int, pos: int | None = None) -> float:
    """Gated score; zero when the expert is not in the active set."""
    g = gate_weight(trace, l, expert, pos)
    _check_neuron(weights, expert, n)
    if g == 0.0:
        return 0.0
    v = g * neuron_contribution(weights, trace, l, expert, n, pos)
    return lens_gain(weights, _layer_trace(trace, l).u[_pos(trace, pos)], v, target)


def layer_gain(weights: ModelWeights, trace: ForwardTrace, l: int, site: str, target: int,
               pos: int | None = None) -> float:
    lt = _layer_trace(trace, l)
    p = _pos(trace, pos)
    if site == "ffn":
        return lens_gain(weights, lt.u[p], lt.moe_out[p], target)
    if site == "attn":
        return lens_gain(weights, lt.h_in[p], lt.attn_out[p], target)
    raise DomainError(f"site must be 'ffn' or 'attn', got {site!r}")


def expert_neuron_scores(weights: ModelWeights, trace: ForwardTrace, l: int, expert: int, target: int,
                         pos: int | None = None) -> np.ndarray:
    """Gated scores of every neuron of one expert, batched.  Inactive neurons score exactly 0."""
    p = _pos(trace, pos)
    lt = _layer_trace(trace, l)
    g = gate_weight(trace, l, expert, p)
    a = expert_hidden(weights, l, expert, lt.u[p])
    out = np.zeros(a.shape[0])
    live = np.flatnonzero(g * a)
    if live.size:
        W2 = expert_w2(weights, l, expert)
        stack = lt.u[p][None, :] + (g * a[live])[:, None] * W2[:, live].T
        out[live] = logit_lens_logprobs(weights, stack, target) - logit_lens_logprob(weights, lt.u[p], target)
    return out


# ---------------------------------------------------------------------------
# Relation-level scoring and ranking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeuronScore:
    neuron: NeuronId
    mean_score: float


def score_prompts(weights: ModelWeights, prompts, spec: InterventionSpec = NO_INTERVENTION,
                  traces: list[ForwardTrace] | None = None) -> list[NeuronScore]:
    """Mean gated score per neuron over a prompt set.

    Every neuron of an expert that was active on at least one prompt gets a
    record; prompts where it was inactive contribute 0.
    """
    prompts = list(prompts)
    if not prompts:
        raise DomainError("no prompts to score")
    cfg = weights.config
    totals: dict[tuple[int, int], np.ndarray] = {}
    for i, pr in enumerate(prompts):
        tr = traces[i] if traces is not None else forward(weights, pr.tokens, spec)
        for l in range(cfg.num_layers):
            g = tr.layers[l].gates[pr.query_pos]
            sites = [j for j, _ in g.active] + ([SHARED] if g.shared_active else [])
            for j in sites:
                s = expert_neuron_scores(weights, tr, l, j, pr.answer_id, pr.query_pos)
                key = (l, j)
                totals[key] = totals.get(key, 0.0) + s
    out = []
    for (l, j) in sorted(totals):
        mean = totals[(l, j)] / len(prompts)
        out += [NeuronScore(NeuronId(l, j, n), float(m)) for n, m in enumerate(mean)]
    return out


def rank_neurons(records: list[NeuronScore], k: int) -> list[NeuronScore]:
    """Top-k by mean score; ties by (layer, site, neuron)."""
    if k < 0:
        raise DomainError("k must be non-negative")
    distinct = {r.neuron for r in records}
    if len(distinct) != len(records):
        raise DomainError("records must hold one mean score per neuron")
    if k > len(records):
        raise DomainError(f"k={k} exceeds the {len(records)} scored neurons")
    order = sorted(records, key=lambda r: (-r.mean_score, r.neuron.layer, r.neuron.expert, r.neuron.neuron))
    return order[:k]


@dataclass(frozen=True)
class Membership:
    counts: tuple[tuple[tuple[int, int], int], ...]  # ((layer, expert), count), routed experts, ranked
    shared_count: int
    total: int

    @property
    def routed_fraction(self) -> float:
        return 0.0 if self.total == 0 else (self.total - self.shared_count) / self.total

    def top(self, n: int = 5) -> list[tuple[int, int]]:
        return [e for e, _ in self.counts[:n]]


def expert_membership(neurons) -> Membership:
    ids = [n.neuron if isinstance(n, NeuronScore) else n for n in neurons]
    if not ids:
        return Membership((), 0, 0)
    c = Counter(n.expert_key for n in ids if n.expert != SHARED)
    shared = sum(1 for n in ids if n.expert == SHARED)
    ranked = sorted(c.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
    return Membership(tuple(ranked), shared, len(ids))


def neuron_overlap(a, b) -> float:
    sa = {n.neuron if isinstance(n, NeuronScore) else n for n in a}
    sb = {n.neuron if isinstance(n, NeuronScore) else n for n in b}
    if len(a) != len(b):
        raise DomainError(f"neuron sets differ in size ({len(a)} vs {len(b)})")
    if not a:
        return 0.0
    return len(sa & sb) / len(a)


def selection_frequency(traces: list[ForwardTrace], positions: list[int]) -> list[tuple[tuple[int, int], float]]:
    """Fraction of prompts on which each routed (layer, expert) is active; descending, ties by id."""
    if not traces:
        raise DomainError("no traces")
    c: Counter = Counter()
    for tr, p in zip(traces, positions):
        for l, lt in enumerate(tr.layers):
            for j, _ in lt.gates[p].active:
                c[(l, j)] += 1
    return sorted(((e, n / len(traces)) for e, n in c.items()), key=lambda kv: (-kv[1], kv[0]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class AttributionReport:
    relation: str
    topk: int
    ranked: list[NeuronScore]
    membership: Membership
    layer_ffn_gain: list[float] = field(default_factory=list)
    layer_attn_gain: list[float] = field(default_factory=list)
    frequency: list[tuple[tuple[int, int], float]] = field(default_factory=list)

    def ranked_experts(self) -> list[tuple[int, int]]:
        """Membership order, then remaining experts by selection frequency (for blocking sweeps)."""
        out = list(self.membership.top(len(self.membership.counts)))
        seen = set(out)
        for e, _ in self.frequency:
            if e not in seen:
                out.append(e)
                seen.add(e)
        return out

    def to_dict(self) -> dict:
        return dict(
            relation=self.relation, topk=self.topk,
            ranked=[dict(rank=i + 1, layer=r.neuron.layer, site=r.neuron.site,
                         expert=r.neuron.expert, neuron=r.neuron.neuron, mean_score=r.mean_score)
                    for i, r in enumerate(self.ranked)],
            membership=[dict(layer=l, expert=e, count=c) for (l, e), c in self.membership.counts],
            top_experts=[dict(layer=l, expert=e) for l, e in self.membership.top(5)],
            shared_count=self.membership.shared_count,
            routed_fraction=self.membership.routed_fraction,
            layer_ffn_gain=self.layer_ffn_gain, layer_attn_gain=self.layer_attn_gain,
            selection_frequency=[dict(layer=l, expert=e, frequency=f) for (l, e), f in self.frequency],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["relation", "layer", "site", "expert", "neuron", "mean_score", "rank"])
        for i, r in enumerate(self.ranked):
            w.writerow([self.relation, r.neuron.layer, r.neuron.site, r.neuron.expert, r.neuron.neuron,
                        repr(r.mean_score), i + 1])
        return buf.getvalue()


def attribute_relation(weights: ModelWeights, dataset, relation: str, topk: int = 100,
                       spec: InterventionSpec = NO_INTERVENTION) -> AttributionReport:
    prompts = dataset.prompts_for(relation)
    traces = [forward(weights, p.tokens, spec) for p in prompts]
    records = score_prompts(weights, prompts, spec, traces)
    top = rank_neurons(records, topk)
    L = weights.config.num_layers
    ffn = np.zeros(L)
    attn = np.zeros(L)
    for tr, p in zip(traces, prompts):
        for l in range(L):
            ffn[l] += layer_gain(weights, tr, l, "ffn", p.answer_id, p.query_pos)
            attn[l] += layer_gain(weights, tr, l, "attn", p.answer_id, p.query_pos)
    n = max(len(prompts), 1)
    return AttributionReport(relation, topk, top, expert_membership(top),
                             [float(x) for x in ffn / n], [float(x) for x in attn / n],
                             selection_frequency(traces, [p.query_pos for p in prompts]))

"""Routing ablations, expert blocking sweeps, head suppression, expert forcing and
integrated-gradients path attribution from a head's output to a gate probability."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .analysis import EvalResult, evaluate
from .core import ACTIVATIONS, activation_grad, finite_diff_gradient_batched
from .errors import DegenerateSeriesError, DomainError, NumericError, SpecError
from .model import (
    NO_INTERVENTION,
    ForwardTrace,
    InterventionSpec,
    ModelWeights,
    RoutingMode,
    forward,
)


def _prompts(data) -> list:
    return list(getattr(data, "prompts", data))


def run_config(weights: ModelWeights, data, mode: RoutingMode | str) -> EvalResult:
    if isinstance(mode, str):
        mode = RoutingMode.parse(mode)
    spec = InterventionSpec(routing_mode=mode).validate_for(weights.config)
    return evaluate(weights, _prompts(data), spec)


# ---------------------------------------------------------------------------
# Blocking
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    n_blocked: int
    blocked: list[tuple[int, int]]
    result: EvalResult


@dataclass
class BlockSweepResult:
    relation: str
    rows: list[SweepRow]

    def relative_drop(self, n: int) -> float:
        base = self.rows[0].result.mrr
        row = next(r for r in self.rows if r.n_blocked == n)
        return (base - row.result.mrr) / base

    def to_dict(self) -> dict:
        return dict(relation=self.relation,
                    rows=[dict(n_blocked=r.n_blocked, blocked=[list(e) for e in r.blocked],
                               hit_at_10=r.result.hit_at_10, mrr=r.result.mrr) for r in self.rows])

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["relation", "n_blocked", "hit_at_10", "mrr"])
        for r in self.rows:
            w.writerow([self.relation, r.n_blocked, repr(r.result.hit_at_10), repr(r.result.mrr)])
        return buf.getvalue()


def block_sweep(weights: ModelWeights, data, ranked_experts, sizes=(1, 5, 10), relation: str = "",
                spec: InterventionSpec = NO_INTERVENTION) -> BlockSweepResult:
    """Block the top-n ranked (layer, expert) pairs for each n; n=0 is the baseline.

    When fewer than n experts are ranked, every ranked expert is blocked.
    """
    prompts = _prompts(data)
    ranked = [tuple(map(int, e)) for e in ranked_experts]
    rows = [SweepRow(0, [], evaluate(weights, prompts, spec))]
    for n in sizes:
        if n < 0:
            raise DomainError("block sizes must be non-negative")
        blocked = ranked[:n]
        s = spec.merged(blocked_experts=blocked).validate_for(weights.config)
        rows.append(SweepRow(int(n), blocked, evaluate(weights, prompts, s)))
    return BlockSweepResult(relation, rows)


# ---------------------------------------------------------------------------
# Suppression and forcing
# ---------------------------------------------------------------------------


@dataclass
class SuppressionReport:
    head: tuple[int, int]
    baseline: EvalResult
    suppressed: EvalResult
    topk_gate_before: float  # mean gate prob of the baseline active routed experts
    topk_gate_after: float
    watched: dict = field(default_factory=dict)  # (layer, expert) -> (mean before, mean after)

    @property
    def mrr_delta(self) -> float:
        return self.suppressed.mrr - self.baseline.mrr

    @property
    def topk_gate_change(self) -> float:
        return (self.topk_gate_after - self.topk_gate_before) / self.topk_gate_before

    def to_dict(self) -> dict:
        return dict(head=list(self.head), baseline_mrr=self.baseline.mrr, suppressed_mrr=self.suppressed.mrr,
                    baseline_hit_at_10=self.baseline.hit_at_10, suppressed_hit_at_10=self.suppressed.hit_at_10,
                    mrr_delta=self.mrr_delta, mrr_relative_change=self.mrr_delta / self.baseline.mrr,
                    topk_gate_before=self.topk_gate_before, topk_gate_after=self.topk_gate_after,
                    topk_gate_relative_change=self.topk_gate_change,
                    watched=[dict(layer=l, expert=e, gate_before=b, gate_after=a,
                                  relative_change=(a - b) / b if b else None)
                             for (l, e), (b, a) in sorted(self.watched.items())])


def suppress_head(weights: ModelWeights, data, head: tuple[int, int], watch=(),
                  alongside: InterventionSpec = NO_INTERVENTION) -> SuppressionReport:
    prompts = _prompts(data)
    if not prompts:
        raise DomainError("no prompts")
    spec = alongside.merged(suppressed_heads=[head]).validate_for(weights.config)
    base_tr = [forward(weights, p.tokens, alongside) for p in prompts]
    sup_tr = [forward(weights, p.tokens, spec) for p in prompts]
    before, after = [], []
    for bt, st, p in zip(base_tr, sup_tr, prompts):
        for l, lt in enumerate(bt.layers):
            for j, _ in lt.gates[p.query_pos].active:
                before.append(lt.gates[p.query_pos].probs[j])
                after.append(st.layers[l].gates[p.query_pos].probs[j])
    watched = {}
    for l, e in watch:
        b = float(np.mean([t.layers[l].gates[p.query_pos].probs[e] for t, p in zip(base_tr, prompts)]))
        a = float(np.mean([t.layers[l].gates[p.query_pos].probs[e] for t, p in zip(sup_tr, prompts)]))
        watched[(int(l), int(e))] = (b, a)
    return SuppressionReport(tuple(head), evaluate(weights, prompts, alongside), evaluate(weights, prompts, spec),
                             float(np.mean(before)), float(np.mean(after)), watched)


def force_expert(weights: ModelWeights, data, expert: tuple[int, int],
                 alongside: InterventionSpec = NO_INTERVENTION) -> EvalResult:
    if tuple(expert) in alongside.blocked_experts:
        raise SpecError(f"expert {expert[0]}:{expert[1]} is blocked and cannot be forced")
    spec = alongside.merged(forced_experts=[expert]).validate_for(weights.config)
    return evaluate(weights, _prompts(data), spec)


# ---------------------------------------------------------------------------
# Integrated gradients
# ---------------------------------------------------------------------------


class GateReplay:
    """Sink gate probability as a function of one head's output vector at one position.

    Routing decisions (masks and active sets), the other heads of the source
    layer and all other positions are frozen at their values in ``trace``.
    Works on batches of head-output vectors and provides an exact reverse-mode
    gradient of the replayed function.
    """

    def __init__(self, weights: ModelWeights, trace: ForwardTrace, source: tuple[int, int],
                 sink: tuple[int, int], pos: int | None = None):
        cfg = weights.config
        self.w = weights
        self.trace = trace
        self.lh, self.head = map(int, source)
        self.ls, self.expert = map(int, sink)
        if not (0 <= self.lh < cfg.num_layers and 0 <= self.head < cfg.num_heads):
            raise DomainError(f"head {source} does not exist")
        if not (0 <= self.ls < cfg.num_layers and 0 <= self.expert < cfg.num_experts):
            raise DomainError(f"expert {sink} does not exist")
        self.pos = len(trace.tokens) - 1 if pos is None else int(pos)
        self.spec = trace.spec
        lt = trace.layers[self.lh]
        self.x = lt.head_out[self.head, self.pos].copy()
        self.base = lt.u[self.pos] - self.x
        self.act = ACTIVATIONS[cfg.activation]
        self.scale = 1.0 / math.sqrt(cfg.head_dim)

    @property
    def connected(self) -> bool:
        return self.ls >= self.lh

    # -- pieces --------------------------------------------------------------

    def _gate_fwd(self, l: int, U: np.ndarray):
        lw = self.w.layers[l]
        rec = self.trace.layers[l].gates[self.pos]
        raw = U @ lw.gate_w.T + lw.gate_b
        open_ = np.isfinite(rec.logits)
        m = np.where(open_, raw, -np.inf)
        if open_.any():
            p = np.exp(m - m.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
        else:
            p = np.zeros_like(raw)
        q = np.exp(raw - raw.max(axis=1, keepdims=True))
        q /= q.sum(axis=1, keepdims=True)
        return rec, p, q

    def _expert_fwd(self, W1, b1, W2, U):
        Z = U @ W1.T + b1
        return Z, Z, self.act(Z) @ W2.T

    def _moe_fwd(self, l: int, U: np.ndarray):
        lw = self.w.layers[l]
        cfg = self.w.config
        rec, p, q = self._gate_fwd(l, U)
        F = np.zeros_like(U)
        parts = []
        for j, _ in rec.active:
            Z, _, E = self._expert_fwd(lw.w1[j], lw.b1[j], lw.w2[j], U)
            wgt = q[:, j] if j in rec.forced else p[:, j]
            F += wgt[:, None] * E
            parts.append((j, Z, E, wgt))
        shared = None
        if rec.shared_active:
            Z, _, E = self._expert_fwd(lw.shared_w1, lw.shared_b1, lw.shared_w2, U)
            F += p[:, cfg.num_experts][:, None] * E
            shared = (Z, E)
        return F, (rec, p, q, parts, shared)

    def _moe_bwd(self, l: int, G: np.ndarray, cache) -> np.ndarray:
        lw = self.w.layers[l]
        cfg = self.w.config
        rec, p, q, parts, shared = cache
        gU = G.copy()
        gp = np.zeros_like(p)
        gq = np.zeros_like(q)
        for j, Z, E, wgt in parts:
            gZ = activation_grad(cfg.activation, Z) * (G @ lw.w2[j])
            gU += wgt[:, None] * (gZ @ lw.w1[j])
            dw = (G * E).sum(axis=1)
            if j in rec.forced:
                gq[:, j] += dw
            else:
                gp[:, j] += dw
        if shared is not None:
            Z, E = shared
            N = cfg.num_experts
            gZ = activation_grad(cfg.activation, Z) * (G @ lw.shared_w2)
            gU += p[:, N][:, None] * (gZ @ lw.shared_w1)
            gp[:, N] += (G * E).sum(axis=1)
        glog = p * (gp - (p * gp).sum(axis=1, keepdims=True)) + q * (gq - (q * gq).sum(axis=1, keepdims=True))
        return gU + glog @ lw.gate_w

    def _attn_fwd(self, l: int, X: np.ndarray):
        lw = self.w.layers[l]
        i = self.pos
        Hf = self.trace.layers[l].h_in[:i]
        A = np.zeros_like(X)
        caches = []
        for j in range(self.w.config.num_heads):
            if not lw.live_heads[j] or (l, j) in self.spec.suppressed_heads:
                continue
            Kf, Vf = Hf @ lw.wk[j].T, Hf @ lw.wv[j].T
            Q, Ki, Vi = X @ lw.wq[j].T, X @ lw.wk[j].T, X @ lw.wv[j].T
            S = np.concatenate([Q @ Kf.T, (Q * Ki).sum(axis=1, keepdims=True)], axis=1) * self.scale
            a = np.exp(S - S.max(axis=1, keepdims=True))
            a /= a.sum(axis=1, keepdims=True)
            O = a[:, :i] @ Vf + a[:, i:] * Vi
            A += O @ lw.wo[j].T
            caches.append((j, Kf, Vf, Q, Ki, Vi, a))
        return A, caches

    def _attn_bwd(self, l: int, G: np.ndarray, caches) -> np.ndarray:
        lw = self.w.layers[l]
        i = self.pos
        gX = np.zeros_like(G)
        for j, Kf, Vf, Q, Ki, Vi, a in caches:
            gO = G @ lw.wo[j]
            ga = np.concatenate([gO @ Vf.T, (gO * Vi).sum(axis=1, keepdims=True)], axis=1)
            gS = a * (ga - (a * ga).sum(axis=1, keepdims=True)) * self.scale
            gQ = gS[:, :i] @ Kf + gS[:, i:] * Ki
            gKi = gS[:, i:] * Q
            gVi = a[:, i:] * gO
            gX += gQ @ lw.wq[j] + gKi @ lw.wk[j] + gVi @ lw.wv[j]
        return gX

    # -- public --------------------------------------------------------------

    def run(self, V: np.ndarray, grad: bool = False):
        """Sink values for a (B, d) batch of head outputs (and gradients when asked)."""
        V = np.atleast_2d(np.asarray(V, dtype=np.float64))
        B = V.shape[0]
        if not self.connected:
            return (np.zeros(B), np.zeros_like(V)) if grad else np.zeros(B)
        U = self.base[None, :] + V
        tape = []
        for l in range(self.lh, self.ls + 1):
            if l > self.lh:
                A, ac = self._attn_fwd(l, X)
                U = X + A
                tape.append(("attn", l, ac))
            if l == self.ls:
                break
            F, mc = self._moe_fwd(l, U)
            tape.append(("moe", l, mc))
            X = U + F
        rec, p, _ = self._gate_fwd(self.ls, U)
        val = p[:, self.expert]
        if not grad:
            return val
        lw = self.w.layers[self.ls]
        gp = np.zeros_like(p)
        gp[:, self.expert] = 1.0
        G = (p * (gp - (p * gp).sum(axis=1, keepdims=True))) @ lw.gate_w
        for kind, l, cache in reversed(tape):
            if kind == "moe":
                G = self._moe_bwd(l, G, cache)  # gradient w.r.t. U of this layer
            else:
                G = G + self._attn_bwd(l, G, cache)  # U = X + A(X)
        return val, G

    def value(self, v: np.ndarray) -> float:
        return float(self.run(v)[0])

    def gradient(self, v: np.ndarray) -> np.ndarray:
        return self.run(v, grad=True)[1][0]


@dataclass(frozen=True)
class LinearProbe:
    """Linear sink w . v (exactly attributed by IG at any step count)."""

    w: np.ndarray

    def run(self, V: np.ndarray, grad: bool = False):
        V = np.atleast_2d(np.asarray(V, dtype=np.float64))
        val = V @ self.w
        return (val, np.repeat(self.w[None, :], V.shape[0], axis=0)) if grad else val


@dataclass
class IGAttribution:
    source: tuple[int, int]
    sink: tuple[int, int]
    attributions: np.ndarray
    total: float
    delta: float  # F(x) - F(baseline)
    gap: float  # |total - delta|
    steps: int
    prompt: int = -1

    @property
    def relative_gap(self) -> float:
        return 0.0 if self.delta == 0.0 else self.gap / abs(self.delta)

    def to_dict(self, with_vector: bool = False) -> dict:
        d = dict(source=list(self.source), sink=list(self.sink), total=self.total, delta=self.delta,
                 completeness_gap=self.gap, relative_gap=self.relative_gap, steps=self.steps, prompt=self.prompt,
                 abs_attribution=float(np.abs(self.attributions).sum()))
        if with_vector:
            d["attributions"] = [float(a) for a in self.attributions]
        return d


def integrated_gradients(fn, x: np.ndarray, baseline: np.ndarray | None = None, steps: int = 64,
                         gradient: str = "analytic", h: float = 1e-4) -> tuple[np.ndarray, float]:
    """Midpoint Riemann IG of ``fn`` (an object with ``run(V, grad)``) from baseline to x.

    Returns (attributions, F(x) - F(baseline)).
    """
    if steps < 1:
        raise DomainError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    b = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if b.shape != x.shape:
        raise DomainError("baseline must match the head-output dimension")
    diff = x - b
    alphas = (np.arange(steps) + 0.5) / steps
    pts = b[None, :] + alphas[:, None] * diff[None, :]
    if gradient == "analytic":
        _, grads = fn.run(pts, grad=True)
    elif gradient == "fd":
        grads = np.stack([finite_diff_gradient_batched(fn.run, pt, h) for pt in pts])
    else:
        raise DomainError(f"unknown gradient mode {gradient!r}")
    if not np.isfinite(grads).all():
        raise NumericError("non-finite gradient along the integration path")
    attr = diff * grads.mean(axis=0)
    ends = fn.run(np.stack([x, b]))
    return attr, float(ends[0] - ends[1])


def ig_path(weights: ModelWeights, prompt, source: tuple[int, int], sink, steps: int = 256,
            baseline: np.ndarray | None = None, spec: InterventionSpec = NO_INTERVENTION,
            gradient: str = "analytic", h: float = 1e-4, trace: ForwardTrace | None = None,
            prompt_index: int = -1) -> IGAttribution:
    """IG from head ``source``'s output at the query position to ``sink``.

    ``sink`` is a (layer, expert) gate probability or a :class:`LinearProbe`.
    """
    tr = trace if trace is not None else forward(weights, prompt.tokens, spec)
    replay = GateReplay(weights, tr, source, (source[0], 0) if isinstance(sink, LinearProbe) else sink,
                        prompt.query_pos)
    fn = sink if isinstance(sink, LinearProbe) else replay
    attr, delta = integrated_gradients(fn, replay.x, baseline, steps, gradient, h)
    total = float(attr.sum())
    sink_id = (-1, -1) if isinstance(sink, LinearProbe) else (int(sink[0]), int(sink[1]))
    return IGAttribution((int(source[0]), int(source[1])), sink_id, attr, total, delta, abs(total - delta),
                         steps, prompt_index)


def attribution_fraction(results: list[IGAttribution], head_set) -> float:
    """Per prompt, |attribution| from ``head_set`` over |attribution| from all heads; mean over prompts."""
    heads = {tuple(h) for h in head_set}
    by_prompt: dict[int, list[float]] = {}
    for r in results:
        num_den = by_prompt.setdefault(r.prompt, [0.0, 0.0])
        a = float(np.abs(r.attributions).sum())
        num_den[1] += a
        if r.source in heads:
            num_den[0] += a
    if not by_prompt:
        raise DegenerateSeriesError("no IG results")
    fracs = []
    for p in sorted(by_prompt):
        num, den = by_prompt[p]
        if den == 0.0:
            raise DegenerateSeriesError(f"prompt {p}: all attributions are zero")
        fracs.append(num / den)
    return float(np.mean(fracs))


def live_heads_upto(weights: ModelWeights, layer: int) -> list[tuple[int, int]]:
    """Heads at layers <= ``layer`` with non-zero weights (others have zero output and zero attribution)."""
    return [(l, j) for l in range(layer + 1) for j in range(weights.config.num_heads)
            if weights.layers[l].live_heads[j]]


@dataclass
class CausalBundle:
    head: tuple[int, int]
    expert: tuple[int, int]
    suppression: SuppressionReport
    forced: EvalResult
    ig: list[IGAttribution]
    fraction: float

    @property
    def recovery(self) -> float:
        return self.forced.mrr / self.suppression.baseline.mrr

    @property
    def expert_gate_change(self) -> float:
        b, a = self.suppression.watched[self.expert]
        return (a - b) / b

    def to_dict(self) -> dict:
        own = [r for r in self.ig if r.source == self.head]
        return dict(
            head=list(self.head), expert=list(self.expert), suppression=self.suppression.to_dict(),
            forcing=dict(mrr=self.forced.mrr, hit_at_10=self.forced.hit_at_10, recovery_ratio=self.recovery),
            expert_gate_relative_change=self.expert_gate_change,
            ig=dict(steps=own[0].steps if own else 0,
                    max_relative_gap=max((r.relative_gap for r in own), default=0.0),
                    max_completeness_gap=max((r.gap for r in own), default=0.0),
                    head_attribution_fraction=self.fraction,
                    runs=[r.to_dict() for r in self.ig]),
        )


def causal_suite(weights: ModelWeights, data, head: tuple[int, int], expert: tuple[int, int],
                 ig_steps: int = 256, ig_prompts: int | None = None, gradient: str = "analytic") -> CausalBundle:
    """Suppress ``head``, then force ``expert`` on top; IG from every live head to the expert gate."""
    prompts = _prompts(data)
    head, expert = tuple(map(int, head)), tuple(map(int, expert))
    sup = suppress_head(weights, prompts, head, watch=[expert])
    spec = InterventionSpec(suppressed_heads=frozenset([head]))
    forced = force_expert(weights, prompts, expert, alongside=spec)
    heads = live_heads_upto(weights, expert[0])
    if head not in heads:
        heads.append(head)
    runs = []
    for idx, p in enumerate(prompts[:ig_prompts]):
        tr = forward(weights, p.tokens)
        for hd in heads:
            runs.append(ig_path(weights, p, hd, expert, ig_steps, trace=tr, gradient=gradient, prompt_index=idx))
    frac = attribution_fraction(runs, [head])
    return CausalBundle(head, expert, sup, forced, runs, frac)

"""Decoder-only MoE transformer with a full forward trace.

No layer norm anywhere; the only biases are on the gate and on the first
layer of each expert.  Positions use learned absolute embeddings.
"""

from __future__ import annotations

import json
import math
from functools import cached_property
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .core import ACTIVATIONS, log_softmax, log_softmax_rows, softmax, top_k_indices
from .errors import ConfigError, DomainError, EmptyRoutingError, ShapeError, SpecError

SHARED = -1
"""Expert id used to address the shared expert in interventions and neuron ids."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    d_model: int
    num_heads: int
    head_dim: int
    vocab_size: int
    num_experts: int
    top_k: int
    has_shared_expert: bool
    expert_hidden: int
    shared_hidden: int = 0
    activation: str = "relu"
    seed: int = 0
    max_seq_len: int = 8

    def validate(self) -> "ModelConfig":
        for name in ("num_layers", "d_model", "num_heads", "head_dim", "vocab_size",
                     "num_experts", "expert_hidden", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_heads * self.head_dim != self.d_model:
            raise ConfigError("num_heads * head_dim must equal d_model")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k={self.top_k} outside [1, {self.num_experts}]")
        if self.has_shared_expert and self.shared_hidden < 1:
            raise ConfigError("shared_hidden must be >= 1 when has_shared_expert")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        return self

    @property
    def gate_rows(self) -> int:
        return self.num_experts + (1 if self.has_shared_expert else 0)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()


@dataclass(frozen=True, eq=False)
class LayerWeights:
    wq: np.ndarray  # (H, head_dim, d)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (H, d, head_dim)
    gate_w: np.ndarray  # (N [+1], d)
    gate_b: np.ndarray  # (N [+1],)
    w1: np.ndarray  # (N, d_e, d)
    b1: np.ndarray  # (N, d_e)
    w2: np.ndarray  # (N, d, d_e)
    shared_w1: np.ndarray | None = None  # (d_s, d)
    shared_b1: np.ndarray | None = None
    shared_w2: np.ndarray | None = None  # (d, d_s)

    @cached_property
    def live_heads(self) -> tuple[bool, ...]:
        # a head with all-zero weights attends uniformly and writes nothing; skipping it is exact
        return tuple(bool(self.wq[j].any() or self.wk[j].any() or (self.wv[j].any() and self.wo[j].any()))
                     for j in range(self.wq.shape[0]))


@dataclass(frozen=True, eq=False)
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray  # (V, d)
    positions: np.ndarray  # (max_seq_len, d)
    unembedding: np.ndarray  # (d, V)
    layers: tuple[LayerWeights, ...]

    def __post_init__(self):
        for _, arr in self.named_tensors():
            arr.flags.writeable = False

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Tensors in declaration order (the serialized order)."""
        out = [("embedding", self.embedding), ("positions", self.positions),
               ("unembedding", self.unembedding)]
        for l, lw in enumerate(self.layers):
            for h in range(self.config.num_heads):
                out += [(f"layers[{l}].wq[{h}]", lw.wq[h]), (f"layers[{l}].wk[{h}]", lw.wk[h]),
                        (f"layers[{l}].wv[{h}]", lw.wv[h]), (f"layers[{l}].wo[{h}]", lw.wo[h])]
            out += [(f"layers[{l}].gate_w", lw.gate_w), (f"layers[{l}].gate_b", lw.gate_b)]
            for j in range(self.config.num_experts):
                out += [(f"layers[{l}].experts[{j}].w1", lw.w1[j]),
                        (f"layers[{l}].experts[{j}].b1", lw.b1[j]),
                        (f"layers[{l}].experts[{j}].w2", lw.w2[j])]
            if self.config.has_shared_expert:
                out += [(f"layers[{l}].shared.w1", lw.shared_w1),
                        (f"layers[{l}].shared.b1", lw.shared_b1),
                        (f"layers[{l}].shared.w2", lw.shared_w2)]
        return out

    def equals(self, other: "ModelWeights") -> bool:
        if self.config != other.config:
            return False
        return all(np.array_equal(a, b) for (_, a), (_, b)
                   in zip(self.named_tensors(), other.named_tensors()))


def empty_layer(cfg: ModelConfig) -> dict[str, np.ndarray | None]:
    """Zero-filled, writable arrays for one layer (used by planting)."""
    d, H, hd, N, de = cfg.d_model, cfg.num_heads, cfg.head_dim, cfg.num_experts, cfg.expert_hidden
    arrs: dict[str, np.ndarray | None] = dict(
        wq=np.zeros((H, hd, d)), wk=np.zeros((H, hd, d)), wv=np.zeros((H, hd, d)),
        wo=np.zeros((H, d, hd)), gate_w=np.zeros((cfg.gate_rows, d)), gate_b=np.zeros(cfg.gate_rows),
        w1=np.zeros((N, de, d)), b1=np.zeros((N, de)), w2=np.zeros((N, d, de)),
        shared_w1=None, shared_b1=None, shared_w2=None,
    )
    if cfg.has_shared_expert:
        ds = cfg.shared_hidden
        arrs.update(shared_w1=np.zeros((ds, d)), shared_b1=np.zeros(ds), shared_w2=np.zeros((d, ds)))
    return arrs


def to_f32_grid(a: np.ndarray) -> np.ndarray:
    """Round to float32-representable values (the on-disk precision), kept as float64."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def build_weights(cfg: ModelConfig, embedding, positions, unembedding, layers: Iterable[dict]) -> ModelWeights:
    """Assemble (and float32-round) a ModelWeights from plain arrays."""
    r = to_f32_grid
    built = []
    for lw in layers:
        built.append(LayerWeights(**{k: (None if v is None else r(v)) for k, v in lw.items()}))
    w = ModelWeights(cfg, r(embedding), r(positions), r(unembedding), tuple(built))
    check_shapes(w)
    return w


def check_shapes(w: ModelWeights) -> None:
    cfg = w.config
    exp = expected_shapes(cfg)
    got = w.named_tensors()
    if len(got) != len(exp):
        raise ShapeError("tensor count does not match config")
    for (name, arr), (ename, shape) in zip(got, exp):
        if arr is None or tuple(arr.shape) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {None if arr is None else arr.shape}")
        if not np.isfinite(arr).all():
            raise ShapeError(f"{name}: non-finite entries")


def expected_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, V, hd = cfg.d_model, cfg.vocab_size, cfg.head_dim
    out = [("embedding", (V, d)), ("positions", (cfg.max_seq_len, d)), ("unembedding", (d, V))]
    for l in range(cfg.num_layers):
        for h in range(cfg.num_heads):
            out += [(f"layers[{l}].wq[{h}]", (hd, d)), (f"layers[{l}].wk[{h}]", (hd, d)),
                    (f"layers[{l}].wv[{h}]", (hd, d)), (f"layers[{l}].wo[{h}]", (d, hd))]
        out += [(f"layers[{l}].gate_w", (cfg.gate_rows, d)), (f"layers[{l}].gate_b", (cfg.gate_rows,))]
        for j in range(cfg.num_experts):
            out += [(f"layers[{l}].experts[{j}].w1", (cfg.expert_hidden, d)),
                    (f"layers[{l}].experts[{j}].b1", (cfg.expert_hidden,)),
                    (f"layers[{l}].experts[{j}].w2", (d, cfg.expert_hidden))]
        if cfg.has_shared_expert:
            ds = cfg.shared_hidden
            out += [(f"layers[{l}].shared.w1", (ds, d)), (f"layers[{l}].shared.b1", (ds,)),
                    (f"layers[{l}].shared.w2", (d, ds))]
    return out


def init_model(config: ModelConfig) -> ModelWeights:
    """Seeded random weights, N(0, 1/d_model) entries, drawn in declaration order."""
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    scale = 1.0 / math.sqrt(cfg.d_model)

    def draw(shape):
        return rng.standard_normal(shape) * scale

    emb = draw((cfg.vocab_size, cfg.d_model))
    pos = draw((cfg.max_seq_len, cfg.d_model))
    unemb = draw((cfg.d_model, cfg.vocab_size))
    layers = []
    H, hd, d = cfg.num_heads, cfg.head_dim, cfg.d_model
    for _ in range(cfg.num_layers):
        lw = empty_layer(cfg)
        for h in range(H):
            for key in ("wq", "wk", "wv"):
                lw[key][h] = draw((hd, d))
            lw["wo"][h] = draw((d, hd))
        lw["gate_w"][:] = draw(lw["gate_w"].shape)
        lw["gate_b"][:] = draw(lw["gate_b"].shape)
        for j in range(cfg.num_experts):
            lw["w1"][j] = draw(lw["w1"][j].shape)
            lw["b1"][j] = draw(lw["b1"][j].shape)
            lw["w2"][j] = draw(lw["w2"][j].shape)
        if cfg.has_shared_expert:
            for key in ("shared_w1", "shared_b1", "shared_w2"):
                lw[key][...] = draw(lw[key].shape)
        layers.append(lw)
    return build_weights(cfg, emb, pos, unemb, layers)


# ---------------------------------------------------------------------------
# Interventions (declarative)
# ---------------------------------------------------------------------------

ROUTING_KINDS = ("default", "only_shared", "shared_plus_top", "top_only", "top_zero")


@dataclass(frozen=True)
class RoutingMode:
    kind: str = "default"
    m: int | None = None

    def __post_init__(self):
        if self.kind not in ROUTING_KINDS:
            raise SpecError(f"unknown routing mode {self.kind!r}")
        needs_m = self.kind in ("shared_plus_top", "top_only")
        if needs_m and (self.m is None or self.m < 0):
            raise SpecError(f"routing mode {self.kind} needs a non-negative m")
        if not needs_m and self.m is not None:
            raise SpecError(f"routing mode {self.kind} takes no m")

    @classmethod
    def parse(cls, text: str) -> "RoutingMode":
        """Parse ``default``, ``only_shared``, ``top_zero``, ``shared_plus_top:4`` or ``top_only:2``."""
        kind, _, m = text.strip().partition(":")
        try:
            return cls(kind, int(m) if m else None)
        except ValueError as exc:
            raise SpecError(f"bad routing mode {text!r}") from exc

    def __str__(self) -> str:
        return self.kind if self.m is None else f"{self.kind}:{self.m}"


@dataclass(frozen=True)
class InterventionSpec:
    blocked_experts: frozenset = frozenset()  # {(layer, expert_id)}; SHARED allowed
    forced_experts: frozenset = frozenset()
    suppressed_heads: frozenset = frozenset()  # {(layer, head)}
    routing_mode: RoutingMode = RoutingMode()

    def __post_init__(self):
        for name in ("blocked_experts", "forced_experts", "suppressed_heads"):
            object.__setattr__(self, name, frozenset((int(a), int(b)) for a, b in getattr(self, name)))
        overlap = self.blocked_experts & self.forced_experts
        if overlap:
            raise SpecError(f"experts both forced and blocked: {sorted(overlap)}")

    def merged(self, **changes) -> "InterventionSpec":
        cur = dict(blocked_experts=self.blocked_experts, forced_experts=self.forced_experts,
                   suppressed_heads=self.suppressed_heads, routing_mode=self.routing_mode)
        for key, val in changes.items():
            if key == "routing_mode":
                cur[key] = val
            else:
                cur[key] = cur[key] | frozenset(val)
        return InterventionSpec(**cur)

    def validate_for(self, cfg: ModelConfig) -> "InterventionSpec":
        for l, e in self.blocked_experts | self.forced_experts:
            if not 0 <= l < cfg.num_layers:
                raise DomainError(f"layer {l} out of range")
            if e == SHARED:
                if not cfg.has_shared_expert:
                    raise DomainError(f"model has no shared expert (layer {l})")
            elif not 0 <= e < cfg.num_experts:
                raise DomainError(f"expert {l}:{e} does not exist")
        for l, h in self.suppressed_heads:
            if not (0 <= l < cfg.num_layers and 0 <= h < cfg.num_heads):
                raise DomainError(f"head {l}:{h} does not exist")
        if (SHARED in [e for _, e in self.forced_experts]):
            raise SpecError("the shared expert is always active; it cannot be forced")
        mode = self.routing_mode
        if mode.m is not None and mode.m > cfg.num_experts:
            raise SpecError(f"routing mode m={mode.m} exceeds num_experts={cfg.num_experts}")
        if mode.kind == "only_shared" and not cfg.has_shared_expert:
            raise ConfigError("only_shared routing requires a shared expert")
        return self


NO_INTERVENTION = InterventionSpec()


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateRecord:
    logits: np.ndarray  # (N [+1],) masked entries are -inf
    probs: np.ndarray  # masked softmax over unblocked experts
    active: tuple[tuple[int, float], ...]  # routed (expert, weight) in application order
    shared_weight: float  # 0.0 when the shared expert is absent or blocked
    shared_active: bool
    forced: tuple[int, ...] = ()  # routed experts added by forcing (weighted by the unmasked softmax)


@dataclass(eq=False)
class LayerTrace:
    h_in: np.ndarray  # h^{l-1}, (T, d)
    attn_weights: np.ndarray  # (H, T, T)
    head_out: np.ndarray  # (H, T, d) per-head summands of A
    attn_out: np.ndarray  # A^l
    u: np.ndarray  # h^{l-1} + A^l
    gates: list[GateRecord]  # per position
    expert_out: list[dict[int, np.ndarray]]  # per position: routed expert -> E_j(u)
    shared_out: np.ndarray  # (T, d) E_s(u), zeros if no shared expert
    moe_out: np.ndarray  # F^l
    h_out: np.ndarray  # h^l

    @property
    def gate_probs(self) -> np.ndarray:
        return np.stack([g.probs for g in self.gates])


@dataclass(eq=False)
class ForwardTrace:
    tokens: tuple[int, ...]
    spec: InterventionSpec
    h0: np.ndarray
    layers: list[LayerTrace]
    logprobs: np.ndarray  # (T, V)

    def layer(self, l: int) -> LayerTrace:
        return self.layers[l]


def _check_tokens(cfg: ModelConfig, tokens) -> tuple[int, ...]:
    toks = tuple(int(t) for t in tokens)
    if not toks:
        raise DomainError("token sequence must be non-empty")
    if len(toks) > cfg.max_seq_len:
        raise DomainError(f"sequence length {len(toks)} exceeds max_seq_len={cfg.max_seq_len}")
    bad = [t for t in toks if not 0 <= t < cfg.vocab_size]
    if bad:
        raise DomainError(f"token ids out of vocabulary: {bad}")
    return toks


def attention_layer(weights: ModelWeights, l: int, residuals: np.ndarray,
                    spec: InterventionSpec = NO_INTERVENTION):
    """Causal multi-head attention. Returns (A, per-head summands, attention weights)."""
    cfg = weights.config
    h = np.asarray(residuals, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != cfg.d_model:
        raise ShapeError(f"residuals must have shape (T, {cfg.d_model}), got {h.shape}")
    lw = weights.layers[l]
    T = h.shape[0]
    scale = 1.0 / math.sqrt(cfg.head_dim)
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    head_out = np.zeros((cfg.num_heads, T, cfg.d_model))
    attn = np.zeros((cfg.num_heads, T, T))
    uniform = None
    for j in range(cfg.num_heads):
        if not lw.live_heads[j]:
            if uniform is None:
                uniform = np.where(mask, 0.0, 1.0)
                uniform /= uniform.sum(axis=1, keepdims=True)
            attn[j] = uniform
            continue
        q = h @ lw.wq[j].T
        k = h @ lw.wk[j].T
        v = h @ lw.wv[j].T
        s = (q @ k.T) * scale
        s[mask] = -np.inf
        s = s - s.max(axis=1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=1, keepdims=True)
        attn[j] = a
        if (l, j) in spec.suppressed_heads:
            continue
        head_out[j] = (a @ v) @ lw.wo[j].T
    A = np.zeros((T, cfg.d_model))
    for j in range(cfg.num_heads):
        A = A + head_out[j]
    return A, head_out, attn


def gate(weights: ModelWeights, l: int, u: np.ndarray, spec: InterventionSpec = NO_INTERVENTION) -> GateRecord:
    cfg = weights.config
    lw = weights.layers[l]
    N = cfg.num_experts
    raw = lw.gate_w @ u + lw.gate_b
    masked = raw.copy()
    mode = spec.routing_mode
    for (bl, e) in spec.blocked_experts:
        if bl == l:
            masked[N if e == SHARED else e] = -np.inf
    if mode.kind == "only_shared":
        masked[:N] = -np.inf
    if cfg.has_shared_expert and mode.kind in ("top_only", "top_zero"):
        masked[N] = -np.inf

    if mode.kind == "default":
        k = cfg.top_k
    elif mode.kind in ("shared_plus_top", "top_only"):
        k = mode.m
    else:
        k = 0
    routed_open = np.isfinite(masked[:N])
    if k > 0 and not routed_open.any():
        raise EmptyRoutingError(f"all routed experts blocked at layer {l}")
    if not np.isfinite(masked).any():
        # nothing can receive probability mass (e.g. top_zero on a routed-only
        # model with every expert blocked); report an all-zero distribution
        probs = np.zeros_like(masked)
    else:
        probs = softmax(masked)
    candidates = probs[:N].copy()
    candidates[~routed_open] = -np.inf
    chosen = top_k_indices(candidates, min(k, int(routed_open.sum())))
    active = [(j, float(probs[j])) for j in chosen]
    forced = sorted(e for (fl, e) in spec.forced_experts if fl == l and e not in chosen)
    if forced:
        unmasked = softmax(raw)
        active += [(j, float(unmasked[j])) for j in forced]
    shared_active = cfg.has_shared_expert and bool(np.isfinite(masked[N]))
    shared_weight = float(probs[N]) if shared_active else 0.0
    return GateRecord(masked, probs, tuple(active), shared_weight, shared_active, tuple(forced))


def expert_hidden(weights: ModelWeights, l: int, j: int, u: np.ndarray) -> np.ndarray:
    """Post-activation hidden vector of expert j (SHARED for the shared expert)."""
    cfg = weights.config
    lw = weights.layers[l]
    act = ACTIVATIONS[cfg.activation]
    if j == SHARED:
        if not cfg.has_shared_expert:
            raise DomainError("model has no shared expert")
        return act(lw.shared_w1 @ u + lw.shared_b1)
    if not 0 <= j < cfg.num_experts:
        raise DomainError(f"unknown expert id {j}")
    return act(lw.w1[j] @ u + lw.b1[j])


def expert_w2(weights: ModelWeights, l: int, j: int) -> np.ndarray:
    lw = weights.layers[l]
    return lw.shared_w2 if j == SHARED else lw.w2[j]


def expert_forward(weights: ModelWeights, l: int, j: int, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (weights.config.d_model,):
        raise ShapeError(f"u must have shape ({weights.config.d_model},)")
    return expert_w2(weights, l, j) @ expert_hidden(weights, l, j, u)


def moe_layer(weights: ModelWeights, l: int, u: np.ndarray, spec: InterventionSpec = NO_INTERVENTION,
              shared: np.ndarray | None = None):
    """Returns (F, gate record, routed outputs, shared output).

    ``shared`` may carry a precomputed E_s(u) (forward batches it over positions).
    """
    g = gate(weights, l, u, spec)
    outs: dict[int, np.ndarray] = {}
    F = np.zeros(weights.config.d_model)
    for j, w in g.active:
        outs[j] = expert_forward(weights, l, j, u)
        F = F + w * outs[j]
    if not weights.config.has_shared_expert:
        shared = np.zeros(weights.config.d_model)
    else:
        if shared is None:
            shared = expert_forward(weights, l, SHARED, u)
        if g.shared_active:
            F = F + g.shared_weight * shared
    return F, g, outs, shared


def forward(weights: ModelWeights, tokens, spec: InterventionSpec = NO_INTERVENTION) -> ForwardTrace:
    cfg = weights.config
    toks = _check_tokens(cfg, tokens)
    spec.validate_for(cfg)
    T = len(toks)
    h = weights.embedding[list(toks)] + weights.positions[:T]
    h0 = h
    layers = []
    for l in range(cfg.num_layers):
        A, head_out, attn = attention_layer(weights, l, h, spec)
        u = h + A
        F = np.zeros_like(u)
        shared_out = np.zeros_like(u)
        if cfg.has_shared_expert:
            lw = weights.layers[l]
            hid = ACTIVATIONS[cfg.activation](u @ lw.shared_w1.T + lw.shared_b1)
            shared_out = hid @ lw.shared_w2.T
        gates, outs = [], []
        for i in range(T):
            F[i], g, o, shared_out[i] = moe_layer(weights, l, u[i], spec, shared_out[i])
            gates.append(g)
            outs.append(o)
        h_new = h + A + F
        layers.append(LayerTrace(h, attn, head_out, A, u, gates, outs, shared_out, F, h_new))
        h = h_new
    logprobs = log_softmax_rows(h @ weights.unembedding)
    return ForwardTrace(toks, spec, h0, layers, logprobs)


def logit_lens_logprob(weights: ModelWeights, hidden: np.ndarray, target: int) -> float:
    """log p(target | hidden) through the final unembedding."""
    V = weights.config.vocab_size
    if not 0 <= target < V:
        raise DomainError(f"target {target} outside vocabulary of size {V}")
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape != (weights.config.d_model,):
        raise ShapeError("hidden has wrong dimension")
    return float(log_softmax(hidden @ weights.unembedding)[target])


def logit_lens_logprobs(weights: ModelWeights, hiddens: np.ndarray, target: int) -> np.ndarray:
    """Batched logit-lens log-probabilities of ``target`` for a (B, d) stack."""
    V = weights.config.vocab_size
    if not 0 <= target < V:
        raise DomainError(f"target {target} outside vocabulary of size {V}")
    return log_softmax_rows(np.atleast_2d(hiddens) @ weights.unembedding)[:, target]


def answer_rank(logprobs: np.ndarray, target: int) -> int:
    """1-based rank; equal scores are ordered by token id."""
    lp = np.asarray(logprobs)
    t = lp[target]
    return int(1 + np.count_nonzero(lp > t) + np.count_nonzero(lp[:target] == t))

"""Synthetic relational facts and constructive planting of those facts into an MoE model.

Prompts follow the template ``<relation-cue> <subject> <query-cue>`` and the
answer is predicted at the last position.  Planting lays the residual stream
out in three blocks:

* subject block (first ``head_dim`` dims): near-orthogonal subject identities,
* vocabulary block: unembedding directions of every token,
* structural block: positions, relation cues, subject classes, relation
  markers and routing context flags.

Layer 0 holds three planted heads.  The *copy head* moves the subject's class
component from the subject position to the query position (plus a small
answer-space prior), the *subject head* moves the subject identity, and the
*relation head* moves the relation cue.  Routers at the refinement layer read
class + relation, so removing the copy head derails routing without destroying
the information the fact neurons key on.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, DatasetError, PlantingError, VocabularyError
from .model import (
    NO_INTERVENTION,
    SHARED,
    InterventionSpec,
    ModelConfig,
    ModelWeights,
    build_weights,
    empty_layer,
    forward,
)

QUERY_CUE = "is"

# (relation name, relation-cue word)
RELATIONS = [
    ("country_capital", "capital"),
    ("country_language", "language"),
    ("name_birthplace", "birthplace"),
    ("fruit_inside_color", "color"),
    ("object_superclass", "superclass"),
    ("adjective_antonym", "antonym"),
    ("work_location", "workplace"),
    ("name_religion", "religion"),
    ("occupation_age", "age"),
    ("occupation_gender", "gender"),
    ("word_first_letter", "firstletter"),
    ("word_last_letter", "lastletter"),
]

COUNTRY_CAPITALS = [
    ("canada", "ottawa"), ("france", "paris"), ("japan", "tokyo"), ("egypt", "cairo"),
    ("kenya", "nairobi"), ("peru", "lima"), ("chile", "santiago"), ("norway", "oslo"),
    ("sweden", "stockholm"), ("spain", "madrid"), ("italy", "rome"), ("greece", "athens"),
    ("poland", "warsaw"), ("austria", "vienna"), ("ireland", "dublin"), ("portugal", "lisbon"),
    ("cuba", "havana"), ("russia", "moscow"), ("germany", "berlin"), ("hungary", "budapest"),
    ("finland", "helsinki"), ("denmark", "copenhagen"), ("thailand", "bangkok"), ("vietnam", "hanoi"),
]

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit sub-seed from a master seed and a label."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Relation:
    name: str
    cue: str
    answer_space: tuple[str, ...]

    @property
    def template(self) -> tuple[str, str, str]:
        return (self.cue, "<subject>", QUERY_CUE)


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    object: str


@dataclass(frozen=True)
class PromptInstance:
    tokens: tuple[int, ...]
    subject_pos: int
    query_pos: int
    answer_id: int
    relation: str

    def to_json(self) -> str:
        d = dict(tokens=list(self.tokens), subject_pos=self.subject_pos, query_pos=self.query_pos,
                 answer_id=self.answer_id, relation=self.relation)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


class Tokenizer:
    """Closed word-level vocabulary."""

    def __init__(self, words: list[str]):
        self.words = list(words)
        self.ids = {w: i for i, w in enumerate(self.words)}
        if len(self.ids) != len(self.words):
            raise DatasetError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str | list[str]) -> tuple[int, ...]:
        words = text.split() if isinstance(text, str) else list(text)
        out = []
        for w in words:
            if w not in self.ids:
                raise VocabularyError(w)
            out.append(self.ids[w])
        return tuple(out)

    def decode(self, ids) -> str:
        try:
            return " ".join(self.words[i] for i in ids)
        except IndexError as exc:
            raise DatasetError(f"token id outside vocabulary: {exc}") from None

    def to_json(self) -> str:
        return json.dumps({w: i for i, w in enumerate(self.words)}, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Tokenizer":
        table = json.loads(text)
        words = [None] * len(table)
        for w, i in table.items():
            words[i] = w
        if any(w is None for w in words):
            raise DatasetError("tokenizer ids are not contiguous")
        return cls(words)


@dataclass
class Dataset:
    relations: list[Relation]
    facts: list[Fact]
    prompts: list[PromptInstance]
    tokenizer: Tokenizer
    seed: int = 0

    def relation_names(self) -> list[str]:
        return [r.name for r in self.relations]

    def relation(self, name: str) -> Relation:
        for r in self.relations:
            if r.name == name:
                return r
        raise DatasetError(f"unknown relation {name!r}")

    def prompts_for(self, relation: str) -> list[PromptInstance]:
        self.relation(relation)
        return [p for p in self.prompts if p.relation == relation]

    def subset(self, relation: str) -> "Dataset":
        keep = [i for i, p in enumerate(self.prompts) if p.relation == relation]
        return Dataset([self.relation(relation)], [self.facts[i] for i in keep],
                       [self.prompts[i] for i in keep], self.tokenizer, self.seed)

    # serialization ---------------------------------------------------------

    def prompts_jsonl(self) -> str:
        return "".join(p.to_json() + "\n" for p in self.prompts)

    def relations_json(self) -> str:
        rels = [dict(name=r.name, cue=r.cue, answer_space=list(r.answer_space)) for r in self.relations]
        facts = [asdict(f) for f in self.facts]
        return json.dumps(dict(seed=self.seed, query_cue=QUERY_CUE, relations=rels, facts=facts),
                          sort_keys=True, separators=(",", ":"))

    def write(self, out_dir: str | Path) -> list[Path]:
        from .moefile import atomic_write_bytes

        out = Path(out_dir)
        files = [(out / "dataset.jsonl", self.prompts_jsonl()), (out / "tokenizer.json", self.tokenizer.to_json()),
                 (out / "relations.json", self.relations_json())]
        for path, text in files:
            atomic_write_bytes(path, text.encode("utf-8"))
        return [p for p, _ in files]

    @classmethod
    def read(cls, in_dir: str | Path) -> "Dataset":
        d = Path(in_dir)
        for name in ("dataset.jsonl", "tokenizer.json", "relations.json"):
            if not (d / name).exists():
                raise DatasetError(f"missing dataset file: {d / name}")
        tok = Tokenizer.from_json((d / "tokenizer.json").read_text("utf-8"))
        meta = json.loads((d / "relations.json").read_text("utf-8"))
        rels = [Relation(r["name"], r["cue"], tuple(r["answer_space"])) for r in meta["relations"]]
        facts = [Fact(**f) for f in meta["facts"]]
        prompts = []
        for line in (d / "dataset.jsonl").read_text("utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                prompts.append(PromptInstance(tuple(rec["tokens"]), rec["subject_pos"], rec["query_pos"],
                                              rec["answer_id"], rec["relation"]))
        ds = cls(rels, facts, prompts, tok, meta.get("seed", 0))
        ds.check()
        return ds

    def check(self, vocab_size: int | None = None) -> None:
        V = len(self.tokenizer) if vocab_size is None else vocab_size
        for p in self.prompts:
            if any(not 0 <= t < V for t in p.tokens) or not 0 <= p.answer_id < V:
                raise DatasetError(f"prompt {p} has token ids outside vocabulary of size {V}")
            if p.query_pos != len(p.tokens) - 1:
                raise DatasetError("query position must be the last position")


def _make_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[int(rng.integers(len(_CONSONANTS)))] + _VOWELS[int(rng.integers(len(_VOWELS)))]
                    for _ in range(syl))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def tokens_needed(num_relations: int, subjects_per_relation: int) -> int:
    return 1 + num_relations + 2 * num_relations * subjects_per_relation


def generate_dataset(seed: int, num_relations: int = 5, subjects_per_relation: int = 20,
                     vocab_budget: int | None = None) -> Dataset:
    """Build relations, facts and prompts.

    When ``vocab_budget`` exceeds the tokens needed, the rest of the vocabulary
    is filled with distractor words that never appear in prompts.
    """
    if num_relations < 0 or subjects_per_relation < 0:
        raise CapacityError("relation and subject counts must be non-negative")
    need = tokens_needed(num_relations, subjects_per_relation)
    budget = need if vocab_budget is None else vocab_budget
    if need > budget:
        raise CapacityError(f"vocabulary budget {budget} < {need} tokens needed")
    rng = np.random.default_rng(derive_seed(seed, "dataset"))

    specs = list(RELATIONS)
    for i in range(len(specs), num_relations):
        specs.append((f"relation_{i}", f"cue{i}"))
    specs = specs[:num_relations]

    taken = {QUERY_CUE} | {cue for _, cue in specs}
    taken |= {w for pair in COUNTRY_CAPITALS for w in pair}
    words = [QUERY_CUE] + [cue for _, cue in specs]
    relations, facts = [], []
    for name, cue in specs:
        if name == "country_capital":
            pairs = COUNTRY_CAPITALS[:subjects_per_relation]
            extra = subjects_per_relation - len(pairs)
            if extra > 0:
                subj, obj = _make_words(rng, extra, taken), _make_words(rng, extra, taken)
                pairs = pairs + list(zip(subj, obj))
        else:
            subj = _make_words(rng, subjects_per_relation, taken)
            obj = _make_words(rng, subjects_per_relation, taken)
            pairs = list(zip(subj, [obj[i] for i in rng.permutation(len(obj))]))
        words += [s for s, _ in pairs] + [o for _, o in pairs]
        relations.append(Relation(name, cue, tuple(o for _, o in pairs)))
        facts += [Fact(s, name, o) for s, o in pairs]
    words += _make_words(rng, budget - len(words), taken)
    tok = Tokenizer(words)
    rel_by_name = {r.name: r for r in relations}
    prompts = []
    for f in facts:
        ids = tok.encode([rel_by_name[f.relation].cue, f.subject, QUERY_CUE])
        prompts.append(PromptInstance(ids, 1, 2, tok.ids[f.object], f.relation))
    return Dataset(relations, facts, prompts, tok, seed)


# ---------------------------------------------------------------------------
# Planting plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefinementSlot:
    layer: int
    expert: int
    fact_neurons: tuple[int, int]  # [start, stop)
    prior_neurons: tuple[int, int]


@dataclass(frozen=True)
class Redundancy:
    """Backup copy of every fact in the shared expert of ``layer``.

    The backup keys additionally require a routing-context flag that only
    routed experts at ``context_layer`` produce (clamped to 1 at ``clamp_layer``),
    so the shared expert alone cannot answer.
    """

    layer: int
    neurons: dict  # relation -> (start, stop)
    context_layer: int
    clamp_layer: int
    clamp_neurons: tuple[int, int]
    context_neuron: int


@dataclass(frozen=True)
class PlantPlan:
    preset: str
    seed: int
    copy_head: tuple[int, int]
    subject_head: tuple[int, int]
    relation_head: tuple[int, int]
    refinement: dict  # relation -> RefinementSlot
    default_experts: tuple[int, ...]
    shared_role_layer: int | None = None
    shared_role: dict = field(default_factory=dict)  # relation -> (start, stop)
    redundancy: Redundancy | None = None
    class_gate: float = 4.0
    relation_gate: float = 1.9
    default_gate: float = 2.0
    shared_gate_bias: float = 2.0
    class_strength: tuple[float, float] = (0.5, 1.0)
    attention_sharpness: float = 30.0
    logit_noise: float = 0.1
    copy_prior: float = 0.03
    shared_prior: float = 0.02
    expert_prior: float = 0.02
    margin_nats: float = 10.0
    key_activation: float = 6.0
    background_scale: float = 0.02
    max_cos: float = 0.2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["refinement"] = {k: asdict(v) for k, v in self.refinement.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "PlantPlan":
        d = dict(d)
        d["refinement"] = {k: RefinementSlot(v["layer"], v["expert"], tuple(v["fact_neurons"]),
                                             tuple(v["prior_neurons"])) for k, v in d["refinement"].items()}
        d["shared_role"] = {k: tuple(v) for k, v in d.get("shared_role", {}).items()}
        if d.get("redundancy"):
            r = d["redundancy"]
            d["redundancy"] = Redundancy(r["layer"], {k: tuple(v) for k, v in r["neurons"].items()},
                                         r["context_layer"], r["clamp_layer"], tuple(r["clamp_neurons"]),
                                         r["context_neuron"])
        for key in ("copy_head", "subject_head", "relation_head", "default_experts", "class_strength"):
            d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "PlantPlan":
        return cls.from_dict(json.loads(text))

    def refinement_experts(self) -> dict[str, tuple[int, int]]:
        return {r: (s.layer, s.expert) for r, s in self.refinement.items()}


def preset(name: str, dataset: Dataset, seed: int = 0) -> tuple[ModelConfig, PlantPlan]:
    """``deep``: 8 layers, shared expert, backup copy of every fact.
    ``shallow``: 4 layers, no shared expert, one copy of each fact."""
    if name not in ("deep", "shallow"):
        raise ValueError(f"unknown preset {name!r}")
    R = len(dataset.relations)
    S = max([len(dataset.prompts_for(r.name)) for r in dataset.relations] + [0])
    deep = name == "deep"
    k, N = 2, 16
    n_prior = 8
    d_e = max(32, S + n_prior)
    n_role = 64
    if k + R > N:
        raise CapacityError(f"{R} relations need {k + R} experts per layer, only {N} available")
    L = 8 if deep else 4
    ref_layer = L - 3 if deep else 2
    cfg = ModelConfig(num_layers=L, d_model=640, num_heads=5, head_dim=128, vocab_size=len(dataset.tokenizer),
                      num_experts=N, top_k=k, has_shared_expert=deep, expert_hidden=d_e,
                      shared_hidden=max(n_role * R, R * S, 2) if deep else 0, activation="relu",
                      seed=derive_seed(seed, f"config:{name}"), max_seq_len=8)
    refinement = {}
    for r_idx, rel in enumerate(dataset.relations):
        refinement[rel.name] = RefinementSlot(ref_layer, k + r_idx, (0, S), (S, S + n_prior))
    plan_kw = {}
    if deep:
        plan_kw["shared_role_layer"] = 0
        plan_kw["shared_role"] = {rel.name: (i * n_role, (i + 1) * n_role) for i, rel in enumerate(dataset.relations)}
        plan_kw["redundancy"] = Redundancy(
            layer=L - 2, neurons={rel.name: (i * S, (i + 1) * S) for i, rel in enumerate(dataset.relations)},
            context_layer=1, clamp_layer=2, clamp_neurons=(0, 2), context_neuron=d_e - 1)
    plan = PlantPlan(preset=name, seed=seed, copy_head=(0, 0), subject_head=(0, 1), relation_head=(0, 2),
                     refinement=refinement, default_experts=tuple(range(k)), **plan_kw)
    return cfg, plan


# ---------------------------------------------------------------------------
# Planting
# ---------------------------------------------------------------------------


def sample_near_orthogonal(n: int, dim: int, max_cos: float, rng: np.random.Generator,
                           max_tries: int = 200_000) -> np.ndarray:
    """Unit vectors with pairwise |cos| <= max_cos, by rejection sampling."""
    out = np.zeros((n, dim))
    tries = 0
    i = 0
    while i < n:
        tries += 1
        if tries > max_tries:
            raise PlantingError(f"could not place {n} vectors in {dim} dims with |cos| <= {max_cos}")
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if i and np.abs(out[:i] @ v).max() > max_cos:
            continue
        out[i] = v
        i += 1
    return out


class Layout:
    """Index bookkeeping for the planted residual stream."""

    def __init__(self, cfg: ModelConfig, num_relations: int):
        self.subject = slice(0, cfg.head_dim)
        z = cfg.max_seq_len + 3 + 3 * num_relations
        self.vocab = slice(cfg.head_dim, cfg.d_model - z)
        if self.vocab.stop - self.vocab.start < 1:
            raise CapacityError("d_model too small for the planted layout")
        base = cfg.d_model - z
        self.pos0 = base
        self.zeta = base + cfg.max_seq_len
        self.chi_raw = self.zeta + 1
        self.chi = self.zeta + 2
        self._rel0 = self.zeta + 3
        self.R = num_relations

    def pos(self, i: int) -> int:
        return self.pos0 + i

    def rho(self, r: int) -> int:
        return self._rel0 + r

    def cls(self, r: int) -> int:
        return self._rel0 + self.R + r

    def mu(self, r: int) -> int:
        return self._rel0 + 2 * self.R + r

    @property
    def vocab_dim(self) -> int:
        return self.vocab.stop - self.vocab.start


@dataclass
class PlantReport:
    """Diagnostics gathered while planting (not serialized with the model)."""

    subject_class: dict = field(default_factory=dict)  # subject word -> class strength
    key_gap: float = math.inf
    answer_scale: float = 0.0
    backup_scale: float = 0.0
    worst_margin: float = math.inf


def _check_capacity(cfg: ModelConfig, ds: Dataset, plan: PlantPlan) -> None:
    R = len(ds.relations)
    if cfg.max_seq_len < 3 or cfg.head_dim < cfg.max_seq_len + 1 or cfg.head_dim < R:
        raise CapacityError("head_dim / max_seq_len too small for the planted heads")
    if cfg.vocab_size < len(ds.tokenizer):
        raise CapacityError(f"vocab_size {cfg.vocab_size} < tokenizer size {len(ds.tokenizer)}")
    heads = {plan.copy_head, plan.subject_head, plan.relation_head}
    if len(heads) != 3 or len({h[0] for h in heads}) != 1:
        raise CapacityError("the three planted heads must be distinct heads of one layer")
    hl = plan.copy_head[0]
    if not (0 <= hl < cfg.num_layers) or any(not 0 <= h < cfg.num_heads for _, h in heads):
        raise CapacityError("planted head out of range")
    if len(plan.default_experts) < cfg.top_k and plan.refinement:
        raise CapacityError("need at least top_k default experts")
    used = set()
    for rel in ds.relations:
        if rel.name not in plan.refinement:
            raise CapacityError(f"plan has no refinement slot for relation {rel.name}")
        s = plan.refinement[rel.name]
        if not hl < s.layer < cfg.num_layers:
            raise CapacityError("refinement layers must come strictly after the copy-head layer")
        if not 0 <= s.expert < cfg.num_experts or s.expert in plan.default_experts:
            raise CapacityError(f"bad refinement expert {s.expert}")
        if (s.layer, s.expert) in used:
            raise CapacityError("relations must use disjoint refinement experts")
        used.add((s.layer, s.expert))
        n = len(ds.prompts_for(rel.name))
        if s.fact_neurons[1] - s.fact_neurons[0] < n or s.fact_neurons[1] > cfg.expert_hidden \
                or s.prior_neurons[1] > cfg.expert_hidden:
            raise CapacityError(f"refinement expert for {rel.name} lacks neurons for {n} facts")
    if plan.shared_role_layer is not None or plan.redundancy is not None:
        if not cfg.has_shared_expert:
            raise CapacityError("plan uses a shared expert but the config has none")
        for a, b in list(plan.shared_role.values()):
            if b > cfg.shared_hidden:
                raise CapacityError("shared role neurons exceed shared_hidden")
    red = plan.redundancy
    if red is not None:
        if not (hl < red.context_layer < red.clamp_layer < red.layer < cfg.num_layers):
            raise CapacityError("redundancy layers must be ordered context < clamp < backup")
        for rel in ds.relations:
            a, b = red.neurons[rel.name]
            if b - a < len(ds.prompts_for(rel.name)) or b > cfg.shared_hidden:
                raise CapacityError("backup neurons exceed shared_hidden")


def _solve_dual(Q: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Minimum-norm p with Q.T @ p == target (exact when Q has full column rank)."""
    if not target.any():
        return np.zeros(Q.shape[0])
    p, *_ = np.linalg.lstsq(Q.T, target, rcond=None)
    return p


def _answer_scale(z0: np.ndarray, d: np.ndarray, answers: list[int], margin: float) -> float:
    """Smallest s >= 0 with (z0 + s*d)[o] - (z0 + s*d)[t] >= margin for all prompts and t != o."""
    s = 0.0
    for zp, dp, o in zip(z0, d, answers):
        gap0 = zp[o] - zp
        dgap = dp[o] - dp
        mask = np.ones_like(zp, dtype=bool)
        mask[o] = False
        need = mask & (gap0 < margin)
        if (need & (dgap <= 0)).any():
            raise PlantingError("answer direction cannot separate the object from a competitor",
                                worst_margin=float(gap0[need & (dgap <= 0)].min()))
        if need.any():
            s = max(s, float(((margin - gap0[need]) / dgap[need]).max()))
    return s


def plant_model(config: ModelConfig, dataset: Dataset, plan: PlantPlan,
                report: PlantReport | None = None) -> ModelWeights:
    cfg = config.validate()
    ds = dataset
    _check_capacity(cfg, ds, plan)
    report = report if report is not None else PlantReport()
    R = len(ds.relations)
    lay = Layout(cfg, R)
    rel_index = {r.name: i for i, r in enumerate(ds.relations)}
    tok = ds.tokenizer
    d, V, hd, N = cfg.d_model, cfg.vocab_size, cfg.head_dim, cfg.num_experts
    rng = np.random.default_rng(derive_seed(plan.seed, "geometry"))

    subjects = [f.subject for f in ds.facts]
    subj_vec = dict(zip(subjects, sample_near_orthogonal(len(subjects), hd, plan.max_cos, rng)))
    out_dirs = sample_near_orthogonal(V, lay.vocab_dim, plan.max_cos, rng)  # (V, |vocab block|)
    lo, hi = plan.class_strength
    strength = {s: float(v) for s, v in zip(subjects, rng.uniform(lo, hi, len(subjects)))}
    report.subject_class = dict(strength)
    subject_rel = {f.subject: rel_index[f.relation] for f in ds.facts}

    emb = np.zeros((V, d))
    for s in subjects:
        emb[tok.ids[s], lay.subject] = subj_vec[s]
        emb[tok.ids[s], lay.cls(subject_rel[s])] = strength[s]
    for r, rel in enumerate(ds.relations):
        emb[tok.ids[rel.cue], lay.rho(r)] = 1.0
    qid = tok.ids[QUERY_CUE]
    emb[qid, lay.zeta] = 1.0
    emb[qid, lay.vocab] = plan.logit_noise * rng.standard_normal(lay.vocab_dim)
    pos = np.zeros((cfg.max_seq_len, d))
    for i in range(cfg.max_seq_len):
        pos[i, lay.pos(i)] = 1.0
    unemb = np.zeros((d, V))
    unemb[lay.vocab, :] = out_dirs.T

    # answer-space prior directions: +1 logit on every object of the relation, 0 elsewhere
    prior = np.zeros((R, d))
    for r, rel in enumerate(ds.relations):
        tgt = np.zeros(V)
        tgt[[tok.ids[o] for o in rel.answer_space]] = 1.0
        prior[r, lay.vocab] = _solve_dual(out_dirs.T, tgt)

    layers = [empty_layer(cfg) for _ in range(cfg.num_layers)]

    # --- layer-0 heads -----------------------------------------------------
    hl = plan.copy_head[0]
    att = layers[hl]
    B = math.sqrt(plan.attention_sharpness * math.sqrt(hd))
    for h in (plan.copy_head[1], plan.subject_head[1]):
        for i in range(cfg.max_seq_len):
            att["wq"][h][i, lay.pos(i)] = B
            if i + 1 < hd:
                att["wk"][h][i + 1, lay.pos(i)] = B
    ch = plan.copy_head[1]
    for r in range(R):
        att["wv"][ch][r, lay.cls(r)] = 1.0
        att["wo"][ch][lay.cls(r), r] = 1.0
        att["wo"][ch][:, r] += plan.copy_prior * prior[r]
    sh = plan.subject_head[1]
    att["wv"][sh][:, lay.subject] = np.eye(hd)
    att["wo"][sh][lay.subject, :] = np.eye(hd)
    rh = plan.relation_head[1]
    for i in range(cfg.max_seq_len):
        att["wq"][rh][0, lay.pos(i)] = B
    att["wk"][rh][0, lay.pos(0)] = B
    for r in range(R):
        att["wv"][rh][r, lay.rho(r)] = 1.0
        att["wo"][rh][lay.rho(r), r] = 1.0

    # --- gates -------------------------------------------------------------
    if cfg.has_shared_expert:
        for lw in layers:
            lw["gate_b"][N] = plan.shared_gate_bias
    # routed gate rows are zero outside the refinement layers, so these are exact
    g_shared = math.exp(plan.shared_gate_bias) / (N + math.exp(plan.shared_gate_bias)) if cfg.has_shared_expert else 0.0
    g_routed_flat = 1.0 / (N + (math.exp(plan.shared_gate_bias) if cfg.has_shared_expert else 0.0))
    use_marker = plan.shared_role_layer is not None
    for rel in ds.relations:
        r = rel_index[rel.name]
        slot = plan.refinement[rel.name]
        gw = layers[slot.layer]["gate_w"]
        gw[slot.expert, lay.cls(r)] = plan.class_gate
        gw[slot.expert, lay.mu(r) if use_marker else lay.rho(r)] = plan.relation_gate
        for j in plan.default_experts:
            gw[j, lay.zeta] = plan.default_gate

    planted_routed: set[tuple[int, int, int]] = set()
    planted_shared: set[tuple[int, int]] = set()

    # --- shared relation identification ------------------------------------
    if use_marker:
        lw = layers[plan.shared_role_layer]
        for rel in ds.relations:
            r = rel_index[rel.name]
            a, b = plan.shared_role[rel.name]
            n = b - a
            for nn in range(a, b):
                lw["shared_w1"][nn, lay.rho(r)] = 2.0
                lw["shared_b1"][nn] = -1.0
                lw["shared_w2"][lay.mu(r), nn] = 1.0 / (n * g_shared)
                lw["shared_w2"][:, nn] += plan.shared_prior / (n * g_shared) * prior[r]
                planted_shared.add((plan.shared_role_layer, nn))

    # --- routing context flag and its clamp --------------------------------
    red = plan.redundancy
    if red is not None:
        lw = layers[red.context_layer]
        for j in range(N):
            for r in range(R):
                lw["w1"][j][red.context_neuron, lay.cls(r)] = 1.0
            lw["w2"][j][lay.chi_raw, red.context_neuron] = 1.0 / g_routed_flat
            planted_routed.add((red.context_layer, j, red.context_neuron))
        lw = layers[red.clamp_layer]
        n0, _ = red.clamp_neurons
        gain = 4.0
        lw["shared_w1"][n0, lay.chi_raw] = gain
        lw["shared_w1"][n0 + 1, lay.chi_raw] = gain
        lw["shared_b1"][n0 + 1] = -1.0
        lw["shared_w2"][lay.chi, n0] = 1.0 / g_shared
        lw["shared_w2"][lay.chi, n0 + 1] = -1.0 / g_shared
        planted_shared.update({(red.clamp_layer, n0), (red.clamp_layer, n0 + 1)})

    # --- refinement experts: relation prior neurons; fact neurons reserved -
    for rel in ds.relations:
        r = rel_index[rel.name]
        slot = plan.refinement[rel.name]
        lw = layers[slot.layer]
        a, b = slot.prior_neurons
        for nn in range(a, b):
            lw["w1"][slot.expert][nn, lay.rho(r)] = 2.0
            lw["b1"][slot.expert][nn] = -1.0
            lw["w2"][slot.expert][:, nn] = plan.expert_prior / (b - a) * prior[r]
            planted_routed.add((slot.layer, slot.expert, nn))
        for nn in range(*slot.fact_neurons):
            planted_routed.add((slot.layer, slot.expert, nn))
    if red is not None:
        for rel in ds.relations:
            for nn in range(*red.neurons[rel.name]):
                planted_shared.add((red.layer, nn))

    # --- background: small random neurons reading subject identity, writing vocabulary
    bg = np.random.default_rng(derive_seed(plan.seed, "background"))
    s_in = plan.background_scale / math.sqrt(hd)
    s_out = plan.background_scale / math.sqrt(lay.vocab_dim)
    for l, lw in enumerate(layers):
        for j in range(N):
            for nn in range(cfg.expert_hidden):
                w_in = bg.standard_normal(hd) * s_in
                w_out = bg.standard_normal(lay.vocab_dim) * s_out
                if plan.background_scale and (l, j, nn) not in planted_routed:
                    lw["w1"][j][nn, lay.subject] = w_in
                    lw["w2"][j][lay.vocab, nn] = w_out
        if cfg.has_shared_expert:
            for nn in range(cfg.shared_hidden):
                w_in = bg.standard_normal(hd) * s_in
                w_out = bg.standard_normal(lay.vocab_dim) * s_out
                if plan.background_scale and (l, nn) not in planted_shared:
                    lw["shared_w1"][nn, lay.subject] = w_in
                    lw["shared_w2"][lay.vocab, nn] = w_out

    def build():
        return build_weights(cfg, emb, pos, unemb, layers)

    prompts = ds.prompts
    fact_of_prompt = list(ds.facts)
    answers = [p.answer_id for p in prompts]
    qpos = [p.query_pos for p in prompts]

    def run(weights, spec=NO_INTERVENTION):
        return [forward(weights, p.tokens, spec) for p in prompts]

    def key_calibrate(traces, layer, unit_rows, drop_dim=None):
        """Per-fact key scale and bias so the own prompt activates at ``key_activation``
        and every other prompt stays below zero by the same amount."""
        U = np.stack([t.layers[layer].u[i] for t, i in zip(traces, qpos)])
        pre = U @ unit_rows.T  # (prompts, facts): fact i belongs to prompt i
        scales, biases = [], []
        worst = math.inf
        for i in range(len(prompts)):
            own = pre[i, i]
            others = np.delete(pre[:, i], i)
            comp = [others.max()] if others.size else []
            if drop_dim is not None:
                comp.append(own - U[i, drop_dim] * unit_rows[i, drop_dim])
            cmax = max(comp) if comp else own - 1.0
            gap = own - cmax
            worst = min(worst, gap)
            if gap <= 0:
                raise PlantingError(f"key for fact {fact_of_prompt[i]} is not selective", worst_margin=float(gap))
            k = 2.0 * plan.key_activation / gap
            scales.append(k)
            biases.append(-k * (own + cmax) / 2.0)
        report.key_gap = min(report.key_gap, worst)
        return np.array(scales), np.array(biases)

    def final_logits(traces):
        return np.stack([t.logprobs[i] for t, i in zip(traces, qpos)])

    if prompts:
        # fact keys of the refinement experts
        traces = run(build())
        for rel in ds.relations:
            r = rel_index[rel.name]
            slot = plan.refinement[rel.name]
            idx = [i for i, p in enumerate(prompts) if p.relation == rel.name]
            rows = np.zeros((len(prompts), d))
            for i, f in enumerate(fact_of_prompt):
                rows[i, lay.subject] = subj_vec[f.subject]
                rows[i, lay.rho(rel_index[f.relation])] = 1.0
            scale, bias = key_calibrate(traces, slot.layer, rows)
            a = slot.fact_neurons[0]
            for n_off, i in enumerate(idx):
                nn = a + n_off
                layers[slot.layer]["w1"][slot.expert][nn] = scale[i] * rows[i]
                layers[slot.layer]["b1"][slot.expert][nn] = bias[i]

        # value vectors: shared answer scale for the routed copies
        z0 = final_logits(run(build()))
        for rel in ds.relations:
            slot = plan.refinement[rel.name]
            idx = [i for i, p in enumerate(prompts) if p.relation == rel.name]
            for n_off, i in enumerate(idx):
                layers[slot.layer]["w2"][slot.expert][:, slot.fact_neurons[0] + n_off] = unemb[:, answers[i]]
        z1 = final_logits(run(build()))
        alpha = _answer_scale(z0, z1 - z0, answers, plan.margin_nats) * 1.02
        report.answer_scale = alpha
        for rel in ds.relations:
            slot = plan.refinement[rel.name]
            a = slot.fact_neurons[0]
            n = len(ds.prompts_for(rel.name))
            layers[slot.layer]["w2"][slot.expert][:, a:a + n] *= alpha

        if red is not None:
            traces = run(build())
            rows = np.zeros((len(prompts), d))
            for i, f in enumerate(fact_of_prompt):
                rows[i, lay.subject] = subj_vec[f.subject]
                rows[i, lay.rho(rel_index[f.relation])] = 1.0
                rows[i, lay.chi] = 1.0
            scale, bias = key_calibrate(traces, red.layer, rows, drop_dim=lay.chi)
            for rel in ds.relations:
                idx = [i for i, p in enumerate(prompts) if p.relation == rel.name]
                a = red.neurons[rel.name][0]
                for n_off, i in enumerate(idx):
                    layers[red.layer]["shared_w1"][a + n_off] = scale[i] * rows[i]
                    layers[red.layer]["shared_b1"][a + n_off] = bias[i]
            # calibrate the backup with the primary copies removed
            no_primary = InterventionSpec(blocked_experts=frozenset(
                (s.layer, s.expert) for s in plan.refinement.values()))
            z0 = final_logits(run(build(), no_primary))
            for rel in ds.relations:
                idx = [i for i, p in enumerate(prompts) if p.relation == rel.name]
                a = red.neurons[rel.name][0]
                for n_off, i in enumerate(idx):
                    layers[red.layer]["shared_w2"][:, a + n_off] = unemb[:, answers[i]]
            z1 = final_logits(run(build(), no_primary))
            beta = _answer_scale(z0, z1 - z0, answers, plan.margin_nats) * 1.02
            report.backup_scale = beta
            for rel in ds.relations:
                a, _ = red.neurons[rel.name]
                n = len(ds.prompts_for(rel.name))
                layers[red.layer]["shared_w2"][:, a:a + n] *= beta

    weights = build()
    if prompts:
        traces = run(weights)
        logits = final_logits(traces)
        worst = math.inf
        for i, (row, o) in enumerate(zip(logits, answers)):
            others = np.delete(row, o)
            worst = min(worst, float(row[o] - others.max()))
        report.worst_margin = worst
        if worst <= 0:
            raise PlantingError("planted model does not predict every fact", worst_margin=worst)
    return weights


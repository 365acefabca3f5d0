"""Synthetic relation corpus with a known generating process.

Each non-None relation has a type signature, a small set of trigger
words, and a visual signature vector.  Text-informative relations put one
trigger between the entities; visual-informative relations omit it and
plant their signature in one random image patch.  "None" samples reuse a
relation's type signature with neither cue.  Because the generator is
fully known, :func:`bayes_predict` computes the exact posterior and bounds
what any learner can reach.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dataio import NONE_LABEL, TYPE_TAGS, Instance, RelationCatalog, RelationEntry, VisualFeatures
from .numcore import ConfigError

TRIGGER_WORDS = (
    "founded", "visited", "married", "joined", "owns", "leads", "praised", "hosted",
    "acquired", "signed", "attacked", "defended", "funded", "sued", "trained", "met",
    "hired", "left", "built", "sold", "won", "lost", "opened", "closed", "backed",
    "mocked", "thanked", "warned", "quoted", "coached", "invited", "rescued",
)
FILLER_WORDS = (
    "the", "a", "today", "news", "photo", "rt", "new", "great", "look", "at",
    "this", "with", "from", "and", "our", "big", "day", "here", "via", "now",
    "story", "live", "see", "just", "best", "week", "amazing", "report", "update", "more",
)
_NOUNS = {"PER": "person", "ORG": "organization", "LOC": "location", "MISC": "thing"}
_SYLLABLES = ("ka", "lo", "mi", "ra", "te", "vu", "son", "dri", "pel", "zo", "ne", "quar", "bi", "tul", "ex", "yo")


@dataclass(frozen=True)
class SynthConfig:
    K: int = 6
    n_train: int = 600
    n_eval: int = 200
    noise: float = 0.05
    visual_informative_fraction: float = 0.4
    seed: int = 648
    visual_dim: int = 16
    num_patches: int = 4
    confusable: bool = False
    triggers_per_relation: int = 2
    names_per_type: int = 40
    multi_token_name_prob: float = 0.3
    holdout_names: bool = True
    min_filler: int = 1
    max_filler: int = 3


@dataclass(frozen=True)
class SynthRelation:
    label: str
    signature: tuple[str, str]
    triggers: tuple[str, ...]
    visual_signature: np.ndarray
    visual_informative: bool
    partner: str | None = None


@dataclass
class SynthWorld:
    """Everything the generator knows; input to the Bayes oracle."""

    relations: list[SynthRelation]
    noise: float
    num_patches: int
    visual_dim: int
    catalog: RelationCatalog
    trigger_to_relations: dict[str, list[str]] = field(default_factory=dict)

    def relation(self, label: str) -> SynthRelation:
        for r in self.relations:
            if r.label == label:
                return r
        raise KeyError(label)

    def partner(self, label: str) -> str | None:
        return self.relation(label).partner if label != NONE_LABEL else None


@dataclass
class SyntheticCorpus:
    """Unpacks as ``train, eval, catalog, lexicon``; ``world`` feeds the oracle."""

    train: list[Instance]
    eval: list[Instance]
    catalog: RelationCatalog
    lexicon: dict[str, str]
    world: SynthWorld

    def __iter__(self):
        return iter((self.train, self.eval, self.catalog, self.lexicon))


def _make_names(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    names = []
    while len(names) < count:
        n_syl = int(rng.integers(2, 4))
        word = "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), n_syl))
        if word not in taken:
            taken.add(word)
            names.append(word)
    return names


def _build_world(cfg: SynthConfig, rng: np.random.Generator) -> SynthWorld:
    n_rel = cfg.K - 1
    n_vis = int(math.floor(cfg.visual_informative_fraction * n_rel + 0.5))
    if n_vis > 0 and (cfg.visual_dim <= 0 or cfg.num_patches <= 0):
        raise ConfigError("visual_informative_fraction > 0 needs visual_dim > 0 and num_patches > 0")
    if n_rel * cfg.triggers_per_relation > len(TRIGGER_WORDS):
        raise ConfigError(f"at most {len(TRIGGER_WORDS) // cfg.triggers_per_relation} relations supported")

    all_sigs = [(s, o) for s in TYPE_TAGS for o in TYPE_TAGS]
    if n_rel > len(all_sigs):
        raise ConfigError(f"K={cfg.K} exceeds the {len(all_sigs)} distinct type signatures")
    order = rng.permutation(len(all_sigs))
    sigs = [all_sigs[i] for i in order]
    triggers = [str(w) for w in rng.permutation(TRIGGER_WORDS)]

    n_text = n_rel - n_vis
    n_pairs = n_text // 2 if cfg.confusable else 0
    specs: list[dict] = []
    used_sigs: list[tuple[str, str]] = []
    t = 0
    for p in range(n_pairs):
        # a pair shares triggers and one entity type; only the other type differs
        base = next(s for s in sigs if s not in used_sigs)
        other = next(s for s in sigs if s not in used_sigs and s != base and s[1] == base[1])
        used_sigs += [base, other]
        trig = tuple(triggers[t : t + cfg.triggers_per_relation])
        t += cfg.triggers_per_relation
        specs.append({"sig": base, "trig": trig, "vis": False, "pair": p})
        specs.append({"sig": other, "trig": trig, "vis": False, "pair": p})
    for i in range(n_rel - 2 * n_pairs):
        sig = next(s for s in sigs if s not in used_sigs)
        used_sigs.append(sig)
        is_vis = i >= n_text - 2 * n_pairs
        trig = () if is_vis else tuple(triggers[t : t + cfg.triggers_per_relation])
        if not is_vis:
            t += cfg.triggers_per_relation
        specs.append({"sig": sig, "trig": trig, "vis": is_vis, "pair": None})

    labels = []
    for k, spec in enumerate(specs):
        s, o = spec["sig"]
        labels.append(f"/{s.lower()}/{o.lower()}/rel_{k + 1}")
    relations = []
    for k, spec in enumerate(specs):
        partner = None
        if spec["pair"] is not None:
            partner = next(
                labels[j] for j, other in enumerate(specs) if other["pair"] == spec["pair"] and j != k
            )
        vsig = rng.normal(0.0, 1.0, size=cfg.visual_dim) if cfg.visual_dim > 0 else np.zeros(0)
        relations.append(SynthRelation(labels[k], spec["sig"], spec["trig"], vsig, spec["vis"], partner))

    entries = [
        RelationEntry(
            NONE_LABEL,
            "Indicates that there is no relationship between the subject and object entity, "
            "based on text and image information. Subject and object can be of any type.",
            frozenset(TYPE_TAGS),
            frozenset(TYPE_TAGS),
        )
    ]
    for k, r in enumerate(relations):
        s, o = r.signature
        if r.visual_informative:
            desc = (
                f"Indicates that a {_NOUNS[s]} appears together with a {_NOUNS[o]} "
                f"in an image showing scene {k + 1}, with no textual cue."
            )
        else:
            desc = (
                f"Indicates that a {_NOUNS[s]} " + " or ".join(r.triggers) + f" a {_NOUNS[o]}."
            )
        entries.append(RelationEntry(r.label, desc, frozenset([s]), frozenset([o])))
    catalog = RelationCatalog.from_dict(
        {e.label: {"description": e.description, "subj_types": sorted(e.subj_types), "obj_types": sorted(e.obj_types)} for e in entries}
    )
    trig_map: dict[str, list[str]] = {}
    for r in relations:
        for w in r.triggers:
            trig_map.setdefault(w, []).append(r.label)
    return SynthWorld(relations, cfg.noise, cfg.num_patches, cfg.visual_dim, catalog, trig_map)


def _sample(
    cfg: SynthConfig,
    world: SynthWorld,
    rng: np.random.Generator,
    names: dict[str, list[str]],
    split: str,
    i: int,
) -> Instance:
    k = int(rng.integers(0, len(world.relations) + 1))
    if k == len(world.relations):
        label = NONE_LABEL
        sig = world.relations[int(rng.integers(0, len(world.relations)))].signature
        rel = None
    else:
        rel = world.relations[k]
        label, sig = rel.label, rel.signature

    def name(tag):
        return names[tag][int(rng.integers(0, len(names[tag])))].split()

    subj, obj = name(sig[0]), name(sig[1])

    def filler(lo):
        n = int(rng.integers(lo, cfg.max_filler + 1))
        return [FILLER_WORDS[int(j)] for j in rng.integers(0, len(FILLER_WORDS), n)]

    middle = filler(cfg.min_filler)
    if rel is not None and not rel.visual_informative:
        trig = rel.triggers[int(rng.integers(0, len(rel.triggers)))]
        middle.insert(int(rng.integers(0, len(middle) + 1)), trig)
    subj_first = bool(rng.integers(0, 2))
    first, second = (subj, obj) if subj_first else (obj, subj)
    head, tail = filler(0), filler(0)
    tokens = head + first + middle + second + tail
    a = (len(head), len(head) + len(first) - 1)
    b_start = len(head) + len(first) + len(middle)
    b = (b_start, b_start + len(second) - 1)
    subj_span, obj_span = (a, b) if subj_first else (b, a)

    visual = None
    if cfg.visual_dim > 0 and cfg.num_patches > 0:
        patches = cfg.noise * rng.normal(0.0, 1.0, size=(cfg.num_patches, cfg.visual_dim))
        if rel is not None and rel.visual_informative:
            patches[int(rng.integers(0, cfg.num_patches))] += rel.visual_signature
        visual = VisualFeatures(f"syn_{split}_{i:05d}", patch_vectors=patches)

    return Instance(
        tokens=tuple(tokens),
        subj_span=subj_span,
        subj_type=sig[0],
        obj_type=sig[1],
        gold_relation=label,
        obj_span=obj_span,
        visual=visual,
        instance_id=f"syn_{split}:{i}",
    )


def generate_synthetic(config: SynthConfig = SynthConfig()) -> SyntheticCorpus:
    """Deterministic train/eval corpus, catalog and lexicon for ``config``."""
    if config.K < 2:
        raise ConfigError("K must be >= 2 (one relation plus None)")
    if config.noise < 0:
        raise ConfigError("noise must be non-negative")
    if not 0.0 <= config.visual_informative_fraction <= 1.0:
        raise ConfigError("visual_informative_fraction must lie in [0, 1]")
    if config.min_filler > config.max_filler:
        raise ConfigError("min_filler exceeds max_filler")
    rng = np.random.default_rng(config.seed)
    world = _build_world(config, rng)

    taken: set[str] = set()
    train_names: dict[str, list[str]] = {}
    eval_names: dict[str, list[str]] = {}
    lexicon: dict[str, str] = {}
    for tag in TYPE_TAGS:
        pool = []
        for first in _make_names(rng, config.names_per_type, taken):
            if rng.random() < config.multi_token_name_prob:
                first = f"{first} {_make_names(rng, 1, taken)[0]}"
            pool.append(first)
            lexicon[first] = tag
        if config.holdout_names:
            half = max(1, len(pool) // 2)
            train_names[tag], eval_names[tag] = pool[:half], pool[half:] or pool[:half]
        else:
            train_names[tag] = eval_names[tag] = pool

    train = [_sample(config, world, rng, train_names, "train", i) for i in range(config.n_train)]
    evals = [_sample(config, world, rng, eval_names, "eval", i) for i in range(config.n_eval)]
    return SyntheticCorpus(train, evals, world.catalog, lexicon, world)


# --- oracles -----------------------------------------------------------------


def _gauss_logpdf(x: np.ndarray, mu, sigma: float) -> float:
    d = x - mu
    return float(-0.5 * np.sum(d * d) / sigma**2 - d.size * math.log(sigma * math.sqrt(2 * math.pi)))


def bayes_scores(instance: Instance, world: SynthWorld, use_visual: bool = True) -> dict[str, float]:
    """Exact log joint (up to a shared constant) of each catalog label."""
    tokens = [t.lower() for t in instance.tokens]
    present = [t for t in tokens if t in world.trigger_to_relations]
    types = (instance.subj_type, instance.obj_type)
    sigs = [r.signature for r in world.relations]
    sigma = max(world.noise, 1e-6)
    patches = instance.visual.patch_vectors if (use_visual and instance.visual is not None) else None

    def background(p):
        return _gauss_logpdf(p, 0.0, sigma)

    scores: dict[str, float] = {}
    n_none_sig = sigs.count(types)
    scores[NONE_LABEL] = math.log(n_none_sig / len(sigs)) if (n_none_sig and not present) else -math.inf
    if patches is not None and scores[NONE_LABEL] > -math.inf:
        scores[NONE_LABEL] += background(patches)
    for r in world.relations:
        if r.signature != types:
            scores[r.label] = -math.inf
            continue
        if r.visual_informative:
            if present:
                scores[r.label] = -math.inf
                continue
            s = 0.0
            if patches is not None:
                base = [background(p) for p in patches]
                total = sum(base)
                terms = [total - base[j] + _gauss_logpdf(patches[j], r.visual_signature, sigma) for j in range(len(patches))]
                s = float(logsumexp(terms)) - math.log(len(patches))
            scores[r.label] = s
        else:
            if len(present) != 1 or present[0] not in r.triggers:
                scores[r.label] = -math.inf
                continue
            s = -math.log(len(r.triggers))
            if patches is not None:
                s += background(patches)
            scores[r.label] = s
    return scores


def bayes_predict(instance: Instance, world: SynthWorld, use_visual: bool = True) -> str:
    """MAP label under the generator; ties resolve to catalog order."""
    scores = bayes_scores(instance, world, use_visual)
    labels = world.catalog.labels
    return max(labels, key=lambda lab: (scores.get(lab, -math.inf), -labels.index(lab)))

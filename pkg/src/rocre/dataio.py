"""Corpus and catalog ingestion, entity typing, and type-prompt injection.

File formats
------------
Corpus (JSONL, one instance per line)::

    {"tokens": [...], "subj": {"span": [i, j], "type": "PER"},
     "obj": {"span": [i, j], "type": "LOC"} | {"visual_index": p, "type": "MISC"},
     "relation": "/org/loc/locate_at", "visual_id": "img_0001"}

Spans are inclusive token indices.  ``type`` may be omitted, in which case
the lexicon tagger fills it in.  ``visual_id`` names ``<visual_dir>/<id>.bin``:
two little-endian u32 (P, D_v) followed by P*D_v little-endian float32.

Relation catalog (JSON)::

    {"label": {"description": "...", "subj_types": [...], "obj_types": [...]}}

A bare string value is accepted as the description with unrestricted types.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TYPE_TAGS: tuple[str, ...] = ("PER", "ORG", "LOC", "MISC")
DEFAULT_TAG = "MISC"
NONE_LABEL = "None"

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
SUBJ_OPEN, SUBJ_CLOSE, OBJ_OPEN, OBJ_CLOSE = "<s>", "</s>", "<o>", "</o>"


class CorpusError(ValueError):
    """Malformed corpus, catalog, lexicon or visual file."""


class PromptError(ValueError):
    """Marker injection cannot satisfy its contract for this instance."""


def subj_marker(tag: str | None) -> str:
    return SUBJ_OPEN if tag is None else f"<s:{tag.lower()}>"


def obj_marker(tag: str | None) -> str:
    return OBJ_OPEN if tag is None else f"<o:{tag.lower()}>"


def reserved_tokens(tag_set: Sequence[str] = TYPE_TAGS) -> list[str]:
    out = [PAD, UNK, CLS, SUBJ_OPEN, SUBJ_CLOSE, OBJ_OPEN, OBJ_CLOSE]
    out += [subj_marker(t) for t in tag_set]
    out += [obj_marker(t) for t in tag_set]
    return out


_TOKEN_RE = re.compile(r"[a-z0-9_]+|[^\sa-z0-9_]")


def tokenize(text: str) -> list[str]:
    """Lowercase word/punctuation split used for relation descriptions."""
    return _TOKEN_RE.findall(text.lower())


# --- visual features --------------------------------------------------------


class VisualFeatures:
    """P x D_v patch vectors, held in memory or read lazily from disk."""

    def __init__(self, source_id: str, patch_vectors: np.ndarray | None = None, path: Path | None = None):
        if patch_vectors is None and path is None:
            raise ValueError("VisualFeatures needs either patch_vectors or a path")
        self.source_id = source_id
        self.path = Path(path) if path is not None else None
        self._vectors = None if patch_vectors is None else _check_visual(np.asarray(patch_vectors), source_id)

    @property
    def patch_vectors(self) -> np.ndarray:
        if self._vectors is None:
            self._vectors = read_visual(self.path)
        return self._vectors

    @property
    def num_patches(self) -> int:
        return self.patch_vectors.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, VisualFeatures)
            and self.source_id == other.source_id
            and np.array_equal(self.patch_vectors, other.patch_vectors)
        )

    def __repr__(self) -> str:
        return f"VisualFeatures({self.source_id!r})"


def _check_visual(arr: np.ndarray, source: str) -> np.ndarray:
    if arr.ndim != 2:
        raise CorpusError(f"visual features {source}: expected a P x D_v matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise CorpusError(f"visual features {source}: non-finite values")
    return arr


def write_visual(path, patch_vectors: np.ndarray) -> None:
    arr = np.asarray(patch_vectors, dtype="<f4")
    p, d = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", p, d))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_visual(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise CorpusError(f"{path}: truncated visual header")
    p, d = struct.unpack_from("<II", blob, 0)
    if len(blob) != 8 + 4 * p * d:
        raise CorpusError(f"{path}: expected {p}x{d} float32 values")
    arr = np.frombuffer(blob, dtype="<f4", offset=8).reshape(p, d).astype(np.float64)
    return _check_visual(arr, str(path))


# --- instances --------------------------------------------------------------


@dataclass(frozen=True)
class Instance:
    tokens: tuple[str, ...]
    subj_span: tuple[int, int]
    subj_type: str
    obj_type: str
    gold_relation: str
    obj_span: tuple[int, int] | None = None
    obj_visual_index: int | None = None
    visual: VisualFeatures | None = None
    instance_id: str = ""

    @property
    def visual_object(self) -> bool:
        return self.obj_span is None

    def validate(self) -> None:
        n = len(self.tokens)
        spans = [("subj", self.subj_span)]
        if (self.obj_span is None) == (self.obj_visual_index is None):
            raise CorpusError("object needs exactly one of span or visual_index")
        if self.obj_span is not None:
            spans.append(("obj", self.obj_span))
        for role, (i, j) in spans:
            if not (0 <= i <= j < n):
                raise CorpusError(f"{role} span out of range: [{i},{j}] with {n} tokens")
        if self.obj_span is not None and _overlap(self.subj_span, self.obj_span):
            raise CorpusError("subject and object spans overlap")
        if self.obj_visual_index is not None:
            if self.obj_visual_index < 0:
                raise CorpusError("visual_index must be non-negative")
            if self.visual is None:
                raise CorpusError("visual object without visual features")


def _overlap(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return not (a[1] < b[0] or b[1] < a[0])


def _span(obj: dict, role: str) -> tuple[int, int]:
    span = obj.get("span")
    if not (isinstance(span, list) and len(span) == 2 and all(isinstance(x, int) for x in span)):
        raise CorpusError(f"field '{role}.span' must be [start, end]")
    return (span[0], span[1])


def _parse_line(
    rec: dict,
    instance_id: str,
    visual_dir: Path | None,
    lexicon: Mapping[str, str] | None,
) -> Instance:
    if not isinstance(rec, dict):
        raise CorpusError("line is not a JSON object")
    tokens = rec.get("tokens")
    if not (isinstance(tokens, list) and all(isinstance(t, str) for t in tokens)):
        raise CorpusError("field 'tokens' must be a list of strings")
    subj = rec.get("subj")
    obj = rec.get("obj")
    if not isinstance(subj, dict):
        raise CorpusError("field 'subj' missing")
    if not isinstance(obj, dict):
        raise CorpusError("field 'obj' missing")
    relation = rec.get("relation")
    if not isinstance(relation, str) or not relation:
        raise CorpusError("field 'relation' missing")
    subj_span = _span(subj, "subj")
    obj_span = _span(obj, "obj") if "span" in obj else None
    vis_index = obj.get("visual_index")
    if obj_span is None and not isinstance(vis_index, int):
        raise CorpusError("field 'obj' needs 'span' or integer 'visual_index'")

    visual = None
    vid = rec.get("visual_id")
    if vid is not None:
        if visual_dir is None:
            raise CorpusError(f"field 'visual_id' ({vid}) given but no visual_dir")
        vpath = Path(visual_dir) / f"{vid}.bin"
        if not vpath.exists():
            raise CorpusError(f"field 'visual_id': missing visual file {vpath}")
        visual = VisualFeatures(vid, path=vpath)

    lowered = [t.lower() for t in tokens]
    gold = (subj.get("type"), obj.get("type"))
    if lexicon is not None or None in gold:
        st, ot = tag_entity_types(lowered, subj_span, obj_span, lexicon or {}, gold)
    else:
        st, ot = gold
    inst = Instance(
        tokens=tuple(tokens),
        subj_span=subj_span,
        subj_type=st,
        obj_type=ot,
        gold_relation=relation,
        obj_span=obj_span,
        obj_visual_index=vis_index if obj_span is None else None,
        visual=visual,
        instance_id=instance_id,
    )
    inst.validate()
    return inst


def load_corpus(path, visual_dir=None, lexicon: Mapping[str, str] | None = None) -> list[Instance]:
    """Read a JSONL corpus; ``instance_id`` is ``<file stem>:<line number>``."""
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            try:
                out.append(_parse_line(rec, f"{path.stem}:{lineno}", visual_dir, lexicon))
            except CorpusError as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from None
    return out


def instance_to_record(inst: Instance) -> dict:
    obj: dict = {"type": inst.obj_type}
    if inst.obj_span is not None:
        obj["span"] = list(inst.obj_span)
    else:
        obj["visual_index"] = inst.obj_visual_index
    rec = {
        "tokens": list(inst.tokens),
        "subj": {"span": list(inst.subj_span), "type": inst.subj_type},
        "obj": obj,
        "relation": inst.gold_relation,
    }
    if inst.visual is not None:
        rec["visual_id"] = inst.visual.source_id
    return rec


def save_corpus(instances: Iterable[Instance], path, visual_dir=None) -> None:
    """Write JSONL (and visual .bin files when ``visual_dir`` is given)."""
    if visual_dir is not None:
        Path(visual_dir).mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            if inst.visual is not None and visual_dir is not None:
                write_visual(Path(visual_dir) / f"{inst.visual.source_id}.bin", inst.visual.patch_vectors)
            f.write(json.dumps(instance_to_record(inst)) + "\n")


# --- relation catalog -------------------------------------------------------


@dataclass(frozen=True)
class RelationEntry:
    label: str
    description: str
    subj_types: frozenset[str]
    obj_types: frozenset[str]


@dataclass(frozen=True)
class RelationCatalog:
    entries: tuple[RelationEntry, ...]

    def __post_init__(self):
        labels = [e.label for e in self.entries]
        if len(set(labels)) != len(labels):
            raise CorpusError("duplicate relation labels")
        if NONE_LABEL not in labels:
            raise CorpusError(f"relation catalog must contain a {NONE_LABEL!r} entry")
        for e in self.entries:
            if not e.description.strip():
                raise CorpusError(f"relation {e.label!r} has an empty description")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(labels)})

    @classmethod
    def from_dict(cls, mapping: Mapping[str, object]) -> "RelationCatalog":
        entries = []
        for label in sorted(mapping):
            entries.append(_catalog_entry(label, mapping[label]))
        return cls(tuple(entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"relation {label!r} not in catalog") from None

    def entry(self, label: str) -> RelationEntry:
        return self.entries[self.index(label)]

    def to_dict(self) -> dict:
        return {
            e.label: {
                "description": e.description,
                "subj_types": sorted(e.subj_types),
                "obj_types": sorted(e.obj_types),
            }
            for e in self.entries
        }


def _catalog_entry(label: str, value) -> RelationEntry:
    if isinstance(value, str):
        return RelationEntry(label, value, frozenset(TYPE_TAGS), frozenset(TYPE_TAGS))
    if not isinstance(value, dict):
        raise CorpusError(f"relation {label!r}: expected an object or description string")
    desc = value.get("description")
    if not isinstance(desc, str) or not desc.strip():
        raise CorpusError(f"relation {label!r}: missing description")
    subj = value.get("subj_types", list(TYPE_TAGS))
    obj = value.get("obj_types", list(TYPE_TAGS))
    return RelationEntry(label, desc, frozenset(subj), frozenset(obj))


def _no_duplicate_keys(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise CorpusError(f"duplicate relation label {k!r}")
        seen[k] = v
    return seen


def load_relation_catalog(path) -> RelationCatalog:
    """Load a label -> description catalog; entries are sorted by label."""
    try:
        mapping = json.loads(Path(path).read_text(encoding="utf-8"), object_pairs_hook=_no_duplicate_keys)
    except json.JSONDecodeError as e:
        raise CorpusError(f"{path}: invalid JSON ({e.msg})") from None
    if not isinstance(mapping, dict):
        raise CorpusError(f"{path}: catalog must be a JSON object")
    return RelationCatalog.from_dict(mapping)


def save_relation_catalog(catalog: RelationCatalog, path) -> None:
    Path(path).write_text(json.dumps(catalog.to_dict(), indent=2) + "\n", encoding="utf-8")


# --- entity typing ----------------------------------------------------------


def load_lexicon(path) -> dict[str, str]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise CorpusError(f"{path}: lexicon must map strings to type tags")
    return {k.lower(): v for k, v in data.items()}


def tag_entity_types(
    tokens: Sequence[str],
    subj_span: tuple[int, int],
    obj_span: tuple[int, int] | None,
    lexicon: Mapping[str, str],
    gold: tuple[str | None, str | None] | None = None,
    tag_set: Sequence[str] = TYPE_TAGS,
) -> tuple[str, str]:
    """Gold type if given, else lexicon lookup of the span surface, else MISC."""
    gold = gold or (None, None)

    def one(span, g):
        if g is not None:
            return g
        if span is None:
            return DEFAULT_TAG
        surface = " ".join(tokens[span[0] : span[1] + 1]).lower()
        tag = lexicon.get(surface, DEFAULT_TAG)
        return tag if tag in tag_set else DEFAULT_TAG

    return one(subj_span, gold[0]), one(obj_span, gold[1])


# --- vocabulary -------------------------------------------------------------


class Vocab:
    """Token <-> id map; reserved tokens occupy the first ids."""

    def __init__(self, tokens: Sequence[str], tag_set: Sequence[str] = TYPE_TAGS):
        self.tag_set = tuple(tag_set)
        reserved = reserved_tokens(self.tag_set)
        if list(tokens[: len(reserved)]) != reserved:
            raise CorpusError("vocab must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("vocab tokens must be unique")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def marker_ids(self) -> frozenset[int]:
        return frozenset(self._ids[t] for t in reserved_tokens(self.tag_set)[3:])

    def to_dict(self) -> dict:
        return {"tag_set": list(self.tag_set), "tokens": self.tokens}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocab":
        return cls(d["tokens"], d.get("tag_set", TYPE_TAGS))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(
    instances: Iterable[Instance],
    min_freq: int = 1,
    extra_texts: Iterable[Sequence[str]] = (),
    tag_set: Sequence[str] = TYPE_TAGS,
) -> Vocab:
    """Frequency-then-lexicographic ids over lowercased tokens.

    ``extra_texts`` are already-tokenized sequences (e.g. relation
    descriptions) counted alongside the corpus.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    for inst in instances:
        counts.update(t.lower() for t in inst.tokens)
    for toks in extra_texts:
        counts.update(t.lower() for t in toks)
    reserved = reserved_tokens(tag_set)
    for r in reserved:
        counts.pop(r, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(reserved + kept, tag_set)


# --- type prompts -----------------------------------------------------------


@dataclass(frozen=True)
class PromptConfig:
    use_types: bool = True
    use_positions: bool = True
    max_text_len: int = 64


@dataclass(frozen=True)
class MarkedSequence:
    """Marked text ids plus entity indices into the text+visual sequence.

    ``s_tilde``/``o_tilde`` are None when positions are disabled.
    ``pad_mask`` is True at real positions and covers text and visual rows.
    """

    token_ids: tuple[int, ...]
    tokens: tuple[str, ...]
    s_tilde: int | None
    o_tilde: int | None
    pad_mask: tuple[bool, ...]
    text_len: int
    visual_len: int = 0

    @property
    def total_len(self) -> int:
        return self.text_len + self.visual_len

    @property
    def positions_absent(self) -> bool:
        return self.s_tilde is None


def inject_type_prompts(
    instance: Instance,
    vocab: Vocab,
    config: PromptConfig = PromptConfig(),
    visual_len: int | None = None,
) -> MarkedSequence:
    """Wrap entity spans in role/type markers and prepend CLS.

    ``visual_len`` is the number of visual rows that will follow the text;
    it defaults to the instance's patch count.
    """
    toks = [t.lower() for t in instance.tokens]
    if instance.obj_span is not None and _overlap(instance.subj_span, instance.obj_span):
        raise PromptError("subject and object spans overlap")
    if visual_len is None:
        visual_len = instance.visual.num_patches if instance.visual is not None else 0

    s_idx = o_idx = None
    if config.use_positions:
        st = instance.subj_type if config.use_types else None
        ot = instance.obj_type if config.use_types else None
        inserts = [(instance.subj_span, subj_marker(st), SUBJ_CLOSE, "s")]
        if instance.obj_span is not None:
            inserts.append((instance.obj_span, obj_marker(ot), OBJ_CLOSE, "o"))
        for (i, j), open_tok, close_tok, _ in sorted(inserts, key=lambda x: -x[0][0]):
            toks.insert(j + 1, close_tok)
            toks.insert(i, open_tok)
        # an earlier span shifts a later opening marker right by two; +1 for CLS
        starts = [span[0] for span, *_ in inserts]
        for span, _, _, role in inserts:
            pos = 1 + span[0] + 2 * sum(1 for k in starts if k < span[0])
            if role == "s":
                s_idx = pos
            else:
                o_idx = pos

    toks = [CLS] + toks
    if len(toks) > config.max_text_len:
        last_marker = max((i for i, t in enumerate(toks) if is_marker(t)), default=0)
        if last_marker >= config.max_text_len:
            raise PromptError(
                f"{instance.instance_id}: truncating to {config.max_text_len} tokens would drop entity markers"
            )
        toks = toks[: config.max_text_len]
    text_len = len(toks)

    # a visual object with the visual segment switched off has no row to point at
    if instance.obj_span is None and config.use_positions and visual_len > 0:
        if instance.obj_visual_index is None or instance.obj_visual_index >= visual_len:
            raise PromptError(
                f"{instance.instance_id}: visual object index {instance.obj_visual_index} "
                f"outside {visual_len} visual rows"
            )
        o_idx = text_len + instance.obj_visual_index

    return MarkedSequence(
        token_ids=tuple(vocab.encode(toks)),
        tokens=tuple(toks),
        s_tilde=s_idx,
        o_tilde=o_idx,
        pad_mask=(True,) * (text_len + visual_len),
        text_len=text_len,
        visual_len=visual_len,
    )


_MARKER_RE = re.compile(r"</?[so](:[a-z]+)?>")


def is_marker(tok: str) -> bool:
    return _MARKER_RE.fullmatch(tok) is not None


def strip_markers(marked: MarkedSequence) -> list[str]:
    """Inverse of marker injection on the token strings (drops CLS too)."""
    return [t for t in marked.tokens[1:] if not is_marker(t)]

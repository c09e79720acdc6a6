"""Tag vocabulary, caption parsing, LLM prompts, descriptions and the
offline description-embedding cache."""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import ConceptWorld, embed_text, split_words, substream, tokenize

CACHE_MAGIC = b"RPPC"
CACHE_VERSION = 1
LABELS_VERSION = 1
DEFAULT_DESCRIPTIONS = 8
FULL_SCALE_DESCRIPTIONS = 50

_HEADER = struct.Struct("<4sIIII")
_FOOTER = struct.Struct("<Q")

PROMPT_TEMPLATES = (
    "Describe concisely what a(n) {} looks like",
    "How can you identify a(n) {} concisely?",
    "What does a(n) {} look like concisely?",
    "What are the identified characteristics of a(n) {}",
    "Please provide a concise description of the visual characteristics of {}",
    "Describe 50 different possible appearances of what a(n) {} looks like",
)


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    synonyms: tuple[str, ...] = ()


class LabelSystem:
    def __init__(self, categories):
        cats = [c if isinstance(c, Category) else Category(c["id"], c["name"], tuple(c.get("synonyms", ())))
                for c in categories]
        if [c.id for c in cats] != list(range(len(cats))):
            raise FormatError("category ids must be 0..N-1 in order")
        names = [c.name.lower() for c in cats]
        if len(set(names)) != len(names):
            raise FormatError("category names must be unique after lowercasing")
        for c in cats:
            if not c.name.strip() or any(not s.strip() for s in c.synonyms):
                raise FormatError(f"empty name or synonym in category {c.id}")
        self.categories = tuple(cats)
        self._by_name = {c.name.lower(): c.id for c in cats}
        self._phrases = self._build_phrases()

    def __len__(self):
        return len(self.categories)

    def __iter__(self):
        return iter(self.categories)

    @property
    def names(self):
        return [c.name for c in self.categories]

    def id_of(self, name: str) -> int:
        return self._by_name[name.lower()]

    def _build_phrases(self):
        phrases = []
        for c in self.categories:
            for text in (c.name,) + c.synonyms:
                toks = tuple(split_words(text))
                if toks:
                    phrases.append((toks, c.id))
        self._by_first = {}
        for toks, tid in phrases:
            self._by_first.setdefault(toks[0], []).append((toks, tid))
        return phrases

    @classmethod
    def from_world(cls, world: ConceptWorld) -> "LabelSystem":
        return cls(Category(c.id, c.name) for c in world.concepts)

    def to_json(self) -> dict:
        return {
            "version": LABELS_VERSION,
            "categories": [
                {"id": c.id, "name": c.name, "synonyms": list(c.synonyms)} for c in self.categories
            ],
        }

    def save(self, path):
        _atomic_write(path, json.dumps(self.to_json(), indent=1).encode("utf-8"))

    @classmethod
    def load(cls, path) -> "LabelSystem":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("version") != LABELS_VERSION:
            raise FormatError(f"{path}: unsupported label system version {doc.get('version')!r}")
        return cls(doc["categories"])


def _word_matches(token: str, word: str) -> bool:
    return token == word or token == word + "s"


def parse_tags(caption: str, ls: LabelSystem) -> set[int]:
    """Tag ids whose name or synonym occurs in ``caption`` as a whole-word phrase.

    Longer phrases claim their tokens first; a shorter phrase cannot match
    inside tokens already claimed. A trailing "s" on a caption word is
    accepted as a plural.
    """
    tokens = split_words(caption)
    candidates = []
    for start, tok in enumerate(tokens):
        heads = ls._by_first.get(tok, [])
        if tok.endswith("s"):
            heads = heads + ls._by_first.get(tok[:-1], [])
        for phrase, tid in heads:
            n = len(phrase)
            if start + n <= len(tokens) and all(
                _word_matches(tokens[start + i], phrase[i]) for i in range(1, n)
            ):
                candidates.append((-n, start, tid))
    candidates.sort()
    claimed = [False] * len(tokens)
    found = set()
    for neg_n, start, tid in candidates:
        span = range(start, start - neg_n)
        if any(claimed[i] for i in span):
            continue
        for i in span:
            claimed[i] = True
        found.add(tid)
    return found


def llm_prompts(tag_name: str) -> list[str]:
    return [t.format(tag_name) for t in PROMPT_TEMPLATES]


# ------------------------------------------------------------------ descriptions

_DESC_TEMPLATES = (
    "a {0} {1} with {2}",
    "{0} that has {1} and {2}",
    "a {2} {0} near {1}",
    "the {0} shows {1} {2}",
    "{1} {0} often {2}",
    "a photo of {0} with {1} or {2}",
)


class DescriptionSet:
    """Per-tag description strings; every tag has exactly ``D`` of them."""

    def __init__(self, per_tag: dict[int, list[str]]):
        counts = {len(v) for v in per_tag.values()}
        if len(counts) > 1:
            raise FormatError(f"tags have differing description counts {sorted(counts)}")
        for tid, descs in per_tag.items():
            if any(not d.strip() for d in descs):
                raise FormatError(f"empty description for tag {tid}")
        self.per_tag = {int(k): list(v) for k, v in sorted(per_tag.items())}

    @property
    def D(self) -> int:
        return len(next(iter(self.per_tag.values()))) if self.per_tag else 0

    def __getitem__(self, tid):
        return self.per_tag[tid]

    def __eq__(self, other):
        return isinstance(other, DescriptionSet) and self.per_tag == other.per_tag

    def save_jsonl(self, path, ls: LabelSystem):
        lines = [
            json.dumps({"tag": ls.categories[tid].name, "descriptions": descs})
            for tid, descs in self.per_tag.items()
        ]
        _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))

    @classmethod
    def load_jsonl(cls, path, ls: LabelSystem) -> "DescriptionSet":
        per_tag = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                try:
                    tid = ls.id_of(obj["tag"])
                except KeyError:
                    raise FormatError(f"{path}:{lineno}: unknown tag {obj.get('tag')!r}") from None
                per_tag[tid] = list(obj["descriptions"])
        missing = set(range(len(ls))) - set(per_tag)
        if missing:
            raise FormatError(f"{path}: no descriptions for {len(missing)} tags")
        return cls(per_tag)


def synth_descriptions(ls: LabelSystem, world: ConceptWorld, D: int = DEFAULT_DESCRIPTIONS,
                       rng_seed: int = 0) -> DescriptionSet:
    """Seeded template sentences standing in for LLM-generated descriptions.

    Each sentence draws two or three words from the concept's pool (the
    name is one candidate, not guaranteed) and fills the rest with filler
    words.
    """
    rng = substream(rng_seed, "descs")
    per_tag = {}
    for cat in ls:
        cid = _concept_for(cat, world)
        pool = world.concepts[cid].pool
        descs = []
        for _ in range(D):
            k = int(rng.integers(2, 4))
            picked = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
            fill = rng.choice(len(world.filler_words), size=4 - k, replace=False)
            words = picked + [world.filler_words[i] for i in fill]
            template = _DESC_TEMPLATES[int(rng.integers(len(_DESC_TEMPLATES)))]
            sentence = template.format(words[0], words[1], " ".join(words[2:]))
            descs.append(sentence)
        per_tag[cat.id] = descs
    return DescriptionSet(per_tag)


def _concept_for(cat: Category, world: ConceptWorld) -> int:
    for c in world.concepts:
        if c.name == cat.name.lower():
            return c.id
    raise FormatError(f"tag {cat.name!r} has no concept in the world")


# ------------------------------------------------------------------ embedding cache


class EmbeddingCache:
    """Description embeddings per tag, shape ``(num_tags, D, dim)``.

    ``tag_ids`` maps row blocks back to label-system ids so subsets keep
    their identity.
    """

    def __init__(self, rows: np.ndarray, names, tag_ids=None, provenance="external"):
        rows = np.array(rows, dtype=np.float64)
        if rows.ndim != 3 or rows.shape[1] < 1:
            raise FormatError(f"cache rows must be (num_tags, D>=1, dim), got {rows.shape}")
        norms = np.sqrt((rows * rows).sum(axis=2))
        if not np.all(np.abs(norms - 1.0) <= 1e-5):
            raise FormatError("cache rows must be unit L2 norm")
        rows.flags.writeable = False
        self.rows = rows
        self.names = list(names)
        self.tag_ids = list(range(len(self.names))) if tag_ids is None else list(tag_ids)
        if len(self.names) != rows.shape[0] or len(self.tag_ids) != rows.shape[0]:
            raise FormatError("cache index does not match row count")
        self.provenance = provenance
        self._pos = {t: i for i, t in enumerate(self.tag_ids)}

    @property
    def num_tags(self):
        return self.rows.shape[0]

    @property
    def D(self):
        return self.rows.shape[1]

    @property
    def dim(self):
        return self.rows.shape[2]

    def __contains__(self, tid):
        return tid in self._pos

    def rows_for(self, tag_ids) -> np.ndarray:
        try:
            idx = [self._pos[t] for t in tag_ids]
        except KeyError as exc:
            raise KeyError(f"tag id {exc.args[0]} is not in the embedding cache") from None
        return self.rows[idx]

    def subset(self, tag_ids) -> "EmbeddingCache":
        tag_ids = list(tag_ids)
        idx = [self._pos[t] for t in tag_ids]
        return EmbeddingCache(self.rows[idx], [self.names[i] for i in idx], tag_ids, self.provenance)

    def payload(self) -> bytes:
        return self.rows.astype("<f4").tobytes()

    def save(self, path):
        index = json.dumps({n: t for n, t in zip(self.names, self.tag_ids)}).encode("utf-8")
        blob = b"".join((
            _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, self.num_tags, self.D, self.dim),
            self.payload(), index, _FOOTER.pack(len(index)),
        ))
        _atomic_write(path, blob)

    @classmethod
    def load(cls, path) -> "EmbeddingCache":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size + _FOOTER.size:
            raise FormatError(f"{path}: truncated cache ({len(data)} bytes)")
        magic, version, n, D, dim = _HEADER.unpack_from(data)
        if magic != CACHE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CACHE_MAGIC!r}")
        if version != CACHE_VERSION:
            raise FormatError(f"{path}: unsupported cache version {version}")
        (index_len,) = _FOOTER.unpack_from(data, len(data) - _FOOTER.size)
        expected = _HEADER.size + 4 * n * D * dim + index_len + _FOOTER.size
        if len(data) != expected:
            raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
        payload = np.frombuffer(data, dtype="<f4", count=n * D * dim, offset=_HEADER.size)
        start = _HEADER.size + 4 * n * D * dim
        index = json.loads(data[start:start + index_len].decode("utf-8"))
        by_id = sorted(index.items(), key=lambda kv: kv[1])
        rows = payload.astype(np.float64).reshape(n, D, dim)
        return cls(rows, [k for k, _ in by_id], [v for _, v in by_id], provenance="external")


def build_cache(ds: DescriptionSet, world: ConceptWorld, ls: LabelSystem | None = None) -> EmbeddingCache:
    """Embed every description offline with the stub text encoder."""
    tag_ids = sorted(ds.per_tag)
    rows = np.empty((len(tag_ids), ds.D, world.embed_dim))
    for i, tid in enumerate(tag_ids):
        for j, text in enumerate(ds[tid]):
            rows[i, j] = embed_text(tokenize(text), world)
    names = [ls.categories[t].name if ls is not None else str(t) for t in tag_ids]
    return EmbeddingCache(rows, names, tag_ids, provenance=f"world:{world.seed}")


def name_cache(ls: LabelSystem, world: ConceptWorld) -> EmbeddingCache:
    """One-row cache holding each tag name's embedding (the hand-written prompt)."""
    rows = np.stack([embed_text(tokenize(c.name), world) for c in ls])[:, None, :]
    return EmbeddingCache(rows, ls.names, provenance=f"world:{world.seed}")


def _atomic_write(path, blob: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

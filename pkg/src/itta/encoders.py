"""Deterministic stand-ins for the image and text encoders.

The synthetic concept world ties both sides together: every concept owns a
small word pool, its text anchor is the normalized mean of the pool's word
vectors, and its visual signature is that anchor pushed through a fixed
random rotation. A model therefore has to learn the text-to-image mapping;
it cannot read signatures off the text embeddings directly.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels

MAX_TOKENS = 77
DEFAULT_DIM = 64
DEFAULT_CELLS = 16
_MASK64 = (1 << 64) - 1

_TOKEN_RE = re.compile(r"[^\W_]+")

# 's' is left out so no generated word is ever the plural of another
_CONSONANTS = "bcdfghjklmnprtvz"
_VOWELS = "aeiou"


class UnknownConceptError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Concept:
    id: int
    name: str
    context: tuple[str, ...]
    signature: np.ndarray

    @property
    def pool(self) -> tuple[str, ...]:
        return (self.name,) + self.context


@dataclass(frozen=True, eq=False)
class ConceptWorld:
    seed: int
    concepts: tuple[Concept, ...]
    embed_dim: int
    filler_words: tuple[str, ...]
    rotation: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.concepts)

    def concept(self, cid: int) -> Concept:
        if not 0 <= cid < len(self.concepts):
            raise UnknownConceptError(f"unknown concept id {cid}")
        return self.concepts[cid]


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stage derived from one seed."""
    tag = int.from_bytes(name.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng(np.random.SeedSequence([seed & _MASK64, tag]))


def _words(rng, count, syllables, taken):
    out = []
    while len(out) < count:
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def make_world(seed: int, num_concepts: int = 80, dim: int = DEFAULT_DIM,
               num_fillers: int = 48) -> ConceptWorld:
    rng = substream(seed, "world")
    taken: set[str] = set()
    names = _words(rng, num_concepts, 3, taken)
    context = _words(rng, 4 * num_concepts, 2, taken)
    fillers = _words(rng, num_fillers, 2, taken)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    rotation = q * np.sign(np.diag(r))
    concepts = []
    for i, name in enumerate(names):
        ctx = tuple(context[4 * i:4 * i + 4])
        anchor = embed_words((name,) + ctx, seed, dim)
        sig = rotation @ anchor
        sig /= math.sqrt(float(sig @ sig))
        sig.flags.writeable = False
        concepts.append(Concept(i, name, ctx, sig))
    rotation.flags.writeable = False
    return ConceptWorld(seed, tuple(concepts), dim, tuple(fillers), rotation)


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation, keep at most 77 tokens."""
    return split_words(text)[:MAX_TOKENS]


def word_vectors(words, seed: int, dim: int) -> np.ndarray:
    """Unit vectors for ``words`` from a seeded 64-bit mixing hash."""
    if not words:
        return np.zeros((0, dim))
    encoded = [w.encode("utf-8") for w in words]
    offsets = np.zeros(len(encoded) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(b) for b in encoded])
    buf = np.frombuffer(b"".join(encoded), dtype=np.uint8)
    keys = kernels.fnv1a(buf, offsets)
    raw = kernels.hash_uniform(keys, np.uint64(seed & _MASK64), dim)
    norms = np.sqrt((raw * raw).sum(axis=1))
    return raw / norms[:, None]


def embed_words(words, seed: int, dim: int) -> np.ndarray:
    vecs = word_vectors(list(words), seed, dim)
    if vecs.shape[0] == 0:
        return np.zeros(dim)
    m = vecs.mean(axis=0)
    return m / math.sqrt(float(m @ m))


def embed_text(tokens, world: ConceptWorld) -> np.ndarray:
    """Normalized mean of the tokens' word vectors; zeros for no tokens."""
    return embed_words(tokens, world.seed, world.embed_dim)


def embed_texts(texts, world: ConceptWorld) -> np.ndarray:
    out = np.empty((len(texts), world.embed_dim))
    for i, t in enumerate(texts):
        out[i] = embed_text(tokenize(t), world)
    return out


@dataclass(frozen=True, eq=False)
class SpatialFeatures:
    cells: np.ndarray   # (k, d)
    global_: np.ndarray  # (d,)

    @property
    def k(self):
        return self.cells.shape[0]


def _normalized_mean(cells):
    m = cells.mean(axis=0)
    n = math.sqrt(float(m @ m))
    return m / n if n > 0 else m


def features_from_cells(cells) -> SpatialFeatures:
    cells = np.ascontiguousarray(cells, dtype=np.float64)
    if cells.ndim != 2 or cells.shape[0] < 1:
        raise ValueError(f"cells must be (k>=1, d), got {cells.shape}")
    return SpatialFeatures(cells, _normalized_mean(cells))


def encode_image(present_concepts, world: ConceptWorld, noise_sigma: float, rng_seed,
                 k: int = DEFAULT_CELLS) -> SpatialFeatures:
    """Stub image encoder.

    Each present concept's signature is written into a random subset of
    ``ceil(k/4)`` cells, then every cell gets i.i.d. Gaussian noise.
    """
    ids = sorted(present_concepts)
    for cid in ids:
        world.concept(cid)
    rng = np.random.default_rng(rng_seed)
    cells = np.zeros((k, world.embed_dim))
    span = math.ceil(k / 4)
    for cid in ids:
        where = rng.choice(k, size=span, replace=False)
        cells[where] += world.concepts[cid].signature
    if noise_sigma > 0:
        cells += rng.normal(0.0, noise_sigma, size=cells.shape)
    return features_from_cells(cells)

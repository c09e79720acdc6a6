"""Inference-cost comparison of the ITC, ITM and ITTA alignment paradigms."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .alignment import ITM_DEPTH, DecoderWeights, decode_scores, itc_score, itm_score
from .encoders import DEFAULT_DIM, embed_text, encode_image, make_world, substream, tokenize

PARADIGMS = ("ITC", "ITM", "ITTA")
DEFAULT_GRID = (10, 100, 500, 1000, 2000, 4000)
WARMUP = 10
MIN_REPS = 10


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchRecord:
    paradigm: str
    num_categories: int
    reps: int
    mean_ms: float
    std_ms: float

    def __post_init__(self):
        if self.reps < MIN_REPS:
            raise ValueError(f"a benchmark record needs at least {MIN_REPS} repetitions")
        if self.mean_ms < 0:
            raise ValueError("mean time cannot be negative")


def category_text(i: int) -> str:
    return f"a photo of a c{i:05d}"


class BenchSetup:
    """One image, a shallow ITTA decoder, a depth-12 ITM decoder and
    cached category embeddings, all seeded."""

    def __init__(self, max_categories: int, seed: int = 0, dim: int = DEFAULT_DIM,
                 itta_depth: int = 2, itm_depth: int = ITM_DEPTH):
        if max_categories < 1:
            raise ValueError("num_categories must be >= 1")
        self.world = make_world(seed, dim=dim)
        rng = substream(seed, "bench")
        self.feat = encode_image([0, 1, 2], self.world, 0.1, int(rng.integers(2**63 - 1)))
        self.itta = DecoderWeights.init(dim, itta_depth, rng)
        self.itm = DecoderWeights.init(dim, itm_depth, rng)
        self.texts = [category_text(i) for i in range(max_categories)]
        # offline: embedded once, exactly as the online path would embed them
        self.cache = np.stack([embed_text(tokenize(t), self.world) for t in self.texts])

    def run(self, paradigm: str, n: int):
        if paradigm == "ITC":
            return kernels.gemm(self.cache[:n], self.feat.global_[:, None])[:, 0]
        if paradigm == "ITTA":
            return decode_scores(self.feat, self.cache[:n], self.itta)
        if paradigm == "ITM":
            out = np.empty(n)
            for i in range(n):
                q = embed_text(tokenize(self.texts[i]), self.world)
                out[i] = itm_score(self.feat, q, self.itm)
            return out
        raise ValueError(f"unknown paradigm {paradigm!r}; choose from {PARADIGMS}")

    def validate(self, n: int = 16):
        """Check the paradigms agree before timing them.

        At equal depth and weights, single-pair ITM scoring of online
        embeddings must reproduce the batched ITTA logits bitwise; ITC must
        match cosine similarity.
        """
        n = min(n, len(self.texts))
        batched = decode_scores(self.feat, self.cache[:n], self.itta)
        for i in range(n):
            q = embed_text(tokenize(self.texts[i]), self.world)
            if not np.array_equal(q, self.cache[i]):
                raise BenchError(f"online embedding of category {i} differs from its cached row")
            if itm_score(self.feat, q, self.itta) != batched[i]:
                raise BenchError(f"ITM and ITTA logits differ for category {i}")
        itc = self.run("ITC", n)
        for i in range(n):
            if not math.isclose(itc[i], itc_score(self.feat.global_, self.cache[i]), abs_tol=1e-12):
                raise BenchError(f"ITC score differs from cosine for category {i}")


def bench_paradigm(paradigm: str, num_categories: int, reps: int = 100, setup: BenchSetup | None = None,
                   warmup: int = WARMUP) -> BenchRecord:
    if num_categories < 1:
        raise ValueError("num_categories must be >= 1")
    if paradigm not in PARADIGMS:
        raise ValueError(f"unknown paradigm {paradigm!r}; choose from {PARADIGMS}")
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}")
    if setup is None:
        setup = BenchSetup(num_categories)
    if num_categories > len(setup.texts):
        raise ValueError(f"setup holds {len(setup.texts)} categories, asked for {num_categories}")
    for _ in range(warmup):
        setup.run(paradigm, num_categories)
    times = np.empty(reps)
    for r in range(reps):
        t0 = time.perf_counter()
        setup.run(paradigm, num_categories)
        times[r] = time.perf_counter() - t0
    times *= 1e3
    return BenchRecord(paradigm, num_categories, reps, float(times.mean()), float(times.std()))


def bench_sweep(grid=DEFAULT_GRID, reps: int = 100, itm_reps: int | None = None, seed: int = 0,
                warmup: int = WARMUP, on_record=None) -> list[BenchRecord]:
    """Every paradigm at every category count.

    ``itm_reps`` overrides the repetition count for ITM alone, whose
    per-rep cost dominates the sweep.
    """
    grid = [int(n) for n in grid]
    if not grid or min(grid) < 1:
        raise ValueError("category grid must be non-empty and positive")
    setup = BenchSetup(max(grid), seed)
    setup.validate()
    out = []
    for n in grid:
        for paradigm in PARADIGMS:
            r = itm_reps if paradigm == "ITM" and itm_reps else reps
            rec = bench_paradigm(paradigm, n, r, setup, warmup)
            out.append(rec)
            if on_record is not None:
                on_record(rec)
    return out


def bench_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["paradigm", "num_categories", "reps", "mean_ms", "std_ms"])
    for r in records:
        w.writerow([r.paradigm, r.num_categories, r.reps, f"{r.mean_ms:.6f}", f"{r.std_ms:.6f}"])
    return buf.getvalue()


def by_paradigm(records) -> dict:
    out = {p: {} for p in PARADIGMS}
    for r in records:
        out[r.paradigm][r.num_categories] = r.mean_ms
    return out


def monotone_within(values, tol: float = 0.05) -> bool:
    """Nondecreasing, allowing each step to dip by ``tol`` of the previous value."""
    return all(b >= a * (1.0 - tol) for a, b in zip(values, values[1:]))

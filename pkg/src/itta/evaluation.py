"""Ranking metrics, score histograms and the supervision-mode ablation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .alignment import decode_scores, fuse_queries, sigmoid
from .encoders import ConceptWorld, substream
from .labels import EmbeddingCache, LabelSystem, _atomic_write, name_cache
from .training import ModeFlags, TrainConfig, TrainResult, holdout_split, make_pool, train

HIST_BINS = 64
TEST_IMAGES = 500


def _ranked_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching vectors")
    # stable sort on the negated scores keeps ties in ascending index order
    order = np.argsort(-scores, kind="stable")
    return np.ascontiguousarray((labels[order] > 0).astype(np.float64))


def average_precision(scores, labels) -> float:
    """AP of one category's ranking; ``nan`` when there are no positives."""
    return float(kernels.ap_sorted(_ranked_labels(scores, labels)))


def mean_ap(score_matrix, label_matrix, columns=None):
    """Mean AP over ``columns``; returns ``(mAP, per_column_AP, skipped)``.

    Columns with no positive image are skipped and counted.
    """
    S = np.asarray(score_matrix, dtype=np.float64)
    Y = np.asarray(label_matrix)
    cols = range(S.shape[1]) if columns is None else columns
    per, skipped = {}, 0
    for c in cols:
        ap = average_precision(S[:, c], Y[:, c])
        if math.isnan(ap):
            skipped += 1
        else:
            per[c] = ap
    m = float(np.mean(list(per.values()))) if per else float("nan")
    return m, per, skipped


def prf_at_threshold(scores, labels, t: float):
    """Precision, recall and F1 of ``score > t``, with zero for 0/0."""
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0
    pred = s > t
    tp = int(np.sum(pred & y))
    n_pred, n_pos = int(pred.sum()), int(y.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_pos if n_pos else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def score_histogram(scores, labels, nbins: int = HIST_BINS):
    """Positive and negative counts over bins with edges ``i / nbins``.

    A score of exactly 1.0 lands in the last bin.
    """
    s = np.ascontiguousarray(np.asarray(scores, dtype=np.float64).ravel())
    y = np.asarray(labels).ravel() > 0
    if s.size and (s.min() < 0 or s.max() > 1):
        raise ValueError("histogram scores must lie in [0, 1]")
    pos = kernels.histogram(np.ascontiguousarray(s[y]), nbins)
    neg = kernels.histogram(np.ascontiguousarray(s[~y]), nbins)
    return pos, neg


def histogram_csv(pos, neg) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = len(pos)
    w.writerow(["bin_lo", "bin_hi", "positive", "negative"])
    for i in range(n):
        w.writerow([repr(i / n), repr((i + 1) / n), int(pos[i]), int(neg[i])])
    return buf.getvalue()


# ------------------------------------------------------------------ scoring


@dataclass(frozen=True, eq=False)
class TestSet:
    __test__ = False  # not a pytest class

    feats: list
    labels: np.ndarray   # (n_images, num_tags) ground truth from the concept sets


def make_test_set(world: ConceptWorld, ls: LabelSystem, n: int = TEST_IMAGES, seed: int = 0,
                  noise_sigma: float = 0.1, k: int = 16) -> TestSet:
    pool = make_pool(world, ls, n, substream(seed, "test"), noise_sigma, k)
    labels = np.zeros((n, len(ls)), dtype=np.int8)
    for i, t in enumerate(pool):
        labels[i, sorted(t.concepts)] = 1
    return TestSet([t.image for t in pool], labels)


def tag_queries(mode: str, world, ls, cache: EmbeddingCache | None):
    """Per-tag query rows ``(N, D, d)`` and whether to re-weight them.

    Modes trained on descriptions score every tag through its cached
    descriptions; the others use the tag-name embedding for every tag,
    held-out or not.
    """
    flags = ModeFlags.of(mode)
    ids = [c.id for c in ls]
    if flags.desc:
        if cache is None:
            raise ValueError(f"mode {mode!r} needs a description cache")
        return cache.rows_for(ids), flags.reweight
    return name_cache(ls, world).rows_for(ids), False


def score_matrix(result: TrainResult, test: TestSet, world, ls, cache) -> np.ndarray:
    """Tag probabilities ``(n_images, num_tags)``; images are scored in id order."""
    rows, reweight = tag_queries(result.config.mode, world, ls, cache)
    rp = result.reweight if reweight else None
    out = np.empty((len(test.feats), rows.shape[0]))
    for i, feat in enumerate(test.feats):
        out[i] = sigmoid(decode_scores(feat, fuse_queries(feat.global_, rows, rp), result.decoder))
    return out


@dataclass
class EvalReport:
    mode: str
    per_category_ap: dict
    map_common: float
    map_uncommon: float
    skipped_common: int
    skipped_uncommon: int
    threshold: float
    precision: float
    recall: float
    f1: float
    median_positive: float
    median_negative: float
    hist_positive: list = field(repr=False, default_factory=list)
    hist_negative: list = field(repr=False, default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_category_ap"] = {str(k): v for k, v in self.per_category_ap.items()}
        return json.dumps(d, indent=1, allow_nan=True)

    def save(self, path):
        _atomic_write(path, self.to_json().encode("utf-8"))


def evaluate(result: TrainResult, test: TestSet, world, ls, cache, threshold: float = 0.5,
             scores=None) -> EvalReport:
    """Metrics over the fixed test set.

    Thresholded metrics and histograms cover the common (train-visible) tags.
    """
    S = score_matrix(result, test, world, ls, cache) if scores is None else scores
    Y = test.labels
    common = [c.id for c in ls if c.id not in result.holdout]
    uncommon = sorted(result.holdout)
    m_c, per_c, skip_c = mean_ap(S, Y, common)
    m_u, per_u, skip_u = mean_ap(S, Y, uncommon)
    sc, yc = S[:, common], Y[:, common]
    p, r, f1 = prf_at_threshold(sc, yc, threshold)
    pos, neg = score_histogram(sc, yc)
    pos_s, neg_s = sc[yc > 0], sc[yc == 0]
    return EvalReport(
        mode=result.config.mode,
        per_category_ap={**per_c, **per_u},
        map_common=m_c, map_uncommon=m_u, skipped_common=skip_c, skipped_uncommon=skip_u,
        threshold=threshold, precision=p, recall=r, f1=f1,
        median_positive=float(np.median(pos_s)) if pos_s.size else float("nan"),
        median_negative=float(np.median(neg_s)) if neg_s.size else float("nan"),
        hist_positive=pos.tolist(), hist_negative=neg.tolist(),
    )


# ------------------------------------------------------------------ ablation


ABLATION_MODES = ("tag-only", "tag+text", "tag+text+desc", "tag+text+desc+reweight")


@dataclass(frozen=True)
class AblationRow:
    mode: str
    seed: int
    map_common: float
    map_uncommon: float


def ablation_run(modes, base: TrainConfig, seeds, world, ls, cache, test: TestSet | None = None,
                 on_row=None, on_report=None) -> list[AblationRow]:
    """Train and evaluate every (mode, seed).

    Runs sharing a seed share the training pool and the initial weights, so
    modes differ only in supervision. The holdout split comes from the world.
    """
    holdout = holdout_split(len(ls), base.holdout_fraction, world.seed)
    if test is None:
        test = make_test_set(world, ls, TEST_IMAGES, world.seed, base.noise_sigma, base.cells)
    rows = []
    for seed in seeds:
        cfg0 = base.replace(seed=seed)
        pool = make_pool(world, ls, cfg0.num_train, substream(seed, "data"), cfg0.noise_sigma, cfg0.cells)
        for mode in modes:
            cfg = cfg0.replace(mode=mode)
            result = train(cfg, world, ls, cache, holdout=holdout, pool=pool)
            rep = evaluate(result, test, world, ls, cache)
            row = AblationRow(mode, seed, rep.map_common, rep.map_uncommon)
            rows.append(row)
            if on_row is not None:
                on_row(row)
            if on_report is not None:
                on_report(row, rep)
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "seed", "map_common", "map_uncommon"])
    for r in rows:
        w.writerow([r.mode, r.seed, repr(r.map_common), repr(r.map_uncommon)])
    return buf.getvalue()


def ablation_means(rows) -> dict:
    by = {}
    for r in rows:
        by.setdefault(r.mode, []).append((r.map_common, r.map_uncommon))
    return {m: tuple(np.mean(v, axis=0)) for m, v in by.items()}

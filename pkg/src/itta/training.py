"""Synthetic triplets, the training loop and checkpoint I/O."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .alignment import DecoderWeights, ReweightParams, decode_graph, reweight_graph
from .encoders import ConceptWorld, SpatialFeatures, embed_texts, encode_image, substream
from .labels import EmbeddingCache, FormatError, LabelSystem, _atomic_write, name_cache, parse_tags
from .losses import TAG_ASL, TEXT_ASL, AslConfig, asl, batch_contrastive, bce
from .numerics import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RPPW"
CKPT_VERSION = 1

MODES = {
    # name: (tag branch, text branch, descriptions, re-weighting)
    "tag-only": (True, False, False, False),
    "text-only": (False, True, False, False),
    "tag+text": (True, True, False, False),
    "tag+text+desc": (True, True, True, False),
    "tag+text+desc+reweight": (True, True, True, True),
}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModeFlags:
    tag: bool
    text: bool
    desc: bool
    reweight: bool

    @classmethod
    def of(cls, mode: str) -> "ModeFlags":
        try:
            return cls(*MODES[mode])
        except KeyError:
            raise ValueError(f"unknown supervision mode {mode!r}; choose from {sorted(MODES)}") from None


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 500
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.05
    lr_decay: float = 0.9
    seed: int = 0
    mode: str = "tag+text"
    tag_asl: AslConfig = TAG_ASL
    text_asl: AslConfig = TEXT_ASL
    tag_loss: str = "asl"    # asl | bce
    text_loss: str = "asl"   # asl | bce | ce
    tag_weight: float = 1.0
    text_weight: float = 1.0
    descriptions: int = 8
    holdout_fraction: float = 0.2
    num_train: int = 4000
    noise_sigma: float = 0.1
    cells: int = 16
    depth: int = 2
    proj_dim: int = 0        # 0 -> embedding width
    # Small projector init keeps the first weightings near-uniform and the
    # reduced rate stops the projectors memorizing the training tags.
    proj_init: float = 0.1
    reweight_lr_scale: float = 0.1
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.tag_asl, dict):
            self.tag_asl = AslConfig(**self.tag_asl)
        if isinstance(self.text_asl, dict):
            self.text_asl = AslConfig(**self.text_asl)
        self.betas = tuple(self.betas)
        ModeFlags.of(self.mode)
        for name in ("batch_size", "steps", "num_train", "depth", "descriptions", "cells"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.warmup < 0 or self.weight_decay < 0 or self.reweight_lr_scale < 0:
            raise ValueError("lr must be positive; warmup and weight decay non-negative")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        if self.tag_loss not in ("asl", "bce") or self.text_loss not in ("asl", "bce", "ce"):
            raise ValueError("unknown loss choice")

    @property
    def epoch_steps(self) -> int:
        return max(1, self.num_train // self.batch_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# Appendix-A scale, kept for reference runs on real hardware.
FULL_SCALE = dict(batch_size=720, lr=1e-4, warmup=3000, weight_decay=0.05, descriptions=50)


# ------------------------------------------------------------------ data


@dataclass(frozen=True, eq=False)
class Triplet:
    concepts: frozenset
    image_seed: int
    image: SpatialFeatures
    caption: str
    tags: frozenset


_JOINERS = ("near", "with", "and", "beside", "under")


def make_caption(names_and_context, fillers, rng) -> str:
    parts = []
    for name, ctx in names_and_context:
        if rng.random() < 0.5:
            parts.append(f"a {ctx[int(rng.integers(len(ctx)))]} {name}")
        else:
            parts.append(f"a {name}")
    words = [parts[0]]
    for part in parts[1:]:
        words.append(_JOINERS[int(rng.integers(len(_JOINERS)))])
        words.append(part)
    tail = [fillers[i] for i in rng.choice(len(fillers), size=int(rng.integers(1, 3)), replace=False)]
    return " ".join(words + ["in the"] + tail)


def gen_triplet(world: ConceptWorld, ls: LabelSystem, rng: np.random.Generator,
                noise_sigma: float = 0.1, k: int = 16) -> Triplet:
    n = int(rng.integers(2, 5))
    ids = sorted(int(i) for i in rng.choice(len(world), size=n, replace=False))
    order = rng.permutation(ids)
    caption = make_caption(
        [(world.concepts[i].name, world.concepts[i].context) for i in order], world.filler_words, rng
    )
    image_seed = int(rng.integers(0, 2**63 - 1))
    image = encode_image(ids, world, noise_sigma, image_seed, k=k)
    return Triplet(frozenset(ids), image_seed, image, caption, frozenset(parse_tags(caption, ls)))


def make_pool(world, ls, n, rng, noise_sigma=0.1, k=16) -> list[Triplet]:
    return [gen_triplet(world, ls, rng, noise_sigma, k) for _ in range(n)]


def holdout_split(num_tags: int, fraction: float, seed: int) -> frozenset:
    """Held-out ("uncommon") tag ids; depends only on the world seed."""
    n_out = int(round(num_tags * fraction))
    rng = substream(seed, "holdout")
    return frozenset(int(i) for i in rng.choice(num_tags, size=n_out, replace=False))


# ------------------------------------------------------------------ loss


def branch_loss(p, targets, kind, cfg: AslConfig):
    if kind == "asl":
        return nx.mean(asl(p, targets, cfg))
    if kind == "bce":
        return nx.mean(bce(p, targets))
    raise ValueError(f"unknown loss {kind!r}")


def itta_loss(dw, rp, cells, globals_, tag_rows, tag_targets, text_emb, flags: ModeFlags,
              cfg: TrainConfig):
    """Forward pass and losses for one batch.

    ``tag_rows`` is ``(N, D, d)``: description rows in description modes,
    name embeddings (``D == 1``) otherwise. Returns ``(tag, text, total)``
    tensors; an unused branch contributes a constant zero.
    """
    B = cells.shape[0]
    parts = []
    N = 0
    if flags.tag:
        N = tag_rows.shape[0]
        if flags.reweight:
            parts.append(reweight_graph(globals_, tag_rows, rp))
        else:
            mean = tag_rows.mean(axis=1) if flags.desc else tag_rows[:, 0, :]
            parts.append(Tensor(np.broadcast_to(mean, (B,) + mean.shape)))
    if flags.text:
        parts.append(Tensor(np.broadcast_to(text_emb, (B,) + text_emb.shape)))
    queries = parts[0] if len(parts) == 1 else nx.concat(parts, axis=1)
    logits = decode_graph(cells, queries, dw)
    zero = Tensor(np.zeros(()))
    loss_tag = loss_text = zero
    if flags.tag:
        p = nx.sigmoid(logits[:, :N])
        loss_tag = branch_loss(p, tag_targets, cfg.tag_loss, cfg.tag_asl)
    if flags.text:
        text_logits = logits[:, N:]
        if cfg.text_loss == "ce":
            loss_text = batch_contrastive(text_logits)
        else:
            p = nx.sigmoid(text_logits)
            loss_text = branch_loss(p, np.eye(B), cfg.text_loss, cfg.text_asl)
    total = loss_tag * cfg.tag_weight + loss_text * cfg.text_weight
    return loss_tag, loss_text, total


# ------------------------------------------------------------------ optimizer


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Rate for 1-based ``step``: linear warmup, then x``lr_decay`` per epoch."""
    warm = min(1.0, step / cfg.warmup) if cfg.warmup > 0 else 1.0
    epoch = (step - 1) // cfg.epoch_steps
    return cfg.lr * warm * cfg.lr_decay ** epoch


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, lr_scale=None):
        self.params = params
        self.lr_scale = {k: 1.0 for k in params}
        self.lr_scale.update(lr_scale or {})
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.value.ndim >= 2:
                update = update + self.wd * p.value
            p.value -= (lr * self.lr_scale[k]) * update


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    decoder: DecoderWeights
    reweight: ReweightParams
    trace: list = field(default_factory=list)   # (step, loss_tag, loss_text, loss_total)
    holdout: frozenset = frozenset()
    train_tag_ids: list = field(default_factory=list)
    holdout_touches: int = 0
    config: TrainConfig | None = None

    def named(self) -> dict:
        return {**self.decoder.named(), **self.reweight.named()}


def init_params(cfg: TrainConfig, dim: int):
    rng = substream(cfg.seed, "init")
    dw = DecoderWeights.init(dim, cfg.depth, rng)
    rp = ReweightParams.init(dim, cfg.proj_dim or dim, rng, cfg.proj_init)
    return dw, rp


def train(cfg: TrainConfig, world: ConceptWorld, ls: LabelSystem, cache: EmbeddingCache | None,
          holdout=None, pool=None) -> TrainResult:
    """Train the alignment decoder (and projectors in re-weighting mode).

    Held-out tags never enter the tagging branch: their columns, targets and
    cached descriptions are dropped. Their names can still occur in
    captions, which feed the text branch.
    """
    flags = ModeFlags.of(cfg.mode)
    if holdout is None:
        holdout = holdout_split(len(ls), cfg.holdout_fraction, world.seed)
    holdout = frozenset(holdout)
    train_ids = [c.id for c in ls if c.id not in holdout]
    col_of = {t: j for j, t in enumerate(train_ids)}

    if flags.desc:
        if cache is None:
            raise ValueError(f"mode {cfg.mode!r} needs a description cache")
        tag_rows = cache.rows_for(train_ids)
    else:
        tag_rows = name_cache(ls, world).rows_for(train_ids)

    dw, rp = init_params(cfg, world.embed_dim)
    if pool is None:
        pool = make_pool(world, ls, cfg.num_train, substream(cfg.seed, "data"), cfg.noise_sigma, cfg.cells)
    order_rng = substream(cfg.seed, "train")

    tdw = dw.map(lambda a: Tensor(a, role="parameter"))
    trp = rp.map(lambda a: Tensor(a, role="parameter"))
    params = dict(tdw.named())
    scales = {}
    if flags.reweight:
        params.update(trp.named())
        scales = {k: cfg.reweight_lr_scale for k in trp.named()}
    opt = AdamW(params, cfg.betas, cfg.adam_eps, cfg.weight_decay, scales)

    B = min(cfg.batch_size, len(pool))
    perm, cursor = order_rng.permutation(len(pool)), 0
    trace, touches = [], 0
    for step in range(1, cfg.steps + 1):
        if cursor + B > len(perm):
            perm, cursor = order_rng.permutation(len(pool)), 0
        batch = [pool[i] for i in perm[cursor:cursor + B]]
        cursor += B

        cells = np.stack([t.image.cells for t in batch])
        globals_ = np.stack([t.image.global_ for t in batch])
        text_emb = embed_texts([t.caption for t in batch], world) if flags.text else None
        targets = np.zeros((B, len(train_ids)))
        for b, t in enumerate(batch):
            for tid in t.tags:
                if tid in col_of:
                    targets[b, col_of[tid]] = 1.0
        touches += len(holdout.intersection(train_ids))

        opt.zero_grad()
        lt, lx, total = itta_loss(tdw, trp, cells, globals_, tag_rows, targets, text_emb, flags, cfg)
        value = float(total.value)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}")
        total.backward()
        opt.step(learning_rate(step, cfg))
        trace.append((step, float(lt.value), float(lx.value), value))
        if step % 100 == 0:
            log.info("step %d loss %.5f", step, value)

    return TrainResult(
        decoder=tdw.map(lambda t: t.value.copy()),
        reweight=trp.map(lambda t: t.value.copy()),
        trace=trace, holdout=holdout, train_tag_ids=train_ids,
        holdout_touches=touches, config=cfg,
    )


def write_trace(trace, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss_tag", "loss_text", "loss_total"])
    for step, a, b, c in trace:
        w.writerow([step, repr(a), repr(b), repr(c)])
    _atomic_write(path, buf.getvalue().encode("utf-8"))


# ------------------------------------------------------------------ checkpoints


def checkpoint_bytes(named: dict) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(named))]
    for name, arr in named.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def save_checkpoint(named: dict, path):
    _atomic_write(path, checkpoint_bytes(named))


class _Reader:
    def __init__(self, data, path):
        self.data, self.path, self.pos = data, path, 0

    def take(self, n):
        end = self.pos + n
        if end > len(self.data):
            raise FormatError(
                f"{self.path}: truncated checkpoint, expected at least {end} bytes, found {len(self.data)}"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u32(self, n=1):
        return struct.unpack(f"<{n}I", self.take(4 * n))


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    magic = r.take(4)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    version, count = r.u32(2)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    named = {}
    for _ in range(count):
        (nlen,) = r.u32()
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.u32()
        shape = r.u32(rank) if rank else ()
        size = int(np.prod(shape)) if rank else 1
        named[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after {count} entries")
    return named


def model_from_checkpoint(named: dict):
    return DecoderWeights.from_named(named), ReweightParams.from_named(named)

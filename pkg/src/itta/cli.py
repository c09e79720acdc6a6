"""``itta`` command-line driver."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, bench, evaluation, training
from .alignment import decode_scores, fuse_queries, reweight_weights, sigmoid
from .encoders import encode_image, make_world, substream
from .labels import (
    DescriptionSet, EmbeddingCache, FormatError, LabelSystem, _atomic_write, build_cache,
    llm_prompts, synth_descriptions,
)
from .training import TrainConfig, TrainResult

log = logging.getLogger("itta")

SUBCOMMANDS = ("synth-data", "build-descriptions", "embed-cache", "train", "eval", "ablate", "bench", "score")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ manifest


class RunManifest:
    def __init__(self, command, argv, config, seeds):
        self.doc = {
            "command": command,
            "argv": list(argv),
            "config": config,
            "seeds": seeds,
            "tool_version": __version__,
            "outputs": [],
            "started": datetime.now(timezone.utc).isoformat(),
            "finished": None,
        }

    def output(self, path):
        self.doc["outputs"].append(str(path))

    def write(self, out_dir: Path):
        self.doc["finished"] = datetime.now(timezone.utc).isoformat()
        _atomic_write(out_dir / "manifest.json", json.dumps(self.doc, indent=1).encode("utf-8"))


def _write_text(path: Path, text: str, manifest: RunManifest):
    _atomic_write(path, text.encode("utf-8"))
    manifest.output(path)


# ------------------------------------------------------------------ shared setup


def _config(args) -> TrainConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(base, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
    overrides = {
        "mode": getattr(args, "mode", None),
        "steps": getattr(args, "steps", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr": getattr(args, "lr", None),
        "descriptions": getattr(args, "descriptions", None),
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    base["seed"] = args.seed
    return TrainConfig.from_dict(base)


def _world(args):
    world = make_world(args.seed)
    return world, LabelSystem.from_world(world)


def _cache(args, world, ls, D):
    if getattr(args, "cache", None):
        return EmbeddingCache.load(args.cache)
    return build_cache(synth_descriptions(ls, world, D, args.seed), world, ls)


def _descriptions(args, world, ls, D):
    if getattr(args, "descriptions_file", None):
        return DescriptionSet.load_jsonl(args.descriptions_file, ls)
    return synth_descriptions(ls, world, D, args.seed)


def _load_run(args):
    """Checkpoint, its training config and the world it was trained in."""
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.train_config) if args.train_config else ckpt.with_name("train_config.json")
    cfg = TrainConfig.from_dict(json.loads(cfg_path.read_text(encoding="utf-8")))
    dw, rp = training.model_from_checkpoint(training.load_checkpoint(ckpt))
    world = make_world(cfg.seed)
    ls = LabelSystem.from_world(world)
    holdout = training.holdout_split(len(ls), cfg.holdout_fraction, world.seed)
    return TrainResult(dw, rp, holdout=holdout, config=cfg), world, ls


def _run_cache(args, world, ls, cfg):
    if args.cache:
        return EmbeddingCache.load(args.cache)
    return build_cache(synth_descriptions(ls, world, cfg.descriptions, cfg.seed), world, ls)


def _run_descriptions(args, world, ls, cfg):
    if args.descriptions_file:
        return DescriptionSet.load_jsonl(args.descriptions_file, ls)
    return synth_descriptions(ls, world, cfg.descriptions, cfg.seed)


# ------------------------------------------------------------------ commands


def cmd_synth_data(args, out, manifest):
    world, ls = _world(args)
    cfg = _config(args)
    rng = substream(args.seed, "data")
    pool = training.make_pool(world, ls, args.num_triplets, rng, cfg.noise_sigma, cfg.cells)
    world_doc = {
        "seed": world.seed, "embed_dim": world.embed_dim, "filler_words": list(world.filler_words),
        "concepts": [{"id": c.id, "name": c.name, "context": list(c.context)} for c in world.concepts],
    }
    _write_text(out / "world.json", json.dumps(world_doc, indent=1), manifest)
    ls.save(out / "labels.json")
    manifest.output(out / "labels.json")
    lines = [
        json.dumps({"concepts": sorted(t.concepts), "image_seed": t.image_seed,
                    "caption": t.caption, "tags": sorted(t.tags)})
        for t in pool
    ]
    _write_text(out / "triplets.jsonl", "\n".join(lines) + "\n", manifest)
    print(f"wrote {len(pool)} triplets over {len(ls)} tags to {out}")


def cmd_build_descriptions(args, out, manifest):
    world, ls = _world(args)
    ds = synth_descriptions(ls, world, args.descriptions or 8, args.seed)
    ds.save_jsonl(out / "descriptions.jsonl", ls)
    manifest.output(out / "descriptions.jsonl")
    prompts = [json.dumps({"tag": c.name, "prompts": llm_prompts(c.name)}) for c in ls]
    _write_text(out / "prompts.jsonl", "\n".join(prompts) + "\n", manifest)
    print(f"wrote {ds.D} descriptions for each of {len(ls)} tags")


def cmd_embed_cache(args, out, manifest):
    world, ls = _world(args)
    ds = _descriptions(args, world, ls, args.descriptions or 8)
    cache = build_cache(ds, world, ls)
    cache.save(out / "cache.rppc")
    manifest.output(out / "cache.rppc")
    print(f"cached {cache.num_tags} x {cache.D} x {cache.dim} description embeddings")


def cmd_train(args, out, manifest):
    world, ls = _world(args)
    cfg = _config(args)
    manifest.doc["config"] = cfg.to_dict()
    cache = _cache(args, world, ls, cfg.descriptions)
    result = training.train(cfg, world, ls, cache)
    training.save_checkpoint(result.named(), out / "checkpoint.rppw")
    manifest.output(out / "checkpoint.rppw")
    training.write_trace(result.trace, out / "loss.csv")
    manifest.output(out / "loss.csv")
    _write_text(out / "train_config.json", json.dumps(cfg.to_dict(), indent=1), manifest)
    first = np.mean([t[3] for t in result.trace[:50]])
    last = np.mean([t[3] for t in result.trace[-50:]])
    print(f"trained {cfg.steps} steps in mode {cfg.mode}: loss {first:.4f} -> {last:.4f}")


def cmd_eval(args, out, manifest):
    result, world, ls = _load_run(args)
    manifest.doc["config"] = result.config.to_dict()
    cache = _run_cache(args, world, ls, result.config)
    test = evaluation.make_test_set(world, ls, args.num_images, world.seed,
                                    result.config.noise_sigma, result.config.cells)
    rep = evaluation.evaluate(result, test, world, ls, cache, args.threshold)
    rep.save(out / "report.json")
    manifest.output(out / "report.json")
    _write_text(out / "histogram.csv", evaluation.histogram_csv(rep.hist_positive, rep.hist_negative), manifest)
    print(f"mAP common {100 * rep.map_common:.2f}  uncommon {100 * rep.map_uncommon:.2f}  "
          f"F1@{args.threshold} {rep.f1:.3f}")


def _int_list(text, what):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of integers, got {text!r}") from None


def cmd_ablate(args, out, manifest):
    world, ls = _world(args)
    cfg = _config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        training.ModeFlags.of(m)
    seeds = _int_list(args.seeds, "--seeds")
    manifest.doc["config"] = cfg.to_dict()
    manifest.doc["seeds"] = {"world": args.seed, "train": seeds}
    cache = _cache(args, world, ls, cfg.descriptions)
    rows = evaluation.ablation_run(
        modes, cfg, seeds, world, ls, cache,
        on_row=lambda r: print(f"{r.mode:24s} seed {r.seed}: common {100 * r.map_common:.2f} "
                               f"uncommon {100 * r.map_uncommon:.2f}", flush=True),
    )
    _write_text(out / "ablation.csv", evaluation.ablation_csv(rows), manifest)


def cmd_bench(args, out, manifest):
    grid = _int_list(args.grid, "--grid")
    recs = bench.bench_sweep(
        grid, args.reps, args.itm_reps, args.seed,
        on_record=lambda r: print(f"{r.paradigm:5s} {r.num_categories:6d}  {r.mean_ms:12.4f} ms "
                                  f"(std {r.std_ms:.4f}, {r.reps} reps)", flush=True),
    )
    _write_text(out / "bench.csv", bench.bench_csv(recs), manifest)


def cmd_score(args, out, manifest):
    result, world, ls = _load_run(args)
    cfg = result.config
    manifest.doc["config"] = cfg.to_dict()
    cache = _run_cache(args, world, ls, cfg)
    if args.concepts:
        concepts = _int_list(args.concepts, "--concepts")
        image_seed = int(substream(args.seed, "score").integers(2**63 - 1))
        feat = encode_image(concepts, world, cfg.noise_sigma, image_seed, cfg.cells)
        caption = None
    else:
        t = training.gen_triplet(world, ls, substream(args.seed, "score"), cfg.noise_sigma, cfg.cells)
        feat, concepts, caption = t.image, sorted(t.concepts), t.caption
    rows, reweight = evaluation.tag_queries(cfg.mode, world, ls, cache)
    rp = result.reweight if reweight else None
    probs = sigmoid(decode_scores(feat, fuse_queries(feat.global_, rows, rp), result.decoder))
    top_desc = {}
    if rp is not None:
        weights = reweight_weights(feat.global_, rows, rp)
        ds = _run_descriptions(args, world, ls, cfg)
        for c in ls:
            j = int(np.argmax(weights[c.id]))
            top_desc[c.id] = (ds[c.id][j], float(weights[c.id, j]))
    names = {c.id: c.name for c in world.concepts}
    print("image concepts: " + ", ".join(names[c] for c in concepts))
    if caption:
        print(f"caption: {caption}")
    order = sorted(range(len(ls)), key=lambda i: (-probs[i], i))
    lines = []
    for i in order:
        if probs[i] < args.threshold:
            break
        mark = "*" if i in result.holdout else " "
        line = f"{probs[i]:.4f} {mark} {ls.categories[i].name}"
        if i in top_desc:
            text, w = top_desc[i]
            line += f"  [{w:.3f}] {text}"
        lines.append(line)
    print("\n".join(lines) if lines else f"no tag at or above {args.threshold}")
    _write_text(out / "scores.txt", "\n".join(lines) + "\n", manifest)


COMMANDS = {
    "synth-data": cmd_synth_data,
    "build-descriptions": cmd_build_descriptions,
    "embed-cache": cmd_embed_cache,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "score": cmd_score,
}


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--config", help="JSON file overriding training defaults")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="itta", description="Desk-scale image-tag-text alignment experiments.")
    p.add_argument("--version", action="version", version=f"itta {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth-data", parents=[common], help="world, label system and triplets")
    s.add_argument("--num-triplets", type=int, default=1000)

    s = sub.add_parser("build-descriptions", parents=[common], help="description JSONL and LLM prompts")
    s.add_argument("--descriptions", type=int, help="descriptions per tag (D)")

    s = sub.add_parser("embed-cache", parents=[common], help="binary description-embedding cache")
    s.add_argument("--descriptions", type=int, help="descriptions per tag (D)")
    s.add_argument("--descriptions-file", help="description JSONL to embed instead of synthetic ones")

    def model_flags(s):
        s.add_argument("--mode", choices=sorted(training.MODES))
        s.add_argument("--steps", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--descriptions", type=int, help="descriptions per tag (D)")
        s.add_argument("--cache", help="RPPC cache file (default: built from synthetic descriptions)")

    s = sub.add_parser("train", parents=[common], help="train and write checkpoint + loss trace")
    model_flags(s)

    def run_flags(s):
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--train-config", help="training config JSON (default: next to the checkpoint)")
        s.add_argument("--cache", help="RPPC cache file (default: built from synthetic descriptions)")
        s.add_argument("--descriptions-file", help="description JSONL shown next to re-weighted tags")

    s = sub.add_parser("eval", parents=[common], help="metrics report and score histograms")
    run_flags(s)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--num-images", type=int, default=evaluation.TEST_IMAGES)

    s = sub.add_parser("ablate", parents=[common], help="supervision-mode ablation table")
    model_flags(s)
    s.add_argument("--modes", default=",".join(evaluation.ABLATION_MODES))
    s.add_argument("--seeds", default="1,2,3,4,5")

    s = sub.add_parser("bench", parents=[common], help="paradigm inference-time sweep")
    s.add_argument("--grid", default=",".join(map(str, bench.DEFAULT_GRID)))
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--itm-reps", type=int, default=10, help="repetitions for ITM alone (default 10; it dominates the runtime)")

    # for eval and score the world comes from the checkpoint's training config;
    # score uses --seed to pick the synthetic image
    s = sub.add_parser("score", parents=[common], help="tag one synthetic image")
    run_flags(s)
    s.add_argument("--concepts", help="comma-separated concept ids (default: sampled from --seed)")
    s.add_argument("--threshold", type=float, default=0.5)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    manifest = RunManifest(args.command, argv, None, {"root": args.seed})
    try:
        threshold = getattr(args, "threshold", 0.5)
        if not 0 < threshold < 1:
            raise ValueError("--threshold must lie in (0, 1)")
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out, manifest)
        manifest.write(out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except OSError as exc:
        where = exc.filename or out
        print(f"itta: I/O error on {where}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FormatError, training.TrainingError, bench.BenchError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"itta: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``sdprior <subcommand> [--config FILE] [flags]``.

Settings resolve in the order defaults < config file < flags.  Every output
artifact gets a ``<artifact>.run.json`` sidecar holding the subcommand, the
resolved settings and the seed.  Failures print one JSON line to stderr.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 failed check.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import asdict, fields

import numpy as np

from . import checkpoint
from .augment import AugmentConfig, augment
from .corpus import RelevanceConfig, build_corpus, read_tagsets, write_corpus
from .errors import CapacityError, ContractError, DanglingReference, ParseError, SdPriorError
from .metrics import THRESHOLDS, map_over
from .osm import RANGE_PRESETS, EgoPose, RangeSpec, parse_osm_xml, project_to_frame, read_frames, write_frames
from .sd_encoder import SdEncoderConfig, generate_orf
from .text_encoder import TextEncoder, TextEncoderConfig, pretrain
from .toy import (MODES, SceneSpec, ToyDecoderConfig, TrainConfig, generate_dataset, instances_from_json,
                  instances_to_json, read_scenes, train_toy, write_scenes)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

SECTION_TYPES = {
    "text-encoder": TextEncoderConfig,
    "sd-encoder": SdEncoderConfig,
    "toy-decoder": ToyDecoderConfig,
    "toy-task": TrainConfig,
    "augment": AugmentConfig,
}
OTHER_SECTIONS = {"run": {"seed"}, "scenes": None, "metrics": {"thresholds"}}


def _coerce(text, like):
    if isinstance(like, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return text


def read_config(path):
    """Parse an INI-style file into ``{section: {key: str}}``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"config: {exc}".replace("\n", " ")) from None
    cfg = {s: dict(cp.items(s)) for s in cp.sections()}
    for section, items in cfg.items():
        if section in SECTION_TYPES:
            section_config(SECTION_TYPES[section], items)
        elif section in OTHER_SECTIONS:
            allowed = OTHER_SECTIONS[section]
            unknown = sorted(set(items) - allowed) if allowed is not None else []
            if unknown:
                raise UsageError(f"config: unknown key {unknown[0]!r} in [{section}]")
        else:
            raise UsageError(f"config: unknown section [{section}]")
    return cfg


def section_config(cls, raw, overrides=None):
    """Build a config dataclass from string settings plus typed overrides."""
    base = cls()
    known = {f.name: getattr(base, f.name) for f in fields(cls)}
    values = {}
    for key, text in (raw or {}).items():
        name = key.replace("-", "_")
        if name not in known:
            raise UsageError(f"config: unknown key {key!r} for {cls.__name__}")
        values[name] = _coerce(text, known[name])
    for name, v in (overrides or {}).items():
        if v is not None:
            values[name] = v
    try:
        return cls(**values)
    except (ContractError, TypeError) as exc:
        raise UsageError(f"config: {exc}") from None


def write_run_record(artifact, command, settings, seed):
    record = {"command": command, "seed": seed, "settings": settings}
    with open(f"{artifact}.run.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _parse_range(text):
    if text in RANGE_PRESETS:
        return RANGE_PRESETS[text]
    try:
        length, width = (float(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"range must be near, far or LxW, got {text!r}") from None
    try:
        return RangeSpec(length, width)
    except ContractError as exc:
        raise UsageError(str(exc)) from None


def _parse_ego(text):
    try:
        lon, lat, heading = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"ego must be LON,LAT,HEADING, got {text!r}") from None
    try:
        return EgoPose(lon, lat, heading)
    except ContractError as exc:
        raise UsageError(str(exc)) from None


def cmd_extract(args, cfg):
    with open(args.osm, "rb") as fh:
        elements = parse_osm_xml(fh.read())
    area = _parse_range(args.range)
    frames = []
    for i, ego_text in enumerate(args.ego):
        ego = _parse_ego(ego_text)
        frames.append(project_to_frame(elements, ego, area, args.points, frame_id=f"frame-{i}"))
    write_frames(args.out, frames)
    write_run_record(args.out, "extract", {"osm": args.osm, "ego": args.ego, "range": [area.length, area.width],
                                           "points": args.points}, None)


def _relevance(path):
    return RelevanceConfig.load(path) if path else RelevanceConfig.default()


def cmd_build_corpus(args, cfg):
    items = []
    for path in args.input:
        items.extend(read_frames(path))
    rel = _relevance(args.relevance)
    corpus = build_corpus(items, rel)
    write_corpus(args.out, corpus)
    sizes = corpus.bucket_sizes()
    stats = {"tagsets": len(corpus), "buckets": len(sizes),
             "bucket_sizes": sorted(sizes.values(), reverse=True)}
    with open(f"{args.out}.stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, sort_keys=True)
        fh.write("\n")
    write_run_record(args.out, "build-corpus", {"input": args.input, "relevance": rel.dumps()}, None)


def cmd_pretrain_tags(args, cfg):
    tcfg = section_config(TextEncoderConfig, cfg.get("text-encoder"))
    rel = _relevance(args.relevance)
    corpus = build_corpus(read_tagsets(args.corpus), rel)
    encoder, log = pretrain(corpus, rel, tcfg, epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                            pairs_per_tagset=args.pairs, rel_tag_cl=args.rel_tag_cl == "on", seed=args.seed,
                            vocab_size=args.vocab_size)
    checkpoint.save_params(args.out, encoder.params)
    meta = encoder.metadata()
    with open(f"{args.out}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")
    with open(f"{args.out}.loss.csv", "w", encoding="utf-8") as fh:
        fh.write("step,epoch,loss\n")
        for i, (e, v) in enumerate(zip(log.epoch, log.loss)):
            fh.write(f"{i},{e},{v:.9f}\n")
    write_run_record(args.out, "pretrain-tags", {
        "corpus": args.corpus, "epochs": args.epochs, "batch": args.batch, "lr": args.lr, "pairs": args.pairs,
        "rel_tag_cl": args.rel_tag_cl, "vocab_size": args.vocab_size, "text-encoder": asdict(tcfg),
        "relevance": rel.dumps()}, args.seed)


def load_text_encoder(path):
    with open(f"{path}.meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    encoder = TextEncoder.from_metadata(meta)
    checkpoint.load_params_into(path, encoder.params)
    return encoder


def cmd_embed(args, cfg):
    encoder = load_text_encoder(args.checkpoint)
    seen = {}
    for path in args.frames:
        for frame in read_frames(path):
            for e in frame.elements:
                seen.setdefault(e.tags, None)
    tagsets = list(seen)
    matrix = encoder.embed_numpy(tagsets) if tagsets else np.zeros((0, encoder.config.embed_dim))
    checkpoint.save_embeddings(args.out, matrix, tagsets)
    write_run_record(args.out, "embed", {"checkpoint": args.checkpoint, "frames": args.frames}, None)


def cmd_orf_check(args, cfg):
    if args.n < 1 or args.dorf < 1:
        raise UsageError("--n and --dorf must be positive")
    table = generate_orf([f"e{i}" for i in range(args.n)], args.dorf, args.seed, args.fallback)
    gram = table.rows @ table.rows.T
    dev = float(np.max(np.abs(gram - np.eye(args.n))))
    off = gram - np.diag(np.diag(gram))
    report = {"n": args.n, "d_orf": args.dorf, "seed": args.seed, "fallback": table.fallback,
              "max_offdiag": float(np.max(np.abs(off))), "max_identity_deviation": dev}
    print(json.dumps(report, sort_keys=True))
    if dev > 1e-6:
        raise CheckFailed(f"Gram matrix deviates from identity by {dev:.3g}")


def _scene_spec(cfg, args):
    raw = dict(cfg.get("scenes", {}))
    spec = SceneSpec()
    values = {}
    for key, text in raw.items():
        name = key.replace("-", "_")
        if name == "range":
            values["area"] = _parse_range(text)
        elif name == "lanes":
            lo, hi = (int(v) for v in text.split(","))
            values["lanes"] = (lo, hi)
        elif hasattr(spec, name) and name != "area":
            values[name] = _coerce(text, getattr(spec, name))
        else:
            raise UsageError(f"config: unknown key {key!r} for SceneSpec")
    if args.range:
        values["area"] = _parse_range(args.range)
    if args.roads is not None:
        values["max_roads"] = args.roads
    if args.noise is not None:
        values["noise"] = args.noise
    try:
        return SceneSpec(**values)
    except ContractError as exc:
        raise UsageError(f"config: {exc}") from None


def cmd_gen_scenes(args, cfg):
    spec = _scene_spec(cfg, args)
    scenes = generate_dataset(spec, args.n, args.seed)
    write_scenes(args.out, scenes)
    settings = asdict(spec)
    settings["area"] = [spec.area.length, spec.area.width]
    write_run_record(args.out, "gen-scenes", {"n": args.n, "spec": settings}, args.seed)


def cmd_train_toy(args, cfg):
    sd = section_config(SdEncoderConfig, cfg.get("sd-encoder"), {"d_model": None})
    dec = section_config(ToyDecoderConfig, cfg.get("toy-decoder"), {"d_model": sd.d_model})
    tc = section_config(TrainConfig, cfg.get("toy-task"), {"epochs": args.epochs, "lr": args.lr,
                                                           "batch_size": args.batch})
    text = None
    if args.mode != "no-tags":
        if not args.text_checkpoint:
            raise UsageError(f"mode {args.mode} needs --text-checkpoint")
        text = load_text_encoder(args.text_checkpoint)
    train = read_scenes(args.train)
    held = read_scenes(args.eval) if args.eval else []
    if not train:
        raise ContractError("training set is empty")
    model, log = train_toy(train, held, args.mode, text, sd, dec, tc, args.seed)
    checkpoint.save_params(args.out, model.parameters())
    with open(f"{args.out}.metrics.csv", "w", encoding="utf-8") as fh:
        fh.write(log.to_csv())
    with open(f"{args.out}.lr.json", "w", encoding="utf-8") as fh:
        json.dump(log.effective_lr, fh, sort_keys=True)
        fh.write("\n")
    if held and args.pred_out:
        preds = model.predict([s.frame for s in held], args.seed)
        with open(args.pred_out, "w", encoding="utf-8") as fh:
            for p in preds:
                fh.write(json.dumps(instances_to_json(p), separators=(",", ":")) + "\n")
        write_run_record(args.pred_out, "train-toy", {"checkpoint": args.out}, args.seed)
    write_run_record(args.out, "train-toy", {
        "mode": args.mode, "train": args.train, "eval": args.eval, "text_checkpoint": args.text_checkpoint,
        "sd-encoder": asdict(sd), "toy-decoder": asdict(dec), "toy-task": asdict(tc)}, args.seed)


def read_instances(path):
    """One scene per line: a list of instances, or an object with ``gt`` or ``predictions``."""
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if isinstance(obj, dict):
                    obj = obj.get("predictions", obj.get("gt"))
                scenes.append(instances_from_json(obj))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path} line {n}: {exc}", n) from None
    return scenes


def cmd_eval(args, cfg):
    preds = read_instances(args.pred)
    gts = read_instances(args.gt)
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} prediction scenes vs {len(gts)} ground-truth scenes")
    text = args.thresholds or cfg.get("metrics", {}).get("thresholds")
    try:
        thresholds = tuple(float(t) for t in text.split(",")) if text else THRESHOLDS
    except ValueError:
        raise UsageError(f"thresholds must be comma-separated numbers, got {text!r}") from None
    res = map_over(preds, gts, thresholds=thresholds)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(res.to_csv())
    with open(args.json or f"{args.out}.json", "w", encoding="utf-8") as fh:
        fh.write(res.to_json() + "\n")
    write_run_record(args.out, "eval", {"pred": args.pred, "gt": args.gt, "thresholds": list(thresholds)}, None)
    print(json.dumps({"mAP": res.mAP if res.defined else "undefined"}))


def cmd_augment(args, cfg):
    overrides = {f.name: getattr(args, f.name) for f in fields(AugmentConfig)}
    acfg = section_config(AugmentConfig, cfg.get("augment"), overrides)
    rel = _relevance(args.relevance)
    frames = read_frames(args.input)
    seeds = np.random.SeedSequence(args.seed).spawn(len(frames))
    out = [augment(f, acfg, rel, s) for f, s in zip(frames, seeds)]
    write_frames(args.out, out)
    write_run_record(args.out, "augment", {"in": args.input, "augment": asdict(acfg), "relevance": rel.dumps()},
                     args.seed)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _bool_flag(text):
    return _coerce(text, True)


def build_parser():
    p = _Parser(prog="sdprior", description="SD map prior pipeline")
    p.add_argument("--config", help="INI-style settings file")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("extract", help="OSM XML -> ego-centric SD frames (JSONL)")
    s.add_argument("--osm", required=True)
    s.add_argument("--ego", required=True, action="append", help="LON,LAT,HEADING (repeatable)")
    s.add_argument("--range", default="near", help="near, far or LxW in metres")
    s.add_argument("--points", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("build-corpus", help="frames -> deduplicated tag-set corpus")
    s.add_argument("--input", required=True, action="append")
    s.add_argument("--relevance")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_corpus)

    s = sub.add_parser("pretrain-tags", help="contrastive text-encoder pretraining")
    s.add_argument("--corpus", required=True)
    s.add_argument("--relevance")
    s.add_argument("--epochs", type=int, default=4)
    s.add_argument("--batch", type=int, default=256)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--pairs", type=int, default=20)
    s.add_argument("--vocab-size", type=int, default=2000)
    s.add_argument("--rel-tag-cl", choices=("on", "off"), default="on")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_tags)

    s = sub.add_parser("embed", help="embed every distinct tag set in some frames")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frames", required=True, action="append")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("orf-check", help="check orthonormality of identifier rows")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--dorf", type=int, default=64)
    s.add_argument("--fallback", action="store_true")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_orf_check)

    s = sub.add_parser("gen-scenes", help="synthetic lane-ambiguous scenes (JSONL)")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--range")
    s.add_argument("--roads", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_scenes)

    s = sub.add_parser("train-toy", help="train the SD encoder + map decoder on scenes")
    s.add_argument("--train", required=True)
    s.add_argument("--eval")
    s.add_argument("--mode", choices=MODES, default="with-tags")
    s.add_argument("--text-checkpoint")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--pred-out", help="write held-out predictions (JSONL)")
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("eval", help="AP/mAP of predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--thresholds")
    s.add_argument("--out", required=True)
    s.add_argument("--json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("augment", help="augment SD frames")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--relevance")
    s.add_argument("--seed", type=int, default=None)
    for f in fields(AugmentConfig):
        kind = _bool_flag if isinstance(f.default, bool) else float
        s.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)
    s.set_defaults(func=cmd_augment)
    return p


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}, sort_keys=True) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        cfg = read_config(args.config) if args.config else {}
        if hasattr(args, "seed"):
            if args.seed is None:
                args.seed = int(cfg.get("run", {}).get("seed", 0))
        args.func(args, cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_USAGE, "missing-file", f"{exc.filename}: {exc.strerror}")
    except (ParseError, DanglingReference) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, exc)
    except CheckFailed as exc:
        return _fail(EXIT_CHECK, "check-failed", exc)
    except (CapacityError, ContractError, SdPriorError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, exc)
    except (ValueError, KeyError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

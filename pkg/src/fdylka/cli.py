"""Command-line front end for the two-stage pipeline.

Subcommands: synthgen, featurize, train, pseudolabel, predict, ensemble,
evaluate. Exit status is 0 on success, 1 on usage errors and 2 on data or
contract errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import (
    DESED_CLASSES,
    load_synth_spec,
    parse_manifest,
    SynthSpec,
    synth_generate,
    write_predictions,
    write_pseudolabels,
)
from .dsp import CorpusStats, StatsAccumulator, featurize_file, normalize, read_feature, write_feature
from .embeddings import align, provide
from .errors import ConfigError, FdyLkaError, InputError
from .evaluation import DecodeConfig, decode, encode_events, event_f1
from .model import ClipPrediction, ModelConfig, load_checkpoint
from .pseudolabel import ensemble, label_external, label_in_domain
from .train import Clip, TrainConfig, TrainData, predict_clips, run_stage


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class PathsConfig:
    features: str = ""  # directory of <clip>.lmel files
    stats: str = ""  # corpus stats JSON; defaults to <features>/stats.json
    strong: str = ""
    weak: str = ""
    unlabeled: str = ""
    pseudo: list = field(default_factory=list)  # stage-2 pseudo-label TSVs
    validation: str = ""  # strong TSV of validation clips
    embeddings: str = ""  # directory of <clip>.emb files (embedding_source = "file")
    output: str = "runs"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    classes: list = field(default_factory=lambda: list(DESED_CLASSES))
    stage: int = 1
    embedding_source: str = "none"  # none | stub | file
    embedding_alignment: str = "average_pool"
    seed: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "decode": dataclasses.asdict(self.decode),
            "paths": dataclasses.asdict(self.paths),
            "classes": list(self.classes),
            "stage": self.stage,
            "embedding_source": self.embedding_source,
            "embedding_alignment": self.embedding_alignment,
            "seed": self.seed,
            "workers": self.workers,
        }


def _checked(cls, d: dict, where: str) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return d


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus flat ``section.key`` overrides."""
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.rpartition(".")
        target = raw.setdefault(section, {}) if section else raw
        target[name] = value
    _checked(RunConfig, raw, "run config")
    cfg = RunConfig()
    for key in ("classes", "stage", "embedding_source", "embedding_alignment", "seed", "workers"):
        if key in raw:
            setattr(cfg, key, raw[key])
    cfg.paths = PathsConfig(**_checked(PathsConfig, raw.get("paths", {}), "paths"))
    cfg.decode = DecodeConfig(**_checked(DecodeConfig, raw.get("decode", {}), "decode"))
    model = dict(raw.get("model", {}))
    model.setdefault("class_count", len(cfg.classes))
    if cfg.embedding_source != "none":
        model.setdefault("embedding_dim", 768)
    cfg.model = ModelConfig.from_dict(model)
    train = dict(raw.get("train", {}))
    train.setdefault("seed", cfg.seed)
    cfg.train = TrainConfig.from_dict(train)
    if cfg.embedding_source not in ("none", "stub", "file"):
        raise ConfigError(f"embedding_source must be none, stub or file, got {cfg.embedding_source!r}")
    if cfg.stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {cfg.stage}")
    if cfg.model.class_count != len(cfg.classes):
        raise ConfigError(f"model.class_count {cfg.model.class_count} != {len(cfg.classes)} classes")
    return cfg


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------


def _stats_path(paths: PathsConfig) -> Path:
    return Path(paths.stats) if paths.stats else Path(paths.features) / "stats.json"


def _load_stats(path) -> CorpusStats:
    try:
        return CorpusStats.from_json(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InputError(f"missing corpus statistics {path}") from exc


class ClipLoader:
    """Normalized features plus aligned embeddings for clip ids."""

    def __init__(self, features_dir, stats: CorpusStats, embedding_source="none", embedding_dir="",
                 alignment="average_pool", seed=0):
        self.features_dir = Path(features_dir)
        self.stats = stats
        self.embedding_source = embedding_source
        self.embedding_dir = embedding_dir
        self.alignment = alignment
        self.seed = seed

    def __call__(self, clip_id: str, **labels) -> Clip:
        path = self.features_dir / f"{clip_id}.lmel"
        if not path.exists():
            raise InputError(f"no cached features for clip {clip_id!r} ({path})")
        feats = normalize(read_feature(path), self.stats)
        emb = None
        if self.embedding_source != "none":
            raw = provide(clip_id, self.embedding_source, self.seed, self.embedding_dir or None)
            emb = align(raw, self.alignment)
        return Clip(clip_id, feats, embedding=emb, **labels)


def _log_scale(stats: CorpusStats):
    return 1.0 / np.asarray(stats.std) if stats.per_band else 1.0 / float(stats.std)


def _echo_config(cfg_dict: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(cfg_dict, indent=2, sort_keys=True)
    (out_dir / "resolved_config.json").write_text(text + "\n")
    print(text, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synthgen(args) -> int:
    spec = load_synth_spec(args.spec) if args.spec else SynthSpec()
    changes = {}
    if args.clips is not None:
        changes["clip_count"] = args.clips
    if args.classes is not None:
        changes["classes"] = DESED_CLASSES[: args.classes]
        changes["generators"] = None
    if args.weak is not None:
        changes["weak_count"] = args.weak
    if args.unlabeled is not None:
        changes["unlabeled_count"] = args.unlabeled
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        spec = SynthSpec(**{**dataclasses.asdict(spec), **changes})
    out = Path(args.out or "synth")
    _echo_config(spec.to_dict(), out)
    res = synth_generate(spec, out)
    print(f"wrote {len(res.clip_ids)} clips to {res.audio_dir}")
    return 0


def cmd_featurize(args) -> int:
    audio = Path(args.audio_dir)
    files = sorted(audio.glob("*.wav"))
    if not files:
        raise InputError(f"no .wav files in {audio}")
    out = Path(args.out or "features")
    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        feats = list(pool.map(featurize_file, files))
    acc = StatsAccumulator(per_band=args.per_band)
    for f, feat in zip(files, feats):
        write_feature(out / f"{f.stem}.lmel", feat)
        # the cache stores float32; stats are computed on what will be read back
        acc.add(feat.astype(np.float32).astype(np.float64))
    stats = _load_stats(args.stats) if args.stats else acc.stats()
    (out / "stats.json").write_text(stats.to_json() + "\n")
    print(f"featurized {len(files)} clips into {out}")
    return 0


def cmd_train(args) -> int:
    overrides = {
        "stage": args.stage,
        "seed": args.seed,
        "workers": args.workers,
        "paths.output": args.out,
        "paths.features": args.features,
        "paths.strong": args.strong,
        "paths.weak": args.weak,
        "paths.unlabeled": args.unlabeled,
        "paths.validation": args.validation,
        "paths.pseudo": args.pseudo,
        "train.epochs": args.epochs,
        "embedding_source": args.embeddings,
    }
    cfg = load_run_config(args.config, overrides)
    out = Path(cfg.paths.output)
    _echo_config(cfg.to_dict(), out)
    if cfg.stage == 2 and not cfg.paths.pseudo:
        raise InputError("stage 2 needs pseudo-label manifests (paths.pseudo / --pseudo)")
    if not cfg.paths.features:
        raise InputError("no feature directory given (paths.features / --features)")
    stats = _load_stats(_stats_path(cfg.paths))
    load = ClipLoader(cfg.paths.features, stats, cfg.embedding_source, cfg.paths.embeddings,
                      cfg.embedding_alignment, cfg.seed)
    classes = tuple(cfg.classes)
    frames = cfg.model.output_frames
    data = TrainData(classes, log_scale=_log_scale(stats))
    if cfg.paths.strong:
        m = parse_manifest(cfg.paths.strong, "strong", classes)
        by = m.events_by_clip()
        data.strong = [load(c, strong=encode_events(by[c], classes, frames)) for c in m.clip_ids()]
    if cfg.paths.weak:
        m = parse_manifest(cfg.paths.weak, "weak", classes)
        data.weak = [
            load(c, weak=np.array([float(n in labels) for n in classes])) for c, labels in m.records
        ]
    if cfg.paths.unlabeled:
        m = parse_manifest(cfg.paths.unlabeled, "unlabeled", classes)
        data.unlabeled = [load(c) for c in m.records]
    for p in cfg.paths.pseudo if cfg.stage == 2 else []:
        if not Path(p).exists():
            raise InputError(f"missing pseudo-label manifest {p}")
        m = parse_manifest(p, "strong", classes)
        by = m.events_by_clip()
        ids = m.clip_ids()
        side = Path(str(p) + ".provenance.tsv")
        if side.exists():
            ids = [l.split("\t")[0][:-4] for l in side.read_text().splitlines()[1:] if l]
        data.pseudo += [load(c, strong=encode_events(by.get(c, []), classes, frames)) for c in ids]
    if cfg.paths.validation:
        m = parse_manifest(cfg.paths.validation, "strong", classes)
        data.validation = [load(c) for c in m.clip_ids()]
        data.validation_events = list(m.records)
    meta = {
        "stats": json.loads(stats.to_json()),
        "embedding_source": cfg.embedding_source,
        "embedding_alignment": cfg.embedding_alignment,
        "embedding_seed": cfg.seed,
    }

    def progress(row):
        print(
            f"epoch {row['epoch']:4d} lr {row['lr']:.2e} loss {row['loss_total']:.4f} "
            f"val_f1 {row['val_f1_student']:.3f}/{row['val_f1_teacher']:.3f}",
            file=sys.stderr,
        )

    res = run_stage(cfg.stage, data, cfg.model, cfg.train, out, cfg.decode, progress, meta)
    summary = {role: {**b, "path": str(b["path"]) if b["path"] else None} for role, b in res.best.items()}
    (out / f"best_stage{cfg.stage}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _predict_with(checkpoints, clip_ids, features_dir, embeddings_dir="", seed=None):
    """Ensemble-averaged ClipPredictions over checkpoints, plus class names."""
    if not checkpoints:
        raise InputError("no checkpoints given")
    per_ckpt = []
    class_names = None
    for ck in checkpoints:
        params, mcfg, meta = load_checkpoint(ck)
        names = tuple(meta.get("class_names", DESED_CLASSES[: mcfg.class_count]))
        if class_names is not None and names != class_names:
            raise InputError(f"{ck}: class names differ from the other checkpoints")
        class_names = names
        if "stats" not in meta:
            raise InputError(f"{ck}: checkpoint carries no feature statistics")
        stats = CorpusStats.from_json(json.dumps(meta["stats"]))
        source = meta.get("embedding_source", "none") if mcfg.embedding_dim else "none"
        load = ClipLoader(features_dir, stats, source, embeddings_dir, meta.get("embedding_alignment", "average_pool"),
                          meta.get("embedding_seed", 0) if seed is None else seed)
        clips = [load(c) for c in clip_ids]
        per_ckpt.append(predict_clips(params, mcfg, clips))
    preds = [ensemble([p[i] for p in per_ckpt]) for i in range(len(clip_ids))]
    return preds, class_names


def _clip_ids_from(path) -> list[str]:
    header = Path(path).read_text().splitlines()[0].split("\t")
    kind = {1: "unlabeled", 2: "weak", 4: "strong"}.get(len(header))
    if kind is None:
        raise InputError(f"{path}: unrecognized manifest header")
    return parse_manifest(path, kind, None).clip_ids()


def _save_npz(path, preds, class_names) -> None:
    np.savez(
        path,
        clip_ids=np.array([p.clip_id for p in preds]),
        strong=np.stack([p.strong for p in preds]),
        weak=np.stack([p.weak for p in preds]),
        class_names=np.array(class_names),
    )


def _load_npz(path):
    with np.load(path) as z:
        names = tuple(z["class_names"].tolist())
        preds = [
            ClipPrediction(s, w, str(c)) for c, s, w in zip(z["clip_ids"].tolist(), z["strong"], z["weak"])
        ]
    return preds, names


def cmd_pseudolabel(args) -> int:
    clip_ids = _clip_ids_from(args.clips)
    preds, names = _predict_with(args.checkpoints, clip_ids, args.features, args.embedding_dir or "")
    out = Path(args.out or "pseudo.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "in_domain":
        grids = [label_in_domain(p) for p in preds]
        thresholds = {"frame": 0.5}
    else:
        if not args.weak:
            raise InputError("external mode needs the clips' weak labels (--weak)")
        weak = dict(parse_manifest(args.weak, "weak", names).records)
        grids = []
        for p in preds:
            if p.clip_id not in weak:
                raise InputError(f"clip {p.clip_id!r} has no weak label in {args.weak}")
            grids.append(label_external(p, np.array([int(n in weak[p.clip_id]) for n in names])))
        thresholds = {"frame": 0.5, "clip": 0.7}
    write_pseudolabels(grids, out, names, thresholds=thresholds)
    print(f"wrote pseudo-labels for {len(grids)} clips to {out}")
    return 0


def cmd_predict(args) -> int:
    clip_ids = _clip_ids_from(args.clips)
    preds, names = _predict_with(args.checkpoints, clip_ids, args.features, args.embedding_dir or "")
    out = Path(args.out or "predictions.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    dcfg = DecodeConfig(threshold=args.threshold, median_window=args.median_window)
    events = [e for p in preds for e in decode(p.strong, names, dcfg, p.clip_id)]
    write_predictions(events, out)
    _save_npz(out.with_suffix(".npz"), preds, names)
    print(f"wrote {len(events)} events to {out}")
    return 0


def cmd_ensemble(args) -> int:
    loaded = [_load_npz(p) for p in args.inputs]
    names = loaded[0][1]
    ids = [p.clip_id for p in loaded[0][0]]
    for preds, n in loaded[1:]:
        if n != names or [p.clip_id for p in preds] != ids:
            raise InputError("prediction files cover different clips or classes")
    merged = [ensemble([preds[i] for preds, _ in loaded]) for i in range(len(ids))]
    out = Path(args.out or "ensemble.npz")
    _save_npz(out, merged, names)
    if args.tsv:
        dcfg = DecodeConfig(threshold=args.threshold, median_window=args.median_window)
        write_predictions([e for p in merged for e in decode(p.strong, names, dcfg, p.clip_id)], args.tsv)
    print(f"averaged {len(loaded)} prediction files into {out}")
    return 0


def cmd_evaluate(args) -> int:
    vocab = tuple(args.classes.split(",")) if args.classes else None
    ref = parse_manifest(args.ref, "strong", vocab).records
    est = parse_manifest(args.est, "strong", vocab).records
    scores = event_f1(ref, est, matching=args.matching)
    if args.out:
        Path(args.out).write_text(scores.to_json() + "\n")
    print(scores.table())
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", help="output file or directory")

    p = _Parser(prog="fdylka", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synthgen", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--spec", help="SynthSpec JSON")
    s.add_argument("--clips", type=int)
    s.add_argument("--classes", type=int, help="use the first N default classes")
    s.add_argument("--weak", type=int, help="clips in the weak split")
    s.add_argument("--unlabeled", type=int, help="clips in the unlabeled split")
    s.set_defaults(func=cmd_synthgen)

    s = sub.add_parser("featurize", parents=[common], help="cache log-mel features and corpus stats")
    s.add_argument("--audio-dir", required=True)
    s.add_argument("--stats", help="reuse existing corpus stats JSON")
    s.add_argument("--per-band", action="store_true", help="per-band rather than global stats")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", parents=[common], help="train one stage")
    s.add_argument("--stage", type=int, choices=(1, 2))
    s.add_argument("--features")
    s.add_argument("--strong")
    s.add_argument("--weak")
    s.add_argument("--unlabeled")
    s.add_argument("--validation")
    s.add_argument("--pseudo", nargs="+")
    s.add_argument("--epochs", type=int)
    s.add_argument("--embeddings", choices=("none", "stub", "file"))
    s.set_defaults(func=cmd_train)

    for name, func, text in (
        ("pseudolabel", cmd_pseudolabel, "write strong pseudo-labels"),
        ("predict", cmd_predict, "decode predictions to a strong TSV"),
    ):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--checkpoints", nargs="+", required=True)
        s.add_argument("--clips", required=True, help="manifest listing the clips")
        s.add_argument("--features", required=True)
        s.add_argument("--embedding-dir")
        if name == "pseudolabel":
            s.add_argument("--mode", choices=("in_domain", "external"), default="in_domain")
            s.add_argument("--weak", help="weak manifest for external mode")
        else:
            s.add_argument("--threshold", type=float, default=0.5)
            s.add_argument("--median-window", type=int, default=7)
        s.set_defaults(func=func)

    s = sub.add_parser("ensemble", parents=[common], help="average prediction files")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--tsv", help="also write decoded events here")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--median-window", type=int, default=7)
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("evaluate", parents=[common], help="event-based F1 of est against ref")
    s.add_argument("--ref", required=True)
    s.add_argument("--est", required=True)
    s.add_argument("--classes", help="comma-separated vocabulary (default: labels in the files)")
    s.add_argument("--matching", choices=("greedy", "optimal"), default="greedy")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr, end="")
        return 1
    except (FdyLkaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

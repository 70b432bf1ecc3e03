"""``mlatr`` command line: prepare, translate, train, finetune, evaluate, report."""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from mlatr.clips import ClipStore
from mlatr.config import RunConfig, load_config
from mlatr.corpus import (
    ENGLISH,
    TranslationTable,
    build_translation_table,
    load_caption_file,
    load_manifest,
    load_translation_table,
    parse_languages,
    write_translation_table,
)
from mlatr.encoders import REGISTRY
from mlatr.errors import MissingLanguageFile, MlatrError, TranslatorFailure, ValidationError
from mlatr.evaluate import REPORT_FORMATS, RetrievalReport, emit_report, evaluate_split, format_table
from mlatr.tensorio import read_tensor_header
from mlatr.trainer import TrainState, apply_encoder_params, finetune, load_checkpoint, train, write_loss_csv
from mlatr.translators import make_translator

log = logging.getLogger("mlatr")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


# ---------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    if getattr(args, "config", None) is None:
        raise ValidationError("--config is required")
    return load_config(args.config)


def _apply_train_overrides(cfg: RunConfig, args) -> RunConfig:
    mapping = {
        "batch_size": "batch_size",
        "epochs": "epochs",
        "lr": "learning_rate",
        "finetune_lr": "finetune_learning_rate",
        "beta1": "beta1",
        "beta2": "beta2",
        "eps": "eps",
        "seed": "seed",
        "dropout": "dropout_rate",
        "dropout_mode": "dropout_mode",
        "temperature": "temperature",
        "joint_dim": "joint_dim",
        "le_mode": "le_mode",
        "le_language": "le_language",
        "mix_ratio": "le_mix_ratio",
        "prompt_style": "le_prompt_style",
    }
    changes = {dest: getattr(args, flag) for flag, dest in mapping.items() if getattr(args, flag, None) is not None}
    if getattr(args, "no_bias", False):
        changes["use_bias"] = False
    if getattr(args, "allow_audio_collisions", False):
        changes["allow_audio_collisions"] = True
    if changes:
        cfg = cfg.with_train(**changes)
    if getattr(args, "audio_encoder", None):
        cfg = cfg.replace(audio_encoder=args.audio_encoder)
    if getattr(args, "text_encoder", None):
        cfg = cfg.replace(text_encoder=args.text_encoder)
    return cfg


def _clip_store(cfg: RunConfig, manifest) -> ClipStore:
    cache = cfg.path("cache")
    return ClipStore(manifest, cfg.mel, cache if cache is not None and cache.exists() else None)


def _load_table(cfg: RunConfig) -> TranslationTable:
    path = cfg.path("table")
    if cfg.le.mode == "none":
        return load_translation_table(path) if path is not None and path.exists() else TranslationTable({})
    if path is None or not path.exists():
        raise ValidationError(f"LE mode {cfg.le.mode!r} needs a translation table; run 'mlatr translate' first")
    return load_translation_table(path)


def _validator(cfg: RunConfig, text_encoder):
    valid_path = cfg.path("valid")
    if valid_path is None or not valid_path.exists():
        return None
    manifest = load_manifest(valid_path, "valid")
    clips = _clip_store(cfg, manifest)

    def score(heads, audio_encoder) -> float:
        rep = evaluate_split(
            manifest, {}, audio_encoder, text_encoder, heads, [ENGLISH], clips, prompt_style=cfg.le.prompt_style, ap_norm=cfg.ap_norm
        )
        return (rep.get("audio_to_text", ENGLISH).map10 + rep.get("text_to_audio", ENGLISH).map10) / 2

    return score


def _write_run_files(out: Path, cfg: RunConfig, history, config_hash: str) -> None:
    write_loss_csv(history, out / "loss_history.csv", config_hash)
    (out / "config.ini").write_text(f"# config_hash={config_hash}\n" + cfg.to_ini(include_paths=False), encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_prepare(args) -> int:
    if args.manifest:
        specs = [(Path(args.manifest), args.split)]
        cfg = load_config(args.config) if args.config else RunConfig()
    else:
        cfg = _config(args)
        specs = [(cfg.require(k), k) for k in ("train", "valid", "test") if cfg.path(k) is not None]
    cache_dir = Path(args.cache_dir) if args.cache_dir else cfg.path("cache")
    for path, split in specs:
        manifest = load_manifest(path, split)
        n_eng = sum(1 for c in manifest.captions if c.language == ENGLISH)
        print(f"{split}: {len(manifest.audio)} audio, {n_eng} captions ({path})")
        if args.cache_features:
            if cache_dir is None:
                raise ValidationError("--cache-features needs a cache directory (config, --cache-dir or MLATR_CACHE)")
            store = ClipStore(manifest, cfg.mel, cache_dir)
            files = store.precompute()
            shapes = sorted({read_tensor_header(f) for f in files})
            print(f"{split}: cached {len(files)} log-mel files in {cache_dir} (shapes {shapes})")
    return EXIT_OK


def cmd_translate(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    manifest_path = Path(args.manifest) if args.manifest else cfg.require("train")
    out = Path(args.out) if args.out else cfg.path("table")
    if out is None:
        raise ValidationError("no output path: pass --out or set [paths] table")
    manifest = load_manifest(manifest_path, "train")
    languages = parse_languages(args.languages) if args.languages else list(cfg.le.languages or [])
    if not languages:
        from mlatr.corpus import TARGET_LANGUAGES

        languages = list(TARGET_LANGUAGES)
    translator = make_translator(args.backend, paths=args.files or (), command=args.command or ())
    seed = args.seed if args.seed is not None else cfg.train.seed
    try:
        table = build_translation_table(
            manifest, languages, translator, seed, shared_selection=args.shared_selection, allow_partial=args.allow_partial, jobs=args.jobs
        )
    except TranslatorFailure as exc:
        print(f"error: {len(exc.failures)} translation(s) failed:", file=sys.stderr)
        for audio_id, lang, reason in exc.failures:
            print(f"  {audio_id}\t{lang}\t{reason}", file=sys.stderr)
        return EXIT_RUNTIME
    write_translation_table(table, out)
    missing = table.missing(manifest.audio_ids, languages)
    print(f"wrote {len(table)} translations for {len(languages)} language(s) to {out}")
    if missing:
        print(f"warning: {len(missing)} (audio, language) pair(s) missing", file=sys.stderr)
    return EXIT_OK


def _resolve_encoders(cfg: RunConfig):
    return REGISTRY.resolve(cfg.audio_encoder), REGISTRY.resolve(cfg.text_encoder)


def cmd_train(args) -> int:
    cfg = _apply_train_overrides(_config(args), args)
    config_hash = cfg.digest()
    manifest = load_manifest(cfg.require("train"), "train")
    table = _load_table(cfg)
    audio_enc, text_enc = _resolve_encoders(cfg)
    out = Path(args.out) if args.out else cfg.path("checkpoints")
    if out is None:
        raise ValidationError("no checkpoint directory: pass --out or set [paths] checkpoints")
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(
        manifest,
        table,
        audio_enc,
        text_enc,
        cfg.train,
        clip_loader=_clip_store(cfg, manifest),
        resume=resume,
        checkpoint_dir=out,
        keep_every_epoch=args.keep_every_epoch,
        validate=_validator(cfg, text_enc),
        dump_epoch_dir=args.dump_epoch,
        config_hash=config_hash,
        log=log.info,
    )
    history = result.history
    if resume is not None and (out / "loss_history.csv").exists():
        from mlatr.trainer import read_loss_csv

        done = [r for r in read_loss_csv(out / "loss_history.csv") if r.epoch < resume.epoch_index]
        history = done + history
    _write_run_files(out, cfg, history, config_hash)
    print(f"trained {cfg.train.epochs} epoch(s); checkpoints in {out} (config {config_hash})")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _apply_train_overrides(_config(args), args)
    source = load_checkpoint(args.source)
    config_hash = hashlib.sha256(f"finetune:{source.config_hash}:{cfg.digest()}".encode()).hexdigest()[:16]
    manifest = load_manifest(cfg.require("train"), "train")
    table = _load_table(cfg)
    audio_enc, text_enc = _resolve_encoders(cfg)
    out = Path(args.out) if args.out else Path(args.source).parent / "finetune"
    out.mkdir(parents=True, exist_ok=True)
    result = finetune(
        source,
        manifest,
        table,
        audio_enc,
        text_enc,
        cfg.train,
        clip_loader=_clip_store(cfg, manifest),
        checkpoint_dir=out,
        validate=_validator(cfg, text_enc),
        config_hash=config_hash,
        log=log.info,
    )
    _write_run_files(out, cfg, result.history, config_hash)
    print(f"fine-tuned {cfg.train.epochs} epoch(s) at lr {cfg.train.finetune_learning_rate}; checkpoints in {out}")
    return EXIT_OK


def _encoders_for(state: TrainState, cfg: RunConfig):
    audio_name = state.meta.get("audio_encoder", cfg.audio_encoder)
    text_name = state.meta.get("text_encoder", cfg.text_encoder)
    audio_enc = REGISTRY.resolve(audio_name)
    if state.encoder_params:
        audio_enc = copy.deepcopy(audio_enc)
        apply_encoder_params(audio_enc, state.encoder_params)
    return audio_enc, REGISTRY.resolve(text_name)


def _test_captions(cfg: RunConfig, manifest, languages, captions_dir: Path | None):
    out = {}
    for lang in languages:
        if lang == ENGLISH:
            continue
        if captions_dir is None:
            raise MissingLanguageFile(f"no caption directory for {lang}")
        path = captions_dir / f"{lang}.jsonl"
        if not path.exists():
            raise MissingLanguageFile(f"missing test captions for {lang}: {path}")
        out[lang] = load_caption_file(path, lang, manifest)
    return out


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    state = load_checkpoint(args.ckpt)
    test_path = Path(args.test) if args.test else cfg.require("test")
    manifest = load_manifest(test_path, "test")
    languages = parse_languages(args.languages) if args.languages else list(cfg.languages)
    captions_dir = Path(args.captions_dir) if args.captions_dir else cfg.path("test_captions")
    if captions_dir is None and args.test:
        captions_dir = test_path.parent / "test_captions"
    captions = _test_captions(cfg, manifest, languages, captions_dir)
    audio_enc, text_enc = _encoders_for(state, cfg)
    report = evaluate_split(
        manifest,
        captions,
        audio_enc,
        text_enc,
        state.heads,
        languages,
        _clip_store(cfg, manifest),
        prompt_style=state.meta.get("prompt_style", cfg.le.prompt_style),
        ap_norm=args.ap_norm or cfg.ap_norm,
        jobs=args.jobs or cfg.jobs,
        config_hash=state.config_hash,
    )
    out = Path(args.out) if args.out else Path(args.ckpt) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    emit_report(report, "json", out / "report.json")
    suffix = {"table": "txt", "csv": "csv", "json": "json", "plot": "svg"}[args.format]
    target = emit_report(report, args.format, out / f"report.{suffix}")
    if args.format == "table":
        print(format_table(report), end="")
    print(f"wrote {target}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = {}
    labels = args.label or []
    if labels and len(labels) != len(args.input):
        raise ValidationError("--label must be given once per --input")
    for i, path in enumerate(args.input):
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"report not found: {path}")
        rep = RetrievalReport.from_json(json.loads(path.read_text(encoding="utf-8")))
        name = labels[i] if labels else (rep.dataset or path.stem)
        if name in reports:
            name = f"{name}-{i}"
        reports[name] = RetrievalReport(rep.blocks, name, rep.config_hash)
    result = emit_report(reports, args.format, args.out, metric=args.metric)
    if args.out is None:
        print(result, end="")
    else:
        print(f"wrote {result}")
    return EXIT_OK


def cmd_toy_data(args) -> int:
    from mlatr.toydata import make_toy_dataset

    make_toy_dataset(args.out, n_train=args.n_train, n_valid=args.n_valid, n_test=args.n_test, duration_s=args.duration, seed=args.seed)
    print(f"wrote toy dataset and config to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training overrides (default: config file, then built-in defaults)")
    g.add_argument("--batch-size", type=int, help="pairs per batch (default 128)")
    g.add_argument("--epochs", type=int, help="training epochs (default 20)")
    g.add_argument("--lr", type=float, help="learning rate (default 5e-5)")
    g.add_argument("--finetune-lr", type=float, help="fine-tune learning rate (default 5e-6)")
    g.add_argument("--beta1", type=float, help="Adam beta1 (default 0.9)")
    g.add_argument("--beta2", type=float, help="Adam beta2 (default 0.999)")
    g.add_argument("--eps", type=float, help="Adam epsilon (default 1e-8)")
    g.add_argument("--seed", type=int)
    g.add_argument("--dropout", type=float, help="patch dropout rate (default 0.25)")
    g.add_argument("--dropout-mode", choices=("axis", "patch"))
    g.add_argument("--temperature", type=float, help="InfoNCE temperature (default 0.07)")
    g.add_argument("--joint-dim", type=int)
    g.add_argument("--no-bias", action="store_true", help="strictly linear projection heads")
    g.add_argument("--allow-audio-collisions", action="store_true", help="permit two pairs of one clip in a batch")
    g.add_argument("--le-mode", choices=("none", "single", "mixture"))
    g.add_argument("--le-language", help="target language for single-language enhancement")
    g.add_argument("--mix-ratio", type=float, help="added translated pairs per English pair (default 0.10)")
    g.add_argument("--prompt-style", choices=("prefix_tag", "none"))
    g.add_argument("--audio-encoder")
    g.add_argument("--text-encoder")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlatr", description="Multilingual audio-text retrieval toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("prepare", help="validate manifests and optionally cache log-mel features")
    p.add_argument("--config")
    p.add_argument("--manifest", help="validate a single manifest instead of the configured splits")
    p.add_argument("--split", default="train", choices=("train", "valid", "test"))
    p.add_argument("--cache-features", action="store_true")
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("translate", help="build the translation table for the train split")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--languages", help="comma-separated targets (default: all seven)")
    p.add_argument("--backend", default="mock", choices=("mock", "file", "command"))
    p.add_argument("--files", nargs="+", help="translation files for the file backend")
    p.add_argument("--command", nargs="+", help="argv of the command backend")
    p.add_argument("--seed", type=int)
    p.add_argument("--shared-selection", action="store_true", help="one source caption per clip for all languages")
    p.add_argument("--allow-partial", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("train", help="contrastive training")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--dump-epoch", help="write each epoch's sampled pairs here")
    p.add_argument("--keep-every-epoch", action="store_true")
    p.add_argument("--out", help="checkpoint directory (default: [paths] checkpoints)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training at the fine-tune learning rate")
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="retrieval metrics per language")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--test", help="test manifest (default: [paths] test)")
    p.add_argument("--captions-dir", help="directory of <lang>.jsonl test captions")
    p.add_argument("--languages")
    p.add_argument("--format", default="table", choices=REPORT_FORMATS)
    p.add_argument("--out")
    p.add_argument("--ap-norm", choices=("min", "k"))
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render saved JSON reports")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--label", nargs="+")
    p.add_argument("--format", default="table", choices=REPORT_FORMATS)
    p.add_argument("--metric", default="r1", choices=("r1", "r5", "r10", "map10"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("toy-data", help="write a small synthetic dataset and config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=28)
    p.add_argument("--n-valid", type=int, default=7)
    p.add_argument("--n-test", type=int, default=14)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy_data)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except MlatrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

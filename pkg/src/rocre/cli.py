"""Command-line entry point: ``rocre <subcommand> [flags]``.

Every subcommand writes into ``--out`` (created if needed) together with a
``config.json`` echo of the resolved configuration. Exit codes: 0 success,
1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .dataio import CorpusError, PromptError, load_corpus, load_lexicon, load_relation_catalog, save_corpus, save_relation_catalog
from .infer import StaleCatalogError, dump_attention, evaluate, predict_many, write_predictions
from .model import RocModel
from .numcore import ConfigError, NumericDomainError, UsageError
from .synthetic import SynthConfig, generate_synthetic
from .trainer import (
    TrainConfig,
    TrainingDivergedError,
    compare_heads,
    default_vocab,
    format_table,
    run_ablation_suite,
    sweep_depth,
    train,
    visual_on_off,
    write_table_csv,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, UsageError, CorpusError, PromptError, FileNotFoundError, json.JSONDecodeError)
RUNTIME_ERRORS = (TrainingDivergedError, StaleCatalogError, NumericDomainError)


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON config file (training keys, 'model', optional 'synthetic')")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("runs/latest"), help="run directory")
    p.add_argument("--head", choices=("retrieval", "classification"))
    p.add_argument("--no-visual", action="store_true")
    p.add_argument("--no-types", action="store_true")
    p.add_argument("--no-positions", action="store_true")
    p.add_argument("--fusion-layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dtype", choices=("float64", "float32"))
    p.add_argument("--tau", type=float, help="training temperature; for predict, score rescaling only")
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--dump-attention", action="store_true", help="retain attention maps and write attention.csv")
    data = p.add_argument_group("data")
    data.add_argument("--data", type=Path, help="directory laid out by gen-synth")
    data.add_argument("--train-file", type=Path)
    data.add_argument("--eval-file", type=Path)
    data.add_argument("--catalog", type=Path)
    data.add_argument("--visual-dir", type=Path)
    data.add_argument("--lexicon", type=Path)
    data.add_argument("--checkpoint", type=Path, help="model checkpoint (eval, predict, dump-attention)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rocre", description="Relation extraction as contrastive retrieval over relation descriptions.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()
    sub.add_parser("gen-synth", parents=[common], help="write a synthetic corpus, catalog and lexicon")
    sub.add_parser("train", parents=[common], help="train a model and save a checkpoint and report")
    sub.add_parser("eval", parents=[common], help="score a checkpoint (or fresh initialization) on the eval split")
    sub.add_parser("predict", parents=[common], help="write ranked predictions as JSONL")
    ab = sub.add_parser("ablate", parents=[common], help="five-row ablation table")
    ab.add_argument("--with-visual-pair", action="store_true", help="also run the visual on/off comparison")
    ab.add_argument("--with-heads", action="store_true", help="also write the retrieval vs classification table")
    sw = sub.add_parser("sweep-depth", parents=[common], help="train once per fusion depth")
    sw.add_argument("--depths", default="0,1,2,3", help="comma-separated fusion depths")
    da = sub.add_parser("dump-attention", parents=[common], help="attention weights of one eval instance as CSV")
    da.add_argument("--index", type=int, default=0, help="position of the instance in the eval split")
    return parser


# --- config resolution ---------------------------------------------------------


def _read_config(path: Path | None) -> tuple[dict, dict]:
    if path is None:
        return {}, {}
    raw = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    synth = raw.pop("synthetic", {})
    return raw, synth


def resolve_train_config(args) -> TrainConfig:
    raw, _ = _read_config(args.config)
    cfg = TrainConfig.from_dict(raw)
    top = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.epochs is not None:
        top["epochs"] = args.epochs
    if args.tau is not None and args.command != "predict":
        top["temperature"] = args.tau
    enc = {}
    if args.no_visual:
        enc["use_visual"] = False
    if args.no_types:
        enc["use_types"] = False
    if args.no_positions:
        enc["use_positions"] = False
    if args.fusion_layers is not None:
        enc["num_fusion_layers"] = args.fusion_layers
    if args.dump_attention:
        enc["retain_attention"] = True
    cfg = dataclasses.replace(cfg, **top).variant(head=args.head, **enc)
    if args.dtype:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, dtype=args.dtype))
    cfg.validate()
    return cfg


def resolve_synth_config(args) -> SynthConfig:
    _, raw = _read_config(args.config)
    names = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown synthetic config keys {sorted(unknown)}")
    cfg = SynthConfig(**raw)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


# --- data ------------------------------------------------------------------------


def _data_paths(args) -> dict[str, Path | None]:
    base = args.data
    def pick(explicit, name):
        if explicit is not None:
            return explicit
        if base is not None and (base / name).exists():
            return base / name
        return None
    return {
        "train": pick(args.train_file, "train.jsonl"),
        "eval": pick(args.eval_file, "eval.jsonl"),
        "catalog": pick(args.catalog, "catalog.json"),
        "visual": pick(args.visual_dir, "visual"),
        "lexicon": pick(args.lexicon, "lexicon.json"),
    }


def _load(args, need_train: bool, need_eval: bool):
    paths = _data_paths(args)
    for key, needed in (("train", need_train), ("eval", need_eval), ("catalog", args.checkpoint is None)):
        if needed and paths[key] is None:
            raise UsageError(f"no {key} data; pass --data DIR or --{key}{'-file' if key != 'catalog' else ''}")
    lexicon = load_lexicon(paths["lexicon"]) if paths["lexicon"] else None
    train_set = load_corpus(paths["train"], paths["visual"], lexicon) if need_train else None
    eval_set = load_corpus(paths["eval"], paths["visual"], lexicon) if need_eval else None
    catalog = load_relation_catalog(paths["catalog"]) if paths["catalog"] else None
    return train_set, eval_set, catalog


def _model_for_inference(args, cfg: TrainConfig, eval_set):
    """Checkpoint when given, else a fresh initialization from the config."""
    if args.checkpoint is not None:
        model, _ = RocModel.load(args.checkpoint)
        if args.dump_attention and not model.encoder.retain_attention:
            enc = dataclasses.replace(model.encoder, retain_attention=True)
            model = RocModel(dataclasses.replace(model.config, encoder=enc), model.vocab, model.catalog, model.params)
        return model
    _, _, catalog = _load(args, need_train=False, need_eval=False)
    paths = _data_paths(args)
    source = load_corpus(paths["train"], paths["visual"]) if paths["train"] else eval_set
    vocab = default_vocab(source, catalog, cfg.min_freq)
    return RocModel.initialize(cfg.model, vocab, catalog, cfg.seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _echo(out: Path, args, **configs) -> None:
    out.mkdir(parents=True, exist_ok=True)
    echo = {"command": args.command, "argv": args.argv}
    echo.update({k: (v.to_dict() if hasattr(v, "to_dict") else dataclasses.asdict(v)) for k, v in configs.items()})
    _write_json(out / "config.json", echo)


# --- subcommands -------------------------------------------------------------------


def cmd_gen_synth(args) -> None:
    cfg = resolve_synth_config(args)
    train_set, eval_set, catalog, lexicon = generate_synthetic(cfg)
    out = args.out
    _echo(out, args, synthetic=cfg)
    save_corpus(train_set, out / "train.jsonl", out / "visual")
    save_corpus(eval_set, out / "eval.jsonl", out / "visual")
    save_relation_catalog(catalog, out / "catalog.json")
    _write_json(out / "lexicon.json", lexicon)
    print(f"wrote {len(train_set)} train / {len(eval_set)} eval instances and {len(catalog)} relations to {out}")


def _maybe_dump(args, model, eval_set) -> None:
    if args.dump_attention and eval_set:
        n = dump_attention(model, eval_set[0], args.out / "attention.csv")
        print(f"attention.csv: {n} rows")


def cmd_train(args) -> None:
    cfg = resolve_train_config(args)
    train_set, eval_set, catalog = _load(args, need_train=True, need_eval=_data_paths(args)["eval"] is not None)
    _echo(args.out, args, train=cfg)
    model, report = train(cfg, train_set, catalog, eval_set)
    model.save(args.out / "model.ckpt", seed=cfg.seed, step=report.num_batches)
    report.save(args.out / "report.json")
    if report.final_metrics is not None:
        _write_json(args.out / "metrics.json", report.final_metrics.to_dict())
        m = report.final_metrics
        print(f"best epoch {report.best_epoch}: acc {m.accuracy:.4f} P {m.precision:.4f} R {m.recall:.4f} F1 {m.f1:.4f}")
    _maybe_dump(args, model, eval_set)


def cmd_eval(args) -> None:
    cfg = resolve_train_config(args)
    _, eval_set, _ = _load(args, need_train=False, need_eval=True)
    model = _model_for_inference(args, cfg, eval_set)
    _echo(args.out, args, model=model.config)
    metrics = evaluate(model, eval_set)
    _write_json(args.out / "metrics.json", metrics.to_dict())
    print(json.dumps(metrics.to_dict()))
    _maybe_dump(args, model, eval_set)


def cmd_predict(args) -> None:
    cfg = resolve_train_config(args)
    _, eval_set, _ = _load(args, need_train=False, need_eval=True)
    model = _model_for_inference(args, cfg, eval_set)
    _echo(args.out, args, model=model.config)
    preds = predict_many(model, eval_set, tau_infer=args.tau, topk=args.topk)
    write_predictions(preds, args.out / "predictions.jsonl")
    print(f"wrote {len(preds)} predictions to {args.out / 'predictions.jsonl'}")


def cmd_ablate(args) -> None:
    cfg = resolve_train_config(args)
    train_set, eval_set, catalog = _load(args, need_train=True, need_eval=True)
    _echo(args.out, args, train=cfg)
    rows = run_ablation_suite(cfg, train_set, catalog, eval_set)
    write_table_csv(rows, args.out / "ablation.csv")
    print(format_table(rows))
    if args.with_visual_pair:
        vis = visual_on_off(cfg, train_set, catalog, eval_set)
        write_table_csv(vis, args.out / "visual_on_off.csv")
        print(format_table(vis))
    if args.with_heads:
        heads = compare_heads(cfg, train_set, catalog, eval_set)
        write_table_csv(heads, args.out / "heads.csv", first_column="method")
        print(format_table(heads))


def cmd_sweep_depth(args) -> None:
    cfg = resolve_train_config(args)
    try:
        depths = [int(d) for d in args.depths.split(",") if d.strip()]
    except ValueError:
        raise UsageError(f"--depths must be comma-separated integers, got {args.depths!r}") from None
    train_set, eval_set, catalog = _load(args, need_train=True, need_eval=True)
    _echo(args.out, args, train=cfg)
    rows = sweep_depth(cfg, depths, train_set, catalog, eval_set)
    write_table_csv(rows, args.out / "depth_sweep.csv", first_column="depth")
    for r in rows:
        print(f"depth {r.name}: F1 {r.metrics.f1:.4f}")


def cmd_dump_attention(args) -> None:
    args.dump_attention = True
    cfg = resolve_train_config(args)
    _, eval_set, _ = _load(args, need_train=False, need_eval=True)
    if not 0 <= args.index < len(eval_set):
        raise UsageError(f"--index {args.index} outside eval split of {len(eval_set)}")
    model = _model_for_inference(args, cfg, eval_set)
    _echo(args.out, args, model=model.config)
    n = dump_attention(model, eval_set[args.index], args.out / "attention.csv")
    print(f"attention.csv: {n} rows")


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "sweep-depth": cmd_sweep_depth,
    "dump-attention": cmd_dump_attention,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_INVALID
    args.argv = argv
    try:
        COMMANDS[args.command](args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except RUNTIME_ERRORS as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK

"""Command line entry point: synth / perturb / train / infer / eval / inspect.

Every subcommand honors --seed and echoes its effective configuration
into the output directory so runs can be reproduced from artifacts
alone. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import grammar, metrics, reprogram, synth, train as training
from .autodiff import NumericError, load_checkpoint
from .features import FeatureFileError, inspect_features
from .model import ModelConfig, SpeechSqlModel
from .schema import Schema, SchemaError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


class DataError(ValueError):
    pass


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(path, overrides):
    cfg = {}
    if path:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"bad config JSON: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--override wants key=value, got {item!r}")
        key, _, value = item.partition("=")
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return cfg


def _build_dataclass(cls, data, where):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise UsageError(f"unknown {where} keys: {sorted(unknown)}")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**coerced)


def _echo_config(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _model_from_profile(section, n_speakers=None, feature_dim=None):
    section = dict(section)
    profile = section.pop("profile", "desk")
    if n_speakers is not None:
        section.setdefault("n_speakers", n_speakers)
    if feature_dim is not None:
        section.setdefault("feature_dim", feature_dim)
    maker = {"desk": ModelConfig.desk, "reference": ModelConfig.reference,
             "tiny": ModelConfig.tiny}.get(profile)
    if maker is None:
        raise UsageError(f"unknown model profile {profile!r}")
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(section) - fields
    if unknown:
        raise UsageError(f"unknown model keys: {sorted(unknown)}")
    return maker(**section)


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args):
    cfg = _load_config(args.config, args.override)
    if args.seed is not None:
        cfg["seed"] = args.seed
    scfg = _build_dataclass(synth.SyntheticConfig, cfg, "synth config")
    entries = synth.synth_dataset(scfg, args.out)
    _echo_config(args.out, {"synth": dataclasses.asdict(scfg)})
    print(f"wrote {len(entries)} examples under {args.out}")
    return EXIT_OK


def cmd_perturb(args):
    cfg = _load_config(args.config, args.override)
    if args.seed is not None:
        cfg["seed"] = args.seed
    rcfg = _build_dataclass(reprogram.ReprogramConfig, cfg, "perturb config")
    try:
        wav, sr = reprogram.load_wav(args.input)
    except (OSError, reprogram.AudioError) as exc:
        raise DataError(str(exc)) from exc
    trace = {}
    out = reprogram.reprogram(wav, rcfg, trace=trace)
    reprogram.save_wav(args.out, out, sr)
    sidecar = args.out + ".json"
    with open(sidecar, "w") as fh:
        json.dump({"seed": rcfg.seed, "stages": trace,
                   "input_samples": len(wav), "output_samples": len(out)},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.out} ({len(out)} samples) and {sidecar}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args.config, args.override)
    if args.seed is not None:
        cfg.setdefault("train", {})["seed"] = args.seed
    corpus = cfg.pop("corpus", None) or args.corpus
    if not corpus:
        raise UsageError("train needs a corpus (config key 'corpus' or --corpus)")
    try:
        entries, schemas, feats = synth.load_corpus(corpus)
    except (synth.ManifestError, FeatureFileError, SchemaError, OSError) as exc:
        raise DataError(f"cannot load corpus: {exc}") from exc

    n_speakers = max(e.speaker_id for e in entries) + 1
    dim = next(iter(feats.values())).shape[1]
    model_cfg = _model_from_profile(cfg.pop("model", {}), n_speakers, dim)
    train_section = cfg.pop("train", {})
    aug = train_section.pop("augment_cfg", None)
    tcfg = _build_dataclass(training.TrainConfig, train_section, "train config")
    if aug is not None:
        tcfg = dataclasses.replace(
            tcfg, augment_cfg=_build_dataclass(synth.AugmentConfig, aug, "augment config"))
    if cfg:
        raise UsageError(f"unknown config sections: {sorted(cfg)}")

    os.makedirs(args.out, exist_ok=True)
    model = SpeechSqlModel(model_cfg, seed=tcfg.seed)
    _echo_config(args.out, {"corpus": corpus,
                            "model": dataclasses.asdict(model_cfg),
                            "train": dataclasses.asdict(tcfg)})
    with open(os.path.join(args.out, "model.json"), "w") as fh:
        json.dump(dataclasses.asdict(model_cfg), fh, indent=1, sort_keys=True)
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    reports = training.train_loop(model, entries, schemas, feats, tcfg,
                                  out_dir=args.out, metrics_path=metrics_path)
    last = reports[-1]
    print(f"finished {last.step} steps; final L_MLE {last.l_mle:.4f}; "
          f"checkpoint {os.path.join(args.out, 'final.w2sq')}")
    return EXIT_OK


def _load_model(model_dir):
    try:
        with open(os.path.join(model_dir, "model.json")) as fh:
            mcfg = ModelConfig(**json.load(fh))
        params, _ = load_checkpoint(os.path.join(model_dir, "final.w2sq"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load model from {model_dir}: {exc}") from exc
    model = SpeechSqlModel(mcfg, seed=0)
    model.store.load_values(params)
    return model


def cmd_infer(args):
    model = _load_model(args.model)
    try:
        entries, schemas, feats = synth.load_corpus(args.corpus)
    except (synth.ManifestError, FeatureFileError, SchemaError, OSError) as exc:
        raise DataError(f"cannot load corpus: {exc}") from exc
    rows = [e for e in entries if args.split is None or e.split == args.split]
    if args.limit:
        rows = rows[:args.limit]
    preds, golds = [], []
    for e in rows:
        schema = schemas[e.db_id]
        golds.append(e.sql)
        try:
            ast = model.infer(feats[e.id], schema)
            preds.append(grammar.render_sql(ast, schema))
        except Exception:
            preds.append("SELECT * FROM " + schema.tables[0].name)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write("\n".join(preds) + "\n")
    if args.gold_out:
        with open(args.gold_out, "w") as fh:
            fh.write("\n".join(golds) + "\n")
    print(f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    try:
        schema = Schema.load(args.schema)
    except (OSError, SchemaError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load schema: {exc}") from exc

    def read_queries(path):
        try:
            with open(path) as fh:
                lines = [l.strip() for l in fh if l.strip()]
        except OSError as exc:
            raise DataError(str(exc)) from exc
        out = []
        for i, line in enumerate(lines):
            try:
                out.append(grammar.parse_sql(line, schema))
            except grammar.GrammarError as exc:
                raise DataError(f"{path}:{i + 1}: {exc}") from exc
        return out

    preds = read_queries(args.pred)
    golds = read_queries(args.gold)
    if len(preds) != len(golds):
        raise DataError(f"{len(preds)} predictions vs {len(golds)} golds")
    rep = metrics.report(preds, golds)
    with open(args.out, "w") as fh:
        json.dump(rep, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(metrics.format_report(rep))
    return EXIT_OK


def cmd_inspect(args):
    path = args.path
    try:
        if path.endswith(".w2ft"):
            info = {"kind": "features", **inspect_features(path)}
        elif path.endswith(".w2sq"):
            params, opt = load_checkpoint(path)
            info = {"kind": "checkpoint",
                    "parameters": len(params),
                    "scalars": int(sum(int(np.prod(a.shape)) for a in params.values())),
                    "optimizer_records": len(opt)}
        elif path.endswith(".jsonl"):
            entries = synth.load_manifest(path)
            info = {"kind": "manifest", "examples": len(entries),
                    "splits": {s: sum(e.split == s for e in entries)
                               for s in synth.SPLITS}}
        elif path.endswith(".json"):
            schema = Schema.load(path)
            info = {"kind": "schema", "db_id": schema.db_id,
                    "tables": schema.n_tables, "columns": schema.n_columns - 1}
        else:
            raise DataError(f"unknown artifact type: {path}")
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    print(json.dumps(info, indent=1, sort_keys=True))
    return EXIT_OK


# -- dispatch ---------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="speechsql",
        description="Direct speech-to-SQL parsing: data synthesis, acoustic "
                    "re-programming, training, inference and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted config override; repeatable, wins over the file")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("perturb", help="re-program a 16 kHz mono WAV")
    common(p)
    p.add_argument("--input", required=True, help="input WAV path")
    p.add_argument("--out", required=True, help="output WAV path")
    p.set_defaults(fn=cmd_perturb)

    p = sub.add_parser("train", help="train on a corpus directory")
    common(p)
    p.add_argument("--corpus", help="corpus directory (overrides config)")
    p.add_argument("--out", required=True, help="run directory for checkpoints/metrics")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="greedy-decode a corpus split")
    common(p)
    p.add_argument("--model", required=True, help="training run directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test_indomain")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True, help="predictions file (one SQL per line)")
    p.add_argument("--gold-out", help="also write the aligned gold SQL")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score prediction vs gold SQL files")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--schema", required=True, help="schema JSON both files bind to")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect", help="describe a feature/checkpoint/manifest/schema file")
    common(p)
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, grammar.GrammarError, synth.ManifestError,
            FeatureFileError, SchemaError, metrics.MetricsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, training.TrainDivergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

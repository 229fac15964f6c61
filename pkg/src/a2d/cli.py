"""Command-line entry point: ``a2d train-teacher | distill | eval | export-aam``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Machine-readable results go to stdout, logs to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import ParallelCorpus, Vocab, load_parallel_tsv, synth_task
from .distill import DistillConfig
from .errors import A2DError, ConfigError, InputError
from .train import TrainConfig, distill_run, evaluate_model, train_teacher
from .transformer import ATTENTION_KINDS, ModelConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("a2d")

SECTIONS = ("model", "train", "distill", "data")


@dataclass
class DataConfig:
    n_train: int = 5000
    n_valid: int = 500
    n_test: int = 500
    min_len: int = 3
    max_len: int = 8
    seed: int = 1234
    valid_fraction: float = 0.1
    test_fraction: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown data config key {key!r}")
        return cls(**d)


@dataclass
class Splits:
    train: ParallelCorpus
    valid: ParallelCorpus
    test: ParallelCorpus
    vocab: Vocab


@dataclass
class Experiment:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    distill: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_experiment(path: str | None, overrides: list[str]) -> Experiment:
    raw: dict = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(raw[key], dict):
            raise ConfigError(f"config key {key!r} must be a section")
    exp = Experiment(**{k: dict(raw.get(k, {})) for k in SECTIONS})
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        getattr(exp, section)[key] = _parse_value(value)
    return exp


def _split_tsv(path: str, dcfg: DataConfig) -> tuple[ParallelCorpus, ParallelCorpus, ParallelCorpus]:
    corpus = load_parallel_tsv(path)
    order = np.random.default_rng(dcfg.seed).permutation(len(corpus))
    n_valid = int(round(len(corpus) * dcfg.valid_fraction))
    n_test = int(round(len(corpus) * dcfg.test_fraction))
    pick = lambda idx, split: ParallelCorpus([corpus.pairs[i] for i in idx], split)  # noqa: E731
    return (pick(order[n_valid + n_test:], "train"), pick(order[:n_valid], "valid"),
            pick(order[n_valid:n_valid + n_test], "test"))


def load_data(source: str, dcfg: DataConfig, model: dict) -> Splits:
    """``synth:<kind>`` generates splits; anything else is a TSV path."""
    if source.startswith("synth:"):
        kind = source.split(":", 1)[1]
        vocab_size = int(model.get("vocab_size", ModelConfig.vocab_size))
        common = dict(min_len=dcfg.min_len, max_len=dcfg.max_len, vocab_size=vocab_size,
                      mapping_seed=dcfg.seed)
        train = synth_task(kind, dcfg.n_train, seed=dcfg.seed, split="train", **common)
        valid = synth_task(kind, dcfg.n_valid, seed=dcfg.seed + 1, split="valid", **common)
        test = synth_task(kind, dcfg.n_test, seed=dcfg.seed + 2, split="test", **common)
        return Splits(train, valid, test, Vocab.for_synth(vocab_size))
    train, valid, test = _split_tsv(source, dcfg)
    vocab = Vocab.from_corpus(train, valid, test)
    if "vocab_size" in model and model["vocab_size"] != len(vocab):
        log.info("model.vocab_size set to %d from the corpus", len(vocab))
    model["vocab_size"] = len(vocab)
    return Splits(train, valid, test, vocab)


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _apply_common(args, exp: Experiment) -> None:
    if args.seed is not None:
        exp.train["seed"] = args.seed
    if args.epochs is not None:
        exp.train["epochs"] = args.epochs


def cmd_train_teacher(args) -> int:
    exp = load_experiment(args.config, args.set)
    _apply_common(args, exp)
    splits = load_data(args.data, DataConfig.from_dict(exp.data), exp.model)
    mcfg = ModelConfig.from_dict(exp.model)
    tcfg = TrainConfig.from_dict(exp.train)
    out = Path(args.out)
    result = train_teacher(mcfg, tcfg, splits.train, splits.valid, splits.vocab, out)
    splits.vocab.save(out / "vocab.txt")
    _emit({"checkpoint": str(result.checkpoint_path), **result.best})
    return 0


def cmd_distill(args) -> int:
    exp = load_experiment(args.config, args.set)
    _apply_common(args, exp)
    for flag, key in (("lam", "lambda_att"), ("mu", "mu_kd"), ("lambda_decay", "lambda_decay")):
        value = getattr(args, flag)
        if value is not None:
            exp.distill[key] = value
    if args.layerwise:
        exp.distill["layerwise_variant"] = True
    dcfg = DistillConfig.from_dict(exp.distill)
    if args.parts:
        dcfg = dcfg.with_parts(args.parts.split(","))
    try:
        teacher = load_checkpoint(args.teacher)
    except FileNotFoundError:
        raise ConfigError(f"teacher checkpoint {args.teacher} not found") from None
    exp.model.setdefault("vocab_size", teacher.config.vocab_size)
    splits = load_data(args.data, DataConfig.from_dict(exp.data), exp.model)
    if teacher.vocab is not None and teacher.vocab != splits.vocab:
        raise ConfigError("teacher vocabulary differs from the data vocabulary")
    mcfg = ModelConfig.from_dict(exp.model)
    tcfg = TrainConfig.from_dict(exp.train)
    out = Path(args.out)
    result = distill_run(teacher, mcfg, dcfg, tcfg, splits.train, splits.valid, splits.vocab, out)
    splits.vocab.save(out / "vocab.txt")
    _emit({"checkpoint": str(result.checkpoint_path), **result.best})
    return 0


def cmd_eval(args) -> int:
    exp = load_experiment(args.config, args.set)
    ckpt = load_checkpoint(args.checkpoint)
    exp.model = ckpt.config.to_dict()
    splits = load_data(args.data, DataConfig.from_dict(exp.data), exp.model)
    if ckpt.vocab is not None and ckpt.vocab != splits.vocab:
        raise ConfigError("checkpoint vocabulary differs from the data vocabulary")
    corpus = getattr(splits, args.split)
    if not len(corpus):
        raise InputError(f"{args.split} split is empty")
    model = ckpt.build_model(np.float32)
    metrics = evaluate_model(model, corpus, splits.vocab)
    _emit({"split": args.split, "bleu": metrics["val_bleu"], "token_accuracy": metrics["val_acc"],
           "n_pairs": len(corpus)})
    return 0


def head_labels(prefix: str, layers: int, heads: int, layerwise: bool) -> list[str]:
    if layerwise:
        return [f"{prefix}{i + 1}" for i in range(layers)]
    return [f"{prefix}{i + 1}.{h + 1}" for i in range(layers) for h in range(heads)]


def write_aam_csv(path: Path, w: np.ndarray, student: tuple[int, int],
                  teacher: tuple[int, int], layerwise: bool) -> None:
    """Rows are teacher maps ``t<layer>.<head>``, columns student maps ``s<layer>.<head>``."""
    cols = head_labels("s", *student, layerwise)
    rows = head_labels("t", *teacher, layerwise)
    if w.shape != (len(rows), len(cols)):
        raise InputError(f"alignment weights {w.shape} do not match labels {len(rows)}x{len(cols)}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["teacher\\student", *cols])
        for label, row in zip(rows, np.abs(w)):
            writer.writerow([label, *(f"{x:.6g}" for x in row)])


def cmd_export_aam(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    meta = ckpt.meta.get("aam")
    if not ckpt.has_aam or not meta:
        raise InputError(f"{args.checkpoint} holds no alignment-module weights")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind in ATTENTION_KINDS:
        if kind not in meta:
            log.warning("no alignment module for %s (excluded from distillation); %s.csv omitted", kind, kind)
            continue
        info = meta[kind]
        path = out / f"{kind}.csv"
        write_aam_csv(path, ckpt.params[f"aam.{kind}.w"], tuple(info["student"]),
                      tuple(info["teacher"]), info["layerwise"])
        written.append(str(path))
    _emit({"files": written})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="a2d", description="Attention-alignment distillation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data_required=True):
        sp.add_argument("--config", help="TOML file with [model] [train] [distill] [data] sections")
        sp.add_argument("--data", required=data_required, help="TSV path or synth:copy|reverse|digit_map")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")

    sp = sub.add_parser("train-teacher", help="train a model with cross-entropy only")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    common(sp)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lambda", dest="lam", type=float, help="initial attention-loss weight")
    sp.add_argument("--mu", type=float, help="vanilla KD weight")
    sp.add_argument("--lambda-decay", type=float, help="per-epoch decay of lambda")
    sp.add_argument("--parts", help="comma list of enc, dec-self, dec-cross")
    sp.add_argument("--layerwise", action="store_true", help="align head-averaged layer maps")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("eval", help="greedy-decode a split and report BLEU / token accuracy")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "valid", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-aam", help="write learned |w| of each alignment module as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_aam)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (A2DError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

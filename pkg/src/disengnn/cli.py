"""Command-line entry point: preprocess, synth, train, eval, predict, gradcheck, sweep.

Every command writes into a staging directory next to ``--out`` and renames it
into place only after success, so a failed command leaves no partial output.
Verbosity comes from ``DISEN_LOG`` (error, info or debug).
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import (DataFormatError, EmptyDatasetError, ingest, load_dataset, preprocess, save_dataset,
                   synth_generate, threshold_for_last_fraction, write_events)
from .evaluation import (evaluate_model, evaluate_scorer, format_report, itemknn_baseline,
                         pop_baseline, sweep, write_report)
from .model import ModelConfig, score_sequences
from .optim import make_rng
from .train import CheckpointIntegrityError, CheckpointVersionError, TrainConfig, load_checkpoint, train

log = logging.getLogger("disengnn")

# config-file / flag name -> (section, field)
_MODEL_KEYS = {"d": "d", "K": "K", "T": "T", "L": "L", "lambda": "lam", "dropout": "dropout",
               "use_factor_similarity": "use_factor_similarity",
               "use_residual_attention": "use_residual_attention",
               "share_ggnn_across_factors": "share_ggnn_across_factors",
               "share_attention_across_factors": "share_attention_across_factors"}
_TRAIN_KEYS = {"epochs": "epochs", "batch_size": "batch_size", "lr": "base_lr", "lr_decay": "lr_decay",
               "decay_every": "decay_every", "l2": "l2", "patience": "patience", "seed": "seed",
               "dtype": "dtype"}


class UsageError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(template, text: str):
    if isinstance(template, bool):
        return _parse_bool(text)
    return type(template)(text)


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: str | None = None

    def to_flat(self) -> dict:
        flat = {key: getattr(self.model, f) for key, f in _MODEL_KEYS.items()}
        flat.update({key: getattr(self.train, f) for key, f in _TRAIN_KEYS.items()})
        flat["data"] = self.data
        return flat

    def resolved_text(self) -> str:
        return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n"
                       for k, v in sorted(self.to_flat().items(), key=lambda kv: kv[0].lower()))


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; hyphens and underscores are interchangeable."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _MODEL_KEYS and key not in _TRAIN_KEYS and key != "data":
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_run_config(file_values: dict[str, str], overrides: dict, validate_model: bool = True) -> RunConfig:
    """Defaults, then the config file, then command-line flags; validated before any work.

    Sweeps pass ``validate_model=False`` because the swept value replaces one field first.
    """
    model, tcfg, data = ModelConfig(), TrainConfig(), None
    merged: dict = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    m_upd, t_upd = {}, {}
    for key, value in merged.items():
        if key == "data":
            data = str(value)
        elif key in _MODEL_KEYS:
            f = _MODEL_KEYS[key]
            m_upd[f] = value if not isinstance(value, str) else _coerce(getattr(model, f), value)
        elif key in _TRAIN_KEYS:
            f = _TRAIN_KEYS[key]
            t_upd[f] = value if not isinstance(value, str) else _coerce(getattr(tcfg, f), value)
    model = replace(model, **m_upd)
    if validate_model:
        model.validate()
    tcfg = replace(tcfg, **t_upd).validate()
    if tcfg.dtype not in ("float32", "float64"):
        raise UsageError(f"dtype must be float32 or float64, got {tcfg.dtype!r}")
    return RunConfig(model, tcfg, data)


# -- output staging -----------------------------------------------------

@contextlib.contextmanager
def staged_dir(out, marker: str):
    """Yield a scratch directory that replaces ``out`` on success.

    An existing ``out`` is replaced only if it holds ``marker`` (a previous
    output of the same command); anything else is refused.
    """
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not (out / marker).exists():
        raise UsageError(f"refusing to overwrite non-empty directory {out} (no {marker} inside)")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.partial-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


@contextlib.contextmanager
def staged_file(out):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.partial-{os.getpid()}"
    try:
        yield tmp
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    tmp.replace(out)


# -- commands -----------------------------------------------------------

def cmd_preprocess(args) -> int:
    records = ingest(args.input)
    if not records:
        raise EmptyDatasetError(f"{args.input} contains no events")
    if args.test_after_ts is not None:
        threshold = args.test_after_ts
    else:
        threshold = threshold_for_last_fraction(records, args.test_last_fraction)
    ds = preprocess(records, threshold, min_item_freq=args.min_item_freq,
                    min_session_len=args.min_session_len, valid_fraction=args.valid_fraction,
                    max_len=args.max_len, seed=args.seed)
    with staged_dir(args.output, "stats.json") as tmp:
        save_dataset(ds, tmp)
    print(json.dumps(ds.stats, indent=2, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    records = synth_generate(args.n_items, args.n_factors, args.n_sessions,
                             (args.min_len, args.max_len), args.noise,
                             rng=make_rng(args.seed, "synth"), n_clusters=args.n_clusters)
    with staged_file(args.output) as tmp:
        write_events(records, tmp)
    log.info("wrote %d sessions to %s", len(records), args.output)
    return 0


def _train_overrides(args) -> dict:
    return {"d": args.d, "K": args.K, "T": args.T, "L": args.L, "lambda": args.lam,
            "dropout": args.dropout, "seed": args.seed, "epochs": args.epochs,
            "batch_size": args.batch_size, "lr": args.lr, "lr_decay": args.lr_decay,
            "decay_every": args.decay_every, "patience": args.patience, "data": args.data}


def _load_run_config(args, validate_model: bool = True) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    cfg = resolve_run_config(file_values, _train_overrides(args), validate_model)
    if cfg.data is None:
        raise UsageError("no dataset given (--data or data = ... in the config file)")
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    dataset = load_dataset(cfg.data)
    with staged_dir(args.out, "config.resolved") as tmp:
        (tmp / "config.resolved").write_text(cfg.resolved_text(), encoding="utf-8")
        tcfg = replace(cfg.train, checkpoint_dir=str(tmp))
        result = train(cfg.model, tcfg, dataset, log_path=tmp / "epochs.jsonl")
        split = "test" if dataset.test_pairs else "valid"
        rep = evaluate_model(cfg.model, result.best.params, dataset.split(split), k=20)
        write_report(rep, tmp, {"split": split, "best_epoch": result.best.epoch,
                                "epochs_run": len(result.history)})
    print(format_report(rep), end="")
    return 0


def _check_vocab(ckpt_vocab, dataset) -> None:
    if ckpt_vocab != dataset.vocab:
        if len(ckpt_vocab) != dataset.n_items:
            raise UsageError(f"vocabulary mismatch: checkpoint has {len(ckpt_vocab)} items, "
                             f"dataset has {dataset.n_items}")
        raise UsageError(f"vocabulary mismatch: checkpoint and dataset both have {dataset.n_items} items "
                         "but in a different order or with different ids")


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    pairs = dataset.split(args.split)
    if args.baseline == "pop":
        rep = evaluate_scorer(pop_baseline(dataset.train_pairs, dataset.n_items), pairs, args.k)
    elif args.baseline == "itemknn":
        rep = evaluate_scorer(itemknn_baseline(dataset.train_pairs, dataset.n_items), pairs, args.k)
    else:
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required unless --baseline is pop or itemknn")
        ckpt = load_checkpoint(args.checkpoint)
        _check_vocab(ckpt.vocab, dataset)
        rep = evaluate_model(ckpt.config, ckpt.params, pairs, k=args.k)
    if args.out:
        with staged_dir(args.out, "report.json") as tmp:
            write_report(rep, tmp, {"split": args.split, "baseline": args.baseline})
    print(format_report(rep), end="")
    return 0


def predict_session(ckpt, items: list[str], top: int) -> list[tuple[str, float]]:
    index = {item: i for i, item in enumerate(ckpt.vocab)}
    known = [index[i] for i in items if i in index]
    unknown = [i for i in items if i not in index]
    if unknown:
        log.warning("dropping %d unknown item(s): %s", len(unknown), " ".join(unknown))
    if not known:
        raise UsageError("none of the session's items are in the checkpoint vocabulary")
    logits = score_sequences(ckpt.config, ckpt.params, [known]).astype(np.float64)[0]
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    # stable sort keeps the lower index first on ties, as the rank metrics do
    order = np.argsort(-probs, kind="stable")[:top]
    return [(ckpt.vocab[i], float(probs[i])) for i in order]


def cmd_predict(args) -> int:
    if args.top < 1:
        raise UsageError("--top must be >= 1")
    ckpt = load_checkpoint(args.checkpoint)
    for item, p in predict_session(ckpt, args.session.split(), args.top):
        print(f"{item}\t{p:.8f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_model_loss, check_primitives

    rep = check_model_loss(args.d, args.K, args.T, args.L, seed=args.seed, lam=args.lam)
    for p in rep.params:
        print(f"{p.name:<10} {p.max_rel_error:.3e}")
    worst = rep.worst
    if rep.passed:
        print(f"PASS worst relative error {rep.max_rel_error:.3e} ({worst.name})")
        return 0
    print(f"FAIL worst relative error {rep.max_rel_error:.3e}; parameters: {', '.join(rep.failures())}")
    bad_ops = [op for op, err in check_primitives(args.seed).items() if not err < 1e-6]
    if bad_ops:
        print(f"offending op(s): {', '.join(bad_ops)}")
    return 1


def _number(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return float(text)


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args, validate_model=False)
    dataset = load_dataset(cfg.data)
    values = [_number(v) for v in args.values.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    with staged_dir(args.out, "sweep.json") as tmp:
        (tmp / "config.resolved").write_text(cfg.resolved_text(), encoding="utf-8")
        res = sweep(cfg.model, cfg.train, args.axis, values, dataset, seeds=seeds, split=args.split,
                    out_dir=tmp)
    print(res.to_text(), end="")
    return 0


# -- argument parsing ---------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data")
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--decay-every", type=int)
    p.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disengnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="click log -> prepared dataset directory")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--min-item-freq", type=int, default=5)
    p.add_argument("--min-session-len", type=int, default=2)
    split = p.add_mutually_exclusive_group()
    split.add_argument("--test-last-fraction", type=float, default=0.2)
    split.add_argument("--test-after-ts", type=int)
    p.add_argument("--valid-fraction", type=float, default=0.1)
    p.add_argument("--max-len", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="planted-factor synthetic click log")
    p.add_argument("--output", required=True)
    p.add_argument("--n-items", type=int, default=50)
    p.add_argument("--n-factors", type=int, default=4)
    p.add_argument("--n-sessions", type=int, default=400)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--n-clusters", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a baseline")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--baseline", choices=("none", "pop", "itemknn"), default="none")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="rank next items for one session")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--session", required=True, help='space-separated item ids, e.g. "i1 i7 i3"')
    p.add_argument("--top", type=int, default=20)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--T", type=int, default=1)
    p.add_argument("--L", type=int, default=1)
    p.add_argument("--lambda", dest="lam", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train and evaluate across one hyper-parameter axis")
    _add_model_flags(p)
    p.add_argument("--axis", required=True, choices=("K", "lambda", "T", "L"))
    p.add_argument("--values", required=True, help="comma-separated, e.g. 1,2,4,8")
    p.add_argument("--seeds", default="0")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.set_defaults(func=cmd_sweep)
    return parser


def setup_logging() -> None:
    level = os.environ.get("DISEN_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"DISEN_LOG must be one of {sorted(levels)}, got {level!r}")
    root = logging.getLogger("disengnn")
    root.setLevel(levels[level])
    for h in [h for h in root.handlers if getattr(h, "_disen_cli", False)]:
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler._disen_cli = True
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)


_EXPECTED = (UsageError, DataFormatError, EmptyDatasetError, CheckpointIntegrityError,
             CheckpointVersionError, ValueError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging()
        return args.func(args)
    except _EXPECTED as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: generate, train, eval, ablate, gradcheck.

Values come from built-in defaults, overridden by an optional JSON config
file (--config), overridden by explicit flags.  Set MMML_LOG=info or debug
for progress output.  Existing output files are never overwritten without
--force.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .data import (
    ContextConfig,
    GeneratorConfig,
    assemble_context,
    generate,
    load_jsonl,
    split,
    write_jsonl,
)
from .errors import ConfigError, MmmlError
from .experiments import ExperimentConfig, evaluate_model, run_suite
from .gradcheck import TOLERANCE, gradcheck_report
from .model import ModelConfig, init_model, load_model, save_model
from .training import TrainConfig, train

log = logging.getLogger("mmml.cli")


def _setup_logging():
    level = os.environ.get("MMML_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _refuse_overwrite(path, force):
    if os.path.exists(path) and not force:
        raise ConfigError(f"refusing to overwrite {path} (pass --force)")


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _merged(cls, file_section, overrides):
    """Build a dataclass from file values overridden by explicit flags."""
    valid = set(cls.__dataclass_fields__)
    unknown = set(file_section) - valid
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} config keys: {sorted(unknown)}")
    merged = dict(file_section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def _parse_floats(text, n, what):
    parts = [p for p in text.split(",") if p != ""]
    if len(parts) != n:
        raise ConfigError(f"{what} needs {n} comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)


def _parse_seeds(text):
    try:
        return tuple(int(p) for p in text.split(",") if p != "")
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}") from None


# ---------------------------------------------------------------------------
# flag groups


def _add_generator_flags(p):
    p.add_argument("--n", type=int, default=None, help="number of utterances")
    p.add_argument("--style", choices=("mosi", "sims"), default=None)
    p.add_argument("--d-in-text", type=int, default=None)
    p.add_argument("--d-in-audio", type=int, default=None)
    p.add_argument("--len-min", type=int, default=None)
    p.add_argument("--len-max", type=int, default=None)
    p.add_argument("--dlg-min", type=int, default=None)
    p.add_argument("--dlg-max", type=int, default=None)
    p.add_argument("--sigma-t", type=float, default=None, help="text label noise")
    p.add_argument("--sigma-a", type=float, default=None, help="audio label noise")
    p.add_argument("--sigma-e", type=float, default=None, help="embedding noise")
    p.add_argument("--rho", type=float, default=None, help="dialogue autocorrelation")
    p.add_argument("--modality-labels", choices=("auto", "on", "off"), default=None)


def _generator_overrides(args, seed):
    labels = {"auto": None, "on": True, "off": False, None: None}[args.modality_labels]
    over = {
        "n_samples": args.n,
        "task_style": args.style,
        "d_in_text": args.d_in_text,
        "d_in_audio": args.d_in_audio,
        "len_min": args.len_min,
        "len_max": args.len_max,
        "dlg_min": args.dlg_min,
        "dlg_max": args.dlg_max,
        "sigma_t": args.sigma_t,
        "sigma_a": args.sigma_a,
        "sigma_e": args.sigma_e,
        "rho": args.rho,
        "seed": seed,
    }
    if args.modality_labels is not None:
        over["modality_labels"] = labels
    return over


def _add_model_flags(p):
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--fusion-layers", type=int, default=None)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--feature-layers", type=int, default=None)
    p.add_argument("--variant", choices=("fused_only", "concat_restore", "transformer_restore"),
                   default=None)
    p.add_argument("--fusion-mode", choices=("cross", "concat"), default=None)
    p.add_argument("--pe", choices=("on", "off"), default=None, help="positional encoding")


def _model_overrides(args, context):
    over = {
        "d_model": args.d_model,
        "num_heads": args.heads,
        "fusion_layers": args.fusion_layers,
        "d_ff": args.d_ff,
        "feature_encoder_layers": args.feature_layers,
        "variant": args.variant,
        "fusion_mode": args.fusion_mode,
        "positional_encoding": {"on": True, "off": False, None: None}[args.pe],
    }
    if context is not None:
        over["context"] = context
    return over


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--loss", choices=("multi", "single"), default=None)
    p.add_argument("--alphas", default=None, help="audio,text,fused loss weights")


def _train_overrides(args, seed=None):
    return {
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "patience": args.patience,
        "max_epochs": args.max_epochs,
        "weight_decay": args.weight_decay,
        "loss_mode": args.loss,
        "alphas": _parse_floats(args.alphas, 3, "--alphas") if args.alphas else None,
        "seed": seed,
    }


def _add_context_flags(p):
    p.add_argument("--context-method", choices=("none", "concatenation", "independent"),
                   default=None)
    p.add_argument("--text-window", type=int, default=None)
    p.add_argument("--audio-window", type=int, default=None)


def _context_from(args, file_cfg):
    over = {
        "method": args.context_method,
        "text_window": args.text_window,
        "audio_window": args.audio_window,
    }
    section = file_cfg.get("context", {})
    if all(v is None for v in over.values()) and not section:
        return None
    return _merged(ContextConfig, section, over)


def _add_split_flags(p):
    p.add_argument("--split-frac", default=None, help="train,val,test fractions")
    p.add_argument("--split-seed", type=int, default=None)


def _split_policy(args, file_cfg):
    section = file_cfg.get("split", {})
    fractions = (
        _parse_floats(args.split_frac, 3, "--split-frac")
        if args.split_frac
        else tuple(section.get("fractions", (0.7, 0.15, 0.15)))
    )
    seed = args.split_seed if args.split_seed is not None else section.get("seed", 0)
    return fractions, seed


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    file_cfg = _load_config_file(args.config)
    gen = _merged(GeneratorConfig, file_cfg.get("generator", {}),
                  _generator_overrides(args, args.seed))
    _refuse_overwrite(args.out, args.force)
    samples = generate(gen)
    write_jsonl(samples, args.out)
    labels = np.array([s.label_f for s in samples])
    print(f"wrote {len(samples)} samples to {args.out}")
    if len(samples):
        print(
            f"label stats: mean {labels.mean():.4f} sd {labels.std():.4f} "
            f"min {labels.min():.4f} max {labels.max():.4f}"
        )
    return 0


def _prepare_splits(args, file_cfg, context):
    samples = load_jsonl(args.data)
    if not samples:
        raise ConfigError(f"dataset {args.data} is empty")
    fractions, split_seed = _split_policy(args, file_cfg)
    parts = split(samples, fractions, split_seed)
    if context is not None:
        parts = tuple(assemble_context(part, context) for part in parts)
    return parts


def cmd_train(args):
    file_cfg = _load_config_file(args.config)
    context = _context_from(args, file_cfg) or ContextConfig()
    train_cfg = _merged(TrainConfig, file_cfg.get("train", {}),
                        _train_overrides(args, seed=args.seed))
    train_set, val_set, _ = _prepare_splits(args, file_cfg, context)
    model_cfg = _merged(
        ModelConfig,
        {
            "d_in_text": train_set[0].text_seq.shape[1],
            "d_in_audio": train_set[0].audio_seq.shape[1],
            **file_cfg.get("model", {}),
        },
        _model_overrides(args, context),
    )
    os.makedirs(args.out, exist_ok=True)
    model_path = os.path.join(args.out, "model.mmml")
    history_path = os.path.join(args.out, "history.csv")
    for path in (model_path, history_path):
        _refuse_overwrite(path, args.force)
    model = init_model(model_cfg, args.seed if args.seed is not None else train_cfg.seed)
    started = time.time()
    model, history = train(model, train_set, val_set, train_cfg)
    save_model(model, model_path)
    history.to_csv(history_path)
    print(
        f"trained {history.num_epochs()} epochs in {time.time() - started:.1f}s "
        f"(stop: {history.stop_reason}, best epoch {history.best_epoch}, "
        f"best val loss {min(history.val_loss):.6f})"
    )
    print(f"model: {model_path}")
    print(f"history: {history_path}")
    return 0


def cmd_eval(args):
    file_cfg = _load_config_file(args.config)
    model = load_model(args.model)
    context = model.config.context
    if args.split == "all":
        samples = load_jsonl(args.data)
        if context.method != "none":
            samples = assemble_context(samples, context)
    else:
        parts = _prepare_splits(args, file_cfg, context if context.method != "none" else None)
        samples = parts[("train", "val", "test").index(args.split)]
    if not samples:
        raise ConfigError(f"split {args.split!r} is empty")
    report = evaluate_model(model, samples, head=args.head)
    payload = report.as_dict()
    payload["head"] = args.head
    payload["split"] = args.split
    payload["n"] = len(samples)
    payload["mae_x100"] = None if report.mae is None else 100.0 * report.mae
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        _refuse_overwrite(args.out, args.force)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    return 0


def cmd_ablate(args):
    file_cfg = _load_config_file(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else tuple(file_cfg.get("seeds", (0, 1, 2)))
    gen = None
    if args.data is None:
        gen = _merged(GeneratorConfig, file_cfg.get("generator", {}),
                      _generator_overrides(args, args.gen_seed))
    model_cfg = _merged(
        ModelConfig,
        {"d_in_text": 1, "d_in_audio": 1, **file_cfg.get("model", {})},
        _model_overrides(args, None),
    )
    train_cfg = _merged(TrainConfig, file_cfg.get("train", {}), _train_overrides(args))
    fractions, split_seed = _split_policy(args, file_cfg)
    exp = ExperimentConfig(
        model=model_cfg,
        train=train_cfg,
        generator=gen,
        data_path=args.data,
        seeds=seeds,
        split_fractions=fractions,
        split_seed=split_seed,
    )
    started = time.time()
    result = run_suite(args.suite, exp)
    csv_path, json_path = result.write(args.out, force=args.force)
    print(f"suite {args.suite}: {len(result.arms)} arms x {len(seeds)} seeds "
          f"in {time.time() - started:.1f}s")
    means = result.means()
    for arm in result.arms:
        shown = {k: round(v, 4) for k, v in means[arm].items() if v is not None}
        print(f"  {arm} [{result.arm_heads[arm]}]: {shown}")
    print(f"results: {csv_path} {json_path}")
    return 0


def cmd_gradcheck(args):
    started = time.time()
    results = gradcheck_report(seed=args.seed)
    failed = False
    for name, err in results:
        ok = err < TOLERANCE
        failed = failed or not ok
        print(f"{name:24s} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"checked {len(results)} components in {time.time() - started:.1f}s")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mmml",
        description="Multimodal sentiment fusion network: data synthesis, "
                    "training, evaluation and ablation suites.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic JSONL dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    _add_generator_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a JSONL dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_context_flags(p)
    _add_split_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--config", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--head", choices=("fused", "text", "audio"), default="fused")
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.add_argument("--force", action="store_true")
    _add_split_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--config", default=None)
    p.add_argument("--suite", required=True, choices=("fusion", "restoration", "multiloss", "context"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default=None, help="comma-separated model seeds")
    p.add_argument("--data", default=None, help="JSONL dataset (otherwise generated)")
    p.add_argument("--gen-seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    _add_generator_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_split_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every component")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MmmlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

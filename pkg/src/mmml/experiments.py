"""Experiment orchestration: train/evaluate jobs and the ablation suites.

Each suite generates one dataset, splits it at dialogue level, then trains
every arm on the same splits with the same seed list, so arm differences
isolate the architectural or training change under study.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field, replace

from .data import (
    ContextConfig,
    GeneratorConfig,
    assemble_context,
    generate,
    load_jsonl,
    pad_batch,
    split,
    strip_modality,
)
from .errors import ConfigError, ContractError
from .metrics import EvalPairs, full_report
from .model import ModelConfig, forward, init_model
from .tensor import no_grad
from .training import TrainConfig, train

log = logging.getLogger("mmml.experiments")

SUITES = ("fusion", "restoration", "multiloss", "context")
CONTEXT_WINDOWS = (0, 1, 2, 3)


@dataclass
class ExperimentConfig:
    """Everything one experiment needs: architecture and training templates,
    a data source, a split policy, and the seed list."""

    model: ModelConfig
    train: TrainConfig
    generator: GeneratorConfig | None = None
    data_path: str | None = None
    seeds: tuple = (0, 1, 2)
    split_fractions: tuple = (0.7, 0.15, 0.15)
    split_seed: int = 0

    def validate(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if (self.generator is None) == (self.data_path is None):
            raise ConfigError("exactly one of generator and data_path must be set")
        self.train.validate()


def load_splits(exp):
    """Materialize the dataset and cut it into (train, val, test)."""
    exp.validate()
    if exp.generator is not None:
        samples = generate(exp.generator)
    else:
        samples = load_jsonl(exp.data_path)
    if not samples:
        raise ContractError("dataset is empty")
    return split(samples, exp.split_fractions, exp.split_seed)


def fit(model_config, train_set, val_set, train_config, seed):
    """Init with `seed`, train with the same seed for shuffling."""
    model = init_model(model_config, seed)
    return train(model, train_set, val_set, replace(train_config, seed=seed))


def evaluate_model(model, samples, head="fused", batch_size=16):
    """Full metric report of one head's predictions against utterance labels."""
    if head not in ("fused", "text", "audio"):
        raise ContractError(f"unknown head {head!r}")
    if not samples:
        raise ContractError("evaluation over an empty sample list")
    preds = []
    with no_grad():
        for batch in pad_batch(samples, batch_size):
            for pred in forward(model, batch):
                y = {"fused": pred.y_fused, "text": pred.y_text, "audio": pred.y_audio}[head]
                if y is None:
                    raise ContractError(f"head {head!r} is unavailable for this input")
                preds.append(y.item())
    labels = [s.label_f for s in samples]
    return full_report(EvalPairs(preds, labels, samples[0].task_style))


def _sized(model_config, samples):
    """Fill the input widths of a model config template from real data."""
    text_width = next(s.text_seq.shape[1] for s in samples if s.text_seq is not None)
    audio_candidates = [s.audio_seq.shape[1] for s in samples if s.audio_seq is not None]
    audio_width = audio_candidates[0] if audio_candidates else text_width
    return replace(model_config, d_in_text=text_width, d_in_audio=audio_width)


@dataclass
class AblationResult:
    """Per-arm, per-seed metric reports plus arithmetic mean rows."""

    suite: str
    task_style: str
    arms: dict = field(default_factory=dict)  # arm -> list[(seed, MetricsReport)]
    arm_heads: dict = field(default_factory=dict)  # arm -> evaluated head

    def add(self, arm, head, rows):
        self.arms[arm] = rows
        self.arm_heads[arm] = head

    def fields(self):
        any_rows = next(iter(self.arms.values()))
        return any_rows[0][1].field_names()

    def means(self):
        out = {}
        for arm, rows in self.arms.items():
            arm_mean = {}
            for name in self.fields():
                values = [getattr(report, name) for _, report in rows]
                arm_mean[name] = (
                    None if any(v is None for v in values) else sum(values) / len(values)
                )
            out[arm] = arm_mean
        return out

    def mean_metric(self, arm, name):
        return self.means()[arm][name]

    def to_dict(self):
        return {
            "suite": self.suite,
            "task_style": self.task_style,
            "arms": {
                arm: {
                    "head": self.arm_heads[arm],
                    "seeds": {str(seed): report.as_dict() for seed, report in rows},
                    "mean": self.means()[arm],
                }
                for arm, rows in self.arms.items()
            },
        }

    def write(self, out_dir, force=False):
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f"{self.suite}.csv")
        json_path = os.path.join(out_dir, f"{self.suite}.json")
        for path in (csv_path, json_path):
            if os.path.exists(path) and not force:
                raise ContractError(f"refusing to overwrite {path} (use force)")
        fields = self.fields()
        means = self.means()
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["arm", "head", "seed", *fields])
            for arm, rows in self.arms.items():
                head = self.arm_heads[arm]
                for seed, report in rows:
                    writer.writerow(
                        [arm, head, seed]
                        + ["" if getattr(report, f) is None else repr(getattr(report, f)) for f in fields]
                    )
                writer.writerow(
                    [arm, head, "mean"]
                    + ["" if means[arm][f] is None else repr(means[arm][f]) for f in fields]
                )
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return csv_path, json_path


def _run_arm(result, arm, head, model_config, train_config, splits, seeds):
    train_set, val_set, test_set = splits
    rows = []
    for seed in seeds:
        log.info("suite %s arm %s seed %d", result.suite, arm, seed)
        model, _ = fit(model_config, train_set, val_set, train_config, seed)
        rows.append((seed, evaluate_model(model, test_set, head, train_config.batch_size)))
    result.add(arm, head, rows)


def suite_fusion(exp):
    """Text-only subnet vs pooled-concatenation fusion vs attention fusion."""
    splits = load_splits(exp)
    result = AblationResult("fusion", splits[0][0].task_style)
    base = _sized(exp.model, splits[0])

    text_splits = tuple(strip_modality(part, "audio") for part in splits)
    text_cfg = replace(base, fusion_mode="concat", variant="fused_only")
    text_train = replace(exp.train, alphas=(0.0, 1.0, 0.0), loss_mode="multi")
    _run_arm(result, "text_only", "text", text_cfg, text_train, text_splits, exp.seeds)

    concat_cfg = replace(base, fusion_mode="concat", variant="fused_only")
    _run_arm(result, "concat_fusion", "fused", concat_cfg, exp.train, splits, exp.seeds)

    cross_cfg = replace(base, fusion_mode="cross")
    _run_arm(result, "transformer_fusion", "fused", cross_cfg, exp.train, splits, exp.seeds)
    return result


def suite_restoration(exp):
    """The three restoration variants on identical data and seeds."""
    splits = load_splits(exp)
    result = AblationResult("restoration", splits[0][0].task_style)
    base = _sized(exp.model, splits[0])
    for variant in ("fused_only", "concat_restore", "transformer_restore"):
        cfg = replace(base, fusion_mode="cross", variant=variant)
        _run_arm(result, variant, "fused", cfg, exp.train, splits, exp.seeds)
    return result


def suite_multiloss(exp):
    """Single- vs multi-loss training under distinct and duplicated labels."""
    if exp.generator is None or exp.generator.task_style != "sims":
        raise ConfigError("the multiloss suite needs a sims-style generator")
    result = AblationResult("multiloss", "sims")
    flavors = (
        ("distinct", replace(exp.generator, modality_labels=True)),
        ("duplicated", replace(exp.generator, modality_labels=False)),
    )
    for flavor, gen in flavors:
        splits = load_splits(replace(exp, generator=gen))
        base = _sized(exp.model, splits[0])
        for mode in ("single", "multi"):
            cfg_train = replace(exp.train, loss_mode=mode, alphas=(1.0, 1.0, 1.0))
            _run_arm(result, f"{mode}_{flavor}", "fused", base, cfg_train, splits, exp.seeds)
    return result


def suite_context(exp, windows=CONTEXT_WINDOWS):
    """Concatenation vs independent context over a grid of text windows."""
    raw_splits = load_splits(exp)
    result = AblationResult("context", raw_splits[0][0].task_style)
    base = _sized(exp.model, raw_splits[0])
    for method in ("concatenation", "independent"):
        for window in windows:
            ctx = ContextConfig(method=method, text_window=window, audio_window=0)
            cfg = replace(base, context=ctx)
            splits = tuple(assemble_context(part, ctx) for part in raw_splits)
            _run_arm(result, f"{method}_w{window}", "fused", cfg, exp.train, splits, exp.seeds)
    return result


def run_suite(name, exp):
    if name not in SUITES:
        raise ConfigError(f"unknown suite {name!r}")
    return {
        "fusion": suite_fusion,
        "restoration": suite_restoration,
        "multiloss": suite_multiloss,
        "context": suite_context,
    }[name](exp)

"""Synthetic multimodal dataset generation, JSONL ingestion, dialogue context
assembly, batching with padding masks, and dialogue-level splits."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError, ParseError

TASK_RANGES = {"mosi": 3.0, "sims": 1.0}


def task_range(style):
    if style not in TASK_RANGES:
        raise ConfigError(f"unknown task style {style!r}")
    return TASK_RANGES[style]


@dataclass(eq=False)
class UtteranceSample:
    """One utterance: per-modality embedding sequences plus its label set.

    `text_ctx`/`audio_ctx` hold preceding-utterance sequences attached by
    `assemble_context` under the independent method.
    """

    id: str
    dialogue_id: str
    turn_index: int
    text_seq: np.ndarray | None
    audio_seq: np.ndarray | None
    label_f: float
    label_t: float | None = None
    label_a: float | None = None
    task_style: str = "mosi"
    text_ctx: np.ndarray | None = None
    audio_ctx: np.ndarray | None = None


@dataclass(frozen=True)
class ContextConfig:
    """How preceding utterances are supplied to the model."""

    method: str = "none"  # none | concatenation | independent
    text_window: int = 0
    audio_window: int = 0

    def validate(self):
        if self.method not in ("none", "concatenation", "independent"):
            raise ConfigError(f"unknown context method {self.method!r}")
        if self.text_window < 0 or self.audio_window < 0:
            raise ConfigError("context windows must be nonnegative")

    def effective_windows(self):
        if self.method == "none":
            return 0, 0
        return self.text_window, self.audio_window

    def to_dict(self):
        return {
            "method": self.method,
            "text_window": self.text_window,
            "audio_window": self.audio_window,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GeneratorConfig:
    """Controls the synthetic dialogue generator.

    Within a dialogue the base sentiment follows an AR(1) chain with
    autocorrelation `rho`; each modality observes the base value through its
    own label noise (`sigma_t`, `sigma_a`) and encodes its noisy view along a
    fixed random unit direction with per-step embedding noise `sigma_e`.
    """

    n_samples: int = 200
    task_style: str = "mosi"
    d_in_text: int = 8
    d_in_audio: int = 8
    len_min: int = 4
    len_max: int = 8
    sigma_t: float = 0.0
    sigma_a: float = 0.0
    sigma_e: float = 0.1
    dlg_min: int = 4
    dlg_max: int = 8
    rho: float = 0.0
    seed: int = 0
    modality_labels: bool | None = None  # None: present exactly for sims style

    def validate(self):
        task_range(self.task_style)
        if self.n_samples < 0:
            raise ConfigError("n_samples must be nonnegative")
        if self.d_in_text < 1 or self.d_in_audio < 1:
            raise ConfigError("embedding widths must be positive")
        if not (1 <= self.len_min <= self.len_max):
            raise ConfigError(f"bad length range [{self.len_min}, {self.len_max}]")
        if not (1 <= self.dlg_min <= self.dlg_max):
            raise ConfigError(f"bad dialogue length range [{self.dlg_min}, {self.dlg_max}]")
        if min(self.sigma_t, self.sigma_a, self.sigma_e) < 0:
            raise ConfigError("noise levels must be nonnegative")
        if not (0.0 <= self.rho < 1.0):
            raise ConfigError(f"autocorrelation must lie in [0, 1), got {self.rho}")

    def emits_modality_labels(self):
        if self.modality_labels is None:
            return self.task_style == "sims"
        return self.modality_labels


@dataclass
class Batch:
    """Padded per-modality arrays with masks marking real time steps."""

    text: np.ndarray | None
    text_mask: np.ndarray | None
    audio: np.ndarray | None
    audio_mask: np.ndarray | None
    target_t: np.ndarray
    target_a: np.ndarray
    target_f: np.ndarray
    text_ctx: np.ndarray | None = None
    text_ctx_mask: np.ndarray | None = None
    audio_ctx: np.ndarray | None = None
    audio_ctx_mask: np.ndarray | None = None
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def targets(self):
        """Targets in (audio, text, fused) order, matching loss weights."""
        return self.target_a, self.target_t, self.target_f


def generate(config):
    """Generate dialogues of utterances per the AR(1) synthetic process."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    half = task_range(config.task_style)
    stationary_sd = half / math.sqrt(3.0)  # variance matched to uniform on the range
    u_text = rng.standard_normal(config.d_in_text)
    u_text /= np.linalg.norm(u_text)
    u_audio = rng.standard_normal(config.d_in_audio)
    u_audio /= np.linalg.norm(u_audio)
    with_labels = config.emits_modality_labels()

    samples = []
    dlg_index = 0
    while len(samples) < config.n_samples:
        dlg_len = int(rng.integers(config.dlg_min, config.dlg_max + 1))
        dlg_len = min(dlg_len, config.n_samples - len(samples))
        dialogue_id = f"d{dlg_index:05d}"
        y = 0.0
        for turn in range(dlg_len):
            if turn == 0:
                y = stationary_sd * rng.standard_normal()
            else:
                y = config.rho * y + math.sqrt(1.0 - config.rho**2) * (
                    stationary_sd * rng.standard_normal()
                )
            label_f = float(np.clip(y, -half, half))
            y_t = float(np.clip(y + config.sigma_t * rng.standard_normal(), -half, half))
            y_a = float(np.clip(y + config.sigma_a * rng.standard_normal(), -half, half))
            l_t = int(rng.integers(config.len_min, config.len_max + 1))
            l_a = int(rng.integers(config.len_min, config.len_max + 1))
            text = y_t * u_text + config.sigma_e * rng.standard_normal((l_t, config.d_in_text))
            audio = y_a * u_audio + config.sigma_e * rng.standard_normal((l_a, config.d_in_audio))
            samples.append(
                UtteranceSample(
                    id=f"{dialogue_id}_u{turn:03d}",
                    dialogue_id=dialogue_id,
                    turn_index=turn,
                    text_seq=text,
                    audio_seq=audio,
                    label_f=label_f,
                    label_t=y_t if with_labels else None,
                    label_a=y_a if with_labels else None,
                    task_style=config.task_style,
                )
            )
        dlg_index += 1
    return samples


# ---------------------------------------------------------------------------
# JSONL dataset files


def write_jsonl(samples, path):
    """One JSON object per line; float repr keeps values exact on round trip."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            record = {
                "id": s.id,
                "dialogue_id": s.dialogue_id,
                "turn": s.turn_index,
                "text_emb": s.text_seq.tolist(),
                "audio_emb": s.audio_seq.tolist(),
                "label": s.label_f,
                "style": s.task_style,
            }
            if s.label_t is not None:
                record["label_t"] = s.label_t
            if s.label_a is not None:
                record["label_a"] = s.label_a
            fh.write(json.dumps(record) + "\n")


def _parse_embedding(raw, key, lineno, expected_width):
    try:
        arr = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"line {lineno}: bad {key}: {exc}") from None
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise FormatError(f"line {lineno}: {key} must be a nonempty 2-d list, got shape {arr.shape}")
    if expected_width is not None and arr.shape[1] != expected_width:
        raise FormatError(
            f"line {lineno}: {key} width {arr.shape[1]} differs from earlier records ({expected_width})"
        )
    return arr


def load_jsonl(path):
    """Read a JSONL dataset, validating shapes, widths and label ranges."""
    samples = []
    width_t = width_a = None
    style_seen = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON: {exc.msg}") from None
            try:
                style = record["style"]
                sample_id = record["id"]
                dialogue_id = record["dialogue_id"]
                turn = int(record["turn"])
                label_f = float(record["label"])
                raw_t = record["text_emb"]
                raw_a = record["audio_emb"]
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"line {lineno}: missing or malformed field: {exc}") from None
            if style not in TASK_RANGES:
                raise FormatError(f"line {lineno}: unknown style {style!r}")
            if style_seen is None:
                style_seen = style
            elif style != style_seen:
                raise FormatError(f"line {lineno}: mixed task styles {style_seen!r} and {style!r}")
            half = TASK_RANGES[style]
            if turn < 0:
                raise FormatError(f"line {lineno}: negative turn index")
            text = _parse_embedding(raw_t, "text_emb", lineno, width_t)
            audio = _parse_embedding(raw_a, "audio_emb", lineno, width_a)
            width_t, width_a = text.shape[1], audio.shape[1]
            labels = {"label": label_f}
            for key in ("label_t", "label_a"):
                if key in record:
                    labels[key] = float(record[key])
            for key, value in labels.items():
                if not (-half <= value <= half):
                    raise FormatError(
                        f"line {lineno}: {key}={value} outside [{-half}, {half}] for style {style!r}"
                    )
            samples.append(
                UtteranceSample(
                    id=str(sample_id),
                    dialogue_id=str(dialogue_id),
                    turn_index=turn,
                    text_seq=text,
                    audio_seq=audio,
                    label_f=label_f,
                    label_t=labels.get("label_t"),
                    label_a=labels.get("label_a"),
                    task_style=style,
                )
            )
    return samples


# ---------------------------------------------------------------------------
# context assembly


def assemble_context(samples, context):
    """Attach up to the configured window of preceding same-dialogue utterances.

    Concatenation prepends context sequences time-wise to the current
    sequence; independent keeps them as a separate per-modality bundle.
    Windows never cross dialogue boundaries.
    """
    context.validate()
    w_text, w_audio = context.effective_windows()
    if w_text == 0 and w_audio == 0:
        return list(samples)

    by_dialogue = defaultdict(list)
    for s in samples:
        by_dialogue[s.dialogue_id].append(s)
    position = {}
    for dlg in by_dialogue.values():
        dlg.sort(key=lambda s: s.turn_index)
        for pos, s in enumerate(dlg):
            position[id(s)] = pos

    out = []
    for s in samples:
        dlg = by_dialogue[s.dialogue_id]
        pos = position[id(s)]
        prev_text = [p.text_seq for p in dlg[max(0, pos - w_text) : pos]] if w_text else []
        prev_audio = [p.audio_seq for p in dlg[max(0, pos - w_audio) : pos]] if w_audio else []
        if context.method == "concatenation":
            new = replace(
                s,
                text_seq=np.concatenate(prev_text + [s.text_seq]) if prev_text else s.text_seq,
                audio_seq=np.concatenate(prev_audio + [s.audio_seq]) if prev_audio else s.audio_seq,
            )
        else:
            new = replace(
                s,
                text_ctx=np.concatenate(prev_text) if prev_text else None,
                audio_ctx=np.concatenate(prev_audio) if prev_audio else None,
            )
        out.append(new)
    return out


# ---------------------------------------------------------------------------
# batching


def _pad_stack(seqs, what):
    """Pad variable-length (L, d) arrays to a common (B, Lmax, d) block."""
    widths = {s.shape[1] for s in seqs}
    if len(widths) != 1:
        raise DimensionError(f"inconsistent {what} widths in batch: {sorted(widths)}")
    d = widths.pop()
    l_max = max(s.shape[0] for s in seqs)
    block = np.zeros((len(seqs), l_max, d))
    mask = np.zeros((len(seqs), l_max))
    for i, s in enumerate(seqs):
        block[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = 1.0
    return block, mask


def _pad_optional(seqs, what):
    """Like _pad_stack but entries may be None (all-zero mask row)."""
    present = [s for s in seqs if s is not None]
    if not present:
        return None, None
    widths = {s.shape[1] for s in present}
    if len(widths) != 1:
        raise DimensionError(f"inconsistent {what} widths in batch: {sorted(widths)}")
    d = widths.pop()
    l_max = max(s.shape[0] for s in present)
    block = np.zeros((len(seqs), l_max, d))
    mask = np.zeros((len(seqs), l_max))
    for i, s in enumerate(seqs):
        if s is not None:
            block[i, : s.shape[0]] = s
            mask[i, : s.shape[0]] = 1.0
    return block, mask


def _modality_block(samples, attr, what):
    seqs = [getattr(s, attr) for s in samples]
    present = [s is not None for s in seqs]
    if not any(present):
        return None, None
    if not all(present):
        raise ContractError(f"mixed {what} availability within one batch")
    return _pad_stack(seqs, what)


def pad_batch(samples, batch_size):
    """Group samples in order into padded batches of at most `batch_size`."""
    if not samples:
        raise ContractError("pad_batch needs at least one sample")
    if batch_size < 1:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    batches = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        text, text_mask = _modality_block(chunk, "text_seq", "text")
        audio, audio_mask = _modality_block(chunk, "audio_seq", "audio")
        text_ctx, text_ctx_mask = _pad_optional([s.text_ctx for s in chunk], "text context")
        audio_ctx, audio_ctx_mask = _pad_optional([s.audio_ctx for s in chunk], "audio context")
        target_f = np.array([s.label_f for s in chunk])
        target_t = np.array([s.label_t if s.label_t is not None else s.label_f for s in chunk])
        target_a = np.array([s.label_a if s.label_a is not None else s.label_f for s in chunk])
        batches.append(
            Batch(
                text=text,
                text_mask=text_mask,
                audio=audio,
                audio_mask=audio_mask,
                target_t=target_t,
                target_a=target_a,
                target_f=target_f,
                text_ctx=text_ctx,
                text_ctx_mask=text_ctx_mask,
                audio_ctx=audio_ctx,
                audio_ctx_mask=audio_ctx_mask,
                samples=list(chunk),
            )
        )
    return batches


# ---------------------------------------------------------------------------
# splitting


def split(samples, fractions, seed):
    """Dialogue-level split: whole dialogues stay in one part."""
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"need three nonnegative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    by_dialogue = {}
    for s in samples:
        by_dialogue.setdefault(s.dialogue_id, []).append(s)
    dialogue_ids = list(by_dialogue)
    rng = np.random.default_rng(seed)
    rng.shuffle(dialogue_ids)

    n = len(samples)
    cut_train = fractions[0] * n
    cut_val = (fractions[0] + fractions[1]) * n
    parts = ([], [], [])
    count = 0
    for did in dialogue_ids:
        dlg = by_dialogue[did]
        if count < cut_train:
            parts[0].extend(dlg)
        elif count < cut_val:
            parts[1].extend(dlg)
        else:
            parts[2].extend(dlg)
        count += len(dlg)
    return parts


def strip_modality(samples, modality):
    """Return copies with one modality's sequences (and label) removed."""
    if modality == "audio":
        return [replace(s, audio_seq=None, audio_ctx=None, label_a=None) for s in samples]
    if modality == "text":
        return [replace(s, text_seq=None, text_ctx=None, label_t=None) for s in samples]
    raise ContractError(f"unknown modality {modality!r}")

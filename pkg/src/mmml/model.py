"""The full fusion network: per-modality feature encoders, bidirectional
cross-modal fusion stacks, signal-restoration variants, context merging, and
the three prediction heads (text, audio, fused)."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    EncoderLayerParams,
    FfnParams,
    encoder_layer,
    pointwise_ffn,
    sinusoidal_pe,
)
from .data import ContextConfig
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError
from .tensor import Tensor, add, concat, layer_norm, masked_mean_pool, matmul, reshape

VARIANTS = ("fused_only", "concat_restore", "transformer_restore")
FUSION_MODES = ("cross", "concat")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    `fusion_mode` "cross" is the attention fusion stack; "concat" is the
    baseline that feeds the fused head from the two pooled modality encodings
    directly.  `d_ff` defaults to 4 * d_model when unset.
    """

    d_in_text: int
    d_in_audio: int
    d_model: int = 16
    num_heads: int = 2
    fusion_layers: int = 5
    d_ff: int | None = None
    feature_encoder_layers: int = 1
    variant: str = "fused_only"
    fusion_mode: str = "cross"
    positional_encoding: bool = True
    context: ContextConfig = field(default_factory=ContextConfig)

    @property
    def ffn_width(self):
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    def validate(self):
        if self.d_in_text < 1 or self.d_in_audio < 1:
            raise ConfigError("input widths must be positive")
        if self.d_model < 1 or self.num_heads < 1 or self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must be a positive multiple of num_heads {self.num_heads}"
            )
        if self.fusion_layers < 1:
            raise ConfigError("fusion_layers must be at least 1")
        if self.ffn_width < 1:
            raise ConfigError("d_ff must be positive")
        if self.feature_encoder_layers < 0:
            raise ConfigError("feature_encoder_layers must be nonnegative")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.fusion_mode == "concat" and self.variant != "fused_only":
            raise ConfigError("restoration variants require the cross fusion mode")
        if self.positional_encoding and self.d_model % 2 != 0:
            raise ConfigError("positional encoding needs an even d_model")
        self.context.validate()

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "d_in_text", "d_in_audio", "d_model", "num_heads", "fusion_layers",
            "d_ff", "feature_encoder_layers", "variant", "fusion_mode",
            "positional_encoding",
        )}
        d["context"] = self.context.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["context"] = ContextConfig.from_dict(d.get("context", {}))
        return cls(**d)


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


@dataclass
class RestorationParams:
    linear: LinearParams
    encoder: EncoderLayerParams | None


@dataclass
class FusionRep:
    """One fusion repetition: cross encoder, self encoder, FFN stage."""

    cross: EncoderLayerParams
    self_attn: EncoderLayerParams
    ffn: FfnParams
    ffn_norm_gain: Tensor
    ffn_norm_bias: Tensor


@dataclass
class Prediction:
    """Scalar sentiment outputs per sample; absent heads are None."""

    y_text: Tensor | None
    y_audio: Tensor | None
    y_fused: Tensor | None

    def primary(self):
        """The fused output when present, else the single available head."""
        for y in (self.y_fused, self.y_text, self.y_audio):
            if y is not None:
                return y
        raise ContractError("prediction has no outputs")


class MmmlModel:
    """Named-parameter collection plus the structured views over it."""

    def __init__(self, config):
        self.config = config
        self.params = {}  # name -> Tensor, insertion-ordered
        self.text_proj = None
        self.audio_proj = None
        self.text_encoder = []
        self.audio_encoder = []
        self.branch_tq = []
        self.branch_aq = []
        self.head_t = None
        self.head_a = None
        self.head_f = None
        self.restore_tq = None
        self.restore_aq = None
        self.ctx_text_sub = None
        self.ctx_text_fused = None
        self.ctx_audio_sub = None
        self.ctx_audio_fused = None

    def named_parameters(self):
        return self.params

    def param_count(self):
        return sum(t.array.size for t in self.params.values())

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def snapshot(self):
        return {name: t.array.copy() for name, t in self.params.items()}

    def restore(self, snap):
        for name, t in self.params.items():
            t.array[...] = snap[name]


class _Registry:
    """Registers parameters in a fixed order with fan-in uniform init."""

    def __init__(self, model, rng):
        self.model = model
        self.rng = rng

    def _register(self, name, tensor):
        if name in self.model.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.model.params[name] = tensor
        return tensor

    def weight(self, name, shape):
        bound = math.sqrt(1.0 / shape[0])
        return self._register(name, Tensor(self.rng.uniform(-bound, bound, shape), requires_grad=True))

    def zeros(self, name, shape):
        return self._register(name, Tensor(np.zeros(shape), requires_grad=True))

    def ones(self, name, shape):
        return self._register(name, Tensor(np.ones(shape), requires_grad=True))

    def linear(self, prefix, n_in, n_out):
        return LinearParams(
            w=self.weight(f"{prefix}.w", (n_in, n_out)),
            b=self.zeros(f"{prefix}.b", (n_out,)),
        )

    def attention(self, prefix, d, heads):
        return AttentionParams(
            w_q=self.weight(f"{prefix}.wq", (d, d)),
            w_k=self.weight(f"{prefix}.wk", (d, d)),
            w_v=self.weight(f"{prefix}.wv", (d, d)),
            w_o=self.weight(f"{prefix}.wo", (d, d)),
            num_heads=heads,
        )

    def ffn(self, prefix, d, d_ff):
        return FfnParams(
            w1=self.weight(f"{prefix}.w1", (d, d_ff)),
            b1=self.zeros(f"{prefix}.b1", (d_ff,)),
            w2=self.weight(f"{prefix}.w2", (d_ff, d_ff)),
            b2=self.zeros(f"{prefix}.b2", (d_ff,)),
            w3=self.weight(f"{prefix}.w3", (d_ff, d)),
            b3=self.zeros(f"{prefix}.b3", (d,)),
        )

    def encoder(self, prefix, d, heads, d_ff):
        return EncoderLayerParams(
            attn=self.attention(f"{prefix}.attn", d, heads),
            ffn=self.ffn(f"{prefix}.ffn", d, d_ff),
            norm1_gain=self.ones(f"{prefix}.norm1.g", (d,)),
            norm1_bias=self.zeros(f"{prefix}.norm1.b", (d,)),
            norm2_gain=self.ones(f"{prefix}.norm2.g", (d,)),
            norm2_bias=self.zeros(f"{prefix}.norm2.b", (d,)),
        )

    def fusion_rep(self, prefix, d, heads, d_ff):
        return FusionRep(
            cross=self.encoder(f"{prefix}.cross", d, heads, d_ff),
            self_attn=self.encoder(f"{prefix}.self", d, heads, d_ff),
            ffn=self.ffn(f"{prefix}.ffn", d, d_ff),
            ffn_norm_gain=self.ones(f"{prefix}.ffn_norm.g", (d,)),
            ffn_norm_bias=self.zeros(f"{prefix}.ffn_norm.b", (d,)),
        )


def init_model(config, seed):
    """Build a model with seeded fan-in uniform weights and zero biases."""
    config.validate()
    model = MmmlModel(config)
    reg = _Registry(model, np.random.default_rng(seed))
    d, heads, d_ff = config.d_model, config.num_heads, config.ffn_width

    model.text_proj = reg.linear("text_proj", config.d_in_text, d)
    model.audio_proj = reg.linear("audio_proj", config.d_in_audio, d)
    model.text_encoder = [
        reg.encoder(f"text_enc.{i}", d, heads, d_ff)
        for i in range(config.feature_encoder_layers)
    ]
    model.audio_encoder = [
        reg.encoder(f"audio_enc.{i}", d, heads, d_ff)
        for i in range(config.feature_encoder_layers)
    ]
    if config.fusion_mode == "cross":
        model.branch_tq = [
            reg.fusion_rep(f"fuse_tq.{i}", d, heads, d_ff) for i in range(config.fusion_layers)
        ]
        model.branch_aq = [
            reg.fusion_rep(f"fuse_aq.{i}", d, heads, d_ff) for i in range(config.fusion_layers)
        ]
    model.head_t = reg.linear("head_t", d, 1)
    model.head_a = reg.linear("head_a", d, 1)
    model.head_f = reg.linear("head_f", 2 * d, 1)
    if config.fusion_mode == "cross" and config.variant != "fused_only":
        for branch in ("restore_tq", "restore_aq"):
            enc = None
            linear = reg.linear(f"{branch}.lin", 2 * d, d)
            if config.variant == "transformer_restore":
                enc = reg.encoder(f"{branch}.enc", d, heads, d_ff)
            setattr(model, branch, RestorationParams(linear=linear, encoder=enc))
    w_text, w_audio = config.context.effective_windows()
    if config.context.method == "independent":
        if w_text > 0:
            model.ctx_text_sub = reg.linear("ctx_text_sub", 2 * d, d)
            model.ctx_text_fused = reg.linear("ctx_text_fused", 2 * d, d)
        if w_audio > 0:
            model.ctx_audio_sub = reg.linear("ctx_audio_sub", 2 * d, d)
            model.ctx_audio_fused = reg.linear("ctx_audio_fused", 2 * d, d)
    return model


# ---------------------------------------------------------------------------
# forward pass

_pe_cache = {}


def _positional(length, d):
    key = (length, d)
    if key not in _pe_cache:
        _pe_cache[key] = sinusoidal_pe(length, d)
    return _pe_cache[key]


def _encode(model, modality, seq, mask):
    proj = model.text_proj if modality == "text" else model.audio_proj
    layers = model.text_encoder if modality == "text" else model.audio_encoder
    if seq.shape[1] != proj.w.shape[0]:
        raise DimensionError(
            f"{modality} input width {seq.shape[1]} does not match model ({proj.w.shape[0]})"
        )
    x = add(matmul(Tensor(seq), proj.w), proj.b)
    if model.config.positional_encoding:
        x = add(x, _positional(seq.shape[0], model.config.d_model))
    for layer in layers:
        x = encoder_layer(layer, x, x, mask)
    return x


def _linear_row(row, lin):
    return add(matmul(row, lin.w), lin.b)


def _pool_row(x, mask, d):
    return reshape(masked_mean_pool(x, mask), (1, d))


def _context_rep(model, modality, ctx_seq, ctx_mask):
    """Pooled representation of the context bundle; zero row when absent."""
    d = model.config.d_model
    if ctx_seq is None or ctx_mask is None or not np.any(ctx_mask):
        return Tensor(np.zeros((1, d)))
    enc = _encode(model, modality, ctx_seq, ctx_mask)
    return _pool_row(enc, ctx_mask, d)


def _subnet(model, modality, seq, mask, ctx_seq, ctx_mask):
    """Per-modality path: encode, pool, merge context, apply the subnet head.

    Returns (encoded sequence, pooled row, context row or None, head output).
    """
    d = model.config.d_model
    enc = _encode(model, modality, seq, mask)
    pooled = _pool_row(enc, mask, d)
    merge = model.ctx_text_sub if modality == "text" else model.ctx_audio_sub
    ctx_row = None
    if merge is not None:
        ctx_row = _context_rep(model, modality, ctx_seq, ctx_mask)
        merged = _linear_row(concat([pooled, ctx_row], axis=1), merge)
    else:
        merged = pooled
    head = model.head_t if modality == "text" else model.head_a
    y = reshape(_linear_row(merged, head), ())
    return enc, pooled, ctx_row, y


def fusion_branch(model, branch, f_q, f_kv, q_mask=None, kv_mask=None):
    """Run the stacked [cross -> self -> FFN] repetitions for one branch.

    Every repetition's cross stage reads the original encoded counterpart
    sequence `f_kv`; only the query stream evolves.
    """
    reps = model.branch_tq if branch == "text_query" else model.branch_aq
    if not reps:
        raise ContractError(f"model has no fusion stack for branch {branch!r}")
    x = f_q
    for rep in reps:
        x = encoder_layer(rep.cross, x, f_kv, kv_mask)
        x = encoder_layer(rep.self_attn, x, x, q_mask)
        x = layer_norm(add(x, pointwise_ffn(rep.ffn, x)), rep.ffn_norm_gain, rep.ffn_norm_bias)
    return x


def apply_restoration(params, variant, original, fused, mask=None):
    """Re-inject the pre-fusion signal per the configured variant."""
    if variant == "fused_only":
        return fused
    if original.shape[0] != fused.shape[0]:
        raise DimensionError(
            f"restoration lengths differ: {original.shape} vs {fused.shape}"
        )
    z = concat([original, fused], axis=1)
    z = add(matmul(z, params.linear.w), params.linear.b)
    if variant == "transformer_restore":
        z = encoder_layer(params.encoder, z, z, mask)
    return z


def _fused_output(model, enc_t, tmask, pooled_t, ctx_t, enc_a, amask, pooled_a, ctx_a):
    cfg = model.config
    d = cfg.d_model
    if cfg.fusion_mode == "concat":
        b_tq, b_aq = pooled_t, pooled_a
    else:
        ft = fusion_branch(model, "text_query", enc_t, enc_a, tmask, amask)
        fa = fusion_branch(model, "audio_query", enc_a, enc_t, amask, tmask)
        ft = apply_restoration(model.restore_tq, cfg.variant, enc_t, ft, tmask)
        fa = apply_restoration(model.restore_aq, cfg.variant, enc_a, fa, amask)
        b_tq = _pool_row(ft, tmask, d)
        b_aq = _pool_row(fa, amask, d)
    if model.ctx_text_fused is not None:
        b_tq = _linear_row(concat([b_tq, ctx_t], axis=1), model.ctx_text_fused)
    if model.ctx_audio_fused is not None:
        b_aq = _linear_row(concat([b_aq, ctx_a], axis=1), model.ctx_audio_fused)
    return reshape(_linear_row(concat([b_tq, b_aq], axis=1), model.head_f), ())


def _forward_sample(model, text, tmask, audio, amask, tctx, tctx_mask, actx, actx_mask):
    if text is None and audio is None:
        raise ContractError("sample has no modality present")
    y_t = y_a = y_f = None
    enc_t = pooled_t = ctx_t = None
    enc_a = pooled_a = ctx_a = None
    if text is not None:
        enc_t, pooled_t, ctx_t, y_t = _subnet(model, "text", text, tmask, tctx, tctx_mask)
    if audio is not None:
        enc_a, pooled_a, ctx_a, y_a = _subnet(model, "audio", audio, amask, actx, actx_mask)
    if text is not None and audio is not None:
        if model.ctx_text_fused is not None and ctx_t is None:
            ctx_t = _context_rep(model, "text", tctx, tctx_mask)
        if model.ctx_audio_fused is not None and ctx_a is None:
            ctx_a = _context_rep(model, "audio", actx, actx_mask)
        y_f = _fused_output(model, enc_t, tmask, pooled_t, ctx_t, enc_a, amask, pooled_a, ctx_a)
    pred = Prediction(y_text=y_t, y_audio=y_a, y_fused=y_f)
    for y in (y_t, y_a, y_f):
        if y is not None and not np.isfinite(y.array):
            raise NumericError("non-finite prediction")
    return pred


def forward(model, batch):
    """Predictions for every sample of a padded batch, order-preserving."""
    if len(batch) == 0:
        raise ContractError("forward over an empty batch")
    preds = []
    for i in range(len(batch)):
        preds.append(
            _forward_sample(
                model,
                batch.text[i] if batch.text is not None else None,
                batch.text_mask[i] if batch.text_mask is not None else None,
                batch.audio[i] if batch.audio is not None else None,
                batch.audio_mask[i] if batch.audio_mask is not None else None,
                batch.text_ctx[i] if batch.text_ctx is not None else None,
                batch.text_ctx_mask[i] if batch.text_ctx_mask is not None else None,
                batch.audio_ctx[i] if batch.audio_ctx is not None else None,
                batch.audio_ctx_mask[i] if batch.audio_ctx_mask is not None else None,
            )
        )
    return preds


def predict_available(model, sample):
    """Predict with whatever modalities the sample provides.

    The per-modality subnet paths are the same functions the full forward
    uses, so a text-only prediction equals the full forward's y_text exactly.
    """
    text = sample.text_seq
    audio = sample.audio_seq
    if text is None and audio is None:
        raise ContractError(f"sample {sample.id!r} has no modalities")
    ones = lambda n: np.ones(n)
    return _forward_sample(
        model,
        text,
        ones(text.shape[0]) if text is not None else None,
        audio,
        ones(audio.shape[0]) if audio is not None else None,
        sample.text_ctx,
        ones(sample.text_ctx.shape[0]) if sample.text_ctx is not None else None,
        sample.audio_ctx,
        ones(sample.audio_ctx.shape[0]) if sample.audio_ctx is not None else None,
    )


# ---------------------------------------------------------------------------
# persistence

_MAGIC = b"MMML"
_VERSION = 1


def save_model(model, path):
    """Binary model file; all integers little-endian, values little-endian f64."""
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", _VERSION)
    config_json = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(config_json))
    blob += config_json
    blob += struct.pack("<I", len(model.params))
    for name, t in model.params.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        arr = np.ascontiguousarray(t.array, dtype="<f8")
        blob += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            blob += struct.pack("<I", extent)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what} at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]


def load_model(path):
    """Read a model file back; round-trips bitwise with save_model."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4, "magic") != _MAGIC:
        raise FormatError("bad magic at offset 0")
    version = r.u32("version")
    if version != _VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    config_len = r.u32("config length")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(config_len, "config").decode("utf-8")))
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"bad config block: {exc}") from None
    n_params = r.u32("parameter count")
    model = init_model(config, seed=0)
    expected = list(model.params)
    if n_params != len(expected):
        raise FormatError(f"expected {len(expected)} parameters, file has {n_params}")
    for i in range(n_params):
        name_len = r.u16("parameter name length")
        name = r.take(name_len, "parameter name").decode("utf-8")
        if name != expected[i]:
            raise FormatError(f"unexpected parameter {name!r} at position {i}")
        rank = r.u8("parameter rank")
        shape = tuple(r.u32("parameter extent") for _ in range(rank))
        target = model.params[name]
        if shape != target.array.shape:
            raise FormatError(f"parameter {name!r} has shape {shape}, expected {target.array.shape}")
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(8 * count, f"values of {name!r}")
        target.array[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    if r.pos != len(data):
        raise FormatError(f"trailing data at offset {r.pos}")
    return model

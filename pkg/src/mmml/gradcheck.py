"""Finite-difference verification of every differentiable component.

Each registered check builds a small randomized instance, wraps it in a
random fixed linear functional to get a scalar objective, and compares the
analytic gradient against central differences.
"""

from __future__ import annotations

import numpy as np

from . import attention as A
from . import tensor as T
from .data import UtteranceSample, pad_batch
from .model import ModelConfig, RestorationParams, apply_restoration, forward, init_model
from .tensor import Tensor, finite_diff_check
from .training import multi_loss

TOLERANCE = 1e-5


def _leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted_sum(out, weights):
    return T.sum_all(T.mul(out, weights))


def _check_add(rng, h):
    point = {"a": _leaf(rng, (3, 4)), "b": _leaf(rng, (4,))}
    w = rng.standard_normal((3, 4))
    return finite_diff_check(lambda p: _weighted_sum(T.add(p["a"], p["b"]), w), point, h)


def _check_sub(rng, h):
    point = {"a": _leaf(rng, (2, 5)), "b": _leaf(rng, (2, 5))}
    w = rng.standard_normal((2, 5))
    return finite_diff_check(lambda p: _weighted_sum(T.sub(p["a"], p["b"]), w), point, h)


def _check_mul(rng, h):
    point = {"a": _leaf(rng, (3, 1)), "b": _leaf(rng, (3, 4))}
    w = rng.standard_normal((3, 4))
    return finite_diff_check(lambda p: _weighted_sum(T.mul(p["a"], p["b"]), w), point, h)


def _check_matmul(rng, h):
    point = {"a": _leaf(rng, (2, 3, 4)), "b": _leaf(rng, (4, 2))}
    w = rng.standard_normal((2, 3, 2))
    return finite_diff_check(lambda p: _weighted_sum(T.matmul(p["a"], p["b"]), w), point, h)


def _check_transpose(rng, h):
    point = {"x": _leaf(rng, (2, 3, 4))}
    w = rng.standard_normal((4, 2, 3))
    return finite_diff_check(
        lambda p: _weighted_sum(T.transpose(p["x"], (2, 0, 1)), w), point, h
    )


def _check_reshape(rng, h):
    point = {"x": _leaf(rng, (3, 4))}
    w = rng.standard_normal((2, 6))
    return finite_diff_check(lambda p: _weighted_sum(T.reshape(p["x"], (2, 6)), w), point, h)


def _check_concat(rng, h):
    point = {"a": _leaf(rng, (3, 2)), "b": _leaf(rng, (3, 4))}
    w = rng.standard_normal((3, 6))
    return finite_diff_check(
        lambda p: _weighted_sum(T.concat([p["a"], p["b"]], axis=1), w), point, h
    )


def _check_take_rows(rng, h):
    point = {"x": _leaf(rng, (5, 3))}
    idx = np.array([0, 2, 2, 4])
    w = rng.standard_normal((4, 3))
    return finite_diff_check(lambda p: _weighted_sum(T.take_rows(p["x"], idx), w), point, h)


def _check_relu(rng, h):
    # keep preactivations away from the kink at 0
    x = Tensor(rng.standard_normal((4, 4)) + np.sign(rng.standard_normal((4, 4))) * 0.2,
               requires_grad=True)
    w = rng.standard_normal((4, 4))
    return finite_diff_check(lambda p: _weighted_sum(T.relu(p["x"]), w), {"x": x}, h)


def _check_softmax(rng, h):
    point = {"x": _leaf(rng, (3, 5))}
    w = rng.standard_normal((3, 5))
    return finite_diff_check(lambda p: _weighted_sum(T.softmax_lastdim(p["x"]), w), point, h)


def _check_layer_norm(rng, h):
    point = {"x": _leaf(rng, (4, 6)), "g": _leaf(rng, (6,)), "b": _leaf(rng, (6,))}
    w = rng.standard_normal((4, 6))
    return finite_diff_check(
        lambda p: _weighted_sum(T.layer_norm(p["x"], p["g"], p["b"]), w), point, h
    )


def _check_masked_mean_pool(rng, h):
    point = {"x": _leaf(rng, (6, 3))}
    mask = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 1.0])
    w = rng.standard_normal((3,))
    return finite_diff_check(
        lambda p: _weighted_sum(T.masked_mean_pool(p["x"], mask), w), point, h
    )


def _check_sum_all(rng, h):
    point = {"x": _leaf(rng, (3, 3))}
    return finite_diff_check(lambda p: T.sum_all(p["x"]), point, h)


def _attention_point(rng, d, heads):
    return {
        "wq": _leaf(rng, (d, d)),
        "wk": _leaf(rng, (d, d)),
        "wv": _leaf(rng, (d, d)),
        "wo": _leaf(rng, (d, d)),
    }, heads


def _check_multi_head_attention(rng, h):
    d, heads = 4, 2
    point, _ = _attention_point(rng, d, heads)
    point["q"] = _leaf(rng, (3, d))
    point["kv"] = _leaf(rng, (5, d))
    mask = np.array([1.0, 1.0, 0.0, 1.0, 1.0])
    w = rng.standard_normal((3, d))

    def f(p):
        params = A.AttentionParams(p["wq"], p["wk"], p["wv"], p["wo"], num_heads=heads)
        return _weighted_sum(A.multi_head_attention(params, p["q"], p["kv"], mask), w)

    return finite_diff_check(f, point, h)


def _ffn_point(rng, d, d_ff, prefix=""):
    return {
        f"{prefix}w1": _leaf(rng, (d, d_ff)),
        f"{prefix}b1": _leaf(rng, (d_ff,)),
        f"{prefix}w2": _leaf(rng, (d_ff, d_ff)),
        f"{prefix}b2": _leaf(rng, (d_ff,)),
        f"{prefix}w3": _leaf(rng, (d_ff, d)),
        f"{prefix}b3": _leaf(rng, (d,)),
    }


def _check_pointwise_ffn(rng, h):
    d, d_ff = 3, 4
    point = _ffn_point(rng, d, d_ff)
    point["x"] = _leaf(rng, (5, d))
    w = rng.standard_normal((5, d))

    def f(p):
        params = A.FfnParams(p["w1"], p["b1"], p["w2"], p["b2"], p["w3"], p["b3"])
        return _weighted_sum(A.pointwise_ffn(params, p["x"]), w)

    return finite_diff_check(f, point, h)


def _encoder_point(rng, d, heads, d_ff, prefix=""):
    attn, _ = _attention_point(rng, d, heads)
    point = {f"{prefix}{k}": v for k, v in attn.items()}
    point.update(_ffn_point(rng, d, d_ff, prefix=prefix))
    point[f"{prefix}n1g"] = _leaf(rng, (d,))
    point[f"{prefix}n1b"] = _leaf(rng, (d,))
    point[f"{prefix}n2g"] = _leaf(rng, (d,))
    point[f"{prefix}n2b"] = _leaf(rng, (d,))
    return point


def _encoder_params(p, heads, prefix=""):
    return A.EncoderLayerParams(
        attn=A.AttentionParams(
            p[f"{prefix}wq"], p[f"{prefix}wk"], p[f"{prefix}wv"], p[f"{prefix}wo"], num_heads=heads
        ),
        ffn=A.FfnParams(
            p[f"{prefix}w1"], p[f"{prefix}b1"], p[f"{prefix}w2"],
            p[f"{prefix}b2"], p[f"{prefix}w3"], p[f"{prefix}b3"],
        ),
        norm1_gain=p[f"{prefix}n1g"],
        norm1_bias=p[f"{prefix}n1b"],
        norm2_gain=p[f"{prefix}n2g"],
        norm2_bias=p[f"{prefix}n2b"],
    )


def _check_encoder_layer(rng, h):
    d, heads, d_ff = 4, 2, 4
    point = _encoder_point(rng, d, heads, d_ff)
    point["q"] = _leaf(rng, (3, d))
    point["kv"] = _leaf(rng, (4, d))
    mask = np.array([1.0, 0.0, 1.0, 1.0])
    w = rng.standard_normal((3, d))

    def f(p):
        return _weighted_sum(A.encoder_layer(_encoder_params(p, heads), p["q"], p["kv"], mask), w)

    return finite_diff_check(f, point, h)


def _check_restoration(rng, h):
    d, heads, d_ff = 4, 2, 4
    point = _encoder_point(rng, d, heads, d_ff)
    point["lin_w"] = _leaf(rng, (2 * d, d))
    point["lin_b"] = _leaf(rng, (d,))
    point["orig"] = _leaf(rng, (3, d))
    point["fused"] = _leaf(rng, (3, d))
    mask = np.ones(3)
    w = rng.standard_normal((3, d))

    def f(p):
        from .model import LinearParams

        params = RestorationParams(
            linear=LinearParams(p["lin_w"], p["lin_b"]),
            encoder=_encoder_params(p, heads),
        )
        out = apply_restoration(params, "transformer_restore", p["orig"], p["fused"], mask)
        return _weighted_sum(out, w)

    return finite_diff_check(f, point, h)


def _toy_batch(rng, d_in_text, d_in_audio):
    samples = [
        UtteranceSample(
            id="a", dialogue_id="d0", turn_index=0,
            text_seq=rng.standard_normal((3, d_in_text)),
            audio_seq=rng.standard_normal((4, d_in_audio)),
            label_f=0.5, label_t=0.3, label_a=0.7, task_style="mosi",
        ),
        UtteranceSample(
            id="b", dialogue_id="d0", turn_index=1,
            text_seq=rng.standard_normal((2, d_in_text)),
            audio_seq=rng.standard_normal((3, d_in_audio)),
            label_f=-1.0, label_t=-0.8, label_a=-1.2, task_style="mosi",
        ),
    ]
    return pad_batch(samples, batch_size=2)[0]


def _check_full_model_loss(rng, h):
    config = ModelConfig(
        d_in_text=5,
        d_in_audio=6,
        d_model=8,
        num_heads=2,
        fusion_layers=2,
        d_ff=8,
        feature_encoder_layers=1,
        variant="fused_only",
        positional_encoding=True,
    )
    model = init_model(config, seed=int(rng.integers(0, 2**31)))
    batch = _toy_batch(rng, config.d_in_text, config.d_in_audio)

    def f(_params):
        return multi_loss(forward(model, batch), batch.targets(), (1.0, 1.0, 1.0))

    return finite_diff_check(f, model.params, h)


COMPONENTS = (
    ("add", _check_add),
    ("sub", _check_sub),
    ("mul", _check_mul),
    ("matmul", _check_matmul),
    ("transpose", _check_transpose),
    ("reshape", _check_reshape),
    ("concat", _check_concat),
    ("take_rows", _check_take_rows),
    ("relu", _check_relu),
    ("softmax_lastdim", _check_softmax),
    ("layer_norm", _check_layer_norm),
    ("masked_mean_pool", _check_masked_mean_pool),
    ("sum_all", _check_sum_all),
    ("multi_head_attention", _check_multi_head_attention),
    ("pointwise_ffn", _check_pointwise_ffn),
    ("encoder_layer", _check_encoder_layer),
    ("restoration", _check_restoration),
    ("full_model_loss", _check_full_model_loss),
)


def gradcheck_report(seed=0, h=1e-5):
    """Run every registered check once; returns [(name, max relative error)]."""
    results = []
    for index, (name, check) in enumerate(COMPONENTS):
        rng = np.random.default_rng([seed, index])
        results.append((name, check(rng, h)))
    return results

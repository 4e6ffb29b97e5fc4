"""Dense-tensor CNN core with explicit forward/backward passes.

Layer vocabulary: conv2d ("same" zero padding, arbitrary stride), maxpool2d
(non-overlapping, floor semantics), batchnorm (per channel on 4-d input, per
feature on 2-d), relu, gap (global average pooling), fullyconnected, dropout
(inverted scaling), softmax. Gradients are exact; everything is checked
against central finite differences in the test suite.

Activations are (batch, channels, time, bands) for 4-d tensors and
(batch, features) after gap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_LEARNING_RATE = 0.00025
DEFAULT_L2 = 1e-6

TRAINABLE_KEYS = ("w", "b", "gamma", "beta")

LAYER_KINDS = (
    "conv2d",
    "maxpool2d",
    "batchnorm",
    "relu",
    "gap",
    "fullyconnected",
    "dropout",
    "softmax",
)


class NnError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    units: int = 0
    rate: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise NnError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.out_channels < 1 or min(self.kernel) < 1 or min(self.stride) < 1):
            raise NnError("conv2d needs positive out_channels, kernel, stride")
        if self.kind == "maxpool2d":
            if min(self.kernel) < 1:
                raise NnError("maxpool2d needs a positive kernel")
            if self.stride != self.kernel:
                raise NnError("maxpool2d is non-overlapping: stride must equal kernel")
        if self.kind == "fullyconnected" and self.units < 1:
            raise NnError("fullyconnected needs positive units")
        if self.kind == "dropout" and not (0.0 <= self.rate < 1.0):
            raise NnError("dropout rate must be in [0, 1)")


def conv2d(out_channels, kernel, stride=(1, 1)) -> LayerSpec:
    return LayerSpec(kind="conv2d", out_channels=out_channels, kernel=tuple(kernel), stride=tuple(stride))


def maxpool2d(kernel=(2, 2)) -> LayerSpec:
    return LayerSpec(kind="maxpool2d", kernel=tuple(kernel), stride=tuple(kernel))


def batchnorm() -> LayerSpec:
    return LayerSpec(kind="batchnorm")


def relu() -> LayerSpec:
    return LayerSpec(kind="relu")


def gap() -> LayerSpec:
    return LayerSpec(kind="gap")


def fullyconnected(units) -> LayerSpec:
    return LayerSpec(kind="fullyconnected", units=units)


def dropout(rate=0.5) -> LayerSpec:
    return LayerSpec(kind="dropout", rate=rate)


def softmax() -> LayerSpec:
    return LayerSpec(kind="softmax")


def _same_pads(size, kernel, stride):
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def infer_shapes(layers, input_shape) -> list:
    """Per-layer output shapes (without the batch dimension)."""
    shape = tuple(input_shape)
    out = []
    for idx, spec in enumerate(layers):
        if spec.kind == "conv2d":
            if len(shape) != 3:
                raise NnError(f"layer {idx}: conv2d expects (C, H, W), got {shape}")
            _, h, w = shape
            shape = (spec.out_channels, -(-h // spec.stride[0]), -(-w // spec.stride[1]))
        elif spec.kind == "maxpool2d":
            c, h, w = shape
            nh, nw = h // spec.kernel[0], w // spec.kernel[1]
            if nh < 1 or nw < 1:
                raise NnError(f"layer {idx}: maxpool2d input {shape} too small")
            shape = (c, nh, nw)
        elif spec.kind == "gap":
            if len(shape) != 3:
                raise NnError(f"layer {idx}: gap expects (C, H, W), got {shape}")
            shape = (shape[0],)
        elif spec.kind == "fullyconnected":
            if len(shape) != 1:
                raise NnError(f"layer {idx}: fullyconnected expects a vector, got {shape}")
            shape = (spec.units,)
        elif spec.kind in ("batchnorm", "relu", "dropout", "softmax"):
            pass
        out.append(shape)
    return out


class ParamSet:
    """Per-layer parameter tensors; `version` invalidates stale caches."""

    def __init__(self, layers: list) -> None:
        self.layers = layers
        self.version = 0

    def trainable(self):
        for idx, table in enumerate(self.layers):
            for key in TRAINABLE_KEYS:
                if key in table:
                    yield idx, key, table[key]

    def copy(self) -> "ParamSet":
        out = ParamSet([{k: v.copy() for k, v in table.items()} for table in self.layers])
        out.version = self.version
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet(
            [{k: v.astype(dtype) for k, v in table.items()} for table in self.layers]
        )
        out.version = self.version
        return out


def init_params(layers, input_shape, rng, dtype=np.float32) -> ParamSet:
    """He-scaled normals for conv/fc weights; batchnorm starts as identity."""
    shapes = infer_shapes(layers, input_shape)
    tables = []
    prev = tuple(input_shape)
    for idx, spec in enumerate(layers):
        table = {}
        if spec.kind == "conv2d":
            in_ch = prev[0]
            fan_in = in_ch * spec.kernel[0] * spec.kernel[1]
            table["w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.out_channels, in_ch, *spec.kernel)).astype(dtype)
            table["b"] = np.zeros(spec.out_channels, dtype=dtype)
        elif spec.kind == "fullyconnected":
            fan_in = prev[0]
            table["w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.units, fan_in)).astype(dtype)
            table["b"] = np.zeros(spec.units, dtype=dtype)
        elif spec.kind == "batchnorm":
            features = prev[0]
            table["gamma"] = np.ones(features, dtype=dtype)
            table["beta"] = np.zeros(features, dtype=dtype)
            table["running_mean"] = np.zeros(features, dtype=dtype)
            table["running_var"] = np.ones(features, dtype=dtype)
        tables.append(table)
        prev = shapes[idx]
    return ParamSet(tables)


def _im2col(x, kernel, stride):
    b, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    sb, sc, sh_, sw_ = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh_, sw_, sh_ * sh, sw_ * sw),
    )
    return np.ascontiguousarray(windows).reshape(b, c * kh * kw, oh * ow), (oh, ow)


def _conv_forward(spec, table, x):
    b, c, h, w = x.shape
    pt, pb = _same_pads(h, spec.kernel[0], spec.stride[0])
    pl, pr = _same_pads(w, spec.kernel[1], spec.stride[1])
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols, (oh, ow) = _im2col(xp, spec.kernel, spec.stride)
    wmat = table["w"].reshape(spec.out_channels, -1)
    out = np.matmul(wmat, cols) + table["b"][None, :, None]
    out = out.reshape(b, spec.out_channels, oh, ow)
    cache = {"cols": cols, "x_shape": x.shape, "pads": (pt, pb, pl, pr), "out_hw": (oh, ow)}
    return out, cache


def _conv_backward(spec, table, cache, dout):
    b = dout.shape[0]
    oh, ow = cache["out_hw"]
    pt, pb, pl, pr = cache["pads"]
    _, c, h, w = cache["x_shape"]
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dout2 = dout.reshape(b, spec.out_channels, oh * ow)
    grads = {
        "b": dout2.sum(axis=(0, 2)),
        "w": np.einsum("bop,bkp->ok", dout2, cache["cols"]).reshape(table["w"].shape),
    }
    # Input gradient as a stride-1 correlation with the flipped kernel over a
    # zero-upsampled output gradient (transpose convolution).
    up_h, up_w = (oh - 1) * sh + 1, (ow - 1) * sw + 1
    up = np.zeros((b, spec.out_channels, up_h, up_w), dtype=dout.dtype)
    up[:, :, ::sh, ::sw] = dout
    up = np.pad(up, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    cols_up, (fh, fw) = _im2col(up, (kh, kw), (1, 1))
    wflip = table["w"][:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C, O, kh, kw)
    dxp_full = np.matmul(wflip.reshape(c, -1), cols_up).reshape(b, c, fh, fw)
    hp, wp = h + pt + pb, w + pl + pr
    dxp = np.zeros((b, c, hp, wp), dtype=dout.dtype)
    dxp[:, :, :fh, :fw] = dxp_full
    dx = dxp[:, :, pt : pt + h, pl : pl + w]
    return grads, dx


def _maxpool_forward(spec, x):
    b, c, h, w = x.shape
    kh, kw = spec.kernel
    nh, nw = h // kh, w // kw
    if nh < 1 or nw < 1:
        raise NnError(f"maxpool2d input {x.shape} smaller than kernel {spec.kernel}")
    cropped = x[:, :, : nh * kh, : nw * kw]
    windows = cropped.reshape(b, c, nh, kh, nw, kw).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(b, c, nh, nw, kh * kw)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, {"idx": idx, "x_shape": x.shape}


def _maxpool_backward(spec, cache, dout):
    b, c, h, w = cache["x_shape"]
    kh, kw = spec.kernel
    nh, nw = h // kh, w // kw
    flat = np.zeros((b, c, nh, nw, kh * kw), dtype=dout.dtype)
    np.put_along_axis(flat, cache["idx"][..., None], dout[..., None], axis=-1)
    grid = flat.reshape(b, c, nh, nw, kh, kw).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((b, c, h, w), dtype=dout.dtype)
    dx[:, :, : nh * kh, : nw * kw] = grid.reshape(b, c, nh * kh, nw * kw)
    return dx


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise NnError(f"batchnorm expects 2-d or 4-d input, got {x.ndim}-d")


def _bn_reshape(stat, ndim):
    return stat.reshape(1, -1, 1, 1) if ndim == 4 else stat.reshape(1, -1)


def _bn_forward(table, x, mode):
    axes = _bn_axes(x)
    if mode == "train":
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        table["running_mean"] += BN_MOMENTUM * (mu.astype(table["running_mean"].dtype) - table["running_mean"])
        table["running_var"] += BN_MOMENTUM * (var.astype(table["running_var"].dtype) - table["running_var"])
    else:
        mu = table["running_mean"]
        var = table["running_var"]
    inv_sd = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - _bn_reshape(mu, x.ndim)) * _bn_reshape(inv_sd, x.ndim)
    out = _bn_reshape(table["gamma"], x.ndim) * xhat + _bn_reshape(table["beta"], x.ndim)
    count = x.size // x.shape[1]
    return out, {"xhat": xhat, "inv_sd": inv_sd, "mode": mode, "count": count}


def _bn_backward(table, cache, dout):
    ndim = dout.ndim
    axes = _bn_axes(dout)
    xhat, inv_sd = cache["xhat"], cache["inv_sd"]
    grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
    dxhat = dout * _bn_reshape(table["gamma"], ndim)
    if cache["mode"] == "train":
        n = cache["count"]
        term = dxhat - dxhat.mean(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / n
        dx = term * _bn_reshape(inv_sd, ndim)
    else:
        dx = dxhat * _bn_reshape(inv_sd, ndim)
    return grads, dx


@dataclass
class ForwardCache:
    layers: list
    params: ParamSet
    version: int
    records: list = field(default_factory=list)


def forward(layers, params: ParamSet, x, mode="eval", rng=None):
    """Run the chain; returns (output, cache) with cache usable by backward."""
    if mode not in ("train", "eval"):
        raise NnError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NnError("input contains non-finite values")
    cache = ForwardCache(layers=layers, params=params, version=params.version)
    for idx, spec in enumerate(layers):
        table = params.layers[idx]
        try:
            if spec.kind == "conv2d":
                x, rec = _conv_forward(spec, table, x)
            elif spec.kind == "maxpool2d":
                x, rec = _maxpool_forward(spec, x)
            elif spec.kind == "batchnorm":
                x, rec = _bn_forward(table, x, mode)
            elif spec.kind == "relu":
                mask = x > 0
                x = x * mask
                rec = {"mask": mask}
            elif spec.kind == "gap":
                rec = {"spatial": x.shape[2:]}
                x = x.mean(axis=(2, 3))
            elif spec.kind == "fullyconnected":
                if x.ndim != 2:
                    raise NnError("fullyconnected expects (batch, features)")
                rec = {"x": x}
                x = x @ table["w"].T + table["b"]
            elif spec.kind == "dropout":
                if mode == "train" and spec.rate > 0.0:
                    if rng is None:
                        raise NnError("dropout in train mode needs an rng")
                    mask = (rng.random(x.shape) >= spec.rate).astype(x.dtype)
                    scale = 1.0 / (1.0 - spec.rate)
                    x = x * mask * scale
                    rec = {"mask": mask, "scale": scale}
                else:
                    rec = {"mask": None}
            elif spec.kind == "softmax":
                shifted = x - x.max(axis=-1, keepdims=True)
                e = np.exp(shifted)
                x = e / e.sum(axis=-1, keepdims=True)
                rec = {"y": x}
        except ValueError as exc:
            if isinstance(exc, NnError):
                raise NnError(f"layer {idx} ({spec.kind}): {exc}") from None
            raise NnError(f"layer {idx} ({spec.kind}): shape mismatch: {exc}") from None
        cache.records.append(rec)
    return x, cache


def backward(cache: ForwardCache, grad_out, from_logits=False):
    """Exact gradients of the forward pass.

    With `from_logits=True` the final layer must be softmax and `grad_out`
    is taken with respect to its input (the pre-softmax logits).
    """
    if cache.params.version != cache.version:
        raise NnError("stale cache: parameters were updated after this forward pass")
    layers, params = cache.layers, cache.params
    start = len(layers) - 1
    if from_logits:
        if not layers or layers[-1].kind != "softmax":
            raise NnError("from_logits requires a trailing softmax layer")
        start -= 1
    grad = np.asarray(grad_out)
    grad_params = [{} for _ in layers]
    for idx in range(start, -1, -1):
        spec = layers[idx]
        table = params.layers[idx]
        rec = cache.records[idx]
        if spec.kind == "conv2d":
            grad_params[idx], grad = _conv_backward(spec, table, rec, grad)
        elif spec.kind == "maxpool2d":
            grad = _maxpool_backward(spec, rec, grad)
        elif spec.kind == "batchnorm":
            grad_params[idx], grad = _bn_backward(table, rec, grad)
        elif spec.kind == "relu":
            grad = grad * rec["mask"]
        elif spec.kind == "gap":
            h, w = rec["spatial"]
            grad = np.broadcast_to((grad / (h * w))[:, :, None, None], grad.shape + (h, w)).copy()
        elif spec.kind == "fullyconnected":
            grad_params[idx] = {"w": grad.T @ rec["x"], "b": grad.sum(axis=0)}
            grad = grad @ table["w"]
        elif spec.kind == "dropout":
            if rec["mask"] is not None:
                grad = grad * rec["mask"] * rec["scale"]
        elif spec.kind == "softmax":
            y = rec["y"]
            grad = (grad - (grad * y).sum(axis=-1, keepdims=True)) * y
    return grad_params, grad


def kl_loss(target, probs):
    """Mean KL(target || probs) and its gradient w.r.t. pre-softmax logits.

    Accepts single distributions or (batch, k) arrays. The gradient is
    (probs - target) / batch, matching a softmax output layer.
    """
    z = np.asarray(target, dtype=np.float64)
    q = np.asarray(probs, dtype=np.float64)
    if z.shape != q.shape:
        raise NnError(f"distribution length mismatch: {z.shape} vs {q.shape}")
    squeeze = z.ndim == 1
    if squeeze:
        z, q = z[None, :], q[None, :]
    batch = z.shape[0]
    safe_q = np.maximum(q, 1e-300)
    terms = np.where(z > 0, z * (np.log(np.maximum(z, 1e-300)) - np.log(safe_q)), 0.0)
    loss = float(terms.sum() / batch)
    grad = (q - z) / batch
    if squeeze:
        grad = grad[0]
    return loss, grad


class AdamState:
    """First/second moment tensors plus a step counter per parameter chain."""

    def __init__(self, params: ParamSet, learning_rate=DEFAULT_LEARNING_RATE):
        self.learning_rate = learning_rate
        self.step = 0
        self.m = [
            {key: np.zeros_like(table[key]) for key in TRAINABLE_KEYS if key in table}
            for table in params.layers
        ]
        self.v = [
            {key: np.zeros_like(table[key]) for key in TRAINABLE_KEYS if key in table}
            for table in params.layers
        ]


def adam_step(params: ParamSet, grads, state: AdamState, l2=DEFAULT_L2) -> None:
    """One Adam update with bias correction; L2 decay folded into gradients.

    Batchnorm running statistics are not trainable and are never decayed.
    """
    state.step += 1
    correction1 = 1.0 - ADAM_BETA1**state.step
    correction2 = 1.0 - ADAM_BETA2**state.step
    for idx, key, value in params.trainable():
        grad = grads[idx].get(key)
        if grad is None:
            raise NnError(f"layer {idx}: missing gradient for {key!r}")
        if not np.all(np.isfinite(grad)):
            raise NnError(f"layer {idx}: non-finite gradient for {key!r}")
        grad = grad + l2 * value
        m = state.m[idx][key]
        v = state.v[idx][key]
        m += (1.0 - ADAM_BETA1) * (grad - m)
        v += (1.0 - ADAM_BETA2) * (grad * grad - v)
        m_hat = m / correction1
        v_hat = v / correction2
        value -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(value.dtype)
    params.version += 1

"""Gated point-wise refinement over sampled anchor features.

A small residual 1D-convolution block maps features ``(C_in, S)`` to a
hidden map ``h``; two 3-tap heads produce offsets ``r`` and gate logits.
The gated offset ``sigmoid(gate) * r`` is linearly resampled from ``S``
sample points to the ``N`` grid rows.  Forward and backward passes are
batched over a leading axis.

Weight layout: 3-tap kernels are ``(C_in, C_out, 3)`` with tap ``k``
reading input position ``s + k - 1`` (zero padded).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from .errors import (
    LaneGeomError,
    MissingCacheError,
    NonFiniteError,
    OutOfRangeError,
    ShapeMismatchError,
)
from .geometry import DEFAULT_POINTS, interp_matrix

DEFAULT_CHANNELS = 64
DEFAULT_HIDDEN = 32
DEFAULT_SAMPLES = 36
GATE_BIAS_INIT = -2.0
CONTAINER_FORMAT = "named-tensors/v1"


@dataclass
class AglrParams:
    conv1_w: np.ndarray   # (C_in, C_h, 3)
    conv1_b: np.ndarray   # (C_h,)
    conv2_w: np.ndarray   # (C_h, C_h, 3)
    conv2_b: np.ndarray
    res_w: np.ndarray     # (C_in, C_h)
    res_b: np.ndarray
    off_w: np.ndarray     # (C_h, 1, 3)
    off_b: np.ndarray     # (1,)
    gate_w: np.ndarray    # (C_h, 1, 3)
    gate_b: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        c_in, c_h, taps = self.conv1_w.shape
        expected = {
            "conv1_w": (c_in, c_h, 3), "conv1_b": (c_h,),
            "conv2_w": (c_h, c_h, 3), "conv2_b": (c_h,),
            "res_w": (c_in, c_h), "res_b": (c_h,),
            "off_w": (c_h, 1, 3), "off_b": (1,),
            "gate_w": (c_h, 1, 3), "gate_b": (1,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"{name} has non-finite entries")

    @property
    def in_channels(self) -> int:
        return self.conv1_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.conv1_w.shape[1]

    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.names()}

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in self.names()])

    def unflatten(self, vec) -> "AglrParams":
        vec = np.asarray(vec, dtype=np.float64)
        total = sum(getattr(self, n).size for n in self.names())
        if vec.shape != (total,):
            raise ShapeMismatchError(f"vector has shape {vec.shape}, expected ({total},)")
        out, i = {}, 0
        for n in self.names():
            arr = getattr(self, n)
            out[n] = vec[i:i + arr.size].reshape(arr.shape)
            i += arr.size
        return AglrParams(**out)

    def copy(self) -> "AglrParams":
        return AglrParams(**{n: a.copy() for n, a in self.tensors().items()})

    @classmethod
    def zeros(cls, in_channels: int = DEFAULT_CHANNELS, hidden: int = DEFAULT_HIDDEN) -> "AglrParams":
        c, h = in_channels, hidden
        return cls(np.zeros((c, h, 3)), np.zeros(h), np.zeros((h, h, 3)), np.zeros(h),
                   np.zeros((c, h)), np.zeros(h), np.zeros((h, 1, 3)), np.zeros(1),
                   np.zeros((h, 1, 3)), np.zeros(1))

    @classmethod
    def init(cls, in_channels: int = DEFAULT_CHANNELS, hidden: int = DEFAULT_HIDDEN,
             seed: int = 0, gate_bias: float = GATE_BIAS_INIT) -> "AglrParams":
        """He-scaled random weights, zero biases, gate bias ``gate_bias``."""
        rng = np.random.default_rng(seed)
        c, h = in_channels, hidden
        p = cls.zeros(c, h)
        p.conv1_w = rng.normal(0.0, np.sqrt(2.0 / (3 * c)), (c, h, 3))
        p.conv2_w = rng.normal(0.0, np.sqrt(2.0 / (3 * h)), (h, h, 3))
        p.res_w = rng.normal(0.0, np.sqrt(1.0 / c), (c, h))
        p.off_w = rng.normal(0.0, np.sqrt(1.0 / (3 * h)), (h, 1, 3))
        p.gate_w = rng.normal(0.0, np.sqrt(1.0 / (3 * h)), (h, 1, 3))
        p.gate_b = np.array([gate_bias])
        return p

    def to_json(self) -> str:
        tensors = [{"name": n, "shape": list(a.shape), "values": a.ravel().tolist()}
                   for n, a in self.tensors().items()]
        return json.dumps({"format": CONTAINER_FORMAT, "tensors": tensors}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "AglrParams":
        doc = json.loads(text)
        if doc.get("format") != CONTAINER_FORMAT:
            raise LaneGeomError(f"unknown parameter container format {doc.get('format')!r}")
        arrays = {t["name"]: np.asarray(t["values"], dtype=np.float64).reshape(t["shape"])
                  for t in doc["tensors"]}
        return cls(**arrays)


@dataclass(frozen=True)
class ModulationConfig:
    gamma: float = 1.0

    def __post_init__(self):
        if not self.gamma >= 0:
            raise OutOfRangeError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class AglrOutput:
    offsets: np.ndarray      # (B, S)
    gates: np.ndarray        # (B, S)
    gated: np.ndarray        # (B, S)
    resampled: np.ndarray    # (B, N)
    cache: dict | None = None


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, S, C) -> (B*S, 3*C) with column ``k*C + c`` holding ``x[s+k-1, c]``."""
    b, s, c = x.shape
    pad = np.zeros((b, s + 2, c))
    pad[:, 1:-1] = x
    cols = np.concatenate([pad[:, k:k + s] for k in range(3)], axis=-1)
    return cols.reshape(b * s, 3 * c)


def _col2im(dcols: np.ndarray, b: int, s: int, c: int) -> np.ndarray:
    d = dcols.reshape(b, s, 3, c)
    out = np.zeros((b, s + 2, c))
    for k in range(3):
        out[:, k:k + s] += d[:, :, k]
    return out[:, 1:-1]


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(C_in, C_out, 3) -> (3*C_in, C_out)."""
    c_in, c_out, _ = w.shape
    return w.transpose(2, 0, 1).reshape(3 * c_in, c_out)


# Activations are kept channels-last, (B, S, C), so every convolution is a
# single matrix product over the flattened (B*S) rows.

def _conv(x, w, b):
    cols = _im2col(x)
    y = cols @ _kernel_matrix(w) + b
    return y.reshape(x.shape[0], x.shape[1], -1), cols


def _conv_back(dy, cols, w):
    """Gradients of a 3-tap convolution given its output gradient."""
    c_in, c_out, _ = w.shape
    bsz, s, _ = dy.shape
    dy2 = dy.reshape(bsz * s, c_out)
    dw = (cols.T @ dy2).reshape(3, c_in, c_out).transpose(1, 2, 0)
    db = dy2.sum(axis=0)
    dx = _col2im(dy2 @ _kernel_matrix(w).T, bsz, s, c_in)
    return dw, db, dx


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def aglr_forward(feature, params: AglrParams, n_points: int = DEFAULT_POINTS,
                 keep_cache: bool = True) -> AglrOutput:
    """Run the block on ``(C_in, S)`` or batched ``(B, C_in, S)`` features."""
    f = np.asarray(feature, dtype=np.float64)
    single = f.ndim == 2
    if single:
        f = f[None]
    if f.ndim != 3 or f.shape[1] != params.in_channels:
        raise ShapeMismatchError(
            f"feature shape {np.shape(feature)} does not match {params.in_channels} input channels")
    if f.shape[2] < 2:
        raise ShapeMismatchError("need at least 2 sample points")
    if not np.all(np.isfinite(f)):
        raise NonFiniteError("feature has non-finite entries")
    x = np.ascontiguousarray(f.transpose(0, 2, 1))
    z1, cols1 = _conv(x, params.conv1_w, params.conv1_b)
    a1 = np.maximum(z1, 0.0)
    z2, cols2 = _conv(a1, params.conv2_w, params.conv2_b)
    h = z2 + x @ params.res_w + params.res_b
    # both heads read the same columns, so run them as one 2-channel conv
    heads, cols_h = _conv(h, np.concatenate([params.off_w, params.gate_w], axis=1),
                          np.concatenate([params.off_b, params.gate_b]))
    r = heads[..., 0]
    g = _sigmoid(heads[..., 1])
    gated = g * r
    interp = interp_matrix(f.shape[2], n_points)
    resampled = gated @ interp.T
    cache = None
    if keep_cache:
        cache = dict(x=x, z1=z1, cols1=cols1, cols2=cols2, cols_h=cols_h, interp=interp,
                     single=single, params=params)
    out = AglrOutput(r, g, gated, resampled, cache)
    if single:
        out.offsets, out.gates, out.gated, out.resampled = r[0], g[0], gated[0], resampled[0]
    return out


def aglr_backward(output: AglrOutput, grad_resampled):
    """Reverse-mode gradients ``(AglrParams, d_feature)`` of the forward pass
    given the upstream gradient on the resampled offsets."""
    cache = output.cache
    if not cache:
        raise MissingCacheError("forward pass was run without keep_cache")
    p: AglrParams = cache["params"]
    dres = np.asarray(grad_resampled, dtype=np.float64)
    if cache["single"]:
        dres = dres[None]
    g = output.gates if not cache["single"] else output.gates[None]
    r = output.offsets if not cache["single"] else output.offsets[None]
    if dres.shape != (g.shape[0], cache["interp"].shape[0]):
        raise ShapeMismatchError(f"upstream gradient shape {np.shape(grad_resampled)} mismatch")

    d_gated = dres @ cache["interp"]
    d_heads = np.stack([d_gated * g, d_gated * r * g * (1.0 - g)], axis=-1)
    d_head_w, d_head_b, dh = _conv_back(d_heads, cache["cols_h"],
                                        np.concatenate([p.off_w, p.gate_w], axis=1))

    x = cache["x"]
    bsz, s, c_in = x.shape
    dh2 = dh.reshape(bsz * s, -1)
    d_res_w = x.reshape(bsz * s, c_in).T @ dh2
    d_res_b = dh2.sum(axis=0)
    df = dh @ p.res_w.T
    d_conv2_w, d_conv2_b, da1 = _conv_back(dh, cache["cols2"], p.conv2_w)
    dz1 = da1 * (cache["z1"] > 0)
    d_conv1_w, d_conv1_b, df1 = _conv_back(dz1, cache["cols1"], p.conv1_w)
    df = (df + df1).transpose(0, 2, 1)
    grads = AglrParams(d_conv1_w, d_conv1_b, d_conv2_w, d_conv2_b, d_res_w, d_res_b,
                       d_head_w[:, :1], d_head_b[:1], d_head_w[:, 1:], d_head_b[1:])
    return grads, (df[0] if cache["single"] else df)


def modulate(offsets, q_hat, cfg: ModulationConfig) -> np.ndarray:
    """Scale offsets by ``(1 - q_hat) ** gamma``."""
    if not 0.0 <= q_hat <= 1.0:
        raise OutOfRangeError(f"q_hat must lie in [0, 1], got {q_hat}")
    return (1.0 - q_hat) ** cfg.gamma * np.asarray(offsets, dtype=np.float64)


def linear_head(feature, weights, bias: float = 0.0, activation: str = "sigmoid"):
    """Affine map of a ``(D,)`` or ``(B, D)`` feature followed by an activation."""
    z = np.asarray(feature, dtype=np.float64) @ np.asarray(weights, dtype=np.float64) + bias
    if activation == "sigmoid":
        out = _sigmoid(np.atleast_1d(z))
        return float(out[0]) if np.ndim(z) == 0 else out
    if activation == "identity":
        return float(z) if np.ndim(z) == 0 else z
    raise OutOfRangeError(f"unknown activation {activation!r}")

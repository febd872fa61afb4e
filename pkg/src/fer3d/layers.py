"""Composite network blocks.

The building blocks of the video classifier: plain conv units, the
multi-branch residual block whose shortcut is a Hadamard product with a
landmark weight mask, strided reduction blocks, an LSTM cell/sequence,
inverted dropout, and a fully-connected head. All forward paths are built
from the autodiff ops in :mod:`fer3d.tensor`, so gradients come for free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


# ---------------------------------------------------------------------------
# parameter initializers
# ---------------------------------------------------------------------------

def truncated_normal(rng: np.random.Generator, shape, std: float,
                     dtype=np.float32) -> np.ndarray:
    """Normal draw rejected outside two sigmas, scaled by ``std``."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def init_conv_kernel(rng, kernel_shape, dtype=np.float32) -> np.ndarray:
    kt, kh, kw, cin, _ = kernel_shape
    fan_in = kt * kh * kw * cin
    return truncated_normal(rng, kernel_shape, std=np.sqrt(2.0 / fan_in), dtype=dtype)


def init_fc_weight(rng, shape, dtype=np.float32) -> np.ndarray:
    fan_in = shape[0]
    return truncated_normal(rng, shape, std=np.sqrt(2.0 / fan_in), dtype=dtype)


# ---------------------------------------------------------------------------
# conv unit
# ---------------------------------------------------------------------------

@dataclass
class ConvUnit:
    """One convolution with bias and an optional ReLU."""

    kernel: Tensor                 # [kT, kH, kW, Cin, Cout]
    bias: Tensor                   # [Cout]
    stride: tuple = (1, 1, 1)
    padding: str = "same"
    activation: str = "relu"       # 'relu' | 'linear'

    def __call__(self, x: Tensor) -> Tensor:
        out = T.add(T.conv3d(x, self.kernel, stride=self.stride,
                             padding=self.padding), self.bias)
        return T.relu(out) if self.activation == "relu" else out

    def out_shape(self, in_shape: tuple) -> tuple:
        return T.conv3d_output_shape(in_shape, self.kernel.shape,
                                     self.stride, self.padding)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.bias", self.bias


def run_branch(x: Tensor, branch: Sequence[ConvUnit]) -> Tensor:
    for unit in branch:
        x = unit(x)
    return x


def branch_out_shape(in_shape: tuple, branch: Sequence[ConvUnit]) -> tuple:
    for unit in branch:
        in_shape = unit.out_shape(in_shape)
    return in_shape


# ---------------------------------------------------------------------------
# masked residual block
# ---------------------------------------------------------------------------

@dataclass
class LandmarkResidualBlockParams:
    """Multi-branch residual function plus the linear projection back to Cin.

    The projection restores the input channel count so the sum with the
    (masked) shortcut is shape-valid.
    """

    branches: list                  # list[list[ConvUnit]]
    project: ConvUnit               # 1x1x1, activation 'linear'
    activation: str = "relu"        # applied to shortcut + residual
    residual_scale: float = 1.0

    def named_tensors(self, prefix: str):
        for b, branch in enumerate(self.branches):
            for c, unit in enumerate(branch):
                yield from unit.named_tensors(f"{prefix}.branch{b}.conv{c}")
        yield from self.project.named_tensors(f"{prefix}.project")


def landmark_residual_block(x: Tensor, mask, params: LandmarkResidualBlockParams) -> Tensor:
    """out = f(mask (*) x + F(x)); ``mask=None`` is the plain shortcut.

    The mask must match x's leading extents and carries a singleton channel
    axis that broadcasts across x's channels.
    """
    if mask is not None:
        mask_data = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if mask_data.shape[:-1] != x.shape[:-1] or mask_data.shape[-1] != 1:
            raise DimensionError(
                f"mask shape {mask_data.shape} does not match input {x.shape}")
        shortcut = T.multiply(x, mask if isinstance(mask, Tensor)
                              else Tensor(mask_data, dtype=x.dtype))
    else:
        shortcut = x
    residual = params.project(T.concat(
        [run_branch(x, b) for b in params.branches], axis=-1))
    if params.residual_scale != 1.0:
        residual = T.multiply(residual, params.residual_scale)
    y = T.add(shortcut, residual)
    if params.activation == "relu":
        return T.relu(y)
    if params.activation == "identity":
        return y
    raise ContractError(f"unknown block activation {params.activation!r}")


# ---------------------------------------------------------------------------
# reduction block
# ---------------------------------------------------------------------------

@dataclass
class ReductionBlockParams:
    """Parallel strided conv branches plus a strided max-pool, concatenated."""

    conv_branches: list                       # list[list[ConvUnit]]
    pool_window: tuple = (1, 3, 3)
    pool_stride: tuple = (1, 2, 2)

    def named_tensors(self, prefix: str):
        for b, branch in enumerate(self.conv_branches):
            for c, unit in enumerate(branch):
                yield from unit.named_tensors(f"{prefix}.branch{b}.conv{c}")


def reduction_block(x: Tensor, params: ReductionBlockParams) -> Tensor:
    pooled = T.pool3d(x, params.pool_window, stride=params.pool_stride,
                      mode="max", padding="valid")
    outs = [pooled] + [run_branch(x, b) for b in params.conv_branches]
    return T.concat(outs, axis=-1)


def reduction_out_shape(in_shape: tuple, params: ReductionBlockParams) -> tuple:
    t, h, w, c = in_shape
    kt, kh, kw = params.pool_window
    st, sh, sw = params.pool_stride
    pooled = ((t - kt) // st + 1, (h - kh) // sh + 1, (w - kw) // sw + 1, c)
    channels = pooled[3]
    for branch in params.conv_branches:
        bshape = branch_out_shape(in_shape, branch)
        if bshape[:3] != pooled[:3]:
            raise DimensionError(
                f"reduction branch grid {bshape[:3]} != pool grid {pooled[:3]}")
        channels += bshape[3]
    return (*pooled[:3], channels)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LSTMParams:
    """Gate matrices [hidden, hidden + input] and bias vectors [hidden]."""

    w_f: Tensor
    w_i: Tensor
    w_o: Tensor
    w_c: Tensor
    b_f: Tensor
    b_i: Tensor
    b_o: Tensor
    b_c: Tensor
    hidden_size: int

    def __post_init__(self):
        shapes = {t.shape for t in (self.w_f, self.w_i, self.w_o, self.w_c)}
        if len(shapes) != 1:
            raise ContractError(f"gate matrices must share a shape, got {shapes}")

    @property
    def input_size(self) -> int:
        return self.w_f.shape[1] - self.hidden_size

    def named_tensors(self, prefix: str):
        for name in ("w_f", "w_i", "w_o", "w_c", "b_f", "b_i", "b_o", "b_c"):
            yield f"{prefix}.{name}", getattr(self, name)


def init_lstm_params(rng, input_size: int, hidden_size: int,
                     dtype=np.float32) -> LSTMParams:
    """Uniform matrices in +-sqrt(1/hidden); forget bias 1, others 0."""
    bound = np.sqrt(1.0 / hidden_size)

    def mat():
        return Tensor(rng.uniform(-bound, bound,
                                  (hidden_size, hidden_size + input_size)
                                  ).astype(dtype), requires_grad=True)

    def vec(fill):
        return Tensor(np.full(hidden_size, fill, dtype=dtype), requires_grad=True)

    return LSTMParams(w_f=mat(), w_i=mat(), w_o=mat(), w_c=mat(),
                      b_f=vec(1.0), b_i=vec(0.0), b_o=vec(0.0), b_c=vec(0.0),
                      hidden_size=hidden_size)


def lstm_cell_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
                   params: LSTMParams) -> tuple[Tensor, Tensor]:
    """One recurrence step over the concatenation [h_{t-1}, x_t].

    Gates f, i, o are sigmoids of affine maps; the candidate g is a tanh;
    c_t = f * c_prev + i * g and h_t = o * tanh(c_t).
    """
    if x_t.data.ndim != 2 or h_prev.data.ndim != 2 or c_prev.data.ndim != 2:
        raise DimensionError("lstm_cell_step expects 2-D [batch, features] inputs")
    if h_prev.shape[1] != params.hidden_size or c_prev.shape[1] != params.hidden_size:
        raise DimensionError(
            f"state width {h_prev.shape[1]} != hidden size {params.hidden_size}")
    hx = T.concat([h_prev, x_t], axis=1)
    if hx.shape[1] != params.w_f.shape[1]:
        raise DimensionError(
            f"[h, x] width {hx.shape[1]} != gate matrix width {params.w_f.shape[1]}")

    def gate(w, b, fn):
        return fn(T.add(T.matmul(hx, T.transpose(w)), b))

    f = gate(params.w_f, params.b_f, T.sigmoid)
    i = gate(params.w_i, params.b_i, T.sigmoid)
    o = gate(params.w_o, params.b_o, T.sigmoid)
    g = gate(params.w_c, params.b_c, T.tanh)
    c_t = T.add(T.multiply(f, c_prev), T.multiply(i, g))
    h_t = T.multiply(o, T.tanh(c_t))
    return h_t, c_t


def lstm_sequence(x: Tensor, params: LSTMParams,
                  h0: Tensor | None = None, c0: Tensor | None = None) -> Tensor:
    """Fold the cell over a [batch, T, d] sequence; returns the final h_T."""
    if x.data.ndim != 3:
        raise DimensionError(f"lstm_sequence expects [batch, T, d], got {x.shape}")
    batch, steps, _ = x.shape
    if steps < 1:
        raise ContractError("lstm_sequence needs at least one timestep")
    zeros = np.zeros((batch, params.hidden_size), dtype=x.dtype)
    h = h0 if h0 is not None else Tensor(zeros.copy())
    c = c0 if c0 is not None else Tensor(zeros.copy())
    for t in range(steps):
        h, c = lstm_cell_step(T.time_slice(x, t), h, c, params)
    return h


# ---------------------------------------------------------------------------
# dropout / fully connected
# ---------------------------------------------------------------------------

def dropout(x: Tensor, rate: float, mode: str = "train",
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors scale by 1/(1-rate); eval mode is identity."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    return T.multiply(x, keep / np.asarray(1.0 - rate, dtype=x.dtype))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [batch, d] @ [d, K] + [K]."""
    return T.add(T.matmul(x, weight), bias)

"""Recurrent transitions: the LSTM hidden-state update and the gated
convolutional canvas update.

The LSTM is the classic 4-gate, peephole-free form; gates are packed
(input, forget, candidate, output) along the last axis of the projection.
The canvas update is a convolutional GRU with 3x3 size-preserving kernels:

    out = u * c + (1 - u) * tanh(conv(r * c, U) + B)
    u = sigmoid(conv(c, U') + B')      r = sigmoid(conv(c, U'') + B'')
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, concat, conv2d_same, sigmoid, tanh


@dataclass
class LstmParams:
    w_x: Tensor   # [input_dim, 4*D]
    w_h: Tensor   # [D, 4*D]
    bias: Tensor  # [4*D]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]


@dataclass
class LstmState:
    h: Tensor     # [B, D]
    cell: Tensor  # [B, D]


def lstm_zero_state(batch: int, hidden: int, dtype=np.float64) -> LstmState:
    z = np.zeros((batch, hidden), dtype=dtype)
    return LstmState(Tensor(z), Tensor(z.copy()))


def lstm_step(params: LstmParams, state: LstmState, x: Tensor) -> LstmState:
    """One LSTM transition; returns the new state, the old one is untouched."""
    d = params.hidden_size
    if state.h.shape != state.cell.shape:
        raise ShapeError(f"state extents differ: h {state.h.shape} vs cell {state.cell.shape}")
    if state.h.shape[-1] != d:
        raise ShapeError(f"state width {state.h.shape} != hidden size {d}")
    if x.shape[-1] != params.w_x.shape[0]:
        raise ShapeError(f"input width {x.shape} != w_x rows {params.w_x.shape}")
    pre = x @ params.w_x + state.h @ params.w_h + params.bias
    i = sigmoid(pre[:, 0 * d:1 * d])
    f = sigmoid(pre[:, 1 * d:2 * d])
    g = tanh(pre[:, 2 * d:3 * d])
    o = sigmoid(pre[:, 3 * d:4 * d])
    cell = f * state.cell + i * g
    return LstmState(h=o * tanh(cell), cell=cell)


@dataclass
class CgruWeights:
    u_cand: Tensor    # U   [C,C,3,3] candidate kernel
    u_update: Tensor  # U'  [C,C,3,3] update gate kernel
    u_reset: Tensor   # U'' [C,C,3,3] reset gate kernel
    b_cand: Tensor    # B   [C]
    b_update: Tensor  # B'  [C]
    b_reset: Tensor   # B'' [C]

    def __post_init__(self):
        for name in ("u_cand", "u_update", "u_reset"):
            k = getattr(self, name).shape
            if len(k) != 4 or k[2:] != (3, 3):
                raise ShapeError(f"{name} must be [C,C,3,3], got {k}")

    @property
    def channels(self) -> int:
        return self.u_cand.shape[0]


def cgru_step(c: Tensor, w: CgruWeights) -> Tensor:
    """Gated recurrent canvas update; preserves the canvas shape."""
    channels = c.shape[-3]
    if channels != w.channels:
        raise ShapeError(f"canvas channels {channels} != weight channels {w.channels}")
    u = sigmoid(conv2d_same(c, w.u_update, w.b_update))
    r = sigmoid(conv2d_same(c, w.u_reset, w.b_reset))
    cand = tanh(conv2d_same(r * c, w.u_cand, w.b_cand))
    return u * c + (1.0 - u) * cand


__all__ = ["LstmParams", "LstmState", "lstm_zero_state", "lstm_step",
           "CgruWeights", "cgru_step", "concat"]

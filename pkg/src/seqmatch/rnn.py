"""LSTM cell and masked bidirectional runner built on the tensor engine.

Gate layout in the stacked 4h dimension is [input, forget, candidate,
output]. The forget-gate bias initializes to 1.0; all other biases to
zero; weights use uniform Glorot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


def glorot(rng, fan_out, fan_in, dtype=None):
    """Uniform Glorot sample of shape (fan_out, fan_in)."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return Tensor(data, requires_grad=True, dtype=dtype)


@dataclass
class LstmCellParams:
    """Learnable weights of one LSTM direction.

    w_ih: (4h, d) input-to-hidden; w_hh: (4h, h) hidden-to-hidden;
    bias: (4h,).
    """

    w_ih: Tensor
    w_hh: Tensor
    bias: Tensor

    @property
    def hidden_size(self):
        return self.w_hh.shape[1]

    @property
    def input_size(self):
        return self.w_ih.shape[1]

    def check(self):
        h = self.hidden_size
        if self.w_ih.shape[0] != 4 * h or self.w_hh.shape != (4 * h, h) or self.bias.shape != (4 * h,):
            raise DimensionError(
                f"inconsistent LSTM params: w_ih {self.w_ih.shape}, "
                f"w_hh {self.w_hh.shape}, bias {self.bias.shape}"
            )


def init_lstm_params(rng, input_size, hidden_size, dtype=None):
    bias = np.zeros(4 * hidden_size)
    bias[hidden_size : 2 * hidden_size] = 1.0  # forget gate open at start
    return LstmCellParams(
        w_ih=glorot(rng, 4 * hidden_size, input_size, dtype),
        w_hh=glorot(rng, 4 * hidden_size, hidden_size, dtype),
        bias=Tensor(bias, requires_grad=True, dtype=dtype),
    )


def lstm_cell(params, x, h_prev, c_prev):
    """One LSTM step. x: (d,) or (B, d); states match x's leading shape."""
    params.check()
    h = params.hidden_size
    if x.shape[-1] != params.input_size:
        raise DimensionError(
            f"lstm_cell: input width {x.shape} vs params expecting {params.input_size}"
        )
    single = x.ndim == 1
    if single:
        x = T.reshape(x, (1, x.shape[0]))
        h_prev = T.reshape(h_prev, (1, h))
        c_prev = T.reshape(c_prev, (1, h))
    pre = T.matmul(x, T.swapaxes(params.w_ih, 0, 1))
    pre = T.add(pre, params.bias)
    h_new, c_new = _step_from_pre(params, pre, h_prev, c_prev)
    if single:
        h_new = T.reshape(h_new, (h,))
        c_new = T.reshape(c_new, (h,))
    return h_new, c_new


def _step_from_pre(params, pre, h_prev, c_prev):
    """Finish a step given x @ w_ih.T + bias already computed."""
    h = params.hidden_size
    gates = T.add(pre, T.matmul(h_prev, T.swapaxes(params.w_hh, 0, 1)))
    i = T.sigmoid(T.narrow(gates, -1, 0, h))
    f = T.sigmoid(T.narrow(gates, -1, h, h))
    g = T.tanh(T.narrow(gates, -1, 2 * h, h))
    o = T.sigmoid(T.narrow(gates, -1, 3 * h, h))
    c_new = T.add(T.mul(f, c_prev), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


def _run_direction(params, x, mask, reverse):
    """Masked unidirectional pass over x: (B, T, d) -> (B, T, h).

    Updates are gated by the mask so padded steps carry the previous
    state; a reversed pass therefore effectively starts at the last
    unmasked position of each row.
    """
    batch, steps, _ = x.shape
    h = params.hidden_size
    # One big input projection for the whole sequence.
    pre_all = T.add(T.matmul(x, T.swapaxes(params.w_ih, 0, 1)), params.bias)
    h_t = Tensor(np.zeros((batch, h)), dtype=x.dtype)
    c_t = Tensor(np.zeros((batch, h)), dtype=x.dtype)
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    outputs = [None] * steps
    for t in order:
        m = mask[:, t : t + 1].astype(x.dtype.type, copy=False)
        h_new, c_new = _step_from_pre(params, T.select(pre_all, 1, t), h_t, c_t)
        if m.min() == 1.0:
            h_t, c_t = h_new, c_new
        else:
            keep = 1.0 - m
            h_t = T.add(T.mul(h_new, m), T.mul(h_t, keep))
            c_t = T.add(T.mul(c_new, m), T.mul(c_t, keep))
        outputs[t] = h_t
    return T.stack(outputs, axis=1)


def bilstm(params_fwd, params_bwd, x, mask):
    """Bidirectional pass: (T, d) or (B, T, d) -> (..., T, 2h).

    mask marks real positions with 1; outputs at unmasked positions of a
    padded run match the unpadded run, and the backward direction starts
    at each row's last unmasked position.
    """
    params_fwd.check()
    params_bwd.check()
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if m.ndim == 1:
        m = m[None, :]
    if m.shape != x.shape[:2]:
        raise DimensionError(f"bilstm: mask {m.shape} vs input {x.shape}")
    fwd = _run_direction(params_fwd, x, m, reverse=False)
    bwd = _run_direction(params_bwd, x, m, reverse=True)
    out = T.concat([fwd, bwd], axis=-1)
    if single:
        out = T.reshape(out, out.shape[1:])
    return out

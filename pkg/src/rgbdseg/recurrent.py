"""Bidirectional LSTM scan layers over feature grids.

A vertical layer runs an independent forward and backward LSTM down and up
every column (the horizontal layer does the same along rows), starting from
zero states at both ends. The cell follows the gate equations

    gate_i = sigmoid(W_xi x + W_hi h_prev + b_i)      (f, o analogous)
    gate_c = tanh   (W_xc x + W_hc h_prev + b_c)
    c      = gate_f * c_prev + gate_i * gate_c
    h      = tanh(gate_o * c)

with the output line as written above by default; ``conventional_output_gate``
switches to the common ``h = gate_o * tanh(c)`` form. Outputs concatenate the
forward then backward hidden states, so a hidden size d yields 2d channels
regardless of the input width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_LO, INIT_HI = -0.01, 0.01


@dataclass
class LstmCellParams:
    """Four input projections (d x c), four state projections (d x d), four biases."""

    w_xi: Tensor
    w_xf: Tensor
    w_xo: Tensor
    w_xc: Tensor
    w_hi: Tensor
    w_hf: Tensor
    w_ho: Tensor
    w_hc: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    @classmethod
    def init_uniform(cls, input_size, hidden_size, seed, lo=INIT_LO, hi=INIT_HI):
        seeds = iter(np.random.SeedSequence(seed).generate_state(12))

        def w(rows, cols):
            return ad.uniform([rows, cols], lo, hi, int(next(seeds)), requires_grad=True)

        def b():
            return ad.uniform([hidden_size], lo, hi, int(next(seeds)), requires_grad=True)

        c, d = input_size, hidden_size
        return cls(w(d, c), w(d, c), w(d, c), w(d, c),
                   w(d, d), w(d, d), w(d, d), w(d, d),
                   b(), b(), b(), b())

    @classmethod
    def init_fanin(cls, input_size, hidden_size, seed):
        """Uniform bounds scaled by 1/sqrt(fan-in), forget bias near 1.

        Keeps cell states at O(1) from the first step, so stacked scan layers
        neither die out nor need thousands of warm-up updates; this is what
        makes the layers trainable without any pretrained feature extractor.
        """
        seeds = iter(np.random.SeedSequence(seed).generate_state(12))
        xb = 1.0 / np.sqrt(input_size)
        hb = 1.0 / np.sqrt(hidden_size)

        def w(rows, cols, bound):
            return ad.uniform([rows, cols], -bound, bound, int(next(seeds)),
                              requires_grad=True)

        def b(offset=0.0):
            t = ad.uniform([hidden_size], -hb, hb, int(next(seeds)),
                           requires_grad=True)
            if offset:
                t.data += offset
            return t

        c, d = input_size, hidden_size
        return cls(w(d, c, xb), w(d, c, xb), w(d, c, xb), w(d, c, xb),
                   w(d, d, hb), w(d, d, hb), w(d, d, hb), w(d, d, hb),
                   b(), b(1.0), b(), b())

    @property
    def input_size(self):
        return self.w_xi.shape[1]

    @property
    def hidden_size(self):
        return self.w_xi.shape[0]

    def params(self):
        return {
            "w_xi": self.w_xi, "w_xf": self.w_xf, "w_xo": self.w_xo, "w_xc": self.w_xc,
            "w_hi": self.w_hi, "w_hf": self.w_hf, "w_ho": self.w_ho, "w_hc": self.w_hc,
            "b_i": self.b_i, "b_f": self.b_f, "b_o": self.b_o, "b_c": self.b_c,
        }

    def validate(self):
        c, d = self.input_size, self.hidden_size
        for name, t in self.params().items():
            want = (d, c) if name.startswith("w_x") else (d, d) if name.startswith("w_h") else (d,)
            if t.shape != want:
                raise ValueError(f"lstm param {name} has shape {t.shape}, expected {want}")


def _packed(p):
    # one (c,4d) input matrix, one (d,4d) state matrix and a (4d,) bias per
    # direction, built on the tape so grads land on the eight originals
    wx = ad.permute(ad.concat([p.w_xi, p.w_xf, p.w_xo, p.w_xc], axis=0), (1, 0))
    wh = ad.permute(ad.concat([p.w_hi, p.w_hf, p.w_ho, p.w_hc], axis=0), (1, 0))
    b = ad.concat([p.b_i, p.b_f, p.b_o, p.b_c], axis=0)
    return wx, wh, b


def _step(wx, wh, b, d, x, h_prev, c_prev, conventional):
    z = ad.add_bias(ad.add(ad.matmul(x, wx), ad.matmul(h_prev, wh)), b)
    gate_i = ad.sigmoid(ad.slice_axis(z, 1, 0, d))
    gate_f = ad.sigmoid(ad.slice_axis(z, 1, d, 2 * d))
    gate_o = ad.sigmoid(ad.slice_axis(z, 1, 2 * d, 3 * d))
    gate_c = ad.tanh(ad.slice_axis(z, 1, 3 * d, 4 * d))
    c = ad.add(ad.mul(gate_f, c_prev), ad.mul(gate_i, gate_c))
    if conventional:
        h = ad.mul(gate_o, ad.tanh(c))
    else:
        h = ad.tanh(ad.mul(gate_o, c))
    return h, c


def lstm_step(params, x, h_prev, c_prev, conventional_output_gate=False):
    """One cell update on vectors: x (c,), h_prev and c_prev (d,) -> (h, c)."""
    d, c = params.hidden_size, params.input_size
    if x.shape != (c,) or h_prev.shape != (d,) or c_prev.shape != (d,):
        raise ValueError(
            f"lstm_step: got x {x.shape}, h {h_prev.shape}, c {c_prev.shape}; "
            f"expected ({c},), ({d},), ({d},)")
    wx, wh, b = _packed(params)
    h2, c2 = _step(wx, wh, b, d,
                   ad.reshape(x, (1, c)), ad.reshape(h_prev, (1, d)),
                   ad.reshape(c_prev, (1, d)), conventional_output_gate)
    return ad.reshape(h2, (d,)), ad.reshape(c2, (d,))


@dataclass
class BiScanLayer:
    """A forward/backward LSTM pair swept vertically (columns) or horizontally (rows)."""

    direction: str  # "vertical" | "horizontal"
    forward_params: LstmCellParams
    backward_params: LstmCellParams
    conventional_output_gate: bool = False

    @classmethod
    def init_uniform(cls, direction, input_size, hidden_size, seed,
                     conventional_output_gate=False, init="paper"):
        if direction not in ("vertical", "horizontal"):
            raise ValueError(f"unknown scan direction {direction!r}")
        if init not in ("paper", "fanin"):
            raise ValueError(f"unknown lstm init {init!r}")
        make = (LstmCellParams.init_uniform if init == "paper"
                else LstmCellParams.init_fanin)
        s1, s2 = np.random.SeedSequence(seed).generate_state(2)
        return cls(direction,
                   make(input_size, hidden_size, int(s1)),
                   make(input_size, hidden_size, int(s2)),
                   conventional_output_gate)

    @property
    def hidden_size(self):
        return self.forward_params.hidden_size

    @property
    def input_size(self):
        return self.forward_params.input_size

    def params(self):
        out = {}
        for tag, cell in (("fwd", self.forward_params), ("bwd", self.backward_params)):
            for name, t in cell.params().items():
                out[f"{tag}.{name}"] = t
        return out

    def validate(self):
        self.forward_params.validate()
        self.backward_params.validate()
        if self.backward_params.input_size != self.input_size or \
                self.backward_params.hidden_size != self.hidden_size:
            raise ValueError("forward/backward cells must share dimensions")


def _row(f, j, w, c):
    return ad.reshape(ad.slice_axis(f, 0, j, j + 1), (w, c))


def _stack_rows(rows, w, d):
    return ad.concat([ad.reshape(r, (1, w, d)) for r in rows], axis=0)


def _scan_columns(layer, f):
    h_len, w_len, c = f.shape
    d = layer.hidden_size
    conv = layer.conventional_output_gate

    halves = []
    for cell, order in ((layer.forward_params, range(h_len)),
                        (layer.backward_params, range(h_len - 1, -1, -1))):
        wx, wh, b = _packed(cell)
        state_h = ad.zeros([w_len, d])
        state_c = ad.zeros([w_len, d])
        out_rows = [None] * h_len
        for j in order:
            state_h, state_c = _step(wx, wh, b, d, _row(f, j, w_len, c),
                                     state_h, state_c, conv)
            out_rows[j] = state_h
        halves.append(_stack_rows(out_rows, w_len, d))
    return ad.concat(halves, axis=2)


def scan_bidirectional(layer, f):
    """Sweep a (h, w, c) map into (h, w, 2d) bidirectional contexts."""
    if f.ndim != 3:
        raise ValueError(f"scan expects (h, w, c), got {f.shape}")
    if f.shape[2] != layer.input_size:
        raise ValueError(f"scan: map has {f.shape[2]} channels, layer expects {layer.input_size}")
    if layer.direction == "vertical":
        return _scan_columns(layer, f)
    flipped = _scan_columns(layer, ad.permute(f, (1, 0, 2)))
    return ad.permute(flipped, (1, 0, 2))


def fuse_contexts(fusion, ctx_a, ctx_b):
    """Concatenate two (h, w, 2d) context maps and sweep the 4d result horizontally."""
    if ctx_a.shape != ctx_b.shape:
        raise ValueError(f"fuse_contexts: shape mismatch {ctx_a.shape} vs {ctx_b.shape}")
    if fusion.direction != "horizontal":
        raise ValueError("fusion layer must scan horizontally")
    return scan_bidirectional(fusion, ad.concat([ctx_a, ctx_b], axis=2))

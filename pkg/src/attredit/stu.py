"""Selective transfer cells: gated, attribute-conditioned skip connections.

Each cell upsamples the inner hidden state together with the stretched
attribute-difference map, then runs a GRU-style gate pair to decide how
much of the raw encoder feature survives versus the transformed one.  The
transformed feature goes to the decoder; the reset-gated state ``s`` is
what flows outward to the next cell.

The ablation variants swap the cell body while keeping the interface:

* ``standard``   - the full gated cell
* ``gru_output`` - same math, but the transformed feature doubles as the
                   outgoing hidden state (plain GRU convention)
* ``conv``       - a single convolution over [feature, upsampled state]
* ``conv_res``   - ``conv`` plus the raw encoder feature
* ``res``        - the standard cell plus the raw encoder feature
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import Conv2d, ConvTranspose2d
from .tensor import Tensor

VARIANTS = ("standard", "gru_output", "conv", "conv_res", "res")


def stretch_diff(att_diff, spatial: Tuple[int, int], dtype=np.float32) -> Tensor:
    """Stretch per-sample attribute values (batch, c) into constant
    spatial planes (batch, c, h, w)."""
    if isinstance(att_diff, Tensor):
        t = att_diff
    else:
        arr = np.asarray(att_diff, dtype=dtype)
        if arr.ndim == 1:
            arr = arr[None, :]
        t = T.constant(arr, dtype=dtype)
    if t.ndim != 2:
        raise DimensionError("attribute vectors must be (batch, c)")
    b, c = t.shape
    h, w = spatial
    return T.broadcast_to(T.reshape(t, (b, c, 1, 1)), (b, c, h, w))


class STUCell:
    """One selective transfer cell for a single resolution level.

    ``enc_ch`` is the channel count of the encoder feature at this level,
    ``state_ch`` that of the incoming hidden state (one level deeper).
    Cells at different levels never share parameters.
    """

    def __init__(self, name: str, layer_index: int, enc_ch: int, state_ch: int,
                 attr_count: int, rng: np.random.Generator,
                 dtype=np.float32, variant: str = "standard"):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown cell variant {variant!r}; expected one of {VARIANTS}")
        self.layer_index = layer_index
        self.enc_ch = enc_ch
        self.state_ch = state_ch
        self.attr_count = attr_count
        self.variant = variant
        self.dtype = dtype

        # kernel 4 / stride 2 matches the decoder's upsampling path;
        # gates keep spatial size with kernel 3 / pad 1
        self.state_upsample = ConvTranspose2d(
            f"{name}/state_upsample", state_ch + attr_count, enc_ch,
            kernel=4, stride=2, padding=1, rng=rng, dtype=dtype)
        if variant in ("conv", "conv_res"):
            self.mixer = Conv2d(f"{name}/mixer", 2 * enc_ch, enc_ch,
                                kernel=3, stride=1, padding=1, rng=rng, dtype=dtype)
            self.reset_gate = self.update_gate = self.candidate = None
        else:
            self.mixer = None
            self.reset_gate = Conv2d(f"{name}/reset_gate", 2 * enc_ch, enc_ch,
                                     kernel=3, stride=1, padding=1, rng=rng, dtype=dtype)
            self.update_gate = Conv2d(f"{name}/update_gate", 2 * enc_ch, enc_ch,
                                      kernel=3, stride=1, padding=1, rng=rng, dtype=dtype)
            self.candidate = Conv2d(f"{name}/candidate", 2 * enc_ch, enc_ch,
                                    kernel=3, stride=1, padding=1, rng=rng, dtype=dtype)

    def params(self) -> List:
        out = list(self.state_upsample.params())
        for layer in (self.mixer, self.reset_gate, self.update_gate, self.candidate):
            if layer is not None:
                out.extend(layer.params())
        return out

    def forward(self, f_enc: Tensor, s_prev: Tensor, att_diff,
                z_value: Optional[float] = None) -> Tuple[Tensor, Tensor]:
        """Returns (transformed feature, outgoing hidden state).

        ``z_value`` is a test hook that pins the update gate to a constant.
        """
        if f_enc.ndim != 4 or s_prev.ndim != 4:
            raise DimensionError("cell inputs must be 4-d feature maps")
        if f_enc.shape[1] != self.enc_ch:
            raise DimensionError(
                f"encoder feature has {f_enc.shape[1]} channels, cell expects {self.enc_ch}")
        if s_prev.shape[1] != self.state_ch:
            raise DimensionError(
                f"hidden state has {s_prev.shape[1]} channels, cell expects {self.state_ch}")
        if (s_prev.shape[2] * 2, s_prev.shape[3] * 2) != (f_enc.shape[2], f_enc.shape[3]):
            raise DimensionError(
                f"hidden state {s_prev.shape[2:]} must be half of feature {f_enc.shape[2:]}")

        att_map = stretch_diff(att_diff, (s_prev.shape[2], s_prev.shape[3]),
                               dtype=self.dtype)
        if att_map.shape[1] != self.attr_count:
            raise DimensionError(
                f"attribute vector length {att_map.shape[1]} != {self.attr_count}")

        s_hat = self.state_upsample(T.concat_channels(s_prev, att_map),
                                    out_hw=(f_enc.shape[2], f_enc.shape[3]))

        if self.variant in ("conv", "conv_res"):
            f_t = self.mixer(T.concat_channels(f_enc, s_hat))
            if self.variant == "conv_res":
                f_t = T.add(f_t, f_enc)
            return f_t, s_hat

        paired = T.concat_channels(f_enc, s_hat)
        r = T.sigmoid(self.reset_gate(paired))
        if z_value is None:
            z = T.sigmoid(self.update_gate(paired))
        else:
            z = T.constant(np.full(s_hat.shape, z_value, dtype=self.dtype))
        s = T.mul(r, s_hat)
        f_hat = T.tanh(self.candidate(T.concat_channels(f_enc, s)))
        one = T.constant(np.asarray(1.0, dtype=self.dtype))
        f_t = T.add(T.mul(T.sub(one, z), s_hat), T.mul(z, f_hat))

        if self.variant == "res":
            return T.add(f_t, f_enc), s
        if self.variant == "gru_output":
            return f_t, f_t
        return f_t, s


def stu_forward(cell: STUCell, f_enc: Tensor, s_prev: Tensor, att_diff,
                z_value: Optional[float] = None) -> Tuple[Tensor, Tensor]:
    if cell.variant != "standard":
        raise ContractError("stu_forward is the standard cell; use variant_forward")
    return cell.forward(f_enc, s_prev, att_diff, z_value=z_value)


def variant_forward(cell: STUCell, f_enc: Tensor, s_prev: Tensor, att_diff,
                    z_value: Optional[float] = None) -> Tuple[Tensor, Tensor]:
    return cell.forward(f_enc, s_prev, att_diff, z_value=z_value)

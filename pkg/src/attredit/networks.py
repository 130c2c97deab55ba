"""Encoder-decoder generator with selective transfer skips, and the
two-headed critic/classifier discriminator.

The generator downsamples through five stride-2 convolutions, threads the
four outer feature maps through transfer cells (or raw skips, or nothing,
depending on the ablation mode), and decodes with five stride-2 transposed
convolutions.  The innermost decoder input is always conditioned on the
stretched attribute vector so that even the no-skip ablation can edit.

The discriminator shares one convolutional trunk between an unbounded
critic head and a per-attribute classifier head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import Conv2d, ConvTranspose2d, InstanceNorm2d, Linear, build_registry
from .stu import VARIANTS, STUCell, stretch_diff
from .tensor import Tensor

SKIP_MODES = ("stu", "none", "raw1", "raw2", "raw_all")
CONDITIONINGS = ("diff", "target")

_BASE_WIDTHS = (64, 128, 256, 512, 1024)
_NUM_LEVELS = 5


@dataclass
class GeneratorConfig:
    image_size: int = 64
    attr_count: int = 5
    width_factor: float = 0.25
    stu_variant: str = "standard"
    skip_mode: str = "stu"
    conditioning: str = "diff"

    def validate(self) -> "GeneratorConfig":
        if self.image_size % 32 != 0 or self.image_size < 32:
            raise ConfigError(f"image_size {self.image_size} must be a positive multiple of 32")
        if self.attr_count < 1:
            raise ConfigError("attr_count must be >= 1")
        if self.skip_mode not in SKIP_MODES:
            raise ConfigError(f"skip_mode {self.skip_mode!r} not in {SKIP_MODES}")
        if self.skip_mode == "stu" and self.stu_variant not in VARIANTS:
            raise ConfigError(f"stu_variant {self.stu_variant!r} not in {VARIANTS}")
        if self.conditioning not in CONDITIONINGS:
            raise ConfigError(f"conditioning {self.conditioning!r} not in {CONDITIONINGS}")
        if not (0 < self.width_factor <= 1):
            raise ConfigError("width_factor must be in (0, 1]")
        return self

    def widths(self) -> List[int]:
        return [max(4, round(w * self.width_factor)) for w in _BASE_WIDTHS]

    def skip_levels(self) -> List[bool]:
        """Which of levels 1..4 feed the decoder."""
        if self.skip_mode == "stu":
            return [True] * 4
        if self.skip_mode == "none":
            return [False] * 4
        if self.skip_mode == "raw_all":
            return [True] * 4
        k = 1 if self.skip_mode == "raw1" else 2
        return [l <= k for l in range(1, 5)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d).validate()


def _check_image(x: Tensor, image_size: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ContractError(f"{what} must be (batch, 3, h, w), got {x.shape}")
    if x.shape[2] != image_size or x.shape[3] != image_size:
        raise ContractError(f"{what} must be {image_size}x{image_size}, got {x.shape[2:]}")
    if not np.all(np.isfinite(x.data)):
        raise ContractError(f"{what} contains non-finite values")
    if np.max(np.abs(x.data)) > 1.0 + 1e-6:
        raise ContractError(f"{what} must lie in [-1, 1]")


class Generator:
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator,
                 dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        ch = cfg.widths()
        c = cfg.attr_count

        self.enc_convs: List[Conv2d] = []
        self.enc_norms: List[Optional[InstanceNorm2d]] = []
        in_ch = 3
        for i, out_ch in enumerate(ch):
            self.enc_convs.append(Conv2d(f"generator/encoder/{i}/conv", in_ch, out_ch,
                                         kernel=4, stride=2, padding=1, rng=rng, dtype=dtype))
            # normalizing the innermost map (1x1 or 2x2 spatial at desk
            # sizes) would erase the latent code, so the bottleneck layer
            # stays norm-free
            self.enc_norms.append(InstanceNorm2d(f"generator/encoder/{i}/norm", out_ch,
                                                 dtype=dtype) if i < 4 else None)
            in_ch = out_ch

        self.cells: List[Optional[STUCell]] = [None] * 4
        if cfg.skip_mode == "stu":
            for l in range(1, 5):
                self.cells[l - 1] = STUCell(
                    f"generator/stu/{l}", l, enc_ch=ch[l - 1], state_ch=ch[l],
                    attr_count=c, rng=rng, dtype=dtype, variant=cfg.stu_variant)

        skips = cfg.skip_levels()
        dec_out = [ch[3], ch[2], ch[1], ch[0], 3]
        self.dec_convs: List[ConvTranspose2d] = []
        self.dec_norms: List[Optional[InstanceNorm2d]] = []
        in_ch = ch[4] + c
        for j, out_ch in enumerate(dec_out):
            self.dec_convs.append(ConvTranspose2d(f"generator/decoder/{j}/deconv",
                                                  in_ch, out_ch, kernel=4, stride=2,
                                                  padding=1, rng=rng, dtype=dtype))
            self.dec_norms.append(InstanceNorm2d(f"generator/decoder/{j}/norm", out_ch,
                                                 dtype=dtype) if j < 4 else None)
            in_ch = out_ch
            if j < 4 and skips[3 - j]:
                in_ch += ch[3 - j]

        build_registry(self.parameters())

    # -- parameters ------------------------------------------------------
    def parameters(self) -> List:
        out = []
        for conv, norm in zip(self.enc_convs, self.enc_norms):
            out.extend(conv.params())
            if norm is not None:
                out.extend(norm.params())
        for cell in self.cells:
            if cell is not None:
                out.extend(cell.params())
        for conv, norm in zip(self.dec_convs, self.dec_norms):
            out.extend(conv.params())
            if norm is not None:
                out.extend(norm.params())
        return out

    def registry(self) -> Dict[str, T.Parameter]:
        return build_registry(self.parameters())

    # -- forward pieces ---------------------------------------------------
    def encode(self, x: Tensor) -> List[Tensor]:
        _check_image(x, self.cfg.image_size, "generator input")
        feats = []
        h = x
        for conv, norm in zip(self.enc_convs, self.enc_norms):
            h = conv(h)
            if norm is not None:
                h = norm(h)
            h = T.leaky_relu(h, 0.2)
            feats.append(h)
        return feats

    def _coerce_att(self, att, batch: int) -> Tensor:
        if isinstance(att, Tensor):
            arr = att.data
            t = att
        else:
            arr = np.asarray(att, dtype=self.dtype)
            if arr.ndim == 1:
                arr = np.broadcast_to(arr[None, :], (batch, arr.shape[0])).copy()
            t = T.constant(arr, dtype=self.dtype)
        if t.ndim != 2 or t.shape[0] != batch or t.shape[1] != self.cfg.attr_count:
            raise DimensionError(
                f"attribute vector must be ({batch}, {self.cfg.attr_count}), got {t.shape}")
        return t

    def transfer(self, feats: List[Tensor], att) -> List[Optional[Tensor]]:
        if len(feats) != _NUM_LEVELS:
            raise ConfigError("transfer expects the five encoder features")
        att_t = self._coerce_att(att, feats[0].shape[0])
        mode = self.cfg.skip_mode
        if mode == "none":
            return [None] * 4
        if mode in ("raw1", "raw2", "raw_all"):
            return [feats[l - 1] if keep else None
                    for l, keep in zip(range(1, 5), self.cfg.skip_levels())]
        out: List[Optional[Tensor]] = [None] * 4
        state = feats[4]  # innermost feature seeds the hidden-state chain
        for l in range(4, 0, -1):
            f_t, state = self.cells[l - 1].forward(feats[l - 1], state, att_t)
            out[l - 1] = f_t
        return out

    def decode(self, f_inner: Tensor, transferred: List[Optional[Tensor]], att) -> Tensor:
        att_t = self._coerce_att(att, f_inner.shape[0])
        skips = self.cfg.skip_levels()
        h = T.concat_channels(f_inner, stretch_diff(
            att_t, (f_inner.shape[2], f_inner.shape[3]), dtype=self.dtype))
        for j in range(5):
            h = self.dec_convs[j](h)
            if self.dec_norms[j] is not None:
                h = T.relu(self.dec_norms[j](h))
            if j < 4:
                skip = transferred[3 - j]
                if skips[3 - j]:
                    if skip is None:
                        raise ConfigError(f"skip_mode {self.cfg.skip_mode} expects a "
                                          f"level-{4 - j} feature")
                    h = T.concat_channels(h, skip)
                elif skip is not None:
                    raise ConfigError(f"skip_mode {self.cfg.skip_mode} got an "
                                      f"unexpected level-{4 - j} feature")
        return T.tanh(h)

    def generate(self, x: Tensor, att) -> Tensor:
        feats = self.encode(x)
        transferred = self.transfer(feats, att)
        return self.decode(feats[4], transferred, att)


class Discriminator:
    """Shared conv trunk with a critic head and an attribute head.

    The trunk is norm-free: the critic is trained with a gradient penalty,
    which is incompatible with batch-coupled normalization.
    """

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator,
                 dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        ch = cfg.widths()
        self.trunk: List[Conv2d] = []
        in_ch = 3
        for i, out_ch in enumerate(ch):
            self.trunk.append(Conv2d(f"discriminator/trunk/{i}/conv", in_ch, out_ch,
                                     kernel=4, stride=2, padding=1, rng=rng, dtype=dtype))
            in_ch = out_ch
        side = cfg.image_size // 32
        flat = ch[4] * side * side
        fc = max(16, round(1024 * cfg.width_factor))
        self.adv_fc1 = Linear("discriminator/adv/0/fc", flat, fc, rng, dtype=dtype)
        self.adv_fc2 = Linear("discriminator/adv/1/fc", fc, 1, rng, dtype=dtype)
        self.att_fc1 = Linear("discriminator/att/0/fc", flat, fc, rng, dtype=dtype)
        self.att_fc2 = Linear("discriminator/att/1/fc", fc, cfg.attr_count, rng, dtype=dtype)
        build_registry(self.parameters())

    def parameters(self) -> List:
        out = []
        for conv in self.trunk:
            out.extend(conv.params())
        for lin in (self.adv_fc1, self.adv_fc2, self.att_fc1, self.att_fc2):
            out.extend(lin.params())
        return out

    def registry(self) -> Dict[str, T.Parameter]:
        return build_registry(self.parameters())

    def _features(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"discriminator input must be (batch, 3, h, w), got {x.shape}")
        if x.shape[2] != self.cfg.image_size or x.shape[3] != self.cfg.image_size:
            raise DimensionError(f"discriminator expects {self.cfg.image_size}px input")
        h = x
        for conv in self.trunk:
            h = T.leaky_relu(conv(h), 0.2)
        return T.reshape(h, (x.shape[0], -1))

    def adv(self, x: Tensor) -> Tensor:
        """Unbounded per-sample critic score (no output activation)."""
        h = T.leaky_relu(self.adv_fc1(self._features(x)), 0.2)
        return T.reshape(self.adv_fc2(h), (x.shape[0],))

    def att_logits(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(self.att_fc1(self._features(x)), 0.2)
        return self.att_fc2(h)

    def att_probs(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.att_logits(x))

    def forward_both(self, x: Tensor):
        """One trunk pass feeding both heads."""
        feats = self._features(x)
        adv = T.reshape(self.adv_fc2(T.leaky_relu(self.adv_fc1(feats), 0.2)), (x.shape[0],))
        probs = T.sigmoid(self.att_fc2(T.leaky_relu(self.att_fc1(feats), 0.2)))
        return adv, probs

    def discriminate(self, x: Tensor):
        return self.forward_both(x)


def build_models(cfg: GeneratorConfig, seed: int, dtype=np.float32):
    """Deterministic generator + discriminator pair from one seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6e7]))
    gen = Generator(cfg, rng, dtype=dtype)
    disc = Discriminator(cfg, rng, dtype=dtype)
    return gen, disc

"""Small U-Net noise predictor with sinusoidal timestep conditioning.

Architecture (for the default 2-level config at 64x64):

    stem 3x3 conv -> [level 0: 2 res blocks @ 16ch] -> stride-2 conv
    -> [level 1: 2 res blocks @ 32ch] -> middle res block
    -> concat skip -> [2 res blocks @ 32ch] -> nearest-up + 3x3 conv
    -> concat skip -> [2 res blocks @ 16ch] -> group norm, silu, 3x3 conv head

Each res block is norm-silu-conv, plus a learned linear projection of the
timestep embedding added to the feature map, then norm-silu-conv, with an
identity (or 1x1 conv) shortcut. The head conv is zero-initialised so an
untrained net predicts zero noise. Inputs are (B, H, W) grayscale batches with
H, W divisible by 2**levels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from .layers import Conv2d, GroupNorm, Linear, SiLU, UpsampleNearest2x


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 1
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2)
    blocks_per_level: int = 2
    temb_dim: int = 32
    groups: int = 8
    t_max: int = 1000

    def validate(self) -> None:
        if len(self.channel_mult) < 1:
            raise ValueError("need at least one resolution level")
        if self.blocks_per_level < 1:
            raise ValueError("need at least one block per level")
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")
        for m in self.channel_mult:
            if (self.base_channels * m) % self.groups:
                raise ValueError(
                    f"channels {self.base_channels * m} not divisible by "
                    f"groups {self.groups}")
        if self.t_max < 1:
            raise ValueError("t_max must be positive")

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    def arch_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def sinusoidal_table(t_max: int, dim: int, dtype=np.float32) -> np.ndarray:
    """(t_max + 1, dim) table of [sin(t f_i), cos(t f_i)] rows; row 0 unused."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = np.arange(t_max + 1)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)


class ResBlock:
    def __init__(self, c_in, c_out, temb_dim, groups, rng, dtype):
        self.norm1 = GroupNorm(c_in, groups, dtype=dtype)
        self.act1 = SiLU()
        self.conv1 = Conv2d(c_in, c_out, 3, rng=rng, dtype=dtype)
        self.temb_proj = Linear(temb_dim, c_out, rng=rng, dtype=dtype)
        self.norm2 = GroupNorm(c_out, groups, dtype=dtype)
        self.act2 = SiLU()
        self.conv2 = Conv2d(c_out, c_out, 3, rng=rng, dtype=dtype)
        self.skip = None if c_in == c_out else Conv2d(c_in, c_out, 1, rng=rng, dtype=dtype)

    def sublayers(self):
        out = {"norm1": self.norm1, "conv1": self.conv1, "temb_proj": self.temb_proj,
               "norm2": self.norm2, "conv2": self.conv2}
        if self.skip is not None:
            out["skip"] = self.skip
        return out

    def forward(self, x, temb):
        h = self.conv1.forward(self.act1.forward(self.norm1.forward(x)))
        h = h + self.temb_proj.forward(temb)[:, None, None, :]
        h = self.conv2.forward(self.act2.forward(self.norm2.forward(h)))
        s = x if self.skip is None else self.skip.forward(x)
        return h + s

    def backward(self, dy):
        """Returns (dx, dtemb)."""
        dh = self.norm2.backward(self.act2.backward(self.conv2.backward(dy)))
        dtemb = self.temb_proj.backward(dh.sum(axis=(1, 2)))
        dx = self.norm1.backward(self.act1.backward(self.conv1.backward(dh)))
        dx = dx + (dy if self.skip is None else self.skip.backward(dy))
        return dx, dtemb


class TinyUNet:
    """Noise predictor eps(x_t, t); parameters held as plain numpy arrays."""

    def __init__(self, config: ArchConfig, rng: np.random.Generator,
                 dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.arch_hash = config.arch_hash()
        c = config
        chans = [c.base_channels * m for m in c.channel_mult]

        self.temb_table = sinusoidal_table(c.t_max, c.temb_dim, dtype)
        self.temb_mlp = [Linear(c.temb_dim, c.temb_dim, rng=rng, dtype=dtype),
                         SiLU(),
                         Linear(c.temb_dim, c.temb_dim, rng=rng, dtype=dtype)]

        self.stem = Conv2d(c.in_channels, chans[0], 3, rng=rng, dtype=dtype)
        self.enc_blocks: list[list[ResBlock]] = []
        self.downs: list[Conv2d] = []
        cur = chans[0]
        for lvl, ch in enumerate(chans):
            blocks = []
            for _ in range(c.blocks_per_level):
                blocks.append(ResBlock(cur, ch, c.temb_dim, c.groups, rng, dtype))
                cur = ch
            self.enc_blocks.append(blocks)
            if lvl < len(chans) - 1:
                self.downs.append(Conv2d(cur, cur, 3, stride=2, rng=rng, dtype=dtype))
        self.middle = ResBlock(cur, cur, c.temb_dim, c.groups, rng, dtype)
        self.dec_blocks: list[list[ResBlock]] = []
        self.ups: list[Conv2d] = []
        for lvl in reversed(range(len(chans))):
            ch = chans[lvl]
            blocks = [ResBlock(cur + ch, ch, c.temb_dim, c.groups, rng, dtype)]
            for _ in range(c.blocks_per_level - 1):
                blocks.append(ResBlock(ch, ch, c.temb_dim, c.groups, rng, dtype))
            cur = ch
            self.dec_blocks.append(blocks)
            if lvl > 0:
                self.ups.append(Conv2d(cur, chans[lvl - 1], 3, rng=rng, dtype=dtype))
                cur = chans[lvl - 1]
        self.upsample = UpsampleNearest2x()
        self.head_norm = GroupNorm(chans[0], c.groups, dtype=dtype)
        self.head_act = SiLU()
        self.head = Conv2d(chans[0], c.in_channels, 3, dtype=dtype, zero_init=True)

    # -- parameter registry ---------------------------------------------------

    def _named_layers(self):
        yield "temb_mlp.0", self.temb_mlp[0]
        yield "temb_mlp.2", self.temb_mlp[2]
        yield "stem", self.stem
        for lvl, blocks in enumerate(self.enc_blocks):
            for i, blk in enumerate(blocks):
                for name, sub in blk.sublayers().items():
                    yield f"enc{lvl}.block{i}.{name}", sub
        for i, down in enumerate(self.downs):
            yield f"down{i}", down
        for name, sub in self.middle.sublayers().items():
            yield f"middle.{name}", sub
        for j, blocks in enumerate(self.dec_blocks):
            for i, blk in enumerate(blocks):
                for name, sub in blk.sublayers().items():
                    yield f"dec{j}.block{i}.{name}", sub
        for i, up in enumerate(self.ups):
            yield f"up{i}", up
        yield "head_norm", self.head_norm
        yield "head", self.head

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self._named_layers():
            for pname, arr in layer.params().items():
                out[f"{lname}.{pname}"] = arr
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self._named_layers():
            for pname, arr in layer.grads().items():
                out[f"{lname}.{pname}"] = arr
        return out

    def zero_grads(self) -> None:
        for _, layer in self._named_layers():
            layer.zero_grads()

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self.named_params().values())

    # -- forward / backward ---------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        factor = 2 ** self.config.levels
        if x.shape[1] % factor or x.shape[2] % factor:
            raise ValueError(
                f"spatial dims {x.shape[1:3]} must be divisible by {factor}")

    def forward(self, x: np.ndarray, t) -> np.ndarray:
        """x: (B, H, W) latents, t: int or (B,) ints; returns (B, H, W)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3:
            raise ValueError(f"expected (B, H, W), got {x.shape}")
        self._check_input(x)
        B = x.shape[0]
        t_arr = np.broadcast_to(np.asarray(t), (B,))
        if np.any(t_arr < 1) or np.any(t_arr > self.config.t_max):
            raise ValueError(f"timestep outside [1, {self.config.t_max}]")

        temb = self.temb_table[t_arr]
        for layer in self.temb_mlp:
            temb = layer.forward(temb)

        h = self.stem.forward(x[..., None])
        skips = []
        for lvl, blocks in enumerate(self.enc_blocks):
            for blk in blocks:
                h = blk.forward(h, temb)
            skips.append(h)
            if lvl < len(self.enc_blocks) - 1:
                h = self.downs[lvl].forward(h)
        h = self.middle.forward(h, temb)
        self._skip_widths = []
        for j, blocks in enumerate(self.dec_blocks):
            skip = skips.pop()
            self._skip_widths.append(skip.shape[-1])
            h = np.concatenate([h, skip], axis=-1)
            for blk in blocks:
                h = blk.forward(h, temb)
            if j < len(self.ups):
                h = self.ups[j].forward(self.upsample.forward(h))
        out = self.head.forward(self.head_act.forward(self.head_norm.forward(h)))
        return out[..., 0]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads for the last forward; returns dx."""
        dh = self.head_norm.backward(
            self.head_act.backward(self.head.backward(np.asarray(dout)[..., None])))
        dtemb_total = 0.0
        dskips = []
        for j in reversed(range(len(self.dec_blocks))):
            if j < len(self.ups):
                dh = self.upsample.backward(self.ups[j].backward(dh))
            for blk in reversed(self.dec_blocks[j]):
                dh, dtemb = blk.backward(dh)
                dtemb_total = dtemb_total + dtemb
            w = self._skip_widths[j]
            dskips.append(dh[..., -w:])
            dh = dh[..., :-w]
        dh, dtemb = self.middle.backward(dh)
        dtemb_total = dtemb_total + dtemb
        for lvl in reversed(range(len(self.enc_blocks))):
            if lvl < len(self.downs):
                dh = self.downs[lvl].backward(dh)
            dh = dh + dskips.pop()
            for blk in reversed(self.enc_blocks[lvl]):
                dh, dtemb = blk.backward(dh)
                dtemb_total = dtemb_total + dtemb
        dx = self.stem.backward(dh)
        dt = dtemb_total
        for layer in reversed(self.temb_mlp):
            dt = layer.backward(dt)
        return dx[..., 0]


def expected_param_count(config: ArchConfig) -> int:
    """Closed-form parameter count from the architecture table."""
    def conv(ci, co, k):
        return k * k * ci * co + co

    def norm(c_):
        return 2 * c_

    def linear(di, do):
        return di * do + do

    def res(ci, co, temb):
        n = norm(ci) + conv(ci, co, 3) + linear(temb, co) + norm(co) + conv(co, co, 3)
        if ci != co:
            n += conv(ci, co, 1)
        return n

    c = config
    chans = [c.base_channels * m for m in c.channel_mult]
    total = 2 * linear(c.temb_dim, c.temb_dim)
    total += conv(c.in_channels, chans[0], 3)
    cur = chans[0]
    for lvl, ch in enumerate(chans):
        for _ in range(c.blocks_per_level):
            total += res(cur, ch, c.temb_dim)
            cur = ch
        if lvl < len(chans) - 1:
            total += conv(cur, cur, 3)
    total += res(cur, cur, c.temb_dim)
    for lvl in reversed(range(len(chans))):
        ch = chans[lvl]
        total += res(cur + ch, ch, c.temb_dim)
        for _ in range(c.blocks_per_level - 1):
            total += res(ch, ch, c.temb_dim)
        cur = ch
        if lvl > 0:
            total += conv(cur, chans[lvl - 1], 3)
            cur = chans[lvl - 1]
    total += norm(chans[0]) + conv(chans[0], c.in_channels, 3)
    return total

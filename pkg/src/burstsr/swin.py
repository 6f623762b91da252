"""Shifted-window self-attention blocks and groups on (B, C, H, W) feature maps."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


def _pad_amounts(H: int, W: int, M: int) -> tuple[int, int]:
    return (-H) % M, (-W) % M


def pad_to_window(x: torch.Tensor, M: int) -> torch.Tensor:
    """Pad (B, C, H, W) on the bottom/right to multiples of ``M``.

    Reflect padding where it is defined, replicate for maps thinner than the pad.
    """
    H, W = x.shape[-2:]
    ph, pw = _pad_amounts(H, W, M)
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if (ph < H and pw < W) else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def _partition_tokens(t: torch.Tensor, M: int) -> torch.Tensor:
    # (B, Hp, Wp, C) -> (B * nW, M*M, C), windows in raster order
    B, Hp, Wp, C = t.shape
    t = t.view(B, Hp // M, M, Wp // M, M, C).permute(0, 1, 3, 2, 4, 5)
    return t.reshape(-1, M * M, C)


def _reverse_tokens(windows: torch.Tensor, M: int, B: int, Hp: int, Wp: int) -> torch.Tensor:
    C = windows.shape[-1]
    t = windows.view(B, Hp // M, Wp // M, M, M, C).permute(0, 1, 3, 2, 4, 5)
    return t.reshape(B, Hp, Wp, C)


def window_partition(x: torch.Tensor, M: int) -> tuple[torch.Tensor, tuple[int, int, int, int]]:
    """Split a (B, C, H, W) or (C, H, W) map into windows of M*M tokens.

    Returns ``(windows, (H, W, Hp, Wp))`` where windows is (B * nW, M*M, C).
    """
    if x.dim() == 3:
        x = x.unsqueeze(0)
    H, W = x.shape[-2:]
    xp = pad_to_window(x, M)
    Hp, Wp = xp.shape[-2:]
    return _partition_tokens(xp.permute(0, 2, 3, 1), M), (H, W, Hp, Wp)


def window_reverse(windows: torch.Tensor, M: int, sizes: tuple[int, int, int, int]) -> torch.Tensor:
    """Inverse of :func:`window_partition`; crops the padding. Returns (B, C, H, W)."""
    H, W, Hp, Wp = sizes
    B = windows.shape[0] // ((Hp // M) * (Wp // M))
    t = _reverse_tokens(windows, M, B, Hp, Wp)
    return t[:, :H, :W].permute(0, 3, 1, 2).contiguous()


def region_labels(Hp: int, Wp: int, M: int, shift: int) -> torch.Tensor:
    """Integer label per pixel of the rolled map identifying its pre-shift region."""
    labels = torch.zeros(Hp, Wp, dtype=torch.long)
    cnt = 0
    for hs in (slice(0, -M), slice(-M, -shift), slice(-shift, None)):
        for ws in (slice(0, -M), slice(-M, -shift), slice(-shift, None)):
            labels[hs, ws] = cnt
            cnt += 1
    return labels


def shifted_window_mask(Hp: int, Wp: int, M: int, shift: int, dtype=torch.float32) -> torch.Tensor:
    """Additive attention mask (nW, M*M, M*M): 0 within a region, -inf across."""
    labels = region_labels(Hp, Wp, M, shift)
    win = _partition_tokens(labels.view(1, Hp, Wp, 1), M).squeeze(-1)
    same = win.unsqueeze(1) == win.unsqueeze(2)
    mask = torch.zeros(same.shape, dtype=dtype)
    return mask.masked_fill(~same, float("-inf"))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside a window with a relative position bias."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.window = dim, heads, window
        self.scale = (dim // heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
        self.register_buffer("relative_position_index", rel[..., 0] * (2 * window - 1) + rel[..., 1],
                             persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.qkv.weight, std=0.02)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.qkv.bias)
        nn.init.zeros_(self.proj.bias)

    def relative_bias(self) -> torch.Tensor:
        n = self.window * self.window
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        return bias.view(n, n, self.heads).permute(2, 0, 1)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor | None = None, return_attention: bool = False):
        Bw, n, C = tokens.shape
        if n != self.window * self.window or C != self.dim:
            raise ConfigError(f"expected windows of {self.window ** 2} tokens x {self.dim}, got {n} x {C}")
        qkv = self.qkv(tokens).view(Bw, n, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(-2, -1) + self.relative_bias().unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            logits = logits.view(Bw // nW, nW, self.heads, n, n) + mask.to(logits.dtype).unsqueeze(1).unsqueeze(0)
            logits = logits.view(Bw, self.heads, n, n)
        attn = logits.softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(Bw, n, C))
        return (out, attn) if return_attention else out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        for fc in (self.fc1, self.fc2):
            nn.init.trunc_normal_(fc.weight, std=0.02)
            nn.init.zeros_(fc.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    """Pre-norm windowed attention and MLP, each with a residual connection.

    ``shifted`` rolls the map by ``window // 2`` before partitioning so that
    consecutive blocks exchange information across window borders.
    """

    def __init__(self, dim: int, heads: int, window: int, shifted: bool = False, mlp_ratio: float = 2.0):
        super().__init__()
        if window < 1 or mlp_ratio <= 0:
            raise ConfigError("window must be >= 1 and mlp_ratio > 0")
        self.window = window
        self.shift = window // 2 if shifted else 0
        self.norm1 = nn.LayerNorm(dim, eps=1e-5)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim, eps=1e-5)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def attention_mask(self, Hp: int, Wp: int, dtype=torch.float32) -> torch.Tensor | None:
        if self.shift == 0:
            return None
        return shifted_window_mask(Hp, Wp, self.window, self.shift, dtype)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        B, C, H, W = x.shape
        M = self.window
        t = x.permute(0, 2, 3, 1)
        y = pad_to_window(self.norm1(t).permute(0, 3, 1, 2), M).permute(0, 2, 3, 1)
        Hp, Wp = y.shape[1:3]
        if self.shift:
            y = torch.roll(y, shifts=(-self.shift, -self.shift), dims=(1, 2))
        mask = self.attention_mask(Hp, Wp, x.dtype)
        out = self.attn(_partition_tokens(y, M), mask, return_attention)
        attn = None
        if return_attention:
            out, attn = out
        y = _reverse_tokens(out, M, B, Hp, Wp)
        if self.shift:
            y = torch.roll(y, shifts=(self.shift, self.shift), dims=(1, 2))
        t = t + y[:, :H, :W]
        t = t + self.mlp(self.norm2(t))
        out = t.permute(0, 3, 1, 2)
        return (out, attn) if return_attention else out


class SwinGroup(nn.Module):
    """``blocks`` SwinBlocks with alternating shifts, a 3x3 conv, and an outer skip."""

    def __init__(self, dim: int, heads: int, window: int, blocks: int = 2, mlp_ratio: float = 2.0):
        super().__init__()
        if blocks < 1:
            raise ConfigError("a group needs at least one block")
        self.blocks = nn.ModuleList([
            SwinBlock(dim, heads, window, shifted=bool(i % 2), mlp_ratio=mlp_ratio) for i in range(blocks)
        ])
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x):
        y = x
        for blk in self.blocks:
            y = blk(y)
        return x + self.conv(y)


def zero_residual_branches(module: nn.Module) -> None:
    """Zero the output projections of every block and the trailing group convs."""
    for m in module.modules():
        if isinstance(m, SwinBlock):
            for lin in (m.attn.proj, m.mlp.fc2):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)
        elif isinstance(m, SwinGroup):
            nn.init.zeros_(m.conv.weight)
            nn.init.zeros_(m.conv.bias)

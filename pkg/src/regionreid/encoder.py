"""Small differentiable visual backbone producing a spatial feature map.

Non-overlapping patch embedding with an additive positional table, two
token/channel mixing blocks (tanh nonlinearities, residual), and a final
linear projection.  Cheap enough for CPU training while exposing the same
[d, H, W] feature-map contract a full-scale backbone would.
"""

from __future__ import annotations

import torch
from torch import nn


# Positional table scale; comparable to the patch-embedding output scale so
# spatial identity survives the frozen-encoder phase.
_POS_STD = 0.5


def _linear_init(g: torch.Generator, out_dim: int, in_dim: int, dtype) -> torch.Tensor:
    # scale 1/sqrt(fan-in)
    return torch.randn(out_dim, in_dim, generator=g, dtype=dtype) * in_dim**-0.5


class VisionBackbone(nn.Module):
    """Patch embedding + 2 mixing blocks + linear projection to ``out_dim``."""

    def __init__(
        self,
        image_size: tuple[int, int] = (64, 32),
        patch_size: int = 8,
        out_dim: int = 64,
        blocks: int = 2,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        ih, iw = image_size
        if ih % patch_size or iw % patch_size:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size = (ih, iw)
        self.patch_size = patch_size
        self.out_dim = out_dim
        self.map_height = ih // patch_size
        self.map_width = iw // patch_size
        tokens = self.map_height * self.map_width
        width = out_dim

        g = torch.Generator().manual_seed(seed)
        patch_in = 3 * patch_size * patch_size
        self.patch_weight = nn.Parameter(_linear_init(g, width, patch_in, dtype))
        self.patch_bias = nn.Parameter(torch.zeros(width, dtype=dtype))
        self.positions = nn.Parameter(torch.randn(tokens, width, generator=g, dtype=dtype) * _POS_STD)
        self.token_w1 = nn.ParameterList()
        self.token_b1 = nn.ParameterList()
        self.token_w2 = nn.ParameterList()
        self.token_b2 = nn.ParameterList()
        self.channel_w1 = nn.ParameterList()
        self.channel_b1 = nn.ParameterList()
        self.channel_w2 = nn.ParameterList()
        self.channel_b2 = nn.ParameterList()
        for _ in range(blocks):
            self.token_w1.append(nn.Parameter(_linear_init(g, tokens, tokens, dtype)))
            self.token_b1.append(nn.Parameter(torch.zeros(tokens, dtype=dtype)))
            self.token_w2.append(nn.Parameter(_linear_init(g, tokens, tokens, dtype)))
            self.token_b2.append(nn.Parameter(torch.zeros(tokens, dtype=dtype)))
            self.channel_w1.append(nn.Parameter(_linear_init(g, width, width, dtype)))
            self.channel_b1.append(nn.Parameter(torch.zeros(width, dtype=dtype)))
            self.channel_w2.append(nn.Parameter(_linear_init(g, width, width, dtype)))
            self.channel_b2.append(nn.Parameter(torch.zeros(width, dtype=dtype)))
        self.proj_weight = nn.Parameter(_linear_init(g, out_dim, width, dtype))
        self.proj_bias = nn.Parameter(torch.zeros(out_dim, dtype=dtype))

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """[3, ih, iw] -> [d, H, W], or batched [B, 3, ih, iw] -> [B, d, H, W]."""
        single = image.dim() == 3
        if single:
            image = image.unsqueeze(0)
        b = image.shape[0]
        ih, iw = self.image_size
        if tuple(image.shape[1:]) != (3, ih, iw):
            raise ValueError(
                f"expected input [*, 3, {ih}, {iw}], got {tuple(image.shape)}"
            )
        p = self.patch_size
        hh, ww = self.map_height, self.map_width
        x = image.to(self.patch_weight.dtype)
        x = (x - 0.5) * 2.0  # center [0,1] inputs so dark/bright content anti-correlates
        # [b, 3, hh, p, ww, p] -> [b, hh, ww, 3, p, p] -> [b, tokens, 3*p*p]
        x = x.reshape(b, 3, hh, p, ww, p).permute(0, 2, 4, 1, 3, 5).reshape(b, hh * ww, 3 * p * p)
        tokens = x @ self.patch_weight.T + self.patch_bias
        tokens = tokens + self.positions
        for i in range(len(self.token_w1)):
            y = tokens.transpose(1, 2)  # [b, width, tokens]
            y = torch.tanh(y @ self.token_w1[i].T + self.token_b1[i])
            y = y @ self.token_w2[i].T + self.token_b2[i]
            tokens = tokens + y.transpose(1, 2)
            z = torch.tanh(tokens @ self.channel_w1[i].T + self.channel_b1[i])
            tokens = tokens + z @ self.channel_w2[i].T + self.channel_b2[i]
        out = tokens @ self.proj_weight.T + self.proj_bias
        fmap = out.transpose(1, 2).reshape(b, self.out_dim, hh, ww)
        return fmap.squeeze(0) if single else fmap


def encode_image(image: torch.Tensor, backbone: VisionBackbone) -> torch.Tensor:
    """Feature map [d, H, W] of one image (or [B, d, H, W] for a batch)."""
    return backbone(image)


def global_average_pool(fmap: torch.Tensor) -> torch.Tensor:
    """Mean over the spatial dimensions: [.., d, H, W] -> [.., d]."""
    if fmap.shape[-1] < 1 or fmap.shape[-2] < 1:
        raise ValueError("feature map must have at least one pixel")
    return fmap.mean(dim=(-2, -1))

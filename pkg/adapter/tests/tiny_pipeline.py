"""Minimal deterministic DiT-class torch pipeline for adapter tests:
a block stack with gated attention/feed-forward submodules and an Euler
sampling loop that calls the denoiser once per step."""

import math

import torch
from torch import nn


class SelfAttention(nn.Module):
    def __init__(self, dim, heads=2):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, h):
        n, d = h.shape
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        dh = d // self.heads
        q = q.view(n, self.heads, dh).transpose(0, 1)
        k = k.view(n, self.heads, dh).transpose(0, 1)
        v = v.view(n, self.heads, dh).transpose(0, 1)
        w = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        out = (w @ v).transpose(0, 1).reshape(n, d)
        return self.proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, h):
        return self.net(h)


class Block(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)


class Denoiser(nn.Module):
    def __init__(self, dim, layers):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim) for _ in range(layers))
        self.head = nn.Linear(dim, dim, bias=False)
        self.dim = dim

    def _time_embedding(self, sigma):
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half) / half)
        ang = 40.0 * sigma * freqs
        return torch.cat([torch.sin(ang), torch.cos(ang)])

    def forward(self, x, sigma):
        h = x + self._time_embedding(sigma)
        for block in self.blocks:
            h = h + block.attn(block.norm1(h))
            h = h + block.ff(block.norm2(h))
        return self.head(h)


class TinyPipeline:
    """Euler sampler over a linear sigma grid; one denoiser call per step."""

    deterministic = True

    def __init__(self, dim=16, layers=2, tokens=12, num_steps=8, seed=0):
        torch.manual_seed(seed)
        self.denoiser = Denoiser(dim, layers)
        self.denoiser.eval()
        self.num_steps = num_steps
        self.tokens = tokens
        self.dim = dim
        self.sigma = torch.linspace(1.0, 0.0, num_steps + 1)

    @torch.no_grad()
    def generate(self, seed: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(int(seed))
        x = torch.randn(self.tokens, self.dim, generator=gen)
        for t in range(self.num_steps):
            z = self.denoiser(x, float(self.sigma[t]))
            x = x + (self.sigma[t + 1] - self.sigma[t]) * z
        return x


MAPPING = {
    "denoiser": "denoiser",
    "families": {
        "mhsa": ["denoiser.blocks.{layer}.attn"],
        "ffn": ["denoiser.blocks.{layer}.ff"],
    },
}


def run_prompt(pipeline, prompt) -> None:
    # prompts are plain seeds for this class-free toy
    pipeline.generate(int(prompt))

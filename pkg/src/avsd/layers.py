"""Pre-layer-norm Transformer encoder/decoder blocks with padding masks."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from avsd.tensor import masked_softmax


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x, memory=None, key_mask=None, causal: bool = False):
        """``key_mask`` is ``(B, S)`` with True for valid keys."""
        memory = x if memory is None else memory
        b, t, w = x.shape
        s = memory.shape[1]
        h = self.heads

        def split(y, n):
            return y.reshape(b, n, h, w // h).transpose(1, 2)

        q, k, v = split(self.q(x), t), split(self.k(memory), s), split(self.v(memory), s)
        scores = q @ k.transpose(-1, -2) / math.sqrt(w // h)
        allowed = None
        if key_mask is not None:
            allowed = key_mask[:, None, None, :]
        if causal:
            tri = torch.ones(t, s, dtype=torch.bool, device=x.device).tril()
            allowed = tri if allowed is None else allowed & tri
        attn = masked_softmax(scores, allowed)
        y = (attn @ v).transpose(1, 2).reshape(b, t, w)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, width: int, heads: int, ffn: int, dropout: float = 0.0):
        super().__init__()
        self.drop = nn.Dropout(dropout)
        self.ln1 = nn.LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.ffn = FeedForward(width, ffn)

    def forward(self, x, mask=None):
        x = x + self.drop(self.attn(self.ln1(x), key_mask=mask))
        return x + self.drop(self.ffn(self.ln2(x)))


class DecoderBlock(nn.Module):
    def __init__(self, width: int, heads: int, ffn: int, dropout: float = 0.0):
        super().__init__()
        self.drop = nn.Dropout(dropout)
        self.ln1 = nn.LayerNorm(width)
        self.self_attn = MultiHeadAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.cross_attn = MultiHeadAttention(width, heads)
        self.ln3 = nn.LayerNorm(width)
        self.ffn = FeedForward(width, ffn)

    def forward(self, y, memory, memory_mask=None, target_mask=None):
        y = y + self.drop(self.self_attn(self.ln1(y), key_mask=target_mask, causal=True))
        y = y + self.drop(self.cross_attn(self.ln2(y), memory=memory, key_mask=memory_mask))
        return y + self.drop(self.ffn(self.ln3(y)))


class ConvPositional(nn.Module):
    """Grouped 1-D convolution over time added as a residual."""

    def __init__(self, width: int, kernel: int = 9, groups: int = 4):
        super().__init__()
        self.conv = nn.Conv1d(width, width, kernel, padding=kernel // 2, groups=groups)

    def forward(self, x, mask=None):
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(x.dtype)
        pos = F.gelu(self.conv(x.transpose(1, 2))).transpose(1, 2)
        return x + pos


class TransformerEncoder(nn.Module):
    """Positional conv, a stack of blocks and a final layer norm."""

    def __init__(self, width: int = 64, heads: int = 4, ffn: int = 256, blocks: int = 4, pos_kernel: int = 9, pos_groups: int = 4, dropout: float = 0.0):
        super().__init__()
        self.pos = ConvPositional(width, pos_kernel, pos_groups)
        self.blocks = nn.ModuleList(EncoderBlock(width, heads, ffn, dropout) for _ in range(blocks))
        self.ln = nn.LayerNorm(width)

    def forward(self, x, mask=None, return_layers: bool = False):
        x = self.pos(x, mask)
        layers = []
        for block in self.blocks:
            x = block(x, mask)
            layers.append(x)
        out = self.ln(x)
        return (out, layers) if return_layers else out


def sinusoid_table(n: int, width: int) -> torch.Tensor:
    """Fixed sine/cosine absolute position codes, ``(n, width)``."""
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, width, 2, dtype=torch.float64) / width)
    table = torch.zeros(n, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: width // 2])
    return table


class TransformerDecoder(nn.Module):
    def __init__(self, num_embeddings: int, num_classes: int, width: int = 64, heads: int = 4, ffn: int = 256, blocks: int = 2, max_len: int = 256, dropout: float = 0.0, memory_positions: bool = True):
        super().__init__()
        self.memory_positions = memory_positions
        self.embed = nn.Embedding(num_embeddings, width)
        self.pos = nn.Embedding(max_len, width)
        self.drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(DecoderBlock(width, heads, ffn, dropout) for _ in range(blocks))
        self.ln = nn.LayerNorm(width)
        self.out = nn.Linear(width, num_classes)

    def forward(self, tokens, memory, memory_mask=None, target_mask=None):
        """Logits for every position of ``tokens`` (B, N)."""
        n = tokens.shape[1]
        if n > self.pos.num_embeddings:
            raise ValueError(f"decoder input length {n} exceeds {self.pos.num_embeddings}")
        y = self.drop(self.embed(tokens) + self.pos(torch.arange(n, device=tokens.device)))
        if self.memory_positions:
            memory = memory + sinusoid_table(memory.shape[1], memory.shape[2]).to(memory.dtype)
        for block in self.blocks:
            y = block(y, memory, memory_mask, target_mask)
        return self.out(self.ln(y))

"""Modality frontends, feature masking, modality dropout and noise injection."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

MODALITY_CHOICES = ("both", "audio", "video")


def stack_audio_frames(frames: np.ndarray, factor: int = 4) -> np.ndarray:
    """Concatenate ``factor`` consecutive frames along channels; the remainder is dropped."""
    if factor < 1:
        raise ValueError(f"stacking factor must be >= 1, got {factor}")
    t, d = frames.shape
    if t < factor:
        raise ValueError(f"cannot stack {t} frames with factor {factor}")
    n = t // factor
    return frames[: n * factor].reshape(n, factor * d)


def make_span_mask(t: int, coverage: float, span_len: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices covered by random spans.

    Span starts are drawn uniformly without replacement; spans are clipped at
    ``t`` and may overlap. Sampling stops as soon as the covered fraction
    reaches ``coverage``.
    """
    if not 0.0 <= coverage <= 1.0:
        raise ValueError(f"coverage must be in [0, 1], got {coverage}")
    if span_len < 1:
        raise ValueError(f"span_len must be >= 1, got {span_len}")
    covered = np.zeros(t, dtype=bool)
    need = coverage * t
    if t == 0 or need <= 0:
        return np.zeros(0, dtype=np.int64)
    count = 0
    for start in rng.permutation(t):
        seg = covered[start : start + span_len]
        count += int(seg.size - seg.sum())
        seg[:] = True
        if count >= need:
            break
    return np.flatnonzero(covered)


def index_mask(indices, t: int) -> torch.Tensor:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= t):
        raise IndexError(f"mask index out of range for {t} frames")
    m = torch.zeros(t, dtype=torch.bool)
    m[torch.as_tensor(idx)] = True
    return m


def corrupt(features: torch.Tensor, mask, embedding: torch.Tensor) -> torch.Tensor:
    """Replace masked rows of ``features`` with ``embedding``.

    ``mask`` is either an index collection (for a single ``T x D`` sequence)
    or a boolean tensor broadcastable to ``features.shape[:-1]``.
    """
    if embedding.shape[-1] != features.shape[-1]:
        raise ValueError(f"embedding dim {embedding.shape[-1]} != feature dim {features.shape[-1]}")
    if not (isinstance(mask, torch.Tensor) and mask.dtype == torch.bool):
        mask = index_mask(mask, features.shape[-2])
    return torch.where(mask.unsqueeze(-1), embedding.to(features.dtype), features)


def draw_modality(p_m: float, p_a: float, rng: np.random.Generator) -> str:
    for name, p in (("p_m", p_m), ("p_a", p_a)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {p}")
    if rng.random() < p_m:
        return "both"
    return "audio" if rng.random() < p_a else "video"


def modality_dropout(f_a, f_v, p_m: float, p_a: float, rng: np.random.Generator):
    """Keep both streams with probability ``p_m``; otherwise keep audio with
    probability ``p_a`` (else video) and zero the other stream."""
    choice = draw_modality(p_m, p_a, rng)
    if choice == "audio":
        f_v = f_v * 0
    elif choice == "video":
        f_a = f_a * 0
    return f_a, f_v


def add_noise(audio: np.ndarray, p_noise: float, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """With probability ``p_noise`` mix in white Gaussian noise at ``snr_db``."""
    if not 0.0 <= p_noise <= 1.0:
        raise ValueError(f"p_noise must be in [0, 1], got {p_noise}")
    if rng.random() >= p_noise or math.isinf(snr_db) and snr_db > 0:
        return audio
    power = float(np.mean(np.square(audio, dtype=np.float64)))
    std = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    return audio + rng.normal(0.0, std, size=audio.shape).astype(audio.dtype)


def augment_frames(frames: np.ndarray, crop: int, rng: np.random.Generator, flip_prob: float = 0.5) -> np.ndarray:
    """Random square crop (same window for every frame) and horizontal flip."""
    _, h, w = frames.shape
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    out = frames[:, top : top + crop, left : left + crop]
    if rng.random() < flip_prob:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def center_crop(frames: np.ndarray, crop: int) -> np.ndarray:
    _, h, w = frames.shape
    top, left = (h - crop) // 2, (w - crop) // 2
    return np.ascontiguousarray(frames[:, top : top + crop, left : left + crop])


class AudioFrontend(nn.Module):
    def __init__(self, in_dim: int = 104, dim: int = 64):
        super().__init__()
        self.proj = nn.Linear(in_dim, dim)

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        return self.proj(audio)


class VisualFrontend(nn.Module):
    """Per-frame 2-D conv stack, global max pooling and a projection.

    Accepts any frame size, so the same weights serve lip and face views.
    """

    def __init__(self, dim: int = 64, channels: tuple[int, int] = (16, 32)):
        super().__init__()
        c1, c2 = channels
        self.conv1 = nn.Conv2d(1, c1, 5, stride=2, padding=2)
        self.conv2 = nn.Conv2d(c1, c2, 5, stride=2, padding=2)
        self.proj = nn.Linear(c2, dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        b, t, h, w = frames.shape
        x = frames.reshape(b * t, 1, h, w)
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        x = x.amax(dim=(2, 3))
        return self.proj(x).reshape(b, t, -1)


class Fusion(nn.Module):
    """Channel-wise concat of the two streams, layer norm, projection."""

    def __init__(self, dim: int = 64, width: int = 64):
        super().__init__()
        self.norm = nn.LayerNorm(2 * dim, eps=1e-5)
        self.proj = nn.Linear(2 * dim, width)

    def forward(self, f_a: torch.Tensor, f_v: torch.Tensor) -> torch.Tensor:
        return self.proj(self.norm(fuse(f_a, f_v)))


def fuse(f_a: torch.Tensor, f_v: torch.Tensor) -> torch.Tensor:
    if f_a.shape[:-1] != f_v.shape[:-1]:
        raise ValueError(f"audio/video length mismatch: {tuple(f_a.shape)} vs {tuple(f_v.shape)}")
    return torch.cat([f_a, f_v], dim=-1)


def frontend_forward(audio_fe: AudioFrontend, visual_fe: VisualFrontend, audio_stacked, video_frames):
    """Run both frontends on one batch; lengths must already agree."""
    if audio_stacked.shape[:2] != video_frames.shape[:2]:
        raise ValueError(
            f"audio has {audio_stacked.shape[1]} frames after stacking, video has {video_frames.shape[1]}"
        )
    return audio_fe(audio_stacked), visual_fe(video_frames)

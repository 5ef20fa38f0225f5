"""Padding and batching of utterances into model tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from avsd.corpus import AUDIO_STACK, Utterance
from avsd.frontends import stack_audio_frames
from avsd.vocab import Vocabulary


@dataclass
class Batch:
    video: torch.Tensor  # (B, T, H, W)
    mask: torch.Tensor  # (B, T) valid frames
    audio: torch.Tensor | None = None  # (B, T, 4*26) stacked
    targets: list[list[int]] | None = None
    utt_ids: list[str] | None = None

    @property
    def lengths(self) -> torch.Tensor:
        return self.mask.sum(dim=1)

    def __len__(self) -> int:
        return self.video.shape[0]


def pad_stack(arrays: list[np.ndarray], dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    t = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), t) + arrays[0].shape[1:], dtype=np.float64)
    mask = np.zeros((len(arrays), t), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = True
    return torch.as_tensor(out, dtype=dtype), torch.as_tensor(mask)


def collate(
    utts: list[Utterance],
    view: str = "lip",
    vocab: Vocabulary | None = None,
    with_audio: bool = False,
    audio: list[np.ndarray] | None = None,
    video: list[np.ndarray] | None = None,
) -> Batch:
    """Build a padded batch; ``audio``/``video`` override the stored features
    (used for noisy or augmented copies)."""
    frames = video if video is not None else [u.view(view) for u in utts]
    v, mask = pad_stack(frames)
    batch = Batch(video=v, mask=mask, utt_ids=[u.utt_id for u in utts])
    if with_audio:
        raw = audio if audio is not None else [u.audio for u in utts]
        stacked = [stack_audio_frames(a, AUDIO_STACK) for a in raw]
        a, amask = pad_stack(stacked)
        if not torch.equal(amask, mask):
            raise ValueError("audio and video lengths disagree after stacking")
        batch.audio = a
    if vocab is not None:
        batch.targets = [vocab.encode(u.transcript) for u in utts]
    return batch


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled index batches, reshuffled every epoch."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i : i + batch_size]

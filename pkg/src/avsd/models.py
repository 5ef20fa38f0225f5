"""Model topologies: the self-distillation student/teacher pair and the
CTC/attention lipreader built on the same encoder."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn

from avsd.frontends import AudioFrontend, Fusion, VisualFrontend
from avsd.layers import TransformerDecoder, TransformerEncoder
from avsd.rng import torch_seeded
# training runs in single precision; the gradient checks rebuild models in float64
MODEL_DTYPE = torch.float32


@dataclass
class ModelConfig:
    width: int = 64
    heads: int = 4
    ffn: int = 256
    blocks: int = 4
    frontend_dim: int = 64
    audio_in: int = 104
    conv_channels: tuple[int, int] = (16, 32)
    pos_kernel: int = 9
    pos_groups: int = 4
    dec_blocks: int = 2
    max_target_len: int = 64
    dropout: float = 0.1
    memory_positions: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "conv_channels" in known:
            known["conv_channels"] = tuple(known["conv_channels"])
        return cls(**known)


class AVEncoder(nn.Module):
    """Fusion layer plus Transformer stack: the part the teacher duplicates."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fusion = Fusion(cfg.frontend_dim, cfg.width)
        self.encoder = TransformerEncoder(cfg.width, cfg.heads, cfg.ffn, cfg.blocks, cfg.pos_kernel, cfg.pos_groups, cfg.dropout)

    def forward(self, f_a, f_v, mask=None, return_layers: bool = False):
        return self.encoder(self.fusion(f_a, f_v), mask, return_layers=return_layers)


class AV2vec(nn.Module):
    """Student (frontends, mask embeddings, encoder, regression head) and an
    EMA teacher encoder. Frontends exist once and serve both."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        with torch_seeded(seed):
            self.audio_fe = AudioFrontend(cfg.audio_in, cfg.frontend_dim)
            self.visual_fe = VisualFrontend(cfg.frontend_dim, cfg.conv_channels)
            self.student = AVEncoder(cfg)
            self.mask_emb_a = nn.Parameter(torch.empty(cfg.frontend_dim).uniform_())
            self.mask_emb_v = nn.Parameter(torch.empty(cfg.frontend_dim).uniform_())
            self.head = nn.Linear(cfg.width, cfg.width)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.to(MODEL_DTYPE)

    def student_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("teacher.")]

    def student_state(self) -> dict[str, torch.Tensor]:
        """Everything except the teacher, under lipreader-compatible names."""
        out = {}
        for name, t in self.state_dict().items():
            if name.startswith("teacher."):
                continue
            out[name.replace("student.", "", 1) if name.startswith("student.") else name] = t
        return out


class LipReader(nn.Module):
    """Video-only encoder (audio stream fed as zeros) with a CTC head and an
    attention decoder."""

    def __init__(self, num_classes: int, num_embeddings: int, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        with torch_seeded(seed):
            self.visual_fe = VisualFrontend(cfg.frontend_dim, cfg.conv_channels)
            enc = AVEncoder(cfg)
            self.fusion = enc.fusion
            self.encoder = enc.encoder
            self.ctc_head = nn.Linear(cfg.width, num_classes)
            self.decoder = TransformerDecoder(
                num_embeddings, num_classes, cfg.width, cfg.heads, cfg.ffn, cfg.dec_blocks, cfg.max_target_len, cfg.dropout, cfg.memory_positions
            )
        self.to(MODEL_DTYPE)

    ENCODER_PREFIXES = ("visual_fe.", "fusion.", "encoder.")

    def encoder_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith(self.ENCODER_PREFIXES)]

    def encode(self, video: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        f_v = self.visual_fe(video)
        f_a = torch.zeros_like(f_v)
        return self.encoder(self.fusion(f_a, f_v), mask)

    def ctc_log_probs(self, memory: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.ctc_head(memory), dim=-1)

    def decoder_log_probs(self, tokens, memory, memory_mask=None, target_mask=None) -> torch.Tensor:
        return torch.log_softmax(self.decoder(tokens, memory, memory_mask, target_mask), dim=-1)

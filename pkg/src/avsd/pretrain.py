"""Masked self-distillation pretraining with an EMA teacher."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from avsd import rng as rngs
from avsd.corpus import Utterance
from avsd.data import collate, minibatches
from avsd.frontends import add_noise, corrupt, draw_modality, make_span_mask
from avsd.models import AV2vec, ModelConfig
from avsd.schedules import lambda_schedule, tri_stage_lr
from avsd.tensor import instance_norm, stop_gradient

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    steps: int = 400
    batch_size: int = 16
    lr: float = 5e-4
    warmup: float = 0.03
    hold: float = 0.90
    final_lr_scale: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-6
    grad_clip: float = 10.0
    p_noise: float = 0.25
    snr_low: float = -5.0
    snr_high: float = 20.0
    p_m: float = 0.5
    p_a: float = 0.5
    audio_coverage: float = 0.8
    video_coverage: float = 0.3
    audio_span: int = 10
    video_span: int = 5
    target_layers: int = 3
    target_norm: str = "time"
    lambda_b: float = 0.999
    lambda_e: float = 0.9999
    ema_warmup: float = 0.075
    view: str = "lip"
    seed: int = 0

    def validate(self, blocks: int | None = None) -> None:
        for name in ("p_noise", "p_m", "p_a", "audio_coverage", "video_coverage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not self.lambda_b <= self.lambda_e <= 1.0:
            raise ValueError("need lambda_b <= lambda_e <= 1")
        if blocks is not None and not 1 <= self.target_layers <= blocks:
            raise ValueError(f"target_layers={self.target_layers} must be in [1, {blocks}]")
        if self.target_norm not in ("time", "channel"):
            raise ValueError("target_norm must be 'time' or 'channel'")


@dataclass
class EmaState:
    lambda_b: float
    lambda_e: float
    n_warmup: int
    step: int = 0

    def __post_init__(self):
        if not self.lambda_b <= self.lambda_e <= 1.0:
            raise ValueError("need lambda_b <= lambda_e <= 1")

    @property
    def decay(self) -> float:
        return lambda_schedule(self.step, self.lambda_b, self.lambda_e, self.n_warmup)


def ema_update(theta: torch.Tensor, phi: torch.Tensor, lam: float) -> torch.Tensor:
    if theta.shape != phi.shape:
        raise ValueError(f"shape mismatch: teacher {tuple(theta.shape)} vs student {tuple(phi.shape)}")
    return theta * lam + phi * (1.0 - lam)


@torch.no_grad()
def ema_update_module(teacher: torch.nn.Module, student: torch.nn.Module, lam: float) -> None:
    """EMA every teacher tensor towards its student counterpart.

    New values are computed for all tensors before any is written, so a
    reader never sees a mix of old and new parameters.
    """
    s_params = dict(student.named_parameters())
    t_params = dict(teacher.named_parameters())
    if s_params.keys() != t_params.keys():
        raise ValueError("teacher and student parameter names differ")
    new = {n: ema_update(t_params[n], s_params[n], lam) for n in t_params}
    for n, p in t_params.items():
        p.copy_(new[n])


def normalize_layer(h: torch.Tensor, mask: torch.Tensor | None, mode: str = "time") -> torch.Tensor:
    if mode == "time":
        return instance_norm(h, mask)
    out = torch.nn.functional.layer_norm(h, h.shape[-1:], eps=1e-5)
    return out if mask is None else out * mask.unsqueeze(-1).to(out.dtype)


def average_targets(layers: list[torch.Tensor], k: int, mask=None, mode: str = "time") -> torch.Tensor:
    """Normalize the last ``k`` layer outputs and average them."""
    if not 1 <= k <= len(layers):
        raise ValueError(f"k={k} must be in [1, {len(layers)}]")
    normed = [normalize_layer(h, mask, mode) for h in layers[-k:]]
    return stop_gradient(sum(normed) / k)


def teacher_targets(model: AV2vec, audio_clean, video, mask, k: int, mode: str = "time") -> torch.Tensor:
    """Targets from the teacher on clean audio and unmasked video."""
    if not 1 <= k <= len(model.teacher.encoder.blocks):
        raise ValueError(f"k={k} exceeds {len(model.teacher.encoder.blocks)} teacher blocks")
    model.teacher.eval()
    with torch.no_grad():
        f_a = model.audio_fe(audio_clean)
        f_v = model.visual_fe(video)
        _, layers = model.teacher(f_a, f_v, mask, return_layers=True)
        return average_targets(layers, k, mask, mode)


def reg_loss(x: torch.Tensor, y: torch.Tensor, masked: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Sum of squared errors over masked frames, and the masked-frame count."""
    err = ((x - y) ** 2).sum(dim=-1)
    return (err * masked.to(err.dtype)).sum(), int(masked.sum())


def student_forward(model: AV2vec, audio, video, valid, mask_a, mask_v, keep_a, keep_v):
    f_a = model.audio_fe(audio)
    f_v = model.visual_fe(video)
    f_a = corrupt(f_a, mask_a, model.mask_emb_a)
    f_v = corrupt(f_v, mask_v, model.mask_emb_v)
    f_a = f_a * keep_a[:, None, None]
    f_v = f_v * keep_v[:, None, None]
    out = model.student(f_a, f_v, valid)
    return model.head(out)


@dataclass
class StudentInputs:
    audio_noisy: list[np.ndarray]
    mask_a: torch.Tensor
    mask_v: torch.Tensor
    keep_a: torch.Tensor
    keep_v: torch.Tensor


def draw_student_inputs(utts: list[Utterance], cfg: PretrainConfig, rng: np.random.Generator, t_max: int) -> StudentInputs:
    """Noise, span masks and modality choices for one batch."""
    noisy, ma, mv, ka, kv = [], [], [], [], []
    for u in utts:
        snr = float(rng.uniform(cfg.snr_low, cfg.snr_high))
        noisy.append(add_noise(u.audio, cfg.p_noise, snr, rng))
        t = u.num_video_frames
        row_a = np.zeros(t_max, dtype=bool)
        row_v = np.zeros(t_max, dtype=bool)
        row_a[make_span_mask(t, cfg.audio_coverage, cfg.audio_span, rng)] = True
        row_v[make_span_mask(t, cfg.video_coverage, cfg.video_span, rng)] = True
        ma.append(row_a)
        mv.append(row_v)
        choice = draw_modality(cfg.p_m, cfg.p_a, rng)
        ka.append(0.0 if choice == "video" else 1.0)
        kv.append(0.0 if choice == "audio" else 1.0)
    return StudentInputs(
        noisy,
        torch.as_tensor(np.stack(ma)),
        torch.as_tensor(np.stack(mv)),
        torch.tensor(ka, dtype=torch.float32),
        torch.tensor(kv, dtype=torch.float32),
    )


def pretrain_step(model: AV2vec, utts: list[Utterance], ema: EmaState, cfg: PretrainConfig, rng: np.random.Generator, optimizer, lr: float | None = None) -> dict:
    """One student update followed by one teacher EMA update.

    Returns the raw masked sum of squared errors (``loss_raw``) and the
    per-masked-frame loss that was actually optimized (``loss``).
    """
    clean = collate(utts, cfg.view, with_audio=True)
    inputs = draw_student_inputs(utts, cfg, rng, clean.video.shape[1])
    noisy = collate(utts, cfg.view, with_audio=True, audio=inputs.audio_noisy)
    valid = clean.mask

    targets = teacher_targets(model, clean.audio, clean.video, valid, cfg.target_layers, cfg.target_norm)
    masked = (inputs.mask_a | inputs.mask_v) & valid
    x = student_forward(model, noisy.audio, clean.video, valid, inputs.mask_a, inputs.mask_v, inputs.keep_a, inputs.keep_v)
    raw, count = reg_loss(x, targets, masked)
    lam = ema.decay
    if count == 0:
        warnings.warn("empty mask union; pretraining step skipped", RuntimeWarning)
        return {"loss_raw": 0.0, "loss": 0.0, "masked": 0, "lambda": lam, "skipped": True}
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    loss = raw / count
    optimizer.zero_grad()
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.student_parameters(), cfg.grad_clip)
    optimizer.step()
    ema_update_module(model.teacher, model.student, lam)
    ema.step += 1
    return {"loss_raw": raw.item(), "loss": loss.item(), "masked": count, "lambda": lam, "skipped": False}


def make_optimizer(params, lr: float, betas, eps):
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas), eps=eps)


def pretrain(utts: list[Utterance], cfg: PretrainConfig, model_cfg: ModelConfig | None = None, log_rows: list | None = None) -> AV2vec:
    """Full pretraining loop. Appends ``(step, loss_raw, loss, lambda, lr)``
    rows to ``log_rows`` when given."""
    model_cfg = model_cfg or ModelConfig()
    cfg.validate(model_cfg.blocks)
    if not utts:
        raise ValueError("no pretraining utterances")
    model = AV2vec(model_cfg, seed=rngs.sub_seed(cfg.seed, "pretrain-init"))
    opt = make_optimizer(model.student_parameters(), cfg.lr, cfg.adam_betas, cfg.adam_eps)
    ema = EmaState(cfg.lambda_b, cfg.lambda_e, int(round(cfg.ema_warmup * cfg.steps)))
    order = minibatches(len(utts), cfg.batch_size, rngs.stream(cfg.seed, "pretrain-batches"))
    model.train()
    with rngs.torch_seeded(rngs.sub_seed(cfg.seed, "pretrain-dropout")):
        for step in range(cfg.steps):
            idx = next(order)
            lr = tri_stage_lr(step, cfg.lr, cfg.steps, cfg.warmup, cfg.hold, cfg.final_lr_scale)
            out = pretrain_step(model, [utts[i] for i in idx], ema, cfg, rngs.stream(cfg.seed, "pretrain-step", step), opt, lr)
            if log_rows is not None:
                log_rows.append((step, out["loss_raw"], out["loss"], out["lambda"], lr))
            if step % 50 == 0 or step == cfg.steps - 1:
                log.info("pretrain step %d loss %.4f lambda %.6f lr %.2e", step, out["loss"], out["lambda"], lr)
    model.eval()
    return model

"""Hybrid CTC/attention fine-tuning of the lipreader."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from avsd import rng as rngs
from avsd.checkpoint import Checkpoint, CheckpointError
from avsd.corpus import Utterance
from avsd.ctc import ctc_loss_batch
from avsd.data import Batch, collate, minibatches
from avsd.models import LipReader, ModelConfig
from avsd.schedules import warmup_decay_lr
from avsd.vocab import Vocabulary

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    steps: int = 400
    batch_size: int = 16
    lr: float = 1e-3
    warmup: float = 1 / 3
    final_lr_scale: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-6
    grad_clip: float = 10.0
    mu: float = 0.1
    freeze_fraction: float = 0.1
    transfer: bool = False
    view: str = "lip"
    seed: int = 0

    def validate(self) -> None:
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if not 0.0 <= self.freeze_fraction <= 1.0:
            raise ValueError("freeze_fraction must be in [0, 1]")
        if self.view not in ("lip", "face"):
            raise ValueError(f"view must be lip or face, got {self.view!r}")

    @property
    def freeze_steps(self) -> int:
        return 0 if self.transfer else int(round(self.freeze_fraction * self.steps))


def ce_loss(log_probs: torch.Tensor, targets) -> torch.Tensor:
    """Mean negative log-probability of ``targets`` under ``(N, V)`` log posteriors."""
    targets = torch.as_tensor(list(targets), dtype=torch.long)
    if targets.numel() == 0:
        raise ValueError("cross-entropy needs at least one target token")
    if targets.min() < 0 or targets.max() >= log_probs.shape[-1]:
        raise ValueError(f"target token outside vocabulary of size {log_probs.shape[-1]}")
    picked = log_probs[torch.arange(targets.numel()), targets]
    return -picked.mean()


def joint_loss(l_ce, l_ctc, mu: float):
    """``L_ce + mu * L_ctc``; an infeasible (infinite) CTC term is dropped."""
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    if not math.isfinite(float(torch.as_tensor(l_ctc).detach())):
        warnings.warn("CTC loss infeasible; using cross-entropy only", RuntimeWarning)
        return l_ce
    return l_ce + mu * l_ctc


def teacher_forcing(targets: list[list[int]], vocab: Vocabulary):
    """Decoder inputs ``[BOS, t...]``, outputs ``[t..., EOS]`` and a validity mask."""
    n = max(len(t) for t in targets) + 1
    inp = torch.full((len(targets), n), vocab.eos, dtype=torch.long)
    out = torch.full((len(targets), n), vocab.eos, dtype=torch.long)
    mask = torch.zeros((len(targets), n), dtype=torch.bool)
    for i, t in enumerate(targets):
        if not t:
            raise ValueError("empty transcript")
        inp[i, 0] = vocab.bos
        inp[i, 1 : len(t) + 1] = torch.tensor(t)
        out[i, : len(t)] = torch.tensor(t)
        mask[i, : len(t) + 1] = True
    return inp, out, mask


def ce_loss_batch(log_probs: torch.Tensor, out: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-utterance mean over target positions, then mean over the batch."""
    picked = torch.gather(log_probs, 2, out.unsqueeze(-1)).squeeze(-1)
    w = mask.to(picked.dtype)
    return (-(picked * w).sum(dim=1) / w.sum(dim=1)).mean()


def ctc_batch_mean(ctc_lp: torch.Tensor, batch: Batch, blank: int) -> tuple[torch.Tensor, int]:
    per_utt = ctc_loss_batch(ctc_lp, batch.lengths, batch.targets, blank)
    ok = torch.isfinite(per_utt)
    n_bad = int((~ok).sum())
    if n_bad:
        log.warning("%d utterance(s) too short for CTC; cross-entropy only", n_bad)
    if not ok.any():
        return torch.tensor(float("inf"), dtype=ctc_lp.dtype), n_bad
    return per_utt[ok].mean(), n_bad


def forward_losses(model: LipReader, batch: Batch, vocab: Vocabulary, mu: float) -> dict:
    memory = model.encode(batch.video, batch.mask)
    inp, out, tmask = teacher_forcing(batch.targets, vocab)
    dec_lp = model.decoder_log_probs(inp, memory, batch.mask, tmask)
    l_ce = ce_loss_batch(dec_lp, out, tmask)
    l_ctc, n_bad = ctc_batch_mean(model.ctc_log_probs(memory), batch, vocab.blank)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        l_si = joint_loss(l_ce, l_ctc, mu)
    return {"ce": l_ce, "ctc": l_ctc, "si": l_si, "dec_lp": dec_lp, "memory": memory, "ctc_infeasible": n_bad}


def new_lipreader(vocab: Vocabulary, model_cfg: ModelConfig | None, seed: int) -> LipReader:
    return LipReader(vocab.num_classes, vocab.embedding_size, model_cfg, seed=rngs.sub_seed(seed, "finetune-init"))


def init_from_pretrained(ckpt: Checkpoint, vocab: Vocabulary, model_cfg: ModelConfig | None = None, seed: int = 0) -> LipReader:
    """Fresh decoder and CTC head; encoder copied from the pretrained student."""
    ckpt.expect_stage("pretrain")
    model = new_lipreader(vocab, model_cfg or checkpoint_model_config(ckpt), seed)
    state = model.state_dict()
    wanted = [k for k in state if k.startswith(LipReader.ENCODER_PREFIXES)]
    missing = [k for k in wanted if k not in ckpt.tensors]
    if missing:
        raise CheckpointError(f"pretrained checkpoint lacks encoder tensors: {', '.join(missing)}")
    for k in wanted:
        src = ckpt.tensors[k]
        if tuple(src.shape) != tuple(state[k].shape):
            raise CheckpointError(f"shape mismatch for {k}: checkpoint {src.shape} vs model {tuple(state[k].shape)}")
        state[k] = torch.as_tensor(src, dtype=state[k].dtype)
    model.load_state_dict(state)
    return model


def checkpoint_model_config(ckpt: Checkpoint) -> ModelConfig:
    return ModelConfig.from_dict(ckpt.config.get("model", {}))


def load_lipreader(ckpt: Checkpoint, vocab: Vocabulary | None = None, model_cfg: ModelConfig | None = None) -> LipReader:
    """Rebuild a fine-tuned (si) or adapted (sd) lipreader. Vocabulary and
    topology default to what the checkpoint recorded."""
    ckpt.expect_stage("si", "sd")
    vocab = vocab or Vocabulary(ckpt.vocabulary)
    model = new_lipreader(vocab, model_cfg or checkpoint_model_config(ckpt), 0)
    state = model.state_dict()
    missing = [k for k in state if k not in ckpt.tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing)}")
    model.load_state_dict({k: torch.as_tensor(ckpt.tensors[k], dtype=v.dtype) for k, v in state.items()})
    return model


def set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def finetune(model: LipReader, utts: list[Utterance], vocab: Vocabulary, cfg: FinetuneConfig, freeze_steps: int | None = None, log_rows: list | None = None) -> LipReader:
    """Train in place. The encoder takes no updates for the first
    ``freeze_steps`` steps (default from ``cfg``)."""
    cfg.validate()
    if not utts:
        raise ValueError("no fine-tuning utterances")
    freeze = cfg.freeze_steps if freeze_steps is None else freeze_steps
    enc_params = model.encoder_parameters()
    enc_ids = {id(p) for p in enc_params}
    other = [p for p in model.parameters() if id(p) not in enc_ids]
    opt = torch.optim.Adam(
        [{"params": enc_params}, {"params": other}], lr=cfg.lr, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps
    )
    order = minibatches(len(utts), cfg.batch_size, rngs.stream(cfg.seed, "finetune-batches"))
    warm = int(round(cfg.warmup * cfg.steps))
    model.train()
    with rngs.torch_seeded(rngs.sub_seed(cfg.seed, "finetune-dropout")):
        _train_loop(model, utts, vocab, cfg, opt, order, warm, freeze, enc_params, log_rows)
    for p in enc_params:
        p.requires_grad_(True)
    model.eval()
    return model


def _train_loop(model, utts, vocab, cfg, opt, order, warm, freeze, enc_params, log_rows):
    for step in range(cfg.steps):
        idx = next(order)
        batch = collate([utts[i] for i in idx], cfg.view, vocab)
        frozen = step < freeze
        lr = warmup_decay_lr(step, cfg.lr, warm, cfg.steps - warm, cfg.final_lr_scale)
        set_lr(opt, lr)
        opt.param_groups[0]["lr"] = 0.0 if frozen else lr
        for p in enc_params:
            p.requires_grad_(not frozen)
        losses = forward_losses(model, batch, vocab, cfg.mu)
        opt.zero_grad(set_to_none=True)
        losses["si"].backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.grad is not None], cfg.grad_clip)
        opt.step()
        if log_rows is not None:
            log_rows.append((step, losses["ce"].item(), losses["ctc"].item(), losses["si"].item(), lr, frozen))
        if step % 50 == 0 or step == cfg.steps - 1:
            log.info("finetune step %d ce %.4f ctc %.4f frozen %s", step, losses["ce"].item(), losses["ctc"].item(), frozen)

"""Speaker adaptation with KL-divergence regularization.

The objective is the soft-label form

    (1 - rho) * CE(one-hot) + rho * CE(P_SI) + mu * L_ctc

which differs from ``(1 - rho) * CE + rho * KLD(P_SI || P_SD) + mu * L_ctc``
only by ``rho * H(P_SI)``, a constant in the adapted parameters.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import asdict, dataclass

import torch

from avsd import rng as rngs
from avsd.checkpoint import Checkpoint, tensors_digest
from avsd.corpus import Utterance
from avsd.data import collate
from avsd.finetune import (
    ce_loss,
    ce_loss_batch,
    checkpoint_model_config,
    ctc_batch_mean,
    joint_loss,
    load_lipreader,
    set_lr,
    teacher_forcing,
)
from avsd.models import LipReader
from avsd.schedules import warmup_decay_lr
from avsd.vocab import Vocabulary

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class AdaptConfig:
    speaker_id: str = ""
    rho: float = 0.1
    mu: float = 0.1
    lr: float = 1e-4
    warmup_steps: int = 20
    decay_steps: int = 80
    final_lr_scale: float = 0.05
    batch_size: int = 8
    eval_every: int = 10
    val_fraction: float = 0.2
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-6
    grad_clip: float = 10.0
    view: str = "lip"
    seed: int = 0

    def validate(self) -> None:
        check_rho(self.rho)
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.warmup_steps < 0 or self.decay_steps < 0:
            raise ValueError("step counts must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")

    @property
    def steps(self) -> int:
        return self.warmup_steps + self.decay_steps


def check_rho(rho: float) -> None:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")


def kld_loss(p_si, p_sd) -> torch.Tensor:
    """Mean over rows of ``KL(P_SI || P_SD)``.

    Rows of ``p_sd`` that put zero mass where ``p_si`` does not are floored
    at 1e-12 (with a warning) so the result stays finite.
    """
    p_si = torch.as_tensor(p_si).detach()
    p_sd = torch.as_tensor(p_sd)
    if p_si.shape != p_sd.shape:
        raise ValueError(f"shape mismatch {tuple(p_si.shape)} vs {tuple(p_sd.shape)}")
    if torch.any((p_sd.detach() <= 0) & (p_si > 0)):
        warnings.warn("P_SD has zero mass where P_SI does not; clamping at 1e-12", RuntimeWarning)
        p_sd = p_sd.clamp_min(PROB_FLOOR)
    terms = torch.xlogy(p_si, p_si) - p_si * torch.log(p_sd)
    return terms.sum(dim=-1).mean()


def adapt_loss(log_probs_sd: torch.Tensor, p_si, targets, rho: float, mu: float, l_ctc=0.0) -> torch.Tensor:
    """Soft-label adaptation loss for one ``(N, V)`` decoder output.

    With ``rho == 0`` this is exactly ``joint_loss(ce_loss(...), l_ctc, mu)``.
    """
    check_rho(rho)
    ce = ce_loss(log_probs_sd, targets)
    if rho == 0.0:
        return joint_loss(ce, l_ctc, mu)
    p_si = torch.as_tensor(p_si, dtype=log_probs_sd.dtype).detach()
    soft = -(p_si * log_probs_sd).sum(dim=-1).mean()
    return joint_loss((1.0 - rho) * ce + rho * soft, l_ctc, mu)


def soft_ce_batch(log_probs: torch.Tensor, p_si: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Batched soft cross-entropy, averaged like :func:`ce_loss_batch`."""
    per_pos = -(p_si.detach() * log_probs).sum(dim=-1)
    w = mask.to(per_pos.dtype)
    return ((per_pos * w).sum(dim=1) / w.sum(dim=1)).mean()


def adapt_losses(sd: LipReader, si: LipReader, batch, vocab: Vocabulary, rho: float, mu: float) -> dict:
    check_rho(rho)
    inp, out, tmask = teacher_forcing(batch.targets, vocab)
    memory = sd.encode(batch.video, batch.mask)
    dec_lp = sd.decoder_log_probs(inp, memory, batch.mask, tmask)
    ce = ce_loss_batch(dec_lp, out, tmask)
    l_ctc, _ = ctc_batch_mean(sd.ctc_log_probs(memory), batch, vocab.blank)
    if rho == 0.0:
        target_term = ce
    else:
        with torch.no_grad():
            p_si = si.decoder_log_probs(inp, si.encode(batch.video, batch.mask), batch.mask, tmask).exp()
        target_term = (1.0 - rho) * ce + rho * soft_ce_batch(dec_lp, p_si, tmask)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        total = joint_loss(target_term, l_ctc, mu)
    return {"loss": total, "ce": ce, "ctc": l_ctc}


def split_utterances(utts: list[Utterance], val_fraction: float, seed: int) -> tuple[list[Utterance], list[Utterance]]:
    """Seeded random train/validation split (8:2 by default)."""
    order = rngs.stream(seed, "adapt-split").permutation(len(utts))
    n_val = int(round(val_fraction * len(utts)))
    n_val = min(max(n_val, 1), len(utts) - 1) if len(utts) > 1 else 0
    val = [utts[i] for i in sorted(order[:n_val])]
    train = [utts[i] for i in sorted(order[n_val:])]
    return train, val


@torch.no_grad()
def validation_loss(sd: LipReader, si: LipReader, utts: list[Utterance], vocab: Vocabulary, cfg: AdaptConfig) -> float:
    was_training = sd.training
    sd.eval()
    total, count = 0.0, 0
    for i in range(0, len(utts), cfg.batch_size):
        chunk = utts[i : i + cfg.batch_size]
        batch = collate(chunk, cfg.view, vocab)
        total += float(adapt_losses(sd, si, batch, vocab, cfg.rho, cfg.mu)["loss"]) * len(chunk)
        count += len(chunk)
    sd.train(was_training)
    return total / count


def _speaker_of(utts: list[Utterance], wanted: str) -> str:
    speakers = sorted({u.speaker_id for u in utts})
    if wanted:
        stray = [s for s in speakers if s != wanted]
        if stray:
            raise ValueError(f"utterances from other speakers than {wanted!r}: {stray}")
        return wanted
    if len(speakers) != 1:
        raise ValueError(f"adaptation data must come from one speaker, got {speakers}")
    return speakers[0]


def adapt(si_ckpt: Checkpoint, utts: list[Utterance], cfg: AdaptConfig, log_rows: list | None = None) -> Checkpoint:
    """Adapt a speaker-independent checkpoint to one speaker.

    The returned checkpoint holds the parameters with the lowest validation
    loss seen (the unadapted start included) and records the speaker id and
    the digest of its parent.
    """
    si_ckpt.expect_stage("si")
    cfg.validate()
    if not utts:
        raise ValueError("no adaptation utterances for the target speaker")
    speaker = _speaker_of(utts, cfg.speaker_id)
    vocab = Vocabulary(si_ckpt.vocabulary)
    si = load_lipreader(si_ckpt, vocab).eval()
    for p in si.parameters():
        p.requires_grad_(False)
    sd = load_lipreader(si_ckpt, vocab)

    train, val = split_utterances(utts, cfg.val_fraction, cfg.seed)
    if not val:
        log.warning("a single adaptation utterance; validating on the training data")
        val = train
    best_loss = start_loss = validation_loss(sd, si, val, vocab, cfg)
    best_state, best_step = copy.deepcopy(sd.state_dict()), 0
    log.info("speaker %s: %d train / %d val utterances, start val loss %.4f", speaker, len(train), len(val), start_loss)

    opt = torch.optim.Adam(sd.parameters(), lr=cfg.lr, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)
    order = rngs.stream(cfg.seed, "adapt-batches")
    sd.train()
    with rngs.torch_seeded(rngs.sub_seed(cfg.seed, "adapt-dropout")):
        for step in range(cfg.steps):
            idx = order.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False)
            batch = collate([train[i] for i in sorted(idx)], cfg.view, vocab)
            lr = warmup_decay_lr(step, cfg.lr, cfg.warmup_steps, cfg.decay_steps, cfg.final_lr_scale)
            set_lr(opt, lr)
            losses = adapt_losses(sd, si, batch, vocab, cfg.rho, cfg.mu)
            opt.zero_grad(set_to_none=True)
            losses["loss"].backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(sd.parameters(), cfg.grad_clip)
            opt.step()
            val_loss = None
            if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
                val_loss = validation_loss(sd, si, val, vocab, cfg)
                if val_loss < best_loss:
                    best_loss, best_state, best_step = val_loss, copy.deepcopy(sd.state_dict()), step + 1
            if log_rows is not None:
                log_rows.append((step, losses["loss"].item(), lr, val_loss))
    log.info("speaker %s: best val loss %.4f at step %d", speaker, best_loss, best_step)

    config = dict(si_ckpt.config)
    config["adapt"] = asdict(cfg)
    config["model"] = asdict(checkpoint_model_config(si_ckpt))
    return Checkpoint.from_module(
        "sd",
        best_state,
        config=config,
        vocabulary=si_ckpt.vocabulary,
        speaker_id=speaker,
        meta={
            "parent_si_digest": tensors_digest(si_ckpt.tensors),
            "best_step": best_step,
            "val_loss_start": start_loss,
            "val_loss_best": best_loss,
            "num_train": len(train),
            "num_val": len(val),
        },
    )


def sd_filename(speaker_id: str) -> str:
    return f"sd_{speaker_id}.ckpt"

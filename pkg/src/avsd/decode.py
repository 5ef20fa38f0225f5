"""Joint CTC/attention beam search over an ensemble of lipreaders.

Every candidate extension ``c`` of a prefix ``g`` is scored with

    log[(1 - alpha) * mean_i P_att_i(c | g) + alpha * mean_i P_ctc_i(c | g)]

where ``P_ctc_i(c | g)`` is the ratio of CTC prefix probabilities
``psi(g c) / psi(g)`` (``p(g) / psi(g)`` for EOS). Both terms are averaged
across models in the probability domain; hypothesis scores accumulate the
logs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch

from avsd.corpus import Utterance
from avsd.ctc import CTCPrefixScorer, CTCState
from avsd.data import pad_stack
from avsd.models import LipReader
from avsd.vocab import Vocabulary

log = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    alpha: float = 0.1
    beam: int = 8
    max_len: int = 0
    weights: list[float] | None = None

    def validate(self, num_models: int) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if num_models < 1:
            raise ValueError("need at least one model")
        if self.weights is not None and len(self.weights) != num_models:
            raise ValueError(f"{len(self.weights)} weights for {num_models} models")


class PreparedModel(Protocol):
    """One model's view of one utterance, encoded once."""

    ctc_log_probs: np.ndarray  # (T, labels + blank)

    def next_log_probs(self, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Decoder log-probabilities over labels + EOS for each prefix."""


class Decodable(Protocol):
    num_labels: int
    blank: int

    def prepare(self, utt: Utterance) -> PreparedModel: ...


@dataclass
class _Prepared:
    model: LipReader
    memory: torch.Tensor
    ctc_log_probs: np.ndarray
    bos: int

    @torch.no_grad()
    def next_log_probs(self, prefixes):
        n = max(len(p) for p in prefixes) + 1
        tokens = torch.full((len(prefixes), n), self.bos, dtype=torch.long)
        for i, p in enumerate(prefixes):
            tokens[i, 1 : len(p) + 1] = torch.as_tensor(list(p), dtype=torch.long)
        last = torch.tensor([len(p) for p in prefixes])
        mem = self.memory.expand(len(prefixes), -1, -1)
        lp = self.model.decoder_log_probs(tokens, mem)
        return lp[torch.arange(len(prefixes)), last].numpy()


class LipReaderDecoder:
    """Adapter exposing a trained lipreader on one input view to the search."""

    def __init__(self, model: LipReader, view: str, vocab: Vocabulary, name: str = ""):
        self.model = model.eval()
        self.view = view
        self.vocab = vocab
        self.num_labels = len(vocab)
        self.blank = vocab.blank
        self.name = name or view

    @torch.no_grad()
    def prepare(self, utt: Utterance) -> _Prepared:
        video, mask = pad_stack([utt.view(self.view)])
        memory = self.model.encode(video, mask)
        ctc = self.model.ctc_log_probs(memory)[0].numpy()
        return _Prepared(self.model, memory, ctc, self.vocab.bos)


def ensemble_next_token(dists: np.ndarray, weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted (default equal) mean of per-model next-token distributions."""
    dists = np.asarray(dists, dtype=np.float64)
    if dists.ndim == 1:
        dists = dists[None, :]
    sums = dists.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError(f"rows must be probability distributions, sums {sums}")
    w = np.full(len(dists), 1.0 / len(dists)) if weights is None else np.asarray(weights, dtype=np.float64)
    return w @ dists


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    ctc_states: list[CTCState] = field(default_factory=list, repr=False)
    finished: bool = False


@dataclass
class DecodeResult:
    tokens: list[int]
    score: float
    finished: bool
    warnings: list[str] = field(default_factory=list)


def _model_weights(cfg: DecodeConfig, m: int) -> np.ndarray:
    if cfg.weights is None:
        return np.full(m, 1.0 / m)
    w = np.asarray(cfg.weights, dtype=np.float64)
    return w / w.sum()


def step_scores(prepared: Sequence[PreparedModel], scorers: Sequence[CTCPrefixScorer], hyps: Sequence[Hypothesis], num_labels: int, alpha: float, weights: np.ndarray):
    """Log mixture probabilities ``(K, labels + 1)`` for extending each
    hypothesis, and the CTC forward variables for each label extension."""
    k = len(hyps)
    att = np.zeros((k, num_labels + 1))
    ctc = np.zeros((k, num_labels + 1))
    ext = []
    prefixes = [h.tokens for h in hyps]
    for mi, (w, prep, scorer) in enumerate(zip(weights, prepared, scorers)):
        att += w * np.exp(prep.next_log_probs(prefixes))
        per_hyp = []
        for hi, h in enumerate(hyps):
            probs, log_psi, r_n, r_b = scorer.next_token_probs(h.ctc_states[mi], num_labels)
            ctc[hi] += w * probs
            per_hyp.append((log_psi, r_n, r_b))
        ext.append(per_hyp)
    mix = (1.0 - alpha) * att + alpha * ctc
    with np.errstate(divide="ignore"):
        return np.log(mix), ext


def beam_search(models: Sequence[Decodable], utt: Utterance, cfg: DecodeConfig) -> DecodeResult:
    cfg.validate(len(models))
    prepared = [m.prepare(utt) for m in models]
    num_labels = models[0].num_labels
    if any(m.num_labels != num_labels for m in models):
        raise ValueError("ensemble members disagree on the vocabulary")
    eos = num_labels
    scorers = [CTCPrefixScorer(p.ctc_log_probs, m.blank) for p, m in zip(prepared, models)]
    weights = _model_weights(cfg, len(models))
    t = prepared[0].ctc_log_probs.shape[0]
    max_len = cfg.max_len if cfg.max_len > 0 else t

    live = [Hypothesis((), 0.0, [s.initial_state() for s in scorers])]
    finished: list[Hypothesis] = []
    last_live: list[Hypothesis] = live
    for _ in range(max_len + 1):
        logmix, ext = step_scores(prepared, scorers, live, num_labels, cfg.alpha, weights)
        cands = []
        for hi, h in enumerate(live):
            allowed = [eos] if len(h.tokens) >= max_len else range(num_labels + 1)
            for c in allowed:
                s = h.score + logmix[hi, c]
                if s > -math.inf:
                    cands.append((s, hi, c))
        cands.sort(key=lambda x: (-x[0], x[1], x[2]))
        new_live = []
        for s, hi, c in cands[: cfg.beam]:
            h = live[hi]
            if c == eos:
                finished.append(Hypothesis(h.tokens, s, h.ctc_states, True))
                continue
            states = []
            for mi in range(len(scorers)):
                log_psi, r_n, r_b = ext[mi][hi]
                states.append(CTCState(r_n[:, c], r_b[:, c], c, float(log_psi[c])))
            new_live.append(Hypothesis(h.tokens + (c,), s, states))
        if new_live:
            last_live = new_live
        live = new_live
        if not live:
            break
        if finished and max(f.score for f in finished) >= max(h.score for h in live):
            break

    if finished:
        best = max(finished, key=lambda h: (h.score, [-x for x in h.tokens]))
        return DecodeResult(list(best.tokens), best.score, True)
    best = max(last_live, key=lambda h: h.score)
    log.warning("no finished hypothesis for %s within %d tokens", utt.utt_id, max_len)
    return DecodeResult(list(best.tokens), best.score, False, ["unfinished"])

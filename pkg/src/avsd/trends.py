"""Desk-scale experiment protocol on the synthetic corpus.

Each function trains the systems it compares from scratch for one seed
and returns their CERs. Speaker ranges never overlap: labeled and
unlabeled target speakers start at 0, validation at 50, adaptation at 100,
source-language speakers at 200.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

from avsd.adapt import AdaptConfig, adapt
from avsd.checkpoint import Checkpoint
from avsd.corpus import CorpusSpec, Utterance, generate
from avsd.decode import DecodeConfig, LipReaderDecoder, beam_search
from avsd.finetune import FinetuneConfig, finetune, init_from_pretrained, load_lipreader, new_lipreader
from avsd.metrics import UttScore, cer, score_utterance
from avsd.models import LipReader, ModelConfig
from avsd.pretrain import PretrainConfig, pretrain
from avsd.vocab import Vocabulary

log = logging.getLogger(__name__)


@dataclass
class Protocol:
    seed: int = 0
    labeled_speakers: int = 16
    labeled_utts: int = 10
    unlabeled_speakers: int = 48
    unlabeled_utts: int = 20
    val_speakers: int = 8
    val_utts: int = 10
    adapt_speakers: int = 2
    adapt_utts: int = 30
    adapt_test_utts: int = 20
    low_resource_fraction: float = 0.1
    occlusion_prob: float = 0.5
    pretrain_steps: int = 1500
    finetune_steps: int = 600
    low_resource_steps: int = 300
    adapt_lr: float = 3e-4
    adapt_warmup: int = 20
    adapt_decay: int = 80
    rho: float = 0.1
    beam: int = 8
    model: ModelConfig = field(default_factory=ModelConfig)

    def corpus(self, **kw) -> CorpusSpec:
        return CorpusSpec(seed=self.seed, **kw)


def evaluate(models: list[LipReader], views: list[str], utts: list[Utterance], vocab: Vocabulary, beam: int = 8) -> tuple[float, list[UttScore]]:
    decoders = [LipReaderDecoder(m, v, vocab) for m, v in zip(models, views)]
    cfg = DecodeConfig(beam=beam)
    scores = []
    for u in utts:
        res = beam_search(decoders, u, cfg)
        scores.append(score_utterance(u.utt_id, u.transcript, vocab.decode(res.tokens), u.speaker_id))
    return cer(scores), scores


class _Timer:
    def __init__(self, label: str):
        self.label = label

    def __enter__(self):
        self.t = time.perf_counter()

    def __exit__(self, *exc):
        log.info("%s took %.1fs", self.label, time.perf_counter() - self.t)


def _ft_cfg(p: Protocol, steps: int, **kw) -> FinetuneConfig:
    return FinetuneConfig(steps=steps, seed=p.seed, **kw)


def _pretrained(p: Protocol, utts: list[Utterance]) -> Checkpoint:
    model = pretrain(utts, PretrainConfig(steps=p.pretrain_steps, seed=p.seed), p.model)
    return Checkpoint.from_module("pretrain", model.student_state(), config={"model": vars(p.model)})


def ssl_vs_scratch(p: Protocol, vocab: Vocabulary, labeled, unlabeled, val) -> dict:
    """Pretrain+finetune against scratch supervised training on the same labels."""
    with _Timer("scratch finetune"):
        scratch = finetune(new_lipreader(vocab, p.model, p.seed), labeled, vocab, _ft_cfg(p, p.finetune_steps), freeze_steps=0)
    with _Timer("pretrain"):
        ckpt = _pretrained(p, unlabeled)
    with _Timer("ssl finetune"):
        ssl = finetune(init_from_pretrained(ckpt, vocab, p.model, p.seed), labeled, vocab, _ft_cfg(p, p.finetune_steps))
    return {
        "scratch": evaluate([scratch], ["lip"], val, vocab, p.beam)[0],
        "ssl": evaluate([ssl], ["lip"], val, vocab, p.beam)[0],
        "_ssl_model": ssl,
        "_scratch_model": scratch,
    }


def low_resource_split(p: Protocol) -> list[Utterance]:
    """The target-language pool (unlabeled speakers) cut to a fraction of
    each speaker's utterances, transcripts included."""
    per_speaker = max(1, int(round(p.low_resource_fraction * p.unlabeled_utts)))
    return generate(p.corpus(num_speakers=p.unlabeled_speakers, utterances_per_speaker=per_speaker))


def transfer_vs_scratch(p: Protocol, vocab: Vocabulary, val) -> dict:
    """Low-resource target training: source-language pretraining vs scratch."""
    few = low_resource_split(p)
    n = len(few)
    source = generate(p.corpus(lang="source", num_speakers=p.unlabeled_speakers, utterances_per_speaker=p.unlabeled_utts, first_speaker=200))
    with _Timer("source pretrain"):
        ckpt = _pretrained(p, source)
    with _Timer("low-resource finetunes"):
        scratch = finetune(new_lipreader(vocab, p.model, p.seed), few, vocab, _ft_cfg(p, p.low_resource_steps), freeze_steps=0)
        transfer = finetune(init_from_pretrained(ckpt, vocab, p.model, p.seed), few, vocab, _ft_cfg(p, p.low_resource_steps, transfer=True))
    return {
        "num_utts": n,
        "scratch": evaluate([scratch], ["lip"], val, vocab, p.beam)[0],
        "transfer": evaluate([transfer], ["lip"], val, vocab, p.beam)[0],
    }


def adaptation(p: Protocol, vocab: Vocabulary, si_model: LipReader) -> dict:
    """SI vs KLD-regularized SD vs plain-CE SD, per held-out speaker split."""
    si_ckpt = Checkpoint.from_module("si", si_model.state_dict(), config={"model": vars(p.model)}, vocabulary=vocab.symbols)
    si = load_lipreader(si_ckpt, vocab)
    out = {}
    for s in range(100, 100 + p.adapt_speakers):
        data = generate(p.corpus(num_speakers=1, first_speaker=s, utterances_per_speaker=p.adapt_utts))
        test = generate(p.corpus(num_speakers=1, first_speaker=s, utterances_per_speaker=p.adapt_test_utts, first_utterance=p.adapt_utts))
        row = {"si": evaluate([si], ["lip"], test, vocab, p.beam)[0]}
        for name, rho in (("kld", p.rho), ("ce", 0.0)):
            cfg = AdaptConfig(rho=rho, lr=p.adapt_lr, warmup_steps=p.adapt_warmup, decay_steps=p.adapt_decay, seed=p.seed)
            sd = load_lipreader(adapt(si_ckpt, data, cfg), vocab)
            row[name] = evaluate([sd], ["lip"], test, vocab, p.beam)[0]
        out[data[0].speaker_id] = row
    return out


def ensemble_occlusion(p: Protocol, vocab: Vocabulary, lip: LipReader | None = None) -> dict:
    """Lip model, face model and their two-model ensemble on an occluded corpus.

    The occluder only touches face frames, so a scratch lip model trained on
    the unoccluded labeled split is the same model and may be passed in.
    """
    spec = dict(occlusion_prob=p.occlusion_prob)
    train = generate(p.corpus(num_speakers=p.labeled_speakers, utterances_per_speaker=p.labeled_utts, **spec))
    val = generate(p.corpus(num_speakers=p.val_speakers, utterances_per_speaker=p.val_utts, first_speaker=50, **spec))
    with _Timer("lip/face finetunes"):
        if lip is None:
            lip = finetune(new_lipreader(vocab, p.model, p.seed), train, vocab, _ft_cfg(p, p.finetune_steps, view="lip"), freeze_steps=0)
        face = finetune(new_lipreader(vocab, p.model, p.seed), train, vocab, _ft_cfg(p, p.finetune_steps, view="face"), freeze_steps=0)
    return {
        "lip": evaluate([lip], ["lip"], val, vocab, p.beam)[0],
        "face": evaluate([face], ["face"], val, vocab, p.beam)[0],
        "ensemble": evaluate([lip, face], ["lip", "face"], val, vocab, p.beam)[0],
    }


def run_all(p: Protocol) -> dict:
    vocab = Vocabulary()
    labeled = generate(p.corpus(num_speakers=p.labeled_speakers, utterances_per_speaker=p.labeled_utts))
    unlabeled = generate(p.corpus(num_speakers=p.unlabeled_speakers, utterances_per_speaker=p.unlabeled_utts))
    val = generate(p.corpus(num_speakers=p.val_speakers, utterances_per_speaker=p.val_utts, first_speaker=50))
    res = {"ssl": ssl_vs_scratch(p, vocab, labeled, unlabeled, val)}
    scratch = res["ssl"].pop("_scratch_model")
    res["adapt"] = adaptation(p, vocab, res["ssl"].pop("_ssl_model"))
    res["transfer"] = transfer_vs_scratch(p, vocab, val)
    res["ensemble"] = ensemble_occlusion(p, vocab, lip=scratch)
    return res


def with_seed(p: Protocol, seed: int) -> Protocol:
    return replace(p, seed=seed)

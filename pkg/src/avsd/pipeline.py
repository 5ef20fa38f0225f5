"""File-level stages behind the command line: each reads artifacts from
disk, runs one phase and writes its outputs plus a run-metadata record."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from dataclasses import asdict
from pathlib import Path

import torch

from avsd import __version__
from avsd.adapt import adapt, sd_filename
from avsd.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from avsd.config import RunConfig
from avsd.corpus import generate_corpus, load_corpus
from avsd.decode import LipReaderDecoder, beam_search
from avsd.finetune import finetune, init_from_pretrained, load_lipreader, new_lipreader
from avsd.metrics import score_utterance, speaker_report, write_report
from avsd.pretrain import pretrain
from avsd.vocab import Vocabulary

log = logging.getLogger(__name__)

PRETRAIN_LOG = ["step", "L_reg", "lambda", "lr"]
FINETUNE_LOG = ["step", "L_ce", "L_ctc", "L_si", "lr", "frozen"]


def git_blob_hash(path: str | Path) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def input_hashes(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            manifest = p / "manifest.jsonl"
            out[str(p)] = _tree_hash(p) if not manifest.exists() else _corpus_hash(p)
        else:
            out[str(p)] = git_blob_hash(p)
    return out


def _corpus_hash(root: Path) -> str:
    h = hashlib.sha1()
    h.update(git_blob_hash(root / "manifest.jsonl").encode())
    for row in _manifest_rows(root):
        for key in ("audio_path", "lip_path", "face_path"):
            h.update(git_blob_hash(root / row[key]).encode())
    return h.hexdigest()


def _tree_hash(root: Path) -> str:
    h = hashlib.sha1()
    for f in sorted(root.rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(root)).encode())
            h.update(git_blob_hash(f).encode())
    return h.hexdigest()


def _manifest_rows(root: Path) -> list[dict]:
    with open(root / "manifest.jsonl") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_metadata(out_path: str | Path, command: str, run: RunConfig, seed: int, inputs, outputs, extra: dict | None = None) -> Path:
    """``<output>.meta.json`` next to the primary output."""
    meta = {
        "command": command,
        "seed": seed,
        "config_digest": run.digest,
        "inputs": input_hashes(inputs),
        "outputs": [str(o) for o in outputs],
        "avsd_version": __version__,
        "torch_version": torch.__version__,
        "python": platform.python_version(),
    }
    meta.update(extra or {})
    path = Path(str(out_path) + ".meta.json")
    path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def _write_csv(path: str | Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _corpus(path: str | Path):
    p = Path(path)
    utts = load_corpus(p / "manifest.jsonl" if p.is_dir() else p)
    if not utts:
        raise ValueError(f"corpus {path} is empty")
    return utts


def gen_corpus_stage(run: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    generate_corpus(run.corpus, out)
    write_metadata(out / "manifest.jsonl", "gen-corpus", run, run.corpus.seed, [], [out / "manifest.jsonl"])
    return out


def pretrain_stage(run: RunConfig, corpus: str | Path, out: str | Path, log_csv: str | Path | None = None) -> Checkpoint:
    rows: list = []
    model = pretrain(_corpus(corpus), run.pretrain, run.model, rows)
    # only the student is kept; the teacher is not needed downstream
    ckpt = Checkpoint.from_module("pretrain", model.student_state(), config=run.to_dict(), vocabulary=Vocabulary().symbols)
    save_checkpoint(ckpt, out)
    log_csv = log_csv or Path(str(out) + ".log.csv")
    _write_csv(log_csv, PRETRAIN_LOG, [(s, raw, lam, lr) for s, raw, _, lam, lr in rows])
    write_metadata(out, "pretrain", run, run.pretrain.seed, [corpus], [out, log_csv])
    return ckpt


def finetune_stage(run: RunConfig, corpus: str | Path, out: str | Path, init: str | Path | None = None, log_csv: str | Path | None = None) -> Checkpoint:
    """Scratch training, or initialization from a pretrained student. With
    ``finetune.transfer`` the encoder is never frozen."""
    cfg = run.finetune
    vocab = Vocabulary()
    inputs = [corpus]
    if init is not None:
        model = init_from_pretrained(load_checkpoint(init), vocab, run.model, cfg.seed)
        freeze = cfg.freeze_steps
        inputs.append(init)
    else:
        model = new_lipreader(vocab, run.model, cfg.seed)
        freeze = 0
    rows: list = []
    finetune(model, _corpus(corpus), vocab, cfg, freeze_steps=freeze, log_rows=rows)
    ckpt = Checkpoint.from_module("si", model.state_dict(), config=run.to_dict(), vocabulary=vocab.symbols, meta={"freeze_steps": freeze, "view": cfg.view})
    save_checkpoint(ckpt, out)
    log_csv = log_csv or Path(str(out) + ".log.csv")
    _write_csv(log_csv, FINETUNE_LOG, [(s, ce, ctc, si, lr, int(fr)) for s, ce, ctc, si, lr, fr in rows])
    write_metadata(out, "finetune", run, cfg.seed, inputs, [out, log_csv], {"freeze_steps": freeze, "transfer": cfg.transfer})
    return ckpt


def adapt_stage(run: RunConfig, corpus: str | Path, si_path: str | Path, speaker: str, out_dir: str | Path) -> Path:
    si_ckpt = load_checkpoint(si_path).expect_stage("si")
    utts = [u for u in _corpus(corpus) if u.speaker_id == speaker]
    if not utts:
        raise ValueError(f"speaker {speaker!r} has no utterances in {corpus}")
    cfg = run.adapt
    cfg.speaker_id = speaker
    rows: list = []
    sd = adapt(si_ckpt, utts, cfg, rows)
    sd.config = run.to_dict()
    out = Path(out_dir) / sd_filename(speaker)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(sd, out)
    log_csv = Path(str(out) + ".log.csv")
    _write_csv(log_csv, ["step", "L_sa", "lr", "val_loss"], [(s, l, lr, "" if v is None else v) for s, l, lr, v in rows])
    write_metadata(out, "adapt", run, cfg.seed, [corpus, si_path], [out, log_csv], {"speaker_id": speaker, **sd.meta})
    return out


def decode_stage(run: RunConfig, corpus: str | Path, model_paths: list[str], views: list[str], out: str | Path) -> list[dict]:
    if len(views) == 1 and len(model_paths) > 1:
        views = views * len(model_paths)
    if len(views) != len(model_paths):
        raise ValueError(f"{len(model_paths)} models but {len(views)} views")
    decoders = []
    for path, view in zip(model_paths, views):
        if view not in ("lip", "face"):
            raise ValueError(f"view must be lip or face, got {view!r}")
        ckpt = load_checkpoint(path).expect_stage("si", "sd")
        decoders.append(LipReaderDecoder(load_lipreader(ckpt), view, Vocabulary(ckpt.vocabulary), name=Path(path).name))
    vocab = decoders[0].vocab
    if any(d.vocab != vocab for d in decoders):
        raise ValueError("ensemble members use different vocabularies")
    used = [f"{d.name}:{d.view}" for d in decoders]
    records = []
    with open(out, "w") as f:
        for utt in _corpus(corpus):
            res = beam_search(decoders, utt, run.decode)
            rec = {
                "utt_id": utt.utt_id,
                "hypothesis": vocab.decode(res.tokens),
                "score": res.score,
                "models_used": used,
                "warnings": res.warnings,
            }
            records.append(rec)
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    write_metadata(out, "decode", run, 0, [corpus, *model_paths], [out], {"decode": asdict(run.decode)})
    return records


def score_stage(run: RunConfig, corpus: str | Path, hyps: str | Path, out: str | Path) -> list[dict]:
    refs = {u.utt_id: u for u in _corpus(corpus)}
    with open(hyps) as f:
        decoded = [json.loads(line) for line in f if line.strip()]
    scores = []
    for rec in decoded:
        utt = refs.get(rec["utt_id"])
        if utt is None:
            raise ValueError(f"hypothesis for unknown utterance {rec['utt_id']!r}")
        scores.append(score_utterance(utt.utt_id, utt.transcript, rec["hypothesis"], utt.speaker_id))
    missing = len(refs) - len({s.utt_id for s in scores})
    if missing:
        log.warning("%d reference utterance(s) have no hypothesis", missing)
    rows = speaker_report(scores, run.score.bootstrap, run.score.level, run.score.seed)
    write_report(rows, out)
    write_metadata(out, "score", run, run.score.seed, [corpus, hyps], [out])
    return rows

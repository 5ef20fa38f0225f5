"""Synthetic audio-visual corpus.

A *world* (fixed by the master seed) owns a pool of phone templates and the
speaker population. Each template has an audio embedding, a mouth shape
(shared by the two members of a viseme pair), a subtle tongue cue and a jaw
cue that is visible only outside the lip crop. Languages draw their phone
inventories from the pool; the source language shares a configurable
fraction of templates with the target language.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from avsd import avtn, rng
from avsd.vocab import DEFAULT_SYMBOLS, Vocabulary

log = logging.getLogger(__name__)

POOL_SIZE = len(DEFAULT_SYMBOLS)
AUDIO_STACK = 4
LANGS = ("source", "target")


@dataclass
class CorpusSpec:
    num_speakers: int = 8
    utterances_per_speaker: int = 10
    num_phones: int = 20
    lang: str = "target"
    overlap: float = 0.5
    lip_size: int = 16
    face_size: int = 24
    audio_dim: int = 26
    occlusion_prob: float = 0.0
    snr_range: tuple[float, float] = (-5.0, 20.0)
    seed: int = 0
    first_speaker: int = 0
    first_utterance: int = 0
    min_phones: int = 3
    max_phones: int = 7
    min_duration: int = 2
    max_duration: int = 4
    audio_noise: float = 0.6
    video_noise: float = 0.2
    speaker_quirk: float = 0.25

    def validate(self) -> None:
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError(f"occlusion_prob must be in [0, 1], got {self.occlusion_prob}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap must be in [0, 1], got {self.overlap}")
        if self.num_phones < 2:
            raise ValueError("num_phones must be >= 2")
        if self.lang not in LANGS:
            raise ValueError(f"lang must be one of {LANGS}, got {self.lang!r}")
        shared = round(self.overlap * self.num_phones)
        if 2 * self.num_phones - shared > POOL_SIZE:
            raise ValueError(
                f"{self.num_phones} phones with overlap {self.overlap} need "
                f"{2 * self.num_phones - shared} templates; pool has {POOL_SIZE}"
            )
        if self.face_size < self.lip_size:
            raise ValueError("face frames must be at least as large as lip frames")
        if not 1 <= self.min_phones <= self.max_phones:
            raise ValueError("need 1 <= min_phones <= max_phones")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ValueError("need 1 <= min_duration <= max_duration")
        if self.num_speakers < 0 or self.utterances_per_speaker < 0:
            raise ValueError("counts must be non-negative")


@dataclass
class SpeakerParams:
    speaker_id: str
    audio_bias: np.ndarray
    shift: tuple[float, float]
    scale: float
    gain: float
    skin: float
    # per-template aperture offsets (half-width, half-height)
    quirks: np.ndarray


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    lang: str
    transcript: str
    audio: np.ndarray
    lip: np.ndarray
    face: np.ndarray
    occluded: bool = False
    # phone label per video frame; kept for probes, not written to disk
    frame_phones: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_video_frames(self) -> int:
        return self.lip.shape[0]

    def view(self, name: str) -> np.ndarray:
        if name == "lip":
            return self.lip
        if name == "face":
            return self.face
        raise ValueError(f"unknown view {name!r}")


def lip_crop_box(lip_size: int, face_size: int) -> tuple[slice, slice]:
    """Location of the lip view inside the face view (lower, centred)."""
    margin = face_size - lip_size
    top = margin
    left = margin // 2
    return slice(top, top + lip_size), slice(left, left + lip_size)


class World:
    """Templates and speakers derived from a master seed."""

    def __init__(self, spec: CorpusSpec):
        spec.validate()
        self.spec = spec
        r = rng.stream(spec.seed, "templates")
        n_vis = POOL_SIZE // 2
        self.audio_emb = r.normal(0.0, 1.0, size=(POOL_SIZE, spec.audio_dim))
        # mouth shapes on a 4x4 grid of (half-width, half-height), shuffled per world
        grid = np.array([(w, h) for w in (2.5, 3.5, 4.5, 5.5) for h in (1.0, 2.0, 3.0, 4.0)])
        grid = grid[r.permutation(len(grid))][:n_vis]
        half_w, half_h = grid[:, 0], grid[:, 1]
        self.half_w = np.repeat(half_w, 2)
        self.half_h = np.repeat(half_h, 2)
        self.tongue = np.tile([0.0, 0.6], n_vis)
        self.jaw = np.tile([1.0, -1.0], n_vis)

    @cached_property
    def vocab(self) -> Vocabulary:
        return Vocabulary(DEFAULT_SYMBOLS[:POOL_SIZE])

    def phones(self, lang: str) -> np.ndarray:
        """Template ids making up a language's phone inventory."""
        p = self.spec.num_phones
        target = np.arange(p)
        if lang == "target":
            return target
        shared = round(self.spec.overlap * p)
        return np.concatenate([target[:shared], np.arange(p, p + (p - shared))])

    def speaker(self, index: int) -> SpeakerParams:
        r = rng.stream(self.spec.seed, "speaker", index)
        return SpeakerParams(
            speaker_id=f"spk{index:03d}",
            audio_bias=r.normal(0.0, 0.3, size=self.spec.audio_dim),
            shift=(float(r.uniform(-1.5, 1.5)), float(r.uniform(-1.5, 1.5))),
            scale=float(r.uniform(0.92, 1.08)),
            gain=float(r.uniform(0.8, 1.2)),
            skin=float(r.uniform(-0.1, 0.1)),
            quirks=r.normal(0.0, self.spec.speaker_quirk, size=(POOL_SIZE, 2)),
        )

    def mouth_image(self, phone: int, speaker: SpeakerParams) -> np.ndarray:
        s = self.spec.lip_size
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        cy = (s - 1) / 2 + speaker.shift[0]
        cx = (s - 1) / 2 + speaker.shift[1]
        a = max(0.5, (self.half_w[phone] + speaker.quirks[phone, 0]) * speaker.scale)
        b = max(0.3, (self.half_h[phone] + speaker.quirks[phone, 1]) * speaker.scale)
        r = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
        inner = 1.0 / (1.0 + np.exp(-4.0 * (1.0 - r)))
        ring = np.exp(-(((r - 1.15) / 0.25) ** 2))
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 1.2**2))
        img = -0.8 * inner + 0.6 * ring + self.tongue[phone] * blob * inner
        return 0.5 + speaker.skin + speaker.gain * img


def render_utterance(
    phones,
    speaker: SpeakerParams,
    sub_seed: int,
    world: World,
    *,
    occlusion_prob: float = 0.0,
    utt_id: str = "",
    lang: str = "target",
) -> Utterance:
    """Render one utterance; fully determined by its arguments."""
    phones = np.asarray(phones, dtype=np.int64)
    if phones.size == 0:
        raise ValueError("phone sequence must be non-empty")
    spec = world.spec
    r = np.random.default_rng(sub_seed)
    durations = r.integers(spec.min_duration, spec.max_duration + 1, size=phones.size)
    frame_phones = np.repeat(phones, durations)
    t_v = frame_phones.size

    audio_phones = np.repeat(frame_phones, AUDIO_STACK)
    audio = world.audio_emb[audio_phones] + speaker.audio_bias
    audio = audio + r.normal(0.0, spec.audio_noise, size=audio.shape)

    templates = {int(p): world.mouth_image(int(p), speaker) for p in np.unique(phones)}
    lip = np.stack([templates[int(p)] for p in frame_phones])
    lip = lip + r.normal(0.0, spec.video_noise, size=lip.shape)

    fs = spec.face_size
    rows, cols = lip_crop_box(spec.lip_size, fs)
    face = np.full((t_v, fs, fs), 0.5 + speaker.skin)
    eye_row = max(1, rows.start // 2)
    for eye_col in (fs // 3, fs - 1 - fs // 3):
        face[:, eye_row, eye_col] -= 0.6 * speaker.gain
    jaw = 0.5 * speaker.gain * world.jaw[frame_phones]
    face[:, rows, : cols.start] += jaw[:, None, None]
    face[:, rows, cols.stop :] += jaw[:, None, None]
    face = face + r.normal(0.0, spec.video_noise, size=face.shape)
    face[:, rows, cols] = lip

    occluded = bool(r.random() < occlusion_prob)
    if occluded:
        size = max(1, round(0.45 * fs))
        top = int(r.integers(rows.start + 1, max(rows.start + 2, fs - size + 1)))
        left = int(r.integers(cols.start + 1, max(cols.start + 2, cols.stop - size + 1)))
        face[:, top : top + size, left : left + size] = -1.0

    return Utterance(
        utt_id=utt_id,
        speaker_id=speaker.speaker_id,
        lang=lang,
        transcript=world.vocab.decode(phones),
        audio=audio.astype(np.float32),
        lip=lip.astype(np.float32),
        face=face.astype(np.float32),
        occluded=occluded,
        frame_phones=frame_phones,
    )


def iter_corpus(spec: CorpusSpec):
    """Yield utterances in manifest order without touching the filesystem."""
    world = World(spec)
    inventory = world.phones(spec.lang)
    for s in range(spec.first_speaker, spec.first_speaker + spec.num_speakers):
        speaker = world.speaker(s)
        for u in range(spec.first_utterance, spec.first_utterance + spec.utterances_per_speaker):
            r = rng.stream(spec.seed, f"transcript-{spec.lang}", s, u)
            n = int(r.integers(spec.min_phones, spec.max_phones + 1))
            phones = inventory[r.integers(0, inventory.size, size=n)]
            yield render_utterance(
                phones,
                speaker,
                rng.sub_seed(spec.seed, f"render-{spec.lang}", s, u),
                world,
                occlusion_prob=spec.occlusion_prob,
                utt_id=f"{spec.lang}-{speaker.speaker_id}-u{u:04d}",
                lang=spec.lang,
            )


def generate(spec: CorpusSpec) -> list[Utterance]:
    return list(iter_corpus(spec))


def manifest_row(utt: Utterance, feat_dir: str = "feats") -> dict:
    return {
        "utt_id": utt.utt_id,
        "speaker_id": utt.speaker_id,
        "lang": utt.lang,
        "audio_path": f"{feat_dir}/{utt.utt_id}.audio.avtn",
        "lip_path": f"{feat_dir}/{utt.utt_id}.lip.avtn",
        "face_path": f"{feat_dir}/{utt.utt_id}.face.avtn",
        "transcript": utt.transcript,
        "num_video_frames": utt.num_video_frames,
        "occluded": utt.occluded,
    }


def generate_corpus(spec: CorpusSpec, out_dir: str | Path) -> list[dict]:
    """Write ``manifest.jsonl`` plus feature files under ``out_dir``."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    rows = []
    for utt in iter_corpus(spec):
        row = manifest_row(utt)
        avtn.write(out / row["audio_path"], utt.audio)
        avtn.write(out / row["lip_path"], utt.lip)
        avtn.write(out / row["face_path"], utt.face)
        rows.append(row)
    with open(out / "manifest.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    (out / "corpus_spec.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=1) + "\n")
    log.info("wrote %d utterances to %s", len(rows), out)
    return rows


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def load_corpus(manifest: str | Path) -> list[Utterance]:
    """Load utterances back from a manifest (features come back as float32)."""
    base = Path(manifest).parent
    utts = []
    for row in read_manifest(manifest):
        utts.append(
            Utterance(
                utt_id=row["utt_id"],
                speaker_id=row["speaker_id"],
                lang=row["lang"],
                transcript=row["transcript"],
                audio=avtn.read(base / row["audio_path"]),
                lip=avtn.read(base / row["lip_path"]),
                face=avtn.read(base / row["face_path"]),
                occluded=bool(row["occluded"]),
            )
        )
    return utts

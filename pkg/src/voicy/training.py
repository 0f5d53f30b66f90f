"""Feature caching, batch sampling and the resumable training loop."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .corpus import CONDITIONS, CorpusError, CorpusManifest, PhonemeSequence, load_alignment
from .dsp import MelConfig, StftConfig, mel_spectrogram, read_wav
from .grad.optim import AdamState, init_adam
from .model import (
    ModelConfig,
    ModelState,
    UtterancePair,
    encode_speaker,
    init_model,
    load_model,
    save_model,
    train_step,
)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "L", "L_recon", "L_phonetic", "L_content")


@dataclass
class Utterance:
    id: str
    speaker_id: str
    phonemes: PhonemeSequence
    mels: dict  # condition -> (frames, n_mels)


@dataclass
class FeatureSet:
    utterances: dict  # id -> Utterance
    n_phonemes: int

    def ids(self) -> list[str]:
        return sorted(self.utterances)

    def speakers(self) -> list[str]:
        return sorted({u.speaker_id for u in self.utterances.values()})

    def of_speaker(self, speaker: str, ids=None) -> list[str]:
        pool = self.ids() if ids is None else ids
        return [i for i in pool if self.utterances[i].speaker_id == speaker]


def extract_features(
    manifest: CorpusManifest,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: MelConfig = MelConfig(),
    threads: int = 1,
) -> FeatureSet:
    """Log-mel every record of a built dataset; records with an ``error`` are skipped."""
    inventory = manifest.inventory()
    if inventory is None:
        raise CorpusError("manifest header names no phoneme inventory")
    records = [r for r in manifest.records if r.error is None]

    def mel_of(record):
        wave = read_wav(manifest.resolve(record.audio_path))
        return mel_spectrogram(wave, stft_cfg, mel_cfg).values

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            mels = list(pool.map(mel_of, records))
    else:
        mels = [mel_of(r) for r in records]

    utts: dict[str, Utterance] = {}
    for record, mel in zip(records, mels):
        if record.id not in utts:
            if not record.alignment_path:
                raise CorpusError(f"{record.id}: no alignment for training")
            seq = load_alignment(manifest.resolve(record.alignment_path), inventory)
            utts[record.id] = Utterance(record.id, record.speaker_id, seq, {})
        utts[record.id].mels[record.condition] = mel
    return FeatureSet(utts, len(inventory))


def split_heldout(features: FeatureSet, per_speaker: int) -> tuple[list[str], list[str]]:
    """Hold out the last ``per_speaker`` utterances (by id) of every speaker."""
    train, held = [], []
    for spk in features.speakers():
        ids = features.of_speaker(spk)
        if per_speaker >= len(ids):
            raise CorpusError(f"speaker {spk} has {len(ids)} utterances; cannot hold out {per_speaker}")
        cut = len(ids) - per_speaker
        train += ids[:cut]
        held += ids[cut:]
    return train, held


def mel_statistics(features: FeatureSet, ids) -> tuple[float, float]:
    values = np.concatenate([features.utterances[i].mels["clean"].ravel() for i in ids])
    return float(values.mean()), float(values.std())


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 0
    heldout_per_speaker: int = 4
    checkpoint_every: int = 0
    log_every: int = 25


class SpeakerCache:
    """Memoised embeddings of the frozen speaker encoder."""

    def __init__(self, state: ModelState, features: FeatureSet):
        self.state = state
        self.features = features
        self._cache: dict = {}

    def __call__(self, utt_id: str, condition: str) -> np.ndarray:
        key = (utt_id, condition)
        if key not in self._cache:
            self._cache[key] = encode_speaker(self.features.utterances[utt_id].mels[condition], self.state)
        return self._cache[key]


def sample_batch(
    features: FeatureSet, train_ids, step: int, cfg: TrainConfig, speaker_of: SpeakerCache | None = None
) -> list[UtterancePair]:
    """Batch for ``step``; depends only on ``(seed, step)`` so resumed runs see the same data.

    Each item is a (source condition, clean target) pair of one utterance with a
    speaker reference drawn from a different utterance of the same speaker.
    """
    rng = np.random.default_rng([cfg.seed, step])
    by_speaker = {s: features.of_speaker(s, train_ids) for s in features.speakers()}
    batch = []
    for _ in range(cfg.batch_size):
        utt = features.utterances[train_ids[int(rng.integers(len(train_ids)))]]
        conds = [c for c in CONDITIONS if c in utt.mels]
        cond = conds[int(rng.integers(len(conds)))]
        others = [i for i in by_speaker[utt.speaker_id] if i != utt.id] or [utt.id]
        ref = features.utterances[others[int(rng.integers(len(others)))]]
        ref_conds = [c for c in CONDITIONS if c in ref.mels]
        ref_cond = ref_conds[int(rng.integers(len(ref_conds)))]
        embedding = speaker_of(ref.id, ref_cond) if speaker_of else None
        batch.append(
            UtterancePair(
                source_mel=utt.mels[cond],
                clean_target_mel=utt.mels["clean"],
                speaker_ref_mel=None if embedding is not None else ref.mels[ref_cond],
                phonemes=utt.phonemes,
                utterance_id=f"{utt.id}:{cond}",
                speaker_embedding=embedding,
            )
        )
    return batch


@dataclass
class TrainResult:
    state: ModelState
    opt: AdamState
    step: int
    losses: list  # rows matching LOSS_COLUMNS
    seconds: float


def initial_state(features: FeatureSet, train_ids, model_cfg: ModelConfig, train_cfg: TrainConfig):
    mean, std = mel_statistics(features, train_ids)
    model_cfg = replace(model_cfg, n_phonemes=features.n_phonemes, mel_mean=mean, mel_std=std)
    state = init_model(model_cfg)
    return state, init_adam(state.params, lr=train_cfg.lr)


def train(
    features: FeatureSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run (or resume) training up to ``train_cfg.steps``.

    ``stop_at`` ends the run early (the checkpoint records how far it got), which
    is how interrupted runs are simulated. When ``out_dir`` is given the loss log
    is appended to ``loss_log.tsv`` and ``checkpoint.vckp`` is rewritten at
    every checkpoint interval and at the end.
    """
    train_ids, _ = split_heldout(features, train_cfg.heldout_per_speaker)
    if resume_from is not None:
        state, opt, meta = load_model(resume_from)
        if opt is None:
            raise CorpusError(f"{resume_from}: checkpoint has no optimizer state to resume from")
        start = int(meta.get("step", 0))
        saved = meta.get("train_config")
        if saved and TrainConfig(**saved) != train_cfg:
            log.warning("resuming with a train config that differs from the checkpoint's")
    else:
        state, opt = initial_state(features, train_ids, model_cfg, train_cfg)
        start = 0

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    end = train_cfg.steps if stop_at is None else min(stop_at, train_cfg.steps)
    speaker_of = SpeakerCache(state, features)
    losses = []
    t0 = time.perf_counter()

    def checkpoint(step):
        if out_dir is not None:
            save_model(
                out_dir / "checkpoint.vckp",
                state,
                opt,
                {"step": step, "train_config": asdict(train_cfg)},
            )

    for step in range(start, end):
        batch = sample_batch(features, train_ids, step, train_cfg, speaker_of)
        state, opt, rep = train_step(batch, state, opt)
        row = (step + 1, rep.total, rep.recon, rep.phonetic, rep.content)
        losses.append(row)
        if out_dir is not None:
            _append_loss(out_dir / "loss_log.tsv", row)
        if train_cfg.log_every and (step + 1) % train_cfg.log_every == 0:
            log.info("step %d  L=%.4f recon=%.4f phon=%.4f content=%.4f", *row)
        if train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            checkpoint(step + 1)
    checkpoint(end)
    return TrainResult(state, opt, end, losses, time.perf_counter() - t0)


def _append_loss(path: Path, row) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        if new:
            w.writerow(LOSS_COLUMNS)
        w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def read_loss_log(path) -> list[tuple]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = tuple(next(reader))
        if header != LOSS_COLUMNS:
            raise ValueError(f"{path}: unexpected loss-log columns {header}")
        return [(int(r[0]), *(float(v) for v in r[1:])) for r in reader]

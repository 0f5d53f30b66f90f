"""Utterance data model, file formats and the synthetic toy corpus.

File formats
------------
Inventory (text)::

    #inventory <id> <version>
    SIL
    <symbol>
    ...

Alignment (TSV, one phone per row, times in seconds)::

    <symbol>\\t<start_s>\\t<end_s>

Manifest (JSON lines): an optional first line ``{"header": {...}}``, then one
record per line with keys in the order of :data:`RECORD_FIELDS`; unset
optional fields are omitted. Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .dsp import DEFAULT_SAMPLE_RATE, Waveform, write_wav
from .scene import derive_seed

SILENCE = "SIL"
CONDITIONS = ("clean", "reverb", "noisy_reverb")


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# phoneme inventory and alignments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhonemeInventory:
    inventory_id: str
    symbols: tuple
    version: int = 1

    def __post_init__(self):
        symbols = tuple(self.symbols)
        if len(set(symbols)) != len(symbols):
            raise CorpusError("inventory symbols must be unique")
        if SILENCE not in symbols:
            raise CorpusError(f"inventory must contain the silence symbol {SILENCE!r}")
        object.__setattr__(self, "symbols", symbols)

    def __len__(self):
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise CorpusError(f"unknown phoneme symbol {symbol!r}") from None


def toy_inventory(k: int = 8) -> PhonemeInventory:
    return PhonemeInventory(f"toy-k{k}", (SILENCE, *(f"PH{i}" for i in range(k))))


def write_inventory(inv: PhonemeInventory, path) -> None:
    lines = [f"#inventory {inv.inventory_id} {inv.version}", *inv.symbols]
    Path(path).write_text("\n".join(lines) + "\n")


def load_inventory(path) -> PhonemeInventory:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#inventory "):
        raise CorpusError(f"{path}: missing '#inventory <id> <version>' header")
    parts = lines[0].split()
    if len(parts) != 3:
        raise CorpusError(f"{path}: malformed inventory header {lines[0]!r}")
    return PhonemeInventory(parts[1], tuple(s.strip() for s in lines[1:] if s.strip()), int(parts[2]))


@dataclass(frozen=True)
class PhonemeSequence:
    symbols: tuple
    inventory_id: str

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(int(s) for s in self.symbols))
        if not self.symbols:
            raise CorpusError("phoneme sequence must be non-empty")

    def __len__(self):
        return len(self.symbols)

    def one_hot(self, size: int) -> np.ndarray:
        if max(self.symbols) >= size or min(self.symbols) < 0:
            raise CorpusError(f"phoneme index out of range for inventory of size {size}")
        out = np.zeros((len(self.symbols), size))
        out[np.arange(len(self.symbols)), self.symbols] = 1.0
        return out


@dataclass(frozen=True)
class AlignmentRow:
    symbol: str
    start_s: float
    end_s: float


def read_alignment(path) -> list[AlignmentRow]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                if len(parts) != 3:
                    raise ValueError(f"expected 3 tab-separated fields, got {len(parts)}")
                row = AlignmentRow(parts[0], float(parts[1]), float(parts[2]))
            except ValueError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed row: {exc}") from None
            if row.end_s <= row.start_s:
                raise CorpusError(f"{path}:{lineno}: end time must exceed start time")
            if rows and row.start_s < rows[-1].end_s:
                raise CorpusError(f"{path}:{lineno}: row overlaps or precedes the previous row")
            rows.append(row)
    if not rows:
        raise CorpusError(f"{path}: empty alignment")
    return rows


def write_alignment(rows, path) -> None:
    text = "".join(f"{r.symbol}\t{r.start_s:.6f}\t{r.end_s:.6f}\n" for r in rows)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def load_alignment(path, inventory: PhonemeInventory) -> PhonemeSequence:
    rows = read_alignment(path)
    return PhonemeSequence(tuple(inventory.index(r.symbol) for r in rows), inventory.inventory_id)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    speaker_id: str
    condition: str
    audio_path: str
    alignment_path: str | None = None
    snr_db: float | None = None
    t60_s: float | None = None
    seed: int | None = None
    error: str | None = None

    def __post_init__(self):
        if not self.id or not self.speaker_id:
            raise CorpusError("record needs an id and a speaker_id")
        if self.condition not in CONDITIONS:
            raise CorpusError(f"{self.id}: unknown condition {self.condition!r}")
        if not self.audio_path:
            raise CorpusError(f"{self.id}: record is missing its audio path")

    def to_json(self) -> str:
        data = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(data, separators=(", ", ": "))


RECORD_FIELDS = tuple(f.name for f in fields(ManifestRecord))


@dataclass
class CorpusManifest:
    records: list
    header: dict = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for r in self.records:
            key = (r.id, r.condition)
            if key in seen:
                raise CorpusError(f"duplicate record (id={r.id}, condition={r.condition})")
            seen.add(key)
        self.root = Path(self.root)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, CorpusManifest) and self.records == other.records and self.header == other.header

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def by_condition(self, condition: str) -> list:
        return [r for r in self.records if r.condition == condition]

    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})

    def inventory(self) -> PhonemeInventory | None:
        rel = self.header.get("inventory")
        return load_inventory(self.resolve(rel)) if rel else None


def _parse_record(data: dict, where: str) -> ManifestRecord:
    unknown = set(data) - set(RECORD_FIELDS)
    if unknown:
        raise CorpusError(f"{where}: unknown fields {sorted(unknown)}")
    try:
        return ManifestRecord(**data)
    except TypeError as exc:
        raise CorpusError(f"{where}: {exc}") from None


def iter_manifest(path) -> Iterator:
    """Stream a manifest: yields the header dict (possibly empty) first, then records."""
    with open(path) as fh:
        first = True
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if first:
                first = False
                if "header" in data and len(data) == 1:
                    yield data["header"]
                    continue
                yield {}
            yield _parse_record(data, f"{path}:{lineno}")
        if first:
            yield {}


def load_manifest(path) -> CorpusManifest:
    it = iter_manifest(path)
    header = next(it)
    return CorpusManifest(list(it), header, root=Path(path).parent)


def write_manifest(manifest: CorpusManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        if manifest.header:
            fh.write(json.dumps({"header": manifest.header}, sort_keys=True) + "\n")
        for r in manifest.records:
            fh.write(r.to_json() + "\n")


# ---------------------------------------------------------------------------
# toy corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyCorpusSpec:
    n_speakers: int = 4
    utterances_per_speaker: int = 20
    n_phonemes: int = 8
    segment_ms: tuple = (80.0, 160.0)
    segments_per_utterance: tuple = (3, 8)
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "segment_ms", tuple(self.segment_ms))
        object.__setattr__(self, "segments_per_utterance", tuple(self.segments_per_utterance))
        if self.n_speakers < 1 or self.utterances_per_speaker < 1 or self.n_phonemes < 1:
            raise CorpusError("toy corpus sizes must be positive")

    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class ToyVoice:
    """Speaker identity: a fixed spectral envelope of three resonances and a tilt."""

    centers_hz: tuple
    bandwidths_hz: tuple
    gains: tuple
    tilt: float

    @classmethod
    def sample(cls, seed: int) -> "ToyVoice":
        rng = np.random.default_rng(seed)
        centers = (rng.uniform(250, 900), rng.uniform(1000, 2600), rng.uniform(2800, 5500))
        return cls(
            tuple(float(c) for c in centers),
            tuple(float(b) for b in rng.uniform(80, 300, size=3)),
            tuple(float(g) for g in rng.uniform(0.5, 2.0, size=3)),
            float(rng.uniform(-1.0, 1.0)),
        )

    def envelope(self, freqs: np.ndarray) -> np.ndarray:
        env = np.full_like(freqs, 0.05)
        for c, b, g in zip(self.centers_hz, self.bandwidths_hz, self.gains):
            env += g / (1.0 + ((freqs - c) / b) ** 2)
        return env * (1.0 + freqs / 4000.0) ** self.tilt


@dataclass(frozen=True)
class ToyPhoneme:
    voiced: bool
    f0_hz: float
    band_hz: tuple


def toy_phonemes(k: int, seed: int) -> list[ToyPhoneme]:
    rng = np.random.default_rng(derive_seed(seed, "phonemes"))
    out = []
    for i in range(k):
        voiced = i % 2 == 0
        f0 = float(rng.uniform(100, 260))
        lo = float(rng.uniform(500, 6000))
        out.append(ToyPhoneme(voiced, f0, (lo, lo + float(rng.uniform(800, 3000)))))
    return out


def phoneme_excitation(ph: ToyPhoneme, n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / fs
    if ph.voiced:
        harmonics = np.arange(1, int(8000 // ph.f0_hz) + 1)
        weights = 1.0 / harmonics
        inband = (harmonics * ph.f0_hz >= ph.band_hz[0]) & (harmonics * ph.f0_hz <= ph.band_hz[1])
        weights = weights * np.where(inband, 4.0, 1.0)
        phases = rng.uniform(0, 2 * np.pi, size=harmonics.size)
        x = np.sin(2 * np.pi * ph.f0_hz * harmonics[:, None] * t[None, :] + phases[:, None])
        x = weights @ x
    else:
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / fs)
        spec[(freqs < ph.band_hz[0]) | (freqs > ph.band_hz[1])] = 0.0
        x = np.fft.irfft(spec, n)
    return x / max(np.sqrt(np.mean(x**2)), 1e-12)


def synthesize_utterance(
    voice: ToyVoice,
    phonemes: list[ToyPhoneme],
    sequence: list[int],
    durations_s: list[float],
    fs: int,
    seed: int,
) -> np.ndarray:
    """Concatenate phoneme excitations, then shape them with the speaker envelope."""
    rng = np.random.default_rng(seed)
    ramp = max(1, int(0.005 * fs))
    parts = []
    for k, dur in zip(sequence, durations_s):
        n = int(round(dur * fs))
        seg = phoneme_excitation(phonemes[k], n, fs, rng)
        fade = np.ones(n)
        r = min(ramp, n // 2)
        fade[:r] = np.linspace(0.0, 1.0, r)
        fade[n - r :] = np.linspace(1.0, 0.0, r)
        parts.append(seg * fade)
    x = np.concatenate(parts)
    spec = np.fft.rfft(x)
    x = np.fft.irfft(spec * voice.envelope(np.fft.rfftfreq(x.size, 1.0 / fs)), x.size)
    return 0.1 * x / max(np.sqrt(np.mean(x**2)), 1e-12)


def toy_utterance_plan(spec: ToyCorpusSpec, utt_id: str):
    rng = np.random.default_rng(derive_seed(spec.seed, utt_id))
    lo, hi = spec.segments_per_utterance
    n_seg = int(rng.integers(lo, hi + 1))
    sequence = [int(v) for v in rng.integers(0, spec.n_phonemes, size=n_seg)]
    durations = [float(d) / 1000.0 for d in rng.uniform(*spec.segment_ms, size=n_seg)]
    # snap to whole samples so alignment spans are exact
    durations = [round(d * spec.sample_rate_hz) / spec.sample_rate_hz for d in durations]
    return sequence, durations, int(rng.integers(2**63 - 1))


def make_toy_corpus(spec: ToyCorpusSpec, out_dir) -> CorpusManifest:
    out_dir = Path(out_dir)
    try:
        (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
        (out_dir / "alignments").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    inv = toy_inventory(spec.n_phonemes)
    write_inventory(inv, out_dir / "inventory.txt")
    phonemes = toy_phonemes(spec.n_phonemes, spec.seed)
    fs = spec.sample_rate_hz
    records = []
    for s in range(spec.n_speakers):
        speaker = f"spk{s:02d}"
        voice = ToyVoice.sample(derive_seed(spec.seed, "speaker", speaker))
        for u in range(spec.utterances_per_speaker):
            utt = f"{speaker}_utt{u:03d}"
            sequence, durations, synth_seed = toy_utterance_plan(spec, utt)
            samples = synthesize_utterance(voice, phonemes, sequence, durations, fs, synth_seed)
            write_wav(out_dir / "wavs" / f"{utt}.wav", Waveform(samples, fs))
            rows, t = [], 0.0
            for k, d in zip(sequence, durations):
                rows.append(AlignmentRow(inv.symbols[k + 1], t, t + d))
                t += d
            write_alignment(rows, out_dir / "alignments" / f"{utt}.tsv")
            records.append(
                ManifestRecord(
                    id=utt,
                    speaker_id=speaker,
                    condition="clean",
                    audio_path=f"wavs/{utt}.wav",
                    alignment_path=f"alignments/{utt}.tsv",
                    seed=synth_seed,
                )
            )
    header = {
        "format": "voicy-manifest",
        "version": 1,
        "inventory": "inventory.txt",
        "toy_spec": asdict(spec),
        "spec_hash": spec.spec_hash(),
    }
    manifest = CorpusManifest(records, header, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest

"""Room simulation and noisy-reverberant corpus synthesis.

Impulse responses come from the image-source method in a shoebox room with
one absorption coefficient shared by all six walls. Each image contributes a
single tap at its nearest-sample delay with amplitude
``r ** reflections / (4 * pi * distance)``, where ``r = sqrt(1 - absorption)``.
"""

from __future__ import annotations

import hashlib
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import optimize, stats
from scipy import signal as sps

from .dsp import Waveform, read_wav, write_wav

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class ShoeboxRoom:
    dims: tuple
    absorption: float
    max_order: int = 20

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise SceneError(f"room dims must be three positive lengths, got {self.dims}")
        if not 0 < self.absorption <= 1:
            raise SceneError(f"absorption must lie in (0, 1], got {self.absorption}")
        if self.max_order < 0:
            raise SceneError("max_order must be non-negative")
        object.__setattr__(self, "dims", dims)

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dims
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    @property
    def reflection(self) -> float:
        return float(np.sqrt(1.0 - self.absorption))

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return p.shape == (3,) and bool(np.all(p > 0) and np.all(p < np.asarray(self.dims)))


@dataclass(frozen=True)
class ScenePlacement:
    speech_pos: tuple
    white_noise_pos: tuple
    external_noise_pos: tuple
    mic_pos: tuple

    def validate(self, room: ShoeboxRoom):
        for name in ("speech_pos", "white_noise_pos", "external_noise_pos", "mic_pos"):
            if not room.contains(getattr(self, name)):
                raise SceneError(f"{name} {getattr(self, name)} is not strictly inside the room")
        if np.allclose(self.speech_pos, self.mic_pos):
            raise SceneError("speech source coincides with the microphone")


@dataclass(frozen=True)
class Rir:
    taps: np.ndarray
    sample_rate_hz: int

    @property
    def first_tap(self) -> int:
        return int(np.flatnonzero(self.taps)[0])


@dataclass(frozen=True)
class NoiseMixResult:
    mixed: Waveform
    achieved_snr_db: float
    noise_scale: float


def sabine_t60(room: ShoeboxRoom) -> float:
    return 0.161 * room.volume / (room.surface * room.absorption)


def absorption_for_t60(dims, t60: float) -> float:
    """Invert Sabine's formula for the uniform absorption giving ``t60``."""
    room = ShoeboxRoom(dims, 1.0)
    return 0.161 * room.volume / (room.surface * t60)


def _image_axis(length: float, pos: float, max_order: int):
    """Image coordinates and reflection counts along one axis.

    Image ``(n, p)`` sits at ``(1 - 2p) * pos + 2 n L`` after ``|n - p| + |n|``
    wall reflections.
    """
    n = np.arange(-(max_order // 2) - 1, max_order // 2 + 2)
    coords, counts = [], []
    for p in (0, 1):
        coords.append((1 - 2 * p) * pos + 2 * n * length)
        counts.append(np.abs(n - p) + np.abs(n))
    coords = np.concatenate(coords)
    counts = np.concatenate(counts)
    keep = counts <= max_order
    return coords[keep], counts[keep]


def simulate_rir(room: ShoeboxRoom, src, mic, fs: int) -> Rir:
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if not room.contains(src):
        raise SceneError(f"source {src.tolist()} is not strictly inside the room")
    if not room.contains(mic):
        raise SceneError(f"microphone {mic.tolist()} is not strictly inside the room")
    if np.allclose(src, mic):
        raise SceneError("source and microphone coincide (zero distance)")
    if fs <= 0:
        raise SceneError("sample rate must be positive")

    axes = [_image_axis(room.dims[i], src[i], room.max_order) for i in range(3)]
    (x, cx), (y, cy), (z, cz) = axes
    order = cx[:, None, None] + cy[None, :, None] + cz[None, None, :]
    keep = order <= room.max_order
    dx = (x - mic[0])[:, None, None]
    dy = (y - mic[1])[None, :, None]
    dz = (z - mic[2])[None, None, :]
    dist = np.sqrt(dx**2 + dy**2 + dz**2)[keep]
    refl = order[keep]

    delays = np.rint(dist / SPEED_OF_SOUND * fs).astype(np.int64)
    amps = room.reflection ** refl / (4.0 * np.pi * dist)
    nonzero = amps != 0
    taps = np.bincount(delays[nonzero], weights=amps[nonzero], minlength=int(delays.min()) + 1)
    return Rir(taps, fs)


def schroeder_decay_db(taps: np.ndarray) -> np.ndarray:
    energy = np.cumsum((taps**2)[::-1])[::-1]
    return 10.0 * np.log10(np.maximum(energy / energy[0], 1e-300))


def estimate_t60(
    rir: Rir,
    fit_from_db: float = -5.0,
    fit_to_db: float = -25.0,
    highpass_hz: float | None = 200.0,
) -> float:
    """Schroeder backward integration with a linear fit of the decay curve.

    The fit spans ``fit_from_db`` to ``fit_to_db`` below the total energy and
    is extrapolated to -60 dB. The response is first high-passed (4th-order
    Butterworth at ``highpass_hz``): with all-positive reflection
    coefficients, coincident image taps pile up into a slowly growing
    low-frequency component that would otherwise stretch the decay.
    """
    taps = rir.taps[rir.first_tap :]
    if highpass_hz:
        sos = sps.butter(4, highpass_hz, btype="highpass", fs=rir.sample_rate_hz, output="sos")
        taps = sps.sosfilt(sos, taps)
    edc = schroeder_decay_db(taps)
    idx = np.flatnonzero((edc <= fit_from_db) & (edc >= fit_to_db))
    if idx.size < 2:
        raise SceneError("decay curve too short to fit a reverberation time")
    t = idx / rir.sample_rate_hz
    slope, _ = np.polyfit(t, edc[idx], 1)
    if slope >= 0:
        raise SceneError("decay curve is not decreasing")
    return -60.0 / slope


def order_for_decay(room: ShoeboxRoom, decay_db: float = 25.0, margin: float = 1.5) -> int:
    """Reflection order whose images cover the first ``decay_db`` of Sabine decay."""
    seconds = sabine_t60(room) * decay_db / 60.0 * margin
    return int(np.ceil(SPEED_OF_SOUND * seconds / min(room.dims)))


def fft_convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = len(a) + len(b) - 1
    size = 1 << (n - 1).bit_length()
    return np.fft.irfft(np.fft.rfft(a, size) * np.fft.rfft(b, size), size)[:n]


def apply_rir(wave: Waveform, rir: Rir) -> Waveform:
    if wave.sample_rate_hz != rir.sample_rate_hz:
        raise SceneError(
            f"sample-rate mismatch: audio {wave.sample_rate_hz} Hz, RIR {rir.sample_rate_hz} Hz"
        )
    return Waveform(fft_convolve(wave.samples, rir.taps), wave.sample_rate_hz)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    reps = -(-n // len(noise))
    return np.tile(noise, reps)[:n]


def mix_at_snr(signal: Waveform, noise: Waveform, target_snr_db: float) -> NoiseMixResult:
    """Scale ``noise`` (tiled or truncated to the signal length) to ``target_snr_db``."""
    if len(noise) == 0:
        raise SceneError("zero power: empty noise")
    n = fit_length(noise.samples, len(signal))
    ps, pn = power(signal.samples), power(n)
    if ps == 0 or pn == 0:
        raise SceneError("zero power: signal and noise must both be non-silent")
    scale = float(np.sqrt(ps / (pn * 10.0 ** (target_snr_db / 10.0))))
    scaled = scale * n
    achieved = 10.0 * np.log10(ps / power(scaled))
    return NoiseMixResult(Waveform(signal.samples + scaled, signal.sample_rate_hz), float(achieved), scale)


def estimate_snr(clean: Waveform, degraded: Waveform) -> float:
    if len(clean) != len(degraded):
        raise SceneError(f"length mismatch: {len(clean)} vs {len(degraded)}")
    residual = power(degraded.samples - clean.samples)
    if residual == 0:
        raise SceneError("infinite SNR: degraded signal equals the clean signal")
    return float(10.0 * np.log10(power(clean.samples) / residual))


def white_noise(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n)


def synthetic_babble(n: int, fs: int, seed: int, n_talkers: int = 6) -> np.ndarray:
    """Seeded babble-like noise: amplitude-modulated band-limited noise talkers."""
    rng = np.random.default_rng(seed)
    t = np.arange(n) / fs
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    out = np.zeros(n)
    for _ in range(n_talkers):
        center = rng.uniform(200.0, 3000.0)
        width = rng.uniform(150.0, 800.0)
        shape = np.exp(-0.5 * ((freqs - center) / width) ** 2)
        spectrum = shape * (rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size))
        band = np.fft.irfft(spectrum, n)
        rate = rng.uniform(2.0, 6.0)
        envelope = 0.5 * (1.0 + np.sin(2.0 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        out += band * envelope
    return out / max(np.sqrt(power(out)), 1e-12)


def _scene_components(room, placement, speech, external_noise, seed):
    placement.validate(room)
    fs = speech.sample_rate_hz
    if power(speech.samples) == 0:
        raise SceneError("zero power: speech is silent")
    rev_speech = apply_rir(speech, simulate_rir(room, placement.speech_pos, placement.mic_pos, fs))
    rev_ext = apply_rir(
        external_noise, simulate_rir(room, placement.external_noise_pos, placement.mic_pos, fs)
    )
    white = white_noise(len(rev_speech), seed)
    return rev_speech, rev_ext, white


def _noise_at(reference: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    noise = fit_length(noise, len(reference))
    pn = power(noise)
    if pn == 0:
        raise SceneError("zero power: noise is silent")
    return noise * np.sqrt(power(reference) / (pn * 10.0 ** (snr_db / 10.0)))


def render_scene(
    room: ShoeboxRoom,
    placement: ScenePlacement,
    speech: Waveform,
    external_noise: Waveform,
    white_snr_db: float,
    external_snr_db: float,
    seed: int,
) -> Waveform:
    """Reverberant speech plus seeded white noise plus reverberant external noise.

    Both noises are scaled against the reverberant speech; the result has the
    reverberant-speech length ``len(speech) + len(rir) - 1``.
    """
    rev_speech, rev_ext, white = _scene_components(room, placement, speech, external_noise, seed)
    s = rev_speech.samples
    mixed = s + _noise_at(s, white, white_snr_db) + _noise_at(s, rev_ext.samples, external_snr_db)
    return Waveform(mixed, speech.sample_rate_hz)


# ---------------------------------------------------------------------------
# corpus sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    t60_min: float = 0.12
    t60_max: float = 1.25
    noisy_t60_max: float = 0.6
    room_min: tuple = (3.0, 3.0, 2.4)
    room_max: tuple = (8.0, 8.0, 3.5)
    max_order: int = 20
    wall_margin: float = 0.5
    min_distance: float = 0.5
    snr_mean: float = 16.0
    snr_min: float = -2.2
    snr_max: float = 35.0
    snr_std: float = 6.0
    white_fraction: tuple = (0.1, 0.9)

    def __post_init__(self):
        if not 0 < self.t60_min <= self.t60_max:
            raise SceneError("need 0 < t60_min <= t60_max")
        if not self.snr_min < self.snr_mean < self.snr_max:
            raise SceneError("need snr_min < snr_mean < snr_max")
        object.__setattr__(self, "room_min", tuple(self.room_min))
        object.__setattr__(self, "room_max", tuple(self.room_max))
        object.__setattr__(self, "white_fraction", tuple(self.white_fraction))


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class SnrSampler:
    """Truncated normal on ``[snr_min, snr_max]`` whose mean is ``snr_mean``.

    The location parameter is solved for so that the truncated distribution,
    not the untruncated one, has the requested mean.
    """

    def __init__(self, cfg: SamplerConfig):
        self.cfg = cfg
        lo, hi, sd = cfg.snr_min, cfg.snr_max, cfg.snr_std

        def mean_gap(loc):
            a, b = (lo - loc) / sd, (hi - loc) / sd
            return stats.truncnorm.mean(a, b, loc=loc, scale=sd) - cfg.snr_mean

        self.loc = optimize.brentq(mean_gap, lo - 10 * sd, hi + 10 * sd, xtol=1e-12)
        self.a = (lo - self.loc) / sd
        self.b = (hi - self.loc) / sd

    def mean(self) -> float:
        return float(stats.truncnorm.mean(self.a, self.b, loc=self.loc, scale=self.cfg.snr_std))

    def draw(self, rng: np.random.Generator) -> float:
        u = rng.uniform()
        value = stats.truncnorm.ppf(u, self.a, self.b, loc=self.loc, scale=self.cfg.snr_std)
        return float(np.clip(value, self.cfg.snr_min, self.cfg.snr_max))


def sample_room(rng: np.random.Generator, cfg: SamplerConfig, t60: float) -> ShoeboxRoom:
    """Draw room dimensions and invert Sabine for ``t60``; redraw if absorption > 1."""
    for _ in range(1000):
        dims = tuple(rng.uniform(cfg.room_min, cfg.room_max))
        alpha = absorption_for_t60(dims, t60)
        if alpha <= 1.0:
            return ShoeboxRoom(dims, alpha, cfg.max_order)
    raise SceneError(f"no room in the configured size range reaches T60 = {t60:.3f} s")


def sample_point(rng: np.random.Generator, room: ShoeboxRoom, margin: float) -> tuple:
    lo = np.minimum(margin, np.asarray(room.dims) / 2 - 1e-3)
    return tuple(rng.uniform(lo, np.asarray(room.dims) - lo))


def sample_placement(rng, room: ShoeboxRoom, cfg: SamplerConfig) -> ScenePlacement:
    mic = sample_point(rng, room, cfg.wall_margin)
    points = []
    for _ in range(3):
        for _ in range(1000):
            p = sample_point(rng, room, cfg.wall_margin)
            if np.linalg.norm(np.subtract(p, mic)) >= cfg.min_distance:
                break
        points.append(p)
    return ScenePlacement(points[0], points[1], points[2], mic)


@dataclass
class SceneDraw:
    """Everything sampled for one utterance; fully determined by its seed."""

    reverb_room: ShoeboxRoom
    reverb_src: tuple
    reverb_mic: tuple
    reverb_t60: float
    noisy_room: ShoeboxRoom
    noisy_placement: ScenePlacement
    noisy_t60: float
    snr_db: float
    white_fraction: float
    noise_seed: int
    external_index: int


def draw_scene(seed: int, cfg: SamplerConfig, n_external: int, snr_sampler: SnrSampler | None = None) -> SceneDraw:
    rng = np.random.default_rng(seed)
    snr_sampler = snr_sampler or SnrSampler(cfg)
    t60 = float(rng.uniform(cfg.t60_min, cfg.t60_max))
    room = sample_room(rng, cfg, t60)
    placement = sample_placement(rng, room, cfg)
    noisy_t60 = float(rng.uniform(cfg.t60_min, min(cfg.noisy_t60_max, cfg.t60_max)))
    noisy_room = sample_room(rng, cfg, noisy_t60)
    noisy_placement = sample_placement(rng, noisy_room, cfg)
    return SceneDraw(
        reverb_room=room,
        reverb_src=placement.speech_pos,
        reverb_mic=placement.mic_pos,
        reverb_t60=t60,
        noisy_room=noisy_room,
        noisy_placement=noisy_placement,
        noisy_t60=noisy_t60,
        snr_db=snr_sampler.draw(rng),
        white_fraction=float(rng.uniform(*cfg.white_fraction)),
        noise_seed=int(rng.integers(2**63 - 1)),
        external_index=int(rng.integers(max(n_external, 1))),
    )


def noisy_reverberant(speech: Waveform, external: Waveform, draw: SceneDraw) -> tuple[Waveform, float]:
    """Noisy-reverberant rendition trimmed to the clean length, and its achieved SNR.

    The combined noise is rescaled so that its power against the reverberant
    speech matches ``draw.snr_db``; ``white_fraction`` splits that power
    between the white and the external source.
    """
    n = len(speech)
    rev_speech, rev_ext, white = _scene_components(
        draw.noisy_room, draw.noisy_placement, speech, external, draw.noise_seed
    )
    s = rev_speech.samples[:n]
    f = draw.white_fraction
    white_snr = draw.snr_db - 10.0 * np.log10(f)
    ext_snr = draw.snr_db - 10.0 * np.log10(1.0 - f)
    noise = _noise_at(s, white[:n], white_snr) + _noise_at(s, rev_ext.samples, ext_snr)
    noise = _noise_at(s, noise, draw.snr_db)
    mixed = Waveform(s + noise, speech.sample_rate_hz)
    return mixed, estimate_snr(Waveform(s, speech.sample_rate_hz), mixed)


def reverberant(speech: Waveform, draw: SceneDraw) -> Waveform:
    rir = simulate_rir(draw.reverb_room, draw.reverb_src, draw.reverb_mic, speech.sample_rate_hz)
    return Waveform(apply_rir(speech, rir).samples[: len(speech)], speech.sample_rate_hz)


def build_dataset(
    manifest_in,
    out_dir,
    sampler_cfg: SamplerConfig = SamplerConfig(),
    seed: int = 0,
    noise_paths=(),
    threads: int = 1,
):
    """Write clean, reverberant and noisy-reverberant versions of every clean record.

    Degraded versions are trimmed to the clean length so that every condition
    of an utterance shares its frame count. Per-utterance randomness derives
    from ``(seed, utterance id)`` only, so ``threads`` never changes the bytes
    written. Entries whose audio cannot be read are kept with an ``error``
    field and processing continues.
    """
    from .corpus import CorpusManifest, ManifestRecord, load_manifest, write_manifest

    manifest = load_manifest(manifest_in) if not isinstance(manifest_in, CorpusManifest) else manifest_in
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    (out_dir / "alignments").mkdir(parents=True, exist_ok=True)
    header = dict(manifest.header)
    if header.get("inventory"):
        shutil.copyfile(manifest.resolve(header["inventory"]), out_dir / "inventory.txt")
        header["inventory"] = "inventory.txt"
    externals = [read_wav(p) for p in sorted(noise_paths, key=str)]
    snr_sampler = SnrSampler(sampler_cfg)
    clean = [r for r in manifest.records if r.condition == "clean"]

    def process(rec: ManifestRecord) -> list[ManifestRecord]:
        utt_seed = derive_seed(seed, rec.id)
        base = dict(id=rec.id, speaker_id=rec.speaker_id, seed=utt_seed)
        clean_out = out_dir / "wavs" / f"{rec.id}.clean.wav"
        align_rel = None
        try:
            if rec.alignment_path:
                align_rel = f"alignments/{rec.id}.tsv"
                shutil.copyfile(manifest.resolve(rec.alignment_path), out_dir / align_rel)
            src = manifest.resolve(rec.audio_path)
            speech = read_wav(src)
            shutil.copyfile(src, clean_out)
        except Exception as exc:  # recorded per entry, processing continues
            log.warning("skipping %s: %s", rec.id, exc)
            return [
                ManifestRecord(**base, condition=c, audio_path=rec.audio_path, error=str(exc))
                for c in ("clean", "reverb", "noisy_reverb")
            ]
        draw = draw_scene(utt_seed, sampler_cfg, len(externals), snr_sampler)
        if externals:
            external = externals[draw.external_index]
        else:
            external = Waveform(synthetic_babble(len(speech), speech.sample_rate_hz, draw.noise_seed + 1), speech.sample_rate_hz)
        rev = reverberant(speech, draw)
        noisy, achieved = noisy_reverberant(speech, external, draw)
        write_wav(out_dir / "wavs" / f"{rec.id}.reverb.wav", rev)
        write_wav(out_dir / "wavs" / f"{rec.id}.noisy_reverb.wav", noisy)
        return [
            ManifestRecord(**base, condition="clean", audio_path=f"wavs/{rec.id}.clean.wav", alignment_path=align_rel),
            ManifestRecord(
                **base,
                condition="reverb",
                audio_path=f"wavs/{rec.id}.reverb.wav",
                alignment_path=align_rel,
                t60_s=round(draw.reverb_t60, 6),
            ),
            ManifestRecord(
                **base,
                condition="noisy_reverb",
                audio_path=f"wavs/{rec.id}.noisy_reverb.wav",
                alignment_path=align_rel,
                snr_db=round(achieved, 6),
                t60_s=round(draw.noisy_t60, 6),
            ),
        ]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            groups = list(pool.map(process, clean))
    else:
        groups = [process(r) for r in clean]

    header["dataset"] = {"seed": seed, "sampler": asdict(sampler_cfg), "noise_files": len(externals)}
    out = CorpusManifest([r for g in groups for r in g], header, root=out_dir)
    write_manifest(out, out_dir / "manifest.jsonl")
    return out

"""The five-module conversion model and its denoising objective.

Modules and their I/O (mels are ``(frames, n_mels)`` log-power arrays)::

    speaker  E_s(mel)       -> U  unit-norm (d_s,)        frozen, random
    content  E_c(mel)       -> C  (ceil(T / ds), d_c)
    phonetic E_ph(phonemes) -> P  (d_p,)                   training only
    asr      E_asr(mel)     -> R  (d_p,)                   replaces P at inference
    decoder  D(C, U, P|R)   -> mel (T, n_mels)

Training loss for one utterance::

    A_hat     = D(E_c(source), E_s(speaker_ref), P)
    L_recon   = mean((A_hat - clean_target) ** 2)
    L_phon    = mean(|R - stopgrad(P)|)
    L_content = mean(|E_c(A_hat) - stopgrad(E_c(source))|)
    L         = L_recon + beta * L_phon + lambda * L_content
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from .corpus import PhonemeSequence
from .dsp import MelConfig, MelSpectrogram, StftConfig, Waveform, griffin_lim, mel_spectrogram
from .grad import checkpoint as ckpt
from .grad import ops
from .grad.engine import Parameters, Tape, Var
from .grad.layers import (
    Activation,
    BiRecurrent,
    Conv1d,
    Downsample,
    GRU,
    Linear,
    MeanPool,
    init_params,
    run_graph,
)
from .grad.optim import AdamState, DivergedError, clip_by_global_norm, optimizer_step


class ModelError(ValueError):
    pass


MIN_FRAMES = 8


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    n_phonemes: int = 9
    d_s: int = 64
    d_c: int = 32
    ds_factor: int = 16
    d_p: int = 64
    speaker_hidden: int = 64
    content_channels: int = 64
    asr_channels: int = 64
    asr_hidden: int = 32
    phonetic_embed: int = 32
    phonetic_hidden: int = 64
    phonetic_memory_bias: float = 2.0
    decoder_hidden: int = 96
    decoder_channels: int = 96
    kernel: int = 5
    beta: float = 1.0
    lambda_: float = 1.0
    seed: int = 0
    speaker_seed: int = 1234
    mel_mean: float = 0.0
    mel_std: float = 1.0
    clip_norm: float | None = None
    dtype: str = "float64"

    def __post_init__(self):
        if self.beta < 0 or self.lambda_ < 0:
            raise ModelError("beta and lambda must be non-negative")
        if self.d_c % 2:
            raise ModelError("d_c must be even (bidirectional halves)")
        if self.mel_std <= 0:
            raise ModelError("mel_std must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def speaker_graph(c: ModelConfig):
    return [
        GRU("speaker.gru", c.n_mels, c.speaker_hidden),
        MeanPool("speaker.pool"),
        Linear("speaker.proj", c.speaker_hidden, c.d_s),
    ]


def content_graph(c: ModelConfig):
    return [
        Conv1d("content.conv1", c.n_mels, c.content_channels, c.kernel),
        Activation("content.act1", "relu"),
        Conv1d("content.conv2", c.content_channels, c.content_channels, c.kernel),
        Activation("content.act2", "relu"),
        BiRecurrent("content.blstm", c.content_channels, c.d_c // 2, "lstm"),
        Downsample("content.down", c.ds_factor),
    ]


def asr_graph(c: ModelConfig):
    return [
        Conv1d("asr.conv1", c.n_mels, c.asr_channels, c.kernel),
        Activation("asr.act1", "relu"),
        Conv1d("asr.conv2", c.asr_channels, c.asr_channels, c.kernel),
        Activation("asr.act2", "relu"),
        BiRecurrent("asr.blstm", c.asr_channels, c.asr_hidden, "lstm"),
        MeanPool("asr.pool"),
        Linear("asr.proj", 2 * c.asr_hidden, c.d_p),
    ]


def phonetic_graphs(c: ModelConfig):
    recurrent = [
        Linear("phonetic.embed", c.n_phonemes, c.phonetic_embed, bias=False),
        GRU("phonetic.gru", c.phonetic_embed, c.phonetic_hidden),
    ]
    return recurrent, [Linear("phonetic.proj", c.phonetic_hidden, c.d_p)]


def decoder_graph(c: ModelConfig):
    return [
        GRU("decoder.gru", c.d_c + c.d_s + c.d_p, c.decoder_hidden),
        Conv1d("decoder.conv", c.decoder_hidden, c.decoder_channels, c.kernel),
        Activation("decoder.act", "relu"),
        Linear("decoder.out", c.decoder_channels, c.n_mels),
    ]


MODULES = ("speaker", "content", "phonetic", "asr", "decoder")


@dataclass(frozen=True)
class ModelState:
    config: ModelConfig
    params: Parameters

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def module_params(self, module: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(module + ".")}

    def with_config(self, **changes) -> "ModelState":
        return ModelState(replace(self.config, **changes), self.params)


def init_model(config: ModelConfig = ModelConfig()) -> ModelState:
    dtype = np.dtype(config.dtype)
    speaker = init_params(speaker_graph(config), config.speaker_seed, dtype, frozen=True)
    rec, proj = phonetic_graphs(config)
    params = speaker
    for graph in (content_graph(config), rec + proj, asr_graph(config), decoder_graph(config)):
        params = params.merge(init_params(graph, config.seed, dtype))
    if config.phonetic_memory_bias:
        # open the update gate so the final state summarizes the whole
        # sequence rather than its last few phonemes
        h = config.phonetic_hidden
        bx = params["phonetic.gru.bx"].copy()
        bx[h : 2 * h] = config.phonetic_memory_bias
        params = params.replace({"phonetic.gru.bx": bx})
    return ModelState(config, params)


# ---------------------------------------------------------------------------
# module forward passes on a tape
# ---------------------------------------------------------------------------


def _mel_values(mel) -> np.ndarray:
    return mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)


def _check_mel(values: np.ndarray, c: ModelConfig, min_frames: int, who: str):
    if values.ndim != 2 or values.shape[1] != c.n_mels:
        raise ModelError(f"{who}: expected (frames, {c.n_mels}) mel, got shape {values.shape}")
    if values.shape[0] < min_frames:
        raise ModelError(f"{who}: needs at least {min_frames} frames, got {values.shape[0]}")


def _normalize(x: Var, c: ModelConfig) -> Var:
    return ops.affine(x, 1.0 / c.mel_std, -c.mel_mean / c.mel_std)


def speaker_on_tape(tape: Tape, mel: Var, c: ModelConfig) -> Var:
    return ops.l2_normalize(run_graph(tape, speaker_graph(c), _normalize(mel, c)))


def content_on_tape(tape: Tape, mel: Var, c: ModelConfig) -> Var:
    return run_graph(tape, content_graph(c), _normalize(mel, c))


def asr_on_tape(tape: Tape, mel: Var, c: ModelConfig) -> Var:
    return run_graph(tape, asr_graph(c), _normalize(mel, c))


def phonetic_on_tape(tape: Tape, phonemes: PhonemeSequence, c: ModelConfig) -> Var:
    rec, proj = phonetic_graphs(c)
    hidden = run_graph(tape, rec, tape.constant(phonemes.one_hot(c.n_phonemes)))
    return run_graph(tape, proj, ops.select_step(hidden, -1))


def decoder_on_tape(tape: Tape, content: Var, speaker: Var, ling: Var, n_frames: int, c: ModelConfig) -> Var:
    if content.shape[-1] != c.d_c or speaker.shape != (c.d_s,) or ling.shape != (c.d_p,):
        raise ModelError(
            f"decoder: got content {content.shape}, speaker {speaker.shape}, linguistic {ling.shape}; "
            f"expected (*, {c.d_c}), ({c.d_s},), ({c.d_p},)"
        )
    if content.shape[0] != -(-n_frames // c.ds_factor):
        raise ModelError(f"decoder: content length {content.shape[0]} does not match {n_frames} frames")
    frames = ops.concat(
        [
            ops.temporal_upsample(content, c.ds_factor, n_frames),
            ops.temporal_upsample(speaker, n_frames, n_frames),
            ops.temporal_upsample(ling, n_frames, n_frames),
        ]
    )
    out = run_graph(tape, decoder_graph(c), frames)
    return ops.affine(out, c.mel_std, c.mel_mean)


def _eval_tape(state: ModelState) -> Tape:
    return Tape(state.params, dtype=state.dtype)


def encode_speaker(mel, state: ModelState) -> np.ndarray:
    values = _mel_values(mel)
    _check_mel(values, state.config, MIN_FRAMES, "encode_speaker")
    tape = _eval_tape(state)
    return speaker_on_tape(tape, tape.constant(values), state.config).value


def encode_content(mel, state: ModelState) -> np.ndarray:
    values = _mel_values(mel)
    _check_mel(values, state.config, state.config.ds_factor, "encode_content")
    tape = _eval_tape(state)
    return content_on_tape(tape, tape.constant(values), state.config).value


def encode_asr(mel, state: ModelState) -> np.ndarray:
    values = _mel_values(mel)
    _check_mel(values, state.config, MIN_FRAMES, "encode_asr")
    tape = _eval_tape(state)
    return asr_on_tape(tape, tape.constant(values), state.config).value


def encode_phonetic(phonemes: PhonemeSequence, state: ModelState) -> np.ndarray:
    tape = _eval_tape(state)
    return phonetic_on_tape(tape, phonemes, state.config).value


def decode(content, speaker, ling, n_frames: int, state: ModelState) -> np.ndarray:
    tape = _eval_tape(state)
    return decoder_on_tape(
        tape,
        tape.constant(content),
        tape.constant(speaker),
        tape.constant(ling),
        n_frames,
        state.config,
    ).value


# ---------------------------------------------------------------------------
# loss and training step
# ---------------------------------------------------------------------------


@dataclass
class UtterancePair:
    source_mel: np.ndarray
    clean_target_mel: np.ndarray
    speaker_ref_mel: np.ndarray | None
    phonemes: PhonemeSequence
    utterance_id: str = ""
    speaker_embedding: np.ndarray | None = None

    def __post_init__(self):
        self.source_mel = _mel_values(self.source_mel)
        self.clean_target_mel = _mel_values(self.clean_target_mel)
        if self.speaker_ref_mel is not None:
            self.speaker_ref_mel = _mel_values(self.speaker_ref_mel)
        if self.speaker_ref_mel is None and self.speaker_embedding is None:
            raise ModelError("pair needs a speaker reference mel or a precomputed embedding")


@dataclass(frozen=True)
class LossReport:
    total: float
    recon: float
    phonetic: float
    content: float


@dataclass
class LossGraph:
    tape: Tape
    total: Var
    recon: Var
    phonetic: Var
    content: Var
    reconstruction: Var
    phonetic_target: Var
    content_target: Var

    def report(self) -> LossReport:
        return LossReport(
            float(self.total.value), float(self.recon.value), float(self.phonetic.value), float(self.content.value)
        )


def loss_graph(
    pair: UtterancePair, state: ModelState, tape: Tape | None = None, fixed_targets=None
) -> LossGraph:
    """Record the loss on a tape.

    ``fixed_targets = (P, C)`` replaces the stop-gradient targets with given
    constants. Finite differencing needs this: a perturbed parameter would
    otherwise move the targets too, which the analytic gradient ignores.
    """
    c = state.config
    if pair.source_mel.shape != pair.clean_target_mel.shape:
        raise ModelError(
            f"frame-count mismatch: source {pair.source_mel.shape} vs clean target {pair.clean_target_mel.shape}"
        )
    _check_mel(pair.source_mel, c, max(c.ds_factor, MIN_FRAMES), "compute_loss")
    if tape is None:
        tape = Tape(state.params, dtype=state.dtype)
    n_frames = pair.source_mel.shape[0]
    source = tape.constant(pair.source_mel)
    target = tape.constant(pair.clean_target_mel)

    if pair.speaker_embedding is not None:
        speaker = tape.constant(pair.speaker_embedding)
    else:
        _check_mel(pair.speaker_ref_mel, c, MIN_FRAMES, "speaker reference")
        speaker = speaker_on_tape(tape, tape.constant(pair.speaker_ref_mel), c)
    content = content_on_tape(tape, source, c)
    phonetic = phonetic_on_tape(tape, pair.phonemes, c)
    asr = asr_on_tape(tape, source, c)

    recon_mel = decoder_on_tape(tape, content, speaker, phonetic, n_frames, c)
    l_recon = ops.mse(recon_mel, target)
    if fixed_targets is None:
        phon_target, content_target = ops.stop_gradient(phonetic), ops.stop_gradient(content)
    else:
        phon_target, content_target = (tape.constant(v) for v in fixed_targets)
    l_phon = ops.mae(asr, phon_target)
    l_content = ops.mae(content_on_tape(tape, recon_mel, c), content_target)
    total = ops.add(ops.add(l_recon, ops.scale(l_phon, c.beta)), ops.scale(l_content, c.lambda_))
    return LossGraph(tape, total, l_recon, l_phon, l_content, recon_mel, phon_target, content_target)


def compute_loss(pair: UtterancePair, state: ModelState) -> LossReport:
    return loss_graph(pair, state).report()


@dataclass(frozen=True)
class StepReport:
    total: float
    recon: float
    phonetic: float
    content: float
    grad_norm: float
    items: tuple = field(default=(), repr=False)


def batch_gradients(batch, state: ModelState):
    """Mean loss gradients over the batch, summed in batch order."""
    if not batch:
        raise ModelError("batch must be non-empty")
    scale = 1.0 / len(batch)
    grads = None
    reports = []
    for pair in batch:
        g = loss_graph(pair, state)
        rep = g.report()
        if not np.isfinite(rep.total):
            raise DivergedError(f"diverged: non-finite loss on {pair.utterance_id or 'batch item'}")
        reports.append(rep)
        item = g.tape.backward(g.total, np.asarray(scale, dtype=state.dtype))
        grads = item if grads is None else {k: grads[k] + item[k] for k in grads}
    return grads, reports


def train_step(batch, state: ModelState, opt: AdamState):
    """One Adam update on the batch-mean loss; returns ``(state, opt, report)``.

    On divergence the inputs are returned untouched by raising before any
    update is applied.
    """
    grads, reports = batch_gradients(batch, state)
    grads, norm = clip_by_global_norm(grads, state.config.clip_norm)
    params, new_opt = optimizer_step(state.params, grads, opt)
    n = len(reports)
    report = StepReport(
        total=sum(r.total for r in reports) / n,
        recon=sum(r.recon for r in reports) / n,
        phonetic=sum(r.phonetic for r in reports) / n,
        content=sum(r.content for r in reports) / n,
        grad_norm=norm,
        items=tuple(reports),
    )
    return ModelState(state.config, params), new_opt, report


# ---------------------------------------------------------------------------
# conversion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConversionResult:
    mel: MelSpectrogram
    wave: Waveform | None = None


def convert_mel(source_mel, target_ref_mel, state: ModelState) -> np.ndarray:
    """Decode the source content with the target speaker and the ASR embedding."""
    src = _mel_values(source_mel)
    tgt = _mel_values(target_ref_mel)
    c = state.config
    _check_mel(src, c, max(c.ds_factor, MIN_FRAMES), "convert source")
    _check_mel(tgt, c, MIN_FRAMES, "convert target reference")
    tape = _eval_tape(state)
    source = tape.constant(src)
    content = content_on_tape(tape, source, c)
    speaker = speaker_on_tape(tape, tape.constant(tgt), c)
    asr = asr_on_tape(tape, source, c)
    return decoder_on_tape(tape, content, speaker, asr, src.shape[0], c).value


def convert(
    source_audio: Waveform,
    target_ref_audio: Waveform,
    state: ModelState,
    vocoder: bool = False,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: MelConfig = MelConfig(),
    gl_iters: int = 60,
) -> ConversionResult:
    src_mel = mel_spectrogram(source_audio, stft_cfg, mel_cfg)
    tgt_mel = mel_spectrogram(target_ref_audio, stft_cfg, mel_cfg)
    out = MelSpectrogram(convert_mel(src_mel, tgt_mel, state), stft_cfg.hop_size, source_audio.sample_rate_hz)
    wave = griffin_lim(out, stft_cfg, mel_cfg, gl_iters) if vocoder else None
    return ConversionResult(out, wave)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    return {k: v.shape for k, v in init_model(config).params.items()}


def save_model(path, state: ModelState, opt: AdamState | None = None, extra: dict | None = None) -> None:
    metadata = {"model_config": state.config.to_dict(), "tool_version": __version__, **(extra or {})}
    ckpt.save(path, state.params, opt, metadata)


def load_model(path) -> tuple[ModelState, AdamState | None, dict]:
    params, opt, metadata = ckpt.load(path)
    if "model_config" not in metadata:
        raise ckpt.CheckpointError("checkpoint carries no model_config")
    config = ModelConfig.from_dict(metadata["model_config"])
    shapes = expected_shapes(config)
    got = {k: v.shape for k, v in params.items()}
    if shapes != got:
        missing = sorted(shapes.keys() - got.keys())
        extra = sorted(got.keys() - shapes.keys())
        wrong = sorted(k for k in shapes.keys() & got.keys() if shapes[k] != got[k])
        raise ckpt.CheckpointError(
            f"checkpoint does not match its architecture (missing={missing[:3]}, extra={extra[:3]}, shape={wrong[:3]})"
        )
    frozen = {p for p in params.paths() if p.startswith("speaker.")}
    if set(params.frozen) != frozen:
        raise ckpt.CheckpointError("checkpoint speaker encoder is not marked frozen")
    return ModelState(config, params), opt, metadata


def config_json(config: ModelConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# gradient check of the composed loss
# ---------------------------------------------------------------------------


def small_config(**overrides) -> ModelConfig:
    """Narrow widths with the full module structure, cheap enough to finite-difference."""
    base = dict(
        d_s=8,
        d_c=4,
        d_p=6,
        speaker_hidden=6,
        content_channels=6,
        asr_channels=6,
        asr_hidden=4,
        phonetic_embed=5,
        phonetic_hidden=6,
        decoder_hidden=8,
        decoder_channels=8,
        mel_mean=-5.0,
        mel_std=3.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_pair(config: ModelConfig, n_frames: int = 32, seed: int = 0) -> UtterancePair:
    rng = np.random.default_rng(seed)

    def mel():
        return config.mel_mean + config.mel_std * rng.standard_normal((n_frames, config.n_mels))

    clean = mel()
    source = clean + rng.standard_normal(clean.shape)
    phonemes = PhonemeSequence(tuple(rng.integers(1, config.n_phonemes, size=5)), "toy")
    return UtterancePair(source, clean, mel(), phonemes, "toy")


def loss_gradient_check(state: ModelState, pair: UtterancePair, eps=1e-5, seed=0, max_scalars=400):
    """Finite-difference check of ``L`` against every module's trainable parameters."""
    from .grad.gradcheck import gradient_check_report

    base = loss_graph(pair, state)
    targets = (base.phonetic_target.value, base.content_target.value)
    return gradient_check_report(
        lambda tape: loss_graph(pair, state, tape, targets).total, state.params, eps, seed, max_scalars
    )

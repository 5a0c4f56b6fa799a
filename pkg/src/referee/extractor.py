"""Ground-truth style descriptors from waveforms.

Frame-level F0 (normalized autocorrelation), log-RMS energy and a small
convolutional phone classifier whose softmax outputs are the PPG. Frame
features are collapsed to phoneme level with the alignment durations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from referee.audio import frame_signal, log_mel
from referee.core import (
    ContractError,
    StyleDescriptors,
    UtteranceRecord,
    length_regulate,
    phoneme_average,
    segment_has_frames,
)
from referee.utils import logger, make_adam, pad_1d, seed_everything

VOICING_THRESHOLD = 0.3
# candidate peaks within this fraction of the best correlation win by smallest lag (octave guard)
OCTAVE_RATIO = 0.85
ENERGY_FLOOR = 1e-8


class AlignmentError(ValueError):
    def __init__(self, utt_id: str, frames: int, expected: int):
        super().__init__(f"{utt_id}: {frames} analysis frames but durations sum to {expected}")
        self.utt_id = utt_id


@dataclass(frozen=True)
class FrameConfig:
    sample_rate: int = 24000
    hop: int = 240
    window: int = 960
    f0_min: float = 50.0
    f0_max: float = 600.0
    n_mels: int = 80

    def __post_init__(self):
        if self.hop > self.window:
            raise ValueError("hop must not exceed window")
        if not self.f0_min < self.f0_max:
            raise ValueError("f0_min must be below f0_max")
        if self.sample_rate / self.f0_min > self.window:
            raise ValueError("window must hold one period of f0_min")


@dataclass(frozen=True)
class PpgModelConfig:
    input_dim: int = 80
    hidden: tuple[int, ...] = (256, 256, 256)
    output_dim: int = 218
    kernel: int = 5


def _check_length(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < cfg.window:
        raise ValueError(f"waveform shorter than one window ({cfg.window} samples): nothing to analyze")
    return x


def nccf(frames: np.ndarray, lag_min: int, lag_max: int) -> np.ndarray:
    """Normalized cross-correlation of each frame with itself at lags [lag_min, lag_max].

    r(k) = sum x[n] x[n+k] / sqrt(sum_{n<W-k} x[n]^2 * sum_{n>=k} x[n]^2)
    """
    frames = frames - frames.mean(axis=1, keepdims=True)
    w = frames.shape[1]
    n_fft = 1 << (2 * w - 1).bit_length()
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    acf = np.fft.irfft(spec * spec.conj(), n=n_fft, axis=1)
    lags = np.arange(lag_min, lag_max + 1)
    num = acf[:, lags]
    cs = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames**2, axis=1)], axis=1)
    e_head = cs[:, w - lags]
    e_tail = cs[:, w : w + 1] - cs[:, lags]
    den = e_head * e_tail
    out = np.zeros_like(num)
    ok = den > 1e-20
    out[ok] = num[ok] / np.sqrt(den[ok])
    return out


def _pick_lag(r: np.ndarray, lag_min: int) -> Optional[float]:
    best = r.max()
    if best < VOICING_THRESHOLD:
        return None
    interior = np.flatnonzero((r[1:-1] >= r[:-2]) & (r[1:-1] >= r[2:])) + 1
    cand = interior[r[interior] >= OCTAVE_RATIO * best]
    if cand.size == 0:
        return None
    i = int(cand[0])
    a, b, c = r[i - 1], r[i], r[i + 1]
    denom = a - 2 * b + c
    delta = 0.5 * (a - c) / denom if denom < 0 else 0.0
    return lag_min + i + float(np.clip(delta, -0.5, 0.5))


def estimate_f0(waveform, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """Frame-wise F0 in Hz, 0 for unvoiced frames."""
    x = _check_length(waveform, cfg)
    frames = frame_signal(x, cfg.window, cfg.hop)
    lag_min = max(2, int(np.floor(cfg.sample_rate / cfg.f0_max)) - 1)
    lag_max = min(cfg.window - 2, int(np.ceil(cfg.sample_rate / cfg.f0_min)) + 1)
    r = nccf(frames, lag_min, lag_max)
    f0 = np.zeros(frames.shape[0])
    for t in range(frames.shape[0]):
        lag = _pick_lag(r[t], lag_min)
        if lag is None:
            continue
        # the integer peak decides voicing; interpolation only refines it
        if cfg.f0_min <= cfg.sample_rate / round(lag) <= cfg.f0_max:
            f0[t] = np.clip(cfg.sample_rate / lag, cfg.f0_min, cfg.f0_max)
    return f0


def compute_energy(waveform, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """log(max(RMS, 1e-8)) of each (rectangular) analysis frame."""
    x = _check_length(waveform, cfg)
    frames = frame_signal(x, cfg.window, cfg.hop)
    rms = np.sqrt(np.mean(frames**2, axis=1))
    return np.log(np.maximum(rms, ENERGY_FLOOR))


class PpgModel(nn.Module):
    """Frame-wise phone classifier over log-mel features."""

    def __init__(self, cfg: PpgModelConfig):
        super().__init__()
        self.cfg = cfg
        self.norm = nn.LayerNorm(cfg.input_dim)
        layers = []
        width = cfg.input_dim
        for h in cfg.hidden:
            layers += [nn.Conv1d(width, h, cfg.kernel, padding=cfg.kernel // 2), nn.ReLU()]
            width = h
        self.convs = nn.Sequential(*layers)
        self.out = nn.Conv1d(width, cfg.output_dim, 1)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """mel (B, T, input_dim) -> logits (B, T, output_dim)."""
        x = self.norm(mel).transpose(1, 2)
        return self.out(self.convs(x)).transpose(1, 2)


def frame_labels(record: UtteranceRecord) -> np.ndarray:
    return length_regulate(np.asarray(record.phonemes.ids), record.durations)


def train_ppg_model(
    corpus: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: PpgModelConfig,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    model: Optional[PpgModel] = None,
    log=None,
) -> PpgModel:
    """Fit the classifier with frame-wise cross-entropy.

    ``corpus`` holds ``(mel (T, input_dim), labels (T,))`` pairs. ``log``, if
    given, receives ``(step, loss)`` per step.
    """
    for _, labels in corpus:
        if labels.size and (labels.max() >= cfg.output_dim or labels.min() < 0):
            raise ValueError(f"label id {int(labels.max())} outside [0, {cfg.output_dim})")
    seed_everything(seed)
    if model is None:
        model = PpgModel(cfg)
    if steps <= 0:
        return model
    if not corpus:
        raise ValueError("empty PPG training corpus")
    opt = make_adam(model.parameters(), lr)
    gen = torch.Generator().manual_seed(seed)
    mels = [torch.as_tensor(m, dtype=torch.float32) for m, _ in corpus]
    labs = [torch.as_tensor(l, dtype=torch.long) for _, l in corpus]
    model.train()
    for step in range(1, steps + 1):
        idx = torch.randperm(len(corpus), generator=gen)[:batch_size].tolist()
        mel = pad_1d([mels[i] for i in idx])
        lab = pad_1d([labs[i] for i in idx], value=-100)
        logits = model(mel)
        loss = F.cross_entropy(logits.reshape(-1, cfg.output_dim), lab.reshape(-1), ignore_index=-100)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None:
            log(step, loss.item())
        if step % 100 == 0:
            logger.debug("ppg step %d loss %.4f", step, loss.item())
    model.eval()
    return model


@torch.no_grad()
def infer_ppg(model: PpgModel, mel) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float32)
    if mel.ndim != 2 or mel.shape[1] != model.cfg.input_dim:
        raise ContractError(f"mel must be (T, {model.cfg.input_dim}), got {mel.shape}")
    if mel.shape[0] == 0:
        return np.zeros((0, model.cfg.output_dim), dtype=np.float32)
    was_training = model.training
    model.eval()
    logits = model(torch.from_numpy(mel)[None])[0].double()
    model.train(was_training)
    return torch.softmax(logits, dim=-1).numpy().astype(np.float32)


def pad_for_analysis(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Zero-pad so that N samples give N // hop hop-centred analysis frames."""
    left = (cfg.window - cfg.hop) // 2
    right = cfg.window - cfg.hop - left
    return np.pad(np.asarray(x, dtype=np.float64), (left, right))


@dataclass
class FrameFeatures:
    mel: np.ndarray
    f0: np.ndarray
    log_rms: np.ndarray

    @property
    def num_frames(self) -> int:
        return int(self.f0.shape[0])


def analyze(waveform: np.ndarray, cfg: FrameConfig) -> FrameFeatures:
    x = pad_for_analysis(waveform, cfg)
    return FrameFeatures(
        mel=log_mel(x, cfg.sample_rate, cfg.window, cfg.hop, cfg.n_mels),
        f0=estimate_f0(x, cfg),
        log_rms=compute_energy(x, cfg),
    )


def fit_to_durations(feats: FrameFeatures, total: int, utt_id: str) -> FrameFeatures:
    """Reconcile a one-frame disagreement between analysis and alignment."""
    t = feats.num_frames
    if abs(t - total) > 1:
        raise AlignmentError(utt_id, t, total)
    if t == total:
        return feats
    if t > total:
        return FrameFeatures(feats.mel[:total], feats.f0[:total], feats.log_rms[:total])
    pad = lambda a: np.concatenate([a, a[-1:]], axis=0)  # noqa: E731
    return FrameFeatures(pad(feats.mel), pad(feats.f0), pad(feats.log_rms))


@dataclass
class RawProsody:
    """Phoneme-level prosody before standardization."""

    log_pitch: np.ndarray  # log of voiced-frame mean F0, 0 where unvoiced
    energy: np.ndarray  # mean frame log-RMS
    voicing: np.ndarray


def phoneme_prosody(f0: np.ndarray, log_rms: np.ndarray, durations) -> RawProsody:
    voiced = f0 > 0
    mean_f0 = phoneme_average(f0, durations, voiced)
    voicing = segment_has_frames(durations, voiced)
    log_pitch = np.zeros_like(mean_f0)
    log_pitch[voicing] = np.log(mean_f0[voicing])
    return RawProsody(log_pitch, phoneme_average(log_rms, durations), voicing)


@dataclass
class ProsodyStats:
    pitch: tuple[float, float] = (0.0, 1.0)
    energy: tuple[float, float] = (0.0, 1.0)

    @classmethod
    def fit(cls, items: Sequence[RawProsody]) -> "ProsodyStats":
        lp = np.concatenate([r.log_pitch[r.voicing] for r in items]) if items else np.zeros(0)
        en = np.concatenate([r.energy for r in items]) if items else np.zeros(0)

        def mstd(v):
            if v.size == 0:
                return (0.0, 1.0)
            s = float(v.std())
            return (float(v.mean()), s if s > 1e-8 else 1.0)

        # round through float32 so archived stats reproduce the values used
        p, e = mstd(lp), mstd(en)
        f32 = lambda t: tuple(float(np.float32(v)) for v in t)  # noqa: E731
        return cls(pitch=f32(p), energy=f32(e))


def standardize(raw: RawProsody, stats: ProsodyStats) -> tuple[np.ndarray, np.ndarray]:
    pm, ps = stats.pitch
    em, es = stats.energy
    pitch = np.where(raw.voicing, (raw.log_pitch - pm) / ps, 0.0)
    energy = (raw.energy - em) / es
    return pitch, energy


def extract_style(
    record: UtteranceRecord,
    waveform: np.ndarray,
    ppg_model: PpgModel,
    cfg: FrameConfig = FrameConfig(),
    stats: Optional[ProsodyStats] = None,
) -> StyleDescriptors:
    """Descriptors for one utterance; ``stats`` defaults to identity scaling."""
    stats = stats or ProsodyStats()
    feats = fit_to_durations(analyze(waveform, cfg), record.num_frames, record.id)
    raw = phoneme_prosody(feats.f0, feats.log_rms, record.durations)
    pitch, energy = standardize(raw, stats)
    return StyleDescriptors(
        ppg=infer_ppg(ppg_model, feats.mel),
        pitch=pitch,
        energy=energy,
        durations=np.asarray(record.durations),
        voicing=raw.voicing,
        style_id=record.style_id,
        phones=np.asarray(record.phonemes.ids),
        pitch_stats=stats.pitch,
        energy_stats=stats.energy,
    )

"""Text-to-style model.

A FastSpeech 2 style phoneme encoder / PPG decoder whose layer norms are
conditioned on a style embedding. It predicts frame-level PPGs plus
phoneme-level pitch, energy and log-duration.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from referee.core import ContractError, PhonemeSequence, StyleDescriptors, StyleId
from referee.utils import logger, make_adam, pad_1d, seed_everything, sequence_mask

CLN_EPS = 1e-5


@dataclass
class T2SConfig:
    num_phones: int = 218
    num_styles: int = 38
    num_blocks_encoder: int = 4
    num_blocks_decoder: int = 4
    hidden: int = 256
    heads: int = 2
    conv_kernel: int = 9
    conv_filter: int = 1024
    style_embedding_dim: int = 128
    ppg_dim: int = 218
    dropout: float = 0.1
    predictor_kernel: int = 3
    predictor_hidden: int = 256

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


def cln(x, style_vec, scale_weight, scale_bias, shift_weight, shift_bias, eps: float = CLN_EPS):
    """Layer norm over the last axis, modulated by affine maps of ``style_vec``.

    x: (..., N, H); style_vec: (..., S); weights: (H, S); biases: (H,).
    """
    h = x.shape[-1]
    if scale_weight.shape[0] != h or shift_weight.shape[0] != h:
        raise ContractError(f"modulation maps produce {scale_weight.shape[0]} features, input has {h}")
    if style_vec.shape[-1] != scale_weight.shape[1]:
        raise ContractError("style vector size does not match modulation maps")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    normed = (x - mean) / torch.sqrt(var + eps)
    scale = F.linear(style_vec, scale_weight, scale_bias).unsqueeze(-2)
    shift = F.linear(style_vec, shift_weight, shift_bias).unsqueeze(-2)
    return normed * scale + shift


class ConditionalLayerNorm(nn.Module):
    def __init__(self, hidden: int, style_dim: int, eps: float = CLN_EPS):
        super().__init__()
        self.eps = eps
        self.scale = nn.Linear(style_dim, hidden)
        self.shift = nn.Linear(style_dim, hidden)
        nn.init.normal_(self.scale.weight, std=0.02)
        nn.init.ones_(self.scale.bias)
        nn.init.normal_(self.shift.weight, std=0.02)
        nn.init.zeros_(self.shift.bias)

    def forward(self, x, style):
        return cln(x, style, self.scale.weight, self.scale.bias, self.shift.weight, self.shift.bias, self.eps)


def sinusoid_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe.to(dtype)


class FFTBlock(nn.Module):
    """Self-attention + conv feed-forward, each followed by a conditional layer norm."""

    def __init__(self, cfg: T2SConfig):
        super().__init__()
        self.attn = nn.MultiheadAttention(cfg.hidden, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.norm1 = ConditionalLayerNorm(cfg.hidden, cfg.style_embedding_dim)
        self.conv1 = nn.Conv1d(cfg.hidden, cfg.conv_filter, cfg.conv_kernel, padding=cfg.conv_kernel // 2)
        self.conv2 = nn.Conv1d(cfg.conv_filter, cfg.hidden, 1)
        self.norm2 = ConditionalLayerNorm(cfg.hidden, cfg.style_embedding_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, style, pad_mask):
        keep = (~pad_mask).unsqueeze(-1).to(x.dtype)
        a, _ = self.attn(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        x = self.norm1(x + self.dropout(a), style) * keep
        y = self.conv2(F.relu(self.conv1(x.transpose(1, 2)))).transpose(1, 2)
        return self.norm2(x + self.dropout(y), style) * keep


class VariancePredictor(nn.Module):
    def __init__(self, cfg: T2SConfig):
        super().__init__()
        k, h = cfg.predictor_kernel, cfg.predictor_hidden
        self.conv1 = nn.Conv1d(cfg.hidden, h, k, padding=k // 2)
        self.norm1 = nn.LayerNorm(h)
        self.conv2 = nn.Conv1d(h, h, k, padding=k // 2)
        self.norm2 = nn.LayerNorm(h)
        self.dropout = nn.Dropout(cfg.dropout)
        self.out = nn.Linear(h, 1)

    def forward(self, x, pad_mask):
        x = x.transpose(1, 2)
        x = self.dropout(self.norm1(F.relu(self.conv1(x)).transpose(1, 2)))
        x = self.dropout(self.norm2(F.relu(self.conv2(x.transpose(1, 2))).transpose(1, 2)))
        return self.out(x).squeeze(-1).masked_fill(pad_mask, 0.0)


def regulate_batch(x: torch.Tensor, durations: torch.Tensor, lengths: torch.Tensor):
    """Differentiable batched length regulation: (B, P, H) -> (B, T, H), frame lengths."""
    out = [torch.repeat_interleave(x[b, : lengths[b]], durations[b, : lengths[b]], dim=0) for b in range(x.shape[0])]
    frame_lens = torch.tensor([o.shape[0] for o in out], dtype=torch.long)
    if int(frame_lens.max()) == 0:
        return x.new_zeros(x.shape[0], 0, x.shape[2]), frame_lens
    return pad_1d(out), frame_lens


def decode_durations(log_duration: torch.Tensor) -> torch.Tensor:
    return torch.clamp(torch.round(torch.exp(log_duration)), min=1).long()


class T2SOutput(NamedTuple):
    ppg: torch.Tensor  # (B, T, ppg_dim)
    frame_lens: torch.Tensor  # (B,)
    encoding: torch.Tensor  # (B, P, hidden), encoder output before pitch/energy addition
    log_duration: torch.Tensor  # (B, P)
    pitch: torch.Tensor  # (B, P)
    energy: torch.Tensor  # (B, P)
    durations: torch.Tensor  # (B, P) durations used for expansion
    phone_lens: torch.Tensor


class T2SModel(nn.Module):
    def __init__(self, cfg: T2SConfig):
        super().__init__()
        self.cfg = cfg
        self.phone_embedding = nn.Embedding(cfg.num_phones, cfg.hidden)
        self.style_embedding = nn.Embedding(cfg.num_styles, cfg.style_embedding_dim)
        self.encoder = nn.ModuleList([FFTBlock(cfg) for _ in range(cfg.num_blocks_encoder)])
        self.duration_predictor = VariancePredictor(cfg)
        self.pitch_predictor = VariancePredictor(cfg)
        self.energy_predictor = VariancePredictor(cfg)
        self.pitch_proj = nn.Linear(1, cfg.hidden)
        self.energy_proj = nn.Linear(1, cfg.hidden)
        self.decoder = nn.ModuleList([FFTBlock(cfg) for _ in range(cfg.num_blocks_decoder)])
        self.ppg_head = nn.Linear(cfg.hidden, cfg.ppg_dim)

    def _positions(self, n: int, like: torch.Tensor) -> torch.Tensor:
        return sinusoid_positions(n, self.cfg.hidden, like.dtype)[None]

    def encode(self, phones, phone_lens, style_vec):
        pad = ~sequence_mask(phone_lens, phones.shape[1])
        x = self.phone_embedding(phones)
        x = x + self._positions(phones.shape[1], x)
        for block in self.encoder:
            x = block(x, style_vec, pad)
        return x, pad

    def forward(self, phones, phone_lens, styles, durations=None, pitch=None, energy=None) -> T2SOutput:
        """Teacher-forced when ``durations``/``pitch``/``energy`` are given, free-running otherwise."""
        if phones.shape[1] == 0 or int(phone_lens.min()) < 1:
            raise ContractError("empty phoneme sequence")
        style_vec = self.style_embedding(styles)
        enc, pad = self.encode(phones, phone_lens, style_vec)
        log_dur = self.duration_predictor(enc, pad)
        pitch_hat = self.pitch_predictor(enc, pad)
        energy_hat = self.energy_predictor(enc, pad)
        p_in = pitch_hat if pitch is None else pitch.to(enc.dtype)
        e_in = energy_hat if energy is None else energy.to(enc.dtype)
        x = enc + self.pitch_proj(p_in.unsqueeze(-1)) + self.energy_proj(e_in.unsqueeze(-1))
        x = x * (~pad).unsqueeze(-1).to(x.dtype)
        if durations is None:
            durations = decode_durations(log_dur.detach()).masked_fill(pad, 0)
        durations = durations.long()
        if (durations < 0).any():
            raise ContractError("negative duration")
        frames, frame_lens = regulate_batch(x, durations, phone_lens)
        if frames.shape[1] > 0:
            fpad = ~sequence_mask(frame_lens, frames.shape[1])
            y = frames + self._positions(frames.shape[1], frames)
            for block in self.decoder:
                y = block(y, style_vec, fpad)
            ppg = self.ppg_head(y) * (~fpad).unsqueeze(-1).to(y.dtype)
        else:
            ppg = frames.new_zeros(frames.shape[0], 0, self.cfg.ppg_dim)
        return T2SOutput(ppg, frame_lens, enc, log_dur, pitch_hat, energy_hat, durations, phone_lens)


def t2s_forward(model: T2SModel, text: PhonemeSequence, style: StyleId, teacher: Optional[StyleDescriptors] = None) -> T2SOutput:
    """Single-utterance forward; ``teacher`` switches on teacher forcing."""
    if text.inventory_size != model.cfg.num_phones:
        raise ContractError("phoneme inventory does not match the model")
    phones = torch.as_tensor(text.as_array())[None]
    lens = torch.tensor([len(text)])
    styles = torch.tensor([int(style)])
    if teacher is None:
        return model(phones, lens, styles)
    if teacher.num_phonemes != len(text):
        raise ContractError("teacher descriptors do not match the text length")
    dtype = next(model.parameters()).dtype
    return model(
        phones,
        lens,
        styles,
        durations=torch.as_tensor(teacher.durations)[None],
        pitch=torch.as_tensor(teacher.pitch, dtype=dtype)[None],
        energy=torch.as_tensor(teacher.energy, dtype=dtype)[None],
    )


@dataclass
class DescriptorBatch:
    phones: torch.Tensor
    phone_lens: torch.Tensor
    styles: torch.Tensor
    durations: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor
    voicing: torch.Tensor
    ppg: torch.Tensor
    frame_lens: torch.Tensor

    def to(self, dtype):
        return DescriptorBatch(
            self.phones, self.phone_lens, self.styles, self.durations,
            self.pitch.to(dtype), self.energy.to(dtype), self.voicing,
            self.ppg.to(dtype), self.frame_lens,
        )


def collate(descs: Sequence[StyleDescriptors], dtype=torch.float32) -> DescriptorBatch:
    for d in descs:
        if d.phones is None:
            raise ContractError("descriptors carry no phone ids")
    return DescriptorBatch(
        phones=pad_1d([torch.as_tensor(d.phones) for d in descs]),
        phone_lens=torch.tensor([d.num_phonemes for d in descs]),
        styles=torch.tensor([d.style_id for d in descs]),
        durations=pad_1d([torch.as_tensor(d.durations) for d in descs]),
        pitch=pad_1d([torch.as_tensor(d.pitch, dtype=dtype) for d in descs]),
        energy=pad_1d([torch.as_tensor(d.energy, dtype=dtype) for d in descs]),
        voicing=pad_1d([torch.as_tensor(d.voicing) for d in descs], value=False),
        ppg=pad_1d([torch.as_tensor(d.ppg, dtype=dtype) for d in descs]),
        frame_lens=torch.tensor([d.num_frames for d in descs]),
    )


def teacher_forward(model: T2SModel, batch: DescriptorBatch) -> T2SOutput:
    return model(batch.phones, batch.phone_lens, batch.styles, batch.durations, batch.pitch, batch.energy)


def _masked_mse(pred, target, mask):
    mask = mask.to(pred.dtype)
    n = mask.sum()
    if float(n) == 0:
        return pred.new_zeros(())
    return (((pred - target) ** 2) * mask).sum() / n


def t2s_losses(out: T2SOutput, batch: DescriptorBatch) -> dict[str, torch.Tensor]:
    """MSE on PPG, pitch (voiced phonemes only), energy and log-duration, plus their sum."""
    if out.ppg.shape[:2] != batch.ppg.shape[:2] or out.ppg.shape[2] != batch.ppg.shape[2]:
        raise ContractError(f"PPG shape {tuple(out.ppg.shape)} != target {tuple(batch.ppg.shape)}")
    if not torch.equal(out.frame_lens, batch.frame_lens):
        raise ContractError("prediction was not expanded with the teacher durations")
    if out.pitch.shape != batch.pitch.shape:
        raise ContractError("phoneme count mismatch")
    pmask = sequence_mask(batch.phone_lens, batch.pitch.shape[1])
    fmask = sequence_mask(batch.frame_lens, batch.ppg.shape[1])
    ppg_mask = fmask.unsqueeze(-1).expand_as(out.ppg)
    log_dur_target = torch.log(torch.clamp(batch.durations, min=1).to(out.log_duration.dtype))
    losses = {
        "ppg_mse": _masked_mse(out.ppg, batch.ppg, ppg_mask),
        "pitch_mse": _masked_mse(out.pitch, batch.pitch, pmask & batch.voicing),
        "energy_mse": _masked_mse(out.energy, batch.energy, pmask),
        "duration_mse": _masked_mse(out.log_duration, log_dur_target, pmask),
    }
    losses["total"] = losses["ppg_mse"] + losses["pitch_mse"] + losses["energy_mse"] + losses["duration_mse"]
    return losses


@dataclass
class T2SParameterPartition:
    adaptable: list[str] = field(default_factory=list)
    frozen: list[str] = field(default_factory=list)


ADAPTABLE_PREFIXES = ("style_embedding.", "duration_predictor.", "pitch_predictor.", "energy_predictor.")


def partition_parameters(model: T2SModel) -> T2SParameterPartition:
    """Split parameters into the refinement-adaptable set and the frozen rest."""
    cln_params = set()
    for mname, mod in model.named_modules():
        if isinstance(mod, ConditionalLayerNorm):
            cln_params.update(f"{mname}.{p}" for p, _ in mod.named_parameters())
    part = T2SParameterPartition()
    for name, _ in model.named_parameters():
        if name in cln_params or name.startswith(ADAPTABLE_PREFIXES):
            part.adaptable.append(name)
        else:
            part.frozen.append(name)
    return part


def build_model(cfg: T2SConfig, seed: int = 0) -> T2SModel:
    seed_everything(seed)
    return T2SModel(cfg)


@dataclass
class TrainState:
    model: nn.Module
    optimizer: Optional[torch.optim.Optimizer] = None
    step: int = 0


def pretrain(
    model: T2SModel,
    corpus: Sequence[StyleDescriptors],
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    grad_clip: float = 1.0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    start_step: int = 0,
    log: Optional[Callable[[int, dict], None]] = None,
    checkpoint_every: int = 0,
    on_checkpoint: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Teacher-forced multi-style training on extracted descriptors."""
    if optimizer is None:
        optimizer = make_adam(model.parameters(), lr)
    state = TrainState(model, optimizer, start_step)
    if steps <= 0:
        return state
    if not corpus:
        raise ValueError("empty descriptor corpus")
    gen = torch.Generator().manual_seed(seed + start_step)
    dtype = next(model.parameters()).dtype
    model.train()
    for step in range(start_step + 1, start_step + steps + 1):
        idx = torch.randperm(len(corpus), generator=gen)[: min(batch_size, len(corpus))].tolist()
        batch = collate([corpus[i] for i in idx], dtype)
        losses = t2s_losses(teacher_forward(model, batch), batch)
        optimizer.zero_grad()
        losses["total"].backward()
        if grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
        optimizer.step()
        state.step = step
        if log is not None:
            log(step, {k: v.item() for k, v in losses.items()})
        if step % 100 == 0:
            logger.info("pretrain step %d total %.4f", step, losses["total"].item())
        if checkpoint_every and on_checkpoint and step % checkpoint_every == 0:
            on_checkpoint(state)
    model.eval()
    return state


def ppg_for_synthesis(ppg: np.ndarray) -> np.ndarray:
    """Clamp predicted PPG rows to [0, 1] and renormalize them to sum to 1."""
    p = np.clip(np.asarray(ppg, dtype=np.float64), 0.0, 1.0)
    s = p.sum(axis=1, keepdims=True)
    uniform = np.full_like(p, 1.0 / max(p.shape[1], 1))
    p = np.where(s > 0, p / np.where(s > 0, s, 1.0), uniform)
    return p.astype(np.float32)

"""Episodic adversarial refinement of a pretrained T2S model to one target style.

Each episode pairs a support utterance in the target style (with ground
truth) and a query text from another style (without). A style
discriminator and a phoneme discriminator judge the query predictions in
the least-squares GAN setting, while a reconstruction loss on the support
sample keeps the model anchored. Only the style embedding, the conditional
layer norm maps and the variance predictors are updated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from referee.core import PhonemeSequence, StyleDescriptors, StyleId
from referee.t2s import (
    DescriptorBatch,
    T2SModel,
    T2SOutput,
    collate,
    partition_parameters,
    regulate_batch,
    t2s_losses,
    teacher_forward,
)
from referee.utils import logger, make_adam, pad_1d, sequence_mask

LOG_COLUMNS = ("step", "L_Ds", "L_Dt", "L_adv", "L_recon", "L_T2S")


class ConfigurationError(ValueError):
    pass


@dataclass
class DiscriminatorConfig:
    widths: tuple[int, ...] = (256, 256, 256)
    kernel: int = 3
    pooling: str = "mean"


@dataclass
class RefineConfig:
    alpha: float = 10.0
    lr: float = 1e-5
    batch: int = 16
    steps: int = 5000
    update_ratio: int = 1
    disc_lr: float = 2e-4
    squared_fake: bool = True
    recon_duration: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.update_ratio < 1:
            raise ValueError("update_ratio must be at least 1")


@dataclass
class Episode:
    support_text: PhonemeSequence
    support_descriptors: StyleDescriptors
    query_text: PhonemeSequence
    target_style: StyleId
    query_style: int

    def __post_init__(self):
        if self.query_style == int(self.target_style):
            raise ConfigurationError("query text must come from a non-target style")


def _text(desc: StyleDescriptors, inventory: int) -> PhonemeSequence:
    return PhonemeSequence(tuple(int(p) for p in desc.phones), inventory)


def _split(corpus: Sequence[StyleDescriptors], target_style: int):
    support = [d for d in corpus if d.style_id == target_style]
    query = [d for d in corpus if d.style_id != target_style]
    if not support:
        raise ConfigurationError(f"no utterances in target style {target_style}")
    if not query:
        raise ConfigurationError("corpus has no non-target styles to draw query texts from")
    return support, query


def sample_episode(
    corpus: Sequence[StyleDescriptors],
    target_style: int,
    seed: Union[int, np.random.Generator],
    inventory_size: Optional[int] = None,
) -> Episode:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    support, query = _split(corpus, target_style)
    inv = inventory_size or int(max(int(d.phones.max()) for d in corpus)) + 1
    s = support[int(rng.integers(len(support)))]
    q = query[int(rng.integers(len(query)))]
    return Episode(_text(s, inv), s, _text(q, inv), StyleId(target_style), q.style_id)


class SequenceDiscriminator(nn.Module):
    """Conv stack over frames, pooled over time to one score per sequence."""

    def __init__(self, in_dim: int, cfg: DiscriminatorConfig):
        super().__init__()
        if cfg.pooling not in ("mean", "max"):
            raise ValueError(f"unknown pooling {cfg.pooling!r}")
        self.pooling = cfg.pooling
        layers = []
        width = in_dim
        for w in cfg.widths:
            layers += [nn.Conv1d(width, w, cfg.kernel, padding=cfg.kernel // 2), nn.LeakyReLU(0.2)]
            width = w
        self.convs = nn.Sequential(*layers)
        self.head = nn.Linear(width, 1)

    def forward(self, x, lengths):
        """x (B, T, in_dim) -> (B,)"""
        mask = sequence_mask(lengths, x.shape[1]).unsqueeze(-1).to(x.dtype)
        h = self.convs((x * mask).transpose(1, 2)).transpose(1, 2)
        if self.pooling == "mean":
            pooled = (h * mask).sum(1) / mask.sum(1).clamp(min=1)
        else:
            pooled = h.masked_fill(mask == 0, float("-inf")).max(1).values
        return self.head(pooled).squeeze(-1)


def style_input(ppg, pitch, energy, durations, phone_lens):
    """Frame stack [PPG | expanded pitch | expanded energy] and its frame lengths."""
    pe = torch.stack([pitch, energy], dim=-1)
    pe_frames, lens = regulate_batch(pe, durations, phone_lens)
    t = min(ppg.shape[1], pe_frames.shape[1])
    return torch.cat([ppg[:, :t], pe_frames[:, :t]], dim=-1), lens


def phoneme_input(style_x, encoding, durations, phone_lens):
    enc_frames, _ = regulate_batch(encoding, durations, phone_lens)
    return torch.cat([style_x, enc_frames[:, : style_x.shape[1]]], dim=-1)


def discriminator_losses(ds_real, ds_fake, dt_real, dt_fake, squared_fake: bool = True) -> dict:
    """LS-GAN discriminator objectives (real -> 1, fake -> 0), batch-averaged."""
    fake = (lambda v: v**2) if squared_fake else (lambda v: v)
    l_ds = ((ds_real - 1) ** 2 + fake(ds_fake)).mean() if torch.is_tensor(ds_real) else (ds_real - 1) ** 2 + fake(ds_fake)
    l_dt = ((dt_real - 1) ** 2 + fake(dt_fake)).mean() if torch.is_tensor(dt_real) else (dt_real - 1) ** 2 + fake(dt_fake)
    return {"L_Ds": l_ds, "L_Dt": l_dt, "L_D": l_ds + l_dt}


def generator_losses(ds_fake, dt_fake, l_recon, alpha: float = 10.0) -> dict:
    """Adversarial terms push fake scores to 1; total = alpha * recon + adv."""
    if torch.is_tensor(ds_fake):
        l_adv = ((ds_fake - 1) ** 2).mean() + ((dt_fake - 1) ** 2).mean()
    else:
        l_adv = (ds_fake - 1) ** 2 + (dt_fake - 1) ** 2
    return {"L_adv": l_adv, "L_recon": l_recon, "L_T2S": alpha * l_recon + l_adv}


def reconstruction_loss(out: T2SOutput, batch: DescriptorBatch, include_duration: bool = True):
    losses = t2s_losses(out, batch)
    total = losses["ppg_mse"] + losses["pitch_mse"] + losses["energy_mse"]
    if include_duration:
        total = total + losses["duration_mse"]
    return total


@dataclass
class RefineState:
    model: T2SModel
    disc_style: SequenceDiscriminator
    disc_phone: SequenceDiscriminator
    log: list[dict] = field(default_factory=list)


def build_discriminators(model: T2SModel, cfg: DiscriminatorConfig, seed: int = 0):
    torch.manual_seed(seed)
    d_in = model.cfg.ppg_dim + 2
    dtype = next(model.parameters()).dtype
    ds = SequenceDiscriminator(d_in, cfg).to(dtype)
    dt = SequenceDiscriminator(d_in + model.cfg.hidden, cfg).to(dtype)
    return ds, dt


def _episode_batch(episodes: Sequence[Episode], target: int, dtype):
    support = collate([e.support_descriptors for e in episodes], dtype)
    q_phones = pad_1d([torch.as_tensor(e.query_text.as_array()) for e in episodes])
    q_lens = torch.tensor([len(e.query_text) for e in episodes])
    q_styles = torch.full((len(episodes),), target, dtype=torch.long)
    return support, q_phones, q_lens, q_styles


def refine(
    model: T2SModel,
    corpus: Sequence[StyleDescriptors],
    target_style: int,
    cfg: RefineConfig = RefineConfig(),
    disc_cfg: DiscriminatorConfig = DiscriminatorConfig(),
    seed: int = 0,
    log: Optional[Callable[[dict], None]] = None,
    discriminators=None,
) -> RefineState:
    """Alternate discriminator and generator updates for ``cfg.steps`` steps."""
    support_set, _ = _split(corpus, target_style)
    if discriminators is None:
        discriminators = build_discriminators(model, disc_cfg, seed)
    ds, dt = discriminators
    state = RefineState(model, ds, dt)
    if cfg.steps == 0:
        return state

    part = partition_parameters(model)
    adaptable = set(part.adaptable)
    params = dict(model.named_parameters())
    saved_flags = {n: p.requires_grad for n, p in params.items()}
    for n, p in params.items():
        p.requires_grad_(n in adaptable)
    g_opt = make_adam([params[n] for n in part.adaptable], cfg.lr)
    d_opt = make_adam(list(ds.parameters()) + list(dt.parameters()), cfg.disc_lr)
    rng = np.random.default_rng(seed)
    inv = model.cfg.num_phones
    dtype = next(model.parameters()).dtype

    def sample():
        eps = [sample_episode(corpus, target_style, rng, inv) for _ in range(cfg.batch)]
        return _episode_batch(eps, target_style, dtype)

    try:
        model.train()
        for step in range(1, cfg.steps + 1):
            # discriminator update(s) on detached generator outputs
            for _ in range(cfg.update_ratio):
                support, q_phones, q_lens, q_styles = sample()
                with torch.no_grad():
                    out_s = teacher_forward(model, support)
                    out_q = model(q_phones, q_lens, q_styles)
                real_x, real_len = style_input(support.ppg, support.pitch, support.energy, support.durations, support.phone_lens)
                fake_x, fake_len = style_input(out_q.ppg, out_q.pitch, out_q.energy, out_q.durations, q_lens)
                d_losses = discriminator_losses(
                    ds(real_x, real_len),
                    ds(fake_x, fake_len),
                    dt(phoneme_input(real_x, out_s.encoding, support.durations, support.phone_lens), real_len),
                    dt(phoneme_input(fake_x, out_q.encoding, out_q.durations, q_lens), fake_len),
                    cfg.squared_fake,
                )
                d_opt.zero_grad(set_to_none=True)
                d_losses["L_D"].backward()
                d_opt.step()

            # generator update through the adaptable parameters only
            support, q_phones, q_lens, q_styles = sample()
            out_s = teacher_forward(model, support)
            out_q = model(q_phones, q_lens, q_styles)
            fake_x, fake_len = style_input(out_q.ppg, out_q.pitch, out_q.energy, out_q.durations, q_lens)
            l_recon = reconstruction_loss(out_s, support, cfg.recon_duration)
            g_losses = generator_losses(
                ds(fake_x, fake_len),
                dt(phoneme_input(fake_x, out_q.encoding, out_q.durations, q_lens), fake_len),
                l_recon,
                cfg.alpha,
            )
            g_opt.zero_grad(set_to_none=True)
            d_opt.zero_grad(set_to_none=True)
            g_losses["L_T2S"].backward()
            g_opt.step()
            d_opt.zero_grad(set_to_none=True)

            row = {
                "step": step,
                "L_Ds": d_losses["L_Ds"].item(),
                "L_Dt": d_losses["L_Dt"].item(),
                "L_adv": g_losses["L_adv"].item(),
                "L_recon": g_losses["L_recon"].item(),
                "L_T2S": g_losses["L_T2S"].item(),
            }
            state.log.append(row)
            if log is not None:
                log(row)
            if step % 100 == 0:
                logger.info("refine step %d L_T2S %.4f L_D %.4f", step, row["L_T2S"], row["L_Ds"] + row["L_Dt"])
    finally:
        for n, p in params.items():
            p.requires_grad_(saved_flags[n])
        model.eval()
    return state


def write_loss_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_COLUMNS})

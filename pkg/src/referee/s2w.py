"""Style-to-wave model.

Stage 1 trains a waveform VAE-GAN (wave encoder -> latent Z -> wave
decoder) with an auxiliary F0 head on Z. Stage 2 freezes the wave encoder
and fits a PPG encoder (frame-aligned Gaussian prior) plus an affine
coupling flow that maps Z onto that prior. The couplings are locally
conditioned on frame-level pitch and energy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from referee.core import ContractError, length_regulate
from referee.utils import hash_tensors, logger, make_adam, pad_1d, sequence_mask

LOG_2PI = math.log(2 * math.pi)


class InternalConsistencyError(RuntimeError):
    pass


@dataclass
class S2WConfig:
    ppg_dim: int = 218
    latent_channels: int = 32
    coupling_layers: int = 4
    flow_hidden: int = 64
    flow_conv_layers: int = 2
    flow_kernel: int = 3
    strides: tuple[int, ...] = (4, 4, 3, 5)
    wave_channels: tuple[int, ...] = (16, 32, 64, 128)
    ppg_hidden: int = 128
    disc_channels: tuple[int, ...] = (16, 32, 64)
    w_recon: float = 1.0
    w_kl: float = 0.01
    w_adv: float = 0.1
    w_f0: float = 0.1
    stft_resolutions: tuple[tuple[int, int, int], ...] = ((512, 128, 512), (1024, 256, 1024), (2048, 512, 2048))

    def __post_init__(self):
        self.strides = tuple(self.strides)
        self.wave_channels = tuple(self.wave_channels)
        self.disc_channels = tuple(self.disc_channels)
        self.stft_resolutions = tuple(tuple(r) for r in self.stft_resolutions)
        if len(self.strides) != len(self.wave_channels):
            raise ValueError("one channel width per stride")
        if self.latent_channels % 2:
            raise ValueError("latent_channels must be even for coupling splits")

    @property
    def hop(self) -> int:
        return int(np.prod(self.strides))

    def to_dict(self) -> dict:
        return asdict(self)


class LatentFrames(NamedTuple):
    z: torch.Tensor  # (B, C, T)
    z_mu: torch.Tensor
    z_sigma: torch.Tensor


@dataclass
class ConditioningFeatures:
    pitch_frames: np.ndarray
    energy_frames: np.ndarray

    def __post_init__(self):
        self.pitch_frames = np.asarray(self.pitch_frames, dtype=np.float32)
        self.energy_frames = np.asarray(self.energy_frames, dtype=np.float32)
        if self.pitch_frames.shape != self.energy_frames.shape:
            raise ContractError("pitch and energy frame counts differ")

    @classmethod
    def from_phonemes(cls, pitch, energy, durations) -> "ConditioningFeatures":
        return cls(length_regulate(np.asarray(pitch)[:, None], durations)[:, 0],
                   length_regulate(np.asarray(energy)[:, None], durations)[:, 0])

    def __len__(self) -> int:
        return int(self.pitch_frames.shape[0])

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        """(1, 2, T)"""
        return torch.as_tensor(np.stack([self.pitch_frames, self.energy_frames]), dtype=dtype)[None]


class WaveEncoder(nn.Module):
    def __init__(self, cfg: S2WConfig):
        super().__init__()
        layers = [nn.Conv1d(1, cfg.wave_channels[0], 7, padding=3), nn.LeakyReLU(0.2)]
        prev = cfg.wave_channels[0]
        for s, c in zip(cfg.strides, cfg.wave_channels):
            layers += [
                nn.Conv1d(prev, c, s, stride=s),
                nn.LeakyReLU(0.2),
                nn.Conv1d(c, c, 3, padding=1),
                nn.LeakyReLU(0.2),
            ]
            prev = c
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv1d(prev, 2 * cfg.latent_channels, 3, padding=1)

    def forward(self, wav):
        """(B, L) -> mu, sigma each (B, C, L / hop)"""
        h = self.proj(self.body(wav.unsqueeze(1)))
        mu, raw = h.chunk(2, dim=1)
        return mu, F.softplus(raw) + 1e-4


class WaveDecoder(nn.Module):
    def __init__(self, cfg: S2WConfig):
        super().__init__()
        chans = list(reversed(cfg.wave_channels))
        layers = [nn.Conv1d(cfg.latent_channels, chans[0], 7, padding=3)]
        prev = chans[0]
        for s, c in zip(reversed(cfg.strides), chans):
            layers += [
                nn.LeakyReLU(0.2),
                nn.ConvTranspose1d(prev, c, s, stride=s),
                nn.LeakyReLU(0.2),
                nn.Conv1d(c, c, 7, padding=3),
            ]
            prev = c
        layers += [nn.LeakyReLU(0.2), nn.Conv1d(prev, 1, 7, padding=3), nn.Tanh()]
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        return self.body(z).squeeze(1)


class WaveDiscriminator(nn.Module):
    """One conv stack scored on the waveform at full and half rate."""

    def __init__(self, cfg: S2WConfig, scales: int = 2):
        super().__init__()
        layers = []
        prev = 1
        for i, c in enumerate(cfg.disc_channels):
            stride = 1 if i == 0 else 4
            layers += [nn.Conv1d(prev, c, 15, stride=stride, padding=7), nn.LeakyReLU(0.2)]
            prev = c
        layers.append(nn.Conv1d(prev, 1, 3, padding=1))
        self.body = nn.Sequential(*layers)
        self.scales = scales

    def forward(self, wav) -> list[torch.Tensor]:
        x = wav.unsqueeze(1)
        outs = []
        for i in range(self.scales):
            if i:
                x = F.avg_pool1d(x, 4, 2, padding=1)
            outs.append(self.body(x))
        return outs


class PpgEncoder(nn.Module):
    """Frame-aligned prior: PPG (B, D, T) -> mean, log-std (B, C, T)."""

    def __init__(self, cfg: S2WConfig):
        super().__init__()
        h = cfg.ppg_hidden
        self.body = nn.Sequential(
            nn.Conv1d(cfg.ppg_dim, h, 5, padding=2),
            nn.ReLU(),
            nn.Conv1d(h, h, 5, padding=2),
            nn.ReLU(),
        )
        self.proj = nn.Conv1d(h, 2 * cfg.latent_channels, 1)

    def forward(self, ppg):
        h = self.proj(self.body(ppg))
        m, logs = h.chunk(2, dim=1)
        return m, logs


class AffineCoupling(nn.Module):
    """Scale/shift one half of the channels from the other half plus pitch/energy."""

    def __init__(self, cfg: S2WConfig, transform_second: bool):
        super().__init__()
        half = cfg.latent_channels // 2
        k = cfg.flow_kernel
        self.transform_second = transform_second
        self.half = half
        self.pre = nn.Conv1d(half, cfg.flow_hidden, k, padding=k // 2)
        self.cond = nn.Conv1d(2, cfg.flow_hidden, 3, padding=1)
        self.convs = nn.ModuleList(
            [nn.Conv1d(cfg.flow_hidden, cfg.flow_hidden, k, padding=k // 2) for _ in range(cfg.flow_conv_layers)]
        )
        self.post = nn.Conv1d(cfg.flow_hidden, 2 * half, 1)
        # zero-initialized so every coupling starts as the identity
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def _split(self, x):
        a, b = x[:, : self.half], x[:, self.half :]
        return (a, b) if self.transform_second else (b, a)

    def _merge(self, keep, moved):
        return torch.cat([keep, moved], 1) if self.transform_second else torch.cat([moved, keep], 1)

    def _stats(self, keep, cond, mask):
        h = self.pre(keep) + self.cond(cond)
        for conv in self.convs:
            h = h + torch.tanh(conv(h * mask))
        log_s, t = self.post(h * mask).chunk(2, dim=1)
        return log_s * mask, t * mask

    def forward(self, x, cond, mask):
        keep, moved = self._split(x)
        log_s, t = self._stats(keep, cond, mask)
        moved = (moved * torch.exp(log_s) + t) * mask
        return self._merge(keep, moved), log_s.sum(dim=(1, 2))

    def inverse(self, u, cond, mask):
        keep, moved = self._split(u)
        log_s, t = self._stats(keep, cond, mask)
        moved = (moved - t) * torch.exp(-log_s) * mask
        return self._merge(keep, moved)


class Flow(nn.Module):
    def __init__(self, cfg: S2WConfig):
        super().__init__()
        self.layers = nn.ModuleList([AffineCoupling(cfg, transform_second=(i % 2 == 0)) for i in range(cfg.coupling_layers)])

    def forward(self, z, cond, mask, return_layers: bool = False):
        log_dets = []
        x = z
        for layer in self.layers:
            x, ld = layer(x, cond, mask)
            log_dets.append(ld)
        total = torch.stack(log_dets, 0).sum(0)
        return (x, total, log_dets) if return_layers else (x, total)

    def inverse(self, u, cond, mask):
        x = u
        for layer in reversed(self.layers):
            x = layer.inverse(x, cond, mask)
        return x


class S2WModel(nn.Module):
    def __init__(self, cfg: S2WConfig):
        super().__init__()
        self.cfg = cfg
        self.wave_encoder = WaveEncoder(cfg)
        self.wave_decoder = WaveDecoder(cfg)
        self.f0_head = nn.Sequential(
            nn.Conv1d(cfg.latent_channels, 32, 3, padding=1), nn.ReLU(), nn.Conv1d(32, 1, 1)
        )
        self.ppg_encoder = PpgEncoder(cfg)
        self.flow = Flow(cfg)

    @property
    def hop(self) -> int:
        return self.cfg.hop


def _dtype(model: nn.Module):
    return next(model.parameters()).dtype


def pad_to_hop(wav: torch.Tensor, hop: int) -> torch.Tensor:
    rem = wav.shape[-1] % hop
    return F.pad(wav, (0, hop - rem)) if rem else wav


def wave_encode(model: S2WModel, waveform, generator: Optional[torch.Generator] = None) -> LatentFrames:
    """Sample Z = mu + sigma * eps from the wave encoder; waveform (L,) or (B, L)."""
    wav = torch.as_tensor(waveform, dtype=_dtype(model))
    if wav.shape[-1] == 0:
        raise ContractError("empty waveform")
    single = wav.ndim == 1
    wav = pad_to_hop(wav[None] if single else wav, model.hop)
    mu, sigma = model.wave_encoder(wav)
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z = mu + sigma * eps
    if single:
        return LatentFrames(z[0], mu[0], sigma[0])
    return LatentFrames(z, mu, sigma)


def wave_decode(model: S2WModel, z) -> torch.Tensor:
    """z (C, T) or (B, C, T) -> waveform of T * hop samples."""
    z = torch.as_tensor(z, dtype=_dtype(model))
    single = z.ndim == 2
    zb = z[None] if single else z
    if zb.shape[1] != model.cfg.latent_channels:
        raise ContractError(f"latent has {zb.shape[1]} channels, model expects {model.cfg.latent_channels}")
    out = model.wave_decoder(zb)
    return out[0] if single else out


def _check_lengths(*ts):
    lens = {t.shape[-1] for t in ts}
    if len(lens) != 1:
        raise ContractError(f"frame counts differ: {sorted(lens)}")


def _as_batch(x, dtype):
    x = torch.as_tensor(x, dtype=dtype)
    return x[None] if x.ndim == 2 else x


def flow_forward(model: S2WModel, z, ppg_encoding, cond, mask=None, return_layers: bool = False):
    """Map latent z (C, T) toward the prior space; returns (u, log_det).

    ``ppg_encoding`` only fixes the frame grid: the couplings themselves see
    pitch/energy, and the PPG enters through the prior.
    """
    dtype = _dtype(model)
    zb = _as_batch(z, dtype)
    cb = cond.tensor(dtype) if isinstance(cond, ConditioningFeatures) else _as_batch(cond, dtype)
    if ppg_encoding is not None:
        _check_lengths(zb, cb, _as_batch(ppg_encoding, dtype))
    else:
        _check_lengths(zb, cb)
    if mask is None:
        mask = torch.ones(zb.shape[0], 1, zb.shape[2], dtype=dtype)
    res = model.flow(zb, cb, mask, return_layers=return_layers)
    if torch.as_tensor(z).ndim == 2:
        u, ld = res[0][0], res[1][0]
        return (u, ld, [l[0] for l in res[2]]) if return_layers else (u, ld)
    return res


def flow_inverse(model: S2WModel, u, cond, mask=None):
    dtype = _dtype(model)
    ub = _as_batch(u, dtype)
    cb = cond.tensor(dtype) if isinstance(cond, ConditioningFeatures) else _as_batch(cond, dtype)
    _check_lengths(ub, cb)
    if mask is None:
        mask = torch.ones(ub.shape[0], 1, ub.shape[2], dtype=dtype)
    x = model.flow.inverse(ub, cb, mask)
    return x[0] if torch.as_tensor(u).ndim == 2 else x


# ---------------------------------------------------------------- stage 1


def stft_magnitude(x, fft, hop, win):
    window = torch.hann_window(win, dtype=x.dtype)
    spec = torch.stft(x, fft, hop, win, window=window, return_complex=True)
    return torch.sqrt(torch.clamp(spec.real**2 + spec.imag**2, min=1e-7))


def multi_resolution_stft_loss(pred, target, resolutions) -> torch.Tensor:
    """Mean over resolutions of spectral convergence + log-magnitude L1."""
    total = pred.new_zeros(())
    for fft, hop, win in resolutions:
        p = stft_magnitude(pred, fft, hop, win)
        t = stft_magnitude(target, fft, hop, win)
        sc = torch.linalg.norm(t - p) / torch.linalg.norm(t).clamp(min=1e-7)
        mag = F.l1_loss(torch.log(p), torch.log(t))
        total = total + sc + mag
    return total / len(resolutions)


def kl_standard_normal(mu, sigma, mask=None) -> torch.Tensor:
    """Mean per element of KL(N(mu, sigma^2) || N(0, 1))."""
    kl = 0.5 * (mu**2 + sigma**2 - 1.0) - torch.log(sigma)
    if mask is None:
        return kl.mean()
    m = mask.expand_as(kl)
    return (kl * m).sum() / m.sum().clamp(min=1)


def lsgan_d_loss(real_outs, fake_outs):
    return sum(((r - 1) ** 2).mean() + (f**2).mean() for r, f in zip(real_outs, fake_outs))


def lsgan_g_loss(fake_outs):
    return sum(((f - 1) ** 2).mean() for f in fake_outs)


def f0_target(f0_hz: np.ndarray) -> np.ndarray:
    """log F0 on voiced frames, 0 on unvoiced ones."""
    f0 = np.asarray(f0_hz, dtype=np.float64)
    out = np.zeros_like(f0)
    out[f0 > 0] = np.log(f0[f0 > 0])
    return out.astype(np.float32)


@dataclass
class WaveItem:
    wav: np.ndarray  # length T * hop
    f0: np.ndarray  # (T,) log-F0 target


def _crop(items: Sequence[WaveItem], idx, seg_frames: int, hop: int, gen: torch.Generator):
    wavs, f0s = [], []
    for i in idx:
        it = items[i]
        t = it.f0.shape[0]
        if t > seg_frames:
            start = int(torch.randint(0, t - seg_frames + 1, (1,), generator=gen))
        else:
            start = 0
        w = it.wav[start * hop : (start + seg_frames) * hop]
        f = it.f0[start : start + seg_frames]
        w = np.pad(w, (0, seg_frames * hop - w.shape[0]))
        f = np.pad(f, (0, seg_frames - f.shape[0]))
        wavs.append(w)
        f0s.append(f)
    return torch.as_tensor(np.stack(wavs)), torch.as_tensor(np.stack(f0s))


@dataclass
class S2WState:
    model: S2WModel
    disc: Optional[WaveDiscriminator] = None
    g_opt: Optional[torch.optim.Optimizer] = None
    d_opt: Optional[torch.optim.Optimizer] = None
    flow_opt: Optional[torch.optim.Optimizer] = None
    stage1_steps: int = 0
    stage2_steps: int = 0


def stage1_parameters(model: S2WModel):
    return [p for n, p in model.named_parameters() if n.startswith(("wave_encoder.", "wave_decoder.", "f0_head."))]


def stage2_parameters(model: S2WModel):
    return [p for n, p in model.named_parameters() if n.startswith(("ppg_encoder.", "flow."))]


def stage1_train(
    state: S2WState,
    items: Sequence[WaveItem],
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 4,
    segment_frames: int = 40,
    seed: int = 0,
    log: Optional[Callable[[int, dict], None]] = None,
) -> S2WState:
    """Alternating LS-GAN training of the wave VAE with an F0 head on Z."""
    if steps <= 0:
        return state
    if not items:
        raise ValueError("stage 1 needs at least one waveform")
    model, cfg = state.model, state.model.cfg
    dtype = _dtype(model)
    if state.disc is None:
        state.disc = WaveDiscriminator(cfg).to(dtype)
    if state.g_opt is None:
        state.g_opt = make_adam(stage1_parameters(model), lr)
    if state.d_opt is None:
        state.d_opt = make_adam(state.disc.parameters(), lr)
    gen = torch.Generator().manual_seed(seed + state.stage1_steps)
    hop = cfg.hop
    model.train()
    for _ in range(steps):
        idx = torch.randint(0, len(items), (min(batch_size, len(items)),), generator=gen).tolist()
        wav, f0 = _crop(items, idx, segment_frames, hop, gen)
        wav, f0 = wav.to(dtype), f0.to(dtype)
        mu, sigma = model.wave_encoder(wav)
        z = mu + sigma * torch.randn(mu.shape, generator=gen, dtype=dtype)
        recon = model.wave_decoder(z)

        d_loss = lsgan_d_loss(state.disc(wav), state.disc(recon.detach()))
        state.d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        state.d_opt.step()

        rec = multi_resolution_stft_loss(recon, wav, cfg.stft_resolutions)
        kl = kl_standard_normal(mu, sigma)
        adv = lsgan_g_loss(state.disc(recon))
        f0_loss = F.mse_loss(model.f0_head(z).squeeze(1), f0)
        g_loss = cfg.w_recon * rec + cfg.w_kl * kl + cfg.w_adv * adv + cfg.w_f0 * f0_loss
        state.g_opt.zero_grad(set_to_none=True)
        state.d_opt.zero_grad(set_to_none=True)
        g_loss.backward()
        state.g_opt.step()
        state.d_opt.zero_grad(set_to_none=True)
        state.stage1_steps += 1
        row = {"recon": rec.item(), "kl": kl.item(), "adv": adv.item(), "f0": f0_loss.item(), "d": d_loss.item(), "g": g_loss.item()}
        if log is not None:
            log(state.stage1_steps, row)
        if state.stage1_steps % 100 == 0:
            logger.info("s2w stage1 step %d recon %.4f", state.stage1_steps, row["recon"])
    model.eval()
    return state


# ---------------------------------------------------------------- stage 2


def gaussian_nll(u, m, logs):
    """Elementwise -log N(u; m, exp(logs)^2)."""
    return 0.5 * LOG_2PI + logs + 0.5 * ((u - m) * torch.exp(-logs)) ** 2


def stage2_loss(u, log_det, m, logs, mask) -> torch.Tensor:
    """-(log prior density of u + log_det), normalized by the number of latent entries."""
    m_full = mask.expand_as(u)
    nll = (gaussian_nll(u, m, logs) * m_full).sum()
    return (nll - log_det.sum()) / m_full.sum()


@dataclass
class FlowItem:
    wav: np.ndarray  # length T * hop
    ppg: np.ndarray  # (T, ppg_dim)
    cond: ConditioningFeatures

    def __post_init__(self):
        t = self.ppg.shape[0]
        if len(self.cond) != t:
            raise ContractError("conditioning and PPG frame counts differ")


def wave_encoder_hash(model: S2WModel) -> str:
    return hash_tensors(model.wave_encoder.named_parameters())


def stage2_train(
    state: S2WState,
    items: Sequence[FlowItem],
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 4,
    seed: int = 0,
    log: Optional[Callable[[int, dict], None]] = None,
) -> S2WState:
    """Fit PPG encoder + flow on latents sampled from the frozen wave encoder."""
    if steps <= 0:
        return state
    if not items:
        raise ValueError("stage 2 needs at least one utterance")
    model = state.model
    dtype = _dtype(model)
    for p in model.wave_encoder.parameters():
        p.requires_grad_(False)
    if state.flow_opt is None:
        state.flow_opt = make_adam(stage2_parameters(model), lr)
    enc_params = {id(p) for p in model.wave_encoder.parameters()}
    if any(id(p) in enc_params for g in state.flow_opt.param_groups for p in g["params"]):
        raise InternalConsistencyError("wave encoder parameters are registered with the stage-2 optimizer")
    before = wave_encoder_hash(model)
    gen = torch.Generator().manual_seed(seed + state.stage2_steps)
    model.wave_encoder.eval()
    model.ppg_encoder.train()
    model.flow.train()
    try:
        for _ in range(steps):
            idx = torch.randint(0, len(items), (min(batch_size, len(items)),), generator=gen).tolist()
            batch = [items[i] for i in idx]
            lens = torch.tensor([b.ppg.shape[0] for b in batch])
            t_max = int(lens.max())
            wav = pad_1d([torch.as_tensor(b.wav, dtype=dtype) for b in batch])
            wav = F.pad(wav, (0, t_max * model.hop - wav.shape[1]))
            ppg = pad_1d([torch.as_tensor(b.ppg, dtype=dtype) for b in batch]).transpose(1, 2)
            cond = pad_1d([b.cond.tensor(dtype)[0].T for b in batch]).transpose(1, 2)
            mask = sequence_mask(lens, t_max).unsqueeze(1).to(dtype)
            with torch.no_grad():
                mu, sigma = model.wave_encoder(wav)
                z = (mu + sigma * torch.randn(mu.shape, generator=gen, dtype=dtype)) * mask
            u, log_det = model.flow(z, cond, mask)
            m, logs = model.ppg_encoder(ppg)
            loss = stage2_loss(u, log_det, m * mask, logs * mask, mask)
            state.flow_opt.zero_grad(set_to_none=True)
            loss.backward()
            state.flow_opt.step()
            state.stage2_steps += 1
            if log is not None:
                log(state.stage2_steps, {"nll": loss.item()})
            if state.stage2_steps % 100 == 0:
                logger.info("s2w stage2 step %d nll %.4f", state.stage2_steps, loss.item())
    finally:
        for p in model.wave_encoder.parameters():
            p.requires_grad_(True)
    if wave_encoder_hash(model) != before:
        raise InternalConsistencyError("wave encoder parameters changed during stage 2")
    model.eval()
    return state


@torch.no_grad()
def s2w_infer(
    model: S2WModel,
    ppg,
    cond: ConditioningFeatures,
    temperature: float = 0.667,
    generator: Optional[torch.Generator] = None,
) -> np.ndarray:
    """Prior sample -> inverse flow -> wave decoder; returns T * hop samples."""
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    dtype = _dtype(model)
    ppg = torch.as_tensor(np.asarray(ppg), dtype=dtype)
    if ppg.ndim != 2 or ppg.shape[1] != model.cfg.ppg_dim:
        raise ContractError(f"ppg must be (T, {model.cfg.ppg_dim})")
    if ppg.shape[0] != len(cond):
        raise ContractError(f"ppg has {ppg.shape[0]} frames, conditioning has {len(cond)}")
    if ppg.shape[0] == 0:
        return np.zeros(0, dtype=np.float32)
    model.eval()
    m, logs = model.ppg_encoder(ppg.T[None])
    u = m
    if temperature > 0:
        u = m + temperature * torch.exp(logs) * torch.randn(m.shape, generator=generator, dtype=dtype)
    mask = torch.ones(1, 1, m.shape[2], dtype=dtype)
    z = model.flow.inverse(u, cond.tensor(dtype), mask)
    return model.wave_decoder(z)[0].numpy().astype(np.float32)

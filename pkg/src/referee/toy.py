"""Seeded synthetic multi-style corpus.

Each phone is rendered as a harmonic complex whose spectral envelope peaks
at a phone-specific formant, so a mel classifier can separate phones while
F0 stays exactly the fundamental. Phone 0 is silence and phone 1 is an
unvoiced noise burst. Styles differ in base F0, tempo, loudness and
per-phone pitch pattern.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from referee.audio import write_wav
from referee.core import ManifestHeader, PhonemeSequence, UtteranceRecord, write_manifest

SILENCE = 0
NOISE = 1


@dataclass(frozen=True)
class ToyStyle:
    f0: float
    tempo: float
    gain: float
    contour: tuple[float, ...]


def make_styles(num_styles: int, num_phones: int, rng: np.random.Generator) -> list[ToyStyle]:
    styles = []
    for k in range(num_styles):
        styles.append(
            ToyStyle(
                f0=110.0 * (1.35**k),
                tempo=[1.0, 1.5, 0.75, 1.25, 0.9][k % 5],
                gain=[0.3, 0.5, 0.2, 0.4, 0.25][k % 5],
                contour=tuple(rng.uniform(-0.15, 0.15, size=num_phones)),
            )
        )
    return styles


def render_phone(phone: int, n: int, f0: float, gain: float, phase: float, sr: int, rng):
    """Return (samples, end phase) for one phone segment."""
    if phone == SILENCE:
        return np.zeros(n), phase
    if phone == NOISE:
        return 0.3 * gain * rng.standard_normal(n), phase
    formant = 400.0 + 300.0 * (phone - 2)
    t = np.arange(n)
    ph = phase + 2 * np.pi * f0 * t / sr
    out = np.zeros(n)
    for h in range(1, int(4000 // f0) + 1):
        amp = np.exp(-(((h * f0 - formant) / 250.0) ** 2)) + 0.15 / h
        out += amp * np.sin(h * ph)
    out *= gain / np.max(np.abs(out))
    return out, (phase + 2 * np.pi * f0 * n / sr) % (2 * np.pi)


def make_toy_corpus(
    out_dir,
    num_styles: int = 3,
    per_style: int = 4,
    num_phones: int = 8,
    seed: int = 0,
    hop: int = 240,
    sample_rate: int = 24000,
    min_len: int = 4,
    max_len: int = 7,
) -> Path:
    """Write WAVs plus ``manifest.jsonl`` into ``out_dir``; returns the manifest path."""
    if num_phones < 3:
        raise ValueError("toy corpus needs at least 3 phones")
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    styles = make_styles(num_styles, num_phones, rng)
    header = ManifestHeader(
        version=1,
        num_styles=num_styles,
        phone_inventory=tuple(["sil", "noise"] + [f"v{i}" for i in range(2, num_phones)]),
        sample_rate=sample_rate,
    )
    base_dur = rng.integers(4, 8, size=num_phones)
    records = []
    for s, style in enumerate(styles):
        for u in range(per_style):
            n = int(rng.integers(min_len, max_len + 1))
            middle = rng.integers(1, num_phones, size=n).tolist()
            phones = [SILENCE] + middle + [SILENCE]
            durs = [max(1, int(round(base_dur[p] * style.tempo))) for p in phones]
            chunks, phase = [], 0.0
            for p, d in zip(phones, durs):
                f0 = style.f0 * (1.0 + style.contour[p])
                x, phase = render_phone(p, d * hop, f0, style.gain, phase, sample_rate, rng)
                chunks.append(x)
            wav = np.concatenate(chunks)
            uid = f"s{s}_u{u:03d}"
            rel = f"wavs/{uid}.wav"
            write_wav(out_dir / rel, wav, sample_rate)
            records.append(
                UtteranceRecord(
                    id=uid,
                    audio_path=rel,
                    phonemes=PhonemeSequence(tuple(phones), num_phones),
                    style_id=s,
                    durations=tuple(durs),
                    sample_rate=sample_rate,
                )
            )
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, header, records)
    return manifest

"""Corpus-level orchestration shared by the CLI and the tests."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from referee.archive import load_descriptors, save_descriptors
from referee.audio import load_audio
from referee.core import Corpus, StyleDescriptors, UtteranceRecord
from referee.extractor import (
    FrameConfig,
    FrameFeatures,
    PpgModel,
    PpgModelConfig,
    ProsodyStats,
    analyze,
    fit_to_durations,
    frame_labels,
    infer_ppg,
    phoneme_prosody,
    standardize,
    train_ppg_model,
)


@dataclass
class ExtractFailure:
    utt_id: str
    reason: str


def _analyze_one(corpus: Corpus, rec, cfg: FrameConfig):
    try:
        x = load_audio(corpus.audio_path(rec), cfg.sample_rate)
        return fit_to_durations(analyze(x, cfg), rec.num_frames, rec.id), None
    except (OSError, ValueError) as exc:
        return None, ExtractFailure(rec.id, str(exc))


def analyze_corpus(corpus: Corpus, cfg: FrameConfig, workers: int = 1):
    """Frame features per record, aligned to the record durations.

    Records are independent, so ``workers > 1`` fans them out over a thread
    pool; results are collected in manifest order either way.
    Returns ``(features, failures)``; failed records are absent from ``features``.
    """
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda r: _analyze_one(corpus, r, cfg), corpus.records))
    else:
        results = [_analyze_one(corpus, r, cfg) for r in corpus.records]
    feats: dict[str, FrameFeatures] = {}
    failures: list[ExtractFailure] = []
    for rec, (f, err) in zip(corpus.records, results):
        if err is None:
            feats[rec.id] = f
        else:
            failures.append(err)
    return feats, failures


def train_ppg_on_corpus(corpus: Corpus, cfg: FrameConfig, model_cfg: PpgModelConfig, steps: int,
                        seed: int = 0, lr: float = 1e-3, log=None) -> PpgModel:
    feats, failures = analyze_corpus(corpus, cfg)
    if failures:
        raise ValueError("; ".join(f"{f.utt_id}: {f.reason}" for f in failures))
    data = [(feats[r.id].mel, frame_labels(r)) for r in corpus.records]
    return train_ppg_model(data, model_cfg, steps, lr=lr, seed=seed, log=log)


def extract_corpus(corpus: Corpus, ppg_model: PpgModel, cfg: FrameConfig, workers: int = 1):
    """Descriptors for every record, standardized with corpus-wide statistics.

    Returns ``(descriptors by id, failures)``.
    """
    feats, failures = analyze_corpus(corpus, cfg, workers)
    ok = [r for r in corpus.records if r.id in feats]
    raw = {r.id: phoneme_prosody(feats[r.id].f0, feats[r.id].log_rms, r.durations) for r in ok}
    stats = ProsodyStats.fit([raw[r.id] for r in ok])
    out: dict[str, StyleDescriptors] = {}
    for r in ok:
        pitch, energy = standardize(raw[r.id], stats)
        out[r.id] = StyleDescriptors(
            ppg=infer_ppg(ppg_model, feats[r.id].mel),
            pitch=pitch,
            energy=energy,
            durations=np.asarray(r.durations),
            voicing=raw[r.id].voicing,
            style_id=r.style_id,
            phones=np.asarray(r.phonemes.ids),
            pitch_stats=stats.pitch,
            energy_stats=stats.energy,
        )
    return out, failures


def archive_path(out_dir, utt_id: str) -> Path:
    return Path(out_dir) / f"{utt_id}.rfda"


def write_archives(descs: dict[str, StyleDescriptors], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for uid, d in descs.items():
        p = archive_path(out_dir, uid)
        save_descriptors(p, d)
        paths.append(p)
    return paths


class MissingDescriptor(FileNotFoundError):
    pass


def load_corpus_descriptors(corpus: Corpus, desc_dir) -> list[StyleDescriptors]:
    out = []
    for r in corpus.records:
        p = archive_path(desc_dir, r.id)
        if not p.exists():
            raise MissingDescriptor(f"no descriptor archive for {r.id} ({p})")
        out.append(load_descriptors(p))
    return out


def target_waveforms(corpus: Corpus, cfg: FrameConfig, style: Optional[int] = None) -> list[tuple[UtteranceRecord, np.ndarray]]:
    """Audio for records (optionally one style) trimmed/padded to ``frames * hop`` samples."""
    out = []
    for r in corpus.records:
        if style is not None and r.style_id != style:
            continue
        x = load_audio(corpus.audio_path(r), cfg.sample_rate)
        n = r.num_frames * cfg.hop
        x = x[:n] if x.shape[0] >= n else np.pad(x, (0, n - x.shape[0]))
        out.append((r, x.astype(np.float32)))
    return out

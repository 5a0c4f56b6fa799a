from __future__ import annotations

import numpy as np
import pytest
import torch

from referee.core import load_manifest
from referee.extractor import FrameConfig, PpgModelConfig
from referee.pipeline import extract_corpus, train_ppg_on_corpus
from referee.s2w import S2WConfig
from referee.t2s import T2SConfig
from referee.toy import make_toy_corpus
from referee.utils import set_deterministic

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session", autouse=True)
def _deterministic():
    set_deterministic(True)
    yield


NUM_PHONES = 8


def small_t2s_config(num_styles: int, dropout: float = 0.0) -> T2SConfig:
    return T2SConfig(
        num_phones=NUM_PHONES,
        num_styles=num_styles,
        num_blocks_encoder=2,
        num_blocks_decoder=2,
        hidden=64,
        heads=2,
        conv_kernel=9,
        conv_filter=128,
        style_embedding_dim=32,
        ppg_dim=NUM_PHONES,
        dropout=dropout,
        predictor_hidden=64,
    )


def tiny_s2w_config(**kw) -> S2WConfig:
    base = dict(
        ppg_dim=NUM_PHONES,
        latent_channels=4,
        coupling_layers=2,
        flow_hidden=8,
        strides=(4, 4, 3, 5),
        wave_channels=(4, 4, 8, 8),
        ppg_hidden=8,
        disc_channels=(4, 8, 8),
    )
    base.update(kw)
    return S2WConfig(**base)


class ToyData:
    def __init__(self, root, num_styles, per_style):
        self.manifest = make_toy_corpus(root, num_styles=num_styles, per_style=per_style, num_phones=NUM_PHONES, seed=0)
        self.corpus = load_manifest(self.manifest)
        self.frame = FrameConfig()
        self.ppg_model = train_ppg_on_corpus(
            self.corpus, self.frame, PpgModelConfig(hidden=(64, 64), output_dim=NUM_PHONES), steps=300, seed=0
        )
        descs, failures = extract_corpus(self.corpus, self.ppg_model, self.frame)
        assert not failures
        self.descs_by_id = descs
        self.descs = [descs[r.id] for r in self.corpus.records]


@pytest.fixture(scope="session")
def toy8(tmp_path_factory):
    """Seeded 8-utterance synthetic corpus: 2 styles x 4 utterances, descriptors extracted."""
    return ToyData(tmp_path_factory.mktemp("toy8"), num_styles=2, per_style=4)


@pytest.fixture(scope="session")
def toy12(tmp_path_factory):
    return ToyData(tmp_path_factory.mktemp("toy12"), num_styles=3, per_style=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(freq: float, seconds: float = 1.0, sr: int = 24000, amp: float = 0.5) -> np.ndarray:
    n = int(round(seconds * sr))
    return (amp * np.sin(2 * np.pi * freq * np.arange(n) / sr)).astype(np.float64)


def float64_module(module: torch.nn.Module) -> torch.nn.Module:
    return module.to(torch.float64)

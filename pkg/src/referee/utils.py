from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import torch

logger = logging.getLogger("referee")


@dataclass
class AdamSettings:
    """Adam hyperparameters shared by every trainer.

    The recipe prints the second coefficient as another beta1; it is the
    second-moment decay and is named beta2 here.
    """

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)


ADAM = AdamSettings()


def configure_adam(beta1: Optional[float] = None, beta2: Optional[float] = None, eps: Optional[float] = None) -> AdamSettings:
    if beta1 is not None:
        ADAM.beta1 = float(beta1)
    if beta2 is not None:
        ADAM.beta2 = float(beta2)
    if eps is not None:
        ADAM.eps = float(eps)
    return ADAM


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def set_deterministic(enabled: bool = True) -> None:
    """Single-threaded, deterministic torch kernels."""
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


def hash_tensors(named: Iterable[tuple[str, torch.Tensor]]) -> str:
    h = hashlib.sha256()
    for name, t in named:
        h.update(name.encode("utf-8"))
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def make_adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM.betas, eps=ADAM.eps)


def sequence_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    """(B, max_len) boolean mask, True on valid positions."""
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def pad_1d(seqs, value=0):
    """Stack 1-D (or N-D along dim 0) tensors into a padded batch."""
    return torch.nn.utils.rnn.pad_sequence(list(seqs), batch_first=True, padding_value=value)

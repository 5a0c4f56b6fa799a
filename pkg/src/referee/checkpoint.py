"""Checkpoint files for the T2S, S2W and PPG models.

``magic, u32 version, u32 meta_len, JSON meta, tensor container`` where the
container holds module parameters under ``<module>/<name>`` and Adam state
under ``optim/<optimizer>/<index>/<key>``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
from torch import nn

from referee.archive import decode_container, encode_container

T2S_MAGIC = b"RFT2S"
S2W_MAGIC = b"RFS2W"
PPG_MAGIC = b"RFPPG"
CHECKPOINT_VERSION = 1

_TORCH_TO_NP = {
    torch.float32: np.float32,
    torch.float64: np.float64,
    torch.int64: np.int64,
    torch.int32: np.int32,
}


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    t = t.detach().cpu()
    if t.dtype not in _TORCH_TO_NP:
        raise TypeError(f"cannot store tensor of dtype {t.dtype}")
    return t.contiguous().numpy().astype(_TORCH_TO_NP[t.dtype], copy=False)


def optimizer_to_arrays(opt: torch.optim.Optimizer, prefix: str):
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{prefix}/{idx}/{key}"] = _to_numpy(torch.as_tensor(val))
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return groups, arrays


def optimizer_from_arrays(opt: torch.optim.Optimizer, groups, tensors: Mapping[str, np.ndarray], prefix: str) -> None:
    state: dict = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.rsplit("/", 2)
        t = torch.from_numpy(arr.copy())
        state.setdefault(int(idx), {})[key] = t
    fixed = []
    for g in groups:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        fixed.append(g)
    opt.load_state_dict({"state": state, "param_groups": fixed})


def encode_checkpoint(
    magic: bytes,
    meta: dict,
    modules: Mapping[str, nn.Module],
    optimizers: Optional[Mapping[str, torch.optim.Optimizer]] = None,
) -> bytes:
    tensors: dict[str, np.ndarray] = {}
    for mname, mod in modules.items():
        for pname, t in mod.state_dict().items():
            tensors[f"{mname}/{pname}"] = _to_numpy(t)
    opt_meta = {}
    for oname, opt in (optimizers or {}).items():
        groups, arrays = optimizer_to_arrays(opt, f"optim/{oname}")
        opt_meta[oname] = groups
        tensors.update(arrays)
    meta = dict(meta)
    meta["optimizers"] = opt_meta
    return encode_container(magic, CHECKPOINT_VERSION, meta, tensors)


def save_checkpoint(path, magic, meta, modules, optimizers=None) -> None:
    Path(path).write_bytes(encode_checkpoint(magic, meta, modules, optimizers))


def read_checkpoint(path, magic: bytes, header_only: bool = False):
    """Returns ``(meta, tensors)``; raises VersionError/FormatError on mismatch."""
    return decode_container(Path(path).read_bytes(), magic, CHECKPOINT_VERSION, header_only)


def load_module_state(module: nn.Module, tensors: Mapping[str, np.ndarray], name: str) -> None:
    prefix = name + "/"
    sd = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(sd)


def has_module(tensors: Mapping[str, np.ndarray], name: str) -> bool:
    return any(k.startswith(name + "/") for k in tensors)

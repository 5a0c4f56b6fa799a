"""Key/value config files whose keys mirror CLI flag names.

    # comment
    seed = 3
    t2s_hidden = 64            # same as --t2s-hidden 64
    s2w_strides = [4, 4, 3, 5]
    deterministic = true

``[section]`` headers are accepted and ignored, so a file can group keys.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field
from pathlib import Path

from referee.extractor import FrameConfig
from referee.refine import RefineConfig
from referee.s2w import S2WConfig
from referee.t2s import T2SConfig
from referee.utils import AdamSettings


class ConfigError(ValueError):
    pass


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip() if not line.lstrip().startswith(("'", '"')) else line.strip()
        if not s or (s.startswith("[") and s.endswith("]")):
            continue
        if "=" not in s:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = s.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = _parse_value(value)
    return out


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config_text(p.read_text(encoding="utf-8"))


def merge(args, file_cfg: dict, defaults: dict) -> dict:
    """Flags beat the config file, which beats defaults."""
    out = dict(defaults)
    for k, v in file_cfg.items():
        if k in defaults:
            out[k] = v
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def as_int_tuple(v) -> tuple[int, ...]:
    if isinstance(v, str):
        return tuple(int(x) for x in v.replace(" ", "").split(",") if x)
    if isinstance(v, int):
        return (v,)
    return tuple(int(x) for x in v)


@dataclass
class PipelineConfig:
    """Everything a full run needs; the CLI builds the relevant parts per verb."""

    paths: dict = field(default_factory=dict)
    frame: FrameConfig = field(default_factory=FrameConfig)
    t2s: T2SConfig = field(default_factory=T2SConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    s2w: S2WConfig = field(default_factory=S2WConfig)
    adam: AdamSettings = field(default_factory=AdamSettings)
    seed: int = 0
    deterministic: bool = False

    def missing_paths(self) -> list[str]:
        return [k for k, v in self.paths.items() if v is not None and not Path(v).exists()]

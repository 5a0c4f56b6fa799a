"""Domain types, corpus manifest ingestion and frame/phoneme resampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation's input contract is violated."""


class ManifestError(ValueError):
    """Malformed or inconsistent corpus manifest."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class PhonemeSequence:
    ids: tuple[int, ...]
    inventory_size: int

    def __post_init__(self):
        if self.inventory_size <= 0:
            raise ContractError("inventory_size must be positive")
        if len(self.ids) < 1:
            raise ContractError("phoneme sequence must not be empty")
        for i in self.ids:
            if not 0 <= i < self.inventory_size:
                raise ContractError(f"phone id {i} outside [0, {self.inventory_size})")

    def __len__(self) -> int:
        return len(self.ids)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


@dataclass(frozen=True)
class StyleId:
    value: int
    num_styles: Optional[int] = None

    def __post_init__(self):
        if self.value < 0 or (self.num_styles is not None and self.value >= self.num_styles):
            raise ContractError(f"style id {self.value} out of range")

    def __int__(self) -> int:
        return self.value


@dataclass
class StyleDescriptors:
    """Speaker-independent style descriptors for one utterance.

    ``pitch`` and ``energy`` are phoneme-level and standardized; ``ppg`` is
    frame-level with ``ppg.shape[0] == durations.sum()``.
    """

    ppg: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray
    durations: np.ndarray
    voicing: np.ndarray
    style_id: int = 0
    phones: Optional[np.ndarray] = None
    pitch_stats: tuple[float, float] = (0.0, 1.0)
    energy_stats: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.ppg = np.asarray(self.ppg, dtype=np.float32)
        self.pitch = np.asarray(self.pitch, dtype=np.float32)
        self.energy = np.asarray(self.energy, dtype=np.float32)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.voicing = np.asarray(self.voicing, dtype=bool)
        if self.phones is not None:
            self.phones = np.asarray(self.phones, dtype=np.int64)
        self.validate()

    @property
    def num_phonemes(self) -> int:
        return int(self.durations.shape[0])

    @property
    def num_frames(self) -> int:
        return int(self.ppg.shape[0])

    def validate(self) -> None:
        p = self.num_phonemes
        if self.ppg.ndim != 2:
            raise ContractError("ppg must be a matrix")
        for name in ("pitch", "energy", "voicing"):
            if getattr(self, name).shape != (p,):
                raise ContractError(f"{name} must have length {p}")
        if self.phones is not None and self.phones.shape != (p,):
            raise ContractError(f"phones must have length {p}")
        if (self.durations < 0).any():
            raise ContractError("durations must be non-negative")
        if int(self.durations.sum()) != self.num_frames:
            raise ContractError(
                f"sum(durations)={int(self.durations.sum())} != ppg rows={self.num_frames}"
            )


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: str
    phonemes: PhonemeSequence
    style_id: int
    durations: tuple[int, ...]
    sample_rate: int

    @property
    def num_frames(self) -> int:
        return sum(self.durations)


@dataclass(frozen=True)
class ManifestHeader:
    version: int
    num_styles: int
    phone_inventory: tuple[str, ...]
    sample_rate: int = 24000

    @property
    def inventory_size(self) -> int:
        return len(self.phone_inventory)

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "num_styles": self.num_styles,
                "phone_inventory": list(self.phone_inventory),
                "sample_rate": self.sample_rate,
            }
        )


@dataclass
class Corpus:
    header: ManifestHeader
    records: list[UtteranceRecord] = field(default_factory=list)
    root: Path = Path(".")

    def audio_path(self, record: UtteranceRecord) -> Path:
        p = Path(record.audio_path)
        return p if p.is_absolute() else self.root / p


def _parse_header(obj, lineno: int) -> ManifestHeader:
    if not isinstance(obj, dict):
        raise ManifestError("header must be a JSON object", lineno)
    try:
        version = int(obj["version"])
        num_styles = int(obj["num_styles"])
        inventory = tuple(str(p) for p in obj["phone_inventory"])
        sample_rate = int(obj.get("sample_rate", 24000))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"bad header: {exc}", lineno) from None
    if version != 1:
        raise ManifestError(f"unsupported manifest version {version}", lineno)
    if num_styles <= 0 or not inventory:
        raise ManifestError("num_styles and phone_inventory must be non-empty", lineno)
    return ManifestHeader(version, num_styles, inventory, sample_rate)


def _parse_record(obj, header: ManifestHeader, lineno: int) -> UtteranceRecord:
    if not isinstance(obj, dict):
        raise ManifestError("record must be a JSON object", lineno)
    try:
        uid = str(obj["id"])
        audio = str(obj["audio"])
        phones = [int(p) for p in obj["phones"]]
        style = int(obj["style"])
        durations = [int(d) for d in obj["durations"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"bad record: {exc}", lineno) from None
    if not 0 <= style < header.num_styles:
        raise ManifestError(f"{uid}: unknown style {style}", lineno)
    bad = [p for p in phones if not 0 <= p < header.inventory_size]
    if bad:
        raise ManifestError(f"{uid}: unknown phone id {bad[0]}", lineno)
    if not phones:
        raise ManifestError(f"{uid}: empty phone list", lineno)
    if len(durations) != len(phones):
        raise ManifestError(f"{uid}: {len(durations)} durations for {len(phones)} phones", lineno)
    if any(d < 0 for d in durations):
        raise ManifestError(f"{uid}: negative duration", lineno)
    if sum(durations) < 1:
        raise ManifestError(f"{uid}: durations sum to 0", lineno)
    return UtteranceRecord(
        id=uid,
        audio_path=audio,
        phonemes=PhonemeSequence(tuple(phones), header.inventory_size),
        style_id=style,
        durations=tuple(durations),
        sample_rate=header.sample_rate,
    )


def load_manifest(path) -> Corpus:
    """Load a JSON-Lines corpus manifest.

    The first non-empty line is the header; every further line is one
    utterance. Records keep file order.
    """
    path = Path(path)
    header = None
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from None
            if header is None:
                header = _parse_header(obj, lineno)
                continue
            rec = _parse_record(obj, header, lineno)
            if rec.id in seen:
                raise ManifestError(f"duplicate id {rec.id}", lineno)
            seen.add(rec.id)
            records.append(rec)
    if header is None:
        raise ManifestError("empty manifest")
    return Corpus(header=header, records=records, root=path.parent)


def write_manifest(path, header: ManifestHeader, records: Sequence[UtteranceRecord]) -> None:
    lines = [header.to_json()]
    for r in records:
        lines.append(
            json.dumps(
                {
                    "id": r.id,
                    "audio": r.audio_path,
                    "phones": list(r.phonemes.ids),
                    "style": r.style_id,
                    "durations": list(r.durations),
                }
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _check_durations(durations) -> np.ndarray:
    d = np.asarray(durations)
    if d.ndim != 1:
        raise ContractError("durations must be a vector")
    if d.size and not np.issubdtype(d.dtype, np.integer):
        if not np.all(np.equal(np.mod(d, 1), 0)):
            raise ContractError("durations must be integers")
    d = d.astype(np.int64)
    if (d < 0).any():
        raise ContractError("durations must be non-negative")
    return d


def length_regulate(values, durations) -> np.ndarray:
    """Repeat row ``i`` of ``values`` ``durations[i]`` times."""
    values = np.asarray(values)
    d = _check_durations(durations)
    if values.shape[0] != d.shape[0]:
        raise ContractError(f"{values.shape[0]} rows but {d.shape[0]} durations")
    return np.repeat(values, d, axis=0)


def phoneme_average(frames, durations, mask=None) -> np.ndarray:
    """Mean of ``frames`` inside each duration segment.

    With ``mask`` only flagged frames contribute; segments with no
    contributing frame get 0 (see :func:`segment_has_frames`).
    """
    frames = np.asarray(frames, dtype=np.float64)
    d = _check_durations(durations)
    if frames.ndim != 1:
        raise ContractError("frames must be a vector")
    if int(d.sum()) != frames.shape[0]:
        raise ContractError(f"sum(durations)={int(d.sum())} != {frames.shape[0]} frames")
    if mask is None:
        weights = np.ones_like(frames)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != frames.shape:
            raise ContractError("mask length must equal frame count")
        weights = mask.astype(np.float64)
    p = d.shape[0]
    seg = np.repeat(np.arange(p), d)
    # Averages are taken relative to each segment's first included frame so
    # that constant segments come back bit-exact.
    included = np.flatnonzero(weights > 0)
    ref = np.zeros(p, dtype=np.float64)
    segs, first = np.unique(seg[included], return_index=True)
    ref[segs] = frames[included[first]]
    resid = (frames - ref[seg]) * weights
    sums = np.bincount(seg, weights=resid, minlength=p)
    counts = np.bincount(seg, weights=weights, minlength=p)
    out = np.zeros(p, dtype=np.float64)
    nz = counts > 0
    out[nz] = ref[nz] + sums[nz] / counts[nz]
    return out


def segment_has_frames(durations, mask=None) -> np.ndarray:
    """Boolean per segment: true iff it contains at least one included frame."""
    d = _check_durations(durations)
    if mask is None:
        return d > 0
    mask = np.asarray(mask, dtype=bool)
    if int(d.sum()) != mask.shape[0]:
        raise ContractError("mask length must equal sum(durations)")
    seg = np.repeat(np.arange(d.shape[0]), d)
    return np.bincount(seg, weights=mask.astype(np.float64), minlength=d.shape[0]) > 0

"""Reference-free cross-speaker style transfer: descriptor extraction, a
style-conditioned text-to-descriptor model with adversarial refinement, and a
flow-based descriptor-to-waveform model."""

from referee.core import (
    ContractError,
    Corpus,
    ManifestError,
    ManifestHeader,
    PhonemeSequence,
    StyleDescriptors,
    StyleId,
    UtteranceRecord,
    length_regulate,
    load_manifest,
    phoneme_average,
    write_manifest,
)
from referee.extractor import FrameConfig, estimate_f0, extract_style
from referee.t2s import T2SConfig, T2SModel, t2s_forward
from referee.s2w import S2WConfig, S2WModel, s2w_infer, wave_decode, wave_encode

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "Corpus",
    "FrameConfig",
    "ManifestError",
    "ManifestHeader",
    "PhonemeSequence",
    "S2WConfig",
    "S2WModel",
    "StyleDescriptors",
    "StyleId",
    "T2SConfig",
    "T2SModel",
    "UtteranceRecord",
    "estimate_f0",
    "extract_style",
    "length_regulate",
    "load_manifest",
    "phoneme_average",
    "s2w_infer",
    "t2s_forward",
    "wave_decode",
    "wave_encode",
    "write_manifest",
]

"""Hotword-anchored multichannel speech enhancement."""

from .signal_core import (
    FrameParams,
    MultiChannelSpectrogram,
    MultiChannelWave,
    UtteranceSegmentation,
    istft,
    segment_frames,
    stft,
)
from .pipeline import (
    Algorithm,
    PipelineConfig,
    enhance_forced,
    enhance_utterance,
    estimate_snr,
    select_algorithm,
)

__version__ = "0.1.0"

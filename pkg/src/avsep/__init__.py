"""Coarse-to-fine audio-visual speech separation.

A two-pass time-frequency masking-free separator: the first pass separates
from the mixture and per-speaker lip streams; the second pass re-encodes the
first-pass audio together with the lips to build richer semantic streams and
refines the estimates with the same backbone.
"""

__version__ = "0.1.0"

from .dsp import (
    ComplexSpectrogram,
    MixResult,
    StftConfig,
    Waveform,
    istft,
    istft_tensor,
    mix_sources,
    read_wav,
    stft,
    stft_tensor,
    write_wav,
)
from .encoder import MultiScaleEncoder
from .errors import (
    ConfigError,
    ConfigMismatchError,
    DegenerateSourceError,
    DivergenceError,
    InvalidInputError,
)
from .fusion import SemanticAligner, SpeakerFusion
from .model import ModelConfig, SeparationModel, StageCheckpoint, load_checkpoint, save_checkpoint
from .objectives import PitResult, l_mag, pit, sdri, si_sdr, si_sdri, total_loss
from .semantics import (
    AudioSemanticEncoder,
    MouthFrames,
    SemanticFusion,
    SemanticStream,
    VisualEncoder,
    asr_encode,
    av_fuse,
    load_mouth_frames,
    occlude,
    save_mouth_frames,
    vsr_encode,
)
from .separator import MstConfig, MstSeparator, SpectrogramDecoder, unfold_axis
from .training import TrainConfig, run_coarse_stage, run_fine_stage

__all__ = [name for name in dir() if not name.startswith("_")]

from .audio import MEL_WINDOW_SAMPLES, ContextSpectrogram, mel_patch, read_wav, spectrogram_to_image, write_wav
from .frames import frame_indices, frame_timestamp
from .images import crop_resize, load_frame, save_image
from .manifest import ClipRecord, ManifestError, load_manifest, select_classes, write_manifest
from .splits import FoldSplit, identity_kfold

RAVDESS_CLASSES = ("calm", "happy", "sad", "angry", "fearful", "surprised", "disgust")
INTENSITIES = ("normal", "strong")

__all__ = [
    "ClipRecord",
    "ContextSpectrogram",
    "FoldSplit",
    "INTENSITIES",
    "MEL_WINDOW_SAMPLES",
    "ManifestError",
    "RAVDESS_CLASSES",
    "crop_resize",
    "frame_indices",
    "frame_timestamp",
    "identity_kfold",
    "load_frame",
    "load_manifest",
    "mel_patch",
    "read_wav",
    "save_image",
    "select_classes",
    "spectrogram_to_image",
    "write_manifest",
    "write_wav",
]

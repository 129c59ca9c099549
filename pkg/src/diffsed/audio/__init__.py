from .dataset import DatasetError, load_dataset, read_annotations, read_meta, save_dataset
from .features import MelSpectrogram, Waveform, mel_centers, mel_filterbank, stft_logmel
from .synth import EventAnnotation, GeneratorSpec, LabeledClip, SpecError, synth_dataset

__all__ = [
    "DatasetError",
    "EventAnnotation",
    "GeneratorSpec",
    "LabeledClip",
    "MelSpectrogram",
    "SpecError",
    "Waveform",
    "load_dataset",
    "mel_centers",
    "mel_filterbank",
    "read_annotations",
    "read_meta",
    "save_dataset",
    "stft_logmel",
    "synth_dataset",
]

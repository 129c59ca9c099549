"""Synthetic sound-event clips with exact ground truth.

Each class is a distinct timbre: class ``k`` uses kind ``k % 3`` (pure tone,
band-limited noise burst, linear chirp) with frequencies shifted upward for
every further group of three classes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .features import Waveform

EVENT_RMS = 0.1
FADE_SECONDS = 0.005
MAX_SIMULTANEOUS = 2


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class EventAnnotation:
    onset: float
    offset: float
    label: int

    def check(self, duration: float, n_classes: int | None = None):
        if not 0.0 <= self.onset < self.offset <= duration:
            raise ValueError(f"event ({self.onset}, {self.offset}) outside clip of {duration} s")
        if self.label < 0 or (n_classes is not None and self.label >= n_classes):
            raise ValueError(f"label {self.label} out of range")


@dataclass
class LabeledClip:
    waveform: Waveform
    annotations: list[EventAnnotation]
    clip_id: str

    @property
    def duration(self) -> float:
        return self.waveform.duration


@dataclass(frozen=True)
class GeneratorSpec:
    n_clips: int = 100
    duration: float = 10.0
    n_classes: int = 3
    events_min: int = 1
    events_max: int = 3
    min_event_duration: float = 0.5
    max_event_duration: float = 3.0
    snr_db: float = 20.0
    sample_rate: int = 16000
    allow_overlap: bool = True
    id_prefix: str = "clip"

    def validate(self):
        if self.n_clips < 0 or self.n_classes < 1:
            raise SpecError("need n_clips >= 0 and n_classes >= 1")
        if not 0 <= self.events_min <= self.events_max:
            raise SpecError("need 0 <= events_min <= events_max")
        if not 0 < self.min_event_duration <= self.max_event_duration:
            raise SpecError("need 0 < min_event_duration <= max_event_duration")
        if self.max_event_duration > self.duration:
            raise SpecError("events longer than the clip")
        tracks = MAX_SIMULTANEOUS if self.allow_overlap else 1
        per_track = -(-self.events_max // tracks)
        if per_track * self.min_event_duration > self.duration:
            raise SpecError(
                f"{self.events_max} events of >= {self.min_event_duration} s cannot fit "
                f"{self.duration} s with {tracks} track(s)"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def class_timbre(label: int) -> tuple[str, tuple[float, ...]]:
    kind = ("tone", "noise", "chirp")[label % 3]
    shift = 1.5 ** (label // 3)
    if kind == "tone":
        return kind, (440.0 * shift,)
    if kind == "noise":
        return kind, (2000.0 * shift, 4000.0 * shift)
    return kind, (200.0 * shift, 2000.0 * shift)


def render_event(label: int, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS event signal of ``n`` samples with short fades."""
    kind, freqs = class_timbre(label)
    t = np.arange(n) / sr
    nyq = 0.45 * sr
    if kind == "tone":
        x = np.sin(2 * np.pi * min(freqs[0], nyq) * t + rng.uniform(0, 2 * np.pi))
    elif kind == "noise":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / sr)
        spec[(f < freqs[0]) | (f > min(freqs[1], nyq))] = 0.0
        x = np.fft.irfft(spec, n)
    else:
        f0, f1 = freqs[0], min(freqs[1], nyq)
        dur = n / sr
        x = np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / dur * t**2))
    fade = min(int(FADE_SECONDS * sr), n // 4)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        x[:fade] *= ramp
        x[n - fade:] *= ramp[::-1]
    rms = np.sqrt(np.mean(x**2))
    return x / rms if rms > 0 else x


def _track_layout(n: int, spec: GeneratorSpec, rng: np.random.Generator) -> list[tuple[float, float]]:
    """Non-overlapping (onset, offset) pairs for ``n`` events on one track."""
    if n == 0:
        return []
    lo, hi = spec.min_event_duration, spec.max_event_duration
    durs = rng.uniform(lo, hi, n)
    if durs.sum() > spec.duration:
        durs = lo + (durs - lo) * (spec.duration - n * lo) / (durs.sum() - n * lo)
    slack = spec.duration - durs.sum()
    cuts = np.sort(rng.uniform(0, slack, n + 1))
    gaps = np.diff(np.concatenate([[0.0], cuts]))
    out, t = [], 0.0
    for g, d in zip(gaps, durs):
        t += g
        out.append((t, t + d))
        t += d
    return out


def synth_clip(clip_id: str, labels, spec: GeneratorSpec, rng: np.random.Generator) -> LabeledClip:
    sr = spec.sample_rate
    n_samples = int(round(spec.duration * sr))
    tracks = MAX_SIMULTANEOUS if spec.allow_overlap and len(labels) > 1 else 1
    assign = rng.permutation(np.arange(len(labels)) % tracks)
    spans = []
    for k in range(tracks):
        spans += _track_layout(int(np.sum(assign == k)), spec, rng)
    sigma_bg = EVENT_RMS / 10 ** (spec.snr_db / 20)
    x = sigma_bg * rng.standard_normal(n_samples)
    anns = []
    for label, (on, off) in zip(rng.permutation(labels), spans):
        s0 = int(round(on * sr))
        s1 = min(int(round(off * sr)), n_samples)
        x[s0:s1] += EVENT_RMS * render_event(int(label), s1 - s0, sr, rng)
        anns.append(EventAnnotation(s0 / sr, s1 / sr, int(label)))
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x /= peak
    anns.sort(key=lambda a: (a.onset, a.offset, a.label))
    return LabeledClip(Waveform(x, sr), anns, clip_id)


def synth_dataset(spec: GeneratorSpec, seed: int) -> list[LabeledClip]:
    """Deterministic labeled clips; class counts differ by at most one."""
    spec.validate()
    root = np.random.SeedSequence(seed)
    rng = np.random.default_rng(root)
    counts = rng.integers(spec.events_min, spec.events_max + 1, size=spec.n_clips)
    total = int(counts.sum())
    labels = rng.permutation(np.arange(total) % spec.n_classes)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    clips = []
    for i, child in enumerate(root.spawn(spec.n_clips)):
        clip_labels = labels[offsets[i]:offsets[i + 1]]
        clips.append(
            synth_clip(f"{spec.id_prefix}{i:05d}", clip_labels, spec, np.random.default_rng(child))
        )
    return clips

import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffsed.audio import (
    DatasetError,
    EventAnnotation,
    GeneratorSpec,
    LabeledClip,
    SpecError,
    Waveform,
    load_dataset,
    mel_centers,
    mel_filterbank,
    read_annotations,
    save_dataset,
    stft_logmel,
    synth_dataset,
)
from diffsed.audio.features import hann

SR = 16000


def dft_power(frame: np.ndarray, n_fft: int) -> np.ndarray:
    """Power spectrum by the textbook DFT sum, no FFT."""
    n = np.arange(len(frame))
    k = np.arange(n_fft // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * n[None, :] / n_fft)
    return np.abs(basis @ frame) ** 2


def test_zero_waveform_is_log_floor():
    mel = stft_logmel(Waveform(np.zeros(SR), SR))
    assert np.all(mel.frames == math.log(1e-6))


def test_frame_count_and_shape():
    mel = stft_logmel(Waveform(np.zeros(10 * SR), SR))
    assert mel.frames.shape == (1 + (10 * SR - 1024) // 512, 64)
    assert mel.hop_seconds == 512 / SR


def test_too_short_and_bad_parameters():
    with pytest.raises(ValueError, match="shorter"):
        stft_logmel(Waveform(np.zeros(100), SR))
    with pytest.raises(ValueError):
        stft_logmel(Waveform(np.zeros(SR), SR), win=2048, n_fft=1024)
    with pytest.raises(ValueError):
        stft_logmel(Waveform(np.zeros(SR), SR), hop=2048)
    with pytest.raises(ValueError):
        stft_logmel(Waveform(np.zeros(SR), SR), fmax=9000)
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, 1.5]), SR)


@pytest.mark.parametrize("bin_index", [10, 25, 40, 55])
def test_sine_at_mel_centre_peaks_in_that_bin(bin_index):
    f = mel_centers(64, 0.0, SR / 2)[bin_index]
    t = np.arange(SR) / SR
    mel = stft_logmel(Waveform(0.5 * np.sin(2 * np.pi * f * t), SR))
    assert np.all(np.argmax(mel.frames, axis=1) == bin_index)
    # the same peak from an independent DFT of the first frame
    power = dft_power(0.5 * np.sin(2 * np.pi * f * t[:1024]) * hann(1024), 1024)
    fb = mel_filterbank(SR, 1024, 64, 0.0, SR / 2)
    assert np.argmax(fb @ power) == bin_index
    np.testing.assert_allclose(np.log(fb @ power + 1e-6), mel.frames[0], rtol=1e-9, atol=1e-9)


def test_doubling_amplitude_adds_log4():
    rng = np.random.default_rng(0)
    x = 0.2 * rng.uniform(-1, 1, SR)
    a = stft_logmel(Waveform(x, SR)).frames
    b = stft_logmel(Waveform(2 * x, SR)).frames
    strong = a > math.log(1e-6) + 10
    assert strong.mean() > 0.9
    np.testing.assert_allclose(b[strong] - a[strong], math.log(4), atol=1e-4)


def test_filterbank_triangles():
    fb = mel_filterbank(SR, 1024, 64, 0.0, SR / 2)
    assert fb.shape == (64, 513)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0)
    assert np.all(fb.sum(axis=1) > 0)  # no empty filters at this resolution
    assert not fb.flags.writeable


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 9.9))
def test_frame_time_round_trip(onset):
    mel = stft_logmel(Waveform(np.zeros(10 * SR), SR))
    back = mel.frame_time(mel.time_to_frame(onset))
    assert abs(back - onset) <= mel.hop_seconds / 2 + 1e-12


def test_frame_times_increase():
    mel = stft_logmel(Waveform(np.zeros(SR), SR))
    assert np.all(np.diff(mel.frame_time(np.arange(len(mel.frames)))) > 0)


# ---------------------------------------------------------------- generator


def test_generator_deterministic():
    spec = GeneratorSpec(n_clips=5)
    a, b = synth_dataset(spec, 3), synth_dataset(spec, 3)
    for x, y in zip(a, b):
        assert x.waveform.samples.tobytes() == y.waveform.samples.tobytes()
        assert x.annotations == y.annotations and x.clip_id == y.clip_id
    c = synth_dataset(spec, 4)
    assert a[0].waveform.samples.tobytes() != c[0].waveform.samples.tobytes()


def test_generator_validity_sweep():
    clips = synth_dataset(GeneratorSpec(n_clips=100, duration=10.0, n_classes=3), 11)
    labels = []
    for c in clips:
        assert 1 <= len(c.annotations) <= 3
        assert np.max(np.abs(c.waveform.samples)) <= 1.0
        for a in c.annotations:
            assert 0 <= a.onset < a.offset <= 10.0 and 0 <= a.label < 3
            labels.append(a.label)
    counts = np.bincount(labels, minlength=3)
    assert counts.max() - counts.min() <= 1
    assert counts.min() >= 0.8 * counts.mean()


def test_no_overlap_option():
    for c in synth_dataset(GeneratorSpec(n_clips=30, allow_overlap=False), 5):
        for a, b in zip(c.annotations, c.annotations[1:]):
            assert a.offset <= b.onset


def test_overlap_capped_at_two():
    for c in synth_dataset(GeneratorSpec(n_clips=30, events_min=3, events_max=3), 6):
        for a in c.annotations:  # peak concurrency is attained at some onset
            active = sum(b.onset <= a.onset < b.offset for b in c.annotations)
            assert active <= 2


def test_zero_events_background_only():
    clips = synth_dataset(GeneratorSpec(n_clips=4, events_min=0, events_max=0), 0)
    for c in clips:
        assert c.annotations == []
        assert 0.005 < np.std(c.waveform.samples) < 0.02


def test_infeasible_spec():
    with pytest.raises(SpecError):
        synth_dataset(GeneratorSpec(n_clips=1, duration=2.0, events_min=3, events_max=3,
                                    min_event_duration=1.0, allow_overlap=False), 0)
    with pytest.raises(SpecError):
        synth_dataset(GeneratorSpec(n_clips=1, duration=2.0, max_event_duration=3.0), 0)


def test_annotations_match_inserted_energy():
    """Inside each event the power sits snr_db above the background measured in the gaps."""
    spec = GeneratorSpec(n_clips=10, allow_overlap=False, snr_db=20.0)
    for c in synth_dataset(spec, 21):
        x = c.waveform.samples
        mask = np.zeros(len(x), bool)
        for a in c.annotations:
            mask[int(round(a.onset * SR)):int(round(a.offset * SR))] = True
        if (~mask).sum() < SR // 10:
            continue
        bg = np.mean(x[~mask] ** 2)
        for a in c.annotations:
            seg = x[int(round(a.onset * SR)):int(round(a.offset * SR))]
            snr = 10 * np.log10((np.mean(seg**2) - bg) / bg)
            assert abs(snr - spec.snr_db) < 1.0


def test_class_timbres_differ():
    clip = synth_dataset(GeneratorSpec(n_clips=30, allow_overlap=False), 2)
    centroids = {k: [] for k in range(3)}
    freqs = np.fft.rfftfreq(4096, 1 / SR)
    for c in clip:
        for a in c.annotations:
            seg = c.waveform.samples[int(a.onset * SR):][:4096]
            if len(seg) < 4096:
                continue
            p = np.abs(np.fft.rfft(seg)) ** 2
            centroids[a.label].append(np.sum(freqs * p) / np.sum(p))
    tone, noise, chirp = (np.median(centroids[k]) for k in range(3))
    assert abs(tone - 440) < 60
    assert 2000 < noise < 4000
    assert 200 < chirp < 2000


# ------------------------------------------------------------------ storage


def test_save_load_round_trip(tmp_path):
    clips = synth_dataset(GeneratorSpec(n_clips=3, duration=2.0, max_event_duration=1.0), 1)
    save_dataset(clips, tmp_path / "a", {"seed": 1})
    back = load_dataset(tmp_path / "a")
    for x, y in zip(clips, back):
        assert x.clip_id == y.clip_id and x.annotations == y.annotations
        assert x.waveform.samples.tobytes() == y.waveform.samples.tobytes()
    save_dataset(back, tmp_path / "b", {"seed": 1})
    for name in ["annotations.jsonl", "meta.json"] + [f"clips/{c.clip_id}.f64le" for c in clips]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_malformed_line_is_reported(tmp_path):
    clips = synth_dataset(GeneratorSpec(n_clips=2, duration=2.0, max_event_duration=1.0), 1)
    save_dataset(clips, tmp_path)
    lines = (tmp_path / "annotations.jsonl").read_text().splitlines()
    (tmp_path / "annotations.jsonl").write_text(lines[0] + "\n{not json\n")
    with pytest.raises(DatasetError, match=r"annotations.jsonl:2"):
        read_annotations(tmp_path)


def test_out_of_bounds_annotation_names_clip(tmp_path):
    clip = LabeledClip(Waveform(np.zeros(SR), SR), [EventAnnotation(0.2, 0.5, 0)], "weird-clip")
    save_dataset([clip], tmp_path)
    rec = json.loads((tmp_path / "annotations.jsonl").read_text())
    rec["events"][0]["offset"] = 3.0
    (tmp_path / "annotations.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(DatasetError, match="weird-clip"):
        load_dataset(tmp_path)


def test_label_beyond_declared_classes(tmp_path):
    clip = LabeledClip(Waveform(np.zeros(SR), SR), [EventAnnotation(0.2, 0.5, 5)], "c0")
    save_dataset([clip], tmp_path, {"spec": {"n_classes": 3}})
    with pytest.raises(DatasetError, match="c0"):
        load_dataset(tmp_path)


def test_truncated_audio_detected(tmp_path):
    clip = LabeledClip(Waveform(np.zeros(SR), SR), [], "c0")
    save_dataset([clip], tmp_path)
    f = tmp_path / "clips" / "c0.f64le"
    f.write_bytes(f.read_bytes()[:-8])
    with pytest.raises(DatasetError, match="samples"):
        load_dataset(tmp_path)


def test_meta_hash_stable(tmp_path):
    spec = GeneratorSpec(n_clips=2, duration=2.0, max_event_duration=1.0)
    for name in ("x", "y"):
        save_dataset(synth_dataset(spec, 7), tmp_path / name, {"spec": spec.to_dict(), "seed": 7})
    h = [hashlib.sha256((tmp_path / n / "meta.json").read_bytes()).hexdigest() for n in ("x", "y")]
    assert h[0] == h[1]

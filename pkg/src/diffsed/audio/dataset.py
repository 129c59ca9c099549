"""On-disk dataset layout.

::

    <root>/clips/<clip_id>.f64le   raw little-endian float64 samples
    <root>/annotations.jsonl       one object per clip:
                                   {"clip_id", "duration", "sample_rate",
                                    "events": [{"onset", "offset", "label"}]}
    <root>/meta.json               generator spec and seed (optional)
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .features import Waveform
from .synth import EventAnnotation, LabeledClip


class DatasetError(ValueError):
    pass


def clip_record(clip: LabeledClip) -> dict:
    return {
        "clip_id": clip.clip_id,
        "duration": clip.duration,
        "sample_rate": clip.waveform.sample_rate,
        "events": [{"onset": a.onset, "offset": a.offset, "label": a.label} for a in clip.annotations],
    }


def save_dataset(clips, path, meta: dict | None = None):
    root = Path(path)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    lines = []
    for clip in clips:
        (root / "clips" / f"{clip.clip_id}.f64le").write_bytes(
            np.ascontiguousarray(clip.waveform.samples, dtype="<f8").tobytes()
        )
        lines.append(json.dumps(clip_record(clip)))
    (root / "annotations.jsonl").write_text("".join(line + "\n" for line in lines))
    if meta is not None:
        (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(path) -> dict | None:
    f = Path(path) / "meta.json"
    return json.loads(f.read_text()) if f.exists() else None


def read_annotations(path) -> list[dict]:
    """Parse and validate ``annotations.jsonl`` without touching audio."""
    records = []
    f = Path(path)
    if f.is_dir():
        f = f / "annotations.jsonl"
    meta = read_meta(f.parent)
    n_classes = meta.get("spec", {}).get("n_classes") if meta else None
    for lineno, line in enumerate(f.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{f}:{lineno}: malformed JSON ({e.msg}): {line[:60]!r}") from None
        cid = rec.get("clip_id", f"<line {lineno}>") if isinstance(rec, dict) else f"<line {lineno}>"
        try:
            duration = float(rec["duration"])
            sr = int(rec["sample_rate"])
            events = [EventAnnotation(float(e["onset"]), float(e["offset"]), int(e["label"]))
                      for e in rec["events"]]
            for ev in events:
                ev.check(duration, n_classes)
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"clip {cid}: invalid annotation record: {e}") from None
        records.append({"clip_id": rec["clip_id"], "duration": duration, "sample_rate": sr, "events": events})
    return records


def load_dataset(path) -> list[LabeledClip]:
    root = Path(path)
    clips = []
    for rec in read_annotations(root):
        cid = rec["clip_id"]
        audio = root / "clips" / f"{cid}.f64le"
        if not audio.exists():
            raise DatasetError(f"clip {cid}: missing audio file {audio}")
        samples = np.frombuffer(audio.read_bytes(), dtype="<f8").astype(np.float64)
        expected = int(round(rec["duration"] * rec["sample_rate"]))
        if len(samples) != expected:
            raise DatasetError(f"clip {cid}: {len(samples)} samples, expected {expected}")
        try:
            wave = Waveform(samples, rec["sample_rate"])
        except ValueError as e:
            raise DatasetError(f"clip {cid}: {e}") from None
        clips.append(LabeledClip(wave, rec["events"], cid))
    return clips

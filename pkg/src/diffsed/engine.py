"""Training (query-corruption objective) and multi-step denoising inference."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import LabeledClip, stft_logmel
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import (
    NoiseSchedule,
    ScaleParams,
    cosine_schedule,
    ddim_step,
    make_step_plan,
    pad_boxes,
    q_sample,
    scale_signal,
)
from .matching import ClipTargets, LossWeights, match_batch, set_prediction_loss
from .metrics import Detection, EvalReport, evaluate
from .model import DecoderConfig, DiffSED, EncoderConfig, ModelConfig
from .optim import Adam, grad_norms

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class RunConfig:
    mode: str = "diffsed"
    n_queries: int = 30
    scale: float = 0.4
    T: int = 1000
    infer_steps: int = 1
    epochs: int = 200
    lr: float = 1e-4
    lr_decay: float = 0.01
    lr_decay_epoch: int = 150
    restore_every: int = 100
    batch: int = 16
    seed: int = 0
    infer_seed: int = 0
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    z0_weight: float = 1.0
    no_event_weight: float = 0.1
    anchor_cost: float = 0.0
    aux_loss: bool = True
    shuffle_boxes: bool = True
    # architecture
    conv_channels: tuple[int, ...] = (16, 32)
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1
    # frontend
    win: int = 1024
    hop: int = 512
    n_fft: int = 1024
    n_mels: int = 64
    # metrics
    collar: float = 0.2
    offset_ratio: float = 0.2
    segment_length: float = 1.0
    threshold: float = 0.5
    # paths
    train_dir: str | None = None
    val_dir: str | None = None
    out_dir: str | None = None

    def validate(self):
        ModelConfig(self.mode)  # raises on unknown mode
        ScaleParams(self.scale)
        if self.n_queries < 1 or self.T < 1 or self.epochs < 1 or self.batch < 1:
            raise ValueError("n_queries, T, epochs and batch must be positive")
        if not 1 <= self.infer_steps <= self.T:
            raise ValueError(f"infer_steps must lie in [1, T={self.T}]")
        for name in ("train_dir", "val_dir"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"{name} {p} does not exist")

    def model_config(self, n_classes: int) -> ModelConfig:
        enc = EncoderConfig(self.n_mels, tuple(self.conv_channels), 3, 2, self.d_model, self.enc_layers,
                            self.n_heads, self.ff_dim, self.dropout)
        dec = DecoderConfig(self.dec_layers, self.n_heads, self.ff_dim, self.n_queries, n_classes, self.dropout)
        return ModelConfig(self.mode, enc, dec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "conv_channels" in d:
            d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass
class FeatureSet:
    clip_ids: list[str]
    mels: list[np.ndarray]
    targets: list[ClipTargets]
    annotations: list[list]
    durations: list[float]


def featurize(clips: list[LabeledClip], cfg: RunConfig) -> FeatureSet:
    mels, targets, anns, durs = [], [], [], []
    for clip in clips:
        m = stft_logmel(clip.waveform, cfg.win, cfg.hop, cfg.n_fft, cfg.n_mels)
        mels.append(m.frames)
        d = clip.duration
        labels = np.array([a.label for a in clip.annotations], dtype=np.intp)
        boxes = np.array([[a.onset / d, a.offset / d] for a in clip.annotations], dtype=np.float64).reshape(-1, 2)
        targets.append(ClipTargets(labels, boxes))
        anns.append(list(clip.annotations))
        durs.append(d)
    return FeatureSet([c.clip_id for c in clips], mels, targets, anns, durs)


def _batches(n: int, size: int, order=None):
    order = np.arange(n) if order is None else order
    for i in range(0, n, size):
        yield order[i:i + size]


def _stack(mels: list[np.ndarray], idx) -> list[tuple[list[int], np.ndarray]]:
    """Group a batch by frame count so every sub-batch stacks cleanly."""
    groups: dict[tuple, list[int]] = {}
    for i in idx:
        groups.setdefault(mels[i].shape, []).append(int(i))
    return [(ids, np.stack([mels[i] for i in ids])) for ids in groups.values()]


# ---------------------------------------------------------------- training


def training_queries(model: DiffSED, cfg: RunConfig, sched: NoiseSchedule, targets, rng):
    """Corrupted queries for one batch.

    Returns (queries [B, N, D], timesteps or None, z0 target or None).
    """
    B = len(targets)
    N = cfg.n_queries
    p = ScaleParams(cfg.scale)
    if cfg.mode == "sedt-baseline":
        return model.dictionary_queries(B), None, None
    t = rng.integers(0, cfg.T, size=B)
    if cfg.mode == "diffsed":
        D = model.cfg.encoder.d_model
        clean = scale_signal(model.dictionary_queries(B), p)
        eps = rng.standard_normal((B, N, D))
        abar = sched.alpha_cumprod[t][:, None, None]
        noisy = clean * np.sqrt(abar) + np.sqrt(1.0 - abar) * eps
        return noisy, t, clean.data.copy()
    boxes = []
    for b, tgt in enumerate(targets):
        padded = scale_signal(pad_boxes(tgt.boxes, N, rng if cfg.shuffle_boxes else None), p)
        boxes.append(q_sample(padded, int(t[b]), rng.standard_normal((N, 2)), sched))
    return model.project_boxes(np.stack(boxes)), t, None


def train_step(model: DiffSED, opt: Adam, cfg: RunConfig, sched: NoiseSchedule, mels: np.ndarray,
               targets, rng, weights: LossWeights = LossWeights()) -> float:
    memory = model.encode(mels, training=True, rng=rng)
    queries, t, z0_target = training_queries(model, cfg, sched, targets, rng)
    decoded = model.decode(queries, memory, t, training=True, rng=rng)
    out = model.heads(decoded)
    anchors = decoded.reference.data[..., 0]
    assignments = match_batch(out.probs(), out.boxes.data, targets, weights, anchors)
    loss = set_prediction_loss(out.logits, out.boxes, targets, assignments, weights)
    if cfg.aux_loss:
        # every earlier decoder layer is matched and supervised through the shared heads
        for layer in decoded.intermediate:
            aux = model.heads(layer)
            loss = loss + set_prediction_loss(aux.logits, aux.boxes, targets,
                                              match_batch(aux.probs(), aux.boxes.data, targets, weights, anchors), weights)
    if z0_target is not None and cfg.z0_weight:
        loss = loss + ad.mean((out.z0_hat - z0_target) * (out.z0_hat - z0_target)) * cfg.z0_weight
    value = float(loss.data)
    if not math.isfinite(value):
        norms = grad_norms(opt.params)
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else 0)[:5]
        raise TrainingError(f"non-finite loss {value} at lr={opt.lr:g}; last grad norms: {worst}")
    opt.zero_grad()
    loss.backward()
    if cfg.grad_clip:
        total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in opt.params))
        if total > cfg.grad_clip:
            for p in opt.params:
                p.grad *= cfg.grad_clip / total
    opt.step()
    return value


def train(cfg: RunConfig, train_set: FeatureSet, val_set: FeatureSet | None = None, n_classes: int | None = None,
          out_dir=None, epoch_callback=None) -> tuple[DiffSED, list[dict]]:
    """Run the full schedule; returns the best-by-validation model and the log rows."""
    cfg.validate()
    if n_classes is None:
        n_classes = 1 + max((int(l) for t in train_set.targets for l in t.labels), default=0)
    max_events = max((len(t.labels) for t in train_set.targets), default=0)
    if max_events > cfg.n_queries:
        raise ValueError(f"a clip has {max_events} events but only {cfg.n_queries} queries")
    ss = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_ss, step_ss = ss.spawn(3)
    model = DiffSED(cfg.model_config(n_classes), seed=int(init_seed.generate_state(1)[0]))
    stacked = np.concatenate([m.ravel() for m in train_set.mels])
    model.feat_mean, model.feat_std = float(stacked.mean()), float(stacked.std() or 1.0)
    sched = cosine_schedule(cfg.T)
    weights = LossWeights(no_event=cfg.no_event_weight, anchor=cfg.anchor_cost)
    opt = Adam(model.params.values(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    step_rng = np.random.default_rng(step_ss)

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    best_f1, best_state = -1.0, model.state_dict()
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr * (cfg.lr_decay if epoch > cfg.lr_decay_epoch else 1.0)
        losses = []
        order = shuffle_rng.permutation(len(train_set.mels))
        for idx in _batches(len(order), cfg.batch, order):
            for ids, mels in _stack(train_set.mels, idx):
                tg = [train_set.targets[i] for i in ids]
                losses.append(train_step(model, opt, cfg, sched, mels, tg, step_rng, weights))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_set is not None:
            rep = evaluate_model(model, cfg, val_set)
            row.update(val_event_f1=rep.event_f1, val_segment_f1=rep.segment_f1, val_tagging_f1=rep.tagging_f1)
            if rep.event_f1 > best_f1:
                best_f1, best_state = rep.event_f1, model.state_dict()
                if out:
                    save_model(model, cfg, out / "best.ckpt")
        row["wall_seconds"] = time.perf_counter() - start
        rows.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        if epoch_callback is not None:
            epoch_callback(row, model)
        if cfg.restore_every and epoch % cfg.restore_every == 0 and epoch < cfg.epochs and val_set is not None:
            model.load_state_dict(best_state)
            opt.reset()
    if out:
        save_model(model, cfg, out / "last.ckpt")
        write_log(rows, out / "convergence.csv")
    if val_set is not None:
        model.load_state_dict(best_state)
    return model, rows


LOG_FIELDS = ["epoch", "train_loss", "val_event_f1", "val_segment_f1", "val_tagging_f1", "wall_seconds"]


def write_log(rows: list[dict], path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in LOG_FIELDS})


# ---------------------------------------------------------------- inference


def predict(model: DiffSED, cfg: RunConfig, mels: list[np.ndarray], steps: int | None = None,
            seed: int | None = None, batch: int = 32, scale: float | None = None) -> list[list]:
    """Proposals (normalized EventProposal lists) for each clip.

    Noise for clip ``i`` comes from its own stream seeded by ``(seed, i)``, so
    results do not depend on batching.
    """
    steps = cfg.infer_steps if steps is None else steps
    seed = cfg.infer_seed if seed is None else seed
    p = ScaleParams(cfg.scale if scale is None else scale)
    sched = cosine_schedule(cfg.T)
    plan = make_step_plan(cfg.T, steps)
    N, D = cfg.n_queries, model.cfg.encoder.d_model
    results: list = [None] * len(mels)
    for idx in _batches(len(mels), batch):
        for ids, x in _stack(mels, idx):
            memory = model.encode(x)
            B = len(ids)
            if model.cfg.mode == "sedt-baseline":
                out = model.heads(model.decode(model.dictionary_queries(B), memory, None))
            else:
                width = 2 if model.cfg.mode == "diffsed-bb" else D
                z = np.stack([np.random.default_rng([seed, i]).standard_normal((N, width)) for i in ids])
                for t, t_prev in plan:
                    q = model.project_boxes(z) if model.cfg.mode == "diffsed-bb" else ad.Tensor(z)
                    out = model.heads(model.decode(q, memory, t))
                    if model.cfg.mode == "diffsed-bb":
                        z0 = scale_signal(out.boxes.data, p)
                    else:
                        z0 = out.z0_hat.data
                    z = ddim_step(z, np.clip(z0, -p.scale, p.scale), t, t_prev, sched)
            for i, props in zip(ids, out.proposals()):
                results[i] = props
    return results


def to_detections(proposals, duration: float, threshold: float = 0.0) -> list[Detection]:
    return [
        Detection(pr.onset * duration, pr.offset * duration, pr.label, pr.score)
        for pr in proposals
        if pr.score >= threshold and pr.offset > pr.onset
    ]


def evaluate_model(model: DiffSED, cfg: RunConfig, data: FeatureSet, steps: int | None = None,
                   seed: int | None = None, scale: float | None = None) -> EvalReport:
    props = predict(model, cfg, data.mels, steps, seed, scale=scale)
    dets = [to_detections(p, d, cfg.threshold) for p, d in zip(props, data.durations)]
    return evaluate(dets, data.annotations, data.durations, cfg.collar, cfg.offset_ratio,
                    cfg.segment_length, cfg.threshold)


# --------------------------------------------------------------- persistence


def save_model(model: DiffSED, cfg: RunConfig, path):
    meta = {
        "model": model.cfg.to_dict(),
        "arch_hash": model.cfg.arch_hash(),
        "run": cfg.to_dict(),
        "feat_mean": model.feat_mean,
        "feat_std": model.feat_std,
    }
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path, expect: ModelConfig | None = None) -> tuple[DiffSED, RunConfig]:
    arrays, meta = load_checkpoint(path)
    mcfg = ModelConfig.from_dict(meta["model"])
    if mcfg.arch_hash() != meta.get("arch_hash"):
        raise ValueError(f"{path}: stored architecture hash does not match its config")
    if expect is not None and expect.arch_hash() != mcfg.arch_hash():
        raise ValueError(f"{path}: architecture {mcfg.arch_hash()} differs from expected {expect.arch_hash()}")
    model = DiffSED(mcfg)
    model.load_state_dict(arrays)
    model.feat_mean, model.feat_std = meta["feat_mean"], meta["feat_std"]
    return model, RunConfig.from_dict(meta["run"])


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

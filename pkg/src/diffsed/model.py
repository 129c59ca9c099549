"""Audio encoder, query-denoising decoder and prediction heads.

Tensors are batched: mel input [B, T, F], encoder memory [B, T', D],
queries [B, N, D]. Convolutions are assembled from strided slices and a
matmul, so the whole network stays inside the autodiff op set.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

MODES = ("diffsed", "diffsed-bb", "sedt-baseline")


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 64
    conv_channels: tuple[int, ...] = (16, 32)
    kernel: int = 3
    stride: int = 2
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    n_queries: int = 30
    n_classes: int = 3
    dropout: float = 0.1
    anchor_radius: float = 0.1  # how far (clip fraction) a query's box centre may move from its anchor


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "diffsed"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d["encoder"])
        enc["conv_channels"] = tuple(enc["conv_channels"])
        return cls(d["mode"], EncoderConfig(**enc), DecoderConfig(**d["decoder"]))

    def arch_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EventProposal:
    onset: float
    offset: float
    class_probs: np.ndarray

    def __post_init__(self):
        if self.onset > self.offset:
            self.onset, self.offset = self.offset, self.onset

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_probs[:-1]))

    @property
    def score(self) -> float:
        return float(np.max(self.class_probs[:-1]))


@dataclass
class HeadOutput:
    logits: Tensor  # [B, N, K+1]
    boxes: Tensor  # [B, N, 2], canonical (onset <= offset), normalized
    z0_hat: Tensor | None  # [B, N, D] denoised query estimate (latent modes)

    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(-1, keepdims=True)

    def proposals(self) -> list[list[EventProposal]]:
        probs, boxes = self.probs(), self.boxes.data
        return [
            [EventProposal(float(bx[0]), float(bx[1]), p) for p, bx in zip(pb, bb)]
            for pb, bb in zip(probs, boxes)
        ]


@dataclass
class Decoded:
    features: Tensor  # F_d [B, N, D]
    reference: Tensor  # [B, N, 3] anchor, centre shift logit, width logit
    intermediate: list["Decoded"] = field(default_factory=list)  # earlier layers, for auxiliary losses


def sinusoidal_embedding(positions, dim: int) -> np.ndarray:
    """[len(positions), dim] sin/cos features at geometric frequencies."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = pos * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=1)
    return emb


def conv_output_size(n: int, kernel: int, stride: int) -> int:
    return (n - kernel) // stride + 1


class DiffSED:
    """Detector parameters plus the forward pieces used by training and inference."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Parameter] = {}
        self.feat_mean = 0.0
        self.feat_std = 1.0
        rng = np.random.default_rng(seed)
        self._build(rng)

    # ------------------------------------------------------------ parameters

    def _add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(value, name)
        self.params[name] = p
        return p

    def _linear(self, name: str, n_in: int, n_out: int, rng, gain: float = 1.0):
        bound = gain * math.sqrt(6.0 / (n_in + n_out))
        self._add(f"{name}.w", rng.uniform(-bound, bound, (n_in, n_out)))
        self._add(f"{name}.b", np.zeros(n_out))

    def _norm(self, name: str, d: int):
        self._add(f"{name}.g", np.ones(d))
        self._add(f"{name}.b", np.zeros(d))

    def _attention(self, name: str, d: int, rng):
        for part in ("q", "k", "v", "o"):
            self._linear(f"{name}.{part}", d, d, rng)
        # a key bias shifts every logit of a softmax row equally, so it can never learn
        del self.params[f"{name}.k.b"]

    def _build(self, rng):
        enc, dec = self.cfg.encoder, self.cfg.decoder
        d = enc.d_model
        c_in, f = 1, enc.n_mels
        for i, c_out in enumerate(enc.conv_channels):
            fan_in = enc.kernel * enc.kernel * c_in
            self._add(f"enc.conv{i}.w", rng.normal(0, math.sqrt(2.0 / fan_in), (fan_in, c_out)))
            self._add(f"enc.conv{i}.b", np.zeros(c_out))
            c_in, f = c_out, conv_output_size(f, enc.kernel, enc.stride)
        if f < 1:
            raise ValueError("conv stack collapses the mel axis")
        self._linear("enc.in_proj", f * c_in, d, rng)
        for i in range(enc.n_layers):
            self._norm(f"enc.l{i}.ln1", d)
            self._attention(f"enc.l{i}.attn", d, rng)
            self._norm(f"enc.l{i}.ln2", d)
            self._linear(f"enc.l{i}.ff1", d, enc.ff_dim, rng)
            self._linear(f"enc.l{i}.ff2", enc.ff_dim, d, rng)
        self._norm("enc.ln_out", d)

        if self.cfg.mode == "diffsed-bb":
            self._add("query.proj", rng.normal(0, 1.0, (2, d)))
        else:
            self._add("query.dict", rng.normal(0, 1.0, (dec.n_queries, d)))
        self._norm("dec.ref_ln", d)
        self._linear("dec.ref", d, 1, rng)
        for i in range(dec.n_layers):
            self._norm(f"dec.l{i}.ln1", d)
            self._attention(f"dec.l{i}.self", d, rng)
            self._norm(f"dec.l{i}.ln2", d)
            self._attention(f"dec.l{i}.cross", d, rng)
            self._norm(f"dec.l{i}.ln3", d)
            self._linear(f"dec.l{i}.ff1", d, dec.ff_dim, rng)
            self._linear(f"dec.l{i}.ff2", dec.ff_dim, d, rng)
            self._norm(f"dec.l{i}.ln_ref", d)
            self._linear(f"dec.l{i}.ref", d, 2, rng, gain=0.1)
        self._norm("dec.ln_out", d)

        self._linear("head.cls", d, dec.n_classes + 1, rng)
        self._linear("head.loc1", d, d, rng)
        self._linear("head.loc2", d, 2, rng)
        if self.cfg.mode == "diffsed":
            self._linear("head.z0", d, d, rng)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]):
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data[...] = v

    # ---------------------------------------------------------------- layers

    def _lin(self, x: Tensor, name: str) -> Tensor:
        y = ad.matmul(x, self.params[f"{name}.w"])
        b = self.params.get(f"{name}.b")
        return y if b is None else y + b

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _mha(self, xq: Tensor, xkv: Tensor, name: str, n_heads: int, key_pos=None,
             dropout: float = 0.0, training: bool = False, rng=None, bias=None, query_pos=None) -> Tensor:
        B, Lq, D = xq.shape
        Lk = xkv.shape[1]
        dh = D // n_heads
        keys_in = xkv if key_pos is None else xkv + key_pos
        queries_in = xq if query_pos is None else xq + query_pos
        q = ad.transpose(ad.reshape(self._lin(queries_in, f"{name}.q"), (B, Lq, n_heads, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(self._lin(keys_in, f"{name}.k"), (B, Lk, n_heads, dh)), (0, 2, 3, 1))
        v = ad.transpose(ad.reshape(self._lin(xkv, f"{name}.v"), (B, Lk, n_heads, dh)), (0, 2, 1, 3))
        logits = ad.matmul(q, k) * (1.0 / math.sqrt(dh))
        if bias is not None:
            logits = logits + bias
        attn = ad.softmax(logits, axis=-1)
        attn = ad.dropout(attn, dropout, rng, training)
        out = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, Lq, D))
        return self._lin(out, f"{name}.o")

    def _ffn(self, x: Tensor, name: str, dropout: float, training: bool, rng) -> Tensor:
        h = ad.dropout(ad.relu(self._lin(x, f"{name}.ff1")), dropout, rng, training)
        return self._lin(h, f"{name}.ff2")

    def _conv(self, x: Tensor, i: int) -> Tensor:
        enc = self.cfg.encoder
        k, s = enc.kernel, enc.stride
        _, T, F, _ = x.shape
        To, Fo = conv_output_size(T, k, s), conv_output_size(F, k, s)
        if To < 1 or Fo < 1:
            raise ValueError(f"input of {T}x{F} too small for the conv stack")
        patches = [
            x[:, dt:dt + s * (To - 1) + 1:s, df:df + s * (Fo - 1) + 1:s, :]
            for dt in range(k) for df in range(k)
        ]
        cols = ad.concat(patches, axis=-1)
        return ad.relu(ad.matmul(cols, self.params[f"enc.conv{i}.w"]) + self.params[f"enc.conv{i}.b"])

    # --------------------------------------------------------------- forward

    def normalize(self, mel: np.ndarray) -> np.ndarray:
        return (np.asarray(mel, dtype=np.float64) - self.feat_mean) / self.feat_std

    def encode(self, mel, training: bool = False, rng=None) -> Tensor:
        """Log-mel batch [B, T, F] (or a single [T, F]) to memory C_a [B, T', D]."""
        enc = self.cfg.encoder
        mel = np.asarray(mel, dtype=np.float64)
        if mel.ndim == 2:
            mel = mel[None]
        if not np.all(np.isfinite(mel)):
            raise ValueError("mel input has non-finite entries")
        if mel.shape[-1] != enc.n_mels:
            raise ValueError(f"expected {enc.n_mels} mel bins, got {mel.shape[-1]}")
        x = Tensor(self.normalize(mel)[..., None])
        for i in range(len(enc.conv_channels)):
            x = self._conv(x, i)
        B, T, F, C = x.shape
        h = self._lin(ad.reshape(x, (B, T, F * C)), "enc.in_proj")
        h = h + sinusoidal_embedding(np.arange(T), enc.d_model)
        h = ad.dropout(h, enc.dropout, rng, training)
        for i in range(enc.n_layers):
            a = self._ln(h, f"enc.l{i}.ln1")
            h = h + ad.dropout(self._mha(a, a, f"enc.l{i}.attn", enc.n_heads, None, enc.dropout, training, rng),
                               enc.dropout, rng, training)
            h = h + ad.dropout(self._ffn(self._ln(h, f"enc.l{i}.ln2"), f"enc.l{i}", enc.dropout, training, rng),
                               enc.dropout, rng, training)
        return self._ln(h, "enc.ln_out")

    def reference_centre(self, ref: Tensor, extra=None) -> Tensor:
        """Anchor plus a shift bounded by ``anchor_radius``, [B, N, 1]."""
        shift = ref[..., 1:2] if extra is None else ref[..., 1:2] + extra
        return ref[..., 0:1] + ad.tanh(shift) * self.cfg.decoder.anchor_radius

    def reference_bias(self, ref: Tensor, n_keys: int) -> Tensor:
        """Log-Gaussian attention prior [B, 1, N, T'] around each query's reference centre.

        Widths live in (0.02, 0.52) of the clip length.
        """
        centre = self.reference_centre(ref)
        width = ad.sigmoid(ref[..., 2:3]) * 0.5 + 0.02
        pos = (np.arange(n_keys) + 0.5) / n_keys
        z = (centre - pos) / width
        bias = z * z * -0.5
        B, N, _ = bias.shape
        return ad.reshape(bias, (B, 1, N, n_keys))

    def reference_embedding(self, ref: Tensor, n_keys: int) -> Tensor:
        """Sinusoidal code of each query's reference centre in key-frame units, [B, N, D].

        Same frequencies as the key positional encoding, so matching positions
        have aligned codes.
        """
        D = self.cfg.encoder.d_model
        half = D // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        ang = self.reference_centre(ref) * (freqs * n_keys)
        parts = [ad.sin(ang), ad.cos(ang)]
        if D % 2:
            parts.append(Tensor(np.zeros(ang.shape[:-1] + (1,))))
        return ad.concat(parts, axis=-1)

    def decode(self, queries: Tensor, memory: Tensor, t=None, training: bool = False, rng=None) -> "Decoded":
        """Refine queries [B, N, D] against memory [B, T', D].

        ``t`` (scalar or per-batch array) adds a sinusoidal timestep embedding;
        ``None`` skips it (clean-query baseline). Each query also carries an
        anchor read from the query itself. A bounded centre shift and a width
        are refined layer by layer; they focus cross-attention and place the box,
        so a query can only claim events near its anchor.
        """
        dec = self.cfg.decoder
        queries = ad.as_tensor(queries)
        if queries.ndim == 2:
            queries = ad.reshape(queries, (1,) + queries.shape)
        B, N, D = queries.shape
        if D != memory.shape[-1]:
            raise ValueError(f"query width {D} differs from memory width {memory.shape[-1]}")
        if memory.shape[0] != B:
            raise ValueError("query and memory batch sizes differ")
        q = queries
        if t is not None:
            t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
            q = q + sinusoidal_embedding(t_arr, D)[:, None, :]
        n_keys = memory.shape[1]
        key_pos = sinusoidal_embedding(np.arange(n_keys), D)
        # fixed alternating-sign probe: N(0, 1) for noise queries, so anchors spread uniformly
        probe = np.where(np.arange(D) % 2 == 0, 1.0, -1.0)[:, None] / math.sqrt(D)
        anchor = ad.sigmoid(ad.matmul(queries, probe) * 1.702)
        zero = Tensor(np.zeros((B, N, 1)))
        ref = ad.concat([anchor, zero, self._lin(self._ln(q, "dec.ref_ln"), "dec.ref")], axis=-1)
        inter = []
        for i in range(dec.n_layers):
            qpos = self.reference_embedding(ref, n_keys)
            a = self._ln(q, f"dec.l{i}.ln1")
            q = q + ad.dropout(self._mha(a, a, f"dec.l{i}.self", dec.n_heads, qpos, dec.dropout, training, rng,
                                         query_pos=qpos), dec.dropout, rng, training)
            a = self._ln(q, f"dec.l{i}.ln2")
            bias = self.reference_bias(ref, n_keys)
            q = q + ad.dropout(
                self._mha(a, memory, f"dec.l{i}.cross", dec.n_heads, key_pos, dec.dropout, training, rng, bias,
                          query_pos=qpos),
                dec.dropout, rng, training)
            q = q + ad.dropout(self._ffn(self._ln(q, f"dec.l{i}.ln3"), f"dec.l{i}", dec.dropout, training, rng),
                               dec.dropout, rng, training)
            step = self._lin(self._ln(q, f"dec.l{i}.ln_ref"), f"dec.l{i}.ref")
            ref = ref + ad.concat([zero, step], axis=-1)
            if i < dec.n_layers - 1:
                inter.append(Decoded(self._ln(q, "dec.ln_out"), ref))
        return Decoded(self._ln(q, "dec.ln_out"), ref, inter)

    def heads(self, dec: "Decoded") -> HeadOutput:
        F_d = dec.features
        logits = self._lin(F_d, "head.cls")
        delta = self._lin(ad.relu(self._lin(F_d, "head.loc1")), "head.loc2")
        centre = self.reference_centre(dec.reference, delta[..., 0:1])
        half = ad.sigmoid(delta[..., 1:2] + dec.reference[..., 2:3]) * 0.5
        lo, hi = centre - half, centre + half
        # clipping is monotone, so onset <= offset survives it
        onset = ad.minimum(ad.maximum(lo, 0.0), 1.0)
        offset = ad.minimum(ad.maximum(hi, 0.0), 1.0)
        boxes = ad.concat([onset, offset], axis=-1)
        z0 = self._lin(F_d, "head.z0") if "head.z0.w" in self.params else None
        return HeadOutput(logits, boxes, z0)

    # ------------------------------------------------------- query sources

    def dictionary_queries(self, batch: int) -> Tensor:
        d = self.params["query.dict"]
        return ad.add(np.zeros((batch,) + d.shape), d)

    def project_boxes(self, boxes) -> Tensor:
        return ad.matmul(ad.as_tensor(boxes), self.params["query.proj"])

    def sedt_baseline_forward(self, mel) -> list[list[EventProposal]]:
        """Clean learned queries, no timestep, one decoder pass."""
        if "query.dict" not in self.params:
            raise ValueError("baseline forward needs a query dictionary")
        memory = self.encode(mel)
        out = self.heads(self.decode(self.dictionary_queries(memory.shape[0]), memory, None))
        return out.proposals()

"""Vision encoder, projection head, and report decoders.

The encoder is a small residual conv stack (16-32-64-64 channels, stride-2
downsampling) mapping a 64x64 grayscale image to a 4x4 feature grid plus a
mean-pooled 64-d vector. The projection head is two fully-connected layers.
Three decoder variants share one interface: a transformer with causal
self-attention and cross-attention over the feature grid, and LSTM/GRU
decoders seeded from the pooled vector.

All parameters are seed-initialized with uniform fan-in scaling, so a fixed
seed reproduces bit-identical models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DECODER_VARIANTS = ("transformer", "lstm", "gru")

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


@dataclass(frozen=True)
class EncoderConfig:
    in_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 2)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def grid_size(self) -> int:
        size = self.in_size
        for s in self.strides:
            size = (size + s - 1) // s
        return size

    def to_dict(self) -> dict:
        return {"in_size": self.in_size, "channels": list(self.channels),
                "strides": list(self.strides)}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(in_size=int(d["in_size"]),
                   channels=tuple(int(c) for c in d["channels"]),
                   strides=tuple(int(s) for s in d["strides"]))


@dataclass(frozen=True)
class ProjectionConfig:
    in_dim: int = 64
    hidden_dim: int = 64
    out_dim: int = 32

    def __post_init__(self):
        if not self.out_dim < self.in_dim:
            raise ValueError("projection out_dim must be below in_dim")

    def to_dict(self) -> dict:
        return {"in_dim": self.in_dim, "hidden_dim": self.hidden_dim,
                "out_dim": self.out_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionConfig":
        return cls(int(d["in_dim"]), int(d["hidden_dim"]), int(d["out_dim"]))


@dataclass(frozen=True)
class DecoderConfig:
    variant: str = "transformer"
    vocab_size: int = 8
    max_len: int = 48
    embed_dim: int = 64
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 256
    feature_dim: int = 64

    def __post_init__(self):
        if self.variant not in DECODER_VARIANTS:
            raise ValueError(f"decoder variant must be one of {DECODER_VARIANTS}")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must divide evenly into heads")

    def to_dict(self) -> dict:
        return {"variant": self.variant, "vocab_size": self.vocab_size,
                "max_len": self.max_len, "embed_dim": self.embed_dim,
                "hidden_dim": self.hidden_dim, "num_layers": self.num_layers,
                "num_heads": self.num_heads, "ffn_dim": self.ffn_dim,
                "feature_dim": self.feature_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(variant=d["variant"], vocab_size=int(d["vocab_size"]),
                   max_len=int(d["max_len"]), embed_dim=int(d["embed_dim"]),
                   hidden_dim=int(d["hidden_dim"]),
                   num_layers=int(d["num_layers"]),
                   num_heads=int(d["num_heads"]), ffn_dim=int(d["ffn_dim"]),
                   feature_dim=int(d["feature_dim"]))


@dataclass
class FeatureMap:
    """Spatial visual features plus their mean-pooled vector."""

    grid: Tensor     # (B, C, Hg, Wg)
    pooled: Tensor   # (B, C), mean over grid positions


class ParamModule:
    """Base holding an ordered name -> Tensor parameter map."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def params(self) -> dict[str, Tensor]:
        return self._params

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"parameter name mismatch: missing={sorted(missing)[:3]} "
                f"extra={sorted(extra)[:3]}")
        for name, tensor in self._params.items():
            arr = np.asarray(arrays[name], dtype=tensor.data.dtype)
            if arr.shape != tensor.shape:
                raise ValueError(
                    f"parameter {name}: shape {arr.shape} != {tensor.shape}")
            tensor.data = arr.copy()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def _add(self, name: str, rng: np.random.Generator, shape, fan_in: int,
             dtype) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        t = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                   requires_grad=True)
        self._params[name] = t
        return t

    def _add_zeros(self, name: str, shape, dtype) -> Tensor:
        t = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        self._params[name] = t
        return t

    def _add_ones(self, name: str, shape, dtype) -> Tensor:
        t = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
        self._params[name] = t
        return t


class Encoder(ParamModule):
    """Residual conv stack; each block is a 3x3 conv plus a 1x1 skip."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        in_ch = 1
        for i, (ch, stride) in enumerate(zip(cfg.channels, cfg.strides)):
            self._add(f"enc.b{i}.conv.w", rng, (ch, in_ch, 3, 3), in_ch * 9, dtype)
            self._add_zeros(f"enc.b{i}.conv.b", (ch,), dtype)
            if in_ch != ch or stride != 1:
                self._add(f"enc.b{i}.skip.w", rng, (ch, in_ch, 1, 1), in_ch, dtype)
                self._add_zeros(f"enc.b{i}.skip.b", (ch,), dtype)
            in_ch = ch

    def forward(self, x: Tensor) -> FeatureMap:
        cfg = self.cfg
        if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.in_size \
                or x.shape[3] != cfg.in_size:
            raise ad.ShapeError("encoder_forward", x.shape,
                                (-1, 1, cfg.in_size, cfg.in_size))
        h = x
        for i, stride in enumerate(cfg.strides):
            main = ad.conv2d(h, self._params[f"enc.b{i}.conv.w"],
                             self._params[f"enc.b{i}.conv.b"],
                             stride=stride, padding="same")
            skip_w = self._params.get(f"enc.b{i}.skip.w")
            if skip_w is None:
                skip = h
            else:
                skip = ad.conv2d(h, skip_w, self._params[f"enc.b{i}.skip.b"],
                                 stride=stride, padding="same")
            h = ad.relu(ad.add(main, skip))
        return FeatureMap(grid=h, pooled=ad.mean_pool(h))


class ProjectionHead(ParamModule):
    """Two fully-connected layers mapping pooled features to the
    lower-dimensional contrastive space."""

    def __init__(self, cfg: ProjectionConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self._add("proj.fc1.w", rng, (cfg.in_dim, cfg.hidden_dim), cfg.in_dim, dtype)
        self._add_zeros("proj.fc1.b", (cfg.hidden_dim,), dtype)
        self._add("proj.fc2.w", rng, (cfg.hidden_dim, cfg.out_dim),
                  cfg.hidden_dim, dtype)
        self._add_zeros("proj.fc2.b", (cfg.out_dim,), dtype)

    def forward(self, r: Tensor) -> Tensor:
        if r.data.ndim != 2 or r.shape[1] != self.cfg.in_dim:
            raise ad.ShapeError("projection_forward", r.shape,
                                (-1, self.cfg.in_dim))
        h = ad.relu(ad.add_bias(ad.matmul(r, self._params["proj.fc1.w"]),
                                self._params["proj.fc1.b"]))
        return ad.add_bias(ad.matmul(h, self._params["proj.fc2.w"]),
                           self._params["proj.fc2.b"])


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(..., in) @ (in, out) + bias via a flattening matmul."""
    lead = x.shape[:-1]
    flat = ad.reshape(x, (int(np.prod(lead)), x.shape[-1]))
    out = ad.add_bias(ad.matmul(flat, w), b)
    return ad.reshape(out, (*lead, w.shape[1]))


class TransformerDecoder(ParamModule):
    """Pre-norm transformer decoder with causal self-attention and
    cross-attention over the encoder's feature grid."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        d, f = cfg.embed_dim, cfg.ffn_dim
        self._add("dec.tok_emb", rng, (cfg.vocab_size, d), d, dtype)
        self._add("dec.pos_emb", rng, (cfg.max_len, d), d, dtype)
        self._add("dec.mem.w", rng, (cfg.feature_dim, d), cfg.feature_dim, dtype)
        self._add_zeros("dec.mem.b", (d,), dtype)
        for i in range(cfg.num_layers):
            p = f"dec.l{i}"
            for ln in ("ln1", "ln2", "ln3"):
                self._add_ones(f"{p}.{ln}.g", (d,), dtype)
                self._add_zeros(f"{p}.{ln}.b", (d,), dtype)
            for blk in ("self", "cross"):
                for mat in ("q", "k", "v", "o"):
                    self._add(f"{p}.{blk}.{mat}.w", rng, (d, d), d, dtype)
                    self._add_zeros(f"{p}.{blk}.{mat}.b", (d,), dtype)
            self._add(f"{p}.ffn.w1", rng, (d, f), d, dtype)
            self._add_zeros(f"{p}.ffn.b1", (f,), dtype)
            self._add(f"{p}.ffn.w2", rng, (f, d), f, dtype)
            self._add_zeros(f"{p}.ffn.b2", (d,), dtype)
        self._add_ones("dec.ln_out.g", (d,), dtype)
        self._add_zeros("dec.ln_out.b", (d,), dtype)
        self._add("dec.out.w", rng, (d, cfg.vocab_size), d, dtype)
        self._add_zeros("dec.out.b", (cfg.vocab_size,), dtype)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, l, d = x.shape
        h = self.cfg.num_heads
        hd = d // h
        x = ad.reshape(x, (b, l, h, hd))
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (b * h, l, hd))

    def _merge_heads(self, x: Tensor, batch: int) -> Tensor:
        bh, l, hd = x.shape
        h = self.cfg.num_heads
        x = ad.reshape(x, (batch, h, l, hd))
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (batch, l, h * hd))

    def _attention(self, q_in: Tensor, kv_in: Tensor, prefix: str,
                   mask: np.ndarray | None) -> Tensor:
        b = q_in.shape[0]
        hd = self.cfg.embed_dim // self.cfg.num_heads
        q = self._split_heads(_linear(q_in, self._params[f"{prefix}.q.w"],
                                      self._params[f"{prefix}.q.b"]))
        k = self._split_heads(_linear(kv_in, self._params[f"{prefix}.k.w"],
                                      self._params[f"{prefix}.k.b"]))
        v = self._split_heads(_linear(kv_in, self._params[f"{prefix}.v.w"],
                                      self._params[f"{prefix}.v.b"]))
        scores = ad.scale(ad.bmm(q, ad.transpose(k, (0, 2, 1))),
                          1.0 / np.sqrt(hd))
        if mask is not None:
            scores = ad.add_bias(scores, Tensor(mask.astype(self.dtype)))
        ctx = ad.bmm(ad.softmax(scores), v)
        out = self._merge_heads(ctx, b)
        return _linear(out, self._params[f"{prefix}.o.w"],
                       self._params[f"{prefix}.o.b"])

    def _memory(self, features: FeatureMap) -> Tensor:
        grid = features.grid
        b, c, gh, gw = grid.shape
        mem = ad.reshape(grid, (b, c, gh * gw))
        mem = ad.transpose(mem, (0, 2, 1))
        return _linear(mem, self._params["dec.mem.w"], self._params["dec.mem.b"])

    def logits(self, features: FeatureMap, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        b, l = tokens.shape
        cfg = self.cfg
        if l > cfg.max_len:
            raise ValueError(f"sequence length {l} exceeds max_len {cfg.max_len}")
        x = ad.embedding(self._params["dec.tok_emb"], tokens)
        pos = ad.slice_last(ad.transpose(self._params["dec.pos_emb"], (1, 0)), 0, l)
        x = ad.add_bias(x, ad.transpose(pos, (1, 0)))
        mem = self._memory(features)
        causal = np.triu(np.full((l, l), -1e9), k=1)
        for i in range(cfg.num_layers):
            p = f"dec.l{i}"
            h = ad.layer_norm(x, self._params[f"{p}.ln1.g"],
                              self._params[f"{p}.ln1.b"])
            x = ad.add(x, self._attention(h, h, f"{p}.self", causal))
            h = ad.layer_norm(x, self._params[f"{p}.ln2.g"],
                              self._params[f"{p}.ln2.b"])
            x = ad.add(x, self._attention(h, mem, f"{p}.cross", None))
            h = ad.layer_norm(x, self._params[f"{p}.ln3.g"],
                              self._params[f"{p}.ln3.b"])
            ffn = _linear(ad.relu(_linear(h, self._params[f"{p}.ffn.w1"],
                                          self._params[f"{p}.ffn.b1"])),
                          self._params[f"{p}.ffn.w2"],
                          self._params[f"{p}.ffn.b2"])
            x = ad.add(x, ffn)
        x = ad.layer_norm(x, self._params["dec.ln_out.g"],
                          self._params["dec.ln_out.b"])
        return _linear(x, self._params["dec.out.w"], self._params["dec.out.b"])


class RecurrentDecoder(ParamModule):
    """LSTM or GRU decoder consuming the pooled feature vector as its
    initial hidden state."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        if cfg.variant not in ("lstm", "gru"):
            raise ValueError(f"RecurrentDecoder got variant {cfg.variant!r}")
        self.cfg = cfg
        self.dtype = dtype
        d, h = cfg.embed_dim, cfg.hidden_dim
        gates = 4 * h if cfg.variant == "lstm" else 3 * h
        self._add("dec.tok_emb", rng, (cfg.vocab_size, d), d, dtype)
        self._add("dec.init_h.w", rng, (cfg.feature_dim, h), cfg.feature_dim, dtype)
        self._add_zeros("dec.init_h.b", (h,), dtype)
        if cfg.variant == "lstm":
            self._add("dec.init_c.w", rng, (cfg.feature_dim, h),
                      cfg.feature_dim, dtype)
            self._add_zeros("dec.init_c.b", (h,), dtype)
        self._add("dec.wx", rng, (d, gates), d, dtype)
        self._add("dec.wh", rng, (h, gates), h, dtype)
        self._add_zeros("dec.b", (gates,), dtype)
        self._add("dec.out.w", rng, (h, cfg.vocab_size), h, dtype)
        self._add_zeros("dec.out.b", (cfg.vocab_size,), dtype)

    def _init_state(self, pooled: Tensor):
        h0 = ad.tanh(ad.add_bias(ad.matmul(pooled, self._params["dec.init_h.w"]),
                                 self._params["dec.init_h.b"]))
        if self.cfg.variant == "lstm":
            c0 = ad.tanh(ad.add_bias(
                ad.matmul(pooled, self._params["dec.init_c.w"]),
                self._params["dec.init_c.b"]))
            return h0, c0
        return h0, None

    def _step(self, x_t: Tensor, h: Tensor, c: Tensor | None):
        hd = self.cfg.hidden_dim
        xg = ad.add_bias(ad.matmul(x_t, self._params["dec.wx"]),
                         self._params["dec.b"])
        hg = ad.matmul(h, self._params["dec.wh"])
        if self.cfg.variant == "lstm":
            g = ad.add(xg, hg)
            i = ad.sigmoid(ad.slice_last(g, 0, hd))
            f = ad.sigmoid(ad.slice_last(g, hd, 2 * hd))
            o = ad.sigmoid(ad.slice_last(g, 2 * hd, 3 * hd))
            cand = ad.tanh(ad.slice_last(g, 3 * hd, 4 * hd))
            c = ad.add(ad.mul(f, c), ad.mul(i, cand))
            h = ad.mul(o, ad.tanh(c))
            return h, c
        z = ad.sigmoid(ad.add(ad.slice_last(xg, 0, hd),
                              ad.slice_last(hg, 0, hd)))
        r = ad.sigmoid(ad.add(ad.slice_last(xg, hd, 2 * hd),
                              ad.slice_last(hg, hd, 2 * hd)))
        cand = ad.tanh(ad.add(ad.slice_last(xg, 2 * hd, 3 * hd),
                              ad.mul(r, ad.slice_last(hg, 2 * hd, 3 * hd))))
        ones = Tensor(np.ones(z.shape, dtype=self.dtype))
        h = ad.add(ad.mul(ad.sub(ones, z), cand), ad.mul(z, h))
        return h, None

    def logits(self, features: FeatureMap, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        b, l = tokens.shape
        if l > self.cfg.max_len:
            raise ValueError(
                f"sequence length {l} exceeds max_len {self.cfg.max_len}")
        h, c = self._init_state(features.pooled)
        outs = []
        for t in range(l):
            x_t = ad.embedding(self._params["dec.tok_emb"], tokens[:, t])
            h, c = self._step(x_t, h, c)
            step_logits = ad.add_bias(ad.matmul(h, self._params["dec.out.w"]),
                                      self._params["dec.out.b"])
            outs.append(ad.reshape(step_logits, (b, 1, self.cfg.vocab_size)))
        return ad.concat(outs, axis=1)


def build_decoder(cfg: DecoderConfig, rng: np.random.Generator,
                  dtype=np.float32):
    if cfg.variant == "transformer":
        return TransformerDecoder(cfg, rng, dtype)
    return RecurrentDecoder(cfg, rng, dtype)


@dataclass
class ReportModel:
    """Encoder + decoder pair trained end-to-end for report generation."""

    encoder: Encoder
    decoder: ParamModule

    def params(self) -> dict[str, Tensor]:
        return {**self.encoder.params(), **self.decoder.params()}

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params().items()}

    def zero_grads(self) -> None:
        self.encoder.zero_grads()
        self.decoder.zero_grads()


def greedy_decode(model: ReportModel, images: np.ndarray, max_len: int,
                  eos_id: int = EOS_ID, bos_id: int = BOS_ID) -> list[list[int]]:
    """Batched greedy generation: argmax token per step until EOS/max_len.

    Returns per-sample id sequences starting after BOS, including the EOS
    when one was produced. Deterministic given the model and inputs.
    """
    n = images.shape[0]
    if n == 0:
        return []
    dtype = model.encoder.dtype
    x = Tensor(images[:, None, :, :].astype(dtype))
    features = model.encoder.forward(x)
    tokens = np.full((n, 1), bos_id, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        logits = model.decoder.logits(features, tokens).data
        nxt = np.argmax(logits[:, -1, :], axis=-1)
        nxt = np.where(done, PAD_ID, nxt)
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
        done |= nxt == eos_id
        if done.all():
            break
    out = []
    for row in tokens[:, 1:]:
        seq = []
        for tid in row:
            if tid == PAD_ID:
                break
            seq.append(int(tid))
            if tid == eos_id:
                break
        out.append(seq)
    return out

"""Supervised encoder-decoder training on (image, report) pairs and greedy
report generation for evaluation.

The loss is mean token-level cross-entropy with teacher forcing, masked so
padded positions contribute exactly zero. The whole network trains
end-to-end by default; ``freeze_encoder`` keeps the pretrained encoder
fixed for ablations. When a validation set is supplied the best-validation
parameters are retained.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .models import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    DecoderConfig,
    Encoder,
    EncoderConfig,
    ReportModel,
    build_decoder,
    greedy_decode,
)
from .metrics import tokenize
from .pretrain import NumericalError, OptimState, adam_update, cosine_lr
from .validation import InputError, check_image_batch

_RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass(frozen=True)
class Vocab:
    """Token/id bijection with reserved PAD=0, BOS=1, EOS=2, UNK=3."""

    tokens: tuple[str, ...]

    @classmethod
    def build(cls, texts: list[str], min_freq: int = 1) -> "Vocab":
        counts = Counter()
        for text in texts:
            counts.update(tokenize(text))
        kept = [t for t, c in counts.items() if c >= min_freq]
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(tuple(kept))

    @property
    def size(self) -> int:
        return len(self.tokens) + len(_RESERVED)

    def token_id(self, token: str) -> int:
        try:
            return len(_RESERVED) + self.tokens.index(token)
        except ValueError:
            return UNK_ID

    def encode(self, text: str, max_len: int) -> list[int]:
        toks = tokenize(text)
        if not toks:
            raise InputError("cannot encode an empty report")
        ids = [self.token_id(t) for t in toks[:max_len - 2]]
        return [BOS_ID, *ids, EOS_ID]

    def decode(self, ids: list[int]) -> str:
        words = []
        for tid in ids:
            if tid == EOS_ID:
                break
            if tid < len(_RESERVED):
                continue
            words.append(self.tokens[tid - len(_RESERVED)])
        return " ".join(words)


def pad_batch(seqs: list[list[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def teacher_forced_loss(images, report_ids: np.ndarray,
                        model: ReportModel) -> Tensor:
    """Mean cross-entropy over non-PAD target positions, gold prefixes in.

    ``images`` may be an (B, H, W) array or an already-batched (B, 1, H, W)
    Tensor (the latter keeps the graph open for gradient checks).
    """
    report_ids = np.asarray(report_ids)
    if report_ids.ndim != 2 or report_ids.shape[1] < 2:
        raise InputError(f"report_ids must be (B, L>=2), got {report_ids.shape}")
    b = report_ids.shape[0]
    inputs = report_ids[:, :-1]
    targets = report_ids[:, 1:]
    mask = (targets != PAD_ID).astype(model.encoder.dtype)
    if isinstance(images, Tensor):
        x = images
    else:
        x = Tensor(images[:, None, :, :].astype(model.encoder.dtype))
    features = model.encoder.forward(x)
    logits = model.decoder.logits(features, inputs)
    v = logits.shape[-1]
    flat = ad.reshape(logits, (b * inputs.shape[1], v))
    return ad.cross_entropy_with_logits(flat, targets.reshape(-1),
                                        mask.reshape(-1))


def _eval_loss(images: np.ndarray, ids: np.ndarray, model: ReportModel,
               batch: int = 64) -> float:
    total = 0.0
    weight = 0.0
    for s in range(0, images.shape[0], batch):
        chunk = slice(s, s + batch)
        n_tok = float((ids[chunk][:, 1:] != PAD_ID).sum())
        total += teacher_forced_loss(images[chunk], ids[chunk], model).item() * n_tok
        weight += n_tok
    return total / weight if weight else 0.0


class ReportGenerator(BaseEstimator):
    """Encoder-decoder report generator with a scikit-learn surface.

    ``fit(X, y)`` takes images (n, H, W) and report strings; pass
    ``X_val``/``y_val`` to enable best-validation checkpointing.
    ``encoder_init`` accepts an encoder checkpoint path produced by the
    pretrainer; None trains from scratch. ``predict(X)`` returns greedy
    generations as text.
    """

    def __init__(self, decoder="transformer", epochs=8, batch_size=16,
                 lr_max=1e-3, lr_min=1e-5, weight_decay=1e-6, max_len=48,
                 embed_dim=64, hidden_dim=64, num_layers=2, num_heads=4,
                 ffn_dim=256, min_freq=1, freeze_encoder=False,
                 encoder_init=None, seed=0):
        self.decoder = decoder
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.max_len = max_len
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.ffn_dim = ffn_dim
        self.min_freq = min_freq
        self.freeze_encoder = freeze_encoder
        self.encoder_init = encoder_init
        self.seed = seed

    # -- model assembly ----------------------------------------------------

    def _build_encoder(self, image_size: int, rng: np.random.Generator) -> Encoder:
        if self.encoder_init is None:
            return Encoder(EncoderConfig(in_size=image_size), rng)
        config, params = load_checkpoint(self.encoder_init)
        if config.get("kind") != "encoder" or "encoder" not in config:
            raise CheckpointError(
                f"{self.encoder_init}: not an encoder checkpoint "
                f"(kind={config.get('kind')!r})")
        enc_cfg = EncoderConfig.from_dict(config["encoder"])
        if enc_cfg.in_size != image_size:
            raise CheckpointError(
                f"{self.encoder_init}: encoder expects {enc_cfg.in_size}px "
                f"inputs, data is {image_size}px")
        encoder = Encoder(enc_cfg, rng)
        try:
            encoder.load_param_arrays(params)
        except ValueError as e:
            raise CheckpointError(f"{self.encoder_init}: {e}") from e
        return encoder

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_image_batch(X)
        if len(y) != X.shape[0]:
            raise InputError("X and y lengths differ")
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")
        root = np.random.SeedSequence(self.seed)
        init_ss, order_ss = root.spawn(2)
        init_rng = np.random.default_rng(init_ss)
        order_rng = np.random.default_rng(order_ss)

        vocab = Vocab.build(list(y), min_freq=self.min_freq)
        encoder = self._build_encoder(X.shape[1], init_rng)
        dec_cfg = DecoderConfig(
            variant=self.decoder, vocab_size=vocab.size, max_len=self.max_len,
            embed_dim=self.embed_dim, hidden_dim=self.hidden_dim,
            num_layers=self.num_layers, num_heads=self.num_heads,
            ffn_dim=self.ffn_dim, feature_dim=encoder.cfg.feature_dim)
        decoder = build_decoder(dec_cfg, init_rng)
        model = ReportModel(encoder, decoder)

        if self.freeze_encoder:
            for p in encoder.params().values():
                p.requires_grad = False
                p.grad = None
            train_params = decoder.params()
        else:
            train_params = model.params()

        ids = pad_batch([vocab.encode(t, self.max_len) for t in y])
        val_ids = None
        if X_val is not None:
            X_val = check_image_batch(X_val)
            val_ids = pad_batch([vocab.encode(t, self.max_len) for t in y_val])

        optim = OptimState(lr_max=self.lr_max, lr_min=self.lr_min,
                           weight_decay=self.weight_decay)
        n = X.shape[0]
        batch = int(self.batch_size)
        steps_per_epoch = max(1, n // batch) if n >= batch else 1
        total_steps = self.epochs * steps_per_epoch
        log: list[tuple[int, int, float, float]] = []
        history: list[tuple[int, float, float]] = []
        best_val = np.inf
        best_params = None
        best_epoch = -1
        gstep = 0
        for epoch in range(self.epochs):
            order = np.arange(n)
            order_rng.shuffle(order)
            epoch_losses = []
            for s in range(steps_per_epoch):
                idx = order[s * batch:(s + 1) * batch]
                if idx.size == 0:
                    continue
                lr = cosine_lr(gstep, total_steps, self.lr_max, self.lr_min)
                loss = teacher_forced_loss(X[idx], ids[idx], model)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError(f"finetune loss is not finite: {value}")
                model.zero_grads()
                loss.backward()
                adam_update(train_params, optim, lr)
                log.append((epoch, gstep, lr, value))
                epoch_losses.append(value)
                gstep += 1
            train_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
            val_loss = float("nan")
            if val_ids is not None:
                val_loss = _eval_loss(X_val, val_ids, model)
                if val_loss < best_val:
                    best_val = val_loss
                    best_epoch = epoch
                    best_params = {k: v.copy()
                                   for k, v in model.param_arrays().items()}
            history.append((epoch, train_loss, val_loss))

        if best_params is not None:
            for name, p in model.params().items():
                p.data = best_params[name]

        self.vocab_ = vocab
        self.model_ = model
        self.decoder_config_ = dec_cfg
        self.loss_log_ = log
        self.history_ = history
        self.best_epoch_ = best_epoch if best_params is not None else None
        return self

    def predict(self, X) -> list[str]:
        X = check_image_batch(X)
        seqs = greedy_decode(self.model_, X, self.model_.decoder.cfg.max_len)
        return [self.vocab_.decode(s) for s in seqs]

    def save_model(self, path: str, extra: dict | None = None) -> None:
        config = {"kind": "report",
                  "encoder": self.model_.encoder.cfg.to_dict(),
                  "decoder": self.decoder_config_.to_dict(),
                  "vocab": list(self.vocab_.tokens),
                  "seed": int(self.seed)}
        if extra:
            config.update(extra)
        save_checkpoint(path, config, self.model_.param_arrays())


def load_report_model(path: str) -> tuple[ReportModel, Vocab, dict]:
    """Rebuild a saved encoder-decoder model and its vocabulary."""
    config, params = load_checkpoint(path)
    if config.get("kind") != "report":
        raise CheckpointError(
            f"{path}: not a report checkpoint (kind={config.get('kind')!r})")
    rng = np.random.default_rng(0)
    encoder = Encoder(EncoderConfig.from_dict(config["encoder"]), rng)
    dec_cfg = DecoderConfig.from_dict(config["decoder"])
    decoder = build_decoder(dec_cfg, rng)
    model = ReportModel(encoder, decoder)
    merged = {**encoder.params(), **decoder.params()}
    missing = set(merged) - set(params)
    extra = set(params) - set(merged)
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter records do not match the configured model "
            f"(missing={sorted(missing)[:3]}, extra={sorted(extra)[:3]})")
    try:
        encoder.load_param_arrays(
            {k: v for k, v in params.items() if k in encoder.params()})
        decoder.load_param_arrays(
            {k: v for k, v in params.items() if k in decoder.params()})
    except ValueError as e:
        raise CheckpointError(f"{path}: {e}") from e
    return model, Vocab(tuple(config["vocab"])), config


def generate_reports(model: ReportModel, vocab: Vocab, images: np.ndarray,
                     ids: list[str],
                     references: list[str]) -> list[tuple[str, str, str]]:
    """Greedy generation for a whole split: (id, generated, reference)."""
    if images.shape[0] == 0:
        return []
    out = []
    for s in range(0, images.shape[0], 128):
        chunk = slice(s, min(s + 128, images.shape[0]))
        seqs = greedy_decode(model, images[chunk], model.decoder.cfg.max_len)
        for k, seq in enumerate(seqs):
            i = s + k
            out.append((ids[i], vocab.decode(seq), references[i]))
    return out


def write_generations(path: str, rows: list[tuple[str, str, str]]) -> None:
    """One `id<TAB>generated<TAB>reference` record per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rid, gen, ref in rows:
            f.write(f"{rid}\t{gen}\t{ref}\n")

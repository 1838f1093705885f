"""Contrastive pretraining: the temperature-scaled pairwise loss (log form
by default, with a flag reproducing the printed no-log variant), SimCLR and
MoCo procedures, the Adam/cosine optimizer stack, and the AE / MLC /
scratch baseline pretrainers, wrapped in a scikit-learn style estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import DegenerateInputError, Tensor
from .augment import AugmentConfig, make_positive_pair
from .checkpoint import save_checkpoint
from .data import KEYWORDS
from .models import (
    Encoder,
    EncoderConfig,
    ParamModule,
    ProjectionConfig,
    ProjectionHead,
)
from .validation import InputError, check_image_batch

PRETRAIN_METHODS = ("scratch", "ae", "mlc", "simclr", "simclr_lungseg", "moco")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_WEIGHT_DECAY = 1e-6


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# contrastive loss
# ---------------------------------------------------------------------------

@dataclass
class ContrastiveBatch:
    """2N projected views plus the positive-pairing involution j(i).

    The exclusion set B(i) = I \\ {i} is derived inside the loss, never
    stored.
    """

    views: Tensor            # (2N, k), unit rows
    pairing: np.ndarray      # pairing[i] = j(i), j(j(i)) = i, j(i) != i

    def __post_init__(self):
        n = self.views.shape[0]
        p = np.asarray(self.pairing)
        if p.shape != (n,):
            raise InputError(f"pairing shape {p.shape} != ({n},)")
        idx = np.arange(n)
        if np.any(p == idx) or not np.array_equal(p[p], idx):
            raise InputError("pairing must be an involution with j(i) != i")


def interleaved_pairing(n_pairs: int) -> np.ndarray:
    """Pairing for views ordered [a0, b0, a1, b1, ...]: j(i) = i XOR 1."""
    return np.arange(2 * n_pairs) ^ 1


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    literal_eq1: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise InputError(f"temperature must be positive, got {self.temperature}")


def nt_xent_loss(batch: ContrastiveBatch, cfg: LossConfig = LossConfig()) -> Tensor:
    """Temperature-scaled contrastive loss over a batch of paired views.

    Default mode: mean over i of -log softmax ratio of the positive pair
    against all non-self similarities. ``literal_eq1`` instead returns the
    printed formula verbatim: the negated un-logged ratio summed over i.
    Similarities are max-subtracted before exponentiation.
    """
    z = batch.views
    n = z.shape[0]
    if n < 2:
        raise InputError(f"contrastive batch needs >= 2 views, got {n}")
    norms = np.sqrt((z.data * z.data).sum(axis=1))
    if np.abs(norms - 1.0).max() > 1e-6:
        raise DegenerateInputError(
            f"nt_xent_loss: views must be unit-normalized "
            f"(max deviation {np.abs(norms - 1.0).max():.2e})")
    dtype = z.data.dtype
    sims = ad.scale(ad.similarity_matrix(z, z), 1.0 / cfg.temperature)
    # exclude k = i from every denominator
    diag = Tensor(np.diag(np.full(n, -1e9)).astype(dtype))
    sims = ad.add(sims, diag)
    onehot = np.zeros((n, n), dtype=dtype)
    onehot[np.arange(n), batch.pairing] = 1.0
    picker = Tensor(onehot)
    if cfg.literal_eq1:
        ratios = ad.softmax(sims)
        return ad.scale(ad.sum_all(ad.mul(ratios, picker)), -1.0)
    logprobs = ad.log_softmax(sims)
    return ad.scale(ad.sum_all(ad.mul(logprobs, picker)), -1.0 / n)


def _sorted_sum(values: np.ndarray) -> float:
    return float(np.sort(values, kind="stable").sum())


def nt_xent_direct(z: np.ndarray, pairing: np.ndarray, temperature: float,
                   literal_eq1: bool = False) -> float:
    """Direct float64 evaluation of the loss formula, term by term.

    Reductions run over sorted values, so the result is exactly invariant
    under consistent permutations of the batch. Serves as the independent
    oracle for nt_xent_loss.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    terms = []
    for i in range(n):
        sims = z @ z[i] / temperature
        stab = max(sims[k] for k in range(n) if k != i)
        exps = np.exp(sims - stab)
        denom = _sorted_sum(np.array([exps[k] for k in range(n) if k != i]))
        ratio = exps[pairing[i]] / denom
        terms.append(ratio if literal_eq1 else -np.log(ratio))
    if literal_eq1:
        return -_sorted_sum(np.array(terms))
    return _sorted_sum(np.array(terms)) / n


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr_max: float = 1e-3,
              lr_min: float = 1e-5) -> float:
    """Cosine decay from lr_max at step 0 to lr_min at total_steps;
    steps past the end clamp to lr_min."""
    if step < 0:
        raise InputError(f"step must be >= 0, got {step}")
    if step >= total_steps:
        return float(lr_min)
    # python float out: a numpy scalar would promote float32 params
    return float(lr_min + 0.5 * (lr_max - lr_min)
                 * (1.0 + np.cos(np.pi * step / total_steps)))


@dataclass
class OptimState:
    """Adam moments per parameter plus the shared step counter."""

    lr_max: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, Tensor], state: OptimState, lr: float) -> None:
    """One Adam step with bias correction and decoupled weight decay.

    Reads each parameter's accumulated ``grad``; weight decay is applied to
    the parameters directly, never folded into the moments.
    """
    lr = float(lr)
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ad.ShapeError("adam_update", g.shape, p.data.shape)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data = p.data - lr * (mhat / (np.sqrt(vhat) + ADAM_EPS)
                                + state.weight_decay * p.data)


# ---------------------------------------------------------------------------
# view building and training steps
# ---------------------------------------------------------------------------

def build_contrastive_views(images: np.ndarray, masks: np.ndarray | None,
                            aug_cfg: AugmentConfig, rng: np.random.Generator,
                            dtype=np.float32):
    """Augment each image into two views, interleaved [a0, b0, a1, b1, ...]."""
    views = []
    for i in range(images.shape[0]):
        mask_i = None if masks is None else masks[i]
        v1, v2 = make_positive_pair(images[i], mask_i, aug_cfg, rng)
        views.append(v1)
        views.append(v2)
    stack = np.stack(views).astype(dtype)[:, None, :, :]
    return stack, interleaved_pairing(images.shape[0])


def _project_normalized(encoder: Encoder, projector: ProjectionHead,
                        x: Tensor) -> Tensor:
    return ad.l2_normalize(projector.forward(encoder.forward(x).pooled))


def simclr_step(images: np.ndarray, masks: np.ndarray | None,
                encoder: Encoder, projector: ProjectionHead,
                aug_cfg: AugmentConfig, loss_cfg: LossConfig,
                optim: OptimState, lr: float,
                rng: np.random.Generator) -> float:
    """One in-batch contrastive gradient step; returns the pre-step loss."""
    if images.shape[0] < 2:
        raise InputError("simclr_step needs a batch of >= 2 images")
    views, pairing = build_contrastive_views(images, masks, aug_cfg, rng,
                                             encoder.dtype)
    z = _project_normalized(encoder, projector, Tensor(views))
    loss = nt_xent_loss(ContrastiveBatch(z, pairing), loss_cfg)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"simclr loss is not finite: {value}")
    encoder.zero_grads()
    projector.zero_grads()
    loss.backward()
    params = {**encoder.params(), **projector.params()}
    adam_update(params, optim, lr)
    return value


@dataclass
class MocoState:
    """Momentum copies of encoder/projector plus the FIFO key queue."""

    key_encoder: Encoder
    key_projector: ProjectionHead
    queue: np.ndarray          # (K, k) unit rows; only the first size are live
    size: int
    ptr: int
    momentum: float

    def live_queue(self) -> np.ndarray:
        return self.queue[:self.size]


def init_moco(encoder: Encoder, projector: ProjectionHead, queue_size: int,
              momentum: float, rng: np.random.Generator) -> MocoState:
    key_enc = Encoder(encoder.cfg, rng, encoder.dtype)
    key_proj = ProjectionHead(projector.cfg, rng, encoder.dtype)
    for src, dst in ((encoder, key_enc), (projector, key_proj)):
        for name, p in dst.params().items():
            p.data = src.params()[name].data.copy()
            p.requires_grad = False
            p.grad = None
    k = projector.cfg.out_dim
    queue = np.zeros((queue_size, k), dtype=encoder.dtype)
    return MocoState(key_enc, key_proj, queue, size=0, ptr=0,
                     momentum=momentum)


def momentum_update(moco: MocoState, encoder: Encoder,
                    projector: ProjectionHead) -> None:
    m = moco.momentum
    for src, dst in ((encoder, moco.key_encoder),
                     (projector, moco.key_projector)):
        src_params = src.params()
        for name, p in dst.params().items():
            p.data = m * p.data + (1.0 - m) * src_params[name].data


def moco_step(images: np.ndarray, masks: np.ndarray | None,
              encoder: Encoder, projector: ProjectionHead, moco: MocoState,
              aug_cfg: AugmentConfig, loss_cfg: LossConfig,
              optim: OptimState, lr: float,
              rng: np.random.Generator) -> float:
    """One momentum-contrast step: queries meet their keys plus the queue.

    The key branch runs through the momentum copies without a gradient
    graph; fresh keys are enqueued FIFO after the loss.
    """
    n = images.shape[0]
    if n < 1:
        raise InputError("moco_step needs a nonempty batch")
    views, _ = build_contrastive_views(images, masks, aug_cfg, rng,
                                       encoder.dtype)
    query_views = views[0::2]
    key_views = views[1::2]
    momentum_update(moco, encoder, projector)
    q = _project_normalized(encoder, projector, Tensor(query_views))
    keys = _project_normalized(moco.key_encoder, moco.key_projector,
                               Tensor(key_views)).data

    k_dim = q.shape[1]
    ones = Tensor(np.ones((k_dim, 1), dtype=encoder.dtype))
    pos = ad.matmul(ad.mul(q, Tensor(keys)), ones)            # (n, 1)
    live = moco.live_queue()
    if live.shape[0]:
        neg = ad.similarity_matrix(q, Tensor(live.copy()))    # (n, Q)
        logits = ad.concat([pos, neg], axis=1)
    else:
        logits = pos
    logits = ad.scale(logits, 1.0 / loss_cfg.temperature)
    loss = ad.cross_entropy_with_logits(logits, np.zeros(n, dtype=np.int64))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"moco loss is not finite: {value}")
    encoder.zero_grads()
    projector.zero_grads()
    loss.backward()
    adam_update({**encoder.params(), **projector.params()}, optim, lr)

    capacity = moco.queue.shape[0]
    for row in keys:
        moco.queue[moco.ptr] = row
        moco.ptr = (moco.ptr + 1) % capacity
        moco.size = min(moco.size + 1, capacity)
    return value


# ---------------------------------------------------------------------------
# baseline pretrainers
# ---------------------------------------------------------------------------

class ReconstructionHead(ParamModule):
    """Transposed-conv stack decoding the feature grid back to the image."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        channels = (cfg.feature_dim, 32, 16, 8, 1)
        self.n_stages = len(channels) - 1
        for i in range(self.n_stages):
            cin, cout = channels[i], channels[i + 1]
            self._add(f"ae.d{i}.w", rng, (cin, cout, 3, 3), cin * 9, dtype)
            self._add_zeros(f"ae.d{i}.b", (cout,), dtype)

    def forward(self, grid: Tensor) -> Tensor:
        h = grid
        for i in range(self.n_stages):
            h = ad.conv2d_transpose(h, self._params[f"ae.d{i}.w"],
                                    self._params[f"ae.d{i}.b"], stride=2)
            if i < self.n_stages - 1:
                h = ad.relu(h)
        return ad.sigmoid(h)


def ae_step(images: np.ndarray, encoder: Encoder, head: ReconstructionHead,
            optim: OptimState, lr: float) -> float:
    x = Tensor(images[:, None, :, :].astype(encoder.dtype))
    recon = head.forward(encoder.forward(x).grid)
    diff = ad.sub(recon, x)
    loss = ad.mean_all(ad.mul(diff, diff))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"ae loss is not finite: {value}")
    encoder.zero_grads()
    head.zero_grads()
    loss.backward()
    adam_update({**encoder.params(), **head.params()}, optim, lr)
    return value


class MultiLabelHead(ParamModule):
    """Sigmoid multi-label classifier over the pooled features."""

    def __init__(self, in_dim: int, n_labels: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self._add("mlc.w", rng, (in_dim, n_labels), in_dim, dtype)
        self._add_zeros("mlc.b", (n_labels,), dtype)

    def forward(self, pooled: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(pooled, self._params["mlc.w"]),
                           self._params["mlc.b"])


def mlc_step(images: np.ndarray, labels: np.ndarray, encoder: Encoder,
             head: MultiLabelHead, optim: OptimState, lr: float) -> float:
    x = Tensor(images[:, None, :, :].astype(encoder.dtype))
    logits = head.forward(encoder.forward(x).pooled)
    loss = ad.bce_with_logits(logits, labels.astype(encoder.dtype))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"mlc loss is not finite: {value}")
    encoder.zero_grads()
    head.zero_grads()
    loss.backward()
    adam_update({**encoder.params(), **head.params()}, optim, lr)
    return value


def tags_to_multihot(tags: list[tuple[str, ...]]) -> np.ndarray:
    out = np.zeros((len(tags), len(KEYWORDS)), dtype=np.float64)
    for i, row in enumerate(tags):
        for t in row:
            if t in KEYWORDS:
                out[i, KEYWORDS.index(t)] = 1.0
    return out


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class ContrastivePretrainer(BaseEstimator):
    """Encoder pretrainer with selectable method.

    ``method`` is one of scratch, ae, mlc, simclr, simclr_lungseg, moco.
    ``fit(X, y=None, masks=None)`` expects images shaped (n, H, W) in
    [0, 1]; ``mlc`` needs multi-hot labels in ``y`` (or tag tuples), the
    lung-seg variant needs ``masks``. The fitted encoder lands in
    ``encoder_`` and the per-step log in ``loss_log_`` as (epoch, step, lr,
    loss) tuples.
    """

    def __init__(self, method="simclr", epochs=8, batch_size=16,
                 lr_max=1e-3, lr_min=1e-5, weight_decay=DEFAULT_WEIGHT_DECAY,
                 temperature=0.5, mask_prob=None, crop_scale=(0.5, 1.0),
                 flip_prob=0.5, queue_size=1024, momentum=0.99,
                 projection_dim=32, seed=0):
        self.method = method
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.temperature = temperature
        self.mask_prob = mask_prob
        self.crop_scale = crop_scale
        self.flip_prob = flip_prob
        self.queue_size = queue_size
        self.momentum = momentum
        self.projection_dim = projection_dim
        self.seed = seed

    def _resolved_mask_prob(self) -> float:
        if self.mask_prob is not None:
            return float(self.mask_prob)
        return 0.5 if self.method == "simclr_lungseg" else 0.0

    def fit(self, X, y=None, masks=None):
        if self.method not in PRETRAIN_METHODS:
            raise InputError(
                f"method must be one of {PRETRAIN_METHODS}, got {self.method!r}")
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")
        X = check_image_batch(X)
        n, h, w = X.shape
        if h != w:
            raise InputError(f"images must be square, got {h}x{w}")
        root = np.random.SeedSequence(self.seed)
        init_ss, order_ss, aug_ss = root.spawn(3)
        init_rng = np.random.default_rng(init_ss)
        order_rng = np.random.default_rng(order_ss)
        aug_rng = np.random.default_rng(aug_ss)

        enc_cfg = EncoderConfig(in_size=h)
        proj_cfg = ProjectionConfig(in_dim=enc_cfg.feature_dim,
                                    hidden_dim=enc_cfg.feature_dim,
                                    out_dim=self.projection_dim)
        encoder = Encoder(enc_cfg, init_rng)
        projector = ProjectionHead(proj_cfg, init_rng)
        self.mask_prob_ = self._resolved_mask_prob()
        aug_cfg = AugmentConfig(crop_scale=tuple(self.crop_scale),
                                flip_prob=self.flip_prob,
                                mask_prob=self.mask_prob_,
                                out_size=(h, w))
        loss_cfg = LossConfig(temperature=self.temperature)
        optim = OptimState(lr_max=self.lr_max, lr_min=self.lr_min,
                           weight_decay=self.weight_decay)
        log: list[tuple[int, int, float, float]] = []

        if self.mask_prob_ > 0 and masks is None:
            raise InputError("lung-seg augmentation requires masks")
        if self.method == "mlc":
            if y is None:
                raise InputError("mlc pretraining requires labels in y")
            labels = y if isinstance(y, np.ndarray) else tags_to_multihot(y)
            if labels.shape[0] != n:
                raise InputError("label count does not match image count")
            head = MultiLabelHead(enc_cfg.feature_dim, labels.shape[1], init_rng)
        elif self.method == "ae":
            head = ReconstructionHead(enc_cfg, init_rng)
        elif self.method == "moco":
            moco = init_moco(encoder, projector, self.queue_size,
                             self.momentum, init_rng)

        batch = int(self.batch_size)
        steps_per_epoch = n // batch
        if self.method != "scratch" and steps_per_epoch == 0:
            raise InputError(
                f"batch_size {batch} exceeds dataset size {n}")
        total_steps = self.epochs * steps_per_epoch
        gstep = 0
        for epoch in range(self.epochs if self.method != "scratch" else 0):
            order = np.arange(n)
            order_rng.shuffle(order)
            for s in range(steps_per_epoch):
                idx = order[s * batch:(s + 1) * batch]
                imgs = X[idx]
                msks = None if masks is None else masks[idx]
                lr = cosine_lr(gstep, total_steps, self.lr_max, self.lr_min)
                if self.method in ("simclr", "simclr_lungseg"):
                    loss = simclr_step(imgs, msks, encoder, projector,
                                       aug_cfg, loss_cfg, optim, lr, aug_rng)
                elif self.method == "moco":
                    loss = moco_step(imgs, msks, encoder, projector, moco,
                                     aug_cfg, loss_cfg, optim, lr, aug_rng)
                elif self.method == "ae":
                    loss = ae_step(imgs, encoder, head, optim, lr)
                else:
                    loss = mlc_step(imgs, labels[idx], encoder, head, optim, lr)
                log.append((epoch, gstep, lr, loss))
                gstep += 1

        self.encoder_ = encoder
        self.projection_ = projector
        self.encoder_config_ = enc_cfg
        self.loss_log_ = log
        return self

    def save_encoder(self, path: str, extra: dict | None = None) -> None:
        config = {"kind": "encoder",
                  "encoder": self.encoder_config_.to_dict(),
                  "method": self.method, "seed": int(self.seed)}
        if extra:
            config.update(extra)
        save_checkpoint(path, config, self.encoder_.param_arrays())


def write_loss_log(path: str, log: list[tuple[int, int, float, float]]) -> None:
    """Newline-delimited epoch<TAB>step<TAB>lr<TAB>loss records."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for epoch, step, lr, loss in log:
            f.write(f"{epoch}\t{step}\t{lr:.10g}\t{loss:.10g}\n")

"""Small hand-differentiated CNN with a classifier head and an embedding head.

Layout (all float64; images are ``(H, W, C)`` arrays in [0, 1])::

    normalize -> conv3x3(w1)+ReLU -> conv3x3(w2)+ReLU -> avgpool 2x2
              -> dense(hidden)+ReLU -> { class logits | L2-normalized descriptor }

Convolutions are unpadded. The embedding head is trained jointly with the
classifier through a normalized softmax over per-class proxy vectors, so both
heads share the trunk and the hidden dense layer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# declaration order is also checkpoint order
LAYER_NAMES = (
    "conv1_w", "conv1_b", "conv2_w", "conv2_b",
    "fc_w", "fc_b", "cls_w", "cls_b", "emb_w", "emb_b", "proxies",
    "norm_mean", "norm_std",
)
TRUNK = ("conv1_w", "conv1_b", "conv2_w", "conv2_b")
HEAD = ("fc_w", "fc_b", "cls_w", "cls_b", "emb_w", "emb_b", "proxies")
TRAINABLE = TRUNK + HEAD

EMBED_SCALE = 16.0
_DEGENERATE_NORM = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A layer produced inf or nan. ``layer`` names it."""

    def __init__(self, layer: str):
        super().__init__(f"non-finite values produced by layer {layer!r}")
        self.layer = layer


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, params: "ModelParams"):
        super().__init__(f"training loss became non-finite; last stable epoch {epoch}")
        self.last_stable_epoch = epoch
        self.params = params


@dataclass
class ModelParams:
    arrays: dict[str, np.ndarray]
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        missing = [n for n in LAYER_NAMES if n not in self.arrays]
        if missing:
            raise ShapeError(f"missing layers: {missing}")
        self.arrays = {n: np.asarray(self.arrays[n], dtype=np.float64) for n in LAYER_NAMES}
        self.input_shape = tuple(int(s) for s in self.input_shape)
        check_shapes(self.arrays, self.input_shape)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def num_classes(self) -> int:
        return self.arrays["cls_w"].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.arrays["emb_w"].shape[1]

    @property
    def widths(self) -> tuple[int, int]:
        return self.arrays["conv1_w"].shape[3], self.arrays["conv2_w"].shape[3]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.input_shape)

    def same_as(self, other: "ModelParams", names=LAYER_NAMES) -> bool:
        return all(np.array_equal(self[n], other[n]) for n in names)


def _pooled_size(input_shape) -> tuple[int, int]:
    h, w, _ = input_shape
    return (h - 4) // 2, (w - 4) // 2


def check_shapes(arrays: dict[str, np.ndarray], input_shape) -> None:
    """Raise ShapeError unless every layer feeds the next and values are finite."""
    h, w, c = input_shape
    if c not in (1, 3):
        raise ShapeError(f"channels must be 1 or 3, got {c}")
    if h < 6 or w < 6 or (h - 4) % 2 or (w - 4) % 2:
        raise ShapeError(f"input {h}x{w} incompatible with two 3x3 convs and 2x2 pooling")
    f1 = arrays["conv1_w"].shape[-1]
    f2 = arrays["conv2_w"].shape[-1]
    ph, pw = _pooled_size(input_shape)
    hidden = arrays["fc_w"].shape[-1]
    k = arrays["cls_w"].shape[-1]
    d = arrays["emb_w"].shape[-1]
    expected = {
        "conv1_w": (3, 3, c, f1), "conv1_b": (f1,),
        "conv2_w": (3, 3, f1, f2), "conv2_b": (f2,),
        "fc_w": (ph * pw * f2, hidden), "fc_b": (hidden,),
        "cls_w": (hidden, k), "cls_b": (k,),
        "emb_w": (hidden, d), "emb_b": (d,),
        "proxies": (k, d),
        "norm_mean": (c,), "norm_std": (c,),
    }
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {arrays[name].shape}")
        if not np.all(np.isfinite(arrays[name])):
            raise ShapeError(f"{name}: non-finite values")
    if np.any(arrays["norm_std"] == 0):
        raise ShapeError("norm_std must be non-zero")


def default_norm(channels: int) -> tuple[np.ndarray, np.ndarray]:
    if channels == 3:
        return np.array(IMAGENET_MEAN), np.array(IMAGENET_STD)
    return np.array([np.mean(IMAGENET_MEAN)]), np.array([np.mean(IMAGENET_STD)])


def init_params(
    seed: int,
    input_shape=(32, 32, 3),
    num_classes: int = 10,
    widths=(8, 16),
    hidden: int = 64,
    embed_dim: int = 32,
) -> ModelParams:
    if not 1 <= embed_dim <= 512:
        raise ValueError("embed_dim must be in [1, 512]")
    rng = np.random.default_rng(seed)
    c = input_shape[2]
    f1, f2 = widths
    ph, pw = _pooled_size(input_shape)
    n_flat = ph * pw * f2

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    mean, std = default_norm(c)
    arrays = {
        "conv1_w": he((3, 3, c, f1), 9 * c),
        "conv1_b": np.zeros(f1),
        "conv2_w": he((3, 3, f1, f2), 9 * f1),
        "conv2_b": np.zeros(f2),
        "fc_w": he((n_flat, hidden), n_flat),
        "fc_b": np.zeros(hidden),
        "cls_w": rng.normal(0.0, 0.01, size=(hidden, num_classes)),
        "cls_b": np.zeros(num_classes),
        "emb_w": rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, embed_dim)),
        "emb_b": np.zeros(embed_dim),
        "proxies": rng.normal(size=(num_classes, embed_dim)),
        "norm_mean": mean,
        "norm_std": std,
    }
    return ModelParams(arrays, input_shape)


def zero_params(input_shape=(32, 32, 3), num_classes=10, widths=(8, 16), hidden=64, embed_dim=32):
    p = init_params(0, input_shape, num_classes, widths, hidden, embed_dim)
    for name in TRAINABLE:
        p.arrays[name][...] = 0.0
    return p


# ---------------------------------------------------------------- primitives


def _check(name: str, a: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(name)
    return a


def _conv_forward(x, w, b):
    bsz, h, wd, c = x.shape
    ho, wo = h - 2, wd - 2
    # (B, Ho, Wo, C, 3, 3) -> rows of C*9
    cols = sliding_window_view(x, (3, 3), axis=(1, 2)).reshape(bsz * ho * wo, c * 9)
    wmat = w.transpose(2, 0, 1, 3).reshape(c * 9, -1)
    out = cols @ wmat + b
    return out.reshape(bsz, ho, wo, -1), cols


def _conv_backward(x_shape, cols, w, dout, need_params=True, need_input=True):
    bsz, h, wd, c = x_shape
    ho, wo = h - 2, wd - 2
    f = w.shape[-1]
    dflat = dout.reshape(-1, f)
    dw = db = dx = None
    if need_params:
        dw = (cols.T @ dflat).reshape(c, 3, 3, f).transpose(1, 2, 0, 3)
        db = dflat.sum(axis=0)
    if need_input:
        wmat = w.transpose(2, 0, 1, 3).reshape(c * 9, f)
        dcols = (dflat @ wmat.T).reshape(bsz, ho, wo, c, 3, 3)
        dx = np.zeros(x_shape)
        for i in range(3):
            for j in range(3):
                dx[:, i:i + ho, j:j + wo, :] += dcols[..., i, j]
    return dw, db, dx


def _pool_forward(a):
    bsz, h, w, c = a.shape
    return a.reshape(bsz, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _pool_backward(dp):
    return np.repeat(np.repeat(dp, 2, axis=1), 2, axis=2) * 0.25


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _normalize_rows(z):
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    degenerate = norms[..., 0] < _DEGENERATE_NORM
    safe = np.where(norms < _DEGENERATE_NORM, 1.0, norms)
    e = z / safe
    if degenerate.any():
        canonical = np.zeros(z.shape[-1])
        canonical[0] = 1.0
        e[degenerate] = canonical
    return e, norms, degenerate


def _as_batch(params: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    batch = x[None] if single else x
    if batch.ndim != 4 or batch.shape[1:] != params.input_shape:
        got = x.shape if single else x.shape[1:] if x.ndim == 4 else x.shape
        raise ShapeError(f"expected input shape {params.input_shape}, got {got}")
    return batch, single


@dataclass
class _Cache:
    x_shape: tuple
    cols1: np.ndarray
    c1: np.ndarray
    a1: np.ndarray
    cols2: np.ndarray
    c2: np.ndarray
    pooled_shape: tuple
    flat: np.ndarray
    u: np.ndarray
    h: np.ndarray
    logits: np.ndarray | None = None
    z: np.ndarray | None = None
    e: np.ndarray | None = None
    znorm: np.ndarray | None = None
    degenerate: np.ndarray | None = None


def _forward(params: ModelParams, x: np.ndarray, classify=True, embed=True) -> _Cache:
    p = params.arrays
    z0 = _check("normalize", (x - p["norm_mean"]) / p["norm_std"])
    c1, cols1 = _conv_forward(z0, p["conv1_w"], p["conv1_b"])
    _check("conv1", c1)
    a1 = np.maximum(c1, 0.0)
    c2, cols2 = _conv_forward(a1, p["conv2_w"], p["conv2_b"])
    _check("conv2", c2)
    a2 = np.maximum(c2, 0.0)
    pooled = _pool_forward(a2)
    flat = pooled.reshape(len(x), -1)
    u = _check("fc", flat @ p["fc_w"] + p["fc_b"])
    h = np.maximum(u, 0.0)
    cache = _Cache(x.shape, cols1, c1, a1, cols2, c2, pooled.shape, flat, u, h)
    if classify:
        cache.logits = _check("cls", h @ p["cls_w"] + p["cls_b"])
    if embed:
        cache.z = _check("emb", h @ p["emb_w"] + p["emb_b"])
        cache.e, cache.znorm, cache.degenerate = _normalize_rows(cache.z)
    return cache


def _backward(params: ModelParams, cache: _Cache, dlogits=None, de=None,
              need_params=True, need_input=False):
    """Backpropagate head gradients; returns (param_grads, input_grad)."""
    p = params.arrays
    g: dict[str, np.ndarray] = {}
    dh = np.zeros_like(cache.h)
    if dlogits is not None:
        if need_params:
            g["cls_w"] = cache.h.T @ dlogits
            g["cls_b"] = dlogits.sum(axis=0)
        dh += dlogits @ p["cls_w"].T
    if de is not None:
        e = cache.e
        # d(z/|z|) = (I - e e^T) / |z|; degenerate rows carry no gradient
        dz = (de - e * np.sum(e * de, axis=1, keepdims=True)) / np.where(
            cache.degenerate[:, None], np.inf, cache.znorm)
        if need_params:
            g["emb_w"] = cache.h.T @ dz
            g["emb_b"] = dz.sum(axis=0)
        dh += dz @ p["emb_w"].T
    du = dh * (cache.u > 0)
    if need_params:
        g["fc_w"] = cache.flat.T @ du
        g["fc_b"] = du.sum(axis=0)
    dflat = du @ p["fc_w"].T
    da2 = _pool_backward(dflat.reshape(cache.pooled_shape))
    dc2 = da2 * (cache.c2 > 0)
    dw2, db2, da1 = _conv_backward(cache.a1.shape, cache.cols2, p["conv2_w"], dc2,
                                   need_params=need_params, need_input=True)
    dc1 = da1 * (cache.c1 > 0)
    dw1, db1, dz0 = _conv_backward(cache.x_shape, cache.cols1, p["conv1_w"], dc1,
                                   need_params=need_params, need_input=need_input)
    if need_params:
        g.update(conv1_w=dw1, conv1_b=db1, conv2_w=dw2, conv2_b=db2)
    dx = dz0 / p["norm_std"] if need_input else None
    return g, dx


# ---------------------------------------------------------------- public ops


def forward_classify(params: ModelParams, x) -> np.ndarray:
    """Class probabilities for one image ``(H, W, C)`` or a batch ``(B, H, W, C)``."""
    batch, single = _as_batch(params, x)
    probs = _softmax(_forward(params, batch, embed=False).logits)
    return probs[0] if single else probs


def forward_embed(params: ModelParams, x, return_flags: bool = False):
    """Unit-norm descriptors.

    A zero pre-normalization vector is replaced by the canonical basis vector
    ``e_0``; pass ``return_flags=True`` to also get the per-image boolean flags.
    """
    batch, single = _as_batch(params, x)
    cache = _forward(params, batch, classify=False)
    e, flags = cache.e, cache.degenerate
    if single:
        e, flags = e[0], bool(flags[0])
    return (e, flags) if return_flags else e


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward_classify(params, images[i:i + batch_size]).argmax(axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def embed_all(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward_embed(params, images[i:i + batch_size])
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.embed_dim))


@dataclass(frozen=True)
class LossSpec:
    """What the attack differentiates.

    ``kind="cross_entropy"`` takes an integer class label; ``kind="descriptor"``
    takes a target descriptor and measures squared L2 distance to it. Whether
    the loss is ascended or descended is decided by the attack's targeted flag.
    """

    kind: str
    target: object

    def __post_init__(self):
        if self.kind == "cross_entropy":
            if isinstance(self.target, (bool, np.bool_)) or not isinstance(self.target, (int, np.integer)):
                raise TypeError("cross_entropy loss needs an integer label target")
        elif self.kind == "descriptor":
            t = np.asarray(self.target, dtype=np.float64)
            if t.ndim != 1:
                raise TypeError("descriptor loss needs a 1-D descriptor target")
            object.__setattr__(self, "target", t)
        else:
            raise ValueError(f"unknown loss kind {self.kind!r}")

    @classmethod
    def cross_entropy(cls, label: int) -> "LossSpec":
        return cls("cross_entropy", int(label))

    @classmethod
    def descriptor(cls, target) -> "LossSpec":
        return cls("descriptor", np.asarray(target, dtype=np.float64))


def loss_and_input_gradient(params: ModelParams, x, loss: LossSpec):
    """Loss values and exact input gradients for one image or a batch."""
    batch, single = _as_batch(params, x)
    if loss.kind == "cross_entropy":
        if not 0 <= loss.target < params.num_classes:
            raise ValueError(f"label {loss.target} outside [0, {params.num_classes})")
        cache = _forward(params, batch, embed=False)
        logp = _log_softmax(cache.logits)
        values = -logp[:, loss.target]
        dlogits = np.exp(logp)
        dlogits[:, loss.target] -= 1.0
        _, dx = _backward(params, cache, dlogits=dlogits, need_params=False, need_input=True)
    else:
        if loss.target.shape != (params.embed_dim,):
            raise ShapeError(f"descriptor target must have length {params.embed_dim}")
        cache = _forward(params, batch, classify=False)
        diff = cache.e - loss.target
        values = np.sum(diff * diff, axis=1)
        _, dx = _backward(params, cache, de=2.0 * diff, need_params=False, need_input=True)
    _check("input_gradient", dx)
    if single:
        return float(values[0]), dx[0]
    return values, dx


def input_gradient(params: ModelParams, x, loss: LossSpec) -> np.ndarray:
    return loss_and_input_gradient(params, x, loss)[1]


def loss_value(params: ModelParams, x, loss: LossSpec):
    batch, single = _as_batch(params, x)
    if loss.kind == "cross_entropy":
        values = -_log_softmax(_forward(params, batch, embed=False).logits)[:, loss.target]
    else:
        e = _forward(params, batch, classify=False).e
        values = np.sum((e - loss.target) ** 2, axis=1)
    return float(values[0]) if single else values


class Network:
    """Attack-facing wrapper: anything with ``value_and_grad`` can be attacked."""

    def __init__(self, params: ModelParams):
        self.params = params

    @property
    def input_shape(self):
        return self.params.input_shape

    def value_and_grad(self, xs: np.ndarray, loss: LossSpec):
        return loss_and_input_gradient(self.params, xs, loss)

    def classify(self, x) -> np.ndarray:
        return forward_classify(self.params, x)

    def embed(self, x) -> np.ndarray:
        return forward_embed(self.params, x)


class LinearModel:
    """Surrogate with loss ``w . x`` regardless of the loss target."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def value_and_grad(self, xs: np.ndarray, loss=None):
        xs = np.asarray(xs, dtype=np.float64)
        if xs.shape == self.w.shape:
            return float(np.sum(self.w * xs)), self.w.copy()
        values = np.sum((xs * self.w).reshape(len(xs), -1), axis=1)
        return values, np.broadcast_to(self.w, xs.shape).copy()


# ---------------------------------------------------------------- training


def _training_loss(params: ModelParams, x, targets, embed_weight=1.0):
    """Mean of classifier CE and proxy-softmax CE. ``targets`` is (B, K) soft or one-hot."""
    p = params.arrays
    cache = _forward(params, x)
    bsz = len(x)
    logp = _log_softmax(cache.logits)
    loss = -np.sum(targets * logp) / bsz
    dlogits = (np.exp(logp) - targets) / bsz

    pnorm = np.linalg.norm(p["proxies"], axis=1, keepdims=True)
    phat = p["proxies"] / pnorm
    plogits = EMBED_SCALE * cache.e @ phat.T
    plogp = _log_softmax(plogits)
    loss += embed_weight * -np.sum(targets * plogp) / bsz
    dpl = embed_weight * (np.exp(plogp) - targets) / bsz
    de = EMBED_SCALE * dpl @ phat
    dphat = EMBED_SCALE * dpl.T @ cache.e
    dproxies = (dphat - phat * np.sum(dphat * phat, axis=1, keepdims=True)) / pnorm

    grads, _ = _backward(params, cache, dlogits=dlogits, de=de, need_params=True)
    grads["proxies"] = dproxies
    correct = int(np.sum(cache.logits.argmax(axis=1) == targets.argmax(axis=1)))
    return loss, grads, correct


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], names):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for n in names:
            g = grads[n]
            m = self.m[n] = b1 * self.m.get(n, 0.0) + (1 - b1) * g
            v = self.v[n] = b2 * self.v.get(n, 0.0) + (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            arrays[n] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 2e-3
    epochs: int = 4
    batch_size: int = 32
    seed: int = 0
    widths: tuple[int, int] = (8, 16)
    hidden: int = 64
    embed_dim: int = 32


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["loss"] if self.epochs else float("nan")


def one_hot(labels, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def fit(params: ModelParams, images: np.ndarray, targets: np.ndarray, *, epochs: int,
        lr: float, batch_size: int, rng: np.random.Generator, trainable=TRAINABLE,
        log_: TrainLog | None = None, on_epoch=None) -> tuple[ModelParams, TrainLog]:
    """Minibatch Adam over ``trainable`` layers. Other layers are never written."""
    params = params.copy()
    log_ = log_ if log_ is not None else TrainLog()
    opt = Adam(lr)
    n = len(images)
    stable = params.copy()
    for _ in range(epochs):
        epoch = len(log_.epochs)
        order = rng.permutation(n)
        total, correct = 0.0, 0
        try:
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                loss, grads, ok = _training_loss(params, images[idx], targets[idx])
                if not np.isfinite(loss):
                    raise NonFiniteError("loss")
                opt.step(params.arrays, grads, trainable)
                total += loss * len(idx)
                correct += ok
        except NonFiniteError:
            raise TrainingDiverged(epoch - 1, stable) from None
        if not all(np.all(np.isfinite(params[name])) for name in trainable):
            raise TrainingDiverged(epoch - 1, stable)
        record = {"epoch": epoch, "loss": total / n, "train_accuracy": correct / n,
                  "trainable": "all" if tuple(trainable) == TRAINABLE else "head"}
        log_.epochs.append(record)
        log.debug("epoch %d loss %.4f acc %.3f", epoch, record["loss"], record["train_accuracy"])
        if on_epoch is not None:
            on_epoch(epoch, params)
        stable = params.copy()
    return params, log_


def train_classifier(images: np.ndarray, labels: np.ndarray, hyper: TrainConfig | None = None,
                     num_classes: int | None = None) -> tuple[ModelParams, TrainLog]:
    """Train a fresh network on labeled images. Deterministic for a fixed seed."""
    hyper = hyper or TrainConfig()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty dataset")
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    params = init_params(hyper.seed, images.shape[1:], k, hyper.widths, hyper.hidden, hyper.embed_dim)
    rng = np.random.default_rng([hyper.seed, 1])
    return fit(params, images, one_hot(labels, k), epochs=hyper.epochs, lr=hyper.lr,
               batch_size=hyper.batch_size, rng=rng)


def accuracy(params: ModelParams, images, labels) -> float:
    return float(np.mean(predict(params, images) == np.asarray(labels)))


def relu_pattern(params: ModelParams, x) -> np.ndarray:
    """On/off state of every ReLU (for kink detection); one row per image for a batch."""
    batch, single = _as_batch(params, x)
    cache = _forward(params, batch, classify=False, embed=False)
    n = len(batch)
    pattern = np.concatenate([(cache.c1 > 0).reshape(n, -1), (cache.c2 > 0).reshape(n, -1),
                              (cache.u > 0).reshape(n, -1)], axis=1)
    return pattern[0] if single else pattern

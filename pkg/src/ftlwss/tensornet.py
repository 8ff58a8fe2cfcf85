"""Dense/convolutional network core for per-sub-band occupancy detection.

The detector maps an L x N x 2 feature tensor to L occupancy probabilities
through two valid (no-pad, stride-1) 3x3 convolutions, one hidden fully
connected layer and a sigmoid output layer; ReLU and dropout follow every
hidden layer. Training minimises the element-wise binary cross-entropy summed
over sub-bands and averaged over the samples in the batch, with plain SGD.

The parameter set splits into general-feature layers (both convolutions) and
domain-specific layers (both fully connected layers); `sgd_step` can restrict
updates to the domain-specific half, and an optional prune mask over the
hidden FC weight matrix is re-applied after every step so pruned weights stay
exactly zero.

Everything is plain numpy. Forward/backward are pure with respect to the
weights; all randomness (init, shuffling, dropout) flows through explicit
generators, so runs are bit-reproducible per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .codec import ByteReader, DecodeError, encode_tensor

CHECKPOINT_MAGIC = b"WSSN"
CHECKPOINT_VERSION = 1

PARAM_NAMES = (
    "conv1_w", "conv1_b", "conv2_w", "conv2_b",
    "fc1_w", "fc1_b", "out_w", "out_b",
)
GENERAL_FEATURE_PARAMS = PARAM_NAMES[:4]
DOMAIN_SPECIFIC_PARAMS = PARAM_NAMES[4:]

BCE_CLIP = 1e-7


@dataclass(frozen=True)
class DetectorSpec:
    """Architecture hyperparameters; the output width equals ``in_rows``
    (one probability per sub-band).
    """

    in_rows: int
    in_cols: int
    conv1_filters: int = 32
    conv2_filters: int = 16
    hidden_units: int = 128
    dropout_conv: float = 0.2
    dropout_fc: float = 0.5

    def __post_init__(self):
        if self.in_rows < 5 or self.in_cols < 5:
            raise ValueError("input must be at least 5x5 to survive two valid 3x3 convolutions")
        if min(self.conv1_filters, self.conv2_filters, self.hidden_units) < 1:
            raise ValueError("layer widths must be positive")
        for rate in (self.dropout_conv, self.dropout_fc):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")

    @property
    def conv1_shape(self) -> tuple[int, int, int]:
        return (self.in_rows - 2, self.in_cols - 2, self.conv1_filters)

    @property
    def conv2_shape(self) -> tuple[int, int, int]:
        return (self.in_rows - 4, self.in_cols - 4, self.conv2_filters)

    @property
    def flat_dim(self) -> int:
        r, c, f = self.conv2_shape
        return r * c * f

    @property
    def n_outputs(self) -> int:
        return self.in_rows

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv1_w": (3, 3, 2, self.conv1_filters),
            "conv1_b": (self.conv1_filters,),
            "conv2_w": (3, 3, self.conv1_filters, self.conv2_filters),
            "conv2_b": (self.conv2_filters,),
            "fc1_w": (self.flat_dim, self.hidden_units),
            "fc1_b": (self.hidden_units,),
            "out_w": (self.hidden_units, self.n_outputs),
            "out_b": (self.n_outputs,),
        }


@dataclass
class ModelWeights:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    prune_mask: np.ndarray | None = None  # True where fc1_w entries are kept

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelWeights":
        fields = {name: getattr(self, name).copy() for name in PARAM_NAMES}
        mask = None if self.prune_mask is None else self.prune_mask.copy()
        return ModelWeights(**fields, prune_mask=mask)

    def astype(self, dtype) -> "ModelWeights":
        fields = {name: getattr(self, name).astype(dtype) for name in PARAM_NAMES}
        mask = None if self.prune_mask is None else self.prune_mask.copy()
        return ModelWeights(**fields, prune_mask=mask)

    @property
    def dtype(self):
        return self.fc1_w.dtype


@dataclass
class Gradients:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def scaled(self, factor) -> "Gradients":
        return Gradients(**{n: factor * getattr(self, n) for n in PARAM_NAMES})

    def add_(self, other: "Gradients") -> "Gradients":
        for name in PARAM_NAMES:
            getattr(self, name).__iadd__(getattr(other, name))
        return self


def init_weights(spec: DetectorSpec, rng: np.random.Generator, dtype=np.float32) -> ModelWeights:
    """Fan-in-scaled uniform init (bound sqrt(6 / fan_in)) for weights, zeros
    for biases. Deterministic per generator state.
    """
    shapes = spec.param_shapes()
    fields = {}
    for name, shape in shapes.items():
        if name.endswith("_b"):
            fields[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[:-1]))
        bound = np.sqrt(6.0 / fan_in)
        fields[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelWeights(**fields)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, (H-2)*(W-2), 9*C) patches for a valid 3x3 conv."""
    windows = sliding_window_view(x, (3, 3), axis=(1, 2))
    b, ho, wo = windows.shape[:3]
    patches = windows.transpose(0, 1, 2, 4, 5, 3)  # (B, Ho, Wo, 3, 3, C)
    return np.ascontiguousarray(patches).reshape(b, ho * wo, -1)


def _col2im(dcols: np.ndarray, out_shape: tuple[int, ...]) -> np.ndarray:
    """Scatter-add (B, Ho*Wo, 9*C) patch gradients back to (B, H, W, C)."""
    b, h, w, c = out_shape
    ho, wo = h - 2, w - 2
    d = dcols.reshape(b, ho, wo, 3, 3, c)
    out = np.zeros(out_shape, dtype=dcols.dtype)
    for u in range(3):
        for v in range(3):
            out[:, u:u + ho, v:v + wo, :] += d[:, :, :, u, v, :]
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _dropout_mask(shape, rate: float, rng: np.random.Generator, dtype) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1-rate)."""
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / np.dtype(dtype).type(1.0 - rate)


@dataclass
class ForwardCache:
    x: np.ndarray
    cols1: np.ndarray
    z1: np.ndarray
    mask1: np.ndarray | None
    a1: np.ndarray          # conv1 activation, image layout, post-dropout
    cols2: np.ndarray
    z2: np.ndarray
    mask2: np.ndarray | None
    flat: np.ndarray
    z3: np.ndarray
    mask3: np.ndarray | None
    h3: np.ndarray
    probs: np.ndarray
    train: bool = False


def forward(
    spec: DetectorSpec,
    weights: ModelWeights,
    x: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout_masks: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
):
    """Run the network. Returns (probabilities, cache).

    ``x`` is one sample (L, N, 2) or a batch (B, L, N, 2). Eval mode is
    deterministic and dropout-free. Train mode draws inverted-dropout masks
    from ``rng`` unless explicit ``dropout_masks`` (already keep-scaled) are
    given, which the gradient checker uses to hold masks fixed.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (spec.in_rows, spec.in_cols, 2):
        raise ValueError(
            f"input must have shape (B, {spec.in_rows}, {spec.in_cols}, 2), got {x.shape}"
        )
    dtype = weights.dtype
    x = x.astype(dtype, copy=False)
    batch = x.shape[0]
    if train and rng is None and dropout_masks is None:
        raise ValueError("train mode needs an rng (or explicit dropout masks)")

    r1, c1, f1 = spec.conv1_shape
    r2, c2, f2 = spec.conv2_shape

    cols1 = _im2col(x)
    z1 = cols1 @ weights.conv1_w.reshape(-1, f1) + weights.conv1_b
    a1 = np.maximum(z1, 0)
    mask1 = mask2 = mask3 = None
    if train:
        if dropout_masks is not None:
            mask1, mask2, mask3 = dropout_masks
        else:
            mask1 = _dropout_mask(z1.shape, spec.dropout_conv, rng, dtype)
            mask2 = _dropout_mask((batch, r2 * c2, f2), spec.dropout_conv, rng, dtype)
            mask3 = _dropout_mask((batch, spec.hidden_units), spec.dropout_fc, rng, dtype)
        a1 = a1 * mask1
    a1_img = a1.reshape(batch, r1, c1, f1)

    cols2 = _im2col(a1_img)
    z2 = cols2 @ weights.conv2_w.reshape(-1, f2) + weights.conv2_b
    a2 = np.maximum(z2, 0)
    if train:
        a2 = a2 * mask2
    flat = a2.reshape(batch, -1)

    z3 = flat @ weights.fc1_w + weights.fc1_b
    h3 = np.maximum(z3, 0)
    if train:
        h3 = h3 * mask3

    z4 = h3 @ weights.out_w + weights.out_b
    probs = _sigmoid(z4)

    cache = ForwardCache(
        x=x, cols1=cols1, z1=z1, mask1=mask1, a1=a1_img,
        cols2=cols2, z2=z2, mask2=mask2, flat=flat, z3=z3,
        mask3=mask3, h3=h3, probs=probs, train=train,
    )
    return (probs[0] if single else probs), cache


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Binary cross-entropy summed over sub-bands, averaged over samples.

    Probabilities are clipped to [1e-7, 1 - 1e-7] so the value stays finite
    for saturated predictions. Note the per-sample value is a sum over the L
    outputs, not a mean.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {labels.shape}")
    p = np.clip(probs, BCE_CLIP, 1.0 - BCE_CLIP)
    per_sample = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)).sum(axis=1)
    return float(per_sample.mean())


def backward(spec: DetectorSpec, weights: ModelWeights, cache: ForwardCache, labels: np.ndarray) -> Gradients:
    """Exact gradient of `bce_loss(forward(...))` w.r.t. every parameter.

    Uses the fused sigmoid + cross-entropy form d/dz = (p - o) / batch and
    honours the dropout masks captured in the cache.
    """
    labels = np.atleast_2d(np.asarray(labels))
    probs = cache.probs
    if labels.shape != probs.shape:
        raise ValueError(f"labels shape {labels.shape} does not match predictions {probs.shape}")
    dtype = weights.dtype
    batch = probs.shape[0]
    r1, c1, f1 = spec.conv1_shape
    r2, c2, f2 = spec.conv2_shape

    dz4 = (probs - labels.astype(dtype)) / dtype.type(batch)
    g_out_w = cache.h3.T @ dz4
    g_out_b = dz4.sum(axis=0)

    dh3 = dz4 @ weights.out_w.T
    if cache.train:
        dh3 = dh3 * cache.mask3
    dz3 = dh3 * (cache.z3 > 0)
    g_fc1_w = cache.flat.T @ dz3
    g_fc1_b = dz3.sum(axis=0)

    dflat = dz3 @ weights.fc1_w.T
    da2 = dflat.reshape(batch, r2 * c2, f2)
    if cache.train:
        da2 = da2 * cache.mask2
    dz2 = da2 * (cache.z2 > 0)
    g_conv2_w = np.tensordot(cache.cols2, dz2, axes=([0, 1], [0, 1])).reshape(3, 3, f1, f2)
    g_conv2_b = dz2.sum(axis=(0, 1))

    dcols2 = dz2 @ weights.conv2_w.reshape(-1, f2).T
    da1 = _col2im(dcols2, cache.a1.shape).reshape(batch, r1 * c1, f1)
    if cache.train:
        da1 = da1 * cache.mask1
    dz1 = da1 * (cache.z1 > 0)
    g_conv1_w = np.tensordot(cache.cols1, dz1, axes=([0, 1], [0, 1])).reshape(3, 3, 2, f1)
    g_conv1_b = dz1.sum(axis=(0, 1))

    return Gradients(
        conv1_w=g_conv1_w, conv1_b=g_conv1_b,
        conv2_w=g_conv2_w, conv2_b=g_conv2_b,
        fc1_w=g_fc1_w, fc1_b=g_fc1_b,
        out_w=g_out_w, out_b=g_out_b,
    )


def sgd_step(weights: ModelWeights, grads: Gradients, lr: float, scope: str = "all") -> ModelWeights:
    """Plain gradient step theta <- theta - lr * g on the selected scope.

    ``scope="ds_only"`` leaves the convolutional (general-feature) parameters
    byte-identical. The prune mask, when present, is re-applied so masked
    hidden-FC weights stay exactly zero.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if scope not in ("all", "ds_only"):
        raise ValueError(f"unknown scope {scope!r}")
    names = PARAM_NAMES if scope == "all" else DOMAIN_SPECIFIC_PARAMS
    fields = {}
    for name in PARAM_NAMES:
        value = getattr(weights, name)
        if name in names:
            grad = getattr(grads, name)
            if value.shape != grad.shape:
                raise ValueError(f"gradient shape mismatch on {name}: {value.shape} vs {grad.shape}")
            fields[name] = value - value.dtype.type(lr) * grad
        else:
            fields[name] = value
    mask = weights.prune_mask
    if mask is not None:
        fields["fc1_w"] = np.where(mask, fields["fc1_w"], fields["fc1_w"].dtype.type(0))
        mask = mask.copy()
    return ModelWeights(**fields, prune_mask=mask)


def mask_gradients(grads: Gradients, prune_mask: np.ndarray | None) -> Gradients:
    """Zero the hidden-FC weight gradient at pruned positions."""
    if prune_mask is None:
        return grads
    grads.fc1_w = np.where(prune_mask, grads.fc1_w, grads.fc1_w.dtype.type(0))
    return grads


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyperparameters. The optional plateau decay multiplies the rate by
    ``lr_decay_factor`` whenever the validation loss has stalled for another
    ``lr_decay_stall`` epochs; the default (factor 1.0) keeps the rate
    constant.
    """

    lr: float = 0.1
    batch_size: int = 64
    max_epochs: int = 60
    patience: int = 5
    lr_decay_factor: float = 1.0
    lr_decay_stall: int = 8


@dataclass
class TrainResult:
    weights: ModelWeights
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0


def evaluate_loss(spec: DetectorSpec, weights: ModelWeights, features: np.ndarray,
                  labels: np.ndarray, chunk: int = 256) -> float:
    """Eval-mode BCE over a whole dataset, averaged over all samples."""
    n = features.shape[0]
    total = 0.0
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        probs, _ = forward(spec, weights, features[sl])
        total += bce_loss(probs, labels[sl]) * (sl.stop - sl.start)
    return total / n


def train_offline(
    spec: DetectorSpec,
    train_features: np.ndarray,
    train_labels: np.ndarray,
    val_features: np.ndarray,
    val_labels: np.ndarray,
    hyper: TrainConfig,
    rng: np.random.Generator,
    init: ModelWeights | None = None,
    enforce_mask: bool = False,
) -> TrainResult:
    """Mini-batch SGD with per-epoch shuffling and patience-based early
    stopping on the validation loss; returns the best-validation snapshot.

    Stops once the validation loss has failed to improve for more than
    ``patience`` consecutive epochs (patience 0 stops at the first
    non-improving epoch).
    """
    if train_features.shape[0] == 0 or val_features.shape[0] == 0:
        raise ValueError("training and validation splits must be non-empty")
    weights = init.copy() if init is not None else init_weights(spec, rng)
    n = train_features.shape[0]
    result = TrainResult(weights=weights.copy(), best_epoch=-1)
    # the starting point is a candidate too, so tuning never returns weights
    # worse (on validation) than it was given
    best_val = evaluate_loss(spec, weights, val_features, val_labels)
    stall = 0
    lr = hyper.lr
    for epoch in range(hyper.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            probs, cache = forward(spec, weights, train_features[idx], train=True, rng=rng)
            grads = backward(spec, weights, cache, train_labels[idx])
            if enforce_mask:
                grads = mask_gradients(grads, weights.prune_mask)
            weights = sgd_step(weights, grads, lr, scope="all")
            epoch_loss += bce_loss(probs, train_labels[idx]) * len(idx)
        result.train_losses.append(epoch_loss / n)
        val_loss = evaluate_loss(spec, weights, val_features, val_labels)
        result.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            result.weights = weights.copy()
            result.best_epoch = epoch
            stall = 0
        else:
            stall += 1
            if stall > hyper.patience:
                break
            if hyper.lr_decay_factor != 1.0 and stall % hyper.lr_decay_stall == 0:
                lr *= hyper.lr_decay_factor
    return result


def finite_difference_check(
    spec: DetectorSpec,
    weights: ModelWeights,
    x: np.ndarray,
    labels: np.ndarray,
    delta: float = 1e-5,
    indices: dict[str, np.ndarray] | None = None,
    dropout_masks: tuple | None = None,
) -> float:
    """Worst relative error between the analytic gradient and central finite
    differences over the selected parameter entries.

    ``indices`` maps parameter names to flat index arrays; by default every
    entry of every parameter is checked (tiny nets only). The step for entry
    theta_i is delta * max(1, |theta_i|). The error denominator is floored at
    1e-5 so near-zero gradient pairs that agree to ~1e-11 absolute do not
    register as large relative errors. When ``dropout_masks`` is given the
    same masks are used for the analytic pass and both sides of every
    difference, so the check is valid in train mode too.
    """
    train = dropout_masks is not None

    def loss_at() -> float:
        probs, _ = forward(spec, weights, x, train=train, dropout_masks=dropout_masks)
        return bce_loss(probs, labels)

    probs, cache = forward(spec, weights, x, train=train, dropout_masks=dropout_masks)
    analytic = backward(spec, weights, cache, labels)
    if indices is None:
        indices = {name: np.arange(getattr(weights, name).size) for name in PARAM_NAMES}

    worst = 0.0
    for name, idx in indices.items():
        arr = getattr(weights, name)
        grad = getattr(analytic, name).reshape(-1)
        flat = arr.reshape(-1)
        for i in np.asarray(idx, dtype=np.int64):
            orig = flat[i]
            step = delta * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            loss_plus = loss_at()
            flat[i] = orig - step
            loss_minus = loss_at()
            flat[i] = orig
            fd = (loss_plus - loss_minus) / (2.0 * step)
            ga = float(grad[i])
            rel = abs(fd - ga) / max(abs(fd), abs(ga), 1e-5)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint codec: magic "WSSN", version, spec header, eight float32 tensor
# sections, then a tagged prune-mask bitset section.
# ---------------------------------------------------------------------------

def checkpoint_bytes(spec: DetectorSpec, weights: ModelWeights) -> bytes:
    import struct

    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(struct.pack(
        "<5I2f",
        spec.in_rows, spec.in_cols, spec.conv1_filters, spec.conv2_filters,
        spec.hidden_units, spec.dropout_conv, spec.dropout_fc,
    ))
    for name in PARAM_NAMES:
        parts.append(encode_tensor(getattr(weights, name)))
    if weights.prune_mask is None:
        parts.append(struct.pack("<B", 0))
    else:
        bits = np.packbits(weights.prune_mask.astype(np.uint8).reshape(-1), bitorder="little")
        parts.append(struct.pack("<BQ", 1, weights.prune_mask.size))
        parts.append(bits.tobytes())
    return b"".join(parts)


def parse_checkpoint(data: bytes) -> tuple[DetectorSpec, ModelWeights]:
    reader = ByteReader(data)
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise DecodeError(f"bad checkpoint magic {magic!r}", 0)
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise DecodeError(f"unsupported checkpoint version {version}", 4)
    in_rows = reader.u32()
    in_cols = reader.u32()
    conv1 = reader.u32()
    conv2 = reader.u32()
    hidden = reader.u32()
    drop_conv = reader.f32()
    drop_fc = reader.f32()
    spec = DetectorSpec(
        in_rows=in_rows, in_cols=in_cols, conv1_filters=conv1,
        conv2_filters=conv2, hidden_units=hidden,
        dropout_conv=round(drop_conv, 6), dropout_fc=round(drop_fc, 6),
    )
    fields = {}
    expected = spec.param_shapes()
    for name in PARAM_NAMES:
        tensor = reader.tensor()
        if tensor.shape != expected[name]:
            raise DecodeError(
                f"tensor {name} has shape {tensor.shape}, spec implies {expected[name]}",
                reader.offset,
            )
        fields[name] = tensor
    tag = reader.u8()
    mask = None
    if tag == 1:
        nbits = reader.u64()
        if nbits != fields["fc1_w"].size:
            raise DecodeError(f"mask bit count {nbits} does not cover fc1_w", reader.offset)
        raw = reader.take((nbits + 7) // 8)
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=nbits, bitorder="little")
        mask = bits.astype(bool).reshape(fields["fc1_w"].shape)
    elif tag != 0:
        raise DecodeError(f"unknown mask section tag {tag}", reader.offset - 1)
    reader.expect_end()
    return spec, ModelWeights(**fields, prune_mask=mask)


def save_checkpoint(path, spec: DetectorSpec, weights: ModelWeights) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(spec, weights))


def load_checkpoint(path) -> tuple[DetectorSpec, ModelWeights]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())

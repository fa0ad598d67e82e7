"""Siamese convolutional embedder trained under a margin contrastive loss.

The network is a stack of (conv 3x3 -> rectifier -> 2x2 max-pool) blocks
followed by one fully-connected layer down to a low-dimensional embedding.
Same-class pairs are pulled together by their squared embedding distance;
different-class pairs are pushed apart by a hinge on the squared distance:

    loss = d2                     for a same-class pair
    loss = max(0, margin - d2)    for a different-class pair

with d2 the squared Euclidean distance between the two embeddings. All
gradients are derived by hand (reverse mode through im2col convolutions,
pool argmax routing, and the shared-weight twin branches) and verified
against central finite differences in the test suite.

Training arithmetic is float32; the finite-difference harness runs the same
code in float64 via EmbedderNet.astype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._binio import Reader, tensor_bytes, u32_bytes
from .errors import (
    DataError,
    ModelFileError,
    NotAModelFileError,
    NumericsError,
    ShapeError,
)
from .patches import LabeledPatch, augment, random_augment_spec
from .raster import BinaryLabel

NET_MAGIC = b"IP2CPNET"
NET_VERSION = 1
POOL = 2  # fixed 2x2 max-pool after every convolution


@dataclass(frozen=True)
class ArchConfig:
    """Structural hyperparameters of the embedder."""

    input_size: int = 64
    in_channels: int = 3
    conv_channels: tuple[int, ...] = (8, 16, 32)
    kernel_size: int = 3
    stride: int = 1
    padding: int | None = None  # None -> (kernel_size - 1) // 2

    def __post_init__(self):
        if self.padding is None:
            object.__setattr__(self, "padding", (self.kernel_size - 1) // 2)
        if not self.conv_channels:
            raise ValueError("need at least one convolution layer")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters for contrastive training."""

    margin: float = 2.0
    epochs: int = 50
    batch_pairs: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    embed_dim: int = 2

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_pairs < 1:
            raise ValueError(f"batch_pairs must be >= 1, got {self.batch_pairs}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")


@dataclass
class ConvLayer:
    weights: np.ndarray  # (out_ch, in_ch, k, k)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 1


@dataclass
class EmbedderNet:
    """Parameters of the embedding network plus its fixed geometry."""

    conv_layers: list[ConvLayer]
    fc_weights: np.ndarray  # (embed_dim, flat_dim)
    fc_bias: np.ndarray  # (embed_dim,)
    input_size: int
    in_channels: int

    def __post_init__(self):
        self.validate()

    @property
    def embed_dim(self) -> int:
        return self.fc_weights.shape[0]

    def parameters(self) -> list[np.ndarray]:
        """All trainable arrays in a fixed order (conv W, b pairs, then fc)."""
        out = []
        for layer in self.conv_layers:
            out.append(layer.weights)
            out.append(layer.bias)
        out.append(self.fc_weights)
        out.append(self.fc_bias)
        return out

    def validate(self) -> None:
        size = self.input_size
        channels = self.in_channels
        for i, layer in enumerate(self.conv_layers):
            out_ch, in_ch, kh, kw = layer.weights.shape
            if in_ch != channels or kh != kw:
                raise ShapeError(
                    f"conv layer {i}: kernel {layer.weights.shape} does not accept "
                    f"{channels} input channels"
                )
            if layer.bias.shape != (out_ch,):
                raise ShapeError(f"conv layer {i}: bias shape {layer.bias.shape}")
            size = (size + 2 * layer.padding - kh) // layer.stride + 1
            if size < POOL or size % POOL != 0:
                raise ShapeError(
                    f"conv layer {i}: spatial size {size} not divisible by the "
                    f"{POOL}x{POOL} pool"
                )
            size //= POOL
            channels = out_ch
        flat = channels * size * size
        if self.fc_weights.shape[1] != flat:
            raise ShapeError(
                f"fc expects {self.fc_weights.shape[1]} inputs but the conv stack "
                f"produces {flat}"
            )
        if self.fc_bias.shape != (self.fc_weights.shape[0],):
            raise ShapeError(f"fc bias shape {self.fc_bias.shape}")
        for arr in self.parameters():
            if not np.all(np.isfinite(arr)):
                raise DataError("non-finite network parameter")

    def astype(self, dtype) -> "EmbedderNet":
        layers = [
            ConvLayer(l.weights.astype(dtype), l.bias.astype(dtype), l.stride, l.padding)
            for l in self.conv_layers
        ]
        return EmbedderNet(
            layers,
            self.fc_weights.astype(dtype),
            self.fc_bias.astype(dtype),
            self.input_size,
            self.in_channels,
        )


@dataclass(frozen=True)
class Embedding:
    """A point in the learned low-dimensional space."""

    coords: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.coords, dtype=np.float64)
        if arr.ndim != 1:
            raise ShapeError(f"embedding must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("non-finite embedding")
        object.__setattr__(self, "coords", arr)


@dataclass
class TrainStats:
    epoch_losses: list[float]
    pair_counts: list[tuple[int, int]]  # (positive, negative) per epoch

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else math.nan

    def to_csv(self) -> str:
        lines = ["epoch,mean_loss,pos_pairs,neg_pairs"]
        for i, (loss, (pos, neg)) in enumerate(zip(self.epoch_losses, self.pair_counts)):
            lines.append(f"{i},{loss!r},{pos},{neg}")
        return "\n".join(lines) + "\n"


def init_net(
    cfg: TrainConfig,
    rng: np.random.Generator,
    arch: ArchConfig | None = None,
) -> EmbedderNet:
    """Fresh float32 network: uniform fan-in-scaled weights, zero biases.

    Each weight is drawn from U(-b, b) with b = sqrt(6 / fan_in); the draw
    order is fixed, so identical rng states give bit-identical nets.
    """
    arch = arch or ArchConfig()
    layers = []
    channels = arch.in_channels
    for out_ch in arch.conv_channels:
        fan_in = channels * arch.kernel_size * arch.kernel_size
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, (out_ch, channels, arch.kernel_size, arch.kernel_size))
        layers.append(
            ConvLayer(w.astype(np.float32), np.zeros(out_ch, dtype=np.float32),
                      arch.stride, arch.padding)
        )
        channels = out_ch
    size = arch.input_size
    for layer in layers:
        size = (size + 2 * layer.padding - arch.kernel_size) // layer.stride + 1
        size //= POOL
    flat = channels * size * size
    bound = math.sqrt(6.0 / flat)
    fc_w = rng.uniform(-bound, bound, (cfg.embed_dim, flat)).astype(np.float32)
    return EmbedderNet(layers, fc_w, np.zeros(cfg.embed_dim, dtype=np.float32),
                       arch.input_size, arch.in_channels)


# ---------------------------------------------------------------------------
# Forward / backward primitives (batch layout C, N, H, W)
# ---------------------------------------------------------------------------


def _conv_forward(x: np.ndarray, layer: ConvLayer):
    # Activations flow channel-first as (C, N, H, W): columns laid out
    # (C*k*k, N*OH*OW) make each conv one wide GEMM with free reshapes, and
    # the gather runs as k*k large strided slice copies.
    c, n, h, w = x.shape
    out_ch, _, k, _ = layer.weights.shape
    p, s = layer.padding, layer.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    cols6 = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols6[:, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    cols = cols6.reshape(c * k * k, n * oh * ow)
    out = layer.weights.reshape(out_ch, -1) @ cols
    out += layer.bias[:, None]
    return out.reshape(out_ch, n, oh, ow), cols, (h, w)


def _conv_backward(dout: np.ndarray, cols: np.ndarray, in_hw, layer: ConvLayer,
                   need_dx: bool = True):
    out_ch, n, oh, ow = dout.shape
    _, in_ch, k, _ = layer.weights.shape
    p, s = layer.padding, layer.stride
    h, w = in_hw
    db = dout.sum(axis=(1, 2, 3))
    dmat = dout.reshape(out_ch, -1)
    dw = (dmat @ cols.T).reshape(layer.weights.shape)
    if not need_dx:
        return None, dw, db
    dcols = layer.weights.reshape(out_ch, -1).T @ dmat
    dcols = dcols.reshape(in_ch, k, k, n, oh, ow)
    dxp = np.zeros((in_ch, n, h + 2 * p, w + 2 * p), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, i, j]
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return dx, dw, db


def _pool_windows(x: np.ndarray) -> list[np.ndarray]:
    """The POOL*POOL strided sub-grids of x, in row-major window order."""
    return [
        x[:, :, i::POOL, j::POOL] for i in range(POOL) for j in range(POOL)
    ]


def _pool_forward(x: np.ndarray):
    views = _pool_windows(x)
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    # first-max routing masks, deterministic in row-major window order
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for v in views:
        m = (v == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def _pool_backward(dout: np.ndarray, masks, in_shape):
    dx = np.zeros(in_shape, dtype=dout.dtype)
    for view, m in zip(_pool_windows(dx), masks):
        np.copyto(view, dout, where=m)
    return dx


def _forward_cached(net: EmbedderNet, x: np.ndarray):
    """Run the full stack on a (C, N, H, W) batch, keeping what backward needs.

    Flattening follows row-major (channel, row, col) order per sample, the
    order the persistence format and fc weights are defined in.
    """
    caches = []
    for layer in net.conv_layers:
        pre, cols, in_hw = _conv_forward(x, layer)
        act = np.maximum(pre, 0)
        pooled, masks = _pool_forward(act)
        caches.append((cols, in_hw, pre, masks))
        x = pooled
    n = x.shape[1]
    flat = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(n, -1)
    emb = flat @ net.fc_weights.T + net.fc_bias
    return emb, flat, caches


def _backward(net: EmbedderNet, demb: np.ndarray, flat: np.ndarray, caches):
    """Gradients of sum(demb * emb) w.r.t. every parameter, in parameters() order."""
    dfc_w = demb.T @ flat
    dfc_b = demb.sum(axis=0)
    dflat = demb @ net.fc_weights
    last_pre = caches[-1][2]
    c, n = last_pre.shape[0], last_pre.shape[1]
    dx = np.ascontiguousarray(
        dflat.reshape(n, c, last_pre.shape[2] // POOL, last_pre.shape[3] // POOL)
        .transpose(1, 0, 2, 3)
    )
    grads: list[np.ndarray] = []
    for depth, (layer, (cols, in_hw, pre, masks)) in enumerate(
        zip(reversed(net.conv_layers), reversed(caches))
    ):
        dact = _pool_backward(dx, masks, pre.shape)
        dpre = dact
        dpre *= pre > 0
        # the input gradient of the first conv layer feeds nothing
        dx, dw, db = _conv_backward(
            dpre, cols, in_hw, layer, need_dx=depth < len(net.conv_layers) - 1
        )
        grads.insert(0, db)
        grads.insert(0, dw)
    grads.append(dfc_w)
    grads.append(dfc_b)
    return grads


def _stack_batch(net: EmbedderNet, arrays) -> np.ndarray:
    """Stack (H, W, C) patch arrays into the internal (C, N, H, W) layout."""
    s, c = net.input_size, net.in_channels
    for pixels in arrays:
        if pixels.shape != (s, s, c):
            raise ShapeError(
                f"patch shape {pixels.shape} does not match network input ({s}, {s}, {c})"
            )
    batch = np.empty((c, len(arrays), s, s), dtype=net.fc_weights.dtype)
    for i, pixels in enumerate(arrays):
        batch[:, i] = pixels.transpose(2, 0, 1)
    return batch


def forward(net: EmbedderNet, pixels: np.ndarray) -> Embedding:
    """Embed one (s, s, 3) patch array."""
    emb, _, _ = _forward_cached(net, _stack_batch(net, [np.asarray(pixels)]))
    return Embedding(emb[0])


def embed_all(net: EmbedderNet, patches) -> list[Embedding]:
    """Elementwise forward over a patch sequence, order-preserving."""
    return [forward(net, p.pixels if isinstance(p, LabeledPatch) else p) for p in patches]


def embed_matrix(net: EmbedderNet, patches, chunk: int = 256) -> np.ndarray:
    """Batch embedding as an (n, embed_dim) float array (same order as input)."""
    if not patches:
        return np.zeros((0, net.embed_dim))
    rows = []
    arrays = [p.pixels if isinstance(p, LabeledPatch) else p for p in patches]
    for start in range(0, len(arrays), chunk):
        emb, _, _ = _forward_cached(net, _stack_batch(net, arrays[start:start + chunk]))
        rows.append(emb.astype(np.float64))
    return np.concatenate(rows, axis=0)


def contrastive_loss(e_i: Embedding, e_j: Embedding, same: bool, margin: float) -> float:
    """Pair loss on embeddings: d2 when same, hinge max(0, margin - d2) otherwise."""
    a, b = e_i.coords, e_j.coords
    if a.shape != b.shape:
        raise ShapeError(f"embedding dims differ: {a.shape} vs {b.shape}")
    if margin <= 0:
        raise ValueError(f"margin must be > 0, got {margin}")
    d2 = float(np.sum((a - b) ** 2))
    return d2 if same else max(0.0, margin - d2)


def _pair_loss_grads(net: EmbedderNet, a: np.ndarray, b: np.ndarray,
                     same: np.ndarray, margin: float):
    """Mean pair loss and its parameter gradients for stacked pair batches.

    a, b: (C, B, H, W) branch inputs; same: (B,) bool. Both branches run
    through one concatenated forward pass, so shared-weight gradients sum
    naturally in the single backward pass.
    """
    batch = a.shape[1]
    emb, flat, caches = _forward_cached(net, np.concatenate([a, b], axis=1))
    diff = emb[:batch] - emb[batch:]
    d2 = np.sum(diff * diff, axis=1)
    losses = np.where(same, d2, np.maximum(0.0, margin - d2))
    loss = float(losses.mean())
    # dL/d(diff): +2*diff for same pairs, -2*diff where the hinge is active
    # (d2 < margin), zero otherwise (subgradient 0 at the kink).
    sign = np.where(same, 1.0, np.where(d2 < margin, -1.0, 0.0)).astype(emb.dtype)
    ddiff = (2.0 / batch) * sign[:, None] * diff
    demb = np.concatenate([ddiff, -ddiff], axis=0)
    grads = _backward(net, demb, flat, caches)
    return loss, grads


def loss_and_grad(net: EmbedderNet, pair, margin: float):
    """Exact loss and parameter gradient for one (patch_a, patch_b, same) pair.

    The gradient list matches net.parameters() order and is the exact
    derivative of contrastive_loss(forward(a), forward(b), same, margin).
    """
    a_pixels, b_pixels, same = pair
    a = _stack_batch(net, [np.asarray(a_pixels)])
    b = _stack_batch(net, [np.asarray(b_pixels)])
    loss, grads = _pair_loss_grads(net, a, b, np.asarray([bool(same)]), margin)
    return loss, grads


def sample_pairs(patches, batch_pairs: int, rng: np.random.Generator):
    """Draw a half-positive, half-negative pair batch (with replacement).

    Positive pairs pick a class by fair coin and two members uniformly from
    it (possibly the same patch); negative pairs pick one member from each
    class. Odd batch sizes get the extra pair on the positive side.
    """
    by_class = {BinaryLabel.NO_DAMAGE: [], BinaryLabel.WITH_DAMAGE: []}
    for i, p in enumerate(patches):
        by_class[p.label].append(i)
    for cls, members in by_class.items():
        if not members:
            raise DataError(f"no patches with label {cls.text}")
    n_pos = (batch_pairs + 1) // 2
    pairs = []
    for _ in range(n_pos):
        members = by_class[
            BinaryLabel.NO_DAMAGE if rng.random() < 0.5 else BinaryLabel.WITH_DAMAGE
        ]
        i = members[int(rng.integers(len(members)))]
        j = members[int(rng.integers(len(members)))]
        pairs.append((i, j, True))
    nd = by_class[BinaryLabel.NO_DAMAGE]
    wd = by_class[BinaryLabel.WITH_DAMAGE]
    for _ in range(batch_pairs - n_pos):
        pairs.append((nd[int(rng.integers(len(nd)))], wd[int(rng.integers(len(wd)))], False))
    return pairs


def train(
    patches,
    cfg: TrainConfig,
    arch: ArchConfig | None = None,
    augment_online: bool = False,
) -> tuple[EmbedderNet, TrainStats]:
    """Momentum SGD on the mean pair loss; deterministic given cfg.seed.

    Each epoch runs ceil(len(patches) / batch_pairs) freshly sampled pair
    batches. With augment_online=True every sampled member passes through one
    random augmentation before embedding. Zero epochs returns the freshly
    initialized network unchanged.
    """
    if not patches:
        raise DataError("no patches to train on")
    if arch is None:
        first = patches[0]
        arch = ArchConfig(input_size=first.pixels.shape[0])
    rng = np.random.default_rng(cfg.seed)
    net = init_net(cfg, rng, arch)
    params = net.parameters()
    velocity = [np.zeros_like(p) for p in params]
    dtype = net.fc_weights.dtype
    batches = max(1, math.ceil(len(patches) / cfg.batch_pairs))
    stats = TrainStats([], [])
    for epoch in range(cfg.epochs):
        batch_losses = []
        pos = neg = 0
        for batch_no in range(batches):
            pairs = sample_pairs(patches, cfg.batch_pairs, rng)
            pos += sum(1 for _, _, s in pairs if s)
            neg += sum(1 for _, _, s in pairs if not s)
            sides = []
            for side in (0, 1):
                members = []
                for pair in pairs:
                    patch = patches[pair[side]]
                    if augment_online:
                        patch = augment(patch, random_augment_spec(rng), rng)
                    members.append(patch.pixels)
                sides.append(_stack_batch(net, members))
            same = np.asarray([s for _, _, s in pairs])
            loss, grads = _pair_loss_grads(net, sides[0], sides[1], same, cfg.margin)
            if not math.isfinite(loss):
                raise NumericsError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}"
                )
            for p, v, g in zip(params, velocity, grads):
                v *= dtype.type(cfg.momentum)
                v -= dtype.type(cfg.learning_rate) * g
                p += v
            batch_losses.append(loss)
        stats.epoch_losses.append(float(np.mean(batch_losses)))
        stats.pair_counts.append((pos, neg))
    return net, stats


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_net(net: EmbedderNet, path: str | Path) -> None:
    """Serialize to the versioned binary format (bit-exact for float32 nets).

    Layout: magic "IP2CPNET", version u32, embed_dim u32, layer count u32,
    input size u32, input channels u32, pool u32, then per conv layer
    stride u32, padding u32 and the kernel / bias tensors, then the
    fully-connected weight / bias tensors. Tensors are u32 dims followed by
    row-major little-endian float32 data.
    """
    parts = [
        NET_MAGIC,
        u32_bytes(NET_VERSION),
        u32_bytes(net.embed_dim),
        u32_bytes(len(net.conv_layers)),
        u32_bytes(net.input_size),
        u32_bytes(net.in_channels),
        u32_bytes(POOL),
    ]
    for layer in net.conv_layers:
        parts.append(u32_bytes(layer.stride))
        parts.append(u32_bytes(layer.padding))
        parts.append(tensor_bytes(layer.weights))
        parts.append(tensor_bytes(layer.bias))
    parts.append(tensor_bytes(net.fc_weights))
    parts.append(tensor_bytes(net.fc_bias))
    Path(path).write_bytes(b"".join(parts))


def load_net(path: str | Path) -> EmbedderNet:
    """Read a model file written by save_net, validating structure."""
    data = Path(path).read_bytes()
    reader = Reader(data, "model file")
    if reader.take(len(NET_MAGIC), "magic") != NET_MAGIC:
        raise NotAModelFileError(f"{path} is not a model file (bad magic)")
    version = reader.u32("version")
    if version != NET_VERSION:
        raise ModelFileError(f"{path}: unsupported model version {version}")
    embed_dim = reader.u32("embed_dim")
    layer_count = reader.u32("layer count")
    input_size = reader.u32("input size")
    in_channels = reader.u32("input channels")
    pool = reader.u32("pool")
    if pool != POOL:
        raise ModelFileError(f"{path}: unsupported pool size {pool}")
    layers = []
    for i in range(layer_count):
        stride = reader.u32(f"layer {i} stride")
        padding = reader.u32(f"layer {i} padding")
        w = reader.tensor(f"layer {i} weights")
        b = reader.tensor(f"layer {i} bias")
        if w.ndim != 4 or b.ndim != 1:
            raise ModelFileError(f"{path}: layer {i} tensor ranks {w.ndim}/{b.ndim}")
        layers.append(ConvLayer(w, b, stride, padding))
    fc_w = reader.tensor("fc weights")
    fc_b = reader.tensor("fc bias")
    reader.expect_end()
    if fc_w.ndim != 2 or fc_w.shape[0] != embed_dim:
        raise ModelFileError(
            f"{path}: fc weight shape {fc_w.shape} does not match embed_dim {embed_dim}"
        )
    try:
        return EmbedderNet(layers, fc_w, fc_b, input_size, in_channels)
    except (ShapeError, DataError) as exc:
        raise ModelFileError(f"{path}: inconsistent shapes: {exc}") from exc

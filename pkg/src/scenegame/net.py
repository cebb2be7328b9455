"""A small from-scratch convolutional network trained with a triplet margin
loss plus cross-entropy, combined as a strictly positive weighted sum.

Tensors are numpy float64 in (batch, height, width, channels) layout. Every
layer implements its own backward pass; grad_check compares the assembled
gradient against central finite differences.
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .image import Image

logger = logging.getLogger(__name__)

GRAD_CHECK_PARAM_LIMIT = 5000
CLASS_COUNT = 5
EMBEDDING_DIM = 32


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Triplet:
    """Anchor/positive/negative sample indices with the margin to enforce."""

    anchor: int
    positive: int
    negative: int
    margin: float = 0.5

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")


@dataclass(frozen=True)
class LossWeights:
    """Strictly positive coefficients of the combined objective."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("need at least one loss weight")
        if any(v <= 0 for v in vals):
            raise ValueError("every loss weight must be > 0")
        object.__setattr__(self, "values", vals)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class Conv2D:
    """Valid convolution, stride >= 1, no padding."""

    def __init__(self, kh, kw, cin, cout, stride=1, rng=None):
        self.kh, self.kw, self.cin, self.cout = kh, kw, cin, cout
        self.stride = stride
        if rng is None:
            self.weights = np.zeros((kh, kw, cin, cout))
        else:
            self.weights = _glorot(rng, (kh, kw, cin, cout),
                                   kh * kw * cin, kh * kw * cout)
        self.bias = np.zeros(cout)
        self._x = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.cin:
            raise ShapeMismatchError(
                f"conv expects (N,H,W,{self.cin}), got {x.shape}"
            )
        n, h, w, _ = x.shape
        s = self.stride
        oh = (h - self.kh) // s + 1
        ow = (w - self.kw) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(f"input {h}x{w} smaller than the kernel")
        out = np.broadcast_to(self.bias, (n, oh, ow, self.cout)).copy()
        for di in range(self.kh):
            for dj in range(self.kw):
                patch = x[:, di:di + s * oh:s, dj:dj + s * ow:s, :]
                out += patch @ self.weights[di, dj]
        self._x = x
        return out

    def backward(self, dout):
        x = self._x
        n, h, w, _ = x.shape
        s = self.stride
        oh, ow = dout.shape[1], dout.shape[2]
        self.d_weights = np.zeros_like(self.weights)
        self.d_bias = dout.sum(axis=(0, 1, 2))
        dx = np.zeros_like(x)
        for di in range(self.kh):
            for dj in range(self.kw):
                patch = x[:, di:di + s * oh:s, dj:dj + s * ow:s, :]
                self.d_weights[di, dj] = np.tensordot(
                    patch, dout, axes=([0, 1, 2], [0, 1, 2])
                )
                dx[:, di:di + s * oh:s, dj:dj + s * ow:s, :] += (
                    dout @ self.weights[di, dj].T
                )
        return dx


class MaxPool2D:
    def __init__(self, window=2, stride=2):
        self.window = window
        self.stride = stride
        self._winner = None

    def forward(self, x):
        k, s = self.window, self.stride
        n, h, w, c = x.shape
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        stacked = np.stack(
            [x[:, di:di + s * oh:s, dj:dj + s * ow:s, :]
             for di in range(k) for dj in range(k)],
            axis=0,
        )
        self._winner = stacked.argmax(axis=0)
        self._in_shape = x.shape
        return stacked.max(axis=0)

    def backward(self, dout):
        k, s = self.window, self.stride
        oh, ow = dout.shape[1], dout.shape[2]
        dx = np.zeros(self._in_shape)
        for o, (di, dj) in enumerate(
            (di, dj) for di in range(k) for dj in range(k)
        ):
            dx[:, di:di + s * oh:s, dj:dj + s * ow:s, :] += dout * (self._winner == o)
        return dx


class AvgPool2D:
    def __init__(self, window=2, stride=2):
        self.window = window
        self.stride = stride

    def forward(self, x):
        k, s = self.window, self.stride
        n, h, w, c = x.shape
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        out = np.zeros((n, oh, ow, c))
        for di in range(k):
            for dj in range(k):
                out += x[:, di:di + s * oh:s, dj:dj + s * ow:s, :]
        self._in_shape = x.shape
        return out / (k * k)

    def backward(self, dout):
        k, s = self.window, self.stride
        oh, ow = dout.shape[1], dout.shape[2]
        dx = np.zeros(self._in_shape)
        share = dout / (k * k)
        for di in range(k):
            for dj in range(k):
                dx[:, di:di + s * oh:s, dj:dj + s * ow:s, :] += share
        return dx


class ReLU:
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Flatten:
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense:
    def __init__(self, din, dout, rng=None):
        self.din, self.dout = din, dout
        if rng is None:
            self.weights = np.zeros((din, dout))
        else:
            self.weights = _glorot(rng, (din, dout), din, dout)
        self.bias = np.zeros(dout)
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.din:
            raise ShapeMismatchError(f"dense expects (N,{self.din}), got {x.shape}")
        self._x = x
        return x @ self.weights + self.bias

    def backward(self, dout):
        self.d_weights = self._x.T @ dout
        self.d_bias = dout.sum(axis=0)
        return dout @ self.weights.T


class Network:
    """Ordered layer stack; the input of the final layer is the embedding."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = layer.forward(x)
        scores = self.layers[-1].forward(x)
        return x, scores

    def backward(self, d_embedding, d_scores):
        d = self.layers[-1].backward(d_scores)
        if d_embedding is not None:
            d = d + d_embedding
        for layer in reversed(self.layers[:-1]):
            d = layer.backward(d)
        return d

    def trainable(self):
        return [layer for layer in self.layers if hasattr(layer, "weights")]

    def parameter_arrays(self):
        arrays = []
        for layer in self.trainable():
            arrays.append(layer.weights)
            arrays.append(layer.bias)
        return arrays

    def gradient_arrays(self):
        arrays = []
        for layer in self.trainable():
            arrays.append(layer.d_weights)
            arrays.append(layer.d_bias)
        return arrays

    def parameter_count(self):
        return sum(a.size for a in self.parameter_arrays())


def default_net(input_size: int = 20, seed: int = 0) -> Network:
    """conv(3x3x1x8)-relu-maxpool2 : conv(3x3x8x16)-relu-maxpool2 :
    flatten-fc(32)-relu-fc(5). The smallest stack exercising every layer kind.
    """
    rng = np.random.default_rng(int(seed) % 2 ** 63)
    side = input_size - 2
    side = (side - 2) // 2 + 1
    side = side - 2
    side = (side - 2) // 2 + 1
    if side < 1:
        raise ValueError(f"input size {input_size} is too small for the stack")
    flat = side * side * 16
    return Network([
        Conv2D(3, 3, 1, 8, rng=rng),
        ReLU(),
        MaxPool2D(2, 2),
        Conv2D(3, 3, 8, 16, rng=rng),
        ReLU(),
        MaxPool2D(2, 2),
        Flatten(),
        Dense(flat, EMBEDDING_DIM, rng=rng),
        ReLU(),
        Dense(EMBEDDING_DIM, CLASS_COUNT, rng=rng),
    ])


def _image_batch(images):
    planes = [img.plane().astype(np.float64) / 255.0 for img in images]
    return np.stack(planes)[:, :, :, None]


def forward(net: Network, img: Image):
    """Run one image through the stack: (embedding, class scores)."""
    emb, scores = net.forward(_image_batch([img]))
    return emb[0], scores[0]


def predict(net: Network, img: Image):
    """Class with the highest score (ties to the lowest index), plus scores."""
    _, scores = forward(net, img)
    return int(np.argmax(scores)), scores


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def triplet_loss(anchor, positive, negative, margin: float) -> float:
    """Hinge triplet loss with squared Euclidean distances:
    max(0, d(a,p) - d(a,n) + margin)."""
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    if not (a.shape == p.shape == n.shape):
        raise ValueError("embeddings must have equal dimensions")
    if margin <= 0:
        raise ValueError("margin must be > 0")
    d_ap = float(((a - p) ** 2).sum())
    d_an = float(((a - n) ** 2).sum())
    return max(0.0, d_ap - d_an + margin)


def triplet_batch_loss(embeddings, triplets):
    """Mean hinge triplet loss over a batch and its gradient wrt embeddings."""
    emb = np.asarray(embeddings, dtype=np.float64)
    grad = np.zeros_like(emb)
    if not triplets:
        return 0.0, grad
    total = 0.0
    for t in triplets:
        a, p, n = emb[t.anchor], emb[t.positive], emb[t.negative]
        hinge = ((a - p) ** 2).sum() - ((a - n) ** 2).sum() + t.margin
        if hinge > 0:
            total += hinge
            grad[t.anchor] += 2.0 * (n - p)
            grad[t.positive] += -2.0 * (a - p)
            grad[t.negative] += 2.0 * (a - n)
    count = len(triplets)
    return float(total) / count, grad / count


def softmax_cross_entropy(scores, labels):
    """Mean cross-entropy of softmax scores; returns (loss, d_scores)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = scores.shape[0]
    loss = float(-np.log(probs[np.arange(n), labels] + 1e-300).mean())
    d_scores = probs.copy()
    d_scores[np.arange(n), labels] -= 1.0
    return loss, d_scores / n


def combined_loss(weights: LossWeights, terms) -> float:
    """Weighted sum of loss terms; the weights are validated strictly positive."""
    terms = tuple(float(t) for t in terms)
    if len(terms) != len(weights.values):
        raise ValueError("weight and term counts must match")
    return float(sum(a * f for a, f in zip(weights.values, terms)))


# ---------------------------------------------------------------------------
# Triplet mining and augmentation
# ---------------------------------------------------------------------------

def mine_triplets(embeddings, labels, per_anchor: int = 1, seed: int = 0,
                  margin: float = 0.5, warn_skipped: bool = True):
    """Triplets per anchor: nearest same-class positive and nearest
    different-class negative first, then seeded random valid picks.

    Distance ties resolve to the lowest sample index. Anchors whose class has
    no second sample are skipped (and logged unless warn_skipped is off --
    the trainer disables it because in-batch singletons are routine).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise ValueError("need at least 2 classes to mine triplets")
    if per_anchor < 1:
        raise ValueError("per_anchor must be >= 1")
    rng = np.random.default_rng(int(seed) % 2 ** 63)
    diff2 = ((emb[:, None, :] - emb[None, :, :]) ** 2).sum(axis=2)
    n = emb.shape[0]
    triplets = []
    skipped = []
    for anchor in range(n):
        same = np.flatnonzero((labels == labels[anchor]) & (np.arange(n) != anchor))
        other = np.flatnonzero(labels != labels[anchor])
        if same.size == 0:
            skipped.append(anchor)
            continue
        pos = int(same[np.argmin(diff2[anchor, same])])
        neg = int(other[np.argmin(diff2[anchor, other])])
        triplets.append(Triplet(anchor, pos, neg, margin))
        for _ in range(per_anchor - 1):
            triplets.append(Triplet(
                anchor,
                int(same[rng.integers(same.size)]),
                int(other[rng.integers(other.size)]),
                margin,
            ))
    if skipped and warn_skipped:
        logger.warning("skipped %d anchors with singleton classes: %s",
                       len(skipped), skipped)
    return triplets


def augment(img: Image, crop) -> list:
    """Five exact sub-images: the four corner crops plus the centered crop,
    in (TL, TR, BL, BR, C) order. The center offset floors odd differences."""
    if isinstance(crop, int):
        ch = cw = crop
    else:
        ch, cw = crop
    if ch < 1 or cw < 1:
        raise ValueError("crop must be positive")
    h, w = img.height, img.width
    if ch > h or cw > w:
        raise ValueError(f"crop {cw}x{ch} exceeds image {w}x{h}")
    cy = (h - ch) // 2
    cx = (w - cw) // 2
    px = img.pixels
    corners = [(0, 0), (0, w - cw), (h - ch, 0), (h - ch, w - cw), (cy, cx)]
    return [Image(px[r:r + ch, c:c + cw]) for r, c in corners]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0
    augment: bool = False
    crop_size: int = None  # required when augment is set
    per_anchor: int = 1
    margin: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.augment and self.crop_size is None:
            raise ValueError("augment requires crop_size")


def train(net: Network, images, labels, config: TrainConfig,
          weights: LossWeights):
    """Plain SGD on the combined triplet + cross-entropy objective.

    Deterministic for a fixed seed. Returns (net, per-epoch mean loss trace);
    the network is updated in place. Batches that happen to hold a single
    class contribute a zero triplet term for that step.
    """
    images = list(images)
    labels = list(int(v) for v in labels)
    if not images:
        raise ValueError("dataset is empty")
    if len(images) != len(labels):
        raise ValueError("images and labels must align")
    if len(weights.values) != 2:
        raise ValueError("training uses two loss terms (triplet, cross-entropy)")
    class_count = net.layers[-1].dout
    missing = set(range(class_count)) - set(labels)
    if missing:
        raise ValueError(f"dataset is missing classes {sorted(missing)}")
    if config.augment:
        expanded_images = []
        expanded_labels = []
        for img, lbl in zip(images, labels):
            for crop in augment(img, config.crop_size):
                expanded_images.append(crop)
                expanded_labels.append(lbl)
        images, labels = expanded_images, expanded_labels

    x_all = _image_batch(images)
    y_all = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(int(config.seed) % 2 ** 63)
    trace = []
    for _ in range(config.epochs):
        order = rng.permutation(len(images))
        epoch_loss = 0.0
        batch_count = 0
        for start in range(0, len(images), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            emb, scores = net.forward(xb)
            ce, d_scores = softmax_cross_entropy(scores, yb)
            if np.unique(yb).size >= 2:
                triplets = mine_triplets(
                    emb, yb, per_anchor=config.per_anchor,
                    seed=int(rng.integers(2 ** 32)), margin=config.margin,
                    warn_skipped=False,
                )
                trip, d_emb = triplet_batch_loss(emb, triplets)
            else:
                trip, d_emb = 0.0, np.zeros_like(emb)
            a_trip, a_ce = weights.values
            epoch_loss += combined_loss(weights, (trip, ce))
            batch_count += 1
            net.backward(a_trip * d_emb, a_ce * d_scores)
            if config.learning_rate:
                for layer in net.trainable():
                    layer.weights -= config.learning_rate * layer.d_weights
                    layer.bias -= config.learning_rate * layer.d_bias
        trace.append(epoch_loss / batch_count)
    return net, trace


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def grad_check(net: Network, images, labels, weights: LossWeights,
               margin: float = 0.5, samples: int = 50, step: float = 1e-4,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients
    over sampled parameters. The triplet set is mined once and frozen so the
    loss stays smooth at the evaluation point."""
    if net.parameter_count() > GRAD_CHECK_PARAM_LIMIT:
        raise ValueError(
            f"net has {net.parameter_count()} parameters; grad_check "
            f"allows at most {GRAD_CHECK_PARAM_LIMIT}"
        )
    x = _image_batch(images)
    y = np.asarray(labels, dtype=np.int64)
    emb0, _ = net.forward(x)
    triplets = mine_triplets(emb0, y, per_anchor=1, seed=seed, margin=margin)

    def total_loss():
        emb, scores = net.forward(x)
        ce, _ = softmax_cross_entropy(scores, y)
        trip, _ = triplet_batch_loss(emb, triplets)
        return combined_loss(weights, (trip, ce))

    emb, scores = net.forward(x)
    ce, d_scores = softmax_cross_entropy(scores, y)
    trip, d_emb = triplet_batch_loss(emb, triplets)
    a_trip, a_ce = weights.values
    net.backward(a_trip * d_emb, a_ce * d_scores)
    params = net.parameter_arrays()
    grads = [g.copy() for g in net.gradient_arrays()]

    sizes = [p.size for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(int(seed) % 2 ** 63)
    picks = rng.choice(total, size=min(samples, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    max_rel = 0.0
    for flat_index in picks:
        which = int(np.searchsorted(offsets, flat_index, side="right")) - 1
        local = int(flat_index - offsets[which])
        arr = params[which]
        original = arr.flat[local]
        arr.flat[local] = original + step
        plus = total_loss()
        arr.flat[local] = original - step
        minus = total_loss()
        arr.flat[local] = original
        numeric = (plus - minus) / (2.0 * step)
        analytic = grads[which].flat[local]
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------
# magic "SGNET001" | u32 layer count | per layer: u8 kind + u32 fields
# (conv: kh kw cin cout stride; pool: window stride; dense: din dout) |
# parameter tensors per trainable layer, weights then bias, raw little-endian
# float64 in table order.

CHECKPOINT_MAGIC = b"SGNET001"
_KIND_CODES = {Conv2D: 1, MaxPool2D: 2, AvgPool2D: 3, ReLU: 4, Flatten: 5, Dense: 6}


def save_net(net: Network, path):
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += struct.pack("<I", len(net.layers))
    for layer in net.layers:
        kind = _KIND_CODES[type(layer)]
        blob += struct.pack("<B", kind)
        if isinstance(layer, Conv2D):
            blob += struct.pack("<5I", layer.kh, layer.kw, layer.cin,
                                layer.cout, layer.stride)
        elif isinstance(layer, (MaxPool2D, AvgPool2D)):
            blob += struct.pack("<2I", layer.window, layer.stride)
        elif isinstance(layer, Dense):
            blob += struct.pack("<2I", layer.din, layer.dout)
    for layer in net.trainable():
        blob += layer.weights.astype("<f8").tobytes()
        blob += layer.bias.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_net(path) -> Network:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    pos = 8
    (layer_count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    layers = []
    for _ in range(layer_count):
        (kind,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        if kind == 1:
            kh, kw, cin, cout, stride = struct.unpack_from("<5I", blob, pos)
            pos += 20
            layers.append(Conv2D(kh, kw, cin, cout, stride))
        elif kind in (2, 3):
            window, stride = struct.unpack_from("<2I", blob, pos)
            pos += 8
            layers.append((MaxPool2D if kind == 2 else AvgPool2D)(window, stride))
        elif kind == 4:
            layers.append(ReLU())
        elif kind == 5:
            layers.append(Flatten())
        elif kind == 6:
            din, dout = struct.unpack_from("<2I", blob, pos)
            pos += 8
            layers.append(Dense(din, dout))
        else:
            raise ValueError(f"unknown layer kind {kind}")
    net = Network(layers)
    for layer in net.trainable():
        for name in ("weights", "bias"):
            arr = getattr(layer, name)
            nbytes = arr.size * 8
            data = np.frombuffer(blob[pos:pos + nbytes], dtype="<f8")
            if data.size != arr.size:
                raise ValueError("checkpoint truncated")
            setattr(layer, name, data.reshape(arr.shape).copy())
            pos += nbytes
    if pos != len(blob):
        raise ValueError("checkpoint has trailing data")
    return net

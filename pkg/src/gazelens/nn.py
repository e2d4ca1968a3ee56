"""A small convolutional network with hand-written backpropagation.

Layers work on NCHW arrays. ``Network.forward`` returns the output together
with a list of per-layer caches; ``Network.backward`` consumes those caches
and returns gradients keyed like ``Network.params``. Training is plain SGD
with momentum on binary cross-entropy.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    EmptyDataset,
    HeaderMismatch,
    MissingCache,
    NanLoss,
    NonFiniteActivation,
    ShapeMismatch,
    SingleClassInput,
    StorageError,
)

DTYPES = {"f32": np.float32, "f64": np.float64}
PROB_CLIP = 1e-7


class Layer:
    """Base layer: no parameters, identity."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None):
        return x, None

    def backward(self, cache, dy: np.ndarray):
        """Return (grad wrt input, {param name: grad})."""
        return dy, {}

    def __repr__(self):
        return type(self).__name__ + "()"


class Conv2d(Layer):
    """Stride-1 convolution with zero padding, via im2col and batched matmul."""

    def __init__(self, in_ch: int, out_ch: int, k: int = 3, pad: int = 1, dtype=np.float32,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.in_ch, self.out_ch, self.k, self.pad = in_ch, out_ch, k, pad
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * k * k
        self.params["weight"] = (rng.standard_normal((out_ch, in_ch, k, k)) * math.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=dtype)

    def _cols(self, x):
        n, c, h, w = x.shape
        k, p = self.k, self.pad
        ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
        return cols.reshape(n, c * k * k, ho * wo), ho, wo

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeMismatch(f"Conv2d expects (N, {self.in_ch}, H, W), got {x.shape}")
        cols, ho, wo = self._cols(x)
        wm = self.params["weight"].reshape(self.out_ch, -1)
        y = np.matmul(wm, cols)
        y += self.params["bias"][None, :, None]
        return y.reshape(x.shape[0], self.out_ch, ho, wo), (cols, x.shape, ho, wo)

    def backward(self, cache, dy):
        cols, xshape, ho, wo = cache
        n, c, h, w = xshape
        k, p = self.k, self.pad
        d = dy.reshape(n, self.out_ch, ho * wo)
        db = d.sum(axis=(0, 2))
        dw = np.matmul(d, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.params["weight"].shape)
        wm = self.params["weight"].reshape(self.out_ch, -1)
        dcols = np.matmul(wm.T, d).reshape(n, c, k, k, ho, wo)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, {"weight": dw, "bias": db}

    def __repr__(self):
        return f"Conv2d({self.in_ch}, {self.out_ch}, k={self.k}, pad={self.pad})"


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, dy):
        return dy * cache, {}


class MaxPool2d(Layer):
    """Non-overlapping 2x2 max pooling. Ties route gradient to the first maximum."""

    def forward(self, x, train=False, rng=None):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"MaxPool2d needs even H and W, got {h}x{w}")
        xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, cache, dy):
        idx, (n, c, h, w) = cache
        dxr = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
        dx = dxr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return dx, {}


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy):
        return dy.reshape(cache), {}


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, dtype=np.float32, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = (rng.standard_normal((n_in, n_out)) * math.sqrt(2.0 / n_in)).astype(dtype)
        self.params["bias"] = np.zeros(n_out, dtype=dtype)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeMismatch(f"Dense expects (N, {self.n_in}), got {x.shape}")
        return x @ self.params["weight"] + self.params["bias"], x

    def backward(self, cache, dy):
        x = cache
        return dy @ self.params["weight"].T, {"weight": x.T @ dy, "bias": dy.sum(axis=0)}

    def __repr__(self):
        return f"Dense({self.n_in}, {self.n_out})"


class Dropout(Layer):
    """Inverted dropout: active only in training, expected activation preserved."""

    def __init__(self, p: float = 0.2):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0:
            return x, None
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= self.p).astype(x.dtype) / x.dtype.type(1 - self.p)
        return x * mask, mask

    def backward(self, cache, dy):
        return (dy if cache is None else dy * cache), {}

    def __repr__(self):
        return f"Dropout(p={self.p})"


class Sigmoid(Layer):
    def forward(self, x, train=False, rng=None):
        y = np.exp(-np.logaddexp(0, -x)).astype(x.dtype)
        return y, y

    def backward(self, cache, dy):
        return dy * cache * (1 - cache), {}


@dataclass
class ForwardCache:
    caches: list
    shapes: list  # input shape of each layer


class Network:
    """A sequence of layers with flat parameter naming ``"<layer index>.<name>"``."""

    def __init__(self, layers: Sequence[Layer], dtype=np.float32):
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.trained = False
        self.spec = None

    @property
    def precision(self) -> str:
        return "f64" if self.dtype == np.float64 else "f32"

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out[f"{i}.{name}"] = arr
        return out

    def forward(self, x: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None,
                stop: Optional[int] = None):
        """Run layers ``[0, stop)`` (all by default). Returns (output, ForwardCache)."""
        x = np.asarray(x, dtype=self.dtype)
        caches, shapes = [], []
        for i, layer in enumerate(self.layers[:stop]):
            shapes.append(x.shape)
            x, c = layer.forward(x, train=train, rng=rng)
            caches.append(c)
            if not np.all(np.isfinite(x)):
                raise NonFiniteActivation(f"non-finite output from layer {i} ({layer!r})")
        return x, ForwardCache(caches, shapes)

    def backward(self, cache: Optional[ForwardCache], grad_out: np.ndarray, start: int = 0):
        """Backpropagate through the cached layers down to layer ``start``.

        Returns (grad wrt the input of layer ``start``, {param name: grad}).
        """
        if cache is None or not isinstance(cache, ForwardCache):
            raise MissingCache("backward needs the cache from a matching forward call")
        end = len(cache.caches)
        grads = {}
        d = np.asarray(grad_out, dtype=self.dtype)
        for i in range(end - 1, start - 1, -1):
            d, g = self.layers[i].backward(cache.caches[i], d)
            for name, arr in g.items():
                grads[f"{i}.{name}"] = arr
        return d, grads

    def predict_proba(self, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        for a in range(0, len(X), batch_size):
            p, _ = self.forward(X[a:a + batch_size], train=False)
            out.append(p.reshape(-1))
        return np.concatenate(out) if out else np.empty(0, dtype=self.dtype)


@dataclass(frozen=True)
class MiniVggSpec:
    """VGG-style trunk (3x3 convs, 2x2 pools) topped by the 256-ReLU-dropout-1-sigmoid head."""

    height: int = 96
    width: int = 96
    in_channels: int = 3
    blocks: tuple = ((16, 16), (32, 32), (64, 64))
    hidden: int = 256
    dropout: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(b) for b in self.blocks))
        f = 2 ** len(self.blocks)
        if self.height % f or self.width % f:
            raise ShapeMismatch(f"input {self.height}x{self.width} not divisible by {f}")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        f = 2 ** len(self.blocks)
        return self.blocks[-1][-1], self.height // f, self.width // f


def build_minivgg(spec: MiniVggSpec = MiniVggSpec(), precision: str = "f32", seed: int = 0) -> Network:
    """He-initialized MiniVgg; ``net.block_ends`` holds the index of each block's pool layer."""
    dtype = DTYPES[precision]
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    block_ends = []
    c = spec.in_channels
    for block in spec.blocks:
        for out_c in block:
            layers += [Conv2d(c, out_c, 3, 1, dtype, rng), ReLU()]
            c = out_c
        layers.append(MaxPool2d())
        block_ends.append(len(layers) - 1)
    fc, fh, fw = spec.feature_shape
    layers += [Flatten(), Dense(fc * fh * fw, spec.hidden, dtype, rng), ReLU(), Dropout(spec.dropout),
               Dense(spec.hidden, 1, dtype, rng), Sigmoid()]
    net = Network(layers, dtype)
    net.spec = spec
    net.block_ends = block_ends
    return net


def forward(model: Network, batch: np.ndarray, train_mode: bool = False,
            rng: Optional[np.random.Generator] = None):
    """Probabilities of shape (N, 1) plus the caches for :func:`backward`."""
    if model.spec is not None:
        s = model.spec
        if batch.ndim != 4 or tuple(batch.shape[1:]) != (s.in_channels, s.height, s.width):
            raise ShapeMismatch(f"expected (N, {s.in_channels}, {s.height}, {s.width}), got {batch.shape}")
    return model.forward(batch, train=train_mode, rng=rng)


def backward(model: Network, cached: ForwardCache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    return model.backward(cached, grad_out)[1]


def bce_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient wrt ``p`` (clipped to [1e-7, 1-1e-7])."""
    p = np.asarray(p)
    dt = p.dtype if np.issubdtype(p.dtype, np.floating) else np.float64
    y = np.asarray(y, dtype=dt).reshape(p.shape)
    pc = np.clip(p, PROB_CLIP, 1 - PROB_CLIP).astype(dt)
    n = pc.size
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    grad = (-(y / pc) + (1 - y) / (1 - pc)) / n
    return float(loss), grad.astype(dt)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 16
    momentum: float = 0.9
    learning_rate: float = 0.01
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: Optional[float] = None
    val_acc: Optional[float] = None


def evaluate_loss(model: Network, X: np.ndarray, y: np.ndarray, batch_size: int = 64) -> tuple[float, float]:
    p = model.predict_proba(X, batch_size)
    loss, _ = bce_loss(p, y)
    acc = float(np.mean((p >= 0.5) == (np.asarray(y) == 1)))
    return loss, acc


def train(model: Network, dataset, cfg: TrainConfig = TrainConfig(), val=None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> tuple[Network, list[EpochLog]]:
    """SGD with momentum (v <- mu*v - lr*g; theta <- theta + v), in place.

    ``dataset`` and ``val`` are (X, y) pairs with X shaped (N, C, H, W) and
    y in {0, 1}. Shuffling and dropout are both seeded from ``cfg.seed``.
    """
    X, y = dataset
    X = np.asarray(X, dtype=model.dtype)
    y = np.asarray(y).reshape(-1).astype(np.int64)
    if len(X) == 0:
        raise EmptyDataset("no training images")
    if len(np.unique(y)) < 2:
        raise SingleClassInput("training set holds a single class")
    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    lr = model.dtype.type(cfg.learning_rate)
    mu = model.dtype.type(cfg.momentum)
    params = model.params
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    log: list[EpochLog] = []
    n = len(X)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        tot_loss = 0.0
        correct = 0
        for a in range(0, n, cfg.batch_size):
            idx = order[a:a + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            p, cache = model.forward(xb, train=True, rng=dropout_rng)
            loss, g = bce_loss(p, yb)
            if not math.isfinite(loss):
                raise NanLoss(f"non-finite loss at epoch {epoch}, batch starting {a}: "
                              f"p range [{np.nanmin(p)}, {np.nanmax(p)}]")
            _, grads = model.backward(cache, g)
            for k, param in params.items():
                v = velocity[k]
                v *= mu
                v -= lr * grads[k]
                param += v
            tot_loss += loss * len(idx)
            correct += int(np.sum((p.reshape(-1) >= 0.5) == (yb == 1)))
        entry = EpochLog(epoch, tot_loss / n, correct / n)
        if val is not None and len(val[0]):
            entry.val_loss, entry.val_acc = evaluate_loss(model, np.asarray(val[0], dtype=model.dtype), val[1])
        log.append(entry)
        if on_epoch:
            on_epoch(entry)
    model.trained = True
    return model, log


def write_training_log(path, log: Sequence[EpochLog]) -> None:
    lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
    for e in log:
        vals = [e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc]
        lines.append(",".join("" if v is None else repr(v) for v in vals))
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write training log {path}: {e}") from e


CKPT_MAGIC = b"GZLCKPT1"


def save_checkpoint(model: Network, path) -> None:
    """Magic, u64 header length, JSON header, then little-endian tensors in header order."""
    if model.spec is None:
        raise HeaderMismatch("only MiniVgg networks carry a spec to checkpoint")
    params = model.params
    header = {
        "spec": asdict(model.spec),
        "precision": model.precision,
        "trained": model.trained,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    hb = json.dumps(header).encode("utf-8")
    le = "<f4" if model.precision == "f32" else "<f8"
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<Q", len(hb)))
            fh.write(hb)
            for v in params.values():
                fh.write(np.ascontiguousarray(v, dtype=le).tobytes())
    except OSError as e:
        raise StorageError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path, precision: Optional[str] = None) -> Network:
    """Rebuild a MiniVgg from a checkpoint.

    Passing ``precision`` asserts the stored precision; there is no silent
    cast between f32 and f64.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != CKPT_MAGIC or len(raw) < 16:
        raise HeaderMismatch(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderMismatch(f"corrupt checkpoint header: {e}") from e
    stored = header.get("precision")
    if stored not in DTYPES:
        raise HeaderMismatch(f"unknown precision {stored!r}")
    if precision is not None and precision != stored:
        raise HeaderMismatch(f"checkpoint holds {stored} parameters, run expects {precision}")
    spec = MiniVggSpec(**header["spec"])
    net = build_minivgg(spec, stored)
    params = net.params
    listed = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    expected = [(k, v.shape) for k, v in params.items()]
    if listed != expected:
        raise HeaderMismatch(f"tensor layout {listed} does not match spec layout {expected}")
    le = np.dtype("<f4" if stored == "f32" else "<f8")
    off = 16 + hlen
    for name, shape in listed:
        count = int(np.prod(shape))
        nbytes = count * le.itemsize
        if off + nbytes > len(raw):
            raise HeaderMismatch(f"checkpoint truncated in tensor {name}")
        params[name][...] = np.frombuffer(raw, dtype=le, count=count, offset=off).reshape(shape)
        off += nbytes
    if off != len(raw):
        raise HeaderMismatch(f"{len(raw) - off} trailing bytes after the last tensor")
    net.trained = bool(header.get("trained", True))
    return net

"""Neural network primitives on numpy arrays.

Everything here is explicit: layers own their parameters, cache what their
backward pass needs, and return input gradients from backward().  There is
no autograd graph; composite modules orchestrate their children in reverse
order.  Convolutions lower to im2col and a single BLAS matmul, which is
where nearly all training time goes.  Layers are built in float32 for
training; float64 is available so gradients can be checked against central
finite differences at tight tolerance.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import BatchError, DimError, FormatError


class Parameter:
    """A learnable array with its accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int,
              dtype) -> np.ndarray:
    """Kaiming initialization for ReLU stacks: N(0, sqrt(2 / fan_in))."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    """Base: stateless unless a subclass declares parameters or buffers."""

    def params(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv(Layer):
    """k x k convolution, stride 1 or 2, same padding (pad = k // 2)."""

    def __init__(self, name: str, cin: int, cout: int, ksize: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        if ksize not in (1, 3):
            raise DimError(f"unsupported kernel size {ksize}")
        self.ksize = ksize
        self.stride = stride
        self.pad = ksize // 2
        self.w = Parameter(f"{name}.w", he_normal(rng, (cout, cin, ksize, ksize),
                                                  cin * ksize * ksize, dtype))
        # Bias is redundant (and has zero gradient) when the conv feeds a
        # batch-norm layer, which re-centers every channel.
        self.b = Parameter(f"{name}.b", np.zeros(cout, dtype=dtype)) if bias else None
        self._cols = None
        self._xshape = None

    def params(self):
        return [self.w, self.b] if self.b is not None else [self.w]

    def _im2col(self, xp, ho, wo):
        n, c, _, _ = xp.shape
        k, s = self.ksize, self.stride
        cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
        for ki in range(k):
            for kj in range(k):
                cols[:, ki, kj] = xp[:, :, ki:ki + s * ho:s,
                                     kj:kj + s * wo:s].transpose(1, 0, 2, 3)
        return cols.reshape(c * k * k, n * ho * wo)

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        k, s, p = self.ksize, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        cols = self._im2col(xp, ho, wo)
        cout = self.w.value.shape[0]
        out = self.w.value.reshape(cout, -1) @ cols
        if self.b is not None:
            out += self.b.value[:, None]
        self._cols = cols
        self._xshape = (n, c, h, w, ho, wo)
        return out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(self, dy):
        n, c, h, w, ho, wo = self._xshape
        k, s, p = self.ksize, self.stride, self.pad
        cout = self.w.value.shape[0]
        dy_mat = dy.transpose(1, 0, 2, 3).reshape(cout, -1)
        self.w.grad += (dy_mat @ self._cols.T).reshape(self.w.value.shape)
        if self.b is not None:
            self.b.grad += dy_mat.sum(axis=1)
        dcols = (self.w.value.reshape(cout, -1).T @ dy_mat).reshape(
            c, k, k, n, ho, wo)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += \
                    dcols[:, ki, kj].transpose(1, 0, 2, 3)
        self._cols = None
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class BatchNorm(Layer):
    """Per-channel batch normalization over (N, H, W)."""

    def __init__(self, name: str, channels: int, momentum: float = 0.1,
                 eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x, train=False):
        if train:
            if x.shape[0] < 2:
                raise BatchError("batch normalization needs a batch of >= 2 "
                                 "samples in training mode")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mean, var = self.running_mean, self.running_var
        std = np.sqrt(var + self.eps).astype(x.dtype)
        xhat = (x - mean[:, None, None]) / std[:, None, None]
        self._cache = (xhat, std) if train else None
        return self.gamma.value[:, None, None] * xhat + self.beta.value[:, None, None]

    def backward(self, dy):
        if self._cache is None:
            raise BatchError("backward requires a forward pass in train mode")
        xhat, std = self._cache
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        axes = (0, 2, 3)
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        dxhat = dy * self.gamma.value[:, None, None]
        dx = (dxhat - dxhat.sum(axes)[:, None, None] / m
              - xhat * (dxhat * xhat).sum(axes)[:, None, None] / m)
        self._cache = None
        return dx / std[:, None, None]


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class AvgPool(Layer):
    """Non-overlapping k x k mean pooling."""

    def __init__(self, k: int):
        self.k = k
        self._shape = None

    def forward(self, x, train=False):
        k = self.k
        if k == 1:
            self._shape = x.shape
            return x
        n, c, h, w = x.shape
        if h % k or w % k:
            raise DimError(f"pool window {k} does not divide ({h}, {w})")
        self._shape = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, dy):
        k = self.k
        if k == 1:
            return dy
        n, c, h, w = self._shape
        out = np.broadcast_to(dy[:, :, :, None, :, None] / (k * k),
                              (n, c, h // k, k, w // k, k))
        return out.reshape(n, c, h, w).astype(dy.dtype, copy=False)


class GlobalAvgPool(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        n, c, h, w = self._shape
        return np.broadcast_to(dy[:, :, None, None] / (h * w),
                               (n, c, h, w)).astype(dy.dtype, copy=False)


class Linear(Layer):
    def __init__(self, name: str, cin: int, cout: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.w = Parameter(f"{name}.w", he_normal(rng, (cout, cin), cin, dtype))
        self.b = Parameter(f"{name}.b", np.zeros(cout, dtype=dtype))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False):
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, dy):
        self.w.grad += dy.T @ self._x
        self.b.grad += dy.sum(axis=0)
        self._x = None
        return dy @ self.w.value


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus a skip, joined by a final ReLU.

    When the block changes resolution or width, the skip runs through a
    1x1 projection at the main stride so shapes line up.
    """

    def __init__(self, name: str, cin: int, cout: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.main = Sequential([
            Conv(f"{name}.conv1", cin, cout, 3, stride, rng, dtype, bias=False),
            BatchNorm(f"{name}.bn1", cout, dtype=dtype),
            ReLU(),
            Conv(f"{name}.conv2", cout, cout, 3, 1, rng, dtype, bias=False),
            BatchNorm(f"{name}.bn2", cout, dtype=dtype),
        ])
        if stride != 1 or cin != cout:
            self.skip = Sequential([
                Conv(f"{name}.proj", cin, cout, 1, stride, rng, dtype, bias=False),
                BatchNorm(f"{name}.projbn", cout, dtype=dtype),
            ])
        else:
            self.skip = None
        self.relu_out = ReLU()

    def params(self):
        out = self.main.params()
        if self.skip is not None:
            out += self.skip.params()
        return out

    def buffers(self):
        out = self.main.buffers()
        if self.skip is not None:
            out.update(self.skip.buffers())
        return out

    def forward(self, x, train=False):
        main = self.main.forward(x, train)
        skip = self.skip.forward(x, train) if self.skip is not None else x
        return self.relu_out.forward(main + skip, train)

    def backward(self, dy):
        dsum = self.relu_out.backward(dy)
        dx = self.main.backward(dsum)
        if self.skip is not None:
            dx = dx + self.skip.backward(dsum)
        else:
            dx = dx + dsum
        return dx


# ---------------------------------------------------------------------------
# Loss and activation

def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_loss(logits: np.ndarray, targets: np.ndarray
             ) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy evaluated from logits.

    Uses the fused form max(z,0) - z*t + log(1 + exp(-|z|)), which never
    exponentiates a positive argument.  Returns (loss, dloss/dlogits).
    """
    z, t = logits, targets
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - t) / z.size
    return float(loss.mean()), grad.astype(z.dtype, copy=False)


# ---------------------------------------------------------------------------
# Optimizer

class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in params]
        self._v = [np.zeros_like(p.value) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            m += (1 - self.beta1) * (p.grad - m)
            v += (1 - self.beta2) * (p.grad * p.grad - v)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoint container

_CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_arrays(path, magic: bytes, config: dict,
                arrays: dict[str, np.ndarray]) -> None:
    """Write a named-array container: magic, version, JSON config, blobs."""
    if len(magic) != 4:
        raise FormatError("magic must be 4 bytes")
    cfg = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode()
            arr = np.ascontiguousarray(arr)
            code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
            if code is None:
                raise FormatError(f"array {name!r} has unsupported dtype {arr.dtype}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_arrays(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise FormatError(f"{path}: truncated container")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    (cfg_len,) = take("<I")
    try:
        config = json.loads(data[off:off + cfg_len])
    except ValueError as exc:
        raise FormatError(f"{path}: bad config block: {exc}") from None
    off += cfg_len
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = data[off:off + name_len].decode()
        off += name_len
        code, rank = take("<BB")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        dims = take(f"<{rank}I")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if off + nbytes > len(data):
            raise FormatError(f"{path}: truncated array {name!r}")
        arrays[name] = np.frombuffer(
            data[off:off + nbytes], dtype=dtype).reshape(dims).copy()
        off += nbytes
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes after last array")
    return config, arrays

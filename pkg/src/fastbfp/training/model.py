"""Small networks whose compute layers run through a :class:`MatmulEngine`.

Bias, nonlinearities, pooling and the loss are evaluated in the array dtype
(FP32 in training) outside the engine.
"""

from __future__ import annotations

import numpy as np

from ..precision import PrecisionSetting
from .engine import MatmulEngine


def he_normal(rng: np.random.Generator, fan_in: int, shape: tuple[int, int], dtype) -> np.ndarray:
    """Gaussian init with variance 2 / fan_in, the usual ReLU scaling."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Dense:
    compute = True

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32) -> None:
        self.W = he_normal(rng, n_in, (n_in, n_out), dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._x: np.ndarray | None = None
        self.grad_out: np.ndarray | None = None

    def params(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.W, self.dW), (self.b, self.db)]

    def forward(self, x: np.ndarray, engine: MatmulEngine, s: PrecisionSetting | None) -> np.ndarray:
        self._x = x
        return engine.forward(x, self.W, s) + self.b

    def backward(self, dy: np.ndarray, engine: MatmulEngine, s: PrecisionSetting | None, need_dx: bool = True) -> np.ndarray | None:
        self.grad_out = dy
        self.dW[...] = engine.grad_w(self._x, dy, s)
        self.db[...] = dy.sum(axis=0)
        return engine.grad_a(dy, self.W, s) if need_dx else None

    def matmul_input(self) -> np.ndarray:
        return self._x


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*9) for a 3x3 kernel, stride 1, zero pad 1."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, h, w, c, 3, 3), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[..., di, dj] = xp[:, :, di:di + h, dj:dj + w].transpose(0, 2, 3, 1)
    return cols.reshape(b * h * w, c * 9)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    b, c, h, w = shape
    cols = cols.reshape(b, h, w, c, 3, 3)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for di in range(3):
        for dj in range(3):
            xp[:, :, di:di + h, dj:dj + w] += cols[..., di, dj].transpose(0, 3, 1, 2)
    return xp[:, :, 1:-1, 1:-1]


class Conv3x3:
    """3x3 same-padding convolution lowered to a matmul over (C_in * 9)."""

    compute = True

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32) -> None:
        fan_in = c_in * 9
        self.W = he_normal(rng, fan_in, (fan_in, c_out), dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._cols: np.ndarray | None = None
        self._shape: tuple[int, int, int, int] | None = None
        self.grad_out: np.ndarray | None = None

    def params(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.W, self.dW), (self.b, self.db)]

    def forward(self, x: np.ndarray, engine: MatmulEngine, s: PrecisionSetting | None) -> np.ndarray:
        self._shape = x.shape
        self._cols = _im2col(x)
        b, _, h, w = x.shape
        out = engine.forward(self._cols, self.W, s) + self.b
        return out.reshape(b, h, w, -1).transpose(0, 3, 1, 2)

    def backward(self, dy: np.ndarray, engine: MatmulEngine, s: PrecisionSetting | None, need_dx: bool = True) -> np.ndarray | None:
        d = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, dy.shape[1])
        self.grad_out = d
        self.dW[...] = engine.grad_w(self._cols, d, s)
        self.db[...] = d.sum(axis=0)
        if not need_dx:
            return None
        return _col2im(engine.grad_a(d, self.W, s), self._shape)

    def matmul_input(self) -> np.ndarray:
        return self._cols


class ReLU:
    compute = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0).astype(dy.dtype)


class MaxPool2:
    compute = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        self._idx, self._shape = idx, x.shape
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, c, h, w = self._shape
        win = np.zeros((b, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(win, self._idx[..., None], dy[..., None], axis=-1)
        return win.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


class AvgPool2:
    compute = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return (dy.repeat(2, axis=2).repeat(2, axis=3) / 4).astype(dy.dtype)


class Flatten:
    compute = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy.reshape(self._shape)


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=1, keepdims=True)
    p = e / total
    n = len(y)
    loss = float((np.log(total[:, 0]) - z[np.arange(n), y]).mean())
    grad = p.copy()
    grad[np.arange(n), y] -= 1
    return loss, (grad / n).astype(logits.dtype)


class Model:
    """A sequence of modules; compute layers are numbered 1..L in order."""

    def __init__(self, modules: list) -> None:
        self.modules = modules
        self.compute_layers = [m for m in modules if m.compute]
        self.settings: list[PrecisionSetting | None] = [None] * len(self.compute_layers)

    @property
    def n_layers(self) -> int:
        return len(self.compute_layers)

    def logits(self, x: np.ndarray, engine: MatmulEngine) -> np.ndarray:
        l = 0
        for mod in self.modules:
            if mod.compute:
                x = mod.forward(x, engine, self.settings[l])
                l += 1
            else:
                x = mod.forward(x)
        return x

    def backward(self, dlogits: np.ndarray, engine: MatmulEngine) -> None:
        dy = dlogits
        l = self.n_layers
        first = self.compute_layers[0]
        for mod in reversed(self.modules):
            if mod.compute:
                l -= 1
                dy = mod.backward(dy, engine, self.settings[l], need_dx=mod is not first)
                if dy is None:
                    return
            else:
                dy = mod.backward(dy)

    def params(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [p for layer in self.compute_layers for p in layer.params()]

    def weights(self) -> list[np.ndarray]:
        return [layer.W for layer in self.compute_layers]


def mlp(n_in: int, n_out: int, hidden: int = 64, depth: int = 4, seed: int = 0, dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    sizes = [n_in] + [hidden] * (depth - 1) + [n_out]
    modules: list = []
    for k in range(depth):
        modules.append(Dense(sizes[k], sizes[k + 1], rng, dtype))
        if k < depth - 1:
            modules.append(ReLU())
    return Model(modules)


def small_cnn(n_out: int = 10, seed: int = 0, dtype=np.float32, pool: str = "avg") -> Model:
    """Six compute layers for 1x8x8 inputs."""
    rng = np.random.default_rng(seed)
    pooling = {"avg": AvgPool2, "max": MaxPool2}[pool]
    return Model([
        Conv3x3(1, 8, rng, dtype), ReLU(),
        Conv3x3(8, 8, rng, dtype), ReLU(), pooling(),
        Conv3x3(8, 16, rng, dtype), ReLU(),
        Conv3x3(16, 16, rng, dtype), ReLU(), pooling(),
        Flatten(),
        Dense(64, 32, rng, dtype), ReLU(),
        Dense(32, n_out, rng, dtype),
    ])

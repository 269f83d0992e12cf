"""A small reverse-mode layer stack in numpy.

Every layer maps arrays on the last axis (leading axes are batch/time) and
caches what its backward pass needs from the most recent forward call.
Parameter gradients accumulate into ``DiffTensor.grad`` until zeroed.
Complex quantities are carried as interleaved real pairs ``[Re, Im]`` and
their real and imaginary parts are trained as independent real parameters.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

LOG_EPS = 1e-7


class DiffTensor:
    """A float64 array with a gradient slot of the same shape."""

    __slots__ = ("values", "grad")

    def __init__(self, values):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"DiffTensor(shape={self.shape})"


class Layer:
    """Base class. Subclasses fill ``self.params`` and implement forward/backward."""

    kind = "layer"

    def __init__(self, name: str | None = None):
        self.name = name or self.kind
        self.params: dict[str, DiffTensor] = {}
        # the first trainable layer of a model never needs dL/dx
        self.need_input_grad = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray | None:
        raise NotImplementedError

    def parameters(self, prefix: str = "") -> Iterator[tuple[str, DiffTensor]]:
        for key, p in self.params.items():
            yield f"{prefix}{self.name}.{key}", p

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    def __call__(self, x):
        return self.forward(x)

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({self.name}{': ' + shapes if shapes else ''})"


def _flat2(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def _matmul_last(x: np.ndarray, w_t: np.ndarray) -> np.ndarray:
    """x (..., Q) @ w_t (Q, P) through one 2-D BLAS call."""
    return (_flat2(x) @ w_t).reshape(x.shape[:-1] + (w_t.shape[1],))


def _as_complex(a: np.ndarray, *shape: int) -> np.ndarray:
    """View interleaved [Re, Im] float64 pairs as complex128 with the given trailing shape."""
    c = np.ascontiguousarray(a, dtype=np.float64).view(np.complex128)
    return c.reshape(c.shape[:-1] + shape) if shape else c


def _param_complex(a: np.ndarray) -> np.ndarray:
    """Complex view of a parameter stored as (..., 2) [Re, Im]."""
    return np.ascontiguousarray(a, dtype=np.float64).view(np.complex128)[..., 0]


def _as_pairs(c: np.ndarray) -> np.ndarray:
    """Complex (..., P) -> interleaved float64 (..., 2P)."""
    return np.ascontiguousarray(c).view(np.float64)


class Affine(Layer):
    """y = W x + b with W (P, Q)."""

    kind = "affine"

    def __init__(self, weight, bias=None, name: str | None = None):
        super().__init__(name)
        w = np.asarray(weight, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("affine weight must be 2-D")
        self.params["W"] = DiffTensor(w)
        self.params["b"] = DiffTensor(np.zeros(w.shape[0]) if bias is None else bias)
        if self.params["b"].shape != (w.shape[0],):
            raise ValueError("bias length must equal the number of output rows")
        self._x = None

    @property
    def in_dim(self) -> int:
        return self.params["W"].shape[1]

    @property
    def out_dim(self) -> int:
        return self.params["W"].shape[0]

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{self.name}: expected last dim {self.in_dim}, got {x.shape[-1]}")
        self._x = x
        y = _matmul_last(x, self.params["W"].values.T)
        y += self.params["b"].values
        return y

    def backward(self, g):
        W, b = self.params["W"], self.params["b"]
        g2 = _flat2(g)
        W.grad += g2.T @ _flat2(self._x)
        b.grad += g2.sum(axis=0)
        if not self.need_input_grad:
            return None
        return _matmul_last(g, W.values)


class ComplexAffine(Layer):
    """Complex y = W x + b on interleaved real pairs.

    Parameters: ``W`` (P, Q, 2) and ``b`` (P, 2) holding [Re, Im]. A row of W
    equal to w^H reproduces the beamformer output w^H X.
    """

    kind = "complex_affine"

    def __init__(self, weight, bias=None, name: str | None = None):
        super().__init__(name)
        w = np.asarray(weight)
        if np.iscomplexobj(w):
            w = np.stack([w.real, w.imag], axis=-1)
        if w.ndim != 3 or w.shape[-1] != 2:
            raise ValueError("complex affine weight must be (P, Q, 2) or complex (P, Q)")
        self.params["W"] = DiffTensor(w)
        if bias is None:
            bias = np.zeros((w.shape[0], 2))
        bias = np.asarray(bias)
        if np.iscomplexobj(bias):
            bias = np.stack([bias.real, bias.imag], axis=-1)
        self.params["b"] = DiffTensor(bias)
        self._xc = None

    @property
    def in_dim(self) -> int:
        return 2 * self.params["W"].shape[1]

    def forward(self, x):
        if x.shape[-1] % 2:
            raise ValueError(f"{self.name}: odd-length input cannot hold complex pairs")
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{self.name}: expected last dim {self.in_dim}, got {x.shape[-1]}")
        xc = _as_complex(x)
        self._xc = xc
        wc = _param_complex(self.params["W"].values)
        bc = _param_complex(self.params["b"].values)
        return _as_pairs(_matmul_last(xc, wc.T) + bc)

    def backward(self, g):
        W, b = self.params["W"], self.params["b"]
        # with Re and Im as independent reals, dL/dW = g conj(x) in complex form
        gc = _flat2(_as_complex(g))
        W.grad += _as_pairs(gc.T @ _flat2(self._xc).conj()).reshape(W.shape)
        b.grad += _as_pairs(gc.sum(axis=0)).reshape(b.shape)
        if not self.need_input_grad:
            return None
        wc = _param_complex(W.values)
        return _as_pairs(_matmul_last(_as_complex(g), wc.conj()))


class BlockComplexAffine(Layer):
    """Per-frequency complex affine maps, one (D, M) block per bin.

    Input (..., 2KM) in bin-major interleaved order; output (..., 2KD) with
    bin-major, direction-minor order. Only the diagonal blocks exist as
    parameters, so cross-frequency entries are structurally zero.
    """

    kind = "block_complex_affine"

    def __init__(self, weight, bias=None, name: str | None = None):
        super().__init__(name)
        w = np.asarray(weight)
        if np.iscomplexobj(w):
            w = np.stack([w.real, w.imag], axis=-1)
        if w.ndim != 4 or w.shape[-1] != 2:
            raise ValueError("block weight must be (K, D, M, 2) or complex (K, D, M)")
        self.params["W"] = DiffTensor(w)
        if bias is None:
            bias = np.zeros(w.shape[:2] + (2,))
        self.params["b"] = DiffTensor(bias)
        self._xc = None
        self._lead = None

    @property
    def dims(self) -> tuple[int, int, int]:
        k, d, m, _ = self.params["W"].shape
        return k, d, m

    def forward(self, x):
        k, d, m = self.dims
        if x.shape[-1] != 2 * k * m:
            raise ValueError(f"{self.name}: expected last dim {2 * k * m}, got {x.shape[-1]}")
        self._lead = x.shape[:-1]
        # bins lead so each bin is one small batched product: (K, N, M)
        xc = _as_complex(x, k, m).reshape(-1, k, m).transpose(1, 0, 2)
        self._xc = xc
        wc = _param_complex(self.params["W"].values)
        bc = _param_complex(self.params["b"].values)
        y = (xc @ wc.transpose(0, 2, 1)).transpose(1, 0, 2) + bc
        return _as_pairs(y).reshape(self._lead + (2 * k * d,))

    def backward(self, g):
        k, d, m = self.dims
        W, b = self.params["W"], self.params["b"]
        gc = _as_complex(g, k, d).reshape(-1, k, d).transpose(1, 0, 2)
        W.grad += _as_pairs(gc.transpose(0, 2, 1) @ self._xc.conj()).reshape(W.shape)
        b.grad += _as_pairs(gc.sum(axis=1)).reshape(b.shape)
        if not self.need_input_grad:
            return None
        wc = _param_complex(W.values)
        dx = (gc @ wc.conj()).transpose(1, 0, 2)
        return _as_pairs(dx).reshape(self._lead + (2 * k * m,))

    def dense_matrix(self) -> np.ndarray:
        """The equivalent real (2KD, 2KM) matrix acting on interleaved input."""
        k, d, m = self.dims
        W = self.params["W"].values
        dense = np.zeros((k, d, 2, k, m, 2))
        for i in range(k):
            dense[i, :, 0, i, :, 0] = W[i, ..., 0]
            dense[i, :, 0, i, :, 1] = -W[i, ..., 1]
            dense[i, :, 1, i, :, 0] = W[i, ..., 1]
            dense[i, :, 1, i, :, 1] = W[i, ..., 0]
        return dense.reshape(2 * k * d, 2 * k * m)


class PowPairs(Layer):
    """Sum of squares of adjacent values: y_i = x_{2i}^2 + x_{2i+1}^2."""

    kind = "pow_pairs"

    def __init__(self, name: str | None = None):
        super().__init__(name)
        self._x = None

    def forward(self, x):
        if x.shape[-1] % 2:
            raise ValueError(f"{self.name}: odd-length input")
        self._x = x
        return x[..., 0::2] ** 2 + x[..., 1::2] ** 2

    def backward(self, g):
        dx = np.repeat(g, 2, axis=-1)
        dx *= self._x
        dx *= 2.0
        return dx


class MaxPoolGroups(Layer):
    """Max over consecutive groups of ``group_size``; ties resolve to the lowest index."""

    kind = "maxpool"

    def __init__(self, group_size: int, name: str | None = None):
        super().__init__(name)
        if group_size < 1:
            raise ValueError("group_size must be >= 1")
        self.group_size = group_size
        self._arg = None
        self._shape = None

    def forward(self, x):
        if x.shape[-1] % self.group_size:
            raise ValueError(
                f"{self.name}: length {x.shape[-1]} not divisible by {self.group_size}"
            )
        self._shape = x.shape
        groups = x.reshape(x.shape[:-1] + (-1, self.group_size))
        self._arg = np.argmax(groups, axis=-1)
        return np.take_along_axis(groups, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        dx = np.zeros(self._shape[:-1] + (self._shape[-1] // self.group_size, self.group_size))
        np.put_along_axis(dx, self._arg[..., None], g[..., None], axis=-1)
        return dx.reshape(self._shape)


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name: str | None = None):
        super().__init__(name)
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g):
        return np.where(self._mask, g, 0.0)


class LogFloor(Layer):
    """log(max(x, eps)); the gradient is zero wherever the floor is active."""

    kind = "log_floor"

    def __init__(self, eps: float = LOG_EPS, name: str | None = None):
        super().__init__(name)
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self._x = None

    def forward(self, x):
        self._x = x
        return np.log(np.maximum(x, self.eps))

    def backward(self, g):
        x = self._x
        live = x > self.eps
        return np.where(live, g / np.where(live, x, 1.0), 0.0)


class Normalize(Layer):
    """Fixed (x - shift) / scale; holds no trainable parameters."""

    kind = "normalize"

    def __init__(self, shift, scale, name: str | None = None):
        super().__init__(name)
        self.shift = np.asarray(shift, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        if self.shift.shape != self.scale.shape or np.any(self.scale <= 0):
            raise ValueError("shift/scale must match and scale must be positive")

    @classmethod
    def from_stats(cls, stats, name: str | None = None) -> "Normalize":
        return cls(stats.mean, np.sqrt(stats.variance), name)

    def forward(self, x):
        if x.shape[-1] != self.shift.shape[0]:
            raise ValueError(f"{self.name}: expected last dim {self.shift.shape[0]}, got {x.shape[-1]}")
        return (x - self.shift) / self.scale

    def backward(self, g):
        return g / self.scale


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LSTM(Layer):
    """Unidirectional LSTM over (T, B, Q) input, gate order [input, forget, output, cell].

    ``initial_state`` (h, c) is consumed by the next forward; ``final_state``
    holds the last (h, c) afterwards so callers can carry state across
    truncated-BPTT chunks. Gradients are not propagated into the initial state.
    """

    kind = "lstm"

    def __init__(self, wx, wh, b, name: str | None = None):
        super().__init__(name)
        self.params["Wx"] = DiffTensor(wx)
        self.params["Wh"] = DiffTensor(wh)
        self.params["b"] = DiffTensor(b)
        h4, q = self.params["Wx"].shape
        if h4 % 4 or self.params["Wh"].shape != (h4, h4 // 4) or self.params["b"].shape != (h4,):
            raise ValueError("inconsistent LSTM parameter shapes")
        self.hidden = h4 // 4
        self.input_dim = q
        self.initial_state = None
        self.final_state = None
        self._cache = None

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0,
             name: str | None = None) -> "LSTM":
        s = 1.0 / np.sqrt(hidden)
        wx = rng.uniform(-s, s, (4 * hidden, input_dim))
        wh = rng.uniform(-s, s, (4 * hidden, hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = forget_bias
        return cls(wx, wh, b, name)

    def forward(self, x):
        squeeze = x.ndim == 2
        if squeeze:
            x = x[:, None, :]
        if x.ndim != 3 or x.shape[-1] != self.input_dim:
            raise ValueError(f"{self.name}: expected (T, B, {self.input_dim}) input, got {x.shape}")
        t_len, batch, _ = x.shape
        h_dim = self.hidden
        wh = self.params["Wh"].values
        zx = _matmul_last(x, self.params["Wx"].values.T) + self.params["b"].values
        if self.initial_state is None:
            h = np.zeros((batch, h_dim))
            c = np.zeros((batch, h_dim))
        else:
            h, c = (np.array(s, dtype=np.float64) for s in self.initial_state)
        gates = np.empty((t_len, batch, 4 * h_dim))
        cells = np.empty((t_len + 1, batch, h_dim))
        hs = np.empty((t_len + 1, batch, h_dim))
        cells[0], hs[0] = c, h
        for t in range(t_len):
            z = zx[t] + h @ wh.T
            a = gates[t]
            a[:, : 3 * h_dim] = sigmoid(z[:, : 3 * h_dim])
            a[:, 3 * h_dim :] = np.tanh(z[:, 3 * h_dim :])
            c = a[:, h_dim : 2 * h_dim] * c + a[:, :h_dim] * a[:, 3 * h_dim :]
            h = a[:, 2 * h_dim : 3 * h_dim] * np.tanh(c)
            cells[t + 1], hs[t + 1] = c, h
        self.final_state = (h.copy(), c.copy())
        self._cache = (x, gates, cells, hs, squeeze)
        out = hs[1:]
        return out[:, 0, :] if squeeze else out

    def backward(self, g):
        x, gates, cells, hs, squeeze = self._cache
        if squeeze:
            g = g[:, None, :]
        t_len, batch, _ = x.shape
        h_dim = self.hidden
        wh = self.params["Wh"].values
        dz = np.empty_like(gates)
        dh_next = np.zeros((batch, h_dim))
        dc_next = np.zeros((batch, h_dim))
        for t in range(t_len - 1, -1, -1):
            a = gates[t]
            i_g, f_g = a[:, :h_dim], a[:, h_dim : 2 * h_dim]
            o_g, c_g = a[:, 2 * h_dim : 3 * h_dim], a[:, 3 * h_dim :]
            tc = np.tanh(cells[t + 1])
            dh = g[t] + dh_next
            dc = dh * o_g * (1.0 - tc**2) + dc_next
            d = dz[t]
            d[:, :h_dim] = dc * c_g * i_g * (1.0 - i_g)
            d[:, h_dim : 2 * h_dim] = dc * cells[t] * f_g * (1.0 - f_g)
            d[:, 2 * h_dim : 3 * h_dim] = dh * tc * o_g * (1.0 - o_g)
            d[:, 3 * h_dim :] = dc * i_g * (1.0 - c_g**2)
            dh_next = d @ wh
            dc_next = dc * f_g
        dz2 = _flat2(dz)
        self.params["Wx"].grad += dz2.T @ _flat2(x)
        self.params["Wh"].grad += dz2.T @ _flat2(hs[:-1])
        self.params["b"].grad += dz2.sum(axis=0)
        if not self.need_input_grad:
            return None
        dx = _matmul_last(dz, self.params["Wx"].values)
        return dx[:, 0, :] if squeeze else dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all leading positions and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if labels.shape != logits.shape[:-1]:
        raise ValueError("labels must match the leading logit axes")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError("label out of range")
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, labels[..., None].astype(np.intp), axis=-1)[..., 0]
    n = max(labels.size, 1)
    loss = float(np.sum(log_norm - picked) / n)
    grad = softmax(logits)
    np.put_along_axis(grad, labels[..., None].astype(np.intp),
                      np.take_along_axis(grad, labels[..., None].astype(np.intp), axis=-1) - 1.0,
                      axis=-1)
    return loss, grad / n


class CrossEntropy(Layer):
    """Softmax cross-entropy against fixed labels, as a scalar-output layer."""

    kind = "xent"

    def __init__(self, labels, name: str | None = None):
        super().__init__(name)
        self.labels = np.asarray(labels)
        self._grad = None

    def forward(self, x):
        loss, self._grad = softmax_xent(x, self.labels)
        return np.array(loss)

    def backward(self, g):
        return self._grad * float(g)


class Sequential(Layer):
    """Chains layers; rejects non-finite activations at every boundary."""

    kind = "seq"

    def __init__(self, layers: Sequence[Layer], name: str | None = None):
        super().__init__(name)
        self.layers = list(layers)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names: {names}")

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite activation after layer {layer.name!r}")
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                return None
        return g

    def parameters(self, prefix: str = "") -> Iterator[tuple[str, DiffTensor]]:
        for layer in self.layers:
            yield from layer.parameters(prefix)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


def grad_check(layer: Layer, inputs, eps: float = 1e-5, seed: int = 0,
               check_inputs: bool = True) -> float:
    """Max relative error between backward() and central finite differences.

    Vector outputs are reduced to a scalar through a fixed random projection.
    Relative error per entry: |a - n| / max(|a|, |n|, 1e-8).
    """
    x = np.array(inputs, dtype=np.float64)
    y = layer.forward(x)
    if not isinstance(y, np.ndarray) or not np.issubdtype(y.dtype, np.floating):
        raise TypeError(f"{layer.name}: output is not a real array and cannot be reduced to a scalar")
    proj = np.random.default_rng(seed).standard_normal(y.shape)

    def outputs() -> np.ndarray:
        return np.array(layer.forward(x), dtype=np.float64)

    params = [p for _, p in layer.parameters()]
    for p in params:
        p.zero_grad()
    saved_flag = layer.need_input_grad
    layer.need_input_grad = True
    layer.forward(x)
    dx = layer.backward(proj.copy())
    layer.need_input_grad = saved_flag

    targets = [(p.values, p.grad.copy()) for p in params]
    if check_inputs and dx is not None:
        targets.append((x, np.asarray(dx, dtype=np.float64)))

    worst = 0.0
    for arr, analytic in targets:
        flat = arr.reshape(-1)
        ana = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            y_plus = outputs()
            flat[i] = orig - eps
            y_minus = outputs()
            flat[i] = orig
            # difference before projecting so untouched outputs cancel exactly
            num = float(np.sum(proj * (y_plus - y_minus))) / (2.0 * eps)
            denom = max(abs(ana[i]), abs(num), 1e-8)
            worst = max(worst, abs(ana[i] - num) / denom)
    layer.forward(x)
    return worst

"""Differentiable layers and the sequential model container.

Every layer implements ``forward(x, training)`` and ``backward(grad)``.  The
backward pass reads the cache left by the most recent training-mode forward
and fills ``layer.grads`` (keyed like ``layer.params()``).

A LUT-Dense layer holds ``c_in * c_out`` independent one-input L-LUTs, each a
tiny MLP.  Training evaluates all of them with batched einsums; eval mode goes
through :func:`mlp_eval`, the same scalar routine used for truth-table
enumeration, so both paths produce identical floating-point results.
"""
from __future__ import annotations

import math

import numpy as np

from .fxp import RND, SAT, TRN, WRAP, QuantizerState, calibrate, quantize, quantize_backward

ACTIVATIONS = ("tanh", "relu", "linear")


class LayerError(ValueError):
    pass


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def mlp_eval(v: np.ndarray, weights: list, biases: list, activation: str) -> np.ndarray:
    """Evaluate L-LUT MLPs element-wise with a fixed operation order.

    ``v`` broadcasts against ``weights[k][..., d, e]``; hidden units are kept
    as separate arrays so the reduction order never depends on array layout.
    """
    units = [v]
    for w, b in zip(weights[:-1], biases[:-1]):
        nxt = []
        for e in range(w.shape[-1]):
            acc = units[0] * w[..., 0, e]
            for d in range(1, len(units)):
                acc = acc + units[d] * w[..., d, e]
            nxt.append(_act(activation, acc + b[..., e]))
        units = nxt
    w, b = weights[-1], biases[-1]
    acc = units[0] * w[..., 0]
    for d in range(1, len(units)):
        acc = acc + units[d] * w[..., d]
    return acc + b


def _flat(a: np.ndarray, keep: int) -> np.ndarray:
    """Merge all but the last ``keep`` axes into one leading axis."""
    return a.reshape((-1,) + a.shape[a.ndim - keep:])


class Layer:
    kind = "layer"

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def quantizers(self) -> dict[str, QuantizerState]:
        return {}

    def output_shape(self, input_shape: tuple) -> tuple:
        return tuple(input_shape)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called before a training-mode forward")
        return self._cache


class BatchNormState:
    """Per-element batch normalization over the ``(c_in, c_out)`` grid."""

    def __init__(self, shape, momentum: float = 0.9, eps: float = 1e-3):
        if eps <= 0:
            raise ValueError("batch-norm eps must be positive")
        self.gamma = np.ones(shape)
        self.beta = np.zeros(shape)
        self.running_mean = np.zeros(shape)
        self.running_var = np.ones(shape)
        self.momentum = momentum
        self.eps = eps
        self.updates = 0

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        if self.updates == 0:
            raise LayerError("batch-norm running statistics are not populated")
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return scale, self.beta - scale * self.running_mean


class LutDense(Layer):
    """Dense grid of one-input L-LUTs reduced by summation over inputs."""

    kind = "lut_dense"

    def __init__(self, c_in: int, c_out: int, hidden=(2,), activation: str = "tanh",
                 use_batchnorm: bool = False, rng: np.random.Generator | None = None,
                 q_in: QuantizerState | None = None, q_out: QuantizerState | None = None):
        super().__init__()
        if c_in < 1 or c_out < 1:
            raise LayerError("LUT-Dense needs positive c_in and c_out")
        if activation not in ACTIVATIONS:
            raise LayerError(f"unknown activation {activation!r}")
        self.c_in, self.c_out = int(c_in), int(c_out)
        self.hidden = tuple(int(h) for h in ([hidden] if np.isscalar(hidden) else hidden))
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        grid = (self.c_in, self.c_out)
        dims = (1,) + self.hidden
        self.W, self.B = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            lim = 1.0 / math.sqrt(d_in)
            self.W.append(rng.uniform(-lim, lim, grid + (d_in, d_out)))
            self.B.append(np.zeros(grid + (d_out,)))
        lim = 1.0 / math.sqrt(dims[-1])
        self.W.append(rng.uniform(-lim, lim, grid + (dims[-1],)))
        self.B.append(np.zeros(grid))
        self.q_in = q_in if q_in is not None else QuantizerState(grid, WRAP, TRN)
        self.q_out = q_out if q_out is not None else QuantizerState(grid, SAT, RND)
        if self.q_in.mode != WRAP or self.q_out.mode != SAT:
            raise LayerError("L-LUT inputs must use WRAP and outputs SAT quantizers")
        self.bn = BatchNormState(grid) if use_batchnorm else None

    @property
    def use_batchnorm(self) -> bool:
        return self.bn is not None

    def params(self):
        p = {f"W{k}": w for k, w in enumerate(self.W)}
        p.update({f"B{k}": b for k, b in enumerate(self.B)})
        if self.bn is not None:
            p["bn.gamma"] = self.bn.gamma
            p["bn.beta"] = self.bn.beta
        p["q_in.f_raw"] = self.q_in.f_raw
        p["q_out.f_raw"] = self.q_out.f_raw
        return p

    def quantizers(self):
        return {"q_in": self.q_in, "q_out": self.q_out}

    def output_shape(self, input_shape):
        if input_shape[-1] != self.c_in:
            raise LayerError(f"LUT-Dense expects {self.c_in} input channels, got {input_shape[-1]}")
        return tuple(input_shape[:-1]) + (self.c_out,)

    def active_mask(self) -> np.ndarray:
        """L-LUTs with a zero-width input or output are pruned to constant 0."""
        if not self.q_in.enabled or not self.q_out.enabled:
            return np.ones((self.c_in, self.c_out), dtype=bool)
        return (self.q_in.width > 0) & (self.q_out.width > 0)

    def eval_params(self) -> tuple[list, list]:
        """MLP weights with eval-mode batch norm folded into the output affine."""
        if self.bn is None:
            return self.W, self.B
        scale, shift = self.bn.scale_shift()
        weights = self.W[:-1] + [self.W[-1] * scale[..., None]]
        biases = self.B[:-1] + [self.B[-1] * scale + shift]
        return weights, biases

    def _check_input(self, x):
        if x.ndim < 1 or x.shape[-1] != self.c_in:
            raise LayerError(f"LUT-Dense expects trailing dim {self.c_in}, got shape {x.shape}")

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        xb = np.broadcast_to(x[..., :, None], x.shape + (self.c_out,))
        if not training:
            for name, q in self.quantizers().items():
                if q.enabled and not q.calibrated:
                    raise LayerError(f"{self.kind}.{name} is not calibrated; run a training pass first")
            xq = quantize(xb, self.q_in)
            weights, biases = self.eval_params()
            y = mlp_eval(xq, weights, biases, self.activation)
            yq = quantize(y, self.q_out)
            return np.where(self.active_mask(), yq, 0.0).sum(axis=-2)

        if self.q_in.enabled:
            self.q_in = calibrate(xb, self.q_in)
        xq = quantize(xb, self.q_in)
        h = xq[..., None]
        hs, zs = [h], []
        for w, b in zip(self.W[:-1], self.B[:-1]):
            z = np.einsum("...iod,iode->...ioe", h, w) + b
            h = _act(self.activation, z)
            zs.append(z)
            hs.append(h)
        out = np.einsum("...iod,iod->...io", h, self.W[-1]) + self.B[-1]
        bn_cache = None
        if self.bn is not None:
            lead = tuple(range(out.ndim - 2))
            mean = out.mean(axis=lead)
            var = out.var(axis=lead)
            sd = np.sqrt(var + self.bn.eps)
            xhat = (out - mean) / sd
            bn = self.bn
            bn.running_mean = bn.momentum * bn.running_mean + (1 - bn.momentum) * mean
            bn.running_var = bn.momentum * bn.running_var + (1 - bn.momentum) * var
            if bn.updates == 0:
                bn.running_mean, bn.running_var = mean.copy(), var.copy()
            bn.updates += 1
            bn_cache = (xhat, sd)
            out = bn.gamma * xhat + bn.beta
        if self.q_out.enabled:
            self.q_out = calibrate(out, self.q_out)
        yq = quantize(out, self.q_out)
        mask = self.active_mask()
        self._cache = (xb, xq, hs, zs, bn_cache, out, yq, mask)
        return np.where(mask, yq, 0.0).sum(axis=-2)

    def backward(self, grad):
        xb, xq, hs, zs, bn_cache, out, yq, mask = self._need_cache()
        g = np.broadcast_to(grad[..., None, :], yq.shape) * mask
        lead = tuple(range(g.ndim - 2))
        g, gf_out = quantize_backward(g, out, self.q_out, yq)
        grads = {"q_out.f_raw": gf_out}
        if bn_cache is not None:
            xhat, sd = bn_cache
            n = np.prod([g.shape[a] for a in lead]) if lead else 1
            grads["bn.gamma"] = (g * xhat).sum(axis=lead)
            grads["bn.beta"] = g.sum(axis=lead)
            dxhat = g * self.bn.gamma
            g = (n * dxhat - dxhat.sum(axis=lead) - xhat * (dxhat * xhat).sum(axis=lead)) / (n * sd)
        last = len(self.W) - 1
        grads[f"B{last}"] = g.sum(axis=lead)
        grads[f"W{last}"] = np.einsum("niod,nio->iod", _flat(hs[-1], 3), _flat(g, 2))
        gh = np.einsum("...io,iod->...iod", g, self.W[-1])
        for k in range(last - 1, -1, -1):
            gz = gh * _act_grad(self.activation, zs[k], hs[k + 1])
            grads[f"B{k}"] = gz.sum(axis=tuple(range(gz.ndim - 3)))
            grads[f"W{k}"] = np.einsum("niod,nioe->iode", _flat(hs[k], 3), _flat(gz, 3))
            gh = np.einsum("...ioe,iode->...iod", gz, self.W[k])
        gxb, gf_in = quantize_backward(gh[..., 0], xb, self.q_in, xq)
        grads["q_in.f_raw"] = gf_in
        self.grads = grads
        return gxb.sum(axis=-1)


def conv_index_map(in_spatial, kernel, stride, padding):
    """im2col gather map.

    Returns ``(out_spatial, idx)`` where ``idx`` has shape ``(*out_spatial, K)``
    and holds flat (row-major) indices into the unpadded input positions, or
    ``-1`` where the patch reads zero padding.  Patch element order is
    kernel-position-major, matching ``patch[k * C + c]``.
    """
    in_spatial = tuple(int(s) for s in in_spatial)
    kernel = tuple(int(k) for k in kernel)
    stride = tuple(int(s) for s in stride)
    if not len(in_spatial) == len(kernel) == len(stride):
        raise LayerError("kernel/stride rank must match the input's spatial rank")
    pads, out = [], []
    for n, k, s in zip(in_spatial, kernel, stride):
        if padding == "valid":
            before, o = 0, (n - k) // s + 1 if n >= k else 0
        elif padding == "same":
            o = -(-n // s)
            total = max((o - 1) * s + k - n, 0)
            before = total // 2
        else:
            raise LayerError(f"unknown padding {padding!r}")
        if o < 1:
            raise LayerError(f"kernel {kernel} is larger than the padded input {in_spatial}")
        pads.append(before)
        out.append(o)
    grids = np.meshgrid(*[np.arange(o) for o in out], *[np.arange(k) for k in kernel], indexing="ij")
    rank = len(kernel)
    valid = np.ones(grids[0].shape, dtype=bool)
    flat = np.zeros(grids[0].shape, dtype=np.int64)
    for d in range(rank):
        pos = grids[d] * stride[d] + grids[rank + d] - pads[d]
        valid &= (pos >= 0) & (pos < in_spatial[d])
        flat = flat * in_spatial[d] + np.clip(pos, 0, in_spatial[d] - 1)
    flat = np.where(valid, flat, -1)
    return tuple(out), flat.reshape(tuple(out) + (int(np.prod(kernel)),))


class LutConv(Layer):
    """im2col patch extraction followed by a LUT-Dense over each patch."""

    kind = "lut_conv"

    def __init__(self, channels: int, c_out: int, kernel_size, stride=1, padding: str = "valid",
                 inner: LutDense | None = None, **dense_kw):
        super().__init__()
        self.kernel_size = tuple(np.atleast_1d(kernel_size).astype(int).tolist())
        rank = len(self.kernel_size)
        st = np.atleast_1d(stride).astype(int).tolist()
        self.stride = tuple(st * rank if len(st) == 1 else st)
        if len(self.stride) != rank or rank not in (1, 2):
            raise LayerError("LUT-Conv supports 1-D and 2-D kernels")
        if padding not in ("valid", "same"):
            raise LayerError(f"unknown padding {padding!r}")
        self.padding = padding
        self.channels = int(channels)
        c_in = int(np.prod(self.kernel_size)) * self.channels
        self.inner = inner if inner is not None else LutDense(c_in, c_out, **dense_kw)
        if self.inner.c_in != c_in:
            raise LayerError("inner LUT-Dense c_in must equal kernel volume times channels")

    @property
    def c_out(self) -> int:
        return self.inner.c_out

    def params(self):
        return self.inner.params()

    def quantizers(self):
        return self.inner.quantizers()

    def index_map(self, in_spatial):
        return conv_index_map(in_spatial, self.kernel_size, self.stride, self.padding)

    def output_shape(self, input_shape):
        if len(input_shape) != len(self.kernel_size) + 1 or input_shape[-1] != self.channels:
            raise LayerError(f"LUT-Conv expects (*spatial, {self.channels}), got {input_shape}")
        out, _ = self.index_map(input_shape[:-1])
        return out + (self.c_out,)

    def im2col(self, x):
        rank = len(self.kernel_size)
        if x.ndim < rank + 1 or x.shape[-1] != self.channels:
            raise LayerError(f"LUT-Conv expects (..., *spatial, {self.channels}), got {x.shape}")
        spatial = x.shape[-rank - 1:-1]
        out, idx = self.index_map(spatial)
        lead = x.shape[:-rank - 1]
        flat = x.reshape(lead + (-1, self.channels))
        flat = np.concatenate([flat, np.zeros(lead + (1, self.channels))], axis=-2)
        gather = np.where(idx < 0, flat.shape[-2] - 1, idx)
        patches = flat[..., gather, :]
        return patches.reshape(lead + out + (-1,)), (spatial, gather, flat.shape[-2])

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=np.float64)
        patches, geom = self.im2col(x)
        y = self.inner.forward(patches, training)
        if training:
            self._cache = (x.shape, geom)
        return y

    def backward(self, grad):
        shape, (spatial, gather, n_flat) = self._need_cache()
        gp = self.inner.backward(grad)
        self.grads = self.inner.grads
        rank = len(self.kernel_size)
        lead = shape[:-rank - 1]
        idx = gather.reshape(-1)
        gp = np.moveaxis(gp.reshape(lead + (idx.size, self.channels)), -2, 0)
        gflat = np.zeros((n_flat,) + lead + (self.channels,))
        np.add.at(gflat, idx, gp)
        gflat = np.moveaxis(gflat, 0, -2)
        return gflat[..., :-1, :].reshape(shape)


class QDense(Layer):
    """Matmul dense layer with quantized activations, weights and bias."""

    kind = "qdense"

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator | None = None,
                 quantized: bool = True):
        super().__init__()
        self.c_in, self.c_out = int(c_in), int(c_out)
        rng = rng if rng is not None else np.random.default_rng(0)
        lim = math.sqrt(6.0 / (self.c_in + self.c_out))
        self.weights = rng.uniform(-lim, lim, (self.c_in, self.c_out))
        self.bias = np.zeros(self.c_out)
        self.q_act = QuantizerState((self.c_in,), SAT, TRN, enabled=quantized)
        self.q_w = QuantizerState((self.c_in, self.c_out), SAT, RND, enabled=quantized)
        self.q_b = QuantizerState((self.c_out,), SAT, RND, enabled=quantized)

    def params(self):
        return {"weights": self.weights, "bias": self.bias, "q_act.f_raw": self.q_act.f_raw,
                "q_w.f_raw": self.q_w.f_raw, "q_b.f_raw": self.q_b.f_raw}

    def quantizers(self):
        return {"q_act": self.q_act, "q_w": self.q_w, "q_b": self.q_b}

    def output_shape(self, input_shape):
        if input_shape[-1] != self.c_in:
            raise LayerError(f"QDense expects {self.c_in} input channels, got {input_shape[-1]}")
        return tuple(input_shape[:-1]) + (self.c_out,)

    def quantized_weights(self) -> tuple[np.ndarray, np.ndarray]:
        return quantize(self.weights, self.q_w), quantize(self.bias, self.q_b)

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.c_in:
            raise LayerError(f"QDense expects trailing dim {self.c_in}, got shape {x.shape}")
        if training:
            for name, arr in (("q_act", x), ("q_w", self.weights), ("q_b", self.bias)):
                q = getattr(self, name)
                if q.enabled:
                    setattr(self, name, calibrate(arr, q))
        else:
            for name, q in self.quantizers().items():
                if q.enabled and not q.calibrated:
                    raise LayerError(f"qdense.{name} is not calibrated; run a training pass first")
        xa = quantize(x, self.q_act)
        wq, bq = self.quantized_weights()
        y = xa @ wq + bq
        if training:
            self._cache = (x, xa, wq, bq)
        return y

    def backward(self, grad):
        x, xa, wq, bq = self._need_cache()
        g2 = grad.reshape(-1, self.c_out)
        gxa = grad @ wq.T
        gwq = xa.reshape(-1, self.c_in).T @ g2
        gbq = g2.sum(axis=0)
        gx, gf_act = quantize_backward(gxa, x, self.q_act, xa)
        gw, gf_w = quantize_backward(gwq, self.weights, self.q_w, wq)
        gb, gf_b = quantize_backward(gbq, self.bias, self.q_b, bq)
        self.grads = {"weights": gw, "bias": gb, "q_act.f_raw": gf_act,
                      "q_w.f_raw": gf_w, "q_b.f_raw": gf_b}
        return gx


class Activation(Layer):
    """Float-only point-wise nonlinearity (baselines; not lowerable)."""

    kind = "activation"

    def __init__(self, activation: str = "tanh"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise LayerError(f"unknown activation {activation!r}")
        self.activation = activation

    def forward(self, x, training=False):
        z = np.asarray(x, dtype=np.float64)
        a = _act(self.activation, z)
        if training:
            self._cache = (z, a)
        return a

    def backward(self, grad):
        z, a = self._need_cache()
        return grad * _act_grad(self.activation, z, a)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=np.float64)
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._need_cache())


class Sequential:
    """Chain of layers with a fixed per-sample input shape."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.provenance: dict = {}
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise LayerError(f"model expects samples of shape {self.input_shape}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    __call__ = forward

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{k}.{name}": arr for k, layer in enumerate(self.layers)
                for name, arr in layer.params().items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{k}.{name}": arr for k, layer in enumerate(self.layers)
                for name, arr in layer.grads.items()}

    def named_quantizers(self) -> dict[str, QuantizerState]:
        return {f"{k}.{name}": q for k, layer in enumerate(self.layers)
                for name, q in layer.quantizers().items()}

    def set_quantizers_enabled(self, enabled: bool):
        for q in self.named_quantizers().values():
            q.enabled = enabled

    def clip_frac_bits(self):
        for q in self.named_quantizers().values():
            np.clip(q.f_raw, q.min_f, q.max_f, out=q.f_raw)

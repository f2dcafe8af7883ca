"""Small feed-forward networks with a truncation-aware backward pass.

Layers own their parameter arrays; a Network is an ordered list of layers plus
a loss kind. The backward pass walks layers from the top and can stop early,
returning gradients for a contiguous suffix of layers only. Both full and
truncated backward run the exact same per-layer code in the same order, so the
suffix gradients they produce are bit-identical; this is what makes a cheap
partial backward a safe substitute during training of the top layers.

Losses: "mse" is the mean over the batch of 0.5 * ||out - target||^2 (the 0.5
makes the gradient out - target without a stray factor 2); "cross-entropy"
fuses softmax with the log loss and clamps probabilities at 1e-12 before the
log. Cross-entropy requires an identity-activation final layer producing
logits.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import ContractError, DomainError, ShapeError, StateError

PROB_FLOOR = 1e-12

_ACTIVATIONS = ("identity", "relu", "tanh")
_LOSSES = ("mse", "cross-entropy")


@dataclass(frozen=True, order=True)
class ParamId:
    """Identifies one parameter block: layer index plus role ("weight"/"bias")."""

    layer: int
    role: str


def _act(z, kind):
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    raise DomainError(f"unknown activation {kind!r}")


def _act_deriv(z, kind):
    if kind == "identity":
        return 1.0
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    raise DomainError(f"unknown activation {kind!r}")


class AffineLayer:
    """Fully connected layer: out = act(x @ weight + bias).

    weight has shape (n_in, n_out); bias (n_out,) or None.
    """

    def __init__(self, weight, bias=None, activation="identity"):
        if activation not in _ACTIVATIONS:
            raise DomainError(f"unknown activation {activation!r}")
        self.weight = linalg.tensor(weight)
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be rank 2, got shape {self.weight.shape}")
        self.bias = None if bias is None else linalg.tensor(bias)
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")
        self.activation = activation
        self._x = None
        self._z = None

    @property
    def n_in(self):
        return self.weight.shape[0]

    @property
    def n_out(self):
        return self.weight.shape[1]

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, x, counters=None):
        z = linalg.matmul(x, self.weight, counters)
        if self.bias is not None:
            z = z + self.bias
        self._x = x
        self._z = z
        if counters is not None:
            counters.forward_layer_visits += 1
        return _act(z, self.activation)

    def backward(self, delta_out, counters=None, need_dx=True):
        """Gradients from the post-activation delta; returns (grads, delta_in)."""
        if self._z is None:
            raise StateError("backward before forward on this layer")
        delta_z = delta_out * _act_deriv(self._z, self.activation)
        grads = {"weight": linalg.matmul(self._x.T, delta_z, counters)}
        if self.bias is not None:
            grads["bias"] = delta_z.sum(axis=0)
        dx = linalg.matmul(delta_z, self.weight.T, counters) if need_dx else None
        if counters is not None:
            counters.backward_layer_visits += 1
        return grads, dx

    def clear_cache(self):
        self._x = None
        self._z = None

    def spec(self):
        return {
            "kind": "affine",
            "n_in": self.n_in,
            "n_out": self.n_out,
            "bias": self.bias is not None,
            "activation": self.activation,
        }


class ConvLayer:
    """2-d convolution (valid padding) on flattened inputs, via im2col.

    Input rows are images flattened from (height, width, channels); output rows
    are flattened from (out_h, out_w, filters). weight has shape
    (k_h * k_w * channels, filters).
    """

    def __init__(self, in_shape, kernel, filters, weight, bias=None, stride=1, activation="identity"):
        if activation not in _ACTIVATIONS:
            raise DomainError(f"unknown activation {activation!r}")
        self.in_shape = tuple(int(v) for v in in_shape)
        if len(self.in_shape) != 3:
            raise ShapeError(f"in_shape must be (h, w, channels), got {in_shape}")
        self.kernel = tuple(int(v) for v in kernel)
        self.filters = int(filters)
        self.stride = int(stride)
        h, w, c = self.in_shape
        kh, kw = self.kernel
        if self.stride < 1 or kh < 1 or kw < 1:
            raise DomainError("kernel dims and stride must be >= 1")
        if kh > h or kw > w:
            raise ShapeError(f"kernel {self.kernel} larger than input {self.in_shape}")
        self.out_h = (h - kh) // self.stride + 1
        self.out_w = (w - kw) // self.stride + 1
        self.weight = linalg.tensor(weight)
        if self.weight.shape != (kh * kw * c, self.filters):
            raise ShapeError(
                f"weight shape {self.weight.shape}, expected {(kh * kw * c, self.filters)}"
            )
        self.bias = None if bias is None else linalg.tensor(bias)
        if self.bias is not None and self.bias.shape != (self.filters,):
            raise ShapeError(f"bias shape {self.bias.shape}, expected ({self.filters},)")
        self.activation = activation
        self._cols = None
        self._z = None
        self._batch = None

    @property
    def n_in(self):
        h, w, c = self.in_shape
        return h * w * c

    @property
    def n_out(self):
        return self.out_h * self.out_w * self.filters

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def _im2col(self, x):
        b = x.shape[0]
        h, w, c = self.in_shape
        kh, kw = self.kernel
        s = self.stride
        xr = x.reshape(b, h, w, c)
        cols = np.empty((b, self.out_h, self.out_w, kh, kw, c))
        for di in range(kh):
            for dj in range(kw):
                cols[:, :, :, di, dj, :] = xr[:, di : di + s * self.out_h : s, dj : dj + s * self.out_w : s, :]
        return cols.reshape(b * self.out_h * self.out_w, kh * kw * c)

    def forward(self, x, counters=None):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"input shape {x.shape}, expected (batch, {self.n_in})")
        b = x.shape[0]
        cols = self._im2col(x)
        z = linalg.matmul(cols, self.weight, counters)
        if self.bias is not None:
            z = z + self.bias
        self._cols = cols
        self._z = z
        self._batch = b
        if counters is not None:
            counters.forward_layer_visits += 1
        return _act(z, self.activation).reshape(b, self.n_out)

    def backward(self, delta_out, counters=None, need_dx=True):
        if self._z is None:
            raise StateError("backward before forward on this layer")
        b = self._batch
        delta_z = delta_out.reshape(b * self.out_h * self.out_w, self.filters) * _act_deriv(
            self._z, self.activation
        )
        grads = {"weight": linalg.matmul(self._cols.T, delta_z, counters)}
        if self.bias is not None:
            grads["bias"] = delta_z.sum(axis=0)
        dx = None
        if need_dx:
            dcols = linalg.matmul(delta_z, self.weight.T, counters)
            h, w, c = self.in_shape
            kh, kw = self.kernel
            s = self.stride
            dxr = np.zeros((b, h, w, c))
            dc = dcols.reshape(b, self.out_h, self.out_w, kh, kw, c)
            for di in range(kh):
                for dj in range(kw):
                    dxr[:, di : di + s * self.out_h : s, dj : dj + s * self.out_w : s, :] += dc[
                        :, :, :, di, dj, :
                    ]
            dx = dxr.reshape(b, h * w * c)
        if counters is not None:
            counters.backward_layer_visits += 1
        return grads, dx

    def clear_cache(self):
        self._cols = None
        self._z = None
        self._batch = None

    def spec(self):
        return {
            "kind": "conv",
            "in_shape": list(self.in_shape),
            "kernel": list(self.kernel),
            "filters": self.filters,
            "stride": self.stride,
            "bias": self.bias is not None,
            "activation": self.activation,
        }


class Network:
    """Ordered layer stack plus a loss kind."""

    def __init__(self, layers, loss):
        if loss not in _LOSSES:
            raise DomainError(f"unknown loss {loss!r}")
        if not layers:
            raise ContractError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        if loss == "cross-entropy" and layers[-1].activation != "identity":
            raise ContractError("cross-entropy expects an identity-activation output layer (logits)")
        self.layers = list(layers)
        self.loss = loss
        self._out = None

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def n_params(self):
        return sum(p.size for layer in self.layers for p in layer.params().values())

    def param_ids(self):
        ids = []
        for i, layer in enumerate(self.layers):
            for role in layer.params():
                ids.append(ParamId(i, role))
        return ids

    def get_param(self, pid):
        try:
            return self.layers[pid.layer].params()[pid.role]
        except (IndexError, KeyError):
            raise ContractError(f"no parameter block {pid}") from None

    def set_param(self, pid, value):
        arr = self.get_param(pid)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != arr.shape:
            raise ShapeError(f"{pid}: shape {value.shape}, expected {arr.shape}")
        arr[...] = value

    def params(self):
        """Live views of every parameter block, keyed by ParamId."""
        return {pid: self.get_param(pid) for pid in self.param_ids()}

    def clear_cache(self):
        for layer in self.layers:
            layer.clear_cache()
        self._out = None


def forward(net, x, counters=None):
    """Run the batch through all layers; caches activations for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be rank 2, got shape {x.shape}")
    if x.shape[1] != net.layers[0].n_in:
        raise ShapeError(f"batch width {x.shape[1]}, network expects {net.layers[0].n_in}")
    out = x
    for layer in net.layers:
        out = layer.forward(out, counters)
    net._out = out
    return out


def softmax(z):
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=1, keepdims=True)


def loss_value(net, targets):
    """Loss of the cached forward output against targets."""
    if net._out is None:
        raise StateError("no cached forward pass")
    out = net._out
    if net.loss == "cross-entropy":
        y = np.asarray(targets)
        if y.ndim != 1 or y.shape[0] != out.shape[0]:
            raise ShapeError(f"labels shape {y.shape}, expected ({out.shape[0]},)")
        p = softmax(out)[np.arange(out.shape[0]), y]
        return float(-np.log(np.maximum(p, PROB_FLOOR)).mean())
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != out.shape:
        raise ShapeError(f"targets shape {y.shape}, expected {out.shape}")
    d = out - y
    return float(0.5 * (d * d).sum(axis=1).mean())


def loss_eval(net, x, targets, counters=None):
    """Forward plus loss in one call."""
    forward(net, x, counters)
    return loss_value(net, targets)


def _output_delta(net, targets):
    out = net._out
    b = out.shape[0]
    if net.loss == "cross-entropy":
        y = np.asarray(targets)
        delta = softmax(out)
        delta[np.arange(b), y] -= 1.0
        return delta / b
    return (out - np.asarray(targets, dtype=np.float64)) / b


def _backward(net, targets, stop_layer, counters):
    if net._out is None:
        raise StateError("backward before forward")
    delta = _output_delta(net, targets)
    grads = {}
    for i in range(net.n_layers - 1, stop_layer - 1, -1):
        layer = net.layers[i]
        layer_grads, delta = layer.backward(delta, counters, need_dx=i > stop_layer)
        for role, g in layer_grads.items():
            grads[ParamId(i, role)] = g
    return grads


def backward_full(net, targets, counters=None):
    """Gradients for every parameter block of the cached forward pass."""
    return _backward(net, targets, 0, counters)


def backward_truncated(net, targets, n_suffix_layers, counters=None):
    """Gradients for the top ``n_suffix_layers`` layers only.

    Runs the same code path as backward_full, stopped early, so the returned
    gradients match the full pass bit for bit. n_suffix_layers == 0 returns an
    empty map without touching the network.
    """
    if not 0 <= n_suffix_layers <= net.n_layers:
        raise ContractError(
            f"suffix length {n_suffix_layers} out of range for {net.n_layers} layers"
        )
    if n_suffix_layers == 0:
        return {}
    return _backward(net, targets, net.n_layers - n_suffix_layers, counters)


def predict_classes(net, x, batch_size=1000):
    """Argmax class predictions, evaluated in chunks; does not touch counters."""
    out = []
    for start in range(0, x.shape[0], batch_size):
        out.append(np.argmax(forward(net, x[start : start + batch_size]), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net, x, labels, batch_size=1000):
    return float((predict_classes(net, x, batch_size) == np.asarray(labels)).mean())


def mean_loss(net, x, targets, batch_size=1000):
    """Mean loss over a dataset, evaluated in chunks; does not touch counters."""
    n = x.shape[0]
    total = 0.0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        total += loss_eval(net, x[start:stop], targets[start:stop]) * (stop - start)
    return total / n


def flatten_params(net):
    return np.concatenate([net.get_param(pid).ravel() for pid in net.param_ids()])


def set_params_from_flat(net, vec):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != net.n_params:
        raise ShapeError(f"flat vector has {vec.size} entries, network has {net.n_params}")
    ofs = 0
    for pid in net.param_ids():
        arr = net.get_param(pid)
        arr[...] = vec[ofs : ofs + arr.size].reshape(arr.shape)
        ofs += arr.size


def init_affine(n_in, n_out, rng, bias=True, activation="identity"):
    """Affine layer with uniform(-1/sqrt(n_in), 1/sqrt(n_in)) init."""
    bound = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-bound, bound, (n_in, n_out))
    b = rng.uniform(-bound, bound, (n_out,)) if bias else None
    return AffineLayer(w, b, activation)


def init_conv(in_shape, kernel, filters, rng, bias=True, stride=1, activation="identity"):
    """Conv layer with uniform init scaled by the receptive-field fan-in."""
    kh, kw = kernel
    fan_in = kh * kw * in_shape[2]
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, (fan_in, filters))
    b = rng.uniform(-bound, bound, (filters,)) if bias else None
    return ConvLayer(in_shape, kernel, filters, w, b, stride, activation)


def mlp(layer_sizes, rng, hidden_activation="tanh", loss="cross-entropy", bias=True):
    """Fully connected net; hidden layers share one activation, output is identity."""
    if len(layer_sizes) < 2:
        raise ContractError("need at least input and output sizes")
    layers = []
    for i in range(len(layer_sizes) - 1):
        act = hidden_activation if i < len(layer_sizes) - 2 else "identity"
        layers.append(init_affine(layer_sizes[i], layer_sizes[i + 1], rng, bias, act))
    return Network(layers, loss)


def numeric_gradient(net, x, targets, eps=1e-5):
    """Central-difference gradient of the mean loss, one coordinate at a time."""
    base = flatten_params(net)
    grad = np.zeros_like(base)
    for j in range(base.size):
        step = np.zeros_like(base)
        step[j] = eps
        set_params_from_flat(net, base + step)
        up = loss_eval(net, x, targets)
        set_params_from_flat(net, base - step)
        down = loss_eval(net, x, targets)
        grad[j] = (up - down) / (2.0 * eps)
    set_params_from_flat(net, base)
    net.clear_cache()
    return grad


def _layer_from_spec(spec, arrays, idx):
    kind = spec["kind"]
    w = arrays[f"layer{idx}_weight"]
    b = arrays.get(f"layer{idx}_bias")
    if kind == "affine":
        return AffineLayer(w, b, spec["activation"])
    if kind == "conv":
        return ConvLayer(
            spec["in_shape"], spec["kernel"], spec["filters"], w, b, spec["stride"], spec["activation"]
        )
    raise ContractError(f"unknown layer kind {kind!r}")


def save_network(net, path):
    """Write architecture plus parameters to one .npz file."""
    meta = {"loss": net.loss, "layers": [layer.spec() for layer in net.layers]}
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for i, layer in enumerate(net.layers):
        for role, arr in layer.params().items():
            arrays[f"layer{i}_{role}"] = arr
    np.savez(path, **arrays)


def load_network(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        arrays = {k: data[k] for k in data.files if k != "meta"}
    layers = [_layer_from_spec(spec, arrays, i) for i, spec in enumerate(meta["layers"])]
    return Network(layers, meta["loss"])

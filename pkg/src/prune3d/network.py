"""A small sequential 3D CNN with hand-written backward passes and plain SGD.

Every layer caches what it needs during ``forward`` and writes parameter
gradients during ``backward``. Parameter tensors live in ``layer.params`` and
their gradients in ``layer.grads`` under the same keys (``"W"``, ``"b"``).
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, PlanInconsistencyError, ShapeError, UsageError
from .tensor_core import ConvSpec, col2im3d_batch, im2col3d_batch

__all__ = [
    "Conv3D",
    "CompactConv3D",
    "Dataset",
    "Flatten",
    "FullyConnected",
    "MaxPool3D",
    "Network",
    "ReLU",
    "SoftmaxCrossEntropy",
    "TrainConfig",
    "backward",
    "build_toy_net",
    "evaluate",
    "forward",
    "numerical_gradient",
    "sgd_step",
    "train",
]


class Layer:
    kind = "layer"
    # the first layer of a network skips computing the gradient w.r.t. its input
    needs_input_grad = True

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.grads = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def output_shape(self, in_shape):
        """Per-sample output shape for a per-sample input shape."""
        return in_shape

    def astype(self, dtype):
        for k, v in self.params.items():
            self.params[k] = v.astype(dtype)
        return self

    def config(self):
        return {}


class Conv3D(Layer):
    """3D convolution computed as im2col + GEMM.

    ``weight_mask`` (same shape as ``W``), when set, is re-applied after every
    SGD update so pruned weights stay exactly zero.
    """

    kind = "conv3d"

    def __init__(self, name, spec, W=None, b=None, rng=None, dtype=np.float32):
        super().__init__(name)
        self.spec = spec
        if W is None:
            rng = np.random.default_rng(0) if rng is None else rng
            fan_in = spec.rows
            bound = np.sqrt(6.0 / fan_in)
            W = rng.uniform(-bound, bound, size=spec.weight_shape)
        W = np.asarray(W, dtype=dtype)
        if W.shape != spec.weight_shape:
            raise ShapeError(f"{name}: weights {W.shape} do not match spec {spec.weight_shape}")
        if b is None:
            b = np.zeros(spec.out_filters)
        self.params = {"W": W, "b": np.asarray(b, dtype=dtype)}
        self.weight_mask = None
        self._cache = None

    @property
    def weight_matrix(self):
        return self.params["W"].reshape(self.spec.out_filters, -1)

    def output_shape(self, in_shape):
        c, d, h, w = in_shape
        if c != self.spec.in_channels:
            raise ShapeError(f"{self.name}: input has {c} channels, expected {self.spec.in_channels}")
        return (self.spec.out_filters,) + self.spec.output_dhw(d, h, w)

    def _columns(self, x):
        return im2col3d_batch(x, self.spec)

    def forward(self, x):
        b = x.shape[0]
        out_shape = self.output_shape(x.shape[1:])
        cols = self._columns(x)
        y = np.matmul(self.weight_matrix, cols) + self.params["b"][:, None]
        self._cache = (x.shape, cols)
        return y.reshape((b,) + out_shape)

    def _scatter_columns(self, dcols, x_shape):
        return col2im3d_batch(dcols, self.spec, x_shape[2:])

    def backward(self, dy):
        x_shape, cols = self._cache
        b, n = dy.shape[:2]
        dy = dy.reshape(b, n, -1)
        W = self.params["W"]
        self.grads["W"] = np.matmul(dy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(W.shape)
        self.grads["b"] = dy.sum(axis=(0, 2))
        if not self.needs_input_grad:
            return None
        dcols = np.matmul(self.weight_matrix.T, dy)
        return self._scatter_columns(dcols, x_shape)

    def config(self):
        return {"spec": self.spec.to_dict()}


class CompactConv3D(Conv3D):
    """Shape-shrunk convolution: only the im2col rows listed in ``keep`` survive.

    ``W`` is stored directly as an ``(N, len(keep))`` matrix.
    """

    kind = "conv3d_compact"

    def __init__(self, name, spec, keep, W, b, dtype=np.float32):
        Layer.__init__(self, name)
        self.spec = spec
        self.keep = np.asarray(keep, dtype=np.int64)
        W = np.asarray(W, dtype=dtype)
        if W.shape != (spec.out_filters, len(self.keep)):
            raise ShapeError(f"{name}: compact weights {W.shape} do not match "
                             f"({spec.out_filters}, {len(self.keep)})")
        self.params = {"W": W, "b": np.asarray(b, dtype=dtype)}
        self.weight_mask = None
        self._cache = None

    @property
    def weight_matrix(self):
        return self.params["W"]

    def _columns(self, x):
        return im2col3d_batch(x, self.spec)[:, self.keep, :]

    def _scatter_columns(self, dcols, x_shape):
        full = np.zeros((dcols.shape[0], self.spec.rows, dcols.shape[2]), dtype=dcols.dtype)
        full[:, self.keep, :] = dcols
        return col2im3d_batch(full, self.spec, x_shape[2:])

    def config(self):
        return {"spec": self.spec.to_dict(), "keep": self.keep.tolist()}


class MaxPool3D(Layer):
    """Max pooling; on ties the gradient goes to the first maximal tap."""

    kind = "maxpool3d"

    def __init__(self, name, kernel=(2, 2, 2), stride=None):
        super().__init__(name)
        self.kernel = tuple(int(k) for k in kernel)  # (w, h, d)
        self.stride = self.kernel if stride is None else tuple(int(s) for s in stride)
        self._cache = None

    def output_shape(self, in_shape):
        c, d, h, w = in_shape
        out = []
        for size, k, s in zip((d, h, w), self.kernel[::-1], self.stride[::-1]):
            o = (size - k) // s + 1
            if o < 1:
                raise ShapeError(f"{self.name}: pooling window larger than input {in_shape}")
            out.append(o)
        return (c,) + tuple(out)

    def forward(self, x):
        kw, kh, kd = self.kernel
        sw, sh, sd = self.stride
        _, do, ho, wo = self.output_shape(x.shape[1:])
        win = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
        win = win[:, :, ::sd, ::sh, ::sw][:, :, :do, :ho, :wo]
        win = win.reshape(win.shape[:5] + (-1,))
        arg = win.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, arg)
        return y

    def backward(self, dy):
        x_shape, arg = self._cache
        kw, kh, kd = self.kernel
        sw, sh, sd = self.stride
        _, _, do, ho, wo = dy.shape
        dx = np.zeros(x_shape, dtype=dy.dtype)
        tap = 0
        for di in range(kd):
            for hi in range(kh):
                for wi in range(kw):
                    sel = np.where(arg == tap, dy, 0)
                    dx[:, :, di:di + sd * do:sd, hi:hi + sh * ho:sh, wi:wi + sw * wo:sw] += sel
                    tap += 1
        return dx

    def config(self):
        return {"kernel": list(self.kernel), "stride": list(self.stride)}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy):
        return np.where(self._mask, dy, 0).astype(dy.dtype, copy=False)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class FullyConnected(Layer):
    kind = "fully_connected"

    def __init__(self, name, n_in, n_out, W=None, b=None, rng=None, dtype=np.float32):
        super().__init__(name)
        if W is None:
            rng = np.random.default_rng(0) if rng is None else rng
            bound = np.sqrt(6.0 / n_in)
            W = rng.uniform(-bound, bound, size=(n_out, n_in))
        if b is None:
            b = np.zeros(n_out)
        W = np.asarray(W, dtype=dtype)
        if W.shape != (n_out, n_in):
            raise ShapeError(f"{name}: weights {W.shape} do not match ({n_out}, {n_in})")
        self.params = {"W": W, "b": np.asarray(b, dtype=dtype)}

    @property
    def n_in(self):
        return self.params["W"].shape[1]

    @property
    def n_out(self):
        return self.params["W"].shape[0]

    def output_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise ShapeError(f"{self.name}: input shape {in_shape}, expected ({self.n_in},)")
        return (self.n_out,)

    def forward(self, x):
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dy):
        self.grads["W"] = dy.T @ self._x
        self.grads["b"] = dy.sum(axis=0)
        return dy @ self.params["W"]

    def config(self):
        return {"n_in": self.n_in, "n_out": self.n_out}


class SoftmaxCrossEntropy(Layer):
    """Mean cross-entropy over the batch. Must be the last layer."""

    kind = "softmax_cross_entropy"

    def forward(self, logits, labels):
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        self._p = np.exp(logp)
        self._labels = labels
        return float(-logp[np.arange(len(labels)), labels].mean())

    def backward(self, dy=1.0):
        g = self._p.copy()
        g[np.arange(len(self._labels)), self._labels] -= 1.0
        return g * (dy / len(self._labels))


class Network:
    """Ordered list of layers ending in a :class:`SoftmaxCrossEntropy` node."""

    def __init__(self, layers, input_shape):
        if not layers or not isinstance(layers[-1], SoftmaxCrossEntropy):
            raise ShapeError("network must end with exactly one softmax_cross_entropy node")
        if any(isinstance(l, SoftmaxCrossEntropy) for l in layers[:-1]):
            raise ShapeError("network must contain exactly one loss node")
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate layer names in {names}")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        # when set, forward/backward keep every layer output and its gradient
        self.record = False
        self.input_grad = False
        self.input_gradient = None
        self.activations = {}
        self.output_grads = {}
        self.check_shapes()

    def check_shapes(self):
        shape = self.input_shape
        shapes = [shape]
        for layer in self.layers[:-1]:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    def __getitem__(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index(self, name):
        return [l.name for l in self.layers].index(name)

    @property
    def conv_layers(self):
        return [l for l in self.layers if isinstance(l, Conv3D)]

    @property
    def loss_layer(self):
        return self.layers[-1]

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def copy(self):
        import copy
        return copy.deepcopy(self)

    def logits(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match network input {self.input_shape}")
        h = x
        self.activations = {}
        for layer in self.layers[:-1]:
            h = layer.forward(h)
            if not np.all(np.isfinite(h)):
                raise NumericError(f"non-finite activations after layer {layer.name!r}")
            if self.record:
                self.activations[layer.name] = h
        return h

    def forward(self, x, labels):
        logits = self.logits(x)
        loss = self.loss_layer.forward(logits, np.asarray(labels))
        if not np.isfinite(loss):
            raise NumericError("non-finite loss")
        return logits, loss

    def backward(self):
        """Back-propagate the data loss of the last ``forward`` call."""
        g = self.loss_layer.backward()
        self.output_grads = {}
        for i in range(len(self.layers) - 2, -1, -1):
            layer = self.layers[i]
            if self.record:
                self.output_grads[layer.name] = g
            layer.needs_input_grad = i > 0 or self.input_grad
            g = layer.backward(g)
        self.input_gradient = g
        return {l.name: dict(l.grads) for l in self.layers if l.params}

    def predict(self, x, batch_size=256):
        preds = []
        for i in range(0, len(x), batch_size):
            preds.append(np.argmax(self.logits(x[i:i + batch_size]), axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def forward(net, batch, labels):
    """Returns ``(logits, mean cross-entropy)``."""
    return net.forward(batch, labels)


def backward(net, batch, labels):
    """Gradients of the data loss only, keyed ``{layer: {"W": ..., "b": ...}}``.

    Runs a forward pass on ``batch`` first so the caches are consistent.
    """
    net.forward(batch, labels)
    return net.backward()


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    weight_decay: float = 5e-4
    batch_size: int = 32
    iterations: int = 600
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise UsageError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be non-negative, got {self.weight_decay}")


def _structured_coefficients(layer, entry):
    """Per-weight structured coefficient ``lambda_g(w)`` for one conv layer."""
    partition, lambdas = entry
    lambdas = np.asarray(lambdas)
    W = layer.params["W"]
    if tuple(partition.weight_shape) != W.shape:
        raise PlanInconsistencyError(
            f"{layer.name}: partition covers shape {partition.weight_shape}, weights are {W.shape}")
    if lambdas.shape != (partition.n_groups,):
        raise PlanInconsistencyError(
            f"{layer.name}: {lambdas.shape[0] if lambdas.ndim else 0} lambda values for "
            f"{partition.n_groups} groups")
    return lambdas[partition.group_index]


def sgd_step(net, grads, cfg, lambda_map=None):
    """One SGD update with weight decay plus the per-group structured decay.

    ``w <- w - lr * (dL/dw + lambda * w + lambda_g(w) * w)``. ``lambda_map`` maps
    a conv layer name to ``(GroupPartition, per-group lambdas)``; biases get
    neither weight decay nor structured decay.
    """
    lambda_map = lambda_map or {}
    unknown = set(lambda_map) - {l.name for l in net.conv_layers}
    if unknown:
        raise PlanInconsistencyError(f"lambda_map names unknown conv layers: {sorted(unknown)}")
    lr = cfg.learning_rate
    for layer in net.layers:
        if not layer.params:
            continue
        g = grads[layer.name]
        W = layer.params["W"]
        decay = cfg.weight_decay
        if layer.name in lambda_map:
            decay = decay + _structured_coefficients(layer, lambda_map[layer.name])
        W -= (lr * (g["W"] + decay * W)).astype(W.dtype, copy=False)
        layer.params["b"] -= (lr * g["b"]).astype(W.dtype, copy=False)
        mask = getattr(layer, "weight_mask", None)
        if mask is not None:
            W *= mask
    return net


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.num_classes is None:
            self.num_classes = int(self.y.max()) + 1 if len(self.y) else 0

    def __len__(self):
        return len(self.y)


def evaluate(net, dataset, batch_size=256):
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(dataset) == 0:
        raise UsageError("evaluate: empty dataset")
    preds = net.predict(dataset.x, batch_size)
    return float(np.mean(preds == dataset.y))


class BatchStream:
    """Deterministic reshuffled mini-batches, one fresh permutation per epoch."""

    def __init__(self, dataset, batch_size, seed):
        self.dataset = dataset
        self.batch_size = min(batch_size, len(dataset))
        self.rng = np.random.default_rng(seed)
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self):
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.dataset))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.dataset.x[idx], self.dataset.y[idx]


def train(net, dataset, cfg, lambda_map=None, callback=None):
    """Plain SGD for ``cfg.iterations`` steps. Returns the per-iteration losses."""
    stream = BatchStream(dataset, cfg.batch_size, cfg.seed)
    losses = []
    for it in range(cfg.iterations):
        xb, yb = stream.next()
        _, loss = net.forward(xb, yb)
        grads = net.backward()
        sgd_step(net, grads, cfg, lambda_map)
        losses.append(loss)
        if callback is not None:
            callback(it, loss)
    return losses


def numerical_gradient(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (modified in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = f()
        x[i] = orig - eps
        fm = f()
        x[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def build_toy_net(input_shape=(2, 8, 16, 16), num_classes=4, filters=(8, 16, 32), seed=0,
                  dtype=np.float32):
    """Three 3x3x3 conv layers with 2x2x2 pooling after the first two, then one FC layer.

    ``input_shape`` is ``(c, d, h, w)``.
    """
    rng = np.random.default_rng(seed)
    c = input_shape[0]
    layers = []
    for i, n in enumerate(filters, start=1):
        spec = ConvSpec(c, n, (3, 3, 3), (1, 1, 1), (1, 1, 1))
        layers.append(Conv3D(f"conv{i}", spec, rng=rng, dtype=dtype))
        layers.append(ReLU(f"relu{i}"))
        if i < len(filters):
            layers.append(MaxPool3D(f"pool{i}", (2, 2, 2)))
        c = n
    layers.append(Flatten("flatten"))
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.output_shape(shape)
    layers.append(FullyConnected("fc", shape[0], num_classes, rng=rng, dtype=dtype))
    layers.append(SoftmaxCrossEntropy("loss"))
    return Network(layers, input_shape)

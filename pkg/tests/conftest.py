import numpy as np
import pytest

from prune3d.network import (
    CompactConv3D,
    Conv3D,
    Dataset,
    Flatten,
    FullyConnected,
    MaxPool3D,
    Network,
    ReLU,
    SoftmaxCrossEntropy,
    numerical_gradient,
)
from prune3d.tensor_core import ConvSpec


def random_net(rng, compact=False, dtype=np.float64):
    """Small random float64 net exercising every layer kind.

    Returns ``(net, x, labels)``.
    """
    c_in = int(rng.integers(1, 3))
    d, h, w = (int(v) for v in rng.integers(4, 6, size=3))
    n1 = int(rng.integers(2, 4))
    n2 = int(rng.integers(2, 4))
    stride = tuple(int(s) for s in rng.integers(1, 3, size=3))
    spec1 = ConvSpec(c_in, n1, (3, 3, 3), stride, (1, 1, 1))
    layers = [Conv3D("conv1", spec1, rng=rng, dtype=dtype), ReLU("relu1")]
    shape = layers[0].output_shape((c_in, d, h, w))
    if min(shape[1:]) >= 2:
        layers.append(MaxPool3D("pool1", (2, 2, 2), (1, 1, 1)))
        shape = layers[-1].output_shape(shape)
    spec2 = ConvSpec(n1, n2, (2, 2, 2), (1, 1, 1), (1, 1, 1))
    if compact:
        keep = np.sort(rng.choice(spec2.rows, size=max(1, spec2.rows // 2), replace=False))
        W = rng.normal(0, 0.5, size=(n2, len(keep)))
        layers.append(CompactConv3D("conv2", spec2, keep, W, rng.normal(0, 0.1, n2), dtype=dtype))
    else:
        layers.append(Conv3D("conv2", spec2, rng=rng, dtype=dtype))
    layers.append(ReLU("relu2"))
    layers.append(Flatten("flatten"))
    net_shape = (c_in, d, h, w)
    shape = net_shape
    for layer in layers:
        shape = layer.output_shape(shape)
    layers.append(FullyConnected("fc", shape[0], 3, rng=rng, dtype=dtype))
    layers.append(SoftmaxCrossEntropy("loss"))
    for layer in layers:
        if "b" in layer.params:
            layer.params["b"][...] = rng.normal(0, 0.1, size=layer.params["b"].shape)
    net = Network(layers, net_shape)
    x = rng.normal(size=(2,) + net_shape)
    labels = rng.integers(0, 3, size=2)
    return net, x, labels


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(net, x, labels, eps=1e-5):
    """Largest relative error between analytic and central-difference gradients.

    Covers every parameter and the input. Returns ``{key: error}``.
    """
    net.input_grad = True
    net.forward(x, labels)
    grads = net.backward()
    dx = net.input_gradient.copy()
    net.input_grad = False

    def loss():
        return net.forward(x, labels)[1]

    out = {}
    for layer in net.layers:
        for pname, value in layer.params.items():
            num = numerical_gradient(loss, value, eps)
            out[f"{layer.name}.{pname}"] = relative_error(grads[layer.name][pname], num)
    out["input"] = relative_error(dx, numerical_gradient(loss, x, eps))
    return out


def toy_dataset(n=40, shape=(1, 3, 3, 3), classes=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n,) + shape).astype(np.float32), rng.integers(0, classes, size=n), classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Store one acceptance line; printed after the run by the summary hook."""
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    ACCEPTANCE[number] = f"ACCEPTANCE criterion {number}: {status}  {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])

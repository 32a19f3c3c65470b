"""Model files: a JSON manifest plus one raw little-endian float32 blob per parameter.

The manifest lists the layers in order with their configuration, points at
the blobs, and optionally carries the group masks of a pruned (unshrunk)
network and the shrink records of a compacted one. Blobs are written with
``tobytes`` and read with ``frombuffer`` so a save/load cycle is bit-exact.
"""

import json
import os

import numpy as np

from .errors import PruneIOError, UsageError
from .groups import GroupMask, apply_mask, partition
from .network import (
    CompactConv3D,
    Conv3D,
    Flatten,
    FullyConnected,
    MaxPool3D,
    Network,
    ReLU,
    SoftmaxCrossEntropy,
)
from .tensor_core import ConvSpec

FORMAT = "prune3d-model/1"
MANIFEST_NAME = "manifest.json"


def _layer_entry(layer):
    entry = {"name": layer.name, "kind": layer.kind}
    entry.update(layer.config())
    return entry


def save_model(net, out_dir, masks=None, records=None, meta=None):
    """Write ``net`` to ``out_dir``; returns the manifest path.

    ``masks`` maps conv layer names to :class:`~prune3d.groups.GroupMask`,
    ``records`` is the list returned by :func:`~prune3d.groups.shrink_network`
    and ``meta`` is any JSON-serialisable dict (accuracy, config, ...).
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise PruneIOError(f"cannot create {out_dir!r}: {exc}") from exc
    layers = []
    for layer in net.layers:
        entry = _layer_entry(layer)
        blobs = {}
        for pname, value in layer.params.items():
            arr = np.ascontiguousarray(value, dtype="<f4")
            fname = f"{layer.name}.{pname}.bin"
            with open(os.path.join(out_dir, fname), "wb") as fh:
                fh.write(arr.tobytes())
            blobs[pname] = {"file": fname, "shape": list(arr.shape)}
        if blobs:
            entry["blobs"] = blobs
        layers.append(entry)
    doc = {
        "format": FORMAT,
        "input_shape": list(net.input_shape),
        "layers": layers,
        "masks": {name: m.to_dict() for name, m in (masks or {}).items()},
        "shrink_records": list(records or []),
        "meta": meta or {},
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return path


def _read_blob(root, ref):
    path = os.path.join(root, ref["file"])
    shape = tuple(ref["shape"])
    count = int(np.prod(shape))
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise PruneIOError(f"missing weight blob {path!r}: {exc}") from exc
    if len(raw) != count * 4:
        raise UsageError(f"{path}: blob has {len(raw)} bytes, expected {count * 4}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _build_layer(entry, params):
    kind = entry["kind"]
    name = entry["name"]
    if kind == "conv3d":
        return Conv3D(name, ConvSpec.from_dict(entry["spec"]), params["W"], params["b"])
    if kind == "conv3d_compact":
        return CompactConv3D(name, ConvSpec.from_dict(entry["spec"]), entry["keep"], params["W"], params["b"])
    if kind == "maxpool3d":
        return MaxPool3D(name, entry["kernel"], entry["stride"])
    if kind == "relu":
        return ReLU(name)
    if kind == "flatten":
        return Flatten(name)
    if kind == "fully_connected":
        return FullyConnected(name, entry["n_in"], entry["n_out"], params["W"], params["b"])
    if kind == "softmax_cross_entropy":
        return SoftmaxCrossEntropy(name)
    raise UsageError(f"unknown layer kind {kind!r} in manifest")


def load_model(path):
    """Read a model directory (or its manifest file).

    Returns ``(net, masks, records, meta)``. Masks are re-attached to their
    conv layers so further training keeps pruned groups at zero.
    """
    manifest = os.path.join(path, MANIFEST_NAME) if os.path.isdir(path) else path
    root = os.path.dirname(manifest)
    try:
        with open(manifest) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise PruneIOError(f"cannot read model manifest {manifest!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{manifest}: invalid JSON ({exc})") from exc
    if doc.get("format") != FORMAT:
        raise UsageError(f"{manifest}: unsupported format {doc.get('format')!r}, expected {FORMAT!r}")
    layers = []
    for entry in doc["layers"]:
        params = {k: _read_blob(root, ref) for k, ref in entry.get("blobs", {}).items()}
        layers.append(_build_layer(entry, params))
    net = Network(layers, doc["input_shape"])
    masks = {}
    for name, m in doc.get("masks", {}).items():
        layer = net[name]
        part = partition(layer.params["W"], m["scheme"], layer=name)
        if part.n_groups != m["n_groups"]:
            raise UsageError(f"{manifest}: mask for {name} has {m['n_groups']} groups, layer has {part.n_groups}")
        mask = GroupMask.from_indices(part, m["pruned"])
        apply_mask(layer, mask, freeze=True)
        masks[name] = mask
    return net, masks, doc.get("shrink_records", []), doc.get("meta", {})

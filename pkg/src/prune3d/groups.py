"""Weight groups of a conv layer, their L1 norms, masking and dense shrinking.

Three schemes are supported:

* ``filter``  -- one group per output filter (row of the im2col weight matrix)
* ``shape``   -- one group per kernel tap ``(c, kd, kh, kw)`` across all filters
  (column of the im2col weight matrix)
* ``channel`` -- one group per input channel
"""

from dataclasses import dataclass

import numpy as np

from .errors import PlanInconsistencyError, ShapeError, UnsupportedError, UsageError
from .network import CompactConv3D, Conv3D, Flatten, FullyConnected, MaxPool3D, Network, ReLU

SCHEMES = ("filter", "shape", "channel")


@dataclass
class GroupPartition:
    """Disjoint cover of a layer's weights.

    ``group_index`` has the weight tensor's shape; entry ``i`` is the group id
    of weight ``i``.
    """

    layer: str
    scheme: str
    weight_shape: tuple
    group_index: np.ndarray
    n_groups: int

    def members(self, g):
        """Flat (row-major) weight indices belonging to group ``g``."""
        return np.flatnonzero(self.group_index.ravel() == g)

    def sizes(self):
        return np.bincount(self.group_index.ravel(), minlength=self.n_groups)


def partition(weights, scheme="shape", layer=None):
    """Partition a ``(N, C, kd, kh, kw)`` weight tensor into groups."""
    if scheme not in SCHEMES:
        raise UsageError(f"unsupported group scheme {scheme!r}; expected one of {SCHEMES}")
    shape = tuple(np.shape(weights))
    if len(shape) != 5:
        raise ShapeError(f"conv weights must be 5-D, got shape {shape}")
    n, c = shape[:2]
    per_filter = int(np.prod(shape[1:]))
    if scheme == "filter":
        index = np.repeat(np.arange(n), per_filter).reshape(shape)
        count = n
    elif scheme == "shape":
        # column of the (N, C*kd*kh*kw) im2col weight matrix
        index = np.tile(np.arange(per_filter), n).reshape(shape)
        count = per_filter
    else:
        index = np.broadcast_to(np.arange(c).reshape(1, c, 1, 1, 1), shape).copy()
        count = c
    return GroupPartition(layer, scheme, shape, index, count)


def group_l1(weights, part):
    """Sum of ``|w|`` over each group."""
    weights = np.asarray(weights)
    if weights.shape != tuple(part.weight_shape):
        raise ShapeError(f"weights {weights.shape} do not match partition {part.weight_shape}")
    return np.bincount(part.group_index.ravel(), weights=np.abs(weights).ravel().astype(np.float64),
                       minlength=part.n_groups)


@dataclass
class GroupMask:
    partition: GroupPartition
    pruned: np.ndarray

    def __post_init__(self):
        self.pruned = np.asarray(self.pruned, dtype=bool)
        if self.pruned.shape != (self.partition.n_groups,):
            raise PlanInconsistencyError(
                f"mask has {self.pruned.size} flags for {self.partition.n_groups} groups")

    @classmethod
    def empty(cls, part):
        return cls(part, np.zeros(part.n_groups, dtype=bool))

    @classmethod
    def from_indices(cls, part, indices):
        pruned = np.zeros(part.n_groups, dtype=bool)
        pruned[np.asarray(list(indices), dtype=np.int64)] = True
        return cls(part, pruned)

    @property
    def n_pruned(self):
        return int(self.pruned.sum())

    @property
    def kept(self):
        return np.flatnonzero(~self.pruned)

    def weight_mask(self):
        """Per-weight 0/1 mask (1 = kept)."""
        return (~self.pruned)[self.partition.group_index]

    def to_dict(self):
        return {"scheme": self.partition.scheme, "n_groups": self.partition.n_groups,
                "pruned": np.flatnonzero(self.pruned).tolist()}


def zero_groups(weights, mask):
    """Copy of ``weights`` with every masked group set to zero."""
    weights = np.asarray(weights)
    if weights.shape != tuple(mask.partition.weight_shape):
        raise ShapeError(f"weights {weights.shape} do not match mask {mask.partition.weight_shape}")
    return np.where(mask.weight_mask(), weights, 0).astype(weights.dtype)


def apply_mask(layer, mask, freeze=True):
    """Zero the masked groups of a conv layer in place.

    Filter groups also zero the bias of the removed filters, so a masked
    filter outputs exactly zero like a removed one. With ``freeze`` the mask
    stays attached and is re-applied after every SGD step.
    """
    layer.params["W"][...] = zero_groups(layer.params["W"], mask)
    if mask.partition.scheme == "filter":
        layer.params["b"][mask.pruned] = 0
    if freeze:
        layer.weight_mask = mask.weight_mask().astype(layer.params["W"].dtype)


def shrink_layer(layer, mask):
    """Dense compact form of one masked conv layer.

    Returns ``(new_layer, record)``. Shape groups drop im2col weight columns and
    keep a gather list of im2col input rows; filter groups drop weight rows (the
    caller must also shrink the successor, see :func:`shrink_network`).
    """
    scheme = mask.partition.scheme
    W = layer.params["W"]
    b = layer.params["b"]
    spec = layer.spec
    if scheme == "channel":
        raise UnsupportedError("channel-scheme shrink is not supported")
    if scheme == "shape":
        keep = mask.kept
        if isinstance(layer, CompactConv3D):
            raise UnsupportedError(f"{layer.name} is already shape-shrunk")
        Wm = W.reshape(spec.out_filters, -1)[:, keep]
        new = CompactConv3D(layer.name, spec, keep, Wm.copy(), b.copy(), dtype=W.dtype)
        return new, {"layer": layer.name, "scheme": "shape", "keep_columns": keep.tolist(),
                     "original_columns": spec.rows}
    keep = mask.kept
    if len(keep) == 0:
        raise UnsupportedError(f"{layer.name}: cannot remove every filter")
    new_spec = type(spec)(spec.in_channels, len(keep), spec.kernel, spec.stride, spec.padding)
    if isinstance(layer, CompactConv3D):
        new = CompactConv3D(layer.name, new_spec, layer.keep, W[keep].copy(), b[keep].copy(), dtype=W.dtype)
    else:
        new = Conv3D(layer.name, new_spec, W[keep].copy(), b[keep].copy(), dtype=W.dtype)
    return new, {"layer": layer.name, "scheme": "filter", "keep_filters": keep.tolist(),
                 "original_filters": spec.out_filters}


def _reduce_input_channels(layer, keep_channels, spatial):
    """Drop input channels not in ``keep_channels`` from a downstream layer."""
    keep_channels = np.asarray(keep_channels)
    if isinstance(layer, CompactConv3D):
        spec = layer.spec
        kv = spec.kernel_volume
        row_channel = layer.keep // kv
        keep_pos = np.flatnonzero(np.isin(row_channel, keep_channels))
        remap = -np.ones(spec.in_channels, dtype=np.int64)
        remap[keep_channels] = np.arange(len(keep_channels))
        old_rows = layer.keep[keep_pos]
        new_rows = remap[old_rows // kv] * kv + old_rows % kv
        new_spec = type(spec)(len(keep_channels), spec.out_filters, spec.kernel, spec.stride, spec.padding)
        W = layer.params["W"][:, keep_pos]
        return CompactConv3D(layer.name, new_spec, new_rows, W.copy(), layer.params["b"].copy(),
                             dtype=W.dtype)
    if isinstance(layer, Conv3D):
        spec = layer.spec
        new_spec = type(spec)(len(keep_channels), spec.out_filters, spec.kernel, spec.stride, spec.padding)
        W = layer.params["W"][:, keep_channels]
        return Conv3D(layer.name, new_spec, W.copy(), layer.params["b"].copy(), dtype=W.dtype)
    if isinstance(layer, FullyConnected):
        cols = (keep_channels[:, None] * spatial + np.arange(spatial)[None, :]).ravel()
        W = layer.params["W"][:, cols]
        return FullyConnected(layer.name, len(cols), layer.n_out, W.copy(), layer.params["b"].copy(),
                              dtype=W.dtype)
    raise UnsupportedError(f"cannot reduce input channels of layer kind {layer.kind!r}")


def shrink_network(net, masks):
    """Shrink every masked conv layer of ``net``; returns ``(new_net, records)``.

    ``masks`` maps conv layer names to :class:`GroupMask`. Filter removals also
    drop the matching input channels of the next conv or fully-connected layer.
    """
    layers = [l for l in net.copy().layers]
    records = []
    shapes = net.check_shapes()
    for name, mask in masks.items():
        i = [l.name for l in layers].index(name)
        if mask.partition.scheme == "channel":
            raise UnsupportedError("channel-scheme shrink is not supported")
        if mask.n_pruned == 0:
            records.append({"layer": name, "scheme": mask.partition.scheme, "identity": True})
            continue
        new, rec = shrink_layer(layers[i], mask)
        layers[i] = new
        if mask.partition.scheme == "filter":
            j = i + 1
            spatial = 1
            while j < len(layers) and isinstance(layers[j], (ReLU, MaxPool3D, Flatten)):
                if isinstance(layers[j], Flatten):
                    spatial = int(np.prod(shapes[j][1:]))
                j += 1
            layers[j] = _reduce_input_channels(layers[j], mask.kept, spatial)
            rec["successor"] = layers[j].name
        records.append(rec)
    return Network(layers, net.input_shape), records

"""Single-task networks, the joint multi-task model, and their file format.

A :class:`Network` is a sequential stack of dense, convolutional and residual
layers. Weight matrices are stored fan-in by fan-out (``y = x @ W + b``); a
convolution keeps its kernels flattened to ``(C_in * k * k, C_out)`` with rows
ordered (channel, kernel row, kernel col). Feature maps entering a dense layer
are flattened in (channel, row, col) order.

A :class:`ZippedModel` stores one joint weight matrix per layer together with a
task-membership table for every neuron (or channel). An entry of the joint
matrix is used by task ``t`` iff both its source and its target unit belong to
``t``; shared units belong to several tasks. The five blocks of a zipped layer
are views over this table, see :meth:`ZippedModel.shared_layer`.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .linalg import Permutation
from .ops import conv_output_size, im2col, maxpool

KINDS = ("dense", "conv", "res_entry", "res_exit")
ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    height: int
    width: int
    kernel: int
    stride: int = 1
    padding: int = 0
    pool: int = 1

    @property
    def conv_height(self) -> int:
        return conv_output_size(self.height, self.kernel, self.stride, self.padding)

    @property
    def conv_width(self) -> int:
        return conv_output_size(self.width, self.kernel, self.stride, self.padding)

    @property
    def out_height(self) -> int:
        return self.conv_height // self.pool

    @property
    def out_width(self) -> int:
        return self.conv_width // self.pool

    def with_channels(self, channels: int) -> "ConvSpec":
        return replace(self, in_channels=int(channels))


@dataclass
class Layer:
    """One layer of a sequential network.

    ``in_group`` is the number of weight rows per input unit of a dense layer
    (the spatial size of the feature map when it follows a convolution).
    ``shortcut`` is only used by ``res_exit`` layers: output unit ``c`` adds
    unit ``shortcut[c]`` of the block input before the activation.
    """

    kind: str
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    mask: np.ndarray | None = None
    conv: ConvSpec | None = None
    in_group: int = 1
    shortcut: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a matrix")
        if self.bias.shape != (self.weights.shape[1],):
            raise ValueError(f"bias length {self.bias.shape} does not match {self.weights.shape[1]} outputs")
        if self.kind == "conv":
            if self.conv is None:
                raise ValueError("conv layer needs a ConvSpec")
            if self.weights.shape[0] != self.conv.in_channels * self.conv.kernel**2:
                raise ValueError("conv weight rows must equal in_channels * kernel^2")
        elif self.in_group < 1:
            raise ValueError("in_group must be a positive integer")
        elif self.weights.shape[0] % self.in_group:
            raise ValueError("dense weight rows must be a multiple of in_group")
        if self.mask is not None:
            m = np.asarray(self.mask)
            if m.shape != self.weights.shape:
                raise ValueError("mask shape must match weights")
            if not np.all((m == 0) | (m == 1)):
                raise ValueError("mask entries must be 0 or 1")
            self.mask = m.astype(bool)
            if np.any(self.weights[~self.mask] != 0):
                raise ValueError("weights must be exactly zero where the mask is 0")
        if self.shortcut is not None:
            if self.kind != "res_exit":
                raise ValueError("only res_exit layers carry a shortcut map")
            self.shortcut = np.asarray(self.shortcut, dtype=np.int64)
            if self.shortcut.shape != (self.out_units,):
                raise ValueError("shortcut map needs one entry per output unit")

    @property
    def out_units(self) -> int:
        return self.weights.shape[1]

    @property
    def rows_per_unit(self) -> int:
        return self.conv.kernel**2 if self.kind == "conv" else self.in_group

    @property
    def in_units(self) -> int:
        return self.weights.shape[0] // self.rows_per_unit

    @property
    def out_group(self) -> int:
        """Number of output features per unit (spatial size for conv layers)."""
        if self.kind == "conv":
            return self.conv.out_height * self.conv.out_width
        return 1

    @property
    def out_features(self) -> int:
        return self.out_units * self.out_group

    def parameter_count(self) -> int:
        w = int(self.mask.sum()) if self.mask is not None else self.weights.size
        return w + self.bias.size

    def copy(self) -> "Layer":
        return Layer(
            self.kind,
            self.weights.copy(),
            self.bias.copy(),
            self.activation,
            None if self.mask is None else self.mask.copy(),
            self.conv,
            self.in_group,
            None if self.shortcut is None else self.shortcut.copy(),
        )


@dataclass
class Network:
    layers: list
    input_dim: int
    task_id: str = "task"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        features = self.input_dim
        prev = None
        block_in_units = None
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                spec = layer.conv
                if spec.in_channels * spec.height * spec.width != features:
                    raise ValueError(f"layer {i + 1}: conv input {spec} does not match {features} features")
                if prev is not None and prev.kind == "conv" and (
                    (spec.height, spec.width) != (prev.conv.out_height, prev.conv.out_width)
                ):
                    raise ValueError(f"layer {i + 1}: spatial size mismatch")
            elif layer.weights.shape[0] != features:
                raise ValueError(f"layer {i + 1}: expected {features} input rows, got {layer.weights.shape[0]}")
            elif prev is not None and prev.kind == "conv" and layer.in_group != prev.out_group:
                raise ValueError(f"layer {i + 1}: in_group must equal the preceding feature-map size")
            if layer.kind == "res_entry":
                block_in_units = prev.out_units if prev is not None else self.input_dim
                if i + 1 >= len(self.layers) or self.layers[i + 1].kind != "res_exit":
                    raise ValueError(f"layer {i + 1}: res_entry must be followed by res_exit")
            if layer.kind == "res_exit":
                if prev is None or prev.kind != "res_entry":
                    raise ValueError(f"layer {i + 1}: res_exit must follow res_entry")
                if layer.shortcut is None:
                    if layer.out_units != block_in_units:
                        raise ValueError(f"layer {i + 1}: identity shortcut needs {block_in_units} outputs")
                    layer.shortcut = np.arange(layer.out_units)
                elif layer.shortcut.min(initial=0) < 0 or layer.shortcut.max(initial=0) >= block_in_units:
                    raise ValueError(f"layer {i + 1}: shortcut index out of range")
            features = layer.out_features
            prev = layer

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].out_units

    def parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.layers)

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers], self.input_dim, self.task_id)


class ForwardResult(NamedTuple):
    activations: list  # x_0 (input) .. x_L, post-activation
    pre_activations: list  # y_1 .. y_L
    output: np.ndarray  # y_L


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(z, 0.0) if activation == "relu" else z


def layer_forward(layer: Layer, x: np.ndarray, block_input: np.ndarray | None = None):
    """Run one layer on a batch of flat inputs.

    Returns ``(y, out, cache)``: the pre-activation output ``y`` (flattened), the
    post-activation output ``out`` (flattened, pooled), and whatever backprop
    needs.
    """
    n = x.shape[0]
    if layer.kind == "conv":
        spec = layer.conv
        img = x.reshape(n, spec.in_channels, spec.height, spec.width)
        cols = im2col(img, spec.kernel, spec.stride, spec.padding)
        oh, ow = spec.conv_height, spec.conv_width
        y = (cols @ layer.weights + layer.bias).reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)
        z = _activate(y, layer.activation)
        arg = None
        if spec.pool > 1:
            z, arg = maxpool(z, spec.pool)
        return y.reshape(n, -1), z.reshape(n, -1), (cols, y, arg)
    y = x @ layer.weights + layer.bias
    z = y
    if layer.kind == "res_exit":
        z = y + block_input[:, layer.shortcut]
    return y, _activate(z, layer.activation), z


def forward(net: Network, x, *, keep_cache: bool = False):
    """Forward pass returning every layer's input, pre-activation and the output.

    ``x`` is one flat input vector or a batch with one sample per row. With
    ``keep_cache`` the per-layer backprop caches are returned as a fourth item.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"expected input of dim {net.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input has non-finite entries")
    acts, pres, caches = [x], [], []
    block_input = None
    for i, layer in enumerate(net.layers):
        if layer.kind == "res_entry":
            block_input = x
        y, x, cache = layer_forward(layer, x, block_input)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise FloatingPointError(f"non-finite activation at layer {i + 1} (divergent weights?)")
        acts.append(x)
        pres.append(y)
        caches.append(cache)
    if single:
        acts = [a[0] for a in acts]
        pres = [p[0] for p in pres]
    result = ForwardResult(acts, pres, pres[-1])
    return (result, caches) if keep_cache else result


def predict(net: Network, x, batch_size: int = 2000) -> np.ndarray:
    """Network outputs for a batch, computed in chunks."""
    x = np.asarray(x, dtype=np.float64)
    out = [forward(net, x[s : s + batch_size]).output for s in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


def expand_units(units: np.ndarray, group: int) -> np.ndarray:
    """Weight-row indices of the given input units when each unit owns ``group`` rows."""
    units = np.asarray(units, dtype=np.int64)
    if group == 1:
        return units
    return (units[:, None] * group + np.arange(group)).ravel()


@dataclass
class SharedLayer:
    """Two-task view of a zipped layer, partitioned into the five weight blocks.

    Row counts of the blocks are in weight rows (units times ``rows_per_unit``);
    biases are kept apart from the weight blocks.
    """

    shared_count: int
    specific_a: int
    specific_b: int
    w_hat_a: np.ndarray  # all A inputs -> A-specific units
    w_tilde_a: np.ndarray  # A-specific inputs -> shared units
    w_tilde: np.ndarray  # shared inputs -> shared units
    w_tilde_b: np.ndarray  # B-specific inputs -> shared units
    w_hat_b: np.ndarray  # all B inputs -> B-specific units
    bias_a: np.ndarray
    bias_shared: np.ndarray
    bias_b: np.ndarray
    pairs: list  # (i_k, j_k): original unit indices merged into shared unit k

    def parameter_count(self) -> int:
        blocks = (self.w_hat_a, self.w_tilde_a, self.w_tilde, self.w_tilde_b, self.w_hat_b)
        biases = (self.bias_a, self.bias_shared, self.bias_b)
        return sum(b.size for b in blocks) + sum(b.size for b in biases)


@dataclass
class ZippedModel:
    """Joint multi-task network.

    ``members[k]`` is a boolean (units, tasks) table for the outputs of layer
    ``k``; ``origins[k][t]`` maps task ``t``'s original unit indices to joint
    units; ``shortcuts[k]`` holds, for a ``res_exit`` layer, the block-input unit
    that each output unit adds for each task (-1 where unused).
    """

    layers: list
    members: list
    tasks: list
    input_dims: list
    origins: list
    shortcuts: dict = field(default_factory=dict)
    hessian_cache: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_network(cls, net: Network) -> "ZippedModel":
        layers, members, origins, shortcuts = [], [], [], {}
        for k, layer in enumerate(net.layers):
            joint = layer.copy()
            if joint.kind == "res_exit":
                shortcuts[k] = joint.shortcut[None, :].copy()
                joint.shortcut = None
            layers.append(joint)
            members.append(np.ones((layer.out_units, 1), dtype=bool))
            origins.append([np.arange(layer.out_units)])
        return cls(layers, members, [net.task_id], [net.input_dim], origins, shortcuts)

    # structure ---------------------------------------------------------------

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def task_index(self, task) -> int:
        try:
            return self.tasks.index(task)
        except ValueError:
            raise KeyError(f"unknown task {task!r}; registered: {self.tasks}") from None

    def input_members(self) -> np.ndarray:
        first = self.layers[0]
        units = first.in_units
        if first.kind == "conv":
            return np.ones((units, self.n_tasks), dtype=bool)
        return np.arange(units)[:, None] < np.asarray(self.input_dims)[None, :]

    def in_members(self, k: int) -> np.ndarray:
        return self.input_members() if k == 0 else self.members[k - 1]

    def block_entry(self, k: int) -> int:
        """Index of the res_entry layer opening the block closed by layer ``k``."""
        if self.layers[k].kind != "res_exit":
            raise ValueError(f"layer {k + 1} is not a res_exit layer")
        return k - 1

    def shared_units(self, k: int, side_a, side_b) -> np.ndarray:
        """Boolean mask of layer-``k`` output units used by both task groups."""
        m = self.members[k]
        a = m[:, [self.task_index(t) for t in side_a]].any(axis=1)
        b = m[:, [self.task_index(t) for t in side_b]].any(axis=1)
        return a & b

    def shared_counts(self) -> list:
        """Number of units used by more than one task, per layer."""
        return [int((m.sum(axis=1) > 1).sum()) for m in self.members]

    def used_entries(self, k: int) -> np.ndarray:
        """Boolean matrix of structurally used weights of layer ``k``."""
        used = (self.in_members(k).astype(np.int64) @ self.members[k].T.astype(np.int64)) > 0
        used = np.repeat(used, self.layers[k].rows_per_unit, axis=0)
        if self.layers[k].mask is not None:
            used &= self.layers[k].mask
        return used

    def parameter_count(self) -> int:
        return sum(int(self.used_entries(k).sum()) + layer.out_units for k, layer in enumerate(self.layers))

    def permutation(self, k: int, task) -> Permutation:
        """Order of task ``task``'s original layer-``k`` units inside the joint model."""
        return Permutation(np.argsort(self.origins[k][self.task_index(task)], kind="stable"))

    @property
    def permutation_log(self) -> list:
        return [{t: self.permutation(k, t) for t in self.tasks} for k in range(self.depth)]

    # task views --------------------------------------------------------------

    def task_slices(self, task) -> list:
        """Per layer, the (input units, weight rows, output units) used by ``task``."""
        ti = self.task_index(task)
        out = []
        for k, joint in enumerate(self.layers):
            in_units = np.flatnonzero(self.in_members(k)[:, ti])
            rows = expand_units(in_units, joint.rows_per_unit)
            out.append((in_units, rows, np.flatnonzero(self.members[k][:, ti])))
        return out

    def task_network(self, task) -> Network:
        """The single-task network that ``task`` executes inside the joint model."""
        ti = self.task_index(task)
        layers = []
        for k, (joint, (in_units, rows, cols)) in enumerate(zip(self.layers, self.task_slices(task))):
            idx = np.ix_(rows, cols)
            conv = joint.conv.with_channels(in_units.size) if joint.conv is not None else None
            shortcut = None
            if joint.kind == "res_exit":
                block_units = np.flatnonzero(self.in_members(self.block_entry(k))[:, ti])
                shortcut = np.searchsorted(block_units, self.shortcuts[k][ti, cols])
            layers.append(
                Layer(
                    joint.kind,
                    joint.weights[idx],
                    joint.bias[cols],
                    joint.activation,
                    None if joint.mask is None else joint.mask[idx],
                    conv,
                    joint.in_group,
                    shortcut,
                )
            )
        return Network(layers, self.input_dims[ti], task)

    def shared_layer(self, k: int, task_a=None, task_b=None) -> SharedLayer:
        task_a = self.tasks[0] if task_a is None else task_a
        task_b = self.tasks[1] if task_b is None else task_b
        a, b = self.task_index(task_a), self.task_index(task_b)
        layer = self.layers[k]
        g = layer.rows_per_unit
        pin, cur = self.in_members(k), self.members[k]
        in_a, in_b = pin[:, a], pin[:, b]
        out_a, out_b = cur[:, a], cur[:, b]
        shared = np.flatnonzero(out_a & out_b)
        spec_a, spec_b = np.flatnonzero(out_a & ~out_b), np.flatnonzero(out_b & ~out_a)

        def block(in_mask, cols):
            return layer.weights[np.ix_(expand_units(np.flatnonzero(in_mask), g), cols)]

        inv_a = {int(u): i for i, u in enumerate(self.origins[k][a])}
        inv_b = {int(u): j for j, u in enumerate(self.origins[k][b])}
        return SharedLayer(
            shared_count=shared.size,
            specific_a=spec_a.size,
            specific_b=spec_b.size,
            w_hat_a=block(in_a, spec_a),
            w_tilde_a=block(in_a & ~in_b, shared),
            w_tilde=block(in_a & in_b, shared),
            w_tilde_b=block(in_b & ~in_a, shared),
            w_hat_b=block(in_b, spec_b),
            bias_a=layer.bias[spec_a],
            bias_shared=layer.bias[shared],
            bias_b=layer.bias[spec_b],
            pairs=[(inv_a[int(u)], inv_b[int(u)]) for u in shared],
        )

    @property
    def shared_layers(self) -> list:
        """Two-task block views of the hidden layers (first two registered tasks)."""
        return [self.shared_layer(k) for k in range(self.depth - 1)]

    @property
    def task_heads(self) -> dict:
        return {t: self.task_network(t).layers[-1] for t in self.tasks}

    def copy(self) -> "ZippedModel":
        return ZippedModel(
            [layer.copy() for layer in self.layers],
            [m.copy() for m in self.members],
            list(self.tasks),
            list(self.input_dims),
            [[o.copy() for o in per_task] for per_task in self.origins],
            {k: v.copy() for k, v in self.shortcuts.items()},
        )

    # growth ------------------------------------------------------------------

    def embed(self, net: Network) -> "ZippedModel":
        """Return a joint model with ``net`` added as a new task, sharing nothing."""
        if net.task_id in self.tasks:
            raise ValueError(f"task {net.task_id!r} already registered")
        if net.depth != self.depth:
            raise ValueError(f"depth mismatch: joint model has {self.depth} layers, network has {net.depth}")
        t_old = self.n_tasks
        layers, members, origins, shortcuts = [], [], [], {}
        for k, (old, new) in enumerate(zip(self.layers, net.layers)):
            _check_compatible(k, old, new)
            ro, co = old.weights.shape
            rn, cn = new.weights.shape
            if k == 0:
                rows = max(ro, rn)
                row_new = slice(0, rn)
                conv = old.conv
                if old.kind == "conv" and old.conv != new.conv:
                    raise ValueError("conv input layers must have identical input shapes")
            else:
                rows = ro + rn
                row_new = slice(ro, ro + rn)
                conv = old.conv.with_channels(old.in_units + new.in_units) if old.conv is not None else None
            w = np.zeros((rows, co + cn))
            w[:ro, :co] = old.weights
            w[row_new, co:] = new.weights
            mask = None
            if old.mask is not None or new.mask is not None:
                mask = np.zeros((rows, co + cn), dtype=bool)
                mask[:ro, :co] = True if old.mask is None else old.mask
                mask[row_new, co:] = True if new.mask is None else new.mask
            layers.append(
                Layer(old.kind, w, np.concatenate([old.bias, new.bias]), old.activation, mask, conv, old.in_group)
            )
            m = np.zeros((co + cn, t_old + 1), dtype=bool)
            m[:co, :t_old] = self.members[k]
            m[co:, t_old] = True
            members.append(m)
            origins.append([o.copy() for o in self.origins[k]] + [np.arange(cn) + co])
            if old.kind == "res_exit":
                entry = k - 1
                offset = 0 if entry == 0 else self.layers[entry].in_units
                sc = np.full((t_old + 1, co + cn), -1, dtype=np.int64)
                sc[:t_old, :co] = self.shortcuts[k]
                sc[t_old, co:] = new.shortcut + offset
                shortcuts[k] = sc
        return ZippedModel(
            layers, members, self.tasks + [net.task_id], self.input_dims + [net.input_dim], origins, shortcuts
        )


def _check_compatible(k: int, old: Layer, new: Layer) -> None:
    if old.kind != new.kind or old.activation != new.activation:
        raise ValueError(f"layer {k + 1}: incompatible kinds ({old.kind}/{new.kind})")
    if old.kind == "conv":
        a, b = old.conv, new.conv
        if (a.kernel, a.stride, a.padding, a.pool, a.height, a.width) != (
            b.kernel, b.stride, b.padding, b.pool, b.height, b.width
        ):
            raise ValueError(f"layer {k + 1}: kernel shape mismatch")
    elif old.in_group != new.in_group:
        raise ValueError(f"layer {k + 1}: input grouping mismatch")


def zip_without_sharing(nets: list) -> ZippedModel:
    """Joint model of several networks with only the input layer shared."""
    zm = ZippedModel.from_network(nets[0])
    for net in nets[1:]:
        zm = zm.embed(net)
    return zm


def infer_task(zm: ZippedModel, task, x) -> np.ndarray:
    """Outputs of ``task`` computed from its blocks of the joint model only."""
    return forward(zm.task_network(task), x).output


# ---------------------------------------------------------------------------
# File format
#
#   magic      8 bytes  b"MTZIPMDL"
#   version    u32
#   kind       u32      1 = Network, 2 = ZippedModel
#   header     u64 length + UTF-8 JSON (sorted keys): layer metadata, tasks
#   n_arrays   u32
#   arrays     u16 name length, name, u8 dtype (1 = f64, 2 = i64, 3 = bool),
#              u8 ndim, ndim * u64 dims, raw little-endian data
#   checksum   32 bytes SHA-256 of everything above
#
# All integers are little-endian.
# ---------------------------------------------------------------------------

MAGIC = b"MTZIPMDL"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("|b1")}
_CODES = {"f": 1, "i": 2, "b": 3}


class ModelFormatError(ValueError):
    """Raised for unreadable, truncated, corrupted or incompatible model files."""


def _layer_meta(layer: Layer) -> dict:
    meta = {"kind": layer.kind, "activation": layer.activation, "in_group": layer.in_group}
    if layer.conv is not None:
        meta["conv"] = {
            "in_channels": layer.conv.in_channels,
            "height": layer.conv.height,
            "width": layer.conv.width,
            "kernel": layer.conv.kernel,
            "stride": layer.conv.stride,
            "padding": layer.conv.padding,
            "pool": layer.conv.pool,
        }
    return meta


def _layer_arrays(prefix: str, layer: Layer, arrays: dict) -> None:
    arrays[f"{prefix}.weights"] = layer.weights
    arrays[f"{prefix}.bias"] = layer.bias
    if layer.mask is not None:
        arrays[f"{prefix}.mask"] = layer.mask
    if layer.shortcut is not None:
        arrays[f"{prefix}.shortcut"] = layer.shortcut


def _layer_from(prefix: str, meta: dict, arrays: dict) -> Layer:
    conv = ConvSpec(**meta["conv"]) if "conv" in meta else None
    return Layer(
        meta["kind"],
        arrays[f"{prefix}.weights"],
        arrays[f"{prefix}.bias"],
        meta["activation"],
        arrays.get(f"{prefix}.mask"),
        conv,
        meta["in_group"],
        arrays.get(f"{prefix}.shortcut"),
    )


def _encode(kind: int, header: dict, arrays: dict) -> bytes:
    head = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, kind), struct.pack("<Q", len(head)), head]
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES[arr.dtype.kind]
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(data.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError("truncated model file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode(buf: bytes):
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file (bad magic bytes)")
    if len(buf) < len(MAGIC) + 8 + 32:
        raise ModelFormatError("truncated model file")
    body, digest = buf[:-32], buf[-32:]
    r = _Reader(body)
    r.take(len(MAGIC))
    version, kind = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError("checksum mismatch (corrupted or truncated file)")
    (hlen,) = r.unpack("<Q")
    header = json.loads(r.take(hlen).decode())
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode()
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dtype = _DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        arrays[name] = data.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(body):
        raise ModelFormatError("trailing bytes after last array")
    return kind, header, arrays


def model_to_bytes(model) -> bytes:
    arrays: dict = {}
    if isinstance(model, Network):
        for k, layer in enumerate(model.layers):
            _layer_arrays(f"layer{k}", layer, arrays)
        header = {
            "input_dim": model.input_dim,
            "task_id": model.task_id,
            "layers": [_layer_meta(layer) for layer in model.layers],
        }
        return _encode(1, header, arrays)
    if isinstance(model, ZippedModel):
        for k, layer in enumerate(model.layers):
            _layer_arrays(f"layer{k}", layer, arrays)
            arrays[f"layer{k}.members"] = model.members[k]
            for t, origin in enumerate(model.origins[k]):
                arrays[f"layer{k}.origin{t}"] = origin
            if k in model.shortcuts:
                arrays[f"layer{k}.shortcuts"] = model.shortcuts[k]
        header = {
            "tasks": list(model.tasks),
            "input_dims": list(model.input_dims),
            "layers": [_layer_meta(layer) for layer in model.layers],
        }
        return _encode(2, header, arrays)
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_bytes(buf: bytes):
    kind, header, arrays = _decode(buf)
    try:
        if kind == 1:
            layers = [_layer_from(f"layer{k}", meta, arrays) for k, meta in enumerate(header["layers"])]
            return Network(layers, header["input_dim"], header["task_id"])
        if kind == 2:
            layers = [_layer_from(f"layer{k}", meta, arrays) for k, meta in enumerate(header["layers"])]
            n_tasks = len(header["tasks"])
            members = [arrays[f"layer{k}.members"] for k in range(len(layers))]
            origins = [[arrays[f"layer{k}.origin{t}"] for t in range(n_tasks)] for k in range(len(layers))]
            shortcuts = {k: arrays[f"layer{k}.shortcuts"] for k in range(len(layers)) if f"layer{k}.shortcuts" in arrays}
            return ZippedModel(layers, members, header["tasks"], header["input_dims"], origins, shortcuts)
    except KeyError as exc:
        raise ModelFormatError(f"missing record {exc}") from None
    raise ModelFormatError(f"unknown model kind {kind}")


def save_model(model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    """Load a :class:`Network` or :class:`ZippedModel` written by :func:`save_model`."""
    return model_from_bytes(Path(path).read_bytes())

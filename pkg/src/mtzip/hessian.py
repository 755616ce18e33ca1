"""Layer-wise Hessians of the pre-activation error, estimated from calibration data.

For a layer with input features ``x`` (augmented by a constant 1 for the bias)
the estimate is ``(weight / n) * sum_n x x^T``. It is the same for every unit of
the layer, so one matrix per (task, layer) serves all units. Convolutions use
the unfolded input patches, summed over all output positions of a sample.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .linalg import SpdMatrix, accumulate_outer
from .model import Network, ZippedModel, forward
from .ops import im2col

DEFAULT_CALIBRATION_SIZE = 2000
_CHUNK = 250


@dataclass
class CalibrationSet:
    inputs: np.ndarray
    task_id: str = "task"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or len(self.inputs) == 0:
            raise ValueError("calibration set must be a nonempty (n, dim) matrix")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("calibration inputs have non-finite entries")

    def __len__(self) -> int:
        return len(self.inputs)

    @classmethod
    def from_dataset(cls, dataset, n: int = DEFAULT_CALIBRATION_SIZE, seed: int = 0, task_id=None):
        """Fixed-seed sample of the training split."""
        if dataset.split != "train":
            raise ValueError("calibration samples must come from the training split")
        sub = dataset.sample(n, seed)
        return cls(sub.inputs, task_id if task_id is not None else dataset.name or "task")

    def fingerprint(self) -> str:
        return hashlib.sha256(self.inputs.tobytes()).hexdigest()[:16]


@dataclass
class HessianEstimate:
    """``(alpha_weight / n_samples) * sum x x^T`` over a layer's input coordinates.

    The last coordinate is the constant bias input.
    """

    matrix: SpdMatrix
    n_samples: int
    alpha_weight: float
    task_id: object = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("estimate needs at least one sample")
        if self.alpha_weight < 0:
            raise ValueError("alpha_weight must be nonnegative")

    @property
    def dim(self) -> int:
        return self.matrix.dim

    def scaled(self, weight: float) -> "HessianEstimate":
        """Same data with a different weight (the matrix is rescaled accordingly)."""
        if self.alpha_weight == 0:
            raise ValueError("cannot rescale a zero-weight estimate")
        return HessianEstimate(self.matrix.scaled(weight / self.alpha_weight), self.n_samples, weight, self.task_id)

    def restrict(self, rows) -> "HessianEstimate":
        """Keep the given input coordinates plus the bias coordinate."""
        idx = np.append(np.asarray(rows, dtype=np.int64), self.dim - 1)
        return HessianEstimate(self.matrix.submatrix(idx), self.n_samples, self.alpha_weight, self.task_id)


def layer_features(net: Network, k: int, x: np.ndarray) -> np.ndarray:
    """Input features of layer ``k`` (0-based): one row per sample, or per patch for conv."""
    acts = forward(net, x).activations[k]
    layer = net.layers[k]
    if layer.kind == "conv":
        spec = layer.conv
        img = acts.reshape(len(x), spec.in_channels, spec.height, spec.width)
        return im2col(img, spec.kernel, spec.stride, spec.padding)
    return acts


def _resolve(model, task):
    if isinstance(model, ZippedModel):
        return model.task_network(task if task is not None else model.tasks[0])
    return model


def layer_hessian(model, layer: int, calib: CalibrationSet, weight: float = 1.0, task=None, *, bias: bool = True):
    """Hessian of the weighted layer error for the incoming weights of hidden layer ``layer``.

    ``layer`` counts from 1 (the first hidden layer) to ``depth - 1``; its input
    is the output of layer ``layer - 1`` (the network input for layer 1). With
    ``bias`` the features are augmented by a constant 1.
    """
    net = _resolve(model, task)
    if not 1 <= layer <= net.depth - 1:
        raise ValueError(f"layer {layer} out of range 1..{net.depth - 1}")
    if calib.inputs.shape[1] != net.input_dim:
        raise ValueError(f"calibration dim {calib.inputs.shape[1]} does not match network input {net.input_dim}")
    k = layer - 1
    dim = net.layers[k].weights.shape[0] + int(bias)
    total = SpdMatrix.zeros(dim)
    for s in range(0, len(calib), _CHUNK):
        feats = layer_features(net, k, calib.inputs[s : s + _CHUNK])
        if bias:
            feats = np.hstack([feats, np.ones((len(feats), 1))])
        total = accumulate_outer(total, feats)
    n = len(calib)
    return HessianEstimate(total.scaled(weight / n), n, weight, calib.task_id if task is None else task)


def merge_hessians(existing: HessianEstimate, incoming: HessianEstimate) -> HessianEstimate:
    """Weight-averaged combination of two estimates; the weights add up.

    The result is ``(a * H_e + b * H_i) / (a + b)`` with weight ``a + b``, so a
    zero-weight incoming estimate leaves ``existing`` unchanged and merging an
    estimate with itself returns it.
    """
    if existing.dim != incoming.dim:
        raise ValueError(f"dimension mismatch: {existing.dim} vs {incoming.dim}")
    a, b = existing.alpha_weight, incoming.alpha_weight
    if a + b <= 0:
        raise ValueError("cannot merge two zero-weight estimates")
    if b == 0:
        entries = existing.matrix.entries.copy()
    elif a == 0:
        entries = incoming.matrix.entries.copy()
    else:
        entries = (a * existing.matrix.entries + b * incoming.matrix.entries) / (a + b)
    ids = tuple(i for t in (existing.task_id, incoming.task_id) for i in (t if isinstance(t, tuple) else (t,)))
    return HessianEstimate(SpdMatrix(entries, check=False), existing.n_samples + incoming.n_samples, a + b, ids)


def pooled_hessian(feature_sets, weights) -> np.ndarray:
    """Direct weighted average ``sum_t (w_t / W) (1 / n_t) sum x x^T`` from raw features.

    Every sample is scaled by ``sqrt(w_t / (W n_t))`` and all samples are summed
    in one product; used as the batch counterpart of repeated merging.
    """
    total = float(sum(weights))
    rows = [f * np.sqrt(w / (total * len(f))) for f, w in zip(feature_sets, weights)]
    stacked = np.vstack(rows)
    h = stacked.T @ stacked
    return 0.5 * (h + h.T)


# ---------------------------------------------------------------------------
# cache


def _upstream_fingerprint(net: Network, k: int, calib: CalibrationSet) -> str:
    h = hashlib.sha256(calib.fingerprint().encode())
    for layer in net.layers[: k + 1]:
        h.update(layer.kind.encode())
        h.update(np.asarray(layer.weights.shape, dtype=np.int64).tobytes())
        if layer is not net.layers[k]:
            h.update(layer.weights.tobytes())
            h.update(layer.bias.tobytes())
            if layer.shortcut is not None:
                h.update(layer.shortcut.tobytes())
    return h.hexdigest()


def task_hessian(zm: ZippedModel, task, k: int, calib: CalibrationSet) -> HessianEstimate:
    """Unit-weight estimate for layer ``k`` (0-based) of ``task``, over all of its inputs.

    Results are cached on ``zm`` keyed by the weights upstream of layer ``k``,
    so an estimate is reused exactly when the layer input is unchanged.
    """
    net = zm.task_network(task)
    key = (task, k, _upstream_fingerprint(net, k, calib))
    hit = zm.hessian_cache.get(key)
    if hit is None:
        hit = layer_hessian(net, k + 1, calib, 1.0, task)
        zm.hessian_cache[key] = hit
    return hit

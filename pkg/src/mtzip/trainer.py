"""Backpropagation, plain SGD, and the joint retraining used after each zip step."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ConvSpec, Layer, Network, ZippedModel, forward
from .ops import col2im, maxpool_backward

LOSSES = ("softmax-cross-entropy", "sigmoid-per-attribute", "mse")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 64
    iterations: int = 1000
    seed: int = 0
    loss: str = "softmax-cross-entropy"
    # piecewise-constant schedule: ((start_iteration, learning_rate), ...)
    lr_steps: tuple = ()
    log_every: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    def rate_at(self, iteration: int) -> float:
        lr = self.learning_rate
        for start, rate in self.lr_steps:
            if iteration >= start:
                lr = rate
        return lr


@dataclass
class RetrainSchedule:
    """Retraining iterations to run after zipping each hidden layer."""

    iterations: list = field(default_factory=list)

    def __post_init__(self):
        self.iterations = [int(n) for n in self.iterations]
        if any(n < 0 for n in self.iterations):
            raise ValueError("retraining iterations must be nonnegative")

    @classmethod
    def proportional(cls, n_layers: int, total: int = 550) -> "RetrainSchedule":
        """Split ``total`` over the hidden layers, giving the last one a double share."""
        if n_layers <= 0:
            return cls([])
        weights = np.ones(n_layers)
        weights[-1] = 2.0
        counts = np.floor(total * weights / weights.sum()).astype(int)
        counts[-1] += total - counts.sum()
        return cls(counts.tolist())

    def at(self, layer: int) -> int:
        return self.iterations[layer] if layer < len(self.iterations) else 0

    @property
    def total(self) -> int:
        return sum(self.iterations)


# ---------------------------------------------------------------------------
# losses


def loss_and_output_grad(output: np.ndarray, targets: np.ndarray, loss: str):
    n = output.shape[0]
    if loss == "softmax-cross-entropy":
        shifted = output - output.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        labels = np.asarray(targets, dtype=np.int64)
        value = -logp[np.arange(n), labels].mean()
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return value, grad / n
    if loss == "sigmoid-per-attribute":
        t = np.asarray(targets, dtype=np.float64).reshape(output.shape)
        # log(1 + exp(-|z|)) form keeps large logits finite
        value = (np.maximum(output, 0) - output * t + np.log1p(np.exp(-np.abs(output)))).sum(axis=1).mean()
        return value, (1.0 / (1.0 + np.exp(-output)) - t) / n
    if loss == "mse":
        t = np.asarray(targets, dtype=np.float64).reshape(output.shape)
        diff = output - t
        return 0.5 * (diff**2).sum(axis=1).mean(), diff / n
    raise ValueError(f"unknown loss {loss!r}")


# ---------------------------------------------------------------------------
# backprop


def backward(net: Network, acts: list, caches: list, grad_output: np.ndarray) -> list:
    """Gradients ``[(dW, db), ...]`` given dLoss/d(output) for a cached forward pass."""
    grads = [None] * net.depth
    g = grad_output
    shortcut_grad = None
    for i in range(net.depth - 1, -1, -1):
        layer = net.layers[i]
        cache = caches[i]
        x_in = acts[i]
        if layer.kind == "conv":
            cols, y, arg = cache
            spec = layer.conv
            n = x_in.shape[0]
            c_out = layer.out_units
            g = g.reshape(n, c_out, spec.out_height, spec.out_width)
            if spec.pool > 1:
                g = maxpool_backward(g, arg, y.shape, spec.pool)
            if layer.activation == "relu":
                g = g * (y > 0)
            dy = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
            dW = cols.T @ dy
            db = dy.sum(axis=0)
            if i > 0:
                dcols = dy @ layer.weights.T
                shape = (n, spec.in_channels, spec.height, spec.width)
                g = col2im(dcols, shape, spec.kernel, spec.stride, spec.padding).reshape(n, -1)
        else:
            z = cache
            dz = g * (z > 0) if layer.activation == "relu" else g
            if layer.kind == "res_exit":
                shortcut_grad = np.zeros((x_in.shape[0], net.layers[i - 1].weights.shape[0]))
                np.add.at(shortcut_grad.T, layer.shortcut, dz.T)
            dW = x_in.T @ dz
            db = dz.sum(axis=0)
            if i > 0:
                g = dz @ layer.weights.T
            if layer.kind == "res_entry" and shortcut_grad is not None and i > 0:
                g = g + shortcut_grad
                shortcut_grad = None
        if layer.mask is not None:
            dW = dW * layer.mask
        grads[i] = (dW, db)
    return grads


def loss_and_gradient(net: Network, x: np.ndarray, targets: np.ndarray, loss: str = "softmax-cross-entropy"):
    result, caches = forward(net, x, keep_cache=True)
    value, g = loss_and_output_grad(result.output, targets, loss)
    return value, backward(net, result.activations, caches, g)


def gradient(net: Network, batch, loss: str = "softmax-cross-entropy") -> list:
    """Per-layer ``(dW, db)`` of the mean batch loss. ``batch`` is ``(inputs, targets)``."""
    x, targets = batch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("batch must be a nonempty 2-D array of inputs")
    return loss_and_gradient(net, x, targets, loss)[1]


def batch_loss(net: Network, x, targets, loss: str = "softmax-cross-entropy") -> float:
    return loss_and_output_grad(forward(net, np.asarray(x, dtype=np.float64)).output, targets, loss)[0]


# ---------------------------------------------------------------------------
# SGD


class _BatchStream:
    """Endless minibatch indices; a fresh shuffle every epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


def _log(stream, **fields):
    if stream is not None:
        print(" ".join(f"{k}={v}" for k, v in fields.items()), file=stream, flush=True)


def train(net: Network, data, cfg: TrainConfig, log=None, eval_data=None) -> Network:
    """Train a copy of ``net`` with minibatch SGD; deterministic given ``cfg.seed``.

    ``log`` is a text stream receiving ``iteration=... loss=...`` records every
    ``cfg.log_every`` iterations (plus ``error=`` when ``eval_data`` is given).
    """
    from .data import evaluate

    net = net.copy()
    if data.inputs.shape[1] != net.input_dim:
        raise ValueError(f"data dim {data.inputs.shape[1]} does not match network input {net.input_dim}")
    if cfg.iterations == 0:
        return net
    stream = _BatchStream(len(data), cfg.batch_size, np.random.default_rng(cfg.seed))
    for it in range(cfg.iterations):
        idx = stream.next()
        value, grads = loss_and_gradient(net, data.inputs[idx], data.labels[idx], cfg.loss)
        if not np.isfinite(value):
            raise TrainingDivergedError(it, value)
        lr = cfg.rate_at(it)
        for layer, (dW, db) in zip(net.layers, grads):
            layer.weights -= lr * dW
            layer.bias -= lr * db
            if layer.mask is not None:
                layer.weights *= layer.mask
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            extra = {"error": f"{evaluate(net, None, eval_data):.4f}"} if eval_data is not None else {}
            _log(log, iteration=it + 1, loss=f"{value:.6f}", **extra)
    return net


def normalized_weights(tasks, weights) -> dict:
    if weights is None:
        weights = {t: 1.0 for t in tasks}
    total = sum(weights[t] for t in tasks)
    if total <= 0:
        raise ValueError("task weights must have a positive sum")
    return {t: weights[t] / total for t in tasks}


def joint_loss_and_gradient(zm: ZippedModel, batches: dict, weights: dict, loss: str = "softmax-cross-entropy"):
    """Weighted multi-task loss ``sum_t w_t L_t`` and its gradient on the joint weights.

    ``batches`` maps task -> (inputs, targets); every task only touches its own
    blocks, so a shared block accumulates the weighted sum of task gradients.
    """
    gw = [np.zeros_like(layer.weights) for layer in zm.layers]
    gb = [np.zeros_like(layer.bias) for layer in zm.layers]
    total = 0.0
    for task, (x, targets) in batches.items():
        w = weights[task]
        if w == 0:
            continue
        sub = zm.task_network(task)
        value, grads = loss_and_gradient(sub, x, targets, loss)
        total += w * value
        for k, ((_, rows, cols), (dW, db)) in enumerate(zip(zm.task_slices(task), grads)):
            gw[k][np.ix_(rows, cols)] += w * dW
            gb[k][cols] += w * db
    return total, gw, gb


def retrain_joint(zm: ZippedModel, data: dict, cfg: TrainConfig, weights: dict | None = None, log=None) -> ZippedModel:
    """Fine-tune all blocks of the joint model on every task at once.

    Each SGD step draws one minibatch per task and descends the weighted loss
    ``sum_t w_t L_t`` (weights normalized to sum to one).
    """
    zm = zm.copy()
    missing = [t for t in zm.tasks if t not in data]
    if missing:
        raise ValueError(f"no retraining data for tasks {missing}")
    weights = normalized_weights(zm.tasks, weights)
    streams = {
        t: _BatchStream(len(data[t]), cfg.batch_size, np.random.default_rng([cfg.seed, i]))
        for i, t in enumerate(zm.tasks)
    }
    for it in range(cfg.iterations):
        batches = {}
        for t in zm.tasks:
            idx = streams[t].next()
            batches[t] = (data[t].inputs[idx], data[t].labels[idx])
        value, gw, gb = joint_loss_and_gradient(zm, batches, weights, cfg.loss)
        if not np.isfinite(value):
            raise TrainingDivergedError(it, value)
        lr = cfg.rate_at(it)
        for layer, dW, db in zip(zm.layers, gw, gb):
            layer.weights -= lr * dW
            layer.bias -= lr * db
            if layer.mask is not None:
                layer.weights *= layer.mask
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            _log(log, phase="retrain", iteration=it + 1, loss=f"{value:.6f}")
    return zm


# ---------------------------------------------------------------------------
# initialization and architectures


def init_layer(kind, fan_in_rows, out_units, rng, activation="relu", **kw) -> Layer:
    """He-normal weights (variance 2 / fan-in), zero bias."""
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in_rows), size=(fan_in_rows, out_units))
    return Layer(kind, w, np.zeros(out_units), activation, **kw)


def mlp(input_dim: int, hidden: list, n_out: int, seed: int = 0, task_id: str = "task") -> Network:
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden]
    layers = [init_layer("dense", a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
    layers.append(init_layer("dense", dims[-1], n_out, rng, activation="none"))
    return Network(layers, input_dim, task_id)


def lenet(
    image_shape=(1, 28, 28),
    channels=(6, 16),
    hidden=(120,),
    n_out: int = 10,
    kernel: int = 5,
    seed: int = 0,
    task_id: str = "task",
) -> Network:
    """Conv(k)-ReLU-MaxPool(2) stages followed by dense layers."""
    rng = np.random.default_rng(seed)
    c, h, w = image_shape
    layers = []
    for out_c in channels:
        spec = ConvSpec(c, h, w, kernel, pool=2)
        layers.append(init_layer("conv", c * kernel * kernel, out_c, rng, conv=spec))
        c, h, w = out_c, spec.out_height, spec.out_width
    features, group = c * h * w, h * w
    for units in hidden:
        layers.append(init_layer("dense", features, units, rng, in_group=group))
        features, group = units, 1
    layers.append(init_layer("dense", features, n_out, rng, activation="none", in_group=group))
    return Network(layers, image_shape[0] * image_shape[1] * image_shape[2], task_id)


def residual_mlp(input_dim: int, width: int, inner: int, blocks: int, n_out: int, seed: int = 0, task_id="task") -> Network:
    """Dense stem, ``blocks`` residual blocks (width -> inner -> width), linear head."""
    rng = np.random.default_rng(seed)
    layers = [init_layer("dense", input_dim, width, rng)]
    for _ in range(blocks):
        layers.append(init_layer("res_entry", width, inner, rng))
        exit_layer = init_layer("res_exit", inner, width, rng)
        # small residual branch at init keeps the block near identity
        exit_layer.weights *= 0.1
        layers.append(exit_layer)
    layers.append(init_layer("dense", width, n_out, rng, activation="none"))
    return Network(layers, input_dim, task_id)


def build(arch: str, input_dim: int, n_out: int, seed: int = 0, task_id: str = "task") -> Network:
    """Construct a network from a name such as ``mlp-300-100``, ``lenet5`` or ``resmlp-64-32-2``."""
    parts = arch.lower().split("-")
    try:
        if parts[0] == "mlp":
            return mlp(input_dim, [int(p) for p in parts[1:]], n_out, seed, task_id)
        if parts[0] == "lenet5":
            side = int(round(np.sqrt(input_dim)))
            if side * side != input_dim:
                raise ValueError("lenet5 needs a square single-channel input")
            return lenet((1, side, side), n_out=n_out, seed=seed, task_id=task_id)
        if parts[0] == "resmlp":
            width, inner, blocks = (int(p) for p in parts[1:4])
            return residual_mlp(input_dim, width, inner, blocks, n_out, seed, task_id)
    except (IndexError, ValueError) as exc:
        raise ValueError(f"bad architecture {arch!r}: {exc}") from None
    raise ValueError(f"unknown architecture {arch!r}")


def permute_hidden_units(net: Network, rng: np.random.Generator) -> Network:
    """Randomly reorder the units of every hidden layer without changing the function."""
    net = net.copy()
    layers = net.layers
    perms = []
    for k in range(net.depth - 1):
        perm = rng.permutation(layers[k].out_units)
        perms.append(perm)
        layer = layers[k]
        layer.weights = np.ascontiguousarray(layer.weights[:, perm])
        layer.bias = layer.bias[perm]
        if layer.mask is not None:
            layer.mask = layer.mask[:, perm]
        nxt = layers[k + 1]
        rows = (perm[:, None] * nxt.rows_per_unit + np.arange(nxt.rows_per_unit)).ravel()
        nxt.weights = np.ascontiguousarray(nxt.weights[rows])
        if nxt.mask is not None:
            nxt.mask = nxt.mask[rows]
        if nxt.conv is not None:
            nxt.conv = nxt.conv.with_channels(nxt.conv.in_channels)
    # shortcut maps: exit unit c (new position) adds block-input unit (new position)
    for k, layer in enumerate(layers):
        if layer.kind == "res_exit":
            entry = k - 1
            inv_in = np.argsort(perms[entry - 1]) if entry > 0 else None
            old = layer.shortcut[perms[k]]
            layer.shortcut = inv_in[old] if inv_in is not None else old
    return Network(layers, net.input_dim, net.task_id)


import os

import numpy as np
import pytest

from mtzip.data import SyntheticTaskSpec, find_mnist, gen_correlated_tasks
from mtzip.hessian import CalibrationSet
from mtzip.model import ConvSpec, Layer, Network
from mtzip.trainer import TrainConfig, mlp, permute_hidden_units, train

ACCEPTANCE_LINES = []

MNIST_DEFAULT = "/root/data/mnist"


def mnist_dir():
    return find_mnist(os.environ.get("MTZIP_DATA_DIR") or MNIST_DEFAULT)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_mlp(rng, dims, task_id="task", bias_scale=0.1):
    """Dense net with random weights and biases (relu hidden, linear head)."""
    layers = []
    for n, (a, b) in enumerate(zip(dims[:-2], dims[1:-1])):
        layers.append(Layer("dense", rng.normal(0, 1 / np.sqrt(a), (a, b)), rng.normal(0, bias_scale, b)))
    a, b = dims[-2], dims[-1]
    layers.append(Layer("dense", rng.normal(0, 1 / np.sqrt(a), (a, b)), rng.normal(0, bias_scale, b), "none"))
    return Network(layers, dims[0], task_id)


def random_cnn(rng, task_id="task", channels=(3, 4), side=8, hidden=5, n_out=3, kernel=3):
    """Two conv stages (second without pooling) then dense layers."""
    layers = []
    c, h = 1, side
    spec = ConvSpec(c, h, h, kernel, pool=2)
    layers.append(Layer("conv", rng.normal(0, 0.4, (c * kernel**2, channels[0])), rng.normal(0, 0.1, channels[0]), conv=spec))
    c, h = channels[0], spec.out_height
    spec = ConvSpec(c, h, h, kernel, padding=1)
    layers.append(Layer("conv", rng.normal(0, 0.3, (c * kernel**2, channels[1])), rng.normal(0, 0.1, channels[1]), conv=spec))
    c, h = channels[1], spec.out_height
    group = h * h
    layers.append(Layer("dense", rng.normal(0, 0.2, (c * group, hidden)), rng.normal(0, 0.1, hidden), in_group=group))
    layers.append(Layer("dense", rng.normal(0, 0.3, (hidden, n_out)), rng.normal(0, 0.1, n_out), "none"))
    return Network(layers, side * side, task_id)


@pytest.fixture(scope="session")
def synth_tasks():
    specs = [SyntheticTaskSpec(f"t{i}", seed=10 + i, trunk_seed=7) for i in range(3)]
    return gen_correlated_tasks(specs)


@pytest.fixture(scope="session")
def synth_nets(synth_tasks):
    """Two small MLPs trained on two correlated synthetic tasks."""
    nets = {}
    for i, t in enumerate(["t0", "t1"]):
        net = mlp(10, [24, 12], 4, seed=i + 1, task_id=t)
        cfg = TrainConfig(learning_rate=0.1, batch_size=32, iterations=2500, seed=i, lr_steps=((2000, 0.03),))
        net = train(net, synth_tasks[t].train, cfg)
        nets[t] = permute_hidden_units(net, np.random.default_rng(100 + i))
    return nets


@pytest.fixture(scope="session")
def synth_calibs(synth_tasks):
    return {t: CalibrationSet.from_dataset(d.train, 500, seed=i, task_id=t) for i, (t, d) in enumerate(synth_tasks.items())}


def max_rel_error(analytic, numeric, floor=1e-6):
    """Entrywise relative error, with a floor on the denominator for near-zero entries."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))


def fd_gradient(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``arrays`` (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = f()
            arr[idx] = old - h
            down = f()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# MNIST fixtures (skipped when the IDX files are absent)


@pytest.fixture(scope="session")
def mnist():
    from mtzip.data import TaskData, load_mnist

    d = mnist_dir()
    if d is None:
        pytest.skip("MNIST IDX files not available (set MTZIP_DATA_DIR)")
    return TaskData(load_mnist(d, "train"), load_mnist(d, "test"))


MLP_RECIPE = dict(learning_rate=0.1, batch_size=64, iterations=10500, lr_steps=((7000, 0.03),))


@pytest.fixture(scope="session")
def mnist_mlps(mnist):
    """Two 784-300-100-10 MLPs trained from different seeds, hidden units shuffled afterwards."""
    nets = []
    for seed, task in ((1, "A"), (2, "B")):
        net = mlp(784, [300, 100], 10, seed=seed, task_id=task)
        net = train(net, mnist.train, TrainConfig(seed=seed, **MLP_RECIPE))
        nets.append(permute_hidden_units(net, np.random.default_rng(1000 + seed)))
    return nets


@pytest.fixture(scope="session")
def mnist_calibs(mnist):
    return [CalibrationSet.from_dataset(mnist.train, 2000, seed=s, task_id=t) for s, t in ((1, "A"), (2, "B"))]

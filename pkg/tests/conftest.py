import os
import struct
from pathlib import Path

import numpy as np
import pytest

from advtrain import tensor as T
from advtrain.model import build_model, init_params

MNIST_DIR = Path(os.environ.get("ADVTRAIN_MNIST_DIR", "/root/data/mnist"))


def idx_images(raw: np.ndarray) -> bytes:
    count, rows, cols = raw.shape
    return struct.pack(">IIII", 0x803, count, rows, cols) + raw.astype(np.uint8).tobytes()


def idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", 0x801, len(labels)) + labels.tobytes()


def write_fake_mnist(directory: Path, n_train=96, n_test=40, seed=0):
    """Synthetic 28x28 digits: class k lights up a class-specific stripe, plus noise."""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for name, n, (img_name, lbl_name) in (("train", n_train, ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")),
                                          ("test", n_test, ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))):
        labels = rng.integers(0, 10, n)
        raw = rng.integers(0, 60, (n, 28, 28))
        for i, y in enumerate(labels):
            raw[i, 2 + 2 * y: 4 + 2 * y, 4:24] = 250
        (directory / img_name).write_bytes(idx_images(raw))
        (directory / lbl_name).write_bytes(idx_labels(labels))
    return directory


@pytest.fixture
def fake_mnist(tmp_path):
    return write_fake_mnist(tmp_path / "data")


def small_cnn_layers(c_out1=3, c_out2=4, hidden=6, size=8):
    flat = c_out2 * (size // 4) * (size // 4)
    return [
        T.LayerSpec("conv2d", dict(in_channels=1, out_channels=c_out1, kernel_h=3, kernel_w=3, stride=1, pad=1)),
        T.LayerSpec("relu"),
        T.LayerSpec("maxpool2x2"),
        T.LayerSpec("conv2d", dict(in_channels=c_out1, out_channels=c_out2, kernel_h=3, kernel_w=3, stride=1, pad=1)),
        T.LayerSpec("relu"),
        T.LayerSpec("maxpool2x2"),
        T.LayerSpec("affine", dict(in_features=flat, out_features=hidden)),
        T.LayerSpec("relu"),
        T.LayerSpec("affine", dict(in_features=hidden, out_features=10)),
        T.LayerSpec("softmax-xent-head"),
    ]


def small_cnn(seed=0, dtype=np.float64, size=8):
    return init_params(build_model(small_cnn_layers(size=size), (1, size, size)), seed, dtype)


def linear_model(w, b=None, input_shape=(1, 2, 2)):
    """A single affine layer with given weights [in, 10]."""
    w = np.asarray(w)
    layers = [T.LayerSpec("affine", dict(in_features=w.shape[0], out_features=10)), T.LayerSpec("softmax-xent-head")]
    model = build_model(layers, input_shape)
    model.params = [(w, np.zeros(10, dtype=w.dtype) if b is None else np.asarray(b, dtype=w.dtype)), ()]
    return model


def digit_batch(n, split="test"):
    """The first ``n`` real MNIST examples, or synthetic stripe digits when the files are absent."""
    from advtrain.data import load_split, split_from_arrays
    if (MNIST_DIR / "t10k-images-idx3-ubyte").exists() or (MNIST_DIR / "t10k-images-idx3-ubyte.gz").exists():
        return load_split(MNIST_DIR, split, n)
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, n)
    raw = np.zeros((n, 28, 28), dtype=np.uint8)
    for i, y in enumerate(labels):
        raw[i, 2 + 2 * y: 4 + 2 * y, 4:24] = 250
    return split_from_arrays(split, raw, labels)


ACCEPTANCE_RESULTS = []


def record_criterion(number, title, ok, detail):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)

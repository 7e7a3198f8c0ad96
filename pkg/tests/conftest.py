import struct

import numpy as np
import pytest


def write_mnist(root, n_train=60, n_test=20, seed=0):
    """Tiny synthetic MNIST in IDX format: class k lights up row band k."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for split, n, names in (("train", n_train, ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")),
                            ("test", n_test, ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))):
        labels = rng.integers(0, 10, size=n).astype(np.uint8)
        images = rng.integers(0, 40, size=(n, 28, 28)).astype(np.uint8)
        for i, k in enumerate(labels):
            images[i, 2 * k + 4:2 * k + 7, 4:24] = 230
        (root / names[0]).write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + images.tobytes())
        (root / names[1]).write_bytes(struct.pack(">II", 0x801, n) + labels.tobytes())
    return root


@pytest.fixture
def mnist_dir(tmp_path):
    return write_mnist(tmp_path / "mnist")

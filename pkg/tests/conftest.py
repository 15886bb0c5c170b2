import numpy as np
import pytest

from tdsnet.episodes import SyntheticSpec, generate_synthetic, load_dataset
from tdsnet.tensor import Tensor, precision


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f at x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def check_grads(build, arrays, tol=1e-5, h=1e-6, dtype="float64"):
    """build(*tensors) -> scalar Tensor; compare backprop with central differences for every input."""
    with precision(dtype):
        ts = [Tensor(a.copy(), requires_grad=True, dtype=dtype) for a in arrays]
        build(*ts).backward()
        for t in ts:
            num = numeric_grad(lambda: float(build(*ts).data), t.data, h)
            err = np.abs(t.grad - num) / np.maximum(np.maximum(np.abs(t.grad), np.abs(num)), 1e-6)
            assert err.max() <= tol, f"max rel err {err.max():.2e}"


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 classes (5 auxiliary, 1 val, 2 test) of 16px glyphs, 6 images each."""
    root = tmp_path_factory.mktemp("small_synth")
    spec = SyntheticSpec(image_size=16, n_classes=8, n_auxiliary=5, n_val=1, images_per_class=6, seed=3)
    generate_synthetic(spec, root)
    return root, load_dataset(root)


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default synthetic benchmark: 25 classes at 84px, 20 auxiliary and 5 test."""
    root = tmp_path_factory.mktemp("default_synth")
    generate_synthetic(SyntheticSpec(), root)
    return root, load_dataset(root)

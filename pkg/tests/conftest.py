import numpy as np
import pytest

from pdseg.data import SceneConfig, default_profiles, gen_scene


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small in-memory dataset shared by training-path tests."""
    profs = [default_profiles()[n] for n in ("sharp", "smooth", "quantized", "sensor")]
    cfg = SceneConfig(seed=11)
    train = [gen_scene(cfg, i, profs) for i in range(10)]
    test = [gen_scene(cfg, 100_000 + i, profs) for i in range(5)]
    return train, test


def finite_difference(fn, tensors, eps=1e-6):
    """Dense central-difference gradients of a scalar fn; oracle for
    backward implementations (float64 only)."""
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            fp = float(fn().data.reshape(()))
            flat[i] = saved - eps
            fm = float(fn().data.reshape(()))
            flat[i] = saved
            g[i] = (fp - fm) / (2 * eps)
        grads.append(g.reshape(t.data.shape))
    return grads

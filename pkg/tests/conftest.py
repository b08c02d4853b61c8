import numpy as np
import pytest


def central_difference(f, arrays, h=1e-6, entries=None):
    """Central differences of scalar ``f()`` w.r.t. entries of the given ndarrays.

    Arrays are perturbed in place and restored.  ``entries`` maps array index
    to a list of flat indices; default is every entry of every array.
    """
    out = []
    for k, a in enumerate(arrays):
        idx = range(a.size) if entries is None else entries.get(k, [])
        g = np.zeros(a.size)
        flat = a.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g.reshape(a.shape))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)

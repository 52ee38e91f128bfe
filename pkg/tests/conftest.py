import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def direct_conv3d(x, w, stride, pad):
    """Loop-nest cross-correlation used as an independent oracle."""
    c_in, t, h, wd = x.shape
    c_out, _, kt, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad[0],) * 2, (pad[1],) * 2, (pad[2],) * 2))
    to = (t + 2 * pad[0] - kt) // stride[0] + 1
    ho = (h + 2 * pad[1] - kh) // stride[1] + 1
    wo = (wd + 2 * pad[2] - kw) // stride[2] + 1
    out = np.zeros((c_out, to, ho, wo))
    for o in range(c_out):
        for i in range(to):
            for j in range(ho):
                for k in range(wo):
                    patch = xp[:, i * stride[0]: i * stride[0] + kt, j * stride[1]: j * stride[1] + kh,
                               k * stride[2]: k * stride[2] + kw]
                    out[o, i, j, k] = np.sum(patch * w[o])
    return out

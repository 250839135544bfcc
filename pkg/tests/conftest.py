import numpy as np
import pytest

from pipecnn.model import (AcceleratorConfig, FeatureMap, LayerDescriptor,
                           TensorShape, WeightBank)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_conv_setup(rng, w=8, h=8, c=4, m=2, k=3, s=1, p=0, vec=4, cu=1,
                      groups=1, relu=False, pool=None, lrn=None, signed=True,
                      reg_depth=8):
    """A random conv layer with matching tensors, bank, bias, and config."""
    layer = LayerDescriptor("conv", k, s, p, TensorShape(w=w, h=h, c=c), m,
                            relu=relu, pool=pool, lrn=lrn, groups=groups)
    cfg = AcceleratorConfig(vec_size=vec, cu_num=cu, reg_depth=reg_depth)
    lo = -0.5 if signed else 0.0
    dense_in = rng.random((h, w, c), dtype=np.float32) + np.float32(lo)
    cg = layer.channels_per_group
    dense_w = rng.random((m, k, k, cg), dtype=np.float32) + np.float32(lo)
    bias = rng.random(m, dtype=np.float32) + np.float32(lo)
    fm = FeatureMap.from_dense(dense_in, vec)
    bank = WeightBank.from_dense(dense_w, vec)
    return layer, cfg, fm, bank, dense_in, dense_w, bias

"""Shared gradient-check helpers for the test suite."""
import numpy as np

from fusenet.layers import softmax_cross_entropy, softmax_cross_entropy_backward
from fusenet.tensor import grad_check


def layer_grad_error(layer, x, training=True, eps=1e-6, seed=0):
    """grad_check of ``sum(coeff * layer(x))`` w.r.t. the layer parameters and
    the input, with fixed random coefficients."""
    from fusenet.tensor import Parameter

    rng = np.random.default_rng(seed)
    coeff = rng.standard_normal(layer.forward(x.copy(), training).shape)
    xp = Parameter("input", x.copy())

    def f():
        return float(np.sum(coeff * layer.forward(xp.value, training)))

    def analytic():
        layer.forward(xp.value, training)
        xp.grad[...] = layer.backward(coeff)

    return grad_check(f, layer.params() + [xp], eps=eps, analytic=analytic)


def network_loss_fns(model_forward, model_backward, y):
    def f():
        return softmax_cross_entropy(model_forward(), y)[0]

    def analytic():
        logits = model_forward()
        _, probs = softmax_cross_entropy(logits, y)
        model_backward(softmax_cross_entropy_backward(probs, y))

    return f, analytic


def micro_fusion(seed, kind="multi_abstract", modalities=("a", "b"), training=True):
    """A two-modality multi-abstract network small enough for finite differences.

    4x4 inputs, two conv blocks of three channels, FC3 read from pool1 and
    FC6 from pool2, 3-wide embeddings, a 4-wide fusion layer and 3 classes.
    Returns ``(net, X, y, f, analytic)`` for a softmax cross-entropy loss
    over a batch of 6.
    """
    from fusenet.fusion import FusionHead, FusionNetwork
    from fusenet.modality import ModalityNetwork, NetworkSpec, TapSpec

    rng = np.random.default_rng(seed)
    backbones, dims = {}, {}
    for k, m in enumerate(modalities):
        spec = NetworkSpec(m, (1, 4, 4), ((1, 3), (1, 3)), None, 1, 3,
                           [TapSpec("FC3", "pool1", "maxpool2", 3), TapSpec("FC6", "pool2", "maxpool1", 3)])
        backbones[m] = ModalityNetwork(spec, None, seed=seed * 10 + k, keep_prob=1.0)
        for t in ("FC3", "FC6"):
            dims[(m, t)] = 3
    head = FusionHead(kind, list(modalities), dims, 3, fusion_dim=4, keep_prob=1.0, seed=seed)
    net = FusionNetwork(backbones, head)
    X = {m: rng.standard_normal((6, 1, 4, 4)) for m in modalities}
    y = rng.integers(0, 3, 6)
    f, analytic = network_loss_fns(lambda: net.forward(X, training), net.backward, y)
    return net, X, y, f, analytic

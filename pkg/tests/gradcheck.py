"""Central finite-difference oracle for the network loss."""

import numpy as np

from webface import nn_core


def numeric_grad(net, x, y, layer, name, idx, h=1e-5):
    p = net.params[layer][name].reshape(-1)
    old = p[idx]
    p[idx] = old + h
    lp = nn_core.batch_loss(net, x, y)
    p[idx] = old - h
    lm = nn_core.batch_loss(net, x, y)
    p[idx] = old
    return (lp - lm) / (2 * h)


def rel_err(a, b, floor=1e-7):
    return abs(a - b) / max(abs(a) + abs(b), floor)


def worst_relative_error(net, x, y, rng, per_tensor=12):
    """Largest relative error over a random sample of entries of every parameter tensor."""
    grads = nn_core.backward(net, nn_core.forward(net, x), y)
    worst = {}
    for i, p in enumerate(net.params):
        for name, arr in p.items():
            g = grads[i][name].reshape(-1)
            picks = rng.choice(arr.size, size=min(per_tensor, arr.size), replace=False)
            errs = [rel_err(numeric_grad(net, x, y, i, name, k), g[k]) for k in picks]
            worst[(net.config.layers[i].name, name)] = max(errs)
    return worst


def perturb_biases(net, rng, scale=0.1):
    """Nonzero biases so ReLU kinks sit away from the sampled points."""
    for p in net.params:
        if p:
            p["b"][...] = scale * rng.standard_normal(p["b"].shape)

"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    BatchNorm, Conv, Dense, GlobalAvgPool, GlobalMaxPool, MaxPool, ReLU, Sequential, Softmax,
    UNetCore, Upsample,
)
from .net import MiniNet, NonFiniteError, cross_entropy, cross_entropy_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str | None
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def to_json(self):
        return {"max_rel_error": self.max_rel_error, "worst_parameter": self.worst_parameter,
                "n_checked": self.n_checked, "tol": self.tol, "passed": self.passed}


def rel_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def linear_probe(out, weights):
    """Loss sum(out * weights); lets any layer output be checked, not just probabilities."""
    return float((out * weights).sum()), weights


def grad_check(net: MiniNet, batch, targets, h=1e-5, tol=1e-4, loss="cross_entropy",
               max_per_tensor=12, seed=0, check_input=False) -> GradCheckReport:
    """Compare backprop against central differences on sampled parameter entries.

    With ``check_input`` the gradient with respect to sampled input entries is
    compared as well. The loss is evaluated in training mode; batchnorm
    running statistics are restored after every perturbed evaluation so they
    cannot leak into the comparison.
    """
    if loss == "cross_entropy":
        def loss_pair(p):
            return cross_entropy(p, targets), cross_entropy_grad(p, targets)
    else:
        def loss_pair(p):
            return loss(p, targets)

    def loss_value(p):
        return loss_pair(p)[0]

    buffers = {name: arr.copy() for name, _, _, arr in net.named_tensors("buffers")}

    def restore():
        for name, layer, key, _ in net.named_tensors("buffers"):
            layer.buffers[key] = buffers[name].copy()

    batch = np.array(batch, dtype=np.float64)
    value, dout = loss_pair(net.forward(batch, training=True))
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value}")
    dx = net.backward(dout)
    grads = {k: g.copy() for k, g in net.gradients().items()}
    restore()
    rng = np.random.default_rng(seed)
    worst, worst_name, count = 0.0, None, 0
    tensors = [(name, arr, grads[name]) for name, _, _, arr in net.named_tensors("params")]
    if check_input:
        if dx is None:
            raise ValueError("network does not propagate an input gradient")
        tensors.append(("input", batch, dx))
    for name, arr, grad in tensors:
        flat = arr.reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > max_per_tensor:
            picks = rng.choice(flat.size, size=max_per_tensor, replace=False)
        g = grad.reshape(-1)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            up = loss_value(net.forward(batch, training=True))
            restore()
            flat[i] = old - h
            down = loss_value(net.forward(batch, training=True))
            restore()
            flat[i] = old
            numeric = (up - down) / (2 * h)
            err = rel_error(g[i], numeric)
            count += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{int(i)}]"
    return GradCheckReport(float(worst), worst_name, count, tol)


def _case(layers, in_shape, seed, probe=True, targets=None):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=in_shape)
    net = MiniNet(Sequential(layers))
    if probe:
        w = rng.normal(size=net.forward(x, training=True).shape)
        return net, x, w, (lambda out, t: linear_probe(out, t))
    return net, x, targets, "cross_entropy"


def layer_cases(seed=0):
    """One small network per layer type, each isolating that layer's backward."""
    rng = np.random.default_rng(seed)
    cases = {
        "conv2d": _case([Conv(2, 3, 3, 2, rng=rng)], (2, 2, 6, 5), seed),
        "conv3d": _case([Conv(2, 2, 3, 3, rng=rng)], (2, 2, 4, 5, 4), seed),
        "batchnorm": _case([BatchNorm(3)], (4, 3, 5, 4), seed),
        "relu": _case([ReLU()], (2, 3, 5, 4), seed),
        "maxpool": _case([MaxPool((2, 2))], (2, 2, 6, 4), seed),
        "maxpool3d": _case([MaxPool((1, 2, 2))], (2, 2, 2, 4, 4), seed),
        "upsample": _case([Upsample((2, 2))], (2, 2, 3, 4), seed),
        "global_avg_pool": _case([GlobalAvgPool()], (2, 3, 4, 5), seed),
        "global_max_pool": _case([GlobalMaxPool()], (2, 3, 4, 5), seed),
        "dense": _case([Dense(5, 3, rng=rng)], (4, 5), seed),
        "softmax": _case([Softmax()], (3, 4, 2, 2), seed),
        "softmax_cross_entropy": _case([Dense(5, 3, rng=rng), Softmax()], (6, 5), seed,
                                       probe=False, targets=rng.integers(0, 3, size=6)),
    }
    unet = UNetCore(1, 4, 2, 2, rng, n_convs=1)
    xs = rng.normal(size=(2, 1, 8, 8))
    cases["unet"] = (MiniNet(unet), xs, rng.integers(0, 4, size=(2, 8, 8)), "cross_entropy")
    return cases


def layer_suite(seed=0, tol=1e-4, max_per_tensor=400) -> dict:
    """Gradient-check report for every layer type (parameters and input).

    The U-Net skips its input gradient by design, so only its parameters are checked.
    """
    out = {}
    for name, (net, x, targets, loss) in layer_cases(seed).items():
        out[name] = grad_check(net, x, targets, tol=tol, loss=loss, max_per_tensor=max_per_tensor,
                               seed=seed, check_input=name != "unet")
    return out

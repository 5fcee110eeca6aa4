"""Finite-difference verification of every layer and branch sub-network.

Each check draws seeded random parameters and inputs, runs the analytic
backward pass, and compares against central differences. Layer checks probe
every parameter on every trial; the larger sub-network checks probe every
parameter on the first trial and a random subset on the remaining trials to
stay fast.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .branch import Branch
from .features import FeatureGeometry
from .rng import substream

__all__ = ["run_suite", "check_layer_trials", "REL_TOL"]

REL_TOL = 1e-4
_STEP = 1e-4


def _rel_err(a: float, b: float, floor: float = REL_TOL) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _fd_params(loss_fn, layers, analytic, max_params, rng) -> float:
    """Central differences over (a sample of) parameters vs stored grads."""
    worst = 0.0
    for li, layer in enumerate(layers):
        for name, p in layer.params.items():
            g = analytic[li][name].ravel()
            pf = p.ravel()
            idx = np.arange(pf.size)
            if max_params is not None and pf.size > max_params:
                idx = rng.choice(pf.size, size=max_params, replace=False)
            for i in idx:
                orig = pf[i]
                pf[i] = orig + _STEP
                lp = loss_fn()
                pf[i] = orig - _STEP
                lm = loss_fn()
                pf[i] = orig
                worst = max(worst, _rel_err((lp - lm) / (2 * _STEP), g[i]))
    return worst


def _fd_input(loss_fn, x, gx) -> float:
    worst = 0.0
    xf, gf = x.ravel(), gx.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + _STEP
        lp = loss_fn()
        xf[i] = orig - _STEP
        lm = loss_fn()
        xf[i] = orig
        worst = max(worst, _rel_err((lp - lm) / (2 * _STEP), gf[i]))
    return worst


def _snapshot_grads(layers):
    return [{k: v.copy() for k, v in layer.grads.items()} for layer in layers]


def check_layer_trials(name: str, rng: np.random.Generator, trials: int) -> float:
    """FD check for one layer type over ``trials`` seeded random inputs."""
    worst = 0.0
    for _ in range(trials):
        if name == "conv2d":
            layer = nn.Conv2D(3, 7, 2, 3, rng, std=0.5)
            x = rng.normal(size=(1, 4, 8, 2))
        elif name == "fully_connected":
            layer = nn.Dense(8, 5, rng, std=0.5)
            x = rng.normal(size=(2, 8))
        elif name == "locally_connected":
            layer = nn.LocallyConnected(3, 4, rng, std=0.5)
            x = rng.normal(size=(2, 3, 4))
        elif name == "spatial_softmax":
            layer = nn.SpatialSoftmax()
            x = rng.normal(size=(1, 3, 4))
        elif name == "relu":
            layer = nn.ReLU()
            x = rng.normal(size=(2, 3, 4))
            x[np.abs(x) < 0.1] += 0.2  # keep clear of the kink
        elif name == "sigmoid":
            layer = nn.Sigmoid()
            x = rng.normal(size=(2, 3, 4))
        else:
            raise ValueError(name)
        c = rng.normal(size=layer.forward(x).shape)

        def loss_fn():
            return float((layer.forward(x) * c).sum())

        loss_fn()
        gx = layer.backward(c)
        if layer.params:
            worst = max(worst, _fd_params(loss_fn, [layer],
                                          _snapshot_grads([layer]), None, rng))
        worst = max(worst, _fd_input(loss_fn, x, gx))
    return worst


def _check_vis_net(branch: Branch, rng, trials, max_params) -> float:
    worst = 0.0
    h, w, c = branch.geom.height, branch.geom.width, branch.geom.channels
    for trial in range(trials):
        x = rng.normal(size=(1, h, w, c))
        t = (rng.uniform(size=(1, h, w)) > 0.5).astype(float)

        def loss_fn():
            return nn.cross_entropy(branch.visibility_batch(x), t)

        v = branch.visibility_batch(x)
        dv = nn.cross_entropy_grad(v, t)
        dlin = branch.vis_sig.backward(dv.reshape(1, -1))
        dz = branch.vis_relu.backward(branch.vis_fc.backward(dlin))
        branch.vis_conv.backward(dz)
        worst = max(worst, _fd_params(loss_fn, branch.vis_layers,
                                      _snapshot_grads(branch.vis_layers),
                                      None if trial == 0 else max_params, rng))
    return worst


def _check_att_net(branch: Branch, rng, trials) -> float:
    worst = 0.0
    h, w = branch.geom.height, branch.geom.width
    for _ in range(trials):
        v = rng.uniform(size=(1, h, w))
        c = rng.normal(size=(1, h, w))

        def loss_fn():
            return float((branch.att_soft.forward(branch.att_local.forward(v)) * c).sum())

        loss_fn()
        branch.att_local.backward(branch.att_soft.backward(c))
        worst = max(worst, _fd_params(loss_fn, [branch.att_local],
                                      _snapshot_grads([branch.att_local]), None, rng))
    return worst


def _check_cls_net(branch: Branch, rng, trials, max_params) -> float:
    worst = 0.0
    h, w, c = branch.geom.height, branch.geom.width, branch.geom.channels
    for trial in range(trials):
        x = rng.normal(size=(1, h, w, c))

        def loss_fn():
            z = branch.cls_relu.forward(branch.cls_conv.forward(x))
            p = branch.cls_sig.forward(branch.cls_fc.forward(z))
            return nn.cross_entropy(p, np.ones_like(p))

        z = branch.cls_relu.forward(branch.cls_conv.forward(x))
        p = branch.cls_sig.forward(branch.cls_fc.forward(z))
        dp = nn.cross_entropy_grad(p, np.ones_like(p))
        dz = branch.cls_relu.backward(branch.cls_fc.backward(branch.cls_sig.backward(dp)))
        branch.cls_conv.backward(dz)
        worst = max(worst, _fd_params(loss_fn, branch.cls_layers,
                                      _snapshot_grads(branch.cls_layers),
                                      None if trial == 0 else max_params, rng))
    return worst


def _check_full_branch(branch: Branch, rng, trials, max_params) -> float:
    worst = 0.0
    h, w, c = branch.geom.height, branch.geom.width, branch.geom.channels
    for trial in range(trials):
        x = rng.normal(size=(2, h, w, c))
        t = np.array([1.0, 0.0])
        wgt = np.array([0.5, 0.5])

        def loss_fn():
            p, _, _ = branch.forward(x, True)
            pc = np.clip(p, nn.CE_EPS, 1 - nn.CE_EPS)
            return float(np.dot(wgt, -(t * np.log(pc) + (1 - t) * np.log(1 - pc))))

        p, _, psi = branch.forward(x, True)
        pc = np.clip(p, nn.CE_EPS, 1 - nn.CE_EPS)
        dp = wgt * (-(t / pc) + (1 - t) / (1 - pc))
        branch._backward(dp, x, psi, True)
        worst = max(worst, _fd_params(loss_fn, branch.param_layers,
                                      _snapshot_grads(branch.param_layers),
                                      None if trial == 0 else max_params, rng))
    return worst


def run_suite(seed: int = 0, layer_trials: int = 100, net_trials: int = 5,
              max_params: int = 40) -> dict[str, float]:
    """Max relative FD error per check; all must stay below REL_TOL."""
    results: dict[str, float] = {}
    for name in ("conv2d", "fully_connected", "locally_connected",
                 "spatial_softmax", "relu", "sigmoid"):
        results[name] = check_layer_trials(name, substream(seed, f"layer:{name}"),
                                           layer_trials)
    geom = FeatureGeometry(width=7, height=3, channels=2)
    rng = substream(seed, "subnets")
    branch = Branch(geom, rng)
    results["vis_net"] = _check_vis_net(branch, rng, net_trials, max_params)
    results["att_net"] = _check_att_net(branch, rng, net_trials)
    results["cls_net"] = _check_cls_net(branch, rng, net_trials, max_params)
    results["full_branch"] = _check_full_branch(branch, rng, net_trials, max_params)
    return results

"""Central-difference oracles for the analytic gradients.

Every check compares a hand-derived gradient against symmetric finite
differences at float64.  The objectives are piecewise (argmax choices, sign
patterns, pooling routes, relu activation patterns), so each probed
coordinate carries a routing signature; coordinates whose signature changes
between the two probe points sit on a kink and are skipped rather than
compared against a meaningless difference quotient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .disout import (
    DistortionState,
    erc_surrogate_conv,
    erc_surrogate_fc,
    exact_grad_conv,
    exact_grad_fc,
)
from .nn import (
    backward,
    conv as conv_spec,
    dense,
    flatten,
    forward,
    init_network,
    maxpool,
    relu,
    softmax_ce,
    softmax_crossentropy,
)
from .tensor import conv2d

REL_FLOOR = 1e-4


@dataclass
class SuiteResult:
    """Outcome of one gradient-check sweep."""

    name: str
    instances: int
    checked: int
    skipped: int
    max_rel_err: float
    worst_seed: int

    def ok(self, tol: float = 1e-5) -> bool:
        return self.checked > 0 and self.max_rel_err < tol


def central_diff(fn, x: np.ndarray, h: float = 1e-5):
    """Symmetric differences of a scalar function, one coordinate at a time.

    ``fn`` maps an array like ``x`` to ``(value, signature)``.  Returns the
    difference quotients and a boolean mask of coordinates whose signature
    matched the base point on both sides.
    """
    x = np.asarray(x, dtype=np.float64)
    _, base_sig = fn(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    stable = np.ones(x.shape, dtype=bool)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        fp, sp = fn(xp)
        xm = x.copy()
        xm[idx] -= h
        fm, sm = fn(xm)
        grad[idx] = (fp - fm) / (2.0 * h)
        stable[idx] = (sp == base_sig) and (sm == base_sig)
    return grad, stable


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise relative error with a floor so near-zero pairs compare
    against ``REL_FLOOR`` instead of each other."""
    a = np.abs(analytic)
    b = np.abs(numeric)
    denom = np.maximum(np.maximum(a, b), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def _fc_instance(seed: int, n: int = 8, d: int = 24, d_next: int = 12,
                 p: float = 0.5, lam: float = 0.1) -> dict:
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((n, d))
    k_next = rng.standard_normal((d_next, d))
    sigma = (2.0 * rng.integers(0, 2, size=n) - 1.0).astype(np.float64)
    mask = (rng.random((n, d)) < p).astype(np.float64)
    epsilon = f + 0.25 * rng.standard_normal((n, d))
    return {"f": f, "k_next": k_next, "sigma": sigma, "mask": mask,
            "epsilon": epsilon, "lam": lam}


def _fc_value_sig(inst: dict, epsilon: np.ndarray):
    f_hat = inst["f"] - inst["mask"] * epsilon
    terms = erc_surrogate_fc(inst["k_next"], f_hat, inst["sigma"],
                             epsilon, inst["lam"])
    inner = inst["k_next"] @ (inst["sigma"] @ f_hat)
    k_hat = int(np.argmax(np.abs(inner)))
    s = 1.0 if inner[k_hat] >= 0 else -1.0
    return terms.total, (k_hat, s)


def check_fc_instance(seed: int, h: float = 1e-5, grad_fn=exact_grad_fc):
    """Max relative error of the dense-guided gradient on one instance."""
    inst = _fc_instance(seed)
    f_hat = inst["f"] - inst["mask"] * inst["epsilon"]
    analytic = grad_fn(inst["k_next"], f_hat, inst["sigma"], inst["mask"],
                       inst["epsilon"], inst["lam"])
    numeric, stable = central_diff(lambda e: _fc_value_sig(inst, e),
                                   inst["epsilon"], h)
    rel = relative_errors(analytic, numeric)
    checked = int(stable.sum())
    worst = float(rel[stable].max()) if checked else 0.0
    return worst, checked, int((~stable).sum())


_CONV_GEOMS = ((1, 0), (1, 1), (2, 1), (2, 0))


def _conv_instance(seed: int, n: int = 3, c: int = 2, hw: int = 6,
                   k: int = 3, kernel: int = 3, p: float = 0.5,
                   lam: float = 0.1) -> dict:
    rng = np.random.default_rng(seed)
    stride, padding = _CONV_GEOMS[seed % len(_CONV_GEOMS)]
    f = rng.standard_normal((n, c, hw, hw))
    k_next = rng.standard_normal((k, c, kernel, kernel))
    sigma = (2.0 * rng.integers(0, 2, size=n) - 1.0).astype(np.float64)
    mask = (rng.random(f.shape) < p).astype(np.float64)
    epsilon = f + 0.25 * rng.standard_normal(f.shape)
    return {"f": f, "k_next": k_next, "sigma": sigma, "mask": mask,
            "epsilon": epsilon, "lam": lam, "stride": stride,
            "padding": padding}


def _conv_value_sig(inst: dict, epsilon: np.ndarray):
    f_hat = inst["f"] - inst["mask"] * epsilon
    terms = erc_surrogate_conv(inst["k_next"], f_hat, inst["sigma"], epsilon,
                               inst["lam"], inst["stride"], inst["padding"])
    g = np.einsum("i,ichw->chw", inst["sigma"], f_hat)
    q = conv2d(g[None], inst["k_next"], inst["stride"], inst["padding"])[0]
    per_filter = np.abs(q).sum(axis=(1, 2))
    k_hat = int(np.argmax(per_filter))
    return terms.total, (k_hat, np.sign(q[k_hat]).tobytes())


def check_conv_instance(seed: int, h: float = 1e-5, grad_fn=exact_grad_conv):
    """Max relative error of the conv-guided gradient on one instance."""
    inst = _conv_instance(seed)
    f_hat = inst["f"] - inst["mask"] * inst["epsilon"]
    analytic = grad_fn(inst["k_next"], f_hat, inst["sigma"], inst["mask"],
                       inst["epsilon"], inst["lam"], inst["stride"],
                       inst["padding"])
    numeric, stable = central_diff(lambda e: _conv_value_sig(inst, e),
                                   inst["epsilon"], h)
    rel = relative_errors(analytic, numeric)
    checked = int(stable.sum())
    worst = float(rel[stable].max()) if checked else 0.0
    return worst, checked, int((~stable).sum())


def _run(name, seeds, check):
    checked = skipped = 0
    max_rel = 0.0
    worst_seed = -1
    for seed in seeds:
        rel, n_ok, n_skip = check(seed)
        checked += n_ok
        skipped += n_skip
        if rel > max_rel:
            max_rel = rel
            worst_seed = seed
    return SuiteResult(name, len(list(seeds)), checked, skipped,
                       max_rel, worst_seed)


def run_fc_suite(instances: int = 60, seed: int = 1000, h: float = 1e-5,
                 grad_fn=exact_grad_fc) -> SuiteResult:
    seeds = range(seed, seed + instances)
    return _run("fc", seeds, lambda s: check_fc_instance(s, h, grad_fn))


def run_conv_suite(instances: int = 40, seed: int = 2000, h: float = 1e-5,
                   grad_fn=exact_grad_conv) -> SuiteResult:
    return _run("conv", range(seed, seed + instances),
                lambda s: check_conv_instance(s, h, grad_fn))


def _net_instance(seed: int):
    """A small network, batch, and frozen distortion states for FD probes."""
    rng = np.random.default_rng(seed)
    if seed % 2 == 0:
        layers = [flatten(), dense(0, 5), relu(distort=True),
                  dense(5, 3), softmax_ce()]
        input_shape = (6,)
        x = rng.standard_normal((4, 6))
    else:
        layers = [conv_spec(0, 3, 3, padding=1), relu(distort=True),
                  maxpool(2, 2), flatten(), dense(0, 3), softmax_ce()]
        input_shape = (2, 6, 6)
        x = rng.standard_normal((4, 2, 6, 6))
    net = init_network(layers, input_shape, rng, dtype=np.float64)
    labels = rng.integers(0, 3, size=4)
    states = {}
    for i, ly in enumerate(net.layers):
        if ly.kind == "relu" and ly.distort:
            shape = (4, 5) if seed % 2 == 0 else (4, 3, 6, 6)
            mask = (rng.random(shape) < 0.5).astype(np.float64)
            epsilon = 0.5 * rng.standard_normal(shape)
            states[i] = DistortionState(mask=mask, epsilon=epsilon,
                                        sigma=np.ones(4), p_effective=0.3)
    return net, x, labels, states


def _routing_sig(net, cache) -> bytes:
    parts = []
    for i, ly in enumerate(net.layers):
        if ly.kind == "relu":
            parts.append((cache.inputs[i] > 0).tobytes())
        elif ly.kind == "maxpool":
            parts.append(cache.pool_idx[i].tobytes())
    return b"".join(parts)


def check_backprop_instance(seed: int, h: float = 1e-5):
    """Compare backprop parameter gradients against loss differences."""
    net, x, labels, states = _net_instance(seed)
    logits, cache = forward(net, x, distortion=states, mode="train")
    grads = backward(net, cache, labels)

    def loss_of(key):
        def fn(value):
            saved = net.params[key]
            net.params[key] = value
            try:
                lg, ch = forward(net, x, distortion=states, mode="train")
                loss, _ = softmax_crossentropy(lg, labels)
            finally:
                net.params[key] = saved
            return loss, _routing_sig(net, ch)
        return fn

    max_rel = 0.0
    checked = skipped = 0
    for key in sorted(net.params):
        numeric, stable = central_diff(loss_of(key), net.params[key], h)
        rel = relative_errors(grads[key], numeric)
        checked += int(stable.sum())
        skipped += int((~stable).sum())
        if stable.any():
            max_rel = max(max_rel, float(rel[stable].max()))
    return max_rel, checked, skipped


def run_backprop_suite(instances: int = 8, seed: int = 3000,
                       h: float = 1e-5) -> SuiteResult:
    seeds = range(seed, seed + instances)
    return _run("backprop", seeds, lambda s: check_backprop_instance(s, h))

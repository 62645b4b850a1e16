"""Central finite-difference checks of every analytic gradient in the package.

Run from the command line with ``forgetprobe gradcheck``; the test-suite uses
the same helpers. All checks run in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore
from .models import ModelKind, assemble
from .nncore import IDENTITY, RELU, LayerSpec

STEP = 1e-4
RTOL = 1e-3
ATOL = 1e-8
KINK_GUARD = 1e-3


def finite_difference(loss_fn, array: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. each entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return grad


def max_violation(analytic, numeric, rtol: float = RTOL, atol: float = ATOL) -> float:
    """Largest ``|a - n| - (rtol * max(|a|, |n|) + atol)``; <= 0 means every entry agrees."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    bound = rtol * np.maximum(np.abs(a), np.abs(n)) + atol
    return float(np.max(np.abs(a - n) - bound))


@dataclass
class CheckResult:
    name: str
    instance: int
    violation: float

    @property
    def passed(self) -> bool:
        return self.violation <= 0


def _near_kink(preacts) -> bool:
    return any(np.min(np.abs(z)) < KINK_GUARD for z in preacts if z.size)


def _network_instance(rng):
    while True:
        depth = int(rng.integers(1, 4))
        widths = [int(w) for w in rng.integers(1, 9, size=depth + 1)]
        acts = [str(a) for a in rng.choice([RELU, IDENTITY], size=depth)]
        layers = [LayerSpec(a, b, act) for a, b, act in zip(widths[:-1], widths[1:], acts)]
        net = nncore.init_weights(layers, int(rng.integers(2 ** 31)), dtype=np.float64)
        for b in net.weights[1::2]:
            b[...] = rng.normal(0, 0.3, b.shape)
        x = rng.normal(size=(int(rng.integers(1, 5)), widths[0]))
        pre = []
        h = x
        for i in range(depth):
            z = h @ net.weights[2 * i] + net.weights[2 * i + 1]
            if acts[i] == RELU:
                pre.append(z)
            h = np.maximum(z, 0) if acts[i] == RELU else z
        if not _near_kink(pre):
            return net, x


def check_network(rng, instance: int) -> list[CheckResult]:
    net, x = _network_instance(rng)
    target = rng.normal(size=(x.shape[0], net.out_width))

    def loss():
        return nncore.mse(net.forward(x)[-1], target)[0]

    acts = net.forward(x)
    grads, g_in = net.backward(x, acts, nncore.mse(acts[-1], target)[1], input_grad=True)
    worst = max(max_violation(g, finite_difference(loss, w)) for g, w in zip(grads, net.weights))
    worst = max(worst, max_violation(g_in, finite_difference(loss, x)))
    return [CheckResult("network", instance, worst)]


def check_losses(rng, instance: int) -> list[CheckResult]:
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 9))
    logits = rng.normal(size=(n, c)) * 2
    labels = rng.integers(0, c, size=n)
    ce = max_violation(nncore.cross_entropy(logits, labels)[1],
                       finite_difference(lambda: nncore.cross_entropy(logits, labels)[0], logits))

    out, tgt = rng.normal(size=(n, c)), rng.normal(size=(n, c))
    ms = max_violation(nncore.mse(out, tgt)[1], finite_difference(lambda: nncore.mse(out, tgt)[0], out))

    m = int(rng.integers(1, 5))
    mu, logvar = rng.normal(size=(n, m)), rng.normal(size=(n, m))

    def el():
        return nncore.elbo(out, tgt, mu, logvar)[0]

    _, (g_r, g_m, g_l) = nncore.elbo(out, tgt, mu, logvar)
    eb = max(max_violation(g, finite_difference(el, a)) for g, a in ((g_r, out), (g_m, mu), (g_l, logvar)))
    return [CheckResult("cross_entropy", instance, ce), CheckResult("mse", instance, ms),
            CheckResult("elbo", instance, eb)]


def check_model(rng, instance: int, kind: ModelKind) -> CheckResult:
    """Whole-model gradient (trunk, heads and, for the VAE, the reparameterized latent)."""
    while True:
        d = int(rng.integers(2, 7))
        model = assemble(kind, d, 2, int(rng.integers(1, 4)), int(rng.integers(2 ** 31)),
                         hidden=(int(rng.integers(2, 8)), int(rng.integers(2, 8))), dtype=np.float64)
        for net in model.networks():
            for b in net.weights[1::2]:
                b[...] = rng.normal(0, 0.3, b.shape)
        n = int(rng.integers(1, 5))
        x = rng.random((n, d))
        labels = rng.integers(0, 2, size=n)
        task = int(rng.integers(1, 3))
        eps = rng.normal(size=(n, model.bottleneck_width)) if kind is ModelKind.VAE else None
        fp = model.forward(x, task=task, eps=eps)
        relu_pre = [a for a in fp.enc + fp.dec]
        if kind is not ModelKind.VAE and model.bottleneck.layers[0].activation == RELU:
            relu_pre += fp.bottleneck
        # post-activation zeros hide the pre-activation; only reject live units that sit near the kink
        if not any(np.any((a > 0) & (a < KINK_GUARD)) for a in relu_pre):
            break

    params = model.trainable_parameters(task)

    def loss():
        return model.loss_and_grads(x, labels, task, eps=eps)[0]

    _, grads = model.loss_and_grads(x, labels, task, eps=eps)
    worst = max(max_violation(g, finite_difference(loss, p)) for g, p in zip(grads, params))
    return CheckResult(f"model/{kind.value}", instance, worst)


def run_suite(instances: int = 50, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for i in range(instances):
        results += check_network(rng, i)
        results += check_losses(rng, i)
        for kind in ModelKind:
            results.append(check_model(rng, i, kind))
    return results

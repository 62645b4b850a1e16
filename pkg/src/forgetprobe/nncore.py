"""Dense feed-forward networks with hand-written backprop, losses and Adam.

Everything here works on plain 2-D numpy arrays. Weights are stored per layer
as a ``(in_width, out_width)`` matrix followed by a ``(1, out_width)`` bias
row, so ``Network.weights`` alternates ``[W0, b0, W1, b1, ...]``.
Computations keep the dtype of their inputs: float32 for training, float64
when a finite-difference oracle needs it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError, StructuralError

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

DTYPE = np.float32


@dataclass(frozen=True)
class LayerSpec:
    in_width: int
    out_width: int
    activation: str = RELU

    def __post_init__(self):
        if self.in_width < 1 or self.out_width < 1:
            raise StructuralError(f"layer widths must be >= 1, got {self.in_width}->{self.out_width}")
        if self.activation not in ACTIVATIONS:
            raise StructuralError(f"unknown activation {self.activation!r}")


def chain(widths, final_activation=IDENTITY, activation=RELU) -> list[LayerSpec]:
    """Layer specs for consecutive ``widths``; only the last layer gets ``final_activation``."""
    specs = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        specs.append(LayerSpec(a, b, final_activation if last else activation))
    return specs


@dataclass
class Network:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise StructuralError("network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers[:-1], self.layers[1:])):
            if a.out_width != b.in_width:
                raise StructuralError(
                    f"layer {i} out_width {a.out_width} does not chain into layer {i + 1} in_width {b.in_width}")
        if len(self.weights) != 2 * len(self.layers):
            raise StructuralError(f"expected {2 * len(self.layers)} weight arrays, got {len(self.weights)}")
        for i, spec in enumerate(self.layers):
            w, b = self.weights[2 * i], self.weights[2 * i + 1]
            if w.shape != (spec.in_width, spec.out_width) or b.shape != (1, spec.out_width):
                raise StructuralError(
                    f"layer {i}: weight {w.shape} / bias {b.shape} do not match layer "
                    f"{spec.in_width}->{spec.out_width}")

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    def parameter_count(self) -> int:
        return int(sum(w.size for w in self.weights))

    def astype(self, dtype) -> "Network":
        return Network(list(self.layers), [w.astype(dtype) for w in self.weights], self.rng_seed)

    def copy(self) -> "Network":
        return self.astype(self.weights[0].dtype)

    def forward(self, batch: np.ndarray) -> list[np.ndarray]:
        """Post-activation output of every layer; the last entry is the network output."""
        if batch.ndim != 2:
            raise DimensionError(f"batch must be 2-D, got shape {batch.shape}")
        out = []
        h = batch
        for i, spec in enumerate(self.layers):
            if h.shape[1] != spec.in_width:
                raise DimensionError(f"layer {i} expects {spec.in_width} inputs, got {h.shape[1]}")
            z = h @ self.weights[2 * i]
            z += self.weights[2 * i + 1]
            if spec.activation == RELU:
                np.maximum(z, 0, out=z)
            h = z
            out.append(h)
        return out

    def backward(self, batch: np.ndarray, activations: list[np.ndarray], output_grad: np.ndarray,
                 input_grad: bool = False):
        """Gradients of the loss w.r.t. every weight array, given dLoss/dOutput.

        Returns the list of gradients in ``weights`` order; with ``input_grad``
        also returns dLoss/dBatch as a second value. Nothing is mutated.
        """
        if len(activations) != len(self.layers):
            raise StructuralError(f"got {len(activations)} activations for {len(self.layers)} layers")
        for i, (spec, a) in enumerate(zip(self.layers, activations)):
            if a.ndim != 2 or a.shape[1] != spec.out_width or a.shape[0] != batch.shape[0]:
                raise StructuralError(f"activation {i} has shape {a.shape}, inconsistent with layer {i}")
        if output_grad.shape != activations[-1].shape:
            raise DimensionError(
                f"output_grad shape {output_grad.shape} != output shape {activations[-1].shape}")
        grads: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        g = output_grad
        for i in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[i]
            if spec.activation == RELU:
                g = g * (activations[i] > 0)
            prev = activations[i - 1] if i > 0 else batch
            grads[2 * i] = prev.T @ g
            grads[2 * i + 1] = g.sum(axis=0, keepdims=True)
            if i > 0 or input_grad:
                g = g @ self.weights[2 * i].T
        if input_grad:
            return grads, g
        return grads


def init_weights(layers: list[LayerSpec], seed: int, dtype=DTYPE) -> Network:
    """He-uniform for ReLU layers, Xavier-uniform for identity layers, zero biases."""
    layers = list(layers)
    rng = np.random.default_rng(seed)
    weights = []
    for spec in layers:
        if spec.activation == RELU:
            limit = np.sqrt(6.0 / spec.in_width)
        else:
            limit = np.sqrt(6.0 / (spec.in_width + spec.out_width))
        weights.append(rng.uniform(-limit, limit, size=(spec.in_width, spec.out_width)).astype(dtype))
        weights.append(np.zeros((1, spec.out_width), dtype=dtype))
    return Network(layers, weights, seed)


# ---------------------------------------------------------------- losses

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be integer class indices, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"label out of range [0, {n_classes}): min {labels.min()}, max {labels.max()}")
    return labels.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


def mse(output: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if output.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {output.shape} vs {target.shape}")
    diff = output - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, (2.0 / diff.size) * diff


def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-sample KL(N(mu, exp(logvar)) || N(0, I))."""
    if mu.shape != logvar.shape:
        raise DimensionError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    return -0.5 * np.sum(1.0 + logvar - np.square(mu) - np.exp(logvar), axis=1)


def elbo(recon: np.ndarray, target: np.ndarray, mu: np.ndarray, logvar: np.ndarray):
    """Negative ELBO: per-sample summed squared error plus KL, averaged over the batch.

    Returns ``(loss, (d_recon, d_mu, d_logvar))``.
    """
    if recon.shape != target.shape:
        raise DimensionError(f"recon {recon.shape} and target {target.shape} differ")
    if mu.shape != logvar.shape:
        raise DimensionError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    if mu.shape[0] != recon.shape[0]:
        raise DimensionError(f"latent batch {mu.shape[0]} != reconstruction batch {recon.shape[0]}")
    n = recon.shape[0]
    diff = recon - target
    rec = float(np.sum(np.square(diff, dtype=np.float64)) / n)
    kl = float(np.sum(kl_divergence(mu.astype(np.float64), logvar.astype(np.float64))) / n)
    d_recon = (2.0 / n) * diff
    d_mu = mu / n
    d_logvar = 0.5 * (np.exp(logvar) - 1.0) / n
    return rec + kl, (d_recon, d_mu.astype(mu.dtype, copy=False), d_logvar.astype(logvar.dtype, copy=False))


# ---------------------------------------------------------------- optimizer

@dataclass
class Adam:
    """Adam with bias correction over an explicit list of parameter arrays.

    ``step`` updates the arrays in place so networks holding them see the change.
    """

    params: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.first_moment:
            self.first_moment = [np.zeros_like(p) for p in self.params]
        if not self.second_moment:
            self.second_moment = [np.zeros_like(p) for p in self.params]
        for p, m, v in zip(self.params, self.first_moment, self.second_moment):
            if m.shape != p.shape or v.shape != p.shape:
                raise StructuralError("moment buffers must match parameter shapes")

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise StructuralError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise StructuralError(f"gradient {i} shape {g.shape} != parameter shape {p.shape}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        scale = self.learning_rate * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
        eps_hat = self.epsilon * np.sqrt(1.0 - b2 ** t)
        for p, g, m, v in zip(self.params, grads, self.first_moment, self.second_moment):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p -= (scale * m / (np.sqrt(v) + eps_hat)).astype(p.dtype, copy=False)


def adam_step(opt: Adam, grads: list[np.ndarray]) -> Adam:
    opt.step(grads)
    return opt

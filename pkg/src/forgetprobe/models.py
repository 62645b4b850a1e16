"""The three model families sharing one fully connected trunk.

The trunk is ``d -> 512 -> 256 -> B -> 256 -> 512`` with ReLU on every layer
except the bottleneck, which is linear by default (``bottleneck_activation``
selects ReLU there as well). It is split into three networks: ``encoder`` (first two layers), ``bottleneck``
(256 -> B) and ``decoder`` (last two layers). The families differ only after
the trunk:

* discriminative: one 512 -> 2 head per task, trained with cross-entropy on
  the head of the active task only;
* autoencoder: a single 512 -> d linear output trained with MSE;
* vae: the bottleneck is linear and produces ``mu``; a parallel 256 -> B map
  produces ``logvar``; the decoder is driven by ``z = mu + exp(logvar/2) * eps``
  and the objective is the negative ELBO.

The representation of an input is the post-ReLU output of the last decoder
layer (512 wide), which is the penultimate layer for every family.
"""
from __future__ import annotations

import enum
import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .errors import ConfigurationError, FormatError, UsageError
from .nncore import IDENTITY, RELU, LayerSpec, Network

HIDDEN = (512, 256)
REPRESENTATION_WIDTH = 512
DEFAULT_BOTTLENECK = {"mnist": 8, "fashion": 8, "cifar10": 128}
VALID_INPUT_DIMS = (784, 3072)


class ModelKind(str, enum.Enum):
    DISCRIMINATIVE = "discriminative"
    AUTOENCODER = "autoencoder"
    VAE = "vae"

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        aliases = {"d": cls.DISCRIMINATIVE, "ae": cls.AUTOENCODER, "g_ae": cls.AUTOENCODER,
                   "g_vae": cls.VAE}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(
                f"unknown model kind {value!r}; choose from {', '.join(k.value for k in cls)}") from None


@dataclass
class ForwardPass:
    """Cached intermediates of one forward pass, consumed by ``Model.loss_and_grads``."""

    x: np.ndarray
    enc: list[np.ndarray]
    bottleneck: list[np.ndarray]
    z: np.ndarray
    dec: list[np.ndarray]
    head: list[np.ndarray] | None = None
    logvar: list[np.ndarray] | None = None
    eps: np.ndarray | None = None

    @property
    def representation(self) -> np.ndarray:
        return self.dec[-1]

    @property
    def output(self) -> np.ndarray:
        return self.head[-1]


@dataclass
class Model:
    kind: ModelKind
    input_dim: int
    n_tasks: int
    bottleneck_width: int
    seed: int
    encoder: Network
    bottleneck: Network
    decoder: Network
    heads: list[Network]
    logvar: Network | None = None
    noise_rng: np.random.Generator = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.noise_rng is None:
            self.noise_rng = np.random.default_rng([self.seed, 0x5EED])

    # -- structure

    @property
    def trunk_layers(self) -> list[LayerSpec]:
        return self.encoder.layers + self.bottleneck.layers + self.decoder.layers

    def trunk_networks(self) -> list[Network]:
        nets = [self.encoder, self.bottleneck, self.decoder]
        if self.logvar is not None:
            nets.append(self.logvar)
        return nets

    def networks(self) -> list[Network]:
        return self.trunk_networks() + list(self.heads)

    def parameters(self) -> list[np.ndarray]:
        return [w for net in self.networks() for w in net.weights]

    def trunk_parameters(self) -> list[np.ndarray]:
        return [w for net in self.trunk_networks() for w in net.weights]

    def head_for(self, task: int | None) -> Network:
        if self.kind is ModelKind.DISCRIMINATIVE:
            if task is None:
                raise UsageError("discriminative model needs an active task to select its head")
            if not 1 <= task <= self.n_tasks:
                raise UsageError(f"active task {task} outside 1..{self.n_tasks}")
            return self.heads[task - 1]
        return self.heads[0]

    def trainable_parameters(self, task: int | None) -> list[np.ndarray]:
        """Trunk parameters plus the head used for ``task``."""
        return self.trunk_parameters() + list(self.head_for(task).weights)

    # -- forward

    def forward(self, x: np.ndarray, task: int | None = None, sample: bool = True,
                eps: np.ndarray | None = None, with_head: bool = True) -> ForwardPass:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ConfigurationError(f"model expects inputs of width {self.input_dim}, got shape {x.shape}")
        enc = self.encoder.forward(x)
        bott = self.bottleneck.forward(enc[-1])
        logvar = None
        if self.kind is ModelKind.VAE:
            logvar = self.logvar.forward(enc[-1])
            mu = bott[-1]
            if eps is None and sample:
                eps = self.noise_rng.standard_normal(mu.shape).astype(mu.dtype)
            z = mu if eps is None else mu + np.exp(0.5 * logvar[-1]) * eps
        else:
            z = bott[-1]
        dec = self.decoder.forward(z)
        fp = ForwardPass(x, enc, bott, z, dec, logvar=logvar, eps=eps)
        if with_head:
            fp.head = self.head_for(task).forward(dec[-1])
        return fp

    def representations(self, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        """Penultimate-layer activations; VAEs use the mean path (z = mu)."""
        out = np.empty((x.shape[0], self.decoder.out_width), dtype=self.encoder.weights[0].dtype)
        for start in range(0, x.shape[0], batch_size):
            chunk = x[start:start + batch_size]
            out[start:start + len(chunk)] = self.forward(chunk, sample=False, with_head=False).representation
        return out

    def reconstruct(self, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        if self.kind is ModelKind.DISCRIMINATIVE:
            raise ConfigurationError("discriminative models do not reconstruct")
        out = np.empty_like(x)
        for start in range(0, x.shape[0], batch_size):
            chunk = x[start:start + batch_size]
            out[start:start + len(chunk)] = self.forward(chunk, sample=False).output
        return out

    # -- objective

    def loss_and_grads(self, x: np.ndarray, labels=None, task: int | None = None,
                       eps: np.ndarray | None = None) -> tuple[float, list[np.ndarray]]:
        """Loss on a batch and gradients aligned with ``trainable_parameters(task)``."""
        head = self.head_for(task)
        fp = self.forward(x, task=task, eps=eps)
        if self.kind is ModelKind.DISCRIMINATIVE:
            if labels is None:
                raise UsageError("discriminative loss needs labels")
            loss, g_out = nncore.cross_entropy(fp.output, labels)
        elif self.kind is ModelKind.AUTOENCODER:
            loss, g_out = nncore.mse(fp.output, x)
        else:
            logvar = fp.logvar[-1]
            loss, (g_out, g_mu, g_logvar) = nncore.elbo(fp.output, x, fp.bottleneck[-1], logvar)

        head_grads, g = head.backward(fp.dec[-1], fp.head, g_out, input_grad=True)
        dec_grads, g_z = self.decoder.backward(fp.z, fp.dec, g, input_grad=True)
        if self.kind is ModelKind.VAE:
            g_mu = g_mu + g_z
            if fp.eps is not None:
                std = np.exp(0.5 * logvar)
                g_logvar = g_logvar + g_z * fp.eps * 0.5 * std
            bott_grads, g_h = self.bottleneck.backward(fp.enc[-1], fp.bottleneck, g_mu, input_grad=True)
            lv_grads, g_h2 = self.logvar.backward(fp.enc[-1], fp.logvar, g_logvar, input_grad=True)
            g_h = g_h + g_h2
        else:
            bott_grads, g_h = self.bottleneck.backward(fp.enc[-1], fp.bottleneck, g_z, input_grad=True)
            lv_grads = []
        enc_grads = self.encoder.backward(x, fp.enc, g_h)
        return loss, enc_grads + bott_grads + dec_grads + lv_grads + head_grads


def model_loss(model: Model, batch: np.ndarray, labels=None, active_task: int | None = None,
               eps: np.ndarray | None = None):
    return model.loss_and_grads(batch, labels, active_task, eps=eps)


def extract_representations(model: Model, inputs: np.ndarray) -> np.ndarray:
    return model.representations(inputs)


def build_model(kind, input_dim: int, n_tasks: int = 5, bottleneck: int = 8, seed: int = 0,
                dtype=nncore.DTYPE, bottleneck_activation: str = IDENTITY) -> Model:
    if input_dim not in VALID_INPUT_DIMS:
        raise ConfigurationError(f"input_dim must be one of {VALID_INPUT_DIMS}, got {input_dim}")
    return assemble(kind, input_dim, n_tasks, bottleneck, seed, HIDDEN, dtype, bottleneck_activation)


def assemble(kind, input_dim: int, n_tasks: int, bottleneck: int, seed: int, hidden=HIDDEN,
             dtype=nncore.DTYPE, bottleneck_activation: str = IDENTITY) -> Model:
    """``build_model`` without the input-width restriction; small ``hidden`` widths make gradient checks cheap."""
    kind = ModelKind.parse(kind)
    if min(input_dim, n_tasks, bottleneck, *hidden) < 1:
        raise ConfigurationError("all widths and n_tasks must be >= 1")
    h1, h2 = hidden
    # the VAE's mu map is always linear
    bott_act = IDENTITY if kind is ModelKind.VAE else bottleneck_activation
    # distinct sub-seeds keep each network's init independent of which others exist
    def init(layers, k):
        return nncore.init_weights(layers, seed=_subseed(seed, k), dtype=dtype)

    encoder = init([LayerSpec(input_dim, h1), LayerSpec(h1, h2)], 0)
    bott = init([LayerSpec(h2, bottleneck, bott_act)], 1)
    decoder = init([LayerSpec(bottleneck, h2), LayerSpec(h2, h1)], 2)
    logvar = init([LayerSpec(h2, bottleneck, IDENTITY)], 3) if kind is ModelKind.VAE else None
    if kind is ModelKind.DISCRIMINATIVE:
        heads = [init([LayerSpec(h1, 2, IDENTITY)], 10 + t) for t in range(n_tasks)]
    else:
        heads = [init([LayerSpec(h1, input_dim, IDENTITY)], 4)]
    return Model(kind, input_dim, n_tasks, bottleneck, seed, encoder, bott, decoder, heads, logvar)


def _subseed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"FPCK"
_VERSION = 1
_KIND_CODES = {ModelKind.DISCRIMINATIVE: 0, ModelKind.AUTOENCODER: 1, ModelKind.VAE: 2}
_ACT_CODES = {RELU: 0, IDENTITY: 1}
_HEADER = struct.Struct("<4sHBBIIIIIqI")


def checkpoint_bytes(model: Model) -> bytes:
    """Header (kind, dims, seed) then every weight array as little-endian float32, in layer order."""
    params = model.parameters()
    buf = io.BytesIO()
    buf.write(_HEADER.pack(_MAGIC, _VERSION, _KIND_CODES[model.kind],
                           _ACT_CODES[model.bottleneck.layers[0].activation], model.input_dim, model.n_tasks,
                           model.bottleneck_width, model.encoder.layers[0].out_width,
                           model.encoder.layers[1].out_width, model.seed, len(params)))
    for p in params:
        buf.write(struct.pack("<II", *p.shape))
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path_or_bytes) -> Model:
    if isinstance(path_or_bytes, (bytes, bytearray)):
        raw = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as fh:
            raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("checkpoint header truncated", offset=len(raw))
    magic, version, code, act, input_dim, n_tasks, bott, h1, h2, seed, n_arrays = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != _VERSION:
        raise FormatError(f"not a checkpoint (magic {magic!r}, version {version})", offset=0)
    try:
        kind = {v: k for k, v in _KIND_CODES.items()}[code]
        activation = {v: k for k, v in _ACT_CODES.items()}[act]
    except KeyError:
        raise FormatError(f"unknown kind/activation code {code}/{act}", offset=6) from None
    model = assemble(kind, input_dim, n_tasks, bott, seed, (h1, h2), bottleneck_activation=activation)
    params = model.parameters()
    if len(params) != n_arrays:
        raise FormatError(f"checkpoint holds {n_arrays} arrays, model needs {len(params)}", offset=_HEADER.size)
    off = _HEADER.size
    for p in params:
        if off + 8 > len(raw):
            raise FormatError("checkpoint truncated", offset=off)
        shape = struct.unpack_from("<II", raw, off)
        off += 8
        if tuple(shape) != p.shape:
            raise FormatError(f"array shape {shape} does not match {p.shape}", offset=off - 8)
        nbytes = p.size * 4
        if off + nbytes > len(raw):
            raise FormatError("checkpoint truncated", offset=off)
        p[...] = np.frombuffer(raw, dtype="<f4", count=p.size, offset=off).reshape(p.shape)
        off += nbytes
    return model


def checkpoint_hash(model: Model) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()

"""Dense feed-forward networks with hand-rolled reverse-mode gradients.

All parameters and activations are float64. Layers are fully connected;
hidden layers use ReLU, the output layer is linear. Gradients are computed
by explicit backpropagation against a cached forward pass, so the package
has no autograd dependency.

Masked distributions use a large negative sentinel (``NEG_INF``) rather
than true ``-inf`` so that downstream arithmetic stays NaN-free.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheckpointError,
    InvalidMaskError,
    NonFiniteGradientError,
    ShapeError,
)

# Finite stand-in for log(0) on masked-out entries. exp(NEG_INF) == 0.0 exactly.
NEG_INF = -1.0e30

ACT_RELU = "relu"
ACT_IDENTITY = "identity"

CHECKPOINT_FORMAT = 1


@dataclass
class Layer:
    """One affine layer: ``y = act(W @ x + b)`` with W of shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)


@dataclass
class GradientTape:
    """Per-parameter gradient accumulator, mirroring a DenseNet's layout."""

    d_weight: list[np.ndarray]
    d_bias: list[np.ndarray]

    @staticmethod
    def zeros_like(net: DenseNet) -> "GradientTape":
        return GradientTape(
            d_weight=[np.zeros_like(l.weight) for l in net.layers],
            d_bias=[np.zeros_like(l.bias) for l in net.layers],
        )

    def add_scaled(self, other: "GradientTape", scale: float = 1.0) -> None:
        for dw, ow in zip(self.d_weight, other.d_weight):
            dw += scale * ow
        for db, ob in zip(self.d_bias, other.d_bias):
            db += scale * ob

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.d_weight) and all(
            np.all(np.isfinite(g)) for g in self.d_bias
        )


def init_net(sizes: list[int], rng: np.random.Generator) -> DenseNet:
    """Build a net with the given layer sizes ``[in, h1, ..., out]``.

    Weights are uniform on +-sqrt(1 / fan_in); biases start at zero. Hidden
    layers are ReLU, the final layer is linear.
    """
    if len(sizes) < 2:
        raise ShapeError(f"need at least input and output sizes, got {sizes}")
    if any(s <= 0 for s in sizes):
        raise ShapeError(f"layer sizes must be positive, got {sizes}")
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(1.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        bias = np.zeros(fan_out, dtype=np.float64)
        act = ACT_RELU if i < len(sizes) - 2 else ACT_IDENTITY
        layers.append(Layer(weight=weight, bias=bias, activation=act))
    return DenseNet(layers=layers)


def _check_batch_input(net: DenseNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(
            f"expected input of shape (n, {net.input_dim}), got {x.shape}"
        )
    return x


def forward_batch(
    net: DenseNet, x: np.ndarray, want_cache: bool = False
):
    """Run the net on a batch of row vectors.

    With ``want_cache`` the per-layer inputs and pre-activations are returned
    so that ``backward_batch`` can skip the recomputation.
    """
    h = _check_batch_input(net, x)
    cache = [] if want_cache else None
    for layer in net.layers:
        a = h @ layer.weight.T + layer.bias
        if want_cache:
            cache.append((h, a))
        if layer.activation == ACT_RELU:
            h = np.maximum(a, 0.0)
        else:
            h = a
    if want_cache:
        return h, cache
    return h


def backward_batch(
    net: DenseNet,
    x: np.ndarray,
    cotangent: np.ndarray,
    cache=None,
    tape: GradientTape | None = None,
) -> GradientTape:
    """Accumulate d(sum of cotangent-weighted outputs)/d(params) into a tape.

    ``cotangent`` has one row per input row; its columns align with the net
    output. The forward cache from ``forward_batch(..., want_cache=True)``
    may be passed to avoid a second forward pass.
    """
    x = _check_batch_input(net, x)
    g = np.asarray(cotangent, dtype=np.float64)
    if g.shape != (x.shape[0], net.output_dim):
        raise ShapeError(
            f"expected cotangent of shape ({x.shape[0]}, {net.output_dim}),"
            f" got {g.shape}"
        )
    if cache is None:
        _, cache = forward_batch(net, x, want_cache=True)
    if tape is None:
        tape = GradientTape.zeros_like(net)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        h_in, a = cache[i]
        if layer.activation == ACT_RELU:
            g = g * (a > 0.0)
        tape.d_weight[i] += g.T @ h_in
        tape.d_bias[i] += g.sum(axis=0)
        if i > 0:
            g = g @ layer.weight
    return tape


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Single-vector forward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-d input, got shape {x.shape}")
    return forward_batch(net, x[None, :])[0]


def backward(net: DenseNet, x: np.ndarray, cotangent: np.ndarray) -> GradientTape:
    """Single-vector gradient of ``cotangent . net(x)`` w.r.t. parameters."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(cotangent, dtype=np.float64)
    if x.ndim != 1 or g.ndim != 1:
        raise ShapeError("backward expects 1-d input and cotangent")
    return backward_batch(net, x[None, :], g[None, :])


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities over the valid entries of ``logits``.

    Invalid entries get ``NEG_INF``. Valid entries are shifted by the max
    before exponentiation so the result is stable for any logit scale.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape or logits.ndim != 1:
        raise ShapeError(
            f"logits {logits.shape} and mask {mask.shape} must be equal 1-d shapes"
        )
    if not mask.any():
        raise InvalidMaskError("mask has no valid entries")
    return masked_log_softmax_batch(logits[None, :], mask[None, :])[0]


def masked_log_softmax_batch(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise masked log-softmax. Every row must have a valid entry."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape or logits.ndim != 2:
        raise ShapeError(
            f"logits {logits.shape} and mask {mask.shape} must be equal 2-d shapes"
        )
    valid_counts = mask.sum(axis=1)
    if np.any(valid_counts == 0):
        bad = int(np.flatnonzero(valid_counts == 0)[0])
        raise InvalidMaskError(f"row {bad} has no valid entries")
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    return np.where(mask, logits - lse, NEG_INF)


def log_softmax_cotangent(
    logp: np.ndarray, mask: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """Chain an upstream gradient on masked log-probs back to the raw logits.

    For valid entries the rule is ``g_j - p_j * sum(g)``; masked entries get
    zero. Accepts 1-d or 2-d (row-wise) arguments.
    """
    p = np.exp(np.where(mask, logp, -np.inf))
    upstream = np.where(mask, upstream, 0.0)
    total = upstream.sum(axis=-1, keepdims=True)
    return np.where(mask, upstream - p * total, 0.0)


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m_weight: list[np.ndarray]
    v_weight: list[np.ndarray]
    m_bias: list[np.ndarray]
    v_bias: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(
    net: DenseNet,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    return AdamState(
        m_weight=[np.zeros_like(l.weight) for l in net.layers],
        v_weight=[np.zeros_like(l.weight) for l in net.layers],
        m_bias=[np.zeros_like(l.bias) for l in net.layers],
        v_bias=[np.zeros_like(l.bias) for l in net.layers],
        t=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(net: DenseNet, tape: GradientTape, state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place.

    The step is refused (net and state untouched) if any gradient entry is
    non-finite.
    """
    if len(tape.d_weight) != len(net.layers):
        raise ShapeError("tape layout does not match the net")
    if not tape.is_finite():
        raise NonFiniteGradientError("gradient contains NaN or inf; step refused")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for i, layer in enumerate(net.layers):
        for param, grad, m, v in (
            (layer.weight, tape.d_weight[i], state.m_weight[i], state.v_weight[i]),
            (layer.bias, tape.d_bias[i], state.m_bias[i], state.v_bias[i]),
        ):
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            m_hat = m / corr1
            v_hat = v / corr2
            param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def save_net(path, net: DenseNet, meta: dict | None = None) -> None:
    """Serialize a net (and an optional JSON-able metadata dict) to ``path``.

    The on-disk format is an uncompressed ``.npz`` holding every weight and
    bias array verbatim, so a load reproduces the parameters bit for bit.
    """
    arrays = {
        "format_version": np.int64(CHECKPOINT_FORMAT),
        "n_layers": np.int64(len(net.layers)),
        "activations": np.array([l.activation for l in net.layers]),
        "meta_json": np.array(json.dumps(meta if meta is not None else {})),
    }
    for i, layer in enumerate(net.layers):
        arrays[f"w{i}"] = layer.weight
        arrays[f"b{i}"] = layer.bias
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_net(path) -> tuple[DenseNet, dict]:
    """Load a net saved by ``save_net``. Returns ``(net, meta)``."""
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != CHECKPOINT_FORMAT:
                raise CheckpointError(
                    f"unsupported checkpoint format {version}"
                )
            n_layers = int(data["n_layers"])
            activations = [str(a) for a in data["activations"]]
            meta = json.loads(str(data["meta_json"]))
            layers = []
            for i in range(n_layers):
                weight = np.array(data[f"w{i}"], dtype=np.float64)
                bias = np.array(data[f"b{i}"], dtype=np.float64)
                if weight.ndim != 2 or bias.shape != (weight.shape[0],):
                    raise CheckpointError(f"layer {i} arrays are malformed")
                layers.append(
                    Layer(weight=weight, bias=bias, activation=activations[i])
                )
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    for a, b in zip(layers[:-1], layers[1:]):
        if a.out_dim != b.in_dim:
            raise CheckpointError("layer shapes do not chain")
    return DenseNet(layers=layers), meta

"""Dense feed-forward networks with analytic backprop and Adam.

One flat parameter vector per network, softplus hidden layers, and three
output heads: plain linear, a sigmoid shifted into (-0.5, 0.5) for bounded
rewards, and a combined value/Gaussian head for the policy-value network.
All arithmetic is float64; forward and backward are pure functions of
(spec, params, input).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

OUTPUT_TRANSFORMS = ("identity", "shifted_sigmoid", "gaussian_head")

# Keeps gaussian_head policies from collapsing to zero exploration noise.
STD_FLOOR = 1e-4

# Keeps the shifted sigmoid strictly inside (-0.5, 0.5) even when the
# logit saturates float64 (sigmoid(x) == 1.0 exactly for x > ~37).
_SIGMOID_CLIP = 1e-15


def softplus(x):
    """ln(1 + e^x) with the overflow-safe branch x + ln(1 + e^-x) for x > 0."""
    ax = np.abs(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-ax))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a dense network evaluated from a flat parameter vector."""

    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    hidden_activation: str = "softplus"
    output_transform: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ValueError("input_dim and output_dim must be positive")
        if len(self.hidden_widths) < 1 or any(w <= 0 for w in self.hidden_widths):
            raise ValueError("need at least one hidden layer with positive width")
        if self.hidden_activation != "softplus":
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_transform not in OUTPUT_TRANSFORMS:
            raise ValueError(f"unsupported output transform {self.output_transform!r}")
        if self.output_transform == "gaussian_head":
            if self.output_dim < 3 or self.output_dim % 2 == 0:
                raise ValueError("gaussian_head needs output_dim = 1 + 2*action_dim (odd, >= 3)")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1))

    @property
    def action_dim(self) -> int:
        if self.output_transform != "gaussian_head":
            raise ValueError("action_dim only defined for gaussian_head specs")
        return (self.output_dim - 1) // 2


def _layer_views(spec: MlpSpec, theta: np.ndarray):
    """Zero-copy (W, b) views into the flat parameter vector, one per layer."""
    dims = spec.layer_dims
    views = []
    off = 0
    for i in range(len(dims) - 1):
        fin, fout = dims[i], dims[i + 1]
        w = theta[off : off + fin * fout].reshape(fout, fin)
        off += fin * fout
        b = theta[off : off + fout]
        off += fout
        views.append((w, b))
    return views


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Xavier-uniform weights, zero biases; seeded for reproducible runs."""
    theta = np.zeros(spec.param_count)
    for w, b in _layer_views(spec, theta):
        fout, fin = w.shape
        bound = np.sqrt(6.0 / (fin + fout))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        b[...] = 0.0
    return theta


def _check_params(spec: MlpSpec, theta: np.ndarray):
    if theta.shape != (spec.param_count,):
        raise ValueError(f"params length {theta.shape} != expected ({spec.param_count},)")


def _apply_output_transform(spec: MlpSpec, raw: np.ndarray) -> np.ndarray:
    if spec.output_transform == "identity":
        return raw
    if spec.output_transform == "shifted_sigmoid":
        return np.clip(sigmoid(raw), _SIGMOID_CLIP, 1.0 - _SIGMOID_CLIP) - 0.5
    d = spec.action_dim
    out = raw.copy()
    out[:, 1 + d :] = softplus(raw[:, 1 + d :]) + STD_FLOOR
    return out


def forward_cached(spec: MlpSpec, theta: np.ndarray, x: np.ndarray):
    """Batched forward pass returning (output, cache) for a later backward.

    `x` is (batch, input_dim); the cache holds pre-activations and hidden
    activations so a backward pass can skip the re-evaluation.
    """
    _check_params(spec, theta)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"input shape {x.shape} incompatible with input_dim {spec.input_dim}")
    views = _layer_views(spec, theta)
    acts = [x]
    pre = []
    h = x
    for i, (w, b) in enumerate(views):
        z = h @ w.T + b
        pre.append(z)
        if i < len(views) - 1:
            h = softplus(z)
            acts.append(h)
        else:
            h = z
    out = _apply_output_transform(spec, h)
    return out, (acts, pre)


def backward_cached(spec: MlpSpec, theta: np.ndarray, cache, cotangent: np.ndarray):
    """Gradients of sum_b <output_b, cotangent_b> w.r.t. params and input."""
    acts, pre = cache
    views = _layer_views(spec, theta)
    raw = pre[-1]
    if cotangent.shape != raw.shape:
        raise ValueError(f"cotangent shape {cotangent.shape} != output shape {raw.shape}")

    if spec.output_transform == "identity":
        g = cotangent
    elif spec.output_transform == "shifted_sigmoid":
        s = sigmoid(raw)
        g = cotangent * s * (1.0 - s)
    else:
        d = spec.action_dim
        g = cotangent.copy()
        g[:, 1 + d :] *= sigmoid(raw[:, 1 + d :])

    grad = np.zeros_like(theta)
    gviews = _layer_views(spec, grad)
    for i in range(len(views) - 1, -1, -1):
        w, _ = views[i]
        gw, gb = gviews[i]
        gw += g.T @ acts[i]
        gb += g.sum(axis=0)
        g = g @ w
        if i > 0:
            g = g * sigmoid(pre[i - 1])
    return grad, g


def forward(spec: MlpSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network; accepts a single input vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out, _ = forward_cached(spec, theta, x[None, :] if single else x)
    return out[0] if single else out


def backward(spec: MlpSpec, theta: np.ndarray, x: np.ndarray, cotangent: np.ndarray):
    """Reverse-mode gradients of <output, cotangent> w.r.t. params and input."""
    x = np.asarray(x, dtype=np.float64)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        cotangent = cotangent[None, :]
    _, cache = forward_cached(spec, theta, x)
    grad, gin = backward_cached(spec, theta, cache, cotangent)
    return (grad, gin[0]) if single else (grad, gin)


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, theta: np.ndarray, lr: float = 1e-4) -> "AdamState":
        return cls(m=np.zeros_like(theta), v=np.zeros_like(theta), lr=lr)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, ascent: bool = False):
    """Bias-corrected Adam update in place; ascent=True steps uphill.

    Non-finite gradient entries abort training rather than silently
    corrupting the parameters.
    """
    if grad.shape != theta.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient entries in adam_step")
    g = -grad if ascent else grad
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1**state.step)
    vhat = state.v / (1.0 - state.beta2**state.step)
    theta -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state, theta


CHECKPOINT_FORMAT = "imarl-mlp"
CHECKPOINT_VERSION = 1


def save_params(path, spec: MlpSpec, theta: np.ndarray, meta: dict | None = None):
    """Write a checkpoint: one JSON header line + little-endian float64 theta."""
    _check_params(spec, theta)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_dim": spec.input_dim,
        "hidden_widths": list(spec.hidden_widths),
        "output_dim": spec.output_dim,
        "hidden_activation": spec.hidden_activation,
        "output_transform": spec.output_transform,
        "theta_len": int(theta.shape[0]),
    }
    if meta:
        header["meta"] = meta
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        f.write(np.ascontiguousarray(theta, dtype="<f8").tobytes())


def load_params(path):
    """Read a checkpoint; returns (spec, theta, meta). Exact round trip."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: malformed checkpoint header") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a network checkpoint")
        if header.get("version", 0) > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {header['version']} too new")
        spec = MlpSpec(
            input_dim=header["input_dim"],
            hidden_widths=tuple(header["hidden_widths"]),
            output_dim=header["output_dim"],
            hidden_activation=header["hidden_activation"],
            output_transform=header["output_transform"],
        )
        body = f.read()
    expected = header["theta_len"] * 8
    if len(body) != expected:
        raise ValueError(f"{path}: theta payload is {len(body)} bytes, expected {expected}")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    _check_params(spec, theta)
    return spec, theta, header.get("meta", {})

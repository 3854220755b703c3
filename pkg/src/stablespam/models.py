"""Desk-scale differentiable testbeds with hand-written backprop.

Two models:
  * a quadratic bowl 0.5 w'Aw - b'w with SPD A and closed-form optimum, and
  * a small classifier MLP whose hidden blocks are RMSNorm -> SwiGLU, with a
    plain linear head and cross-entropy loss.

Quantization-aware training: when a non-NONE QuantSpec is set, every matmul
in the MLP forward runs on quantize-dequantized operands (weights and the
activations feeding the matmul). The backward pass treats each
quantize-dequantize as identity (straight-through), so gradients are full
float64 with respect to the unquantized weights. RMSNorm gains stay
unquantized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant import QuantFormat, QuantSpec, qdq
from .tensor_core import as_matrix, make_rng, matmul, max_abs

RMSNORM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Quadratic bowl
# ---------------------------------------------------------------------------

@dataclass
class QuadraticProblem:
    a: np.ndarray   # SPD matrix, exactly symmetric
    b: np.ndarray   # (n, 1)
    w: np.ndarray   # (n, 1) current parameters


def make_quadratic(dim: int, rng, delta: float = 0.1) -> QuadraticProblem:
    """A = M'M + delta*I with random M; exactly symmetric by construction."""
    m = rng.standard_normal((dim, dim))
    a = matmul(m.T, m) + delta * np.eye(dim)
    b = rng.standard_normal((dim, 1))
    w = rng.standard_normal((dim, 1))
    return QuadraticProblem(a=a, b=b, w=w)


def quadratic_loss_grad(p: QuadraticProblem):
    aw = matmul(p.a, p.w)
    loss = 0.5 * float(matmul(p.w.T, aw)[0, 0]) - float(matmul(p.b.T, p.w)[0, 0])
    grad = aw - p.b
    return loss, grad


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _silu(z):
    return z * _sigmoid(z)


def rmsnorm_fwd_bwd(x, gain):
    """y = x / sqrt(mean(x^2) + eps) * gain, rowwise; returns (y, backward).

    backward(dy) -> (dx, dgain).
    """
    x = as_matrix(x)
    gain = as_matrix(gain)
    n = x.shape[1]
    r = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + RMSNORM_EPS)
    y = x / r * gain

    def backward(dy):
        dy_ = as_matrix(dy)
        gdy = dy_ * gain
        dot = np.sum(gdy * x, axis=1, keepdims=True)
        dx = gdy / r - x * dot / (n * r ** 3)
        dgain = np.sum(dy_ * x / r, axis=0, keepdims=True)
        return dx, dgain

    return y, backward


def swiglu_fwd_bwd(x, w_gate, w_up):
    """y = silu(x @ w_gate) * (x @ w_up); returns (y, backward).

    backward(dy) -> (dx, dw_gate, dw_up).
    """
    x = as_matrix(x)
    a = matmul(x, w_gate)
    b = matmul(x, w_up)
    sig = _sigmoid(a)
    silu_a = a * sig
    y = silu_a * b

    def backward(dy):
        dy_ = as_matrix(dy)
        # d silu(a)/da = sigmoid(a) * (1 + a * (1 - sigmoid(a)))
        da = dy_ * b * sig * (1.0 + a * (1.0 - sig))
        db = dy_ * silu_a
        dx = matmul(da, as_matrix(w_gate).T) + matmul(db, as_matrix(w_up).T)
        dw_gate = matmul(x.T, da)
        dw_up = matmul(x.T, db)
        return dx, dw_gate, dw_up

    return y, backward


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class MlpModel:
    params: dict[str, np.ndarray]
    input_dim: int
    hidden_dim: int
    depth: int
    classes: int
    quant: QuantSpec


def init_mlp(input_dim: int, hidden_dim: int, depth: int, classes: int,
             rng, quant: QuantSpec | None = None) -> MlpModel:
    quant = quant or QuantSpec()
    params: dict[str, np.ndarray] = {}
    din = input_dim
    for i in range(depth):
        params[f"block{i}.gain"] = np.ones((1, din))
        params[f"block{i}.w_gate"] = rng.standard_normal((din, hidden_dim)) / np.sqrt(din)
        params[f"block{i}.w_up"] = rng.standard_normal((din, hidden_dim)) / np.sqrt(din)
        din = hidden_dim
    params["out.w"] = rng.standard_normal((din, classes)) / np.sqrt(din)
    return MlpModel(params=params, input_dim=input_dim, hidden_dim=hidden_dim,
                    depth=depth, classes=classes, quant=quant)


def _softmax(logits):
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def mlp_forward_backward(model: MlpModel, inputs, labels,
                         quant: QuantSpec | None = None):
    """Cross-entropy loss and gradients for every parameter tensor.

    With quantization enabled, matmul operands go through qdq in the forward
    pass; the backward pass is straight-through, assigning the gradients of
    the quantized weights to the unquantized ones.
    """
    spec = model.quant if quant is None else quant
    x = as_matrix(inputs)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]

    caches = []
    for i in range(model.depth):
        gain = model.params[f"block{i}.gain"]
        normed, rms_bwd = rmsnorm_fwd_bwd(x, gain)
        nq = qdq(normed, spec)
        wg_q = qdq(model.params[f"block{i}.w_gate"], spec)
        wu_q = qdq(model.params[f"block{i}.w_up"], spec)
        x, swiglu_bwd = swiglu_fwd_bwd(nq, wg_q, wu_q)
        caches.append((rms_bwd, swiglu_bwd))
    xq = qdq(x, spec)
    w_out_q = qdq(model.params["out.w"], spec)
    logits = matmul(xq, w_out_q)

    probs = _softmax(logits)
    eps = 1e-300  # guards log(0); never active for finite logits
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + eps)))

    grads: dict[str, np.ndarray] = {}
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads["out.w"] = matmul(xq.T, dlogits)
    dx = matmul(dlogits, w_out_q.T)  # straight-through across qdq(x)
    for i in reversed(range(model.depth)):
        rms_bwd, swiglu_bwd = caches[i]
        dnq, dw_gate, dw_up = swiglu_bwd(dx)
        grads[f"block{i}.w_gate"] = dw_gate
        grads[f"block{i}.w_up"] = dw_up
        dx, dgain = rms_bwd(dnq)  # straight-through across qdq(normed)
        grads[f"block{i}.gain"] = dgain
    return loss, grads


def mlp_loss(model: MlpModel, inputs, labels, quant: QuantSpec | None = None) -> float:
    loss, _ = mlp_forward_backward(model, inputs, labels, quant=quant)
    return loss


# ---------------------------------------------------------------------------
# Synthetic data and spike injection
# ---------------------------------------------------------------------------

@dataclass
class SyntheticDataset:
    inputs: np.ndarray   # (N, d)
    labels: np.ndarray   # (N,) int class ids
    centers: np.ndarray  # (classes, d)


def make_dataset(samples: int, dim: int, classes: int, seed: int) -> SyntheticDataset:
    """Gaussian-mixture classification set: unit-variance clusters at random
    centers, classes balanced within one sample, reproducible from seed."""
    rng = make_rng(seed)
    centers = 2.0 * rng.standard_normal((classes, dim))
    labels = np.arange(samples, dtype=np.int64) % classes
    labels = labels[rng.permutation(samples)]
    inputs = centers[labels] + rng.standard_normal((samples, dim))
    return SyntheticDataset(inputs=inputs, labels=labels, centers=centers)


def resample_dataset(dataset: SyntheticDataset, samples: int,
                     seed: int) -> SyntheticDataset:
    """Held-out split: same mixture centers, fresh labels and noise."""
    rng = make_rng(seed)
    classes = dataset.centers.shape[0]
    labels = np.arange(samples, dtype=np.int64) % classes
    labels = labels[rng.permutation(samples)]
    inputs = dataset.centers[labels] + rng.standard_normal(
        (samples, dataset.centers.shape[1]))
    return SyntheticDataset(inputs=inputs, labels=labels,
                            centers=dataset.centers)


def inject_spikes(batch, probability: float, severity: float, rng) -> np.ndarray:
    """Add Gaussian noise with std severity * max|batch| to a random subset
    of entries (independent Bernoulli(probability) selection)."""
    batch = as_matrix(batch)
    if not 0.0 <= probability <= 1.0:
        raise ValueError("probability must be in [0, 1]")
    if severity < 0.0:
        raise ValueError("severity must be >= 0")
    if probability == 0.0 or severity == 0.0:
        return batch.copy()
    mask = rng.random(batch.shape) < probability
    noise = rng.standard_normal(batch.shape) * (severity * max_abs(batch))
    return np.where(mask, batch + noise, batch)

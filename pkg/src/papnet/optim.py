"""Losses, L2 regularization, Adam, and the finite-difference gradient oracle.

Loss reductions accumulate in float64 regardless of storage dtype; returned
gradients match the dtype of the tensors they flow back into.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import LayerParams, Tensor

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossValue:
    """Data loss plus regularization penalty; ``total`` is their exact sum."""
    data_loss: float
    reg_loss: float

    @property
    def total(self) -> float:
        return self.data_loss + self.reg_loss


class AdamState:
    """Per-parameter first/second moments plus the shared hyperparameters."""

    def __init__(self, params: list[LayerParams], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {beta1}, {beta2}")
        if epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = [(np.zeros_like(p.weights), np.zeros_like(p.bias)) for p in params]
        self.second_moment = [(np.zeros_like(p.weights), np.zeros_like(p.bias)) for p in params]


def adam_step(params: list[LayerParams], state: AdamState) -> None:
    """Standard bias-corrected Adam update, in place.

    Rejects the call if any parameter set has no gradients filled since its
    last ``zero_grads`` (stale-gradient guard).
    """
    if len(params) != len(state.first_moment):
        raise ValueError(
            f"AdamState tracks {len(state.first_moment)} parameter sets, got {len(params)}")
    for i, p in enumerate(params):
        if not p.has_grads:
            raise ValueError(f"adam_step called with no gradients on parameter set {i}; "
                             "run a backward pass first")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for p, (m_w, m_b), (v_w, v_b) in zip(params, state.first_moment, state.second_moment):
        for value, grad, m, v in ((p.weights, p.weight_grad, m_w, v_w),
                                  (p.bias, p.bias_grad, m_b, v_b)):
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            value -= state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)


def softmax_cross_entropy(logits: Tensor, onehot_labels: Tensor) -> tuple[float, Tensor]:
    """Fused log-sum-exp-stable softmax + categorical cross entropy.

    Returns (mean loss over the batch, gradient w.r.t. logits). The gradient
    is (softmax - onehot)/B, so each row sums to zero.
    """
    if logits.shape != onehot_labels.shape or logits.ndim != 2:
        raise ValueError(
            f"logits {logits.shape} and one-hot labels {onehot_labels.shape} "
            "must both be (batch, classes)")
    is_binary = np.all((onehot_labels == 0) | (onehot_labels == 1))
    if not is_binary or not np.all(onehot_labels.sum(axis=1) == 1):
        raise ValueError("labels must be one-hot rows (exactly one 1 per row)")
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    loss = float(-(onehot_labels * log_probs).sum(dtype=np.float64) / b)
    softmax = np.exp(log_probs)
    grad = ((softmax - onehot_labels) / b).astype(logits.dtype)
    return loss, grad


def binary_cross_entropy_pixelwise(probs: Tensor, target_mask: Tensor) -> tuple[float, Tensor]:
    """Mean per-pixel BCE over a probability map against a {0,1} mask.

    Probabilities are clamped to [1e-7, 1-1e-7] before the logs; the gradient
    is zero wherever the clamp was active (the loss is flat there).
    """
    if probs.shape != target_mask.shape:
        raise ValueError(
            f"probability map {probs.shape} and target mask {target_mask.shape} differ")
    if not np.all((target_mask == 0) | (target_mask == 1)):
        raise ValueError("target mask must contain only 0 and 1")
    p = np.clip(probs, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target_mask
    n = p.size
    loss = float(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum(dtype=np.float64) / n)
    grad = ((p - t) / (p * (1.0 - p)) / n)
    grad[probs != p] = 0.0  # clamped coordinates sit on the flat part
    return loss, grad.astype(probs.dtype)


def l2_penalty(params: list[LayerParams], lam: float) -> float:
    """lam * sum(w^2) over weights only; adds 2*lam*w to each weight grad."""
    if lam < 0:
        raise ValueError(f"L2 lambda must be non-negative, got {lam}")
    if lam == 0:
        return 0.0
    reg = 0.0
    for p in params:
        reg += float((p.weights.astype(np.float64) ** 2).sum())
        p.weight_grad += (2.0 * lam) * p.weights
    return lam * reg


def finite_difference_check(loss_fn, params: list[LayerParams], eps: float = 1e-3,
                            max_coords_per_tensor: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic grads and central differences.

    ``loss_fn`` must take no arguments, zero the grads, run forward+backward,
    and return the scalar loss; it is re-invoked with each coordinate nudged
    by +/-eps. Relative error is |a-n| / max(|a|, |n|, 1e-8).

    Checks every coordinate by default; for whole networks pass
    ``max_coords_per_tensor`` to probe a deterministic random subset instead.
    """
    loss_fn()
    analytic = [(p.weight_grad.copy(), p.bias_grad.copy()) for p in params]
    if max_coords_per_tensor is not None and rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, (wg, bg) in zip(params, analytic):
        for values, grads in ((p.weights, wg), (p.bias, bg)):
            flat = values.reshape(-1)
            gflat = grads.reshape(-1)
            coords = range(flat.size)
            if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
                coords = rng.choice(flat.size, size=max_coords_per_tensor, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                plus = loss_fn()
                flat[i] = orig - eps
                minus = loss_fn()
                flat[i] = orig
                numeric = (plus - minus) / (2.0 * eps)
                a = float(gflat[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    # restore the analytic grads the last perturbed call clobbered
    loss_fn()
    return worst

"""Walk through the tensor layers: forward shapes, a training step by hand,
and a finite-difference audit of the conv gradient.

Run: python3 demos/01_layers_and_gradients.py
"""

import numpy as np

from papnet.optim import AdamState, adam_step, finite_difference_check, softmax_cross_entropy
from papnet.tensor import (conv2d_backward, conv2d_forward, conv_params, dense_backward,
                           dense_forward, dense_params, maxpool2_forward, relu)

rng = np.random.default_rng(0)

# a tiny batch of 2 RGB images, 16x16
x = rng.random((2, 3, 16, 16)).astype(np.float32)
conv = conv_params(3, 8, 3, rng)
y = relu(conv2d_forward(x, conv, stride=1, padding=1))
pooled, indices = maxpool2_forward(y)
print(f"conv out {y.shape} -> pooled {pooled.shape}")

dense = dense_params(8 * 8 * 8, 2, rng)
logits = dense_forward(pooled.reshape(2, -1), dense)
labels = np.array([[1, 0], [0, 1]], dtype=np.float32)
loss, grad_logits = softmax_cross_entropy(logits, labels)
print(f"initial loss {loss:.4f}")

# one training step on the dense head (conv grads would flow through
# pool/relu in a real network; the networks module wires that up)
dense.zero_grads()
flat = pooled.reshape(2, -1)
dense_backward(flat, dense, grad_logits)
state = AdamState([dense], learning_rate=1e-2)
adam_step([dense], state)
logits2 = dense_forward(flat, dense)
loss2, _ = softmax_cross_entropy(logits2, labels)
print(f"after one Adam step on the dense layer: {loss2:.4f}")

# gradient audit: analytic conv gradients vs central differences (float64)
x64 = rng.random((1, 2, 6, 6))
conv64 = conv_params(2, 3, 3, rng, dtype=np.float64)


def audit_loss():
    conv64.zero_grads()
    out = conv2d_forward(x64, conv64, 1, 1)
    conv2d_backward(x64, conv64, np.ones_like(out), 1, 1)
    return float(out.sum())


err = finite_difference_check(audit_loss, [conv64], eps=1e-3)
print(f"conv finite-difference max relative error: {err:.2e}")

"""
Gradient checking
=================

Every backward pass in this package is hand-written, so each one is
verified against central finite differences: nudge one input by h,
re-run the forward pass, and compare (f(x+h) - f(x-h)) / 2h with the
analytic gradient. This script runs the check live on two layers and
on a small end-to-end network.
"""

import numpy as np

from microvolumetry.layers import (
    ConvSpec,
    categorical_cross_entropy,
    conv2d_backward,
    conv2d_forward,
    gradient_check,
    softmax_channel,
    softmax_channel_backward,
)

rng = np.random.default_rng(0)

# --- a single convolution ------------------------------------------------
spec = ConvSpec(in_channels=3, out_channels=4, kernel=3)
x = rng.standard_normal((2, 3, 8, 8))
w = rng.standard_normal((4, 3, 3, 3)) * 0.5
b = rng.standard_normal(4)
probe = rng.standard_normal((2, 4) + spec.out_size(8, 8))


def conv_loss(arrays):
    xx, ww, bb = arrays
    out = conv2d_forward(xx, ww, bb, spec)
    d_x, d_w, d_b = conv2d_backward(xx, ww, spec, probe)
    return float((out * probe).sum()), [d_x, d_w, d_b]


err = gradient_check(conv_loss, [x, w, b])
print(f"conv2d          max relative error {err:.3e}")

# --- softmax + cross-entropy under one probe loss ------------------------
scores = rng.standard_normal((2, 3, 4, 4))
labels = rng.integers(0, 3, (2, 4, 4))
target = np.zeros_like(scores)
for n in range(2):
    for i in range(4):
        for j in range(4):
            target[n, labels[n, i, j], i, j] = 1.0


def softmax_cce_loss(arrays):
    (s,) = arrays
    probs = softmax_channel(s)
    loss, d_probs = categorical_cross_entropy(probs, target)
    return loss, [softmax_channel_backward(probs, d_probs)]


err = gradient_check(softmax_cce_loss, [scores])
print(f"softmax + CCE   max relative error {err:.3e}")

# --- the whole network ----------------------------------------------------
# sys.path trick so the test-side harness is importable from here; it owns
# the subtle part (nudging parameters away from ReLU/pooling kinks first).
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
import helpers

for head in ("sigmoid", "softmax"):
    err = helpers.e2e_gradient_error(head, seed=0)
    print(f"U-Net ({head:>7}) max relative error {err:.3e}")

print("\nanything below 1e-3 end-to-end (1e-4 per layer) is a pass")

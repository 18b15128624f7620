"""Tour of the tensor engine: forward ops, reverse-mode gradients, and the
two sampling primitives the prototype layer is built on.

Run:  python demos/01_autodiff_basics.py
"""

import numpy as np

from protopart import tensor as T
from protopart.tensor import Tensor, backward, bilinear_sample, conv2d, renormalize

rng = np.random.default_rng(0)

print("== scalar chain rule ==")
x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
loss = T.sum_(x * x)
backward(loss)
print("loss d(sum x^2)/dx at (1,2,3):", x.grad, " (expected [2. 4. 6.])")

print("\n== convolution and its gradient vs finite differences ==")
img = Tensor(rng.normal(size=(1, 2, 6, 6)))
kernel = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
out = conv2d(img, kernel, stride=2, padding=1)
print("conv output shape:", out.data.shape)
backward(T.sum_(out))
h = 1e-5
w0 = kernel.data.copy()
probe = np.zeros_like(w0)
probe[0, 0, 1, 1] = h
num = (conv2d(img, Tensor(w0 + probe), stride=2, padding=1).sum().item()
       - conv2d(img, Tensor(w0 - probe), stride=2, padding=1).sum().item()) / (2 * h)
print(f"analytic dL/dw[0,0,1,1] = {kernel.grad[0, 0, 1, 1]:+.6f}, "
      f"finite difference = {num:+.6f}")

print("\n== bilinear sampling: exact at grid points, blended between ==")
fmap = Tensor(rng.normal(size=(4, 5, 5)))
samples = bilinear_sample(fmap, [(2.0, 3.0), (2.5, 3.0)])
print("sample at (2,3) equals stored vector:",
      bool(np.array_equal(samples.data[0], fmap.data[:, 2, 3])))
print("sample at (2.5,3) equals midpoint:",
      bool(np.allclose(samples.data[1], 0.5 * (fmap.data[:, 2, 3] + fmap.data[:, 3, 3]))))

print("\n== renormalization onto a norm sphere ==")
rows = Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]))
normed, zero_rows = renormalize(rows, 1.0)
print("(3,4) renormalized to unit norm:", normed.data[0], " zero-row flags:", zero_rows)

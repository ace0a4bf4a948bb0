"""What a central-difference convolution does, and why folding is free.

A CDC adds a theta-weighted term that subtracts the center pixel times the
kernel sum from every vanilla convolution response. Because that term is
linear in the kernel, it can be folded into the center tap once per forward
pass, so a CDC costs exactly one ordinary convolution.

Run: python3 demos/01_cdc_basics.py
"""

import numpy as np

from forgenas import autodiff as ad
from forgenas.autodiff import Tensor
from forgenas.cdc import cdc_conv2d, fold_cdc_kernel

# 1. A constant image carries no local gradient information. With theta = 1
#    the CDC response vanishes everywhere the kernel fits entirely inside
#    the image; only the zero-padded border responds.
x = Tensor(np.ones((1, 1, 5, 5)))
w = Tensor(np.ones((1, 1, 3, 3)))
out = cdc_conv2d(x, w, theta=1.0, padding=1)
print("theta=1 on a constant image (interior must be 0):")
print(out.data[0, 0].round(6))

# 2. theta interpolates between vanilla convolution (0) and a pure local
#    difference operator (1).
rng = np.random.default_rng(0)
img = Tensor(rng.standard_normal((1, 1, 7, 7)))
kern = Tensor(rng.standard_normal((1, 1, 3, 3)))
vanilla = ad.conv2d(img, kern, padding=1).data
for theta in (0.0, 0.5, 1.0):
    got = cdc_conv2d(img, kern, theta=theta, padding=1).data
    drift = np.abs(got - vanilla).max()
    print(f"theta={theta}: max deviation from vanilla conv = {drift:.4f}")

# 3. Folding: the only kernel entry that changes is the center tap.
folded = fold_cdc_kernel(kern, theta=0.7).data
print("\nraw kernel:")
print(kern.data[0, 0].round(3))
print("folded kernel (theta=0.7): center tap absorbs the subtraction:")
print(folded[0, 0].round(3))

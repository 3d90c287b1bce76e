"""Walk through the calibrated normalization variants on one feature map.

Run: python3 demos/01_calibrated_norm.py
"""

import numpy as np

from instcal import autodiff as ad
from instcal import norm as N

rng = np.random.default_rng(0)
C = 4

# a BatchNorm layer whose population statistics came from the source domain
state = N.NormLayerState.fresh(C)  # population mean 0, variance 1

# a target-domain feature map: shifted and rescaled relative to the source
x = ad.Tensor(rng.normal(3.0, 2.0, (1, C, 8, 8)))
ins_mu = x.data.mean(axis=(0, 2, 3))
print("instance mean per channel:", np.round(ins_mu, 2))

for m in (0.0, 0.1, 0.5, 1.0):
    y = N.manual_calibrated_forward(x, state, m).data
    print(f"manual m={m:.1f}: output mean {y.mean():+.3f}, output std {y.std():.3f}")

# per-channel strengths, learned during calibration training
cal = N.CalibrationU.init(C)
y = N.instcal_u_forward(x, state, cal).data
print("instcal-u at initialization matches m=0.1:",
      np.allclose(y, N.manual_calibrated_forward(x, state, 0.1).data))

# input-conditioned strengths: basis vectors mixed by softmax coefficients from a small MLP
calc = N.CalibrationC.init(C, k=8, rng=rng)
coef = N.instcal_c_coefficients(state.mu_pop, ad.Tensor(ins_mu[None]), calc.mlp_mu)
print("instcal-c coefficients sum to one:", np.isclose(coef.data.sum(), 1.0))

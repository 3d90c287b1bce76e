"""Pretrain a small network, calibrate it, and compare methods on corrupted test sets.

Run: python3 demos/02_pipeline.py [pretrain_iters] [calibration_iters]
The defaults finish in about two minutes on one core.
"""

import sys

from instcal import harness as H
from instcal import report as R
from instcal.domains import DomainSpec
from instcal.norm import ConvertMode, convert_model
from instcal.segnet import SegNetConfig

pre_iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cal_iters = int(sys.argv[2]) if len(sys.argv) > 2 else 500
net = SegNetConfig(widths=(8, 16, 16, 8))

print(f"pretraining for {pre_iters} iterations")
pre = H.pretrain(H.TrainConfig(lr=0.05, total_iters=pre_iters, batch_size=8), net).model

print(f"training instance-aware calibration for {cal_iters} iterations on random-network perturbations")
cal = H.train_instcal(H.convert_for(pre, "u"),
                      H.TrainConfig(lr=2.5e-3, total_iters=cal_iters, batch_size=1,
                                    augmentation="netperturb")).model

domains = [DomainSpec.identity()] + [DomainSpec.corruption(n, 2) for n in ("fog", "contrast", "gauss_noise")]
reports = []
for model in (pre, convert_model(pre, ConvertMode.manual(0.1)), cal):
    reports += H.evaluate(model, domains, n_images=50)
print()
print(R.markdown_table(reports))
print("ECE (%)")
print(R.markdown_table(reports, metric="ece", digits=2))

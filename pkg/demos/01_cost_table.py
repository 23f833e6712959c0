"""Analytic FLOPs and parameter counts for the four presets.

The closed-form counts are cross-checked against an instrumented forward
pass that tallies every matmul at full 320x240 resolution.
"""
import argparse

import numpy as np

from multiview_rssi import analysis, models, tensor

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--instrument", action="store_true", help="also run the counting forward pass (slower)")
args = ap.parse_args()

print(f"{'model':<14}{'FLOPs':>8}{'params':>9}   exact")
for name, rep in analysis.table1().items():
    print(f"{name:<14}{rep.gflops:>7.2f}G{rep.mparams:>8.2f}M   {rep.flops:,} / {rep.params:,}")

tf = analysis.cost_report(models.preset("mulvit_tf"))
enc = sum(v for k, v in tf.flops_breakdown.items() if k.startswith("enc0."))
print(f"\nMulViT-TF: one encoder {enc / 1e9:.3f} G, fusion {(tf.flops - 2 * enc) / 1e9:.3f} G")

if args.instrument:
    for name in analysis.table1():
        spec = models.preset(name)
        x = np.zeros((2, 3, 240, 320), np.float32)
        with tensor.count_matmul_flops() as counter:
            models.forward(x, spec, models.init_params(spec))
        closed = analysis.count_flops(spec, include_head=True)
        print(f"{name}: instrumented {counter[0]:,} vs closed form {closed:,}")

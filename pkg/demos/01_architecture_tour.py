"""
Building the two classifiers
============================

Both networks take 64x64 RGB crops. The zone network looks at whole grid
cells; the pedestrian network looks at the small sliding windows inside the
cells that the zone network kept.
"""

import numpy as np

from seekfind import build_pedestrian_classifier, build_zone_classifier
from seekfind.inception import asymmetric_pair_macs, cost_report, count_params

zone = build_zone_classifier()
ped = build_pedestrian_classifier()

# Layer by layer, parameter counts next to the published table.
# Non-inception rows agree exactly; inception rows depend on wiring
# details the table does not pin down.
for name, net in (("zone", zone), ("pedestrian", ped)):
    print(f"\n{name} classifier, {count_params(net):,} parameters")
    for label, built, table in net.layer_param_table():
        print(f"  {label:24s} {built:>10,d}  table {table if table is not None else '-':>10}")

# A 1x3 followed by a 3x1 covers the same receptive field as a 3x3 with
# 6 multiplications per input channel instead of 9.
pair, full = asymmetric_pair_macs(channels=64, h=16, w=16)
print(f"\n1x3 + 3x1 vs 3x3 at 64 channels: {pair:,} / {full:,} = {pair / full:.3f}")

rep = cost_report(zone, 64)
print(f"zone network: {rep.macs_total / 1e6:.1f}M multiply-adds per cell, "
      f"asymmetric layers at {rep.asymmetric_ratio:.3f} of their 3x3 cost")

# Desk-scale variants keep the topology and shrink every width.
for w in (0.5, 0.25):
    small = build_pedestrian_classifier(width=w)
    print(f"pedestrian network at width {w}: {count_params(small):,} parameters, "
          f"{cost_report(small, 64).macs_total / 1e6:.1f}M multiply-adds per window")

# A fresh network scores anything close to 0.5.
probs = zone.predict_proba(np.zeros((2, 3, 64, 64), np.float32))
print("untrained zone scores:", np.round(probs, 3))

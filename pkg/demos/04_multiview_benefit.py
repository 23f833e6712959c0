"""Train MulViT-TF and both single-camera SinViT baselines on the default room.

Each camera is blind in a different part of the room, so only the fused
model sees the station everywhere. One seed takes about five minutes on a
single core; the acceptance suite averages seeds 0, 1 and 2.

    python demos/04_multiview_benefit.py 0 1 2
"""
from multiview_rssi.experiments import main

main()

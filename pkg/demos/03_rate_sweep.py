"""Walkthrough: accuracy against bitrate on a small synthetic test set.

Usage: python demos/03_rate_sweep.py [train_videos]

Trains a K=5 and a K=16 model for one epoch, then scores reconstructions
decoded from ``.kpx`` streams at several (K, E) operating points.  With the
default 40 training videos this takes around ten minutes on one core.
"""
import sys
from pathlib import Path

import torch

from priorhead.codec import rate_sweep, write_sweep
from priorhead.data import make_synthetic_dataset
from priorhead.metrics import synthetic_registry
from priorhead.networks import NetConfig
from priorhead.prior import SyntheticMorphableModel
from priorhead.training import TrainConfig, train

torch.set_num_threads(1)
n_train = int(sys.argv[1]) if len(sys.argv) > 1 else 40
out = Path("demo_out") / "sweep"

lay = make_synthetic_dataset(out / "data", n_train + 10, 16, seed=0, n_test=10)
ckpts = {K: train(lay, TrainConfig(batch=4), NetConfig(num_keypoints=K), out / f"k{K}") for K in (5, 16)}

# Oracles: landmarks and expression codes fitted back from each generated frame.
registry = synthetic_registry(SyntheticMorphableModel(0), 64)
rows = rate_sweep(lay, ckpts, [(5, 0), (5, 50), (16, 0), (16, 50)], registry, max_frames=4)
write_sweep(out / "rate_sweep.tsv", rows)
print(" K  E  bytes/frame    AKD  AKD-M  AEMOD")
for r in rows:
    print(f"{r.K:2d} {r.E:2d} {r.bytes_per_frame:12d} {r.AKD:6.3f} {r.AKD_M:6.3f} {r.AEMOD:6.3f}")

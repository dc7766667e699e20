"""
Training a toy model end to end
===============================

Generate a small DirectedMotion set, train for a few epochs with the joint
loss and inspect classification and order recovery.  Single core, a few
minutes.  Use ``direcformer train`` for the full 30-epoch recipe.
"""
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from direcformer import DatasetSpec, TrainConfig, evaluate, generate_dataset, train
from direcformer.training import thread_limit

logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
root = Path(tempfile.mkdtemp(prefix="directedmotion_"))
generate_dataset(DatasetSpec(n_train=600, n_val=100, n_test=100), root / "data")

cfg = TrainConfig(data=str(root / "data"), epochs=int(sys.argv[1]) if len(sys.argv) > 1 else 5, perm_count=100)
with thread_limit(1):
    res = train(cfg, root / "run")
print("best epoch", res.best_epoch, "val top1", res.best_top1)

rep = evaluate(res.best_checkpoint, root / "data", "test")
print(f"test top1 {rep.top1:.1f}  top5 {rep.top5:.1f}  order-head {rep.order_top1:.1f}  OrderAcc {rep.order_acc:.1f}")
print("confusion (rows = truth):\n", rep.confusion)
print("artifacts in", root / "run", sorted(p.name for p in (root / "run").iterdir()))

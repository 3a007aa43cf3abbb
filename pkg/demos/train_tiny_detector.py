"""
Training a tiny detector end to end
===================================

Generates the sixty-volume synthetic benchmark, trains one variant on four
folds and scores the fifth with patch-wise inference and mAP@0.1.

The default schedule is short so the script finishes in a few minutes; pass
``--full`` for the benchmark schedule (up to 30 CPU minutes per variant).

    python demos/train_tiny_detector.py dino
    python demos/train_tiny_detector.py detr --full
"""

import argparse
import time

from vspe.benchmark import NUM_CASES, benchmark_config
from vspe.evaluation import kfold_split
from vspe.synth import generate_dataset
from vspe.training import Trainer, evaluate_predictions, predict_cases

parser = argparse.ArgumentParser()
parser.add_argument("variant", nargs="?", default="dino", choices=["detr", "cond", "dino"])
parser.add_argument("--full", action="store_true")
args = parser.parse_args()

run = benchmark_config(args.variant) if args.full else benchmark_config(args.variant, epochs=4, batches_per_epoch=50)
cases = generate_dataset(run.synth, NUM_CASES)
by_id = {v.id: (v, a) for v, a in cases}
train_ids, val_ids = kfold_split(list(by_id), run.data.folds, run.data.split_seed)[run.data.fold]
train = [by_id[i] for i in train_ids]
val = [by_id[i] for i in val_ids]
print(f"{args.variant}: {len(train)} training and {len(val)} held-out volumes, "
      f"{run.train.epochs} x {run.train.batches_per_epoch} steps")

t0 = time.process_time()
trainer = Trainer(run, train, echo=print)
trainer.fit()
print(f"trained in {(time.process_time() - t0) / 60:.1f} CPU minutes")

preds = predict_cases(trainer.model, val, run)
result = evaluate_predictions(preds, val, run.eval.iou_threshold)
print(f"held-out mAP@0.1 = {result.map:.3f}")
vol, ann = val[0]
print("first held-out volume, truth:", [b.corners.astype(int).tolist() for b in ann.boxes])
print("predicted (score >= 0.5):", [(b.corners.round(1).tolist(), round(b.score, 2))
                                    for b in preds[vol.id] if b.score >= 0.5])

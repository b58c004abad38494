"""Train the three-stage pipeline on a synthetic benchmark and compare to baselines.

Usage: python3 demos/02_synthetic_training.py [seed]   (about a minute)
"""

import sys
import time

from inboxrec.evaluation import evaluate_all
from inboxrec.synthbench import SynthConfig, make_dataset, oracle_metrics, random_metrics
from inboxrec.training import TrainConfig, run_pipeline

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
ds, truth = make_dataset(SynthConfig(seed=seed))
print(f"{ds.n_users} users, {ds.n_items} items, KG {ds.kg.counts()}")

cfg = TrainConfig(dim=32, epochs=(30, 30, 15), base_lr=5e-3, n_negatives=64, seed=seed)


def progress(stage, epoch, loss, recall):
    if recall is not None or epoch % 10 == 0:
        extra = f" val recall {recall:.3f}" if recall is not None else ""
        print(f"  {stage:<14} epoch {epoch:>3} loss {loss:.4f}{extra}")


t0 = time.perf_counter()
store, logs = run_pipeline(ds, cfg, progress=progress)
rep = evaluate_all(store, ds, 20, cfg.variant, cfg.box_mode)
print(f"trained  recall@20 {rep.recall:.4f} ndcg@20 {rep.ndcg:.4f} ({time.perf_counter() - t0:.0f}s)")
print(f"oracle   recall@20 {oracle_metrics(truth, ds.graph, 20).recall:.4f}")
print(f"random   recall@20 {random_metrics(ds.graph, 20, seed).recall:.4f}")

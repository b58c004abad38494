"""Compare the full pipeline with ablated variants on one synthetic dataset.

Each run takes roughly one to two minutes.
"""

from inboxrec.evaluation import evaluate_all
from inboxrec.synthbench import SynthConfig, make_dataset
from inboxrec.training import TrainConfig, run_pipeline

ds, _ = make_dataset(SynthConfig(seed=0))
base = dict(dim=32, epochs=(30, 30, 15), base_lr=5e-3, n_negatives=64, seed=0)
variants = {
    "full": {},
    "w/o B&I (no pretrain, no intersection)": dict(no_pretrain=True, no_intersection=True),
    "max-min intersection": dict(maxmin=True),
    "no user bias": dict(no_user_bias=True),
}
for name, flags in variants.items():
    cfg = TrainConfig(**base, **flags)
    store, _ = run_pipeline(ds, cfg)
    rep = evaluate_all(store, ds, 20, cfg.variant, cfg.box_mode)
    print(f"{name:<40} recall@20 {rep.recall:.4f} ndcg@20 {rep.ndcg:.4f}")

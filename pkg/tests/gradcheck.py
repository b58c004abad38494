"""Central-difference check of ``grad_step`` on the d=4 toy instance."""

import numpy as np

from inboxrec.training import BatchSampler, TrainConfig, batch_loss, grad_step

from conftest import toy_dataset, toy_store

CASES = [
    ("pretrain", "iri", "attention"), ("pretrain", "trt", "attention"),
    ("pretrain", "irt-head", "attention"), ("pretrain", "irt-tag", "attention"),
    ("intersection", None, "attention"), ("intersection", None, "maxmin"),
    ("recommendation", None, "attention"), ("recommendation", None, "maxmin"),
]


def make_batch(sampler, stage, kind, rng):
    if stage == "pretrain":
        k, _, side = kind.partition("-")
        return sampler.pretrain(rng, kind=k, corrupt=side or "head")
    if stage == "intersection":
        return sampler.intersection(rng, rng.choice(sampler.items_with_concepts, 4))
    return sampler.recommendation(rng, rng.choice(len(sampler.pairs), 4))


def gradient_check(stage, kind, variant, literal, mode="both", n_params=32, h=1e-4,
                   margin=1e-2, max_tries=200, seed=0):
    """Worst relative error over ``n_params`` random coordinates.

    Stores are re-drawn until every kink argument on the loss path is at
    least ``margin`` away from its kink.
    """
    ds = toy_dataset(all_concepts=True)
    cfg = TrainConfig(dim=4, batch_size=4, n_negatives=3, maxmin=variant == "maxmin",
                      literal_loss=literal, no_user_bias=mode == "item",
                      only_user_bias=mode == "user", val_fraction=0.0)
    sampler = BatchSampler(ds, ds.graph, cfg)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        store = toy_store(ds, d=4, seed=int(rng.integers(2**31)), scale=4.0)
        batch = make_batch(sampler, stage, kind, rng)
        loss, grads, kink = grad_step(batch, store, ds, cfg, track_kinks=True)
        if kink >= margin:
            break
    else:
        raise RuntimeError("no kink-free instance found")
    names = sorted(grads)
    sizes = np.array([store.tables[n].size for n in names])
    worst = 0.0
    for _ in range(n_params):
        n = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = store.tables[n].reshape(-1)
        j = rng.integers(flat.size)
        old = flat[j]
        flat[j] = old + h
        up = batch_loss(batch, store, ds, cfg)
        flat[j] = old - h
        down = batch_loss(batch, store, ds, cfg)
        flat[j] = old
        num = (up - down) / (2 * h)
        ana = grads[n].reshape(-1)[j]
        worst = max(worst, abs(ana - num) / (abs(ana) + 1e-6))
    return worst

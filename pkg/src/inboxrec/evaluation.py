"""All-ranking top-K evaluation.

Every item the user has not interacted with in training is a candidate;
scores are ``gamma - D_PB(item point, user interest box)``; ties break on the
smaller item id.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .geometry import point_box_distance
from .model import user_boxes
from .tape import Tape

DEFAULT_K = 20


@dataclass
class EvalReport:
    K: int
    recall: float
    ndcg: float
    n_users_evaluated: int
    per_user: dict = field(default_factory=dict)

    def to_dict(self, with_users=False):
        out = {"K": self.K, "recall": self.recall, "ndcg": self.ndcg,
               "n_users": self.n_users_evaluated}
        if with_users:
            out["per_user"] = {str(k): v for k, v in sorted(self.per_user.items())}
        return out

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def lines(self):
        return [f"recall@{self.K} {self.recall:.6f} n_users={self.n_users_evaluated}",
                f"ndcg@{self.K} {self.ndcg:.6f} n_users={self.n_users_evaluated}"]


def score(item_point, center, half_width, gamma, inside_weight=1.0):
    return gamma - point_box_distance(item_point, center, half_width, inside_weight)


def recall_at_k(topk, test_items) -> float:
    test = set(int(x) for x in test_items)
    if not test:
        raise ContractError("recall needs a non-empty test set")
    return len(test.intersection(int(x) for x in topk)) / len(test)


def ndcg_at_k(topk, test_items) -> float:
    test = set(int(x) for x in test_items)
    if not test:
        raise ContractError("ndcg needs a non-empty test set")
    topk = [int(x) for x in topk]
    dcg = sum(1.0 / np.log2(p + 2) for p, x in enumerate(topk) if x in test)
    idcg = sum(1.0 / np.log2(p + 2) for p in range(min(len(topk), len(test))))
    return float(dcg / idcg) if idcg else 0.0


def rank_from_scores(scores, known, K):
    """Top-K ids by descending score, skipping ``known``; ties -> smaller id."""
    s = np.array(scores, dtype=np.float64)
    s[np.asarray(known, dtype=np.int64)] = -np.inf
    order = np.argsort(-s, kind="stable")
    n_ok = int(np.isfinite(s).sum())
    return order[:min(K, n_ok)]


def compute_user_boxes(store, ds, users, histories, variant="attention", mode="both", chunk=64):
    """Interest boxes for ``users`` given per-user history arrays."""
    d = store.dim
    cen = np.zeros((len(users), d), dtype=store.tables["items"].dtype)
    hw = np.zeros_like(cen)
    for s in range(0, len(users), chunk):
        us = np.asarray(users[s:s + chunk])
        hs = [np.asarray(histories[k]) for k in range(s, min(s + chunk, len(users)))]
        H = max(len(h) for h in hs)
        hist = np.zeros((len(us), H), dtype=np.int64)
        mask = np.zeros((len(us), H), dtype=bool)
        for k, h in enumerate(hs):
            hist[k, :len(h)] = h
            mask[k, :len(h)] = True
        tape = Tape(store.tables, record=False)
        c, h = user_boxes(tape, store, ds, us, hist, mask, variant, mode)
        cen[s:s + len(us)] = c.value
        hw[s:s + len(us)] = h.value
    return cen, hw


def score_all(store, center, half_width, inside_weight=1.0):
    """(U, n_items) score matrix for a stack of user boxes."""
    items = store.tables["items"]
    return score(items[None, :, :], center[:, None, :], half_width[:, None, :],
                 store.gamma, inside_weight)


def topk_lists(store, ds, users, histories, known, K, variant="attention", mode="both",
               inside_weight=1.0, chunk=None):
    users = list(users)
    if chunk is None:
        chunk = max(1, int(4_000_000 // max(store.n_items * store.dim, 1)))
    out = []
    for s in range(0, len(users), chunk):
        us = users[s:s + chunk]
        cen, hw = compute_user_boxes(store, ds, us, histories[s:s + chunk], variant, mode)
        sc = score_all(store, cen, hw, inside_weight)
        for k, _ in enumerate(us):
            out.append(rank_from_scores(sc[k], known[s + k], K))
    return out


def rank_items(user, store, ds, K=DEFAULT_K, variant="attention", mode="both",
               history_limit=64, inside_weight=1.0):
    hist = ds.graph.history(user, history_limit)
    if len(hist) == 0:
        return np.zeros(0, dtype=np.int64)
    return topk_lists(store, ds, [user], [hist], [ds.graph.train[user]], K, variant, mode,
                      inside_weight)[0]


def evaluate_lists(topk, targets, users, K) -> EvalReport:
    rec, nd, per = [], [], {}
    for u, top, tgt in zip(users, topk, targets):
        r, n = recall_at_k(top, tgt), ndcg_at_k(top, tgt)
        rec.append(r)
        nd.append(n)
        per[int(u)] = (r, n)
    if not rec:
        raise ContractError("no evaluable users")
    # fsum keeps the mean independent of user order
    return EvalReport(K, math.fsum(rec) / len(rec), math.fsum(nd) / len(nd), len(rec), per)


def evaluate_split(store, ds, train_lists, target_lists, K=DEFAULT_K, variant="attention",
                   mode="both", history_limit=64, inside_weight=1.0, order_lists=None):
    """Evaluate users that have both a training history and targets."""
    users = [u for u in range(len(target_lists))
             if len(target_lists[u]) and len(train_lists[u])]
    src = order_lists if order_lists is not None else train_lists
    hists = [np.asarray(src[u])[-history_limit:] for u in users]
    top = topk_lists(store, ds, users, hists, [train_lists[u] for u in users], K, variant, mode,
                     inside_weight)
    return evaluate_lists(top, [target_lists[u] for u in users], users, K)


def evaluate_all(store, ds, K=DEFAULT_K, variant="attention", mode="both", history_limit=64,
                 inside_weight=1.0) -> EvalReport:
    g = ds.graph
    return evaluate_split(store, ds, g.train, g.test, K, variant, mode, history_limit,
                          inside_weight, order_lists=g.train_order or None)

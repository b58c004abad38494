"""Seeded synthetic datasets with planted concept boxes.

Latent space is the unit cube ``[0, 1]^d_true``.  Each concept is an
axis-aligned box; each item is a point drawn inside the intersection of 1-3
mutually overlapping concepts and is linked (IRT) to *every* planted box that
contains it.  A user's interest is the intersection of
``concepts_per_interest`` overlapping boxes and their interactions are the
items inside it, split 80/20 into train/test.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .data import Dataset, InteractionGraph, classify_triples, write_interactions
from .errors import ContractError
from .evaluation import EvalReport, evaluate_lists, rank_from_scores
from .geometry import point_box_distance
from .model import NetConfig, ParamStore, init_params


@dataclass
class SynthConfig:
    n_concepts: int = 20
    n_items: int = 2000
    n_users: int = 200
    d_true: int = 8
    concepts_per_interest: int = 2
    items_per_user: int = 100         # cap on positives per user
    noise: float = 0.0
    seed: int = 0
    n_relations: int = 2
    half_width: tuple = (0.15, 0.35)
    min_positives: int = 5
    max_item_concepts: int = 3
    emit_trt: bool = True
    test_fraction: float = 0.2

    def __post_init__(self):
        self.half_width = tuple(self.half_width)
        counts = (self.n_concepts, self.n_items, self.n_users, self.d_true, self.items_per_user,
                  self.n_relations, self.min_positives, self.max_item_concepts)
        if min(counts) < 1 or self.concepts_per_interest < 1:
            raise ContractError("synthetic counts must be >= 1")
        if not 0 <= self.noise <= 1:
            raise ContractError("noise is a probability")
        if not 0 < self.half_width[0] <= self.half_width[1]:
            raise ContractError("half_width must be an increasing positive range")


@dataclass
class GroundTruth:
    config: SynthConfig
    lo: np.ndarray                 # (n_concepts, d_true)
    hi: np.ndarray
    points: np.ndarray             # (n_items, d_true)
    memberships: list              # per item: sorted concept ids containing it
    user_concepts: list            # per user: concept ids of the planted interest
    concept_rel: np.ndarray        # relation id of each concept
    trt_pairs: list = field(default_factory=list)

    @property
    def n_tags(self):
        return len(self.lo)

    def tag_entity(self, j):
        return self.config.n_items + int(j)

    def interest_box(self, user):
        c = self.user_concepts[user]
        return self.lo[c].max(axis=0), self.hi[c].min(axis=0)

    def inside(self, user):
        lo, hi = self.interest_box(user)
        return np.all((self.points >= lo) & (self.points <= hi), axis=1)

    def to_dict(self):
        return {
            "config": asdict(self.config),
            "concepts": [{"concept": j, "relation": int(self.concept_rel[j]),
                          "tag": self.tag_entity(j),
                          "lo": self.lo[j].tolist(), "hi": self.hi[j].tolist()}
                         for j in range(self.n_tags)],
            "items": [{"item": i, "point": self.points[i].tolist(),
                       "concepts": list(map(int, self.memberships[i]))}
                      for i in range(len(self.points))],
            "users": [{"user": u, "concepts": list(map(int, c))}
                      for u, c in enumerate(self.user_concepts)],
            "trt": [list(map(int, p)) for p in self.trt_pairs],
        }

    @classmethod
    def from_dict(cls, d):
        cfg = SynthConfig(**d["config"])
        return cls(cfg,
                   np.array([c["lo"] for c in d["concepts"]]),
                   np.array([c["hi"] for c in d["concepts"]]),
                   np.array([it["point"] for it in d["items"]]),
                   [it["concepts"] for it in d["items"]],
                   [u["concepts"] for u in d["users"]],
                   np.array([c["relation"] for c in d["concepts"]], dtype=np.int64),
                   [tuple(p) for p in d["trt"]])


def _overlaps(lo, hi):
    """Pairwise box-overlap matrix (closed boxes)."""
    return np.all((lo[:, None] <= hi[None]) & (lo[None] <= hi[:, None]), axis=-1)


def _cliques(ov, k, limit=5000):
    """Concept sets of size k whose boxes pairwise overlap (hence share a region)."""
    n = len(ov)
    if k == 1:
        return [(j,) for j in range(n)]
    out = []
    for combo in combinations(range(n), k):
        if all(ov[a, b] for a, b in combinations(combo, 2)):
            out.append(combo)
            if len(out) >= limit:
                break
    return out


def generate_synthetic(cfg: SynthConfig):
    """Returns ``(InteractionGraph, TypedTripletStore, GroundTruth)``."""
    rng = np.random.default_rng(cfg.seed)
    d, C = cfg.d_true, cfg.n_concepts
    hw = rng.uniform(*cfg.half_width, size=(C, d))
    cen = rng.uniform(0, 1, size=(C, d))
    lo, hi = cen - hw, cen + hw
    ov = _overlaps(lo, hi)

    # items: pick a small overlapping concept set, draw inside its intersection
    sets = {k: _cliques(ov, k) for k in range(1, cfg.max_item_concepts + 1)}
    sizes = [k for k in sets if sets[k]]
    points = np.empty((cfg.n_items, d))
    for i in range(cfg.n_items):
        k = sizes[rng.integers(len(sizes))]
        combo = list(sets[k][rng.integers(len(sets[k]))])
        a, b = lo[combo].max(axis=0), hi[combo].min(axis=0)
        points[i] = rng.uniform(a, b)
    inside = np.all((points[:, None] >= lo[None]) & (points[:, None] <= hi[None]), axis=-1)
    memberships = [np.nonzero(row)[0].tolist() for row in inside]

    # users: an overlapping concept set with enough member items
    user_concepts, train, test = [], [], []
    for u in range(cfg.n_users):
        k = min(cfg.concepts_per_interest, C)
        while True:
            cands = _cliques(ov, k)
            found = fallback = None
            for _ in range(100):
                if not cands:
                    break
                combo = list(cands[rng.integers(len(cands))])
                pos = np.nonzero(inside[:, combo].all(axis=1))[0]
                if len(pos) < cfg.min_positives:
                    continue
                # prefer regions that fit under the cap, so every item inside is a positive
                if len(pos) <= cfg.items_per_user:
                    found = combo, pos
                    break
                fallback = fallback or (combo, pos)
            found = found or fallback
            if found or k == 1:
                break
            k -= 1
        if found is None:
            raise ContractError("could not plant a user interest with enough items; "
                                "increase n_items or box widths")
        combo, pos = found
        if len(pos) > cfg.items_per_user:
            pos = np.sort(rng.choice(pos, cfg.items_per_user, replace=False))
        pos = rng.permutation(pos)
        if cfg.noise > 0:
            flip = rng.random(len(pos)) < cfg.noise
            pos = pos.copy()
            pos[flip] = rng.integers(0, cfg.n_items, flip.sum())
            _, first = np.unique(pos, return_index=True)
            pos = pos[np.sort(first)]
        n_test = max(1, int(round(cfg.test_fraction * len(pos))))
        user_concepts.append(sorted(combo))
        train.append(pos[:-n_test])
        test.append(pos[-n_test:])

    rel = np.arange(C, dtype=np.int64) % cfg.n_relations
    rows = [(i, int(rel[j]), cfg.n_items + j) for i in range(cfg.n_items) for j in memberships[i]]
    trt_pairs = []
    if cfg.emit_trt:
        trt_rel = cfg.n_relations
        trt_pairs = [(a, b) for a, b in combinations(range(C), 2) if ov[a, b]]
        rows += [(cfg.n_items + a, trt_rel, cfg.n_items + b) for a, b in trt_pairs]
    raw = np.array(rows, dtype=np.int64).reshape(-1, 3)
    n_rel = cfg.n_relations + (1 if cfg.emit_trt else 0)
    kg = classify_triples(raw, cfg.n_items, cfg.n_items + C, n_rel)

    order = [np.asarray(t, dtype=np.int64) for t in train]
    graph = InteractionGraph(cfg.n_users, cfg.n_items, [np.sort(t) for t in order],
                             [np.sort(np.asarray(t, dtype=np.int64)) for t in test], order)
    truth = GroundTruth(cfg, lo, hi, points, memberships, user_concepts, rel, trt_pairs)
    return graph, kg, truth


def raw_triples(kg):
    """KG rows in file orientation (re-oriented IRT rows restored)."""
    irt = kg.irt.copy()
    back = irt[:, 1] >= kg.n_relations_raw
    irt[back] = np.stack([irt[back, 2], irt[back, 1] - kg.n_relations_raw, irt[back, 0]], axis=1)
    return np.concatenate([kg.iri, kg.trt, irt])


def write_dataset(directory, graph, kg, truth=None):
    """Write train.txt / test.txt / kg_final.txt (+ ground_truth.json)."""
    os.makedirs(directory, exist_ok=True)
    write_interactions(os.path.join(directory, "train.txt"), graph.train_order or graph.train)
    write_interactions(os.path.join(directory, "test.txt"), graph.test)
    with open(os.path.join(directory, "kg_final.txt"), "w") as fh:
        for h, r, t in raw_triples(kg):
            fh.write(f"{h} {r} {t}\n")
    if truth is not None:
        with open(os.path.join(directory, "ground_truth.json"), "w") as fh:
            json.dump(truth.to_dict(), fh, sort_keys=True)
            fh.write("\n")


def read_ground_truth(path) -> GroundTruth:
    with open(path) as fh:
        return GroundTruth.from_dict(json.load(fh))


def make_dataset(cfg: SynthConfig, max_concepts=None):
    graph, kg, truth = generate_synthetic(cfg)
    return Dataset.build(graph, kg, max_concepts), truth


# ---------------------------------------------------------------------------
# reference scorers
# ---------------------------------------------------------------------------

def oracle_metrics(truth: GroundTruth, graph: InteractionGraph, K=20) -> EvalReport:
    """Rank by true latent distance to the planted interest region.

    Items inside the region come first (zero outside distance); ties are
    broken by distance to the region center.
    """
    users = [u for u in range(graph.n_users) if len(graph.test[u]) and len(graph.train[u])]
    tops = []
    for u in users:
        lo, hi = truth.interest_box(u)
        c, h = (lo + hi) / 2, np.maximum(hi - lo, 0) / 2
        d_out = point_box_distance(truth.points, c, h, inside_weight=0.0)
        d_all = point_box_distance(truth.points, c, h)
        order = np.lexsort((d_all, d_out))
        score = np.empty(len(order))
        score[order] = -np.arange(len(order), dtype=float)
        tops.append(rank_from_scores(score, graph.train[u], K))
    return evaluate_lists(tops, [graph.test[u] for u in users], users, K)


def random_metrics(graph: InteractionGraph, K=20, seed=0) -> EvalReport:
    rng = np.random.default_rng(seed)
    users = [u for u in range(graph.n_users) if len(graph.test[u]) and len(graph.train[u])]
    tops = [rank_from_scores(rng.random(graph.n_items), graph.train[u], K) for u in users]
    return evaluate_lists(tops, [graph.test[u] for u in users], users, K)


def planted_store(truth: GroundTruth, ds: Dataset, gamma=12.0) -> ParamStore:
    """A store whose geometry *is* the planted one (d = d_true).

    Items sit at their latent points, tags are the planted boxes, relations
    are identity (zero center, zero offset).  Use with the max-min variant
    and item-only boxes: each history item's box is then the exact overlap
    of the concepts containing it.
    """
    d = truth.config.d_true
    store = init_params(d, ds.n_items, ds.kg.n_tags, max(ds.kg.n_relations_aug, 1), ds.n_users,
                        np.random.default_rng(0), gamma=gamma, net=NetConfig())
    t = store.tables
    t["items"][:] = truth.points
    t["tags"][:, :d] = (truth.lo + truth.hi) / 2
    t["tags"][:, d:] = (truth.hi - truth.lo) / 2
    t["relations"][:] = 0
    return store

"""Interaction / knowledge-graph loading, triplet typing, and samplers.

File formats follow the public KG-recommendation releases:

* ``train.txt`` / ``test.txt``: one user per line, ``user item item ...``.
* ``kg_final.txt``: one ``head relation tail`` triple per line.  Entity ids
  below ``n_items`` are items, the rest are tags.

Tag-to-item triplets ``(tag, r, item)`` are re-oriented to
``(item, r + n_raw_relations, tag)`` so every item/tag fact reads
item -> tag.  Triplets keep entity ids; ``tag_index`` maps a tag entity to
its row in the tag table.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError, RangeError, SamplingError

log = logging.getLogger(__name__)

TRIPLET_TYPES = ("iri", "trt", "irt")
NEGATIVE_KINDS = ("head", "item_or_tag", "item_not_in_concepts", "item_not_interacted")
RETRY_BUDGET = 64


# ---------------------------------------------------------------------------
# interactions
# ---------------------------------------------------------------------------

@dataclass
class InteractionGraph:
    n_users: int
    n_items: int
    train: list          # per-user sorted unique item ids
    test: list
    train_order: list = field(default_factory=list)  # per-user ids in file order, deduped

    @property
    def n_train(self) -> int:
        return int(sum(len(x) for x in self.train))

    @property
    def n_test(self) -> int:
        return int(sum(len(x) for x in self.test))

    def history(self, user, limit=None):
        """Training items of ``user`` in file order, keeping the last ``limit``."""
        items = self.train_order[user] if self.train_order else self.train[user]
        if limit is not None and len(items) > limit:
            items = items[-limit:]
        return items


def _read_user_lines(path):
    rows = {}
    dups = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks:
                continue
            try:
                ids = [int(t) for t in toks]
            except ValueError as exc:
                raise ParseError(path, lineno, f"non-integer token ({exc})") from None
            if any(i < 0 for i in ids):
                raise ParseError(path, lineno, "negative id")
            user, items = ids[0], ids[1:]
            seen = rows.setdefault(user, {})
            for i in items:
                if i in seen:
                    dups += 1
                else:
                    seen[i] = None
    if dups:
        log.info("%s: dropped %d duplicate interactions", path, dups)
    return {u: list(d) for u, d in rows.items()}


def load_interactions(path_train, path_test, n_items=None) -> InteractionGraph:
    """Read the train/test split files.

    ``n_items`` may be passed to extend the item range (e.g. from the KG);
    otherwise it is one past the largest item id seen.
    """
    tr = _read_user_lines(path_train)
    te = _read_user_lines(path_test)
    users = set(tr) | set(te)
    n_users = 1 + max(users) if users else 0
    max_item = max([max(v) for v in list(tr.values()) + list(te.values()) if v], default=-1)
    n = max(max_item + 1, n_items or 0)
    train = [np.array(sorted(tr.get(u, [])), dtype=np.int64) for u in range(n_users)]
    test = [np.array(sorted(te.get(u, [])), dtype=np.int64) for u in range(n_users)]
    order = [np.array(tr.get(u, []), dtype=np.int64) for u in range(n_users)]
    return InteractionGraph(n_users, n, train, test, order)


def write_interactions(path, per_user):
    with open(path, "w") as fh:
        for u, items in enumerate(per_user):
            fh.write(" ".join(str(x) for x in [u, *map(int, items)]) + "\n")


# ---------------------------------------------------------------------------
# knowledge graph
# ---------------------------------------------------------------------------

@dataclass
class TypedTripletStore:
    iri: np.ndarray      # (n, 3) item, rel, item
    trt: np.ndarray      # (n, 3) tag, rel, tag
    irt: np.ndarray      # (n, 3) item, rel, tag (augmented relation ids for re-oriented rows)
    n_items: int
    n_tags: int
    n_relations_raw: int
    n_raw_triplets: int = 0

    @property
    def n_relations_aug(self) -> int:
        return 2 * self.n_relations_raw

    @property
    def n_entities(self) -> int:
        return self.n_items + self.n_tags

    def tag_index(self, entity):
        return np.asarray(entity) - self.n_items

    def counts(self) -> dict:
        return {"iri": len(self.iri), "trt": len(self.trt), "irt": len(self.irt)}

    def of_type(self, kind) -> np.ndarray:
        return getattr(self, kind)


def _empty3():
    return np.zeros((0, 3), dtype=np.int64)


def read_triples(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks:
                continue
            if len(toks) != 3:
                raise ParseError(path, lineno, f"expected 3 ids, got {len(toks)}")
            try:
                h, r, t = (int(x) for x in toks)
            except ValueError as exc:
                raise ParseError(path, lineno, f"non-integer token ({exc})") from None
            if min(h, r, t) < 0:
                raise ParseError(path, lineno, "negative id")
            rows.append((h, r, t))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def classify_triples(raw: np.ndarray, n_items: int, n_entities=None, n_relations=None) -> TypedTripletStore:
    raw = np.asarray(raw, dtype=np.int64).reshape(-1, 3)
    n_raw = len(raw)
    uniq = np.unique(raw, axis=0) if n_raw else raw
    if len(uniq) != n_raw:
        log.info("dropped %d duplicate KG triplets", n_raw - len(uniq))
    # keep file order among unique rows for reproducibility
    if n_raw:
        _, first = np.unique(raw, axis=0, return_index=True)
        raw = raw[np.sort(first)]
    h, r, t = raw[:, 0], raw[:, 1], raw[:, 2]
    max_ent = int(max(h.max(), t.max())) if len(raw) else n_items - 1
    if n_entities is not None and max_ent >= n_entities:
        raise RangeError(f"entity id {max_ent} >= declared entity count {n_entities}")
    n_rel = int(r.max()) + 1 if len(raw) else 0
    if n_relations is not None:
        if n_rel > n_relations:
            raise RangeError(f"relation id {n_rel - 1} >= declared relation count {n_relations}")
        n_rel = n_relations
    n_tags = (n_entities if n_entities is not None else max(max_ent + 1, n_items)) - n_items

    h_item, t_item = h < n_items, t < n_items
    iri = raw[h_item & t_item]
    trt = raw[~h_item & ~t_item]
    fwd = raw[h_item & ~t_item]
    back = raw[~h_item & t_item]
    back = np.stack([back[:, 2], back[:, 1] + n_rel, back[:, 0]], axis=1) if len(back) else _empty3()
    irt = np.concatenate([fwd, back]) if len(fwd) or len(back) else _empty3()
    return TypedTripletStore(iri.reshape(-1, 3), trt.reshape(-1, 3), irt.reshape(-1, 3),
                             n_items, n_tags, n_rel, len(raw))


def load_kg(path_kg, n_items, n_entities=None, n_relations=None) -> TypedTripletStore:
    return classify_triples(read_triples(path_kg), n_items, n_entities, n_relations)


# ---------------------------------------------------------------------------
# concepts
# ---------------------------------------------------------------------------

class ConceptIndex:
    """Item -> sorted (relation, tag) concept list, and the inverse map."""

    def __init__(self, irt: np.ndarray, n_items: int, max_per_item=None):
        self.n_items = n_items
        irt = np.asarray(irt, dtype=np.int64).reshape(-1, 3)
        order = np.lexsort((irt[:, 2], irt[:, 1], irt[:, 0]))
        irt = irt[order]
        self.item_ptr = np.searchsorted(irt[:, 0], np.arange(n_items + 1)).astype(np.int64)
        self._rel = irt[:, 1]
        self._tag = irt[:, 2]
        counts = np.diff(self.item_ptr)
        self.n_concepts = counts if max_per_item is None else np.minimum(counts, max_per_item)
        width = int(self.n_concepts.max()) if n_items and len(irt) else 0
        self.rel_pad = np.zeros((n_items, max(width, 1)), dtype=np.int64)
        self.tag_pad = np.zeros((n_items, max(width, 1)), dtype=np.int64)
        for i in np.nonzero(self.n_concepts)[0]:
            k = self.n_concepts[i]
            s = self.item_ptr[i]
            self.rel_pad[i, :k] = self._rel[s:s + k]
            self.tag_pad[i, :k] = self._tag[s:s + k]
        # concept -> items
        ckey = np.lexsort((irt[:, 0], irt[:, 2], irt[:, 1]))
        self._by_concept = irt[ckey]
        self._concept_keys = [tuple(x) for x in np.unique(self._by_concept[:, 1:], axis=0)] \
            if len(irt) else []

    def concepts_of(self, item) -> list:
        if not 0 <= item < self.n_items:
            raise RangeError(f"item {item} outside [0, {self.n_items})")
        s, e = self.item_ptr[item], self.item_ptr[item + 1]
        return [(int(r), int(t)) for r, t in zip(self._rel[s:e], self._tag[s:e])]

    def items_of(self, rel, tag) -> np.ndarray:
        rows = self._by_concept
        m = (rows[:, 1] == rel) & (rows[:, 2] == tag)
        return rows[m, 0]

    def concepts(self) -> list:
        return list(self._concept_keys)

    def padded(self, items):
        """(rel, tag, mask) arrays of shape items.shape + (C,), C = batch max."""
        items = np.asarray(items)
        n = self.n_concepts[items]
        c = max(int(n.max()) if n.size else 0, 1)
        mask = np.arange(c) < n[..., None]
        return self.rel_pad[items][..., :c], self.tag_pad[items][..., :c], mask


# ---------------------------------------------------------------------------
# dataset bundle + manifest
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    graph: InteractionGraph
    kg: TypedTripletStore
    concepts: ConceptIndex

    @property
    def n_users(self):
        return self.graph.n_users

    @property
    def n_items(self):
        return self.graph.n_items

    @classmethod
    def build(cls, graph, kg, max_concepts=None):
        return cls(graph, kg, ConceptIndex(kg.irt, graph.n_items, max_concepts))

    def manifest(self) -> dict:
        c = self.kg.counts()
        total = sum(c.values())
        return {
            "n_users": self.graph.n_users,
            "n_items": self.graph.n_items,
            "n_interactions": self.graph.n_train + self.graph.n_test,
            "n_train": self.graph.n_train,
            "n_test": self.graph.n_test,
            "n_tags": self.kg.n_tags,
            "n_relations_raw": self.kg.n_relations_raw,
            "n_relations_aug": self.kg.n_relations_aug,
            "n_iri": c["iri"],
            "n_trt": c["trt"],
            "n_irt": c["irt"],
            "pct_iri": 100.0 * c["iri"] / total if total else 0.0,
            "pct_trt": 100.0 * c["trt"] / total if total else 0.0,
            "pct_irt": 100.0 * c["irt"] / total if total else 0.0,
            "entity_layout": "items_first",
        }


def load_dataset(directory, max_concepts=None) -> Dataset:
    paths = {k: os.path.join(directory, f) for k, f in
             (("train", "train.txt"), ("test", "test.txt"), ("kg", "kg_final.txt"))}
    for p in paths.values():
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    graph = load_interactions(paths["train"], paths["test"])
    kg = load_kg(paths["kg"], graph.n_items)
    return Dataset.build(graph, kg, max_concepts)


def write_manifest(path, manifest: dict):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def encode_keys(cols, sizes) -> np.ndarray:
    """Mixed-radix encoding of integer columns into one int64 key."""
    key = np.zeros(np.shape(cols[0]), dtype=np.int64)
    for c, s in zip(cols, sizes):
        key = key * int(s) + np.asarray(c, dtype=np.int64)
    return key


def in_sorted(keys, sorted_keys) -> np.ndarray:
    if len(sorted_keys) == 0:
        return np.zeros(np.shape(keys), dtype=bool)
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return sorted_keys[pos] == keys


def draw_rejecting(n_candidates, is_positive, shape, rng, budget=RETRY_BUDGET, offset=0):
    """Uniform ids in ``[offset, offset + n_candidates)`` avoiding positives.

    ``is_positive(ids, where)`` returns a bool array for the candidate ids at
    flat positions ``where``.  Each slot is redrawn at most ``budget`` times;
    after that the last draw is kept unfiltered.
    """
    if n_candidates <= 0:
        raise SamplingError("empty admissible range for negative sampling")
    out = rng.integers(0, n_candidates, size=shape) + offset
    flat = out.reshape(-1)
    todo = np.nonzero(is_positive(flat, np.arange(flat.size)))[0]
    for _ in range(budget):
        if todo.size == 0:
            break
        flat[todo] = rng.integers(0, n_candidates, size=todo.size) + offset
        todo = todo[is_positive(flat[todo], todo)]
    return out


@dataclass
class NegativeContext:
    """Admissible range and the true positives of one sampling context."""
    n_candidates: int
    positives: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    offset: int = 0


def sample_negatives(kind, context: NegativeContext, n, rng) -> np.ndarray:
    if kind not in NEGATIVE_KINDS:
        raise ContractError(f"unknown negative kind {kind!r}")
    if n < 1:
        raise ContractError("n must be >= 1")
    pos = np.unique(np.asarray(context.positives, dtype=np.int64))
    return draw_rejecting(context.n_candidates, lambda ids, _: in_sorted(ids, pos), (n,), rng,
                          offset=context.offset)


def sample_weight(stage, count, alpha=4.0) -> float:
    """Per-sample loss weight.

    stage 1: ``count`` = number of correct heads for (?, r, t) -> 1/count
    stage 2: ``count`` = number of concepts of the item -> 1/(count+1)
    stage 3: ``count`` = interaction-history size m -> 1/(m+alpha)
    """
    count = np.asarray(count, dtype=float)
    if np.any(count <= 0):
        raise ContractError("sample_weight needs a positive count")
    if stage == 1:
        w = 1.0 / count
    elif stage == 2:
        w = 1.0 / (count + 1.0)
    elif stage == 3:
        w = 1.0 / (count + alpha)
    else:
        raise ContractError(f"unknown stage {stage}")
    return float(w) if w.ndim == 0 else w


def type_proportions(store: TypedTripletStore, only_irt=False) -> np.ndarray:
    c = store.counts()
    counts = np.array([0 if only_irt and k != "irt" else c[k] for k in TRIPLET_TYPES], dtype=float)
    if counts.sum() == 0:
        raise ContractError("no triplets available for sampling")
    return counts / counts.sum()


def triplet_type_sampler(store: TypedTripletStore, rng, only_irt=False) -> str:
    return TRIPLET_TYPES[rng.choice(3, p=type_proportions(store, only_irt))]


class KGIndex:
    """Sorted key sets used by the rejection samplers of stages 1 and 2."""

    def __init__(self, ds: Dataset):
        kg = ds.kg
        self.ds = ds
        ne, nr = kg.n_entities, max(kg.n_relations_aug, 1)
        self.sizes = (nr, ne, ne)
        self.keys = {}
        self.answers = {}
        for kind in TRIPLET_TYPES:
            trip = kg.of_type(kind)
            # (r, t, h) membership for head corruption
            k = encode_keys([trip[:, 1], trip[:, 2], trip[:, 0]], self.sizes)
            self.keys[kind] = np.sort(k)
            rt = encode_keys([trip[:, 1], trip[:, 2]], self.sizes[:2])
            uniq, inv, cnt = np.unique(rt, return_inverse=True, return_counts=True)
            self.answers[kind] = cnt[inv].reshape(-1)
        irt = kg.irt
        self.irt_hrt = np.sort(encode_keys([irt[:, 0], irt[:, 1], irt[:, 2]], (ne, nr, ne)))
        # (item, concept-id) membership for the subset test of stage 2
        ci = ds.concepts
        self.concept_sizes = (nr, ne)
        rows = np.repeat(np.arange(ci.n_items), np.diff(ci.item_ptr))
        self.item_concept = np.sort(encode_keys(
            [rows, encode_keys([ci._rel, ci._tag], self.concept_sizes)], (ci.n_items, nr * ne)))

    def head_is_positive(self, kind, r, t, h):
        return in_sorted(encode_keys([r, t, h], self.sizes), self.keys[kind])

    def irt_is_positive(self, i, r, t):
        ne, nr = self.ds.kg.n_entities, max(self.ds.kg.n_relations_aug, 1)
        return in_sorted(encode_keys([i, r, t], (ne, nr, ne)), self.irt_hrt)

    def covers_all(self, cand, rel, tag, mask):
        """True where item ``cand`` carries every masked concept (rel, tag)."""
        nr, ne = self.concept_sizes
        cid = encode_keys([rel, tag], self.concept_sizes)
        key = encode_keys([cand[..., None], cid], (self.ds.concepts.n_items, nr * ne))
        hit = in_sorted(key, self.item_concept) | ~mask
        return hit.all(axis=-1)


class InteractionIndex:
    def __init__(self, n_items, per_user):
        rows = np.concatenate([np.full(len(x), u) for u, x in enumerate(per_user)]) \
            if per_user else np.zeros(0, dtype=np.int64)
        cols = np.concatenate(per_user) if per_user else np.zeros(0, dtype=np.int64)
        self.n_items = n_items
        self.keys = np.sort(encode_keys([rows, cols], (len(per_user), n_items)))
        self.n_users = len(per_user)

    def is_positive(self, users, items):
        return in_sorted(encode_keys([users, items], (self.n_users, self.n_items)), self.keys)

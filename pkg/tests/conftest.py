import numpy as np
import pytest

from inboxrec.data import Dataset, InteractionGraph, classify_triples
from inboxrec.model import init_params


def toy_dataset(max_concepts=None, all_concepts=False):
    """6 items (0-5), 3 tags (entities 6-8), 2 raw relations, 4 users.

    Item 5 has no concepts (unless ``all_concepts``); item 0 has three.
    """
    raw = np.array([
        [0, 0, 6], [0, 1, 7], [0, 0, 8],   # item 0: three concepts
        [1, 0, 6], [1, 1, 7],
        [2, 0, 6],
        [7, 1, 3],                          # tag -> item, re-oriented to (3, 3, 7)
        [4, 0, 8],
        [6, 1, 7], [7, 0, 8],               # TRT
        [1, 0, 2], [3, 1, 4],               # IRI
    ])
    if all_concepts:
        raw = np.vstack([raw, [[5, 1, 8]]])
    kg = classify_triples(raw, n_items=6, n_entities=9, n_relations=2)
    train = [np.array([0, 1, 2]), np.array([3, 4]), np.array([0, 5]), np.array([1, 2, 3, 4])]
    test = [np.array([3]), np.array([0, 1]), np.array([2]), np.array([5])]
    order = [np.array([2, 0, 1]), np.array([4, 3]), np.array([5, 0]), np.array([1, 2, 3, 4])]
    graph = InteractionGraph(4, 6, train, test, order)
    return Dataset.build(graph, kg, max_concepts)


@pytest.fixture
def toy():
    return toy_dataset()


def toy_store(ds, d=4, seed=0, dtype=np.float64, **kw):
    return init_params(d, ds.n_items, ds.kg.n_tags, ds.kg.n_relations_aug, ds.n_users,
                       np.random.default_rng(seed), dtype=dtype, **kw)

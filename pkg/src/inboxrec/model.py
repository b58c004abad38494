"""Trainable parameters, intersection operators, and interest boxes.

Tables (row-major, float32 by default):

* ``items``      n_items x d        item points
* ``tags``       n_tags x 2d        [center | raw offset]
* ``relations``  n_rel_aug x 2d     [center | raw offset]
* ``users``      n_users x d        user vectors

followed by the MLP weights of the attention intersection (``attn.*``) and
the user-bias intersection (``user.*``).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, CorruptCheckpointError, RangeError
from .geometry import Box
from .tape import Tape

MAGIC = b"INBOX1"
TABLES = ("items", "tags", "relations", "users")
ATTN_NETS = ("attn.center", "attn.off_in", "attn.off_out")
USER_NETS = ("user.center", "user.off")


@dataclass
class NetConfig:
    hidden_layers: int = 1
    hidden_width: int | None = None   # defaults to d
    activation: str = "relu"
    temperature: float = 1.0

    def widths(self, d_in, d):
        if self.hidden_layers < 0 or (self.hidden_width is not None and self.hidden_width < 1):
            raise ContractError("network widths must be >= 1")
        h = self.hidden_width or d
        return [d_in] + [h] * self.hidden_layers + [d]


def net_layout(d, cfg: NetConfig) -> dict:
    """name -> list of (in, out) per affine layer."""
    out = {}
    for name in ATTN_NETS + USER_NETS:
        d_in = 2 * d if name.startswith("user.") else d
        w = cfg.widths(d_in, d)
        out[name] = list(zip(w[:-1], w[1:]))
    return out


@dataclass
class ParamStore:
    dim: int
    gamma: float
    n_items: int
    n_tags: int
    n_relations: int
    n_users: int
    net: NetConfig = field(default_factory=NetConfig)
    tables: dict = field(default_factory=dict)
    seed: int = 0
    stage: str = "init"

    @property
    def d(self):
        return self.dim

    def order(self):
        names = list(TABLES)
        for name, layers in net_layout(self.dim, self.net).items():
            for k in range(len(layers)):
                names += [f"{name}.{k}.w", f"{name}.{k}.b"]
        return names

    def copy(self) -> "ParamStore":
        out = ParamStore(**{k: v for k, v in self.__dict__.items() if k != "tables"})
        out.tables = {k: v.copy() for k, v in self.tables.items()}
        return out

    def astype(self, dtype) -> "ParamStore":
        out = self.copy()
        out.tables = {k: v.astype(dtype) for k, v in out.tables.items()}
        return out

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.tables.values())

    def item_point(self, i):
        return self.tables["items"][i]

    def tag_box(self, t) -> Box:
        row = self.tables["tags"][t]
        return Box(row[:self.dim], row[self.dim:])

    def relation_box(self, r) -> Box:
        row = self.tables["relations"][r]
        return Box(row[:self.dim], row[self.dim:])


def init_params(dim, n_items, n_tags, n_relations, n_users, rng, gamma=12.0, scale=None,
                net: NetConfig | None = None, seed=0, dtype=np.float32) -> ParamStore:
    """Random initial store.

    Centers and item/user points ~ U(+-gamma/(2d) * s) with ``s = d/8`` by
    default; raw offsets ~ U(0, gamma/d) so boxes start non-degenerate;
    network weights ~ U(+-1/sqrt(fan_in)).
    """
    if dim <= 0 or min(n_items, n_users) <= 0:
        raise ContractError("dimension and item/user counts must be positive")
    net = net or NetConfig()
    s = dim / 8 if scale is None else scale
    lim = gamma / (2 * dim) * s
    d = dim
    store = ParamStore(dim, float(gamma), n_items, n_tags, n_relations, n_users, net, seed=seed)

    def boxes(n):
        return np.concatenate([rng.uniform(-lim, lim, (n, d)),
                               rng.uniform(0, gamma / d, (n, d))], axis=1)

    t = store.tables
    t["items"] = rng.uniform(-lim, lim, (n_items, d))
    t["tags"] = boxes(n_tags)
    t["relations"] = boxes(n_relations)
    t["users"] = rng.uniform(-lim, lim, (n_users, d))
    for name, layers in net_layout(d, net).items():
        for k, (fi, fo) in enumerate(layers):
            b = 1 / np.sqrt(fi)
            t[f"{name}.{k}.w"] = rng.uniform(-b, b, (fi, fo))
            t[f"{name}.{k}.b"] = rng.uniform(-b, b, (fo,))
    store.tables = {k: t[k].astype(dtype) for k in store.order()}
    return store


# ---------------------------------------------------------------------------
# batched operators on a tape.  Member sets live on axis -2 with a mask of
# shape (..., C).  Every box is (center node, half-width node), half-width >= 0.
# ---------------------------------------------------------------------------

def mlp(tape: Tape, name, x, n_layers):
    for k in range(n_layers):
        x = tape.linear(x, tape.param(f"{name}.{k}.w"), tape.param(f"{name}.{k}.b"))
        if k < n_layers - 1:
            x = tape.relu(x)
    return x


def _n_layers(store):
    return store.net.hidden_layers + 1


def concept_boxes(tape: Tape, store: ParamStore, rel, tag_rows):
    """Project tag boxes by relation boxes: (center, half-width) nodes."""
    d = store.dim
    c0, c1 = slice(0, d), slice(d, 2 * d)
    cen = tape.add(tape.gather("tags", tag_rows, c0), tape.gather("relations", rel, c0))
    off = tape.add(tape.relu(tape.gather("tags", tag_rows, c1)), tape.gather("relations", rel, c1))
    return cen, tape.relu(off)


def attention_box(tape, store, cen, hw, mask):
    L = _n_layers(store)
    z = mlp(tape, "attn.center", cen, L)
    if store.net.temperature != 1.0:
        z = tape.scale(z, 1.0 / store.net.temperature)
    a = tape.masked_softmax(z, mask, axis=-2)
    c_out = tape.sum(tape.mul(a, cen), axis=-2)
    m = tape.masked_extreme(hw, mask, axis=-2, kind="min")
    e = tape.masked_mean(mlp(tape, "attn.off_in", hw, L), mask, axis=-2)
    g = tape.sigmoid(mlp(tape, "attn.off_out", e, L))
    return c_out, tape.mul(m, g)


def maxmin_box(tape, store, cen, hw, mask):
    hi = tape.masked_extreme(tape.add(cen, hw), mask, axis=-2, kind="min")
    lo = tape.masked_extreme(tape.sub(cen, hw), mask, axis=-2, kind="max")
    return tape.scale(tape.add(hi, lo), 0.5), tape.scale(tape.relu(tape.sub(hi, lo)), 0.5)


def user_bias_box(tape, store, cen, hw, mask, user):
    """``user`` node broadcasts against the member axis (shape (..., 1, d))."""
    L = _n_layers(store)
    c_att = tape.masked_softmax(mlp(tape, "user.center", tape.concat(cen, user), L), mask, axis=-2)
    o_att = tape.masked_softmax(mlp(tape, "user.off", tape.concat(hw, user), L), mask, axis=-2)
    return (tape.sum(tape.mul(c_att, cen), axis=-2),
            tape.sum(tape.mul(o_att, hw), axis=-2))


def item_concept_set(tape, store, ds, items):
    """Concept boxes of ``items`` (any shape) with a point-box fallback slot.

    Items without concepts get a single zero-width member at their own point.
    Returns (center, half-width, mask) with members on axis -2.
    """
    rel, tag, mask = ds.concepts.padded(items)
    # padded slots point at tag row 0; the mask keeps them out of every reduction
    cen, hw = concept_boxes(tape, store, rel, np.where(mask, ds.kg.tag_index(tag), 0))
    empty = ~mask.any(axis=-1)
    if empty.any():
        v = tape.expand(tape.gather("items", items), -2)
        cen = tape.stack_members(v, cen)
        hw = tape.stack_members(tape.const(np.zeros_like(v.value)), hw)
        mask = np.concatenate([empty[..., None], mask & ~empty[..., None]], axis=-1)
    return cen, hw, mask


def intersect(tape, store, cen, hw, mask, variant):
    if variant == "attention":
        return attention_box(tape, store, cen, hw, mask)
    if variant == "maxmin":
        return maxmin_box(tape, store, cen, hw, mask)
    raise ContractError(f"unknown intersection variant {variant!r}")


def item_boxes(tape, store, ds, items, user_node, variant="attention", mode="both"):
    """Per-item interest boxes: mean of item-only and user-biased intersections.

    ``mode`` is "both", "item" (item-only box) or "user" (user-biased box only).
    ``user_node`` must broadcast to items.shape + (1, d).
    """
    cen, hw, mask = item_concept_set(tape, store, ds, items)
    if mode == "item":
        return intersect(tape, store, cen, hw, mask, variant)
    ub = user_bias_box(tape, store, cen, hw, mask, user_node)
    if mode == "user":
        return ub
    if mode != "both":
        raise ContractError(f"unknown item-box mode {mode!r}")
    ib = intersect(tape, store, cen, hw, mask, variant)
    return (tape.scale(tape.add(ib[0], ub[0]), 0.5), tape.scale(tape.add(ib[1], ub[1]), 0.5))


def user_boxes(tape, store, ds, users, hist, hist_mask, variant="attention", mode="both"):
    """Mean of item boxes over each user's (masked) history.

    ``hist`` is (B, H) item ids, ``hist_mask`` (B, H).
    """
    u = tape.gather("users", users)                       # (B, d)
    u = tape.expand(tape.expand(u, 1), 1)                 # (B, 1, 1, d)
    cen, hw = item_boxes(tape, store, ds, hist, u, variant, mode)   # (B, H, d)
    return tape.masked_mean(cen, hist_mask, axis=1), tape.masked_mean(hw, hist_mask, axis=1)


# ---------------------------------------------------------------------------
# single-instance API
# ---------------------------------------------------------------------------

def _member_nodes(tape, boxes, dtype):
    boxes = list(boxes)
    if not boxes:
        raise ContractError("intersection needs at least one box")
    cen = np.stack([b.center for b in boxes]).astype(dtype)
    hw = np.stack([b.half_width for b in boxes]).astype(dtype)
    return tape.const(cen), tape.const(hw), np.ones(len(boxes), dtype=bool)


def attention_intersect(boxes, store: ParamStore) -> Box:
    tape = Tape(store.tables, record=False)
    cen, hw, mask = _member_nodes(tape, boxes, store.tables["items"].dtype)
    c, h = attention_box(tape, store, cen, hw, mask)
    return Box(c.value, h.value)


def attention_weights(boxes, store: ParamStore) -> np.ndarray:
    """Per-dimension softmax weights of the attention intersection, (n, d)."""
    tape = Tape(store.tables, record=False)
    cen, _, mask = _member_nodes(tape, boxes, store.tables["items"].dtype)
    z = mlp(tape, "attn.center", cen, _n_layers(store))
    return tape.masked_softmax(z, mask, axis=-2).value


def user_bias_intersect(boxes, user_vec, store: ParamStore) -> Box:
    tape = Tape(store.tables, record=False)
    cen, hw, mask = _member_nodes(tape, boxes, store.tables["items"].dtype)
    u = tape.const(np.asarray(user_vec, dtype=cen.value.dtype)[None, :])
    c, h = user_bias_box(tape, store, cen, hw, mask, u)
    return Box(c.value, h.value)


def user_bias_weights(boxes, user_vec, store: ParamStore):
    tape = Tape(store.tables, record=False)
    cen, hw, mask = _member_nodes(tape, boxes, store.tables["items"].dtype)
    u = tape.const(np.asarray(user_vec, dtype=cen.value.dtype)[None, :])
    L = _n_layers(store)
    c = tape.masked_softmax(mlp(tape, "user.center", tape.concat(cen, u), L), mask, axis=-2)
    o = tape.masked_softmax(mlp(tape, "user.off", tape.concat(hw, u), L), mask, axis=-2)
    return c.value, o.value


def item_interest_box(item, user, store: ParamStore, ds, variant="attention", mode="both") -> Box:
    if not 0 <= item < store.n_items or not 0 <= user < store.n_users:
        raise RangeError(f"item {item} / user {user} out of range")
    tape = Tape(store.tables, record=False)
    u = tape.expand(tape.gather("users", np.array([user])), 1)
    c, h = item_boxes(tape, store, ds, np.array([item]), u, variant, mode)
    return Box(c.value[0], h.value[0])


def user_interest_box(user, store: ParamStore, ds, variant="attention", mode="both",
                      history_limit=64, history=None) -> Box:
    hist = ds.graph.history(user, history_limit) if history is None else np.asarray(history)
    if len(hist) == 0:
        raise ContractError(f"user {user} has an empty interaction history")
    tape = Tape(store.tables, record=False)
    c, h = user_boxes(tape, store, ds, np.array([user]), np.asarray(hist)[None, :],
                      np.ones((1, len(hist)), dtype=bool), variant, mode)
    return Box(c.value[0], h.value[0])


# ---------------------------------------------------------------------------
# checkpoints
#
#   MAGIC | u32 header length | JSON header | float32 LE tables ... | sha256
# ---------------------------------------------------------------------------

def _header(store: ParamStore, extra: dict | None):
    names = store.order()
    extra_names = sorted(extra) if extra else []
    return {
        "dim": store.dim, "gamma": store.gamma, "seed": store.seed, "stage": store.stage,
        "n_items": store.n_items, "n_tags": store.n_tags,
        "n_relations": store.n_relations, "n_users": store.n_users,
        "net": asdict(store.net),
        "tables": [[n, list(store.tables[n].shape)] for n in names],
        "extra": [[n, list(extra[n].shape)] for n in extra_names],
    }


def checkpoint_bytes(store: ParamStore, extra: dict | None = None) -> bytes:
    head = json.dumps(_header(store, extra), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    for n, _ in _header(store, extra)["tables"]:
        parts.append(np.ascontiguousarray(store.tables[n], dtype="<f4").tobytes())
    for n in sorted(extra or {}):
        parts.append(np.ascontiguousarray(extra[n], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def checkpoint_save(store: ParamStore, path, extra: dict | None = None):
    """Write atomically; ``extra`` holds optional named arrays (optimizer moments)."""
    data = checkpoint_bytes(store, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def checkpoint_parse(data: bytes):
    if len(data) < len(MAGIC) + 4 + 32 or data[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("bad magic or truncated file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checksum mismatch")
    (hlen,) = struct.unpack("<I", body[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        head = json.loads(body[start:start + hlen].decode())
        net = NetConfig(**head["net"])
        specs = [(n, tuple(s)) for n, s in head["tables"]]
        extra_specs = [(n, tuple(s)) for n, s in head["extra"]]
        store = ParamStore(head["dim"], head["gamma"], head["n_items"], head["n_tags"],
                           head["n_relations"], head["n_users"], net,
                           seed=head["seed"], stage=head["stage"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"bad header: {exc}") from None
    if [n for n, _ in specs] != store.order():
        raise CorruptCheckpointError("table list does not match the declared network layout")
    pos = start + hlen
    need = pos + 4 * sum(int(np.prod(s)) for _, s in specs + extra_specs)
    if need != len(body):
        raise CorruptCheckpointError(f"payload length {len(body) - pos} disagrees with header")
    out = {}
    for n, s in specs + extra_specs:
        k = int(np.prod(s))
        out[n] = np.frombuffer(body, dtype="<f4", count=k, offset=pos).reshape(s).astype(np.float32)
        pos += 4 * k
    store.tables = {n: out[n] for n, _ in specs}
    exp = {"items": (store.n_items, store.dim), "tags": (store.n_tags, 2 * store.dim),
           "relations": (store.n_relations, 2 * store.dim), "users": (store.n_users, store.dim)}
    for n, s in exp.items():
        if store.tables[n].shape != s:
            raise CorruptCheckpointError(f"table {n} has shape {store.tables[n].shape}, expected {s}")
    return store, {n: out[n] for n, _ in extra_specs}


def checkpoint_load(path, with_extra=False):
    with open(path, "rb") as fh:
        store, extra = checkpoint_parse(fh.read())
    return (store, extra) if with_extra else store

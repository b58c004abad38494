"""Losses, batch construction, Adam, and the three-stage schedule.

Stages:

1. ``pretrain``       KG triplets; IRI -> point/point, TRT -> box/box,
                      IRT -> point/box distances.
2. ``intersection``   every item vs. the intersection of its concept boxes.
3. ``recommendation`` held-out training item vs. the user's interest box,
                      with recall@K early stopping on a validation split.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import (
    Dataset,
    InteractionGraph,
    InteractionIndex,
    KGIndex,
    draw_rejecting,
    sample_weight,
    triplet_type_sampler,
)
from .errors import ContractError, DivergedStepError
from .evaluation import evaluate_split
from .model import NetConfig, ParamStore, checkpoint_save, concept_boxes, init_params, \
    intersect, item_concept_set, user_boxes
from .tape import Tape

log = logging.getLogger(__name__)

STAGES = ("pretrain", "intersection", "recommendation")


@dataclass
class TrainConfig:
    dim: int = 512
    gamma: float = 12.0
    batch_size: int = 256
    n_negatives: int = 256
    base_lr: float = 1e-4
    lr_milestones: tuple = (0.5, 0.75)
    lr_factors: tuple = (0.2, 0.04)
    epochs: tuple = (100, 100, 30)
    alpha: float = 4.0
    seed: int = 0
    init_scale: float | None = None
    # ablations
    no_pretrain: bool = False
    only_irt: bool = False
    no_intersection: bool = False
    maxmin: bool = False
    no_user_bias: bool = False
    only_user_bias: bool = False
    literal_loss: bool = False
    freeze_attn_in_stage3: bool = False
    # plumbing
    history_limit: int = 64
    max_concepts: int | None = 32
    val_fraction: float = 0.05
    patience: int = 2
    eval_k: int = 20
    clip_norm: float = 100.0
    inside_weight: float = 1.0
    tag_corrupt_prob: float = 0.5
    hidden_layers: int = 1
    hidden_width: int | None = None

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        self.lr_factors = tuple(self.lr_factors)
        self.epochs = tuple(int(e) for e in self.epochs)
        if self.batch_size < 1 or self.n_negatives < 1:
            raise ContractError("batch_size and n_negatives must be >= 1")
        if not all(0 < m < 1 for m in self.lr_milestones):
            raise ContractError("lr milestones must lie in (0, 1)")
        if len(self.lr_factors) != len(self.lr_milestones):
            raise ContractError("one lr factor per milestone")
        if len(self.epochs) != 3:
            raise ContractError("epochs needs one entry per stage")
        if self.no_user_bias and self.only_user_bias:
            raise ContractError("no_user_bias and only_user_bias are exclusive")

    @property
    def variant(self):
        return "maxmin" if self.maxmin else "attention"

    @property
    def box_mode(self):
        if self.no_user_bias:
            return "item"
        return "user" if self.only_user_bias else "both"

    def stages(self):
        out = []
        if not self.no_pretrain:
            out.append("pretrain")
        if not self.no_intersection:
            out.append("intersection")
        out.append("recommendation")
        return out

    def net(self):
        return NetConfig(hidden_layers=self.hidden_layers, hidden_width=self.hidden_width)

    def to_dict(self):
        d = asdict(self)
        for k in ("lr_milestones", "lr_factors", "epochs"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ContractError(f"unknown config keys: {sorted(bad)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def margin_loss(d_pos, d_negs, w, gamma, literal_form=False) -> float:
    """Weighted negative-sampling loss for one positive and its negatives.

    Bounded form: ``-w (log s(g - d+) + mean log s(d- - g))``.
    ``literal_form`` uses ``-w (log s(g - d+) - mean log s(g - d-))``, which
    is unbounded below as negatives move away.
    """
    d_negs = np.asarray(d_negs, dtype=float)
    if d_negs.size == 0:
        raise ContractError("margin_loss needs at least one negative")
    if w <= 0:
        raise ContractError("sample weight must be positive")
    pos = _log_sigmoid(gamma - d_pos)
    if literal_form:
        return float(-w * (pos - _log_sigmoid(gamma - d_negs).mean()))
    return float(-w * (pos + _log_sigmoid(d_negs - gamma).mean()))


def _tape_margin_loss(tape, d_pos, d_neg, w, gamma, literal):
    """Batch mean of margin_loss; d_pos (B,), d_neg (B, n), w (B,)."""
    g = tape.const(np.asarray(gamma, dtype=d_pos.value.dtype))
    pos = tape.log_sigmoid(tape.sub(g, d_pos))
    if literal:
        neg = tape.scale(tape.log_sigmoid(tape.sub(g, d_neg)), -1.0)
    else:
        neg = tape.log_sigmoid(tape.sub(d_neg, g))
    n = d_neg.shape[-1]
    per = tape.add(pos, tape.scale(tape.sum(neg, axis=-1), 1.0 / n))
    per = tape.mul(per, tape.const(-np.asarray(w, dtype=d_pos.value.dtype)))
    return tape.scale(tape.sum(per, axis=0), 1.0 / per.shape[0])


# ---------------------------------------------------------------------------
# differentiable distances
# ---------------------------------------------------------------------------

def _l1(tape, a, b):
    return tape.sum(tape.abs(tape.sub(a, b)), axis=-1)


def tape_dist_pb(tape, p, cen, hw, inside_weight=1.0):
    hi, lo = tape.add(cen, hw), tape.sub(cen, hw)
    out = tape.sum(tape.add(tape.relu(tape.sub(p, hi)), tape.relu(tape.sub(lo, p))), axis=-1)
    inn = _l1(tape, cen, tape.clip(p, lo, hi))
    if inside_weight != 1.0:
        inn = tape.scale(inn, inside_weight)
    return tape.add(out, inn)


def tape_dist_bb(tape, c1, h1, c2, h2):
    return tape.add(_l1(tape, c1, c2), _l1(tape, h1, h2))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

class BatchSampler:
    """Draws per-stage training batches from a dataset."""

    def __init__(self, ds: Dataset, fit_graph: InteractionGraph, cfg: TrainConfig):
        self.ds = ds
        self.cfg = cfg
        self.kg = KGIndex(ds)
        self.fit = fit_graph
        self.inter = InteractionIndex(ds.n_items, fit_graph.train)
        self.items_with_concepts = np.nonzero(ds.concepts.n_concepts > 0)[0]
        # stage-3 atoms and padded histories
        H = cfg.history_limit
        users = [u for u in range(fit_graph.n_users) if len(fit_graph.train[u])]
        self.pairs = np.array([(u, i) for u in users for i in fit_graph.train[u]],
                              dtype=np.int64).reshape(-1, 2)
        self.hist = np.zeros((fit_graph.n_users, H), dtype=np.int64)
        self.hist_len = np.zeros(fit_graph.n_users, dtype=np.int64)
        self.m = np.array([len(x) for x in fit_graph.train], dtype=np.int64)
        for u in users:
            h = fit_graph.history(u, H)
            self.hist[u, :len(h)] = h
            self.hist_len[u] = len(h)

    def atoms(self, stage):
        if stage == "pretrain":
            return sum(self.ds.kg.counts().values())
        if stage == "intersection":
            return len(self.items_with_concepts)
        return len(self.pairs)

    def pretrain(self, rng, kind=None, corrupt=None):
        """One stage-1 batch; ``kind`` / ``corrupt`` ("head" or "tag") may be forced."""
        cfg, kg = self.cfg, self.ds.kg
        kind = kind or triplet_type_sampler(kg, rng, cfg.only_irt)
        trip = kg.of_type(kind)
        sel = rng.integers(0, len(trip), cfg.batch_size)
        b = trip[sel]
        h, r, t = b[:, 0], b[:, 1], b[:, 2]
        n = cfg.n_negatives
        if corrupt is None:
            tag_side = kind == "irt" and kg.n_tags > 1 and rng.random() < cfg.tag_corrupt_prob
            corrupt = "tag" if tag_side else "head"
        if corrupt == "tag":
            neg = draw_rejecting(kg.n_tags, lambda ids, w: self.kg.irt_is_positive(
                h[w // n], r[w // n], ids), (len(b), n), rng, offset=kg.n_items)
        else:
            lo, size = (kg.n_items, kg.n_tags) if kind == "trt" else (0, kg.n_items)
            neg = draw_rejecting(size, lambda ids, w: self.kg.head_is_positive(
                kind, r[w // n], t[w // n], ids), (len(b), n), rng, offset=lo)
        w = sample_weight(1, self.kg.answers[kind][sel])
        return {"stage": "pretrain", "kind": kind, "trip": b, "neg": neg, "corrupt": corrupt,
                "w": np.atleast_1d(w)}

    def intersection(self, rng, items):
        items = np.asarray(items)
        rel, tag, mask = self.ds.concepts.padded(items)
        n = self.cfg.n_negatives
        neg = draw_rejecting(self.ds.n_items, lambda ids, w: self.kg.covers_all(
            ids, rel[w // n], tag[w // n], mask[w // n]), (len(items), n), rng)
        w = sample_weight(2, self.ds.concepts.n_concepts[items])
        return {"stage": "intersection", "items": items, "neg": neg, "w": np.atleast_1d(w)}

    def recommendation(self, rng, pair_idx):
        users, pos = self.pairs[pair_idx, 0], self.pairs[pair_idx, 1]
        H = self.hist.shape[1]
        hist = self.hist[users]
        mask = np.arange(H)[None, :] < self.hist_len[users][:, None]
        # leave the positive out of its own interest box unless it is all we have
        loo = mask & (hist == pos[:, None])
        keep = mask.sum(axis=1) > loo.sum(axis=1)
        mask = np.where(keep[:, None], mask & ~loo, mask)
        n = self.cfg.n_negatives
        neg = draw_rejecting(self.ds.n_items, lambda ids, w: self.inter.is_positive(
            users[w // n], ids), (len(users), n), rng)
        w = sample_weight(3, self.m[users], self.cfg.alpha)
        return {"stage": "recommendation", "users": users, "pos": pos, "hist": hist,
                "hist_mask": mask, "neg": neg, "w": np.atleast_1d(w)}


# ---------------------------------------------------------------------------
# gradient step
# ---------------------------------------------------------------------------

def _distances(tape, batch, store: ParamStore, ds: Dataset, cfg: TrainConfig):
    stage = batch["stage"]
    iw = cfg.inside_weight
    d = store.dim
    c0, c1 = slice(0, d), slice(d, 2 * d)
    if stage == "pretrain":
        b, neg, kind = batch["trip"], batch["neg"], batch["kind"]
        h, r, t = b[:, 0], b[:, 1], b[:, 2]
        if kind == "iri":
            pred = tape.add(tape.gather("items", t), tape.gather("relations", r, c0))
            d_pos = _l1(tape, tape.gather("items", h), pred)
            d_neg = _l1(tape, tape.gather("items", neg), tape.expand(pred, 1))
            return d_pos, d_neg
        if kind == "trt":
            tr = ds.kg.tag_index(t)
            cen, off = concept_boxes(tape, store, r, tr)
            hrow = ds.kg.tag_index(h)
            hc = tape.gather("tags", hrow, c0)
            ho = tape.relu(tape.gather("tags", hrow, c1))
            d_pos = tape_dist_bb(tape, hc, ho, cen, off)
            nrow = ds.kg.tag_index(neg)
            nc = tape.gather("tags", nrow, c0)
            no = tape.relu(tape.gather("tags", nrow, c1))
            d_neg = tape_dist_bb(tape, nc, no, tape.expand(cen, 1), tape.expand(off, 1))
            return d_pos, d_neg
        # irt
        v = tape.gather("items", h)
        cen, hw = concept_boxes(tape, store, r, ds.kg.tag_index(t))
        d_pos = tape_dist_pb(tape, v, cen, hw, iw)
        if batch["corrupt"] == "tag":
            rr = np.broadcast_to(r[:, None], neg.shape)
            nc, nh = concept_boxes(tape, store, rr, ds.kg.tag_index(neg))
            d_neg = tape_dist_pb(tape, tape.expand(v, 1), nc, nh, iw)
        else:
            d_neg = tape_dist_pb(tape, tape.gather("items", neg), tape.expand(cen, 1),
                                 tape.expand(hw, 1), iw)
        return d_pos, d_neg

    if stage == "intersection":
        items = batch["items"]
        cen, hw, mask = item_concept_set(tape, store, ds, items)
        bc, bh = intersect(tape, store, cen, hw, mask, cfg.variant)
        d_pos = tape_dist_pb(tape, tape.gather("items", items), bc, bh, iw)
        d_neg = tape_dist_pb(tape, tape.gather("items", batch["neg"]), tape.expand(bc, 1),
                             tape.expand(bh, 1), iw)
        return d_pos, d_neg

    if stage == "recommendation":
        uc, uh = user_boxes(tape, store, ds, batch["users"], batch["hist"], batch["hist_mask"],
                            cfg.variant, cfg.box_mode)
        d_pos = tape_dist_pb(tape, tape.gather("items", batch["pos"]), uc, uh, iw)
        d_neg = tape_dist_pb(tape, tape.gather("items", batch["neg"]), tape.expand(uc, 1),
                             tape.expand(uh, 1), iw)
        return d_pos, d_neg
    raise ContractError(f"unknown stage {stage!r}")


def grad_step(batch, store: ParamStore, ds: Dataset, cfg: TrainConfig, track_kinks=False):
    """Loss and exact reverse-mode gradients for one batch.

    Returns ``(loss, grads, kink_margin)``; ``grads`` maps table names to
    arrays shaped like the store tables (tables off the loss path are absent,
    i.e. zero).
    """
    tape = Tape(store.tables, track_kinks=track_kinks)
    d_pos, d_neg = _distances(tape, batch, store, ds, cfg)
    loss = _tape_margin_loss(tape, d_pos, d_neg, batch["w"], cfg.gamma, cfg.literal_loss)
    value = float(loss.value)
    if not math.isfinite(value):
        raise DivergedStepError(f"non-finite loss in stage {batch['stage']}")
    tape.backward(loss)
    if batch["stage"] == "recommendation" and cfg.freeze_attn_in_stage3:
        for k in [k for k in tape.grads if k.startswith("attn.")]:
            del tape.grads[k]
    return value, tape.grads, tape.kink_margin


def batch_loss(batch, store, ds, cfg) -> float:
    tape = Tape(store.tables, record=False)
    d_pos, d_neg = _distances(tape, batch, store, ds, cfg)
    return float(_tape_margin_loss(tape, d_pos, d_neg, batch["w"], cfg.gamma,
                                   cfg.literal_loss).value)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def lr_schedule(step, total_steps, base_lr=1e-4, milestones=(0.5, 0.75), factors=(0.2, 0.04)):
    """Piecewise-constant decay: ``base_lr * factor`` once ``step`` passes a milestone."""
    lr = base_lr
    for m, f in zip(milestones, factors):
        if step >= m * total_steps:
            lr = base_lr * f
    return lr


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
            if not math.isfinite(norm):
                raise DivergedStepError("non-finite gradient norm")
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        for k, p in params.items():
            if k not in self.m:
                if k not in grads:
                    continue
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            g = grads.get(k)
            m *= self.beta1
            v *= self.beta2
            if g is not None:
                m += (1 - self.beta1) * g
                v += (1 - self.beta2) * (g * g)
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> dict:
        out = {"adam.t": np.array([self.t], dtype=np.float32)}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_state(cls, state: dict, **kw):
        opt = cls(**kw)
        opt.t = int(state.get("adam.t", [0])[0])
        for k, v in state.items():
            if k.startswith("adam.m."):
                name = k[len("adam.m."):]
                opt.m[name] = v.copy()
                opt.v[name] = state[f"adam.v.{name}"].copy()
        return opt


def optimizer_update(store: ParamStore, grads: dict, step, total_steps, cfg: TrainConfig,
                     opt: Adam):
    lr = lr_schedule(step, total_steps, cfg.base_lr, cfg.lr_milestones, cfg.lr_factors)
    opt.step(store.tables, grads, lr)
    return lr


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def validation_split(graph: InteractionGraph, fraction, rng):
    """Hold out ~``fraction`` of each user's training items (at least one item stays)."""
    fit, val, order = [], [], []
    for u in range(graph.n_users):
        items = graph.train[u]
        k = int(math.floor(fraction * len(items) + 0.5)) if fraction > 0 else 0
        k = min(k, max(len(items) - 1, 0))
        held = np.sort(rng.choice(items, size=k, replace=False)) if k else items[:0]
        keep = np.setdiff1d(items, held)
        fit.append(keep)
        val.append(held)
        src = graph.train_order[u] if graph.train_order else items
        order.append(src[np.isin(src, keep)])
    return InteractionGraph(graph.n_users, graph.n_items, fit, val, order)


@dataclass
class StageLog:
    stage: str
    variant: str
    epochs_run: int = 0
    losses: list = field(default_factory=list)
    recalls: list = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0


class EarlyStopper:
    """Stop once the metric fails to improve for ``patience`` consecutive epochs."""

    def __init__(self, patience=2):
        self.patience = patience
        self.best = -np.inf
        self.bad = 0
        self.best_epoch = 0

    def update(self, value, epoch) -> bool:
        if value > self.best:
            self.best, self.bad, self.best_epoch = value, 0, epoch
            return False
        self.bad += 1
        return self.bad >= self.patience


class TrainLog:
    """Append-only ``stage epoch step loss lr recall20`` records."""

    def __init__(self, path=None):
        self.path = path
        self.records = []

    def comment(self, text):
        self._write(f"# {text}")

    def record(self, stage, epoch, step, loss, lr, recall):
        r = "nan" if recall is None else f"{recall:.6f}"
        line = f"{stage} {epoch} {step} {loss:.6f} {lr:.3e} {r}"
        self.records.append(line)
        self._write(line)

    def _write(self, line):
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def _fresh_ds(ds: Dataset, graph: InteractionGraph) -> Dataset:
    return Dataset(graph, ds.kg, ds.concepts)


def run_stage(stage, store, ds, sampler, cfg, rng, tlog, fit_ds=None, progress=None):
    n_epochs = cfg.epochs[STAGES.index(stage)]
    atoms = sampler.atoms(stage)
    slog = StageLog(stage, cfg.variant)
    tlog.comment(f"stage {stage} variant {cfg.variant} mode {cfg.box_mode}")
    if atoms == 0 or n_epochs == 0:
        tlog.comment(f"stage {stage} skipped: no training atoms")
        return slog, None
    steps = math.ceil(atoms / cfg.batch_size)
    total = steps * n_epochs
    opt = Adam(clip_norm=cfg.clip_norm)
    stopper = EarlyStopper(cfg.patience)
    best = None
    step = 0
    for epoch in range(1, n_epochs + 1):
        perm = rng.permutation(atoms) if stage != "pretrain" else None
        losses, failed = [], 0
        lr = cfg.base_lr
        for s in range(steps):
            if stage == "pretrain":
                batch = sampler.pretrain(rng)
            else:
                sel = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                batch = sampler.intersection(rng, sampler.items_with_concepts[sel]) \
                    if stage == "intersection" else sampler.recommendation(rng, sel)
            try:
                loss, grads, _ = grad_step(batch, store, ds, cfg)
                lr = optimizer_update(store, grads, step, total, cfg, opt)
                losses.append(loss)
            except DivergedStepError as exc:
                failed += 1
                log.warning("step %d of %s skipped: %s", step, stage, exc)
            step += 1
        if failed == steps:
            raise DivergedStepError(f"stage {stage} diverged for a full epoch ({epoch})")
        mean_loss = float(np.mean(losses))
        slog.losses.append(mean_loss)
        slog.epochs_run = epoch
        recall = None
        if stage == "recommendation" and fit_ds is not None:
            g = fit_ds.graph
            if any(len(x) for x in g.test):
                rep = evaluate_split(store, ds, g.train, g.test, cfg.eval_k, cfg.variant,
                                     cfg.box_mode, cfg.history_limit, cfg.inside_weight,
                                     order_lists=g.train_order)
                recall = rep.recall
                slog.recalls.append(recall)
        tlog.record(stage, epoch, step, mean_loss, lr, recall)
        if progress:
            progress(stage, epoch, mean_loss, recall)
        if recall is not None:
            improved = recall > stopper.best
            stop = stopper.update(recall, epoch)
            if improved:
                best = {k: v.copy() for k, v in store.tables.items()}
            if stop:
                slog.stopped_early = True
                break
    if best is not None:
        store.tables = best
        slog.best_epoch = stopper.best_epoch
    store.stage = stage
    return slog, opt


def run_pipeline(ds: Dataset, cfg: TrainConfig, out_dir=None, store=None, progress=None):
    """Train all enabled stages in order; returns ``(store, [StageLog])``.

    With ``out_dir`` a training log and one checkpoint per stage are written.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    rng_init, rng_split, *stage_rngs = [np.random.default_rng(s) for s in seeds]
    if store is None:
        store = init_params(cfg.dim, ds.n_items, max(ds.kg.n_tags, 1),
                            max(ds.kg.n_relations_aug, 1), ds.n_users, rng_init,
                            gamma=cfg.gamma, scale=cfg.init_scale, net=cfg.net(), seed=cfg.seed)
    fit_graph = validation_split(ds.graph, cfg.val_fraction, rng_split)
    fit_ds = _fresh_ds(ds, fit_graph)
    sampler = BatchSampler(ds, fit_graph, cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    tlog = TrainLog(os.path.join(out_dir, "train.log") if out_dir else None)
    if out_dir and os.path.exists(tlog.path):
        os.remove(tlog.path)
    logs = []
    for stage in cfg.stages():
        rng = stage_rngs[STAGES.index(stage)]
        slog, opt = run_stage(stage, store, ds, sampler, cfg, rng, tlog, fit_ds, progress)
        logs.append(slog)
        if out_dir:
            extra = opt.state() if opt is not None else None
            checkpoint_save(store, os.path.join(out_dir, f"{stage}.ckpt"), extra)
    return store, logs

# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

"""Tuple mining, LazyTriplet loss, AdamW and the training loop.

Only the head parameters (`h` and `W`) are trained; local features are fixed
inputs, so the parameter-free pooling and log stages are computed once per
scan and reused across epochs.

"""

import csv
import logging
from dataclasses import dataclass, fields
from collections import namedtuple
from typing import Optional

import numpy as np

from .common import (ArgumentException, ConfigurationError, NumericException,
                     ValidationException, make_rng, parallel_map)
from .head import (H_MIN, DEFAULT_EPS, encode_features, forward_from_encoding,
                   head_backward)
from .formats import (OptimizerRecord, write_optimizer_file,
                      read_optimizer_file)

__all__ = ["TrainConfig", "TrainingTuple", "OptimizerState", "EpochStats",
           "TrainingLog", "TupleMiner", "mine_tuples", "lazy_triplet_loss",
           "adamw_step", "train", "train_sequences", "write_training_log",
           "optimizer_path", "save_optimizer_state", "load_optimizer_state",
           "ADAM_BETAS", "ADAM_EPS"]

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    r_pos: float = 2.0
    anchor_spacing: float = 0.5
    neg_radius: float = 10.0
    m_neg: int = 20
    margin: float = 0.5
    lr: float = 1e-4
    weight_decay: float = 5e-4
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ('seed', 'epochs', 'weight_decay', 'lr'):
                if value < 0:
                    raise ConfigurationError(
                        "train.{} must be non-negative, got {}".format(f.name,
                                                                     value))
            elif not value > 0:
                raise ConfigurationError(
                    "train.{} must be positive, got {}".format(f.name, value))
        if self.m_neg < 1:
            raise ConfigurationError("train.m_neg must be >= 1")


@dataclass(frozen=True)
class TrainingTuple:
    anchor_id: int
    positive_id: int
    negative_ids: tuple


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """AdamW moment estimates for `W` and `h`."""
    step: int = 0
    m_W: Optional[np.ndarray] = None
    v_W: Optional[np.ndarray] = None
    m_h: float = 0.0
    v_h: float = 0.0
    epoch: int = 0

    @classmethod
    def for_params(cls, p):
        if p.W is None:
            return cls()
        return cls(0, np.zeros_like(p.W), np.zeros_like(p.W))


EpochStats = namedtuple("EpochStats", "epoch, mean_loss, active_fraction, h_value")


@dataclass
class TrainingLog:
    rows: list
    optimizer: OptimizerState

####################
# Mining

class TupleMiner:
    """Selects training tuples from one sequence's scan records.

    A positive must lie within `r_pos` of the anchor, come from another pass,
    and share the anchor's segment; the nearest such scan is taken, ties going
    to the lower scan id. Negatives are drawn from scans of other segments
    farther than `neg_radius` from the anchor.

    """
    def __init__(self, records, cfg):
        if not records:
            raise ArgumentException("no scan records to mine")
        order = sorted(range(len(records)), key=lambda i: records[i].scan_id)
        self.records = [records[i] for i in order]
        self.cfg = cfg
        self.ids = np.array([r.scan_id for r in self.records], dtype=np.int64)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValidationException("duplicate scan ids in records")
        self.positions = np.array([r.position for r in self.records],
                                  dtype=np.float64)
        self.segments = np.array([r.segment_id for r in self.records])
        self.passes = np.array([r.pass_id for r in self.records])
        self._row_of = {int(sid): i for i, sid in enumerate(self.ids)}
        self._log = log.getChild(self.__class__.__name__)
        self.skipped_small_pool = 0

    def _distances_from(self, row):
        return np.linalg.norm(self.positions - self.positions[row], axis=1)

    def positive_for(self, row, dist=None):
        if dist is None:
            dist = self._distances_from(row)
        mask = ((dist <= self.cfg.r_pos) &
                (self.passes != self.passes[row]) &
                (self.segments == self.segments[row]))
        mask[row] = False
        candidates = np.flatnonzero(mask)
        if len(candidates) == 0:
            return None
        best = candidates[np.lexsort((self.ids[candidates], dist[candidates]))[0]]
        return int(best)

    def negative_pool(self, row, dist=None):
        if dist is None:
            dist = self._distances_from(row)
        return np.flatnonzero((self.segments != self.segments[row]) &
                              (dist > self.cfg.neg_radius))

    def _sample_negatives(self, row, rng, dist=None):
        pool = self.negative_pool(row, dist)
        if len(pool) < self.cfg.m_neg:
            return None
        chosen = rng.choice(pool, size=self.cfg.m_neg, replace=False)
        return tuple(int(i) for i in self.ids[chosen])

    def mine(self, rng):
        tuples = []
        last_anchor = None
        no_positive = small_pool = 0
        for row in range(len(self.ids)):
            dist = self._distances_from(row)
            positive = self.positive_for(row, dist)
            if positive is None:
                no_positive += 1
                continue
            if (last_anchor is not None and
                    dist[last_anchor] < self.cfg.anchor_spacing):
                continue
            negatives = self._sample_negatives(row, rng, dist)
            if negatives is None:
                small_pool += 1
                continue
            last_anchor = row
            tuples.append(TrainingTuple(int(self.ids[row]),
                                        int(self.ids[positive]), negatives))
        self.skipped_small_pool = small_pool
        if small_pool:
            self._log.warning("%d anchors skipped: fewer than %d negatives "
                              "available.", small_pool, self.cfg.m_neg)
        self._log.info("Mined %d tuples from %d scans (%d without positive).",
                       len(tuples), len(self.ids), no_positive)
        return tuples

    def resample_negatives(self, tuples, rng):
        """Redraws the negatives of every tuple, keeping anchor and positive."""
        out = []
        for t in tuples:
            negatives = self._sample_negatives(self._row_of[t.anchor_id], rng)
            out.append(t if negatives is None else
                       TrainingTuple(t.anchor_id, t.positive_id, negatives))
        return out

def mine_tuples(records, cfg, rng=None):
    """Mines training tuples; see `TupleMiner`."""
    if rng is None:
        rng = make_rng(cfg.seed, 'mining')
    return TupleMiner(records, cfg).mine(rng)

####################
# Loss and optimizer

def lazy_triplet_loss(D_a, D_p, D_negs, margin):
    """Hinge on the hardest negative: ``max(d_AP - d_AN + margin, 0)``.

    Returns ``(loss, dD_a, dD_p, dD_negs)``. Only the closest negative (the
    lowest index among ties) receives a gradient; all gradients are zero
    unless the loss is strictly positive.

    """
    D_a = np.asarray(D_a, dtype=np.float64)
    D_p = np.asarray(D_p, dtype=np.float64)
    D_negs = np.atleast_2d(np.asarray(D_negs, dtype=np.float64))
    if len(D_negs) < 1:
        raise ArgumentException("at least one negative is required")
    diff_ap = D_a - D_p
    d_ap = float(np.linalg.norm(diff_ap))
    diff_an = D_a - D_negs
    d_an_all = np.linalg.norm(diff_an, axis=1)
    hardest = int(np.argmin(d_an_all))
    d_an = float(d_an_all[hardest])
    loss = max(d_ap - d_an + margin, 0.0)

    dD_a = np.zeros_like(D_a)
    dD_p = np.zeros_like(D_p)
    dD_negs = np.zeros_like(D_negs)
    if loss > 0.0:
        u_ap = diff_ap / d_ap if d_ap > 0.0 else np.zeros_like(D_a)
        u_an = diff_an[hardest] / d_an if d_an > 0.0 else np.zeros_like(D_a)
        dD_a = u_ap - u_an
        dD_p = -u_ap
        dD_negs[hardest] = u_an
    return loss, dD_a, dD_p, dD_negs

def _adam_moments(m, v, g, step):
    beta1, beta2 = ADAM_BETAS
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    return m, v, m_hat / (np.sqrt(v_hat) + ADAM_EPS)

def adamw_step(p, grads, st, cfg):
    """One AdamW update of the head parameters.

    `grads` is ``(dW, dh)``. `W` gets decoupled weight decay; `h` does not and
    is clamped to ``[H_MIN, 1]`` afterwards. Returns ``(params, state)``.

    """
    dW, dh = grads
    if not np.isfinite(dh) or (dW is not None and not np.isfinite(dW).all()):
        raise NumericException(
            "non-finite gradient at optimizer step {}".format(st.step + 1))
    step = st.step + 1
    W, m_W, v_W = p.W, st.m_W, st.v_W
    if p.W is not None:
        if dW is None or dW.shape != p.W.shape:
            raise ArgumentException("weight gradient does not match W")
        W = p.W * (1.0 - cfg.lr * cfg.weight_decay)
        m_W, v_W, direction = _adam_moments(st.m_W, st.v_W, dW, step)
        W = W - cfg.lr * direction
    h, m_h, v_h = p.h, st.m_h, st.v_h
    if p.flags.use_pn:
        m_h, v_h, direction = _adam_moments(st.m_h, st.v_h, float(dh), step)
        h = min(max(p.h - cfg.lr * float(direction), H_MIN), 1.0)
    return (p.evolve(h=h, W=W),
            OptimizerState(step, m_W, v_W, float(m_h), float(v_h), st.epoch))

####################
# Training loop

class _SequenceData:
    """Mining state and cached encodings of one training sequence."""

    def __init__(self, records, features, cfg, flags, eps):
        self.miner = TupleMiner(records, cfg)
        missing = [r.scan_id for r in self.miner.records
                   if r.scan_id not in features]
        if missing:
            raise ArgumentException("no features for scan ids {}".format(
                missing[:10]))
        ids = [int(i) for i in self.miner.ids]
        encodings = parallel_map(
            lambda sid: encode_features(features[sid], flags, eps), ids)
        self.encodings = dict(zip(ids, encodings))

def _train_tuple(seq, t, p, cfg):
    ids = (t.anchor_id, t.positive_id) + tuple(t.negative_ids)
    outputs = [forward_from_encoding(seq.encodings[i], p) for i in ids]
    D = [o[0] for o in outputs]
    negs = np.array(D[2:])
    loss, dA, dP, dN = lazy_triplet_loss(D[0], D[1], negs, cfg.margin)
    dW = None if p.W is None else np.zeros_like(p.W)
    dh = 0.0
    if loss > 0.0:
        hardest = int(np.argmin(np.linalg.norm(D[0] - negs, axis=1)))
        for cache, grad in ((outputs[0][1], dA), (outputs[1][1], dP),
                            (outputs[2 + hardest][1], dN[hardest])):
            _, gW, gh = head_backward(cache, p, grad, wrt_features=False)
            if gW is not None:
                dW += gW
            dh += gh
    return loss, dW, dh

def train_sequences(sequences, cfg, params, state=None, eps=DEFAULT_EPS,
                    on_epoch_end=None):
    """Trains `params` on the union of the tuples mined from every sequence.

    `sequences` is a list of ``(records, features)`` pairs, features mapping
    scan id to a feature matrix or `LocalFeatureSet`. Tuples are mined per
    sequence, so scan ids only need to be unique within a sequence.

    Training resumes from `state` when given: its `epoch` counts completed
    epochs. `on_epoch_end(epoch, params, state)` is called after every epoch.

    Returns ``(params, TrainingLog)``.

    """
    if state is None:
        state = OptimizerState.for_params(params)
    rows = []
    if cfg.epochs <= state.epoch:
        return params, TrainingLog(rows, state)
    if params.W is None and not params.flags.use_pn:
        log.info("Head %s has no trainable parameters.", params.flags.label)
        return params, TrainingLog(rows, state)

    data = [_SequenceData(records, features, cfg, params.flags, eps)
            for records, features in sequences]
    base = [d.miner.mine(make_rng(cfg.seed, 'mining', i))
            for i, d in enumerate(data)]
    if sum(len(b) for b in base) == 0:
        raise ArgumentException(
            "no training tuples could be mined: every anchor lacks a positive "
            "from another pass of its segment (single-pass data?) or enough "
            "negatives")

    for epoch in range(state.epoch, cfg.epochs):
        work = []
        for i, (d, tuples) in enumerate(zip(data, base)):
            if epoch > 0:
                tuples = d.miner.resample_negatives(
                    tuples, make_rng(cfg.seed, 'negatives', i, epoch))
            work.extend((d, t) for t in tuples)
        order = make_rng(cfg.seed, 'shuffle', epoch).permutation(len(work))
        losses = []
        for n, idx in enumerate(order):
            seq, t = work[idx]
            loss, dW, dh = _train_tuple(seq, t, params, cfg)
            try:
                params, state = adamw_step(params, (dW, dh), state, cfg)
            except NumericException as e:
                log.error("Aborting epoch %d at tuple %d (anchor %d): %s",
                          epoch + 1, n, t.anchor_id, e)
                raise
            losses.append(loss)
        losses = np.array(losses)
        state = OptimizerState(state.step, state.m_W, state.v_W, state.m_h,
                               state.v_h, epoch + 1)
        stats = EpochStats(epoch + 1, float(losses.mean()),
                           float(np.mean(losses > 0.0)), params.h)
        rows.append(stats)
        log.info("epoch %d/%d: mean loss %.5f, active %.3f, h %.4f",
                 stats.epoch, cfg.epochs, stats.mean_loss,
                 stats.active_fraction, stats.h_value)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, params, state)
    return params, TrainingLog(rows, state)

def train(records, features, cfg, params, state=None, eps=DEFAULT_EPS,
          on_epoch_end=None):
    """Trains on a single sequence; see `train_sequences`."""
    return train_sequences([(records, features)], cfg, params, state, eps,
                           on_epoch_end)

####################
# Persistence

def write_training_log(rows, path):
    with open(path, 'w', newline='') as fd:
        writer = csv.writer(fd, lineterminator='\n')
        writer.writerow(EpochStats._fields)
        for row in rows:
            writer.writerow([row.epoch, repr(row.mean_loss),
                             repr(row.active_fraction), repr(row.h_value)])

def optimizer_path(checkpoint_path):
    return str(checkpoint_path) + '.opt'

def save_optimizer_state(st, p, path):
    d = p.W.shape[0] if p.W is not None else p.c * p.c
    write_optimizer_file(path, OptimizerRecord(st.step, st.epoch, p.c, d,
                                               st.m_h, st.v_h, st.m_W, st.v_W))

def load_optimizer_state(path, p):
    record = read_optimizer_file(path, has_weights=p.W is not None)
    if record.c != p.c or (p.W is not None and record.d != p.W.shape[0]):
        raise ValidationException(
            "{}: optimizer state (c={}, d={}) does not match the checkpoint"
            .format(path, record.c, record.d))
    return OptimizerState(record.step, record.m_W, record.v_W, record.m_h,
                          record.v_h, record.epoch)

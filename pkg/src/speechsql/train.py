"""Training loop: Adam with linear warmup, gradient accumulation,
on-the-fly feature augmentation, adversarial speaker loss, and a
line-delimited JSON metrics stream.

Fully deterministic for a fixed seed: batch order, dropout masks and
augmentation draws all derive from it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import grammar, metrics
from .autodiff import (AdamState, NumericError, Tape, adam_step,
                       clip_by_global_norm, save_checkpoint)
from .schema import Schema
from .synth import AugmentConfig, augment


class TrainDivergence(RuntimeError):
    """Loss went non-finite; carries the last good checkpoint path."""

    def __init__(self, step, last_checkpoint):
        self.step = step
        self.last_checkpoint = last_checkpoint
        where = last_checkpoint or "<none written>"
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {where}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 10
    grad_accum: int = 1
    peak_lr: float = 7.4e-4
    warmup_steps: int = 150
    clip_norm: float = 5.0
    use_grl: bool = True
    use_augment: bool = True
    permute_schemas: bool = True   # shuffle column/table order per example
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    checkpoint_every: int = 0      # 0: only the final checkpoint
    log_every: int = 1


@dataclass
class TrainReport:
    step: int
    l_mle: float
    l_ce: float
    total: float
    lr: float
    grad_norm: float

    def to_json(self):
        return json.dumps({"step": self.step, "l_mle": round(self.l_mle, 6),
                           "l_ce": round(self.l_ce, 6),
                           "total": round(self.total, 6),
                           "lr": round(self.lr, 8),
                           "grad_norm": round(self.grad_norm, 6)},
                          sort_keys=True)


def _example_stream(entries, cfg):
    """Deterministic shuffled epochs, repeated forever."""
    epoch = 0
    while True:
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(entries))
        for i in order:
            yield entries[int(i)]
        epoch += 1


def permuted_view(schema, rng):
    """Same database, shuffled table and per-table column order. Breaks
    position shortcuts during training so pointing must rely on content."""
    d = schema.to_dict()
    tables = list(d["tables"])
    rng.shuffle(tables)
    for t in tables:
        cols = list(t["columns"])
        rng.shuffle(cols)
        t["columns"] = cols
    return Schema.from_dict({**d, "tables": tables})


def prepare_entry(model, entry, schemas, feats, rng=None, aug_cfg=None,
                  permute=False):
    feat = feats[entry.id]
    if aug_cfg is not None and aug_cfg.enabled:
        feat = augment(feat, aug_cfg, rng)
    schema = schemas[entry.db_id]
    if permute and rng is not None:
        schema = permuted_view(schema, rng)
    gold = grammar.ast_to_actions(grammar.parse_sql(entry.sql, schema))
    return model.prepare(feat, schema, gold_actions=gold,
                         speaker_id=entry.speaker_id)


def train_loop(model, entries, schemas, feats, cfg, out_dir=None,
               metrics_path=None, on_report=None):
    """Returns the list of TrainReports; writes checkpoints and metrics
    when paths are given. Aborts with TrainDivergence on non-finite loss,
    referencing the last checkpoint that was written."""
    train_entries = [e for e in entries if e.split == "train"]
    if not train_entries:
        raise ValueError("no training examples in the manifest")
    stream = _example_stream(train_entries, cfg)
    state = AdamState(model.store, peak_lr=cfg.peak_lr,
                      warmup_steps=cfg.warmup_steps)
    reports = []
    last_ckpt = None
    stream_fh = open(metrics_path, "w") if metrics_path else None
    aug = cfg.augment_cfg if cfg.use_augment else replace(cfg.augment_cfg,
                                                          enabled=False)
    try:
        for step in range(1, cfg.steps + 1):
            grads_sum = None
            mle_v = ce_v = total_v = 0.0
            try:
                for micro in range(cfg.grad_accum):
                    batch = []
                    for i in range(cfg.batch_size):
                        entry = next(stream)
                        rng = np.random.default_rng([cfg.seed, 11, step, micro, i])
                        batch.append(prepare_entry(model, entry, schemas, feats,
                                                   rng=rng, aug_cfg=aug,
                                                   permute=cfg.permute_schemas))
                    tape = Tape()
                    drop_rng = np.random.default_rng([cfg.seed, 13, step, micro])
                    if cfg.use_grl:
                        total, l_mle, l_ce = model.sequence_loss(
                            tape, batch, rng=drop_rng, train=True)
                    else:
                        total, l_mle, l_ce = model.sequence_loss(
                            tape, batch, rng=drop_rng, train=True,
                            with_speaker=False)
                    g = tape.backward(total)
                    scale = 1.0 / cfg.grad_accum
                    if grads_sum is None:
                        grads_sum = {k: v * scale for k, v in g.items()}
                    else:
                        for k in grads_sum:
                            grads_sum[k] += g[k] * scale
                    mle_v += float(l_mle.data) * scale
                    ce_v += float(l_ce.data) * scale
                    total_v += float(total.data) * scale
            except NumericError as exc:
                raise TrainDivergence(step, last_ckpt) from exc
            if not np.isfinite(total_v):
                raise TrainDivergence(step, last_ckpt)

            grads_sum, norm = clip_by_global_norm(grads_sum, cfg.clip_norm)
            lr = adam_step(model.store, grads_sum, state)

            if step % cfg.log_every == 0 or step == cfg.steps:
                rep = TrainReport(step, mle_v, ce_v, total_v, lr, norm)
                reports.append(rep)
                if stream_fh:
                    stream_fh.write(rep.to_json() + "\n")
                if on_report:
                    on_report(rep)
            if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                last_ckpt = os.path.join(out_dir, f"step_{step:06d}.w2sq")
                save_checkpoint(last_ckpt, model.store, adam=state)
    finally:
        if stream_fh:
            stream_fh.close()
    if out_dir:
        last_ckpt = os.path.join(out_dir, "final.w2sq")
        save_checkpoint(last_ckpt, model.store, adam=state)
    return reports


def evaluate(model, entries, schemas, feats, split=None, limit=None):
    """Greedy-decode a split and score it; returns (report dict, details)."""
    rows = [e for e in entries if split is None or e.split == split]
    if limit:
        rows = rows[:limit]
    preds, golds = [], []
    for e in rows:
        schema = schemas[e.db_id]
        golds.append(grammar.parse_sql(e.sql, schema))
        try:
            preds.append(model.infer(feats[e.id], schema))
        except Exception:
            # a busted decode scores as a guaranteed mismatch
            preds.append(grammar.parse_sql("SELECT * FROM " +
                                           schema.tables[0].name, schema))
    rep = metrics.report(preds, golds)
    return rep, list(zip(rows, preds, golds))

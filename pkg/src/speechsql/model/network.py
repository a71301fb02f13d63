"""The end-to-end parser: speech encoder, schema encoder, relation-aware
transformer over the joint memory, adversarial speaker head, and the
grammar-constrained tree decoder.

Joint memory layout per example: question positions (pooled speech
frames), then columns (star first), then tables; the relation matrix is
assembled with exactly that ordering.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .. import grammar
from ..autodiff import DTYPE, ParamStore, Tape
from ..schema import N_RELATIONS, assemble_relation_matrix
from .config import ModelConfig
from .layers import (BiLSTM, LayerNorm, Linear, LSTMCell, MultiHeadAttention,
                     mask_consts, run_lstm, uniform_init, xavier_init)
from . import decoder as dec

NEG = -1e9
_PTR_KINDS = {"question": 0, "column": 1, "table": 2}


def _hash_token(token, buckets):
    return zlib.crc32(token.encode("utf-8")) % buckets


@dataclass
class Prepared:
    """One example, preprocessed for batching."""

    features: np.ndarray          # (T, F)
    schema: object
    question_len: int             # pooled positions
    joint_len: int
    relations: np.ndarray         # (joint, joint)
    gold_actions: list | None = None
    speaker_id: int = 0
    plan: object = None           # teacher-forcing plan when gold is present


class RATBlock:
    def __init__(self, store, rng, name, cfg):
        d = cfg.hidden
        self.cfg = cfg
        self.wq = Linear(store, rng, f"{name}.wq", d, d, bias=False)
        self.wk = Linear(store, rng, f"{name}.wk", d, d, bias=False)
        self.wv = Linear(store, rng, f"{name}.wv", d, d, bias=False)
        self.wo = Linear(store, rng, f"{name}.wo", d, d, bias=False)
        self.rel_k = store.add(f"{name}.rel_k",
                               uniform_init(rng, (N_RELATIONS, cfg.head_dim), 0.03))
        self.rel_v = store.add(f"{name}.rel_v",
                               uniform_init(rng, (N_RELATIONS, cfg.head_dim), 0.03))
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ff1 = Linear(store, rng, f"{name}.ff1", d, cfg.ffn)
        self.ff2 = Linear(store, rng, f"{name}.ff2", cfg.ffn, d)

    def __call__(self, tape, x, relations, key_mask, rng=None, train=False):
        """x (B, L, D); relations (B, L, L) int; key_mask (B, L) additive."""
        cfg = self.cfg
        B, L, D = x.data.shape
        h, hd = cfg.heads, cfg.head_dim

        def split(t):
            return tape.transpose(tape.reshape(t, (B, L, h, hd)), (0, 2, 1, 3))

        q = split(self.wq(tape, x))           # (B, h, L, d)
        k = split(self.wk(tape, x))
        v = split(self.wv(tape, x))

        scores = tape.matmul(q, tape.transpose(k, (0, 1, 3, 2)))   # (B, h, L, L)
        rk = tape.embedding(tape.watch(self.rel_k), relations)      # (B, L, L, d)
        q_t = tape.transpose(q, (0, 2, 1, 3))                        # (B, L, h, d)
        rel_scores = tape.matmul(q_t, tape.transpose(rk, (0, 1, 3, 2)))  # (B, L, h, L)
        scores = tape.add(scores, tape.transpose(rel_scores, (0, 2, 1, 3)))
        scores = tape.scale(scores, 1.0 / np.sqrt(hd))
        if key_mask is not None:
            scores = tape.add(scores, tape.const(key_mask[:, None, None, :].astype(DTYPE)))
        alpha = tape.softmax(scores)                                 # (B, h, L, L)

        ctx = tape.matmul(alpha, v)                                  # (B, h, L, d)
        rv = tape.embedding(tape.watch(self.rel_v), relations)      # (B, L, L, d)
        a_t = tape.transpose(alpha, (0, 2, 1, 3))                    # (B, L, h, L)
        rel_ctx = tape.matmul(a_t, rv)                               # (B, L, h, d)
        ctx = tape.add(ctx, tape.transpose(rel_ctx, (0, 2, 1, 3)))
        merged = tape.reshape(tape.transpose(ctx, (0, 2, 1, 3)), (B, L, D))
        attn = self.wo(tape, merged)
        if train and cfg.rat_dropout > 0:
            attn = tape.dropout(attn, cfg.rat_dropout, rng, train=True)
        x = self.ln1(tape, tape.add(x, attn))
        ff = self.ff2(tape, tape.relu(self.ff1(tape, x)))
        if train and cfg.rat_dropout > 0:
            ff = tape.dropout(ff, cfg.rat_dropout, rng, train=True)
        return self.ln2(tape, tape.add(x, ff))


class SpeechSqlModel:
    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng([seed, 0])
        store = self.store
        d = cfg.hidden

        self.speech_lstm = BiLSTM(store, rng, "speech", cfg.feature_dim,
                                  cfg.speech_hidden, cfg.speech_layers,
                                  dropout=cfg.rat_dropout)
        self.speech_proj = Linear(store, rng, "speech_proj",
                                  2 * cfg.speech_hidden, d)

        self.cls_cells = [
            LSTMCell(store, rng, f"cls.l{i}",
                     2 * cfg.speech_hidden if i == 0 else cfg.classifier_hidden,
                     cfg.classifier_hidden)
            for i in range(cfg.classifier_layers)]
        self.cls_out = Linear(store, rng, "cls.out",
                              cfg.classifier_hidden, cfg.n_speakers)

        self.tok_embed = store.add(
            "schema.tok_embed", uniform_init(rng, (cfg.hash_buckets, cfg.text_embed_dim)))
        self.name_lstm = BiLSTM(store, rng, "schema.name",
                                cfg.text_embed_dim, cfg.text_hidden, 1)
        self.item_proj = Linear(store, rng, "schema.item_proj",
                                2 * cfg.text_hidden, d)
        self.type_embed = store.add(
            "schema.type_embed", uniform_init(rng, (5, d)))

        self.rat_blocks = [RATBlock(store, rng, f"rat.b{i}", cfg)
                           for i in range(cfg.rat_blocks)]

        n_rules = len(grammar.RULES)
        self.rule_embed = store.add("dec.rule_embed",
                                    uniform_init(rng, (n_rules + 1, cfg.rule_embed)))
        self.node_embed = store.add("dec.node_embed",
                                    uniform_init(rng, (len(grammar.NODE_TYPES), cfg.node_embed)))
        self.ptr_action_proj = Linear(store, rng, "dec.ptr_action",
                                      d, cfg.rule_embed, bias=False)
        self.ctx_attn = MultiHeadAttention(store, rng, "dec.ctx", d, cfg.heads)
        self.dec_query = Linear(store, rng, "dec.query",
                                cfg.decoder_hidden, d, bias=False)
        lstm_in = (2 * cfg.rule_embed            # previous + parent action
                   + cfg.decoder_hidden          # parent hidden
                   + d                           # context vector
                   + cfg.node_embed)             # frontier node type
        self.dec_cell = LSTMCell(store, rng, "dec.lstm", lstm_in, cfg.decoder_hidden)
        self.rule_g1 = Linear(store, rng, "dec.g1",
                              cfg.decoder_hidden, cfg.decoder_hidden)
        self.rule_g2 = Linear(store, rng, "dec.g2", cfg.decoder_hidden, n_rules)
        self.ptr_q = Linear(store, rng, "dec.ptr_q", cfg.decoder_hidden, d, bias=False)
        self.ptr_k = Linear(store, rng, "dec.ptr_k", d, d, bias=False)
        self.ptr_rel = store.add("dec.ptr_rel", uniform_init(rng, (3, d), 0.03))

    # -- preprocessing -------------------------------------------------------

    def prepare(self, features, schema, gold_actions=None, speaker_id=0,
                links=None):
        q_len = max(1, -(-len(features) // self.cfg.pool_frames))
        joint = q_len + schema.n_columns + schema.n_tables
        rel = assemble_relation_matrix(q_len, schema, links=links,
                                       max_len=self.cfg.max_joint_len)
        plan = dec.build_plan(gold_actions, schema) if gold_actions else None
        return Prepared(features=np.asarray(features, dtype=DTYPE),
                        schema=schema, question_len=q_len, joint_len=joint,
                        relations=rel, gold_actions=gold_actions,
                        speaker_id=speaker_id, plan=plan)

    # -- speech --------------------------------------------------------------

    def encode_speech(self, tape, batch, rng=None, train=False):
        """(frame hiddens (B, T, 2H), frame mask, pooled question (B, Qmax, D))."""
        B = len(batch)
        if any(len(p.features) == 0 for p in batch):
            raise ValueError("empty feature sequence")
        T = max(len(p.features) for p in batch)
        F = batch[0].features.shape[1]
        feats = np.zeros((B, T, F), DTYPE)
        mask = np.zeros((B, T), DTYPE)
        for i, p in enumerate(batch):
            feats[i, :len(p.features)] = p.features
            mask[i, :len(p.features)] = 1.0
        xs = tape.const(feats)
        mconsts = mask_consts(tape, mask)
        hiddens = self.speech_lstm(tape, xs, mask=mconsts, rng=rng, train=train)

        k = self.cfg.pool_frames
        q_max = max(p.question_len for p in batch)
        pool = np.zeros((B, q_max, T), DTYPE)
        for i, p in enumerate(batch):
            n = len(p.features)
            for j in range(p.question_len):
                lo, hi = j * k, min((j + 1) * k, n)
                pool[i, j, lo:hi] = 1.0 / (hi - lo)
        pooled = tape.matmul(tape.const(pool), hiddens)   # (B, Qmax, 2H)
        return hiddens, mconsts, self.speech_proj(tape, pooled)

    def speaker_logits(self, tape, frame_hiddens, frame_mask, rng=None,
                       train=False, reverse=True):
        """Adversarial head: gradient reversal below a stacked LSTM."""
        x = tape.grad_reverse(frame_hiddens) if reverse else frame_hiddens
        last = None
        for i, cell in enumerate(self.cls_cells):
            if train and self.cfg.classifier_dropout > 0 and i > 0:
                x = tape.dropout(x, self.cfg.classifier_dropout, rng, train=True)
            x, last = run_lstm(tape, cell, x, mask=frame_mask)
        return self.cls_out(tape, last)

    # -- schema ----------------------------------------------------------------

    def encode_schema(self, tape, schemas):
        """Column/table vectors per schema: {db_id: (cols (C, D), tabs (T, D))}."""
        names, owners = [], []
        for s in schemas:
            for c in s.columns:
                names.append(c.tokens)
                owners.append((s.db_id, "col", c.id, c.type))
            for t in s.tables:
                names.append(t.tokens)
                owners.append((s.db_id, "tab", t.id, None))
        max_len = max(len(n) for n in names)
        ids = np.zeros((len(names), max_len), np.int64)
        mask = np.zeros((len(names), max_len), DTYPE)
        for i, toks in enumerate(names):
            for j, tok in enumerate(toks):
                ids[i, j] = _hash_token(tok, self.cfg.hash_buckets)
                mask[i, j] = 1.0
        embedded = tape.embedding(tape.watch(self.tok_embed), ids)
        encoded = self.name_lstm(tape, embedded, mask=mask)
        # final states: forward half at the last valid step survives via the
        # mask-hold trick at the last position; backward half at position 0
        H = self.cfg.text_hidden
        fwd = tape.narrow(tape.narrow(encoded, 1, max_len - 1, 1), 2, 0, H)
        bwd = tape.narrow(tape.narrow(encoded, 1, 0, 1), 2, H, H)
        item = tape.reshape(tape.concat([fwd, bwd], axis=2), (len(names), 2 * H))
        item = self.item_proj(tape, item)

        type_ids = {"text": 0, "number": 1, "time": 2, "boolean": 3, "others": 4}
        out = {}
        row = 0
        for s in schemas:
            C, T = s.n_columns, s.n_tables
            cols = tape.narrow(item, 0, row, C)
            ids = np.array([type_ids[c.type] for c in s.columns])
            cols = tape.add(cols, tape.embedding(tape.watch(self.type_embed), ids))
            tabs = tape.narrow(item, 0, row + C, T)
            out[s.db_id] = (cols, tabs)
            row += C + T
        return out

    # -- joint encoding -----------------------------------------------------------

    def encode_joint(self, tape, batch, rng=None, train=False):
        """Full encoder pass; returns a context dict used by the decoder."""
        hiddens, frame_mask, pooled = self.encode_speech(tape, batch, rng, train)
        distinct = {}
        for p in batch:
            distinct[p.schema.db_id] = p.schema
        schema_vecs = self.encode_schema(tape, list(distinct.values()))

        B = len(batch)
        L = max(p.joint_len for p in batch)
        D = self.cfg.hidden
        rows = []
        rel = np.full((B, L, L), 0, np.int64)
        key_mask = np.full((B, L), NEG, DTYPE)
        for i, p in enumerate(batch):
            cols, tabs = schema_vecs[p.schema.db_id]
            q = tape.narrow(tape.narrow(pooled, 0, i, 1), 1, 0, p.question_len)
            q = tape.reshape(q, (p.question_len, D))
            parts = [q, cols, tabs]
            pad = L - p.joint_len
            if pad:
                parts.append(tape.const(np.zeros((pad, D), DTYPE)))
            rows.append(tape.reshape(tape.concat(parts, axis=0), (1, L, D)))
            rel[i, :p.joint_len, :p.joint_len] = p.relations
            key_mask[i, :p.joint_len] = 0.0
        memory = tape.concat(rows, axis=0)
        for block in self.rat_blocks:
            memory = block(tape, memory, rel, key_mask, rng=rng, train=train)
        return {
            "batch": batch,
            "memory": memory,
            "frame_hiddens": hiddens,
            "frame_mask": frame_mask,
            "key_mask": key_mask,
            "layouts": [dec.MemoryLayout.of(p) for p in batch],
        }

    # -- losses / inference -----------------------------------------------------------

    def sequence_loss(self, tape, batch, rng=None, train=False, adv_weight=None,
                      with_speaker=True):
        """L_MLE + adv_weight * L_CE over a prepared batch with gold plans.
        with_speaker=False drops the adversarial head entirely."""
        ctx = self.encode_joint(tape, batch, rng=rng, train=train)
        l_mle = dec.teacher_forced_loss(tape, self, ctx, rng=rng, train=train)
        if not with_speaker:
            zero = tape.const(np.zeros((), DTYPE))
            return l_mle, l_mle, zero
        logits = self.speaker_logits(tape, ctx["frame_hiddens"], ctx["frame_mask"],
                                     rng=rng, train=train)
        speakers = np.array([p.speaker_id for p in batch])
        l_ce = tape.mean(tape.cross_entropy(logits, speakers))
        w = self.cfg.adv_weight if adv_weight is None else adv_weight
        total = tape.add(l_mle, tape.scale(l_ce, w))
        return total, l_mle, l_ce

    def infer(self, features, schema, links=None):
        """Greedy legality-masked decoding; returns the parsed tree."""
        p = self.prepare(features, schema, links=links)
        tape = Tape()
        ctx = self.encode_joint(tape, [p], train=False)
        return dec.greedy_decode(tape, self, ctx, schema,
                                 max_steps=self.cfg.max_decode_steps)

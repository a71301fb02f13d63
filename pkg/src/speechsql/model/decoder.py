"""Grammar-constrained tree decoding: teacher-forced likelihood and
greedy (beam 1) inference.

Action probabilities: ApplyRule comes from a two-layer feed-forward head
over the decoder state, masked to rules matching the frontier head.
Pointer actions score memory positions with relation-biased keys; table
probability sums the scores of the table and its columns, column
probability reads the column's own position. The pointer softmax is
restricted to schema positions so table probabilities sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import grammar
from ..autodiff import DTYPE

NEG = -1e9


class InferenceError(RuntimeError):
    def __init__(self, msg, actions):
        self.actions = actions
        super().__init__(f"{msg} (after {len(actions)} actions)")


@dataclass
class MemoryLayout:
    """Position bookkeeping for one example's joint memory row."""

    q_len: int
    n_cols: int
    n_tabs: int
    joint_len: int

    @classmethod
    def of(cls, prepared):
        s = prepared.schema
        return cls(prepared.question_len, s.n_columns, s.n_tables,
                   prepared.joint_len)

    def col_pos(self, c):
        return self.q_len + c

    def tab_pos(self, t):
        return self.q_len + self.n_cols + t

    def position_kinds(self, padded_len):
        kinds = np.zeros(padded_len, np.int64)
        kinds[self.q_len:self.q_len + self.n_cols] = 1
        kinds[self.q_len + self.n_cols:self.joint_len] = 2
        return kinds

    def table_mask(self, padded_len):
        """Additive mask keeping tables and their real columns (no star)."""
        m = np.full(padded_len, NEG, DTYPE)
        m[self.q_len + 1:self.joint_len] = 0.0
        return m

    def column_mask(self, padded_len, star_ok):
        m = np.full(padded_len, NEG, DTYPE)
        lo = self.q_len if star_ok else self.q_len + 1
        m[lo:self.q_len + self.n_cols] = 0.0
        return m

    def table_membership(self, padded_len, schema):
        m = np.zeros((self.n_tabs, padded_len), DTYPE)
        for t in schema.tables:
            m[t.id, self.tab_pos(t.id)] = 1.0
            for c in t.columns:
                m[t.id, self.col_pos(c)] = 1.0
        return m

    def column_membership(self, padded_len):
        m = np.zeros((self.n_cols, padded_len), DTYPE)
        for c in range(self.n_cols):
            m[c, self.col_pos(c)] = 1.0
        return m


# ---------------------------------------------------------------------------
# Teacher-forcing plans

N_RULES = len(grammar.RULES)
NO_RULE = N_RULES          # padding row of the rule embedding table
_KIND = {"AR": 0, "SC": 1, "ST": 2}


@dataclass
class TeacherPlan:
    kind: np.ndarray          # (S,) 0 rule / 1 column / 2 table
    gold: np.ndarray          # (S,) index in its action space
    rule_mask: np.ndarray     # (S, n_rules) additive legality mask
    star_ok: np.ndarray       # (S,) bool, column steps only
    parent_step: np.ndarray   # (S,) decode step of the parent, -1 at root
    parent_rule: np.ndarray   # (S,) rule id of the parent action, NO_RULE at root
    node_type: np.ndarray     # (S,) frontier symbol ids


def build_plan(actions, schema):
    """Replay gold actions, recording everything the batched loss needs."""
    state = grammar.ReplayState(schema)
    S = len(actions)
    plan = TeacherPlan(
        kind=np.zeros(S, np.int64), gold=np.zeros(S, np.int64),
        rule_mask=np.full((S, N_RULES), NEG, DTYPE),
        star_ok=np.zeros(S, bool),
        parent_step=np.full(S, -1, np.int64),
        parent_rule=np.full(S, NO_RULE, np.int64),
        node_type=np.zeros(S, np.int64))
    for t, action in enumerate(actions):
        top = state.head()
        if top is None:
            raise grammar.ReplayError(f"trailing action {action}", index=t)
        plan.node_type[t] = grammar.NODE_TYPE_ID[top.symbol]
        plan.parent_step[t] = top.parent_step
        if top.parent_action is not None:
            plan.parent_rule[t] = top.parent_action.idx
        plan.kind[t] = _KIND[action.kind]
        plan.gold[t] = action.idx
        if action.kind == grammar.APPLY_RULE:
            for r in grammar.RULES_BY_HEAD[top.symbol]:
                plan.rule_mask[t, r.id] = 0.0
        else:
            plan.rule_mask[t] = 0.0   # unused at pointer steps
            plan.star_ok[t] = top.symbol == "COLUMN_ANY"
        state.apply(action)
    if not state.done():
        raise grammar.ReplayError("gold actions leave an open frontier",
                                  index=S, expected=state.head().symbol)
    return plan


# ---------------------------------------------------------------------------
# Shared step computation


def _prev_action_embed(tape, model, memory, layouts, prevs):
    """Embedding of the previous action per batch row.

    prevs: list of None | ("rule", id) | ("col", id) | ("tab", id).
    Pointer actions embed the pointed item's memory vector.
    """
    B = len(prevs)
    rule_ids = np.full(B, NO_RULE, np.int64)
    pos = np.zeros(B, np.int64)
    is_ptr = np.zeros((B, 1), DTYPE)
    for i, prev in enumerate(prevs):
        if prev is None:
            continue
        kind, idx = prev
        if kind == "rule":
            rule_ids[i] = idx
        else:
            is_ptr[i] = 1.0
            pos[i] = layouts[i].col_pos(idx) if kind == "col" else layouts[i].tab_pos(idx)
    rule_part = tape.embedding(tape.watch(model.rule_embed), rule_ids)
    if not is_ptr.any():
        return rule_part
    ptr_part = model.ptr_action_proj(tape, tape.select_positions(memory, pos))
    keep = tape.const(1.0 - is_ptr)
    return tape.add(tape.mul(rule_part, keep), tape.mul(ptr_part, tape.const(is_ptr)))


def _pointer_keys(tape, model, ctx):
    memory = ctx["memory"]
    B, L, _ = memory.data.shape
    kinds = np.stack([lay.position_kinds(L) for lay in ctx["layouts"]])
    rel = tape.embedding(tape.watch(model.ptr_rel), kinds)
    return tape.add(model.ptr_k(tape, memory), rel)


def _decoder_step(tape, model, ctx, kv, ptr_keys, h, c, a_prev, parent_h,
                  parent_a, node_ids, rng=None, train=False):
    """One LSTM update; returns (h, c, rule logits, pointer scores)."""
    cfg = model.cfg
    B = h.data.shape[0]
    n_t = tape.embedding(tape.watch(model.node_embed), node_ids)
    query = tape.reshape(model.dec_query(tape, h), (B, 1, cfg.hidden))
    c_t = tape.reshape(model.ctx_attn.attend(tape, query, kv, ctx["key_mask"]),
                       (B, cfg.hidden))
    x = tape.concat([a_prev, parent_h, parent_a, c_t, n_t], axis=1)
    if train and cfg.decoder_dropout > 0:
        x = tape.dropout(x, cfg.decoder_dropout, rng, train=True)
    h_new, c_new = model.dec_cell.step(tape, x, h, c)
    rule_logits = model.rule_g2(tape, tape.tanh(model.rule_g1(tape, h_new)))
    q_ptr = tape.reshape(model.ptr_q(tape, h_new), (B, 1, cfg.hidden))
    scores = tape.matmul(q_ptr, tape.transpose(ptr_keys, (0, 2, 1)))
    scores = tape.scale(tape.reshape(scores, (B, -1)), 1.0 / np.sqrt(cfg.hidden))
    return h_new, c_new, rule_logits, scores


# ---------------------------------------------------------------------------
# Teacher-forced likelihood


def teacher_forced_loss(tape, model, ctx, rng=None, train=False):
    """Mean over the batch of the per-example action-sequence NLL."""
    batch = ctx["batch"]
    layouts = ctx["layouts"]
    memory = ctx["memory"]
    B = len(batch)
    L = memory.data.shape[1]
    plans = [p.plan for p in batch]
    if any(p is None for p in plans):
        raise ValueError("teacher_forced_loss needs gold action plans")
    S = max(len(p.kind) for p in plans)
    H = model.cfg.decoder_hidden

    # padded plan arrays
    kind = np.zeros((B, S), np.int64)
    gold = np.zeros((B, S), np.int64)
    active = np.zeros((B, S), DTYPE)
    star_ok = np.zeros((B, S), bool)
    parent_step = np.zeros((B, S), np.int64)
    parent_rule = np.full((B, S), NO_RULE, np.int64)
    node_type = np.zeros((B, S), np.int64)
    rule_mask = np.zeros((B, S, N_RULES), DTYPE)
    for i, p in enumerate(plans):
        n = len(p.kind)
        kind[i, :n] = p.kind
        gold[i, :n] = p.gold
        active[i, :n] = 1.0
        star_ok[i, :n] = p.star_ok
        parent_step[i, :n] = p.parent_step
        parent_rule[i, :n] = p.parent_rule
        node_type[i, :n] = p.node_type
        rule_mask[i, :n] = p.rule_mask

    tab_mask = np.stack([lay.table_mask(L) for lay in layouts])
    col_mask_star = np.stack([lay.column_mask(L, True) for lay in layouts])
    col_mask_plain = np.stack([lay.column_mask(L, False) for lay in layouts])
    m_tab = np.zeros((B, max(l.n_tabs for l in layouts), L), DTYPE)
    m_col = np.zeros((B, max(l.n_cols for l in layouts), L), DTYPE)
    for i, (lay, p) in enumerate(zip(layouts, batch)):
        m_tab[i, :lay.n_tabs] = lay.table_membership(L, p.schema)
        m_col[i, :lay.n_cols] = lay.column_membership(L)

    kv = model.ctx_attn.project_kv(tape, memory)
    ptr_keys = _pointer_keys(tape, model, ctx)
    tab_mask_c = tape.const(tab_mask)
    h = tape.const(np.zeros((B, H), DTYPE))
    c = h
    hist = None
    prevs = [None] * B
    total = tape.const(np.zeros(B, DTYPE))

    for t in range(S):
        a_prev = _prev_action_embed(tape, model, memory, layouts, prevs)
        if hist is None:
            parent_h = tape.const(np.zeros((B, H), DTYPE))
        else:
            idx = np.clip(parent_step[:, t], 0, t - 1)
            has = (parent_step[:, t] >= 0).astype(DTYPE)[:, None]
            parent_h = tape.mul(tape.time_gather(hist, idx), tape.const(has))
        parent_a = tape.embedding(tape.watch(model.rule_embed), parent_rule[:, t])
        h_new, c_new, rule_logits, scores = _decoder_step(
            tape, model, ctx, kv, ptr_keys, h, c, a_prev, parent_h, parent_a,
            node_type[:, t], rng=rng, train=train)
        act = tape.const(active[:, t:t + 1])
        keep = tape.const(1.0 - active[:, t:t + 1])
        h = tape.add(tape.mul(h_new, act), tape.mul(h, keep))
        c = tape.add(tape.mul(c_new, act), tape.mul(c, keep))
        step_h = tape.reshape(h, (1, B, H))
        hist = step_h if hist is None else tape.concat([hist, step_h], axis=0)

        is_rule = (kind[:, t] == 0).astype(DTYPE)
        is_col = (kind[:, t] == 1).astype(DTYPE)
        is_tab = (kind[:, t] == 2).astype(DTYPE)
        pieces = []

        if is_rule.any():
            masked = tape.add(rule_logits, tape.const(rule_mask[:, t]))
            rule_nll = tape.cross_entropy(masked, np.where(kind[:, t] == 0,
                                                           gold[:, t], 0))
            pieces.append(tape.mul(rule_nll, tape.const(is_rule * active[:, t])))

        if is_col.any():
            # column probability is the softmax entry at the column's own
            # position: a plain cross-entropy over masked scores
            col_mask_t = np.where(star_ok[:, t:t + 1], col_mask_star, col_mask_plain)
            gold_pos = np.array([lay.col_pos(int(gold[i, t])) if kind[i, t] == 1 else 0
                                 for i, lay in enumerate(layouts)])
            col_nll = tape.cross_entropy(tape.add(scores, tape.const(col_mask_t)),
                                         gold_pos)
            pieces.append(tape.mul(col_nll, tape.const(is_col * active[:, t])))

        if is_tab.any():
            # -log sum_{j in items(gold)} gamma_j, written as a stable
            # difference of logsumexps over legal vs gold-item positions
            gold_items = np.full((B, L), NEG, DTYPE)
            for i, lay in enumerate(layouts):
                if kind[i, t] == 2:
                    member = m_tab[i, int(gold[i, t])] > 0
                    gold_items[i, member] = 0.0
            lse_all = tape.logsumexp(tape.add(scores, tab_mask_c))
            lse_gold = tape.logsumexp(tape.add(scores, tape.const(gold_items)))
            tab_nll = tape.sub(lse_all, lse_gold)
            pieces.append(tape.mul(tab_nll, tape.const(is_tab * active[:, t])))

        for piece in pieces:
            total = tape.add(total, piece)

        for i in range(B):
            if active[i, t]:
                k = kind[i, t]
                prevs[i] = (("rule", int(gold[i, t])) if k == 0 else
                            ("col", int(gold[i, t])) if k == 1 else
                            ("tab", int(gold[i, t])))
    return tape.mean(total)


# ---------------------------------------------------------------------------
# Greedy inference


def step_distribution(tape, model, ctx, kv, ptr_keys, state_bits):
    """Distribution over the legal actions of a live replay state.

    state_bits carries (replay, h, c, hist, prev). Returns (legal actions,
    probabilities, h_new, c_new, rule/pointer caches) without advancing.
    """
    replay, h, c, hist, prev = state_bits
    lay = ctx["layouts"][0]
    L = ctx["memory"].data.shape[1]
    top = replay.head()
    if top is None:
        raise InferenceError("decoding already complete", [])

    a_prev = _prev_action_embed(tape, model, ctx["memory"], ctx["layouts"], [prev])
    if hist is None or top.parent_step < 0:
        parent_h = tape.const(np.zeros((1, model.cfg.decoder_hidden), DTYPE))
    else:
        parent_h = tape.time_gather(hist, np.array([top.parent_step]))
    parent_rule = np.array([top.parent_action.idx if top.parent_action else NO_RULE])
    parent_a = tape.embedding(tape.watch(model.rule_embed), parent_rule)
    node_ids = np.array([grammar.NODE_TYPE_ID[top.symbol]])
    h_new, c_new, rule_logits, scores = _decoder_step(
        tape, model, ctx, kv, ptr_keys, h, c, a_prev, parent_h, parent_a, node_ids)

    legal = replay.legal_actions()
    if top.symbol in grammar.RULES_BY_HEAD:
        mask = np.full((1, N_RULES), NEG, DTYPE)
        for a in legal:
            mask[0, a.idx] = 0.0
        probs_full = tape.softmax(tape.add(rule_logits, tape.const(mask)))
        probs = probs_full.data[0, [a.idx for a in legal]]
    elif top.symbol == "TABLE":
        gamma = tape.softmax(tape.add(scores, tape.const(
            lay.table_mask(L)[None, :])))
        p = gamma.data[0] @ lay.table_membership(L, replay.schema).T
        probs = p[[a.idx for a in legal]]
    else:
        star_ok = top.symbol == "COLUMN_ANY"
        gamma = tape.softmax(tape.add(scores, tape.const(
            lay.column_mask(L, star_ok)[None, :])))
        p = gamma.data[0] @ lay.column_membership(L).T
        probs = p[[a.idx for a in legal]]
    return legal, np.asarray(probs, dtype=np.float64), h_new, c_new


def greedy_decode(tape, model, ctx, schema, max_steps=200):
    """Beam-1 decoding until the frontier empties; argmax ties break to
    the lowest action id because legal actions are listed ascending."""
    replay = grammar.ReplayState(schema)
    kv = model.ctx_attn.project_kv(tape, ctx["memory"])
    ptr_keys = _pointer_keys(tape, model, ctx)
    h = tape.const(np.zeros((1, model.cfg.decoder_hidden), DTYPE))
    c = h
    hist = None
    prev = None
    taken = []
    for _ in range(max_steps):
        if replay.done():
            return replay.root()
        legal, probs, h, c = step_distribution(
            tape, model, ctx, kv, ptr_keys, (replay, h, c, hist, prev))
        step_h = tape.reshape(h, (1, 1, model.cfg.decoder_hidden))
        hist = step_h if hist is None else tape.concat([hist, step_h], axis=0)
        action = legal[int(np.argmax(probs))]
        replay.apply(action)
        taken.append(action)
        prev = (("rule", action.idx) if action.kind == grammar.APPLY_RULE else
                ("col", action.idx) if action.kind == grammar.SELECT_COLUMN else
                ("tab", action.idx))
    if replay.done():
        return replay.root()
    raise InferenceError("step cap exceeded", taken)

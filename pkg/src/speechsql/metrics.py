"""Exact-match and component-matching evaluation plus difficulty buckets.

Queries are decomposed into order-insensitive component structures:
SELECT items and WHERE/HAVING condition atoms compare as multisets, the
AND/OR skeleton as a connective multiset, ORDER BY as an ordered tuple
with the LIMIT flag, and KEYWORD as the set of clause/operator keywords.
Literal values are never compared (they are all the placeholder).

A set-operation query compares component-wise on both operands, so
exact match is true precisely when every present component matches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from . import grammar as g

COMPONENTS = ("SELECT", "WHERE", "GROUP", "ORDER", "AND/OR", "KEYWORD")

_SETOP_KEYWORD = {"setop_intersect": "INTERSECT", "setop_union": "UNION",
                  "setop_except": "EXCEPT"}
_PRED_OPS = {"pred_eq": "=", "pred_ne": "!=", "pred_lt": "<", "pred_le": "<=",
             "pred_gt": ">", "pred_ge": ">=", "pred_like": "LIKE",
             "pred_in": "IN", "pred_not_in": "NOT IN", "pred_between": "BETWEEN"}


class MetricsError(ValueError):
    pass


def _list_children(node, cons_names):
    """Flatten a cons-list node (sel_list, col_list, order_list, from_clause)."""
    one, cons = cons_names
    items = []
    while node.name == cons:
        items.append(node.children[0])
        node = node.children[1]
    assert node.name == one
    items.append(node.children[0])
    return items


def _agg_value(node):
    """(agg name or None, column id) for sel_item / lhs nodes."""
    if node.name in ("sel_agg", "lhs_agg"):
        agg = node.children[0].name[4:].upper()
        col = node.children[1].children[0].id
        return (agg, col)
    value = node.children[0]
    return (None, value.children[0].id)


def _conditions(cond):
    """Flatten a cond tree into (atoms, connective list)."""
    atoms, conns = [], []
    while cond.name in ("cond_and", "cond_or"):
        atoms.append(cond.children[0])
        conns.append("and" if cond.name == "cond_and" else "or")
        cond = cond.children[1]
    atoms.append(cond.children[0])
    return atoms, conns


def _atom_key(pred):
    op = _PRED_OPS[pred.name]
    lhs = _agg_value(pred.children[0])
    if pred.name in ("pred_like", "pred_between"):
        return (op, lhs, ("terminal",))
    rhs = pred.children[1]
    if rhs.name == "subquery":
        return (op, lhs, ("sub", decompose(rhs.children[0])))
    if rhs.name == "rhs_terminal":
        return (op, lhs, ("terminal",))
    if rhs.name == "rhs_col":
        return (op, lhs, ("col", rhs.children[0].id))
    return (op, lhs, ("sub", decompose(rhs.children[0].children[0])))


def _multiset(items):
    counts = {}
    for it in items:
        counts[it] = counts.get(it, 0) + 1
    return frozenset(counts.items())


@dataclass(frozen=True)
class QueryParts:
    """Hashable decomposition of one query (set-op operand excluded)."""

    distinct: bool
    select: frozenset
    where_atoms: frozenset
    where_conns: frozenset
    group_cols: frozenset
    having_atoms: frozenset
    having_conns: frozenset
    order: tuple
    has_limit: bool
    keywords: frozenset
    n_select: int
    n_where: int
    n_group: int
    n_aggs: int
    n_or: int
    n_like: int
    n_not_in: int
    n_from_tables: int
    n_nested: int
    setop: object   # (keyword, QueryParts) or None

    def has_where(self):
        return self.n_where > 0

    def has_group(self):
        return self.n_group > 0

    def has_order(self):
        return len(self.order) > 0


def decompose(query):
    """Build the QueryParts of a query node."""
    if query.name != "query":
        raise MetricsError(f"expected a query node, got {query.name}")
    select_clause, from_clause, where, group, order, setop = query.children

    distinct = select_clause.name == "select_distinct"
    sel_items = _list_children(select_clause.children[0], ("sel_one", "sel_cons"))
    select = [_agg_value(it) for it in sel_items]

    from_tables = _list_children(from_clause, ("from_one", "from_cons"))

    keywords = set()
    n_aggs = sum(1 for agg, _ in select if agg)
    if distinct:
        keywords.add("DISTINCT")

    where_atoms, where_conns = [], []
    if where.name == "with_where":
        keywords.add("WHERE")
        preds, where_conns = _conditions(where.children[0])
        where_atoms = [_atom_key(p) for p in preds]
        n_aggs += sum(1 for p in preds if p.children[0].name == "lhs_agg")

    group_cols, having_atoms, having_conns = [], [], []
    if group.name == "with_group":
        keywords.add("GROUP BY")
        group_cols = [c.id for c in
                      _list_children(group.children[0], ("col_one", "col_cons"))]
        having = group.children[1]
        if having.name == "with_having":
            keywords.add("HAVING")
            preds, having_conns = _conditions(having.children[0])
            having_atoms = [_atom_key(p) for p in preds]
            n_aggs += sum(1 for p in preds if p.children[0].name == "lhs_agg")

    order_items, has_limit = [], False
    if order.name == "with_order":
        keywords.add("ORDER BY")
        for item in _list_children(order.children[0], ("order_one", "order_cons")):
            direction = "DESC" if item.name == "order_desc" else "ASC"
            order_items.append((_agg_value(item.children[0]), direction))
            if item.children[0].name == "lhs_agg":
                n_aggs += 1
        if order.children[1].name == "with_limit":
            keywords.add("LIMIT")
            has_limit = True

    all_atoms = where_atoms + having_atoms
    for op, _, _ in all_atoms:
        if op in ("IN", "NOT IN", "LIKE", "BETWEEN"):
            keywords.add(op)
    n_nested = sum(1 for _, _, rhs in all_atoms if rhs[0] == "sub")

    setop_parts = None
    if setop.name != "no_setop":
        kw = _SETOP_KEYWORD[setop.name]
        keywords.add(kw)
        n_nested += 1
        setop_parts = (kw, decompose(setop.children[0]))

    return QueryParts(
        distinct=distinct,
        select=_multiset(select),
        where_atoms=_multiset(where_atoms),
        where_conns=_multiset(where_conns),
        group_cols=frozenset(group_cols),
        having_atoms=_multiset(having_atoms),
        having_conns=_multiset(having_conns),
        order=tuple(order_items),
        has_limit=has_limit,
        keywords=frozenset(keywords),
        n_select=len(select),
        n_where=len(where_atoms),
        n_group=len(group_cols),
        n_aggs=n_aggs,
        n_or=sum(1 for c in where_conns + having_conns if c == "or"),
        n_like=sum(1 for opn, _, _ in all_atoms if opn == "LIKE"),
        n_not_in=sum(1 for opn, _, _ in all_atoms if opn == "NOT IN"),
        n_from_tables=len(from_tables),
        n_nested=n_nested,
        setop=setop_parts,
    )


# -- component views -----------------------------------------------------------


def _component_value(parts, name):
    """(present, value) for one component of one operand."""
    if name == "SELECT":
        return True, (parts.distinct, parts.select)
    if name == "WHERE":
        return parts.has_where(), parts.where_atoms
    if name == "GROUP":
        return parts.has_group(), (parts.group_cols, parts.having_atoms,
                                   parts.having_conns)
    if name == "ORDER":
        return parts.has_order(), (parts.order, parts.has_limit)
    if name == "AND/OR":
        return True, (parts.where_conns, parts.having_conns)
    if name == "KEYWORD":
        return True, parts.keywords
    raise MetricsError(f"unknown component {name}")


def _pairwise(parts, name):
    """Component (presence, value) across a possible set operation."""
    present, value = _component_value(parts, name)
    if parts.setop is None:
        return present, (value, None)
    rp, rv = _component_value(parts.setop[1], name)
    return present or rp, (value, rv)


def match_components(pred, gold):
    """Per-component outcome: True/False where either side has the
    component, None where both lack it. pred/gold are query nodes."""
    p = decompose(pred)
    q = decompose(gold)
    out = {}
    for name in COMPONENTS:
        pp, pv = _pairwise(p, name)
        gp, gv = _pairwise(q, name)
        if not pp and not gp:
            out[name] = None
        else:
            out[name] = (pp == gp) and (pv == gv)
    return out


def exact_match(pred, gold):
    """True iff every present component matches (values ignored by
    construction: literals are placeholders)."""
    return all(v is not False for v in match_components(pred, gold).values())


# -- corpus scores --------------------------------------------------------------


@dataclass
class ComponentBreakdown:
    scores: dict          # component -> F1 over the corpus
    exact_accuracy: float
    n_examples: int


def component_f1(preds, golds):
    """F1 per component over aligned prediction/gold lists; an example
    counts wherever either side has the component."""
    if len(preds) != len(golds):
        raise MetricsError(f"{len(preds)} predictions vs {len(golds)} golds")
    tally = {name: [0, 0, 0] for name in COMPONENTS}  # tp, pred count, gold count
    exact = 0
    for pred, gold in zip(preds, golds):
        p = decompose(pred)
        q = decompose(gold)
        ok = True
        for name in COMPONENTS:
            pp, pv = _pairwise(p, name)
            gp, gv = _pairwise(q, name)
            hit = pp and gp and pv == gv
            tally[name][0] += hit
            tally[name][1] += pp
            tally[name][2] += gp
            if (pp or gp) and not (hit and pp == gp):
                ok = False
        exact += ok
    scores = {}
    for name, (tp, pc, gc) in tally.items():
        if pc == 0 and gc == 0:
            scores[name] = 1.0
            continue
        prec = tp / pc if pc else 0.0
        rec = tp / gc if gc else 0.0
        scores[name] = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    n = len(preds)
    return ComponentBreakdown(scores, exact / n if n else 0.0, n)


# -- difficulty ------------------------------------------------------------------

DIFFICULTIES = ("easy", "medium", "hard", "extra")


def _load_difficulty_rules():
    with resources.files("speechsql.data").joinpath("difficulty_rules.json").open("r") as fh:
        return json.load(fh)


_DIFF_RULES = _load_difficulty_rules()


def difficulty_counts(parts):
    clause = (int(parts.has_where()) + int(parts.has_group())
              + int(parts.has_order()) + int(parts.has_limit)
              + (parts.n_from_tables - 1)
              + parts.n_or + parts.n_like + parts.n_not_in)
    extra = (int(parts.n_aggs > 1) + int(parts.n_select > 1)
             + int(parts.n_where > 1) + int(parts.n_group > 1))
    return clause, extra, parts.n_nested


def difficulty(gold):
    """Bucket a gold query by its component counts (rule table in data/)."""
    clause, extra, nested = difficulty_counts(decompose(gold))

    def ok(cond):
        return (clause >= cond.get("clause_min", 0)
                and clause <= cond.get("clause_max", 10 ** 9)
                and extra >= cond.get("extra_min", 0)
                and extra <= cond.get("extra_max", 10 ** 9)
                and nested <= cond.get("nested_max", 10 ** 9))

    for bucket in _DIFF_RULES["buckets"]:
        if any(ok(c) for c in bucket["any"]):
            return bucket["name"]
    return _DIFF_RULES["fallback"]


# -- aggregate report -------------------------------------------------------------


def report(preds, golds):
    """Exact-match accuracy overall and per difficulty bucket plus the
    component F1 table; returns a dict with stable key order."""
    if not golds:
        raise MetricsError("empty corpus")
    breakdown = component_f1(preds, golds)
    buckets = {}
    for pred, gold in zip(preds, golds):
        b = difficulty(gold)
        hit = exact_match(pred, gold)
        n, k = buckets.get(b, (0, 0))
        buckets[b] = (n + 1, k + hit)
    per_bucket = {b: {"count": n, "exact_match": round(k / n, 4)}
                  for b, (n, k) in buckets.items()}
    return {
        "n_examples": breakdown.n_examples,
        "exact_match": round(breakdown.exact_accuracy, 4),
        "by_difficulty": {b: per_bucket[b] for b in DIFFICULTIES if b in per_bucket},
        "component_f1": {c: round(breakdown.scores[c], 4) for c in COMPONENTS},
    }


def format_report(rep):
    """Aligned text table for terminals."""
    lines = [f"examples: {rep['n_examples']}   exact match: {rep['exact_match']:.4f}", ""]
    lines.append("difficulty   count   exact")
    for b in DIFFICULTIES:
        if b in rep["by_difficulty"]:
            d = rep["by_difficulty"][b]
            lines.append(f"{b:<12} {d['count']:>5}   {d['exact_match']:.4f}")
    lines.append("")
    lines.append("component    F1")
    for c in COMPONENTS:
        lines.append(f"{c:<12} {rep['component_f1'][c]:.4f}")
    return "\n".join(lines)

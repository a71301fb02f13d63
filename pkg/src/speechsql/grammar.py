"""SQL subset grammar: ASTs, the action-sequence bijection, parsing and
canonical rendering.

An AST is a derivation tree over the rule table shipped in
data/grammar_rules.json. Rule ids are dense and stable so golden action
sequences can be pinned. Literal values are never modeled: every literal
parses to (and renders as) the placeholder 'terminal'.

Actions come in three kinds: ApplyRule expands the leftmost frontier
nonterminal, SelectColumn / SelectTable fill pointer slots. Depth-first
preorder emission of a tree and replay of its action sequence are exact
inverses of each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

POINTER_SLOTS = ("COLUMN", "COLUMN_ANY", "TABLE")
START_SYMBOL = "query"

APPLY_RULE = "AR"
SELECT_COLUMN = "SC"
SELECT_TABLE = "ST"


class GrammarError(ValueError):
    pass


class ReplayError(GrammarError):
    """Illegal or incomplete action sequence; carries the failing index."""

    def __init__(self, msg, index=None, expected=None):
        self.index = index
        self.expected = expected
        super().__init__(msg)


class SqlSyntaxError(GrammarError):
    def __init__(self, msg, pos):
        self.pos = pos
        super().__init__(f"{msg} (at {pos})")


class UnknownIdentifier(GrammarError):
    def __init__(self, token, pos):
        self.token = token
        self.pos = pos
        super().__init__(f"unknown identifier {token!r} (at {pos})")


@dataclass(frozen=True)
class Rule:
    id: int
    name: str
    head: str
    body: tuple  # nonterminals, pointer slots, and keyword terminals


def _load_rules():
    with resources.files("speechsql.data").joinpath("grammar_rules.json").open("r") as fh:
        raw = json.load(fh)
    rules = tuple(Rule(r["id"], r["name"], r["head"], tuple(r["body"]))
                  for r in raw["rules"])
    for i, r in enumerate(rules):
        if r.id != i:
            raise GrammarError(f"rule ids not dense at {r.name}")
    return rules


RULES = _load_rules()
RULES_BY_NAME = {r.name: r for r in RULES}
NONTERMINALS = tuple(sorted({r.head for r in RULES}))
RULES_BY_HEAD = {h: tuple(r for r in RULES if r.head == h) for h in NONTERMINALS}

# node-type vocabulary for the decoder: nonterminals plus pointer slots
NODE_TYPES = NONTERMINALS + POINTER_SLOTS
NODE_TYPE_ID = {s: i for i, s in enumerate(NODE_TYPES)}


def _expansion_symbols(rule):
    """Body symbols that become frontier entries (keywords are implicit)."""
    return tuple(s for s in rule.body if s in RULES_BY_HEAD or s in POINTER_SLOTS)


EXPANSIONS = {r.id: _expansion_symbols(r) for r in RULES}


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class ColumnRef:
    id: int


@dataclass(frozen=True)
class TableRef:
    id: int


class Node:
    """One rule application; children align with the rule's expansion slots."""

    __slots__ = ("rule", "children")

    def __init__(self, rule, children=None):
        self.rule = rule
        self.children = children if children is not None else []

    @property
    def name(self):
        return RULES[self.rule].name

    def __eq__(self, other):
        return (isinstance(other, Node) and self.rule == other.rule
                and self.children == other.children)

    def __repr__(self):
        return f"Node({self.name}, {self.children!r})"

    def count_nodes(self):
        n = 1
        for c in self.children:
            if isinstance(c, Node):
                n += c.count_nodes()
        return n

    def count_pointers(self):
        n = 0
        for c in self.children:
            if isinstance(c, Node):
                n += c.count_pointers()
            else:
                n += 1
        return n


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class Action:
    kind: str   # APPLY_RULE | SELECT_COLUMN | SELECT_TABLE
    idx: int

    def __repr__(self):
        return f"{self.kind}({self.idx})"


def apply_rule(rule_id):
    return Action(APPLY_RULE, rule_id)


def select_column(col_id):
    return Action(SELECT_COLUMN, col_id)


def select_table(table_id):
    return Action(SELECT_TABLE, table_id)


def actions_to_json(actions):
    return [[a.kind, a.idx] for a in actions]


def actions_from_json(data):
    return [Action(kind, idx) for kind, idx in data]


# ---------------------------------------------------------------------------
# Replay state (the decoding frontier)


@dataclass
class FrontierEntry:
    symbol: str
    parent_node: Node | None   # node whose child list this entry fills
    parent_step: int           # decode step that pushed this entry (-1 for root)
    parent_action: Action | None


class ReplayState:
    """Depth-first frontier over the grammar.

    apply() consumes actions one at a time; legal_actions() is the exact
    legality set the decoder masks with. The derivation tree is built as
    a side effect and available from root() once the frontier empties.
    """

    def __init__(self, schema):
        self.schema = schema
        self._root = None
        self.stack = [FrontierEntry(START_SYMBOL, None, -1, None)]
        self.step = 0

    def done(self):
        return not self.stack

    def head(self):
        return self.stack[-1] if self.stack else None

    def root(self):
        if not self.done():
            raise ReplayError("incomplete: frontier not empty", index=self.step,
                              expected=self.head().symbol)
        return self._root

    def legal_actions(self):
        """Deterministic ascending-id order per kind."""
        top = self.head()
        if top is None:
            return []
        if top.symbol == "COLUMN":
            return [select_column(c) for c in range(1, self.schema.n_columns)]
        if top.symbol == "COLUMN_ANY":
            return [select_column(c) for c in range(self.schema.n_columns)]
        if top.symbol == "TABLE":
            return [select_table(t) for t in range(self.schema.n_tables)]
        return [apply_rule(r.id) for r in RULES_BY_HEAD[top.symbol]]

    def is_legal(self, action):
        top = self.head()
        if top is None:
            return False
        if action.kind == APPLY_RULE:
            return (top.symbol in RULES_BY_HEAD
                    and 0 <= action.idx < len(RULES)
                    and RULES[action.idx].head == top.symbol)
        if action.kind == SELECT_COLUMN:
            lo = 0 if top.symbol == "COLUMN_ANY" else 1
            return (top.symbol in ("COLUMN", "COLUMN_ANY")
                    and lo <= action.idx < self.schema.n_columns)
        if action.kind == SELECT_TABLE:
            return top.symbol == "TABLE" and 0 <= action.idx < self.schema.n_tables
        return False

    def apply(self, action):
        top = self.head()
        if top is None:
            raise ReplayError(f"trailing action {action} after completion",
                              index=self.step)
        if not self.is_legal(action):
            raise ReplayError(
                f"illegal action {action} at step {self.step}: frontier expects "
                f"{top.symbol}", index=self.step, expected=top.symbol)
        self.stack.pop()
        if action.kind == APPLY_RULE:
            node = Node(action.idx)
            self._attach(top, node)
            for sym in reversed(EXPANSIONS[action.idx]):
                self.stack.append(FrontierEntry(sym, node, self.step, action))
        elif action.kind == SELECT_COLUMN:
            self._attach(top, ColumnRef(action.idx))
        else:
            self._attach(top, TableRef(action.idx))
        self.step += 1

    def _attach(self, entry, child):
        if entry.parent_node is None:
            if isinstance(child, Node):
                self._root = child
            else:
                raise ReplayError("root must be a rule application", index=self.step)
        else:
            entry.parent_node.children.append(child)


# ---------------------------------------------------------------------------
# AST <-> actions


def ast_to_actions(ast):
    """Depth-first preorder emission."""
    out = []

    def walk(item):
        if isinstance(item, Node):
            out.append(apply_rule(item.rule))
            expected = EXPANSIONS[item.rule]
            if len(item.children) != len(expected):
                raise GrammarError(
                    f"node {item.name} has {len(item.children)} children, "
                    f"rule expects {len(expected)}")
            for c in item.children:
                walk(c)
        elif isinstance(item, ColumnRef):
            out.append(select_column(item.id))
        elif isinstance(item, TableRef):
            out.append(select_table(item.id))
        else:
            raise GrammarError(f"unbound reference in tree: {item!r}")

    walk(ast)
    return out


def actions_to_ast(actions, schema):
    """Replay a sequence into the unique tree it derives."""
    state = ReplayState(schema)
    if not actions:
        raise ReplayError("incomplete: empty action sequence", index=0,
                          expected=START_SYMBOL)
    for a in actions:
        state.apply(a)
    return state.root()


def valid_actions(state):
    return state.legal_actions()


# ---------------------------------------------------------------------------
# Parser

KEYWORDS = {
    "select", "distinct", "from", "where", "and", "or", "not", "in", "like",
    "between", "group", "by", "having", "order", "asc", "desc", "limit",
    "intersect", "union", "except", "max", "min", "count", "sum", "avg",
}
AGG_RULE = {"max": "agg_max", "min": "agg_min", "count": "agg_count",
            "sum": "agg_sum", "avg": "agg_avg"}
COMPARE_RULE = {"=": "pred_eq", "!=": "pred_ne", "<": "pred_lt",
                "<=": "pred_le", ">": "pred_gt", ">=": "pred_ge"}


@dataclass(frozen=True)
class _Tok:
    kind: str    # kw | ident | op | punct | literal
    text: str
    pos: int


def _tokenize(text):
    toks = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "'\"":
            j = text.find(ch, i + 1)
            if j < 0:
                raise SqlSyntaxError("unterminated string literal", i)
            toks.append(_Tok("literal", text[i + 1:j], i))
            i = j + 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i + 1
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            toks.append(_Tok("literal", text[i:j], i))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            low = word.lower()
            toks.append(_Tok("kw" if low in KEYWORDS else "ident", word, i))
            i = j
            continue
        two = text[i:i + 2]
        if two in ("<=", ">=", "!=", "<>"):
            toks.append(_Tok("op", "!=" if two == "<>" else two, i))
            i += 2
            continue
        if ch in "=<>":
            toks.append(_Tok("op", ch, i))
            i += 1
            continue
        if ch in "(),.*":
            toks.append(_Tok("punct", ch, i))
            i += 1
            continue
        raise SqlSyntaxError(f"unexpected character {ch!r}", i)
    return toks


class _Parser:
    def __init__(self, tokens, schema):
        self.toks = tokens
        self.schema = schema
        self.i = 0

    # -- token helpers

    def peek(self, ahead=0):
        j = self.i + ahead
        return self.toks[j] if j < len(self.toks) else None

    def at_kw(self, *words):
        t = self.peek()
        return t is not None and t.kind == "kw" and t.text.lower() in words

    def take(self):
        t = self.peek()
        if t is None:
            raise SqlSyntaxError("unexpected end of input",
                                 self.toks[-1].pos if self.toks else 0)
        self.i += 1
        return t

    def expect_kw(self, word):
        t = self.take()
        if t.kind != "kw" or t.text.lower() != word:
            raise SqlSyntaxError(f"expected {word.upper()}, got {t.text!r}", t.pos)
        return t

    def expect_punct(self, ch):
        t = self.take()
        if t.kind != "punct" or t.text != ch:
            raise SqlSyntaxError(f"expected {ch!r}, got {t.text!r}", t.pos)
        return t

    # -- grammar productions

    def parse_query(self):
        self.expect_kw("select")
        distinct = False
        if self.at_kw("distinct"):
            self.take()
            distinct = True
        item_start = self.i
        # hop over the select list to find FROM and pre-bind the table scope
        self._skip_to_from()
        from_tables = self._scan_from_tables()
        self.i = item_start

        items = [self.parse_sel_item(from_tables)]
        while self.peek() and self.peek().kind == "punct" and self.peek().text == ",":
            self.take()
            items.append(self.parse_sel_item(from_tables))
        sel_list = _cons(items, "sel_one", "sel_cons")
        select_clause = Node(RULES_BY_NAME["select_distinct" if distinct else "select_plain"].id,
                             [sel_list])

        self.expect_kw("from")
        tabs = [self._parse_table_ref()]
        while self.peek() and self.peek().kind == "punct" and self.peek().text == ",":
            self.take()
            tabs.append(self._parse_table_ref())
        from_clause = _cons(tabs, "from_one", "from_cons")

        where = Node(RULES_BY_NAME["no_where"].id)
        if self.at_kw("where"):
            self.take()
            where = Node(RULES_BY_NAME["with_where"].id,
                         [self.parse_cond(from_tables)])

        group = Node(RULES_BY_NAME["no_group"].id)
        if self.at_kw("group"):
            self.take()
            self.expect_kw("by")
            cols = [ColumnRef(self._parse_column(from_tables, allow_star=False))]
            while self.peek() and self.peek().kind == "punct" and self.peek().text == ",":
                self.take()
                cols.append(ColumnRef(self._parse_column(from_tables, allow_star=False)))
            having = Node(RULES_BY_NAME["no_having"].id)
            if self.at_kw("having"):
                self.take()
                having = Node(RULES_BY_NAME["with_having"].id,
                              [self.parse_cond(from_tables)])
            group = Node(RULES_BY_NAME["with_group"].id,
                         [_cons(cols, "col_one", "col_cons"), having])

        order = Node(RULES_BY_NAME["no_order"].id)
        if self.at_kw("order"):
            self.take()
            self.expect_kw("by")
            items = [self.parse_order_item(from_tables)]
            while self.peek() and self.peek().kind == "punct" and self.peek().text == ",":
                self.take()
                items.append(self.parse_order_item(from_tables))
            limit = Node(RULES_BY_NAME["no_limit"].id)
            if self.at_kw("limit"):
                self.take()
                t = self.take()
                if t.kind not in ("literal", "ident"):
                    raise SqlSyntaxError("expected a limit value", t.pos)
                limit = Node(RULES_BY_NAME["with_limit"].id)
            order = Node(RULES_BY_NAME["with_order"].id,
                         [_cons(items, "order_one", "order_cons"), limit])

        setop = Node(RULES_BY_NAME["no_setop"].id)
        if self.at_kw("intersect", "union", "except"):
            word = self.take().text.lower()
            setop = Node(RULES_BY_NAME[f"setop_{word}"].id, [self.parse_query()])

        return Node(RULES_BY_NAME["query"].id,
                    [select_clause, from_clause, where, group, order, setop])

    def _skip_to_from(self):
        depth = 0
        while True:
            t = self.peek()
            if t is None:
                raise SqlSyntaxError("missing FROM clause",
                                     self.toks[-1].pos if self.toks else 0)
            if t.kind == "punct" and t.text == "(":
                depth += 1
            elif t.kind == "punct" and t.text == ")":
                depth -= 1
            elif depth == 0 and t.kind == "kw" and t.text.lower() == "from":
                return
            self.i += 1

    def _scan_from_tables(self):
        """Table ids named between FROM and the next clause at depth 0."""
        save = self.i
        self.expect_kw("from")
        ids = []
        while True:
            t = self.peek()
            if t is None:
                break
            if t.kind == "kw" and t.text.lower() in (
                    "where", "group", "order", "intersect", "union", "except", "limit"):
                break
            if t.kind == "punct" and t.text == ")":
                break
            if t.kind == "ident":
                tid = self.schema.find_table(t.text)
                if tid is None:
                    raise UnknownIdentifier(t.text, t.pos)
                ids.append(tid)
            self.i += 1
        self.i = save
        return ids

    def _parse_table_ref(self):
        t = self.take()
        if t.kind != "ident":
            raise SqlSyntaxError(f"expected a table name, got {t.text!r}", t.pos)
        tid = self.schema.find_table(t.text)
        if tid is None:
            raise UnknownIdentifier(t.text, t.pos)
        return TableRef(tid)

    def _parse_column(self, scope, allow_star):
        t = self.take()
        if t.kind == "punct" and t.text == "*":
            if not allow_star:
                raise SqlSyntaxError("* not allowed here", t.pos)
            return 0
        if t.kind != "ident":
            raise SqlSyntaxError(f"expected a column name, got {t.text!r}", t.pos)
        nxt = self.peek()
        if nxt and nxt.kind == "punct" and nxt.text == ".":
            self.take()
            col = self.take()
            if col.kind != "ident":
                raise SqlSyntaxError("expected a column after '.'", col.pos)
            tid = self.schema.find_table(t.text)
            if tid is None:
                raise UnknownIdentifier(t.text, t.pos)
            cid = self.schema.find_column(col.text, [tid])
            if cid is None or self.schema.columns[cid].table != tid:
                raise UnknownIdentifier(f"{t.text}.{col.text}", col.pos)
            return cid
        cid = self.schema.find_column(t.text, scope)
        if cid is None:
            raise UnknownIdentifier(t.text, t.pos)
        return cid

    def _parse_value(self, scope):
        return Node(RULES_BY_NAME["val_col"].id,
                    [ColumnRef(self._parse_column(scope, allow_star=True))])

    def _parse_agg_value(self, scope):
        """Optional AGG( value ), as (agg rule name or None, value node)."""
        t = self.peek()
        if t and t.kind == "kw" and t.text.lower() in AGG_RULE:
            agg = self.take().text.lower()
            self.expect_punct("(")
            value = self._parse_value(scope)
            self.expect_punct(")")
            return Node(RULES_BY_NAME[AGG_RULE[agg]].id), value
        return None, self._parse_value(scope)

    def parse_sel_item(self, scope):
        agg, value = self._parse_agg_value(scope)
        if agg is None:
            return Node(RULES_BY_NAME["sel_plain"].id, [value])
        return Node(RULES_BY_NAME["sel_agg"].id, [agg, value])

    def _parse_lhs(self, scope):
        agg, value = self._parse_agg_value(scope)
        if agg is None:
            return Node(RULES_BY_NAME["lhs_plain"].id, [value])
        return Node(RULES_BY_NAME["lhs_agg"].id, [agg, value])

    def parse_order_item(self, scope):
        lhs = self._parse_lhs(scope)
        rule = "order_asc"
        if self.at_kw("desc"):
            self.take()
            rule = "order_desc"
        elif self.at_kw("asc"):
            self.take()
        return Node(RULES_BY_NAME[rule].id, [lhs])

    def parse_cond(self, scope):
        preds = [self.parse_pred(scope)]
        ops = []
        while self.at_kw("and", "or"):
            ops.append(self.take().text.lower())
            preds.append(self.parse_pred(scope))
        node = Node(RULES_BY_NAME["cond_atom"].id, [preds[-1]])
        for pred, op in zip(reversed(preds[:-1]), reversed(ops)):
            rule = "cond_and" if op == "and" else "cond_or"
            node = Node(RULES_BY_NAME[rule].id, [pred, node])
        return node

    def parse_pred(self, scope):
        lhs = self._parse_lhs(scope)
        t = self.take()
        if t.kind == "op":
            rhs = self._parse_rhs(scope)
            return Node(RULES_BY_NAME[COMPARE_RULE[t.text]].id, [lhs, rhs])
        word = t.text.lower() if t.kind == "kw" else None
        if word == "like":
            self._expect_literal()
            return Node(RULES_BY_NAME["pred_like"].id, [lhs])
        if word == "in":
            return Node(RULES_BY_NAME["pred_in"].id, [lhs, self._parse_subquery()])
        if word == "not":
            self.expect_kw("in")
            return Node(RULES_BY_NAME["pred_not_in"].id, [lhs, self._parse_subquery()])
        if word == "between":
            self._expect_literal()
            self.expect_kw("and")
            self._expect_literal()
            return Node(RULES_BY_NAME["pred_between"].id, [lhs])
        raise SqlSyntaxError(f"expected a comparison, got {t.text!r}", t.pos)

    def _expect_literal(self):
        t = self.take()
        # a bare word is accepted as a value placeholder
        if t.kind not in ("literal", "ident"):
            raise SqlSyntaxError(f"expected a literal, got {t.text!r}", t.pos)

    def _parse_rhs(self, scope):
        t = self.peek()
        if t and t.kind == "punct" and t.text == "(":
            return Node(RULES_BY_NAME["rhs_sub"].id, [self._parse_subquery()])
        if t and (t.kind == "literal"):
            self.take()
            return Node(RULES_BY_NAME["rhs_terminal"].id)
        if t and t.kind == "ident" and t.text.lower() == "terminal":
            self.take()
            return Node(RULES_BY_NAME["rhs_terminal"].id)
        if t and t.kind == "ident":
            return Node(RULES_BY_NAME["rhs_col"].id,
                        [ColumnRef(self._parse_column(scope, allow_star=False))])
        pos = t.pos if t else 0
        raise SqlSyntaxError("expected a literal, column or subquery", pos)

    def _parse_subquery(self):
        self.expect_punct("(")
        q = self.parse_query()
        self.expect_punct(")")
        return Node(RULES_BY_NAME["subquery"].id, [q])


def _cons(items, one_rule, cons_rule):
    node = Node(RULES_BY_NAME[one_rule].id, [items[-1]])
    for item in reversed(items[:-1]):
        node = Node(RULES_BY_NAME[cons_rule].id, [item, node])
    return node


def parse_sql(text, schema):
    toks = _tokenize(text)
    p = _Parser(toks, schema)
    ast = p.parse_query()
    if p.i != len(toks):
        raise SqlSyntaxError(f"trailing input {p.peek().text!r}", p.peek().pos)
    return ast


# ---------------------------------------------------------------------------
# Canonical renderer


def render_sql(ast, schema):
    """Uppercase keywords, table.column qualification, 'terminal' literals."""
    return _render(ast, schema)


def render_sql_fragment(node, schema):
    """Canonical text of any subtree (select items, predicates, ...)."""
    return _render(node, schema)


def _render(node, schema):
    name = node.name
    c = node.children
    if name == "query":
        parts = [_render(c[0], schema), "FROM " + _render(c[1], schema)]
        for child in c[2:]:
            text = _render(child, schema)
            if text:
                parts.append(text)
        return " ".join(parts)
    if name == "select_plain":
        return "SELECT " + _render(c[0], schema)
    if name == "select_distinct":
        return "SELECT DISTINCT " + _render(c[0], schema)
    if name in ("sel_one", "order_one"):
        return _render(c[0], schema)
    if name in ("sel_cons", "order_cons"):
        return _render(c[0], schema) + ", " + _render(c[1], schema)
    if name == "sel_plain":
        return _render(c[0], schema)
    if name == "sel_agg":
        return f"{_render(c[0], schema)}({_render(c[1], schema)})"
    if name.startswith("agg_"):
        return name[4:].upper()
    if name == "val_col":
        return schema.column_label(c[0].id)
    if name == "from_one":
        return schema.tables[c[0].id].name
    if name == "from_cons":
        return schema.tables[c[0].id].name + ", " + _render(c[1], schema)
    if name == "no_where":
        return ""
    if name == "with_where":
        return "WHERE " + _render(c[0], schema)
    if name == "cond_atom":
        return _render(c[0], schema)
    if name == "cond_and":
        return _render(c[0], schema) + " AND " + _render(c[1], schema)
    if name == "cond_or":
        return _render(c[0], schema) + " OR " + _render(c[1], schema)
    if name in ("pred_eq", "pred_ne", "pred_lt", "pred_le", "pred_gt", "pred_ge"):
        op = dict(pred_eq="=", pred_ne="!=", pred_lt="<", pred_le="<=",
                  pred_gt=">", pred_ge=">=")[name]
        return f"{_render(c[0], schema)} {op} {_render(c[1], schema)}"
    if name == "pred_like":
        return _render(c[0], schema) + " LIKE 'terminal'"
    if name == "pred_in":
        return _render(c[0], schema) + " IN " + _render(c[1], schema)
    if name == "pred_not_in":
        return _render(c[0], schema) + " NOT IN " + _render(c[1], schema)
    if name == "pred_between":
        return _render(c[0], schema) + " BETWEEN 'terminal' AND 'terminal'"
    if name in ("lhs_plain",):
        return _render(c[0], schema)
    if name == "lhs_agg":
        return f"{_render(c[0], schema)}({_render(c[1], schema)})"
    if name == "rhs_terminal":
        return "'terminal'"
    if name == "rhs_col":
        return schema.column_label(c[0].id)
    if name == "rhs_sub":
        return _render(c[0], schema)
    if name == "subquery":
        return "(" + _render(c[0], schema) + ")"
    if name == "no_group":
        return ""
    if name == "with_group":
        text = "GROUP BY " + _render(c[0], schema)
        having = _render(c[1], schema)
        return text + (" " + having if having else "")
    if name == "col_one":
        return schema.column_label(c[0].id)
    if name == "col_cons":
        return schema.column_label(c[0].id) + ", " + _render(c[1], schema)
    if name == "no_having":
        return ""
    if name == "with_having":
        return "HAVING " + _render(c[0], schema)
    if name == "no_order":
        return ""
    if name == "with_order":
        text = "ORDER BY " + _render(c[0], schema)
        limit = _render(c[1], schema)
        return text + (" " + limit if limit else "")
    if name == "order_asc":
        return _render(c[0], schema) + " ASC"
    if name == "order_desc":
        return _render(c[0], schema) + " DESC"
    if name == "no_limit":
        return ""
    if name == "with_limit":
        return "LIMIT 'terminal'"
    if name == "no_setop":
        return ""
    if name in ("setop_intersect", "setop_union", "setop_except"):
        return name[6:].upper() + " " + _render(c[0], schema)
    raise GrammarError(f"no renderer for rule {name}")


# ---------------------------------------------------------------------------
# Random AST generator (property-test fuel)


def random_ast(schema, rng, max_depth=6):
    """Random derivation tree; depth pressure forces termination."""

    def gen(symbol, depth):
        if symbol == "COLUMN":
            return ColumnRef(int(rng.integers(1, schema.n_columns)))
        if symbol == "COLUMN_ANY":
            return ColumnRef(int(rng.integers(0, schema.n_columns)))
        if symbol == "TABLE":
            return TableRef(int(rng.integers(0, schema.n_tables)))
        options = RULES_BY_HEAD[symbol]
        if depth <= 0:
            options = [r for r in options if len(EXPANSIONS[r.id]) ==
                       min(len(EXPANSIONS[o.id]) for o in options)]
        weights = np.array([_RULE_WEIGHTS.get(r.name, 1.0) for r in options])
        rule = options[int(rng.choice(len(options), p=weights / weights.sum()))]
        return Node(rule.id, [gen(s, depth - 1) for s in EXPANSIONS[rule.id]])

    return gen(START_SYMBOL, max_depth)


# listy rules lean short; optional clauses appear often enough for coverage
_RULE_WEIGHTS = {
    "sel_one": 3.0, "sel_cons": 1.0,
    "from_one": 4.0, "from_cons": 1.0,
    "col_one": 3.0, "col_cons": 1.0,
    "order_one": 3.0, "order_cons": 1.0,
    "cond_atom": 3.0, "cond_and": 1.0, "cond_or": 1.0,
    "no_where": 1.2, "with_where": 1.0,
    "no_group": 2.0, "with_group": 1.0,
    "no_having": 2.0, "with_having": 1.0,
    "no_order": 1.5, "with_order": 1.0,
    "no_limit": 1.5, "with_limit": 1.0,
    "no_setop": 6.0, "setop_intersect": 1.0, "setop_union": 1.0, "setop_except": 1.0,
    "rhs_terminal": 3.0, "rhs_col": 1.5, "rhs_sub": 1.0,
    "pred_in": 0.5, "pred_not_in": 0.5,
    "lhs_plain": 3.0, "lhs_agg": 1.0,
}

"""Database schemas, question-schema string linking, and relation matrices.

The joint sequence a relation matrix describes is always ordered
[question positions | columns | tables], with the star pseudo-column at
column id 0. Entries index into the closed relation-type enum shipped in
data/relation_types.json.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

COLUMN_TYPES = ("text", "number", "time", "boolean", "others")


def _load_data(name):
    with resources.files("speechsql.data").joinpath(name).open("r") as fh:
        return json.load(fh)


RELATION_TYPES = tuple(_load_data("relation_types.json")["types"])
REL = {name: i for i, name in enumerate(RELATION_TYPES)}
N_RELATIONS = len(RELATION_TYPES)

_QQ_CLIP = 4  # question-question distances bucketed to [-4, 4]


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Column:
    id: int
    table: int          # owning table id; -1 for the star pseudo-column
    name: str
    tokens: tuple
    type: str
    pk: bool


@dataclass(frozen=True)
class Table:
    id: int
    name: str
    tokens: tuple
    columns: tuple      # global column ids, star excluded


class Schema:
    """Tables, columns (global ids, star first) and foreign keys."""

    def __init__(self, db_id, tables, columns, foreign_keys):
        self.db_id = db_id
        self.tables = tables
        self.columns = columns
        self.foreign_keys = foreign_keys
        self._validate()

    def _validate(self):
        for t in self.tables:
            if not t.name:
                raise SchemaError("empty table name")
        for c in self.columns[1:]:
            if not c.name:
                raise SchemaError("empty column name")
            if not 0 <= c.table < len(self.tables):
                raise SchemaError(f"column {c.name!r} has no owning table")
        n = len(self.columns)
        for a, b in self.foreign_keys:
            if not (1 <= a < n and 1 <= b < n):
                raise SchemaError(f"foreign key endpoint out of range: {(a, b)}")

    @property
    def n_columns(self):
        return len(self.columns)

    @property
    def n_tables(self):
        return len(self.tables)

    # -- name resolution ---------------------------------------------------

    def find_table(self, name):
        low = name.lower()
        for t in self.tables:
            if t.name.lower() == low:
                return t.id
        return None

    def find_column(self, name, table_ids=None):
        """Resolve a bare column name; search order is the given tables,
        then the whole schema."""
        low = name.lower()
        if table_ids:
            for tid in table_ids:
                for cid in self.tables[tid].columns:
                    if self.columns[cid].name.lower() == low:
                        return cid
        for c in self.columns[1:]:
            if c.name.lower() == low:
                return c.id
        return None

    def column_label(self, cid):
        c = self.columns[cid]
        if cid == 0:
            return "*"
        return f"{self.tables[c.table].name}.{c.name}"

    # -- serialization ------------------------------------------------------

    @classmethod
    def from_dict(cls, d):
        tables, columns = [], [Column(0, -1, "*", ("*",), "others", False)]
        for ti, td in enumerate(d["tables"]):
            ids = []
            for cd in td["columns"]:
                cid = len(columns)
                columns.append(Column(cid, ti, cd["name"],
                                      tuple(tokenize_name(cd["name"])),
                                      cd.get("type", "others"),
                                      bool(cd.get("pk", False))))
                ids.append(cid)
            tables.append(Table(ti, td["name"],
                                tuple(tokenize_name(td["name"])), tuple(ids)))
        schema = cls(d["db_id"], tables, columns, [])
        fks = []
        for src, dst in d.get("foreign_keys", []):
            fks.append((schema._qualified_column(src), schema._qualified_column(dst)))
        schema.foreign_keys = fks
        schema._validate()
        return schema

    def _qualified_column(self, ref):
        tab, _, col = ref.partition(".")
        tid = self.find_table(tab)
        if tid is None:
            raise SchemaError(f"unknown table in foreign key: {ref!r}")
        cid = self.find_column(col, [tid])
        if cid is None or self.columns[cid].table != tid:
            raise SchemaError(f"unknown column in foreign key: {ref!r}")
        return cid

    def to_dict(self):
        return {
            "db_id": self.db_id,
            "tables": [
                {"name": t.name,
                 "columns": [{"name": self.columns[c].name,
                              "type": self.columns[c].type,
                              "pk": self.columns[c].pk}
                             for c in t.columns]}
                for t in self.tables
            ],
            "foreign_keys": [
                [self.column_label(a), self.column_label(b)]
                for a, b in self.foreign_keys
            ],
        }

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


_CAMEL = re.compile(r"(?<=[a-z0-9])(?=[A-Z])|(?<=[A-Z])(?=[A-Z][a-z])")


def tokenize_name(name):
    """Split an identifier into lowercase word tokens."""
    parts = re.split(r"[^0-9A-Za-z]+", name)
    out = []
    for part in parts:
        for word in _CAMEL.split(part):
            if word:
                out.append(word.lower())
    return out


def lemmatize(token):
    """Strip regular English plural/verb endings; lookup-free and rough."""
    t = token
    if len(t) > 4 and t.endswith("ies"):
        return t[:-3] + "y"
    if len(t) > 3 and t.endswith("es") and t[-3] in "sxz":
        return t[:-2]
    if len(t) > 3 and t.endswith("s") and not t.endswith(("ss", "us", "is")):
        return t[:-1]
    if len(t) > 5 and t.endswith("ing"):
        return t[:-3]
    if len(t) > 4 and t.endswith("ed"):
        return t[:-2]
    return t


# ---------------------------------------------------------------------------
# Question-schema linking


@dataclass(frozen=True)
class Link:
    kind: str      # "column" | "table"
    id: int
    grade: str     # "exact" | "partial"


class LinkAnnotation:
    """Per question-position lists of matched schema items."""

    def __init__(self, n_positions):
        self.matches = [[] for _ in range(n_positions)]

    def add(self, start, length, link):
        for i in range(start, start + length):
            self.matches[i].append(link)

    def __len__(self):
        return len(self.matches)

    def is_empty(self):
        return all(not m for m in self.matches)


def _is_subsequence(needle, hay):
    it = iter(hay)
    return all(tok in it for tok in needle)


def string_link(question_tokens, schema, max_ngram=5):
    """Greedy left-to-right longest-first n-gram matching of lemmatized
    question tokens against full (exact) or partial schema item names."""
    toks = [lemmatize(t.lower()) for t in question_tokens]
    items = []
    for t in schema.tables:
        items.append(("table", t.id, tuple(lemmatize(x) for x in t.tokens)))
    for c in schema.columns[1:]:
        items.append(("column", c.id, tuple(lemmatize(x) for x in c.tokens)))

    ann = LinkAnnotation(len(toks))
    i = 0
    while i < len(toks):
        matched_len = 0
        for n in range(min(max_ngram, len(toks) - i), 0, -1):
            gram = tuple(toks[i:i + n])
            exact = [(k, iid) for k, iid, name in items if name == gram]
            if exact:
                for k, iid in exact:
                    ann.add(i, n, Link(k, iid, "exact"))
                matched_len = n
                break
            partial = [(k, iid) for k, iid, name in items
                       if len(gram) < len(name) and _is_subsequence(gram, name)]
            if partial:
                for k, iid in partial:
                    ann.add(i, n, Link(k, iid, "partial"))
                matched_len = n
                break
        i += matched_len if matched_len else 1
    return ann


# ---------------------------------------------------------------------------
# Relation matrices


def build_schema_relations(schema):
    """Relation block over [columns | tables]; deterministic in schema order."""
    nc, nt = schema.n_columns, schema.n_tables
    size = nc + nt
    m = np.full((size, size), REL["default"], dtype=np.int64)
    np.fill_diagonal(m, REL["self"])

    for a in range(1, nc):
        for b in range(1, nc):
            if a != b and schema.columns[a].table == schema.columns[b].table:
                m[a, b] = REL["col_col_same_table"]
    for a, b in schema.foreign_keys:
        m[a, b] = REL["col_col_fk_forward"]
        m[b, a] = REL["col_col_fk_backward"]
    for c in schema.columns[1:]:
        t = nc + c.table
        m[c.id, t] = REL["col_pk_of_table"] if c.pk else REL["col_of_table"]
        m[t, c.id] = REL["table_has_column"]
    return m


def assemble_relation_matrix(question_len, schema, links=None, max_len=512):
    """Full joint matrix over [question | columns | tables].

    Without links, question-schema entries stay at the default bucket
    (the transcript-free mode); with links, match grades map to the
    question-column / question-table relations.
    """
    q = question_len
    size = q + schema.n_columns + schema.n_tables
    if size > max_len:
        raise SchemaError(f"joint sequence length {size} exceeds max {max_len}")
    m = np.full((size, size), REL["default"], dtype=np.int64)
    m[q:, q:] = build_schema_relations(schema)

    if q:
        pos = np.arange(q)
        d = np.clip(pos[None, :] - pos[:, None], -_QQ_CLIP, _QQ_CLIP)
        qq = np.where(d < 0, REL["qq_dist_m1"] + (d + 1),
                      REL["qq_dist_p1"] + (d - 1))
        m[:q, :q] = np.where(d == 0, REL["self"], qq)

    if links is not None:
        if len(links) != q:
            raise SchemaError(f"link annotation covers {len(links)} positions, question has {q}")
        for i, matches in enumerate(links.matches):
            for link in matches:
                if link.kind == "column":
                    j = q + link.id
                    rel = REL["q_col_exact" if link.grade == "exact" else "q_col_partial"]
                else:
                    j = q + schema.n_columns + link.id
                    rel = REL["q_tab_exact" if link.grade == "exact" else "q_tab_partial"]
                m[i, j] = rel
                m[j, i] = rel
    return m

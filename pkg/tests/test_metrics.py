import json
import pathlib

import numpy as np
import pytest

from speechsql import grammar as g
from speechsql import metrics as m
from speechsql.schema import Schema

GOLDEN = pathlib.Path(__file__).parent / "golden"


@pytest.fixture
def concert():
    return Schema.from_dict({
        "db_id": "concert_singer",
        "tables": [
            {"name": "singer", "columns": [
                {"name": "Singer_ID", "type": "number", "pk": True},
                {"name": "Name", "type": "text"},
                {"name": "Country", "type": "text"},
                {"name": "Age", "type": "number"},
                {"name": "Song_Name", "type": "text"},
            ]},
            {"name": "concert", "columns": [
                {"name": "Concert_ID", "type": "number", "pk": True},
                {"name": "Theme", "type": "text"},
            ]},
        ],
    })


@pytest.fixture
def pets():
    return Schema.from_dict({
        "db_id": "pets",
        "tables": [
            {"name": "Student", "columns": [
                {"name": "StuID", "type": "number", "pk": True},
                {"name": "Fname", "type": "text"},
                {"name": "Age", "type": "number"},
            ]},
            {"name": "Has_Pet", "columns": [
                {"name": "StuID", "type": "number"},
                {"name": "PetID", "type": "number"},
            ]},
        ],
    })


# -- independent brute-force component oracle -----------------------------------
# Works on rendered text fragments and sorted lists; shares nothing with
# speechsql.metrics beyond the parse tree itself.


def _tree_items(node, one, cons):
    out = []
    while node.name == cons:
        out.append(node.children[0])
        node = node.children[1]
    out.append(node.children[0])
    return out


def _oracle_parts(ast, schema):
    sel, frm, where, group, order, setop = ast.children
    parts = {}
    items = _tree_items(sel.children[0], "sel_one", "sel_cons")
    parts["SELECT"] = (sel.name == "select_distinct",
                       sorted(g.render_sql_fragment(i, schema) for i in items))
    kw = set()
    if sel.name == "select_distinct":
        kw.add("DISTINCT")
    conns = []
    if where.name == "with_where":
        kw.add("WHERE")
        atoms, conns = _oracle_conds(where.children[0], schema)
        parts["WHERE"] = sorted(atoms)
    else:
        parts["WHERE"] = None
    hconns = []
    if group.name == "with_group":
        kw.add("GROUP BY")
        cols = sorted(schema.column_label(c.id)
                      for c in _tree_items(group.children[0], "col_one", "col_cons"))
        having = group.children[1]
        hatoms = []
        if having.name == "with_having":
            kw.add("HAVING")
            hatoms, hconns = _oracle_conds(having.children[0], schema)
        parts["GROUP"] = (cols, sorted(hatoms), sorted(hconns))
    else:
        parts["GROUP"] = None
    if order.name == "with_order":
        kw.add("ORDER BY")
        oitems = [g.render_sql_fragment(i, schema)
                  for i in _tree_items(order.children[0], "order_one", "order_cons")]
        lim = order.children[1].name == "with_limit"
        if lim:
            kw.add("LIMIT")
        parts["ORDER"] = (oitems, lim)
    else:
        parts["ORDER"] = None
    parts["AND/OR"] = (sorted(conns), sorted(hconns))
    for frag in (parts["WHERE"] or []) + (parts["GROUP"][1] if parts["GROUP"] else []):
        for word in (" NOT IN ", " IN ", " LIKE ", " BETWEEN "):
            if word in frag:
                kw.add(word.strip())
                break
    sub = None
    if setop.name != "no_setop":
        word = setop.name.split("_")[1].upper()
        kw.add(word)
        sub = _oracle_parts(setop.children[0], schema)
    parts["KEYWORD"] = kw
    parts["_setop"] = sub
    return parts


def _oracle_conds(cond, schema):
    atoms, conns = [], []
    while cond.name in ("cond_and", "cond_or"):
        atoms.append(g.render_sql_fragment(cond.children[0], schema))
        conns.append(cond.name[5:])
        cond = cond.children[1]
    atoms.append(g.render_sql_fragment(cond.children[0], schema))
    return atoms, conns


def oracle_match_components(pred, gold, schema):
    p = _oracle_parts(pred, schema)
    q = _oracle_parts(gold, schema)
    out = {}
    for name in m.COMPONENTS:
        pv = (p[name], p["_setop"][name] if p["_setop"] else None)
        gv = (q[name], q["_setop"][name] if q["_setop"] else None)
        if pv == ((None, None)) and gv == ((None, None)):
            out[name] = None
        else:
            out[name] = pv == gv
    return out


def oracle_exact(pred, gold, schema):
    return all(v is not False for v in oracle_match_components(pred, gold, schema).values())


# -- handcrafted 20-pair suite ----------------------------------------------------


def _suite(concert, pets):
    """(schema, pred sql, gold sql) rows; covers every component and the
    three published case-study pairs."""
    c, p = concert, pets
    rows = [
        # the three case-study rows: system error, then the correct system
        (c, "SELECT singer.Country, singer.Age FROM singer ORDER BY singer.Age Desc",
            "SELECT Name, Country, Age FROM singer ORDER BY Age Desc"),
        (c, "SELECT singer.Name, singer.Country, singer.Age FROM singer ORDER BY singer.Age Desc",
            "SELECT Name, Country, Age FROM singer ORDER BY Age Desc"),
        (c, "SELECT singer.Song_Name FROM singer WHERE singer.Age < 'terminal' ORDER BY singer.Song_Name Asc",
            "SELECT Song_Name FROM singer WHERE Age > (SELECT avg(Age) FROM singer)"),
        (c, "SELECT singer.Song_Name FROM singer WHERE singer.Age > (SELECT Avg(singer.Age) FROM singer)",
            "SELECT Song_Name FROM singer WHERE Age > (SELECT avg(Age) FROM singer)"),
        (p, "SELECT Student.Fname FROM Student WHERE Student.StuID NOT IN (SELECT Has_Pet.StuID FROM Has_Pet)",
            "SELECT avg(Age) from Student where stuid not in (select stuid from has_pet)"),
        (p, "SELECT Avg(Student.Age) FROM Student WHERE Student.StuID NOT IN (SELECT Has_Pet.StuID FROM Has_Pet)",
            "SELECT avg(Age) from Student where stuid not in (select stuid from has_pet)"),
        # select-item order insensitivity
        (c, "SELECT Age, Name FROM singer", "SELECT Name, Age FROM singer"),
        # conjunct order insensitivity
        (c, "SELECT Name FROM singer WHERE Age > 5 AND Country = 'x'",
            "SELECT Name FROM singer WHERE Country = 'y' AND Age > 7"),
        # and/or skeleton mismatch
        (c, "SELECT Name FROM singer WHERE Age > 5 OR Country = 'x'",
            "SELECT Name FROM singer WHERE Age > 5 AND Country = 'x'"),
        # group by + having
        (c, "SELECT Country FROM singer GROUP BY Country HAVING count(*) > 3",
            "SELECT Country FROM singer GROUP BY Country HAVING count(*) > 4"),
        (c, "SELECT Country FROM singer GROUP BY Country",
            "SELECT Country FROM singer GROUP BY Age"),
        # order direction and limit
        (c, "SELECT Name FROM singer ORDER BY Age ASC",
            "SELECT Name FROM singer ORDER BY Age DESC"),
        (c, "SELECT Name FROM singer ORDER BY Age DESC LIMIT 3",
            "SELECT Name FROM singer ORDER BY Age DESC"),
        # distinct
        (c, "SELECT DISTINCT Country FROM singer", "SELECT Country FROM singer"),
        # aggregates
        (c, "SELECT max(Age) FROM singer", "SELECT min(Age) FROM singer"),
        (c, "SELECT count(*) FROM concert", "SELECT count(*) FROM concert"),
        # set operations
        (c, "SELECT Name FROM singer INTERSECT SELECT Name FROM singer WHERE Age > 1",
            "SELECT Name FROM singer INTERSECT SELECT Name FROM singer WHERE Age > 2"),
        (c, "SELECT Name FROM singer UNION SELECT Name FROM singer",
            "SELECT Name FROM singer EXCEPT SELECT Name FROM singer"),
        # where column rhs and between / like / in
        (c, "SELECT Name FROM singer WHERE Age = Singer_ID",
            "SELECT Name FROM singer WHERE Age = Singer_ID"),
        (c, "SELECT Name FROM singer WHERE Age BETWEEN 1 AND 2 OR Name LIKE 'a%'",
            "SELECT Name FROM singer WHERE Age BETWEEN 3 AND 4 OR Name LIKE 'b%'"),
    ]
    return [(s, g.parse_sql(ps, s), g.parse_sql(gs, s)) for s, ps, gs in rows]


def test_suite_matches_bruteforce_oracle(concert, pets):
    rows = _suite(concert, pets)
    assert len(rows) == 20
    for schema, pred, gold in rows:
        got = m.match_components(pred, gold)
        want = oracle_match_components(pred, gold, schema)
        assert got == want, (g.render_sql(pred, schema), g.render_sql(gold, schema))
        assert m.exact_match(pred, gold) == oracle_exact(pred, gold, schema)


def test_case_study_rows_error_components(concert, pets):
    rows = _suite(concert, pets)
    # row 0: dropped select item -> SELECT mismatch only
    comp = m.match_components(rows[0][1], rows[0][2])
    assert comp["SELECT"] is False
    assert comp["ORDER"] is True and comp["KEYWORD"] is True
    assert m.exact_match(rows[1][1], rows[1][2]) is True
    # row 2: wrong where + spurious order by
    comp = m.match_components(rows[2][1], rows[2][2])
    assert comp["WHERE"] is False
    assert comp["ORDER"] is False
    assert comp["KEYWORD"] is False
    assert m.exact_match(rows[3][1], rows[3][2]) is True
    # row 4: wrong select aggregate
    comp = m.match_components(rows[4][1], rows[4][2])
    assert comp["SELECT"] is False
    assert comp["WHERE"] is True
    assert m.exact_match(rows[5][1], rows[5][2]) is True


def test_exact_match_reflexive_symmetric_order_insensitive(concert):
    a = g.parse_sql("SELECT Age, Name FROM singer WHERE Age > 1 AND Name = 'x'", concert)
    b = g.parse_sql("SELECT Name, Age FROM singer WHERE Name = 'q' AND Age > 9", concert)
    assert m.exact_match(a, a)
    assert m.exact_match(a, b) and m.exact_match(b, a)


def test_exact_match_schema_set_semantics(concert):
    pred = g.parse_sql("SELECT Name FROM singer", concert)
    gold = g.parse_sql("SELECT Age FROM singer", concert)
    assert not m.exact_match(pred, gold)


def test_component_f1_identical_corpora(concert):
    asts = [g.parse_sql(s, concert) for s in (
        "SELECT Name FROM singer",
        "SELECT count(*) FROM singer GROUP BY Country",
        "SELECT Name FROM singer WHERE Age > 1 ORDER BY Age DESC LIMIT 5",
    )]
    br = m.component_f1(asts, asts)
    assert br.exact_accuracy == 1.0
    assert all(v == 1.0 for v in br.scores.values())


def test_component_f1_missing_order_is_false_negative(concert):
    pred = [g.parse_sql("SELECT Name FROM singer", concert)]
    gold = [g.parse_sql("SELECT Name FROM singer ORDER BY Age ASC", concert)]
    br = m.component_f1(pred, gold)
    assert br.scores["ORDER"] == 0.0
    assert br.scores["SELECT"] == 1.0
    assert br.exact_accuracy == 0.0


def test_component_f1_against_oracle_on_suite(concert, pets):
    rows = _suite(concert, pets)
    # brute-force per-component F1 over the suite
    tally = {name: [0, 0, 0] for name in m.COMPONENTS}
    for schema, pred, gold in rows:
        p = _oracle_parts(pred, schema)
        q = _oracle_parts(gold, schema)
        for name in m.COMPONENTS:
            def present(parts):
                own = parts[name] is not None or name in ("SELECT", "AND/OR", "KEYWORD")
                sub = parts["_setop"]
                return own or (sub is not None and (
                    sub[name] is not None or name in ("SELECT", "AND/OR", "KEYWORD")))
            pv = (p[name], p["_setop"][name] if p["_setop"] else None)
            gv = (q[name], q["_setop"][name] if q["_setop"] else None)
            hit = present(p) and present(q) and pv == gv
            tally[name][0] += hit
            tally[name][1] += present(p)
            tally[name][2] += present(q)
    expect = {}
    for name, (tp, pc, gc) in tally.items():
        prec = tp / pc if pc else 0.0
        rec = tp / gc if gc else 0.0
        expect[name] = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    br = m.component_f1([r[1] for r in rows], [r[2] for r in rows])
    for name in m.COMPONENTS:
        assert br.scores[name] == pytest.approx(expect[name]), name


def test_f1_range_and_exact_identity_property(concert):
    rng = np.random.default_rng(5)
    golds = [g.random_ast(concert, rng) for _ in range(40)]
    preds = [g.random_ast(concert, rng) for _ in range(40)]
    br = m.component_f1(preds, golds)
    assert all(0.0 <= v <= 1.0 for v in br.scores.values())
    ident = m.component_f1(golds, golds)
    assert ident.exact_accuracy == 1.0
    assert all(v == 1.0 for v in ident.scores.values())


# -- difficulty ---------------------------------------------------------------------


def test_difficulty_minimal_query_easy(concert):
    assert m.difficulty(g.parse_sql("SELECT Name FROM singer", concert)) == "easy"


def test_difficulty_case_study_buckets(concert, pets):
    medium = g.parse_sql(
        "SELECT Name, Country, Age FROM singer ORDER BY Age Desc", concert)
    hard = g.parse_sql(
        "SELECT Song_Name FROM singer WHERE Age > (SELECT avg(Age) FROM singer)", concert)
    extra = g.parse_sql(
        "SELECT avg(Age) FROM Student WHERE StuID NOT IN (SELECT StuID FROM Has_Pet)", pets)
    assert m.difficulty(medium) == "medium"
    assert m.difficulty(hard) == "hard"
    assert m.difficulty(extra) == "extra"


def test_difficulty_total_and_render_stable(concert):
    rng = np.random.default_rng(9)
    for _ in range(60):
        ast = g.random_ast(concert, rng)
        bucket = m.difficulty(ast)
        assert bucket in m.DIFFICULTIES
        again = g.parse_sql(g.render_sql(ast, concert), concert)
        assert m.difficulty(again) == bucket


# -- report -------------------------------------------------------------------------


def test_report_single_correct_example(concert):
    ast = g.parse_sql("SELECT Name FROM singer", concert)
    rep = m.report([ast], [ast])
    assert rep["exact_match"] == 1.0
    assert rep["by_difficulty"] == {"easy": {"count": 1, "exact_match": 1.0}}


def test_report_bucket_accuracies_average_to_overall(concert, pets):
    rows = _suite(concert, pets)
    preds = [r[1] for r in rows]
    golds = [r[2] for r in rows]
    rep = m.report(preds, golds)
    total = sum(d["count"] * d["exact_match"] for d in rep["by_difficulty"].values())
    n = sum(d["count"] for d in rep["by_difficulty"].values())
    assert n == rep["n_examples"]
    assert total / n == pytest.approx(rep["exact_match"], abs=2e-4)


def test_report_empty_corpus_rejected():
    with pytest.raises(m.MetricsError):
        m.report([], [])


def test_report_matches_frozen_golden(concert, pets):
    rows = _suite(concert, pets)
    rep = m.report([r[1] for r in rows], [r[2] for r in rows])
    got = json.dumps(rep, indent=1, sort_keys=True) + "\n"
    frozen = (GOLDEN / "report.json").read_text()
    assert got == frozen

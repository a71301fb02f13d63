"""Tour of the SQL grammar layer: parse, canonical render, the action
bijection, legality masks, and the evaluation metrics on small examples.
"""

import numpy as np

from speechsql import grammar, metrics
from speechsql.schema import Schema

SCHEMA = Schema.from_dict({
    "db_id": "concerts",
    "tables": [
        {"name": "singer", "columns": [
            {"name": "Singer_ID", "type": "number", "pk": True},
            {"name": "Name", "type": "text"},
            {"name": "Country", "type": "text"},
            {"name": "Age", "type": "number"}]},
        {"name": "concert", "columns": [
            {"name": "Concert_ID", "type": "number", "pk": True},
            {"name": "Theme", "type": "text"},
            {"name": "Singer_ID", "type": "number"}]},
    ],
    "foreign_keys": [["concert.Singer_ID", "singer.Singer_ID"]],
})


def main():
    text = "select name, country from singer where age > 30 order by age desc limit 5"
    ast = grammar.parse_sql(text, SCHEMA)
    print("input:    ", text)
    print("canonical:", grammar.render_sql(ast, SCHEMA))

    actions = grammar.ast_to_actions(ast)
    print(f"\n{len(actions)} decoder actions (depth-first):")
    state = grammar.ReplayState(SCHEMA)
    for a in actions:
        head = state.head().symbol
        legal = len(state.legal_actions())
        if a.kind == grammar.APPLY_RULE:
            label = grammar.RULES[a.idx].name
        elif a.kind == grammar.SELECT_COLUMN:
            label = "column " + SCHEMA.column_label(a.idx)
        else:
            label = "table " + SCHEMA.tables[a.idx].name
        print(f"  frontier {head:<14} ({legal:2d} legal) -> {a.kind} {label}")
        state.apply(a)
    roundtrip = grammar.actions_to_ast(actions, SCHEMA)
    print("roundtrip equal:", roundtrip == ast)

    print("\nrandom derivations from the grammar:")
    rng = np.random.default_rng(4)
    for _ in range(4):
        print("  ", grammar.render_sql(grammar.random_ast(SCHEMA, rng), SCHEMA))

    print("\nmetrics on a near-miss pair:")
    gold = grammar.parse_sql("SELECT Name, Country, Age FROM singer ORDER BY Age DESC",
                             SCHEMA)
    pred = grammar.parse_sql("SELECT Country, Age FROM singer ORDER BY Age DESC",
                             SCHEMA)
    print("  components:", metrics.match_components(pred, gold))
    print("  exact match:", metrics.exact_match(pred, gold))
    print("  difficulty of gold:", metrics.difficulty(gold))


if __name__ == "__main__":
    main()

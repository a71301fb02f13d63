"""Small end-to-end run: synthesize a corpus, train briefly with the
adversarial speaker head, decode the held-out split and print the score
report. Scaled far below the acceptance recipe so it finishes in a
couple of minutes; bump STEPS/N_TRAIN for real quality.
"""

import tempfile

from speechsql import synth, train
from speechsql.metrics import format_report
from speechsql.model import ModelConfig, SpeechSqlModel

N_TRAIN = 300
STEPS = 300


def main():
    corpus_dir = tempfile.mkdtemp(prefix="speechsql_demo_")
    print("synthesizing corpus into", corpus_dir)
    cfg = synth.SyntheticConfig(n_train=N_TRAIN, n_test=40, seed=7)
    synth.synth_dataset(cfg, corpus_dir)
    entries, schemas, feats = synth.load_corpus(corpus_dir)

    model = SpeechSqlModel(ModelConfig.desk(), seed=0)
    print(f"model: {model.store.n_scalars():,} parameters")

    tcfg = train.TrainConfig(steps=STEPS, peak_lr=1e-3, warmup_steps=100,
                             seed=0, log_every=50)

    def show(r):
        print(f"  step {r.step:4d}  L_MLE {r.l_mle:7.3f}  L_CE {r.l_ce:6.3f} "
              f" lr {r.lr:.2e}  |g| {r.grad_norm:6.2f}")

    train.train_loop(model, entries, schemas, feats, tcfg, on_report=show)

    for split in ("train", "test_indomain", "test_ood"):
        rep, rows = train.evaluate(model, entries, schemas, feats,
                                   split=split, limit=40)
        print(f"\n== {split}")
        print(format_report(rep))
        if split != "train":
            from speechsql import grammar
            entry, pred, gold = rows[0]
            schema = schemas[entry.db_id]
            print("sample question:", entry.question)
            print("  gold:", grammar.render_sql(gold, schema))
            print("  pred:", grammar.render_sql(pred, schema))


if __name__ == "__main__":
    main()

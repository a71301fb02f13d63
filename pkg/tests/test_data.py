import os

import numpy as np
import pytest

from speechsql import features as ff
from speechsql import grammar, synth
from speechsql.schema import Schema


# -- feature files -------------------------------------------------------------


def test_feature_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(37, 16)).astype(np.float32)
    path = tmp_path / "x.w2ft"
    ff.save_features(path, arr, source_tag="synth:test")
    back, tag = ff.load_features(path)
    np.testing.assert_array_equal(back, arr)
    assert tag == "synth:test"


def test_feature_zero_frames_valid(tmp_path):
    path = tmp_path / "empty.w2ft"
    ff.save_features(path, np.zeros((0, 8), np.float32))
    back, _ = ff.load_features(path)
    assert back.shape == (0, 8)


def test_feature_bad_magic(tmp_path):
    path = tmp_path / "bad.w2ft"
    path.write_bytes(b"NOPE" + b"\x00" * 24)
    with pytest.raises(ff.FeatureFileError) as ei:
        ff.load_features(path)
    assert "magic" in str(ei.value)


def test_feature_truncated_names_bytes(tmp_path):
    path = tmp_path / "t.w2ft"
    arr = np.ones((10, 4), np.float32)
    ff.save_features(path, arr)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(ff.FeatureFileError) as ei:
        ff.load_features(path)
    assert "expected 160 bytes, got 150" in str(ei.value)


def test_inspect_features(tmp_path):
    path = tmp_path / "i.w2ft"
    ff.save_features(path, np.zeros((5, 768), np.float32), source_tag="hubert-base:L9")
    info = ff.inspect_features(path)
    assert info == {"frames": 5, "dim": 768, "source": "hubert-base:L9"}


# -- synthetic corpus -------------------------------------------------------------


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = synth.SyntheticConfig(n_schemas=4, n_train=60, n_test=20, seed=11)
    entries = synth.synth_dataset(cfg, out)
    return cfg, out, entries


def test_synth_manifest_valid_and_loadable(small_corpus):
    cfg, out, entries = small_corpus
    loaded, schemas, feats = synth.load_corpus(out)
    assert len(loaded) == len(entries) == cfg.n_train + 2 * cfg.n_test
    assert set(feats) == {e.id for e in entries}


def test_synth_gold_sql_roundtrips(small_corpus):
    _, out, entries = small_corpus
    _, schemas, _ = synth.load_corpus(out)
    for e in entries:
        ast = grammar.parse_sql(e.sql, schemas[e.db_id])
        acts = grammar.ast_to_actions(ast)
        assert grammar.actions_to_ast(acts, schemas[e.db_id]) == ast


def test_synth_split_hygiene(small_corpus):
    _, _, entries = small_corpus
    by = lambda s: [e for e in entries if e.split == s]
    train_speakers = {e.speaker_id for e in by("train")}
    train_accents = {e.accent_id for e in by("train")}
    train_dbs = {e.db_id for e in by("train")}
    ood = by("test_ood")
    assert ood
    assert not ({e.speaker_id for e in ood} & train_speakers)
    assert not ({e.accent_id for e in ood} & train_accents)
    assert not ({e.db_id for e in ood} & train_dbs)
    indomain = by("test_indomain")
    assert indomain
    assert not ({e.db_id for e in indomain} & train_dbs)
    # in-domain styles are seen styles
    assert {e.speaker_id for e in indomain} <= train_speakers


def test_synth_regeneration_byte_identical(tmp_path):
    cfg = synth.SyntheticConfig(n_schemas=3, n_train=20, n_test=8, seed=5)
    a = tmp_path / "a"
    b = tmp_path / "b"
    synth.synth_dataset(cfg, a)
    synth.synth_dataset(cfg, b)
    for sub in ("manifest.jsonl",):
        assert (a / sub).read_bytes() == (b / sub).read_bytes()
    for fn in sorted(os.listdir(a / "features")):
        assert (a / "features" / fn).read_bytes() == (b / "features" / fn).read_bytes()
    for fn in sorted(os.listdir(a / "schemas")):
        assert (a / "schemas" / fn).read_bytes() == (b / "schemas" / fn).read_bytes()


def test_synth_zero_noise_identity_style_repeats(tmp_path):
    cfg = synth.SyntheticConfig(n_schemas=3, n_train=4, n_test=2, seed=3,
                                noise_scale=0.0, bias_scale=0.0, warp_scale=0.0,
                                rate_range=(1.0, 1.0))
    codebook = synth._make_codebook(cfg)
    styles = synth._make_styles(cfg)
    tokens = ["show", "the", "age", "of", "all", "singer"]
    a = synth.render_features(tokens, styles[0], codebook, cfg,
                              np.random.default_rng(7))
    b = synth.render_features(tokens, styles[1], codebook, cfg,
                              np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_manifest_rejects_missing_feature_file(tmp_path):
    cfg = synth.SyntheticConfig(n_schemas=3, n_train=4, n_test=2, seed=2)
    entries = synth.synth_dataset(cfg, tmp_path)
    os.remove(tmp_path / entries[0].features)
    _, schemas = None, None
    loaded = synth.load_manifest(tmp_path / "manifest.jsonl")
    schemas = {s: Schema.load(tmp_path / "schemas" / f"{s}.json")
               for s in {e.db_id for e in loaded}}
    with pytest.raises(synth.ManifestError):
        synth.validate_manifest(loaded, tmp_path, schemas)


# -- augmentation -------------------------------------------------------------------


def test_augment_disabled_identity():
    feats = np.random.default_rng(0).normal(size=(50, 8)).astype(np.float32)
    cfg = synth.AugmentConfig(enabled=False)
    out = synth.augment(feats, cfg, np.random.default_rng(1))
    assert out is feats


def test_augment_length_within_rr_bounds():
    feats = np.random.default_rng(0).normal(size=(200, 8)).astype(np.float32)
    cfg = synth.AugmentConfig()
    for seed in range(20):
        out = synth.augment(feats, cfg, np.random.default_rng(seed))
        slack = 32
        assert 0.5 * len(feats) - slack <= len(out) <= 1.5 * len(feats) + slack


def test_augment_preserves_token_order_under_codebook_decoding():
    cfg = synth.SyntheticConfig(noise_scale=0.0, bias_scale=0.0, warp_scale=0.0,
                                rate_range=(1.0, 1.0))
    codebook = synth._make_codebook(cfg)
    styles = synth._make_styles(cfg)
    tokens = "show the name of all singer with age greater than value".split()
    feats = synth.render_features(tokens, styles[0], codebook, cfg,
                                  np.random.default_rng(3))
    acfg = synth.AugmentConfig()
    for seed in range(10):
        out = synth.augment(feats, acfg, np.random.default_rng(seed))
        # oracle: nearest codebook row per frame, collapse repeats
        sims = out @ codebook.T / (np.linalg.norm(out, axis=1, keepdims=True) + 1e-9)
        ids = sims.argmax(axis=1)
        collapsed = [synth.VOCABULARY[i] for i, prev in
                     zip(ids, np.concatenate([[-1], ids[:-1]])) if i != prev]
        assert collapsed == tokens, f"seed {seed}"

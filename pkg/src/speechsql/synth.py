"""Deterministic synthetic corpus: spoken-question stand-ins over small
schemas, with controllable speaker/accent styles and held-out splits.

Questions are token sequences rendered to features through a fixed
random codebook: every vocabulary word owns one vector, repeated for a
per-token duration, then pushed through the speaker's style (additive
bias, accent warp, speaking-rate resample) plus noise. Speakers, accents
and databases of the two test splits never appear in training.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from . import grammar
from . import reprogram as rp
from .features import save_features, load_features
from .schema import Schema

SPLITS = ("train", "test_indomain", "test_ood")

COLUMN_WORDS = {
    "name": "text", "age": "number", "country": "text", "salary": "number",
    "title": "text", "year": "time", "price": "number", "rating": "number",
    "city": "text", "weight": "number", "height": "number", "budget": "number",
    "score": "number", "capacity": "number", "grade": "number",
    "length": "number", "speed": "number", "area": "number",
    "population": "number", "duration": "number",
}
TABLE_WORDS = ("singer", "student", "employee", "product", "movie",
               "team", "airport", "hospital", "customer", "concert")
FUNCTION_WORDS = ("show", "the", "of", "all", "and", "count", "number",
                  "for", "each", "with", "greater", "less", "than", "value",
                  "ordered", "by", "descending", "ascending", "average",
                  "total", "highest", "lowest", "equal", "to")
VOCABULARY = tuple(sorted(set(COLUMN_WORDS) | set(TABLE_WORDS) | set(FUNCTION_WORDS)))
WORD_ID = {w: i for i, w in enumerate(VOCABULARY)}

# (question pattern, sql pattern); {t} table, {c*} columns, {n*} numeric columns
TEMPLATES = (
    ("show the {c} of all {t}", "SELECT {c} FROM {t}"),
    ("show the {c} and {c2} of all {t}", "SELECT {c}, {c2} FROM {t}"),
    ("count the number of {t}", "SELECT COUNT(*) FROM {t}"),
    ("show the average {n} of {t}", "SELECT AVG({n}) FROM {t}"),
    ("show the total {n} of {t}", "SELECT SUM({n}) FROM {t}"),
    ("show the highest {n} of {t}", "SELECT MAX({n}) FROM {t}"),
    ("show the lowest {n} of {t}", "SELECT MIN({n}) FROM {t}"),
    ("show the {c} of {t} with {n} greater than value",
     "SELECT {c} FROM {t} WHERE {n} > 'terminal'"),
    ("show the {c} of {t} with {n} less than value",
     "SELECT {c} FROM {t} WHERE {n} < 'terminal'"),
    ("show the {c} of {t} with {c2} equal to value",
     "SELECT {c} FROM {t} WHERE {c2} = 'terminal'"),
    ("show the {c} of {t} with {n} greater than value and {n2} less than value",
     "SELECT {c} FROM {t} WHERE {n} > 'terminal' AND {n2} < 'terminal'"),
    ("show all {t} ordered by {c} descending",
     "SELECT * FROM {t} ORDER BY {c} DESC"),
    ("show all {t} ordered by {c} ascending",
     "SELECT * FROM {t} ORDER BY {c} ASC"),
    ("show the number of {t} for each {c}",
     "SELECT {c}, COUNT(*) FROM {t} GROUP BY {c}"),
)


@dataclass(frozen=True)
class SyntheticConfig:
    n_schemas: int = 4
    n_train: int = 2000
    n_test: int = 300            # per test split
    n_speakers: int = 6          # training styles
    n_ood_speakers: int = 2
    n_accents: int = 3           # training accents; OOD speakers get fresh ones
    feature_dim: int = 48
    duration_frames: tuple = (2, 4)
    bias_scale: float = 0.45
    warp_scale: float = 0.08
    rate_range: tuple = (0.85, 1.2)
    ood_rates: tuple = (0.7, 1.4)
    noise_scale: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.n_schemas < 3:
            raise ValueError("need at least 3 schemas: train + two held-out")
        if self.n_ood_speakers < 1:
            raise ValueError("need at least one held-out style")


@dataclass
class ManifestEntry:
    id: str
    features: str          # path relative to the manifest
    question: str
    sql: str
    db_id: str
    speaker_id: int
    accent_id: int
    split: str

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


class ManifestError(ValueError):
    pass


def save_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def load_manifest(path):
    entries = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(ManifestEntry.from_json(line))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ManifestError(f"{path}:{i + 1}: bad manifest line: {exc}") from exc
    return entries


def validate_manifest(entries, root, schemas):
    """Check the invariants a corpus must satisfy before training."""
    train_speakers = {e.speaker_id for e in entries if e.split == "train"}
    train_accents = {e.accent_id for e in entries if e.split == "train"}
    train_dbs = {e.db_id for e in entries if e.split == "train"}
    for e in entries:
        path = os.path.join(root, e.features)
        if not os.path.exists(path):
            raise ManifestError(f"{e.id}: feature file missing: {path}")
        if e.split not in SPLITS:
            raise ManifestError(f"{e.id}: unknown split {e.split!r}")
        if e.db_id not in schemas:
            raise ManifestError(f"{e.id}: unknown db {e.db_id!r}")
        grammar.parse_sql(e.sql, schemas[e.db_id])
        if e.split == "test_ood":
            if e.speaker_id in train_speakers or e.accent_id in train_accents:
                raise ManifestError(f"{e.id}: out-of-domain style seen in training")
        if e.split in ("test_indomain", "test_ood") and e.db_id in train_dbs:
            raise ManifestError(f"{e.id}: test database {e.db_id!r} seen in training")


# ---------------------------------------------------------------------------
# Corpus generation


@dataclass
class Style:
    bias: np.ndarray
    warp: np.ndarray
    rate: float
    accent: int


def _make_codebook(cfg):
    rng = np.random.default_rng([cfg.seed, 999])
    book = rng.normal(0.0, 1.0, size=(len(VOCABULARY), cfg.feature_dim))
    book /= np.linalg.norm(book, axis=1, keepdims=True)
    return book.astype(np.float32)


def _make_styles(cfg):
    rng = np.random.default_rng([cfg.seed, 998])
    styles = []
    total = cfg.n_speakers + cfg.n_ood_speakers
    for s in range(total):
        bias = rng.normal(0.0, 1.0, cfg.feature_dim)
        bias = cfg.bias_scale * bias / np.linalg.norm(bias)
        warp = np.eye(cfg.feature_dim) + cfg.warp_scale * rng.normal(
            0.0, 1.0 / math.sqrt(cfg.feature_dim), (cfg.feature_dim, cfg.feature_dim))
        if s < cfg.n_speakers:
            accent = s % cfg.n_accents
            rate = float(rng.uniform(*cfg.rate_range))
        else:
            accent = cfg.n_accents + (s - cfg.n_speakers)
            rate = cfg.ood_rates[(s - cfg.n_speakers) % len(cfg.ood_rates)]
        styles.append(Style(bias.astype(np.float32), warp.astype(np.float32),
                            rate, accent))
    return styles


def _make_schemas(cfg):
    """Train schemas sample freely; the two held-out schemas recombine
    words the training schemas already use, so pointing at them is a
    matter of composition, not of never-trained vocabulary."""
    rng = np.random.default_rng([cfg.seed, 997])
    col_words = sorted(COLUMN_WORDS)
    numeric = [w for w in col_words if COLUMN_WORDS[w] == "number"]
    n_train = cfg.n_schemas - 2
    seen_cols, seen_tabs = set(), set()
    schemas = []
    for i in range(cfg.n_schemas):
        held_out = i >= n_train
        tab_pool = sorted(seen_tabs) if held_out else list(TABLE_WORDS)
        col_pool = sorted(seen_cols) if held_out else col_words
        num_pool = [w for w in col_pool if COLUMN_WORDS[w] == "number"]
        tables = [tab_pool[j] for j in rng.choice(len(tab_pool), size=2,
                                                  replace=False)]
        used = set()
        tds = []
        for tname in tables:
            n_cols = int(rng.integers(3, 5))
            nums = [w for w in num_pool if w not in used]
            if len(nums) < 2:   # tiny corpora: fall back to the full bank
                nums = [w for w in numeric if w not in used]
            pick = list(rng.choice(len(nums), size=2, replace=False))
            cols = [nums[j] for j in pick]
            used.update(cols)
            while len(cols) < n_cols:
                rest = [w for w in col_pool if w not in used]
                w = rest[int(rng.integers(0, len(rest)))]
                cols.append(w)
                used.add(w)
            tds.append({"name": tname,
                        "columns": [{"name": w, "type": COLUMN_WORDS[w],
                                     "pk": j == 0}
                                    for j, w in enumerate(cols)]})
        if not held_out:
            seen_cols.update(used)
            seen_tabs.update(tables)
        d = {"db_id": f"synth_{i}", "tables": tds,
             "foreign_keys": [[f"{tds[1]['name']}.{tds[1]['columns'][0]['name']}",
                               f"{tds[0]['name']}.{tds[0]['columns'][0]['name']}"]]}
        schemas.append(Schema.from_dict(d))
    return schemas


def _bind_template(schema, rng):
    """Pick a template and slot bindings; returns (tokens, sql text)."""
    while True:
        q, sql = TEMPLATES[int(rng.integers(0, len(TEMPLATES)))]
        table = schema.tables[int(rng.integers(0, schema.n_tables))]
        cols = [schema.columns[c] for c in table.columns]
        numeric = [c for c in cols if c.type == "number"]
        slots = {"t": table.name}
        need_c = "{c2}" in q or "{c}" in q
        try:
            if "{c}" in q:
                slots["c"] = cols[int(rng.integers(0, len(cols)))].name
            if "{c2}" in q:
                rest = [c for c in cols if c.name != slots.get("c")]
                slots["c2"] = rest[int(rng.integers(0, len(rest)))].name
            if "{n}" in q:
                pool = [c for c in numeric if c.name not in slots.values()]
                slots["n"] = pool[int(rng.integers(0, len(pool)))].name
            if "{n2}" in q:
                pool = [c for c in numeric if c.name not in slots.values()]
                slots["n2"] = pool[int(rng.integers(0, len(pool)))].name
        except ValueError:
            continue  # template does not bind on this table; redraw
        del need_c
        tokens = q.format(**slots).split()
        return tokens, sql.format(**slots)


def render_features(tokens, style, codebook, cfg, rng):
    """Token sequence -> styled feature matrix."""
    dur = rng.integers(cfg.duration_frames[0], cfg.duration_frames[1] + 1,
                       size=len(tokens))
    rows = np.repeat([WORD_ID[t] for t in tokens], dur)
    feats = codebook[rows]
    feats = feats @ style.warp.T + style.bias
    if style.rate != 1.0:
        feats = rp._interp_resample(feats, max(2, int(round(len(feats) / style.rate))))
    if cfg.noise_scale > 0:
        feats = feats + rng.normal(0.0, cfg.noise_scale, feats.shape)
    return feats.astype(np.float32)


def synth_dataset(cfg, out_dir):
    """Write schemas/, features/ and manifest.jsonl; returns the entries.

    Train examples use the first n_schemas-2 databases and training
    styles; test_indomain uses the next database with training styles;
    test_ood uses the last database with held-out styles only.
    """
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "schemas"), exist_ok=True)
    codebook = _make_codebook(cfg)
    styles = _make_styles(cfg)
    schemas = _make_schemas(cfg)
    for s in schemas:
        s.save(os.path.join(out_dir, "schemas", f"{s.db_id}.json"))

    n_train_schemas = cfg.n_schemas - 2
    plan = ([("train", cfg.n_train)] +
            [("test_indomain", cfg.n_test), ("test_ood", cfg.n_test)])
    entries = []
    for split_idx, (split, count) in enumerate(plan):
        for i in range(count):
            rng = np.random.default_rng([cfg.seed, split_idx, i])
            if split == "train":
                schema = schemas[int(rng.integers(0, n_train_schemas))]
                speaker = int(rng.integers(0, cfg.n_speakers))
            elif split == "test_indomain":
                schema = schemas[n_train_schemas]
                speaker = int(rng.integers(0, cfg.n_speakers))
            else:
                schema = schemas[n_train_schemas + 1]
                speaker = cfg.n_speakers + int(rng.integers(0, cfg.n_ood_speakers))
            tokens, sql = _bind_template(schema, rng)
            grammar.parse_sql(sql, schema)  # every emitted query must bind
            feats = render_features(tokens, styles[speaker], codebook, cfg, rng)
            ex_id = f"{split}_{i:05d}"
            rel = os.path.join("features", f"{ex_id}.w2ft")
            save_features(os.path.join(out_dir, rel), feats,
                          source_tag=f"synth:seed={cfg.seed}")
            entries.append(ManifestEntry(
                id=ex_id, features=rel, question=" ".join(tokens), sql=sql,
                db_id=schema.db_id, speaker_id=speaker,
                accent_id=styles[speaker].accent, split=split))
    save_manifest(os.path.join(out_dir, "manifest.jsonl"), entries)
    schema_map = {s.db_id: s for s in schemas}
    validate_manifest(entries, out_dir, schema_map)
    return entries


def load_corpus(root):
    """(entries, schemas by db_id, features by example id)."""
    entries = load_manifest(os.path.join(root, "manifest.jsonl"))
    schemas = {}
    sdir = os.path.join(root, "schemas")
    for fn in sorted(os.listdir(sdir)):
        s = Schema.load(os.path.join(sdir, fn))
        schemas[s.db_id] = s
    feats = {}
    dim = None
    for e in entries:
        arr, _ = load_features(os.path.join(root, e.features))
        if dim is None:
            dim = arr.shape[1]
        elif arr.shape[1] != dim:
            raise ManifestError(
                f"{e.id}: feature dim {arr.shape[1]} != corpus dim {dim}")
        feats[e.id] = arr
    validate_manifest(entries, root, schemas)
    return entries, schemas, feats


# ---------------------------------------------------------------------------
# Train-time feature augmentation (rhythm + per-dimension gain)


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    prob: float = 1.0            # chance an example gets perturbed at all
    gain_range: tuple = (0.9, 1.1)
    segment_frames: tuple = (19, 32)
    resample_factor: tuple = (0.5, 1.5)


def augment(feats, cfg, rng):
    """Rhythm perturbation along time plus a random per-dimension gain.
    Pitch/formant stages are waveform-only and have no analogue here."""
    if not cfg.enabled:
        return feats
    if cfg.prob < 1.0 and rng.random() >= cfg.prob:
        return feats
    rp_cfg = rp.ReprogramConfig(segment_frames=cfg.segment_frames,
                                resample_factor=cfg.resample_factor)
    out = rp.random_resample(feats, rp_cfg, rng)
    gains = rng.uniform(cfg.gain_range[0], cfg.gain_range[1],
                        size=feats.shape[1]).astype(np.float32)
    return out * gains

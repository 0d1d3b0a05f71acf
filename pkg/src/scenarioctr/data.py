"""Dataset files, time-based splitting, batching, and the synthetic generator.

Dataset files are UTF-8 JSON lines: line 1 is a header object carrying the
schema and the train/test split boundary, every further line is one record
with its fields grouped by category (``user``, ``item``, ``context``) plus a
``behavior`` list of per-position objects and a ``label``. The context object
carries the scenario id and the record's integer timestamp ``ts``; records
with ``ts`` below the boundary form the train split.

The synthetic generator builds one preference vector per scenario whose
pairwise cosines exactly realize a requested similarity matrix, then samples
click events whose probability combines a shared user-item affinity with a
scenario-weighted affinity along the scenario's salient dimensions. Behavior
sequences replay the user's previously observed positive items, newest first.
"""

import json
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from .errors import ConfigError, DataFormatError
from .features import ExampleRecord, FeatureSchema, FieldSpec

DATASET_FORMAT = "scenarioctr.dataset.v1"

_CATEGORY_BUCKET = {"UserProfile": "user", "ItemProfile": "item", "Context": "context"}


@dataclass
class Dataset:
    """Ordered records with timestamps and a split boundary."""

    schema: FeatureSchema
    records: list
    timestamps: np.ndarray
    split_ts: int

    @property
    def n(self):
        return len(self.records)

    def train_records(self):
        return [r for r, t in zip(self.records, self.timestamps) if t < self.split_ts]

    def test_records(self):
        return [r for r, t in zip(self.records, self.timestamps) if t >= self.split_ts]

    def validate(self):
        for r in self.records:
            r.validate(self.schema)
        train_ts = [t for t in self.timestamps if t < self.split_ts]
        test_ts = [t for t in self.timestamps if t >= self.split_ts]
        if train_ts and test_ts and max(train_ts) >= min(test_ts):
            raise DataFormatError("train records must strictly precede test records")
        return self


def _record_to_obj(schema, record, ts):
    obj = {"user": {}, "item": {}, "context": {}, "behavior": [], "label": record.label}
    for f in schema.categorical_fields:
        if f.name == schema.scenario_field:
            continue
        obj[_CATEGORY_BUCKET[f.category]][f.name] = record.categorical[f.name]
    for f in schema.numerical_fields:
        obj[_CATEGORY_BUCKET[f.category]][f.name] = record.numerical[f.name]
    seq_fields = schema.sequence_fields
    if seq_fields:
        lengths = {len(record.behavior[f.name]) for f in seq_fields}
        if len(lengths) > 1:
            raise DataFormatError("sequence fields must share one length per record")
        for pos in range(lengths.pop()):
            obj["behavior"].append({f.name: record.behavior[f.name][pos] for f in seq_fields})
    obj["context"][schema.scenario_field] = record.scenario_id
    obj["context"]["ts"] = int(ts)
    return obj


def _record_from_obj(schema, obj):
    context = obj.get("context", {})
    buckets = {"UserProfile": obj.get("user", {}), "ItemProfile": obj.get("item", {}),
               "Context": context}
    cat, num = {}, {}
    for f in schema.categorical_fields:
        if f.name == schema.scenario_field:
            continue
        try:
            cat[f.name] = int(buckets[f.category][f.name])
        except KeyError:
            raise DataFormatError(f"record missing field {f.name!r}") from None
    for f in schema.numerical_fields:
        try:
            num[f.name] = float(buckets[f.category][f.name])
        except KeyError:
            raise DataFormatError(f"record missing field {f.name!r}") from None
    positions = obj.get("behavior", [])
    beh = {f.name: [int(pos[f.name]) for pos in positions if f.name in pos]
           for f in schema.sequence_fields}
    try:
        scenario = int(context[schema.scenario_field])
        ts = int(context["ts"])
        label = int(obj["label"])
    except KeyError as e:
        raise DataFormatError(f"record missing field {e.args[0]!r}") from None
    record = ExampleRecord(categorical=cat, numerical=num, behavior=beh,
                           scenario_id=scenario, label=label)
    return record, ts


def save_dataset(dataset, path):
    header = {"format": DATASET_FORMAT, "schema": dataset.schema.to_dict(),
              "split_ts": int(dataset.split_ts)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record, ts in zip(dataset.records, dataset.timestamps):
            fh.write(json.dumps(_record_to_obj(dataset.schema, record, ts),
                                sort_keys=True) + "\n")


def load_dataset(path):
    """Read a dataset file; malformed lines fail with their line number."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return Dataset(schema=None, records=[], timestamps=np.array([], dtype=np.int64),
                       split_ts=0)
    try:
        header = json.loads(lines[0])
        if header.get("format") != DATASET_FORMAT:
            raise DataFormatError(f"unsupported format {header.get('format')!r}")
        schema = FeatureSchema.from_dict(header["schema"])
        split_ts = int(header["split_ts"])
    except (json.JSONDecodeError, KeyError, TypeError, DataFormatError, ConfigError) as e:
        raise DataFormatError(f"{path}:1: bad header: {e}") from None
    records, timestamps = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record, ts = _record_from_obj(schema, json.loads(line))
            record.validate(schema)
        except (json.JSONDecodeError, DataFormatError, TypeError, ValueError) as e:
            raise DataFormatError(f"{path}:{lineno}: {e}") from None
        records.append(record)
        timestamps.append(ts)
    return Dataset(schema=schema, records=records,
                   timestamps=np.array(timestamps, dtype=np.int64), split_ts=split_ts)


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic multi-scenario click generator."""

    num_scenarios: int = 3
    samples_per_scenario: tuple = (5000, 1500, 500)
    latent_dim: int = 16
    similarity: tuple = ((1.0, 0.8, 0.2), (0.8, 1.0, 0.2), (0.2, 0.2, 1.0))
    noise_rate: float = 0.05
    num_users: int = 200
    num_items: int = 100
    shared_weight: float = 1.0
    scenario_weights: tuple = 3.0
    intercept: float = 0.0
    train_fraction: float = 0.875
    global_dim: int = 12
    specific_dim: int = 4
    max_seq_len: int = 15
    seed: int = 0

    def __post_init__(self):
        N = self.num_scenarios
        if N < 2:
            raise ConfigError("need at least 2 scenarios")
        counts = tuple(int(c) for c in np.atleast_1d(self.samples_per_scenario))
        if len(counts) != N or any(c < 1 for c in counts):
            raise ConfigError(f"samples_per_scenario needs {N} counts, all >= 1")
        self.samples_per_scenario = counts
        S = np.array(self.similarity, dtype=np.float64)
        if S.shape != (N, N):
            raise ConfigError(f"similarity matrix must be {N}x{N}, got {S.shape}")
        if not np.allclose(S, S.T, atol=1e-12):
            raise ConfigError("similarity matrix must be symmetric")
        if not np.allclose(np.diag(S), 1.0, atol=1e-12):
            raise ConfigError("similarity matrix needs a unit diagonal")
        if np.linalg.eigvalsh(S).min() < -1e-9:
            raise ConfigError("similarity matrix is not positive semidefinite")
        self.similarity = tuple(tuple(row) for row in S)
        if self.latent_dim < N:
            raise ConfigError(
                f"latent_dim {self.latent_dim} cannot realize {N} preference vectors")
        if not 0.0 <= self.noise_rate <= 0.5:
            raise ConfigError("noise_rate must lie in [0, 0.5]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.num_users < 1 or self.num_items < 1:
            raise ConfigError("vocab sizes must be >= 1")
        w = np.atleast_1d(np.array(self.scenario_weights, dtype=np.float64))
        if w.size == 1:
            w = np.full(N, float(w[0]))
        if w.size != N:
            raise ConfigError(f"scenario_weights needs 1 or {N} values")
        self.scenario_weights = tuple(float(x) for x in w)

    def schema(self):
        fields = [
            FieldSpec("scenario", "Context", "categorical", vocab_size=self.num_scenarios),
            FieldSpec("user_id", "UserProfile", "categorical", vocab_size=self.num_users),
            FieldSpec("item_id", "ItemProfile", "categorical", vocab_size=self.num_items),
            FieldSpec("behavior", "UserBehavior", "sequence", vocab_size=self.num_items),
        ]
        return FeatureSchema(fields=fields, num_scenarios=self.num_scenarios,
                             scenario_field="scenario", global_dim=self.global_dim,
                             specific_dim=self.specific_dim, max_seq_len=self.max_seq_len)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclass_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator settings: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}: bad JSON: {e}") from None


def preference_vectors(spec, rng):
    """Unit vectors whose pairwise dot products equal the similarity matrix."""
    S = np.array(spec.similarity, dtype=np.float64)
    evals, evecs = np.linalg.eigh(S)
    B = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None)))
    basis, _ = np.linalg.qr(rng.normal(size=(spec.latent_dim, spec.num_scenarios)))
    return B @ basis.T


def generate_with_stats(spec):
    """Generate a dataset and report the label-distribution bookkeeping."""
    rng = np.random.default_rng(spec.seed)
    d = spec.latent_dim
    W = preference_vectors(spec, rng)
    users = rng.normal(size=(spec.num_users, d))
    items = rng.normal(size=(spec.num_items, d))
    counts = np.array(spec.samples_per_scenario)
    total = int(counts.sum())
    scen = np.repeat(np.arange(spec.num_scenarios), counts)
    rng.shuffle(scen)
    user_idx = rng.integers(0, spec.num_users, size=total)
    item_idx = rng.integers(0, spec.num_items, size=total)
    uv = users[user_idx] * items[item_idx]
    sw = np.array(spec.scenario_weights)
    z = (spec.shared_weight * uv.sum(axis=1) / np.sqrt(d)
         + sw[scen] * np.einsum("ed,ed->e", uv, W[scen])
         + spec.intercept)
    p = 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))
    raw = rng.uniform(size=total) < p
    flipped = rng.uniform(size=total) < spec.noise_rate
    labels = raw ^ flipped

    L = spec.max_seq_len
    history = {}
    records = []
    for t in range(total):
        u = int(user_idx[t])
        item = int(item_idx[t])
        past = history.get(u, [])
        records.append(ExampleRecord(
            categorical={"user_id": u, "item_id": item},
            numerical={},
            behavior={"behavior": past[-L:][::-1]},
            scenario_id=int(scen[t]),
            label=int(labels[t]),
        ))
        if labels[t]:
            history.setdefault(u, []).append(item)
    dataset = Dataset(schema=spec.schema(), records=records,
                      timestamps=np.arange(total, dtype=np.int64),
                      split_ts=int(round(total * spec.train_fraction)))
    nu = spec.noise_rate
    stats = {
        "total": total,
        "mean_p": float(p.mean()),
        "expected_positive_rate": float((p * (1.0 - 2.0 * nu) + nu).mean()),
        "positive_rate": float(labels.mean()),
        "per_scenario_counts": counts.tolist(),
        "per_scenario_positive_rate": [float(labels[scen == s].mean())
                                       for s in range(spec.num_scenarios)],
    }
    return dataset, stats


def generate_synthetic(spec):
    return generate_with_stats(spec)[0]


def batch_iter(encoded, batch_size, shuffle_seed, epoch=0):
    """Yield shuffled batches; the final partial batch is included.

    The permutation is drawn from ``default_rng([shuffle_seed, epoch])``, so a
    fixed seed reproduces the exact batch stream and each epoch reshuffles
    deterministically.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng([shuffle_seed, epoch])
    perm = rng.permutation(encoded.n)
    for start in range(0, encoded.n, batch_size):
        yield encoded.take(perm[start:start + batch_size])

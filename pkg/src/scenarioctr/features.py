"""Feature schema, record encoding, dual embeddings, and dual self-attention.

Every input record is embedded twice: once into a shared global subspace and
once into a per-scenario specific subspace. Behavior sequences additionally
pass through two multi-head self-attention blocks. The global block attends
global embeddings against themselves; the scenario block builds its queries
and keys from the (projected) specific embeddings but reads its values from
the global embeddings, so the two representations stay coupled through a
shared value source.

Output widths are fixed by the schema:

    independent_width = n_categorical * global_dim + n_numerical
                        + n_sequence * global_dim
    dependent_width   = n_categorical * specific_dim + n_sequence * global_dim

(the attention output lives in the global dimension on both paths).
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .numerics import (
    Tensor,
    concat,
    gather_rows,
    matmul,
    mul,
    new_param,
    reshape,
    softmax,
    transpose,
    tsum,
)

FIELD_CATEGORIES = ("UserProfile", "ItemProfile", "UserBehavior", "Context")
FIELD_KINDS = ("categorical", "numerical", "sequence")

MASK_BIAS = -1e9


@dataclass(frozen=True)
class FieldSpec:
    """One input field. ``vocab_size`` counts raw id values, ids in [0, vocab_size)."""

    name: str
    category: str
    kind: str
    vocab_size: int = 0

    def __post_init__(self):
        if self.category not in FIELD_CATEGORIES:
            raise ConfigError(f"field {self.name!r}: unknown category {self.category!r}")
        if self.kind not in FIELD_KINDS:
            raise ConfigError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in ("categorical", "sequence") and self.vocab_size < 1:
            raise ConfigError(f"field {self.name!r}: {self.kind} fields need vocab_size >= 1")
        if self.kind == "numerical" and self.vocab_size:
            raise ConfigError(f"field {self.name!r}: numerical fields take no vocab_size")


@dataclass
class FeatureSchema:
    """Field layout plus the embedding/scenario dimensions.

    ``scenario_field`` names the Context field whose raw value in
    [0, num_scenarios) routes each sample to its branch.
    """

    fields: list
    num_scenarios: int
    scenario_field: str
    global_dim: int = 12
    specific_dim: int = 4
    max_seq_len: int = 15

    def __post_init__(self):
        if self.global_dim < 1 or self.specific_dim < 1:
            raise ConfigError("embedding dimensions must be >= 1")
        if self.num_scenarios < 2:
            raise ConfigError("need at least 2 scenarios")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ConfigError("field names must be unique")
        if not self.categorical_fields and not self.sequence_fields:
            raise ConfigError("schema needs at least one categorical or sequence field")
        sf = self.field(self.scenario_field)
        if sf.kind != "categorical" or sf.category != "Context":
            raise ConfigError(f"scenario field {self.scenario_field!r} must be a Context categorical")
        if sf.vocab_size < self.num_scenarios:
            raise ConfigError(
                f"scenario field vocab {sf.vocab_size} cannot hold {self.num_scenarios} scenarios")

    def field(self, name):
        for f in self.fields:
            if f.name == name:
                return f
        raise ConfigError(f"unknown field {name!r}")

    @property
    def categorical_fields(self):
        return [f for f in self.fields if f.kind == "categorical"]

    @property
    def numerical_fields(self):
        return [f for f in self.fields if f.kind == "numerical"]

    @property
    def sequence_fields(self):
        return [f for f in self.fields if f.kind == "sequence"]

    @property
    def independent_width(self):
        return (len(self.categorical_fields) * self.global_dim
                + len(self.numerical_fields)
                + len(self.sequence_fields) * self.global_dim)

    @property
    def dependent_width(self):
        return (len(self.categorical_fields) * self.specific_dim
                + len(self.sequence_fields) * self.global_dim)

    def table_rows(self, name):
        """Embedding-table row count: vocab plus the reserved padding/OOV row 0."""
        return self.field(name).vocab_size + 1

    def to_dict(self):
        return {
            "fields": [{"name": f.name, "category": f.category, "kind": f.kind,
                        "vocab_size": f.vocab_size} for f in self.fields],
            "num_scenarios": self.num_scenarios,
            "scenario_field": self.scenario_field,
            "global_dim": self.global_dim,
            "specific_dim": self.specific_dim,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            fields = [FieldSpec(**f) for f in d["fields"]]
            rest = {k: d[k] for k in
                    ("num_scenarios", "scenario_field", "global_dim", "specific_dim", "max_seq_len")
                    if k in d}
            return cls(fields=fields, **rest)
        except (KeyError, TypeError) as e:
            raise ConfigError(f"bad schema dict: {e}") from None

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class ExampleRecord:
    """One raw sample. The scenario field's value lives in ``scenario_id`` only."""

    categorical: dict
    numerical: dict
    behavior: dict
    scenario_id: int
    label: int

    def validate(self, schema):
        if not 0 <= self.scenario_id < schema.num_scenarios:
            raise DataFormatError(
                f"scenario_id {self.scenario_id} out of range [0, {schema.num_scenarios})")
        if self.label not in (0, 1):
            raise DataFormatError(f"label must be 0 or 1, got {self.label!r}")
        for f in schema.categorical_fields:
            if f.name != schema.scenario_field and f.name not in self.categorical:
                raise DataFormatError(f"missing categorical field {f.name!r}")
        for f in schema.numerical_fields:
            if f.name not in self.numerical:
                raise DataFormatError(f"missing numerical field {f.name!r}")
        for f in schema.sequence_fields:
            seq = self.behavior.get(f.name)
            if seq is None:
                raise DataFormatError(f"missing behavior sequence {f.name!r}")
            if len(seq) > schema.max_seq_len:
                raise DataFormatError(
                    f"sequence {f.name!r} length {len(seq)} exceeds max {schema.max_seq_len}")

    def to_dict(self):
        return {"categorical": self.categorical, "numerical": self.numerical,
                "behavior": self.behavior, "scenario_id": self.scenario_id,
                "label": self.label}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(categorical=dict(d["categorical"]), numerical=dict(d["numerical"]),
                       behavior={k: list(v) for k, v in d["behavior"].items()},
                       scenario_id=int(d["scenario_id"]), label=int(d["label"]))
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"bad record dict: {e}") from None


@dataclass
class NormStats:
    """Per-field mean/std for numerical normalization, fit on the train split."""

    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, schema, records):
        stats = cls()
        for f in schema.numerical_fields:
            vals = np.array([r.numerical[f.name] for r in records], dtype=np.float64)
            stats.mean[f.name] = float(vals.mean()) if len(vals) else 0.0
            sd = float(vals.std()) if len(vals) else 1.0
            stats.std[f.name] = sd if sd > 1e-12 else 1.0
        return stats

    def to_dict(self):
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=dict(d.get("mean", {})), std=dict(d.get("std", {})))


@dataclass
class EncodedExample:
    cat: dict  # field -> table row index (already shifted past the reserved row)
    num: np.ndarray  # (n_num,)
    seq: dict  # field -> (L,) int64, right-padded with 0
    seq_mask: dict  # field -> (L,) float64, 1.0 on valid positions
    scenario_id: int
    label: float


def _encode_id(raw, vocab_size):
    """Shift raw ids past the reserved row; out-of-vocabulary collapses to 0."""
    return raw + 1 if 0 <= raw < vocab_size else 0


def encode_record(schema, record, stats=None):
    """Turn one raw record into index/array form.

    Numericals are z-scored with ``stats`` (train-split statistics); sequences
    are right-padded to ``max_seq_len`` with a validity mask.
    """
    record.validate(schema)
    stats = stats or NormStats()
    cat = {}
    for f in schema.categorical_fields:
        if f.name == schema.scenario_field:
            cat[f.name] = record.scenario_id + 1
        else:
            cat[f.name] = _encode_id(record.categorical[f.name], f.vocab_size)
    num = np.array(
        [(record.numerical[f.name] - stats.mean.get(f.name, 0.0)) / stats.std.get(f.name, 1.0)
         for f in schema.numerical_fields], dtype=np.float64)
    L = schema.max_seq_len
    seq, seq_mask = {}, {}
    for f in schema.sequence_fields:
        ids = record.behavior[f.name]
        row = np.zeros(L, dtype=np.int64)
        mask = np.zeros(L, dtype=np.float64)
        for i, raw in enumerate(ids):
            row[i] = _encode_id(raw, f.vocab_size)
            mask[i] = 1.0
        seq[f.name] = row
        seq_mask[f.name] = mask
    return EncodedExample(cat=cat, num=num, seq=seq, seq_mask=seq_mask,
                          scenario_id=record.scenario_id, label=float(record.label))


@dataclass
class EncodedDataset:
    """Column-stacked encoded examples; also serves as the batch type."""

    schema: FeatureSchema
    cat: dict  # field -> (B,) int64
    num: np.ndarray  # (B, n_num)
    seq: dict  # field -> (B, L) int64
    seq_mask: dict  # field -> (B, L) float64
    scenario: np.ndarray  # (B,) int64
    label: np.ndarray  # (B,) float64

    @property
    def n(self):
        return len(self.scenario)

    @classmethod
    def stack(cls, schema, examples):
        cat = {f.name: np.array([e.cat[f.name] for e in examples], dtype=np.int64)
               for f in schema.categorical_fields}
        num = (np.stack([e.num for e in examples])
               if schema.numerical_fields else np.zeros((len(examples), 0)))
        seq = {f.name: np.stack([e.seq[f.name] for e in examples])
               for f in schema.sequence_fields}
        seq_mask = {f.name: np.stack([e.seq_mask[f.name] for e in examples])
                    for f in schema.sequence_fields}
        return cls(schema=schema, cat=cat, num=num, seq=seq, seq_mask=seq_mask,
                   scenario=np.array([e.scenario_id for e in examples], dtype=np.int64),
                   label=np.array([e.label for e in examples], dtype=np.float64))

    def take(self, indices):
        idx = np.asarray(indices)
        return EncodedDataset(
            schema=self.schema,
            cat={k: v[idx] for k, v in self.cat.items()},
            num=self.num[idx],
            seq={k: v[idx] for k, v in self.seq.items()},
            seq_mask={k: v[idx] for k, v in self.seq_mask.items()},
            scenario=self.scenario[idx],
            label=self.label[idx],
        )


class RecordEncoder:
    """Fit normalization on the train split, then encode records or whole lists."""

    def __init__(self, schema, stats=None):
        self.schema = schema
        self.stats = stats or NormStats()

    def fit(self, records):
        self.stats = NormStats.fit(self.schema, records)
        return self

    def encode(self, record):
        return encode_record(self.schema, record, self.stats)

    def encode_all(self, records):
        return EncodedDataset.stack(self.schema, [self.encode(r) for r in records])


class DualEmbeddings:
    """Global and scenario-specific embedding tables for every id field.

    The global table for a field has ``vocab_size + 1`` rows; the specific
    table stores all scenario slices in one flat ``num_scenarios * rows``
    array so one lookup resolves to row ``scenario * rows + id``. Row 0 of
    every scenario slice is the shared padding/OOV row; it is initialized to
    zero and never reported as touched, so the optimizer keeps it frozen.
    """

    def __init__(self, schema, rng, with_specific=True):
        self.schema = schema
        self.with_specific = with_specific
        self.global_tables = {}
        self.specific_tables = {}
        K_g, K_l, N = schema.global_dim, schema.specific_dim, schema.num_scenarios
        for f in schema.categorical_fields + schema.sequence_fields:
            rows = schema.table_rows(f.name)
            g = rng.normal(0.0, 0.01, size=(rows, K_g))
            g[0] = 0.0
            self.global_tables[f.name] = Tensor(g, requires_grad=True)
            if with_specific:
                s = rng.normal(0.0, 0.01, size=(N * rows, K_l))
                s[0::rows] = 0.0
                self.specific_tables[f.name] = Tensor(s, requires_grad=True)

    def lookup_global(self, name, idx):
        return gather_rows(self.global_tables[name], idx)

    def lookup_specific(self, name, idx, scenario):
        rows = self.schema.table_rows(name)
        scen = scenario.reshape(scenario.shape + (1,) * (idx.ndim - scenario.ndim))
        flat = np.where(idx > 0, scen * rows + idx, 0)
        return gather_rows(self.specific_tables[name], flat)

    def params(self):
        out = {}
        for name, t in self.global_tables.items():
            out[f"embed.global.{name}"] = t
        for name, t in self.specific_tables.items():
            out[f"embed.specific.{name}"] = t
        return out

    def touched_rows(self, batch):
        """Map table tensors to the unique non-reserved rows this batch reads."""
        out = {}
        for f in self.schema.categorical_fields + self.schema.sequence_fields:
            name = f.name
            idx = batch.cat[name] if name in batch.cat else batch.seq[name]
            flat_idx = idx.ravel()
            live = flat_idx[flat_idx > 0]
            rows = self.schema.table_rows(name)
            out[self.global_tables[name]] = np.unique(live)
            if self.with_specific:
                scen = np.broadcast_to(
                    batch.scenario.reshape((-1,) + (1,) * (idx.ndim - 1)), idx.shape).ravel()
                flat_specific = (scen * rows + flat_idx)[flat_idx > 0]
                out[self.specific_tables[name]] = np.unique(flat_specific)
        return out


def embed_dual(tables, encoded):
    """Look up every id field in both subspaces.

    Returns ``(global_vecs, specific_vecs)`` keyed by field name; sequence
    fields yield per-position matrices. Two records with the same id but
    different scenarios share the global vector and resolve to disjoint rows
    of the specific table.
    """
    schema = tables.schema
    global_vecs, specific_vecs = {}, {}
    for f in schema.categorical_fields:
        idx = encoded.cat[f.name]
        global_vecs[f.name] = tables.lookup_global(f.name, idx)
        if tables.with_specific:
            specific_vecs[f.name] = tables.lookup_specific(f.name, idx, encoded.scenario)
    for f in schema.sequence_fields:
        idx = encoded.seq[f.name]
        global_vecs[f.name] = tables.lookup_global(f.name, idx)
        if tables.with_specific:
            specific_vecs[f.name] = tables.lookup_specific(f.name, idx, encoded.scenario)
    return global_vecs, specific_vecs


class AttentionParams:
    """Projection matrices for one multi-head self-attention block."""

    def __init__(self, dim, heads, rng):
        if dim % heads != 0:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = new_param(rng, dim, dim)
        self.wk = new_param(rng, dim, dim)
        self.wv = new_param(rng, dim, dim)
        self.wo = new_param(rng, dim, dim)

    def params(self, prefix):
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


def multi_head_attention(params, q_src, k_src, v_src, mask, return_weights=False):
    """Scaled dot-product attention with ``params.heads`` heads.

    Accepts ``(L, d)`` sequences or ``(B, L, d)`` batches. ``mask`` marks valid
    positions with 1; masked key positions receive a large negative score bias
    before the softmax and masked query rows are zeroed on output.
    """
    single = isinstance(q_src, Tensor) and q_src.ndim == 2
    if single:
        q_src = reshape(q_src, (1,) + q_src.shape)
        k_src = reshape(k_src, (1,) + k_src.shape)
        v_src = reshape(v_src, (1,) + v_src.shape)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if mask.ndim == 1:
        mask = mask[None, :]
    B, L, d = q_src.shape
    H, dk = params.heads, params.head_dim

    def heads(x, w):
        proj = matmul(x, w)
        return transpose(reshape(proj, (B, L, H, dk)), (0, 2, 1, 3))

    q = heads(q_src, params.wq)
    k = heads(k_src, params.wk)
    v = heads(v_src, params.wv)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    key_bias = np.where(mask > 0.0, 0.0, MASK_BIAS)
    scores = scores + key_bias[:, None, None, :]
    weights = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (B, L, d))
    out = mul(matmul(ctx, params.wo), mask[:, :, None])
    if single:
        out = reshape(out, (L, d))
    if return_weights:
        w = weights.data[0] if single else weights.data
        return out, w
    return out


def masked_mean_pool(x, mask):
    """Mean over valid sequence positions; an empty sequence pools to zeros."""
    mask = np.asarray(mask, dtype=np.float64)
    counts = np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
    return mul(tsum(mul(x, mask[..., None]), axis=-2), 1.0 / counts)


class FeatureModule:
    """Dual embeddings plus the two attention blocks; emits both feature vectors."""

    def __init__(self, schema, rng, heads=4, with_specific=True):
        self.schema = schema
        self.with_specific = with_specific
        self.embeddings = DualEmbeddings(schema, rng, with_specific)
        self.attn_global = AttentionParams(schema.global_dim, heads, rng)
        if with_specific:
            self.attn_scene = AttentionParams(schema.global_dim, heads, rng)
            self.proj = new_param(rng, schema.specific_dim, schema.global_dim)

    def params(self):
        out = dict(self.embeddings.params())
        out.update(self.attn_global.params("attn.global"))
        if self.with_specific:
            out.update(self.attn_scene.params("attn.scene"))
            out["attn.proj"] = self.proj
        return out

    def touched_rows(self, batch):
        return self.embeddings.touched_rows(batch)

    def forward(self, batch):
        schema = self.schema
        global_vecs, specific_vecs = embed_dual(self.embeddings, batch)
        indep_parts = [global_vecs[f.name] for f in schema.categorical_fields]
        if schema.numerical_fields:
            indep_parts.append(Tensor(batch.num))
        dep_parts = ([specific_vecs[f.name] for f in schema.categorical_fields]
                     if self.with_specific else None)
        for f in schema.sequence_fields:
            eg = global_vecs[f.name]
            mask = batch.seq_mask[f.name]
            pooled_g = masked_mean_pool(
                multi_head_attention(self.attn_global, eg, eg, eg, mask), mask)
            indep_parts.append(pooled_g)
            if self.with_specific:
                ql = matmul(specific_vecs[f.name], self.proj)
                pooled_s = masked_mean_pool(
                    multi_head_attention(self.attn_scene, ql, ql, eg, mask), mask)
                dep_parts.append(pooled_s)
        indep = concat(indep_parts, axis=1)
        dep = concat(dep_parts, axis=1) if self.with_specific else None
        return indep, dep


def build_feature_vectors(module, encoded):
    """Run the feature module over one batch.

    Returns ``(scenario_independent, scenario_dependent)``; the second entry is
    ``None`` when the module was built without the specific subspace.
    """
    return module.forward(encoded)

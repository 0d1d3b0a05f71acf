"""Dataset files, the synthetic generator, and batch iteration."""

import numpy as np
import pytest

from scenarioctr.data import (
    Dataset,
    SyntheticSpec,
    batch_iter,
    generate_synthetic,
    generate_with_stats,
    load_dataset,
    preference_vectors,
    save_dataset,
)
from scenarioctr.errors import ConfigError, DataFormatError
from scenarioctr.features import RecordEncoder

from conftest import make_record, small_schema


def tiny_spec(**overrides):
    kw = dict(num_scenarios=3, samples_per_scenario=(60, 30, 10), latent_dim=8,
              num_users=25, num_items=20, max_seq_len=5, seed=7)
    kw.update(overrides)
    return SyntheticSpec(**kw)


class TestSyntheticSpec:
    def test_non_psd_similarity_rejected(self):
        bad = ((1.0, 0.9, -0.9), (0.9, 1.0, 0.9), (-0.9, 0.9, 1.0))
        with pytest.raises(ConfigError, match="positive semidefinite"):
            tiny_spec(similarity=bad)

    def test_asymmetric_similarity_rejected(self):
        bad = ((1.0, 0.5, 0.2), (0.4, 1.0, 0.2), (0.2, 0.2, 1.0))
        with pytest.raises(ConfigError, match="symmetric"):
            tiny_spec(similarity=bad)

    def test_non_unit_diagonal_rejected(self):
        bad = ((0.9, 0.5, 0.2), (0.5, 1.0, 0.2), (0.2, 0.2, 1.0))
        with pytest.raises(ConfigError, match="diagonal"):
            tiny_spec(similarity=bad)

    def test_sample_counts_must_be_positive(self):
        with pytest.raises(ConfigError, match="samples_per_scenario"):
            tiny_spec(samples_per_scenario=(10, 0, 5))

    def test_latent_dim_must_cover_scenarios(self):
        with pytest.raises(ConfigError, match="latent_dim"):
            tiny_spec(latent_dim=2)

    def test_unknown_setting_rejected(self):
        with pytest.raises(ConfigError, match="temperature"):
            SyntheticSpec.from_dict({"temperature": 2.0})

    def test_scalar_scenario_weight_broadcasts(self):
        spec = tiny_spec(scenario_weights=2.0)
        assert spec.scenario_weights == (2.0, 2.0, 2.0)

    def test_schema_mirrors_vocab_sizes(self):
        schema = tiny_spec().schema()
        assert schema.field("user_id").vocab_size == 25
        assert schema.field("behavior").vocab_size == 20
        assert schema.num_scenarios == 3


class TestPreferenceVectors:
    def test_pairwise_cosines_realize_similarity(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            spec = tiny_spec(similarity=((1.0, 0.8, 0.2), (0.8, 1.0, 0.2),
                                         (0.2, 0.2, 1.0)), seed=trial)
            W = preference_vectors(spec, rng)
            G = W @ W.T
            np.testing.assert_allclose(G, np.array(spec.similarity), atol=1e-10)
            norms = np.linalg.norm(W, axis=1)
            cos = G / np.outer(norms, norms)
            np.testing.assert_allclose(cos, np.array(spec.similarity), atol=0.05)


class TestGenerator:
    def test_same_seed_gives_byte_identical_files(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset(generate_synthetic(tiny_spec()), a)
        save_dataset(generate_synthetic(tiny_spec()), b)
        assert a.read_bytes() == b.read_bytes()
        save_dataset(generate_synthetic(tiny_spec(seed=8)), b)
        assert a.read_bytes() != b.read_bytes()

    def test_scenario_sample_counts_are_exact(self):
        ds = generate_synthetic(tiny_spec())
        got = np.bincount([r.scenario_id for r in ds.records], minlength=3)
        np.testing.assert_array_equal(got, [60, 30, 10])

    def test_every_record_satisfies_invariants(self):
        ds = generate_synthetic(tiny_spec())
        ds.validate()

    def test_time_split_orders_train_before_test(self):
        ds = generate_synthetic(tiny_spec())
        train_ts = ds.timestamps[ds.timestamps < ds.split_ts]
        test_ts = ds.timestamps[ds.timestamps >= ds.split_ts]
        assert len(train_ts) and len(test_ts)
        assert train_ts.max() < test_ts.min()

    def test_positive_rate_tracks_expectation(self):
        spec = tiny_spec(samples_per_scenario=(20000, 20000, 10000),
                         num_users=400, num_items=200, seed=3)
        _, stats = generate_with_stats(spec)
        assert abs(stats["positive_rate"] - stats["expected_positive_rate"]) < 0.02

    def test_behavior_replays_observed_positives_newest_first(self):
        ds = generate_synthetic(tiny_spec(seed=11))
        seen = {}
        for r in ds.records:
            u = r.categorical["user_id"]
            expect = seen.get(u, [])[-5:][::-1]
            assert r.behavior["behavior"] == expect
            if r.label == 1:
                seen.setdefault(u, []).append(r.categorical["item_id"])

    def test_zero_scenario_weight_levels_the_scenarios(self):
        spec = tiny_spec(samples_per_scenario=(4000, 4000, 4000),
                         scenario_weights=0.0, noise_rate=0.0, seed=5)
        _, stats = generate_with_stats(spec)
        rates = stats["per_scenario_positive_rate"]
        assert max(rates) - min(rates) < 0.05


class TestDatasetIO:
    def test_round_trip_is_identity(self, tmp_path):
        ds = generate_synthetic(tiny_spec())
        path = tmp_path / "ds.jsonl"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.schema.to_dict() == ds.schema.to_dict()
        assert back.split_ts == ds.split_ts
        np.testing.assert_array_equal(back.timestamps, ds.timestamps)
        assert [r.to_dict() for r in back.records] == [r.to_dict() for r in ds.records]

    def test_empty_file_loads_as_empty_dataset(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        ds = load_dataset(path)
        assert ds.n == 0

    def test_corrupt_line_error_names_line_number(self, tmp_path):
        ds = generate_synthetic(tiny_spec())
        path = tmp_path / "ds.jsonl"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        lines[2] = lines[2][:-8] + "oops"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match=":3:"):
            load_dataset(path)

    def test_missing_field_error_names_field(self, tmp_path):
        import json
        ds = generate_synthetic(tiny_spec())
        path = tmp_path / "ds.jsonl"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        obj = json.loads(lines[1])
        del obj["user"]["user_id"]
        lines[1] = json.dumps(obj, sort_keys=True)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match="user_id"):
            load_dataset(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        path.write_text('{"format": "something.else"}\n')
        with pytest.raises(DataFormatError, match=":1:"):
            load_dataset(path)

    def test_records_with_numericals_round_trip(self, tmp_path):
        schema = small_schema()
        rng = np.random.default_rng(2)
        records = [make_record(rng, schema) for _ in range(6)]
        ds = Dataset(schema=schema, records=records,
                     timestamps=np.arange(6, dtype=np.int64), split_ts=5)
        path = tmp_path / "ds.jsonl"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert [r.to_dict() for r in back.records] == [r.to_dict() for r in records]


class TestBatchIter:
    def encoded(self, n=10, seed=0):
        spec = tiny_spec(samples_per_scenario=(n - 4, 3, 1), seed=seed)
        ds = generate_synthetic(spec)
        return RecordEncoder(ds.schema).fit(ds.records).encode_all(ds.records)

    def test_batch_sizes_include_final_partial(self):
        sizes = [b.n for b in batch_iter(self.encoded(10), 3, shuffle_seed=0)]
        assert sizes == [3, 3, 3, 1]

    def test_fixed_seed_reproduces_order(self):
        enc = self.encoded(10)
        a = [b.scenario.tolist() for b in batch_iter(enc, 3, shuffle_seed=1)]
        b = [b.scenario.tolist() for b in batch_iter(enc, 3, shuffle_seed=1)]
        assert a == b
        c = [b.scenario.tolist() for b in batch_iter(enc, 3, shuffle_seed=2)]
        assert a != c

    def test_epochs_reshuffle_deterministically(self):
        enc = self.encoded(12)
        e0 = np.concatenate([b.label for b in batch_iter(enc, 4, 1, epoch=0)])
        e1 = np.concatenate([b.label for b in batch_iter(enc, 4, 1, epoch=1)])
        e0_again = np.concatenate([b.label for b in batch_iter(enc, 4, 1, epoch=0)])
        np.testing.assert_array_equal(e0, e0_again)
        assert not np.array_equal(e0, e1)

    def test_union_of_batches_covers_dataset(self):
        enc = self.encoded(11)
        seen = np.concatenate([b.cat["item_id"] for b in batch_iter(enc, 4, 3)])
        assert sorted(seen.tolist()) == sorted(enc.cat["item_id"].tolist())
        assert len(seen) == enc.n

    def test_zero_batch_size_rejected(self):
        with pytest.raises(ConfigError, match="batch_size"):
            list(batch_iter(self.encoded(6), 0, 0))

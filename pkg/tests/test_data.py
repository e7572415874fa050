import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from rclab.data import (Batch, DomainDataset, Shot, SyntheticSpec, classify_count, generate_synthetic, head_count,
                        load_jsonl, long_tail_counts, sample_batches, shot_partition, stream, write_csv,
                        write_jsonl)
from rclab.errors import EpisodeError, ParseError, SpecError
from rclab.transport import EmpiricalDistribution, w1_exact


def small_spec(**kw):
    base = dict(K=4, C=5, input_dim=6, n_per_domain=400, n_eval_per_class=10, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


def test_priors_sum_to_one():
    tr = generate_synthetic(small_spec()).train
    assert np.all(np.abs(tr.priors().sum(axis=1) - 1.0) <= 1e-12)
    assert all(int(y.max()) < tr.num_classes for y in tr.y)


def test_generation_is_pure_function_of_spec():
    a, b = generate_synthetic(small_spec()), generate_synthetic(small_spec())
    for s in ("train", "val", "test"):
        for Xa, Xb in zip(getattr(a, s).X, getattr(b, s).X):
            assert np.array_equal(Xa, Xb)
    c = generate_synthetic(small_spec(seed=4))
    assert not np.array_equal(a.train.X[0][:5], c.train.X[0][:5])


def test_long_tail_profile_examples():
    assert long_tail_counts(400, 2, 4.0) == [400, 100]
    spec = small_spec(imbalance_ratio=10.0, n_per_domain=2000)
    counts = generate_synthetic(spec).train.counts()
    for row in counts:
        assert row.max() / row.min() == pytest.approx(10.0, rel=0.02)
    # head classes differ across domains
    assert len({int(np.argmax(r)) for r in counts}) == spec.K


def test_head_count_sums_near_budget():
    spec = small_spec(n_per_domain=2000, imbalance_ratio=10.0)
    assert abs(sum(long_tail_counts(head_count(spec), spec.C, 10.0)) - 2000) <= spec.C


def test_eval_splits_balanced():
    sp = generate_synthetic(small_spec())
    for part in (sp.val, sp.test):
        assert np.all(part.counts() == 10)


def test_null_shift_control_identical_priors_and_means():
    spec = small_spec(imbalance_ratio=1.0, conditional_shift=0.0, n_per_domain=4000, noise_sigma=0.3)
    tr = generate_synthetic(spec).train
    assert np.all(tr.priors() == tr.priors()[0])
    for c in range(spec.C):
        means = np.array([tr.X[k][tr.y[k] == c].mean(axis=0) for k in range(spec.K)])
        assert np.max(np.abs(means - means.mean(axis=0))) < 5 * 0.3 / math.sqrt(tr.counts()[0, c])


def test_domain_offsets_unit_and_distinct():
    from rclab.data import domain_geometry
    spec = small_spec(K=5)
    base, U = domain_geometry(spec, stream(0, "data"))
    assert np.allclose(np.linalg.norm(U, axis=1), 1.0, atol=1e-12)
    assert np.allclose(np.linalg.norm(base, axis=1), spec.class_sep)
    d = np.linalg.norm(U[:, None] - U[None], axis=2)
    assert d[~np.eye(5, dtype=bool)].min() > 0.1


def test_class_conditional_w1_grows_with_shift():
    values = []
    for s in (0.0, 0.5, 1.0, 1.5, 2.0):
        tr = generate_synthetic(small_spec(conditional_shift=s, imbalance_ratio=1.0, n_per_domain=300, K=2)).train
        P = EmpiricalDistribution.uniform(tr.X[0][tr.y[0] == 0])
        Q = EmpiricalDistribution.uniform(tr.X[1][tr.y[1] == 0])
        values.append(w1_exact(P, Q)[0])
    assert all(b > a for a, b in zip(values, values[1:])), values


def test_spec_validation():
    with pytest.raises(SpecError):
        SyntheticSpec(C=5, n_per_domain=3, imbalance_ratio=10).validate()
    with pytest.raises(SpecError):
        SyntheticSpec(imbalance_ratio=0.5).validate()
    with pytest.raises(SpecError):
        SyntheticSpec(noise_sigma=0).validate()
    with pytest.raises(SpecError):
        SyntheticSpec(K=2, C=3, prior_permutation=[[0, 1, 2], [0, 0, 1]]).validate()


def test_zero_shot_flag_truncates_tail():
    tr = generate_synthetic(small_spec(allow_zero_shot=True)).train
    assert np.all((tr.counts() == 0).sum(axis=1) == 1)
    part = shot_partition(tr)
    assert sum(b == Shot.ZERO for row in part.buckets for b in row) == 4


def test_spec_json_mirror_roundtrip():
    spec = small_spec(prior_permutation=[[0, 1, 2, 3, 4]] * 4)
    assert SyntheticSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


# ---- file formats

def test_jsonl_two_domains(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"domain": "a", "label": 0, "features": [1.0, 2.0], "extra": 1}\n'
                 '{"domain": "b", "label": 1, "features": [3.0, 4.0]}\n')
    ds = load_jsonl(p)
    assert ds.K == 2 and ds.names == ["a", "b"]
    assert ds.priors()[0].tolist() == [1.0, 0.0] and ds.priors()[1].tolist() == [0.0, 1.0]


def test_jsonl_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    ds = load_jsonl(p)
    assert ds.K == 0
    with pytest.raises(EpisodeError):
        sample_batches(ds, 4, np.random.default_rng(0))


def test_jsonl_ragged_line_reports_line_number(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text('{"domain": "a", "label": 0, "features": [1.0, 2.0]}\n'
                 '{"domain": "a", "label": 0, "features": [1.0]}\n')
    with pytest.raises(ParseError, match="line 2"):
        load_jsonl(p)


def test_jsonl_roundtrip_exact(tmp_path):
    tr = generate_synthetic(small_spec()).train
    write_jsonl(tr, tmp_path / "t.jsonl")
    back = load_jsonl(tmp_path / "t.jsonl", tr.num_classes)
    assert back.names == tr.names
    assert np.array_equal(back.counts(), tr.counts())
    assert np.array_equal(back.priors(), tr.priors())
    assert all(np.array_equal(a, b) for a, b in zip(back.X, tr.X))


def test_csv_export_header(tmp_path):
    tr = generate_synthetic(small_spec(input_dim=3)).train
    write_csv(tr, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "domain,label,f0,f1,f2"
    assert len(lines) == 1 + sum(tr.sizes())


# ---- batching

def test_batch_size_equal_partition_is_permutation():
    X = np.arange(12.0).reshape(6, 2)
    ds = DomainDataset(["a", "b", "c"], [X, X + 100, X + 200], [np.arange(6) % 2] * 3, 2)
    batches = sample_batches(ds, 6, np.random.default_rng(0))
    for k, b in enumerate(batches):
        assert sorted(b.X[:, 0].tolist()) == sorted(ds.X[k][:, 0].tolist())
        assert np.all(b.domain == k)


def test_small_partition_sampled_with_replacement():
    X = np.arange(4.0).reshape(2, 2)
    ds = DomainDataset(["a", "b", "c"], [X] * 3, [np.array([0, 1])] * 3, 2)
    assert all(len(b) == 5 for b in sample_batches(ds, 5, np.random.default_rng(0)))


def test_sampling_deterministic_given_rng_state():
    tr = generate_synthetic(small_spec()).train
    rng = np.random.default_rng(9)
    a = sample_batches(tr, 16, np.random.Generator(np.random.PCG64(9)))
    b = sample_batches(tr, 16, rng)
    assert all(np.array_equal(x.X, y.X) for x, y in zip(a, b))


def test_fewer_than_three_domains_rejected():
    X = np.zeros((3, 2))
    ds = DomainDataset(["a", "b"], [X, X], [np.zeros(3, dtype=int)] * 2, 1)
    with pytest.raises(EpisodeError):
        sample_batches(ds, 2, np.random.default_rng(0))


def test_label_histogram_matches_priors():
    tr = generate_synthetic(small_spec()).train
    rng = np.random.default_rng(1)
    n_draws = 10_000
    hist = np.zeros((tr.K, tr.num_classes))
    bs = 50
    for _ in range(n_draws // bs):
        for k, b in enumerate(sample_batches(tr, bs, rng)):
            hist[k] += np.bincount(b.y, minlength=tr.num_classes)
    pi = tr.priors()
    sd = np.sqrt(n_draws * pi * (1 - pi))
    assert np.all(np.abs(hist - n_draws * pi) <= 3 * sd + 1e-9)


def test_batch_concat_and_head():
    a = Batch(np.ones((2, 3)), np.array([0, 1]), np.array([0, 0]))
    b = Batch(np.zeros((3, 3)), np.array([1, 1, 0]), np.array([1, 1, 1]))
    c = Batch.concat([a, b])
    assert len(c) == 5 and c.domain.tolist() == [0, 0, 1, 1, 1]
    assert len(c.head(2)) == 2


# ---- shot buckets

def test_shot_thresholds_example():
    assert [classify_count(n, 100, 20) for n in (120, 50, 5, 0)] == [Shot.MANY, Shot.MEDIUM, Shot.FEW, Shot.ZERO]


def test_equal_large_counts_all_many():
    X = np.zeros((300, 2))
    ds = DomainDataset(["a"], [X], [np.repeat([0, 1, 2], 100)], 3)
    assert all(b == Shot.MANY for b in shot_partition(ds).buckets[0])


def test_balanced_spec_has_no_few_or_zero():
    tr = generate_synthetic(small_spec(imbalance_ratio=1.0)).train
    part = shot_partition(tr)
    assert not {Shot.FEW, Shot.ZERO} & {b for row in part.buckets for b in row}


def test_bad_thresholds_rejected():
    tr = generate_synthetic(small_spec()).train
    with pytest.raises(ValueError):
        shot_partition(tr, 20, 100)


@given(st.integers(0, 500), st.integers(2, 50), st.integers(51, 300))
def test_bucket_is_monotone_threshold(n, medium, many):
    order = [Shot.ZERO, Shot.FEW, Shot.MEDIUM, Shot.MANY]
    a, b = classify_count(n, many, medium), classify_count(n + 1, many, medium)
    assert order.index(b) >= order.index(a)


def test_streams_independent():
    a = stream(0, "batch").standard_normal(2000)
    b = stream(0, "mixup").standard_normal(2000)
    assert abs(stats.pearsonr(a, b)[0]) < 0.1
    assert np.array_equal(stream(5, "data").integers(0, 1 << 30, 4), stream(5, "data").integers(0, 1 << 30, 4))

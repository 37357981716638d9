import dataclasses
import json

import numpy as np
import pytest

from tspf import data
from tspf.data import Dataset
from tspf.errors import ContractError, LoadError


def _synth(n=500, d=6, seed=0, c=30):
    cov = data.standardize(data.simulate_covariates(n, d, seed)).x
    return data.synthesize(cov, c=c, seed=seed)


def _consistent(ds: Dataset) -> bool:
    return bool(np.all(ds.y == np.where(ds.t == 1.0, ds.y1, ds.y0)))


# -- loading -------------------------------------------------------------------
def _write_csv(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


def test_load_round_trip(tmp_path):
    raw = data.simulate_covariates(30, 25, seed=3, n_binary=5)
    path = data.write_covariates(tmp_path / "ihdp.csv", raw)
    cov = data.load_covariates(path, data.IHDP_SCHEMA)
    assert cov.x.shape == (30, 25)
    np.testing.assert_allclose(cov.x * cov.std + cov.mean, raw, atol=1e-12)
    assert cov.binary[-5:].all() and not cov.binary[:20].any()


def test_load_reads_original_t_y(tmp_path):
    header = [f"x{i + 1}" for i in range(17)] + ["t", "y"]
    rows = [[float(i + j) for j in range(17)] + [i % 2, 0.5 * i] for i in range(4)]
    cov = data.load_covariates(_write_csv(tmp_path / "jobs.csv", header, rows), data.JOBS_SCHEMA)
    assert cov.x.shape == (4, 17)
    np.testing.assert_array_equal(cov.t_original, [0, 1, 0, 1])


def test_continuous_mode_passes_binary_columns(tmp_path):
    raw = data.simulate_covariates(50, 4, seed=1, n_binary=2)
    cov = data.standardize(raw, "continuous")
    np.testing.assert_array_equal(cov.x[:, 2:], raw[:, 2:])
    np.testing.assert_allclose(cov.x[:, :2].mean(axis=0), 0.0, atol=1e-12)


def test_load_missing_file(tmp_path):
    with pytest.raises(LoadError, match="nope.csv"):
        data.load_covariates(tmp_path / "nope.csv", data.IHDP_SCHEMA)


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(LoadError, match="empty"):
        data.load_covariates(path, data.IHDP_SCHEMA)


def test_load_ragged_row(tmp_path):
    path = _write_csv(tmp_path / "r.csv", ["x1", "x2"], [[1, 2], [3]])
    with pytest.raises(LoadError, match="line 3"):
        data.load_covariates(path, data.CovariateSchema("toy", 2))


def test_load_non_numeric_cell(tmp_path):
    path = _write_csv(tmp_path / "r.csv", ["x1", "x2"], [[1, 2], [3, "abc"]])
    with pytest.raises(LoadError, match=r"line 3, column 'x2'"):
        data.load_covariates(path, data.CovariateSchema("toy", 2))


def test_load_missing_columns(tmp_path):
    path = _write_csv(tmp_path / "r.csv", ["x1"], [[1]])
    with pytest.raises(LoadError, match="lacks columns"):
        data.load_covariates(path, data.CovariateSchema("toy", 2))


# -- synthesis -----------------------------------------------------------------
def test_synthesis_consistency_and_shapes():
    s = _synth(n=400, d=6, c=7)
    assert _consistent(s.dataset)
    p = s.params
    assert [len(p.w1), len(p.w2), len(p.w3), len(p.w4), len(p.w5), len(p.w6)] == [6, 7, 6, 7, 6, 7]
    assert s.confounders.shape == (400, 7)
    assert set(np.unique(s.dataset.t)) <= {0.0, 1.0}
    assert np.all(s.dataset.g == 0)


def test_synthesis_deterministic():
    a, b = _synth(seed=4), _synth(seed=4)
    for f in ("x", "t", "y", "y0", "y1"):
        assert getattr(a.dataset, f).tobytes() == getattr(b.dataset, f).tobytes()


def test_synthesis_rejects_bad_c():
    with pytest.raises(ContractError):
        data.synthesize(np.zeros((3, 2)), c=0)


def test_synthesis_noise_is_variance_point_one():
    s = _synth(n=20000, d=3, seed=2)
    x, u, p = s.dataset.x, s.confounders, s.params
    resid0 = s.dataset.y0 - (x @ p.w3 + u @ p.w4)
    resid1 = s.dataset.y1 - (x @ p.w5 + u @ p.w6 + 4.0)
    assert resid0.var() == pytest.approx(0.1, rel=0.05)
    assert resid1.var() == pytest.approx(0.1, rel=0.05)


def test_hidden_confounder_absent_from_records():
    names = {f.name for f in dataclasses.fields(Dataset)}
    assert names == {"x", "t", "y", "g", "y0", "y1", "index"}
    bundle = data.build_bundle(data.simulate_covariates(200, 4, 0), c=30, seed=0)
    for ds in bundle.splits().values():
        # 4 covariates in, 4 covariates out: no confounder columns leak into x.
        assert ds.d == 4


# -- splits --------------------------------------------------------------------
@pytest.mark.parametrize("n,expected", [(1000, (630, 270, 100)), (747, (470, 201, 76))])
def test_split_sizes(n, expected):
    assert data.split_sizes(n) == expected
    ds = _synth(n=n, d=3).dataset
    parts = data.split(ds, seed=1)
    assert tuple(len(p) for p in parts) == expected
    idx = np.concatenate([p.index for p in parts])
    assert sorted(idx.tolist()) == list(range(n))


def test_split_empty():
    empty = Dataset(x=np.zeros((0, 2)), t=[], y=[], g=[])
    with pytest.raises(ContractError):
        data.split(empty, 0)


def test_make_rct_sizes_and_groups():
    train = data.split(_synth(n=747, d=3).dataset, 0)[0]
    obs, rct = data.make_rct(train, 0.1, seed=5)
    assert (len(rct), len(obs)) == (47, 423)
    assert np.all(rct.g == 1) and np.all(obs.g == 0)
    assert not set(obs.index) & set(rct.index)
    assert set(obs.index) | set(rct.index) == set(train.index)


def test_make_rct_replacement_rule():
    train = _synth(n=2000, d=3, seed=1).dataset
    _, rct = data.make_rct(train, 0.5, seed=2)
    orig = train.subset(np.searchsorted(train.index, rct.index))
    y_f = np.where(orig.t == 1, orig.y1, orig.y0)
    y_cf = np.where(orig.t == 1, orig.y0, orig.y1)
    same = rct.t == orig.t
    assert same.any() and (~same).any()
    assert np.all(rct.y[same] == y_f[same])
    assert np.all(rct.y[~same] == y_cf[~same])
    assert _consistent(rct)


def test_make_rct_needs_oracle():
    ds = Dataset(x=np.zeros((10, 2)), t=np.zeros(10), y=np.zeros(10), g=np.zeros(10))
    with pytest.raises(ContractError):
        data.make_rct(ds, 0.1, 0)


def test_make_rct_fraction_bounds():
    ds = _synth(n=20, d=2).dataset
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ContractError):
            data.make_rct(ds, bad, 0)


def test_rct_treated_fraction_within_three_sigma():
    bundle = data.build_bundle(data.simulate_covariates(5000, 3, 0), seed=0)
    m = len(bundle.rct_train)
    assert abs(bundle.rct_train.t.mean() - 0.5) <= 3 * np.sqrt(0.25 / m)


def test_rerandomize_validation():
    val = data.split(_synth(n=3000, d=3).dataset, 0)[1]
    out = data.rerandomize_validation(val, seed=9)
    assert abs(out.t.mean() - 0.5) <= 3 * np.sqrt(0.25 / len(out))
    assert _consistent(out)
    np.testing.assert_array_equal(out.x, val.x)


def test_rerandomize_empty():
    empty = _synth(n=10, d=2).dataset.subset([])
    assert len(data.rerandomize_validation(empty, 0)) == 0


# -- batches -------------------------------------------------------------------
def test_batches_sizes_and_determinism():
    b = data.batches(10, 4, seed=0, epoch=1)
    assert [len(x) for x in b] == [4, 4, 2]
    assert sorted(np.concatenate(b).tolist()) == list(range(10))
    again = data.batches(10, 4, seed=0, epoch=1)
    assert all(np.array_equal(x, y) for x, y in zip(b, again))


def test_batches_differ_between_epochs():
    a = np.concatenate(data.batches(50, 8, seed=3, epoch=1))
    b = np.concatenate(data.batches(50, 8, seed=3, epoch=2))
    assert not np.array_equal(a, b)


def test_batches_reject_small_batch():
    with pytest.raises(ContractError):
        data.batches(10, 1, 0, 0)


# -- bundles -------------------------------------------------------------------
def test_bundle_deterministic_and_disjoint():
    cov = data.simulate_covariates(800, 5, 1)
    a, b = data.build_bundle(cov, seed=11), data.build_bundle(cov, seed=11)
    for name in a.splits():
        for f in ("x", "t", "y", "g", "y0", "y1", "index"):
            assert getattr(a.splits()[name], f).tobytes() == getattr(b.splits()[name], f).tobytes()
    idx = [set(ds.index) for ds in a.splits().values()]
    assert sum(len(s) for s in idx) == 800 == len(set().union(*idx))
    assert all(_consistent(ds) for ds in a.splits().values())


def test_bundle_explicit_rct_size():
    bundle = data.build_bundle(data.simulate_covariates(3493, 10, 0), seed=0, rct_size=200)
    sizes = {k: len(v) for k, v in bundle.splits().items()}
    assert sizes == {"obs_train": 2000, "rct_train": 200, "validation": 943, "test": 350}


def test_bundle_save_load_round_trip(tmp_path):
    bundle = data.build_bundle(data.simulate_covariates(120, 3, 0), c=5, seed=2)
    data.save_bundle(bundle, tmp_path / "b")
    side = json.loads((tmp_path / "b" / "bundle.json").read_text())
    assert side["seed"] == 2 and side["c"] == 5 and len(side["synthesis"]["w2"]) == 5
    back = data.load_bundle(tmp_path / "b")
    for name, ds in bundle.splits().items():
        other = back.splits()[name]
        for f in ("x", "t", "y", "g", "y0", "y1"):
            assert getattr(ds, f).tobytes() == getattr(other, f).tobytes()
    np.testing.assert_array_equal(back.params.w1, bundle.params.w1)


def test_effect_shift_averages_four():
    cov = data.standardize(data.simulate_covariates(10_000, 25, 0, n_binary=19)).x
    means = []
    for seed in range(5):
        ds = data.synthesize(cov, 30, seed).dataset
        means.append(np.mean(ds.y1 - ds.y0))
    assert abs(np.mean(means) - 4.0) <= 0.5

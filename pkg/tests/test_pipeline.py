import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crbmsim import pipeline as pl
from crbmsim import schema as sc
from crbmsim.layout import VisibleLayout


def _events(rows):
    return pd.DataFrame(rows, columns=["patient_id", "variable", "day", "value"])


def _full_adas(pid, day, skip=None):
    return [(pid, n, day, "1") for n in sc.ADAS11 if n != skip]


def test_window_centres_and_edges():
    days = np.array([-46, -45, 0, 45, 46, 90, 135, 136, 540, 585, 586])
    np.testing.assert_array_equal(pl.time_index(days), [-1, 0, 0, 0, 1, 1, 1, 2, 6, 6, -1])
    assert pl.MONTHS == (0, 3, 6, 9, 12, 15, 18)
    # centres are 90 * index
    np.testing.assert_array_equal(pl.time_index(90 * np.arange(7)), np.arange(7))


def test_bucket_averages_within_window(schema):
    c = pl.bucket_events(_events([("A", "Cholesterol", 85, "4.0"), ("A", "Cholesterol", 95, "6.0"),
                                  ("A", "Cholesterol", 0, "3.0")]), schema)
    chol = c.column("Cholesterol")[0]
    assert chol[1] == pytest.approx(5.0)
    assert chol[0] == pytest.approx(3.0)
    assert np.isnan(chol[2:]).all()


def test_bucket_empty_window_is_masked(schema, small_dataset):
    c = pl.bucket_events(_events([("A", "Weight", 0, "70")]), schema)
    enc = small_dataset.encoder
    xt, mt, _, _ = pl.encode_cohort(c, enc)
    w = enc.temporal_specs.index(schema.lookup("Weight"))
    start = sum(s.width for s in enc.temporal_specs[:w])
    assert mt[0, 0, start] and not mt[0, 3, start]
    assert xt[0, 3, start] == 0.0


def test_bucket_statics_and_ordinal_rounding(schema):
    c = pl.bucket_events(_events([
        ("A", "ADAS Naming", 0, "1"), ("A", "ADAS Naming", 10, "2"),
        ("A", "Height", -200, "170"), ("A", "Height", 300, "172"),
        ("A", "Region", 0, "Asia"), ("A", "Region", 90, "Oceania"), ("A", "Region", 180, "Oceania"),
    ]), schema)
    assert c.column("ADAS Naming")[0, 0] == 2.0  # 1.5 rounds half up
    assert c.column("Height")[0] == pytest.approx(171.0)
    assert c.column("Region")[0] == schema.lookup("Region").kind.labels.index("Oceania")


def test_bucket_unknown_variable(schema):
    with pytest.raises(sc.UnknownVariable):
        pl.bucket_events(_events([("A", "Shoe size", 0, "9")]), schema)


def test_dropout_flag(schema):
    rows = [("A", "Weight", 90 * k, "70") for k in range(3)] + [("A", "Dropout", 200, "1")]
    rows += [("B", "Weight", 90 * k, "70") for k in range(7)]
    c = pl.bucket_events(_events(rows), schema)
    d = c.column("Dropout")
    np.testing.assert_array_equal(d[0, :3], [0, 0, 1])
    assert np.isnan(d[0, 3:]).all()
    np.testing.assert_array_equal(d[1], np.zeros(7))


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False))
def test_bucket_permutation_invariant(rnd):
    schema = sc.build_schema()
    rows = [("A", "Cholesterol", 85, "4.0"), ("A", "Cholesterol", 95, "6.5"), ("B", "Weight", 10, "60"),
            ("B", "Weight", 20, "61"), ("A", "Region", 0, "Asia"), ("A", "Region", 5, "Africa"),
            ("B", "ADAS Naming", 3, "1"), ("B", "ADAS Naming", 180, "4"), ("A", "Sex", 0, "female")]
    ref = pl.bucket_events(_events(rows), schema)
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    got = pl.bucket_events(_events(shuffled), schema)
    np.testing.assert_array_equal(ref.temporal, got.temporal)
    np.testing.assert_array_equal(ref.static, got.static)


def test_select_patients(schema):
    rows = _full_adas("late", 540) + _full_adas("mid", 450, skip="ADAS Naming")
    rows += _full_adas("mid", 540, skip="ADAS Naming") + _full_adas("base", 0)
    c = pl.bucket_events(_events(rows), schema)
    assert pl.select_patients(c) == ["late"]


def test_split_counts():
    ids = [f"p{i}" for i in range(100)]
    s = pl.split_patients(ids, seed=3)
    counts = pd.Series(s).value_counts()
    assert (counts["train"], counts["validation"], counts["test"]) == (70, 5, 25)
    s = pl.split_patients([f"p{i}" for i in range(1908)], seed=0)
    counts = pd.Series(s).value_counts()
    assert (counts["train"], counts["validation"], counts["test"]) == (1335, 95, 478)


def test_split_deterministic():
    ids = [f"p{i}" for i in range(57)]
    assert pl.split_patients(ids, 9) == pl.split_patients(list(reversed(ids)), 9)
    assert pl.split_patients(ids, 9) != pl.split_patients(ids, 10)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400), st.integers(0, 2 ** 32 - 1))
def test_split_partition(n, seed):
    ids = [f"x{i}" for i in range(n)]
    s = pl.split_patients(ids, seed)
    assert sorted(s) == sorted(ids)
    assert set(s.values()) <= set(pl.SPLITS)
    assert sum(v == "train" for v in s.values()) == int(np.floor(0.7 * n + 1e-9))


def test_make_pairs(small_dataset):
    part = small_dataset.part("train")
    pairs = pl.make_pairs(part, small_dataset.encoder)
    assert len(pairs) == 6 * len(part)
    lay = VisibleLayout.for_schema(part.schema)
    assert pairs.v.shape[1] == lay.n_visible
    xt, mt, xs, ms = pl.encode_cohort(part, small_dataset.encoder)
    st_, t0, t1 = lay.section("static"), lay.section("t"), lay.section("t+1")
    for row in (0, 7, 6 * len(part) - 1):
        i, t = divmod(row, 6)
        assert pairs.t[row] == t and pairs.patient_id[row] == part.patient_ids[i]
        np.testing.assert_array_equal(pairs.v[row, t0], xt[i, t])
        np.testing.assert_array_equal(pairs.v[row, t1], xt[i, t + 1])
        np.testing.assert_array_equal(pairs.mask[row, t1], mt[i, t + 1])
    # static block identical across a patient's six samples
    stat = pairs.v[:, st_].reshape(len(part), 6, -1)
    assert (stat == stat[:, :1]).all()


def test_make_pairs_single_patient(small_dataset):
    part = small_dataset.part("test")
    one = part.subset(part.patient_ids[:1])
    assert len(pl.make_pairs(one, small_dataset.encoder)) == 6
    assert 1335 * 6 == 8010


def test_make_pairs_shuffle_is_permutation(small_dataset):
    part = small_dataset.part("validation")
    a = pl.make_pairs(part, small_dataset.encoder)
    b = pl.make_pairs(part, small_dataset.encoder, seed=4)
    key = lambda s: sorted(zip(s.patient_id, s.t))  # noqa: E731
    assert key(a) == key(b)
    assert list(zip(a.patient_id, a.t)) != list(zip(b.patient_id, b.t))


def test_split_leakage(small_dataset):
    sets = {s: set(small_dataset.samples(s).patient_id) for s in pl.SPLITS}
    assert not sets["train"] & sets["test"]
    assert not sets["train"] & sets["validation"]
    assert not sets["validation"] & sets["test"]
    assert set.union(*sets.values()) == set(small_dataset.cohort.patient_ids)


def test_encoder_fit_on_train_only(small_dataset):
    train = small_dataset.part("train")
    x = train.column("Weight")
    logs = np.log(x[~np.isnan(x)])
    t = small_dataset.encoder.transforms["Weight"]
    assert t.mean_log == pytest.approx(logs.mean(), abs=1e-12)
    assert t.std_log == pytest.approx(logs.std(), abs=1e-12)


def test_store_roundtrip(small_cohort, tmp_path):
    cohort = small_cohort[2]
    manifest = pl.write_store(cohort, tmp_path / "store")
    assert manifest["n_patients"] == len(cohort)
    back = pl.read_store(tmp_path / "store")
    np.testing.assert_array_equal(back.patient_ids, cohort.patient_ids)
    np.testing.assert_allclose(back.temporal, cohort.temporal, rtol=1e-9, equal_nan=True)
    np.testing.assert_allclose(back.static, cohort.static, rtol=1e-9, equal_nan=True)


def test_dataset_config_yaml(small_cohort):
    cfg = pl.DatasetConfig.from_yaml("variables: [ADAS Naming, Weight, Sex]\nsplit_seed: 2\nselect: false\n")
    ds = pl.assemble_dataset(small_cohort[2], cfg)
    assert ds.cohort.schema.temporal_names == ["ADAS Naming", "Weight"]
    assert ds.cohort.schema.static_names == ["Sex"]
    assert len(ds.cohort) == len(small_cohort[2])

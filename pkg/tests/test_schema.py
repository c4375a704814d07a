import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crbmsim import schema as sc


def test_word_recognition_is_ordinal_0_12(schema):
    spec = schema.lookup("ADAS Word Recognition")
    assert spec.kind.name == "ordinal"
    assert (spec.kind.min, spec.kind.max) == (0, 12)
    assert spec.temporal


def test_sex_is_static_binary_female_one(schema):
    spec = schema.lookup("Sex")
    assert spec.kind.name == "binary"
    assert not spec.temporal
    assert spec.note == "1 if female"
    assert sc.encode("female", spec)[0].tolist() == [1.0]


def test_variable_counts(schema):
    # 12 ADAS + 5 MMSE + 14 laboratory + 5 clinical (incl. dropout) are temporal
    assert len(schema) == 44
    assert schema.count(temporal=True) == 12 + 5 + 14 + 5
    assert schema.count(temporal=False) == 8
    assert len(schema.forecast_names) == 35


def test_categorical_label_counts(schema):
    assert len(schema.lookup("Region").kind.labels) == 7
    assert len(schema.lookup("Race").kind.labels) == 6


def test_background_is_static_only(schema):
    for v in schema:
        assert v.temporal == (v.category != "Background")


def test_build_schema_deterministic():
    assert sc.build_schema().dumps() == sc.build_schema().dumps()
    assert sc.build_schema().hash() == sc.build_schema().hash()


def test_kind_invariants():
    with pytest.raises(sc.SchemaError):
        sc.ordinal(3, 3)
    with pytest.raises(sc.SchemaError):
        sc.categorical(["a"])
    with pytest.raises(sc.SchemaError):
        sc.categorical(["a", "a"])
    with pytest.raises(sc.SchemaError):
        sc.VariableSpec("x", "Background", sc.continuous(), temporal=True)


def test_fit_transform_constant():
    t = sc.fit_transform([math.e] * 3)
    assert t.mean_log == pytest.approx(1.0)
    assert t.std_log == 1.0


def test_fit_transform_three_values():
    t = sc.fit_transform([1, math.e, math.e ** 2])
    logs = np.array([0.0, 1.0, 2.0])
    assert t.mean_log == pytest.approx(logs.mean(), abs=1e-12)
    assert t.std_log == pytest.approx(math.sqrt(((logs - 1) ** 2).mean()), abs=1e-12)
    assert t.std_log == pytest.approx(math.sqrt(2 / 3), abs=1e-12)


def test_fit_transform_single():
    t = sc.fit_transform([1.0])
    assert (t.mean_log, t.std_log) == (0.0, 1.0)


def test_fit_transform_rejects_nonpositive():
    with pytest.raises(sc.NonPositiveValue):
        sc.fit_transform([1.0, 0.0])
    with pytest.raises(sc.SchemaError):
        sc.fit_transform([])


def test_age_over_89(schema):
    spec = schema.lookup("Age")
    state = sc.TransformState(4.0, 0.2)
    a, _ = sc.encode(">89", spec, state)
    b, _ = sc.encode(90, spec, state)
    assert a.tolist() == b.tolist()
    assert a[0] == pytest.approx((math.log(90) - 4.0) / 0.2)


def test_encode_center_is_zero(schema):
    state = sc.TransformState(1.3, 0.7)
    vec, mask = sc.encode(math.exp(1.3), schema.lookup("Cholesterol"), state)
    assert vec[0] == pytest.approx(0.0, abs=1e-12)
    assert mask.all()


def test_encode_missing(schema):
    for name in ("Region", "ADAS Naming", "Cholesterol", "Sex"):
        spec = schema.lookup(name)
        vec, mask = sc.encode(None, spec)
        assert vec.shape == (spec.width,)
        assert not vec.any() and not mask.any()


def test_encode_errors(schema):
    with pytest.raises(sc.OutOfRange):
        sc.encode(9, schema.lookup("ADAS Naming"))
    with pytest.raises(sc.OutOfRange):
        sc.encode(2.5, schema.lookup("ADAS Naming"))
    with pytest.raises(sc.UnknownLabel):
        sc.encode("Atlantis", schema.lookup("Region"))
    with pytest.raises(sc.NonPositiveValue):
        sc.encode(-1.0, schema.lookup("Weight"))


def test_decode_examples(schema):
    orient = schema.lookup("ADAS Orientation")
    assert sc.decode(sc.encode(7, orient)[0], orient) == 7
    assert sc.decode([0.0], schema.lookup("Weight"), sc.TransformState(1.0, 1.0)) == pytest.approx(math.e)
    region = schema.lookup("Region")
    onehot = np.eye(7)[3]
    assert sc.decode(onehot, region) == region.kind.labels[3]


def test_decode_ordinal_argmax_and_binary_threshold(schema):
    spec = schema.lookup("ApoE4 allele count")
    assert sc.decode([0.1, 0.2, 0.7], spec) == 2
    assert sc.decode([0.49], schema.lookup("Sex")) == 0
    assert sc.decode([0.51], schema.lookup("Sex")) == 1


def test_schema_text_roundtrip(schema):
    back = sc.Schema.loads(schema.dumps())
    assert back.dumps() == schema.dumps()
    assert back.hash() == schema.hash()


def test_encoder_fit_uses_given_rows_only(schema):
    rng = np.random.default_rng(0)
    nt, ns = schema.count(True), schema.count(False)
    train_t = np.full((5, 7, nt), np.nan)
    train_s = np.full((5, ns), np.nan)
    j = schema.temporal_names.index("Weight")
    train_t[..., j] = rng.uniform(50, 90, (5, 7))
    enc = sc.Encoder.fit(schema, train_t, train_s)
    logs = np.log(train_t[..., j]).ravel()
    assert enc.transforms["Weight"].mean_log == pytest.approx(logs.mean())
    assert enc.transforms["Weight"].std_log == pytest.approx(logs.std())
    # test rows far away never enter the statistics
    test_t = train_t.copy()
    test_t[..., j] *= 100
    enc2 = sc.Encoder.fit(schema, train_t, train_s)
    enc.encode_temporal(test_t)
    assert enc2.to_dict() == enc.to_dict()


def _in_domain(spec, draw):
    k = spec.kind
    if k.name == "continuous_positive":
        return draw(st.floats(1e-3, 1e4, allow_nan=False))
    if k.name == "binary":
        if k.labels:
            return draw(st.sampled_from(k.labels))
        return draw(st.sampled_from([0, 1]))
    if k.name == "ordinal":
        return draw(st.integers(k.min, k.max))
    return draw(st.sampled_from(k.labels))


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_roundtrip_all_specs(data):
    schema = sc.build_schema()
    state = sc.TransformState(data.draw(st.floats(-3, 3)), data.draw(st.floats(0.1, 3)))
    for spec in schema:
        value = _in_domain(spec, data.draw)
        vec, mask = sc.encode(value, spec, state)
        back = sc.decode(vec, spec, state)
        if spec.kind.name == "continuous_positive":
            assert back == pytest.approx(value, rel=1e-9)
        elif spec.kind.name == "binary" and spec.kind.labels:
            assert back == spec.kind.labels.index(value)
        else:
            assert back == value
        if spec.kind.unit_type == "onehot":
            assert vec.sum() == 1.0 and mask.all()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.one_of(st.none(), st.integers(0, 12)), min_size=1, max_size=30))
def test_onehot_blocks_sum_to_presence(levels):
    spec = sc.build_schema().lookup("ADAS Word Recognition")
    codes = np.array([np.nan if x is None else x for x in levels], dtype=float)
    vec, mask = sc.encode_codes(codes, spec)
    np.testing.assert_array_equal(vec.sum(-1), ~np.isnan(codes))
    np.testing.assert_array_equal(mask.all(-1), ~np.isnan(codes))
    np.testing.assert_array_equal(sc.decode_codes(vec, spec)[~np.isnan(codes)], codes[~np.isnan(codes)])

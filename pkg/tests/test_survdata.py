import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import random_dataset, three_subject_dataset
from pemsurv.survdata import (
    CsvSchema,
    DataValidationError,
    FeatureSchema,
    SchemaError,
    SubjectSpan,
    SurvivalDataset,
    load_csv,
    validate,
    write_csv,
)

CR_SCHEMA = CsvSchema(id="id", time="time", status="status", cause="cause", features=["x"], n_causes=2)


def _write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_simple_layout_rows(tmp_path):
    path = _write(tmp_path, "id,time,status,cause,x\n1,1.3,1,2,0.5\n2,0.5,0,,1.5\n")
    ds = load_csv(path, CR_SCHEMA)
    s1, s2 = ds.spans
    assert (s1.t_start, s1.t_end, s1.status, s1.cause) == (0.0, 1.3, 1, 2)
    assert (s2.t_start, s2.t_end, s2.status, s2.cause) == (0.0, 0.5, 0, None)
    assert ds.n_causes == 2


def test_empty_file_keeps_configured_causes(tmp_path):
    ds = load_csv(_write(tmp_path, "id,time,status,cause,x\n"), CR_SCHEMA)
    assert len(ds) == 0
    assert ds.n_causes == 2


def test_missing_column_is_named(tmp_path):
    path = _write(tmp_path, "id,time,status,x\n1,1,1,0\n")
    with pytest.raises(SchemaError, match="'cause'"):
        load_csv(path, CR_SCHEMA)


@pytest.mark.parametrize(
    "row, rule",
    [
        ("2,abc,1,1,0", "non_numeric"),
        ("2,0,1,1,0", "nonpositive_time"),
        ("2,1,2,1,0", "status_domain"),
        ("2,1,1,3,0", "cause_out_of_range"),
    ],
)
def test_row_level_errors_carry_row_index(tmp_path, row, rule):
    path = _write(tmp_path, "id,time,status,cause,x\n1,1,0,,0\n" + row + "\n")
    with pytest.raises(DataValidationError) as err:
        load_csv(path, CR_SCHEMA)
    assert err.value.row == 1
    assert err.value.rule == rule


def test_overlapping_spans_rejected(tmp_path):
    text = "id,tstart,tstop,status,x\n1,0,2,0,0\n1,1,3,1,0\n"
    schema = CsvSchema(id="id", time=None, tstart="tstart", tstop="tstop", status="status", features=["x"])
    with pytest.raises(DataValidationError, match="overlap"):
        load_csv(_write(tmp_path, text), schema)


def test_validate_clean_dataset():
    assert validate(three_subject_dataset()) == []


def test_validate_overlap():
    fs = FeatureSchema()
    ds = SurvivalDataset.from_spans(
        [SubjectSpan("a", 0, 2, 0, None, ()), SubjectSpan("a", 1, 3, 1, None, ())], fs
    )
    assert [v.rule for v in validate(ds)] == ["overlap"]
    assert validate(ds)[0].subject_id == "a"


def test_validate_missing_cause():
    ds = SurvivalDataset.from_spans([SubjectSpan("a", 0, 2, 1, None, ())], FeatureSchema(), n_causes=2)
    assert [v.rule for v in validate(ds)] == ["missing_cause"]


def test_validate_event_on_inner_span():
    spans = [SubjectSpan("a", 0, 1, 1, None, ()), SubjectSpan("a", 1, 2, 0, None, ())]
    ds = SurvivalDataset.from_spans(spans, FeatureSchema())
    assert "status_not_last" in [v.rule for v in validate(ds)]


def test_multistate_event_followed_by_new_state_is_valid():
    spans = [
        SubjectSpan("a", 0, 1, 1, 1, (), state=0),
        SubjectSpan("a", 1, 2, 1, 2, (), state=1),
    ]
    ds = SurvivalDataset.from_spans(spans, FeatureSchema(), n_causes=2, transition_labels=[(0, 1), (1, 2)])
    assert validate(ds) == []


def test_categorical_encoding_is_frozen(tmp_path):
    schema = CsvSchema(id="id", time="time", status="status", features=["g"], categorical=["g"])
    train = load_csv(_write(tmp_path, "id,time,status,g\n1,1,1,b\n2,2,0,a\n"), schema)
    assert train.feature_schema.categories["g"] == ("a", "b")
    assert train.X[:, 0].tolist() == [1.0, 0.0]
    new = load_csv(_write(tmp_path, "id,time,status,g\n1,1,1,a\n", "n.csv"), schema, train.feature_schema)
    assert new.X[0, 0] == 0.0
    with pytest.raises(DataValidationError, match="unknown"):
        load_csv(_write(tmp_path, "id,time,status,g\n1,1,1,c\n", "u.csv"), schema, train.feature_schema)


def test_simple_and_start_stop_layouts_agree(tmp_path):
    simple = _write(tmp_path, "id,time,status,x\n1,2.5,1,1\n2,0.7,0,3\n", "s.csv")
    ss = _write(tmp_path, "id,tstart,tstop,status,x\n2,0,0.7,0,3\n1,0,2.5,1,1\n", "t.csv")
    a = load_csv(simple, CsvSchema(features=["x"]))
    b = load_csv(ss, CsvSchema(time=None, tstart="tstart", tstop="tstop", features=["x"]))
    assert a.equals(b)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 12), k=st.integers(1, 3),
       trunc=st.booleans(), tvf=st.booleans())
def test_csv_round_trip(tmp_path_factory, seed, n, k, trunc, tvf):
    ds = random_dataset(np.random.default_rng(seed), n, n_causes=k, truncation=trunc, tvf=tvf)
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    schema = write_csv(ds, path)
    assert load_csv(path, schema).equals(ds)


@given(seed=st.integers(0, 2**32 - 1))
def test_normalization_ignores_row_order(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, 8, tvf=True)
    shuffled = ds._take(rng.permutation(len(ds)))
    assert shuffled.equals(ds)
    assert validate(shuffled) == []


def test_subject_table_collapses_spans():
    spans = [SubjectSpan("a", 0.5, 1, 0, None, (1.0,)), SubjectSpan("a", 1, 2, 1, None, (2.0,))]
    ds = SurvivalDataset.from_spans(spans, FeatureSchema(("x",), ("numeric",)))
    row = ds.subject_table().iloc[0]
    assert (row["entry"], row["time"], row["status"], row["x"]) == (0.5, 2.0, 1, 1.0)

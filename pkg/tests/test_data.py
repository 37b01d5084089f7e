import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from civmed.data import Dataset, RoleMap, load_dataset, transform_column
from civmed.errors import (
    DegenerateColumnError,
    DomainError,
    DroppedRowsWarning,
    ParseError,
    PreconditionError,
    SchemaError,
)
from civmed.terms import Term, build_design, parse_terms, resolve_layout

ROLES = RoleMap(outcome="Y", error_prone=("A",), clean_covariates=("C",),
                exposure_or_mediator="Z")


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadDataset:
    def test_three_rows(self, tmp_path):
        path = write(tmp_path, "Y,Z,A,C\n1,2,3,4\n5,6,7,8\n9,10,11,12\n")
        ds = load_dataset(path, ROLES)
        assert ds.n == 3
        assert ds.column_names == ["Y", "A", "C", "Z"]
        np.testing.assert_array_equal(ds["Z"], [2, 6, 10])

    def test_without_schema_keeps_header_order(self, tmp_path):
        ds = load_dataset(write(tmp_path, "b,a\n1,2\n"))
        assert ds.column_names == ["b", "a"]

    def test_drop_policy_warns(self, tmp_path):
        path = write(tmp_path, "Y,Z,A,C\n1,2,3,4\n5,,7,8\n9,10,11,12\n")
        with pytest.warns(DroppedRowsWarning, match="dropped 1"):
            ds = load_dataset(path, ROLES, na_policy="drop")
        assert ds.n == 2
        assert ds.dropped_rows == 1

    def test_strict_policy_rejects_missing(self, tmp_path):
        path = write(tmp_path, "Y,Z,A,C\n1,2,3,4\n5,,7,8\n")
        with pytest.raises(ParseError, match="line 3"):
            load_dataset(path, ROLES)

    def test_strict_policy_rejects_text(self, tmp_path):
        path = write(tmp_path, "Y,Z,A,C\n1,2,x,4\n")
        with pytest.raises(ParseError, match="non-numeric"):
            load_dataset(path, ROLES)

    def test_missing_outcome_column_named(self, tmp_path):
        path = write(tmp_path, "Z,A,C\n1,2,3\n")
        with pytest.raises(SchemaError, match="Y"):
            load_dataset(path, ROLES)

    def test_unrelated_text_columns_ignored(self, tmp_path):
        path = write(tmp_path, "id,Y,Z,A,C\nabc,1,2,3,4\n")
        assert load_dataset(path, ROLES).n == 1

    def test_semicolon_delimiter(self, tmp_path):
        path = write(tmp_path, "Y;Z;A;C\n1;2;3;4\n")
        assert load_dataset(path, ROLES, delimiter=";")["C"][0] == 4.0

    def test_bad_policy(self, tmp_path):
        with pytest.raises(PreconditionError):
            load_dataset(write(tmp_path, "a\n1\n"), na_policy="impute")

    def test_empty_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_dataset(write(tmp_path, ""))

    def test_duplicate_header(self, tmp_path):
        with pytest.raises(SchemaError, match="duplicate"):
            load_dataset(write(tmp_path, "a,a\n1,2\n"))


class TestDataset:
    def test_columns_are_read_only(self):
        ds = Dataset({"x": [1.0, 2.0]})
        with pytest.raises(ValueError):
            ds["x"][0] = 5.0

    def test_unequal_lengths(self):
        with pytest.raises(SchemaError):
            Dataset({"x": [1.0, 2.0], "y": [1.0]})

    def test_non_finite_rejected(self):
        with pytest.raises(ParseError, match="row 1"):
            Dataset({"x": [1.0, math.inf]})

    def test_take_allows_repeats(self):
        ds = Dataset({"x": [1.0, 2.0, 3.0]}).take([2, 2, 0])
        np.testing.assert_array_equal(ds["x"], [3, 3, 1])

    def test_unknown_column_lists_available(self):
        with pytest.raises(SchemaError, match="available: x"):
            Dataset({"x": [1.0]})["q"]


class TestRoleMap:
    def test_overlap_rejected(self):
        with pytest.raises(SchemaError, match="disjoint"):
            RoleMap(outcome="Y", error_prone=("Y",))

    def test_moderator_must_be_clean(self):
        with pytest.raises(SchemaError):
            RoleMap(outcome="Y", error_prone=("A",), moderator="site")

    def test_mediator_roles(self):
        med = ROLES.mediator_roles()
        assert med.outcome == "Z" and med.exposure_or_mediator is None

    def test_instrument_sources_exclude_error_prone(self):
        assert ROLES.instrument_sources == ["Z", "C"]


class TestTransform:
    def test_center(self):
        ds = transform_column(Dataset({"x": [1.0, 2.0, 3.0]}), "x", "center")
        np.testing.assert_allclose(ds["x"], [-1, 0, 1])

    def test_log(self):
        ds = transform_column(Dataset({"x": [1.0, math.e, math.e ** 2]}), "x", "log")
        np.testing.assert_allclose(ds["x"], [0, 1, 2], atol=1e-15)

    def test_log_of_zero_reports_row(self):
        with pytest.raises(DomainError, match="row 0"):
            transform_column(Dataset({"x": [0.0, 1.0]}), "x", "log")

    def test_log_center(self):
        ds = transform_column(Dataset({"x": [1.0, math.e]}), "x", "log_center")
        np.testing.assert_allclose(ds["x"], [-0.5, 0.5])

    def test_unknown_kind(self):
        with pytest.raises(PreconditionError):
            transform_column(Dataset({"x": [1.0]}), "x", "sqrt")

    def test_original_untouched(self):
        ds = Dataset({"x": [1.0, 3.0]})
        transform_column(ds, "x", "center")
        np.testing.assert_array_equal(ds["x"], [1, 3])

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
    def test_centered_mean_is_zero(self, values):
        x = transform_column(Dataset({"x": values}), "x", "center")["x"]
        assert abs(x.mean()) <= 1e-12 * max(1.0, np.max(np.abs(values)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(allow_nan=False, allow_infinity=False),
                          st.floats(allow_nan=False, allow_infinity=False)),
                min_size=1, max_size=20))
def test_csv_round_trip_is_exact(tmp_path_factory, rows):
    ds = Dataset({"a": [r[0] for r in rows], "b": [r[1] for r in rows]})
    path = tmp_path_factory.mktemp("rt") / "x.csv"
    ds.to_csv(path)
    back = load_dataset(path)
    for name in ("a", "b"):
        assert back[name].tobytes() == ds[name].tobytes()


class TestTerms:
    def test_parse_normalises_order(self):
        assert Term.parse("site*A") == Term.parse("A*site")
        assert Term.parse("Z*Z").label == "Z^2"

    def test_intercept(self):
        assert Term.parse("1").is_intercept

    @pytest.mark.parametrize("bad", ["2Z", "Z^0", "Z+C", ""])
    def test_bad_terms(self, bad):
        with pytest.raises(SchemaError):
            Term.parse(bad)

    def test_duplicates_rejected(self):
        from civmed.errors import CompositionError
        with pytest.raises(CompositionError):
            parse_terms("Z, Z")

    def test_intercept_moved_first(self):
        assert resolve_layout(ROLES, ["Z", "1"])[0].is_intercept


class TestBuildDesign:
    def test_default_layout(self):
        roles = RoleMap(outcome="Y", error_prone=("C1",), clean_covariates=("C2",),
                        exposure_or_mediator="Z")
        ds = Dataset({"Y": [1, 2], "C1": [0, 1], "C2": [5, 6], "Z": [1, 0]})
        d = build_design(ds, roles)
        np.testing.assert_array_equal(d.X, [[1, 0, 5, 1], [1, 1, 6, 0]])
        np.testing.assert_array_equal(d.y, [1, 2])
        assert d.column_labels == ["1", "C1", "C2", "Z"]

    def test_interaction_column(self):
        roles = RoleMap(outcome="Y", error_prone=("A",), clean_covariates=("site",),
                        moderator="site")
        ds = Dataset({"Y": [1, 2], "A": [2, 3], "site": [0, 1]})
        d = build_design(ds, roles, ["1", "A", "A*site"])
        np.testing.assert_array_equal(d.X[:, 2], [0, 3])

    def test_absent_column(self):
        ds = Dataset({"Y": [1, 2], "A": [0, 1], "C": [1, 2], "Z": [1, 3]})
        with pytest.raises(SchemaError, match="Q"):
            build_design(ds, ROLES, ["1", "Q"])

    def test_outcome_not_a_regressor(self):
        ds = Dataset({"Y": [1, 2], "A": [0, 1], "C": [1, 2], "Z": [1, 3]})
        with pytest.raises(SchemaError):
            build_design(ds, ROLES, ["1", "Y"])

    def test_constant_column(self):
        ds = Dataset({"Y": [1, 2], "A": [0, 1], "C": [4, 4], "Z": [1, 3]})
        with pytest.raises(DegenerateColumnError, match="C"):
            build_design(ds, ROLES)

    def test_deterministic(self, rng):
        ds = Dataset({k: rng.standard_normal(30) for k in ("Y", "A", "C", "Z")})
        a, b = build_design(ds, ROLES), build_design(ds, ROLES)
        assert a.X.tobytes() == b.X.tobytes()

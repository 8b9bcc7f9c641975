import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fibernf import io
from fibernf.errors import RecipeError

finite = st.floats(allow_nan=False, allow_infinity=False)


@given(finite)
def test_float_round_trip(x):
    assert float(io.format_float(x)) == x


@given(st.dictionaries(st.text(max_size=5), st.one_of(finite, st.integers(), st.booleans(), st.none(),
                                                       st.lists(finite, max_size=4)), max_size=5))
def test_dumps_is_valid_json(doc):
    assert json.loads(io.dumps(doc)) == doc


def test_non_finite_becomes_null():
    assert json.loads(io.dumps({"a": math.nan, "b": [math.inf, 1.0]})) == {"a": None, "b": [None, 1.0]}


def test_numpy_values():
    doc = {"m": np.eye(2), "i": np.int64(3), "b": np.bool_(True), "f": np.float64(0.1)}
    assert json.loads(io.dumps(doc)) == {"m": [[1.0, 0.0], [0.0, 1.0]], "i": 3, "b": True, "f": 0.1}


def test_key_order_is_preserved():
    assert io.dumps({"b": 1, "a": 2}).index('"b"') < io.dumps({"b": 1, "a": 2}).index('"a"')


def test_integral_floats_keep_decimal_point():
    assert io.format_float(2.0) == "2.0"
    assert io.dumps([1.0]) == "[1.0]\n"


def test_unserialisable():
    with pytest.raises(TypeError):
        io.dumps({"x": object()})


def test_json_file_round_trip(tmp_path):
    path = io.write_json(tmp_path / "sub" / "a.json", {"x": [0.1, 0.2]})
    assert io.read_json(path) == {"x": [0.1, 0.2]}


def test_invalid_json(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(RecipeError, match="invalid JSON"):
        io.read_json(tmp_path / "bad.json")


def test_missing_json(tmp_path):
    with pytest.raises(FileNotFoundError):
        io.read_json(tmp_path / "none.json")


def test_csv_text():
    text = io.csv_text(("a", "b"), [(0.1, "x"), (2, 1.0)])
    assert text == "a,b\n0.10000000000000001,x\n2,1.0\n"


def test_csv_file(tmp_path):
    path = io.write_csv(tmp_path / "t.csv", ("a",), [(1.5,)])
    assert path.read_text() == "a\n1.5\n"


def test_human_table():
    text = io.human_table(("name", "value"), [("x", 1 / 3), ("long-name", 2)])
    lines = text.splitlines()
    assert lines[0].startswith("name")
    assert "0.333333" in lines[1]
    assert len({line.index(v) for line, v in zip(lines, ["value", "0.333333", "2"])}) == 1

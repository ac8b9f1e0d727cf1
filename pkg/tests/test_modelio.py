import numpy as np
import pytest

from ctmc_perturb.exceptions import ModelError, ModelFileError
from ctmc_perturb.modelio import load_model, parse_model
from ctmc_perturb.qmatrix import Window

EXAMPLE1 = """\
schema_version: 1
kind: branching_immigration_resurrection
b: [0.2, -0.5, 0.3]
c: [-0.5, 0.3, 0.2]
h: [-1.0, 0.6, 0.4]
window: 60
"""


def test_example1_file():
    m = parse_model(EXAMPLE1)
    assert m.gamma == 1.0
    assert m.window == Window(60)
    w = Window(5)
    assert np.allclose(m.generator.dense(w), m.r.dense(w) + m.a.inner.dense(w))


def test_triplets_file():
    m = parse_model("schema_version: 1\nkind: triplets\nn_states: 2\n"
                    "triplets: [[0, 1, 1.0], [1, 0, 2.0]]\n")
    assert m.generator.dense(1).tolist() == [[-1.0, 1.0], [2.0, -2.0]]
    a = m.as_perturbation()
    assert a.gamma == 2.0


def test_unknown_field_reports_line():
    text = EXAMPLE1 + "colour: blue\n"
    with pytest.raises(ModelFileError, match=r"line 7: unknown field 'colour'"):
        parse_model(text)


def test_bad_value_reports_field_and_line():
    text = EXAMPLE1.replace("c: [-0.5, 0.3, 0.2]", "c: [-0.5, oops, 0.2]")
    with pytest.raises(ModelFileError, match=r"line 4: field 'c'"):
        parse_model(text)


def test_schema_version_required():
    with pytest.raises(ModelFileError, match="schema_version"):
        parse_model(EXAMPLE1.replace("schema_version: 1", "schema_version: 2"))


def test_unknown_kind():
    with pytest.raises(ModelFileError, match="kind"):
        parse_model("schema_version: 1\nkind: magic\n")


def test_missing_field():
    with pytest.raises(ModelFileError, match="missing"):
        parse_model("schema_version: 1\nkind: branching\n")


def test_yaml_syntax_error_has_line():
    with pytest.raises(ModelFileError, match="line 3"):
        parse_model("schema_version: 1\nkind: branching\nb: x: y\n")


def test_not_a_mapping():
    with pytest.raises(ModelFileError):
        parse_model("- 1\n- 2\n")


def test_construction_errors_propagate():
    with pytest.raises(ModelError):
        parse_model("schema_version: 1\nkind: branching\nb: [0.2, -0.4, 0.3]\n")


def test_infinite_model_needs_window_as_perturbation():
    m = parse_model("schema_version: 1\nkind: pure_birth\ncoef: 2\n")
    assert m.generator.diag(3) == 6.0
    with pytest.raises(ModelFileError, match="window"):
        m.as_perturbation()


def test_load_missing_file(tmp_path):
    with pytest.raises(ModelFileError, match="cannot read"):
        load_model(tmp_path / "none.yaml")


def test_shipped_model_files():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "models"
    for path in sorted(root.glob("*.yaml")):
        load_model(path)

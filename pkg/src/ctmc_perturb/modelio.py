"""YAML model files.

A model file is a mapping with ``schema_version: 1``, a ``kind`` and the
fields of that kind.  Unknown or missing fields are rejected with the line
they occur on.  Example::

    schema_version: 1
    kind: branching_immigration_resurrection
    b: [0.2, -0.5, 0.3]
    c: [-0.5, 0.3, 0.2]
    h: [-1.0, 0.6, 0.4]
    window: 60
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .exceptions import ModelFileError
from .qmatrix import (BoundedPerturbation, RateMatrix, Window, branching_qmatrix,
                      immigration_resurrection, perturb, pure_birth)

__all__ = ["SCHEMA_VERSION", "KINDS", "ModelFile", "load_model", "parse_model"]

SCHEMA_VERSION = 1
_COMMON = {"schema_version", "kind", "name", "window"}

# kind -> (required fields, optional fields)
KINDS = {
    "triplets": ({"n_states", "triplets"}, {"diag"}),
    "branching": ({"b"}, {"max_offspring"}),
    "pure_birth": (set(), {"coef", "offset", "power"}),
    "immigration_resurrection": ({"c", "h"}, set()),
    "branching_immigration_resurrection": ({"b", "c", "h"}, {"max_offspring"}),
}


@dataclass
class ModelFile:
    """A loaded model: a generator ``r``, a perturbation ``a``, or both.

    ``generator`` is ``r + a`` when both are present.
    """

    kind: str
    name: str
    r: RateMatrix | None
    a: BoundedPerturbation | None
    window: Window | None
    source: str = "<string>"

    @property
    def generator(self) -> RateMatrix:
        if self.r is not None and self.a is not None:
            return perturb(self.r, self.a)
        if self.r is not None:
            return self.r
        return self.a.inner

    @property
    def gamma(self) -> float | None:
        return None if self.a is None else self.a.gamma

    def as_perturbation(self, window: Window | None = None) -> BoundedPerturbation:
        """The perturbation part; a plain generator is wrapped with ``gamma`` from ``window``."""
        if self.a is not None:
            return self.a
        window = window or self.window
        bound = self.generator.support_bound
        if window is None and bound is not None:
            window = Window(bound)
        if window is None:
            raise ModelFileError(f"{self.source}: a 'window' is needed to bound the rates of "
                                 f"this {self.kind} model when it is used as a perturbation")
        return BoundedPerturbation.from_rate_matrix(self.generator, window)


def _lines(node) -> dict:
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value if isinstance(k, yaml.ScalarNode)}


def _numbers(source, lines, data, key, *, integer=False, nested=False):
    val = data[key]
    where = f"{source}: line {lines.get(key, '?')}: field '{key}'"
    try:
        if nested:
            if not isinstance(val, list) or not all(isinstance(t, list) and len(t) == 3 for t in val):
                raise TypeError
            return [(int(i), int(j), float(r)) for i, j, r in val]
        if isinstance(val, list):
            if not val or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in val):
                raise TypeError
            return [float(x) for x in val]
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise TypeError
        return int(val) if integer else float(val)
    except (TypeError, ValueError):
        shape = "a list of [i, j, rate] triplets" if nested else (
            "an integer" if integer else "a number or a list of numbers")
        raise ModelFileError(f"{where}: expected {shape}, got {val!r}") from None


def parse_model(text: str, source: str = "<string>") -> ModelFile:
    """Parse model-file text; see the module docstring for the format."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f"line {mark.line + 1}: " if mark is not None else ""
        raise ModelFileError(f"{source}: {line}YAML syntax error: "
                             f"{getattr(exc, 'problem', None) or exc}") from None
    if not isinstance(data, dict):
        raise ModelFileError(f"{source}: line 1: a model file must be a mapping of fields")
    lines = _lines(node)

    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ModelFileError(f"{source}: line {lines.get('schema_version', 1)}: field "
                             f"'schema_version' must be {SCHEMA_VERSION}, got {version!r}")
    kind = data.get("kind")
    if kind not in KINDS:
        raise ModelFileError(f"{source}: line {lines.get('kind', 1)}: field 'kind' must be one of "
                             f"{sorted(KINDS)}, got {kind!r}")
    required, optional = KINDS[kind]
    for key in data:
        if key not in _COMMON | required | optional:
            raise ModelFileError(f"{source}: line {lines.get(key, '?')}: unknown field {key!r} "
                                 f"for kind {kind!r}")
    missing = sorted(required - set(data))
    if missing:
        raise ModelFileError(f"{source}: missing field(s) {missing} for kind {kind!r}")

    def num(key, **kw):
        return _numbers(source, lines, data, key, **kw)

    window = Window(num("window", integer=True)) if "window" in data else None
    name = str(data.get("name", Path(source).stem))
    r = a = None
    if kind == "triplets":
        n = num("n_states", integer=True)
        diag = num("diag") if "diag" in data else None
        r = RateMatrix.from_triplets(n, num("triplets", nested=True), diag, name=name)
    elif kind == "pure_birth":
        kw = {k: num(k) for k in ("coef", "offset", "power") if k in data}
        r = pure_birth(**kw)
    elif kind == "immigration_resurrection":
        a = immigration_resurrection(num("c"), num("h"))
    else:
        mo = num("max_offspring", integer=True) if "max_offspring" in data else None
        r = branching_qmatrix(num("b"), mo)
        if kind == "branching_immigration_resurrection":
            a = immigration_resurrection(num("c"), num("h"))
    return ModelFile(kind, name, r, a, window, source)


def load_model(path) -> ModelFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ModelFileError(f"{path}: cannot read model file ({exc.strerror})") from None
    return parse_model(text, str(path))

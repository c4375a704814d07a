"""Variable schema and per-variable encodings.

The model sees every variable through :func:`encode`, which maps a canonical
value (a score, a lab value in its declared unit, a label) to a block of
real-valued visible units plus a presence mask.  :func:`decode` inverts it.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import yaml

SCHEMA_VERSION = "1.0"

CATEGORIES = ("ADAS", "MMSE", "Laboratory", "Clinical", "Background")


class SchemaError(ValueError):
    pass


class NonPositiveValue(SchemaError):
    pass


class OutOfRange(SchemaError):
    pass


class UnknownLabel(SchemaError):
    pass


class UnknownVariable(SchemaError, KeyError):
    pass


@dataclass(frozen=True)
class VariableKind:
    """One of ``continuous_positive``, ``binary``, ``ordinal`` or ``categorical``.

    Binary kinds may carry a pair of labels ``(false_label, true_label)`` so
    that e.g. ``"female"`` encodes to 1.
    """

    name: str
    min: int | None = None
    max: int | None = None
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.name not in ("continuous_positive", "binary", "ordinal", "categorical"):
            raise SchemaError(f"unknown variable kind {self.name!r}")
        if self.name == "ordinal" and not (self.min is not None and self.max is not None and self.min < self.max):
            raise SchemaError("ordinal kind requires min < max")
        if self.name == "categorical" and (len(self.labels) < 2 or len(set(self.labels)) != len(self.labels)):
            raise SchemaError("categorical kind requires at least 2 distinct labels")
        if self.name == "binary" and self.labels and len(self.labels) != 2:
            raise SchemaError("binary labels must be a (false, true) pair")

    @property
    def width(self) -> int:
        if self.name == "ordinal":
            return self.max - self.min + 1
        if self.name == "categorical":
            return len(self.labels)
        return 1

    @property
    def unit_type(self) -> str:
        """Visible unit family used by the model for this kind."""
        if self.name == "continuous_positive":
            return "continuous"
        if self.name == "binary":
            return "binary"
        return "onehot"


def continuous() -> VariableKind:
    return VariableKind("continuous_positive")


def binary(false_label: str | None = None, true_label: str | None = None) -> VariableKind:
    labels = (false_label, true_label) if true_label is not None else ()
    return VariableKind("binary", labels=labels)


def ordinal(lo: int, hi: int) -> VariableKind:
    return VariableKind("ordinal", min=lo, max=hi)


def categorical(labels: Sequence[str]) -> VariableKind:
    return VariableKind("categorical", labels=tuple(labels))


@dataclass(frozen=True)
class VariableSpec:
    name: str
    category: str
    kind: VariableKind
    temporal: bool
    unit: str = "-"
    note: str = ""

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise SchemaError(f"unknown category {self.category!r}")
        if (self.category == "Background") == self.temporal:
            raise SchemaError(f"{self.name}: background variables are static, all others temporal")

    @property
    def width(self) -> int:
        return self.kind.width


@dataclass(frozen=True)
class TransformState:
    mean_log: float
    std_log: float

    def __post_init__(self):
        if not self.std_log > 0:
            raise SchemaError("std_log must be strictly positive")


IDENTITY = TransformState(0.0, 1.0)


def fit_transform(values: Iterable[float]) -> TransformState:
    """Fit the log-standardization for one positive continuous variable."""
    x = np.asarray(list(values), dtype=float)
    if x.size == 0:
        raise SchemaError("fit_transform needs at least one value")
    if np.any(~(x > 0)):
        raise NonPositiveValue("log-standardization requires strictly positive values")
    logs = np.log(x)
    std = float(logs.std())
    return TransformState(float(logs.mean()), std if std >= 1e-12 else 1.0)


ADAS_COMPONENTS = (
    ("Commands", 5),
    ("Comprehension", 5),
    ("Construction", 5),
    ("Delayed Word Recall", 10),
    ("Ideational", 5),
    ("Instructions", 5),
    ("Naming", 5),
    ("Orientation", 8),
    ("Spoken Language", 5),
    ("Word Finding", 5),
    ("Word Recall", 10),
    ("Word Recognition", 12),
)
MMSE_COMPONENTS = (
    ("Attention and Calculation", 5),
    ("Language", 9),
    ("Orientation", 10),
    ("Recall", 3),
    ("Registration", 3),
)
LABS = (
    ("Alanine aminotransferase", "ukat/l"),
    ("Alkaline phosphatase", "ukat/l"),
    ("Aspartate aminotransferase", "ukat/l"),
    ("Cholesterol", "mmol/l"),
    ("Creatine kinase", "iu/cl"),
    ("Creatinine", "mg/dl"),
    ("Gamma glutamyl transferase", "iu/dl"),
    ("Hematocrit", "counts"),
    ("Hemoglobin", "g/dl"),
    ("Hemoglobin a1c", "%"),
    ("Indirect bilirubin", "mg/dl"),
    ("Potassium", "mmol/l"),
    ("Sodium", "mmol/cl"),
    ("Triglycerides", "g/l"),
)
CLINICAL = (
    ("Blood pressure (diastolic)", "mmHg"),
    ("Blood pressure (systolic)", "mmHg"),
    ("Heart rate", "bpm"),
    ("Weight", "kg"),
)
REGIONS = (
    "North America",
    "South America",
    "Western Europe",
    "Eastern Europe",
    "Asia",
    "Oceania",
    "Africa",
)
RACES = (
    "White",
    "Black or African American",
    "Asian",
    "American Indian or Alaska Native",
    "Native Hawaiian or Other Pacific Islander",
    "Other",
)

DELAYED_WORD_RECALL = "ADAS Delayed Word Recall"
ADAS11 = tuple(f"ADAS {n}" for n, _ in ADAS_COMPONENTS if f"ADAS {n}" != DELAYED_WORD_RECALL)
DROPOUT = "Dropout"
AGE = "Age"
RECALL_VARIABLES = ("MMSE Recall", "ADAS Word Recall", "ADAS Delayed Word Recall", "ADAS Word Recognition")


@dataclass
class Schema:
    variables: list[VariableSpec]
    version: str = SCHEMA_VERSION
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {v.name: i for i, v in enumerate(self.variables)}
        if len(self._index) != len(self.variables):
            raise SchemaError("duplicate variable names")

    def __len__(self):
        return len(self.variables)

    def __iter__(self):
        return iter(self.variables)

    def __contains__(self, name):
        return name in self._index

    def lookup(self, name: str) -> VariableSpec:
        try:
            return self.variables[self._index[name]]
        except KeyError:
            raise UnknownVariable(name) from None

    @property
    def temporal(self) -> list[VariableSpec]:
        return [v for v in self.variables if v.temporal]

    @property
    def static(self) -> list[VariableSpec]:
        return [v for v in self.variables if not v.temporal]

    @property
    def temporal_names(self) -> list[str]:
        return [v.name for v in self.temporal]

    @property
    def static_names(self) -> list[str]:
        return [v.name for v in self.static]

    @property
    def forecast_names(self) -> list[str]:
        """Temporal variables that are forecast targets (everything but dropout)."""
        return [n for n in self.temporal_names if n != DROPOUT]

    def count(self, temporal: bool) -> int:
        return sum(v.temporal == temporal for v in self.variables)

    def to_records(self) -> list[dict]:
        out = []
        for v in self.variables:
            rec = {"name": v.name, "category": v.category, "kind": v.kind.name,
                   "temporal": v.temporal, "unit": v.unit}
            if v.kind.name == "ordinal":
                rec["range"] = [v.kind.min, v.kind.max]
            if v.kind.labels:
                rec["labels"] = list(v.kind.labels)
            if v.note:
                rec["note"] = v.note
            out.append(rec)
        return out

    def dumps(self) -> str:
        return yaml.safe_dump({"version": self.version, "variables": self.to_records()},
                              sort_keys=False, allow_unicode=True)

    @classmethod
    def loads(cls, text: str) -> "Schema":
        doc = yaml.safe_load(text)
        variables = []
        for rec in doc["variables"]:
            kind = rec["kind"]
            if kind == "ordinal":
                k = ordinal(*rec["range"])
            elif kind == "categorical":
                k = categorical(rec["labels"])
            elif kind == "binary":
                k = binary(*rec["labels"]) if rec.get("labels") else binary()
            else:
                k = continuous()
            variables.append(VariableSpec(rec["name"], rec["category"], k, bool(rec["temporal"]),
                                          rec.get("unit", "-"), rec.get("note", "")))
        return cls(variables, version=str(doc.get("version", SCHEMA_VERSION)))

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def build_schema() -> Schema:
    """The fixed 44-variable schema (17 cognitive, 14 lab, 5 clinical, 8 background)."""
    vs: list[VariableSpec] = []
    for name, hi in ADAS_COMPONENTS:
        vs.append(VariableSpec(f"ADAS {name}", "ADAS", ordinal(0, hi), True, "counts"))
    for name, hi in MMSE_COMPONENTS:
        vs.append(VariableSpec(f"MMSE {name}", "MMSE", ordinal(0, hi), True, "counts"))
    for name, unit in LABS:
        vs.append(VariableSpec(name, "Laboratory", continuous(), True, unit))
    for name, unit in CLINICAL:
        vs.append(VariableSpec(name, "Clinical", continuous(), True, unit))
    vs.append(VariableSpec(DROPOUT, "Clinical", binary(), True, "-",
                           "1 for dropout before the next time point"))
    vs += [
        VariableSpec(AGE, "Background", continuous(), False, "years", "'>89' maps to 90"),
        VariableSpec("Region", "Background", categorical(REGIONS), False),
        VariableSpec("Initial diagnosis", "Background", binary("MCI", "AD"), False),
        VariableSpec("Past cardiovascular event", "Background", binary("no", "yes"), False),
        VariableSpec("ApoE4 allele count", "Background", ordinal(0, 2), False, "counts"),
        VariableSpec("Race", "Background", categorical(RACES), False),
        VariableSpec("Sex", "Background", binary("male", "female"), False, "-", "1 if female"),
        VariableSpec("Height", "Background", continuous(), False, "cm"),
    ]
    return Schema(vs)


def is_missing(value) -> bool:
    if value is None:
        return True
    if isinstance(value, str):
        return value.strip() == "" or value.strip().lower() in ("nan", "na", "missing")
    try:
        return math.isnan(value)
    except TypeError:
        return False


def _as_number(value, spec: VariableSpec) -> float:
    if isinstance(value, str):
        s = value.strip()
        if spec.name == AGE and s == ">89":
            return 90.0
        try:
            return float(s)
        except ValueError:
            raise OutOfRange(f"{spec.name}: cannot parse {value!r}") from None
    return float(value)


def to_code(value, spec: VariableSpec) -> float:
    """Map a canonical value to the numeric code used in cohort arrays.

    Codes are: the positive value for continuous variables, 0/1 for binary,
    the integer level for ordinal, and the label index for categorical.
    Missing values map to NaN.
    """
    if is_missing(value):
        return math.nan
    kind = spec.kind
    if kind.name == "categorical":
        if isinstance(value, str) and value in kind.labels:
            return float(kind.labels.index(value))
        raise UnknownLabel(f"{spec.name}: unknown label {value!r}")
    if kind.name == "binary":
        if kind.labels and isinstance(value, str) and value in kind.labels:
            return float(kind.labels.index(value))
        x = _as_number(value, spec)
        if x not in (0.0, 1.0):
            raise OutOfRange(f"{spec.name}: binary value must be 0 or 1, got {value!r}")
        return x
    x = _as_number(value, spec)
    if kind.name == "ordinal":
        if x != round(x) or not (kind.min <= x <= kind.max):
            raise OutOfRange(f"{spec.name}: {value!r} outside [{kind.min}, {kind.max}]")
        return x
    if not x > 0:
        raise NonPositiveValue(f"{spec.name}: {value!r} is not positive")
    return x


def from_code(code: float, spec: VariableSpec):
    if math.isnan(code):
        return None
    kind = spec.kind
    if kind.name == "categorical":
        return kind.labels[int(code)]
    if kind.name == "ordinal":
        return int(code)
    if kind.name == "binary":
        return int(code)
    return float(code)


def encode(value, spec: VariableSpec, state: TransformState | None = None):
    """Encode one canonical value; returns ``(vector, mask)`` of the spec's width."""
    vec, mask = encode_codes(np.array([to_code(value, spec)]), spec, state)
    return vec[0], mask[0]


def decode(vector, spec: VariableSpec, state: TransformState | None = None):
    vector = np.asarray(vector, dtype=float).reshape(1, -1)
    if vector.shape[1] != spec.width:
        raise SchemaError(f"{spec.name}: expected width {spec.width}, got {vector.shape[1]}")
    return from_code(decode_codes(vector, spec, state)[0], spec)


def encode_codes(codes: np.ndarray, spec: VariableSpec, state: TransformState | None = None):
    """Vectorized encode of numeric codes (NaN = missing).

    Returns ``(values, mask)`` with a trailing axis of the spec's width.
    """
    codes = np.asarray(codes, dtype=float)
    present = ~np.isnan(codes)
    kind = spec.kind
    out = np.zeros(codes.shape + (kind.width,))
    if kind.name == "continuous_positive":
        st = state or IDENTITY
        safe = np.where(present, codes, 1.0)
        if np.any(safe <= 0):
            raise NonPositiveValue(f"{spec.name}: non-positive value")
        out[..., 0] = np.where(present, (np.log(safe) - st.mean_log) / st.std_log, 0.0)
    elif kind.name == "binary":
        out[..., 0] = np.where(present, codes, 0.0)
    else:
        offset = kind.min if kind.name == "ordinal" else 0
        level = np.where(present, codes, offset).astype(int) - offset
        if np.any((level < 0) | (level >= kind.width)):
            raise OutOfRange(f"{spec.name}: code outside encodable range")
        np.put_along_axis(out, level[..., None], 1.0, axis=-1)
        out *= present[..., None]
    mask = np.broadcast_to(present[..., None], out.shape).copy()
    return out, mask


def decode_codes(values: np.ndarray, spec: VariableSpec, state: TransformState | None = None) -> np.ndarray:
    """Vectorized inverse of :func:`encode_codes` (always returns a code, never NaN)."""
    values = np.asarray(values, dtype=float)
    kind = spec.kind
    if kind.name == "continuous_positive":
        st = state or IDENTITY
        return np.exp(st.std_log * values[..., 0] + st.mean_log)
    if kind.name == "binary":
        return (values[..., 0] >= 0.5).astype(float)
    idx = np.argmax(values, axis=-1).astype(float)
    if kind.name == "ordinal":
        return np.clip(idx + kind.min, kind.min, kind.max)
    return idx


class Encoder:
    """Schema plus fitted transforms: cohort code arrays <-> encoded units.

    Temporal arrays carry the temporal variables on their last axis in schema
    order; static arrays likewise for the static variables.
    """

    def __init__(self, schema: Schema, transforms: dict[str, TransformState] | None = None):
        self.schema = schema
        self.transforms = dict(transforms or {})
        self.temporal_specs = schema.temporal
        self.static_specs = schema.static
        self.temporal_width = sum(v.width for v in self.temporal_specs)
        self.static_width = sum(v.width for v in self.static_specs)

    @classmethod
    def fit(cls, schema: Schema, temporal_codes: np.ndarray, static_codes: np.ndarray) -> "Encoder":
        """Fit log-standardization on (training-split) code arrays only."""
        transforms = {}
        for i, spec in enumerate(schema.temporal):
            if spec.kind.name == "continuous_positive":
                x = temporal_codes[..., i].ravel()
                transforms[spec.name] = fit_transform(x[~np.isnan(x)]) if np.any(~np.isnan(x)) else IDENTITY
        for i, spec in enumerate(schema.static):
            if spec.kind.name == "continuous_positive":
                x = static_codes[..., i].ravel()
                transforms[spec.name] = fit_transform(x[~np.isnan(x)]) if np.any(~np.isnan(x)) else IDENTITY
        return cls(schema, transforms)

    def _encode(self, codes, specs):
        codes = np.asarray(codes, dtype=float)
        parts = [encode_codes(codes[..., i], s, self.transforms.get(s.name)) for i, s in enumerate(specs)]
        return np.concatenate([p[0] for p in parts], -1), np.concatenate([p[1] for p in parts], -1)

    def _decode(self, values, specs):
        values = np.asarray(values, dtype=float)
        out, start = [], 0
        for s in specs:
            out.append(decode_codes(values[..., start:start + s.width], s, self.transforms.get(s.name)))
            start += s.width
        return np.stack(out, -1)

    def encode_temporal(self, codes):
        return self._encode(codes, self.temporal_specs)

    def encode_static(self, codes):
        return self._encode(codes, self.static_specs)

    def decode_temporal(self, values):
        return self._decode(values, self.temporal_specs)

    def decode_static(self, values):
        return self._decode(values, self.static_specs)

    def to_dict(self) -> dict:
        return {name: [t.mean_log, t.std_log] for name, t in sorted(self.transforms.items())}

    @classmethod
    def from_dict(cls, schema: Schema, d: dict) -> "Encoder":
        return cls(schema, {k: TransformState(float(m), float(s)) for k, (m, s) in d.items()})

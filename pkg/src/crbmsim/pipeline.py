"""Raw events -> 90-day bucketed patient frames -> training samples.

Time index ``k`` (0..6) covers the window centred on day ``90 k``:
``[-45, 45]`` for baseline and ``(90 k - 45, 90 k + 45]`` afterwards, so an
event exactly between two centres belongs to the earlier window.  Events
before day -45 (early screening) or after day 585 are dropped.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import schema as sc

N_TIMES = 7
DAYS_PER_STEP = 90
HALF_WINDOW = 45
MONTHS = tuple(3 * k for k in range(N_TIMES))
SPLIT_FRACTIONS = (0.70, 0.05, 0.25)
SPLITS = ("train", "validation", "test")


@dataclass
class Cohort:
    """Per-patient code arrays (NaN = missing).

    ``temporal`` is (n_patients, 7, n_temporal) and ``static`` is
    (n_patients, n_static), both in schema order.
    """

    schema: sc.Schema
    patient_ids: np.ndarray
    temporal: np.ndarray
    static: np.ndarray

    def __len__(self):
        return len(self.patient_ids)

    def index(self, ids) -> np.ndarray:
        pos = {p: i for i, p in enumerate(self.patient_ids)}
        return np.array([pos[p] for p in ids], dtype=int)

    def subset(self, ids) -> "Cohort":
        idx = self.index(ids)
        return Cohort(self.schema, self.patient_ids[idx], self.temporal[idx], self.static[idx])

    def column(self, name: str) -> np.ndarray:
        """Codes of one variable: (n, 7) for temporal, (n,) for static."""
        spec = self.schema.lookup(name)
        if spec.temporal:
            return self.temporal[..., self.schema.temporal_names.index(name)]
        return self.static[:, self.schema.static_names.index(name)]

    def adas_total(self) -> np.ndarray:
        """(n, 7) 11-component ADAS-Cog totals; NaN when any component is missing."""
        return np.sum([self.column(n) for n in sc.ADAS11], axis=0)

    def to_long(self) -> pd.DataFrame:
        rows = []
        tn, sn = self.schema.temporal_names, self.schema.static_names
        for i, pid in enumerate(self.patient_ids):
            for j, name in enumerate(sn):
                c = self.static[i, j]
                if not np.isnan(c):
                    rows.append((pid, "", name, _fmt_code(c, self.schema.lookup(name))))
            for k in range(N_TIMES):
                for j, name in enumerate(tn):
                    c = self.temporal[i, k, j]
                    if not np.isnan(c):
                        rows.append((pid, MONTHS[k], name, _fmt_code(c, self.schema.lookup(name))))
        return pd.DataFrame(rows, columns=["patient_id", "month", "variable", "value"])


def _fmt_code(code, spec):
    v = sc.from_code(code, spec)
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def time_index(day):
    """Window index for event days; -1 for days outside every window."""
    day = np.asarray(day, dtype=float)
    k = np.where(day <= HALF_WINDOW, 0, np.ceil((day - HALF_WINDOW) / DAYS_PER_STEP))
    ok = (day >= -HALF_WINDOW) & (k < N_TIMES)
    return np.where(ok, k, -1).astype(int)


def read_events(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"patient_id": str, "variable": str, "value": str})
    missing = {"patient_id", "variable", "day", "value"} - set(df.columns)
    if missing:
        raise ValueError(f"event file lacks columns {sorted(missing)}")
    return df


def _round_half_up(x):
    return np.floor(x + 0.5)


def bucket_events(events: pd.DataFrame, schema: sc.Schema) -> Cohort:
    """Aggregate raw events into a :class:`Cohort`.

    Temporal values are averaged within their window (ordinal averages are
    rounded half up).  Static values are averaged across all events (binary
    and ordinal rounded half up; categorical takes the most frequent label,
    earliest label index on ties).  The dropout flag is derived, see
    :func:`_dropout_flags`.
    """
    unknown = sorted(set(events["variable"]) - {v.name for v in schema})
    if unknown:
        raise sc.UnknownVariable(f"unknown variables: {unknown}")
    ids = np.array(sorted(set(events["patient_id"])), dtype=object)
    pos = {p: i for i, p in enumerate(ids)}
    tn, sn = schema.temporal_names, schema.static_names
    temporal = np.full((len(ids), N_TIMES, len(tn)), np.nan)
    static = np.full((len(ids), len(sn)), np.nan)

    events = events.reset_index(drop=True)
    codes = np.empty(len(events))
    for name, grp in events.groupby("variable", sort=True):
        spec = schema.lookup(name)
        codes[grp.index.to_numpy()] = [sc.to_code(v, spec) for v in grp["value"]]
    df = pd.DataFrame({"p": events["patient_id"].map(pos).to_numpy(), "variable": events["variable"].to_numpy(),
                       "k": time_index(events["day"].to_numpy()), "code": codes, "day": events["day"].to_numpy()})
    df = df[~np.isnan(df["code"])]

    for name, grp in df.groupby("variable", sort=True):
        spec = schema.lookup(name)
        if name == sc.DROPOUT:
            continue
        if spec.temporal:
            g = grp[grp["k"] >= 0].groupby(["p", "k"])["code"].mean()
            vals = g.to_numpy()
            if spec.kind.name in ("ordinal", "binary"):
                vals = _round_half_up(vals)
            p_idx, k_idx = (np.array(a) for a in zip(*g.index)) if len(g) else (np.array([], int),) * 2
            temporal[p_idx, k_idx, tn.index(name)] = vals
        else:
            j = sn.index(name)
            if spec.kind.name == "categorical":
                counts = grp.groupby(["p", "code"]).size().reset_index(name="n")
                counts = counts.sort_values(["p", "n", "code"], ascending=[True, False, True])
                first = counts.drop_duplicates("p")
                static[first["p"].to_numpy(), j] = first["code"].to_numpy()
            else:
                g = grp.groupby("p")["code"].mean()
                vals = g.to_numpy()
                if spec.kind.name in ("ordinal", "binary"):
                    vals = _round_half_up(vals)
                static[g.index.to_numpy(), j] = vals

    if sc.DROPOUT in tn:
        d = df[df["variable"] == sc.DROPOUT]
        temporal[..., tn.index(sc.DROPOUT)] = _dropout_flags(temporal, tn, d)
    return Cohort(schema, ids.astype(str), temporal, static)


def _dropout_flags(temporal, names, dropout_events):
    """Frame t is 1 iff a dropout event falls in days (90t, 90(t+1)] and the
    patient has no observed data after t; 0 on other frames with data; frames
    after the dropout stay missing."""
    j = names.index(sc.DROPOUT)
    others = np.delete(temporal, j, axis=-1)
    has_data = ~np.all(np.isnan(others), axis=-1)
    flags = np.where(has_data, 0.0, np.nan)
    last = np.where(has_data.any(1), N_TIMES - 1 - np.argmax(has_data[:, ::-1], axis=1), -1)
    events = dropout_events[dropout_events["code"] > 0.5]
    for p, day in zip(events["p"].to_numpy(), events["day"].to_numpy().astype(float)):
        t = int(max(math.ceil(day / DAYS_PER_STEP) - 1, 0))
        if t >= N_TIMES or last[p] > t:
            continue
        flags[p, t] = 1.0
        flags[p, t + 1:] = np.nan
    return flags


def select_patients(cohort: Cohort) -> list[str]:
    """Patients with all 11 ADAS-Cog components at month 15 or 18."""
    comps = np.stack([cohort.column(n) for n in sc.ADAS11], -1)
    valid = ~np.isnan(comps).any(-1)
    keep = valid[:, 5] | valid[:, 6]
    return [str(p) for p in cohort.patient_ids[keep]]


def split_patients(ids, seed: int) -> dict[str, str]:
    """Random 70/5/25 train/validation/test split by patient.

    Train and validation sizes are floored; the remainder goes to test.
    """
    ids = sorted(set(map(str, ids)))
    if not ids:
        raise ValueError("no patients to split")
    n = len(ids)
    n_train = int(math.floor(SPLIT_FRACTIONS[0] * n + 1e-9))
    n_val = int(math.floor(SPLIT_FRACTIONS[1] * n + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = "train" if rank < n_train else ("validation" if rank < n_train + n_val else "test")
    return out


@dataclass
class TrainingSamples:
    """Adjacent-time-point samples laid out as ``[static | x_t | x_{t+1}]``."""

    v: np.ndarray
    mask: np.ndarray
    patient_id: np.ndarray
    t: np.ndarray

    def __len__(self):
        return len(self.v)

    def take(self, idx) -> "TrainingSamples":
        return TrainingSamples(self.v[idx], self.mask[idx], self.patient_id[idx], self.t[idx])


def encode_cohort(cohort: Cohort, encoder: sc.Encoder):
    """Encoded (values, mask) for temporal (n, 7, width) and static (n, width)."""
    xt, mt = encoder.encode_temporal(cohort.temporal)
    xs, ms = encoder.encode_static(cohort.static)
    return xt, mt, xs, ms


def make_pairs(cohort: Cohort, encoder: sc.Encoder, seed: int | None = None) -> TrainingSamples:
    """Six (t, t+1) samples per patient; shuffled when ``seed`` is given."""
    xt, mt, xs, ms = encode_cohort(cohort, encoder)
    n = len(cohort)
    steps = N_TIMES - 1
    v = np.concatenate([np.repeat(xs[:, None], steps, 1), xt[:, :-1], xt[:, 1:]], -1)
    m = np.concatenate([np.repeat(ms[:, None], steps, 1), mt[:, :-1], mt[:, 1:]], -1)
    out = TrainingSamples(v.reshape(n * steps, -1), m.reshape(n * steps, -1),
                          np.repeat(cohort.patient_ids, steps), np.tile(np.arange(steps), n))
    if seed is not None:
        out = out.take(np.random.default_rng(seed).permutation(len(out)))
    return out


# --- processed store ------------------------------------------------------

def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_")


def write_store(cohort: Cohort, path) -> dict:
    """One CSV per variable (``patient_id,time_index,value``) plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": cohort.schema.version, "schema_hash": cohort.schema.hash(),
                "n_patients": len(cohort), "patients": [str(p) for p in cohort.patient_ids], "variables": {}}
    (path / "schema.yaml").write_text(cohort.schema.dumps())
    for spec in cohort.schema:
        codes = cohort.column(spec.name)
        if spec.temporal:
            p, k = np.nonzero(~np.isnan(codes))
            vals = codes[p, k]
        else:
            p = np.flatnonzero(~np.isnan(codes))
            k = np.full(p.size, -1)
            vals = codes[p]
        fname = _safe_name(spec.name) + ".csv"
        pd.DataFrame({"patient_id": cohort.patient_ids[p], "time_index": k,
                      "value": [_fmt_code(c, spec) for c in vals]}).to_csv(path / fname, index=False)
        manifest["variables"][spec.name] = {"file": fname, "rows": int(p.size)}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_store(path, variables=None) -> Cohort:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    full = sc.Schema.loads((path / "schema.yaml").read_text())
    if manifest["schema_hash"] != full.hash():
        raise ValueError("processed store schema does not match its manifest")
    schema = full if variables is None else sc.Schema([full.lookup(v) for v in variables], full.version)
    ids = np.array(manifest["patients"], dtype=str)
    pos = {p: i for i, p in enumerate(ids)}
    tn, sn = schema.temporal_names, schema.static_names
    temporal = np.full((len(ids), N_TIMES, len(tn)), np.nan)
    static = np.full((len(ids), len(sn)), np.nan)
    for spec in schema:
        info = manifest["variables"][spec.name]
        df = pd.read_csv(path / info["file"], dtype={"patient_id": str, "value": str})
        if len(df) != info["rows"]:
            raise ValueError(f"{info['file']}: expected {info['rows']} rows, found {len(df)}")
        p = df["patient_id"].map(pos).to_numpy()
        codes = np.array([sc.to_code(v, spec) for v in df["value"]], dtype=float)
        if spec.temporal:
            temporal[p, df["time_index"].to_numpy(), tn.index(spec.name)] = codes
        else:
            static[p, sn.index(spec.name)] = codes
    return Cohort(schema, ids, temporal, static)


@dataclass
class DatasetConfig:
    """Dataset assembly config (YAML)::

        variables: all          # or a list of variable names
        split_seed: 0
        select: true            # keep only patients with a valid late ADAS-Cog
    """

    variables: list | str = "all"
    split_seed: int = 0
    select: bool = True
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_yaml(cls, text: str) -> "DatasetConfig":
        doc = yaml.safe_load(text) or {}
        known = {k: doc.pop(k) for k in ("variables", "split_seed", "select") if k in doc}
        return cls(**known, extra=doc)


@dataclass
class Dataset:
    cohort: Cohort
    splits: dict[str, str]
    encoder: sc.Encoder

    def ids(self, split: str) -> list[str]:
        return [p for p in self.cohort.patient_ids if self.splits.get(p) == split]

    def part(self, split: str) -> Cohort:
        return self.cohort.subset(self.ids(split))

    def samples(self, split: str, seed: int | None = None) -> TrainingSamples:
        return make_pairs(self.part(split), self.encoder, seed)


def assemble_dataset(cohort: Cohort, config: DatasetConfig | None = None) -> Dataset:
    """Select patients, split them, and fit transforms on the training split only."""
    config = config or DatasetConfig()
    if config.variables != "all":
        schema = sc.Schema([cohort.schema.lookup(v) for v in config.variables], cohort.schema.version)
        tidx = [cohort.schema.temporal_names.index(n) for n in schema.temporal_names]
        sidx = [cohort.schema.static_names.index(n) for n in schema.static_names]
        cohort = Cohort(schema, cohort.patient_ids, cohort.temporal[..., tidx], cohort.static[:, sidx])
    ids = select_patients(cohort) if config.select else list(cohort.patient_ids)
    cohort = cohort.subset(ids)
    splits = split_patients(ids, config.split_seed)
    train = cohort.subset([p for p in cohort.patient_ids if splits[p] == "train"])
    encoder = sc.Encoder.fit(cohort.schema, train.temporal, train.static)
    return Dataset(cohort, splits, encoder)

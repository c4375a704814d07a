"""Model container: an ``.npz`` of little-endian float64 tensors plus a JSON
header (format version, layout, schema hash, transforms, training metadata).

``export_json`` writes the same content as plain text; Python float repr is
round-trip exact, so ``import_json(export_json(m))`` reproduces every bit.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import schema as sc
from .crbm import CRBM, CrbmParams
from .layout import VisibleLayout

FORMAT = "crbmsim-model"
FORMAT_VERSION = 1
TENSORS = ("W", "a", "log_sigma", "b", "log_eps")


class SchemaMismatch(ValueError):
    pass


@dataclass
class ModelBundle:
    model: CRBM
    schema: sc.Schema | None = None
    encoder: sc.Encoder | None = None
    metadata: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format": FORMAT,
            "format_version": FORMAT_VERSION,
            "layout": self.model.layout.descriptor(),
            "n_hidden": self.model.params.n_hidden,
            "schema": None if self.schema is None else self.schema.dumps(),
            "schema_hash": None if self.schema is None else self.schema.hash(),
            "transforms": None if self.encoder is None else self.encoder.to_dict(),
            "metadata": self.metadata,
        }

    def check_schema(self, schema: sc.Schema):
        if self.schema is not None and self.schema.hash() != schema.hash():
            raise SchemaMismatch("model schema hash differs from dataset schema hash")


def _from_header(header: dict, tensors: dict) -> ModelBundle:
    if header.get("format") != FORMAT:
        raise ValueError("not a crbmsim model file")
    if header.get("format_version", 0) > FORMAT_VERSION:
        raise ValueError(f"model format {header['format_version']} is newer than supported {FORMAT_VERSION}")
    layout = VisibleLayout.from_descriptor(header["layout"])
    params = CrbmParams(*(np.asarray(tensors[k], dtype=np.float64) for k in TENSORS))
    schema = sc.Schema.loads(header["schema"]) if header.get("schema") else None
    if schema is not None and schema.hash() != header.get("schema_hash"):
        raise SchemaMismatch("embedded schema does not match its recorded hash")
    encoder = None
    if schema is not None and header.get("transforms") is not None:
        encoder = sc.Encoder.from_dict(schema, header["transforms"])
    return ModelBundle(CRBM(layout, params), schema, encoder, header.get("metadata") or {})


def save(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.ascontiguousarray(getattr(bundle.model.params, k), dtype="<f8") for k in TENSORS}
    header = np.frombuffer(json.dumps(bundle.header(), sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, header=header, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load(path) -> ModelBundle:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(z["header"].tobytes().decode())
        tensors = {k: z[k] for k in TENSORS}
    return _from_header(header, tensors)


def export_json(bundle: ModelBundle) -> str:
    doc = bundle.header()
    doc["tensors"] = {k: {"shape": list(getattr(bundle.model.params, k).shape),
                          "values": getattr(bundle.model.params, k).ravel().tolist()} for k in TENSORS}
    return json.dumps(doc, sort_keys=True, indent=1)


def import_json(text: str) -> ModelBundle:
    doc = json.loads(text)
    tensors = {k: np.array(t["values"], dtype=np.float64).reshape(t["shape"]) for k, t in doc["tensors"].items()}
    return _from_header(doc, tensors)

"""Shared file helpers: versioned JSON documents and header+body matrices."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, doc) -> None:
    Path(path).write_text(dumps(doc))


def read_json(path, schema: str | None = None) -> dict:
    """Load a JSON document, optionally requiring ``schema`` to match.

    The schema field looks like ``"rigforge.mesh-mask/1"``; only the name part is
    compared so readers accept any version they know how to parse.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if schema is not None:
        found = doc.get("schema") if isinstance(doc, dict) else None
        if not isinstance(found, str) or found.split("/")[0] != schema:
            raise FormatError(f"{path}: expected schema {schema!r}, got {found!r}")
    return doc


def read_matrix(header_path) -> tuple[np.ndarray, dict]:
    """Read a matrix stored as a JSON header plus a CSV or raw float32 body.

    Header keys: ``schema``, ``dim`` (columns), ``body`` (path relative to the
    header), ``encoding`` (``"csv"`` or ``"f32le"``), plus free metadata such as
    ``rate`` or ``window_seconds``.
    """
    header_path = Path(header_path)
    header = read_json(header_path)
    for key in ("dim", "body"):
        if key not in header:
            raise FormatError(f"{header_path}: matrix header missing {key!r}")
    dim = int(header["dim"])
    body = header_path.parent / header["body"]
    if not body.exists():
        raise ValidationError(f"file not found: {body}")
    encoding = header.get("encoding", "csv")
    if encoding == "csv":
        data = np.loadtxt(body, delimiter=",", ndmin=2, dtype=np.float64)
    elif encoding == "f32le":
        raw = np.fromfile(body, dtype="<f4").astype(np.float64)
        if raw.size % dim:
            raise FormatError(f"{body}: {raw.size} floats is not a multiple of dim {dim}")
        data = raw.reshape(-1, dim)
    else:
        raise FormatError(f"{header_path}: unknown encoding {encoding!r}")
    if data.size == 0:
        data = data.reshape(0, dim)
    if data.shape[1] != dim:
        raise FormatError(f"{body}: {data.shape[1]} columns, header says {dim}")
    return data, header


def write_matrix(header_path, data, schema: str, encoding: str = "csv", **meta) -> None:
    header_path = Path(header_path)
    data = np.asarray(data, dtype=np.float64)
    suffix = ".csv" if encoding == "csv" else ".f32"
    body = header_path.with_suffix(suffix)
    if body == header_path:
        raise ValidationError(f"{header_path}: header and body would share one file; use a .json header")
    if encoding == "csv":
        np.savetxt(body, data, delimiter=",", fmt="%.17g")
    elif encoding == "f32le":
        data.astype("<f4").tofile(body)
    else:
        raise FormatError(f"unknown encoding {encoding!r}")
    header = {"schema": schema, "dim": int(data.shape[1]), "body": body.name, "encoding": encoding}
    header.update(meta)
    write_json(header_path, header)

"""Run outputs: field dumps, CSV tables, JSON reports and run manifests."""

from __future__ import annotations
import csv
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, TypedDict, Union

import numpy as np
from funcnodes_core import Encdata, JSONEncoder
from funcnodes_core.utils.files import write_json_secure
from slugify import slugify

from ._errors import InvalidInputError, WarningRecord
from .field import CovarianceSpec, GridSpec, ParameterField, RawField

PathLike = Union[str, Path]


def encode_numpy(obj, preview=False):  # noqa: F841
    if isinstance(obj, np.ndarray):
        return Encdata(data=obj.tolist(), handeled=True, done=True, continue_preview=False)
    if isinstance(obj, np.bool_):
        return Encdata(data=bool(obj), handeled=True, done=True, continue_preview=False)
    if isinstance(obj, np.integer):
        return Encdata(data=int(obj), handeled=True, done=True, continue_preview=False)
    if isinstance(obj, np.floating):
        return Encdata(data=float(obj), handeled=True, done=True, continue_preview=False)
    return Encdata(data=obj, handeled=False)  # pragma: no cover


JSONEncoder.add_encoder(encode_numpy, [np.ndarray, np.bool_, np.integer, np.floating])


def write_json(data: Any, path: PathLike) -> Path:
    path = Path(path)
    write_json_secure(data=data, filepath=path, cls=JSONEncoder, indent=2)
    return path


FieldLike = Union[ParameterField, RawField]


def write_field_dump(field: FieldLike, path: PathLike) -> Path:
    """One JSON header line, then cells and faces as little-endian float64."""
    path = Path(path)
    header = {
        "kind": "parameter" if isinstance(field, ParameterField) else "raw",
        "grid": field.grid.describe(),
        "seed": field.seed,
        "covariance": (
            {"kind": field.cov.kind, "epsilon": field.cov.epsilon} if field.cov else None
        ),
        "clipped_mass": field.clipped_mass,
        "blocks": ["cells", "faces"],
        "dtype": "<f8",
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, cls=JSONEncoder).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(field.cells, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(field.faces, dtype="<f8").tobytes())
    return path


def read_field_dump(path: PathLike) -> Tuple[dict, FieldLike]:
    path = Path(path)
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except ValueError as exc:
        raise InvalidInputError(f"{path} is not a field dump") from exc
    g = header["grid"]
    grid = GridSpec(int(g["d"]), int(g["n"]), float(g["L"]))
    values = np.frombuffer(payload, dtype="<f8")
    if values.size != grid.size * (1 + grid.d):
        raise InvalidInputError(f"{path}: payload does not match the grid")
    cells = values[: grid.size].reshape(grid.shape).copy()
    faces = values[grid.size :].reshape((grid.d,) + grid.shape).copy()
    cov = header.get("covariance")
    kwargs = dict(
        grid=grid,
        cells=cells,
        faces=faces,
        seed=header.get("seed"),
        clipped_mass=float(header.get("clipped_mass", 0.0)),
        cov=CovarianceSpec(cov["kind"], cov["epsilon"]) if cov else None,
    )
    cls = ParameterField if header.get("kind") == "parameter" else RawField
    return header, cls(**kwargs)


def _format(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if value is None:
        return ""
    return str(value)


def write_csv(
    rows: Sequence[Dict[str, Any]], path: PathLike, columns: Optional[List[str]] = None
) -> Path:
    """Writes ``rows`` with round-trip float formatting, byte-stable across runs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row.get(c)) for c in columns])
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


class RunManifest(TypedDict):
    command: str
    config_hash: str
    master_seed: int
    version: str
    started: str
    finished: str
    config: str
    outputs: List[str]
    warnings: List[WarningRecord]


def timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def run_directory(base: PathLike, command: str, config_path: PathLike) -> Path:
    """``<base>/<command>-<slug of the config file name>``."""
    return Path(base) / f"{command}-{slugify(Path(config_path).stem)}"


def copy_config(raw: bytes, directory: PathLike, name: str) -> Path:
    target = Path(directory) / name
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(raw)
    return target


def write_manifest(manifest: RunManifest, directory: PathLike) -> Path:
    return write_json(manifest, Path(directory) / "manifest.json")


__all__ = [
    "RunManifest",
    "encode_numpy",
    "write_json",
    "write_field_dump",
    "read_field_dump",
    "write_csv",
    "read_csv",
    "timestamp",
    "run_directory",
    "copy_config",
    "write_manifest",
]

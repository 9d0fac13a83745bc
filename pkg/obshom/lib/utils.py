import os
import io
import csv
import json
import logging
import tempfile

import numpy as np

from obshom.lib.errors import ConfigError
from obshom.lib.grid import CellMask, Grid, ScalarField

logger = logging.getLogger(__name__)

logging.getLogger("numba").setLevel(logging.WARNING)


class HParams:
    """
    A class for storing and accessing nested parameters with attribute syntax.
    """

    def __init__(self, **kwargs):
        for k, v in kwargs.items():
            self[k] = HParams(**v) if isinstance(v, dict) else v

    def keys(self):
        return self.__dict__.keys()

    def items(self):
        return self.__dict__.items()

    def values(self):
        return self.__dict__.values()

    def get(self, key, default=None):
        return self.__dict__.get(key, default)

    def to_dict(self):
        return {
            k: v.to_dict() if isinstance(v, HParams) else v for k, v in self.items()
        }

    def __len__(self):
        return len(self.__dict__)

    def __getitem__(self, key):
        return self.__dict__[key]

    def __setitem__(self, key, value):
        self.__dict__[key] = value

    def __contains__(self, key):
        return key in self.__dict__

    def __repr__(self):
        return repr(self.__dict__)


def load_json(path):
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError as error:
        raise ConfigError(f"File not found: {path}") from error
    except json.JSONDecodeError as error:
        raise ConfigError(f"Invalid JSON in {path}: {error}") from error


def atomic_write(path, data):
    """
    Write ``data`` (bytes or str) to ``path`` through a temporary file and a rename,
    so readers never observe a half-written file.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray, memoryview)) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_json(path, payload):
    atomic_write(path, json.dumps(payload, indent=2, allow_nan=True) + "\n")


def write_csv(path, header, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format_cell(row[key]) for key in header])
    atomic_write(path, buffer.getvalue())


def _format_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


def grid_metadata(grid):
    return {
        "dim": grid.dim,
        "shape": list(grid.shape),
        "spacing": grid.spacing,
        "origin": list(grid.origin),
        "topology": grid.topology,
    }


def grid_from_metadata(meta):
    try:
        return Grid(
            int(meta["dim"]),
            tuple(meta["shape"]),
            float(meta["spacing"]),
            tuple(meta["origin"]),
            meta["topology"],
        )
    except KeyError as error:
        raise ConfigError(f"Field metadata is missing {error}") from error


def save_field(path, field):
    """
    Save a ScalarField or CellMask as ``<path>`` (JSON metadata) next to a raw value file.

    Fields are stored as little-endian float64, masks as uint8 0/1, both row-major.

    Args:
        path (str): Metadata file path, usually ending in ``.json``.
        field (ScalarField or CellMask): What to store.
    """
    stem = os.path.splitext(os.path.basename(path))[0]
    if isinstance(field, CellMask):
        kind, value_file = "mask", stem + ".u8"
        raw = field.flags.astype("u1").tobytes(order="C")
    else:
        kind, value_file = "field", stem + ".f8"
        raw = field.values.astype("<f8").tobytes(order="C")
    meta = grid_metadata(field.grid)
    meta.update({"kind": kind, "values": value_file})
    atomic_write(os.path.join(os.path.dirname(os.path.abspath(path)), value_file), raw)
    write_json(path, meta)


def load_field(path):
    meta = load_json(path)
    grid = grid_from_metadata(meta)
    value_path = os.path.join(os.path.dirname(os.path.abspath(path)), meta["values"])
    if not os.path.exists(value_path):
        raise ConfigError(f"Value file not found: {value_path}")
    is_mask = meta.get("kind", "field") == "mask"
    values = np.fromfile(value_path, dtype="u1" if is_mask else "<f8")
    if values.size != grid.size:
        raise ConfigError(
            f"{value_path} holds {values.size} values, metadata expects {grid.size}"
        )
    if is_mask:
        return CellMask(grid, values.reshape(grid.shape).astype(bool))
    return ScalarField(grid, values.reshape(grid.shape))

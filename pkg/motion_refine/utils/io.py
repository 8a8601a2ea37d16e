import json
import os
from typing import Optional, Sequence, Type

import numpy as np

from motion_refine.errors import FileFormatError


def read_json(path) -> dict:
    """ Reads a JSON document, raising FileFormatError on malformed text """
    with open(path, "r") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise FileFormatError("<document>", f"invalid JSON ({e.msg})", path)


def write_json(path, doc: dict):
    """ Writes a JSON document; float repr makes the output byte-stable """
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, allow_nan=False)
        f.write("\n")


def require(
    doc: dict, field: str, path=None, error: Type[FileFormatError] = FileFormatError
):
    if not isinstance(doc, dict) or field not in doc:
        raise error(field, "missing", path)
    return doc[field]


def as_array(
    value,
    field: str,
    shape: Optional[Sequence[Optional[int]]] = None,
    path=None,
    error: Type[FileFormatError] = FileFormatError,
) -> np.ndarray:
    """Converts a JSON value to a float64 array and checks its shape.

    ``None`` entries of ``shape`` match any extent.
    """
    try:
        array = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise error(field, "not a numeric array", path)

    if shape is not None:
        if array.ndim != len(shape) or any(
            want is not None and have != want for have, want in zip(array.shape, shape)
        ):
            expected = "x".join("*" if s is None else str(s) for s in shape)
            raise error(field, f"expected shape {expected}, got {array.shape}", path)

    if not np.all(np.isfinite(array)):
        raise error(field, "non-finite value", path)
    return array

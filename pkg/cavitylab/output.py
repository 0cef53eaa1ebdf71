import csv
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Union

import orjson

from . import __version__

JSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY


def dumps(obj: Any) -> bytes:
    """Deterministic JSON: sorted keys, numpy arrays as lists, NaN and inf as null."""
    return orjson.dumps(obj, option=JSON_OPTIONS) + b"\n"


def record(command: str, config: Mapping[str, Any], result: Any) -> Dict[str, Any]:
    return {"command": command, "version": __version__, "config": dict(config), "result": result}


def write_json(path: Union[str, Path], obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(obj))
    return path


def write_csv(path: Union[str, Path], rows: Iterable[Mapping[str, Any]]) -> Path:
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path

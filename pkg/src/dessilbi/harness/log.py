"""JSON-lines path log.

One self-contained object per line, each carrying ``schema`` and ``kind``
(``header``, ``epoch``, ``grow``, ``diagnostic``, ``error``, ``summary``).
Lines are flushed as they are written, so a crash leaves every complete
line readable.
"""
import json
from pathlib import Path

import numpy as np

from ..errors import FormatError, NotFoundError

SCHEMA = "dessilbi.path/1"


def _default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(record):
    return json.dumps(record, default=_default, allow_nan=False, separators=(",", ":"))


class PathLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def write(self, kind, **fields):
        record = {"schema": SCHEMA, "kind": kind, **fields}
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(dumps(record) + "\n")
            fh.flush()
        return record

    def epoch(self, rec):
        return self.write("epoch", **rec.to_dict())


def read_log(path, kind=None):
    """Parse a log; a torn final line (no newline) is dropped, any other bad line raises."""
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no log at {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    torn = lines[-1] != ""
    records = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            if torn and i == len(lines):
                break
            raise FormatError(f"malformed log line: {exc.msg}", offset=f"line {i}") from None
        if not isinstance(rec, dict) or "schema" not in rec or "kind" not in rec:
            raise FormatError("not a log record", offset=f"line {i}")
        if kind is None or rec["kind"] == kind:
            records.append(rec)
    return records

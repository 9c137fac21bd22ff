import json
import logging
import sys
from pathlib import Path

from attlist.errors import StorageError

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: str = "INFO"):
    """Configure the root logger once for CLI runs."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def _to_json(value):
    # numpy scalars and arrays sneak into records
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"can't serialize {type(value).__name__}")


def dump_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, default=_to_json)


class RecordWriter:
    """
    Writes structured records as JSON lines, one object per line.
    Accepts a path (opened for writing or appending) or an open text stream.
    """

    def __init__(self, sink, append: bool = False):
        self._owned = False
        if hasattr(sink, "write"):
            self._stream = sink
        else:
            path = Path(sink)
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                self._stream = open(path, "a" if append else "w", encoding="utf-8")
            except OSError as e:
                raise StorageError(f"can't write {path}: {e.strerror}") from e
            self._owned = True

    def write(self, record: dict):
        try:
            self._stream.write(dump_record(record) + "\n")
            self._stream.flush()
        except OSError as e:
            raise StorageError(f"write failed: {e.strerror}") from e

    def close(self):
        if self._owned:
            self._stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_records(path) -> list[dict]:
    """Load every record of a JSON lines file."""
    try:
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        raise StorageError(f"can't read {path}: {e.strerror}") from e

"""
Metrics Log
Append-only JSON-lines records, one per epoch or evaluation event
"""
import json
import logging
import math
import os
from typing import Iterator, List, Optional

from error_handler import CorruptFileError

logger = logging.getLogger(__name__)


def _clean(value):
    """JSON-safe copy: non-finite floats become strings so every line stays parseable"""
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, 'item') and callable(value.item):
        return _clean(value.item())
    return value


class MetricsLog:
    """Append-only metrics file; every record is flushed before append() returns"""

    def __init__(self, path: str, truncate: bool = True):
        self.path = path
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        if truncate:
            open(path, 'w', encoding='utf-8').close()
        self.count = 0

    def append(self, record: dict):
        line = json.dumps(_clean(record), sort_keys=True, allow_nan=False)
        with open(self.path, 'a', encoding='utf-8') as f:
            f.write(line + '\n')
            f.flush()
            os.fsync(f.fileno())
        self.count += 1

    def records(self) -> List[dict]:
        return read_metrics(self.path)


def iter_metrics(path: str) -> Iterator[dict]:
    """Yield records; a torn final line (crash mid-write) is dropped, torn earlier lines are corruption"""
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().split('\n')
    # a complete file ends with '\n', so the last element is '' or the torn tail
    complete, tail = lines[:-1], lines[-1]
    for number, line in enumerate(complete, start=1):
        if not line.strip():
            continue
        try:
            yield json.loads(line)
        except json.JSONDecodeError as e:
            raise CorruptFileError(f"{path}: line {number} is not a JSON record: {e}", {'line': number})
    if tail.strip():
        logger.warning(f"{path}: ignoring incomplete final record ({len(tail)} bytes)")


def read_metrics(path: str, kind: Optional[str] = None) -> List[dict]:
    records = list(iter_metrics(path))
    if kind is not None:
        records = [r for r in records if r.get('kind') == kind]
    return records

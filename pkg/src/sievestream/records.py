"""Newline-delimited JSON record files, one sample per line."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

from .errors import RecordParseError, SieveStreamError
from .objective import Sample

KNOWN_KEYS = ("id", "seq", "group", "softmax", "features", "score", "label")


def parse_record(line: str, lineno: int | None = None) -> Sample:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordParseError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(obj, dict):
        raise RecordParseError("record must be a JSON object", lineno)
    for key in ("id", "seq"):
        if key not in obj:
            raise RecordParseError(f"missing required key {key!r}", lineno)
    if not isinstance(obj["id"], str):
        raise RecordParseError("id must be a string", lineno)
    if not isinstance(obj["seq"], int) or isinstance(obj["seq"], bool):
        raise RecordParseError("seq must be an integer", lineno)
    extra = {k: v for k, v in obj.items() if k not in KNOWN_KEYS}
    try:
        return Sample(
            id=obj["id"],
            seq=obj["seq"],
            group=obj.get("group"),
            softmax=obj.get("softmax"),
            features=obj.get("features"),
            score=obj.get("score"),
            label=None if obj.get("label") is None else str(obj["label"]),
            extra=extra,
        )
    except (SieveStreamError, TypeError, ValueError) as exc:
        raise RecordParseError(str(exc), lineno) from None


def iter_records(path) -> Iterator[Sample]:
    """Stream samples from ``path``; checks seq order and id uniqueness as it goes."""
    seen: set[str] = set()
    last_seq = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            sample = parse_record(line, lineno)
            if sample.id in seen:
                raise RecordParseError(f"duplicate id {sample.id!r}", lineno)
            if last_seq is not None and sample.seq <= last_seq:
                raise RecordParseError(f"seq {sample.seq} is not strictly increasing", lineno)
            seen.add(sample.id)
            last_seq = sample.seq
            yield sample


def count_records(path) -> int:
    with open(path, encoding="utf-8") as fh:
        return sum(1 for line in fh if line.strip())


def dump_record(sample: Sample) -> str:
    obj = {"id": sample.id, "seq": sample.seq}
    if sample.group != sample.id:
        obj["group"] = sample.group
    if sample.softmax is not None:
        obj["softmax"] = sample.softmax.tolist()
    if sample.features is not None:
        obj["features"] = sample.features.tolist()
    if sample.score is not None:
        obj["score"] = sample.score
    if sample.label is not None:
        obj["label"] = sample.label
    obj.update(sample.extra)
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def write_records(samples: Iterable[Sample], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sample in samples:
            fh.write(dump_record(sample))
            fh.write("\n")
            n += 1
    return n


def round_files(path) -> list[Path]:
    """A single record file, or every ``*.jsonl`` in a directory in name order."""
    path = Path(path)
    if path.is_dir():
        return sorted(path.glob("*.jsonl"))
    return [path]

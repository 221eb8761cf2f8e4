"""Run traces: a totally ordered event list plus view snapshots, as JSONL.

File layout (one JSON object per line, keys in fixed order):

* ``{"type": "header", ...}`` first: format version, seed, trial, scenario
  name, protocol, delta, k, p, n, node table, genesis block record.
* ``{"type": "event", "round", "kind", "node", "block", "parent",
  "height", "tx", "payload"}`` for each event, in emission order.
* ``{"type": "view", ...}`` snapshots of node views, tagged ``pre_recovery``
  or ``final``.
* ``{"type": "report", ...}`` last: the attack report, if any.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Optional, Union

TRACE_VERSION = 1

MINE = "MINE"
SEND = "SEND"
DELIVER = "DELIVER"
CONFIRM = "CONFIRM"
FINALIZE = "FINALIZE"
HALT = "HALT"
JOIN = "JOIN"
LEAVE = "LEAVE"
RECOVERY = "RECOVERY"
TX_ISSUE = "TX_ISSUE"

EVENT_KINDS = (MINE, SEND, DELIVER, CONFIRM, FINALIZE, HALT, JOIN, LEAVE, RECOVERY, TX_ISSUE)


class TraceFormatError(ValueError):
    pass


class TraceEvent(NamedTuple):
    round: int
    kind: str
    node: Optional[int] = None
    block: Optional[int] = None
    parent: Optional[int] = None
    height: Optional[int] = None
    tx: Optional[int] = None
    payload: Optional[tuple] = None

    def record(self) -> dict:
        return {
            "type": "event",
            "round": self.round,
            "kind": self.kind,
            "node": self.node,
            "block": self.block,
            "parent": self.parent,
            "height": self.height,
            "tx": self.tx,
            "payload": None if self.payload is None else list(self.payload),
        }


@dataclass
class RunTrace:
    header: dict
    events: list[TraceEvent] = field(default_factory=list)
    views: list[dict] = field(default_factory=list)
    report: dict = field(default_factory=dict)

    # -- convenience accessors used by the verifiers ----------------------
    @property
    def delta(self) -> int:
        return self.header["delta"]

    @property
    def end_round(self) -> int:
        return self.header.get("end_round", self.events[-1].round if self.events else 0)

    def node_table(self) -> dict[int, dict]:
        return {n["id"]: n for n in self.header["nodes"]}

    def honest_nodes(self) -> set[int]:
        return {n["id"] for n in self.header["nodes"] if n["kind"] != "corrupt"}

    def of_kind(self, kind: str) -> Iterable[TraceEvent]:
        return (e for e in self.events if e.kind == kind)

    # -- serialization ----------------------------------------------------
    def lines(self) -> Iterable[str]:
        dump = lambda obj: json.dumps(obj, separators=(",", ":"))
        yield dump({"type": "header", **self.header})
        for e in self.events:
            yield dump(e.record())
        for v in self.views:
            yield dump({"type": "view", **v})
        yield dump({"type": "report", **self.report})

    def to_jsonl(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "RunTrace":
        header: Optional[dict] = None
        events, views, report = [], [], {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind = obj.pop("type")
            except (ValueError, KeyError, AttributeError) as exc:
                raise TraceFormatError(f"line {lineno}: not a trace record ({exc})") from None
            if kind == "header":
                if obj.get("version") != TRACE_VERSION:
                    raise TraceFormatError(f"line {lineno}: unsupported trace version {obj.get('version')}")
                header = obj
            elif kind == "event":
                if header is None:
                    raise TraceFormatError(f"line {lineno}: event before header")
                try:
                    payload = obj["payload"]
                    events.append(TraceEvent(obj["round"], obj["kind"], obj["node"], obj["block"],
                                             obj["parent"], obj["height"], obj["tx"],
                                             None if payload is None else tuple(payload)))
                except KeyError as exc:
                    raise TraceFormatError(f"line {lineno}: event missing field {exc}") from None
                if events[-1].kind not in EVENT_KINDS:
                    raise TraceFormatError(f"line {lineno}: unknown event kind {events[-1].kind!r}")
            elif kind == "view":
                views.append(obj)
            elif kind == "report":
                report = obj
            else:
                raise TraceFormatError(f"line {lineno}: unknown record type {kind!r}")
        if header is None:
            raise TraceFormatError("trace has no header")
        return cls(header, events, views, report)

    @classmethod
    def read(cls, path: Union[str, Path]) -> "RunTrace":
        return cls.from_jsonl(Path(path).read_text())


def block_table(trace: RunTrace) -> dict[int, dict]:
    """Every block record in the trace: genesis, mined blocks and oracle blocks."""
    g = trace.header["genesis"]
    table = {g["id"]: {"height": g["height"], "parent": g["parent"], "miner": g["miner"],
                       "mined_round": g["mined_round"], "payload": tuple(g["payload"])}}
    for e in trace.events:
        if e.kind in (MINE, RECOVERY):
            table[e.block] = {"height": e.height, "parent": e.parent,
                              "miner": e.node if e.kind == MINE else None,
                              "mined_round": e.round, "payload": tuple(e.payload or ())}
    return table


def jsonable(obj: Any) -> Any:
    """Recursively convert tuples/sets/numpy scalars into JSON-friendly values."""
    if isinstance(obj, dict):
        return {str(k) if not isinstance(k, str) else k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(jsonable(v) for v in obj)
    if hasattr(obj, "item") and callable(obj.item):
        return obj.item()
    return obj

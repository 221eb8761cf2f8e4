import textwrap

import pytest

from nakasim.chain import BlockStore
from nakasim.config import load_scenario
from nakasim.nodes import NodeId, NodeKind, NodeView, ProtocolParams


def scenario(yaml_text: str, **overrides):
    scn = load_scenario(text=textwrap.dedent(yaml_text))
    if overrides:
        data = scn.model_dump(mode="json")
        data.update(overrides)
        scn = type(scn).model_validate(data)
    return scn


def make_view(store, k=2, delta=1, stubborn=True, node=0, genesis=None):
    g = store[0] if genesis is None else genesis
    kind = NodeKind.HONEST_STUBBORN if stubborn else NodeKind.HONEST_NAKAMOTO
    return NodeView(NodeId(node, 1, kind), ProtocolParams(k, delta), store, g, stubborn)


def extend(store, parent, n, miner=0, round=0):
    """Mine ``n`` blocks on top of ``parent``; returns them in order."""
    out = []
    for _ in range(n):
        parent = store.make_block(parent, (), miner, round)
        out.append(parent)
    return out


@pytest.fixture
def store():
    s = BlockStore()
    s.make_block(None)
    return s


def make_trace(events, honest=(0, 1), corrupt=(), delta=1, k=1, p=0.1, end=None, views=(), joins=None):
    """A hand-built trace. ``events`` are TraceEvent tuples or argument tuples."""
    from nakasim.trace import JOIN, RunTrace, TraceEvent
    joins = joins or {}
    nodes = [{"id": n, "kind": "honest", "power": 1, "k": k, "role": None, "join": joins.get(n, 0),
              "leave": None} for n in honest]
    nodes += [{"id": n, "kind": "corrupt", "power": 1, "k": k, "role": None, "join": 0, "leave": None}
              for n in corrupt]
    evs = [TraceEvent(joins.get(n["id"], 0), JOIN, n["id"]) for n in nodes]
    evs += [e if isinstance(e, TraceEvent) else TraceEvent(*e) for e in events]
    header = {"version": 1, "scenario": "hand", "seed": 0, "trial": 0, "protocol": "stubborn",
              "delta": delta, "k": k, "p": p, "n": len(nodes), "attacker_units": 0, "nodes": nodes,
              "genesis": {"id": 0, "parent": None, "height": 0, "miner": -1, "mined_round": 0,
                          "payload": []},
              "end_round": end if end is not None else max((e.round for e in evs), default=0),
              "level": "compact"}
    return RunTrace(header, evs, list(views), {})


ACCEPTANCE_LINES: list[str] = []


def acceptance_line(n: int, ok: bool, detail: str) -> str:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

"""Post-hoc checks over run traces: consistency, liveness, the recovery lemma,
convergence opportunities, adversarial block counts and the stochastic bounds."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional

from .trace import FINALIZE, HALT, JOIN, LEAVE, MINE, TX_ISSUE, RunTrace, TraceEvent, block_table


@dataclass(frozen=True)
class Verdict:
    property: str
    passed: bool
    witness: Optional[dict] = None

    def __post_init__(self) -> None:
        if self.passed == (self.witness is not None):
            raise ValueError("a witness accompanies exactly the failing verdicts")

    def __bool__(self) -> bool:
        return self.passed

    def as_dict(self) -> dict:
        return {"property": self.property, "pass": self.passed, "witness": self.witness}


def _ev(e: TraceEvent) -> dict:
    return {"round": e.round, "node": e.node, "block": e.block, "height": e.height}


# -- consistency -------------------------------------------------------------------

def check_consistency(trace: RunTrace) -> Verdict:
    """No two honest FINALIZE events commit different blocks at one height.

    This covers both a single node rewriting its own log and two nodes
    disagreeing. The witness is the first offending event and the earlier
    event it contradicts.
    """
    honest = trace.honest_nodes()
    first: dict[int, tuple[int, TraceEvent]] = {}
    for i, e in enumerate(trace.events):
        if e.kind != FINALIZE or e.node not in honest:
            continue
        prev = first.get(e.height)
        if prev is None:
            first[e.height] = (i, e)
        elif prev[1].block != e.block:
            return Verdict("consistency", False, {
                "height": e.height, "event_index": i,
                "earlier": _ev(prev[1]), "offending": _ev(e),
                "same_node": prev[1].node == e.node,
            })
    return Verdict("consistency", True)


def consistency_oracle(trace: RunTrace) -> tuple[bool, Optional[int]]:
    """Brute force: compare every pair of honest log snapshots at every round.

    Returns (pass, first round at which some pair of snapshots up to that
    round is not prefix-comparable).
    """
    honest = sorted(trace.honest_nodes())
    logs: dict[int, dict[int, set]] = {n: defaultdict(set) for n in honest}
    by_round: dict[int, list[TraceEvent]] = defaultdict(list)
    for e in trace.events:
        if e.kind == FINALIZE and e.node in logs:
            by_round[e.round].append(e)
    snaps: list[dict[int, frozenset]] = []
    for r in sorted(by_round):
        for e in by_round[r]:
            logs[e.node][e.height].add(e.block)
        fresh = [{h: frozenset(ids) for h, ids in logs[n].items()} for n in honest]
        for s in fresh:
            snaps.append(s)
        for s in fresh:
            for other in snaps:
                for h, ids in s.items():
                    o = other.get(h)
                    if len(ids) > 1 or (o is not None and (len(o) > 1 or o != ids)):
                        return False, r
    return True, None


# -- liveness ------------------------------------------------------------------------

def _online(trace: RunTrace) -> dict[int, list[list]]:
    spans: dict[int, list[list]] = defaultdict(list)
    for e in trace.events:
        if e.kind == JOIN:
            spans[e.node].append([e.round, None])
        elif e.kind == LEAVE and spans.get(e.node):
            spans[e.node][-1][1] = e.round
    return spans


def online_throughout(spans: dict[int, list[list]], node: int, a: int, b: int) -> bool:
    for start, stop in spans.get(node, ()):
        if start <= a and (stop is None or stop > b):
            return True
    return False


def _tx_finalized(trace: RunTrace) -> dict[tuple[int, int], int]:
    blocks = block_table(trace)
    honest = trace.honest_nodes()
    out: dict[tuple[int, int], int] = {}
    for e in trace.events:
        if e.kind == FINALIZE and e.node in honest:
            for tx in blocks[e.block]["payload"]:
                out.setdefault((e.node, tx), e.round)
    return out


def check_liveness(trace: RunTrace, T_conf: int, after: Optional[int] = None) -> Verdict:
    """Every judged transaction is finalized by every judged honest node within T_conf.

    A transaction issued at t is judged when t + T_conf fits in the trace
    (and t >= ``after`` if given); a node is judged for it when online
    throughout [t, t + T_conf]. Halted nodes simply never finalize.
    """
    end = trace.end_round
    spans = _online(trace)
    fin = _tx_finalized(trace)
    honest = sorted(trace.honest_nodes())
    for e in trace.events:
        if e.kind != TX_ISSUE:
            continue
        t = e.round
        if (after is not None and t < after) or t + T_conf > end:
            continue
        for n in honest:
            if not online_throughout(spans, n, t, t + T_conf):
                continue
            f = fin.get((n, e.tx))
            if f is None or f > t + T_conf:
                return Verdict("liveness", False, {"tx": e.tx, "issued": t, "node": n,
                                                   "finalized": f, "deadline": t + T_conf})
    return Verdict("liveness", True)


def tx_delays(trace: RunTrace, after: Optional[int] = None) -> list[int]:
    """Issue-to-finalize delay for every (transaction, honest node online since issue).

    Transactions not yet finalized count with the censored delay to the end
    of the trace.
    """
    end = trace.end_round
    spans = _online(trace)
    fin = _tx_finalized(trace)
    honest = sorted(trace.honest_nodes())
    out = []
    for e in trace.events:
        if e.kind != TX_ISSUE or (after is not None and e.round < after):
            continue
        for n in honest:
            if online_throughout(spans, n, e.round, end):
                f = fin.get((n, e.tx))
                out.append((f if f is not None else end) - e.round)
    return out


# -- the recovery lemma ----------------------------------------------------------------

def check_recovery_lemma(trace: RunTrace, parts: tuple[int, ...] = (1, 2)) -> Verdict:
    """Check both halves of the recovery lemma at every view snapshot.

    At a snapshot taken in round R, for each block B finalized by an honest
    node i in round f:

    * B is in the first-confirmed chain of every honest node active at R
      that was online since f - 2*delta;
    * if f + delta is at most the last round the snapshot reflects and i
      has not halted by R, every such node has finalized B.

    ``parts`` selects which of the two halves to check.
    """
    honest = trace.honest_nodes()
    delta = trace.delta
    nodes = trace.node_table()
    fin: list[TraceEvent] = [e for e in trace.events if e.kind == FINALIZE and e.node in honest]
    halts = {e.node: e.round for e in trace.events if e.kind == HALT and e.node in honest}
    groups: dict[tuple[str, int], list[dict]] = defaultdict(list)
    for v in trace.views:
        groups[(v["tag"], v["round"])].append(v)
    for (tag, R), snaps in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0] != "pre_recovery")):
        done = [e for e in fin if (e.round < R if tag == "pre_recovery" else e.round <= R)]
        finalized_by: dict[int, set[int]] = defaultdict(set)
        for e in done:
            finalized_by[e.node].add(e.block)
        first_seen: dict[int, TraceEvent] = {}
        for e in done:
            first_seen.setdefault(e.block, e)
        judges = [v for v in snaps if v["node"] in honest and v["active"]]
        for bid, e in sorted(first_seen.items()) if 1 in parts else ():
            since = e.round - 2 * delta
            for v in judges:
                if nodes[v["node"]]["join"] > since:
                    continue
                if bid not in v["first_confirmed"]:
                    return Verdict("recovery_lemma", False, {
                        "part": "first_confirmed", "snapshot": tag, "round": R, "block": bid,
                        "finalized_by": e.node, "finalize_round": e.round, "node": v["node"]})
        # a pre-recovery snapshot shows the state after round R - 1 only
        last = R - 1 if tag == "pre_recovery" else R
        for e in done if 2 in parts else ():
            if e.round > last - delta or halts.get(e.node, R + 1) <= R:
                continue
            since = e.round - 2 * delta
            for v in judges:
                if nodes[v["node"]]["join"] > since:
                    continue
                if e.block not in finalized_by[v["node"]]:
                    return Verdict("recovery_lemma", False, {
                        "part": "all_finalize", "snapshot": tag, "round": R, "block": e.block,
                        "finalized_by": e.node, "finalize_round": e.round, "node": v["node"]})
    return Verdict("recovery_lemma", True)


# -- stochastic bounds ---------------------------------------------------------------------

def _honest_mine_rounds(trace: RunTrace) -> Counter:
    honest = trace.honest_nodes()
    return Counter(e.round for e in trace.events if e.kind == MINE and e.node in honest)


def convergence_rounds(counts: Counter, delta: int, t0: int, t1: int) -> int:
    total = 0
    for t in range(t0, t1 + 1):
        if counts.get(t, 0) != 1:
            continue
        if all(counts.get(s, 0) == 0 for s in range(t - delta, t + delta + 1) if s != t):
            total += 1
    return total


def count_convergence_opportunities(trace: RunTrace, t0: int, t1: int) -> int:
    """Rounds in [t0, t1] with one honest block and no other honest block within delta."""
    if t0 > t1:
        raise ValueError("need t0 <= t1")
    return convergence_rounds(_honest_mine_rounds(trace), trace.delta, t0, t1)


def count_adversarial_blocks(trace: RunTrace, t0: int, t1: int) -> int:
    if t0 > t1:
        raise ValueError("need t0 <= t1")
    honest = trace.honest_nodes()
    return sum(1 for e in trace.events
               if e.kind == MINE and e.node not in honest and t0 <= e.round <= t1)


def _q(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(repr(x)) if isinstance(x, float) else Fraction(x)


def honest_majority_predicate(p, n, delta, rho, phi) -> bool:
    """Network-aware honest majority, evaluated in exact arithmetic."""
    p, rho, phi = _q(p), _q(rho), _q(phi)
    nu = 2 * p * n * delta
    return nu < Fraction(1, 2) and (1 - rho) * (1 - nu) >= (1 + phi) * rho


@dataclass(frozen=True)
class BoundParams:
    alpha: float
    beta: float
    nu: float
    phi: float
    epsilon: float

    @classmethod
    def from_model(cls, p: float, n: int, delta: int, rho: float, phi: float = 0.1,
                   epsilon: float = 0.2) -> "BoundParams":
        if not (0 <= rho <= 1):
            raise ValueError("rho must lie in [0, 1]")
        return cls(p * (1 - rho) * n, p * rho * n, 2 * p * n * delta, phi, epsilon)


def trace_rho(trace: RunTrace) -> float:
    h = trace.header
    corrupt = sum(nd["power"] for nd in h["nodes"] if nd["kind"] == "corrupt") + h.get("attacker_units", 0)
    return corrupt / h["n"]


def bound_samples(trace: RunTrace, epsilon: float, window: int, windows_per_trace: int = 1,
                  rho: Optional[float] = None) -> list[dict]:
    """Evaluate the three window bounds on evenly spaced windows of ``window`` rounds."""
    h = trace.header
    p, n, k, delta = h["p"], h["n"], h["k"], h["delta"]
    rho = trace_rho(trace) if rho is None else rho
    bp = BoundParams.from_model(p, n, delta, rho, epsilon=epsilon)
    end = trace.end_round
    t = window
    if t > end:
        return [{"skipped": f"window {t} longer than trace ({end} rounds)"}]
    honest_counts = _honest_mine_rounds(trace)
    honest = trace.honest_nodes()
    adv_counts = Counter(e.round for e in trace.events if e.kind == MINE and e.node not in honest)
    last_start = end - t + 1
    if windows_per_trace == 1:
        starts = [1]
    else:
        step = (last_start - 1) / (windows_per_trace - 1)
        starts = sorted({1 + round(i * step) for i in range(windows_per_trace)})
    rows = []
    for t0 in starts:
        t1 = t0 + t - 1
        row: dict = {"t0": t0, "t": t}
        c = convergence_rounds(honest_counts, delta, t0, t1)
        a = sum(adv_counts.get(r, 0) for r in range(t0, t1 + 1))
        total = a + sum(honest_counts.get(r, 0) for r in range(t0, t1 + 1))
        eps = bp.epsilon
        if bp.alpha > 0 and t > k / bp.alpha:
            row["convergence"] = {"value": c, "bound": (1 - eps) * (1 - bp.nu) * bp.alpha * t,
                             "violated": not c > (1 - eps) * (1 - bp.nu) * bp.alpha * t}
        else:
            row["convergence"] = {"skipped": "t <= k/alpha"}
        if bp.beta == 0:
            row["adversarial_blocks"] = {"value": a, "bound": 0.0, "violated": a > 0}
        elif t > k / bp.beta:
            row["adversarial_blocks"] = {"value": a, "bound": (1 + eps) * bp.beta * t,
                             "violated": a > (1 + eps) * bp.beta * t}
        else:
            row["adversarial_blocks"] = {"skipped": "t <= k/beta"}
        if n * p * t >= k:
            row["total_blocks"] = {"value": total, "bound": (1 + eps) * n * p * t,
                             "violated": total > (1 + eps) * n * p * t}
        else:
            row["total_blocks"] = {"skipped": "n*p*t < k"}
        rows.append(row)
    return rows


def fold_bound_samples(per_trace: Iterable[list[dict]]) -> dict:
    out = {name: {"windows": 0, "violations": 0, "skipped": 0, "rate": None}
           for name in ("convergence", "adversarial_blocks", "total_blocks")}
    for rows in per_trace:
        for row in rows:
            for name, d in out.items():
                cell = row.get(name)
                if cell is None or "skipped" in cell:
                    d["skipped"] += 1
                    continue
                d["windows"] += 1
                d["violations"] += bool(cell["violated"])
    for d in out.values():
        if d["windows"]:
            d["rate"] = d["violations"] / d["windows"]
    return out


def bound_report(traces: Iterable[RunTrace], epsilon: float, window_min: int,
                 windows_per_trace: int = 1) -> dict:
    """Empirical violation rate of each bound over windows of ``window_min`` rounds."""
    return fold_bound_samples(bound_samples(tr, epsilon, window_min, windows_per_trace)
                              for tr in traces)

"""Synchronous delivery with bound delta, joins/leaves, echoing and schedules.

Messages are references (block or transaction ids) into the shared store;
the network only decides who learns what, and when.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

USER = -3  # sender id for user-issued transactions


class Msg(NamedTuple):
    kind: str  # "block" or "tx"
    id: int


def block_msg(block_id: int) -> Msg:
    return Msg("block", block_id)


def tx_msg(tx_id: int) -> Msg:
    return Msg("tx", tx_id)


class SynchronyViolation(AssertionError):
    """An honest-to-honest envelope would exceed the delta bound."""


@dataclass(frozen=True)
class NetParams:
    delta: int

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass(frozen=True, slots=True)
class Envelope:
    msg: Msg
    sender: int
    sent_round: int
    recipient: int
    deliver_round: int
    partitioned: bool = False


@dataclass(frozen=True)
class DelayRule:
    """Adversary-chosen delay for matching (message, recipient) pairs."""
    delay: int
    kind: Optional[str] = None  # "block" / "tx" / None for any
    sender: Optional[int] = None
    recipient: Optional[int] = None
    msg_ids: Optional[frozenset] = None

    def matches(self, msg: Msg, sender: int, recipient: int) -> bool:
        return ((self.kind is None or self.kind == msg.kind)
                and (self.sender is None or self.sender == sender)
                and (self.recipient is None or self.recipient == recipient)
                and (self.msg_ids is None or msg.id in self.msg_ids))


@dataclass(frozen=True)
class Partition:
    """Cross-group envelopes sent in [start, end) are withheld until ``end``."""
    groups: tuple[frozenset, ...]
    start: int
    end: int

    def separates(self, a: int, b: int) -> bool:
        ga = gb = None
        for i, g in enumerate(self.groups):
            if a in g:
                ga = i
            if b in g:
                gb = i
        return ga is not None and gb is not None and ga != gb


@dataclass
class DeliverySchedule:
    default_delay: Optional[int] = None  # None means delta (worst case)
    tx_delay: int = 0
    rules: Sequence[DelayRule] = ()
    partitions: Sequence[Partition] = ()


@dataclass(frozen=True)
class JoinEvent:
    node: int
    join_round: int


class Network:
    def __init__(self, delta: int, schedule: Optional[DeliverySchedule] = None):
        self.params = NetParams(delta)
        self.delta = delta
        self.schedule = schedule or DeliverySchedule()
        self.active: set[int] = set()
        self.honest: set[int] = set()
        self._pending: dict[int, list[Envelope]] = defaultdict(list)
        self._best: dict[tuple[int, Msg], int] = {}
        self._seen: set[tuple[int, Msg]] = set()
        self._echoed: set[tuple[int, Msg]] = set()
        # (sent_round, sender, msg) for every broadcast by an honest sender
        self.history: list[tuple[int, int, Msg]] = []

    # -- membership -----------------------------------------------------
    def add_node(self, node: int, honest: bool) -> None:
        if honest:
            self.honest.add(node)

    def is_honest(self, node: int) -> bool:
        return node in self.honest or node == USER

    def leave(self, node: int) -> None:
        self.active.discard(node)

    def join(self, node: int, round: int, injections: Iterable[Msg] = ()) -> list[Msg]:
        """Activate ``node`` and return its initial inbox (receipt time = ``round``)."""
        if node in self.active:
            raise ValueError(f"node {node} is already active")
        self.active.add(node)
        cutoff = round - self.delta
        inbox: dict[Msg, None] = {}
        for sent, sender, msg in self.history:
            if sent <= cutoff:
                inbox[msg] = None
            else:
                self._queue(msg, sender, sent, node, max(round, sent + self.delta))
        for msg in injections:
            inbox[msg] = None
        out = sorted(inbox, key=lambda m: (m.kind != "tx", m.id))
        for m in out:
            self._seen.add((node, m))
        return out

    # -- sending --------------------------------------------------------
    def _delay(self, msg: Msg, sender: int, recipient: int) -> int:
        for rule in self.schedule.rules:
            if rule.matches(msg, sender, recipient):
                return rule.delay
        if msg.kind == "tx" and sender == USER:
            return self.schedule.tx_delay
        if self.schedule.default_delay is None:
            return self.delta
        return self.schedule.default_delay

    def _queue(self, msg: Msg, sender: int, round: int, recipient: int, deliver: int,
               partitioned: bool = False) -> None:
        key = (recipient, msg)
        if key in self._seen:
            return
        best = self._best.get(key)
        if best is not None and best <= deliver:
            return
        self._best[key] = deliver
        self._pending[deliver].append(Envelope(msg, sender, round, recipient, deliver, partitioned))

    def broadcast(self, msg: Msg, sender: int, round: int,
                  delays: Optional[dict[int, int]] = None) -> None:
        """Send ``msg`` to every active node; per-recipient ``delays`` override the schedule."""
        honest_sender = self.is_honest(sender)
        if honest_sender:
            self.history.append((round, sender, msg))
            self._seen.add((sender, msg))
        for r in sorted(self.active):
            if r == sender:
                continue
            if delays is not None and r in delays:
                d = delays[r]
            elif not self.is_honest(r):
                d = 0  # corrupt recipients see everything immediately
            else:
                d = self._delay(msg, sender, r)
            if d < 0:
                raise ValueError("negative delay")
            deliver = round + d
            both_honest = honest_sender and r in self.honest
            if both_honest and d > self.delta:
                raise SynchronyViolation(
                    f"{msg} from {sender} to {r} delayed {d} > delta={self.delta}")
            partitioned = False
            for part in self.schedule.partitions:
                if part.start <= round < part.end and part.separates(sender, r):
                    if part.end > deliver:
                        deliver, partitioned = part.end, True
            self._queue(msg, sender, round, r, deliver, partitioned)

    def send(self, msg: Msg, sender: int, recipient: int, round: int, delay: int = 0) -> None:
        """Point-to-point send; only used by the adversary."""
        if self.is_honest(sender) and recipient in self.honest and delay > self.delta:
            raise SynchronyViolation("honest point-to-point send exceeds delta")
        if recipient in self.active:
            self._queue(msg, sender, round, recipient, round + delay)

    def echo(self, node: int, msg: Msg, round: int) -> bool:
        """Re-broadcast a freshly received message at most once per (node, msg)."""
        key = (node, msg)
        if key in self._echoed:
            return False
        self._echoed.add(key)
        self.broadcast(msg, node, round)
        return True

    # -- delivery -------------------------------------------------------
    def pending_at(self, round: int) -> bool:
        return bool(self._pending.get(round))

    def deliver_round(self, round: int) -> dict[int, list[tuple[Msg, int]]]:
        envs = self._pending.pop(round, None)
        out: dict[int, list[tuple[Msg, int]]] = {}
        if not envs:
            return out
        for env in envs:
            key = (env.recipient, env.msg)
            if self._best.get(key) != env.deliver_round or key in self._seen:
                continue
            del self._best[key]
            if env.recipient not in self.active:
                continue  # a returning node catches up through join()
            if (not env.partitioned and env.sender in self.honest and env.recipient in self.honest
                    and env.deliver_round > env.sent_round + self.delta):
                raise SynchronyViolation(f"late envelope {env}")
            self._seen.add(key)
            out.setdefault(env.recipient, []).append((env.msg, env.sender))
        for items in out.values():
            items.sort(key=lambda ms: (ms[1], ms[0].kind, ms[0].id))
        return dict(sorted(out.items()))

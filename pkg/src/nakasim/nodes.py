"""Honest node state machines: Nakamoto, Stubborn Nakamoto and observers.

A node's behaviour depends only on its :class:`NodeView` and the current
round. The engine feeds receipts in, calls the step functions, and turns
their return values into trace events.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional

from .chain import Block, BlockStore, Chain, chain_of


class NodeKind(str, Enum):
    HONEST_NAKAMOTO = "honest_nakamoto"
    HONEST_STUBBORN = "honest_stubborn"
    OBSERVER = "observer"
    CORRUPT = "corrupt"


class Receipt(str, Enum):
    ACCEPT = "ACCEPT"
    IGNORE = "IGNORE"
    PENDING = "PENDING"  # parent not yet known; buffered
    DUPLICATE = "DUPLICATE"


ACCEPT, IGNORE = Receipt.ACCEPT, Receipt.IGNORE


class ConsistencyBugError(AssertionError):
    """Raised when a node is about to break its own finalized chain."""


class FirstConfirmedError(AssertionError):
    pass


@dataclass(frozen=True)
class NodeId:
    id: int
    power: int
    kind: NodeKind

    def __post_init__(self) -> None:
        if self.power < 0:
            raise ValueError("power must be non-negative")
        if self.kind is NodeKind.OBSERVER and self.power != 0:
            raise ValueError("observers have zero mining power")

    @property
    def honest(self) -> bool:
        return self.kind is not NodeKind.CORRUPT


@dataclass(frozen=True)
class ProtocolParams:
    k: int
    delta: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


class NodeView:
    """Everything one node knows: received blocks, confirms, its ledger."""

    def __init__(self, node: NodeId, params: ProtocolParams, store: BlockStore,
                 genesis: Block, stubborn: bool, round: int = 0,
                 tx_issue: Optional[Mapping[int, int]] = None):
        self.node = node
        self.params = params
        self.store = store
        self.stubborn = stubborn
        self.tx_issue = tx_issue if tx_issue is not None else {}
        self.genesis = genesis.id
        self.known: dict[int, int] = {genesis.id: round}
        self.ignored: set[int] = set()
        self.orphans: dict[int, list[int]] = defaultdict(list)
        self.best_height = genesis.height
        self.best_tips: set[int] = {genesis.id}
        self.confirmed: dict[int, int] = {genesis.id: round}
        self.confirmed_at: dict[int, list[int]] = defaultdict(list)
        self.confirmed_at[genesis.height].append(genesis.id)
        self.finalized_log: list[Block] = list(chain_of(genesis, store))
        self.finalized_ids: set[int] = {b.id for b in self.finalized_log}
        self.finalize_round: dict[int, int] = {b.id: round for b in self.finalized_log}
        self.tx_finalized: dict[int, int] = {}
        self.halted = False
        self.halt_round: Optional[int] = None
        self.pending_txs: dict[int, int] = {}
        self.timers: dict[int, list[int]] = defaultdict(list)
        self.dirty = False

    # -- bookkeeping ----------------------------------------------------
    @property
    def k(self) -> int:
        return self.params.k

    @property
    def delta(self) -> int:
        return self.params.delta

    def has_work(self, round: int) -> bool:
        return self.dirty or round in self.timers

    def receive_tx(self, tx: int, round: int) -> None:
        if tx not in self.tx_finalized:
            self.pending_txs.setdefault(tx, round)

    def _record_finalized(self, block: Block, round: int) -> None:
        self.finalized_ids.add(block.id)
        self.finalize_round[block.id] = round
        for tx in block.payload:
            self.tx_finalized.setdefault(tx, round)
            self.pending_txs.pop(tx, None)


def longest_tips(view: NodeView) -> set[int]:
    return set(view.best_tips)


def mining_target(view: NodeView) -> int:
    """Tie-broken longest tip: earliest receipt round, then smallest id."""
    return min(view.best_tips, key=lambda b: (view.known[b], b))


def receive_block(view: NodeView, block: Block, round: int) -> list[tuple[int, Receipt]]:
    """Process a block arrival, including any buffered descendants it unblocks.

    Returns (block id, outcome) for every block whose fate was decided now.
    """
    if block.id in view.known or block.id in view.ignored:
        return [(block.id, Receipt.DUPLICATE)]
    if block.height <= view.store[view.genesis].height:
        view.ignored.add(block.id)  # cannot descend from the current genesis
        return [(block.id, IGNORE)]
    if block.parent is not None and block.parent not in view.known \
            and block.parent not in view.ignored:
        view.orphans[block.parent].append(block.id)
        return [(block.id, Receipt.PENDING)]
    out = []
    stack = [block]
    while stack:
        b = stack.pop()
        verdict = stubborn_on_receive(view, b, round) if view.stubborn else _accept(view, b, round)
        out.append((b.id, verdict))
        for child in sorted(view.orphans.pop(b.id, ()), reverse=True):
            stack.append(view.store[child])
    return out


def _accept(view: NodeView, block: Block, round: int) -> Receipt:
    if block.parent in view.ignored or block.parent not in view.known:
        view.ignored.add(block.id)
        return IGNORE
    view.known[block.id] = round
    h = block.height
    if h > view.best_height:
        view.best_height = h
        view.best_tips = {block.id}
        view.dirty = True
    elif h == view.best_height:
        view.best_tips.add(block.id)
        view.dirty = True
    return ACCEPT


def stubborn_on_receive(view: NodeView, block: Block, round: int) -> Receipt:
    """Ignore blocks extending an ignored block or conflicting with an old confirm."""
    if block.parent in view.ignored:
        view.ignored.add(block.id)
        return IGNORE
    window = 4 * view.delta
    for cid in view.confirmed_at.get(block.height, ()):
        if cid != block.id and round > view.confirmed[cid] + window:
            view.ignored.add(block.id)
            return IGNORE
    return _accept(view, block, round)


def _finalized_tip(view: NodeView) -> Block:
    return view.finalized_log[-1]


def nakamoto_step(view: NodeView, round: int, mined: Optional[Block] = None
                  ) -> tuple[int, list[Block]]:
    """Return (mining target, newly finalized blocks).

    Finalizes the tie-broken longest chain down to k blocks below its tip.
    The reported log never drops entries: on a deep reorg the new branch's
    blocks are still reported as finalized, which is what a consistency
    checker sees as the violation.
    """
    if mined is not None:
        receive_block(view, mined, round)
    target = mining_target(view)
    newly: list[Block] = []
    if not view.dirty:
        return target, newly
    view.dirty = False
    _confirm(view, round, timers=False)  # bookkeeping only; used by the recovery oracle
    tip = view.store[target]
    cut = tip.height - view.k
    if cut < 0:
        return target, newly
    b = view.store.ancestor_at(tip, cut)
    while b is not None and b.id not in view.finalized_ids:
        newly.append(b)
        b = view.store[b.parent] if b.parent is not None else None
    newly.reverse()
    for blk in newly:
        view._record_finalized(blk, round)
        last = _finalized_tip(view)
        if blk.height == last.height + 1:
            view.finalized_log.append(blk)
    return target, newly


def stubborn_confirm(view: NodeView, round: int) -> list[Block]:
    """Confirm every unconfirmed block at least k deep in some longest chain."""
    if not view.dirty:
        return []
    view.dirty = False
    return _confirm(view, round, timers=True)


def _confirm(view: NodeView, round: int, timers: bool) -> list[Block]:
    store, k = view.store, view.k
    newly: list[Block] = []
    for tip_id in sorted(view.best_tips):
        tip = store[tip_id]
        cut = tip.height - k
        if cut < 0:
            continue
        b = store.ancestor_at(tip, cut)
        while b is not None and b.id not in view.confirmed:
            view.confirmed[b.id] = round
            view.confirmed_at[b.height].append(b.id)
            if timers:
                view.timers[round + 2 * view.delta].append(b.id)
            newly.append(b)
            b = store[b.parent] if b.parent is not None else None
    newly.sort(key=lambda blk: (blk.height, blk.id))
    return newly


def stubborn_halt_check(view: NodeView, round: int, new_confirms: Iterable[Block] = ()) -> bool:
    """Halt on two conflicting confirms at most 4*delta apart. Returns True on a new halt."""
    if view.halted:
        return False
    window = 4 * view.delta
    for b in new_confirms:
        t = view.confirmed[b.id]
        for other in view.confirmed_at[b.height]:
            if other != b.id and abs(t - view.confirmed[other]) <= window:
                view.halted = True
                view.halt_round = round
                return True
    return False


def stubborn_finalize(view: NodeView, round: int) -> list[Block]:
    """Finalize blocks confirmed exactly 2*delta ago that have no conflicting confirm."""
    due = view.timers.pop(round, None)
    if not due or view.halted:
        return []
    newly = []
    for bid in sorted(due, key=lambda i: (view.store[i].height, i)):
        if bid not in view.confirmed or bid in view.finalized_ids:
            continue
        b = view.store[bid]
        if any(o != bid for o in view.confirmed_at[b.height]):
            continue
        last = _finalized_tip(view)
        if b.parent != last.id and b.height > last.height:
            continue  # an unfinalizable ancestor blocks it; it stays pending forever
        if b.parent != last.id:
            raise ConsistencyBugError(
                f"node {view.node.id}: finalizing block {b.id} (height {b.height}, parent "
                f"{b.parent}) would not extend finalized tip {last.id} (height {last.height})")
        view.finalized_log.append(b)
        view._record_finalized(b, round)
        newly.append(b)
    return newly


def stubborn_step(view: NodeView, round: int) -> tuple[list[Block], bool, list[Block]]:
    """One round of Stubborn bookkeeping: (new confirms, halted now, new finalizations).

    Halted nodes keep confirming (needed by recovery) but never finalize.
    """
    confirms = stubborn_confirm(view, round)
    halted_now = stubborn_halt_check(view, round, confirms)
    finals = stubborn_finalize(view, round)
    return confirms, halted_now, finals


def first_confirmed_blocks(view: NodeView, strict: bool = False) -> Chain:
    """The genesis chain extended by the first-confirmed block of each height.

    A block is first-confirmed when its confirm round is strictly earlier
    than that of every conflicting confirmed block. The result stops at the
    first height with no first-confirmed block or whose first-confirmed
    block does not extend the previous one; with ``strict`` that break
    raises instead.
    """
    store = view.store
    base = list(chain_of(view.genesis, store))
    g_height = base[-1].height
    firsts: dict[int, int] = {}
    for h, ids in view.confirmed_at.items():
        if h <= g_height or not ids:
            continue
        best = min(ids, key=lambda i: view.confirmed[i])
        t = view.confirmed[best]
        if all(view.confirmed[o] > t for o in ids if o != best):
            firsts[h] = best
    out = base
    h = g_height + 1
    while h in firsts:
        b = store[firsts[h]]
        if b.parent != out[-1].id:
            break
        out.append(b)
        h += 1
    if strict and any(fh >= h for fh in firsts):
        raise FirstConfirmedError(
            f"node {view.node.id}: first-confirmed blocks break at height {h}")
    return tuple(out)


def merchant_finalize_watch(view: NodeView, tx: int) -> Optional[int]:
    return view.tx_finalized.get(tx)


def mining_payload(view: NodeView, tip_id: int) -> tuple[int, ...]:
    """Pending transactions not already on the chain ending at ``tip_id``."""
    if not view.pending_txs:
        return ()
    floor = min(view.tx_issue.get(t, 0) for t in view.pending_txs)
    included: set[int] = set()
    b = view.store[tip_id]
    while b.mined_round >= floor and b.id not in view.finalized_ids:
        included.update(b.payload)
        if b.parent is None:
            break
        b = view.store[b.parent]
    return tuple(sorted(t for t in view.pending_txs if t not in included))


def adopt_genesis(view: NodeView, genesis: Block, round: int) -> list[Block]:
    """Switch to an oracle-issued genesis; returns blocks newly finalized by the switch."""
    store = view.store
    new_chain = chain_of(genesis, store)
    log = view.finalized_log
    for i, b in enumerate(log):
        if i >= len(new_chain) or new_chain[i].id != b.id:
            # only legitimate for a Nakamoto log that was already inconsistent
            if view.stubborn:
                raise ConsistencyBugError(
                    f"node {view.node.id}: finalized block {b.id} not on new genesis chain")
            break
    newly = []
    for b in new_chain:
        if b.id not in view.finalized_ids:
            view._record_finalized(b, round)
            newly.append(b)
            if b.height == log[-1].height + 1:
                log.append(b)
    for cid in list(view.confirmed):
        if not store.is_ancestor(cid, genesis):
            del view.confirmed[cid]
    view.confirmed_at = defaultdict(list)
    for cid in view.confirmed:
        view.confirmed_at[store[cid].height].append(cid)
    if genesis.id not in view.confirmed:
        view.confirmed[genesis.id] = round
        view.confirmed_at[genesis.height].append(genesis.id)
    view.ignored.update(i for i in view.known if i != genesis.id)
    view.ignored.update(view.orphans.keys())
    for kids in view.orphans.values():
        view.ignored.update(kids)
    view.orphans.clear()
    view.known = {genesis.id: round}
    view.best_height = genesis.height
    view.best_tips = {genesis.id}
    view.genesis = genesis.id
    view.timers.clear()
    view.halted = False
    view.halt_round = None
    view.dirty = False
    return newly

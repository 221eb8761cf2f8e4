"""The recovery oracle: a fresh genesis on one honest node's first-confirmed chain."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

from .chain import ORACLE, Block
from .nodes import FirstConfirmedError, NodeView, adopt_genesis, first_confirmed_blocks

if TYPE_CHECKING:
    from .engine import Sim


class RecoveryError(RuntimeError):
    pass


@dataclass(frozen=True)
class RecoveryEvent:
    round: int
    chosen_node: int
    new_genesis: int
    parent: int
    height: int


def genesis_parent(view: NodeView, strict: bool = False) -> Block:
    """Tip of the node's first-confirmed chain: where a new genesis would attach."""
    try:
        return first_confirmed_blocks(view, strict=strict)[-1]
    except FirstConfirmedError as exc:
        raise RecoveryError(f"cannot recover from node {view.node.id}: {exc}") from None


def oracle_choice_violations(views: list[NodeView], finalized: set[int]) -> list[tuple[int, int]]:
    """(candidate node, finalized block) pairs where choosing that node would drop the block.

    ``finalized`` are block ids finalized by some honest node. An empty list
    means the oracle's choice cannot hurt consistency.
    """
    bad = []
    for view in views:
        tip = genesis_parent(view)
        store = view.store
        for bid in sorted(finalized):
            b = store[bid]
            if b.height > tip.height or store.ancestor_at(tip, b.height).id != bid:
                bad.append((view.node.id, bid))
    return bad


def invoke_recovery(sim: "Sim", round: int, selection_seed: Optional[int] = None,
                    chosen: Optional[int] = None) -> RecoveryEvent:
    """Mint a new genesis and make every honest node adopt it.

    The chosen node is drawn uniformly from the active honest nodes with
    the simulation's recovery stream (or a generator seeded from
    ``selection_seed``) unless ``chosen`` pins it.
    """
    candidates = sim.honest_view_ids(active_only=True)
    if not candidates:
        raise RecoveryError(f"round {round}: no active honest node to consult")
    if chosen is None:
        rng = sim.recovery_rng if selection_seed is None else sim.make_rng(selection_seed)
        chosen = candidates[int(rng.integers(len(candidates)))]
    elif chosen not in candidates:
        raise RecoveryError(f"node {chosen} is not an active honest node")
    parent = genesis_parent(sim.views[chosen])
    g = sim.store.make_block(parent, (), ORACLE, round)
    sim.record_recovery(chosen, g, round)
    for nid in sim.honest_view_ids(active_only=False):
        view = sim.views[nid]
        newly = adopt_genesis(view, g, round)
        sim.record_finalized(nid, newly, round)
    return RecoveryEvent(round, chosen, g.id, parent.id, g.height)

"""Attack strategies driven by the engine, plus the bribery game.

Each strategy sees the simulation between honest mining and the
protocol step of every round. Adversary blocks go out with zero delay to
every node; honest-to-honest delays stay with the network schedule.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import TYPE_CHECKING, Optional

from .chain import ADVERSARY, Block, chain_of
from .config import (BriberySpec, HistoryRewriteSpec, PartitionAttackSpec, PrivateForkSpec,
                     SplitBrainSpec)
from .network import Msg, Partition, block_msg
from .nodes import NodeView, mining_target

if TYPE_CHECKING:
    from .engine import Sim


# -- bribery game -------------------------------------------------------------

class Action(str, Enum):
    MINE_ATTACK = "MINE_ATTACK"
    MINE_HONEST = "MINE_HONEST"
    NO_MINE = "NO_MINE"


class Outcome(str, Enum):
    SUCCEED = "SUCCEED"
    FAIL = "FAIL"


class PivotalityError(ValueError):
    """A single miner is large enough to change the outcome; dominance does not apply."""


def _q(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


@dataclass(frozen=True)
class BriberyParams:
    p_b: Fraction
    p_b_tilde: Fraction
    c: Fraction
    D: Fraction
    psi_a: Fraction
    x: Fraction
    n_miners: int
    k: int
    pivotality_threshold: Fraction = Fraction(1, 100)

    def __post_init__(self) -> None:
        for name in ("p_b", "p_b_tilde", "c", "D", "psi_a", "x", "pivotality_threshold"):
            object.__setattr__(self, name, _q(getattr(self, name)))
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.D <= 0:
            raise ValueError("D must be positive")
        if self.n_miners < 1 or self.k < 0:
            raise ValueError("need n_miners >= 1 and k >= 0")

    @property
    def aggregate_harm(self) -> Fraction:
        return self.n_miners * self.psi_a

    @classmethod
    def from_spec(cls, spec: BriberySpec, p: float) -> "BriberyParams":
        return cls(spec.p_b, spec.p_b_tilde, spec.c, 1 / _q(p), spec.psi_a, spec.x,
                   spec.n_miners, spec.k, spec.pivotality_threshold)


def bribery_payoff(action: Action, outcome: Outcome, params: BriberyParams) -> Fraction:
    x, D, c, psi = params.x, params.D, params.c, params.psi_a
    succeed = Outcome(outcome) is Outcome.SUCCEED
    harm = psi if succeed else 0
    action = Action(action)
    if action is Action.MINE_ATTACK:
        return x * (params.p_b_tilde / D - c) - harm
    if action is Action.MINE_HONEST:
        if succeed:  # honest blocks are orphaned by the attack chain
            return -x * c - harm
        return x * (params.p_b / D - c)
    return -harm


def strictly_dominant(params: BriberyParams) -> Optional[Action]:
    """The action that beats both others in every outcome, if one exists."""
    for a in Action:
        if all(bribery_payoff(a, o, params) > bribery_payoff(b, o, params)
               for o in Outcome for b in Action if b is not a):
            return a
    return None


@dataclass(frozen=True)
class Equilibrium:
    action: Action
    outcome: Outcome
    net_cost: Fraction
    dominant: bool
    participation_ok: bool


def bribery_equilibrium(params: BriberyParams) -> Equilibrium:
    """Resolve the bribery game by strict dominance over the payoff table.

    Raises :class:`PivotalityError` when one miner holds at least the
    pivotality threshold of total power.
    """
    share = Fraction(1, params.n_miners)
    if share >= params.pivotality_threshold:
        raise PivotalityError(
            f"one miner holds {float(share):.4g} of the power, not below the pivotality "
            f"threshold {float(params.pivotality_threshold):.4g}; the dominance argument needs "
            f"non-pivotal miners")
    participation = params.p_b / params.D - params.c >= 0
    dom = strictly_dominant(params)
    if dom is Action.MINE_ATTACK:
        return Equilibrium(Action.MINE_ATTACK, Outcome.SUCCEED,
                           params.k * (params.p_b_tilde - params.p_b), True, participation)
    # Without dominance no single miner moves the outcome, so each plays its best reply
    # to an attack that fails; the attacker pays nothing because no attack block exists.
    best = max(Action, key=lambda a: (bribery_payoff(a, Outcome.FAIL, params), a is Action.MINE_HONEST))
    return Equilibrium(best, Outcome.FAIL, Fraction(0), dom is not None, participation)


# -- engine-driven strategies ------------------------------------------------------

class Strategy:
    kind = "none"
    units = 0  # adversary-owned lottery units
    corrupt_views = False  # corrupt nodes run protocol views instead of withholding

    def setup(self, sim: "Sim") -> None:
        pass

    def units_active(self, sim: "Sim", round: int) -> bool:
        return False

    def diverted(self, sim: "Sim", round: int) -> bool:
        """True while honest miners' work goes to the adversary (bribery)."""
        return False

    def step(self, sim: "Sim", round: int, hits: int) -> None:
        pass

    def injections(self, sim: "Sim", node: int, round: int) -> list[Msg]:
        return []

    def finished(self, sim: "Sim", round: int) -> bool:
        return False

    def report(self, sim: "Sim") -> dict:
        return {"kind": self.kind}


def _tx_block(view: NodeView, tx: int) -> Optional[Block]:
    for b in reversed(view.finalized_log):
        if tx in b.payload:
            return b
    store = view.store
    b = store[mining_target(view)]
    while True:
        if tx in b.payload:
            return b
        if b.parent is None:
            return None
        b = store[b.parent]


def _final_tip(sim: "Sim") -> Optional[Block]:
    """Tallest mining target among active, non-halted honest nodes (smallest id on ties)."""
    best = None
    for nid in sim.honest_view_ids(active_only=True):
        view = sim.views[nid]
        if view.halted:
            continue
        tip = sim.store[mining_target(view)]
        if best is None or (tip.height, -tip.id) > (best.height, -best.id):
            best = tip
    return best


def finalized_conflicts(sim: "Sim", among: Optional[set[int]] = None) -> dict[int, set[int]]:
    """Heights at which honest nodes finalized more than one block."""
    by_height: dict[int, set[int]] = {}
    for nid in sim.honest_view_ids(active_only=False):
        for bid in sim.views[nid].finalized_ids:
            by_height.setdefault(sim.store[bid].height, set()).add(bid)
    return {h: ids for h, ids in sorted(by_height.items())
            if len(ids) > 1 and (among is None or ids & among)}


class PrivateFork(Strategy):
    """Withhold a fork below the target block; release it once it is long enough."""

    kind = "private_fork"

    def __init__(self, spec: PrivateForkSpec):
        self.spec = spec
        self.units = spec.attacker_power
        self.margin = spec.margin
        self.post_release = spec.post_release_rounds
        self.started: Optional[int] = None
        self.trigger_round: Optional[int] = None
        self.release_round: Optional[int] = None
        self.fork_parent: Optional[Block] = None
        self.tip: Optional[int] = None
        self.blocks: list[Block] = []
        self.active_rounds = 0
        self.hashes = 0

    # hooks -----------------------------------------------------------------
    def setup(self, sim: "Sim") -> None:
        if self.spec.start == "immediate":
            self._start(sim, 0, sim.store[sim.genesis_id])

    def hashing(self, round: int) -> bool:
        return self.started is not None and self.started < round and self.release_round is None

    def units_active(self, sim: "Sim", round: int) -> bool:
        return self.hashing(round)

    def step(self, sim: "Sim", round: int, hits: int) -> None:
        if self.hashing(round):
            self.active_rounds += 1
            self.hashes += self.hashing_units(sim)
            for _ in range(hits):
                b = sim.mine(self.tip, (), ADVERSARY, round)
                self.blocks.append(b)
                self.tip = b.id
        if self.trigger_round is None and self.triggered(sim, round):
            self.trigger_round = round
            if self.started is None:
                parent = self.choose_fork(sim)
                if parent is not None:
                    self._start(sim, round, parent)
                else:
                    self.trigger_round = None
        if self.trigger_round is not None and self.release_round is None and self.ready(sim):
            self.release(sim, round)

    def finished(self, sim: "Sim", round: int) -> bool:
        return self.release_round is not None and round >= self.release_round + self.post_release

    # pieces subclasses adjust -----------------------------------------------------
    def hashing_units(self, sim: "Sim") -> int:
        return self.units

    def _start(self, sim: "Sim", round: int, parent: Block) -> None:
        self.started = round
        self.fork_parent = parent
        self.tip = parent.id

    def triggered(self, sim: "Sim", round: int) -> bool:
        tx = self.spec.target_tx
        trig = self.spec.trigger
        if trig == "merchant_finalized":
            m = sim.merchant_view()
            return m is not None and tx in m.tx_finalized
        seen = sim.tx_confirmed.get(tx, {})
        if trig == "first_confirm":
            return bool(seen)
        active = sim.honest_view_ids(active_only=True)
        return bool(active) and all(n in seen for n in active)

    def choose_fork(self, sim: "Sim") -> Optional[Block]:
        if self.spec.fork_at == "genesis":
            return sim.store[sim.genesis_id]
        m = sim.merchant_view()
        views = [m] if m is not None else []
        views += [sim.views[n] for n in sim.honest_view_ids(active_only=True)]
        for view in views:
            b = _tx_block(view, self.spec.target_tx)
            if b is not None and b.parent is not None:
                return sim.store[b.parent]
        return None

    def ready(self, sim: "Sim") -> bool:
        if not self.blocks:
            return False
        top = self.blocks[-1].height
        if top - sim.k < self.fork_parent.height + 1:
            return False
        return top >= sim.max_honest_height() + self.margin

    def release(self, sim: "Sim", round: int) -> None:
        self.release_round = round
        for b in self.blocks:
            sim.adversary_broadcast(b, round)

    # reporting --------------------------------------------------------------
    def report(self, sim: "Sim") -> dict:
        attack_ids = {b.id for b in self.blocks}
        first = self.blocks[0].id if self.blocks else None
        adopted, ignored, halted = [], [], []
        for nid in sim.honest_view_ids(active_only=True):
            view = sim.views[nid]
            if first is not None and first in view.known \
                    and sim.store.is_ancestor(first, mining_target(view)):
                adopted.append(nid)
            if first is not None and first in view.ignored:
                ignored.append(nid)
            if view.halt_round is not None or sim.ever_halted(nid):
                halted.append(nid)
        conflicts = finalized_conflicts(sim, attack_ids) if attack_ids else {}
        tip = _final_tip(sim)
        in_final = 0
        if tip is not None and attack_ids:
            in_final = sum(1 for b in chain_of(tip, sim.store) if b.id in attack_ids)
        merchant = sim.merchant_view()
        m_round = merchant.tx_finalized.get(getattr(self.spec, "target_tx", -1)) if merchant else None
        return {
            "kind": self.kind,
            "success": bool(conflicts),
            "rounds": self.active_rounds,
            "hashes": self.hashes,
            "blocks": len(self.blocks),
            "blocks_in_final_chain": in_final,
            "trigger_round": self.trigger_round,
            "release_round": self.release_round,
            "fork_parent": None if self.fork_parent is None else self.fork_parent.id,
            "adopted_by": adopted,
            "ignored_by": ignored,
            "halted": halted,
            "finalized_conflict": bool(conflicts),
            "conflict_heights": sorted(conflicts),
            "merchant_finalized_round": m_round,
        }


class HistoryRewrite(PrivateFork):
    """Fork ``depth_back`` blocks below an honest tip at a fixed round."""

    kind = "history_rewrite"

    def __init__(self, spec: HistoryRewriteSpec):
        self.hr = spec
        fake = PrivateForkSpec(kind="private_fork", attacker_power=spec.attacker_power,
                               margin=spec.margin, post_release_rounds=spec.post_release_rounds,
                               trigger="first_confirm")
        super().__init__(fake)

    def triggered(self, sim: "Sim", round: int) -> bool:
        return round >= self.hr.start_round

    def choose_fork(self, sim: "Sim") -> Optional[Block]:
        ids = [n for n in sim.honest_view_ids(active_only=True) if sim.specs[n].power > 0]
        if not ids:
            return None
        view = sim.views[ids[0]]
        tip = sim.store[mining_target(view)]
        h = tip.height - self.hr.depth_back - 1
        if h < 0:
            return None  # chain too short: wait and retry next round
        return sim.store.ancestor_at(tip, h)

    def report(self, sim: "Sim") -> dict:
        out = super().report(sim)
        out["depth_back"] = self.hr.depth_back
        return out


class Bribery(PrivateFork):
    """Honest miners, bribed per the equilibrium, mine the attack chain."""

    kind = "bribery"

    def __init__(self, spec: BriberySpec, p: float):
        self.bspec = spec
        self.params = BriberyParams.from_spec(spec, p)
        self.equilibrium: Optional[Equilibrium] = None
        self.pivotal: Optional[str] = None
        fake = PrivateForkSpec(kind="private_fork", attacker_power=0, target_tx=spec.target_tx,
                               margin=spec.margin, post_release_rounds=spec.post_release_rounds)
        super().__init__(fake)

    def setup(self, sim: "Sim") -> None:
        try:
            self.equilibrium = bribery_equilibrium(self.params)
        except PivotalityError as exc:
            self.pivotal = str(exc)

    def _attacking(self) -> bool:
        return self.equilibrium is not None and self.equilibrium.action is Action.MINE_ATTACK

    def triggered(self, sim: "Sim", round: int) -> bool:
        return self._attacking() and super().triggered(sim, round)

    def units_active(self, sim: "Sim", round: int) -> bool:
        return False

    def diverted(self, sim: "Sim", round: int) -> bool:
        return self.hashing(round)

    def hashing_units(self, sim: "Sim") -> int:
        return sum(s.power for s in sim.specs.values() if s.honest and sim.is_active(s.id))

    def report(self, sim: "Sim") -> dict:
        out = super().report(sim)
        eq = self.equilibrium
        out.update({
            "pivotality_error": self.pivotal,
            "equilibrium_action": eq.action.value if eq else None,
            "equilibrium_outcome": eq.outcome.value if eq else None,
            "equilibrium_net_cost": str(eq.net_cost) if eq else None,
        })
        return out


class NetworkPartition(Strategy):
    """Withhold cross-group traffic during [start, end)."""

    kind = "partition"

    def __init__(self, spec: PartitionAttackSpec):
        self.spec = spec
        self.heights_at_end: Optional[list[int]] = None

    def setup(self, sim: "Sim") -> None:
        sim.net.schedule.partitions.append(
            Partition(tuple(frozenset(g) for g in self.spec.groups), self.spec.start, self.spec.end))

    def step(self, sim: "Sim", round: int, hits: int) -> None:
        if round == self.spec.end - 1:
            self.heights_at_end = [max((sim.views[n].best_height for n in g if n in sim.views), default=0)
                                   for g in self.spec.groups]

    def report(self, sim: "Sim") -> dict:
        conflicts = finalized_conflicts(sim)
        return {
            "kind": self.kind,
            "success": bool(conflicts),
            "group_heights_at_end": self.heights_at_end,
            "finalized_conflict": bool(conflicts),
            "conflict_heights": sorted(conflicts),
            "halted": [n for n in sim.honest_view_ids(active_only=False) if sim.ever_halted(n)],
            "ignoring": [n for n in sim.honest_view_ids(active_only=False) if sim.views[n].ignored],
        }


class SplitBrain(Strategy):
    """Corrupt nodes run an isolated copy of the protocol, then feed a late joiner."""

    kind = "split_brain"
    corrupt_views = True

    def __init__(self, spec: SplitBrainSpec):
        self.spec = spec

    def setup(self, sim: "Sim") -> None:
        corrupt = frozenset(n for n, s in sim.specs.items() if not s.honest)
        honest = frozenset(n for n, s in sim.specs.items() if s.honest)
        sim.net.schedule.partitions.append(Partition((honest, corrupt), 0, self.spec.isolation_end))

    def corrupt_chain(self, sim: "Sim") -> list[Block]:
        best = None
        for n, s in sorted(sim.specs.items()):
            if s.honest or n not in sim.views:
                continue
            tip = sim.store[mining_target(sim.views[n])]
            if best is None or tip.height > best.height:
                best = tip
        return [] if best is None else list(chain_of(best, sim.store))[1:]

    def injections(self, sim: "Sim", node: int, round: int) -> list[Msg]:
        if sim.specs[node].role != "late_joiner":
            return []
        return [block_msg(b.id) for b in self.corrupt_chain(sim)]

    def report(self, sim: "Sim") -> dict:
        joiners = [n for n, s in sorted(sim.specs.items()) if s.role == "late_joiner"]
        T = self.spec.isolation_end
        pre_t: dict[int, int] = {}
        for n in sim.honest_view_ids(active_only=False):
            if n in joiners:
                continue
            view = sim.views[n]
            for bid in view.finalized_ids:
                if 0 < view.finalize_round[bid] < T:
                    pre_t[sim.store[bid].height] = bid
        out = {"kind": self.kind, "isolation_end": T, "joiners": []}
        any_conflict = False
        for j in joiners:
            view = sim.views.get(j)
            if view is None:
                continue
            bad = sorted(bid for bid in view.finalized_ids
                         if pre_t.get(sim.store[bid].height, bid) != bid)
            any_conflict |= bool(bad)
            out["joiners"].append({
                "node": j,
                "finalized_height": view.finalized_log[-1].height,
                "conflicting_blocks": bad,
                "on_oracle_branch": sim.genesis_id != 0 and sim.genesis_id in view.finalized_ids,
                "finalized_beyond_genesis": view.finalized_log[-1].height > sim.store[view.genesis].height,
            })
        out["success"] = any_conflict
        out["joiner_conflict"] = any_conflict
        out["honest_conflict"] = bool(finalized_conflicts(sim))
        return out


def make_strategy(spec, p: float) -> Optional[Strategy]:
    if spec is None:
        return None
    if isinstance(spec, PrivateForkSpec):
        return PrivateFork(spec)
    if isinstance(spec, HistoryRewriteSpec):
        return HistoryRewrite(spec)
    if isinstance(spec, BriberySpec):
        return Bribery(spec, p)
    if isinstance(spec, PartitionAttackSpec):
        return NetworkPartition(spec)
    if isinstance(spec, SplitBrainSpec):
        return SplitBrain(spec)
    raise TypeError(f"unknown attack spec {spec!r}")


# -- spec-level entry points ----------------------------------------------------------

def run_private_fork(sim: "Sim", params: PrivateForkSpec) -> dict:
    sim.attach(PrivateFork(params))
    return sim.run().report


def run_history_rewrite(sim: "Sim", depth_back: int, attacker_power: int, start_round: int = 1) -> dict:
    if depth_back < sim.k:
        raise ValueError(f"depth_back must be >= k = {sim.k}")
    sim.attach(HistoryRewrite(HistoryRewriteSpec(kind="history_rewrite", depth_back=depth_back,
                                                 attacker_power=attacker_power,
                                                 start_round=start_round)))
    return sim.run().report


def run_partition(sim: "Sim", groups: list[list[int]], start: int, end: int) -> dict:
    sim.attach(NetworkPartition(PartitionAttackSpec(kind="partition", groups=groups,
                                                    start=start, end=end)))
    return sim.run().report


def run_split_brain(sim: "Sim", params: SplitBrainSpec) -> dict:
    sim.attach(SplitBrain(params))
    return sim.run().report

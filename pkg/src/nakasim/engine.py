"""Round-driven simulation loop, multi-trial orchestration and T_conf calibration.

Order of work inside round r:

1. scheduled events: transaction issue, joins, leaves, recovery calls;
2. network deliveries due at r;
3. mining: every active unit draws; honest winners extend their target;
4. the adversary strategy;
5. zero-delay deliveries created during r, until none remain;
6. protocol step per node: confirm, halt check, finalize (Stubborn) or
   k-deep finalization (Nakamoto).
"""

from __future__ import annotations

import math
import statistics
from fractions import Fraction
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Iterable, Optional

import numpy as np

from . import verifiers
from .adversary import Strategy, make_strategy
from .chain import ADVERSARY, Block, BlockStore
from .config import Scenario, scenario_dict, set_path, with_changes
from .economics import CommunityResponse, EconParams, bribery_cost, cost_summary, rental_cost
from .mining import Lottery, MiningParams, trial_streams
from .network import USER, DelayRule, DeliverySchedule, Msg, Network, Partition, block_msg, tx_msg
from .nodes import (NodeId, NodeKind, NodeView, ProtocolParams, first_confirmed_blocks,
                    mining_payload, mining_target, nakamoto_step, receive_block, stubborn_step)
from .recovery import invoke_recovery, oracle_choice_violations
from .trace import (CONFIRM, DELIVER, FINALIZE, HALT, JOIN, LEAVE, MINE, RECOVERY, SEND, TRACE_VERSION,
                    TX_ISSUE, RunTrace, TraceEvent, jsonable)


@dataclass(frozen=True)
class NodeSpec:
    id: int
    kind: NodeKind
    power: int
    k: int
    role: Optional[str]
    join: int
    leave: Optional[int]

    @property
    def honest(self) -> bool:
        return self.kind is not NodeKind.CORRUPT

    def record(self) -> dict:
        label = {"corrupt": "corrupt", "observer": "observer"}.get(self.kind.value, "honest")
        return {"id": self.id, "kind": label, "power": self.power, "k": self.k,
                "role": self.role, "join": self.join, "leave": self.leave}


def expand_nodes(scn: Scenario) -> list[NodeSpec]:
    honest_kind = NodeKind.HONEST_STUBBORN if scn.protocol == "stubborn" else NodeKind.HONEST_NAKAMOTO
    kinds = {"honest": honest_kind, "observer": NodeKind.OBSERVER, "corrupt": NodeKind.CORRUPT}
    out = []
    for g in scn.nodes:
        for _ in range(g.count):
            out.append(NodeSpec(len(out), kinds[g.kind], g.power, g.k or scn.k, g.role, g.join, g.leave))
    return out


class Sim:
    """One trial: the shared block store, network, node views and trace."""

    def __init__(self, scn: Scenario, trial: int = 0, strategy: Optional[Strategy] = None):
        self.scn = scn
        self.trial = trial
        self.k = scn.k
        self.delta = scn.delta
        self.stubborn = scn.protocol == "stubborn"
        self.streams = trial_streams(scn.seed, trial)
        rec_seed = scn.recovery.seed if scn.recovery else 0
        self.recovery_rng = self.make_rng(rec_seed)
        self.store = BlockStore()
        self.genesis_id = self.store.make_block(None, (), -1, 0).id
        self.specs: dict[int, NodeSpec] = {s.id: s for s in expand_nodes(scn)}
        net = scn.network
        schedule = DeliverySchedule(
            default_delay=net.default_delay, tx_delay=net.tx_delay,
            rules=[DelayRule(r.delay, r.kind, r.sender, r.recipient,
                             None if r.ids is None else frozenset(r.ids)) for r in net.rules],
            partitions=[Partition(tuple(frozenset(g) for g in part.groups), part.start, part.end)
                        for part in net.partitions])
        self.net = Network(scn.delta, schedule)
        for s in self.specs.values():
            self.net.add_node(s.id, s.honest)
        self.views: dict[int, NodeView] = {}
        self.tx_issue: dict[int, int] = {}
        self.tx_confirmed: dict[int, dict[int, tuple[int, int]]] = {}
        self.events: list[TraceEvent] = []
        self.full = scn.trace.level == "full"
        self.halted_nodes: set[int] = set()
        self.snapshots: list[dict] = []
        self.private_tip = self.genesis_id  # withheld chain of silent corrupt miners
        self.recoveries: list[Any] = []
        self.oracle_checks: list[dict] = []
        self.round = 0
        self.strategy = strategy if strategy is not None else make_strategy(scn.attack, scn.p)
        self._ran = False

    # -- helpers shared with strategies and the recovery oracle -----------------
    def make_rng(self, selection_seed: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=selection_seed, spawn_key=(self.scn.seed, self.trial))
        return np.random.Generator(np.random.PCG64(ss))

    def attach(self, strategy: Strategy) -> None:
        if self._ran:
            raise RuntimeError("strategy must be attached before the run")
        self.strategy = strategy

    def is_active(self, node: int) -> bool:
        return node in self.net.active

    def honest_view_ids(self, active_only: bool = True) -> list[int]:
        return [n for n in sorted(self.views) if self.specs[n].honest
                and (not active_only or n in self.net.active)]

    def merchant_view(self) -> Optional[NodeView]:
        for n, s in self.specs.items():
            if s.role == "merchant":
                return self.views.get(n)
        return None

    def ever_halted(self, node: int) -> bool:
        return node in self.halted_nodes

    def max_honest_height(self) -> int:
        return max((self.views[n].best_height for n in self.honest_view_ids()), default=0)

    def emit(self, round: int, kind: str, node: Optional[int] = None, block: Optional[Block] = None,
             tx: Optional[int] = None, payload: Optional[tuple] = None) -> None:
        if block is None:
            self.events.append(TraceEvent(round, kind, node, None, None, None, tx, payload))
        else:
            self.events.append(TraceEvent(round, kind, node, block.id, block.parent, block.height,
                                          tx, payload))

    def mine(self, parent: int, payload: tuple, miner: int, round: int) -> Block:
        b = self.store.make_block(parent, payload, miner, round)
        self.emit(round, MINE, miner, b, payload=b.payload)
        return b

    def adversary_broadcast(self, block: Block, round: int) -> None:
        """Release an adversary block to every active node with zero delay."""
        self.net.broadcast(block_msg(block.id), ADVERSARY, round,
                           delays={n: 0 for n in self.net.active})
        if self.full:
            self.emit(round, SEND, ADVERSARY, block)

    def record_recovery(self, chosen: int, g: Block, round: int) -> None:
        self.emit(round, RECOVERY, chosen, g, payload=())
        self.genesis_id = g.id

    def record_finalized(self, node: int, blocks: Iterable[Block], round: int) -> None:
        nakamoto = not self.views[node].stubborn
        for b in blocks:
            self.emit(round, FINALIZE, node, b)
            if nakamoto:
                for tx in b.payload:
                    self.tx_confirmed.setdefault(tx, {}).setdefault(node, (round, b.id))

    # -- per-round machinery ----------------------------------------------------
    def _new_view(self, s: NodeSpec, round: int) -> NodeView:
        stubborn = self.stubborn
        return NodeView(NodeId(s.id, s.power, s.kind), ProtocolParams(s.k, self.delta), self.store,
                        self.store[self.genesis_id], stubborn, round, self.tx_issue)

    def _receive(self, node: int, view: NodeView, msg: Msg, round: int, echo: bool = True) -> None:
        if msg.kind == "tx":
            view.receive_tx(msg.id, round)
            if self.full:
                self.emit(round, DELIVER, node, tx=msg.id)
        else:
            block = self.store[msg.id]
            receive_block(view, block, round)
            if self.full:
                self.emit(round, DELIVER, node, block)
        if echo:
            self.net.echo(node, msg, round)

    def _deliver(self, round: int) -> None:
        for node, items in self.net.deliver_round(round).items():
            view = self.views.get(node)
            if view is None:
                continue
            for msg, _sender in items:
                self._receive(node, view, msg, round)

    def _join(self, s: NodeSpec, round: int) -> None:
        injected = self.strategy.injections(self, s.id, round) if self.strategy else []
        inbox = self.net.join(s.id, round, injected)
        if s.id in self.views:
            view = self.views[s.id]
        else:
            view = self._new_view(s, round)
            if s.honest or (self.strategy is not None and self.strategy.corrupt_views):
                self.views[s.id] = view
        self.emit(round, JOIN, s.id)
        extra = set(injected)
        if s.id in self.views:
            for msg in inbox:
                self._receive(s.id, view, msg, round, echo=msg in extra)

    def _issue_tx(self, round: int) -> None:
        tx = len(self.tx_issue)
        self.tx_issue[tx] = round
        self.emit(round, TX_ISSUE, USER, tx=tx)
        self.net.broadcast(tx_msg(tx), USER, round)

    def _mine(self, round: int, hits: np.ndarray) -> int:
        adv_hits = 0
        strat = self.strategy
        adv_on = strat is not None and strat.units_active(self, round)
        divert = strat is not None and strat.diverted(self, round)
        wins: dict[int, int] = {}
        owner = self.unit_owner
        for u in hits.tolist():
            who = owner[u]
            if who == ADVERSARY:
                adv_hits += adv_on
                continue
            if who not in self.net.active:
                continue
            if divert and self.specs[who].honest:
                adv_hits += 1
                continue
            wins[who] = wins.get(who, 0) + 1
        for who in sorted(wins):
            view = self.views.get(who)
            count = wins[who]
            if view is None:  # silent corrupt miner: extend the withheld chain
                for _ in range(count):
                    self.private_tip = self.mine(self.private_tip, (), who, round).id
                continue
            if view.halted:
                continue
            target = mining_target(view)
            payload = mining_payload(view, target) if self.specs[who].honest else ()
            for _ in range(count):
                b = self.mine(target, payload, who, round)
                receive_block(view, b, round)
                self.net.broadcast(block_msg(b.id), who, round)
                if self.full:
                    self.emit(round, SEND, who, b)
        return adv_hits

    def _protocol_step(self, round: int) -> None:
        for nid in sorted(self.views):
            if nid not in self.net.active:
                continue
            view = self.views[nid]
            if view.stubborn:
                if not (view.dirty or round in view.timers):
                    continue
                confirms, halted_now, finals = stubborn_step(view, round)
                for b in confirms:
                    self.emit(round, CONFIRM, nid, b)
                    for tx in b.payload:
                        self.tx_confirmed.setdefault(tx, {}).setdefault(nid, (round, b.id))
                if halted_now:
                    self.halted_nodes.add(nid)
                    self.emit(round, HALT, nid)
                self.record_finalized(nid, finals, round)
            elif view.dirty:
                _, finals = nakamoto_step(view, round)
                self.record_finalized(nid, finals, round)

    def snapshot(self, tag: str, round: int) -> None:
        for nid in sorted(self.views):
            view = self.views[nid]
            self.snapshots.append({
                "tag": tag,
                "round": round,
                "node": nid,
                "active": nid in self.net.active,
                "genesis": view.genesis,
                "halted": view.halted,
                "finalized": [b.id for b in view.finalized_log],
                "first_confirmed": [b.id for b in first_confirmed_blocks(view)],
            })

    def _recover(self, round: int) -> None:
        self.snapshot("pre_recovery", round)
        honest = self.honest_view_ids(active_only=True)
        finalized = set()
        for n in self.honest_view_ids(active_only=False):
            finalized |= self.views[n].finalized_ids
        bad = oracle_choice_violations([self.views[n] for n in honest], finalized)
        self.oracle_checks.append({"round": round, "candidates": honest, "violations": bad})
        self.recoveries.append(invoke_recovery(self, round))

    # -- the run ------------------------------------------------------------------
    def run(self) -> RunTrace:
        if self._ran:
            raise RuntimeError("a Sim runs once")
        self._ran = True
        scn = self.scn
        strat = self.strategy
        if strat is not None:
            strat.setup(self)
        owner: list[int] = []
        for s in sorted(self.specs.values(), key=lambda s: s.id):
            owner.extend([s.id] * s.power)
        owner.extend([ADVERSARY] * (strat.units if strat is not None else 0))
        self.unit_owner = owner
        MiningParams(scn.p, max(len(owner), 1))
        lottery = Lottery(len(owner), scn.p, self.streams["mining"])

        joins: dict[int, list[NodeSpec]] = {}
        leaves: dict[int, list[NodeSpec]] = {}
        for s in self.specs.values():
            joins.setdefault(s.join, []).append(s)
            if s.leave is not None:
                leaves.setdefault(s.leave, []).append(s)
        tx_rounds = set(scn.txs.issue_rounds(scn.max_rounds))
        recovery_rounds = set(scn.recovery.rounds) if scn.recovery else set()

        for s in sorted(joins.get(0, []), key=lambda s: s.id):
            self._join(s, 0)
        end = scn.max_rounds
        for r in range(1, scn.max_rounds + 1):
            self.round = r
            # 1. scheduled events
            if r in tx_rounds:
                self._issue_tx(r)
            for s in sorted(joins.get(r, []), key=lambda s: s.id):
                self._join(s, r)
            for s in sorted(leaves.get(r, []), key=lambda s: s.id):
                self.net.leave(s.id)
                self.emit(r, LEAVE, s.id)
            if r in recovery_rounds:
                self._recover(r)
            # 2. deliveries
            self._deliver(r)
            # 3. mining
            adv_hits = self._mine(r, lottery.successes(r - 1))
            # 4. adversary
            if strat is not None:
                strat.step(self, r, adv_hits)
            # 5. zero-delay traffic
            while self.net.pending_at(r):
                self._deliver(r)
            # 6. protocol step
            self._protocol_step(r)
            if strat is not None and not recovery_rounds and strat.finished(self, r):
                end = r
                break
        self.snapshot("final", end)
        return self._trace(end)

    def _trace(self, end: int) -> RunTrace:
        scn = self.scn
        g = self.store[0]
        header = {
            "version": TRACE_VERSION,
            "scenario": scn.name,
            "seed": scn.seed,
            "trial": self.trial,
            "protocol": scn.protocol,
            "delta": scn.delta,
            "k": scn.k,
            "p": scn.p,
            "n": len(self.unit_owner),
            "attacker_units": self.strategy.units if self.strategy else 0,
            "nodes": [s.record() for s in sorted(self.specs.values(), key=lambda s: s.id)],
            "genesis": g.record(),
            "end_round": end,
            "level": scn.trace.level,
        }
        report: dict = {}
        if self.strategy is not None:
            report = self.strategy.report(self)
        if self.recoveries:
            report["recoveries"] = [{"round": e.round, "chosen": e.chosen_node, "genesis": e.new_genesis,
                                     "parent": e.parent} for e in self.recoveries]
            report["oracle_checks"] = self.oracle_checks
        return RunTrace(header, self.events, self.snapshots, jsonable(report))


def run_trial(config: Scenario, trial_index: int = 0) -> RunTrace:
    return Sim(config, trial_index).run()


# -- experiments -------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    index: int
    label: str
    scenario: Scenario


def variants(scn: Scenario) -> list[Variant]:
    """Expand sweep values and paired protocols into concrete scenarios."""
    sweep = [(None, None)] if scn.sweep is None else [(scn.sweep.key, v) for v in scn.sweep.values]
    protocols = scn.paired or [scn.protocol]
    out = []
    for key, value in sweep:
        base = scn if key is None else set_path(scn, key, value)
        for proto in protocols:
            v = base if proto == base.protocol else with_changes(base, protocol=proto)
            label = proto if key is None else f"{key}={value}/{proto}"
            out.append(Variant(len(out), label, v))
    return out


def trial_index(scn: Scenario, sweep_pos: int, trial: int) -> int:
    """Global trial index: paired protocols share it, sweep points do not."""
    return sweep_pos * scn.trials + trial


def evaluate(trace: RunTrace, scn: Scenario, t_conf: Optional[int]) -> dict:
    """Apply the scenario's verifiers to one trace and summarise the trial."""
    out: dict[str, Any] = {"trial": trace.header["trial"], "end_round": trace.end_round}
    verdicts = {}
    for prop in scn.verify:
        if prop == "consistency":
            verdicts[prop] = verifiers.check_consistency(trace)
        elif prop == "liveness":
            if t_conf is None:
                continue
            verdicts[prop] = verifiers.check_liveness(trace, t_conf, after=liveness_after(scn))
        elif prop == "recovery_lemma":
            verdicts[prop] = verifiers.check_recovery_lemma(trace)
            verdicts["recovery_lemma_part1"] = verifiers.check_recovery_lemma(trace, parts=(1,))
            verdicts["recovery_lemma_part2"] = verifiers.check_recovery_lemma(trace, parts=(2,))
    out["verdicts"] = {k: v.as_dict() for k, v in verdicts.items()}
    if "bounds" in scn.verify and scn.bounds is not None:
        out["bounds"] = verifiers.bound_samples(trace, scn.bounds.epsilon, scn.bounds.window,
                                                scn.bounds.windows_per_trace, rho=scn.rho())
    report = dict(trace.report)
    if report and scn.econ is not None and report.get("kind") in ("private_fork", "history_rewrite"):
        econ = EconParams.from_values(scn.econ.c, scn.p, scn.econ.p_b, scn.econ.p_b_tilde, scn.econ.psi_a)
        cost = rental_cost(report, econ, CommunityResponse(scn.econ.community_response))
        report["cost"] = cost.as_dict()
    if report.get("kind") == "bribery" and report.get("equilibrium_action") == "MINE_ATTACK":
        spec = scn.attack
        econ = EconParams.from_values(spec.c, scn.p, spec.p_b, spec.p_b_tilde, spec.psi_a)
        report["cost"] = bribery_cost(report["blocks_in_final_chain"], econ,
                                      CommunityResponse.NONE).as_dict()
    out["attack"] = report
    return out


def liveness_after(scn: Scenario) -> Optional[int]:
    a = scn.liveness.after
    if a == "recovery":
        return max(scn.recovery.rounds) if scn.recovery and scn.recovery.rounds else None
    return a


def _work(args: tuple) -> tuple[int, int, dict, Optional[str]]:
    scn_data, vindex, tindex, t_conf, keep_trace = args
    scn = Scenario.model_validate(scn_data)
    trace = run_trial(scn, tindex)
    summary = evaluate(trace, scn, t_conf)
    return vindex, tindex, summary, trace.to_jsonl() if keep_trace else None


def _calibration_work(args: tuple) -> int:
    scn_data, tindex = args
    delays = verifiers.tx_delays(run_trial(Scenario.model_validate(scn_data), tindex))
    return max(delays, default=0)


def _map(jobs: int, tasks: list[tuple], fn=_work) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def calibration_scenario(scn: Scenario) -> Scenario:
    """The scenario with the adversary, recovery and sweeps removed."""
    return with_changes(scn, attack=None, recovery=None, sweep=None, paired=[], bounds=None)


class CalibrationError(ValueError):
    pass


def calibrate_t_conf(config: Scenario, quantile: float = 0.999, trials: Optional[int] = None,
                     jobs: int = 1) -> int:
    """Empirical quantile of the per-trial worst issue-to-universal-finalize delay."""
    if not config.txs.issue_rounds(config.max_rounds):
        raise CalibrationError("no transactions scheduled; nothing to calibrate")
    if config.attack is not None:
        raise CalibrationError("calibration runs without an adversary; strip the attack first")
    n = config.total_power()
    if not verifiers.honest_majority_predicate(config.p, n, config.delta, config.rho(),
                                               config.liveness.phi):
        raise CalibrationError("parameters violate the network-aware honest majority predicate")
    trials = trials or config.liveness.calibration_trials
    data = scenario_dict(config)
    # calibration trials use indices disjoint from the experiment's
    tasks = [(data, 1_000_000 + i) for i in range(trials)]
    worst = _map(jobs, tasks, _calibration_work)
    return int(math.ceil(float(np.quantile(np.array(worst, dtype=float), quantile, method="higher"))))


def _mean_se(xs: list[float]) -> tuple[Optional[float], Optional[float]]:
    if not xs:
        return None, None
    if len(xs) == 1:
        return xs[0], None
    return statistics.fmean(xs), statistics.stdev(xs) / math.sqrt(len(xs))


def aggregate(label: str, scn: Scenario, summaries: list[dict]) -> dict:
    """Fold per-trial summaries of one variant into counts and statistics."""
    out: dict[str, Any] = {"variant": label, "protocol": scn.protocol, "trials": len(summaries)}
    props: dict[str, dict] = {}
    for s in summaries:
        for prop, v in s["verdicts"].items():
            d = props.setdefault(prop, {"pass": 0, "fail": 0, "first_failure": None})
            if v["pass"]:
                d["pass"] += 1
            else:
                d["fail"] += 1
                if d["first_failure"] is None:
                    d["first_failure"] = {"trial": s["trial"], "witness": v["witness"]}
    out["verdicts"] = props
    attacks = [s["attack"] for s in summaries if s.get("attack")]
    if attacks:
        succ = [a for a in attacks if a.get("success")]
        out["attack"] = {"kind": attacks[0].get("kind"), "success_rate": len(succ) / len(attacks),
                         "successes": len(succ)}
        costs = [a["cost"] for a in succ if "cost" in a]
        if costs:
            net = [float(Fraction(c["net_cost"])) for c in costs]
            mean, se = _mean_se(net)
            out["attack"]["net_cost_mean"] = mean
            out["attack"]["net_cost_se"] = se
            out["attack"]["cost"] = cost_summary(costs)
    bound_rows = [s["bounds"] for s in summaries if "bounds" in s]
    if bound_rows:
        out["bounds"] = verifiers.fold_bound_samples(bound_rows)
    return out


def gate_results(scn: Scenario, per_variant: list[tuple[Variant, dict]]) -> list[dict]:
    rows = []
    for gate in scn.hard_gates:
        for var, agg in per_variant:
            if gate.protocol is not None and var.scenario.protocol != gate.protocol:
                continue
            v = agg["verdicts"].get(gate.property)
            passed = v is not None and v["fail"] == 0
            rows.append({"property": gate.property, "variant": var.label, "pass": passed})
    return rows


def run_experiment(config: Scenario, jobs: int = 1, keep_traces: bool = False,
                   t_conf: Optional[int] = None) -> dict:
    """Run every trial of every variant, verify, and aggregate.

    Returns a report dict; with ``keep_traces`` the JSONL text of each trace
    is included under ``traces`` keyed by (variant label, trial index).
    """
    vs = variants(config)
    n_protocols = len(config.paired) or 1
    if "liveness" in config.verify and t_conf is None:
        if config.liveness.t_conf == "auto":
            t_conf = calibrate_t_conf(calibration_scenario(config), config.liveness.quantile, jobs=jobs)
        else:
            t_conf = config.liveness.t_conf
    tasks = []
    for v in vs:
        data = scenario_dict(v.scenario)
        sweep_pos = v.index // n_protocols
        for t in range(config.trials):
            tasks.append((data, v.index, trial_index(config, sweep_pos, t), t_conf, keep_traces))
    results = _map(jobs, tasks)
    results.sort(key=lambda r: (r[0], r[1]))
    per_variant = []
    traces = {}
    for v in vs:
        mine = [r for r in results if r[0] == v.index]
        per_variant.append((v, aggregate(v.label, v.scenario, [r[2] for r in mine])))
        if keep_traces:
            for _, t, _, text in mine:
                traces[(v.label, t)] = text
    report = {
        "scenario": config.name,
        "seed": config.seed,
        "trials_per_variant": config.trials,
        "t_conf": t_conf,
        "variants": [agg for _, agg in per_variant],
        "trials": {v.label: [r[2] for r in results if r[0] == v.index] for v in vs},
    }
    gates = gate_results(config, per_variant)
    report["hard_gates"] = gates
    report["pass"] = all(g["pass"] for g in gates)
    if keep_traces:
        report["traces"] = traces
    return report

"""Acceptance criteria 1-11, each at its stated tolerance.

Every test prints one PASS/FAIL line (collected again in the terminal
summary). Experiments shared between criteria are run once per session.
"""

import copy
import itertools
import math
import os
import random
import time
from fractions import Fraction


from nakasim.adversary import Action, BriberyParams, Outcome, bribery_equilibrium, bribery_payoff
from nakasim.config import load_scenario, preset_names, with_changes
from nakasim.economics import EconParams, bribery_cost
from nakasim.engine import Sim, calibrate_t_conf, run_experiment, run_trial
from nakasim.nodes import ConsistencyBugError
from nakasim.recovery import invoke_recovery
from nakasim.verifiers import check_consistency, consistency_oracle

from conftest import acceptance_line, scenario

JOBS = int(os.environ.get("NAKASIM_TEST_JOBS", "1"))
_cache: dict = {}


def experiment(name, overrides=()):
    key = (name, tuple(overrides))
    if key not in _cache:
        t0 = time.perf_counter()
        rep = run_experiment(load_scenario(preset=name, overrides=list(overrides)), jobs=JOBS)
        _cache[key] = (rep, time.perf_counter() - t0)
    return _cache[key]


def variant(report, label):
    return next(v for v in report["variants"] if v["variant"] == label)


# 1 -------------------------------------------------------------------------------

def test_criterion_1_rental_double_spend():
    rep, secs = experiment("prop1_rental_doublespend")
    trials = rep["trials"]["nakamoto"]
    wins = [t for t in trials if t["attack"]["success"]]
    rate = len(wins) / len(trials)
    net = [float(Fraction(t["attack"]["cost"]["net_cost"])) for t in wins]
    mean = sum(net) / len(net)
    se = math.sqrt(sum((x - mean) ** 2 for x in net) / (len(net) - 1) / len(net))
    witnessed = all(not t["verdicts"]["consistency"]["pass"] and t["verdicts"]["consistency"]["witness"]
                    for t in wins)
    ok = rate >= 0.9 and abs(mean) <= 3 * se and witnessed and secs <= 120
    acceptance_line(1, ok, f"success {rate:.3f}, mean net {mean:.2f} USD (3 SE = {3 * se:.2f}), "
                           f"witness in every success {witnessed}, {secs:.0f}s")
    assert ok


# 2, 3 ----------------------------------------------------------------------------

THM1_POWERS = (10, 20, 50, 100)


def test_criterion_2_stubborn_consistency_gate():
    rep, _ = experiment("thm1_stubborn_unbounded")
    runs = [t for p in THM1_POWERS for t in rep["trials"][f"attack.attacker_power={p}/stubborn"]]
    bad = [t["trial"] for t in runs if not t["verdicts"]["consistency"]["pass"]]
    ok = len(runs) == 500 and not bad
    acceptance_line(2, ok, f"{len(runs)} Stubborn trials over powers {THM1_POWERS}, "
                           f"{len(bad)} consistency violations")
    assert ok


def test_criterion_3_safety_becomes_liveness():
    rep, _ = experiment("thm1_stubborn_unbounded")
    scn = load_scenario(preset="thm1_stubborn_unbounded")
    online = sum(g.count for g in scn.nodes if g.kind != "corrupt" and g.join == 0 and g.leave is None)
    judged = met = 0
    for p in THM1_POWERS:
        naka = {t["trial"]: t for t in rep["trials"][f"attack.attacker_power={p}/nakamoto"]}
        stub = {t["trial"]: t for t in rep["trials"][f"attack.attacker_power={p}/stubborn"]}
        for idx, n in naka.items():
            if n["verdicts"]["consistency"]["pass"]:
                continue
            judged += 1
            s = stub[idx]
            a = s["attack"]
            all_ignored = len(a["ignored_by"]) == online
            halted = bool(a["halted"])
            clean = s["verdicts"]["consistency"]["pass"] and not a["finalized_conflict"]
            met += (all_ignored or halted) and clean
    ok = judged > 0 and met == judged
    acceptance_line(3, ok, f"{met}/{judged} paired Nakamoto violations met by ignore-or-halt "
                           f"with no Stubborn conflict")
    assert ok


# 4 -------------------------------------------------------------------------------

def test_criterion_4_liveness():
    rep, secs = experiment("thm2_liveness")
    v = rep["variants"][0]["verdicts"]["liveness"]
    rate = v["pass"] / (v["pass"] + v["fail"])
    scn = load_scenario(preset="thm2_liveness")
    from nakasim.verifiers import honest_majority_predicate
    pred = honest_majority_predicate(scn.p, scn.total_power(), scn.delta, scn.rho(), scn.liveness.phi)
    ok = pred and v["pass"] + v["fail"] == 200 and rate >= 0.99 and secs <= 180
    acceptance_line(4, ok, f"T_conf {rep['t_conf']}, liveness {v['pass']}/{v['pass'] + v['fail']}, "
                           f"predicate {pred}, {secs:.0f}s")
    assert ok


# 5 -------------------------------------------------------------------------------

def table_one(action, outcome, p_b, tilde, c, D, psi, x):
    """Independent transcription of the six payoff cells."""
    return {
        ("MINE_ATTACK", "SUCCEED"): x * (tilde / D - c) - psi,
        ("MINE_ATTACK", "FAIL"): x * (tilde / D - c),
        ("MINE_HONEST", "SUCCEED"): -x * c - psi,
        ("MINE_HONEST", "FAIL"): x * (p_b / D - c),
        ("NO_MINE", "SUCCEED"): -psi,
        ("NO_MINE", "FAIL"): Fraction(0),
    }[(action, outcome)]


def test_criterion_5_bribery_table():
    rng = random.Random(5)
    q = lambda lo, hi, den: Fraction(rng.randint(lo * den, hi * den), den)
    mismatches = counterexamples = cost_errors = dominant_cases = 0
    for _ in range(1000):
        p_b, c, D = q(1, 200, 100), q(0, 2, 100), Fraction(rng.randint(1, 500))
        tilde = p_b + q(-5, 5, 100) if rng.random() < 0.8 else p_b
        tilde = max(tilde, Fraction(0))
        psi, x, k = q(0, 20, 10), rng.randint(1, 10**4), rng.randint(0, 12)
        prm = BriberyParams(p_b, tilde, c, D, psi, x, 1000, k)
        for a, o in itertools.product(Action, Outcome):
            if bribery_payoff(a, o, prm) != table_one(a.value, o.value, p_b, tilde, c, D, psi, x):
                mismatches += 1
        if tilde > p_b and p_b / D >= c:
            dominant_cases += 1
            eq = bribery_equilibrium(prm)
            if not (eq.action is Action.MINE_ATTACK and eq.dominant and eq.outcome is Outcome.SUCCEED):
                counterexamples += 1
            if eq.net_cost != k * (tilde - p_b):
                cost_errors += 1
        if tilde >= p_b:
            if bribery_cost(k, EconParams(c, D, p_b, tilde)).net_cost != k * (tilde - p_b):
                cost_errors += 1
    ok = mismatches == counterexamples == cost_errors == 0 and dominant_cases > 100
    acceptance_line(5, ok, f"1000 grid points: {mismatches} cell mismatches, {counterexamples} dominance "
                           f"counterexamples over {dominant_cases} cases, {cost_errors} cost errors")
    assert ok


# 6 -------------------------------------------------------------------------------

LEMMA_RUNS = [
    ("thm1_stubborn_unbounded", (), [f"attack.attacker_power={p}/stubborn" for p in THM1_POWERS]),
    ("thm3_recovery", (), ["stubborn"]),
    # criterion 8 covers Stubborn with the recovery oracle only
    ("thm4_split_brain", ("verify=[consistency, recovery_lemma]",), ["recovery.rounds=[300]/stubborn"]),
]


def test_criterion_6_recovery_lemma():
    counts = {}
    for name, overrides, labels in LEMMA_RUNS:
        rep, _ = experiment(name, overrides)
        for label in labels:
            for t in rep["trials"][label]:
                for part in ("recovery_lemma_part1", "recovery_lemma_part2"):
                    n, bad = counts.get(part, (0, 0))
                    counts[part] = (n + 1, bad + (not t["verdicts"][part]["pass"]))
    (n1, bad1), (n2, bad2) = counts["recovery_lemma_part1"], counts["recovery_lemma_part2"]
    ok = bad1 == 0 and bad2 == 0
    acceptance_line(6, ok, f"first-confirmed part: {bad1}/{n1} trials violate; "
                           f"all-finalize part: {bad2}/{n2} trials violate")
    assert ok


# 7 -------------------------------------------------------------------------------

def frozen_state(scn, trial, R):
    """The simulation exactly as the oracle would find it at round R."""
    sim = Sim(with_changes(scn, max_rounds=R - 1), trial)
    sim.run()
    return sim


def oracle_independent(sim, R):
    finalized = set()
    for n in sim.honest_view_ids(active_only=False):
        finalized |= sim.views[n].finalized_ids
    for chosen in sim.honest_view_ids(active_only=True):
        twin = copy.deepcopy(sim)
        try:
            ev = invoke_recovery(twin, R, chosen=chosen)
        except ConsistencyBugError:
            return False
        g = twin.store[ev.new_genesis]
        if not all(twin.store.is_ancestor(b, g) for b in finalized):
            return False
    return True


def test_criterion_7_recovery():
    rep, _ = experiment("thm3_recovery")
    v = rep["variants"][0]["verdicts"]
    cons, live = v["consistency"], v["liveness"]
    live_rate = live["pass"] / (live["pass"] + live["fail"])
    scn = load_scenario(preset="thm3_recovery")
    R = scn.recovery.rounds[0]
    frozen = [oracle_independent(frozen_state(scn, t, R), R) for t in range(10)]
    ok = cons["fail"] == 0 and cons["pass"] == 100 and live_rate >= 0.99 and all(frozen)
    acceptance_line(7, ok, f"consistency {cons['pass']}/100, post-recovery liveness {live['pass']}/"
                           f"{live['pass'] + live['fail']} at T_conf {rep['t_conf']}, oracle choice "
                           f"independent on {sum(frozen)}/10 frozen states")
    assert ok


# 8 -------------------------------------------------------------------------------

def test_criterion_8_split_brain():
    rep, _ = experiment("thm4_split_brain")
    naka = rep["trials"]["recovery.rounds=[]/nakamoto"]
    stub = rep["trials"]["recovery.rounds=[300]/stubborn"]
    naka_hits = sum(1 for t in naka if t["attack"]["joiner_conflict"]
                    and not t["verdicts"]["consistency"]["pass"])
    stub_bad = sum(1 for t in stub if not t["verdicts"]["consistency"]["pass"]
                   or t["attack"]["joiner_conflict"])
    on_branch = sum(1 for t in stub if all(j["on_oracle_branch"] for j in t["attack"]["joiners"]))
    ok = naka_hits >= 95 and stub_bad == 0 and on_branch == len(stub)
    acceptance_line(8, ok, f"Nakamoto joiner conflict with witness {naka_hits}/{len(naka)}; Stubborn with "
                           f"oracle {stub_bad} violations, joiner on oracle branch {on_branch}/{len(stub)}")
    assert ok


# 9 -------------------------------------------------------------------------------

def test_criterion_9_bounds():
    rep, secs = experiment("bounds_montecarlo")
    b = rep["variants"][0]["bounds"]
    rates = {k: b[k]["rate"] for k in ("convergence", "adversarial_blocks", "total_blocks")}
    ok = all(r is not None and r <= 0.01 for r in rates.values()) and secs <= 300 \
        and all(b[k]["windows"] >= 100 for k in rates)
    acceptance_line(9, ok, ", ".join(f"{k} {b[k]['violations']}/{b[k]['windows']}" for k in rates)
                    + f", {secs:.0f}s")
    assert ok


# 10 ------------------------------------------------------------------------------

def random_small_scenario(rng, i):
    honest = rng.randint(1, 4)
    corrupt = rng.randint(0, 5 - honest)
    nodes = f"{{kind: honest, count: {honest}, power: {rng.randint(1, 3)}}}"
    if corrupt:
        nodes += f", {{kind: corrupt, count: {corrupt}, power: {rng.randint(1, 3)}}}"
    text = f"""
        version: 1
        name: small{i}
        seed: {rng.randint(0, 10**6)}
        max_rounds: {rng.randint(5, 20)}
        protocol: {rng.choice(["nakamoto", "stubborn"])}
        delta: {rng.randint(0, 2)}
        p: {rng.choice([0.1, 0.3, 0.6, 0.9])}
        k: {rng.randint(1, 3)}
        nodes: [{nodes}]
        txs:
          rounds: [1, 3]
        """
    scn = scenario(text)
    if honest > 1 and rng.random() < 0.7:
        cut = rng.randint(1, honest - 1)
        scn = with_changes(scn, network={"partitions": [
            {"groups": [list(range(cut)), list(range(cut, honest))], "start": 1,
             "end": rng.randint(5, 20)}]})
    return scn


def test_criterion_10_oracle_equivalence():
    rng = random.Random(10)
    mismatches = failing = 0
    for i in range(50):
        tr = run_trial(random_small_scenario(rng, i), i)
        assert tr.end_round <= 20 and len(tr.header["nodes"]) <= 5
        v = check_consistency(tr)
        ok, round = consistency_oracle(tr)
        failing += not ok
        if v.passed != ok or (not ok and v.witness["offending"]["round"] != round):
            mismatches += 1
    ok = mismatches == 0
    acceptance_line(10, ok, f"50 random traces ({failing} inconsistent), {mismatches} mismatches")
    assert ok


# 11 ------------------------------------------------------------------------------

def test_criterion_11_determinism():
    differing = []
    for name in preset_names():
        scn = load_scenario(preset=name, overrides=["trials=3"])
        t_conf = 400 if "liveness" in scn.verify else None
        a = run_experiment(scn, jobs=1, keep_traces=True, t_conf=t_conf)
        b = run_experiment(scn, jobs=1, keep_traces=True, t_conf=t_conf)
        c = run_experiment(scn, jobs=2, keep_traces=True, t_conf=t_conf)
        if not (a == b == c):
            differing.append(name)
    cal = load_scenario(preset="thm2_liveness")
    same_cal = calibrate_t_conf(cal, trials=20, jobs=1) == calibrate_t_conf(cal, trials=20, jobs=2)
    ok = not differing and same_cal
    acceptance_line(11, ok, f"{len(preset_names())} presets replayed byte-identically with jobs 1 and 2: "
                            f"{'all' if not differing else 'differ: ' + ', '.join(differing)}; "
                            f"calibration jobs-independent {same_cal}")
    assert ok

from fractions import Fraction

from hypothesis import given, strategies as st

from nakasim.adversary import Action, BriberyParams, Outcome, bribery_equilibrium, bribery_payoff
from nakasim.chain import BlockStore, chain_of, prefix_comparable
from nakasim.economics import EconParams, bribery_cost
from nakasim.nodes import first_confirmed_blocks, longest_tips, mining_target, receive_block, stubborn_step
from nakasim.trace import FINALIZE, MINE
from nakasim.verifiers import (check_consistency, consistency_oracle, count_convergence_opportunities,
                               honest_majority_predicate)

from conftest import make_trace, make_view

finalize_events = st.lists(
    st.tuples(st.integers(1, 20), st.integers(0, 4), st.integers(1, 4), st.integers(0, 1)),
    max_size=25)


@given(finalize_events, st.integers(0, 4))
def test_incremental_checker_matches_oracle(raw, n_corrupt):
    raw.sort(key=lambda t: t[0])
    honest = tuple(range(5 - n_corrupt))
    corrupt = tuple(range(5 - n_corrupt, 5))
    events = [(r, FINALIZE, node, 10 * h + c, None, h) for r, node, h, c in raw]
    tr = make_trace(events, honest=honest, corrupt=corrupt, end=20)
    v = check_consistency(tr)
    ok, round = consistency_oracle(tr)
    assert v.passed == ok
    if not ok:
        assert v.witness["offending"]["round"] == round


@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 2)), max_size=30))
def test_convergence_with_zero_delta_counts_lonely_rounds(raw):
    events = [(r, MINE, node, i + 1, 0, 1) for i, (r, node) in enumerate(raw)]
    tr = make_trace(events, honest=(0, 1, 2), delta=0, end=30)
    per_round = {}
    for r, _ in raw:
        per_round[r] = per_round.get(r, 0) + 1
    assert count_convergence_opportunities(tr, 0, 30) == sum(1 for c in per_round.values() if c == 1)


rates = st.fractions(0, 1, max_denominator=50)


@given(st.integers(1, 200), st.integers(0, 4), rates, rates, st.fractions(0, 1, max_denominator=10))
def test_predicate_monotone(n, delta, rho, drho, phi):
    p = Fraction(1, 1000)
    if not honest_majority_predicate(p, n, delta, rho, phi):
        assert not honest_majority_predicate(p, n, delta, min(rho + drho, Fraction(1)), phi)
        assert not honest_majority_predicate(p, n, delta + 1, rho, phi)


money = st.fractions(0, 500, max_denominator=100)


@given(money, money, st.fractions(1, 10, max_denominator=10), st.integers(1, 10**4), money,
       st.integers(1, 1000), st.integers(0, 12))
def test_payoff_table_cells(p_b, tilde, c, D, psi, x, k):
    prm = BriberyParams(p_b, tilde, c, D, psi, x, 1000, k)
    table = {
        (Action.MINE_ATTACK, Outcome.SUCCEED): x * (tilde / D - c) - psi,
        (Action.MINE_ATTACK, Outcome.FAIL): x * (tilde / D - c),
        (Action.MINE_HONEST, Outcome.SUCCEED): -x * c - psi,
        (Action.MINE_HONEST, Outcome.FAIL): x * (p_b / D - c),
        (Action.NO_MINE, Outcome.SUCCEED): -psi,
        (Action.NO_MINE, Outcome.FAIL): 0,
    }
    for (a, o), want in table.items():
        assert bribery_payoff(a, o, prm) == want
    if tilde > p_b and p_b / D >= c:
        eq = bribery_equilibrium(prm)
        assert eq.action is Action.MINE_ATTACK and eq.net_cost == k * (tilde - p_b)
    if tilde >= p_b:
        econ = EconParams(c, Fraction(D), p_b, tilde)
        assert bribery_cost(k, econ).net_cost == k * (tilde - p_b)


# random block trees delivered in random order

trees = st.lists(st.tuples(st.integers(0, 10**6), st.integers(0, 3)), min_size=1, max_size=30)


def build(raw):
    store = BlockStore()
    store.make_block(None)
    ids = [0]
    arrivals = []
    for pick, lag in raw:
        parent = ids[pick % len(ids)]
        b = store.make_block(parent)
        ids.append(b.id)
        arrivals.append((len(arrivals) // 3 + lag, b))
    return store, sorted(arrivals, key=lambda t: t[0])


@given(trees)
def test_target_is_a_longest_tip(raw):
    store, arrivals = build(raw)
    v = make_view(store, stubborn=False)
    for r, b in arrivals:
        receive_block(v, b, r + 1)
    tips = longest_tips(v)
    assert mining_target(v) in tips
    assert all(store[t].height == v.best_height for t in tips)


@given(trees, st.integers(1, 3), st.integers(0, 2))
def test_stubborn_view_invariants(raw, k, delta):
    store, arrivals = build(raw)
    v = make_view(store, k=k, delta=delta)
    seen_confirms = {}
    by_round = {}
    for r, b in arrivals:
        by_round.setdefault(r + 1, []).append(b)
    for r in range(1, max(by_round) + 4 * delta + 3):
        for b in by_round.get(r, []):
            receive_block(v, b, r)
        stubborn_step(v, r)
        for bid, t in seen_confirms.items():
            assert v.confirmed[bid] == t  # confirm times never change
        seen_confirms.update(v.confirmed)
        log = v.finalized_log
        for a, b in zip(log, log[1:]):
            assert b.parent == a.id  # the log is a chain
    fc = first_confirmed_blocks(v)
    assert list(fc) == list(chain_of(fc[-1], store))
    assert prefix_comparable(v.finalized_log, fc) or v.halted

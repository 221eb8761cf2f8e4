from fractions import Fraction

import pytest

from nakasim.economics import (INFINITE, CommunityResponse, CostModel, CostReport, EconParams, Protocol,
                               bribery_cost, cost_summary, economic_security_summary, rental_cost, usd)


def econ(**kw):
    d = dict(c=1, p=Fraction(1, 100), p_b=100, p_b_tilde=101)
    d.update(kw)
    return EconParams.from_values(**d)


def test_usd_is_exact():
    assert usd(0.1) == Fraction(1, 10)
    assert usd("2.50") == Fraction(5, 2)
    assert usd(Fraction(1, 3)) == Fraction(1, 3)


def test_difficulty_and_validation():
    assert econ().D == 100
    with pytest.raises(ValueError):
        econ(p=0)
    with pytest.raises(ValueError):
        EconParams(c=Fraction(-1), D=Fraction(1), p_b=Fraction(1))


def test_bribery_cost_premium_per_block():
    r = bribery_cost(6, econ())
    assert (r.gross_cost, r.rewards_recouped, r.net_cost) == (606, 600, 6)


def test_bribery_cost_without_recoup():
    r = bribery_cost(6, econ(), CommunityResponse.NO_RECOUP)
    assert r.net_cost == 606 and r.rewards_recouped == 0


def test_bribery_cost_zero_premium():
    assert bribery_cost(6, econ(p_b_tilde=100)).net_cost == 0
    with pytest.raises(ValueError):
        bribery_cost(6, econ(p_b_tilde=99))
    with pytest.raises(ValueError):
        bribery_cost(6, econ(p_b_tilde=None))


def test_rental_failed_attack_pays_everything():
    r = rental_cost({"hashes": 700, "blocks": 7, "blocks_in_final_chain": 0}, econ())
    assert r.net_cost == r.gross_cost == 700


def test_rental_successful_attack_recoups_rewards():
    r = rental_cost({"hashes": 700, "blocks": 7, "blocks_in_final_chain": 7}, econ())
    assert r.net_cost == 0
    r = rental_cost({"hashes": 700, "blocks": 7, "blocks_in_final_chain": 7}, econ(),
                    CommunityResponse.NO_RECOUP)
    assert r.net_cost == 700


def test_cost_report_identity_enforced():
    with pytest.raises(ArithmeticError):
        CostReport(Fraction(3), Fraction(1), Fraction(1))


def test_cost_summary_totals():
    rows = [bribery_cost(6, econ()).as_dict(), bribery_cost(3, econ()).as_dict()]
    s = cost_summary(rows)
    assert s["total_net"] == "9" and s["mean_net"] == "9/2"
    assert cost_summary([])["mean_net"] is None


@pytest.mark.parametrize("protocol,model,value,attained", [
    (Protocol.NAKAMOTO, CostModel.RENTAL, 0, True),
    (Protocol.NAKAMOTO, CostModel.BRIBERY, 0, False),
    (Protocol.STUBBORN, CostModel.RENTAL, INFINITE, False),
    (Protocol.STUBBORN, CostModel.BRIBERY, INFINITE, False),
])
def test_security_summary(protocol, model, value, attained):
    s = economic_security_summary(protocol, model)
    assert s.usd == value and s.attained is attained


def test_security_rendering():
    assert str(economic_security_summary("stubborn", "rental")) == "INFINITE"
    assert "not attained" in str(economic_security_summary("nakamoto", "bribery"))

"""Attack cost accounting in exact rational USD."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Mapping, Optional, Union

Number = Union[int, float, str, Fraction]


def usd(x: Number) -> Fraction:
    """Exact rational from an int, Fraction, decimal string or float (via its repr)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


class CommunityResponse(str, Enum):
    NONE = "none"
    NO_RECOUP = "no_recoup"


class Protocol(str, Enum):
    NAKAMOTO = "nakamoto"
    STUBBORN = "stubborn"


class CostModel(str, Enum):
    RENTAL = "rental"
    BRIBERY = "bribery"


INFINITE = math.inf


@dataclass(frozen=True)
class EconParams:
    c: Fraction
    D: Fraction
    p_b: Fraction
    p_b_tilde: Optional[Fraction] = None
    psi_a: Fraction = Fraction(0)

    def __post_init__(self) -> None:
        for name in ("c", "D", "p_b", "p_b_tilde", "psi_a"):
            v = getattr(self, name)
            if v is None:
                continue
            v = usd(v)
            object.__setattr__(self, name, v)
            if v < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_values(cls, c: Number, p: Number, p_b: Number, p_b_tilde: Optional[Number] = None,
                    psi_a: Number = 0) -> "EconParams":
        p = usd(p)
        if p <= 0:
            raise ValueError("difficulty undefined for p = 0")
        return cls(usd(c), 1 / p, usd(p_b), None if p_b_tilde is None else usd(p_b_tilde), usd(psi_a))


@dataclass(frozen=True)
class CostReport:
    gross_cost: Fraction
    rewards_recouped: Fraction
    net_cost: Fraction
    per_block: tuple = ()

    def __post_init__(self) -> None:
        if self.gross_cost - self.rewards_recouped != self.net_cost:
            raise ArithmeticError("net cost must equal gross minus recouped")

    def as_dict(self) -> dict:
        return {"gross_cost": str(self.gross_cost), "rewards_recouped": str(self.rewards_recouped),
                "net_cost": str(self.net_cost),
                "per_block": [{k: str(v) if isinstance(v, Fraction) else v for k, v in row.items()}
                              for row in self.per_block]}


def rental_cost(report: Mapping, econ: EconParams,
                community_response: CommunityResponse = CommunityResponse.NONE) -> CostReport:
    """Rented hashes cost ``c`` each; attack blocks left in the final chain earn ``p_b``."""
    hashes = int(report["hashes"])
    in_chain = int(report.get("blocks_in_final_chain", 0))
    gross = hashes * econ.c
    reward = Fraction(0) if CommunityResponse(community_response) is CommunityResponse.NO_RECOUP \
        else econ.p_b
    recouped = in_chain * reward
    blocks = int(report.get("blocks", in_chain))
    per_block = ()
    if blocks:
        per_block = ({"blocks": blocks, "expected_cost_per_block": econ.D * econ.c,
                      "reward_per_recouped_block": reward},)
    return CostReport(gross, recouped, gross - recouped, per_block)


def bribery_cost(k: int, econ: EconParams,
                 community_response: CommunityResponse = CommunityResponse.NONE) -> CostReport:
    """Bribes paid on ``k`` attack blocks, less the block rewards the attacker keeps."""
    if econ.p_b_tilde is None:
        raise ValueError("bribery cost needs p_b_tilde")
    if econ.p_b_tilde < econ.p_b:
        raise ValueError("bribe below the honest reward: the attack is not dominant")
    gross = k * econ.p_b_tilde
    keep = Fraction(0) if CommunityResponse(community_response) is CommunityResponse.NO_RECOUP \
        else econ.p_b
    recouped = k * keep
    per_block = ({"blocks": k, "bribe": econ.p_b_tilde, "recouped": keep},) if k else ()
    return CostReport(gross, recouped, gross - recouped, per_block)


@dataclass(frozen=True)
class Security:
    usd: Union[Fraction, float]
    attained: bool

    def __str__(self) -> str:
        if self.usd == INFINITE:
            return "INFINITE"
        return f"{self.usd}" if self.attained else f"infimum {self.usd} (not attained)"


def economic_security_summary(protocol: Protocol, model: CostModel,
                              econ: Optional[EconParams] = None) -> Security:
    """Minimal attacker cost of a consistency violation under each cost model."""
    if Protocol(protocol) is Protocol.STUBBORN:
        return Security(INFINITE, False)
    if CostModel(model) is CostModel.RENTAL:
        return Security(Fraction(0), True)
    return Security(Fraction(0), False)


def cost_summary(costs: list[Mapping]) -> dict:
    """Exact totals over serialized cost reports."""
    gross = sum((Fraction(c["gross_cost"]) for c in costs), Fraction(0))
    rec = sum((Fraction(c["rewards_recouped"]) for c in costs), Fraction(0))
    net = sum((Fraction(c["net_cost"]) for c in costs), Fraction(0))
    n = len(costs)
    return {"trials": n, "total_gross": str(gross), "total_recouped": str(rec), "total_net": str(net),
            "mean_net": str(net / n) if n else None}

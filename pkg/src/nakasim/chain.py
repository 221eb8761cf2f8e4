"""Blocks, the shared block store, and structural predicates over chains.

Block identity is a simulator-assigned integer. Ids are handed out in
creation order, so the original genesis always has id 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

# Pseudo miner ids for blocks not mined by a simulated node.
ORACLE = -1
ADVERSARY = -2

# Distinguished return value of depth() for blocks off the tip's chain.
NOT_IN_CHAIN = None


class UnknownBlockError(KeyError):
    pass


class BrokenChainError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class TransactionId:
    id: int
    issued_round: int
    issuer: str = "user"


@dataclass(frozen=True, slots=True)
class Block:
    id: int
    parent: Optional[int]
    height: int
    miner: int
    mined_round: int
    payload: tuple[int, ...] = ()

    @property
    def is_genesis(self) -> bool:
        return self.parent is None

    def record(self) -> dict:
        """Trace record; field order is part of the trace format."""
        return {
            "id": self.id,
            "parent": self.parent,
            "height": self.height,
            "miner": self.miner,
            "mined_round": self.mined_round,
            "payload": list(self.payload),
        }


Chain = tuple[Block, ...]
# A finalized ledger is a chain prefix; kept as a tuple/list of blocks.
Log = Sequence[Block]


class BlockStore:
    """Append-only registry of every block created during one run."""

    def __init__(self) -> None:
        self._blocks: list[Block] = []

    def __len__(self) -> int:
        return len(self._blocks)

    def __getitem__(self, block_id: int) -> Block:
        if not 0 <= block_id < len(self._blocks):
            raise UnknownBlockError(block_id)
        return self._blocks[block_id]

    def __contains__(self, block_id: object) -> bool:
        return isinstance(block_id, int) and 0 <= block_id < len(self._blocks)

    def __iter__(self):
        return iter(self._blocks)

    def make_block(
        self,
        parent: Union[Block, int, None],
        payload: Iterable[int] = (),
        miner: int = ORACLE,
        round: int = 0,
    ) -> Block:
        payload = tuple(payload)
        if len(set(payload)) != len(payload):
            raise ValueError(f"duplicate transaction ids in payload {payload}")
        if parent is None:
            parent_id, height = None, 0
        else:
            parent_id = parent.id if isinstance(parent, Block) else parent
            if parent_id not in self:
                raise UnknownBlockError(parent_id)
            height = self._blocks[parent_id].height + 1
        block = Block(len(self._blocks), parent_id, height, miner, round, payload)
        self._blocks.append(block)
        return block

    def ancestor_at(self, block: Union[Block, int], height: int) -> Optional[Block]:
        """The ancestor-or-self of ``block`` at ``height``, or None above it."""
        b = block if isinstance(block, Block) else self[block]
        if height > b.height or height < 0:
            return None
        while b.height > height:
            if b.parent is None:
                raise BrokenChainError(f"block {b.id} has height {b.height} but no parent")
            b = self._blocks[b.parent]
        return b

    def is_ancestor(self, a: Union[Block, int], b: Union[Block, int]) -> bool:
        """True iff ``a`` is an ancestor-or-self of ``b``."""
        a = a if isinstance(a, Block) else self[a]
        anc = self.ancestor_at(b, a.height)
        return anc is not None and anc.id == a.id


def chain_of(tip: Union[Block, int], store: BlockStore) -> Chain:
    """Blocks from the root genesis up to ``tip``, in height order."""
    b = tip if isinstance(tip, Block) else store[tip]
    out = [b]
    while b.parent is not None:
        parent = store[b.parent]
        if parent.height != b.height - 1:
            raise BrokenChainError(f"parent link {b.id}->{parent.id} skips heights")
        b = parent
        out.append(b)
    if b.height != 0:
        raise BrokenChainError(f"root block {b.id} has height {b.height}")
    out.reverse()
    return tuple(out)


def depth(block: Block, tip: Block, store: BlockStore) -> Optional[int]:
    if store.is_ancestor(block, tip):
        return tip.height - block.height
    return NOT_IN_CHAIN


def conflicts(a: Block, b: Block) -> bool:
    return a.id != b.id and a.height == b.height


def _by_height(log: Union[Log, Mapping[int, Block]]) -> Mapping[int, int]:
    if isinstance(log, Mapping):
        return {h: b.id for h, b in log.items()}
    return {b.height: b.id for b in log}


def prefix_comparable(a: Union[Log, Mapping[int, Block]], b: Union[Log, Mapping[int, Block]]) -> bool:
    """True iff the logs agree at every height present in both."""
    ha, hb = _by_height(a), _by_height(b)
    if len(ha) > len(hb):
        ha, hb = hb, ha
    return all(hb.get(h, bid) == bid for h, bid in ha.items())

"""
Hash-chained trading record with proof-of-contribution block creation.

Canonical layout (little-endian, fixed width, lists length-prefixed):

    Transaction: serial u64 | slot u32 | rc u32 | tc u32 | n_grants u32
                 then per grant: link u32 | n_fs u32 | fs u32 * n_fs
    Block:       prev_hash 32B | creator u32 | slot u32 | n_tx u32 | tx...

A committed block is its canonical encoding followed by its SHA-256 digest.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from collections import defaultdict
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Union

from models.schemas import BlockOut, ChainDump, TransactionOut
from trading.engine import Trade
from trading.errors import ChainFormatError

logger = logging.getLogger(__name__)

GENESIS_HASH = bytes(32)
DIGEST_SIZE = 32
U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1

CreatorMetric = Literal["credit", "fs"]


@dataclass(frozen=True)
class Transaction:
    serial: int
    slot_index: int
    rc_id: int
    tc_id: int
    grants: tuple[tuple[int, tuple[int, ...]], ...]


@dataclass(frozen=True)
class Block:
    header_prev_hash: bytes
    creator_id: int
    slot_index: int
    transactions: tuple[Transaction, ...]
    block_hash: bytes


def _u32(value: int) -> bytes:
    if not 0 <= value <= U32_MAX:
        raise ChainFormatError(f"field out of range: {value}")
    return struct.pack("<I", value)


def _u64(value: int) -> bytes:
    if not 0 <= value <= U64_MAX:
        raise ChainFormatError(f"field out of range: {value}")
    return struct.pack("<Q", value)


def _encode_transaction(tx: Transaction) -> bytes:
    if not tx.grants:
        raise ChainFormatError(f"transaction {tx.serial} has no grants")
    parts = [_u64(tx.serial), _u32(tx.slot_index), _u32(tx.rc_id), _u32(tx.tc_id), _u32(len(tx.grants))]
    for link, fs_list in tx.grants:
        if list(fs_list) != sorted(set(fs_list)):
            raise ChainFormatError(f"transaction {tx.serial}: FS list on link {link} not sorted/unique")
        parts.append(_u32(link))
        parts.append(_u32(len(fs_list)))
        parts.extend(_u32(fs) for fs in fs_list)
    return b"".join(parts)


def _encode_header_and_record(
    prev_hash: bytes, creator_id: int, slot_index: int, transactions: Iterable[Transaction]
) -> bytes:
    if len(prev_hash) != DIGEST_SIZE:
        raise ChainFormatError("previous hash must be 32 bytes")
    transactions = list(transactions)
    parts = [prev_hash, _u32(creator_id), _u32(slot_index), _u32(len(transactions))]
    parts.extend(_encode_transaction(tx) for tx in transactions)
    return b"".join(parts)


def encode_canonical(item: Union[Transaction, Block]) -> bytes:
    """Injective byte encoding of a transaction, or of a block's header+record."""
    if isinstance(item, Transaction):
        return _encode_transaction(item)
    return _encode_header_and_record(item.header_prev_hash, item.creator_id, item.slot_index, item.transactions)


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def block_bytes(block: Block) -> bytes:
    return encode_canonical(block) + block.block_hash


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise ChainFormatError("truncated chain data")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _decode_transaction(reader: _Reader) -> Transaction:
    serial = reader.u64()
    slot_index, rc_id, tc_id, n_grants = reader.u32(), reader.u32(), reader.u32(), reader.u32()
    if n_grants == 0:
        raise ChainFormatError(f"transaction {serial} has no grants")
    grants = []
    for _ in range(n_grants):
        link, n_fs = reader.u32(), reader.u32()
        if n_fs * 4 > len(reader.data) - reader.offset:
            raise ChainFormatError("truncated chain data")
        fs_list = tuple(reader.u32() for _ in range(n_fs))
        if list(fs_list) != sorted(set(fs_list)):
            raise ChainFormatError(f"transaction {serial}: FS list on link {link} not sorted/unique")
        grants.append((link, fs_list))
    return Transaction(serial, slot_index, rc_id, tc_id, tuple(grants))


def _decode_block(reader: _Reader) -> Block:
    prev_hash = reader.take(DIGEST_SIZE)
    creator_id, slot_index, n_tx = reader.u32(), reader.u32(), reader.u32()
    if n_tx * 24 > len(reader.data) - reader.offset:
        raise ChainFormatError("truncated chain data")
    transactions = tuple(_decode_transaction(reader) for _ in range(n_tx))
    block_hash = reader.take(DIGEST_SIZE)
    return Block(prev_hash, creator_id, slot_index, transactions, block_hash)


def decode_block(data: bytes) -> Block:
    """Decode one committed block; trailing bytes are an error."""
    reader = _Reader(data)
    block = _decode_block(reader)
    if reader.offset != len(data):
        raise ChainFormatError("trailing bytes after block")
    return block


def decode_transaction(data: bytes) -> Transaction:
    reader = _Reader(data)
    tx = _decode_transaction(reader)
    if reader.offset != len(data):
        raise ChainFormatError("trailing bytes after transaction")
    return tx


def iter_blocks(data: bytes) -> Iterator[Block]:
    """Decode concatenated committed blocks lazily, one at a time."""
    reader = _Reader(data)
    while reader.offset < len(data):
        yield _decode_block(reader)


def transactions_for(trades: Iterable[Trade], first_serial: int) -> list[Transaction]:
    """One transaction per (RC, TC) pair of every trade, serials in chain order."""
    transactions = []
    serial = first_serial
    for trade in sorted(trades, key=lambda t: t.serial):
        for contribution in trade.contributions:
            transactions.append(Transaction(serial, trade.slot, trade.rc, contribution.tc, contribution.grants))
            serial += 1
    return transactions


def select_creator(trades: Iterable[Trade], metric: CreatorMetric = "credit") -> Optional[int]:
    """The slot's largest contributor (tie: lowest VON id); None without trades."""
    earned: dict[int, int] = defaultdict(int)
    for trade in trades:
        for contribution in trade.contributions:
            earned[contribution.tc] += contribution.credit_units if metric == "credit" else contribution.fs_count
    if not earned:
        return None
    return min(earned, key=lambda von: (-earned[von], von))


def build_block(prev_hash: bytes, creator_id: int, slot_index: int, transactions: Iterable[Transaction]) -> Block:
    transactions = tuple(transactions)
    encoded = _encode_header_and_record(prev_hash, creator_id, slot_index, transactions)
    return Block(prev_hash, creator_id, slot_index, transactions, digest(encoded))


def build_slot_block(
    chain: "Chain", trades: Iterable[Trade], slot_index: int, metric: CreatorMetric = "credit"
) -> Optional[Block]:
    """The block the slot's creator would announce on top of ``chain``; None without trades."""
    trades = list(trades)
    creator = select_creator(trades, metric)
    if creator is None:
        return None
    return build_block(chain.tip_hash, creator, slot_index, transactions_for(trades, chain.next_serial))


def verify_block(
    block: Block,
    prev_hash: bytes,
    expected_transactions: Optional[list[Transaction]] = None,
    expected_creator: Optional[int] = None,
) -> Optional[str]:
    """Return None when ``block`` is valid, otherwise the reason it is not."""
    if block.header_prev_hash != prev_hash:
        return "header does not match the previous block hash"
    try:
        recomputed = digest(encode_canonical(block))
    except ChainFormatError as exc:
        return f"unencodable block: {exc}"
    if recomputed != block.block_hash:
        return "block hash mismatch"
    if expected_creator is not None and block.creator_id != expected_creator:
        return f"creator {block.creator_id} is not the largest contributor {expected_creator}"
    if expected_transactions is not None and list(block.transactions) != expected_transactions:
        return "transactions differ from the trade log"
    return None


@dataclass(frozen=True)
class ChainVerdict:
    ok: bool
    failed_index: Optional[int] = None
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.ok


class Chain:
    """An actor's replica of the trading record."""

    def __init__(self, blocks: Iterable[Block] = ()):
        self.blocks: list[Block] = list(blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def tip_hash(self) -> bytes:
        return self.blocks[-1].block_hash if self.blocks else GENESIS_HASH

    @property
    def next_serial(self) -> int:
        for block in reversed(self.blocks):
            if block.transactions:
                return block.transactions[-1].serial + 1
        return 1

    @property
    def transaction_count(self) -> int:
        return sum(len(block.transactions) for block in self.blocks)

    def append(self, block: Block) -> None:
        if block.header_prev_hash != self.tip_hash:
            raise ChainFormatError("block does not extend the chain tip")
        self.blocks.append(block)

    def copy(self) -> "Chain":
        return Chain(self.blocks)

    def to_bytes(self) -> bytes:
        return b"".join(block_bytes(block) for block in self.blocks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Chain":
        return cls(iter_blocks(data))

    def to_dump(self) -> ChainDump:
        return ChainDump(
            blocks=[
                BlockOut(
                    height=height,
                    prev_hash=block.header_prev_hash.hex(),
                    creator_id=block.creator_id,
                    slot_index=block.slot_index,
                    block_hash=block.block_hash.hex(),
                    transactions=[
                        TransactionOut(
                            serial=tx.serial,
                            slot_index=tx.slot_index,
                            rc_id=tx.rc_id,
                            tc_id=tx.tc_id,
                            grants=[[link, list(fs)] for link, fs in tx.grants],
                        )
                        for tx in block.transactions
                    ],
                )
                for height, block in enumerate(self.blocks)
            ]
        )

    @classmethod
    def from_dump(cls, dump: ChainDump) -> "Chain":
        return cls(
            Block(
                header_prev_hash=bytes.fromhex(item.prev_hash),
                creator_id=item.creator_id,
                slot_index=item.slot_index,
                transactions=tuple(
                    Transaction(tx.serial, tx.slot_index, tx.rc_id, tx.tc_id,
                                tuple((link, tuple(fs)) for link, fs in tx.grants))
                    for tx in item.transactions
                ),
                block_hash=bytes.fromhex(item.block_hash),
            )
            for item in dump.blocks
        )

    def export_binary(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load_binary(cls, path: Union[str, Path]) -> "Chain":
        return cls.from_bytes(Path(path).read_bytes())

    def export_text(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.to_dump().model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def load_text(cls, path: Union[str, Path]) -> "Chain":
        return cls.from_dump(ChainDump.model_validate_json(Path(path).read_text(encoding="utf-8")))


def _verify_blocks(
    blocks: Iterator[Block],
    trade_log: Iterable[Trade],
    creator_metric: CreatorMetric,
) -> ChainVerdict:
    by_slot: dict[int, list[Trade]] = defaultdict(list)
    for trade in trade_log:
        by_slot[trade.slot].append(trade)
    slots = sorted(slot for slot, trades in by_slot.items() if trades)

    prev_hash = GENESIS_HASH
    serial = 1
    index = 0
    while True:
        try:
            block = next(blocks, None)
        except ChainFormatError as exc:
            return ChainVerdict(False, index, f"malformed block: {exc}")
        if block is None:
            break
        if index >= len(slots):
            return ChainVerdict(False, index, "block without matching trades")
        trades = by_slot[slots[index]]
        expected = transactions_for(trades, serial)
        reason = verify_block(block, prev_hash, expected, select_creator(trades, creator_metric))
        if reason is None and block.slot_index != slots[index]:
            reason = f"slot index {block.slot_index} != {slots[index]}"
        if reason is not None:
            return ChainVerdict(False, index, reason)
        prev_hash = block.block_hash
        serial += len(expected)
        index += 1
    if index < len(slots):
        return ChainVerdict(False, index, "trades missing from the chain")
    return ChainVerdict(True)


def verify_chain(chain: Chain, trade_log: Iterable[Trade], creator_metric: CreatorMetric = "credit") -> ChainVerdict:
    """Check every hash link and every block's content against the trade log."""
    return _verify_blocks(iter(chain.blocks), trade_log, creator_metric)


def verify_chain_bytes(
    data: bytes,
    trade_log: Iterable[Trade],
    creator_metric: CreatorMetric = "credit",
) -> ChainVerdict:
    """Like :func:`verify_chain`, over a serialized chain.

    Blocks are decoded one by one, so bytes that no longer parse fail at the
    index of the block being read instead of raising.
    """
    return _verify_blocks(iter_blocks(data), trade_log, creator_metric)

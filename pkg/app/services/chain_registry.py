"""
Username registry block chain.

Blocks notarize username -> public key bindings. Each registration carries its
own small proof-of-work; blocks carry a larger one whose difficulty the network
retargets. The active chain is the one with the most cumulative work
(sum of 2^difficulty), ties going to the branch whose tip arrived first.

ChainState is owned by a single node. Directories are kept per block so that
validation against any parent and reorganisation are plain lookups.
"""
from __future__ import annotations

import functools
import logging
import random
import re
from dataclasses import dataclass, field
from app.core.compat import StrEnum
from typing import Iterable, Mapping, Sequence

from app.core.config import Settings, settings
from app.core.crypto import (
    Digest,
    KeyPair,
    PublicKey,
    SignedContent,
    hash_value,
    pow_check,
    pow_digest,
    pow_search,
    sign,
    verify,
)
from app.core.encoding import U64_MAX, canonical_encode
from app.core.verdict import ACCEPT, Verdict, reject
from app.services.merkle import MerkleError, MerkleStep, fold_path, leaf_hash, merkle_path, merkle_root

logger = logging.getLogger(__name__)

_USERNAME_RE = re.compile(r"[a-z][a-z0-9_]*")
ZERO_DIGEST = Digest(bytes(32))
SECONDS_PER_DAY = 86400


class ChainError(Exception):
    """Registry misuse (unknown block, bad parameters)."""


class RegReject(StrEnum):
    BAD_POW = "bad-pow"
    BAD_USERNAME = "bad-username"
    DUPLICATE = "duplicate"
    BAD_REPLACEMENT_SIGNATURE = "bad-replacement-signature"


class BlockReject(StrEnum):
    BAD_POW = "bad-pow"
    BAD_REG = "bad-reg"
    BAD_MERKLE = "bad-merkle"
    BAD_SPAM = "bad-spam"
    BAD_HEADER = "bad-header"
    ORPHAN = "orphan"
    KNOWN = "known"


def username_valid(name: str, max_len: int | None = None) -> bool:
    limit = settings.USERNAME_MAX_LEN if max_len is None else max_len
    return 1 <= len(name) <= limit and _USERNAME_RE.fullmatch(name) is not None


def user_id(username: str) -> Digest:
    """DHT id of a user: the digest of the username."""
    return hash_value(username)


@dataclass(frozen=True)
class UserReg:
    username: str
    pubkey: PublicKey
    nonce: int
    prev_key_signature: bytes | None = None

    def pow_payload(self) -> bytes:
        return canonical_encode([self.username, self.pubkey])

    def digest(self) -> Digest:
        return hash_value(self)


@dataclass(frozen=True)
class PromotedMessage:
    sponsor: str
    text: str
    language_tag: str = "en"


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: Digest
    timestamp: int
    difficulty_bits: int
    reg_merkle_root: Digest
    spam_msg: PromotedMessage
    nonce: int

    def pow_payload(self) -> bytes:
        return canonical_encode([
            self.height,
            self.prev_hash,
            self.timestamp,
            self.difficulty_bits,
            self.reg_merkle_root,
            self.spam_msg,
        ])

    def block_hash(self) -> Digest:
        return pow_digest(self.pow_payload(), self.nonce)


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    registrations: tuple[UserReg, ...] = ()

    @functools.cached_property
    def block_hash(self) -> Digest:
        return self.header.block_hash()

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def prev_hash(self) -> Digest:
        return self.header.prev_hash

    @property
    def timestamp(self) -> int:
        return self.header.timestamp

    @property
    def difficulty_bits(self) -> int:
        return self.header.difficulty_bits

    @property
    def reg_merkle_root(self) -> Digest:
        return self.header.reg_merkle_root

    @property
    def spam_msg(self) -> PromotedMessage:
        return self.header.spam_msg

    @property
    def nonce(self) -> int:
        return self.header.nonce


@dataclass(frozen=True)
class DirectoryEntry:
    pubkey: PublicKey
    registration_height: int
    key_height: int


@dataclass(frozen=True)
class MerkleProof:
    header: BlockHeader
    registration: UserReg
    path: tuple[MerkleStep, ...]


@dataclass
class ChainUpdate:
    verdict: Verdict
    block_hash: Digest | None = None
    tip_changed: bool = False
    reorg_depth: int = 0
    connected: list[Block] = field(default_factory=list)
    returned_registrations: list[UserReg] = field(default_factory=list)
    missing_parent: Digest | None = None


def registrations_root(registrations: Sequence[UserReg]) -> Digest:
    return merkle_root([leaf_hash(canonical_encode(reg)) for reg in registrations])


def make_userreg(
    username: str,
    keypair: KeyPair,
    difficulty: int | None = None,
    previous: KeyPair | None = None,
    start_nonce: int = 0,
) -> UserReg:
    """Mine a registration; with `previous`, a key replacement signed by the old key."""
    bits = settings.USERREG_DIFFICULTY if difficulty is None else difficulty
    payload = canonical_encode([username, keypair.public])
    nonce = pow_search(payload, bits, start_nonce)
    signature = sign(previous.private, payload).signature if previous else None
    return UserReg(username=username, pubkey=keypair.public, nonce=nonce, prev_key_signature=signature)


def validate_userreg(
    reg: UserReg,
    directory: Mapping[str, DirectoryEntry],
    difficulty: int | None = None,
) -> Verdict[RegReject]:
    bits = settings.USERREG_DIFFICULTY if difficulty is None else difficulty
    if not username_valid(reg.username):
        return reject(RegReject.BAD_USERNAME)
    payload = reg.pow_payload()
    if not pow_check(payload, reg.nonce, bits):
        return reject(RegReject.BAD_POW)
    current = directory.get(reg.username)
    if current is None:
        return ACCEPT
    if reg.prev_key_signature is None:
        return reject(RegReject.DUPLICATE)
    if not verify(current.pubkey, SignedContent(reg.prev_key_signature, payload, reg.username)):
        return reject(RegReject.BAD_REPLACEMENT_SIGNATURE)
    return ACCEPT


def apply_registration(directory: dict[str, DirectoryEntry], reg: UserReg, height: int) -> None:
    existing = directory.get(reg.username)
    first_height = existing.registration_height if existing else height
    directory[reg.username] = DirectoryEntry(reg.pubkey, first_height, height)


def retarget_difficulty(
    recent_blocks: Sequence[tuple[int, int]],
    current_bits: int,
    cfg: Settings = settings,
) -> int:
    """New difficulty from (height, timestamp) pairs; integer-only rounding of log2(target/observed)."""
    if len(recent_blocks) < 2:
        return current_bits
    (first_height, first_time), (last_height, last_time) = recent_blocks[0], recent_blocks[-1]
    height_span = last_height - first_height
    time_span = last_time - first_time
    step = cfg.MAX_RETARGET_STEP
    if height_span <= 0:
        return current_bits
    if time_span <= 0:
        adjustment = step
    else:
        adjustment = _rounded_log2(cfg.BLOCK_TARGET_TICKS * height_span, time_span, step)
    return max(1, min(64, current_bits + adjustment))


def _rounded_log2(num: int, den: int, step: int) -> int:
    # largest a in [-step, step] with num/den >= 2^(a - 1/2)
    for a in range(step, -step - 1, -1):
        lhs = 2 * num * num
        rhs = den * den
        if a >= 0:
            ok = lhs >= rhs << (2 * a)
        else:
            ok = lhs << (-2 * a) >= rhs
        if ok:
            return a
    return -step


def post_rate_bound(tip_height: int, registration_height: int, cfg: Settings = settings) -> int:
    """Exclusive upper bound on post numbers: k < 2 * (tip - registration) + 20 with default settings."""
    return cfg.RATE_PER_BLOCK * max(0, tip_height - registration_height) + cfg.RATE_BASE


def daily_post_allowance(block_target_ticks: int | None = None, per_block: int | None = None) -> int:
    target = settings.BLOCK_TARGET_TICKS if block_target_ticks is None else block_target_ticks
    rate = settings.RATE_PER_BLOCK if per_block is None else per_block
    return rate * (SECONDS_PER_DAY // target)


@functools.lru_cache(maxsize=8)
def build_genesis(difficulty: int = 8) -> Block:
    spam = PromotedMessage(sponsor="", text="", language_tag="")
    draft = BlockHeader(
        height=0,
        prev_hash=ZERO_DIGEST,
        timestamp=0,
        difficulty_bits=difficulty,
        reg_merkle_root=registrations_root(()),
        spam_msg=spam,
        nonce=0,
    )
    nonce = pow_search(draft.pow_payload(), difficulty, 0)
    return Block(header=_with_nonce(draft, nonce), registrations=())


def _with_nonce(header: BlockHeader, nonce: int) -> BlockHeader:
    return BlockHeader(
        height=header.height,
        prev_hash=header.prev_hash,
        timestamp=header.timestamp,
        difficulty_bits=header.difficulty_bits,
        reg_merkle_root=header.reg_merkle_root,
        spam_msg=header.spam_msg,
        nonce=nonce,
    )


class ChainState:
    """One node's view of the registry chain: every known block, the active tip and its directory."""

    def __init__(self, cfg: Settings = settings):
        self.cfg = cfg
        genesis = build_genesis(cfg.GENESIS_DIFFICULTY)
        self.genesis_hash = genesis.block_hash
        self.blocks: dict[Digest, Block] = {genesis.block_hash: genesis}
        self.work: dict[Digest, int] = {genesis.block_hash: 1 << genesis.difficulty_bits}
        self.arrival: dict[Digest, int] = {genesis.block_hash: 0}
        self.directories: dict[Digest, dict[str, DirectoryEntry]] = {genesis.block_hash: {}}
        self.orphans: dict[Digest, list[Block]] = {}
        self.tip: Digest = genesis.block_hash
        self._arrivals = 1

    # ---- views -------------------------------------------------------

    @property
    def tip_block(self) -> Block:
        return self.blocks[self.tip]

    @property
    def height(self) -> int:
        return self.tip_block.height

    @property
    def directory(self) -> Mapping[str, DirectoryEntry]:
        return self.directories[self.tip]

    def path_to(self, block_hash: Digest) -> list[Block]:
        """Blocks from genesis to block_hash inclusive."""
        path = []
        cursor = self.blocks.get(block_hash)
        if cursor is None:
            raise ChainError(f"unknown block {block_hash.hex()[:16]}")
        while True:
            path.append(cursor)
            if cursor.height == 0:
                break
            cursor = self.blocks[cursor.prev_hash]
        path.reverse()
        return path

    def active_chain(self) -> list[Block]:
        return self.path_to(self.tip)

    def snapshot(self) -> "ChainState":
        clone = ChainState.__new__(ChainState)
        clone.cfg = self.cfg
        clone.genesis_hash = self.genesis_hash
        clone.blocks = dict(self.blocks)
        clone.work = dict(self.work)
        clone.arrival = dict(self.arrival)
        clone.directories = dict(self.directories)
        clone.orphans = {k: list(v) for k, v in self.orphans.items()}
        clone.tip = self.tip
        clone._arrivals = self._arrivals
        return clone

    # ---- difficulty --------------------------------------------------

    def required_difficulty(self, parent: Block) -> int:
        height = parent.height + 1
        if height == 1:
            return self.cfg.INITIAL_BLOCK_DIFFICULTY
        interval = self.cfg.RETARGET_INTERVAL
        if interval > 0 and height % interval == 0:
            window = []
            cursor = parent
            while cursor.height >= 1 and len(window) < interval:
                window.append((cursor.height, cursor.timestamp))
                cursor = self.blocks[cursor.prev_hash]
            window.reverse()
            return retarget_difficulty(window, parent.difficulty_bits, self.cfg)
        return parent.difficulty_bits

    # ---- validation --------------------------------------------------

    def check_userreg(self, reg: UserReg) -> Verdict[RegReject]:
        return validate_userreg(reg, self.directory, self.cfg.USERREG_DIFFICULTY)

    def validate_block(self, block: Block) -> Verdict[BlockReject]:
        if block.block_hash in self.blocks:
            return reject(BlockReject.KNOWN)
        parent = self.blocks.get(block.prev_hash)
        if parent is None:
            return reject(BlockReject.ORPHAN)
        if block.height != parent.height + 1 or block.timestamp < parent.timestamp:
            return reject(BlockReject.BAD_HEADER)
        header = block.header
        if header.difficulty_bits != self.required_difficulty(parent):
            return reject(BlockReject.BAD_POW)
        if not pow_check(header.pow_payload(), header.nonce, header.difficulty_bits):
            return reject(BlockReject.BAD_POW)
        if registrations_root(block.registrations) != header.reg_merkle_root:
            return reject(BlockReject.BAD_MERKLE)
        if len(header.spam_msg.text) > self.cfg.SPAM_MAX_CHARS:
            return reject(BlockReject.BAD_SPAM)
        directory = dict(self.directories[parent.block_hash])
        for reg in block.registrations:
            if not validate_userreg(reg, directory, self.cfg.USERREG_DIFFICULTY):
                return reject(BlockReject.BAD_REG)
            apply_registration(directory, reg, block.height)
        return ACCEPT

    # ---- mutation ----------------------------------------------------

    def _store(self, block: Block) -> None:
        parent_hash = block.prev_hash
        directory = dict(self.directories[parent_hash])
        for reg in block.registrations:
            apply_registration(directory, reg, block.height)
        self.blocks[block.block_hash] = block
        self.directories[block.block_hash] = directory
        self.work[block.block_hash] = self.work[parent_hash] + (1 << block.difficulty_bits)
        self.arrival[block.block_hash] = self._arrivals
        self._arrivals += 1

    def apply_block(self, block: Block) -> ChainUpdate:
        """Validate, store, adopt waiting orphans and reselect the active chain."""
        verdict = self.validate_block(block)
        if verdict.reason is BlockReject.ORPHAN:
            waiting = self.orphans.setdefault(block.prev_hash, [])
            if all(o.block_hash != block.block_hash for o in waiting):
                waiting.append(block)
            return ChainUpdate(verdict=verdict, block_hash=block.block_hash, missing_parent=block.prev_hash)
        if not verdict:
            return ChainUpdate(verdict=verdict, block_hash=block.block_hash)

        self._store(block)
        pending = [block.block_hash]
        while pending:
            for orphan in self.orphans.pop(pending.pop(), []):
                if self.validate_block(orphan):
                    self._store(orphan)
                    pending.append(orphan.block_hash)
        update = self.select_chain()
        update.verdict = verdict
        update.block_hash = block.block_hash
        return update

    def select_chain(self, candidate_tips: Iterable[Digest] | None = None) -> ChainUpdate:
        candidates = list(candidate_tips) if candidate_tips is not None else list(self.blocks)
        candidates.append(self.tip)
        best = max(candidates, key=lambda h: (self.work[h], -self.arrival[h]))
        if best == self.tip:
            return ChainUpdate(verdict=ACCEPT)

        old_path = self.path_to(self.tip)
        new_path = self.path_to(best)
        fork = 0
        while fork < min(len(old_path), len(new_path)) and old_path[fork].block_hash == new_path[fork].block_hash:
            fork += 1
        disconnected = old_path[fork:]
        connected = new_path[fork:]
        kept = {reg.digest() for b in connected for reg in b.registrations}
        returned = [
            reg for b in disconnected for reg in b.registrations if reg.digest() not in kept
        ]
        self.tip = best
        if disconnected:
            logger.info(
                "Registry chain reorganised",
                extra={"depth": len(disconnected), "height": self.height, "returned": len(returned)},
            )
        return ChainUpdate(
            verdict=ACCEPT,
            tip_changed=True,
            reorg_depth=len(disconnected),
            connected=connected,
            returned_registrations=returned,
        )


def mine_block(
    state: ChainState,
    pending: Sequence[UserReg],
    spam: PromotedMessage,
    rng_seed: int = 0,
    timestamp: int | None = None,
) -> Block:
    """Build a block on the current tip; conflicting registrations are dropped, first wins."""
    parent = state.tip_block
    height = parent.height + 1
    directory = dict(state.directory)
    included: list[UserReg] = []
    for reg in pending:
        if validate_userreg(reg, directory, state.cfg.USERREG_DIFFICULTY):
            included.append(reg)
            apply_registration(directory, reg, height)
        else:
            logger.debug("Pending registration dropped", extra={"username": reg.username})
    draft = BlockHeader(
        height=height,
        prev_hash=parent.block_hash,
        timestamp=max(parent.timestamp, parent.timestamp if timestamp is None else timestamp),
        difficulty_bits=state.required_difficulty(parent),
        reg_merkle_root=registrations_root(included),
        spam_msg=spam,
        nonce=0,
    )
    nonce = pow_search(draft.pow_payload(), draft.difficulty_bits, rng_seed & U64_MAX)
    return Block(header=_with_nonce(draft, nonce), registrations=tuple(included))


def lookup_pubkey(state: ChainState, username: str) -> DirectoryEntry | None:
    return state.directory.get(username)


def is_confirmed(state: ChainState, username: str, depth: int | None = None) -> bool:
    needed = state.cfg.CONFIRMATION_DEPTH if depth is None else depth
    entry = state.directory.get(username)
    return entry is not None and entry.registration_height <= state.height - needed


def locate_registration(state: ChainState, username: str) -> int | None:
    """Height of the block holding the binding currently in effect."""
    entry = state.directory.get(username)
    return entry.key_height if entry else None


def search_usernames(state: ChainState, prefix: str, limit: int = 20) -> list[str]:
    return sorted(name for name in state.directory if name.startswith(prefix))[:limit]


def header_chain(state: ChainState) -> list[tuple[int, Digest]]:
    return [(block.height, block.block_hash) for block in state.active_chain()]


def merkle_prove(block: Block, username: str) -> MerkleProof:
    leaves = [leaf_hash(canonical_encode(reg)) for reg in block.registrations]
    for index, reg in enumerate(block.registrations):
        if reg.username == username:
            return MerkleProof(header=block.header, registration=reg, path=merkle_path(leaves, index))
    raise MerkleError(f"{username} is not registered in block {block.height}")


def verify_merkle_proof(chain: Sequence[tuple[int, Digest]], proof: MerkleProof) -> bool:
    hashes = dict(chain)
    header = proof.header
    if hashes.get(header.height) != header.block_hash():
        return False
    if header.height > 0 and hashes.get(header.height - 1, header.prev_hash) != header.prev_hash:
        return False
    if not pow_check(header.pow_payload(), header.nonce, header.difficulty_bits):
        return False
    leaf = leaf_hash(canonical_encode(proof.registration))
    return fold_path(leaf, proof.path) == header.reg_merkle_root


def select_promoted(
    state: ChainState,
    recent_window: int,
    locale: str,
    rng: random.Random,
) -> PromotedMessage | None:
    if rng.random() >= state.cfg.DISPLAY_PROBABILITY:
        return None
    recent = state.active_chain()[-recent_window:] if recent_window > 0 else []
    candidates = [b.spam_msg for b in recent if b.spam_msg.text]
    if not candidates:
        return None
    weights = [state.cfg.LOCALE_WEIGHT if m.language_tag == locale else 1 for m in candidates]
    return rng.choices(candidates, weights=weights, k=1)[0]

"""
Per-user (and per-hashtag) swarms.

Members know each other by endpoint only. A user's posts are the pieces
1..k_max of a growing file: "have" announcements carry the new post and are
flooded to every connected peer, bitlists drive piece requests for anything
missed. Hashtag swarms have no sequence and flood posts with new_k = 0.

This module holds swarm state and the rules; the node moves the messages.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from app.core.compat import StrEnum
from typing import Callable, Iterable, Sequence

from app.core.config import Settings, settings
from app.core.crypto import Digest, hash_value
from app.core.verdict import ACCEPT, Verdict, reject
from app.services.chain_registry import ChainState, post_rate_bound
from app.services.dht_overlay import Endpoint, NodeId, RoutingTable, storage_key
from app.services.microblog import (
    PostKind,
    UserPost,
    extract_entities,
    hashtag_target,
    swarm_target,
    tracker_target,
    verify_post,
)

logger = logging.getLogger(__name__)


class SwarmError(Exception):
    """Swarm misuse (unknown swarm, wrong kind)."""


class HaveReject(StrEnum):
    UNREGISTERED = "unregistered"
    INCONSISTENT = "inconsistent"
    BAD_SIGNATURE = "bad-signature"
    RATE_EXCEEDED = "rate-exceeded"
    CONFLICT = "conflict"


class SwarmKind(StrEnum):
    USER = "user"
    HASHTAG = "hashtag"


class SwarmRole(StrEnum):
    FOLLOWER = "follower"
    GATEWAY = "gateway"
    SEEDER = "seeder"
    PRODUCER = "producer"


@dataclass(frozen=True)
class SwarmId:
    id: Digest
    subject: str
    kind: SwarmKind

    @property
    def tracker_subject(self) -> str:
        return self.subject if self.kind == SwarmKind.USER else f"#{self.subject}"

    @property
    def tracker_key(self) -> Digest:
        return storage_key(tracker_target(self.tracker_subject))


def user_swarm(username: str) -> SwarmId:
    return SwarmId(storage_key(swarm_target(username)), username, SwarmKind.USER)


def hashtag_swarm(tag: str) -> SwarmId:
    tag = tag.lower()
    return SwarmId(storage_key(hashtag_target(tag)), tag, SwarmKind.HASHTAG)


def swarm_for_tracker(subject: str) -> SwarmId:
    if subject.startswith("#"):
        return hashtag_swarm(subject[1:])
    return user_swarm(subject)


# ---- messages ---------------------------------------------------------------


@dataclass(frozen=True)
class HaveMessage:
    swarm: Digest
    new_k: int
    post: UserPost


@dataclass(frozen=True)
class BitlistMessage:
    swarm: Digest
    k_max: int
    bits: bytes


@dataclass(frozen=True)
class PieceRequest:
    swarm: Digest
    ks: tuple[int, ...]


@dataclass(frozen=True)
class PieceMessage:
    swarm: Digest
    post: UserPost


@dataclass(frozen=True)
class SwarmConnect:
    swarm: SwarmId
    sender: NodeId
    k_max: int
    bits: bytes


@dataclass(frozen=True)
class SwarmAccept:
    accepted: bool
    k_max: int = 0
    bits: bytes = b""


# ---- membership -------------------------------------------------------------


def _bit(bits: bytes | bytearray, k: int) -> bool:
    index = k - 1
    return index // 8 < len(bits) and bool(bits[index // 8] & (0x80 >> (index % 8)))


@dataclass
class SwarmMembership:
    swarm: SwarmId
    role: SwarmRole
    peers: list[Endpoint] = field(default_factory=list)
    pieces: dict[int, UserPost] = field(default_factory=dict)
    stream: dict[Digest, UserPost] = field(default_factory=dict)
    k_max: int = 0
    bits: bytearray = field(default_factory=bytearray)
    seen: set[Digest] = field(default_factory=set)
    penalties: Counter[Endpoint] = field(default_factory=Counter)

    @property
    def seeder(self) -> bool:
        return self.role in (SwarmRole.SEEDER, SwarmRole.PRODUCER)

    def set_kmax(self, k: int) -> None:
        """Raise the piece count; unknown pieces in the gap stay 0."""
        if k > self.k_max:
            self.k_max = k
            needed = (k + 7) // 8
            self.bits.extend(bytes(needed - len(self.bits)))

    def has(self, k: int) -> bool:
        return _bit(self.bits, k)

    def bitlist(self) -> bytes:
        return bytes(self.bits)

    def add_peer(self, endpoint: Endpoint, cap: int) -> bool:
        if endpoint in self.peers:
            return True
        if len(self.peers) >= cap:
            return False
        self.peers.append(endpoint)
        return True

    def drop_peer(self, endpoint: Endpoint) -> None:
        if endpoint in self.peers:
            self.peers.remove(endpoint)

    def store_piece(self, post: UserPost) -> Verdict[HaveReject]:
        held = self.pieces.get(post.k)
        if held is not None:
            return ACCEPT if held == post else reject(HaveReject.CONFLICT)
        self.set_kmax(post.k)
        self.pieces[post.k] = post
        index = post.k - 1
        self.bits[index // 8] |= 0x80 >> (index % 8)
        return ACCEPT

    def posts(self) -> list[UserPost]:
        if self.swarm.kind == SwarmKind.HASHTAG:
            return sorted(self.stream.values(), key=lambda p: (p.username, p.k))
        return [self.pieces[k] for k in sorted(self.pieces)]


def validate_have(msg: HaveMessage, swarm: SwarmId, chain: ChainState) -> Verdict[HaveReject]:
    """Registered author, consistent numbering, valid signature, k < 2 * (tip - registration) + 20."""
    post = msg.post
    entry = chain.directory.get(post.username)
    if entry is None:
        return reject(HaveReject.UNREGISTERED)
    if swarm.kind == SwarmKind.USER:
        if post.username != swarm.subject or msg.new_k != post.k:
            return reject(HaveReject.INCONSISTENT)
    elif msg.new_k != 0 or post.kind == PostKind.DM or swarm.subject not in extract_entities(post.body.msg, chain.cfg).hashtags:
        return reject(HaveReject.INCONSISTENT)
    if not verify_post(post, chain.directory, chain.cfg):
        return reject(HaveReject.BAD_SIGNATURE)
    if post.k >= post_rate_bound(chain.height, entry.registration_height, chain.cfg):
        return reject(HaveReject.RATE_EXCEEDED)
    return ACCEPT


def have_for(swarm: SwarmId, post: UserPost) -> HaveMessage:
    new_k = post.k if swarm.kind == SwarmKind.USER else 0
    return HaveMessage(swarm=swarm.id, new_k=new_k, post=post)


def accept_have(membership: SwarmMembership, msg: HaveMessage, chain: ChainState) -> Verdict[HaveReject]:
    verdict = validate_have(msg, membership.swarm, chain)
    if not verdict:
        return verdict
    if membership.swarm.kind == SwarmKind.HASHTAG:
        membership.stream.setdefault(msg.post.digest(), msg.post)
        return ACCEPT
    return membership.store_piece(msg.post)


def flood_have(membership: SwarmMembership, msg: HaveMessage, source: Endpoint | None) -> list[Endpoint]:
    """Peers to forward to; empty for a message already seen. The have's k becomes the new piece count."""
    digest = hash_value(msg)
    if digest in membership.seen:
        return []
    membership.seen.add(digest)
    if msg.new_k:
        membership.set_kmax(msg.new_k)
    return [peer for peer in membership.peers if peer != source]


def gateway_duty_check(table: RoutingTable, swarm: SwarmId) -> bool:
    return table.is_responsible(swarm.id) or table.is_responsible(swarm.tracker_key)


def gateway_ingest(
    membership: SwarmMembership,
    post: UserPost,
    chain: ChainState,
) -> tuple[Verdict[HaveReject], HaveMessage, list[Endpoint]]:
    """Incorporate a DHT-delivered post; returns the have to flood and its targets (none on duplicates)."""
    msg = have_for(membership.swarm, post)
    if hash_value(msg) in membership.seen:
        return ACCEPT, msg, []
    verdict = accept_have(membership, msg, chain)
    if not verdict:
        return verdict, msg, []
    return verdict, msg, flood_have(membership, msg, None)


def missing_pieces(
    membership: SwarmMembership,
    peer_kmax: int,
    peer_bits: bytes,
    cfg: Settings = settings,
) -> list[int]:
    """Pieces the peer has and we lack, newest RECENT_WINDOW only unless we archive everything."""
    membership.set_kmax(peer_kmax)
    lowest = 1 if membership.seeder else max(1, membership.k_max - cfg.RECENT_WINDOW + 1)
    return [
        k for k in range(lowest, peer_kmax + 1)
        if _bit(peer_bits, k) and not membership.has(k)
    ]


def gap_pieces(membership: SwarmMembership, upto: int, cfg: Settings = settings) -> list[int]:
    """Pieces below a freshly announced k that we never received."""
    lowest = 1 if membership.seeder else max(1, upto - cfg.RECENT_WINDOW + 1)
    return [k for k in range(lowest, upto) if not membership.has(k)]


def serve_request(membership: SwarmMembership, ks: Iterable[int]) -> list[UserPost]:
    return [membership.pieces[k] for k in ks if k in membership.pieces]


def accept_piece(
    membership: SwarmMembership,
    post: UserPost,
    chain: ChainState,
    source: Endpoint,
) -> Verdict[HaveReject]:
    """A served piece must pass the same checks as a have; failures count against the peer."""
    verdict = validate_have(have_for(membership.swarm, post), membership.swarm, chain)
    if verdict:
        verdict = membership.store_piece(post)
    if not verdict:
        membership.penalties[source] += 1
        logger.debug(
            "Rejected served piece",
            extra={"swarm": membership.swarm.subject, "k": post.k, "reason": str(verdict.reason)},
        )
    return verdict


def dial_candidates(
    membership: SwarmMembership,
    candidates: Sequence[Endpoint],
    me: Endpoint,
    cfg: Settings = settings,
) -> list[Endpoint]:
    """Up to FANOUT distinct endpoints to handshake with, skipping ourselves and current peers."""
    picked: list[Endpoint] = []
    for endpoint in candidates:
        if endpoint == me or endpoint in membership.peers or endpoint in picked:
            continue
        picked.append(endpoint)
        if len(picked) >= cfg.FANOUT:
            break
    return picked


def tracker_peers(membership: SwarmMembership | None, is_alive: Callable[[Endpoint], bool]) -> list[Endpoint]:
    if membership is None:
        return []
    return [peer for peer in membership.peers if is_alive(peer)]

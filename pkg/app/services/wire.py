"""
Wire framing: one type byte followed by the canonical encoding of the message.
"""
from __future__ import annotations

from dataclasses import dataclass

from app.core.crypto import Digest
from app.core.encoding import EncodingError, canonical_decode, canonical_encode
from app.services.chain_registry import Block, UserReg
from app.services.dht_overlay import DhtPacket, GetResult, NodeId, StorageTarget
from app.services.microblog import UserPost
from app.services.post_swarm import (
    BitlistMessage,
    HaveMessage,
    PieceMessage,
    PieceRequest,
    SwarmAccept,
    SwarmConnect,
)


@dataclass(frozen=True)
class FindNodeRequest:
    target: Digest
    sender: NodeId


@dataclass(frozen=True)
class FindNodeResponse:
    contacts: tuple[NodeId, ...]


@dataclass(frozen=True)
class GetRequest:
    key: Digest
    target: StorageTarget | None
    sender: NodeId


@dataclass(frozen=True)
class GetResponse:
    result: GetResult | None


@dataclass(frozen=True)
class ListenRequest:
    username: str
    sender: NodeId


@dataclass(frozen=True)
class Challenge:
    nonce: bytes


@dataclass(frozen=True)
class ChallengeResponse:
    username: str
    nonce: bytes
    signature: bytes
    sender: NodeId


@dataclass(frozen=True)
class ListenResult:
    accepted: bool


@dataclass(frozen=True)
class Ping:
    sender: NodeId


@dataclass(frozen=True)
class Pong:
    responder: NodeId


@dataclass(frozen=True)
class StoreReplica:
    packet: DhtPacket


@dataclass(frozen=True)
class MentionPayload:
    mentioned: str
    post: UserPost


@dataclass(frozen=True)
class MentionPacket:
    packet: DhtPacket


@dataclass(frozen=True)
class ListenerForward:
    username: str
    post: UserPost


@dataclass(frozen=True)
class GetBlock:
    block_hash: Digest


MESSAGE_TYPES: dict[int, type] = {
    0x01: HaveMessage,
    0x02: BitlistMessage,
    0x03: PieceRequest,
    0x04: PieceMessage,
    0x10: FindNodeRequest,
    0x11: FindNodeResponse,
    0x12: GetRequest,
    0x13: GetResponse,
    0x14: SwarmConnect,
    0x15: SwarmAccept,
    0x16: ListenRequest,
    0x17: Challenge,
    0x18: ChallengeResponse,
    0x19: ListenResult,
    0x1A: Ping,
    0x1B: Pong,
    0x1C: StoreReplica,
    0x20: DhtPacket,
    0x21: MentionPacket,
    0x22: ListenerForward,
    0x30: Block,
    0x31: GetBlock,
    0x32: UserReg,
}
TYPE_CODES: dict[type, int] = {cls: code for code, cls in MESSAGE_TYPES.items()}


def encode_message(message) -> bytes:
    try:
        code = TYPE_CODES[type(message)]
    except KeyError:
        raise EncodingError(f"no wire type for {type(message).__name__}") from None
    return bytes([code]) + canonical_encode(message)


def decode_message(data: bytes):
    if not data:
        raise EncodingError("empty message")
    kind = MESSAGE_TYPES.get(data[0])
    if kind is None:
        raise EncodingError(f"unknown message type 0x{data[0]:02x}")
    return canonical_decode(data[1:], kind)


def message_name(message) -> str:
    return type(message).__name__

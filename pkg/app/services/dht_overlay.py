"""
Kademlia-style overlay: endpoint-derived node ids, k-buckets with a per-IP
cap, iterative lookup, and the signed single/multi key-value store.

Network I/O is not done here. Lookups take a `query` callable and the node
(app/services/node.py) decides how packets travel; everything in this module
is a state transition on one node's table or store.
"""
from __future__ import annotations

import heapq
import ipaddress
import logging
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from app.core.compat import StrEnum
from typing import Callable, Iterable, Mapping, Sequence

from app.core.config import Settings, settings
from app.core.crypto import Digest, KeyPair, PublicKey, SignedContent, hash_value, sign, verify
from app.core.encoding import EncodingError, canonical_decode, canonical_encode
from app.core.verdict import ACCEPT, Verdict, reject
from app.services.chain_registry import DirectoryEntry

logger = logging.getLogger(__name__)

ID_BITS = 256


class DhtError(ValueError):
    """Overlay misuse (bad endpoint, bad target)."""


class PutReject(StrEnum):
    MALFORMED = "malformed"
    UNKNOWN_SIGNER = "unknown-signer"
    BAD_SIGNATURE = "bad-signature"
    BAD_KEY = "bad-key"
    READ_ONLY = "read-only"
    NOT_NEIGHBOR = "not-neighbor"
    NOT_OWNER = "not-owner"
    STALE_SEQ = "stale-seq"
    FUTURE_TIME = "future-time"


class Restype(StrEnum):
    SINGLE = "single"
    MULTI = "multi"


TRACKER_RESOURCE = "tracker"


@dataclass(frozen=True, order=True)
class Endpoint:
    ip: int
    port: int

    def __post_init__(self):
        if not 0 <= self.ip < 2**32 or not 0 <= self.port < 2**16:
            raise DhtError(f"invalid endpoint {self.ip}:{self.port}")

    @classmethod
    def parse(cls, ip: str | int, port: int) -> "Endpoint":
        try:
            address = int(ipaddress.IPv4Address(ip))
        except ValueError as e:
            raise DhtError(f"invalid IPv4 address {ip!r}") from e
        return cls(address, port)

    def __str__(self) -> str:
        return f"{ipaddress.IPv4Address(self.ip)}:{self.port}"


@dataclass(frozen=True)
class NodeId:
    id: Digest
    endpoint: Endpoint

    def short(self) -> str:
        return self.id.hex()[:8]


def node_id(ip: str | int, port: int) -> NodeId:
    endpoint = Endpoint.parse(ip, port)
    return NodeId(id=hash_value([endpoint.ip, endpoint.port]), endpoint=endpoint)


def xor_distance(a: Digest, b: Digest) -> int:
    return a.as_int() ^ b.as_int()


def closest_to(target: Digest, contacts: Iterable[NodeId], n: int) -> list[NodeId]:
    return heapq.nsmallest(n, contacts, key=lambda c: xor_distance(c.id, target))


# ---- routing table ----------------------------------------------------------


class RoutingTable:
    """256 buckets; bucket b holds contacts sharing exactly b leading bits with us. Front = most recent."""

    def __init__(self, me: NodeId, cfg: Settings = settings):
        self.me = me
        self.cfg = cfg
        self.buckets: list[deque[NodeId]] = [deque() for _ in range(ID_BITS)]
        self.ip_counts: Counter[int] = Counter()
        self.rejected: Counter[str] = Counter()

    def bucket_index(self, contact_id: Digest) -> int:
        return ID_BITS - xor_distance(self.me.id, contact_id).bit_length()

    def __contains__(self, contact: NodeId) -> bool:
        if contact.id == self.me.id:
            return False
        return contact in self.buckets[self.bucket_index(contact.id)]

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets)

    def contacts(self) -> list[NodeId]:
        return [c for bucket in self.buckets for c in bucket]

    def record_contact(self, contact: NodeId, is_alive: Callable[[NodeId], bool]) -> bool:
        """Insert or refresh a contact; a full bucket keeps its oldest entry unless that one is dead."""
        if contact.id == self.me.id:
            return False
        bucket = self.buckets[self.bucket_index(contact.id)]
        if contact in bucket:
            bucket.remove(contact)
            bucket.appendleft(contact)
            return True
        if self.ip_counts[contact.endpoint.ip] >= self.cfg.MAX_IDS_PER_IP:
            self.rejected["ip-cap"] += 1
            return False
        if len(bucket) >= self.cfg.DHT_K:
            oldest = bucket[-1]
            if is_alive(oldest):
                bucket.pop()
                bucket.appendleft(oldest)
                self.rejected["bucket-full"] += 1
                return False
            self.remove(oldest)
        bucket.appendleft(contact)
        self.ip_counts[contact.endpoint.ip] += 1
        return True

    def remove(self, contact: NodeId) -> None:
        bucket = self.buckets[self.bucket_index(contact.id)]
        if contact in bucket:
            bucket.remove(contact)
            self.ip_counts[contact.endpoint.ip] -= 1
            if not self.ip_counts[contact.endpoint.ip]:
                del self.ip_counts[contact.endpoint.ip]

    def closest_nodes(self, target: Digest, n: int) -> list[NodeId]:
        if n < 1:
            raise DhtError("n must be at least 1")
        return closest_to(target, self.contacts(), n)

    def is_responsible(self, key: Digest) -> bool:
        """Whether we are among the R closest to key, counting ourselves with our contacts."""
        r = self.cfg.DHT_R
        mine = xor_distance(self.me.id, key)
        closer = sum(1 for c in self.closest_nodes(key, r) if xor_distance(c.id, key) < mine)
        return closer < r


def iterative_find(
    me: NodeId,
    table: RoutingTable,
    target: Digest,
    query: Callable[[NodeId, Digest], Sequence[NodeId] | None],
    cfg: Settings = settings,
) -> list[NodeId]:
    """
    Kademlia node lookup. `query` returns the contacts a peer knows near target,
    or None when the peer is unreachable. Converges when a round brings nothing
    closer, then asks every still-unqueried node among the best R once.
    """
    shortlist: dict[Digest, NodeId] = {c.id: c for c in table.closest_nodes(target, cfg.DHT_K)}
    queried: set[Digest] = set()
    failed: set[Digest] = set()

    def best(n: int) -> list[NodeId]:
        alive = [c for c in shortlist.values() if c.id not in failed]
        return closest_to(target, alive, n)

    def ask(contact: NodeId) -> None:
        queried.add(contact.id)
        answer = query(contact, target)
        if answer is None:
            failed.add(contact.id)
            return
        for found in answer:
            if found.id != me.id:
                shortlist.setdefault(found.id, found)

    closest_seen: int | None = None
    while True:
        round_ = [c for c in best(cfg.DHT_K) if c.id not in queried][: cfg.DHT_ALPHA]
        if not round_:
            break
        for contact in round_:
            ask(contact)
        leader = best(1)
        if not leader:
            break
        distance = xor_distance(leader[0].id, target)
        if closest_seen is not None and distance >= closest_seen:
            break
        closest_seen = distance

    for contact in best(cfg.DHT_R):
        if contact.id not in queried:
            ask(contact)
    return best(cfg.DHT_R)


def next_hops(table: RoutingTable, dst: Digest, exclude: Iterable[Digest] = ()) -> list[NodeId] | None:
    """None when the packet is ours to handle, else the ALPHA contacts closest to dst."""
    if table.is_responsible(dst):
        return None
    skip = set(exclude)
    candidates = [c for c in table.contacts() if c.id not in skip]
    return closest_to(dst, candidates, table.cfg.DHT_ALPHA)


# ---- storage ----------------------------------------------------------------


@dataclass(frozen=True)
class StorageTarget:
    owner: str
    resource: str
    restype: str


def storage_key(target: StorageTarget) -> Digest:
    return hash_value(target)


@dataclass(frozen=True)
class PutPayload:
    target: StorageTarget
    value: bytes
    time: int
    seq: int


@dataclass(frozen=True)
class DhtPacket:
    dst: Digest
    src: Digest
    signed_payload: SignedContent
    signer: str
    hop_count: int = 0
    # bumped by each re-send of a stored value; not covered by the signature
    refresh: int = 0


def make_put_packet(
    target: StorageTarget,
    value: bytes,
    time: int,
    seq: int,
    signer: str,
    keypair: KeyPair,
    src: Digest,
) -> DhtPacket:
    payload = canonical_encode(PutPayload(target, value, time, seq))
    return DhtPacket(
        dst=storage_key(target),
        src=src,
        signed_payload=sign(keypair.private, payload, signer),
        signer=signer,
    )


def packet_authentic(packet: DhtPacket, directory: Mapping[str, DirectoryEntry]) -> bool:
    entry = directory.get(packet.signer)
    if entry is None:
        return False
    return verify(entry.pubkey, packet.signed_payload)


@dataclass(frozen=True)
class MultiValue:
    value: bytes
    time: int
    signer: str


@dataclass
class StorageEntry:
    key: Digest
    target: StorageTarget
    restype: Restype
    value: bytes = b""
    time: int = 0
    seq: int = 0
    signer: str = ""
    packet: DhtPacket | None = None
    values: list[MultiValue] = field(default_factory=list)
    provenance: str = "put"
    last_access: int = 0

    @property
    def newest_time(self) -> int:
        if self.restype is Restype.SINGLE:
            return self.time
        return max((v.time for v in self.values), default=0)


class DhtStore:
    def __init__(self, cfg: Settings = settings):
        self.cfg = cfg
        self.entries: dict[Digest, StorageEntry] = {}
        self._clock = 0

    def _touch(self, entry: StorageEntry) -> None:
        self._clock += 1
        entry.last_access = self._clock

    def get(self, key: Digest) -> StorageEntry | None:
        entry = self.entries.get(key)
        if entry is not None:
            self._touch(entry)
        return entry

    def put_single(self, key: Digest, payload: PutPayload, signer: str, packet: DhtPacket) -> Verdict[PutReject]:
        entry = StorageEntry(
            key=key,
            target=payload.target,
            restype=Restype.SINGLE,
            value=payload.value,
            time=payload.time,
            seq=payload.seq,
            signer=signer,
            packet=packet,
        )
        self.entries[key] = entry
        self._touch(entry)
        return ACCEPT

    def put_multi(self, key: Digest, payload: PutPayload, signer: str) -> Verdict[PutReject]:
        entry = self.entries.get(key)
        if entry is None:
            entry = StorageEntry(key=key, target=payload.target, restype=Restype.MULTI)
            self.entries[key] = entry
        digest = hash_value(payload.value)
        if all(hash_value(v.value) != digest for v in entry.values):
            entry.values.insert(0, MultiValue(payload.value, payload.time, signer))
            entry.values.sort(key=lambda v: v.time, reverse=True)
            del entry.values[self.cfg.MULTI_CAP:]
        self._touch(entry)
        return ACCEPT

    def evict_expired(self, now: int) -> int:
        """Drop entries past TTL, then LRU-evict down to STORE_CAP, multi entries first."""
        ttl = self.cfg.STORE_TTL
        removed = 0
        for key, entry in list(self.entries.items()):
            if entry.restype is Restype.MULTI:
                kept = [v for v in entry.values if v.time + ttl >= now]
                removed_values = len(entry.values) - len(kept)
                entry.values = kept
                if not kept:
                    del self.entries[key]
                    removed += 1
                elif removed_values:
                    logger.debug("Expired multi values", extra={"key": key.hex()[:8], "count": removed_values})
            elif entry.time + ttl < now:
                del self.entries[key]
                removed += 1
        excess = len(self.entries) - self.cfg.STORE_CAP
        if excess > 0:
            order = sorted(
                self.entries.values(),
                key=lambda e: (e.restype is Restype.SINGLE, e.last_access),
            )
            for entry in order[:excess]:
                del self.entries[entry.key]
            removed += excess
        return removed

    def refresh_packets(self, now: int) -> list[DhtPacket]:
        return [
            e.packet for e in self.entries.values()
            if e.restype is Restype.SINGLE and e.packet is not None and e.time + self.cfg.STORE_TTL >= now
        ]


def handle_put(
    table: RoutingTable,
    store: DhtStore,
    directory: Mapping[str, DirectoryEntry],
    packet: DhtPacket,
    now: int,
) -> Verdict[PutReject]:
    """Apply the storage acceptance rules in order; first failing rule is the reason."""
    cfg = store.cfg
    entry = directory.get(packet.signer)
    if entry is None:
        return reject(PutReject.UNKNOWN_SIGNER)
    if not verify(entry.pubkey, packet.signed_payload):
        return reject(PutReject.BAD_SIGNATURE)
    try:
        payload = canonical_decode(packet.signed_payload.payload, PutPayload)
    except EncodingError:
        return reject(PutReject.MALFORMED)
    target = payload.target
    if target.restype not in (Restype.SINGLE, Restype.MULTI):
        return reject(PutReject.MALFORMED)
    if packet.dst != storage_key(target):
        return reject(PutReject.BAD_KEY)
    if target.resource == TRACKER_RESOURCE:
        return reject(PutReject.READ_ONLY)
    if not table.is_responsible(packet.dst):
        return reject(PutReject.NOT_NEIGHBOR)
    if target.restype == Restype.SINGLE and packet.signer != target.owner:
        return reject(PutReject.NOT_OWNER)
    if target.restype == Restype.SINGLE:
        current = store.entries.get(packet.dst)
        if current is not None and current.restype is Restype.SINGLE:
            if payload.seq <= current.seq:
                return reject(PutReject.STALE_SEQ)
    if payload.time > now + cfg.CLOCK_SKEW:
        return reject(PutReject.FUTURE_TIME)
    if target.restype == Restype.SINGLE:
        verdict = store.put_single(packet.dst, payload, packet.signer, packet)
    else:
        verdict = store.put_multi(packet.dst, payload, packet.signer)
    if len(store.entries) > cfg.STORE_CAP:
        store.evict_expired(now)
    return verdict


@dataclass(frozen=True)
class GetResult:
    key: Digest
    kind: str
    values: tuple[bytes, ...]
    signers: tuple[str, ...]
    responder: NodeId
    operator: str = ""
    operator_signature: bytes = b""

    def signed_body(self) -> bytes:
        return canonical_encode([self.key, self.kind, list(self.values), list(self.signers), self.responder])


def handle_get(
    store: DhtStore,
    key: Digest,
    responder: NodeId,
    tracker_peers: Sequence[Endpoint] | None = None,
    operator: tuple[str, KeyPair] | None = None,
) -> GetResult | None:
    """Serve a key; tracker answers come from the caller's live swarm view, never from the store."""
    if tracker_peers is not None:
        result = GetResult(
            key=key,
            kind=TRACKER_RESOURCE,
            values=tuple(canonical_encode(ep) for ep in tracker_peers),
            signers=(),
            responder=responder,
        )
    else:
        entry = store.get(key)
        if entry is None:
            return None
        if entry.restype is Restype.SINGLE:
            values, signers = (entry.value,), (entry.signer,)
        else:
            values = tuple(v.value for v in entry.values)
            signers = tuple(v.signer for v in entry.values)
        result = GetResult(key=key, kind=entry.restype.value, values=values, signers=signers, responder=responder)
    if operator is None:
        return result
    name, keypair = operator
    signature = sign(keypair.private, result.signed_body(), name).signature
    return replace(result, operator=name, operator_signature=signature)


def verify_get_result(result: GetResult, operator_key: PublicKey) -> bool:
    if not result.operator_signature:
        return False
    return verify(operator_key, SignedContent(result.operator_signature, result.signed_body(), result.operator))


def decode_endpoints(result: GetResult) -> list[Endpoint]:
    peers = []
    for raw in result.values:
        try:
            peers.append(canonical_decode(raw, Endpoint))
        except (EncodingError, DhtError):
            logger.debug("Dropping malformed tracker value", extra={"responder": result.responder.short()})
    return peers


def lookup_resource(store: DhtStore, owner: str, resource: str) -> StorageEntry | None:
    """Authenticated single storage takes precedence over multi values under the same name."""
    single = store.get(storage_key(StorageTarget(owner, resource, Restype.SINGLE)))
    if single is not None:
        return single
    return store.get(storage_key(StorageTarget(owner, resource, Restype.MULTI)))

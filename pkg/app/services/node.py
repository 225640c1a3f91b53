"""
A twister node: routing table, DHT store, registry chain, mempool, swarm
memberships and any accounts hosted on it, driven by simnet deliveries.

Inbound handling never raises into the simulator. Anything malformed or
rejected is counted in `metrics` and dropped.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import replace
from typing import Iterable

from app.core.config import Settings, settings
from app.core.crypto import Digest, KeyPair, hash_value, sign
from app.core.encoding import EncodingError, canonical_decode, canonical_encode
from app.services import microblog
from app.services.chain_registry import (
    Block,
    BlockReject,
    ChainState,
    ChainUpdate,
    PromotedMessage,
    UserReg,
    mine_block,
    user_id,
)
from app.services.dht_overlay import (
    TRACKER_RESOURCE,
    DhtPacket,
    Endpoint,
    GetResult,
    NodeId,
    PutPayload,
    Restype,
    RoutingTable,
    DhtStore,
    StorageTarget,
    closest_to,
    decode_endpoints,
    handle_get,
    handle_put,
    iterative_find,
    make_put_packet,
    next_hops,
    packet_authentic,
    storage_key,
)
from app.services.microblog import (
    ListenerRegistration,
    PostKind,
    ReplyRef,
    UserAccount,
    UserPost,
    SideEffectPlan,
    decode_post,
    register_listener,
    swarm_target,
    tracker_target,
    verify_post,
)
from app.services.post_swarm import (
    BitlistMessage,
    HaveMessage,
    PieceMessage,
    PieceRequest,
    SwarmAccept,
    SwarmConnect,
    SwarmId,
    SwarmKind,
    SwarmMembership,
    SwarmRole,
    accept_have,
    accept_piece,
    dial_candidates,
    flood_have,
    gap_pieces,
    gateway_duty_check,
    gateway_ingest,
    hashtag_swarm,
    missing_pieces,
    serve_request,
    swarm_for_tracker,
    tracker_peers,
    user_swarm,
)
from app.services.simnet import Simulator
from app.services.wire import (
    Challenge,
    ChallengeResponse,
    FindNodeRequest,
    FindNodeResponse,
    GetBlock,
    GetRequest,
    GetResponse,
    ListenerForward,
    ListenRequest,
    ListenResult,
    MentionPacket,
    MentionPayload,
    Ping,
    Pong,
    StoreReplica,
    decode_message,
    encode_message,
    message_name,
)

logger = logging.getLogger(__name__)


def genuine(contact: NodeId) -> bool:
    """Node ids must be derived from the endpoint they claim."""
    return contact.id == hash_value([contact.endpoint.ip, contact.endpoint.port])


class TwisterNode:
    def __init__(self, sim: Simulator, identity: NodeId, cfg: Settings = settings, hashrate: int | None = None):
        self.sim = sim
        self.cfg = cfg
        self.id = identity
        self.endpoint = identity.endpoint
        self.hashrate = hashrate or cfg.DEFAULT_HASHRATE
        self.table = RoutingTable(identity, cfg)
        self.store = DhtStore(cfg)
        self.chain = ChainState(cfg)
        self.mempool: dict[Digest, UserReg] = {}
        self.swarms: dict[Digest, SwarmMembership] = {}
        self.accounts: dict[str, UserAccount] = {}
        self.listening: dict[str, ListenerRegistration] = {}
        self.listener_registrations: dict[str, list[ListenerRegistration]] = {}
        self.promotion: PromotedMessage | None = None
        self.metrics: Counter[str] = Counter()
        self._seen_regs: set[Digest] = set()
        self._seen_packets: dict[Digest, int] = {}
        self._refresh_epoch = 0
        self._challenges: dict[tuple[str, Digest], bytes] = {}
        self._retry_pending: set[Digest] = set()
        self._automine_generation = 0
        self.automine = False

        self._handlers = {
            HaveMessage: self._on_have,
            BitlistMessage: self._on_bitlist,
            PieceRequest: self._on_piece_request,
            PieceMessage: self._on_piece,
            DhtPacket: self._on_routed_put,
            MentionPacket: self._on_routed_mention,
            StoreReplica: self._on_store_replica,
            ListenerForward: self._on_listener_forward,
            Block: self._on_block,
            GetBlock: self._on_get_block,
            UserReg: self._on_userreg,
        }
        self._call_handlers = {
            FindNodeRequest: self._on_find_node,
            GetRequest: self._on_get,
            SwarmConnect: self._on_swarm_connect,
            ListenRequest: self._on_listen_request,
            ChallengeResponse: self._on_challenge_response,
            Ping: self._on_ping,
        }
        self._schedule_maintenance()

    def __repr__(self) -> str:
        return f"TwisterNode({self.endpoint}, id={self.id.short()})"

    # ---- transport -----------------------------------------------------

    def trace(self, kind: str, detail: str = "") -> None:
        self.sim.record(self.id, kind, detail)

    def send(self, endpoint: Endpoint, message) -> None:
        self.sim.send(self.endpoint, endpoint, encode_message(message))

    def rpc(self, endpoint: Endpoint, message):
        raw = self.sim.call(self.endpoint, endpoint, encode_message(message))
        if raw is None:
            return None
        try:
            return decode_message(raw)
        except EncodingError:
            self.metrics["malformed-response"] += 1
            return None

    def handle_message(self, src: Endpoint, payload: bytes) -> None:
        try:
            message = decode_message(payload)
        except EncodingError as e:
            self.metrics["malformed"] += 1
            logger.debug("Dropping malformed message", extra={"node": self.id.short(), "error": str(e)})
            return
        handler = self._handlers.get(type(message))
        if handler is None:
            self.metrics["unhandled"] += 1
            logger.debug("Unhandled message type", extra={"node": self.id.short(), "type": message_name(message)})
            return
        handler(src, message)

    def handle_call(self, src: Endpoint, payload: bytes) -> bytes | None:
        try:
            message = decode_message(payload)
        except EncodingError:
            self.metrics["malformed"] += 1
            return None
        handler = self._call_handlers.get(type(message))
        if handler is None:
            self.metrics["unhandled"] += 1
            return None
        response = handler(src, message)
        return encode_message(response) if response is not None else None

    # ---- contacts and lookup -------------------------------------------

    def _probe(self, contact: NodeId) -> bool:
        return isinstance(self.rpc(contact.endpoint, Ping(self.id)), Pong)

    def learn(self, contact: NodeId) -> bool:
        if not genuine(contact):
            self.metrics["forged-node-id"] += 1
            return False
        return self.table.record_contact(contact, self._probe)

    def bootstrap(self, seeds: Iterable[NodeId]) -> None:
        for seed in seeds:
            self.learn(seed)
        self.find_nodes(self.id.id)

    def _query_find(self, contact: NodeId, target: Digest) -> list[NodeId] | None:
        response = self.rpc(contact.endpoint, FindNodeRequest(target, self.id))
        if not isinstance(response, FindNodeResponse):
            self.table.remove(contact)
            return None
        found = [c for c in response.contacts if genuine(c)]
        for c in found:
            self.learn(c)
        return found

    def find_nodes(self, key: Digest, include_self: bool = False) -> list[NodeId]:
        found = iterative_find(self.id, self.table, key, self._query_find, self.cfg)
        if include_self:
            found = closest_to(key, [*found, self.id], self.cfg.DHT_R)
        return found

    def _on_find_node(self, src: Endpoint, msg: FindNodeRequest) -> FindNodeResponse:
        if msg.sender.endpoint == src:
            self.learn(msg.sender)
        return FindNodeResponse(tuple(self.table.closest_nodes(msg.target, self.cfg.DHT_K)))

    def _on_ping(self, src: Endpoint, msg: Ping) -> Pong:
        return Pong(self.id)

    # ---- routing and storage -------------------------------------------

    def route(self, packet: DhtPacket, mention: bool = False, source: Endpoint | None = None) -> list[NodeId] | None:
        """Forward toward packet.dst; None when delivered here."""
        marker = hash_value([packet.dst, packet.src, packet.signed_payload, packet.refresh, mention])
        if marker in self._seen_packets:
            return []
        self._seen_packets[marker] = self.sim.now
        if not packet_authentic(packet, self.chain.directory):
            self.metrics["route-dropped:bad-signature"] += 1
            return []
        if packet.hop_count >= self.cfg.MAX_HOPS:
            self.metrics["route-dropped:hop-limit"] += 1
            return []
        hops = next_hops(self.table, packet.dst)
        if hops is None:
            self.metrics["route-delivered"] += 1
            if mention:
                self._deliver_mention(packet)
            else:
                self._store_put(packet, replicate=True)
            return None
        forwarded = replace(packet, hop_count=packet.hop_count + 1)
        message = MentionPacket(forwarded) if mention else forwarded
        sent = [hop for hop in hops if hop.endpoint != source]
        for hop in sent:
            self.send(hop.endpoint, message)
        self.metrics["route-forwarded"] += len(sent)
        return sent

    def _on_routed_put(self, src: Endpoint, packet: DhtPacket) -> None:
        self.route(packet, source=src)

    def _on_routed_mention(self, src: Endpoint, msg: MentionPacket) -> None:
        self.route(msg.packet, mention=True, source=src)

    def _on_store_replica(self, src: Endpoint, msg: StoreReplica) -> None:
        self._store_put(msg.packet, replicate=False)

    def _store_put(self, packet: DhtPacket, replicate: bool) -> bool:
        verdict = handle_put(self.table, self.store, self.chain.directory, packet, self.sim.now)
        if not verdict:
            self.metrics[f"put-rejected:{verdict.reason}"] += 1
            return False
        self.metrics["put-accepted"] += 1
        payload = canonical_decode(packet.signed_payload.payload, PutPayload)
        target = payload.target
        self.trace("put", f"{target.owner}/{target.resource}/{target.restype} seq={payload.seq}")
        if replicate:
            for contact in self.table.closest_nodes(packet.dst, self.cfg.DHT_R):
                self.send(contact.endpoint, StoreReplica(packet))
        self._after_put(payload)
        return True

    def _after_put(self, payload: PutPayload) -> None:
        target = payload.target
        if target.resource == "swarm" and target.restype == Restype.SINGLE:
            swarm = user_swarm(target.owner)
        elif target.resource == "hashtag" and target.restype == Restype.MULTI:
            swarm = hashtag_swarm(target.owner)
        else:
            return
        post = decode_post(payload.value)
        if post is not None:
            self._gateway_ingest(swarm, post)

    def refresh_storage(self) -> int:
        """Re-send stored single values on our own behalf; signatures are the original owner's."""
        self.maintain_store()
        self._refresh_epoch += 1
        packets = self.store.refresh_packets(self.sim.now)
        for packet in packets:
            self.route(replace(packet, src=self.id.id, hop_count=0, refresh=self._refresh_epoch))
        return len(packets)

    def maintain_store(self) -> int:
        """Expire stored values past STORE_TTL, enforce STORE_CAP and forget old routing markers."""
        now = self.sim.now
        expired = self.store.evict_expired(now)
        if expired:
            self.metrics["store-evicted"] += expired
            self.trace("store-evicted", str(expired))
        horizon = now - self.cfg.STORE_MAINTENANCE_TICKS
        self._seen_packets = {m: seen for m, seen in self._seen_packets.items() if seen > horizon}
        return expired

    def _schedule_maintenance(self) -> None:
        def fire() -> None:
            if self.sim.is_alive(self.endpoint):
                self.maintain_store()
            self._schedule_maintenance()

        self.sim.schedule(self.cfg.STORE_MAINTENANCE_TICKS, fire, "store-maintenance")

    def _operator(self) -> tuple[str, KeyPair] | None:
        for name in sorted(self.accounts):
            entry = self.chain.directory.get(name)
            account = self.accounts[name]
            if entry is not None and entry.pubkey == account.keypair.public:
                return name, account.keypair
        return None

    def _serve_get(self, key: Digest, target: StorageTarget | None) -> GetResult | None:
        peers = None
        if target is not None and target.resource == TRACKER_RESOURCE and storage_key(target) == key:
            if not self.table.is_responsible(key):
                return None
            swarm = swarm_for_tracker(target.owner)
            membership = self.swarms.get(swarm.id) or self._maintain(swarm)
            peers = tracker_peers(membership, self.sim.is_alive)
        return handle_get(self.store, key, self.id, peers, self._operator())

    def _on_get(self, src: Endpoint, msg: GetRequest) -> GetResponse:
        if msg.sender.endpoint == src:
            self.learn(msg.sender)
        return GetResponse(self._serve_get(msg.key, msg.target))

    def dht_get(self, target: StorageTarget) -> list[GetResult]:
        key = storage_key(target)
        results = []
        local = self._serve_get(key, target)
        if local is not None:
            results.append(local)
        for contact in self.find_nodes(key):
            response = self.rpc(contact.endpoint, GetRequest(key, target, self.id))
            if isinstance(response, GetResponse) and response.result is not None and response.result.key == key:
                results.append(response.result)
        return results

    # ---- swarms --------------------------------------------------------

    def _open_membership(self, swarm: SwarmId, role: SwarmRole) -> SwarmMembership:
        membership = self.swarms.get(swarm.id)
        if membership is None:
            membership = SwarmMembership(swarm, role)
            self.swarms[swarm.id] = membership
            self.trace("swarm-open", f"{swarm.kind}:{swarm.subject} {role}")
        elif role in (SwarmRole.SEEDER, SwarmRole.PRODUCER, SwarmRole.FOLLOWER) and membership.role == SwarmRole.GATEWAY:
            membership.role = role
        return membership

    def _maintain(self, swarm: SwarmId) -> SwarmMembership:
        """Tracker duty: join lazily, dialing the nodes nearest the swarm key."""
        peers = [c.endpoint for c in self.find_nodes(swarm.id)]
        return self.join_swarm(swarm, SwarmRole.GATEWAY, peers)

    def join_swarm(self, swarm: SwarmId, role: SwarmRole, initial_peers: Iterable[Endpoint]) -> SwarmMembership:
        membership = self._open_membership(swarm, role)
        outbound = max(1, self.cfg.FANOUT // 2)
        dialed = 0
        for endpoint in dial_candidates(membership, list(initial_peers), self.endpoint, self.cfg):
            if dialed >= outbound or len(membership.peers) >= self.cfg.FANOUT:
                break
            response = self.rpc(endpoint, SwarmConnect(swarm, self.id, membership.k_max, membership.bitlist()))
            if not isinstance(response, SwarmAccept) or not response.accepted:
                continue
            if membership.add_peer(endpoint, self.cfg.FANOUT):
                dialed += 1
                self._request_missing(membership, endpoint, response.k_max, response.bits)
        if not membership.peers and role != SwarmRole.GATEWAY:
            self._schedule_retry(swarm, role)
        self.trace("swarm-join", f"{swarm.kind}:{swarm.subject} peers={len(membership.peers)}")
        return membership

    def follow_swarm(self, swarm: SwarmId, role: SwarmRole = SwarmRole.FOLLOWER) -> SwarmMembership:
        candidates: list[Endpoint] = []
        for result in self.dht_get(tracker_target(swarm.tracker_subject)):
            if result.kind == TRACKER_RESOURCE:
                candidates.extend(decode_endpoints(result))
                candidates.append(result.responder.endpoint)
        return self.join_swarm(swarm, role, candidates)

    def _schedule_retry(self, swarm: SwarmId, role: SwarmRole) -> None:
        if swarm.id in self._retry_pending:
            return
        self._retry_pending.add(swarm.id)
        self.metrics["swarm-retry"] += 1

        def retry() -> None:
            self._retry_pending.discard(swarm.id)
            membership = self.swarms.get(swarm.id)
            if membership is None or membership.peers or not self.sim.is_alive(self.endpoint):
                return
            self.follow_swarm(swarm, role)

        self.sim.schedule(self.cfg.RETRY_TICKS, retry, "swarm-retry")

    def _request_missing(self, membership: SwarmMembership, peer: Endpoint, k_max: int, bits: bytes) -> None:
        if membership.swarm.kind != SwarmKind.USER:
            return
        wanted = missing_pieces(membership, k_max, bits, self.cfg)
        if wanted:
            self.send(peer, PieceRequest(membership.swarm.id, tuple(wanted)))

    def _on_swarm_connect(self, src: Endpoint, msg: SwarmConnect) -> SwarmAccept:
        swarm = msg.swarm
        expected = user_swarm(swarm.subject) if swarm.kind == SwarmKind.USER else hashtag_swarm(swarm.subject)
        if msg.sender.endpoint != src or expected != swarm:
            return SwarmAccept(False)
        membership = self.swarms.get(swarm.id)
        if membership is None:
            if not gateway_duty_check(self.table, swarm):
                return SwarmAccept(False)
            membership = self._open_membership(swarm, SwarmRole.GATEWAY)
        if not membership.add_peer(src, self.cfg.FANOUT):
            self.metrics["swarm-full"] += 1
            return SwarmAccept(False)
        self._request_missing(membership, src, msg.k_max, msg.bits)
        return SwarmAccept(True, membership.k_max, membership.bitlist())

    def _gateway_ingest(self, swarm: SwarmId, post: UserPost) -> None:
        membership = self.swarms.get(swarm.id)
        if membership is None:
            if not gateway_duty_check(self.table, swarm):
                return
            membership = self._open_membership(swarm, SwarmRole.GATEWAY)
        seen_before = len(membership.seen)
        verdict, have, targets = gateway_ingest(membership, post, self.chain)
        if not verdict:
            self.metrics[f"have-rejected:{verdict.reason}"] += 1
            return
        if len(membership.seen) == seen_before:
            return
        self.metrics["ingested"] += 1
        self.trace("ingest", f"{swarm.subject} {post.username}/{post.k}")
        self.sim.note_delivery(post.digest())
        for peer in targets:
            self.send(peer, have)

    def _on_have(self, src: Endpoint, msg: HaveMessage) -> None:
        membership = self.swarms.get(msg.swarm)
        if membership is None or src not in membership.peers:
            self.metrics["have-ignored"] += 1
            return
        if hash_value(msg) in membership.seen:
            self.metrics["have-duplicate"] += 1
            return
        verdict = accept_have(membership, msg, self.chain)
        if not verdict:
            self.metrics[f"have-rejected:{verdict.reason}"] += 1
            membership.penalties[src] += 1
            return
        targets = flood_have(membership, msg, src)
        self.metrics["have-accepted"] += 1
        self.trace("have", f"{membership.swarm.subject} {msg.post.username}/{msg.post.k}")
        self.sim.note_delivery(msg.post.digest())
        for peer in targets:
            self.send(peer, msg)
        if membership.swarm.kind == SwarmKind.USER:
            gap = gap_pieces(membership, msg.new_k, self.cfg)
            if gap:
                self.send(src, PieceRequest(membership.swarm.id, tuple(gap)))

    def _on_bitlist(self, src: Endpoint, msg: BitlistMessage) -> None:
        membership = self.swarms.get(msg.swarm)
        if membership is not None and src in membership.peers:
            self._request_missing(membership, src, msg.k_max, msg.bits)

    def _on_piece_request(self, src: Endpoint, msg: PieceRequest) -> None:
        membership = self.swarms.get(msg.swarm)
        if membership is None or src not in membership.peers:
            return
        for post in serve_request(membership, msg.ks):
            self.send(src, PieceMessage(msg.swarm, post))

    def _on_piece(self, src: Endpoint, msg: PieceMessage) -> None:
        membership = self.swarms.get(msg.swarm)
        if membership is None or src not in membership.peers:
            return
        if membership.has(msg.post.k):
            return
        verdict = accept_piece(membership, msg.post, self.chain, src)
        if not verdict:
            self.metrics[f"piece-rejected:{verdict.reason}"] += 1
            return
        self.metrics["piece-accepted"] += 1
        self.trace("piece", f"{membership.swarm.subject} {msg.post.k}")
        self.sim.note_delivery(msg.post.digest())

    def announce_bitlists(self) -> None:
        for membership in self.swarms.values():
            if membership.swarm.kind != SwarmKind.USER:
                continue
            message = BitlistMessage(membership.swarm.id, membership.k_max, membership.bitlist())
            for peer in membership.peers:
                self.send(peer, message)

    # ---- accounts and posting ------------------------------------------

    def add_account(self, account: UserAccount) -> None:
        self.accounts[account.username] = account

    def _account(self, username: str) -> UserAccount:
        account = self.accounts[username]
        account.signing_keypair(self.chain.directory.get(username))
        return account

    def publish(
        self,
        username: str,
        text: str,
        reply_ref: ReplyRef | None = None,
        kind: PostKind | None = None,
    ) -> UserPost:
        account = self._account(username)
        if kind == PostKind.RT and reply_ref is not None:
            post, plan = microblog.create_rt(account, reply_ref, self.chain)
        else:
            post, plan = microblog.create_post(account, text, self.chain, reply_ref, kind)
        self._execute(account, post, plan)
        return post

    def publish_dm(self, username: str, recipient: str, text: str) -> UserPost:
        account = self._account(username)
        post, plan = microblog.create_dm(account, recipient, text, self.chain, self.sim.rng)
        self._execute(account, post, plan)
        return post

    def _execute(self, account: UserAccount, post: UserPost, plan: SideEffectPlan) -> None:
        self.sim.note_origin(post.digest())
        self.trace("post", f"{post.username}/{post.k} {post.kind}")
        own = self.swarms.get(user_swarm(account.username).id)
        producing = own is not None and own.role == SwarmRole.PRODUCER
        for action in plan.puts():
            if producing and action.target == swarm_target(account.username):
                continue
            packet = make_put_packet(
                action.target, action.value, self.sim.now, action.seq, account.username, account.keypair, self.id.id
            )
            self.route(packet)
        for notice in plan.mentions:
            payload = canonical_encode(MentionPayload(notice.mentioned, post))
            packet = DhtPacket(
                dst=notice.route_to,
                src=self.id.id,
                signed_payload=sign(account.keypair.private, payload, account.username),
                signer=account.username,
            )
            self.route(packet, mention=True)
        if producing:
            self._gateway_ingest(own.swarm, post)

    def join_own_swarm(self, username: str) -> SwarmMembership:
        return self.follow_swarm(user_swarm(username), SwarmRole.PRODUCER)

    def follow(self, follower: str, target: str) -> SwarmMembership:
        self.accounts[follower].following.add(target)
        return self.follow_swarm(user_swarm(target))

    # ---- mentions and listeners ----------------------------------------

    def _deliver_mention(self, packet: DhtPacket) -> None:
        try:
            payload = canonical_decode(packet.signed_payload.payload, MentionPayload)
        except EncodingError:
            self.metrics["mention-malformed"] += 1
            return
        post = payload.post
        if user_id(payload.mentioned) != packet.dst or post.username != packet.signer:
            self.metrics["mention-inconsistent"] += 1
            return
        if not verify_post(post, self.chain.directory, self.cfg):
            self.metrics["mention-bad-signature"] += 1
            return
        self.trace("mention", f"{payload.mentioned} <- {post.username}/{post.k}")
        registration = self.listening.get(payload.mentioned)
        if registration is not None and registration.challenge_passed and registration.forward_to != self.id:
            self.send(registration.forward_to.endpoint, ListenerForward(payload.mentioned, post))
        if payload.mentioned in self.accounts:
            self._receive_mention(payload.mentioned, post)

    def _on_listener_forward(self, src: Endpoint, msg: ListenerForward) -> None:
        if msg.username in self.accounts and verify_post(msg.post, self.chain.directory, self.cfg):
            self._receive_mention(msg.username, msg.post)

    def _receive_mention(self, username: str, post: UserPost) -> None:
        account = self.accounts[username]
        if post.digest() not in account.mentions:
            account.mentions[post.digest()] = post
            self.metrics["mention-received"] += 1

    def listen(self, username: str) -> list[ListenerRegistration]:
        registrations = register_listener(self, self._account(username))
        self.listener_registrations[username] = registrations
        passed = sum(r.challenge_passed for r in registrations)
        self.trace("listen", f"{username} {passed}/{len(registrations)}")
        return registrations

    def request_challenge(self, contact: NodeId, username: str) -> bytes | None:
        if contact.id == self.id.id:
            return self._issue_challenge(username, self.id)
        response = self.rpc(contact.endpoint, ListenRequest(username, self.id))
        return response.nonce if isinstance(response, Challenge) else None

    def submit_challenge(self, contact: NodeId, username: str, nonce: bytes, signature: bytes) -> bool:
        if contact.id == self.id.id:
            return self._check_challenge(username, nonce, signature, self.id)
        response = self.rpc(contact.endpoint, ChallengeResponse(username, nonce, signature, self.id))
        return isinstance(response, ListenResult) and response.accepted

    def _issue_challenge(self, username: str, requester: NodeId) -> bytes | None:
        if not self.table.is_responsible(user_id(username)):
            return None
        nonce = self.sim.rng.randbytes(16)
        self._challenges[(username, requester.id)] = nonce
        return nonce

    def _check_challenge(self, username: str, nonce: bytes, signature: bytes, requester: NodeId) -> bool:
        expected = self._challenges.pop((username, requester.id), None)
        passed = expected == nonce and microblog.check_challenge(
            self.chain.directory, username, nonce, requester, signature
        )
        if passed:
            self.listening[username] = ListenerRegistration(username, self.id, requester, True)
            self.metrics["listen-accepted"] += 1
        else:
            self.metrics["listen-refused"] += 1
        return passed

    def _on_listen_request(self, src: Endpoint, msg: ListenRequest) -> Challenge | None:
        if msg.sender.endpoint != src:
            return None
        nonce = self._issue_challenge(msg.username, msg.sender)
        return Challenge(nonce) if nonce is not None else None

    def _on_challenge_response(self, src: Endpoint, msg: ChallengeResponse) -> ListenResult:
        if msg.sender.endpoint != src:
            return ListenResult(False)
        return ListenResult(self._check_challenge(msg.username, msg.nonce, msg.signature, msg.sender))

    # ---- retrieval -----------------------------------------------------

    def find_post(self, username: str, k: int) -> UserPost | None:
        """Swarm copy if we hold one that still verifies, else an authenticated DHT fetch."""
        membership = self.swarms.get(user_swarm(username).id)
        piece = membership.pieces.get(k) if membership is not None else None
        if piece is not None and verify_post(piece, self.chain.directory, self.cfg):
            return piece
        return self.fetch_post(username, k)

    def fetch_post(self, username: str, k: int) -> UserPost | None:
        return microblog.fetch_post(self, username, k, self.chain.directory, self.cfg)

    def fetch_replies(self, username: str, k: int) -> list[UserPost]:
        return microblog.fetch_replies(self, username, k, self.chain.directory, self.cfg)

    def fetch_hashtag(self, tag: str, join: bool = False) -> list[UserPost]:
        posts = microblog.fetch_hashtag(self, tag, self.chain.directory, self.cfg)
        if join:
            self.follow_swarm(hashtag_swarm(tag))
        return posts

    def fetch_word(self, word: str) -> list[UserPost]:
        return microblog.fetch_word(self, word, self.chain.directory, self.cfg)

    def mentions_of(self, username: str) -> list[UserPost]:
        received = dict(self.accounts[username].mentions) if username in self.accounts else {}
        for post in microblog.fetch_mentions(self, username, self.chain.directory, self.cfg):
            received.setdefault(post.digest(), post)
        return sorted(received.values(), key=lambda p: (p.username, p.k))

    # ---- registry chain ------------------------------------------------

    def _flood(self, message, source: Endpoint | None) -> None:
        for contact in self.table.contacts():
            if contact.endpoint != source:
                self.send(contact.endpoint, message)

    def submit_registration(self, reg: UserReg, source: Endpoint | None = None) -> bool:
        digest = reg.digest()
        if digest in self._seen_regs:
            return False
        self._seen_regs.add(digest)
        verdict = self.chain.check_userreg(reg)
        if not verdict:
            self.metrics[f"reg-rejected:{verdict.reason}"] += 1
            return False
        self.mempool[digest] = reg
        self.trace("reg", reg.username)
        self._flood(reg, source)
        return True

    def _on_userreg(self, src: Endpoint, reg: UserReg) -> None:
        self.submit_registration(reg, src)

    def _promoted(self) -> PromotedMessage:
        if self.promotion is not None:
            return self.promotion
        operator = self._operator()
        return PromotedMessage(sponsor=operator[0] if operator else "", text="", language_tag="en")

    def mine(self, count: int = 1) -> list[Block]:
        mined = []
        for _ in range(count):
            block = mine_block(
                self.chain,
                list(self.mempool.values()),
                self._promoted(),
                rng_seed=self.sim.rng.getrandbits(32),
                timestamp=self.sim.now,
            )
            self.metrics["blocks-mined"] += 1
            self._accept_block(block, None)
            mined.append(block)
        return mined

    def _accept_block(self, block: Block, source: Endpoint | None) -> ChainUpdate:
        update = self.chain.apply_block(block)
        reason = update.verdict.reason
        if reason is BlockReject.KNOWN:
            return update
        if reason is BlockReject.ORPHAN:
            self.metrics["block-orphan"] += 1
            if source is not None:
                self.send(source, GetBlock(update.missing_parent))
            return update
        if reason is not None:
            self.metrics[f"block-rejected:{reason}"] += 1
            logger.info("Block rejected", extra={"node": self.id.short(), "height": block.height, "reason": str(reason)})
            return update
        self.metrics["blocks-accepted"] += 1
        self.trace("block", f"{block.height} {block.block_hash.hex()[:8]}")
        if update.tip_changed:
            self._reconcile(update)
        self._flood(block, source)
        return update

    def _reconcile(self, update: ChainUpdate) -> None:
        if update.reorg_depth:
            self.metrics["reorgs"] += 1
            self.trace("reorg", f"depth={update.reorg_depth} height={self.chain.height}")
        for reg in update.returned_registrations:
            self.mempool.setdefault(reg.digest(), reg)
        for digest, reg in list(self.mempool.items()):
            if not self.chain.check_userreg(reg):
                del self.mempool[digest]
        for username, account in self.accounts.items():
            account.signing_keypair(self.chain.directory.get(username))

    def _on_block(self, src: Endpoint, block: Block) -> None:
        self._accept_block(block, src)

    def _on_get_block(self, src: Endpoint, msg: GetBlock) -> None:
        block = self.chain.blocks.get(msg.block_hash)
        if block is not None:
            self.send(src, block)

    def set_automine(self, enabled: bool) -> None:
        self._automine_generation += 1
        self.automine = enabled
        if enabled:
            self._schedule_mining(self._automine_generation)

    def _schedule_mining(self, generation: int) -> None:
        difficulty = self.chain.required_difficulty(self.chain.tip_block)
        # expected hashes 2^d at `hashrate` hashes per tick
        delay = max(1, math.ceil(self.sim.rng.expovariate(self.hashrate / (1 << difficulty))))

        def fire() -> None:
            if generation != self._automine_generation:
                return
            if self.sim.is_alive(self.endpoint):
                self.mine(1)
            self._schedule_mining(generation)

        self.sim.schedule(delay, fire, "automine")

    def on_heal(self) -> None:
        """Connectivity came back: re-announce the tip, refresh stored values, resync swarms."""
        if self.chain.height > 0:
            self._flood(self.chain.tip_block, None)
        self.refresh_storage()
        self.announce_bitlists()

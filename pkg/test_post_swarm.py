import random

import pytest

from app.core.crypto import hash_value
from app.services.chain_registry import mine_block
from app.services.dht_overlay import Endpoint
from app.services.microblog import PostBody, PostKind, UserAccount, create_dm, create_post, sign_post
from app.services.post_swarm import (
    HaveMessage,
    HaveReject,
    SwarmKind,
    SwarmMembership,
    SwarmRole,
    accept_have,
    accept_piece,
    dial_candidates,
    flood_have,
    gap_pieces,
    gateway_ingest,
    hashtag_swarm,
    have_for,
    missing_pieces,
    serve_request,
    swarm_for_tracker,
    tracker_peers,
    user_swarm,
    validate_have,
)
from conftest import NO_PROMOTION


def _extend(chain, count):
    for _ in range(count):
        block = mine_block(chain, [], NO_PROMOTION, rng_seed=chain.height, timestamp=chain.height + 1)
        assert chain.apply_block(block).verdict


def _post(keys, username, k, text="hello swarm", kind=PostKind.POST):
    return sign_post(PostBody(username=username, k=k, kind=kind, msg=text), keys[username])


def _endpoint(i):
    return Endpoint.parse(f"10.3.{i // 250}.{i % 250 + 1}", 5000)


@pytest.fixture
def registry(chain_with):
    return chain_with("alice", "bob")


def test_swarm_ids():
    assert user_swarm("alice").tracker_subject == "alice"
    tag = hashtag_swarm("P2P")
    assert tag.subject == "p2p" and tag.kind == SwarmKind.HASHTAG
    assert tag.tracker_subject == "#p2p"
    assert swarm_for_tracker("#p2p") == tag
    assert swarm_for_tracker("alice") == user_swarm("alice")
    assert user_swarm("p2p").id != tag.id


@pytest.mark.parametrize("delta", [0, 1, 10, 100])
def test_have_rate_boundary(registry, delta):
    chain, keys = registry
    _extend(chain, delta)
    swarm = user_swarm("alice")
    last_allowed = 2 * delta + 19
    assert validate_have(have_for(swarm, _post(keys, "alice", last_allowed)), swarm, chain)
    over = validate_have(have_for(swarm, _post(keys, "alice", last_allowed + 1)), swarm, chain)
    assert over.reason is HaveReject.RATE_EXCEEDED


def test_user_have_rules(registry, keypair):
    chain, keys = registry
    swarm = user_swarm("alice")
    post = _post(keys, "alice", 1)
    assert validate_have(have_for(swarm, post), swarm, chain)
    assert validate_have(have_for(swarm, _post(keys, "bob", 1)), swarm, chain).reason is HaveReject.INCONSISTENT
    skewed = HaveMessage(swarm.id, 2, post)
    assert validate_have(skewed, swarm, chain).reason is HaveReject.INCONSISTENT

    stranger = sign_post(PostBody("carol", 1, PostKind.POST, "hi"), keypair("carol"))
    assert validate_have(have_for(user_swarm("carol"), stranger), user_swarm("carol"), chain).reason is HaveReject.UNREGISTERED

    forged = sign_post(post.body, keys["bob"])
    assert validate_have(have_for(swarm, forged), swarm, chain).reason is HaveReject.BAD_SIGNATURE


def test_hashtag_have_rules(registry):
    chain, keys = registry
    swarm = hashtag_swarm("p2p")
    tagged = _post(keys, "alice", 3, "gossip over #P2P")
    have = have_for(swarm, tagged)
    assert have.new_k == 0
    assert validate_have(have, swarm, chain)
    numbered = HaveMessage(swarm.id, 3, tagged)
    assert validate_have(numbered, swarm, chain).reason is HaveReject.INCONSISTENT
    untagged = _post(keys, "alice", 4, "no tags here")
    assert validate_have(have_for(swarm, untagged), swarm, chain).reason is HaveReject.INCONSISTENT


def test_direct_messages_stay_out_of_hashtag_swarms(registry):
    chain, keys = registry
    alice = UserAccount("alice", keys["alice"], followers={"bob"})
    dm, _ = create_dm(alice, "bob", "#p2p secret", chain, random.Random(1))
    swarm = hashtag_swarm("p2p")
    assert validate_have(have_for(swarm, dm), swarm, chain).reason is HaveReject.INCONSISTENT


def test_hashtag_stream_keeps_each_post_once(registry):
    chain, keys = registry
    membership = SwarmMembership(hashtag_swarm("p2p"), SwarmRole.FOLLOWER)
    first = _post(keys, "bob", 1, "#p2p one")
    second = _post(keys, "alice", 1, "#p2p two")
    for post in (first, second, first):
        assert accept_have(membership, have_for(membership.swarm, post), chain)
    assert membership.posts() == [second, first]
    assert membership.k_max == 0


def test_conflicting_piece(registry):
    chain, keys = registry
    membership = SwarmMembership(user_swarm("alice"), SwarmRole.FOLLOWER)
    original = _post(keys, "alice", 1, "first")
    assert accept_have(membership, have_for(membership.swarm, original), chain)
    assert accept_have(membership, have_for(membership.swarm, original), chain)
    rival = _post(keys, "alice", 1, "rewritten")
    assert accept_have(membership, have_for(membership.swarm, rival), chain).reason is HaveReject.CONFLICT
    assert membership.pieces[1] == original


def test_bitlist_tracks_pieces(registry):
    chain, keys = registry
    membership = SwarmMembership(user_swarm("alice"), SwarmRole.FOLLOWER)
    for k in (1, 3, 9):
        membership.store_piece(_post(keys, "alice", k))
    assert membership.k_max == 9
    assert membership.bitlist() == bytes([0b10100000, 0b10000000])
    assert [membership.has(k) for k in range(1, 11)] == [k in (1, 3, 9) for k in range(1, 11)]
    assert [p.k for p in serve_request(membership, [9, 2, 1])] == [9, 1]


def test_missing_pieces_window(fast_settings):
    window = fast_settings.RECENT_WINDOW
    everything = b"\xff" * 13
    follower = SwarmMembership(user_swarm("alice"), SwarmRole.FOLLOWER)
    assert missing_pieces(follower, 100, everything, fast_settings) == list(range(100 - window + 1, 101))
    seeder = SwarmMembership(user_swarm("alice"), SwarmRole.SEEDER)
    assert missing_pieces(seeder, 100, everything, fast_settings) == list(range(1, 101))
    sparse = bytes([0b01000000])
    assert missing_pieces(SwarmMembership(user_swarm("alice"), SwarmRole.FOLLOWER), 2, sparse) == [2]


def test_gap_after_have(registry, fast_settings):
    chain, keys = registry
    membership = SwarmMembership(user_swarm("alice"), SwarmRole.FOLLOWER)
    membership.store_piece(_post(keys, "alice", 2))
    assert gap_pieces(membership, 5, fast_settings) == [1, 3, 4]


def test_flood_forwards_once(registry):
    chain, keys = registry
    membership = SwarmMembership(user_swarm("alice"), SwarmRole.FOLLOWER, peers=[_endpoint(1), _endpoint(2)])
    have = have_for(membership.swarm, _post(keys, "alice", 4))
    assert flood_have(membership, have, _endpoint(1)) == [_endpoint(2)]
    assert membership.k_max == 4
    assert flood_have(membership, have, _endpoint(2)) == []


def test_gateway_ingest_dedup(registry):
    chain, keys = registry
    membership = SwarmMembership(user_swarm("alice"), SwarmRole.GATEWAY, peers=[_endpoint(1)])
    post = _post(keys, "alice", 1)
    verdict, have, targets = gateway_ingest(membership, post, chain)
    assert verdict and targets == [_endpoint(1)] and have.new_k == 1
    assert gateway_ingest(membership, post, chain)[2] == []
    forged = sign_post(_post(keys, "alice", 2).body, keys["bob"])
    assert gateway_ingest(membership, forged, chain)[0].reason is HaveReject.BAD_SIGNATURE


def test_bad_pieces_penalise_the_server(registry):
    chain, keys = registry
    membership = SwarmMembership(user_swarm("alice"), SwarmRole.FOLLOWER)
    server = _endpoint(7)
    assert accept_piece(membership, _post(keys, "alice", 1), chain, server)
    assert not accept_piece(membership, sign_post(_post(keys, "alice", 2).body, keys["bob"]), chain, server)
    assert not accept_piece(membership, _post(keys, "bob", 3), chain, server)
    assert membership.penalties[server] == 2


def test_dial_candidates(fast_settings):
    me = _endpoint(0)
    membership = SwarmMembership(user_swarm("alice"), SwarmRole.FOLLOWER, peers=[_endpoint(1)])
    offered = [me, _endpoint(1), _endpoint(2), _endpoint(2)] + [_endpoint(i) for i in range(3, 30)]
    picked = dial_candidates(membership, offered, me, fast_settings)
    assert picked[0] == _endpoint(2)
    assert len(picked) == fast_settings.FANOUT
    assert len(set(picked)) == len(picked) and me not in picked and _endpoint(1) not in picked


def test_tracker_peers_are_live_members():
    membership = SwarmMembership(user_swarm("alice"), SwarmRole.GATEWAY, peers=[_endpoint(1), _endpoint(2)])
    assert tracker_peers(membership, lambda ep: ep != _endpoint(1)) == [_endpoint(2)]
    assert tracker_peers(None, lambda ep: True) == []


def _random_swarm(rng, size, cfg):
    """Each member dials FANOUT // 2 random others; acceptors refuse beyond FANOUT."""
    endpoints = [_endpoint(i) for i in range(size)]
    members = [SwarmMembership(user_swarm("alice"), SwarmRole.FOLLOWER) for _ in range(size)]
    outbound = cfg.FANOUT // 2
    for i, member in enumerate(members):
        dialed = 0
        for j in rng.sample(range(size), size):
            if dialed >= outbound or len(member.peers) >= cfg.FANOUT:
                break
            if j == i or endpoints[j] in member.peers:
                continue
            if not members[j].add_peer(endpoints[i], cfg.FANOUT):
                continue
            member.add_peer(endpoints[j], cfg.FANOUT)
            dialed += 1
    return endpoints, members


@pytest.mark.parametrize("seed", range(20))
def test_flood_reaches_whole_swarm(registry, fast_settings, seed):
    chain, keys = registry
    size, fanout = 32, fast_settings.FANOUT
    endpoints, members = _random_swarm(random.Random(seed), size, fast_settings)
    index = {ep: i for i, ep in enumerate(endpoints)}
    assert all(len(m.peers) <= fanout for m in members)
    assert not members[0].add_peer(_endpoint(999), len(members[0].peers))

    post, _ = create_post(UserAccount("alice", keys["alice"]), "hello swarm", chain)
    have = have_for(members[0].swarm, post)
    assert accept_have(members[0], have, chain)
    reached_at = {0: 0}
    pending = [(peer, endpoints[0]) for peer in flood_have(members[0], have, None)]
    messages, rounds = 0, 0
    while pending:
        rounds += 1
        forwarded = []
        for dst, src in pending:
            messages += 1
            member = members[index[dst]]
            if hash_value(have) in member.seen:
                continue
            assert accept_have(member, have, chain)
            reached_at.setdefault(index[dst], rounds)
            forwarded.extend((peer, dst) for peer in flood_have(member, have, src))
        pending = forwarded

    assert len(reached_at) == size
    assert max(reached_at.values()) <= 5
    assert messages <= size * fanout
    assert all(m.has(post.k) for m in members)

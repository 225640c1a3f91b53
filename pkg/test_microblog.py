import random
from collections import defaultdict

import pytest

from app.core.crypto import hash_value
from app.services.chain_registry import mine_block
from app.services.dht_overlay import GetResult, node_id, storage_key
from app.services.microblog import (
    NotFollowerError,
    PostBody,
    PostError,
    PostKind,
    RateLimitError,
    ReplyRef,
    UserAccount,
    answer_challenge,
    check_challenge,
    create_dm,
    create_post,
    create_rt,
    extract_entities,
    fetch_hashtag,
    fetch_mentions,
    fetch_post,
    fetch_replies,
    fetch_word,
    hashtag_target,
    mention_target,
    post_target,
    register_listener,
    replace_key,
    replies_target,
    sign_post,
    swarm_target,
    try_open_dm,
    verified_posts,
    verify_post,
    well_formed,
    word_target,
)
from conftest import NO_PROMOTION


class FakeDht:
    """Keeps every PUT value under its storage key and answers gets from one responder."""

    def __init__(self):
        self.values = defaultdict(list)
        self.responder = node_id("10.6.0.1", 1)

    def apply(self, plan):
        for action in plan.puts():
            self.values[storage_key(action.target)].append(action.value)

    def inject(self, target, raw):
        self.values[storage_key(target)].append(raw)

    def dht_get(self, target):
        key = storage_key(target)
        if not self.values.get(key):
            return []
        return [GetResult(key, target.restype, tuple(self.values[key]), (), self.responder)]


@pytest.fixture
def town(chain_with):
    chain, keys = chain_with("alice", "bob", "carol")
    accounts = {name: UserAccount(name, kp) for name, kp in keys.items()}
    return chain, accounts


def _mine(chain, regs=()):
    block = mine_block(chain, list(regs), NO_PROMOTION, rng_seed=chain.height, timestamp=chain.height + 1)
    assert chain.apply_block(block).verdict


def test_entity_extraction(fast_settings):
    entities = extract_entities("Hello @bob and @Carol #P2P #p2p networks are about fun", fast_settings)
    assert entities.mentions == ("bob",)
    assert entities.hashtags == ("p2p",)
    assert entities.words == ("hello", "networks")


def test_word_index_is_capped(fast_settings):
    text = " ".join(f"word{i:02d}" for i in range(30))
    assert len(extract_entities(text, fast_settings).words) == fast_settings.WORDS_PER_POST
    assert extract_entities("tiny bits", fast_settings, stopwords=frozenset({"tiny"})).words == ("bits",)


def test_post_plan(town):
    chain, accounts = town
    alice = accounts["alice"]
    post, plan = create_post(alice, "ping @bob @dave about #dht routing", chain)
    assert (post.k, post.kind) == (1, PostKind.POST)
    assert verify_post(post, chain.directory)
    assert [a.target for a in plan.base] == [post_target("alice", 1), swarm_target("alice")]
    assert plan.reply is None
    assert [n.mentioned for n in plan.mentions] == ["bob"]
    assert plan.mentions[0].put.target == mention_target("bob")
    assert [h.tag for h in plan.hashtags] == ["dht"]
    assert [a.target for a in plan.words] == [word_target("ping"), word_target("routing")]
    assert plan.action_count() == len(plan.puts()) == 6
    assert all(a.seq == 1 for a in plan.puts())


def test_replies_and_retweets(town):
    chain, accounts = town
    original, _ = create_post(accounts["alice"], "first", chain)
    reply, plan = create_post(accounts["bob"], "agreed", chain, reply_ref=ReplyRef("alice", original.k))
    assert reply.kind == PostKind.REPLY
    assert plan.reply.target == replies_target("alice", 1)
    rt, _ = create_rt(accounts["carol"], ReplyRef("alice", 1), chain)
    assert rt.kind == PostKind.RT and rt.body.msg == ""
    assert not well_formed(PostBody("carol", 2, PostKind.RT, "", reply_ref=None))


def test_post_errors(town, keypair):
    chain, accounts = town
    alice = accounts["alice"]
    with pytest.raises(PostError):
        create_post(alice, "x" * (chain.cfg.POST_MAX_CHARS + 1), chain)
    with pytest.raises(PostError):
        create_post(alice, "sealed?", chain, kind=PostKind.DM)
    with pytest.raises(PostError):
        create_post(UserAccount("dave", keypair("dave")), "hi", chain)
    assert alice.last_k == 0


def test_rate_limit(town):
    chain, accounts = town
    alice = accounts["alice"]
    alice.last_k = chain.cfg.RATE_BASE - 2
    create_post(alice, "last one", chain)
    with pytest.raises(RateLimitError):
        create_post(alice, "one too many", chain)
    _mine(chain)
    post, _ = create_post(alice, "a new block, more room", chain)
    assert post.k == chain.cfg.RATE_BASE


def test_direct_message_opens_for_recipient_only(chain_with):
    names = ["alice"] + [f"user{i}" for i in range(9)]
    chain, keys = chain_with(*names)
    accounts = {name: UserAccount(name, keys[name]) for name in names}
    sender = accounts["alice"]
    sender.followers = set(names[1:])
    rng = random.Random(5)
    for recipient in names[1:]:
        dm, plan = create_dm(sender, recipient, f"for {recipient}", chain, rng)
        assert dm.kind == PostKind.DM and dm.body.msg == ""
        assert not plan.mentions and not plan.hashtags and not plan.words
        opened = {name: try_open_dm(account, dm) for name, account in accounts.items()}
        assert opened.pop(recipient) == f"for {recipient}"
        assert set(opened.values()) == {None}


def test_direct_message_rules(town, keypair):
    chain, accounts = town
    alice = accounts["alice"]
    alice.followers = {"bob", "dave"}
    rng = random.Random(1)
    with pytest.raises(NotFollowerError):
        create_dm(alice, "carol", "hi", chain, rng)
    with pytest.raises(PostError):
        create_dm(alice, "dave", "hi", chain, rng)
    with pytest.raises(PostError):
        create_dm(alice, "bob", "", chain, rng)
    post, _ = create_post(alice, "public", chain)
    assert try_open_dm(accounts["bob"], post) is None


def test_key_replacement(town, keypair):
    chain, accounts = town
    alice, bob = accounts["alice"], accounts["bob"]
    old_post, _ = create_post(alice, "signed with the old key", chain)
    bob.followers = {"alice"}
    old_dm, _ = create_dm(bob, "alice", "sealed to the old key", chain, random.Random(2))

    new_key = keypair("alice", 1)
    reg = replace_key(alice, new_key, chain)
    assert alice.pending_keypair == new_key
    _mine(chain, [reg])
    assert chain.directory["alice"].pubkey == new_key.public

    post, _ = create_post(alice, "signed with the new key", chain)
    assert alice.keypair == new_key and alice.pending_keypair is None
    assert verify_post(post, chain.directory)
    assert not verify_post(old_post, chain.directory)
    assert try_open_dm(alice, old_dm) == "sealed to the old key"

    me = node_id("10.6.0.2", 1)
    nonce = b"n" * 16
    stale = answer_challenge(keypair("alice"), "alice", nonce, me)
    assert not check_challenge(chain.directory, "alice", nonce, me, stale)
    fresh = answer_challenge(new_key, "alice", nonce, me)
    assert check_challenge(chain.directory, "alice", nonce, me, fresh)
    assert not check_challenge(chain.directory, "alice", nonce, node_id("10.6.0.3", 1), fresh)


def test_verified_posts_drop_forgeries(town):
    chain, accounts = town
    real, _ = create_post(accounts["alice"], "genuine", chain)
    forged = sign_post(PostBody("alice", 2, PostKind.POST, "forged"), accounts["bob"].keypair)
    other, _ = create_post(accounts["bob"], "also genuine", chain)
    values = [other.encode(), forged.encode(), b"garbage", real.encode(), real.encode()]
    assert verified_posts(values, chain.directory) == [real, other]


def test_fetch_filters_by_index(town):
    chain, accounts = town
    dht = FakeDht()
    alice, bob, carol = accounts["alice"], accounts["bob"], accounts["carol"]
    first, plan = create_post(alice, "hello #p2p world @bob", chain)
    dht.apply(plan)
    reply, plan = create_post(bob, "replying to alice", chain, reply_ref=ReplyRef("alice", 1))
    dht.apply(plan)
    stray, _ = create_post(carol, "no tag, no mention", chain)
    for target in (post_target("alice", 1), replies_target("alice", 1), hashtag_target("p2p"), mention_target("bob")):
        dht.inject(target, stray.encode())

    directory = chain.directory
    assert fetch_post(dht, "alice", 1, directory) == first
    assert fetch_post(dht, "alice", 2, directory) is None
    assert fetch_replies(dht, "alice", 1, directory) == [reply]
    assert fetch_hashtag(dht, "P2P", directory) == [first]
    assert fetch_mentions(dht, "bob", directory) == [first]
    assert fetch_word(dht, "hello", directory) == [first]
    assert fetch_word(dht, "hel", directory) == []


class FakeListenerClient:
    """Three responsible nodes; the second refuses to issue challenges."""

    def __init__(self, directory):
        self.id = node_id("10.6.1.1", 1)
        self.directory = directory
        self.contacts = [node_id(f"10.6.2.{i}", 1) for i in range(1, 4)]
        self.issued = {}

    def find_nodes(self, key):
        return list(self.contacts)

    def request_challenge(self, contact, username):
        if contact == self.contacts[1]:
            return None
        nonce = hash_value([contact.endpoint.ip, username]).value[:16]
        self.issued[contact] = nonce
        return nonce

    def submit_challenge(self, contact, username, nonce, signature):
        return self.issued.get(contact) == nonce and check_challenge(self.directory, username, nonce, self.id, signature)


def test_listener_registration(town, keypair):
    chain, accounts = town
    client = FakeListenerClient(chain.directory)
    registrations = register_listener(client, accounts["alice"])
    assert [r.listener for r in registrations] == [client.contacts[0], client.contacts[2]]
    assert all(r.challenge_passed and r.forward_to == client.id for r in registrations)

    impostor = UserAccount("alice", keypair("mallory"))
    assert not any(r.challenge_passed for r in register_listener(client, impostor))


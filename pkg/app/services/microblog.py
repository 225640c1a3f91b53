"""
Microblog semantics on top of the registry, the DHT and the swarms.

A post is signed once and then travels two ways: a single-valued PUT to
[user, "post<k>", "single"] for explicit retrieval, and a PUT to
[user, "swarm", "single"] whose neighbours act as swarm gateways. Mentions,
replies, hashtags and indexed words add further PUTs; `create_post` returns
all of them as a SideEffectPlan so the node can execute them.
"""
from __future__ import annotations

import functools
import logging
import random
import re
from dataclasses import dataclass, field
from app.core.compat import StrEnum
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import yaml

from app.core.config import Settings, settings
from app.core.crypto import (
    CryptoError,
    Digest,
    KeyPair,
    SealedBox,
    SignedContent,
    hash_value,
    open_with,
    seal_for,
    sign,
    verify,
)
from app.core.encoding import EncodingError, canonical_decode, canonical_encode
from app.services.chain_registry import (
    ChainState,
    DirectoryEntry,
    UserReg,
    make_userreg,
    post_rate_bound,
    user_id,
    username_valid,
)
from app.services.dht_overlay import GetResult, NodeId, Restype, StorageTarget

logger = logging.getLogger(__name__)

_MENTION_RE = re.compile(r"@([A-Za-z0-9_]+)")
_HASHTAG_RE = re.compile(r"#(\w+)")
_WORD_RE = re.compile(r"[a-z0-9]+")


class PostError(Exception):
    """Post cannot be created."""


class RateLimitError(PostError):
    pass


class NotFollowerError(PostError):
    pass


class PostKind(StrEnum):
    POST = "post"
    REPLY = "reply"
    RT = "rt"
    DM = "dm"


# ---- storage targets --------------------------------------------------------


def post_target(username: str, k: int) -> StorageTarget:
    return StorageTarget(username, f"post{k}", Restype.SINGLE)


def swarm_target(username: str) -> StorageTarget:
    return StorageTarget(username, "swarm", Restype.SINGLE)


def tracker_target(subject: str) -> StorageTarget:
    return StorageTarget(subject, "tracker", Restype.MULTI)


def replies_target(username: str, k: int) -> StorageTarget:
    return StorageTarget(username, f"replies{k}", Restype.MULTI)


def mention_target(username: str) -> StorageTarget:
    return StorageTarget(username, "mention", Restype.MULTI)


def hashtag_target(tag: str) -> StorageTarget:
    return StorageTarget(tag, "hashtag", Restype.MULTI)


def word_target(word: str) -> StorageTarget:
    return StorageTarget(word, "word", Restype.MULTI)


# ---- posts ------------------------------------------------------------------


@dataclass(frozen=True)
class ReplyRef:
    username: str
    k: int


@dataclass(frozen=True)
class PostBody:
    username: str
    k: int
    kind: PostKind
    msg: str
    sealed: SealedBox | None = None
    reply_ref: ReplyRef | None = None


@dataclass(frozen=True)
class UserPost:
    body: PostBody
    signature: bytes

    @property
    def username(self) -> str:
        return self.body.username

    @property
    def k(self) -> int:
        return self.body.k

    @property
    def kind(self) -> PostKind:
        return self.body.kind

    def encode(self) -> bytes:
        return canonical_encode(self)

    def digest(self) -> Digest:
        return hash_value(self)


def well_formed(body: PostBody, cfg: Settings = settings) -> bool:
    if body.k < 1 or not username_valid(body.username, cfg.USERNAME_MAX_LEN):
        return False
    if body.kind == PostKind.DM:
        return body.sealed is not None and body.msg == "" and body.reply_ref is None
    if body.sealed is not None or len(body.msg) > cfg.POST_MAX_CHARS:
        return False
    return (body.reply_ref is not None) == (body.kind in (PostKind.REPLY, PostKind.RT))


def sign_post(body: PostBody, keypair: KeyPair) -> UserPost:
    return UserPost(body=body, signature=sign(keypair.private, canonical_encode(body)).signature)


def verify_post(post: UserPost, directory: Mapping[str, DirectoryEntry], cfg: Settings = settings) -> bool:
    entry = directory.get(post.username)
    if entry is None or not well_formed(post.body, cfg):
        return False
    return verify(entry.pubkey, SignedContent(post.signature, canonical_encode(post.body), post.username))


def decode_post(raw: bytes) -> UserPost | None:
    try:
        return canonical_decode(raw, UserPost)
    except EncodingError:
        return None


def verified_posts(
    values: Iterable[bytes],
    directory: Mapping[str, DirectoryEntry],
    cfg: Settings = settings,
) -> list[UserPost]:
    """Decode and signature-check stored values; forgeries and duplicates are dropped."""
    seen: set[Digest] = set()
    posts = []
    for raw in values:
        post = decode_post(raw)
        if post is None or not verify_post(post, directory, cfg):
            logger.debug("Dropping unverifiable stored post")
            continue
        digest = post.digest()
        if digest not in seen:
            seen.add(digest)
            posts.append(post)
    return sorted(posts, key=lambda p: (p.username, p.k))


# ---- entities ---------------------------------------------------------------


@dataclass(frozen=True)
class EntitySet:
    mentions: tuple[str, ...] = ()
    hashtags: tuple[str, ...] = ()
    words: tuple[str, ...] = ()


@functools.lru_cache(maxsize=4)
def load_stopwords(path: Path) -> frozenset[str]:
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    return frozenset(str(word).lower() for word in data.get("stopwords", []))


def extract_entities(
    text: str,
    cfg: Settings = settings,
    stopwords: frozenset[str] | None = None,
) -> EntitySet:
    stop = load_stopwords(cfg.STOPWORDS_PATH) if stopwords is None else stopwords
    mentions = dict.fromkeys(
        name for name in _MENTION_RE.findall(text) if username_valid(name, cfg.USERNAME_MAX_LEN)
    )
    hashtags = dict.fromkeys(tag.lower() for tag in _HASHTAG_RE.findall(text))
    words: dict[str, None] = {}
    for token in text.split():
        if token.startswith(("@", "#")):
            continue
        for word in _WORD_RE.findall(token.lower()):
            if len(word) >= cfg.MIN_WORD_LEN and word not in stop:
                words.setdefault(word)
    return EntitySet(
        mentions=tuple(mentions),
        hashtags=tuple(hashtags),
        words=tuple(words)[: cfg.WORDS_PER_POST],
    )


# ---- accounts and plans -----------------------------------------------------


@dataclass
class UserAccount:
    username: str
    keypair: KeyPair
    last_k: int = 0
    following: set[str] = field(default_factory=set)
    followers: set[str] = field(default_factory=set)
    pending_keypair: KeyPair | None = None
    retired_keypairs: list[KeyPair] = field(default_factory=list)
    mentions: dict[Digest, UserPost] = field(default_factory=dict)

    def signing_keypair(self, entry: DirectoryEntry | None) -> KeyPair:
        """Switch to a pending replacement key once the registry has adopted it."""
        pending = self.pending_keypair
        if entry is not None and pending is not None and entry.pubkey == pending.public:
            self.retired_keypairs.append(self.keypair)
            self.keypair, self.pending_keypair = pending, None
        return self.keypair


@dataclass(frozen=True)
class PutAction:
    target: StorageTarget
    value: bytes
    seq: int


@dataclass(frozen=True)
class MentionNotice:
    mentioned: str
    route_to: Digest
    put: PutAction


@dataclass(frozen=True)
class HashtagPublish:
    tag: str
    put: PutAction


@dataclass
class SideEffectPlan:
    base: list[PutAction] = field(default_factory=list)
    reply: PutAction | None = None
    mentions: list[MentionNotice] = field(default_factory=list)
    hashtags: list[HashtagPublish] = field(default_factory=list)
    words: list[PutAction] = field(default_factory=list)

    def puts(self) -> list[PutAction]:
        out = list(self.base)
        if self.reply is not None:
            out.append(self.reply)
        out.extend(n.put for n in self.mentions)
        out.extend(h.put for h in self.hashtags)
        out.extend(self.words)
        return out

    def action_count(self) -> int:
        return len(self.base) + (self.reply is not None) + len(self.mentions) + len(self.hashtags) + len(self.words)


def _next_k(account: UserAccount, chain: ChainState) -> tuple[int, KeyPair]:
    entry = chain.directory.get(account.username)
    if entry is None:
        raise PostError(f"{account.username} is not registered")
    k = account.last_k + 1
    bound = post_rate_bound(chain.height, entry.registration_height, chain.cfg)
    if k >= bound:
        raise RateLimitError(f"post {k} exceeds the allowance of {bound - 1} at height {chain.height}")
    return k, account.signing_keypair(entry)


def _plan(post: UserPost, entities: EntitySet, directory: Mapping[str, DirectoryEntry]) -> SideEffectPlan:
    value = post.encode()
    k = post.k
    plan = SideEffectPlan(base=[
        PutAction(post_target(post.username, k), value, k),
        PutAction(swarm_target(post.username), value, k),
    ])
    ref = post.body.reply_ref
    if ref is not None:
        plan.reply = PutAction(replies_target(ref.username, ref.k), value, k)
    for name in entities.mentions:
        if name not in directory:
            continue
        plan.mentions.append(MentionNotice(name, user_id(name), PutAction(mention_target(name), value, k)))
    for tag in entities.hashtags:
        plan.hashtags.append(HashtagPublish(tag, PutAction(hashtag_target(tag), value, k)))
    plan.words = [PutAction(word_target(w), value, k) for w in entities.words]
    return plan


def create_post(
    account: UserAccount,
    text: str,
    chain: ChainState,
    reply_ref: ReplyRef | None = None,
    kind: PostKind | None = None,
) -> tuple[UserPost, SideEffectPlan]:
    cfg = chain.cfg
    if len(text) > cfg.POST_MAX_CHARS:
        raise PostError(f"post is {len(text)} characters, limit is {cfg.POST_MAX_CHARS}")
    if kind is None:
        kind = PostKind.REPLY if reply_ref is not None else PostKind.POST
    if kind == PostKind.DM:
        raise PostError("direct messages are created with create_dm")
    k, keypair = _next_k(account, chain)
    body = PostBody(username=account.username, k=k, kind=kind, msg=text, reply_ref=reply_ref)
    if not well_formed(body, cfg):
        raise PostError(f"malformed {kind} post")
    post = sign_post(body, keypair)
    account.last_k = k
    return post, _plan(post, extract_entities(text, cfg), chain.directory)


def create_rt(account: UserAccount, original: ReplyRef, chain: ChainState) -> tuple[UserPost, SideEffectPlan]:
    return create_post(account, "", chain, reply_ref=original, kind=PostKind.RT)


def create_dm(
    sender: UserAccount,
    recipient: str,
    text: str,
    chain: ChainState,
    rng: random.Random,
) -> tuple[UserPost, SideEffectPlan]:
    cfg = chain.cfg
    if recipient not in sender.followers:
        raise NotFollowerError(f"{recipient} does not follow {sender.username}")
    entry = chain.directory.get(recipient)
    if entry is None:
        raise PostError(f"{recipient} is not registered")
    if not text or len(text) > cfg.POST_MAX_CHARS:
        raise PostError("direct message must be 1 to 140 characters")
    k, keypair = _next_k(sender, chain)
    sealed = seal_for(entry.pubkey, text.encode("utf-8"), rng)
    post = sign_post(PostBody(username=sender.username, k=k, kind=PostKind.DM, msg="", sealed=sealed), keypair)
    sender.last_k = k
    return post, _plan(post, EntitySet(), chain.directory)


def try_open_dm(account: UserAccount, post: UserPost) -> str | None:
    if post.kind != PostKind.DM or post.body.sealed is None:
        return None
    for keypair in [account.keypair, *account.retired_keypairs]:
        try:
            return open_with(keypair.private, post.body.sealed).decode("utf-8")
        except (CryptoError, UnicodeDecodeError):
            continue
    return None


def replace_key(account: UserAccount, new_keypair: KeyPair, chain: ChainState, start_nonce: int = 0) -> UserReg:
    """Replacement registration signed by the current key; the account switches once it is adopted."""
    reg = make_userreg(
        account.username,
        new_keypair,
        chain.cfg.USERREG_DIFFICULTY,
        previous=account.keypair,
        start_nonce=start_nonce,
    )
    account.pending_keypair = new_keypair
    return reg


# ---- retrieval --------------------------------------------------------------


class DhtClient(Protocol):
    def dht_get(self, target: StorageTarget) -> list[GetResult]: ...


def _values(results: Sequence[GetResult]) -> list[bytes]:
    return [raw for result in results for raw in result.values]


def fetch_post(
    client: DhtClient,
    username: str,
    k: int,
    directory: Mapping[str, DirectoryEntry],
    cfg: Settings = settings,
) -> UserPost | None:
    for post in verified_posts(_values(client.dht_get(post_target(username, k))), directory, cfg):
        if post.username == username and post.k == k:
            return post
    return None


def fetch_replies(
    client: DhtClient,
    username: str,
    k: int,
    directory: Mapping[str, DirectoryEntry],
    cfg: Settings = settings,
) -> list[UserPost]:
    ref = ReplyRef(username, k)
    posts = verified_posts(_values(client.dht_get(replies_target(username, k))), directory, cfg)
    return [p for p in posts if p.body.reply_ref == ref]


def fetch_hashtag(
    client: DhtClient,
    tag: str,
    directory: Mapping[str, DirectoryEntry],
    cfg: Settings = settings,
) -> list[UserPost]:
    tag = tag.lower()
    posts = verified_posts(_values(client.dht_get(hashtag_target(tag))), directory, cfg)
    return [p for p in posts if tag in extract_entities(p.body.msg, cfg).hashtags]


def fetch_word(
    client: DhtClient,
    word: str,
    directory: Mapping[str, DirectoryEntry],
    cfg: Settings = settings,
) -> list[UserPost]:
    word = word.lower()
    if len(word) < cfg.MIN_WORD_LEN:
        return []
    posts = verified_posts(_values(client.dht_get(word_target(word))), directory, cfg)
    return [p for p in posts if word in extract_entities(p.body.msg, cfg).words]


def fetch_mentions(
    client: DhtClient,
    username: str,
    directory: Mapping[str, DirectoryEntry],
    cfg: Settings = settings,
) -> list[UserPost]:
    posts = verified_posts(_values(client.dht_get(mention_target(username))), directory, cfg)
    return [p for p in posts if username in extract_entities(p.body.msg, cfg).mentions]


# ---- listeners --------------------------------------------------------------


@dataclass
class ListenerRegistration:
    target_user: str
    listener: NodeId
    forward_to: NodeId
    challenge_passed: bool = False


def challenge_payload(username: str, nonce: bytes, forward_to: NodeId) -> bytes:
    return canonical_encode(["listen", username, nonce, forward_to])


def answer_challenge(keypair: KeyPair, username: str, nonce: bytes, forward_to: NodeId) -> bytes:
    return sign(keypair.private, challenge_payload(username, nonce, forward_to), username).signature


def check_challenge(
    directory: Mapping[str, DirectoryEntry],
    username: str,
    nonce: bytes,
    forward_to: NodeId,
    signature: bytes,
) -> bool:
    entry = directory.get(username)
    if entry is None:
        return False
    payload = challenge_payload(username, nonce, forward_to)
    return verify(entry.pubkey, SignedContent(signature, payload, username))


class ListenerClient(Protocol):
    id: NodeId

    def find_nodes(self, key: Digest) -> list[NodeId]: ...

    def request_challenge(self, contact: NodeId, username: str) -> bytes | None: ...

    def submit_challenge(self, contact: NodeId, username: str, nonce: bytes, signature: bytes) -> bool: ...


def register_listener(client: ListenerClient, account: UserAccount) -> list[ListenerRegistration]:
    """Ask the R nodes nearest H(username) to forward its traffic; each must see a signed challenge first."""
    registrations = []
    for contact in client.find_nodes(user_id(account.username)):
        nonce = client.request_challenge(contact, account.username)
        if nonce is None:
            continue
        signature = answer_challenge(account.keypair, account.username, nonce, client.id)
        passed = client.submit_challenge(contact, account.username, nonce, signature)
        registrations.append(ListenerRegistration(account.username, contact, client.id, passed))
        if not passed:
            logger.info(
                "Listener refused challenge",
                extra={"username": account.username, "listener": contact.short()},
            )
    return registrations

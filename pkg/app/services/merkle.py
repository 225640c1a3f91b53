"""
Binary Merkle tree over registration encodings.

Leaves and inner nodes are hashed under distinct one-byte prefixes. An odd
node at the end of a level is promoted unchanged, so a one-leaf tree's root
is the leaf hash and its proof is empty. Proof steps say on which side the
sibling sits; the verifier needs no index or leaf count.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from app.core.crypto import Digest, hash_bytes

_LEAF = b"\x00"
_NODE = b"\x01"


class MerkleError(Exception):
    """Requested leaf is not part of the tree."""


@dataclass(frozen=True)
class MerkleStep:
    sibling: Digest
    sibling_on_left: bool


def leaf_hash(data: bytes) -> Digest:
    return hash_bytes(_LEAF + data)


def node_hash(left: Digest, right: Digest) -> Digest:
    return hash_bytes(_NODE + left.value + right.value)


def _next_level(level: Sequence[Digest]) -> list[Digest]:
    paired = [node_hash(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
    if len(level) % 2:
        paired.append(level[-1])
    return paired


def merkle_root(leaves: Sequence[Digest]) -> Digest:
    if not leaves:
        return hash_bytes(b"")
    level = list(leaves)
    while len(level) > 1:
        level = _next_level(level)
    return level[0]


def merkle_path(leaves: Sequence[Digest], index: int) -> tuple[MerkleStep, ...]:
    if not 0 <= index < len(leaves):
        raise MerkleError(f"leaf index {index} outside tree of {len(leaves)}")
    steps: list[MerkleStep] = []
    level = list(leaves)
    while len(level) > 1:
        sibling = index ^ 1
        if sibling < len(level):
            steps.append(MerkleStep(sibling=level[sibling], sibling_on_left=bool(index & 1)))
        index //= 2
        level = _next_level(level)
    return tuple(steps)


def fold_path(leaf: Digest, steps: Sequence[MerkleStep]) -> Digest:
    node = leaf
    for step in steps:
        node = node_hash(step.sibling, node) if step.sibling_on_left else node_hash(node, step.sibling)
    return node

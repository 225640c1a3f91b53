"""Shared fixtures: cheap proof-of-work settings, deterministic keys and small meshed networks."""
import pytest

from app.core.config import Settings, settings
from app.core.crypto import KeyPair, generate_keypair, hash_value
from app.services.chain_registry import ChainState, PromotedMessage, make_userreg, mine_block
from app.services.microblog import UserAccount
from app.services.node import TwisterNode
from app.services.simnet import SimConfig, Simulator

NO_PROMOTION = PromotedMessage(sponsor="", text="", language_tag="en")


def make_keypair(label: str, generation: int = 0) -> KeyPair:
    return generate_keypair(hash_value(["test-key", label, generation]).value)


@pytest.fixture
def fast_settings() -> Settings:
    return settings.model_copy(update={
        "USERREG_DIFFICULTY": 4,
        "INITIAL_BLOCK_DIFFICULTY": 6,
        "RETARGET_INTERVAL": 0,
    })


@pytest.fixture
def keypair():
    return make_keypair


@pytest.fixture
def chain_with(fast_settings):
    """ChainState whose first block registers the given usernames; returns (chain, {name: keypair})."""
    def build(*usernames: str) -> tuple[ChainState, dict[str, KeyPair]]:
        chain = ChainState(fast_settings)
        keys = {name: make_keypair(name) for name in usernames}
        regs = [make_userreg(name, keys[name], fast_settings.USERREG_DIFFICULTY) for name in usernames]
        block = mine_block(chain, regs, NO_PROMOTION, rng_seed=1, timestamp=1)
        assert chain.apply_block(block).verdict
        return chain, keys
    return build


@pytest.fixture
def network(fast_settings):
    """Simulator with `count` meshed nodes."""
    def build(count: int, seed: int = 1, **overrides) -> tuple[Simulator, list[TwisterNode]]:
        sim = Simulator(SimConfig.from_settings(seed, fast_settings, **overrides), fast_settings, node_factory=TwisterNode)
        nodes = [sim.spawn_node(f"10.9.{i // 250}.{i % 250 + 1}", 7000) for i in range(count)]
        for node in nodes:
            for other in nodes:
                if other is not node:
                    node.learn(other.id)
        return sim, nodes
    return build


@pytest.fixture
def enroll():
    """Register accounts on their host nodes and mine them into the chain everywhere."""
    def register(sim: Simulator, miner: TwisterNode, hosts: dict[str, TwisterNode]) -> dict[str, UserAccount]:
        accounts = {}
        for name, host in hosts.items():
            account = UserAccount(username=name, keypair=make_keypair(name))
            host.add_account(account)
            host.submit_registration(make_userreg(name, account.keypair, sim.cfg.USERREG_DIFFICULTY))
            accounts[name] = account
        sim.run_until(sim.now + 5)
        miner.mine(1)
        sim.run_until(sim.now + 10)
        return accounts
    return register

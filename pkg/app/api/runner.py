"""
Runs a parsed scenario on the simulator and collects a RunReport.

Directives execute in file order against one Simulator; `advance` is the only
directive that lets simulated time pass. Assertions are evaluated at the tick
they are reached, recorded, and never stop the run. Only a simulator safety
cap aborts early.
"""
from __future__ import annotations

import logging
from collections import Counter
from app.core.compat import StrEnum
from pathlib import Path
from typing import Callable

from pydantic import BaseModel, Field

from app.api.scenario import Directive, Scenario, parse_scenario
from app.core.config import Settings, settings
from app.core.crypto import CryptoError, KeyPair, generate_keypair, hash_value
from app.services.chain_registry import (
    is_confirmed,
    header_chain,
    locate_registration,
    make_userreg,
    merkle_prove,
    verify_merkle_proof,
)
from app.services.merkle import MerkleError
from app.services.microblog import PostError, PostKind, ReplyRef, UserAccount, replace_key, try_open_dm
from app.services.node import TwisterNode
from app.services.post_swarm import user_swarm
from app.services.simnet import SimConfig, SimulationHalted, Simulator, write_trace

logger = logging.getLogger(__name__)


class RunStatus(StrEnum):
    PASS = "pass"
    FAIL = "fail"
    HALTED = "halted"


EXIT_CODES = {RunStatus.PASS: 0, RunStatus.FAIL: 1, RunStatus.HALTED: 3}
PARSE_ERROR_EXIT = 2


class AssertionResult(BaseModel):
    line: int
    directive: str
    passed: bool
    tick: int
    detail: str = ""


class RunReport(BaseModel):
    scenario: str
    seed: int
    status: RunStatus
    ticks: int
    events: int
    trace_digest: str
    assertions: list[AssertionResult] = Field(default_factory=list)
    metrics: dict[str, int] = Field(default_factory=dict)
    error: str = ""

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]

    @property
    def passed(self) -> int:
        return sum(a.passed for a in self.assertions)

    def render(self) -> str:
        lines = [
            f"scenario: {self.scenario}",
            f"seed: {self.seed}",
            f"status: {self.status}",
            f"ticks: {self.ticks}",
            f"events: {self.events}",
            f"trace_digest: {self.trace_digest}",
            f"assertions: {self.passed}/{len(self.assertions)}",
        ]
        if self.error:
            lines.append(f"error: {self.error}")
        for a in self.assertions:
            verdict = "pass" if a.passed else "fail"
            lines.append(f"assert.{a.line}: {verdict} tick={a.tick} {a.directive} ({a.detail})")
        lines += [f"metric.{key}: {value}" for key, value in sorted(self.metrics.items())]
        return "\n".join(lines) + "\n"


def scenario_settings(scenario: Scenario, difficulty_bits: int | None = None, base: Settings = settings) -> Settings:
    """Settings for one run: header overrides first, then command-line flags."""
    header = scenario.header
    update = {"SIM_LATENCY_MIN": header.latency_min, "SIM_LATENCY_MAX": header.latency_max}
    bits = difficulty_bits if difficulty_bits is not None else header.difficulty
    if bits is not None:
        update["INITIAL_BLOCK_DIFFICULTY"] = bits
    if header.userreg_difficulty is not None:
        update["USERREG_DIFFICULTY"] = header.userreg_difficulty
    if header.max_ticks is not None:
        update["SIM_MAX_TICKS"] = header.max_ticks
    return base.model_copy(update=update)


class ScenarioRun:
    def __init__(self, scenario: Scenario, seed: int, cfg: Settings):
        self.scenario = scenario
        self.seed = seed
        self.cfg = cfg
        self.sim = Simulator(
            SimConfig.from_settings(seed, cfg, drop_probability=scenario.header.drop),
            cfg,
            node_factory=TwisterNode,
        )
        self.nodes: dict[str, TwisterNode] = {}
        self.accounts: dict[str, UserAccount] = {}
        self.hosts: dict[str, TwisterNode] = {}
        self.results: list[AssertionResult] = []
        self.errors: Counter[str] = Counter()
        self._key_generation: Counter[str] = Counter()

        self._actions: dict[str, Callable[[Directive], None]] = {
            "node": self._node,
            "mesh": self._mesh,
            "register": self._register,
            "mine": self._mine,
            "automine": self._automine,
            "advance": self._advance,
            "post": self._post,
            "reply": self._reply,
            "rt": self._rt,
            "dm": self._dm,
            "follow": self._follow,
            "join-own": self._join_own,
            "listen": self._listen,
            "replace-key": self._replace_key,
            "partition": self._partition,
            "heal": lambda d: self.sim.heal(),
            "kill": lambda d: self.sim.kill(self.nodes[d.args[0]].endpoint),
            "revive": lambda d: self.sim.revive(self.nodes[d.args[0]].endpoint),
            "fetch": self._fetch,
        }
        self._checks: dict[str, Callable[[Directive], tuple[bool, str]]] = {
            "expect-unique": self._expect_unique,
            "expect-registered": self._expect_registered,
            "expect-confirmed": self._expect_confirmed,
            "expect-tip-agree": self._expect_tip_agree,
            "expect-post": self._expect_post,
            "expect-no-post": self._expect_no_post,
            "expect-pieces": self._expect_pieces,
            "expect-dm": self._expect_dm,
            "expect-mention": self._expect_mention,
            "expect-replies": self._expect_replies,
            "expect-hashtag": self._expect_hashtag,
            "expect-proof": self._expect_proof,
            "expect-key": self._expect_key,
        }

    # ---- helpers -------------------------------------------------------

    def alive(self) -> list[TwisterNode]:
        return [n for n in self.nodes.values() if self.sim.is_alive(n.endpoint)]

    def observer(self) -> TwisterNode:
        alive = self.alive()
        return alive[0] if alive else next(iter(self.nodes.values()))

    def _keypair(self, label: str) -> KeyPair:
        generation = self._key_generation[label]
        self._key_generation[label] += 1
        return generate_keypair(hash_value(["account", self.seed, label, generation]).value)

    def _user(self, label: str) -> str:
        return self.accounts[label].username

    # ---- directives ----------------------------------------------------

    def execute(self, directive: Directive) -> None:
        check = self._checks.get(directive.name)
        if check is None:
            try:
                self._actions[directive.name](directive)
            except (PostError, CryptoError) as e:
                self.errors[f"directive-error:{type(e).__name__}"] += 1
                self.sim.record(None, "directive-error", f"line {directive.line}: {e}")
                logger.info("Directive failed", extra={"line": directive.line, "error": str(e)})
            return
        passed, detail = check(directive)
        self.results.append(AssertionResult(
            line=directive.line,
            directive=directive.describe(),
            passed=passed,
            tick=self.sim.now,
            detail=detail,
        ))
        self.sim.record(None, "assert", f"line {directive.line} {'pass' if passed else 'fail'}")

    def _node(self, d: Directive) -> None:
        name, ip, port = d.args
        seeds = [n.id for n in self.nodes.values()][:1]
        node = self.sim.spawn_node(ip, port, hashrate=d.options.get("hashrate"))
        self.nodes[name] = node
        if seeds:
            node.bootstrap(seeds)

    def _mesh(self, d: Directive) -> None:
        for node in self.nodes.values():
            for other in self.nodes.values():
                if other is not node:
                    node.learn(other.id)

    def _register(self, d: Directive) -> None:
        label, node_name = d.args
        node = self.nodes[node_name]
        keypair = self._keypair(label)
        account = UserAccount(username=str(d.options.get("name", label)), keypair=keypair)
        self.accounts[label] = account
        self.hosts[label] = node
        node.add_account(account)
        reg = make_userreg(
            account.username,
            keypair,
            self.cfg.USERREG_DIFFICULTY,
            start_nonce=self.sim.rng.getrandbits(32),
        )
        node.submit_registration(reg)

    def _mine(self, d: Directive) -> None:
        count = d.args[1] if len(d.args) > 1 else 1
        self.nodes[d.args[0]].mine(count)

    def _automine(self, d: Directive) -> None:
        self.nodes[d.args[0]].set_automine(d.args[1] == "on")

    def _advance(self, d: Directive) -> None:
        self.sim.run_until(self.sim.now + d.args[0])

    def _post(self, d: Directive) -> None:
        label, text = d.args
        self.hosts[label].publish(self._user(label), text)

    def _reply(self, d: Directive) -> None:
        label, target, k, text = d.args
        self.hosts[label].publish(self._user(label), text, ReplyRef(self._user(target), k))

    def _rt(self, d: Directive) -> None:
        label, target, k = d.args
        self.hosts[label].publish(self._user(label), "", ReplyRef(self._user(target), k), PostKind.RT)

    def _dm(self, d: Directive) -> None:
        label, recipient, text = d.args
        self.hosts[label].publish_dm(self._user(label), self._user(recipient), text)

    def _follow(self, d: Directive) -> None:
        label, target = d.args
        self.accounts[target].followers.add(self._user(label))
        self.hosts[label].follow(self._user(label), self._user(target))

    def _join_own(self, d: Directive) -> None:
        label = d.args[0]
        self.hosts[label].join_own_swarm(self._user(label))

    def _listen(self, d: Directive) -> None:
        label = d.args[0]
        self.hosts[label].listen(self._user(label))

    def _replace_key(self, d: Directive) -> None:
        label = d.args[0]
        node = self.hosts[label]
        reg = replace_key(
            self.accounts[label],
            self._keypair(label),
            node.chain,
            start_nonce=self.sim.rng.getrandbits(32),
        )
        node.submit_registration(reg)

    def _partition(self, d: Directive) -> None:
        self.sim.partition([{self.nodes[n].endpoint for n in cell} for cell in d.cells])

    def _fetch(self, d: Directive) -> None:
        node_name, username, k = d.args
        node = self.nodes[node_name]
        post = node.fetch_post(username, k)
        node.trace("fetch", f"{username}/{k} {'hit' if post is not None else 'miss'}")

    # ---- assertions ----------------------------------------------------

    def _expect_unique(self, d: Directive) -> tuple[bool, str]:
        username = d.args[0]
        alive = self.alive()
        entries = [n.chain.directory.get(username) for n in alive]
        keys = {e.pubkey for e in entries if e is not None}
        missing = sum(e is None for e in entries)
        return len(keys) == 1 and not missing, f"{len(keys)} key(s), {missing} of {len(alive)} node(s) missing"

    def _expect_registered(self, d: Directive) -> tuple[bool, str]:
        username = d.args[0]
        alive = self.alive()
        known = sum(username in n.chain.directory for n in alive)
        return known == len(alive), f"known on {known}/{len(alive)}"

    def _expect_confirmed(self, d: Directive) -> tuple[bool, str]:
        username, depth = d.args
        alive = self.alive()
        confirmed = sum(is_confirmed(n.chain, username, depth) for n in alive)
        return confirmed == len(alive), f"confirmed on {confirmed}/{len(alive)}"

    def _expect_tip_agree(self, d: Directive) -> tuple[bool, str]:
        alive = self.alive()
        tips = {n.chain.tip for n in alive}
        heights = sorted({n.chain.height for n in alive})
        return len(tips) == 1, f"{len(tips)} tip(s), heights {heights}"

    def _expect_post(self, d: Directive) -> tuple[bool, str]:
        node_name, username, k = d.args
        post = self.nodes[node_name].find_post(username, k)
        return post is not None, "found" if post is not None else "not found"

    def _expect_no_post(self, d: Directive) -> tuple[bool, str]:
        passed, detail = self._expect_post(d)
        return not passed, detail

    def _expect_pieces(self, d: Directive) -> tuple[bool, str]:
        """Every follower holds piece k, byte-identical to what the DHT returns."""
        target, k = d.args
        username = self._user(target)
        swarm = user_swarm(username)
        followers = sorted(label for label, a in self.accounts.items() if username in a.following)
        if not followers:
            return False, "no followers"
        holding = matching = 0
        for label in followers:
            node = self.hosts[label]
            membership = node.swarms.get(swarm.id)
            piece = membership.pieces.get(k) if membership is not None else None
            if piece is None:
                continue
            holding += 1
            fetched = node.fetch_post(username, k)
            if fetched is not None and fetched.encode() == piece.encode():
                matching += 1
        n = len(followers)
        return holding == n and matching == n, f"held by {holding}/{n}, matching DHT {matching}/{n}"

    def _expect_dm(self, d: Directive) -> tuple[bool, str]:
        label, sender, k = d.args
        post = self.hosts[label].find_post(self._user(sender), k)
        if post is None or post.kind != PostKind.DM:
            return False, "direct message not found"
        openers = sorted(other for other, account in self.accounts.items() if try_open_dm(account, post) is not None)
        return openers == [label], f"opened by {len(openers)} account(s)"

    def _expect_mention(self, d: Directive) -> tuple[bool, str]:
        label, count = d.args
        found = len(self.hosts[label].mentions_of(self._user(label)))
        return found >= count, f"{found} mention(s)"

    def _expect_replies(self, d: Directive) -> tuple[bool, str]:
        username, k, count = d.args
        found = len(self.observer().fetch_replies(username, k))
        return found >= count, f"{found} reply(ies)"

    def _expect_hashtag(self, d: Directive) -> tuple[bool, str]:
        tag, count = d.args
        found = len(self.observer().fetch_hashtag(tag))
        return found >= count, f"{found} post(s)"

    def _expect_proof(self, d: Directive) -> tuple[bool, str]:
        username = d.args[0]
        alive = self.alive()
        verified = 0
        for node in alive:
            height = locate_registration(node.chain, username)
            if height is None:
                continue
            block = node.chain.active_chain()[height]
            try:
                proof = merkle_prove(block, username)
            except MerkleError:
                continue
            current = node.chain.directory[username].pubkey
            if proof.registration.pubkey == current and verify_merkle_proof(header_chain(node.chain), proof):
                verified += 1
        return verified == len(alive), f"verified on {verified}/{len(alive)}"

    def _expect_key(self, d: Directive) -> tuple[bool, str]:
        label, username = d.args
        account = self.accounts[label]
        account.signing_keypair(self.hosts[label].chain.directory.get(username))
        alive = self.alive()
        agreeing = 0
        for node in alive:
            entry = node.chain.directory.get(username)
            if entry is not None and entry.pubkey == account.keypair.public:
                agreeing += 1
        return agreeing == len(alive), f"bound on {agreeing}/{len(alive)}"

    # ---- report --------------------------------------------------------

    def metrics(self) -> dict[str, int]:
        totals: Counter[str] = Counter(self.sim.counters)
        for node in self.nodes.values():
            totals.update(node.metrics)
            totals.update({f"routing-{k}": v for k, v in node.table.rejected.items()})
        totals.update(self.errors)
        return dict(sorted(totals.items()))


def run_scenario(
    scenario: Scenario,
    seed: int | None = None,
    difficulty_bits: int | None = None,
    trace_path: Path | None = None,
    base: Settings = settings,
) -> RunReport:
    seed = scenario.header.seed if seed is None else seed
    cfg = scenario_settings(scenario, difficulty_bits, base)
    run = ScenarioRun(scenario, seed, cfg)
    status, error = RunStatus.PASS, ""
    try:
        for directive in scenario.directives:
            run.execute(directive)
    except SimulationHalted as e:
        status, error = RunStatus.HALTED, str(e)
        logger.warning("Simulation halted", extra={"scenario": scenario.name, "seed": seed, "error": error})
    if status is RunStatus.PASS and not all(r.passed for r in run.results):
        status = RunStatus.FAIL
    if trace_path is not None:
        write_trace(run.sim.trace, trace_path)
    report = RunReport(
        scenario=scenario.name,
        seed=seed,
        status=status,
        ticks=run.sim.now,
        events=run.sim.events_processed,
        trace_digest=run.sim.digest().hex(),
        assertions=run.results,
        metrics=run.metrics(),
        error=error,
    )
    logger.info(
        "Scenario finished",
        extra={"scenario": scenario.name, "seed": seed, "status": str(status), "passed": report.passed},
    )
    return report


def load_scenario(path: Path) -> Scenario:
    return parse_scenario(Path(path).read_text(encoding="utf-8"), name=Path(path).stem)

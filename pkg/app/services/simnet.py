"""
Seeded discrete-event network simulator.

One scheduler, one `random.Random(seed)`, one heap ordered by
(at_tick, sequence). Asynchronous sends become deliver events; `call` is a
synchronous request/response used by lookups and handshakes and is subject to
the same loss, partition and liveness rules. Nothing reads the wall clock.
"""
from __future__ import annotations

import heapq
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from app.core.compat import StrEnum
from pathlib import Path
from typing import Callable, Iterable, Protocol

from app.core.config import Settings, settings
from app.core.crypto import Digest, hash_value
from app.services.dht_overlay import Endpoint, NodeId, node_id

logger = logging.getLogger(__name__)

PPM = 1_000_000


class SimulationError(Exception):
    """Invalid simulator use (unknown or duplicate endpoint, bad partition)."""


class SimulationHalted(SimulationError):
    """A safety cap stopped the run."""


class DropReason(StrEnum):
    LOSS = "loss"
    PARTITION = "partition"
    DEAD = "dead"


class EventKind(StrEnum):
    DELIVER = "deliver"
    TIMER = "timer"
    CONTROL = "control"


class SimNode(Protocol):
    id: NodeId

    def handle_message(self, src: Endpoint, payload: bytes) -> None: ...

    def handle_call(self, src: Endpoint, payload: bytes) -> bytes | None: ...

    def on_heal(self) -> None: ...


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    latency_min: int = 1
    latency_max: int = 3
    drop_probability: float = 0.0
    max_ticks: int = 10_000_000

    def __post_init__(self):
        if not 0 <= self.latency_min <= self.latency_max:
            raise SimulationError("latency bounds must satisfy 0 <= min <= max")
        if not 0 <= self.drop_probability < 1:
            raise SimulationError("drop probability must be in [0, 1)")

    @property
    def drop_ppm(self) -> int:
        return round(self.drop_probability * PPM)

    @classmethod
    def from_settings(cls, seed: int, cfg: Settings = settings, **overrides) -> "SimConfig":
        values = dict(
            seed=seed,
            latency_min=cfg.SIM_LATENCY_MIN,
            latency_max=cfg.SIM_LATENCY_MAX,
            max_ticks=cfg.SIM_MAX_TICKS,
        )
        values.update(overrides)
        return cls(**values)


@dataclass(order=True)
class SimEvent:
    at_tick: int
    sequence: int
    kind: EventKind = field(compare=False)
    src: Endpoint | None = field(default=None, compare=False)
    dst: Endpoint | None = field(default=None, compare=False)
    payload: bytes = field(default=b"", compare=False)
    action: Callable[[], None] | None = field(default=None, compare=False, repr=False)
    label: str = field(default="", compare=False)


@dataclass(frozen=True)
class TraceEntry:
    tick: int
    node: str
    kind: str
    detail: str

    def line(self) -> str:
        return f"{self.tick}\t{self.node}\t{self.kind}\t{self.detail}"


def trace_digest(trace: Iterable[TraceEntry]) -> Digest:
    return hash_value(list(trace))


def write_trace(trace: Iterable[TraceEntry], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        for entry in trace:
            out.write(entry.line() + "\n")


def read_trace(path: Path) -> list[TraceEntry]:
    entries = []
    with open(path, encoding="utf-8", newline="\n") as src:
        for number, line in enumerate(src, start=1):
            parts = line.rstrip("\n").split("\t", 3)
            if len(parts) != 4 or not parts[0].isdigit():
                raise SimulationError(f"trace line {number} is malformed")
            entries.append(TraceEntry(int(parts[0]), parts[1], parts[2], parts[3]))
    return entries


class Simulator:
    def __init__(
        self,
        config: SimConfig,
        cfg: Settings = settings,
        node_factory: Callable[..., SimNode] | None = None,
    ):
        self.config = config
        self.cfg = cfg
        self.node_factory = node_factory
        self.rng = random.Random(config.seed)
        self.now = 0
        self.nodes: dict[Endpoint, SimNode] = {}
        self.trace: list[TraceEntry] = []
        self.counters: Counter[str] = Counter()
        self.events_processed = 0
        self._queue: list[SimEvent] = []
        self._sequence = 0
        self._cells: dict[Endpoint, int] | None = None
        self._dead: set[Endpoint] = set()
        self._origins: dict[Digest, int] = {}

    # ---- nodes ---------------------------------------------------------

    def spawn_node(self, ip: str | int, port: int, **kwargs) -> SimNode:
        identity = node_id(ip, port)
        if identity.endpoint in self.nodes:
            raise SimulationError(f"endpoint {identity.endpoint} already in use")
        if self.node_factory is None:
            raise SimulationError("simulator has no node factory")
        node = self.node_factory(self, identity, self.cfg, **kwargs)
        self.nodes[identity.endpoint] = node
        if self._cells is not None:
            # late joiners land in the first cell until the next heal
            self._cells[identity.endpoint] = 0
        self.record(identity, "spawn", str(identity.endpoint))
        return node

    def node(self, endpoint: Endpoint) -> SimNode:
        try:
            return self.nodes[endpoint]
        except KeyError:
            raise SimulationError(f"unknown endpoint {endpoint}") from None

    def is_alive(self, endpoint: Endpoint) -> bool:
        return endpoint in self.nodes and endpoint not in self._dead

    def kill(self, endpoint: Endpoint) -> None:
        self.node(endpoint)
        self._dead.add(endpoint)
        self.record(self.nodes[endpoint].id, "kill", "")

    def revive(self, endpoint: Endpoint) -> None:
        node = self.node(endpoint)
        self._dead.discard(endpoint)
        self.record(node.id, "revive", "")
        self.control(0, node.on_heal, "reannounce")

    # ---- partitions ----------------------------------------------------

    def partition(self, cells: list[set[Endpoint]]) -> None:
        assigned: dict[Endpoint, int] = {}
        for index, cell in enumerate(cells):
            for endpoint in cell:
                self.node(endpoint)
                if endpoint in assigned:
                    raise SimulationError(f"{endpoint} appears in more than one cell")
                assigned[endpoint] = index
        for endpoint in self.nodes:
            # uncovered nodes form a cell of their own
            assigned.setdefault(endpoint, len(cells))
        self._cells = assigned
        self.record(None, "partition", " | ".join(
            ",".join(str(e) for e in sorted(cell)) for cell in cells
        ))

    def heal(self) -> None:
        self._cells = None
        self.record(None, "heal", "")
        for endpoint in sorted(self.nodes):
            if endpoint not in self._dead:
                self.control(0, self.nodes[endpoint].on_heal, "reannounce")

    def blocked(self, src: Endpoint, dst: Endpoint) -> DropReason | None:
        if not self.is_alive(src) or not self.is_alive(dst):
            return DropReason.DEAD
        if self._cells is not None and self._cells.get(src) != self._cells.get(dst):
            return DropReason.PARTITION
        return None

    def _lost(self) -> bool:
        ppm = self.config.drop_ppm
        return ppm > 0 and self.rng.randrange(PPM) < ppm

    # ---- transport -----------------------------------------------------

    def _push(self, event: SimEvent) -> SimEvent:
        heapq.heappush(self._queue, event)
        self._sequence += 1
        return event

    def send(self, src: Endpoint, dst: Endpoint, payload: bytes) -> SimEvent | None:
        """Schedule a delivery; returns None when the message is dropped at send time."""
        self.node(src)
        self.node(dst)
        self.counters["sent"] += 1
        reason = self.blocked(src, dst)
        if reason is None and self._lost():
            reason = DropReason.LOSS
        if reason is not None:
            self.counters["dropped"] += 1
            self.counters[f"dropped:{reason}"] += 1
            return None
        delay = max(1, self.rng.randint(self.config.latency_min, self.config.latency_max))
        return self._push(SimEvent(
            at_tick=self.now + delay,
            sequence=self._sequence,
            kind=EventKind.DELIVER,
            src=src,
            dst=dst,
            payload=payload,
        ))

    def call(self, src: Endpoint, dst: Endpoint, payload: bytes) -> bytes | None:
        """Synchronous request/response; None on loss, partition or a dead peer."""
        self.node(dst)
        self.counters["rpc"] += 1
        reason = self.blocked(src, dst)
        if reason is None and self._lost():
            reason = DropReason.LOSS
        if reason is not None:
            self.counters[f"rpc-failed:{reason}"] += 1
            return None
        return self.nodes[dst].handle_call(src, payload)

    def schedule(self, delay: int, action: Callable[[], None], label: str = "timer") -> SimEvent:
        return self._push(SimEvent(
            at_tick=self.now + max(0, delay),
            sequence=self._sequence,
            kind=EventKind.TIMER,
            action=action,
            label=label,
        ))

    def control(self, delay: int, action: Callable[[], None], label: str) -> SimEvent:
        return self._push(SimEvent(
            at_tick=self.now + max(0, delay),
            sequence=self._sequence,
            kind=EventKind.CONTROL,
            action=action,
            label=label,
        ))

    @property
    def in_flight(self) -> int:
        return sum(1 for e in self._queue if e.kind is EventKind.DELIVER)

    def conservation_holds(self) -> bool:
        c = self.counters
        return c["sent"] == c["delivered"] + c["dropped"] + self.in_flight

    # ---- running -------------------------------------------------------

    def run_until(self, tick: int) -> list[TraceEntry]:
        """Process every event due at or before tick; returns the trace entries added."""
        if tick < self.now:
            raise SimulationError(f"cannot run backwards from {self.now} to {tick}")
        start = len(self.trace)
        limit = min(tick, self.config.max_ticks)
        while self._queue and self._queue[0].at_tick <= limit:
            event = heapq.heappop(self._queue)
            self.events_processed += 1
            if self.events_processed > self.cfg.SIM_MAX_EVENTS:
                raise SimulationHalted(
                    f"event cap {self.cfg.SIM_MAX_EVENTS} exceeded at tick {event.at_tick}"
                )
            self.now = event.at_tick
            self._dispatch(event)
        self.now = max(self.now, limit)
        if tick > self.config.max_ticks:
            raise SimulationHalted(f"tick cap {self.config.max_ticks} reached")
        return self.trace[start:]

    def _dispatch(self, event: SimEvent) -> None:
        if event.kind is EventKind.DELIVER:
            if not self.is_alive(event.dst):
                self.counters["dropped"] += 1
                self.counters[f"dropped:{DropReason.DEAD}"] += 1
                return
            self.counters["delivered"] += 1
            self.nodes[event.dst].handle_message(event.src, event.payload)
        elif event.action is not None:
            event.action()

    # ---- delivery latency ----------------------------------------------

    def note_origin(self, key: Digest) -> None:
        self._origins.setdefault(key, self.now)

    def note_delivery(self, key: Digest) -> None:
        start = self._origins.get(key)
        if start is None:
            return
        latency = self.now - start
        bucket = 1 if latency <= 1 else 1 << (latency - 1).bit_length()
        self.counters[f"delivery-latency-le-{bucket}"] += 1

    # ---- trace ---------------------------------------------------------

    def record(self, node: NodeId | None, kind: str, detail: str) -> None:
        label = node.short() if node is not None else "--------"
        self.trace.append(TraceEntry(self.now, label, kind, detail))

    def digest(self) -> Digest:
        return trace_digest(self.trace)

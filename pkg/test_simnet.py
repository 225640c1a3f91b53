import pytest

from app.core.config import settings
from app.core.crypto import hash_value
from app.services.dht_overlay import Endpoint
from app.services.simnet import (
    SimConfig,
    SimulationError,
    SimulationHalted,
    Simulator,
    TraceEntry,
    read_trace,
    trace_digest,
    write_trace,
)


class EchoNode:
    """Records what it receives; answers "ping" with "pong" and calls with the reversed payload."""

    def __init__(self, sim, identity, cfg, rally=False):
        self.sim = sim
        self.id = identity
        self.endpoint = identity.endpoint
        self.rally = rally
        self.received = []
        self.heals = 0

    def handle_message(self, src, payload):
        self.received.append((self.sim.now, src, payload))
        self.sim.record(self.id, "recv", payload.decode())
        if payload == b"ping" or self.rally:
            self.sim.send(self.endpoint, src, b"pong")

    def handle_call(self, src, payload):
        return payload[::-1]

    def on_heal(self):
        self.heals += 1
        self.sim.record(self.id, "heal-callback", "")


def _sim(seed=1, cfg=None, **config):
    return Simulator(SimConfig(seed=seed, **config), cfg or settings, node_factory=EchoNode)


def _nodes(sim, count):
    return [sim.spawn_node(f"10.4.0.{i + 1}", 6000) for i in range(count)]


def _chatter(sim, nodes, rounds=50):
    for i in range(rounds):
        src = nodes[sim.rng.randrange(len(nodes))]
        dst = nodes[sim.rng.randrange(len(nodes))]
        if src is not dst:
            sim.send(src.endpoint, dst.endpoint, b"ping")
        sim.run_until(sim.now + 1)
    sim.run_until(sim.now + 20)


def test_config_validation():
    with pytest.raises(SimulationError):
        SimConfig(latency_min=3, latency_max=1)
    with pytest.raises(SimulationError):
        SimConfig(drop_probability=1.0)
    assert SimConfig(drop_probability=0.25).drop_ppm == 250_000


def test_config_from_settings(fast_settings):
    config = SimConfig.from_settings(9, fast_settings, latency_max=7)
    assert config.seed == 9
    assert config.latency_min == fast_settings.SIM_LATENCY_MIN
    assert config.latency_max == 7


def test_spawn_rules():
    sim = _sim()
    _nodes(sim, 1)
    with pytest.raises(SimulationError):
        sim.spawn_node("10.4.0.1", 6000)
    with pytest.raises(SimulationError):
        sim.node(Endpoint.parse("10.4.9.9", 1))
    bare = Simulator(SimConfig())
    with pytest.raises(SimulationError):
        bare.spawn_node("10.4.0.1", 6000)


def test_delivery_respects_latency():
    sim = _sim(latency_min=2, latency_max=4)
    a, b = _nodes(sim, 2)
    for _ in range(30):
        sim.send(a.endpoint, b.endpoint, b"hello")
    sim.run_until(10)
    assert len(b.received) == 30
    assert all(2 <= tick <= 4 for tick, _, _ in b.received)
    assert sim.counters["delivered"] == 30


def test_same_seed_same_trace():
    def run(seed):
        sim = _sim(seed=seed, latency_min=1, latency_max=5)
        _chatter(sim, _nodes(sim, 6))
        return sim.digest()

    assert run(3) == run(3)
    assert run(3) != run(4)


def test_conservation_under_loss():
    sim = _sim(seed=2, drop_probability=0.3)
    nodes = _nodes(sim, 5)
    for i in range(40):
        sim.send(nodes[i % 5].endpoint, nodes[(i + 1) % 5].endpoint, b"ping")
        assert sim.conservation_holds()
        sim.run_until(sim.now + 1)
        assert sim.conservation_holds()
    sim.run_until(sim.now + 10)
    assert sim.conservation_holds()
    assert sim.counters["dropped:loss"] > 0
    assert sim.in_flight == 0


@pytest.mark.parametrize("p", [0.05, 0.2, 0.5])
def test_drop_rate_matches_configuration(p):
    sim = _sim(seed=7, drop_probability=p)
    a, b = _nodes(sim, 2)
    sends = 10_000
    for _ in range(sends):
        sim.send(a.endpoint, b.endpoint, b"x")
    sim.run_until(sim.now + 10)
    assert abs(sim.counters["dropped:loss"] / sends - p) <= 0.02
    assert sim.counters["delivered"] + sim.counters["dropped:loss"] == sends


def test_partition_and_heal():
    sim = _sim()
    a, b, c = _nodes(sim, 3)
    sim.partition([{a.endpoint}, {b.endpoint}])
    assert sim.send(a.endpoint, b.endpoint, b"x") is None
    assert sim.send(a.endpoint, c.endpoint, b"x") is None
    assert sim.call(a.endpoint, b.endpoint, b"abc") is None
    assert sim.counters["dropped:partition"] == 2
    assert sim.counters["rpc-failed:partition"] == 1

    sim.heal()
    sim.run_until(sim.now)
    assert [n.heals for n in (a, b, c)] == [1, 1, 1]
    assert sim.call(a.endpoint, b.endpoint, b"abc") == b"cba"
    sim.send(a.endpoint, b.endpoint, b"x")
    sim.run_until(sim.now + 5)
    assert b.received


def test_partition_rejects_overlapping_cells():
    sim = _sim()
    a, b = _nodes(sim, 2)
    with pytest.raises(SimulationError):
        sim.partition([{a.endpoint}, {a.endpoint, b.endpoint}])


def test_dead_nodes_drop_traffic():
    sim = _sim(latency_min=3, latency_max=3)
    a, b = _nodes(sim, 2)
    sim.send(a.endpoint, b.endpoint, b"in flight")
    sim.kill(b.endpoint)
    assert sim.send(a.endpoint, b.endpoint, b"late") is None
    sim.run_until(5)
    assert not b.received
    assert sim.counters["dropped:dead"] == 2
    assert sim.conservation_holds()

    sim.revive(b.endpoint)
    sim.run_until(sim.now)
    assert b.heals == 1
    assert sim.is_alive(b.endpoint)


def test_run_until_bounds():
    sim = _sim(max_ticks=10)
    _nodes(sim, 1)
    sim.run_until(5)
    with pytest.raises(SimulationError):
        sim.run_until(4)
    with pytest.raises(SimulationHalted):
        sim.run_until(20)
    assert sim.now == 10


def test_event_cap_halts_runaway_traffic(fast_settings):
    cfg = fast_settings.model_copy(update={"SIM_MAX_EVENTS": 50})
    sim = _sim(cfg=cfg)
    a = sim.spawn_node("10.4.0.1", 6000, rally=True)
    b = sim.spawn_node("10.4.0.2", 6000, rally=True)
    sim.send(a.endpoint, b.endpoint, b"ping")
    with pytest.raises(SimulationHalted):
        sim.run_until(10_000)


def test_timers_fire_in_schedule_order():
    sim = _sim()
    fired = []
    sim.schedule(2, lambda: fired.append("b"))
    sim.schedule(1, lambda: fired.append("a"))
    sim.schedule(2, lambda: fired.append("c"))
    sim.run_until(2)
    assert fired == ["a", "b", "c"]


def test_delivery_latency_buckets():
    sim = _sim()
    key = hash_value("post")
    sim.note_origin(key)
    sim.run_until(5)
    sim.note_delivery(key)
    sim.note_delivery(hash_value("unknown"))
    assert sim.counters["delivery-latency-le-8"] == 1
    assert sum(v for k, v in sim.counters.items() if k.startswith("delivery-latency")) == 1


def test_trace_file_round_trip(tmp_path):
    sim = _sim()
    _chatter(sim, _nodes(sim, 3), rounds=10)
    path = tmp_path / "run.trace"
    write_trace(sim.trace, path)
    assert b"\r\n" not in path.read_bytes()
    loaded = read_trace(path)
    assert loaded == sim.trace
    assert trace_digest(loaded) == sim.digest()


def test_malformed_trace_rejected(tmp_path):
    path = tmp_path / "bad.trace"
    path.write_text("12\tnode\tonly-three\n", encoding="utf-8")
    with pytest.raises(SimulationError, match="line 1"):
        read_trace(path)
    assert TraceEntry(1, "n", "k", "d").line() == "1\tn\tk\td"

"""Unit tests for heartbeat monitoring and probes."""

import itertools

import pytest

from groupsim import gm_core as gm
from groupsim.failure_detection import (
    US, HeartbeatConfig, MonitorTable, ProbeTracker,
    heartbeat_target, recompute_ring_monitor,
)
from groupsim.gm_core import GMember, ViewG


def view(*gids):
    return ViewG(1, frozenset(GMember(g, f"gsd:{g}") for g in gids))


def cfg(h=1.0, n=5.0):
    return HeartbeatConfig(int(h * US), int(n * US))


def test_config_validation():
    with pytest.raises(ValueError):
        HeartbeatConfig(5 * US, 1 * US)
    with pytest.raises(ValueError):
        HeartbeatConfig(0, US)
    assert cfg(1, 5).probe_timeout_us == 2 * US


def test_ring_monitor_examples():
    assert recompute_ring_monitor(view(1, 2, 3), 3) == 1  # prince watches leader
    assert recompute_ring_monitor(view(1, 2, 3), 1) == 2
    assert recompute_ring_monitor(view(1), 1) is None


def test_ring_monitor_matches_front_exhaustively():
    for r in range(1, 6):
        for subset in itertools.combinations(range(1, 7), r):
            v = view(*subset)
            for g in subset:
                expected = gm.front(set(subset), g)
                got = recompute_ring_monitor(v, g)
                if len(subset) == 1:
                    assert got is None
                else:
                    assert got == expected


def test_heartbeat_target_is_the_watcher():
    v = view(1, 2, 3)
    for g in (1, 2, 3):
        target = heartbeat_target(v, g)
        assert recompute_ring_monitor(v, target) == g
    assert heartbeat_target(view(4), 4) is None


def test_suspicion_at_exact_deadline():
    table = MonitorTable(cfg(1, 5))
    table.register("x", 10 * US)
    assert table.on_tick(14 * US) == []
    assert table.on_tick(15 * US) == ["x"]
    assert table.on_tick(15 * US) == []  # no duplicate events


def test_heartbeat_resets_deadline():
    table = MonitorTable(cfg(1, 5))
    table.register("x", 10 * US)
    table.refresh("x", 14 * US)
    assert table.on_tick(15 * US) == []
    assert table.next_deadline() == 19 * US
    assert table.on_tick(19 * US) == ["x"]


def test_worst_case_detection_within_timeout_plus_interval():
    # beats every h; crash right after a beat leaves the longest silence
    h, n = 0.25, 1.0
    table = MonitorTable(cfg(h, n))
    table.register("nd", 0)
    crash = int(0.26 * US)
    last_beat = int(0.25 * US)
    table.refresh("nd", last_beat)
    deadline = table.next_deadline()
    assert deadline - crash <= int((n + h) * US)
    assert table.on_tick(deadline) == ["nd"]


def test_revive_reopens_epoch():
    table = MonitorTable(cfg(1, 5))
    table.register("x", 0, meta=42)
    first_epoch = table.entries["x"].epoch
    assert table.on_tick(5 * US) == ["x"]
    assert table.refresh("x", 6 * US, revive=True)
    assert table.entries["x"].epoch > first_epoch
    assert table.on_tick(11 * US) == ["x"]  # can be suspected again


def test_refresh_without_revive_keeps_suspected():
    table = MonitorTable(cfg(1, 5))
    table.register("x", 0)
    table.on_tick(5 * US)
    assert not table.refresh("x", 6 * US)
    assert table.entries["x"].suspected


def test_unknown_key_refresh_is_noop():
    table = MonitorTable(cfg(1, 5))
    assert not table.refresh("ghost", 0)


def test_steady_heartbeats_never_suspected():
    # loss-free stream of beats; sweep ticks across 60 simulated seconds
    table = MonitorTable(cfg(1, 5))
    table.register("x", 0)
    for t in range(0, 60 * US, US):
        assert table.on_tick(t) == []
        table.refresh("x", t)


def test_probe_tracker_lifecycle():
    tracker = ProbeTracker(2 * US)
    deadline = tracker.start("g3", 10 * US)
    assert deadline == 12 * US
    assert tracker.start("g3", 10 * US) is None  # one probe per target
    assert tracker.resolve("g3")
    assert not tracker.resolve("g3")


def test_probe_tracker_expiry():
    tracker = ProbeTracker(2 * US)
    tracker.start("g3", 10 * US)
    assert not tracker.expired("g3", 11 * US)
    assert tracker.expired("g3", 12 * US)
    assert not tracker.expired("g3", 13 * US)  # consumed

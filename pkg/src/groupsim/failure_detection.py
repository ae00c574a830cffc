"""Heartbeat bookkeeping and timeout-based suspicion.

One MonitorTable instance watches any number of peers. The ring wiring (who
watches whom) is recomputed from each installed view; the partition hierarchy
registers node and VM daemons explicitly. Everything is a pure function of
(config, table, now) so the simulator can drive it from exact deadline
timers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable

from .gm_core import ViewG, front

US = 1_000_000


@dataclass(frozen=True)
class HeartbeatConfig:
    """Heartbeat interval and suspicion timeout, in simulated microseconds."""

    interval_us: int
    timeout_us: int

    def __post_init__(self) -> None:
        if not 0 < self.interval_us < self.timeout_us:
            raise ValueError(
                f"need 0 < interval < timeout, got {self.interval_us}/{self.timeout_us}")

    @property
    def probe_timeout_us(self) -> int:
        """A liveness probe that goes unanswered this long means dead."""
        return 2 * self.interval_us


@dataclass
class MonitorEntry:
    last_heartbeat_us: int
    deadline_us: int
    suspected: bool = False
    epoch: int = 0
    meta: object = None


class MonitorTable:
    """Deadline table for the processes one daemon watches.

    A suspicion is raised at most once per registration epoch; re-registering
    (fresh view, restarted child) opens a new epoch.
    """

    def __init__(self, config: HeartbeatConfig):
        self.config = config
        self.entries: dict[Hashable, MonitorEntry] = {}
        self._epoch = 0

    def register(self, key: Hashable, now_us: int, meta: object = None) -> MonitorEntry:
        self._epoch += 1
        entry = MonitorEntry(now_us, now_us + self.config.timeout_us,
                             epoch=self._epoch, meta=meta)
        self.entries[key] = entry
        return entry

    def refresh(self, key: Hashable, now_us: int, revive: bool = False) -> bool:
        """Record a heartbeat. Returns True when this revives a suspected
        entry (callers report the peer as recovered)."""
        entry = self.entries.get(key)
        if entry is None:
            return False
        entry.last_heartbeat_us = now_us
        entry.deadline_us = now_us + self.config.timeout_us
        if entry.suspected and revive:
            entry.suspected = False
            self._epoch += 1
            entry.epoch = self._epoch
            return True
        return False

    def remove(self, key: Hashable) -> None:
        self.entries.pop(key, None)

    def clear(self) -> None:
        self.entries.clear()

    def on_tick(self, now_us: int) -> list[Hashable]:
        """Keys whose deadline has passed, each reported exactly once."""
        out = []
        for key, entry in self.entries.items():
            if not entry.suspected and now_us >= entry.deadline_us:
                entry.suspected = True
                out.append(key)
        return out

    def next_deadline(self) -> int | None:
        pending = [e.deadline_us for e in self.entries.values() if not e.suspected]
        return min(pending) if pending else None


def recompute_ring_monitor(view: ViewG, self_gid: int) -> int | None:
    """Which group member this process watches under the given view; None for
    a singleton group."""
    monitored = front(view.gids(), self_gid)
    return None if monitored == self_gid else monitored


def heartbeat_target(view: ViewG, self_gid: int) -> int | None:
    """Which member our own ring heartbeats go to: the one watching us."""
    gids = view.gids()
    for g in gids:
        if g != self_gid and front(gids, g) == self_gid:
            return g
    return None


@dataclass
class ProbeTracker:
    """Outstanding liveness probes issued by the leader while judging a crash
    report. One probe per target; a reply before the deadline means alive."""

    timeout_us: int
    pending: dict[Hashable, int] = field(default_factory=dict)

    def start(self, key: Hashable, now_us: int) -> int | None:
        """Returns the reply deadline, or None if a probe is already out."""
        if key in self.pending:
            return None
        deadline = now_us + self.timeout_us
        self.pending[key] = deadline
        return deadline

    def resolve(self, key: Hashable) -> bool:
        """A reply arrived; True if we were still waiting for it."""
        return self.pending.pop(key, None) is not None

    def expired(self, key: Hashable, now_us: int) -> bool:
        """True when the probe is still outstanding past its deadline."""
        deadline = self.pending.get(key)
        if deadline is None or now_us < deadline:
            return False
        del self.pending[key]
        return True

"""Restart policies: node daemons revive VM daemons, partition managers
revive node daemons, and a failed group daemon is revived by whichever member
was watching it (its monitor runs the whole recovery: diagnose, restart on
the same or a spare node, take over the orphan partition if restarting
fails)."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class RecoveryPolicy:
    restart_delay_us: int
    max_restart_attempts: int = 2

    def __post_init__(self) -> None:
        if self.restart_delay_us < 0:
            raise ValueError("restart delay must be non-negative")
        if self.max_restart_attempts < 1:
            raise ValueError("need at least one restart attempt")


@dataclass(frozen=True)
class Diagnosis:
    """What the recovering daemon learned about the failed peer's host."""

    node_alive: bool
    running_nids: tuple[int, ...]


@dataclass(frozen=True)
class RestartOn:
    nid: int


@dataclass(frozen=True)
class Takeover:
    reason: str


def choose_spare(running_nids: tuple[int, ...], exclude_nid: int) -> int | None:
    """Deterministic spare selection: lowest-nid running node, never the
    failed host itself."""
    candidates = sorted(n for n in running_nids if n != exclude_nid)
    return candidates[0] if candidates else None


def decide_gsd_recovery(diag: Diagnosis, home_nid: int, attempt: int,
                        policy: RecoveryPolicy) -> RestartOn | Takeover:
    """One step of the group-daemon recovery protocol. ``attempt`` is
    1-based; past the policy limit the recovering member absorbs the orphan
    partition instead of retrying forever."""
    if attempt > policy.max_restart_attempts:
        return Takeover("restart-attempts-exhausted")
    if diag.node_alive:
        return RestartOn(home_nid)
    spare = choose_spare(diag.running_nids, home_nid)
    if spare is None:
        return Takeover("no-spare-node")
    return RestartOn(spare)


def should_restart_child(host_node_alive: bool) -> bool:
    """Child daemons (VM or node level) are only restarted while their host
    node is up; a crashed node takes its daemons with it for good."""
    return host_node_alive

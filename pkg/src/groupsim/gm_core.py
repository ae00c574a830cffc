"""Membership state machine run by every group service daemon.

Handlers are pure: ``(state, event) -> (state, outputs)``. The surrounding
runtime owns clocks, channels and timers; everything in this module is plain
data, which keeps replays byte-identical and the handlers testable in
isolation.

Group organization is a logical ring ordered by gid. Each member watches its
ring successor ``front(m)`` (next-higher gid, wrapping to the minimum), so the
member with the largest gid watches the leader and is its designated
successor (the "prince"). All view changes are driven by the single leader:
it bumps the view id, broadcasts the new view, and keeps removing members
that fail to acknowledge until the surviving group is consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Union


class GmError(ValueError):
    """Domain violation: bad ring lookup, malformed view, or misuse."""


class Role(Enum):
    LEADER = "leader"
    PRINCE = "prince"
    MEMBER = "member"


@dataclass(frozen=True, order=True)
class GMember:
    """One group member: rank id plus an opaque endpoint address.

    gid 0 is a placeholder for a process that has not been admitted yet and
    never appears inside an installed view.
    """

    gid: int
    address: str

    def __post_init__(self) -> None:
        if self.gid < 0:
            raise GmError(f"gid must be non-negative, got {self.gid}")
        if not self.address:
            raise GmError("member address must be nonempty")


@dataclass(frozen=True)
class ViewG:
    """A membership view: monotone view id plus the member set."""

    view_id: int
    members: frozenset[GMember]

    def __post_init__(self) -> None:
        if self.view_id < 1:
            raise GmError(f"view_id must be >= 1, got {self.view_id}")
        if not self.members:
            raise GmError("installed view must have at least one member")
        gids = [m.gid for m in self.members]
        if any(g < 1 for g in gids):
            raise GmError("view members must have gid >= 1")
        if len(set(gids)) != len(gids):
            raise GmError("duplicate gids in view")
        addresses = [m.address for m in self.members]
        if len(set(addresses)) != len(addresses):
            raise GmError("duplicate addresses in view")

    def gids(self) -> tuple[int, ...]:
        return tuple(sorted(m.gid for m in self.members))

    def sorted_members(self) -> tuple[GMember, ...]:
        return tuple(sorted(self.members, key=lambda m: m.gid))

    def member(self, gid: int) -> GMember:
        for m in self.members:
            if m.gid == gid:
                return m
        raise KeyError(gid)

    def by_address(self, address: str) -> GMember | None:
        for m in self.members:
            if m.address == address:
                return m
        return None

    def has_gid(self, gid: int) -> bool:
        return any(m.gid == gid for m in self.members)

    def describe(self) -> str:
        """Stable one-token-per-field rendering used in trace payloads."""
        body = ",".join(f"{m.gid}:{m.address}" for m in self.sorted_members())
        return f"view_id={self.view_id} members={body}"


def front(members: Iterable[int], gid: int) -> int:
    """Ring successor of ``gid``: smallest member gid above it, wrapping to
    the smallest gid overall. A singleton ring is its own successor."""
    ms = set(members)
    if not ms:
        raise GmError("front() over an empty member set")
    if gid not in ms:
        raise GmError(f"gid {gid} not in member set")
    higher = [g for g in ms if g > gid]
    return min(higher) if higher else min(ms)


def back(members: Iterable[int], gid: int) -> int:
    """Ring predecessor: the member whose front() is ``gid``."""
    ms = set(members)
    if not ms:
        raise GmError("back() over an empty member set")
    if gid not in ms:
        raise GmError(f"gid {gid} not in member set")
    lower = [g for g in ms if g < gid]
    return max(lower) if lower else max(ms)


# ---------------------------------------------------------------------------
# Events: the closed input alphabet of the state machine.


@dataclass(frozen=True)
class SucceedingFailure:
    """The failure detector timed out on the member we watch."""


@dataclass(frozen=True)
class RecvAck:
    sender_gid: int
    view_id: int


@dataclass(frozen=True)
class RecvCrashReport:
    view_id: int
    sender: GMember
    crasher: GMember


@dataclass(frozen=True)
class RecvNewViewG:
    view: ViewG
    sender_gid: int


@dataclass(frozen=True)
class RecvRejoining:
    member: GMember


@dataclass(frozen=True)
class RecvJoining:
    address: str


@dataclass(frozen=True)
class RecvLeavingPropose:
    view_id: int
    leaving: GMember


@dataclass(frozen=True)
class RecvCurrentVersion:
    view_id: int


@dataclass(frozen=True)
class AckTimeout:
    view_id: int


@dataclass(frozen=True)
class ProbeResult:
    member: GMember
    alive: bool


@dataclass(frozen=True)
class RecvPrepare:
    sender: GMember


@dataclass(frozen=True)
class RecvPrepareAck:
    sender: GMember


@dataclass(frozen=True)
class RecvBootCommit:
    view: ViewG
    sender_gid: int


@dataclass(frozen=True)
class PrepareTimeout:
    pass


GmEvent = Union[
    SucceedingFailure,
    RecvAck,
    RecvCrashReport,
    RecvNewViewG,
    RecvRejoining,
    RecvJoining,
    RecvLeavingPropose,
    RecvCurrentVersion,
    AckTimeout,
    ProbeResult,
    RecvPrepare,
    RecvPrepareAck,
    RecvBootCommit,
    PrepareTimeout,
]


# ---------------------------------------------------------------------------
# Outputs: messages and timer requests the runtime must act on, in order.


@dataclass(frozen=True)
class SendPrepare:
    to: tuple[GMember, ...]


@dataclass(frozen=True)
class SendPrepareAck:
    to: GMember


@dataclass(frozen=True)
class SendBootCommit:
    view: ViewG
    to: tuple[GMember, ...]


@dataclass(frozen=True)
class SendNewViewG:
    view: ViewG
    to: tuple[GMember, ...]


@dataclass(frozen=True)
class SendAck:
    to: GMember
    view_id: int


@dataclass(frozen=True)
class SendCrashReport:
    to: GMember
    view_id: int
    crasher: GMember


@dataclass(frozen=True)
class SendLeavingPropose:
    to: GMember
    view_id: int
    member: GMember


@dataclass(frozen=True)
class SendCurrentVersion:
    to: GMember
    view_id: int


@dataclass(frozen=True)
class SendRejoining:
    to: tuple[GMember, ...]
    member: GMember


@dataclass(frozen=True)
class SendJoining:
    to: tuple[str, ...]
    address: str


@dataclass(frozen=True)
class StartAckTimer:
    view_id: int


@dataclass(frozen=True)
class StartPrepareTimer:
    pass


@dataclass(frozen=True)
class ProbeRequest:
    member: GMember


@dataclass(frozen=True)
class ScheduleRejoin:
    """Halted because the group moved on; re-register after a restart delay."""


@dataclass(frozen=True)
class InstallView:
    view: ViewG
    rank: Role


@dataclass(frozen=True)
class Halt:
    reason: str


@dataclass(frozen=True)
class Ignored:
    reason: str


GmOutput = Union[
    SendPrepare,
    SendPrepareAck,
    SendBootCommit,
    SendNewViewG,
    SendAck,
    SendCrashReport,
    SendLeavingPropose,
    SendCurrentVersion,
    SendRejoining,
    SendJoining,
    StartAckTimer,
    StartPrepareTimer,
    ProbeRequest,
    ScheduleRejoin,
    InstallView,
    Halt,
    Ignored,
]


# ---------------------------------------------------------------------------
# State.


@dataclass(frozen=True)
class AckRound:
    """Open acknowledgement round: the view id being confirmed and the gids
    that have not answered yet."""

    view_id: int
    pending: frozenset[int]


@dataclass(frozen=True)
class BootState:
    coordinator: bool
    acks: frozenset[int]


@dataclass(frozen=True)
class GmState:
    """Complete membership state of one daemon.

    ``gid_watermark`` is the highest gid this process ever saw installed;
    joins are numbered above it so gids are never reused within a run, even
    after the current maximum leaves the group.
    """

    me: GMember
    static_members: tuple[GMember, ...] = ()
    rank: Role | None = None
    view: ViewG | None = None
    leader_gid: int | None = None
    ack_round: AckRound | None = None
    probes: frozenset[int] = frozenset()
    gid_watermark: int = 0
    halted: bool = False
    leaving: bool = False
    boot: BootState | None = None

    def in_view(self) -> bool:
        return self.view is not None and self.view.by_address(self.me.address) is not None


def bootstrap(static_members: Iterable[GMember], me: GMember) -> tuple[GmState, list[GmOutput]]:
    """Initial state at process start. The member with the smallest gid
    coordinates group creation over a two-phase exchange: Prepare to all,
    collect acknowledgements until all answer or the timer expires, then
    commit view 1 over the responders."""
    members = tuple(sorted(set(static_members), key=lambda m: m.gid))
    if not members:
        raise GmError("bootstrap needs at least one static member")
    if me not in members:
        raise GmError("bootstrap member list must include self")
    coordinator = members[0].gid == me.gid
    state = GmState(me=me, static_members=members, boot=BootState(coordinator, frozenset()))
    outputs: list[GmOutput] = []
    if coordinator:
        others = tuple(m for m in members if m.gid != me.gid)
        if others:
            outputs.append(SendPrepare(others))
            outputs.append(StartPrepareTimer())
            return state, outputs
        # degenerate single-member group commits immediately
        return _boot_commit(state)
    return state, outputs


def begin_join(contacts: Iterable[str], address: str) -> tuple[GmState, list[GmOutput]]:
    """State for a fresh process asking the group for admission."""
    state = GmState(me=GMember(0, address))
    return state, [SendJoining(tuple(sorted(set(contacts))), address)]


def begin_rejoin(me: GMember, targets: Iterable[GMember]) -> list[GmOutput]:
    """Announce a preserved identity to every member we still know about;
    only the current leader will act, everyone else drops it."""
    to = tuple(sorted((m for m in targets if m.address != me.address), key=lambda m: m.gid))
    return [SendRejoining(to, me)]


def reset_for_rejoin(state: GmState) -> GmState:
    """Clear the halt so a scheduled rejoin can install the next view."""
    return replace(state, halted=False, leaving=False, rank=None,
                   ack_round=None, probes=frozenset(), boot=None)


def handle(state: GmState, event: GmEvent) -> tuple[GmState, list[GmOutput]]:
    """Dispatch one input event. Pure; callers must apply outputs in order."""
    handler = _HANDLERS.get(type(event))
    if handler is None:
        raise GmError(f"unknown event {type(event).__name__}")
    return handler(state, event)


# ---------------------------------------------------------------------------
# Bootstrap handlers.


def _boot_commit(state: GmState) -> tuple[GmState, list[GmOutput]]:
    boot = state.boot
    assert boot is not None and boot.coordinator
    responders = tuple(m for m in state.static_members
                       if m.gid == state.me.gid or m.gid in boot.acks)
    view = ViewG(1, frozenset(responders))
    others = tuple(m for m in view.sorted_members() if m.gid != state.me.gid)
    state = _installed(state, view, Role.LEADER, state.me.gid)
    state = replace(state, boot=None)
    outputs: list[GmOutput] = [InstallView(view, Role.LEADER)]
    if others:
        outputs.append(SendBootCommit(view, others))
    return state, outputs


def _on_recv_prepare(state: GmState, event: RecvPrepare) -> tuple[GmState, list[GmOutput]]:
    if state.halted or state.view is not None:
        return state, [Ignored("prepare-after-install")]
    return state, [SendPrepareAck(event.sender)]


def _on_recv_prepare_ack(state: GmState, event: RecvPrepareAck) -> tuple[GmState, list[GmOutput]]:
    boot = state.boot
    if boot is None or not boot.coordinator or state.view is not None:
        return state, [Ignored("unexpected-prepare-ack")]
    acks = boot.acks | {event.sender.gid}
    state = replace(state, boot=BootState(True, acks))
    expected = {m.gid for m in state.static_members if m.gid != state.me.gid}
    if acks >= expected:
        return _boot_commit(state)
    return state, []


def _on_prepare_timeout(state: GmState, event: PrepareTimeout) -> tuple[GmState, list[GmOutput]]:
    boot = state.boot
    if boot is None or not boot.coordinator or state.view is not None:
        return state, [Ignored("stale-prepare-timer")]
    return _boot_commit(state)


def _on_recv_boot_commit(state: GmState, event: RecvBootCommit) -> tuple[GmState, list[GmOutput]]:
    if state.halted or state.view is not None:
        return state, [Ignored("commit-after-install")]
    me = event.view.by_address(state.me.address)
    if me is None:
        # excluded from the first view (our ack never made it); rejoin
        state = replace(state, halted=True, boot=None)
        return state, [Halt("excluded-at-bootstrap"), ScheduleRejoin()]
    rank = Role.PRINCE if front(event.view.gids(), me.gid) == event.sender_gid else Role.MEMBER
    state = _installed(state, event.view, rank, event.sender_gid)
    state = replace(state, boot=None)
    return state, [InstallView(event.view, rank)]


# ---------------------------------------------------------------------------
# Steady-state handlers.


def _installed(state: GmState, view: ViewG, rank: Role, leader_gid: int) -> GmState:
    me = view.by_address(state.me.address)
    assert me is not None
    watermark = max(state.gid_watermark, view.gids()[-1])
    return replace(state, me=me, view=view, rank=rank, leader_gid=leader_gid,
                   gid_watermark=watermark)


def _begin_view_change(state: GmState, members: frozenset[GMember],
                       prefix: list[GmOutput] | None = None) -> tuple[GmState, list[GmOutput]]:
    """Leader-side view bump: install locally, broadcast, open the ack round."""
    assert state.view is not None
    view = ViewG(state.view.view_id + 1, members)
    me = view.by_address(state.me.address)
    if me is None:
        raise GmError("leader attempted to install a view excluding itself")
    others = tuple(m for m in view.sorted_members() if m.gid != me.gid)
    state = _installed(state, view, Role.LEADER, me.gid)
    outputs: list[GmOutput] = list(prefix or [])
    outputs.append(InstallView(view, Role.LEADER))
    if others:
        state = replace(state, ack_round=AckRound(view.view_id, frozenset(m.gid for m in others)))
        outputs.append(SendNewViewG(view, others))
        outputs.append(StartAckTimer(view.view_id))
    else:
        state = replace(state, ack_round=None)
    return state, outputs


def on_succeeding_failure(state: GmState, event: SucceedingFailure) -> tuple[GmState, list[GmOutput]]:
    if state.halted or state.view is None:
        return state, [Ignored("halted-or-uninstalled")]
    monitored = front(state.view.gids(), state.me.gid)
    if monitored == state.me.gid:
        return state, [Ignored("singleton-ring")]
    target = state.view.member(monitored)
    survivors = frozenset(m for m in state.view.members if m.gid != monitored)
    if state.rank is Role.LEADER:
        return _begin_view_change(state, survivors)
    if state.rank is Role.PRINCE:
        # the prince watches the leader; promote and finish the removal
        state = replace(state, rank=Role.LEADER, leader_gid=state.me.gid)
        return _begin_view_change(state, survivors)
    leader = state.view.member(state.leader_gid) if state.leader_gid else None
    if leader is None:
        return state, [Ignored("no-known-leader")]
    return state, [SendCrashReport(leader, state.view.view_id, target)]


def on_ack_or_timeout(state: GmState, event: RecvAck | AckTimeout) -> tuple[GmState, list[GmOutput]]:
    """Acknowledgement collection plus the compensation rule: when the timer
    fires, every member that has not confirmed the broadcast view is removed
    and the shrunken view is rebroadcast, recursively, until consistent."""
    rnd = state.ack_round
    if isinstance(event, RecvAck):
        if rnd is None or event.view_id != rnd.view_id:
            return state, [Ignored("stale-ack")]
        if event.sender_gid not in rnd.pending:
            return state, [Ignored("unexpected-ack")]
        pending = rnd.pending - {event.sender_gid}
        if pending:
            return replace(state, ack_round=AckRound(rnd.view_id, pending)), []
        return replace(state, ack_round=None), []
    # AckTimeout
    if rnd is None or event.view_id != rnd.view_id:
        return state, [Ignored("stale-ack-timer")]
    assert state.view is not None
    if not rnd.pending:
        return replace(state, ack_round=None), []
    survivors = frozenset(m for m in state.view.members if m.gid not in rnd.pending)
    return _begin_view_change(state, survivors)


def on_recv_new_view(state: GmState, event: RecvNewViewG) -> tuple[GmState, list[GmOutput]]:
    if state.halted:
        return state, [Ignored("halted")]
    if state.view is not None and event.view.view_id <= state.view.view_id:
        return state, [Ignored("stale-view")]
    me = event.view.by_address(state.me.address)
    if me is None:
        # evicted: never install a view that excludes us
        state = replace(state, halted=True, rank=None, ack_round=None, probes=frozenset())
        if state.leaving:
            return state, [Halt("left")]
        return state, [Halt("evicted"), ScheduleRejoin()]
    rank = Role.PRINCE if front(event.view.gids(), me.gid) == event.sender_gid else Role.MEMBER
    state = _installed(state, event.view, rank, event.sender_gid)
    state = replace(state, ack_round=None, probes=frozenset())
    sender = event.view.member(event.sender_gid)
    return state, [InstallView(event.view, rank), SendAck(sender, event.view.view_id)]


def on_recv_crash_report(state: GmState, event: RecvCrashReport) -> tuple[GmState, list[GmOutput]]:
    if state.halted or state.view is None:
        return state, [Ignored("halted-or-uninstalled")]
    if state.rank is not Role.LEADER:
        return state, [Ignored("not-leader")]
    if event.view_id < state.view.view_id:
        return state, [SendCurrentVersion(event.sender, state.view.view_id)]
    if not state.view.has_gid(event.crasher.gid):
        return state, [Ignored("already-removed")]
    if event.crasher.gid == state.me.gid:
        return state, [Ignored("report-names-leader")]
    if event.crasher.gid in state.probes:
        return state, [Ignored("probe-pending")]
    state = replace(state, probes=state.probes | {event.crasher.gid})
    return state, [ProbeRequest(event.crasher)]


def on_probe_result(state: GmState, event: ProbeResult) -> tuple[GmState, list[GmOutput]]:
    if state.halted or state.view is None:
        return state, [Ignored("halted-or-uninstalled")]
    if event.member.gid not in state.probes:
        return state, [Ignored("no-probe-pending")]
    state = replace(state, probes=state.probes - {event.member.gid})
    if event.alive:
        return state, []
    if not state.view.has_gid(event.member.gid):
        return state, [Ignored("already-removed")]
    survivors = frozenset(m for m in state.view.members if m.gid != event.member.gid)
    return _begin_view_change(state, survivors)


def on_recv_joining(state: GmState, event: RecvJoining) -> tuple[GmState, list[GmOutput]]:
    if state.halted or state.view is None or state.rank is not Role.LEADER:
        return state, [Ignored("not-leader")]
    existing = state.view.by_address(event.address)
    if existing is not None:
        # duplicate admission request (a retry); re-send the current view
        return state, [SendNewViewG(state.view, (existing,)), Ignored("duplicate-join")]
    new_member = GMember(state.gid_watermark + 1, event.address)
    return _begin_view_change(state, state.view.members | {new_member})


def on_recv_rejoining(state: GmState, event: RecvRejoining) -> tuple[GmState, list[GmOutput]]:
    if state.halted or state.view is None or state.rank is not Role.LEADER:
        return state, [Ignored("not-leader")]
    if state.view.has_gid(event.member.gid):
        # The member is back before we ever removed it. Its reappearance
        # settles any pending liveness probe; just re-sync its view.
        outputs: list[GmOutput] = []
        if event.member.gid in state.probes:
            state = replace(state, probes=state.probes - {event.member.gid})
        outputs.append(SendNewViewG(state.view, (state.view.member(event.member.gid),)))
        outputs.append(Ignored("already-member"))
        return state, outputs
    return _begin_view_change(state, state.view.members | {event.member})


def on_recv_leaving_propose(state: GmState, event: RecvLeavingPropose) -> tuple[GmState, list[GmOutput]]:
    if state.halted or state.view is None:
        return state, [Ignored("halted-or-uninstalled")]
    if state.rank is Role.LEADER:
        if event.view_id < state.view.view_id:
            return state, [SendCurrentVersion(event.leaving, state.view.view_id)]
        if not state.view.has_gid(event.leaving.gid):
            return state, [Ignored("already-gone")]
        if event.leaving.gid == state.me.gid:
            return state, [Ignored("self-propose")]
        survivors = frozenset(m for m in state.view.members if m.gid != event.leaving.gid)
        return _begin_view_change(state, survivors)
    if (state.rank is Role.PRINCE and state.leader_gid == event.leaving.gid
            and event.view_id == state.view.view_id):
        # leader handoff: the leaving leader asked us to take over
        state = replace(state, rank=Role.LEADER, leader_gid=state.me.gid)
        survivors = frozenset(m for m in state.view.members if m.gid != event.leaving.gid)
        return _begin_view_change(state, survivors)
    return state, [Ignored("not-leader")]


def on_recv_current_version(state: GmState, event: RecvCurrentVersion) -> tuple[GmState, list[GmOutput]]:
    if state.halted:
        return state, [Ignored("halted")]
    local = state.view.view_id if state.view is not None else 0
    if local >= event.view_id:
        return state, []
    state = replace(state, halted=True, rank=None, ack_round=None, probes=frozenset())
    if state.leaving:
        return state, [Halt("left")]
    return state, [Halt("stale-version"), ScheduleRejoin()]


def self_leave(state: GmState) -> tuple[GmState, list[GmOutput]]:
    """Voluntarily leave the group. A plain member proposes to the leader;
    the leader hands the group to its prince first. The leaver halts once it
    observes a view that no longer contains it."""
    if state.halted or state.view is None:
        return state, [Ignored("halted-or-uninstalled")]
    state = replace(state, leaving=True)
    if len(state.view.members) == 1:
        state = replace(state, halted=True)
        return state, [Halt("left")]
    if state.rank is Role.LEADER:
        prince_gid = back(state.view.gids(), state.me.gid)
        target = state.view.member(prince_gid)
    else:
        assert state.leader_gid is not None
        target = state.view.member(state.leader_gid)
    return state, [SendLeavingPropose(target, state.view.view_id, state.me)]


_HANDLERS = {
    SucceedingFailure: on_succeeding_failure,
    RecvAck: on_ack_or_timeout,
    AckTimeout: on_ack_or_timeout,
    RecvNewViewG: on_recv_new_view,
    RecvCrashReport: on_recv_crash_report,
    ProbeResult: on_probe_result,
    RecvJoining: on_recv_joining,
    RecvRejoining: on_recv_rejoining,
    RecvLeavingPropose: on_recv_leaving_propose,
    RecvCurrentVersion: on_recv_current_version,
    RecvPrepare: _on_recv_prepare,
    RecvPrepareAck: _on_recv_prepare_ack,
    RecvBootCommit: _on_recv_boot_commit,
    PrepareTimeout: _on_prepare_timeout,
}

"""Unit tests for the membership state machine."""

import itertools

import pytest
from hypothesis import given, strategies as st

from groupsim import gm_core as gm
from groupsim.gm_core import (
    AckTimeout, GMember, GmError, GmState, Role, ViewG,
    RecvAck, RecvBootCommit, RecvCrashReport, RecvCurrentVersion, RecvJoining,
    RecvLeavingPropose, RecvNewViewG, RecvPrepare, RecvPrepareAck,
    RecvRejoining, ProbeResult, SucceedingFailure,
)


def member(gid):
    return GMember(gid, f"gsd:{gid}")


def view(view_id, *gids):
    return ViewG(view_id, frozenset(member(g) for g in gids))


def installed_state(view_id, gids, me, rank, leader=None):
    v = view(view_id, *gids)
    leader_gid = leader if leader is not None else min(gids)
    return GmState(me=member(me), view=v, rank=rank, leader_gid=leader_gid,
                   gid_watermark=max(gids))


def outs(outputs, cls):
    return [o for o in outputs if isinstance(o, cls)]


def first(outputs, cls):
    found = outs(outputs, cls)
    assert found, f"expected a {cls.__name__} in {outputs}"
    return found[0]


# ---------------------------------------------------------------------------
# front / back


def brute_front(members, g):
    # independent oracle: scan upward through gid space, wrapping once
    span = sorted(members)
    idx = span.index(g)
    return span[(idx + 1) % len(span)]


def test_front_spec_examples():
    assert gm.front({1, 2, 3, 4}, 2) == 3
    assert gm.front({1, 2, 3, 4}, 4) == 1
    assert gm.front({5}, 5) == 5
    assert gm.front({2, 4, 7}, 7) == 2


def test_front_exhaustive_against_oracle():
    universe = range(1, 7)
    for r in range(1, 7):
        for subset in itertools.combinations(universe, r):
            for g in subset:
                assert gm.front(set(subset), g) == brute_front(subset, g)


def test_back_inverts_front_exhaustively():
    universe = range(1, 7)
    for r in range(1, 7):
        for subset in itertools.combinations(universe, r):
            for g in subset:
                assert gm.front(subset, gm.back(subset, g)) == g


def test_front_domain_errors():
    with pytest.raises(GmError):
        gm.front({1, 2}, 3)
    with pytest.raises(GmError):
        gm.front(set(), 1)


@given(st.sets(st.integers(min_value=1, max_value=200), min_size=1, max_size=12))
def test_front_is_a_permutation(members):
    images = {gm.front(members, g) for g in members}
    assert images == set(members)


# ---------------------------------------------------------------------------
# types


def test_view_rejects_duplicate_gids():
    with pytest.raises(GmError):
        ViewG(1, frozenset({GMember(1, "a"), GMember(1, "b")}))


def test_view_rejects_empty_and_bad_ids():
    with pytest.raises(GmError):
        ViewG(0, frozenset({member(1)}))
    with pytest.raises(GmError):
        ViewG(1, frozenset())


def test_view_describe_is_sorted_and_stable():
    v = view(5, 3, 1, 2)
    assert v.describe() == "view_id=5 members=1:gsd:1,2:gsd:2,3:gsd:3"


# ---------------------------------------------------------------------------
# bootstrap


def test_bootstrap_coordinator_sends_prepare():
    statics = [member(1), member(2), member(3)]
    state, outputs = gm.bootstrap(statics, member(1))
    assert state.boot.coordinator
    prep = first(outputs, gm.SendPrepare)
    assert [m.gid for m in prep.to] == [2, 3]
    assert outs(outputs, gm.StartPrepareTimer)


def test_bootstrap_follower_waits():
    statics = [member(1), member(2)]
    state, outputs = gm.bootstrap(statics, member(2))
    assert not state.boot.coordinator
    assert outputs == []


def test_bootstrap_singleton_commits_immediately():
    state, outputs = gm.bootstrap([member(1)], member(1))
    inst = first(outputs, gm.InstallView)
    assert inst.view.view_id == 1 and inst.view.gids() == (1,)
    assert state.rank is Role.LEADER
    assert not outs(outputs, gm.SendBootCommit)


def test_bootstrap_all_acks_commit_early():
    statics = [member(1), member(2), member(3)]
    state, _ = gm.bootstrap(statics, member(1))
    state, outputs = gm.handle(state, RecvPrepareAck(member(2)))
    assert outputs == []
    state, outputs = gm.handle(state, RecvPrepareAck(member(3)))
    inst = first(outputs, gm.InstallView)
    assert inst.view.gids() == (1, 2, 3)
    commit = first(outputs, gm.SendBootCommit)
    assert [m.gid for m in commit.to] == [2, 3]
    assert state.rank is Role.LEADER and state.leader_gid == 1


def test_bootstrap_timeout_excludes_silent_member():
    statics = [member(1), member(2), member(3)]
    state, _ = gm.bootstrap(statics, member(1))
    state, _ = gm.handle(state, RecvPrepareAck(member(3)))
    state, outputs = gm.handle(state, gm.PrepareTimeout())
    inst = first(outputs, gm.InstallView)
    assert inst.view.gids() == (1, 3)


def test_bootstrap_follower_commit_sets_rank():
    statics = [member(1), member(2), member(3)]
    state, _ = gm.bootstrap(statics, member(3))
    state, outputs = gm.handle(state, RecvPrepare(member(1)))
    assert first(outputs, gm.SendPrepareAck).to.gid == 1
    state, outputs = gm.handle(state, RecvBootCommit(view(1, 1, 2, 3), 1))
    assert state.rank is Role.PRINCE  # front(3) == 1 == coordinator
    assert state.view.view_id == 1


# ---------------------------------------------------------------------------
# succeeding failure


def test_leader_removes_failed_succeeding():
    state = installed_state(7, [1, 2, 3], me=1, rank=Role.LEADER)
    state, outputs = gm.handle(state, SucceedingFailure())
    assert state.view.view_id == 8
    assert state.view.gids() == (1, 3)
    send = first(outputs, gm.SendNewViewG)
    assert [m.gid for m in send.to] == [3]
    assert first(outputs, gm.StartAckTimer).view_id == 8


def test_prince_promotes_on_leader_failure():
    state = installed_state(7, [1, 2, 3], me=3, rank=Role.PRINCE, leader=1)
    state, outputs = gm.handle(state, SucceedingFailure())
    assert state.rank is Role.LEADER
    assert state.leader_gid == 3
    assert state.view.view_id == 8
    assert state.view.gids() == (2, 3)
    assert outs(outputs, gm.SendNewViewG)


def test_member_reports_crash_to_leader():
    state = installed_state(7, [1, 2, 3], me=2, rank=Role.MEMBER, leader=1)
    state, outputs = gm.handle(state, SucceedingFailure())
    assert state.view.view_id == 7  # no local change
    report = first(outputs, gm.SendCrashReport)
    assert report.to.gid == 1
    assert report.view_id == 7
    assert report.crasher.gid == 3


def test_halted_ignores_failure_events():
    state = installed_state(7, [1, 2], me=1, rank=Role.LEADER)
    state = gm.GmState(**{**state.__dict__, "halted": True})
    state, outputs = gm.handle(state, SucceedingFailure())
    assert outs(outputs, gm.Ignored)


# ---------------------------------------------------------------------------
# new view installation


def test_install_newer_view_and_ack():
    state = installed_state(5, [1, 2, 3], me=2, rank=Role.MEMBER, leader=1)
    newv = view(6, 1, 2, 3, 4)
    state, outputs = gm.handle(state, RecvNewViewG(newv, 1))
    assert state.view == newv
    ack = first(outputs, gm.SendAck)
    assert ack.to.gid == 1 and ack.view_id == 6


def test_stale_view_ignored():
    state = installed_state(7, [1, 2], me=2, rank=Role.MEMBER, leader=1)
    state, outputs = gm.handle(state, RecvNewViewG(view(4, 1, 2), 1))
    assert state.view.view_id == 7
    assert outs(outputs, gm.Ignored)
    assert not outs(outputs, gm.SendAck)


def test_max_gid_becomes_prince():
    state = installed_state(5, [1, 2, 3], me=3, rank=Role.MEMBER, leader=1)
    state, _ = gm.handle(state, RecvNewViewG(view(6, 1, 2, 3), 1))
    assert state.rank is Role.PRINCE


def test_eviction_halts_and_schedules_rejoin():
    state = installed_state(5, [1, 2, 3], me=3, rank=Role.MEMBER, leader=1)
    state, outputs = gm.handle(state, RecvNewViewG(view(6, 1, 2), 1))
    assert state.halted
    assert first(outputs, gm.Halt).reason == "evicted"
    assert outs(outputs, gm.ScheduleRejoin)


def test_joiner_learns_its_gid_from_the_view():
    state, outputs = gm.begin_join(["gsd:1", "gsd:2"], "gsd:j1")
    assert first(outputs, gm.SendJoining).address == "gsd:j1"
    newv = ViewG(9, frozenset({member(1), member(2), GMember(3, "gsd:j1")}))
    state, outputs = gm.handle(state, RecvNewViewG(newv, 1))
    assert state.me.gid == 3
    assert state.rank is Role.PRINCE  # front(3) is 1, the sender
    assert first(outputs, gm.SendAck).view_id == 9


# ---------------------------------------------------------------------------
# acks and compensation


def ack_round_state():
    state = installed_state(8, [1, 2, 3], me=1, rank=Role.LEADER)
    state, _ = gm.handle(state, SucceedingFailure())  # removes 2, view 9 over {1,3}
    return state


def test_compensation_removes_non_ackers():
    state = installed_state(8, [1, 2, 3], me=1, rank=Role.LEADER)
    # view 9 broadcast over {1,3} after removing 2; 3 never acks
    state, _ = gm.handle(state, SucceedingFailure())
    assert state.ack_round.view_id == 9
    state, outputs = gm.handle(state, AckTimeout(9))
    assert state.view.view_id == 10
    assert state.view.gids() == (1,)
    assert not outs(outputs, gm.SendNewViewG)  # nobody left to tell
    assert state.ack_round is None


def test_all_acks_close_the_round():
    state = installed_state(8, [1, 2, 3, 4], me=1, rank=Role.LEADER)
    state, _ = gm.handle(state, SucceedingFailure())  # removes 2 -> view 9 {1,3,4}
    state, _ = gm.handle(state, RecvAck(3, 9))
    state, _ = gm.handle(state, RecvAck(4, 9))
    assert state.ack_round is None
    state, outputs = gm.handle(state, AckTimeout(9))
    assert state.view.view_id == 9
    assert outs(outputs, gm.Ignored)


def test_two_compensation_iterations():
    state = installed_state(8, [1, 2, 3, 4], me=1, rank=Role.LEADER)
    state, _ = gm.handle(state, SucceedingFailure())      # view 9 {1,3,4}
    state, _ = gm.handle(state, RecvAck(4, 9))
    state, _ = gm.handle(state, AckTimeout(9))            # 3 missing -> view 10 {1,4}
    assert state.view.view_id == 10 and state.view.gids() == (1, 4)
    state, _ = gm.handle(state, AckTimeout(10))           # 4 missing -> view 11 {1}
    assert state.view.view_id == 11 and state.view.gids() == (1,)


def test_stale_ack_does_not_credit_new_round():
    state = installed_state(8, [1, 2, 3, 4], me=1, rank=Role.LEADER)
    state, _ = gm.handle(state, SucceedingFailure())      # view 9
    state, outputs = gm.handle(state, RecvAck(3, 8))
    assert outs(outputs, gm.Ignored)
    assert state.ack_round.pending == frozenset({3, 4})


def test_ack_from_outside_view_ignored():
    state = ack_round_state()
    state, outputs = gm.handle(state, RecvAck(9, 9))
    assert outs(outputs, gm.Ignored)


# ---------------------------------------------------------------------------
# crash reports and probes


def test_fresh_report_triggers_probe_then_removal():
    state = installed_state(7, [1, 2, 3], me=1, rank=Role.LEADER)
    state, outputs = gm.handle(state, RecvCrashReport(7, member(2), member(3)))
    assert first(outputs, gm.ProbeRequest).member.gid == 3
    assert state.view.view_id == 7  # judgement pending
    state, outputs = gm.handle(state, ProbeResult(member(3), alive=False))
    assert state.view.view_id == 8
    assert state.view.gids() == (1, 2)


def test_stale_report_gets_current_version():
    state = installed_state(7, [1, 2, 3], me=1, rank=Role.LEADER)
    state, outputs = gm.handle(state, RecvCrashReport(4, member(2), member(3)))
    cv = first(outputs, gm.SendCurrentVersion)
    assert cv.view_id == 7 and cv.to.gid == 2
    assert state.view.view_id == 7


def test_probe_answered_alive_keeps_member():
    state = installed_state(7, [1, 2, 3], me=1, rank=Role.LEADER)
    state, _ = gm.handle(state, RecvCrashReport(7, member(2), member(3)))
    state, outputs = gm.handle(state, ProbeResult(member(3), alive=True))
    assert state.view.view_id == 7
    assert state.view.gids() == (1, 2, 3)
    assert not outs(outputs, gm.SendNewViewG)


def test_duplicate_report_keeps_single_probe():
    state = installed_state(7, [1, 2, 3], me=1, rank=Role.LEADER)
    state, _ = gm.handle(state, RecvCrashReport(7, member(2), member(3)))
    state, outputs = gm.handle(state, RecvCrashReport(7, member(2), member(3)))
    assert not outs(outputs, gm.ProbeRequest)


def test_non_leader_drops_crash_report():
    state = installed_state(7, [1, 2, 3], me=2, rank=Role.MEMBER, leader=1)
    state, outputs = gm.handle(state, RecvCrashReport(7, member(3), member(1)))
    assert outs(outputs, gm.Ignored)


# ---------------------------------------------------------------------------
# joining / rejoining


def test_leader_admits_joiner_with_next_gid():
    state = installed_state(5, [1, 2, 3], me=1, rank=Role.LEADER)
    state, outputs = gm.handle(state, RecvJoining("gsd:j1"))
    assert state.view.view_id == 6
    assert state.view.gids() == (1, 2, 3, 4)
    send = first(outputs, gm.SendNewViewG)
    assert [m.gid for m in send.to] == [2, 3, 4]


def test_member_ignores_joining():
    state = installed_state(5, [1, 2, 3], me=2, rank=Role.MEMBER, leader=1)
    state, outputs = gm.handle(state, RecvJoining("gsd:j1"))
    assert state.view.view_id == 5
    assert outs(outputs, gm.Ignored)


def test_singleton_leader_admits_joiner():
    state = installed_state(1, [1], me=1, rank=Role.LEADER)
    state, _ = gm.handle(state, RecvJoining("gsd:j1"))
    assert state.view.view_id == 2
    assert state.view.gids() == (1, 2)


def test_gids_never_reused_after_max_leaves():
    state = installed_state(5, [1, 2, 3], me=1, rank=Role.LEADER)
    state, _ = gm.handle(state, RecvLeavingPropose(5, member(3)))
    assert state.view.gids() == (1, 2)
    state, _ = gm.handle(state, RecvJoining("gsd:new"))
    assert state.view.gids() == (1, 2, 4)  # 3 is retired, not recycled


def test_rejoining_restores_preserved_gid():
    state = installed_state(8, [1, 2], me=1, rank=Role.LEADER, leader=1)
    state, outputs = gm.handle(state, RecvRejoining(member(3)))
    assert state.view.view_id == 9
    assert state.view.gids() == (1, 2, 3)


def test_rejoining_when_already_member_resyncs_and_cancels_probe():
    state = installed_state(8, [1, 2, 3], me=1, rank=Role.LEADER)
    state, _ = gm.handle(state, RecvCrashReport(8, member(2), member(3)))
    assert 3 in state.probes
    state, outputs = gm.handle(state, RecvRejoining(member(3)))
    assert state.view.view_id == 8  # no membership change
    assert 3 not in state.probes
    resend = first(outputs, gm.SendNewViewG)
    assert [m.gid for m in resend.to] == [3]
    # the later probe verdict must now be inert
    state, outputs = gm.handle(state, ProbeResult(member(3), alive=False))
    assert state.view.view_id == 8
    assert outs(outputs, gm.Ignored)


def test_non_leader_ignores_rejoining():
    state = installed_state(8, [1, 2], me=2, rank=Role.MEMBER, leader=1)
    state, outputs = gm.handle(state, RecvRejoining(member(3)))
    assert outs(outputs, gm.Ignored)


# ---------------------------------------------------------------------------
# leaving


def test_leader_removes_leaving_member():
    state = installed_state(6, [1, 2, 3], me=1, rank=Role.LEADER)
    state, _ = gm.handle(state, RecvLeavingPropose(6, member(3)))
    assert state.view.view_id == 7
    assert state.view.gids() == (1, 2)


def test_stale_leaving_propose_gets_version():
    state = installed_state(6, [1, 2, 3], me=1, rank=Role.LEADER)
    state, outputs = gm.handle(state, RecvLeavingPropose(2, member(3)))
    assert first(outputs, gm.SendCurrentVersion).view_id == 6
    assert state.view.view_id == 6


def test_leaving_unknown_member_is_noop():
    state = installed_state(6, [1, 2], me=1, rank=Role.LEADER)
    state, outputs = gm.handle(state, RecvLeavingPropose(6, member(9)))
    assert outs(outputs, gm.Ignored)


def test_member_self_leave_targets_leader():
    state = installed_state(6, [1, 2, 3], me=3, rank=Role.PRINCE, leader=1)
    state, outputs = gm.self_leave(state)
    prop = first(outputs, gm.SendLeavingPropose)
    assert prop.to.gid == 1 and prop.member.gid == 3
    assert state.leaving


def test_leader_self_leave_hands_off_to_prince():
    state = installed_state(6, [1, 2, 3], me=1, rank=Role.LEADER)
    state, outputs = gm.self_leave(state)
    prop = first(outputs, gm.SendLeavingPropose)
    assert prop.to.gid == 3  # the prince
    # prince side: promotes and removes the old leader
    prince = installed_state(6, [1, 2, 3], me=3, rank=Role.PRINCE, leader=1)
    prince, outputs = gm.handle(prince, RecvLeavingPropose(6, member(1)))
    assert prince.rank is Role.LEADER
    assert prince.view.view_id == 7
    assert prince.view.gids() == (2, 3)


def test_singleton_self_leave_halts():
    state = installed_state(6, [1], me=1, rank=Role.LEADER)
    state, outputs = gm.self_leave(state)
    assert state.halted
    assert first(outputs, gm.Halt).reason == "left"


def test_leave_of_halted_member_is_noop():
    state = installed_state(6, [1, 2], me=2, rank=Role.MEMBER, leader=1)
    state = gm.GmState(**{**state.__dict__, "halted": True})
    state, outputs = gm.self_leave(state)
    assert outs(outputs, gm.Ignored)


def test_leaver_halts_quietly_on_current_version():
    state = installed_state(6, [1, 2, 3], me=3, rank=Role.MEMBER, leader=1)
    state, _ = gm.self_leave(state)
    state, outputs = gm.handle(state, RecvCurrentVersion(7))
    assert state.halted
    assert first(outputs, gm.Halt).reason == "left"
    assert not outs(outputs, gm.ScheduleRejoin)


# ---------------------------------------------------------------------------
# current version


def test_stale_member_halts_then_rejoins():
    state = installed_state(3, [1, 2, 3], me=3, rank=Role.MEMBER, leader=1)
    state, outputs = gm.handle(state, RecvCurrentVersion(7))
    assert state.halted
    assert outs(outputs, gm.ScheduleRejoin)


def test_equal_version_is_noop():
    state = installed_state(7, [1, 2], me=2, rank=Role.MEMBER, leader=1)
    state, outputs = gm.handle(state, RecvCurrentVersion(7))
    assert not state.halted
    assert outputs == []


def test_rejoin_reset_allows_reinstallation():
    state = installed_state(3, [1, 2, 3], me=3, rank=Role.MEMBER, leader=1)
    state, _ = gm.handle(state, RecvCurrentVersion(7))
    state = gm.reset_for_rejoin(state)
    assert not state.halted
    state, outputs = gm.handle(state, RecvNewViewG(view(8, 1, 2, 3), 1))
    assert state.view.view_id == 8
    assert state.me.gid == 3  # gid preserved across the rejoin


# ---------------------------------------------------------------------------
# handler purity


@st.composite
def random_state_and_event(draw):
    gids = draw(st.sets(st.integers(min_value=1, max_value=9), min_size=2, max_size=5))
    gids = sorted(gids)
    me = draw(st.sampled_from(gids))
    vid = draw(st.integers(min_value=1, max_value=12))
    rank = draw(st.sampled_from([Role.LEADER, Role.PRINCE, Role.MEMBER]))
    leader = me if rank is Role.LEADER else min(gids)
    state = installed_state(vid, gids, me=me, rank=rank, leader=leader)
    other = draw(st.sampled_from(gids))
    events = [
        SucceedingFailure(),
        RecvAck(other, vid),
        RecvCrashReport(draw(st.integers(min_value=1, max_value=vid)), member(other), member(other)),
        RecvNewViewG(view(draw(st.integers(min_value=1, max_value=14)), *gids), leader),
        RecvJoining("gsd:x"),
        RecvRejoining(member(11)),
        RecvLeavingPropose(vid, member(other)),
        RecvCurrentVersion(draw(st.integers(min_value=1, max_value=14))),
        AckTimeout(vid),
        ProbeResult(member(other), draw(st.booleans())),
    ]
    return state, draw(st.sampled_from(events))


@given(random_state_and_event())
def test_handlers_are_pure(case):
    state, event = case
    r1 = gm.handle(state, event)
    r2 = gm.handle(state, event)
    assert r1 == r2

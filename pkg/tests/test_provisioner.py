"""Unit tests for vid arithmetic, lifecycle rules, placement and the WAL."""

import itertools

import pytest
from hypothesis import given, strategies as st

from groupsim.provisioner import (
    IntentLog, IntentLogRecord, Placement, PlacementConfig, ProvisionError,
    TxPhase, VmState, apply_vm_op, canonical_op, decode_nid, decode_vid,
    encode_vid, gid_of_vid, nid_for, node_of_vid, plan_create,
)

CFG = PlacementConfig(256, 16)
SMALL = PlacementConfig(16, 8)


def test_first_vid_is_one():
    assert encode_vid(1, 0, 0, CFG) == 1
    assert nid_for(1, 0, CFG) == 1


def test_round_trip_exhaustive_small_config():
    for gid in range(1, 4):
        for idx in range(SMALL.max_nodes_per_partition):
            for slot in range(SMALL.max_vms_per_node):
                vid = encode_vid(gid, idx, slot, SMALL)
                assert decode_vid(vid, SMALL) == (gid, idx, slot)
                assert node_of_vid(vid, SMALL) == nid_for(gid, idx, SMALL)
                assert decode_nid(nid_for(gid, idx, SMALL), SMALL) == (gid, idx)


def test_injectivity_brute_force_first_100_vids():
    # enumerate triples in vid order and require a dense 1..100 mapping
    seen = {}
    for gid, idx, slot in itertools.product(range(1, 3), range(CFG.max_nodes_per_partition),
                                            range(CFG.max_vms_per_node)):
        vid = encode_vid(gid, idx, slot, CFG)
        assert vid not in seen
        seen[vid] = (gid, idx, slot)
        if len(seen) >= 100:
            break
    assert sorted(seen) == list(range(1, 101))


def test_routing_gid_selects_manager():
    vid = encode_vid(3, 5, 2, CFG)
    assert gid_of_vid(vid, CFG) == 3


def test_out_of_range_rejected():
    with pytest.raises(ProvisionError):
        encode_vid(0, 0, 0, CFG)
    with pytest.raises(ProvisionError):
        encode_vid(1, CFG.max_nodes_per_partition, 0, CFG)
    with pytest.raises(ProvisionError):
        encode_vid(1, 0, CFG.max_vms_per_node, CFG)
    with pytest.raises(ProvisionError):
        decode_vid(0, CFG)
    with pytest.raises(ProvisionError):
        PlacementConfig(0, 4)


@given(st.integers(min_value=1, max_value=500), st.integers(min_value=0, max_value=255),
       st.integers(min_value=0, max_value=15))
def test_round_trip_property(gid, idx, slot):
    assert decode_vid(encode_vid(gid, idx, slot, CFG), CFG) == (gid, idx, slot)


# ---------------------------------------------------------------------------
# lifecycle


def test_lifecycle_table():
    assert apply_vm_op(VmState.RUNNING, "suspend") is VmState.SUSPENDED
    assert apply_vm_op(VmState.SUSPENDED, "resume") is VmState.RUNNING
    assert apply_vm_op(VmState.RUNNING, "shutdown") is VmState.HALTED
    assert apply_vm_op(VmState.HALTED, "start") is VmState.RUNNING
    assert apply_vm_op(VmState.RUNNING, "reboot") is VmState.RUNNING
    assert apply_vm_op(VmState.RUNNING, "resize") is VmState.RUNNING


def test_hung_is_suspend():
    assert canonical_op("hung") == "suspend"
    assert apply_vm_op(VmState.RUNNING, "hung") is VmState.SUSPENDED


def test_invalid_transitions_rejected():
    with pytest.raises(ProvisionError):
        apply_vm_op(VmState.RUNNING, "resume")
    with pytest.raises(ProvisionError):
        apply_vm_op(VmState.HALTED, "resume")
    with pytest.raises(ProvisionError):
        apply_vm_op(VmState.CRASHED, "start")
    with pytest.raises(ProvisionError):
        apply_vm_op(VmState.RUNNING, "explode")


# ---------------------------------------------------------------------------
# placement


def nodes(gid, states):
    return {nid_for(gid, i, SMALL): s for i, s in enumerate(states)}


def test_auto_placement_first_fit():
    view_n = nodes(1, ["running", "running"])
    got = plan_create([None, None, None], view_n, set(), 1, SMALL)
    assert [(p.node_index, p.slot) for p in got] == [(0, 0), (0, 1), (0, 2)]
    assert all(decode_vid(p.vid, SMALL) == (1, p.node_index, p.slot) for p in got)


def test_auto_placement_skips_full_and_crashed_nodes():
    view_n = nodes(1, ["crashed", "running"])
    occupied = {encode_vid(1, 1, s, SMALL) for s in range(SMALL.max_vms_per_node - 1)}
    got = plan_create([None], view_n, occupied, 1, SMALL)
    assert (got[0].node_index, got[0].slot) == (1, SMALL.max_vms_per_node - 1)
    with pytest.raises(ProvisionError):
        plan_create([None, None], view_n, occupied, 1, SMALL)


def test_explicit_placement_validated():
    view_n = nodes(1, ["running", "crashed"])
    got = plan_create([0], view_n, set(), 1, SMALL)
    assert got[0].nid == nid_for(1, 0, SMALL)
    with pytest.raises(ProvisionError):
        plan_create([1], view_n, set(), 1, SMALL)  # crashed node
    with pytest.raises(ProvisionError):
        plan_create([7], view_n, set(), 1, SMALL)  # not in the partition


def test_empty_batch_plans_nothing():
    assert plan_create([], nodes(1, ["running"]), set(), 1, SMALL) == []


def test_slots_reused_after_destroy():
    view_n = nodes(1, ["running"])
    first = plan_create([None], view_n, set(), 1, SMALL)[0]
    again = plan_create([None], view_n, set(), 1, SMALL)[0]
    assert first.vid == again.vid  # freed slot comes back


# ---------------------------------------------------------------------------
# intent log


def rec(tx, phase, vids=(1, 2), op="create"):
    return IntentLogRecord(tx, op, tuple(vids), phase)


def test_open_transactions_tracks_lifecycle():
    log = IntentLog({})
    log.append(rec("t1", TxPhase.BEGUN))
    log.append(rec("t2", TxPhase.BEGUN, vids=(5,)))
    log.append(rec("t1", TxPhase.APPLIED, vids=(1,)))
    log.append(rec("t1", TxPhase.COMMITTED))
    assert log.open_transactions() == {"t2": ("create", (5,))}
    log.append(rec("t2", TxPhase.ABORTED, vids=(5,)))
    assert log.open_transactions() == {}


def test_aborted_vids_survive_for_cleanup():
    log = IntentLog({})
    log.append(rec("t1", TxPhase.BEGUN, vids=(1, 2, 3)))
    log.append(rec("t1", TxPhase.ABORTED, vids=(1, 2, 3)))
    assert log.aborted_vids() == {1, 2, 3}
    # a later successful transaction may legitimately reuse the slots
    log.append(rec("t2", TxPhase.BEGUN, vids=(1,)))
    log.append(rec("t2", TxPhase.COMMITTED, vids=(1,)))
    assert log.aborted_vids() == {2, 3}


def test_log_is_durable_through_the_cell():
    cell = {}
    IntentLog(cell).append(rec("t1", TxPhase.BEGUN))
    # a restarted process opens the same cell and sees the history
    log = IntentLog(cell)
    assert log.open_transactions() == {"t1": ("create", (1, 2))}

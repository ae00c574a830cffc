"""Unit tests for partition view maintenance and subscriptions."""

from groupsim.partition_mgmt import (
    ClusterView, Delta, NodeState, PartitionSnapshot, Subscription,
    SubscriptionRegistry, on_nd_timeout, on_node_leave, on_vm_report,
    vms_on_node,
)
from groupsim.provisioner import PlacementConfig, VmState, encode_vid, nid_for

CFG = PlacementConfig(max_nodes_per_partition=16, max_vms_per_node=8)

R = NodeState.RUNNING
C = NodeState.CRASHED


def make_views(gid=1, nodes=2, vms_per_node=2):
    view_n = {}
    view_v = {}
    for idx in range(nodes):
        view_n[nid_for(gid, idx, CFG)] = R
        for slot in range(vms_per_node):
            view_v[encode_vid(gid, idx, slot, CFG)] = VmState.RUNNING
    return view_n, view_v


def test_node_crash_cascades_to_vms():
    view_n, view_v = make_views()
    nid = nid_for(1, 0, CFG)
    hosted = vms_on_node(view_v, nid, CFG)
    assert len(hosted) == 2
    new_n, new_v, deltas = on_nd_timeout(view_n, view_v, nid, CFG)
    assert new_n[nid] is C
    assert all(new_v[v] is VmState.CRASHED for v in hosted)
    # one batch: the node plus each hosted VM
    assert [d.token() for d in deltas] == (
        [f"node:{nid}:crashed"] + [f"vm:{v}:crashed" for v in hosted])
    # other node untouched
    other = nid_for(1, 1, CFG)
    assert new_n[other] is R


def test_node_crash_without_vms_changes_only_node_view():
    view_n, view_v = make_views(vms_per_node=0)
    nid = nid_for(1, 1, CFG)
    new_n, new_v, deltas = on_nd_timeout(view_n, view_v, nid, CFG)
    assert new_v == view_v
    assert [d.kind for d in deltas] == ["node"]


def test_node_crash_is_idempotent():
    view_n, view_v = make_views()
    nid = nid_for(1, 0, CFG)
    n1, v1, d1 = on_nd_timeout(view_n, view_v, nid, CFG)
    n2, v2, d2 = on_nd_timeout(n1, v1, nid, CFG)
    assert (n1, v1) == (n2, v2)
    assert d1 and d2 == []


def test_unknown_nid_is_noop():
    view_n, view_v = make_views()
    n1, v1, d = on_nd_timeout(view_n, view_v, 999, CFG)
    assert n1 == view_n and v1 == view_v and d == []


def test_node_leave_removes_hosted_vms():
    view_n, view_v = make_views()
    nid = nid_for(1, 0, CFG)
    hosted = vms_on_node(view_v, nid, CFG)
    new_n, new_v, deltas = on_node_leave(view_n, view_v, nid, CFG)
    assert nid not in new_n
    assert all(v not in new_v for v in hosted)
    assert deltas[0].token() == f"node:{nid}:removed"
    assert len(deltas) == 3


def test_node_leave_without_vms():
    view_n, view_v = make_views(vms_per_node=0)
    nid = nid_for(1, 0, CFG)
    new_n, new_v, _ = on_node_leave(view_n, view_v, nid, CFG)
    assert new_v == view_v and nid not in new_n


def test_vm_report_updates_and_notifies():
    _, view_v = make_views()
    vid = next(iter(view_v))
    new_v, deltas = on_vm_report(view_v, vid, VmState.SUSPENDED)
    assert new_v[vid] is VmState.SUSPENDED
    assert [d.token() for d in deltas] == [f"vm:{vid}:suspended"]


def test_duplicate_vm_report_is_silent():
    _, view_v = make_views()
    vid = next(iter(view_v))
    new_v, deltas = on_vm_report(view_v, vid, VmState.RUNNING)
    assert deltas == []
    assert new_v is view_v


def test_unknown_vid_report_is_noop():
    _, view_v = make_views()
    new_v, deltas = on_vm_report(view_v, 10_000, VmState.CRASHED)
    assert new_v == view_v and deltas == []


def test_cluster_view_digest_is_content_addressed():
    n1, v1 = make_views(gid=1)
    n2, v2 = make_views(gid=2)
    snap_a = PartitionSnapshot.capture("gsd:1", 1, n1, v1)
    snap_b = PartitionSnapshot.capture("gsd:2", 2, n2, v2)
    cv1 = ClusterView.assemble(5, [snap_a, snap_b])
    cv2 = ClusterView.assemble(5, [snap_b, snap_a])  # order must not matter
    assert cv1.digest() == cv2.digest()
    assert cv1.node_count() == 4 and cv1.vm_count() == 8
    crashed_n, crashed_v, _ = on_nd_timeout(n1, v1, nid_for(1, 0, CFG), CFG)
    cv3 = ClusterView.assemble(5, [PartitionSnapshot.capture("gsd:1", 1, crashed_n, crashed_v), snap_b])
    assert cv3.digest() != cv1.digest()
    cv4 = ClusterView.assemble(6, [snap_a, snap_b])  # stamp is part of identity
    assert cv4.digest() != cv1.digest()


def test_snapshots_are_value_copies():
    view_n, view_v = make_views()
    snap = PartitionSnapshot.capture("gsd:1", 1, view_n, view_v)
    view_n[nid_for(1, 0, CFG)] = C
    assert snap.nodes[0].state is R


def test_subscription_filtering_and_replacement():
    reg = SubscriptionRegistry()
    reg.subscribe(Subscription("c1", "vms", "client:1"))
    reg.subscribe(Subscription("c2", "nodes", "client:2"))
    reg.subscribe(Subscription("c3", "both", "client:3"))
    batch = [Delta("node", 7, "crashed"), Delta("vm", 70, "crashed"), Delta("vm", 71, "crashed")]
    deliveries = reg.deliveries(batch)
    assert [(ep, [d.token() for d in ds]) for ep, ds in deliveries] == [
        ("client:1", ["vm:70:crashed", "vm:71:crashed"]),
        ("client:2", ["node:7:crashed"]),
        ("client:3", ["node:7:crashed", "vm:70:crashed", "vm:71:crashed"]),
    ]
    # re-subscribing replaces the old filter
    reg.subscribe(Subscription("c1", "nodes", "client:1"))
    assert len(reg) == 3
    deliveries = reg.deliveries([Delta("vm", 70, "running")])
    assert [ep for ep, _ in deliveries] == ["client:3"]


def test_unsubscribed_client_gets_nothing():
    reg = SubscriptionRegistry()
    reg.subscribe(Subscription("c1", "both", "client:1"))
    reg.unsubscribe("c1")
    assert reg.deliveries([Delta("vm", 1, "crashed")]) == []


def test_empty_batch_delivers_nothing():
    reg = SubscriptionRegistry()
    reg.subscribe(Subscription("c1", "both", "client:1"))
    assert reg.deliveries([]) == []

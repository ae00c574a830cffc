"""Per-partition node and VM views, cascade rules, and cluster aggregation.

Each partition's manager owns a node view and a VM view. Status changes
cascade downward: a crashed node crashes every VM it hosts, a departing node
takes its VM entries with it. The cluster-wide picture is assembled on demand
by fanning one query out to every other group member, so its cost depends
only on the number of partitions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

from .provisioner import PlacementConfig, VmState, node_of_vid


class NodeState(Enum):
    RUNNING = "running"
    CRASHED = "crashed"


@dataclass(frozen=True)
class NMember:
    nid: int
    state: NodeState


@dataclass(frozen=True)
class VMember:
    vid: int
    state: VmState


@dataclass(frozen=True)
class Delta:
    """One observable view change; "removed" means the entry left the view."""

    kind: str  # "node" | "vm"
    ident: int
    state: str

    def token(self) -> str:
        return f"{self.kind}:{self.ident}:{self.state}"


def vms_on_node(view_v: dict[int, VmState], nid: int, cfg: PlacementConfig) -> list[int]:
    return sorted(v for v in view_v if node_of_vid(v, cfg) == nid)


def on_nd_timeout(view_n: dict[int, NodeState], view_v: dict[int, VmState],
                  nid: int, cfg: PlacementConfig
                  ) -> tuple[dict[int, NodeState], dict[int, VmState], list[Delta]]:
    """A node stopped heartbeating: mark it crashed and cascade to its VMs.
    Replaying the event for an already-crashed node changes nothing."""
    if nid not in view_n:
        return view_n, view_v, []
    new_n = dict(view_n)
    new_v = dict(view_v)
    deltas: list[Delta] = []
    if new_n[nid] is not NodeState.CRASHED:
        new_n[nid] = NodeState.CRASHED
        deltas.append(Delta("node", nid, NodeState.CRASHED.value))
    for vid in vms_on_node(new_v, nid, cfg):
        if new_v[vid] is not VmState.CRASHED:
            new_v[vid] = VmState.CRASHED
            deltas.append(Delta("vm", vid, VmState.CRASHED.value))
    return new_n, new_v, deltas


def on_node_leave(view_n: dict[int, NodeState], view_v: dict[int, VmState],
                  nid: int, cfg: PlacementConfig
                  ) -> tuple[dict[int, NodeState], dict[int, VmState], list[Delta]]:
    """A node departed on purpose: drop it and every VM entry it hosted."""
    if nid not in view_n:
        return view_n, view_v, []
    new_n = dict(view_n)
    new_v = dict(view_v)
    del new_n[nid]
    deltas = [Delta("node", nid, "removed")]
    for vid in vms_on_node(new_v, nid, cfg):
        del new_v[vid]
        deltas.append(Delta("vm", vid, "removed"))
    return new_n, new_v, deltas


def on_vm_report(view_v: dict[int, VmState], vid: int, state: VmState
                 ) -> tuple[dict[int, VmState], list[Delta]]:
    """A node daemon reported a VM status; duplicates are dropped silently."""
    if vid not in view_v or view_v[vid] is state:
        return view_v, []
    new_v = dict(view_v)
    new_v[vid] = state
    return new_v, [Delta("vm", vid, state.value)]


@dataclass(frozen=True)
class PartitionSnapshot:
    """Value copy of one partition's views, safe to ship across partitions."""

    label: str
    manager_gid: int
    nodes: tuple[NMember, ...]
    vms: tuple[VMember, ...]

    @classmethod
    def capture(cls, label: str, manager_gid: int,
                view_n: dict[int, NodeState], view_v: dict[int, VmState]) -> "PartitionSnapshot":
        return cls(label, manager_gid,
                   tuple(NMember(n, view_n[n]) for n in sorted(view_n)),
                   tuple(VMember(v, view_v[v]) for v in sorted(view_v)))

    def canonical(self) -> str:
        nodes = ",".join(f"{m.nid}:{m.state.value}" for m in self.nodes)
        vms = ",".join(f"{m.vid}:{m.state.value}" for m in self.vms)
        return f"{self.label}|nodes={nodes}|vms={vms}"


@dataclass(frozen=True)
class ClusterView:
    """Cluster-wide snapshot, stamped with the group view id used for the
    fan-out that produced it."""

    stamp_view_id: int
    partitions: tuple[PartitionSnapshot, ...]

    @classmethod
    def assemble(cls, stamp_view_id: int, parts: list[PartitionSnapshot]) -> "ClusterView":
        ordered = tuple(sorted(parts, key=lambda p: p.label))
        return cls(stamp_view_id, ordered)

    def node_count(self) -> int:
        return sum(len(p.nodes) for p in self.partitions)

    def vm_count(self) -> int:
        return sum(len(p.vms) for p in self.partitions)

    def digest(self) -> str:
        body = f"stamp={self.stamp_view_id};" + ";".join(p.canonical() for p in self.partitions)
        return hashlib.sha256(body.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Subscription:
    client_id: str
    filter: str  # "nodes" | "vms" | "both"
    endpoint: str

    def matches(self, delta: Delta) -> bool:
        if self.filter == "both":
            return True
        return (self.filter == "nodes") == (delta.kind == "node")


class SubscriptionRegistry:
    """At most one registration per client id; re-subscribing replaces the
    earlier filter."""

    def __init__(self) -> None:
        self._subs: dict[str, Subscription] = {}

    def subscribe(self, sub: Subscription) -> None:
        if sub.filter not in ("nodes", "vms", "both"):
            raise ValueError(f"bad subscription filter {sub.filter!r}")
        self._subs[sub.client_id] = sub

    def unsubscribe(self, client_id: str) -> None:
        self._subs.pop(client_id, None)

    def __len__(self) -> int:
        return len(self._subs)

    def deliveries(self, batch: list[Delta]) -> list[tuple[str, list[Delta]]]:
        """One delivery per subscriber whose filter matches anything in the
        batch, in registration order; empty batches deliver nothing."""
        out = []
        for sub in self._subs.values():
            matched = [d for d in batch if sub.matches(d)]
            if matched:
                out.append((sub.endpoint, matched))
        return out

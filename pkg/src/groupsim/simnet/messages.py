"""The closed set of protocol messages exchanged between daemons.

Every message renders its payload as stable ``k=v`` tokens for the trace;
collections are sorted so reruns emit identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..gm_core import GMember, ViewG
from ..partition_mgmt import Delta, PartitionSnapshot


def _members(view: ViewG) -> str:
    return ",".join(f"{m.gid}:{m.address}" for m in view.sorted_members())


def _vids(vids) -> str:
    return ",".join(str(v) for v in vids)


@dataclass(frozen=True)
class Heartbeat:
    kind_tag: str        # "ring" | "nd" | "vmd"
    ident: int           # gid / nid / vid
    view_id: int = 0     # sender's installed group view (ring only)
    kind = "Heartbeat"

    def fields(self) -> str:
        return f"hb={self.kind_tag} id={self.ident} view_id={self.view_id}"


@dataclass(frozen=True)
class Prepare:
    sender_gid: int
    kind = "Prepare"

    def fields(self) -> str:
        return f"gid={self.sender_gid}"


@dataclass(frozen=True)
class PrepareAck:
    sender_gid: int
    kind = "PrepareAck"

    def fields(self) -> str:
        return f"gid={self.sender_gid}"


@dataclass(frozen=True)
class BootCommit:
    view: ViewG
    sender_gid: int
    kind = "BootCommit"

    def fields(self) -> str:
        return f"view_id={self.view.view_id} members={_members(self.view)}"


@dataclass(frozen=True)
class NewViewG:
    view: ViewG
    sender_gid: int
    kind = "NewViewG"

    def fields(self) -> str:
        return f"view_id={self.view.view_id} members={_members(self.view)}"


@dataclass(frozen=True)
class Ack:
    view_id: int
    sender_gid: int
    kind = "Ack"

    def fields(self) -> str:
        return f"view_id={self.view_id} gid={self.sender_gid}"


@dataclass(frozen=True)
class CrashReport:
    view_id: int
    sender: GMember
    crasher: GMember
    kind = "CrashReport"

    def fields(self) -> str:
        return f"view_id={self.view_id} sender={self.sender.gid} crasher={self.crasher.gid}"


@dataclass(frozen=True)
class Joining:
    address: str
    kind = "Joining"

    def fields(self) -> str:
        return f"address={self.address}"


@dataclass(frozen=True)
class Rejoining:
    member: GMember
    kind = "Rejoining"

    def fields(self) -> str:
        return f"gid={self.member.gid} address={self.member.address}"


@dataclass(frozen=True)
class LeavingPropose:
    view_id: int
    member: GMember
    kind = "LeavingPropose"

    def fields(self) -> str:
        return f"view_id={self.view_id} gid={self.member.gid}"


@dataclass(frozen=True)
class CurrentVersion:
    view_id: int
    kind = "CurrentVersion"

    def fields(self) -> str:
        return f"view_id={self.view_id}"


@dataclass(frozen=True)
class Probe:
    gid: int
    kind = "Probe"

    def fields(self) -> str:
        return f"gid={self.gid}"


@dataclass(frozen=True)
class ProbeReply:
    gid: int
    kind = "ProbeReply"

    def fields(self) -> str:
        return f"gid={self.gid}"


# -- partition hierarchy -----------------------------------------------------


@dataclass(frozen=True)
class Register:
    nid: int
    vms: tuple[tuple[int, str], ...]   # (vid, state) pairs, sorted
    kind = "Register"

    def fields(self) -> str:
        vms = ",".join(f"{v}:{s}" for v, s in self.vms)
        return f"nid={self.nid} vms={vms}"


@dataclass(frozen=True)
class NodeLeave:
    nid: int
    kind = "NodeLeave"

    def fields(self) -> str:
        return f"nid={self.nid}"


@dataclass(frozen=True)
class Adopt:
    parent: str
    label: str
    kind = "Adopt"

    def fields(self) -> str:
        return f"parent={self.parent} label={self.label}"


@dataclass(frozen=True)
class VmStateReport:
    vid: int
    state: str
    kind = "VmStateReport"

    def fields(self) -> str:
        return f"vid={self.vid} state={self.state}"


@dataclass(frozen=True)
class CreateVm:
    tx: str
    vid: int
    kind = "CreateVm"

    def fields(self) -> str:
        return f"tx={self.tx} vid={self.vid}"


@dataclass(frozen=True)
class VmCreated:
    tx: str
    vid: int
    kind = "VmCreated"

    def fields(self) -> str:
        return f"tx={self.tx} vid={self.vid}"


@dataclass(frozen=True)
class DestroyVm:
    vid: int
    tx: str = ""
    kind = "DestroyVm"

    def fields(self) -> str:
        return f"tx={self.tx} vid={self.vid}"


@dataclass(frozen=True)
class VmDestroyed:
    vid: int
    existed: bool
    tx: str = ""
    kind = "VmDestroyed"

    def fields(self) -> str:
        return f"tx={self.tx} vid={self.vid} existed={int(self.existed)}"


@dataclass(frozen=True)
class VmOp:
    vid: int
    op: str
    req: str = ""
    kind = "VmOp"

    def fields(self) -> str:
        return f"vid={self.vid} op={self.op} req={self.req}"


@dataclass(frozen=True)
class VmOpDone:
    vid: int
    op: str
    state: str
    req: str = ""
    kind = "VmOpDone"

    def fields(self) -> str:
        return f"vid={self.vid} op={self.op} state={self.state} req={self.req}"


# -- recovery ------------------------------------------------------------------


@dataclass(frozen=True)
class RestartCmd:
    daemon: str                       # pid to revive
    daemon_kind: str                  # "gsd" | "nd"
    gid: int = 0
    contacts: tuple[str, ...] = ()
    label: str = ""
    parent: str = ""
    nid: int = 0
    kind = "RestartCmd"

    def fields(self) -> str:
        return f"daemon={self.daemon} daemon_kind={self.daemon_kind}"


@dataclass(frozen=True)
class RestartDone:
    daemon: str
    kind = "RestartDone"

    def fields(self) -> str:
        return f"daemon={self.daemon}"


@dataclass(frozen=True)
class RestartFailed:
    daemon: str
    reason: str
    kind = "RestartFailed"

    def fields(self) -> str:
        return f"daemon={self.daemon} reason={self.reason}"


# -- client interface ------------------------------------------------------------


@dataclass(frozen=True)
class GetClusterState:
    req: str
    kind = "GetClusterState"

    def fields(self) -> str:
        return f"req={self.req}"


@dataclass(frozen=True)
class StateQuery:
    req: str
    kind = "StateQuery"

    def fields(self) -> str:
        return f"req={self.req}"


@dataclass(frozen=True)
class StateReply:
    req: str
    partitions: tuple[PartitionSnapshot, ...]
    kind = "StateReply"

    def fields(self) -> str:
        labels = ",".join(p.label for p in self.partitions)
        return f"req={self.req} labels={labels}"


@dataclass(frozen=True)
class ClusterStateReply:
    req: str
    stamp_view_id: int
    digest: str
    nodes: int
    vms: int
    partitions: int
    kind = "ClusterStateReply"

    def fields(self) -> str:
        return (f"req={self.req} stamp={self.stamp_view_id} digest={self.digest} "
                f"partitions={self.partitions} nodes={self.nodes} vms={self.vms}")


@dataclass(frozen=True)
class GetVmsState:
    req: str
    vids: tuple[int, ...]
    kind = "GetVmsState"

    def fields(self) -> str:
        return f"req={self.req} vids={_vids(self.vids)}"


@dataclass(frozen=True)
class VmsStateQuery:
    req: str
    vids: tuple[int, ...]
    kind = "VmsStateQuery"

    def fields(self) -> str:
        return f"req={self.req} vids={_vids(self.vids)}"


@dataclass(frozen=True)
class VmsStateReply:
    req: str
    states: tuple[tuple[int, str], ...]
    kind = "VmsStateReply"

    def fields(self) -> str:
        body = ",".join(f"{v}:{s}" for v, s in self.states)
        return f"req={self.req} states={body}"


@dataclass(frozen=True)
class CreateVms:
    req: str
    count: int
    node_index: int | None = None
    kind = "CreateVms"

    def fields(self) -> str:
        node = "auto" if self.node_index is None else str(self.node_index)
        return f"req={self.req} count={self.count} node={node}"


@dataclass(frozen=True)
class CreateVmsReply:
    req: str
    ok: bool
    vids: tuple[int, ...] = ()
    error: str = ""
    kind = "CreateVmsReply"

    def fields(self) -> str:
        return f"req={self.req} ok={int(self.ok)} vids={_vids(self.vids)} error={self.error}"


@dataclass(frozen=True)
class DestroyVms:
    req: str
    vids: tuple[int, ...]
    kind = "DestroyVms"

    def fields(self) -> str:
        return f"req={self.req} vids={_vids(self.vids)}"


@dataclass(frozen=True)
class DestroyVmsReply:
    req: str
    results: tuple[tuple[int, str], ...]   # (vid, "ok"|"unknown")
    kind = "DestroyVmsReply"

    def fields(self) -> str:
        body = ",".join(f"{v}:{r}" for v, r in self.results)
        return f"req={self.req} results={body}"


@dataclass(frozen=True)
class Subscribe:
    client_id: str
    filter: str
    kind = "Subscribe"

    def fields(self) -> str:
        return f"client={self.client_id} filter={self.filter}"


@dataclass(frozen=True)
class Inform:
    deltas: tuple[Delta, ...]
    kind = "Inform"

    def fields(self) -> str:
        body = ";".join(d.token() for d in self.deltas)
        return f"deltas={body}"

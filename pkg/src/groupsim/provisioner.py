"""VM identity arithmetic, lifecycle rules, placement, and the intent log.

VM ids are arithmetic: a vid encodes (partition gid, node index, slot), so any
vid routes to its managing daemon in O(1) and the map needs no registry.
Slots are reused after destroy, so vids are reusable within a run.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class ProvisionError(ValueError):
    """Rejected request: bad ranges, no capacity, or an illegal transition."""


@dataclass(frozen=True)
class PlacementConfig:
    max_nodes_per_partition: int
    max_vms_per_node: int

    def __post_init__(self) -> None:
        if self.max_nodes_per_partition < 1 or self.max_vms_per_node < 1:
            raise ProvisionError("placement limits must be strictly positive")


def encode_vid(gid: int, node_index: int, slot: int, cfg: PlacementConfig) -> int:
    if gid < 1:
        raise ProvisionError(f"gid must be >= 1, got {gid}")
    if not 0 <= node_index < cfg.max_nodes_per_partition:
        raise ProvisionError(f"node_index {node_index} out of range")
    if not 0 <= slot < cfg.max_vms_per_node:
        raise ProvisionError(f"slot {slot} out of range")
    return ((gid - 1) * cfg.max_nodes_per_partition + node_index) * cfg.max_vms_per_node + slot + 1


def decode_vid(vid: int, cfg: PlacementConfig) -> tuple[int, int, int]:
    if vid < 1:
        raise ProvisionError(f"vid must be >= 1, got {vid}")
    base, slot = divmod(vid - 1, cfg.max_vms_per_node)
    gid_minus_one, node_index = divmod(base, cfg.max_nodes_per_partition)
    return gid_minus_one + 1, node_index, slot


def nid_for(gid: int, node_index: int, cfg: PlacementConfig) -> int:
    if gid < 1:
        raise ProvisionError(f"gid must be >= 1, got {gid}")
    if not 0 <= node_index < cfg.max_nodes_per_partition:
        raise ProvisionError(f"node_index {node_index} out of range")
    return (gid - 1) * cfg.max_nodes_per_partition + node_index + 1


def decode_nid(nid: int, cfg: PlacementConfig) -> tuple[int, int]:
    if nid < 1:
        raise ProvisionError(f"nid must be >= 1, got {nid}")
    gid_minus_one, node_index = divmod(nid - 1, cfg.max_nodes_per_partition)
    return gid_minus_one + 1, node_index


def node_of_vid(vid: int, cfg: PlacementConfig) -> int:
    gid, node_index, _ = decode_vid(vid, cfg)
    return nid_for(gid, node_index, cfg)


def gid_of_vid(vid: int, cfg: PlacementConfig) -> int:
    return decode_vid(vid, cfg)[0]


class VmState(Enum):
    HALTED = "halted"
    RUNNING = "running"
    SUSPENDED = "suspended"
    CRASHED = "crashed"
    DESTROYED = "destroyed"


# op -> (required current state, resulting state)
VM_OPS: dict[str, tuple[VmState, VmState]] = {
    "start": (VmState.HALTED, VmState.RUNNING),
    "shutdown": (VmState.RUNNING, VmState.HALTED),
    "reboot": (VmState.RUNNING, VmState.RUNNING),
    "resize": (VmState.RUNNING, VmState.RUNNING),
    "suspend": (VmState.RUNNING, VmState.SUSPENDED),
    "resume": (VmState.SUSPENDED, VmState.RUNNING),
}

# the user-facing tables spell suspend as "hung"
VM_OP_ALIASES = {"hung": "suspend"}


def canonical_op(op: str) -> str:
    return VM_OP_ALIASES.get(op, op)


def apply_vm_op(current: VmState, op: str) -> VmState:
    op = canonical_op(op)
    if op not in VM_OPS:
        raise ProvisionError(f"unknown vm op {op!r}")
    required, target = VM_OPS[op]
    if current is not required:
        raise ProvisionError(f"cannot {op} a {current.value} vm")
    return target


class TxPhase(Enum):
    BEGUN = "begun"
    APPLIED = "applied"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass(frozen=True)
class IntentLogRecord:
    tx: str
    op: str
    vids: tuple[int, ...]
    phase: TxPhase


class IntentLog:
    """Append-only transaction journal over a durable key-value cell.

    The cell survives a process restart on the same node but not node loss;
    after node loss the owner rebuilds state from the node daemons instead.
    """

    KEY = "wal"

    def __init__(self, cell: dict):
        self._cell = cell
        self._cell.setdefault(self.KEY, [])

    def append(self, record: IntentLogRecord) -> None:
        self._cell[self.KEY].append(record)

    def records(self) -> tuple[IntentLogRecord, ...]:
        return tuple(self._cell[self.KEY])

    def open_transactions(self) -> dict[str, tuple[str, tuple[int, ...]]]:
        """Transactions with a Begun record but no Committed/Aborted yet, in
        begin order."""
        opened: dict[str, tuple[str, tuple[int, ...]]] = {}
        for rec in self._cell[self.KEY]:
            if rec.phase is TxPhase.BEGUN:
                opened[rec.tx] = (rec.op, rec.vids)
            elif rec.phase in (TxPhase.COMMITTED, TxPhase.ABORTED):
                opened.pop(rec.tx, None)
        return opened

    def aborted_vids(self) -> set[int]:
        """Vids from rolled-back transactions; stragglers reported by a node
        daemon afterwards must be destroyed, not re-adopted."""
        out: set[int] = set()
        for rec in self._cell[self.KEY]:
            if rec.phase is TxPhase.ABORTED:
                out.update(rec.vids)
            elif rec.phase is TxPhase.COMMITTED:
                out.difference_update(rec.vids)
        return out


@dataclass(frozen=True)
class Placement:
    vid: int
    nid: int
    node_index: int
    slot: int


def plan_create(requests: list[int | None], node_states: dict[int, str],
                occupied_vids: set[int], gid: int, cfg: PlacementConfig) -> list[Placement]:
    """Resolve a create batch to concrete placements.

    ``requests`` holds one entry per VM: an explicit node index or None for
    auto-placement (first fit, lowest node index). ``node_states`` maps nid to
    its status string; only running nodes accept VMs. Raises before any
    intent is journaled, so a rejected batch has no footprint.
    """
    running_indexes = sorted(
        decode_nid(nid, cfg)[1] for nid, st in node_states.items()
        if st == "running" and decode_nid(nid, cfg)[0] == gid)
    free: dict[int, list[int]] = {}
    for idx in running_indexes:
        slots = [s for s in range(cfg.max_vms_per_node)
                 if encode_vid(gid, idx, s, cfg) not in occupied_vids]
        free[idx] = slots
    placements: list[Placement] = []
    for req in requests:
        if req is not None:
            if req not in free:
                raise ProvisionError(f"node index {req} is not a running node")
            if not free[req]:
                raise ProvisionError(f"node index {req} has no free slots")
            idx = req
        else:
            idx = next((i for i in running_indexes if free[i]), None)
            if idx is None:
                raise ProvisionError("no free slots in partition")
        slot = free[idx].pop(0)
        placements.append(Placement(encode_vid(gid, idx, slot, cfg),
                                    nid_for(gid, idx, cfg), idx, slot))
    return placements

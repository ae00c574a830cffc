"""The simulated daemons: group service, node and VM agents, plus the client.

A group service daemon (gsd) wraps the pure membership machine and owns its
partition's node/VM views, provisioning transactions, and recovery duties.
Node daemons (nd) manage VM daemons (vmd) on one node and heartbeat upward.
Node agents stand in for the host machines: they execute restart commands and
die with the node. The client daemon issues scenario verbs and records every
reply it hears.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import gm_core as gm
from ..failure_detection import (HeartbeatConfig, MonitorTable, ProbeTracker,
                                 heartbeat_target, recompute_ring_monitor)
from ..partition_mgmt import (Delta, NodeState, PartitionSnapshot, Subscription,
                              SubscriptionRegistry, on_nd_timeout, on_node_leave,
                              on_vm_report, ClusterView)
from ..provisioner import (IntentLog, IntentLogRecord, Placement, ProvisionError,
                           TxPhase, VmState, apply_vm_op, canonical_op,
                           decode_nid, gid_of_vid, plan_create)
from ..recovery import Diagnosis, RecoveryPolicy, RestartOn, Takeover, decide_gsd_recovery
from . import messages as ms
from .kernel import Process
from .scenario import SimConfig


@dataclass(frozen=True)
class PartitionInfo:
    """Static facts about a partition, read from the scenario topology (the
    stand-in for the cluster's configuration database)."""

    label: str                  # founding gsd pid
    gid: int                    # 0 when the partition joined at runtime
    nids: tuple[int, ...]


@dataclass
class ClusterMap:
    """Shared read-only lookup tables every daemon gets at spawn."""

    cfg: SimConfig
    partitions: dict[str, PartitionInfo] = field(default_factory=dict)
    static_members: tuple[gm.GMember, ...] = ()

    def node_pid(self, nid: int) -> str:
        return f"node:{nid}"

    def nd_pid(self, nid: int) -> str:
        return f"nd:{nid}"

    def vmd_pid(self, vid: int) -> str:
        return f"vmd:{vid}"

    def label_of_nid(self, nid: int) -> str:
        gid, _ = decode_nid(nid, self.cfg.placement)
        return f"gsd:{gid}"

    def label_of_vid(self, vid: int) -> str:
        return f"gsd:{gid_of_vid(vid, self.cfg.placement)}"


class PartitionState:
    """One managed partition: node view, VM view, static node list."""

    def __init__(self, label: str, nids: tuple[int, ...]):
        self.label = label
        self.nids = nids
        self.view_n: dict[int, NodeState] = {nid: NodeState.CRASHED for nid in sorted(nids)}
        self.view_v: dict[int, VmState] = {}

    def snapshot(self, manager_gid: int) -> PartitionSnapshot:
        return PartitionSnapshot.capture(self.label, manager_gid, self.view_n, self.view_v)


class VmdDaemon(Process):
    """Per-VM agent: heartbeats to its node daemon, nothing else."""

    def __init__(self, pid: str, cfg: SimConfig, vid: int, parent: str):
        super().__init__(pid)
        self.cfg = cfg
        self.vid = vid
        self.parent = parent

    def on_start(self) -> None:
        self._beat()

    def on_timer(self, tag: str, data: object) -> None:
        if tag == "hb":
            self._beat()

    def _beat(self) -> None:
        self.send(self.parent, ms.Heartbeat("vmd", self.vid), background=True)
        self.arm("hb", self.cfg.heartbeat_interval_us, background=True)


class NdDaemon(Process):
    """Per-node agent: VM lifecycle execution, VM daemon monitoring and
    restart, registration and heartbeats to the owning group daemon."""

    def __init__(self, pid: str, cfg: SimConfig, cluster: ClusterMap, nid: int,
                 parent: str, initial_vids: tuple[int, ...] = ()):
        super().__init__(pid)
        self.cfg = cfg
        self.cluster = cluster
        self.nid = nid
        self.parent = parent
        self.initial_vids = initial_vids
        self.vms: dict[int, VmState] = {}
        self.monitors = MonitorTable(
            HeartbeatConfig(cfg.heartbeat_interval_us, cfg.heartbeat_timeout_us))
        self._job = 0

    def on_start(self) -> None:
        for vid in self.initial_vids:
            self._spawn_vmd(vid)
            self.vms[vid] = VmState.RUNNING
            self.monitors.register(("vmd", vid), self.now)
        self._register()
        self.send(self.parent, ms.Heartbeat("nd", self.nid), background=True)
        self.arm("hb", self.cfg.heartbeat_interval_us, background=True)
        self._arm_monitor()

    def _spawn_vmd(self, vid: int) -> bool:
        pid = self.cluster.vmd_pid(vid)
        return self.kernel.spawn(pid, self.node_id, VmdDaemon(pid, self.cfg, vid, self.pid))

    def _register(self) -> None:
        vms = tuple((vid, self.vms[vid].value) for vid in sorted(self.vms))
        self.send(self.parent, ms.Register(self.nid, vms))

    def _arm_monitor(self) -> None:
        deadline = self.monitors.next_deadline()
        if deadline is not None:
            self.arm("mon", max(0, deadline - self.now), background=True)

    def on_timer(self, tag: str, data: object) -> None:
        if tag == "hb":
            self.send(self.parent, ms.Heartbeat("nd", self.nid), background=True)
            self.arm("hb", self.cfg.heartbeat_interval_us, background=True)
        elif tag == "mon":
            for key in self.monitors.on_tick(self.now):
                _, vid = key
                entry = self.monitors.entries[key]
                self.trace("state", f"what=suspect kind=vmd target={self.cluster.vmd_pid(vid)} "
                                    f"id={vid} epoch={entry.epoch}")
                self.vms[vid] = VmState.CRASHED
                self.send(self.parent, ms.VmStateReport(vid, VmState.CRASHED.value))
                self.arm(f"revive:{vid}", self.cfg.restart_us, data=vid)
            self._arm_monitor()
        elif tag.startswith("revive:"):
            self._restart_vmd(data)
        elif tag.startswith("job:"):
            self._run_job(data)

    def _restart_vmd(self, vid: int) -> None:
        if self.vms.get(vid) is not VmState.CRASHED:
            return
        if not self._spawn_vmd(vid):
            self.trace("state", f"what=recovery target={self.cluster.vmd_pid(vid)} result=suppressed")

    def on_message(self, src: str, msg: object) -> None:
        if isinstance(msg, ms.Heartbeat) and msg.kind_tag == "vmd":
            vid = msg.ident
            key = ("vmd", vid)
            if key in self.monitors.entries:
                if self.monitors.refresh(key, self.now, revive=True):
                    self.vms[vid] = VmState.RUNNING
                    self.send(self.parent, ms.VmStateReport(vid, VmState.RUNNING.value))
            else:
                # a vm daemon we did not know about (fresh nd after restart)
                self.vms[vid] = VmState.RUNNING
                self.monitors.register(key, self.now)
                self._arm_monitor()
                self.send(self.parent, ms.VmStateReport(vid, VmState.RUNNING.value))
        elif isinstance(msg, ms.Adopt):
            self.parent = msg.parent
            self._register()
        elif isinstance(msg, ms.CreateVm):
            self._defer_job(self.cfg.op_delay_us("create"), ("create", src, msg))
        elif isinstance(msg, ms.DestroyVm):
            self._defer_job(self.cfg.op_delay_us("destroy"), ("destroy", src, msg))
        elif isinstance(msg, ms.VmOp):
            op = canonical_op(msg.op)
            self._defer_job(self.cfg.op_delay_us(op), ("vmop", src, msg))

    def _defer_job(self, delay_us: int, data: tuple) -> None:
        self._job += 1
        self.arm(f"job:{self._job}", delay_us, data=data)

    def _run_job(self, data: tuple) -> None:
        what, src, msg = data
        if what == "create":
            self._spawn_vmd(msg.vid)
            self.vms[msg.vid] = VmState.RUNNING
            self.monitors.register(("vmd", msg.vid), self.now)
            self._arm_monitor()
            self.send(src, ms.VmCreated(msg.tx, msg.vid))
        elif what == "destroy":
            existed = msg.vid in self.vms
            if existed:
                self.kernel.stop_process(self.cluster.vmd_pid(msg.vid), reason="destroyed")
                self.monitors.remove(("vmd", msg.vid))
                del self.vms[msg.vid]
            self.send(src, ms.VmDestroyed(msg.vid, existed, msg.tx))
        elif what == "vmop":
            self._apply_vm_op(src, msg)

    def _apply_vm_op(self, src: str, msg: ms.VmOp) -> None:
        op = canonical_op(msg.op)
        current = self.vms.get(msg.vid)
        if current is None:
            self.send(src, ms.VmOpDone(msg.vid, op, "rejected:unknown-vid", msg.req))
            return
        try:
            new_state = apply_vm_op(current, op)
        except ProvisionError as exc:
            self.send(src, ms.VmOpDone(msg.vid, op, f"rejected:{exc}", msg.req))
            return
        vmd = self.cluster.vmd_pid(msg.vid)
        if op == "suspend":
            self.kernel.pause_process(vmd)
            self.monitors.remove(("vmd", msg.vid))
        elif op == "resume":
            self.kernel.resume_process(vmd)
            self.monitors.register(("vmd", msg.vid), self.now)
            self._arm_monitor()
        elif op == "shutdown":
            self.kernel.stop_process(vmd, reason="shutdown")
            self.monitors.remove(("vmd", msg.vid))
        elif op == "start":
            self._spawn_vmd(msg.vid)
            self.monitors.register(("vmd", msg.vid), self.now)
            self._arm_monitor()
        self.vms[msg.vid] = new_state
        self.send(src, ms.VmOpDone(msg.vid, op, new_state.value, msg.req))

    def do_leave(self) -> None:
        """Scenario-driven graceful departure: stop local VM daemons, tell the
        manager, and stop."""
        self.trace("event", f"what=verb verb=leave_node nid={self.nid}")
        for vid in sorted(self.vms):
            self.kernel.stop_process(self.cluster.vmd_pid(vid), reason="node-leave")
        self.send(self.parent, ms.NodeLeave(self.nid))
        self.kernel.stop_process(self.pid, reason="left")


class NodeAgentDaemon(Process):
    """Stands in for the physical host: executes restart commands after the
    configured delay, refuses blocked ones, and dies with the node."""

    def __init__(self, pid: str, cfg: SimConfig, cluster: ClusterMap):
        super().__init__(pid)
        self.cfg = cfg
        self.cluster = cluster

    def on_message(self, src: str, msg: object) -> None:
        if not isinstance(msg, ms.RestartCmd):
            return
        if self.kernel.is_blocked(msg.daemon):
            self.send(src, ms.RestartFailed(msg.daemon, "blocked"))
            return
        self.arm(f"restart:{msg.daemon}", self.cfg.restart_us, data=(src, msg))

    def on_timer(self, tag: str, data: object) -> None:
        src, msg = data
        if msg.daemon_kind == "gsd":
            proc: Process = GsdDaemon(msg.daemon, self.cfg, self.cluster, mode="rejoin",
                                      gid=msg.gid, contacts=msg.contacts)
        else:
            proc = NdDaemon(msg.daemon, self.cfg, self.cluster, nid=msg.nid, parent=msg.parent)
        if self.kernel.spawn(msg.daemon, self.pid, proc):
            self.send(src, ms.RestartDone(msg.daemon))
        else:
            self.send(src, ms.RestartFailed(msg.daemon, "spawn-refused"))


class GsdDaemon(Process):
    """Group service daemon: one per partition."""

    def __init__(self, pid: str, cfg: SimConfig, cluster: ClusterMap, mode: str,
                 gid: int = 0, contacts: tuple[str, ...] = ()):
        super().__init__(pid)
        assert mode in ("boot", "join", "rejoin")
        self.cfg = cfg
        self.cluster = cluster
        self.mode = mode
        self.my_gid = gid
        self.contacts = tuple(contacts)
        self.policy = RecoveryPolicy(cfg.restart_us, cfg.max_restart_attempts)
        hb = HeartbeatConfig(cfg.heartbeat_interval_us, cfg.heartbeat_timeout_us)
        self.gm: gm.GmState | None = None
        self.ring = MonitorTable(hb)
        self.children = MonitorTable(hb)
        self.probes = ProbeTracker(cfg.probe_timeout_us)
        self.native: PartitionState | None = None
        self.takeovers: dict[str, PartitionState] = {}
        self.subs = SubscriptionRegistry()
        self.wal: IntentLog | None = None
        self.rollback_vids: set[int] = set()
        self._tx_seq = 0
        self.active_tx: dict | None = None
        self.tx_queue: list[dict] = []
        self.recovering: dict[int, dict] = {}
        self.fetches: dict[str, dict] = {}
        self.vfetches: dict[str, dict] = {}
        self.pending_vmops: dict[tuple[int, str], str] = {}
        self.hb_target: str | None = None

    # -- lifecycle ------------------------------------------------------------

    def on_start(self) -> None:
        self.wal = IntentLog(self.kernel.durable(self.node_id, f"wal:{self.pid}"))
        info = self.cluster.partitions.get(self.pid)
        self.native = PartitionState(self.pid, info.nids if info else ())
        for nid in sorted(self.native.view_n):
            self.trace("state", f"what=node_status label={self.pid} nid={nid} status=crashed")
        self._recover_wal()
        self.arm("hb", self.cfg.heartbeat_interval_us, background=True)
        if self.mode == "boot":
            state, outputs = gm.bootstrap(self.cluster.static_members,
                                          gm.GMember(self.my_gid, self.pid))
            self.gm = state
            self._apply(outputs)
        elif self.mode == "join":
            state, outputs = gm.begin_join(self.contacts, self.pid)
            self.gm = state
            self._apply(outputs)
            self.arm("join_retry", self.cfg.rejoin_retry_us)
        else:
            self.gm = gm.GmState(me=gm.GMember(self.my_gid, self.pid))
            self._send_adopts(self.native)
            self._broadcast_rejoin()
            self.arm("rejoin_retry", self.cfg.rejoin_retry_us)

    def _recover_wal(self) -> None:
        assert self.wal is not None
        for tx, (op, vids) in self.wal.open_transactions().items():
            self.trace("state", f"what=tx tx={tx} phase=recovering op={op}")
            for vid in vids:
                nid = self._nid_of_vid(vid)
                self.send(self.cluster.nd_pid(nid), ms.DestroyVm(vid, tx))
            if op == "create":
                self.wal.append(IntentLogRecord(tx, op, vids, TxPhase.ABORTED))
                self.trace("state", f"what=tx tx={tx} phase=aborted op={op}")
            else:
                # interrupted destroys roll forward; the re-sent destroys are idempotent
                self.wal.append(IntentLogRecord(tx, op, vids, TxPhase.COMMITTED))
                self.trace("state", f"what=tx tx={tx} phase=committed op={op}")
        self.rollback_vids = self.wal.aborted_vids()

    def _nid_of_vid(self, vid: int) -> int:
        from ..provisioner import node_of_vid
        return node_of_vid(vid, self.cfg.placement)

    def _send_adopts(self, pst: PartitionState) -> None:
        for nid in sorted(pst.nids):
            self.send(self.cluster.nd_pid(nid), ms.Adopt(self.pid, pst.label))

    def _broadcast_rejoin(self) -> None:
        assert self.gm is not None
        me = gm.GMember(self.my_gid, self.pid)
        targets: list[str] = []
        if self.gm.view is not None:
            targets = [m.address for m in self.gm.view.sorted_members()]
        if not targets:
            targets = list(self.contacts)
        self.trace("state", "what=rejoin-attempt")
        for address in sorted(set(targets)):
            if address != self.pid:
                self.send(address, ms.Rejoining(me))

    # -- gm plumbing -----------------------------------------------------------

    def _gm_event(self, event: gm.GmEvent) -> None:
        assert self.gm is not None
        self.gm, outputs = gm.handle(self.gm, event)
        self._apply(outputs)

    def _apply(self, outputs: list[gm.GmOutput]) -> None:
        assert self.gm is not None
        for out in outputs:
            if isinstance(out, gm.SendPrepare):
                for m in out.to:
                    self.send(m.address, ms.Prepare(self.gm.me.gid))
            elif isinstance(out, gm.StartPrepareTimer):
                self.arm("prepare", self.cfg.t_ack_us)
            elif isinstance(out, gm.SendPrepareAck):
                self.send(out.to.address, ms.PrepareAck(self.gm.me.gid))
            elif isinstance(out, gm.SendBootCommit):
                for m in out.to:
                    self.send(m.address, ms.BootCommit(out.view, self.gm.me.gid))
            elif isinstance(out, gm.SendNewViewG):
                for m in out.to:
                    self.send(m.address, ms.NewViewG(out.view, self.gm.me.gid))
            elif isinstance(out, gm.SendAck):
                self.send(out.to.address, ms.Ack(out.view_id, self.gm.me.gid))
            elif isinstance(out, gm.SendCrashReport):
                self.send(out.to.address, ms.CrashReport(out.view_id, self.gm.me, out.crasher))
            elif isinstance(out, gm.SendLeavingPropose):
                self.send(out.to.address, ms.LeavingPropose(out.view_id, out.member))
            elif isinstance(out, gm.SendCurrentVersion):
                self.send(out.to.address, ms.CurrentVersion(out.view_id))
            elif isinstance(out, gm.SendRejoining):
                for m in out.to:
                    self.send(m.address, ms.Rejoining(out.member))
            elif isinstance(out, gm.SendJoining):
                for address in out.to:
                    self.send(address, ms.Joining(out.address))
            elif isinstance(out, gm.StartAckTimer):
                self.arm("ack", self.cfg.t_ack_us, data=out.view_id)
            elif isinstance(out, gm.ProbeRequest):
                if self.probes.start(out.member.gid, self.now) is not None:
                    self.send(out.member.address, ms.Probe(out.member.gid))
                    self.arm(f"probe:{out.member.gid}", self.cfg.probe_timeout_us, data=out.member)
            elif isinstance(out, gm.ScheduleRejoin):
                self.arm("rejoin", self.cfg.restart_us)
            elif isinstance(out, gm.InstallView):
                self._after_install(out.view, out.rank)
            elif isinstance(out, gm.Halt):
                self._after_halt(out.reason)
            elif isinstance(out, gm.Ignored):
                self.trace("state", f"what=ignored reason={out.reason}")

    def _after_install(self, view: gm.ViewG, rank: gm.Role) -> None:
        assert self.gm is not None
        self.my_gid = self.gm.me.gid
        inc = self.kernel.incarnation(self.pid)
        members = ",".join(f"{m.gid}:{m.address}" for m in view.sorted_members())
        self.trace("view", f"view_id={view.view_id} self={self.my_gid} rank={rank.value} "
                           f"inc={inc} members={members}")
        self.ring.clear()
        monitored = recompute_ring_monitor(view, self.my_gid)
        if monitored is not None:
            m = view.member(monitored)
            self.ring.register(("ring", m.address), self.now, meta=(m, view.view_id))
            self._arm_ring()
        target = heartbeat_target(view, self.my_gid)
        self.hb_target = view.member(target).address if target is not None else None
        self.cancel("join_retry")
        self.cancel("rejoin_retry")
        for label in sorted(self.takeovers):
            if view.by_address(label) is not None:
                self._release_takeover(label)

    def _after_halt(self, reason: str) -> None:
        self.trace("state", f"what=halt reason={reason}")
        self.hb_target = None
        self.ring.clear()
        self.children.clear()

    def _arm_ring(self) -> None:
        deadline = self.ring.next_deadline()
        if deadline is not None:
            self.arm("ringmon", max(0, deadline - self.now), background=True)

    def _arm_children(self) -> None:
        deadline = self.children.next_deadline()
        if deadline is not None:
            self.arm("childmon", max(0, deadline - self.now), background=True)

    # -- timers -----------------------------------------------------------------

    def on_timer(self, tag: str, data: object) -> None:
        assert self.gm is not None
        if tag == "hb":
            self.arm("hb", self.cfg.heartbeat_interval_us, background=True)
            if not self.gm.halted and self.gm.view is not None and self.hb_target:
                self.send(self.hb_target,
                          ms.Heartbeat("ring", self.my_gid, self.gm.view.view_id),
                          background=True)
        elif tag == "ringmon":
            for key in self.ring.on_tick(self.now):
                self._on_ring_suspect(key)
            self._arm_ring()
        elif tag == "childmon":
            for key in self.children.on_tick(self.now):
                self._on_child_suspect(key)
            self._arm_children()
        elif tag == "ack":
            self._gm_event(gm.AckTimeout(data))
        elif tag == "prepare":
            self._gm_event(gm.PrepareTimeout())
        elif tag.startswith("probe:"):
            member = data
            if self.probes.expired(member.gid, self.now):
                self._gm_event(gm.ProbeResult(member, alive=False))
        elif tag == "rejoin":
            self.gm = gm.reset_for_rejoin(self.gm)
            self._broadcast_rejoin()
            if self.native is not None:
                self._send_adopts(self.native)
            self.arm("rejoin_retry", self.cfg.rejoin_retry_us)
        elif tag in ("join_retry", "rejoin_retry"):
            if self.gm.in_view():
                return
            if tag == "join_retry":
                for address in sorted(set(self.contacts)):
                    if address != self.pid:
                        self.send(address, ms.Joining(self.pid))
            else:
                self._broadcast_rejoin()
            self.arm(tag, self.cfg.rejoin_retry_us)
        elif tag.startswith("recover:"):
            self._recovery_step(data, "watchdog-timeout")
        elif tag.startswith("fetch:"):
            self._fetch_timeout(data)
        elif tag.startswith("vfetch:"):
            self._vfetch_timeout(data)

    # -- suspicion handling --------------------------------------------------------

    def _on_ring_suspect(self, key: tuple) -> None:
        entry = self.ring.entries.get(key)
        if entry is None:
            return
        member, view_id = entry.meta
        self.trace("state", f"what=suspect kind=ring target={member.address} "
                            f"id={member.gid} epoch={view_id}")
        self._gm_event(gm.SucceedingFailure())
        self._begin_gsd_recovery(member)

    def _on_child_suspect(self, key: tuple) -> None:
        entry = self.children.entries.get(key)
        if entry is None:
            return
        nid, label = entry.meta
        nd_pid = self.cluster.nd_pid(nid)
        self.trace("state", f"what=suspect kind=nd target={nd_pid} id={nid} epoch={entry.epoch}")
        pst = self._partition_by_label(label)
        if pst is not None:
            pst.view_n, pst.view_v, deltas = on_nd_timeout(
                pst.view_n, pst.view_v, nid, self.cfg.placement)
            self._emit_deltas(pst, deltas)
        self._abort_tx_on_node(nid)
        node_pid = self.cluster.node_pid(nid)
        if self.kernel.node_alive(node_pid):
            self.send(node_pid, ms.RestartCmd(daemon=nd_pid, daemon_kind="nd",
                                              nid=nid, parent=self.pid))
        else:
            self.trace("state", f"what=recovery target={nd_pid} result=suppressed reason=node-dead")

    # -- gsd recovery ------------------------------------------------------------------

    def _begin_gsd_recovery(self, member: gm.GMember) -> None:
        if member.gid in self.recovering:
            return
        info = self.cluster.partitions.get(member.address)
        home_node = self.kernel.node_of(member.address)
        rec = {"member": member, "attempt": 1, "info": info, "home_node": home_node}
        self.recovering[member.gid] = rec
        self._recovery_step(member.gid, "suspected")

    def _recovery_step(self, gid: int, why: str) -> None:
        rec = self.recovering.get(gid)
        if rec is None:
            return
        member: gm.GMember = rec["member"]
        info: PartitionInfo | None = rec["info"]
        home_node: str | None = rec["home_node"]
        home_alive = self.kernel.node_alive(home_node)
        running = tuple(nid for nid in (info.nids if info else ())
                        if self.kernel.node_alive(self.cluster.node_pid(nid)))
        home_nid = 0
        if info is not None and home_node is not None and home_node.startswith("node:"):
            try:
                home_nid = int(home_node.split(":", 1)[1])
            except ValueError:
                home_nid = 0
        decision = decide_gsd_recovery(Diagnosis(home_alive, running), home_nid,
                                       rec["attempt"], self.policy)
        self.trace("state", f"what=recovery target={member.address} attempt={rec['attempt']} "
                            f"why={why} node_alive={int(home_alive)} "
                            f"decision={'takeover' if isinstance(decision, Takeover) else 'restart'}")
        if isinstance(decision, Takeover):
            self._takeover(member, info)
            return
        target_node = home_node if decision.nid == home_nid else self.cluster.node_pid(decision.nid)
        contacts = tuple(m.address for m in self.gm.view.sorted_members()) \
            if self.gm is not None and self.gm.view is not None else (self.pid,)
        self.send(target_node, ms.RestartCmd(
            daemon=member.address, daemon_kind="gsd", gid=member.gid,
            contacts=contacts, label=member.address))
        self.arm(f"recover:{member.gid}", self.cfg.watchdog_us, data=member.gid)

    def _on_restart_result(self, msg: ms.RestartDone | ms.RestartFailed) -> None:
        for gid, rec in list(self.recovering.items()):
            if rec["member"].address != msg.daemon:
                continue
            if isinstance(msg, ms.RestartDone):
                self.trace("state", f"what=recovery target={msg.daemon} result=restarted")
                self.cancel(f"recover:{gid}")
                del self.recovering[gid]
            else:
                rec["attempt"] += 1
                self.cancel(f"recover:{gid}")
                self._recovery_step(gid, f"restart-failed:{msg.reason}")
            return

    def _release_takeover(self, label: str) -> None:
        """The partition's own daemon is back in the group: hand its nodes
        back and forget the adopted state."""
        pst = self.takeovers.pop(label)
        self.trace("state", f"what=takeover-release label={label}")
        for key in [k for k, e in self.children.entries.items() if e.meta[1] == label]:
            self.children.remove(key)
        for nid in sorted(pst.nids):
            self.send(self.cluster.nd_pid(nid), ms.Adopt(label, label))

    def _takeover(self, member: gm.GMember, info: PartitionInfo | None) -> None:
        self.recovering.pop(member.gid, None)
        self.cancel(f"recover:{member.gid}")
        label = member.address
        if label == self.pid or label in self.takeovers:
            return
        self.trace("state", f"what=takeover label={label}")
        pst = PartitionState(label, info.nids if info else ())
        for nid in sorted(pst.view_n):
            self.trace("state", f"what=node_status label={label} nid={nid} status=crashed")
        self.takeovers[label] = pst
        self._send_adopts(pst)

    # -- partition views ------------------------------------------------------------------

    def _partition_by_label(self, label: str) -> PartitionState | None:
        if self.native is not None and self.native.label == label:
            return self.native
        return self.takeovers.get(label)

    def _partition_of_nid(self, nid: int) -> PartitionState | None:
        return self._partition_by_label(self.cluster.label_of_nid(nid))

    def _partition_of_vid(self, vid: int) -> PartitionState | None:
        return self._partition_by_label(self.cluster.label_of_vid(vid))

    def _emit_deltas(self, pst: PartitionState, deltas: list[Delta]) -> None:
        if not deltas:
            return
        for d in deltas:
            if d.kind == "node":
                self.trace("state", f"what=node_status label={pst.label} nid={d.ident} status={d.state}")
            else:
                self.trace("state", f"what=vm_status label={pst.label} vid={d.ident} status={d.state}")
        for endpoint, matched in self.subs.deliveries(deltas):
            self.send(endpoint, ms.Inform(tuple(matched)))

    def _on_register(self, src: str, msg: ms.Register) -> None:
        pst = self._partition_of_nid(msg.nid)
        if pst is None:
            self.trace("state", f"what=ignored reason=foreign-register nid={msg.nid}")
            return
        deltas: list[Delta] = []
        if pst.view_n.get(msg.nid) is not NodeState.RUNNING:
            pst.view_n[msg.nid] = NodeState.RUNNING
            deltas.append(Delta("node", msg.nid, NodeState.RUNNING.value))
        for vid, state_str in msg.vms:
            if vid in self.rollback_vids:
                self.send(src, ms.DestroyVm(vid))
                continue
            state = VmState(state_str)
            if pst.view_v.get(vid) is not state:
                pst.view_v[vid] = state
                deltas.append(Delta("vm", vid, state.value))
        self._emit_deltas(pst, deltas)
        self.children.register(("nd", src), self.now, meta=(msg.nid, pst.label))
        self._arm_children()

    def _on_vm_report(self, src: str, msg: ms.VmStateReport) -> None:
        pst = self._partition_of_vid(msg.vid)
        if pst is None:
            return
        if msg.vid in self.rollback_vids:
            self.send(src, ms.DestroyVm(msg.vid))
            return
        state = VmState(msg.state)
        if msg.vid not in pst.view_v:
            if state is VmState.RUNNING:
                pst.view_v[msg.vid] = state
                self._emit_deltas(pst, [Delta("vm", msg.vid, state.value)])
            return
        pst.view_v, deltas = on_vm_report(pst.view_v, msg.vid, state)
        self._emit_deltas(pst, deltas)

    def _on_node_leave(self, src: str, msg: ms.NodeLeave) -> None:
        pst = self._partition_of_nid(msg.nid)
        if pst is None:
            return
        pst.view_n, pst.view_v, deltas = on_node_leave(
            pst.view_n, pst.view_v, msg.nid, self.cfg.placement)
        self._emit_deltas(pst, deltas)
        self.children.remove(("nd", src))

    def _snapshots(self) -> list[PartitionSnapshot]:
        parts = []
        if self.native is not None:
            parts.append(self.native.snapshot(self.my_gid))
        for label in sorted(self.takeovers):
            parts.append(self.takeovers[label].snapshot(self.my_gid))
        return parts

    # -- cluster state fan-out ----------------------------------------------------------

    def _on_get_cluster_state(self, src: str, msg: ms.GetClusterState) -> None:
        if self.gm is None or self.gm.view is None or self.gm.halted:
            self.send(src, ms.ClusterStateReply(msg.req, 0, "unavailable", 0, 0, 0))
            return
        others = [m.address for m in self.gm.view.sorted_members() if m.gid != self.my_gid]
        fetch = {"req": msg.req, "client": src, "stamp": self.gm.view.view_id,
                 "want": set(others), "got": {}, "attempt": 1}
        self.fetches[msg.req] = fetch
        if not others:
            self._finish_fetch(fetch)
            return
        for address in others:
            self.send(address, ms.StateQuery(msg.req))
        self.arm(f"fetch:{msg.req}", self.cfg.fetch_timeout_us, data=msg.req)

    def _on_state_reply(self, src: str, msg: ms.StateReply) -> None:
        fetch = self.fetches.get(msg.req)
        if fetch is None:
            return
        fetch["got"][src] = msg.partitions
        if set(fetch["got"]) >= fetch["want"]:
            self._finish_fetch(fetch)

    def _finish_fetch(self, fetch: dict) -> None:
        req = fetch["req"]
        self.fetches.pop(req, None)
        self.cancel(f"fetch:{req}")
        parts = self._snapshots()
        for address in sorted(fetch["got"]):
            if address in fetch["want"]:
                parts.extend(fetch["got"][address])
        view = ClusterView.assemble(fetch["stamp"], parts)
        self.send(fetch["client"], ms.ClusterStateReply(
            req, view.stamp_view_id, view.digest(), view.node_count(), view.vm_count(),
            len(view.partitions)))

    def _fetch_timeout(self, req: str) -> None:
        fetch = self.fetches.get(req)
        if fetch is None:
            return
        fetch["attempt"] += 1
        if fetch["attempt"] > 3 or self.gm is None or self.gm.view is None:
            # answer with what the surviving group returned
            fetch["want"] = set(fetch["got"])
            self._finish_fetch(fetch)
            return
        # membership has settled since the attempt began; earlier answers may
        # predate takeovers, so re-ask the whole surviving group
        others = {m.address for m in self.gm.view.sorted_members() if m.gid != self.my_gid}
        fetch["want"] = others
        fetch["got"] = {}
        fetch["stamp"] = self.gm.view.view_id
        if not others:
            self._finish_fetch(fetch)
            return
        for address in sorted(others):
            self.send(address, ms.StateQuery(req))
        self.arm(f"fetch:{req}", self.cfg.fetch_timeout_us, data=req)

    def _on_get_vms_state(self, src: str, msg: ms.GetVmsState) -> None:
        groups: dict[str, list[int]] = {}
        for vid in msg.vids:
            groups.setdefault(self.cluster.label_of_vid(vid), []).append(vid)
        states: dict[int, str] = {}
        want = set()
        for label, vids in sorted(groups.items()):
            pst = self._partition_by_label(label)
            if pst is not None:
                for vid in vids:
                    st = pst.view_v.get(vid)
                    states[vid] = st.value if st else "unknown"
            elif self.gm is not None and self.gm.view is not None \
                    and self.gm.view.by_address(label) is not None:
                want.add(label)
                self.send(label, ms.VmsStateQuery(msg.req, tuple(vids)))
            else:
                for vid in vids:
                    states[vid] = "unknown"
        vf = {"req": msg.req, "client": src, "want": want, "states": states}
        self.vfetches[msg.req] = vf
        if not want:
            self._finish_vfetch(vf)
        else:
            self.arm(f"vfetch:{msg.req}", self.cfg.fetch_timeout_us, data=msg.req)

    def _on_vms_state_query(self, src: str, msg: ms.VmsStateQuery) -> None:
        states = []
        for vid in msg.vids:
            pst = self._partition_of_vid(vid)
            st = pst.view_v.get(vid) if pst else None
            states.append((vid, st.value if st else "unknown"))
        self.send(src, ms.VmsStateReply(msg.req, tuple(states)))

    def _on_vms_state_reply(self, src: str, msg: ms.VmsStateReply) -> None:
        vf = self.vfetches.get(msg.req)
        if vf is None:
            return
        for vid, st in msg.states:
            vf["states"][vid] = st
        vf["want"].discard(src)
        if not vf["want"]:
            self._finish_vfetch(vf)

    def _finish_vfetch(self, vf: dict) -> None:
        self.vfetches.pop(vf["req"], None)
        self.cancel(f"vfetch:{vf['req']}")
        body = tuple(sorted(vf["states"].items()))
        self.send(vf["client"], ms.VmsStateReply(vf["req"], body))

    def _vfetch_timeout(self, req: str) -> None:
        vf = self.vfetches.get(req)
        if vf is None:
            return
        for label in vf["want"]:
            pass
        vf["want"] = set()
        self._finish_vfetch(vf)

    # -- provisioning -----------------------------------------------------------------------

    def _on_create_vms(self, src: str, msg: ms.CreateVms) -> None:
        self.tx_queue.append({"kind": "create", "req": msg.req, "client": src,
                              "count": msg.count, "node_index": msg.node_index})
        self._pump_tx()

    def _on_destroy_vms(self, src: str, msg: ms.DestroyVms) -> None:
        self.tx_queue.append({"kind": "destroy", "req": msg.req, "client": src,
                              "vids": msg.vids})
        self._pump_tx()

    def _next_tx(self) -> str:
        self._tx_seq += 1
        return f"g{self.my_gid}-{self._tx_seq}"

    def _pump_tx(self) -> None:
        if self.active_tx is not None or not self.tx_queue:
            return
        job = self.tx_queue.pop(0)
        if job["kind"] == "create":
            self._start_create(job)
        else:
            self._start_destroy(job)

    def _start_create(self, job: dict) -> None:
        assert self.native is not None and self.wal is not None
        node_states = {nid: st.value for nid, st in self.native.view_n.items()}
        requests: list[int | None] = [job["node_index"]] * job["count"]
        try:
            placements = plan_create(requests, node_states, set(self.native.view_v),
                                     self.my_gid, self.cfg.placement)
        except ProvisionError as exc:
            self.send(job["client"], ms.CreateVmsReply(job["req"], False, (), str(exc)))
            self._pump_tx()
            return
        vids = tuple(p.vid for p in placements)
        self.rollback_vids.difference_update(vids)  # slots legitimately reused
        tx = self._next_tx()
        self.wal.append(IntentLogRecord(tx, "create", vids, TxPhase.BEGUN))
        self.trace("state", f"what=tx tx={tx} phase=begun op=create "
                            f"vids={','.join(str(v) for v in vids)}")
        self.active_tx = {"kind": "create", "tx": tx, "job": job,
                          "placements": placements, "next": 0, "created": []}
        if not placements:
            self._commit_create()
            return
        self._issue_next_create()

    def _issue_next_create(self) -> None:
        tx = self.active_tx
        assert tx is not None
        placement: Placement = tx["placements"][tx["next"]]
        self.send(self.cluster.nd_pid(placement.nid), ms.CreateVm(tx["tx"], placement.vid))

    def _on_vm_created(self, src: str, msg: ms.VmCreated) -> None:
        tx = self.active_tx
        if tx is None or tx["kind"] != "create" or tx["tx"] != msg.tx:
            return
        assert self.wal is not None and self.native is not None
        self.wal.append(IntentLogRecord(msg.tx, "create", (msg.vid,), TxPhase.APPLIED))
        tx["created"].append(msg.vid)
        self.native.view_v[msg.vid] = VmState.RUNNING
        self._emit_deltas(self.native, [Delta("vm", msg.vid, VmState.RUNNING.value)])
        tx["next"] += 1
        if tx["next"] < len(tx["placements"]):
            self._issue_next_create()
        else:
            self._commit_create()

    def _commit_create(self) -> None:
        tx = self.active_tx
        assert tx is not None and self.wal is not None
        vids = tuple(p.vid for p in tx["placements"])
        self.wal.append(IntentLogRecord(tx["tx"], "create", vids, TxPhase.COMMITTED))
        self.trace("state", f"what=tx tx={tx['tx']} phase=committed op=create")
        self.send(tx["job"]["client"], ms.CreateVmsReply(tx["job"]["req"], True, vids))
        self.active_tx = None
        self._pump_tx()

    def _abort_tx_on_node(self, nid: int) -> None:
        tx = self.active_tx
        if tx is None or tx["kind"] != "create":
            return
        if nid not in {p.nid for p in tx["placements"]}:
            return
        self._rollback_active("node-failure")

    def _rollback_active(self, reason: str) -> None:
        tx = self.active_tx
        assert tx is not None and self.wal is not None and self.native is not None
        vids = tuple(p.vid for p in tx["placements"])
        for p in tx["placements"]:
            if self.native.view_n.get(p.nid) is NodeState.RUNNING:
                self.send(self.cluster.nd_pid(p.nid), ms.DestroyVm(p.vid, tx["tx"]))
            elif p.vid in self.native.view_v:
                # the host died with the vm; atomicity drops the entry outright
                del self.native.view_v[p.vid]
                self._emit_deltas(self.native, [Delta("vm", p.vid, "removed")])
        self.wal.append(IntentLogRecord(tx["tx"], "create", vids, TxPhase.ABORTED))
        self.trace("state", f"what=tx tx={tx['tx']} phase=aborted op=create reason={reason}")
        self.rollback_vids.update(vids)
        self.send(tx["job"]["client"], ms.CreateVmsReply(tx["job"]["req"], False, (), reason))
        self.active_tx = None
        self._pump_tx()

    def _start_destroy(self, job: dict) -> None:
        assert self.wal is not None
        results: dict[int, str] = {}
        known: list[int] = []
        for vid in job["vids"]:
            pst = self._partition_of_vid(vid)
            if pst is None or vid not in pst.view_v:
                results[vid] = "unknown"
            else:
                known.append(vid)
                results[vid] = "ok"
        if not known:
            body = tuple(sorted(results.items()))
            self.send(job["client"], ms.DestroyVmsReply(job["req"], body))
            self._pump_tx()
            return
        tx = self._next_tx()
        vids = tuple(known)
        self.wal.append(IntentLogRecord(tx, "destroy", vids, TxPhase.BEGUN))
        self.trace("state", f"what=tx tx={tx} phase=begun op=destroy "
                            f"vids={','.join(str(v) for v in vids)}")
        pending = set()
        for vid in known:
            pst = self._partition_of_vid(vid)
            assert pst is not None
            nid = self._nid_of_vid(vid)
            if pst.view_n.get(nid) is NodeState.RUNNING:
                pending.add(vid)
                self.send(self.cluster.nd_pid(nid), ms.DestroyVm(vid, tx))
            else:
                # the hosting node is gone; drop the entry directly
                pst.view_v.pop(vid, None)
                self._emit_deltas(pst, [Delta("vm", vid, "removed")])
        self.active_tx = {"kind": "destroy", "tx": tx, "job": job,
                          "pending": pending, "results": results, "vids": vids}
        if not pending:
            self._commit_destroy()

    def _on_vm_destroyed(self, src: str, msg: ms.VmDestroyed) -> None:
        pst = self._partition_of_vid(msg.vid)
        if pst is not None and msg.vid in pst.view_v:
            del pst.view_v[msg.vid]
            self._emit_deltas(pst, [Delta("vm", msg.vid, "removed")])
        elif pst is not None and msg.existed:
            # destroyed during recovery before it ever re-entered the view
            self._emit_deltas(pst, [Delta("vm", msg.vid, "removed")])
        tx = self.active_tx
        if tx is None or tx["kind"] != "destroy" or tx["tx"] != msg.tx:
            return
        tx["pending"].discard(msg.vid)
        if not tx["pending"]:
            self._commit_destroy()

    def _commit_destroy(self) -> None:
        tx = self.active_tx
        assert tx is not None and self.wal is not None
        self.wal.append(IntentLogRecord(tx["tx"], "destroy", tx["vids"], TxPhase.COMMITTED))
        self.trace("state", f"what=tx tx={tx['tx']} phase=committed op=destroy")
        body = tuple(sorted(tx["results"].items()))
        self.send(tx["job"]["client"], ms.DestroyVmsReply(tx["job"]["req"], body))
        self.active_tx = None
        self._pump_tx()

    def _on_vm_op(self, src: str, msg: ms.VmOp) -> None:
        op = canonical_op(msg.op)
        pst = self._partition_of_vid(msg.vid)
        current = pst.view_v.get(msg.vid) if pst else None
        if pst is None or current is None:
            self.send(src, ms.VmOpDone(msg.vid, op, "rejected:unknown-vid", msg.req))
            return
        try:
            apply_vm_op(current, op)
        except ProvisionError as exc:
            self.send(src, ms.VmOpDone(msg.vid, op, f"rejected:{exc}", msg.req))
            return
        nid = self._nid_of_vid(msg.vid)
        if pst.view_n.get(nid) is not NodeState.RUNNING:
            self.send(src, ms.VmOpDone(msg.vid, op, "rejected:node-down", msg.req))
            return
        self.pending_vmops[(msg.vid, msg.req)] = src
        self.send(self.cluster.nd_pid(nid), ms.VmOp(msg.vid, op, msg.req))

    def _on_vm_op_done(self, src: str, msg: ms.VmOpDone) -> None:
        client = self.pending_vmops.pop((msg.vid, msg.req), None)
        if not msg.state.startswith("rejected:"):
            pst = self._partition_of_vid(msg.vid)
            if pst is not None and msg.vid in pst.view_v:
                pst.view_v, deltas = on_vm_report(pst.view_v, msg.vid, VmState(msg.state))
                self._emit_deltas(pst, deltas)
        if client is not None:
            self.send(client, ms.VmOpDone(msg.vid, msg.op, msg.state, msg.req))

    # -- inbound dispatch ----------------------------------------------------------------------

    def do_self_leave(self) -> None:
        if self.gm is None:
            return
        self.trace("event", "what=verb verb=leave_gsd")
        self.gm, outputs = gm.self_leave(self.gm)
        self._apply(outputs)

    def on_message(self, src: str, msg: object) -> None:
        assert self.gm is not None
        if isinstance(msg, ms.Heartbeat):
            self._on_heartbeat(src, msg)
            return
        if self.gm.halted:
            # a halted daemon is out of the group; it stays silent
            return
        if isinstance(msg, ms.NewViewG):
            self._gm_event(gm.RecvNewViewG(msg.view, msg.sender_gid))
        elif isinstance(msg, ms.Ack):
            self._gm_event(gm.RecvAck(msg.sender_gid, msg.view_id))
        elif isinstance(msg, ms.CrashReport):
            self._gm_event(gm.RecvCrashReport(msg.view_id, msg.sender, msg.crasher))
        elif isinstance(msg, ms.Joining):
            self._gm_event(gm.RecvJoining(msg.address))
        elif isinstance(msg, ms.Rejoining):
            self._gm_event(gm.RecvRejoining(msg.member))
        elif isinstance(msg, ms.LeavingPropose):
            self._gm_event(gm.RecvLeavingPropose(msg.view_id, msg.member))
        elif isinstance(msg, ms.CurrentVersion):
            self._gm_event(gm.RecvCurrentVersion(msg.view_id))
        elif isinstance(msg, ms.Prepare):
            self._gm_event(gm.RecvPrepare(gm.GMember(msg.sender_gid, src)))
        elif isinstance(msg, ms.PrepareAck):
            self._gm_event(gm.RecvPrepareAck(gm.GMember(msg.sender_gid, src)))
        elif isinstance(msg, ms.BootCommit):
            self._gm_event(gm.RecvBootCommit(msg.view, msg.sender_gid))
        elif isinstance(msg, ms.Probe):
            self.send(src, ms.ProbeReply(msg.gid))
        elif isinstance(msg, ms.ProbeReply):
            if self.probes.resolve(msg.gid):
                self.cancel(f"probe:{msg.gid}")
                self._gm_event(gm.ProbeResult(gm.GMember(msg.gid, src), alive=True))
        elif isinstance(msg, ms.Register):
            self._on_register(src, msg)
        elif isinstance(msg, ms.VmStateReport):
            self._on_vm_report(src, msg)
        elif isinstance(msg, ms.NodeLeave):
            self._on_node_leave(src, msg)
        elif isinstance(msg, ms.RestartDone) or isinstance(msg, ms.RestartFailed):
            self._on_restart_result(msg)
        elif isinstance(msg, ms.StateQuery):
            self.send(src, ms.StateReply(msg.req, tuple(self._snapshots())))
        elif isinstance(msg, ms.StateReply):
            self._on_state_reply(src, msg)
        elif isinstance(msg, ms.GetClusterState):
            self._on_get_cluster_state(src, msg)
        elif isinstance(msg, ms.GetVmsState):
            self._on_get_vms_state(src, msg)
        elif isinstance(msg, ms.VmsStateQuery):
            self._on_vms_state_query(src, msg)
        elif isinstance(msg, ms.VmsStateReply):
            self._on_vms_state_reply(src, msg)
        elif isinstance(msg, ms.CreateVms):
            self._on_create_vms(src, msg)
        elif isinstance(msg, ms.DestroyVms):
            self._on_destroy_vms(src, msg)
        elif isinstance(msg, ms.VmCreated):
            self._on_vm_created(src, msg)
        elif isinstance(msg, ms.VmDestroyed):
            self._on_vm_destroyed(src, msg)
        elif isinstance(msg, ms.VmOp):
            self._on_vm_op(src, msg)
        elif isinstance(msg, ms.VmOpDone):
            self._on_vm_op_done(src, msg)
        elif isinstance(msg, ms.Subscribe):
            self.subs.subscribe(Subscription(msg.client_id, msg.filter, src))
            self.trace("state", f"what=subscribe client={msg.client_id} filter={msg.filter}")

    def _on_heartbeat(self, src: str, msg: ms.Heartbeat) -> None:
        assert self.gm is not None
        if self.gm.halted:
            return
        if msg.kind_tag == "ring":
            self.ring.refresh(("ring", src), self.now)
            if (self.gm.view is not None and msg.view_id < self.gm.view.view_id
                    and self.gm.view.by_address(src) is None):
                # a process the group moved past; tell it lazily
                self.send(src, ms.CurrentVersion(self.gm.view.view_id))
        elif msg.kind_tag == "nd":
            key = ("nd", src)
            if key in self.children.entries:
                if self.children.refresh(key, self.now, revive=True):
                    # it answered again after suspicion: ask it to re-register
                    entry = self.children.entries[key]
                    nid, label = entry.meta
                    self.send(src, ms.Adopt(self.pid, label))

    # -- finals ----------------------------------------------------------------------------------

    def snapshot_final(self) -> dict:
        view = None
        if self.gm is not None and self.gm.view is not None:
            view = (self.gm.view.view_id,
                    tuple((m.gid, m.address) for m in self.gm.view.sorted_members()))
        partitions = {}
        for pst in ([self.native] if self.native else []) + list(self.takeovers.values()):
            partitions[pst.label] = {
                "nodes": {nid: st.value for nid, st in sorted(pst.view_n.items())},
                "vms": {vid: st.value for vid, st in sorted(pst.view_v.items())},
            }
        return {
            "gid": self.my_gid,
            "rank": self.gm.rank.value if self.gm and self.gm.rank else None,
            "halted": bool(self.gm.halted) if self.gm else None,
            "view": view,
            "partitions": partitions,
        }


class ClientDaemon(Process):
    """Scenario-driven client: issues requests, remembers every reply."""

    def __init__(self, pid: str, cfg: SimConfig):
        super().__init__(pid)
        self.cfg = cfg
        self._req = 0
        self.replies: list[tuple[int, object]] = []

    def next_req(self) -> str:
        self._req += 1
        return f"r{self._req}"

    def issue(self, verb: str, target: str, msg: object) -> str:
        req = getattr(msg, "req", "")
        self.trace("event", f"what=verb verb={verb} target={target} req={req}")
        self.send(target, msg)
        return req

    def on_message(self, src: str, msg: object) -> None:
        self.replies.append((self.now, msg))

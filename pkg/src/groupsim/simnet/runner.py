"""Build a simulated cluster from a scenario and run it to quiescence."""

from __future__ import annotations

from ..gm_core import GMember
from ..provisioner import encode_vid, nid_for
from . import messages as ms
from .daemons import (ClientDaemon, ClusterMap, GsdDaemon, NdDaemon,
                      NodeAgentDaemon, PartitionInfo)
from .kernel import Kernel, RunResult
from .scenario import Scenario, ScenarioError, fmt_seconds


def _begin_record(scenario: Scenario) -> str:
    cfg = scenario.config
    topo = scenario.topology
    return (f"what=begin name={scenario.name} seed={cfg.seed} "
            f"partitions={topo.partitions} nodes_per_partition={topo.nodes_per_partition} "
            f"vms_per_node={topo.vms_per_node} h={cfg.heartbeat_interval_us} "
            f"n={cfg.heartbeat_timeout_us} lat={cfg.latency_us} jitter={cfg.latency_jitter_us} "
            f"np={cfg.max_nodes_per_partition} nv={cfg.max_vms_per_node} "
            f"t_ack={cfg.t_ack_us} restart={cfg.restart_us}")


class _Runner:
    def __init__(self, scenario: Scenario, trace_path: str | None, keep_lines: bool):
        scenario.validate()
        self.scenario = scenario
        cfg = scenario.config
        self.cfg = cfg
        self.kernel = Kernel(seed=cfg.seed, latency_us=cfg.latency_us,
                             jitter_us=cfg.latency_jitter_us, horizon_us=cfg.horizon_us,
                             drain_us=cfg.drain_us, trace_path=trace_path,
                             keep_lines=keep_lines)
        self.cluster = ClusterMap(cfg)
        self.client: ClientDaemon | None = None
        self.join_count = 0
        self.extra_nodes: dict[str, int] = {}  # partition label -> next free node index

    def build(self) -> None:
        topo = self.scenario.topology
        cfg = self.cfg
        placement = cfg.placement
        self.kernel.trace("sim", "event", _begin_record(self.scenario))
        members = []
        for gid in range(1, topo.partitions + 1):
            label = f"gsd:{gid}"
            nids = tuple(nid_for(gid, i, placement) for i in range(topo.nodes_per_partition))
            self.cluster.partitions[label] = PartitionInfo(label, gid, nids)
            members.append(GMember(gid, label))
        self.cluster.static_members = tuple(members)

        for gid in range(1, topo.partitions + 1):
            label = f"gsd:{gid}"
            info = self.cluster.partitions[label]
            for i, nid in enumerate(info.nids):
                node_pid = self.cluster.node_pid(nid)
                self.kernel.add_node(node_pid, NodeAgentDaemon(node_pid, cfg, self.cluster))
                initial = tuple(encode_vid(gid, i, s, placement)
                                for s in range(topo.vms_per_node))
                nd = NdDaemon(self.cluster.nd_pid(nid), cfg, self.cluster, nid,
                              parent=label, initial_vids=initial)
                self.kernel.spawn(nd.pid, node_pid, nd)
            home = self.cluster.node_pid(info.nids[0])
            gsd = GsdDaemon(label, cfg, self.cluster, mode="boot", gid=gid)
            self.kernel.spawn(label, home, gsd)
            self.extra_nodes[label] = topo.nodes_per_partition

        self.client = ClientDaemon("client:0", cfg)
        self.kernel.spawn("client:0", None, self.client)

        for item in sorted(self.scenario.schedule, key=lambda i: (i.time_us, i.line_no)):
            self._schedule(item)

    # -- verbs ---------------------------------------------------------------

    def _schedule(self, item) -> None:
        target = item.args[0] if item.args else "sim"
        if item.verb in ("get_cluster_state", "get_vms_state", "create_vms",
                         "destroy_vms", "subscribe", "vm_op"):
            target = "client:0"
        self.kernel.schedule_action(item.time_us, target, lambda it=item: self._run_verb(it))

    def _require_pid(self, pid: str, item) -> None:
        if self.kernel.process(pid) is None and pid not in self.kernel._nodes:
            raise ScenarioError(f"unknown target {pid!r}", item.line_no)

    def _run_verb(self, item) -> None:
        verb, args = item.verb, item.args
        kernel = self.kernel
        client = self.client
        assert client is not None
        if verb in ("crash_process", "pause_process", "resume_process"):
            self._require_pid(args[0], item)
            kernel.inject(verb, args[0])
        elif verb == "crash_node":
            self._require_pid(args[0], item)
            kernel.inject("crash_node", args[0])
        elif verb == "block_restart":
            kernel.trace(args[0], "event", "what=verb verb=block_restart")
            kernel.block_restart(args[0])
        elif verb == "join_gsd":
            self._join_gsd(tuple(args))
        elif verb == "leave_gsd":
            self._require_pid(args[0], item)
            proc = kernel.process(args[0])
            if isinstance(proc, GsdDaemon) and kernel.process_alive(args[0]):
                proc.do_self_leave()
        elif verb == "join_node":
            self._join_node(args[0], item)
        elif verb == "leave_node":
            self._require_pid(args[0], item)
            proc = kernel.process(args[0])
            if isinstance(proc, NdDaemon) and kernel.process_alive(args[0]):
                proc.do_leave()
        elif verb == "get_cluster_state":
            client.issue(verb, args[0], ms.GetClusterState(client.next_req()))
        elif verb == "get_vms_state":
            vids = tuple(int(v) for v in args[1].split(","))
            client.issue(verb, args[0], ms.GetVmsState(client.next_req(), vids))
        elif verb == "create_vms":
            node_index = int(args[2]) if len(args) > 2 else None
            client.issue(verb, args[0],
                         ms.CreateVms(client.next_req(), int(args[1]), node_index))
        elif verb == "destroy_vms":
            vids = tuple(int(v) for v in args[1].split(","))
            client.issue(verb, args[0], ms.DestroyVms(client.next_req(), vids))
        elif verb == "vm_op":
            vid = int(args[0])
            label = self.cluster.label_of_vid(vid)
            client.issue(verb, label, ms.VmOp(vid, args[1], client.next_req()))
        elif verb == "subscribe":
            client.issue(verb, args[0], ms.Subscribe(client.pid, args[1]))

    def _join_gsd(self, contacts: tuple[str, ...]) -> None:
        self.join_count += 1
        tag = f"j{self.join_count}"
        node_pid = f"node:{tag}"
        gsd_pid = f"gsd:{tag}"
        self.kernel.trace(gsd_pid, "event", "what=verb verb=join_gsd")
        self.kernel.add_node(node_pid, NodeAgentDaemon(node_pid, self.cfg, self.cluster))
        if not contacts:
            contacts = tuple(self.kernel.gsd_registry)
        gsd = GsdDaemon(gsd_pid, self.cfg, self.cluster, mode="join", contacts=contacts)
        self.kernel.spawn(gsd_pid, node_pid, gsd)

    def _join_node(self, label: str, item) -> None:
        info = self.cluster.partitions.get(label)
        if info is None:
            raise ScenarioError(f"unknown partition {label!r}", item.line_no)
        placement = self.cfg.placement
        index = self.extra_nodes.get(label, len(info.nids))
        if index >= placement.max_nodes_per_partition:
            raise ScenarioError("partition is full", item.line_no)
        self.extra_nodes[label] = index + 1
        nid = nid_for(info.gid, index, placement)
        node_pid = self.cluster.node_pid(nid)
        self.kernel.trace(node_pid, "event", "what=verb verb=join_node")
        self.kernel.add_node(node_pid, NodeAgentDaemon(node_pid, self.cfg, self.cluster))
        self.cluster.partitions[label] = PartitionInfo(label, info.gid, info.nids + (nid,))
        nd = NdDaemon(self.cluster.nd_pid(nid), self.cfg, self.cluster, nid, parent=label)
        self.kernel.spawn(nd.pid, node_pid, nd)

    # -- finals ----------------------------------------------------------------

    def collect_finals(self) -> dict:
        gsds = {}
        for pid in self.kernel.gsd_registry:
            proc = self.kernel.process(pid)
            if isinstance(proc, GsdDaemon):
                entry = proc.snapshot_final()
                entry["alive"] = self.kernel.process_alive(pid)
                gsds[pid] = entry
        client = self.client
        replies = []
        if client is not None:
            for t, msg in client.replies:
                replies.append((t, msg.kind, msg.fields()))
        return {"gsds": gsds, "client": replies}


def run_scenario(scenario: Scenario, trace_path: str | None = None,
                 keep_lines: bool | None = None) -> RunResult:
    """Execute a scenario deterministically and return the run result with
    the trace (in memory, on disk, or both) and final daemon snapshots."""
    if keep_lines is None:
        keep_lines = trace_path is None
    runner = _Runner(scenario, trace_path, keep_lines)
    runner.build()
    result = runner.kernel.run()
    result.finals = runner.collect_finals()
    return result

"""Shared scenario builders for the simulation tests."""

from groupsim.simnet import Scenario
from groupsim.simnet.scenario import ScheduleItem, SimConfig, Topology

US = 1_000_000


def make_scenario(partitions=3, nodes=1, vms=0, schedule=(), *, seed=1, h=1.0, n=5.0,
                  latency=0.001, jitter=0.0, horizon=200.0, np=16, nv=8,
                  restart_delay=0.0, name="test", op_delays=None):
    """Build a Scenario object directly; schedule entries are (time_s, verb, *args)."""
    items = []
    for line_no, entry in enumerate(schedule, start=1):
        time_s, verb, *args = entry
        items.append(ScheduleItem(int(time_s * US), verb,
                                  tuple(str(a) for a in args), line_no))
    cfg = SimConfig(
        seed=seed,
        heartbeat_interval_us=int(h * US),
        heartbeat_timeout_us=int(n * US),
        latency_us=int(latency * US),
        latency_jitter_us=int(jitter * US),
        restart_delay_us=int(restart_delay * US),
        max_nodes_per_partition=np,
        max_vms_per_node=nv,
        horizon_us=int(horizon * US),
    )
    if op_delays:
        delays = dict(cfg.op_delays_us)
        delays.update({k: int(v * US) for k, v in op_delays.items()})
        cfg = SimConfig(**{**cfg.__dict__, "op_delays_us": tuple(sorted(delays.items()))})
    topo = Topology(partitions=partitions, nodes_per_partition=nodes, vms_per_node=vms)
    return Scenario(topology=topo, config=cfg, schedule=tuple(items), name=name)


def views_in(trace_lines):
    """(time_us, pid, inc, view_id, members-token) for every installed view."""
    out = []
    for line in trace_lines:
        parts = line.split(" ", 3)
        if len(parts) == 4 and parts[2] == "view":
            fields = dict(tok.partition("=")[::2] for tok in parts[3].split(" "))
            whole, _, frac = parts[0].partition(".")
            t = int(whole) * US + int(frac)
            out.append((t, parts[1], int(fields["inc"]), int(fields["view_id"]),
                        fields["members"]))
    return out


def final_view(finals, pid):
    return finals["gsds"][pid]["view"]


def member_gids(view):
    return tuple(g for g, _ in view[1])

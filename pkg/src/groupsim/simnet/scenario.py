"""Declarative simulation input.

A scenario is a line-oriented text file with three sections::

    [topology]
    partitions = 3
    nodes_per_partition = 2
    vms_per_node = 4

    [config]
    seed = 42
    heartbeat_interval = 1
    heartbeat_timeout = 5

    [schedule]
    10 crash_process gsd:2
    20 create_vms gsd:1 3

Schedule lines are ``<time> <verb> <args...>``. All times are simulated
seconds; internally everything is integer microseconds so arithmetic stays
exact and traces stay byte-stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from pathlib import Path

from ..provisioner import PlacementConfig

US = 1_000_000


class ScenarioError(ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


def _to_us(text: str, line_no: int | None = None) -> int:
    try:
        value = Decimal(text)
    except InvalidOperation:
        raise ScenarioError(f"bad time/duration {text!r}", line_no) from None
    if value < 0:
        raise ScenarioError(f"negative time {text!r}", line_no)
    return int(value * US)


def fmt_seconds(us: int) -> str:
    whole, frac = divmod(us, US)
    if frac == 0:
        return str(whole)
    return f"{whole}.{frac:06d}".rstrip("0")


@dataclass(frozen=True)
class Topology:
    partitions: int = 1
    nodes_per_partition: int = 1
    vms_per_node: int = 0

    def validate(self, placement: PlacementConfig) -> None:
        if self.partitions < 1:
            raise ScenarioError("need at least one partition")
        if self.nodes_per_partition < 1:
            raise ScenarioError("need at least one node per partition")
        if self.vms_per_node < 0:
            raise ScenarioError("vms_per_node must be non-negative")
        if self.nodes_per_partition > placement.max_nodes_per_partition:
            raise ScenarioError("nodes_per_partition exceeds placement limit")
        if self.vms_per_node > placement.max_vms_per_node:
            raise ScenarioError("vms_per_node exceeds placement limit")


# operation delays applied at the node daemon, keyed by verb; defaults mirror
# typical hypervisor latencies and carry no correctness weight
DEFAULT_OP_DELAYS_US = {
    "create": 3_765_000,
    "destroy": 100_000,
    "start": 1_000_000,
    "shutdown": 11_732_000,
    "reboot": 1_000_000,
    "resize": 391_000,
    "suspend": 6_992_000,
    "resume": 5_813_000,
}


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    heartbeat_interval_us: int = 1 * US
    heartbeat_timeout_us: int = 5 * US
    latency_us: int = 1_000
    latency_jitter_us: int = 0
    ack_timeout_us: int = 0          # 0 = derive from latency and heartbeat
    restart_delay_us: int = 0        # 0 = one heartbeat interval
    max_restart_attempts: int = 2
    max_nodes_per_partition: int = 256
    max_vms_per_node: int = 16
    horizon_us: int = 600 * US
    op_delays_us: tuple[tuple[str, int], ...] = tuple(sorted(DEFAULT_OP_DELAYS_US.items()))

    def validate(self) -> None:
        if not 0 < self.heartbeat_interval_us < self.heartbeat_timeout_us:
            raise ScenarioError("need 0 < heartbeat_interval < heartbeat_timeout")
        if self.latency_us <= 0:
            raise ScenarioError("latency must be positive")
        if self.latency_jitter_us < 0:
            raise ScenarioError("latency_jitter must be non-negative")
        if self.horizon_us <= 0:
            raise ScenarioError("horizon must be positive")
        PlacementConfig(self.max_nodes_per_partition, self.max_vms_per_node)

    # Derived knobs. Every timer in the system comes from these so that one
    # config line changes behaviour coherently.

    @property
    def placement(self) -> PlacementConfig:
        return PlacementConfig(self.max_nodes_per_partition, self.max_vms_per_node)

    @property
    def latency_bound_us(self) -> int:
        return self.latency_us + self.latency_jitter_us

    @property
    def t_ack_us(self) -> int:
        if self.ack_timeout_us:
            return self.ack_timeout_us
        return 2 * self.latency_bound_us + self.heartbeat_interval_us

    @property
    def probe_timeout_us(self) -> int:
        return 2 * self.heartbeat_interval_us

    @property
    def restart_us(self) -> int:
        return self.restart_delay_us or self.heartbeat_interval_us

    @property
    def rejoin_retry_us(self) -> int:
        return self.t_ack_us + self.heartbeat_interval_us

    @property
    def fetch_timeout_us(self) -> int:
        return self.heartbeat_timeout_us + 3 * self.heartbeat_interval_us

    @property
    def watchdog_us(self) -> int:
        return self.restart_us + 1 * US + 4 * self.latency_bound_us

    @property
    def drain_us(self) -> int:
        # longest silent gap between a state change and the next one it causes
        return (self.heartbeat_timeout_us + 3 * self.heartbeat_interval_us
                + self.t_ack_us + self.restart_us + 1 * US)

    def op_delay_us(self, op: str) -> int:
        return dict(self.op_delays_us).get(op, 1 * US)


VERBS = {
    "crash_process": 1,
    "crash_node": 1,
    "pause_process": 1,
    "resume_process": 1,
    "block_restart": 1,
    "join_gsd": 0,
    "leave_gsd": 1,
    "join_node": 1,
    "leave_node": 1,
    "create_vms": 2,       # gsd target, count [node_index]
    "destroy_vms": 2,      # gsd target, vid list
    "vm_op": 2,            # vid, op
    "get_cluster_state": 1,
    "get_vms_state": 2,    # gsd target, vid list
    "subscribe": 2,        # gsd target, filter
}

_OPTIONAL_ARGS = {"create_vms": 1, "join_gsd": 4}


@dataclass(frozen=True)
class ScheduleItem:
    time_us: int
    verb: str
    args: tuple[str, ...]
    line_no: int = 0


@dataclass
class Scenario:
    topology: Topology = field(default_factory=Topology)
    config: SimConfig = field(default_factory=SimConfig)
    schedule: tuple[ScheduleItem, ...] = ()
    name: str = "scenario"

    def validate(self) -> None:
        self.config.validate()
        self.topology.validate(self.config.placement)
        for item in self.schedule:
            if item.verb not in VERBS:
                raise ScenarioError(f"unknown verb {item.verb!r}", item.line_no)
            need = VERBS[item.verb]
            extra = _OPTIONAL_ARGS.get(item.verb, 0)
            if not need <= len(item.args) <= need + extra:
                raise ScenarioError(
                    f"verb {item.verb} takes {need} argument(s), got {len(item.args)}",
                    item.line_no)
            if item.time_us > self.config.horizon_us:
                raise ScenarioError(f"schedule time beyond horizon", item.line_no)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, config=replace(self.config, seed=seed))

    def to_text(self) -> str:
        cfg = self.config
        lines = [
            "[topology]",
            f"partitions = {self.topology.partitions}",
            f"nodes_per_partition = {self.topology.nodes_per_partition}",
            f"vms_per_node = {self.topology.vms_per_node}",
            "",
            "[config]",
            f"seed = {cfg.seed}",
            f"heartbeat_interval = {fmt_seconds(cfg.heartbeat_interval_us)}",
            f"heartbeat_timeout = {fmt_seconds(cfg.heartbeat_timeout_us)}",
            f"latency = {fmt_seconds(cfg.latency_us)}",
            f"latency_jitter = {fmt_seconds(cfg.latency_jitter_us)}",
            f"ack_timeout = {fmt_seconds(cfg.ack_timeout_us)}",
            f"restart_delay = {fmt_seconds(cfg.restart_delay_us)}",
            f"max_restart_attempts = {cfg.max_restart_attempts}",
            f"max_nodes_per_partition = {cfg.max_nodes_per_partition}",
            f"max_vms_per_node = {cfg.max_vms_per_node}",
            f"horizon = {fmt_seconds(cfg.horizon_us)}",
        ]
        for op, delay in cfg.op_delays_us:
            lines.append(f"op_delay_{op} = {fmt_seconds(delay)}")
        lines.append("")
        lines.append("[schedule]")
        for item in sorted(self.schedule, key=lambda i: (i.time_us, i.line_no)):
            args = " ".join(item.args)
            lines.append(f"{fmt_seconds(item.time_us)} {item.verb} {args}".rstrip())
        lines.append("")
        return "\n".join(lines)

    @classmethod
    def parse(cls, text: str, name: str = "scenario") -> "Scenario":
        topo_kv: dict[str, str] = {}
        cfg_kv: dict[str, str] = {}
        schedule: list[ScheduleItem] = []
        section = None
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("["):
                if line not in ("[topology]", "[config]", "[schedule]"):
                    raise ScenarioError(f"unknown section {line}", line_no)
                section = line[1:-1]
                continue
            if section in ("topology", "config"):
                if "=" not in line:
                    raise ScenarioError(f"expected key = value, got {line!r}", line_no)
                key, _, value = line.partition("=")
                target = topo_kv if section == "topology" else cfg_kv
                target[key.strip()] = value.strip()
            elif section == "schedule":
                parts = line.split()
                if len(parts) < 2:
                    raise ScenarioError(f"expected '<time> <verb> ...', got {line!r}", line_no)
                time_us = _to_us(parts[0], line_no)
                schedule.append(ScheduleItem(time_us, parts[1], tuple(parts[2:]), line_no))
            else:
                raise ScenarioError(f"content before any section: {line!r}", line_no)

        def topo_int(key, default):
            try:
                return int(topo_kv.pop(key, default))
            except ValueError:
                raise ScenarioError(f"bad integer for {key}") from None

        topology = Topology(
            partitions=topo_int("partitions", 1),
            nodes_per_partition=topo_int("nodes_per_partition", 1),
            vms_per_node=topo_int("vms_per_node", 0),
        )
        if topo_kv:
            raise ScenarioError(f"unknown topology key {next(iter(topo_kv))!r}")

        def cfg_int(key, default):
            try:
                return int(cfg_kv.pop(key, default))
            except ValueError:
                raise ScenarioError(f"bad integer for {key}") from None

        def cfg_us(key, default_us):
            if key not in cfg_kv:
                return default_us
            return _to_us(cfg_kv.pop(key))

        op_delays = dict(DEFAULT_OP_DELAYS_US)
        for key in list(cfg_kv):
            if key.startswith("op_delay_"):
                op = key[len("op_delay_"):]
                if op not in op_delays:
                    raise ScenarioError(f"unknown operation delay {key!r}")
                op_delays[op] = _to_us(cfg_kv.pop(key))

        defaults = SimConfig()
        config = SimConfig(
            seed=cfg_int("seed", 0),
            heartbeat_interval_us=cfg_us("heartbeat_interval", defaults.heartbeat_interval_us),
            heartbeat_timeout_us=cfg_us("heartbeat_timeout", defaults.heartbeat_timeout_us),
            latency_us=cfg_us("latency", defaults.latency_us),
            latency_jitter_us=cfg_us("latency_jitter", 0),
            ack_timeout_us=cfg_us("ack_timeout", 0),
            restart_delay_us=cfg_us("restart_delay", 0),
            max_restart_attempts=cfg_int("max_restart_attempts", 2),
            max_nodes_per_partition=cfg_int("max_nodes_per_partition", 256),
            max_vms_per_node=cfg_int("max_vms_per_node", 16),
            horizon_us=cfg_us("horizon", defaults.horizon_us),
            op_delays_us=tuple(sorted(op_delays.items())),
        )
        if cfg_kv:
            raise ScenarioError(f"unknown config key {next(iter(cfg_kv))!r}")

        scenario = cls(topology=topology, config=config, schedule=tuple(schedule), name=name)
        scenario.validate()
        return scenario

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        return cls.parse(path.read_text(), name=path.stem)

"""Deterministic discrete-event kernel.

Virtual clock, reliable FIFO channels, timers, process/node lifecycle, fault
injection and the append-only trace. Simultaneous events are ordered by
(time, process id, sequence number), so a rerun of the same scenario and seed
replays the exact same byte stream.

Liveness accounting drives termination: heartbeat traffic and monitor
deadlines are "background" and never keep the run alive; everything else is a
liveness event. The run ends when no liveness events are pending and a drain
window has passed without one, or at the horizon.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Callable

US = 1_000_000


def fmt_time(us: int) -> str:
    return f"{us // US}.{us % US:06d}"


class TraceWriter:
    """Append-only trace sink with a running content hash."""

    def __init__(self, path: str | None = None, keep_lines: bool = True):
        self.path = path
        self.lines: list[str] | None = [] if keep_lines else None
        self._file = open(path, "w") if path else None
        self._hash = hashlib.sha256()
        self.count = 0

    def write(self, time_us: int, pid: str, kind: str, payload: str) -> None:
        line = f"{fmt_time(time_us)} {pid} {kind} {payload}"
        self._hash.update(line.encode())
        self._hash.update(b"\n")
        self.count += 1
        if self.lines is not None:
            self.lines.append(line)
        if self._file is not None:
            self._file.write(line)
            self._file.write("\n")

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    @property
    def sha256(self) -> str:
        return self._hash.hexdigest()


class Process:
    """Base class for every simulated daemon.

    Subclasses react to ``on_start``, ``on_message`` and ``on_timer``; all
    side effects go back through the kernel so ordering stays deterministic.
    One timer per tag: re-arming a tag silently replaces the previous timer.
    """

    def __init__(self, pid: str):
        self.pid = pid
        self.kernel: "Kernel" = None  # type: ignore[assignment]
        self.node_id: str | None = None
        self._timer_gen: dict[str, int] = {}

    # lifecycle hooks -------------------------------------------------------

    def on_start(self) -> None:
        pass

    def on_message(self, src: str, msg: object) -> None:
        pass

    def on_timer(self, tag: str, data: object) -> None:
        pass

    # conveniences ----------------------------------------------------------

    @property
    def now(self) -> int:
        return self.kernel.now

    def send(self, dst: str, msg: object, background: bool = False) -> None:
        self.kernel.send(self.pid, dst, msg, background=background)

    def arm(self, tag: str, delay_us: int, data: object = None, background: bool = False) -> None:
        gen = self._timer_gen.get(tag, 0) + 1
        self._timer_gen[tag] = gen
        self.kernel.schedule_timer(self.pid, tag, gen, delay_us, data, background)

    def cancel(self, tag: str) -> None:
        self._timer_gen[tag] = self._timer_gen.get(tag, 0) + 1

    def timer_is_current(self, tag: str, gen: int) -> bool:
        return self._timer_gen.get(tag, 0) == gen

    def trace(self, kind: str, payload: str) -> None:
        self.kernel.trace(self.pid, kind, payload)


@dataclass
class _ProcSlot:
    proc: Process
    node_id: str | None
    incarnation: int
    alive: bool = True
    paused: bool = False
    deferred: list = field(default_factory=list)


@dataclass
class _Channel:
    seq: int = 0
    last_deliver_us: int = 0


@dataclass
class RunResult:
    quiescent: bool
    end_time_us: int
    trace_sha256: str
    trace_lines: list[str] | None
    trace_path: str | None
    record_count: int
    live_events: tuple[str, ...] = ()
    finals: dict = field(default_factory=dict)


# heap entry kinds
_START, _DELIVER, _TIMER, _ACTION = 0, 1, 2, 3


class Kernel:
    def __init__(self, *, seed: int = 0, latency_us: int = 1000, jitter_us: int = 0,
                 horizon_us: int = 600 * US, drain_us: int = 15 * US,
                 trace_path: str | None = None, keep_lines: bool = True):
        self.now = 0
        self.seed = seed
        self.latency_us = latency_us
        self.jitter_us = jitter_us
        self.horizon_us = horizon_us
        self.drain_us = drain_us
        self.rng = random.Random(seed)
        self.writer = TraceWriter(trace_path, keep_lines=keep_lines)
        self._heap: list = []
        self._seq = 0
        self._procs: dict[str, _ProcSlot] = {}
        self._nodes: dict[str, bool] = {}           # node pid -> alive
        self._node_agents: dict[str, Process] = {}
        self._channels: dict[tuple[str, str], _Channel] = {}
        self._durable: dict[tuple[str, str], dict] = {}
        self._blocked: set[str] = set()
        self._pending_liveness = 0
        self._last_activity = 0
        self.gsd_registry: list[str] = []            # every gsd pid ever spawned

    # -- trace ---------------------------------------------------------------

    def trace(self, pid: str, kind: str, payload: str) -> None:
        self.writer.write(self.now, pid, kind, payload)

    # -- scheduling primitives ------------------------------------------------

    def _push(self, time_us: int, pid: str, kind: int, payload: tuple, background: bool) -> None:
        self._seq += 1
        if not background:
            self._pending_liveness += 1
        heapq.heappush(self._heap, (time_us, pid, self._seq, kind, payload, background))

    def schedule_action(self, time_us: int, pid: str, fn: Callable[[], None]) -> None:
        """Run an injection/verb callback at an absolute simulated time."""
        self._push(time_us, pid, _ACTION, (fn,), background=False)

    def schedule_timer(self, pid: str, tag: str, gen: int, delay_us: int,
                       data: object, background: bool) -> None:
        self._push(self.now + delay_us, pid, _TIMER, (tag, gen, data), background)

    # -- nodes and processes ---------------------------------------------------

    def add_node(self, node_id: str, agent: Process | None = None) -> None:
        self._nodes[node_id] = True
        if agent is not None:
            self.spawn(agent.pid, node_id, agent)
            self._node_agents[node_id] = agent

    def node_alive(self, node_id: str | None) -> bool:
        return node_id is not None and self._nodes.get(node_id, False)

    def block_restart(self, pid: str) -> None:
        self._blocked.add(pid)

    def is_blocked(self, pid: str) -> bool:
        return pid in self._blocked

    def spawn(self, pid: str, node_id: str | None, proc: Process, delay_us: int = 0) -> bool:
        """Start a process on a node. Refused for blocked pids, dead nodes, or
        a pid that is still alive."""
        if pid in self._blocked:
            return False
        if node_id is not None and not self._nodes.get(node_id, False):
            return False
        slot = self._procs.get(pid)
        if slot is not None and slot.alive:
            return False
        incarnation = slot.incarnation + 1 if slot else 0
        proc.kernel = self
        proc.node_id = node_id
        self._procs[pid] = _ProcSlot(proc, node_id, incarnation)
        if pid.startswith("gsd:") and pid not in self.gsd_registry:
            self.gsd_registry.append(pid)
        self._push(self.now + delay_us, pid, _START, (incarnation,), background=False)
        return True

    def process_alive(self, pid: str) -> bool:
        slot = self._procs.get(pid)
        return slot is not None and slot.alive

    def incarnation(self, pid: str) -> int:
        slot = self._procs.get(pid)
        return slot.incarnation if slot else -1

    def process(self, pid: str) -> Process | None:
        slot = self._procs.get(pid)
        return slot.proc if slot else None

    def node_of(self, pid: str) -> str | None:
        slot = self._procs.get(pid)
        return slot.node_id if slot else None

    def processes_on(self, node_id: str) -> list[str]:
        return sorted(p for p, s in self._procs.items() if s.node_id == node_id and s.alive)

    def stop_process(self, pid: str, reason: str = "stopped") -> None:
        """Stop a daemon (crash or deliberate kill): volatile state is gone,
        the durable cell survives while the node does."""
        slot = self._procs.get(pid)
        if slot is None or not slot.alive:
            return
        slot.alive = False
        slot.paused = False
        slot.deferred.clear()
        self.trace(pid, "state", f"what=stopped reason={reason}")

    def crash_node(self, node_id: str) -> None:
        if not self._nodes.get(node_id, False):
            return
        self._nodes[node_id] = False
        for pid in list(self._procs):
            slot = self._procs[pid]
            if slot.node_id == node_id and slot.alive:
                self.stop_process(pid, reason="node-crash")
        # volatile and durable state on the node is lost
        for key in [k for k in self._durable if k[0] == node_id]:
            del self._durable[key]

    def pause_process(self, pid: str) -> None:
        slot = self._procs.get(pid)
        if slot is not None and slot.alive:
            slot.paused = True

    def resume_process(self, pid: str) -> None:
        slot = self._procs.get(pid)
        if slot is None or not slot.alive or not slot.paused:
            return
        slot.paused = False
        # The backlog drains before any frozen timer fires: queued messages
        # were buffered by the network the whole time, so the process catches
        # up on them first and stale deadlines do not cause false alarms.
        deferred, slot.deferred = slot.deferred, []
        for kind, payload, background in deferred:
            if kind == _DELIVER:
                self._push(self.now, pid, kind, payload, background)
        for kind, payload, background in deferred:
            if kind != _DELIVER:
                self._push(self.now, pid, kind, payload, background)

    def is_paused(self, pid: str) -> bool:
        slot = self._procs.get(pid)
        return slot is not None and slot.paused

    def durable(self, node_id: str, key: str) -> dict:
        return self._durable.setdefault((node_id, key), {})

    # -- messaging --------------------------------------------------------------

    def send(self, src: str, dst: str, msg: object, background: bool = False) -> None:
        chan = self._channels.setdefault((src, dst), _Channel())
        chan.seq += 1
        seq = chan.seq
        fields = msg.fields()  # type: ignore[attr-defined]
        name = msg.kind  # type: ignore[attr-defined]
        base = f"msg={name} seq={seq}" + (f" {fields}" if fields else "")
        self.trace(src, "send", f"dst={dst} {base}")
        dst_slot = self._procs.get(dst)
        if dst_slot is None or not dst_slot.alive:
            self.trace(src, "drop", f"dst={dst} {base} reason=dead")
            return
        if self.jitter_us:
            lat = self.latency_us + self.rng.randint(0, self.jitter_us)
        else:
            lat = self.latency_us
        deliver_at = max(self.now + lat, chan.last_deliver_us)
        chan.last_deliver_us = deliver_at
        self._push(deliver_at, dst, _DELIVER,
                   (src, msg, base, dst_slot.incarnation), background)

    # -- fault injection ----------------------------------------------------------

    def inject(self, kind: str, target: str) -> None:
        self.trace(target, "fault", f"kind={kind}")
        if kind == "crash_process":
            self.stop_process(target, reason="fault")
        elif kind == "crash_node":
            self.crash_node(target)
        elif kind == "pause_process":
            self.pause_process(target)
        elif kind == "resume_process":
            self.resume_process(target)
        else:
            raise ValueError(f"unknown fault kind {kind}")

    # -- main loop -------------------------------------------------------------------

    def _dispatch(self, pid: str, kind: int, payload: tuple) -> None:
        slot = self._procs.get(pid)
        if kind == _ACTION:
            payload[0]()
            return
        if kind == _START:
            if slot is None or not slot.alive or slot.incarnation != payload[0]:
                return
            slot.proc.trace("event", f"what=start inc={slot.incarnation}")
            slot.proc.on_start()
            return
        if slot is None or not slot.alive:
            if kind == _DELIVER:
                src, msg, base, _ = payload
                self.trace(pid, "drop", f"src={src} {base} reason=dead")
            return
        if kind == _DELIVER:
            src, msg, base, inc = payload
            if inc != slot.incarnation:
                self.trace(pid, "drop", f"src={src} {base} reason=incarnation")
                return
            if slot.paused:
                slot.deferred.append((kind, payload, True))
                return
            self.trace(pid, "deliver", f"src={src} {base}")
            slot.proc.on_message(src, msg)
            return
        if kind == _TIMER:
            tag, gen, data = payload
            if slot.paused:
                slot.deferred.append((kind, payload, True))
                return
            if not slot.proc.timer_is_current(tag, gen):
                return
            slot.proc.on_timer(tag, data)
            return

    def run(self) -> RunResult:
        self._last_activity = self.now
        quiescent = True
        live: tuple[str, ...] = ()
        while self._heap:
            time_us, pid, _seq, kind, payload, background = self._heap[0]
            if self._pending_liveness == 0 and time_us > self._last_activity + self.drain_us:
                break
            if time_us > self.horizon_us:
                if self._pending_liveness > 0:
                    quiescent = False
                    live = tuple(sorted(
                        f"{fmt_time(t)} {p} {self._describe_entry(k, pl)}"
                        for t, p, _s, k, pl, bg in self._heap if not bg))[:8]
                break
            heapq.heappop(self._heap)
            self.now = time_us
            if not background:
                self._pending_liveness -= 1
                self._last_activity = time_us
            self._dispatch(pid, kind, payload)
        end = max(self.now, min(self._last_activity + self.drain_us, self.horizon_us))
        self.now = end
        status = "quiescent" if quiescent else "horizon-timeout"
        self.trace("sim", "event", f"what=end status={status}")
        self.writer.close()
        return RunResult(
            quiescent=quiescent,
            end_time_us=end,
            trace_sha256=self.writer.sha256,
            trace_lines=self.writer.lines,
            trace_path=self.writer.path,
            record_count=self.writer.count,
            live_events=live,
        )

    @staticmethod
    def _describe_entry(kind: int, payload: tuple) -> str:
        if kind == _DELIVER:
            return f"deliver {payload[2]}"
        if kind == _TIMER:
            return f"timer tag={payload[0]}"
        if kind == _START:
            return "start"
        return "action"

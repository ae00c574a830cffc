"""Post-hoc trace analysis: invariant suites evaluated over a finished run.

Every property is computed from the trace alone, so the same file can be
re-checked, diffed against goldens, and corrupted on purpose to prove the
checker bites. One streaming pass collects compact summaries; the property
verdicts are derived afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

US = 1_000_000

PROP_ALIASES = {
    "5.1": "self-inclusion",
    "5.2": "monotonicity",
    "5.3": "agreement",
    "5.4": "termination",
}

ALL_PROPS = (
    "self-inclusion", "monotonicity", "agreement", "termination",
    "single-round", "fifo", "cascade", "detection", "lifecycle", "transactions",
)


class TraceError(ValueError):
    """The trace is unreadable or incomplete."""


@dataclass(frozen=True)
class Record:
    time_us: int
    pid: str
    kind: str
    payload: str
    offset: int

    def fields(self) -> dict[str, str]:
        out = {}
        for token in self.payload.split(" "):
            key, _, value = token.partition("=")
            out[key] = value
        return out


def _parse_time(text: str) -> int:
    whole, _, frac = text.partition(".")
    return int(whole) * US + int(frac or 0)


def iter_records(lines: Iterable[str]) -> Iterator[Record]:
    for offset, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split(" ", 3)
        if len(parts) < 3:
            raise TraceError(f"line {offset}: malformed record {line!r}")
        time_us = _parse_time(parts[0])
        payload = parts[3] if len(parts) == 4 else ""
        yield Record(time_us, parts[1], parts[2], payload, offset)


def load_lines(source: str | Path | list[str]) -> Iterable[str]:
    if isinstance(source, list):
        return source
    return Path(source).read_text().splitlines()


@dataclass
class Violation:
    prop: str
    offset: int
    detail: str

    def render(self) -> str:
        return f"offset={self.offset} {self.detail}"


@dataclass
class PropResult:
    name: str
    passed: bool
    violations: list[Violation] = field(default_factory=list)

    def first(self) -> Violation | None:
        return self.violations[0] if self.violations else None


@dataclass
class CheckReport:
    scenario: str
    seed: str
    quiescent: bool
    results: dict[str, PropResult]
    counts: dict[str, int]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def render(self) -> str:
        lines = [f"scenario={self.scenario} seed={self.seed} "
                 f"quiescent={int(self.quiescent)}"]
        for name in sorted(self.results):
            res = self.results[name]
            status = "pass" if res.passed else "FAIL"
            line = f"prop={name} status={status}"
            head = res.first()
            if head is not None:
                line += f" first={head.render()}"
            lines.append(line)
        for key in sorted(self.counts):
            lines.append(f"count={key} value={self.counts[key]}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# streaming collection


_VM_EDGES = {
    "running": {"crashed", "suspended", "halted", "removed"},
    "crashed": {"running", "removed"},
    "suspended": {"running", "crashed", "removed"},
    "halted": {"running", "crashed", "removed"},
}


@dataclass
class _Chan:
    sent: int = 0
    last_delivered: int = 0
    inflight: dict = field(default_factory=dict)   # seq -> msg kind


class _Collector:
    def __init__(self) -> None:
        self.begin: dict[str, str] = {}
        self.end_status: str | None = None
        self.last_time = 0
        self.clock_violations: list[Violation] = []
        # liveness
        self.last_start: dict[str, tuple[int, int]] = {}      # pid -> (time, inc)
        self.last_stop: dict[str, int] = {}
        self.last_halt: dict[str, tuple[int, str]] = {}
        self.paused: dict[str, int] = {}                      # pid -> pause time
        self.pause_spans: dict[str, list[tuple[int, int]]] = {}
        self.crash_times: dict[str, list[int]] = {}
        self.fault_count = 0
        # membership
        self.views: list[tuple] = []   # (time, pid, inc, view_id, self_gid, rank, members, offset)
        self.last_view_time: dict[str, int] = {}
        self.members_by_id: dict[int, dict[int, str]] = {}
        self.view_conflicts: list[Violation] = []
        self.newview_sends: dict[int, int] = {}
        self.ack_sends: dict[int, int] = {}
        # channels
        self.chans: dict[tuple[str, str], _Chan] = {}
        self.chan_violations: list[Violation] = []
        self.msg_counts: dict[str, int] = {}
        # suspicion
        self.suspects: list[tuple] = []  # (time, monitor, kind, target, epoch, offset)
        self.suspect_keys: dict[tuple, int] = {}
        # partition state
        self.node_state: dict[tuple[str, int], str] = {}
        self.vm_state: dict[tuple[str, int], str] = {}
        self.vm_exists: dict[str, set[int]] = {}
        self.lifecycle_violations: list[Violation] = []
        # transactions
        self.tx_phases: dict[str, list[tuple[str, tuple[int, ...], int]]] = {}
        self.tx_order: list[str] = []

    # -- per-record hooks ---------------------------------------------------

    def feed(self, rec: Record) -> None:
        if rec.time_us < self.last_time:
            self.clock_violations.append(Violation(
                "fifo", rec.offset, f"time went backwards at {rec.pid}"))
        self.last_time = rec.time_us
        kind = rec.kind
        if kind == "send":
            self._feed_send(rec)
        elif kind == "deliver" or kind == "drop":
            self._feed_deliver(rec, dropped=(kind == "drop"))
        elif kind == "view":
            self._feed_view(rec)
        elif kind == "state":
            self._feed_state(rec)
        elif kind == "fault":
            self._feed_fault(rec)
        elif kind == "event":
            f = rec.fields()
            what = f.get("what")
            if what == "begin":
                self.begin = f
            elif what == "end":
                self.end_status = f.get("status", "")
            elif what == "start":
                self.last_start[rec.pid] = (rec.time_us, int(f.get("inc", "0")))

    def _feed_send(self, rec: Record) -> None:
        f = rec.fields()
        msg = f.get("msg", "?")
        self.msg_counts[msg] = self.msg_counts.get(msg, 0) + 1
        seq = int(f["seq"])
        chan = self.chans.setdefault((rec.pid, f["dst"]), _Chan())
        if seq != chan.sent + 1:
            self.chan_violations.append(Violation(
                "fifo", rec.offset, f"send seq gap on {rec.pid}->{f['dst']}"))
        chan.sent = seq
        chan.inflight[seq] = msg
        if msg == "NewViewG":
            vid = int(f["view_id"])
            self.newview_sends[vid] = self.newview_sends.get(vid, 0) + 1
        elif msg == "Ack":
            vid = int(f["view_id"])
            self.ack_sends[vid] = self.ack_sends.get(vid, 0) + 1

    def _feed_deliver(self, rec: Record, dropped: bool) -> None:
        f = rec.fields()
        src = f.get("src", rec.pid if dropped else "?")
        dst = f.get("dst", rec.pid)
        if dropped and "dst" in f:
            # drop recorded at the sender: channel is (sender, dst)
            chan_key = (rec.pid, f["dst"])
        else:
            chan_key = (src, rec.pid)
        seq = int(f["seq"])
        chan = self.chans.setdefault(chan_key, _Chan())
        if seq not in chan.inflight:
            self.chan_violations.append(Violation(
                "fifo", rec.offset,
                f"{'drop' if dropped else 'deliver'} of unknown seq {seq} on {chan_key[0]}->{chan_key[1]}"))
            return
        if not dropped:
            if seq <= chan.last_delivered:
                self.chan_violations.append(Violation(
                    "fifo", rec.offset, f"out-of-order delivery on {chan_key[0]}->{chan_key[1]}"))
            chan.last_delivered = seq
        del chan.inflight[seq]

    def _feed_view(self, rec: Record) -> None:
        f = rec.fields()
        view_id = int(f["view_id"])
        self_gid = int(f["self"])
        inc = int(f.get("inc", "0"))
        members: dict[int, str] = {}
        if f.get("members"):
            for token in f["members"].split(","):
                gid, _, address = token.partition(":")
                members[int(gid)] = address
        known = self.members_by_id.get(view_id)
        if known is None:
            self.members_by_id[view_id] = members
        elif known != members:
            self.view_conflicts.append(Violation(
                "agreement", rec.offset,
                f"view {view_id} installed with differing member sets"))
        self.views.append((rec.time_us, rec.pid, inc, view_id, self_gid,
                           f.get("rank", ""), members, rec.offset))
        self.last_view_time[rec.pid] = rec.time_us

    def _feed_state(self, rec: Record) -> None:
        f = rec.fields()
        what = f.get("what")
        if what == "suspect":
            target = f["target"]
            epoch = f.get("epoch", "0")
            key = (rec.pid, target, epoch)
            self.suspect_keys[key] = self.suspect_keys.get(key, 0) + 1
            self.suspects.append((rec.time_us, rec.pid, f.get("kind", "?"),
                                  target, epoch, rec.offset))
        elif what == "stopped":
            self.last_stop[rec.pid] = rec.time_us
            if f.get("reason") in ("fault", "node-crash"):
                self.crash_times.setdefault(rec.pid, []).append(rec.time_us)
        elif what == "halt":
            self.last_halt[rec.pid] = (rec.time_us, f.get("reason", ""))
        elif what == "node_status":
            self.node_state[(f["label"], int(f["nid"]))] = f["status"]
        elif what == "vm_status":
            label, vid, status = f["label"], int(f["vid"]), f["status"]
            prev = self.vm_state.get((label, vid))
            exists = self.vm_exists.setdefault(label, set())
            if status == "removed":
                exists.discard(vid)
            else:
                exists.add(vid)
            if prev is not None and prev != status and prev != "removed":
                if status not in _VM_EDGES.get(prev, set()):
                    self.lifecycle_violations.append(Violation(
                        "lifecycle", rec.offset,
                        f"vm {vid} illegal transition {prev}->{status}"))
            self.vm_state[(label, vid)] = status
        elif what == "tx":
            tx = f["tx"]
            vids = tuple(int(v) for v in f.get("vids", "").split(",") if v)
            if tx not in self.tx_phases:
                self.tx_order.append(tx)
            self.tx_phases.setdefault(tx, []).append((f["phase"], vids, rec.offset))

    def _feed_fault(self, rec: Record) -> None:
        f = rec.fields()
        kind = f.get("kind", "")
        self.fault_count += 1
        if kind in ("crash_process", "crash_node"):
            self.crash_times.setdefault(rec.pid, []).append(rec.time_us)
        elif kind == "pause_process":
            self.paused[rec.pid] = rec.time_us
        elif kind == "resume_process":
            start = self.paused.pop(rec.pid, None)
            if start is not None:
                self.pause_spans.setdefault(rec.pid, []).append((start, rec.time_us))

    # -- derived facts -------------------------------------------------------

    def alive_at_end(self, pid: str) -> bool:
        start = self.last_start.get(pid)
        if start is None:
            return False
        stop = self.last_stop.get(pid)
        return stop is None or stop < start[0] or (
            stop == start[0] and False)

    def halted_at_end(self, pid: str) -> bool:
        """A halt only sticks until the process installs another view (an
        evicted member halts, rejoins, and is a member again)."""
        halt = self.last_halt.get(pid)
        if halt is None:
            return False
        start = self.last_start.get(pid)
        if start is not None and start[0] > halt[0]:
            return False
        view = self.last_view_time.get(pid)
        return view is None or view <= halt[0]

    def pause_overlaps(self, pid: str, lo: int, hi: int) -> bool:
        for start, stop in self.pause_spans.get(pid, []):
            if start <= hi and stop >= lo:
                return True
        open_pause = self.paused.get(pid)
        return open_pause is not None and open_pause <= hi


def collect(lines: Iterable[str]) -> _Collector:
    col = _Collector()
    saw_any = False
    for rec in iter_records(lines):
        saw_any = True
        col.feed(rec)
    if not saw_any:
        raise TraceError("empty trace")
    if not col.begin:
        raise TraceError("incomplete trace: missing begin record")
    if col.end_status is None:
        raise TraceError("incomplete trace: missing end record")
    return col


# ---------------------------------------------------------------------------
# properties


def _prop_self_inclusion(col: _Collector) -> PropResult:
    bad = [Violation("self-inclusion", off,
                     f"{pid} installed view {vid} without itself (gid {gid})")
           for (_, pid, _, vid, gid, _, members, off) in col.views
           if gid not in members]
    return PropResult("self-inclusion", not bad, bad)


def _prop_monotonicity(col: _Collector) -> PropResult:
    last: dict[tuple[str, int], int] = {}
    bad = []
    for (_, pid, inc, vid, _, _, _, off) in col.views:
        key = (pid, inc)
        if key in last and vid <= last[key]:
            bad.append(Violation("monotonicity", off,
                                 f"{pid} installed view {vid} after {last[key]}"))
        last[key] = vid
    return PropResult("monotonicity", not bad, bad)


def _prop_agreement(col: _Collector) -> PropResult:
    bad = list(col.view_conflicts)
    ids = sorted(col.members_by_id)
    for a, b in zip(ids, ids[1:]):
        if b == a + 1:
            shared = set(col.members_by_id[a]) & set(col.members_by_id[b])
            if not shared:
                bad.append(Violation("agreement", 0,
                                     f"views {a} and {b} share no member"))
    return PropResult("agreement", not bad, bad)


def _prop_termination(col: _Collector) -> PropResult:
    bad: list[Violation] = []
    gsd_pids = sorted({pid for pid in col.last_start if pid.startswith("gsd:")})
    live = [pid for pid in gsd_pids
            if col.alive_at_end(pid) and not col.halted_at_end(pid)]
    final_by_pid: dict[str, tuple[int, dict[int, str], int, int]] = {}
    for (_, pid, inc, vid, gid, _, members, off) in col.views:
        start = col.last_start.get(pid)
        if start is not None and inc == start[1]:
            final_by_pid[pid] = (vid, members, gid, off)
    finals = []
    for pid in live:
        final = final_by_pid.get(pid)
        if final is None:
            bad.append(Violation("termination", 0,
                                 f"{pid} is live but never installed a view"))
        else:
            finals.append((pid, final))
    if bad or not finals:
        return PropResult("termination", not bad, bad)
    base_pid, (base_vid, base_members, _, base_off) = finals[0]
    for pid, (vid, members, _, off) in finals[1:]:
        if vid != base_vid or members != base_members:
            bad.append(Violation(
                "termination", off,
                f"{pid} ended on view {vid}, {base_pid} on {base_vid}"))
    if not bad:
        # the final membership is exactly the live, non-halted participants
        expected = {final_by_pid[pid][2]: pid for pid in live}
        got = {gid: addr for gid, addr in base_members.items()}
        if set(expected) != set(got):
            bad.append(Violation(
                "termination", base_off,
                f"final view members {sorted(got)} != live members {sorted(expected)}"))
        else:
            for gid, addr in got.items():
                if expected[gid] != addr:
                    bad.append(Violation("termination", base_off,
                                         f"gid {gid} maps to {addr}, expected {expected[gid]}"))
    return PropResult("termination", not bad, bad)


def _prop_single_round(col: _Collector) -> PropResult:
    bad = []
    ids = sorted(col.members_by_id)
    if ids and ids != list(range(ids[0], ids[-1] + 1)):
        bad.append(Violation("single-round", 0, f"view ids not contiguous: {ids}"))
    for vid in ids:
        if vid <= 1:
            continue  # the first view is committed by the bootstrap exchange
        k = len(col.members_by_id[vid])
        sends = col.newview_sends.get(vid, 0)
        acks = col.ack_sends.get(vid, 0)
        if sends != k - 1:
            bad.append(Violation("single-round", 0,
                                 f"view {vid}: {sends} broadcasts for {k} members"))
        if acks != k - 1:
            bad.append(Violation("single-round", 0,
                                 f"view {vid}: {acks} acks for {k} members"))
    return PropResult("single-round", not bad, bad)


def _prop_fifo(col: _Collector) -> PropResult:
    bad = list(col.clock_violations) + list(col.chan_violations)
    if col.end_status == "quiescent":
        for (src, dst), chan in col.chans.items():
            for seq, msg in chan.inflight.items():
                if msg == "Heartbeat":
                    continue
                if dst in col.paused:
                    continue
                bad.append(Violation(
                    "fifo", 0, f"message {msg} seq {seq} on {src}->{dst} never resolved"))
    return PropResult("fifo", not bad, bad)


def _prop_cascade(col: _Collector) -> PropResult:
    bad = []
    np = int(col.begin.get("np", "256"))
    nv = int(col.begin.get("nv", "16"))
    per_node: dict[tuple[str, int], int] = {}
    for label, exists in sorted(col.vm_exists.items()):
        for vid in sorted(exists):
            state = col.vm_state.get((label, vid))
            # vid -> (gid, node_index) -> nid under the run's placement limits
            base = (vid - 1) // nv
            gid, node_index = base // np + 1, base % np
            nid = (gid - 1) * np + node_index + 1
            host = col.node_state.get((label, nid))
            if host is None:
                bad.append(Violation("cascade", 0,
                                     f"vm {vid} ({label}) has no host node {nid} in the view"))
                continue
            if state == "running" and host != "running":
                bad.append(Violation("cascade", 0,
                                     f"vm {vid} running on {host} node {nid}"))
            per_node[(label, nid)] = per_node.get((label, nid), 0) + 1
    for (label, nid), count in sorted(per_node.items()):
        if count > nv:
            bad.append(Violation("cascade", 0,
                                 f"node {nid} ({label}) hosts {count} vms > limit {nv}"))
    return PropResult("cascade", not bad, bad)


def _prop_detection(col: _Collector) -> PropResult:
    bad = []
    h = int(col.begin.get("h", US))
    n = int(col.begin.get("n", 5 * US))
    bound = n + h
    for key, count in col.suspect_keys.items():
        if count > 1:
            bad.append(Violation("detection", 0,
                                 f"duplicate suspicion {key[0]} -> {key[1]} epoch {key[2]}"))
    for (time_us, monitor, kind, target, _epoch, off) in col.suspects:
        crashes = [t for t in col.crash_times.get(target, []) if t <= time_us]
        node = "node:" + target.split(":", 1)[1] if ":" in target else ""
        crashes += [t for t in col.crash_times.get(node, []) if t <= time_us]
        if crashes:
            latency = time_us - max(crashes)
            if latency > bound:
                bad.append(Violation(
                    "detection", off,
                    f"{monitor} suspected {target} {latency / US:.3f}s after crash "
                    f"(bound {bound / US:.3f}s)"))
            continue
        halt = col.last_halt.get(target)
        if halt is not None and halt[0] <= time_us:
            continue
        if col.pause_overlaps(target, time_us - bound, time_us):
            continue
        bad.append(Violation("detection", off,
                             f"{monitor} suspected {target} without any failure"))
    return PropResult("detection", not bad, bad)


def _prop_lifecycle(col: _Collector) -> PropResult:
    return PropResult("lifecycle", not col.lifecycle_violations,
                      list(col.lifecycle_violations))


def _prop_transactions(col: _Collector) -> PropResult:
    bad = []
    later_begun: dict[int, int] = {}
    for idx, tx in enumerate(col.tx_order):
        for phase, vids, _ in col.tx_phases[tx]:
            if phase == "begun":
                for vid in vids:
                    later_begun[vid] = idx
    for idx, tx in enumerate(col.tx_order):
        phases = [p for p, _, _ in col.tx_phases[tx]]
        if "begun" in phases and not ({"committed", "aborted"} & set(phases)):
            off = col.tx_phases[tx][0][2]
            bad.append(Violation("transactions", off, f"transaction {tx} never resolved"))
        if "aborted" in phases:
            vids = next(v for p, v, _ in col.tx_phases[tx] if p == "begun")
            for vid in vids:
                if later_begun.get(vid, idx) > idx:
                    continue  # slot legitimately reused by a later transaction
                for label, exists in col.vm_exists.items():
                    if vid in exists:
                        bad.append(Violation(
                            "transactions", 0,
                            f"aborted transaction {tx} left vm {vid} in {label}"))
    return PropResult("transactions", not bad, bad)


_PROP_FNS = {
    "self-inclusion": _prop_self_inclusion,
    "monotonicity": _prop_monotonicity,
    "agreement": _prop_agreement,
    "termination": _prop_termination,
    "single-round": _prop_single_round,
    "fifo": _prop_fifo,
    "cascade": _prop_cascade,
    "detection": _prop_detection,
    "lifecycle": _prop_lifecycle,
    "transactions": _prop_transactions,
}


def normalize_props(props: Iterable[str] | str | None) -> tuple[str, ...]:
    if props is None or props == "all":
        return ALL_PROPS
    if isinstance(props, str):
        props = [p.strip() for p in props.split(",") if p.strip()]
    out = []
    for p in props:
        name = PROP_ALIASES.get(p, p)
        if name == "all":
            return ALL_PROPS
        if name not in _PROP_FNS:
            raise ValueError(f"unknown property {p!r}")
        out.append(name)
    return tuple(out)


def run_checks(source: str | Path | list[str],
               props: Iterable[str] | str | None = None) -> CheckReport:
    names = normalize_props(props)
    col = collect(load_lines(source))
    results = {name: _PROP_FNS[name](col) for name in names}
    counts = {
        "views_installed": len(col.views),
        "distinct_view_ids": len(col.members_by_id),
        "faults": col.fault_count,
        "suspicions": len(col.suspects),
    }
    for msg in ("NewViewG", "Ack", "Heartbeat", "StateQuery", "StateReply"):
        if msg in col.msg_counts:
            counts[f"msg_{msg}"] = col.msg_counts[msg]
    return CheckReport(
        scenario=col.begin.get("name", "?"),
        seed=col.begin.get("seed", "?"),
        quiescent=(col.end_status == "quiescent"),
        results=results,
        counts=counts,
    )

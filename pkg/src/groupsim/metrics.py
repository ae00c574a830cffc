"""Metric summaries folded out of a trace: message-count and simulated-time
analogs of the usual cluster-management costs (view fetch fan-out, failure
detection latency, membership update rounds, daemon recovery)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .checks import Record, iter_records, load_lines

US = 1_000_000


def _fmt(us: int | float) -> str:
    return f"{us / US:.3f}"


@dataclass
class FetchStat:
    req: str
    start_us: int
    queries: int = 0
    replies: int = 0
    done_us: int | None = None

    @property
    def messages(self) -> int:
        return self.queries + self.replies


@dataclass
class MetricsReport:
    fetches: list[FetchStat]
    detection: dict[str, list[tuple[str, int]]]      # kind -> [(target, latency_us)]
    rounds: list[tuple[int, int, int, int]]          # (view_id, members, sends, acks)
    recovery: dict[str, list[tuple[str, int]]]       # kind -> [(target, latency_us)]
    counts: dict[str, int]

    def machine_lines(self) -> list[str]:
        lines = []
        for f in self.fetches:
            latency = "" if f.done_us is None else f" latency={_fmt(f.done_us - f.start_us)}"
            lines.append(f"metric=fetch req={f.req} messages={f.messages}{latency}")
        for kind in sorted(self.detection):
            for target, lat in self.detection[kind]:
                lines.append(f"metric=detection kind={kind} target={target} latency={_fmt(lat)}")
        for view_id, members, sends, acks in self.rounds:
            lines.append(f"metric=round view_id={view_id} members={members} "
                         f"broadcasts={sends} acks={acks}")
        for kind in sorted(self.recovery):
            for target, lat in self.recovery[kind]:
                lines.append(f"metric=recovery kind={kind} target={target} latency={_fmt(lat)}")
        for key in sorted(self.counts):
            lines.append(f"metric=count key={key} value={self.counts[key]}")
        return lines

    def render(self) -> str:
        out = ["== cluster view fetches =="]
        if self.fetches:
            out.append(f"{'request':<10}{'messages':>10}{'latency s':>12}")
            for f in self.fetches:
                latency = "-" if f.done_us is None else _fmt(f.done_us - f.start_us)
                out.append(f"{f.req:<10}{f.messages:>10}{latency:>12}")
        else:
            out.append("(none)")
        out.append("")
        out.append("== failure detection latency (s) ==")
        if any(self.detection.values()):
            out.append(f"{'kind':<8}{'count':>6}{'min':>10}{'max':>10}")
            for kind in sorted(self.detection):
                lats = [lat for _, lat in self.detection[kind]]
                if lats:
                    out.append(f"{kind:<8}{len(lats):>6}{_fmt(min(lats)):>10}{_fmt(max(lats)):>10}")
        else:
            out.append("(none)")
        out.append("")
        out.append("== membership update rounds ==")
        if self.rounds:
            out.append(f"{'view':<6}{'members':>8}{'broadcasts':>12}{'acks':>6}")
            for view_id, members, sends, acks in self.rounds:
                out.append(f"{view_id:<6}{members:>8}{sends:>12}{acks:>6}")
        else:
            out.append("(none)")
        out.append("")
        out.append("== daemon recovery latency (s) ==")
        if any(self.recovery.values()):
            out.append(f"{'kind':<8}{'count':>6}{'min':>10}{'max':>10}")
            for kind in sorted(self.recovery):
                lats = [lat for _, lat in self.recovery[kind]]
                if lats:
                    out.append(f"{kind:<8}{len(lats):>6}{_fmt(min(lats)):>10}{_fmt(max(lats)):>10}")
        else:
            out.append("(none)")
        return "\n".join(out)


def _daemon_kind(pid: str) -> str:
    return pid.split(":", 1)[0]


def compute_metrics(source: str | Path | list[str]) -> MetricsReport:
    fetches: dict[str, FetchStat] = {}
    detection: dict[str, list[tuple[str, int]]] = {"ring": [], "nd": [], "vmd": []}
    recovery: dict[str, list[tuple[str, int]]] = {"gsd": [], "nd": [], "vmd": []}
    crash_at: dict[str, int] = {}
    views: dict[int, int] = {}
    newview: dict[int, int] = {}
    acks: dict[int, int] = {}
    counts: dict[str, int] = {}

    for rec in iter_records(load_lines(source)):
        if rec.kind == "event":
            f = rec.fields()
            if f.get("what") == "verb" and f.get("verb") == "get_cluster_state":
                req = f.get("req", "?")
                fetches[req] = FetchStat(req, rec.time_us)
        elif rec.kind == "send":
            f = rec.fields()
            msg = f.get("msg")
            counts[f"sends_{msg}"] = counts.get(f"sends_{msg}", 0) + 1
            if msg == "StateQuery":
                req = f.get("req", "?")
                if req in fetches:
                    fetches[req].queries += 1
            elif msg == "StateReply":
                req = f.get("req", "?")
                if req in fetches:
                    fetches[req].replies += 1
            elif msg == "NewViewG":
                vid = int(f["view_id"])
                newview[vid] = newview.get(vid, 0) + 1
            elif msg == "Ack":
                vid = int(f["view_id"])
                acks[vid] = acks.get(vid, 0) + 1
        elif rec.kind == "deliver":
            f = rec.fields()
            if f.get("msg") == "ClusterStateReply":
                req = f.get("req", "?")
                if req in fetches and fetches[req].done_us is None:
                    fetches[req].done_us = rec.time_us
        elif rec.kind == "fault":
            f = rec.fields()
            if f.get("kind") in ("crash_process", "crash_node"):
                crash_at[rec.pid] = rec.time_us
        elif rec.kind == "state":
            f = rec.fields()
            what = f.get("what")
            if what == "stopped" and f.get("reason") == "node-crash":
                crash_at.setdefault(rec.pid, rec.time_us)
            elif what == "suspect":
                target = f.get("target", "")
                kind = f.get("kind", "")
                when = crash_at.get(target)
                if when is not None and kind in detection:
                    detection[kind].append((target, rec.time_us - when))
            elif what == "vm_status" and f.get("status") == "running":
                vmd = f"vmd:{f['vid']}"
                when = crash_at.pop(vmd, None)
                if when is not None:
                    recovery["vmd"].append((vmd, rec.time_us - when))
            elif what == "node_status" and f.get("status") == "running":
                nd = f"nd:{f['nid']}"
                when = crash_at.pop(nd, None)
                if when is not None:
                    recovery["nd"].append((nd, rec.time_us - when))
        elif rec.kind == "view":
            f = rec.fields()
            vid = int(f["view_id"])
            members = f.get("members", "")
            views[vid] = members.count(",") + 1 if members else 0
            when = crash_at.pop(rec.pid, None)
            if when is not None:
                recovery["gsd"].append((rec.pid, rec.time_us - when))

    rounds = [(vid, views[vid], newview.get(vid, 0), acks.get(vid, 0))
              for vid in sorted(views) if vid > 1]
    return MetricsReport(
        fetches=[fetches[r] for r in sorted(fetches)],
        detection=detection,
        rounds=rounds,
        recovery=recovery,
        counts=counts,
    )

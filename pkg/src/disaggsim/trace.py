"""Per-request lifecycle records produced by the simulator."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .controller import SwitchEventRecord
from .models import StageRole


class TraceInvariantError(ValueError):
    """A trace violated a causality or conservation invariant."""


@dataclass
class ShardRecord:
    worker: int
    patches: int
    start: Optional[float] = None
    end: Optional[float] = None
    transfer_end: Optional[float] = None


@dataclass
class RequestRecord:
    rid: int
    arrival: float
    prompt_tokens: int
    mm_tokens: int
    total_tokens: int
    output_tokens: int
    slo: Optional[tuple[float, float]] = None
    rejected: Optional[str] = None
    e_instance: Optional[int] = None
    p_instance: Optional[int] = None
    d_instance: Optional[int] = None
    shards: list[ShardRecord] = field(default_factory=list)
    encode_start: Optional[float] = None
    encode_end: Optional[float] = None
    ep_transfer_end: Optional[float] = None
    prefill_start: Optional[float] = None
    prefill_end: Optional[float] = None
    first_token_time: Optional[float] = None
    pd_transfer_end: Optional[float] = None
    token_times: list[float] = field(default_factory=list)
    completion_time: Optional[float] = None

    @property
    def completed(self) -> bool:
        return self.completion_time is not None


@dataclass
class InstanceRecord:
    iid: int
    initial_role: StageRole
    busy: list[tuple[float, float, str]] = field(default_factory=list)
    roles: list[tuple[float, StageRole]] = field(default_factory=list)
    queue_samples: list[tuple[float, int]] = field(default_factory=list)

    def role_at(self, t: float) -> StageRole:
        current = self.initial_role
        for when, role in self.roles:
            if when <= t:
                current = role
            else:
                break
        return current

    def utilization(self, horizon: float) -> float:
        if horizon <= 0:
            return 0.0
        return sum(end - start for start, end, _ in self.busy) / horizon


@dataclass
class SimTrace:
    requests: dict[int, RequestRecord]
    instances: dict[int, InstanceRecord]
    switches: list[SwitchEventRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def completed_count(self) -> int:
        return sum(1 for r in self.requests.values() if r.completed)

    @property
    def rejected_count(self) -> int:
        return sum(1 for r in self.requests.values() if r.rejected is not None)

    @property
    def horizon(self) -> float:
        times = [r.completion_time for r in self.requests.values() if r.completed]
        return max(times) if times else 0.0

    def completed_records(self) -> list[RequestRecord]:
        return [r for r in self.requests.values() if r.completed]

    def validate(self) -> None:
        """Raise :class:`TraceInvariantError` on any broken invariant."""
        for r in self.requests.values():
            if r.rejected is not None:
                if r.completed:
                    raise TraceInvariantError(f"request {r.rid} both rejected and completed")
                continue
            if not r.completed:
                raise TraceInvariantError(f"request {r.rid} neither completed nor rejected")
            self._check_causality(r)
        for switch in self.switches:
            stamps = (switch.offload_done, switch.migration_done, switch.onload_done)
            if any(s is None for s in stamps):
                raise TraceInvariantError("switch record has missing phase timestamps")
            if not stamps[0] < stamps[1] < stamps[2]:
                raise TraceInvariantError(f"switch phases not strictly ordered: {stamps}")

    @staticmethod
    def _check_causality(r: RequestRecord) -> None:
        def ordered(label: str, a: Optional[float], b: Optional[float]) -> None:
            if a is not None and b is not None and a > b + 1e-12:
                raise TraceInvariantError(f"request {r.rid}: {label} out of order ({a} > {b})")

        ordered("arrival/encode", r.arrival, r.encode_start)
        ordered("encode start/end", r.encode_start, r.encode_end)
        for shard in r.shards:
            ordered("shard start", r.encode_start, shard.start)
            ordered("shard run", shard.start, shard.end)
            ordered("shard transfer", shard.end, shard.transfer_end)
            ordered("shard/ep-end", shard.transfer_end, r.ep_transfer_end)
        ordered("encode/transfer", r.encode_end, r.ep_transfer_end)
        ordered("transfer/prefill", r.ep_transfer_end, r.prefill_start)
        ordered("prefill run", r.prefill_start, r.prefill_end)
        ordered("prefill/first token", r.prefill_end, r.first_token_time)
        ordered("first token/pd", r.first_token_time, r.pd_transfer_end)
        ordered("first token/completion", r.first_token_time, r.completion_time)
        if len(r.token_times) != r.output_tokens:
            raise TraceInvariantError(
                f"request {r.rid}: {len(r.token_times)} token times for "
                f"{r.output_tokens} output tokens")
        if r.token_times and r.first_token_time != r.token_times[0]:
            raise TraceInvariantError(f"request {r.rid}: first token time mismatch")
        for earlier, later in zip(r.token_times, r.token_times[1:]):
            if later <= earlier:
                raise TraceInvariantError(f"request {r.rid}: token times not strictly increasing")
        if r.token_times and r.completion_time != r.token_times[-1]:
            raise TraceInvariantError(f"request {r.rid}: completion != last token time")

    # --- export -------------------------------------------------------------

    def events(self) -> Iterator[tuple[int, str, float]]:
        """Flat (request id, event, time) stream sorted by time then id."""
        rows: list[tuple[int, str, float]] = []
        for r in self.requests.values():
            rows.append((r.rid, "arrival", r.arrival))
            if r.rejected is not None:
                rows.append((r.rid, f"rejected:{r.rejected}", r.arrival))
                continue
            for label, value in (
                ("encode_start", r.encode_start), ("encode_end", r.encode_end),
                ("ep_transfer_end", r.ep_transfer_end),
                ("prefill_start", r.prefill_start), ("prefill_end", r.prefill_end),
                ("first_token", r.first_token_time),
                ("pd_transfer_end", r.pd_transfer_end),
                ("completion", r.completion_time),
            ):
                if value is not None:
                    rows.append((r.rid, label, value))
            for i, t in enumerate(r.token_times):
                rows.append((r.rid, f"token:{i}", t))
        rows.sort(key=lambda row: (row[2], row[0], row[1]))
        return iter(rows)

    def write_events(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for rid, event, t in self.events():
                handle.write(json.dumps({"rid": rid, "event": event, "time": t}) + "\n")

    def summary_rows(self) -> list[dict]:
        rows = []
        for r in sorted(self.requests.values(), key=lambda x: x.rid):
            if r.rejected is not None:
                rows.append({"rid": r.rid, "status": f"rejected:{r.rejected}",
                             "arrival": r.arrival, "ttft": "", "tpot": "", "completion": ""})
                continue
            ttft = r.first_token_time - r.arrival
            tpot = ((r.completion_time - r.first_token_time) / (r.output_tokens - 1)
                    if r.output_tokens >= 2 else 0.0)
            rows.append({"rid": r.rid, "status": "completed", "arrival": r.arrival,
                         "ttft": ttft, "tpot": tpot, "completion": r.completion_time})
        return rows

    def write_summary(self, path) -> None:
        rows = self.summary_rows()
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(
                handle, fieldnames=["rid", "status", "arrival", "ttft", "tpot", "completion"])
            writer.writeheader()
            writer.writerows(rows)

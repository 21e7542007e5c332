"""Deterministic discrete-event engine for staged multimodal serving.

One :class:`_Sim` owns all state for one run: instances with roles and
block-managed caches, FCFS queues, intra-request patch sharding, serialized
transfer channels between instance pairs, and the optional role-switching
controller. Identical inputs always produce identical traces; the engine
itself draws no random numbers.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .blocks import BlockManager, CacheKind
from .controller import (SwitchDecision, SwitchEventRecord, migration_latency,
                         monitor_and_decide, StageLoad)
from .costs import (decode_step_latency, encode_latency, parallel_factor,
                    prefill_latency, transfer_latency)
from .models import (StageRole, kv_bytes_per_token, mm_bytes_per_token,
                     patches_for_image, tokens_for_request, weights_bytes)
from .simconfig import (CapacityExceeded, ConfigInfeasible, InstanceConfig,
                        SchedulePolicy, SystemConfig, format_shape)
from .trace import InstanceRecord, RequestRecord, ShardRecord, SimTrace
from .workload import Request

# Registration delay after migration so the onload phase is distinguishable.
_ONLOAD_DELAY = 1e-6

_WORKER_DONE = "worker_done"
_BATCH_END = "batch_end"
_STEP_END = "step_end"
_TRANSFER_END = "transfer_end"
_SWITCH_MIGRATED = "switch_migrated"
_SWITCH_ONLOAD = "switch_onload"
_MONITOR = "monitor"
_ARRIVAL = "arrival"

# Completions and transfers settle before new work is considered at a tie.
_PRIO = {
    _WORKER_DONE: 0,
    _BATCH_END: 1,
    _STEP_END: 2,
    _TRANSFER_END: 3,
    _SWITCH_MIGRATED: 4,
    _SWITCH_ONLOAD: 5,
    _MONITOR: 6,
    _ARRIVAL: 7,
}


def irp_shard(patches: int, width: int) -> list[int]:
    """Balanced partition of one request's patches across ``width`` workers."""
    if width < 1:
        raise ValueError("shard width must be >= 1")
    if patches < 0:
        raise ValueError("patch count must be non-negative")
    base, rem = divmod(patches, width)
    return [base + 1] * rem + [base] * (width - rem)


def assign_instance(policy: SchedulePolicy, candidates: Sequence[tuple[int, float]],
                    rr_counter: int = 0) -> tuple[int, int]:
    """Pick an instance id from ordered (id, load) candidates.

    Round-robin (the FCFS default) cycles deterministically via the returned
    counter; least-loaded picks the minimum load with ties to the lowest id.
    """
    if not candidates:
        raise ValueError("no candidate instances")
    if policy is SchedulePolicy.LEAST_LOADED:
        iid, _ = min(candidates, key=lambda pair: (pair[1], pair[0]))
        return iid, rr_counter
    iid, _ = candidates[rr_counter % len(candidates)]
    return iid, rr_counter + 1


def form_batch(queue: Sequence[int], max_batch: int, fits: Callable[[int], bool]) -> list[int]:
    """Longest FCFS prefix (up to ``max_batch``) whose members fit.

    The first request that does not fit stops the batch; later requests are
    never pulled ahead. ``fits`` is called once per accepted head and may
    commit cache reservations.
    """
    batch: list[int] = []
    for item in queue:
        if len(batch) >= max_batch or not fits(item):
            break
        batch.append(item)
    return batch


@dataclass
class _RunningBatch:
    rids: tuple[int, ...]
    kind: str
    start: float
    end: float
    worker_items: dict[int, list[tuple[int, int]]] = field(default_factory=dict)


class _Req:
    __slots__ = ("req", "patches", "mm_tokens", "total_tokens", "rec",
                 "e_iid", "p_iid", "d_iid", "shards", "shards_run_done",
                 "ready_unsent", "shards_done", "dst_reserved", "emitted")

    def __init__(self, req: Request, patches: int, mm_tokens: int, total_tokens: int,
                 rec: RequestRecord):
        self.req = req
        self.patches = patches
        self.mm_tokens = mm_tokens
        self.total_tokens = total_tokens
        self.rec = rec
        self.e_iid: Optional[int] = None
        self.p_iid: Optional[int] = None
        self.d_iid: Optional[int] = None
        self.shards: list[tuple[int, int]] = []  # (worker, patches) per shard
        self.shards_run_done = 0
        self.ready_unsent: list[int] = []
        self.shards_done = 0
        self.dst_reserved = False
        self.emitted = 0


class _Instance:
    def __init__(self, iid: int, cfg: InstanceConfig, system: SystemConfig):
        self.iid = iid
        self.role = cfg.role
        self.tp = cfg.tp
        self.pp = cfg.pp
        self.max_batch = cfg.max_batch
        self.policy = cfg.policy
        self.state = "active"  # active | offloading | migrating
        self.queue: deque[int] = deque()
        self.running: Optional[_RunningBatch] = None
        self.stepping = False
        self.resident: list[int] = []
        self.admit_wait: deque[int] = deque()
        self.mm: Optional[BlockManager] = None
        self.kv: Optional[BlockManager] = None
        self.record = InstanceRecord(iid=iid, initial_role=cfg.role)
        self.rebuild_caches(system)

    def rebuild_caches(self, system: SystemConfig) -> None:
        gpus = self.tp * self.pp
        free = system.hardware.gpu_memory * gpus - weights_bytes(system.model, self.role)
        if free <= 0:
            raise ConfigInfeasible(
                f"instance {self.iid} ({self.role.value}, {gpus} GPU) cannot hold its weights")
        self.mm = None
        self.kv = None
        if self.role.serves_encode or self.role.serves_prefill:
            self.mm = BlockManager(CacheKind.MM, system.block_size,
                                   system.mm_cache_tokens // system.block_size)
        if self.role.serves_prefill or self.role.serves_decode:
            per_block = kv_bytes_per_token(system.model) * system.block_size
            self.kv = BlockManager(CacheKind.KV, system.block_size,
                                   int(system.kv_fraction * free // per_block))

    def occupancy(self) -> int:
        return len(self.queue) + len(self.resident) + len(self.admit_wait)


class _Sim:
    def __init__(self, config: SystemConfig, workload: Sequence[Request], seed: int):
        config.validate()
        self.system = config
        self.model = config.model
        self.hw = config.hardware
        self.cost = config.cost
        self.seed = seed
        self.insts = [_Instance(i, cfg, config) for i, cfg in enumerate(config.instances)]

        self.kv_bpt = kv_bytes_per_token(self.model)
        self.mm_bpt = mm_bytes_per_token(self.model)

        self.heap: list = []
        self.seq = itertools.count()
        self.now = 0.0
        self.last_pop = 0.0

        self.chan_free: dict[tuple[int, int], float] = {}
        self.ep_wait: deque[int] = deque()
        self.pd_wait: deque[int] = deque()
        self.rr = {"encode": 0, "prefill": 0, "decode": 0}

        self.switch_rec: Optional[SwitchEventRecord] = None
        self.switch_target: Optional[StageRole] = None
        self.last_switch = float("-inf")
        self.switches: list[SwitchEventRecord] = []

        self.rs: dict[int, _Req] = {}
        last_arrival = float("-inf")
        for req in workload:
            if req.id in self.rs:
                raise ValueError(f"duplicate request id {req.id}")
            if req.arrival_time < last_arrival:
                raise ValueError("workload must be sorted by arrival time")
            last_arrival = req.arrival_time
            mm_tokens, total_tokens = tokens_for_request(self.model, req)
            patches = sum(patches_for_image(self.model, res) for res in req.images)
            rec = RequestRecord(rid=req.id, arrival=req.arrival_time,
                                prompt_tokens=req.prompt_tokens, mm_tokens=mm_tokens,
                                total_tokens=total_tokens, output_tokens=req.output_tokens,
                                slo=req.slo)
            self.rs[req.id] = _Req(req, patches, mm_tokens, total_tokens, rec)
        self.outstanding = len(self.rs)

    # --- event plumbing -----------------------------------------------------

    def _push(self, t: float, kind: str, data: tuple) -> None:
        heapq.heappush(self.heap, (t, _PRIO[kind], next(self.seq), kind, data))

    def run(self) -> SimTrace:
        for r in self.rs.values():
            self._push(r.req.arrival_time, _ARRIVAL, (r.req.id,))
        if self.system.role_switch is not None and self.rs:
            self._push(self.system.role_switch.monitor_interval, _MONITOR, ())

        handlers = {
            _ARRIVAL: self._on_arrival,
            _WORKER_DONE: self._on_worker_done,
            _BATCH_END: self._on_batch_end,
            _STEP_END: self._on_step_end,
            _TRANSFER_END: self._on_transfer_end,
            _SWITCH_MIGRATED: self._on_switch_migrated,
            _SWITCH_ONLOAD: self._on_switch_onload,
            _MONITOR: self._on_monitor,
        }
        while self.heap:
            t, _, _, kind, data = heapq.heappop(self.heap)
            if t < self.last_pop - 1e-12:
                raise RuntimeError("event heap popped an event in the past")
            self.last_pop = t
            self.now = t
            handlers[kind](t, *data)
            self._dispatch(t)

        return self._finalize()

    def _finalize(self) -> SimTrace:
        if self.outstanding != 0:
            raise RuntimeError(f"{self.outstanding} requests never reached a terminal state")
        for inst in self.insts:
            for manager in (inst.mm, inst.kv):
                if manager is not None and manager.used_blocks:
                    raise RuntimeError(
                        f"instance {inst.iid} leaked {manager.used_blocks} "
                        f"{manager.kind.value} blocks")
        requests = {rid: r.rec for rid, r in self.rs.items()}
        instances = {inst.iid: inst.record for inst in self.insts}
        meta = {
            "seed": self.seed,
            "shape": format_shape(self.system.instances),
            "gpus": self.system.gpu_count,
            "completed": sum(1 for r in requests.values() if r.completed),
            "rejected": sum(1 for r in requests.values() if r.rejected is not None),
            "horizon": self.last_pop,
            "blocks_ok": True,
        }
        return SimTrace(requests=requests, instances=instances,
                        switches=self.switches, meta=meta)

    # --- pools and loads ------------------------------------------------------

    def _pool(self, stage: str) -> list[_Instance]:
        check = {
            "encode": lambda r: r.serves_encode,
            "prefill": lambda r: r.serves_prefill,
            "decode": lambda r: r.serves_decode,
        }[stage]
        return [i for i in self.insts if i.state == "active" and check(i.role)]

    def _arrival_load(self, inst: _Instance) -> float:
        # outstanding work, in-flight batch included, so idle instances win
        pending = list(inst.queue)
        if inst.running is not None:
            pending.extend(inst.running.rids)
        load = 0.0
        for rid in pending:
            r = self.rs[rid]
            load += r.patches if inst.role is StageRole.ENCODE else r.patches + r.total_tokens
        return load

    def _prefill_load(self, inst: _Instance) -> float:
        pending = list(inst.queue)
        if inst.running is not None:
            pending.extend(inst.running.rids)
        return float(sum(self.rs[rid].total_tokens for rid in pending))

    def _decode_load(self, inst: _Instance) -> float:
        return float(len(inst.resident) + len(inst.admit_wait))

    def _stage_loads(self) -> dict[StageRole, StageLoad]:
        loads: dict[StageRole, StageLoad] = {}
        for stage, role, per_inst in (
            ("encode", StageRole.ENCODE, lambda i: float(sum(self.rs[x].patches for x in i.queue))),
            ("prefill", StageRole.PREFILL, self._prefill_load),
            ("decode", StageRole.DECODE, self._decode_load),
        ):
            pool = [i for i in self._pool(stage) if i.role is role]
            entries = tuple((i.iid, per_inst(i)) for i in pool)
            total = sum(load for _, load in entries)
            if stage == "prefill":
                total += sum(self.rs[rid].total_tokens for rid in self.ep_wait)
            elif stage == "decode":
                total += len(self.pd_wait)
            loads[role] = StageLoad(total=total, instances=entries)
        return loads

    def _sample_queue(self, inst: _Instance, t: float) -> None:
        inst.record.queue_samples.append((t, inst.occupancy()))

    # --- admission ------------------------------------------------------------

    def _admission_reason(self, r: _Req) -> Optional[str]:
        if r.total_tokens == 0:
            return "empty"
        if r.total_tokens > self.model.max_context_tokens:
            return "context"
        mm_ok = kv_p_ok = kv_d_ok = False
        for inst in self.insts:
            role = inst.role
            if role.serves_encode and inst.mm is not None:
                if inst.mm.blocks_needed(r.mm_tokens) <= inst.mm.total_blocks:
                    mm_ok = True
            if role.serves_prefill and inst.kv is not None and inst.mm is not None:
                kv_need = r.total_tokens + (r.req.output_tokens if role is StageRole.MONOLITHIC else 0)
                if (inst.mm.blocks_needed(r.mm_tokens) <= inst.mm.total_blocks
                        and inst.kv.blocks_needed(kv_need) <= inst.kv.total_blocks):
                    kv_p_ok = True
            if role.serves_decode and inst.kv is not None:
                if inst.kv.blocks_needed(r.total_tokens + r.req.output_tokens) <= inst.kv.total_blocks:
                    kv_d_ok = True
        if not mm_ok:
            return "mm_capacity"
        if not kv_p_ok:
            return "kv_capacity"
        if not kv_d_ok:
            return "kv_capacity"
        return None

    # --- event handlers ---------------------------------------------------------

    def _on_arrival(self, t: float, rid: int) -> None:
        r = self.rs[rid]
        reason = self._admission_reason(r)
        if reason is not None:
            if not self.system.admission_control:
                raise CapacityExceeded(f"request {rid} can never fit: {reason}")
            r.rec.rejected = reason
            self.outstanding -= 1
            return
        pool = self._pool("encode")
        candidates = [(i.iid, self._arrival_load(i)) for i in pool]
        iid, self.rr["encode"] = assign_instance(pool[0].policy, candidates, self.rr["encode"])
        inst = self.insts[iid]
        r.e_iid = iid
        r.rec.e_instance = iid
        if inst.role in (StageRole.ENCODE_PREFILL, StageRole.MONOLITHIC):
            r.p_iid = iid
            r.rec.p_instance = iid
        inst.queue.append(rid)
        self._sample_queue(inst, t)

    def _on_worker_done(self, t: float, iid: int, worker: int) -> None:
        inst = self.insts[iid]
        batch = inst.running
        for rid, shard_idx in batch.worker_items.get(worker, ()):
            r = self.rs[rid]
            r.rec.shards[shard_idx].end = t
            r.shards_run_done += 1
            if r.shards_run_done == len(r.shards):
                r.rec.encode_end = t
            r.ready_unsent.append(shard_idx)
            if r.dst_reserved:
                self._send_ready_shards(r, t)
            elif r.p_iid is None and rid not in self.ep_wait:
                if not self._try_reserve_prefill(r, t):
                    self.ep_wait.append(rid)

    def _on_batch_end(self, t: float, iid: int) -> None:
        inst = self.insts[iid]
        batch = inst.running
        inst.running = None
        if batch.kind == "encode":
            return  # per-worker events already launched the transfers
        # prefill or fused encode+prefill: the first output token exists now
        for rid in batch.rids:
            r = self.rs[rid]
            r.rec.prefill_end = t
            r.rec.first_token_time = t
            r.rec.token_times.append(t)
            inst.mm.free(rid)
            if r.req.output_tokens == 1:
                inst.kv.free(rid)
                self._complete(r, t)
            elif inst.role is StageRole.MONOLITHIC:
                r.d_iid = iid
                r.rec.d_instance = iid
                self._admit_decode(inst, rid, t)
            else:
                if not self._try_reserve_decode(r, t):
                    self.pd_wait.append(rid)

    def _on_step_end(self, t: float, iid: int, rids: tuple[int, ...]) -> None:
        inst = self.insts[iid]
        inst.stepping = False
        for rid in rids:
            r = self.rs[rid]
            r.emitted += 1
            r.rec.token_times.append(t)
            if r.emitted == r.req.output_tokens - 1:
                inst.kv.free(rid)
                inst.resident.remove(rid)
                self._complete(r, t)
        while inst.admit_wait and len(inst.resident) < inst.max_batch:
            inst.resident.append(inst.admit_wait.popleft())
        self._sample_queue(inst, t)

    def _on_transfer_end(self, t: float, kind: str, rid: int, shard_idx: int) -> None:
        r = self.rs[rid]
        if kind == "ep":
            r.shards_done += 1
            if shard_idx >= 0:
                r.rec.shards[shard_idx].transfer_end = t
            if r.shards_done == len(r.shards):
                self.insts[r.e_iid].mm.free(rid)
                r.rec.ep_transfer_end = t
                dst = self.insts[r.p_iid]
                dst.queue.append(rid)
                self._sample_queue(dst, t)
        else:  # pd
            self.insts[r.p_iid].kv.free(rid)
            r.rec.pd_transfer_end = t
            self._admit_decode(self.insts[r.d_iid], rid, t)

    def _on_switch_migrated(self, t: float, iid: int) -> None:
        self.switch_rec.migration_done = t
        self._push(t + _ONLOAD_DELAY, _SWITCH_ONLOAD, (iid,))

    def _on_switch_onload(self, t: float, iid: int) -> None:
        inst = self.insts[iid]
        inst.role = self.switch_target
        if self.system.role_max_batch:
            inst.max_batch = self.system.role_max_batch.get(inst.role, inst.max_batch)
        inst.rebuild_caches(self.system)
        inst.state = "active"
        inst.record.roles.append((t, inst.role))
        self.switch_rec.onload_done = t
        self.switches.append(self.switch_rec)
        self.switch_rec = None
        self.switch_target = None

    def _on_monitor(self, t: float) -> None:
        if self.outstanding <= 0:
            return
        params = self.system.role_switch
        if self.switch_rec is None:
            decision = monitor_and_decide(self._stage_loads(), params, t, self.last_switch)
            if decision is not None:
                self._begin_switch(decision, t)
        self._push(t + params.monitor_interval, _MONITOR, ())

    # --- switching --------------------------------------------------------------

    def _begin_switch(self, decision: SwitchDecision, t: float) -> None:
        inst = self.insts[decision.instance_id]
        rec = SwitchEventRecord(time=t, instance_id=inst.iid,
                                source=decision.source, target=decision.target)
        self.switch_rec = rec
        self.switch_target = decision.target
        self.last_switch = t
        inst.state = "offloading"
        if inst.role is StageRole.ENCODE and inst.queue:
            # Queued encode work holds no cache yet, so it can move to siblings.
            pending = list(inst.queue)
            inst.queue.clear()
            pool = [i for i in self._pool("encode") if i.iid != inst.iid]
            for rid in pending:
                candidates = [(i.iid, self._arrival_load(i)) for i in pool]
                iid, self.rr["encode"] = assign_instance(
                    pool[0].policy, candidates, self.rr["encode"])
                self.insts[iid].queue.append(rid)
                self.rs[rid].e_iid = iid
                self.rs[rid].rec.e_instance = iid
                rec.redistributed += 1
        # Prefill queues and decode residents hold transferred cache data and
        # therefore drain in place before the migration phase starts.

    def _maybe_finish_offload(self, inst: _Instance, t: float) -> None:
        if inst.state != "offloading":
            return
        if inst.running is not None or inst.stepping:
            return
        if inst.queue or inst.resident or inst.admit_wait:
            return
        if (inst.mm is not None and inst.mm.used_blocks) or \
           (inst.kv is not None and inst.kv.used_blocks):
            return
        self.switch_rec.offload_done = t
        inst.state = "migrating"
        delay = migration_latency(self.cost, self.switch_rec.source, self.switch_target)
        self._push(t + delay, _SWITCH_MIGRATED, (inst.iid,))

    # --- transfers ----------------------------------------------------------------

    def _schedule_transfer(self, kind: str, rid: int, shard_idx: int, src: int,
                           dst: int, nbytes: float, ready: float) -> None:
        key = (src, dst)
        start = max(ready, self.chan_free.get(key, 0.0))
        duration = transfer_latency(nbytes, self.system.transfer_channel, self.hw,
                                    self.cost.transfer_setup)
        end = start + duration
        self.chan_free[key] = end
        self._push(end, _TRANSFER_END, (kind, rid, shard_idx))

    def _send_ready_shards(self, r: _Req, t: float) -> None:
        for shard_idx in r.ready_unsent:
            _, patches = r.shards[shard_idx]
            nbytes = patches * self.model.tokens_per_patch * self.mm_bpt
            self._schedule_transfer("ep", r.req.id, shard_idx, r.e_iid, r.p_iid, nbytes, t)
        r.ready_unsent.clear()

    def _try_reserve_prefill(self, r: _Req, t: float) -> bool:
        pool = self._pool("prefill")
        candidates = [(i.iid, self._prefill_load(i)) for i in pool
                      if i.mm.can_allocate(r.mm_tokens)]
        if not candidates:
            return False
        iid, self.rr["prefill"] = assign_instance(pool[0].policy, candidates, self.rr["prefill"])
        self.insts[iid].mm.allocate(r.req.id, r.mm_tokens)
        r.p_iid = iid
        r.rec.p_instance = iid
        r.dst_reserved = True
        self._send_ready_shards(r, t)
        return True

    def _try_reserve_decode(self, r: _Req, t: float) -> bool:
        kv_need = r.total_tokens + r.req.output_tokens
        pool = self._pool("decode")
        candidates = [(i.iid, self._decode_load(i)) for i in pool
                      if i.kv.can_allocate(kv_need)]
        if not candidates:
            return False
        iid, self.rr["decode"] = assign_instance(pool[0].policy, candidates, self.rr["decode"])
        self.insts[iid].kv.allocate(r.req.id, kv_need)
        r.d_iid = iid
        r.rec.d_instance = iid
        self._schedule_transfer("pd", r.req.id, -1, r.p_iid, iid,
                                r.total_tokens * self.kv_bpt, t)
        return True

    def _admit_decode(self, inst: _Instance, rid: int, t: float) -> None:
        if len(inst.resident) < inst.max_batch:
            inst.resident.append(rid)
        else:
            inst.admit_wait.append(rid)
        self._sample_queue(inst, t)

    def _complete(self, r: _Req, t: float) -> None:
        r.rec.completion_time = t
        self.outstanding -= 1

    # --- work starting ----------------------------------------------------------

    def _start_encode(self, inst: _Instance, t: float) -> None:
        def fits(rid: int) -> bool:
            r = self.rs[rid]
            if not inst.mm.can_allocate(r.mm_tokens):
                return False
            inst.mm.allocate(rid, r.mm_tokens)
            return True

        batch = form_batch(inst.queue, inst.max_batch, fits)
        if not batch:
            return
        for _ in batch:
            inst.queue.popleft()
        width = inst.tp
        worker_load = [0] * width
        worker_reqs = [0] * width
        worker_items: dict[int, list[tuple[int, int]]] = {}
        for rid in batch:
            r = self.rs[rid]
            if r.patches == 0:
                shard_counts = [(0, 0)]  # text-only still pays the batch base cost
            else:
                shard_counts = [(k, p) for k, p in enumerate(irp_shard(r.patches, width)) if p > 0]
            r.shards = shard_counts
            r.shards_run_done = 0
            r.shards_done = 0
            r.ready_unsent = []
            r.rec.encode_start = t
            r.rec.shards = [ShardRecord(worker=k, patches=p, start=t) for k, p in shard_counts]
            for shard_idx, (k, p) in enumerate(shard_counts):
                worker_load[k] += p
                worker_reqs[k] += 1
                worker_items.setdefault(k, []).append((rid, shard_idx))
        finishes = {}
        for k in range(width):
            if worker_reqs[k] == 0:
                continue
            finishes[k] = t + encode_latency(self.cost, worker_load[k], tp_width=1,
                                             batch_size=worker_reqs[k])
            self._push(finishes[k], _WORKER_DONE, (inst.iid, k))
        end = max(finishes.values())
        inst.running = _RunningBatch(tuple(batch), "encode", t, end, worker_items)
        inst.record.busy.append((t, end, "encode"))
        self._push(end, _BATCH_END, (inst.iid,))

    def _start_prefill(self, inst: _Instance, t: float) -> None:
        def fits(rid: int) -> bool:
            r = self.rs[rid]
            if not inst.kv.can_allocate(r.total_tokens):
                return False
            inst.kv.allocate(rid, r.total_tokens)
            return True

        batch = form_batch(inst.queue, inst.max_batch, fits)
        if not batch:
            return
        for _ in batch:
            inst.queue.popleft()
        total = sum(self.rs[rid].total_tokens for rid in batch)
        duration = prefill_latency(self.cost, max(1, total), inst.tp, inst.pp)
        for rid in batch:
            self.rs[rid].rec.prefill_start = t
        end = t + duration
        inst.running = _RunningBatch(tuple(batch), "prefill", t, end)
        inst.record.busy.append((t, end, "prefill"))
        self._push(end, _BATCH_END, (inst.iid,))

    def _start_fused(self, inst: _Instance, t: float) -> None:
        mono = inst.role is StageRole.MONOLITHIC

        def fits(rid: int) -> bool:
            r = self.rs[rid]
            kv_need = r.total_tokens + (r.req.output_tokens if mono else 0)
            if not (inst.mm.can_allocate(r.mm_tokens) and inst.kv.can_allocate(kv_need)):
                return False
            inst.mm.allocate(rid, r.mm_tokens)
            inst.kv.allocate(rid, kv_need)
            return True

        batch = form_batch(inst.queue, inst.max_batch, fits)
        if not batch:
            return
        for _ in batch:
            inst.queue.popleft()
        patches = sum(self.rs[rid].patches for rid in batch)
        tokens = sum(self.rs[rid].total_tokens for rid in batch)
        enc_dur = encode_latency(self.cost, patches, tp_width=inst.tp, batch_size=len(batch))
        pre_dur = prefill_latency(self.cost, max(1, tokens), inst.tp, inst.pp)
        end = t + enc_dur + pre_dur
        for rid in batch:
            rec = self.rs[rid].rec
            rec.encode_start = t
            rec.encode_end = t + enc_dur
            rec.prefill_start = t + enc_dur
        inst.running = _RunningBatch(tuple(batch), "fused", t, end)
        inst.record.busy.append((t, end, "fused"))
        self._push(end, _BATCH_END, (inst.iid,))

    def _start_step(self, inst: _Instance, t: float) -> None:
        batch = tuple(inst.resident)
        kv_tokens = sum(self.rs[rid].total_tokens + self.rs[rid].emitted for rid in batch)
        duration = decode_step_latency(self.cost, len(batch), kv_tokens)
        duration *= parallel_factor(self.cost, inst.tp, inst.pp)
        inst.stepping = True
        end = t + duration
        inst.record.busy.append((t, end, "decode"))
        self._push(end, _STEP_END, (inst.iid, batch))

    # --- dispatch -----------------------------------------------------------------

    def _retry_waits(self, t: float) -> None:
        while self.ep_wait:
            r = self.rs[self.ep_wait[0]]
            if not self._try_reserve_prefill(r, t):
                break
            self.ep_wait.popleft()
        while self.pd_wait:
            r = self.rs[self.pd_wait[0]]
            if not self._try_reserve_decode(r, t):
                break
            self.pd_wait.popleft()

    def _dispatch(self, t: float) -> None:
        self._retry_waits(t)
        for inst in self.insts:
            if inst.state == "migrating":
                continue
            if inst.running is not None or inst.stepping:
                continue
            role = inst.role
            if role is StageRole.ENCODE and inst.queue:
                self._start_encode(inst, t)
            elif role is StageRole.PREFILL and inst.queue:
                self._start_prefill(inst, t)
            elif role is StageRole.ENCODE_PREFILL and inst.queue:
                self._start_fused(inst, t)
            elif role is StageRole.MONOLITHIC:
                # Pending prefill work preempts decode between steps.
                if inst.queue:
                    self._start_fused(inst, t)
                if inst.running is None and inst.resident:
                    self._start_step(inst, t)
            elif role is StageRole.DECODE and inst.resident:
                self._start_step(inst, t)
        for inst in self.insts:
            if inst.state == "offloading":
                self._maybe_finish_offload(inst, t)


def run_simulation(config: SystemConfig, workload: Sequence[Request],
                   seed: int = 0) -> SimTrace:
    """Execute ``config`` against ``workload`` and return the full trace.

    The engine is deterministic; ``seed`` is only recorded in the trace
    metadata so downstream artifacts can state their provenance.
    """
    return _Sim(config, workload, seed).run()

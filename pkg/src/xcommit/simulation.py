"""Runs a workload through one commit protocol on simulated chains.

The host owns the kernel, one ChainNode per chain and the per-chain protocol
state (participant machines, hosted coordinators, the working ledger). It
feeds machine inputs and carries out their outputs:

* messages between chains go through the kernel network and are counted;
  messages a chain sends to itself are local and free;
* a chain handles inputs only while its proxy is up; anything arriving while
  it is down waits for re-election (SBP, RBP) or recovery (2PC, HUB);
* each participant state change is replicated to the chain's other nodes,
  counted as |N_i| - 1 messages;
* the working ledger is changed once per (transaction, chain) at COMMIT; the
  blocks only record where legs land. Legs cut by a fork go back to the
  mempool, except under RBP where the participant asks for a recycle.
"""

from __future__ import annotations

import math
import random
from typing import Dict, Iterable, List, Optional

from .chain import Ledger, LedgerError, LockHeldByOther, NotLockHolder, TransactionRequest
from .config import RunConfig
from .kernel import BudgetExhausted, EventKind, Kernel
from .node import ChainNode, ChainParams, NoQualifiedNode
from .protocols import (PHASE_OF_KIND, ChainLost, Completed, CoordinatorState, CoordPhase, Cut,
                        Finalized, HubFinished, HubForward, HubStart, HubState, Landed, Msg,
                        MsgKind, ParticipantState, ProtocolConfig, ProtocolKind, Replicate,
                        Requeue, RequestPool, Restart, Send, SetTimer, SlidingWindow, StaleEpoch,
                        Start, Submit, WindowAdd, WindowEvict, coordinator_step, hub_step,
                        participant_step, recycle)
from .trace import ChainSummary, RunTrace, TxnMetrics
from .workload import generate_workload

COORD_KINDS = frozenset({MsgKind.READY, MsgKind.ABORT_VOTE, MsgKind.DONE, MsgKind.RECYCLE})
PART_KINDS = frozenset({MsgKind.PRECOMMIT, MsgKind.COMMIT, MsgKind.ABORT})
EARLY_PHASES = (CoordPhase.INIT, CoordPhase.PRECOMMIT_SENT)


class _Chain:
    def __init__(self, params: ChainParams, seed: int, ledger: Ledger):
        self.params = params
        self.chain = params.chain
        self.node = ChainNode(params, seed)
        self.initial = ledger
        self.ledger = ledger
        self.window = SlidingWindow(params.chain)
        self.deferred: list = []
        self.tick_pending = False
        self.last_tick = 0.0
        self.pool = RequestPool()
        self.draining = False
        self.parts: Dict[int, ParticipantState] = {}
        self.coords: Dict[int, CoordinatorState] = {}
        self.hub: Optional[HubState] = None
        self.lost = False
        self.inflight: Dict[int, None] = {}


class _Txn:
    __slots__ = ("req", "m", "coord_chain", "involved", "final_chains", "hub_acked", "settled")

    def __init__(self, req: TransactionRequest, m: TxnMetrics, coord_chain: int):
        self.req = req
        self.m = m
        self.coord_chain = coord_chain
        self.involved = tuple(sorted(set(req.chains) | {coord_chain, req.coordinator}))
        self.final_chains: set = set()
        self.hub_acked = False
        self.settled = False


class Simulation:
    def __init__(self, config: RunConfig, requests: Optional[Iterable[TransactionRequest]] = None):
        cfg = self.cfg = config.validate()
        self.kind = cfg.protocol
        self.kernel = Kernel(cfg.sim_params(), cfg.livelock_cap(), record=cfg.record_events)
        self.pcfg = ProtocolConfig(cfg.protocol, cfg.coordinator_deadline(), cfg.lambda_budget,
                                   cfg.literal_wait)
        self.failover = self.kind in (ProtocolKind.SBP, ProtocolKind.RBP)
        self.chains: Dict[int, _Chain] = {}
        for p in cfg.all_chain_params():
            ch = _Chain(p, cfg.seed, Ledger.uniform(p.chain, cfg.entities_per_chain, cfg.initial_balance))
            self.chains[p.chain] = ch
            for n in p.nodes:
                self.kernel.register(n, self._receive)
        self.kernel.on_recover = self._on_recover
        if self.kind is ProtocolKind.HUB:
            self.chains[cfg.hub_chain].hub = HubState(cfg.hub_capacity)
        self.requests = generate_workload(cfg) if requests is None else list(requests)
        for req in self.requests:
            for leg in req.legs:
                if leg.chain not in self.chains or leg.entity not in self.chains[leg.chain].ledger.balances:
                    raise ValueError(f"T{req.uuid}: leg {leg} outside the configured chains")
        self.txns: Dict[int, _Txn] = {}
        self.outstanding = len(self.requests)
        self.violations: List[str] = []
        self.window_samples: list = []
        self.crash_rng = random.Random(f"{cfg.seed}:crash")
        self.crash_until = -1.0
        self.crashes = 0
        self.hb_idle = 0
        self.hb_attributed = 0
        self.stale = 0
        self.last_progress = 0.0
        params = cfg.all_chain_params()
        self.stall_horizon = 20 * (max(p.delta for p in params) + cfg.f + self.pcfg.deadline
                                   + max(p.block_interval for p in params))

    # -- driver ----------------------------------------------------------------

    def run(self) -> RunTrace:
        k = self.kernel
        coord_of = (lambda r: self.cfg.hub_chain) if self.kind is ProtocolKind.HUB else (lambda r: r.coordinator)
        for req in self.requests:
            m = TxnMetrics(req.uuid, self.kind.value, req.coordinator,
                           tuple((leg.chain, leg.entity.account, leg.delta) for leg in req.legs),
                           req.submit_time)
            rec = _Txn(req, m, coord_of(req))
            if req.uuid in self.txns:
                raise ValueError(f"duplicate uuid {req.uuid}")
            self.txns[req.uuid] = rec
            k.schedule(req.submit_time, EventKind.ARRIVAL, self._arrive, rec)
        if self.outstanding:
            for ch in self.chains.values():
                if self.failover:
                    k.after(ch.params.sigma, EventKind.TIMER, self._heartbeat, ch)
                if ch.params.fork_prob > 0:
                    self._ensure_tick(ch)
            if self.cfg.crash_rate > 0 and self.cfg.lambda_budget > 0:
                k.after(self.crash_rng.expovariate(self.cfg.crash_rate), EventKind.CRASH, self._crash_tick)
            if self.cfg.window_sample_interval > 0:
                k.after(self.cfg.window_sample_interval, EventKind.TIMER, self._sample)
        ktrace = k.run()
        if self.outstanding:
            stuck = sorted(u for u, r in self.txns.items() if not r.settled)
            self.violations.append(f"stalled: {len(stuck)} transaction(s) never settled, e.g. T{stuck[0]}")
        return self._build_trace(ktrace)

    def _alive(self) -> bool:
        """Periodic processes keep going while work is outstanding and not stalled."""
        return self.outstanding > 0 and self.kernel.now - self.last_progress <= self.stall_horizon

    def _input(self, chain: int, fn, *args) -> None:
        ch = self.chains[chain]
        if self.kernel.is_up(ch.node.proxy.current_proxy):
            fn(*args)
        else:
            ch.deferred.append((fn, args))

    def _flush(self, ch: _Chain) -> None:
        items, ch.deferred = ch.deferred, []
        for fn, args in items:
            self._input(ch.chain, fn, *args)

    # -- arrivals and hub --------------------------------------------------------

    def _arrive(self, rec: _Txn) -> None:
        k = self.kernel
        self.last_progress = k.now
        u = rec.req.uuid
        down = False
        for c in rec.involved:
            ch = self.chains[c]
            ch.inflight[u] = None
            if not k.is_up(ch.node.proxy.current_proxy):
                down = True
        if down and self.cfg.lambda_budget > 0 and k.failures.get(u, 0) < self.cfg.lambda_budget:
            # arriving into an outage counts as one failure seen in Phase I
            k.failures[u] = k.failures.get(u, 0) + 1
            rec.m.lambda1 += 1
        self._input(rec.req.coordinator, self._start, rec)

    def _start(self, rec: _Txn) -> None:
        if self.kind is ProtocolKind.HUB:
            self._send(rec.req.coordinator, MsgKind.HUB_FORWARD, rec.coord_chain, rec, 0)
        else:
            self._launch(self.chains[rec.coord_chain], rec)

    def _launch(self, ch: _Chain, rec: _Txn) -> None:
        u = rec.req.uuid
        ch.coords[u] = CoordinatorState(u, ch.chain, rec.req.chains)
        if self.kind is ProtocolKind.RBP:
            ch.pool.requests[u] = rec.req
        self._coord(ch, rec, Start())

    # -- messages ----------------------------------------------------------------

    def _send(self, src: int, kind: MsgKind, dst: int, rec: _Txn, attempt: int) -> None:
        k = self.kernel
        sp = self.chains[src].node.proxy
        if src == dst:
            k.after(0.0, EventKind.MESSAGE, self._input, dst, self._dispatch,
                    dst, kind, rec, attempt, src, sp.epoch)
            return
        dp = self.chains[dst].node.proxy.current_proxy
        k.send(k.envelope(sp.current_proxy, dp, kind, rec.req.uuid, attempt, sp.epoch))
        m = rec.m
        m.messages_total += 1
        if PHASE_OF_KIND[kind] == 1:
            m.messages_phase1 += 1
        else:
            m.messages_phase2 += 1

    def _receive(self, env) -> None:
        chain = env.dst.chain
        self._input(chain, self._dispatch, chain, env.kind, self.txns[env.txn],
                    env.attempt, env.src.chain, env.epoch)

    def _dispatch(self, chain: int, kind: MsgKind, rec: _Txn, attempt: int, src: int, epoch: int) -> None:
        ch = self.chains[chain]
        u = rec.req.uuid
        if kind in COORD_KINDS:
            if u in ch.coords:
                self._coord(ch, rec, Msg(kind, u, src, chain, attempt, epoch))
        elif kind in PART_KINDS:
            self._part(ch, rec, Msg(kind, u, src, chain, attempt, epoch))
        elif kind is MsgKind.HUB_FORWARD:
            ch.hub, out = hub_step(ch.hub, HubForward(u))
            for o in out:
                self._launch(ch, self.txns[o.txn])
        elif kind is MsgKind.HUB_ACK:
            rec.hub_acked = True
            self._check_settled(rec)

    # -- coordinator ---------------------------------------------------------------

    def _coord(self, ch: _Chain, rec: _Txn, event) -> None:
        u = rec.req.uuid
        try:
            st, out = coordinator_step(ch.coords[u], event, self.pcfg, self.kernel.now)
        except StaleEpoch:
            self.stale += 1
            return
        ch.coords[u] = st
        for o in out:
            t = type(o)
            if t is Send:
                self._send(ch.chain, o.kind, o.dst, rec, o.attempt)
            elif t is SetTimer:
                self.kernel.after(o.delay, EventKind.TIMER, self._input, ch.chain, self._coord, ch, rec, o.token)
            elif t is Completed:
                self._completed(ch, rec, o.committed)
            elif t is Requeue:
                self._requeue(ch, rec)
        self._check_settled(rec)

    def _completed(self, ch: _Chain, rec: _Txn, committed: bool) -> None:
        m = rec.m
        now = self.kernel.now
        if committed:
            if m.commit is None:
                m.commit = now
            m.last_commit = now
        else:
            m.abort = now
        if ch.hub is not None:
            ch.hub, out = hub_step(ch.hub, HubFinished(rec.req.uuid))
            self._send(ch.chain, MsgKind.HUB_ACK, rec.req.coordinator, rec, 0)
            for o in out:
                self._launch(ch, self.txns[o.txn])

    def _requeue(self, ch: _Chain, rec: _Txn) -> None:
        ch.pool = recycle(ch.pool, [rec.req.uuid])
        rec.m.recycle_count += 1
        if rec.m.commit is not None:
            rec.m.recycled_after_commit = True
        if not ch.draining:
            ch.draining = True
            self.kernel.after(0.0, EventKind.TIMER, self._input, ch.chain, self._drain, ch)

    def _drain(self, ch: _Chain) -> None:
        ch.draining = False
        while True:
            u, ch.pool = ch.pool.pop()
            if u is None:
                return
            self._coord(ch, self.txns[u], Restart())

    def _check_settled(self, rec: _Txn) -> None:
        if rec.settled:
            return
        u = rec.req.uuid
        host = self.chains[rec.coord_chain]
        st = host.coords.get(u)
        if st is None:
            return
        if st.phase is CoordPhase.COMMITTED:
            if len(rec.final_chains) < len(rec.req.legs) or u in host.pool.queue:
                return
        elif st.phase is not CoordPhase.ABORTED:
            return
        if self.kind is ProtocolKind.HUB and not rec.hub_acked:
            return
        rec.settled = True
        now = self.kernel.now
        rec.m.settled = now
        self.outstanding -= 1
        self.last_progress = now
        self.kernel.note_progress()
        for c in rec.involved:
            self.chains[c].inflight.pop(u, None)

    # -- participants --------------------------------------------------------------

    def _part(self, ch: _Chain, rec: _Txn, event) -> None:
        u = rec.req.uuid
        ps = ch.parts.get(u)
        if ps is None:
            leg = rec.req.leg_on(ch.chain)
            ps = ParticipantState(u, ch.chain, rec.coord_chain, leg.entity, leg.delta, ch.params.delta)
        try:
            ps, ch.ledger, out = participant_step(ps, event, ch.ledger, self.pcfg, self.kernel.now)
        except StaleEpoch:
            self.stale += 1
            return
        except (LockHeldByOther, NotLockHolder) as exc:
            self.violations.append(f"lock: chain {ch.chain}: {exc}")
            return
        except LedgerError as exc:
            self.violations.append(f"ledger: chain {ch.chain}: {exc}")
            return
        ch.parts[u] = ps
        m = rec.m
        for o in out:
            t = type(o)
            if t is Send:
                self._send(ch.chain, o.kind, o.dst, rec, o.attempt)
            elif t is Replicate:
                n = ch.params.n_nodes - 1
                m.messages_total += n
                if o.phase == 1:
                    m.messages_phase1 += n
                else:
                    m.messages_phase2 += n
            elif t is Submit:
                if ch.node.submit(u):
                    self._ensure_tick(ch)
            elif t is SetTimer:
                self.kernel.after(o.delay, EventKind.TIMER, self._input, ch.chain, self._part, ch, rec, o.token)
            elif t is WindowAdd:
                ch.window.add(u, self.kernel.now)
            elif t is WindowEvict:
                ch.window.evict(u)

    def _finalized(self, ch: _Chain, rec: _Txn) -> None:
        rec.final_chains.add(ch.chain)
        self._part(ch, rec, Finalized(rec.req.uuid))
        self._check_settled(rec)

    # -- blocks --------------------------------------------------------------------

    def _ensure_tick(self, ch: _Chain) -> None:
        if ch.tick_pending:
            return
        ch.tick_pending = True
        now = self.kernel.now
        bi = ch.params.block_interval
        at = max(now, math.ceil(now / bi) * bi)
        if at <= ch.last_tick:
            at = ch.last_tick + bi
        self.kernel.schedule(at, EventKind.BLOCK, self._block, ch)

    def _block(self, ch: _Chain) -> None:
        k = self.kernel
        now = k.now
        ch.tick_pending = False
        ch.last_tick = now
        node = ch.node
        res = node.produce_block(now, k.is_up)
        if res.block is not None:
            for u in res.cut:
                if self.kind is not ProtocolKind.RBP:
                    node.submit(u)
                self._input(ch.chain, self._part, ch, self.txns[u], Cut(u))
            delta = ch.params.delta
            watched = {}
            for u in res.landed:
                b = node.leg_block[u]
                watched[b.block_id] = b
                self._input(ch.chain, self._part, ch, self.txns[u], Landed(u))
            for b in watched.values():
                k.schedule(max(now, b.created_at + delta), EventKind.TIMER, self._final_block, ch, b)
        if node.mempool or (ch.params.fork_prob > 0 and self._alive()):
            self._ensure_tick(ch)

    def _final_block(self, ch: _Chain, b) -> None:
        node = ch.node
        if not node.on_main(b):
            return
        node.finalize_through(b.index)
        for u in b.txns:
            if node.leg_block.get(u) is b:
                self._input(ch.chain, self._finalized, ch, self.txns[u])

    # -- failures and failover -------------------------------------------------------

    def _on_recover(self, node) -> None:
        ch = self.chains[node.chain]
        if node == ch.node.proxy.current_proxy:
            ch.lost = False
            self._flush(ch)

    def _heartbeat(self, ch: _Chain) -> None:
        if not self._alive():
            return
        k = self.kernel
        node = ch.node
        old = node.proxy.current_proxy
        try:
            res = node.heartbeat_tick(k.now, k.is_up)
        except NoQualifiedNode:
            res = None
            if not ch.lost:
                ch.lost = True
                self._chain_lost(ch)
        if res is not None:
            if res.elected is not None:
                ch.lost = False
                if res.elected != old:
                    k.redirect_parked(old, res.elected)
                self._flush(ch)
            n = res.probes + res.acks
            if res.proxy_alive or not ch.inflight:
                self.hb_idle += n
            elif n:
                # unanswered probes are charged to the oldest transaction waiting on this chain
                rec = self.txns[next(iter(ch.inflight))]
                self.hb_attributed += n
                rec.m.heartbeat_messages += n
                rec.m.messages_total += n
                st = self.chains[rec.coord_chain].coords.get(rec.req.uuid)
                if st is None or st.phase in EARLY_PHASES:
                    rec.m.messages_phase1 += n
                else:
                    rec.m.messages_phase2 += n
        k.after(ch.params.sigma, EventKind.TIMER, self._heartbeat, ch)

    def _chain_lost(self, ch: _Chain) -> None:
        for u in list(ch.inflight):
            rec = self.txns[u]
            host = self.chains[rec.coord_chain]
            if u in host.coords:
                self._input(host.chain, self._coord, host, rec, ChainLost(ch.chain))

    def _crash_tick(self) -> None:
        if not self._alive():
            return
        k = self.kernel
        rng = self.crash_rng
        now = k.now
        if now >= self.crash_until:
            ch = self.chains[rng.randint(1, self.cfg.n_chains)]
            proxy = ch.node.proxy.current_proxy
            target = rng.choice(ch.params.nodes) if self.cfg.crash_non_proxy else proxy
            if k.is_up(target):
                victims = list(ch.inflight) if target == proxy else []
                try:
                    k.inject_crash(target, now, victims)
                except BudgetExhausted:
                    pass
                else:
                    self.crash_until = now + self.cfg.f
                    self.crashes += 1
                    for u in victims:
                        rec = self.txns[u]
                        st = self.chains[rec.coord_chain].coords.get(u)
                        if st is None or st.phase in EARLY_PHASES:
                            rec.m.lambda1 += 1
                        else:
                            rec.m.lambda2 += 1
        k.after(rng.expovariate(self.cfg.crash_rate), EventKind.CRASH, self._crash_tick)

    def _sample(self) -> None:
        if not self._alive():
            return
        now = self.kernel.now
        for ch in self.chains.values():
            self.window_samples.append((now, ch.chain, len(ch.window)))
        self.kernel.after(self.cfg.window_sample_interval, EventKind.TIMER, self._sample)

    # -- result ----------------------------------------------------------------------

    def _build_trace(self, ktrace) -> RunTrace:
        cfg = self.cfg
        k = self.kernel
        chains = []
        for ch in self.chains.values():
            node = ch.node
            chains.append(ChainSummary(
                chain=ch.chain, n_nodes=ch.params.n_nodes, delta=ch.params.delta,
                initial={e.account: b for e, b in ch.initial.balances.items()},
                final={e.account: b for e, b in ch.ledger.balances.items()},
                main_legs={u: b.index for u, b in node.leg_block.items()},
                finalized_index=node.finalized_index(k.now),
                locks={e.account: h for e, h in ch.ledger.locks.items()},
                blocks=len(node.tree), main_length=len(node.main),
                reorgs=node.reorgs, cut_legs=node.cut_total))
        return RunTrace(
            protocol=self.kind.value, config_digest=cfg.digest(), seed=cfg.seed,
            tau_max=k.max_latency, f=cfg.f, lambda_budget=cfg.lambda_budget,
            block_interval=max(ch.params.block_interval for ch in self.chains.values()),
            txns=[self.txns[r.uuid].m for r in self.requests], chains=chains,
            violations=list(self.violations), window_samples=list(self.window_samples),
            n_events=ktrace.n_events, end_time=ktrace.end_time,
            event_digest=ktrace.digest() if cfg.record_events else "",
            heartbeat_idle=self.hb_idle, heartbeat_attributed=self.hb_attributed,
            stale_dropped=self.stale, crashes=self.crashes)


def simulate(config: RunConfig, requests: Optional[Iterable[TransactionRequest]] = None) -> RunTrace:
    return Simulation(config, requests).run()

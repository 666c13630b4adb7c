"""Dynamic secret-flow profiling.

Runs the program on a suite of inputs under a shadow machine that tracks
taint per register and per memory byte, and collects every program point
whose behaviour depended on a secret: conditional branches, loop trip
counts, memory accesses, and divisions.  The result seeds the sensitive
set that the linearization passes consume.

Implicit flows are handled in two places.  Values merged at a branch
join inherit the taint of the conditions whose regions end at that join.
Registers defined inside a loop whose exit condition was ever tainted
become tainted when the loop exits; the values they carry encode the
secret trip count even when every individual assignment was public.
Loop header phis take only the taint of their incoming operand, so an
induction variable stays public while the loop runs.
"""

from __future__ import annotations

import random
from collections import defaultdict
from dataclasses import dataclass, field

from .interp import DEFAULT_BUDGET, ExecInput, Machine
from .ir import BINOPS, Module, Reg, size_of
from .normalize import RegionTree, normalize_regions


class ProfileError(Exception):
    pass


@dataclass
class TaintReport:
    """Raw profiling facts, unioned over every input in the suite."""

    branches: set = field(default_factory=set)   # condbr iids, non-latch
    loops: set = field(default_factory=set)      # (fn, header) keys
    reads: set = field(default_factory=set)      # load iids, tainted address
    writes: set = field(default_factory=set)     # store iids, addr or value
    addr_tainted: set = field(default_factory=set)  # accesses, tainted pointer
    divrem: set = field(default_factory=set)     # div/rem iids, tainted ops
    loop_bounds: dict = field(default_factory=dict)  # (fn, header) -> trips

    def summary(self) -> dict:
        return {
            "branches": len(self.branches),
            "loops": len(self.loops),
            "reads": len(self.reads),
            "writes": len(self.writes),
            "divrem": len(self.divrem),
        }


@dataclass
class SensitiveSet:
    """Closure of the report over regions, callees and decoy reach."""

    regions: set = field(default_factory=set)    # (fn, kind, entry) rids
    functions: set = field(default_factory=set)  # bodies linearized whole
    accesses: set = field(default_factory=set)   # load/store iids for DFL
    divrem: set = field(default_factory=set)     # div/rem iids to sanitize
    bounds: dict = field(default_factory=dict)   # (fn, header) -> k


class TaintMachine(Machine):
    """Interpreter with a parallel boolean shadow for every value.

    One machine profiles one input; the report accumulates across runs.
    """

    def __init__(self, m: Module, rt: RegionTree, report: TaintReport,
                 budget: int = DEFAULT_BUDGET):
        super().__init__(m, lam=1, budget=budget)
        self.rt = rt
        self.report = report
        self.tstack = []        # reg taint dict per frame
        self.trips = []         # (fn, header) -> live trip count, per frame
        self.tflags = []        # (fn, header) -> latch cond ever tainted
        self.pending = []       # argument taints for the imminent call
        self.mtaint = set()     # tainted byte addresses
        self._ret_taint = False
        self._snap = {}
        self._joins = self._join_conds()
        self._defs_cache = {}

    def _join_conds(self):
        # (fn, join label) -> branch condition operands merging there
        joins = defaultdict(list)
        for r in self.rt.by_id.values():
            if r.kind != "branch" or r.exit is None:
                continue
            term = self.m.funcs[r.fn].blocks[r.entry].terminator
            joins[(r.fn, r.exit)].append(term.args[0])
        return dict(joins)

    def _taint_op(self, o, t) -> bool:
        if isinstance(o, Reg):
            return t.get(o.name, False)
        return False

    def _loop_defs(self, fn, loop):
        key = (fn.name, loop.entry)
        if key not in self._defs_cache:
            self._defs_cache[key] = {
                i.name
                for lbl in loop.blocks
                for i in fn.blocks[lbl].instrs
                if i.name is not None
            }
        return self._defs_cache[key]

    # -- frame discipline --------------------------------------------------

    def _call(self, fn, args):
        if self.pending:
            base = self.pending.pop()
        else:
            base = [p.secret for p in fn.params]
        self.tstack.append({p.name: bool(b) or p.secret
                            for p, b in zip(fn.params, base)})
        self.trips.append({})
        self.tflags.append({})
        try:
            return super()._call(fn, args)
        finally:
            self.tstack.pop()
            self.trips.pop()
            self.tflags.pop()

    def _do_call(self, ins, frame, fn, shadow):
        t = self.tstack[-1]
        if ins.callee in self.m.funcs:
            callee = self.m.funcs[ins.callee]
            if len(ins.args) == len(callee.params):
                self.pending.append([self._taint_op(a, t) for a in ins.args])
            super()._do_call(ins, frame, fn, shadow)
            if ins.name:
                t[ins.name] = self._ret_taint
        else:
            super()._do_call(ins, frame, fn, shadow)
            if ins.name:
                t[ins.name] = False

    def _exec(self, ins, frame, fn):
        if ins.op == "icall":
            t = self.tstack[-1]
            self.pending.append([self._taint_op(a, t) for a in ins.args[1:]])
            super()._exec(ins, frame, fn)
            if ins.name:
                t[ins.name] = self._ret_taint
            return
        super()._exec(ins, frame, fn)

    def _ret_hook(self, ins, frame, fn):
        self._ret_taint = self._taint_op(ins.args[0], self.tstack[-1])

    # -- flow rules --------------------------------------------------------

    def _phi_hook(self, ph, src_label, src, block_label, first, frame, fn):
        t = self.tstack[-1]
        if first:
            # phis copy in parallel; later phis must read pre-copy taints
            self._snap = dict(t)
        r = self._taint_op(src, self._snap)
        for cond in self._joins.get((fn.name, block_label), ()):
            r = r or self._taint_op(cond, t)
        t[ph.name] = r

    def _branch_hook(self, ins, from_label, to_label, frame, fn):
        t = self.tstack[-1]
        ct = self._taint_op(ins.args[0], t)
        loop = self.rt.loop_of_latch(fn.name, from_label)
        if loop is None:
            if ct:
                self.report.branches.add(ins.iid)
            return
        key = (fn.name, loop.entry)
        flags = self.tflags[-1]
        flags[key] = flags.get(key, False) or ct
        if to_label == loop.entry:
            self.trips[-1][key] = self.trips[-1].get(key, 1) + 1
            return
        n = self.trips[-1].pop(key, 1)
        bounds = self.report.loop_bounds
        bounds[key] = max(bounds.get(key, 1), n)
        if flags.pop(key, False):
            self.report.loops.add(key)
            for name in self._loop_defs(fn, loop):
                t[name] = True

    def _post_exec_hook(self, ins, frame, fn):
        op = ins.op
        if op in ("call", "icall"):
            return
        t = self.tstack[-1]

        def top(o):
            return self._taint_op(o, t)

        if op in BINOPS:
            r = top(ins.args[0]) or top(ins.args[1])
            if op in ("div", "rem") and r:
                self.report.divrem.add(ins.iid)
            t[ins.name] = r
        elif op == "icmp":
            t[ins.name] = top(ins.args[0]) or top(ins.args[1])
        elif op == "select":
            c = self._eval(ins.args[0], frame) & 1
            t[ins.name] = top(ins.args[0]) or top(ins.args[1 if c else 2])
        elif op == "load":
            p = self._eval(ins.args[0], frame)
            size = size_of(ins.ty)
            tp = top(ins.args[0])
            if tp:
                self.report.reads.add(ins.iid)
                self.report.addr_tainted.add(ins.iid)
            t[ins.name] = tp or any(a in self.mtaint
                                    for a in range(p, p + size))
        elif op == "store":
            tv = top(ins.args[0])
            tp = top(ins.args[1])
            if tv or tp:
                self.report.writes.add(ins.iid)
            if tp:
                self.report.addr_tainted.add(ins.iid)
            p = self._eval(ins.args[1], frame)
            span = range(p, p + size_of(ins.ty))
            if tv or tp:
                self.mtaint.update(span)
            else:
                self.mtaint.difference_update(span)
        elif op == "gep":
            t[ins.name] = any(top(a) for a in ins.args)
        elif op == "secret":
            t[ins.name] = True
        elif op in ("alloca", "heapalloc"):
            t[ins.name] = False
        elif ins.name is not None:
            t[ins.name] = any(top(a) for a in ins.args)


def input_shape(m: Module, entry: str = "main"):
    """(public, secret) slot counts the entry point consumes."""
    fn = m.funcs.get(entry)
    if fn is None:
        raise ProfileError("no entry function @%s" % entry)
    nsec = sum(1 for p in fn.params if p.secret)
    for ins in m.instructions():
        if ins.op == "secret":
            nsec = max(nsec, ins.args[0].value + 1)
    npub = sum(1 for p in fn.params if not p.secret)
    return npub, nsec


def default_suite(m: Module, entry: str = "main", space: int = 32768,
                  partitions: int = 128, seed: int = 0) -> list:
    """Profiling inputs: one secret vector per partition of the space.

    Each secret slot draws from its partition's subrange so the suite
    exercises the whole range without exhausting it; public arguments
    draw uniformly.  Deterministic for a given seed.
    """
    npub, nsec = input_shape(m, entry)
    rng = random.Random(seed)
    psize = max(1, space // partitions)
    suite = []
    for i in range(partitions):
        lo = (i * psize) % space
        secrets = [lo + rng.randrange(psize) for _ in range(nsec)]
        public = [rng.randrange(space) for _ in range(npub)]
        suite.append(ExecInput(public, secrets))
    return suite


def taint_profile(m: Module, suite, entry: str = "main",
                  budget: int = DEFAULT_BUDGET) -> TaintReport:
    """Profile every input and union the findings.

    The module must be in region normal form; the canonicalizer is
    re-run to recover the region tree, which is a no-op on normal-form
    input.  The program is expected to be error-free on the suite; an
    abort is a profiling failure, not a finding.
    """
    rt = normalize_regions(m)
    report = TaintReport()
    for inp in suite:
        tm = TaintMachine(m, rt, report, budget=budget)
        tr = tm.run(inp, entry)
        if tr.abort is not None:
            raise ProfileError("abort %r while profiling %s"
                               % (tr.abort, inp))
    return report


def direct_callgraph(m: Module) -> dict:
    """fn name -> [(call iid, callee name)] for calls to module functions."""
    cg = {}
    for f in m.funcs.values():
        edges = []
        for ins in f.instructions():
            if ins.op == "call" and ins.callee in m.funcs:
                edges.append((ins.iid, ins.callee))
        cg[f.name] = edges
    return cg


def close_sensitivity(m: Module, report: TaintReport, rt: RegionTree,
                      cg: dict | None = None) -> SensitiveSet:
    """Close the raw report over region structure and the call graph.

    A sensitive branch claims its whole region; nested regions follow.
    Functions called from guarded code run under decoys, so their entire
    bodies join the set.  Every access or division reachable under a
    decoy needs protection even when its own operands never carried
    taint: it executes with garbage on decoy paths.
    """
    if cg is None:
        cg = direct_callgraph(m)
    ss = SensitiveSet(bounds=dict(report.loop_bounds))
    where = {}
    for f in m.funcs.values():
        for bl in f.blocks.values():
            for i in bl.instrs:
                where[i.iid] = (f.name, bl.label)

    seeds = []
    for iid in report.branches:
        fname, lbl = where[iid]
        r = rt.branch_at(fname, lbl)
        if r is None:
            raise ProfileError(
                "sensitive branch %d is not a branch region entry" % iid)
        seeds.append(r)
    for key in report.loops:
        r = rt.loop_at(*key)
        if r is None:
            raise ProfileError("sensitive loop %r has no region" % (key,))
        seeds.append(r)

    regs = set()
    stack = list(seeds)
    while stack:
        r = stack.pop()
        if r.rid in regs:
            continue
        regs.add(r.rid)
        stack.extend(r.children)

    # blocks that may execute as decoys; a branch entry runs either way
    guarded = defaultdict(set)
    for rid in regs:
        r = rt.by_id[rid]
        bs = r.blocks - {r.entry} if r.kind == "branch" else set(r.blocks)
        guarded[r.fn] |= bs

    def called_in(fname, labels):
        f = m.funcs[fname]
        for lbl in labels:
            for i in f.blocks[lbl].instrs:
                if i.op == "call" and i.callee in m.funcs:
                    yield i.callee

    funcs = set()
    work = []
    for fname, labels in list(guarded.items()):
        work.extend(called_in(fname, labels))
    while work:
        g = work.pop()
        if g in funcs:
            continue
        funcs.add(g)
        all_lbls = set(m.funcs[g].blocks)
        guarded[g] |= all_lbls
        for r in rt.by_id.values():
            if r.fn == g and r.kind != "linear":
                regs.add(r.rid)
        work.extend(called_in(g, all_lbls))

    acc = set(report.reads) | set(report.writes)
    dr = set(report.divrem)
    for fname, labels in guarded.items():
        f = m.funcs[fname]
        for lbl in labels:
            for i in f.blocks[lbl].instrs:
                if i.op in ("load", "store"):
                    acc.add(i.iid)
                elif i.op in ("div", "rem"):
                    dr.add(i.iid)

    ss.regions = regs
    ss.functions = funcs
    ss.accesses = acc
    ss.divrem = dr
    return ss

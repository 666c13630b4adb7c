"""Data-flow linearization: striding plans for sensitive accesses.

Every load or store the profiler tied to a secret gets a plan listing
the portions of memory it may legitimately reach, from the points-to
elements of its pointer.  The wrapped access then touches each plan
window on every execution and keeps only the window holding the real
target, so the address trace stops depending on the secret.

Plans reference allocation sites, not addresses.  Stack and heap sites
under a plan are interposed so live instances sit on per-site lists the
wrapper can walk; sites whose frame cannot recurse are promoted to
module scope instead, which shrinks the walk to a fixed single portion.
Accesses whose pointer never tainted during profiling keep their own
address sequence and touch one window per execution.
"""

from __future__ import annotations

from .ir import (Const, DflAccessMetadata, DflEntry, Global, Module, Reg,
                 Sym, size_of)

HANDLER_WEIGHTS = {"simple": 1.0, "gather": 0.6, "bulk": 0.3}


class DflError(Exception):
    pass


def choose_handler(lam: int, length: int) -> str:
    """Pick the cheapest sweep style for one portion.

    Sub-cacheline quantization always pays for preloading the whole
    portion at once; with lambda at line size, short portions are swept
    window by window and long ones gathered with a stride walk.
    """
    if lam < 16:
        return "bulk"
    if length < 8 * lam:
        return "simple"
    return "gather"


def plan_cost(rec: DflAccessMetadata) -> float:
    """Relative per-execution cost of a plan, in weighted windows."""
    total = 0.0
    for e in rec.entries:
        nwin = -(-e.length // rec.lam)
        total += HANDLER_WEIGHTS[e.handler] * nwin
    return total


def build_metadata(m: Module, accesses: set, pt, lam: int = 64) -> int:
    """Attach a striding plan to every sensitive access; returns count.

    Plan ids are dense and assigned in access id order, so rebuilding
    from the same facts is reproducible.  An access with no points-to
    facts cannot be planned and is a hard error: leaving it unwrapped
    would silently reopen the address channel.
    """
    m.dflmeta.clear()
    mid = 0
    for iid in sorted(accesses):
        loc = m.find_instr(iid)
        if loc is None:
            raise DflError("sensitive access %d not in module" % iid)
        f, _, ins = loc
        if ins.op == "load":
            kind, pop = "load", ins.args[0]
        elif ins.op == "store":
            kind, pop = "store", ins.args[1]
        else:
            raise DflError("access %d is %s, not load/store" % (iid, ins.op))
        size = size_of(ins.ty)
        if isinstance(pop, Reg):
            elems = pt.of(f.name, pop.name)
        elif isinstance(pop, Sym) and pop.name in m.globals:
            elems = {("g:@" + pop.name, 0, 0, 0)}
        else:
            elems = set()
        entries = []
        for obj, lo, hi, st in sorted(elems):
            if obj[0] == "f":
                continue
            length = hi - lo + size
            entries.append(DflEntry(obj, lo, length, st if st else size,
                                    choose_handler(lam, length)))
        if not entries:
            raise DflError(
                "no points-to facts for access %d in @%s" % (iid, f.name))
        rec = DflAccessMetadata(mid, iid, kind, lam, size, ins.ty,
                                entries=entries)
        m.dflmeta[mid] = rec
        mid += 1
    return mid


def _cyclic_functions(m: Module) -> set:
    calls = {
        f.name: {i.callee for i in f.instructions()
                 if i.op == "call" and i.callee in m.funcs}
        for f in m.funcs.values()
    }
    cyc = set()
    for start, first in calls.items():
        seen = set()
        work = list(first)
        while work:
            g = work.pop()
            if g == start:
                cyc.add(start)
                break
            if g in seen:
                continue
            seen.add(g)
            work.extend(calls[g])
    return cyc


def promote_stack_objects(m: Module) -> int:
    """Hoist planned stack slots of non-recursive frames to module scope.

    At most one instance of such a frame is ever live, so the site list
    walk degenerates to one fixed object; a plain global gives the plan
    that shape for free.  Runs before interposition, which then only
    sees the sites that kept their lists.  The slot keeps its register
    by turning the alloca into an address-of on the new global.
    """
    wanted = set()
    for rec in m.dflmeta.values():
        for e in rec.entries:
            if e.site_kind() == "s":
                wanted.add(int(e.site.split(":")[1]))
    if not wanted:
        return 0
    recursive = _cyclic_functions(m)
    moved = {}
    for f in m.funcs.values():
        if f.name in recursive:
            continue
        for ins in f.instructions():
            if ins.op == "alloca" and ins.iid in wanted:
                gname = "dfl.promo.%d" % ins.iid
                m.globals[gname] = Global(gname, ins.ty)
                ins.op = "gep"
                ins.args = [Sym(gname), Const(0)]
                moved[ins.iid] = gname
    for rec in m.dflmeta.values():
        for e in rec.entries:
            if e.site_kind() != "s":
                continue
            site = int(e.site.split(":")[1])
            if site in moved:
                e.site = "g:@" + moved[site]
    return len(moved)


def interpose_allocations(m: Module) -> int:
    """Route planned stack/heap sites through the managed allocator.

    Managed instances carry in-band list headers, so wrapper sweeps can
    enumerate them without a runtime registry.  Every heapfree becomes
    a managed free once any heap site is planned: the managed form
    recognizes both header layouts, and a free site can receive
    pointers from either kind of allocation.
    """
    sites = set()
    for rec in m.dflmeta.values():
        for e in rec.entries:
            if e.site_kind() in ("s", "h"):
                sites.add(e.site_ref())
    n = 0
    any_heap = any(k == "h" for k, _ in sites)
    for f in m.funcs.values():
        for ins in f.instructions():
            if ins.op == "alloca" and ("s", ins.iid) in sites:
                ins.args = [Const(ins.iid), Const(size_of(ins.ty))]
                ins.op = "call"
                ins.callee = "dfl_alloc_stack"
                ins.ty = None
                n += 1
            elif ins.op == "heapalloc" and ("h", ins.iid) in sites:
                ins.args = [Const(ins.iid), Const(size_of(ins.ty))]
                ins.op = "call"
                ins.callee = "dfl_alloc_heap"
                ins.ty = None
                n += 1
            elif ins.op == "heapfree" and any_heap:
                ins.op = "call"
                ins.callee = "dfl_free"
    return n


def wrap_accesses(m: Module) -> int:
    """Swap planned loads/stores for their sweeping form, ids kept.

    Keeping the instruction id is what ties the running wrapper back to
    its plan record and the taken shadow, so nothing else may claim it.
    """
    by_access = {rec.access: rec for rec in m.dflmeta.values()}
    n = 0
    for f in m.funcs.values():
        for ins in f.instructions():
            rec = by_access.get(ins.iid)
            if rec is None:
                continue
            if ins.op == "load":
                ins.args = [ins.args[0], Const(rec.mid)]
                ins.callee = "ct_load"
            elif ins.op == "store":
                ins.args = [ins.args[1], ins.args[0], Const(rec.mid)]
                ins.callee = "ct_store"
            else:
                continue
            ins.op = "call"
            ins.ty = None
            n += 1
    return n


def _def_of(fn, name):
    for ins in fn.instructions():
        if ins.name == name:
            return ins
    return None


def optimize_natural_striding(m: Module, report) -> int:
    """Let public-address accesses keep their own stride.

    When profiling never saw the pointer tainted, the address sequence
    is already secret-independent and replaying it verbatim reveals
    nothing new; the wrapper then touches the one window under the raw
    pointer instead of sweeping the portion.  Runs after control-flow
    linearization so it can look through the decoy select guarding the
    pointer: the pre-select value is the raw address, and the selected
    one still decides whether the access is live.  Single-portion
    global plans only; instance lists can change shape between runs.
    """
    n = 0
    for f in m.funcs.values():
        for ins in f.instructions():
            if ins.op != "call" or ins.callee not in ("ct_load", "ct_store"):
                continue
            rec = m.dflmeta.get(ins.args[-1].value)
            if rec is None or len(rec.entries) != 1:
                continue
            if rec.entries[0].site_kind() != "g":
                continue
            if rec.access in report.addr_tainted:
                continue
            p_sel = ins.args[0]
            p_raw = p_sel
            if isinstance(p_sel, Reg):
                d = _def_of(f, p_sel.name)
                if d is not None and d.op == "call" \
                        and d.callee == "ct_select" \
                        and isinstance(d.args[2], Const) \
                        and d.args[2].value == 0:
                    p_raw = d.args[1]
            if ins.callee == "ct_load":
                ins.callee = "ct_load_nat"
                ins.args = [p_sel, p_raw, ins.args[1]]
            else:
                ins.callee = "ct_store_nat"
                ins.args = [p_sel, p_raw, ins.args[1], ins.args[2]]
            rec.natural = True
            n += 1
    return n

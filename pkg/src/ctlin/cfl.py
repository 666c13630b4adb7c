"""Control-flow linearization.

Secret-dependent branches disappear by executing both arms in sequence.
A taken predicate, always canonical 0/1 in the IR, says whether the
current code runs for real; the non-taken arm runs as a decoy whose
wrapped accesses see a null pointer and whose results are discarded by
ct_select at the join.  Secret-bounded loops run a fixed number of
iterations learned during profiling; the bound lives in a per-loop cell
and grows, branchlessly, whenever a real execution needs more.

The transforms here assume region normal form, that every protected
access is already wrapped (ct_load/ct_store), and that inner regions are
processed before outer ones.  Linearizing rewires control flow but keeps
blocks intact, so an arm that contains an already-linearized loop simply
threads through it: the loop's own trip padding makes it straight-line
in trace terms, not in block terms.
"""

from __future__ import annotations

from .ir import (Block, Const, Function, Global, HardenInfo, I1, I8, I32,
                 I64, Instr, Module, Param, Reg, Sym)
from .normalize import RegionTree

M64 = (1 << 64) - 1

# calls whose first argument is a pointer that must become null on decoy
# paths; a null never matches any striding window and never frees
_PTR_WRAP = ("ct_load", "ct_store", "ct_load_nat", "ct_store_nat",
             "dfl_free")


class LinearizeError(Exception):
    pass


# ---------------------------------------------------------------------------
# select schemes

def encode_taken(scheme: int, t: int) -> int:
    """Canonical 0/1 taken into the operand form scheme expects."""
    t &= 1
    if scheme == 4:
        return M64 if t else 0
    return t


def ct_select(scheme: int, t: int, a: int, b: int) -> int:
    """t ? a : b over 64-bit values, t already encoded for the scheme.

    All five forms compute the same function; they differ in the shape a
    backend would lower them to.  Kept distinct so traces can be checked
    for scheme-independence.
    """
    a &= M64
    b &= M64
    if scheme == 1:
        # forced conditional move: offset form keeps one data dependency
        return (b + ((a - b) & M64) * (t & 1)) & M64
    if scheme == 2:
        # plain ternary, the baseline a compiler may turn into cmov
        return a if t & 1 else b
    if scheme == 3:
        # mask from negation: -1 selects a, 0 selects b
        mask = (-(t & 1)) & M64
        return (a & mask) | (b & (mask ^ M64))
    if scheme == 4:
        # caller supplies the wide mask directly
        return (a & t) | (b & (t ^ M64))
    if scheme == 5:
        # multiplicative blend, no flags and no branches anywhere
        t &= 1
        return (a * t + b * (1 - t)) & M64
    raise ValueError("unknown select scheme %d" % scheme)


# ---------------------------------------------------------------------------
# shared rewriting helpers

def _op(tp):
    return tp


def _replace_uses(fn: Function, old: str, new):
    for b in fn.blocks.values():
        for i in b.instrs:
            i.args = [new if isinstance(a, Reg) and a.name == old else a
                      for a in i.args]
            if i.incoming:
                i.incoming = [
                    (l, new if isinstance(v, Reg) and v.name == old else v)
                    for l, v in i.incoming]


def _subst_block(b: Block, sub: dict):
    for i in b.instrs:
        i.args = [sub.get(a.name, a) if isinstance(a, Reg) else a
                  for a in i.args]
        if i.incoming:
            i.incoming = [(l, sub.get(v.name, v) if isinstance(v, Reg) else v)
                          for l, v in i.incoming]


def _type_env(m: Module, fn: Function) -> dict:
    from .ir import _result_type
    env = {p.name: p.ty for p in fn.params}
    for _ in range(2):
        for ins in fn.instructions():
            if ins.name:
                t = _result_type(m, ins, env)
                if t is not None:
                    env[ins.name] = t
    return env


def _resolve_pending(fn: Function, ctx: dict, labels: set, new_op):
    rest = []
    for lbl, ph in ctx["pending"]:
        if lbl in labels:
            _replace_uses(fn, ph, new_op)
        else:
            rest.append((lbl, ph))
    ctx["pending"] = rest


def _guard_block(m: Module, fn: Function, blk: Block, tk: Instr, ctx: dict):
    """Put every unclaimed instruction of blk under taken register tk.

    Pointer arguments of wrapped accesses and frees get a null-select so
    decoy executions touch nothing for real; calls into functions that
    read the taken cell get it stored first.  Instructions already owned
    by an inner region keep their finer-grained taken.
    """
    tm = ctx["tm"]
    out = []
    for ins in blk.instrs:
        if ins.iid in tm or ins.iid in ctx["skip"] \
                or ins.op in ("phi", "br", "condbr", "ret"):
            out.append(ins)
            continue
        if (ins.op == "call" and ins.callee in _PTR_WRAP) \
                or ins.op == "heapfree":
            si = m.new_iid()
            sel = Instr(si, "call", name="cfl.p%d" % si, callee="ct_select",
                        args=[Reg(tk.name), ins.args[0], Const(0)])
            tm[sel.iid] = tk.iid
            out.append(sel)
            ins.args[0] = Reg(sel.name)
        if ins.op == "call" and ins.callee == "trap":
            # failsafe becomes conditional on actually being reached
            ins.args = [Reg(tk.name)]
        if ins.op == "call" and ins.callee in ctx["threaded"]:
            sti = m.new_iid()
            st = Instr(sti, "store", ty=I1,
                       args=[Reg(tk.name), Sym("cfl.taken")])
            tm[st.iid] = tk.iid
            out.append(st)
            ctx["thr_done"].add(ins.iid)
        tm[ins.iid] = tk.iid
        out.append(ins)
    blk.instrs = out


def _arm_walk(fn: Function, start: str, join: str):
    """Blocks from start to join, threading through linearized loops.

    Follows the first successor everywhere: for a plain br that is the
    only edge, for a loop latch it is the exit edge, which is the linear
    continuation once trips are padded.
    """
    if start == join:
        return []
    blocks = []
    cur = start
    seen = set()
    while cur != join:
        if cur in seen or cur not in fn.blocks:
            raise LinearizeError(
                "arm at %s does not reach join %s" % (start, join))
        seen.add(cur)
        b = fn.blocks[cur]
        blocks.append(b)
        t = b.terminator
        if t.op not in ("br", "condbr"):
            raise LinearizeError(
                "arm block %s ends in %s, cannot linearize" % (cur, t.op))
        cur = t.labels[0]
    return blocks


# ---------------------------------------------------------------------------
# branch regions

def _merge_branch(m: Module, fn: Function, r, tp, ctx: dict):
    tm = ctx["tm"]
    entry_b = fn.blocks[r.entry]
    term = entry_b.terminator
    if term.op != "condbr":
        raise LinearizeError("branch region %s lost its condbr" % r.entry)
    cond = term.args[0]
    join = r.exit
    twalk = _arm_walk(fn, term.labels[0], join)
    ewalk = _arm_walk(fn, term.labels[1], join)

    ti = m.new_iid()
    tthen = Instr(ti, "and", name="cfl.t%d" % ti, ty=I1, args=[cond, tp])
    ni = m.new_iid()
    notc = Instr(ni, "xor", name="cfl.n%d" % ni, ty=I1,
                 args=[cond, Const(1)])
    ei = m.new_iid()
    telse = Instr(ei, "and", name="cfl.t%d" % ei, ty=I1,
                  args=[Reg(notc.name), tp])

    _resolve_pending(fn, ctx, {b.label for b in twalk}, Reg(tthen.name))
    _resolve_pending(fn, ctx, {b.label for b in ewalk}, Reg(telse.name))
    for blks, tk in ((twalk, tthen), (ewalk, telse)):
        for blk in blks:
            _guard_block(m, fn, blk, tk, ctx)

    # arm-entry phis had a single predecessor; once the else side hangs
    # off the then tail those labels lie, so fold them away
    for blk in twalk + ewalk:
        for ph in list(blk.phis()):
            if len(ph.incoming) == 1:
                _replace_uses(fn, ph.name, ph.incoming[0][1])
                blk.instrs.remove(ph)

    thenpred = twalk[-1].label if twalk else r.entry
    elsepred = ewalk[-1].label if ewalk else r.entry
    lastb = ewalk[-1] if ewalk else (twalk[-1] if twalk else entry_b)
    jb = fn.blocks[join]
    sels = []
    for ph in jb.phis():
        inc = dict(ph.incoming)
        if thenpred == elsepred:
            vt = ve = inc[r.entry]
        else:
            vt, ve = inc.get(thenpred), inc.get(elsepred)
        if vt is None or ve is None:
            raise LinearizeError(
                "join %s phi misses an arm of %s" % (join, r.entry))
        si = m.new_iid()
        sel = Instr(si, "call", name="cfl.s%d" % si, callee="ct_select",
                    args=[cond, vt, ve])
        sels.append(sel)
        rest = [(l, v) for l, v in ph.incoming
                if l not in (thenpred, elsepred)]
        ph.incoming = sorted(rest + [(lastb.label, Reg(sel.name))])
    if sels:
        lastb.instrs = lastb.instrs[:-1] + sels + [lastb.instrs[-1]]
    for ph in list(jb.phis()):
        if len(ph.incoming) == 1:
            _replace_uses(fn, ph.name, ph.incoming[0][1])
            jb.instrs.remove(ph)

    # rewire: entry -> then chain -> else chain -> join
    first = twalk[0].label if twalk else (ewalk[0].label if ewalk else join)
    entry_b.instrs = entry_b.instrs[:-1] + [tthen, notc, telse] + [term]
    term.op = "br"
    term.args = []
    term.labels = [first]
    if twalk:
        nxt = ewalk[0].label if ewalk else join
        tt = twalk[-1].terminator
        tt.labels = [nxt if l == join else l for l in tt.labels]


# ---------------------------------------------------------------------------
# loop regions

def _merge_loop(m: Module, fn: Function, r, tp, ctx: dict, k: int):
    H, L, X = r.entry, r.latch, r.exit
    hb, lb = fn.blocks[H], fn.blocks[L]
    term = lb.terminator
    if term.op != "condbr" or term.labels != [X, H]:
        raise LinearizeError("loop %s latch not canonical" % H)
    c_exit = term.args[0]
    preds = [lbl for lbl, b in fn.blocks.items()
             if lbl not in r.blocks and H in b.terminator.labels]
    if len(preds) != 1:
        raise LinearizeError("loop %s lacks a unique preheader" % H)
    P = preds[0]

    cell = "cfl.k.%s.%s" % (fn.name, H)
    m.globals[cell] = Global(cell, I64, int(k).to_bytes(8, "little"))
    kld = Instr(m.new_iid(), "load", name="cfl.kld." + H, ty=I64,
                args=[Sym(cell)])
    pb = fn.blocks[P]
    pb.instrs.insert(len(pb.instrs) - 1, kld)

    cn_n, kn_n, tn_n = "cfl.cn." + H, "cfl.kn." + H, "cfl.tn." + H
    cidx = Instr(m.new_iid(), "phi", name="cfl.c." + H, ty=I64,
                 incoming=sorted([(P, Const(0)), (L, Reg(cn_n))]))
    kcur = Instr(m.new_iid(), "phi", name="cfl.kc." + H, ty=I64,
                 incoming=sorted([(P, Reg(kld.name)), (L, Reg(kn_n))]))
    tcur = Instr(m.new_iid(), "phi", name="cfl.tl." + H, ty=I1,
                 incoming=sorted([(P, tp), (L, Reg(tn_n))]))

    _resolve_pending(fn, ctx, set(r.blocks), Reg(tcur.name))
    for lbl, blk in fn.blocks.items():
        if lbl in r.blocks:
            _guard_block(m, fn, blk, tcur, ctx)

    # live-outs freeze at the last real iteration: while taken, the exit
    # copy follows the body value; during padding it holds
    env = _type_env(m, fn)
    defs = [i for lbl, b in fn.blocks.items() if lbl in r.blocks
            for i in b.instrs if i.name]
    outside = [b for lbl, b in fn.blocks.items() if lbl not in r.blocks]
    used = set()
    for b in outside:
        for i in b.instrs:
            used.update(a.name for a in i.args if isinstance(a, Reg))
            used.update(v.name for _, v in i.incoming if isinstance(v, Reg))
    flanks, outs, sub = [], [], {}
    for d in defs:
        if d.name not in used:
            continue
        fname, oname = "cfl.fl." + d.name, "cfl.o." + d.name
        flanks.append(Instr(m.new_iid(), "phi", name=fname,
                            ty=env.get(d.name) or I64,
                            incoming=sorted([(P, Const(0)),
                                             (L, Reg(oname))])))
        outs.append(Instr(m.new_iid(), "call", name=oname,
                          callee="ct_select",
                          args=[Reg(tcur.name), Reg(d.name), Reg(fname)]))
        sub[d.name] = Reg(oname)
    for b in outside:
        _subst_block(b, sub)

    def gen(op, name, ty, args, pred=None):
        return Instr(m.new_iid(), op, name=name, ty=ty, pred=pred, args=args)

    cn = gen("add", cn_n, I64, [Reg(cidx.name), Const(1)])
    eq = gen("icmp", "cfl.eq." + H, None, [Reg(cn_n), Reg(kcur.name)],
             pred="eq")
    nc = gen("xor", "cfl.ncnd." + H, I1, [c_exit, Const(1)])
    nt = gen("xor", "cfl.ntk." + H, I1, [Reg(tcur.name), Const(1)])
    cor = gen("or", "cfl.cor." + H, I1, [c_exit, Reg(nt.name)])
    ex = gen("and", "cfl.ex." + H, I1, [Reg(eq.name), Reg(cor.name)])
    g0 = gen("and", "cfl.g0." + H, I1, [Reg(tcur.name), Reg(nc.name)])
    g1 = gen("and", "cfl.g1." + H, I1, [Reg(g0.name), Reg(eq.name)])
    gz = gen("select", "cfl.gz." + H, None, [Reg(g1.name), Const(1),
                                             Const(0)])
    kn = gen("add", kn_n, I64, [Reg(kcur.name), Reg(gz.name)])
    tn = gen("and", tn_n, I1, [Reg(tcur.name), Reg(nc.name)])
    lb.instrs = lb.instrs[:-1] + [cn, eq, nc, nt, cor, ex, g0, g1, gz,
                                  kn, tn] + outs + [term]
    term.args = [Reg(ex.name)]

    nph = len(hb.phis())
    hb.instrs = hb.instrs[:nph] + [cidx, kcur, tcur] + flanks \
        + hb.instrs[nph:]

    # a run that needed more than k iterations grew the count; write it
    # back so the next run pads to the larger bound
    xb = fn.blocks[X]
    sidx = len(xb.phis())
    xb.instrs.insert(sidx, Instr(m.new_iid(), "store", ty=I64,
                                 args=[Reg(kn_n), Sym(cell)]))


# ---------------------------------------------------------------------------
# division sanitization

def _ensure_divmod(m: Module, bits: int, which: str) -> str:
    name = "cfl.%s.i%d" % (which, bits)
    if name in m.funcs:
        return name
    ty = {8: I8, 32: I32, 64: I64}[bits]
    sign = 1 << (bits - 1)
    f = Function(name, [Param("n", ty), Param("d", ty)], ty)

    def gen(op, nm, t, args, pred=None, incoming=None, labels=None):
        return Instr(m.new_iid(), op, name=nm, ty=t, pred=pred,
                     args=args or [], incoming=incoming or [],
                     labels=labels or [])

    ent = Block("entry")
    ent.instrs = [
        gen("icmp", "z", None, [Reg("d"), Const(0)], pred="eq"),
        gen("select", "ds", None, [Reg("z"), Const(1), Reg("d")]),
        gen("xor", "dx", ty, [Reg("ds"), Const(sign)]),
        gen("and", "one", ty, [Const(1), Const(1)]),
        gen("br", None, None, [], labels=["loop"]),
    ]
    lp = Block("loop")
    lp.instrs = [
        gen("phi", "i", ty, [], incoming=[("entry", Const(bits - 1)),
                                          ("loop", Reg("i1"))]),
        gen("phi", "q", ty, [], incoming=[("entry", Const(0)),
                                          ("loop", Reg("q1"))]),
        gen("phi", "r", ty, [], incoming=[("entry", Const(0)),
                                          ("loop", Reg("r1"))]),
        gen("lshr", "shn", ty, [Reg("n"), Reg("i")]),
        gen("and", "bit", ty, [Reg("shn"), Const(1)]),
        gen("shl", "r0", ty, [Reg("r"), Const(1)]),
        gen("or", "r2", ty, [Reg("r0"), Reg("bit")]),
        gen("xor", "rx", ty, [Reg("r2"), Const(sign)]),
        gen("icmp", "ge", None, [Reg("rx"), Reg("dx")], pred="ge"),
        gen("select", "sub", None, [Reg("ge"), Reg("ds"), Const(0)]),
        gen("sub", "r1", ty, [Reg("r2"), Reg("sub")]),
        gen("select", "qb", None, [Reg("ge"), Reg("one"), Const(0)]),
        gen("shl", "qs", ty, [Reg("qb"), Reg("i")]),
        gen("or", "q1", ty, [Reg("q"), Reg("qs")]),
        gen("sub", "i1", ty, [Reg("i"), Const(1)]),
        gen("icmp", "fin", None, [Reg("i1"), Const(0)], pred="lt"),
        gen("condbr", None, None, [Reg("fin")], labels=["done", "loop"]),
    ]
    done = Block("done")
    ret = Reg("q1") if which == "div" else Reg("r1")
    done.instrs = [gen("ret", None, None, [ret])]
    f.blocks = {"entry": ent, "loop": lp, "done": done}
    m.funcs[name] = f
    return name


def sanitize_div_rem(m: Module, ss) -> int:
    """Replace flagged div/rem with fixed-iteration restoring division.

    The routines run one iteration per operand bit whatever the values,
    give x/1 for a zero divisor instead of trapping, and keep unsigned
    semantics via a sign-flip before the signed compare.  Returns how
    many sites changed.
    """
    n = 0
    for iid in sorted(ss.divrem):
        hit = m.find_instr(iid)
        if hit is None:
            continue
        _, _, ins = hit
        if ins.op not in ("div", "rem"):
            continue
        callee = _ensure_divmod(m, ins.ty.bits, ins.op)
        ins.op = "call"
        ins.callee = callee
        ins.ty = None
        n += 1
    return n


# ---------------------------------------------------------------------------
# driver

def linearize(m: Module, ss, rt: RegionTree, scheme: int = 5,
              lam: int = 64) -> dict:
    """Linearize every sensitive region and thread the taken predicate.

    Returns per-function counts of linearized branches and loops.  Sets
    the module harden directive so later runs know scheme and lambda.
    """
    threaded = set(ss.functions)
    if threaded and "cfl.taken" not in m.globals:
        m.globals["cfl.taken"] = Global("cfl.taken", I1, b"\x01")
    stats = {}
    thr_done = set()

    for fn in list(m.funcs.values()):
        fnregs = {rid for rid in ss.regions if rid[0] == fn.name}
        fully = fn.name in threaded
        if not fnregs and not fully:
            continue
        tm = m.takenmap.setdefault(fn.name, {})
        ctx = {"tm": tm, "pending": [], "threaded": threaded,
               "thr_done": thr_done, "skip": set()}
        t0 = None
        if fully:
            t0 = Instr(m.new_iid(), "load", name="cfl.t0", ty=I1,
                       args=[Sym("cfl.taken")])
            fn.entry.instrs.insert(0, t0)
            ctx["skip"].add(t0.iid)
        root_tp = Reg(t0.name) if fully else Const(1)
        nb = nl = 0

        def visit(r):
            nonlocal nb, nl
            for c in r.children:
                visit(c)
            if r.rid not in fnregs:
                return
            if r.parent is not None and r.parent.kind != "linear" \
                    and r.parent.rid in fnregs:
                ph = "cfl.tp.%s.%s" % (r.kind[0], r.entry)
                tp = Reg(ph)
            else:
                ph = None
                tp = root_tp
            if r.kind == "branch":
                _merge_branch(m, fn, r, tp, ctx)
                nb += 1
            else:
                _merge_loop(m, fn, r, tp, ctx,
                            ss.bounds.get((fn.name, r.entry), 1))
                nl += 1
            # the merge just ran resolves inner placeholders; this
            # region's own goes on the list afterwards or the merge
            # would eat it before the phi that uses it exists
            if ph is not None:
                ctx["pending"].append((r.entry, ph))

        visit(rt.roots[fn.name])
        if ctx["pending"]:
            raise LinearizeError(
                "unplaced nested regions: %r" % ctx["pending"])
        if fully:
            for blk in fn.blocks.values():
                _guard_block(m, fn, blk, t0, ctx)
        stats[fn.name] = {"branches": nb, "loops": nl}

    # calls into taken-reading functions from untouched code run for
    # real; say so explicitly since the cell may hold a stale zero
    for fn in m.funcs.values():
        for blk in fn.blocks.values():
            out = []
            for ins in blk.instrs:
                if ins.op == "call" and ins.callee in threaded \
                        and ins.iid not in thr_done:
                    out.append(Instr(m.new_iid(), "store", ty=I1,
                                     args=[Const(1), Sym("cfl.taken")]))
                out.append(ins)
            blk.instrs = out

    m.harden = HardenInfo(scheme, lam)
    return stats

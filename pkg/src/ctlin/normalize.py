"""Module normalization: single exits, guarded indirect calls, region tree.

The linearization passes only consume structured control flow.  This
module brings a function into that shape and describes it as a tree of
single-entry single-exit regions:

  linear  the function root, entry block through unified exit
  branch  a condbr whose arms rejoin at the nearest common postdominator
  loop    a natural loop with one back edge whose latch is also the only
          exiting block (bottom-tested); the latch condbr is canonicalized
          to jump out on a true condition

Loops are given a dedicated preheader so the counter phis inserted later
have a unique non-latch predecessor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import cfg as cfglib
from .ir import I1, Block, Const, Instr, Module, Reg


class NormalizeError(Exception):
    pass


@dataclass
class Region:
    kind: str            # linear | branch | loop
    fn: str
    entry: str           # branch: condbr block; loop: header
    exit: str | None     # branch: join label; loop: exit target label
    blocks: set
    children: list = field(default_factory=list)
    parent: "Region | None" = None
    latch: str | None = None
    then_entry: str | None = None
    else_entry: str | None = None

    @property
    def rid(self):
        return (self.fn, self.kind, self.entry)

    def descendants(self):
        for c in self.children:
            yield c
            yield from c.descendants()


@dataclass
class RegionTree:
    roots: dict = field(default_factory=dict)   # fn -> linear root region
    by_id: dict = field(default_factory=dict)   # rid -> Region

    def loop_at(self, fn: str, header: str) -> Region | None:
        return self.by_id.get((fn, "loop", header))

    def branch_at(self, fn: str, entry: str) -> Region | None:
        return self.by_id.get((fn, "branch", entry))

    def loop_of_latch(self, fn: str, latch: str) -> Region | None:
        for r in self.by_id.values():
            if r.kind == "loop" and r.fn == fn and r.latch == latch:
                return r
        return None

    def innermost(self, fn: str, label: str) -> Region:
        best = self.roots[fn]
        for r in self.by_id.values():
            if r.fn == fn and r.kind != "linear" and label in r.blocks:
                if best.kind == "linear" or len(r.blocks) < len(best.blocks):
                    best = r
        return best


# ---------------------------------------------------------------------------
# exit unification

UNIFIED_EXIT = "exit.unified"


def unify_exits(m: Module) -> Module:
    """Give every function exactly one ret, merging values through a phi.

    Idempotent.  Blocks that cannot reach a ret (infinite loops without
    exits) are rejected since later passes need every path to terminate.
    """
    for fn in m.funcs.values():
        ret_blocks = [b for b in fn.blocks.values() if b.terminator.op == "ret"]
        if not ret_blocks:
            raise NormalizeError("@%s has no ret" % fn.name)
        if len(ret_blocks) > 1:
            exit_b = Block(UNIFIED_EXIT)
            incoming = []
            for b in sorted(ret_blocks, key=lambda b: b.label):
                r = b.instrs.pop()
                incoming.append((b.label, r.args[0]))
                b.instrs.append(Instr(m.new_iid(), "br", labels=[UNIFIED_EXIT]))
            phi = Instr(m.new_iid(), "phi", name="ret.val", ty=fn.ret_ty,
                        incoming=incoming)
            exit_b.instrs.append(phi)
            exit_b.instrs.append(Instr(m.new_iid(), "ret", args=[Reg("ret.val")]))
            fn.blocks[UNIFIED_EXIT] = exit_b

        g = cfglib.build_cfg(fn)
        exit_label = [b for b in fn.blocks.values()
                      if b.terminator.op == "ret"][0].label
        for label in g.rpo:
            # every reachable block must reach the exit
            seen = {label}
            work = [label]
            found = label == exit_label
            while work and not found:
                n = work.pop()
                for s in g.succs.get(n, []):
                    if s == exit_label:
                        found = True
                        break
                    if s not in seen:
                        seen.add(s)
                        work.append(s)
            if not found:
                raise NormalizeError(
                    "@%s: block '%s' cannot reach the exit" % (fn.name, label))
        unreachable = set(fn.blocks) - set(g.rpo)
        if unreachable:
            raise NormalizeError(
                "@%s: unreachable blocks %s" % (fn.name, sorted(unreachable)))
    return m


# ---------------------------------------------------------------------------
# indirect call promotion

def promote_indirect_calls(m: Module, targets) -> Module:
    """Rewrite each icall into a chain of guarded direct calls.

    `targets` maps icall instruction ids to candidate function names; the
    chain tests candidates in ascending name order and falls through to a
    trap failsafe.  An empty candidate list is a hard error: a reachable
    icall would have no semantics.
    """
    tmap = getattr(targets, "targets", targets)
    for fn in list(m.funcs.values()):
        while True:
            site = None
            for b in fn.blocks.values():
                for k, ins in enumerate(b.instrs):
                    if ins.op == "icall":
                        site = (b, k, ins)
                        break
                if site:
                    break
            if site is None:
                break
            b, k, ins = site
            cands = sorted(tmap.get(ins.iid, []))
            if not cands:
                raise NormalizeError(
                    "@%s: icall #%d has no resolvable targets" % (fn.name, ins.iid))
            _expand_icall(m, fn, b, k, ins, cands)
    return m


def _expand_icall(m: Module, fn, b: Block, k: int, ins: Instr, cands):
    fp = ins.args[0]
    call_args = ins.args[1:]
    base = "%s.ic%d" % (b.label, ins.iid)
    join_lbl = base + ".join"
    fail_lbl = base + ".fail"

    tail = b.instrs[k + 1:]
    b.instrs = b.instrs[:k]

    new_blocks = []
    chain_blocks = []
    for j, cand in enumerate(cands):
        test_into = b if j == 0 else chain_blocks[-1]
        call_lbl = "%s.c%d" % (base, j)
        next_lbl = "%s.t%d" % (base, j + 1) if j + 1 < len(cands) else fail_lbl
        cond = Instr(m.new_iid(), "icmp", name="%s.eq%d" % (base, j),
                     pred="eq", args=[fp, _sym(cand)])
        test_into.instrs.append(cond)
        test_into.instrs.append(Instr(m.new_iid(), "condbr",
                                      args=[Reg(cond.name)],
                                      labels=[call_lbl, next_lbl]))
        cb = Block(call_lbl)
        rname = "%s.r%d" % (base, j) if ins.name else None
        cb.instrs.append(Instr(m.new_iid(), "call", name=rname,
                               callee=cand, args=list(call_args)))
        cb.instrs.append(Instr(m.new_iid(), "br", labels=[join_lbl]))
        new_blocks.append(cb)
        if j + 1 < len(cands):
            chain_blocks.append(Block(next_lbl))
            new_blocks.append(chain_blocks[-1])

    fail = Block(fail_lbl)
    fail.instrs.append(Instr(m.new_iid(), "call", callee="trap", args=[]))
    fail.instrs.append(Instr(m.new_iid(), "br", labels=[join_lbl]))
    new_blocks.append(fail)

    join = Block(join_lbl)
    if ins.name:
        incoming = [("%s.c%d" % (base, j), Reg("%s.r%d" % (base, j)))
                    for j in range(len(cands))]
        incoming.append((fail_lbl, Const(0)))
        incoming.sort(key=lambda e: e[0])
        ret_ty = m.funcs[cands[0]].ret_ty
        join.instrs.append(Instr(m.new_iid(), "phi", name=ins.name,
                                 ty=ret_ty, incoming=incoming))
    join.instrs.extend(tail)
    new_blocks.append(join)

    # successors' phis now arrive from the join block
    for lbl in join.terminator.labels:
        for ph in fn.blocks[lbl].phis():
            ph.incoming = [(join_lbl if l == b.label else l, v)
                           for l, v in ph.incoming]

    rebuilt = {}
    for lbl, blk in fn.blocks.items():
        rebuilt[lbl] = blk
        if lbl == b.label:
            for nb in new_blocks:
                rebuilt[nb.label] = nb
    fn.blocks = rebuilt


def _sym(name):
    from .ir import Sym
    return Sym(name)


# ---------------------------------------------------------------------------
# region discovery

def normalize_regions(m: Module) -> RegionTree:
    """Canonicalize loops and build the region tree.  Idempotent.

    Errors on irreducible control flow, loops with several back edges,
    loops exiting anywhere but their latch, and arms that do not rejoin
    at the condbr's nearest common postdominator.
    """
    tree = RegionTree()
    for fn in m.funcs.values():
        g = cfglib.build_cfg(fn)
        if not g.reducible:
            raise NormalizeError("@%s: irreducible control flow" % fn.name)

        headers = {}
        for latch, header in cfglib.back_edges(fn, g):
            headers.setdefault(header, []).append(latch)
        loops = []
        for header, latches in sorted(headers.items()):
            if len(latches) > 1:
                raise NormalizeError(
                    "@%s: loop at '%s' has %d back edges"
                    % (fn.name, header, len(latches)))
            latch = latches[0]
            body = cfglib.natural_loop(g, latch, header)
            term = fn.blocks[latch].terminator
            if term.op != "condbr":
                raise NormalizeError(
                    "@%s: loop latch '%s' must end in condbr" % (fn.name, latch))
            for blk in body:
                if blk == latch:
                    continue
                for s in g.succs[blk]:
                    if s not in body:
                        raise NormalizeError(
                            "@%s: loop at '%s' exits from non-latch '%s'"
                            % (fn.name, header, blk))
            outside = [t for t in term.labels if t not in body]
            if len(outside) != 1 or header not in term.labels:
                raise NormalizeError(
                    "@%s: latch '%s' must branch between header and one exit"
                    % (fn.name, latch))
            _canonicalize_latch(m, fn, latch, header, outside[0])
            loops.append((header, latch, body, outside[0]))

        for header, latch, body, _ in loops:
            _ensure_preheader(m, fn, g, header, body)

        # recompute after edits
        g = cfglib.build_cfg(fn)
        regions = []
        latch_set = {latch for _, latch, _, _ in loops}
        for header, latch, _, exit_t in loops:
            body = cfglib.natural_loop(g, latch, header)
            regions.append(Region("loop", fn.name, header, exit_t, set(body),
                                  latch=latch))
        for b in fn.blocks.values():
            t = b.terminator
            if t.op != "condbr" or b.label in latch_set:
                continue
            join = g.ipdom.get(b.label)
            if join is None:
                raise NormalizeError(
                    "@%s: condbr in '%s' has no join point" % (fn.name, b.label))
            span = _branch_span(fn, g, b.label, join)
            r = Region("branch", fn.name, b.label, join, span,
                       then_entry=t.labels[0], else_entry=t.labels[1])
            regions.append(r)

        root = Region("linear", fn.name, fn.entry.label, None, set(fn.blocks))
        _nest(regions, root)
        tree.roots[fn.name] = root
        for r in regions:
            tree.by_id[r.rid] = r
    return tree


def _canonicalize_latch(m: Module, fn, latch: str, header: str, exit_t: str):
    """Latch condbr exits on true: condbr %c, <exit>, <header>."""
    b = fn.blocks[latch]
    term = b.terminator
    if term.labels == [exit_t, header]:
        return
    neg = Instr(m.new_iid(), "xor", name="%s.exitc" % latch, ty=I1,
                args=[term.args[0], Const(1)])
    b.instrs.insert(len(b.instrs) - 1, neg)
    term.args = [Reg(neg.name)]
    term.labels = [exit_t, header]


def _ensure_preheader(m: Module, fn, g, header: str, body: set):
    outer_preds = [p for p in g.preds[header] if p not in body]
    hdr = fn.blocks[header]
    if len(outer_preds) == 1:
        p = fn.blocks[outer_preds[0]]
        if p.terminator.op == "br" and p.label not in body:
            return
    pre_lbl = header + ".pre"
    pre = Block(pre_lbl)
    for ph in hdr.phis():
        outer = [(l, v) for l, v in ph.incoming if l not in body]
        inner = [(l, v) for l, v in ph.incoming if l in body]
        if len(outer) > 1:
            np = Instr(m.new_iid(), "phi", name=ph.name + ".pre", ty=ph.ty,
                       incoming=sorted(outer, key=lambda e: e[0]))
            pre.instrs.append(np)
            ph.incoming = sorted(inner + [(pre_lbl, Reg(np.name))],
                                 key=lambda e: e[0])
        else:
            ph.incoming = sorted(inner + [(pre_lbl, outer[0][1])],
                                 key=lambda e: e[0]) if outer else ph.incoming
    pre.instrs.append(Instr(m.new_iid(), "br", labels=[header]))
    for p in outer_preds:
        t = fn.blocks[p].terminator
        t.labels = [pre_lbl if l == header else l for l in t.labels]

    rebuilt = {}
    if not outer_preds:  # header was the function entry
        rebuilt[pre_lbl] = pre
    for lbl, blk in fn.blocks.items():
        if lbl == header and outer_preds:
            rebuilt[pre_lbl] = pre
        rebuilt[lbl] = blk
    fn.blocks = rebuilt


def _branch_span(fn, g, entry: str, join: str) -> set:
    span = {entry}
    work = [t for t in fn.blocks[entry].terminator.labels if t != join]
    while work:
        n = work.pop()
        if n in span or n == join:
            continue
        if not g.dominates(entry, n):
            raise NormalizeError(
                "@%s: block '%s' enters branch at '%s' sideways"
                % (fn.name, n, entry))
        span.add(n)
        for s in g.succs[n]:
            work.append(s)
    for n in span - {entry}:
        for p in g.preds[n]:
            if p not in span:
                raise NormalizeError(
                    "@%s: branch at '%s' is entered at '%s' from outside"
                    % (fn.name, entry, n))
    return span


def _nest(regions, root):
    """Attach regions by span containment; reject partial overlaps."""
    for r in regions:
        r.children = []
        r.parent = None
    ordered = sorted(regions, key=lambda r: len(r.blocks))
    for i, r in enumerate(ordered):
        parent = None
        for q in ordered[i + 1:]:
            if r is q:
                continue
            inter = r.blocks & q.blocks
            if not inter:
                continue
            if not r.blocks <= q.blocks:
                raise NormalizeError(
                    "regions at '%s' and '%s' overlap without nesting"
                    % (r.entry, q.entry))
            if parent is None:
                parent = q
        target = parent or root
        r.parent = target
        target.children.append(r)
    for r in regions + [root]:
        r.children.sort(key=lambda c: (c.entry, c.kind))

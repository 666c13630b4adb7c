"""Deterministic interpreter with instruction and memory event traces.

Values are fixed-width two's complement integers stored unsigned.
Comparisons are signed; div/rem are unsigned.  Shift amounts wrap at
the operand width.  Addresses are 64-bit; address 0 is never mapped, so
the linearization passes can use it as the decoy pointer.

Memory events are quantized: every access contributes (kind, addr//lam)
tuples, where lam is the observation granularity.  Events come from
plain load/store, the ct_* data-flow wrappers (one event per touched
lambda-window, recorded at the window origin), and allocation
bookkeeping (in-band headers and site list updates, which live in
simulated memory themselves).

Simulated allocations are placed so payloads start 64-byte aligned,
with guard gaps in between so small overflows fault instead of landing
in a neighbouring object.  Plain heap chunks carry an 8-byte size field
at payload-8; wrapped objects carry the 32-byte in-band header, so
reading payload-8 is always legal and the magic value tells the two
apart when freeing.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

from .ir import (BUILTIN_FUNCS, Const, Instr, Module, Reg, Sym,
                 is_reserved_name, size_of)

MAGIC = 0xD1F1D1F1C0C0C0C0

FUNC_BASE = 0x1000
CELL_BASE = 0x8000
GLOBAL_BASE = 0x10000
STACK_BASE = 0x200000
HEAP_BASE = 0x4000000
GUARD = 64

DEFAULT_BUDGET = 10_000_000

M64 = (1 << 64) - 1


class AbortError(Exception):
    """Raised by the machine; code lands in Trace.abort."""

    def __init__(self, code, detail=""):
        super().__init__("%s%s" % (code, (": " + detail) if detail else ""))
        self.code = code


@dataclass
class ExecInput:
    public: list
    secrets: list

    def __str__(self):
        return "pub: %s ; sec: %s" % (
            ",".join(str(v) for v in self.public),
            ",".join(str(v) for v in self.secrets))


def parse_suite(text: str) -> list:
    """One input per line: `pub: v,v ; sec: s,s` with decimal or hex."""
    out = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        pub_part, _, sec_part = line.partition(";")
        def vals(part, tag):
            part = part.strip()
            if not part:
                return []
            if not part.startswith(tag + ":"):
                raise ValueError("suite line missing '%s:': %r" % (tag, raw))
            body = part[len(tag) + 1:].strip()
            return [int(v, 0) for v in body.split(",")] if body else []
        out.append(ExecInput(vals(pub_part, "pub"), vals(sec_part, "sec")))
    return out


def format_suite(inputs) -> str:
    return "\n".join(str(i) for i in inputs) + "\n"


@dataclass
class Trace:
    instrs: list = field(default_factory=list)
    events: list = field(default_factory=list)  # (kind, block-id)
    lam: int = 64
    output: int | None = None
    abort: str | None = None
    touches: dict = field(default_factory=dict)       # mid -> window touches
    access_log: dict = field(default_factory=dict)    # access iid -> {(site, off)}
    violations: list = field(default_factory=list)    # dfl soundness misses
    decoy_violations: list = field(default_factory=list)

    def requantize(self, lam2: int) -> list:
        """Events under a coarser granularity that is a multiple of lam."""
        if lam2 % self.lam:
            raise ValueError("lam2 must be a multiple of lam")
        f = lam2 // self.lam
        return [(k, b // f) for k, b in self.events]


@dataclass
class _Alloc:
    base: int
    size: int
    seg: str          # g | s | h | cell
    site: str | None
    payload: int = 0  # base + skew; program-visible start
    live: bool = True
    data: bytearray = None  # type: ignore

    def __post_init__(self):
        if self.data is None:
            self.data = bytearray(self.size)


class Memory:
    def __init__(self):
        self.allocs: dict[int, _Alloc] = {}
        self.bases: list[int] = []
        self.cursor = {"g": GLOBAL_BASE, "s": STACK_BASE,
                       "h": HEAP_BASE, "cell": CELL_BASE}

    def alloc(self, seg: str, size: int, skew: int = 0,
              site: str | None = None) -> _Alloc:
        cur = self.cursor[seg]
        base = cur + ((64 - ((cur + skew) % 64)) % 64)
        self.cursor[seg] = base + size + GUARD
        a = _Alloc(base, size, seg, site, payload=base + skew)
        self.allocs[base] = a
        bisect.insort(self.bases, base)
        return a

    def release(self, a: _Alloc):
        a.live = False

    def find(self, addr: int) -> _Alloc | None:
        i = bisect.bisect_right(self.bases, addr) - 1
        if i < 0:
            return None
        a = self.allocs[self.bases[i]]
        if a.base <= addr < a.base + a.size:
            return a
        return None

    def _locate(self, addr: int, size: int) -> _Alloc:
        a = self.find(addr)
        if a is None:
            raise AbortError("oob", "addr 0x%x" % addr)
        if not a.live:
            raise AbortError("use_after_free", "addr 0x%x" % addr)
        if addr + size > a.base + a.size:
            raise AbortError("oob", "addr 0x%x size %d" % (addr, size))
        return a

    def read(self, addr: int, size: int) -> int:
        a = self._locate(addr, size)
        off = addr - a.base
        return int.from_bytes(a.data[off:off + size], "little")

    def write(self, addr: int, size: int, value: int):
        a = self._locate(addr, size)
        off = addr - a.base
        a.data[off:off + size] = (value & ((1 << (8 * size)) - 1)
                                  ).to_bytes(size, "little")


def _to_signed(v: int, bits: int) -> int:
    v &= (1 << bits) - 1
    return v - (1 << bits) if v >= (1 << (bits - 1)) else v


@dataclass
class _Frame:
    fn: object
    regs: dict
    dfl_stack: list = field(default_factory=list)  # wrapped allocs, alloc order
    plain_stack: list = field(default_factory=list)
    shadow: dict = field(default_factory=dict)     # reg -> decoy flag


class Machine:
    """One run of a module.  Create fresh per interpretation."""

    def __init__(self, m: Module, lam: int = 64, budget: int = DEFAULT_BUDGET,
                 decoy_checks: bool = False):
        self.m = m
        self.lam = lam
        self.budget = budget
        self.decoy_checks = decoy_checks
        self.mem = Memory()
        self.trace = Trace(lam=lam)
        self.steps = 0
        self.scheme = m.harden.scheme if m.harden else 5

        self.func_addr = {}
        self.addr_func = {}
        for i, name in enumerate(m.funcs):
            a = FUNC_BASE + 16 * i
            self.func_addr[name] = a
            self.addr_func[a] = name

        self.site_cells = {}
        for key in self._list_sites():
            a = self.mem.alloc("cell", 16, site=key)
            self.site_cells[key] = a.base

        self.global_addr = {}
        for g in m.globals.values():
            a = self.mem.alloc("g", size_of(g.ty), site="g:@" + g.name)
            if g.init:
                a.data[:len(g.init)] = g.init
            self.global_addr[g.name] = a.base

        self._types = {}      # fn name -> reg -> Type (for icmp widths)
        self._taken_regs = {}  # fn name -> iid -> taken reg name
        self._ret_shadow = False
        if decoy_checks:
            self._prepare_takenmap()

    # -- setup helpers ----------------------------------------------------

    def _list_sites(self):
        keys = set()
        for ins in self.m.instructions():
            if ins.op == "call" and ins.callee in ("dfl_alloc_stack",
                                                   "dfl_alloc_heap"):
                k = "s" if ins.callee == "dfl_alloc_stack" else "h"
                keys.add("%s:%d" % (k, ins.args[0].value))
        for rec in self.m.dflmeta.values():
            for e in rec.entries:
                if e.site_kind() in ("s", "h"):
                    keys.add(e.site)
        return sorted(keys)

    def _prepare_takenmap(self):
        names = {}
        for fname, tm in self.m.takenmap.items():
            fn = self.m.funcs.get(fname)
            if fn is None:
                continue
            by_iid = {}
            for ins in fn.instructions():
                by_iid[ins.iid] = ins
            names[fname] = {
                iid: by_iid[tid].name
                for iid, tid in tm.items()
                if tid in by_iid and by_iid[tid].name
            }
        self._taken_regs = names

    def _reg_types(self, fn):
        if fn.name not in self._types:
            from .ir import _result_type
            env = {p.name: p.ty for p in fn.params}
            for ins in fn.instructions():
                if ins.name is not None:
                    env[ins.name] = _result_type(self.m, ins, env)
            self._types[fn.name] = env
        return self._types[fn.name]

    # -- events -----------------------------------------------------------

    def _ev(self, kind: str, addr: int):
        self.trace.events.append((kind, addr // self.lam))

    def _read(self, addr: int, size: int, ev=True) -> int:
        v = self.mem.read(addr, size)
        if ev:
            self._ev("r", addr)
        return v

    def _write(self, addr: int, size: int, value: int, ev=True):
        self.mem.write(addr, size, value)
        if ev:
            self._ev("w", addr)

    # -- running ----------------------------------------------------------

    def run(self, inp: ExecInput, entry: str = "main") -> Trace:
        if entry not in self.m.funcs:
            raise ValueError("no entry function @%s" % entry)
        self.secrets = list(inp.secrets)
        fn = self.m.funcs[entry]
        args = []
        pi = si = 0
        for p in fn.params:
            if p.secret:
                if si >= len(self.secrets):
                    raise ValueError("secret vector too short for @%s" % entry)
                args.append(self.secrets[si] & _mask(p.ty))
                si += 1
            else:
                if pi >= len(inp.public):
                    raise ValueError("public args too short for @%s" % entry)
                args.append(inp.public[pi] & _mask(p.ty))
                pi += 1
        try:
            self.trace.output = self._call(fn, args)
            if self.decoy_checks and self._ret_shadow:
                self.trace.decoy_violations.append(("ret", entry, None))
        except AbortError as e:
            self.trace.abort = e.code
        return self.trace

    def _call(self, fn, args):
        self._enter_hook(fn)
        frame = _Frame(fn, {p.name: a for p, a in zip(fn.params, args)})
        if self.decoy_checks:
            for p in fn.params:
                frame.shadow[p.name] = False
        block = fn.entry
        prev_label = None

        while True:
            # phi parallel copy
            phis = block.phis()
            if phis:
                olds = dict(frame.regs)
                oldsh = dict(frame.shadow)
                for ph in phis:
                    self._step(ph)
                    val = None
                    src = None
                    for lbl, v in ph.incoming:
                        if lbl == prev_label:
                            src = v
                            val = self._eval_in(v, olds)
                            break
                    if src is None:
                        raise AbortError("trap", "phi without incoming edge")
                    frame.regs[ph.name] = val & _mask(ph.ty)
                    if self.decoy_checks:
                        frame.shadow[ph.name] = self._shadow_of(
                            src, oldsh, ph.iid, fn, frame)
                    self._phi_hook(ph, prev_label, src, block.label,
                                   ph is phis[0], frame, fn)

            for ins in block.body():
                self._step(ins)
                if ins.op == "br":
                    prev_label = block.label
                    block = fn.blocks[ins.labels[0]]
                    break
                if ins.op == "condbr":
                    c = self._eval(ins.args[0], frame)
                    prev_label = block.label
                    nxt = ins.labels[0] if c & 1 else ins.labels[1]
                    self._branch_hook(ins, block.label, nxt, frame, fn)
                    block = fn.blocks[nxt]
                    break
                if ins.op == "ret":
                    ret = self._eval(ins.args[0], frame)
                    if self.decoy_checks:
                        self._ret_shadow = self._shadow_operand(
                            ins.args[0], frame)
                    self._ret_hook(ins, frame, fn)
                    self._pop_frame(frame)
                    return ret
                self._exec(ins, frame, fn)
            else:
                raise AbortError("trap", "block fell through")

    # subclass hooks; the base machine observes nothing extra
    def _enter_hook(self, fn):
        pass

    def _phi_hook(self, ph, src_label, src_operand, block_label, first,
                  frame, fn):
        pass

    def _branch_hook(self, ins, from_label, to_label, frame, fn):
        pass

    def _ret_hook(self, ins, frame, fn):
        pass

    def _post_exec_hook(self, ins, frame, fn):
        pass

    def _pop_frame(self, frame: _Frame):
        for a in reversed(frame.dfl_stack):
            self._unlink(a)
            self.mem.release(a)
        for a in frame.plain_stack:
            self.mem.release(a)

    def _step(self, ins: Instr):
        self.steps += 1
        if self.steps > self.budget:
            raise AbortError("budget")
        self.trace.instrs.append(ins.iid)

    def _eval(self, o, frame):
        return self._eval_in(o, frame.regs)

    def _eval_in(self, o, regs):
        if isinstance(o, Reg):
            try:
                return regs[o.name]
            except KeyError:
                raise AbortError("trap", "read of unset %%%s" % o.name)
        if isinstance(o, Const):
            return o.value & M64
        if isinstance(o, Sym):
            if o.name in self.global_addr:
                return self.global_addr[o.name]
            if o.name in self.func_addr:
                return self.func_addr[o.name]
            raise AbortError("trap", "unknown symbol @" + o.name)
        raise TypeError(o)

    # -- decoy shadow tracking -------------------------------------------

    def _shadow_operand(self, o, frame) -> bool:
        return isinstance(o, Reg) and frame.shadow.get(o.name, False)

    def _shadow_of(self, src, shadows, iid, fn, frame) -> bool:
        base = isinstance(src, Reg) and shadows.get(src.name, False)
        return base or self._under_decoy(fn, iid, frame)

    def _under_decoy(self, fn, iid, frame) -> bool:
        tm = self._taken_regs.get(fn.name)
        if not tm or iid not in tm:
            return False
        return (frame.regs.get(tm[iid], 1) & 1) == 0

    # -- instruction execution -------------------------------------------

    def _exec(self, ins: Instr, frame: _Frame, fn):
        op = ins.op
        shadow = False
        if self.decoy_checks:
            shadow = any(self._shadow_operand(a, frame) for a in ins.args) \
                or self._under_decoy(fn, ins.iid, frame)

        if op in ("add", "sub", "mul", "and", "or", "xor", "shl", "lshr",
                  "div", "rem"):
            w = ins.ty.bits
            mask = (1 << w) - 1
            a = self._eval(ins.args[0], frame) & mask
            b = self._eval(ins.args[1], frame) & mask
            if op == "add":
                r = a + b
            elif op == "sub":
                r = a - b
            elif op == "mul":
                r = a * b
            elif op == "and":
                r = a & b
            elif op == "or":
                r = a | b
            elif op == "xor":
                r = a ^ b
            elif op == "shl":
                r = a << (b % w)
            elif op == "lshr":
                r = a >> (b % w)
            else:
                if b == 0:
                    raise AbortError("div_zero")
                r = a // b if op == "div" else a % b
            frame.regs[ins.name] = r & mask

        elif op == "icmp":
            w = self._icmp_bits(ins, fn)
            a = _to_signed(self._eval(ins.args[0], frame), w)
            b = _to_signed(self._eval(ins.args[1], frame), w)
            r = {"lt": a < b, "le": a <= b, "eq": a == b,
                 "ne": a != b, "gt": a > b, "ge": a >= b}[ins.pred]
            frame.regs[ins.name] = int(r)

        elif op == "select":
            c = self._eval(ins.args[0], frame) & 1
            v = self._eval(ins.args[1 if c else 2], frame)
            frame.regs[ins.name] = v
            if self.decoy_checks:
                shadow = self._shadow_operand(ins.args[1 if c else 2], frame) \
                    or self._shadow_operand(ins.args[0], frame) \
                    or self._under_decoy(fn, ins.iid, frame)

        elif op == "load":
            p = self._eval(ins.args[0], frame)
            size = size_of(ins.ty)
            v = self._read(p, size)
            frame.regs[ins.name] = v
            self._log_access(ins.iid, p, size)

        elif op == "store":
            v = self._eval(ins.args[0], frame)
            p = self._eval(ins.args[1], frame)
            size = size_of(ins.ty)
            # bookkeeping stores to cfl.*/dfl.* cells are decoy-neutral by
            # construction; flagging them would drown real findings
            internal = isinstance(ins.args[1], Sym) \
                and is_reserved_name(ins.args[1].name)
            if self.decoy_checks and shadow and not internal:
                self.trace.decoy_violations.append(("store", fn.name, ins.iid))
            self._write(p, size, v)
            self._log_access(ins.iid, p, size)

        elif op == "gep":
            base = self._eval(ins.args[0], frame)
            off = 0
            idxs = ins.args[1:]
            if idxs:
                off += _to_signed(self._eval(idxs[0], frame), 64) \
                    * size_of(ins.ty)
            cur = ins.ty
            for idx in idxs[1:]:
                if cur.kind == "array":
                    off += _to_signed(self._eval(idx, frame), 64) \
                        * size_of(cur.elem)
                    cur = cur.elem
                elif cur.kind == "agg":
                    from .ir import field_offset
                    k = idx.value
                    off += field_offset(cur, k)
                    cur = cur.fields[k][1]
                else:
                    raise AbortError("trap", "gep into scalar")
            frame.regs[ins.name] = (base + off) & M64

        elif op == "alloca":
            a = self.mem.alloc("s", size_of(ins.ty), site="s:%d" % ins.iid)
            frame.plain_stack.append(a)
            frame.regs[ins.name] = a.base

        elif op == "heapalloc":
            size = size_of(ins.ty)
            a = self.mem.alloc("h", size + 8, skew=8, site="h:%d" % ins.iid)
            self._write(a.base, 8, size)          # size field
            frame.regs[ins.name] = a.base + 8

        elif op == "heapfree":
            p = self._eval(ins.args[0], frame)
            if p == 0:
                return
            a = self.mem.find(p - 8)
            if a is None or a.seg != "h" or p != a.base + 8:
                raise AbortError("bad_free", "0x%x" % p)
            if not a.live:
                raise AbortError("double_free", "0x%x" % p)
            self.mem.release(a)

        elif op == "call":
            self._do_call(ins, frame, fn, shadow)

        elif op == "icall":
            fp = self._eval(ins.args[0], frame)
            name = self.addr_func.get(fp)
            if name is None:
                raise AbortError("bad_icall", "0x%x" % fp)
            callee = self.m.funcs[name]
            args = [self._eval(a, frame) for a in ins.args[1:]]
            if len(args) != len(callee.params):
                raise AbortError("bad_icall", "arity")
            r = self._call(callee, [v & _mask(p.ty) for v, p in
                                    zip(args, callee.params)])
            if ins.name:
                frame.regs[ins.name] = r

        elif op == "secret":
            k = ins.args[0].value
            if k >= len(self.secrets):
                raise ValueError("secret index %d out of range" % k)
            frame.regs[ins.name] = self.secrets[k] & _mask(ins.ty)
            shadow = False

        else:
            raise AbortError("trap", "cannot execute op " + op)

        if self.decoy_checks and ins.name is not None \
                and op not in ("call", "icall"):
            frame.shadow[ins.name] = shadow
        self._post_exec_hook(ins, frame, fn)

    def _icmp_bits(self, ins, fn) -> int:
        env = self._reg_types(fn)
        for a in ins.args:
            if isinstance(a, Reg):
                t = env.get(a.name)
                if t is not None and t.kind == "int":
                    return t.bits
                if t is not None and t.kind == "addr":
                    return 64
            if isinstance(a, Sym):
                return 64
        return 64

    def _log_access(self, iid, addr, size):
        a = self.mem.find(addr)
        if a is not None and a.site and addr >= a.payload:
            off = addr - a.payload
            self.trace.access_log.setdefault(iid, set()).add((a.site, off))

    # -- calls and builtins ----------------------------------------------

    def _do_call(self, ins, frame, fn, shadow):
        name = ins.callee
        if name in self.m.funcs:
            callee = self.m.funcs[name]
            if len(ins.args) != len(callee.params):
                raise AbortError("trap", "arity mismatch calling @" + name)
            args = [self._eval(a, frame) & _mask(p.ty)
                    for a, p in zip(ins.args, callee.params)]
            r = self._call(callee, args)
            if ins.name:
                frame.regs[ins.name] = r if r is not None else 0
                if self.decoy_checks:
                    frame.shadow[ins.name] = self._ret_shadow
            return
        if name not in BUILTIN_FUNCS:
            raise AbortError("trap", "call to undefined @" + name)
        getattr(self, "_bi_" + name)(ins, frame, shadow)

    def _bi_trap(self, ins, frame, shadow):
        # a guarded failsafe passes its taken predicate; decoys sail past
        if ins.args and not (self._eval(ins.args[0], frame) & 1):
            return
        raise AbortError("trap", "failsafe")

    def _bi_ct_select(self, ins, frame, shadow):
        from .cfl import ct_select, encode_taken
        t = self._eval(ins.args[0], frame) & 1
        a = self._eval(ins.args[1], frame)
        b = self._eval(ins.args[2], frame)
        frame.regs[ins.name] = ct_select(self.scheme,
                                         encode_taken(self.scheme, t), a, b)
        if self.decoy_checks:
            picked = ins.args[1] if t else ins.args[2]
            frame.shadow[ins.name] = self._shadow_operand(picked, frame)

    # ---- dfl allocation -------------------------------------------------

    def _bi_dfl_alloc_stack(self, ins, frame, shadow):
        self._dfl_alloc(ins, frame, "s")

    def _bi_dfl_alloc_heap(self, ins, frame, shadow):
        self._dfl_alloc(ins, frame, "h")

    def _dfl_alloc(self, ins, frame, seg):
        site_tok = ins.args[0].value
        size = ins.args[1].value
        key = "%s:%d" % (seg, site_tok)
        cell = self.site_cells.get(key)
        if cell is None:
            raise AbortError("trap", "allocation site %s has no list" % key)
        a = self.mem.alloc(seg, size + 32, skew=32, site=key)
        base = a.base
        tail = self._read(cell + 8, 8)
        self._write(base + 0, 8, 0)          # next
        self._write(base + 8, 8, tail)       # prev
        self._write(base + 16, 8, cell)      # head_ptr
        self._write(base + 24, 8, MAGIC)
        if tail:
            self._write(tail + 0, 8, base)
        else:
            self._write(cell + 0, 8, base)
        self._write(cell + 8, 8, base)
        if seg == "s":
            frame.dfl_stack.append(a)
        frame.regs[ins.name] = base + 32

    def _unlink(self, a: _Alloc):
        base = a.base
        nxt = self._read(base + 0, 8)
        prv = self._read(base + 8, 8)
        cell = self._read(base + 16, 8)
        if prv:
            self._write(prv + 0, 8, nxt)
        else:
            self._write(cell + 0, 8, nxt)
        if nxt:
            self._write(nxt + 8, 8, prv)
        else:
            self._write(cell + 8, 8, prv)

    def _bi_dfl_free(self, ins, frame, shadow):
        p = self._eval(ins.args[0], frame)
        if p == 0:
            return
        a = self.mem.find(p - 8)
        if a is not None and not a.live:
            raise AbortError("double_free", "0x%x" % p)
        magic = self._read(p - 8, 8)
        if magic == MAGIC:
            a = self.mem.find(p - 32)
            if a is None or a.base != p - 32:
                raise AbortError("bad_free", "0x%x" % p)
            self._unlink(a)
            self.mem.release(a)
        else:
            a = self.mem.find(p - 8)
            if a is None or a.base != p - 8 or a.seg != "h":
                raise AbortError("bad_free", "0x%x" % p)
            self.mem.release(a)

    # ---- dfl access wrappers -------------------------------------------

    def _meta(self, ins):
        mid = ins.args[-1].value
        rec = self.m.dflmeta.get(mid)
        if rec is None:
            raise AbortError("trap", "unknown dfl metadata %d" % mid)
        return mid, rec

    def _instances(self, entry):
        """Yield payload base of each live instance, emitting walk events."""
        kind, ref = entry.site_ref()
        if kind == "g":
            base = self.global_addr.get(ref)
            if base is None:
                raise AbortError("trap", "metadata names unknown global @" + ref)
            yield base
            return
        cell = self.site_cells[entry.site]
        cur = self._read(cell + 0, 8)
        while cur:
            yield cur + 32
            cur = self._read(cur + 0, 8)

    def _bi_ct_load(self, ins, frame, shadow):
        mid, rec = self._meta(ins)
        p = self._eval(ins.args[0], frame)
        lam, size = rec.lam, rec.size
        result = 0
        matches = 0
        for entry in rec.entries:
            for payload in self._instances(entry):
                start = payload + entry.off
                end = start + entry.length
                nwin = -(-entry.length // lam)
                q = (p - start) % lam if p else 0
                self.trace.touches[mid] = self.trace.touches.get(mid, 0) + nwin
                for j in range(nwin):
                    s = start + j * lam
                    self._ev("r", s)
                    cur = s + q
                    if cur == p and p != 0 and p + size <= end:
                        result = self.mem.read(p, size)
                        matches += 1
                        self._log_access(rec.access, p, size)
        if matches > 1:
            raise AbortError("dfl_overlap", "p matched %d times" % matches)
        if p != 0 and matches == 0:
            self.trace.violations.append(("miss", mid, p))
        frame.regs[ins.name] = result
        if self.decoy_checks:
            frame.shadow[ins.name] = False

    def _bi_ct_store(self, ins, frame, shadow):
        mid, rec = self._meta(ins)
        p = self._eval(ins.args[0], frame)
        v = self._eval(ins.args[1], frame)
        lam, size = rec.lam, rec.size
        matches = 0
        for entry in rec.entries:
            for payload in self._instances(entry):
                start = payload + entry.off
                end = start + entry.length
                nwin = -(-entry.length // lam)
                q = (p - start) % lam if p else 0
                self.trace.touches[mid] = self.trace.touches.get(mid, 0) + nwin
                for j in range(nwin):
                    s = start + j * lam
                    self._ev("r", s)
                    cur = s + q
                    if cur == p and p != 0 and p + size <= end:
                        if self.decoy_checks and self._shadow_operand(
                                ins.args[1], frame):
                            self.trace.decoy_violations.append(
                                ("ct_store", mid, ins.iid))
                        self.mem.write(p, size, v)
                        matches += 1
                        self._log_access(rec.access, p, size)
                    self._ev("w", s)
        if matches > 1:
            raise AbortError("dfl_overlap", "p matched %d times" % matches)
        if p != 0 and matches == 0:
            self.trace.violations.append(("miss", mid, p))

    def _nat_window(self, rec, p_raw, p_sel):
        """Window of the raw pointer; out-of-range raw clamps to start.

        A decoy execution (p_sel == 0) may carry any raw pointer, so the
        clamp is silent there.  A live access with a raw pointer outside
        the portion, or disagreeing with the selected one, is a striding
        plan bug and gets a violation record.
        """
        entry = rec.entries[0]
        kind, ref = entry.site_ref()
        if kind != "g":
            raise AbortError("trap", "natural stride entry must be global")
        payload = self.global_addr[ref]
        start = payload + entry.off
        end = start + entry.length
        if not (start <= p_raw < end):
            if p_sel:
                self.trace.violations.append(("nat_range", rec.mid, p_raw))
            p_raw = start
        elif p_sel and p_sel != p_raw:
            self.trace.violations.append(("miss", rec.mid, p_sel))
        j = (p_raw - start) // rec.lam
        return start + j * rec.lam, end

    def _bi_ct_load_nat(self, ins, frame, shadow):
        mid, rec = self._meta(ins)
        p_sel = self._eval(ins.args[0], frame)
        p_raw = self._eval(ins.args[1], frame)
        s, end = self._nat_window(rec, p_raw, p_sel)
        self.trace.touches[mid] = self.trace.touches.get(mid, 0) + 1
        self._ev("r", s)
        v = 0
        if p_sel == p_raw and p_sel != 0 and p_raw + rec.size <= end:
            v = self.mem.read(p_raw, rec.size)
            self._log_access(rec.access, p_raw, rec.size)
        frame.regs[ins.name] = v
        if self.decoy_checks:
            frame.shadow[ins.name] = False

    def _bi_ct_store_nat(self, ins, frame, shadow):
        mid, rec = self._meta(ins)
        p_sel = self._eval(ins.args[0], frame)
        p_raw = self._eval(ins.args[1], frame)
        v = self._eval(ins.args[2], frame)
        s, end = self._nat_window(rec, p_raw, p_sel)
        self.trace.touches[mid] = self.trace.touches.get(mid, 0) + 1
        self._ev("r", s)
        if p_sel == p_raw and p_sel != 0 and p_raw + rec.size <= end:
            if self.decoy_checks and self._shadow_operand(ins.args[2], frame):
                self.trace.decoy_violations.append(("ct_store", mid, ins.iid))
            self.mem.write(p_raw, rec.size, v)
            self._log_access(rec.access, p_raw, rec.size)
        self._ev("w", s)


def _mask(ty) -> int:
    if ty.kind == "addr":
        return M64
    return (1 << ty.bits) - 1


def interpret(m: Module, inp: ExecInput, lam: int = 64,
              budget: int = DEFAULT_BUDGET, entry: str = "main",
              decoy_checks: bool = False) -> Trace:
    """Run the module once; aborts land in Trace.abort, never raise."""
    mach = Machine(m, lam=lam, budget=budget, decoy_checks=decoy_checks)
    return mach.run(inp, entry=entry)


def final_state(m: Module, inp: ExecInput, entry: str = "main",
                budget: int = DEFAULT_BUDGET):
    """(trace, global payload bytes, live heap payloads in alloc order).

    Reserved bookkeeping globals (cfl.*/dfl.*) are excluded; wrapped heap
    objects are reported without their in-band headers so original and
    hardened modules are comparable.
    """
    mach = Machine(m, lam=64, budget=budget)
    trace = mach.run(inp, entry=entry)
    gbytes = {}
    for name in m.globals:
        if is_reserved_name(name):
            continue
        base = mach.global_addr[name]
        a = mach.mem.find(base)
        gbytes[name] = bytes(a.data)
    heaps = []
    for base in mach.mem.bases:
        a = mach.mem.allocs[base]
        if a.seg == "h" and a.live:
            heaps.append(bytes(a.data[a.payload - a.base:]))
    return trace, gbytes, heaps

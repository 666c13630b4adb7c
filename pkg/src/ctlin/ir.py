"""Typed SSA intermediate representation: data model, parser, printer, validator.

The textual form is line oriented.  A module is a sequence of global
declarations, function definitions, and (for hardened modules) directive
lines that carry the hardening parameters and the per-access metadata
table, so that a hardened module round-trips through a file without any
side channel of information.

Instruction ids are assigned module-wide in lexical order at parse time.
Transforms that insert instructions draw fresh ids from the module
counter; `Module.renumber` restores lexical numbering before emission so
that parse(print(m)) reproduces the same ids.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

# ---------------------------------------------------------------------------
# types

INT_BITS = {"i1": 1, "i8": 8, "i32": 32, "i64": 64}


@dataclass(frozen=True)
class Type:
    kind: str  # int | addr | array | agg
    bits: int = 0
    elem: "Type | None" = None
    count: int = 0
    fields: tuple = ()  # tuple[(name, Type), ...]

    def __str__(self):
        if self.kind == "int":
            return "i%d" % self.bits
        if self.kind == "addr":
            return "addr"
        if self.kind == "array":
            return "[%d x %s]" % (self.count, self.elem)
        return "{%s}" % ", ".join("%s: %s" % (n, t) for n, t in self.fields)


I1 = Type("int", 1)
I8 = Type("int", 8)
I32 = Type("int", 32)
I64 = Type("int", 64)
ADDR = Type("addr")

_SCALARS = {"i1": I1, "i8": I8, "i32": I32, "i64": I64, "addr": ADDR}


def size_of(t: Type) -> int:
    """Byte size under the packed layout.  i1 occupies one byte."""
    if t.kind == "int":
        return max(1, t.bits // 8)
    if t.kind == "addr":
        return 8
    if t.kind == "array":
        return t.count * size_of(t.elem)
    return sum(size_of(ft) for _, ft in t.fields)


def field_offset(t: Type, index: int) -> int:
    off = 0
    for i, (_, ft) in enumerate(t.fields):
        if i == index:
            return off
        off += size_of(ft)
    raise IndexError(index)


def is_scalar(t: Type) -> bool:
    return t.kind in ("int", "addr")


# ---------------------------------------------------------------------------
# operands

@dataclass(frozen=True)
class Reg:
    name: str

    def __str__(self):
        return "%" + self.name


@dataclass(frozen=True)
class Const:
    value: int

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class Sym:
    """Reference to a global or a function, both spelled @name."""
    name: str

    def __str__(self):
        return "@" + self.name


Operand = Reg | Const | Sym

BINOPS = ("add", "sub", "mul", "and", "or", "xor", "shl", "lshr", "div", "rem")
ICMP_PREDS = ("lt", "le", "eq", "ne", "gt", "ge")
TERMINATORS = ("br", "condbr", "ret")

# Reserved names used by the hardening passes and the runtime.  Calls to
# BUILTIN_FUNCS are interpreted directly; globals under RESERVED_PREFIXES
# are bookkeeping cells excluded from program-state comparisons.
BUILTIN_FUNCS = {
    "ct_select", "ct_load", "ct_store", "ct_load_nat", "ct_store_nat",
    "dfl_alloc_stack", "dfl_alloc_heap", "dfl_free", "trap",
}
RESERVED_PREFIXES = ("cfl.", "dfl.")


def is_reserved_name(name: str) -> bool:
    return name.startswith(RESERVED_PREFIXES)


@dataclass
class Instr:
    iid: int
    op: str
    name: str | None = None          # result register, if any
    ty: Type | None = None
    pred: str | None = None          # icmp predicate
    args: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    incoming: list = field(default_factory=list)  # phi: [(pred label, Operand)]
    callee: str | None = None        # direct call target

    def is_terminator(self) -> bool:
        return self.op in TERMINATORS


@dataclass
class Block:
    label: str
    instrs: list = field(default_factory=list)

    @property
    def terminator(self) -> Instr:
        return self.instrs[-1]

    def phis(self):
        return [i for i in self.instrs if i.op == "phi"]

    def body(self):
        return [i for i in self.instrs if i.op != "phi"]


@dataclass
class Param:
    name: str
    ty: Type
    secret: bool = False


@dataclass
class Function:
    name: str
    params: list
    ret_ty: Type
    blocks: dict = field(default_factory=dict)  # label -> Block, ordered

    @property
    def entry(self) -> Block:
        return next(iter(self.blocks.values()))

    def instructions(self):
        for b in self.blocks.values():
            yield from b.instrs

    def instr_block(self):
        """Map iid -> block label."""
        out = {}
        for b in self.blocks.values():
            for i in b.instrs:
                out[i.iid] = b.label
        return out


@dataclass
class Global:
    name: str
    ty: Type
    init: bytes | None = None


@dataclass
class DflEntry:
    """One striding target of a wrapped access: a portion of one site."""
    site: str        # "g:@name" | "s:<iid>" | "h:<iid>"
    off: int
    length: int
    stride: int      # element stride inside the portion, descriptive
    handler: str     # simple | gather | bulk

    def site_kind(self) -> str:
        return self.site[0]

    def site_ref(self):
        k, v = self.site.split(":", 1)
        return (k, v[1:] if k == "g" else int(v))


@dataclass
class DflAccessMetadata:
    """Striding plan of one wrapped load or store, with lambda baked in."""
    mid: int
    access: int      # original access instruction id, informational
    kind: str        # load | store
    lam: int
    size: int        # access size in bytes
    ty: Type         # access value type
    natural: bool = False
    entries: list = field(default_factory=list)


@dataclass
class HardenInfo:
    scheme: int = 5
    lam: int = 64


@dataclass
class Module:
    globals: dict = field(default_factory=dict)
    funcs: dict = field(default_factory=dict)
    harden: HardenInfo | None = None
    dflmeta: dict = field(default_factory=dict)    # mid -> DflAccessMetadata
    takenmap: dict = field(default_factory=dict)   # fn -> {iid: taken iid}
    next_iid: int = 0

    def new_iid(self) -> int:
        i = self.next_iid
        self.next_iid += 1
        return i

    def instructions(self):
        for f in self.funcs.values():
            yield from f.instructions()

    def find_instr(self, iid: int):
        for f in self.funcs.values():
            for b in f.blocks.values():
                for i in b.instrs:
                    if i.iid == iid:
                        return f, b, i
        return None

    def renumber(self) -> dict:
        """Reassign instruction ids in lexical order; returns old -> new.

        Everything that names an instruction follows: the takenmap, dfl
        metadata access ids, s:/h: site tokens, and the site argument of
        dfl_alloc_* calls (which carries the originating allocation id).
        """
        remap = {}
        n = 0
        for f in self.funcs.values():
            for b in f.blocks.values():
                for i in b.instrs:
                    remap[i.iid] = n
                    i.iid = n
                    n += 1
        self.next_iid = n
        self.takenmap = {
            fn: {remap.get(k, k): remap.get(v, v) for k, v in tm.items() if k in remap}
            for fn, tm in self.takenmap.items()
        }
        for f in self.funcs.values():
            for i in f.instructions():
                if i.op == "call" and i.callee in ("dfl_alloc_stack",
                                                   "dfl_alloc_heap"):
                    old = i.args[0].value
                    i.args[0] = Const(remap.get(old, old))
        for rec in self.dflmeta.values():
            rec.access = remap.get(rec.access, rec.access)
            for e in rec.entries:
                kind = e.site_kind()
                if kind in ("s", "h"):
                    old = int(e.site.split(":")[1])
                    e.site = "%s:%d" % (kind, remap.get(old, old))
        return remap


# ---------------------------------------------------------------------------
# parsing

class ParseError(Exception):
    def __init__(self, msg, line, col):
        super().__init__("line %d col %d: %s" % (line, col, msg))
        self.line = line
        self.col = col


_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*")
_INT = re.compile(r"-?(0x[0-9a-fA-F]+|\d+)")


class _Cursor:
    def __init__(self, text: str, line: int):
        self.text = text
        self.line = line
        self.pos = 0

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def error(self, msg):
        raise ParseError(msg, self.line, self.pos + 1)

    def peek(self, s: str) -> bool:
        self.skip_ws()
        return self.text.startswith(s, self.pos)

    def accept(self, s: str) -> bool:
        if self.peek(s):
            self.pos += len(s)
            return True
        return False

    def expect(self, s: str):
        if not self.accept(s):
            self.error("expected '%s'" % s)

    def name(self, what="name") -> str:
        self.skip_ws()
        m = _NAME.match(self.text, self.pos)
        if not m:
            self.error("expected %s" % what)
        self.pos = m.end()
        return m.group(0)

    def integer(self) -> int:
        self.skip_ws()
        m = _INT.match(self.text, self.pos)
        if not m:
            self.error("expected integer")
        self.pos = m.end()
        return int(m.group(0), 0)

    def type_(self) -> Type:
        self.skip_ws()
        if self.accept("["):
            count = self.integer()
            self.expect("x")
            elem = self.type_()
            self.expect("]")
            return Type("array", elem=elem, count=count)
        if self.accept("{"):
            fields = []
            while True:
                fname = self.name("field name")
                self.expect(":")
                fields.append((fname, self.type_()))
                if not self.accept(","):
                    break
            self.expect("}")
            return Type("agg", fields=tuple(fields))
        word = self.name("type")
        if word not in _SCALARS:
            self.error("unknown type '%s'" % word)
        return _SCALARS[word]

    def operand(self) -> Operand:
        self.skip_ws()
        if self.accept("%"):
            return Reg(self.name("register"))
        if self.accept("@"):
            return Sym(self.name("symbol"))
        return Const(self.integer())


def _parse_instr(cur: _Cursor, iid: int) -> Instr:
    name = None
    if cur.accept("%"):
        name = cur.name("register")
        cur.expect("=")
    op = cur.name("opcode")
    ins = Instr(iid, op, name=name)

    if op in BINOPS:
        ins.ty = cur.type_()
        ins.args.append(cur.operand())
        cur.expect(",")
        ins.args.append(cur.operand())
    elif op == "icmp":
        ins.pred = cur.name("predicate")
        if ins.pred not in ICMP_PREDS:
            cur.error("unknown icmp predicate '%s'" % ins.pred)
        ins.args.append(cur.operand())
        cur.expect(",")
        ins.args.append(cur.operand())
    elif op == "select":
        for k in range(3):
            if k:
                cur.expect(",")
            ins.args.append(cur.operand())
    elif op == "phi":
        ins.ty = cur.type_()
        cur.expect("[")
        while True:
            lbl = cur.name("label")
            cur.expect(":")
            ins.incoming.append((lbl, cur.operand()))
            if not cur.accept(","):
                break
        cur.expect("]")
    elif op == "load":
        ins.ty = cur.type_()
        cur.expect(",")
        ins.args.append(cur.operand())
    elif op == "store":
        ins.ty = cur.type_()
        ins.args.append(cur.operand())
        cur.expect(",")
        ins.args.append(cur.operand())
    elif op == "gep":
        ins.ty = cur.type_()
        ins.args.append(cur.operand())
        while cur.accept(","):
            ins.args.append(cur.operand())
    elif op in ("alloca", "heapalloc"):
        ins.ty = cur.type_()
    elif op == "heapfree":
        ins.args.append(cur.operand())
    elif op in ("call", "icall"):
        if op == "call":
            cur.expect("@")
            ins.callee = cur.name("function")
        else:
            ins.args.append(cur.operand())
        cur.expect("(")
        if not cur.peek(")"):
            while True:
                ins.args.append(cur.operand())
                if not cur.accept(","):
                    break
        cur.expect(")")
    elif op == "secret":
        ins.ty = cur.type_()
        ins.args.append(Const(cur.integer()))
    elif op == "br":
        ins.labels.append(cur.name("label"))
    elif op == "condbr":
        ins.args.append(cur.operand())
        cur.expect(",")
        ins.labels.append(cur.name("label"))
        cur.expect(",")
        ins.labels.append(cur.name("label"))
    elif op == "ret":
        ins.args.append(cur.operand())
    else:
        cur.error("unknown opcode '%s'" % op)

    if not cur.at_end():
        cur.error("trailing tokens")
    return ins


def _parse_dflmeta(cur: _Cursor) -> DflAccessMetadata:
    mid = cur.integer()
    rec = DflAccessMetadata(mid, 0, "load", 64, 8, I64)
    cur.expect("access=")
    rec.access = cur.integer()
    cur.expect("kind=")
    rec.kind = cur.name()
    cur.expect("lambda=")
    rec.lam = cur.integer()
    cur.expect("ty=")
    rec.ty = cur.type_()
    rec.size = size_of(rec.ty)
    cur.expect("natural=")
    rec.natural = bool(cur.integer())
    cur.expect("entries=[")
    while not cur.accept("]"):
        cur.expect("(")
        cur.expect("site=")
        cur.skip_ws()
        kind = cur.text[cur.pos]
        cur.pos += 1
        cur.expect(":")
        if kind == "g":
            cur.expect("@")
            site = "g:@" + cur.name()
        elif kind in ("s", "h"):
            site = "%s:%d" % (kind, cur.integer())
        else:
            cur.error("bad site class '%s'" % kind)
        cur.accept(",")
        cur.expect("off=")
        off = cur.integer()
        cur.accept(",")
        cur.expect("len=")
        length = cur.integer()
        cur.accept(",")
        cur.expect("stride=")
        stride = cur.integer()
        cur.accept(",")
        cur.expect("handler=")
        handler = cur.name()
        cur.expect(")")
        cur.accept(",")
        rec.entries.append(DflEntry(site, off, length, stride, handler))
    if not cur.at_end():
        cur.error("trailing tokens")
    return rec


def parse_module(text: str) -> Module:
    m = Module()
    lines = text.splitlines()
    i = 0
    iid = 0

    def strip(line):
        k = line.find(";")
        return line[:k] if k >= 0 else line

    while i < len(lines):
        raw = strip(lines[i])
        lineno = i + 1
        i += 1
        if not raw.strip():
            continue
        cur = _Cursor(raw, lineno)

        if cur.accept("global"):
            cur.expect("@")
            gname = cur.name("global name")
            cur.expect(":")
            ty = cur.type_()
            init = None
            if cur.accept("="):
                cur.skip_ws()
                hexs = raw[cur.pos:].strip()
                if not re.fullmatch(r"([0-9a-fA-F]{2})+", hexs):
                    cur.error("bad initializer bytes")
                init = bytes.fromhex(hexs)
                if len(init) > size_of(ty):
                    cur.error("initializer longer than type size")
                cur.pos = len(raw)
            if not cur.at_end():
                cur.error("trailing tokens")
            if gname in m.globals:
                cur.error("duplicate global '@%s'" % gname)
            m.globals[gname] = Global(gname, ty, init)
            continue

        if cur.accept("harden"):
            cur.expect("scheme=")
            scheme = cur.integer()
            cur.expect("lambda=")
            lam = cur.integer()
            m.harden = HardenInfo(scheme, lam)
            continue

        if cur.accept("dflmeta"):
            rec = _parse_dflmeta(cur)
            m.dflmeta[rec.mid] = rec
            continue

        if cur.accept("takenmap"):
            cur.expect("@")
            fn = cur.name("function")
            cur.expect("{")
            tm = {}
            while not cur.accept("}"):
                a = cur.integer()
                cur.expect(":")
                tm[a] = cur.integer()
            m.takenmap[fn] = tm
            continue

        if not cur.accept("func"):
            cur.error("expected global, func, or directive")
        cur.expect("@")
        fname = cur.name("function name")
        cur.expect("(")
        params = []
        if not cur.peek(")"):
            while True:
                cur.expect("%")
                pname = cur.name("parameter")
                cur.expect(":")
                secret = bool(cur.accept("secret"))
                params.append(Param(pname, cur.type_(), secret))
                if not cur.accept(","):
                    break
        cur.expect(")")
        cur.expect("->")
        ret_ty = cur.type_()
        cur.expect("{")
        if not cur.at_end():
            cur.error("trailing tokens")
        if fname in m.funcs:
            raise ParseError("duplicate function '@%s'" % fname, lineno, 1)
        fn = Function(fname, params, ret_ty)

        block = None
        while True:
            if i >= len(lines):
                raise ParseError("unterminated function '@%s'" % fname, lineno, 1)
            raw = strip(lines[i])
            lineno = i + 1
            i += 1
            if not raw.strip():
                continue
            cur = _Cursor(raw, lineno)
            if cur.accept("}"):
                if not cur.at_end():
                    cur.error("trailing tokens")
                break
            # block label: name ':' at start of line, nothing else
            mlab = re.match(r"\s*([A-Za-z_][A-Za-z0-9_.]*)\s*:\s*$", raw)
            if mlab:
                lbl = mlab.group(1)
                if lbl in fn.blocks:
                    cur.error("duplicate label '%s'" % lbl)
                block = Block(lbl)
                fn.blocks[lbl] = block
                continue
            if block is None:
                cur.error("instruction before first label")
            block.instrs.append(_parse_instr(cur, iid))
            iid += 1
        m.funcs[fname] = fn

    m.next_iid = iid
    return m


# ---------------------------------------------------------------------------
# printing

def _fmt_operand(o: Operand) -> str:
    return str(o)


def _fmt_instr(ins: Instr) -> str:
    head = "%%%s = " % ins.name if ins.name is not None else ""
    op = ins.op
    a = [_fmt_operand(x) for x in ins.args]
    if op in BINOPS:
        return "%s%s %s %s, %s" % (head, op, ins.ty, a[0], a[1])
    if op == "icmp":
        return "%s%s %s %s, %s" % (head, op, ins.pred, a[0], a[1])
    if op == "select":
        return "%sselect %s, %s, %s" % (head, a[0], a[1], a[2])
    if op == "phi":
        inc = ", ".join("%s: %s" % (l, _fmt_operand(v)) for l, v in ins.incoming)
        return "%sphi %s [%s]" % (head, ins.ty, inc)
    if op == "load":
        return "%sload %s, %s" % (head, ins.ty, a[0])
    if op == "store":
        return "store %s %s, %s" % (ins.ty, a[0], a[1])
    if op == "gep":
        rest = "".join(", " + x for x in a[1:])
        return "%sgep %s %s%s" % (head, ins.ty, a[0], rest)
    if op in ("alloca", "heapalloc"):
        return "%s%s %s" % (head, op, ins.ty)
    if op == "heapfree":
        return "heapfree %s" % a[0]
    if op == "call":
        return "%scall @%s(%s)" % (head, ins.callee, ", ".join(a))
    if op == "icall":
        return "%sicall %s(%s)" % (head, a[0], ", ".join(a[1:]))
    if op == "secret":
        return "%ssecret %s %s" % (head, ins.ty, a[0])
    if op == "br":
        return "br %s" % ins.labels[0]
    if op == "condbr":
        return "condbr %s, %s, %s" % (a[0], ins.labels[0], ins.labels[1])
    if op == "ret":
        return "ret %s" % a[0]
    raise ValueError(op)


def _fmt_meta(rec: DflAccessMetadata) -> str:
    es = ", ".join(
        "(site=%s, off=%d, len=%d, stride=%d, handler=%s)"
        % (e.site, e.off, e.length, e.stride, e.handler)
        for e in rec.entries
    )
    return "dflmeta %d access=%d kind=%s lambda=%d ty=%s natural=%d entries=[%s]" % (
        rec.mid, rec.access, rec.kind, rec.lam, rec.ty, int(rec.natural), es)


def print_module(m: Module) -> str:
    out = []
    if m.harden is not None:
        out.append("harden scheme=%d lambda=%d" % (m.harden.scheme, m.harden.lam))
    for g in m.globals.values():
        line = "global @%s : %s" % (g.name, g.ty)
        if g.init is not None and any(g.init):
            line += " = " + g.init.hex()
        out.append(line)
    for fn in m.funcs.values():
        ps = ", ".join(
            "%%%s: %s%s" % (p.name, "secret " if p.secret else "", p.ty)
            for p in fn.params
        )
        out.append("")
        out.append("func @%s(%s) -> %s {" % (fn.name, ps, fn.ret_ty))
        for b in fn.blocks.values():
            out.append("%s:" % b.label)
            for ins in b.instrs:
                out.append("  " + _fmt_instr(ins))
        out.append("}")
    for mid in sorted(m.dflmeta):
        out.append(_fmt_meta(m.dflmeta[mid]))
    for fname in m.takenmap:
        tm = m.takenmap[fname]
        body = " ".join("%d:%d" % (k, tm[k]) for k in sorted(tm))
        out.append("takenmap @%s { %s }" % (fname, body))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# validation

@dataclass
class Diagnostic:
    fn: str
    msg: str
    iid: int | None = None

    def __str__(self):
        where = "@%s" % self.fn
        if self.iid is not None:
            where += " #%d" % self.iid
        return "%s: %s" % (where, self.msg)


def _gep_result_navigation(ty: Type, idxs, diag):
    """Walk a gep's trailing indices through ty; returns None on error."""
    cur = ty
    for k, idx in enumerate(idxs):
        if cur.kind == "array":
            cur = cur.elem
        elif cur.kind == "agg":
            if not isinstance(idx, Const):
                diag("aggregate gep index must be constant")
                return None
            if not 0 <= idx.value < len(cur.fields):
                diag("aggregate field index out of range")
                return None
            cur = cur.fields[idx.value][1]
        else:
            diag("gep index %d walks into scalar type" % (k + 1))
            return None
    return cur


def validate(m: Module) -> list:
    """Structural, SSA, and type diagnostics.  Empty list means well formed."""
    from . import cfg as _cfg

    diags = []
    seen_iids = set()
    for ins in m.instructions():
        if ins.iid in seen_iids:
            diags.append(Diagnostic("?", "duplicate instruction id %d" % ins.iid, ins.iid))
        seen_iids.add(ins.iid)

    for fn in m.funcs.values():
        def err(msg, iid=None, _fn=fn):
            diags.append(Diagnostic(_fn.name, msg, iid))

        if not fn.blocks:
            err("function has no blocks")
            continue

        # structural checks
        for b in fn.blocks.values():
            if not b.instrs:
                err("empty block '%s'" % b.label)
                continue
            for ins in b.instrs[:-1]:
                if ins.is_terminator():
                    err("terminator in mid-block '%s'" % b.label, ins.iid)
            if not b.terminator.is_terminator():
                err("block '%s' lacks terminator" % b.label)
            in_body = False
            for ins in b.instrs:
                if ins.op != "phi":
                    in_body = True
                elif in_body:
                    err("phi after non-phi in '%s'" % b.label, ins.iid)
            for ins in b.instrs:
                for lbl in ins.labels:
                    if lbl not in fn.blocks:
                        err("unknown label '%s'" % lbl, ins.iid)

        if any(d.fn == fn.name for d in diags):
            continue  # skip deeper checks on broken structure

        # SSA defs
        types: dict[str, Type] = {p.name: p.ty for p in fn.params}
        defs: dict[str, Instr] = {}
        dup = False
        for ins in fn.instructions():
            if ins.name is None:
                continue
            if ins.name in types or ins.name in defs:
                err("redefinition of %%%s" % ins.name, ins.iid)
                dup = True
            defs[ins.name] = ins
            types[ins.name] = _result_type(m, ins, types)
        if dup:
            continue

        graph = _cfg.build_cfg(fn)
        iblock = fn.instr_block()

        # phi edge agreement
        for b in fn.blocks.values():
            preds = sorted(graph.preds[b.label])
            for ph in b.phis():
                labels = [l for l, _ in ph.incoming]
                if sorted(labels) != preds:
                    err("phi edges %s do not match preds %s" % (labels, preds), ph.iid)

        # dominance of uses
        def dominates_use(dname: str, user: Instr, via_label: str | None) -> bool:
            d = defs.get(dname)
            if d is None:
                return True  # parameter
            dblk, ublk = iblock[d.iid], iblock[user.iid]
            if via_label is not None:
                # phi use: def must dominate the end of the incoming block
                return graph.dominates(dblk, via_label)
            if dblk == ublk:
                order = {i.iid: k for k, i in enumerate(fn.blocks[dblk].instrs)}
                return order[d.iid] < order[user.iid]
            return graph.dominates(dblk, ublk)

        for ins in fn.instructions():
            uses = [(a, None) for a in ins.args if isinstance(a, Reg)]
            uses += [(v, l) for l, v in ins.incoming if isinstance(v, Reg)]
            for reg, via in uses:
                if reg.name not in types:
                    err("use of undefined %%%s" % reg.name, ins.iid)
                elif not dominates_use(reg.name, ins, via):
                    err("use of %%%s not dominated by its def" % reg.name, ins.iid)

        _type_check(m, fn, types, err)

    # global initializers already length-checked at parse; symbol resolution:
    for fn in m.funcs.values():
        for ins in fn.instructions():
            ops = list(ins.args) + [v for _, v in ins.incoming]
            for o in ops:
                if isinstance(o, Sym) and o.name not in m.globals \
                        and o.name not in m.funcs:
                    diags.append(Diagnostic(fn.name, "unknown symbol @%s" % o.name, ins.iid))
            if ins.op == "call" and ins.callee not in m.funcs \
                    and ins.callee not in BUILTIN_FUNCS:
                diags.append(Diagnostic(fn.name, "call to unknown @%s" % ins.callee, ins.iid))
    return diags


def _result_type(m: Module, ins: Instr, env) -> Type | None:
    if ins.op in BINOPS:
        return ins.ty
    if ins.op == "icmp":
        return I1
    if ins.op == "select":
        for a in ins.args[1:]:
            t = _operand_type(m, a, env)
            if t is not None:
                return t
        return I64
    if ins.op == "phi":
        return ins.ty
    if ins.op == "load":
        return ins.ty
    if ins.op in ("gep", "alloca", "heapalloc"):
        return ADDR
    if ins.op == "secret":
        return ins.ty
    if ins.op == "call":
        if ins.callee in m.funcs:
            return m.funcs[ins.callee].ret_ty
        if ins.callee in ("dfl_alloc_stack", "dfl_alloc_heap"):
            return ADDR
        if ins.callee == "ct_load":
            mid = ins.args[-1]
            if isinstance(mid, Const) and mid.value in m.dflmeta:
                return m.dflmeta[mid.value].ty
            return None
        if ins.callee == "ct_load_nat":
            mid = ins.args[-1]
            if isinstance(mid, Const) and mid.value in m.dflmeta:
                return m.dflmeta[mid.value].ty
            return None
        if ins.callee == "ct_select":
            for a in ins.args[1:3]:
                t = _operand_type(m, a, env)
                if t is not None:
                    return t
        return None
    if ins.op == "icall":
        return None
    return None


def _operand_type(m: Module, o: Operand, env) -> Type | None:
    if isinstance(o, Reg):
        return env.get(o.name)
    if isinstance(o, Sym):
        return ADDR
    return None  # constants are polymorphic over int widths and addr


def _type_check(m: Module, fn: Function, env, err):
    def want(o, t: Type | None, ins, what):
        if t is None:
            return
        got = _operand_type(m, o, env)
        if got is not None and got != t:
            err("%s has type %s, expected %s" % (what, got, t), ins.iid)

    for ins in fn.instructions():
        op = ins.op
        if op in BINOPS:
            if ins.ty.kind != "int":
                err("%s requires an integer type" % op, ins.iid)
            want(ins.args[0], ins.ty, ins, "lhs")
            want(ins.args[1], ins.ty, ins, "rhs")
        elif op == "icmp":
            ta = _operand_type(m, ins.args[0], env)
            tb = _operand_type(m, ins.args[1], env)
            if ta is not None and tb is not None and ta != tb:
                err("icmp operand types differ (%s vs %s)" % (ta, tb), ins.iid)
        elif op == "select":
            want(ins.args[0], I1, ins, "select condition")
            ta = _operand_type(m, ins.args[1], env)
            tb = _operand_type(m, ins.args[2], env)
            if ta is not None and tb is not None and ta != tb:
                err("select arms differ (%s vs %s)" % (ta, tb), ins.iid)
        elif op == "phi":
            for _, v in ins.incoming:
                want(v, ins.ty, ins, "phi incoming")
        elif op == "load":
            if not is_scalar(ins.ty):
                err("load of non-scalar type", ins.iid)
            want(ins.args[0], ADDR, ins, "load address")
        elif op == "store":
            if not is_scalar(ins.ty):
                err("store of non-scalar type", ins.iid)
            want(ins.args[0], ins.ty, ins, "stored value")
            want(ins.args[1], ADDR, ins, "store address")
        elif op == "gep":
            want(ins.args[0], ADDR, ins, "gep base")
            _gep_result_navigation(ins.ty, ins.args[2:],
                                   lambda msg: err(msg, ins.iid))
        elif op == "heapfree":
            want(ins.args[0], ADDR, ins, "freed pointer")
        elif op == "condbr":
            want(ins.args[0], I1, ins, "branch condition")
        elif op == "ret":
            want(ins.args[0], fn.ret_ty, ins, "return value")
        elif op == "call" and ins.callee in m.funcs:
            callee = m.funcs[ins.callee]
            if len(ins.args) != len(callee.params):
                err("call passes %d args, @%s takes %d"
                    % (len(ins.args), ins.callee, len(callee.params)), ins.iid)
            else:
                for a, p in zip(ins.args, callee.params):
                    want(a, p.ty, ins, "argument %%%s" % p.name)
        elif op == "icall":
            want(ins.args[0], ADDR, ins, "icall target")
        elif op == "secret":
            if ins.ty.kind != "int":
                err("secret requires an integer type", ins.iid)

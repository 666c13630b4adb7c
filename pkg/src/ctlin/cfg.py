"""Control-flow graph, dominators, postdominators, reducibility.

Dominators use the iterative dataflow scheme over a reverse postorder;
postdominators run the same solver on the reversed graph with a virtual
exit joining every ret (or otherwise successor-less) block.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class CFG:
    entry: str
    succs: dict = field(default_factory=dict)
    preds: dict = field(default_factory=dict)
    idom: dict = field(default_factory=dict)      # block -> immediate dominator
    ipdom: dict = field(default_factory=dict)     # block -> immediate postdominator
    rpo: list = field(default_factory=list)
    reducible: bool = True

    def dominates(self, a: str, b: str) -> bool:
        while b is not None:
            if a == b:
                return True
            b = self.idom.get(b)
        return False

    def postdominates(self, a: str, b: str) -> bool:
        while b is not None:
            if a == b:
                return True
            b = self.ipdom.get(b)
        return False

    def dom_tree_children(self) -> dict:
        out = {b: [] for b in self.succs}
        for b, d in self.idom.items():
            if d is not None:
                out[d].append(b)
        return out


def _rpo(entry: str, succs: dict) -> list:
    seen = set()
    order = []

    def dfs(n):
        seen.add(n)
        for s in succs.get(n, []):
            if s not in seen:
                dfs(s)
        order.append(n)

    dfs(entry)
    return list(reversed(order))


def _idoms(entry: str, nodes: list, preds: dict) -> dict:
    """Cooper/Harvey/Kennedy iterative immediate dominators."""
    index = {n: i for i, n in enumerate(nodes)}
    idom = {entry: entry}

    def intersect(a, b):
        while a != b:
            while index[a] > index[b]:
                a = idom[a]
            while index[b] > index[a]:
                b = idom[b]
        return a

    changed = True
    while changed:
        changed = False
        for n in nodes[1:]:
            ps = [p for p in preds.get(n, []) if p in idom]
            if not ps:
                continue
            new = ps[0]
            for p in ps[1:]:
                new = intersect(new, p)
            if idom.get(n) != new:
                idom[n] = new
                changed = True
    out = {n: (None if n == entry else idom.get(n)) for n in nodes}
    return out


def build_cfg(fn) -> CFG:
    succs = {}
    preds = {b: [] for b in fn.blocks}
    for b in fn.blocks.values():
        t = b.terminator
        targets = list(dict.fromkeys(t.labels)) if t.labels else []
        succs[b.label] = list(t.labels)
        for s in targets:
            preds[s].append(b.label)

    entry = fn.entry.label
    g = CFG(entry=entry, succs=succs, preds=preds)
    g.rpo = _rpo(entry, succs)
    reachable = set(g.rpo)
    g.idom = _idoms(entry, g.rpo, preds)

    # postdominators: run the same solver on the reversed graph, rooted at
    # a virtual exit that joins every successor-less block
    exits = [b for b in g.rpo if not succs.get(b)]
    vexit = "__exit__"
    rev_succs = {vexit: list(exits)}
    for n in reachable:
        rev_succs[n] = [p for p in preds[n] if p in reachable]
    rev_preds = {n: [s for s in succs.get(n, []) if s in reachable] for n in reachable}
    for e in exits:
        rev_preds[e] = rev_preds.get(e, []) + [vexit]
    rev_preds[vexit] = []
    order = _rpo(vexit, rev_succs)
    ip = _idoms(vexit, order, rev_preds)
    g.ipdom = {n: (None if ip.get(n) in (vexit, None) else ip[n]) for n in reachable}

    # reducibility: every retreating edge in a DFS must target a dominator
    g.reducible = _is_reducible(entry, succs, g)
    return g


def _is_reducible(entry: str, succs: dict, g: CFG) -> bool:
    state = {}  # 0 in progress, 1 done
    ok = True

    def dfs(n):
        nonlocal ok
        state[n] = 0
        for s in succs.get(n, []):
            if s not in state:
                dfs(s)
            elif state[s] == 0:  # retreating edge n -> s
                if not g.dominates(s, n):
                    ok = False
        state[n] = 1

    dfs(entry)
    return ok


def back_edges(fn, g: CFG) -> list:
    """(latch, header) pairs; requires a reducible graph."""
    out = []
    for b, ss in g.succs.items():
        for s in ss:
            if g.dominates(s, b):
                out.append((b, s))
    return sorted(set(out))


def natural_loop(g: CFG, latch: str, header: str) -> set:
    body = {header, latch}
    work = [latch]
    while work:
        n = work.pop()
        if n == header:
            continue
        for p in g.preds.get(n, []):
            if p not in body:
                body.add(p)
                work.append(p)
    return body

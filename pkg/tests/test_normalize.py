"""Exit unification, region recovery, latch and dispatch rewrites."""

import pytest

from conftest import load
from ctlin.interp import ExecInput, interpret
from ctlin.ir import parse_module, validate
from ctlin.normalize import (NormalizeError, normalize_regions,
                             promote_indirect_calls, unify_exits)
from ctlin.pta import andersen_solve, resolve_indirect_targets

MULTI_RET = """\
func @main(%s: secret i64) -> i64 {
entry:
  %b = and i64 %s, 1
  %c = icmp eq %b, 1
  condbr %c, a, b
a:
  ret 10
b:
  ret 20
}
"""

IRREDUCIBLE = """\
func @main(%s: i64) -> i64 {
entry:
  %c = icmp eq %s, 0
  condbr %c, a, b
a:
  %c2 = icmp eq %s, 1
  condbr %c2, b, done
b:
  %c3 = icmp eq %s, 2
  condbr %c3, a, done
done:
  ret 0
}
"""


class TestUnifyExits:
    def test_single_ret_after(self):
        m = parse_module(MULTI_RET)
        unify_exits(m)
        rets = [i for i in m.funcs["main"].instructions() if i.op == "ret"]
        assert len(rets) == 1
        assert validate(m) == []

    def test_behavior_unchanged(self):
        m = parse_module(MULTI_RET)
        unify_exits(m)
        for s in range(4):
            assert interpret(m, ExecInput([], [s])).output == \
                (10 if s & 1 else 20)

    def test_idempotent(self):
        m = parse_module(MULTI_RET)
        unify_exits(m)
        once = len(list(m.funcs["main"].instructions()))
        unify_exits(m)
        assert len(list(m.funcs["main"].instructions())) == once


class TestRegions:
    def test_nested_branch_tree(self):
        m = load("nested_branches")
        unify_exits(m)
        rt = normalize_regions(m)
        outer = rt.branch_at("main", "entry")
        assert outer is not None
        inner = rt.branch_at("main", "outer.else")
        assert inner is not None
        assert inner.parent is outer
        assert inner.blocks < outer.blocks
        assert outer.exit == "join"

    def test_loop_regions(self):
        m = load("exp_loop_pair")
        unify_exits(m)
        rt = normalize_regions(m)
        loops = [r for r in rt.by_id.values() if r.kind == "loop"]
        assert len(loops) == 2
        for r in loops:
            assert r.latch is not None
            assert r.exit is not None

    def test_latch_exits_on_true(self):
        # corpus latches say "continue on true"; canonical form flips them
        m = load("exp_loop_pair")
        unify_exits(m)
        rt = normalize_regions(m)
        fn = m.funcs["main"]
        for r in rt.by_id.values():
            if r.kind != "loop":
                continue
            term = fn.blocks[r.latch].instrs[-1]
            assert term.op == "condbr"
            assert term.labels[0] == r.exit
            assert term.labels[1] == r.entry
        # and the rewrite kept the program's meaning
        m2 = load("exp_loop_pair")
        for base in (2, 3):
            for s in range(8):
                assert interpret(m, ExecInput([base], [s])).output == \
                    interpret(m2, ExecInput([base], [s])).output

    def test_irreducible_rejected(self):
        m = parse_module(IRREDUCIBLE)
        unify_exits(m)
        with pytest.raises(NormalizeError):
            normalize_regions(m)

    def test_region_blocks_partition(self):
        m = load("covering_loop")
        unify_exits(m)
        rt = normalize_regions(m)
        fn = m.funcs["main"]
        root = rt.roots["main"]
        claimed = set()
        for r in root.descendants():
            if r.kind != "linear":
                claimed |= r.blocks
        assert claimed <= set(fn.blocks)


class TestIndirectCalls:
    def test_promotion_adds_dispatch(self):
        m = load("fn_table_dispatch")
        unify_exits(m)
        targets = resolve_indirect_targets(m, andersen_solve(m))
        assert len(targets) == 1
        (iid, cands), = targets.items()
        assert cands == ["f", "g"]
        promote_indirect_calls(m, targets)
        assert validate(m) == []
        icalls = [i for i in m.funcs["main"].instructions()
                  if i.op == "icall"]
        assert icalls == []
        callees = {i.callee for i in m.funcs["main"].instructions()
                   if i.op == "call"}
        assert {"f", "g"} <= callees

    def test_dispatch_behavior(self):
        m = load("fn_table_dispatch")
        ref = load("fn_table_dispatch")
        unify_exits(m)
        promote_indirect_calls(m, resolve_indirect_targets(m,
                                                           andersen_solve(m)))
        for a in (0, 5, 100):
            for s in range(4):
                assert interpret(m, ExecInput([a], [s])).output == \
                    interpret(ref, ExecInput([a], [s])).output

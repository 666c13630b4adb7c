"""Dynamic taint profiling and the sensitivity closure."""

from conftest import load
from ctlin.interp import ExecInput
from ctlin.ir import parse_module
from ctlin.normalize import normalize_regions, unify_exits
from ctlin.taint import (close_sensitivity, default_suite, input_shape,
                         taint_profile)


def profiled(name_or_module, suite=None):
    m = name_or_module if not isinstance(name_or_module, str) \
        else load(name_or_module)
    unify_exits(m)
    rt = normalize_regions(m)
    rep = taint_profile(m, suite or default_suite(m))
    return m, rt, rep


def instr_by_name(m, fn, name):
    for ins in m.funcs[fn].instructions():
        if ins.name == name:
            return ins
    raise KeyError(name)


class TestProfile:
    def test_table_lookup_facts(self):
        m, rt, rep = profiled("table_lookup")
        ta = instr_by_name(m, "main", "ta")
        tb = instr_by_name(m, "main", "tb")
        assert {ta.iid, tb.iid} <= rep.reads
        assert {ta.iid, tb.iid} <= rep.addr_tainted
        assert len(rep.branches) == 1
        # the result store moves tainted data to a fixed location
        stores = [i for i in m.funcs["main"].instructions()
                  if i.op == "store"]
        assert stores[0].iid in rep.writes
        assert stores[0].iid not in rep.addr_tainted

    def test_public_address_load_not_addr_tainted(self):
        m, rt, rep = profiled("covering_loop")
        v = instr_by_name(m, "main", "v")
        assert v.iid not in rep.addr_tainted
        assert len(rep.branches) == 1

    def test_loop_bound_training(self):
        m, rt, rep = profiled("jit_trip")
        assert rep.loop_bounds[("main", "loop")] == 8
        assert ("main", "loop") in rep.loops

    def test_restricted_suite_trains_smaller_bound(self):
        suite = [ExecInput([], [n]) for n in range(2)]
        m, rt, rep = profiled("jit_trip", suite)
        assert rep.loop_bounds[("main", "loop")] == 2

    def test_exp_pair_loops_tainted(self):
        m, rt, rep = profiled("exp_loop_pair")
        keys = set(rep.loop_bounds)
        assert len(keys) == 2
        assert keys <= rep.loops
        assert all(rep.loop_bounds[k] >= 2 for k in keys)

    def test_tainted_divisor(self):
        src = ("func @main(%a: i64, %k: secret i64) -> i64 {\n"
               "entry:\n  %d = and i64 %k, 7\n  %d1 = add i64 %d, 1\n"
               "  %q = div i64 %a, %d1\n  ret %q\n}\n")
        m, rt, rep = profiled(parse_module(src))
        q = instr_by_name(m, "main", "q")
        assert q.iid in rep.divrem

    def test_helper_taint_crosses_calls(self):
        m, rt, rep = profiled("two_context")
        v = instr_by_name(m, "pick", "v")
        assert v.iid in rep.reads


class TestClosure:
    def test_region_claims_nested_accesses(self):
        m, rt, rep = profiled("nested_branches")
        ss = close_sensitivity(m, rep, rt)
        assert ("main", "branch", "entry") in ss.regions
        assert ("main", "branch", "outer.else") in ss.regions
        b1 = instr_by_name(m, "main", "b1")
        b2 = instr_by_name(m, "main", "b2")
        assert {b1.iid, b2.iid} <= ss.accesses

    def test_guarded_callee_joins_whole(self):
        src = ("global @t: [8 x i64] = 01\n"
               "func @leaf(%x: i64) -> i64 {\n"
               "entry:\n  %r = add i64 %x, 1\n  ret %r\n}\n"
               "func @main(%s: secret i64) -> i64 {\n"
               "entry:\n  %b = and i64 %s, 1\n  %c = icmp eq %b, 1\n"
               "  condbr %c, a, join\n"
               "a:\n  %v = call @leaf(%s)\n  br join\n"
               "join:\n  %r = phi i64 [entry: 0, a: %v]\n  ret %r\n}\n")
        m, rt, rep = profiled(parse_module(src))
        ss = close_sensitivity(m, rep, rt)
        assert "leaf" in ss.functions

    def test_bounds_carried_into_closure(self):
        m, rt, rep = profiled("jit_trip")
        ss = close_sensitivity(m, rep, rt)
        assert ss.bounds[("main", "loop")] == 8


class TestInputs:
    def test_input_shape(self, corpus_names):
        want = {
            "covering_loop": (0, 1),
            "exp_loop_pair": (1, 1),
            "fn_table_dispatch": (0, 1),
            "jit_trip": (0, 1),
            "nested_branches": (0, 1),
            "store_sweep": (0, 1),
            "table_lookup": (0, 1),
            "two_context": (0, 1),
        }
        for name in corpus_names:
            assert input_shape(load(name)) == want[name], name

    def test_default_suite_deterministic(self):
        m = load("exp_loop_pair")
        a = default_suite(m, seed=3)
        b = default_suite(m, seed=3)
        assert [(i.public, i.secrets) for i in a] == \
            [(i.public, i.secrets) for i in b]
        c = default_suite(m, seed=4)
        assert [(i.public, i.secrets) for i in a] != \
            [(i.public, i.secrets) for i in c]

    def test_default_suite_spans_partitions(self):
        m = load("table_lookup")
        suite = default_suite(m, space=1 << 15, partitions=128)
        assert len(suite) == 128
        secs = sorted(i.secrets[0] for i in suite)
        # both table halves and the untaken tail get exercised
        assert secs[0] < 4096 and secs[-1] >= 16384

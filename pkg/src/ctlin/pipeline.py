"""End-to-end hardening pipeline, one module in, one module out.

Stage order matters and is fixed here rather than left to callers:
indirect calls become direct before regions are shaped, profiling and
closure decide what is sensitive, cloning splits calling contexts and
forces a re-profile, striding plans are built and accesses wrapped
while loads and stores still look like loads and stores, division is
rewritten while branches still exist, and control flow merges last.
Natural striding runs after the merge because it must look through the
decoy selects the merge installed.  Instruction ids are renumbered at
the end so emitted modules are stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import cfl, dfl, pta
from .interp import DEFAULT_BUDGET, parse_suite
from .ir import Module, validate
from .normalize import normalize_regions, promote_indirect_calls, unify_exits
from .taint import close_sensitivity, default_suite, taint_profile


class PipelineError(Exception):
    pass


@dataclass
class PipelineConfig:
    lam: int = 64
    scheme: int = 5
    entry: str = "main"
    seed: int = 0
    budget: int = DEFAULT_BUDGET
    suite_path: str | None = None
    cloning: bool = True
    promotion: bool = True
    natural: bool = True


def _suite(m: Module, cfg: PipelineConfig) -> list:
    if cfg.suite_path:
        with open(cfg.suite_path) as f:
            suite = parse_suite(f.read())
        if not suite:
            raise PipelineError("suite %s holds no inputs" % cfg.suite_path)
        return suite
    return default_suite(m, cfg.entry, seed=cfg.seed)


def _sensitive_functions(m: Module, ss) -> set:
    fns = {rid[0] for rid in ss.regions} | set(ss.functions)
    for iid in set(ss.accesses) | set(ss.divrem):
        loc = m.find_instr(iid)
        if loc is not None:
            fns.add(loc[0].name)
    return fns


def _clone_scope(m: Module, fns: set) -> set:
    """Sensitive functions plus everything that calls into them.

    Context separation happens by duplicating callees under a root, so
    the root must sit above the function holding the sensitive access:
    a leaf with two callers only splits once the caller is in scope.
    """
    callers = {}
    for fn in m.funcs.values():
        for ins in fn.instructions():
            if ins.op == "call" and ins.callee in m.funcs:
                callers.setdefault(ins.callee, set()).add(fn.name)
    scope = set(fns)
    work = list(fns)
    while work:
        for c in callers.get(work.pop(), ()):
            if c not in scope:
                scope.add(c)
                work.append(c)
    return scope


def harden_module(m: Module, cfg: PipelineConfig | None = None):
    """Run every stage on m in place; returns (m, stage report dict)."""
    cfg = cfg or PipelineConfig()
    rep = {}

    unify_exits(m)
    pt = pta.andersen_solve(m)
    targets = pta.resolve_indirect_targets(m, pt)
    rep["icalls_promoted"] = len(targets)
    if targets:
        promote_indirect_calls(m, targets)
    rt = normalize_regions(m)

    suite = _suite(m, cfg)
    report = taint_profile(m, suite, entry=cfg.entry, budget=cfg.budget)
    ss = close_sensitivity(m, report, rt)

    rep["cloned"] = 0
    if cfg.cloning:
        cmap = pta.aggressive_clone(m, _clone_scope(m, _sensitive_functions(m, ss)))
        rep["cloned"] = len(cmap)
        if cmap:
            # fresh contexts shift every instruction id downstream of a
            # clone, so sensitivity is re-derived instead of translated
            rt = normalize_regions(m)
            report = taint_profile(m, suite, entry=cfg.entry,
                                   budget=cfg.budget)
            ss = close_sensitivity(m, report, rt)

    rep["sensitive_regions"] = len(ss.regions)
    rep["sensitive_functions"] = len(ss.functions)

    pt = pta.refine_field_sensitivity(m, pta.andersen_solve(m))
    rep["plans"] = dfl.build_metadata(m, ss.accesses, pt, cfg.lam)
    rep["promoted"] = dfl.promote_stack_objects(m) if cfg.promotion else 0
    rep["interposed"] = dfl.interpose_allocations(m)
    rep["wrapped"] = dfl.wrap_accesses(m)
    rep["div_rewritten"] = cfl.sanitize_div_rem(m, ss)

    stats = cfl.linearize(m, ss, rt, scheme=cfg.scheme, lam=cfg.lam)
    rep["branches_linearized"] = sum(s["branches"] for s in stats.values())
    rep["loops_linearized"] = sum(s["loops"] for s in stats.values())
    rep["natural"] = (dfl.optimize_natural_striding(m, report)
                      if cfg.natural else 0)

    m.renumber()
    diags = validate(m)
    if diags:
        raise PipelineError("hardened module fails validation: %s"
                            % "; ".join(str(d) for d in diags))
    return m, rep


def module_stats(m: Module) -> dict:
    """Shape summary of a hardened module for reports."""
    plans = sorted(m.dflmeta.values(), key=lambda r: r.mid)
    portions = [len(r.entries) for r in plans]
    handlers = {}
    for r in plans:
        for e in r.entries:
            handlers[e.handler] = handlers.get(e.handler, 0) + 1
    out = {
        "functions": len(m.funcs),
        "globals": len(m.globals),
        "instructions": sum(1 for _ in m.instructions()),
        "plans": len(plans),
        "natural_plans": sum(1 for r in plans if r.natural),
        "portions_mean": (round(sum(portions) / len(portions), 4)
                          if portions else 0.0),
        "handlers": handlers,
        "plan_cost": round(sum(dfl.plan_cost(r) for r in plans), 4),
        "taken_tracked": sum(len(v) for v in m.takenmap.values()),
        "bound_cells": sum(1 for n in m.globals if n.startswith("cfl.k.")),
    }
    if m.harden:
        out["scheme"] = m.harden.scheme
        out["lambda"] = m.harden.lam
    return out

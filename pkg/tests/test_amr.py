import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pxamr.amr import (AmrConfig, LevelHierarchy, NestingError, Patch, PatchSingular, Plan,
                       TimeMismatch, build_plan, cluster_flags, collect, evolve_hierarchy,
                       evolve_recursive, flag_cells, initial_hierarchy, initial_values,
                       level0_patches, regrid, required_buffer, restrict, run_plan_sequential,
                       taper_fill)
from pxamr.amr_dist import LocalExecutor
from pxamr.bench import hierarchy_difference
from pxamr.cosmo import B, NFIELDS, PHI, CosmoParams, evolve_unigrid, kink_init, vacuum_state

P256 = CosmoParams(N=256)


def kink(p):
    return kink_init(p)


def hierarchy(config=None, params=P256, init=kink):
    return initial_hierarchy(params, config or AmrConfig(), init)


def test_buffer_width_accounting():
    assert required_buffer(2, 1) == 6 and required_buffer(1, 1) == 3
    h = hierarchy()
    assert h.buffer(0) == 3 and h.buffer(1) == 6
    assert hierarchy(AmrConfig(buffer=8, margin=6)).buffer(1) == 8
    with pytest.raises(ValueError):
        hierarchy(AmrConfig(buffer=5)).buffer(1)
    hd = hierarchy(params=CosmoParams(N=256, dissipation=0.1), config=AmrConfig(margin=8))
    assert hd.buffer(1) == 12


def _sine(N, x):
    return np.sin(2 * np.pi * x / N)


def test_prolonged_buffer_is_second_order():
    def err(Nc):
        Nf = 2 * Nc
        parent = np.zeros((NFIELDS, Nc))
        parent[:] = _sine(Nc, np.arange(Nc))
        lo, hi, G = Nf // 4, Nf // 2, 12
        patch = Patch(1, lo, hi, np.zeros((NFIELDS, hi - lo)))
        ext = taper_fill(patch, [], [Patch(0, 0, Nc, parent)], G, Nf)
        idx = np.concatenate([np.arange(lo - G, lo), np.arange(hi, hi + G)])
        want = _sine(Nf, idx)
        got = np.concatenate([ext[0, :G], ext[0, -G:]])
        return np.max(np.abs(got - want))

    assert 3.2 <= err(32) / err(64) <= 4.8


def test_taper_fill_requires_parent_time():
    patch = Patch(1, 8, 16, np.zeros((NFIELDS, 8)), t=1.0)
    with pytest.raises(TimeMismatch):
        taper_fill(patch, [], [Patch(0, 0, 16, np.zeros((NFIELDS, 16)), t=0.5)], 4, 32)


def test_restrict_of_a_prolonged_parent_changes_nothing():
    Nc = 32
    rng = np.random.default_rng(0)
    parent = Patch(0, 0, Nc, rng.normal(size=(NFIELDS, Nc)))
    lo, hi = 10, 31
    blank = Patch(1, lo, hi, np.zeros((NFIELDS, hi - lo)))
    j = np.arange(lo, hi) // 2
    odd = np.arange(lo, hi) % 2 == 1
    fine_u = parent.u[:, j].copy()
    fine_u[:, odd] = 0.5 * (parent.u[:, j[odd]] + parent.u[:, j[odd] + 1])
    out = restrict(replace(blank, u=fine_u), parent, Nc)
    assert np.array_equal(out.u, parent.u)


def test_restrict_of_random_data_injects_even_points():
    Nc = 32
    rng = np.random.default_rng(1)
    parent = Patch(0, 0, Nc, rng.normal(size=(NFIELDS, Nc)))
    lo, hi = 11, 40
    fine = Patch(1, lo, hi, rng.normal(size=(NFIELDS, hi - lo)))
    out = restrict(fine, parent, Nc)
    even = np.arange(12, hi, 2)
    assert np.array_equal(out.u[:, even // 2], fine.u[:, even - lo])
    untouched = np.setdiff1d(np.arange(Nc), even // 2)
    assert np.array_equal(out.u[:, untouched], parent.u[:, untouched])
    with pytest.raises(TimeMismatch):
        restrict(replace(fine, t=0.5), parent, Nc)


def test_flags_on_vacuum_are_empty():
    s = vacuum_state(P256)
    assert not flag_cells(level0_patches(s, 3), 256, 0.002, 4).any()


def test_zero_threshold_flags_everything():
    s = kink_init(P256)
    assert flag_cells(level0_patches(s, 1), 256, 0.0, 0).all()


def test_flags_form_one_cluster_per_wall():
    p = P256
    s = kink_init(p)
    tau, m, w = AmrConfig().threshold(p), 4, 10.0
    mask = flag_cells(level0_patches(s, 2), p.N, tau, m)
    runs = cluster_flags(mask, 2 * m)
    assert len(runs) == 2
    # half difference ~ dz * v/w * sech^2(x/w); solve for the flagged half width
    half = w * math.acosh(1.0 / math.sqrt(tau * w / (p.dz * p.v))) / p.dz
    for (lo, hi), centre in zip(runs, (100.0 / p.dz, 300.0 / p.dz)):
        assert lo <= centre < hi
        assert abs((hi - lo) - (2 * half + 1 + 2 * m)) <= 3


@settings(max_examples=200)
@given(st.lists(st.booleans(), min_size=4, max_size=80), st.integers(1, 8))
def test_clusters_cover_flags_and_keep_their_distance(bits, gap):
    mask = np.array(bits)
    N = mask.size
    runs = cluster_flags(mask, gap)
    covered = np.zeros(N, dtype=int)
    for lo, hi in runs:
        assert 0 <= lo < N and lo < hi <= lo + N
        covered[np.arange(lo, hi) % N] += 1
    assert (covered <= 1).all()
    assert not (mask & (covered == 0)).any()
    if len(runs) > 1:
        for (a_lo, a_hi), (b_lo, _b_hi) in zip(runs, runs[1:] + [(runs[0][0] + N, 0)]):
            assert b_lo - a_hi >= gap


def test_no_flags_collapses_to_level_zero():
    h = hierarchy(init=vacuum_state)
    assert h.depth == 1
    h2 = hierarchy()
    assert h2.depth == 2
    vac = h2.with_patches({(lv, i): vacuum_state(h2.level_params(lv)).u[:, np.arange(p.lo, p.hi)
                                                                       % h2.N(lv)]
                           for lv, ps in enumerate(h2.levels) for i, p in enumerate(ps)}, 0.0)
    assert regrid(vac).depth == 1


def test_two_walls_give_two_disjoint_patches():
    h = hierarchy()
    assert len(h.levels[1]) == 2
    (a_lo, a_hi), (b_lo, b_hi) = [(p.lo, p.hi) for p in h.levels[1]]
    assert a_hi < b_lo


def test_regrid_is_idempotent_on_static_flags():
    h = hierarchy(AmrConfig(coarse_patches=3, max_patch_cells=24))
    once = regrid(h)
    twice = regrid(once)
    assert once.layout() == twice.layout() == h.layout()
    assert hierarchy_difference(once, twice) == 0.0


def test_regrid_copies_old_fine_data():
    h = hierarchy()
    h2 = regrid(h)
    assert hierarchy_difference(h, h2) == 0.0


def test_nesting_violation_is_detected():
    p = P256
    s = kink_init(p)
    coarse = [Patch(0, 0, 256, s.u.copy())]
    fine = kink_init(p.refined()).u
    ok = Patch(1, 100, 140, fine[:, 100:140].copy())
    LevelHierarchy(p, AmrConfig(max_level=2), [coarse, [ok]])
    inner = Patch(2, 2 * 100 + 2, 2 * 100 + 12, np.zeros((NFIELDS, 10)))
    with pytest.raises(NestingError):
        LevelHierarchy(p, AmrConfig(max_level=2), [coarse, [ok], [inner]])
    with pytest.raises(NestingError):
        LevelHierarchy(p, AmrConfig(), [coarse, [ok], [inner]])


def test_nesting_and_times_hold_after_every_regrid():
    cfg = AmrConfig(max_level=2, regrid_interval=2, coarse_patches=2)
    seen = []

    def check(h):
        h.check_nesting()
        h.check_times()
        seen.append(h.layout())

    h, _ = evolve_hierarchy(hierarchy(cfg), 8, on_regrid=check)
    assert len(seen) == 3 and h.depth == 3
    for lv in h.levels:
        for p in lv:
            assert abs(p.t - h.t) <= 1e-14 * h.t
    assert h.t == pytest.approx(8 * P256.dt, rel=1e-14)


def test_level_zero_only_is_the_unigrid_solver():
    cfg = AmrConfig(max_level=0, coarse_patches=5)
    h, diags = evolve_hierarchy(hierarchy(cfg), 12)
    ref, ref_diags = evolve_unigrid(kink_init(P256), P256, 12)
    assert np.array_equal(h.state().u, ref.u)
    assert diags == ref_diags


def test_whole_domain_refinement_is_the_fine_unigrid():
    cfg = AmrConfig(refine_all=True, coarse_patches=2)
    h, _ = evolve_hierarchy(hierarchy(cfg), 4)
    assert h.layout()[-1][1:] == (0, 512)
    fine = P256.refined()
    ref, _ = evolve_unigrid(kink_init(fine), fine, 8, with_diagnostics=False)
    assert np.max(np.abs(h.level_array(1) - ref.u)) <= 1e-12


def test_dag_equals_the_recursive_schedule_bit_for_bit():
    cfg = AmrConfig(max_level=2, coarse_patches=3, max_patch_cells=40)
    h = hierarchy(cfg)
    dag, _ = evolve_hierarchy(h, 3)
    rec = evolve_recursive(h, 3)
    assert hierarchy_difference(dag, rec) == 0.0


def test_dataflow_execution_matches_sequential(runtime_factory):
    cfg = AmrConfig(max_level=2, coarse_patches=4, max_patch_cells=32)
    h = hierarchy(cfg)
    seq, _ = evolve_hierarchy(h, 5)
    for kind, workers in (("global", 1), ("local", 4)):
        rt = runtime_factory(kind, workers)
        par, _ = evolve_hierarchy(h, 5, executor=LocalExecutor(rt, timeout=60))
        assert hierarchy_difference(par, seq) == 0.0


def test_taper_width_is_not_the_accuracy_bottleneck():
    base = AmrConfig(margin=6)
    h6, _ = evolve_hierarchy(hierarchy(base), 8)
    h8, _ = evolve_hierarchy(hierarchy(replace(base, buffer=8)), 8)
    assert h6.layout() == h8.layout()
    assert hierarchy_difference(h6, h8) <= 1e-13


def test_refined_solution_stays_within_the_truncation_envelope():
    steps = 32
    h, _ = evolve_hierarchy(hierarchy(AmrConfig(regrid_interval=4)), steps)
    coarse, _ = evolve_unigrid(kink_init(P256), P256, steps, with_diagnostics=False)
    fine_p = P256.refined()
    fine, _ = evolve_unigrid(kink_init(fine_p), fine_p, 2 * steps, with_diagnostics=False)
    envelope = np.max(np.abs(coarse.phi - fine.phi[::2]))
    mask = h.coverage(1)
    diff = np.max(np.abs(h.level_array(1)[PHI, mask] - fine.phi[mask]))
    assert diff <= 2.0 * envelope


def test_plan_survives_a_json_roundtrip():
    h = hierarchy(AmrConfig(coarse_patches=2))
    plan = build_plan(h, 2)
    back = Plan.from_json(plan.to_json())
    assert back.to_json() == plan.to_json()
    a, _ = collect(plan, run_plan_sequential(plan, initial_values(h, plan)))
    b, _ = collect(back, run_plan_sequential(back, initial_values(h, back)))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_singular_patch_is_identified():
    h = hierarchy()
    fine = h.levels[1][1]
    fine.u[B, 10] = 0.0
    with pytest.raises(PatchSingular) as info:
        evolve_hierarchy(h, 1)
    assert (info.value.level, info.value.lo, info.value.hi) == (1, fine.lo, fine.hi)


def test_patches_follow_the_walls():
    cfg = AmrConfig(max_level=2, regrid_interval=2)
    walls = []

    def record(h):
        walls.append((h.diagnostics()["wall_position"], h.coverage(2)))

    evolve_hierarchy(hierarchy(cfg), 12, on_regrid=record)
    assert walls
    for z, cov in walls:
        i = int(round(z / (P256.dz / 4)))
        assert cov[i]


def test_layout_csv(tmp_path):
    h = hierarchy()
    h.write_layout_csv(tmp_path / "l.csv")
    lines = open(tmp_path / "l.csv").read().split()
    assert lines[0] == "level,i_lo,i_hi,t" and len(lines) == 1 + len(h.layout())

import dataclasses
import math

import numpy as np
import pytest

from liquidation.config import build_scenario, default_document
from liquidation.verify import (FAIL, INCONCLUSIVE, PASS, CheckReport, Verification, _guard,
                                check_bellman, check_concavity, check_continuity,
                                check_sandwich, superlinear_threshold_literal, run_verification)


def test_report_verdict_from_margin():
    assert CheckReport("a", "", 1, -0.01, 0.02).verdict == PASS
    assert CheckReport("a", "", 1, -0.03, 0.02, 0.005).verdict == FAIL
    assert CheckReport("a", "", 1, -0.03, 0.02, 0.02).verdict == PASS
    assert CheckReport("a", "", 1, -math.inf, 1e9).verdict == FAIL


def test_inconclusive_does_not_fail_the_suite():
    reports = [CheckReport("a", "", 1, 0.0, 0.0),
               CheckReport("b", "", 1, 0.0, 0.0, verdict=INCONCLUSIVE)]
    assert Verification(reports, None, None).passed
    reports.append(CheckReport("c", "", 1, -1.0, 0.0))
    assert not Verification(reports, None, None).passed


def test_guard_turns_errors_into_failures():
    def boom():
        raise RuntimeError("nope")

    rep = _guard("x", boom)
    assert rep.verdict == FAIL and "nope" in rep.details["error"]


def test_literal_threshold_formula():
    class Imp:
        lam, p = 0.5, 2.0

    assert superlinear_threshold_literal(Imp, 0.1, 1.0) == pytest.approx(1 / 0.2)


def _probe(jump):
    def probe(T, X0, R0):
        return T + 0.5 * R0 + (jump if T > 1.0 else 0.0)
    return probe


def test_continuity_accepts_continuous_values():
    rep = check_continuity(_probe(0.0), 1.0, [1.0], 0.0, terms=6)
    assert rep.passed
    assert rep.details["R_above"]["gaps"][-1] == pytest.approx(0.5 * 2.0 ** -6)


def test_continuity_rejects_a_jump():
    rep = check_continuity(_probe(0.3), 1.0, [1.0], 0.0, terms=6)
    assert rep.verdict == FAIL


def test_surface_checks_pass_on_benchmark_surface(cara_surface):
    assert check_concavity(cara_surface, 300, seed=1, tol=1e-3).passed
    rep = check_bellman(cara_surface, 0.05, n_nodes=40, n_layers=4)
    assert rep.passed and rep.details["max_residual"] < 0.05


def test_sandwich_detects_a_corrupted_surface(small_surface):
    good = check_sandwich(small_surface, 0.05, N_cara=16)
    phi = small_surface.log_gap.copy()
    n = small_surface.grid.n_layers
    phi[n][np.isfinite(phi[n])] += 5.0
    bad = check_sandwich(dataclasses.replace(small_surface, log_gap=phi), 0.05, N_cara=16)
    assert bad.verdict == FAIL
    assert bad.details["violations"] > 50 * max(1, good.details["violations"])
    assert bad.worst_margin < good.worst_margin


def test_concavity_detects_convex_bump(small_surface):
    phi = small_surface.log_gap + 3 * np.sin(np.arange(small_surface.grid.r_grid.size))
    rep = check_concavity(dataclasses.replace(small_surface, log_gap=phi), 300, seed=0)
    assert rep.verdict == FAIL


@pytest.fixture(scope="module")
def tiny_doc():
    doc = default_document()
    doc["grid"].update(L=3, N_r=16.0, x_box=[[-2.0, 12.0, 0.5]])
    doc["sim"]["n_paths"] = 2000
    doc["verify"].update(concavity_segments=100, bellman_nodes=20, bellman_layers=2,
                         pathwise_paths=200, pathwise_pairs=3, cara_steps=8, refine=False,
                         continuity_L=3, continuity_terms=4)
    return doc


def test_verification_runs_every_check_and_is_reproducible(tiny_doc, tmp_path):
    a = run_verification(build_scenario(tiny_doc), out_dir=tmp_path / "a")
    b = run_verification(build_scenario(tiny_doc), out_dir=tmp_path / "b")
    names = [r.name for r in a.reports]
    assert names == ["sandwich", "concavity", "initial_condition", "derivative_r",
                     "second_derivative_r", "budget", "exp_moment", "pathwise_bounds",
                     "bellman", "continuity"]
    for name in ("scoreboard.csv", "scoreboard.txt", "checks.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.surface.content_hash() == b.surface.content_hash()
    assert a.scoreboard_csv().startswith("check,anchor,n_points,worst_margin")
    assert a.scoreboard_csv().count("\r\n") == len(names) + 1

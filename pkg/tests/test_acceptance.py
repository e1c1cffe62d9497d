"""End-to-end acceptance checks, one test (or group) per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from clocktree import cli, coarse
from clocktree.boundary_law import detailed_balance_error, stationarity_error, verify_localization
from clocktree.model import build_model, epsilon_norm, epsilon_sandwich
from clocktree.sim import overlap_experiment, default_overlap_spacings, ea_parameter, reconstruction_experiment, root_posterior
from clocktree.subtree import grow_random
from clocktree.trees import truncated_tree
from oracles import (
    brute_coarse_moment,
    brute_exact_moment,
    brute_root_conditional,
    brute_root_posterior,
)

criterion = pytest.mark.criterion


def _say(num, ok, detail):
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} {detail}")


@criterion(1, "epsilon sandwich on 20 admissible models")
def test_01_epsilon_sandwich():
    start = time.perf_counter()
    grid = list(itertools.product([3, 4, 5, 6, 8], [2, 3], [0.5, 4.0]))
    assert len(grid) == 20
    worst = math.inf
    for q, d, beta in grid:
        ubar = [0.0] + [1 + 0.3 * k / q for k in range(1, q // 2 + 1)]
        m = build_model(q, d, beta, ubar)
        eps = epsilon_norm(m)
        lo, hi = epsilon_sandwich(m)
        assert lo <= eps <= hi, (q, d, beta, lo, eps, hi)
        worst = min(worst, hi - eps, eps - lo)
    elapsed = time.perf_counter() - start
    _say(1, True, f"min slack {worst:.3g}, {elapsed:.3f}s")
    assert elapsed < 1


@criterion(2, "localization bounds at beta=6")
def test_02_localization(potts_chain):
    start = time.perf_counter()
    m, spec, b = potts_chain(6.0)
    rep = verify_localization(spec, m, b)
    margins = {k: rep["bounds"][k]["margin"] for k in ("i", "ii", "iii", "iv")}
    _say(2, rep["all_pass"], f"margins {margins} residual {spec.residual:.2g}")
    assert rep["conditioned"]
    assert all(v > 0 for v in margins.values())
    assert spec.residual <= 1e-10
    assert detailed_balance_error(spec) <= 1e-10
    assert stationarity_error(spec) <= 1e-10
    assert time.perf_counter() - start < 5


@criterion(3, "chain measure is consistent with the Gibbs specification")
def test_03_dlr(potts_chain):
    m, spec, _ = potts_chain(3.0)
    tree = truncated_tree(2, 2)
    Qm = np.exp(m.log_Q_matrix)
    worst = 0.0
    # single site given its neighbours
    for nb in itertools.product(range(3), repeat=3):
        want = np.prod([Qm[:, j] for j in nb], axis=0)
        got = brute_root_conditional(spec, tree, list(nb))
        worst = max(worst, float(np.abs(got - want / want.sum()).max()))
    # root given the depth-2 boundary, against the Q-weighted enumeration
    gibbs = SimpleNamespace(q=3, pi=np.ones(3), P=Qm)
    for bd in itertools.islice(itertools.product(range(3), repeat=6), 0, 729, 7):
        bd = np.array(bd)
        got = brute_root_posterior(spec, tree, bd)
        want = brute_root_posterior(gibbs, tree, bd)
        worst = max(worst, float(np.abs(got - want).max()))
    _say(3, worst <= 1e-10, f"max deviation {worst:.2g}")
    assert worst <= 1e-10


def _subtrees(n=50, seed=2024):
    rng = np.random.default_rng(seed)
    return [grow_random(2, int(rng.integers(1, 9)), rng) for _ in range(n)]


@criterion(4, "exact moment dominated by the coarse moment")
@pytest.mark.parametrize("beta", [2.0, 6.0, 60.0])
def test_04_coarse_domination(potts_chain, beta):
    start = time.perf_counter()
    _, spec, _ = potts_chain(beta)
    worst = -math.inf
    for g in _subtrees():
        for t in (0.0, 0.5, 1.0, 2.0):
            le = coarse.log_exact_moment(spec, g, t)
            lc = coarse.log_coarse_moment(spec, g, t)
            worst = max(worst, le - lc)
            assert le <= lc + math.log1p(1e-9)
    _say(4, True, f"beta={beta} max log(exact/coarse) {worst:.3g}")
    assert time.perf_counter() - start < 30


@criterion(5, "coarse moment under the propagation bound")
@pytest.mark.parametrize("beta", [2.0, 6.0, 60.0])
def test_05_propagation(potts_chain, beta):
    start = time.perf_counter()
    _, spec, b = potts_chain(beta)
    for g in _subtrees():
        for t in (0.0, 0.5, 1.0, 2.0):
            assert coarse.log_coarse_moment(spec, g, t) <= coarse.log_propagation_bound(g.size, b, t)
    _say(5, True, f"beta={beta}")
    assert time.perf_counter() - start < 10


@criterion(6, "closed-form tilt minimises h")
@pytest.mark.parametrize("beta", [2.0, 60.0, 200.0])
def test_06_minimizer(potts_chain, beta):
    start = time.perf_counter()
    _, _, b = potts_chain(beta)
    for size in (1, 2, 5, 10, 25, 50):
        raw, _ = coarse.optimal_t(size, b)

        def h(t):
            return math.exp(float(coarse.log_h(t, size, b)))

        step = 1e-5
        deriv = (h(raw + step) - h(raw - step)) / (2 * step)
        assert abs(deriv) <= 1e-6 * h(raw)
        for t in np.linspace(raw - 1, raw + 1, 41):
            assert h(raw) <= h(t)
    _say(6, True, f"beta={beta}")
    assert time.perf_counter() - start < 1


@criterion(7, "bad-event chain and Monte Carlo agreement")
@pytest.mark.parametrize("beta", [60.0, 200.0])
def test_07_bad_event_chain(potts_chain, beta):
    _, spec, b = potts_chain(beta)
    assert b.lambda_beta > 0
    rng = np.random.default_rng(77)
    slack = math.log1p(1e-9)
    for size in (1, 2, 3, 4, 5):
        for _ in range(4):
            g = grow_random(2, size, rng)
            assert g.closure_size <= 12
            p = coarse.exact_bad_probability(spec, g, b.delta0)
            _, t = coarse.optimal_t(size, b)
            lm = math.log(coarse.markov_bound(spec, g, b.delta0, t))
            assert p == 0 or math.log(p) <= lm + slack
            assert lm <= coarse.bad_event_bound(size, b).log_final + slack
    _say(7, True, f"chain holds at beta={beta}, lambda={b.lambda_beta:.3f}")


@criterion(7, "bad-event chain and Monte Carlo agreement")
@pytest.mark.parametrize("beta", [2.0, 60.0])
def test_07_monte_carlo_agreement(beta):
    start = time.perf_counter()
    raw = {"q": 3, "d": 2, "beta": beta, "ubar": [0, 1], "A": [0, 1], "experiment": "badprob",
           "samples": 100000, "seed": 11, "gamma_sizes": [1, 2, 3, 5, 10, 20, 50]}
    report, _ = cli.run_experiment(raw, workers=4)
    for e in report["subtrees"]:
        assert e["agrees_with_exact"], e
    detail = ", ".join(f"|g|={e['gamma_size']}: {e['estimate']:.4g} vs {e['exact']:.4g}" for e in report["subtrees"])
    _say(7, True, f"beta={beta} {detail}")
    assert time.perf_counter() - start < 120


@criterion(8, "reconstruction failure rate under 2|A| eps2")
def test_08_reconstruction(potts_chain):
    start = time.perf_counter()
    m, spec, b = potts_chain(200.0)
    assert 2 * len(spec.A) * b.eps2 < 1
    rep, _ = reconstruction_experiment(spec, m, 0, 8, 2000, seed=8, workers=4)
    _say(8, rep["pass"], f"failure {rep['failure_frequency']} +- {rep['ci_halfwidth']:.3g} vs bound {rep['bound']:.4g}")
    assert rep["pass"]
    assert time.perf_counter() - start < 120


@criterion(8, "reconstruction failure rate under 2|A| eps2")
def test_08_control_outside_A(potts_chain):
    m, spec, _ = potts_chain(2.0)
    rep, _ = reconstruction_experiment(spec, m, 2, 8, 2000, seed=8, workers=4)
    means = rep["mean_posterior_by_depth"]
    _say(8, rep["strictly_decreasing_from_depth2"], "control a=2 at beta=2: " + ", ".join(f"{x:.4g}" for x in means))
    assert rep["pass"] is None
    assert all(a > b for a, b in zip(means[1:], means[2:]))


@criterion(9, "Edwards-Anderson parameter is positive")
def test_09_ea(potts_chain):
    start = time.perf_counter()
    m, spec, _ = potts_chain(200.0)
    rep, _ = ea_parameter(spec, m, 8, 2000, seed=9, workers=4)
    _say(9, rep["positive"], f"EA {rep['estimate']:.5g} +- {rep['ci_halfwidth']:.2g}, lower bound {rep['lower_bound']:.4g}")
    assert rep["estimate"] - rep["ci_halfwidth"] > 0
    assert "lower_bound" in rep and rep["consistent_with_bound"]
    assert time.perf_counter() - start < 180


@criterion(10, "thinned-branch overlap laws")
def test_10_overlaps(potts_chain):
    start = time.perf_counter()
    m, spec, _ = potts_chain(200.0)
    rep, _ = overlap_experiment(spec, m, default_overlap_spacings(5), 5, 8, 2000, seed=10, workers=4)
    _say(10, rep["pass"], f"independent {rep['indep_mean']:.4g} +- {rep['indep_ci_halfwidth']:.2g} vs "
         f"{rep['indep_target']:.4g}; same {rep['same_mean']:.4g} vs {rep['same_lower_bound']:.4g}")
    assert abs(rep["indep_mean"] - rep["indep_target"]) <= rep["indep_ci_halfwidth"]
    assert rep["same_mean"] + rep["same_ci_halfwidth"] >= rep["same_lower_bound"]
    assert time.perf_counter() - start < 180


@criterion(11, "dynamic programs match brute-force enumeration")
def test_11_oracles(potts_chain):
    _, spec, _ = potts_chain(2.0)
    rng = np.random.default_rng(11)
    worst = 0.0
    for size in (1, 2, 3):
        g = grow_random(2, size, rng)
        assert g.closure_size <= 8
        for t in (0.0, 0.5, 2.0):
            a, b = coarse.exact_moment(spec, g, t), brute_exact_moment(spec, g, t)
            worst = max(worst, abs(a - b) / b)
    for size in (1, 3, 5):
        g = grow_random(2, size, rng)
        assert g.closure_size <= 12
        for t in (0.0, 1.0):
            M = coarse.coarse_matrix(spec, t).M
            a, b = coarse.coarse_moment(spec, g, t), brute_coarse_moment(spec, g, M)
            worst = max(worst, abs(a - b) / b)
    for depth in (1, 2):
        tree = truncated_tree(2, depth)
        for _ in range(8):
            bd = rng.integers(0, 3, tree.level_sizes[depth])
            diff = np.abs(root_posterior(spec, bd, depth) - brute_root_posterior(spec, tree, bd)).max()
            worst = max(worst, float(diff))
    _say(11, worst <= 1e-10, f"max deviation {worst:.2g}")
    assert worst <= 1e-10


@criterion(12, "stochastic commands are byte-for-byte reproducible")
@pytest.mark.parametrize("experiment", cli.EXPERIMENTS)
def test_12_determinism(tmp_path, experiment):
    cfg = {"q": 3, "d": 2, "beta": 6.0, "ubar": [0, 1], "A": [0, 1], "experiment": experiment,
           "seed": 1234, "samples": 600, "depth": 3, "n": 2, "gamma_sizes": [1, 3, 10]}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outputs = []
    for run, workers in enumerate((1, 1, 4)):
        out = tmp_path / f"run{run}"
        code = cli.main(["experiment", "--config", str(path), "--out", str(out), "--workers", str(workers)])
        assert code in (0, 2)
        outputs.append(((out / "report.json").read_bytes(), (out / "samples.csv").read_bytes()))
    same = outputs[0] == outputs[1] == outputs[2]
    _say(12, same, experiment)
    assert same

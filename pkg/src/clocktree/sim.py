"""Monte Carlo on finite trees: broadcasting, exact posteriors, experiments.

Samples are processed in fixed-size chunks.  Chunk ``k`` draws from its own
generator ``SeedSequence(seed, spawn_key=(k,))`` and results are stitched
together in chunk order, so every report is a function of ``(seed,
samples)`` only, whatever the number of worker threads.

Posteriors are computed from the chain itself (root weight ``pi``, edge
kernel ``P``).  For a chain coming from a boundary law this coincides with
the Gibbs posterior built from ``Q`` alone, because the boundary-law factors
of interior vertices cancel; ``root_posterior`` accepts either source.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .boundary_law import ChainSpec
from .coarse import irregular_mask
from .model import ClockModel, constants
from .subtree import SubTree
from .trees import LayeredTree, branch_levels, caterpillar, thinned_spacings, truncated_tree

CHUNK = 256
# posterior variances below this are float64 rounding noise, not signal
EA_FLOOR = 1e-20
Z95 = float(norm.ppf(0.975))


# ---------------------------------------------------------------- plumbing


def chunk_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def _chunked(samples: int, chunk: int = CHUNK) -> list[tuple[int, int]]:
    return [(i, min(chunk, samples - i * chunk)) for i in range((samples + chunk - 1) // chunk)]


def _run_chunks(fn, samples: int, seed: int, workers: int = 1, chunk: int = CHUNK) -> list:
    """Apply ``fn(rng, size)`` to every chunk and return results in chunk order."""
    jobs = _chunked(samples, chunk)

    def one(job):
        idx, size = job
        return fn(chunk_rng(seed, idx), size)

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def wilson_interval(successes: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z / den * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def _draw(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw, one categorical per row of ``cdf_rows``."""
    return (u[..., None] > cdf_rows).sum(axis=-1)


def _cdf(prob: np.ndarray) -> np.ndarray:
    c = np.cumsum(prob, axis=-1)
    c[..., -1] = 2.0  # guards against rounding in the last bin
    return c


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class SpinConfiguration:
    tree: LayeredTree
    spins: np.ndarray  # global numbering, level by level
    seed: int

    def level(self, k: int) -> np.ndarray:
        return self.spins[self.tree.offsets[k]: self.tree.offsets[k + 1]]


def broadcast(spec: ChainSpec, tree: LayeredTree, rng: np.random.Generator, size: int, root=None) -> list[np.ndarray]:
    """Draw ``size`` configurations; returns one ``(size, n_k)`` array per level."""
    P_cdf = _cdf(spec.P)
    if root is None:
        r = _draw(_cdf(spec.pi)[None, :], rng.random(size)[:, None])[:, 0]
    else:
        r = np.full(size, int(root))
    levels = [r[:, None]]
    for k in range(1, tree.depth + 1):
        par = levels[-1][:, tree.parents[k]]
        u = rng.random(par.shape)
        levels.append(_draw(P_cdf[par], u))
    return levels


def sample_broadcast(spec: ChainSpec, depth: int, seed: int, d: int | None = None) -> SpinConfiguration:
    d = d if d is not None else spec.d
    tree = truncated_tree(d, depth)
    levels = broadcast(spec, tree, chunk_rng(seed, 0), 1)
    return SpinConfiguration(tree, np.concatenate([lv[0] for lv in levels]), int(seed))


def irregular_edges(config: SpinConfiguration, A) -> np.ndarray:
    """Edges whose endpoints disagree or touch a spin outside ``A``."""
    edges = config.tree.edges()
    q = int(max(config.spins.max(), max(A))) + 1
    mask = irregular_mask(q, A)
    s = config.spins
    return edges[mask[s[edges[:, 0]], s[edges[:, 1]]]]


def sample_on_subtree(spec: ChainSpec, subtree: SubTree, rng: np.random.Generator, size: int) -> np.ndarray:
    """Chain samples on the closure of a subtree, shape ``(size, |closure|)``."""
    cp = subtree.closure_parent
    P_cdf = _cdf(spec.P)
    out = np.empty((size, len(cp)), dtype=np.int64)
    out[:, 0] = _draw(_cdf(spec.pi)[None, :], rng.random(size)[:, None])[:, 0]
    for v in range(1, len(cp)):
        out[:, v] = _draw(P_cdf[out[:, cp[v]]], rng.random(size))
    return out


# ---------------------------------------------------------------- posteriors


def _kernel(source) -> tuple[np.ndarray, np.ndarray]:
    """(log root weight, log edge kernel) from a chain or a model."""
    if isinstance(source, ChainSpec):
        return source.logpi, source.logP
    if isinstance(source, ClockModel):
        return np.zeros(source.q), source.log_Q_matrix
    raise TypeError(f"expected ChainSpec or ClockModel, got {type(source).__name__}")


def _log_kernel_apply(log_K: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``log sum_j K(i, j) exp(m[..., j])`` for messages with max 0.

    A plain matrix product does almost all the work; entries that underflow
    there are recomputed exactly in log space.
    """
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(m) @ np.exp(log_K).T)
    tiny = ~(out > -700.0)
    if tiny.any():
        idx = np.nonzero(tiny)
        rows = m[idx[:-1]]
        out[idx] = logsumexp(log_K[idx[-1]] + rows, axis=-1)
    return out


def upward_messages(tree: LayeredTree, levels: list[np.ndarray], log_K: np.ndarray, cut: int | None = None) -> list:
    """Log messages towards the root with the spins of all leaves observed.

    With ``cut`` the tree is treated as ending at that level and the whole
    level ``cut`` is observed.  Messages are shifted so their max is 0.
    """
    cut = tree.depth if cut is None else cut
    q = log_K.shape[0]
    S = levels[0].shape[0]
    msgs: list = [None] * (cut + 1)
    below = None
    for k in range(cut, -1, -1):
        n = len(tree.parents[k])
        m = np.zeros((S, n, q))
        leaf = np.ones(n, dtype=bool) if k == cut else tree.leaves(k)
        if leaf.any():
            obs = levels[k][:, leaf]
            pm = np.full(obs.shape + (q,), -np.inf)
            np.put_along_axis(pm, obs[..., None], 0.0, axis=-1)
            m[:, leaf, :] = pm
        if below is not None:
            contrib = _log_kernel_apply(log_K, below)
            par = tree.parents[k + 1]
            starts = np.flatnonzero(np.r_[True, par[1:] != par[:-1]])
            m[:, par[starts], :] += np.add.reduceat(contrib, starts, axis=1)
            m -= m.max(axis=-1, keepdims=True)
        msgs[k] = m
        below = m
    return msgs


def _log_root_posterior(log_root, msgs) -> np.ndarray:
    lp = log_root[None, :] + msgs[0][:, 0, :]
    return lp - logsumexp(lp, axis=-1, keepdims=True)


def root_posterior(source, boundary, depth: int, d: int | None = None) -> np.ndarray:
    """Conditional law of the root given the spins at ``depth``.

    ``source`` is a ``ChainSpec`` or a ``ClockModel``; ``boundary`` lists the
    spins of level ``depth`` of the truncated tree in level order.
    """
    if d is None:
        d = source.d
    tree = truncated_tree(d, depth)
    boundary = np.asarray(boundary, dtype=np.int64)
    if boundary.shape[-1] != len(tree.parents[depth]):
        raise ValueError(f"boundary needs {len(tree.parents[depth])} spins, got {boundary.shape[-1]}")
    log_root, log_K = _kernel(source)
    levels = [np.zeros((1, len(p)), dtype=np.int64) for p in tree.parents]
    levels[depth] = boundary.reshape(1, -1)
    msgs = upward_messages(tree, levels, log_K)
    return np.exp(_log_root_posterior(log_root, msgs))[0]


def sample_from_posterior(tree, levels, msgs, log_root, log_K, rng) -> list[np.ndarray]:
    """Draw interior spins from the conditional law given the observed leaves."""
    S = levels[0].shape[0]
    lp = _log_root_posterior(log_root, msgs)
    out = [_draw(_cdf(np.exp(lp)), rng.random(S))[:, None]]
    for k in range(1, tree.depth + 1):
        par = out[-1][:, tree.parents[k]]
        logits = log_K[par] + msgs[k]
        w = np.exp(logits - logits.max(axis=-1, keepdims=True))
        draw = _draw(_cdf(w / w.sum(axis=-1, keepdims=True)), rng.random(par.shape))
        leaf = tree.leaves(k)
        draw[:, leaf] = levels[k][:, leaf]
        out.append(draw)
    return out


# ---------------------------------------------------------------- experiments


def _bundle(model: ClockModel, spec: ChainSpec):
    return constants(model, len(spec.A))


def estimate_bad_probability(
    spec: ChainSpec, subtree: SubTree, delta0: float, samples: int, seed: int, workers: int = 1
) -> dict:
    """Frequency of at least ``delta0 |gamma|`` irregular edges, Wilson 95%."""
    mask = irregular_mask(spec.q, spec.A)
    cp = np.asarray(subtree.closure_parent)
    thr = delta0 * subtree.size

    def run(rng, size):
        s = sample_on_subtree(spec, subtree, rng, size)
        count = mask[s[:, cp[1:]], s[:, 1:]].sum(axis=1)
        return int(np.count_nonzero(count >= thr))

    hits = sum(_run_chunks(run, samples, seed, workers))
    lo, hi = wilson_interval(hits, samples)
    est = hits / samples
    return {
        "gamma_size": subtree.size,
        "samples": samples,
        "seed": int(seed),
        "hits": hits,
        "estimate": est,
        "ci_low": lo,
        "ci_high": hi,
        "ci_halfwidth": max(est - lo, hi - est),
    }


def reconstruction_experiment(
    spec: ChainSpec, model: ClockModel, a: int, depth: int, samples: int, seed: int, workers: int = 1
) -> tuple[dict, list[dict]]:
    """Root fixed to ``a``; how often does the depth-``depth`` posterior miss it?

    A miss is ``posterior(a) < 1 - eps1``, tested as
    ``log(1 - posterior(a)) > log eps1`` so it survives at large beta.
    Posteriors for every truncation depth ``1..depth`` are computed from the
    same broadcast to show how the signal fades.
    """
    b = _bundle(model, spec)
    tree = truncated_tree(spec.d, depth)
    others = [j for j in range(spec.q) if j != a]

    def run(rng, size):
        levels = broadcast(spec, tree, rng, size, root=a)
        post_by_depth = []
        for k in range(1, depth + 1):
            post_by_depth.append(_log_root_posterior(spec.logpi, upward_messages(tree, levels, spec.logP, cut=k)))
        return np.stack(post_by_depth, axis=1)  # (size, depth, q) log posteriors

    lp = np.concatenate(_run_chunks(run, samples, seed, workers), axis=0)
    final = lp[:, -1, :]
    log_miss = logsumexp(final[:, others], axis=-1)
    fail = log_miss > b.log_eps1
    k = int(fail.sum())
    lo, hi = wilson_interval(k, samples)
    freq = k / samples
    half = max(freq - lo, hi - freq)
    bound = 2 * len(spec.A) * b.eps2
    post = np.exp(lp)
    mean_by_depth = post[:, :, a].mean(axis=0)
    tv = 0.5 * np.abs(np.diff(post, axis=1)).sum(axis=-1).mean(axis=0) if depth > 1 else np.zeros(0)
    in_A = a in spec.A
    report = {
        "experiment": "reconstruct",
        "a": int(a),
        "a_in_A": in_A,
        "depth": depth,
        "samples": samples,
        "seed": int(seed),
        "eps1": b.eps1,
        "eps2": b.eps2,
        "bound": bound,
        "bound_vacuous": bool(bound >= 1 or b.lambda_beta <= 0),
        "failures": k,
        "failure_frequency": freq,
        "ci_low": lo,
        "ci_high": hi,
        "ci_halfwidth": half,
        "mean_posterior_by_depth": mean_by_depth.tolist(),
        "mean_tv_change_by_depth": tv.tolist(),
        "strictly_decreasing_from_depth2": bool(np.all(np.diff(mean_by_depth[1:]) < 0)),
        "pass": bool(freq - half <= bound) if in_A else None,
    }
    rows = [
        {"sample": i, "posterior_a": float(post[i, -1, a]), "log_miss": float(log_miss[i]), "fail": int(fail[i])}
        for i in range(samples)
    ]
    return report, rows


def _jackknife_ea(post: np.ndarray) -> tuple[float, float]:
    """EA estimate ``(1/q) sum_a Var(post_a)`` and its delete-one jackknife SE."""
    N, q = post.shape
    est = float(post.var(axis=0, ddof=1).mean())
    s1 = post.sum(axis=0)
    s2 = (post**2).sum(axis=0)
    loo_mean = (s1[None, :] - post) / (N - 1)
    loo_var = ((s2[None, :] - post**2) - (N - 1) * loo_mean**2) / (N - 2)
    theta = loo_var.mean(axis=1)
    se = math.sqrt((N - 1) / N * float(((theta - theta.mean()) ** 2).sum()))
    return est, se


def ea_parameter(
    spec: ChainSpec, model: ClockModel, depth: int, samples: int, seed: int, workers: int = 1
) -> tuple[dict, list[dict]]:
    """Monte Carlo Edwards-Anderson parameter at truncation depth ``depth``."""
    b = _bundle(model, spec)
    tree = truncated_tree(spec.d, depth)

    def run(rng, size):
        levels = broadcast(spec, tree, rng, size)
        return np.exp(_log_root_posterior(spec.logpi, upward_messages(tree, levels, spec.logP)))

    post = np.concatenate(_run_chunks(run, samples, seed, workers), axis=0)
    est, se = _jackknife_ea(post)
    ci = Z95 * se
    n = len(spec.A)
    lower = (1 / (2 * spec.q)) * ((1 - b.eps1) ** 2 * (1 - 2 * n * b.eps2) - (n - 1) / n)
    report = {
        "experiment": "ea",
        "depth": depth,
        "samples": samples,
        "seed": int(seed),
        "estimate": est,
        "ci_halfwidth": ci,
        "lower_bound": lower,
        "bound_vacuous": bool(lower <= 0),
        "positive": bool(est - ci > 0 and est > EA_FLOOR),
        "consistent_with_bound": bool(est + ci >= lower),
    }
    report["pass"] = report["positive"]
    rows = [{"sample": i, **{f"post_{j}": float(post[i, j]) for j in range(spec.q)}} for i in range(samples)]
    return report, rows


def overlap_experiment(
    spec: ChainSpec,
    model: ClockModel,
    spacings,
    n: int,
    depth: int,
    samples: int,
    seed: int,
    workers: int = 1,
) -> tuple[dict, list[dict]]:
    """Thinned-branch overlaps.

    The branch runs down the spine of a caterpillar whose side subtrees are
    ``depth`` deep; their leaves form the observed boundary.  ``spacings``
    must hold ``n^2 - 1`` gaps.
    """
    spacings = [int(r) for r in spacings]
    if len(spacings) != n * n - 1:
        raise ValueError(f"need {n * n - 1} spacings for n={n}, got {len(spacings)}")
    pts = branch_levels(spacings)
    tree = caterpillar(spec.d, pts[-1], depth)
    b = _bundle(model, spec)
    P_cdf = _cdf(spec.P)
    pi_cdf = _cdf(spec.pi)

    def run(rng, size):
        levels = broadcast(spec, tree, rng, size)
        msgs = upward_messages(tree, levels, spec.logP)
        sigma = sample_from_posterior(tree, levels, msgs, spec.logpi, spec.logP, rng)
        omega_b = np.stack([levels[k][:, 0] for k in pts], axis=1)
        sigma_b = np.stack([sigma[k][:, 0] for k in pts], axis=1)
        same = (omega_b == sigma_b).mean(axis=1)
        # an independent copy along the branch only needs the spine chain
        spine = [_draw(pi_cdf[None, :], rng.random(size)[:, None])[:, 0]]
        for _ in range(pts[-1]):
            spine.append(_draw(P_cdf[spine[-1]], rng.random(size)))
        spine = np.stack(spine, axis=1)
        indep = (omega_b == spine[:, pts]).mean(axis=1)
        return np.stack([same, indep], axis=1)

    res = np.concatenate(_run_chunks(run, samples, seed, workers), axis=0)
    same, indep = res[:, 0], res[:, 1]

    def mean_ci(x):
        return float(x.mean()), float(Z95 * x.std(ddof=1) / math.sqrt(len(x)))

    ms, cs = mean_ci(same)
    mi, ci = mean_ci(indep)
    target = float((spec.pi**2).sum())
    lower = 1 - b.eps1 - b.eps2
    report = {
        "experiment": "overlap",
        "n": n,
        "branch_points": len(pts),
        "spacings": spacings,
        "branch_levels": pts,
        "depth": depth,
        "samples": samples,
        "seed": int(seed),
        "same_mean": ms,
        "same_ci_halfwidth": cs,
        "same_lower_bound": lower,
        "same_pass": bool(ms + cs >= lower),
        "indep_mean": mi,
        "indep_ci_halfwidth": ci,
        "indep_target": target,
        "indep_pass": bool(abs(mi - target) <= ci),
    }
    report["pass"] = report["same_pass"] and report["indep_pass"]
    rows = [{"sample": i, "same": float(same[i]), "indep": float(indep[i])} for i in range(samples)]
    return report, rows


def _ball_order(adj, centre: int, radius: int):
    """BFS from ``centre`` up to ``radius``: order, BFS parent, distance."""
    order, par, dist = [centre], {centre: -1}, {centre: 0}
    i = 0
    while i < len(order):
        v = order[i]
        i += 1
        if dist[v] == radius:
            continue
        for w in adj[v]:
            if w not in dist:
                dist[w] = dist[v] + 1
                par[w] = v
                order.append(w)
    return order, par


def bad_indicator(adj, edge_index, irr: np.ndarray, centre: int, radius: int, delta0: float) -> np.ndarray:
    """Is there a connected gamma containing ``centre``, inside the ball, that is bad?

    Maximises ``#irregular(E(gamma)) - delta0 |gamma|`` by a tree DP: a vertex
    of gamma is charged for every edge except the one to its BFS parent.
    """
    order, par = _ball_order(adj, centre, radius)
    S = irr.shape[0]
    best = {}
    for v in reversed(order):
        g = np.full(S, -delta0)
        for w in adj[v]:
            if w != par[v]:
                g = g + irr[:, edge_index[frozenset((v, w))]]
        for w in adj[v]:
            if par.get(w) == v and w in best:
                g = g + np.maximum(0.0, best[w])
        best[v] = g
    return best[centre] >= 0


def covariance_decay(
    spec: ChainSpec,
    delta0: float,
    distances=(2, 4, 6, 8),
    radius: int = 2,
    samples: int = 20000,
    seed: int = 0,
    workers: int = 1,
) -> tuple[dict, list[dict]]:
    """Covariances of radius-truncated bad-vertex events along a path.

    Vertex pairs are ``(spine_0, spine_D)`` on a caterpillar rooted at the
    first vertex, deep enough to hold both balls of radius ``radius + 1``.
    """
    distances = [int(x) for x in distances]
    tree = caterpillar(spec.d, max(distances), radius + 1)
    edges = tree.edges()
    adj = [[] for _ in range(tree.n_vertices)]
    edge_index = {}
    for e, (p, c) in enumerate(edges):
        adj[p].append(int(c))
        adj[c].append(int(p))
        edge_index[frozenset((int(p), int(c)))] = e
    mask = irregular_mask(spec.q, spec.A)
    centres = [0] + [int(tree.global_id(D, 0)) for D in distances]

    def run(rng, size):
        levels = broadcast(spec, tree, rng, size)
        spins = np.concatenate(levels, axis=1)
        irr = mask[spins[:, edges[:, 0]], spins[:, edges[:, 1]]].astype(float)
        return np.stack([bad_indicator(adj, edge_index, irr, c, radius, delta0) for c in centres], axis=1)

    ind = np.concatenate(_run_chunks(run, samples, seed, workers), axis=0).astype(float)
    x = ind[:, 0]
    xc = x - x.mean()
    rows_out = []
    covs, ses = [], []
    for j, D in enumerate(distances, start=1):
        y = ind[:, j]
        prod = xc * (y - y.mean())
        cov = float(prod.sum() / (samples - 1))
        covs.append(cov)
        ses.append(float(prod.std(ddof=1) / math.sqrt(samples)))
    var = float(x.var(ddof=1))
    use = [(D, c) for D, c in zip(distances, covs) if c > 0]
    slope = float(np.polyfit([u for u, _ in use], [math.log(c) for _, c in use], 1)[0]) if len(use) >= 2 else float("nan")
    report = {
        "experiment": "covdecay",
        "radius": radius,
        "delta0": delta0,
        "samples": samples,
        "seed": int(seed),
        "distances": distances,
        "covariances": covs,
        "covariance_se": ses,
        "variance": var,
        "bad_frequency": float(x.mean()),
        "fitted_slope": slope,
        "decaying": bool(slope < 0),
        "within_quarter": bool(all(abs(c) <= 0.25 for c in covs + [var])),
        "pass": bool(slope < 0),
    }
    for i in range(samples):
        rows_out.append({"sample": i, **{f"bad_{c}": int(ind[i, j]) for j, c in enumerate(["x"] + distances)}})
    return report, rows_out


def default_overlap_spacings(n: int, kappa: int = 4) -> list[int]:
    return thinned_spacings(n, kappa)

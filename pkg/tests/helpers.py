"""Instance generation shared by the gradient tests."""
import numpy as np

from ibcsc.fista import FistaConfig, csc_solve
from ibcsc.tensor_ops import dict_analyze, dict_synthesize


def threshold_margin(X, K, lam, cfg):
    """Smallest | |g_k| - tau | over all steps: distance of the pre-threshold
    points from the kink of the soft threshold."""
    _, trace = csc_solve(X, K, lam, cfg, track_objective=False)
    tau = lam * cfg.threshold_scale
    step = 1.0 / cfg.lipschitz
    worst = np.inf
    for y in trace.ys:
        g = y - step * dict_analyze(K, dict_synthesize(K, y) - X)
        worst = min(worst, float(np.min(np.abs(np.abs(g) - tau))))
    return worst


def guarded_instance(rng, n=1, m=2, c=3, h=5, w=5, k=3, steps=2, margin=1e-3, lam_frac=0.3, tries=200):
    """Random (X, K, lam, cfg) whose unroll stays `margin` away from every
    threshold kink, so finite differences see a smooth function."""
    for _ in range(tries):
        K = rng.standard_normal((m, c, k, k)) / np.sqrt(c * k * k)
        X = rng.standard_normal((n, m, h, w))
        cfg = FistaConfig.for_dict(K, (h, w), steps=steps)
        g1 = dict_analyze(K, X) / cfg.lipschitz  # first pre-threshold point
        lam = float(lam_frac * np.abs(g1).max() / cfg.threshold_scale)
        if threshold_margin(X, K, lam, cfg) > margin:
            return X, K, lam, cfg
    raise RuntimeError("no boundary-guarded instance found")


# one (criterion, ok, detail) entry per acceptance check, echoed in the terminal summary
ACCEPTANCE = []


def record(criterion, ok, detail):
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok

"""Shared test utilities: finite-difference gradients and slow reference solvers."""

import numpy as np

from forecaster import autodiff as ad


def finite_difference_gradient(f, values, h=1e-5):
    """Central-difference gradient of scalar f at a numpy array, entry by entry."""
    values = np.asarray(values, dtype=np.float64)
    grad = np.zeros_like(values)
    flat = values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(values)
        flat[i] = orig - h
        lo = f(values)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, abs_floor=1e-7):
    """max over entries of |a-n| / max(|a|, |n|); tiny pairs count as zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    ok = (diff <= abs_floor) & (scale <= abs_floor)
    rel = np.where(ok, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max()) if rel.size else 0.0


def check_tensor_gradients(build_loss, tensors, h=1e-5, tol=1e-6):
    """Verify autodiff gradients of every tensor in ``tensors`` against FD.

    ``build_loss`` takes no arguments and returns a fresh scalar Tensor from
    the current tensor values. Returns the worst relative error seen.
    """
    loss = build_loss()
    for t in tensors.values():
        t.zero_grad()
    ad.backward(loss)
    worst = 0.0
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.values)

        def f(_values, _t=t):
            with ad.no_grad():
                return build_loss().item()

        numeric = finite_difference_gradient(f, t.values, h=h)
        err = max_relative_error(analytic, numeric)
        assert err < tol, f"gradient mismatch for {name}: {err}"
        worst = max(worst, err)
    return worst


def kkt_max_violation(s, q, penalty, penalize_diagonal=True):
    """Worst stationarity violation of the L1-penalized log-det problem.

    With W = S - Q^{-1}: entries where Q_ij != 0 must satisfy
    W_ij = -penalty * sign(Q_ij); entries with Q_ij == 0 need |W_ij| <= penalty.
    """
    s = np.asarray(s, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    w = s - np.linalg.inv(q)
    n = s.shape[0]
    worst = 0.0
    for i in range(n):
        for j in range(n):
            lam = penalty if (i != j or penalize_diagonal) else 0.0
            if q[i, j] != 0.0:
                worst = max(worst, abs(w[i, j] + lam * np.sign(q[i, j])))
            else:
                worst = max(worst, max(0.0, abs(w[i, j]) - lam))
    return worst


# ---------------------------------------------------------------------------
# independent graphical-lasso reference: coordinate descent with ternary search


def penalized_objective_reference(s, q, penalty):
    """tr(SQ) - logdet(Q) + penalty * ||Q||_1, +inf outside the PD cone."""
    sign, logdet = np.linalg.slogdet(q)
    if sign <= 0 or not np.isfinite(logdet):
        return np.inf
    return float(np.sum(s * q) - logdet + penalty * np.abs(q).sum())


def _ternary_min(f, lo, hi, iters=120):
    for _ in range(iters):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if f(m1) <= f(m2):
            hi = m2
        else:
            lo = m1
    return (lo + hi) / 2.0


def _feasible_bracket(f, v0, lo, hi, steps=60):
    """Shrink [lo, hi] to the interval where f is finite; f(v0) must be finite.

    The feasible set of a coordinate line through the positive-definite cone
    is an interval, so one bisection per side locates each boundary.
    """
    if np.isinf(f(lo)):
        a, b = lo, v0
        for _ in range(steps):
            mid = 0.5 * (a + b)
            if np.isinf(f(mid)):
                a = mid
            else:
                b = mid
        lo = b
    if np.isinf(f(hi)):
        a, b = v0, hi
        for _ in range(steps):
            mid = 0.5 * (a + b)
            if np.isinf(f(mid)):
                b = mid
            else:
                a = mid
        hi = a
    return lo, hi


def glasso_reference(s, penalty, sweeps=400, span=None):
    """Slow oracle for the graphical lasso: per-entry exact line search.

    Starts from a grid of diagonal initializers, then coordinate-descends on
    every free entry of the symmetric matrix (the objective is convex, so
    exact per-coordinate minimization converges to the global optimum).
    Returns (matrix, objective value).
    """
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    if span is None:
        span = 10.0 * max(1.0, 1.0 / max(np.diag(s).min(), 1e-3))

    best_q, best_val = None, np.inf
    for scale in (0.5, 1.0, 2.0):
        q0 = np.diag(scale / np.clip(np.diag(s), 1e-6, None))
        val = penalized_objective_reference(s, q0, penalty)
        if val < best_val:
            best_q, best_val = q0, val
    q = best_q.copy()

    coords = [(i, j) for i in range(n) for j in range(i, n)]
    prev = best_val
    for _ in range(sweeps):
        for i, j in coords:
            def f(v, i=i, j=j):
                trial = q.copy()
                trial[i, j] = trial[j, i] = v
                return penalized_objective_reference(s, trial, penalty)

            lo, hi = _feasible_bracket(f, q[i, j], -span if i != j else 1e-9, span)
            v = _ternary_min(f, lo, hi)
            # keep exact zeros reachable: the L1 kink is a candidate minimum
            if i != j and f(0.0) <= f(v):
                v = 0.0
            q[i, j] = q[j, i] = v
        val = penalized_objective_reference(s, q, penalty)
        if prev - val < 1e-12:
            break
        prev = val
    return q, penalized_objective_reference(s, q, penalty)

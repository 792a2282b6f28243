"""Constrained solvers behind the finite-sample estimators.

Everything here is batched over a leading axis so multistarts and candidate
menu combinations share vectorized work.  The trilinear fitter is block
projected gradient with a Frobenius Lipschitz bound, which makes every sweep
provably nonincreasing; the simplex QP is an exact active-set solve used
where certified optima are required (menu subset selection).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK_SENTINEL = -1e30


def project_rows_simplex(V: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Euclidean projection of each row of V onto the probability simplex.

    With a binary mask, masked coordinates are forced to zero and the
    remaining ones are projected onto the lower-dimensional face.
    """
    V = np.asarray(V, dtype=float)
    if mask is not None:
        V = np.where(mask > 0, V, _MASK_SENTINEL)
    m = V.shape[-1]
    U = -np.sort(-V, axis=-1)
    css = np.cumsum(U, axis=-1)
    ks = np.arange(1, m + 1, dtype=float)
    cond = U + (1.0 - css) / ks > 0
    # last index where the threshold condition holds (row support size - 1)
    rho = m - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = (np.take_along_axis(css, rho[..., None], axis=-1)[..., 0] - 1.0) / (rho + 1.0)
    W = np.maximum(V - theta[..., None], 0.0)
    if mask is not None:
        W = np.where(mask > 0, W, 0.0)
    return W


def project_columns_simplex(X: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Project each column (axis -2) of a (..., n, d) array onto the simplex."""
    Xt = np.swapaxes(X, -1, -2)
    Mt = np.swapaxes(mask, -1, -2) if mask is not None else None
    return np.swapaxes(project_rows_simplex(Xt, Mt), -1, -2)


@dataclass
class TrilinearFit:
    """Result of a batched constrained trilinear fit."""

    factors: tuple[np.ndarray, np.ndarray, np.ndarray]  # each (B, n_mode, d)
    M: np.ndarray  # (B, d)
    objective: np.ndarray  # (B,) squared residual (or KL divergence)
    sweeps: int
    converged: bool
    monotone_violation: float  # worst observed objective increase (should be ~0)


def _collapsed(F: np.ndarray) -> np.ndarray:
    # (B, n, d) -> (n, B*d) so shared-tensor contractions become plain matmuls
    B, n, d = F.shape
    return F.transpose(1, 0, 2).reshape(n, B * d)


def _mode_linear(P: np.ndarray, Fa: np.ndarray, Fb: np.ndarray, order: tuple[int, int, int]) -> np.ndarray:
    """W[B, i, j] = sum over the two other axes of P * Fa * Fb for one mode.

    ``order`` permutes P so axis 0 is the target mode, axis 1 matches Fa and
    axis 2 matches Fb.
    """
    Pt = np.transpose(P, order)
    n0, na, nb = Pt.shape
    B, _, d = Fa.shape
    Q = Pt.transpose(0, 2, 1).reshape(n0 * nb, na) @ _collapsed(Fa)  # (n0*nb, B*d)
    Q = Q.reshape(n0, nb, B * d) * _collapsed(Fb)[None]
    W = Q.sum(axis=1)  # (n0, B*d)
    return W.reshape(n0, B, d).transpose(1, 0, 2)


def _grams(F1, F2, F3):
    S1 = np.matmul(F1.transpose(0, 2, 1), F1)
    S2 = np.matmul(F2.transpose(0, 2, 1), F2)
    S3 = np.matmul(F3.transpose(0, 2, 1), F3)
    return S1, S2, S3


def _pg_factor(F, W, G, mask, iters):
    """Projected-gradient steps on min ||P_(mode) - F H'||^2 with fixed Gram G."""
    L = 2.0 * np.sqrt(np.maximum((G * G).sum(axis=(1, 2)), 1e-300))[:, None, None]
    for _ in range(iters):
        grad = 2.0 * (np.matmul(F, G) - W)
        F = project_columns_simplex(F - grad / L, mask)
    return F


def _ls_objective(P, F1, F2, F3, M):
    # direct residual, immune to the cancellation a Gram-form evaluation hits
    # once the fit is many digits deep
    E = np.einsum("baj,bcj,bdj,bj->bacd", F1, F2, F3, M) - P[None]
    return (E * E).sum(axis=(1, 2, 3))


def fit_trilinear(
    P: np.ndarray,
    F1: np.ndarray,
    F2: np.ndarray,
    F3: np.ndarray,
    M: np.ndarray,
    mask: np.ndarray | None = None,
    *,
    max_sweeps: int = 400,
    tol: float = 1e-12,
    rel_tol: float = 0.0,
    inner_iters: int = 8,
    m_iters: int = 12,
    objective: str = "ls",
) -> TrilinearFit:
    """Block-coordinate descent for the simplex-constrained trilinear fit.

    Minimizes ``sum (P - sum_j M_j F1_j x F2_j x F3_j)^2`` (or the KL
    divergence of the model from P) over column-simplex factors and a simplex
    weight vector, one batch element per row of the factor arrays.  ``mask``
    (broadcastable to each factor) pins structural zeros.  Sweeps stop when
    every batch element improves by less than ``tol + rel_tol * objective``.
    """
    P = np.asarray(P, dtype=float)
    F1, F2, F3, M = (np.array(a, dtype=float, copy=True) for a in (F1, F2, F3, M))
    if objective not in ("ls", "kl"):
        raise ValueError("objective must be 'ls' or 'kl'")
    if mask is not None:
        mask = np.asarray(mask, dtype=float)
        F1 = project_columns_simplex(F1, mask)
        F2 = project_columns_simplex(F2, mask)
        F3 = project_columns_simplex(F3, mask)
    if objective == "kl":
        return _fit_kl(P, F1, F2, F3, M, mask, max_sweeps=max_sweeps, tol=tol)

    B = F1.shape[0]
    out_F1, out_F2, out_F3, out_M = F1, F2, F3, M
    out_obj = np.full(B, np.inf)
    active = np.arange(B)
    per_elem_mask = mask is not None and mask.ndim == 3
    w_mask = mask
    prev = np.full(B, np.inf)
    worst_increase = 0.0
    sweeps_done = max_sweeps
    for sweep in range(max_sweeps):
        S2 = np.matmul(F2.transpose(0, 2, 1), F2)
        S3 = np.matmul(F3.transpose(0, 2, 1), F3)
        MM = M[:, :, None] * M[:, None, :]
        W1 = _mode_linear(P, F2, F3, (0, 1, 2)) * M[:, None, :]
        F1 = _pg_factor(F1, W1, S2 * S3 * MM, w_mask, inner_iters)
        S1 = np.matmul(F1.transpose(0, 2, 1), F1)

        W2 = _mode_linear(P, F1, F3, (1, 0, 2)) * M[:, None, :]
        F2 = _pg_factor(F2, W2, S1 * S3 * MM, w_mask, inner_iters)
        S2 = np.matmul(F2.transpose(0, 2, 1), F2)

        W3 = _mode_linear(P, F1, F2, (2, 0, 1)) * M[:, None, :]
        F3 = _pg_factor(F3, W3, S1 * S2 * MM, w_mask, inner_iters)
        S3 = np.matmul(F3.transpose(0, 2, 1), F3)

        c = np.einsum("bnj,bnj->bj", _mode_linear(P, F1, F2, (2, 0, 1)), F3)
        GM = S1 * S2 * S3
        LM = 2.0 * np.sqrt(np.maximum((GM * GM).sum(axis=(1, 2)), 1e-300))[:, None]
        for _ in range(m_iters):
            grad = 2.0 * (np.einsum("bj,bjk->bk", M, GM) - c)
            M = project_rows_simplex(M - grad / LM)

        obj = _ls_objective(P, F1, F2, F3, M)
        worst_increase = max(worst_increase, float((obj - prev).max(initial=0.0)))
        done = prev - obj < tol + rel_tol * obj
        if done.any():
            idx = active[done]
            out_F1[idx], out_F2[idx], out_F3[idx] = F1[done], F2[done], F3[done]
            out_M[idx], out_obj[idx] = M[done], obj[done]
            live = ~done
            active = active[live]
            if active.size == 0:
                sweeps_done = sweep + 1
                converged = True
                break
            F1, F2, F3, M = F1[live], F2[live], F3[live], M[live]
            obj = obj[live]
            if per_elem_mask:
                w_mask = w_mask[live]
        prev = obj
    else:
        converged = False
    if active.size:
        out_F1[active], out_F2[active], out_F3[active] = F1, F2, F3
        out_M[active], out_obj[active] = M, obj
    out_obj = np.maximum(out_obj, 0.0)
    return TrilinearFit(
        factors=(out_F1, out_F2, out_F3),
        M=out_M,
        objective=out_obj,
        sweeps=sweeps_done,
        converged=converged,
        monotone_violation=worst_increase,
    )


def _fit_kl(P, F1, F2, F3, M, mask, *, max_sweeps, tol):
    """KL-divergence variant: projected gradient blocks with per-element Armijo."""
    eps = 1e-300
    Ppos = np.where(P > 0, P, 0.0)
    const = float((Ppos * np.where(P > 0, np.log(np.maximum(P, eps)), 0.0)).sum())

    def model_of(parts):
        return np.einsum("baj,bcj,bdj,bj->bacd", *parts)

    def obj_of(parts):
        return const - np.einsum("acd,bacd->b", Ppos, np.log(np.maximum(model_of(parts), eps)))

    parts = [F1, F2, F3, M]
    B = F1.shape[0]
    prev = obj_of(parts)
    worst = 0.0
    converged = False
    sweeps_done = max_sweeps
    for sweep in range(max_sweeps):
        for bi in range(4):
            Q = np.maximum(model_of(parts), eps)
            G = -Ppos[None] / Q
            f1, f2, f3, w = parts
            if bi == 0:
                grad = np.einsum("bacd,bcj,bdj,bj->baj", G, f2, f3, w)
            elif bi == 1:
                grad = np.einsum("bacd,baj,bdj,bj->bcj", G, f1, f3, w)
            elif bi == 2:
                grad = np.einsum("bacd,baj,bcj,bj->bdj", G, f1, f2, w)
            else:
                grad = np.einsum("bacd,baj,bcj,bdj->bj", G, f1, f2, f3)
            cur = parts[bi]
            step = 1.0 / np.maximum(np.abs(grad).reshape(B, -1).max(axis=1), 1e-12)
            base = obj_of(parts)
            best = cur.copy()
            done = np.zeros(B, dtype=bool)
            for _ in range(30):
                sh = step.reshape((B,) + (1,) * (cur.ndim - 1))
                if bi == 3:
                    trial = project_rows_simplex(cur - sh * grad)
                else:
                    trial = project_columns_simplex(cur - sh * grad, mask)
                cand = list(parts)
                cand[bi] = trial
                newly = (~done) & (obj_of(cand) <= base + 1e-15)
                best = np.where(newly.reshape((B,) + (1,) * (cur.ndim - 1)), trial, best)
                done |= newly
                if done.all():
                    break
                step = np.where(done, step, step * 0.5)
            parts[bi] = best
        obj = obj_of(parts)
        worst = max(worst, float((obj - prev).max(initial=0.0)))
        if np.all(prev - obj < tol):
            converged = True
            sweeps_done = sweep + 1
            break
        prev = obj
    else:
        obj = prev
    return TrilinearFit(
        factors=(parts[0], parts[1], parts[2]),
        M=parts[3],
        objective=np.maximum(obj, 0.0),
        sweeps=sweeps_done,
        converged=converged,
        monotone_violation=worst,
    )


def fit_trilinear_tied(
    P: np.ndarray,
    F: np.ndarray,
    M: np.ndarray,
    mask: np.ndarray | None = None,
    *,
    max_sweeps: int = 400,
    tol: float = 1e-12,
    rel_tol: float = 0.0,
) -> TrilinearFit:
    """Least-squares fit with one factor shared by all three modes.

    The shared factor makes the objective non-quadratic in F, so steps are
    guarded by a per-element Armijo backtrack instead of a Lipschitz bound.
    Accepted step sizes carry over (doubled) to the next sweep, and converged
    batch elements retire from the working set as in :func:`fit_trilinear`.
    """
    P = np.asarray(P, dtype=float)
    if not (P.shape[0] == P.shape[1] == P.shape[2]):
        raise ValueError("tied fitting needs a cubical tensor")
    F = np.array(F, dtype=float, copy=True)
    M = np.array(M, dtype=float, copy=True)
    if mask is not None:
        mask = np.asarray(mask, dtype=float)
        F = project_columns_simplex(F, mask)
    B = F.shape[0]

    def obj_of(F_, M_):
        E = np.einsum("baj,bcj,bdj,bj->bacd", F_, F_, F_, M_) - P[None]
        return (E * E).sum(axis=(1, 2, 3))

    out_F, out_M = F, M
    out_obj = np.full(B, np.inf)
    active = np.arange(B)
    per_elem_mask = mask is not None and mask.ndim == 3
    w_mask = mask
    cur = obj_of(F, M)
    prev = np.full(B, np.inf)
    step_F = np.zeros(B)
    step_M = np.zeros(B)
    worst = 0.0
    converged = False
    sweeps_done = max_sweeps
    for sweep in range(max_sweeps):
        for which in ("F", "M"):
            E = np.einsum("baj,bcj,bdj,bj->bacd", F, F, F, M) - P[None]
            if which == "F":
                g1 = np.einsum("bacd,bcj,bdj,bj->baj", E, F, F, M)
                g2 = np.einsum("bacd,baj,bdj,bj->bcj", E, F, F, M)
                g3 = np.einsum("bacd,baj,bcj,bj->bdj", E, F, F, M)
                grad = 2.0 * (g1 + g2 + g3)
                block = F
                step = step_F
            else:
                grad = 2.0 * np.einsum("bacd,baj,bcj,bdj->bj", E, F, F, F)
                block = M
                step = step_M
            b = block.shape[0]
            gmax = np.abs(grad).reshape(b, -1).max(axis=1)
            step = np.where(step > 0, step * 2.0, 1.0 / np.maximum(gmax, 1e-12))
            best = block.copy()
            accepted = np.zeros(b, dtype=bool)
            acc_step = step.copy()
            acc_val = cur.copy()
            for _ in range(30):
                sh = step.reshape((b,) + (1,) * (block.ndim - 1))
                if which == "M":
                    trial = project_rows_simplex(block - sh * grad)
                    val = obj_of(F, trial)
                else:
                    trial = project_columns_simplex(block - sh * grad, w_mask)
                    val = obj_of(trial, M)
                newly = (~accepted) & (val <= cur + 1e-15)
                if newly.any():
                    sel = newly.reshape((b,) + (1,) * (block.ndim - 1))
                    best = np.where(sel, trial, best)
                    acc_step = np.where(newly, step, acc_step)
                    acc_val = np.where(newly, val, acc_val)
                    accepted |= newly
                if accepted.all():
                    break
                step = np.where(accepted, step, step * 0.5)
            if which == "F":
                F = best
                step_F = np.where(accepted, acc_step, step)
            else:
                M = best
                step_M = np.where(accepted, acc_step, step)
            cur = acc_val
        obj = cur
        worst = max(worst, float((obj - prev).max(initial=0.0)))
        done = prev - obj < tol + rel_tol * obj
        if done.any():
            idx = active[done]
            out_F[idx], out_M[idx], out_obj[idx] = F[done], M[done], obj[done]
            live = ~done
            active = active[live]
            if active.size == 0:
                sweeps_done = sweep + 1
                converged = True
                break
            F, M = F[live], M[live]
            obj, cur = obj[live], cur[live]
            step_F, step_M = step_F[live], step_M[live]
            if per_elem_mask:
                w_mask = w_mask[live]
        prev = obj
    else:
        converged = False
    if active.size:
        out_F[active], out_M[active], out_obj[active] = F, M, cur
    return TrilinearFit(
        factors=(out_F, out_F, out_F),
        M=out_M,
        objective=np.maximum(out_obj, 0.0),
        sweeps=sweeps_done,
        converged=converged,
        monotone_violation=worst,
    )


def dirichlet_factors(rng: np.random.Generator, B: int, dims: tuple[int, int, int], d: int, mask=None):
    """Uniform-on-simplex random starting factors and weights."""
    factors = []
    for n in dims:
        g = rng.gamma(1.0, size=(B, n, d))
        if mask is not None:
            g = g * (np.broadcast_to(mask, (B, n, d)) if mask.ndim == 2 else mask)
        factors.append(g / np.maximum(g.sum(axis=1, keepdims=True), 1e-300))
    g = rng.gamma(1.0, size=(B, d))
    M = g / g.sum(axis=1, keepdims=True)
    return factors[0], factors[1], factors[2], M


def simplex_qp_exact(
    Q: np.ndarray,
    b: np.ndarray,
    allowed: np.ndarray | None = None,
    tol: float = 1e-12,
    max_iter: int | None = None,
) -> tuple[np.ndarray, float, bool]:
    """Exact minimizer of x'Qx - 2 b'x over the simplex (active set method).

    ``allowed`` restricts the support.  Returns (x, value, certified); when
    the iteration cap is hit, certified is False and callers must not use the
    value as a pruning bound.
    """
    d = Q.shape[0]
    idx = np.flatnonzero(allowed) if allowed is not None else np.arange(d)
    if idx.size == 0:
        raise ValueError("no allowed coordinates")
    Qa = Q[np.ix_(idx, idx)]
    ba = b[idx]
    k = idx.size
    x = np.zeros(k)
    start = int(np.argmin(np.diag(Qa) - 2.0 * ba))
    x[start] = 1.0
    support = {start}
    max_iter = max_iter or (6 * k + 30)
    certified = False
    for _ in range(max_iter):
        S = sorted(support)
        ns = len(S)
        K = np.zeros((ns + 1, ns + 1))
        K[:ns, :ns] = 2.0 * Qa[np.ix_(S, S)]
        K[:ns, ns] = 1.0
        K[ns, :ns] = 1.0
        rhs = np.concatenate([2.0 * ba[S], [1.0]])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        xs = sol[:ns]
        if xs.min(initial=1.0) >= -tol:
            x_new = np.zeros(k)
            x_new[S] = np.maximum(xs, 0.0)
            x = x_new
            g = 2.0 * (Qa @ x - ba)
            mu = float(np.mean(g[S]))  # on the support the gradient is constant
            outside = [i for i in range(k) if i not in support]
            if not outside:
                certified = True
                break
            lam = g[outside] - mu
            worst = int(np.argmin(lam))
            if lam[worst] >= -max(tol, 1e-11) * max(1.0, abs(mu)):
                certified = True
                break
            support.add(outside[worst])
        else:
            # step from the current feasible point toward xs until a coordinate hits zero
            x_full = np.zeros(k)
            x_full[S] = xs
            diff = x_full - x
            bad = diff < -1e-300
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(bad, x / np.maximum(-diff, 1e-300), np.inf)
            alpha = min(1.0, float(ratios.min()))
            x = np.maximum(x + alpha * diff, 0.0)
            drop = int(np.argmin(np.where(bad, x, np.inf)))
            if drop in support and len(support) > 1:
                support.discard(drop)
                x[drop] = 0.0
            else:
                support = {i for i in range(k) if x[i] > tol} or {int(np.argmax(x))}
    total = x.sum()
    if total > 0:
        x = x / total
    val = float(x @ Qa @ x - 2.0 * ba @ x)
    out = np.zeros(d)
    out[idx] = x
    return out, val, certified

"""Spectral recovery of latent menus from grouped joint-choice tensors.

Given the exact (or estimated) joint distribution of three grouped choice
variables (z1, z2, y_slice), the mixture structure factors the pairwise
margin as L12 = L1 A L2' with A = diag(m) and per-menu conditional columns
L1, L2.  Working on a nonsingular pivot submatrix, the per-alternative ratio
matrices R_y = Ltilde_{2,1,y} (Ltilde_12')^{-1} share the eigenvectors
Ltilde_2 and have the slice-period kernel values as eigenvalues, which makes
menus (zero patterns), m, and the choice kernels recoverable by one
eigendecomposition plus linear solves.

This module also provides numerical rank estimation for the number of menus,
the linear-independence diagnostics that license the construction, and the
first-order-dependence (Markov) variant that conditions on a bracketing pair
of choices.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import IdentificationError, IllConditionedError
from .ingest import PanelDataset
from .model import (
    ChoiceSetMask,
    JointChoiceTensor,
    MarkovMixtureModel,
    MixtureModel,
    _group_kernel,
)

__all__ = [
    "DEFAULT_RANK_TAU",
    "RankEstimate",
    "SpectralOptions",
    "SpectralWorkspace",
    "MixtureEstimate",
    "LinIndepReport",
    "MarkovEstimate",
    "estimate_rank",
    "select_pivot_outcomes",
    "spectral_identify",
    "lin_indep_check",
    "markov_identify",
]

# Relative singular-value cutoff for the menu-count estimate.  Small enough to
# keep the built-in five-menu designs at full detected rank (their population
# ratios reach ~2e-3) while sitting far above float roundoff.
DEFAULT_RANK_TAU = 1e-3


@dataclass(frozen=True)
class RankEstimate:
    """Detected number of menus with the evidence behind it."""

    d_hat: int
    singular_values: np.ndarray
    tau: float
    saturated: bool  # d_hat hit the matrix dimension: true rank may be larger

    def __post_init__(self) -> None:
        sv = np.asarray(self.singular_values, dtype=float)
        sv.setflags(write=False)
        object.__setattr__(self, "singular_values", sv)


def estimate_rank(tensor: JointChoiceTensor, tau: float = DEFAULT_RANK_TAU) -> RankEstimate:
    """Estimate the number of menus as the thresholded rank of the pair margin.

    The margin M = sum_k P(i, j, k) factors through the menu mixture, so its
    rank is the menu count whenever the conditional distributions are linearly
    independent; d_hat counts singular values above ``tau`` times the largest.
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    M = tensor.probs.sum(axis=2)
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] <= 0:
        raise ValueError("all-zero margin matrix")
    d_hat = int(np.sum(sv > tau * sv[0]))
    return RankEstimate(
        d_hat=d_hat,
        singular_values=sv,
        tau=float(tau),
        saturated=bool(d_hat == min(M.shape)),
    )


def select_pivot_outcomes(
    L12: np.ndarray, d_hat: int, tol: float = 1e-10
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Pick d_hat rows and columns whose submatrix is well conditioned.

    Greedy conditioning via column-pivoted QR on the columns, then on the rows
    restricted to the chosen columns.  Raises if the best submatrix is still
    numerically singular.
    """
    L12 = np.asarray(L12, dtype=float)
    n1, n2 = L12.shape
    if not 1 <= d_hat <= min(n1, n2):
        raise ValueError(f"d_hat={d_hat} out of range for a {n1}x{n2} matrix")
    _, _, piv_c = scipy.linalg.qr(L12, pivoting=True, mode="economic")
    cols = tuple(sorted(int(c) for c in piv_c[:d_hat]))
    _, _, piv_r = scipy.linalg.qr(L12[:, cols].T, pivoting=True, mode="economic")
    rows = tuple(sorted(int(r) for r in piv_r[:d_hat]))
    sub = L12[np.ix_(rows, cols)]
    sv = np.linalg.svd(sub, compute_uv=False)
    scale = float(np.linalg.svd(L12, compute_uv=False)[0])
    if sv[-1] <= tol * max(scale, 1e-300):
        raise IdentificationError(
            f"no nonsingular {d_hat}x{d_hat} submatrix at tolerance {tol} "
            f"(smallest singular value {sv[-1]:.3e})"
        )
    return rows, cols


@dataclass(frozen=True)
class SpectralOptions:
    """Knobs for the eigendecomposition recovery."""

    zero_tol: float = 1e-6  # menu zero-pattern threshold and negativity guard
    menu_tol: float | None = None  # separate menu threshold; None reuses zero_tol
    imag_tol: float = 1e-6  # largest imaginary residual silently discarded
    seed: int = 0  # seeds the convex-combination weights
    weight_draws: int = 8  # retries before declaring eigenvalues inseparable
    pivot_tol: float = 1e-10
    rank_tau: float = DEFAULT_RANK_TAU  # used when d_hat is not supplied
    pair_mass_tol: float = 1e-12  # markov: conditioning pairs below this are skipped
    assume_stability: bool = True  # markov: pool kernels across conditioning pairs
    d_hat: int | None = None  # markov: per-pair override; None -> estimate per pair


@dataclass(frozen=True)
class Diagnostics:
    """Numerical evidence attached to a spectral estimate."""

    cond_pivot: float
    eig_min_gap: float
    max_imag_discarded: float
    offdiag_max: float
    m_min_preclip: float
    residual_linf: float | None


@dataclass(frozen=True)
class SpectralWorkspace:
    """Intermediate linear-algebra objects, kept for inspection and tests."""

    L12: np.ndarray
    pivot_rows: tuple[int, ...]
    pivot_cols: tuple[int, ...]
    R_y: np.ndarray  # (Y, d, d) ratio matrices on the pivot block
    eigvecs: np.ndarray  # (d, d), columns on the simplex
    slice_diagonals: np.ndarray  # (Y, d) per-alternative eigenvalue diagonals


@dataclass(frozen=True)
class MixtureEstimate:
    """Recovered menus, weights, and per-period kernels.

    ``F_hat[i]`` is the kernel for period ``periods[i]``; for grouped tensors
    only the slice period is recoverable, so ``periods`` may be shorter than
    the panel.
    """

    menus: tuple[ChoiceSetMask, ...]
    m_hat: np.ndarray
    F_hat: np.ndarray  # (len(periods), Y, d)
    periods: tuple[int, ...]
    diagnostics: Diagnostics | None = None
    workspace: SpectralWorkspace | None = None
    fit_residual: float | None = None

    def __post_init__(self) -> None:
        m = np.asarray(self.m_hat, dtype=float).reshape(-1).copy()
        F = np.asarray(self.F_hat, dtype=float).copy()
        m.setflags(write=False)
        F.setflags(write=False)
        object.__setattr__(self, "m_hat", m)
        object.__setattr__(self, "F_hat", F)
        object.__setattr__(self, "menus", tuple(self.menus))
        object.__setattr__(self, "periods", tuple(int(t) for t in self.periods))

    @property
    def Y(self) -> int:
        return self.F_hat.shape[1]

    @property
    def n_menus(self) -> int:
        return len(self.menus)

    def menu_index(self) -> dict[int, int]:
        return {mask.bits: j for j, mask in enumerate(self.menus)}

    def to_json_dict(self) -> dict:
        out = {
            "menus": [list(mask.alternatives) for mask in self.menus],
            "m": self.m_hat.tolist(),
            "F": {str(t): self.F_hat[i].tolist() for i, t in enumerate(self.periods)},
            "periods": list(self.periods),
        }
        if self.fit_residual is not None:
            out["fit_residual"] = float(self.fit_residual)
        return out


def _simplexify_columns(M: np.ndarray, zero_tol: float, what: str) -> np.ndarray:
    """Clip tiny negatives and renormalize columns; large negativity is an error."""
    worst = float(M.min(initial=0.0))
    if worst < -zero_tol:
        raise IllConditionedError(f"{what} has entries below -zero_tol ({worst:.3e}); recovery untrustworthy")
    M = np.clip(M, 0.0, None)
    sums = M.sum(axis=0)
    if np.any(sums <= 0):
        raise IllConditionedError(f"{what} has a column with no mass")
    return M / sums


def spectral_identify(
    tensor: JointChoiceTensor,
    d_hat: int | None = None,
    opts: SpectralOptions = SpectralOptions(),
) -> MixtureEstimate:
    """Recover (menus, m, F) from a (K, K, 1)-grouped joint choice tensor.

    On a population tensor whose per-menu grouped distributions are linearly
    independent the output matches the generating model up to menu reordering.
    The slice-period kernel always comes from the eigenvalue diagonals; when
    the first two groups are single periods their kernels are recovered as
    well, so a (1, 1, 1) tensor yields all three periods.
    """
    k1, k2, k3 = tensor.grouping
    if k3 != 1:
        raise ValueError("the third (slice) group must be a single period")
    if k1 != k2:
        raise ValueError("the first two groups must have equal size")
    Y = tensor.Y
    P = tensor.probs
    if d_hat is None:
        d_hat = estimate_rank(tensor, opts.rank_tau).d_hat
    d = int(d_hat)

    L12 = P.sum(axis=2)
    rows, cols = select_pivot_outcomes(L12, d, tol=opts.pivot_tol)
    Lt = L12[np.ix_(rows, cols)]
    cond = float(np.linalg.cond(Lt))
    # ratio matrices on the pivot block: R[y] = Ltilde_{2,1,y} (Ltilde_12')^{-1}
    sub = P[np.ix_(rows, cols)]  # (d, d, Y), axes (z1 pivot, z2 pivot, y)
    Lt21 = np.transpose(sub, (2, 1, 0))  # (Y, d, d): [y][i, j] = P(z2=cols[i], z1=rows[j], y)
    X = np.linalg.solve(Lt.T, np.eye(d))
    R = Lt21 @ X  # (Y, d, d)

    # one eigendecomposition of a random convex combination separates the menus
    rng = np.random.default_rng(opts.seed)
    lam = vecs = None
    best_gap = np.inf
    max_imag = 0.0
    for _ in range(max(1, opts.weight_draws)):
        w = rng.dirichlet(np.ones(Y))
        Rw = np.einsum("y,yij->ij", w, R)
        vals, V = np.linalg.eig(Rw)
        imag = float(np.abs(vals.imag).max()) if d > 1 else 0.0
        if imag > opts.imag_tol:
            max_imag = max(max_imag, imag)
            continue
        order = np.argsort(vals.real)
        gaps = np.diff(vals.real[order]) if d > 1 else np.array([np.inf])
        gap = float(gaps.min()) if gaps.size else np.inf
        if gap > 1e-10:
            lam, vecs = vals.real, V
            best_gap = gap
            break
        best_gap = min(best_gap, gap)
    if vecs is None:
        if max_imag > opts.imag_tol:
            raise IllConditionedError(
                f"complex eigenvalues persist across weight draws (max imaginary part {max_imag:.3e})"
            )
        raise IdentificationError(
            "repeated eigenvalues across all weight draws: components share a slice "
            f"distribution and cannot be separated (min gap {best_gap:.3e})"
        )
    vec_imag = float(np.abs(vecs.imag).max())
    if vec_imag > opts.imag_tol:
        raise IllConditionedError(f"eigenvectors have imaginary parts {vec_imag:.3e} above imag_tol")
    max_imag = max(max_imag, vec_imag)
    V = vecs.real
    colsums = V.sum(axis=0)
    if np.any(np.abs(colsums) < 1e-12):
        raise IllConditionedError("an eigenvector sums to zero; cannot normalize onto the simplex")
    V = V / colsums
    if float(V.min()) < -opts.zero_tol:
        raise IllConditionedError(
            f"eigenvector entries below -zero_tol ({float(V.min()):.3e}); recovery untrustworthy"
        )
    V = _simplexify_columns(V, np.inf, "eigenvectors")  # clip tiny negatives, resum

    # slice-period kernel from the per-alternative diagonals of V^-1 R_y V
    A = np.linalg.solve(np.broadcast_to(V, (Y, d, d)), R) @ V  # (Y, d, d)
    diag = np.einsum("ykk->yk", A)
    off = A - np.einsum("yk,kl->ykl", diag, np.eye(d))
    offdiag_max = float(np.abs(off).max()) if d > 1 else 0.0
    F_slice = _simplexify_columns(diag.copy(), opts.zero_tol, "slice kernel")

    # conditional distribution of the full z2 outcome space per menu
    Pr = P[np.asarray(rows)]  # (d, n2, Y)
    Rfull = np.transpose(Pr, (2, 1, 0)) @ X  # (Y, n2, d): full-row ratio matrices
    U2 = np.einsum("ynj,jk->nk", Rfull, V)  # sum over y gives the z2 kernel up to column scale
    L2D = _simplexify_columns(U2, max(opts.zero_tol, 1e-8) * max(1.0, float(np.abs(U2).max())), "z2 kernel")

    # menu weights solve L_{2|D} m = marginal of z2
    z2_marg = L12.sum(axis=0)
    m_hat, *_ = np.linalg.lstsq(L2D, z2_marg, rcond=None)
    m_min = float(m_hat.min())
    m_hat = np.clip(m_hat, 0.0, None)
    total = m_hat.sum()
    if total <= 0:
        raise IllConditionedError("recovered menu weights have no mass")
    m_hat = m_hat / total

    # z1 kernel via L12 = L_{1|D} diag(m) L_{2|D}'
    inv_m = np.where(m_hat > 1e-12, 1.0 / np.maximum(m_hat, 1e-300), 0.0)
    L1D = L12 @ np.linalg.pinv(L2D.T) * inv_m
    L1D = _simplexify_columns(L1D, max(opts.zero_tol, 1e-8) * max(1.0, float(np.abs(L1D).max())), "z1 kernel")

    slice_period = tensor.periods[2][0]
    if k1 == 1:
        period_order = [tensor.periods[0][0], tensor.periods[1][0], slice_period]
        kernels = [L1D, L2D, F_slice]
        order = np.argsort(period_order)
        periods = tuple(period_order[i] for i in order)
        F_hat = np.stack([kernels[i] for i in order], axis=0)
    else:
        periods = (slice_period,)
        F_hat = F_slice[None]

    # menus from the union of recovered zero patterns
    menu_tol = opts.zero_tol if opts.menu_tol is None else opts.menu_tol
    support = (F_hat > menu_tol).any(axis=0)
    menus = []
    for j in range(d):
        if not support[:, j].any():
            raise IdentificationError(f"component {j} has an empty recovered menu")
        menus.append(ChoiceSetMask.from_indicator(support[:, j].astype(float)))

    # zero out sub-threshold entries so the mask invariant holds exactly
    F_hat = np.where(support[None], F_hat, 0.0)
    F_hat = F_hat / F_hat.sum(axis=1, keepdims=True)

    # canonical ordering: ascending menu mask
    order = sorted(range(d), key=lambda j: (menus[j].bits, -m_hat[j]))
    menus = tuple(menus[j] for j in order)
    m_hat = m_hat[list(order)]
    F_hat = F_hat[:, :, list(order)]
    V = V[:, list(order)]
    diag_sorted = F_slice[:, list(order)]

    residual = None
    if k1 == 1:
        rebuilt_axis_order = np.argsort(np.argsort([tensor.periods[0][0], tensor.periods[1][0], slice_period]))
        ker = [F_hat[i] for i in rebuilt_axis_order]
        rebuilt = np.einsum("aj,bj,cj,j->abc", ker[0], ker[1], ker[2], m_hat)
        residual = float(np.abs(rebuilt - P).max())

    diagnostics = Diagnostics(
        cond_pivot=cond,
        eig_min_gap=float(best_gap),
        max_imag_discarded=max_imag,
        offdiag_max=offdiag_max,
        m_min_preclip=m_min,
        residual_linf=residual,
    )
    workspace = SpectralWorkspace(
        L12=L12,
        pivot_rows=rows,
        pivot_cols=cols,
        R_y=R,
        eigvecs=V,
        slice_diagonals=diag_sorted,
    )
    return MixtureEstimate(
        menus=tuple(menus),
        m_hat=m_hat,
        F_hat=F_hat,
        periods=periods,
        diagnostics=diagnostics,
        workspace=workspace,
    )


@dataclass(frozen=True)
class LinIndepReport:
    """Diagnostics for the linear-independence (rank) condition."""

    full_rank: bool
    smallest_sv: float
    sv_threshold: float
    n_menus: int
    K: int
    Y: int
    nested: bool
    excluded_choices: bool
    k_geq_y: bool


def _menus_nested(menus: Sequence[ChoiceSetMask]) -> bool:
    ordered = sorted(menus, key=lambda mask: (mask.size, mask.bits))
    return all(a.issubset(b) for a, b in zip(ordered, ordered[1:]))


def _menus_excluded(menus: Sequence[ChoiceSetMask]) -> bool:
    for j, mask in enumerate(menus):
        others = 0
        for k, other in enumerate(menus):
            if k != j:
                others |= other.bits
        if mask.bits & ~others == 0:
            return False
    return True


def lin_indep_check(
    model: MixtureModel | None = None,
    K: int = 1,
    G: np.ndarray | None = None,
    rank_tol: float = 1e-10,
) -> LinIndepReport:
    """Check whether per-menu grouped-choice distributions are independent.

    Either pass a model (G is built from its first ``K`` periods) or an
    explicit (outcomes x menus) matrix ``G``.  Also reports the two structural
    sufficient conditions (nested menus; a private alternative per menu) and
    whether ``K >= Y`` (which suffices on its own).
    """
    if (model is None) == (G is None):
        raise ValueError("pass exactly one of model or G")
    if model is not None:
        if K < 1 or K > model.T:
            raise ValueError(f"K must be in 1..{model.T}")
        G = _group_kernel(model, tuple(range(1, K + 1)))
        menus = model.menus
        Y = model.Y
    else:
        G = np.asarray(G, dtype=float)
        menus = ()
        Y = 0
    sv = np.linalg.svd(G, compute_uv=False)
    smax = float(sv[0]) if sv.size else 0.0
    smin = float(sv[min(G.shape) - 1]) if min(G.shape) else 0.0
    threshold = rank_tol * max(smax, 1e-300)
    full_rank = bool(G.shape[1] <= G.shape[0] and smin > threshold)
    return LinIndepReport(
        full_rank=full_rank,
        smallest_sv=smin,
        sv_threshold=threshold,
        n_menus=G.shape[1],
        K=K,
        Y=Y,
        nested=_menus_nested(menus) if menus else False,
        excluded_choices=_menus_excluded(menus) if menus else False,
        k_geq_y=bool(menus and K >= Y),
    )


@dataclass(frozen=True)
class MarkovEstimate:
    """Pooled recovery for first-order-dependent panels.

    ``trans[j, a, :]`` is the recovered next-choice distribution after choice
    ``a + 1`` under menu ``j``; rows that no conditioning pair could inform
    are zero and listed in ``undetermined``.
    """

    Y: int
    K_d: int
    menus: tuple[ChoiceSetMask, ...] | None
    m_hat: np.ndarray | None
    trans: np.ndarray | None
    per_pair: Mapping[tuple[int, int], MixtureEstimate]
    pair_mass: Mapping[tuple[int, int], float]
    skipped_pairs: tuple[tuple[int, int], ...]
    undetermined: tuple[tuple[int, int], ...]  # (menu index, previous choice)
    pooled: bool


def _joint_from_source(source) -> np.ndarray:
    if isinstance(source, MarkovMixtureModel):
        return source.joint_pmf()
    if isinstance(source, PanelDataset):
        Y, T = source.Y, source.T
        if Y**T > 10**6:
            raise ValueError("path space too large to tabulate")
        codes = np.zeros(source.n, dtype=np.int64)
        for t in range(T):
            codes = codes * Y + (source.choices[:, t].astype(np.int64) - 1)
        counts = np.bincount(codes, minlength=Y**T)
        return (counts / source.n).reshape((Y,) * T)
    joint = np.asarray(source, dtype=float)
    if joint.ndim < 3 or len(set(joint.shape)) != 1:
        raise ValueError("joint pmf must be a (Y,)*T array with T >= 3")
    return joint


def markov_identify(
    source,
    K_d: int | None = None,
    opts: SpectralOptions = SpectralOptions(),
) -> MarkovEstimate:
    """Recover menus, weights, and transition kernels under first-order dependence.

    ``source`` may be a :class:`MarkovMixtureModel`, a panel dataset, or a raw
    joint pmf array over choice paths.  Choices in periods ``K_d + 1`` and
    ``2 K_d + 2`` bracket the groups: conditional on that pair the grouped
    variables are again a menu mixture of independent blocks, so each pair
    with positive mass yields one spectral recovery; pairs are pooled when
    ``opts.assume_stability`` (kernels constant over time) is set.
    """
    joint = _joint_from_source(source)
    T = joint.ndim
    Y = joint.shape[0]
    if K_d is None:
        K_d = (T - 3) // 2
    if K_d < 1 or T < 2 * K_d + 3:
        raise ValueError(f"need T >= 2*K_d + 3 (T={T}, K_d={K_d})")
    need = 2 * K_d + 3
    while joint.ndim > need:
        joint = joint.sum(axis=-1)

    s1_axis = K_d
    s2_axis = 2 * K_d + 1
    g1 = tuple(range(1, K_d + 1))
    g2 = tuple(range(K_d + 2, 2 * K_d + 2))
    slice_period = 2 * K_d + 3
    dim = Y**K_d

    per_pair: dict[tuple[int, int], MixtureEstimate] = {}
    pair_mass: dict[tuple[int, int], float] = {}
    skipped = []
    for a, b in itertools.product(range(Y), range(Y)):
        sub = joint.take(a, axis=s1_axis).take(b, axis=s2_axis - 1)
        mass = float(sub.sum())
        if mass <= opts.pair_mass_tol:
            skipped.append((a + 1, b + 1))
            continue
        probs = (sub / mass).reshape(dim, dim, Y)
        cond_tensor = JointChoiceTensor(Y, (K_d, K_d, 1), (g1, g2, (slice_period,)), probs)
        d_ab = opts.d_hat if opts.d_hat is not None else estimate_rank(cond_tensor, opts.rank_tau).d_hat
        per_pair[(a + 1, b + 1)] = spectral_identify(cond_tensor, d_ab, opts)
        pair_mass[(a + 1, b + 1)] = mass

    if not per_pair:
        raise IdentificationError("every conditioning pair has zero mass")

    if not opts.assume_stability:
        return MarkovEstimate(
            Y=Y,
            K_d=K_d,
            menus=None,
            m_hat=None,
            trans=None,
            per_pair=per_pair,
            pair_mass=pair_mass,
            skipped_pairs=tuple(skipped),
            undetermined=(),
            pooled=False,
        )

    # pool: menus by mask union, weights by total probability, kernels by
    # mass-weighted averages of the slice recovery at matching previous choice
    mask_bits = sorted({mask.bits for est in per_pair.values() for mask in est.menus})
    menus = tuple(ChoiceSetMask(bits, Y) for bits in mask_bits)
    index = {bits: j for j, bits in enumerate(mask_bits)}
    d = len(menus)
    m_hat = np.zeros(d)
    trans_num = np.zeros((d, Y, Y))
    trans_den = np.zeros((d, Y))
    for (a, b), est in per_pair.items():
        mass = pair_mass[(a, b)]
        slice_row = est.periods.index(slice_period)
        for j_est, mask in enumerate(est.menus):
            j = index[mask.bits]
            weight = mass * float(est.m_hat[j_est])
            m_hat[j] += weight
            trans_num[j, b - 1] += weight * est.F_hat[slice_row, :, j_est]
            trans_den[j, b - 1] += weight
    total_mass = sum(pair_mass.values())
    m_hat = m_hat / total_mass
    m_hat = m_hat / m_hat.sum()
    trans = np.zeros((d, Y, Y))
    undetermined = []
    for j, mask in enumerate(menus):
        for a in range(Y):
            if trans_den[j, a] > 0:
                trans[j, a] = trans_num[j, a] / trans_den[j, a]
            elif mask.contains(a + 1):
                undetermined.append((j, a + 1))
    return MarkovEstimate(
        Y=Y,
        K_d=K_d,
        menus=menus,
        m_hat=m_hat,
        trans=trans,
        per_pair=per_pair,
        pair_mass=pair_mass,
        skipped_pairs=tuple(skipped),
        undetermined=tuple(undetermined),
        pooled=True,
    )

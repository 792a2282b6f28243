"""Finite-sample two-step estimation of menu mixtures.

Step 1 fits an unrestricted simplex-constrained trilinear decomposition of the
empirical joint choice tensor and trims small kernel entries to read off
candidate menus.  Step 2 refits against the full dictionary of all nonempty
menus (one masked column per subset), selects the best weight support of size
at most d_hat by an exact mixed-integer solve, and refits on the winners.

The brute-force estimator fits every d_hat-combination of candidate menus
directly and serves as the oracle the pipeline is tested against.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import opt
from .errors import BudgetExceededError, EstimationError
from .model import MAX_ALTERNATIVES, ChoiceSetMask, JointChoiceTensor
from .spectral import (
    DEFAULT_RANK_TAU,
    MixtureEstimate,
    SpectralOptions,
    estimate_rank,
    spectral_identify,
)

_MIO_MODES = ("auto", "exact_enumeration", "branch_and_bound")
_ZERO_WEIGHT = 1e-12
_PARSIMONY_BAND = 0.15  # residual band within which the tightest support wins


@dataclass(frozen=True)
class FitConfig:
    """Tuning knobs shared by every fitting stage.

    ``eps`` is the fixed trim threshold; ``trim_mode="vanishing"`` switches to
    the sample-size rule log(log n)/sqrt(n) and then requires the sample size
    to be passed where trimming happens.  ``mio_mode="auto"`` enumerates menu
    subsets exhaustively when their count is within ``enum_budget`` and
    branches-and-bounds otherwise.
    """

    eps: float = 0.01
    starts: int = 20
    max_iter: int = 300
    tol: float = 1e-10
    seed: int = 0
    tie_F_across_t: bool = False
    objective: str = "ls"
    trim_mode: str = "fixed"
    mio_mode: str = "auto"
    node_limit: int = 200_000
    enum_budget: int = 20_000

    def __post_init__(self) -> None:
        if self.starts < 1:
            raise ValueError("starts must be at least 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")
        if self.tol < 0:
            raise ValueError("tol must be nonnegative")
        if self.objective not in ("ls", "kl"):
            raise ValueError("objective must be 'ls' or 'kl'")
        if self.trim_mode not in ("fixed", "vanishing"):
            raise ValueError("trim_mode must be 'fixed' or 'vanishing'")
        if self.mio_mode not in _MIO_MODES:
            raise ValueError(f"mio_mode must be one of {_MIO_MODES}")
        if self.node_limit < 1 or self.enum_budget < 1:
            raise ValueError("node_limit and enum_budget must be positive")

    def trim_eps(self, Y: int, n_obs: int | None = None) -> float:
        if self.trim_mode == "vanishing":
            if n_obs is None or n_obs < 16:
                raise ValueError("vanishing trim threshold needs a sample size of at least 16")
            eps = math.log(math.log(n_obs)) / math.sqrt(n_obs)
        else:
            eps = self.eps
        if not 0.0 < eps < 1.0 / Y:
            raise ValueError(f"trim threshold {eps:.6g} outside (0, 1/{Y})")
        return eps

    def to_json_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json_dict(cls, data: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown FitConfig fields: {sorted(unknown)}")
        return cls(**data)


def _probs_of(tensor) -> np.ndarray:
    P = np.asarray(getattr(tensor, "probs", tensor), dtype=float)
    if P.ndim != 3:
        raise ValueError("expected a 3-mode joint choice tensor")
    return P


def _check_monotone(fit: opt.TrilinearFit, where: str) -> None:
    if fit.monotone_violation > 1e-9:
        raise EstimationError(
            f"{where}: alternating sweep increased the objective by {fit.monotone_violation:.3e}"
        )


def _seeded(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage])


@dataclass(frozen=True)
class Step1Result:
    """Best multistart solution of the unmasked trilinear program."""

    F_bar: np.ndarray  # (3, Y, d_hat)
    M_bar: np.ndarray  # (d_hat,)
    objective: float
    converged: bool
    start_objectives: np.ndarray  # sorted ascending, one per start


def _best_fit(P, F1, F2, F3, M, mask, cfg: FitConfig, tied: bool):
    """Run a batched fit, then polish the best element to a tighter tolerance."""
    if tied:
        fit = opt.fit_trilinear_tied(
            P, F1, M, mask=mask, max_sweeps=cfg.max_iter, tol=cfg.tol, rel_tol=1e-7,
        )
    else:
        fit = opt.fit_trilinear(
            P, F1, F2, F3, M,
            mask=mask, max_sweeps=cfg.max_iter, tol=cfg.tol,
            rel_tol=1e-7, objective=cfg.objective,
        )
    _check_monotone(fit, "fit")
    b = int(np.argmin(fit.objective))
    slim = tuple(f[b : b + 1] for f in fit.factors)
    # polishing a single element is cheap, so the sweep budget is generous:
    # slow directions near a degenerate optimum need thousands of tiny steps
    polish_sweeps = max(cfg.max_iter, 1500)
    if tied:
        polish = opt.fit_trilinear_tied(
            P, slim[0], fit.M[b : b + 1], mask=mask,
            max_sweeps=polish_sweeps, tol=1e-18, rel_tol=1e-9,
        )
    else:
        polish = opt.fit_trilinear(
            P, *slim, fit.M[b : b + 1],
            mask=mask, max_sweeps=polish_sweeps,
            tol=1e-28, rel_tol=1e-9, objective=cfg.objective,
        )
    _check_monotone(polish, "polish")
    return polish, np.sort(fit.objective), fit.converged or polish.converged


def _spectral_start(tensor, P: np.ndarray, d_hat: int):
    """Eigendecomposition estimate projected to the feasible set, or None.

    Random multistart alone can settle in local optima whose spurious kernel
    entries exceed the trim threshold; the closed-form estimate is consistent,
    so seeding one start with it anchors the fit to the right basin once the
    sample is informative.  Failures (ill-conditioned pivots, wrong grouping)
    just forfeit the extra start.

    The strict negativity guard inside the eigendecomposition rejects sampling
    noise that a warm start tolerates perfectly well (everything is clipped to
    the simplex below), so progressively looser guards are tried before giving
    up.
    """
    try:
        if hasattr(tensor, "grouping"):
            jt = tensor
        else:
            jt = JointChoiceTensor(P.shape[0], (1, 1, 1), ((1,), (2,), (3,)), P)
        spec = None
        for guard in (1e-6, float("inf")):
            try:
                spec = spectral_identify(jt, d_hat, SpectralOptions(zero_tol=guard, menu_tol=1e-6))
                break
            except Exception:
                continue
        if spec is None:
            return None
        F = np.clip(np.asarray(spec.F_hat, dtype=float), 0.0, None)
        if F.shape != (3, P.shape[0], d_hat):
            return None
        sums = F.sum(axis=1, keepdims=True)
        F = np.where(sums > 0, F / np.where(sums > 0, sums, 1.0), 1.0 / P.shape[0])
        m = np.clip(np.asarray(spec.m_hat, dtype=float), 1e-12, None)
        return F, m / m.sum()
    except Exception:
        return None


def step1_fit(tensor, d_hat: int, cfg: FitConfig = FitConfig()) -> Step1Result:
    """Unmasked constrained least squares, best of cfg.starts random starts."""
    P = _probs_of(tensor)
    if d_hat < 1:
        raise ValueError("d_hat must be at least 1")
    rng = _seeded(cfg.seed, 1)
    F1, F2, F3, M = opt.dirichlet_factors(rng, cfg.starts, P.shape, d_hat)
    warm = _spectral_start(tensor, P, d_hat)
    if warm is not None:
        Fw, Mw = warm
        if cfg.tie_F_across_t:
            shared = Fw.mean(axis=0)
            F1[0] = shared / shared.sum(axis=0, keepdims=True)
        else:
            F1[0], F2[0], F3[0] = Fw[0], Fw[1], Fw[2]
        M[0] = Mw
    polish, start_objs, converged = _best_fit(P, F1, F2, F3, M, None, cfg, cfg.tie_F_across_t)
    F_bar = np.stack([f[0] for f in polish.factors])
    return Step1Result(
        F_bar=F_bar,
        M_bar=polish.M[0],
        objective=float(polish.objective[0]),
        converged=converged,
        start_objectives=start_objs,
    )


@dataclass(frozen=True)
class TrimResult:
    """Trimmed kernels and the menus read off their zero patterns."""

    F: np.ndarray  # (T, Y, k) kept columns, trimmed and renormalized
    menus: tuple[ChoiceSetMask, ...]
    kept: tuple[int, ...]  # original column indices, in input order
    dropped_duplicates: tuple[int, ...]
    duplicate_of: tuple[int, ...]  # kept original index each duplicate collided with


def trim_normalize(F_bar: np.ndarray, eps: float) -> TrimResult:
    """Zero out kernel entries below eps, renormalize, and read off menus.

    An alternative belongs to a component's menu if it survives trimming in
    any period.  Components whose menus coincide are deduplicated, keeping the
    first occurrence.
    """
    F = np.asarray(F_bar, dtype=float)
    if F.ndim == 2:
        F = F[None]
    if F.ndim != 3:
        raise ValueError("F_bar must have shape (periods, Y, d)")
    _, Y, d = F.shape
    if not 0.0 < eps < 1.0 / Y:
        raise ValueError(f"eps must lie in (0, 1/{Y})")
    Z = np.where(F >= eps, F, 0.0)
    sums = Z.sum(axis=1)  # (T, d)
    dead = np.flatnonzero((sums <= 0).any(axis=0))
    if dead.size:
        raise EstimationError(
            f"degenerate component: column {int(dead[0])} lies entirely below the trim threshold"
        )
    Fn = Z / sums[:, None, :]
    support = (Z > 0).any(axis=0)  # (Y, d)
    seen: dict[int, int] = {}
    kept: list[int] = []
    dropped: list[int] = []
    duplicate_of: list[int] = []
    for j in range(d):
        mask = ChoiceSetMask.from_indicator(support[:, j])
        if mask.bits in seen:
            dropped.append(j)
            duplicate_of.append(seen[mask.bits])
        else:
            seen[mask.bits] = j
            kept.append(j)
    menus = tuple(ChoiceSetMask.from_indicator(support[:, j]) for j in kept)
    return TrimResult(
        F=Fn[:, :, kept],
        menus=menus,
        kept=tuple(kept),
        dropped_duplicates=tuple(dropped),
        duplicate_of=tuple(duplicate_of),
    )


def full_dictionary_masks(Y: int) -> np.ndarray:
    """Indicator matrix (Y, 2^Y - 1); column j is the menu with bits j + 1."""
    if not 1 <= Y <= MAX_ALTERNATIVES:
        raise ValueError(f"Y must lie in 1..{MAX_ALTERNATIVES}")
    bits = np.arange(1, 2**Y)
    return ((bits[None, :] >> np.arange(Y)[:, None]) & 1).astype(float)


def dictionary_bits(Y: int, require: tuple[int, ...] = ()) -> np.ndarray:
    """Menu bit patterns admitted to the dictionary, ascending.

    ``require`` lists alternatives assumed present in every menu (domain
    knowledge such as a default option everyone considers); the dictionary
    then keeps only the menus containing them, shrinking from 2^Y - 1 columns
    to 2^(Y - r) for r required alternatives.
    """
    if not 1 <= Y <= MAX_ALTERNATIVES:
        raise ValueError(f"Y must lie in 1..{MAX_ALTERNATIVES}")
    req = 0
    for a in require:
        a = int(a)
        if not 1 <= a <= Y:
            raise ValueError(f"required alternative {a} outside 1..{Y}")
        req |= 1 << (a - 1)
    bits = np.arange(1, 2**Y)
    return bits[(bits & req) == req]


def masks_for_bits(bits: np.ndarray, Y: int) -> np.ndarray:
    """Indicator matrix (Y, len(bits)) for an explicit menu dictionary."""
    bits = np.asarray(bits)
    return ((bits[None, :] >> np.arange(Y)[:, None]) & 1).astype(float)


def embed_warm_start(trim: TrimResult, M_bar: np.ndarray, Y: int, F_bar=None, bits=None):
    """Place trimmed Step-1 columns at their dictionary slots.

    ``bits`` lists the dictionary's menu patterns (default: every nonempty
    menu); a trimmed pattern outside the dictionary is widened by the
    alternatives the dictionary requires everywhere.  Unused slots get the
    uniform distribution on their menu and weight zero.  A component whose
    trimmed pattern collided with an earlier menu carries real information
    about a nearby menu, so when the untrimmed columns are supplied its
    weakest alternatives are stripped until the pattern reaches a free slot;
    without them (or when no free slot remains) its weight merges into the
    surviving twin as before.
    """
    if bits is None:
        bits = np.arange(1, 2**Y)
    bits = np.asarray(bits, dtype=int)
    req = int(np.bitwise_and.reduce(bits))
    col_of = {int(b): i for i, b in enumerate(bits)}
    nd = len(bits)
    A = masks_for_bits(bits, Y)
    F0 = np.broadcast_to(A / A.sum(axis=0), (3, Y, nd)).copy()
    M0 = np.zeros(nd)
    M_bar = np.asarray(M_bar, dtype=float)
    slot_of: dict[int, int] = {}
    claimed: set[int] = set()
    for i, mask in enumerate(trim.menus):
        b = mask.bits | req
        j = col_of[b]
        slot_of[trim.kept[i]] = j
        claimed.add(b)
        # a pattern the dictionary widens keeps its kernel; the required
        # entries simply start at zero inside a roomier mask
        F0[:, :, j] = trim.F[:, :, i]
        M0[j] += M_bar[trim.kept[i]]
    for j_orig, twin in zip(trim.dropped_duplicates, trim.duplicate_of):
        rescued = False
        if F_bar is not None:
            col = np.asarray(F_bar, dtype=float)[:, :, j_orig]  # (3, Y)
            pooled = col.sum(axis=0)
            pattern = int(bits[slot_of[twin]])  # the collided menu, weakest bits first
            order = sorted(
                (a for a in range(Y) if (pattern >> a) & 1 and not (req >> a) & 1),
                key=lambda a: pooled[a],
            )
            for a in order:
                if bin(pattern).count("1") <= 1:
                    break
                pattern &= ~(1 << a)
                if pattern not in claimed and pattern in col_of:
                    keep = np.array([(pattern >> y) & 1 for y in range(Y)], dtype=float)
                    stripped = col * keep[None, :]
                    sums = stripped.sum(axis=1, keepdims=True)
                    if np.all(sums > 0):
                        F0[:, :, col_of[pattern]] = stripped / sums
                        M0[col_of[pattern]] += M_bar[j_orig]
                        claimed.add(pattern)
                        rescued = True
                    break
        if not rescued:
            M0[slot_of[twin]] += M_bar[j_orig]
    total = M0.sum()
    if total > 0:
        M0 = M0 / total
    else:
        M0 = np.full(nd, 1.0 / nd)
    return F0, M0


@dataclass(frozen=True)
class Step2Result:
    """Masked fit over the full menu dictionary."""

    F: np.ndarray  # (3, Y, 2^Y - 1)
    M: np.ndarray  # (2^Y - 1,)
    objective: float
    converged: bool


def step2_masked_fit(tensor, start, cfg: FitConfig = FitConfig(), masks=None) -> Step2Result:
    """Local descent over the masked menu dictionary from warm starts.

    ``start`` is an (F0, M0) pair shaped for the dictionary (typically from
    embed_warm_start), or a sequence of such pairs fitted side by side with
    the best final objective winning.  ``masks`` is the dictionary indicator
    matrix (default: every nonempty menu).  Starts violating the dictionary
    mask are projected onto it before the first sweep.  The sweep budget is
    four times cfg.max_iter: the dictionary problem is far flatter than the
    d_hat-column fits, and an under-converged dictionary poisons selection.
    """
    P = _probs_of(tensor)
    Y = P.shape[0]
    if P.shape != (Y, Y, Y):
        raise ValueError("step-2 expects an ungrouped cubical tensor")
    if isinstance(start, tuple) and len(start) == 2 and np.asarray(start[0]).ndim == 3:
        starts = [start]
    else:
        starts = list(start)
        if not starts:
            raise ValueError("at least one warm start is required")
    A = full_dictionary_masks(Y) if masks is None else np.asarray(masks, dtype=float)
    nd = A.shape[1]
    F0s, M0s = [], []
    for F0, M0 in starts:
        F0 = np.asarray(F0, dtype=float)
        M0 = np.asarray(M0, dtype=float)
        if F0.shape != (3, Y, nd) or M0.shape != (nd,):
            raise ValueError("warm start dimensions do not match the dictionary")
        F0s.append(F0)
        M0s.append(M0)
    sweeps = cfg.max_iter * 4
    tol = min(cfg.tol * 1e-2, 1e-12)
    if cfg.tie_F_across_t:
        fit = opt.fit_trilinear_tied(
            P, np.stack([f.mean(axis=0) for f in F0s]), np.stack(M0s),
            mask=A, max_sweeps=sweeps, tol=tol, rel_tol=1e-8,
        )
    else:
        fit = opt.fit_trilinear(
            P, np.stack([f[0] for f in F0s]), np.stack([f[1] for f in F0s]),
            np.stack([f[2] for f in F0s]), np.stack(M0s),
            mask=A, max_sweeps=sweeps, tol=tol, rel_tol=1e-8, objective=cfg.objective,
        )
    _check_monotone(fit, "step-2 fit")
    b = int(np.argmin(fit.objective))
    return Step2Result(
        F=np.stack([f[b] for f in fit.factors]),
        M=fit.M[b],
        objective=float(fit.objective[b]),
        converged=fit.converged,
    )


@dataclass(frozen=True)
class BestSubsetSolution:
    """Exact solution of the cardinality-constrained dictionary regression."""

    B: np.ndarray  # 0/1 per dictionary column
    M: np.ndarray  # simplex weights, supported within B
    objective: float  # residual sum of squares, recomputable from (M, dictionary)
    proved_optimal: bool
    method: str
    nodes: int = 0
    # next-best supports seen during the solve, ordered by dictionary value;
    # near-optimal alternates, useful for refit comparisons downstream
    alternates: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self) -> None:
        B = np.asarray(self.B, dtype=np.int8)
        M = np.asarray(self.M, dtype=float)
        if np.any((B != 0) & (B != 1)):
            raise ValueError("B must be a 0/1 vector")
        if np.any(M < 0) or abs(M.sum() - 1.0) > 1e-9:
            raise ValueError("M must lie on the simplex")
        if np.any((M > _ZERO_WEIGHT) & (B == 0)):
            raise ValueError("M places weight outside B")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "M", M)

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(int(j) for j in np.flatnonzero(self.B))


def _dictionary_gram(P: np.ndarray, F: np.ndarray):
    K = np.einsum("aj,bj,cj->abcj", F[0], F[1], F[2]).reshape(-1, F.shape[2])
    p = P.reshape(-1)
    return K.T @ K, K.T @ p, float(p @ p)


def _value_at(Gram, lin, ppp, idx, x):
    idx = np.asarray(idx, dtype=np.intp)
    x = np.clip(x, 0.0, None)
    s = x.sum()
    if s <= 0:
        return np.inf, x
    x = x / s
    sub = Gram[np.ix_(idx, idx)]
    return float(ppp - 2.0 * lin[idx] @ x + x @ sub @ x), x


class _TopK:
    """Bounded collector of the best (value, support) pairs seen so far."""

    def __init__(self, k: int = 8) -> None:
        self.k = k
        self.items: dict[tuple[int, ...], float] = {}

    def push(self, val: float, support: tuple[int, ...]) -> None:
        if not support or not np.isfinite(val):
            return
        old = self.items.get(support)
        if old is None or val < old:
            self.items[support] = float(val)
            if len(self.items) > 4 * self.k:
                self._prune()

    def _prune(self) -> None:
        keep = sorted(self.items.items(), key=lambda kv: (kv[1], kv[0]))[: self.k]
        self.items = dict(keep)

    def ranked(self, exclude: tuple[int, ...]) -> tuple[tuple[int, ...], ...]:
        self._prune()
        ordered = sorted(self.items.items(), key=lambda kv: (kv[1], kv[0]))
        return tuple(sup for sup, _ in ordered if sup != exclude)


def _best_subset_exhaustive(Gram, lin, ppp, d_max, ridge, alts: _TopK | None = None):
    nd = Gram.shape[0]
    Gr = Gram + ridge * np.eye(nd)
    best_val = np.inf
    best_idx: tuple[int, ...] | None = None
    best_x = None
    for s in range(1, d_max + 1):
        combos = np.array(list(itertools.combinations(range(nd), s)), dtype=np.intp)
        ncomb = combos.shape[0]
        Qs = Gr[combos[:, :, None], combos[:, None, :]]
        bs = lin[combos]
        K = np.zeros((ncomb, s + 1, s + 1))
        K[:, :s, :s] = 2.0 * Qs
        K[:, :s, s] = 1.0
        K[:, s, :s] = 1.0
        rhs = np.concatenate([2.0 * bs, np.ones((ncomb, 1))], axis=1)
        sol = np.linalg.solve(K, rhs[..., None])[..., 0]
        x = sol[:, :s]
        feasible = x.min(axis=1) >= -1e-11
        if not feasible.any():
            continue
        xc = np.clip(x, 0.0, None)
        xc = xc / xc.sum(axis=1, keepdims=True)
        Q0 = Gram[combos[:, :, None], combos[:, None, :]]
        vals = ppp - 2.0 * (bs * xc).sum(axis=1) + np.einsum("ns,nst,nt->n", xc, Q0, xc)
        vals = np.where(feasible, vals, np.inf)
        i = int(np.argmin(vals))
        if vals[i] < best_val - 1e-15 or (
            best_idx is not None
            and abs(vals[i] - best_val) <= 1e-15
            and tuple(combos[i]) < best_idx
        ):
            best_val = float(vals[i])
            best_idx = tuple(int(j) for j in combos[i])
            best_x = xc[i]
        if alts is not None:
            n_keep = min(4 * alts.k, int(feasible.sum()))
            for r in np.argpartition(vals, n_keep - 1)[:n_keep] if n_keep else ():
                alts.push(float(vals[r]), tuple(int(j) for j in combos[r]))
    if best_idx is None:
        raise EstimationError("no feasible menu subset found")
    return best_idx, best_x, best_val


def _best_subset_bnb(Gram, lin, ppp, d_max, ridge, node_limit, hint_supports,
                     alts: _TopK | None = None):
    nd = Gram.shape[0]
    Gr = Gram + ridge * np.eye(nd)
    arange = np.arange(nd)
    best = {"val": np.inf, "idx": None, "x": None}
    all_certified = True

    def consider(idx_tuple):
        nonlocal all_certified
        idx = np.asarray(idx_tuple, dtype=np.intp)
        allowed = np.zeros(nd, dtype=bool)
        allowed[idx] = True
        x, _, cert = opt.simplex_qp_exact(Gr, lin, allowed=allowed)
        if not cert:
            all_certified = False
        val, xn = _value_at(Gram, lin, ppp, tuple(range(nd)), x)
        support = tuple(int(j) for j in np.flatnonzero(xn > _ZERO_WEIGHT))
        if alts is not None:
            alts.push(val, support)
        if val < best["val"] - 1e-15 or (
            best["idx"] is not None and abs(val - best["val"]) <= 1e-15 and support < best["idx"]
        ):
            best["val"] = val
            best["idx"] = support if support else tuple(idx_tuple[:1])
            best["x"] = xn

    relax_cache: dict[int, tuple[np.ndarray, float, bool]] = {}

    def relax(O: int):
        hit = relax_cache.get(O)
        if hit is not None:
            return hit
        allowed = ((O >> arange) & 1) == 0
        out = opt.simplex_qp_exact(Gr, lin, allowed=allowed)
        relax_cache[O] = out
        return out

    # incumbents: caller hints, then the greedy top-d restriction of the root
    for hint in hint_supports:
        if 0 < len(hint) and len(hint) <= d_max:
            consider(tuple(sorted(hint)))
    x0, _, cert0 = relax(0)
    order = np.argsort(-x0)
    consider(tuple(sorted(int(j) for j in order[:d_max])))

    stack: list[tuple[int, int]] = [(0, 0)]
    nodes = 0
    proved = True
    while stack:
        if nodes >= node_limit:
            proved = False
            break
        I, O = stack.pop()
        nodes += 1
        n_in = bin(I).count("1")
        free = d_max - n_in
        if free <= 0:
            consider(tuple(int(j) for j in range(nd) if (I >> j) & 1))
            continue
        x, val_r, cert = relax(O)
        if not cert:
            all_certified = False
            lb = -np.inf
        else:
            lb = ppp + val_r - ridge
        if lb >= best["val"] - 1e-12:
            continue
        supp = np.flatnonzero(x > 1e-11)
        extra = [int(j) for j in supp if not (I >> int(j)) & 1]
        if len(extra) <= free:
            val, xn = _value_at(Gram, lin, ppp, tuple(range(nd)), x)
            support = tuple(int(j) for j in np.flatnonzero(xn > _ZERO_WEIGHT))
            if alts is not None:
                alts.push(val, support)
            if val < best["val"] - 1e-15 or (
                best["idx"] is not None
                and abs(val - best["val"]) <= 1e-15
                and support < best["idx"]
            ):
                best["val"] = val
                best["idx"] = support
                best["x"] = xn
            continue
        weights = np.array([x[j] for j in extra])
        j_star = extra[int(np.argmax(weights))]
        stack.append((I, O | (1 << j_star)))
        stack.append((I | (1 << j_star), O))
    if best["idx"] is None:
        raise EstimationError("branch-and-bound found no feasible candidate")
    if alts is not None:
        # leave-one-out relaxations force the weights onto substitutes of each
        # winning column, surfacing near-optimal supports the pruning skipped
        for j in tuple(best["idx"]):
            x_loo, _, _ = relax(1 << j)
            order = np.argsort(-x_loo)
            consider(tuple(sorted(int(t) for t in order[:d_max])))
    return best["idx"], best["x"], best["val"], proved and all_certified, nodes


def best_subset_select(tensor, F_s2: np.ndarray, d_hat: int, cfg: FitConfig = FitConfig(),
                       hint_supports: tuple[tuple[int, ...], ...] = ()) -> BestSubsetSolution:
    """Exact best-subset menu selection over the fixed Step-2 dictionary.

    The dictionary column j is the rank-one product of the Step-2 kernels for
    menu bits j + 1; the solve picks at most d_hat columns and simplex weights
    minimizing the squared residual to the tensor.
    """
    P = _probs_of(tensor)
    F = np.asarray(F_s2, dtype=float)
    if F.ndim != 3 or F.shape[0] != 3:
        raise ValueError("F_s2 must have shape (3, Y, n_columns)")
    nd = F.shape[2]
    if d_hat < 1:
        raise ValueError("d_hat must be at least 1")
    d_max = min(d_hat, nd)
    Gram, lin, ppp = _dictionary_gram(P, F)
    ridge = 1e-12 * max(1.0, float(np.trace(Gram)) / nd)
    n_combos = math.comb(nd, d_max)
    mode = cfg.mio_mode
    if mode == "auto":
        mode = "exact_enumeration" if n_combos <= cfg.enum_budget else "branch_and_bound"
    alts = _TopK()
    if mode == "exact_enumeration":
        idx, x, val = _best_subset_exhaustive(Gram, lin, ppp, d_max, ridge, alts)
        proved, nodes = True, 0
    else:
        idx, x, val, proved, nodes = _best_subset_bnb(
            Gram, lin, ppp, d_max, ridge, cfg.node_limit, hint_supports, alts
        )
        # x from branch-and-bound is full-length; reduce to the support
        x = np.asarray(x)[list(idx)]
    B = np.zeros(nd, dtype=np.int8)
    B[list(idx)] = 1
    M = np.zeros(nd)
    M[list(idx)] = np.clip(x, 0.0, None)
    s = M.sum()
    M = M / s if s > 0 else M
    return BestSubsetSolution(
        B=B, M=M, objective=max(float(val), 0.0),
        proved_optimal=proved, method=mode, nodes=nodes,
        alternates=alts.ranked(exclude=tuple(int(j) for j in np.flatnonzero(B))),
    )


def _canonical_order(menus, m, F):
    order = sorted(range(len(menus)), key=lambda j: (menus[j].bits, -m[j]))
    return (
        tuple(menus[j] for j in order),
        np.asarray(m)[order],
        np.asarray(F)[:, :, order],
    )


def final_fit(tensor, menus, cfg: FitConfig = FitConfig(), warm=None) -> MixtureEstimate:
    """Constrained least squares restricted to the selected menus."""
    P = _probs_of(tensor)
    Y = P.shape[0]
    if P.shape != (Y, Y, Y):
        raise ValueError("final fit expects an ungrouped cubical tensor")
    menus = tuple(menus)
    if not menus:
        raise ValueError("at least one menu is required")
    if len({mask.bits for mask in menus}) != len(menus):
        raise ValueError("menus must be distinct")
    for mask in menus:
        if mask.bits == 0:
            raise ValueError("menus must be nonempty")
        if mask.Y != Y:
            raise ValueError("menu universe size does not match the tensor")
    k = len(menus)
    A = np.stack([mask.indicator() for mask in menus], axis=1).astype(float)  # (Y, k)
    rng = _seeded(cfg.seed, 3)
    F1, F2, F3, M = opt.dirichlet_factors(rng, cfg.starts, P.shape, k, mask=A)
    if warm is not None:
        Fw, Mw = warm
        Fw = np.asarray(Fw, dtype=float)
        F1[0], F2[0], F3[0] = Fw[0], Fw[1], Fw[2]
        M[0] = np.asarray(Mw, dtype=float)
    polish, _, converged = _best_fit(P, F1, F2, F3, M, A, cfg, cfg.tie_F_across_t)
    F_hat = np.stack([f[0] for f in polish.factors])
    menus_c, m_c, F_c = _canonical_order(menus, polish.M[0], F_hat)
    return MixtureEstimate(
        menus=menus_c,
        m_hat=m_c,
        F_hat=F_c,
        periods=(1, 2, 3),
        fit_residual=float(polish.objective[0]),
    )


@dataclass(frozen=True)
class TwoStepResult:
    """Everything the two-step pipeline produced along the way."""

    estimate: MixtureEstimate
    d_hat: int
    step1: Step1Result
    step1_menus: tuple[ChoiceSetMask, ...]
    step2: Step2Result
    subset: BestSubsetSolution
    warnings: tuple[str, ...]
    # every refit the selection stage scored: (menu bit patterns, residual,
    # total cardinality)
    contest: tuple[tuple[tuple[int, ...], float, int], ...] = ()


def two_step_estimate(
    tensor,
    d_hat: int | None = None,
    cfg: FitConfig = FitConfig(),
    n_obs: int | None = None,
    rank_tau: float = DEFAULT_RANK_TAU,
    require: tuple[int, ...] = (),
) -> TwoStepResult:
    """Step-1 fit, trim, Step-2 dictionary refit, exact selection, final fit.

    ``require`` lists alternatives known to sit in every menu (an always
    available outside option, say); the Step-2 dictionary and everything
    selection touches downstream are restricted to menus containing them.
    Step-1 stays unrestricted: its kernels are free-form by construction.
    """
    P = _probs_of(tensor)
    Y = P.shape[0]
    if P.shape != (Y, Y, Y):
        raise ValueError("the two-step pipeline expects an ungrouped cubical tensor")
    bits = dictionary_bits(Y, require)
    req = 0
    for a in require:
        req |= 1 << (a - 1)
    col_of = {int(b): i for i, b in enumerate(bits)}
    masks = masks_for_bits(bits, Y)
    warnings: list[str] = []
    if d_hat is None:
        rank = estimate_rank(_TensorView(P), tau=rank_tau)
        d_hat = rank.d_hat
        if rank.saturated:
            warnings.append("rank estimate saturated: true menu count may exceed d_hat")
    step1 = step1_fit(P, d_hat, cfg)
    if not step1.converged:
        warnings.append("step-1 iteration cap reached before tolerance")
    eps = cfg.trim_eps(Y, n_obs)
    trimmed = trim_normalize(step1.F_bar, eps)
    if trimmed.dropped_duplicates:
        warnings.append(
            f"step-1 components {list(trimmed.dropped_duplicates)} duplicated an earlier menu and were dropped"
        )
    starts = [embed_warm_start(trimmed, step1.M_bar, Y, F_bar=step1.F_bar, bits=bits)]
    hint_pool = [tuple(sorted({mask.bits | req for mask in trimmed.menus}))]
    spec = _spectral_start(tensor, P, d_hat)
    if spec is not None:
        # the closed-form estimate explores a second basin of the dictionary
        # problem; its trimmed embedding often keeps components that the
        # step-1 optimum smeared together
        F_spec, m_spec = spec
        try:
            trim_spec = trim_normalize(F_spec, eps)
            starts.append(embed_warm_start(trim_spec, m_spec, Y, F_bar=F_spec, bits=bits))
            hint_pool.append(tuple(sorted({mask.bits | req for mask in trim_spec.menus})))
        except EstimationError:
            pass
    step2 = step2_masked_fit(P, starts, cfg, masks=masks)
    if not step2.converged:
        warnings.append("step-2 iteration cap reached before tolerance")
    hints_b = tuple(sup for sup in hint_pool if 0 < len(sup) <= d_hat)
    hints = tuple(tuple(col_of[b] for b in sup) for sup in hints_b)
    subset = best_subset_select(P, step2.F, d_hat, cfg, hint_supports=hints)
    if not subset.proved_optimal:
        warnings.append("subset selection returned an unproven incumbent")
    active = [int(bits[j]) for j in subset.support if subset.M[j] > _ZERO_WEIGHT]
    if not active:
        active = [int(bits[j]) for j in subset.support]

    def dict_warm(support):
        cols = [col_of[b] for b in support]
        wgt = np.clip(subset.M[cols], 0.0, None)
        tot = wgt.sum()
        wgt = wgt / tot if tot > _ZERO_WEIGHT else np.full(len(support), 1.0 / len(support))
        return step2.F[:, :, cols], wgt

    # the dictionary value ranks supports with kernels frozen at the Step-2
    # fit; refitting kernels per support is the fair comparison.  But roomier
    # menus also soak up sampling noise, so the lowest refit residual alone
    # systematically favors supports that inflate a true menu.  Among refits
    # whose residuals land within a relative band of the best, the data
    # cannot tell the supports apart, and the smallest total menu cardinality
    # is the one the mixture actually identifies.  Supports are tuples of
    # menu bit patterns from here on.
    pool = [tuple(active)]
    alt_bits = tuple(
        tuple(sorted(int(bits[j]) for j in alt)) for alt in subset.alternates[:4]
    )
    for alt in alt_bits + hints_b:
        if 0 < len(alt) <= d_hat and alt not in pool:
            pool.append(alt)
    quick_cfg = replace(cfg, starts=max(4, cfg.starts // 4))
    board: dict[tuple[int, ...], MixtureEstimate] = {}

    def card(support) -> int:
        return sum(bin(b).count("1") for b in support)

    def fit_support(support):
        cand_menus = tuple(ChoiceSetMask(b, Y) for b in support)
        try:
            return final_fit(P, cand_menus, quick_cfg, warm=dict_warm(support))
        except EstimationError:
            return None

    def trimmed_support(fit):
        # a refit whose kernels vanish on part of a menu is really using a
        # tighter support; that support deserves its own seat at the table
        try:
            tr = trim_normalize(fit.F_hat, eps)
        except EstimationError:
            return None
        sup = tuple(sorted({mask.bits | req for mask in tr.menus}))
        return sup if 0 < len(sup) <= d_hat else None

    queue = list(pool)
    while queue and len(board) < 12:
        support = queue.pop(0)
        if support in board:
            continue
        fit = fit_support(support)
        if fit is None:
            continue
        board[support] = fit
        derived = trimmed_support(fit)
        if (
            support == pool[0]
            and fit.fit_residual < 1e-14
            and derived in (None, support)
            and all(card(support) <= card(s) for s in pool)
        ):
            break  # exact fit by the tightest contender; nothing to contest
        if derived and derived not in board and derived not in queue:
            queue.append(derived)
    best_res = min((f.fit_residual for f in board.values()), default=np.inf)
    if best_res > 1e-14:
        # sampling noise can park a dictionary column in the wrong shape and
        # drag selection with it; an exhaustive refit over the union of the
        # contenders' columns re-judges every subset with its own best kernels
        union_bits: list[int] = []
        for sup in list(board) + list(alt_bits):
            union_bits.extend(b for b in sup if b not in union_bits)
        union_bits = union_bits[:9]
        if len(union_bits) > d_hat:
            cand_menus = tuple(ChoiceSetMask(b, Y) for b in sorted(union_bits))
            bf_cfg = replace(cfg, starts=6, max_iter=min(cfg.max_iter, 150))
            try:
                bf = brute_force_estimate(P, d_hat, cand_menus, bf_cfg)
                bf_sup = tuple(sorted(mask.bits for mask in bf.menus))
                if 0 < len(bf_sup) <= d_hat and bf_sup not in board:
                    # the winning combination's fitted kernels may have been
                    # trimmed onto different menus, so its reported residual is
                    # not attainable by the menus it reports; rescore honestly
                    rescored = final_fit(
                        P, tuple(ChoiceSetMask(b, Y) for b in bf_sup),
                        quick_cfg, warm=(bf.F_hat, bf.m_hat),
                    )
                    board[bf_sup] = rescored
                    derived = trimmed_support(rescored)
                    if derived and derived not in board:
                        dfit = fit_support(derived)
                        if dfit is not None:
                            board[derived] = dfit
            except EstimationError:
                pass
    if board:
        best_res = min(f.fit_residual for f in board.values())
        thresh = max(best_res * (1.0 + _PARSIMONY_BAND), 1e-14)
        chosen = min(
            (s for s, f in board.items() if f.fit_residual <= thresh),
            key=lambda s: (card(s), board[s].fit_residual, s),
        )
        quick_est = board[chosen]
    else:
        chosen, quick_est = pool[0], None
    menus = tuple(ChoiceSetMask(b, Y) for b in chosen)
    warm = (quick_est.F_hat, quick_est.m_hat) if quick_est is not None else dict_warm(chosen)
    estimate = final_fit(P, menus, cfg, warm=warm)
    return TwoStepResult(
        estimate=estimate,
        d_hat=d_hat,
        step1=step1,
        step1_menus=trimmed.menus,
        step2=step2,
        subset=subset,
        warnings=tuple(warnings),
        contest=tuple(
            (s, float(f.fit_residual), card(s)) for s, f in board.items()
        ),
    )


class _TensorView:
    """Minimal duck-typed wrapper so raw arrays can flow into estimate_rank."""

    def __init__(self, probs: np.ndarray) -> None:
        self.probs = probs


def brute_force_estimate(
    tensor,
    d_hat: int,
    candidate_menus=None,
    cfg: FitConfig = FitConfig(),
) -> MixtureEstimate:
    """Fit every d_hat-combination of candidate menus; return the best fit.

    This is the straightforward estimator: exhaustive over menu combinations,
    each fitted by masked multistart least squares.  Refuses to run when the
    combination count exceeds cfg.enum_budget.
    """
    P = _probs_of(tensor)
    Y = P.shape[0]
    if P.shape != (Y, Y, Y):
        raise ValueError("brute force expects an ungrouped cubical tensor")
    if candidate_menus is None:
        candidates = [ChoiceSetMask(bits, Y) for bits in range(1, 2**Y)]
    else:
        candidates = sorted(candidate_menus, key=lambda mask: mask.bits)
        if len({mask.bits for mask in candidates}) != len(candidates):
            raise ValueError("candidate menus must be distinct")
    k = len(candidates)
    s = min(d_hat, k)
    n_combos = math.comb(k, s)
    if n_combos > cfg.enum_budget:
        raise BudgetExceededError(
            f"{n_combos} menu combinations of size {s} exceed the budget of {cfg.enum_budget}"
        )
    A_all = np.stack([mask.indicator() for mask in candidates], axis=1).astype(float)  # (Y, k)
    combos = list(itertools.combinations(range(k), s))
    # losing combinations only need coarse objective values, so the sweep
    # budget per start is small and the winner is re-polished afterwards
    starts = max(8, cfg.starts // 2)
    best_val = np.inf
    best_combo: tuple[int, ...] | None = None
    best_state = None
    rng = _seeded(cfg.seed, 4)
    chunk = max(1, 40_000 // max(1, starts))
    for lo in range(0, len(combos), chunk):
        part = combos[lo : lo + chunk]
        idx = np.asarray(part, dtype=np.intp)  # (nc, s)
        nc = idx.shape[0]
        mask = A_all[:, idx]  # (Y, nc, s)
        mask = np.repeat(np.moveaxis(mask, 1, 0), starts, axis=0)  # (nc*starts, Y, s)
        B = nc * starts
        F1, F2, F3, M = opt.dirichlet_factors(rng, B, P.shape, s, mask=mask)
        fit = opt.fit_trilinear(
            P, F1, F2, F3, M,
            mask=mask, max_sweeps=min(cfg.max_iter, 120), tol=cfg.tol,
            rel_tol=1e-4, inner_iters=4, m_iters=6, objective=cfg.objective,
        )
        _check_monotone(fit, "brute force fit")
        objs = fit.objective.reshape(nc, starts)
        per_combo = objs.min(axis=1)
        order = np.argsort(per_combo, kind="stable")
        for ci in order[: min(4, nc)]:
            val = per_combo[ci]
            if val < best_val - 1e-15 or (
                best_combo is not None
                and abs(val - best_val) <= 1e-15
                and part[ci] < best_combo
            ):
                si = int(np.argmin(objs[ci]))
                b = int(ci) * starts + si
                best_val = float(val)
                best_combo = part[ci]
                best_state = (
                    tuple(f[b : b + 1].copy() for f in fit.factors),
                    fit.M[b : b + 1].copy(),
                    mask[b : b + 1].copy(),
                )
    if best_combo is None:
        raise EstimationError("no menu combination could be fitted")
    factors, M, mask = best_state
    # the polish only has to pin the zero pattern down to the trim threshold,
    # so a moderate relative tolerance is enough
    polish = opt.fit_trilinear(
        P, *factors, M, mask=mask,
        max_sweeps=max(cfg.max_iter, 1500), tol=1e-28, rel_tol=1e-8,
        objective=cfg.objective,
    )
    m = polish.M[0]
    keep = [i for i in range(s) if m[i] > _ZERO_WEIGHT]
    if not keep:
        keep = [int(np.argmax(m))]
    F_fit = np.stack([f[0][:, keep] for f in polish.factors])
    m_keep = m[keep] / m[keep].sum()
    # a fitted kernel can reach the boundary of its nominal mask and thereby
    # represent a smaller menu exactly, so menus are read from the trimmed
    # zero pattern rather than from the combination that was fitted
    trimmed = trim_normalize(F_fit, cfg.eps)
    m_final = m_keep[list(trimmed.kept)].copy()
    for j_orig, twin in zip(trimmed.dropped_duplicates, trimmed.duplicate_of):
        m_final[trimmed.kept.index(twin)] += m_keep[j_orig]
    m_final = m_final / m_final.sum()
    menus_c, m_c, F_c = _canonical_order(trimmed.menus, m_final, trimmed.F)
    return MixtureEstimate(
        menus=menus_c,
        m_hat=m_c,
        F_hat=F_c,
        periods=(1, 2, 3),
        fit_residual=float(polish.objective[0]),
    )


@dataclass(frozen=True)
class PooledSupport:
    """Union of estimated menus across covariate cells."""

    menus: tuple[ChoiceSetMask, ...]
    full_variation: bool
    per_cell_counts: tuple[int, ...]


def pool_supports(estimates) -> PooledSupport:
    """Union the menus of per-cell estimates sharing preference covariates."""
    estimates = list(estimates)
    if not estimates:
        raise ValueError("at least one estimate is required")
    Y = estimates[0].Y
    seen: dict[int, ChoiceSetMask] = {}
    counts = []
    for est in estimates:
        if est.Y != Y:
            raise ValueError("estimates mix different alternative universes")
        counts.append(len(est.menus))
        for mask in est.menus:
            seen[mask.bits] = mask
    menus = tuple(seen[bits] for bits in sorted(seen))
    return PooledSupport(
        menus=menus,
        full_variation=len(menus) == 2**Y - 1,
        per_cell_counts=tuple(counts),
    )

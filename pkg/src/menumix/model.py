"""Domain types for finite mixtures of latent choice sets (menus).

A population is described by a grand set of ``Y`` alternatives, a small
collection of latent menus (nonempty subsets of the grand set), a probability
vector ``m`` over those menus, and per-period conditional choice kernels
``F[t, y, j]`` giving the probability of choosing alternative ``y`` at period
``t`` for a unit whose menu is ``j``.  Each unit draws its menu once and then
makes ``T`` conditionally independent choices, so the joint distribution of a
choice path is a mixture of product measures.

This module holds the immutable value types (:class:`ChoiceSetMask`,
:class:`MixtureModel`, :class:`JointChoiceTensor`, :class:`DGPSpec`, plus the
first-order-dependence variant :class:`MarkovMixtureModel`) and the exact
population-side operations on them: pmf evaluation, population tensor
construction, panel sampling, and assumption diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ChoiceSetMask",
    "MixtureModel",
    "JointChoiceTensor",
    "DGPSpec",
    "MarkovMixtureModel",
    "AssumptionReport",
    "eval_mixture_pmf",
    "build_population_tensor",
    "sample_panel",
    "check_assumptions",
    "DGP1",
    "DGP2",
]

MAX_ALTERNATIVES = 16


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def _check_simplex(v: np.ndarray, what: str, tol: float = 1e-9) -> None:
    if np.any(v < -tol):
        raise ValueError(f"{what} has negative entries")
    if abs(float(v.sum()) - 1.0) > tol:
        raise ValueError(f"{what} must sum to 1 (got {float(v.sum())!r})")


@dataclass(frozen=True, order=True)
class ChoiceSetMask:
    """A nonempty subset of the grand choice set, stored as a bit mask.

    Alternative ``y`` (1-based) is in the set iff bit ``y - 1`` of ``bits``
    is on.  Masks order canonically by their integer value, which gives the
    deterministic tie-break used throughout the estimator.

    Attributes
    ----------
    bits : int
        Bit pattern of the subset; ``0 < bits < 2**Y``.
    Y : int
        Size of the grand choice set, at most ``16``.
    """

    bits: int
    Y: int = field(compare=False)

    def __post_init__(self) -> None:
        if not 1 <= self.Y <= MAX_ALTERNATIVES:
            raise ValueError(f"Y must be in 1..{MAX_ALTERNATIVES}, got {self.Y}")
        if not 0 < self.bits < (1 << self.Y):
            raise ValueError(f"mask bits {self.bits} out of range for Y={self.Y} (empty sets not allowed)")

    @classmethod
    def from_alternatives(cls, alternatives: Iterable[int], Y: int) -> "ChoiceSetMask":
        bits = 0
        for y in alternatives:
            if not 1 <= int(y) <= Y:
                raise ValueError(f"alternative {y} out of range 1..{Y}")
            bits |= 1 << (int(y) - 1)
        return cls(bits, Y)

    @classmethod
    def from_indicator(cls, indicator: Sequence[float], tol: float = 0.0) -> "ChoiceSetMask":
        ind = np.asarray(indicator, dtype=float)
        bits = 0
        for i, v in enumerate(ind):
            if v > tol:
                bits |= 1 << i
        return cls(bits, len(ind))

    @property
    def alternatives(self) -> tuple[int, ...]:
        return tuple(y for y in range(1, self.Y + 1) if self.bits >> (y - 1) & 1)

    @property
    def size(self) -> int:
        return bin(self.bits).count("1")

    def contains(self, y: int) -> bool:
        return 1 <= y <= self.Y and bool(self.bits >> (y - 1) & 1)

    def issubset(self, other: "ChoiceSetMask") -> bool:
        return self.bits & ~other.bits == 0

    def indicator(self) -> np.ndarray:
        return np.array([1.0 if self.contains(y) else 0.0 for y in range(1, self.Y + 1)])

    def __str__(self) -> str:
        return "{" + ",".join(str(y) for y in self.alternatives) + "}"


@dataclass(frozen=True)
class MixtureModel:
    """A finite mixture of latent menus with per-period choice kernels.

    Attributes
    ----------
    Y : int
        Number of alternatives in the grand set.
    T : int
        Number of panel periods.
    menus : tuple[ChoiceSetMask, ...]
        The ``d`` distinct latent menus carrying positive probability.
    m : numpy.ndarray
        Length-``d`` probability vector over menus.
    F : numpy.ndarray
        Shape ``(T, Y, d)``; column ``F[t, :, j]`` is the choice distribution
        at period ``t`` conditional on menu ``j``.  Entries outside menu ``j``
        are exact structural zeros and each column sums to 1.
    """

    Y: int
    T: int
    menus: tuple[ChoiceSetMask, ...]
    m: np.ndarray
    F: np.ndarray

    def __post_init__(self) -> None:
        if not 1 <= self.Y <= MAX_ALTERNATIVES:
            raise ValueError(f"Y must be in 1..{MAX_ALTERNATIVES}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        menus = tuple(self.menus)
        object.__setattr__(self, "menus", menus)
        if not menus:
            raise ValueError("at least one menu required")
        if len({mask.bits for mask in menus}) != len(menus):
            raise ValueError("menus must be pairwise distinct")
        for mask in menus:
            if mask.Y != self.Y:
                raise ValueError("menu defined over a different grand set size")
        m = _readonly(np.asarray(self.m, dtype=float).reshape(-1))
        F = _readonly(np.asarray(self.F, dtype=float))
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "F", F)
        d = len(menus)
        if m.shape != (d,):
            raise ValueError(f"m must have length {d}")
        _check_simplex(m, "m")
        if F.shape != (self.T, self.Y, d):
            raise ValueError(f"F must have shape {(self.T, self.Y, d)}, got {F.shape}")
        support = np.stack([mask.indicator() for mask in menus], axis=1)  # (Y, d)
        if np.any(F[:, support == 0] != 0.0):
            raise ValueError("F must be exactly zero outside each menu")
        if np.any(F < 0):
            raise ValueError("F entries must be nonnegative")
        colsums = F.sum(axis=1)
        if np.any(np.abs(colsums - 1.0) > 1e-9):
            raise ValueError("each F[t, :, j] column must sum to 1")

    @property
    def n_menus(self) -> int:
        return len(self.menus)

    def support_matrix(self) -> np.ndarray:
        """Binary (Y, d) matrix whose column j is the indicator of menu j."""
        return np.stack([mask.indicator() for mask in self.menus], axis=1)


def eval_mixture_pmf(model: MixtureModel, y_tuple: Sequence[int]) -> float:
    """Exact probability of one complete choice path.

    Returns ``sum_j m[j] * prod_t F[t, y_t, j]``.
    """
    ys = tuple(int(y) for y in y_tuple)
    if len(ys) != model.T:
        raise ValueError(f"expected {model.T} choices, got {len(ys)}")
    for y in ys:
        if not 1 <= y <= model.Y:
            raise ValueError(f"choice {y} out of range 1..{model.Y}")
    terms = model.m.copy()
    for t, y in enumerate(ys):
        terms *= model.F[t, y - 1, :]
    return float(terms.sum())


def _default_periods(grouping: tuple[int, int, int], T: int) -> tuple[tuple[int, ...], ...]:
    k1, k2, k3 = grouping
    if min(k1, k2, k3) < 1:
        raise ValueError("each group must contain at least one period")
    if k1 + k2 + k3 > T:
        raise ValueError(f"grouping {grouping} needs {k1 + k2 + k3} periods but T={T}")
    periods = list(range(1, T + 1))
    return (
        tuple(periods[:k1]),
        tuple(periods[k1 : k1 + k2]),
        tuple(periods[k1 + k2 : k1 + k2 + k3]),
    )


@dataclass(frozen=True)
class JointChoiceTensor:
    """Joint pmf of three grouped choice variables.

    Axis ``a`` indexes the tuple of choices made in ``periods[a]``, flattened
    by the mixed-radix map where the earliest period is the most significant
    digit (see :meth:`index_of` / :meth:`choices_of`).

    Attributes
    ----------
    Y : int
        Number of alternatives.
    grouping : tuple[int, int, int]
        Sizes ``(K1, K2, K3)`` of the three period groups.
    periods : tuple[tuple[int, ...], ...]
        The period labels behind each axis; disjoint.
    probs : numpy.ndarray
        Shape ``(Y**K1, Y**K2, Y**K3)``, nonnegative, sums to 1.
    """

    Y: int
    grouping: tuple[int, int, int]
    periods: tuple[tuple[int, ...], ...]
    probs: np.ndarray

    def __post_init__(self) -> None:
        grouping = tuple(int(k) for k in self.grouping)
        periods = tuple(tuple(int(t) for t in g) for g in self.periods)
        object.__setattr__(self, "grouping", grouping)
        object.__setattr__(self, "periods", periods)
        if len(grouping) != 3 or len(periods) != 3:
            raise ValueError("exactly three period groups required")
        for k, group in zip(grouping, periods):
            if len(group) != k:
                raise ValueError(f"group {group} does not match grouping size {k}")
        flat = [t for g in periods for t in g]
        if len(set(flat)) != len(flat):
            raise ValueError("period groups must be disjoint")
        probs = _readonly(np.asarray(self.probs, dtype=float))
        object.__setattr__(self, "probs", probs)
        expected = tuple(self.Y**k for k in grouping)
        if probs.shape != expected:
            raise ValueError(f"probs must have shape {expected}, got {probs.shape}")
        if np.any(probs < -1e-12):
            raise ValueError("probabilities must be nonnegative")
        if abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1, got {float(probs.sum())!r}")

    def index_of(self, axis: int, choices: Sequence[int]) -> int:
        """Flat index on ``axis`` of a tuple of choices (1-based alternatives)."""
        k = self.grouping[axis]
        ys = tuple(int(y) for y in choices)
        if len(ys) != k:
            raise ValueError(f"axis {axis} expects {k} choices, got {len(ys)}")
        idx = 0
        for y in ys:
            if not 1 <= y <= self.Y:
                raise ValueError(f"choice {y} out of range 1..{self.Y}")
            idx = idx * self.Y + (y - 1)
        return idx

    def choices_of(self, axis: int, index: int) -> tuple[int, ...]:
        """Inverse of :meth:`index_of`."""
        k = self.grouping[axis]
        if not 0 <= index < self.Y**k:
            raise ValueError(f"index {index} out of range for axis {axis}")
        out = []
        for _ in range(k):
            out.append(index % self.Y + 1)
            index //= self.Y
        return tuple(reversed(out))

    def prob(self, c1: Sequence[int], c2: Sequence[int], c3: Sequence[int]) -> float:
        return float(self.probs[self.index_of(0, c1), self.index_of(1, c2), self.index_of(2, c3)])

    def to_json_dict(self) -> dict:
        return {
            "Y": self.Y,
            "grouping": list(self.grouping),
            "periods": [list(g) for g in self.periods],
            "probs": self.probs.tolist(),
        }


def _group_kernel(model: MixtureModel, group: tuple[int, ...]) -> np.ndarray:
    """(Y**K, d) matrix of P(group choices = tuple | menu j), tuple-flattened."""
    out = np.ones((1, model.n_menus))
    for t in group:
        Ft = model.F[t - 1]  # (Y, d)
        out = (out[:, None, :] * Ft[None, :, :]).reshape(-1, model.n_menus)
    return out


def build_population_tensor(
    model: MixtureModel,
    grouping: tuple[int, int, int] = (1, 1, 1),
    period_assignment: Sequence[Sequence[int]] | None = None,
) -> JointChoiceTensor:
    """Exact population joint pmf of three grouped choice variables.

    ``period_assignment`` defaults to consecutive groups starting at period 1.
    Groups must be disjoint; periods not mentioned are marginalized out (which
    is automatic given conditional independence across periods).
    """
    if period_assignment is None:
        periods = _default_periods(tuple(grouping), model.T)
    else:
        periods = tuple(tuple(int(t) for t in g) for g in period_assignment)
        flat = [t for g in periods for t in g]
        if len(set(flat)) != len(flat):
            raise ValueError("period groups must be disjoint")
        for t in flat:
            if not 1 <= t <= model.T:
                raise ValueError(f"period {t} out of range 1..{model.T}")
        if tuple(len(g) for g in periods) != tuple(grouping):
            raise ValueError("period assignment does not match grouping sizes")
    V = [_group_kernel(model, g) for g in periods]
    probs = np.einsum("aj,bj,cj,j->abc", V[0], V[1], V[2], model.m)
    return JointChoiceTensor(model.Y, tuple(grouping), periods, probs)


# Counter-based uniforms: a double SplitMix64 finalizer keyed by (seed, counter).
# Unit i consumes counters i*(T+1) .. i*(T+1)+T, so enlarging the panel never
# perturbs the draws of earlier units and results are identical across platforms.

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix_fin(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _SM_M1
    z = (z ^ (z >> np.uint64(27))) * _SM_M2
    return z ^ (z >> np.uint64(31))


def counter_uniforms(seed: int, counters: np.ndarray) -> np.ndarray:
    """Deterministic float64 uniforms in [0, 1) indexed by 64-bit counters."""
    key = _splitmix_fin(np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64))[0]
    c = np.asarray(counters, dtype=np.uint64)
    z = _splitmix_fin(_splitmix_fin(c * _SM_GAMMA + key) + _SM_GAMMA)
    return (z >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def sample_panel(
    model: MixtureModel,
    n: int,
    seed: int,
    cell_id: str = "cell0",
    unit_prefix: str = "u",
):
    """Draw a panel of ``n`` units: one menu per unit, then ``T`` choices.

    Returns a :class:`menumix.ingest.PanelDataset`.  Reproducible given
    ``seed``; the per-unit substreams make the first ``k`` units of a size-n
    panel identical to a size-k panel with the same seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    T = model.T
    units = np.arange(n, dtype=np.uint64)
    base = units * np.uint64(T + 1)
    u_menu = counter_uniforms(seed, base)
    menu_cum = np.cumsum(model.m)
    menu_idx = np.searchsorted(menu_cum, u_menu, side="right")
    menu_idx = np.minimum(menu_idx, model.n_menus - 1)

    choices = np.empty((n, T), dtype=np.int16)
    for t in range(T):
        u = counter_uniforms(seed, base + np.uint64(t + 1))
        cum = np.cumsum(model.F[t], axis=0)  # (Y, d)
        rows = cum.T[menu_idx]  # (n, Y)
        choices[:, t] = (u[:, None] >= rows).sum(axis=1) + 1
    np.clip(choices, 1, model.Y, out=choices)

    from .ingest import PanelDataset  # deferred: ingest imports tensor types from here

    unit_ids = tuple(f"{unit_prefix}{i}" for i in range(n))
    cell_ids = tuple([cell_id] * n)
    return PanelDataset(Y=model.Y, T=T, unit_ids=unit_ids, cell_ids=cell_ids, choices=choices)


@dataclass(frozen=True)
class AssumptionReport:
    """Diagnostics on full support, epsilon separation, and menu distinctness."""

    min_supported_F: float
    full_support: bool
    eps: float
    eps_separated: bool
    menus_distinct: bool
    offending_cells: tuple[tuple[int, int, int], ...]  # (t, y, menu index), 1-based t and y

    @property
    def passed(self) -> bool:
        return self.full_support and self.eps_separated and self.menus_distinct


def check_assumptions(model: MixtureModel, eps: float) -> AssumptionReport:
    """Report the smallest supported kernel entry and threshold compliance.

    The separation check is a weak inequality: a supported entry exactly equal
    to ``eps`` passes.
    """
    support = model.support_matrix()[None, :, :] > 0  # (1, Y, d) broadcast over t
    supported = np.broadcast_to(support, model.F.shape)
    vals = model.F[supported]
    min_val = float(vals.min())
    offending = np.argwhere(supported & (model.F < eps))
    cells = tuple((int(t) + 1, int(y) + 1, int(j)) for t, y, j in offending)
    return AssumptionReport(
        min_supported_F=min_val,
        full_support=bool(min_val > 0.0),
        eps=float(eps),
        eps_separated=bool(min_val >= eps),
        menus_distinct=True,  # enforced at construction
        offending_cells=cells,
    )


@dataclass(frozen=True)
class DGPSpec:
    """Serializable description of a simulation design.

    ``Pyd`` is the ``(Y, d)`` column-stochastic kernel (or ``(T, Y, d)`` when
    ``tie_F_across_t`` is false); its zero pattern defines the menus.  ``Pd``
    is the menu probability vector.
    """

    Pyd: np.ndarray
    Pd: np.ndarray
    tie_F_across_t: bool = True
    name: str = ""

    def __post_init__(self) -> None:
        Pyd = _readonly(np.asarray(self.Pyd, dtype=float))
        Pd = _readonly(np.asarray(self.Pd, dtype=float).reshape(-1))
        object.__setattr__(self, "Pyd", Pyd)
        object.__setattr__(self, "Pd", Pd)
        if self.tie_F_across_t:
            if Pyd.ndim != 2:
                raise ValueError("tied design requires a single (Y, d) matrix")
        else:
            if Pyd.ndim != 3:
                raise ValueError("untied design requires a (T, Y, d) array of per-period matrices")
            patterns = Pyd > 0
            if not np.all(patterns == patterns[0]):
                raise ValueError("per-period matrices must share one zero pattern (menus are period-invariant)")
        mats = Pyd[None] if Pyd.ndim == 2 else Pyd
        if np.any(mats < 0):
            raise ValueError("Pyd entries must be nonnegative")
        if np.any(np.abs(mats.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("Pyd columns must sum to 1")
        _check_simplex(Pd, "Pd")
        if Pd.shape[0] != mats.shape[2]:
            raise ValueError("Pd length must match the number of Pyd columns")

    @property
    def Y(self) -> int:
        return self.Pyd.shape[-2]

    @property
    def n_menus(self) -> int:
        return self.Pyd.shape[-1]

    def menus(self) -> tuple[ChoiceSetMask, ...]:
        base = self.Pyd if self.Pyd.ndim == 2 else self.Pyd[0]
        return tuple(ChoiceSetMask.from_indicator(base[:, j]) for j in range(self.n_menus))

    def as_model(self, T: int = 3) -> MixtureModel:
        if self.tie_F_across_t:
            F = np.broadcast_to(self.Pyd, (T, self.Y, self.n_menus)).copy()
        else:
            if self.Pyd.shape[0] != T:
                raise ValueError(f"design provides {self.Pyd.shape[0]} period matrices, T={T} requested")
            F = self.Pyd.copy()
        return MixtureModel(Y=self.Y, T=T, menus=self.menus(), m=self.Pd, F=F)

    def to_json_dict(self) -> dict:
        return {
            "Pyd": self.Pyd.tolist(),
            "Pd": self.Pd.tolist(),
            "tie_F_across_t": self.tie_F_across_t,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    @classmethod
    def from_json_dict(cls, obj: dict, name: str = "") -> "DGPSpec":
        allowed = {"Pyd", "Pd", "tie_F_across_t"}
        unknown = set(obj) - allowed
        if unknown:
            raise ValueError(f"unknown DGP fields: {sorted(unknown)}")
        if "Pyd" not in obj or "Pd" not in obj:
            raise ValueError("DGP JSON requires 'Pyd' and 'Pd'")
        return cls(
            Pyd=np.asarray(obj["Pyd"], dtype=float),
            Pd=np.asarray(obj["Pd"], dtype=float),
            tie_F_across_t=bool(obj.get("tie_F_across_t", True)),
            name=name,
        )

    @classmethod
    def from_json(cls, text: str, name: str = "") -> "DGPSpec":
        return cls.from_json_dict(json.loads(text), name=name)


# Built-in simulation designs.  DGP1: one anchor alternative present in every
# menu plus one extra per menu.  DGP2: menus nested by inclusion.

DGP1 = DGPSpec(
    Pyd=np.array(
        [
            [1.0, 0.6, 0.5, 0.4, 0.2],
            [0.0, 0.4, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.5, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.6, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.8],
        ]
    ),
    Pd=np.array([0.2, 0.15, 0.3, 0.15, 0.2]),
    name="dgp1",
)

DGP2 = DGPSpec(
    Pyd=np.array(
        [
            [1.0, 0.6, 0.5, 0.25, 0.1],
            [0.0, 0.4, 0.2, 0.35, 0.25],
            [0.0, 0.0, 0.3, 0.25, 0.15],
            [0.0, 0.0, 0.0, 0.15, 0.3],
            [0.0, 0.0, 0.0, 0.0, 0.2],
        ]
    ),
    Pd=np.array([0.2, 0.15, 0.3, 0.15, 0.2]),
    name="dgp2",
)


@dataclass(frozen=True)
class MarkovMixtureModel:
    """Mixture of first-order chains: menu drawn once, choices form a chain.

    Attributes
    ----------
    Y, T, menus, m : as in :class:`MixtureModel`.
    init : numpy.ndarray
        Shape ``(Y, d)``; first-period choice distribution per menu.
    trans : numpy.ndarray
        Shape ``(d, Y, Y)``; ``trans[j, a, b]`` is the probability of choosing
        ``b`` after ``a`` under menu ``j``.  Rows for supported ``a`` are
        distributions over the menu; rows for unsupported ``a`` are zero.
    """

    Y: int
    T: int
    menus: tuple[ChoiceSetMask, ...]
    m: np.ndarray
    init: np.ndarray
    trans: np.ndarray

    def __post_init__(self) -> None:
        menus = tuple(self.menus)
        object.__setattr__(self, "menus", menus)
        m = _readonly(np.asarray(self.m, dtype=float).reshape(-1))
        init = _readonly(np.asarray(self.init, dtype=float))
        trans = _readonly(np.asarray(self.trans, dtype=float))
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "init", init)
        object.__setattr__(self, "trans", trans)
        d = len(menus)
        if len({mask.bits for mask in menus}) != d:
            raise ValueError("menus must be pairwise distinct")
        _check_simplex(m, "m")
        if init.shape != (self.Y, d) or trans.shape != (d, self.Y, self.Y):
            raise ValueError("init must be (Y, d) and trans (d, Y, Y)")
        if self.T < 2:
            raise ValueError("a chain needs T >= 2")
        for j, mask in enumerate(menus):
            ind = mask.indicator()
            if np.any(init[ind == 0, j] != 0.0) or abs(init[:, j].sum() - 1.0) > 1e-9:
                raise ValueError(f"init column {j} must be a distribution supported on {mask}")
            for a in range(self.Y):
                row = trans[j, a]
                if ind[a] > 0:
                    if np.any(row[ind == 0] != 0.0) or abs(row.sum() - 1.0) > 1e-9:
                        raise ValueError(f"trans[{j}, {a + 1}, :] must be a distribution supported on {mask}")
                elif np.any(row != 0.0):
                    raise ValueError(f"trans[{j}, {a + 1}, :] must be zero (state outside menu)")

    def joint_pmf(self) -> np.ndarray:
        """Exact joint pmf over all ``Y**T`` choice paths, shape ``(Y,) * T``."""
        if self.Y**self.T > 10**6:
            raise ValueError("path space too large to enumerate")
        total = np.zeros((self.Y,) * self.T)
        for j in range(len(self.menus)):
            path = self.init[:, j]
            for _ in range(self.T - 1):
                path = path[..., :, None] * self.trans[j][(None,) * (path.ndim - 1)]
            total += self.m[j] * path
        return total

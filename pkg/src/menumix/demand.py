"""Parametric demand layer on top of estimated menus and kernels.

Per-menu market shares are inverted into log share ratios against a base
alternative, giving a linear model with menu-specific price coefficients that
is estimated by two-step efficient GMM with user-supplied instruments.  Own
price elasticities come in two flavors: the naive one that pretends everyone
considers everything, and the mixture one that averages menu-level
elasticities under the estimated consideration-set weights.

Shares are treated as error-free data throughout; standard errors do not
propagate first-stage estimation noise (this is flagged in result metadata).
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError, ParseError
from .model import ChoiceSetMask

_SHARE_TOL = 1e-12


@dataclass(frozen=True)
class DemandPanel:
    """Market-level share panel with prices, demographics, and instruments.

    ``shares[d, j, t, y - 1]`` is the share of alternative ``y`` among markets
    ``j`` in period ``t`` conditional on menu ``d``; each (menu, market,
    period) slice is a distribution supported exactly on the menu.  Prices and
    instruments vary by (market, alternative); demographics by market only.
    The base alternative must belong to every menu so that every menu's share
    ratios are well defined.
    """

    markets: tuple[str, ...]
    periods: tuple[int, ...]
    menus: tuple[ChoiceSetMask, ...]
    shares: np.ndarray  # (d, J, T, Y)
    prices: np.ndarray  # (J, Y)
    demographics: np.ndarray  # (J, R)
    demo_names: tuple[str, ...]
    instruments: np.ndarray  # (J, Y, Q)
    inst_names: tuple[str, ...]
    base: int
    weights: np.ndarray | None = None  # market sampling weights, uniform if None

    def __post_init__(self) -> None:
        J, T, d = len(self.markets), len(self.periods), len(self.menus)
        if d == 0 or J == 0 or T == 0:
            raise ValueError("panel needs at least one menu, market, and period")
        Y = self.menus[0].Y
        shares = np.asarray(self.shares, dtype=float)
        prices = np.asarray(self.prices, dtype=float)
        demo = np.asarray(self.demographics, dtype=float).reshape(J, -1)
        inst = np.asarray(self.instruments, dtype=float)
        if shares.shape != (d, J, T, Y):
            raise ValueError(f"shares must have shape {(d, J, T, Y)}, got {shares.shape}")
        if prices.shape != (J, Y):
            raise ValueError(f"prices must have shape {(J, Y)}, got {prices.shape}")
        if inst.ndim != 3 or inst.shape[:2] != (J, Y):
            raise ValueError(f"instruments must have shape ({J}, {Y}, Q), got {inst.shape}")
        if len(self.demo_names) != demo.shape[1]:
            raise ValueError("demo_names must match the demographics columns")
        if len(self.inst_names) != inst.shape[2]:
            raise ValueError("inst_names must match the instrument columns")
        if not 1 <= self.base <= Y:
            raise ValueError(f"base alternative must lie in 1..{Y}")
        for k, mask in enumerate(self.menus):
            if mask.Y != Y:
                raise ValueError("menus must share one alternative universe")
            if not mask.contains(self.base):
                raise ValueError(f"base alternative {self.base} missing from menu {mask}")
            on = mask.indicator().astype(bool)
            sl = shares[k]
            if np.any(sl[:, :, ~on] > _SHARE_TOL):
                raise ValueError(f"menu {mask} has share mass outside its support")
            if np.any(np.abs(sl[:, :, on].sum(axis=-1) - 1.0) > 1e-8):
                raise ValueError(f"menu {mask} shares do not sum to 1 in every (market, period)")
            if np.any(sl[:, :, on] < 0):
                raise ValueError(f"menu {mask} has negative shares")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (J,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
                raise ValueError("weights must be a nonnegative length-J vector summing to 1")
            object.__setattr__(self, "weights", w)
        object.__setattr__(self, "shares", shares)
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "demographics", demo)
        object.__setattr__(self, "instruments", inst)

    @property
    def Y(self) -> int:
        return self.menus[0].Y


@dataclass(frozen=True)
class RegressionData:
    """Rows of the differenced log-share regression for one menu.

    One row per (alternative, market, period) with the base alternative
    removed.  ``X`` stacks alternative dummies, the price difference, and
    demographics interacted with the alternative; ``Z`` repeats the exogenous
    columns and replaces the price difference with instrument differences.
    """

    menu: ChoiceSetMask
    base: int
    y: np.ndarray  # (n,)
    X: np.ndarray  # (n, k)
    Z: np.ndarray  # (n, q)
    x_names: tuple[str, ...]
    z_names: tuple[str, ...]
    rows: tuple[tuple[int, str, int], ...]  # (alternative, market, period)
    beta_col: int
    dropped: tuple[tuple[int, str, int], ...]  # rows lost to zero shares


def build_log_ratio_panel(panel: DemandPanel, menu: ChoiceSetMask, base: int | None = None) -> RegressionData:
    """Difference the logit shares of one menu against the base alternative."""
    if base is None:
        base = panel.base
    if not menu.contains(base):
        raise ValueError(f"base alternative {base} is not in menu {menu}")
    k = panel.menus.index(menu) if menu in panel.menus else -1
    if k < 0:
        raise ValueError(f"menu {menu} is not part of the panel")
    others = [a for a in menu.alternatives if a != base]
    if not others:
        raise ValueError(f"menu {menu} has no alternative besides the base")
    R = panel.demographics.shape[1]
    Q = panel.instruments.shape[2]
    x_names = [f"alpha[y={a}]" for a in others]
    x_names.append("beta")
    for a in others:
        x_names.extend(f"gamma[{nm},y={a}]" for nm in panel.demo_names)
    z_names = [f"alpha[y={a}]" for a in others]
    z_names.extend(f"dz[{nm}]" for nm in panel.inst_names)
    for a in others:
        z_names.extend(f"gamma[{nm},y={a}]" for nm in panel.demo_names)
    rows, dropped, outs, Xr, Zr = [], [], [], [], []
    for i, a in enumerate(others):
        for j, market in enumerate(panel.markets):
            for ti, t in enumerate(panel.periods):
                s_y = panel.shares[k, j, ti, a - 1]
                s_b = panel.shares[k, j, ti, base - 1]
                if s_y <= _SHARE_TOL or s_b <= _SHARE_TOL:
                    dropped.append((a, market, t))
                    continue
                dummies = np.zeros(len(others))
                dummies[i] = 1.0
                inter = np.zeros(len(others) * R)
                inter[i * R : (i + 1) * R] = panel.demographics[j]
                dp = panel.prices[j, a - 1] - panel.prices[j, base - 1]
                dz = panel.instruments[j, a - 1] - panel.instruments[j, base - 1]
                outs.append(np.log(s_y / s_b))
                Xr.append(np.concatenate([dummies, [dp], inter]))
                Zr.append(np.concatenate([dummies, dz, inter]))
                rows.append((a, market, t))
    if not rows:
        raise EstimationError(f"every row of menu {menu} was dropped (zero shares)")
    return RegressionData(
        menu=menu, base=base,
        y=np.asarray(outs), X=np.asarray(Xr), Z=np.asarray(Zr),
        x_names=tuple(x_names), z_names=tuple(z_names),
        rows=tuple(rows), beta_col=len(others), dropped=tuple(dropped),
    )


@dataclass(frozen=True)
class GmmResult:
    """Two-step efficient GMM fit of one menu's share-ratio regression."""

    menu: ChoiceSetMask
    beta_hat: float
    beta_se: float
    alpha: dict[str, float]
    gamma: dict[str, float]
    theta: np.ndarray
    se: np.ndarray
    x_names: tuple[str, ...]
    j_stat: float
    j_dof: int
    W1: np.ndarray
    W2: np.ndarray
    regularized: bool
    notes: tuple[str, ...] = field(default=("shares treated as error-free data",))


def _solve_gmm(X, Z, y, W):
    G = Z.T @ X / len(y)
    h = Z.T @ y / len(y)
    A = G.T @ W @ G
    b = G.T @ W @ h
    return np.linalg.solve(A, b)


def gmm_beta(dataset: RegressionData, instruments: np.ndarray | None = None) -> GmmResult:
    """Two-step efficient GMM with heteroskedasticity-robust standard errors.

    The first step weights moments by the inverse instrument second-moment
    matrix (equivalently: identity weighting on whitened instruments), which
    keeps the estimator invariant to rescaling any instrument column.  The
    second step reweights with the inverse of the estimated moment covariance,
    ridge-regularized and flagged when near-singular.
    """
    X, y = dataset.X, dataset.y
    Z = dataset.Z if instruments is None else np.asarray(instruments, dtype=float)
    n, k = X.shape
    if Z.shape[0] != n:
        raise ValueError("instrument rows must match the dataset rows")
    q = Z.shape[1]
    if q < k:
        raise ValueError(f"{q} instruments cannot identify {k} parameters")
    sv = np.linalg.svd(Z, compute_uv=False)
    if sv[-1] <= 1e-10 * max(sv[0], 1.0):
        # name the most suspicious columns: smallest right-singular directions
        _, _, Vt = np.linalg.svd(Z)
        worst = np.argsort(-np.abs(Vt[-1]))[:2]
        names = [dataset.z_names[i] if i < len(dataset.z_names) else str(i) for i in worst]
        raise EstimationError(f"instrument matrix is rank deficient (collinear columns near: {names})")
    SZZ = Z.T @ Z / n
    W1 = np.linalg.inv(SZZ)
    theta1 = _solve_gmm(X, Z, y, W1)
    u1 = y - X @ theta1
    S = (Z * u1[:, None]).T @ (Z * u1[:, None]) / n
    lam = 1e-10 * np.trace(S) / q
    regularized = False
    try:
        W2 = np.linalg.inv(S)
        if np.linalg.cond(S) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        W2 = np.linalg.inv(S + lam * np.eye(q))
        regularized = True
    theta2 = _solve_gmm(X, Z, y, W2)
    u2 = y - X @ theta2
    S2 = (Z * u2[:, None]).T @ (Z * u2[:, None]) / n
    G = Z.T @ X / n
    bread = np.linalg.inv(G.T @ W2 @ G)
    meat = G.T @ W2 @ S2 @ W2 @ G
    V = bread @ meat @ bread / n
    se = np.sqrt(np.clip(np.diag(V), 0.0, None))
    g2 = Z.T @ u2 / n
    j_stat = float(n * g2 @ W2 @ g2)
    names = dataset.x_names
    bcol = dataset.beta_col
    alpha = {nm: float(v) for nm, v in zip(names, theta2) if nm.startswith("alpha")}
    gamma = {nm: float(v) for nm, v in zip(names, theta2) if nm.startswith("gamma")}
    return GmmResult(
        menu=dataset.menu,
        beta_hat=float(theta2[bcol]), beta_se=float(se[bcol]),
        alpha=alpha, gamma=gamma,
        theta=theta2, se=se, x_names=names,
        j_stat=j_stat, j_dof=q - k, W1=W1, W2=W2, regularized=regularized,
    )


def fit_all_menus(panel: DemandPanel) -> dict[ChoiceSetMask, GmmResult]:
    """Run the share-ratio GMM separately for every menu in the panel."""
    return {menu: gmm_beta(build_log_ratio_panel(panel, menu)) for menu in panel.menus}


def elasticity_naive(beta: float, p: float, s: float) -> float:
    """Own-price elasticity under a single grand menu: beta * p * (1 - s)."""
    if not 0.0 <= s <= 1.0:
        raise ValueError("share must lie in [0, 1]")
    return beta * p * (1.0 - s)


def elasticity_mixture(betas, shares, weights, p: float) -> float:
    """Menu-mixture own-price elasticity for one (alternative, market, period).

    ``betas[i]``, ``shares[i]``, and ``weights[i]`` describe menu i: its price
    coefficient, the alternative's share conditional on the menu (0 when the
    alternative is outside the menu), and the menu probability.  Menus that
    exclude the alternative contribute nothing; the aggregate share must be
    positive.  Consideration weights are price-invariant, so no derivative of
    the weights appears.
    """
    betas = np.asarray(betas, dtype=float)
    shares = np.asarray(shares, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if not (betas.shape == shares.shape == weights.shape):
        raise ValueError("betas, shares, and weights must have matching shapes")
    if np.any(weights < -1e-12) or abs(weights.sum() - 1.0) > 1e-8:
        raise ValueError("weights must lie on the simplex")
    if np.any((shares < 0) | (shares > 1)):
        raise ValueError("conditional shares must lie in [0, 1]")
    s_agg = float(shares @ weights)
    if s_agg <= 0:
        raise ValueError("aggregate share is zero: alternative considered by no menu")
    per_menu = betas * p * (1.0 - shares)  # conditional elasticities
    return float(np.sum(weights * shares * per_menu) / s_agg)


@dataclass(frozen=True)
class MenuShareSummary:
    """Weighted aggregates of per-market menu distributions."""

    cardinality: dict[int, float]  # menu size -> weighted probability
    brand_consideration: np.ndarray  # (Y,) weighted P(alternative in menu)
    top_menus: tuple[tuple[ChoiceSetMask, float], ...]  # sorted by weighted mass
    per_market: tuple[tuple[str, tuple[tuple[ChoiceSetMask, float], ...]], ...]

    def markets_with_at_least(self, min_menus: int = 5, threshold: float = 0.10) -> int:
        """How many markets place more than ``threshold`` on ≥ ``min_menus`` menus."""
        return sum(
            1
            for _, pairs in self.per_market
            if sum(1 for _, w in pairs if w > threshold) >= min_menus
        )


def menu_share_summaries(estimates, weights=None) -> MenuShareSummary:
    """Aggregate per-market menu weights into the cardinality and brand tables.

    ``estimates`` maps market id to a (menus, m) pair or an object with
    ``menus`` and ``m_hat``; ``weights`` are market weights summing to 1
    (uniform when omitted).
    """
    items = list(estimates.items())
    if not items:
        raise ValueError("at least one market estimate is required")
    J = len(items)
    if weights is None:
        w = np.full(J, 1.0 / J)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (J,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
            raise ValueError("weights must be a nonnegative length-J vector summing to 1")
    Y = None
    card: dict[int, float] = {}
    mass: dict[int, float] = {}
    per_market = []
    brand = None
    for (market, est), wj in zip(items, w):
        if hasattr(est, "menus"):
            menus, m = est.menus, np.asarray(est.m_hat, dtype=float)
        else:
            menus, m = est
            m = np.asarray(m, dtype=float)
        menus = tuple(menus)
        if Y is None:
            Y = menus[0].Y
            brand = np.zeros(Y)
        pairs = []
        for mask, mj in zip(menus, m):
            card[mask.size] = card.get(mask.size, 0.0) + float(wj) * float(mj)
            mass[mask.bits] = mass.get(mask.bits, 0.0) + float(wj) * float(mj)
            brand += float(wj) * float(mj) * mask.indicator()
            pairs.append((mask, float(mj)))
        per_market.append((market, tuple(pairs)))
    top = sorted(mass.items(), key=lambda kv: (-kv[1], kv[0]))
    return MenuShareSummary(
        cardinality=dict(sorted(card.items())),
        brand_consideration=brand,
        top_menus=tuple((ChoiceSetMask(bits, Y), v) for bits, v in top),
        per_market=tuple(per_market),
    )


def make_instruments(prices: np.ndarray, characteristics: np.ndarray, neighbors) -> tuple[np.ndarray, tuple[str, ...]]:
    """Competitor-average characteristics and neighbor-average prices.

    ``characteristics`` is (J, Y) or (J, Y, k); the first instrument block
    averages each characteristic over the other alternatives in the same
    market, the last column averages the alternative's own price over the
    markets listed in ``neighbors`` (a sequence of index lists, one per
    market; a market with no neighbors falls back to its own price).
    """
    prices = np.asarray(prices, dtype=float)
    chars = np.asarray(characteristics, dtype=float)
    J, Y = prices.shape
    if chars.ndim == 2:
        chars = chars[:, :, None]
    if chars.shape[:2] != (J, Y):
        raise ValueError("characteristics must align with prices")
    K = chars.shape[2]
    comp = (chars.sum(axis=1, keepdims=True) - chars) / max(Y - 1, 1)
    neigh = np.empty((J, Y, 1))
    for j in range(J):
        idx = list(neighbors[j]) if j < len(neighbors) else []
        neigh[j, :, 0] = prices[idx].mean(axis=0) if idx else prices[j]
    names = tuple(f"competitor_avg_char{k + 1}" for k in range(K)) + ("neighbor_avg_price",)
    return np.concatenate([comp, neigh], axis=2), names


_BUNDLE_FILES = ("shares.csv", "prices.csv", "demographics.csv", "instruments.csv", "weights.csv")


def _menu_token(mask: ChoiceSetMask) -> str:
    return "|".join(str(a) for a in mask.alternatives)


def _parse_menu_token(token: str, Y: int) -> ChoiceSetMask:
    try:
        alts = sorted({int(p) for p in token.split("|")})
    except ValueError as exc:
        raise ParseError(f"bad menu token {token!r}") from exc
    bits = 0
    for a in alts:
        if not 1 <= a <= Y:
            raise ParseError(f"menu alternative {a} outside 1..{Y}")
        bits |= 1 << (a - 1)
    return ChoiceSetMask(bits, Y)


def write_demand_bundle(panel: DemandPanel, directory: str) -> None:
    """Write the five-file CSV bundle describing a demand panel.

    Headers: shares.csv has (menu, market, period, alternative, share) with
    menus encoded as pipe-joined alternatives; prices.csv (market,
    alternative, price); demographics.csv (market, <demo names...>);
    instruments.csv (market, alternative, <instrument names...>);
    weights.csv (market, weight).  The base alternative travels in a comment
    line at the top of shares.csv.
    """
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "shares.csv"), "w", newline="") as fh:
        fh.write(f"# base={panel.base} Y={panel.Y}\n")
        writer = csv.writer(fh)
        writer.writerow(["menu", "market", "period", "alternative", "share"])
        for k, mask in enumerate(panel.menus):
            tok = _menu_token(mask)
            for j, market in enumerate(panel.markets):
                for ti, t in enumerate(panel.periods):
                    for a in mask.alternatives:
                        writer.writerow([tok, market, t, a, repr(float(panel.shares[k, j, ti, a - 1]))])
    with open(os.path.join(directory, "prices.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["market", "alternative", "price"])
        for j, market in enumerate(panel.markets):
            for a in range(1, panel.Y + 1):
                writer.writerow([market, a, repr(float(panel.prices[j, a - 1]))])
    with open(os.path.join(directory, "demographics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["market", *panel.demo_names])
        for j, market in enumerate(panel.markets):
            writer.writerow([market, *(repr(float(v)) for v in panel.demographics[j])])
    with open(os.path.join(directory, "instruments.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["market", "alternative", *panel.inst_names])
        for j, market in enumerate(panel.markets):
            for a in range(1, panel.Y + 1):
                writer.writerow([market, a, *(repr(float(v)) for v in panel.instruments[j, a - 1])])
    with open(os.path.join(directory, "weights.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["market", "weight"])
        w = panel.weights if panel.weights is not None else np.full(len(panel.markets), 1.0 / len(panel.markets))
        for j, market in enumerate(panel.markets):
            writer.writerow([market, repr(float(w[j]))])


def read_demand_bundle(directory: str) -> DemandPanel:
    """Read the five-file CSV bundle written by :func:`write_demand_bundle`."""
    for name in _BUNDLE_FILES:
        if not os.path.exists(os.path.join(directory, name)):
            raise ParseError(f"demand bundle is missing {name}")
    with open(os.path.join(directory, "shares.csv"), newline="") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ParseError("shares.csv must start with a '# base=.. Y=..' comment line")
        meta = dict(part.split("=", 1) for part in header[1:].split())
        base, Y = int(meta["base"]), int(meta["Y"])
        rows = list(csv.DictReader(fh))
    menu_tokens: list[str] = []
    markets: list[str] = []
    periods: list[int] = []
    for r in rows:
        if r["menu"] not in menu_tokens:
            menu_tokens.append(r["menu"])
        if r["market"] not in markets:
            markets.append(r["market"])
        t = int(r["period"])
        if t not in periods:
            periods.append(t)
    menus = tuple(_parse_menu_token(tok, Y) for tok in menu_tokens)
    shares = np.zeros((len(menus), len(markets), len(periods), Y))
    for r in rows:
        k = menu_tokens.index(r["menu"])
        j = markets.index(r["market"])
        ti = periods.index(int(r["period"]))
        shares[k, j, ti, int(r["alternative"]) - 1] = float(r["share"])
    with open(os.path.join(directory, "prices.csv"), newline="") as fh:
        prices = np.zeros((len(markets), Y))
        for r in csv.DictReader(fh):
            prices[markets.index(r["market"]), int(r["alternative"]) - 1] = float(r["price"])
    with open(os.path.join(directory, "demographics.csv"), newline="") as fh:
        reader = csv.DictReader(fh)
        demo_names = tuple(n for n in reader.fieldnames if n != "market")
        demo = np.zeros((len(markets), len(demo_names)))
        for r in reader:
            demo[markets.index(r["market"])] = [float(r[n]) for n in demo_names]
    with open(os.path.join(directory, "instruments.csv"), newline="") as fh:
        reader = csv.DictReader(fh)
        inst_names = tuple(n for n in reader.fieldnames if n not in ("market", "alternative"))
        inst = np.zeros((len(markets), Y, len(inst_names)))
        for r in reader:
            inst[markets.index(r["market"]), int(r["alternative"]) - 1] = [float(r[n]) for n in inst_names]
    with open(os.path.join(directory, "weights.csv"), newline="") as fh:
        w = np.zeros(len(markets))
        for r in csv.DictReader(fh):
            w[markets.index(r["market"])] = float(r["weight"])
    return DemandPanel(
        markets=tuple(markets), periods=tuple(periods), menus=menus,
        shares=shares, prices=prices,
        demographics=demo, demo_names=demo_names,
        instruments=inst, inst_names=inst_names,
        base=base, weights=w,
    )

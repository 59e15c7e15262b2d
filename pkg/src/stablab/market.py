"""Finite scenario-tree markets.

A market is a non-recombining event tree with an adapted price process on it.
Nodes are stored in topological order (parents before children, root first),
so every backward/forward pass is a single sweep over the node arrays.
Probability measures live on the leaves; everything conditional is recovered
by aggregating leaf weights up the tree.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

# children of one node must carry a conditional distribution
PROB_SUM_TOL = 1e-12
# one-step transition probabilities strictly inside (0, 1)
PROB_FLOOR = 0.0


class TreeValidationError(ValueError):
    """A tree specification violates the market invariants."""


class AdmissibilityViolation(RuntimeError):
    """A fraction strategy drives wealth to zero or below somewhere."""


class ScenarioTree:
    """Non-recombining event tree with an adapted, strictly positive price process.

    Attributes
    ----------
    parent : (n,) int array, -1 at the root
    time : (n,) int array, 0 at the root
    prob : (n,) float array, one-step transition probability from the parent
        (1.0 at the root)
    prices : (n, d) float array
    children : list of int arrays, children[i] are the child node ids of i
    leaves : int array of node ids at the terminal date
    paths : (L, T+1) int array, paths[k] is the node path from root to leaf k
    path_prob : (n,) float array, probability of reaching each node under the
        tree's own measure
    """

    def __init__(self, parent, time, prob, prices):
        parent = np.asarray(parent, dtype=np.int64)
        time = np.asarray(time, dtype=np.int64)
        prob = np.asarray(prob, dtype=float)
        prices = np.asarray(prices, dtype=float)
        if prices.ndim == 1:
            prices = prices[:, None]
        n = parent.shape[0]
        if not (time.shape == (n,) and prob.shape == (n,) and prices.shape[0] == n):
            raise TreeValidationError("node arrays have inconsistent lengths")
        if n == 0 or parent[0] != -1 or time[0] != 0:
            raise TreeValidationError("first node must be the root (parent -1, time 0)")
        if np.any(parent[1:] < 0) or np.any(parent[1:] >= np.arange(1, n)):
            raise TreeValidationError("nodes must be topologically ordered")
        if np.any(prices <= 0.0):
            raise TreeValidationError("prices must be strictly positive")
        if np.any(time[1:] != time[parent[1:]] + 1):
            raise TreeValidationError("child time must be parent time + 1")

        self.parent = parent
        self.time = time
        self.prob = prob
        self.prices = prices
        self.n_nodes = n
        self.n_assets = prices.shape[1]
        self.horizon = int(time.max())

        children = [[] for _ in range(n)]
        for i in range(1, n):
            children[parent[i]].append(i)
        self.children = [np.asarray(c, dtype=np.int64) for c in children]

        is_leaf = np.array([len(c) == 0 for c in self.children])
        if np.any(is_leaf & (time != self.horizon)):
            raise TreeValidationError("every non-terminal node needs children")
        for i in range(n):
            if is_leaf[i]:
                continue
            if len(self.children[i]) < 2:
                raise TreeValidationError(f"node {i} has fewer than 2 branches")
            p = prob[self.children[i]]
            if np.any(p <= PROB_FLOOR) or np.any(p >= 1.0):
                raise TreeValidationError(f"transition probabilities at node {i} must lie in (0, 1)")
            if abs(p.sum() - 1.0) > PROB_SUM_TOL:
                raise TreeValidationError(f"transition probabilities at node {i} do not sum to 1")
        if not (prob[0] == 1.0):
            raise TreeValidationError("root probability must be 1")

        self.leaves = np.flatnonzero(is_leaf)
        self.nonterminal = np.flatnonzero(~is_leaf)
        self.n_leaves = self.leaves.shape[0]

        # root-to-leaf node paths, one row per leaf
        paths = np.empty((self.n_leaves, self.horizon + 1), dtype=np.int64)
        for k, leaf in enumerate(self.leaves):
            node = leaf
            for t in range(self.horizon, -1, -1):
                paths[k, t] = node
                node = parent[node]
        self.paths = paths

        path_prob = np.ones(n)
        for i in range(1, n):
            path_prob[i] = path_prob[parent[i]] * prob[i]
        self.path_prob = path_prob

        # price increment from the parent, per node (root row is zero)
        d_prices = np.zeros_like(prices)
        d_prices[1:] = prices[1:] - prices[parent[1:]]
        self.d_prices = d_prices
        d_returns = np.zeros_like(prices)
        d_returns[1:] = d_prices[1:] / prices[parent[1:]]
        self.d_returns = d_returns

        leaf_pos = np.full(n, -1, dtype=np.int64)
        leaf_pos[self.leaves] = np.arange(self.n_leaves)
        self.leaf_pos = leaf_pos

    # ------------------------------------------------------------------
    def market_measure(self) -> "Measure":
        """The tree's own measure, as leaf weights."""
        return Measure(self.path_prob[self.leaves].copy())

    def nodes_at(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.time == t)

    def terminal_prices(self) -> np.ndarray:
        """(L, d) price vectors at the leaves, in leaf order."""
        return self.prices[self.leaves]


@dataclass(frozen=True)
class Measure:
    """Probability measure given by one weight per leaf (leaf order of the tree)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if np.any(w < 0.0):
            raise TreeValidationError("measure weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise TreeValidationError("measure weights must sum to 1")

    def is_equivalent(self) -> bool:
        return bool(np.all(self.weights > 0.0))


@dataclass(frozen=True)
class Strategy:
    """Per-node holdings, read at non-terminal nodes only.

    mode 'shares' stores units of each asset; mode 'fractions' stores
    fractions of current wealth per asset.
    """

    values: np.ndarray  # (n_nodes, d)
    mode: str

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", v)
        if self.mode not in ("shares", "fractions"):
            raise ValueError(f"unknown strategy mode {self.mode!r}")

    @staticmethod
    def constant(tree: ScenarioTree, vec, mode: str = "shares") -> "Strategy":
        vec = np.atleast_1d(np.asarray(vec, dtype=float))
        return Strategy(np.tile(vec, (tree.n_nodes, 1)), mode)

    @staticmethod
    def zero(tree: ScenarioTree, mode: str = "shares") -> "Strategy":
        return Strategy(np.zeros((tree.n_nodes, tree.n_assets)), mode)


@dataclass(frozen=True)
class AdaptedProcess:
    """One value per node."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def at_leaves(self, tree: ScenarioTree) -> np.ndarray:
        return self.values[tree.leaves]

    def at_root(self) -> float:
        return float(self.values[0])


# ----------------------------------------------------------------------
# construction


def build_tree(spec: dict) -> ScenarioTree:
    """Build a tree from a specification dict.

    Two forms are accepted: {"lattice": {"s0", "u", "d", "q", "steps"}} for a
    binomial tree expanded into a full (non-recombining) event tree, and
    {"nodes": [{"parent", "prob", "prices"}, ...]} for an explicit node list
    in topological order ("time" entries are optional and derived).
    """
    if "lattice" in spec:
        lat = spec["lattice"]
        s0, u, d, q = float(lat["s0"]), float(lat["u"]), float(lat["d"]), float(lat["q"])
        steps = int(lat["steps"])
        if u <= d:
            raise TreeValidationError("lattice requires u > d")
        if not (0.0 < q < 1.0):
            raise TreeValidationError("lattice probability must lie in (0, 1)")
        if s0 <= 0.0 or d <= 0.0:
            raise TreeValidationError("lattice prices must stay positive")
        if steps < 1:
            raise TreeValidationError("lattice needs at least one step")
        return branching_tree(s0, [u, d], [q, 1.0 - q], steps)
    if "nodes" in spec:
        nodes = spec["nodes"]
        parent = []
        prob = []
        prices = []
        for nd in nodes:
            p = nd.get("parent", None)
            parent.append(-1 if p is None else int(p))
            pr = nd.get("prob", None)
            prob.append(1.0 if pr is None else float(pr))
            prices.append(nd["prices"])
        parent = np.asarray(parent)
        time = np.zeros(len(nodes), dtype=np.int64)
        for i in range(1, len(nodes)):
            if parent[i] < 0 or parent[i] >= i:
                raise TreeValidationError("explicit nodes must list parents first")
            time[i] = time[parent[i]] + 1
        return ScenarioTree(parent, time, np.asarray(prob), np.asarray(prices, dtype=float))
    raise TreeValidationError("tree spec needs a 'lattice' or 'nodes' entry")


def tree_from_file(path) -> ScenarioTree:
    with open(path) as fh:
        return build_tree(json.load(fh))


def branching_tree(s0, factors, probs, steps: int) -> ScenarioTree:
    """Tree applying the same multiplicative branch factors at every node.

    `s0` may be a scalar (one asset) or a vector; `factors` is a sequence of
    per-branch multipliers (scalars, or vectors matching s0).
    """
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    factors = [np.atleast_1d(np.asarray(f, dtype=float)) for f in factors]
    probs = np.asarray(probs, dtype=float)
    if len(factors) != probs.shape[0]:
        raise TreeValidationError("factors and probs must pair up")
    parent = [-1]
    time = [0]
    prob = [1.0]
    prices = [s0]
    frontier = [0]
    for t in range(steps):
        new_frontier = []
        for node in frontier:
            for f, q in zip(factors, probs):
                parent.append(node)
                time.append(t + 1)
                prob.append(float(q))
                prices.append(prices[node] * f)
                new_frontier.append(len(parent) - 1)
        frontier = new_frontier
    return ScenarioTree(np.asarray(parent), np.asarray(time), np.asarray(prob),
                        np.vstack(prices))


def single_step_tree(s0, factors, probs) -> ScenarioTree:
    return branching_tree(s0, factors, probs, 1)


# ----------------------------------------------------------------------
# measure plumbing


def node_weights(tree: ScenarioTree, m: Measure) -> np.ndarray:
    """Probability of passing through each node under m (leaf weights summed up)."""
    w = np.zeros(tree.n_nodes)
    w[tree.leaves] = m.weights
    for i in range(tree.n_nodes - 1, 0, -1):
        w[tree.parent[i]] += w[i]
    return w


def conditional_probs(tree: ScenarioTree, m: Measure):
    """Per-node child distributions under m.

    Returns (W, cond) where W are node weights and cond[i] is the conditional
    distribution over children of node i.  At nodes m never reaches, the
    tree's own transition probabilities are used; they carry zero weight in
    any expectation under m.
    """
    W = node_weights(tree, m)
    cond = [None] * tree.n_nodes
    for i in tree.nonterminal:
        ch = tree.children[i]
        if W[i] > 0.0:
            cond[i] = W[ch] / W[i]
        else:
            cond[i] = tree.prob[ch]
    return W, cond


def conditional_expectation(tree: ScenarioTree, m: Measure, terminal) -> AdaptedProcess:
    """Backward conditional expectation of terminal leaf values under m.

    `terminal` is an array of one value per leaf (or an AdaptedProcess whose
    leaf entries are used).  The result holds E_m[x | node] at every node;
    its root entry is the unconditional expectation.
    """
    if isinstance(terminal, AdaptedProcess):
        terminal = terminal.at_leaves(tree)
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (tree.n_leaves,):
        raise ValueError("terminal values must give one entry per leaf")
    W, cond = conditional_probs(tree, m)
    val = np.zeros(tree.n_nodes)
    val[tree.leaves] = terminal
    for i in tree.nonterminal[::-1]:
        ch = tree.children[i]
        val[i] = cond[i] @ val[ch]
    return AdaptedProcess(val)


def martingale_residual(tree: ScenarioTree, m: Measure) -> float:
    """Worst one-step drift of the price process under m.

    Maximum over reachable non-terminal nodes and assets of
    |E_m[S_{t+1} - S_t | node]|.  Zero (up to tolerance) characterises the
    martingale measures of the tree.
    """
    W, cond = conditional_probs(tree, m)
    worst = 0.0
    for i in tree.nonterminal:
        if W[i] <= 0.0:
            continue
        drift = cond[i] @ tree.d_prices[tree.children[i]]
        worst = max(worst, float(np.max(np.abs(drift))))
    return worst


def is_martingale_measure(tree: ScenarioTree, m: Measure, tol: float = 1e-10) -> bool:
    return martingale_residual(tree, m) <= tol


# ----------------------------------------------------------------------
# wealth dynamics


def wealth_additive(tree: ScenarioTree, strategy: Strategy, x0: float = 0.0) -> AdaptedProcess:
    """Wealth of a share strategy: X_child = X_node + H_node . (S_child - S_node)."""
    if strategy.mode != "shares":
        raise ValueError("wealth_additive needs a 'shares' strategy")
    H = strategy.values
    X = np.empty(tree.n_nodes)
    X[0] = x0
    for i in range(1, tree.n_nodes):
        pa = tree.parent[i]
        X[i] = X[pa] + H[pa] @ tree.d_prices[i]
    return AdaptedProcess(X)


def wealth_multiplicative(tree: ScenarioTree, strategy: Strategy, x0: float) -> AdaptedProcess:
    """Wealth of a fraction strategy: X_child = X_node * (1 + pi_node . dR_child).

    Raises AdmissibilityViolation as soon as wealth leaves (0, inf).
    """
    if strategy.mode != "fractions":
        raise ValueError("wealth_multiplicative needs a 'fractions' strategy")
    if x0 <= 0.0:
        raise AdmissibilityViolation("initial wealth must be strictly positive")
    pi = strategy.values
    X = np.empty(tree.n_nodes)
    X[0] = x0
    for i in range(1, tree.n_nodes):
        pa = tree.parent[i]
        growth = 1.0 + pi[pa] @ tree.d_returns[i]
        if growth <= 0.0:
            raise AdmissibilityViolation(
                f"wealth becomes nonpositive at node {i} (growth factor {growth:.6g})")
        X[i] = X[pa] * growth
    return AdaptedProcess(X)


# ----------------------------------------------------------------------
# strategy geometry


def bracket_distance(tree: ScenarioTree, m: Measure, a: Strategy, b: Strategy) -> float:
    """Predictable quadratic bracket of the gains difference of two strategies.

    Sum over dates of E_m[(a-b)' Cov_m(increment | node) (a-b)], where the
    increment is the price change for share strategies and the simple return
    for fraction strategies.  Both strategies must be in the same mode; for
    mixed comparisons convert to comparable units first.
    """
    if a.mode != b.mode:
        raise ValueError("bracket_distance needs strategies in the same mode")
    inc = tree.d_prices if a.mode == "shares" else tree.d_returns
    W, cond = conditional_probs(tree, m)
    delta = a.values - b.values
    total = 0.0
    for i in tree.nonterminal:
        if W[i] <= 0.0:
            continue
        ch = tree.children[i]
        w = cond[i]
        proj = inc[ch] @ delta[i]
        mean = w @ proj
        # centered quadratic form, kept nonnegative term by term
        total += W[i] * float(w @ (proj - mean) ** 2)
    return total

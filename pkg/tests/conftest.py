"""Shared market builders, closed-form one-step optima, random tree generator."""
import numpy as np

from stablab import ScenarioTree, build_tree


def one_step_binomial() -> ScenarioTree:
    return build_tree({"lattice": {"s0": 1.0, "u": 2.0, "d": 0.5, "q": 0.5, "steps": 1}})


def two_step_binomial() -> ScenarioTree:
    return build_tree({"lattice": {"s0": 1.0, "u": 2.0, "d": 0.5, "q": 0.5, "steps": 2}})


def three_step_binomial() -> ScenarioTree:
    return build_tree({"lattice": {"s0": 1.0, "u": 2.0, "d": 0.5, "q": 0.5, "steps": 3}})


def one_step_trinomial() -> ScenarioTree:
    """Price moves to 2.0 / 1.0 / 0.5 with uniform probabilities; incomplete."""
    third = 1.0 / 3.0
    return build_tree({"nodes": [
        {"parent": -1, "prob": 1.0, "prices": [1.0]},
        {"parent": 0, "prob": third, "prices": [2.0]},
        {"parent": 0, "prob": third, "prices": [1.0]},
        {"parent": 0, "prob": third, "prices": [0.5]},
    ]})


def one_step_theta(alpha: float, q: float, a: float, b: float) -> float:
    """Optimal share when the price gain is +a with probability q and -b else.

    First-order condition q*a*exp(-alpha*h*a) = (1-q)*b*exp(alpha*h*b) solved
    in closed form; the standard lattice (u=2, d=0.5, q=0.5, s=1) gives
    ln(2)/(1.5*alpha).
    """
    return np.log(q * a / ((1.0 - q) * b)) / (alpha * (a + b))


def random_viable_tree(rng: np.random.Generator, steps: int = 2) -> ScenarioTree:
    """Random one-asset tree, 2-3 branches per node, factors straddling 1.

    Every node has at least one up factor > 1 and one down factor < 1, so an
    equivalent martingale measure always exists.
    """
    nodes = [{"parent": -1, "prob": 1.0, "prices": [1.0]}]
    frontier = [(0, 1.0)]
    for _ in range(steps):
        new_frontier = []
        for node_id, price in frontier:
            nb = int(rng.integers(2, 4))
            factors = [rng.uniform(1.05, 2.2), rng.uniform(0.4, 0.95)]
            if nb == 3:
                factors.insert(1, rng.uniform(0.5, 2.0))
            probs = rng.dirichlet(np.ones(nb) * 2.0)
            probs = np.clip(probs, 0.02, None)
            probs = probs / probs.sum()
            for f, q in zip(factors, probs):
                nodes.append({"parent": node_id, "prob": float(q),
                              "prices": [price * f]})
                new_frontier.append((len(nodes) - 1, price * f))
        frontier = new_frontier
    return build_tree({"nodes": nodes})

"""Exact Bayes-loss certification on finite POMDPs.

For a tabular POMDP with a state-conditioned expert, every reachable
history up to a horizon is enumerated with its exact probability, belief,
and expert action distribution.  From the depth-T joint we compute the
minimum mean-squared imitation losses of history- and observation-
conditioned policies (the expected conditional variances of the scalar-
embedded expert action), their gap, the per-observation law-of-total-
variance decomposition, and the conditional mutual information between
action and history given the observation.

Two facts are certified on every model: conditioning on history never
raises the minimum loss, and the inequality is strict exactly when the
history carries action information beyond the current observation.  Note
the strictness direction relies on aliasing that shifts conditional mean
actions; distribution changes that preserve the mean carry information
without reducing squared-error loss, a corner that generic random models
never hit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .numcore import DsspError

PROB_ATOL = 1e-12


@dataclass
class TabularPOMDP:
    name: str
    states: list
    actions: list
    observations: list
    action_values: np.ndarray  # scalar embedding per action
    init: np.ndarray           # [S]
    trans: np.ndarray          # [S, A, S]
    emit: np.ndarray           # [S, O]
    expert: np.ndarray         # [S, A]

    def __post_init__(self):
        S, A, O = len(self.states), len(self.actions), len(self.observations)
        self.action_values = np.asarray(self.action_values, dtype=np.float64)
        self.init = np.asarray(self.init, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        self.emit = np.asarray(self.emit, dtype=np.float64)
        self.expert = np.asarray(self.expert, dtype=np.float64)
        shapes = {
            "action_values": (self.action_values.shape, (A,)),
            "init": (self.init.shape, (S,)),
            "trans": (self.trans.shape, (S, A, S)),
            "emit": (self.emit.shape, (S, O)),
            "expert": (self.expert.shape, (S, A)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise DsspError(f"{name} shape {got} != {want}")
        for label, table, axis in (("init", self.init[None, :], 1), ("trans", self.trans, 2),
                                   ("emit", self.emit, 1), ("expert", self.expert, 1)):
            sums = table.sum(axis=axis)
            if np.any(np.abs(sums - 1.0) > PROB_ATOL) or np.any(table < -PROB_ATOL):
                raise DsspError(f"{label} rows must be probability distributions")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "states": list(self.states),
            "actions": list(self.actions),
            "observations": list(self.observations),
            "action_values": self.action_values.tolist(),
            "init": self.init.tolist(),
            "trans": self.trans.tolist(),
            "emit": self.emit.tolist(),
            "expert": self.expert.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "TabularPOMDP":
        required = {"name", "states", "actions", "observations", "action_values",
                    "init", "trans", "emit", "expert"}
        missing = required - set(d)
        if missing:
            raise DsspError(f"model spec missing keys: {sorted(missing)}")
        return TabularPOMDP(
            name=d["name"], states=d["states"], actions=d["actions"],
            observations=d["observations"],
            action_values=np.asarray(d["action_values"], dtype=np.float64),
            init=np.asarray(d["init"], dtype=np.float64),
            trans=np.asarray(d["trans"], dtype=np.float64),
            emit=np.asarray(d["emit"], dtype=np.float64),
            expert=np.asarray(d["expert"], dtype=np.float64),
        )


def load_model(path: str) -> TabularPOMDP:
    with open(path, "r", encoding="utf-8") as fh:
        return TabularPOMDP.from_dict(json.load(fh))


@dataclass
class HistoryNode:
    """One reachable history: its probability, belief, and expert behavior."""

    history: tuple             # alternating obs and action indices, starts/ends with obs
    prob: float
    belief: np.ndarray         # P(s_t | h_t), [S]
    action_dist: np.ndarray    # P_E(a_t | h_t), [A]

    @property
    def obs(self) -> int:
        return self.history[-1]


def enumerate_histories(m: TabularPOMDP, t_max: int,
                        cap: int = 1_000_000) -> list[list[HistoryNode]]:
    """All positive-probability histories per depth 0..t_max.

    A history at depth t is (o_0, a_0, ..., a_{t-1}, o_t); within each
    depth the probabilities sum to one.
    """
    S = len(m.states)
    layers: list[list[HistoryNode]] = []
    current: list[HistoryNode] = []
    for o in range(len(m.observations)):
        joint = m.init * m.emit[:, o]
        p = float(joint.sum())
        if p > 0.0:
            belief = joint / p
            current.append(HistoryNode((o,), p, belief, belief @ m.expert))
    layers.append(current)

    total = len(current)
    for _ in range(t_max):
        nxt: list[HistoryNode] = []
        for node in current:
            for a in range(len(m.actions)):
                p_a = float(node.action_dist[a])
                if p_a <= 0.0:
                    continue
                # belief over s_t given h_t and that the expert chose a
                post = node.belief * m.expert[:, a]
                post = post / post.sum()
                next_state = post @ m.trans[:, a, :]
                for o in range(len(m.observations)):
                    joint = next_state * m.emit[:, o]
                    p_o = float(joint.sum())
                    if p_o <= 0.0:
                        continue
                    belief = joint / p_o
                    nxt.append(HistoryNode(node.history + (a, o),
                                           node.prob * p_a * p_o,
                                           belief, belief @ m.expert))
        total += len(nxt)
        if total > cap:
            raise DsspError(f"history enumeration exceeded cap of {cap}")
        layers.append(nxt)
        current = nxt
    return layers


@dataclass
class BayesReport:
    L_star_obs: float
    L_star_hist: float
    gap: float
    I_cond_bits: float
    per_obs: dict = field(default_factory=dict)
    # per observation index: (P(o), Var(a|o), E[Var(a|h)|o], Var(E[a|h]|o))

    @property
    def decomposition_residual(self) -> float:
        """Max over observations of |Var(a|o) - inner - outer|."""
        worst = 0.0
        for _, var_o, inner, outer in self.per_obs.values():
            worst = max(worst, abs(var_o - inner - outer))
        return worst


def _dist_entropy_bits(p: np.ndarray) -> float:
    nz = p[p > 0.0]
    return float(-(nz * np.log2(nz)).sum())


def bayes_losses(m: TabularPOMDP, t_max: int, cap: int = 1_000_000) -> BayesReport:
    """Exact minimum imitation losses at depth t_max, with the decomposition.

    The propositions are per-timestep statements, so the report fixes the
    final depth; shallower depths are reachable by calling with a smaller
    horizon.
    """
    nodes = enumerate_histories(m, t_max, cap)[-1]
    vals = m.action_values

    # group histories by their current observation
    by_obs: dict[int, list[HistoryNode]] = {}
    for node in nodes:
        by_obs.setdefault(node.obs, []).append(node)

    L_hist = 0.0
    L_obs = 0.0
    I_bits = 0.0
    per_obs = {}
    h_a_given_o = 0.0
    h_a_given_h = 0.0
    for o, group in sorted(by_obs.items()):
        p_o = sum(n.prob for n in group)
        dist_o = np.zeros_like(vals)
        inner = 0.0          # E[Var(a|h) | o]
        mean_sq = 0.0        # E[E[a|h]^2 | o]
        for n in group:
            w = n.prob / p_o
            dist_o += w * n.action_dist
            mu_h = float(n.action_dist @ vals)
            var_h = float(n.action_dist @ (vals * vals)) - mu_h * mu_h
            inner += w * var_h
            mean_sq += w * mu_h * mu_h
            L_hist += n.prob * var_h
            h_a_given_h += n.prob * _dist_entropy_bits(n.action_dist)
        mu_o = float(dist_o @ vals)
        var_o = float(dist_o @ (vals * vals)) - mu_o * mu_o
        outer = mean_sq - mu_o * mu_o  # Var(E[a|h] | o)
        per_obs[o] = (p_o, var_o, inner, outer)
        L_obs += p_o * var_o
        h_a_given_o += p_o * _dist_entropy_bits(dist_o)

    I_bits = h_a_given_o - h_a_given_h
    return BayesReport(L_star_obs=L_obs, L_star_hist=L_hist, gap=L_obs - L_hist,
                       I_cond_bits=I_bits, per_obs=per_obs)


def cond_mutual_info(m: TabularPOMDP, t_max: int, cap: int = 1_000_000) -> float:
    """I(a_t; h_t | o_t) in bits at depth t_max."""
    return bayes_losses(m, t_max, cap).I_cond_bits


@dataclass
class PropositionVerdict:
    holds: bool
    report: BayesReport
    inequality_ok: bool
    strictness_ok: bool
    decomposition_ok: bool
    message: str


def verify_propositions(m: TabularPOMDP, t_max: int, tol: float = 1e-9,
                        cap: int = 1_000_000) -> PropositionVerdict:
    """Certify both statements on one model.

    Checks (1) L*_hist <= L*_obs, (2) the gap is positive exactly when the
    conditional mutual information is positive, and (3) the per-observation
    variance decomposition identity.  A failure indicates an implementation
    bug and carries the offending numbers.
    """
    rep = bayes_losses(m, t_max, cap)
    inequality_ok = rep.L_star_hist <= rep.L_star_obs + tol
    strict = rep.gap > tol
    informative = rep.I_cond_bits > tol
    strictness_ok = strict == informative
    decomposition_ok = rep.decomposition_residual <= tol
    holds = inequality_ok and strictness_ok and decomposition_ok
    if holds:
        message = (f"ok: L*_obs={rep.L_star_obs:.6f} L*_hist={rep.L_star_hist:.6f} "
                   f"gap={rep.gap:.6f} I={rep.I_cond_bits:.6f} bits")
    else:
        message = (f"FAILED on {m.name}: inequality={inequality_ok} "
                   f"strictness={strictness_ok} (gap={rep.gap:.3e}, I={rep.I_cond_bits:.3e}) "
                   f"decomposition={decomposition_ok} "
                   f"(residual={rep.decomposition_residual:.3e})")
    return PropositionVerdict(holds=holds, report=rep, inequality_ok=inequality_ok,
                              strictness_ok=strictness_ok,
                              decomposition_ok=decomposition_ok, message=message)


# -- bundled models ------------------------------------------------------------------

def canonical_aliasing_model() -> TabularPOMDP:
    """Two equally likely branches revealed at the first step only.

    From the second step on, both branches emit the same observation while
    the expert deterministically plays +1 on one branch and -1 on the
    other: knowing the history removes all action variance, knowing the
    observation leaves variance one, and the hidden bit is worth exactly
    one bit.
    """
    return TabularPOMDP(
        name="canonical-aliasing",
        states=["start_a", "start_b", "hall_a", "hall_b"],
        actions=["minus", "plus"],
        observations=["cue_a", "cue_b", "hall"],
        action_values=np.array([-1.0, 1.0]),
        init=np.array([0.5, 0.5, 0.0, 0.0]),
        trans=np.array([
            # from start_a -> hall_a, start_b -> hall_b, halls absorbing
            [[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            [[0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 1.0]],
            [[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            [[0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 1.0]],
        ]),
        emit=np.array([
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0],
        ]),
        expert=np.array([
            [0.0, 1.0],   # branch a plays +1 everywhere
            [1.0, 0.0],   # branch b plays -1 everywhere
            [0.0, 1.0],
            [1.0, 0.0],
        ]),
    )


def markov_chain_model() -> TabularPOMDP:
    """Fully observed two-state chain: history adds nothing."""
    return TabularPOMDP(
        name="markov-chain",
        states=["left", "right"],
        actions=["stay", "go"],
        observations=["left", "right"],
        action_values=np.array([0.0, 1.0]),
        init=np.array([0.5, 0.5]),
        trans=np.array([
            [[1.0, 0.0], [0.0, 1.0]],
            [[0.0, 1.0], [1.0, 0.0]],
        ]),
        emit=np.eye(2),
        expert=np.array([
            [0.25, 0.75],
            [0.75, 0.25],
        ]),
    )


BUILTIN_MODELS = {
    "canonical-aliasing": canonical_aliasing_model,
    "markov-chain": markov_chain_model,
}


def builtin_model(name: str) -> TabularPOMDP:
    if name not in BUILTIN_MODELS:
        raise DsspError(f"unknown builtin model '{name}' "
                        f"(choose from {', '.join(sorted(BUILTIN_MODELS))})")
    return BUILTIN_MODELS[name]()


def random_model(seed: int, markovian: bool = False, soft_emissions: bool = False,
                 n_states: int | None = None, n_actions: int | None = None,
                 n_obs: int | None = None) -> TabularPOMDP:
    """Random tabular POMDP for certification sweeps.

    Markovian models use an identity emission (observation reveals the
    state) so history is worthless by construction.  Aliased models either
    map several states onto one observation (hard) or draw stochastic
    emission rows (soft); both leave history informative generically.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    S = n_states or int(rng.integers(2, 5))
    A = n_actions or int(rng.integers(2, 4))

    def dirichlet(shape):
        g = rng.gamma(0.6, size=shape)
        return g / g.sum(axis=-1, keepdims=True)

    if markovian:
        O = S
        emit = np.eye(S)
    else:
        O = n_obs or int(rng.integers(1, max(2, S)))
        if soft_emissions:
            emit = dirichlet((S, O))
        else:
            emit = np.zeros((S, O))
            emit[np.arange(S), rng.integers(0, O, size=S)] = 1.0
            # ensure at least two states share an observation
            if len(set(np.argmax(emit, axis=1))) == S:
                i = int(rng.integers(1, S))
                emit[i] = 0.0
                emit[i, int(np.argmax(emit[0]))] = 1.0

    return TabularPOMDP(
        name=f"random-{seed}" + ("-markov" if markovian else ""),
        states=[f"s{i}" for i in range(S)],
        actions=[f"a{i}" for i in range(A)],
        observations=[f"o{i}" for i in range(O)],
        action_values=np.round(rng.uniform(-2.0, 2.0, size=A), 3),
        init=dirichlet((S,)),
        trans=dirichlet((S, A, S)),
        emit=emit,
        expert=dirichlet((S, A)),
    )

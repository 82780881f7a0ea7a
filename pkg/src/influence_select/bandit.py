"""Quality-diversity selection loop: UCB over clusters.

Each cluster is an arm. A pull samples a small batch from the cluster,
scores it with the influence callback, and adds the batch reward to the
arm's cumulative total. Selection sweeps all estimated clusters and takes a
gamma-fraction of the remaining members of every cluster whose mean reward
clears the threshold tau (strict inequality).

Unpulled arms score +inf so every arm is tried before exploitation; an arm
whose members are all selected is retired (-inf). Each instance is scored
at most once per run: the driver caches scores by instance id.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterModel
from .errors import DataError, UsageError

TAU_MODES = ("cluster", "instance")
REWARD_MODES = ("sum", "mean")


@dataclass
class BanditConfig:
    alpha: float = 0.002
    tau: float = 0.0025
    gamma: float = 0.05
    top_k: int = 4
    batch_size: int = 32  # m: instances sampled per pulled cluster
    tau_mode: str = "cluster"
    reward_mode: str = "sum"
    max_rounds: int = 100000

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise UsageError("gamma must be in (0, 1]")
        if self.tau_mode not in TAU_MODES:
            raise UsageError(f"tau_mode must be one of {TAU_MODES}")
        if self.reward_mode not in REWARD_MODES:
            raise UsageError(f"reward_mode must be one of {REWARD_MODES}")
        if self.top_k < 1 or self.batch_size < 1:
            raise UsageError("top_k and batch_size must be positive")


@dataclass
class BanditState:
    n_clusters: int
    alpha: float
    reward: np.ndarray = None  # R: cumulative batch reward per cluster
    pulls: np.ndarray = None  # T: pull count per cluster
    retired: np.ndarray = None

    def __post_init__(self):
        if self.reward is None:
            self.reward = np.zeros(self.n_clusters)
        if self.pulls is None:
            self.pulls = np.zeros(self.n_clusters, dtype=np.int64)
        if self.retired is None:
            self.retired = np.zeros(self.n_clusters, dtype=bool)

    def mean_reward(self, i: int) -> float:
        if self.pulls[i] == 0:
            raise DataError(f"cluster {i} has no pulls; mean reward undefined")
        return float(self.reward[i] / self.pulls[i])


def cluster_score(state: BanditState, i: int) -> float:
    """Mean reward plus the UCB exploration bonus.

    Unpulled arms score +inf (forced exploration); retired arms -inf.
    """
    if state.retired[i]:
        return -math.inf
    t_i = int(state.pulls[i])
    if t_i == 0:
        return math.inf
    total = float(state.pulls.sum())
    mean = state.reward[i] / t_i
    return float(mean + state.alpha * np.sqrt(2.0 * np.log(total) / t_i))


def cluster_scores(state: BanditState) -> np.ndarray:
    """Vectorized cluster_score over all arms."""
    scores = np.full(state.n_clusters, np.inf)
    total = float(state.pulls.sum())
    pulled = state.pulls > 0
    if pulled.any():
        t = state.pulls[pulled].astype(np.float64)
        scores[pulled] = state.reward[pulled] / t + state.alpha * np.sqrt(
            2.0 * np.log(total) / t
        )
    scores[state.retired] = -np.inf
    return scores


@dataclass
class PullRecord:
    cluster: int
    sampled_ids: list[int]
    batch_sum: float


@dataclass
class IterationRecord:
    iteration: int
    pulls: list[PullRecord] = field(default_factory=list)
    selections: list[tuple[int, list[int]]] = field(default_factory=list)  # (cluster, ids)
    newly_retired: list[int] = field(default_factory=list)
    skipped_pulls: int = 0
    selected_total: int = 0


@dataclass
class SelectionLedger:
    iterations: list[IterationRecord] = field(default_factory=list)
    selected: list[int] = field(default_factory=list)  # selection order
    selected_clusters: list[int] = field(default_factory=list)  # parallel to selected
    truncated: bool = False
    final_state: BanditState | None = None

    def selected_set(self) -> set[int]:
        return set(self.selected)


class CachedScorer:
    """Score each instance at most once; repeated requests reuse the cache."""

    def __init__(self, scorer):
        self._scorer = scorer
        self.cache: dict[int, float] = {}

    def __call__(self, ids: list[int]) -> list[float]:
        fresh = [i for i in ids if i not in self.cache]
        if fresh:
            for i, s in zip(fresh, self._scorer(fresh)):
                self.cache[i] = float(s)
        return [self.cache[i] for i in ids]


def _top_k_by_score(scores: np.ndarray, k: int) -> list[int]:
    # ties (including +inf vs +inf) break toward the lower cluster index
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:k]]


def _unselected(members: np.ndarray, selected: set[int]) -> np.ndarray:
    if not selected:
        return members
    keep = np.fromiter((mid not in selected for mid in members), dtype=bool,
                       count=members.size)
    return members[keep]


def pull_and_update(
    state: BanditState,
    model: ClusterModel,
    scorer,
    top_k: int,
    m: int,
    seed: int,
    ledger: SelectionLedger,
    iteration: int = 0,
    reward_mode: str = "sum",
) -> IterationRecord:
    """One bandit iteration: pull the top_k clusters by score.

    Samples up to m not-yet-selected members from each pulled cluster
    (without replacement within the batch), scores them, and applies the
    reward update R += batch reward, T += 1. Exhausted arms are retired and
    logged as skipped pulls.
    """
    if state.n_clusters < top_k:
        raise DataError(f"top_k={top_k} exceeds cluster count {state.n_clusters}")
    rng = np.random.default_rng(seed)
    rec = IterationRecord(iteration=iteration)
    selected = ledger.selected_set()
    chosen = _top_k_by_score(cluster_scores(state), top_k)
    for ci in chosen:
        if state.retired[ci]:
            rec.skipped_pulls += 1
            continue
        avail = _unselected(model.members(ci), selected)
        if avail.size == 0:
            state.retired[ci] = True
            rec.newly_retired.append(ci)
            rec.skipped_pulls += 1
            continue
        take = min(m, avail.size)
        ids = [int(x) for x in rng.choice(avail, size=take, replace=False)]
        scores = scorer(ids)
        batch_sum = float(math.fsum(scores))
        reward = batch_sum if reward_mode == "sum" else batch_sum / take
        state.reward[ci] += reward
        state.pulls[ci] += 1
        rec.pulls.append(PullRecord(cluster=ci, sampled_ids=ids, batch_sum=batch_sum))
    rec.selected_total = len(ledger.selected)
    return rec


def select_step(
    state: BanditState,
    model: ClusterModel,
    ledger: SelectionLedger,
    gamma: float,
    tau: float,
    seed: int,
    scorer=None,
    tau_mode: str = "cluster",
) -> list[tuple[int, list[int]]]:
    """Add a gamma-fraction of remaining members from qualifying clusters.

    cluster mode (default): a cluster qualifies when its mean reward
    strictly exceeds tau. instance mode: the gamma-sample is drawn from
    every estimated cluster and filtered to instances whose own influence
    strictly exceeds tau (requires a scorer).
    """
    if tau_mode not in TAU_MODES:
        raise UsageError(f"tau_mode must be one of {TAU_MODES}")
    if tau_mode == "instance" and scorer is None:
        raise UsageError("instance tau_mode needs a scorer to filter by instance score")
    if not (state.pulls > 0).any():
        raise DataError("select_step requires at least one pulled cluster")
    rng = np.random.default_rng(seed)
    selected = ledger.selected_set()
    out: list[tuple[int, list[int]]] = []
    for ci in range(state.n_clusters):
        if state.pulls[ci] == 0:
            continue
        mean = state.reward[ci] / state.pulls[ci]
        if tau_mode == "cluster" and not (mean > tau):
            continue
        avail = _unselected(model.members(ci), selected)
        if avail.size == 0:
            continue
        take = min(avail.size, max(1, int(math.floor(gamma * avail.size))))
        ids = [int(x) for x in rng.choice(avail, size=take, replace=False)]
        if tau_mode == "instance":
            scores = scorer(ids)
            ids = [i for i, s in zip(ids, scores) if s > tau]
            if not ids:
                continue
        for i in ids:
            selected.add(i)
            ledger.selected.append(i)
            ledger.selected_clusters.append(ci)
        out.append((ci, ids))
    return out


def run(
    cfg: BanditConfig,
    model: ClusterModel,
    scorer,
    budget: int,
    seed: int = 0,
) -> SelectionLedger:
    """Alternate pull_and_update / select_step until the budget is met.

    Returns a ledger flagged truncated when every arm retires (or the round
    cap trips) before the budget is reached.
    """
    if budget < 0:
        raise UsageError("budget must be non-negative")
    if budget > model.count:
        raise DataError(f"budget {budget} exceeds corpus count {model.count}")
    state = BanditState(n_clusters=model.k, alpha=cfg.alpha)
    ledger = SelectionLedger()
    cached = scorer if isinstance(scorer, CachedScorer) else CachedScorer(scorer)
    iteration = 0
    while len(ledger.selected) < budget:
        if state.retired.all():
            ledger.truncated = True
            break
        if iteration >= cfg.max_rounds:
            ledger.truncated = True
            break
        pull_seed = _derive_seed(seed, iteration, 0)
        select_seed = _derive_seed(seed, iteration, 1)
        rec = pull_and_update(
            state, model, cached, cfg.top_k, cfg.batch_size, pull_seed,
            ledger, iteration=iteration, reward_mode=cfg.reward_mode,
        )
        if (state.pulls > 0).any():
            rec.selections = select_step(
                state, model, ledger, cfg.gamma, cfg.tau, select_seed,
                scorer=cached, tau_mode=cfg.tau_mode,
            )
        rec.selected_total = len(ledger.selected)
        ledger.iterations.append(rec)
        iteration += 1
    ledger.final_state = state
    return ledger


def _derive_seed(seed: int, iteration: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, iteration, stream]).generate_state(1)[0])


def write_ledger_jsonl(path, ledger: SelectionLedger, fingerprint: str = "") -> None:
    """One JSON record per iteration plus a final summary record."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if fingerprint:
            fh.write(json.dumps({"config_fingerprint": fingerprint}, sort_keys=True) + "\n")
        for rec in ledger.iterations:
            fh.write(
                json.dumps(
                    {
                        "iteration": rec.iteration,
                        "pulls": [
                            {"cluster": p.cluster, "sampled_ids": p.sampled_ids,
                             "batch_sum": p.batch_sum}
                            for p in rec.pulls
                        ],
                        "selections": [
                            {"cluster": c, "ids": ids} for c, ids in rec.selections
                        ],
                        "newly_retired": rec.newly_retired,
                        "skipped_pulls": rec.skipped_pulls,
                        "selected_total": rec.selected_total,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        fh.write(
            json.dumps(
                {"truncated": ledger.truncated, "selected_total": len(ledger.selected)},
                sort_keys=True,
            )
            + "\n"
        )


def write_selection(path, ledger: SelectionLedger, fingerprint: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if fingerprint:
            fh.write(f"# config_fingerprint={fingerprint}\n")
        for i in ledger.selected:
            fh.write(f"{i}\n")


def read_selection(path) -> list[int]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            out.append(int(line))
    return out


# ------------------------------------------------------------- simulation


POLICIES = ("ucb", "topk-greedy", "random")


@dataclass
class SimResult:
    policy: str
    trial: int
    pull_counts: np.ndarray
    regret: np.ndarray  # per-step expected regret
    best_arm: int


def simulate_policies(
    n_arms: int,
    steps: int,
    trials: int,
    policies=POLICIES,
    alpha: float = 1.0,
    sigma: float = 1.0,
    members_per_arm: int = 400,
    seed: int = 0,
    best_mean: float = 2.5,
    spread: float = 1.8,
) -> list[SimResult]:
    """Arm-identification benchmark on planted Gaussian rewards.

    Every arm is a synthetic cluster of ``members_per_arm`` instances whose
    influence values are fixed draws from N(mean_i, sigma^2); one trial runs
    ``steps`` single-cluster pulls with batch size 1 through the same
    pull_and_update loop the real pipeline uses. Arm means are a shuffled
    ladder: one arm at ``best_mean``, the rest evenly spaced on [0, spread].
    """
    results: list[SimResult] = []
    for trial in range(trials):
        trial_rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, trial]))
        means = np.concatenate([[best_mean], np.linspace(0.0, spread, n_arms - 1)])
        means = trial_rng.permutation(means)
        best_arm = int(np.argmax(means))
        values = means[:, None] + sigma * trial_rng.normal(size=(n_arms, members_per_arm))
        assignment = np.repeat(np.arange(n_arms, dtype=np.uint32), members_per_arm)
        model = ClusterModel(
            k=n_arms,
            centroids=np.zeros((n_arms, 1)),
            assignment=assignment,
            sizes=np.full(n_arms, members_per_arm, dtype=np.int64),
        )

        def scorer(ids):
            return [float(values[i // members_per_arm, i % members_per_arm]) for i in ids]

        for policy in policies:
            state = BanditState(n_clusters=n_arms, alpha=alpha)
            ledger = SelectionLedger()
            cached = CachedScorer(scorer)
            policy_rng = np.random.default_rng(
                np.random.SeedSequence(
                    [seed & 0xFFFFFFFF, trial, zlib.crc32(policy.encode("utf-8"))]
                )
            )
            regret = np.zeros(steps)
            for step in range(steps):
                if policy == "ucb":
                    arm = _top_k_by_score(cluster_scores(state), 1)[0]
                elif policy == "topk-greedy":
                    unpulled = np.flatnonzero(state.pulls == 0)
                    if unpulled.size:
                        arm = int(unpulled[0])
                    else:
                        means_hat = state.reward / state.pulls
                        arm = int(np.argmax(means_hat))
                else:
                    arm = int(policy_rng.integers(n_arms))
                forced = BanditState(
                    n_clusters=n_arms, alpha=state.alpha,
                    reward=state.reward, pulls=state.pulls, retired=state.retired,
                )
                # force the chosen arm by retiring all others for this pull
                mask = np.ones(n_arms, dtype=bool)
                mask[arm] = False
                forced.retired = mask
                pull_and_update(
                    forced, model, cached, 1, 1,
                    _derive_seed(seed, trial * steps + step, 2), ledger, iteration=step,
                )
                regret[step] = means[best_arm] - means[arm]
            results.append(
                SimResult(
                    policy=policy, trial=trial,
                    pull_counts=state.pulls.copy(), regret=regret, best_arm=best_arm,
                )
            )
    return results


def write_regret_csv(path, results: list[SimResult], fingerprint: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if fingerprint:
            fh.write(f"# config_fingerprint={fingerprint}\n")
        fh.write("policy,trial,step,regret,cum_regret\n")
        for res in results:
            cum = 0.0
            for step, r in enumerate(res.regret):
                cum += float(r)
                fh.write(f"{res.policy},{res.trial},{step},{r:.17g},{cum:.17g}\n")

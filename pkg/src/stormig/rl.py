"""Advantage actor-critic training of the GRU policy with a two-phase curriculum."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .neural import AdamState, GruPolicy, adam_step, log_softmax, softmax
from .simulator import N_ACTIONS, Action, SimConfig, reset, step
from .workload import WorkloadTrace

log = logging.getLogger(__name__)

__all__ = [
    "Trajectory",
    "TrainConfig",
    "LossReport",
    "EvalResult",
    "Actor",
    "DrlActor",
    "rollout",
    "discounted_returns",
    "a2c_loss",
    "a2c_update",
    "train_curriculum",
    "evaluate_policy",
    "eval_seed",
    "CurriculumA2C",
    "write_learning_curve",
    "read_learning_curve",
]


@dataclass
class Trajectory:
    observations: np.ndarray
    hidden_before: np.ndarray
    hidden_after: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    makespan: int
    truncated: bool
    trace_id: int = 0

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class TrainConfig:
    epochs_standard: int = 1000
    epochs_real: int = 1000
    epsilon: float = 0.1
    gamma: float = 0.99
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    episodes_per_epoch: int = 4
    eval_every: int = 25
    learning_rate: float = 3e-4
    clip_norm: float = 2.0
    normalize_advantages: bool = True
    noop_bias: float = 0.0
    fit_normalization: bool = True
    keep_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.episodes_per_epoch < 1 or self.eval_every < 1:
            raise ValueError("episodes_per_epoch and eval_every must be positive")


@dataclass
class LossReport:
    policy_loss: float
    value_loss: float
    entropy: float
    total: float
    grad_norm: float = 0.0


@dataclass
class EvalResult:
    makespans: list[int]
    truncated: int

    @property
    def mean_K(self) -> float:
        return float(np.mean(self.makespans))


class Actor(Protocol):
    def reset(self) -> None: ...

    def act(self, obs: np.ndarray) -> Action: ...


class DrlActor:
    """Greedy controller driven by a GRU policy, optionally through QBNs."""

    def __init__(self, policy: GruPolicy, qbn_obs=None, qbn_hidden=None):
        self.policy = policy
        self.qbn_obs = qbn_obs
        self.qbn_hidden = qbn_hidden
        self.h = policy.initial_hidden()

    def reset(self):
        self.h = self.policy.initial_hidden()

    def act(self, obs):
        self.h = _policy_step(self.policy, self.h, obs, self.qbn_obs, self.qbn_hidden)
        logits, _ = self.policy.heads(self.h)
        return Action(int(np.argmax(logits)))


def _policy_step(policy, h, obs, qbn_obs=None, qbn_hidden=None):
    x = obs if qbn_obs is None else qbn_obs.reconstruct(obs)
    h_new, _ = policy.gru.forward(h, policy.normalize(x))
    return h_new if qbn_hidden is None else qbn_hidden.reconstruct(h_new)


def rollout(
    policy: GruPolicy,
    config: SimConfig,
    trace: WorkloadTrace,
    epsilon: float,
    rng: np.random.Generator,
    sim_seed: int | None = None,
    greedy: bool = False,
    qbn_obs=None,
    qbn_hidden=None,
    trace_id: int = 0,
) -> Trajectory:
    """Run one episode from h_0 = 0.

    Actions are sampled from the softmax policy (argmax when ``greedy``) and
    replaced by a uniform random action with probability ``epsilon``.
    """
    sim_rng = np.random.default_rng(config.seed if sim_seed is None else sim_seed)
    state, obs = reset(config, trace)
    h = policy.initial_hidden()
    obs_l, hb_l, ha_l, act_l, rew_l, done_l = [], [], [], [], [], []
    done = False
    while not done:
        h_new = _policy_step(policy, h, obs, qbn_obs, qbn_hidden)
        logits, _ = policy.heads(h_new)
        if epsilon > 0 and rng.random() < epsilon:
            a = int(rng.integers(N_ACTIONS))
        elif greedy:
            a = int(np.argmax(logits))
        else:
            a = int(rng.choice(N_ACTIONS, p=softmax(logits)))
        state, res = step(state, a, config, trace, sim_rng)
        obs_l.append(obs)
        hb_l.append(h)
        ha_l.append(h_new)
        act_l.append(a)
        rew_l.append(res.reward)
        done_l.append(res.done)
        obs, h, done = res.observation, h_new, res.done
    return Trajectory(
        observations=np.array(obs_l),
        hidden_before=np.array(hb_l),
        hidden_after=np.array(ha_l),
        actions=np.array(act_l, dtype=np.int64),
        rewards=np.array(rew_l),
        dones=np.array(done_l),
        makespan=state.interval,
        truncated=state.truncated,
        trace_id=trace_id,
    )


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Monte-Carlo returns, G_t = r_t + gamma * G_{t+1}, G_last = r_last."""
    G = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        G[t] = acc
    return G


def _sequence_forward(policy, obs_seq, qbn_obs=None, qbn_hidden=None):
    h = policy.initial_hidden()
    caches, hs = [], []
    for o in obs_seq:
        c_o = c_h = None
        x = o
        if qbn_obs is not None:
            x, c_o = qbn_obs.reconstruct_forward(o)
        h_raw, c_g = policy.gru.forward(h, policy.normalize(x))
        h = h_raw
        if qbn_hidden is not None:
            h, c_h = qbn_hidden.reconstruct_forward(h_raw)
        caches.append((c_o, c_g, c_h))
        hs.append(h)
    H = np.array(hs)
    logits, c_pi = policy.pi.forward(H)
    values, c_v = policy.v.forward(H)
    return H, logits, values[:, 0], (caches, c_pi, c_v)


def _sequence_backward(policy, cache, dlogits, dvalues, qbn_obs=None, qbn_hidden=None):
    caches, c_pi, c_v = cache
    dH = policy.pi.backward(c_pi, dlogits) + policy.v.backward(c_v, dvalues[:, None])
    dh_next = np.zeros(policy.hidden_size)
    for t in range(len(caches) - 1, -1, -1):
        c_o, c_g, c_h = caches[t]
        dh = dH[t] + dh_next
        if qbn_hidden is not None:
            dh = qbn_hidden.reconstruct_backward(c_h, dh)
        dh_next, dx = policy.gru.backward(c_g, dh)
        if qbn_obs is not None:
            qbn_obs.reconstruct_backward(c_o, dx / policy.obs_scale)


def _advantages(trajectories, policy, cfg: TrainConfig, qbn_obs=None, qbn_hidden=None):
    adv = []
    for tr in trajectories:
        _, _, values, _ = _sequence_forward(policy, tr.observations, qbn_obs, qbn_hidden)
        adv.append(discounted_returns(tr.rewards, cfg.gamma) - values)
    if cfg.normalize_advantages:
        flat = np.concatenate(adv)
        if len(flat) > 1:
            mu, sd = flat.mean(), flat.std()
            adv = [(a - mu) / (sd + 1e-8) for a in adv]
    return adv


def a2c_loss(
    policy: GruPolicy,
    trajectories: Sequence[Trajectory],
    cfg: TrainConfig,
    advantages: list[np.ndarray] | None = None,
    qbn_obs=None,
    qbn_hidden=None,
    backward: bool = True,
) -> LossReport:
    """Evaluate the A2C loss and (optionally) accumulate its gradient.

    Per step: -A_t log pi(a_t) + value_coef (G_t - V_t)^2 - entropy_coef H_t,
    averaged over all steps. Advantages are constants with respect to the
    parameters; pass them explicitly to freeze them across calls.
    """
    if not trajectories:
        raise ValueError("a2c_loss needs at least one trajectory")
    if advantages is None:
        advantages = _advantages(trajectories, policy, cfg, qbn_obs, qbn_hidden)
    n = sum(len(tr) for tr in trajectories)
    pl = vl = ent = 0.0
    for tr, A in zip(trajectories, advantages):
        G = discounted_returns(tr.rewards, cfg.gamma)
        _, logits, values, cache = _sequence_forward(policy, tr.observations, qbn_obs, qbn_hidden)
        logp = log_softmax(logits)
        p = np.exp(logp)
        idx = np.arange(len(tr))
        H_t = -(p * logp).sum(axis=1)
        pl += float(-(A * logp[idx, tr.actions]).sum())
        vl += float(((G - values) ** 2).sum())
        ent += float(H_t.sum())
        if backward:
            onehot = np.zeros_like(p)
            onehot[idx, tr.actions] = 1.0
            dlogits = -A[:, None] * (onehot - p) + cfg.entropy_coef * p * (logp + H_t[:, None])
            dvalues = cfg.value_coef * 2.0 * (values - G)
            _sequence_backward(policy, cache, dlogits / n, dvalues / n, qbn_obs, qbn_hidden)
    total = (pl + cfg.value_coef * vl - cfg.entropy_coef * ent) / n
    if not np.isfinite(total):
        raise FloatingPointError("non-finite A2C loss")
    return LossReport(pl / n, vl / n, ent / n, total)


def a2c_update(
    policy: GruPolicy,
    trajectories: Sequence[Trajectory],
    cfg: TrainConfig,
    opt: AdamState,
    qbn_obs=None,
    qbn_hidden=None,
) -> LossReport:
    for p in opt.params:
        p.zero_grad()
    report = a2c_loss(policy, trajectories, cfg, qbn_obs=qbn_obs, qbn_hidden=qbn_hidden)
    report.grad_norm = adam_step(opt)
    return report


def eval_seed(base_seed: int, index: int) -> int:
    """Simulator seed for the ``index``-th evaluation trace; shared by all actors."""
    return int(np.random.SeedSequence([base_seed, index, 7919]).generate_state(1)[0])


def run_actor(actor: Actor, config: SimConfig, trace: WorkloadTrace, sim_seed: int, on_step=None):
    """Drive one episode with ``actor``; returns the final simulator state."""
    rng = np.random.default_rng(sim_seed)
    state, obs = reset(config, trace)
    actor.reset()
    while not state.done:
        a = actor.act(obs)
        prev = state
        state, res = step(state, a, config, trace, rng)
        if on_step is not None:
            on_step(prev, obs, a, state, res)
        obs = res.observation
    return state


def evaluate_policy(actor: Actor | GruPolicy, config: SimConfig, traces: Sequence[WorkloadTrace]) -> EvalResult:
    """Deterministic evaluation with per-trace seeds shared by every actor."""
    if not traces:
        raise ValueError("evaluate_policy needs at least one trace")
    if isinstance(actor, GruPolicy):
        actor = DrlActor(actor)
    ks, trunc = [], 0
    for i, tr in enumerate(traces):
        final = run_actor(actor, config, tr, eval_seed(config.seed, i))
        ks.append(final.interval)
        trunc += int(final.truncated)
    return EvalResult(ks, trunc)


@dataclass
class CurvePoint:
    epoch: int
    phase: str
    mean_K: float
    policy_loss: float
    value_loss: float
    entropy: float


def train_curriculum(
    standard: Sequence[WorkloadTrace],
    real: Sequence[WorkloadTrace],
    sim_cfg: SimConfig,
    train_cfg: TrainConfig,
    eval_traces: Sequence[WorkloadTrace] | None = None,
    policy: GruPolicy | None = None,
    callback: Callable[[int, str, GruPolicy], None] | None = None,
) -> tuple[GruPolicy, list[CurvePoint]]:
    """Train on ``standard`` traces, then keep training the same weights on ``real``.

    The learning curve holds the greedy mean makespan on ``eval_traces``
    (default: ``real``) every ``eval_every`` epochs.
    """
    if train_cfg.epochs_standard > 0 and not standard:
        raise ValueError("standard trace set is empty")
    if train_cfg.epochs_real > 0 and not real:
        raise ValueError("real trace set is empty")
    eval_traces = list(real if eval_traces is None else eval_traces)
    rng = np.random.default_rng(train_cfg.seed)
    if policy is None:
        policy = GruPolicy(seed=train_cfg.seed, noop_bias=train_cfg.noop_bias)
        if train_cfg.fit_normalization:
            fit_normalization(policy, sim_cfg, list(standard) + list(real), seed=train_cfg.seed)
    best = (np.inf, None)
    opt = AdamState(policy.parameters(), learning_rate=train_cfg.learning_rate, clip_norm=train_cfg.clip_norm)
    curve: list[CurvePoint] = []
    epoch = 0
    for phase, pool, n_epochs in (("standard", standard, train_cfg.epochs_standard), ("real", real, train_cfg.epochs_real)):
        for _ in range(n_epochs):
            trajs = []
            for _ in range(train_cfg.episodes_per_epoch):
                i = int(rng.integers(len(pool)))
                trajs.append(
                    rollout(policy, sim_cfg, pool[i], train_cfg.epsilon, rng, sim_seed=int(rng.integers(2**31)), trace_id=i)
                )
            rep = a2c_update(policy, trajs, train_cfg, opt)
            epoch += 1
            if epoch % train_cfg.eval_every == 0:
                mean_K = evaluate_policy(policy, sim_cfg, eval_traces).mean_K if eval_traces else float("nan")
                curve.append(CurvePoint(epoch, phase, mean_K, rep.policy_loss, rep.value_loss, rep.entropy))
                log.info("epoch %d [%s] mean K %.3f", epoch, phase, mean_K)
                if mean_K < best[0]:
                    best = (mean_K, policy.state_dict())
                if callback is not None:
                    callback(epoch, phase, policy)
    if train_cfg.keep_best and best[1] is not None:
        policy.load_state_dict(best[1])
    return policy, curve


def fit_normalization(policy: GruPolicy, sim_cfg: SimConfig, traces, episodes: int = 16, seed: int = 0):
    """Set the policy's fixed input standardization from uniform-random rollouts."""
    rng = np.random.default_rng([seed, 271828])
    obs = []
    for e in range(episodes):
        tr = traces[e % len(traces)]
        obs.append(rollout(policy, sim_cfg, tr, 1.0, rng, sim_seed=int(rng.integers(2**31))).observations)
    obs = np.concatenate(obs)
    policy.set_normalization(obs.mean(axis=0), obs.std(axis=0) + 0.05)
    return policy


def write_learning_curve(curve: Sequence[CurvePoint], path) -> None:
    lines = ["epoch phase mean_K policy_loss value_loss entropy"]
    for c in curve:
        lines.append(f"{c.epoch} {c.phase} {c.mean_K!r} {c.policy_loss!r} {c.value_loss!r} {c.entropy!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_learning_curve(path) -> list[CurvePoint]:
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for row in rows:
        e, ph, *vals = row.split()
        out.append(CurvePoint(int(e), ph, *(float(v) for v in vals)))
    return out


class CurriculumA2C(BaseEstimator):
    """Estimator wrapper: ``fit(standard, real)`` trains a :class:`GruPolicy`.

    After fitting, ``policy_`` holds the network and ``learning_curve_`` the
    evaluation history. ``predict(traces)`` returns greedy makespans.
    """

    def __init__(
        self,
        epochs_standard=1000,
        epochs_real=1000,
        epsilon=0.1,
        gamma=0.99,
        value_coef=0.5,
        entropy_coef=0.01,
        episodes_per_epoch=4,
        eval_every=25,
        learning_rate=3e-4,
        clip_norm=2.0,
        normalize_advantages=True,
        noop_bias=0.0,
        fit_normalization=True,
        keep_best=True,
        sim_config=None,
        seed=0,
    ):
        self.epochs_standard = epochs_standard
        self.epochs_real = epochs_real
        self.epsilon = epsilon
        self.gamma = gamma
        self.value_coef = value_coef
        self.entropy_coef = entropy_coef
        self.episodes_per_epoch = episodes_per_epoch
        self.eval_every = eval_every
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.normalize_advantages = normalize_advantages
        self.noop_bias = noop_bias
        self.fit_normalization = fit_normalization
        self.keep_best = keep_best
        self.sim_config = sim_config
        self.seed = seed

    def train_config(self) -> TrainConfig:
        names = TrainConfig.__dataclass_fields__
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, standard, real=None, eval_traces=None):
        sim_cfg = self.sim_config or SimConfig()
        real = list(real) if real is not None else []
        self.policy_, self.learning_curve_ = train_curriculum(
            list(standard), real, sim_cfg, self.train_config(), eval_traces=eval_traces or real or list(standard)
        )
        return self

    def predict(self, traces):
        check_is_fitted(self, "policy_")
        return np.array(evaluate_policy(self.policy_, self.sim_config or SimConfig(), list(traces)).makespans)

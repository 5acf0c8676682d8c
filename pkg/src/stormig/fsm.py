"""Finite state machines extracted from quantized policy records.

States are distinct hidden-state codes and input symbols are distinct
observation codes. A state's action is the action the policy emits right
after entering it, so executing the machine means: read the observation,
follow the transition, emit the new state's action.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .neural import GruPolicy
from .qbn import QuantizedBottleneck, TransitionDataset, code_key, encode
from .rl import DrlActor, EvalResult, eval_seed, evaluate_policy, run_actor
from .simulator import Action, SimConfig
from .workload import WorkloadTrace

__all__ = [
    "Fsm",
    "FsmError",
    "ExtractionStats",
    "FidelityReport",
    "FsmActor",
    "extract_fsm",
    "minimize_fsm",
    "fsm_step",
    "run_codes",
    "fidelity",
    "export_fsm",
    "import_fsm",
    "to_dot",
]

FORMAT_NAME = "stormig-fsm"
FORMAT_VERSION = 1


class FsmError(ValueError):
    pass


@dataclass(frozen=True)
class ExtractionStats:
    n_records: int
    conflict_rate: float
    consistency_rate: float
    n_raw_states: int

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "conflict_rate": self.conflict_rate,
            "consistency_rate": self.consistency_rate,
            "n_raw_states": self.n_raw_states,
        }


@dataclass(eq=False)
class Fsm:
    """Moore machine over observation codes.

    ``obs_memory[s]`` lists ``(obs_id, mean raw observation, count)`` for the
    observations seen while in state ``s``; it drives the nearest-neighbour
    fallback for unseen codes.
    """

    state_codes: list[tuple[str, ...]]
    obs_codes: list[str]
    transitions: dict[tuple[int, int], int]
    action_of: list[int]
    start_state: int
    obs_memory: dict[int, list[tuple[int, np.ndarray, int]]]
    visit_counts: list[int]
    stats: ExtractionStats | None = None
    _obs_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.state_codes)
        if n == 0:
            raise FsmError("machine has no states")
        if not 0 <= self.start_state < n:
            raise FsmError("start state does not exist")
        if len(self.action_of) != n or len(self.visit_counts) != n:
            raise FsmError("action_of and visit_counts must cover every state")
        for (s, o), t in self.transitions.items():
            if not (0 <= s < n and 0 <= t < n and 0 <= o < len(self.obs_codes)):
                raise FsmError(f"transition ({s}, {o}) -> {t} references a missing state or code")
        self.action_of = [int(a) for a in self.action_of]
        for a in self.action_of:
            Action(a)
        self._obs_index = {c: i for i, c in enumerate(self.obs_codes)}

    @property
    def n_states(self) -> int:
        return len(self.state_codes)

    def obs_id(self, key: str) -> int | None:
        return self._obs_index.get(key)

    def outgoing(self, s: int) -> dict[int, int]:
        return {o: t for (q, o), t in self.transitions.items() if q == s}

    def __eq__(self, other):
        if not isinstance(other, Fsm):
            return NotImplemented
        if (
            self.state_codes != other.state_codes
            or self.obs_codes != other.obs_codes
            or self.transitions != other.transitions
            or self.action_of != other.action_of
            or self.start_state != other.start_state
            or self.visit_counts != other.visit_counts
            or self.stats != other.stats
            or set(self.obs_memory) != set(other.obs_memory)
        ):
            return False
        for s, entries in self.obs_memory.items():
            theirs = other.obs_memory[s]
            if len(entries) != len(theirs):
                return False
            for (o1, m1, c1), (o2, m2, c2) in zip(entries, theirs):
                if o1 != o2 or c1 != c2 or not np.array_equal(m1, m2):
                    return False
        return True


def _assemble(
    groups: list[list[int]],
    state_codes,
    transitions,
    action_of,
    start,
    memory: dict[int, dict[int, tuple[np.ndarray, int]]],
    visits,
    obs_codes,
    stats,
) -> Fsm:
    """Build a machine whose states are unions of the given old-state groups.

    New ids are ordered by visit count (descending), then by code, so that
    equal machines get equal labels.
    """
    info = []
    for g in groups:
        codes = tuple(sorted(c for s in g for c in state_codes[s]))
        info.append((-sum(visits[s] for s in g), codes, g))
    info.sort(key=lambda x: (x[0], x[1]))
    new_of = {}
    for new, (_, _, g) in enumerate(info):
        for s in g:
            new_of[s] = new
    new_trans = {}
    for (s, o), t in transitions.items():
        if s in new_of:
            new_trans[(new_of[s], o)] = new_of[t]
    new_mem: dict[int, dict[int, tuple[np.ndarray, int]]] = defaultdict(dict)
    for s, entries in memory.items():
        if s not in new_of:
            continue
        bucket = new_mem[new_of[s]]
        for o, (mean, cnt) in entries.items():
            if o in bucket:
                m0, c0 = bucket[o]
                bucket[o] = ((m0 * c0 + mean * cnt) / (c0 + cnt), c0 + cnt)
            else:
                bucket[o] = (mean, cnt)
    return Fsm(
        state_codes=[codes for _, codes, _ in info],
        obs_codes=list(obs_codes),
        transitions=dict(sorted(new_trans.items())),
        action_of=[int(action_of[g[0]]) for _, _, g in info],
        start_state=new_of[start],
        obs_memory={
            s: [(o, np.asarray(m, dtype=np.float64), int(c)) for o, (m, c) in sorted(new_mem[s].items())]
            for s in sorted(new_mem)
        },
        visit_counts=[-v for v, _, _ in info],
        stats=stats,
    )


def _majority(counter: Counter) -> int:
    # most common, ties to the smallest key
    best = max(counter.values())
    return min(k for k, v in counter.items() if v == best)


def extract_fsm(
    dataset: TransitionDataset,
    policy: GruPolicy,
    qbn_obs: QuantizedBottleneck,
    qbn_hidden: QuantizedBottleneck,
) -> Fsm:
    """Tabulate (state code, obs code) -> next state code with majority votes.

    ``conflict_rate`` is the fraction of records whose observed next state
    disagrees with the majority for their (state, obs) pair;
    ``consistency_rate`` is the fraction of records whose action matches the
    majority action of the state they enter.
    """
    if len(dataset) == 0:
        raise FsmError("cannot extract a machine from an empty dataset")
    hb = [code_key(c) for c in encode(qbn_hidden, dataset.h_before)]
    ha = [code_key(c) for c in encode(qbn_hidden, dataset.h_after)]
    ob = [code_key(c) for c in encode(qbn_obs, dataset.obs)]
    start_key = code_key(encode(qbn_hidden, policy.initial_hidden()))
    if start_key not in hb:
        raise FsmError("the start code never occurs in the records")

    keys = sorted(set(hb) | set(ha))
    sid = {k: i for i, k in enumerate(keys)}
    obs_codes = sorted(set(ob))
    oid = {k: i for i, k in enumerate(obs_codes)}

    nexts: dict[tuple[int, int], Counter] = defaultdict(Counter)
    acts: dict[int, Counter] = defaultdict(Counter)
    mem_sum: dict[int, dict[int, list]] = defaultdict(dict)
    visits = [0] * len(keys)
    for i in range(len(dataset)):
        s, t, o = sid[hb[i]], sid[ha[i]], oid[ob[i]]
        nexts[(s, o)][t] += 1
        acts[t][int(dataset.action[i])] += 1
        visits[t] += 1
        slot = mem_sum[s].setdefault(o, [np.zeros(dataset.obs.shape[1]), 0])
        slot[0] = slot[0] + dataset.obs[i]
        slot[1] += 1

    transitions = {}
    conflicts = 0
    for key, cnt in nexts.items():
        winner = _majority(cnt)
        transitions[key] = winner
        conflicts += sum(cnt.values()) - cnt[winner]
    action_of = []
    agree = 0
    for s in range(len(keys)):
        if acts[s]:
            a = _majority(acts[s])
            agree += acts[s][a]
        else:
            # only ever a source state (the start): ask the policy
            h = qbn_hidden.inverse_transform(np.array([1 if c == "+" else -1 if c == "-" else 0 for c in keys[s]], dtype=float))
            a = int(np.argmax(policy.heads(h)[0]))
        action_of.append(a)
    n = len(dataset)
    stats = ExtractionStats(n, conflicts / n, agree / n, len(keys))
    memory = {s: {o: (v[0] / v[1], v[1]) for o, v in d.items()} for s, d in mem_sum.items()}
    return _assemble(
        [[s] for s in range(len(keys))],
        [(k,) for k in keys],
        transitions,
        action_of,
        sid[start_key],
        memory,
        visits,
        obs_codes,
        stats,
    )


def _reachable(fsm: Fsm) -> set[int]:
    succ = defaultdict(set)
    for (s, _), t in fsm.transitions.items():
        succ[s].add(t)
    seen = {fsm.start_state}
    stack = [fsm.start_state]
    while stack:
        s = stack.pop()
        for t in succ[s]:
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return seen


def minimize_fsm(fsm: Fsm) -> Fsm:
    """Drop unreachable states and merge equivalent ones by partition refinement.

    Two states are equivalent when they emit the same action and, for every
    observation code, either both lack a transition or both move to
    equivalent states.
    """
    live = sorted(_reachable(fsm))
    rows = {s: fsm.outgoing(s) for s in live}
    n_obs = len(fsm.obs_codes)
    ABSENT = -1
    block = {s: fsm.action_of[s] for s in live}
    while True:
        sigs = {
            s: (block[s],) + tuple(block[rows[s][o]] if o in rows[s] else ABSENT for o in range(n_obs))
            for s in live
        }
        ids = {sig: i for i, sig in enumerate(sorted(set(sigs.values())))}
        new_block = {s: ids[sigs[s]] for s in live}
        if len(set(new_block.values())) == len(set(block.values())):
            block = new_block
            break
        block = new_block
    groups: dict[int, list[int]] = defaultdict(list)
    for s in live:
        groups[block[s]].append(s)
    memory = {s: {o: (m, c) for o, m, c in entries} for s, entries in fsm.obs_memory.items()}
    return _assemble(
        list(groups.values()),
        fsm.state_codes,
        fsm.transitions,
        fsm.action_of,
        fsm.start_state,
        memory,
        fsm.visit_counts,
        fsm.obs_codes,
        fsm.stats,
    )


def run_codes(fsm: Fsm, codes: Sequence[int]) -> list[int]:
    """Actions emitted on a string of observation-code ids, no fallback.

    The list ends early, with ``-1`` appended, when a transition is absent.
    """
    s = fsm.start_state
    out = []
    for o in codes:
        t = fsm.transitions.get((s, int(o)))
        if t is None:
            out.append(-1)
            break
        s = t
        out.append(fsm.action_of[s])
    return out


def _nearest(fsm: Fsm, s: int, raw_obs: np.ndarray, metric: str) -> int:
    entries = fsm.obs_memory.get(s)
    candidates = [(s, e) for e in entries] if entries else [(q, e) for q, es in fsm.obs_memory.items() for e in es]
    if not candidates:
        raise FsmError(f"state {s} has no outgoing transitions and the machine has no memory")
    means = np.array([e[1] for _, e in candidates])
    if metric == "cosine":
        denom = np.linalg.norm(means, axis=1) * max(np.linalg.norm(raw_obs), 1e-12)
        score = -(means @ raw_obs) / np.maximum(denom, 1e-12)
    else:
        score = np.linalg.norm(means - raw_obs, axis=1)
    q, (o, _, _) = candidates[int(np.argmin(score))]
    return fsm.transitions[(q, o)]


def fsm_step(
    fsm: Fsm, state_id: int, raw_obs, qbn_obs: QuantizedBottleneck, metric: str = "euclidean"
) -> tuple[int, Action, bool]:
    """One controller step: ``(next state, emitted action, used fallback)``.

    Unknown (state, code) pairs follow the transition of the stored
    observation mean closest to ``raw_obs``; a state without memory searches
    the memory of every state.
    """
    if not 0 <= state_id < fsm.n_states:
        raise FsmError(f"state {state_id} does not exist")
    raw_obs = np.asarray(raw_obs, dtype=np.float64)
    o = fsm.obs_id(code_key(encode(qbn_obs, raw_obs)))
    t = fsm.transitions.get((state_id, o)) if o is not None else None
    fallback = t is None
    if fallback:
        t = _nearest(fsm, state_id, raw_obs, metric)
    return t, Action(fsm.action_of[t]), fallback


class FsmActor:
    """Closed-loop controller; keeps its own cursor, fallback counter and log."""

    def __init__(self, fsm: Fsm, qbn_obs: QuantizedBottleneck, metric: str = "euclidean"):
        self.fsm = fsm
        self.qbn_obs = qbn_obs
        self.metric = metric
        self.steps = 0
        self.fallbacks = 0
        self.reset()

    def reset(self):
        self.state = self.fsm.start_state
        self.log: list[tuple[int, int, np.ndarray, int]] = []

    def act(self, obs):
        prev = self.state
        self.state, action, fb = fsm_step(self.fsm, prev, obs, self.qbn_obs, self.metric)
        self.steps += 1
        self.fallbacks += int(fb)
        self.log.append((prev, self.state, np.asarray(obs, dtype=np.float64).copy(), int(action)))
        return action

    @property
    def fallback_rate(self) -> float:
        return self.fallbacks / self.steps if self.steps else 0.0


@dataclass
class FidelityReport:
    open_loop_agreement: float
    closed_loop_mean_K_fsm: float
    closed_loop_mean_K_drl: float
    fallback_rate: float
    open_loop_fallback_rate: float = 0.0
    makespans_fsm: list[int] = field(default_factory=list)
    makespans_drl: list[int] = field(default_factory=list)

    @property
    def k_gap(self) -> float:
        """Relative closed-loop makespan increase of the machine over the policy."""
        return self.closed_loop_mean_K_fsm / self.closed_loop_mean_K_drl - 1.0

    def to_dict(self) -> dict:
        return {
            "open_loop_agreement": self.open_loop_agreement,
            "closed_loop_mean_K_fsm": self.closed_loop_mean_K_fsm,
            "closed_loop_mean_K_drl": self.closed_loop_mean_K_drl,
            "fallback_rate": self.fallback_rate,
            "open_loop_fallback_rate": self.open_loop_fallback_rate,
            "k_gap": self.k_gap,
            "makespans_fsm": list(self.makespans_fsm),
            "makespans_drl": list(self.makespans_drl),
        }


def fidelity(
    fsm: Fsm,
    policy: GruPolicy,
    qbn_obs: QuantizedBottleneck,
    sim_cfg: SimConfig,
    traces: Sequence[WorkloadTrace],
    qbn_hidden: QuantizedBottleneck | None = None,
    drl_qbns: bool = False,
    metric: str = "euclidean",
) -> FidelityReport:
    """Open-loop action agreement and paired closed-loop makespans.

    With ``drl_qbns`` the reference policy runs with both autoencoders
    inserted (the fine-tuned configuration).
    """
    ref = DrlActor(policy, qbn_obs, qbn_hidden) if drl_qbns else DrlActor(policy)
    agree = total = 0
    open_actor = FsmActor(fsm, qbn_obs, metric)
    for i, tr in enumerate(traces):
        open_actor.reset()

        def follow(prev, obs, a, state, res):
            nonlocal agree, total
            agree += int(open_actor.act(obs) == a)
            total += 1

        run_actor(ref, sim_cfg, tr, eval_seed(sim_cfg.seed, i), on_step=follow)
    closed = FsmActor(fsm, qbn_obs, metric)
    res_fsm: EvalResult = evaluate_policy(closed, sim_cfg, traces)
    res_drl: EvalResult = evaluate_policy(ref, sim_cfg, traces)
    return FidelityReport(
        open_loop_agreement=agree / total if total else 1.0,
        closed_loop_mean_K_fsm=res_fsm.mean_K,
        closed_loop_mean_K_drl=res_drl.mean_K,
        fallback_rate=closed.fallback_rate,
        open_loop_fallback_rate=open_actor.fallback_rate,
        makespans_fsm=res_fsm.makespans,
        makespans_drl=res_drl.makespans,
    )


def _to_doc(fsm: Fsm) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "start_state": fsm.start_state,
        "obs_codes": fsm.obs_codes,
        "states": [
            {
                "id": s,
                "codes": list(fsm.state_codes[s]),
                "action": Action(fsm.action_of[s]).name,
                "visits": fsm.visit_counts[s],
            }
            for s in range(fsm.n_states)
        ],
        "transitions": [[s, o, t] for (s, o), t in sorted(fsm.transitions.items())],
        "memory": [
            [s, o, [float(x) for x in mean], c] for s in sorted(fsm.obs_memory) for o, mean, c in fsm.obs_memory[s]
        ],
        "stats": fsm.stats.to_dict() if fsm.stats else None,
    }


def _from_doc(doc: dict, source: str = "<fsm>") -> Fsm:
    if doc.get("format") != FORMAT_NAME:
        raise FsmError(f"{source}: not an FSM table file")
    if doc.get("version") != FORMAT_VERSION:
        raise FsmError(f"{source}: unsupported version {doc.get('version')}")
    states = sorted(doc["states"], key=lambda d: d["id"])
    if [d["id"] for d in states] != list(range(len(states))):
        raise FsmError(f"{source}: state ids must be 0..n-1")
    memory: dict[int, list] = defaultdict(list)
    for s, o, mean, c in doc["memory"]:
        memory[int(s)].append((int(o), np.array(mean, dtype=np.float64), int(c)))
    return Fsm(
        state_codes=[tuple(d["codes"]) for d in states],
        obs_codes=list(doc["obs_codes"]),
        transitions={(int(s), int(o)): int(t) for s, o, t in doc["transitions"]},
        action_of=[int(Action[d["action"]]) for d in states],
        start_state=int(doc["start_state"]),
        obs_memory=dict(memory),
        visit_counts=[int(d["visits"]) for d in states],
        stats=ExtractionStats(**doc["stats"]) if doc.get("stats") else None,
    )


def to_dot(fsm: Fsm) -> str:
    """Graphviz text; node pen width grows with visit count."""
    peak = max(max(fsm.visit_counts), 1)
    lines = ["digraph fsm {", "  rankdir=LR;", '  node [shape=circle, fontname="Helvetica"];']
    for s in range(fsm.n_states):
        width = 1.0 + 4.0 * fsm.visit_counts[s] / peak
        label = f"S{s}\\n{Action(fsm.action_of[s]).label}"
        extra = ", peripheries=2" if s == fsm.start_state else ""
        lines.append(f'  S{s} [label="{label}", penwidth={width:.2f}, tooltip="visits={fsm.visit_counts[s]}"{extra}];')
    edges: dict[tuple[int, int], int] = Counter()
    for (s, _), t in fsm.transitions.items():
        edges[(s, t)] += 1
    for (s, t), n in sorted(edges.items()):
        lines.append(f'  S{s} -> S{t} [label="{n}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_fsm(fsm: Fsm, path, format: str = "table") -> None:
    """Write the machine as a JSON table (``table``) or a Graphviz file (``graph``)."""
    path = Path(path)
    if format == "table":
        path.write_text(json.dumps(_to_doc(fsm), indent=1) + "\n")
    elif format == "graph":
        path.write_text(to_dot(fsm))
    else:
        raise ValueError(f"unknown format {format!r}; expected 'table' or 'graph'")


def import_fsm(path) -> Fsm:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FsmError(f"{path}: {exc}") from None
    return _from_doc(doc, str(path))

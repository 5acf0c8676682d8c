"""Baseline controllers, paired policy comparison and workload calibration."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .rl import Actor, evaluate_policy
from .simulator import Action, Level, SimConfig
from .workload import ClassProfile, WorkloadTrace, gen_standard_trace

__all__ = [
    "default_action",
    "handcrafted_action",
    "FunctionActor",
    "DefaultActor",
    "HandcraftedActor",
    "ComparisonTable",
    "compare",
    "CalibrationReport",
    "calibrate",
]


def default_action(obs) -> Action:
    """Never migrate."""
    return Action.Noop


def handcrafted_action(obs, threshold: float = 0.2) -> Action:
    """Move one core from the least to the most utilized level when the spread exceeds ``threshold``.

    Ties pick the first level in N, K, R order.
    """
    u = np.asarray(obs, dtype=np.float64)[3:6]
    if u.max() - u.min() <= threshold:
        return Action.Noop
    lo = int(np.argmin(u))  # argmin/argmax return the first index on ties
    hi = int(np.argmax(u))
    return Action.from_move(Level(lo), Level(hi))


class FunctionActor:
    """Stateless controller wrapping ``obs -> Action``."""

    def __init__(self, fn: Callable[[np.ndarray], Action]):
        self.fn = fn

    def reset(self):
        pass

    def act(self, obs):
        return Action(self.fn(obs))


def DefaultActor() -> FunctionActor:
    return FunctionActor(default_action)


def HandcraftedActor(threshold: float = 0.2) -> FunctionActor:
    return FunctionActor(lambda obs: handcrafted_action(obs, threshold))


@dataclass
class ComparisonTable:
    """Makespan per policy and trace, with aggregates derived from those values."""

    makespans: dict[str, list[int]]
    truncated: dict[str, int] = field(default_factory=dict)
    reference: str = "default"

    def __post_init__(self):
        lengths = {len(v) for v in self.makespans.values()}
        if len(lengths) != 1:
            raise ValueError("every policy needs one makespan per trace")

    @property
    def policies(self) -> list[str]:
        return list(self.makespans)

    def mean_K(self, name: str) -> float:
        return float(np.mean(self.makespans[name]))

    def reduction(self, name: str) -> float:
        """Percent reduction of mean K relative to the reference policy."""
        ref = self.mean_K(self.reference)
        return 100.0 * (ref - self.mean_K(name)) / ref

    def gap(self, a: str, b: str) -> float:
        """Percent increase of mean K of ``a`` over ``b``."""
        return 100.0 * (self.mean_K(a) - self.mean_K(b)) / self.mean_K(b)

    def to_dict(self) -> dict:
        doc = {
            "reference": self.reference,
            "makespans": self.makespans,
            "truncated": self.truncated,
            "mean_K": {k: self.mean_K(k) for k in self.makespans},
        }
        if self.reference in self.makespans:
            doc["reduction_pct"] = {k: self.reduction(k) for k in self.makespans}
        if "fsm" in self.makespans and "drl" in self.makespans:
            doc["fsm_vs_drl_gap_pct"] = self.gap("fsm", "drl")
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ComparisonTable":
        return cls({k: [int(x) for x in v] for k, v in doc["makespans"].items()}, dict(doc.get("truncated", {})), doc["reference"])

    def text(self) -> str:
        names = self.policies
        width = max(8, *(len(n) for n in names))
        head = "trace  " + " ".join(f"{n:>{width}s}" for n in names)
        lines = [head]
        for i in range(len(self.makespans[names[0]])):
            lines.append(f"{i:5d}  " + " ".join(f"{self.makespans[n][i]:>{width}d}" for n in names))
        lines.append("mean   " + " ".join(f"{self.mean_K(n):>{width}.2f}" for n in names))
        if self.reference in self.makespans:
            lines.append("red.%  " + " ".join(f"{self.reduction(n):>{width}.2f}" for n in names))
        if "fsm" in self.makespans and "drl" in self.makespans:
            lines.append(f"fsm vs drl: {self.gap('fsm', 'drl'):+.2f}%")
        return "\n".join(lines) + "\n"

    def save(self, path) -> tuple[Path, Path]:
        base = Path(path).with_suffix("")
        data, text = base.with_suffix(".json"), base.with_suffix(".txt")
        data.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        text.write_text(self.text())
        return data, text

    @classmethod
    def load(cls, path) -> "ComparisonTable":
        return cls.from_dict(json.loads(Path(path).with_suffix(".json").read_text()))


def compare(
    policies: Mapping[str, Actor], sim_cfg: SimConfig, traces: Sequence[WorkloadTrace], reference: str = "default"
) -> ComparisonTable:
    """Evaluate every policy on the same traces with the same simulator seeds."""
    if len(policies) < 2:
        raise ValueError("compare needs at least two policies")
    if not traces:
        raise ValueError("compare needs at least one trace")
    ks, trunc = {}, {}
    for name, actor in policies.items():
        res = evaluate_policy(actor, sim_cfg, traces)
        ks[name] = list(res.makespans)
        trunc[name] = res.truncated
    return ComparisonTable(ks, trunc, reference)


@dataclass
class CalibrationReport:
    T: int
    band: tuple[float, float]
    mean_K: dict[str, float]

    @property
    def out_of_band(self) -> dict[str, str]:
        lo, hi = self.band
        out = {}
        for name, k in self.mean_K.items():
            if k < lo * self.T:
                out[name] = "below"
            elif k > hi * self.T:
                out[name] = "above"
        return out

    @property
    def ok(self) -> bool:
        return not self.out_of_band

    def to_dict(self) -> dict:
        return {"T": self.T, "band": list(self.band), "mean_K": self.mean_K, "out_of_band": self.out_of_band}

    def text(self) -> str:
        lo, hi = self.band
        lines = [f"no-migration makespan per class, T={self.T}, band [{lo * self.T:g}, {hi * self.T:g}]"]
        for name, k in self.mean_K.items():
            flag = self.out_of_band.get(name, "ok")
            lines.append(f"  {name:20s} {k:8.2f}  {k / self.T:5.2f}T  {flag}")
        return "\n".join(lines) + "\n"


def calibrate(
    profiles: Sequence[ClassProfile],
    sim_cfg: SimConfig,
    T: int = 64,
    traces_per_class: int = 4,
    seed: int = 0,
    band: tuple[float, float] = (1.2, 3.0),
) -> CalibrationReport:
    """Mean no-migration makespan of each standard class, flagged against ``band`` * T."""
    if not profiles:
        raise ValueError("no profiles to calibrate")
    means = {}
    for k, p in enumerate(profiles):
        traces = [gen_standard_trace(p, T, seed * 100_003 + 1000 * k + j) for j in range(traces_per_class)]
        means[p.name] = evaluate_policy(DefaultActor(), sim_cfg, traces).mean_K
    return CalibrationReport(T, band, means)

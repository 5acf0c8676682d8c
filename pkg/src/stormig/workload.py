"""IO workload catalog, synthetic trace generators and the trace file format."""
from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "IoKind",
    "IoType",
    "IntervalWorkload",
    "WorkloadTrace",
    "Pattern",
    "ClassProfile",
    "TraceFormatError",
    "make_catalog",
    "pattern_value",
    "gen_standard_trace",
    "gen_real_trace",
    "snippet_plan",
    "write_trace",
    "read_trace",
    "trace_io",
]

IO_SIZES_KB = (4, 8, 16, 32, 64, 128, 256)
N_TYPES = 2 * len(IO_SIZES_KB)
RATIO_TOL = 1e-9


class IoKind(str, enum.Enum):
    READ = "Read"
    WRITE = "Write"


@dataclass(frozen=True)
class IoType:
    size_kb: int
    kind: IoKind

    def __post_init__(self):
        if self.size_kb not in IO_SIZES_KB:
            raise ValueError(f"unsupported IO size {self.size_kb} KB")

    @property
    def column(self) -> str:
        return f"{'r' if self.kind is IoKind.READ else 'w'}{self.size_kb}"


def make_catalog() -> tuple[IoType, ...]:
    """Return the fixed 14-entry catalog: 7 read sizes ascending, then 7 write sizes."""
    return tuple(IoType(s, IoKind.READ) for s in IO_SIZES_KB) + tuple(
        IoType(s, IoKind.WRITE) for s in IO_SIZES_KB
    )


CATALOG = make_catalog()
SIZES = np.array([t.size_kb for t in CATALOG], dtype=float)
IS_READ = np.array([t.kind is IoKind.READ for t in CATALOG])
COLUMNS = ("interval", "count") + tuple(t.column for t in CATALOG)


def _check_interval(ratios: np.ndarray, count: int, where: str = "") -> None:
    if ratios.shape != (N_TYPES,):
        raise ValueError(f"{where}expected {N_TYPES} ratios, got shape {ratios.shape}")
    if not np.all(np.isfinite(ratios)):
        raise ValueError(f"{where}ratios must be finite")
    if np.any(ratios < 0):
        raise ValueError(f"{where}ratios must be non-negative")
    if count < 0:
        raise ValueError(f"{where}count must be non-negative")
    total = float(ratios.sum())
    if count > 0 and abs(total - 1.0) > RATIO_TOL:
        raise ValueError(f"{where}ratios sum to {total!r}, expected 1 when count > 0")
    if count == 0 and total != 0.0 and abs(total - 1.0) > RATIO_TOL:
        raise ValueError(f"{where}ratios must sum to 1 or be all zero")


@dataclass(frozen=True)
class IntervalWorkload:
    ratios: np.ndarray
    count: int

    def __post_init__(self):
        object.__setattr__(self, "ratios", np.asarray(self.ratios, dtype=float))
        object.__setattr__(self, "count", int(self.count))
        _check_interval(self.ratios, self.count)

    def __eq__(self, other):
        if not isinstance(other, IntervalWorkload):
            return NotImplemented
        return self.count == other.count and np.array_equal(self.ratios, other.ratios)


@dataclass(eq=False)
class WorkloadTrace:
    """Per-interval IO mixture ratios (T x 14) and request counts (T,).

    ``label`` is the class name for standard traces and ``"real"`` for
    snippet-sampled traces.
    """

    ratios: np.ndarray
    counts: np.ndarray
    label: str = "custom"
    seed: int = 0
    catalog: tuple[IoType, ...] = field(default=CATALOG, repr=False)

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=float).reshape(-1, N_TYPES)
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if len(self.counts) < 1:
            raise ValueError("trace must have at least one interval")
        if len(self.ratios) != len(self.counts):
            raise ValueError("ratios and counts disagree on trace length")
        if tuple(self.catalog) != CATALOG:
            raise ValueError("only the canonical 14-type catalog is supported")
        for t in range(len(self.counts)):
            _check_interval(self.ratios[t], int(self.counts[t]), where=f"interval {t}: ")

    @property
    def T(self) -> int:
        return len(self.counts)

    def __len__(self) -> int:
        return self.T

    @property
    def intervals(self) -> list[IntervalWorkload]:
        return [IntervalWorkload(self.ratios[t], int(self.counts[t])) for t in range(self.T)]

    @classmethod
    def from_intervals(cls, intervals: Sequence[IntervalWorkload], label="custom", seed=0):
        return cls(
            np.array([iw.ratios for iw in intervals]),
            np.array([iw.count for iw in intervals]),
            label=label,
            seed=seed,
        )

    def __eq__(self, other):
        if not isinstance(other, WorkloadTrace):
            return NotImplemented
        return (
            self.label == other.label
            and self.seed == other.seed
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.ratios, other.ratios)
        )

    def volume_kb(self) -> np.ndarray:
        """Requested KB per interval."""
        return np.round(self.counts[:, None] * self.ratios) @ SIZES


class Pattern(str, enum.Enum):
    CONSTANT = "Constant"
    SQUARE = "Square"
    SAWTOOTH = "Sawtooth"
    SINE = "Sine"
    BURST = "Burst"


@dataclass(frozen=True)
class ClassProfile:
    name: str
    mixture: tuple[float, ...]
    pattern: Pattern = Pattern.CONSTANT
    base_count: int = 100
    amplitude: float = 0.0
    period: int = 8

    def __post_init__(self):
        mix = np.asarray(self.mixture, dtype=float)
        if mix.shape != (N_TYPES,):
            raise ValueError(f"profile {self.name!r}: mixture needs {N_TYPES} weights")
        if np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-6:
            raise ValueError(f"profile {self.name!r}: mixture must be non-negative and sum to 1")
        object.__setattr__(self, "mixture", tuple(float(v) for v in mix / mix.sum()))
        object.__setattr__(self, "pattern", Pattern(self.pattern))
        if self.base_count < 0:
            raise ValueError(f"profile {self.name!r}: base_count must be non-negative")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError(f"profile {self.name!r}: amplitude must lie in [0, 1]")
        if self.pattern is not Pattern.CONSTANT and self.period < 2:
            raise ValueError(f"profile {self.name!r}: periodic patterns need period >= 2")
        if self.period < 1:
            raise ValueError(f"profile {self.name!r}: period must be positive")


def pattern_value(pattern: Pattern, t: int, amplitude: float, period: int) -> float:
    """Intensity multiplier in [1 - amplitude, 1 + amplitude] at interval ``t``."""
    pattern = Pattern(pattern)
    a = amplitude
    if pattern is Pattern.CONSTANT or a == 0.0:
        return 1.0
    phase = t % period
    if pattern is Pattern.SQUARE:
        return 1.0 + a if phase < period / 2 else 1.0 - a
    if pattern is Pattern.SAWTOOTH:
        return 1.0 - a + 2.0 * a * phase / (period - 1)
    if pattern is Pattern.SINE:
        return 1.0 + a * math.sin(2.0 * math.pi * phase / period)
    # burst: one high interval at the start of each period
    return 1.0 + a if phase == 0 else 1.0 - a


def _jitter(mixture: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros_like(mixture)
    live = mixture > 0
    out[live] = rng.dirichlet(100.0 * mixture[live])
    return out / out.sum()


def gen_standard_trace(profile: ClassProfile, T: int, seed: int) -> WorkloadTrace:
    """Generate a standard trace of ``T`` intervals for one workload class."""
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    mixture = np.asarray(profile.mixture, dtype=float)
    ratios = np.empty((T, N_TYPES))
    counts = np.empty(T, dtype=np.int64)
    for t in range(T):
        ratios[t] = _jitter(mixture, rng)
        value = pattern_value(profile.pattern, t, profile.amplitude, profile.period)
        counts[t] = int(round(profile.base_count * value))
    # an empty interval carries no mixture
    ratios[counts == 0] = 0.0
    return WorkloadTrace(ratios, counts, label=profile.name, seed=seed)


def snippet_plan(n_profiles: int, T: int, snippet_len: int, seed: int) -> list[tuple[int, int, int]]:
    """(class index, standard-trace seed, offset) for each snippet of a real trace.

    The source standard trace for every snippet has length ``T``.
    """
    if snippet_len < 1:
        raise ValueError("snippet_len must be positive")
    if snippet_len > T:
        raise ValueError("snippet_len must not exceed T")
    if n_profiles < 1:
        raise ValueError("need at least one profile")
    rng = np.random.default_rng(seed)
    plan = []
    for _ in range(math.ceil(T / snippet_len)):
        k = int(rng.integers(n_profiles))
        sub_seed = int(rng.integers(2**31 - 1))
        offset = int(rng.integers(T - snippet_len + 1))
        plan.append((k, sub_seed, offset))
    return plan


def gen_real_trace(
    profiles: Sequence[ClassProfile], T: int, snippet_len: int = 16, seed: int = 0
) -> WorkloadTrace:
    """Concatenate seeded snippets of freshly generated standard traces."""
    if T < 1:
        raise ValueError("T must be at least 1")
    plan = snippet_plan(len(profiles), T, snippet_len, seed)
    ratios, counts = [], []
    for k, sub_seed, offset in plan:
        src = gen_standard_trace(profiles[k], T, sub_seed)
        ratios.append(src.ratios[offset : offset + snippet_len])
        counts.append(src.counts[offset : offset + snippet_len])
    return WorkloadTrace(
        np.concatenate(ratios)[:T], np.concatenate(counts)[:T], label="real", seed=seed
    )


class TraceFormatError(ValueError):
    """Malformed trace file; the message names the line and field."""


def _format_trace(trace: WorkloadTrace) -> str:
    buf = io.StringIO()
    buf.write(f"# label={trace.label}\n# seed={trace.seed}\n")
    buf.write(",".join(COLUMNS) + "\n")
    for t in range(trace.T):
        cells = [str(t), str(int(trace.counts[t]))] + [repr(float(v)) for v in trace.ratios[t]]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def write_trace(trace: WorkloadTrace, path) -> None:
    Path(path).write_text(_format_trace(trace))


def parse_trace(lines: Iterable[str], source: str = "<trace>") -> WorkloadTrace:
    meta = {"label": "custom", "seed": "0"}
    header = None
    ratios, counts = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
            continue
        cells = line.split(",")
        if header is None:
            if tuple(cells) != COLUMNS:
                raise TraceFormatError(
                    f"{source}:{lineno}: header must name {len(COLUMNS)} columns {COLUMNS}"
                )
            header = cells
            continue
        if len(cells) != len(COLUMNS):
            raise TraceFormatError(
                f"{source}:{lineno}: expected {len(COLUMNS)} fields, found {len(cells)}"
            )
        try:
            idx = int(cells[0])
        except ValueError:
            raise TraceFormatError(f"{source}:{lineno}: field 'interval' is not an integer") from None
        if idx != len(counts):
            raise TraceFormatError(f"{source}:{lineno}: field 'interval' out of sequence ({idx})")
        try:
            counts.append(int(cells[1]))
        except ValueError:
            raise TraceFormatError(f"{source}:{lineno}: field 'count' is not an integer") from None
        row = []
        for name, cell in zip(COLUMNS[2:], cells[2:]):
            try:
                row.append(float(cell))
            except ValueError:
                raise TraceFormatError(f"{source}:{lineno}: field {name!r} is not a number") from None
        ratios.append(row)
        try:
            _check_interval(np.array(row), counts[-1])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: invariant violated: {exc}") from None
    if header is None:
        raise TraceFormatError(f"{source}: missing header row")
    if not counts:
        raise TraceFormatError(f"{source}: trace has no intervals")
    try:
        seed = int(meta["seed"])
    except ValueError:
        raise TraceFormatError(f"{source}: metadata 'seed' is not an integer") from None
    return WorkloadTrace(np.array(ratios), np.array(counts), label=meta["label"], seed=seed)


def read_trace(path) -> WorkloadTrace:
    path = Path(path)
    with path.open() as fh:
        return parse_trace(fh, source=str(path))


def trace_io(path, trace: WorkloadTrace | None = None):
    """Write ``trace`` to ``path`` when given, otherwise read and return it."""
    if trace is not None:
        write_trace(trace, path)
        return None
    return read_trace(path)

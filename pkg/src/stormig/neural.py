"""Small float64 neural toolkit with hand-written backward passes.

Layers keep their own :class:`Parameter` objects. ``forward`` returns the
output together with a cache; ``backward`` consumes the cache, accumulates
parameter gradients and returns the gradient with respect to the inputs.
Inputs may be single vectors ``(d,)`` or batches ``(B, d)``.
"""
from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Parameter",
    "Module",
    "Linear",
    "GRUCell",
    "GruPolicy",
    "AdamState",
    "sigmoid",
    "softmax",
    "log_softmax",
    "quantize3",
    "quantize3_backward",
    "gru_step",
    "heads",
    "adam_step",
    "clip_global_norm",
    "grad_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
    "write_npz",
    "CheckpointError",
]

HIDDEN = 128
OBS_IN = 21
N_LOGITS = 7


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(shape={self.value.shape})"


class Module:
    """Named parameter container; submodules are discovered through attributes.

    Attribute names listed in ``buffers`` are saved and restored with the
    parameters but never trained.
    """

    buffers: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, attr in vars(self).items():
            if isinstance(attr, Parameter):
                out[prefix + name] = attr
            elif isinstance(attr, Module):
                out.update(attr.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def named_buffers(self, prefix: str = "") -> dict[str, tuple["Module", str]]:
        out = {prefix + name: (self, name) for name in self.buffers}
        for name, attr in vars(self).items():
            if isinstance(attr, Module):
                out.update(attr.named_buffers(prefix + name + "."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.value.copy() for k, p in self.named_parameters().items()}
        for k, (owner, name) in self.named_buffers().items():
            state[k] = np.array(getattr(owner, name), dtype=np.float64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        bufs = self.named_buffers()
        if set(params) | set(bufs) != set(state):
            missing = sorted((set(params) | set(bufs)) ^ set(state))
            raise KeyError(f"state names differ: {missing}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.value.shape}")
            p.value[...] = arr
        for k, (owner, name) in bufs.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != np.shape(getattr(owner, name)):
                raise ValueError(f"{k}: shape {arr.shape} != {np.shape(getattr(owner, name))}")
            setattr(owner, name, arr.copy())
        return self


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _as_rows(a: np.ndarray, width: int) -> np.ndarray:
    return a.reshape(-1, width)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = Parameter(_uniform(rng, n_in, (n_out, n_in)))
        self.b = Parameter(np.zeros(n_out))

    def forward(self, x):
        return x @ self.W.value.T + self.b.value, x

    def backward(self, cache, dout):
        x = cache
        n_out, n_in = self.W.value.shape
        self.W.grad += _as_rows(dout, n_out).T @ _as_rows(x, n_in)
        self.b.grad += _as_rows(dout, n_out).sum(axis=0)
        return dout @ self.W.value


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def quantize3(v):
    """Round to the nearest of {-1, 0, 1}; values at exactly +-0.5 go to 0."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("quantize3 input must be finite")
    return np.where(v > 0.5, 1.0, np.where(v < -0.5, -1.0, 0.0))


def quantize3_backward(v, dout):
    """Straight-through gradient: identity inside [-1, 1], zero outside."""
    return dout * (np.abs(v) <= 1.0)


class GRUCell(Module):
    """h' = (1 - z) * n + z * h with sigmoid gates and tanh candidate."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        shape_x, shape_h = (n_hidden, n_in), (n_hidden, n_hidden)
        self.W_z = Parameter(_uniform(rng, n_in, shape_x))
        self.U_z = Parameter(_uniform(rng, n_hidden, shape_h))
        self.b_z = Parameter(np.zeros(n_hidden))
        self.W_r = Parameter(_uniform(rng, n_in, shape_x))
        self.U_r = Parameter(_uniform(rng, n_hidden, shape_h))
        self.b_r = Parameter(np.zeros(n_hidden))
        self.W_n = Parameter(_uniform(rng, n_in, shape_x))
        self.U_n = Parameter(_uniform(rng, n_hidden, shape_h))
        self.b_n = Parameter(np.zeros(n_hidden))

    @property
    def n_hidden(self) -> int:
        return self.b_z.value.shape[0]

    @property
    def n_in(self) -> int:
        return self.W_z.value.shape[1]

    def forward(self, h, x):
        z = sigmoid(x @ self.W_z.value.T + h @ self.U_z.value.T + self.b_z.value)
        r = sigmoid(x @ self.W_r.value.T + h @ self.U_r.value.T + self.b_r.value)
        rh = r * h
        n = np.tanh(x @ self.W_n.value.T + rh @ self.U_n.value.T + self.b_n.value)
        h_new = (1.0 - z) * n + z * h
        return h_new, (h, x, z, r, rh, n)

    def backward(self, cache, dh_new):
        h, x, z, r, rh, n = cache
        H, I = self.n_hidden, self.n_in
        da_n = dh_new * (1.0 - z) * (1.0 - n * n)
        da_z = dh_new * (h - n) * z * (1.0 - z)
        drh = da_n @ self.U_n.value
        da_r = drh * h * r * (1.0 - r)
        dh = dh_new * z + drh * r + da_z @ self.U_z.value + da_r @ self.U_r.value
        dx = da_z @ self.W_z.value + da_r @ self.W_r.value + da_n @ self.W_n.value
        xs, hs, rhs = _as_rows(x, I), _as_rows(h, H), _as_rows(rh, H)
        for da, W, U, b, hin in (
            (da_z, self.W_z, self.U_z, self.b_z, hs),
            (da_r, self.W_r, self.U_r, self.b_r, hs),
            (da_n, self.W_n, self.U_n, self.b_n, rhs),
        ):
            da2 = _as_rows(da, H)
            W.grad += da2.T @ xs
            U.grad += da2.T @ hin
            b.grad += da2.sum(axis=0)
        return dh, dx


class GruPolicy(Module):
    """GRU core with a 7-way policy head and a scalar value head."""

    buffers = ("obs_shift", "obs_scale")

    def __init__(
        self, obs_dim: int = OBS_IN, hidden: int = HIDDEN, n_actions: int = N_LOGITS, seed: int = 0, noop_bias: float = 0.0
    ):
        rng = np.random.default_rng(seed)
        self.gru = GRUCell(obs_dim, hidden, rng)
        self.pi = Linear(hidden, n_actions, rng)
        self.v = Linear(hidden, 1, rng)
        # logit offset for action 0 (no migration) at initialization
        self.pi.b.value[0] = noop_bias
        # fixed input standardization, not trained
        self.obs_shift = np.zeros(obs_dim)
        self.obs_scale = np.ones(obs_dim)

    def normalize(self, obs):
        return (obs - self.obs_shift) / self.obs_scale

    def set_normalization(self, shift, scale):
        self.obs_shift = np.array(shift, dtype=np.float64)
        self.obs_scale = np.array(scale, dtype=np.float64)
        return self

    @property
    def hidden_size(self) -> int:
        return self.gru.n_hidden

    @property
    def obs_dim(self) -> int:
        return self.gru.n_in

    def initial_hidden(self) -> np.ndarray:
        return np.zeros(self.hidden_size)

    def heads(self, h):
        logits, _ = self.pi.forward(h)
        value, _ = self.v.forward(h)
        return logits, value[..., 0]

    def config(self) -> dict:
        return {"obs_dim": self.obs_dim, "hidden": self.hidden_size, "n_actions": self.pi.b.value.shape[0]}


def gru_step(policy: GruPolicy, h, x) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(x))):
        raise ValueError("gru_step inputs must be finite")
    return policy.gru.forward(h, x)[0]


def heads(policy: GruPolicy, h):
    """(logits, value) for hidden state ``h``."""
    return policy.heads(np.asarray(h, dtype=np.float64))


@dataclass
class AdamState:
    params: list[Parameter]
    learning_rate: float = 3e-4
    clip_norm: float | None = 2.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [np.zeros_like(p.value) for p in self.params]
            self.v = [np.zeros_like(p.value) for p in self.params]


def clip_global_norm(grads: list[np.ndarray], clip_norm: float | None) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
        return [g * scale for g in grads], norm
    return grads, norm


def adam_step(state: AdamState, params: Iterable[Parameter] | None = None, grads=None) -> float:
    """Clip by global norm, then apply one bias-corrected Adam update in place.

    Returns the pre-clipping gradient norm.
    """
    params = state.params if params is None else list(params)
    if grads is None:
        grads = [p.grad for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.value.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    grads, norm = clip_global_norm(grads, state.clip_norm)
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.value -= state.learning_rate * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return norm


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def grad_check(
    loss_and_grad: Callable[[], float],
    params: dict[str, Parameter],
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, per parameter block.

    ``loss_and_grad`` must zero gradients, evaluate the loss, backpropagate into
    ``Parameter.grad`` and return the scalar loss. Relative error per entry is
    ``|a - n| / max(|a|, |n|, floor)``. ``max_entries`` samples that many entries
    per block instead of checking all of them.
    """
    rng = np.random.default_rng(seed)
    loss_and_grad()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    report = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_and_grad()
            flat[i] = orig - eps
            down = loss_and_grad()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = a_flat[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        report[name] = worst
    loss_and_grad()
    return GradCheckReport(report, tolerance)


class CheckpointError(ValueError):
    pass


CHECKPOINT_VERSION = 1


def fingerprint(obj) -> str:
    """Short stable hash of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    """``np.savez`` layout with fixed member timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(Path(path), "w", compression=zipfile.ZIP_STORED) as zf:
        for name in arrays:
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arrays[name]), allow_pickle=False)


def save_checkpoint(path, modules: dict[str, Module], meta: dict | None = None) -> None:
    """Write named modules to an ``.npz`` archive.

    Layout: one array per parameter under ``<module>/<param>`` plus a
    ``__meta__`` entry holding a JSON document with the format version,
    user metadata and a fingerprint of that metadata.
    """
    arrays = {}
    for mod_name, mod in modules.items():
        for k, v in mod.state_dict().items():
            arrays[f"{mod_name}/{k}"] = v
    meta = dict(meta or {})
    doc = {"version": CHECKPOINT_VERSION, "meta": meta, "fingerprint": fingerprint(meta)}
    arrays["__meta__"] = np.frombuffer(json.dumps(doc, sort_keys=True).encode(), dtype=np.uint8)
    write_npz(path, arrays)


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    """Return ``({module: {param: array}}, meta)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data:
            raise CheckpointError(f"{path}: missing __meta__ entry")
        doc = json.loads(bytes(data["__meta__"]).decode())
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
        modules: dict[str, dict[str, np.ndarray]] = {}
        for key in data.files:
            if key == "__meta__":
                continue
            mod, _, name = key.partition("/")
            modules.setdefault(mod, {})[name] = data[key].copy()
    return modules, doc["meta"]

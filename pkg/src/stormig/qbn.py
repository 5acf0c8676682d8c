"""Quantized bottleneck autoencoders over observations and GRU hidden states."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .neural import (
    AdamState,
    GruPolicy,
    Linear,
    Module,
    adam_step,
    load_checkpoint,
    quantize3,
    quantize3_backward,
    save_checkpoint,
    write_npz,
)
from .rl import DrlActor, TrainConfig, a2c_update, eval_seed, evaluate_policy, rollout
from .simulator import SimConfig
from .workload import WorkloadTrace

log = logging.getLogger(__name__)

__all__ = [
    "QbnNet",
    "QuantizedBottleneck",
    "TransitionRecord",
    "TransitionDataset",
    "collect_dataset",
    "train_qbn",
    "encode",
    "code_key",
    "finetune_with_qbns",
    "save_qbn",
    "load_qbn",
]


class QbnNet(Module):
    """input -> tanh hidden -> tanh latent -> quantize3 -> tanh hidden -> output."""

    def __init__(self, input_dim: int, latent_dim: int, hidden_units: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.enc1 = Linear(input_dim, hidden_units, rng)
        self.enc2 = Linear(hidden_units, latent_dim, rng)
        self.dec1 = Linear(latent_dim, hidden_units, rng)
        self.dec2 = Linear(hidden_units, input_dim, rng)

    def encode_forward(self, x, quantize=True):
        a1, c1 = self.enc1.forward(x)
        h1 = np.tanh(a1)
        a2, c2 = self.enc2.forward(h1)
        t = np.tanh(a2)
        code = quantize3(t) if quantize else t
        return code, (c1, h1, c2, t)

    def encode_backward(self, cache, dcode, quantize=True):
        c1, h1, c2, t = cache
        dt = quantize3_backward(t, dcode) if quantize else dcode
        da2 = dt * (1.0 - t * t)
        dh1 = self.enc2.backward(c2, da2)
        return self.enc1.backward(c1, dh1 * (1.0 - h1 * h1))

    def decode_forward(self, code):
        a3, c3 = self.dec1.forward(code)
        h3 = np.tanh(a3)
        out, c4 = self.dec2.forward(h3)
        return out, (c3, h3, c4)

    def decode_backward(self, cache, dout):
        c3, h3, c4 = cache
        dh3 = self.dec2.backward(c4, dout)
        return self.dec1.backward(c3, dh3 * (1.0 - h3 * h3))

    def forward(self, x, quantize=True):
        code, ce = self.encode_forward(x, quantize)
        out, cd = self.decode_forward(code)
        return out, (ce, cd, quantize)

    def backward(self, cache, dout):
        ce, cd, quantize = cache
        return self.encode_backward(ce, self.decode_backward(cd, dout), quantize)


class QuantizedBottleneck(TransformerMixin, BaseEstimator):
    """Autoencoder with a ternary latent code.

    ``transform`` maps inputs to codes in {-1, 0, 1}^latent_dim and
    ``inverse_transform`` maps codes back to input space. Training minimizes
    mean squared reconstruction error with Adam, gradients passing the
    quantizer straight through. With ``standardize`` the network sees
    per-feature standardized inputs (scale floored at ``scale_floor``), so
    low-variance features are not drowned out in the error.
    """

    def __init__(
        self,
        latent_dim=64,
        hidden_units=64,
        epochs=200,
        batch_size=256,
        learning_rate=1e-3,
        tol=1e-4,
        patience=10,
        standardize=True,
        scale_floor=0.05,
        seed=0,
    ):
        self.latent_dim = latent_dim
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.tol = tol
        self.patience = patience
        self.standardize = standardize
        self.scale_floor = scale_floor
        self.seed = seed

    def _init_net(self, input_dim: int, shift=None, scale=None):
        self.net_ = QbnNet(input_dim, self.latent_dim, self.hidden_units, seed=self.seed)
        self.n_features_in_ = input_dim
        self.shift_ = np.zeros(input_dim) if shift is None else np.asarray(shift, dtype=np.float64)
        self.scale_ = np.ones(input_dim) if scale is None else np.asarray(scale, dtype=np.float64)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.standardize:
            self._init_net(X.shape[1], X.mean(axis=0), np.maximum(X.std(axis=0), self.scale_floor))
        else:
            self._init_net(X.shape[1])
        return self.partial_fit(X, epochs=self.epochs)

    def partial_fit(self, X, y=None, epochs=1):
        X = check_array(X, dtype=np.float64)
        if not hasattr(self, "net_"):
            self._init_net(X.shape[1])
        Z = (X - self.shift_) / self.scale_
        rng = np.random.default_rng(self.seed + 1)
        opt = AdamState(self.net_.parameters(), learning_rate=self.learning_rate, clip_norm=None)
        self.loss_curve_ = list(getattr(self, "loss_curve_", []))
        self.loss_curve_.append(self.score_mse(X))
        best, stale = self.loss_curve_[-1], 0
        for _ in range(epochs):
            order = rng.permutation(len(Z))
            for start in range(0, len(Z), self.batch_size):
                batch = Z[order[start : start + self.batch_size]]
                self.net_.zero_grad()
                out, cache = self.net_.forward(batch)
                self.net_.backward(cache, 2.0 * (out - batch) / batch.size)
                adam_step(opt)
            mse = self.score_mse(X)
            self.loss_curve_.append(mse)
            if mse < best * (1.0 - self.tol):
                best, stale = mse, 0
            else:
                stale += 1
                if stale >= self.patience:
                    break
        self.mse_ = self.loss_curve_[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[-1]}")
        return self.net_.encode_forward((X - self.shift_) / self.scale_)[0]

    def inverse_transform(self, codes):
        check_is_fitted(self, "net_")
        return self.net_.decode_forward(np.asarray(codes, dtype=np.float64))[0] * self.scale_ + self.shift_

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def reconstruct_forward(self, x):
        out, cache = self.net_.forward((x - self.shift_) / self.scale_)
        return out * self.scale_ + self.shift_, cache

    def reconstruct_backward(self, cache, dout):
        return self.net_.backward(cache, dout * self.scale_) / self.scale_

    def score_mse(self, X) -> float:
        X = np.asarray(X, dtype=np.float64)
        return float(np.mean((self.reconstruct(X) - X) ** 2))

    def score(self, X, y=None):
        return -self.score_mse(X)


def encode(qbn: QuantizedBottleneck, vector) -> np.ndarray:
    """Ternary code of one vector (or a batch)."""
    return qbn.transform(vector).astype(np.int8)


def code_key(code) -> str:
    """Compact string form of a ternary code, e.g. ``"+0-0+"``."""
    return "".join("+" if c > 0 else "-" if c < 0 else "0" for c in np.asarray(code).ravel())


@dataclass
class TransitionRecord:
    h_before: np.ndarray
    h_after: np.ndarray
    obs: np.ndarray
    action: int
    trace_id: int
    step_index: int


@dataclass
class TransitionDataset:
    """Column-oriented store of transition records; one row per simulator step."""

    h_before: np.ndarray
    h_after: np.ndarray
    obs: np.ndarray
    action: np.ndarray
    trace_id: np.ndarray
    step_index: np.ndarray
    episode: np.ndarray
    policy_fingerprint: str = ""

    def __len__(self) -> int:
        return len(self.action)

    def __getitem__(self, i) -> TransitionRecord:
        return TransitionRecord(
            self.h_before[i], self.h_after[i], self.obs[i], int(self.action[i]), int(self.trace_id[i]), int(self.step_index[i])
        )

    def __eq__(self, other):
        if not isinstance(other, TransitionDataset):
            return NotImplemented
        return self.policy_fingerprint == other.policy_fingerprint and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in self._ARRAYS
        )

    _ARRAYS = ("h_before", "h_after", "obs", "action", "trace_id", "step_index", "episode")

    def episodes(self):
        """Yield index arrays, one per recorded episode, in step order."""
        for e in np.unique(self.episode):
            yield np.flatnonzero(self.episode == e)

    def save(self, path) -> None:
        """npz archive: the column arrays plus a JSON ``__header__`` entry."""
        header = {
            "version": 1,
            "hidden_dim": int(self.h_before.shape[1]),
            "obs_dim": int(self.obs.shape[1]),
            "n_records": len(self),
            "policy_fingerprint": self.policy_fingerprint,
        }
        arrays = {f: getattr(self, f) for f in self._ARRAYS}
        arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
        write_npz(path, arrays)

    @classmethod
    def load(cls, path) -> "TransitionDataset":
        with np.load(Path(path), allow_pickle=False) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            ds = cls(**{f: data[f].copy() for f in cls._ARRAYS}, policy_fingerprint=header["policy_fingerprint"])
        if ds.h_before.shape[1] != header["hidden_dim"] or ds.obs.shape[1] != header["obs_dim"]:
            raise ValueError(f"{path}: array dimensions disagree with header")
        return ds


def policy_fingerprint(policy: GruPolicy) -> str:
    digest = hashlib.sha256()
    for name, value in sorted(policy.state_dict().items()):
        digest.update(name.encode())
        digest.update(value.tobytes())
    return digest.hexdigest()[:16]


def collect_dataset(
    policy: GruPolicy,
    sim_cfg: SimConfig,
    traces: Sequence[WorkloadTrace],
    episodes_per_trace: int = 1,
    qbn_obs=None,
    qbn_hidden=None,
) -> TransitionDataset:
    """Greedy rollouts of ``policy``; one record per simulator step.

    Episode ``e`` of trace ``i`` uses simulator seed ``eval_seed(sim_cfg.seed + e, i)``,
    so episode 0 matches :func:`stormig.rl.evaluate_policy`.
    """
    cols = {k: [] for k in TransitionDataset._ARRAYS}
    episode = 0
    rng = np.random.default_rng(0)
    for e in range(episodes_per_trace):
        for i, tr in enumerate(traces):
            traj = rollout(
                policy, sim_cfg, tr, 0.0, rng, sim_seed=eval_seed(sim_cfg.seed + e, i), greedy=True,
                qbn_obs=qbn_obs, qbn_hidden=qbn_hidden, trace_id=i,
            )
            n = len(traj)
            cols["h_before"].append(traj.hidden_before)
            cols["h_after"].append(traj.hidden_after)
            cols["obs"].append(traj.observations)
            cols["action"].append(traj.actions)
            cols["trace_id"].append(np.full(n, i))
            cols["step_index"].append(np.arange(n))
            cols["episode"].append(np.full(n, episode))
            episode += 1
    return TransitionDataset(**{k: np.concatenate(v) for k, v in cols.items()}, policy_fingerprint=policy_fingerprint(policy))


def train_qbn(
    field: str,
    dataset: TransitionDataset,
    epochs: int = 200,
    batch: int = 256,
    lr: float = 1e-3,
    latent_dim: int | None = None,
    seed: int = 0,
    hidden_units: int = 64,
) -> QuantizedBottleneck:
    """Fit a QBN on the ``"obs"`` or ``"hidden"`` column of ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot train a QBN on an empty dataset")
    if field == "obs":
        X, L = dataset.obs, 16
    elif field == "hidden":
        X, L = np.concatenate([dataset.h_before[:1], dataset.h_after]), 64
    else:
        raise ValueError(f"unknown field {field!r}; expected 'obs' or 'hidden'")
    qbn = QuantizedBottleneck(latent_dim=latent_dim or L, hidden_units=hidden_units, epochs=epochs, batch_size=batch, learning_rate=lr, seed=seed)
    qbn.fit(X)
    log.info("%s QBN: final MSE %.3g after %d epochs", field, qbn.mse_, len(qbn.loss_curve_) - 1)
    return qbn


def finetune_with_qbns(
    policy: GruPolicy,
    qbn_obs: QuantizedBottleneck,
    qbn_hidden: QuantizedBottleneck,
    sim_cfg: SimConfig,
    traces: Sequence[WorkloadTrace],
    epochs: int,
    train_cfg: TrainConfig | None = None,
):
    """Continue A2C end-to-end with both QBNs inserted in the forward pass.

    With ``train_cfg.keep_best`` the components are evaluated (QBNs inserted)
    before training and every ``eval_every`` epochs, and the best set is kept.
    """
    train_cfg = train_cfg or TrainConfig()
    if epochs <= 0:
        return policy, qbn_obs, qbn_hidden
    modules = (policy, qbn_obs.net_, qbn_hidden.net_)
    params = [p for m in modules for p in m.parameters()]
    opt = AdamState(params, learning_rate=train_cfg.learning_rate, clip_norm=train_cfg.clip_norm)
    rng = np.random.default_rng(train_cfg.seed + 17)

    def score():
        return evaluate_policy(DrlActor(policy, qbn_obs, qbn_hidden), sim_cfg, traces).mean_K

    best = (score(), [m.state_dict() for m in modules]) if train_cfg.keep_best else None
    for epoch in range(1, epochs + 1):
        trajs = []
        for _ in range(train_cfg.episodes_per_epoch):
            i = int(rng.integers(len(traces)))
            trajs.append(
                rollout(policy, sim_cfg, traces[i], train_cfg.epsilon, rng, sim_seed=int(rng.integers(2**31)),
                        qbn_obs=qbn_obs, qbn_hidden=qbn_hidden, trace_id=i)
            )
        a2c_update(policy, trajs, train_cfg, opt, qbn_obs=qbn_obs, qbn_hidden=qbn_hidden)
        if best is not None and (epoch % train_cfg.eval_every == 0 or epoch == epochs):
            k = score()
            log.info("fine-tune epoch %d: mean K %.3f with QBNs inserted", epoch, k)
            if k < best[0]:
                best = (k, [m.state_dict() for m in modules])
    if best is not None:
        for m, state in zip(modules, best[1]):
            m.load_state_dict(state)
    return policy, qbn_obs, qbn_hidden


def save_qbn(qbn: QuantizedBottleneck, path, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["qbn_params"] = qbn.get_params()
    meta["n_features_in"] = qbn.n_features_in_
    meta["shift"] = [float(v) for v in qbn.shift_]
    meta["scale"] = [float(v) for v in qbn.scale_]
    meta["mse"] = getattr(qbn, "mse_", None)
    save_checkpoint(path, {"qbn": qbn.net_}, meta)


def load_qbn(path) -> QuantizedBottleneck:
    modules, meta = load_checkpoint(path)
    qbn = QuantizedBottleneck(**meta["qbn_params"])
    qbn._init_net(meta["n_features_in"], meta["shift"], meta["scale"])
    qbn.net_.load_state_dict(modules["qbn"])
    if meta.get("mse") is not None:
        qbn.mse_ = meta["mse"]
    return qbn

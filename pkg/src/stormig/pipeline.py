"""Stage-by-stage experiment runner with a checksummed, resumable run directory.

Layout of a run directory::

    manifest.json                   config, seeds, per-stage input/output checksums
    traces/standard/*.csv           standard traces (class, index)
    traces/real_train/*.csv         real-like training traces
    traces/real_eval/*.csv          held-out evaluation traces
    calibration.{json,txt}
    policy.npz, learning_curve.txt, checkpoints/epoch_*.npz
    dataset.npz
    qbn_obs.npz, qbn_hidden.npz
    fsm_raw.json, fsm.json, fsm.dot, fidelity.json
    comparison.{json,txt}
    report.{json,txt}
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Callable

from .config import RunConfig
from .fsm import FsmActor, export_fsm, extract_fsm, fidelity, import_fsm, minimize_fsm
from .harness import DefaultActor, HandcraftedActor, calibrate, compare
from .interpret import interpret, render_report
from .neural import GruPolicy, load_checkpoint, save_checkpoint
from .qbn import TransitionDataset, collect_dataset, finetune_with_qbns, load_qbn, save_qbn, train_qbn
from .rl import DrlActor, train_curriculum, write_learning_curve
from .workload import gen_real_trace, gen_standard_trace, read_trace, write_trace

log = logging.getLogger(__name__)

__all__ = ["STAGES", "PipelineError", "Pipeline", "trace_seeds"]

STAGES = ("gen-workloads", "calibrate", "train", "collect", "train-qbn", "extract", "evaluate", "interpret")
MANIFEST = "manifest.json"
FIDELITY_GATE = 0.9


class PipelineError(RuntimeError):
    def __init__(self, stage: str, kind: str, message: str):
        super().__init__(message)
        self.stage = stage
        self.kind = kind

    def to_dict(self) -> dict:
        return {"stage": self.stage, "kind": self.kind, "message": str(self)}


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def trace_seeds(seed: int) -> dict[str, int]:
    """Seed offsets for the three trace pools; pools never share a seed."""
    base = seed * 100_003
    return {"standard": base, "real_train": base + 50_000, "real_eval": base + 90_000}


def _load_policy(path: Path) -> tuple[GruPolicy, dict]:
    modules, meta = load_checkpoint(path)
    policy = GruPolicy(**meta["policy_config"])
    policy.load_state_dict(modules["policy"])
    return policy, meta


class Pipeline:
    """Runs stages against a run directory.

    A stage is skipped when the manifest records it with the same config
    fingerprint and every recorded input and output file still has its
    recorded checksum.
    """

    def __init__(self, cfg: RunConfig, run_dir, force: bool = False):
        self.cfg = cfg
        self.dir = Path(run_dir)
        self.force = force
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = self._read_manifest()
        self.ran: list[str] = []
        self.skipped: list[str] = []

    # manifest bookkeeping

    def _read_manifest(self) -> dict:
        path = self.dir / MANIFEST
        if path.exists():
            doc = json.loads(path.read_text())
            if doc.get("config_fingerprint") == self.cfg.fingerprint():
                return doc
            log.info("config changed; earlier stage records are discarded")
        return {
            "version": 1,
            "config_fingerprint": self.cfg.fingerprint(),
            "config": self.cfg.to_dict(),
            "seeds": {"workload": self.cfg.workload.seed, "sim": self.cfg.sim.seed, "train": self.cfg.train.seed, "qbn": self.cfg.qbn.seed},
            "trace_seeds": trace_seeds(self.cfg.workload.seed),
            "stages": {},
        }

    def _write_manifest(self):
        (self.dir / MANIFEST).write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")

    def _rel(self, p: Path) -> str:
        return str(Path(p).relative_to(self.dir))

    def _checksums(self, paths) -> dict[str, str]:
        return {self._rel(p): sha256_file(p) for p in sorted(paths)}

    def _up_to_date(self, stage: str) -> bool:
        rec = self.manifest["stages"].get(stage)
        if rec is None or self.force:
            return False
        for group in ("inputs", "outputs"):
            for rel, digest in rec[group].items():
                p = self.dir / rel
                if not p.exists() or sha256_file(p) != digest:
                    return False
        return True

    def _require(self, stage: str, paths) -> list[Path]:
        out = []
        for p in paths:
            p = Path(p)
            if not p.exists():
                producer = next((s for s, names in _PRODUCES.items() if p.name in names or p.parent.name in names), None)
                hint = f" (produced by stage '{producer}')" if producer else ""
                raise PipelineError(stage, "missing-prerequisite", f"missing prerequisite artifact {self._rel(p)}{hint}")
            out.append(p)
        return out

    # stage dispatch

    def run(self, stages=None) -> dict:
        stages = list(STAGES if stages is None else stages)
        for s in stages:
            if s not in STAGES:
                raise PipelineError(s, "unknown-stage", f"unknown stage {s!r}; expected one of {', '.join(STAGES)}")
        for s in STAGES:
            if s in stages:
                self.run_stage(s)
        return self.manifest

    def run_stage(self, stage: str) -> bool:
        """Run one stage; returns False when it was skipped as up to date."""
        fn: Callable[[], tuple[list[Path], list[Path], dict]] = getattr(self, "_stage_" + stage.replace("-", "_"))
        if self._up_to_date(stage):
            log.info("stage %s: up to date", stage)
            self.skipped.append(stage)
            return False
        t0 = time.time()
        inputs, outputs, info = fn()
        self.manifest["stages"][stage] = {
            "inputs": self._checksums(inputs),
            "outputs": self._checksums(outputs),
            "info": info,
            "seconds": round(time.time() - t0, 3),
        }
        self._write_manifest()
        self.ran.append(stage)
        log.info("stage %s: done in %.1fs", stage, time.time() - t0)
        return True

    # trace pools

    def _trace_paths(self, pool: str) -> list[Path]:
        d = self.dir / "traces" / pool
        return sorted(d.glob("*.csv")) if d.exists() else []

    def load_traces(self, pool: str, stage: str = "") -> list:
        paths = self._trace_paths(pool)
        if not paths:
            self._require(stage or pool, [self.dir / "traces" / pool])
            raise PipelineError(stage or pool, "missing-prerequisite", f"no traces in traces/{pool}")
        return [read_trace(p) for p in paths]

    def _stage_gen_workloads(self):
        w = self.cfg.workload
        seeds = trace_seeds(w.seed)
        outputs = []
        for pool in ("standard", "real_train", "real_eval"):
            d = self.dir / "traces" / pool
            d.mkdir(parents=True, exist_ok=True)
            for old in d.glob("*.csv"):
                old.unlink()
        for k, p in enumerate(self.cfg.profiles):
            for j in range(w.standard_per_class):
                path = self.dir / "traces" / "standard" / f"{k:02d}_{p.name}_{j:03d}.csv"
                write_trace(gen_standard_trace(p, w.T, seeds["standard"] + 1000 * k + j), path)
                outputs.append(path)
        for pool, n in (("real_train", w.real_train), ("real_eval", w.real_eval)):
            for i in range(n):
                path = self.dir / "traces" / pool / f"real_{i:03d}.csv"
                write_trace(gen_real_trace(self.cfg.profiles, w.T, w.snippet_len, seeds[pool] + i), path)
                outputs.append(path)
        return [], outputs, {"n_standard": len(self.cfg.profiles) * w.standard_per_class, "n_real_train": w.real_train, "n_real_eval": w.real_eval}

    def _stage_calibrate(self):
        rep = calibrate(self.cfg.profiles, self.cfg.sim, T=self.cfg.workload.T, seed=self.cfg.workload.seed)
        data, text = self.dir / "calibration.json", self.dir / "calibration.txt"
        data.write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
        text.write_text(rep.text())
        if not rep.ok:
            log.warning("classes outside the calibration band: %s", rep.out_of_band)
        return [], [data, text], {"out_of_band": rep.out_of_band}

    def _stage_train(self):
        std_paths, real_paths = self._trace_paths("standard"), self._trace_paths("real_train")
        standard = self.load_traces("standard", "train")
        real = self.load_traces("real_train", "train")
        ckpt_dir = self.dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        for old in ckpt_dir.glob("*.npz"):
            old.unlink()
        ckpts = []

        def snapshot(epoch, phase, policy):
            path = ckpt_dir / f"epoch_{epoch:05d}.npz"
            save_checkpoint(path, {"policy": policy}, {"epoch": epoch, "phase": phase, "policy_config": policy.config()})
            ckpts.append(path)

        policy, curve = train_curriculum(standard, real, self.cfg.sim, self.cfg.train, eval_traces=real, callback=snapshot)
        out = self.dir / "policy.npz"
        save_checkpoint(out, {"policy": policy}, {"policy_config": policy.config(), "train": dataclasses.asdict(self.cfg.train)})
        curve_path = self.dir / "learning_curve.txt"
        write_learning_curve(curve, curve_path)
        best = min(curve, key=lambda c: c.mean_K) if curve else None
        info = {"best_epoch": best.epoch if best else None, "best_mean_K": best.mean_K if best else None}
        return std_paths + real_paths, [out, curve_path] + ckpts, info

    def _stage_collect(self):
        pol_path, = self._require("collect", [self.dir / "policy.npz"])
        real_paths = self._trace_paths("real_train")
        traces = self.load_traces("real_train", "collect")
        policy, _ = _load_policy(pol_path)
        ds = collect_dataset(policy, self.cfg.sim, traces, self.cfg.qbn.episodes_per_trace)
        out = self.dir / "dataset.npz"
        ds.save(out)
        return [pol_path] + real_paths, [out], {"n_records": len(ds)}

    def _stage_train_qbn(self):
        ds_path, = self._require("train-qbn", [self.dir / "dataset.npz"])
        ds = TransitionDataset.load(ds_path)
        q = self.cfg.qbn
        qo = train_qbn("obs", ds, q.epochs, q.batch_size, q.learning_rate, q.obs_latent, seed=q.seed, hidden_units=q.hidden_units)
        qh = train_qbn("hidden", ds, q.epochs, q.batch_size, q.learning_rate, q.hidden_latent, seed=q.seed + 1, hidden_units=q.hidden_units)
        po, ph = self.dir / "qbn_obs.npz", self.dir / "qbn_hidden.npz"
        save_qbn(qo, po, {"field": "obs"})
        save_qbn(qh, ph, {"field": "hidden"})
        return [ds_path], [po, ph], {"mse_obs": qo.mse_, "mse_hidden": qh.mse_}

    def _stage_extract(self):
        pol_path, ds_path, po, ph = self._require(
            "extract", [self.dir / n for n in ("policy.npz", "dataset.npz", "qbn_obs.npz", "qbn_hidden.npz")]
        )
        real_paths = self._trace_paths("real_train")
        traces = self.load_traces("real_train", "extract")
        policy, _ = _load_policy(pol_path)
        ds = TransitionDataset.load(ds_path)
        qo, qh = load_qbn(po), load_qbn(ph)
        metric = self.cfg.fsm_metric
        raw = extract_fsm(ds, policy, qo, qh)
        fsm = minimize_fsm(raw)
        fid = fidelity(fsm, policy, qo, self.cfg.sim, traces, metric=metric)
        info = {"raw_states": raw.n_states, "states": fsm.n_states, "finetuned": False, "agreement_before": fid.open_loop_agreement}
        outputs = []
        if fid.open_loop_agreement < FIDELITY_GATE and self.cfg.qbn.finetune_epochs > 0:
            # fine-tune with both autoencoders in the loop, then re-extract
            tcfg = self.cfg.train
            policy, qo, qh = finetune_with_qbns(policy, qo, qh, self.cfg.sim, traces, self.cfg.qbn.finetune_epochs, tcfg)
            ds = collect_dataset(policy, self.cfg.sim, traces, self.cfg.qbn.episodes_per_trace, qbn_obs=qo, qbn_hidden=qh)
            raw = extract_fsm(ds, policy, qo, qh)
            fsm = minimize_fsm(raw)
            fid = fidelity(fsm, policy, qo, self.cfg.sim, traces, qbn_hidden=qh, drl_qbns=True, metric=metric)
            ft = {n: self.dir / f"{n}_ft.npz" for n in ("policy", "qbn_obs", "qbn_hidden", "dataset")}
            save_checkpoint(ft["policy"], {"policy": policy}, {"policy_config": policy.config(), "finetuned": True})
            save_qbn(qo, ft["qbn_obs"], {"field": "obs", "finetuned": True})
            save_qbn(qh, ft["qbn_hidden"], {"field": "hidden", "finetuned": True})
            ds.save(ft["dataset"])
            outputs += list(ft.values())
            info.update(finetuned=True, raw_states=raw.n_states, states=fsm.n_states)
        paths = {n: self.dir / n for n in ("fsm_raw.json", "fsm.json", "fsm.dot", "fidelity.json")}
        export_fsm(raw, paths["fsm_raw.json"], "table")
        export_fsm(fsm, paths["fsm.json"], "table")
        export_fsm(fsm, paths["fsm.dot"], "graph")
        fid_doc = fid.to_dict()
        fid_doc.update(
            conflict_rate=raw.stats.conflict_rate,
            consistency_rate=raw.stats.consistency_rate,
            raw_states=raw.n_states,
            states=fsm.n_states,
            finetuned=info["finetuned"],
        )
        paths["fidelity.json"].write_text(json.dumps(fid_doc, indent=1, sort_keys=True) + "\n")
        info.update(agreement=fid.open_loop_agreement, conflict_rate=raw.stats.conflict_rate, consistency_rate=raw.stats.consistency_rate)
        return [pol_path, ds_path, po, ph] + real_paths, list(paths.values()) + outputs, info

    def controllers(self, stage: str = "evaluate"):
        """(policy, fsm, qbn_obs, qbn_hidden, finetuned) as left by the extract stage."""
        fsm_path, fid_path = self._require(stage, [self.dir / "fsm.json", self.dir / "fidelity.json"])
        finetuned = json.loads(fid_path.read_text()).get("finetuned", False)
        suffix = "_ft" if finetuned else ""
        pol_path, po, ph = self._require(
            stage, [self.dir / f"{n}{suffix}.npz" for n in ("policy", "qbn_obs", "qbn_hidden")]
        )
        policy, _ = _load_policy(pol_path)
        return policy, import_fsm(fsm_path), load_qbn(po), load_qbn(ph), finetuned, [fsm_path, fid_path, pol_path, po, ph]

    def _stage_evaluate(self):
        policy, fsm, qo, qh, finetuned, used = self.controllers("evaluate")
        eval_paths = self._trace_paths("real_eval")
        traces = self.load_traces("real_eval", "evaluate")
        drl = DrlActor(policy, qo, qh) if finetuned else DrlActor(policy)
        table = compare(
            {
                "default": DefaultActor(),
                "handcrafted": HandcraftedActor(),
                "drl": drl,
                "fsm": FsmActor(fsm, qo, self.cfg.fsm_metric),
            },
            self.cfg.sim,
            traces,
        )
        data, text = table.save(self.dir / "comparison")
        info = {k: table.mean_K(k) for k in table.policies}
        return used + eval_paths, [data, text], info

    def _stage_interpret(self):
        policy, fsm, qo, qh, finetuned, used = self.controllers("interpret")
        eval_paths = self._trace_paths("real_eval")
        traces = self.load_traces("real_eval", "interpret")
        rep = interpret(fsm, qo, self.cfg.sim, traces, window=self.cfg.window, metric=self.cfg.fsm_metric)
        data, text = render_report(rep, self.dir / "report")
        return used + eval_paths, [data, text], {"noop_most_visited": rep.noop_most_visited(), "n_traces": len(traces)}


_PRODUCES = {
    "gen-workloads": ("standard", "real_train", "real_eval", "traces"),
    "train": ("policy.npz", "learning_curve.txt"),
    "collect": ("dataset.npz",),
    "train-qbn": ("qbn_obs.npz", "qbn_hidden.npz"),
    "extract": ("fsm.json", "fsm_raw.json", "fsm.dot", "fidelity.json", "policy_ft.npz", "qbn_obs_ft.npz", "qbn_hidden_ft.npz"),
}

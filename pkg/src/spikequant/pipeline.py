"""Stage runner behind the command line.

Every stage reads its predecessors' artifacts from the run directory, runs
one toolkit operation and records its outputs in ``manifest.json`` together
with a digest of everything that determines them: the config fields the
stage depends on, any extra input files, and the digests of its
predecessors. Re-running a stage whose digest and output hashes are
unchanged is a no-op unless forced; a predecessor whose digest no longer
matches the current config is reported as stale.

Wall-clock times go to ``timing.json``, which is not a tracked artifact, so
two runs of one config produce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import replace
from functools import cached_property
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, generate_synthetic, load_digits, load_idx
from .errors import ConfigError, MissingArtifactError, StaleArtifactError
from .metrics import (
    RunReport,
    emit_composite_plot_data,
    emit_plot_data,
    emit_report,
    footprint_bytes,
    sha256_file,
)
from .model import build_toy_model, group_layers, param_count
from .quant import QuantSpec
from .search import (
    BaseSettings,
    SensitivityTable,
    ThresholdPolicy,
    build_quantized,
    explore_composite,
    guided_explore,
    layerwise_sweep,
    select_base_settings,
)
from .snn import Evaluator, evaluate
from .training import train_toy

log = logging.getLogger("spikequant.pipeline")

PIPELINE = ("train-toy", "sweep", "base", "guided", "composite", "quantize", "report")

DEPS = {
    "train-toy": (),
    "sweep": ("train-toy",),
    "base": ("sweep",),
    "guided": ("train-toy", "sweep", "base"),
    "composite": ("train-toy", "sweep", "base", "guided"),
    "quantize": ("train-toy", "sweep", "composite"),
    "report": ("train-toy", "sweep", "base", "guided", "composite", "quantize"),
    "eval": (),
}

_DATA_KEYS = ("source", "idx_images", "idx_labels", "synthetic_samples", "synthetic_classes", "train_fraction", "seed")
_MODEL_KEYS = (
    "checkpoint", "channels", "image_size", "blocks_stage3", "blocks_stage4", "timesteps",
    "mlp_ratio", "conv_ratio", "epochs", "learning_rate", "batch_size",
)
_EVAL_KEYS = _DATA_KEYS + ("subset_size",)

KEYS = {
    "train-toy": _MODEL_KEYS + _DATA_KEYS,
    "sweep": _EVAL_KEYS + ("bits", "granularity", "mode"),
    "base": ("delta",),
    "guided": _EVAL_KEYS + ("bits", "granularity", "mode", "delta"),
    "composite": _EVAL_KEYS + ("granularity", "mode", "delta", "strategy"),
    "quantize": _EVAL_KEYS + ("mode", "delta"),
    "report": ("seed", "mode", "delta", "subset_size"),
    "eval": _EVAL_KEYS,
}

OUTPUTS = {
    "train-toy": ("model.qsvc", "train.json"),
    "sweep": ("sensitivity.json", "sensitivity.csv"),
    "base": ("base_settings.json",),
    "guided": ("guided_spec.json",),
    "composite": ("composite.json", "composite.csv", "composite_spec.json"),
    "quantize": ("quantized.qsvc", "quantize.json"),
    "report": ("report.json",),
    "eval": ("eval.json",),
}


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


class Run:
    def __init__(self, cfg: RunConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.dir = Path(cfg.output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.policy = ThresholdPolicy(cfg.delta)
        self._lock = threading.Lock()
        mpath = self.dir / "manifest.json"
        self.manifest = json.loads(mpath.read_text()) if mpath.exists() else {"schema": "spikequant.manifest", "version": 1, "stages": {}}

    # ---------------------------------------------------------------- data

    @cached_property
    def dataset(self) -> Dataset:
        cfg = self.cfg
        if cfg.source == "digits":
            return load_digits(cfg.image_size)
        if cfg.source == "synthetic":
            return generate_synthetic(cfg.seed, cfg.synthetic_samples, cfg.synthetic_classes, cfg.image_size)
        return load_idx(cfg.path(cfg.idx_images), cfg.path(cfg.idx_labels), tag="idx")

    @cached_property
    def splits(self) -> tuple[Dataset, Dataset]:
        return self.dataset.split(self.cfg.train_fraction, self.cfg.seed)

    @cached_property
    def eval_data(self) -> Dataset:
        return self.splits[1].subset(self.cfg.subset_size or None, self.cfg.seed)

    @cached_property
    def evaluator(self) -> Evaluator:
        return Evaluator(self.eval_data)

    def subset_info(self) -> dict:
        return {"samples": len(self.eval_data), "seed": self.cfg.seed, "tag": self.eval_data.tag}

    # ------------------------------------------------------------ manifest

    def _path(self, name) -> Path:
        return self.dir / name

    def _write(self, name: str, text: str) -> None:
        tmp = self._path(name + ".tmp")
        tmp.write_text(text, encoding="utf-8", newline="\n")
        tmp.replace(self._path(name))

    def _save_manifest(self) -> None:
        self._write("manifest.json", _dump(self.manifest))

    def expected_digest(self, stage: str, extra: str | None = None) -> str:
        if extra is None:
            extra = self.manifest["stages"].get(stage, {}).get("extra", "")
        deps = [self.expected_digest(d) for d in DEPS[stage]]
        payload = json.dumps([stage, self.cfg.digest(KEYS[stage]), extra, deps])
        return hashlib.sha256(payload.encode()).hexdigest()

    def _check_dep(self, dep: str) -> None:
        entry = self.manifest["stages"].get(dep)
        if entry is None:
            raise MissingArtifactError(f"stage {dep!r} has not been run in {self.dir}; run it first")
        for name, digest in entry["outputs"].items():
            path = self._path(name)
            if not path.exists():
                raise MissingArtifactError(f"artifact {path} of stage {dep!r} is missing")
            if sha256_file(path) != digest:
                raise StaleArtifactError(f"artifact {path} of stage {dep!r} was modified after it was written")
        if entry["digest"] != self.expected_digest(dep):
            raise StaleArtifactError(
                f"stage {dep!r} in {self.dir} was produced from different inputs; re-run it (use --force)"
            )

    def _up_to_date(self, stage: str, digest: str) -> bool:
        entry = self.manifest["stages"].get(stage)
        if self.force or entry is None or entry["digest"] != digest:
            return False
        return all(self._path(n).exists() and sha256_file(self._path(n)) == h for n, h in entry["outputs"].items())

    def _stage(self, stage: str, fn, extra: str = ""):
        for dep in DEPS[stage]:
            self._check_dep(dep)
        digest = self.expected_digest(stage, extra)
        if self._up_to_date(stage, digest):
            log.info("stage up to date, skipping", extra={"event": "skip", "stage": stage})
            return False
        log.info("stage start", extra={"event": "start", "stage": stage})
        t0 = time.perf_counter()
        fn()
        elapsed = time.perf_counter() - t0
        self.manifest["stages"][stage] = {
            "digest": digest,
            "extra": extra,
            "outputs": {n: sha256_file(self._path(n)) for n in OUTPUTS[stage]},
        }
        self._save_manifest()
        self._record_time(stage, elapsed)
        log.info("stage done", extra={"event": "done", "stage": stage, "seconds": round(elapsed, 3)})
        return True

    def _record_time(self, stage: str, seconds: float) -> None:
        path = self._path("timing.json")
        timing = json.loads(path.read_text()) if path.exists() else {}
        timing[stage] = round(seconds, 3)
        path.write_text(_dump(timing))

    # -------------------------------------------------------------- loaders

    def model(self):
        return load_checkpoint(self._path("model.qsvc"))

    def table(self) -> SensitivityTable:
        return SensitivityTable.loads(self._path("sensitivity.json").read_text())

    def base(self) -> BaseSettings:
        return BaseSettings.loads(self._path("base_settings.json").read_text())

    def groups(self, model):
        return group_layers(model, self.cfg.granularity)

    # --------------------------------------------------------------- stages

    def train_toy(self):
        def run():
            cfg = self.cfg
            train, val = self.splits
            if cfg.checkpoint:
                model = load_checkpoint(cfg.path(cfg.checkpoint))
                history, source = [], "checkpoint"
                val_acc = evaluate(model, val)
            else:
                mcfg = cfg.model_config(self.dataset.num_classes, self.dataset.images.shape[1])
                model = build_toy_model(mcfg, seed=cfg.seed)
                result = train_toy(model, train, cfg.epochs, cfg.seed, val, cfg.learning_rate, cfg.batch_size)
                model, history, val_acc, source = result.model, result.history, result.val_accuracy, "trained"
            model = replace(model, dataset_tag=self.dataset.tag)
            save_checkpoint(model, self._path("model.qsvc"))
            self._write(
                "train.json",
                _dump(
                    {
                        "schema": "spikequant.train",
                        "version": 1,
                        "source": source,
                        "epochs": cfg.epochs if source == "trained" else 0,
                        "seed": cfg.seed,
                        "validation_samples": len(val),
                        "validation_accuracy": val_acc,
                        "param_count": param_count(model),
                        "layers": len(model.layers),
                        "history": history,
                    }
                ),
            )

        return self._stage("train-toy", run)

    def sweep(self):
        partial = self._path("sensitivity.partial.json")

        def run():
            model = self.model()
            digest = self.expected_digest("sweep", "")
            known = {}
            if partial.exists():
                doc = json.loads(partial.read_text())
                if doc.get("digest") == digest:
                    known = {(r["unit"], r["bit"]): r["accuracy"] for r in doc["records"]}
                    log.info("resuming sweep", extra={"event": "resume", "cells": len(known)})
            done = dict(known)

            def on_cell(unit, bit, acc):
                with self._lock:
                    done[(unit, bit)] = acc
                    log.info(
                        "sweep cell",
                        extra={"event": "sweep_cell", "unit": unit, "bit": bit, "accuracy": acc},
                    )
                    records = [{"unit": u, "bit": b, "accuracy": a} for (u, b), a in done.items()]
                    self._write("sensitivity.partial.json", _dump({"digest": digest, "records": records}))

            table = layerwise_sweep(
                model,
                self.evaluator,
                self.cfg.bits,
                groups=self.groups(model),
                mode=self.cfg.mode,
                resume=known,
                on_cell=on_cell,
                workers=self.cfg.workers,
            )
            self._write("sensitivity.json", table.dumps())
            emit_plot_data(table, self._path("sensitivity.csv"))
            if partial.exists():
                partial.unlink()

        return self._stage("sweep", run)

    def base_stage(self):
        def run():
            table = self.table()
            base = select_base_settings(table, self.policy)
            doc = base.to_dict()
            doc["baseline_accuracy"] = table.baseline
            doc["threshold"] = self.policy.threshold(table.baseline)
            self._write("base_settings.json", _dump(doc))

        return self._stage("base", run)

    def guided(self):
        def run():
            model = self.model()
            spec = guided_explore(
                model,
                self.evaluator,
                self.base(),
                self.policy,
                groups=self.groups(model),
                baseline=self.table().baseline,
                mode=self.cfg.mode,
                axis=self.cfg.bits,
                workers=self.cfg.workers,
            )
            self._write("guided_spec.json", spec.dumps(model))

        return self._stage("guided", run)

    def composite(self):
        def run():
            model = self.model()
            guided = QuantSpec.loads(self._path("guided_spec.json").read_text(), model)
            result = explore_composite(
                model,
                self.evaluator,
                self.base(),
                self.policy,
                strategy=self.cfg.strategy,
                groups=self.groups(model),
                guided=guided,
                baseline=self.table().baseline,
                mode=self.cfg.mode,
                workers=self.cfg.workers,
            )
            self._write("composite.json", _dump(result.to_dict()))
            emit_composite_plot_data(result.ranked, self._path("composite.csv"))
            self._write("composite_spec.json", result.selected.dumps(model))

        return self._stage("composite", run)

    def quantize(self, spec_path=None):
        extra = ""
        if spec_path is not None:
            spec_path = Path(spec_path)
            if not spec_path.exists():
                raise MissingArtifactError(f"spec file not found: {spec_path}")
            extra = "spec:" + sha256_file(spec_path)

        def run():
            model = self.model()
            baseline = self.table().baseline
            source = str(spec_path) if spec_path is not None else "composite_spec.json"
            path = spec_path if spec_path is not None else self._path("composite_spec.json")
            spec = QuantSpec.loads(Path(path).read_text(), model)
            result = build_quantized(model, spec, self.evaluator, baseline, self.policy, self.cfg.mode)
            warnings, fallback = [], None
            if result.warning:
                warnings.append(result.warning)
                if spec_path is None:
                    fallback = self._fallback(model, baseline)
                    if fallback is not None:
                        spec, result = fallback
                        warnings.append("fell back to the best qualifying composite candidate")
            save_checkpoint(result.model, self._path("quantized.qsvc"))
            fp = footprint_bytes(result.model)
            doc = {
                "schema": "spikequant.quantize",
                "version": 1,
                "spec_source": source if fallback is None else "composite.json:best_qualifying",
                "mode": self.cfg.mode,
                "baseline_accuracy": baseline,
                "accuracy": result.accuracy,
                "warnings": warnings,
                "spec": spec.to_dict(model),
                "footprint": fp.to_dict(),
            }
            self._write("quantize.json", _dump(doc))

        return self._stage("quantize", run, extra)

    def _fallback(self, model, baseline):
        doc = json.loads(self._path("composite.json").read_text())
        for cand in doc["ranked"]:
            if cand["qualifies"]:
                spec = QuantSpec(dict((lid, b) for lid, b in cand["bits"]), "composite")
                result = build_quantized(model, spec, self.evaluator, baseline, self.policy, self.cfg.mode)
                if not result.warning:
                    return spec, result
        return None

    def report(self):
        def run():
            q = json.loads(self._path("quantize.json").read_text())
            train = json.loads(self._path("train.json").read_text())
            base = json.loads(self._path("base_settings.json").read_text())
            composite = json.loads(self._path("composite.json").read_text())
            guided = json.loads(self._path("guided_spec.json").read_text())
            model = load_checkpoint(self._path("quantized.qsvc"))
            report = RunReport(
                run_id=self.cfg.digest()[:12],
                seed=self.cfg.seed,
                config_digest=self.cfg.digest(),
                quant_mode=self.cfg.mode,
                baseline_accuracy=q["baseline_accuracy"],
                final_accuracy=q["accuracy"],
                threshold_delta=self.cfg.delta,
                evaluation_subset=self.subset_info(),
                footprint=footprint_bytes(model),
                artifacts={n: n for s in PIPELINE[:-1] for n in OUTPUTS[s]},
                stages={
                    "train": {"source": train["source"], "validation_accuracy": train["validation_accuracy"]},
                    "base_settings": base["units"],
                    "guided": [[e["id"], e["bit"]] for e in guided["layers"]],
                    "composite_candidates": [
                        {k: c[k] for k in ("name", "accuracy", "footprint_bytes", "qualifies")}
                        for c in composite["ranked"]
                    ],
                    "final_spec_source": q["spec_source"],
                    "final": [[e["id"], e["bit"]] for e in q["spec"]["layers"]],
                    "granularity": self.cfg.granularity,
                },
                evaluations={
                    "sweep": len(json.loads(self._path("sensitivity.json").read_text())["records"]),
                    "guided": guided["meta"].get("evaluations"),
                    "composite": len(composite["ranked"]),
                },
                warnings=q["warnings"],
                base_dir=self.dir,
            )
            emit_report(report, self._path("report.json"))

        return self._stage("report", run)

    def eval(self, checkpoint=None):
        if checkpoint is None:
            checkpoint = self._path("quantized.qsvc")
            if not checkpoint.exists():
                checkpoint = self._path("model.qsvc")
        checkpoint = Path(checkpoint)
        if not checkpoint.exists():
            raise MissingArtifactError(f"no checkpoint to evaluate at {checkpoint}")
        extra = "ckpt:" + sha256_file(checkpoint)

        def run():
            model = load_checkpoint(checkpoint)
            acc = self.evaluator(model)
            fp = footprint_bytes(model)
            doc = {
                "schema": "spikequant.eval",
                "version": 1,
                "checkpoint_sha256": extra[5:],
                "accuracy": acc,
                "evaluation_subset": self.subset_info(),
                "footprint": {k: v for k, v in fp.to_dict().items() if k != "layers"},
            }
            self._write("eval.json", _dump(doc))

        return self._stage("eval", run, extra)

    def pipeline(self):
        self.train_toy()
        self.sweep()
        self.base_stage()
        self.guided()
        self.composite()
        self.quantize()
        self.report()


def run_stage(cfg: RunConfig, stage: str, force: bool = False, **kwargs):
    run = Run(cfg, force)
    table = {
        "train-toy": run.train_toy,
        "sweep": run.sweep,
        "base": run.base_stage,
        "guided": run.guided,
        "composite": run.composite,
        "quantize": run.quantize,
        "report": run.report,
        "eval": run.eval,
        "pipeline": run.pipeline,
    }
    if stage not in table:
        raise ConfigError(f"unknown stage {stage!r}")
    table[stage](**kwargs)
    return run

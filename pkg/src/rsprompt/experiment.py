"""Resumable experiment plans: sample -> train -> evaluate -> report, one task per cell."""

from __future__ import annotations

import hashlib
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone.bundle import BackboneBundle, load_backbone, micro_backbone
from .backbone.preprocess import PreprocessSpec
from .config import ExperimentConfig
from .data.images import iter_batches, load_images
from .data.registry import Dataset, IntegrityError, forbid_splits, load_dataset
from .data.sampling import FewShotManifest, sample_few_shot, sample_validation
from .evaluation.metrics import EvalReport, aggregate_runs, make_report
from .evaluation.report import emit_report
from .evaluation.transfer import TransferMatrix, evaluate_state, winner
from .probe import evaluate_probe, extract_features, search_C, fit_probe
from .prompts.methods import build_zeroshot_classifier, zeroshot_logits
from .train import CheckpointRecord, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)


def open_backbone(cfg: ExperimentConfig) -> BackboneBundle:
    """``micro`` / ``micro:<seed>`` builds the test backbone; anything else is an archive path."""
    if cfg.backbone.startswith("micro"):
        seed = int(cfg.backbone.split(":")[1]) if ":" in cfg.backbone else 0
        bundle = micro_backbone(seed)
    else:
        bundle = load_backbone(cfg.backbone)
    p = cfg.preprocess
    size = p.target_size or bundle.geometry.image_size
    bundle.preprocess = PreprocessSpec(size, p.interpolation, p.crop, tuple(p.mean), tuple(p.std))
    return bundle


@dataclass
class Task:
    kind: str
    dataset: str
    method: str = ""
    shots: int = 0
    seed: int = 0
    task_id: str = ""
    status: str = "pending"

    @property
    def key(self) -> str:
        return f"{self.kind}:{self.dataset}:{self.method}:{self.shots}:{self.seed}"


@dataclass
class ExperimentPlan:
    tasks: list[Task]
    path: Path | None = None
    state: dict = field(default_factory=dict)

    @property
    def training_cells(self) -> list[Task]:
        return [t for t in self.tasks if t.kind == "train"]

    def load_state(self, honor_done: bool = True) -> None:
        if self.path and self.path.exists():
            self.state = json.loads(self.path.read_text())
        if not honor_done:
            return
        for t in self.tasks:
            if self.state.get(t.task_id, {}).get("status") == "done":
                t.status = "done"

    def mark(self, task: Task, status: str, error: str | None = None) -> None:
        task.status = status
        self.state[task.task_id] = {"key": task.key, "status": status, **({"error": error} if error else {})}
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self.state, indent=1, sort_keys=True))


def _task_hash(cfg: ExperimentConfig, key: str) -> str:
    relevant = {
        "key": key,
        "train": cfg.train.model_dump(mode="json"),
        "method": cfg.method.model_dump(mode="json"),
        "probe": cfg.probe.model_dump(mode="json"),
        "template": cfg.zeroshot_template,
        "backbone": cfg.backbone,
        "preprocess": cfg.preprocess.model_dump(mode="json"),
        "splits": cfg.split_digests,
    }
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()[:16]


def build_plan(cfg: ExperimentConfig) -> ExperimentPlan:
    tasks = []
    for d in cfg.datasets:
        if "zeroshot" in cfg.methods:
            tasks.append(Task("zeroshot", d, "zeroshot"))
        for k in cfg.shots:
            for s in cfg.seeds:
                if "probe" in cfg.methods:
                    tasks.append(Task("probe", d, "probe", k, s))
                for m in cfg.prompt_methods:
                    tasks.append(Task("train", d, m, k, s))
                    tasks.append(Task("eval", d, m, k, s))
    if cfg.cross_dataset:
        for m in cfg.prompt_methods:
            for src in cfg.datasets:
                for s in cfg.seeds:
                    tasks.append(Task("crosseval", src, m, cfg.cross_shots, s))
    for t in tasks:
        t.task_id = _task_hash(cfg, t.key)
    return ExperimentPlan(tasks, Path(cfg.output_root) / "plan.json")


# -- cell execution ----------------------------------------------------------------


class Runner:
    def __init__(self, cfg: ExperimentConfig, bundle: BackboneBundle | None = None):
        self.cfg = cfg
        self._bundle = bundle
        self.out = Path(cfg.output_root)
        self._datasets: dict[str, Dataset] = {}

    @property
    def bundle(self) -> BackboneBundle:
        if self._bundle is None:
            self._bundle = open_backbone(self.cfg)
        return self._bundle

    def dataset(self, name: str) -> Dataset:
        if name not in self._datasets:
            ds = load_dataset(name, self.cfg.data_root)
            pinned = self.cfg.split_digests.get(name, {})
            actual = ds.split_digests()
            for split, digest in pinned.items():
                if actual.get(split) != digest:
                    raise IntegrityError(f"{name}/{split}: split digest {actual.get(split)} != pinned {digest}")
            self._datasets[name] = ds
        return self._datasets[name]

    def cell_dir(self, dataset, method, shots, seed) -> Path:
        return self.out / dataset / method / str(shots) / f"seed{seed}"

    def provenance(self, ds: Dataset, seed: int, **extra) -> dict:
        return {
            "config_hash": self.cfg.content_hash(),
            "backbone_digest": self.bundle.digest(),
            "split_digests": ds.split_digests(),
            "seed": seed,
            **extra,
        }

    def few_shot(self, ds: Dataset, k: int, seed: int) -> FewShotManifest:
        path = self.out / "manifests" / ds.name / f"k{k}_seed{seed}.tsv"
        if path.exists():
            return FewShotManifest.load(path)
        with forbid_splits(f"{ds.name}/test"):
            m = sample_few_shot(ds.train(), ds.labels, k, seed)
        m.save(path)
        return m

    def run_zeroshot(self, name: str) -> EvalReport:
        ds = self.dataset(name)
        bank = build_zeroshot_classifier(self.bundle, ds.classnames, self.cfg.zeroshot_template)
        scores, labels = [], []
        with forbid_splits(f"{name}/train"):
            for images, y in iter_batches(ds.root, ds.items("test"), self.bundle.preprocess, self.cfg.eval_batch_size):
                scores.append(zeroshot_logits(self.bundle, bank, images).double().numpy())
                labels.append(y.numpy())
        report = make_report(
            np.concatenate(scores), np.concatenate(labels), len(ds.classnames), dataset=name, method="zeroshot",
            shots=0, seed=0, classnames=ds.classnames,
            provenance=self.provenance(ds, 0, template=self.cfg.zeroshot_template),
        )
        self._save_report(report, self.cell_dir(name, "zeroshot", 0, 0))
        return report

    def run_probe(self, name: str, k: int, seed: int) -> EvalReport:
        ds = self.dataset(name)
        shots = self.few_shot(ds, k, seed)
        with forbid_splits(f"{name}/test"):
            val = sample_validation(ds.train(), ds.labels, shots)
        cache = self.out / "feature_cache"
        p = self.cfg.probe
        bs, norm = self.cfg.eval_batch_size, p.normalize_features
        tr = extract_features(self.bundle, ds.root, shots.items, f"{name}-k{k}-s{seed}-train", cache, bs, norm)
        va = extract_features(self.bundle, ds.root, val.items, f"{name}-k{k}-s{seed}-val", cache, bs, norm)
        grid = np.logspace(p.grid_min_log10, p.grid_max_log10, p.grid_size)
        n_cls = len(ds.classnames)
        best, trace = search_C(tr, va, grid, p.refine_steps, n_cls, p.max_iter)
        model = fit_probe(tr, best, n_cls, p.max_iter)
        with forbid_splits(f"{name}/train"):
            te = extract_features(self.bundle, ds.root, ds.items("test"), f"{name}-test", cache, bs, norm)
        report = evaluate_probe(model, te, dataset=name, shots=k, seed=seed, classnames=ds.classnames)
        report.provenance.update(self.provenance(ds, seed, manifest_digest=shots.digest(), c_search=trace))
        self._save_report(report, self.cell_dir(name, "probe", k, seed))
        return report

    def train_cell(self, name: str, method: str, k: int, seed: int) -> Path:
        """Sample, train and checkpoint one cell; returns the cell directory."""
        ds = self.dataset(name)
        shots = self.few_shot(ds, k, seed)
        cell = self.cell_dir(name, method, k, seed)
        cell.mkdir(parents=True, exist_ok=True)
        shots.save(cell / "manifest.tsv")
        with forbid_splits(f"{name}/test"):
            images = load_images(ds.root, shots.paths, self.bundle.preprocess)
        tcfg = self.cfg.train.build(seed)
        log = cell / "train_log.jsonl"
        log.unlink(missing_ok=True)
        result = train(self.bundle, method, images, torch.tensor(shots.labels), ds.classnames, tcfg,
                       self.cfg.method.build(), log_path=log)
        last = result.history[-1]["loss"] if result.history else float("nan")
        common = (tcfg.epochs, last, self.cfg.content_hash(), shots.digest(), self.bundle.digest())
        save_checkpoint(CheckpointRecord(result.state, *common), cell / "checkpoint.safetensors")
        if result.ensembled is not None:
            save_checkpoint(CheckpointRecord(result.ensembled, *common), cell / "checkpoint_ensembled.safetensors")
        return cell

    def eval_cell(self, name: str, method: str, k: int, seed: int) -> EvalReport:
        """Evaluate a saved checkpoint on the test split and write ``report.json``."""
        ds = self.dataset(name)
        cell = self.cell_dir(name, method, k, seed)
        final = load_checkpoint(cell / "checkpoint.safetensors", self.bundle.digest(), self.cfg.content_hash())
        chosen, ensembled = final, False
        ens_path = cell / "checkpoint_ensembled.safetensors"
        if ens_path.exists():
            # both states are scored; the configured one becomes the cell's report
            rep = evaluate_state(self.bundle, final.state, ds, shots=k, seed=seed, batch_size=self.cfg.eval_batch_size)
            (cell / "report_final_epoch.json").write_text(json.dumps(rep.to_dict(), sort_keys=True))
            if self.cfg.method.evaluate_ensembled:
                chosen = load_checkpoint(ens_path, self.bundle.digest(), self.cfg.content_hash())
                ensembled = True
        prov = self.provenance(ds, seed, manifest_digest=final.manifest_digest, ensembled=ensembled)
        report = evaluate_state(self.bundle, chosen.state, ds, shots=k, seed=seed,
                                batch_size=self.cfg.eval_batch_size, provenance=prov)
        self._save_report(report, cell)
        return report

    def run_train(self, name: str, method: str, k: int, seed: int) -> EvalReport:
        self.train_cell(name, method, k, seed)
        return self.eval_cell(name, method, k, seed)

    def checkpoint_for(self, name, method, k, seed) -> CheckpointRecord:
        cell = self.cell_dir(name, method, k, seed)
        ens = cell / "checkpoint_ensembled.safetensors"
        path = ens if ens.exists() and self.cfg.method.evaluate_ensembled else cell / "checkpoint.safetensors"
        return load_checkpoint(path, self.bundle.digest(), self.cfg.content_hash())

    def run_crosseval(self, source: str, method: str, seed: int) -> dict[str, float]:
        rec = self.checkpoint_for(source, method, self.cfg.cross_shots, seed)
        out = {}
        for target in self.cfg.datasets:
            rep = evaluate_state(self.bundle, rec.state, self.dataset(target), shots=self.cfg.cross_shots, seed=seed,
                                 batch_size=self.cfg.eval_batch_size)
            out[target] = rep.accuracy
        path = self.cell_dir(source, method, self.cfg.cross_shots, seed) / "crosseval.json"
        path.write_text(json.dumps(out, sort_keys=True))
        return out

    def _save_report(self, report: EvalReport, cell: Path) -> None:
        cell.mkdir(parents=True, exist_ok=True)
        (cell / "report.json").write_text(json.dumps(report.to_dict(), sort_keys=True))

    def execute(self, task: Task):
        if task.kind == "zeroshot":
            return self.run_zeroshot(task.dataset)
        if task.kind == "probe":
            return self.run_probe(task.dataset, task.shots, task.seed)
        if task.kind == "train":
            return self.train_cell(task.dataset, task.method, task.shots, task.seed)
        if task.kind == "eval":
            return self.eval_cell(task.dataset, task.method, task.shots, task.seed)
        if task.kind == "crosseval":
            return self.run_crosseval(task.dataset, task.method, task.seed)
        raise ValueError(f"unknown task kind {task.kind!r}")

    # -- collection ------------------------------------------------------------

    def collect_reports(self) -> list[EvalReport]:
        """Seed-aggregated reports for every cell with a saved report."""
        groups: dict[tuple, list[EvalReport]] = {}
        for p in sorted(self.out.glob("*/*/*/seed*/report.json")):
            r = EvalReport.from_dict(json.loads(p.read_text()))
            if r.dataset in self.cfg.datasets:
                groups.setdefault(r.key, []).append(r)
        return [aggregate_runs(sorted(g, key=lambda r: r.seeds)) for _, g in sorted(groups.items())]

    def transfer_matrices(self) -> list[TransferMatrix]:
        mats = []
        for m in self.cfg.prompt_methods:
            t = TransferMatrix.empty(m, self.cfg.datasets, self.cfg.datasets)
            for src in self.cfg.datasets:
                per_target: dict[str, list[float]] = {}
                for s in self.cfg.seeds:
                    p = self.cell_dir(src, m, self.cfg.cross_shots, s) / "crosseval.json"
                    if p.exists():
                        for tgt, acc in json.loads(p.read_text()).items():
                            per_target.setdefault(tgt, []).append(acc)
                for tgt, accs in per_target.items():
                    if len(accs) == len(self.cfg.seeds) and tgt in t.targets:
                        t.set(src, tgt, float(np.mean(accs)))
            mats.append(t)
        return mats

    def report(self):
        reports = self.collect_reports()
        mats = self.transfer_matrices() if self.cfg.cross_dataset else []
        win = winner(mats) if mats else None
        summary = {"config_hash": self.cfg.content_hash(), "backbone_digest": self.bundle.digest()}
        return emit_report(reports, self.out / "report", mats, win, summary)


def _worker(cfg_doc: dict, task: Task):
    from .config import ExperimentConfig

    cfg = ExperimentConfig(**cfg_doc)
    cfg.register_custom()
    Runner(cfg).execute(task)
    return task.task_id


STAGES = (("zeroshot", "probe", "train"), ("eval",), ("crosseval",))


def _execute_stage(plan: ExperimentPlan, runner: Runner, cfg: ExperimentConfig, stage: list[Task], jobs: int) -> bool:
    ok = True
    if jobs > 1 and len(stage) > 1:
        doc = cfg.model_dump(mode="json")
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(pool.submit(_worker, doc, t), t) for t in stage]
            for fut, t in futures:
                try:
                    fut.result()
                    plan.mark(t, "done")
                except Exception as exc:
                    logger.error("task %s failed: %s", t.key, exc)
                    plan.mark(t, "failed", str(exc))
                    ok = False
        return ok
    for t in stage:
        try:
            runner.execute(t)
            plan.mark(t, "done")
        except Exception as exc:
            logger.error("task %s failed:\n%s", t.key, traceback.format_exc())
            plan.mark(t, "failed", str(exc))
            ok = False
    return ok


def run(
    cfg: ExperimentConfig,
    jobs: int = 1,
    force: bool = False,
    resume: bool = True,
    kinds: tuple[str, ...] | None = None,
    emit: bool = True,
    bundle: BackboneBundle | None = None,
) -> int:
    """Execute pending tasks (optionally only those of ``kinds``), then emit the report.

    Completed tasks recorded in ``plan.json`` are skipped unless ``force``.
    Returns a process exit code: 0 on success, 1 if any task failed.
    """
    plan = build_plan(cfg)
    plan.load_state(honor_done=resume and not force)
    runner = Runner(cfg, bundle)
    selected = [t for t in plan.tasks if kinds is None or t.kind in kinds]
    skipped = sum(t.status == "done" for t in selected)
    if skipped:
        logger.info("%d of %d tasks already done; skipping", skipped, len(selected))
    for kinds_in_stage in STAGES:
        stage = [t for t in selected if t.kind in kinds_in_stage and t.status != "done"]
        # a custom in-memory backbone cannot be shipped to worker processes
        if not _execute_stage(plan, runner, cfg, stage, jobs if bundle is None else 1):
            return 1
    if emit:
        runner.report()
    return 0

"""Multi-seed experiment battery, results persistence and diagnostic plots."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_to_dict, dump_config, fingerprint
from .data import (
    ContaminationSpec,
    LabeledDataset,
    Provenance,
    contaminate,
    load_dataset,
    split_cil,
    split_dil,
)
from .metrics import (
    final_average_accuracy,
    histogram_from_entropies,
    learning_accuracy,
    relative_forgetting,
    roc_curve,
    synthetic_roc_auc,
    dataset_entropies,
)
from .trainer import run_experiment

log = logging.getLogger(__name__)

SUMMARY_METRICS = ("faa", "la", "rf", "auc", "final_synthetic_fraction")
ROC_POINTS = 200


@dataclass
class ResultsRecord:
    """Everything a battery produced: one entry per seed plus aggregates."""

    fingerprint: str
    config: dict
    runs: list[dict] = field(default_factory=list)

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.runs if r["status"] != "ok"]

    @property
    def succeeded(self) -> list[dict]:
        return [r for r in self.runs if r["status"] == "ok"]

    def summary(self) -> dict:
        out = {}
        for key in SUMMARY_METRICS:
            vals = [r[key] for r in self.succeeded if r.get(key) is not None]
            if vals:
                # population standard deviation over seeds
                out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        return out

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.runs)
        _atomic_write(out / "results.jsonl", lines)
        summary = {
            "fingerprint": self.fingerprint,
            "config": self.config,
            "summary": self.summary(),
            "n_runs": len(self.runs),
            "n_failed": len(self.failed),
        }
        _atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, out_dir: str | Path) -> "ResultsRecord":
        out = Path(out_dir)
        summary = json.loads((out / "summary.json").read_text())
        runs = [json.loads(line) for line in (out / "results.jsonl").read_text().splitlines() if line.strip()]
        return cls(fingerprint=summary["fingerprint"], config=summary["config"], runs=runs)


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class LoadedData:
    real: LabeledDataset
    twins: dict[str, LabeledDataset]
    test: LabeledDataset


def load_data(cfg: ExperimentConfig) -> LoadedData:
    n = cfg.data.class_count
    real = load_dataset(cfg.data.real_root, n, name="real")
    twins = {
        tag: load_dataset(root, n, provenance=Provenance.synthetic(tag), name=tag)
        for tag, root in sorted(cfg.data.twin_roots.items())
    }
    test = load_dataset(cfg.data.test_root, n, name="test")
    return LoadedData(real, twins, test)


def _downsample_curve(fpr: np.ndarray, tpr: np.ndarray, points: int = ROC_POINTS) -> tuple[list, list]:
    if fpr.size <= points:
        return fpr.tolist(), tpr.tolist()
    idx = np.unique(np.linspace(0, fpr.size - 1, points).round().astype(int))
    return fpr[idx].tolist(), tpr[idx].tolist()


def run_seed(cfg: ExperimentConfig, data: LoadedData, seed: int, run_dir: Path | None = None) -> dict:
    """Train and evaluate one seed; the seed drives contamination, task order, stream order and init."""
    if cfg.data.ratio > 0:
        spec = ContaminationSpec(cfg.data.ratio, cfg.shares(), seed)
        train = contaminate(data.real, data.twins, spec)
    else:
        train = data.real
    if cfg.split.mode == "cil":
        tasks = split_cil(train, cfg.split.n_tasks, seed)
        num_classes = cfg.data.class_count
    else:
        tasks = split_dil(train, cfg.split.coarse_map, cfg.split.n_tasks, seed)
        num_classes = 1 + max(cfg.split.coarse_map.values())
    tests = tasks.project(data.test)
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    result = run_experiment(tcfg, tasks, tests, num_classes=num_classes, out_dir=run_dir)

    acc = result.accuracy
    record = {
        "seed": seed,
        "status": "ok",
        "accuracy": acc.tolist(),
        "faa": final_average_accuracy(acc),
        "la": learning_accuracy(acc),
        "rf": relative_forgetting(acc) if len(tasks) > 1 else None,
        "task_classes": [list(t.classes) for t in tasks],
        "composition": result.log.composition,
        "final_synthetic_fraction": (
            result.log.composition[-1]["synthetic_fraction"] if result.log.composition else None
        ),
    }
    if cfg.diagnostics:
        samples = list(train.samples)
        ents = dataset_entropies(result.model, samples)
        syn = np.array([s.provenance.is_synthetic for s in samples])
        diag = {"histogram": histogram_from_entropies(ents, syn, num_classes)}
        if syn.any() and (~syn).any():
            record["auc"] = synthetic_roc_auc(ents, syn)
            fpr, tpr = roc_curve(ents, syn)
            diag["roc"] = dict(zip(("fpr", "tpr"), _downsample_curve(fpr, tpr)))
        else:
            record["auc"] = None
        record["diagnostics"] = diag
    return record


def run_battery(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ResultsRecord:
    """One run per seed.  A failing seed is recorded and the battery continues."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    record = ResultsRecord(fingerprint=fingerprint(cfg), config=config_to_dict(cfg))
    data = load_data(cfg)
    for seed in cfg.seeds:
        log.info("seed %d: start", seed)
        try:
            run = run_seed(cfg, data, seed, out / f"seed_{seed}")
        except Exception as exc:  # recorded, the remaining seeds still run
            log.exception("seed %d failed", seed)
            run = {"seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
        else:
            log.info("seed %d: faa %.4f", seed, run["faa"])
        record.runs.append(run)
        record.write(out)
    return record


def _tsv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}"


def emit_plots(results_dir: str | Path, plot_dir: str | Path | None = None) -> list[Path]:
    """Write TSV tables and PNG figures for composition, entropy histograms and ROC curves.

    Figures whose data is missing are skipped with a warning.  Re-running on
    the same results rewrites identical tables.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    record = ResultsRecord.read(results_dir)
    out = Path(plot_dir if plot_dir is not None else Path(results_dir) / "plots")
    out.mkdir(parents=True, exist_ok=True)
    runs = record.succeeded
    written: list[Path] = []

    # buffer composition over iterations
    series = {r["seed"]: {c["iteration"]: c["synthetic_fraction"] for c in r.get("composition", [])} for r in runs}
    series = {k: v for k, v in series.items() if v}
    if series:
        seeds = sorted(series)
        iters = sorted(set().union(*series.values()))
        rows = []
        for it in iters:
            vals = [series[s].get(it) for s in seeds]
            present = [v for v in vals if v is not None]
            rows.append([it, _fmt(float(np.mean(present)))] + [_fmt(v) for v in vals])
        path = out / "composition.tsv"
        path.write_text(_tsv(rows, ["iteration", "mean_synthetic_fraction"] + [f"seed_{s}" for s in seeds]))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(iters, [float(r[1]) for r in rows], label="mean")
        ax.set_xlabel("iteration")
        ax.set_ylabel("synthetic fraction of buffer")
        ax.set_ylim(0, 1)
        fig.savefig(out / "composition.png", dpi=100)
        plt.close(fig)
        written += [path, out / "composition.png"]
    else:
        warnings.warn("no buffer composition data; skipping composition plot", stacklevel=2)

    # entropy histograms, summed over seeds
    hists = [r["diagnostics"]["histogram"] for r in runs if r.get("diagnostics", {}).get("histogram")]
    if hists:
        edges = hists[0]["edges"]
        real = np.sum([h["real"] for h in hists], axis=0)
        syn = np.sum([h["synthetic"] for h in hists], axis=0)
        rows = [[_fmt(edges[i]), _fmt(edges[i + 1]), int(real[i]), int(syn[i])] for i in range(len(real))]
        path = out / "entropy_histogram.tsv"
        path.write_text(_tsv(rows, ["bin_low", "bin_high", "real", "synthetic"]))
        fig, ax = plt.subplots(figsize=(6, 4))
        width = np.diff(edges)
        ax.bar(edges[:-1], real, width=width, align="edge", alpha=0.6, label="real")
        ax.bar(edges[:-1], syn, width=width, align="edge", alpha=0.6, label="synthetic")
        ax.set_xlabel("predictive entropy")
        ax.set_ylabel("count")
        ax.legend()
        fig.savefig(out / "entropy_histogram.png", dpi=100)
        plt.close(fig)
        written += [path, out / "entropy_histogram.png"]
    else:
        warnings.warn("no entropy histograms; skipping histogram plot", stacklevel=2)

    rocs = [(r["seed"], r["diagnostics"]["roc"]) for r in runs if r.get("diagnostics", {}).get("roc")]
    if rocs:
        rows = [[seed, _fmt(f), _fmt(t)] for seed, roc in rocs for f, t in zip(roc["fpr"], roc["tpr"])]
        path = out / "roc.tsv"
        path.write_text(_tsv(rows, ["seed", "fpr", "tpr"]))
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for seed, roc in rocs:
            ax.plot(roc["fpr"], roc["tpr"], label=f"seed {seed}")
        ax.plot([0, 1], [0, 1], "k:", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend()
        fig.savefig(out / "roc.png", dpi=100)
        plt.close(fig)
        written += [path, out / "roc.png"]
    else:
        warnings.warn("no ROC data (needs real and synthetic samples); skipping ROC plot", stacklevel=2)
    return written

"""Multi-seed experiment runs and their summaries.

Layout under ``<root>/<output_dir>/<method>/``::

    config.ini        effective configuration (all defaults written out)
    seed_<k>/         metrics.jsonl, timing.jsonl, schedule.csv,
                      checkpoint.bin, final.json
    summary.json      per-metric values, mean and sample std over seeds
    summary.txt       the same, one line per metric

Nothing in the summaries depends on wall-clock time, so a rerun with the
same configuration reproduces them byte for byte.
"""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from hcd import config as config_mod
from hcd import synthbench
from hcd.config import ExperimentConfig
from hcd.trainloop import Trainer, run_seed

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "HCD_OUTPUT_ROOT"
_PERCENT = re.compile(r"(^|_)acc(uracy)?(_|$)|shortcut_gap")


def output_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def run_dir(cfg: ExperimentConfig, root=None) -> Path:
    return output_root(root) / cfg.experiment.output_dir / cfg.experiment.method


def seed_dir(out: Path, seed: int) -> Path:
    return Path(out) / f"seed_{seed}"


@dataclass
class ExperimentResult:
    out_dir: Path
    finals: dict
    summary: dict
    trainers: dict


def _seed_job(cfg_text: str, seed: int, out: str, resume: bool) -> dict:
    cfg = config_mod.loads(cfg_text)
    data = synthbench.generate(cfg.data)
    return run_seed(cfg, seed, data, out, resume=resume).final


def run_experiment(cfg: ExperimentConfig, root=None, resume: bool = False, workers: int = 1,
                   keep_models: bool = False) -> ExperimentResult:
    """Train every seed of ``cfg`` and write the summaries.

    The configuration is validated before anything touches the disk.
    ``resume`` continues each seed from its checkpoint. With ``workers > 1``
    seeds run in separate processes; results are merged in seed order.
    """
    config_mod.validate(cfg)
    cfg = cfg.effective()
    out = run_dir(cfg, root)
    out.mkdir(parents=True, exist_ok=True)
    cfg_text = config_mod.dumps(cfg)
    (out / "config.ini").write_text(cfg_text)

    seeds = list(cfg.experiment.seeds)
    finals, trainers = {}, {}
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            jobs = {s: pool.submit(_seed_job, cfg_text, s, str(seed_dir(out, s)), resume) for s in seeds}
            finals = {s: jobs[s].result() for s in seeds}
    else:
        data = synthbench.generate(cfg.data)
        for s in seeds:
            res = run_seed(cfg, s, data, seed_dir(out, s), resume=resume)
            finals[s] = res.final
            if keep_models:
                trainers[s] = res.trainer
            logger.info("seed %d done: ood accuracy %.4f", s, res.final["ood_accuracy"])

    summary = summarize(cfg.experiment.method, finals)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (out / "summary.txt").write_text(format_summary(summary))
    return ExperimentResult(out, finals, summary, trainers)


def summarize(method: str, finals: dict) -> dict:
    """Mean and sample standard deviation (ddof 1) of each numeric metric."""
    seeds = sorted(finals)
    keys = sorted({k for f in finals.values() for k, v in f.items() if isinstance(v, (int, float))})
    metrics = {}
    for k in keys:
        vals = [finals[s][k] for s in seeds if finals[s].get(k) is not None]
        if not vals:
            continue
        arr = np.asarray(vals, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        metrics[k] = {"mean": float(arr.mean()), "std": std, "values": [float(v) for v in arr]}
    return {"method": method, "seeds": seeds, "metrics": metrics}


def format_summary(summary: dict) -> str:
    """Accuracies and gaps as ``mean (±std)%``; other metrics as plain numbers."""
    lines = [f"method: {summary['method']}",
             "seeds: " + " ".join(str(s) for s in summary["seeds"])]
    for name, m in summary["metrics"].items():
        if _PERCENT.search(name):
            lines.append(f"{name}: {100 * m['mean']:.2f} (±{100 * m['std']:.2f})%")
        else:
            lines.append(f"{name}: {m['mean']:.4f} (±{m['std']:.4f})")
    return "\n".join(lines) + "\n"


def load_trainer(out_dir, seed: int, cfg: Optional[ExperimentConfig] = None) -> Trainer:
    """Rebuild the trainer of ``seed`` from a run directory's checkpoint."""
    out = Path(out_dir)
    cfg = config_mod.load(out / "config.ini") if cfg is None else cfg
    ckpt = seed_dir(out, seed) / "checkpoint.bin"
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    trainer = Trainer(cfg, seed, cfg.data.n_classes)
    trainer.load(ckpt)
    return trainer


def load_schema() -> dict:
    return json.loads((Path(__file__).parent / "output_schema.json").read_text())


def undocumented_metrics(names, schema: Optional[dict] = None) -> list:
    """Metric names that the output schema neither lists nor matches."""
    summary = (schema or load_schema())["summary"]
    patterns = [re.compile(p) for p in summary["patterns"]]
    return [n for n in names if n not in summary["metrics"] and not any(p.match(n) for p in patterns)]

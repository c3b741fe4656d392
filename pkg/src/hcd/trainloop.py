"""One training run: data order, train steps, Adam, evaluation, checkpoints.

A step follows the method's order of operations: backbone features, pooled
latent, channel gate (with dropout), classifier loss on the clean branch,
a StyleMix branch continued from the feature map (VICReg and Gram terms
only), the two MI terms and the sparsity term on the gated latent, the
weighted total, then one Adam update.

Random draws come from independent named streams spawned from the run seed,
so components that a method does not use never shift the draws of the
components it does use.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from hcd import checkpoint
from hcd import diffcore as dc
from hcd import kernelinfo, styleaug
from hcd.config import ExperimentConfig, bandwidth_value
from hcd.diffcore import NumericError, Tape, Tensor
from hcd.gater import EVAL, TRAIN, pool
from hcd.model import HCDModel
from hcd.objective import TERMS, total_loss
from hcd.synthbench import SynthDataset
from hcd.vicreg import vicreg_loss

logger = logging.getLogger(__name__)

STREAMS = ("init_backbone", "init_gate", "init_projector", "data_order", "dropout", "stylemix")


def make_streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(STREAMS, children)}


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimState:
    m: list
    v: list
    step: int = 0
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   0, lr, tuple(betas), eps)


def adam_update(params, grads, state: OptimState) -> OptimState:
    """Bias-corrected Adam, in place. Parameters whose gradient is ``None``
    are skipped entirely (moments untouched)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state must align")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise dc.ShapeError(f"grad shape {g.shape} does not match parameter {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def clip_grad_norm(grads, max_norm: float):
    """Scale all gradients together so their global L2 norm is <= ``max_norm``."""
    sq = 0.0
    for g in grads:
        if g is not None:
            sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = [None if g is None else g * scale for g in grads]
    return grads, norm


# ---------------------------------------------------------------------------
# steps


@dataclass
class StepRecord:
    epoch: int
    step: int
    losses: dict
    weights: dict
    mask_mean: Optional[float] = None
    mask_std: Optional[float] = None
    mi_d: Optional[float] = None
    mi_c: Optional[float] = None
    grad_norm: Optional[float] = None
    aborted: bool = False
    reason: str = ""
    wall_time: float = 0.0

    def to_dict(self, include_time: bool = False) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return d


class Trainer:
    """Model, optimiser state and random streams of one seed."""

    def __init__(self, cfg: ExperimentConfig, seed: int, n_classes: int):
        self.cfg = cfg.effective()
        self.seed = seed
        ex = self.cfg.experiment
        self.method = ex.method
        self.streams = make_streams(seed)
        self.model = HCDModel.build(
            self.streams, n_classes, hidden=self.cfg.model.hidden_channels,
            channels=self.cfg.model.channels, use_gate=self.method == "hcd",
            r=self.cfg.gate.r, p=self.cfg.gate.p, inverted_dropout=self.cfg.gate.inverted_dropout,
            projector_width=self.cfg.model.projector_width)
        self.params = self.model.parameters()
        o = self.cfg.optim
        self.optim = OptimState.zeros_like(self.params, o.lr, (o.beta1, o.beta2), o.eps)
        self.global_step = 0
        self.bandwidth = bandwidth_value(self.cfg)

    def weights_at(self, epoch: int) -> dict:
        if self.method == "erm":
            return {t: 0.0 for t in TERMS}
        return self.cfg.schedule.weights_at(epoch)

    def train_step(self, X: np.ndarray, y: np.ndarray, d: np.ndarray, epoch: int) -> StepRecord:
        n = len(y)
        if n < 2:
            raise ValueError(f"batch size must be >= 2 (kernel losses need pairs), got {n}")
        started = time.perf_counter()
        w = self.weights_at(epoch)
        ex = self.cfg.experiment
        model = self.model
        bufs = {k: v.copy() for k, v in model.buffers().items()}
        for p in self.params:
            p.grad = None
        record = StepRecord(epoch, self.global_step, {}, w)
        try:
            with Tape() as tape:
                H = model.backbone.stem(Tensor(X))
                F = model.backbone.trunk(H)
                z = pool(F)
                gated = model.gate_latent(z, TRAIN, rng=self.streams["dropout"])
                z_hat = z if gated is None else gated.z_hat
                comps = {"cls": dc.cross_entropy(model.backbone.head(z_hat), y)}

                if gated is not None and ex.stylemix and (w["vic"] > 0 or w["gram"] > 0):
                    H_tilde, _ = styleaug.stylemix_batch(H, self.streams["stylemix"], ex.style_eps,
                                                         ex.detach_style_stats)
                    F_tilde = model.backbone.trunk(H_tilde, TRAIN, update=False)
                    styled = model.gate_latent(pool(F_tilde), TRAIN, xi=gated.dropout_realization,
                                               update_stats=False)
                    if w["vic"] > 0:
                        terms = vicreg_loss(model.projector(z_hat), model.projector(styled.z_hat),
                                            self.cfg.vicreg)
                        comps["vic"] = terms.total
                    if w["gram"] > 0:
                        comps["gram"] = styleaug.gram_loss(F, F_tilde)
                if w["mi_c"] > 0:
                    comps["mi_c"] = kernelinfo.mi_class_loss(z_hat, y, self.bandwidth)
                if w["mi_d"] > 0:
                    comps["mi_d"] = kernelinfo.mi_domain_loss(z_hat, d, self.bandwidth)
                if gated is not None and w["sparse"] > 0:
                    comps["sparse"] = kernelinfo.sparse_loss(gated.mask)
                bundle = total_loss(comps, w)
            record.losses = bundle.values()
            if gated is not None:
                record.mask_mean = gated.stats["mask_mean"]
                record.mask_std = gated.stats["mask_std"]
            if "mi_d" in comps:
                record.mi_d = float(comps["mi_d"].data)
            if "mi_c" in comps:
                record.mi_c = -float(comps["mi_c"].data)
            tape.backward(bundle.total)
            tape.clear()
            grads = [p.grad for p in self.params]
            if any(g is not None and not np.isfinite(g).all() for g in grads):
                raise NumericError("non-finite gradient")
            grads, norm = clip_grad_norm(grads, ex.grad_clip)
            record.grad_norm = norm
        except (NumericError, dc.DomainError) as exc:
            if bufs:
                model.load_buffers(bufs)
            for p in self.params:
                p.grad = None
            record.aborted = True
            record.reason = str(exc)
            record.wall_time = time.perf_counter() - started
            logger.warning("step %d aborted: %s", self.global_step, exc)
            self.global_step += 1
            return record
        adam_update(self.params, grads, self.optim)
        self.global_step += 1
        record.wall_time = time.perf_counter() - started
        return record

    def epoch_order(self, n: int) -> np.ndarray:
        return self.streams["data_order"].permutation(n)

    def run_epoch(self, data: SynthDataset, epoch: int) -> list:
        bs = self.cfg.optim.batch_size
        order = self.epoch_order(len(data))
        records = []
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            records.append(self.train_step(data.images[idx], data.y[idx], data.d[idx], epoch))
        return records

    # -- checkpoint state -------------------------------------------------

    def state_arrays(self) -> dict:
        arrays = {name: p.data for name, p in self.model.named_parameters()}
        for i, (m, v) in enumerate(zip(self.optim.m, self.optim.v)):
            arrays[f"adam_m.{i}"] = m
            arrays[f"adam_v.{i}"] = v
        arrays.update(self.model.buffers())
        return arrays

    def state_meta(self, epoch: int) -> dict:
        return {"epoch": epoch, "global_step": self.global_step, "adam_step": self.optim.step,
                "seed": self.seed, "method": self.method,
                "rng": {k: g.bit_generator.state for k, g in self.streams.items()}}

    def save(self, path, epoch: int) -> None:
        checkpoint.save(path, self.state_arrays(), self.state_meta(epoch))

    def load(self, path) -> int:
        arrays, meta = checkpoint.load(path)
        for name, p in self.model.named_parameters():
            p.data = arrays[name]
        for i in range(len(self.params)):
            self.optim.m[i] = arrays[f"adam_m.{i}"]
            self.optim.v[i] = arrays[f"adam_v.{i}"]
        if self.model.buffers():
            self.model.load_buffers(arrays)
        self.optim.step = meta["adam_step"]
        self.global_step = meta["global_step"]
        for k, state in meta["rng"].items():
            self.streams[k].bit_generator.state = state
        return int(meta["epoch"])


# ---------------------------------------------------------------------------
# evaluation


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def predictions(model, data: SynthDataset, batch_size: int = 256):
    """Eval-mode predicted labels plus the concatenated masks and latents."""
    preds, masks, latents = [], [], []
    for sl in _batches(len(data), batch_size):
        out = model.predict_batch(data.images[sl])
        preds.append(np.argmax(out.logits, axis=1))
        if out.mask is not None:
            masks.append(out.mask)
        latents.append(out.z_hat)
    mask = np.concatenate(masks) if masks else None
    return np.concatenate(preds), mask, np.concatenate(latents)


def accuracy(model, data: SynthDataset, batch_size: int = 256) -> float:
    pred, _, _ = predictions(model, data, batch_size)
    return float(np.mean(pred == data.y))


def evaluate(model, data: SynthDataset, batch_size: int = 256, mi_batch_size: int = 32,
             bandwidth="median") -> dict:
    """Accuracy overall / per domain / per class, mean mask, and MI(z_hat; d).

    The MI estimate is the mean over consecutive chunks of ``mi_batch_size``
    samples (chunks smaller than 2 are skipped). Domains or classes absent
    from ``data`` are omitted rather than reported as NaN.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred, mask, latent = predictions(model, data, batch_size)
    correct = pred == data.y
    out = {"accuracy": float(np.mean(correct))}
    for k in np.unique(data.d):
        out[f"acc_domain_{int(k)}"] = float(np.mean(correct[data.d == k]))
    for k in np.unique(data.y):
        out[f"acc_class_{int(k)}"] = float(np.mean(correct[data.y == k]))
    if mask is not None:
        out["mask_mean"] = float(mask.mean())
    mis = []
    for sl in _batches(len(data), mi_batch_size):
        if sl.stop - sl.start < 2:
            continue
        mis.append(float(kernelinfo.mi_domain_loss(Tensor(latent[sl]), data.d[sl], bandwidth).data))
    out["mi_zd"] = float(np.mean(mis)) if mis else 0.0
    return out


# ---------------------------------------------------------------------------
# full run for one seed


@dataclass
class SeedResult:
    seed: int
    final: dict
    epochs: list = field(default_factory=list)
    trainer: Optional[Trainer] = None


def _epoch_summary(epoch: int, weights: dict, records: list) -> dict:
    ok = [r for r in records if not r.aborted]
    summ = {"type": "epoch", "epoch": epoch, "weights": weights, "steps": len(records),
            "aborted": len(records) - len(ok)}
    for key in ("cls", "vic", "gram", "mi_c", "mi_d", "sparse", "total"):
        vals = [r.losses[key] for r in ok if r.losses.get(key) is not None]
        summ[f"loss_{key}"] = float(np.mean(vals)) if vals else None
    masks = [r.mask_mean for r in ok if r.mask_mean is not None]
    summ["mask_mean"] = float(np.mean(masks)) if masks else None
    return summ


def final_metrics(model, id_test: SynthDataset, ood_test: SynthDataset, cfg: ExperimentConfig) -> dict:
    bs = cfg.experiment.eval_batch_size
    mi_bs = cfg.optim.batch_size
    bw = bandwidth_value(cfg)
    id_m = evaluate(model, id_test, bs, mi_bs, bw)
    ood_m = evaluate(model, ood_test, bs, mi_bs, bw)
    out = {f"id_{k}": v for k, v in id_m.items()}
    out.update({f"ood_{k}": v for k, v in ood_m.items()})
    out["shortcut_gap"] = id_m["accuracy"] - ood_m["accuracy"]
    return out


def run_seed(cfg: ExperimentConfig, seed: int, data, out_dir, resume: bool = False) -> SeedResult:
    """Train one seed, writing ``metrics.jsonl``, ``timing.jsonl``,
    ``schedule.csv``, ``checkpoint.bin`` and ``final.json`` under ``out_dir``.

    With ``resume`` the run continues after the last completed epoch stored
    in the checkpoint; metrics lines past that epoch are discarded.
    """
    train, id_test, ood_test = data
    cfg = cfg.effective()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.bin"
    metrics_path, timing_path = out / "metrics.jsonl", out / "timing.jsonl"
    trainer = Trainer(cfg, seed, cfg.data.n_classes)

    start_epoch = 0
    epochs_log = []
    if resume and ckpt.exists():
        done = trainer.load(ckpt)
        start_epoch = done + 1
        kept = []
        if metrics_path.exists():
            for line in metrics_path.read_text().splitlines():
                rec = json.loads(line)
                if rec.get("type") != "final" and rec["epoch"] <= done:
                    kept.append(line)
                    if rec["type"] == "epoch":
                        epochs_log.append(rec)
        metrics_path.write_text("".join(line + "\n" for line in kept))
        if timing_path.exists():
            times = [ln for ln in timing_path.read_text().splitlines() if json.loads(ln)["epoch"] <= done]
            timing_path.write_text("".join(ln + "\n" for ln in times))
        logger.info("seed %d: resuming after epoch %d", seed, done)
    else:
        metrics_path.write_text("")
        timing_path.write_text("")

    with open(metrics_path, "a") as mf, open(timing_path, "a") as tf:
        for epoch in range(start_epoch, cfg.experiment.epochs):
            weights = trainer.weights_at(epoch)
            records = trainer.run_epoch(train, epoch)
            for r in records:
                mf.write(json.dumps({"type": "step", **r.to_dict()}, sort_keys=True) + "\n")
                tf.write(json.dumps({"epoch": r.epoch, "step": r.step, "wall_time": r.wall_time}) + "\n")
            summ = _epoch_summary(epoch, weights, records)
            epochs_log.append(summ)
            mf.write(json.dumps(summ, sort_keys=True) + "\n")
            mf.flush()
            tf.flush()
            trainer.save(ckpt, epoch)
            logger.info("seed %d epoch %d: cls %.4f mask %s", seed, epoch,
                        summ["loss_cls"] or float("nan"), summ["mask_mean"])
        final = final_metrics(trainer.model, id_test, ood_test, cfg)
        final["train_accuracy"] = accuracy(trainer.model, train, cfg.experiment.eval_batch_size)
        final["mask_mean_first_epoch"] = epochs_log[0]["mask_mean"] if epochs_log else None
        final["mask_mean_final_epoch"] = epochs_log[-1]["mask_mean"] if epochs_log else None
        mf.write(json.dumps({"type": "final", **final}, sort_keys=True) + "\n")

    (out / "schedule.csv").write_text(schedule_csv(epochs_log))
    (out / "final.json").write_text(json.dumps(final, sort_keys=True, indent=1) + "\n")
    return SeedResult(seed, final, epochs_log, trainer)


def schedule_csv(epochs_log: list) -> str:
    lines = ["epoch," + ",".join(TERMS)]
    for e in epochs_log:
        lines.append(f"{e['epoch']}," + ",".join(repr(e["weights"][t]) for t in TERMS))
    return "\n".join(lines) + "\n"

"""Self-certification of the loss stack.

Three suites, each deterministic:

``gradients``
    central-difference checks of every objective term and the gate forward
    pass on random configurations;
``entropy``
    matrix entropy against an eigenvalue oracle, plus its bounds;
``oracles``
    MI exact zeros, StyleMix statistics transfer, and the trainer
    against an independently written plain-classifier loop.

``mutate=True`` runs everything with the gradient of the domain-MI term
sign-flipped; the gradient suite must then fail.
"""

from __future__ import annotations

import math
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from hcd import diffcore as dc
from hcd import kernelinfo, oracles, styleaug, synthbench, vicreg
from hcd.config import ExperimentConfig
from hcd.diffcore import Tensor
from hcd.gater import TRAIN, GateParams, compute_mask, gate_forward, sample_dropout
from hcd.trainloop import Trainer

GRAD_TOL = 1e-4
GRAD_STEP = 1e-5
GRAD_CONFIGS = 50
ENTROPY_TOL = 1e-10
ENTROPY_CASES = 1000
MI_CASES = 1000
MI_FLOOR = -1e-8
MI_ZERO_TOL = 1e-10
STYLE_BATCHES = 100
ERM_STEPS = 100


@dataclass
class SuiteResult:
    name: str
    checks: list = field(default_factory=list)

    def add(self, label: str, ok: bool, detail: str) -> None:
        self.checks.append((label, bool(ok), detail))

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def lines(self) -> list:
        head = f"[{'PASS' if self.passed else 'FAIL'}] {self.name}"
        return [head] + [f"    {'ok  ' if ok else 'FAIL'} {label}: {detail}" for label, ok, detail in self.checks]


# ---------------------------------------------------------------------------
# gradient certification


def _labels(rng, n, k):
    y = np.arange(n) % k
    rng.shuffle(y)
    return y


def _cls_case(rng):
    n, dim, k = int(rng.integers(4, 11)), int(rng.integers(3, 9)), int(rng.integers(2, 5))
    W, b = Tensor(rng.normal(size=(dim, k))), Tensor(rng.normal(size=k))
    y = _labels(rng, n, k)
    return rng.normal(size=(n, dim)), lambda z: dc.cross_entropy(z @ W + b, y)


def _vic_case(rng):
    n, dim = int(rng.integers(4, 11)), int(rng.integers(3, 9))
    scale = rng.choice([0.3, 2.5])  # variance hinge active or inactive
    z_tilde = Tensor(rng.normal(size=(n, dim)) * scale)
    return rng.normal(size=(n, dim)) * scale, lambda z: vicreg.vicreg_loss(z, z_tilde).total


def _gram_case(rng):
    n, c, h = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    target = Tensor(rng.normal(size=(n, c, h, h)))
    return rng.normal(size=(n, c, h, h)), lambda F: styleaug.gram_loss(F, target)


def _mi_case(loss_name, rule):
    def build(rng):
        n, dim, k = int(rng.integers(6, 13)), int(rng.integers(2, 7)), int(rng.integers(2, 4))
        labels = _labels(rng, n, k)
        z0 = rng.normal(size=(n, dim))
        # the median rule treats the bandwidth as a constant: hold it at z0's value
        bw = kernelinfo.median_bandwidth(oracles.kernel_sqdist(z0)) if rule == "median" else rule
        return z0, lambda z: getattr(kernelinfo, loss_name)(z, labels, bw)
    return build


def _gate_params(rng, dim):
    r = int(rng.choice([d for d in (1, 2, 4) if dim % d == 0]))
    params = GateParams.init(dim, r=r, p=0.2, rng=rng)
    params.bn.scale.data = rng.uniform(0.5, 2.0, size=params.bn.scale.shape)
    params.bn.shift.data = rng.normal(size=params.bn.shift.shape) * 0.5
    return params


def _sparse_case(rng):
    n, dim = int(rng.integers(4, 11)), int(rng.choice([4, 8]))
    params = _gate_params(rng, dim)
    return rng.normal(size=(n, dim)), lambda z: kernelinfo.sparse_loss(
        compute_mask(z, params, TRAIN, update_stats=False))


def _gate_case(rng):
    n, dim = int(rng.integers(4, 11)), int(rng.choice([4, 8]))
    params = _gate_params(rng, dim)
    xi = sample_dropout((n, dim), params.p, rng)
    readout = Tensor(rng.normal(size=(n, dim)))

    def f(z):
        out = gate_forward(z, params, TRAIN, update_stats=False, xi=xi)
        return dc.sum(out.z_hat * readout)
    return rng.normal(size=(n, dim)), f


GRAD_TARGETS = {
    "cls": _cls_case,
    "vic": _vic_case,
    "gram": _gram_case,
    "mi_c": _mi_case("mi_class_loss", "median"),
    "mi_d": _mi_case("mi_domain_loss", "median"),
    "mi_c[median_grad]": _mi_case("mi_class_loss", kernelinfo.MEDIAN_GRAD),
    "mi_d[median_grad]": _mi_case("mi_domain_loss", kernelinfo.MEDIAN_GRAD),
    "sparse": _sparse_case,
    "gate": _gate_case,
}


def gradient_suite(configs: int = GRAD_CONFIGS) -> SuiteResult:
    res = SuiteResult("gradients")
    for name, build in GRAD_TARGETS.items():
        worst, fails = 0.0, 0
        for k in range(configs):
            rng = np.random.default_rng([k, len(name), sum(map(ord, name))])
            x, f = build(rng)
            rep = dc.grad_check(f, x, h=GRAD_STEP, tol=GRAD_TOL)
            worst = max(worst, rep.max_rel_err)
            fails += not rep.passed
        res.add(name, fails == 0, f"{configs - fails}/{configs} configs, worst rel err {worst:.2e}")
    return res


# ---------------------------------------------------------------------------
# entropy


def entropy_suite(cases: int = ENTROPY_CASES) -> SuiteResult:
    res = SuiteResult("entropy")
    rng = np.random.default_rng(20240)
    worst, bound_violations = 0.0, 0
    for _ in range(cases):
        n = int(rng.integers(1, 33))
        k = oracles.random_kernel(rng, n)
        s = float(kernelinfo.matrix_entropy(kernelinfo.KernelMatrix(Tensor(k))).data)
        worst = max(worst, abs(s - oracles.eig_entropy(k)))
        bound_violations += not (-1e-12 <= s <= math.log2(n) + 1e-12)
    res.add("eigenvalue oracle", worst < ENTROPY_TOL, f"{cases} kernels, max |diff| {worst:.2e}")
    res.add("0 <= S <= log2 n", bound_violations == 0, f"{bound_violations} violations")
    return res


# ---------------------------------------------------------------------------
# oracles


def mi_sign_scan(cases: int = MI_CASES, seed: int = 777, n_range=(2, 33), dim_range=(1, 9)) -> np.ndarray:
    """Domain-MI values on random ``(z, d)`` draws with ``d`` independent of ``z``.

    The order-2 estimator is not subadditive in general: with few feature
    dimensions a minority domain sitting among the majority can push the
    joint entropy above the sum of the marginals, giving small negative
    values. Callers decide what to make of the minimum.
    """
    rng = np.random.default_rng(seed)
    out = np.empty(cases)
    for i in range(cases):
        n, dim = int(rng.integers(*n_range)), int(rng.integers(*dim_range))
        z = rng.normal(size=(n, dim)) * rng.uniform(0.01, 10.0)
        d = rng.integers(0, int(rng.integers(1, 5)), size=n)
        out[i] = float(kernelinfo.mi_domain_loss(Tensor(z), d).data)
    return out


def mi_zero_checks(res: SuiteResult) -> None:
    rng = np.random.default_rng(778)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 33))
        z = rng.normal(size=(n, 3))
        worst = max(worst, abs(float(kernelinfo.mi_domain_loss(Tensor(z), np.zeros(n, int)).data)))
        const = np.tile(rng.normal(size=3), (n, 1))
        d = rng.integers(0, 3, size=n)
        worst = max(worst, abs(float(kernelinfo.mi_domain_loss(Tensor(const), d).data)))
    res.add("MI exact zeros", worst <= MI_ZERO_TOL, f"single domain / constant z, max |MI| {worst:.2e}")


def style_checks(res: SuiteResult, batches: int) -> None:
    rng = np.random.default_rng(4242)
    eps = styleaug.DEFAULT_EPS
    worst_mu = worst_sd = 0.0
    for _ in range(batches):
        n, c, h, w = (int(v) for v in rng.integers(2, 7, size=4))
        F = rng.normal(size=(n, c, h, w)) * rng.uniform(0.1, 5.0, size=(n, c, 1, 1)) \
            + rng.normal(size=(n, c, 1, 1)) * 3.0
        perm = rng.permutation(n)
        out = styleaug.stylemix(Tensor(F), perm, eps).data
        mu, sd = F.mean(axis=(2, 3)), F.std(axis=(2, 3))
        worst_mu = max(worst_mu, float(np.max(np.abs(out.mean(axis=(2, 3)) - mu[perm]) / (1 + np.abs(mu[perm])))))
        expect = sd[perm] * sd / (sd + eps)
        worst_sd = max(worst_sd, float(np.max(np.abs(out.std(axis=(2, 3)) - expect))))
    res.add("StyleMix mean transfer", worst_mu <= 1e-6, f"{batches} batches, max scaled err {worst_mu:.2e}")
    res.add("StyleMix std transfer", worst_sd <= 1e-6, f"{batches} batches, max err {worst_sd:.2e}")


def erm_equivalence(seed: int = 0, steps: int = ERM_STEPS, n_train: int = 400):
    """Run the trainer with every auxiliary term off and the reference loop;
    return the names of parameters that differ in any bit."""
    cfg = ExperimentConfig().with_overrides(experiment={"method": "erm"},
                                            data={"n_train": n_train, "n_test": 1})
    data = synthbench.generate_split(cfg.data, "train")
    tr = Trainer(cfg, seed, cfg.data.n_classes)
    done, epoch = 0, 0
    while done < steps:
        order = tr.epoch_order(len(data))
        for start in range(0, len(order), cfg.optim.batch_size):
            idx = order[start:start + cfg.optim.batch_size]
            if len(idx) < 2:
                continue
            tr.train_step(data.images[idx], data.y[idx], data.d[idx], epoch)
            done += 1
            if done == steps:
                break
        epoch += 1
    ref = oracles.erm_reference(seed, data.images, data.y, steps, batch_size=cfg.optim.batch_size,
                                lr=cfg.optim.lr, grad_clip=cfg.experiment.grad_clip)
    return [name for name, p in tr.model.named_parameters() if not np.array_equal(ref[name], p.data)]


def oracle_suite(style_batches: int = STYLE_BATCHES,
                 erm_steps: int = ERM_STEPS) -> SuiteResult:
    res = SuiteResult("oracles")
    mi_zero_checks(res)
    style_checks(res, style_batches)
    diff = erm_equivalence(steps=erm_steps)
    res.add("ERM loop bit-identical", not diff,
            f"{erm_steps} steps, " + ("all parameters equal" if not diff else "differs: " + ", ".join(diff)))
    return res


# ---------------------------------------------------------------------------


def run(mutate: bool = False, quick: bool = False) -> tuple:
    """Return ``(passed, report_text)``. ``quick`` shrinks every suite."""
    scale = 10 if quick else 1
    ctx = oracles.flipped_mi_domain_gradient() if mutate else nullcontext()
    with ctx:
        suites = [gradient_suite(max(GRAD_CONFIGS // scale, 2)),
                  entropy_suite(ENTROPY_CASES // scale),
                  oracle_suite(STYLE_BATCHES // scale, ERM_STEPS // scale)]
    lines = [f"selftest ({'mutation: mi_d gradient sign flipped' if mutate else 'clean build'})"]
    for s in suites:
        lines += s.lines()
    ok = all(s.passed for s in suites)
    lines.append(f"result: {'PASS' if ok else 'FAIL'}")
    return ok, "\n".join(lines) + "\n"

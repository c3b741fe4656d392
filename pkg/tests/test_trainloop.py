import json

import numpy as np
import pytest

from hcd import checkpoint, synthbench
from hcd.config import ExperimentConfig
from hcd.diffcore import Tensor
from hcd.model import EvalOutput
from hcd.selftest import erm_equivalence
from hcd.synthbench import SynthSpec
from hcd.trainloop import OptimState, Trainer, adam_update, evaluate, run_seed


def small_cfg(method="hcd", epochs=2, **data):
    spec = {"n_train": 64, "n_test": 48, **data}
    return ExperimentConfig().with_overrides(
        experiment={"method": method, "epochs": epochs, "seeds": (0,)},
        model={"projector_width": 16}, data=spec).effective()


@pytest.fixture(scope="module")
def small_data():
    return synthbench.generate(small_cfg().data)


# -- Adam -----------------------------------------------------------------------

def test_adam_first_step_closed_form():
    p = Tensor([1.0])
    state = OptimState.zeros_like([p], lr=2e-4)
    adam_update([p], [np.array([1.0])], state)
    assert p.data[0] == 1.0 - 2e-4 * 1.0 / (1.0 + 1e-8)
    assert abs((1.0 - p.data[0]) - 2e-4) < 1e-11


def test_adam_two_steps_by_hand():
    p = Tensor([0.5, -1.0, 2.0])
    g1, g2 = np.array([0.3, -0.2, 1.5]), np.array([-0.1, 0.4, 0.7])
    state = OptimState.zeros_like([p], lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
    adam_update([p], [g1], state)
    adam_update([p], [g2], state)

    expected = []
    for i, x in enumerate([0.5, -1.0, 2.0]):
        m = v = 0.0
        for t, g in ((1, g1[i]), (2, g2[i])):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 1e-3 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
        expected.append(x)
    np.testing.assert_allclose(p.data, expected, atol=1e-15, rtol=0)
    assert state.step == 2


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.arange(4.0))
    state = OptimState.zeros_like([p])
    adam_update([p], [np.zeros(4)], state)
    np.testing.assert_array_equal(p.data, np.arange(4.0))


def test_adam_skips_missing_gradients_and_checks_shapes():
    a, b = Tensor([1.0]), Tensor([2.0])
    state = OptimState.zeros_like([a, b])
    adam_update([a, b], [None, np.array([1.0])], state)
    assert a.data[0] == 1.0 and state.m[0][0] == 0.0
    with pytest.raises(ValueError):
        adam_update([a], [np.ones(1), np.ones(1)], state)


# -- steps ----------------------------------------------------------------------

def _batch(data, n=16):
    train = data[0]
    return train.images[:n], train.y[:n], train.d[:n]


def test_batch_of_one_is_rejected(small_data):
    tr = Trainer(small_cfg(), 0, 2)
    X, y, d = _batch(small_data, 1)
    with pytest.raises(ValueError, match="batch size"):
        tr.train_step(X, y, d, 0)


def test_identical_steps_from_cloned_state(small_data):
    X, y, d = _batch(small_data)
    recs = []
    for _ in range(2):
        tr = Trainer(small_cfg(), 3, 2)
        recs.append([tr.train_step(X, y, d, e).to_dict() for e in (0, 1)])
        recs[-1].append({n: p.data.tobytes() for n, p in tr.model.named_parameters()})
    assert recs[0] == recs[1]


def test_step_record_contents(small_data):
    tr = Trainer(small_cfg(), 0, 2)
    rec = tr.train_step(*_batch(small_data), 1)
    assert not rec.aborted
    assert set(rec.losses) == {"cls", "vic", "gram", "mi_c", "mi_d", "sparse", "total"}
    assert rec.weights["mi_d"] == 5.0
    assert 0 < rec.mask_mean < 1 and rec.mi_d is not None and rec.grad_norm > 0
    json.dumps(rec.to_dict())


def test_erm_trainer_matches_independent_loop():
    assert erm_equivalence(seed=1, steps=12, n_train=96) == []


def test_abort_leaves_state_untouched(small_data):
    tr = Trainer(small_cfg(), 0, 2)
    tr.train_step(*_batch(small_data), 0)
    params = {n: p.data.copy() for n, p in tr.model.named_parameters()}
    moments = [m.copy() for m in tr.optim.m] + [v.copy() for v in tr.optim.v]
    bufs = {k: v.copy() for k, v in tr.model.buffers().items()}
    step = tr.optim.step
    X, y, d = _batch(small_data)
    X = X.copy()
    X[3, 0, 5, 5] = np.nan
    rec = tr.train_step(X, y, d, 0)
    assert rec.aborted and rec.reason
    for n, p in tr.model.named_parameters():
        assert p.data.tobytes() == params[n].tobytes()
        assert p.grad is None
    for a, b in zip(tr.optim.m + tr.optim.v, moments):
        assert a.tobytes() == b.tobytes()
    assert {k: v.tobytes() for k, v in tr.model.buffers().items()} == {k: v.tobytes() for k, v in bufs.items()}
    assert tr.optim.step == step


def test_erm_trainer_has_no_gate():
    tr = Trainer(small_cfg("erm"), 0, 2)
    assert tr.model.gate is None and tr.model.projector is None
    assert set(tr.weights_at(5).values()) == {0.0}


# -- evaluation -----------------------------------------------------------------

def test_untrained_models_score_near_chance():
    spec = SynthSpec(n_train=8, n_test=400, rho_train=0.5)
    test = synthbench.generate_split(spec, "id_test")
    for seed in range(20):
        acc = evaluate(Trainer(small_cfg(), seed, 2).model, test)["accuracy"]
        assert 0.35 <= acc <= 0.65


class DotReader:
    """Reads the class from the two brightest pixels of the channel mean.

    The colour cast sums to zero over channels, so the mean removes it.
    """

    gate = None

    def predict_batch(self, images):
        gray = images.mean(axis=1)
        n, h, w = gray.shape
        logits = np.zeros((n, 2))
        for i in range(n):
            top = np.argsort(gray[i].ravel())[-2:]
            (r0, c0), (r1, c1) = divmod(int(top[0]), w), divmod(int(top[1]), w)
            logits[i, 0 if r0 == r1 else 1] = 1.0
        return EvalOutput(logits, None, logits.copy())


@pytest.mark.parametrize("split", synthbench.SPLITS)
def test_causal_oracle_is_perfect_on_every_domain(split):
    ds = synthbench.generate_split(SynthSpec(n_train=400, n_test=400), split)
    m = evaluate(DotReader(), ds)
    assert m["accuracy"] == 1.0
    assert m["acc_domain_0"] == 1.0 and m["acc_domain_1"] == 1.0


def test_missing_domain_is_omitted(small_data):
    test = small_data[1]
    only0 = test.subset(np.flatnonzero(test.d == 0))
    m = evaluate(DotReader(), only0)
    assert "acc_domain_0" in m and "acc_domain_1" not in m
    with pytest.raises(ValueError):
        evaluate(DotReader(), test.subset(np.array([], dtype=int)))


# -- runs and checkpoints -------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, small_data):
    tr = Trainer(small_cfg(), 0, 2)
    tr.run_epoch(small_data[0], 0)
    tr.save(tmp_path / "c.bin", 0)
    other = Trainer(small_cfg(), 5, 2)
    assert other.load(tmp_path / "c.bin") == 0
    assert tr.state_arrays().keys() == other.state_arrays().keys()
    for k, v in tr.state_arrays().items():
        assert v.tobytes() == other.state_arrays()[k].tobytes()
    assert other.optim.step == tr.optim.step
    assert all(other.streams[k].random() == tr.streams[k].random() for k in tr.streams)


def test_checkpoint_format_rejects_garbage(tmp_path):
    blob = checkpoint.dumps({"a": np.arange(3.0)}, {"x": 1})
    arrays, meta = checkpoint.loads(blob)
    assert meta == {"x": 1} and arrays["a"].tolist() == [0.0, 1.0, 2.0]
    with pytest.raises(ValueError):
        checkpoint.loads(b"garbage" + blob)


def test_run_seed_is_deterministic_and_resumable(tmp_path, small_data):
    cfg = small_cfg(epochs=3)
    a = run_seed(cfg, 0, small_data, tmp_path / "a")
    b = run_seed(cfg, 0, small_data, tmp_path / "b")
    for name in ("metrics.jsonl", "final.json", "schedule.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    # stop after one epoch, then resume to the end
    run_seed(small_cfg(epochs=1), 0, small_data, tmp_path / "c")
    run_seed(cfg, 0, small_data, tmp_path / "c", resume=True)
    for name in ("metrics.jsonl", "final.json", "schedule.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()
    assert a.final == b.final
    assert len((tmp_path / "a" / "timing.jsonl").read_text().splitlines()) == 3 * 2


def test_schedule_log_lists_weights_per_epoch(tmp_path, small_data):
    run_seed(small_cfg(epochs=3), 0, small_data, tmp_path)
    rows = (tmp_path / "schedule.csv").read_text().splitlines()
    assert rows[0] == "epoch,vic,gram,mi_c,mi_d,sparse"
    assert rows[1].split(",")[4] == "0.5" and rows[2].split(",")[4] == "5.0"

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hcd import diffcore as dc
from hcd import objective as ob
from hcd.diffcore import Tape, Tensor
from hcd.objective import CurriculumSchedule, TermSchedule


def test_reported_schedule_values():
    s = CurriculumSchedule(20)
    assert ob.weight_at(s, "mi_d", 0) == 0.5
    assert ob.weight_at(s, "mi_d", 1) == 5.0
    assert ob.weight_at(s, "mi_d", 3) == 5.0
    assert ob.weight_at(s, "sparse", 0) == 0.005
    assert ob.weight_at(s, "sparse", 1) == 0.005
    assert ob.weight_at(s, "sparse", 19) == pytest.approx(0.1, abs=1e-15)
    for term in ("vic", "gram", "mi_c"):
        assert {ob.weight_at(s, term, t) for t in range(20)} == {1.0}


def test_sparsity_ramp_is_linear():
    s = CurriculumSchedule(20)
    w = [s.weight_at("sparse", t) for t in range(2, 20)]
    np.testing.assert_allclose(np.diff(w), np.full(17, 0.095 / 18), rtol=1e-10)


def test_first_epoch_weights_are_minimal():
    s = CurriculumSchedule(20)
    for term in ob.TERMS:
        assert s.weight_at(term, 0) == min(s.weight_at(term, t) for t in range(20))


@given(st.integers(1, 40), st.floats(0, 10), st.floats(0, 10), st.integers(0, 45), st.sampled_from(ob.RAMPS))
def test_weights_nonnegative_and_nondecreasing(epochs, a, b, act, ramp):
    lo, hi = min(a, b), max(a, b)
    s = CurriculumSchedule(epochs, {"sparse": TermSchedule(lo, hi, act, ramp)})
    w = [s.weight_at("sparse", t) for t in range(epochs)]
    assert all(x >= 0 for x in w)
    assert all(x <= y for x, y in zip(w, w[1:]))


def test_schedule_round_trips_exactly():
    s = CurriculumSchedule(13, {"mi_d": TermSchedule(0.1, 0.7, 3, "linear"), "vic": ob.constant(0.3)})
    again = CurriculumSchedule.from_dict(json.loads(json.dumps(s.to_dict())))
    assert again == s
    assert [again.weights_at(t) for t in range(13)] == [s.weights_at(t) for t in range(13)]


def test_schedule_errors():
    s = CurriculumSchedule(5)
    with pytest.raises(ob.UnknownTermError):
        ob.weight_at(s, "beta3", 0)
    with pytest.raises(ValueError):
        ob.weight_at(s, "mi_d", 5)
    with pytest.raises(ob.UnknownTermError):
        CurriculumSchedule(5, {"bogus": ob.constant(1.0)})
    with pytest.raises(ValueError):
        TermSchedule(1.0, 0.5)
    with pytest.raises(ValueError):
        TermSchedule(0.0, 1.0, 0, "cosine")


def test_zeroed_schedule():
    assert set(CurriculumSchedule(4).zeroed().weights_at(2).values()) == {0.0}


# -- total loss -----------------------------------------------------------------

def _unit():
    return {name: Tensor(1.0) for name in ob.COMPONENTS}


def test_total_examples():
    comps = {name: Tensor(v) for name, v in zip(ob.COMPONENTS, [0.7, 2, 3, 4, 5, 6])}
    assert float(ob.total_loss(comps, {t: 0.0 for t in ob.TERMS}).total.data) == 0.7
    assert float(ob.total_loss(_unit(), {t: 1.0 for t in ob.TERMS}).total.data) == 6.0


@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6), st.lists(st.floats(0, 10), min_size=5, max_size=5))
def test_total_matches_scalar_recombination(vals, ws):
    comps = {name: Tensor(v) for name, v in zip(ob.COMPONENTS, vals)}
    weights = dict(zip(ob.TERMS, ws))
    bundle = ob.total_loss(comps, weights)
    expected = vals[0] + sum(w * v for w, v in zip(ws, vals[1:]))
    assert float(bundle.total.data) == pytest.approx(expected, abs=1e-12)
    assert bundle.recompute() == pytest.approx(float(bundle.total.data), abs=1e-12)


def test_total_errors():
    with pytest.raises(ob.NonFiniteLossError) as err:
        ob.total_loss({"cls": Tensor(1.0), "mi_d": Tensor(np.nan)}, {"mi_d": 1.0})
    assert err.value.term == "mi_d"
    with pytest.raises(ob.UnknownTermError):
        ob.total_loss({"cls": Tensor(1.0), "hsic": Tensor(1.0)}, {})
    with pytest.raises(ValueError):
        ob.total_loss({"vic": Tensor(1.0)}, {"vic": 1.0})


def test_gradient_additivity():
    rng = np.random.default_rng(0)
    theta = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    target = Tensor(rng.normal(size=(4, 3)))

    def terms(t):
        return {"cls": dc.frobenius_sq(t - target), "vic": dc.sum(dc.exp(t * 0.3)),
                "gram": dc.frobenius_sq(t @ t.T), "mi_c": dc.sum(dc.sigmoid(t)),
                "mi_d": dc.sum(dc.square(dc.sum(t, axis=1))), "sparse": dc.mean(t)}

    weights = dict(zip(ob.TERMS, [0.3, 1.7, 0.5, 5.0, 0.005]))
    theta.grad = None
    with Tape() as tape:
        total = ob.total_loss(terms(theta), weights).total
    tape.backward(total)
    joint = theta.grad.copy()

    expected = np.zeros_like(joint)
    for name in ob.COMPONENTS:
        theta.grad = None
        with Tape() as tape:
            single = terms(theta)[name]
        tape.backward(single)
        expected += (1.0 if name == "cls" else weights[name]) * theta.grad
    np.testing.assert_allclose(joint, expected, rtol=1e-12, atol=1e-12)

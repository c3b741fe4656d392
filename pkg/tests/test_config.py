from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hcd import config as cfgmod
from hcd.config import ConfigError, ExperimentConfig
from hcd.objective import CurriculumSchedule, TermSchedule


def test_defaults_round_trip():
    cfg = ExperimentConfig().effective()
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg
    assert cfgmod.dumps(cfgmod.loads(cfgmod.dumps(cfg))) == cfgmod.dumps(cfg)


@given(st.sampled_from(cfgmod.METHODS), st.lists(st.integers(0, 99), min_size=1, max_size=5, unique=True),
       st.integers(1, 50), st.floats(1e-6, 1.0), st.floats(0.0, 0.99), st.floats(0.0, 1.0),
       st.floats(0, 5), st.integers(0, 10), st.booleans())
def test_round_trip(method, seeds, epochs, lr, p, rho, mi_d, act, faithful):
    cfg = ExperimentConfig().with_overrides(
        experiment={"method": method, "seeds": tuple(seeds), "epochs": epochs, "literal": faithful},
        optim={"lr": lr}, gate={"p": p}, data={"rho_train": rho})
    terms = dict(cfg.schedule.terms)
    terms["mi_d"] = TermSchedule(mi_d / 2, mi_d, act, "step")
    cfg = replace(cfg, schedule=CurriculumSchedule(epochs, terms))
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


def test_partial_file_takes_defaults():
    cfg = cfgmod.loads("[optim]\nlr = 0.001\n[schedule]\nsparse = 0.01, 0.2, 3, linear\n")
    assert cfg.optim.lr == 0.001
    assert cfg.optim.batch_size == 32
    assert cfg.schedule.terms["sparse"] == TermSchedule(0.01, 0.2, 3, "linear")
    assert cfg.schedule.terms["mi_d"] == TermSchedule(0.5, 5.0, 1, "step")


@pytest.mark.parametrize("text, key", [
    ("[optim]\nlr = -0.1\n", "optim.lr"),
    ("[optim]\nmomentum = 0.9\n", "optim.momentum"),
    ("[optimizer]\nlr = 0.1\n", "optimizer"),
    ("[experiment]\nmethod = irm\n", "experiment.method"),
    ("[experiment]\nseeds = a..b\n", "experiment.seeds"),
    ("[gate]\nr = 5\n", "gate.r"),
    ("[gate]\np = 1.0\n", "gate.p"),
    ("[optim]\nbatch_size = 1\n", "optim.batch_size"),
    ("[schedule]\nmi_d = 1, 2\n", "schedule.mi_d"),
    ("[schedule]\nbeta3 = 1, 2, 0, step\n", "schedule.beta3"),
    ("[experiment]\nliteral = maybe\n", "experiment.literal"),
])
def test_invalid_configs_name_the_field(text, key):
    with pytest.raises(ConfigError) as err:
        cfgmod.loads(text)
    assert err.value.key == key


def test_seed_ranges():
    assert cfgmod.loads("[experiment]\nseeds = 0..4\n").experiment.seeds == (0, 1, 2, 3, 4)
    assert cfgmod.loads("[experiment]\nseeds = 3, 1\n").experiment.seeds == (3, 1)


def test_literal_mode_disables_stabilizers():
    cfg = cfgmod.loads("[experiment]\nliteral = true\n").effective()
    assert cfg.experiment.grad_clip == 0.0
    assert cfg.gate.inverted_dropout is False


def test_effective_syncs_schedule_horizon():
    cfg = cfgmod.loads("[experiment]\nepochs = 7\n").effective()
    assert cfg.schedule.epochs_total == 7

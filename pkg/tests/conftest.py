import os

import numpy as np
import pytest

from smpc import bmpc, experiment, tightening
from smpc.setops import PolytopeH

CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "configs", "case_study.toml")

ATOMS = np.array([[-1.5], [0.0], [1.5]])
WEIGHTS = np.array([0.2, 0.3, 0.5])
COV = np.array([[0.25]])


@pytest.fixture(scope="session")
def exp_cfg():
    return experiment.load_config(CONFIG_PATH)


@pytest.fixture(scope="session")
def case_em():
    return tightening.ErrorModel.build([[1.0]], [[1.0]], [[-1.0]], COV)


@pytest.fixture(scope="session")
def case_spec():
    return tightening.ChanceSpec(
        state_constraints=(
            tightening.StateConstraint("inner", PolytopeH.box(-2, 2), 0.6),
            tightening.StateConstraint("outer", PolytopeH.box(-3, 3), 0.99),
        ),
        input_constraint=PolytopeH.box(-2, 2),
        input_prob=0.65,
    )


@pytest.fixture(scope="session")
def case_sets(case_em, case_spec):
    z, v = tightening.tighten(case_em, case_spec)
    z_f = tightening.terminal_set(case_em, z, v, ATOMS)
    return z, v, z_f


@pytest.fixture(scope="session")
def case_cfg(case_sets):
    z, v, z_f = case_sets
    return bmpc.BmpcConfig(
        A=[[1.0]], B=[[1.0]], K=[[-1.0]], Z=z, V=v, Z_F=z_f,
        atoms=ATOMS, weights=WEIGHTS, N=5,
        Q=[[1.0]], R=[[1.0]], P=[[1.0]], epsilon=1e3,
    )


@pytest.fixture(scope="session")
def case_master(case_cfg):
    return bmpc.BmpcSolver(case_cfg).warmup()


@pytest.fixture(scope="session")
def case_setup(exp_cfg):
    setup, info = experiment.build_setup(exp_cfg)
    return setup, info

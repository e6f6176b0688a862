"""End-to-end coverage for vector-valued systems (everything else in the
suite drives the 1-D example)."""

import numpy as np
import pytest

from smpc import bmpc, experiment
from smpc.closedloop import run_episode
from smpc.mixture import GaussianMixture
from smpc.rng import substream
from smpc.setops import PolytopeH, contains


@pytest.fixture(scope="module")
def planar_cfg():
    a = np.array([[1.0, 0.25], [0.0, 1.0]])
    b = np.array([[0.0], [1.0]])
    k = np.array([[-0.8, -1.4]])
    mixture = GaussianMixture(
        means=[[-0.12, -0.06], [0.0, 0.0], [0.12, 0.06]],
        weights=[0.25, 0.5, 0.25],
        cov=np.array([[0.004, 0.001], [0.001, 0.003]]),
    )
    return experiment.ExperimentConfig(
        A=a, B=b, K=k, x0=np.array([0.4, -0.2]),
        mixture=mixture,
        state_constraints=(("box", PolytopeH.box([-2.0, -1.5], [2.0, 1.5]), 0.8),),
        input_constraint=PolytopeH.box(-3.0, 3.0), input_prob=0.75,
        horizon=3, episode_steps=8,
        Q=np.eye(2), R=np.array([[0.5]]), P=2 * np.eye(2),
        epsilon=1e3, prs_noise="component", episodes=1, seed=0,
    )


@pytest.fixture(scope="module")
def planar_setup(planar_cfg):
    setup, info = experiment.build_setup(planar_cfg)
    return setup, info


def test_planar_tightening_shapes(planar_setup):
    setup, info = planar_setup
    assert info.Z.dim == 2
    assert info.V.dim == 1
    assert info.Z_F.dim == 2
    assert contains(info.Z_F, np.zeros(2))
    assert info.error_model.sigma_inf.shape == (2, 2)


def test_planar_tree_dimensions(planar_setup, planar_cfg):
    setup, _ = planar_setup
    tree = setup.bmpc_cfg.tree
    assert tree.state_count == 1 + 3 + 9 + 27
    assert tree.input_count == 1 + 3 + 9
    prob = bmpc.assemble(setup.bmpc_cfg, planar_cfg.x0, planar_cfg.x0, 0)
    assert prob.nvars == tree.state_count * 2 + tree.input_count * 1
    # one dynamics block of n rows per edge plus the root pin
    assert prob.A_eq.shape[0] == 2 * (tree.state_count - 1) + 2


def test_planar_solve_and_shift(planar_setup, planar_cfg):
    setup, _ = planar_setup
    solver = setup.master_solver().fresh()
    sol = solver.solve(planar_cfg.x0, planar_cfg.x0)
    assert sol.status is bmpc.BmpcStatus.OPTIMAL
    viol = bmpc.max_violation(setup.bmpc_cfg, sol.z_nodes, sol.v_nodes, sol.xi,
                              x_meas=planar_cfg.x0, z_prev=planar_cfg.x0)
    assert viol <= 1e-6
    for d in (1, 2, 3):
        cand = bmpc.shift_candidate(sol, d, setup.bmpc_cfg)
        cviol = bmpc.max_violation(setup.bmpc_cfg, cand.z_nodes, cand.v_nodes, 1,
                                   z_prev=sol.z_depth1(d))
        assert cviol <= 1e-6


def test_planar_episode_relations(planar_setup):
    setup, _ = planar_setup
    traj = run_episode(setup, 8, substream(314, 0))
    for k in range(traj.steps):
        assert np.abs(traj.x[k] - traj.z0[k] - traj.e[k]).max() <= 1e-12
        assert np.abs(traj.u[k] - traj.v0[k] - setup.K @ traj.e[k]).max() <= 1e-12
    assert np.abs(traj.w - traj.w_recon).max() <= 1e-12


def test_planar_episode_deterministic(planar_setup):
    setup, _ = planar_setup
    a = run_episode(setup, 8, substream(315, 2))
    b = run_episode(setup, 8, substream(315, 2))
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.u, b.u)


def test_planar_campaign_and_report(planar_cfg, planar_setup, tmp_path):
    setup, _ = planar_setup
    stats, trajs = experiment.run_monte_carlo(planar_cfg, episodes=10, seed=4,
                                              setup=setup, keep_trajectories=True)
    assert stats.episodes == 10
    paths = experiment.report(stats, trajs, tmp_path)
    header = open(paths["trajectories"], encoding="utf-8").readline().strip()
    assert header.split(",")[:6] == ["episode", "k", "x0", "x1", "u", "z0"]
    summary = open(paths["summary"], encoding="utf-8").read()
    assert "decision variables: 93" in summary

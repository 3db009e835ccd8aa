"""Discretization, delta-form augmentation, schedules, prediction stacking."""
import numpy as np
import pytest

from mmpc.lti_model import (
    ContinuousPlant,
    DiscretePlant,
    Schedule,
    augment_delta_u,
    build_prediction,
    discretize_zoh,
    expm,
    is_stabilizable,
)


def _rk4_rollout(A, B, E, x0, u, w, T, steps=4000):
    """Reference continuous integration under held inputs."""
    h = T / steps
    x = x0.astype(float).copy()

    def f(x):
        dx = A @ x + B @ u
        if E is not None:
            dx = dx + E @ w
        return dx

    for _ in range(steps):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def test_expm_rotation_and_nilpotent():
    th = 0.7
    R = expm(np.array([[0.0, -th], [th, 0.0]]))
    assert np.allclose(R, [[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]],
                       atol=1e-13)
    Nmat = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert np.allclose(expm(Nmat), np.eye(2) + Nmat, atol=1e-15)


def test_zoh_double_integrator_closed_form():
    p = ContinuousPlant(np.array([[0.0, 1.0], [0.0, 0.0]]),
                        np.array([[0.0], [1.0]]),
                        np.array([[1.0, 0.0]]))
    d = discretize_zoh(p, 0.25)
    assert np.allclose(d.A, [[1.0, 0.25], [0.0, 1.0]], atol=1e-14)
    assert np.allclose(d.B, [[0.25 ** 2 / 2.0], [0.25]], atol=1e-14)
    assert d.dt == 0.25


def test_zoh_matches_fine_integration_with_disturbance():
    rng = np.random.RandomState(5)
    for _ in range(5):
        n = 3
        A = rng.standard_normal((n, n))
        A -= (max(np.linalg.eigvals(A).real) + 0.5) * np.eye(n)
        B = rng.standard_normal((n, 2))
        E = rng.standard_normal((n, 1))
        p = ContinuousPlant(A, B, np.eye(n), E)
        d = discretize_zoh(p, 0.3)
        x0 = rng.standard_normal(n)
        u = rng.standard_normal(2)
        w = rng.standard_normal(1)
        ref = _rk4_rollout(A, B, E, x0, u, w, 0.3)
        got = d.A @ x0 + d.B @ u + d.E @ w
        assert np.allclose(got, ref, atol=1e-9)


def test_delta_augmentation_reproduces_held_levels():
    """Simulating moves on the augmented plant equals levels on the original."""
    rng = np.random.RandomState(9)
    A = 0.9 * rng.standard_normal((3, 3)) / 3
    B = rng.standard_normal((3, 2))
    E = rng.standard_normal((3, 1))
    base = DiscretePlant(A, B, E=E, dt=1.0, C=np.eye(3))
    aug = augment_delta_u(base)
    assert aug.n == 5 and aug.m == 2 and aug.delta_form
    x = np.zeros(3)
    u = np.zeros(2)
    z = np.zeros(5)
    for k in range(25):
        du = rng.standard_normal(2) * 0.3
        w = rng.standard_normal(1) * 0.1
        u = u + du
        x = A @ x + B @ u + E.ravel() * w
        z = aug.A @ z + aug.B @ du + aug.E @ w
        assert np.allclose(z[:3], x, atol=1e-12)
        assert np.allclose(z[3:], u, atol=1e-12)
    # output rows ignore the level registers
    assert np.allclose(aug.C[:, 3:], 0.0)
    assert np.allclose(aug.C[:, :3], np.eye(3))


def test_schedule_cycles_and_offset():
    s = Schedule(3)
    assert [s.sigma(k) for k in range(7)] == [1, 2, 3, 1, 2, 3, 1]
    assert [s.phase(k) for k in range(4)] == [0, 1, 2, 0]
    assert s.successor(2) == 0
    s2 = Schedule(3, offset=2)
    assert s2.sigma(0) == 3
    assert s2.phase(1) == 0


def test_stabilizability_pbh():
    # stable but uncontrollable mode: fine
    A = np.diag([0.5, 1.5])
    B_good = np.array([[0.0], [1.0]])   # reaches the unstable mode
    B_bad = np.array([[1.0], [0.0]])    # cannot touch the 1.5 mode
    assert is_stabilizable(A, B_good)
    assert not is_stabilizable(A, B_bad)
    assert is_stabilizable(np.diag([0.2, 0.9]), np.zeros((2, 1)))


def test_prediction_matrices_match_direct_rollout():
    rng = np.random.RandomState(21)
    for m in (1, 2, 3):
        n = 4
        A = rng.standard_normal((n, n)) / 2
        B = rng.standard_normal((n, m))
        plant = DiscretePlant(A, B, dt=1.0, delta_form=True)
        sched = Schedule(m)
        for k in (0, 2, 5):
            N = 2 * m + 1
            pm = build_prediction(plant, sched, k, N)
            x0 = rng.standard_normal(n)
            dU = rng.standard_normal(N)
            X = pm.Phi @ x0 + pm.G @ dU
            x = x0.copy()
            for j in range(N):
                x = A @ x + plant.b_col(sched.sigma(k + j)).ravel() * dU[j]
                assert np.allclose(X[j * n:(j + 1) * n], x, atol=1e-12)
            # groups partition the columns, own channel first
            cols = np.concatenate([g for g in pm.group_columns if g.size])
            assert sorted(cols.tolist()) == list(range(N))
            assert pm.group_columns[0][0] == 0
            assert np.allclose(pm.g(1), pm.G[:, pm.group_columns[0]])


def test_b_col_is_one_based_and_matches_columns():
    plant = DiscretePlant(np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]]),
                          delta_form=True)
    assert np.allclose(plant.b_col(1).ravel(), [1.0, 3.0])
    assert np.allclose(plant.b_col(2).ravel(), [2.0, 4.0])
    with pytest.raises(ValueError):
        plant.b_col(3)

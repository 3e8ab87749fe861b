"""Dataset assembly, learned-dynamics evaluation and serialization tests."""

import numpy as np
import pytest

from gpmhe import dynamics, gp


def make_trajectory(rng, steps, n=2, m=1, p=1):
    return dynamics.Trajectory(
        states=rng.uniform(-1, 1, size=(steps, n)),
        inputs=rng.uniform(-1, 1, size=(steps, m)),
        outputs=rng.uniform(-1, 1, size=(steps, p)),
    )


def fit_small_dynamics(rng, n=2, m=0, p=1, num=25, noise=1e-4):
    """Fit GPs with fixed hyperparameters to a smooth synthetic system."""
    d = n + m
    inputs = rng.uniform(-1.5, 1.5, size=(num, d))
    params = gp.KernelParams(1.0, np.full(d, 1.2), noise)
    state_gps = [
        gp.fit(inputs, np.sin(inputs @ rng.normal(size=d)), params) for _ in range(n)
    ]
    output_gps = [
        gp.fit(inputs, np.cos(inputs @ rng.normal(size=d)), params) for _ in range(p)
    ]
    return dynamics.LearnedDynamics(state_gps, output_gps, n, m)


def test_build_dataset_hand_example():
    traj = dynamics.Trajectory(
        states=np.array([[1.0], [2.0], [3.0]]),
        inputs=np.array([[10.0], [20.0], [30.0]]),
        outputs=np.array([[0.1], [0.2], [0.3]]),
    )
    ds = dynamics.build_dataset([traj])
    np.testing.assert_array_equal(ds.inputs, [[1.0, 10.0], [2.0, 20.0]])
    np.testing.assert_array_equal(ds.state_targets, [[2.0], [3.0]])
    np.testing.assert_array_equal(ds.output_targets, [[0.1], [0.2]])
    assert (ds.n, ds.m, ds.p) == (1, 1, 1)


def test_build_dataset_point_count():
    rng = np.random.default_rng(0)
    trajs = [make_trajectory(rng, s) for s in (5, 9, 2)]
    ds = dynamics.build_dataset(trajs)
    assert ds.num_points == sum(s - 1 for s in (5, 9, 2))


def test_build_dataset_composes_over_concatenation():
    rng = np.random.default_rng(1)
    first = [make_trajectory(rng, 6)]
    second = [make_trajectory(rng, 4), make_trajectory(rng, 7)]
    combined = dynamics.build_dataset(first + second)
    a = dynamics.build_dataset(first)
    b = dynamics.build_dataset(second)
    np.testing.assert_array_equal(combined.inputs, np.vstack([a.inputs, b.inputs]))
    np.testing.assert_array_equal(
        combined.state_targets, np.vstack([a.state_targets, b.state_targets])
    )
    np.testing.assert_array_equal(
        combined.output_targets, np.vstack([a.output_targets, b.output_targets])
    )


def test_build_dataset_rejects_bad_input():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        dynamics.build_dataset([])
    with pytest.raises(ValueError):
        dynamics.build_dataset([make_trajectory(rng, 1)])
    with pytest.raises(ValueError):
        dynamics.build_dataset([make_trajectory(rng, 4, n=2), make_trajectory(rng, 4, n=3)])


def test_trajectory_rejects_non_finite():
    with pytest.raises(ValueError):
        dynamics.Trajectory(
            states=np.array([[np.inf], [0.0]]),
            inputs=np.zeros((2, 0)),
            outputs=np.zeros((2, 1)),
        )


def test_autonomous_trajectory_has_zero_input_columns():
    traj = dynamics.Trajectory(
        states=np.array([[1.0, 2.0], [3.0, 4.0]]),
        inputs=np.zeros((2, 0)),
        outputs=np.array([[3.0], [7.0]]),
    )
    ds = dynamics.build_dataset([traj])
    assert ds.m == 0
    assert ds.inputs.shape == (1, 2)


def test_mean_f_stacks_individual_posteriors():
    rng = np.random.default_rng(3)
    ld = fit_small_dynamics(rng, n=2, m=1)
    x, u = np.array([0.3, -0.4]), np.array([0.5])
    d = np.concatenate([x, u])[None, :]
    want = [g.posterior_batch(d)[0][0] for g in ld.state_gps]
    np.testing.assert_allclose(ld.mean_f(x, u), want, atol=1e-14)
    want_h = [g.posterior_batch(d)[0][0] for g in ld.output_gps]
    np.testing.assert_allclose(ld.mean_h(x, u), want_h, atol=1e-14)


def test_one_step_variances_are_diagonal_gp_variances():
    rng = np.random.default_rng(4)
    ld = fit_small_dynamics(rng, n=2, m=0)
    x = np.array([0.1, 0.2])
    sx, sy = ld.one_step_variances(x)
    assert sx.shape == (2, 2) and sy.shape == (1, 1)
    np.testing.assert_array_equal(sx, np.diag(np.diag(sx)))
    d = x[None, :]
    for i, g in enumerate(ld.state_gps):
        assert sx[i, i] == pytest.approx(g.posterior_batch(d)[1][0])
    assert sy[0, 0] == pytest.approx(ld.output_gps[0].posterior_batch(d)[1][0])


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(5)
    ld = fit_small_dynamics(rng, n=2, m=1)
    x, u = np.array([0.2, -0.1]), np.array([0.3])
    a, c = ld.jacobians(x, u)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fa = (ld.mean_f(x + e, u) - ld.mean_f(x - e, u)) / (2 * h)
        fc = (ld.mean_h(x + e, u) - ld.mean_h(x - e, u)) / (2 * h)
        np.testing.assert_allclose(a[:, k], fa, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(c[:, k], fc, rtol=1e-5, atol=1e-8)


def test_eval_window_matches_pointwise_calls():
    rng = np.random.default_rng(6)
    ld = fit_small_dynamics(rng, n=2, m=1)
    states = rng.uniform(-1, 1, size=(5, 2))
    inputs = rng.uniform(-1, 1, size=(5, 1))
    ev = ld.eval_window(states, inputs, need_hessians=True, need_var_grads=True)
    for k in range(5):
        np.testing.assert_allclose(ev.mean_f[k], ld.mean_f(states[k], inputs[k]),
                                   atol=1e-14)
        np.testing.assert_allclose(ev.mean_h[k], ld.mean_h(states[k], inputs[k]),
                                   atol=1e-14)
        a, c = ld.jacobians(states[k], inputs[k])
        np.testing.assert_allclose(ev.jac_f[k], a, atol=1e-14)
        np.testing.assert_allclose(ev.jac_h[k], c, atol=1e-14)
        sx, sy = ld.one_step_variances(states[k], inputs[k])
        np.testing.assert_allclose(ev.var_x[k], np.diag(sx), atol=1e-14)
        np.testing.assert_allclose(ev.var_y[k], np.diag(sy), atol=1e-14)
    assert ev.hess_f.shape == (5, 2, 3, 3)
    assert ev.var_grad_y.shape == (5, 1, 3)


def test_learned_dynamics_requires_shared_inputs():
    rng = np.random.default_rng(7)
    params = gp.KernelParams(1.0, np.ones(2), 1e-3)
    a = gp.fit(rng.normal(size=(5, 2)), rng.normal(size=5), params)
    b = gp.fit(rng.normal(size=(5, 2)), rng.normal(size=5), params)
    with pytest.raises(ValueError):
        dynamics.LearnedDynamics([a, b], [], 2, 0)


def test_residuals_reproduce_true_transition():
    rng = np.random.default_rng(8)
    ld = fit_small_dynamics(rng, n=2, m=0)
    f_true = lambda x, u: 0.9 * np.asarray(x)
    h_true = lambda x, u: np.array([x[0] + x[1]])
    x = np.array([0.4, -0.2])
    w = np.array([0.01, -0.02])
    v = np.array([0.005])
    w_res, v_res = dynamics.residuals(ld, f_true, h_true, x, (), w, v)
    # learned transition with the residual reproduces f(x) + w exactly
    np.testing.assert_allclose(ld.mean_f(x) + w_res, f_true(x, ()) + w, atol=1e-14)
    np.testing.assert_allclose(ld.mean_h(x) + v_res, h_true(x, ()) + v, atol=1e-14)


def test_fit_dynamics_smoke_and_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    steps = 12
    states = np.zeros((steps, 1))
    states[0] = 0.8
    for t in range(steps - 1):
        states[t + 1] = 0.7 * states[t] + 0.05 * np.sin(states[t])
    traj = dynamics.Trajectory(
        states=states,
        inputs=np.zeros((steps, 0)),
        outputs=states + 1e-3 * rng.normal(size=(steps, 1)),
    )
    ds = dynamics.build_dataset([traj])
    ld = dynamics.fit_dynamics(ds, starts=2, seed=0, max_iter=60)
    assert ld.n == 1 and ld.m == 0 and ld.p == 1
    path = tmp_path / "dyn.json"
    dynamics.save_dynamics(ld, path)
    back = dynamics.load_dynamics(path)
    x = np.array([0.5])
    np.testing.assert_allclose(back.mean_f(x), ld.mean_f(x), atol=1e-12)
    np.testing.assert_allclose(back.mean_h(x), ld.mean_h(x), atol=1e-12)
    sx0, _ = ld.one_step_variances(x)
    sx1, _ = back.one_step_variances(x)
    np.testing.assert_allclose(sx1, sx0, atol=1e-12)


def test_trajectory_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    trajs = [make_trajectory(rng, 5), make_trajectory(rng, 3)]
    path = tmp_path / "data.csv"
    dynamics.save_trajectories_csv(trajs, path)
    loaded = dynamics.load_trajectories_csv(path)
    assert len(loaded) == 2
    for a, b in zip(trajs, loaded):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.outputs, b.outputs)
    header = path.read_text().splitlines()[0]
    assert header == "t,x1,x2,u1,y1,trajectory_id"


def test_true_dynamics_interface():
    f = lambda x, u: np.array([0.5 * x[0] + u[0], 0.2 * x[1]])
    h = lambda x, u: np.array([x[0] + x[1]])
    td = dynamics.TrueDynamics(f, h, n=2, m=1, p=1)
    x, u = np.array([1.0, 2.0]), np.array([0.3])
    np.testing.assert_allclose(td.mean_f(x, u), [0.8, 0.4], atol=1e-14)
    sx, sy = td.one_step_variances(x, u)
    assert not sx.any() and not sy.any()
    a, c = td.jacobians(x, u)
    np.testing.assert_allclose(a, [[0.5, 0.0], [0.0, 0.2]], atol=1e-8)
    np.testing.assert_allclose(c, [[1.0, 1.0]], atol=1e-8)
    ev = td.eval_window(np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([[0.3], [0.1]]))
    np.testing.assert_allclose(ev.mean_f[0], [0.8, 0.4], atol=1e-14)
    np.testing.assert_allclose(ev.jac_h[1], [[1.0, 1.0]], atol=1e-8)


def test_fit_dynamics_forwards_lengthscale_bounds():
    rng = np.random.default_rng(11)
    steps = 15
    states = np.zeros((steps, 1))
    states[0] = 1.2
    for t in range(steps - 1):
        states[t + 1] = 0.9 * states[t]
    traj = dynamics.Trajectory(
        states=states,
        inputs=np.zeros((steps, 0)),
        outputs=2.0 * states + 1e-4 * rng.normal(size=(steps, 1)),
    )
    ds = dynamics.build_dataset([traj])
    cap = 0.3
    ld = dynamics.fit_dynamics(
        ds, starts=2, seed=0, max_iter=60,
        lengthscale_bounds=(cap / 100.0, cap),
    )
    for model in [*ld.state_gps, *ld.output_gps]:
        assert np.all(model.params.lengthscales <= cap + 1e-12)
        assert np.all(model.params.lengthscales >= cap / 100.0 - 1e-12)

import numpy as np
import pytest

import epirecon as er
from epirecon.blocks import assemble_blocks, materialize_block
from epirecon.solver import (CertificationError, DivergenceError, EntryNorm,
                             RunMetrics, compute_step_sizes, initial_state)
from epirecon.verify import jacobi_spectral_norm
from conftest import make_relu_1d


def scalar_chain_spec(v0=2.0, w1=1.0):
    # hidden layer V0 with identity row, readout through W1 (no x path)
    l1 = er.IcnnLayer(er.Dense([[v0]]), None, [0.0], er.Activation("leaky_relu", 0.2))
    l2 = er.IcnnLayer(None, er.Dense([[w1]]), [0.0], er.Activation("relu"))
    return er.IcnnSpec((1,), (l1, l2))


def test_step_sizes_match_hand_substitution():
    # |V0| = 2, |W1 P| = 1, unit scales: sigma = (1/4, 1), tau = (1, 0.8)
    assembly = assemble_blocks(scalar_chain_spec(2.0, 1.0))
    norms = {(0, 0, 0): EntryNorm(2.0, True), (0, 1, 0): EntryNorm(1.0, True),
             (1, 0, 0): EntryNorm(1.0, True)}
    steps = compute_step_sizes(assembly, scales=(1.0, 1.0), norms=norms)
    assert np.isclose(steps.sigma[0], 0.25)
    assert np.isclose(steps.sigma[1], 1.0)
    assert np.isclose(steps.tau[0], 1.0)
    assert np.isclose(steps.tau[1], 0.8)


def test_step_sizes_dualized_fidelity_form():
    # |A| = |V0| = 1, unit scales: tau_x = 1 / (sigma0 + sigma1) = 0.5
    assembly = assemble_blocks(scalar_chain_spec(1.0, 1.0),
                               forward=er.Dense([[1.0]]))
    norms = {(0, 0, 0): EntryNorm(1.0, True), (1, 0, 0): EntryNorm(1.0, True),
             (1, 1, 0): EntryNorm(1.0, True), (2, 0, 0): EntryNorm(1.0, True)}
    steps = compute_step_sizes(assembly, scales=(1.0, 1.0, 1.0), norms=norms)
    assert np.isclose(steps.tau[0], 0.5)
    assert np.isclose(steps.tau[1], 0.5)


def test_step_sizes_certified_on_materialized_instance():
    spec = er.random_admissible(3, er.DenseTemplate(
        input_dim=4, hidden_dims=(3,), readout_dim=2, skip_all=True))
    assembly = assemble_blocks(spec, forward=er.DiagonalMask(np.ones(4)))
    steps = compute_step_sizes(assembly, scales=(2.0, 0.7, 1.3))
    rows = []
    for bi, block in enumerate(assembly.blocks):
        rows.append(np.sqrt(steps.sigma[bi]) * materialize_block(block.operator))
    stacked = np.vstack(rows)
    cols = np.concatenate([np.full(int(np.prod(s)), np.sqrt(steps.tau[j]))
                           for j, s in enumerate(assembly.primal_shapes)])
    assert jacobi_spectral_norm(stacked * cols[None, :]) <= 1.0 + 1e-6
    for value, _ in steps.certificates.values():
        assert value <= 1.0 + 1e-12


def test_step_sizes_fail_closed_on_bad_norms():
    assembly = assemble_blocks(scalar_chain_spec())
    norms = {(0, 0, 0): EntryNorm(float("nan"), True),
             (0, 1, 0): EntryNorm(1.0, True), (1, 0, 0): EntryNorm(1.0, True)}
    with pytest.raises(CertificationError, match="invalid norm"):
        compute_step_sizes(assembly, norms=norms)


def test_step_sizes_reject_wrong_scale_count():
    assembly = assemble_blocks(scalar_chain_spec())
    with pytest.raises(ValueError, match="dual scales"):
        compute_step_sizes(assembly, scales=(1.0,))


def test_pdhg_zero_regularizer_reaches_measurement():
    spec = make_relu_1d()
    y = np.array([0.7])
    problem = er.ProblemSpec(er.l2_fidelity(), None, y, 0.0, spec)
    state, _ = er.pdhg_solve(problem, budget=100, init_x=np.array([-3.0]),
                             metrics_every=0)
    assert abs(state.x[0] - y[0]) <= 1e-8


def test_pdhg_1d_toy_minimizer():
    # min 0.5 (x - 2)^2 + max(x, 0) has the unique minimizer x = 1
    spec = make_relu_1d()
    problem = er.ProblemSpec(er.l2_fidelity(), None, np.array([2.0]), 1.0, spec)
    state, metrics = er.pdhg_solve(problem, budget=2000, init_x=np.array([0.0]),
                                   metrics_every=0)
    assert abs(state.x[0] - 1.0) <= 1e-5
    assert metrics.objective[-1] <= 1.5 + 1e-6


def test_pdhg_stationary_at_converged_state():
    spec = scalar_chain_spec(1.5, 0.8)
    problem = er.ProblemSpec(er.l2_fidelity(), None, np.array([1.2]), 2.0, spec)
    state, _ = er.pdhg_solve(problem, budget=5000, init_x=np.array([0.3]),
                             metrics_every=0)
    frozen = np.array(state.x)
    state2, _ = er.pdhg_solve(problem, budget=10, init=state, metrics_every=0)
    assert np.max(np.abs(state2.x - frozen)) <= 1e-8


def test_pdhg_feasibility_decays():
    # quick qualitative check; the strict 1e-6 long-run bound lives in the
    # acceptance suite at ten times the task budget
    spec = er.random_admissible(8, er.ConvPoolDenseTemplate(
        side=8, filters=2, kernel=3, pool=4, hidden=4))
    x_true = er.make_phantom("smooth_blobs", 8, 2)
    cfg = er.TaskConfig(kind="denoise_salt_pepper", image_side=8, sp_density=0.1, seed=4)
    y, _ = er.corrupt(cfg, x_true)
    problem = er.ProblemSpec(er.l1_fidelity(0.02), None, y, 20.0, spec)
    _, metrics = er.pdhg_solve(problem, budget=3000, scales=(5.0, 5.0),
                               metrics_every=100)
    early = max(metrics.feasibility[1:6])
    assert metrics.feasibility[-1] <= 1e-4
    assert metrics.feasibility[-1] < early


def test_pdhg_divergence_guard_reports_location():
    spec = make_relu_1d()
    problem = er.ProblemSpec(er.l2_fidelity(), None, np.array([2.0]), 1.0, spec)
    from epirecon.blocks import assemble_blocks as ab
    assembly = ab(spec)
    state = initial_state(problem, assembly, init_x=np.array([1.0]))
    state.x[0] = np.nan
    with pytest.raises(DivergenceError, match=r"primal image at iteration 0"):
        er.pdhg_solve(problem, budget=5, init=state, metrics_every=0)
    state = initial_state(problem, assembly, init_x=np.array([1.0]))
    state.duals[0][0][0] = np.inf
    with pytest.raises(DivergenceError, match=r"dual block 0"):
        er.pdhg_solve(problem, budget=5, init=state, metrics_every=0)


def test_evaluate_objectives_trace_relations(rng):
    spec = er.random_admissible(12, er.DenseTemplate(
        input_dim=3, hidden_dims=(4,), readout_dim=2, skip_all=True))
    y = rng.uniform(-1, 1, 3)
    problem = er.ProblemSpec(er.l2_fidelity(), None, y, 0.7, spec)
    x = rng.uniform(-1, 1, 3)
    _, trace = er.forward(spec, x)
    at_trace = er.evaluate_objectives(problem, x, [t.copy() for t in trace])
    assert at_trace.feasibility == 0.0
    assert np.isclose(at_trace.reformulated, at_trace.primal)
    above = er.evaluate_objectives(problem, x, [t + 1.0 for t in trace])
    assert above.feasibility == 0.0
    assert above.reformulated >= above.primal - 1e-9
    below = er.evaluate_objectives(problem, x, [t - 1.0 for t in trace])
    assert np.isclose(below.feasibility, 1.0)


def test_evaluate_objectives_kl_domain_flag():
    spec = make_relu_1d()
    fid = er.kl_fidelity(np.array([0.0]))
    problem = er.ProblemSpec(fid, er.Dense([[1.0]]), np.array([2.0]), 1.0, spec)
    report = er.evaluate_objectives(problem, np.array([-1.0]))
    assert report.infeasible_data and report.primal == np.inf
    ok = er.evaluate_objectives(problem, np.array([1.0]))
    assert np.isfinite(ok.primal)


def test_subgradient_constant_step_halves_error():
    spec = make_relu_1d()
    y = np.array([2.0])
    problem = er.ProblemSpec(er.l2_fidelity(), None, y, 0.0, spec)
    _, metrics = er.subgradient_solve(problem, er.ConstantStep(0.5), budget=6,
                                      init_x=np.array([10.0]))
    errors = np.sqrt(2.0 * np.array(metrics.objective))  # |x - y| from the objective
    ratios = errors[1:] / errors[:-1]
    assert np.allclose(ratios, 0.5)


def test_subgradient_diminishing_reaches_1d_minimizer():
    spec = make_relu_1d()
    problem = er.ProblemSpec(er.l2_fidelity(), None, np.array([2.0]), 1.0, spec)
    x, metrics = er.subgradient_solve(problem, er.DiminishingStep(1.0),
                                      budget=10000, init_x=np.array([5.0]),
                                      metrics_every=0)
    assert abs(x[0] - 1.0) <= 1e-2
    assert metrics.notes["solver"] == "sm_d(1)"


def test_smd_running_min_settles_on_desk_instance():
    # running-min objective is Cauchy (within 1e-4) over the trailing 20%
    spec = er.random_admissible(44, er.ConvPoolDenseTemplate(
        side=8, filters=2, kernel=3, pool=4, hidden=4))
    truth = er.make_phantom("smooth_blobs", 8, 3)
    cfg = er.TaskConfig(kind="inpaint", image_side=8, mask_fraction=0.3,
                        gaussian_sigma=0.03, seed=6)
    y, fwd = er.corrupt(cfg, truth)
    problem = er.ProblemSpec(er.l2_fidelity(), fwd, y, 2.0, spec)
    _, metrics = er.subgradient_solve(problem, er.DiminishingStep(1.0), budget=5000)
    rm = metrics.running_min_objective()
    tail = rm[int(0.8 * len(rm)):]
    assert max(tail) - min(tail) <= 1e-4 * (1.0 + abs(tail[-1]))


def test_running_min_non_increasing(rng):
    metrics = RunMetrics()
    values = rng.uniform(0, 1, 50)
    for k, v in enumerate(values):
        metrics.iterations.append(k)
        metrics.objective.append(float(v))
    rm = metrics.running_min_objective()
    assert np.all(np.diff(rm) <= 0.0 + 1e-15)
    assert rm == list(np.minimum.accumulate(values))


def test_stop_rule_arithmetic():
    metrics = RunMetrics()
    metrics.iterations.append(0)
    metrics.objective.append(1.0009)
    # (1.0009 - 1) / 1 = 9e-4 < 1e-3
    assert er.stop_rule(metrics, 1e-3, 1.0)
    metrics.objective[-1] = 1.002
    assert not er.stop_rule(metrics, 1e-3, 1.0)
    metrics.objective[-1] = 1.0
    assert er.stop_rule(metrics, 1e-3, 1.0)


def test_stop_rule_absolute_fallback_flagged():
    metrics = RunMetrics()
    metrics.iterations.append(0)
    metrics.objective.append(5e-4)
    assert er.stop_rule(metrics, 1e-3, 0.0)
    assert metrics.notes["stop_rule_absolute_fallback"] is True


def test_iterations_to_threshold_first_crossing():
    metrics = RunMetrics()
    for k, v in enumerate([2.0, 1.5, 1.0009, 1.0005, 1.0001, 1.00005]):
        metrics.iterations.append(k)
        metrics.objective.append(v)
    hit, used_abs = er.iterations_to_threshold(metrics, 1.0, 1e-3)
    assert hit == 2 and not used_abs  # fires at the first crossing only
    miss, _ = er.iterations_to_threshold(metrics, 1.0, 1e-6)
    assert miss is None


def test_pdhg_bitwise_deterministic():
    spec = er.random_admissible(6, er.ConvPoolDenseTemplate(
        side=8, filters=2, kernel=3, pool=4, hidden=4))
    x_true = er.make_phantom("checker", 8)
    cfg = er.TaskConfig(kind="denoise_salt_pepper", image_side=8, sp_density=0.2, seed=5)
    y, _ = er.corrupt(cfg, x_true)
    problem = er.ProblemSpec(er.l1_fidelity(0.05), None, y, 5.0, spec)
    runs = []
    for _ in range(2):
        state, metrics = er.pdhg_solve(problem, budget=50, scales=(0.5, 0.5),
                                       ground_truth=x_true)
        runs.append((state.x.tobytes(), list(metrics.objective),
                     list(metrics.feasibility), list(metrics.psnr)))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]
    assert runs[0][2] == runs[1][2]
    assert runs[0][3] == runs[1][3]


def test_problem_spec_validation():
    spec = make_relu_1d()
    with pytest.raises(ValueError, match="kl fidelity has no primal prox"):
        er.Fidelity("kl", background=np.array([1.0]), dualize=False)
    with pytest.raises(ValueError, match="identity forward"):
        er.ProblemSpec(er.l1_fidelity(0.1), er.Dense([[2.0]]), np.array([1.0]),
                       1.0, spec)
    with pytest.raises(ValueError, match="diagonal forward"):
        er.ProblemSpec(er.l2_fidelity(), er.Dense([[1.0], [1.0]]),
                       np.array([1.0, 1.0]), 1.0, spec)
    with pytest.raises(ValueError, match="reg_weight"):
        er.ProblemSpec(er.l2_fidelity(), None, np.array([1.0]), -0.1, spec)


def test_initial_state_is_feasible():
    spec = er.random_admissible(19, er.ConvPoolDenseTemplate(
        side=8, filters=2, kernel=3, pool=4, hidden=4))
    y = er.make_phantom("smooth_blobs", 8, 1)
    problem = er.ProblemSpec(er.l1_fidelity(0.1), None, y, 1.0, spec)
    assembly = assemble_blocks(spec)
    state = initial_state(problem, assembly)
    report = er.evaluate_objectives(problem, state.x, state.z)
    assert report.feasibility == 0.0
    assert np.array_equal(state.x, y)
    assert all(not np.any(d) for rows in state.duals for d in rows)

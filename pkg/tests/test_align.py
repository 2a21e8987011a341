import numpy as np
import pytest

from goatlab.align import (
    DenseMoE,
    ExperimentConfig,
    LoraModel,
    equivalent_gradient,
    equivalent_weight_variance,
    run_alignment_experiment,
    run_constructed_alignment,
    sgd_step_lora,
    train,
    verify_expected_gradient_scale,
    verify_router_stats,
    verify_w_res_optimality,
)
from goatlab.errors import DomainError, RunError, ShapeError
from goatlab.moe import build_goat_layer
from goatlab.numkit import Rng
from goatlab.svdseg import ExpertPair
from goatlab.tasks import make_cluster_task, make_regression_task


def test_equivalent_gradient_hand_value():
    b = np.array([[1.0], [0.0]])
    a = np.array([[1.0, 0.0]])
    g = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.allclose(equivalent_gradient(b, a, g, 1.0), [[2, 2], [3, 0]])


def test_equivalent_gradient_zero_b():
    rng = Rng(0)
    a, g = rng.normal((2, 5)), rng.normal((3, 5))
    assert np.allclose(equivalent_gradient(np.zeros((3, 2)), a, g, 3.0), 9.0 * g @ a.T @ a)
    with pytest.raises(ShapeError):
        equivalent_gradient(np.zeros((3, 2)), a, np.zeros((2, 5)), 1.0)


def test_sgd_step_lora():
    rng = Rng(1)
    b, a, g = rng.normal((4, 2)), rng.normal((2, 3)), rng.normal((4, 3))
    b2, a2 = sgd_step_lora(b, a, np.zeros_like(g), 2.0, 0.1)
    assert np.array_equal(b2, b) and np.array_equal(a2, a)
    b2, a2 = sgd_step_lora(np.zeros((4, 2)), a, g, 2.0, 0.1)
    assert np.allclose(b2 @ a2, (-2.0 * 0.1 * g @ a.T) @ a)
    with pytest.raises(DomainError):
        sgd_step_lora(b, a, g, 1.0, 0.0)


def test_exact_second_order_remainder():
    rng = Rng(2)
    b, a, g, s, eta = rng.normal((5, 3)), rng.normal((3, 4)), rng.normal((5, 4)), 1.7, 1e-3
    b2, a2 = sgd_step_lora(b, a, g, s, eta)
    lhs = s * (b2 @ a2 - b @ a) + eta * equivalent_gradient(b, a, g, s)
    assert np.allclose(lhs, s * (b2 - b) @ (a2 - a), atol=1e-15)
    bound = s**2 * eta**2 * np.linalg.norm(g @ a.T) * np.linalg.norm(b.T @ g) * s
    assert np.linalg.norm(lhs) <= bound


def test_constructed_alignment_single_and_moe():
    task = make_regression_task(12, 12, Rng(0))
    rep = run_constructed_alignment(task, E=1, k=1, steps=100)
    assert len(rep) == 101
    assert np.max(rep.weight_gaps) <= 1e-6
    assert rep.losses[-1] < rep.losses[0]
    rep = run_constructed_alignment(task, E=2, k=1, steps=100)
    assert all(r.routes_agree for r in rep.rows)
    assert max(r.expert_gap for r in rep.rows) <= 1e-6


def test_alignment_gap_drifts_with_larger_scale():
    task = make_regression_task(12, 12, Rng(0))
    small = np.max(run_constructed_alignment(task, steps=50, s=1e-2).weight_gaps)
    large = np.max(run_constructed_alignment(task, steps=50, s=1e-1).weight_gaps)
    assert large > 50 * small


def test_zero_steps_gap_is_initial_gap():
    task = make_regression_task(16, 16, Rng(1))
    for v in ("GOAT", "GOAT-s", "ZeroMoE"):
        rep = run_alignment_experiment(task, ExperimentConfig(variant=v, E=4, r=4, steps=0, eval_size=16))
        assert len(rep) == 1 and rep.weight_gaps[0] <= 1e-8


def test_trajectory_csv():
    task = make_regression_task(8, 8, Rng(2))
    rep = run_alignment_experiment(task, ExperimentConfig(E=2, r=2, steps=3, eval_size=8))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "step,loss_ref,loss_lora,weight_gap,grad_gap"
    assert len(lines) == 5


def test_all_variants_train():
    task = make_regression_task(16, 16, Rng(3))
    for v in ("GOAT", "GOAT-s", "ZeroMoE", "PiSSA", "MiLoRA", "FullFT", "FullFTMoE"):
        rep = run_alignment_experiment(task, ExperimentConfig(variant=v, E=4, r=4, steps=30, eval_size=64))
        assert np.isfinite(rep.losses).all()
        assert np.isclose(rep.final_loads.sum(), 1.0)


def test_cluster_task_trains():
    task = make_cluster_task(16, 8, Rng(4), separation=2.0)
    rep = run_alignment_experiment(task, ExperimentConfig(E=4, r=4, steps=200, lr=0.1, eval_size=256))
    assert rep.losses[-20:].mean() < rep.losses[0]


def test_divergence_raises_run_error_with_partial_rows():
    task = make_regression_task(16, 16, Rng(5))
    with pytest.raises(RunError) as info:
        run_alignment_experiment(task, ExperimentConfig(E=4, r=4, steps=500, lr=50.0, eval_size=8))
    assert info.value.step is not None
    assert len(info.value.partial.rows) >= 1


def test_same_seed_same_trajectory():
    task = make_regression_task(16, 16, Rng(6))
    cfg = ExperimentConfig(E=4, r=4, steps=10, eval_size=8)
    a = run_alignment_experiment(task, cfg).to_csv()
    assert a == run_alignment_experiment(task, cfg).to_csv()


def test_router_stats_single_expert_and_errors():
    st = verify_router_stats(1, 1, 10_000, Rng(0))
    assert np.allclose(st.mean, 1.0) and np.allclose(st.var, 0.0)
    with pytest.raises(DomainError):
        verify_router_stats(2, 3, 10_000, Rng(0))


def test_router_means_symmetric_under_normal_and_uniform():
    for dist in ("normal", "uniform"):
        st = verify_router_stats(8, 2, 100_000, Rng(1), dist=dist)
        assert np.all(np.abs(st.mean - 0.125) <= 3 * st.stderr)


def test_router_variance_single_choice_matches_closed_form():
    st = verify_router_stats(8, 1, 100_000, Rng(2))
    assert np.all(np.abs(st.var - 7 / 64) <= 0.05 * 7 / 64)


def test_router_variance_distribution_agreement():
    # top-k weights depend on the logit distribution; only k=1 is distribution free
    n = verify_router_stats(8, 1, 100_000, Rng(3), dist="normal")
    u = verify_router_stats(8, 1, 100_000, Rng(4), dist="uniform")
    assert np.allclose(n.var.mean(), u.var.mean(), rtol=0.03)


def test_expected_gram():
    out = verify_expected_gradient_scale(64, 4, 1.0, 10_000, Rng(5), g=Rng(6).normal((8, 64)))
    assert out["gram_rel_dev"] <= 0.05
    assert out["grad_rel_dev"] <= 0.05
    assert out["max_offdiag_z"] < 5.0


def test_w_res_degenerate_experts():
    m = Rng(7).normal((3, 4))
    experts = [ExpertPair(m, np.eye(4), 2.0) for _ in range(4)]
    res = verify_w_res_optimality(experts, None, 4, 2, 10_000, Rng(8))
    assert abs(res.j_opt) <= 1e-10
    assert res.max_gain <= 0


def test_w_res_matches_sample_mean():
    rng = Rng(9)
    layer = build_goat_layer(rng.normal((12, 12)), E=4, k=2, r=4, rng=rng)
    res = verify_w_res_optimality(layer.experts, None, 4, 2, 50_000, rng)
    assert res.sample_mean_dev <= 4 * res.sample_mean_se
    assert res.max_gain <= 0


def test_rho_lowers_variance():
    rng = Rng(10)
    w0 = rng.normal((16, 16))
    X = rng.normal((500, 16))
    v1 = equivalent_weight_variance(build_goat_layer(w0, rho=1.0, rng=rng), X)
    v10 = equivalent_weight_variance(build_goat_layer(w0, rho=10.0, rng=rng), X)
    assert v10 < v1


def test_dense_moe_full_matches_plain_gradient_descent():
    task = make_regression_task(6, 6, Rng(11), teacher_rank=2, noise=0.0)
    model = DenseMoE.full(task.w0)
    rep = train(model, task, Rng(12), 5, 0.1, batch_size=8, eval_size=0)
    w = task.w0.copy()
    data = Rng(12).child("data")
    for _ in range(5):
        X, Y = task.sample(data, 8)
        w -= 0.1 * ((X @ w.T - Y) / 8).T @ X
    assert np.allclose(rep.model.weights[0], w)
    assert isinstance(LoraModel(build_goat_layer(task.w0, E=2, k=1, r=2)).mean_weight(), np.ndarray)

import numpy as np
import pytest

from edna.builtins import default_registry
from edna.errors import ModelError, OptimError
from edna.model import (LinearClassifier, MLPClassifier, ModelSpec, build_model, get_parameters,
                        parameter_digest, set_parameters)
from edna.optim import (LambdaPolicy, OptimizerState, SoftmaxLogitsLoss, adam_step,
                        cross_entropy, lambda_scheduler_step, make_adam, make_scheduler, make_sgd,
                        parameter_gradients, scheduler_step, softmax, weighted_total)

from oracles import finite_difference, ref_adam, ref_cross_entropy


def mlp(seed=0, d=3, h=5, c=4):
    return MLPClassifier(ModelSpec("MLPClassifier", kwargs={"in_dim": d, "hidden": h, "classes": c}),
                         seed=seed)


def test_softmax_is_stable():
    p = softmax([1000.0, 1000.0])
    assert np.allclose(p, [0.5, 0.5])
    with pytest.raises(OptimError):
        softmax([np.inf, 0.0])


def test_cross_entropy_frozen_value():
    logits = np.array([[2.0, 1.0, 0.0], [0.5, 0.5, 3.0]])
    assert cross_entropy(logits, [0, 2]) == pytest.approx(0.2798071744177578, abs=1e-14)
    assert cross_entropy(logits, [0, 2]) == pytest.approx(ref_cross_entropy(logits.tolist(), [0, 2]),
                                                          abs=1e-14)


def test_weighted_total_single_loss():
    assert weighted_total([2.3], [1.0]) == 2.3


def test_forward_triplet_and_shape_check():
    m = mlp()
    out, plugins = m(np.zeros((2, 3)))
    logits, feats, sec = out
    assert logits.shape == (2, 4) and feats.shape == (2, 5) and sec == [] and plugins == {}
    with pytest.raises(ModelError):
        m(np.zeros((2, 4)))


def test_glorot_and_zero_bias():
    m = mlp(d=6, h=10)
    limit = np.sqrt(6 / 16)
    assert np.all(np.abs(m.parameters["W1"]) <= limit)
    assert not m.parameters["b1"].any()


def test_seed_determines_init():
    assert parameter_digest(mlp(1)) == parameter_digest(mlp(1)) != parameter_digest(mlp(2))


def test_flat_layout_index_arithmetic():
    m = mlp(d=3, h=5, c=4)
    flat = get_parameters(m)
    assert flat.size == 3 * 5 + 5 + 5 * 4 + 4
    flat[3 * 5 + 2] += 1.0  # b1[2]
    before = {k: v.copy() for k, v in m.parameters.items()}
    set_parameters(m, flat)
    assert m.parameters["b1"][2] == before["b1"][2] + 1.0
    for name in ("W1", "W2", "b2"):
        assert np.array_equal(m.parameters[name], before[name])
    with pytest.raises(ModelError):
        set_parameters(m, flat[:-1])


def test_missing_and_unknown_kwargs():
    with pytest.raises(ModelError, match="in_dim"):
        LinearClassifier(ModelSpec("LinearClassifier", kwargs={"classes": 2}))
    with pytest.raises(ModelError, match="initial_channels"):
        LinearClassifier(ModelSpec("LinearClassifier",
                                   kwargs={"in_dim": 2, "classes": 2, "initial_channels": 1}))


def test_build_model_through_registry():
    m = build_model(ModelSpec("LinearClassifier", kwargs={"in_dim": 2, "classes": 3}),
                    default_registry(), seed=4)
    assert isinstance(m, LinearClassifier) and m.parameters["W"].shape == (2, 3)


def _fd_check(model, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(7, model.in_dim))
    y = rng.integers(0, model.attributes["classes"], size=7)
    theta = get_parameters(model)

    def loss(vec):
        set_parameters(model, np.asarray(vec))
        return cross_entropy(model(x)[0].logits, y)

    numeric = np.array(finite_difference(loss, theta.tolist()))
    set_parameters(model, theta)
    out, _ = model(x)
    _, dlogits = SoftmaxLogitsLoss()(out.logits, y)
    analytic = parameter_gradients(model, model.last_inputs, dlogits)
    denom = np.maximum(np.abs(numeric) + np.abs(analytic), 1e-8)
    return np.max(np.abs(numeric - analytic) / denom)


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    lin = LinearClassifier(ModelSpec("LinearClassifier", kwargs={"in_dim": 4, "classes": 3}), seed=seed)
    assert _fd_check(lin, seed) < 1e-4
    assert _fd_check(mlp(seed), seed) < 1e-4


def test_custom_model_backward_vector():
    class Scaled(LinearClassifier):
        def backward(self, x, dlogits):
            return np.concatenate([(x.T @ dlogits).ravel(), dlogits.sum(axis=0)])

    m = Scaled(ModelSpec("Scaled", kwargs={"in_dim": 2, "classes": 2}))
    x = np.ones((3, 2))
    m(x)
    g = parameter_gradients(m, x, np.ones((3, 2)))
    assert g.shape == (6,)


def test_adam_matches_reference_trajectory():
    a = np.array([1.0, 10.0])
    c = np.array([3.0, -2.0])
    opt = make_adam(2, 0.1)
    theta = np.zeros(2)
    ours = []
    for _ in range(10):
        theta = opt.step(theta, a * (theta - c))
        ours.append(theta.copy())
    ref = ref_adam([0.0, 0.0], lambda t: [a[i] * (t[i] - c[i]) for i in range(2)], 0.1, 10)
    assert np.max(np.abs(np.array(ours) - np.array(ref))) < 1e-12
    # frozen from the reference implementation
    assert ours[-1] == pytest.approx([0.985811588639555, -0.9754131642926388], abs=1e-12)


def test_adam_step_is_pure():
    s = OptimizerState.fresh("Adam", 2, 0.1)
    delta, s2 = adam_step(s, np.array([1.0, -1.0]))
    assert s.t == 0 and s2.t == 1
    assert np.allclose(delta, [-0.1, 0.1])


def test_sgd_and_bad_inputs():
    opt = make_sgd(2, 0.5)
    assert np.array_equal(opt.step(np.array([1.0, 1.0]), np.array([2.0, 0.0])), [0.0, 1.0])
    with pytest.raises(OptimError):
        opt.step(np.zeros(2), np.array([np.nan, 0.0]))
    with pytest.raises(OptimError):
        make_sgd(2, 0.0)
    with pytest.raises(OptimError):
        make_adam(2, 1e-3, momentum=0.9)


def test_schedulers():
    s = make_scheduler("step_decay", gamma=0.1, step_size=2)
    lrs = []
    for _ in range(5):
        lrs.append(scheduler_step(s, 1.0))
        s = s.advanced()
    assert lrs == pytest.approx([1.0, 1.0, 0.1, 0.1, 0.01])
    e = make_scheduler("exponential", gamma=0.5).advanced().advanced()
    assert scheduler_step(e, 2.0) == 0.5
    assert scheduler_step(make_scheduler("constant").advanced(), 3.0) == 3.0
    with pytest.raises(OptimError):
        make_scheduler("exponential", gamma=1.5)


def test_lambda_policy():
    assert lambda_scheduler_step([1.0, 2.0], LambdaPolicy("exponential", 0.5)) == [0.5, 1.0]
    assert lambda_scheduler_step([1.0], LambdaPolicy()) == [1.0]

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_arch, random_labels
from scagroup.numcore import SeededRng, finite_diff_grad, relative_error
from scagroup.taskmodels import (
    ModelArch,
    MtlDataset,
    MtlSample,
    MultiTaskModel,
    ParamVector,
    average_multitask_loss,
    count_parameters,
    flatten,
    forward,
    head_grad,
    init_shared,
    make_layout,
    model_from_dict,
    model_to_dict,
    multitask_gradients,
    shared_grad,
    task_gradients,
    task_loss,
    unflatten,
)


def oracle_forward(model, t, x):
    """Layer-by-layer evaluation written independently of the library path."""
    arch = model.arch
    act = {"tanh": np.tanh, "relu": lambda a: np.maximum(a, 0.0), "linear": lambda a: a}[arch.activation]
    h = np.asarray(x, dtype=float)
    for l in range(len(arch.trunk_sizes)):
        W = model.shared.tensor(f"trunk.{l}.weight")
        b = model.shared.tensor(f"trunk.{l}.bias") if arch.trunk_bias else 0.0
        z = np.zeros(W.shape[0])
        for i in range(W.shape[0]):
            z[i] = sum(W[i, j] * h[j] for j in range(W.shape[1]))
        h = act(z + b)
    n_head = len(arch.head_sizes) + 1
    for l in range(n_head):
        W = model.heads[t].tensor(f"head.{l}.weight")
        b = model.heads[t].tensor(f"head.{l}.bias")
        z = W @ h + b
        h = act(z) if l < n_head - 1 else z
    return float(h[0])


def random_model(gen, **kw):
    arch = random_arch(gen, **kw)
    model = init_shared(arch, SeededRng(int(gen.integers(0, 2**31))))
    # distinct heads so per-task paths are exercised
    for t in range(arch.n_tasks):
        model = model.with_head(t, gen.normal(size=model.heads[t].size))
    return model


# ModelArch / init


def test_arch_invariants():
    with pytest.raises(ValueError):
        ModelArch(3, (), ("mse",))
    with pytest.raises(ValueError):
        ModelArch(3, (4,), ())
    with pytest.raises(ValueError):
        ModelArch(3, (4,), ("hinge",))
    with pytest.raises(ValueError):
        ModelArch(3, (4,), ("mse",), activation="sigmoid")
    arch = ModelArch(3, (4, 2), ("mse", "bce"), (5,))
    assert ModelArch.from_dict(arch.to_dict()) == arch


def test_init_deterministic_and_stream_sensitive():
    arch = ModelArch(4, (5, 3), ("mse", "bce", "mse"), (2,))
    a = flatten(init_shared(arch, SeededRng(9, 0))).values
    b = flatten(init_shared(arch, SeededRng(9, 0))).values
    c = flatten(init_shared(arch, SeededRng(9, 1))).values
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_parameter_count_matches_shape_arithmetic():
    arch = ModelArch(4, (5, 3), ("mse", "bce", "mse"), (2,))
    model = init_shared(arch, SeededRng(0))
    shared = 5 * 4 + 5 + 3 * 5 + 3
    head = 2 * 3 + 2 + 1 * 2 + 1
    assert count_parameters(arch) == (shared, head)
    assert model.shared.size == shared
    assert all(h.size == head for h in model.heads)
    assert flatten(model).size == shared + 3 * head


def test_init_uniform_bounds(gen):
    arch = ModelArch(9, (16, 4), ("mse",))
    model = init_shared(arch, SeededRng(3))
    W0 = model.shared.tensor("trunk.0.weight")
    W1 = model.shared.tensor("trunk.1.weight")
    assert np.all(np.abs(W0) <= 1 / 3) and np.all(np.abs(model.shared.tensor("trunk.0.bias")) <= 1 / 3)
    assert np.all(np.abs(W1) <= 1 / 4)


def test_model_head_count_invariant():
    arch = ModelArch(2, (2,), ("mse", "mse"))
    model = init_shared(arch, SeededRng(0))
    with pytest.raises(ValueError):
        MultiTaskModel(arch, model.shared, model.heads[:1])


# forward


def test_forward_zero_weights():
    for kind in ("mse", "bce"):
        arch = ModelArch(3, (4,), (kind,))
        model = init_shared(arch, SeededRng(0))
        model = model.with_shared(np.zeros(model.shared.size)).with_head(0, np.zeros(model.heads[0].size))
        assert forward(model, 0, [1.0, -2.0, 3.0]) == 0.0


def test_forward_identity_trunk_reproduces_input():
    arch = ModelArch(3, (3,), ("mse",), activation="linear", trunk_bias=False)
    model = init_shared(arch, SeededRng(0)).with_shared(np.eye(3).ravel())
    # head picks coordinate k of the trunk output
    x = np.array([0.3, -1.2, 2.5])
    for k in range(3):
        w = np.zeros(3)
        w[k] = 1.0
        m = model.with_head(0, np.concatenate([w, [0.0]]))
        assert forward(m, 0, x) == x[k]


def test_forward_matches_independent_oracle(gen):
    for _ in range(30):
        model = random_model(gen)
        x = gen.normal(size=model.arch.input_dim)
        for t in range(model.n_tasks):
            assert forward(model, t, x) == pytest.approx(oracle_forward(model, t, x), abs=1e-12)


def test_forward_batch_equals_rows(gen):
    model = random_model(gen)
    X = gen.normal(size=(7, model.arch.input_dim))
    np.testing.assert_allclose(forward(model, 0, X), [forward(model, 0, x) for x in X], atol=1e-14)


def test_forward_errors():
    model = init_shared(ModelArch(3, (2,), ("mse",)), SeededRng(0))
    with pytest.raises(IndexError):
        forward(model, 1, [0, 0, 0])
    with pytest.raises(ValueError):
        forward(model, 0, [0, 0])


# losses


def test_task_loss_examples():
    assert task_loss(3.0, 3.0, "mse") == 0
    assert task_loss(2.0, 0.0, "mse") == 2
    assert task_loss(0.0, 1.0, "bce") == pytest.approx(np.log(2), rel=1e-15)
    with pytest.raises(ValueError):
        task_loss(0.0, 0.5, "bce")


@settings(max_examples=200, deadline=None)
@given(st.floats(-800, 800), st.sampled_from([0.0, 1.0]))
def test_bce_stable_and_matches_definition(z, y):
    loss = task_loss(z, y, "bce")
    assert np.isfinite(loss) and loss >= 0
    # high-precision oracle for -[y log σ(z) + (1-y) log(1-σ(z))]
    with mpmath.workdps(400):
        s = 1 / (1 + mpmath.exp(-mpmath.mpf(z)))
        ref = -(y * mpmath.log(s) + (1 - y) * mpmath.log(1 - s))
    assert loss == pytest.approx(float(ref), rel=1e-12, abs=1e-300)


# gradients


def test_zero_loss_point_has_zero_gradient(gen):
    model = random_model(gen, kinds=("mse",))
    x = gen.normal(size=model.arch.input_dim)
    sample = MtlSample(x, [forward(model, 0, x)])
    np.testing.assert_array_equal(shared_grad(model, 0, sample), 0)
    np.testing.assert_array_equal(head_grad(model, 0, sample), 0)


def test_one_parameter_linear_hand_derivative():
    arch = ModelArch(1, (1,), ("mse",), activation="linear", trunk_bias=False)
    model = init_shared(arch, SeededRng(0)).with_shared([0.7]).with_head(0, [1.0, 0.0])
    x, y = 2.0, 3.0
    g = shared_grad(model, 0, MtlSample([x], [y]))
    assert g[0] == pytest.approx((0.7 * x - y) * x, rel=1e-15)


def test_gradients_match_finite_differences(gen):
    worst = 0.0
    for _ in range(50):
        model = random_model(gen, activation=str(gen.choice(["tanh", "linear"])))
        x = gen.normal(size=model.arch.input_dim)
        y = random_labels(gen, model.arch.task_kinds)
        sample = MtlSample(x, y)
        for t in range(model.n_tasks):
            kind = model.arch.task_kinds[t]

            def f_shared(theta):
                return task_loss(forward(model.with_shared(theta), t, x), y[t], kind)

            def f_head(phi):
                return task_loss(forward(model.with_head(t, phi), t, x), y[t], kind)

            worst = max(worst, relative_error(shared_grad(model, t, sample), finite_diff_grad(f_shared, model.shared.values)))
            worst = max(worst, relative_error(head_grad(model, t, sample), finite_diff_grad(f_head, model.heads[t].values)))
    assert worst < 1e-5


def test_relu_gradients_away_from_kinks(gen):
    for _ in range(20):
        model = random_model(gen, activation="relu")
        x = gen.normal(size=model.arch.input_dim)
        y = random_labels(gen, model.arch.task_kinds)
        kind = model.arch.task_kinds[0]

        def f(theta):
            return task_loss(forward(model.with_shared(theta), 0, x), y[0], kind)

        fd = finite_diff_grad(f, model.shared.values, h=1e-7)
        an = shared_grad(model, 0, MtlSample(x, y))
        assert relative_error(an, fd) < 1e-4


def test_averaged_loss_gradient_is_mean_of_task_gradients(gen):
    for _ in range(30):
        model = random_model(gen, n_tasks=int(gen.integers(2, 5)))
        x = gen.normal(size=model.arch.input_dim)
        y = random_labels(gen, model.arch.task_kinds)
        _, g_avg, _ = multitask_gradients(model, x, y)
        mean = np.mean([shared_grad(model, t, MtlSample(x, y)) for t in range(model.n_tasks)], axis=0)
        np.testing.assert_allclose(g_avg, mean, rtol=0, atol=1e-12 * max(1.0, np.abs(mean).max()))


def test_per_sample_gradients_stack(gen):
    model = random_model(gen)
    X = gen.normal(size=(5, model.arch.input_dim))
    y = np.array([random_labels(gen, model.arch.task_kinds)[0] for _ in range(5)])
    losses, G, H = task_gradients(model, 0, X, y, per_sample=True)
    for i in range(5):
        l, g, h = task_gradients(model, 0, X[i], [y[i]])
        assert losses[i] == pytest.approx(l, rel=1e-13)
        np.testing.assert_allclose(G[i], g, rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(H[i], h, rtol=1e-12, atol=1e-13)
    _, g_mean, _ = task_gradients(model, 0, X, y)
    np.testing.assert_allclose(g_mean, G.mean(axis=0), rtol=1e-12, atol=1e-13)


# average loss


def test_average_loss_examples(gen):
    arch = ModelArch(1, (1,), ("mse",), activation="linear", trunk_bias=False)
    model = init_shared(arch, SeededRng(0)).with_shared([1.0]).with_head(0, [1.0, 0.0])
    s = MtlSample([1.0], [3.0])
    assert average_multitask_loss(model, s) == task_loss(1.0, 3.0, "mse")
    arch2 = ModelArch(1, (1,), ("mse", "mse"), activation="linear", trunk_bias=False)
    m2 = init_shared(arch2, SeededRng(0)).with_shared([1.0]).with_head(0, [1.0, 0.0]).with_head(1, [1.0, 0.0])
    # losses ½·2² = 2 and ½·(√8)² = 4
    assert average_multitask_loss(m2, MtlSample([1.0], [3.0, 1.0 + np.sqrt(8)])) == pytest.approx(3.0)


def test_average_loss_matches_per_task_loop(gen):
    for _ in range(20):
        model = random_model(gen)
        x = gen.normal(size=model.arch.input_dim)
        y = random_labels(gen, model.arch.task_kinds)
        loop = [task_loss(forward(model, t, x), y[t], model.arch.task_kinds[t]) for t in range(model.n_tasks)]
        assert average_multitask_loss(model, MtlSample(x, y)) == pytest.approx(np.mean(loop), rel=1e-13)


def test_average_loss_missing_labels():
    model = init_shared(ModelArch(1, (1,), ("mse", "mse")), SeededRng(0))
    with pytest.raises(ValueError, match="missing"):
        average_multitask_loss(model, MtlSample([1.0], [1.0, 0.0], [True, False]))


# flatten / layout


def test_flatten_row_major_example():
    arch = ModelArch(2, (2,), ("mse",), activation="linear")
    model = init_shared(arch, SeededRng(0))
    model = model.with_shared([1, 2, 3, 4, 5, 6])
    np.testing.assert_array_equal(model.shared.tensor("trunk.0.weight"), [[1, 2], [3, 4]])
    pv = ParamVector.from_tensors([("w", np.array([[1.0, 2.0], [3.0, 4.0]])), ("b", np.array([5.0]))])
    np.testing.assert_array_equal(pv.values, [1, 2, 3, 4, 5])


def test_unflatten_flatten_roundtrip(gen):
    for _ in range(20):
        model = random_model(gen)
        back = unflatten(flatten(model), model.arch)
        np.testing.assert_array_equal(flatten(back).values, flatten(model).values)
        assert back.shared.layout == model.shared.layout
        d = model_to_dict(model)
        np.testing.assert_array_equal(flatten(model_from_dict(d)).values, flatten(model).values)


def test_unflatten_rejects_wrong_layout():
    a = init_shared(ModelArch(2, (2,), ("mse",)), SeededRng(0))
    with pytest.raises(ValueError):
        unflatten(flatten(a), ModelArch(2, (3,), ("mse",)))


def test_tensor_views_agree_with_offsets(gen):
    for _ in range(30):
        shapes = [(f"t{k}", tuple(int(s) for s in gen.integers(1, 4, size=int(gen.integers(1, 3))))) for k in range(int(gen.integers(1, 5)))]
        layout = make_layout(shapes)
        values = gen.normal(size=sum(s.size for s in layout))
        pv = ParamVector(values, layout)
        pos = 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            np.testing.assert_array_equal(pv.tensor(name).ravel(), values[pos : pos + n])
            pos += n
        assert ParamVector.from_dict(pv.to_dict()).layout == layout


def test_param_vector_layout_must_partition():
    layout = make_layout([("a", (2,)), ("b", (3,))])
    with pytest.raises(ValueError):
        ParamVector(np.zeros(4), layout)


# data containers


def test_dataset_label_validation():
    with pytest.raises(ValueError):
        MtlDataset(np.zeros((2, 1)), np.array([[0.5], [1.0]]), ("a",), ("bce",))
    with pytest.raises(ValueError):
        MtlDataset(np.zeros((2, 1)), np.array([[np.inf], [1.0]]), ("a",), ("mse",))
    ds = MtlDataset(np.zeros((2, 1)), np.array([[7.0], [1.0]]), ("a",), ("bce",), np.array([[False], [True]]))
    assert len(ds) == 2

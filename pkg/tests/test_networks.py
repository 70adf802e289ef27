import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ctta.errors import ContractError, DimensionError
from ctta.model_config import ModelConfig
from ctta.networks import (
    DiscriminatorNet,
    TestDGModel,
    classify,
    ema_update,
    extract_domain_embeddings,
    forward_features,
    logits,
    loss_dis,
    loss_inv,
    loss_self,
    nearest_pairing,
)
from ctta.numerics import ParamSet, Tensor, backward, make_rng
from ctta.set_kernels import chamfer_tensor


def _randomize_amplifier(model, seed=3):
    rng = make_rng(seed, "test-amplifier")
    for p in model.amplifier.params.params.values():
        p.data = rng.normal(scale=0.5, size=p.shape)


class TestAmplifier:
    def test_fresh_adapters_are_an_exact_identity(self, model, rng):
        x = rng.normal(size=(8, 16))
        on = model.features(x, amplifier_on=True).data
        off = model.features(x, amplifier_on=False).data
        assert_array_equal(on, off)

    def test_off_path_is_deterministic(self, model, rng):
        x = rng.normal(size=(8, 16))
        assert_array_equal(model.features(x, amplifier_on=False).data, model.features(x, amplifier_on=False).data)

    def test_random_adapters_change_features(self, model, rng):
        _randomize_amplifier(model)
        x = rng.normal(size=(8, 16))
        diff = model.features(x, amplifier_on=True).data - model.features(x, amplifier_on=False).data
        assert np.linalg.norm(diff) > 0

    def test_disabled_flag_matches_amplifier_free_forward(self, model, rng):
        _randomize_amplifier(model)
        model.amplifier.enabled = False
        x = rng.normal(size=(8, 16))
        assert_array_equal(model.features(x, amplifier_on=True).data,
                           forward_features(model.encoder, None, x, amplifier_on=False).data)

    def test_rejects_wrong_input_width(self, model):
        with pytest.raises(DimensionError):
            model.features(np.zeros((2, 5)))


class TestClassify:
    def test_zero_logits_are_uniform(self, model, rng):
        for p in model.encoder.params.params.values():
            if p.name.startswith("head"):
                p.data = np.zeros_like(p.data)
        probs = classify(model.encoder, model.features(rng.normal(size=(3, 16)))).data
        assert_allclose(probs, np.full((3, 4), 0.25))

    def test_rows_sum_to_one(self, model, rng):
        probs = classify(model.encoder, model.features(rng.normal(size=(10, 16)))).data
        assert_allclose(probs.sum(axis=1), np.ones(10), atol=1e-12)

    def test_argmax_ignores_a_shared_shift(self, model, rng):
        out = logits(model.encoder, model.features(rng.normal(size=(10, 16))))
        shifted = Tensor(out.data + 7.0).softmax(axis=-1).data
        assert_array_equal(out.softmax(axis=-1).data.argmax(axis=1), shifted.argmax(axis=1))


class TestDomainEmbeddings:
    def test_one_embedding_per_sample(self, model, rng):
        emb = extract_domain_embeddings(model.extractor, model.features(rng.normal(size=(12, 16))))
        assert len(emb) == 12 and emb.dim == model.cfg.dom_dim

    def test_deterministic(self, model, rng):
        x = rng.normal(size=(4, 16))
        a = extract_domain_embeddings(model.extractor, model.features(x)).vectors
        b = extract_domain_embeddings(model.extractor, model.features(x)).vectors
        assert_array_equal(a, b)

    def test_finite_on_bounded_inputs(self, model, rng):
        emb = extract_domain_embeddings(model.extractor, model.features(rng.uniform(-10, 10, size=(50, 16))))
        assert np.all(np.isfinite(emb.vectors))


def _linear_discriminator(weights, bias=0.0):
    params = ParamSet()
    params.add("out.w", np.asarray(weights, dtype=np.float64).reshape(-1, 1))
    params.add("out.b", np.full((1, 1), bias))
    return DiscriminatorNet(params)


class TestLossDis:
    def test_uninformed_discriminator(self, rng):
        disc = _linear_discriminator(np.zeros(3))
        value = loss_dis(disc, rng.normal(size=(5, 3)), rng.normal(size=(5, 3))).item()
        assert value == pytest.approx(2 * np.log(2), abs=1e-12)

    def test_perfect_discrimination(self):
        disc = _linear_discriminator([1.0, 0.0])
        value = loss_dis(disc, np.array([[40.0, 0.0]]), np.array([[-40.0, 0.0]])).item()
        assert 0.0 < value < 1e-6

    def test_output_strictly_inside_unit_interval(self, model, rng):
        d = model.discriminator(rng.normal(size=(20, model.cfg.dom_dim))).data
        assert np.all((d > 0) & (d < 1))

    def test_unequal_sizes_are_balanced(self, rng):
        disc = _linear_discriminator(np.zeros(3))
        value = loss_dis(disc, rng.normal(size=(9, 3)), rng.normal(size=(4, 3)), make_rng(0, "t")).item()
        assert value == pytest.approx(2 * np.log(2), abs=1e-12)

    def test_empty_prototypes(self, rng):
        with pytest.raises(ContractError):
            loss_dis(_linear_discriminator(np.zeros(3)), rng.normal(size=(2, 3)), np.zeros((0, 3)))

class TestLossInv:
    def test_aligned_pairs(self, rng):
        f = rng.normal(size=(4, 3))
        assert loss_inv(f, f.copy(), [0, 1, 2, 3]).item() == 0.0

    def test_single_pair(self):
        assert loss_inv(np.array([[0.0, 0.0]]), np.array([[1.0, -2.0]]), [0]).item() == 3.0

    def test_permutation_invariant(self, rng):
        f, p = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        perm = rng.permutation(5)
        a = loss_inv(f, p, np.arange(5)).item()
        b = loss_inv(f[perm], p, perm).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_prototypes_receive_no_gradient(self, rng):
        f = Tensor(rng.normal(size=(3, 2)))
        p = Tensor(rng.normal(size=(3, 2)))
        backward(loss_inv(f, p, [0, 1, 2]))
        assert np.any(f.grad != 0)
        assert_array_equal(p.grad, np.zeros((3, 2)))

    def test_pairing_length(self):
        with pytest.raises(ContractError):
            loss_inv(np.zeros((2, 2)), np.zeros((2, 2)), [0])


class TestLossSelf:
    def test_uniform_prediction_one_hot_target(self):
        value = loss_self(Tensor(np.full(10, 0.1)), np.eye(10)[3], 10).item()
        assert value == pytest.approx(np.log(10) / 10, abs=1e-12)

    def test_perfect_agreement(self):
        target = np.eye(4)[[0, 2]]
        assert loss_self(Tensor(target), target, 4).item() == 0.0

    def test_non_negative(self, rng):
        for _ in range(10):
            y_hat = Tensor(rng.dirichlet(np.ones(5), size=3))
            y_tilde = rng.dirichlet(np.ones(5), size=3)
            assert loss_self(y_hat, y_tilde, 5).item() >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            loss_self(Tensor(np.full((2, 3), 1 / 3)), np.full((2, 4), 0.25), 3)


class TestEMA:
    def _perturb(self, model):
        for p in model.encoder.params.params.values():
            p.data = p.data + 1.0

    def test_momentum_one_keeps_teacher(self, model):
        before = model.teacher.encoder.params.snapshot()
        self._perturb(model)
        ema_update(model.teacher, model.encoder, 1.0)
        for name, value in model.teacher.encoder.params.snapshot().items():
            assert_array_equal(value, before[name])

    def test_momentum_zero_copies_student(self, model):
        self._perturb(model)
        ema_update(model.teacher, model.encoder, 0.0)
        for name, value in model.teacher.encoder.params.snapshot().items():
            assert_array_equal(value, model.encoder.params[name].data)

    def test_geometric_recursion(self, model):
        start = model.teacher.encoder.params.snapshot()
        self._perturb(model)
        mu, k = 0.9, 5
        for _ in range(k):
            ema_update(model.teacher, model.encoder, mu)
        for name, value in model.teacher.encoder.params.snapshot().items():
            expected = mu**k * start[name] + (1 - mu**k) * model.encoder.params[name].data
            assert_allclose(value, expected, rtol=1e-12, atol=1e-12)

    def test_rejects_out_of_range_momentum(self, model):
        with pytest.raises(ContractError):
            ema_update(model.teacher, model.encoder, 1.5)

    def test_teacher_mirrors_student_shapes(self, model):
        teacher = model.teacher.encoder.params
        assert set(teacher) == set(model.encoder.params)
        for name in teacher:
            assert teacher[name].shape == model.encoder.params[name].shape


def test_model_init_is_seeded():
    a = TestDGModel.init(ModelConfig(), seed=4).snapshot()
    b = TestDGModel.init(ModelConfig(), seed=4).snapshot()
    c = TestDGModel.init(ModelConfig(), seed=5).snapshot()
    assert_array_equal(a["encoder"]["layer0.w"], b["encoder"]["layer0.w"])
    assert not np.array_equal(a["encoder"]["layer0.w"], c["encoder"]["layer0.w"])


def _numeric_gradient(fn, x, h=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (fn(Tensor(up)).item() - fn(Tensor(down)).item()) / (2 * h)
    return grad


def _analytic_gradient(fn, x):
    t = Tensor(x.copy())
    backward(fn(t))
    return t.grad


@pytest.mark.parametrize("seed", range(20))
class TestLossGradients:
    def test_loss_dis(self, seed):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(dom_dim=3, discriminator_hidden=4)
        disc = DiscriminatorNet.init(cfg, make_rng(seed, "disc"))
        f, p = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        disc.params.zero_grad()
        backward(loss_dis(disc, f, p))
        h = 1e-5
        for name, w in disc.params.items():
            numeric = np.zeros_like(w.data)
            for idx in np.ndindex(*w.shape):
                orig = w.data[idx]
                w.data[idx] = orig + h
                up = loss_dis(disc, f, p).item()
                w.data[idx] = orig - h
                down = loss_dis(disc, f, p).item()
                w.data[idx] = orig
                numeric[idx] = (up - down) / (2 * h)
            assert_allclose(w.grad, numeric, rtol=1e-4, atol=1e-8, err_msg=name)

    def test_loss_self(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(scale=0.5, size=(3, 5))
        y_hat = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        target = rng.dirichlet(np.ones(5), size=3)
        fn = lambda t: loss_self(t, target, 5)
        assert_allclose(_analytic_gradient(fn, y_hat), _numeric_gradient(fn, y_hat), rtol=1e-4, atol=1e-7)

    def test_loss_inv(self, seed):
        rng = np.random.default_rng(seed)
        f, p = rng.normal(size=(4, 3)), rng.normal(size=(3, 3))
        pairing = nearest_pairing(f, p)
        fn = lambda t: loss_inv(t, p, pairing)
        assert_allclose(_analytic_gradient(fn, f), _numeric_gradient(fn, f), rtol=1e-4, atol=1e-7)

    def test_chamfer_against_prototypes(self, seed):
        rng = np.random.default_rng(seed)
        targets, protos = Tensor(rng.normal(size=(5, 3))), rng.normal(size=(3, 3))
        fn = lambda t: chamfer_tensor(targets, t)
        assert_allclose(_analytic_gradient(fn, protos), _numeric_gradient(fn, protos), rtol=1e-4, atol=1e-7)

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ctta.adaptation import (
    AdaptationState,
    DetectorState,
    DomainQueue,
    PrototypeState,
    adapt_batch,
    augment,
    batch_confidence,
    cold_start_prototypes,
    detect_change,
    on_domain_change,
    select_prototypes,
    step1,
    step2,
    update_prototypes,
)
from ctta.errors import AdaptationError, ContractError
from ctta.model_config import AblationFlags, AdaptationConfig, AugmentationConfig, ModelConfig
from ctta.model_scenario import DomainSegment, DomainSpec, ScenarioConfig
from ctta.networks import TestDGModel
from ctta.numerics import Tensor, make_rng
from ctta.set_kernels import EmbeddingSet, KernelConfig, chamfer_distance
from ctta.stream import stream


def _prototypes(model, x):
    with Tensor.no_grad():
        emb = model.embed(x).data
    return PrototypeState(emb, list(range(len(emb))), x.copy())


def _snapshot(params):
    return {name: value.copy() for name, value in params.snapshot().items()}


def _assert_same(before, params):
    for name, value in params.snapshot().items():
        assert_array_equal(value, before[name], err_msg=name)


class TestConfidence:
    def test_uniform(self):
        assert batch_confidence(np.full((4, 10), 0.1)) == pytest.approx(0.1)

    def test_one_hot(self):
        assert batch_confidence(np.eye(10)[:4]) == 1.0

    def test_mixed(self):
        assert batch_confidence(np.stack([np.full(10, 0.1), np.eye(10)[0]])) == pytest.approx(0.55)

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            batch_confidence(np.zeros((0, 3)))


class TestDetector:
    def test_first_batch_never_fires(self):
        assert detect_change(DetectorState(0.1), 0.9) is False

    def test_large_drop_fires(self):
        det = DetectorState(0.1, last_confidence=0.9)
        assert detect_change(det, 0.65) is True
        assert det.last_confidence == 0.65

    def test_no_shift(self):
        assert detect_change(DetectorState(0.1, last_confidence=0.7), 0.7) is False

    def test_stationary_trace(self):
        det = DetectorState(0.1)
        assert not any(detect_change(det, c) for c in [0.91, 0.93, 0.9, 0.92, 0.91, 0.9])

    def test_switch_on_known_batch(self):
        det = DetectorState(0.1)
        trace = [0.95, 0.94, 0.95, 0.6, 0.62, 0.61]
        fired = [i for i, c in enumerate(trace) if detect_change(det, c)]
        assert fired == [3]

    @pytest.mark.parametrize("threshold", [0.0, 1.0])
    def test_threshold_range(self, threshold):
        with pytest.raises(ContractError):
            DetectorState(threshold)


class TestQueue:
    def test_fifo_eviction(self):
        q = DomainQueue(3)
        q.extend(np.arange(10.0).reshape(5, 2), np.zeros((5, 4)), batch_index=7)
        assert len(q) == 3
        assert q.as_set().source_ids == [(7, 2), (7, 3), (7, 4)]
        assert_array_equal(q.as_set().vectors, [[4, 5], [6, 7], [8, 9]])

    def test_capacity_must_be_positive(self):
        with pytest.raises(ContractError):
            DomainQueue(0)


class TestSelection:
    def _queue(self, vectors):
        q = DomainQueue(16)
        q.extend(np.asarray(vectors, dtype=np.float64), np.arange(len(vectors) * 2.0).reshape(-1, 2), 0)
        return q

    def test_exactly_n_embeddings(self):
        vectors = np.array([[0.0, 1.0], [2.0, 0.5], [1.0, 1.0], [3.0, -1.0]])
        q = self._queue(vectors)
        proto = on_domain_change(q, AdaptationConfig(num_prototypes=4, queue_capacity=16))
        assert sorted(map(tuple, proto.vectors)) == sorted(map(tuple, vectors))
        assert len(q) == 0

    def test_covers_both_clusters(self):
        vectors = np.array([[0.0], [0.1], [0.2], [10.0], [10.1], [10.2]])
        proto = on_domain_change(self._queue(vectors), AdaptationConfig(num_prototypes=2, queue_capacity=16))
        picked = proto.vectors.ravel()
        assert min(picked) < 1.0 and max(picked) > 9.0

    def test_inputs_follow_their_embeddings(self):
        vectors = np.array([[0.0], [5.0], [9.0]])
        proto = on_domain_change(self._queue(vectors), AdaptationConfig(num_prototypes=2, queue_capacity=16))
        for vec, source, x in zip(proto.vectors, proto.source_ids, proto.source_inputs):
            assert_array_equal(vec, vectors[source[1]])
            assert_array_equal(x, [2.0 * source[1], 2.0 * source[1] + 1])

    def test_small_queue_is_padded(self):
        proto = on_domain_change(self._queue([[0.0], [1.0]]), AdaptationConfig(num_prototypes=5, queue_capacity=16))
        assert len(proto) == 5 and proto.padded

    def test_empty_queue(self):
        with pytest.raises(ContractError):
            on_domain_change(DomainQueue(4), AdaptationConfig(num_prototypes=2, queue_capacity=4))

    def test_random_selection_is_seeded(self, rng):
        F = EmbeddingSet(rng.normal(size=(10, 2)))
        a = select_prototypes(F, np.zeros((10, 1)), 3, KernelConfig(), greedy=False, rng=make_rng(1, "s"))
        b = select_prototypes(F, np.zeros((10, 1)), 3, KernelConfig(), greedy=False, rng=make_rng(1, "s"))
        assert a.source_ids == b.source_ids and len(set(a.source_ids)) == 3


class TestColdStart:
    def test_requested_count(self, model, rng):
        cfg = AdaptationConfig(num_prototypes=8, queue_capacity=32)
        assert len(cold_start_prototypes(model, rng.normal(size=(16, 16)), cfg)) == 8

    def test_zero_strength_augmentation_keeps_originals(self, model, rng):
        cfg = AdaptationConfig(num_prototypes=8, queue_capacity=32,
                               augmentation=AugmentationConfig(noise_std=0.0, max_rotation_deg=0.0))
        x = rng.normal(size=(16, 16))
        proto = cold_start_prototypes(model, x, cfg)
        for row in proto.source_inputs:
            assert any(np.array_equal(row, original) for original in x)
        with Tensor.no_grad():
            assert_allclose(proto.vectors, model.embed(proto.source_inputs).data, atol=1e-12)

    def test_augmentation_moves_embeddings(self, model, rng):
        x = rng.normal(size=(16, 16))
        moved = augment(x, AugmentationConfig(noise_std=0.1), make_rng(0, "aug"))
        with Tensor.no_grad():
            assert not np.allclose(model.embed(moved).data, model.embed(x).data)

    def test_augmentation_preserves_shape(self, rng):
        x = rng.normal(size=(5, 16))
        assert augment(x, AugmentationConfig(), make_rng(0, "aug")).shape == x.shape


class TestStep1:
    def _state(self, model, cfg, rng):
        x = rng.normal(size=(16, 16))
        proto = _prototypes(model, rng.normal(loc=1.5, size=(16, 16)))
        state = AdaptationState(model, cfg, proto)
        return state, x

    def test_encoder_is_frozen(self, model, rng):
        cfg = AdaptationConfig(num_prototypes=8, queue_capacity=32)
        state, x = self._state(model, cfg, rng)
        before = _snapshot(model.encoder.params)
        step1(model, state.step1_params, x, state.prototypes, cfg, rng)
        _assert_same(before, model.encoder.params)

    def test_loss_goes_down(self, model, rng):
        cfg = AdaptationConfig(num_prototypes=8, queue_capacity=32, lr_step1=1e-2)
        state, x = self._state(model, cfg, rng)
        losses = [step1(model, state.step1_params, x, state.prototypes, cfg) for _ in range(50)]
        assert all(np.isfinite(losses))
        assert losses[-1] < losses[0]

    def test_amplifier_is_trained_only_when_enabled(self, model, rng):
        cfg = AdaptationConfig(num_prototypes=8, queue_capacity=32, flags=AblationFlags(amplifier=False))
        state, x = self._state(model, cfg, rng)
        assert not any(name.startswith("amplifier.") for name in state.step1_params)


class TestStep2:
    def _setup(self, model, rng, **overrides):
        cfg = AdaptationConfig(num_prototypes=16, queue_capacity=32, **overrides)
        x = rng.normal(size=(16, 16))
        proto = _prototypes(model, rng.normal(loc=1.0, size=(16, 16)))
        AdaptationState(model, cfg, proto)
        return cfg, x, proto

    def test_only_encoder_moves(self, model, rng):
        cfg, x, proto = self._setup(model, rng)
        frozen = {g: _snapshot(p) for g, p in model.groups().items() if g in ("extractor", "amplifier", "discriminator")}
        enc_before = _snapshot(model.encoder.params)
        step2(model, x, proto, cfg)
        for group, before in frozen.items():
            _assert_same(before, model.groups()[group])
        assert any(not np.array_equal(v, enc_before[k]) for k, v in model.encoder.params.snapshot().items())

    def test_zero_weight_is_plain_self_training(self, model, rng):
        cfg, x, proto = self._setup(model, rng, lambda_inv=0.0)
        result = step2(model, x, proto, cfg)
        assert result.loss_inv is None
        assert result.loss == result.loss_self

    def test_invariance_loss_goes_down(self, model, rng):
        cfg, x, proto = self._setup(model, rng, lr_step2=1e-2, flags=AblationFlags(self_training=False))
        values = [step2(model, x, proto, cfg).loss_inv for _ in range(50)]
        assert values[-1] < values[0]

    def test_teacher_follows_student(self, model, rng):
        cfg, x, proto = self._setup(model, rng, ema_momentum=0.5)
        teacher_before = _snapshot(model.teacher.encoder.params)
        step2(model, x, proto, cfg)
        name = "layer0.w"
        expected = 0.5 * teacher_before[name] + 0.5 * model.encoder.params[name].data
        assert_allclose(model.teacher.encoder.params[name].data, expected, atol=1e-15)


class TestPrototypeUpdate:
    def test_unchanged_model_needs_no_update(self, rng):
        F = rng.normal(size=(10, 4))
        proto = PrototypeState(rng.normal(size=(5, 4)), list(range(5)), np.zeros((5, 2)))
        before = proto.vectors.copy()
        assert update_prototypes(proto, F, F.copy(), AdaptationConfig()) == 0.0
        assert_array_equal(proto.vectors, before)

    def test_residual_never_grows(self, rng):
        cfg = AdaptationConfig(proto_update_steps=10)
        for seed in range(5):
            local = np.random.default_rng(seed)
            F_before = local.normal(size=(12, 4))
            F_after = F_before + local.normal(scale=0.3, size=F_before.shape)
            proto = PrototypeState(local.normal(size=(6, 4)), list(range(6)), np.zeros((6, 2)))
            initial = abs(chamfer_distance(F_after, proto.vectors) - chamfer_distance(F_before, proto.vectors))
            assert update_prototypes(proto, F_before, F_after, cfg) <= initial
            assert np.all(np.isfinite(proto.vectors))


class TestAdaptBatch:
    def _run(self, checkpoint_model, cfg, batches):
        state = AdaptationState.start(checkpoint_model, cfg, batches[0])
        return [adapt_batch(state, x, i) for i, x in enumerate(batches)]

    def test_records_and_predictions(self, model, adapt_cfg, rng):
        batches = [rng.normal(size=(32, 16)) for _ in range(4)]
        out = self._run(model, adapt_cfg, batches)
        for i, (probs, rec) in enumerate(out):
            assert probs.shape == (32, 4)
            assert_allclose(probs.sum(axis=1), np.ones(32), atol=1e-12)
            assert rec.index == i and rec.batch_size == 32
            assert rec.loss_dis is not None and rec.loss_self is not None and rec.loss_inv is not None
            assert rec.update_residual is not None and rec.drift_mmd_after is not None
        assert out[0][1].detected is False

    def test_same_seed_same_trajectory(self, adapt_cfg):
        batches = [np.random.default_rng(k).normal(size=(32, 16)) for k in range(4)]
        a = self._run(TestDGModel.init(ModelConfig(), 0), adapt_cfg, batches)
        b = self._run(TestDGModel.init(ModelConfig(), 0), adapt_cfg, batches)
        for (pa, ra), (pb, rb) in zip(a, b):
            assert_array_equal(pa, pb)
            assert ra == rb

    def test_ablated_components_are_skipped(self, model, rng):
        cfg = AdaptationConfig(queue_capacity=32, num_prototypes=8,
                               flags=AblationFlags(discrimination=False, prototype_update=False))
        extractor_before = _snapshot(model.extractor.params)
        batches = [rng.normal(size=(32, 16)) for _ in range(3)]
        for _, rec in self._run(model, cfg, batches):
            assert rec.loss_dis is None and rec.update_residual is None
        _assert_same(extractor_before, model.extractor.params)

    def test_numeric_failures_name_the_batch(self, model, adapt_cfg, rng):
        state = AdaptationState.start(model, adapt_cfg, rng.normal(size=(32, 16)))
        bad = rng.normal(size=(32, 16))
        bad[0, 0] = np.nan
        with pytest.raises(AdaptationError) as info:
            adapt_batch(state, bad, 41)
        assert info.value.batch_index == 41


class TestFreezeContracts:
    def test_hold_on_every_step_of_a_fifty_batch_run(self, model, monkeypatch):
        cfg = AdaptationConfig(queue_capacity=32, num_prototypes=8)
        scenario = ScenarioConfig(
            domains=[DomainSegment(domain=DomainSpec(family="additive-noise", severity=4), batches=25),
                     DomainSegment(domain=DomainSpec(family="affine-contrast", severity=4), batches=25)],
            batch_size=16,
        )
        calls = {"step1": 0, "step2": 0}

        def guarded(real, name, frozen_groups):
            def run(m, *args, **kwargs):
                before = {g: _snapshot(m.groups()[g]) for g in frozen_groups}
                out = real(m, *args, **kwargs)
                for g in frozen_groups:
                    _assert_same(before[g], m.groups()[g])
                calls[name] += 1
                return out
            return run

        monkeypatch.setattr("ctta.adaptation.step1", guarded(step1, "step1", ("encoder", "teacher")))
        monkeypatch.setattr("ctta.adaptation.step2", guarded(step2, "step2", ("extractor", "amplifier", "discriminator")))
        items = list(stream(scenario))
        state = AdaptationState.start(model, cfg, items[0].batch.x)
        for item in items:
            adapt_batch(state, item.batch.x, item.index)
        assert calls == {"step1": 50, "step2": 50}

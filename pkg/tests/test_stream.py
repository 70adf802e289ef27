import numpy as np
import pytest
from numpy.testing import assert_array_equal

from ctta.errors import ConfigError
from ctta.model_scenario import TRANSFORM_FAMILIES, BaseTask, DomainSegment, DomainSpec, ScenarioConfig
from ctta.numerics import make_rng
from ctta.stream import apply_domain, distortion_magnitude, heldout_batches, sample_source, schedule, stream


def _scenario(families, batches=10, severity=5, **kwargs):
    return ScenarioConfig(
        domains=[DomainSegment(domain=DomainSpec(family=f, severity=severity), batches=batches)
                 for f in families],
        batch_size=8,
        **kwargs,
    )


class TestSource:
    def test_reproducible(self, task):
        a = sample_source(task, 50, make_rng(3, "x"))
        b = sample_source(task, 50, make_rng(3, "x"))
        assert_array_equal(a.x, b.x)
        assert_array_equal(a.y, b.y)

    def test_label_range(self, task):
        y = sample_source(task, 500).y
        assert y.min() >= 0 and y.max() < task.num_classes

    def test_class_means(self, task):
        batch = sample_source(task, 160_000, make_rng(0, "means"))
        means = task.class_means()
        tolerance = 3 * task.noise_scale / 100
        for c in range(task.num_classes):
            assert np.max(np.abs(batch.x[batch.y == c].mean(axis=0) - means[c])) < tolerance

    def test_means_are_distinct(self):
        means = BaseTask(num_classes=6, dim=3, seed=9).class_means()
        assert len({tuple(np.round(m, 9)) for m in means}) == 6


class TestTransforms:
    @pytest.mark.parametrize("family", TRANSFORM_FAMILIES)
    def test_severity_zero_is_identity(self, family, task):
        clean = sample_source(task, 20)
        out = apply_domain(DomainSpec(family=family, severity=0), clean, make_rng(0, "c"))
        assert_array_equal(out.x, clean.x)

    @pytest.mark.parametrize("family", TRANSFORM_FAMILIES)
    def test_labels_untouched(self, family, task):
        clean = sample_source(task, 20)
        assert_array_equal(apply_domain(DomainSpec(family=family), clean, make_rng(0, "c")).y, clean.y)

    @pytest.mark.parametrize("family", TRANSFORM_FAMILIES)
    def test_declared_magnitude_grows_with_severity(self, family):
        mags = [distortion_magnitude(DomainSpec(family=family, severity=s)) for s in range(6)]
        assert all(b > a for a, b in zip(mags, mags[1:]))

    def test_noise_displacement_grows_with_severity(self, task):
        clean = sample_source(task, 200)

        def displacement(severity):
            out = apply_domain(DomainSpec(family="additive-noise", severity=severity), clean, make_rng(0, "n"))
            return np.linalg.norm(out.x - clean.x, axis=1).mean()

        assert displacement(5) > displacement(1)

    def test_unknown_family(self, task):
        with pytest.raises(ConfigError):
            apply_domain(DomainSpec(family="motion-blur"), sample_source(task, 4))

    def test_tag(self):
        assert DomainSpec(family="coordinate-rotation", severity=3).tag == "coordinate-rotation@3"
        assert DomainSpec(family="coordinate-rotation", name="rot", severity=3).tag == "rot@3"


class TestSchedule:
    def test_sequential_change_points(self):
        items = list(stream(_scenario(TRANSFORM_FAMILIES[:3])))
        assert len(items) == 30
        assert [it.index for it in items if it.change] == [10, 20]
        assert [it.index for it in items] == list(range(30))

    def test_cyclic_rounds_revisit_every_domain(self):
        scenario = _scenario(TRANSFORM_FAMILIES[:2], batches=2, rounds=3)
        segments = schedule(scenario)
        assert [s.domain.family for s in segments].count(TRANSFORM_FAMILIES[0]) == 3
        assert [s.round for s in segments] == [0, 0, 1, 1, 2, 2]
        assert sum(it.change for it in stream(scenario)) == 5

    def test_gradual_severity_trace(self):
        segments = schedule(_scenario(["additive-noise"], batches=1, mode="gradual"))
        assert [s.domain.severity for s in segments] == [1, 2, 3, 4, 5, 4, 3, 2, 1]

    def test_stream_is_reproducible(self):
        scenario = _scenario(TRANSFORM_FAMILIES[:2], batches=2)
        for a, b in zip(stream(scenario), stream(scenario)):
            assert_array_equal(a.batch.x, b.batch.x)

    def test_single_domain_has_no_changes(self):
        assert not any(it.change for it in stream(_scenario(["affine-contrast"], batches=4, rounds=2)))

    def test_heldout_batches(self):
        scenario = _scenario(["additive-noise"], heldout_batches=3)
        spec = DomainSpec(family="coordinate-dropout")
        batches = list(heldout_batches(scenario, spec))
        assert len(batches) == 3
        assert_array_equal(batches[0].x, next(heldout_batches(scenario, spec)).x)

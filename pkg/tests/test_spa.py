"""Prototype bank updates, soft assignments, and alignment-loss gradients."""

import numpy as np
import pytest
from conftest import finite_diff, max_rel_error
from hypothesis import given, settings
from hypothesis import strategies as st

from evseg.numeric import ShapeError
from evseg.spa import (
    EmptyBankError,
    PrototypeBank,
    intra_target_loss,
    js_alignment_loss,
    soft_assign,
    update_prototypes,
)


def seeded_bank(rng, k=3, d=4, momentum=0.9):
    bank = PrototypeBank.empty(k, d, momentum)
    features = rng.normal(size=(d, 6, 6))
    labels = rng.integers(0, k, size=(6, 6))
    update_prototypes(bank, features, labels)
    return bank


class TestUpdatePrototypes:
    def test_constant_features_single_class(self):
        bank = PrototypeBank.empty(2, 3)
        v = np.array([1.0, -2.0, 0.5])
        features = np.tile(v[:, None, None], (1, 4, 4))
        update_prototypes(bank, features, np.zeros((4, 4), dtype=np.int64))
        np.testing.assert_allclose(bank.prototypes[0], v, rtol=1e-12)
        assert bank.seen[0] and not bank.seen[1]

    def test_absent_class_untouched(self):
        rng = np.random.default_rng(1)
        bank = seeded_bank(rng)
        frozen = bank.prototypes[2].copy()
        features = rng.normal(size=(4, 3, 3))
        update_prototypes(bank, features, np.zeros((3, 3), dtype=np.int64))
        np.testing.assert_array_equal(bank.prototypes[2], frozen)

    def test_momentum_zero_is_batch_mean(self):
        rng = np.random.default_rng(2)
        bank = seeded_bank(rng, momentum=0.0)
        features = rng.normal(size=(4, 5, 5))
        labels = np.ones((5, 5), dtype=np.int64)
        update_prototypes(bank, features, labels)
        np.testing.assert_allclose(
            bank.prototypes[1], features.reshape(4, -1).mean(axis=1), rtol=1e-12
        )

    def test_momentum_composition(self):
        rng = np.random.default_rng(3)
        features = rng.normal(size=(4, 5, 5))
        labels = rng.integers(0, 3, size=(5, 5))
        twice = seeded_bank(np.random.default_rng(42), momentum=0.8)
        once = PrototypeBank(
            prototypes=twice.prototypes.copy(),
            seen=twice.seen.copy(),
            momentum=0.8 * 0.8,
        )
        update_prototypes(twice, features, labels)
        update_prototypes(twice, features, labels)
        update_prototypes(once, features, labels)
        np.testing.assert_allclose(twice.prototypes, once.prototypes, rtol=1e-12)


class TestSoftAssign:
    def test_single_prototype(self):
        bank = PrototypeBank.empty(3, 2)
        bank.prototypes[1] = [1.0, 1.0]
        bank.seen[1] = True
        out = soft_assign(np.random.default_rng(0).normal(size=(2, 4, 4)), bank, 1.0)
        np.testing.assert_array_equal(out.z, np.ones((1, 4, 4)))

    def test_equidistant_pixel(self):
        bank = PrototypeBank.empty(2, 2)
        bank.prototypes[0] = [1.0, 0.0]
        bank.prototypes[1] = [-1.0, 0.0]
        bank.seen[:] = True
        features = np.zeros((2, 1, 1))
        out = soft_assign(features, bank, 1.0)
        np.testing.assert_allclose(out.z[:, 0, 0], [0.5, 0.5], rtol=1e-12)

    def test_closed_form_distances(self):
        # distances (0, 1) at tau=1 give 1/(1+e^-1) and e^-1/(1+e^-1)
        bank = PrototypeBank.empty(2, 1)
        bank.prototypes[0] = [0.0]
        bank.prototypes[1] = [1.0]
        bank.seen[:] = True
        out = soft_assign(np.zeros((1, 1, 1)), bank, 1.0)
        expected = 1.0 / (1.0 + np.exp(-1.0))
        np.testing.assert_allclose(
            out.z[:, 0, 0], [expected, 1.0 - expected], rtol=1e-12
        )
        assert out.z[0, 0, 0] == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_empty_bank(self):
        with pytest.raises(EmptyBankError):
            soft_assign(np.zeros((2, 2, 2)), PrototypeBank.empty(3, 2), 1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_distribution_property(self, seed):
        rng = np.random.default_rng(seed)
        bank = seeded_bank(rng)
        out = soft_assign(rng.normal(size=(4, 3, 3)), bank, 0.7)
        assert np.all(out.z >= 0.0)
        np.testing.assert_allclose(out.z.sum(axis=0), 1.0, atol=1e-9)

    def test_temperature_limits(self):
        rng = np.random.default_rng(5)
        bank = seeded_bank(rng)
        features = rng.normal(size=(4, 4, 4))
        hot = soft_assign(features, bank, 1e6)
        uniform = 1.0 / bank.seen.sum()
        assert np.abs(hot.z - uniform).max() <= 1e-3
        cold = soft_assign(features, bank, 1e-4)
        nearest = cold.distances.argmin(axis=0)
        assert np.all(cold.z.argmax(axis=0) == nearest)
        assert cold.z.max(axis=0).min() > 0.999


def paired_assignments(rng, bank, tau=0.8):
    fa = rng.normal(size=(4, 4, 4))
    fb = rng.normal(size=(4, 4, 4))
    return fa, fb, soft_assign(fa, bank, tau), soft_assign(fb, bank, tau)


class TestJsAlignmentLoss:
    def test_identity(self):
        rng = np.random.default_rng(0)
        bank = seeded_bank(rng)
        f = rng.normal(size=(4, 4, 4))
        za = soft_assign(f, bank, 1.0)
        zb = soft_assign(f.copy(), bank, 1.0)
        loss, dfa, dfb = js_alignment_loss(za, zb)
        assert loss == 0.0
        np.testing.assert_allclose(dfa, -dfb, atol=1e-15)
        np.testing.assert_allclose(dfa + dfb, 0.0, atol=1e-15)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(1)
        bank = seeded_bank(rng)
        _, _, za, zb = paired_assignments(rng, bank)
        assert js_alignment_loss(za, zb)[0] == js_alignment_loss(zb, za)[0]

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        bank = seeded_bank(rng, d=3)
        fa = rng.normal(size=(3, 4, 4))
        fb = rng.normal(size=(3, 4, 4))
        tau = 0.9
        loss, dfa, dfb = js_alignment_loss(
            soft_assign(fa, bank, tau), soft_assign(fb, bank, tau)
        )

        def value_a(vec):
            za = soft_assign(vec.reshape(3, 4, 4), bank, tau)
            return js_alignment_loss(za, soft_assign(fb, bank, tau))[0]

        def value_b(vec):
            zb = soft_assign(vec.reshape(3, 4, 4), bank, tau)
            return js_alignment_loss(soft_assign(fa, bank, tau), zb)[0]

        fd_a = finite_diff(value_a, fa.ravel(), step=1e-6)
        fd_b = finite_diff(value_b, fb.ravel(), step=1e-6)
        assert max_rel_error(dfa.ravel(), fd_a) <= 1e-5
        assert max_rel_error(dfb.ravel(), fd_b) <= 1e-5

    def test_mismatched_prototype_sets_rejected(self):
        rng = np.random.default_rng(3)
        bank = seeded_bank(rng)
        other = bank.copy()
        other.seen[0] = False
        f = rng.normal(size=(4, 4, 4))
        with pytest.raises((ValueError, ShapeError)):
            js_alignment_loss(
                soft_assign(f, bank, 1.0), soft_assign(f, other, 1.0)
            )


class TestIntraTargetLoss:
    def test_equal_features_zero(self):
        rng = np.random.default_rng(4)
        bank = seeded_bank(rng)
        f = rng.normal(size=(4, 5, 5))
        loss, _, _ = intra_target_loss(f, f.copy(), bank, 1.0)
        assert loss == 0.0

    def test_swap_invariance(self):
        rng = np.random.default_rng(5)
        bank = seeded_bank(rng)
        fa = rng.normal(size=(4, 5, 5))
        fb = rng.normal(size=(4, 5, 5))
        assert (
            intra_target_loss(fa, fb, bank, 0.8)[0]
            == intra_target_loss(fb, fa, bank, 0.8)[0]
        )

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        bank = seeded_bank(rng, d=3)
        fa = rng.normal(size=(3, 4, 4))
        fb = rng.normal(size=(3, 4, 4))
        loss, dfa, dfb = intra_target_loss(fa, fb, bank, 1.1)

        def value(vec):
            half = vec.size // 2
            return intra_target_loss(
                vec[:half].reshape(3, 4, 4), vec[half:].reshape(3, 4, 4), bank, 1.1
            )[0]

        stacked = np.concatenate([fa.ravel(), fb.ravel()])
        fd = finite_diff(value, stacked, step=1e-6)
        analytic = np.concatenate([dfa.ravel(), dfb.ravel()])
        assert max_rel_error(analytic, fd) <= 1e-5

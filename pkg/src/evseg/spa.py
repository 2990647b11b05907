"""Prototype-based feature alignment.

Class prototypes are running means of penultimate feature vectors. Each
pixel's feature is softly assigned to the prototypes through a temperature-
scaled softmax over negative Euclidean distances, and paired views are
pulled together by the Jensen-Shannon divergence between their assignment
distributions. Gradients flow into both feature maps but never into the
prototypes, which are updated separately as running averages.
"""

from dataclasses import dataclass, field

import numpy as np

from .numeric import EPS, ShapeError


class EmptyBankError(ValueError):
    """No class has contributed to the prototype bank yet."""


@dataclass
class PrototypeBank:
    """Per-class feature centroids with running-average state."""

    prototypes: np.ndarray  # (K, D)
    seen: np.ndarray  # (K,) bool
    momentum: float = 0.9

    @classmethod
    def empty(cls, num_classes, feature_dim, momentum=0.9):
        return cls(
            prototypes=np.zeros((num_classes, feature_dim), dtype=np.float64),
            seen=np.zeros(num_classes, dtype=bool),
            momentum=momentum,
        )

    def copy(self):
        return PrototypeBank(
            prototypes=self.prototypes.copy(),
            seen=self.seen.copy(),
            momentum=self.momentum,
        )

    @property
    def any_seen(self):
        return bool(self.seen.any())


@dataclass
class SoftAssignment:
    """Per-pixel distribution over the seen prototypes, plus what the
    backward pass needs: distances, the prototype matrix, and the features."""

    z: np.ndarray  # (K', H, W)
    distances: np.ndarray  # (K', H, W)
    features: np.ndarray  # (D, H, W)
    prototypes: np.ndarray  # (K', D)
    class_ids: np.ndarray  # (K',)
    tau: float


def update_prototypes(bank: PrototypeBank, features, labels) -> PrototypeBank:
    """Fold the batch mean of each present class into the bank, in place.

    First sighting of a class adopts the batch mean outright; later ones
    blend with the configured momentum. Absent classes stay bit-unchanged.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 3 or labels.shape != features.shape[1:]:
        raise ShapeError("features and labels are not spatially aligned")
    flat = features.reshape(features.shape[0], -1)
    flat_labels = labels.ravel()
    for c in np.unique(flat_labels):
        mean = flat[:, flat_labels == c].mean(axis=1)
        if bank.seen[c]:
            bank.prototypes[c] = (
                bank.momentum * bank.prototypes[c] + (1.0 - bank.momentum) * mean
            )
        else:
            bank.prototypes[c] = mean
            bank.seen[c] = True
    return bank


def soft_assign(features, bank: PrototypeBank, tau: float) -> SoftAssignment:
    """Temperature softmax over negative feature-to-prototype distances."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not bank.any_seen:
        raise EmptyBankError("soft assignment needs at least one seen prototype")
    features = np.asarray(features, dtype=np.float64)
    d, h, w = features.shape
    class_ids = np.flatnonzero(bank.seen)
    protos = bank.prototypes[class_ids]
    flat = features.reshape(d, -1).T  # (HW, D)
    diff = flat[:, None, :] - protos[None, :, :]  # (HW, K', D)
    dist = np.sqrt((diff * diff).sum(axis=2))  # (HW, K')
    scores = -dist / tau
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    z = e / e.sum(axis=1, keepdims=True)
    kp = class_ids.size
    return SoftAssignment(
        z=z.T.reshape(kp, h, w),
        distances=dist.T.reshape(kp, h, w),
        features=features,
        prototypes=protos,
        class_ids=class_ids,
        tau=tau,
    )


def _js_grads_wrt_z(za, zb):
    """Per-pixel JS value and d(JS)/dz for both sides; shapes (K', HW)."""
    m = (za + zb) / 2.0
    log_m = np.log(np.maximum(m, EPS))
    ratio_a = np.log(np.maximum(za, EPS)) - log_m
    ratio_b = np.log(np.maximum(zb, EPS)) - log_m
    js = 0.5 * (za * ratio_a).sum(axis=0) + 0.5 * (zb * ratio_b).sum(axis=0)
    return js, 0.5 * ratio_a, 0.5 * ratio_b


def _feature_grad(assign: SoftAssignment, dz):
    """Chain d(loss)/dz through the assignment softmax and the distances."""
    kp, h, w = assign.z.shape
    z = assign.z.reshape(kp, -1)
    dz = dz.reshape(kp, -1)
    dscores = z * (dz - (dz * z).sum(axis=0, keepdims=True))
    ddist = -dscores / assign.tau  # (K', HW)
    flat = assign.features.reshape(assign.features.shape[0], -1).T  # (HW, D)
    diff = flat[:, None, :] - assign.prototypes[None, :, :]  # (HW, K', D)
    dist = assign.distances.reshape(kp, -1).T  # (HW, K')
    unit = diff / np.maximum(dist, EPS)[:, :, None]
    dfeat = (ddist.T[:, :, None] * unit).sum(axis=1)  # (HW, D)
    return dfeat.T.reshape(assign.features.shape)


def js_alignment_loss(z_image: SoftAssignment, z_event: SoftAssignment):
    """Mean per-pixel JS divergence between two assignment maps.

    Returns (loss, dfeatures_image, dfeatures_event); both maps must be
    built against the same prototype set.
    """
    if z_image.z.shape != z_event.z.shape:
        raise ShapeError("assignment maps must have equal shapes")
    if not np.array_equal(z_image.class_ids, z_event.class_ids):
        raise ValueError("assignment maps use different prototype sets")
    kp = z_image.z.shape[0]
    za = z_image.z.reshape(kp, -1)
    zb = z_event.z.reshape(kp, -1)
    js, dza, dzb = _js_grads_wrt_z(za, zb)
    n = js.size
    loss = float(js.mean())
    dfa = _feature_grad(z_image, dza / n)
    dfb = _feature_grad(z_event, dzb / n)
    return loss, dfa, dfb


def intra_target_loss(features_el, features_eu, recon_bank: PrototypeBank, tau):
    """Alignment between reconstructed-subset and plain-subset event features.

    Both maps are assigned against the reconstruction prototype bank and
    compared pixelwise. Returns (loss, dfeatures_el, dfeatures_eu).
    """
    features_el = np.asarray(features_el, dtype=np.float64)
    features_eu = np.asarray(features_eu, dtype=np.float64)
    if features_el.shape != features_eu.shape:
        raise ShapeError("paired feature maps must have equal shapes")
    z_l = soft_assign(features_el, recon_bank, tau)
    z_u = soft_assign(features_eu, recon_bank, tau)
    return js_alignment_loss(z_l, z_u)

"""Hybrid pseudo-label machinery.

A small fraction of target samples gets an image reconstructed from its
events; the student's prediction on that image is one pseudo-label source
and the teacher's prediction on the raw events is the other. Their convex
combination is the refined label. The reconstruction channel is pluggable:
an oracle that degrades the clean rendering, or ingestion of sidecar files
produced elsewhere.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .events import render_scene
from .numeric import ShapeError, argmax_map, one_hot
from .seeding import derive_rng

log = logging.getLogger(__name__)

DROPOUT_BLOCK = 4  # side length in pixels of the block-dropout grid


@dataclass
class TargetSplit:
    """Partition of target sample indices into reconstructed and plain."""

    labeled_indices: np.ndarray
    unlabeled_indices: np.ndarray
    proportion: float


@dataclass
class ReconChannelConfig:
    """Reconstruction channel settings.

    ``oracle`` degrades the clean rendering (blur, noise, block dropout) to
    mimic low-quality reconstructed images; ``file`` loads sidecar images
    from ``directory``.
    """

    mode: str = "oracle"
    blur_radius: float = 0.0
    noise_sigma: float = 0.0
    dropout_rate: float = 0.0
    seed: int = 0
    directory: str = ""

    def validate(self):
        if self.mode not in ("oracle", "file"):
            raise ValueError(f"unknown reconstruction mode {self.mode!r}")
        if self.blur_radius < 0 or self.noise_sigma < 0:
            raise ValueError("blur radius and noise sigma must be non-negative")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout rate must lie in [0, 1]")


@dataclass
class RefinedLabel:
    """Mixed pseudo-label distribution for one reconstructed target sample."""

    prob: np.ndarray  # (K, H, W)


def split_target(n: int, proportion: float, seed: int) -> TargetSplit:
    """Sample round(proportion*n) indices without replacement, seeded."""
    if not 0.0 <= proportion <= 1.0:
        raise ValueError("proportion must lie in [0, 1]")
    count = int(math.floor(proportion * n + 0.5))
    rng = derive_rng(seed, "target-split")
    labeled = np.sort(rng.choice(n, size=count, replace=False))
    mask = np.ones(n, dtype=bool)
    mask[labeled] = False
    return TargetSplit(
        labeled_indices=labeled.astype(np.int64),
        unlabeled_indices=np.flatnonzero(mask).astype(np.int64),
        proportion=proportion,
    )


def _block_dropout(image, rate, rng):
    h, w = image.shape
    out = image.copy()
    for by in range(0, h, DROPOUT_BLOCK):
        for bx in range(0, w, DROPOUT_BLOCK):
            if rng.random() < rate:
                block = out[by : by + DROPOUT_BLOCK, bx : bx + DROPOUT_BLOCK]
                block[...] = block.mean()
    return out


def reconstruct(sample, cfg: ReconChannelConfig):
    """Produce the reconstructed image for one target sample.

    Oracle mode renders the sample's scene at its recorded step and applies
    blur, additive noise, and block dropout, all seeded per sample. File
    mode reads ``<sample_id>.recon.pgm`` from the configured directory.
    """
    cfg.validate()
    if cfg.mode == "file":
        from .pgm import read_pgm

        path = f"{cfg.directory}/{sample.sample_id}.recon.pgm"
        try:
            raw = read_pgm(path)
        except OSError as exc:
            raise IOError(
                f"missing reconstruction sidecar for {sample.sample_id}: {exc}"
            ) from exc
        return raw.astype(np.float64) / 255.0
    if sample.scene is None:
        raise ValueError(f"sample {sample.sample_id} carries no scene reference")
    image, _ = render_scene(sample.scene, sample.scene_step)
    rng = derive_rng(cfg.seed, "recon", sample.sample_id)
    if cfg.blur_radius > 0:
        image = ndimage.gaussian_filter(image, sigma=cfg.blur_radius)
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
        image = np.clip(image, 0.0, 1.0)
    if cfg.dropout_rate > 0:
        image = _block_dropout(image, cfg.dropout_rate, rng)
    return image


def refine_label(psi_on_recon, phi_on_event, alpha: float) -> RefinedLabel:
    """Convex combination (1-alpha)*student-on-image + alpha*teacher-on-events."""
    psi_on_recon = np.asarray(psi_on_recon, dtype=np.float64)
    phi_on_event = np.asarray(phi_on_event, dtype=np.float64)
    if psi_on_recon.shape != phi_on_event.shape:
        raise ShapeError("probability maps must have equal shapes")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return RefinedLabel(prob=(1.0 - alpha) * psi_on_recon + alpha * phi_on_event)


def _ce_and_grad(student_prob, target_prob, mask=None):
    """Masked mean soft cross entropy and its gradient w.r.t. the logits.

    For probabilities produced by a softmax, d(mean CE)/d(logits) is
    (prob - target)/n_included at included pixels and zero elsewhere.
    """
    k, h, w = student_prob.shape
    log_pred = np.log(np.clip(student_prob, 1e-12, None))
    per_pixel = -(target_prob * log_pred).sum(axis=0)
    if mask is None:
        included = h * w
        loss = float(per_pixel.mean())
        grad = (student_prob - target_prob) / included
    else:
        included = int(mask.sum())
        if included == 0:
            return 0.0, np.zeros_like(student_prob)
        loss = float(per_pixel[mask].mean())
        grad = np.where(mask[None], (student_prob - target_prob) / included, 0.0)
    return loss, grad


def loss_s(student_prob, labels):
    """Supervised loss against ground-truth labels; returns (value, dlogits)."""
    student_prob = np.asarray(student_prob, dtype=np.float64)
    labels = np.asarray(labels)
    if student_prob.ndim != 3 or labels.shape != student_prob.shape[1:]:
        raise ShapeError("label map shape does not match probability map")
    target = one_hot(labels, student_prob.shape[0])
    return _ce_and_grad(student_prob, target)


def loss_u(student_prob, teacher_prob, threshold: float = 0.0):
    """Self-training loss on hard teacher pseudo labels; returns (value, dlogits).

    ``threshold`` optionally masks pixels whose teacher confidence falls
    below it; the default keeps every pixel. When everything is masked the
    loss is zero with a zero gradient.
    """
    student_prob = np.asarray(student_prob, dtype=np.float64)
    teacher_prob = np.asarray(teacher_prob, dtype=np.float64)
    if student_prob.shape != teacher_prob.shape:
        raise ShapeError("student and teacher maps must have equal shapes")
    pseudo = argmax_map(teacher_prob)
    target = one_hot(pseudo, student_prob.shape[0])
    mask = None
    if threshold > 0.0:
        mask = teacher_prob.max(axis=0) >= threshold
        if not mask.any():
            log.warning("confidence threshold %.3f masked every pixel", threshold)
    return _ce_and_grad(student_prob, target, mask)


def loss_l(student_prob_on_event, refined: RefinedLabel):
    """Loss against the refined soft pseudo label; returns (value, dlogits)."""
    student_prob_on_event = np.asarray(student_prob_on_event, dtype=np.float64)
    if student_prob_on_event.shape != refined.prob.shape:
        raise ShapeError("student map and refined label must have equal shapes")
    return _ce_and_grad(student_prob_on_event, refined.prob)


def classmix(input_a, labels_a, input_b, labels_b, seed: int):
    """Paste half of sample a's classes onto sample b.

    A seeded choice of ceil(present/2) of the classes present in a's label
    map defines a pixel mask; inside it, input channels and labels come
    from a, outside from b. Returns (mixed_input, mixed_labels, mask).
    """
    input_a = np.asarray(input_a, dtype=np.float64)
    input_b = np.asarray(input_b, dtype=np.float64)
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if input_a.shape != input_b.shape or labels_a.shape != labels_b.shape:
        raise ShapeError("classmix operands must have equal shapes")
    present = np.unique(labels_a)
    take = int(math.ceil(len(present) / 2))
    rng = derive_rng(seed, "classmix")
    chosen = rng.choice(present, size=take, replace=False)
    mask = np.isin(labels_a, chosen)
    mixed_input = np.where(mask[None], input_a, input_b)
    mixed_labels = np.where(mask, labels_a, labels_b)
    return mixed_input, mixed_labels, mask


def jitter(inputs, strength: float, seed: int, blur_sigma: float = 0.0):
    """Seeded per-channel gain/offset perturbation plus optional blur.

    Gains are drawn from [1-strength, 1+strength], offsets from
    [-strength, strength]; labels are never touched by construction.
    """
    if strength < 0:
        raise ValueError("strength must be non-negative")
    inputs = np.asarray(inputs, dtype=np.float64)
    c = inputs.shape[0]
    rng = derive_rng(seed, "jitter")
    gain = rng.uniform(1.0 - strength, 1.0 + strength, size=(c, 1, 1))
    offset = rng.uniform(-strength, strength, size=(c, 1, 1))
    out = inputs * gain + offset
    if blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(0.0, blur_sigma, blur_sigma))
    return out

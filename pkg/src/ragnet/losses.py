"""The five training objectives and their weighted combination.

Reconstruction and perceptual terms compare both predicted layers to ground
truth; the exclusion term penalizes correlated gradients of the predicted
transmission and reflection across three scales; the mask term drives the
difference-feature masks toward 0 in heavy-reflection regions and all masks
toward 1 in near-clean regions; the adversarial pair trains a realness
critic on (observation, transmission) pairs.

The combined objective is
``l_rec + l_percep + 0.2 * l_excl + 0.01 * l_adv + l_mask`` by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import ragnet.tensor as T
from ragnet.tensor import Tensor
from ragnet.model import MaskLevel, ModelConfig, Network, build_network, extract_features, forward_discriminator

LOG_CLAMP = 1e-7


@dataclass
class LossWeights:
    rec: float = 1.0
    percep: float = 1.0
    excl: float = 0.2
    adv: float = 0.01
    mask: float = 1.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class MaskLossThresholds:
    phi: float = 0.3    # heavy-reflection cutoff: drive M_diff -> 0 above it
    xi: float = 0.01    # near-clean cutoff: drive all masks -> 1 below it
    tau: float = 0.40   # evaluation split between weak/strong regions

    def __post_init__(self):
        for name, v in (("phi", self.phi), ("xi", self.xi), ("tau", self.tau)):
            if not 0 < v < 1:
                raise ValueError(f"threshold {name} must lie in (0,1), got {v}")
        if self.xi >= self.phi:
            raise ValueError(f"xi ({self.xi}) must be < phi ({self.phi})")


@dataclass
class LossParts:
    rec: Tensor | None = None
    percep: Tensor | None = None
    excl: Tensor | None = None
    adv: Tensor | None = None
    mask: Tensor | None = None


class PerceptualExtractor:
    """Frozen seeded five-stage conv pyramid standing in for a pretrained backbone.

    Stage weights default to 1/(C*H*W) of each feature map, so every stage
    contributes a mean absolute feature difference.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32, stage_weights: list[float] | None = None):
        self.net: Network = build_network("percep_extractor", config, dtype=dtype)
        self.stage_weights = stage_weights

    def features(self, x: Tensor) -> list[Tensor]:
        return extract_features(self.net, x)

    def weight_for(self, stage: int, feat: Tensor) -> float:
        if self.stage_weights is not None:
            return self.stage_weights[stage]
        _, c, h, w = feat.shape
        return 1.0 / (c * h * w)


def _l1_diff(a: Tensor, b: Tensor, normalize: bool) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"loss input shapes differ: {a.shape} vs {b.shape}")
    term = T.l1_norm(T.sub(a, b))
    if normalize:
        term = T.scalar_mul(term, 1.0 / a.data.size)
    return term


def rec_loss(t_hat: Tensor, t: Tensor, r_hat: Tensor | None = None, r: Tensor | None = None,
             normalize: bool = False) -> Tensor:
    """Pixel-wise l1 on the transmission, plus the reflection when available.

    The default is the literal un-normalized l1 sum; ``normalize=True``
    switches to a per-element mean so the loss scale is resolution-free.
    """
    loss = _l1_diff(t_hat, t, normalize)
    if r_hat is not None:
        if r is None:
            raise ValueError("rec_loss: r_hat given without its ground truth r")
        loss = T.add(loss, _l1_diff(r_hat, r, normalize))
    return loss


def perceptual_loss(t_hat: Tensor, t: Tensor, r_hat: Tensor | None, r: Tensor | None,
                    extractor: PerceptualExtractor) -> Tensor:
    """Stage-weighted l1 distance between frozen feature pyramids."""
    pairs = [(t_hat, t)]
    if r_hat is not None:
        if r is None:
            raise ValueError("perceptual_loss: r_hat given without its ground truth r")
        pairs.append((r_hat, r))
    loss = None
    for pred, gt in pairs:
        if pred.shape != gt.shape:
            raise ValueError(f"loss input shapes differ: {pred.shape} vs {gt.shape}")
        f_pred = extractor.features(pred)
        f_gt = extractor.features(gt)
        for stage, (fp, fg) in enumerate(zip(f_pred, f_gt)):
            term = T.scalar_mul(T.l1_norm(T.sub(fp, fg)), extractor.weight_for(stage, fp))
            loss = term if loss is None else T.add(loss, term)
    return loss


def exclusion_lambdas(t_hat: Tensor, r_hat: Tensor, n_scales: int = 2) -> list[float | None]:
    """Per-scale reflection normalization factors |grad T|_1 / |grad R|_1.

    None marks a scale whose reflection gradient mass vanishes (the scale
    contributes nothing to the loss).
    """
    out: list[float | None] = []
    t, r = t_hat, r_hat
    for scale in range(n_scales + 1):
        tx, ty = T.spatial_gradient(t)
        rx, ry = T.spatial_gradient(r)
        l1_r = float(np.abs(rx.data).sum() + np.abs(ry.data).sum())
        if l1_r < 1e-8:
            out.append(None)
        else:
            l1_t = float(np.abs(tx.data).sum() + np.abs(ty.data).sum())
            out.append(l1_t / l1_r)
        if scale < n_scales:
            t, r = T.downsample2x(t), T.downsample2x(r)
    return out


def exclusion_loss(t_hat: Tensor, r_hat: Tensor, n_scales: int = 2, lambda_t: float = 0.5,
                   fixed_lambda: bool = False,
                   lambda_r_values: list[float | None] | None = None) -> Tensor:
    """Multi-scale penalty on correlated gradients of the two predicted layers.

    Per scale: sqrt of the Frobenius norm of
    tanh(lambda_t * |grad T|) o tanh(lambda_r * |grad R|) with both gradient
    components in the norm.  lambda_r normalizes by the gradient-mass ratio
    |grad T|_1 / |grad R|_1 of that scale and is treated as a constant with
    respect to gradients; a scale with vanishing |grad R|_1 contributes 0.

    ``fixed_lambda`` pins lambda_r = lambda_t, making the loss symmetric
    under argument swap.  ``lambda_r_values`` supplies frozen per-scale
    factors (from :func:`exclusion_lambdas`) so finite-difference probes can
    hold the stop-gradient factor constant while perturbing the inputs.
    """
    if t_hat.shape != r_hat.shape:
        raise ValueError(f"exclusion_loss: shape mismatch {t_hat.shape} vs {r_hat.shape}")
    div = 2 ** n_scales
    _, _, h, w = t_hat.shape
    if h % div or w % div:
        raise ValueError(f"exclusion_loss: spatial dims ({h},{w}) must be divisible by {div}")

    loss = None
    t, r = t_hat, r_hat
    for scale in range(n_scales + 1):
        tx, ty = T.spatial_gradient(t)
        rx, ry = T.spatial_gradient(r)
        if lambda_r_values is not None:
            lam_r = lambda_r_values[scale]
        elif fixed_lambda:
            lam_r = lambda_t
        else:
            l1_r = float(np.abs(rx.data).sum() + np.abs(ry.data).sum())
            if l1_r < 1e-8:
                lam_r = None
            else:
                l1_t = float(np.abs(tx.data).sum() + np.abs(ty.data).sum())
                lam_r = l1_t / l1_r  # stop-gradient normalization factor
        if lam_r is not None:
            psi_x = T.mul(T.tanh(T.scalar_mul(T.abs_(tx), lambda_t)),
                          T.tanh(T.scalar_mul(T.abs_(rx), lam_r)))
            psi_y = T.mul(T.tanh(T.scalar_mul(T.abs_(ty), lambda_t)),
                          T.tanh(T.scalar_mul(T.abs_(ry), lam_r)))
            term = T.sqrt(T.frobenius_norm(T.concat_channels(psi_x, psi_y)))
            loss = term if loss is None else T.add(loss, term)
        if scale < n_scales:
            t, r = T.downsample2x(t), T.downsample2x(r)
    if loss is None:
        loss = T.scalar(0.0, dtype=t_hat.dtype)
    return T.scalar_mul(loss, 1.0 / (n_scales + 1))


def _pool_luminance(r_gt: np.ndarray, level: int) -> np.ndarray:
    """Channel-mean reflection intensity average-pooled to the level's resolution."""
    lum = r_gt.mean(axis=1, keepdims=True)
    for _ in range(level - 1):
        n, c, h, w = lum.shape
        lum = lum.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return lum


def mask_loss(masks: list[MaskLevel], r_gt: Tensor, thresholds: MaskLossThresholds,
              normalize: bool = True) -> Tensor:
    """Mask supervision from the ground-truth reflection intensity.

    Heavy regions (intensity > phi) pull the per-level difference masks
    toward 0; near-clean regions (intensity < xi) pull all masks toward 1;
    intermediate regions are unconstrained.  The intensity map is the
    channel mean of the reflection, average-pooled to each level.  With
    ``normalize`` each selected region contributes its mean rather than the
    raw sum, decoupling the loss scale from resolution (the raw-sum mode
    remains available for oracle comparisons).
    """
    loss = None
    dtype = r_gt.dtype
    for ml in masks:
        lum = _pool_luminance(r_gt.data, ml.level)
        heavy = lum > thresholds.phi
        weak = lum < thresholds.xi
        if heavy.any():
            sel = np.broadcast_to(heavy, (heavy.shape[0], ml.m_diff.shape[1]) + heavy.shape[2:])
            w = T.tensor(np.ascontiguousarray(sel.astype(dtype)))
            term = T.l1_norm(T.mul(ml.m_diff, w))
            if normalize:
                term = T.scalar_mul(term, 1.0 / sel.sum())
            loss = term if loss is None else T.add(loss, term)
        if weak.any():
            # the full mask [M_diff, M_dec] is pulled toward 1; in normalized
            # mode each group is its own mean so the clean-region up-pressure
            # on M_diff matches the heavy-region down-pressure (otherwise the
            # balance point is a uniform collapse instead of polarization)
            groups = [ml.m_diff, ml.m_dec] if normalize else \
                [T.concat_channels(ml.m_diff, ml.m_dec)]
            for m in groups:
                sel = np.broadcast_to(weak, (weak.shape[0], m.shape[1]) + weak.shape[2:])
                w = T.tensor(np.ascontiguousarray(sel.astype(dtype)))
                ones = T.ones(m.shape, dtype=m.dtype)
                term = T.l1_norm(T.mul(T.sub(m, ones), w))
                if normalize:
                    term = T.scalar_mul(term, 1.0 / sel.sum())
                loss = term if loss is None else T.add(loss, term)
    if loss is None:
        loss = T.scalar(0.0, dtype=dtype)
    return loss


def _neg_log(x: Tensor) -> Tensor:
    return T.scalar_mul(T.log(T.clamp(x, LOG_CLAMP, 1.0 - LOG_CLAMP)), -1.0)


def adv_d_loss(d_net: Network, i_obs: Tensor, t_real: Tensor, t_fake: Tensor) -> Tensor:
    """Critic objective in the stable form -log D(I,T) - log(1 - D(I,T_hat)).

    ``t_fake`` must be detached: the generator receives no gradient from the
    critic's step.
    """
    if t_fake.requires_grad:
        raise ValueError("adv_d_loss: t_fake must be detached (call .detach() on the prediction)")
    d_real = forward_discriminator(d_net, i_obs, t_real)
    d_fake = forward_discriminator(d_net, i_obs, t_fake)
    one_minus = T.scalar_add(T.scalar_mul(d_fake, -1.0), 1.0)
    return T.add(_neg_log(d_real), _neg_log(one_minus))


def adv_g_loss(d_net: Network, i_obs: Tensor, t_fake: Tensor) -> Tensor:
    """Generator objective -log D(I, T_hat)."""
    return _neg_log(forward_discriminator(d_net, i_obs, t_fake))


def total_loss(parts: LossParts, weights: LossWeights, use_adversarial: bool = True) -> Tensor:
    """Weighted sum of the available parts, in fixed left-to-right order."""
    total = None
    order = [(parts.rec, weights.rec), (parts.percep, weights.percep),
             (parts.excl, weights.excl)]
    if use_adversarial:
        order.append((parts.adv, weights.adv))
    order.append((parts.mask, weights.mask))
    for part, lam in order:
        if part is None:
            continue
        term = T.scalar_mul(part, lam)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("total_loss: no loss parts given")
    return total

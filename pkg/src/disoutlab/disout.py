"""Feature-map distortion (disout): masks, surrogate objectives, gradients.

Instead of zeroing masked activations like dropout, disout subtracts a
learned per-sample distortion at masked positions,

    f_hat_i = f_i - m_i * eps_i,

and picks eps by descending a mini-batch surrogate of the next layer's
empirical Rademacher complexity.  With Rademacher signs sigma_i in {-1,+1}
and g = sum_i sigma_i * f_hat_i, the dense-layer objective is

    T = (1/N) * max_k |<K_next[k, :], g>|  +  (lam / 2N) * sum_i ||eps_i||^2,

where K_next is the following layer's weight matrix.  The convolutional
variant replaces the inner product by a convolution of the sign-weighted
feature sum G with each filter of the next layer's kernel, averaging the
absolute response over its spatial positions.

This module provides both the exact gradients of these objectives
(argmax row / channel, used as the verification route) and the cheap
randomized approximations that replace the argmax selection with
auxiliary normal / sign variables.  Initializing eps to f and taking
zero gradient steps reproduces dropout exactly, which the baselines and
the equivalence tests rely on.

All functions are pure given an explicit numpy Generator.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .tensor import conv2d, conv2d_transpose

MASK_KINDS = ("element", "block")


@dataclass
class DistortionConfig:
    """Hyperparameters of the distortion regularizer.

    p_target: drop probability reached after the ramp, in [0, 1).
    gamma: distortion step length; multiplied by the feature-map std at use.
    lam: weight of the squared-norm penalty on eps (>= 0).
    block_size: side of the square blocks for block masks (conv maps only).
    mask_kind: "element" (i.i.d. Bernoulli) or "block" (DropBlock-style).
    steps_per_batch: distortion gradient steps per weight update.
    ramp_fraction: fraction of total iterations over which p ramps from 0.
    """

    p_target: float = 0.1
    gamma: float = 1.0
    lam: float = 0.1
    block_size: int = 3
    mask_kind: str = "element"
    steps_per_batch: int = 1
    ramp_fraction: float = 1.0

    def validate(self):
        if not 0.0 <= self.p_target < 1.0:
            raise ConfigError(f"p_target must be in [0, 1), got {self.p_target}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.lam < 0.0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        if self.mask_kind not in MASK_KINDS:
            raise ConfigError(f"mask_kind must be one of {MASK_KINDS}, got {self.mask_kind!r}")
        if self.steps_per_batch < 1:
            raise ConfigError(f"steps_per_batch must be >= 1, got {self.steps_per_batch}")
        if not 0.0 <= self.ramp_fraction <= 1.0:
            raise ConfigError(f"ramp_fraction must be in [0, 1], got {self.ramp_fraction}")
        return self


@dataclass
class DistortionState:
    """Per-layer, per-batch bundle consumed by the forward pass.

    mask and epsilon have the feature-batch shape; sigma holds one +-1
    sign per sample; aux_u / aux_s are the last-drawn auxiliary variables
    of the approximate gradient (None in exact mode); p_effective is the
    ramped drop probability used for this batch.
    """

    mask: np.ndarray
    epsilon: np.ndarray
    sigma: np.ndarray
    p_effective: float
    aux_u: np.ndarray | None = None
    aux_s: np.ndarray | None = None


class ErcTerms(NamedTuple):
    """One surrogate evaluation: total = sup_term + penalty_term."""

    total: float
    sup_term: float
    penalty_term: float


@dataclass
class ErcReport:
    """Surrogate values around one distortion update, for the metrics log."""

    layer: int
    t_before: float
    t_after: float
    sup_term: float
    penalty_term: float


def ramp_p(iteration, total_iters, cfg):
    """Drop probability at a given iteration: linear from 0 to p_target
    over ramp_fraction * total_iters, constant afterwards."""
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    span = cfg.ramp_fraction * total_iters
    if span <= 0:
        return cfg.p_target
    return cfg.p_target * min(1.0, iteration / span)


def sample_element_mask(shape, p, rng, dtype=np.float32):
    """I.i.d. Bernoulli(p) mask; 1 marks a distorted position."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop probability must be in [0, 1), got {p}")
    return (rng.random(shape) < p).astype(dtype)


def sample_block_mask(shape, p, block_size, rng, dtype=np.float32):
    """Square-block mask over (N, C, H, W) feature maps.

    Seeds are drawn per channel at the corners of fully contained
    block_size x block_size squares, at a rate chosen so the expected
    dropped fraction approximates p (overlap makes it approximate):

        seed_rate = p * H * W / (block_size^2 * (H - b + 1) * (W - b + 1)).

    block_size == 1 reduces exactly to the element mask.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop probability must be in [0, 1), got {p}")
    if len(shape) != 4:
        raise ConfigError(f"block masks need (N, C, H, W) features, got shape {tuple(shape)}")
    n, c, h, w = shape
    b = int(block_size)
    if b > min(h, w):
        raise ConfigError(f"block_size {b} exceeds feature map {h}x{w}")
    vh, vw = h - b + 1, w - b + 1
    seed_rate = min(1.0, p * h * w / (b * b * vh * vw))
    seeds = rng.random((n, c, vh, vw)) < seed_rate
    mask = np.zeros(shape, dtype=dtype)
    for dy in range(b):
        for dx in range(b):
            np.maximum(mask[:, :, dy:dy + vh, dx:dx + vw], seeds,
                       out=mask[:, :, dy:dy + vh, dx:dx + vw])
    return mask


def sample_rademacher(n, rng, dtype=np.float32):
    """n independent uniform signs in {-1, +1}."""
    return (2 * rng.integers(0, 2, size=n) - 1).astype(dtype)


def init_distortion(f):
    """Fresh per-batch distortion, initialized to a copy of the clean
    features so that zero update steps reproduce dropout."""
    return np.array(f, copy=True)


def apply_distortion(f, mask, epsilon, p_effective):
    """Distorted, train-time-rescaled feature map:
    (f - mask * epsilon) / (1 - p_effective).

    Inverted rescaling keeps the eval path clean; eval never calls this.
    """
    if f.shape != mask.shape or f.shape != epsilon.shape:
        raise ValueError(
            f"shape mismatch: f {f.shape}, mask {mask.shape}, epsilon {epsilon.shape}")
    if not 0.0 <= p_effective < 1.0:
        raise ConfigError(f"p_effective must be in [0, 1), got {p_effective}")
    return (f - mask * epsilon) / (1.0 - p_effective)


def _check_fc_shapes(k_next, f_hat, sigma, epsilon):
    if k_next.ndim != 2 or f_hat.ndim != 2:
        raise ValueError(f"expected 2-D weight and features, got {k_next.shape}, {f_hat.shape}")
    if k_next.shape[1] != f_hat.shape[1]:
        raise ValueError(
            f"weight width {k_next.shape[1]} != feature width {f_hat.shape[1]}")
    if sigma.shape[0] != f_hat.shape[0] or epsilon.shape != f_hat.shape:
        raise ValueError("sigma/epsilon shapes do not match the feature batch")


def erc_surrogate_fc(k_next, f_hat, sigma, epsilon, lam):
    """Dense-layer surrogate T for one mini-batch.

    k_next: (d_next, d) weight of the following dense layer.
    f_hat:  (N, d) distorted features (unrescaled, f - m*eps).
    sigma:  (N,) Rademacher signs.  epsilon: (N, d).
    """
    _check_fc_shapes(k_next, f_hat, sigma, epsilon)
    n = f_hat.shape[0]
    g = sigma @ f_hat
    inner = k_next @ g
    sup = float(np.abs(inner).max()) / n
    penalty = float(lam) / (2.0 * n) * float(np.sum(epsilon * epsilon))
    return ErcTerms(sup + penalty, sup, penalty)


def exact_grad_fc(k_next, f_hat, sigma, mask, epsilon, lam):
    """Exact per-sample gradient of the dense surrogate w.r.t. epsilon:

        dT/deps_i = -(1/N) * sigma_i * s * K_next[k_hat, :] * m_i
                    + (lam/N) * eps_i,

    with k_hat the argmax row of |<K_next[k, :], g>| (ties to the lowest
    index) and s the sign of that inner product.
    """
    _check_fc_shapes(k_next, f_hat, sigma, epsilon)
    if mask.shape != f_hat.shape:
        raise ValueError(f"mask shape {mask.shape} != feature shape {f_hat.shape}")
    n = f_hat.shape[0]
    g = sigma @ f_hat
    inner = k_next @ g
    k_hat = int(np.argmax(np.abs(inner)))
    s = float(np.sign(inner[k_hat]))
    row = k_next[k_hat]
    first = (-s / n) * sigma[:, None] * (row[None, :] * mask)
    return first + (lam / n) * epsilon


def approx_grad_fc(k_m, sigma, u, mask, epsilon, lam, n_batch):
    """Randomized dense gradient: the argmax-row selection is replaced by
    a shared standard-normal draw u times the per-column weight maxima:

        dT/deps_i ~= -(1/N) * sigma_i * u * K_M * m_i + (lam/N) * eps_i.

    sigma may be a scalar (single sample) or an (N,) vector against
    (N, d) mask/epsilon rows; u and k_m are (d,) and shared across the
    batch within one update step.
    """
    sigma = np.asarray(sigma)
    scale = sigma[..., None] if sigma.ndim else sigma
    first = (-1.0 / n_batch) * scale * (u * k_m * mask)
    return first + (lam / n_batch) * epsilon


def _conv_q(k_next, g, stride, padding):
    return conv2d(g[None], k_next, stride=stride, padding=padding)[0]


def erc_surrogate_conv(k_next, f_hat, sigma, epsilon, lam, stride=1, padding=0):
    """Convolutional surrogate T for one mini-batch.

    k_next: (K, C, kh, kw) kernel of the following conv layer (with its
    stride/padding).  f_hat: (N, C, H, W) distorted maps (unrescaled).
    The sign-weighted sum G = sum_i sigma_i f_hat_i is convolved with
    each filter; the winning filter's mean absolute response plus the
    eps penalty gives T.
    """
    if f_hat.ndim != 4 or k_next.ndim != 4:
        raise ValueError(f"expected 4-D maps and kernel, got {f_hat.shape}, {k_next.shape}")
    if epsilon.shape != f_hat.shape or sigma.shape[0] != f_hat.shape[0]:
        raise ValueError("sigma/epsilon shapes do not match the feature batch")
    n = f_hat.shape[0]
    g = np.einsum("i,ichw->chw", sigma, f_hat)
    q = _conv_q(k_next, g, stride, padding)
    q_area = q.shape[1] * q.shape[2]
    per_filter = np.abs(q).sum(axis=(1, 2))
    sup = float(per_filter.max()) / (n * q_area)
    penalty = float(lam) / (2.0 * n) * float(np.sum(epsilon * epsilon))
    return ErcTerms(sup + penalty, sup, penalty)


def exact_grad_conv(k_next, f_hat, sigma, mask, epsilon, lam, stride=1, padding=0):
    """Exact per-sample gradient of the conv surrogate w.r.t. epsilon.

    The winning filter k_hat maximizes the summed |Q[k]|; the sup term's
    gradient is the transposed convolution of sign(Q[k_hat]) with that
    filter, masked per sample:

        dT/deps_i = -(sigma_i / (N * HQ * WQ))
                      * conv2d_transpose(sign(Q[k_hat]), K_next[k_hat]) * M_i
                    + (lam/N) * eps_i.
    """
    if mask.shape != f_hat.shape:
        raise ValueError(f"mask shape {mask.shape} != feature shape {f_hat.shape}")
    n, _, h, w = f_hat.shape
    g = np.einsum("i,ichw->chw", sigma, f_hat)
    q = _conv_q(k_next, g, stride, padding)
    q_area = q.shape[1] * q.shape[2]
    k_hat = int(np.argmax(np.abs(q).sum(axis=(1, 2))))
    grad_q = np.zeros((1,) + q.shape, dtype=q.dtype)
    grad_q[0, k_hat] = np.sign(q[k_hat])
    base = conv2d_transpose(grad_q, k_next, stride=stride, padding=padding,
                            output_hw=(h, w))[0]
    first = (-1.0 / (n * q_area)) * sigma[:, None, None, None] * (base[None] * mask)
    return first + (lam / n) * epsilon


def approx_grad_conv(k_next, sigma, s_prime, u, mask, epsilon, lam, n_batch, q_area):
    """Randomized conv gradient.

    The sign map is approximated by s_prime (+-1 over kernel positions)
    and the filter selection by the standard-normal U (feature-map
    shaped); both are shared across the batch within one update step.
    With per-position kernel maxima K_M[c, h, w] = max_k K_next[k, c, h, w],
    each channel gets the scalar a_c = sum_{h,w} K_M[c, h, w] * s_prime[h, w]:

        dT/deps_i ~= -(1/(N * q_area)) * sigma_i * a_c * U * M_i
                     + (lam/N) * eps_i.

    q_area is HQ*WQ of the guiding conv's output (the surrogate's
    spatial normalizer), passed explicitly since Q is never formed.
    """
    k_m = k_next.max(axis=0)
    a = np.einsum("chw,hw->c", k_m, s_prime)
    sigma = np.asarray(sigma)
    scale = sigma[..., None, None, None] if sigma.ndim else sigma
    first = (-1.0 / (n_batch * q_area)) * scale * (a[:, None, None] * u * mask)
    return first + (lam / n_batch) * epsilon


def update_distortion(epsilon, grad, gamma, feature_std):
    """One descent step on the surrogate: eps - (gamma * feature_std) * grad.

    feature_std is the scalar standard deviation of the layer's clean
    feature batch, making gamma comparable across layers.
    """
    if gamma < 0.0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    return epsilon - (gamma * feature_std) * grad

# -*- coding: utf-8 -*-
"""
passform.losses - training objectives
~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~

Generator and discriminator objectives for face normalization, written
against torch tensors so that gradients flow. Images are ``(..., C, H, W)``;
the width axis is the last one and is the axis a horizontal flip reverses.
Discriminator scores are ``(..., R)``, one column per region (R is 7 for the
default region set), and are read as "fakeness": lower is more real.

Every function averages over leading batch dimensions, so a batch of one
gives the per-image value.
"""
import dataclasses
import math

import torch

from .exceptions import ArgumentError, ConfigurationError, NumericError

N_REGIONS = 7


@dataclasses.dataclass
class LossWeights:
    """Weights of the generator objective.

    Attributes:
        lambda1 (float): Identity perception weight.
        lambda2 (float): Pixel weight.
        lambda3 (float): Symmetry weight.

    """

    lambda1: float = 10.0
    lambda2: float = 0.1
    lambda3: float = 1.0

    def __post_init__(self):
        for name in ('lambda1', 'lambda2', 'lambda3'):
            if getattr(self, name) < 0:
                raise ArgumentError('{} must be >= 0'.format(name))


@dataclasses.dataclass
class LossReport:
    """Loss values of one training step.

    Regularizer entries are `None` on steps where the lazy schedule skipped
    them.
    """

    step: int
    l_p: float
    l_ip: float
    l_sym: float
    l_adv: float
    l_gen: float
    l_disc: float
    pl_penalty: float = None
    r1_penalty: float = None

    def to_dict(self):
        return dataclasses.asdict(self)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ArgumentError('{}: shape mismatch {} vs {}'.format(what, tuple(a.shape), tuple(b.shape)))


def _scores(d, what, n_regions=N_REGIONS):
    if d.shape[-1] != n_regions:
        raise ArgumentError('{}: expected {} region scores, got {}'
                            .format(what, n_regions, d.shape[-1]))
    return d


def hflip(images):
    return torch.flip(images, dims=(-1,))


def pixel_loss(y, y_tilde):
    """Mean absolute difference between a normal image and its reconstruction."""

    _same_shape(y, y_tilde, 'pixel_loss')
    return (y - y_tilde).abs().mean()


def identity_loss(e_x, e_x_tilde, e_y, e_y_tilde):
    """Squared embedding distances of both streams, summed."""

    for other in (e_x_tilde, e_y, e_y_tilde):
        _same_shape(e_x, other, 'identity_loss')
    per_x = (e_x - e_x_tilde).pow(2).sum(dim=-1)
    per_y = (e_y - e_y_tilde).pow(2).sum(dim=-1)
    return (per_x + per_y).mean()


def symmetry(images):
    """Mean |I - flip(I)| per image, over the trailing C, H, W axes."""

    return (images - hflip(images)).abs().mean(dim=(-3, -2, -1))


def symmetric_loss(x_tilde, y_tilde):
    """Mean left-right asymmetry of both generated streams."""

    _same_shape(x_tilde, y_tilde, 'symmetric_loss')
    return 0.5 * ((x_tilde - hflip(x_tilde)).abs().mean()
                  + (y_tilde - hflip(y_tilde)).abs().mean())


def adversarial_gen_loss(d_fake_x, d_fake_y, d_real_y, n_regions=N_REGIONS):
    """Region scores of both fake streams minus those of real normal images.

    The real term is detached: it is constant with respect to the generator.
    """

    for d, what in ((d_fake_x, 'd_fake_x'), (d_fake_y, 'd_fake_y'), (d_real_y, 'd_real_y')):
        _scores(d, what, n_regions)
    total = d_fake_x.sum(dim=-1) + d_fake_y.sum(dim=-1) - d_real_y.detach().sum(dim=-1)
    return total.mean()


def total_gen_loss(terms, weights=None):
    """Weighted generator objective.

    Args:
        terms (dict): ``l_adv``, ``l_ip``, ``l_p`` and ``l_sym``, as floats
            or scalar tensors.
        weights (LossWeights): Defaults to ``LossWeights()``.

    Raises:
        NumericError: A term is NaN or infinite.

    """

    weights = weights or LossWeights()
    for name in ('l_adv', 'l_ip', 'l_p', 'l_sym'):
        value = float(terms[name])
        if not math.isfinite(value):
            raise NumericError(name, value)
    return (terms['l_adv'] + weights.lambda1 * terms['l_ip']
            + weights.lambda2 * terms['l_p'] + weights.lambda3 * terms['l_sym'])


def hinge_discriminator_loss(d_fake_x, d_fake_y, d_real_y):
    """Hinge loss for fakeness scores with any number of regions."""

    real = torch.relu(1.0 + d_real_y)
    fake = 0.5 * torch.relu(1.0 - d_fake_x) + 0.5 * torch.relu(1.0 - d_fake_y)
    return (real + fake).sum(dim=-1).mean()


def discriminator_loss(d_fake_x, d_fake_y, d_real_y, n_regions=N_REGIONS):
    """Hinge loss of the region discriminators, seven unless `n_regions` says otherwise.

    Real scores are pushed below -1 and both fake streams above +1, each fake
    stream at half weight.
    """

    for d, what in ((d_fake_x, 'd_fake_x'), (d_fake_y, 'd_fake_y'), (d_real_y, 'd_real_y')):
        _scores(d, what, n_regions)
    return hinge_discriminator_loss(d_fake_x, d_fake_y, d_real_y)


def path_lengths(generator, ws, noise=None, rng=None):
    """Norms of J^T y at the style inputs `ws`.

    `y` is a standard normal image-space direction divided by the
    resolution. For per-layer styles the squared gradient is summed over the
    style width and averaged over layers before the square root.
    """

    ws = ws.detach().requires_grad_(True)
    images = generator.synthesis(ws)
    if noise is None:
        noise = torch.randn(images.shape, generator=rng, device='cpu').to(images.device)
    noise = noise / images.shape[-1]
    grad, = torch.autograd.grad((images * noise).sum(), ws, create_graph=True)
    squares = grad.pow(2).sum(dim=-1)
    if squares.dim() > 1:
        squares = squares.mean(dim=tuple(range(1, squares.dim())))
    return squares.sqrt()


def path_length_penalty(generator, emb_batch, running_mean_a, decay=0.99, noise=None, rng=None):
    """Path length regularizer.

    Args:
        generator: Module exposing ``mapping`` and ``synthesis``.
        emb_batch (torch.Tensor): Non-empty batch of generator inputs.
        running_mean_a (float): Running mean of observed path lengths, >= 0.
        decay (float): Running-mean decay.
        noise (torch.Tensor): Fixed image-space direction, before scaling.
        rng (torch.Generator): Source of the direction when `noise` is None.

    Returns:
        tuple: ``(penalty, new_a)``; the penalty is a scalar tensor carrying
        gradient, `new_a` a float.

    """

    if emb_batch.shape[0] == 0:
        raise ArgumentError('path_length_penalty needs a non-empty batch')
    if running_mean_a < 0:
        raise ArgumentError('running_mean_a must be >= 0')
    if not any(p.requires_grad for p in generator.parameters()):
        raise ConfigurationError('path length regularization on a generator with no trainable '
                                 'parameters')
    lengths = path_lengths(generator, generator.mapping(emb_batch), noise, rng)
    new_a = running_mean_a + (1.0 - decay) * (float(lengths.detach().mean()) - running_mean_a)
    penalty = (lengths - new_a).pow(2).mean()
    return penalty, new_a


def r1_penalty(discriminator, real_batch, gamma=1.0):
    """Gradient penalty on real images.

    ``gamma / 2`` times the mean over the batch of the squared norm of the
    gradient of the summed region scores with respect to the pixels.
    """

    real = real_batch.detach().requires_grad_(True)
    scores = discriminator(real)
    if not scores.requires_grad:
        return real.new_zeros(())
    grad, = torch.autograd.grad(scores.sum(), real, create_graph=True, allow_unused=True)
    if grad is None:
        return real.new_zeros(())
    return 0.5 * gamma * grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1).mean()

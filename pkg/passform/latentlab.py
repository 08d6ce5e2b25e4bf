# -*- coding: utf-8 -*-
"""
passform.latentlab - latent-space construction of the normal dataset
~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~

An unconditional style GAN is trained on the synthetic corpus. Its W space
is sampled, each sample is scored by the brightness and flatness of its top
corners, and a linear SVM separates the white-background samples from the
busy ones. Moving latents along the normal of that hyperplane whitens the
background; expression is neutralized the same way. The most symmetric
results are pseudo-labeled by skin and shape and exported as a balanced
dataset of passport-style faces.
"""
import copy
import dataclasses
import json
import logging
import math
import os

import numpy as np
import torch
from sklearn.model_selection import train_test_split
from sklearn.svm import LinearSVC
from tqdm import tqdm

from .exceptions import (ArgumentError, ConfigurationError, StarvedCellError,
                         TrainingDivergedError, ValidationError)
from .imageio import ImageDataset, LabeledImageDataset, quantize, save_png, to_images, to_tensor
from .losses import hinge_discriminator_loss, r1_penalty
from .models import (AttributeClassifier, RegionDiscriminator, RegionSpec, StyleDecoder,
                     accuracy, fit_classifier, load_modules, resolve_device, save_modules)
from .synthface import NEUTRAL_EXPRESSION, NORMAL, Manifest, SampleRecord
from .trainer import TrainConfig, batch_stream, build_adam

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
CORNER_FRACTION = 0.15
ALPHA_MULTIPLES = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
BCG_THRESHOLD = 0.92
KEEP_QUANTILE = 0.5
FULL_FRAME = RegionSpec('full', (0.0, 0.0, 1.0, 1.0))
CELLS = tuple((skin, shape) for skin in range(3) for shape in range(2))
ATTRIBUTE_CLASSES = {'skin_group': 3, 'shape_group': 2, 'expression_sign': 3}
SUMMARY_NAME = 'summary.json'


# Toy GAN

@dataclasses.dataclass
class GanCheckpoint:
    """Unconditional generator z -> w -> image and its single-region critic."""

    generator: torch.nn.Module
    discriminator: torch.nn.Module
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    step: int = 0
    config_hash: str = ''
    config: dict = dataclasses.field(default_factory=dict)
    last_good: str = None

    @property
    def z_dim(self):
        return self.generator.arch['in_dim']

    @property
    def d_w(self):
        return self.generator.arch['d_w']

    @property
    def resolution(self):
        return self.generator.arch['resolution']

    @property
    def device(self):
        return next(self.generator.parameters()).device


def new_gan(cfg):
    device = resolve_device(cfg.device)
    torch.manual_seed(cfg.seed)
    generator = StyleDecoder(cfg.d_w, cfg.d_w, cfg.resolution, cfg.max_channels,
                             cfg.min_channels, per_layer_styles=False).to(device)
    discriminator = RegionDiscriminator((FULL_FRAME,), cfg.disc_channels).to(device)
    return GanCheckpoint(generator, discriminator,
                         build_adam(generator.parameters(), cfg),
                         build_adam(discriminator.parameters(), cfg),
                         config_hash=cfg.config_hash(), config=cfg.to_dict())


def _finite(name, value, gan):
    value = float(value)
    if not math.isfinite(value):
        raise TrainingDivergedError(name, value, gan.step, gan.last_good)
    return value


def gan_step(gan, real, cfg, z_rng):
    """One hinge discriminator update (with lazy R1) and one generator update.

    Losses are checked before their optimizer steps. When the generator loss
    diverges the discriminator update of the same step is undone.
    """

    generator, disc = gan.generator, gan.discriminator
    real = real.to(gan.device)
    z = torch.randn(real.shape[0], gan.z_dim, generator=z_rng).to(gan.device)
    step = gan.step
    saved = (copy.deepcopy(disc.state_dict()), copy.deepcopy(gan.d_opt.state_dict()))

    disc.requires_grad_(True)
    with torch.no_grad():
        fake = generator(z)
    d_fake = disc(fake)
    d_loss = hinge_discriminator_loss(d_fake, d_fake, disc(real))
    l_disc = _finite('l_disc', d_loss, gan)
    r1_value = None
    if step % cfg.d_reg_interval == 0:
        r1 = r1_penalty(disc, real, cfg.r1_gamma)
        r1_value = _finite('r1_penalty', r1, gan)
        d_loss = d_loss + r1 * cfg.d_reg_interval
    gan.d_opt.zero_grad(set_to_none=True)
    d_loss.backward()
    gan.d_opt.step()

    disc.requires_grad_(False)
    try:
        g_loss = disc(generator(z)).sum(dim=-1).mean()
        l_gen = _finite('l_gen', g_loss, gan)
        gan.g_opt.zero_grad(set_to_none=True)
        g_loss.backward()
        gan.g_opt.step()
    except TrainingDivergedError:
        disc.load_state_dict(saved[0])
        gan.d_opt.load_state_dict(saved[1])
        raise
    finally:
        disc.requires_grad_(True)

    gan.step += 1
    return dict(step=step, r1_penalty=r1_value, l_disc=l_disc, l_gen=l_gen)


def train_toy_gan(corpus, cfg, out_dir=None):
    """Trains the unconditional GAN on every image of a corpus.

    Args:
        corpus (Manifest): Images of any variation; background and
            illumination variety is what makes a background direction exist.
        cfg (TrainConfig): ``d_w`` is used for both z and w; the loss weights
            and path length settings are ignored.
        out_dir (str): When given, ``gan-<step>.pt`` is written there every
            ``cfg.checkpoint_interval`` steps and ``gan.pt`` at the end.

    Returns:
        GanCheckpoint

    Raises:
        TrainingDivergedError: A loss went non-finite; `last_good` names the
            last periodic checkpoint, if one was written.

    """

    if len(corpus) == 0:
        raise ValidationError('the GAN corpus is empty')
    if all(r.variation.background.kind == 'white' for r in corpus):
        logger.warning('every corpus image has a white background; '
                       'the background direction will be degenerate')
    size = corpus.image(corpus[0]).shape[0]
    if size != cfg.resolution:
        raise ConfigurationError('corpus resolution {} does not match GAN resolution {}'
                                 .format(size, cfg.resolution))

    gan = new_gan(cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    batch = min(cfg.batch_size, len(corpus))
    stream = batch_stream(ImageDataset(corpus), batch, cfg.seed * 2 + 1, cfg.num_workers)
    z_rng = torch.Generator().manual_seed(cfg.seed * 2 + 2)
    for _ in tqdm(range(cfg.total_steps), desc='gan', disable=None):
        stats = gan_step(gan, next(stream), cfg, z_rng)
        if stats['step'] % cfg.log_interval == 0:
            logger.info('gan step %d: l_gen %.4f l_disc %.4f',
                        stats['step'], stats['l_gen'], stats['l_disc'])
        if out_dir and cfg.checkpoint_interval and gan.step % cfg.checkpoint_interval == 0:
            path = os.path.join(out_dir, 'gan-{:07d}.pt'.format(gan.step))
            save_gan(gan, path)
            gan.last_good = path
    if out_dir:
        path = os.path.join(out_dir, 'gan.pt')
        save_gan(gan, path)
        gan.last_good = path
    return gan


def save_gan(gan, path):
    return save_modules(path, {'generator': gan.generator, 'discriminator': gan.discriminator},
                        meta={'step': gan.step, 'config_hash': gan.config_hash,
                              'config': gan.config, 'role': 'gan'},
                        extra_state={'g_opt': gan.g_opt.state_dict(),
                                     'd_opt': gan.d_opt.state_dict()})


def load_gan(path, device='cpu'):
    modules, sidecar, state = load_modules(path, resolve_device(device))
    if sidecar.get('role') != 'gan':
        raise ConfigurationError('{} is not a GAN checkpoint'.format(path))
    cfg = TrainConfig.from_dict(sidecar['config'])
    gan = GanCheckpoint(modules['generator'], modules['discriminator'],
                        build_adam(modules['generator'].parameters(), cfg),
                        build_adam(modules['discriminator'].parameters(), cfg),
                        step=sidecar['step'], config_hash=sidecar['config_hash'],
                        config=sidecar['config'], last_good=path)
    gan.g_opt.load_state_dict(state['g_opt'])
    gan.d_opt.load_state_dict(state['d_opt'])
    return gan


def sample_z(gan, n, seed):
    return torch.randn(n, gan.z_dim, generator=torch.Generator().manual_seed(int(seed)))


def sample_latents(gan, n, seed, batch_size=1024):
    """Maps `n` seeded z draws to W.

    Returns:
        numpy.ndarray: ``n x d_w`` float64 latent codes.

    """

    if n < 1:
        raise ArgumentError('n must be >= 1')
    z = sample_z(gan, n, seed)
    out = []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            out.append(gan.generator.mapping(z[start:start + batch_size].to(gan.device)).cpu())
    return torch.cat(out).double().numpy()


def decode_latents(gan, ws, batch_size=64):
    """Renders W codes as an ``N x H x W x 3`` float32 array."""

    ws = np.atleast_2d(np.asarray(ws, dtype=np.float32))
    if ws.shape[1] != gan.d_w:
        raise ArgumentError('latents have width {}, the generator expects {}'
                            .format(ws.shape[1], gan.d_w))
    out = []
    with torch.no_grad():
        for start in range(0, len(ws), batch_size):
            batch = torch.from_numpy(ws[start:start + batch_size]).to(gan.device)
            out.append(to_images(gan.generator.synthesis(batch)))
    return np.concatenate(out) if out else np.zeros((0, gan.resolution, gan.resolution, 3),
                                                    dtype=np.float32)


# Background scoring

@dataclasses.dataclass(frozen=True)
class BackgroundStats:
    bcg_m: float
    bcg_s: float


def _corner_size(frac, size):
    if not 0.0 < frac <= 0.5:
        raise ArgumentError('corner fraction must be in (0, 0.5], got {}'.format(frac))
    return max(1, int(math.floor(frac * size + 0.5)))


def corner_pixels(images, rect_h_frac=CORNER_FRACTION, rect_w_frac=CORNER_FRACTION):
    """Grayscale pixels of both top corners, ``... x P``, for HWC images or NHWC stacks."""

    images = np.asarray(images, dtype=np.float64)
    height, width = images.shape[-3], images.shape[-2]
    h = _corner_size(rect_h_frac, height)
    w = _corner_size(rect_w_frac, width)
    gray = images @ LUMA
    left = gray[..., :h, :w]
    right = gray[..., :h, width - w:]
    lead = gray.shape[:-2]
    return np.concatenate([left.reshape(lead + (-1,)), right.reshape(lead + (-1,))], axis=-1)


def background_stats(image, rect_h_frac=CORNER_FRACTION, rect_w_frac=CORNER_FRACTION):
    """Mean and standard deviation of the pooled top-corner luminance."""

    pixels = corner_pixels(image, rect_h_frac, rect_w_frac)
    return BackgroundStats(float(pixels.mean()), float(pixels.std()))


def background_means(images, rect_h_frac=CORNER_FRACTION, rect_w_frac=CORNER_FRACTION):
    return corner_pixels(images, rect_h_frac, rect_w_frac).mean(axis=-1)


def _zscore(values):
    values = np.asarray(values, dtype=np.float64)
    std = values.std()
    if std == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def select_pos_neg(stats, k):
    """Splits off the k whitest-and-flattest and the k busiest backgrounds.

    Samples are ranked by ``z(bcg_m) - z(bcg_s)``; ties keep input order.

    Returns:
        tuple: Sorted positive and negative index lists.

    """

    if k < 1 or 2 * k > len(stats):
        raise ArgumentError('need 1 <= k and 2k <= {}, got k={}'.format(len(stats), k))
    score = (_zscore([s.bcg_m for s in stats]) - _zscore([s.bcg_s for s in stats]))
    order = np.argsort(-score, kind='stable')
    return sorted(int(i) for i in order[:k]), sorted(int(i) for i in order[-k:])


# Directions

@dataclasses.dataclass
class Direction:
    """Unit normal of a separating hyperplane in W.

    Attributes:
        attribute (str): What the positive side means.
        normal (numpy.ndarray): Unit vector, float64.
        svm_heldout_accuracy (float): Accuracy on the held-out fifth.
        projection_sigma (float): Std of training projections onto `normal`.
        offset (float): Signed offset; ``w . normal + offset`` is zero on the
            hyperplane.

    """

    attribute: str
    normal: np.ndarray
    svm_heldout_accuracy: float
    projection_sigma: float
    offset: float = 0.0

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        if self.normal.ndim != 1 or abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ArgumentError('direction normal must be a unit vector')

    def to_dict(self):
        return {'attribute': self.attribute, 'normal': self.normal.tolist(),
                'svm_heldout_accuracy': self.svm_heldout_accuracy,
                'projection_sigma': self.projection_sigma, 'offset': self.offset}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def signed_distance(self, ws):
        return np.asarray(ws, dtype=np.float64) @ self.normal + self.offset


def fit_hyperplane(latents, labels, attribute, seed=0, C=1.0, heldout=0.2):
    """Fits a linear SVM separating ``+1`` from ``-1`` latents.

    The returned normal points toward the positive class: the mean
    projection of positive latents exceeds that of negative ones.

    Raises:
        ValidationError: Only one label present, or a split lost a class.

    """

    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ArgumentError('need one label per latent, got {} latents and {} labels'
                            .format(len(x), len(y)))
    if not set(np.unique(y)) <= {-1, 1}:
        raise ArgumentError('labels must be +1 or -1')
    if len(np.unique(y)) < 2:
        raise ValidationError('{}: hyperplane fit needs both labels'.format(attribute))

    fit_idx, held_idx = train_test_split(np.arange(len(y)), test_size=heldout,
                                         random_state=seed, shuffle=True)
    if len(np.unique(y[fit_idx])) < 2:
        raise ValidationError('{}: the training split holds a single class'.format(attribute))
    svm = LinearSVC(C=C, loss='hinge', dual=True, max_iter=20000, random_state=seed)
    svm.fit(x[fit_idx], y[fit_idx])

    coef = svm.coef_[0].astype(np.float64)
    scale = np.linalg.norm(coef)
    if scale == 0:
        raise ValidationError('{}: the SVM found no separating direction'.format(attribute))
    normal = coef / scale
    offset = float(svm.intercept_[0]) / scale
    projections = x @ normal
    if projections[y == 1].mean() < projections[y == -1].mean():
        normal, offset = -normal, -offset
    acc = float(svm.score(x[held_idx], y[held_idx])) if len(held_idx) else float('nan')
    sigma = float((x[fit_idx] @ normal).std())
    logger.info('%s hyperplane: held-out accuracy %.3f, projection sigma %.4f',
                attribute, acc, sigma)
    return Direction(attribute, normal, acc, sigma, offset)


def edit_latent(w, direction, alpha):
    """``w + alpha * normal``; `w` may be one code or a stack of codes."""

    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != direction.normal.shape[0]:
        raise ArgumentError('latent width {} does not match direction width {}'
                            .format(w.shape[-1], direction.normal.shape[0]))
    return w + alpha * direction.normal


def neutralize(w, direction):
    """Projects codes onto the hyperplane of `direction`."""

    w = np.asarray(w, dtype=np.float64)
    return w - direction.signed_distance(w)[..., None] * direction.normal


def save_directions(path, directions):
    tmp = path + '.tmp'
    with open(tmp, 'w') as fh:
        json.dump([d.to_dict() for d in directions], fh, indent=2)
    os.replace(tmp, path)
    return path


def load_directions(path):
    with open(path) as fh:
        return [Direction.from_dict(d) for d in json.load(fh)]


def direction_for(directions, attribute):
    for direction in directions:
        if direction.attribute == attribute:
            return direction
    return None


# Symmetry

def symmetry_score(image):
    """Mean absolute difference between an image and its mirror, in [0, 1]."""

    image = np.asarray(image, dtype=np.float64)
    return float(np.abs(image - image[:, ::-1]).mean())


def symmetric_selection(scores, keep_quantile=KEEP_QUANTILE):
    """Indices of the ``ceil(q * n)`` lowest scores, in input order, and the cutoff."""

    if not 0.0 < keep_quantile <= 1.0:
        raise ArgumentError('keep_quantile must be in (0, 1], got {}'.format(keep_quantile))
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        raise ArgumentError('nothing to filter')
    n_keep = max(1, int(math.ceil(keep_quantile * len(scores) - 1e-9)))
    kept = np.sort(np.argsort(scores, kind='stable')[:n_keep])
    return kept, float(scores[kept].max())


def filter_symmetric(items, keep_quantile=KEEP_QUANTILE):
    """Keeps the most symmetric fraction of ``(image, latent)`` pairs."""

    items = list(items)
    if not items:
        raise ArgumentError('nothing to filter')
    kept, _ = symmetric_selection([symmetry_score(image) for image, _ in items], keep_quantile)
    return [items[i] for i in kept]


# Attribute classifiers

def expression_class(expression):
    """0 frowning, 1 neutral, 2 smiling."""

    if abs(expression) < NEUTRAL_EXPRESSION:
        return 1
    return 2 if expression > 0 else 0


def attribute_labels(manifest, attribute):
    if attribute not in ATTRIBUTE_CLASSES:
        raise ArgumentError('unknown attribute {!r}'.format(attribute))
    if attribute == 'expression_sign':
        return [expression_class(r.variation.expression) for r in manifest]
    missing = [r.image_path for r in manifest if attribute not in r.attributes]
    if missing:
        raise ValidationError('{} records lack the {!r} label, first: {}'
                              .format(len(missing), attribute, missing[0]))
    return [int(r.attributes[attribute]) for r in manifest]


def fit_attribute_classifier(corpus, attribute, epochs=5, seed=0, batch_size=64, lr=1e-3,
                             device='auto'):
    """Trains an AttributeClassifier on the train split, scored on the test split.

    Returns:
        AttributeClassifier: ``arch['heldout_accuracy']`` holds the test
        accuracy (NaN without a test split).

    """

    train, test = corpus.split('train'), corpus.split('test')
    if len(train) == 0:
        raise ValidationError('no training records for the {} classifier'.format(attribute))
    train_set = LabeledImageDataset(train, attribute_labels(train, attribute))
    test_set = LabeledImageDataset(test, attribute_labels(test, attribute))
    device = resolve_device(device)
    torch.manual_seed(seed)
    resolution = corpus.image(corpus[0]).shape[0]
    model = AttributeClassifier(ATTRIBUTE_CLASSES[attribute], resolution,
                                attribute=attribute).to(device)
    fit_classifier(model, train_set, epochs, seed, batch_size, lr, device, desc=attribute)
    acc = accuracy(model, test_set, device=device)
    logger.info('%s classifier: held-out accuracy %.3f on %d images', attribute, acc, len(test_set))
    model.arch.update(heldout_accuracy=acc, seed=seed, epochs=epochs)
    return model


def classify(classifier, images, batch_size=256):
    """Predicted class per HWC image."""

    device = next(classifier.parameters()).device
    classifier.eval()
    out = []
    for start in range(0, len(images), batch_size):
        out.append(classifier.predict(to_tensor(images[start:start + batch_size]).to(device)).cpu())
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


def save_classifiers(path, classifiers):
    return save_modules(path, dict(classifiers), meta={'role': 'classifiers'})


def load_classifiers(path, device='cpu'):
    modules, sidecar, _ = load_modules(path, resolve_device(device))
    if sidecar.get('role') != 'classifiers':
        raise ConfigurationError('{} does not hold attribute classifiers'.format(path))
    return {name: module.eval() for name, module in modules.items()}


# Pipeline

def _expression_labels(predictions):
    return np.where(predictions == 2, 1, np.where(predictions == 0, -1, 0))


def find_directions(gan, classifiers=None, n_samples=50000, seed=0, k_frac=0.1,
                    rect_frac=CORNER_FRACTION, batch_size=256):
    """Samples the GAN and fits the background and, when possible, expression directions.

    Args:
        gan (GanCheckpoint): Trained toy GAN.
        classifiers (dict): Optional; an ``expression_sign`` classifier
            enables the expression direction.
        n_samples (int): Latents to sample.
        k_frac (float): Fraction of samples in each of the positive and
            negative background sets.

    Returns:
        list: Directions, background first.

    """

    classifiers = classifiers or {}
    ws = sample_latents(gan, n_samples, seed)
    means = np.empty(n_samples)
    stds = np.empty(n_samples)
    expressions = [] if 'expression_sign' in classifiers else None
    for start in tqdm(range(0, n_samples, batch_size), desc='score', disable=None):
        images = decode_latents(gan, ws[start:start + batch_size])
        pixels = corner_pixels(images, rect_frac, rect_frac)
        means[start:start + len(pixels)] = pixels.mean(axis=-1)
        stds[start:start + len(pixels)] = pixels.std(axis=-1)
        if expressions is not None:
            expressions.append(classify(classifiers['expression_sign'], images))
    stats = [BackgroundStats(float(m), float(s)) for m, s in zip(means, stds)]
    k = max(1, int(k_frac * n_samples))
    pos, neg = select_pos_neg(stats, k)
    logger.info('background sets: positive bcg_m %.3f, negative bcg_m %.3f',
                means[pos].mean(), means[neg].mean())
    directions = [fit_hyperplane(ws[pos + neg], [1] * len(pos) + [-1] * len(neg),
                                 'background', seed)]

    if expressions is not None:
        signs = _expression_labels(np.concatenate(expressions))
        chosen = np.flatnonzero(signs != 0)
        if min((signs == 1).sum(), (signs == -1).sum()) < 2:
            logger.warning('too few smiling or frowning samples; no expression direction')
        else:
            directions.append(fit_hyperplane(ws[chosen], signs[chosen], 'expression', seed))
    return directions


def background_sweep(gan, direction, ws, multiples=(1.0, 2.0, 3.0), rect_frac=CORNER_FRACTION):
    """bcg_m of each code edited by ``m * projection_sigma`` for each multiple.

    Returns:
        numpy.ndarray: ``len(ws) x len(multiples)``.

    """

    ws = np.atleast_2d(ws)
    columns = [background_means(decode_latents(gan, edit_latent(ws, direction,
                                                                m * direction.projection_sigma)),
                                rect_frac, rect_frac)
               for m in multiples]
    return np.stack(columns, axis=1)


def cell_quotas(target_size, cell_weights=None):
    """Images per (skin_group, shape_group) cell, summing to `target_size`.

    Shares are proportional to `cell_weights` (six non-negative numbers in
    ``CELLS`` order, equal by default); leftover images go to the cells with
    the largest fractional share, earlier cells first.
    """

    weights = np.ones(len(CELLS)) if cell_weights is None else np.asarray(cell_weights, float)
    if weights.shape != (len(CELLS),) or (weights < 0).any() or weights.sum() <= 0:
        raise ArgumentError('cell_weights must be {} non-negative numbers, not all zero'
                            .format(len(CELLS)))
    if target_size < 1:
        raise ArgumentError('target_size must be >= 1')
    shares = target_size * weights / weights.sum()
    quotas = np.floor(shares).astype(int)
    leftover = target_size - quotas.sum()
    for i in np.argsort(-(shares - quotas), kind='stable')[:leftover]:
        quotas[i] += 1
    return dict(zip(CELLS, quotas.tolist()))


def _round_seed(seed, round_index):
    return int(np.random.SeedSequence([int(seed), int(round_index)]).generate_state(1)[0])


def build_normal_dataset(gan, directions, classifiers, target_size, out_dir, seed=0,
                         keep_quantile=KEEP_QUANTILE, cell_weights=None,
                         alpha_multiples=ALPHA_MULTIPLES, bcg_threshold=BCG_THRESHOLD,
                         rect_frac=CORNER_FRACTION, batch_size=256, max_rounds=200):
    """Generates, filters and exports a balanced set of normal faces.

    Each round samples `batch_size` latents and, per sample, applies the
    smallest background edit in `alpha_multiples` (times the direction's
    projection sigma) that brings bcg_m to `bcg_threshold`; samples never
    reaching it are dropped. Samples the expression classifier marks as
    smiling or frowning are moved onto the expression hyperplane. The most
    symmetric `keep_quantile` of the round survives, is labeled by the skin
    and shape classifiers and fills its cell until the cell quota is met.
    All scores are taken on 8-bit quantized pixels, as exported.

    Args:
        gan (GanCheckpoint): Trained toy GAN.
        directions (list): Must include ``background``; ``expression`` is
            optional.
        classifiers (dict): ``skin_group`` and ``shape_group`` classifiers
            are required, ``expression_sign`` optional.
        target_size (int): Images to export.
        out_dir (str): Images, ``manifest.jsonl`` and ``summary.json`` go here.
        cell_weights (sequence): Optional imbalanced cell shares.

    Returns:
        Manifest: The exported normal manifest.

    Raises:
        StarvedCellError: A cell was still short after `max_rounds` rounds.

    """

    background = direction_for(directions, 'background')
    if background is None:
        raise ArgumentError('a background direction is required')
    for name in ('skin_group', 'shape_group'):
        if name not in classifiers:
            raise ConfigurationError('a {} classifier is required'.format(name))
    expression = direction_for(directions, 'expression')
    expression_clf = classifiers.get('expression_sign') if expression is not None else None
    quotas = cell_quotas(target_size, cell_weights)
    counts = dict.fromkeys(CELLS, 0)
    os.makedirs(out_dir, exist_ok=True)

    records = []
    raw_means, edited_means, exported_means = [], [], []
    cutoffs = []
    alpha_hist = dict.fromkeys(alpha_multiples, 0)
    sigma = background.projection_sigma
    bar = tqdm(total=target_size, desc='normal set', disable=None)
    rounds = 0
    while len(records) < target_size and rounds < max_rounds:
        ws = sample_latents(gan, batch_size, _round_seed(seed, rounds))
        rounds += 1
        raw_means.extend(background_means(quantize(decode_latents(gan, ws)), rect_frac, rect_frac))

        edited = ws.copy()
        images = np.empty((len(ws), gan.resolution, gan.resolution, 3), dtype=np.float32)
        done = np.zeros(len(ws), dtype=bool)
        for m in alpha_multiples:
            todo = np.flatnonzero(~done)
            if len(todo) == 0:
                break
            candidates = edit_latent(ws[todo], background, m * sigma)
            rendered = quantize(decode_latents(gan, candidates))
            reached = background_means(rendered, rect_frac, rect_frac) >= bcg_threshold
            edited[todo] = candidates
            images[todo] = rendered
            done[todo[reached]] = True
            alpha_hist[m] += int(reached.sum())
        edited_means.extend(background_means(images, rect_frac, rect_frac))

        keep = np.flatnonzero(done)
        if expression_clf is not None and len(keep):
            fires = classify(expression_clf, images[keep]) != 1
            moved = keep[fires]
            if len(moved):
                edited[moved] = neutralize(edited[moved], expression)
                images[moved] = quantize(decode_latents(gan, edited[moved]))
                still = background_means(images[moved], rect_frac, rect_frac) >= bcg_threshold
                done[moved[~still]] = False
                keep = np.flatnonzero(done)
        if len(keep) == 0:
            continue

        scores = np.array([symmetry_score(images[i]) for i in keep])
        chosen, cutoff = symmetric_selection(scores, keep_quantile)
        cutoffs.append(cutoff)
        keep, scores = keep[chosen], scores[chosen]
        skins = classify(classifiers['skin_group'], images[keep])
        shapes = classify(classifiers['shape_group'], images[keep])
        for i, score, skin, shape in zip(keep, scores, skins, shapes):
            cell = (int(skin), int(shape))
            if counts[cell] >= quotas[cell]:
                continue
            identity_id = len(records)
            rel = '{}/0.png'.format(identity_id)
            os.makedirs(os.path.join(out_dir, str(identity_id)), exist_ok=True)
            save_png(images[i], os.path.join(out_dir, rel))
            bcg_m = float(background_means(images[i], rect_frac, rect_frac))
            exported_means.append(bcg_m)
            records.append(SampleRecord(rel, identity_id, True, NORMAL, 'train',
                                        {'skin_group': cell[0], 'shape_group': cell[1],
                                         'bcg_m': bcg_m, 'symmetry': float(score)}))
            counts[cell] += 1
            bar.update(1)
        logger.debug('round %d: %d kept, %d exported so far', rounds, len(keep), len(records))
    bar.close()

    summary = {
        'target_size': target_size,
        'rounds': rounds,
        'sampled': len(raw_means),
        'raw_bcg_m': float(np.mean(raw_means)) if raw_means else None,
        'edited_bcg_m': float(np.mean(edited_means)) if edited_means else None,
        'exported_bcg_m': float(np.mean(exported_means)) if exported_means else None,
        'symmetry_cutoffs': cutoffs,
        'alpha_histogram': {str(m): n for m, n in alpha_hist.items()},
        'quotas': {'{}-{}'.format(*cell): n for cell, n in quotas.items()},
        'counts': {'{}-{}'.format(*cell): n for cell, n in counts.items()},
    }
    with open(os.path.join(out_dir, SUMMARY_NAME + '.tmp'), 'w') as fh:
        json.dump(summary, fh, indent=2)
    os.replace(os.path.join(out_dir, SUMMARY_NAME + '.tmp'), os.path.join(out_dir, SUMMARY_NAME))

    for cell in CELLS:
        if counts[cell] < quotas[cell]:
            raise StarvedCellError(cell, counts[cell], quotas[cell])
    manifest = Manifest(records, out_dir)
    manifest.save()
    logger.info('exported %d normal images; mean bcg_m raw %.3f, edited %.3f, exported %.3f',
                len(records), summary['raw_bcg_m'], summary['edited_bcg_m'],
                summary['exported_bcg_m'])
    return manifest

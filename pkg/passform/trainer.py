# -*- coding: utf-8 -*-
"""
passform.trainer - adversarial training of the normalizer
~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~

Alternating discriminator/generator optimization over unpaired batches of
non-normal and normal images, with lazily scheduled R1 and path length
regularization, atomic checkpoints and a JSON-lines loss log. The identity
encoder is frozen throughout.
"""
import copy
import dataclasses
import json
import logging
import math
import os

import numpy as np
import torch
from tqdm import tqdm

from . import losses
from .config import config_hash
from .exceptions import (ArgumentError, ConfigurationError, NumericError,
                         TrainingDivergedError, ValidationError)
from .imageio import ImageDataset, to_images, to_tensor
from .models import (REGION_PRESETS, PlainDecoder, RegionDiscriminator, StyleDecoder,
                     load_modules, regions_from_config, resolve_device, save_modules)

logger = logging.getLogger(__name__)

LOG_NAME = 'train_log.jsonl'


@dataclasses.dataclass
class TrainConfig:
    """Training hyperparameters.

    The optimizer and loss-weight defaults are the full-scale settings of this
    method; widths, steps and batch size are desk-scale choices.
    """

    adam_alpha: float = 0.001
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    batch_size: int = 16
    total_steps: int = 20000
    g_reg_interval: int = 4
    d_reg_interval: int = 16
    loss_weights: losses.LossWeights = dataclasses.field(default_factory=losses.LossWeights)
    resolution: int = 128
    seed: int = 0
    d_w: int = 128
    pl_weight: float = 2.0
    pl_decay: float = 0.99
    r1_gamma: float = 1.0
    checkpoint_interval: int = 1000
    log_interval: int = 50
    num_workers: int = 0
    device: str = 'auto'
    generator_kind: str = 'style'
    max_channels: int = 128
    min_channels: int = 32
    disc_channels: int = 32
    adversarial: str = 'hinge'
    region_preset: str = 'seven'
    regions: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = losses.LossWeights(**self.loss_weights)
        if self.g_reg_interval < 1 or self.d_reg_interval < 1:
            raise ConfigurationError('regularization intervals must be >= 1')
        if self.batch_size < 1:
            raise ConfigurationError('batch_size must be >= 1')
        if self.resolution not in (64, 128):
            raise ConfigurationError('resolution must be 64 or 128')
        if self.generator_kind not in ('style', 'plain'):
            raise ConfigurationError('generator_kind must be style or plain')
        if self.region_preset not in REGION_PRESETS:
            raise ConfigurationError('region_preset must be one of {}'
                                     .format(sorted(REGION_PRESETS)))
        if self.adversarial != 'hinge':
            raise ConfigurationError('only the hinge adversarial loss is implemented')

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError('unknown training options: {}'.format(sorted(unknown)))
        return cls(**data)

    def config_hash(self):
        return config_hash(self.to_dict())

    def region_set(self):
        return regions_from_config(self.regions, self.region_preset)


@dataclasses.dataclass
class Checkpoint:
    """Everything needed to continue training or to normalize images.

    Attributes:
        encoder (IdentityEncoder): Frozen identity encoder.
        generator (StyleDecoder or PlainDecoder): Decoder.
        discriminator (RegionDiscriminator): Region discriminators.
        g_opt, d_opt (torch.optim.Adam): Optimizer state.
        step (int): Completed training steps.
        pl_mean (float): Running mean path length.
        config_hash (str): Hash of the TrainConfig that produced it.
        last_good (str): Path of the last checkpoint written, if any.

    """

    encoder: torch.nn.Module
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    step: int = 0
    pl_mean: float = 0.0
    config_hash: str = ''
    config: dict = dataclasses.field(default_factory=dict)
    last_good: str = None


def build_adam(params, cfg):
    return torch.optim.Adam(params, lr=cfg.adam_alpha, betas=(cfg.adam_beta1, cfg.adam_beta2),
                            eps=cfg.adam_eps)


def build_generator(cfg, in_dim):
    if cfg.generator_kind == 'plain':
        return PlainDecoder(in_dim, cfg.resolution, cfg.max_channels, cfg.min_channels)
    return StyleDecoder(in_dim, cfg.d_w, cfg.resolution, cfg.max_channels, cfg.min_channels)


def new_checkpoint(encoder, cfg):
    """Fresh generator and discriminators around a pretrained encoder."""

    if not encoder.trained:
        raise ConfigurationError('the identity encoder is untrained; pretrain it first')
    if encoder.arch['resolution'] != cfg.resolution:
        raise ConfigurationError('encoder resolution {} does not match training resolution {}'
                                 .format(encoder.arch['resolution'], cfg.resolution))
    device = resolve_device(cfg.device)
    torch.manual_seed(cfg.seed)
    encoder = encoder.to(device).freeze()
    generator = build_generator(cfg, encoder.arch['d_e']).to(device)
    discriminator = RegionDiscriminator(cfg.region_set(), cfg.disc_channels).to(device)
    return Checkpoint(encoder, generator, discriminator,
                      build_adam(generator.parameters(), cfg),
                      build_adam(discriminator.parameters(), cfg),
                      config_hash=cfg.config_hash(), config=cfg.to_dict())


def save_checkpoint(ckpt, path):
    """Writes a checkpoint (``.pt`` plus ``.json`` sidecar) atomically."""

    save_modules(path,
                 {'encoder': ckpt.encoder, 'generator': ckpt.generator,
                  'discriminator': ckpt.discriminator},
                 meta={'step': ckpt.step, 'pl_mean': ckpt.pl_mean,
                       'config_hash': ckpt.config_hash, 'config': ckpt.config},
                 extra_state={'g_opt': ckpt.g_opt.state_dict(), 'd_opt': ckpt.d_opt.state_dict()})
    return path


def load_checkpoint(path, device='cpu'):
    """Reads a checkpoint written by `save_checkpoint`."""

    modules, sidecar, state = load_modules(path, resolve_device(device))
    cfg = TrainConfig.from_dict(sidecar['config'])
    encoder = modules['encoder'].freeze()
    ckpt = Checkpoint(encoder, modules['generator'], modules['discriminator'],
                      build_adam(modules['generator'].parameters(), cfg),
                      build_adam(modules['discriminator'].parameters(), cfg),
                      step=sidecar['step'], pl_mean=sidecar['pl_mean'],
                      config_hash=sidecar['config_hash'], config=sidecar['config'], last_good=path)
    ckpt.g_opt.load_state_dict(state['g_opt'])
    ckpt.d_opt.load_state_dict(state['d_opt'])
    return ckpt


def _check(name, value, ckpt):
    value = float(value)
    if not math.isfinite(value):
        raise TrainingDivergedError(name, value, ckpt.step, ckpt.last_good)
    return value


def train_step(state, x_batch, y_batch, cfg):
    """One discriminator update followed by one generator update.

    Args:
        state (Checkpoint): Updated in place and returned.
        x_batch (torch.Tensor): Non-normal images, ``N x 3 x H x W``.
        y_batch (torch.Tensor): Normal images, same shape.
        cfg (TrainConfig): Hyperparameters.

    Returns:
        tuple: ``(state, LossReport)``.

    Raises:
        TrainingDivergedError: A loss went non-finite; `last_good` names the
            last checkpoint on disk. The discriminator and its optimizer are
            rolled back when the generator side diverges.

    """

    if x_batch.shape[0] == 0 or y_batch.shape[0] == 0:
        raise ArgumentError('train_step needs non-empty batches')
    if x_batch.shape != y_batch.shape:
        raise ArgumentError('non-normal and normal batches must have equal shapes')
    encoder, generator, disc = state.encoder, state.generator, state.discriminator
    device = next(generator.parameters()).device
    x_batch, y_batch = x_batch.to(device), y_batch.to(device)
    weights = cfg.loss_weights
    step = state.step
    n_regions = len(disc.regions)
    # Restored if the generator phase diverges after the discriminator moved.
    saved = (copy.deepcopy(disc.state_dict()), copy.deepcopy(state.d_opt.state_dict()),
             state.pl_mean)

    # Discriminator.
    disc.requires_grad_(True)
    with torch.no_grad():
        x_fake = generator(encoder(x_batch))
        y_fake = generator(encoder(y_batch))
    d_loss = losses.discriminator_loss(disc(x_fake), disc(y_fake), disc(y_batch),
                                       n_regions=n_regions)
    l_disc = _check('l_disc', d_loss, state)
    r1_value = None
    if step % cfg.d_reg_interval == 0:
        r1 = losses.r1_penalty(disc, y_batch, cfg.r1_gamma)
        r1_value = _check('r1_penalty', r1, state)
        d_loss = d_loss + r1 * cfg.d_reg_interval
    state.d_opt.zero_grad(set_to_none=True)
    d_loss.backward()
    state.d_opt.step()

    # Generator.
    disc.requires_grad_(False)
    try:
        with torch.no_grad():
            e_x = encoder(x_batch)
            e_y = encoder(y_batch)
        x_fake = generator(e_x)
        y_fake = generator(e_y)
        terms = {
            'l_adv': losses.adversarial_gen_loss(disc(x_fake), disc(y_fake), disc(y_batch),
                                                  n_regions=n_regions),
            'l_ip': losses.identity_loss(e_x, encoder(x_fake), e_y, encoder(y_fake)),
            'l_p': losses.pixel_loss(y_batch, y_fake),
            'l_sym': losses.symmetric_loss(x_fake, y_fake),
        }
        values = {name: float(term) for name, term in terms.items()}
        try:
            g_loss = losses.total_gen_loss(terms, weights)
            l_gen = losses.total_gen_loss(values, weights)
        except NumericError as err:
            raise TrainingDivergedError(err.term, err.value, state.step, state.last_good) from err
        pl_value = None
        if step % cfg.g_reg_interval == 0:
            rng = torch.Generator().manual_seed(cfg.seed * 1000003 + step)
            pl, state.pl_mean = losses.path_length_penalty(generator, e_y, state.pl_mean,
                                                           cfg.pl_decay, rng=rng)
            pl_value = _check('pl_penalty', pl, state)
            g_loss = g_loss + pl * (cfg.pl_weight * cfg.g_reg_interval)
        state.g_opt.zero_grad(set_to_none=True)
        g_loss.backward()
        state.g_opt.step()
    except TrainingDivergedError:
        disc.load_state_dict(saved[0])
        state.d_opt.load_state_dict(saved[1])
        state.pl_mean = saved[2]
        raise
    finally:
        disc.requires_grad_(True)

    state.step += 1
    report = losses.LossReport(step=step, l_p=values['l_p'], l_ip=values['l_ip'],
                               l_sym=values['l_sym'], l_adv=values['l_adv'], l_gen=l_gen,
                               l_disc=l_disc, pl_penalty=pl_value, r1_penalty=r1_value)
    return state, report


def batch_stream(dataset, batch_size, seed, num_workers):
    """Endless shuffled batches; each pass reshuffles."""

    generator = torch.Generator().manual_seed(seed)
    loader = torch.utils.data.DataLoader(dataset, batch_size=batch_size, shuffle=True,
                                         drop_last=True, generator=generator,
                                         num_workers=num_workers,
                                         persistent_workers=num_workers > 0)
    while True:
        for batch in loader:
            yield batch


def check_normal_manifest(normal):
    if len(normal) == 0:
        raise ValidationError('the normal manifest is empty')
    bad = [r.image_path for r in normal if not r.is_normal]
    if bad:
        raise ValidationError('the normal manifest holds {} non-normal records, first: {}'
                              .format(len(bad), bad[0]))


def train(non_normal, normal, cfg, out_dir, encoder=None, resume=None):
    """Trains a normalizer on unpaired non-normal and normal images.

    The two manifests are streamed and shuffled independently; only pixels
    leave the loaders.

    Args:
        non_normal (Manifest): Inputs with variations.
        normal (Manifest): Passport-style targets, all ``is_normal``.
        cfg (TrainConfig): Hyperparameters.
        out_dir (str): Checkpoints and ``train_log.jsonl`` go here.
        encoder (IdentityEncoder): Pretrained encoder; ignored when resuming.
        resume (str): Checkpoint path to continue from.

    Returns:
        Checkpoint: State after ``cfg.total_steps`` steps.

    """

    if len(non_normal) == 0:
        raise ValidationError('the non-normal manifest is empty')
    check_normal_manifest(normal)
    os.makedirs(out_dir, exist_ok=True)

    if resume:
        ckpt = load_checkpoint(resume, cfg.device)
    elif encoder is None:
        raise ConfigurationError('train needs a pretrained encoder or a checkpoint to resume')
    else:
        ckpt = new_checkpoint(encoder, cfg)

    batch = min(cfg.batch_size, len(non_normal), len(normal))
    x_stream = batch_stream(ImageDataset(non_normal), batch, cfg.seed * 2 + 1, cfg.num_workers)
    y_stream = batch_stream(ImageDataset(normal), batch, cfg.seed * 2 + 2, cfg.num_workers)

    log_path = os.path.join(out_dir, LOG_NAME)
    with open(log_path, 'a' if resume else 'w') as log:
        bar = tqdm(range(ckpt.step, cfg.total_steps), desc='train', disable=None)
        for _ in bar:
            ckpt, report = train_step(ckpt, next(x_stream), next(y_stream), cfg)
            log.write(json.dumps(report.to_dict()) + '\n')
            if report.step % cfg.log_interval == 0:
                log.flush()
                logger.info('step %d: l_gen %.4f l_disc %.4f l_p %.4f l_ip %.4f l_sym %.4f',
                            report.step, report.l_gen, report.l_disc, report.l_p,
                            report.l_ip, report.l_sym)
            if ckpt.step % cfg.checkpoint_interval == 0:
                ckpt.last_good = save_checkpoint(
                    ckpt, os.path.join(out_dir, 'checkpoint-{:07d}.pt'.format(ckpt.step)))
    ckpt.last_good = save_checkpoint(ckpt, os.path.join(out_dir, 'final.pt'))
    return ckpt


def read_log(path):
    """LossReports of a training log, in order."""

    with open(path) as fh:
        return [losses.LossReport(**json.loads(line)) for line in fh if line.strip()]


class Normalizer:
    """Inference path: one encoder pass, one generator pass.

    Forward hooks count the calls made to each network.

    Attributes:
        encode_calls (int): Encoder forward passes so far.
        generate_calls (int): Generator forward passes so far.

    """

    def __init__(self, encoder, generator):
        self.encoder = encoder.eval()
        self.generator = generator.eval()
        self.resolution = encoder.arch['resolution']
        self.reset_counts()
        self._hooks = [encoder.register_forward_hook(self._count('encode_calls')),
                       generator.register_forward_hook(self._count('generate_calls'))]

    @classmethod
    def from_checkpoint(cls, ckpt):
        return cls(ckpt.encoder, ckpt.generator)

    def _count(self, name):
        def hook(module, inputs, output):
            setattr(self, name, getattr(self, name) + 1)
        return hook

    def reset_counts(self):
        self.encode_calls = 0
        self.generate_calls = 0

    def close(self):
        for hook in self._hooks:
            hook.remove()
        self._hooks = []

    @property
    def device(self):
        return next(self.generator.parameters()).device

    def __call__(self, images):
        """Normalizes an ``N x 3 x H x W`` batch."""

        with torch.no_grad():
            return self.generator(self.encoder(images.to(self.device)))

    def normalize_image(self, image):
        image = np.asarray(image)
        if image.shape != (self.resolution, self.resolution, 3):
            raise ArgumentError('normalizer expects a {0}x{0}x3 image, got {1}'
                                .format(self.resolution, image.shape))
        return to_images(self(to_tensor(image)))[0]


def normalize(ckpt, image):
    """Normalizes one HWC image with a trained checkpoint."""

    normalizer = Normalizer.from_checkpoint(ckpt)
    try:
        return normalizer.normalize_image(image)
    finally:
        normalizer.close()


def clone(ckpt):
    """Deep copy of a checkpoint; the copied optimizers track the copied modules."""

    return copy.deepcopy(ckpt)

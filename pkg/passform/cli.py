# -*- coding: utf-8 -*-
"""Console script for passform.

Each subcommand runs one pipeline stage and writes its artifacts together
with a ``run.json`` record into an output directory. Option defaults may
come from a JSON file given with ``--config``; flags on the command line
take precedence.
"""
import json
import logging
import os

import click
import torch

from . import evalsuite, latentlab, synthface, trainer
from .config import RunConfig, write_run_record
from .exceptions import ArgumentError, ConfigurationError, ValidationError
from .imageio import ImageDataset, load_png, save_png, to_images
from .losses import LossWeights
from .models import REGION_PRESETS, load_encoder, pretrain_encoder, save_encoder

logger = logging.getLogger(__name__)

CONTEXT_SETTINGS = dict(help_option_names=['-h', '--help'])
USAGE_ERRORS = (ArgumentError, ValidationError, ConfigurationError)


class InputError(click.ClickException):
    """Bad input data or configuration; exits with status 2."""

    exit_code = 2


class PassformGroup(click.Group):
    """Maps library errors onto exit codes: 2 for bad input, 1 otherwise."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except USAGE_ERRORS as err:
            raise InputError(str(err))
        except Exception as err:
            logger.debug('command failed', exc_info=True)
            raise click.ClickException('{}: {}'.format(type(err).__name__, err))


def _load_config(ctx, param, value):
    if value:
        config = RunConfig()
        try:
            config.load_json(value)
        except (OSError, ValueError) as err:
            raise click.BadParameter('cannot read {}: {}'.format(value, err))
        ctx.default_map = dict(ctx.default_map or {}, **config.defaults_for(ctx.info_name))
    return value


def config_option(func):
    """Eager ``--config`` that fills the command's option defaults from JSON."""

    return click.option('--config', type=click.Path(exists=True, dir_okay=False),
                        callback=_load_config, is_eager=True, expose_value=False,
                        help='JSON file of option defaults.')(func)


def common_options(func):
    """``--config``, ``--out-dir``, ``--seed`` and ``--device``."""

    func = click.option('--device', default='auto', show_default=True,
                        help='cpu, cuda or auto.')(func)
    func = click.option('--seed', type=int, default=0, show_default=True,
                        help='Seed for all randomness of the run.')(func)
    func = click.option('--out-dir', type=click.Path(file_okay=False), envvar='PF_OUT_DIR',
                        required=True, help='Artifact directory (env PF_OUT_DIR).')(func)
    return config_option(func)


def _record(ctx, out_dir, params):
    digest = write_run_record(out_dir, ctx.info_name, params, params.get('seed'))
    logger.debug('run.json written to %s (config %s)', out_dir, digest)
    return digest


@click.group(cls=PassformGroup, context_settings=CONTEXT_SETTINGS)
@click.option('-v', '--verbose', is_flag=True, help='Log debug messages.')
def main(verbose):
    """Face normalization toolkit: corpus, normal set, training and evaluation."""

    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


@main.command('gen-corpus')
@common_options
@click.option('--n-identities', type=int, default=400, show_default=True)
@click.option('--variations', type=int, default=20, show_default=True,
              help='Non-normal renders per identity.')
@click.option('--resolution', type=int, default=128, show_default=True)
@click.option('--test-fraction', type=float, default=0.4, show_default=True)
@click.option('--exclude', multiple=True, type=click.Choice(synthface.VARIATION_KINDS),
              help='Variation kind to withhold; repeatable.')
@click.option('--workers', type=int, default=1, show_default=True)
@click.pass_context
def gen_corpus(ctx, out_dir, seed, device, n_identities, variations, resolution, test_fraction,
               exclude, workers):
    """Render a labeled synthetic face corpus."""

    _record(ctx, out_dir, dict(ctx.params, exclude=list(exclude)))
    manifest = synthface.build_corpus(n_identities, variations, out_dir, seed, resolution,
                                      test_fraction, exclude, workers)
    click.echo('{} images of {} identities written to {}'
               .format(len(manifest), n_identities, out_dir))


@main.command('pretrain-encoder')
@common_options
@click.option('--corpus', type=click.Path(exists=True), required=True)
@click.option('--d-e', type=int, default=256, show_default=True, help='Embedding width.')
@click.option('--epochs', type=int, default=10, show_default=True)
@click.option('--batch-size', type=int, default=64, show_default=True)
@click.option('--lr', type=float, default=1e-3, show_default=True)
@click.pass_context
def pretrain_encoder_cmd(ctx, out_dir, seed, device, corpus, d_e, epochs, batch_size, lr):
    """Train the frozen identity encoder on the corpus train split."""

    manifest = synthface.Manifest.load(corpus)
    _record(ctx, out_dir, ctx.params)
    encoder = pretrain_encoder(manifest, d_e, epochs, seed, batch_size=batch_size, lr=lr,
                               device=device)
    path = save_encoder(encoder, os.path.join(out_dir, 'encoder.pt'))
    click.echo('encoder written to {} (held-out accuracy {})'
               .format(path, encoder.arch.get('heldout_accuracy')))


def _train_config(params, **extra):
    fields = dict(extra)
    for name in ('batch_size', 'd_w', 'resolution', 'max_channels', 'min_channels',
                 'disc_channels', 'seed', 'device', 'checkpoint_interval', 'log_interval',
                 'num_workers'):
        if name in params:
            fields[name] = params[name]
    if 'steps' in params:
        fields['total_steps'] = params['steps']
    return trainer.TrainConfig(**fields)


def network_options(func):
    for option in reversed([
            click.option('--steps', type=int, default=20000, show_default=True),
            click.option('--batch-size', type=int, default=16, show_default=True),
            click.option('--resolution', type=int, default=128, show_default=True),
            click.option('--d-w', type=int, default=128, show_default=True),
            click.option('--max-channels', type=int, default=128, show_default=True),
            click.option('--min-channels', type=int, default=32, show_default=True),
            click.option('--disc-channels', type=int, default=32, show_default=True),
            click.option('--log-interval', type=int, default=50, show_default=True),
            click.option('--num-workers', type=int, default=0, show_default=True)]):
        func = option(func)
    return func


@main.command('train-gan')
@common_options
@network_options
@click.option('--corpus', type=click.Path(exists=True), required=True)
@click.pass_context
def train_gan(ctx, out_dir, seed, device, corpus, **params):
    """Train the unconditional toy GAN on the whole corpus."""

    manifest = synthface.Manifest.load(corpus)
    cfg = _train_config(dict(params, seed=seed, device=device))
    _record(ctx, out_dir, dict(ctx.params, train_config=cfg.to_dict()))
    latentlab.train_toy_gan(manifest, cfg, out_dir)
    click.echo('GAN written to {}'.format(os.path.join(out_dir, 'gan.pt')))


@main.command('find-direction')
@common_options
@click.option('--gan', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--corpus', type=click.Path(exists=True),
              help='Labeled corpus; trains the attribute classifiers when given.')
@click.option('--n-samples', type=int, default=50000, show_default=True)
@click.option('--k-frac', type=float, default=0.1, show_default=True)
@click.option('--classifier-epochs', type=int, default=5, show_default=True)
@click.pass_context
def find_direction(ctx, out_dir, seed, device, gan, corpus, n_samples, k_frac, classifier_epochs):
    """Fit the background (and expression) directions in W."""

    gan_ckpt = latentlab.load_gan(gan, device)
    _record(ctx, out_dir, ctx.params)
    classifiers = {}
    if corpus:
        manifest = synthface.Manifest.load(corpus)
        for attribute in latentlab.ATTRIBUTE_CLASSES:
            classifiers[attribute] = latentlab.fit_attribute_classifier(
                manifest, attribute, classifier_epochs, seed, device=device)
        latentlab.save_classifiers(os.path.join(out_dir, 'classifiers.pt'), classifiers)
    directions = latentlab.find_directions(gan_ckpt, classifiers, n_samples, seed, k_frac)
    latentlab.save_directions(os.path.join(out_dir, 'directions.json'), directions)
    for direction in directions:
        click.echo('{}: held-out accuracy {:.3f}, sigma {:.4f}'.format(
            direction.attribute, direction.svm_heldout_accuracy, direction.projection_sigma))


def _cell_weights(ctx, param, value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    try:
        weights = [float(w) for w in value.split(',')]
    except ValueError:
        raise click.BadParameter('expected comma-separated numbers')
    if len(weights) != len(latentlab.CELLS):
        raise click.BadParameter('expected {} weights'.format(len(latentlab.CELLS)))
    return weights


@main.command('make-normal-set')
@common_options
@click.option('--gan', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--directions', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--classifiers', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--target-size', type=int, default=20000, show_default=True)
@click.option('--keep-quantile', type=float, default=latentlab.KEEP_QUANTILE, show_default=True)
@click.option('--cell-weights', callback=_cell_weights,
              help='Six comma-separated weights, skin-major, for an imbalanced set.')
@click.option('--batch-size', type=int, default=256, show_default=True)
@click.option('--max-rounds', type=int, default=200, show_default=True)
@click.pass_context
def make_normal_set(ctx, out_dir, seed, device, gan, directions, classifiers, target_size,
                    keep_quantile, cell_weights, batch_size, max_rounds):
    """Export a balanced set of generated passport-style faces."""

    gan_ckpt = latentlab.load_gan(gan, device)
    dirs = latentlab.load_directions(directions)
    clfs = latentlab.load_classifiers(classifiers, device)
    _record(ctx, out_dir, ctx.params)
    manifest = latentlab.build_normal_dataset(gan_ckpt, dirs, clfs, target_size, out_dir, seed,
                                              keep_quantile, cell_weights, batch_size=batch_size,
                                              max_rounds=max_rounds)
    click.echo('{} normal images written to {}'.format(len(manifest), out_dir))


@main.command('train-fnm')
@common_options
@network_options
@click.option('--corpus', type=click.Path(exists=True), required=True,
              help='Corpus whose train-split non-normal images are the inputs.')
@click.option('--normal', type=click.Path(exists=True), required=True,
              help='Normal manifest from make-normal-set.')
@click.option('--encoder', type=click.Path(exists=True, dir_okay=False))
@click.option('--resume', type=click.Path(exists=True, dir_okay=False))
@click.option('--generator-kind', type=click.Choice(['style', 'plain']), default='style',
              show_default=True)
@click.option('--region-preset', type=click.Choice(sorted(REGION_PRESETS)), default='seven',
              show_default=True, help='Discriminator region set.')
@click.option('--lambda1', type=float, default=10.0, show_default=True)
@click.option('--lambda2', type=float, default=0.1, show_default=True)
@click.option('--lambda3', type=float, default=1.0, show_default=True)
@click.option('--checkpoint-interval', type=int, default=1000, show_default=True)
@click.pass_context
def train_fnm(ctx, out_dir, seed, device, corpus, normal, encoder, resume, generator_kind,
              region_preset, lambda1, lambda2, lambda3, **params):
    """Train the face normalizer on unpaired non-normal and normal images."""

    if not encoder and not resume:
        raise click.UsageError('one of --encoder or --resume is required')
    non_normal = synthface.Manifest.load(corpus).split('train').non_normal()
    normal_set = synthface.Manifest.load(normal)
    cfg = _train_config(dict(params, seed=seed, device=device), generator_kind=generator_kind,
                        region_preset=region_preset,
                        loss_weights=LossWeights(lambda1, lambda2, lambda3))
    enc = load_encoder(encoder, device) if encoder else None
    _record(ctx, out_dir, dict(ctx.params, train_config=cfg.to_dict()))
    ckpt = trainer.train(non_normal, normal_set, cfg, out_dir, encoder=enc, resume=resume)
    click.echo('trained {} steps; checkpoint {}'.format(ckpt.step, ckpt.last_good))


@main.command('normalize')
@config_option
@click.option('--ckpt', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--in', 'source', type=click.Path(exists=True), required=True,
              help='A PNG, or a manifest file or directory.')
@click.option('--out', type=click.Path(), required=True,
              help='Output PNG, or a directory for a manifest.')
@click.option('--device', default='auto', show_default=True)
@click.option('--batch-size', type=int, default=64, show_default=True)
@click.pass_context
def normalize_cmd(ctx, ckpt, source, out, device, batch_size):
    """Normalize one image or every image of a manifest."""

    state = trainer.load_checkpoint(ckpt, device)
    normalizer = trainer.Normalizer.from_checkpoint(state)
    try:
        if os.path.isfile(source) and source.lower().endswith('.png'):
            image = normalizer.normalize_image(load_png(source))
            os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
            save_png(image, out)
            click.echo('wrote {}'.format(out))
            return
        manifest = synthface.Manifest.load(source)
        _record(ctx, out, dict(ctx.params, seed=None))
        loader = torch.utils.data.DataLoader(ImageDataset(manifest), batch_size=batch_size)
        records = iter(manifest)
        for batch in loader:
            for image in to_images(normalizer(batch)):
                record = next(records)
                path = os.path.join(out, record.image_path)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                save_png(image, path)
        click.echo('wrote {} images to {}'.format(len(manifest), out))
    finally:
        normalizer.close()


@main.command('evaluate')
@common_options
@click.option('--ckpt', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--corpus', type=click.Path(exists=True), required=True,
              help='Corpus whose test split provides gallery and probes.')
@click.option('--normalizer/--no-normalizer', 'with_normalizer', default=True,
              help='Also run the normalized arm (default) or the raw arm only.')
@click.option('--n-impostor', type=int, default=None,
              help='Impostor pairs; defaults to the minimum the smallest FAR needs.')
@click.option('--bench-images', type=int, default=0, show_default=True)
@click.option('--grid/--no-grid', default=False, help='Write a before/after image grid.')
@click.pass_context
def evaluate(ctx, out_dir, seed, device, ckpt, corpus, with_normalizer, n_impostor,
             bench_images, grid):
    """Recognition metrics of the raw and normalized arms."""

    state = trainer.load_checkpoint(ckpt, device)
    test = synthface.Manifest.load(corpus).split('test')
    gallery, probes = test.normal(), test.non_normal()
    _record(ctx, out_dir, ctx.params)
    reports = {'raw': evalsuite.evaluate_arm(gallery, probes, state.encoder, None,
                                             n_impostor=n_impostor, seed=seed,
                                             config_hash=state.config_hash)}
    if with_normalizer:
        normalizer = trainer.Normalizer.from_checkpoint(state)
        reports['normalized'] = evalsuite.evaluate_arm(
            gallery, probes, state.encoder, normalizer, n_impostor=n_impostor, seed=seed,
            bench_images=bench_images, config_hash=state.config_hash)
        if grid:
            evalsuite.save_comparison_grid(probes, normalizer,
                                           os.path.join(out_dir, 'comparison.png'),
                                           gallery=gallery)
        normalizer.close()
    for arm, report in reports.items():
        report.save(os.path.join(out_dir, 'report_{}.json'.format(arm)))
    table = evalsuite.render_table(reports)
    with open(os.path.join(out_dir, 'table.txt'), 'w') as fh:
        fh.write(table + '\n')
    click.echo(table)


@main.command('bench')
@config_option
@click.option('--ckpt', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--n-images', type=int, default=100, show_default=True)
@click.option('--warmup', type=int, default=5, show_default=True)
@click.option('--device', default='auto', show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--out-dir', type=click.Path(file_okay=False), envvar='PF_OUT_DIR',
              help='Also write bench.json here.')
@click.pass_context
def bench(ctx, ckpt, n_images, warmup, device, seed, out_dir):
    """Time single-image normalization."""

    state = trainer.load_checkpoint(ckpt, device)
    normalizer = trainer.Normalizer.from_checkpoint(state)
    try:
        result = evalsuite.bench_report(normalizer, n_images, warmup, seed)
    finally:
        normalizer.close()
    if out_dir:
        _record(ctx, out_dir, ctx.params)
        with open(os.path.join(out_dir, 'bench.json'), 'w') as fh:
            json.dump(result, fh, indent=2)
    click.echo('{:.4f} s per image over {} images ({} encode, {} generate calls per image)'
               .format(result['seconds_per_image'], n_images,
                       result['encode_calls_per_image'], result['generate_calls_per_image']))
    click.echo(evalsuite.REFERENCE_LINE)


if __name__ == "__main__":
    main()

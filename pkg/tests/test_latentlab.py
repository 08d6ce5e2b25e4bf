#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
test_latentlab
--------------

Tests for background scoring, latent directions, the toy GAN and the export
of the balanced normal dataset.
"""

import json
import os

import numpy as np
import pytest
import torch
from torch import nn

from passform import latentlab
from passform.exceptions import (ArgumentError, ConfigurationError, StarvedCellError,
                                 TrainingDivergedError, ValidationError)
from passform.latentlab import BackgroundStats, Direction
from passform.models import save_encoder
from passform.synthface import Manifest


class StubGenerator(nn.Module):
    """16x16 faces read straight off a 3-d latent.

    ``w[0]`` sets the background through ``sigmoid(3 w[0])``, ``w[1]`` a
    centre patch and ``w[2]`` a lower patch. Every render is mirror
    symmetric.
    """

    def __init__(self):
        super().__init__()
        self.anchor = nn.Parameter(torch.zeros(1))
        self.arch = {'kind': 'style', 'in_dim': 3, 'd_w': 3, 'resolution': 16}

    def mapping(self, z):
        return z

    def synthesis(self, ws):
        n = ws.shape[0]
        image = torch.sigmoid(3.0 * ws[:, 0]).view(n, 1, 1, 1).expand(n, 3, 16, 16).clone()
        image[:, :, 5:11, 4:12] = torch.sigmoid(ws[:, 1]).view(n, 1, 1, 1)
        image[:, :, 12:15, 6:10] = torch.sigmoid(ws[:, 2]).view(n, 1, 1, 1)
        return image


class StubClassifier(nn.Module):

    def __init__(self, rule):
        super().__init__()
        self.anchor = nn.Parameter(torch.zeros(1))
        self.rule = rule

    def predict(self, images):
        with torch.no_grad():
            return self.rule(images)


def skin_rule(images):
    centre = images[:, 0, 8, 8]
    return (centre >= 1.0 / 3.0).long() + (centre >= 2.0 / 3.0).long()


def shape_rule(images):
    return (images[:, 0, 13, 8] > 0.5).long()


def stub_gan():
    return latentlab.GanCheckpoint(StubGenerator(), None, None, None)


def stub_classifiers(skin=skin_rule):
    return {'skin_group': StubClassifier(skin), 'shape_group': StubClassifier(shape_rule)}


stub_background = Direction('background', [1.0, 0.0, 0.0], 1.0, 1.0)


def corner_image(size=20):
    image = np.ones((size, size, 3))
    image[:3, :3] = 0.0
    return image


def test_background_stats_oracle():
    stats = latentlab.background_stats(corner_image())
    assert abs(stats.bcg_m - 0.5) < 1e-9
    assert abs(stats.bcg_s - 0.5) < 1e-9
    white = latentlab.background_stats(np.ones((20, 20, 3)))
    assert abs(white.bcg_m - 1.0) < 1e-9 and white.bcg_s < 1e-9


def test_background_stats_fraction_range():
    with pytest.raises(ArgumentError):
        latentlab.background_stats(corner_image(), rect_h_frac=0.6)
    with pytest.raises(ArgumentError):
        latentlab.background_stats(corner_image(), rect_w_frac=0.0)


def test_background_means_batch():
    stack = np.stack([corner_image(), np.ones((20, 20, 3))])
    means = latentlab.background_means(stack)
    assert means.shape == (2,)
    assert np.allclose(means, [0.5, 1.0])


def test_select_pos_neg():
    means = [0.9, 0.95, 0.5, 0.2, 0.99, 0.6]
    stds = [0.05, 0.01, 0.3, 0.4, 0.0, 0.2]
    stats = [BackgroundStats(m, s) for m, s in zip(means, stds)]
    assert latentlab.select_pos_neg(stats, 2) == ([1, 4], [2, 3])
    shifted = [BackgroundStats(m - 0.1, s) for m, s in zip(means, stds)]
    assert latentlab.select_pos_neg(shifted, 2) == ([1, 4], [2, 3])
    with pytest.raises(ArgumentError):
        latentlab.select_pos_neg(stats, 0)
    with pytest.raises(ArgumentError):
        latentlab.select_pos_neg(stats, 4)


def separable(seed=0, n=40, dim=4):
    rng = np.random.default_rng(seed)
    labels = np.where(np.arange(n) % 2 == 0, 1, -1)
    latents = rng.normal(scale=0.3, size=(n, dim))
    latents[:, 0] += 2.0 * labels
    return latents, labels


def test_fit_hyperplane_separable():
    latents, labels = separable()
    direction = latentlab.fit_hyperplane(latents, labels, 'toy')
    assert abs(np.linalg.norm(direction.normal) - 1.0) < 1e-9
    assert direction.normal[0] > 0.9
    assert direction.svm_heldout_accuracy == 1.0
    proj = latents @ direction.normal
    assert proj[labels == 1].mean() > proj[labels == -1].mean()
    assert np.all(np.sign(direction.signed_distance(latents)) == labels)


def test_fit_hyperplane_flipped_labels():
    latents, labels = separable(1)
    direction = latentlab.fit_hyperplane(latents, labels, 'toy')
    flipped = latentlab.fit_hyperplane(latents, -labels, 'toy')
    assert float(direction.normal @ flipped.normal) < -0.9


def test_fit_hyperplane_rejects_bad_labels():
    latents, labels = separable()
    with pytest.raises(ValidationError):
        latentlab.fit_hyperplane(latents, np.ones_like(labels), 'toy')
    with pytest.raises(ArgumentError):
        latentlab.fit_hyperplane(latents, (labels + 1) // 2, 'toy')
    with pytest.raises(ArgumentError):
        latentlab.fit_hyperplane(latents, labels[:-1], 'toy')


def test_edit_latent():
    direction = Direction('toy', [0.0, 1.0], 1.0, 1.0)
    assert np.array_equal(latentlab.edit_latent([1.0, 2.0], direction, 3.0), [1.0, 5.0])
    stack = latentlab.edit_latent(np.zeros((4, 2)), direction, -1.0)
    assert np.array_equal(stack[:, 1], [-1.0] * 4)
    with pytest.raises(ArgumentError):
        latentlab.edit_latent([1.0, 2.0, 3.0], direction, 1.0)


def test_direction_must_be_unit():
    with pytest.raises(ArgumentError):
        Direction('toy', [1.0, 1.0], 1.0, 1.0)


def test_neutralize_lands_on_hyperplane():
    direction = Direction('expression', [0.6, 0.8], 0.9, 1.0, offset=0.5)
    ws = np.random.default_rng(0).normal(size=(5, 2))
    moved = latentlab.neutralize(ws, direction)
    assert np.allclose(direction.signed_distance(moved), 0.0, atol=1e-12)
    assert np.allclose((moved - ws) @ np.array([0.8, -0.6]), 0.0, atol=1e-12)


def test_directions_file(tmp_path):
    directions = [stub_background, Direction('expression', [0.0, 0.0, 1.0], 0.8, 2.0, -0.25)]
    path = latentlab.save_directions(str(tmp_path / 'directions.json'), directions)
    loaded = latentlab.load_directions(path)
    assert [d.attribute for d in loaded] == ['background', 'expression']
    assert np.array_equal(loaded[1].normal, directions[1].normal)
    assert loaded[1].offset == -0.25
    assert latentlab.direction_for(loaded, 'pose') is None


def test_symmetry_score():
    image = np.zeros((1, 2, 3))
    image[:, 1] = 1.0
    assert latentlab.symmetry_score(image) == 1.0
    assert latentlab.symmetry_score(np.full((4, 4, 3), 0.3)) == 0.0


def test_symmetric_selection():
    kept, cutoff = latentlab.symmetric_selection([0.4, 0.1, 0.3, 0.2], 0.3)
    assert kept.tolist() == [1, 3]
    assert cutoff == 0.2
    kept, cutoff = latentlab.symmetric_selection([0.4, 0.1, 0.3, 0.2], 1.0)
    assert kept.tolist() == [0, 1, 2, 3]
    assert cutoff == 0.4
    with pytest.raises(ArgumentError):
        latentlab.symmetric_selection([0.1], 0.0)
    with pytest.raises(ArgumentError):
        latentlab.symmetric_selection([], 0.5)


def test_filter_symmetric_keeps_input_order():
    items = []
    for i, a in enumerate([0.4, 0.1, 0.3, 0.2]):
        image = np.zeros((1, 2, 3))
        image[:, 0] = a
        items.append((image, i))
    assert [latent for _, latent in latentlab.filter_symmetric(items, 0.5)] == [1, 3]


def test_cell_quotas():
    quotas = latentlab.cell_quotas(20000)
    assert sum(quotas.values()) == 20000
    assert quotas[(0, 0)] == quotas[(0, 1)] == 3334
    assert all(quotas[cell] == 3333 for cell in latentlab.CELLS[2:])
    weighted = latentlab.cell_quotas(6, [2, 1, 1, 1, 1, 0])
    assert list(weighted.values()) == [2, 1, 1, 1, 1, 0]
    with pytest.raises(ArgumentError):
        latentlab.cell_quotas(6, [1, 1, 1, 1, 1])
    with pytest.raises(ArgumentError):
        latentlab.cell_quotas(6, [1, 1, 1, 1, 1, -1])
    with pytest.raises(ArgumentError):
        latentlab.cell_quotas(0)


def test_expression_class():
    assert latentlab.expression_class(0.1) == 1
    assert latentlab.expression_class(-0.1) == 1
    assert latentlab.expression_class(0.5) == 2
    assert latentlab.expression_class(-0.5) == 0


def test_attribute_labels(corpus):
    labels = latentlab.attribute_labels(corpus, 'skin_group')
    assert labels == [r.attributes['skin_group'] for r in corpus]
    assert set(latentlab.attribute_labels(corpus, 'expression_sign')) <= {0, 1, 2}
    with pytest.raises(ArgumentError):
        latentlab.attribute_labels(corpus, 'hair')


def test_fit_attribute_classifier(tmp_path, corpus):
    model = latentlab.fit_attribute_classifier(corpus, 'skin_group', epochs=1, seed=0,
                                               batch_size=8, device='cpu')
    assert 0.0 <= model.arch['heldout_accuracy'] <= 1.0
    images = np.stack([corpus.image(r) for r in corpus.normal()])
    predicted = latentlab.classify(model, images)
    assert predicted.shape == (6,)
    assert set(predicted.tolist()) <= {0, 1, 2}
    path = latentlab.save_classifiers(str(tmp_path / 'classifiers.pt'), {'skin_group': model})
    loaded = latentlab.load_classifiers(path)
    assert np.array_equal(latentlab.classify(loaded['skin_group'], images), predicted)


@pytest.fixture
def gan_cfg(tiny_cfg):
    tiny_cfg.total_steps = 2
    return tiny_cfg


def test_toy_gan(tmp_path, corpus, gan_cfg):
    gan = latentlab.train_toy_gan(corpus, gan_cfg, str(tmp_path))
    assert gan.step == 2
    assert (gan.z_dim, gan.d_w, gan.resolution) == (16, 16, 64)
    ws = latentlab.sample_latents(gan, 5, seed=3)
    assert ws.shape == (5, 16) and ws.dtype == np.float64
    assert np.array_equal(ws, latentlab.sample_latents(gan, 5, seed=3))
    images = latentlab.decode_latents(gan, ws)
    assert images.shape == (5, 64, 64, 3)
    assert images.min() >= 0.0 and images.max() <= 1.0
    e0 = np.zeros(16)
    e0[0] = 1.0
    sweep = latentlab.background_sweep(gan, Direction('background', e0, 1.0, 1.0), ws)
    assert sweep.shape == (5, 3)

    assert os.path.exists(str(tmp_path / 'gan-0000002.pt'))
    assert gan.last_good == str(tmp_path / 'gan.pt')

    loaded = latentlab.load_gan(str(tmp_path / 'gan.pt'))
    assert loaded.step == 2
    assert np.array_equal(latentlab.decode_latents(loaded, ws), images)
    with pytest.raises(ArgumentError):
        latentlab.decode_latents(gan, np.zeros((2, 8)))


def test_gan_step_rejects_non_finite_before_update(tmp_path, corpus, gan_cfg):
    gan_cfg.total_steps = 1
    gan_cfg.checkpoint_interval = 1
    gan = latentlab.train_toy_gan(corpus, gan_cfg, str(tmp_path))
    assert os.path.exists(str(tmp_path / 'gan-0000001.pt'))
    disc_before = {k: v.clone() for k, v in gan.discriminator.state_dict().items()}
    generator_before = {k: v.clone() for k, v in gan.generator.state_dict().items()}
    real = torch.full((2, 3, 64, 64), float('nan'))
    with pytest.raises(TrainingDivergedError) as info:
        latentlab.gan_step(gan, real, gan_cfg, torch.Generator().manual_seed(0))
    assert info.value.term == 'l_disc'
    assert info.value.last_good == str(tmp_path / 'gan.pt')
    assert gan.step == 1
    for before, module in ((disc_before, gan.discriminator), (generator_before, gan.generator)):
        after = module.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)
        assert all(torch.isfinite(v).all() for v in after.values() if v.is_floating_point())


def test_toy_gan_resolution_mismatch(corpus, gan_cfg):
    gan_cfg.resolution = 128
    with pytest.raises(ConfigurationError):
        latentlab.train_toy_gan(corpus, gan_cfg)


def test_load_gan_rejects_other_files(tmp_path, tiny_encoder):
    path = save_encoder(tiny_encoder, str(tmp_path / 'encoder.pt'))
    with pytest.raises(ConfigurationError):
        latentlab.load_gan(path)


def test_find_directions_stub():
    def alternating(images):
        return torch.arange(images.shape[0]) % 3

    classifiers = {'expression_sign': StubClassifier(alternating)}
    directions = latentlab.find_directions(stub_gan(), classifiers, n_samples=60, k_frac=0.25,
                                           batch_size=16)
    assert [d.attribute for d in directions] == ['background', 'expression']
    background = directions[0]
    assert background.normal[0] > 0.8
    assert background.svm_heldout_accuracy >= 0.8


def test_background_sweep_brightens():
    gan = stub_gan()
    ws = latentlab.sample_latents(gan, 20, seed=0)
    sweep = latentlab.background_sweep(gan, stub_background, ws)
    assert np.all(np.diff(sweep, axis=1) >= 0)
    assert sweep[:, 2].mean() > sweep[:, 0].mean()


def test_build_normal_dataset(tmp_path):
    out = str(tmp_path / 'normal')
    manifest = latentlab.build_normal_dataset(stub_gan(), [stub_background], stub_classifiers(),
                                              12, out, seed=0, batch_size=32)
    assert len(manifest) == 12
    assert all(r.is_normal and r.split == 'train' for r in manifest)
    cells = [(r.attributes['skin_group'], r.attributes['shape_group']) for r in manifest]
    assert all(cells.count(cell) == 2 for cell in latentlab.CELLS)
    assert len(manifest.identities()) == 12

    reloaded = Manifest.load(out)
    assert reloaded.records == manifest.records
    skin = StubClassifier(skin_rule)
    for record in reloaded:
        image = reloaded.image(record)
        assert latentlab.background_stats(image).bcg_m >= latentlab.BCG_THRESHOLD
        assert latentlab.symmetry_score(image) == 0.0
        assert int(latentlab.classify(skin, image[None])[0]) == record.attributes['skin_group']

    with open(os.path.join(out, latentlab.SUMMARY_NAME)) as fh:
        summary = json.load(fh)
    assert summary['raw_bcg_m'] < summary['edited_bcg_m']
    assert summary['raw_bcg_m'] < summary['exported_bcg_m']
    assert summary['exported_bcg_m'] >= latentlab.BCG_THRESHOLD
    assert sum(summary['counts'].values()) == 12
    assert summary['counts'] == summary['quotas']


def test_build_normal_dataset_reproducible(tmp_path):
    a = latentlab.build_normal_dataset(stub_gan(), [stub_background], stub_classifiers(),
                                       6, str(tmp_path / 'a'), seed=4, batch_size=32)
    b = latentlab.build_normal_dataset(stub_gan(), [stub_background], stub_classifiers(),
                                       6, str(tmp_path / 'b'), seed=4, batch_size=32)
    assert a.dumps() == b.dumps()


def test_build_normal_dataset_starved_cell(tmp_path):
    def always_dark(images):
        return torch.zeros(images.shape[0], dtype=torch.long)

    out = str(tmp_path / 'starved')
    with pytest.raises(StarvedCellError) as info:
        latentlab.build_normal_dataset(stub_gan(), [stub_background],
                                       stub_classifiers(always_dark), 12, out,
                                       batch_size=32, max_rounds=3)
    assert info.value.cell == (1, 0)
    assert info.value.have == 0 and info.value.need == 2
    assert os.path.exists(os.path.join(out, latentlab.SUMMARY_NAME))


def test_build_normal_dataset_needs_inputs(tmp_path):
    with pytest.raises(ArgumentError):
        latentlab.build_normal_dataset(stub_gan(), [], stub_classifiers(), 6, str(tmp_path))
    with pytest.raises(ConfigurationError):
        latentlab.build_normal_dataset(stub_gan(), [stub_background],
                                       {'skin_group': StubClassifier(skin_rule)}, 6,
                                       str(tmp_path))

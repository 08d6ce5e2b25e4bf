#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
test_models
-----------

Tests for the networks, region crops and checkpoint containers.
"""

import numpy as np
import pytest
import torch

from passform import models, synthface
from passform.exceptions import ArgumentError, ConfigurationError
from passform.imageio import to_tensor

regions = {r.name: r for r in models.DEFAULT_REGIONS}


def tiny_decoder(resolution=64, **kwargs):
    torch.manual_seed(0)
    return models.StyleDecoder(16, d_w=16, resolution=resolution, max_channels=16,
                               min_channels=8, **kwargs)


def test_seven_default_regions():
    assert len(models.DEFAULT_REGIONS) == 7
    assert models.REGION_NAMES == ('full', 'face', 'nose', 'eyes', 'mouth',
                                   'ear_left', 'ear_right')


def test_region_box_validation():
    with pytest.raises(ArgumentError):
        models.RegionSpec('bad', (0.5, 0.0, 0.4, 1.0))
    with pytest.raises(ArgumentError):
        models.regions_from_config({'chin': [0, 0, 1, 1]})
    boxes = models.regions_from_config({'nose': [0.3, 0.3, 0.7, 0.7]})
    assert dict((r.name, r.box) for r in boxes)['nose'] == (0.3, 0.3, 0.7, 0.7)


def test_five_region_preset():
    five = models.regions_from_config(preset='five')
    assert [r.name for r in five] == ['full', 'face', 'nose', 'eyes', 'mouth']
    x0, y0, x1, y1 = dict((r.name, r.box) for r in five)['eyes']
    wide = regions['eyes'].box
    assert wide[0] < x0 < x1 < wide[2] and wide[1] < y0 < y1 < wide[3]
    assert models.REGION_PRESETS['seven'] == models.DEFAULT_REGIONS
    with pytest.raises(ArgumentError):
        models.regions_from_config({'ear_left': [0, 0, 1, 1]}, preset='five')
    with pytest.raises(ArgumentError):
        models.regions_from_config(preset='nine')


def test_crop_full_region_is_identity():
    image = np.random.default_rng(0).uniform(size=(64, 64, 3))
    assert np.array_equal(models.crop_region(image, regions['full']), image)


def test_ear_crops_mirror():
    for resolution in (64, 128):
        image = synthface.render(synthface.sample_identity(2), synthface.NORMAL, resolution)
        left = models.crop_region(image, regions['ear_left'])
        right = models.crop_region(image, regions['ear_right'])
        assert np.array_equal(left, right[:, ::-1])


def test_eyes_box_contains_sunglasses():
    eyes = regions['eyes'].box
    for seed in range(10):
        identity = synthface.sample_identity(seed)
        for yaw in (-90.0, -30.0, 0.0, 30.0, 90.0):
            x0, y0, x1, y1 = synthface.sunglasses_band(
                identity, synthface.VariationSpec(yaw_deg=yaw, sunglasses=True))
            assert eyes[0] < x0 and x1 < eyes[2]
            assert eyes[1] < y0 and y1 < eyes[3]


def test_crop_batch_matches_crop_region():
    image = np.random.default_rng(1).uniform(size=(64, 64, 3)).astype(np.float32)
    for region in models.DEFAULT_REGIONS:
        batch = models.crop_batch(to_tensor(image), region)[0].permute(1, 2, 0).numpy()
        assert np.array_equal(batch, models.crop_region(image, region))


def test_channel_schedule():
    assert models.channel_schedule(64, 16, 8) == [16, 16, 16, 8, 8]
    assert len(models.channel_schedule(128)) == 6


def test_style_decoder_output():
    generator = models.StyleDecoder(8, d_w=16, resolution=128, max_channels=16, min_channels=8)
    emb = torch.randn(2, 8)
    with torch.no_grad():
        images = generator(emb)
    assert images.shape == (2, 3, 128, 128)
    assert float(images.min()) >= 0.0 and float(images.max()) <= 1.0
    assert generator.mapping(emb).shape == (2, generator.num_ws, 16)


def test_generate_deterministic():
    generator = tiny_decoder()
    emb = np.random.default_rng(2).normal(size=16)
    first = models.generate(generator, emb)
    assert first.shape == (64, 64, 3)
    assert np.array_equal(first, models.generate(generator, emb))
    with pytest.raises(ArgumentError):
        models.generate(generator, emb[:8])


def test_broadcast_styles():
    generator = tiny_decoder(per_layer_styles=False)
    w = generator.mapping(torch.randn(3, 16))
    assert w.shape == (3, 16)
    assert generator.synthesis(w).shape == (3, 3, 64, 64)


def test_plain_decoder():
    generator = models.PlainDecoder(16, resolution=64, max_channels=16, min_channels=8)
    emb = torch.randn(2, 16)
    assert torch.equal(generator.mapping(emb), emb)
    images = generator(emb)
    assert images.shape == (2, 3, 64, 64)


def test_encoder_embeddings():
    torch.manual_seed(0)
    encoder = models.IdentityEncoder(64, d_e=16, widths=(8, 16, 16)).freeze()
    image = synthface.render(synthface.sample_identity(0), synthface.NORMAL, 64)
    emb = models.encode(encoder, image)
    assert emb.shape == (16,)
    assert np.array_equal(emb, models.encode(encoder, image))
    assert abs(np.linalg.norm(emb) - 1.0) < 1e-5
    zeros = models.encode(encoder, np.zeros((64, 64, 3), dtype=np.float32))
    assert np.all(np.isfinite(zeros))
    with pytest.raises(ArgumentError):
        models.encode(encoder, np.zeros((32, 32, 3)))


def test_discriminate_seven_scores():
    torch.manual_seed(0)
    disc = models.RegionDiscriminator(channels=8)
    image = np.random.default_rng(3).uniform(size=(64, 64, 3)).astype(np.float32)
    scores = models.discriminate(disc, image)
    assert scores.shape == (7,)
    order = [6, 0, 3, 1, 5, 2, 4]
    permuted = models.discriminate(disc, image, [models.DEFAULT_REGIONS[i] for i in order])
    assert np.allclose(permuted, scores[order], atol=1e-6)
    with pytest.raises(ArgumentError):
        models.discriminate(disc, image, models.DEFAULT_REGIONS[:6])


def test_discriminate_five_scores():
    torch.manual_seed(0)
    disc = models.RegionDiscriminator(models.FIVE_REGIONS, channels=8)
    image = np.random.default_rng(4).uniform(size=(64, 64, 3)).astype(np.float32)
    assert models.discriminate(disc, image).shape == (5,)
    with pytest.raises(ArgumentError):
        models.discriminate(disc, image, models.DEFAULT_REGIONS)


def test_attribute_classifier_predict():
    torch.manual_seed(0)
    classifier = models.AttributeClassifier(3, 64, widths=(8, 8, 8), attribute='skin_group')
    labels = classifier.predict(torch.rand(4, 3, 64, 64))
    assert labels.shape == (4,)
    assert set(labels.tolist()) <= {0, 1, 2}


def test_save_load_round_trip(tmp_path):
    generator = tiny_decoder()
    torch.manual_seed(1)
    disc = models.RegionDiscriminator(channels=8)
    path = str(tmp_path / 'bundle.pt')
    models.save_modules(path, {'generator': generator, 'discriminator': disc}, meta={'step': 3})
    modules, sidecar, _ = models.load_modules(path)
    assert sidecar['step'] == 3
    for name, module in (('generator', generator), ('discriminator', disc)):
        loaded = modules[name].state_dict()
        for key, value in module.state_dict().items():
            assert torch.equal(loaded[key], value)
    emb = torch.randn(1, 16)
    with torch.no_grad():
        assert torch.equal(modules['generator'](emb), generator(emb))


def test_encoder_save_load(tmp_path, tiny_encoder):
    path = models.save_encoder(tiny_encoder, str(tmp_path / 'encoder.pt'))
    loaded = models.load_encoder(path)
    assert loaded.trained
    assert not any(p.requires_grad for p in loaded.parameters())
    models.save_modules(str(tmp_path / 'gen.pt'), {'generator': tiny_decoder()})
    with pytest.raises(ConfigurationError):
        models.load_encoder(str(tmp_path / 'gen.pt'))


def test_pretrain_encoder_untrained(corpus):
    encoder = models.pretrain_encoder(corpus, d_e=16, epochs=0, seed=0, device='cpu')
    assert not encoder.trained


def test_pretrain_encoder_deterministic(corpus):
    a = models.pretrain_encoder(corpus, d_e=16, epochs=1, seed=3, batch_size=8, device='cpu')
    b = models.pretrain_encoder(corpus, d_e=16, epochs=1, seed=3, batch_size=8, device='cpu')
    assert a.trained
    assert 0.0 <= a.arch['heldout_accuracy'] <= 1.0 or np.isnan(a.arch['heldout_accuracy'])
    for key, value in a.state_dict().items():
        assert torch.equal(b.state_dict()[key], value)


def test_pretrain_encoder_needs_two_identities(corpus):
    single = corpus.filter(lambda r: r.identity_id in (0, 3))
    with pytest.raises(ConfigurationError):
        models.pretrain_encoder(single, d_e=16, epochs=1, seed=0, device='cpu')

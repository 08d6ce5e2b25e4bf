#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
test_evalsuite
--------------

Tests for identification, verification and fairness metrics and the
reports built from them.
"""

import json

import numpy as np
import pytest

from passform import evalsuite, trainer
from passform.evalsuite import EvalReport
from passform.exceptions import ArgumentError, ValidationError
from passform.imageio import load_png
from passform.synthface import Manifest


@pytest.fixture
def held_out(corpus):
    split = corpus.split('test')
    return split.normal(), split.non_normal()


@pytest.fixture
def normalizer(tiny_cfg, tiny_encoder):
    ckpt = trainer.new_checkpoint(tiny_encoder, tiny_cfg)
    normalizer = trainer.Normalizer.from_checkpoint(ckpt)
    yield normalizer
    normalizer.close()


def report(rank1_90=0.5, rank5=1.0, tar=0.5):
    return EvalReport({0: 1.0, 90: rank1_90}, rank5, {0.01: tar, 0.001: None},
                      {0: 0.5, 1: 0.75, 2: 1.0}, 0.5, rank1=0.7)


def test_tar_at_far_perfect_separation():
    impostor = np.linspace(0.0, 0.5, 1000)
    assert evalsuite.tar_at_far(np.ones(5), impostor, 0.01) == 1.0


def test_tar_at_far_threshold_is_strict():
    impostor = np.arange(1000) / 1000.0
    genuine = [0.9895, 0.989, 0.5]
    assert evalsuite.tar_at_far(genuine, impostor, 0.01) == pytest.approx(1.0 / 3.0)


def test_tar_at_far_needs_impostors():
    with pytest.raises(ValidationError):
        evalsuite.tar_at_far(np.ones(5), np.zeros(999), 0.01)
    with pytest.raises(ValidationError):
        evalsuite.tar_at_far([], np.zeros(1000), 0.01)
    with pytest.raises(ArgumentError):
        evalsuite.tar_at_far(np.ones(5), np.zeros(1000), 1.5)


def test_tar_at_far_monotone_and_chance():
    rng = np.random.default_rng(0)
    impostor = rng.normal(size=20000)
    genuine = rng.normal(loc=1.0, size=2000)
    assert evalsuite.tar_at_far(genuine, impostor, 0.01) >= \
        evalsuite.tar_at_far(genuine, impostor, 0.001)
    chance = evalsuite.tar_at_far(rng.normal(size=20000), impostor, 0.01)
    assert abs(chance - 0.01) < 0.005


def test_match_ranks_ties_favor_lower_ids():
    emb = np.ones((3, 2)) / np.sqrt(2.0)
    ranks = evalsuite.match_ranks([5, 2, 9], emb, [9, 2, 5], emb)
    assert ranks.tolist() == [2, 0, 1]


def test_match_ranks_nested_galleries():
    rng = np.random.default_rng(1)
    gallery = rng.normal(size=(10, 8))
    probes = gallery[:5] + rng.normal(scale=1.0, size=(5, 8))
    ids = list(range(5))
    small = evalsuite.match_ranks(list(range(5)), gallery[:5], ids, probes)
    full = evalsuite.match_ranks(list(range(10)), gallery, ids, probes)
    assert np.all(small <= full)


def test_self_match(held_out, tiny_encoder):
    gallery, _ = held_out
    assert evalsuite.rank1_identification(gallery, gallery, tiny_encoder) == {0: 1.0}
    by_group, gap = evalsuite.fairness_report(gallery, gallery, tiny_encoder)
    assert by_group == {0: 1.0, 1: 1.0, 2: 1.0}
    assert gap == 0.0


def test_check_gallery(corpus, held_out):
    gallery, probes = held_out
    evalsuite.check_gallery(gallery, probes)
    with pytest.raises(ValidationError):
        evalsuite.check_gallery(probes, probes)
    with pytest.raises(ValidationError):
        evalsuite.check_gallery(Manifest([gallery[0], gallery[0]]), probes)
    with pytest.raises(ValidationError):
        evalsuite.check_gallery(gallery, corpus.split('train').non_normal())


def test_fairness_needs_every_group(held_out, tiny_encoder):
    gallery, probes = held_out
    one_group = probes.filter(lambda r: r.attributes['skin_group'] == 0)
    with pytest.raises(ValidationError):
        evalsuite.fairness_report(one_group, gallery, tiny_encoder)


def test_make_verification_pairs(held_out):
    gallery, probes = held_out
    genuine, impostor = evalsuite.make_verification_pairs(probes, gallery, 1000)
    assert genuine.shape == (9, 2)
    assert impostor.shape == (18, 2)
    for p, g in genuine:
        assert probes[p].identity_id == gallery[g].identity_id
    for p, g in impostor:
        assert probes[p].identity_id != gallery[g].identity_id
    _, few = evalsuite.make_verification_pairs(probes, gallery, 5, seed=3)
    _, again = evalsuite.make_verification_pairs(probes, gallery, 5, seed=3)
    assert few.shape == (5, 2)
    assert np.array_equal(few, again)


def test_verification_tar_far(corpus, tiny_encoder):
    pairs = [(corpus.path_of(g), corpus.image(p), g.identity_id == p.identity_id)
             for g in corpus.normal() for p in corpus.non_normal()]
    tars = evalsuite.verification_tar_far(pairs, tiny_encoder, fars=(0.5,))
    assert list(tars) == [0.5]
    assert 0.0 <= tars[0.5] <= 1.0
    with pytest.raises(ValidationError):
        evalsuite.verification_tar_far(pairs, tiny_encoder, fars=(0.1,))


def test_evaluate_raw_arm(held_out, tiny_encoder):
    gallery, probes = held_out
    result = evalsuite.evaluate_arm(gallery, probes, tiny_encoder, config_hash='abc')
    assert result.arm == 'raw'
    assert result.n_probes == 9
    assert result.config_hash == 'abc'
    assert set(result.rank1_by_pose_bin) <= set(evalsuite.POSE_BINS)
    assert all(0.0 <= v <= 1.0 for v in result.rank1_by_pose_bin.values())
    assert result.rank5 == 1.0
    assert result.tar_at_far == {0.01: None, 0.001: None}
    assert set(result.rank1_by_skin_group) == {0, 1, 2}
    assert result.fairness_gap == pytest.approx(max(result.rank1_by_skin_group.values())
                                                - min(result.rank1_by_skin_group.values()))
    assert result.seconds_per_image is None
    ranks, _, _ = evalsuite.probe_ranks(gallery, probes, tiny_encoder)
    assert result.rank1 == pytest.approx(float((ranks == 0).mean()))
    assert result.rank1 <= result.rank5
    assert evalsuite.report_metrics(result)['rank1'] == result.rank1


def test_evaluate_normalized_arm(held_out, normalizer):
    gallery, probes = held_out
    result = evalsuite.evaluate_arm(gallery, probes, normalizer.encoder, normalizer,
                                    fars=(0.6,), n_impostor=18, bench_images=2)
    assert result.arm == 'normalized'
    assert 0.0 <= result.tar_at_far[0.6] <= 1.0
    assert result.seconds_per_image > 0.0


def test_evaluate_needs_probes(held_out, tiny_encoder):
    gallery, probes = held_out
    with pytest.raises(ValidationError):
        evalsuite.evaluate_arm(gallery, probes.filter(lambda r: False), tiny_encoder)


def test_bench_report(normalizer):
    bench = evalsuite.bench_report(normalizer, n_images=1, warmup=1)
    assert bench['seconds_per_image'] > 0.0
    assert bench['encode_calls_per_image'] == 1.0
    assert bench['generate_calls_per_image'] == 1.0
    assert bench['reference_seconds'] == evalsuite.REFERENCE_SECONDS
    with pytest.raises(ArgumentError):
        evalsuite.bench_inference(normalizer, n_images=0)


def test_report_round_trip(tmp_path):
    original = report()
    path = original.save(str(tmp_path / 'report.json'))
    with open(path) as fh:
        assert EvalReport.from_dict(json.load(fh)) == original
    assert original.rank1 == 0.7
    legacy = original.to_dict()
    del legacy['rank1']
    assert EvalReport.from_dict(legacy).rank1 is None


def test_render_table():
    table = evalsuite.render_table({'raw': report(0.25), 'normalized': report(0.75)})
    lines = table.splitlines()
    assert len(lines) == 4
    assert lines[1].startswith('raw')
    assert lines[2].startswith('normalized')
    assert '75.0' in lines[2]
    assert lines[-1] == evalsuite.REFERENCE_LINE


def test_aggregate_reports():
    stats = evalsuite.aggregate_reports([report(rank5=0.5), report(rank5=1.0)])
    assert stats['rank5'] == pytest.approx((0.75, 0.25))
    assert stats['rank1@90'] == pytest.approx((0.5, 0.0))
    assert 'tar@0.001' not in stats
    with pytest.raises(ArgumentError):
        evalsuite.aggregate_reports([])


def test_ablation_ladder():
    monotone, values = evalsuite.ablation_ladder([('plain', report(0.2)),
                                                  ('style', [report(0.3), report(0.5)]),
                                                  ('full', report(0.6))])
    assert monotone
    assert values == [('plain', 0.2), ('style', pytest.approx(0.4)), ('full', 0.6)]
    monotone, _ = evalsuite.ablation_ladder([('a', report(0.6)), ('b', report(0.4))])
    assert not monotone
    no_profile = EvalReport({0: 1.0}, 1.0, {}, {0: 1.0}, 0.0)
    with pytest.raises(ValidationError):
        evalsuite.ablation_ladder([('a', no_profile)])


def test_comparison_grid(tmp_path, held_out, normalizer):
    gallery, probes = held_out
    path = evalsuite.save_comparison_grid(probes, normalizer, str(tmp_path / 'grid.png'),
                                          n=2, gallery=gallery)
    assert load_png(path).shape == (3 * 66 + 2, 2 * 66 + 2, 3)


def test_match_ranks_chance_level():
    rng = np.random.default_rng(2)
    gallery = rng.normal(size=(10, 16))
    gallery /= np.linalg.norm(gallery, axis=1, keepdims=True)
    probes = rng.normal(size=(5000, 16))
    ids = rng.integers(0, 10, size=5000)
    ranks = evalsuite.match_ranks(list(range(10)), gallery, ids, probes)
    assert abs(float((ranks == 0).mean()) - 0.1) < 0.02


def test_ablation_arms(tiny_cfg):
    keys = [arm.key for arm in evalsuite.ABLATION_ARMS]
    assert keys == ['raw', 'plain_corpus', 'plain', 'style_five', 'style']
    assert not evalsuite.ablation_arm('raw').trains
    with pytest.raises(ArgumentError):
        evalsuite.ablation_arm('raw').train_config(tiny_cfg)
    with pytest.raises(ArgumentError):
        evalsuite.ablation_arm('unet')

    sources = [arm.normal_source for arm in evalsuite.ABLATION_ARMS]
    assert sources == [None, 'corpus', 'generated', 'generated', 'generated']
    configs = {arm.key: arm.train_config(tiny_cfg) for arm in evalsuite.ABLATION_ARMS[1:]}
    assert [len(c.region_set()) for c in configs.values()] == [5, 5, 5, 7]
    assert configs['plain_corpus'].generator_kind == configs['plain'].generator_kind == 'plain'
    assert configs['style_five'].generator_kind == configs['style'].generator_kind == 'style'
    assert configs['style'].resolution == tiny_cfg.resolution
    assert tiny_cfg.region_preset == 'seven'

# -*- coding: utf-8 -*-
"""
passform.evalsuite - recognition metrics with and without normalization
~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~

The recognizer is the frozen identity encoder plus nearest-neighbour search
by cosine similarity. Each metric runs in two arms: raw probes, or probes
passed through a normalizer first. The gallery holds one normal image per
identity and is never normalized.
"""
import dataclasses
import json
import logging
import math
import statistics
import time

import numpy as np
import torch

from .exceptions import ArgumentError, ValidationError
from .imageio import ImageDataset, image_grid, load_png, to_images, to_tensor
from .synthface import POSE_BINS, pose_bin

logger = logging.getLogger(__name__)

FARS = (0.01, 0.001)
SKIN_GROUPS = (0, 1, 2)
REFERENCE_SECONDS = 0.026
REFERENCE_LINE = 'reference: about {:.3f} s per image on a T4 GPU at 128x128'.format(
    REFERENCE_SECONDS)


@dataclasses.dataclass
class EvalReport:
    """Metrics of one evaluation arm.

    Rates are fractions in [0, 1]. Pose bins without probes are absent; a
    FAR level with too few impostor pairs maps to None. `rank1` is the
    fraction of all probes matched at rank one.
    """

    rank1_by_pose_bin: dict
    rank5: float
    tar_at_far: dict
    rank1_by_skin_group: dict
    fairness_gap: float
    seconds_per_image: float = None
    config_hash: str = ''
    arm: str = 'raw'
    n_probes: int = 0
    rank1: float = None

    def to_dict(self):
        out = dataclasses.asdict(self)
        for key in ('rank1_by_pose_bin', 'tar_at_far', 'rank1_by_skin_group'):
            out[key] = {str(k): v for k, v in out[key].items()}
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['rank1_by_pose_bin'] = {int(k): v for k, v in data['rank1_by_pose_bin'].items()}
        data['tar_at_far'] = {float(k): v for k, v in data['tar_at_far'].items()}
        data['rank1_by_skin_group'] = {int(k): v for k, v in data['rank1_by_skin_group'].items()}
        return cls(**data)

    def save(self, path):
        with open(path, 'w') as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return path


def _embed_images(images, encoder, normalizer=None):
    device = next(encoder.parameters()).device
    out = []
    with torch.no_grad():
        for batch in images:
            batch = batch.to(device)
            if normalizer is not None:
                batch = normalizer(batch)
            out.append(encoder(batch).cpu())
    if not out:
        return np.zeros((0, encoder.arch['d_e']))
    return torch.cat(out).double().numpy()


def embed_manifest(manifest, encoder, normalizer=None, batch_size=64):
    """Unit embeddings of every record, optionally normalized first."""

    loader = torch.utils.data.DataLoader(ImageDataset(manifest), batch_size=batch_size)
    return _embed_images(loader, encoder, normalizer)


def _batches(images, batch_size):
    for start in range(0, len(images), batch_size):
        yield to_tensor(np.stack(images[start:start + batch_size]))


def _as_image(item):
    return load_png(item) if isinstance(item, str) else np.asarray(item, dtype=np.float32)


def check_gallery(gallery, probes):
    bad = [r.image_path for r in gallery if not r.is_normal]
    if bad:
        raise ValidationError('gallery holds {} non-normal records, first: {}'
                              .format(len(bad), bad[0]))
    ids = [r.identity_id for r in gallery]
    if len(set(ids)) != len(ids):
        raise ValidationError('gallery holds more than one image of some identity')
    missing = sorted({r.identity_id for r in probes} - set(ids))
    if missing:
        raise ValidationError('probe identities missing from the gallery: {}'.format(missing[:10]))


def match_ranks(gallery_ids, gallery_emb, probe_ids, probe_emb):
    """0-based rank of the true identity for each probe.

    Gallery entries scoring the same as the true one count ahead of it when
    their identity id is lower.
    """

    gallery_ids = np.asarray(gallery_ids)
    sims = np.asarray(probe_emb) @ np.asarray(gallery_emb).T
    position = {int(g): i for i, g in enumerate(gallery_ids)}
    ranks = np.empty(len(probe_ids), dtype=int)
    for p, identity in enumerate(probe_ids):
        row = sims[p]
        true = row[position[int(identity)]]
        ahead = (row > true) | ((row == true) & (gallery_ids < identity))
        ranks[p] = int(ahead.sum())
    return ranks


def probe_ranks(gallery, probes, encoder, normalizer=None, batch_size=64):
    check_gallery(gallery, probes)
    gallery_emb = embed_manifest(gallery, encoder, batch_size=batch_size)
    probe_emb = embed_manifest(probes, encoder, normalizer, batch_size)
    return match_ranks([r.identity_id for r in gallery], gallery_emb,
                       [r.identity_id for r in probes], probe_emb), gallery_emb, probe_emb


def rates_by(ranks, keys):
    """Rank-1 rate per key, sorted by key."""

    out = {}
    for key in sorted(set(keys)):
        mask = np.array([k == key for k in keys])
        out[key] = float((ranks[mask] == 0).mean())
    return out


def rank1_identification(gallery, probes, encoder, normalizer=None, batch_size=64):
    """Rank-1 rate per |yaw| bin.

    Args:
        gallery (Manifest): One normal image per identity.
        probes (Manifest): Images whose identities all appear in the gallery.
        encoder (IdentityEncoder): Frozen recognizer.
        normalizer (callable): Optional ``N x 3 x H x W`` batch transform
            applied to probes before embedding.

    Returns:
        dict: Pose bin -> rate, for bins holding at least one probe.

    """

    ranks, _, _ = probe_ranks(gallery, probes, encoder, normalizer, batch_size)
    return rates_by(ranks, [pose_bin(r.variation.yaw_deg) for r in probes])


def _skin_groups(probes):
    groups = []
    for record in probes:
        if 'skin_group' not in record.attributes:
            raise ValidationError('{} has no skin_group label'.format(record.image_path))
        groups.append(int(record.attributes['skin_group']))
    missing = sorted(set(SKIN_GROUPS) - set(groups))
    if missing:
        raise ValidationError('skin groups missing from the probes: {}'.format(missing))
    return groups


def fairness_from_ranks(ranks, groups):
    by_group = rates_by(ranks, groups)
    return by_group, max(by_group.values()) - min(by_group.values())


def fairness_report(probes, gallery, encoder, normalizer=None, batch_size=64):
    """Rank-1 rate per skin group and the max-min gap across groups."""

    groups = _skin_groups(probes)
    ranks, _, _ = probe_ranks(gallery, probes, encoder, normalizer, batch_size)
    return fairness_from_ranks(ranks, groups)


def tar_at_far(genuine, impostor, far):
    """True-accept rate at the similarity threshold giving false-accept rate `far`.

    The threshold is the ``floor(far * n) + 1``-th highest impostor score and
    a pair is accepted when its score is strictly above it.

    Raises:
        ValidationError: No genuine scores, or fewer than ``ceil(10 / far)``
            impostor scores.

    """

    if not 0.0 < far < 1.0:
        raise ArgumentError('far must be in (0, 1), got {}'.format(far))
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))[::-1]
    need = int(math.ceil(10.0 / far - 1e-9))
    if len(genuine) == 0:
        raise ValidationError('no genuine pairs')
    if len(impostor) < need:
        raise ValidationError('FAR={} needs at least {} impostor pairs, got {}'
                              .format(far, need, len(impostor)))
    threshold = impostor[int(math.floor(far * len(impostor) + 1e-9))]
    return float((genuine > threshold).mean())


def verification_tar_far(pairs, encoder, normalizer=None, fars=FARS, batch_size=64):
    """TAR at each FAR for ``(image_a, image_b, same_identity)`` pairs.

    Images are HWC arrays or PNG paths; with a normalizer both sides are
    normalized before embedding.
    """

    pairs = list(pairs)
    a = [_as_image(p[0]) for p in pairs]
    b = [_as_image(p[1]) for p in pairs]
    same = np.array([bool(p[2]) for p in pairs])
    emb_a = _embed_images(_batches(a, batch_size), encoder, normalizer)
    emb_b = _embed_images(_batches(b, batch_size), encoder, normalizer)
    scores = (emb_a * emb_b).sum(axis=1)
    return {far: tar_at_far(scores[same], scores[~same], far) for far in fars}


def make_verification_pairs(probes, gallery, n_impostor, seed=0):
    """Index pairs ``(probe, gallery)`` for verification.

    Every probe forms one genuine pair with its identity's gallery image.
    Impostor pairs are drawn without replacement from all probe/gallery
    combinations of different identities; all of them when fewer exist.

    Returns:
        tuple: ``(genuine, impostor)`` integer arrays of shape ``n x 2``.

    """

    gallery_ids = np.array([r.identity_id for r in gallery])
    probe_ids = np.array([r.identity_id for r in probes])
    position = {int(g): i for i, g in enumerate(gallery_ids)}
    genuine = np.array([[p, position[int(i)]] for p, i in enumerate(probe_ids)],
                       dtype=int).reshape(-1, 2)
    flat = np.flatnonzero((probe_ids[:, None] != gallery_ids[None, :]).ravel())
    if n_impostor < len(flat):
        rng = np.random.default_rng(seed)
        flat = np.sort(rng.choice(flat, size=n_impostor, replace=False))
    impostor = np.stack(np.divmod(flat, len(gallery_ids)), axis=1).astype(int).reshape(-1, 2)
    return genuine, impostor


def _pair_scores(probe_emb, gallery_emb, pairs):
    return (probe_emb[pairs[:, 0]] * gallery_emb[pairs[:, 1]]).sum(axis=1)


def bench_inference(normalizer, n_images=100, warmup=5, seed=0):
    """Median wall-clock seconds of single-image normalization passes."""

    if n_images < 1:
        raise ArgumentError('n_images must be >= 1')
    res = normalizer.resolution
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(n_images + warmup, res, res, 3)).astype(np.float32)
    sync = torch.cuda.synchronize if normalizer.device.type == 'cuda' else (lambda: None)
    for image in images[:warmup]:
        normalizer(to_tensor(image))
    sync()
    times = []
    for image in images[warmup:]:
        start = time.perf_counter()
        normalizer(to_tensor(image))
        sync()
        times.append(time.perf_counter() - start)
    return float(statistics.median(times))


def bench_report(normalizer, n_images=100, warmup=5, seed=0):
    """Timing plus the call counts of the timed passes."""

    normalizer.reset_counts()
    seconds = bench_inference(normalizer, n_images, warmup, seed)
    total = n_images + warmup
    return {'seconds_per_image': seconds, 'n_images': n_images,
            'encode_calls_per_image': normalizer.encode_calls / total,
            'generate_calls_per_image': normalizer.generate_calls / total,
            'reference_seconds': REFERENCE_SECONDS}


def evaluate_arm(gallery, probes, encoder, normalizer=None, fars=FARS, n_impostor=None,
                 seed=0, bench_images=0, config_hash='', batch_size=64):
    """All metrics of one arm from a single embedding pass over the probes.

    FAR levels whose impostor requirement exceeds the available pairs are
    reported as None.
    """

    if len(probes) == 0:
        raise ValidationError('no probes')
    arm = 'raw' if normalizer is None else 'normalized'
    ranks, gallery_emb, probe_emb = probe_ranks(gallery, probes, encoder, normalizer, batch_size)
    groups = _skin_groups(probes)
    by_group, gap = fairness_from_ranks(ranks, groups)

    need = int(math.ceil(10.0 / min(fars) - 1e-9))
    genuine, impostor = make_verification_pairs(probes, gallery, n_impostor or need, seed)
    g_scores = _pair_scores(probe_emb, gallery_emb, genuine)
    i_scores = _pair_scores(probe_emb, gallery_emb, impostor)
    tars = {}
    for far in fars:
        try:
            tars[far] = tar_at_far(g_scores, i_scores, far)
        except ValidationError as err:
            logger.warning('%s arm: %s', arm, err)
            tars[far] = None

    seconds = None
    if bench_images and normalizer is not None:
        seconds = bench_inference(normalizer, bench_images)
    rank1 = float((ranks == 0).mean())
    report = EvalReport(rates_by(ranks, [pose_bin(r.variation.yaw_deg) for r in probes]),
                        float((ranks < 5).mean()), tars, by_group, gap, seconds, config_hash,
                        arm, len(probes), rank1)
    logger.info('%s arm: rank-1 %.3f over %d probes, fairness gap %.3f',
                arm, rank1, len(probes), gap)
    return report


def _pct(value):
    return '   -  ' if value is None else '{:6.1f}'.format(100.0 * value)


def render_table(reports):
    """Text table: rank-1 per pose bin, rank-5, TAR per FAR and fairness gap, in percent.

    Args:
        reports (dict): Arm name -> EvalReport.

    """

    fars = sorted({far for r in reports.values() for far in r.tar_at_far}, reverse=True)
    header = (['{:<14}'.format('arm')] + ['{:>6}'.format('{}'.format(b)) for b in POSE_BINS]
              + ['{:>6}'.format('rank5')] + ['{:>8}'.format('TAR@{:g}'.format(f)) for f in fars]
              + ['{:>6}'.format('gap'), '{:>8}'.format('s/img')])
    lines = [' '.join(header)]
    for name, report in reports.items():
        row = (['{:<14}'.format(name)]
               + [_pct(report.rank1_by_pose_bin.get(b)) for b in POSE_BINS]
               + [_pct(report.rank5)]
               + ['  ' + _pct(report.tar_at_far.get(f)) for f in fars]
               + [_pct(report.fairness_gap)]
               + ['{:>8}'.format('-' if report.seconds_per_image is None
                                 else '{:.4f}'.format(report.seconds_per_image))])
        lines.append(' '.join(row))
    lines.append(REFERENCE_LINE)
    return '\n'.join(lines)


def report_metrics(report):
    """Flat name -> value view of a report's rates."""

    out = {'rank1@{}'.format(b): v for b, v in report.rank1_by_pose_bin.items()}
    out.update({'tar@{:g}'.format(f): v for f, v in report.tar_at_far.items() if v is not None})
    out.update({'rank1_skin{}'.format(g): v for g, v in report.rank1_by_skin_group.items()})
    out['rank5'] = report.rank5
    if report.rank1 is not None:
        out['rank1'] = report.rank1
    out['fairness_gap'] = report.fairness_gap
    return out


def aggregate_reports(reports):
    """Mean and population std of every metric present in all reports, over seeds."""

    if not reports:
        raise ArgumentError('nothing to aggregate')
    flat = [report_metrics(r) for r in reports]
    names = sorted(set.intersection(*(set(f) for f in flat)))
    return {name: (float(np.mean([f[name] for f in flat])), float(np.std([f[name] for f in flat])))
            for name in names}


def ablation_ladder(arms, pose=90):
    """Checks that rank-1 at `pose` strictly increases along the arms.

    Args:
        arms (list): ``(name, EvalReport or list of EvalReports)`` pairs,
            weakest first; lists are averaged.

    Returns:
        tuple: ``(monotone, [(name, rate), ...])``.

    """

    values = []
    for name, reports in arms:
        if isinstance(reports, EvalReport):
            reports = [reports]
        rates = [r.rank1_by_pose_bin.get(pose) for r in reports]
        if any(rate is None for rate in rates):
            raise ValidationError('arm {!r} has no probes in the {} degree bin'.format(name, pose))
        values.append((name, float(np.mean(rates))))
    monotone = all(a[1] < b[1] for a, b in zip(values[:-1], values[1:]))
    return monotone, values


@dataclasses.dataclass
class AblationArm:
    """One rung of the ablation ladder.

    Attributes:
        key (str): Short identifier, safe in file names.
        name (str): Label for tables.
        normal_source (str): ``'corpus'`` for the corpus' own normal renders,
            ``'generated'`` for the latent-space normal set, None when
            nothing is trained.
        overrides (dict): TrainConfig fields this arm sets.

    """

    key: str
    name: str
    normal_source: str = None
    overrides: dict = dataclasses.field(default_factory=dict)

    @property
    def trains(self):
        return self.normal_source is not None

    def train_config(self, cfg):
        """`cfg` with this arm's overrides applied."""

        if not self.trains:
            raise ArgumentError('arm {!r} trains nothing'.format(self.key))
        return dataclasses.replace(cfg, **self.overrides)


# Weakest first.
ABLATION_ARMS = (
    AblationArm('raw', 'recognizer only'),
    AblationArm('plain_corpus', 'plain decoder, corpus normals', 'corpus',
                {'generator_kind': 'plain', 'region_preset': 'five'}),
    AblationArm('plain', 'plain decoder', 'generated',
                {'generator_kind': 'plain', 'region_preset': 'five'}),
    AblationArm('style_five', 'style decoder, five regions', 'generated',
                {'generator_kind': 'style', 'region_preset': 'five'}),
    AblationArm('style', 'style decoder', 'generated',
                {'generator_kind': 'style', 'region_preset': 'seven'}),
)


def ablation_arm(key):
    for arm in ABLATION_ARMS:
        if arm.key == key:
            return arm
    raise ArgumentError('unknown ablation arm {!r}'.format(key))


def save_comparison_grid(probes, normalizer, path, n=8, gallery=None):
    """Writes before/after panels: probes, their normalized images and, if given, gallery truth."""

    if len(probes) == 0:
        raise ArgumentError('no probes to show')
    chosen = probes.records[:n]
    inputs = [probes.image(r) for r in chosen]
    outputs = list(to_images(normalizer(to_tensor(np.stack(inputs)))))
    rows = [inputs, outputs]
    if gallery is not None:
        truth = {r.identity_id: r for r in gallery}
        rows.append([gallery.image(truth[r.identity_id]) for r in chosen])
    image_grid(rows, path)
    return path

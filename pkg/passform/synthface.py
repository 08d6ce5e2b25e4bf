# -*- coding: utf-8 -*-
"""
passform.synthface - procedural face corpus
~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~

A deterministic renderer for flat, face-like images with independently
controlled identity (face shape, feature geometry, skin tone) and variation
(pose, illumination, background, expression, sunglasses, blur), plus the
corpus builder that writes a labeled PNG dataset and its JSON-lines manifest.

A face rendered with the NORMAL variation is mirror-symmetric to the bit and
sits on a white background; every other variation breaks one of those.
"""
import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from .exceptions import ArgumentError, ValidationError
from .imageio import load_png, save_png

logger = logging.getLogger(__name__)

RESOLUTIONS = (64, 128)
SKIN_BANDS = ((0.25, 0.48), (0.48, 0.71), (0.71, 0.95))
SHAPE_SPLIT = 0.85
POSE_BINS = (0, 15, 30, 45, 60, 75, 90)
VARIATION_KINDS = ('pose', 'illumination', 'background', 'expression',
                   'sunglasses', 'blur')
NEUTRAL_EXPRESSION = 0.15

# Vertical layout of the aligned frame, as fractions of the height.
FACE_CENTER_Y = 0.54
FACE_RADIUS_Y = 0.37
EYE_Y = 0.42
EAR_Y = 0.50
MOUTH_Y = 0.78
NOSE_TOP = 0.45
GLASSES_HALF_HEIGHT = 0.05
GLASSES_X_LIMITS = (0.17, 0.83)


def skin_group_of(skin_tone):
    """Dark (0), medium (1) or light (2) band of a skin tone."""

    for group, (low, high) in enumerate(SKIN_BANDS):
        if skin_tone < high:
            return group if skin_tone >= low else 0
    return len(SKIN_BANDS) - 1


def shape_group_of(face_aspect):
    """Round (0) or long (1) face."""

    return 0 if face_aspect >= SHAPE_SPLIT else 1


def pose_bin(yaw_deg):
    """Nearest reporting bin of |yaw|, one of 0, 15, ..., 90."""

    return int(15 * np.floor(abs(yaw_deg) / 15.0 + 0.5))


@dataclasses.dataclass(frozen=True)
class IdentitySpec:
    """Geometry and color of one synthetic person.

    Attributes:
        face_aspect (float): Width-to-height ratio of the face oval, in [0.7, 1.0].
        eye_spacing (float): Distance between eye centers, fraction of width.
        eye_size (float): Eye half-width, fraction of width.
        nose_length (float): Fraction of height.
        mouth_width (float): Fraction of width.
        ear_size (float): Ear half-width, fraction of width.
        skin_tone (float): Luminance of the skin fill, in [0.25, 0.95].

    """

    face_aspect: float
    eye_spacing: float
    eye_size: float
    nose_length: float
    mouth_width: float
    ear_size: float
    skin_tone: float

    @property
    def skin_group(self):
        return skin_group_of(self.skin_tone)

    @property
    def shape_group(self):
        return shape_group_of(self.face_aspect)


@dataclasses.dataclass(frozen=True)
class Background:
    """Background fill: ``white``, ``solid`` with an RGB color, or ``noise`` with a seed."""

    kind: str = 'white'
    color: tuple = None
    seed: int = None

    def __post_init__(self):
        if self.kind not in ('white', 'solid', 'noise'):
            raise ArgumentError('unknown background kind {!r}'.format(self.kind))
        if self.kind == 'solid' and (self.color is None or len(self.color) != 3):
            raise ArgumentError('solid background needs an RGB color')
        if self.kind == 'noise' and self.seed is None:
            raise ArgumentError('noise background needs a seed')

    def to_dict(self):
        out = {'kind': self.kind}
        if self.kind == 'solid':
            out['color'] = [float(c) for c in self.color]
        if self.kind == 'noise':
            out['seed'] = int(self.seed)
        return out

    @classmethod
    def from_dict(cls, data):
        color = data.get('color')
        return cls(data['kind'], tuple(color) if color is not None else None,
                   data.get('seed'))


@dataclasses.dataclass(frozen=True)
class VariationSpec:
    """Everything about a photo that is not the person."""

    yaw_deg: float = 0.0
    illum_angle_deg: float = 0.0
    illum_strength: float = 0.0
    background: Background = Background()
    expression: float = 0.0
    sunglasses: bool = False
    blur_sigma: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.yaw_deg <= 90.0:
            raise ArgumentError('yaw_deg out of [-90, 90]: {}'.format(self.yaw_deg))
        if not -90.0 <= self.illum_angle_deg <= 90.0:
            raise ArgumentError('illum_angle_deg out of [-90, 90]')
        if not 0.0 <= self.illum_strength <= 1.0:
            raise ArgumentError('illum_strength out of [0, 1]')
        if not -1.0 <= self.expression <= 1.0:
            raise ArgumentError('expression out of [-1, 1]')
        if self.blur_sigma < 0:
            raise ArgumentError('blur_sigma must be >= 0')

    @property
    def is_normal(self):
        return self == NORMAL

    def to_dict(self):
        out = dataclasses.asdict(self)
        out['background'] = self.background.to_dict()
        return out

    @classmethod
    def from_dict(cls, data):
        fields = dict(data)
        fields['background'] = Background.from_dict(fields['background'])
        return cls(**fields)


NORMAL = VariationSpec()


@dataclasses.dataclass(frozen=True)
class SampleRecord:
    """One manifest line.

    Attributes:
        image_path (str): Path of the PNG, relative to the manifest directory.
        identity_id (int): Person id.
        is_normal (bool): True exactly when `variation` is the NORMAL variation.
        variation (VariationSpec): How the image was rendered.
        split (str): ``train`` or ``test``.
        attributes (dict): Attribute labels (``skin_group``, ``shape_group``).

    """

    image_path: str
    identity_id: int
    is_normal: bool
    variation: VariationSpec
    split: str
    attributes: dict = dataclasses.field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.split not in ('train', 'test'):
            raise ValidationError('split must be train or test, not {!r}'.format(self.split))
        if self.is_normal != self.variation.is_normal:
            raise ValidationError('{}: is_normal={} disagrees with its variation'
                                  .format(self.image_path, self.is_normal))

    def to_dict(self):
        return {'image_path': self.image_path,
                'identity_id': self.identity_id,
                'is_normal': self.is_normal,
                'variation': self.variation.to_dict(),
                'split': self.split,
                'attributes': dict(self.attributes)}

    @classmethod
    def from_dict(cls, data):
        return cls(image_path=data['image_path'],
                   identity_id=int(data['identity_id']),
                   is_normal=bool(data['is_normal']),
                   variation=VariationSpec.from_dict(data['variation']),
                   split=data['split'],
                   attributes=dict(data.get('attributes', {})))


class Manifest:
    """An ordered list of SampleRecords rooted at a directory.

    Attributes:
        records (list): The SampleRecords.
        root (str): Directory that record image paths are relative to.

    """

    FILENAME = 'manifest.jsonl'

    def __init__(self, records, root='.'):
        self.records = list(records)
        self.root = root

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, index):
        return self.records[index]

    @classmethod
    def load(cls, path):
        """Reads a JSON-lines manifest; `path` may be the file or its directory."""

        if os.path.isdir(path):
            path = os.path.join(path, cls.FILENAME)
        with open(path) as fh:
            records = [SampleRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
        return cls(records, os.path.dirname(os.path.abspath(path)))

    def dumps(self):
        return ''.join(json.dumps(r.to_dict(), sort_keys=True) + '\n' for r in self.records)

    def save(self, path=None):
        """Writes the manifest atomically and returns its path."""

        path = path or os.path.join(self.root, self.FILENAME)
        tmp = path + '.tmp'
        with open(tmp, 'w') as fh:
            fh.write(self.dumps())
        os.replace(tmp, path)
        return path

    def filter(self, predicate):
        return Manifest([r for r in self.records if predicate(r)], self.root)

    def normal(self):
        return self.filter(lambda r: r.is_normal)

    def non_normal(self):
        return self.filter(lambda r: not r.is_normal)

    def split(self, name):
        return self.filter(lambda r: r.split == name)

    def identities(self):
        return sorted({r.identity_id for r in self.records})

    def path_of(self, record):
        return os.path.join(self.root, record.image_path)

    def image(self, record):
        """Decoded pixels of one record."""

        return load_png(self.path_of(record))


def _check_skin_group(skin_group):
    if skin_group is not None and skin_group not in (0, 1, 2):
        raise ArgumentError('skin_group must be 0, 1 or 2, not {!r}'.format(skin_group))


def sample_identity(rng_seed, skin_group=None):
    """Draws an IdentitySpec, deterministic in `rng_seed`.

    Args:
        rng_seed (int): Any integer.
        skin_group (int): Optional band (0 dark, 1 medium, 2 light) to draw the
            skin tone from.

    """

    _check_skin_group(skin_group)
    rng = np.random.default_rng(abs(int(rng_seed)) * 2 + (rng_seed < 0))
    geometry = rng.uniform(size=6)
    low, high = (SKIN_BANDS[0][0], SKIN_BANDS[-1][1]) if skin_group is None \
        else SKIN_BANDS[skin_group]
    tone = rng.uniform(low, high)
    if skin_group is not None and skin_group < len(SKIN_BANDS) - 1:
        tone = min(tone, np.nextafter(high, low))
    return IdentitySpec(face_aspect=0.7 + 0.3 * geometry[0],
                        eye_spacing=0.26 + 0.12 * geometry[1],
                        eye_size=0.035 + 0.025 * geometry[2],
                        nose_length=0.12 + 0.08 * geometry[3],
                        mouth_width=0.14 + 0.12 * geometry[4],
                        ear_size=0.04 + 0.03 * geometry[5],
                        skin_tone=float(tone))


def sample_variation(rng, exclude=()):
    """Draws a non-normal VariationSpec over the full parameter ranges.

    Args:
        rng (numpy.random.Generator): Source of randomness.
        exclude (iterable): Variation kinds to withhold, out of
            ``VARIATION_KINDS``.

    """

    exclude = set(exclude)
    unknown = exclude - set(VARIATION_KINDS)
    if unknown:
        raise ArgumentError('unknown variation kinds: {}'.format(sorted(unknown)))
    if exclude >= set(VARIATION_KINDS):
        raise ArgumentError('every variation kind excluded; nothing left to vary')

    while True:
        draws = rng.uniform(size=12)
        yaw = -90.0 + 180.0 * draws[0]
        angle = -90.0 + 180.0 * draws[1]
        strength = float(draws[2]) if draws[3] < 0.7 else 0.0
        if draws[4] < 0.3:
            background = Background()
        elif draws[4] < 0.65:
            background = Background('solid', tuple(float(c) for c in 0.1 + 0.7 * rng.uniform(size=3)))
        else:
            background = Background('noise', seed=int(rng.integers(0, 2 ** 31 - 1)))
        expression = 0.0 if draws[5] < 0.4 else -1.0 + 2.0 * draws[6]
        sunglasses = bool(draws[7] < 0.2)
        blur = 0.5 + 2.0 * draws[9] if draws[8] < 0.25 else 0.0

        if 'pose' in exclude:
            yaw = 0.0
        if 'illumination' in exclude:
            angle, strength = 0.0, 0.0
        if 'background' in exclude:
            background = Background()
        if 'expression' in exclude:
            expression = 0.0
        if 'sunglasses' in exclude:
            sunglasses = False
        if 'blur' in exclude:
            blur = 0.0
        variation = VariationSpec(float(yaw), float(angle), float(strength), background,
                                  float(expression), sunglasses, float(blur))
        if not variation.is_normal:
            return variation


class _Frame:
    """Pixel-center coordinates of a square frame.

    `u` is horizontal and centered on the vertical midline, so mirrored
    columns carry exactly negated values; `v` runs from 0 at the top to 1.
    """

    def __init__(self, resolution):
        steps = np.arange(resolution, dtype=np.float64)
        self.resolution = resolution
        self.u = ((steps - (resolution - 1) / 2.0) / resolution)[None, :]
        self.v = ((steps + 0.5) / resolution)[:, None]

    def ellipse(self, cu, cv, ru, rv):
        return ((self.u - cu) / ru) ** 2 + ((self.v - cv) / rv) ** 2 <= 1.0


def _background(kind, resolution):
    if kind.kind == 'white':
        return np.ones((resolution, resolution, 3))
    if kind.kind == 'solid':
        return np.broadcast_to(np.asarray(kind.color, dtype=np.float64),
                               (resolution, resolution, 3)).copy()
    coarse = np.random.default_rng(kind.seed).uniform(0.05, 0.95, size=(8, 8, 3))
    return np.clip(ndimage.zoom(coarse, (resolution / 8.0, resolution / 8.0, 1), order=1), 0, 1)


def _skin_rgb(tone):
    return np.clip(tone * np.array([1.08, 0.97, 0.86]), 0.0, 1.0)


def face_radius_x(identity):
    return 0.30 + 0.2 * (identity.face_aspect - 0.7)


def sunglasses_band(identity, variation):
    """Box (x0, y0, x1, y1) of the sunglasses band as image fractions."""

    t = np.sin(np.radians(variation.yaw_deg))
    center = 0.5 + 0.06 * t + t * (0.10 + 0.08 * (EYE_Y - 0.5))
    half = identity.eye_spacing / 2.0 + identity.eye_size + 0.03
    x0 = max(center - half, GLASSES_X_LIMITS[0])
    x1 = min(center + half, GLASSES_X_LIMITS[1])
    return (x0, EYE_Y - GLASSES_HALF_HEIGHT, x1, EYE_Y + GLASSES_HALF_HEIGHT)


def render(identity, variation, resolution=128):
    """Rasterizes one face.

    Args:
        identity (IdentitySpec): Who.
        variation (VariationSpec): How.
        resolution (int): 64 or 128.

    Returns:
        numpy.ndarray: ``resolution x resolution x 3`` float32 in [0, 1].

    """

    if resolution not in RESOLUTIONS:
        raise ArgumentError('resolution must be one of {}, not {!r}'.format(RESOLUTIONS, resolution))

    frame = _Frame(resolution)
    image = _background(variation.background, resolution)
    skin = _skin_rgb(identity.skin_tone)
    t = np.sin(np.radians(variation.yaw_deg))

    # Positions are offsets from the midline in u.
    face_u = 0.06 * t
    rx = face_radius_x(identity) * (1.0 - 0.15 * abs(t))

    def feature_u(v):
        return face_u + t * (0.10 + 0.08 * (v - 0.5))

    # Ears sit behind the face; the one on the side the face turns toward shrinks.
    for side in (-1.0, 1.0):
        turn = side * t
        scale = 1.0 - turn if turn >= 0 else 1.0 - 0.5 * turn
        width = identity.ear_size * 0.6 * max(scale, 0.0)
        if width <= 0:
            continue
        mask = frame.ellipse(face_u + side * (rx + 0.02), EAR_Y, width, 0.08)
        image[mask] = skin * 0.9

    image[frame.ellipse(face_u, FACE_CENTER_Y, rx, FACE_RADIUS_Y)] = skin

    eye_u = feature_u(EYE_Y)
    for side in (-1.0, 1.0):
        narrowing = 1.0 - 0.5 * max(side * t, 0.0)
        half = identity.eye_size * narrowing
        center = eye_u + side * identity.eye_spacing / 2.0 * (1.0 - 0.3 * abs(t))
        image[frame.ellipse(center, EYE_Y, half, identity.eye_size * 0.55)] = 0.95
        image[frame.ellipse(center + 0.2 * half * t, EYE_Y,
                            half * 0.45, identity.eye_size * 0.4)] = 0.08

    nose_bottom = NOSE_TOP + identity.nose_length
    nose_u = feature_u(frame.v) + 0.03 * t
    bridge = (np.abs(frame.u - nose_u) <= 0.0125) & (frame.v >= NOSE_TOP) & (frame.v <= nose_bottom)
    image[bridge] = skin * 0.75
    image[frame.ellipse(feature_u(nose_bottom) + 0.03 * t, nose_bottom, 0.045, 0.018)] = skin * 0.7

    half_mouth = identity.mouth_width / 2.0 * (1.0 - 0.3 * abs(t))
    du = frame.u - feature_u(MOUTH_Y)
    curve = MOUTH_Y + variation.expression * 0.03 * (0.5 - (du / half_mouth) ** 2)
    mouth = (np.abs(du) <= half_mouth) & (np.abs(frame.v - curve) <= 0.012)
    image[mouth] = np.array([0.6 * identity.skin_tone + 0.1,
                             0.25 * identity.skin_tone, 0.25 * identity.skin_tone])

    if variation.sunglasses:
        x0, y0, x1, y1 = sunglasses_band(identity, variation)
        band = ((frame.u + 0.5 >= x0) & (frame.u + 0.5 <= x1)
                & (frame.v >= y0) & (frame.v <= y1))
        image[band] = 0.04

    if variation.illum_strength > 0:
        direction = np.sin(np.radians(variation.illum_angle_deg))
        gain = 1.0 - variation.illum_strength * (0.45 - 0.9 * direction * frame.u)
        image = image * gain[..., None]

    if variation.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=(variation.blur_sigma, variation.blur_sigma, 0),
                                        mode='nearest')

    return np.clip(image, 0.0, 1.0).astype(np.float32)


def identity_seed(seed, identity_id):
    """Per-identity renderer seed derived from the corpus seed."""

    return int(np.random.SeedSequence([int(seed), int(identity_id)]).generate_state(1)[0])


def _split_sizes(n_identities, test_fraction):
    n_test = int(round(n_identities * test_fraction))
    return n_identities - min(max(n_test, 1), n_identities - 1)


def build_corpus(n_identities, variations_per_identity, out_dir, seed, resolution=128,
                 test_fraction=0.4, exclude=(), workers=1):
    """Renders a corpus and writes its manifest.

    Every identity gets record 0 with the NORMAL variation followed by
    `variations_per_identity` non-normal renders. The last identities by id
    form the test split.

    Args:
        n_identities (int): At least 2.
        variations_per_identity (int): Non-normal renders per identity.
        out_dir (str): Destination; images go to ``out_dir/{identity_id}/{index}.png``.
        seed (int): Corpus seed.
        resolution (int): 64 or 128.
        test_fraction (float): Fraction of identities held out for testing.
        exclude (iterable): Variation kinds withheld from the non-normal renders.
        workers (int): Rendering threads.

    Returns:
        Manifest: The written manifest.

    """

    if n_identities < 2:
        raise ArgumentError('a corpus needs at least 2 identities')
    if variations_per_identity < 0:
        raise ArgumentError('variations_per_identity must be >= 0')
    if resolution not in RESOLUTIONS:
        raise ArgumentError('resolution must be one of {}'.format(RESOLUTIONS))

    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError('corpus directory is not writable: {}'.format(out_dir))
    n_train = _split_sizes(n_identities, test_fraction)

    jobs = []
    records = []
    for identity_id in range(n_identities):
        identity = sample_identity(identity_seed(seed, identity_id), skin_group=identity_id % 3)
        rng = np.random.default_rng([int(seed), identity_id, 1])
        variations = [NORMAL] + [sample_variation(rng, exclude)
                                 for _ in range(variations_per_identity)]
        attributes = {'skin_group': identity.skin_group, 'shape_group': identity.shape_group}
        split = 'train' if identity_id < n_train else 'test'
        os.makedirs(os.path.join(out_dir, str(identity_id)), exist_ok=True)
        for index, variation in enumerate(variations):
            rel = '{}/{}.png'.format(identity_id, index)
            records.append(SampleRecord(rel, identity_id, variation.is_normal, variation,
                                        split, attributes))
            jobs.append((identity, variation, os.path.join(out_dir, rel)))

    def write(job):
        identity, variation, path = job
        save_png(render(identity, variation, resolution), path)

    logger.info('rendering %d images for %d identities into %s',
                len(jobs), n_identities, out_dir)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for _ in tqdm(pool.map(write, jobs), total=len(jobs), desc='render', disable=None):
            pass

    manifest = Manifest(records, os.path.abspath(out_dir))
    manifest.save()
    return manifest

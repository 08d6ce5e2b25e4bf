# -*- coding: utf-8 -*-
"""
passform.models - networks and region geometry
~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~

The frozen identity encoder, the style-based decoder (and a plain decoder for
ablations), the seven region discriminators, the attribute classifier used to
pseudo-label GAN samples, and saving/loading of all of them.

Networks work on ``N x 3 x H x W`` float tensors with values in [0, 1]. The
module-level `encode`, `generate`, `discriminate` and `crop_region` functions
take single HWC images.
"""
import dataclasses
import json
import logging
import math
import os

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from .exceptions import ArgumentError, ConfigurationError
from .imageio import LabeledImageDataset, to_images, to_tensor
from .synthface import Manifest

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
LRELU_GAIN = math.sqrt(2.0)


def resolve_device(name='auto'):
    """`auto` picks CUDA when present."""

    if name == 'auto':
        return torch.device('cuda' if torch.cuda.is_available() else 'cpu')
    return torch.device(name)


@dataclasses.dataclass(frozen=True)
class RegionSpec:
    """A fixed attention box.

    Attributes:
        name (str): Region name.
        box (tuple): ``(x0, y0, x1, y1)`` as fractions of width and height.

    """

    name: str
    box: tuple

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ArgumentError('invalid box for region {!r}: {}'.format(self.name, self.box))

    def pixel_box(self, height, width):
        """Integer ``(x0, y0, x1, y1)`` after rounding half up."""

        x0, y0, x1, y1 = self.box
        px = [int(math.floor(f * width + 0.5)) for f in (x0, x1)]
        py = [int(math.floor(f * height + 0.5)) for f in (y0, y1)]
        if px[1] <= px[0] or py[1] <= py[0]:
            raise ArgumentError('region {!r} is empty at {}x{}'.format(self.name, height, width))
        return px[0], py[0], px[1], py[1]

    def mirrored(self, name):
        x0, y0, x1, y1 = self.box
        return RegionSpec(name, (1.0 - x1, y0, 1.0 - x0, y1))


EARS_LEFT = RegionSpec('ear_left', (0.02, 0.35, 0.17, 0.65))

DEFAULT_REGIONS = (
    RegionSpec('full', (0.0, 0.0, 1.0, 1.0)),
    RegionSpec('face', (0.15, 0.10, 0.85, 0.95)),
    RegionSpec('nose', (0.40, 0.40, 0.60, 0.70)),
    RegionSpec('eyes', (0.15, 0.28, 0.85, 0.52)),
    RegionSpec('mouth', (0.33, 0.68, 0.67, 0.85)),
    EARS_LEFT,
    EARS_LEFT.mirrored('ear_right'),
)
REGION_NAMES = tuple(region.name for region in DEFAULT_REGIONS)

# Whole image and face plus narrow eye, nose and mouth boxes; no ears.
FIVE_REGIONS = (
    DEFAULT_REGIONS[0],
    DEFAULT_REGIONS[1],
    DEFAULT_REGIONS[2],
    RegionSpec('eyes', (0.22, 0.34, 0.78, 0.50)),
    DEFAULT_REGIONS[4],
)
REGION_PRESETS = {'seven': DEFAULT_REGIONS, 'five': FIVE_REGIONS}


def regions_from_config(boxes=None, preset='seven'):
    """Regions of a preset with optional ``{name: [x0, y0, x1, y1]}`` overrides."""

    if preset not in REGION_PRESETS:
        raise ArgumentError('unknown region preset {!r}'.format(preset))
    base = REGION_PRESETS[preset]
    boxes = boxes or {}
    unknown = set(boxes) - {r.name for r in base}
    if unknown:
        raise ArgumentError('unknown regions: {}'.format(sorted(unknown)))
    return tuple(RegionSpec(r.name, tuple(boxes.get(r.name, r.box))) for r in base)


def crop_region(image, region):
    """Crops an HWC image to a region box, without interpolation."""

    image = np.asarray(image)
    x0, y0, x1, y1 = region.pixel_box(image.shape[0], image.shape[1])
    return image[y0:y1, x0:x1]


def crop_batch(images, region):
    """Crops an ``N x C x H x W`` tensor to a region box."""

    x0, y0, x1, y1 = region.pixel_box(images.shape[-2], images.shape[-1])
    return images[..., y0:y1, x0:x1]


class EqualLinear(nn.Module):
    """Linear layer with equalized learning rate."""

    def __init__(self, in_dim, out_dim, lr_mul=1.0, bias_init=0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class PixelNorm(nn.Module):

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class ModulatedConv2d(nn.Module):
    """Convolution whose weights are scaled per sample by a style vector.

    The style is mapped to one gain per input channel; with `demodulate` the
    modulated weights are renormalized to unit norm per output channel.
    """

    def __init__(self, in_channels, out_channels, kernel_size, d_w, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.affine = EqualLinear(d_w, in_channels, bias_init=1.0)
        self.demodulate = demodulate
        self.padding = kernel_size // 2

    def forward(self, x, w):
        n, in_c, height, width = x.shape
        out_c = self.weight.shape[0]
        style = self.affine(w)
        weight = self.scale * self.weight[None] * style[:, None, :, None, None]
        if self.demodulate:
            demod = torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4)) + 1e-8)
            weight = weight * demod[:, :, None, None, None]
        weight = weight.reshape(n * out_c, in_c, *self.weight.shape[2:])
        out = F.conv2d(x.reshape(1, n * in_c, height, width), weight,
                       padding=self.padding, groups=n)
        return out.reshape(n, out_c, height, width)


class StyledLayer(nn.Module):

    def __init__(self, in_channels, out_channels, d_w):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, out_channels, 3, d_w)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x, w):
        x = self.conv(x, w) + self.bias[None, :, None, None]
        return F.leaky_relu(x, 0.2) * LRELU_GAIN


class ToRGB(nn.Module):

    def __init__(self, in_channels, d_w):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, 3, 1, d_w, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias[None, :, None, None]


def _upsample(x):
    return F.interpolate(x, scale_factor=2, mode='bilinear', align_corners=False)


def channel_schedule(resolution, max_channels=128, min_channels=32):
    """Channel width at each synthesis level, 4x4 first."""

    levels = int(math.log2(resolution)) - 1
    return [max(min_channels, max_channels >> max(0, i - 2)) for i in range(levels)]


class StyleDecoder(nn.Module):
    """Style-based generator.

    A mapping MLP turns the input vector (an identity embedding, or a latent
    z for the unconditional GAN) into styles; the synthesis stack grows a
    learned 4x4 constant to the output resolution with style-modulated
    convolutions and skip-connected RGB outputs. There are no noise inputs.

    Attributes:
        arch (dict): Architecture descriptor; `build_module` rebuilds from it.
        num_ws (int): Number of style vectors consumed by the synthesis stack.

    """

    def __init__(self, in_dim, d_w=128, resolution=128, max_channels=128, min_channels=32,
                 mapping_layers=4, per_layer_styles=True):
        super().__init__()
        if resolution not in (32, 64, 128):
            raise ArgumentError('unsupported generator resolution {}'.format(resolution))
        self.arch = {'kind': 'style', 'in_dim': in_dim, 'd_w': d_w, 'resolution': resolution,
                     'max_channels': max_channels, 'min_channels': min_channels,
                     'mapping_layers': mapping_layers, 'per_layer_styles': per_layer_styles,
                     'version': FORMAT_VERSION}
        channels = channel_schedule(resolution, max_channels, min_channels)
        self.num_ws = 2 * len(channels)
        self.d_w = d_w
        self.per_layer_styles = per_layer_styles

        layers = [PixelNorm()]
        dims = [in_dim] + [d_w] * mapping_layers
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [EqualLinear(a, b, lr_mul=0.01), nn.LeakyReLU(0.2)]
        self.mapping_net = nn.Sequential(*layers)
        if per_layer_styles:
            self.style_heads = EqualLinear(d_w, self.num_ws * d_w, lr_mul=0.01)

        self.const = nn.Parameter(torch.randn(1, channels[0], 4, 4))
        self.layers = nn.ModuleList()
        self.to_rgbs = nn.ModuleList()
        prev = channels[0]
        for level, width in enumerate(channels):
            if level == 0:
                self.layers.append(StyledLayer(prev, width, d_w))
            else:
                self.layers.append(StyledLayer(prev, width, d_w))
                self.layers.append(StyledLayer(width, width, d_w))
            self.to_rgbs.append(ToRGB(width, d_w))
            prev = width

    def mapping(self, x):
        """Input vectors -> styles, ``N x num_ws x d_w`` (or ``N x d_w`` when broadcast)."""

        w = self.mapping_net(x)
        if self.per_layer_styles:
            return self.style_heads(w).reshape(-1, self.num_ws, self.d_w)
        return w

    def synthesis(self, ws):
        if ws.dim() == 2:
            ws = ws[:, None, :].expand(-1, self.num_ws, -1)
        x = self.const.expand(ws.shape[0], -1, -1, -1)
        rgb = None
        layer = iter(self.layers)
        for level, to_rgb in enumerate(self.to_rgbs):
            if level == 0:
                x = next(layer)(x, ws[:, 0])
            else:
                x = next(layer)(_upsample(x), ws[:, 2 * level - 1])
                x = next(layer)(x, ws[:, 2 * level])
            y = to_rgb(x, ws[:, 2 * level + 1])
            rgb = y if rgb is None else _upsample(rgb) + y
        return torch.sigmoid(rgb)

    def forward(self, x):
        return self.synthesis(self.mapping(x))


class PlainDecoder(nn.Module):
    """Unmodulated upsampling decoder, the encoder-decoder ablation arm.

    `mapping` is the identity, so the embedding itself plays the role of the
    style input for path length regularization.
    """

    def __init__(self, in_dim, resolution=128, max_channels=128, min_channels=32):
        super().__init__()
        self.arch = {'kind': 'plain', 'in_dim': in_dim, 'resolution': resolution,
                     'max_channels': max_channels, 'min_channels': min_channels,
                     'version': FORMAT_VERSION}
        channels = channel_schedule(resolution, max_channels, min_channels)
        self.stem = nn.Linear(in_dim, channels[0] * 16)
        blocks = []
        for a, b in zip(channels[:-1], channels[1:]):
            blocks += [nn.Upsample(scale_factor=2, mode='bilinear', align_corners=False),
                       nn.Conv2d(a, b, 3, padding=1), nn.LeakyReLU(0.2),
                       nn.Conv2d(b, b, 3, padding=1), nn.LeakyReLU(0.2)]
        self.blocks = nn.Sequential(*blocks)
        self.to_rgb = nn.Conv2d(channels[-1], 3, 1)
        self.first = channels[0]

    def mapping(self, x):
        return x

    def synthesis(self, ws):
        x = self.stem(ws).reshape(-1, self.first, 4, 4)
        return torch.sigmoid(self.to_rgb(self.blocks(F.leaky_relu(x, 0.2))))

    def forward(self, x):
        return self.synthesis(self.mapping(x))


def _conv_trunk(resolution, widths, stop=8):
    layers = []
    prev = 3
    size = resolution
    for width in widths:
        layers += [nn.Conv2d(prev, width, 3, stride=2, padding=1),
                   nn.GroupNorm(min(8, width), width), nn.LeakyReLU(0.2)]
        prev = width
        size //= 2
        if size <= stop:
            break
    return nn.Sequential(*layers), prev


class IdentityEncoder(nn.Module):
    """Convolutional face-identity encoder producing unit-length embeddings.

    Attributes:
        arch (dict): Architecture descriptor, including ``trained`` and, once
            pretrained, ``heldout_accuracy``.

    """

    def __init__(self, resolution=128, d_e=256, widths=(32, 64, 128, 128)):
        super().__init__()
        self.arch = {'kind': 'encoder', 'resolution': resolution, 'd_e': d_e,
                     'widths': list(widths), 'trained': False, 'version': FORMAT_VERSION}
        self.trunk, last = _conv_trunk(resolution, widths)
        self.head = nn.Linear(last, d_e)

    @property
    def trained(self):
        return bool(self.arch.get('trained'))

    def check_input(self, images):
        res = self.arch['resolution']
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, res, res):
            raise ArgumentError('encoder expects N x 3 x {0} x {0} images, got {1}'
                                .format(res, tuple(images.shape)))

    def forward(self, images):
        self.check_input(images)
        features = self.trunk((images - 0.5) * 2.0).mean(dim=(2, 3))
        return F.normalize(self.head(features), dim=1, eps=1e-8)

    def freeze(self):
        self.requires_grad_(False)
        self.eval()
        return self


class AttributeClassifier(nn.Module):
    """Small convnet predicting one categorical attribute."""

    def __init__(self, n_classes, resolution=128, widths=(16, 32, 64, 64), attribute=''):
        super().__init__()
        self.arch = {'kind': 'classifier', 'n_classes': n_classes, 'resolution': resolution,
                     'widths': list(widths), 'attribute': attribute, 'version': FORMAT_VERSION}
        self.trunk, last = _conv_trunk(resolution, widths)
        self.head = nn.Linear(last, n_classes)

    def forward(self, images):
        return self.head(self.trunk((images - 0.5) * 2.0).mean(dim=(2, 3)))

    def predict(self, images):
        with torch.no_grad():
            return self(images).argmax(dim=1)


class PatchDiscriminator(nn.Module):
    """Four strided convolutions from a 32x32 crop to one score."""

    def __init__(self, channels=32):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 1, 4))

    def forward(self, crops):
        return self.net((crops - 0.5) * 2.0).reshape(-1)


class RegionDiscriminator(nn.Module):
    """One PatchDiscriminator per named region.

    Higher scores mean "more fake". Sub-discriminators are keyed by region
    name, so the k-th output always comes from the discriminator owning the
    k-th requested region.
    """

    def __init__(self, regions=DEFAULT_REGIONS, channels=32, crop_size=32):
        super().__init__()
        self.regions = tuple(regions)
        self.arch = {'kind': 'discriminator',
                     'regions': [[r.name, list(r.box)] for r in self.regions],
                     'channels': channels, 'crop_size': crop_size, 'version': FORMAT_VERSION}
        self.crop_size = crop_size
        self.heads = nn.ModuleDict({r.name: PatchDiscriminator(channels) for r in self.regions})

    def forward(self, images, regions=None):
        regions = self.regions if regions is None else regions
        scores = []
        for region in regions:
            if region.name not in self.heads:
                raise ArgumentError('no discriminator for region {!r}'.format(region.name))
            crop = F.interpolate(crop_batch(images, region), size=(self.crop_size, self.crop_size),
                                 mode='bilinear', align_corners=False)
            scores.append(self.heads[region.name](crop))
        return torch.stack(scores, dim=1)


def build_module(arch):
    """Rebuilds an untrained module from its architecture descriptor."""

    kind = arch['kind']
    if kind == 'style':
        return StyleDecoder(arch['in_dim'], arch['d_w'], arch['resolution'], arch['max_channels'],
                            arch['min_channels'], arch['mapping_layers'], arch['per_layer_styles'])
    if kind == 'plain':
        return PlainDecoder(arch['in_dim'], arch['resolution'], arch['max_channels'],
                            arch['min_channels'])
    if kind == 'encoder':
        module = IdentityEncoder(arch['resolution'], arch['d_e'], tuple(arch['widths']))
        module.arch.update(arch)
        return module
    if kind == 'classifier':
        module = AttributeClassifier(arch['n_classes'], arch['resolution'], tuple(arch['widths']),
                                     arch.get('attribute', ''))
        module.arch.update(arch)
        return module
    if kind == 'discriminator':
        regions = [RegionSpec(name, tuple(box)) for name, box in arch['regions']]
        return RegionDiscriminator(regions, arch['channels'], arch['crop_size'])
    raise ConfigurationError('unknown module kind {!r}'.format(kind))


def save_modules(path, modules, meta=None, extra_state=None):
    """Writes named modules to one ``.pt`` file plus a ``.json`` sidecar.

    Both files are written to temporaries and renamed into place.

    Args:
        path (str): Destination of the tensor container, ending in ``.pt``.
        modules (dict): Name -> module carrying an ``arch`` descriptor.
        meta (dict): Extra JSON-serializable metadata for the sidecar.
        extra_state (dict): Extra tensors/state dicts stored in the container.

    """

    state = {name: module.state_dict() for name, module in modules.items()}
    state.update(extra_state or {})
    sidecar = {'format_version': FORMAT_VERSION,
               'arch': {name: module.arch for name, module in modules.items()}}
    sidecar.update(meta or {})
    tmp = path + '.tmp'
    torch.save(state, tmp)
    os.replace(tmp, path)
    meta_path = sidecar_path(path)
    with open(meta_path + '.tmp', 'w') as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    os.replace(meta_path + '.tmp', meta_path)
    return path


def sidecar_path(path):
    return os.path.splitext(path)[0] + '.json'


def load_modules(path, device='cpu'):
    """Reads a container written by `save_modules`.

    Returns:
        tuple: ``(modules, sidecar, state)`` where `modules` maps names to
        rebuilt modules with their weights loaded.

    """

    with open(sidecar_path(path)) as fh:
        sidecar = json.load(fh)
    if sidecar.get('format_version') != FORMAT_VERSION:
        raise ConfigurationError('unsupported checkpoint format {!r}'
                                 .format(sidecar.get('format_version')))
    state = torch.load(path, map_location=device)
    modules = {}
    for name, arch in sidecar['arch'].items():
        module = build_module(arch)
        module.load_state_dict(state[name])
        modules[name] = module.to(device)
    return modules, sidecar, state


def encode(params, image):
    """Embeds one HWC image with the identity encoder.

    Returns:
        numpy.ndarray: Length ``d_e`` embedding.

    """

    image = np.asarray(image)
    res = params.arch['resolution']
    if image.shape != (res, res, 3):
        raise ArgumentError('encoder expects a {0}x{0}x3 image, got {1}'.format(res, image.shape))
    device = next(params.parameters()).device
    with torch.no_grad():
        return params(to_tensor(image).to(device))[0].cpu().numpy()


def generate(params, emb):
    """Decodes one identity embedding into an HWC image."""

    emb = np.asarray(emb, dtype=np.float32)
    if emb.shape != (params.arch['in_dim'],):
        raise ArgumentError('generator expects an embedding of length {}, got {}'
                            .format(params.arch['in_dim'], emb.shape))
    device = next(params.parameters()).device
    with torch.no_grad():
        return to_images(params(torch.from_numpy(emb)[None].to(device)))[0]


def discriminate(params, image, regions=None):
    """Scores one HWC image with every region discriminator.

    `regions` defaults to the discriminator's own set (seven regions unless it
    was built from another preset); any reordering of that set is accepted.
    """

    regions = params.regions if regions is None else tuple(regions)
    if len(regions) != len(params.regions):
        raise ArgumentError('exactly {} regions required, got {}'
                            .format(len(params.regions), len(regions)))
    device = next(params.parameters()).device
    with torch.no_grad():
        return params(to_tensor(image).to(device), regions)[0].cpu().numpy()


def cosine_head_logits(embeddings, weight, scale=16.0):
    return scale * F.normalize(embeddings, dim=1) @ F.normalize(weight, dim=1).t()


def fit_classifier(model, dataset, epochs, seed, batch_size=64, lr=1e-3, device='cpu',
                   head=None, desc='fit'):
    """Cross-entropy training loop shared by the encoder and attribute classifiers.

    When `head` is given the model output is treated as an embedding and
    classified by cosine similarity to the rows of `head`.
    """

    generator = torch.Generator().manual_seed(seed)
    loader = torch.utils.data.DataLoader(dataset, batch_size=batch_size, shuffle=True,
                                         generator=generator, drop_last=False)
    params = list(model.parameters()) + ([head] if head is not None else [])
    opt = torch.optim.Adam(params, lr=lr)
    model.train()
    for epoch in range(epochs):
        total, correct, running = 0, 0, 0.0
        for images, labels in tqdm(loader, desc='{} {}/{}'.format(desc, epoch + 1, epochs),
                                   disable=None, leave=False):
            images, labels = images.to(device), labels.to(device)
            out = model(images)
            logits = cosine_head_logits(out, head) if head is not None else out
            loss = F.cross_entropy(logits, labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss) * len(labels)
            correct += int((logits.argmax(dim=1) == labels).sum())
            total += len(labels)
        logger.info('%s epoch %d: loss %.4f, train accuracy %.3f',
                    desc, epoch + 1, running / max(total, 1), correct / max(total, 1))
    model.eval()
    return model


def accuracy(model, dataset, batch_size=128, device='cpu', head=None):
    if len(dataset) == 0:
        return float('nan')
    loader = torch.utils.data.DataLoader(dataset, batch_size=batch_size)
    correct = 0
    with torch.no_grad():
        for images, labels in loader:
            out = model(images.to(device))
            logits = cosine_head_logits(out, head) if head is not None else out
            correct += int((logits.argmax(dim=1).cpu() == labels).sum())
    return correct / len(dataset)


def pretrain_encoder(corpus, d_e=256, epochs=10, seed=0, resolution=None, batch_size=64,
                     lr=1e-3, holdout=0.1, device='auto'):
    """Trains the identity encoder by classifying train-split identities.

    A fraction `holdout` of each identity's renders is kept out of training
    to measure accuracy on unseen variations. The classifier head is then
    discarded and the encoder frozen.

    Args:
        corpus (Manifest): Corpus; only its train split is used.
        d_e (int): Embedding width.
        epochs (int): Passes over the training renders. 0 returns an
            encoder tagged untrained.
        seed (int): Seed for initialization, holdout choice and shuffling.

    Returns:
        IdentityEncoder: Frozen encoder; ``arch['heldout_accuracy']`` records
        the held-out identification accuracy.

    """

    train = corpus.split('train')
    identities = train.identities()
    if len(identities) < 2:
        raise ConfigurationError('encoder pretraining needs at least 2 train identities, got {}'
                                 .format(len(identities)))
    if resolution is None:
        resolution = corpus.image(corpus[0]).shape[0]
    device = resolve_device(device)

    torch.manual_seed(seed)
    encoder = IdentityEncoder(resolution, d_e).to(device)
    if epochs <= 0:
        logger.warning('epochs=%d: returning an untrained encoder', epochs)
        return encoder.freeze()

    rng = np.random.default_rng(seed)
    held = rng.uniform(size=len(train)) < holdout
    label_of = {identity: i for i, identity in enumerate(identities)}
    fit_records = Manifest([r for r, h in zip(train, held) if not h], train.root)
    held_records = Manifest([r for r, h in zip(train, held) if h], train.root)
    fit_set = LabeledImageDataset(fit_records, [label_of[r.identity_id] for r in fit_records])
    held_set = LabeledImageDataset(held_records, [label_of[r.identity_id] for r in held_records])

    head = nn.Parameter(torch.randn(len(identities), d_e, device=device))
    fit_classifier(encoder, fit_set, epochs, seed, batch_size, lr, device, head, desc='encoder')
    acc = accuracy(encoder, held_set, device=device, head=head)
    logger.info('encoder held-out identification accuracy: %.3f on %d renders', acc, len(held_set))
    encoder.arch.update(trained=True, heldout_accuracy=acc, seed=seed, epochs=epochs)
    return encoder.freeze()


def save_encoder(encoder, path):
    return save_modules(path, {'encoder': encoder}, meta={'role': 'encoder'})


def load_encoder(path, device='cpu'):
    """Reads a frozen encoder saved by `save_encoder` or inside a training checkpoint."""

    modules, _, _ = load_modules(path, resolve_device(device))
    if 'encoder' not in modules:
        raise ConfigurationError('{} holds no identity encoder'.format(path))
    return modules['encoder'].freeze()

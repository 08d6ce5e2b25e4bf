# -*- coding: utf-8 -*-
"""Conversions between PNG files, HWC float arrays and NCHW tensors.

An image is an ``H x W x 3`` float32 array with values in [0, 1]. Networks take
``N x 3 x H x W`` tensors.
"""
import numpy as np
import torch
from PIL import Image


def load_png(path):
    """Decodes an 8-bit PNG into an HWC float32 array in [0, 1]."""

    with Image.open(path) as img:
        pixels = np.asarray(img.convert('RGB'), dtype=np.uint8)
    return pixels.astype(np.float32) / 255.0


def save_png(image, path):
    """Encodes an HWC float array in [0, 1] as an 8-bit PNG."""

    pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PNG')


def quantize(image):
    """Returns the image as it reads back after a PNG round trip."""

    return (np.clip(np.rint(np.asarray(image) * 255.0), 0, 255) / 255.0).astype(np.float32)


def to_tensor(images):
    """HWC array or NHWC stack -> NCHW float tensor."""

    array = np.asarray(images, dtype=np.float32)
    if array.ndim == 3:
        array = array[None]
    return torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2)))


def to_images(tensor):
    """NCHW tensor -> NHWC float32 array."""

    return tensor.detach().cpu().float().permute(0, 2, 3, 1).numpy()


def image_grid(rows, path, pad=2):
    """Writes a grid PNG, one list of equally sized HWC images per row."""

    height, width = rows[0][0].shape[:2]
    n_cols = max(len(row) for row in rows)
    canvas = np.ones((len(rows) * (height + pad) + pad,
                      n_cols * (width + pad) + pad, 3), dtype=np.float32)
    for i, row in enumerate(rows):
        for j, image in enumerate(row):
            y = pad + i * (height + pad)
            x = pad + j * (width + pad)
            canvas[y:y + height, x:x + width] = image
    save_png(canvas, path)


class ImageDataset(torch.utils.data.Dataset):
    """Pixels of every record of a manifest, and nothing else.

    Items are ``3 x H x W`` tensors. No identity id or other label leaves
    this dataset, so two loaders built from it cannot be joined on identity.
    """

    def __init__(self, manifest):
        self.paths = [manifest.path_of(record) for record in manifest]

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, index):
        return to_tensor(load_png(self.paths[index]))[0]


class LabeledImageDataset(ImageDataset):
    """Pixels paired with one integer label per record."""

    def __init__(self, manifest, labels):
        super().__init__(manifest)
        if len(labels) != len(self.paths):
            raise ValueError('one label per record required')
        self.labels = [int(label) for label in labels]

    def __getitem__(self, index):
        return super().__getitem__(index), self.labels[index]

"""Embedding networks mapping image batches to raw (unnormalised) features."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidInputError


@dataclass
class EncoderSpec:
    input_size: tuple = (112, 112)
    embedding_dim: int = 64
    arch: str = "tiny-cnn"
    seed: int = 0
    widths: tuple = (16, 32, 64, 128)
    output_bn: bool = True

    def to_dict(self):
        return {
            "output_bn": self.output_bn,
            "input_size": list(self.input_size),
            "embedding_dim": self.embedding_dim,
            "arch": self.arch,
            "seed": self.seed,
            "widths": list(self.widths),
        }


@dataclass
class EmbeddingBatch:
    features: torch.Tensor
    norms: torch.Tensor
    labels: torch.Tensor = None
    stream: str = None


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.PReLU(cout),
    )


class TinyCNN(nn.Module):
    """Four stride-2 conv blocks, global average pooling, linear head, optional BN."""

    def __init__(self, embedding_dim=64, widths=(16, 32, 64, 128), output_bn=True):
        super().__init__()
        chans = (3,) + tuple(widths)
        self.body = nn.Sequential(*[_conv_block(a, b) for a, b in zip(chans[:-1], chans[1:])])
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(chans[-1], embedding_dim)
        self.bn = nn.BatchNorm1d(embedding_dim) if output_bn else nn.Identity()

    def forward(self, x):
        x = self.pool(self.body(x)).flatten(1)
        return self.bn(self.head(x))


class Encoder(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            self.net = _build(spec)

    def forward(self, x):
        return self.net(x)


def _build(spec):
    if spec.arch == "tiny-cnn":
        return TinyCNN(spec.embedding_dim, spec.widths, spec.output_bn)
    if spec.arch == "resnet34":
        from torchvision.models import resnet34

        net = resnet34(weights=None)
        net.fc = nn.Sequential(nn.Linear(net.fc.in_features, spec.embedding_dim),
                               nn.BatchNorm1d(spec.embedding_dim))
        return net
    raise InvalidInputError(f"unknown encoder architecture {spec.arch!r}")


def to_tensor(images, input_size=None, dtype=torch.float32):
    """uint8 NHWC images -> float NCHW tensor scaled to [-1, 1]."""
    if isinstance(images, torch.Tensor) and images.dtype.is_floating_point:
        x = images.to(dtype)
        if x.ndim != 4 or x.shape[1] != 3:
            raise InvalidInputError(f"expected (B, 3, H, W) float images, got {tuple(x.shape)}")
    else:
        arr = np.asarray(images)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise InvalidInputError(f"expected (B, H, W, 3) images, got {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).to(dtype)
        x = (x / 255.0 - 0.5) / 0.5
    if input_size is not None and tuple(x.shape[2:]) != tuple(input_size):
        raise InvalidInputError(f"images are {tuple(x.shape[2:])}, encoder expects {tuple(input_size)}")
    return x


def embed(images, encoder, labels=None, stream=None):
    """Raw features and their L2 norms for a batch of images."""
    param = next(encoder.parameters())
    x = to_tensor(images, encoder.spec.input_size, dtype=param.dtype)
    features = encoder(x)
    if labels is not None:
        labels = torch.as_tensor(labels, dtype=torch.long)
    return EmbeddingBatch(features=features, norms=features.norm(dim=1), labels=labels, stream=stream)


@torch.no_grad()
def embed_images(encoder, images, batch_size=256):
    """Eval-mode raw features for a uint8 image array, as float64 numpy."""
    was_training = encoder.training
    encoder.eval()
    out = []
    try:
        for start in range(0, len(images), batch_size):
            out.append(embed(images[start:start + batch_size], encoder).features.double().numpy())
    finally:
        encoder.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, encoder.spec.embedding_dim))

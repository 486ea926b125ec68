"""Neural building blocks: encoders, decoders, transformations, routers.

Every hidden dense or convolutional layer is followed by batch normalization
and a leaky rectifier.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANCE_FLOOR = 1e-6


def dense(n_in: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, n_out), nn.BatchNorm1d(n_out), nn.LeakyReLU(0.1))


def positive(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x) + VARIANCE_FLOOR


class GaussianHead(nn.Module):
    """Linear map to a mean and a softplus-positive variance."""

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.sig = (n_in, n_out)
        self.mu = nn.Linear(n_in, n_out)
        self.var = nn.Linear(n_in, n_out)

    def forward(self, h):
        return self.mu(h), positive(self.var(h))


class Transformation(nn.Module):
    """Parent latent -> child Gaussian parameters, through one hidden layer."""

    def __init__(self, n_in: int, hidden: int, n_out: int):
        super().__init__()
        self.sig = (n_in, n_out)
        self.body = dense(n_in, hidden)
        self.head = GaussianHead(hidden, n_out)

    def forward(self, z):
        return self.head(self.body(z))


class Router(nn.Module):
    """Probability of routing to the right child."""

    def __init__(self, n_in: int, hidden: int):
        super().__init__()
        self.sig = (n_in, 1)
        self.body = nn.Sequential(dense(n_in, hidden), dense(hidden, hidden), nn.Linear(hidden, 1))

    def forward(self, h):
        return torch.sigmoid(self.body(h)).squeeze(-1)


class LadderBlock(nn.Module):
    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.sig = (n_in, n_out)
        self.body = dense(n_in, n_out)

    def forward(self, d):
        return self.body(d)


class ProjectionHead(nn.Module):
    def __init__(self, n_in: int, hidden: int, n_out: int):
        super().__init__()
        self.sig = (n_in, n_out)
        self.body = nn.Sequential(dense(n_in, hidden), nn.Linear(hidden, n_out))

    def forward(self, d):
        return self.body(d)


# -- encoders --------------------------------------------------------------


class MLPEncoder(nn.Module):
    def __init__(self, input_shape, hidden: list, n_out: int):
        super().__init__()
        n_in = math.prod(input_shape)
        widths = [n_in, *hidden, n_out]
        self.body = nn.Sequential(*(dense(a, b) for a, b in zip(widths[:-1], widths[1:])))

    def forward(self, x):
        return self.body(x.flatten(1))


def _conv(c_in, c_out, k, stride, pad):
    return nn.Sequential(nn.Conv2d(c_in, c_out, k, stride, pad), nn.BatchNorm2d(c_out), nn.LeakyReLU(0.1))


def _deconv(c_in, c_out, k, stride, pad):
    return nn.Sequential(
        nn.ConvTranspose2d(c_in, c_out, k, stride, pad), nn.BatchNorm2d(c_out), nn.LeakyReLU(0.1)
    )


class ConvEncoder(nn.Module):
    """Three stride-2 3x3 stages (28 -> 14 -> 7 -> 4), then a dense layer."""

    def __init__(self, input_shape, channels: list, n_out: int, kernel: int = 3, depth_mult: int = 1):
        super().__init__()
        c, h, w = input_shape
        layers = []
        for ch in channels:
            layers.append(_conv(c, ch, kernel, 2, (kernel - 1) // 2 if kernel % 2 else 1))
            for _ in range(depth_mult - 1):
                layers.append(_conv(ch, ch, 3, 1, 1))
            c = ch
        self.convs = nn.Sequential(*layers)
        with torch.no_grad():
            flat = self.convs(torch.zeros(2, *input_shape)).flatten(1).shape[1]
        self.out = dense(flat, n_out)

    def forward(self, x):
        return self.out(self.convs(x).flatten(1))


class ResnetBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.body = nn.Sequential(_conv(c_in, c_out, 3, 1, 1), _conv(c_out, c_out, 3, 1, 1))
        self.skip = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        return self.skip(x) + 0.1 * self.body(x)


class ResnetEncoder(nn.Module):
    """Residual encoder for 32x32 / 64x64 colour images (not used at desk scale)."""

    def __init__(self, input_shape, n_out: int, start: int = 32, top: int = 256):
        super().__init__()
        c, h, _ = input_shape
        layers, ch = [ResnetBlock(c, start)], start
        while h > 4:
            nxt = min(ch * 2, top)
            layers += [nn.AvgPool2d(3, 2, 1), ResnetBlock(ch, nxt)]
            ch, h = nxt, (h + 1) // 2
        self.convs = nn.Sequential(*layers)
        self.out = dense(ch * h * h, n_out)

    def forward(self, x):
        return self.out(self.convs(x).flatten(1))


# -- decoders --------------------------------------------------------------


class MLPDecoder(nn.Module):
    def __init__(self, n_latent: int, hidden: list, output_shape):
        super().__init__()
        self.sig = (n_latent, math.prod(output_shape))
        self.output_shape = tuple(output_shape)
        widths = [n_latent, *reversed(hidden)]
        self.body = nn.Sequential(
            *(dense(a, b) for a, b in zip(widths[:-1], widths[1:])),
            nn.Linear(widths[-1], math.prod(output_shape)),
        )

    def forward(self, z):
        return self.body(z).view(-1, *self.output_shape)


class ConvDecoder(nn.Module):
    """Mirror of :class:`ConvEncoder` using transposed convolutions (4 -> 7 -> 14 -> 28)."""

    def __init__(self, n_latent: int, channels: list, output_shape, kernel: int = 3):
        super().__init__()
        self.sig = (n_latent, math.prod(output_shape))
        self.output_shape = tuple(output_shape)
        c_out, size = output_shape[0], output_shape[1]
        chans = list(reversed(channels))
        sizes = [size]
        for _ in chans:
            sizes.append((sizes[-1] + 1) // 2)
        sizes = sizes[::-1]  # e.g. [4, 7, 14, 28]
        self.start = (chans[0], sizes[0])
        self.inp = dense(n_latent, chans[0] * sizes[0] * sizes[0])
        layers = []
        for i, ch in enumerate(chans):
            nxt = chans[i + 1] if i + 1 < len(chans) else None
            k = sizes[i + 1] - 2 * (sizes[i] - 1) + 2
            if nxt is None:
                layers.append(nn.ConvTranspose2d(ch, c_out, k, 2, 1))
            else:
                layers.append(_deconv(ch, nxt, k, 2, 1))
        self.deconvs = nn.Sequential(*layers)

    def forward(self, z):
        ch, s = self.start
        return self.deconvs(self.inp(z).view(-1, ch, s, s))


class ResnetDecoder(nn.Module):
    def __init__(self, n_latent: int, output_shape, start: int = 32, top: int = 256):
        super().__init__()
        self.sig = (n_latent, math.prod(output_shape))
        c, size, _ = output_shape
        chans, h = [start], size
        while h > 4:
            chans.append(min(chans[-1] * 2, top))
            h = (h + 1) // 2
        self.start = (chans[-1], h)
        self.inp = dense(n_latent, chans[-1] * h * h)
        layers = []
        for a, b in zip(chans[::-1][:-1], chans[::-1][1:]):
            layers += [ResnetBlock(a, b), nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)]
        layers += [ResnetBlock(chans[0], chans[0]), nn.Conv2d(chans[0], c, 3, 1, 1)]
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        ch, s = self.start
        return self.body(self.inp(z).view(-1, ch, s, s))

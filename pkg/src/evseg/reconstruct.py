"""Grayscale reconstruction from event streams.

The default reconstructor is a deterministic leaky integrator: frozen by
construction, needs no pretraining, and keeps every downstream test
reproducible.  A small recurrent convolutional variant fills the
"swap the reconstructor" ablation slot, and an identity kind returns the
paired grayscale frame for clone/zero-gap fixtures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgumentError
from .events import EventStream, polarity_histogram, voxelize

KINDS = ("integrator", "recurrent", "identity")


def percentile_normalize(values: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    """Affinely map the [lo_pct, hi_pct] intensity percentiles to [0, 1], then clamp.

    Degenerate inputs (flat percentile range) map to constant mid-gray 0.5.
    """
    lo, hi = np.percentile(values, [lo_pct, hi_pct])
    if hi - lo < 1e-12:
        return np.full_like(values, 0.5)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def symmetric_normalize(values: np.ndarray, pct: float = 99.0) -> np.ndarray:
    """Zero-anchored robust normalization: no accumulation maps to mid-gray 0.5
    and the given percentile of |values| maps to the interval edge.

    Event integrals are overwhelmingly zero wherever nothing happened, which
    makes two-sided percentile windows collapse onto the empty value; anchoring
    at zero keeps "no events" at mid-gray regardless of scene sparsity.
    """
    scale = np.percentile(np.abs(values), pct)
    if scale < 1e-12:
        return np.full_like(values, 0.5)
    return np.clip(0.5 + 0.5 * values / scale, 0.0, 1.0)


class RecurrentReconstructorNet(nn.Module):
    """Three conv layers with a single-image recurrent state (prior reconstruction)."""

    def __init__(self, bins: int = 5, channels: int = 16, dtype=torch.float64):
        super().__init__()
        self.bins = bins
        self.conv1 = nn.Conv2d(bins + 1, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv3 = nn.Conv2d(channels, 1, 3, padding=1)
        self.to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, voxels: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
        x = torch.cat([voxels, prior], dim=0).unsqueeze(0)
        h = torch.relu(self.conv1(x))
        h = torch.relu(self.conv2(h))
        return torch.sigmoid(self.conv3(h)).squeeze(0).squeeze(0)


@dataclass
class Reconstructor:
    """Frozen events-to-grayscale converter.

    kind "integrator": clamp01(normalize(decay * prior + gain * polarity_sum)).
    kind "recurrent": frozen random-weight conv net over a voxel grid plus the
    prior reconstruction as recurrent state (supply a checkpoint for real use).
    kind "identity": returns the paired frame untouched (test fixture).
    """

    kind: str = "integrator"
    decay: float = 0.0
    gain: float = 1.0
    net: RecurrentReconstructorNet | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown reconstructor kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.decay <= 1.0:
            raise InvalidArgumentError("decay must lie in [0, 1]")

    def reconstruct(self, stream: EventStream | None, prior: np.ndarray | None = None,
                    frame: np.ndarray | None = None) -> np.ndarray:
        """Produce one H x W grayscale image in [0, 1].

        ``prior`` is the caller-owned recurrent state (the previous
        reconstruction); ``frame`` is only consumed by the identity kind.
        """
        if self.kind == "identity":
            if frame is None:
                raise InvalidArgumentError("identity reconstructor needs the paired frame")
            return np.asarray(frame, dtype=np.float64)

        if stream is None:
            raise InvalidArgumentError("event stream required")
        h, w = stream.height, stream.width
        if prior is not None:
            prior = np.asarray(prior, dtype=np.float64)
            if prior.shape != (h, w):
                raise InvalidArgumentError(
                    f"prior geometry {prior.shape} does not match stream geometry {(h, w)}")

        if self.kind == "integrator":
            acc = self.gain * polarity_histogram(stream)
            if prior is not None:
                acc = self.decay * prior + acc
            return symmetric_normalize(acc)

        if self.net is None:
            self.net = _default_recurrent_net()
        net = self.net
        voxels = torch.from_numpy(voxelize(stream, net.bins).values).to(next(net.parameters()).dtype)
        state = torch.zeros(1, h, w, dtype=voxels.dtype) if prior is None \
            else torch.from_numpy(prior).to(voxels.dtype).unsqueeze(0)
        with torch.no_grad():
            out = net(voxels, state)
        return out.numpy().astype(np.float64)

    def parameter_bytes(self) -> bytes:
        """Concatenated parameter bytes, for frozen-contract audits."""
        if self.kind != "recurrent" or self.net is None:
            return b""
        chunks = [p.detach().numpy().tobytes() for _, p in sorted(self.net.named_parameters())]
        return b"".join(chunks)


def _default_recurrent_net() -> RecurrentReconstructorNet:
    # Frozen random weights from a fixed seed: deterministic stand-in when no
    # checkpoint is supplied.
    net = RecurrentReconstructorNet()
    gen = torch.Generator().manual_seed(0x5EED)
    with torch.no_grad():
        for _, p in sorted(net.named_parameters()):
            p.copy_(torch.empty_like(p).uniform_(-0.2, 0.2, generator=gen))
    return net

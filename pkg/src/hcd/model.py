"""Small convolutional backbone with optional channel gate and projector."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from hcd import diffcore as dc
from hcd.diffcore import Tensor
from hcd.gater import EVAL, TRAIN, BatchNorm1d, GateOutput, GateParams, gate_forward, pool
from hcd.vicreg import ProjectorParams


def _uniform(rng, bound, shape) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def batch_norm_2d(x: Tensor, bn: BatchNorm1d, mode: str, update: bool = True) -> Tensor:
    """Per-channel normalisation over ``(n, H, W)``."""
    n, c, h, w = x.shape
    flat = dc.reshape(dc.transpose(x, (0, 2, 3, 1)), (n * h * w, c))
    out = bn(flat, mode, update)
    return dc.transpose(dc.reshape(out, (n, h, w, c)), (0, 3, 1, 2))


@dataclass
class Backbone:
    """Two stride-2 3x3 conv -> batch-norm -> ReLU blocks, then a linear head.

    ``(n, C_in, H, W) -> (n, C, H/4, W/4)`` feature map; the head maps the
    pooled (and possibly gated) ``C``-vector to class scores. Batch norm pins
    the per-channel scale of the feature map, so losses that are only
    sensitive to relative geometry cannot shrink it away.
    """

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    head_w: Tensor
    head_b: Tensor
    bn1: BatchNorm1d = None
    bn2: BatchNorm1d = None

    def __post_init__(self):
        if self.bn1 is None:
            self.bn1 = BatchNorm1d(self.conv1_w.shape[0])
        if self.bn2 is None:
            self.bn2 = BatchNorm1d(self.conv2_w.shape[0])

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int = 3, hidden: int = 16,
             channels: int = 32, n_classes: int = 2) -> "Backbone":
        f1 = 1.0 / math.sqrt(in_channels * 9)
        f2 = 1.0 / math.sqrt(hidden * 9)
        fh = 1.0 / math.sqrt(channels)
        return cls(
            _uniform(rng, f1, (hidden, in_channels, 3, 3)),
            _uniform(rng, f1, (hidden,)),
            _uniform(rng, f2, (channels, hidden, 3, 3)),
            _uniform(rng, f2, (channels,)),
            _uniform(rng, fh, (channels, n_classes)),
            _uniform(rng, fh, (n_classes,)),
        )

    @property
    def channels(self) -> int:
        return self.conv2_w.shape[0]

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[1]

    def stem(self, x: Tensor, mode: str = TRAIN, update: bool = True) -> Tensor:
        """First conv + batch norm, before its ReLU: the StyleMix mixing point.

        Mixing pre-activation keeps a per-channel colour shift a pure shift
        of the channel mean, which is exactly what the statistic swap replaces.
        """
        h = dc.conv2d(x, self.conv1_w, self.conv1_b, stride=2, pad=0)
        return batch_norm_2d(h, self.bn1, mode, update)

    def trunk(self, h: Tensor, mode: str = TRAIN, update: bool = True) -> Tensor:
        f = dc.conv2d(dc.relu(h), self.conv2_w, self.conv2_b, stride=2, pad=1)
        return dc.relu(batch_norm_2d(f, self.bn2, mode, update))

    def features(self, x: Tensor, mode: str = TRAIN, update: bool = True) -> Tensor:
        return self.trunk(self.stem(x, mode, update), mode, update)

    def head(self, z: Tensor) -> Tensor:
        return z @ self.head_w + self.head_b

    def parameters(self) -> list[Tensor]:
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b, self.head_w, self.head_b,
                *self.bn1.parameters(), *self.bn2.parameters()]

    def norms(self) -> dict:
        return {"bn1": self.bn1, "bn2": self.bn2}


@dataclass
class EvalOutput:
    logits: np.ndarray
    mask: Optional[np.ndarray]
    z_hat: np.ndarray


class HCDModel:
    """Backbone + channel gate + VICReg projector.

    With ``gate=None`` the model is a plain classifier (the ERM baseline).
    """

    def __init__(self, backbone: Backbone, gate: Optional[GateParams] = None,
                 projector: Optional[ProjectorParams] = None):
        self.backbone = backbone
        self.gate = gate
        self.projector = projector

    @classmethod
    def build(cls, streams: dict, n_classes: int, hidden: int = 16, channels: int = 32,
              use_gate: bool = True, r: int = 16, p: float = 0.2, inverted_dropout: bool = True,
              projector_width: int = 256) -> "HCDModel":
        """Each component draws from its own stream so the backbone starts
        identically whether or not the gate and projector exist."""
        backbone = Backbone.init(streams["init_backbone"], hidden=hidden, channels=channels,
                                 n_classes=n_classes)
        gate = projector = None
        if use_gate:
            gate = GateParams.init(channels, r=r, p=p, rng=streams["init_gate"],
                                   inverted_dropout=inverted_dropout)
            projector = ProjectorParams.init(channels, projector_width, rng=streams["init_projector"])
        return cls(backbone, gate, projector)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        names = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b",
                 "bn1_scale", "bn1_shift", "bn2_scale", "bn2_shift"]
        out = list(zip(names, self.backbone.parameters()))
        if self.gate is not None:
            out += list(zip(["gate_W1", "gate_W2", "gate_bn_scale", "gate_bn_shift"],
                            self.gate.parameters()))
        if self.projector is not None:
            out += list(zip(["proj_W1", "proj_b1", "proj_W2", "proj_b2"], self.projector.parameters()))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def _norm_layers(self) -> dict:
        layers = self.backbone.norms()
        if self.gate is not None:
            layers["gate_bn"] = self.gate.bn
        return layers

    def buffers(self) -> dict:
        """Running batch-norm statistics, keyed ``<layer>_running_{mean,var}``."""
        out = {}
        for name, bn in self._norm_layers().items():
            out[f"{name}_running_mean"] = bn.running_mean
            out[f"{name}_running_var"] = bn.running_var
        return out

    def load_buffers(self, bufs: dict) -> None:
        for name, bn in self._norm_layers().items():
            bn.running_mean = np.array(bufs[f"{name}_running_mean"], dtype=np.float64)
            bn.running_var = np.array(bufs[f"{name}_running_var"], dtype=np.float64)

    def gate_latent(self, z: Tensor, mode: str, rng=None, xi=None, update_stats=True) -> Optional[GateOutput]:
        if self.gate is None:
            return None
        return gate_forward(z, self.gate, mode, rng=rng, update_stats=update_stats, xi=xi)

    def predict_batch(self, images: np.ndarray) -> EvalOutput:
        """Deterministic eval-mode forward pass (no tape)."""
        F = self.backbone.features(Tensor(images), EVAL)
        z = pool(F)
        out = self.gate_latent(z, EVAL)
        z_hat = z if out is None else out.z_hat
        logits = self.backbone.head(z_hat)
        return EvalOutput(logits.data, None if out is None else out.mask.data, z_hat.data)

    def latent(self, images: np.ndarray) -> np.ndarray:
        """Pooled, ungated channel activations."""
        return pool(self.backbone.features(Tensor(images), EVAL)).data

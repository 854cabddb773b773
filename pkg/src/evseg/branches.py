"""Branch assembly: the image (teacher) and event (student) pipelines."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
from torch import nn

from .backbones import (
    FeatureExtractor,
    ImageEncoder,
    ImplicitTextProjector,
    MaskGenerator,
    MaskSet,
    ModelConfig,
)
from .errors import ConfigError

FREEZE_POLICIES = ("mlp_only", "mask_generator_only", "both")

# Mapping from freeze policy to the event-branch components that train.
_POLICY_SETS = {
    "mlp_only": ("projector",),
    "mask_generator_only": ("masks",),
    "both": ("projector", "masks"),
}


@dataclass
class BranchOutput:
    tokens: torch.Tensor        # B x K x d_t
    features: torch.Tensor      # B x d_f x h x w
    masks: MaskSet


@dataclass
class BranchState:
    """One branch's components plus which of them currently receive gradients."""

    encoder: ImageEncoder
    projector: ImplicitTextProjector
    features: FeatureExtractor
    masks: MaskGenerator
    trainable: tuple = ()

    def components(self) -> dict:
        return {"encoder": self.encoder, "projector": self.projector,
                "features": self.features, "masks": self.masks}

    def forward(self, images: torch.Tensor) -> BranchOutput:
        embedding, _ = self.encoder(images)
        tokens = self.projector(embedding)
        fmap = self.features(images, tokens)
        mask_set = self.masks(fmap, out_size=tuple(images.shape[2:]))
        return BranchOutput(tokens, fmap, mask_set)

    def set_trainable(self, names) -> None:
        names = tuple(names)
        unknown = set(names) - set(self.components())
        if unknown:
            raise ConfigError(f"unknown trainable components: {sorted(unknown)}")
        self.trainable = names
        for comp_name, module in self.components().items():
            requires = comp_name in names
            for p in module.parameters():
                p.requires_grad_(requires)

    def named_parameters(self, prefix: str = ""):
        for comp_name, module in sorted(self.components().items()):
            for pname, p in sorted(module.named_parameters()):
                yield f"{prefix}{comp_name}.{pname}", p

    def trainable_parameters(self):
        for comp_name in sorted(self.trainable):
            module = self.components()[comp_name]
            for _, p in sorted(module.named_parameters()):
                yield p

    def eval_mode(self) -> "BranchState":
        for module in self.components().values():
            module.eval()
        return self


def trainable_set_for_policy(policy: str) -> tuple:
    if policy not in _POLICY_SETS:
        raise ConfigError(f"unknown freeze policy {policy!r}; expected one of {FREEZE_POLICIES}")
    return _POLICY_SETS[policy]


def new_branch(cfg: ModelConfig) -> BranchState:
    """Fresh modules with library-default init; call seeded init before use."""
    return BranchState(ImageEncoder(cfg), ImplicitTextProjector(cfg),
                       FeatureExtractor(cfg), MaskGenerator(cfg))


def clone_branch(branch: BranchState) -> BranchState:
    """Deep copy with bit-identical parameters."""
    return BranchState(copy.deepcopy(branch.encoder), copy.deepcopy(branch.projector),
                       copy.deepcopy(branch.features), copy.deepcopy(branch.masks),
                       branch.trainable)

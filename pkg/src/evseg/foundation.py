"""Construction and calibration of the shared foundation weights.

Both branches start from one set of weights derived deterministically from a
seed.  A real deployment would load pretrained foundation checkpoints; at desk
scale the stand-in is a short seeded supervised calibration on procedurally
rendered labeled scenes, which gives the frozen teacher an actual segmentation
ability for the student to distill from.  With ``steps=0`` the weights are the
plain seeded random init.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbones import (
    CategoryHead,
    ImageEncoder,
    ImplicitTextProjector,
    FeatureExtractor,
    MaskGenerator,
    ModelConfig,
    TextEncoder,
    embed_classes,
    seeded_init_,
)
from .branches import BranchState
from .data import SynthesisOptions, random_scene, render_frame, render_labels
from .distill import DissimilarityNetwork
from .errors import NumericError
from .evaluation import assemble_mixture
from .serialization import canonical_json, load_blobs, load_module_blobs_, module_blobs, save_blobs

COMPONENT_ORDER = ("text", "encoder", "projector", "features", "masks", "head", "dn")


def build_components(cfg: ModelConfig, seed: int) -> dict:
    """Instantiate every component and initialize it from one generator."""
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFF)
    components = {
        "text": TextEncoder(cfg),
        "encoder": ImageEncoder(cfg),
        "projector": ImplicitTextProjector(cfg),
        "features": FeatureExtractor(cfg),
        "masks": MaskGenerator(cfg),
        "head": CategoryHead(cfg),
        "dn": DissimilarityNetwork(cfg),
    }
    for name in COMPONENT_ORDER:
        module = components[name]
        if hasattr(module, "seeded_init_"):
            module.seeded_init_(gen)
        else:
            seeded_init_(module, gen)
    components["encoder"].check_nondegenerate()
    return components


def _calibration_batch(seed: int, step: int, opts, batch_size: int, dtype):
    scene_opts = SynthesisOptions(sequences=1, test_sequences=0, frames=2,
                                  width=opts.width, height=opts.height)
    images, labels = [], []
    for i in range(batch_size):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xF0D, step, i])))
        scene = random_scene(rng, scene_opts)
        frame = render_frame(scene, scene.duration)
        # mild pixel jitter: the downstream branch consumes reconstructions,
        # so the stand-in foundation should not be brittle to small
        # photometric noise
        frame = np.clip(frame + rng.normal(0.0, 0.02, frame.shape), 0.0, 1.0)
        images.append(frame)
        labels.append(render_labels(scene, scene.duration))
    x = torch.from_numpy(np.stack(images)).unsqueeze(1).to(dtype)
    y = torch.from_numpy(np.stack(labels)).long()
    return x, y


def calibrate_(components: dict, class_names, templates, opts, seed: int) -> list:
    """Seeded supervised calibration; mutates the components in place.

    Returns the per-step dense cross-entropy values (for diagnostics).
    """
    if opts.steps <= 0:
        return []
    trainable = [components[n] for n in ("encoder", "projector", "features", "masks", "head")]
    params = [p for m in trainable for p in m.parameters()]
    for p in params:
        p.requires_grad_(True)
    class_matrix = embed_classes(components["text"], list(class_names), list(templates))
    opt = torch.optim.Adam(params, lr=opts.learning_rate, weight_decay=1e-5)
    dtype = class_matrix.dtype
    branch = BranchState(components["encoder"], components["projector"],
                         components["features"], components["masks"])
    head = components["head"]
    num_classes = len(class_names)
    queries = components["masks"].cfg.queries
    # fixed round-robin query ownership: query q is responsible for class q % C
    query_class = torch.arange(queries) % num_classes
    history = []
    for step in range(opts.steps):
        # linear decay to 30% of the base rate settles the late calibration
        frac = step / max(opts.steps - 1, 1)
        for group in opt.param_groups:
            group["lr"] = opts.learning_rate * (1.0 - 0.7 * frac)
        x, y = _calibration_batch(seed, step, opts, opts.batch_size, dtype)
        out = branch.forward(x)
        gt = F.one_hot(y, num_classes).permute(0, 3, 1, 2).to(dtype)
        # per-query dense mask supervision, balanced between fg and bg pixels;
        # smoothed targets keep mask logits (and thus teacher confidence)
        # bounded, so downstream distillation targets stay matchable
        target = gt[:, query_class, :, :] * 0.9 + 0.05
        pos = target.mean().clamp(1e-4, 1 - 1e-4)
        pix_w = target / pos + (1.0 - target) / (1.0 - pos)
        l_mask = (F.binary_cross_entropy_with_logits(
            out.masks.mask_logits, target, reduction="none") * pix_w).mean()
        # per-query categorization toward the owned class
        logits = head.class_logits(out.masks.mask_embeddings, class_matrix)
        l_cat = F.cross_entropy(logits.reshape(-1, num_classes + 1),
                                query_class.repeat(x.shape[0]), label_smoothing=0.1)
        # end-to-end assembled map keeps the full inference path calibrated
        mix, _ = assemble_mixture(out.masks, class_matrix, head.temperature, head.no_object)
        log_prob = (torch.log(mix.clamp_min(1e-30))
                    - torch.log(mix.sum(dim=1, keepdim=True).clamp_min(1e-30)))
        counts = torch.bincount(y.reshape(-1), minlength=num_classes).to(dtype)
        weights = (y.numel() / (num_classes * counts.clamp_min(1.0))).clamp(0.25, 4.0)
        smooth_q = 0.1
        dense_target = gt * (1.0 - smooth_q) + smooth_q / num_classes
        l_dense = -(dense_target * log_prob * weights.reshape(1, -1, 1, 1)).sum(dim=1).mean()
        loss = l_mask + 0.5 * l_cat + 0.25 * l_dense
        if not torch.isfinite(loss):
            raise NumericError(f"calibration diverged at step {step}", component="foundation")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 2.0)
        opt.step()
        history.append(float(loss.detach()))
    for p in params:
        p.requires_grad_(False)
    return history


def _cache_key(cfg: ModelConfig, opts, class_names, templates, seed: int) -> str:
    from dataclasses import asdict
    payload = canonical_json({
        "model": _plain(asdict(cfg)),
        "foundation": _plain(asdict(opts)),
        "classes": list(class_names),
        "templates": list(templates),
        "seed": seed,
    })
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if k != "cache_dir"}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def foundation_components(cfg: ModelConfig, opts, class_names, templates, seed: int) -> dict:
    """Seeded init plus calibration, with an optional on-disk cache."""
    cache_path = None
    if getattr(opts, "cache_dir", None):
        cache_dir = Path(opts.cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache_path = cache_dir / f"foundation_{_cache_key(cfg, opts, class_names, templates, seed)}.blob"
        if cache_path.exists():
            components = build_components(cfg, seed)
            blobs, _ = load_blobs(cache_path)
            for name in COMPONENT_ORDER:
                load_module_blobs_(components[name], blobs, name)
            for module in components.values():
                for p in module.parameters():
                    p.requires_grad_(False)
            return components

    components = build_components(cfg, seed)
    for module in components.values():
        for p in module.parameters():
            p.requires_grad_(False)
    calibrate_(components, class_names, templates, opts, seed)
    if cache_path is not None:
        blobs = {}
        for name in COMPONENT_ORDER:
            blobs.update(module_blobs(components[name], name))
        save_blobs(cache_path, blobs, {"seed": seed})
    return components

"""Two-branch training: pipeline build, optimization loop, checkpointing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbones import embed_classes
from .branches import BranchState, clone_branch, trainable_set_for_policy
from .config import ExperimentConfig, config_from_dict
from .data import CLASS_NAMES, Sample, ToyDataset, load_dataset
from .distill import (
    LossReport,
    alternative_weight_map,
    assign_query_targets,
    category_loss,
    combine_losses,
    dissimilarity_map,
    embedding_distill_loss,
    feature_distill_loss,
    masked_divergence,
)
from .errors import ConfigError, NumericError
from .evaluation import assemble_mixture
from .foundation import build_components, foundation_components
from .reconstruct import Reconstructor, RecurrentReconstructorNet
from .serialization import (
    as_tensor,
    canonical_json,
    load_blobs,
    load_module_blobs_,
    module_blobs,
    module_checksum,
    save_blobs,
)
from .distill import normalize_mixture

CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    config: ExperimentConfig
    class_names: tuple
    templates: list
    image_branch: BranchState
    event_branch: BranchState
    text_encoder: torch.nn.Module
    head: torch.nn.Module
    dn: torch.nn.Module
    reconstructor: Reconstructor
    class_matrix: torch.Tensor
    optimizer: torch.optim.Optimizer
    step: int = 0

    def trainable_named_parameters(self) -> list:
        out = []
        for comp in sorted(self.event_branch.trainable):
            module = self.event_branch.components()[comp]
            for name, p in sorted(module.named_parameters()):
                out.append((f"event.{comp}.{name}", p))
        for name, p in sorted(self.dn.named_parameters()):
            out.append((f"dn.{name}", p))
        for name, p in sorted(self.head.named_parameters()):
            out.append((f"head.{name}", p))
        return out

    def checksums(self) -> dict:
        out = {}
        for branch_name, branch in (("image", self.image_branch), ("event", self.event_branch)):
            for comp, module in branch.components().items():
                out[f"{branch_name}.{comp}"] = module_checksum(module)
        out["text"] = module_checksum(self.text_encoder)
        out["dn"] = module_checksum(self.dn)
        out["head"] = module_checksum(self.head)
        if self.reconstructor.kind == "recurrent" and self.reconstructor.net is not None:
            out["reconstructor"] = module_checksum(self.reconstructor.net)
        return out


def make_reconstructor(config: ExperimentConfig) -> Reconstructor:
    opts = config.reconstructor
    if opts.kind == "recurrent":
        net = RecurrentReconstructorNet(bins=opts.bins, dtype=config.model.torch_dtype)
        if opts.checkpoint:
            blobs, _ = load_blobs(opts.checkpoint)
            load_module_blobs_(net, blobs, "reconstructor")
        else:
            gen = torch.Generator().manual_seed(config.seed * 7919 + 13)
            with torch.no_grad():
                for _, p in sorted(net.named_parameters()):
                    p.copy_(torch.empty_like(p).uniform_(-0.2, 0.2, generator=gen))
        for p in net.parameters():
            p.requires_grad_(False)
        return Reconstructor(kind="recurrent", net=net)
    return Reconstructor(kind=opts.kind, decay=opts.decay, gain=opts.gain)


def _assemble_pipeline(config: ExperimentConfig, class_names, components) -> TrainState:
    image_branch = BranchState(components["encoder"], components["projector"],
                               components["features"], components["masks"])
    image_branch.set_trainable(())
    event_branch = clone_branch(image_branch)
    event_branch.set_trainable(trainable_set_for_policy(config.train.freeze_policy))
    head, dn, text = components["head"], components["dn"], components["text"]
    for p in head.parameters():
        p.requires_grad_(True)
    for p in dn.parameters():
        p.requires_grad_(True)
    templates = config.templates()
    class_matrix = embed_classes(text, list(class_names), templates)
    state = TrainState(config, tuple(class_names), templates, image_branch, event_branch,
                       text, head, dn, make_reconstructor(config), class_matrix,
                       optimizer=None)  # type: ignore[arg-type]
    named = state.trainable_named_parameters()
    main_params = [p for name, p in named if not name.startswith("dn.")]
    dn_params = [p for name, p in named if name.startswith("dn.")]
    state.optimizer = torch.optim.Adam(
        [{"params": main_params, "lr": config.train.learning_rate},
         {"params": dn_params, "lr": config.train.effective_dn_learning_rate()}],
        betas=(0.9, 0.999), eps=1e-8)
    return state


def build_pipeline(config: ExperimentConfig, class_names=None) -> TrainState:
    """Foundation weights (seeded, optionally calibrated), cloned branches,
    freeze flags, and the optimizer."""
    class_names = tuple(class_names or CLASS_NAMES)
    components = foundation_components(config.model, config.foundation, class_names,
                                       config.templates(), config.seed)
    return _assemble_pipeline(config, class_names, components)


def build_branches(config: ExperimentConfig, class_names=None) -> tuple:
    """The (frozen image branch, trainable event branch) pair at step 0."""
    state = build_pipeline(config, class_names)
    return state.image_branch, state.event_branch


def _batch_tensors(state: TrainState, batch: list) -> tuple:
    dtype = state.config.model.torch_dtype
    images, recons = [], []
    for sample in batch:
        images.append(torch.from_numpy(np.ascontiguousarray(sample.image)))
        xhat = state.reconstructor.reconstruct(sample.stream, frame=sample.image)
        if xhat.shape != sample.image.shape:
            raise ConfigError(
                f"reconstruction geometry {xhat.shape} != frame geometry {sample.image.shape}")
        recons.append(torch.from_numpy(np.ascontiguousarray(xhat)))
    x = torch.stack(images).unsqueeze(1).to(dtype)
    xh = torch.stack(recons).unsqueeze(1).to(dtype)
    return x, xh


def _forward_losses(state: TrainState, x: torch.Tensor, xh: torch.Tensor) -> tuple:
    """All loss tensors plus the weight map for one batch."""
    cfg = state.config
    with torch.no_grad():
        t_out = state.image_branch.forward(x)
        t_mix, _ = assemble_mixture(t_out.masks, state.class_matrix,
                                    state.head.temperature, state.head.no_object)
        t_prob = normalize_mixture(t_mix)
        t_cls_logits = state.head.class_logits(t_out.masks.mask_embeddings, state.class_matrix)
    if cfg.loss.hard_targets:
        t_prob = torch.nn.functional.one_hot(
            t_prob.argmax(dim=1), t_prob.shape[1]).permute(0, 3, 1, 2).to(t_prob.dtype)

    s_out = state.event_branch.forward(xh)
    s_mix, _ = assemble_mixture(s_out.masks, state.class_matrix,
                                state.head.temperature, state.head.no_object)

    kind = cfg.reweight.kind
    if kind == "dissimilarity-network":
        weight_map = dissimilarity_map(state.dn, x, xh)
    else:
        weight_map = alternative_weight_map(kind, x, xh, f_image=t_out.features,
                                            f_event=s_out.features)

    l_t = embedding_distill_loss(t_out.tokens, s_out.tokens)
    l_f = feature_distill_loss(t_out.masks.decoder_trace, s_out.masks.decoder_trace)
    l_m = masked_divergence(s_mix, t_prob, weight_map)
    targets = assign_query_targets(s_out.masks, t_out.masks, t_cls_logits,
                                   iou_threshold=cfg.loss.iou_match_threshold,
                                   positional=cfg.loss.positional_matching)
    l_c = category_loss(state.head, s_out.masks.mask_embeddings, state.class_matrix, targets)
    return l_t, l_f, l_m, l_c, weight_map


def train_step(state: TrainState, batch: list) -> LossReport:
    """Forward both branches, combine losses, and apply one Adam update.

    Deterministic given the state and batch; frozen parameters never change.
    Raises NumericError (with the partial report attached) on non-finite loss.
    """
    if not batch:
        raise ConfigError("empty batch")
    x, xh = _batch_tensors(state, batch)
    l_t, l_f, l_m, l_c, weight_map = _forward_losses(state, x, xh)
    try:
        total, report = combine_losses(l_t, l_f, l_m, l_c, weight_map,
                                       state.config.loss.weights())
    except NumericError as exc:
        exc.report = LossReport(float(l_t.detach()), float(l_f.detach()), float(l_m.detach()),
                                float(l_c.detach()), float("nan"), float("nan"))
        raise
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    params = [p for _, p in state.trainable_named_parameters()]
    grad_norm = torch.nn.utils.clip_grad_norm_(params, state.config.train.grad_clip)
    state.optimizer.step()
    state.step += 1
    report.grad_norms["total"] = float(grad_norm)
    return report


def diagnose_gradients(state: TrainState, batch: list) -> dict:
    """Per-component gradient norms over the trainable set (diagnostic path)."""
    x, xh = _batch_tensors(state, batch)
    l_t, l_f, l_m, l_c, weight_map = _forward_losses(state, x, xh)
    l_reg = (weight_map.mean() - 1.0) ** 2
    params = [p for _, p in state.trainable_named_parameters()]
    norms = {}
    for name, loss in (("l_t", l_t), ("l_f", l_f), ("l_m", l_m), ("l_c", l_c), ("l_reg", l_reg)):
        grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
        total = 0.0
        for g in grads:
            if g is not None:
                total += float((g ** 2).sum())
        norms[name] = total ** 0.5
    return norms


def batch_indices(seed: int, step: int, n: int, k: int) -> list:
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed & 0xFFFFFFFF, 0xBA7C4, step])))
    return rng.integers(0, n, size=k).tolist()


@dataclass
class FitResult:
    checkpoint_path: Path
    reports: list
    losses_path: Path


def fit(config: ExperimentConfig, dataset: ToyDataset | None = None, data_dir=None,
        out_dir=None, resume=None) -> FitResult:
    """Run the configured number of steps with periodic checkpoints.

    Writes one deterministic record per step to losses.jsonl (wall-clock
    timings go to the timings.jsonl sidecar so loss logs are byte-reproducible).
    """
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = load_dataset(Path(data_dir or Path(config.data_dir) / "train"))
    if not dataset.samples:
        raise ConfigError("training dataset is empty")

    if resume is not None:
        state = load_checkpoint(resume)
        _check_resume_config(state.config, config)
        state.config = config
    else:
        state = build_pipeline(config, dataset.class_names)

    reports = []
    losses_path = out / "losses.jsonl"
    timings_path = out / "timings.jsonl"
    mode = "a" if resume is not None and losses_path.exists() else "w"
    every = config.train.checkpoint_every
    with open(losses_path, mode) as lf, open(timings_path, mode) as tf:
        for step in range(state.step, config.train.steps):
            t0 = time.perf_counter()
            idx = batch_indices(config.seed, step, len(dataset.samples), config.train.batch_size)
            report = train_step(state, [dataset.samples[i] for i in idx])
            wall_ms = (time.perf_counter() - t0) * 1e3
            record = {"step": step, "l_t": report.l_t, "l_f": report.l_f, "l_m": report.l_m,
                      "l_c": report.l_c, "l_reg": report.l_reg, "l_final": report.l_final}
            lf.write(canonical_json(record) + "\n")
            tf.write(canonical_json({"step": step, "wall_ms": round(wall_ms, 3)}) + "\n")
            reports.append(report)
            if every and (step + 1) % every == 0 and (step + 1) < config.train.steps:
                save_checkpoint(state, out / f"ckpt_{step + 1:06d}.evck")
    final_path = out / "checkpoint.evck"
    save_checkpoint(state, final_path)
    return FitResult(final_path, reports, losses_path)


def _check_resume_config(saved: ExperimentConfig, current: ExperimentConfig) -> None:
    a, b = saved.as_dict(), current.as_dict()
    for d in (a, b):
        d["train"] = {k: v for k, v in d["train"].items()
                      if k not in ("steps", "checkpoint_every")}
        d.pop("out_dir", None)
        d.pop("data_dir", None)
    if canonical_json(a) != canonical_json(b):
        raise ConfigError("resume config differs from the checkpointed config (only "
                          "train.steps / train.checkpoint_every / out_dir / data_dir may change)")


# --------------------------------------------------------------------------
# Checkpointing
# --------------------------------------------------------------------------


def _state_blobs(state: TrainState) -> dict:
    blobs = {}
    for branch_name, branch in (("image", state.image_branch), ("event", state.event_branch)):
        for comp, module in branch.components().items():
            blobs.update(module_blobs(module, f"{branch_name}.{comp}"))
    blobs.update(module_blobs(state.text_encoder, "text"))
    blobs.update(module_blobs(state.dn, "dn"))
    blobs.update(module_blobs(state.head, "head"))
    if state.reconstructor.kind == "recurrent" and state.reconstructor.net is not None:
        blobs.update(module_blobs(state.reconstructor.net, "reconstructor"))
    for pname, p in state.trainable_named_parameters():
        opt_state = state.optimizer.state.get(p)
        if opt_state:
            blobs[f"opt.{pname}.exp_avg"] = opt_state["exp_avg"].detach().numpy()
            blobs[f"opt.{pname}.exp_avg_sq"] = opt_state["exp_avg_sq"].detach().numpy()
            blobs[f"opt.{pname}.step"] = np.asarray(float(opt_state["step"]), dtype=np.float64)
    return blobs


def save_checkpoint(state: TrainState, path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "config": state.config.as_dict(),
        "config_hash": state.config.config_hash(),
        "class_names": list(state.class_names),
        "templates": list(state.templates),
        "trainable": sorted(state.event_branch.trainable),
        "rng": {"data_seed": state.config.seed, "step": state.step},
    }
    save_blobs(path, _state_blobs(state), meta)


def load_checkpoint(path) -> TrainState:
    blobs, meta = load_blobs(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
    config = config_from_dict(meta["config"])
    class_names = tuple(meta["class_names"])
    components = build_components(config.model, config.seed)
    for p_all in components.values():
        for p in p_all.parameters():
            p.requires_grad_(False)
    for name in ("text", "encoder", "projector", "features", "masks", "head", "dn"):
        prefix = {"encoder": "image.encoder", "projector": "image.projector",
                  "features": "image.features", "masks": "image.masks"}.get(name, name)
        load_module_blobs_(components[name], blobs, prefix)
    state = _assemble_pipeline(config, class_names, components)
    for comp, module in state.event_branch.components().items():
        load_module_blobs_(module, blobs, f"event.{comp}")
    if state.reconstructor.kind == "recurrent" and "reconstructor.conv1.weight" in blobs:
        load_module_blobs_(state.reconstructor.net, blobs, "reconstructor")
    state.step = int(meta["step"])
    for pname, p in state.trainable_named_parameters():
        key = f"opt.{pname}.exp_avg"
        if key in blobs:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(blobs[f"opt.{pname}.step"]), dtype=torch.float32),
                "exp_avg": as_tensor(blobs[key]).to(p.dtype),
                "exp_avg_sq": as_tensor(blobs[f"opt.{pname}.exp_avg_sq"]).to(p.dtype),
            }
    return state

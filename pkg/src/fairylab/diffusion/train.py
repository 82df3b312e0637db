"""Noise-prediction loss, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from ..adapters import AdapterBank, AdapterContext, downsample_mask
from ..archive import checksum, load_tensors, save_tensors
from ..timesteps import TimestepSampler
from .model import Denoiser, DenoiserSpec
from .schedule import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class FrozenParameterError(RuntimeError):
    pass


@dataclass
class Example:
    """One training item. ``x0`` is (C, H, W) or (F, C, H, W) in [-1, 1]."""

    x0: torch.Tensor
    cond: torch.Tensor
    pixel_mask: torch.Tensor | None = None  # (H, W) binary, image mode only
    first_frame: torch.Tensor | None = None  # clip mode; defaults to x0[0]


@dataclass
class FitConfig:
    lr: float = 2e-3
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 1.0
    phase: str = "train"


def training_loss(model: Denoiser, z: torch.Tensor, c: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                  schedule: NoiseSchedule, first_frame: torch.Tensor | None = None,
                  ctx: AdapterContext | None = None) -> torch.Tensor:
    """Mean over elements of ``(eps - eps_theta(z_t, c, t))^2``.

    Adapters in effect are whatever bank is installed on ``model``, driven by
    ``ctx``.
    """
    z_t = forward_diffuse(z, t, eps, schedule)
    pred = model(z_t, t, c, first_frame, ctx)
    loss = (eps - pred).pow(2).mean()
    if not torch.isfinite(loss):
        raise NonFiniteLossError("non-finite training loss", {"t": t.tolist(), "loss": float(loss.detach())})
    return loss


def collate(examples: Sequence[Example], kind: str):
    x0 = torch.stack([e.x0 for e in examples])
    cond = torch.stack([e.cond for e in examples])
    first = None
    if kind == "clip":
        first = torch.stack([e.first_frame if e.first_frame is not None else e.x0[0] for e in examples])
    masks = None
    if all(e.pixel_mask is not None for e in examples):
        masks = torch.stack([e.pixel_mask for e in examples])
    return x0, cond, first, masks


@dataclass
class Checkpoint:
    spec: DenoiserSpec
    schedule: NoiseSchedule
    weights: dict[str, torch.Tensor]
    optimizer: dict | None = None
    rng_state: torch.Tensor | None = None
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    trainable: list[str] = field(default_factory=list)
    fit_config: dict = field(default_factory=dict)
    banks: dict[str, AdapterBank] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def build_model(self) -> Denoiser:
        model = Denoiser(self.spec, self.schedule)
        model.load_state_dict(self.weights)
        return model

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tensors = {f"model/{k}": v for k, v in self.weights.items()}
        optim_meta = None
        if self.optimizer is not None:
            optim_meta = {"param_groups": self.optimizer["param_groups"], "state_keys": {}}
            for idx, st in self.optimizer["state"].items():
                optim_meta["state_keys"][str(idx)] = sorted(st)
                for k, v in st.items():
                    tensors[f"optim/{idx}/{k}"] = v
        if self.rng_state is not None:
            tensors["rng/torch"] = self.rng_state
        save_tensors(d, tensors)
        manifest = {
            "spec": self.spec.to_dict(),
            "schedule": self.schedule.to_dict(),
            "step": self.step,
            "loss_history": self.loss_history,
            "trainable": self.trainable,
            "fit_config": self.fit_config,
            "optimizer": optim_meta,
            "banks": sorted(self.banks),
            "extra": self.extra,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        for name, bank in self.banks.items():
            bank.save(d / "adapters" / name)
        return d

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        tensors = load_tensors(d)
        weights = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
        optimizer = None
        if manifest.get("optimizer"):
            meta = manifest["optimizer"]
            state = {int(i): {k: tensors[f"optim/{i}/{k}"] for k in keys} for i, keys in meta["state_keys"].items()}
            optimizer = {"state": state, "param_groups": meta["param_groups"]}
        banks = {name: AdapterBank.load(d / "adapters" / name) for name in manifest.get("banks", [])}
        return cls(spec=DenoiserSpec(**manifest["spec"]), schedule=NoiseSchedule.from_dict(manifest["schedule"]),
                   weights=weights, optimizer=optimizer, rng_state=tensors.get("rng/torch"),
                   step=manifest["step"], loss_history=manifest["loss_history"], trainable=manifest["trainable"],
                   fit_config=manifest["fit_config"], banks=banks, extra=manifest.get("extra", {}))


def resolve_trainable(model: Denoiser, bank: AdapterBank | None, trainable) -> dict[str, torch.Tensor]:
    """``"base"`` or a list of adapter keys (``site/role/factor``) -> tensors."""
    if trainable in ("base", ["base"]):
        return {f"model/{k}": p for k, p in model.named_parameters()}
    named = bank.named_tensors() if bank is not None else {}
    out = {}
    for key in trainable or []:
        if key not in named:
            raise KeyError(f"unknown trainable tensor {key!r}")
        out[key] = named[key]
    return out


def _all_tensors(model: Denoiser, bank: AdapterBank | None) -> dict[str, torch.Tensor]:
    out = {f"model/{k}": p for k, p in model.named_parameters()}
    if bank is not None:
        out.update(bank.named_tensors())
    return out


def frozen_checksums(model: Denoiser, bank: AdapterBank | None, trainable_keys) -> dict[str, str]:
    return {k: checksum(t) for k, t in _all_tensors(model, bank).items() if k not in trainable_keys}


def fit(model: Denoiser, dataset: Sequence[Example], sampler: TimestepSampler, trainable, steps: int,
        config: FitConfig | None = None, *, schedule: NoiseSchedule, bank: AdapterBank | None = None,
        resume: Checkpoint | None = None, transform: Callable | None = None,
        checkpoint_dir=None, on_step: Callable | None = None) -> Checkpoint:
    """Train the tensors named by ``trainable`` for ``steps`` optimiser steps.

    Everything else is frozen and verified unchanged by checksum at the end.
    ``transform(example, generator)`` may rewrite each drawn example (stage-1
    frame shuffling). Resuming restores optimiser, RNG and loss history so the
    next loss equals the one an uninterrupted run would have produced.
    """
    config = config or FitConfig()
    if sampler.T != schedule.T:
        raise ValueError("sampler and schedule disagree on T")
    if not dataset:
        raise ValueError("empty dataset")
    model.install(bank)
    params = resolve_trainable(model, bank, trainable)
    for t in _all_tensors(model, bank).values():
        t.requires_grad_(False)
    for t in params.values():
        t.requires_grad_(True)
    if bank is not None:
        bank.train_roles = {k.rsplit("/", 2)[1] for k in params if not k.startswith("model/")}
    before = frozen_checksums(model, bank, params)

    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(list(params.values()), lr=config.lr) if params else None
    history: list[float] = []
    start = 0
    if resume is not None:
        if resume.rng_state is not None:
            gen.set_state(resume.rng_state)
        if opt is not None and resume.optimizer is not None:
            opt.load_state_dict(resume.optimizer)
        history = list(resume.loss_history)
        start = resume.step

    kind = model.spec.kind
    model.train()
    for step in range(start, start + steps):
        idx = torch.randint(len(dataset), (config.batch_size,), generator=gen).tolist()
        batch = [dataset[i] for i in idx]
        if transform is not None:
            batch = [transform(e, gen) for e in batch]
        x0, cond, first, masks = collate(batch, kind)
        t = sampler.sample(len(batch), gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        token_mask = downsample_mask(masks, model.spec.grid).values if masks is not None else None
        ctx = AdapterContext(token_mask=token_mask, phase=config.phase, training=True, generator=gen)
        try:
            loss = training_loss(model, x0, cond, t, eps, schedule, first, ctx)
        except NonFiniteLossError as exc:
            exc.diagnostics.update(step=step, param_norms={k: float(p.detach().norm()) for k, p in params.items()})
            log.error("aborting at step %d: %s", step, exc.diagnostics)
            if checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                (Path(checkpoint_dir) / "nan_dump.json").write_text(json.dumps(exc.diagnostics, indent=1))
            raise
        if opt is not None:
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(list(params.values()), config.grad_clip)
            opt.step()
        history.append(float(loss.detach()))
        if on_step is not None:
            on_step(step, history[-1])
        log.debug("step %d loss %.5f", step, history[-1])
    model.eval()
    for t in params.values():
        t.requires_grad_(False)
    if bank is not None:
        bank.train_roles = set()

    after = frozen_checksums(model, bank, params)
    changed = [k for k in before if before[k] != after[k]]
    if changed:
        raise FrozenParameterError(f"frozen tensors changed during fit: {changed[:5]}")

    ckpt = Checkpoint(
        spec=model.spec, schedule=schedule,
        weights={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer=opt.state_dict() if opt is not None else None,
        rng_state=gen.get_state(), step=start + steps, loss_history=history,
        trainable=sorted(params), fit_config={**asdict(config), "sampler": asdict(sampler)},
    )
    if bank is not None:
        ckpt.banks["bank"] = bank
    if checkpoint_dir is not None:
        ckpt.save(checkpoint_dir)
    return ckpt


def loss_decreased(history: Sequence[float], window: int = 20) -> bool:
    head = sorted(history[:window])[len(history[:window]) // 2]
    tail = sorted(history[-window:])[len(history[-window:]) // 2]
    return tail < head and math.isfinite(tail)

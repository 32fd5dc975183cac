"""Two-phase training: supervised branches with hierarchical alignment, then PSL and RPN consistency.

Phase 1 optimises ``L_det + lambda * (L_low + L_high)``. From
``phase2_start_epoch`` on, the pseudo branch is initialised from the
beta-weighted source branches, the consistency term joins the objective,
and after every optimizer step the pseudo branch follows the sources by EMA.
The pseudo branch never receives gradients.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .alignment import (
    GrlGate,
    HighLevelDiscriminator,
    LowLevelDiscriminator,
    domain_accuracy,
    grl_apply,
    high_level_domain_loss,
    low_level_source_loss,
    low_level_target_loss,
    low_level_total_loss,
)
from .consistency import consistency_loss, consistency_surrogate, match_proposals, mean_overlap
from .detector import HIGH_CHANNELS, LOW_CHANNELS, SpindleDetector, detection_loss, init_uniform_fan_in
from .exceptions import CheckpointError, ConfigurationError, NumericFaultError, PreconditionError
from .psl import LossMemoryBank, compute_beta, ema_update, init_pseudo, residual_norm
from .structures import FeatureMap, ImageSample

log = logging.getLogger(__name__)

METHODS = ("dmsn", "source_only", "single_da", "oracle")


@dataclass
class TrainConfig:
    """All hyperparameters; defaults for the first eight follow the published setup."""

    gamma: float = 5.0
    lambda_tradeoff: float = 1.0
    alpha_ema: float = 0.99
    n_proposals: int = 256
    lmb_capacity: int = 100
    lr: float = 0.001
    epochs: int = 20
    phase2_start_epoch: int = 10
    seed: int = 0
    method: str = "dmsn"
    source_domains: tuple = (0, 1)
    target_domain: int = 2
    source_images_per_step: int = 1
    target_images_per_step: int = 1
    steps_per_epoch: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    grl_scale: float = 1.0
    grl_warmup_steps: int = 0
    beta_cadence: str = "step"
    branch_init: str = "shared"
    probe_every: int = 50
    probe_images: int = 8
    train_data: str = ""
    test_data: str = ""
    fusion: str = "nms"
    fusion_iou: float = 0.5
    beta_weighted_fusion: bool = False
    include_empty_classes: bool = False

    def __post_init__(self):
        self.source_domains = tuple(int(d) for d in self.source_domains)
        self.validate()

    def validate(self):
        if not 0.0 <= self.alpha_ema < 1.0:
            raise ConfigurationError("alpha_ema must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not 0 <= self.phase2_start_epoch <= self.epochs:
            raise ConfigurationError("phase2_start_epoch must lie in [0, epochs]")
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}")
        if not self.source_domains:
            raise ConfigurationError("source_domains is empty")
        if self.target_domain in self.source_domains:
            raise ConfigurationError("target domain cannot also be a source")
        if self.gamma < 0 or self.lambda_tradeoff < 0 or self.lr < 0:
            raise ConfigurationError("gamma, lambda_tradeoff and lr must be >= 0")
        if self.n_proposals < 1 or self.lmb_capacity < 1:
            raise ConfigurationError("n_proposals and lmb_capacity must be >= 1")
        if self.source_images_per_step < 1 or self.target_images_per_step < 1:
            raise ConfigurationError("images per step must be >= 1")
        if self.beta_cadence not in ("step", "epoch"):
            raise ConfigurationError("beta_cadence must be 'step' or 'epoch'")
        if self.fusion not in ("nms", "average"):
            raise ConfigurationError("fusion must be 'nms' or 'average'")
        if self.grl_warmup_steps < 0:
            raise ConfigurationError("grl_warmup_steps must be >= 0")
        if self.grad_clip < 0:
            raise ConfigurationError("grad_clip must be >= 0 (0 disables clipping)")
        if self.grl_scale <= 0:
            raise ConfigurationError("grl_scale must be > 0")

    # -- plain-text key = value files -------------------------------------

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        values = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values: Dict[str, str]) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in fields:
                raise ConfigurationError(f"unknown config key {key!r}")
            default = fields[key].default
            try:
                if isinstance(default, bool):
                    if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(value)
                    kwargs[key] = value.lower() in ("true", "1", "yes")
                elif isinstance(default, tuple):
                    kwargs[key] = tuple(int(v) for v in value.replace(",", " ").split())
                elif isinstance(default, int):
                    kwargs[key] = int(value)
                elif isinstance(default, float):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = value
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key}: {value!r}") from exc
        return cls(**kwargs)

    def to_file(self, path):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        Path(path).write_text("\n".join(lines) + "\n")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["source_domains"] = list(self.source_domains)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # -- derived layout ---------------------------------------------------

    @property
    def groups(self) -> List[tuple]:
        """Domain ids feeding each supervised branch."""
        if self.method == "dmsn":
            return [(d,) for d in self.source_domains]
        if self.method == "oracle":
            return [(self.target_domain,)]
        return [tuple(self.source_domains)]

    @property
    def uses_alignment(self) -> bool:
        return self.method in ("dmsn", "single_da")

    @property
    def uses_pseudo(self) -> bool:
        return self.method == "dmsn"


@dataclass
class TrainState:
    step: int = 0
    faults: int = 0
    pseudo_initialized: bool = False
    beta: List[float] = field(default_factory=list)
    probe_history: List[tuple] = field(default_factory=list)

    def epoch(self, steps_per_epoch: int) -> int:
        return self.step // steps_per_epoch


@dataclass
class Batch:
    sources: List[List[ImageSample]]
    target: List[ImageSample]


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base_lr`` at step 0 towards 0 at ``total_steps``."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


class Trainer:
    """Owns the detector, discriminators, optimizer and loss memory bank for one run."""

    def __init__(self, config: TrainConfig, dataset, num_classes: Optional[int] = None):
        self.config = config
        self.dataset = dataset
        groups = config.groups
        needed = {d for g in groups for d in g}
        if config.method != "oracle":
            needed.add(config.target_domain)
        missing = needed - set(dataset)
        if missing:
            raise ConfigurationError(f"dataset lacks domains {sorted(missing)}")
        if num_classes is None:
            num_classes = len(dataset.classes) if hasattr(dataset, "classes") else 1 + max(
                (b.class_id for d in needed for s in dataset[d] for b in s.boxes), default=0
            )
        self.num_classes = num_classes
        self.groups = groups
        self.M = len(groups)
        sample = dataset[groups[0][0]][0]
        self.image_size = (sample.height, sample.width)

        self.model = SpindleDetector(
            num_classes, self.M, with_pseudo=config.uses_pseudo, image_size=self.image_size,
            seed=config.seed, branch_init=config.branch_init,
        )
        if config.uses_pseudo:
            for p in self.model.branch(self.model.pseudo_id).parameters():
                p.requires_grad_(False)
        self.gate = GrlGate(config.grl_scale)
        if config.uses_alignment:
            gen = torch.Generator().manual_seed(config.seed + 1)
            self.d_low = LowLevelDiscriminator(LOW_CHANNELS, self.M + 1)
            self.d_high = nn.ModuleList([HighLevelDiscriminator(HIGH_CHANNELS) for _ in range(self.M)])
            init_uniform_fan_in(self.d_low, gen, heads=self.d_low.output_layers)
            for d in self.d_high:
                init_uniform_fan_in(d, gen, heads=d.output_layers)
        else:
            self.d_low = None
            self.d_high = None
        self.params = self._trainable_params()
        self.optimizer = torch.optim.SGD(
            list(self.params.values()), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
        )
        self.bank = LossMemoryBank(self.M, config.lmb_capacity)
        self.state = TrainState(beta=[1.0 / self.M] * self.M)
        self._split_pools()

    # -- setup --------------------------------------------------------------

    def _trainable_params(self) -> Dict[str, nn.Parameter]:
        out = {}
        for name, p in self.model.g1.named_parameters():
            out["g1/" + name.replace(".", "/")] = p
        for i in range(self.M):
            for name, p in self.model.branches[i].named_parameters():
                out[f"branch{i}/" + name.replace(".", "/")] = p
        if self.d_low is not None:
            for name, p in self.d_low.named_parameters():
                out["d_low/" + name.replace(".", "/")] = p
            for i, d in enumerate(self.d_high):
                for name, p in d.named_parameters():
                    out[f"d_high{i}/" + name.replace(".", "/")] = p
        return out

    def _split_pools(self):
        cfg = self.config
        reserve = cfg.probe_images if (cfg.uses_alignment and cfg.probe_every > 0) else 0
        self.probe: Dict[int, List[ImageSample]] = {}
        train: Dict[int, List[ImageSample]] = {}
        domains = {d for g in self.groups for d in g}
        if cfg.method != "oracle":
            domains.add(cfg.target_domain)
        for d in sorted(domains):
            samples = list(self.dataset[d])
            if reserve and len(samples) > reserve:
                self.probe[d] = samples[-reserve:]
                samples = samples[:-reserve]
            train[d] = samples
        self.pools = [[s for d in g for s in train[d]] for g in self.groups]
        self.target_pool = [] if cfg.method == "oracle" else [s.unlabeled() for s in train[cfg.target_domain]]
        per_domain = max(len(train[d]) for g in self.groups for d in g)
        self.steps_per_epoch = cfg.steps_per_epoch or max(1, per_domain // cfg.source_images_per_step)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        # every method sees the same number of labeled images per step
        n_labeled = cfg.source_images_per_step * len(cfg.source_domains)
        self.images_per_group = [max(1, n_labeled // self.M)] * self.M

    # -- batching -----------------------------------------------------------

    def _pool_indices(self, stream: int, pool_size: int, k: int, step: int) -> List[int]:
        out = []
        for j in range(k):
            pos = step * k + j
            cycle, offset = divmod(pos, pool_size)
            perm = np.random.default_rng([self.config.seed, 17, stream, cycle]).permutation(pool_size)
            out.append(int(perm[offset]))
        return out

    def batch_for_step(self, step: int) -> Batch:
        """Deterministic batch for a global step; a pure function of (seed, step)."""
        sources = []
        for g, pool in enumerate(self.pools):
            idx = self._pool_indices(g, len(pool), self.images_per_group[g], step)
            sources.append([pool[i] for i in idx])
        target = []
        if self.target_pool:
            idx = self._pool_indices(1000, len(self.target_pool), self.config.target_images_per_step, step)
            target = [self.target_pool[i] for i in idx]
        return Batch(sources, target)

    @property
    def phase(self) -> int:
        return 2 if self.state.epoch(self.steps_per_epoch) >= self.config.phase2_start_epoch else 1

    def gate_for_step(self, step: Optional[int] = None) -> GrlGate:
        """GRL gate in force at ``step``: linear ramp over ``grl_warmup_steps``, then ``grl_scale``."""
        step = self.state.step if step is None else step
        warm = self.config.grl_warmup_steps
        if warm <= 0 or step >= warm:
            return self.gate
        return GrlGate(self.config.grl_scale * (step + 1) / warm)

    def current_lr(self, step: Optional[int] = None) -> float:
        step = self.state.step if step is None else step
        return cosine_lr(self.config.lr, step, self.total_steps)

    # -- objective ------------------------------------------------------------

    def compute_terms(self, batch: Batch, phase: int, rng: np.random.Generator) -> Dict[str, torch.Tensor]:
        """Every loss component for one batch, as tensors (not yet weighted)."""
        cfg, model = self.config, self.model
        gate = self.gate_for_step()
        if any(b.boxes for b in batch.target):
            raise PreconditionError("target images must be unlabeled")
        flat = [im for g in batch.sources for im in g] + list(batch.target)
        low = model.extract_low(flat)
        acts = low.activations
        bounds, start = [], 0
        for g in batch.sources:
            bounds.append(slice(start, start + len(g)))
            start += len(g)
        tgt = slice(start, start + len(batch.target))
        low_target = FeatureMap(acts[tgt], low.stride)

        zero = acts.new_zeros(())
        terms: Dict[str, torch.Tensor] = {k: zero for k in ("rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg")}
        highs = []
        for g, images in enumerate(batch.sources):
            outs = model.forward_branch(
                g, FeatureMap(acts[bounds[g]], low.stride), [im.boxes for im in images], rng, cfg.n_proposals
            )
            for o, im in zip(outs, images):
                dl = detection_loss(o, im.boxes, rng)
                for k in ("rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg"):
                    terms[k] = terms[k] + getattr(dl, k)
            highs.append(torch.cat([o.high_feature.activations for o in outs]))
        terms["det"] = terms["rpn_cls"] + terms["rpn_reg"] + terms["rcnn_cls"] + terms["rcnn_reg"]

        terms["low"] = zero
        terms["high"] = zero
        terms["con"] = zero
        target_high = []
        if cfg.uses_alignment and batch.target:
            d_map = self.d_low(grl_apply(gate, acts))
            src_losses = [low_level_source_loss(d_map[bounds[g]], g) for g in range(self.M)]
            terms["low"] = low_level_total_loss(src_losses, low_level_target_loss(d_map[tgt]))
            for g in range(self.M):
                t_high = model.extract_high(g, low_target)
                target_high.append(t_high)
                ds = self.d_high[g](grl_apply(gate, highs[g]))
                dt = self.d_high[g](grl_apply(gate, t_high.activations))
                terms[f"high_{g}"] = high_level_domain_loss(ds, dt, cfg.gamma)
                terms["high"] = terms["high"] + terms[f"high_{g}"]

        if phase == 2 and cfg.uses_pseudo and batch.target:
            with torch.no_grad():
                p_high = model.extract_high(model.pseudo_id, FeatureMap(low_target.activations.detach(), low.stride))
                pseudo_sets = model.rpn_forward(model.pseudo_id, p_high, cfg.n_proposals)
            src_logits = []
            for g in range(self.M):
                t_high = target_high[g] if target_high else model.extract_high(g, low_target)
                logits, deltas = model.rpn_head(g, t_high)
                anchors = model.anchors(*t_high.activations.shape[-2:])
                sets = [model.select_proposals(logits[j], deltas[j], anchors, cfg.n_proposals) for j in range(len(logits))]
                src_logits.append((logits, sets))
            surrogate, discrete, overlap = zero, 0.0, 0.0
            for j, pseudo in enumerate(pseudo_sets):
                sets = [s[1][j] for s in src_logits]
                matches = [match_proposals(s, pseudo) for s in sets]
                surrogate = surrogate + consistency_surrogate([s[0][j] for s in src_logits], sets, pseudo, matches)
                discrete += consistency_loss(sets, pseudo)
                overlap += mean_overlap(matches)
            n = len(pseudo_sets)
            terms["con"] = surrogate / n
            terms["con_discrete"] = torch.tensor(discrete / n)
            terms["con_mean_overlap"] = torch.tensor(overlap / n)
        terms["total"] = terms["det"] + cfg.lambda_tradeoff * (terms["low"] + terms["high"] + terms["con"])
        return terms

    # -- steps ----------------------------------------------------------------

    def _step_rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, 29, step])

    def _optimize(self, total: torch.Tensor, lr: float):
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.config.grad_clip > 0:
            nn.utils.clip_grad_norm_(list(self.params.values()), self.config.grad_clip)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()

    def _run_step(self, batch: Batch, phase: int) -> dict:
        step = self.state.step
        lr = self.current_lr(step)
        self.model.train()
        row = {"t": step, "epoch": self.state.epoch(self.steps_per_epoch), "phase": phase, "lr": lr, "fault": 0}
        try:
            if phase == 2 and self.config.uses_pseudo and not self.state.pseudo_initialized:
                self._enter_phase2()
            terms = self.compute_terms(batch, phase, self._step_rng(step))
            values = {k: float(v.detach()) for k, v in terms.items()}
            if not all(math.isfinite(v) for v in values.values()):
                raise NumericFaultError(f"non-finite loss at step {step}: {values}")
            self._optimize(terms["total"], lr)
            if self.config.uses_alignment:
                for g in range(self.M):
                    self.bank.push(g, values[f"high_{g}"])
            self.bank.step = step + 1
            row.update(values)
            if phase == 2 and self.config.uses_pseudo:
                row["ema_residual"] = self._psl_update(step)
        except NumericFaultError as exc:
            self.state.faults += 1
            row["fault"] = 1
            log.warning("step %d skipped: %s", step, exc)
        means = self.bank.means()
        for g in range(self.M):
            row[f"V_{g}"] = float(means[g])
            row[f"beta_{g}"] = float(self.state.beta[g])
        self.state.step += 1
        return row

    def train_step_phase1(self, batch: Batch) -> dict:
        if self.phase != 1:
            raise PreconditionError("train_step_phase1 called outside phase 1")
        return self._run_step(batch, 1)

    def train_step_phase2(self, batch: Batch) -> dict:
        if self.phase != 2:
            raise PreconditionError("train_step_phase2 called outside phase 2")
        return self._run_step(batch, 2)

    def step(self) -> dict:
        """Train on the scheduled batch for the current step, in whichever phase applies."""
        batch = self.batch_for_step(self.state.step)
        row = self.train_step_phase2(batch) if self.phase == 2 else self.train_step_phase1(batch)
        cfg = self.config
        if cfg.uses_alignment and cfg.probe_every > 0 and self.probe and (self.state.step % cfg.probe_every == 0):
            acc = self.probe_accuracy()
            self.state.probe_history.append((self.state.step, acc))
            row["probe_acc"] = acc
        return row

    # -- PSL ------------------------------------------------------------------

    def source_param_sets(self) -> List[Dict[str, torch.Tensor]]:
        return [{k: p.detach() for k, p in self.model.branch_params(g).items()} for g in range(self.M)]

    def pseudo_param_set(self) -> Dict[str, torch.Tensor]:
        return {k: p.detach() for k, p in self.model.branch_params(self.model.pseudo_id).items()}

    def _write_pseudo(self, values: Dict[str, torch.Tensor]):
        with torch.no_grad():
            for k, p in self.model.branch_params(self.model.pseudo_id).items():
                p.copy_(values[k])

    def _enter_phase2(self):
        beta = compute_beta(self.bank.means())
        self.state.beta = [float(b) for b in beta.beta]
        self._write_pseudo(init_pseudo(self.source_param_sets(), beta.beta))
        self.state.pseudo_initialized = True
        log.info("phase 2 entered at step %d with beta=%s", self.state.step, self.state.beta)

    def _psl_update(self, step: int) -> float:
        cfg = self.config
        if cfg.beta_cadence == "step" or step % self.steps_per_epoch == 0:
            self.state.beta = [float(b) for b in compute_beta(self.bank.means()).beta]
        sources = self.source_param_sets()
        self._write_pseudo(ema_update(self.pseudo_param_set(), sources, self.state.beta, cfg.alpha_ema))
        return residual_norm(self.pseudo_param_set(), sources, self.state.beta)

    # -- probe ----------------------------------------------------------------

    @torch.no_grad()
    def probe_accuracy(self) -> float:
        """Per-location accuracy of the low-level discriminator on held-out images."""
        if self.d_low is None or not self.probe:
            raise PreconditionError("no low-level discriminator or probe set")
        self.model.eval()
        correct, count = 0.0, 0
        labelled = [(g, d) for g, group in enumerate(self.groups) for d in group]
        labelled.append((self.M, self.config.target_domain))
        for channel, d in labelled:
            if d not in self.probe:
                continue
            d_map = self.d_low(self.model.extract_low(self.probe[d]).activations)
            n = d_map.shape[0] * d_map.shape[2] * d_map.shape[3]
            correct += domain_accuracy(d_map, channel) * n
            count += n
        self.model.train()
        return correct / count

    # -- checkpoints ----------------------------------------------------------

    def arrays(self) -> Dict[str, np.ndarray]:
        out = self.model.param_arrays()
        if self.d_low is not None:
            for name, p in self.d_low.named_parameters():
                out["d_low/" + name.replace(".", "/")] = p.detach().numpy().copy()
            for i, d in enumerate(self.d_high):
                for name, p in d.named_parameters():
                    out[f"d_high{i}/" + name.replace(".", "/")] = p.detach().numpy().copy()
        return out

    def save_checkpoint(self, path) -> Path:
        arrays = self.arrays()
        for key, p in self.params.items():
            buf = self.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                arrays["optim/" + key] = buf.detach().numpy().copy()
        meta = {
            "model": self.model.metadata(),
            "config": self.config.to_dict(),
            "classes": list(getattr(self.dataset, "classes", [])) or [str(c) for c in range(self.num_classes)],
            "groups": [list(g) for g in self.groups],
            "state": {
                "step": self.state.step,
                "faults": self.state.faults,
                "pseudo_initialized": self.state.pseudo_initialized,
                "beta": self.state.beta,
                "probe_history": [list(x) for x in self.state.probe_history],
            },
            "bank": self.bank.state_dict(),
            "steps_per_epoch": self.steps_per_epoch,
            "total_steps": self.total_steps,
        }
        return ckpt.save_archive(path, arrays, meta)

    def load_checkpoint(self, path):
        arrays, meta = ckpt.load_archive(path)
        if meta["model"]["num_classes"] != self.num_classes or meta["model"]["num_sources"] != self.M:
            raise CheckpointError("checkpoint does not match this trainer's class or branch count")
        saved = TrainConfig.from_dict(meta["config"])
        for key in ("method", "source_domains", "target_domain", "seed", "epochs", "n_proposals"):
            if getattr(saved, key) != getattr(self.config, key):
                raise CheckpointError(f"checkpoint config differs in {key!r}; cannot resume")
        try:
            self.model.load_param_arrays(arrays)
            with torch.no_grad():
                if self.d_low is not None:
                    for name, p in self.d_low.named_parameters():
                        p.copy_(torch.from_numpy(arrays["d_low/" + name.replace(".", "/")]))
                    for i, d in enumerate(self.d_high):
                        for name, p in d.named_parameters():
                            p.copy_(torch.from_numpy(arrays[f"d_high{i}/" + name.replace(".", "/")]))
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks array {exc}") from exc
        self.optimizer.state.clear()
        for key, p in self.params.items():
            if "optim/" + key in arrays:
                self.optimizer.state[p] = {"momentum_buffer": torch.from_numpy(arrays["optim/" + key].copy())}
        st = meta["state"]
        self.state = TrainState(
            step=int(st["step"]),
            faults=int(st["faults"]),
            pseudo_initialized=bool(st["pseudo_initialized"]),
            beta=[float(b) for b in st["beta"]],
            probe_history=[tuple(x) for x in st["probe_history"]],
        )
        self.bank = LossMemoryBank.from_state_dict(meta["bank"])

    def checksum(self) -> str:
        return ckpt.arrays_checksum(self.arrays())


@dataclass
class RunResult:
    checkpoint: Path
    log_path: Path
    summary: dict
    trainer: Trainer


def _load_train_data(config: TrainConfig):
    from .synth_data import load_dataset

    if not config.train_data:
        raise ConfigurationError("config.train_data is empty and no dataset was given")
    return load_dataset(config.train_data)


def run_training(
    config: TrainConfig,
    out_dir,
    dataset=None,
    resume=None,
    max_steps: Optional[int] = None,
    checkpoint_every_epoch: bool = True,
) -> RunResult:
    """Full schedule with cosine decay, per-epoch checkpoints, CSV step log and JSON summary.

    ``max_steps`` stops early (used to create resumable mid-run checkpoints).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else _load_train_data(config)
    trainer = Trainer(config, dataset)
    if resume is not None:
        trainer.load_checkpoint(resume)
    fieldnames = (
        ["t", "epoch", "phase", "lr", "fault", "total", "det", "rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg", "low", "high"]
        + [f"high_{g}" for g in range(trainer.M)]
        + ["con", "con_discrete", "con_mean_overlap"]
        + [f"V_{g}" for g in range(trainer.M)]
        + [f"beta_{g}" for g in range(trainer.M)]
        + ["ema_residual", "probe_acc"]
    )
    log_path = out / "log.csv"
    fresh = resume is None or not log_path.exists()
    started = time.time()
    end = trainer.total_steps if max_steps is None else min(trainer.total_steps, trainer.state.step + max_steps)
    with open(log_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        if fresh:
            writer.writeheader()
        while trainer.state.step < end:
            row = trainer.step()
            writer.writerow(row)
            if checkpoint_every_epoch and trainer.state.step % trainer.steps_per_epoch == 0:
                epoch = trainer.state.step // trainer.steps_per_epoch
                trainer.save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}.npz")
    final = trainer.save_checkpoint(out / "final.npz")
    fault_rate = trainer.state.faults / max(1, trainer.state.step)
    summary = {
        "status": "failed" if fault_rate > 0.01 else "ok",
        "steps": trainer.state.step,
        "total_steps": trainer.total_steps,
        "steps_per_epoch": trainer.steps_per_epoch,
        "faults": trainer.state.faults,
        "fault_rate": fault_rate,
        "final_beta": trainer.state.beta,
        "probe_history": [list(x) for x in trainer.state.probe_history],
        "checksum": trainer.checksum(),
        "config": config.to_dict(),
        "config_fingerprint": config.fingerprint(),
        "wall_seconds": time.time() - started,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return RunResult(final, log_path, summary, trainer)

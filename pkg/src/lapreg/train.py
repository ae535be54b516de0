"""Training loop, pairwise registration, and evaluation orchestration.

Training is fully determined by (config.seed, dataset, machine
arithmetic): parameters are initialized from the seed, pairs are visited
cyclically in dataset order, and the optimizer is a plain Adam update
with bias correction. Per-step loss breakdowns are returned and, when a
log path is configured, appended as line-delimited JSON records.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, NonFiniteLossError, ValidationError
from .grid import DisplacementField, Volume, warp_labels
from .io import PreprocessSpec, load_checkpoint, load_labels, load_volume, preprocess, \
    preprocess_labels, save_checkpoint, save_field, save_labels, save_volume
from .losses import LossWeights, total_loss
from .metrics import LabelMap, MetricsReport, evaluate_pair
from .network import RegistrationNetwork

__all__ = [
    "TrainConfig", "Adam", "build_model", "train",
    "register_pair", "register", "evaluate",
    "model_state", "load_model",
]


@dataclass
class TrainConfig:
    """Hyperparameters and bookkeeping paths for a training run.

    ``widths`` are encoder channels for levels 1..5 (fine first);
    ``heads`` are attention head counts for levels 5..1 (deep first).
    """

    steps: int = 1000
    learning_rate: float = 1e-4
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 1.0
    beta: float = 1.0
    widths: tuple = (8, 16, 32, 48, 48)
    heads: tuple = (8, 4, 2, 1, 1)
    neighborhood: int = 3
    head_dim: int = 6
    ncc_window: int = 9
    seed: int = 0
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    ckpt_path: str = ""
    log_path: str = ""
    device: str = "cpu"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.heads = tuple(int(h) for h in self.heads)
        if self.learning_rate <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValidationError(f"steps must be >= 0, got {self.steps}")
        if any(h < 1 for h in self.heads):
            raise ValidationError(f"head counts must be positive, got {self.heads}")
        if self.neighborhood % 2 != 1 or self.neighborhood < 1:
            raise ValidationError(f"neighborhood must be odd, got {self.neighborhood}")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("loss weights must be nonnegative")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Small preset that trains in minutes on a CPU (32 cubed volumes)."""
        defaults = dict(widths=(4, 8, 16, 16, 16))
        defaults.update(overrides)
        return cls(**defaults)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["widths"] = list(self.widths)
        out["heads"] = list(self.heads)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in known}
        return cls(**kwargs)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)


class Adam:
    """First-order adaptive-moment update with bias correction.

    Implemented directly (rather than via a framework optimizer) so the
    moment tensors serialize into the framework-independent checkpoint
    container under stable parameter names.
    """

    def __init__(self, params: dict[str, torch.nn.Parameter], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.exp_avg = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1**self.step_count
        bias2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m.mul_(self.beta1).add_(p.grad, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(p.grad, p.grad, value=1.0 - self.beta2)
            denom = (v / bias2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / bias1)

    def state_arrays(self) -> dict:
        return {
            "step": self.step_count,
            "exp_avg": {k: t.detach().cpu().numpy().copy() for k, t in self.exp_avg.items()},
            "exp_avg_sq": {k: t.detach().cpu().numpy().copy() for k, t in self.exp_avg_sq.items()},
        }

    def load_state_arrays(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for group, target in (("exp_avg", self.exp_avg), ("exp_avg_sq", self.exp_avg_sq)):
            for name, arr in state[group].items():
                if name not in target:
                    raise CheckpointError(f"optimizer state has unknown tensor {name}")
                target[name].copy_(torch.from_numpy(arr))


def build_model(config: TrainConfig) -> RegistrationNetwork:
    """Seeded construction so two runs start from identical parameters."""
    torch.manual_seed(config.seed)
    model = RegistrationNetwork(
        config.widths, config.heads, config.neighborhood, config.head_dim
    )
    return model.to(config.device)


def model_state(model: RegistrationNetwork, config: TrainConfig, step: int,
                optimizer: Adam | None = None) -> dict:
    state = {
        "step": int(step),
        "config": config.to_dict(),
        "params": {
            name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()
        },
    }
    if optimizer is not None:
        state["optimizer"] = optimizer.state_arrays()
    return state


def load_model(ckpt_path) -> tuple[RegistrationNetwork, TrainConfig, dict]:
    """Rebuild a network from a checkpoint; returns (model, config, raw state)."""
    state = load_checkpoint(ckpt_path)
    config = TrainConfig.from_dict(state["config"])
    model = build_model(config)
    named = dict(model.named_parameters())
    saved = state["params"]
    if set(named) != set(saved):
        missing = sorted(set(named) ^ set(saved))
        raise CheckpointError(f"checkpoint parameters do not match the model: {missing[:5]}")
    with torch.no_grad():
        for name, p in named.items():
            arr = torch.from_numpy(saved[name])
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"checkpoint tensor {name} has shape {tuple(arr.shape)}, "
                    f"expected {tuple(p.shape)}"
                )
            p.copy_(arr)
    return model, config, state


def _pair_tensors(pairs, device) -> list[tuple[torch.Tensor, torch.Tensor]]:
    tensors = []
    for pair in pairs:
        moving = pair[0] if isinstance(pair, (tuple, list)) else pair.moving
        fixed = pair[1] if isinstance(pair, (tuple, list)) else pair.fixed
        tensors.append(
            (
                torch.from_numpy(moving.data.astype(np.float32, copy=False))[None].to(device),
                torch.from_numpy(fixed.data.astype(np.float32, copy=False))[None].to(device),
            )
        )
    return tensors


def train(config: TrainConfig, pairs, *, resume: dict | None = None,
          progress: bool = False):
    """Optimize the network on moving/fixed pairs; returns (model, trace).

    ``pairs`` is a sequence of objects with ``moving``/``fixed`` Volume
    attributes (e.g. SynthPair) or plain (moving, fixed) tuples. The trace
    holds one record per step with the loss breakdown. A non-finite loss
    or parameter aborts with the offending step and term named.
    """
    if len(pairs) < 1:
        raise ValidationError("training requires at least one pair")
    model = build_model(config)
    optimizer = Adam(dict(model.named_parameters()), config.learning_rate,
                     config.beta1, config.beta2, config.eps)
    start_step = 0
    if resume is not None:
        named = dict(model.named_parameters())
        with torch.no_grad():
            for name, arr in resume["params"].items():
                named[name].copy_(torch.from_numpy(arr))
        if resume.get("optimizer") is not None:
            optimizer.load_state_arrays(resume["optimizer"])
        start_step = int(resume["step"])

    tensors = _pair_tensors(pairs, config.device)
    weights = config.loss_weights()
    log_file = open(config.log_path, "a") if config.log_path else None
    trace = []
    try:
        for step in range(start_step, config.steps):
            optimizer.zero_grad()
            sums = {"ncc": 0.0, "reg": 0.0, "orth": 0.0, "total": 0.0}
            for b in range(config.batch_size):
                moving, fixed = tensors[(step * config.batch_size + b) % len(tensors)]
                result = model(moving, fixed)
                total, terms = total_loss(fixed, moving, result, weights, config.ncc_window)
                (total / config.batch_size).backward()
                for key in sums:
                    sums[key] += terms[key].detach().item() / config.batch_size
            for key, value in sums.items():
                if not math.isfinite(value):
                    raise NonFiniteLossError(step + 1, key, value)
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            for name, p in model.named_parameters():
                if not torch.isfinite(p).all():
                    raise NonFiniteLossError(step + 1, f"parameter {name}", float("nan"))
            record = {"step": step + 1, **{k: sums[k] for k in ("ncc", "reg", "orth", "total")}}
            trace.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if progress and (step + 1) % 50 == 0:
                print(f"step {step + 1}/{config.steps}  total {sums['total']:+.4f}  "
                      f"ncc {sums['ncc']:+.4f}")
            if (
                config.ckpt_path
                and config.checkpoint_every > 0
                and (step + 1) % config.checkpoint_every == 0
            ):
                save_checkpoint(model_state(model, config, step + 1, optimizer), config.ckpt_path)
    finally:
        if log_file is not None:
            log_file.close()
    if config.ckpt_path:
        save_checkpoint(model_state(model, config, config.steps, optimizer), config.ckpt_path)
    return model, trace


def register_pair(model: RegistrationNetwork, moving: Volume, fixed: Volume):
    """Register one preprocessed pair; returns (warped volume, field)."""
    if moving.shape != fixed.shape:
        raise ValidationError(
            f"moving {moving.shape} and fixed {fixed.shape} must share a grid; "
            "preprocess them to a common shape first"
        )
    device = next(model.parameters()).device
    m = torch.from_numpy(moving.data.astype(np.float32, copy=False))[None].to(device)
    f = torch.from_numpy(fixed.data.astype(np.float32, copy=False))[None].to(device)
    warped_t, flow_t = model.register(m, f)
    warped = Volume(warped_t[0].cpu().numpy(), moving.spacing)
    field = DisplacementField(np.moveaxis(flow_t.cpu().numpy(), 0, -1), moving.spacing)
    return warped, field


def _common_target_shape(*shapes) -> tuple[int, int, int]:
    target = []
    for axis in range(3):
        extent = max(s[axis] for s in shapes)
        target.append(((extent + 15) // 16) * 16)
    return tuple(target)


def register(moving_path, fixed_path, ckpt_path, out_dir, moving_labels_path=None):
    """File-level registration: preprocess, predict, write outputs.

    Writes ``warped.nii.gz`` and ``field.nii.gz`` (plus
    ``warped_labels.nii.gz`` when labels are given) under ``out_dir`` and
    reports the wall-clock registration time.
    """
    model, _config, _state = load_model(ckpt_path)
    moving = load_volume(moving_path)
    fixed = load_volume(fixed_path)
    spec = PreprocessSpec(_common_target_shape(moving.shape, fixed.shape))
    moving_p = preprocess(moving, spec)
    fixed_p = preprocess(fixed, spec)

    start = time.perf_counter()
    warped, field = register_pair(model, moving_p, fixed_p)
    elapsed = time.perf_counter() - start

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {"warped": out_dir / "warped.nii.gz", "field": out_dir / "field.nii.gz"}
    save_volume(warped, outputs["warped"])
    save_field(field, outputs["field"])
    if moving_labels_path is not None:
        labels = preprocess_labels(load_labels(moving_labels_path), spec)
        warped_labels = LabelMap(warp_labels(labels.data, field))
        outputs["warped_labels"] = out_dir / "warped_labels.nii.gz"
        save_labels(warped_labels, outputs["warped_labels"], moving.spacing)
    print(f"registration time: {elapsed:.3f} s")
    return outputs, elapsed


def _report_row(name: str, dsc_pct: float, assd_val: float, jac_pct) -> str:
    jac = "/" if jac_pct is None else f"{jac_pct:.4f}"
    return f"{name:>10} | {dsc_pct:10.2f} | {assd_val:10.4f} | {jac:>12}"


def evaluate(manifest_path, ckpt_path, out_path=None):
    """Register and score every pair of a dataset manifest.

    Emits a table with the DSC (%) | ASSD | %|J(phi)|<0 column layout,
    one row per pair plus the unregistered baseline and the mean. Pair
    failures are recorded and evaluation continues; the returned status is
    0 only if every pair succeeded.
    """
    from .synth import load_dataset

    model, _config, _state = load_model(ckpt_path)
    pairs, _manifest = load_dataset(manifest_path)
    rows = []
    failures = []
    reports: list[MetricsReport] = []
    initial: list[MetricsReport] = []
    for index, pair in enumerate(pairs):
        try:
            _warped, field = register_pair(model, pair.moving, pair.fixed)
            warped_labels = warp_labels(pair.moving_labels.data, field)
            report = evaluate_pair(pair.fixed_labels, warped_labels, field)
            zero = DisplacementField.zeros(pair.moving.shape)
            initial.append(evaluate_pair(pair.fixed_labels, pair.moving_labels, zero))
            reports.append(report)
            rows.append((f"pair_{index:03d}", report))
        except Exception as exc:  # noqa: BLE001 - per-pair isolation is the contract
            failures.append((index, f"{type(exc).__name__}: {exc}"))

    lines = [f"{'pair':>10} | {'DSC (%)':>10} | {'ASSD':>10} | {'%|J(phi)|<0':>12}"]
    if initial:
        lines.append(
            _report_row(
                "initial",
                100.0 * float(np.mean([r.mean_dsc for r in initial])),
                float(np.mean([r.mean_assd for r in initial])),
                None,
            )
        )
    for name, report in rows:
        lines.append(
            _report_row(name, 100.0 * report.mean_dsc, report.mean_assd,
                        100.0 * report.neg_jac_fraction)
        )
    if reports:
        lines.append(
            _report_row(
                "mean",
                100.0 * float(np.mean([r.mean_dsc for r in reports])),
                float(np.mean([r.mean_assd for r in reports])),
                100.0 * float(np.mean([r.neg_jac_fraction for r in reports])),
            )
        )
    for index, message in failures:
        lines.append(f"FAILED pair_{index:03d}: {message}")
    text = "\n".join(lines) + "\n"
    if out_path is not None:
        Path(out_path).write_text(text)
    status = 0 if not failures else 2
    return text, reports, status

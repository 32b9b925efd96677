"""Training loop: batching, objectives, EMA tracking, exact-resume checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from .conditioning import ConditionBundle, condition_bands, make_condition
from .datasim import FusionSample, load_sample
from .denoiser import (Checkpoint, Denoiser, DenoiserConfig, config_from_dict,
                       config_to_dict, load_checkpoint, load_numpy_state,
                       save_checkpoint, state_to_numpy)
from .diffusion import PREDICTION_KINDS, Prediction, simple_loss
from .metrics import MetricConfig, evaluate_reference
from .sampler import SamplerPlan, make_plan, sample as run_sampler
from .schedule import NoiseSchedule, cosine_schedule
from .tensorio import DatasetManifest, load_manifest


class TrainingDiverged(RuntimeError):
    """Loss left the finite range; details are in the diagnostic dump."""


@dataclass
class TrainConfig:
    objective: str = "x0"
    loss: str = "l1"
    residual: bool = True
    iterations: int = 3000
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.0
    ema_decay: float = 0.995
    timesteps: int = 500
    schedule_offset: float = 8e-3
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    use_style_mod: bool = True
    use_wavelet_mod: bool = True
    wavelet_merge: str = "concat"
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.objective not in PREDICTION_KINDS:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")

    def denoiser_config(self, in_bands: int) -> DenoiserConfig:
        return DenoiserConfig(
            in_bands=in_bands,
            base_channels=self.base_channels,
            channel_multipliers=tuple(self.channel_multipliers),
            prediction_kind=self.objective,
            use_style_mod=self.use_style_mod,
            use_wavelet_mod=self.use_wavelet_mod,
            wavelet_merge=self.wavelet_merge,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["channel_multipliers"] = tuple(d["channel_multipliers"])
        return cls(**d)


class EMA:
    """Exponential average of parameters, tracked as a detached shadow copy."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for k, p in model.state_dict().items():
            s = self.shadow[k]
            s.copy_(p + self.decay * (s - p))

    def state_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.cpu().numpy().copy() for k, v in self.shadow.items()}

    def load_numpy(self, state: dict[str, np.ndarray]) -> None:
        self.shadow = {k: torch.from_numpy(np.ascontiguousarray(v)).clone()
                       for k, v in state.items()}


@dataclass
class ArrayDataset:
    """Whole dataset resident in memory, stacked along the first axis."""

    pan: np.ndarray
    lrms_up: np.ndarray
    gt: np.ndarray
    bands: np.ndarray

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "ArrayDataset":
        pans, lrs, gts = [], [], []
        for i, entry in enumerate(manifest.entries):
            s = load_sample(entry)
            if s.gt is None:
                raise ValueError(f"entry {i} has no gt; training needs references")
            pans.append(s.pan)
            lrs.append(s.lrms_up)
            gts.append(s.gt)
        pan = np.stack(pans)
        lrms_up = np.stack(lrs)
        bands = condition_bands(pan, lrms_up).astype(np.float32)
        return cls(pan=pan, lrms_up=lrms_up, gt=np.stack(gts), bands=bands)

    def __len__(self) -> int:
        return self.pan.shape[0]


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7901, epoch]).permutation(n)


def batch_indices(seed: int, n: int, batch_size: int, step: int) -> np.ndarray:
    """Deterministic sample indices for 1-based step; epochs are seeded
    permutations and batches may straddle an epoch boundary."""
    start = (step - 1) * batch_size
    idx = []
    while len(idx) < batch_size:
        epoch, off = divmod(start + len(idx), n)
        order = _epoch_order(seed, epoch, n)
        take = min(batch_size - len(idx), n - off)
        idx.extend(order[off:off + take].tolist())
    return np.asarray(idx)


def smoothed_loss(losses: list[float], at: int, window: int = 100) -> float:
    """Mean over the trailing window ending at 1-based step ``at``."""
    if not 1 <= at <= len(losses):
        raise ValueError(f"step {at} outside recorded range 1..{len(losses)}")
    return float(np.mean(losses[max(0, at - window):at]))


def _optimizer_to_numpy(opt: torch.optim.Optimizer,
                        model: torch.nn.Module) -> dict:
    names = {id(p): k for k, p in model.named_parameters()}
    state = {}
    for p, st in opt.state.items():
        k = names[id(p)]
        step = st["step"]
        state[k] = {
            "step": float(step.item()) if torch.is_tensor(step) else float(step),
            "exp_avg": st["exp_avg"].cpu().numpy().copy(),
            "exp_avg_sq": st["exp_avg_sq"].cpu().numpy().copy(),
        }
    return {"kind": "adamw", "state": state}


def _optimizer_from_numpy(opt: torch.optim.Optimizer, model: torch.nn.Module,
                          rec: dict) -> None:
    params = dict(model.named_parameters())
    for k, st in rec["state"].items():
        p = params[k]
        opt.state[p] = {
            "step": torch.tensor(float(st["step"])),
            "exp_avg": torch.from_numpy(np.ascontiguousarray(st["exp_avg"])).clone(),
            "exp_avg_sq": torch.from_numpy(np.ascontiguousarray(st["exp_avg_sq"])).clone(),
        }


def _build_batch(data: ArrayDataset, idx: np.ndarray, cfg: TrainConfig,
                 sch: NoiseSchedule, rng: np.random.Generator):
    gt = data.gt[idx]
    lrms_up = data.lrms_up[idx]
    x0 = gt - lrms_up if cfg.residual else gt
    b = x0.shape[0]
    t = rng.integers(1, cfg.timesteps + 1, size=b)
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    root_ab = np.sqrt(sch.alpha_bar[t]).astype(np.float32).reshape(-1, 1, 1, 1)
    root_1mab = np.sqrt(1.0 - sch.alpha_bar[t]).astype(np.float32).reshape(-1, 1, 1, 1)
    x_t = root_ab * x0 + root_1mab * eps
    if cfg.objective == "epsilon":
        target = eps
    elif cfg.objective == "x0":
        target = x0
    else:
        target = root_ab * eps - root_1mab * x0
    cond = ConditionBundle(
        pan=torch.from_numpy(data.pan[idx]),
        lrms_up=torch.from_numpy(lrms_up),
        bands=torch.from_numpy(data.bands[idx]),
    )
    return (torch.from_numpy(x_t), torch.from_numpy(t.astype(np.float32)),
            cond, torch.from_numpy(np.ascontiguousarray(target)), t)


def _grad_norm(model: torch.nn.Module) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().square().sum().item())
    return math.sqrt(total)


@dataclass
class TrainResult:
    checkpoint_dir: Path
    losses: list[float]
    log_path: Path
    steps_run: int


def train(manifest: DatasetManifest | str | Path, cfg: TrainConfig,
          out_dir: str | Path, resume: str | Path | None = None) -> TrainResult:
    """Run (or continue) a training job and leave a resumable checkpoint.

    Resuming restores parameters, EMA shadow, optimizer moments, and the
    noise-stream state, so the continued loss sequence matches an
    uninterrupted run exactly.
    """
    cfg.validate()
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(cfg.threads)
    # denormal activations stall CPU convolutions badly
    torch.set_flush_denormal(True)

    data = ArrayDataset.from_manifest(manifest)
    n = len(data)
    in_bands = data.gt.shape[1]
    sch = cosine_schedule(cfg.timesteps, cfg.schedule_offset)

    torch.manual_seed(cfg.seed)
    model = Denoiser(cfg.denoiser_config(in_bands))
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    ema = EMA(model, cfg.ema_decay)
    rng = np.random.default_rng([cfg.seed, 131])
    start_step = 0

    if resume is not None:
        ck = load_checkpoint(resume)
        load_numpy_state(model, ck.params)
        if ck.ema is not None:
            ema.load_numpy(ck.ema)
        if ck.optimizer is not None:
            _optimizer_from_numpy(opt, model, ck.optimizer)
        if ck.rng_state is not None:
            rng.bit_generator.state = ck.rng_state
        start_step = ck.step

    config_doc = {
        "train": cfg.to_dict(),
        "denoiser": config_to_dict(cfg.denoiser_config(in_bands)),
        "in_bands": in_bands,
    }

    def checkpoint(step: int, directory: Path) -> Path:
        return save_checkpoint(
            directory, step, config_doc,
            params=state_to_numpy(model),
            ema=ema.state_numpy(),
            optimizer=_optimizer_to_numpy(opt, model),
            rng_state=rng.bit_generator.state,
        )

    log_path = out_dir / "train_log.jsonl"
    losses: list[float] = []
    mode = "a" if start_step > 0 else "w"
    with open(log_path, mode) as log_fh:
        for step in range(start_step + 1, cfg.iterations + 1):
            idx = batch_indices(cfg.seed, n, cfg.batch_size, step)
            x_t, t_tensor, cond, target, t_raw = _build_batch(data, idx, cfg, sch, rng)
            pred = model(x_t, t_tensor, cond)
            loss = simple_loss(pred.value, target, cfg.loss)
            loss_val = float(loss.item())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = _grad_norm(model)
            if not (math.isfinite(loss_val) and math.isfinite(grad_norm)):
                dump = {"step": step, "loss": loss_val, "grad_norm": grad_norm,
                        "t": t_raw.tolist(), "lr": cfg.lr}
                (out_dir / "diverged.json").write_text(json.dumps(dump, indent=2))
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} (grad norm {grad_norm}) at step "
                    f"{step}; dump written to {out_dir / 'diverged.json'}"
                )
            opt.step()
            ema.update(model)
            losses.append(loss_val)
            log_fh.write(json.dumps({"step": step, "loss": loss_val,
                                     "grad_norm": grad_norm, "lr": cfg.lr}) + "\n")
            log_fh.flush()
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 \
                    and step < cfg.iterations:
                checkpoint(step, out_dir / f"checkpoint-{step:06d}")

    final_dir = checkpoint(cfg.iterations, out_dir / "checkpoint-final")
    return TrainResult(checkpoint_dir=final_dir, losses=losses,
                       log_path=log_path, steps_run=cfg.iterations - start_step)


def load_denoiser(checkpoint_dir: str | Path,
                  use_ema: bool = True) -> tuple[Denoiser, Checkpoint]:
    """Rebuild the model from a checkpoint, preferring EMA weights."""
    ck = load_checkpoint(checkpoint_dir)
    model = Denoiser(config_from_dict(ck.config["denoiser"]))
    state = ck.ema if (use_ema and ck.ema is not None) else ck.params
    load_numpy_state(model, state)
    model.eval()
    return model, ck


def make_denoise_fn(model: Denoiser, cond: ConditionBundle):
    """Adapt a torch model to the numpy callable the sampler drives."""

    def fn(x: np.ndarray, t: int) -> Prediction:
        with torch.no_grad():
            xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
            pred = model(xt, t, cond)
        return Prediction(pred.kind, pred.value.numpy())

    return fn


def fuse_image(model: Denoiser, ck: Checkpoint, sample: FusionSample,
               steps: int = 25, eta: float = 0.0, kind: str = "ddim",
               seed: int | list[int] = 0) -> np.ndarray:
    """Sample one fused image from a trained checkpoint."""
    tcfg = ck.config["train"]
    sch = cosine_schedule(tcfg["timesteps"], tcfg["schedule_offset"])
    plan = make_plan(sch.timesteps, steps, eta, kind)
    cond = make_condition(sample.pan, sample.lrms_up)
    fn = make_denoise_fn(model, cond)
    shape = (1,) + sample.lrms_up.shape
    lo, hi = sample.range_hint
    if tcfg["residual"]:
        fused = run_sampler(fn, shape, plan, sch, seed=seed,
                            base=sample.lrms_up[None], range_hint=(lo, hi))
    else:
        fused = np.clip(run_sampler(fn, shape, plan, sch, seed=seed), lo, hi)
    return fused[0]


def ablation_grid(base: TrainConfig) -> dict[str, TrainConfig]:
    """Objective sweep plus single-module knockouts, all from one base."""
    grid = {}
    for objective in PREDICTION_KINDS:
        grid[f"objective-{objective}"] = replace(base, objective=objective)
    grid["no-style-mod"] = replace(base, use_style_mod=False)
    grid["no-wavelet-mod"] = replace(base, use_wavelet_mod=False)
    return grid


def run_ablations(train_manifest: str | Path, test_manifest: str | Path,
                  base_cfg: TrainConfig, out_root: str | Path,
                  sample_steps: int = 25, max_eval: int = 4) -> dict:
    """Train every grid variant and report losses and test metrics.

    The summary records convergence figures and metric rankings; nothing
    here asserts an ordering.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    test = load_manifest(test_manifest)
    mcfg = MetricConfig(uiqi_window=8)
    results = {}
    for name, cfg in ablation_grid(base_cfg).items():
        res = train(train_manifest, cfg, out_root / name)
        model, ck = load_denoiser(res.checkpoint_dir)
        rows = []
        for i, entry in enumerate(test.entries[:max_eval]):
            s = load_sample(entry)
            fused = fuse_image(model, ck, s, steps=sample_steps, seed=[cfg.seed, i])
            rows.append(evaluate_reference(fused, s.gt, mcfg))
        summary = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        results[name] = {
            "loss_at_50": smoothed_loss(res.losses, min(50, len(res.losses))),
            "final_loss": smoothed_loss(res.losses, len(res.losses)),
            "metrics": summary,
        }
    ranking = sorted(results, key=lambda k: results[k]["metrics"]["ergas"])
    doc = {"variants": results, "ergas_ranking": ranking}
    (out_root / "summary.json").write_text(json.dumps(doc, indent=2) + "\n")
    lines = ["variant                final_loss  ergas   sam"]
    for name in ranking:
        r = results[name]
        lines.append(f"{name:<22} {r['final_loss']:>10.5f}  "
                     f"{r['metrics']['ergas']:>6.3f}  {r['metrics']['sam']:>6.3f}")
    (out_root / "summary.txt").write_text("\n".join(lines) + "\n")
    return doc

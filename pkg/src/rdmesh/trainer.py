"""Training loops for the VAE and RF stages.

Every random draw of step k comes from ``default_rng([seed, k])``, so a run
resumed from a checkpoint replays the same batches and noise as an
uninterrupted one.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .conditioning import Camera, render_record
from .dataset import list_clips, read_clip
from .numerics import Module, Tensor, ops
from .rf import RFConfig, RFModel, rf_loss
from .vae import TriflowVAE, VAEConfig, VAEInput

EVAL_STREAM = 0x5EED


def cosine_lr(step: int, total: int, lr0: float = 2e-4, lr1: float = 2e-5) -> float:
    if total <= 0:
        return lr0
    step = min(max(step, 0), total)
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainConfig:
    stage: str = "vae"
    iterations: int = 1000
    batch_size: int = 4
    schedule: str = "cosine"  # cosine | constant
    lr: float = 2e-4
    lr_final: float = 2e-5
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    data_dir: str = ""
    out_dir: str = ""
    vae_ckpt: str = ""
    sample_posterior: bool = True
    eval_draws: int = 16
    max_clips: int | None = None
    vae: dict = field(default_factory=dict)
    rf: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.stage not in ("vae", "rf"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return cosine_lr(step, self.iterations, self.lr, self.lr_final)


class Adam:
    """Adaptive-moment optimizer with global-norm gradient clipping."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = 1.0):
        self.params = dict(named_params)
        self.b1, self.b2 = betas
        self.eps, self.clip = eps, clip
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params.values()))

    def step(self, lr: float) -> float:
        norm = self.grad_norm()
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = tensors[f"adam_m/{k}"].copy()
            self.v[k] = tensors[f"adam_v/{k}"].copy()
        self.t = t


def draw_condition_drop(rng: np.random.Generator, p: float) -> bool:
    return bool(rng.random() < p)


@dataclass
class RFStepDraws:
    clips: np.ndarray
    times: np.ndarray
    drops: np.ndarray
    noise: list[np.ndarray]


def rf_step_draws(seed: int, step: int, n_clips: int, batch: int, p: float, token_counts, d_dyn: int) -> RFStepDraws:
    """All randomness of one RF step, in the order the trainer consumes it."""
    rng = np.random.default_rng([seed, step])
    clips = _batch_indices(rng, n_clips, batch)
    times, drops, noise = [], [], []
    for c in clips:
        times.append(rng.random())
        drops.append(draw_condition_drop(rng, p))
        noise.append(rng.standard_normal((token_counts[c], d_dyn)))
    return RFStepDraws(clips, np.array(times), np.array(drops), noise)


def _batch_indices(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    return rng.choice(n, size=batch, replace=n < batch)


@dataclass
class TrainResult:
    model: Module
    history: list[dict]
    checkpoint: Path | None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# checkpoints <-> models


def model_checkpoint(kind: str, model: Module, config: dict, step: int, train: TrainConfig | None = None, optim: Adam | None = None, extra: dict | None = None) -> Checkpoint:
    meta = {"kind": kind, "config": config, "step": step}
    if train is not None:
        meta["train"] = asdict(train)
    if extra:
        meta["extra"] = extra
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    if optim is not None:
        tensors.update(optim.state_tensors())
    return Checkpoint(meta, tensors)


def _params_of(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    return {k[len("param/") :]: v for k, v in ckpt.tensors.items() if k.startswith("param/")}


def load_vae(path: str | Path) -> TriflowVAE:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "vae":
        raise CheckpointError(f"{path} holds a {ckpt.kind!r} checkpoint, expected 'vae'")
    model = TriflowVAE(VAEConfig.from_dict(ckpt.meta["config"]))
    model.load_state_dict(_params_of(ckpt))
    return model


def load_rf(path: str | Path) -> RFModel:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "rf":
        raise CheckpointError(f"{path} holds a {ckpt.kind!r} checkpoint, expected 'rf'")
    model = RFModel(RFConfig.from_dict(ckpt.meta["config"]))
    model.load_state_dict(_params_of(ckpt))
    return model


def check_compatible(vae_cfg: VAEConfig, rf_cfg: RFConfig) -> None:
    if not vae_cfg.jump_decomp:
        raise ValueError("the RF stage needs a VAE with the jump stream enabled")
    pairs = [("d_cond", vae_cfg.d_cond, rf_cfg.d_cond), ("d_jump", vae_cfg.d_jump, rf_cfg.d_jump), ("d_traj", vae_cfg.d_traj, rf_cfg.d_traj), ("frames", vae_cfg.frame_count, rf_cfg.frames)]
    bad = [f"{n}: vae {a} vs rf {b}" for n, a, b in pairs if a != b]
    if bad:
        raise ValueError("VAE/RF dimension mismatch (" + "; ".join(bad) + ")")


# ---------------------------------------------------------------------------
# logging


class MetricsLog:
    def __init__(self, out_dir: str | Path | None, resume: bool = False):
        self.path = Path(out_dir) / "metrics.csv" if out_dir else None
        self.fields: list[str] | None = None
        if self.path and self.path.exists():
            if resume:
                with self.path.open() as f:
                    self.fields = next(csv.reader(f), None)
            else:
                self.path.unlink()

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        if self.fields is None:
            self.fields = list(row)
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(self.fields)
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([repr(row.get(k, "")) if isinstance(row.get(k), float) else row.get(k, "") for k in self.fields])


def _write_config(train: TrainConfig) -> None:
    if train.out_dir:
        out = Path(train.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(asdict(train), indent=1, sort_keys=True))


def load_records(data_dir: str | Path, max_clips: int | None = None) -> list:
    try:
        paths = list_clips(data_dir)
    except FileNotFoundError as exc:
        raise ValueError(f"empty dataset: {exc}") from None
    if max_clips:
        paths = paths[:max_clips]
    return [read_clip(p) for p in paths]


# ---------------------------------------------------------------------------
# VAE


def train_vae(train: TrainConfig, records: list | None = None, resume: str | Path | None = None) -> TrainResult:
    """Optimize reconstruction + eta-weighted KL; returns the model and per-step history."""
    if records is None:
        records = load_records(train.data_dir, train.max_clips)
    if not records:
        raise ValueError("empty dataset")
    cfg = VAEConfig.from_dict(train.vae)
    model = TriflowVAE(cfg)
    inputs = [VAEInput.from_record(r, cfg) for r in records]
    optim = Adam(model.named_parameters(), clip=train.grad_clip)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(_params_of(ckpt))
        start = int(ckpt.meta["step"])
        optim.load_state(ckpt.tensors, start)
    _write_config(train)
    log = MetricsLog(train.out_dir, resume=resume is not None)
    history = []
    ckpt_path = None
    for step in range(start, train.iterations):
        rng = np.random.default_rng([train.seed, step])
        batch = _batch_indices(rng, len(inputs), train.batch_size)
        model.zero_grad()
        sums: dict[str, float] = {}
        for i in batch:
            loss, parts = model.loss(inputs[i], rng if train.sample_posterior else None)
            (loss * (1.0 / len(batch))).backward()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v / len(batch)
        lr = train.lr_at(step)
        gnorm = optim.step(lr)
        row = {"step": step, "lr": lr, "loss": sums["total"], **{k: v for k, v in sorted(sums.items()) if k != "total"}, "grad_norm": gnorm}
        history.append(row)
        if step % train.log_every == 0 or step == train.iterations - 1:
            log.write(row)
        done = step + 1
        if train.out_dir and (done == train.iterations or (train.checkpoint_every and done % train.checkpoint_every == 0)):
            ckpt_path = Path(train.out_dir) / ("vae.ckpt" if done == train.iterations else f"vae_{done:06d}.ckpt")
            save_checkpoint(ckpt_path, model_checkpoint("vae", model, asdict(cfg), done, train, optim))
    return TrainResult(model, history, ckpt_path)


# ---------------------------------------------------------------------------
# RF


@dataclass
class RFTarget:
    z_dyn: np.ndarray  # standardized (n, d_dyn)
    x_cond: np.ndarray  # (n, d_cond)
    video: np.ndarray  # (T, H, W)


def dynamic_latents(vae: TriflowVAE, inp: VAEInput) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means [mu_jump; mu_traj] per token and the condition latents."""
    bundle, _ = vae.encode(inp, rng=None)
    z = np.concatenate([bundle.mu_jump.data, bundle.mu_traj.data], axis=1)
    return z, bundle.x_cond.data.copy()


def latent_stats(zs: list[np.ndarray]) -> tuple[list[float], list[float]]:
    allz = np.concatenate(zs, axis=0)
    return allz.mean(axis=0).tolist(), np.maximum(allz.std(axis=0), 1e-3).tolist()


def rf_targets(vae: TriflowVAE, records: list, rf_cfg: RFConfig) -> tuple[list[RFTarget], RFConfig]:
    """Encode every clip once with the frozen VAE and fill in latent standardization."""
    cam = Camera(resolution=rf_cfg.resolution)
    raw = []
    for rec in records:
        inp = VAEInput.from_record(rec, vae.cfg)
        z, x = dynamic_latents(vae, inp)
        video = rec.silhouette_video
        if video is None or video.shape[1] != rf_cfg.resolution:
            video = render_record(rec, cam)
        raw.append((z, x, video.astype(np.float64)))
    if not rf_cfg.latent_scale:
        rf_cfg.latent_shift, rf_cfg.latent_scale = latent_stats([r[0] for r in raw])
    return [RFTarget(rf_cfg.standardize(z), x, v) for z, x, v in raw], rf_cfg


def rf_eval_loss(model: RFModel, targets: list[RFTarget], seed: int, draws: int) -> float:
    """Conditional flow-matching loss on a fixed set of (t, noise) draws."""
    rng = np.random.default_rng([seed, EVAL_STREAM])
    total, count = 0.0, 0
    for tg in targets:
        f_vid = model.video_context(tg.video).detach()
        for _ in range(draws):
            t = rng.random()
            eps = rng.standard_normal(tg.z_dyn.shape)
            total += rf_loss(lambda z, tt: model.velocity(z, tg.x_cond, tt, f_vid), tg.z_dyn, eps, t).item()
            count += 1
    return total / count


def train_rf(train: TrainConfig, vae: TriflowVAE | None = None, records: list | None = None, resume: str | Path | None = None) -> TrainResult:
    if vae is None:
        vae = load_vae(train.vae_ckpt)
    if records is None:
        records = load_records(train.data_dir, train.max_clips)
    if not records:
        raise ValueError("empty dataset")
    rf_cfg = RFConfig.from_dict(train.rf)
    check_compatible(vae.cfg, rf_cfg)
    vae.freeze()
    # clear leftovers from VAE training so any gradient seen later came from this stage
    vae.zero_grad()
    targets, rf_cfg = rf_targets(vae, records, rf_cfg)
    model = RFModel(rf_cfg)
    optim = Adam(model.named_parameters(), clip=train.grad_clip)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(_params_of(ckpt))
        start = int(ckpt.meta["step"])
        optim.load_state(ckpt.tensors, start)
    _write_config(train)
    log = MetricsLog(train.out_dir, resume=resume is not None)
    history = []
    ckpt_path = None
    eval_start = rf_eval_loss(model, targets, train.seed, train.eval_draws) if train.eval_draws else None
    counts = [len(t.z_dyn) for t in targets]
    for step in range(start, train.iterations):
        draws = rf_step_draws(train.seed, step, len(targets), train.batch_size, rf_cfg.cond_drop_p, counts, rf_cfg.d_dyn)
        model.zero_grad()
        total = 0.0
        for c, t, drop, eps in zip(draws.clips, draws.times, draws.drops, draws.noise):
            tg = targets[c]
            f_vid = None if drop else model.video_context(tg.video)
            loss = rf_loss(lambda z, tt: model.velocity(z, tg.x_cond, tt, f_vid, drop), tg.z_dyn, eps, t)
            (loss * (1.0 / len(draws.clips))).backward()
            total += loss.item() / len(draws.clips)
        lr = train.lr_at(step)
        gnorm = optim.step(lr)
        row = {"step": step, "lr": lr, "loss": total, "drops": int(draws.drops.sum()), "grad_norm": gnorm}
        history.append(row)
        if step % train.log_every == 0 or step == train.iterations - 1:
            log.write(row)
        done = step + 1
        if train.out_dir and (done == train.iterations or (train.checkpoint_every and done % train.checkpoint_every == 0)):
            ckpt_path = Path(train.out_dir) / ("rf.ckpt" if done == train.iterations else f"rf_{done:06d}.ckpt")
            save_checkpoint(ckpt_path, model_checkpoint("rf", model, asdict(rf_cfg), done, train, optim))
    extra = {"vae_grad_abs_max": max((float(np.abs(p.grad).max()) for p in vae.parameters()), default=0.0)}
    if train.eval_draws:
        extra["eval_loss_start"] = eval_start
        extra["eval_loss_end"] = rf_eval_loss(model, targets, train.seed, train.eval_draws)
    return TrainResult(model, history, ckpt_path, extra)

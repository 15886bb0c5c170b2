"""Loss assembly, Adam, the step-decay schedule and the resumable episodic training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict
from .episodes import DatasetIndex, Episode, ImageBank, episode_rng, sample_episode
from .lfe import kl_regularizer
from .model import EpisodeOutput, TDSNet
from .nn import ParamStore, load_checkpoint, load_module_state, module_state, save_checkpoint
from .tensor import Tensor, precision

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
TRAIN_STREAM = 0
VAL_STREAM = 2


class NonFiniteLossError(RuntimeError):
    pass


# -- losses ---------------------------------------------------------------------

def rescale(scores: Tensor) -> Tensor:
    """Map cosine-valued scores from [-1, 1] onto [0, 1]."""
    return (scores + 1.0) * 0.5


def branch_loss(scores: Tensor, labels, reduction: str = "mean") -> Tensor:
    """sum_j (score_j - onehot_j)^2 per query, then mean (or sum) over queries.

    ``scores`` is (Q, N) or (N,) and already lies in [0, 1].
    """
    labels = np.atleast_1d(np.asarray(labels))
    if scores.ndim == 1:
        scores = scores.reshape(1, -1)
    n = scores.shape[-1]
    if labels.shape[0] != scores.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {scores.shape[0]} score rows")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"label out of range for {n} classes: {labels}")
    onehot = np.eye(n)[labels]
    per_query = ((scores - onehot) ** 2).sum(axis=-1)
    if reduction == "sum":
        return per_query.sum()
    return per_query.mean()


@dataclass
class LossBreakdown:
    loss_g: Tensor
    loss_l: Tensor
    loss_kl: Tensor
    total: Tensor
    lam: float

    def as_dict(self) -> dict[str, float]:
        return {"loss_g": self.loss_g.item(), "loss_l": self.loss_l.item(),
                "loss_kl": self.loss_kl.item(), "loss_total": self.total.item()}


def total_loss(loss_g: Tensor, loss_l: Tensor, loss_kl: Tensor, lam: float = 0.4) -> LossBreakdown:
    for name, v in (("loss_g", loss_g), ("loss_l", loss_l), ("loss_kl", loss_kl)):
        if not np.all(np.isfinite(v.data)):
            raise NonFiniteLossError(f"{name} is not finite ({v.data})")
    total = loss_g + loss_l + loss_kl * lam
    return LossBreakdown(loss_g, loss_l, loss_kl, total, lam)


def episode_losses(out: EpisodeOutput, query_labels, cfg: RunConfig) -> LossBreakdown:
    b = out.bundle
    dtype = b.S_g.dtype
    zero = Tensor(0.0, dtype=dtype)
    loss_g = branch_loss(rescale(b.S_g), query_labels, cfg.loss_reduction)
    loss_l = branch_loss(rescale(b.S_l), query_labels, cfg.loss_reduction) if b.S_l is not None else zero
    if out.p_a is not None:
        loss_kl = kl_regularizer(out.p_g, out.p_a).mean()
    else:
        loss_kl = zero
    return total_loss(loss_g, loss_l, loss_kl, cfg.lam)


# -- optimiser ------------------------------------------------------------------

def learning_rate(episode: int, base: float = 0.001, interval: int = 100_000) -> float:
    return base * 0.5 ** (episode // interval)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ParamStore, state: AdamState, lr: float,
              betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam update in place; parameters without a gradient see a zero gradient."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for path, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{path}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(path, np.zeros_like(p.data))
        v = state.v.setdefault(path, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- episode batches ------------------------------------------------------------

def episode_tensors(episode: Episode, bank: ImageBank, dtype, rng: np.random.Generator | None = None,
                    flip: bool = False) -> tuple[Tensor, Tensor]:
    support = bank.gather(episode.support)
    query = bank.gather(episode.query)
    if flip and rng is not None:
        for arr in (support, query):
            mask = rng.random(len(arr)) < 0.5
            arr[mask] = arr[mask][:, :, ::-1]
    return Tensor(support, dtype=dtype), Tensor(query, dtype=dtype)


def accuracy(scores: Tensor, labels) -> float:
    return float(np.mean(np.argmax(scores.data, axis=1) == np.asarray(labels)))


# -- checkpoints ----------------------------------------------------------------

def checkpoint_records(model: TDSNet, opt: AdamState) -> dict[str, np.ndarray]:
    records = {f"model/{k}": v for k, v in module_state(model).items()}
    for path, arr in opt.m.items():
        records[f"optim/m/{path}"] = arr
    for path, arr in opt.v.items():
        records[f"optim/v/{path}"] = arr
    return records


def write_checkpoint(path, cfg: RunConfig, model: TDSNet, opt: AdamState, episode: int, **extra) -> None:
    header = {"config_digest": cfg.digest(), "episode_counter": episode, "config": cfg.to_dict(),
              "optimizer_step": opt.step, **extra}
    save_checkpoint(path, header, checkpoint_records(model, opt))


def read_checkpoint(path) -> tuple[dict, RunConfig, TDSNet, AdamState]:
    header, records = load_checkpoint(path)
    cfg = config_from_dict(header["config"])
    with precision(cfg.precision):
        model = TDSNet(cfg)
    load_module_state(model, {k[len("model/"):]: v for k, v in records.items() if k.startswith("model/")})
    opt = AdamState(step=int(header.get("optimizer_step", 0)))
    for k, v in records.items():
        if k.startswith("optim/m/"):
            opt.m[k[len("optim/m/"):]] = v.copy()
        elif k.startswith("optim/v/"):
            opt.v[k[len("optim/v/"):]] = v.copy()
    return header, cfg, model, opt


# -- training loop --------------------------------------------------------------

@dataclass
class TrainResult:
    output_dir: Path
    episodes: int
    checkpoints: list[Path]
    log_path: Path
    seconds: float
    best_val: float | None = None


class Trainer:
    """Runs ``epochs * episodes_per_epoch`` episodes; each episode's randomness is derived
    from (seed, episode number) so a resumed run replays the same stream."""

    def __init__(self, cfg: RunConfig, index: DatasetIndex, output_dir=None, bank: ImageBank | None = None,
                 cache_dir=None):
        self.cfg = cfg
        self.index = index
        self.output_dir = Path(output_dir or cfg.output_dir)
        self.bank = bank or ImageBank(index, cfg.image_size, cache_dir)
        self.dtype = np.dtype(cfg.precision)
        with precision(cfg.precision):
            self.model = TDSNet(cfg, np.random.default_rng(np.random.SeedSequence([cfg.seed, 99])))
        self.opt = AdamState()
        self.episode = 0
        self.best_val: float | None = None

    @classmethod
    def resume(cls, checkpoint, index: DatasetIndex, output_dir=None, bank: ImageBank | None = None,
               cache_dir=None, cfg_overrides: dict | None = None) -> "Trainer":
        header, cfg, model, opt = read_checkpoint(checkpoint)
        if cfg_overrides:
            cfg = cfg.replace(**cfg_overrides)
        trainer = cls(cfg, index, output_dir or Path(checkpoint).parent, bank, cache_dir)
        trainer.model, trainer.opt = model, opt
        trainer.model.cfg = cfg
        trainer.episode = int(header["episode_counter"])
        trainer.best_val = header.get("best_val")
        return trainer

    @property
    def log_path(self) -> Path:
        return self.output_dir / "metrics.jsonl"

    def train_episode(self, ep: int) -> dict:
        cfg = self.cfg
        rng = episode_rng(cfg.seed, TRAIN_STREAM, ep)
        episode = sample_episode(self.index, "auxiliary", cfg.n_way, cfg.k_shot, cfg.q_per, rng, (cfg.seed, ep))
        support, query = episode_tensors(episode, self.bank, self.dtype, rng, cfg.flip_augment)
        model = self.model.train()
        params = model.param_store()
        params.zero_grad()
        out = model(support, episode.support_labels, query)
        try:
            losses = episode_losses(out, episode.query_labels, cfg)
        except NonFiniteLossError:
            dump = self.output_dir / "crash_dump.ckpt"
            write_checkpoint(dump, cfg, model, self.opt, ep)
            log.error("non-finite loss at episode %d; state written to %s", ep, dump)
            raise
        losses.total.backward()
        if cfg.grad_clip > 0:
            clip_grad_norm(params, cfg.grad_clip)
        lr = learning_rate(ep, cfg.lr, cfg.halving_interval)
        adam_step(params, self.opt, lr)
        record = {"episode": ep, **losses.as_dict(), "loss_kl_weighted": cfg.lam * float(losses.loss_kl.data),
                  "lr": lr,
                  "acc": accuracy(out.bundle.S_total, episode.query_labels)}
        return record

    def _prepare_log(self) -> None:
        # drop records past the resume point so the log matches an uninterrupted run
        if self.log_path.exists():
            keep = [ln for ln in self.log_path.read_text().splitlines()
                    if ln and json.loads(ln)["episode"] < self.episode]
            self.log_path.write_text("".join(k + "\n" for k in keep))

    def validate(self) -> float | None:
        if self.cfg.val_episodes <= 0 or len(self.index.splits.get("val", [])) < self.cfg.n_way:
            return None
        from .evaluation import evaluate_model
        report = evaluate_model(self.model, self.index, self.bank, "val", self.cfg.n_way, self.cfg.k_shot,
                                self.cfg.eval_q_per, self.cfg.val_episodes, self.cfg.seed, stream=VAL_STREAM)
        return report.mean

    def run(self, stop_after: int | None = None) -> TrainResult:
        """Train to completion, or until ``stop_after`` episodes have run in this call."""
        cfg = self.cfg
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self._prepare_log()
        total = cfg.epochs * cfg.episodes_per_epoch
        checkpoints: list[Path] = []
        start = time.perf_counter()
        ran = 0
        with precision(cfg.precision), open(self.log_path, "a") as logf:
            while self.episode < total and (stop_after is None or ran < stop_after):
                record = self.train_episode(self.episode)
                logf.write(json.dumps(record) + "\n")
                self.episode += 1
                ran += 1
                if self.episode % cfg.episodes_per_epoch == 0:
                    logf.flush()
                    epoch = self.episode // cfg.episodes_per_epoch
                    val = self.validate()
                    extra = {}
                    if val is not None and (self.best_val is None or val > self.best_val):
                        self.best_val = val
                        extra["best_val"] = val
                        write_checkpoint(self.output_dir / "best.ckpt", cfg, self.model, self.opt,
                                         self.episode, best_val=val)
                    path = self.output_dir / f"epoch_{epoch:04d}.ckpt"
                    write_checkpoint(path, cfg, self.model, self.opt, self.episode,
                                     best_val=self.best_val, **({"val_acc": val} if val is not None else {}))
                    write_checkpoint(self.output_dir / "latest.ckpt", cfg, self.model, self.opt, self.episode,
                                     best_val=self.best_val)
                    checkpoints.append(path)
                    log.info("epoch %d: episode %d, loss %.4f, acc %.3f%s", epoch, self.episode,
                             record["loss_total"], record["acc"], f", val {val:.2f}" if val is not None else "")
        return TrainResult(self.output_dir, self.episode, checkpoints, self.log_path,
                           time.perf_counter() - start, self.best_val)


def train(cfg: RunConfig, index: DatasetIndex, output_dir=None, resume=None, cache_dir=None,
          stop_after: int | None = None) -> TrainResult:
    if resume:
        trainer = Trainer.resume(resume, index, output_dir, cache_dir=cache_dir)
    else:
        trainer = Trainer(cfg, index, output_dir, cache_dir=cache_dir)
    return trainer.run(stop_after)


def read_metrics(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln]

"""Test-time protocol, confidence intervals, the ablation table and parameter accounting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .episodes import DatasetIndex, ImageBank, episode_rng, sample_episode
from .model import TDSNet
from .nn import Module
from .tensor import Tensor, no_grad, precision

EVAL_STREAM = 1

# Table rows: (key, label, config changes)
ABLATION_ROWS = (
    ("a", "Baseline", dict(use_lfe=False, use_local=False)),
    ("b", "Baseline+LFE", dict(use_lfe=True, use_local=False)),
    ("c", "Baseline+LFE+LS w/o att", dict(use_lfe=True, use_local=True, attention="uniform")),
    ("d", "Baseline+LFE+LS w/ att", dict(use_lfe=True, use_local=True, attention="task")),
)


@dataclass
class EvalReport:
    mean: float
    ci95: float
    episodes: int
    accuracies: list[float] = field(repr=False)
    config_digest: str = ""
    flags: dict = field(default_factory=dict)

    def line(self) -> str:
        return format_accuracy(self.mean, self.ci95)

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "line": self.line()}, indent=1, sort_keys=True)


def format_accuracy(mean: float, ci: float) -> str:
    return f"{mean:.2f}±{ci:.2f}"


def confidence_interval(values) -> float:
    """1.96 * sample std (n-1 denominator) / sqrt(n)."""
    vals = np.asarray(values, dtype=np.float64)
    n = len(vals)
    if n < 2:
        return 0.0
    mean = math.fsum(vals) / n
    var = math.fsum((vals - mean) ** 2) / (n - 1)
    return 1.96 * math.sqrt(var) / math.sqrt(n)


def report_from_accuracies(accs, config_digest: str = "", flags: dict | None = None) -> EvalReport:
    """Accuracies in percent. fsum keeps the mean independent of episode order."""
    accs = [float(a) for a in accs]
    if not accs:
        raise ValueError("no episodes to report")
    return EvalReport(math.fsum(accs) / len(accs), confidence_interval(accs), len(accs), accs,
                      config_digest, flags or {})


def ablation_flags(cfg: RunConfig) -> dict:
    return {"lfe": cfg.use_lfe, "local": cfg.use_local, "attention": cfg.attention,
            "attention_norm": cfg.attention_norm, "hconv": cfg.hconv,
            "eval_attention_mode": cfg.eval_attention_mode}


def episode_accuracy(model: TDSNet, support: Tensor, support_labels, query: Tensor, query_labels) -> float:
    out = model(support, support_labels, query)
    pred = np.argmax(out.bundle.S_total.data, axis=1)
    return 100.0 * float(np.mean(pred == np.asarray(query_labels)))


def evaluate_model(model: TDSNet, index: DatasetIndex, bank: ImageBank, split: str = "test",
                   n_way: int = 5, k_shot: int = 1, q_per: int = 15, episodes: int = 600,
                   seed: int = 0, stream: int = EVAL_STREAM) -> EvalReport:
    """Eval-mode forward over freshly sampled episodes; parameters and running statistics are untouched."""
    was_training = model.training
    model.eval()
    dtype = np.dtype(model.cfg.precision)
    accs = []
    try:
        with no_grad(), precision(model.cfg.precision):
            for e in range(episodes):
                rng = episode_rng(seed, stream, e)
                ep = sample_episode(index, split, n_way, k_shot, q_per, rng, (seed, e))
                support = Tensor(bank.gather(ep.support), dtype=dtype)
                query = Tensor(bank.gather(ep.query), dtype=dtype)
                accs.append(episode_accuracy(model, support, ep.support_labels, query, ep.query_labels))
    finally:
        model.train(was_training)
    return report_from_accuracies(accs, model.cfg.digest(), ablation_flags(model.cfg))


def evaluate(checkpoint, index: DatasetIndex, episodes: int = 600, n_way: int = 5, k_shot: int = 1,
             q_per: int = 15, seed: int = 0, eval_attention_mode: str | None = None,
             bank: ImageBank | None = None, cache_dir=None) -> EvalReport:
    from .training import read_checkpoint

    _, cfg, model, _ = read_checkpoint(checkpoint)
    if eval_attention_mode:
        cfg = cfg.replace(eval_attention_mode=eval_attention_mode)
        model.cfg = cfg
    bank = bank or ImageBank(index, cfg.image_size, cache_dir)
    return evaluate_model(model, index, bank, "test", n_way, k_shot, q_per, episodes, seed)


# -- ablation -------------------------------------------------------------------

def ablation_config(base: RunConfig, row: str) -> RunConfig:
    for key, _, changes in ABLATION_ROWS:
        if key == row:
            return base.replace(**changes)
    raise KeyError(f"unknown ablation row {row!r}")


@dataclass
class AblationRow:
    key: str
    label: str
    report: EvalReport | None

    def cell(self) -> str:
        return self.report.line() if self.report else "absent"


def ablation_suite(checkpoints: dict[str, str | Path | None], index: DatasetIndex, episodes: int = 600,
                   n_way: int = 5, k_shot: int = 1, q_per: int = 15, seed: int = 0,
                   cache_dir=None) -> list[AblationRow]:
    """One report per row (a)-(d); a missing checkpoint leaves its row absent."""
    rows = []
    banks: dict[int, ImageBank] = {}
    for key, label, _ in ABLATION_ROWS:
        path = checkpoints.get(key)
        if not path or not Path(path).exists():
            rows.append(AblationRow(key, label, None))
            continue
        from .training import read_checkpoint

        _, cfg, model, _ = read_checkpoint(path)
        bank = banks.setdefault(cfg.image_size, ImageBank(index, cfg.image_size, cache_dir))
        rows.append(AblationRow(key, label, evaluate_model(model, index, bank, "test", n_way, k_shot,
                                                           q_per, episodes, seed)))
    return rows


def format_ablation_table(rows: list[AblationRow], setting: str = "") -> str:
    width = max(len(f"({r.key}){r.label}") for r in rows)
    head = f"{'Method':<{width}} | {setting or 'accuracy'}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{'(' + r.key + ')' + r.label:<{width}} | {r.cell()}")
    return "\n".join(lines)


def ablation_json(rows: list[AblationRow]) -> str:
    return json.dumps([{"row": r.key, "method": r.label,
                        "report": None if r.report is None else {**asdict(r.report), "line": r.report.line()}}
                       for r in rows], indent=1)


# -- parameter accounting -------------------------------------------------------

def count_parameters(source: Module | str | Path) -> dict[str, int]:
    """Trainable element counts per top-level module plus the total."""
    if isinstance(source, (str, Path)):
        from .training import read_checkpoint

        _, _, source, _ = read_checkpoint(source)
    store = source.param_store()
    by_prefix = store.counts_by_prefix(1)
    # modules without parameters (identity h_conv) still get a row
    counts = {name: by_prefix.get(name, 0) for name in source.children}
    counts.update(by_prefix)
    counts["total"] = store.total_count()
    return counts


def format_parameter_table(counts: dict[str, int]) -> str:
    width = max(len(k) for k in counts)
    lines = [f"{'module':<{width}}  params"]
    for k, v in counts.items():
        lines.append(f"{k:<{width}}  {v}")
    return "\n".join(lines)

"""Central finite-difference check of every loss component against backprop on the tiny config."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, tiny_config
from .model import TDSNet
from .tensor import Tensor, precision
from .training import episode_losses

COMPONENTS = ("loss_g", "loss_l", "loss_kl", "loss_total")
GRAD_FLOOR = 1e-8


@dataclass
class GradcheckResult:
    max_rel_err: dict[str, float]
    worst_param: dict[str, str]
    n_params: int
    seconds: float
    step: float

    def passed(self, tol: float = 1e-3) -> bool:
        return all(v <= tol for v in self.max_rel_err.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from dividing by zero."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def _episode(cfg: RunConfig, rng: np.random.Generator):
    s = cfg.image_size
    support = rng.normal(size=(cfg.n_way * cfg.k_shot, s, s, 3))
    query = rng.normal(size=(cfg.n_way * cfg.q_per, s, s, 3))
    s_lab = np.repeat(np.arange(cfg.n_way), cfg.k_shot)
    q_lab = np.repeat(np.arange(cfg.n_way), cfg.q_per)
    return support, s_lab, query, q_lab


def finite_difference_check(cfg: RunConfig | None = None, seed: int = 0, step: float | None = None,
                            freeze_stop_gradients: bool = True) -> GradcheckResult:
    """Compare analytic gradients of each loss component with central differences over all parameters.

    Gradient-stopped quantities (attention thresholds, the teacher distribution) are
    constants to backprop, so with ``freeze_stop_gradients`` they are computed once at
    the unperturbed point and held fixed while differencing; the check then measures
    exactly the function backprop differentiates.
    """
    cfg = cfg or tiny_config()
    step = step if step is not None else (1e-5 if cfg.precision == "float64" else 1e-3)
    start = time.perf_counter()
    with precision(cfg.precision):
        rng = np.random.default_rng(seed)
        model = TDSNet(cfg, np.random.default_rng(np.random.SeedSequence([seed, 99])))
        model.train()
        support, s_lab, query, q_lab = _episode(cfg, rng)
        dtype = np.dtype(cfg.precision)
        support, query = Tensor(support, dtype=dtype), Tensor(query, dtype=dtype)
        params = model.param_store()
        cache: dict | None = {} if freeze_stop_gradients else None

        def losses():
            return episode_losses(model(support, s_lab, query, stop_grad_cache=cache), q_lab, cfg)

        analytic: dict[str, dict[str, np.ndarray]] = {}
        for comp in COMPONENTS:
            params.zero_grad()
            lb = losses()
            root = {"loss_g": lb.loss_g, "loss_l": lb.loss_l, "loss_kl": lb.loss_kl, "loss_total": lb.total}[comp]
            if root.requires_grad:
                root.backward()
            analytic[comp] = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                              for k, p in params.items()}

        numeric = {c: {k: np.zeros_like(p.data) for k, p in params.items()} for c in COMPONENTS}
        for path, p in params.items():
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                plus = losses().as_dict()
                flat[i] = orig - step
                minus = losses().as_dict()
                flat[i] = orig
                for c in COMPONENTS:
                    numeric[c][path].reshape(-1)[i] = (plus[c] - minus[c]) / (2 * step)

    worst: dict[str, float] = {}
    where: dict[str, str] = {}
    for c in COMPONENTS:
        worst[c], where[c] = 0.0, ""
        for path in params:
            err = relative_error(analytic[c][path], numeric[c][path])
            if err.size and err.max() > worst[c]:
                worst[c], where[c] = float(err.max()), path
    return GradcheckResult(worst, where, params.total_count(), time.perf_counter() - start, step)

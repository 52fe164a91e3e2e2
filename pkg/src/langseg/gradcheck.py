"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError
from .tensor import ParamStore, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    passed: bool
    step: float
    tol: float
    coords_checked: int = 0
    worst: tuple[str, tuple[int, ...]] | None = field(default=None)

    @property
    def overall_max(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{name:<40s} {err:.3e}" for name, err in self.max_rel_error.items()]
        status = "PASS" if self.passed else "FAIL"
        lines.append(f"{status}: max rel err {self.overall_max:.3e} (tol {self.tol:g}, h {self.step:g}, "
                     f"{self.coords_checked} coords)")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def grad_check(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    samples: int = 64,
    seed: int = 0,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare backward() against (f(θ+h) - f(θ-h)) / 2h.

    At most ``samples`` coordinates per parameter are probed, chosen by a
    seeded generator; smaller parameters are checked exhaustively.
    """
    if h <= 0:
        raise ContractError(f"step size must be positive, got {h}")
    rng = np.random.default_rng(seed)

    params.zero_grad()
    loss = loss_fn(params)
    again = loss_fn(params)
    if loss.item() != again.item():
        raise ContractError(f"loss_fn is not deterministic: {loss.item()!r} then {again.item()!r}")
    backward(loss, params)
    analytic = {n: g.copy() for n, g in params.grads.items()}
    params.zero_grad()

    errors: dict[str, float] = {}
    worst, worst_err, checked = None, -1.0, 0
    for name in (names if names is not None else params.names()):
        base = params[name].data.copy()
        flat_size = base.size
        if flat_size <= samples:
            coords = np.arange(flat_size)
        else:
            coords = np.sort(rng.choice(flat_size, size=samples, replace=False))
        max_err = 0.0
        for c in coords:
            idx = np.unravel_index(c, base.shape)
            probe = base.copy()
            probe[idx] = base[idx] + h
            params.set_value(name, probe)
            f_plus = loss_fn(params).item()
            probe[idx] = base[idx] - h
            params.set_value(name, probe)
            f_minus = loss_fn(params).item()
            numeric = (f_plus - f_minus) / (2 * h)
            err = relative_error(float(analytic[name][idx]), numeric)
            max_err = max(max_err, err)
            if err > worst_err:
                worst, worst_err = (name, tuple(int(i) for i in idx)), err
            checked += 1
        params.set_value(name, base)
        errors[name] = max_err
    passed = all(e <= tol for e in errors.values())
    return GradCheckReport(errors, passed, h, tol, checked, worst)


LOSS_NAMES = ("gen", "triplet", "seg", "multi_scale", "total")


def micro_model_checks(seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                       samples: int = 64) -> dict[str, GradCheckReport]:
    """Check every loss term and the weighted total on a seeded 8x8 model
    with two pyramid levels and three classes."""
    from .losses import LossWeights, total_loss
    from .model import ModelConfig, forward, init_params, loss_terms
    from .text_encoder import default_vocabulary, tokenize_batch

    vocab = default_vocabulary()
    cfg = ModelConfig(height=8, width=8, levels=2, features=4, text_dim=6, classes=3, vocab_size=len(vocab))
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    # nonzero biases keep relu pre-activations away from exact zeros
    for name in params.names():
        if name.endswith("bias") or name == "decoder.scale_logits":
            params.set_value(name, rng.normal(scale=0.1, size=params[name].shape))
    images = rng.uniform(size=(3, 3, 8, 8))
    ids = tokenize_batch(["a scene with red circle left of blue square", "a scene with green triangle",
                          "a scene with yellow square above red triangle"], vocab, cfg.max_len)
    masks = rng.integers(0, cfg.classes, size=(3, 8, 8))
    weights = LossWeights()

    def term(name):
        def fn(ps):
            terms = loss_terms(forward(ps, cfg, images, ids), masks, weights)
            return total_loss(terms, weights)[0] if name == "total" else terms[name]
        return fn

    return {name: grad_check(term(name), params, h=h, tol=tol, samples=samples, seed=seed) for name in LOSS_NAMES}

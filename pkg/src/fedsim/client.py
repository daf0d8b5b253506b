"""One client's local training pass.

Every algorithm runs the same skeleton — exactly K mini-batch SGD steps
from the received initialization, with per-round learning rate
``lr0 * lr_decay**round``, no local momentum, and global-norm clipping —
and differs only in the gradient rule:

* fedavg / fedavgm / fedadam: plain loss gradient.
* fedagm:  alpha*grad + beta*(theta - broadcast), the penalized local
  objective around the accelerated broadcast point.
* fedprox: grad + prox_mu*(theta - init).
* feddyn:  grad - h_i + dyn_alpha*(theta - init) with persistent per-client
  state h_i (held by the engine, updated via :func:`feddyn_updated_state`).
* fedcm:   cm_alpha*grad + (1-cm_alpha)*m with the server-provided
  momentum m (the extra downlink).

Vanishing-coefficient terms are skipped outright rather than multiplied
by zero: IEEE arithmetic turns 0.0*x into a possible -0.0 and would break
the bit-identical degeneration guarantees (fedagm with beta=0, fedprox
with mu=0, fedcm with cm_alpha=1 must reproduce fedavg exactly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import NumericError, StructuralError
from .models import ModelSpec, gradient, loss
from .params import axpy, l2_norm_sq

RULES = ("fedavg", "fedprox", "fedavgm", "fedadam", "feddyn", "fedcm", "fedagm")


@dataclass(frozen=True)
class LocalConfig:
    k: int = 50
    batch_size: int | None = None
    epochs: int = 5
    lr0: float = 0.1
    lr_decay: float = 1.0
    clip_norm: float = 10.0
    alpha: float = 1.0
    beta: float = 0.01
    prox_mu: float = 0.0
    cm_alpha: float = 0.1
    dyn_alpha: float = 0.01

    def __post_init__(self):
        if self.k < 1:
            raise StructuralError("k must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise StructuralError("batch_size must be positive when set")
        if self.epochs < 1:
            raise StructuralError("epochs must be positive")
        if self.lr0 < 0:
            raise StructuralError("lr0 must be nonnegative")
        if not 0 < self.lr_decay <= 1:
            raise StructuralError("lr_decay must lie in (0, 1]")
        if self.clip_norm <= 0:
            raise StructuralError("clip_norm must be positive")
        if self.beta < 0 or self.prox_mu < 0 or self.dyn_alpha < 0:
            raise StructuralError("penalty weights must be nonnegative")
        if not 0 <= self.cm_alpha <= 1:
            raise StructuralError("cm_alpha must lie in [0, 1]")


@dataclass(frozen=True)
class ClientResult:
    final_params: np.ndarray
    local_steps_taken: int
    train_loss_last: float
    bytes_up: int


def derive_batch_size(shard_size: int, epochs: int, k: int) -> int:
    """ceil(shard_size*epochs/k), capped at the shard size: the batch size
    that spreads `epochs` passes over the shard across k iterations."""
    return max(1, min(shard_size, -(-shard_size * epochs // k)))


def clip_by_norm(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale ``g`` onto the clip ball; returned unchanged when inside."""
    norm = math.sqrt(l2_norm_sq(g))
    if norm <= clip_norm:
        return g
    return (clip_norm / norm) * g


def local_gradient_fedagm(spec: ModelSpec, params: np.ndarray, batch,
                          broadcast: np.ndarray, cfg: LocalConfig) -> np.ndarray:
    """Gradient of the penalized local objective:
    alpha*grad_f(params) + beta*(params - broadcast)."""
    g = cfg.alpha * gradient(spec, params, batch)
    if cfg.beta != 0.0:
        g = g + cfg.beta * (params - broadcast)
    if not np.all(np.isfinite(g)):
        raise NumericError("local gradient is not finite")
    return g


def _rule_gradient(rule: str, spec: ModelSpec, theta: np.ndarray, batch,
                   init: np.ndarray, cfg: LocalConfig, aux) -> np.ndarray:
    if rule in ("fedavg", "fedavgm", "fedadam"):
        return gradient(spec, theta, batch)
    if rule == "fedagm":
        return local_gradient_fedagm(spec, theta, batch, init, cfg)
    if rule == "fedprox":
        g = gradient(spec, theta, batch)
        if cfg.prox_mu != 0.0:
            g = g + cfg.prox_mu * (theta - init)
        return g
    if rule == "feddyn":
        g = gradient(spec, theta, batch)
        if aux is not None:
            g = g - aux
        if cfg.dyn_alpha != 0.0:
            g = g + cfg.dyn_alpha * (theta - init)
        return g
    if rule == "fedcm":
        g = gradient(spec, theta, batch)
        if cfg.cm_alpha == 1.0:
            return g
        if aux is None:
            raise StructuralError("fedcm needs the server momentum as aux input")
        return cfg.cm_alpha * g + (1.0 - cfg.cm_alpha) * aux
    raise StructuralError(f"unknown update rule {rule!r}")


def local_update(spec: ModelSpec, init: np.ndarray, shard: Dataset,
                 cfg: LocalConfig, round: int, rng: np.random.Generator,
                 rule: str, aux: np.ndarray | None = None) -> ClientResult:
    """Run K local steps and return the resulting model.

    Mini-batches come from reshuffling the shard with ``rng`` at every
    local epoch, in fixed iteration order; a short final slice of an epoch
    is used as a partial batch. Numeric failures abort with the offending
    step attached.
    """
    if shard.n < 1:
        raise StructuralError("client shard is empty")
    if rule not in RULES:
        raise StructuralError(f"unknown update rule {rule!r}")
    bs = cfg.batch_size or derive_batch_size(shard.n, cfg.epochs, cfg.k)
    bs = min(bs, shard.n)
    eta = cfg.lr0 * cfg.lr_decay ** round

    theta = init.copy()
    order = rng.permutation(shard.n)
    pos = 0
    last_loss = math.nan
    for step in range(cfg.k):
        if pos >= shard.n:
            order = rng.permutation(shard.n)
            pos = 0
        batch = shard.to_batch(order[pos:pos + bs])
        pos += bs
        try:
            if step == cfg.k - 1:
                last_loss = loss(spec, theta, batch)
            g = _rule_gradient(rule, spec, theta, batch, init, cfg, aux)
            g = clip_by_norm(g, cfg.clip_norm)
            theta = axpy(-eta, g, theta)
        except NumericError as exc:
            raise NumericError(exc.base_message, round=round, step=step) from None
    return ClientResult(final_params=theta, local_steps_taken=cfg.k,
                        train_loss_last=last_loss, bytes_up=8 * init.size)


def feddyn_updated_state(h: np.ndarray, final_params: np.ndarray,
                         init: np.ndarray, dyn_alpha: float) -> np.ndarray:
    """Post-round refresh of a client's persistent drift corrector:
    h <- h - dyn_alpha*(theta_final - init)."""
    if dyn_alpha == 0.0:
        return h
    return h - dyn_alpha * (final_params - init)

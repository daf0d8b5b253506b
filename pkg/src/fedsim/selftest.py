"""Fast invariant suite behind the ``fedsim selftest`` verb.

Four checks, each deterministic (fixed seeds) and fast enough to run on
every install: the server-momentum recurrence, analytic-vs-numeric
gradients, hyperparameter degenerations that must reproduce plain
averaging bit for bit, and partition structure. One PASS/FAIL line is
printed per check so a broken build names its failure.

``perturb_lambda_sign`` flips the sign of the momentum term inside the
recurrence check's own prediction. A healthy build must then FAIL that
check — it proves the checker can actually catch a broken update rule,
rather than passing vacuously.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .client import LocalConfig, local_update
from .data import generate_synthetic, partition_dirichlet
from .engine import RunConfig, run
from .models import ModelSpec, fd_gradient, gradient, make_batch, param_dim
from .server import ServerHyper, aggregate_fedagm, momentum_residual, init_state, momentum_residual_bound


def _momentum_recurrence(perturb_lambda_sign: bool) -> bool:
    """Aggregate random rounds and verify delta' = tau*gbar + lam*delta,
    both through the library's own residual check and through an
    independently coded prediction (the one the sign perturbation bends)."""
    rng = np.random.default_rng(20250811)
    sign = -1.0 if perturb_lambda_sign else 1.0
    for _ in range(200):
        d = int(rng.integers(1, 64))
        hyper = ServerHyper(tau=float(rng.uniform(0.05, 1.0)),
                            lam=float(rng.uniform(0.05, 0.95)))
        state = replace(init_state(rng.standard_normal(d), hyper),
                        delta=rng.standard_normal(d))
        returns = [state.theta + 0.1 * rng.standard_normal(d)
                   for _ in range(int(rng.integers(1, 9)))]
        after = aggregate_fedagm(state, returns)
        bound = momentum_residual_bound(after)
        if momentum_residual(state, returns, after) > bound:
            return False
        bc = state.theta - hyper.lam * state.delta
        gbar = -(np.mean(np.stack(returns), axis=0) - bc)
        predicted = hyper.tau * gbar + sign * hyper.lam * state.delta
        if float(np.max(np.abs(after.delta - predicted))) > bound:
            return False
    return True


def _gradients_match_fd() -> bool:
    rng = np.random.default_rng(7)
    cases = [ModelSpec("linear_regression", input_dim=4, l2_weight_decay=0.01),
             ModelSpec("softmax_classifier", input_dim=4, output_dim=3,
                       l2_weight_decay=0.001),
             ModelSpec("mlp", input_dim=3, output_dim=2, hidden_dims=(4,))]
    for spec in cases:
        for _ in range(5):
            n = int(rng.integers(1, 8))
            X = rng.normal(size=(n, spec.input_dim))
            if spec.kind == "linear_regression":
                y = rng.normal(size=n)
            else:
                y = rng.integers(0, spec.output_dim, size=n)
            params = rng.normal(size=param_dim(spec))
            batch = make_batch(X, y)
            g = gradient(spec, params, batch)
            fd = fd_gradient(spec, params, batch, h=1e-6)
            rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
            if rel > 1e-5:
                return False
    return True


def _records_identical(a, b, skip_bytes_down: bool = False) -> bool:
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        same = (ra.round == rb.round
                and ra.sampled_clients == rb.sampled_clients
                and _bits(ra.train_loss) == _bits(rb.train_loss)
                and _bits(ra.test_accuracy) == _bits(rb.test_accuracy)
                and _bits(ra.ema_accuracy) == _bits(rb.ema_accuracy)
                and ra.bytes_up == rb.bytes_up
                and (skip_bytes_down or ra.bytes_down == rb.bytes_down))
        if not same:
            return False
    return True


def _bits(x: float) -> bytes:
    return np.float64(x).tobytes()


def _degenerations() -> bool:
    """Every rule collapsed to its trivial setting must match plain
    averaging exactly — first per local update, then over a full run."""
    spec = ModelSpec("softmax_classifier", input_dim=4, output_dim=3,
                     l2_weight_decay=0.001)
    ds = generate_synthetic(seed=5, clusters=3, per_class=30, input_dim=4, spread=1.0)
    shard = ds.subset(range(20))
    init = np.random.default_rng(1).normal(size=param_dim(spec))

    def one(rule, cfg, aux=None):
        return local_update(spec, init, shard, cfg, 0,
                            np.random.default_rng(42), rule, aux=aux)

    base_cfg = LocalConfig(k=10)
    ref = one("fedavg", base_cfg).final_params
    pairs = [
        ("fedagm", LocalConfig(k=10, alpha=1.0, beta=0.0), None),
        ("fedprox", LocalConfig(k=10, prox_mu=0.0), None),
        ("feddyn", LocalConfig(k=10, dyn_alpha=0.0), None),
        ("fedcm", LocalConfig(k=10, cm_alpha=1.0), np.zeros(param_dim(spec))),
    ]
    for rule, cfg, aux in pairs:
        if one(rule, cfg, aux=aux).final_params.tobytes() != ref.tobytes():
            return False

    common = dict(model=spec, n_clients=6, rounds=5, participation=0.5, seed=3,
                  partition_kind="dirichlet", concentration=0.5)
    local = LocalConfig(k=10, alpha=1.0, beta=0.0, prox_mu=0.0,
                        cm_alpha=1.0, dyn_alpha=0.0)
    test = ds.subset(range(60, 90))
    train = ds.subset(range(60))
    base = run(RunConfig(algorithm="fedavg", local=local, **common), train, test)
    variants = [
        RunConfig(algorithm="fedagm", local=local,
                  server=ServerHyper(tau=1.0, lam=0.0), **common),
        RunConfig(algorithm="fedavgm", local=local,
                  server=ServerHyper(avgm_beta=0.0, global_lr=1.0), **common),
        RunConfig(algorithm="fedprox", local=local, **common),
        RunConfig(algorithm="feddyn", local=local, **common),
        RunConfig(algorithm="fedcm", local=local, **common),
    ]
    for rc in variants:
        res = run(rc, train, test)
        if not _records_identical(base.records, res.records,
                                  skip_bytes_down=rc.algorithm == "fedcm"):
            return False
        if res.final_state.theta.tobytes() != base.final_state.theta.tobytes():
            return False
    return True


def _partition_invariants() -> bool:
    rng = np.random.default_rng(13)
    ds = generate_synthetic(seed=2, clusters=6, per_class=40, input_dim=3, spread=1.0)
    for _ in range(20):
        n_clients = int(rng.integers(2, 30))
        conc = float(rng.choice([0.05, 0.3, 1.0, 10.0]))
        part = partition_dirichlet(ds, n_clients, conc, int(rng.integers(0, 10 ** 6)))
        joined = np.concatenate(part.assignments)
        if joined.size != ds.n or np.unique(joined).size != ds.n:
            return False
        sizes = [a.size for a in part.assignments]
        if max(sizes) - min(sizes) > 1:
            return False
    return True


CHECKS = (
    ("momentum-recurrence", lambda perturb: _momentum_recurrence(perturb)),
    ("gradient-vs-finite-difference", lambda perturb: _gradients_match_fd()),
    ("degeneration-equivalence", lambda perturb: _degenerations()),
    ("partition-invariants", lambda perturb: _partition_invariants()),
)


def run_selftest(perturb_lambda_sign: bool = False, out=print) -> int:
    """Run every check, print one PASS/FAIL line per check, return the
    process exit status (0 iff all passed)."""
    failed = []
    for name, check in CHECKS:
        ok = check(perturb_lambda_sign)
        out(f"{'PASS' if ok else 'FAIL'} {name}")
        if not ok:
            failed.append(name)
    if failed:
        out(f"selftest failed: {', '.join(failed)}")
        return 1
    out("selftest passed")
    return 0

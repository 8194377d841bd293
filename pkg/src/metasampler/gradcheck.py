"""Finite-difference verification of every gradient path.

Central differences with step 1e-5 are compared coordinate-wise against
analytic gradients.  The error for coordinate j is

    err_j = |a_j - f_j| / max(|a_j|, |f_j|, floor)

where floor = max(1e-7, 1e-3 * max overall coordinate magnitude).  The floor
absorbs coordinates whose true derivative is exactly zero (for example energy
biases, which softmax normalization cancels identically): there the central
difference measures pure float roundoff and a bare relative error would be
meaningless.  A check passes when the max error is below 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses, metagrad, models
from .autodiff import Tensor

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4


def central_difference(
    f: Callable[[np.ndarray], float], x0: np.ndarray, eps: float = DEFAULT_EPS
) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0.ravel())
    flat = x0.ravel().copy()
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        hi = f(flat.reshape(x0.shape))
        flat[j] = orig - eps
        lo = f(flat.reshape(x0.shape))
        flat[j] = orig
        grad[j] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x0.shape)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    f = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != f.shape:
        raise ValueError(f"relative_errors: shapes {a.shape} vs {f.shape}")
    scale = max(np.abs(a).max(initial=0.0), np.abs(f).max(initial=0.0))
    floor = max(1e-7, 1e-3 * scale)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def max_rel_error(analytic, numeric) -> float:
    return float(relative_errors(analytic, numeric).max())


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    @property
    def worst_coordinate(self) -> int:
        return self._worst

    _worst: int = -1


def _check(name: str, f, x0, analytic) -> CheckResult:
    numeric = central_difference(f, x0)
    errs = relative_errors(analytic, numeric)
    result = CheckResult(name=name, max_error=float(errs.max()))
    result._worst = int(np.argmax(errs))
    return result


def check_op_gradients(seed: int = 0) -> list[CheckResult]:
    """Each primitive op at random points bounded away from its kinks."""
    rng = np.random.default_rng(seed)
    results = []

    def scalar_graph(name: str, build, x0):
        def f(x):
            return float(build(Tensor(x)).data)

        leaf = Tensor(x0, requires_grad=True)
        (g,) = ad.backward(build(leaf), [leaf])
        results.append(_check(name, f, x0, g))

    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(4, 2))
    leaf_x = Tensor(x, requires_grad=True)
    leaf_y = Tensor(y, requires_grad=True)
    out = ad.tsum(ad.square(ad.matmul(leaf_x, leaf_y)))
    gx, gy = ad.backward(out, [leaf_x, leaf_y])
    results.append(
        _check(
            "matmul_lhs",
            lambda v: float(ad.tsum(ad.square(ad.matmul(Tensor(v), Tensor(y)))).data),
            x,
            gx,
        )
    )
    results.append(
        _check(
            "matmul_rhs",
            lambda v: float(ad.tsum(ad.square(ad.matmul(Tensor(x), Tensor(v)))).data),
            y,
            gy,
        )
    )

    v = rng.normal(size=7) + np.where(rng.normal(size=7) > 0, 0.5, -0.5)  # away from 0
    scalar_graph("relu", lambda t: ad.tsum(ad.square(ad.relu(t))), v)
    scalar_graph("exp", lambda t: ad.tsum(ad.exp(t)), rng.normal(size=5))
    scalar_graph("log", lambda t: ad.tsum(ad.log(t)), rng.uniform(0.5, 2.0, size=5))
    scalar_graph("sqrt", lambda t: ad.tsum(ad.sqrt(t)), rng.uniform(0.5, 2.0, size=5))
    scalar_graph("square", lambda t: ad.tsum(ad.square(t)), rng.normal(size=5))
    scalar_graph("pow", lambda t: ad.tsum(ad.pow_const(t, 2.5)), rng.uniform(0.5, 2.0, size=5))
    scalar_graph("softmax", lambda t: ad.tsum(ad.square(ad.softmax(t))), rng.normal(size=6))
    scalar_graph("logsumexp", lambda t: ad.logsumexp(t), rng.normal(size=6))
    scalar_graph("mean", lambda t: ad.tmean(ad.square(t)), rng.normal(size=6))
    denom = rng.uniform(1.0, 2.0, size=5)
    scalar_graph("div", lambda t: ad.tsum(ad.div(t, Tensor(denom))), rng.normal(size=5))
    scalar_graph(
        "concat",
        lambda t: ad.tsum(ad.square(ad.concat([t, t * 2.0]))),
        rng.normal(size=4),
    )
    scalar_graph(
        "take_rows",
        lambda t: ad.tsum(ad.square(ad.take_rows(t, [0, 2, 2]))),
        rng.normal(size=(3, 3)),
    )
    scalar_graph("tile_rows", lambda t: ad.tsum(ad.square(ad.tile_rows(t, 3))), rng.normal(size=4))
    return results


def check_model_gradients(config: models.ModelConfig, seed: int = 0) -> list[CheckResult]:
    """Model and loss gradients w.r.t. every parameter tensor."""
    rng = np.random.default_rng(seed)
    model = models.ModelParams.init(config, rng)
    sampler = models.SamplerParams.init(config, rng)
    for t in sampler.tensors():  # move energies off the zero init
        t.data = rng.normal(0.0, 0.5, t.data.shape)
    x = rng.normal(size=config.input_dim)
    x2 = rng.normal(size=config.input_dim)
    label = int(rng.integers(config.num_identities))
    results = []

    def model_loss(params: models.ModelParams) -> Tensor:
        logits = models.classify(models.embed(Tensor(x), params), params)
        e1 = models.embed(Tensor(x), params)
        e2 = models.embed(Tensor(x2), params)
        return losses.cross_entropy(logits, label) + losses.distance(e1, e2)

    analytic = ad.flatten_arrays(ad.backward(model_loss(model), model.tensors()))

    def f_model(vec):
        return float(model_loss(models.ModelParams.from_vector(vec, model)).data)

    results.append(_check("model_ce_distance", f_model, model.to_vector(), analytic))

    emb = rng.normal(size=config.embed_dim)
    anchor = rng.normal(size=config.embed_dim)

    def sampler_energy(params: models.SamplerParams) -> Tensor:
        single = models.energy_single(Tensor(emb), params)
        pair = models.energy_pair(Tensor(emb), Tensor(anchor), params)
        return ad.square(single) + ad.square(pair)

    analytic_s = ad.flatten_arrays(ad.backward(sampler_energy(sampler), sampler.tensors()))

    def f_sampler(vec):
        return float(sampler_energy(models.SamplerParams.from_vector(vec, sampler)).data)

    results.append(_check("sampler_energies", f_sampler, sampler.to_vector(), analytic_s))

    emb_a = rng.normal(size=config.embed_dim)
    emb_p = emb_a + rng.normal(0, 0.1, size=config.embed_dim)
    emb_n = rng.normal(size=config.embed_dim) + 2.0  # active hinge, away from the kink
    leaf_a = Tensor(emb_a, requires_grad=True)
    tri = losses.triplet_loss(leaf_a, Tensor(emb_p), Tensor(emb_n), margin=5.0)
    (g_a,) = ad.backward(tri, [leaf_a])
    results.append(
        _check(
            "triplet_anchor",
            lambda v: float(
                losses.triplet_loss(Tensor(v), Tensor(emb_p), Tensor(emb_n), margin=5.0).data
            ),
            emb_a,
            g_a,
        )
    )

    logits0 = rng.normal(size=config.num_identities)
    leaf_l = Tensor(logits0, requires_grad=True)
    (g_f,) = ad.backward(losses.focal_loss(leaf_l, label, 2.0), [leaf_l])
    results.append(
        _check(
            "focal_logits",
            lambda v: float(losses.focal_loss(Tensor(v), label, 2.0).data),
            logits0,
            g_f,
        )
    )
    return results


def _tiny_problem(config: models.ModelConfig, seed: int, mode: str):
    rng = np.random.default_rng(seed)
    n = 12
    feats = rng.normal(size=(n, config.input_dim))
    labels = rng.integers(0, config.num_identities, size=n)
    # guarantee at least two samples of each identity for triplet assembly
    labels[: 2 * config.num_identities] = np.repeat(
        np.arange(config.num_identities), 2
    )
    model = models.ModelParams.init(config, rng)
    sampler = models.SamplerParams.init(config, rng)
    for t in sampler.tensors():
        t.data = rng.normal(0.0, 0.3, t.data.shape)
    eval_ids = rng.choice(n, size=4, replace=False)
    if mode == "single":
        update_ids = rng.choice(n, size=4, replace=False)
        batch = metagrad.MetaBatch(eval_ids=eval_ids, update_ids=update_ids)
    else:
        triplets = []
        for _ in range(3):
            anchor = int(rng.integers(n))
            same = np.flatnonzero((labels == labels[anchor]) & (np.arange(n) != anchor))
            diff = np.flatnonzero(labels != labels[anchor])
            pos_cands = tuple(int(i) for i in rng.choice(same, size=min(3, same.size), replace=False))
            neg_cands = tuple(int(i) for i in rng.choice(diff, size=min(4, diff.size), replace=False))
            triplets.append(
                metagrad.TripletDraw(
                    anchor=anchor,
                    positive=int(rng.choice(pos_cands)),
                    negative=int(rng.choice(neg_cands)),
                    pos_candidates=pos_cands,
                    neg_candidates=neg_cands,
                )
            )
        batch = metagrad.MetaBatch(eval_ids=eval_ids, triplets=tuple(triplets))
    return feats, labels, model, sampler, batch


def check_meta_gradient(
    config: models.ModelConfig,
    seed: int = 0,
    mode: str = "single",
    beta: float = 0.1,
    margin: float = 0.5,
    broken: bool = False,
) -> CheckResult:
    """FD check of the composed objective L_eval(E[w'(theta)]) w.r.t. theta."""
    feats, labels, model, sampler, batch = _tiny_problem(config, seed, mode)
    mg = metagrad.meta_gradient(
        model, sampler, feats, labels, batch, beta=beta, margin=margin, broken=broken
    )
    analytic = ad.flatten_arrays(mg.theta_grads)
    grads = mg.sample_grads

    def f(theta_vec):
        return metagrad.composed_eval_loss(
            theta_vec, model, sampler, feats, labels, batch, grads, beta
        )

    name = f"meta_{mode}" + ("_broken" if broken else "")
    return _check(name, f, sampler.to_vector(), analytic)


def run_suite(
    config: models.ModelConfig | None = None,
    seed: int = 0,
    break_meta: bool = False,
) -> list[CheckResult]:
    """The full check battery used by the command-line ``gradcheck``."""
    if config is None:
        config = models.ModelConfig(
            input_dim=3, hidden_dim=4, embed_dim=2, num_identities=3
        )
    results = check_op_gradients(seed)
    results += check_model_gradients(config, seed)
    results.append(check_meta_gradient(config, seed, mode="single", broken=break_meta))
    results.append(check_meta_gradient(config, seed, mode="triplet", broken=break_meta))
    return results

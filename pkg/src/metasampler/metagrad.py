"""Sampler training through the expectation-relaxed SGD step.

Drawing a batch is not differentiable, so the sampler is trained against the
*expected* weight update E[w'] = w - beta * sum_i p_i * g_i, where p_i are the
selection probabilities over a K-sample update batch and g_i the per-sample
loss gradients at w.  The sampler objective is the evaluation loss of the
expected-updated model on an independently (uniformly) drawn batch; its exact
gradient with respect to the sampler parameters is

    dL_eval/dp_i = -beta * (g_eval . g_i)          (g_i is sampler-free)
    grad_theta   = backprop of sum_i s_i * p_i(theta)

with s_i the scalar sensitivities above.  No second-order model derivatives
appear anywhere; this is the literal chain rule through E[w'].

In triplet mode p_i is the renormalized product of three policy factors
(anchor, positive-given-anchor, negative-given-anchor); the renormalized
product is computed in log space and pushed through one softmax, which is the
same function written stably.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses, models
from .autodiff import NumericalError, Tensor

PROB_SUM_TOL = 1e-9


@dataclass(frozen=True)
class TripletDraw:
    """One assembled triplet plus the candidate sets it was drawn from.

    The factor_* fields are the assembly-time selection probabilities (used
    for diagnostics); gradient computations rebuild the factors from the
    current sampler parameters.
    """

    anchor: int
    positive: int
    negative: int
    pos_candidates: tuple[int, ...]
    neg_candidates: tuple[int, ...]
    factor_anchor: float = 0.0
    factor_positive: float = 0.0
    factor_negative: float = 0.0


@dataclass(frozen=True)
class MetaBatch:
    """Update batch (policy-drawn) plus evaluation batch (uniformly drawn)."""

    eval_ids: np.ndarray
    update_ids: np.ndarray | None = None
    triplets: tuple[TripletDraw, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "eval_ids", np.asarray(self.eval_ids, dtype=np.int64))
        if self.update_ids is not None:
            object.__setattr__(
                self, "update_ids", np.asarray(self.update_ids, dtype=np.int64)
            )
        if self.eval_ids.size < 1:
            raise ValueError("MetaBatch: empty eval batch")
        if self.size < 1:
            raise ValueError("MetaBatch: empty update batch")

    @property
    def size(self) -> int:
        if self.update_ids is not None:
            return int(self.update_ids.size)
        return len(self.triplets)


@dataclass
class ExpectedUpdate:
    """E[w'] = base - step_size * sum_i probs[i] * grads[i]."""

    base: np.ndarray
    step_size: float
    probs: np.ndarray
    grads: np.ndarray
    expected: np.ndarray = field(init=False)

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.grads = np.asarray(self.grads, dtype=np.float64)
        if self.grads.ndim != 2 or self.grads.shape[0] != self.probs.size:
            raise ValueError(
                f"ExpectedUpdate: {self.probs.size} probs vs grads {self.grads.shape}"
            )
        if self.grads.shape[1] != self.base.size:
            raise ValueError(
                f"ExpectedUpdate: grads width {self.grads.shape[1]} vs base {self.base.size}"
            )
        if abs(self.probs.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"ExpectedUpdate: probs sum to {self.probs.sum()!r}")
        self.expected = self.base - self.step_size * (self.probs @ self.grads)


def expected_update(
    base: np.ndarray, step_size: float, probs: np.ndarray, grads: np.ndarray
) -> ExpectedUpdate:
    return ExpectedUpdate(base=base, step_size=step_size, probs=probs, grads=grads)


def triplet_weight(p_anchor: float, p_positive: float, p_negative: float) -> float:
    """Joint selection weight of a triplet: the product of its three factors."""
    return float(p_anchor) * float(p_positive) * float(p_negative)


def expected_loss(
    probs: np.ndarray,
    feats: np.ndarray,
    labels: np.ndarray,
    model: models.ModelParams,
) -> float:
    """Probability-weighted cross-entropy over a batch (values only)."""
    probs = np.asarray(probs, dtype=np.float64)
    if abs(probs.sum() - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"expected_loss: probs sum to {probs.sum()!r}, not 1")
    if probs.size != len(feats):
        raise ValueError("expected_loss: probs/batch length mismatch")
    logits = models.classify(models.embed(Tensor(feats), model), model)
    per_sample = ad.logsumexp(logits, axis=1) - ad.pick_rows(logits, labels)
    return float(probs @ per_sample.data)


def update_batch_probs(
    model: models.ModelParams,
    sampler: models.SamplerParams,
    feats: np.ndarray,
    labels: np.ndarray,
    batch: MetaBatch,
    broken: bool = False,
) -> Tensor:
    """Selection probabilities of the update batch as a sampler-parameter graph.

    Embeddings enter as constants (within an iteration the model does not
    depend on the sampler).  Single-image mode: softmax of the batch energies,
    which equals the full-dataset policy renormalized to the batch.  Triplet
    mode: softmax of the per-triplet log weights
    log-anchor-energy + log p(pos | anchor) + log p(neg | anchor).

    ``broken`` detaches the softmax denominator; it exists purely as a
    negative control for the gradient checker and must never be used in
    training.
    """
    if batch.update_ids is not None:
        embs = Tensor(models.embed_array(feats[batch.update_ids], model))
        logits = models.energy_single(embs, sampler)
    else:
        logits = _triplet_log_weights(model, sampler, feats, batch.triplets)
    if not broken:
        return ad.softmax(logits)
    shifted = logits - float(logits.data.max())
    e = ad.exp(shifted)
    return e / float(e.data.sum())  # denominator detached: wrong Jacobian


def _triplet_log_weights(model, sampler, feats, triplets) -> Tensor:
    parts = []
    for t in triplets:
        anchor_emb = Tensor(models.embed_array(feats[t.anchor], model))
        log_w = models.energy_single(anchor_emb, sampler)
        for chosen, candidates in (
            (t.positive, t.pos_candidates),
            (t.negative, t.neg_candidates),
        ):
            cand = np.asarray(candidates, dtype=np.int64)
            pos = int(np.flatnonzero(cand == chosen)[0])
            cand_embs = Tensor(models.embed_array(feats[cand], model))
            energies = models.energy_pair(cand_embs, anchor_emb, sampler)
            log_w = log_w + (ad.pick(energies, pos) - ad.logsumexp(energies))
        parts.append(log_w)
    return ad.stack_scalars(parts)


def per_sample_update_grads(
    model: models.ModelParams,
    feats: np.ndarray,
    labels: np.ndarray,
    batch: MetaBatch,
    margin: float,
    metric: str,
) -> np.ndarray:
    """Per-sample (or per-triplet) flat loss gradients at the current weights."""
    wrt = model.tensors()
    if batch.update_ids is not None:

        def ce_loss(idx):
            logits = models.classify(models.embed(Tensor(feats[idx]), model), model)
            return losses.cross_entropy(logits, int(labels[idx]))

        return ad.per_sample_gradients(list(batch.update_ids), ce_loss, wrt)

    def tri_loss(t: TripletDraw):
        a = models.embed(Tensor(feats[t.anchor]), model)
        p = models.embed(Tensor(feats[t.positive]), model)
        n = models.embed(Tensor(feats[t.negative]), model)
        return losses.triplet_loss(a, p, n, margin, metric)

    return ad.per_sample_gradients(list(batch.triplets), tri_loss, wrt)


def eval_loss_and_grad(
    weight_vec: np.ndarray,
    like: models.ModelParams,
    feats: np.ndarray,
    labels: np.ndarray,
    eval_ids: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the eval batch at given flat weights, and its gradient."""
    params = models.ModelParams.from_vector(weight_vec, like)
    logits = models.classify(models.embed(Tensor(feats[eval_ids]), params), params)
    loss = losses.cross_entropy_mean(logits, labels[eval_ids])
    grad = ad.flatten_arrays(ad.backward(loss, params.tensors()))
    return float(loss.data), grad


def eval_loss_value(
    weight_vec: np.ndarray,
    like: models.ModelParams,
    feats: np.ndarray,
    labels: np.ndarray,
    eval_ids: np.ndarray,
) -> float:
    params = models.ModelParams.from_vector(weight_vec, like)
    logits = models.classify(models.embed(Tensor(feats[eval_ids]), params), params)
    return float(losses.cross_entropy_mean(logits, labels[eval_ids]).data)


@dataclass
class MetaGradient:
    theta_grads: list[np.ndarray]
    probs: np.ndarray
    sample_grads: np.ndarray
    eval_loss: float
    eval_grad: np.ndarray
    updated: bool


def meta_gradient(
    model: models.ModelParams,
    sampler: models.SamplerParams,
    feats: np.ndarray,
    labels: np.ndarray,
    batch: MetaBatch,
    *,
    beta: float,
    margin: float = 0.3,
    metric: str = "euclidean",
    broken: bool = False,
) -> MetaGradient:
    """Exact gradient of the eval loss at E[w'] w.r.t. the sampler parameters."""
    probs_t = update_batch_probs(model, sampler, feats, labels, batch, broken=broken)
    grads = per_sample_update_grads(model, feats, labels, batch, margin, metric)
    update = expected_update(model.to_vector(), beta, probs_t.data, grads)
    eval_loss, eval_grad = eval_loss_and_grad(
        update.expected, model, feats, labels, batch.eval_ids
    )
    if not eval_grad.any():
        zeros = [np.zeros_like(t.data) for t in sampler.tensors()]
        return MetaGradient(zeros, probs_t.data, grads, eval_loss, eval_grad, False)
    sensitivities = -beta * (grads @ eval_grad)
    if not np.all(np.isfinite(sensitivities)):
        raise NumericalError(
            f"meta_gradient: non-finite sensitivities {sensitivities!r} "
            f"(beta={beta}, eval_loss={eval_loss})"
        )
    surrogate = ad.dot(Tensor(sensitivities), probs_t)
    theta_grads = ad.backward(surrogate, sampler.tensors())
    return MetaGradient(theta_grads, probs_t.data, grads, eval_loss, eval_grad, True)


@dataclass
class MetaStepInfo:
    eval_loss_before: float
    eval_loss_after: float
    grad_norm: float
    policy_entropy: float
    probs: np.ndarray
    updated: bool


def sampler_meta_step(
    model: models.ModelParams,
    sampler: models.SamplerParams,
    feats: np.ndarray,
    labels: np.ndarray,
    batch: MetaBatch,
    *,
    beta: float,
    alpha: float,
    margin: float = 0.3,
    metric: str = "euclidean",
) -> tuple[models.SamplerParams, MetaStepInfo]:
    """One sampler update; returns the new parameters and a diagnostic record.

    The input sampler is not mutated.  A zero eval gradient leaves the sampler
    unchanged; non-finite sensitivities raise :class:`NumericalError`.
    """
    mg = meta_gradient(
        model, sampler, feats, labels, batch, beta=beta, margin=margin, metric=metric
    )
    p = mg.probs[mg.probs > 0]
    pol_entropy = float(-(p * np.log(p)).sum())
    if not mg.updated:
        info = MetaStepInfo(mg.eval_loss, mg.eval_loss, 0.0, pol_entropy, mg.probs, False)
        return sampler.copy(), info
    new_sampler = sampler.copy()
    for tensor, grad in zip(new_sampler.tensors(), mg.theta_grads):
        tensor.data = tensor.data - alpha * grad
    probs_after = update_batch_probs(model, new_sampler, feats, labels, batch).data
    after_update = expected_update(model.to_vector(), beta, probs_after, mg.sample_grads)
    loss_after = eval_loss_value(
        after_update.expected, model, feats, labels, batch.eval_ids
    )
    grad_norm = float(np.sqrt(sum(float((g * g).sum()) for g in mg.theta_grads)))
    info = MetaStepInfo(mg.eval_loss, loss_after, grad_norm, pol_entropy, mg.probs, True)
    return new_sampler, info


def composed_eval_loss(
    theta_vec: np.ndarray,
    model: models.ModelParams,
    sampler_like: models.SamplerParams,
    feats: np.ndarray,
    labels: np.ndarray,
    batch: MetaBatch,
    sample_grads: np.ndarray,
    beta: float,
) -> float:
    """Forward-only objective theta -> L_eval(E[w'(theta)]) for gradient checks.

    ``sample_grads`` are held fixed (they do not depend on the sampler), so
    finite differences over this map probe exactly the path the analytic
    gradient claims to differentiate.
    """
    sampler = models.SamplerParams.from_vector(theta_vec, sampler_like)
    probs = update_batch_probs(model, sampler, feats, labels, batch).data
    update = expected_update(model.to_vector(), beta, probs, sample_grads)
    return eval_loss_value(update.expected, model, feats, labels, batch.eval_ids)

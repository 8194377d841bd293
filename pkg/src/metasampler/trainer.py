"""End-to-end training loop with pluggable sampling strategies.

Per iteration: (1) assemble an update batch with the configured sampler kind,
(2) one SGD step on the mean batch loss (cross-entropy in single-image mode,
cross-entropy plus margin triplet loss in triplet mode, weight decay as an L2
term), then — for the learned kind only — (3) draw a fresh policy batch and a
uniform evaluation batch and take one sampler meta-step.

The learned kind keeps a full-train-set policy cache that is recomputed every
``refresh_period`` iterations (default: once per epoch).  Triplet batches are
assembled semi-globally: anchors come from the cached single-image policy,
positive/negative candidate sets are drawn from the same cache restricted by
identity, and the final pair is drawn from the pairwise-energy softmax over
each candidate set.

Reproducibility contract: one seeded generator drives the whole run, consumed
in a fixed order per iteration — update-batch draw, then (learned only)
policy-batch draw, then eval-batch draw.  Policy refreshes consume no
randomness.  Runs with equal configs and seeds are bit-identical.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses, metagrad, metrics, models, policy as policy_mod
from .autodiff import NumericalError, Tensor
from .data import Dataset
from .metagrad import MetaBatch, TripletDraw

SAMPLER_KINDS = ("uniform", "learned", "ohem", "semihard", "focal", "upsample")
MODES = ("single", "triplet")


class TrainerError(Exception):
    pass


class StaleCacheError(TrainerError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "single"
    sampler: str = "uniform"
    epochs: int = 60
    batch_size: int = 32  # K, single-image update/policy batches
    eval_batch_size: int = 64  # M, uniform eval batches for the sampler
    anchors_per_batch: int = 8  # triplet batches: one triplet per anchor
    pos_candidates: int = 8
    neg_candidates: int = 16
    ohem_images_per_id: int = 4
    base_lr: float = 0.02
    peak_lr: float = 0.2
    warmup_epochs: int = 10
    milestones: tuple[int, ...] = (15, 30, 48)
    lr_decay: float = 0.1
    weight_decay: float = 5e-4
    sampler_lr: float = 1e-3  # alpha
    sampler_start_epoch: int | None = None  # None: sampler steps begin after warmup
    margin: float = 0.3
    focal_gamma: float = 2.0
    metric: str = "euclidean"
    refresh_period: int | None = None  # None: once per epoch
    with_replacement: bool = False
    seed: int = 0
    hidden_dim: int = 16
    embed_dim: int = 8
    sampler_hidden: int | None = None
    iters_per_epoch: int | None = None
    divergence_threshold: float = 1e6
    trace: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.sampler not in SAMPLER_KINDS:
            raise ValueError(
                f"unknown sampler {self.sampler!r}; valid kinds: {', '.join(SAMPLER_KINDS)}"
            )
        if self.mode == "single" and self.sampler in ("ohem", "semihard"):
            raise ValueError(f"sampler {self.sampler!r} requires triplet mode")
        if self.mode == "triplet" and self.sampler in ("focal", "upsample"):
            raise ValueError(f"sampler {self.sampler!r} requires single-image mode")
        for name in (
            "epochs",
            "batch_size",
            "eval_batch_size",
            "anchors_per_batch",
            "pos_candidates",
            "neg_candidates",
            "ohem_images_per_id",
            "hidden_dim",
            "embed_dim",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be >= 1")
        if self.refresh_period is not None and self.refresh_period < 1:
            raise ValueError("TrainConfig.refresh_period must be >= 1")
        if self.sampler_start_epoch is not None and self.sampler_start_epoch < 0:
            raise ValueError("TrainConfig.sampler_start_epoch must be >= 0")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 1:
            raise ValueError("TrainConfig.iters_per_epoch must be >= 1")
        if self.margin < 0:
            raise ValueError("TrainConfig.margin must be >= 0")
        if self.metric not in losses.METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["milestones"] = list(self.milestones)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "milestones" in payload:
            payload = dict(payload)
            payload["milestones"] = tuple(payload["milestones"])
        return cls(**payload)


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Linear warmup to the peak rate, then x decay at each milestone."""
    if config.warmup_epochs > 0 and epoch < config.warmup_epochs:
        frac = epoch / config.warmup_epochs
        lr = config.base_lr + (config.peak_lr - config.base_lr) * frac
    else:
        lr = config.peak_lr
    for milestone in config.milestones:
        if epoch >= milestone:
            lr *= config.lr_decay
    return lr


@dataclass
class PolicyCache:
    """Full-train-set single-image policy, stamped with its refresh iteration."""

    policy: policy_mod.SamplingPolicy
    iteration: int

    def read(self, iteration: int, period: int) -> policy_mod.SamplingPolicy:
        if iteration - self.iteration >= period:
            raise StaleCacheError(
                f"policy cache from iteration {self.iteration} read at {iteration} "
                f"(refresh period {period})"
            )
        return self.policy


def refresh_policy(
    dataset: Dataset, model: models.ModelParams, sampler: models.SamplerParams
) -> policy_mod.SamplingPolicy:
    """Softmax policy over the whole train split from current energies."""
    train_rows = dataset.train_ids
    embs = models.embed_array(dataset.features[train_rows], model)
    energies = models.energy_single(Tensor(embs), sampler).data
    return policy_mod.softmax_policy(train_rows, energies)


def reid_update(
    model: models.ModelParams,
    dataset: Dataset,
    batch,
    beta: float,
    config: TrainConfig,
) -> float:
    """One SGD step on the mean batch loss; returns the (pre-decay) loss value.

    ``batch`` is an id array in single-image mode or a list of
    :class:`TripletDraw` in triplet mode.  Weight decay enters as an L2 term
    on every parameter.
    """
    loss = _batch_loss(model, dataset, batch, config)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericalError(f"reid_update: non-finite loss {value!r}")
    grads = ad.backward(loss, model.tensors())
    for tensor, grad in zip(model.tensors(), grads):
        tensor.data = tensor.data - beta * (grad + config.weight_decay * tensor.data)
    return value


def _batch_loss(model, dataset: Dataset, batch, config: TrainConfig) -> Tensor:
    if config.mode == "single":
        ids = np.asarray(batch, dtype=np.int64)
        if ids.size == 0:
            raise TrainerError("reid_update: empty batch")
        logits = models.classify(
            models.embed(Tensor(dataset.features[ids]), model), model
        )
        if config.sampler == "focal":
            return losses.focal_loss_mean(logits, dataset.labels[ids], config.focal_gamma)
        return losses.cross_entropy_mean(logits, dataset.labels[ids])
    triplets: list[TripletDraw] = list(batch)
    if not triplets:
        raise TrainerError("reid_update: empty triplet batch")
    member_ids = np.array(
        [i for t in triplets for i in (t.anchor, t.positive, t.negative)], dtype=np.int64
    )
    embs = models.embed(Tensor(dataset.features[member_ids]), model)
    logits = models.classify(embs, model)
    ce = losses.cross_entropy_mean(logits, dataset.labels[member_ids])
    base = np.arange(len(triplets)) * 3
    a_embs = ad.take_rows(embs, base)
    p_embs = ad.take_rows(embs, base + 1)
    n_embs = ad.take_rows(embs, base + 2)
    d_ap = losses.batch_distance(a_embs, p_embs, config.metric)
    d_an = losses.batch_distance(a_embs, n_embs, config.metric)
    tri = ad.tmean(ad.relu(d_ap - d_an + config.margin))
    return ce + tri


def assemble_triplet_batch(
    dataset: Dataset,
    model: models.ModelParams,
    sampler: models.SamplerParams,
    cache: PolicyCache,
    config: TrainConfig,
    rng: np.random.Generator,
    iteration: int,
) -> list[TripletDraw]:
    """Semi-global triplet assembly driven by the learned policies.

    Anchors are drawn from the cached single-image policy; candidate sets are
    drawn from the same cache restricted to the anchor's identity (positives,
    anchor excluded) or to all other identities (negatives); the pair is then
    drawn from the pairwise-energy softmax over each candidate set.  All three
    selection probabilities are recorded on the draw.
    """
    period = _refresh_period(config, dataset)
    base_policy = cache.read(iteration, period)
    labels = dataset.labels
    triplets: list[TripletDraw] = []
    chosen_anchors: set[int] = set()
    for _ in range(config.anchors_per_batch):
        anchor = None
        for _attempt in range(10):
            candidate_ids = np.array(
                [i for i in base_policy.ids if i not in chosen_anchors], dtype=np.int64
            )
            if candidate_ids.size == 0:
                raise TrainerError("assemble_triplet_batch: ran out of anchors")
            restricted = policy_mod.normalize_subset(base_policy, candidate_ids)
            pick = int(policy_mod.draw(restricted, 1, rng)[0])
            same = np.flatnonzero(
                (labels == labels[pick]) & (dataset.split == "train")
            )
            if same.size >= 2:
                anchor = pick
                break
        if anchor is None:
            raise TrainerError(
                "assemble_triplet_batch: no identity with >= 2 train samples found "
                "in 10 anchor draws"
            )
        chosen_anchors.add(anchor)
        pos_pool = same[same != anchor]
        neg_pool = np.array(
            [i for i in base_policy.ids if labels[i] != labels[anchor]], dtype=np.int64
        )
        if neg_pool.size == 0:
            raise TrainerError("assemble_triplet_batch: dataset has a single identity")
        pos_cands = _draw_candidates(base_policy, pos_pool, config.pos_candidates, rng)
        neg_cands = _draw_candidates(base_policy, neg_pool, config.neg_candidates, rng)
        anchor_emb = models.embed_array(dataset.features[anchor], model)
        positive, p_pos = _draw_pairwise(
            dataset, model, sampler, anchor_emb, pos_cands, rng
        )
        negative, p_neg = _draw_pairwise(
            dataset, model, sampler, anchor_emb, neg_cands, rng
        )
        triplets.append(
            TripletDraw(
                anchor=anchor,
                positive=positive,
                negative=negative,
                pos_candidates=tuple(int(i) for i in pos_cands),
                neg_candidates=tuple(int(i) for i in neg_cands),
                factor_anchor=base_policy.prob_of(anchor),
                factor_positive=p_pos,
                factor_negative=p_neg,
            )
        )
    return triplets


def _draw_candidates(base_policy, pool: np.ndarray, size: int, rng) -> np.ndarray:
    restricted = policy_mod.normalize_subset(base_policy, pool)
    return policy_mod.draw(restricted, min(size, pool.size), rng)


def _draw_pairwise(dataset, model, sampler, anchor_emb, candidates, rng):
    cand_embs = models.embed_array(dataset.features[candidates], model)
    energies = models.energy_pair(Tensor(cand_embs), Tensor(anchor_emb), sampler).data
    pair_policy = policy_mod.softmax_policy(candidates, energies)
    chosen = int(policy_mod.draw(pair_policy, 1, rng)[0])
    return chosen, pair_policy.prob_of(chosen)


def _uniform_triplets(dataset, config, rng, eligible_anchors) -> list[TripletDraw]:
    labels = dataset.labels
    train_rows = dataset.train_ids
    triplets = []
    for _ in range(config.anchors_per_batch):
        anchor = int(rng.choice(eligible_anchors))
        same = train_rows[(labels[train_rows] == labels[anchor]) & (train_rows != anchor)]
        diff = train_rows[labels[train_rows] != labels[anchor]]
        triplets.append(
            TripletDraw(
                anchor=anchor,
                positive=int(rng.choice(same)),
                negative=int(rng.choice(diff)),
                pos_candidates=(),
                neg_candidates=(),
            )
        )
    return triplets


def _pk_batch(dataset, config, rng) -> np.ndarray:
    """Identity-grouped batch for the OHEM/semi-hard baselines."""
    train_rows = dataset.train_ids
    counts = np.bincount(dataset.labels[train_rows], minlength=dataset.num_identities)
    idents = np.flatnonzero(counts >= 2)
    take = min(config.anchors_per_batch, idents.size)
    chosen = rng.choice(idents, size=take, replace=False)
    rows = []
    for ident in chosen:
        members = train_rows[dataset.labels[train_rows] == ident]
        k = min(config.ohem_images_per_id, members.size)
        rows.extend(int(r) for r in rng.choice(members, size=k, replace=False))
    return np.array(rows, dtype=np.int64)


def _hard_mined_triplets(dataset, model, config, rng) -> list[TripletDraw]:
    rows = _pk_batch(dataset, config, rng)
    embs = models.embed_array(dataset.features[rows], model)
    emb_map = {int(r): embs[i] for i, r in enumerate(rows)}
    if config.sampler == "ohem":
        raw = policy_mod.ohem_select(rows, dataset.labels[rows], emb_map, config.metric)
    else:
        raw = []
        labels = dataset.labels
        for anchor in sorted(int(r) for r in rows):
            pos = [int(r) for r in rows if labels[r] == labels[anchor] and r != anchor]
            neg = [int(r) for r in rows if labels[r] != labels[anchor]]
            if not pos or not neg:
                continue
            raw.append(
                policy_mod.semihard_select(
                    anchor, pos, neg, emb_map, config.margin, rng, config.metric
                )
            )
    return [
        TripletDraw(anchor=a, positive=p, negative=n, pos_candidates=(), neg_candidates=())
        for a, p, n in raw
    ]


def _upsample_policy(dataset: Dataset) -> policy_mod.SamplingPolicy:
    """Static policy equivalent to repeating few-shot identities to the median count."""
    train_rows = dataset.train_ids
    counts = np.bincount(dataset.labels[train_rows], minlength=dataset.num_identities)
    present = counts[counts > 0]
    target = float(np.median(present))
    weights = np.array(
        [max(1.0, target / counts[dataset.labels[r]]) for r in train_rows]
    )
    return policy_mod.weighted_policy(train_rows, weights)


def _refresh_period(config: TrainConfig, dataset: Dataset) -> int:
    if config.refresh_period is not None:
        return config.refresh_period
    return _iters_per_epoch(config, dataset)


def _iters_per_epoch(config: TrainConfig, dataset: Dataset) -> int:
    if config.iters_per_epoch is not None:
        return config.iters_per_epoch
    n_train = dataset.train_ids.size
    if config.mode == "single":
        return max(1, n_train // config.batch_size)
    return max(1, n_train // (3 * config.anchors_per_batch))


@dataclass
class RunResult:
    config: TrainConfig
    status: str  # "ok" | "diverged"
    epoch_metrics: list[dict]
    final_metrics: dict
    refresh_log: list[dict]
    model: models.ModelParams
    sampler: models.SamplerParams
    model_config: models.ModelConfig
    trace: list[dict] = field(default_factory=list)


def run(config: TrainConfig, dataset: Dataset) -> RunResult:
    """Train a model on the dataset's train split under the configured sampler.

    Deterministic given (config, dataset): a single generator seeded with
    ``config.seed`` drives every draw in the documented order.  Divergence
    (non-finite or huge loss) stops the run early with status "diverged".
    """
    rng = np.random.default_rng(config.seed)
    model_config = models.ModelConfig(
        input_dim=dataset.input_dim,
        hidden_dim=config.hidden_dim,
        embed_dim=config.embed_dim,
        num_identities=dataset.num_identities,
        sampler_hidden=config.sampler_hidden,
    )
    model = models.ModelParams.init(model_config, rng)
    sampler = models.SamplerParams.init(model_config, rng)
    train_rows = dataset.train_ids
    if train_rows.size == 0:
        raise TrainerError("run: dataset has no train split")
    iters = _iters_per_epoch(config, dataset)
    period = _refresh_period(config, dataset)
    needs_cache = config.sampler == "learned"
    static_policy = _upsample_policy(dataset) if config.sampler == "upsample" else None
    eligible_anchors = _eligible_anchor_rows(dataset)
    if config.mode == "triplet" and eligible_anchors.size == 0:
        raise TrainerError("run: no identity has >= 2 train samples")

    sampler_start = (
        config.warmup_epochs
        if config.sampler_start_epoch is None
        else config.sampler_start_epoch
    )
    cache: PolicyCache | None = None
    status = "ok"
    epoch_rows: list[dict] = []
    refresh_log: list[dict] = []
    trace: list[dict] = []
    iteration = 0
    for epoch in range(config.epochs):
        beta = lr_schedule(config, epoch)
        epoch_losses: list[float] = []
        meta_before: list[float] = []
        meta_after: list[float] = []
        stop = False
        for _ in range(iters):
            if needs_cache and (cache is None or iteration - cache.iteration >= period):
                cache = PolicyCache(refresh_policy(dataset, model, sampler), iteration)
                refresh_log.append(_refresh_record(cache, dataset, epoch))
            try:
                batch = _draw_update_batch(
                    dataset, model, sampler, cache, static_policy,
                    eligible_anchors, config, rng, iteration,
                )
                loss = reid_update(model, dataset, batch, beta, config)
                if loss > config.divergence_threshold:
                    raise NumericalError(f"loss {loss} above divergence threshold")
                epoch_losses.append(loss)
                if config.sampler == "learned" and epoch >= sampler_start:
                    meta_batch = _draw_meta_batch(
                        dataset, model, sampler, cache, config, rng, iteration
                    )
                    sampler, info = metagrad.sampler_meta_step(
                        model,
                        sampler,
                        dataset.features,
                        dataset.labels,
                        meta_batch,
                        beta=beta,
                        alpha=config.sampler_lr,
                        margin=config.margin,
                        metric=config.metric,
                    )
                    meta_before.append(info.eval_loss_before)
                    meta_after.append(info.eval_loss_after)
                    if config.trace:
                        trace.append(
                            {
                                "iteration": iteration,
                                "eval_loss_before": info.eval_loss_before,
                                "eval_loss_after": info.eval_loss_after,
                                "grad_norm": info.grad_norm,
                                "policy_entropy": info.policy_entropy,
                            }
                        )
            except NumericalError:
                status = "diverged"
                stop = True
                break
            iteration += 1
        epoch_rows.append(
            _epoch_record(
                epoch, epoch_losses, meta_before, meta_after, cache, dataset, model, config
            )
        )
        if stop:
            break
    final = epoch_rows[-1] if epoch_rows else {}
    return RunResult(
        config=config,
        status=status,
        epoch_metrics=epoch_rows,
        final_metrics={
            k: final.get(k) for k in ("mAP", "rank1", "rank5", "train_loss")
        },
        refresh_log=refresh_log,
        model=model,
        sampler=sampler,
        model_config=model_config,
        trace=trace,
    )


def _eligible_anchor_rows(dataset: Dataset) -> np.ndarray:
    train_rows = dataset.train_ids
    counts = np.bincount(dataset.labels[train_rows], minlength=dataset.num_identities)
    return train_rows[counts[dataset.labels[train_rows]] >= 2]


def _draw_update_batch(
    dataset, model, sampler, cache, static_policy, eligible_anchors, config, rng, iteration
):
    if config.mode == "single":
        if config.sampler in ("uniform", "focal"):
            return rng.choice(dataset.train_ids, size=config.batch_size, replace=False)
        if config.sampler == "upsample":
            return policy_mod.draw(
                static_policy, config.batch_size, rng, replace=config.with_replacement
            )
        period = _refresh_period(config, dataset)
        return policy_mod.draw(
            cache.read(iteration, period),
            config.batch_size,
            rng,
            replace=config.with_replacement,
        )
    if config.sampler == "uniform":
        return _uniform_triplets(dataset, config, rng, eligible_anchors)
    if config.sampler in ("ohem", "semihard"):
        return _hard_mined_triplets(dataset, model, config, rng)
    return assemble_triplet_batch(dataset, model, sampler, cache, config, rng, iteration)


def _draw_meta_batch(dataset, model, sampler, cache, config, rng, iteration) -> MetaBatch:
    eval_size = min(config.eval_batch_size, dataset.train_ids.size)
    if config.mode == "single":
        period = _refresh_period(config, dataset)
        update_ids = policy_mod.draw(
            cache.read(iteration, period),
            config.batch_size,
            rng,
            replace=config.with_replacement,
        )
        eval_ids = rng.choice(dataset.train_ids, size=eval_size, replace=False)
        return MetaBatch(eval_ids=eval_ids, update_ids=update_ids)
    triplets = assemble_triplet_batch(
        dataset, model, sampler, cache, config, rng, iteration
    )
    eval_ids = rng.choice(dataset.train_ids, size=eval_size, replace=False)
    return MetaBatch(eval_ids=eval_ids, triplets=tuple(triplets))


def _refresh_record(cache: PolicyCache, dataset: Dataset, epoch: int) -> dict:
    record = {
        "iteration": cache.iteration,
        "epoch": epoch,
        "policy_entropy": policy_mod.entropy(cache.policy),
        "hard_mass": None,
    }
    if dataset.hard is not None:
        hard_rows = dataset.hard[cache.policy.ids]
        record["hard_mass"] = float(cache.policy.probs[hard_rows].sum())
    return record


def _epoch_record(
    epoch, epoch_losses, meta_before, meta_after, cache, dataset, model, config
) -> dict:
    retrieval = metrics.evaluate_retrieval(dataset, model, config.metric)
    return {
        "epoch": epoch,
        "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
        "eval_loss_expected": float(np.mean(meta_before)) if meta_before else float("nan"),
        "eval_loss_expected_after": float(np.mean(meta_after)) if meta_after else float("nan"),
        "mAP": retrieval["mAP"],
        "rank1": retrieval["rank1"],
        "rank5": retrieval["rank5"],
        "policy_entropy": (
            policy_mod.entropy(cache.policy) if cache is not None else float("nan")
        ),
    }

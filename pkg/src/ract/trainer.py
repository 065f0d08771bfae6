"""Three-stage ranking-critical training.

1. pre-train the actor on the annealed ELBO,
2. pre-train the critic on oracle ranking scores with the actor frozen,
3. alternate one actor step (ascending the critic's estimate) and one
   critic step per batch.

All randomness is derived from ``(seed, stage, epoch)`` so a run resumed
from an epoch-boundary checkpoint replays exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .actor import Actor, ActorConfig
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .critic import FEATURE_NAMES, Critic, actor_objective, critic_loss, feature_matrix, oracle_targets_for_batch
from .data import SplitSpec, batch_iter, fold_in_split, sample_mask_dense, split_users
from .metrics import MetricSpec, batch_scores
from .nn import AdamState, BatchNormState, adam_step

log = logging.getLogger(__name__)

CSV_COLUMNS = ("stage", "epoch", "train_loss", "val_ndcg", "val_recall", "critic_mse", "wall_seconds")
EVAL_CHUNK = 256


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    stage1_epochs: int = 40
    stage2_epochs: int = 10
    stage3_epochs: int = 15
    beta_max: float = 0.2
    anneal_epochs: int = 25
    fix_epochs: int = 15
    batch_size: int = 250
    eval_every: int = 1
    seed: int = 1
    critic_metric: MetricSpec = MetricSpec("ndcg", 20)
    alpha: float = 0.5
    holdout_fraction: float = 0.2
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    lr_actor_ac: float = 3e-5
    actor_bn_mode: str = "eval"

    def __post_init__(self):
        if self.anneal_epochs + self.fix_epochs != self.stage1_epochs:
            raise ValueError(
                f"anneal_epochs ({self.anneal_epochs}) + fix_epochs ({self.fix_epochs}) "
                f"must equal stage1_epochs ({self.stage1_epochs})"
            )
        if self.beta_max < 0:
            raise ValueError("beta_max must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if min(self.stage1_epochs, self.stage2_epochs, self.stage3_epochs) < 0 or self.eval_every < 1:
            raise ValueError("epoch counts must be >= 0 and eval_every >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.actor_bn_mode not in ("train", "eval"):
            raise ValueError("actor_bn_mode must be 'train' or 'eval'")

    @classmethod
    def ml20m(cls, **overrides):
        """Full-scale schedule used for MovieLens-20M."""
        base = dict(
            stage1_epochs=150, stage2_epochs=50, stage3_epochs=50, beta_max=0.2,
            anneal_epochs=100, fix_epochs=50, batch_size=500,
            critic_metric=MetricSpec("ndcg", 100),
        )
        return cls(**{**base, **overrides})

    def epochs(self, stage):
        return (self.stage1_epochs, self.stage2_epochs, self.stage3_epochs)[stage - 1]

    def to_dict(self):
        d = asdict(self)
        d["critic_metric"] = str(self.critic_metric)
        return d

    @classmethod
    def from_dict(cls, d):
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in types:
                raise ValueError(f"unknown schedule key {k!r}")
            if k == "critic_metric":
                out[k] = v if isinstance(v, MetricSpec) else MetricSpec.parse(v)
            elif isinstance(v, str) and types[k] in ("int", "float"):
                out[k] = int(v) if types[k] == "int" else float(v)
            else:
                out[k] = v
        return cls(**out)


def beta_at_epoch(schedule, epoch):
    """Linear KL-weight ramp over ``anneal_epochs`` (0-based epoch), then flat."""
    if schedule.anneal_epochs <= 0:
        return schedule.beta_max
    return schedule.beta_max * min(1.0, (epoch + 1) / schedule.anneal_epochs)


# -- evaluation -----------------------------------------------------------


@dataclass
class FoldIn:
    """Frozen fold-in partition for a set of held-out users."""

    users: np.ndarray  # evaluable users only
    observed: np.ndarray  # dense (n, M) 0/1
    target: np.ndarray  # dense (n, M) 0/1, the full history
    n_interactions: np.ndarray

    @classmethod
    def build(cls, matrix, users, holdout_fraction, seed):
        keep, obs_rows = [], []
        for u in users:
            split = fold_in_split(matrix.row(u), holdout_fraction, seed, int(u))
            if split is None:
                continue
            keep.append(int(u))
            obs_rows.append(split.observed)
        keep = np.asarray(keep, dtype=np.int64)
        observed = np.zeros((keep.size, matrix.n_items))
        for i, rows in enumerate(obs_rows):
            observed[i, rows] = 1.0
        target = matrix.dense_rows(keep)
        return cls(keep, observed, target, target.sum(axis=1).astype(np.int64))


def n_threads():
    try:
        return max(1, int(os.environ.get("RACT_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


@dataclass
class EvalResult:
    users: np.ndarray
    per_user: dict  # str(metric) -> array
    n_interactions: np.ndarray

    def mean(self, metric):
        return float(np.mean(self.per_user[str(metric)]))

    @property
    def means(self):
        return {k: float(np.mean(v)) for k, v in self.per_user.items()}


def evaluate(actor, fold_in, metrics, threads=None):
    """Score every evaluable user: predict from the observed part, rank the rest.

    Work is cut into fixed chunks (independent of thread count) and merged in
    user order, so results are identical however many threads run.
    """
    if fold_in.users.size == 0:
        raise TrainingError("no evaluable users (every held-out user has < 2 interactions)")
    metrics = [m if isinstance(m, MetricSpec) else MetricSpec.parse(m) for m in metrics]
    cutoffs = sorted({m.cutoff for m in metrics})
    starts = range(0, fold_in.users.size, EVAL_CHUNK)

    def run(start):
        sl = slice(start, start + EVAL_CHUNK)
        scores = actor.predict(fold_in.observed[sl])
        return batch_scores(scores, fold_in.target[sl], fold_in.observed[sl], cutoffs)

    workers = threads or n_threads()
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    per_user = {
        str(m): np.concatenate([p[(m.kind, m.cutoff)] for p in parts]) for m in metrics
    }
    return EvalResult(fold_in.users, per_user, fold_in.n_interactions)


def activity_breakdown(scores, counts, edges=(250, 500, 750)):
    """Mean score per interaction-count bucket ``[lo, hi)``; empty buckets are omitted.

    Returns a list of ``(label, n_users, mean)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    counts = np.asarray(counts)
    if scores.shape != counts.shape:
        raise ValueError("scores and counts must be aligned")
    bounds = [0, *edges, math.inf]
    rows = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sel = (counts >= lo) & (counts < hi)
        if sel.any():
            label = f"[{lo}, {hi})" if hi != math.inf else f">={lo}"
            rows.append((label, int(sel.sum()), float(scores[sel].mean())))
    return rows


# -- metrics log ------------------------------------------------------------


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        prev = [r for r in self.rows if r["stage"] == row["stage"]]
        if prev and row["epoch"] <= prev[-1]["epoch"]:
            raise ValueError("epochs must increase within a stage")
        self.rows.append({c: row.get(c) for c in CSV_COLUMNS})

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for r in self.rows:
                fh.write(",".join(_fmt(r[c]) for c in CSV_COLUMNS) + "\n")

    def to_json(self):
        return json.dumps(self.rows)

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text))

    def best(self, stage=None, key="val_ndcg"):
        vals = [r[key] for r in self.rows if r[key] is not None and (stage is None or r["stage"] == stage)]
        return max(vals) if vals else None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path} does not have the expected metrics header")
        return list(reader)


# -- trainer ----------------------------------------------------------------


def _rng(seed, *keys):
    return np.random.default_rng([seed, *keys])


class Trainer:
    """Owns the actor, critic, optimizer states and schedule position."""

    def __init__(
        self,
        matrix,
        actor_config,
        schedule=TrainSchedule(),
        split=SplitSpec(400, 200, 1),
        critic_features=FEATURE_NAMES,
        clock=time.perf_counter,
    ):
        if actor_config.n_items != matrix.n_items:
            raise ValueError(
                f"actor expects {actor_config.n_items} items, data has {matrix.n_items}"
            )
        self.matrix = matrix
        self.schedule = schedule
        self.split_spec = split
        self.clock = clock
        self.split = split_users(matrix, split)
        self.train_X = self.split.train
        self.val = FoldIn.build(matrix, self.split.val_users, schedule.holdout_fraction, schedule.seed)
        self.actor = Actor(actor_config, _rng(schedule.seed, 0))
        self.critic = Critic(_rng(schedule.seed, 1), critic_features)
        self.adam_actor = AdamState(lr=schedule.lr_actor)
        self.adam_actor_ac = AdamState(lr=schedule.lr_actor_ac)
        self.adam_critic = AdamState(lr=schedule.lr_critic)
        self.stage, self.epoch = 1, 0  # next epoch to run is (stage, epoch + 1)
        self.log = MetricsLog()
        self.best_score = -math.inf
        self.best_at = (0, 0)
        self.best_actor = self.actor.copy()
        self.best_critic = self.critic.copy()
        self.dropped_rows = 0
        self._elapsed = 0.0

    # -- public driver --

    def fit(self, stop_after=None):
        """Run the schedule from the current position.

        ``stop_after=(stage, epoch)`` halts after that epoch (for resumable runs).
        """
        start = self.clock() - self._elapsed
        while self.stage <= 3:
            if self.epoch >= self.schedule.epochs(self.stage):
                if self.stage == 1 and self.best_at[0] == 1:
                    # later stages build on the validation-selected pre-trained actor
                    self.actor = self.best_actor.copy()
                self.stage, self.epoch = self.stage + 1, 0
                continue
            self.epoch += 1
            row = self._run_epoch(self.stage, self.epoch)
            self._elapsed = self.clock() - start
            self.log.append(stage=self.stage, epoch=self.epoch, wall_seconds=self._elapsed, **row)
            log.info("stage %d epoch %d %s", self.stage, self.epoch, row)
            if stop_after is not None and (self.stage, self.epoch) == tuple(stop_after):
                break
        return self

    def _run_epoch(self, stage, epoch):
        step = {1: self._stage1_epoch, 2: self._stage2_epoch, 3: self._stage3_epoch}[stage]
        train_loss, critic_train = step(epoch)
        row = {"train_loss": train_loss, "val_ndcg": None, "val_recall": None, "critic_mse": None}
        last = epoch == self.schedule.epochs(stage)
        if epoch % self.schedule.eval_every == 0 or last:
            spec = self.schedule.critic_metric
            res = evaluate(self.actor, self.val, [MetricSpec("ndcg", spec.cutoff), MetricSpec("recall", spec.cutoff)])
            row["val_ndcg"] = res.mean(MetricSpec("ndcg", spec.cutoff))
            row["val_recall"] = res.mean(MetricSpec("recall", spec.cutoff))
            if stage >= 2:
                row["critic_mse"] = self.critic_validation()["mse"]
            if row["val_ndcg"] > self.best_score:
                self.best_score = row["val_ndcg"]
                self.best_at = (stage, epoch)
                self.best_actor = self.actor.copy()
                self.best_critic = self.critic.copy()
        return row

    def _batches(self, stage, epoch):
        rng = _rng(self.schedule.seed, 10 + stage, epoch)
        users = np.arange(self.train_X.n_users)
        for batch in batch_iter(users, self.schedule.batch_size, [self.schedule.seed, stage, epoch]):
            X = self.train_X.dense_rows(batch)
            yield X, sample_mask_dense(X, self.schedule.alpha, rng), rng

    # -- stage 1 --

    def _stage1_epoch(self, epoch):
        beta = beta_at_epoch(self.schedule, epoch - 1)
        losses = []
        for X, mask, rng in self._batches(1, epoch):
            loss, _, grads = self.actor.elbo_loss(X, mask, beta, rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} in stage 1 epoch {epoch} (batch of {X.shape[0]})")
            adam_step(self.actor.params, grads, self.adam_actor)
            losses.append(loss)
        return float(np.mean(losses)), None

    # -- stage 2 / 3 helpers --

    def _critic_batch(self, X, mask, rng):
        fp = self.actor.forward(X, mask, rng=rng)
        H, keep = feature_matrix(X, mask, fp.data_loss)
        y = oracle_targets_for_batch(fp.logits, X, mask, self.schedule.critic_metric)
        self.dropped_rows += int((~keep).sum())
        return fp, H, y, keep

    def _critic_step(self, X, mask, rng):
        _, H, y, keep = self._critic_batch(X, mask, rng)
        if keep.sum() < 2:
            return None
        loss, grads = self.critic.fit_step(H[keep], y[keep])
        adam_step(self.critic.params, grads, self.adam_critic)
        return loss

    def _stage2_epoch(self, epoch):
        losses = []
        for X, mask, rng in self._batches(2, epoch):
            loss = self._critic_step(X, mask, rng)
            if loss is not None:
                losses.append(loss)
        return float(np.mean(losses)) if losses else None, None

    def actor_step(self, X, mask, rng):
        """One ascent step on the critic's estimate; the critic is not modified."""
        fp, H, _, keep = self._critic_batch(X, mask, rng)
        if keep.sum() < 2:
            return None
        value, g_nll = actor_objective(self.critic, H[keep], mode=self.schedule.actor_bn_mode)
        grad_data = np.zeros(X.shape[0])
        grad_data[keep] = -g_nll  # descend -L_A
        grads = self.actor.backward(fp, grad_data)
        adam_step(self.actor.params, grads, self.adam_actor_ac)
        return value

    def _stage3_epoch(self, epoch):
        values = []
        for X, mask, rng in self._batches(3, epoch):
            value = self.actor_step(X, mask, rng)
            self._critic_step(X, mask, rng)
            if value is not None:
                values.append(-value)
        return float(np.mean(values)) if values else None, None

    # -- critic diagnostics --

    def critic_validation(self, fold_in=None):
        """Critic vs oracle on held-out users' fold-in partitions.

        Features come from a fixed-seed posterior sample (matching how they are
        produced in training); targets rank that same prediction.
        """
        f = fold_in or self.val
        fp = self.actor.forward(f.target, f.observed, rng=_rng(self.schedule.seed, 99))
        H, keep = feature_matrix(f.target, f.observed, fp.data_loss)
        y = oracle_targets_for_batch(fp.logits, f.target, f.observed, self.schedule.critic_metric)
        H, y, nll = H[keep], y[keep], fp.data_loss[keep]
        y_hat = self.critic.predict(H)
        mse, _ = critic_loss(y_hat, y)
        return {
            "mse": mse,
            "baseline_mse": float(np.mean((y - y.mean()) ** 2)),
            "corr_critic": _pearson(y_hat, y),
            "corr_neg_nll": _pearson(-nll, y),
            "y": y,
            "y_hat": y_hat,
            "nll": nll,
        }

    # -- checkpoints --

    def state(self):
        meta = {f"actor.{k}": str(v) for k, v in self.actor.config.to_dict().items()}
        meta.update({f"schedule.{k}": str(v) for k, v in self.schedule.to_dict().items()})
        meta.update({f"split.{k}": str(v) for k, v in asdict(self.split_spec).items()})
        meta["critic.features"] = ",".join(self.critic.features)
        meta["data.n_items"] = str(self.matrix.n_items)
        meta["data.vocab_sha256"] = vocab_digest(self.matrix)
        meta["critic.bn_initialized"] = str(self.critic.bn.initialized)
        meta["position.stage"] = str(self.stage)
        meta["position.epoch"] = str(self.epoch)
        meta["best.score"] = repr(self.best_score)
        meta["best.at"] = f"{self.best_at[0]}:{self.best_at[1]}"
        meta["dropped_rows"] = str(self.dropped_rows)
        meta["log"] = self.log.to_json()
        meta["elapsed"] = repr(self._elapsed)
        meta["rng"] = json.dumps(
            _rng(self.schedule.seed, 10 + min(self.stage, 3), self.epoch + 1).bit_generator.state
        )
        tensors = {}
        _put(tensors, "actor/", self.actor.params)
        _put(tensors, "critic/", self.critic.params)
        _put(tensors, "best_actor/", self.best_actor.params)
        _put(tensors, "best_critic/", self.best_critic.params)
        for prefix, c in (("critic_bn/", self.critic), ("best_critic_bn/", self.best_critic)):
            tensors[prefix + "running_mean"] = c.bn.running_mean
            tensors[prefix + "running_var"] = c.bn.running_var
        for name, st in (("adam_actor", self.adam_actor), ("adam_actor_ac", self.adam_actor_ac), ("adam_critic", self.adam_critic)):
            meta[f"{name}.step"] = str(st.step)
            _put(tensors, f"{name}/m/", st.m)
            _put(tensors, f"{name}/v/", st.v)
        return meta, tensors

    def save_checkpoint(self, path):
        write_checkpoint(path, *self.state())

    def save_best(self, path):
        """Checkpoint whose live actor/critic are the best-validation snapshot."""
        meta, tensors = self.state()
        for k in [k for k in tensors if k.startswith(("actor/", "critic/", "critic_bn/"))]:
            del tensors[k]
        _put(tensors, "actor/", self.best_actor.params)
        _put(tensors, "critic/", self.best_critic.params)
        tensors["critic_bn/running_mean"] = self.best_critic.bn.running_mean
        tensors["critic_bn/running_var"] = self.best_critic.bn.running_var
        meta["critic.bn_initialized"] = str(self.best_critic.bn.initialized)
        write_checkpoint(path, meta, tensors)

    @classmethod
    def from_checkpoint(cls, path, matrix, clock=time.perf_counter):
        meta, tensors = read_checkpoint(path)
        try:
            actor_cfg, schedule, split, features = config_from_meta(meta)
            t = cls(matrix, actor_cfg, schedule, split, features, clock)
            t.actor = Actor(actor_cfg, params=_take(tensors, "actor/"))
            t.best_actor = Actor(actor_cfg, params=_take(tensors, "best_actor/"))
            t.critic = _load_critic(tensors, "critic/", "critic_bn/", features, meta["critic.bn_initialized"])
            t.best_critic = _load_critic(tensors, "best_critic/", "best_critic_bn/", features, "True")
            for name in ("adam_actor", "adam_actor_ac", "adam_critic"):
                st = getattr(t, name)
                st.step = int(meta[f"{name}.step"])
                st.m = _take(tensors, f"{name}/m/")
                st.v = _take(tensors, f"{name}/v/")
            t.stage = int(meta["position.stage"])
            t.epoch = int(meta["position.epoch"])
            t.best_score = float(meta["best.score"])
            t.best_at = tuple(int(v) for v in meta["best.at"].split(":"))
            t.dropped_rows = int(meta["dropped_rows"])
            t.log = MetricsLog.from_json(meta["log"])
            t._elapsed = float(meta["elapsed"])
        except KeyError as exc:
            raise CheckpointError(f"{path} is missing entry {exc}") from exc
        return t


def config_from_meta(meta):
    def section(prefix):
        return {k[len(prefix):]: v for k, v in meta.items() if k.startswith(prefix)}

    actor_cfg = ActorConfig.from_dict(section("actor."))
    schedule = TrainSchedule.from_dict(section("schedule."))
    split = SplitSpec(**{k: int(v) for k, v in section("split.").items()})
    features = tuple(meta["critic.features"].split(","))
    return actor_cfg, schedule, split, features


def vocab_digest(matrix):
    vocab = matrix.item_vocab or tuple(str(k) for k in range(matrix.n_items))
    return hashlib.sha256("\n".join(map(str, vocab)).encode("utf-8")).hexdigest()


def load_actor(path):
    """Actor (and its metadata) from any checkpoint."""
    meta, tensors = read_checkpoint(path)
    try:
        actor_cfg = ActorConfig.from_dict({k[6:]: v for k, v in meta.items() if k.startswith("actor.")})
        return Actor(actor_cfg, params=_take(tensors, "actor/")), meta
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path} does not hold a usable actor: {exc}") from exc


def _put(tensors, prefix, params):
    for k, v in params.items():
        tensors[prefix + k] = v


def _take(tensors, prefix):
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def _load_critic(tensors, prefix, bn_prefix, features, initialized):
    c = Critic(features=features, params=_take(tensors, prefix))
    c.bn = BatchNormState.create(len(c.features))
    c.bn.running_mean = tensors[bn_prefix + "running_mean"].copy()
    c.bn.running_var = tensors[bn_prefix + "running_var"].copy()
    c.bn.initialized = initialized == "True"
    return c


def _pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])

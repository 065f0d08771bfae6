"""Flat ``key = value`` run configuration.

Unknown keys are rejected; missing keys take the defaults below. Blank lines
and ``#`` comments are ignored. The resolved document lists every key.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .actor import ActorConfig
from .critic import FEATURE_NAMES
from .data import SplitSpec
from .metrics import MetricSpec
from .trainer import TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    data: str = ""
    preset: str = "vae"
    latent_dim: int = 200
    hidden_dim: int = 600
    likelihood: str = ""  # empty = preset's choice
    loss_kind: str = "mle"
    warp_mode: str = "exact"
    n_negatives: int = 0
    l2_weight: float = 0.01
    stage1_epochs: int = 40
    stage2_epochs: int = 10
    stage3_epochs: int = 15
    beta_max: float = 0.2
    anneal_epochs: int = 25
    fix_epochs: int = 15
    batch_size: int = 250
    eval_every: int = 1
    seed: int = 1
    critic_metric: str = "ndcg@20"
    critic_features: str = ",".join(FEATURE_NAMES)
    alpha: float = 0.5
    holdout_fraction: float = 0.2
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    lr_actor_ac: float = 3e-5
    actor_bn_mode: str = "eval"
    n_val_users: int = 400
    n_test_users: int = 200

    def actor_config(self, n_items):
        overrides = dict(
            loss_kind=self.loss_kind,
            warp_mode=self.warp_mode,
            n_negatives=self.n_negatives,
            l2_weight=self.l2_weight,
        )
        if self.preset != "dae":
            overrides.update(latent_dim=self.latent_dim, hidden_dim=self.hidden_dim)
        if self.likelihood:
            overrides["likelihood"] = self.likelihood
        return ActorConfig.preset(self.preset, n_items, **overrides)

    def schedule(self):
        names = {f.name for f in fields(TrainSchedule)}
        kw = {k: getattr(self, k) for k in names if k != "critic_metric"}
        return TrainSchedule(critic_metric=MetricSpec.parse(self.critic_metric), **kw)

    def split(self):
        return SplitSpec(self.n_val_users, self.n_test_users, self.seed)

    def features(self):
        return tuple(f.strip() for f in self.critic_features.split(",") if f.strip())

    def validate(self):
        """Build every derived object once so bad values fail early."""
        try:
            self.actor_config(1)
            self.schedule()
            feats = self.features()
            if "nll" not in feats or not set(feats) <= set(FEATURE_NAMES):
                raise ValueError(f"critic_features must include nll and be drawn from {FEATURE_NAMES}")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def with_values(self, **changes):
        return replace(self, **changes).validate()

    def dumps(self):
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))


def _render(v):
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(text, kind):
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def parse_config(text, source="<config>"):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(value, kinds[key])
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: {key} expects {kinds[key]}, got {value!r}") from None
    return RunConfig(**values).validate()


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))

import math

import numpy as np
import pytest

from ract.actor import ActorConfig
from ract.data import InteractionMatrix, SplitSpec, synthesize
from ract.metrics import MetricSpec, brute_force_reference
from ract.trainer import (
    CSV_COLUMNS,
    FoldIn,
    MetricsLog,
    Trainer,
    TrainingError,
    TrainSchedule,
    activity_breakdown,
    beta_at_epoch,
    evaluate,
    load_actor,
    read_metrics_csv,
)

SMALL = dict(stage1_epochs=3, stage2_epochs=2, stage3_epochs=2, anneal_epochs=2, fix_epochs=1, batch_size=50)


def fixed_clock():
    return 0.0


@pytest.fixture(scope="module")
def data():
    return synthesize(300, 60, 4, seed=2)[0]


def make(data, seed=1, **kw):
    schedule = TrainSchedule(**{**SMALL, "seed": seed, **kw})
    cfg = ActorConfig.preset("vae", data.n_items, latent_dim=8, hidden_dim=32)
    return Trainer(data, cfg, schedule, SplitSpec(50, 50, seed), clock=fixed_clock)


class ScoreTable:
    """Stand-in actor whose predictions are a fixed score matrix."""

    def __init__(self, scores):
        self.scores = scores
        self.calls = 0

    def predict(self, observed):
        out = self.scores[self.calls : self.calls + observed.shape[0]]
        self.calls += observed.shape[0]
        return out


def test_beta_ramp():
    s = TrainSchedule()
    betas = [beta_at_epoch(s, e) for e in range(s.stage1_epochs)]
    assert all(a <= b for a, b in zip(betas, betas[1:]))
    assert max(betas) == s.beta_max == betas[-1]
    assert betas[0] == pytest.approx(0.2 / 25)
    assert betas[24] == 0.2


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(stage1_epochs=10)
    with pytest.raises(ValueError):
        TrainSchedule(actor_bn_mode="frozen")
    full = TrainSchedule.ml20m()
    assert (full.stage1_epochs, full.anneal_epochs, full.batch_size) == (150, 100, 500)
    assert TrainSchedule.from_dict({k: str(v) for k, v in full.to_dict().items()}) == full


def test_metrics_log_csv(tmp_path):
    log = MetricsLog()
    log.append(stage=1, epoch=1, train_loss=2.5, val_ndcg=0.1, val_recall=0.2, wall_seconds=0.0)
    log.append(stage=2, epoch=1, train_loss=0.1, val_ndcg=0.1, val_recall=0.2, critic_mse=0.01, wall_seconds=0.5)
    with pytest.raises(ValueError):
        log.append(stage=2, epoch=1)
    path = tmp_path / "m.csv"
    log.to_csv(path)
    text = path.read_bytes().decode("utf-8")
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert "\r" not in text
    rows = read_metrics_csv(path)
    assert rows[0]["critic_mse"] == "" and float(rows[1]["critic_mse"]) == 0.01
    assert log.best() == 0.1 and log.best(stage=3) is None


def test_evaluate_perfect_scores():
    m = InteractionMatrix.from_rows([[0, 1, 2], [1, 3], [0, 2, 3, 4], [4]], 5)
    fold = FoldIn.build(m, np.arange(4), 0.5, seed=0)
    assert list(fold.users) == [0, 1, 2]
    res = evaluate(ScoreTable(fold.target), fold, ["ndcg@2", "recall@2"], threads=1)
    assert res.mean("ndcg@2") == 1.0 and res.mean("recall@2") == 1.0


def test_evaluate_without_users():
    m = InteractionMatrix.from_rows([[0], []], 3)
    with pytest.raises(TrainingError):
        evaluate(ScoreTable(np.zeros((0, 3))), FoldIn.build(m, [0, 1], 0.2, 0), ["ndcg@1"])


def test_evaluate_matches_brute_force(rng):
    rows = [sorted(rng.choice(8, size=rng.integers(2, 8), replace=False)) for _ in range(40)]
    m = InteractionMatrix.from_rows(rows, 8)
    fold = FoldIn.build(m, np.arange(40), 0.3, seed=5)
    scores = rng.choice([0.0, 0.5, 1.0], size=(40, 8))
    res = evaluate(ScoreTable(scores), fold, ["ndcg@3", "recall@3"], threads=1)
    for r in range(40):
        for kind in ("ndcg", "recall"):
            ref = brute_force_reference(scores[r], fold.target[r], fold.observed[r], MetricSpec(kind, 3))
            assert res.per_user[f"{kind}@3"][r] == pytest.approx(ref, abs=1e-12)


def test_evaluate_thread_count_does_not_matter(data, monkeypatch):
    import ract.trainer as tr

    monkeypatch.setattr(tr, "EVAL_CHUNK", 7)
    t = make(data)
    one = evaluate(t.actor, t.val, ["ndcg@5"], threads=1).per_user["ndcg@5"]
    many = evaluate(t.actor, t.val, ["ndcg@5"], threads=4).per_user["ndcg@5"]
    np.testing.assert_array_equal(one, many)


def test_activity_breakdown():
    scores = np.array([0.2, 0.4, 0.6, 1.0])
    counts = np.array([10, 20, 300, 900])
    rows = activity_breakdown(scores, counts)
    assert rows == [("[0, 250)", 2, pytest.approx(0.3)), ("[250, 500)", 1, 0.6), (">=750", 1, 1.0)]
    assert sum(n for _, n, _ in rows) == 4
    single = activity_breakdown(scores[:2], counts[:2])
    assert single == [("[0, 250)", 2, pytest.approx(scores[:2].mean()))]
    with pytest.raises(ValueError):
        activity_breakdown(scores, counts[:3])


def test_run_is_deterministic(data, tmp_path):
    for k in range(2):
        t = make(data).fit()
        t.log.to_csv(tmp_path / f"m{k}.csv")
        t.save_checkpoint(tmp_path / f"f{k}.ckpt")
        t.save_best(tmp_path / f"b{k}.ckpt")
    for name in ("m{}.csv", "f{}.ckpt", "b{}.ckpt"):
        assert (tmp_path / name.format(0)).read_bytes() == (tmp_path / name.format(1)).read_bytes()
    other = make(data, seed=2).fit()
    assert other.log.rows != t.log.rows


@pytest.mark.parametrize("stop", [(1, 2), (2, 1), (3, 1)])
def test_resume_matches_uninterrupted_run(data, tmp_path, stop):
    full = make(data).fit()
    full.save_checkpoint(tmp_path / "full.ckpt")
    part = make(data).fit(stop_after=stop)
    assert len(part.log.rows) < len(full.log.rows)
    part.save_checkpoint(tmp_path / "part.ckpt")
    resumed = Trainer.from_checkpoint(tmp_path / "part.ckpt", data, clock=fixed_clock).fit()
    assert resumed.log.rows == full.log.rows
    resumed.save_checkpoint(tmp_path / "resumed.ckpt")
    assert (tmp_path / "resumed.ckpt").read_bytes() == (tmp_path / "full.ckpt").read_bytes()


def test_stage_contracts(data):
    t = make(data).fit(stop_after=(1, 3))
    n_batches = math.ceil(t.train_X.n_users / t.schedule.batch_size)
    assert t.adam_actor.step == 3 * n_batches
    t.fit(stop_after=(2, 2))
    # stage 2 never touches the actor (which restarted from the best stage-1 snapshot)
    snapshot = {k: v.copy() for k, v in t.actor.params.items()}
    assert t.adam_actor_ac.step == 0
    critic_before = {k: v.copy() for k, v in t.critic.params.items()}
    critic_steps = t.adam_critic.step
    assert critic_steps == 2 * n_batches
    t.fit()
    # stage 3: one actor and one critic update per batch
    assert t.adam_actor_ac.step == 2 * n_batches
    assert t.adam_critic.step - critic_steps == 2 * n_batches
    assert any(not np.array_equal(snapshot[k], t.actor.params[k]) for k in snapshot)
    assert any(not np.array_equal(critic_before[k], t.critic.params[k]) for k in critic_before)
    assert [r["stage"] for r in t.log.rows] == [1, 1, 1, 2, 2, 3, 3]
    assert all(r["critic_mse"] is None for r in t.log.rows[:3])
    assert all(r["critic_mse"] is not None for r in t.log.rows[3:])


def test_stage2_keeps_actor_bitwise(data):
    t = make(data).fit(stop_after=(1, 3))
    t.fit(stop_after=(2, 1))  # moves to the best snapshot, then trains the critic
    params = {k: v.copy() for k, v in t.actor.params.items()}
    t.fit(stop_after=(2, 2))
    for k in params:
        assert params[k].tobytes() == t.actor.params[k].tobytes()


def test_actor_step_keeps_critic_bitwise(data):
    t = make(data).fit(stop_after=(2, 2))
    X = t.train_X.dense_rows(np.arange(50))
    rng = np.random.default_rng(0)
    mask = (rng.random(X.shape) < 0.5) * X
    before = {k: v.copy() for k, v in t.critic.params.items()}
    running = t.critic.bn.running_mean.copy()
    t.actor_step(X, mask, rng)
    for k in before:
        assert before[k].tobytes() == t.critic.params[k].tobytes()
    assert running.tobytes() == t.critic.bn.running_mean.tobytes()


def test_stage1_learns(data):
    t = make(data, stage1_epochs=12, anneal_epochs=8, fix_epochs=4, stage2_epochs=0, stage3_epochs=0, lr_actor=3e-3)
    t.fit()
    losses = [r["train_loss"] for r in t.log.rows]
    assert losses[-1] < losses[0]
    uniform = evaluate(ScoreTable(np.zeros((t.val.users.size, data.n_items))), t.val, ["ndcg@20"]).mean("ndcg@20")
    assert t.log.best(stage=1) >= 2 * uniform


def test_non_finite_loss_is_an_error(data):
    t = make(data)
    t.actor.params["decoder.1.bias"][0] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        t.fit()


def test_item_count_mismatch(data):
    with pytest.raises(ValueError, match="items"):
        Trainer(data, ActorConfig(data.n_items + 1), TrainSchedule(**SMALL), SplitSpec(50, 50, 1))


def test_load_actor_from_best(data, tmp_path):
    t = make(data).fit()
    t.save_best(tmp_path / "best.ckpt")
    actor, meta = load_actor(tmp_path / "best.ckpt")
    res = evaluate(actor, t.val, ["ndcg@20"])
    assert res.mean("ndcg@20") == t.best_score


def test_critic_validation_fields(data):
    t = make(data).fit(stop_after=(2, 2))
    cv = t.critic_validation()
    assert cv["y"].shape == cv["y_hat"].shape == cv["nll"].shape
    assert cv["mse"] >= 0 and cv["baseline_mse"] >= 0

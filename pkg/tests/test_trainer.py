import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtladapt import checkpoint
from mtladapt.adapters import AdapterConfig
from mtladapt.errors import ConfigError
from mtladapt.model import ModelConfig, MultiTaskModel
from mtladapt.tensor import Tensor, cross_entropy
from mtladapt.trainer import (
    MultiTaskDataset,
    OptimizerState,
    TrainConfig,
    adamw_step,
    build_model,
    final_train_accuracy,
    gradient_audit,
    lr_schedule,
    randomize_parameters,
    train,
    write_metrics_csv,
)


def separable_set(n=200, d=8, seed=0, margin=0.3):
    rng = np.random.default_rng(seed)
    # zero-sum direction: layer norm keeps sign(w . x), so the set stays separable
    w = rng.standard_normal(d)
    w -= w.mean()
    w /= np.linalg.norm(w)
    x = rng.standard_normal((4 * n, d))
    s = x @ w
    keep = np.abs(s) > margin
    x, s = x[keep][:n], s[keep][:n]
    return MultiTaskDataset(x, np.zeros(n, dtype=int), (s > 0).astype(int))


def toy_mtl_config(**kw):
    model = ModelConfig(d=6, f=8, blocks=1, num_tasks=3, classes=2)
    adapter = AdapterConfig(kind="mtl_lora", rank=2, alpha=4.0, n_up=2, tau=0.8, num_tasks=3)
    return TrainConfig(model=model, adapter=adapter, **kw)


def toy_batch(seed=0, n=6, T=3):
    rng = np.random.default_rng(seed)
    return MultiTaskDataset(rng.standard_normal((n, 2, 6)), np.arange(n) % T, rng.integers(0, 2, n))


# ---- optimizer ---------------------------------------------------------------


def test_adamw_first_step_closed_form():
    p = Tensor([1.0], requires_grad=True)
    p.grad[...] = 1.0
    adamw_step([("p", p)], OptimizerState(), lr=0.1, beta1=0.9, beta2=0.95)
    # bias correction cancels: m_hat = g, v_hat = g^2
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)


def test_adamw_zero_grad_no_decay_leaves_params():
    p = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
    before = p.data.copy()
    state = OptimizerState()
    for _ in range(3):
        adamw_step([("p", p)], state, lr=0.1)
    assert np.array_equal(p.data, before) and state.step == 3


def test_adamw_decoupled_decay():
    p = Tensor([2.0], requires_grad=True)
    adamw_step([("p", p)], OptimizerState(), lr=0.1, weight_decay=0.5)
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)


def test_adamw_hundred_steps_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(7)
        p = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        state = OptimizerState()
        for _ in range(100):
            p.grad[...] = np.sin(p.data) + 0.1 * rng.standard_normal(p.shape)
            adamw_step([("p", p)], state, lr=1e-2)
        return p.data.copy()

    assert np.array_equal(run(), run())


# ---- schedule ----------------------------------------------------------------


def test_lr_schedule_examples():
    assert lr_schedule(0, 100, 0.03, 1.0) == 0.0
    assert lr_schedule(100, 100, 0.03, 1.0) == 0.0
    assert lr_schedule(3, 100, 0.03, 1.0) == 1.0
    assert lr_schedule(0, 100, 0.0, 1.0) == 1.0
    assert lr_schedule(50, 100, 0.0, 2.0) == 1.0


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 5000), st.floats(0.0, 0.99), st.floats(1e-6, 1.0), st.data())
def test_lr_schedule_bounded_with_peak_at_warmup_end(total, ratio, base, data):
    step = data.draw(st.integers(0, total))
    assert 0.0 <= lr_schedule(step, total, ratio, base) <= base
    warmup = int(np.ceil(ratio * total))
    if warmup < total:
        assert lr_schedule(warmup, total, ratio, base) == pytest.approx(base, rel=1e-12)
        if step >= warmup:
            assert lr_schedule(step, total, ratio, base) >= lr_schedule(min(step + 1, total), total, ratio, base)


# ---- config ------------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(warmup_ratio=1.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1e-3, "bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"adapter": {"rank": 2, "nope": 0}})


def test_train_config_round_trip():
    cfg = toy_mtl_config(epochs=2)
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_ablation_switches_reach_adapter():
    cfg = TrainConfig.from_dict({
        "model": {"d": 6, "num_tasks": 3},
        "adapter": {"kind": "mtl_lora", "rank": 2, "tau": 0.5},
        "ablation": {"freeze_lambda_identity": True, "tau_override": 1.0},
    })
    eff = cfg.effective_adapter()
    assert eff.freeze_lambda_identity and eff.tau == 1.0 and eff.num_tasks == 3


def test_empty_dataset_rejected():
    empty = MultiTaskDataset(np.zeros((0, 6)), [], [])
    with pytest.raises(ConfigError):
        train(toy_mtl_config(), empty)


def test_out_of_range_task_rejected():
    with pytest.raises(ConfigError):
        train(toy_mtl_config(), MultiTaskDataset(np.zeros((2, 6)), [0, 3], [0, 1]))


# ---- training loop -----------------------------------------------------------


def test_zero_epochs_leaves_parameters_bitwise():
    cfg = toy_mtl_config(epochs=0)
    fresh = build_model(cfg)
    result = train(cfg, toy_batch(n=12))
    for (n1, a), (n2, b) in zip(fresh.trainable_parameters(), result.model.trainable_parameters()):
        assert n1 == n2 and np.array_equal(a.data, b.data)


def test_separable_single_task_lora_r2_within_200_steps():
    data = separable_set()
    cfg = TrainConfig(
        learning_rate=1e-2, epochs=8, batch_size=8, seed=0,
        model=ModelConfig(d=8, f=16, blocks=1, num_tasks=1, classes=2),
        adapter=AdapterConfig(kind="lora", rank=2, alpha=4.0, num_tasks=1),
    )
    result = train(cfg, data)
    assert result.state.step == 200
    assert final_train_accuracy(result.records) >= 0.99


def test_loss_decreases_over_first_ten_steps():
    data = separable_set(n=64, seed=1)
    cfg = TrainConfig(
        learning_rate=1e-3, warmup_ratio=0.0, epochs=1,
        model=ModelConfig(d=8, f=16, blocks=1, num_tasks=1),
        adapter=AdapterConfig(kind="lora", rank=2, alpha=4.0, num_tasks=1),
    )
    model = build_model(cfg)
    params = model.trainable_parameters()
    state = OptimizerState()
    batch = data.subset(np.arange(16))
    losses = []
    for _ in range(10):
        for _, p in params:
            p.zero_grad()
        loss = cross_entropy(model.forward(batch.x, batch.task_ids), batch.labels)
        loss.backward()
        losses.append(loss.item())
        adamw_step(params, state, 1e-3)
    assert losses[-1] < losses[0]


def test_frozen_weights_bitwise_constant_and_records_shape():
    cfg = toy_mtl_config(epochs=2, learning_rate=1e-2, batch_size=4)
    model = build_model(cfg)
    frozen = {n: w.data.copy() for n, w in model.frozen_parameters()}
    before = {n: p.data.copy() for n, p in model.trainable_parameters()}
    result = train(cfg, toy_batch(n=12), eval_dataset=toy_batch(seed=1, n=6), model=model)
    for n, w in model.frozen_parameters():
        assert np.array_equal(frozen[n], w.data)
    moved = [n for n, p in model.trainable_parameters() if not np.array_equal(before[n], p.data)]
    assert any(".B" in n for n in moved) and "head.W" in moved
    assert len(result.records) == 3 * 3 * 2  # epochs 0..2, 3 tasks, two splits


def test_same_seed_same_metrics_csv(tmp_path):
    cfg = toy_mtl_config(epochs=2, learning_rate=1e-2, batch_size=4, seed=5)
    data = toy_batch(n=12)
    write_metrics_csv(train(cfg, data).records, tmp_path / "a.csv")
    write_metrics_csv(train(cfg, data).records, tmp_path / "b.csv")
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    assert a == b
    assert a.splitlines()[0] == b"step,epoch,task,split,loss,accuracy,lr"


def test_balanced_sampler_runs_deterministically():
    cfg = toy_mtl_config(epochs=1, batch_size=4, sampler="balanced")
    data = toy_batch(n=12)
    assert train(cfg, data).records == train(cfg, data).records


def test_head_gradient_isolated_when_task_absent():
    model = build_model(toy_mtl_config())
    batch = toy_batch(n=6)
    keep = batch.task_ids != 1
    sub = batch.subset(np.flatnonzero(keep))
    cross_entropy(model.forward(sub.x, sub.task_ids), sub.labels).backward()
    assert not model.head_W.grad[1].any() and not model.head_b.grad[1].any()


# ---- gradient audit ----------------------------------------------------------


def test_gradient_audit_toy_mtl():
    model = build_model(toy_mtl_config())
    randomize_parameters(model, seed=0)
    report = gradient_audit(model, toy_batch())
    assert report.max_rel_err < 1e-5
    classes = report.by_class()
    assert {"A", "B", "Lambda", "w", "W", "b"} <= set(classes)
    assert all(name.endswith(".W") for name in report.excluded) and report.excluded


def test_gradient_audit_frozen_lambda_absent():
    cfg = toy_mtl_config()
    cfg.ablation.freeze_lambda_identity = True
    model = build_model(cfg)
    randomize_parameters(model, seed=1)
    report = gradient_audit(model, toy_batch())
    assert not any("Lambda" in n for n in report.errors)
    assert report.max_rel_err < 1e-5


@pytest.mark.parametrize("kind", ["lora", "multi_lora", "moe_lora"])
def test_gradient_audit_other_kinds(kind):
    cfg = toy_mtl_config()
    cfg.adapter = AdapterConfig(kind=kind, rank=2, alpha=4.0, num_tasks=3, num_experts=2,
                                task_embed_dim=3, num_lora_modules=2)
    model = build_model(cfg)
    randomize_parameters(model, seed=2)
    assert gradient_audit(model, toy_batch()).max_rel_err < 1e-5


# ---- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = toy_mtl_config()
    model = build_model(cfg)
    randomize_parameters(model, seed=3)
    checkpoint.save_model(model, tmp_path)
    other = MultiTaskModel(cfg.model, cfg.effective_adapter(), seed=99)
    checkpoint.load_into(other, tmp_path / "adapters")
    checkpoint.load_into(other, tmp_path / "base")
    x = toy_batch()
    assert np.array_equal(model.forward(x.x, x.task_ids).data, other.forward(x.x, x.task_ids).data)
    stored, _ = checkpoint.load(tmp_path / "adapters")
    assert stored["adapter"]["kind"] == "mtl_lora"


def test_checkpoint_rejects_foreign_names(tmp_path):
    checkpoint.save(tmp_path / "x", [("nope", np.zeros(2))])
    with pytest.raises(ConfigError):
        checkpoint.load_into(build_model(toy_mtl_config()), tmp_path / "x")

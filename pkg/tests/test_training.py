import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reprsteer import training
from reprsteer.core import TransformBlockConfig, init_transform
from reprsteer.errors import ConfigError, ContractError, InputError, NumericError
from reprsteer.training import (AdamW, ChrtTrainConfig, FinetuneConfig, chrt_objective, combined_loss,
                                finetune_guider, make_blocks, preservation_loss, preservation_loss_grad,
                                read_training_log, train_chrt, triplet_loss, triplet_loss_grad)
from conftest import make_tiny_model, random_transform


def test_triplet_worked_values():
    hp = np.array([[0.0, 0.0]])
    # d+ = 5, d- = 1 -> 5 - 1 + 1
    assert triplet_loss(hp, np.array([[3.0, 4.0]]), np.array([[0.0, 1.0]]), 1.0) == pytest.approx(5.0)
    # d+ = 1, d- = 5 -> hinge inactive
    assert triplet_loss(hp, np.array([[0.0, 1.0]]), np.array([[3.0, 4.0]]), 1.0) == 0.0
    # d+ = d- -> loss equals the margin
    assert triplet_loss(hp, np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 0.7) == pytest.approx(0.7)


def test_preservation_worked_values():
    h = np.array([[[0.0, 0.0], [1.0, 1.0]]])
    hp = np.array([[[3.0, 4.0], [1.0, 1.0]]])
    assert preservation_loss(h, hp) == pytest.approx(2.5)
    assert preservation_loss(h, h) == 0.0


def test_zero_distance_gradient_is_finite():
    h = np.ones((2, 4))
    loss, g = preservation_loss_grad(h, h)
    assert loss == 0 and np.all(g == 0)
    loss, g = triplet_loss_grad(h, h, h, 1.0)
    assert loss == pytest.approx(1.0) and np.all(np.isfinite(g))


def test_shape_and_mask_errors():
    with pytest.raises(InputError):
        triplet_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 3)), 1.0)
    with pytest.raises(InputError):
        preservation_loss(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(InputError):
        preservation_loss_grad(np.zeros((2, 3)), np.zeros((2, 3)), mask=np.ones(3, bool))


def test_mask_averages_over_valid_positions():
    h = np.zeros((1, 3, 2))
    hp = np.array([[[3.0, 4.0], [0.0, 1.0], [100.0, 0.0]]])
    assert preservation_loss(h, hp, mask=np.array([[1, 1, 0]], bool)) == pytest.approx(3.0)


def test_losses_match_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    for _ in range(10):
        hp, pos, neg = (rng.normal(size=(6, 5)) for _ in range(3))
        delta = float(rng.uniform(0.1, 3))
        t_hp = torch.tensor(hp, requires_grad=True)
        tp, tn = torch.tensor(pos), torch.tensor(neg)
        ref = torch.clamp(torch.linalg.norm(t_hp - tp, dim=-1) - torch.linalg.norm(t_hp - tn, dim=-1) + delta,
                          min=0).mean()
        ref.backward()
        loss, grad = triplet_loss_grad(hp, pos, neg, delta)
        assert loss == pytest.approx(ref.item(), rel=1e-12, abs=1e-12)
        np.testing.assert_allclose(grad, t_hp.grad.numpy(), atol=1e-12)

        t_hp2 = torch.tensor(hp, requires_grad=True)
        ref2 = torch.linalg.norm(torch.tensor(pos) - t_hp2, dim=-1).mean()
        ref2.backward()
        loss2, grad2 = preservation_loss_grad(pos, hp)
        assert loss2 == pytest.approx(ref2.item(), rel=1e-12)
        np.testing.assert_allclose(grad2, t_hp2.grad.numpy(), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 9), st.integers(0, 9), st.floats(0, 10), st.floats(0, 10))
def test_combined_loss_is_convex_mix(a, b, lc, lp):
    if a + b == 0:
        with pytest.raises(ConfigError):
            ChrtTrainConfig(a, b)
        return
    cfg = ChrtTrainConfig(a, b)
    out = combined_loss(cfg, lc, lp)
    assert cfg.lam == pytest.approx(a / (a + b))
    assert out.total == pytest.approx(cfg.lam * lp + (1 - cfg.lam) * lc)
    assert min(lc, lp) - 1e-12 <= out.total <= max(lc, lp) + 1e-12


def test_variant_names():
    assert [ChrtTrainConfig(a, b).variant_name for a, b in [(2, 1), (1, 1), (1, 2)]] == ["CHRT_21", "CHRT_11",
                                                                                       "CHRT_12"]
    assert ChrtTrainConfig(2, 1).lam == pytest.approx(2 / 3)
    with pytest.raises(ConfigError):
        ChrtTrainConfig(1, 1, distance_p=1)


def test_adamw_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(1)
    p0 = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(6)]
    tp = torch.tensor(p0.copy(), requires_grad=True)
    opt_t = torch.optim.AdamW([tp], lr=0.01, weight_decay=0.1)
    params = {"w": p0.copy()}
    opt = AdamW(0.01, weight_decay=0.1)
    for g in grads:
        opt_t.zero_grad()
        tp.grad = torch.tensor(g)
        opt_t.step()
        opt.step(params, {"w": g})
    np.testing.assert_allclose(params["w"], tp.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_chrt_objective_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    tau = random_transform(6, seed=1)
    h, hp, hm = (rng.normal(size=(2, 4, 6)) for _ in range(3))
    cfg = ChrtTrainConfig(1, 2, margin_delta=1.5)

    def total():
        return chrt_objective(tau, h, hp, hm, cfg)[0].total

    _, grads = chrt_objective(tau, h, hp, hm, cfg)
    eps = 1e-6
    for i, sb in enumerate(tau.sub_blocks):
        for name, p in sb.items():
            idx = tuple(rng.integers(0, s) for s in p.shape)
            old = p[idx]
            p[idx] = old + eps
            up = total()
            p[idx] = old - eps
            down = total()
            p[idx] = old
            assert grads[i][name][idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-8)


def test_make_blocks():
    blocks = make_blocks([[1, 2, 3], [4, 5], [6, 7, 8, 9]], 4)
    np.testing.assert_array_equal(blocks, [[1, 2, 3, 4], [5, 6, 7, 8]])
    np.testing.assert_array_equal(make_blocks([[1, 2]], 8), [[1, 2]])
    with pytest.raises(InputError):
        make_blocks([[], []], 4)


def _corpus(rng, n, vocab, bos):
    return [[bos] + list(rng.integers(0, vocab, size=int(rng.integers(4, 9)))) for _ in range(n)]


@pytest.mark.parametrize("tied", [False, True])
def test_finetune_guider_keeps_head(tiny_tokenizer, tied):
    base = make_tiny_model(tiny_tokenizer, tied=tied)
    rng = np.random.default_rng(0)
    corpus = _corpus(rng, 30, 14, base.bos_id)
    guider = finetune_guider(base, corpus, FinetuneConfig(epochs=2, batch_size=4, learning_rate=1e-2, block_size=16))
    assert guider.head_checksum() == base.head_checksum()
    assert guider.checksum() != base.checksum()
    changed = [n for n in base.params if not np.array_equal(base.params[n], guider.params[n])]
    assert set(changed).isdisjoint(base.head_param_names)
    assert guider.head_locked


def test_finetune_guider_contracts(tiny_tokenizer):
    base = make_tiny_model(tiny_tokenizer, locked=False)
    with pytest.raises(ContractError):
        finetune_guider(base, [[1, 2, 3]])
    base.head_locked = True
    with pytest.raises(InputError):
        finetune_guider(base, [[], []])


def test_finetune_is_deterministic(tiny_tokenizer):
    base = make_tiny_model(tiny_tokenizer)
    corpus = _corpus(np.random.default_rng(3), 20, 14, base.bos_id)
    cfg = FinetuneConfig(epochs=1, batch_size=4, learning_rate=1e-2, block_size=16, seed=4)
    assert finetune_guider(base, corpus, cfg).checksum() == finetune_guider(base, corpus, cfg).checksum()


@pytest.fixture
def chrt_setup(tiny_tokenizer):
    base = make_tiny_model(tiny_tokenizer)
    rng = np.random.default_rng(5)
    ft = FinetuneConfig(epochs=2, batch_size=4, learning_rate=1e-2, block_size=16)
    pos = _corpus(rng, 20, 7, base.bos_id)
    neg = [[base.bos_id] + [t + 7 for t in s[1:]] for s in _corpus(rng, 20, 7, base.bos_id)]
    guiders = (finetune_guider(base, pos, ft), finetune_guider(base, neg, ft))
    return base, guiders, pos + neg


def test_train_chrt_freezes_everything_but_tau(chrt_setup, tmp_path):
    base, guiders, corpus = chrt_setup
    before = [m.checksum() for m in (base, *guiders)]
    tau0 = init_transform(TransformBlockConfig(base.config.hidden_dim))
    cfg = ChrtTrainConfig(1, 2, epochs=3, batch_size=2, learning_rate=1e-2, block_size=16)
    tau, log = train_chrt(base, guiders, tau0, corpus, cfg, log_path=tmp_path / "log.jsonl")
    assert [m.checksum() for m in (base, *guiders)] == before
    assert not np.array_equal(tau.sub_blocks[0]["W_out"], tau0.sub_blocks[0]["W_out"])
    assert np.all(tau0.sub_blocks[0]["W_out"] == 0)
    records = read_training_log(tmp_path / "log.jsonl")
    assert records == log
    assert [r["step"] for r in records] == list(range(len(records)))
    assert training.epoch_means(log, "total")[-1] < training.epoch_means(log, "total")[0]


def test_training_log_tamper_detected(chrt_setup, tmp_path):
    base, guiders, corpus = chrt_setup
    path = tmp_path / "log.jsonl"
    train_chrt(base, guiders, init_transform(TransformBlockConfig(base.config.hidden_dim)), corpus,
               ChrtTrainConfig(1, 1, epochs=1, batch_size=4, learning_rate=1e-2), log_path=path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[0])
    rec["total"] += 1e-3
    lines[0] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ContractError):
        read_training_log(path)


def test_train_chrt_rejects_mismatched_models(chrt_setup, tiny_tokenizer):
    base, (lp, lm), corpus = chrt_setup
    other = make_tiny_model(tiny_tokenizer, seed=99)
    tau = init_transform(TransformBlockConfig(base.config.hidden_dim))
    with pytest.raises(ContractError):
        train_chrt(base, (other, lm), tau, corpus)
    with pytest.raises(ConfigError):
        train_chrt(base, (lp, lm), init_transform(TransformBlockConfig(8)), corpus)
    wide = make_tiny_model(tiny_tokenizer, hidden=8)
    with pytest.raises(ConfigError):
        train_chrt(base, (wide, lm), tau, corpus)


def test_train_chrt_reports_step_of_non_finite_loss(chrt_setup, monkeypatch):
    base, guiders, corpus = chrt_setup
    real = training.chrt_objective
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        out, grads = real(*args, **kwargs)
        calls["n"] += 1
        if calls["n"] == 3:
            out = training.LossBreakdown(float("nan"), out.preservation, float("nan"))
        return out, grads

    monkeypatch.setattr(training, "chrt_objective", flaky)
    with pytest.raises(NumericError) as err:
        train_chrt(base, guiders, init_transform(TransformBlockConfig(base.config.hidden_dim)), corpus,
                   ChrtTrainConfig(1, 1, epochs=2, batch_size=2, learning_rate=1e-2))
    assert err.value.step == 2


def test_fresh_transform_receives_contrastive_signal():
    """At the identity the preservation term has zero subgradient, so only the contrastive term acts."""
    rng = np.random.default_rng(6)
    h = rng.normal(size=(1, 8, 6))
    direction = rng.normal(size=6)
    hp, hm = h + 0.1 * direction, h - 0.1 * direction
    tau = init_transform(TransformBlockConfig(6))
    breakdown, grads = chrt_objective(tau, h, hp, hm, ChrtTrainConfig(2, 1))
    assert breakdown.preservation == 0
    assert any(np.abs(g["b_out"]).max() > 0 for g in grads)

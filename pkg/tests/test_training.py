import dataclasses
import math

import numpy as np
import pytest

from metatrans import model as mdl
from metatrans import tensor as tn
from metatrans import training
from metatrans.config import ConfigError, ModelConfig, TrainConfig, desk_preset
from metatrans.data import SENTINEL_UNLABELED, VideoBatch, concat
from metatrans.synthbench import GeneratorSpec, generate_domain_pair
from metatrans.tensor import ContractError, NumericError, Tensor

SMALL = ModelConfig(d=8, n_layers=1, n_heads=2, d_head=4, d_ff=8, d_video=6, n_classes=3,
                    head_hidden=5, t_max=16)


def small_cfg(**over):
    cfg = TrainConfig(model=dataclasses.replace(SMALL), epochs=2, pseudo_start_epoch=1,
                      batch_size=8)
    return dataclasses.replace(cfg, **over)


def batch(n_src=2, n_tgt=2, T=5, d=8, seed=0, K=3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_src + n_tgt, T, d))
    labels = np.concatenate([rng.integers(0, K, n_src), np.full(n_tgt, SENTINEL_UNLABELED)])
    dom = np.array([0] * n_src + [1] * n_tgt)
    return VideoBatch(x, labels, dom)


def ce(logits, label):
    z = logits - logits.max()
    return -(z[label] - np.log(np.exp(z).sum()))


# -- losses

def test_loss_cls_uniform_logits_is_log_k():
    m = mdl.init_model(SMALL, 0)
    m.task_head.w2.data[...] = 0.0
    m.task_head.b2.data[...] = 0.0
    assert training.loss_cls(batch(), m).item() == pytest.approx(math.log(3), abs=1e-12)


def test_loss_cls_saturated_is_zero():
    m = mdl.init_model(SMALL, 0)
    m.task_head.w2.data[...] = 0.0
    m.task_head.b2.data[...] = [60.0, 0.0, 0.0]
    b = batch()
    b.class_label[:2] = 0
    assert training.loss_cls(b, m).item() < 1e-20


def test_loss_cls_mixed_pseudo_batch_matches_hand_average():
    m = mdl.init_model(SMALL, 1)
    b = batch(seed=1)
    b.pseudo_label = np.array([SENTINEL_UNLABELED, SENTINEL_UNLABELED, 2, 0])
    b.pseudo_active = True
    logits = mdl.predict(b.x, m)
    labels = [b.class_label[0], b.class_label[1], 2, 0]
    oracle = np.mean([ce(logits[i], labels[i]) for i in range(4)])
    assert training.loss_cls(b, m).item() == pytest.approx(oracle, abs=1e-12)
    # inactive pseudo-labels are ignored
    b.pseudo_active = False
    oracle2 = np.mean([ce(logits[i], labels[i]) for i in range(2)])
    assert training.loss_cls(b, m).item() == pytest.approx(oracle2, abs=1e-12)


def test_loss_cls_without_labels_is_contract_error():
    with pytest.raises(ContractError):
        training.loss_cls(batch(n_src=0, n_tgt=3), mdl.init_model(SMALL, 0))


def _zero_domain_heads(m):
    for head in (m.domain_head_frame, m.domain_head_video):
        head.w2.data[...] = 0.0
        head.b2.data[...] = 0.0


def test_loss_adv_uniform_is_two_log_two():
    m = mdl.init_model(SMALL, 2)
    _zero_domain_heads(m)
    assert training.loss_adv(batch(), m, 0.1).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_loss_adv_saturated_discriminator():
    m = mdl.init_model(SMALL, 3)
    _zero_domain_heads(m)
    b = batch(n_src=4, n_tgt=0)
    for head in (m.domain_head_frame, m.domain_head_video):
        head.b2.data[...] = [60.0, 0.0]
    loss = training.loss_adv(b, m, 1.0)
    assert loss.item() < 1e-20
    tn.backward(loss)
    for p in m.encoder_parameters().values():
        assert p.grad is None or np.abs(p.grad).max() < 1e-20


def test_loss_adv_term_by_term():
    m = mdl.init_model(SMALL, 4)
    b = batch(seed=4)
    out = mdl.model_forward(b.x, m, 0.3)
    frame = out["frame_domain_logits"].data
    video = out["video_domain_logits"].data[:, 0]
    per_video = [np.mean([ce(frame[i, t], b.domain_label[i]) for t in range(b.T)])
                 + ce(video[i], b.domain_label[i]) for i in range(len(b))]
    assert training.loss_adv(b, m, 0.3).item() == pytest.approx(np.mean(per_video), abs=1e-12)


def test_loss_adv_warns_on_single_domain(caplog):
    with caplog.at_level("WARNING"):
        training.loss_adv(batch(n_tgt=0), mdl.init_model(SMALL, 0), 0.1)
    assert "single domain" in caplog.text


def test_total_loss_lambda_zero_equals_classification_gradient():
    b = batch(seed=5)
    m1, m2 = mdl.init_model(SMALL, 5), mdl.init_model(SMALL, 5)
    loss, parts = training.total_loss(b, m1, small_cfg(lambda1=0.0))
    assert loss.item() > 0 and np.isfinite(loss.item())
    tn.backward(loss)
    tn.backward(training.loss_cls(b, m2))
    for (k, p1), p2 in zip(m1.encoder_parameters().items(), m2.encoder_parameters().values()):
        np.testing.assert_allclose(p1.grad, p2.grad, atol=1e-12, rtol=0, err_msg=k)


def test_total_loss_gradient_check_small():
    cfg = small_cfg(model=ModelConfig(d=4, n_layers=1, n_heads=1, d_head=2, d_ff=4, d_video=3,
                                      n_classes=2, head_hidden=3, t_max=8), lambda1=0.3)
    m = mdl.init_model(cfg.model, 6)
    rng = np.random.default_rng(6)
    b = VideoBatch(rng.uniform(-1, 1, size=(2, 3, 4)), [1, SENTINEL_UNLABELED], [0, 1])
    rep = tn.grad_check(lambda: training.total_loss(b, m, cfg)[0], m.parameters(), tol=1e-4)
    # GRL makes encoder gradients deliberately differ from d(total)/d(encoder)
    enc = set(id(p) for p in m.encoder_parameters().values())
    heads_ok = [e for p, e in zip(m.parameters(), rep["errors"]) if id(p) not in enc]
    assert max(heads_ok) <= 1e-4


def test_wo_adv_reports_zero_adversarial_loss():
    _, parts = training.total_loss(batch(), mdl.init_model(SMALL, 0), small_cfg(variant="wo_adv"))
    assert parts["loss_adv"] == 0.0


# -- pseudo-labels

def _fixed_logit_model(values):
    m = mdl.init_model(dataclasses.replace(SMALL, n_classes=len(values)), 0)
    m.task_head.w2.data[...] = 0.0
    m.task_head.b2.data[...] = values
    return m


def test_pseudo_label_argmax_and_tie():
    x = np.random.default_rng(0).normal(size=(3, 4, 8))
    assert training.generate_pseudo_labels(x, _fixed_logit_model([0.9, 0.1])).tolist() == [0] * 3
    assert training.generate_pseudo_labels(x, _fixed_logit_model([0.5, 0.5])).tolist() == [0] * 3
    assert training.generate_pseudo_labels(x, _fixed_logit_model([0.1, 0.5, 0.5])).tolist() == [1] * 3


def test_pseudo_labels_match_argmax_oracle():
    m = mdl.init_model(SMALL, 7)
    x = np.random.default_rng(7).normal(size=(8, 5, 8))
    oracle = [int(np.argmax(mdl.predict(x[i:i + 1], m)[0])) for i in range(8)]
    assert training.generate_pseudo_labels(x, m).tolist() == oracle


def test_pseudo_label_threshold():
    x = np.zeros((2, 4, 8))
    labels = training.generate_pseudo_labels(x, _fixed_logit_model([0.0, 0.1]), threshold=0.9)
    assert labels.tolist() == [SENTINEL_UNLABELED] * 2


# -- Adam

def test_adam_zero_gradient_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st = training.AdamState.zeros_like([p])
    training.adam_step([p], [np.zeros(2)], st, lr=0.1)
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_first_step_is_minus_lr():
    p = Tensor(np.array([0.5]), requires_grad=True)
    st = training.AdamState.zeros_like([p])
    training.adam_step([p], [np.array([1.0])], st, lr=0.01, eps=0.0)
    assert p.data[0] == pytest.approx(0.49, abs=1e-15)


def reference_adam(x0, grad_fn, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = x0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * wd * x
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_matches_textbook_on_quadratic():
    grad = lambda x: 2.0 * (x - 3.0)  # noqa: E731
    p = Tensor(np.array([0.7]), requires_grad=True)
    st = training.AdamState.zeros_like([p])
    for _ in range(10):
        training.adam_step([p], [grad(p.data)], st, lr=0.05, wd=0.01)
    assert p.data[0] == pytest.approx(reference_adam(0.7, grad, 10, 0.05, 0.01), abs=1e-12)


def test_adam_aborts_on_non_finite_gradient():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    st = training.AdamState.zeros_like([p])
    with pytest.raises(NumericError):
        training.adam_step([p], [np.array([np.nan, 1.0])], st, lr=0.1)
    assert p.data.tolist() == [1.0, 2.0] and st.t == 0


# -- adversarial sign on a linear toy model

def test_adversarial_step_directions():
    rng = np.random.default_rng(8)
    x = np.concatenate([rng.normal(-1, 1, size=(20, 3)), rng.normal(1, 1, size=(20, 3))])
    dom = np.array([0] * 20 + [1] * 20)
    W = Tensor(rng.normal(size=(3, 2)) * 0.3, requires_grad=True)
    V = Tensor(rng.normal(size=(2, 2)) * 0.3, requires_grad=True)

    def disc_loss(w, v):
        return tn.cross_entropy(tn.gradient_reversal(tn.matmul(x, w), 0.5) @ v, dom)

    def acc(w, v):
        return np.mean(np.argmax(x @ w @ v, axis=1) == dom)

    base = disc_loss(W, V)
    tn.backward(base)
    eta = 0.05
    W_new = Tensor(W.data - eta * W.grad)
    V_new = Tensor(V.data - eta * V.grad)
    with tn.no_grad():
        assert disc_loss(W, V_new).item() < base.item()
        assert acc(W.data, V_new.data) >= acc(W.data, V.data)
        # the encoder moved towards a higher discriminator loss
        assert disc_loss(W_new, V).item() > base.item()
    # closed form: the reversed encoder gradient is -lambda times the true one
    dl = (np.exp(x @ W.data @ V.data) / np.exp(x @ W.data @ V.data).sum(1, keepdims=True)
          - np.eye(2)[dom]) / len(dom)
    np.testing.assert_allclose(W.grad, -0.5 * x.T @ dl @ V.data.T, atol=1e-12)


# -- training loop

def tiny_data(seed=0, **over):
    spec = GeneratorSpec(d=8, T=6, K=3, n_per_domain={"train": 24, "eval": 24}, seed=seed,
                         dynamic_sigma=0.3, **over)
    return generate_domain_pair(spec)


def run(cfg, pair, **kw):
    return training.train(pair.source["train"].batch, pair.target["train"].batch, cfg,
                          pair.source["eval"].batch, pair.target["eval"].batch, **kw)


def test_train_is_deterministic():
    pair = tiny_data()
    _, r1 = run(small_cfg(), pair)
    m2, r2 = run(small_cfg(), pair)
    assert r1.to_json() == r2.to_json()
    assert len(r1.epochs) == 2
    assert set(r1.epochs[0]) == {"epoch", "loss_cls", "loss_adv", "source_acc", "target_acc"}


def test_pseudo_labels_gated_by_start_epoch(monkeypatch):
    seen = []
    real = training.total_loss
    epoch = {"now": -1}

    def spy(b, model, cfg, adversarial=None):
        seen.append((epoch["now"], b.pseudo_active))
        return real(b, model, cfg, adversarial)

    monkeypatch.setattr(training, "total_loss", spy)
    pair = tiny_data(1)
    run(small_cfg(epochs=3, pseudo_start_epoch=2), pair,
        on_epoch=lambda r: epoch.__setitem__("now", r["epoch"]))
    # on_epoch fires after an epoch, so "now" lags by one
    assert all(not active for e, active in seen if e + 1 < 2)
    assert any(active for e, active in seen if e + 1 >= 2)


def test_source_only_ignores_target_and_reports_zero_lambda():
    pair = tiny_data(2)
    _, rep = run(small_cfg(variant="source_only", lambda1=0.07), pair)
    assert rep.lambda1 == 0.0
    assert all(e["loss_adv"] == 0.0 for e in rep.epochs)


def test_no_shift_target_tracks_source():
    spec = GeneratorSpec(seed=3, static_target_mean=[0.0] * 32)
    pair = generate_domain_pair(spec)
    cfg = desk_preset(lambda1=0.0, epochs=15, pseudo_start_epoch=15, seed=3)
    _, rep = run(cfg, pair, eval_every=15)
    assert abs(rep.target_acc - rep.source_acc) <= 5.0


def test_report_json_layout():
    pair = tiny_data(4)
    _, rep = run(small_cfg(epochs=1), pair)
    d = rep.to_dict()
    assert set(d) == {"epochs", "final"}
    assert {"lambda1", "target_acc", "seed", "preset"} <= set(d["final"])


def test_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(pseudo_start_epoch=5, epochs=2).validate()
    with pytest.raises(ConfigError):
        small_cfg(variant="nope").validate()
    with pytest.raises(ConfigError):
        desk_preset(bogus=1)


# -- grid search

def test_grid_search_runs_once_per_value():
    pair = tiny_data(5)
    best, rows = training.grid_search_lambda(pair.source["train"].batch,
                                             pair.target["train"].batch,
                                             small_cfg(epochs=1, pseudo_start_epoch=1),
                                             training.DEFAULT_GRID)
    assert len(rows) == 10
    assert [r["lambda1"] for r in rows] == list(training.DEFAULT_GRID)
    assert best in training.DEFAULT_GRID


def test_grid_search_tie_breaks_to_smallest(monkeypatch):
    calls = []

    def fake_train(src, tgt, cfg, source_eval=None, target_eval=None, **kw):
        calls.append(cfg.lambda1)
        rep = training.ExperimentReport(cfg.lambda1, cfg.seed, cfg.preset, cfg.variant)
        rep.target_acc = rep.source_acc = 50.0
        return None, rep

    monkeypatch.setattr(training, "train", fake_train)
    pair = tiny_data(6)
    best, rows = training.grid_search_lambda(pair.source["train"].batch, pair.target["train"].batch,
                                             small_cfg(), [0.05, 0.02, 0.09])
    assert best == 0.02 and calls == [0.05, 0.02, 0.09]
    best0, rows0 = training.grid_search_lambda(pair.source["train"].batch,
                                               pair.target["train"].batch, small_cfg(), [0.0])
    assert best0 == 0.0 and len(rows0) == 1


def test_grid_search_rejects_empty_grid():
    pair = tiny_data(7)
    with pytest.raises(ContractError):
        training.grid_search_lambda(pair.source["train"].batch, pair.target["train"].batch,
                                    small_cfg(), [])


def test_validation_split_is_disjoint():
    pair = tiny_data(8)
    tr, val = training.train_split(pair.source["train"].batch, 0.25, 0)
    assert len(tr) + len(val) == 24 and len(val) == 6
    rows_tr = {r.tobytes() for r in tr.x}
    assert not any(r.tobytes() in rows_tr for r in val.x)


def test_concat_keeps_domains():
    b = concat(batch(2, 0), batch(0, 3, seed=1))
    assert b.domain_label.tolist() == [0, 0, 1, 1, 1]

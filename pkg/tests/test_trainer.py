import math

import numpy as np
import pytest

from microcase import micro_instance, micro_knowledge, micro_samples, micro_taxonomy, numeric_gradients, relative_error
from queryclf.data import ConfigError, generate_synthetic, split_dataset
from queryclf.trainer import (
    ABLATIONS,
    AdamState,
    ModelState,
    TrainConfig,
    Workspace,
    adam_update,
    bce_loss,
    evaluate,
    label_forward,
    loss_and_grads,
    predict_scores,
    score_texts,
    train,
    train_step,
)


# ---------------------------------------------------------------------------
# interaction layer and loss


def test_zero_query_zero_bias_scores_half():
    s = predict_scores(np.zeros(3), np.ones((4, 3)), np.zeros(4))
    assert s.tolist() == [0.5] * 4


def test_large_bias_saturates():
    s = predict_scores(np.zeros(2), np.zeros((2, 2)), np.array([20.0, 0.0]))
    assert abs(s[0] - 1.0) < 1e-8


def test_hand_sigmoid():
    s = predict_scores(np.array([1.0, 0.0]), np.array([[2.0, 0.0]]), np.zeros(1))
    assert s[0] == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-15)
    assert round(s[0], 4) == 0.8808


def test_score_shape_mismatch():
    with pytest.raises(ValueError):
        predict_scores(np.zeros(3), np.zeros((4, 2)), np.zeros(4))


def test_bce_perfect_predictions_near_zero():
    y = np.array([1.0, 0.0, 1.0])
    assert bce_loss(y, y) < 1e-6


def test_bce_half_on_positive_is_ln2():
    assert bce_loss(np.array([0.5]), np.array([1.0])) == pytest.approx(math.log(2), abs=1e-15)


def test_bce_soft_target_entropy():
    got = bce_loss(np.array([0.85]), np.array([0.85]))
    assert got == pytest.approx(-(0.85 * math.log(0.85) + 0.15 * math.log(0.15)), abs=1e-15)
    assert round(got, 4) == 0.4227


def test_bce_rejects_out_of_range_targets():
    with pytest.raises(ValueError):
        bce_loss(np.array([0.5]), np.array([1.2]))


# ---------------------------------------------------------------------------
# Adam


def scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 4))
    g = rng.normal(size=(3, 4))
    params = {"w": p0.copy()}
    state = AdamState()
    for _ in range(2):
        adam_update(params, {"w": g}, state, 1e-3)
    want = np.vectorize(lambda p, gg: scalar_adam(p, [gg, gg], 1e-3))(p0, g)
    np.testing.assert_allclose(params["w"], want, rtol=0, atol=1e-12)
    assert state.step == 2


def test_adam_first_step_moves_by_lr_against_the_sign():
    g = np.array([3.0, -0.01, 1e-3])
    params = {"w": np.zeros(3)}
    adam_update(params, {"w": g}, AdamState(), 1e-4)
    np.testing.assert_allclose(params["w"], -1e-4 * np.sign(g), rtol=1e-4)


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.arange(4.0)}
    state = AdamState()
    adam_update(params, {"w": np.zeros(4)}, state, 1e-2)
    assert params["w"].tolist() == [0.0, 1.0, 2.0, 3.0] and state.step == 1


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_update({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState(), 1e-3)


def test_zero_gradient_step_leaves_model_unchanged():
    model, ws, batch = micro_instance()
    before = {k: v.copy() for k, v in model.parameters().items()}
    adam_update(model.parameters(), {k: np.zeros_like(v) for k, v in before.items()}, AdamState(), 1e-3)
    assert all(np.array_equal(before[k], v) for k, v in model.parameters().items())


# ---------------------------------------------------------------------------
# gradients of the full objective


def check_all_gradients(model, ws, batch, tau):
    targets = loss_and_grads(model, ws, batch, tau).targets
    res = loss_and_grads(model, ws, batch, tau, targets=targets)
    numeric = numeric_gradients(lambda: loss_and_grads(model, ws, batch, tau, targets=targets).loss, model.parameters())
    return {name: relative_error(res.grads[name], numeric[name]) for name in res.grads}


@pytest.mark.parametrize("variant", [v for v in ABLATIONS if v != "full"])
def test_ablation_variants_match_finite_differences(variant):
    model, ws, batch = micro_instance(**ABLATIONS[variant])
    errs = check_all_gradients(model, ws, batch, tau=0.3)
    assert max(errs.values()) < 1e-4, errs


def test_parameter_sets_follow_the_toggles():
    full = micro_instance()[0].parameters()
    assert any(k.startswith("gcn.") for k in full) and "label_table" not in full
    no_se = micro_instance(use_structure=False)[0].parameters()
    assert not any(k.startswith("gcn.") for k in no_se)
    no_le = micro_instance(use_label_enhanced=False)[0].parameters()
    assert no_le["label_table"].shape == (6, 8)


def test_stale_labels_skip_the_label_branch():
    model, ws, batch = micro_instance(use_semi=False)
    live = loss_and_grads(model, ws, batch, 1.0)
    stale = loss_and_grads(model, ws, batch, 1.0, labels=label_forward(model, ws))
    assert live.loss == stale.loss
    np.testing.assert_array_equal(live.grads["gcn.w1"], stale.grads["gcn.w1"])
    # rows used only by label texts lose their gradient
    label_only = [model.vocab.token_to_id[w] for w in ("w12", "w13", "w14", "w15")]
    assert np.abs(live.grads["encoder.embedding_table"][label_only]).sum() > 0
    assert not stale.grads["encoder.embedding_table"][label_only].any()


def test_semi_targets_are_constants():
    model, ws, batch = micro_instance()
    live = loss_and_grads(model, ws, batch, 0.0)
    assert np.count_nonzero(live.targets - batch.click) > 0
    frozen = loss_and_grads(model, ws, batch, 0.0, targets=live.targets.copy())
    for name in live.grads:
        assert np.array_equal(live.grads[name], frozen.grads[name]), name


def test_knowledge_fusion_changes_semi_targets():
    with_k = loss_and_grads(*micro_instance(), tau=0.0).targets
    without = loss_and_grads(*micro_instance(use_knowledge=False), tau=0.0).targets
    assert not np.array_equal(with_k, without)


# ---------------------------------------------------------------------------
# train_step


def test_overfit_one_batch():
    model, ws, batch = micro_instance(learning_rate=1e-3)
    adam = AdamState()
    losses = [train_step(model, ws, batch, adam, 0.8).loss for _ in range(50)]
    assert losses[-1] < losses[0]
    assert all(b <= a for a, b in zip(losses[5:], losses[6:]))


def test_empty_batch():
    model, ws, batch = micro_instance()
    empty = type(batch)([], batch.click[:0], [])
    with pytest.raises(ValueError):
        train_step(model, ws, empty, AdamState(), 1.0)


def test_nan_guard_names_the_tensor():
    model, ws, batch = micro_instance()
    model.gcn.w2[0, 0] = np.nan
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match="gcn.w2"):
        train_step(model, ws, batch, AdamState(), 1.0)
    model, ws, batch = micro_instance()
    model.bias[1] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match="non-finite values in bias"):
        loss_and_grads(model, ws, batch, 1.0)


# ---------------------------------------------------------------------------
# config


def test_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# desk run\nlearning_rate = 0.001\nbatch_size=32  # comment\nuse_semi = false\ndim = 16\n")
    cfg = TrainConfig.from_file(p)
    assert (cfg.learning_rate, cfg.batch_size, cfg.use_semi, cfg.dim) == (1e-3, 32, False, 16)
    assert cfg.epochs == 20 and cfg.tau_start == 1.0


def test_config_text_round_trip(tmp_path):
    cfg = TrainConfig(learning_rate=3e-4, use_graph_sim=False, seed=9)
    (tmp_path / "c.cfg").write_text(cfg.to_text())
    assert TrainConfig.from_file(tmp_path / "c.cfg") == cfg


def test_reference_config_file():
    from conftest import ROOT

    cfg = TrainConfig.from_file(ROOT / "configs" / "reference.cfg")
    assert (cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.dim) == (1e-4, 1024, 20, 768)
    assert (cfg.alpha_threshold, cfg.beta_threshold, cfg.max_query_len) == (0.5, 0.5, 20)


@pytest.mark.parametrize(
    "text, key",
    [
        ("learning_rate = -1", "learning_rate"),
        ("batch_size = zero", "batch_size"),
        ("alpha_threshold = 1.5", "alpha_threshold"),
        ("tau_start = 0.7\ntau_end = 0.8", "tau_end"),
        ("use_semi = maybe", "use_semi"),
        ("colour = red", "colour"),
    ],
)
def test_config_errors_name_the_key(tmp_path, text, key):
    (tmp_path / "c.cfg").write_text(text + "\n")
    with pytest.raises(ConfigError) as exc:
        TrainConfig.from_file(tmp_path / "c.cfg")
    assert exc.value.key == key


def test_structure_off_forces_graphs_off():
    cfg = TrainConfig(use_structure=False)
    assert not (cfg.use_graph_coo or cfg.use_graph_sim or cfg.use_graph_hier)


def test_ablation_table_has_seven_variants():
    assert list(ABLATIONS) == ["full", "w/o SE-S", "w/o SE-C", "w/o SE-H", "w/o SE", "w/o KE", "w/o LE&KE"]


# ---------------------------------------------------------------------------
# training loop


@pytest.fixture(scope="module")
def small_corpus():
    tax, samples, knowledge = generate_synthetic(10, 200, tail_fraction=0.2, seed=1)
    train_s, val_s, _ = split_dataset(samples, (0.8, 0.1, 0.1), seed=0)
    return tax, train_s, val_s, knowledge


def small_config(**kw):
    return TrainConfig(learning_rate=1e-3, epochs=3, dim=16, batch_size=32, **kw)


def test_zero_epochs_returns_initial_model(small_corpus, tmp_path):
    tax, train_s, val_s, knowledge = small_corpus
    res = train(small_config().with_overrides(epochs=0), train_s, val_s, tax, knowledge, out_dir=tmp_path)
    assert res.log == [] and res.model.epoch == 0
    assert (tmp_path / "last.ckpt").exists()
    assert (tmp_path / "metrics.jsonl").read_text() == ""


def test_training_is_deterministic(small_corpus):
    tax, train_s, val_s, knowledge = small_corpus
    a = train(small_config(), train_s, val_s, tax, knowledge)
    b = train(small_config(), train_s, val_s, tax, knowledge)
    assert a.log == b.log
    for (k, x), y in zip(a.model.parameters().items(), b.model.parameters().values()):
        assert np.array_equal(x, y), k


def test_log_records(small_corpus):
    tax, train_s, val_s, knowledge = small_corpus
    res = train(small_config(), train_s, val_s, tax, knowledge)
    assert [r["epoch"] for r in res.log] == [0, 1, 2]
    assert [r["tau"] for r in res.log] == [1.0, 0.9, 0.8]
    for r in res.log:
        assert {"train_loss", "val_micro_f1", "val_macro_f1", "val_micro_p", "semi_targets"} <= set(r)
        assert math.isfinite(r["train_loss"])


def test_stop_after_matches_the_full_run_prefix(small_corpus):
    tax, train_s, val_s, knowledge = small_corpus
    full = train(small_config(), train_s, val_s, tax, knowledge)
    part = train(small_config(), train_s, val_s, tax, knowledge, stop_after=2)
    assert part.log == full.log[:2]


@pytest.mark.parametrize("variant", list(ABLATIONS))
def test_every_variant_trains_and_reports(small_corpus, variant):
    tax, train_s, val_s, knowledge = small_corpus
    res = train(small_config(**ABLATIONS[variant]), train_s, val_s, tax, knowledge)
    assert len(res.log) == 3
    ws = Workspace.build(tax, res.model.vocab, res.model.config, knowledge, res.graph)
    row = evaluate(res.model, ws, val_s).row()
    assert len(row) == 6 and all(0.0 <= v <= 1.0 for v in row.values())


def test_label_refresh_runs(small_corpus):
    tax, train_s, val_s, knowledge = small_corpus
    res = train(small_config(label_refresh=3), train_s, val_s, tax, knowledge)
    assert len(res.log) == 3


def test_checkpoint_round_trip(small_corpus, tmp_path):
    tax, train_s, val_s, knowledge = small_corpus
    res = train(small_config(), train_s, val_s, tax, knowledge, out_dir=tmp_path)
    model, adam = ModelState.load(tmp_path / "last.ckpt")
    assert model.config == res.model.config and model.vocab == res.model.vocab and model.epoch == 3
    for k, v in res.model.parameters().items():
        assert np.array_equal(model.parameters()[k], v), k
        assert np.array_equal(adam.m[k], res.adam.m[k])
    assert adam.step == res.adam.step
    ws = Workspace.build(tax, model.vocab, model.config, knowledge, res.graph)
    texts = [s.query_text for s in val_s]
    np.testing.assert_array_equal(score_texts(model, ws, texts), score_texts(res.model, ws, texts))
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "graph.txt").exists()


def test_micro_fixture_shapes():
    tax = micro_taxonomy()
    assert (tax.num_nodes, tax.num_leaves) == (6, 4)
    assert len(micro_samples()) == 3 and len(micro_knowledge()) == 3
    model, ws, batch = micro_instance()
    assert len(model.vocab) == 20 and model.config.dim == 8

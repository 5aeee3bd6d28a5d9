import numpy as np
import pytest

from tsxplain.data import ClassWeights, compute_class_weights, synth_cohort, SynthConfig
from tsxplain.errors import ConfigError, DataError, ShapeError
from tsxplain.model import (
    AttentionParams,
    GRUParams,
    TrainConfig,
    TrainedModel,
    attention_matrix,
    backward,
    forward,
    gru_step,
    init_params,
    load_model,
    save_model,
    schema_fingerprint,
    tbbce,
    train,
)
from tsxplain.numerics import RngStream, sigmoid

from conftest import small_schema, toy_cohort


def make_model(F=3, H=4, seed=0, use_attention=False, schema=None) -> TrainedModel:
    gru, att = init_params(F, H, RngStream(seed), use_attention)
    if att is not None:
        # attention initializes to zero; tests want a nontrivial matrix
        gen = RngStream(seed).child(7).generator()
        att.W = gen.normal(scale=0.4, size=att.W.shape)
        att.b = gen.normal(scale=0.1, size=att.b.shape)
    fp = schema_fingerprint(schema or small_schema(F))
    return TrainedModel(gru=gru, attention=att, schema_fingerprint=fp)


def flatten_params(model: TrainedModel) -> np.ndarray:
    g = model.gru
    parts = [g.W_z, g.W_r, g.W_h, g.b_z, g.b_r, g.b_h, g.W_out, [g.b_out]]
    if model.attention is not None:
        parts += [model.attention.W, model.attention.b]
    return np.concatenate([np.ravel(p) for p in parts])


def set_params(model: TrainedModel, theta: np.ndarray) -> None:
    g = model.gru
    pos = 0
    for name in ("W_z", "W_r", "W_h", "b_z", "b_r", "b_h", "W_out"):
        arr = getattr(g, name)
        setattr(g, name, theta[pos : pos + arr.size].reshape(arr.shape))
        pos += arr.size
    g.b_out = float(theta[pos])
    pos += 1
    if model.attention is not None:
        a = model.attention
        a.W = theta[pos : pos + a.W.size].reshape(a.W.shape)
        pos += a.W.size
        a.b = theta[pos : pos + a.b.size]


def flatten_grads(grads: dict, use_attention: bool) -> np.ndarray:
    keys = ["W_z", "W_r", "W_h", "b_z", "b_r", "b_h", "W_out", "b_out"]
    if use_attention:
        keys += ["att_W", "att_b"]
    return np.concatenate([np.ravel(grads[k]) for k in keys])


class TestGruStep:
    def test_update_gate_one_keeps_state(self):
        # huge b_z drives z -> 1, so h_t == h_prev
        gru, _ = init_params(2, 3, RngStream(0), False)
        gru.b_z = np.full(3, 50.0)
        h_prev = np.array([0.3, -0.2, 0.9])
        h = gru_step(np.array([1.0, -1.0]), h_prev, gru)
        assert np.abs(h - h_prev).max() < 1e-12

    def test_update_gate_zero_takes_candidate(self):
        gru, _ = init_params(2, 3, RngStream(0), False)
        gru.b_z = np.full(3, -50.0)
        x = np.array([1.0, -1.0])
        h_prev = np.array([0.3, -0.2, 0.9])
        h = gru_step(x, h_prev, gru)
        cat1 = np.concatenate([x, h_prev])
        r = sigmoid(gru.W_r @ cat1 + gru.b_r)
        hc = np.tanh(gru.W_h @ np.concatenate([r * h_prev, x]) + gru.b_h)
        assert np.abs(h - hc).max() < 1e-12

    def test_transcription_oracle(self):
        # independently transcribed recurrence on random params
        gen = RngStream(8).generator()
        F, H = 3, 2
        gru = GRUParams(
            W_z=gen.normal(size=(H, F + H)),
            W_r=gen.normal(size=(H, F + H)),
            W_h=gen.normal(size=(H, H + F)),
            b_z=gen.normal(size=H),
            b_r=gen.normal(size=H),
            b_h=gen.normal(size=H),
            W_out=gen.normal(size=H),
            b_out=0.1,
            hidden_size=H,
        )
        x = gen.normal(size=F)
        h_prev = gen.normal(size=H)
        z = 1.0 / (1.0 + np.exp(-(gru.W_z @ np.r_[x, h_prev] + gru.b_z)))
        r = 1.0 / (1.0 + np.exp(-(gru.W_r @ np.r_[x, h_prev] + gru.b_r)))
        hc = np.tanh(gru.W_h @ np.r_[r * h_prev, x] + gru.b_h)
        expected = (1.0 - z) * hc + z * h_prev
        assert np.abs(gru_step(x, h_prev, gru) - expected).max() < 1e-14

    def test_hidden_state_bounded(self):
        gru, _ = init_params(2, 3, RngStream(1), False)
        h = np.zeros(3)
        gen = RngStream(2).generator()
        for _ in range(50):
            h = gru_step(gen.normal(scale=10.0, size=2), h, gru)
            assert np.all(np.abs(h) < 1.0)

    def test_shape_error(self):
        gru, _ = init_params(2, 3, RngStream(0), False)
        with pytest.raises(ShapeError):
            gru_step(np.zeros(5), np.zeros(3), gru)


class TestAttention:
    def test_zero_weights_uniform(self):
        att = AttentionParams(W=np.zeros((3, 3)), b=np.zeros(3))
        A = attention_matrix(np.random.default_rng(0).normal(size=(3, 4)), att)
        assert np.abs(A - 1.0 / 3.0).max() < 1e-12

    def test_columns_sum_to_one(self):
        gen = RngStream(3).generator()
        att = AttentionParams(W=gen.normal(size=(4, 4)), b=gen.normal(size=4))
        A = attention_matrix(gen.normal(size=(4, 6)), att)
        assert np.abs(A.sum(axis=0) - 1.0).max() < 1e-12
        assert (A > 0).all()

    def test_bias_shift_invariance(self):
        gen = RngStream(4).generator()
        att = AttentionParams(W=gen.normal(size=(3, 3)), b=gen.normal(size=3))
        X = gen.normal(size=(3, 5))
        shifted = AttentionParams(W=att.W, b=att.b + 7.5)
        assert np.abs(attention_matrix(X, att) - attention_matrix(X, shifted)).max() < 1e-9


class TestForward:
    def test_all_zero_input_constant_per_step(self):
        model = make_model()
        X = np.zeros((3, 5))
        M = np.ones((3, 5))
        yhat = forward(X, M, model)
        # zero input and zero initial state do not make the output constant
        # across steps (state evolves), but every value is a probability
        assert np.all((yhat > 0) & (yhat < 1))

    def test_masked_cells_bitwise_irrelevant(self):
        for use_att in (False, True):
            model = make_model(use_attention=use_att)
            gen = RngStream(6).generator()
            X = gen.normal(size=(3, 5))
            M = (gen.random((3, 5)) < 0.6).astype(float)
            X2 = X.copy()
            X2[M == 0.0] = gen.normal(scale=100.0, size=int((M == 0).sum()))
            a = forward(X, M, model)
            b = forward(X2, M, model)
            assert np.array_equal(a, b)

    def test_single_step_matches_gru_step(self):
        model = make_model(F=2, H=3, seed=9)
        x = np.array([[0.5], [1.5]])
        M = np.ones((2, 1))
        h = gru_step(x[:, 0], np.zeros(3), model.gru)
        expected = sigmoid(np.array([model.gru.W_out @ h + model.gru.b_out]))[0]
        got = forward(x, M, model)[0]
        assert abs(got - expected) < 1e-14

    def test_attention_rescales_input(self):
        model = make_model(F=3, H=4, seed=2, use_attention=True)
        gen = RngStream(7).generator()
        X = gen.normal(size=(3, 4))
        M = np.ones((3, 4))
        A = attention_matrix(X * M, model.attention)
        plain = TrainedModel(
            gru=model.gru, attention=None,
            schema_fingerprint=model.schema_fingerprint,
        )
        assert np.abs(forward(X, M, model) - forward(X * A, M, plain)).max() < 1e-12

    def test_feature_count_mismatch(self):
        model = make_model(F=3)
        with pytest.raises(ShapeError):
            forward(np.zeros((4, 5)), np.ones((4, 5)), model)


class TestTbbce:
    def test_balanced_halves_plain_bce(self):
        gen = RngStream(11).generator()
        yhat = gen.random((4, 6))
        y = (gen.random((4, 6)) < 0.5).astype(float)
        valid = np.ones((4, 6), dtype=bool)
        beta = ClassWeights(beta=np.full(6, 0.5))
        plain = -np.mean(y * np.log(yhat) + (1 - y) * np.log(1 - yhat))
        assert abs(tbbce(yhat, y, valid, beta) - 0.5 * plain) < 1e-12

    def test_hand_case(self):
        yhat = np.array([[0.5]])
        y = np.array([[1.0]])
        valid = np.ones((1, 1), dtype=bool)
        beta = ClassWeights(beta=np.array([0.9]))
        assert abs(tbbce(yhat, y, valid, beta) - 0.9 * np.log(2.0)) < 1e-9

    def test_invalid_steps_excluded(self):
        yhat = np.array([[0.5, 0.0001]])
        y = np.array([[1.0, 1.0]])
        valid = np.array([[True, False]])
        beta = ClassWeights(beta=np.full(2, 0.5))
        assert abs(tbbce(yhat, y, valid, beta) - 0.5 * np.log(2.0)) < 1e-12

    def test_no_valid_pairs(self):
        beta = ClassWeights(beta=np.full(2, 0.5))
        with pytest.raises(DataError):
            tbbce(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2), dtype=bool), beta)

    def test_perfect_prediction_near_zero(self):
        yhat = np.array([[1.0, 0.0]])
        y = np.array([[1.0, 0.0]])
        valid = np.ones((1, 2), dtype=bool)
        beta = ClassWeights(beta=np.full(2, 0.5))
        assert tbbce(yhat, y, valid, beta) < 1e-6


class TestBackward:
    @pytest.mark.parametrize("use_att", [False, True])
    def test_matches_finite_differences(self, use_att):
        cohort = toy_cohort([(1, 4), (None, 5), (2, 3)], F=4, T=5, seed=3)
        model = make_model(F=4, H=3, seed=1, use_attention=use_att)
        beta = compute_class_weights(cohort)
        batch = cohort.stacked()
        grads = flatten_grads(backward(batch, model, beta), use_att)

        X, M, y, valid = batch
        Xin = X * M

        def loss_at(theta):
            probe = make_model(F=4, H=3, seed=1, use_attention=use_att)
            set_params(probe, theta)
            from tsxplain.model import forward_prepared
            yhat = forward_prepared(Xin, probe.gru, probe.attention)
            return tbbce(yhat, y, valid, beta)

        theta0 = flatten_params(model)
        fd = np.zeros_like(theta0)
        h = 1e-6
        for i in range(theta0.size):
            tp, tm = theta0.copy(), theta0.copy()
            tp[i] += h
            tm[i] -= h
            fd[i] = (loss_at(tp) - loss_at(tm)) / (2 * h)
        denom = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(grads - fd) / denom) < 1e-4

    def test_masked_values_do_not_move_gradients(self):
        cohort = toy_cohort([(1, 4), (None, 5)], F=3, T=6, seed=4)
        model = make_model(F=3, H=3, seed=2, use_attention=True)
        beta = compute_class_weights(cohort)
        X, M, y, valid = cohort.stacked()
        M[:, 0, :3] = 0.0
        g1 = backward((X, M, y, valid), model, beta)
        X2 = X.copy()
        X2[:, 0, :3] = 999.0
        g2 = backward((X2, M, y, valid), model, beta)
        for k in g1:
            assert np.array_equal(np.asarray(g1[k]), np.asarray(g2[k]))

    def test_stationary_output_bias(self):
        # with yhat == beta-weighted optimum at every step the b_out gradient
        # vanishes; simplest case: balanced labels, yhat = 0.5 via zero params
        cohort = toy_cohort([(1, 4), (None, 4)], F=3, T=6, seed=5)
        model = make_model(F=3, H=3)
        model.gru.W_z[:] = 0.0
        model.gru.W_r[:] = 0.0
        model.gru.W_h[:] = 0.0
        model.gru.W_out[:] = 0.0
        model.gru.b_out = 0.0
        beta = compute_class_weights(cohort)
        X, M, y, valid = cohort.stacked()
        # keep only steps where both patients are valid and labels disagree
        valid = valid & np.array([[True] * 4 + [False] * 2] * 2)
        y = np.where(valid, y, 0.0)
        grads = backward((X, M, y, valid), model, beta)
        assert abs(grads["b_out"]) <= 1e-10


class TestTrain:
    def test_deterministic(self):
        cohort = toy_cohort([(1, 4)] * 4 + [(None, 4)] * 6, seed=6)
        cfg = TrainConfig(max_epochs=3, batch_size=4, seed=7)
        a = train(cohort, cfg, use_attention=False)
        b = train(cohort, cfg, use_attention=False)
        assert np.array_equal(a.gru.W_z, b.gru.W_z)
        assert np.array_equal(a.gru.W_out, b.gru.W_out)
        assert a.history["val_loss"] == b.history["val_loss"]

    def test_loss_decreases(self):
        cohort = synth_cohort(SynthConfig(n_patients=80, signal_strength=6.0, seed=1))
        cfg = TrainConfig(max_epochs=8, learning_rate=0.25, patience=8, seed=0)
        model = train(cohort, cfg, use_attention=False)
        losses = model.history["train_loss"]
        assert losses[-1] < losses[0]

    def test_patience_zero_stops_at_first_regression(self):
        cohort = toy_cohort([(1, 4)] * 5 + [(None, 4)] * 7, seed=8)
        cfg = TrainConfig(max_epochs=50, patience=0, learning_rate=2.0, seed=3)
        model = train(cohort, cfg, use_attention=False)
        hist = model.history
        if len(hist["val_loss"]) < 50:  # stopped early
            assert len(hist["val_loss"]) == hist["best_epoch"] + 2

    def test_grid_selection_recorded(self):
        cohort = toy_cohort([(1, 4)] * 6 + [(None, 4)] * 8, seed=9)
        cfg = TrainConfig(
            max_epochs=2, cv_folds=2, seed=0,
            grid_learning_rates=(0.1, 0.5), grid_hidden_sizes=(4,),
        )
        model = train(cohort, cfg, use_attention=False)
        sel = model.history["selected"]
        assert sel["learning_rate"] in (0.1, 0.5)
        assert sel["hidden_size"] == 4

    def test_empty_cohort(self):
        with pytest.raises(DataError):
            train(toy_cohort([]), TrainConfig(), use_attention=False)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(dropout_rate=1.0)


class TestCheckpoint:
    @pytest.mark.parametrize("use_att", [False, True])
    def test_round_trip_bit_exact(self, tmp_path, use_att):
        cohort = toy_cohort([(1, 4)] * 3 + [(None, 4)] * 5, seed=10)
        cfg = TrainConfig(max_epochs=2, seed=1)
        model = train(cohort, cfg, use_attention=use_att)
        path = tmp_path / "ckpt.txt"
        save_model(model, path)
        back = load_model(path)
        assert np.array_equal(back.gru.W_z, model.gru.W_z)
        assert np.array_equal(back.gru.W_h, model.gru.W_h)
        assert np.array_equal(back.gru.W_out, model.gru.W_out)
        assert back.gru.b_out == model.gru.b_out
        assert back.schema_fingerprint == model.schema_fingerprint
        assert back.threshold == model.threshold
        assert back.history["val_loss"] == model.history["val_loss"]
        if use_att:
            assert np.array_equal(back.attention.W, model.attention.W)
            assert np.array_equal(back.attention.b, model.attention.b)
        else:
            assert back.attention is None
        # predictions identical bitwise
        gen = RngStream(12).generator()
        X = gen.normal(size=(cohort.F, cohort.T))
        M = np.ones((cohort.F, cohort.T))
        assert np.array_equal(forward(X, M, model), forward(X, M, back))

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("not a checkpoint\n")
        with pytest.raises(ConfigError):
            load_model(path)

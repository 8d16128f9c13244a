import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apfl.broadcast import (
    BROADCAST,
    NO_BROADCAST,
    BroadcastController,
    PredictorState,
    TopKHistory,
    average_predictors,
    decide_and_maybe_broadcast,
    encode,
    ground_truth_label,
    maintain_on_expand,
    maintain_on_merge,
    merge_histories,
    predict,
    pretrain,
    record_change,
    train_batch,
    train_step,
)
from apfl.errors import DivergedPredictor, RejectedInput
from apfl.model import ParamVector


def vec(values):
    return ParamVector(np.array(values, dtype=float), (0, len(values)))


def small_predictor(seed=0, width=16, lr=0.05):
    return PredictorState.create(hidden=(width, width), lr=lr, seed=seed)


class TestHistory:
    def test_padding(self):
        h = record_change(TopKHistory(3), 5)
        assert list(h.records) == [0, 0, 5]

    def test_eviction(self):
        h = TopKHistory(3)
        for d in (1, 2, 3, 4):
            record_change(h, d)
        assert list(h.records) == [2, 3, 4]

    def test_negative_rejected(self):
        with pytest.raises(RejectedInput):
            record_change(TopKHistory(3), -1.0)
        with pytest.raises(RejectedInput):
            record_change(TopKHistory(3), float("inf"))

    @given(st.integers(1, 12), st.lists(st.floats(0, 1e6), max_size=30))
    def test_length_invariant(self, k, deltas):
        h = TopKHistory(k)
        for d in deltas:
            record_change(h, d)
            assert len(h) == k

    def test_resize_keeps_recent(self):
        h = TopKHistory(3, [1, 2, 3])
        h.resize(5)
        assert list(h.records) == [0, 0, 1, 2, 3]
        h.resize(2)
        assert list(h.records) == [2, 3]


class TestGroundTruth:
    def test_just_broadcast_no(self):
        assert ground_truth_label(vec([0, 0]), vec([1, 0]), vec([0, 0])) == NO_BROADCAST

    def test_converged_step_yes(self):
        assert ground_truth_label(vec([0, 0]), vec([0, 0]), vec([0.5, 0])) == BROADCAST

    def test_example(self):
        assert ground_truth_label(vec([0, 0]), vec([1, 0]), vec([3, 0])) == BROADCAST


class TestEncode:
    def test_zero_entries_stay_zero(self):
        assert encode(np.array([0.0, 2.0]), 2.0).tolist() == [0.0, 0.5]

    def test_gap_relative(self):
        out = encode(np.array([1.0, 3.0]), 1.0)
        np.testing.assert_allclose(out, [0.5, 0.25])


class TestPredictor:
    def test_deterministic_and_normalized(self):
        pred = small_predictor()
        h = TopKHistory(5, [0.1, 0.4, 0.2])
        assert predict(pred, h, 0.3) == predict(pred, h, 0.3)
        probs, _ = pred.forward(np.array([[0.1, 0.5, 0.9]]))
        assert abs(probs.sum() - 1) < 1e-6

    def test_default_shape(self):
        pred = PredictorState.create()
        assert pred.hidden == (128, 128)
        assert pred.lr == 0.01

    def test_invalid_label(self):
        with pytest.raises(RejectedInput):
            train_step(small_predictor(), TopKHistory(3), 2)

    def test_non_finite_loss(self):
        pred = small_predictor()
        pred.params["Wo"][:] = np.nan
        with pytest.raises(DivergedPredictor):
            train_step(pred, TopKHistory(3, [1.0]), 1, 1.0)

    def test_loss_non_increasing_on_one_pair(self):
        pred = small_predictor(lr=0.01)
        h = TopKHistory(4, [0.2, 0.3, 0.1, 0.4])
        losses = [train_step(pred, h, BROADCAST, 0.5) for _ in range(20)]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_confident_correct_prediction_has_near_zero_loss(self):
        pred = small_predictor()
        pred.params["Wo"][:] = 0.0
        pred.params["bo"][:] = [0.0, 50.0]
        assert train_step(pred, TopKHistory(3, [1.0]), BROADCAST, 1.0) < 1e-12

    def test_average_predictors(self):
        a, b = small_predictor(1), small_predictor(2)
        avg = average_predictors(a, b)
        np.testing.assert_allclose(avg.params["Wh1"], 0.5 * (a.params["Wh1"] + b.params["Wh1"]))
        assert avg.steps == 0


def _stream(rng, n, k=6):
    """Stationary stream: the next change repeats the latest one."""
    X, y = [], []
    for _ in range(n):
        filled = int(rng.integers(1, k + 1))
        records = np.zeros(k)
        records[k - filled :] = rng.uniform(0.05, 1.0, size=filled)
        gap = float(rng.uniform(0.0, 2.0))
        label = ground_truth_label(vec([0.0]), vec([records[-1]]), vec([gap]))
        X.append(encode(records, gap))
        y.append(label)
    return np.array(X), np.array(y)


def test_pretrained_zero_history_predicts_no_broadcast():
    rng = np.random.default_rng(0)
    X, y = _stream(rng, 300)
    # an all-zero history means nothing changed since the last broadcast
    zeros = np.zeros((60, X.shape[1]))
    pairs = list(zip(np.vstack([X, zeros]), np.concatenate([y, np.zeros(60, dtype=int)])))
    pred = small_predictor()
    pretrain(pred, pairs, epochs=15, seed=0)
    assert pred.pretrained
    assert predict(pred, TopKHistory(6), 0.0) < 0.5


def test_predictor_consistency_on_stationary_stream():
    rng = np.random.default_rng(1)
    X, y = _stream(rng, 600)
    pred = small_predictor(lr=0.05)
    pretrain(pred, list(zip(X, y)), epochs=40, seed=1)
    pred.lr = 1e-6
    X_test, y_test = _stream(rng, 300)
    probs, _ = pred.forward(X_test)
    agreement = float(np.mean((probs[:, BROADCAST] >= 0.5).astype(int) == y_test))
    assert agreement >= 0.9


def test_overfits_separable_batch_at_default_width():
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 1, size=(16, 10))
    y = (X[:, -1] > 0.5).astype(int)
    pred = PredictorState.create(seed=3)
    for _ in range(200):
        train_batch(pred, X, y)
    probs, _ = pred.forward(X)
    assert np.all(probs.argmax(axis=1) == y)


class TestDecide:
    def _ctrl(self, predictor=None):
        return BroadcastController(vec([0.0, 0.0]), 3, predictor)

    def test_unchanged_center_after_broadcast(self):
        ctrl = self._ctrl()
        c = vec([0.0, 0.0])
        d = decide_and_maybe_broadcast(ctrl, c, c, 1.0, "oracle", next_center=vec([1.0, 0.0]))
        assert not d.broadcast

    def test_always_and_never(self):
        ctrl = self._ctrl()
        centers = [vec([float(i), 0.0]) for i in range(6)]
        assert all(decide_and_maybe_broadcast(ctrl, a, b, 0.0, "always").broadcast for a, b in zip(centers, centers[1:]))
        ctrl = self._ctrl()
        assert not any(decide_and_maybe_broadcast(ctrl, a, b, 0.0, "never").broadcast for a, b in zip(centers, centers[1:]))

    def test_delayed_label_uses_next_center_only(self):
        ctrl = self._ctrl()
        first = decide_and_maybe_broadcast(ctrl, vec([0, 0]), vec([1, 0]), 0.0, "never")
        assert first.previous_label is None
        second = decide_and_maybe_broadcast(ctrl, vec([1, 0]), vec([1.5, 0]), 1.0, "never")
        # previous center [1,0], broadcast [0,0]: gap 1 >= next change 0.5
        assert second.previous_label == BROADCAST

    def test_broadcast_updates_bookkeeping(self):
        ctrl = self._ctrl()
        decide_and_maybe_broadcast(ctrl, vec([0, 0]), vec([2, 0]), 3.0, "always")
        assert ctrl.book.v_broadcast.equals(vec([2, 0])) and ctrl.book.gap(vec([2, 0])) == 0

    def test_predictor_mode_requires_predictor(self):
        with pytest.raises(RejectedInput):
            decide_and_maybe_broadcast(self._ctrl(), vec([0, 0]), vec([1, 0]), 0.0, "predictor")

    def test_unknown_mode(self):
        with pytest.raises(RejectedInput):
            decide_and_maybe_broadcast(self._ctrl(), vec([0, 0]), vec([1, 0]), 0.0, "sometimes")

    def test_predictor_mode_probability(self):
        ctrl = self._ctrl(small_predictor())
        d = decide_and_maybe_broadcast(ctrl, vec([0, 0]), vec([1, 0]), 0.0, "predictor")
        assert 0.0 <= d.probability <= 1.0 and d.broadcast == (d.probability >= 0.5)


class TestMaintenance:
    def test_expand(self):
        parent = BroadcastController(vec([0, 0]), 4, small_predictor())
        for d in (0.5, 0.7, 0.2):
            record_change(parent.history, d)
        child = maintain_on_expand(parent, vec([1, 1]), 4, 0.2)
        for name in parent.predictor.params:
            assert np.array_equal(child.predictor.params[name], parent.predictor.params[name])
        assert child.predictor.params["Wo"] is not parent.predictor.params["Wo"]
        assert np.count_nonzero(child.history.as_array()) == 1

    def test_merge_history_zero_variance(self):
        a = TopKHistory(4, [1, 1, 1, 1])
        b = TopKHistory(4, [1, 5, 2, 8])
        merged = merge_histories(a, b, 4)
        assert sorted(merged.records) == [1, 2, 5, 8]

    def test_merge_history_equal_variance(self):
        a = TopKHistory(5, [1, 2, 3, 4, 5])
        b = TopKHistory(5, [11, 12, 13, 14, 15])
        merged = list(merge_histories(a, b, 5).records)
        assert sum(v < 10 for v in merged) == 3 and sum(v > 10 for v in merged) == 2
        # largest entries first within each buffer
        assert sorted(v for v in merged if v < 10) == [3, 4, 5]

    @settings(max_examples=50)
    @given(
        st.lists(st.floats(0, 100), min_size=1, max_size=12),
        st.lists(st.floats(0, 100), min_size=1, max_size=12),
        st.integers(1, 12),
    )
    def test_merge_history_length(self, ra, rb, k):
        merged = merge_histories(TopKHistory(len(ra), ra), TopKHistory(len(rb), rb), k)
        assert len(merged) == k

    def test_merge_controllers(self):
        a = BroadcastController(vec([0, 0]), 3, small_predictor(1))
        b = BroadcastController(vec([1, 1]), 3, small_predictor(2))
        merged = maintain_on_merge(a, b, vec([0.5, 0.5]), 3, now=4.0)
        assert merged.book.v_broadcast.equals(vec([0.5, 0.5]))
        np.testing.assert_allclose(merged.predictor.params["bo"], 0.5 * (a.predictor.params["bo"] + b.predictor.params["bo"]))

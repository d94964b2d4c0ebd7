import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cali import diffcore as dc
from cali import losses as L
from cali import metrics as M
from cali.losses import ValidationError
from cali.trainer import default_model

labels = arrays(np.int64, (6, 6), elements=st.integers(0, 2))


def count_oracle(pred, truth, k):
    cm = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(pred.ravel(), truth.ravel()):
        cm[t, p] += 1
    return cm


class TestConfusion:
    def test_perfect(self):
        t = np.random.default_rng(0).integers(0, 3, (8, 8))
        cm = M.accumulate(M.confusion(3), t, t)
        assert np.all(cm == np.diag(np.diag(cm)))

    def test_unit(self):
        cm = M.accumulate(M.confusion(2), np.array([1]), np.array([0]))
        assert cm[0, 1] == 1 and cm.sum() == 1

    def test_random_matches_counting(self):
        rng = np.random.default_rng(4)
        p, t = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
        assert np.array_equal(M.accumulate(M.confusion(4), p, t), count_oracle(p, t, 4))

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            M.accumulate(M.confusion(2), np.array([2]), np.array([0]))

    @given(labels, labels, labels, labels)
    def test_order_independent(self, p1, t1, p2, t2):
        a = M.accumulate(M.accumulate(M.confusion(3), p1, t1), p2, t2)
        b = M.accumulate(M.accumulate(M.confusion(3), p2, t2), p1, t1)
        assert np.array_equal(a, b)


class TestIoU:
    def test_hand_matrix(self):
        cm = np.array([[50, 10], [20, 20]])
        assert M.iou(cm, 0) == pytest.approx(0.625)
        assert M.iou(cm, 1) == pytest.approx(0.4)
        assert M.miou_star(cm) == pytest.approx(0.5125)

    def test_perfect(self):
        t = np.arange(9).reshape(3, 3) % 3
        assert M.miou_star(M.accumulate(M.confusion(3), t, t)) == 1.0

    def test_disjoint(self):
        t = np.arange(9).reshape(3, 3) % 3
        cm = M.accumulate(M.confusion(3), (t + 1) % 3, t)
        assert np.all(M.per_class_iou(cm) == 0)

    def test_absent_class_skipped(self):
        cm = np.array([[5, 0, 0], [0, 5, 0], [0, 0, 0]])
        assert np.isnan(M.iou(cm, 2)) and M.miou_star(cm) == 1.0
        with pytest.raises(M.UndefinedResult):
            M.miou_star(cm, evaluated=[2])

    @given(labels, labels, st.permutations([0, 1, 2]))
    def test_range_and_permutation(self, p, t, perm):
        perm = np.array(perm)
        cm = M.accumulate(M.confusion(3), p, t)
        cmp = M.accumulate(M.confusion(3), perm[p], perm[t])
        a, b = M.per_class_iou(cm), M.per_class_iou(cmp)
        np.testing.assert_array_equal(a, b[perm])
        vals = a[~np.isnan(a)]
        assert np.all((vals >= 0) & (vals <= 1))

    def test_csv(self):
        cm = np.array([[50, 10, 0], [20, 20, 0], [0, 0, 0]])
        assert M.iou_table_csv(cm) == "class,iou,present\n0,0.625,1\n1,0.4,1\n2,nan,0\n"


class TestTargetDiscrepancy:
    def _imgs(self):
        rng = np.random.default_rng(0)
        return [rng.uniform(size=(3, 32, 32)).astype(np.float32) for _ in range(3)]

    def test_identical_heads(self):
        m = default_model(3, 1)
        for k, t in m.C1.items():
            m.C2[k.replace("C1", "C2")].data[...] = t.data
        assert M.mean_target_discrepancy(m, self._imgs()) == 0.0

    def test_matches_loss_op(self):
        m = default_model(3, 2)
        imgs = self._imgs()
        ref = []
        for x in imgs:
            f = m.features(x)
            ref.append(L.discrepancy(m.classify("C1", f), m.classify("C2", f)).item())
        val = M.mean_target_discrepancy(m, imgs)
        assert val == pytest.approx(np.mean(ref), abs=1e-6)
        assert 0.0 <= val <= 2.0

    def test_empty(self):
        with pytest.raises(dc.UsageError):
            M.mean_target_discrepancy(default_model(3, 0), [])

import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from tpl import data, scoring, trainer
from tpl.errors import EmptyBufferView
from tpl.numerics import RngState


@pytest.fixture(scope="module")
def small_run():
    stream = data.generate_gaussian_stream(
        n_tasks=2, classes_per_task=2, dim=8, separation=6.0,
        samples_per_class_train=60, samples_per_class_test=30, rng=RngState(1),
    )
    cfg = trainer.TrainConfig(
        epochs=8, batch_size=32, hidden_widths=(24, 24), buffer_capacity=40
    )
    return trainer.run_sequence(stream, cfg, seed=3)


# --- logit-derived scores ---------------------------------------------------

def test_logit_scores_basics():
    logits = np.array([[2.0, -1.0, 0.5]])  # 2 real classes + spare unit
    assert scoring.mls_score(logits, 2)[0] == 2.0
    msp = scoring.msp_score(logits, 2)[0]
    assert math.isclose(msp, math.exp(2) / (math.exp(2) + math.exp(-1)), rel_tol=1e-12)
    ebo = scoring.ebo_score(logits, 2)[0]
    assert math.isclose(ebo, math.log(math.exp(2) + math.exp(-1)), rel_tol=1e-12)
    # spare-unit logit must not leak into any of them
    bumped = logits.copy()
    bumped[0, 2] = 1e6
    assert scoring.mls_score(bumped, 2)[0] == 2.0
    assert math.isclose(scoring.msp_score(bumped, 2)[0], msp, rel_tol=1e-12)
    assert math.isclose(scoring.ebo_score(bumped, 2)[0], ebo, rel_tol=1e-12)


def test_logit_score_relations():
    rng = RngState(2).stream("logits")
    logits = rng.standard_normal((50, 4))
    mls = scoring.mls_score(logits, 3)
    ebo = scoring.ebo_score(logits, 3)
    msp = scoring.msp_score(logits, 3)
    assert np.all(ebo >= mls - 1e-12)
    assert np.all(ebo <= mls + math.log(3) + 1e-12)
    assert np.all((msp > 1 / 3 - 1e-12) & (msp <= 1.0))


def test_logit_scores_stable_for_huge_logits():
    logits = np.array([[1e6, 1e6 - 1.0, 0.0]])
    assert np.isfinite(scoring.msp_score(logits, 2)[0])
    assert np.isfinite(scoring.ebo_score(logits, 2)[0])


# --- Mahalanobis score ------------------------------------------------------

def unit_stats(means):
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    return trainer.TaskStats(
        task_id=1, class_means=means, precision=np.eye(means.shape[1]),
        beta_mls=1.0, beta_md=1.0,
    )


def test_md_score_hand_case():
    stats = unit_stats([[0.0, 0.0]])
    out = scoring.md_score(np.array([[3.0, 4.0]]), stats)
    assert math.isclose(out[0], 1.0 / 25.0, rel_tol=1e-12)


def test_md_score_picks_nearest_class():
    stats = unit_stats([[0.0, 0.0], [10.0, 0.0]])
    out = scoring.md_score(np.array([[9.0, 0.0]]), stats)
    assert math.isclose(out[0], 1.0, rel_tol=1e-12)


def test_md_score_floored_at_centroid():
    stats = unit_stats([[1.0, 2.0]])
    out = scoring.md_score(np.array([[1.0, 2.0]]), stats)
    assert out[0] == 1e12


def test_md_score_matches_bruteforce():
    rng = RngState(5).stream("md")
    for _ in range(50):
        d = int(rng.integers(2, 6))
        c = int(rng.integers(1, 4))
        means = rng.standard_normal((c, d))
        a = rng.standard_normal((d, d))
        prec = a @ a.T + d * np.eye(d)
        stats = trainer.TaskStats(1, means, prec, 1.0, 1.0)
        x = rng.standard_normal((7, d))
        got = scoring.md_score(x, stats)
        for i in range(7):
            best = min(
                float((x[i] - means[j]) @ prec @ (x[i] - means[j])) for j in range(c)
            )
            assert math.isclose(got[i], 1.0 / max(best, 1e-12), rel_tol=1e-9)


def test_md_rank_matches_max_class_log_density():
    # with shared covariance, the MD score orders points exactly like the
    # highest class log-density under the same parameters
    rng = RngState(6).stream("rank")
    means = rng.standard_normal((3, 4)) * 3.0
    a = rng.standard_normal((4, 4))
    cov = a @ a.T + 4 * np.eye(4)
    prec = np.linalg.inv(cov)
    stats = trainer.TaskStats(1, means, (prec + prec.T) / 2, 1.0, 1.0)
    x = rng.standard_normal((500, 4)) * 2.0
    smd = scoring.md_score(x, stats)
    const = -0.5 * np.log(np.linalg.det(2 * np.pi * cov))
    logd = np.max(
        [
            const - 0.5 * np.einsum("nd,de,ne->n", x - m, stats.precision, x - m)
            for m in means
        ],
        axis=0,
    )
    keep = smd < 1e12  # floor-saturated points carry no ranking information
    rho = spearmanr(smd[keep], logd[keep]).statistic
    assert rho == 1.0


# --- KNN distance -----------------------------------------------------------

def test_knn_distance_hand_geometry():
    # index on two orthogonal unit axes; query on the first
    index = np.array([[1.0, 0.0], [0.0, 1.0]])
    q = np.array([[2.0, 0.0]])  # normalizes onto the first axis
    d1 = scoring.knn_kth_distance(q, index, 1)
    assert math.isclose(d1[0], 0.0, abs_tol=1e-12)
    d2 = scoring.knn_kth_distance(q, index, 2)
    assert math.isclose(d2[0], math.sqrt(2.0), rel_tol=1e-12)


def test_knn_distance_fewer_than_k_uses_farthest():
    index = np.array([[1.0, 0.0], [0.0, 1.0]])
    d9 = scoring.knn_kth_distance(np.array([[1.0, 0.0]]), index, 9)
    assert math.isclose(d9[0], math.sqrt(2.0), rel_tol=1e-12)


def test_knn_distance_empty_index():
    with pytest.raises(EmptyBufferView):
        scoring.knn_kth_distance(np.array([[1.0, 0.0]]), np.empty((0, 2)), 5)


def test_knn_distance_bounded_on_sphere():
    rng = RngState(7).stream("knn")
    q = rng.standard_normal((40, 5))
    b = rng.standard_normal((30, 5))
    for k in (1, 5, 30):
        d = scoring.knn_kth_distance(q, b, k)
        assert np.all(d >= 0)
        assert np.all(d <= 2.0 + 1e-12)


def test_knn_distance_matches_bruteforce():
    rng = RngState(8).stream("knn2")
    for _ in range(30):
        m = int(rng.integers(1, 12))
        d = int(rng.integers(2, 6))
        k = int(rng.integers(1, 8))
        q = rng.standard_normal((5, d))
        b = rng.standard_normal((m, d))
        got = scoring.knn_kth_distance(q, b, k)
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        bn = b / np.linalg.norm(b, axis=1, keepdims=True)
        for i in range(5):
            dists = sorted(float(np.linalg.norm(qn[i] - bn[j])) for j in range(m))
            expect = dists[min(k, m) - 1]
            assert math.isclose(got[i], expect, rel_tol=0, abs_tol=1e-9)


# --- composed score ---------------------------------------------------------

def test_tpl_score_equal_routes():
    out = scoring.tpl_score(np.array([2.0]), np.array([2.0]), np.array([0.0]), 1.0, 1.0)
    assert math.isclose(out[0], 2.0 + math.log(2.0), rel_tol=1e-12)
    out_min = scoring.tpl_score(
        np.array([2.0]), np.array([2.0]), np.array([0.0]), 1.0, 1.0, "softmin"
    )
    assert math.isclose(out_min[0], 2.0 - math.log(2.0), rel_tol=1e-12)


def test_tpl_score_bounds_both_variants():
    rng = RngState(9).stream("tpl")
    mls = rng.standard_normal(100) * 5
    md = np.abs(rng.standard_normal(100)) * 3
    knn = np.abs(rng.standard_normal(100))
    b1, b2 = 0.7, 1.3
    routes = np.stack([b1 * mls, b2 * md + knn])
    hi = np.max(routes, axis=0)
    lo = np.min(routes, axis=0)
    canon = scoring.tpl_score(mls, md, knn, b1, b2, "canonical")
    soft = scoring.tpl_score(mls, md, knn, b1, b2, "softmin")
    assert np.all(canon >= hi - 1e-12)
    assert np.all(canon <= hi + math.log(2) + 1e-12)
    assert np.all(soft <= lo + 1e-12)
    assert np.all(soft >= lo - math.log(2) - 1e-12)
    assert np.all(canon >= soft - 1e-12)


def test_tpl_score_monotone_in_each_route():
    base = scoring.tpl_score(np.array([1.0]), np.array([2.0]), np.array([0.5]), 1.0, 1.0)
    up_mls = scoring.tpl_score(np.array([1.5]), np.array([2.0]), np.array([0.5]), 1.0, 1.0)
    up_knn = scoring.tpl_score(np.array([1.0]), np.array([2.0]), np.array([0.9]), 1.0, 1.0)
    assert up_mls[0] > base[0]
    assert up_knn[0] > base[0]


def test_tpl_score_stable_for_extreme_inputs():
    out = scoring.tpl_score(
        np.array([1e6, -1e6]), np.array([1e12, 1e-12]), np.array([2.0, 0.0]), 1.0, 1.0
    )
    assert np.all(np.isfinite(out))


# --- posterior --------------------------------------------------------------

def test_task_posterior_single_task_pinned():
    post = scoring.task_posterior(np.array([[3.7]]), 0.05)
    assert post.tolist() == [[1.0]]


def test_task_posterior_shift_invariant():
    s = np.array([[1.0, 2.0, 0.0]])
    a = scoring.task_posterior(s, 0.05)
    b = scoring.task_posterior(s + 55.5, 0.05)
    assert np.allclose(a, b, atol=1e-12)
    assert math.isclose(float(a.sum()), 1.0, abs_tol=1e-12)


def test_task_posterior_low_temperature_sharpens():
    s = np.array([[1.0, 1.2]])
    sharp = scoring.task_posterior(s, 0.05)
    flat = scoring.task_posterior(s, 10.0)
    assert sharp[0, 1] > flat[0, 1]
    assert sharp[0, 1] > 0.97


# --- end-to-end prediction --------------------------------------------------

def test_bundle_shapes_and_determinism(small_run):
    ctx = scoring.context_from_run(small_run)
    x = small_run.stream.tasks[0].test_x[:10]
    b1 = scoring.compute_bundle(ctx, x)
    b2 = scoring.compute_bundle(ctx, x)
    assert b1.mls.shape == (10, 2)
    assert np.array_equal(b1.knn_dist, b2.knn_dist)
    assert np.array_equal(b1.md, b2.md)
    for w in b1.wp:
        assert np.allclose(np.sum(w, axis=1), 1.0, atol=1e-12)


def test_predict_accuracy_on_easy_stream(small_run):
    ctx = scoring.context_from_run(small_run)
    correct = 0
    total = 0
    for task in small_run.stream.tasks:
        pred = scoring.predict(ctx, task.test_x)
        correct += int(np.sum(pred.global_class == task.test_y))
        total += task.test_y.shape[0]
    assert correct / total >= 0.9


def test_predict_outputs_consistent(small_run):
    ctx = scoring.context_from_run(small_run)
    x = small_run.stream.tasks[1].test_x[:7]
    pred = scoring.predict(ctx, x)
    assert pred.global_class.shape == (7,)
    assert set(pred.task_id.tolist()) <= {1, 2}
    assert np.all((pred.p_task > 0) & (pred.p_task <= 1.0))
    assert np.allclose(np.sum(pred.posterior, axis=1), 1.0, atol=1e-12)
    # the predicted class must belong to the predicted task
    for g, t in zip(pred.global_class, pred.task_id):
        assert g in small_run.stream.task(int(t)).classes


def test_predict_score_kind_variants_agree_on_shape(small_run):
    ctx = scoring.context_from_run(small_run)
    x = small_run.stream.tasks[0].test_x[:5]
    for kind in scoring.SCORE_KINDS:
        pred = scoring.predict(ctx, x, score_kind=kind)
        assert pred.global_class.shape == (5,)


def test_predict_tie_breaks_lexicographically(small_run):
    # calibration (0, 0.5) collapses every class value to 0.5: the earliest
    # task and class in declaration order must win
    ctx = scoring.context_from_run(small_run)
    ctx.calibration = {1: (0.0, 0.5), 2: (0.0, 0.5)}
    pred = scoring.predict(ctx, small_run.stream.tasks[1].test_x[:4])
    assert np.all(pred.task_id == 1)
    assert np.all(pred.global_class == small_run.stream.task(1).classes[0])


def test_score_matrix_kind_selection(small_run):
    ctx = scoring.context_from_run(small_run)
    x = small_run.stream.tasks[0].test_x[:6]
    bundle = scoring.compute_bundle(ctx, x)
    lr = scoring.task_score_matrix(ctx, bundle, "lr")
    for j, t in enumerate(bundle.task_ids):
        st = small_run.stats[t]
        expect = st.beta_md * bundle.md[:, j] + bundle.knn_dist[:, j]
        assert np.allclose(lr[:, j], expect, atol=1e-12)
    knn = scoring.task_score_matrix(ctx, bundle, "knn")
    assert np.allclose(knn, -bundle.knn_own, atol=1e-12)
    with pytest.raises(ValueError):
        scoring.task_score_matrix(ctx, bundle, "bogus")


def test_knn_indexes_point_in_opposite_directions(small_run):
    # an in-task sample sits close to its own task's replay features and far
    # from the other task's, so d_own < d_cross for most test points
    ctx = scoring.context_from_run(small_run)
    for j, d in enumerate(small_run.stream.tasks):
        bundle = scoring.compute_bundle(ctx, d.test_x)
        closer = np.mean(bundle.knn_own[:, j] < bundle.knn_dist[:, j])
        assert closer >= 0.9

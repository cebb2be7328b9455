import numpy as np
import pytest
from scipy.stats import pearsonr

from scenegame.features import (
    DegenerateFeatureError,
    FeatureVector,
    InfeasibleConstraintsError,
    NotPositiveDefiniteError,
    ProjectionSystem,
    QpSubproblem,
    ScoreTable,
    SingularSystemError,
    WeightVector,
    cluster_and_select,
    extract_features,
    feature_names,
    features_to_csv,
    optimize_weights,
    project_to_simplex,
    qp_step,
    solve_projection,
    weight_objective,
)
from scenegame.image import Image


def gray(arr):
    return Image(np.asarray(arr, dtype=np.uint8))


# ---------------------------------------------------------------------------
# extract_features
# ---------------------------------------------------------------------------

def test_constant_image_features():
    fv = extract_features(gray(np.full((8, 8), 40)))
    names = fv.names
    assert len(fv.values) == len(names) == 76
    for i, name in enumerate(names):
        if name.endswith("_var") or name.endswith("_edges"):
            assert fv.values[i] == 0.0
        if name.endswith("_hist02"):  # 40 // 16 == 2
            assert fv.values[i] == 1.0


def test_zero_image_features():
    fv = extract_features(gray(np.zeros((10, 12))))
    for i, name in enumerate(fv.names):
        if name.endswith("_mean") or name.endswith("_edges"):
            assert fv.values[i] == 0.0


def count_differing_pairs(block):
    # direct enumeration oracle for the edge density
    h, w = block.shape
    diff = 0
    total = 0
    for r in range(h):
        for c in range(w):
            if c + 1 < w:
                total += 1
                diff += block[r, c] != block[r, c + 1]
            if r + 1 < h:
                total += 1
                diff += block[r, c] != block[r + 1, c]
    return diff / total


def test_checkerboard_edge_density_is_one():
    yy, xx = np.mgrid[0:8, 0:8]
    board = ((yy + xx) % 2 * 255).astype(np.uint8)
    fv = extract_features(Image(board))
    for i, name in enumerate(fv.names):
        if name.endswith("_edges"):
            assert fv.values[i] == 1.0
    assert count_differing_pairs(board[:4, :4]) == 1.0


def test_edge_density_matches_counting_oracle():
    rng = np.random.default_rng(30)
    arr = rng.integers(0, 4, (10, 10)).astype(np.uint8) * 80
    fv = extract_features(Image(arr))
    blocks = [arr[:5, :5], arr[:5, 5:], arr[5:, :5], arr[5:, 5:]]
    edge_values = [fv.values[i] for i, n in enumerate(fv.names)
                   if n.endswith("_edges")]
    for got, block in zip(edge_values, blocks):
        assert got == pytest.approx(count_differing_pairs(block))


def test_feature_invariants_on_random_images():
    rng = np.random.default_rng(31)
    for _ in range(10):
        arr = rng.integers(0, 256, (12, 16), dtype=np.uint8)
        fv = extract_features(Image(arr))
        for block_idx in range(4):
            base = block_idx * 19
            hist = fv.values[base + 2:base + 18]
            assert hist.sum() == pytest.approx(1.0, abs=1e-9)
            assert 0.0 <= fv.values[base + 18] <= 1.0


def test_constant_intensity_shift_moves_only_means():
    # a shift inside one histogram bin leaves everything but the means alone
    a = extract_features(gray(np.full((8, 8), 40)))
    b = extract_features(gray(np.full((8, 8), 44)))
    for i, name in enumerate(a.names):
        if name.endswith("_mean"):
            assert b.values[i] == pytest.approx(a.values[i] + 4 / 255.0,
                                                abs=1e-12)
        else:
            assert a.values[i] == b.values[i]


def test_intensity_shift_keeps_variance_and_edges():
    rng = np.random.default_rng(32)
    arr = rng.integers(0, 90, (8, 8), dtype=np.uint8)
    shifted = (arr + 160).astype(np.uint8)
    a = extract_features(Image(arr))
    b = extract_features(Image(shifted))
    for i, name in enumerate(a.names):
        if name.endswith("_var") or name.endswith("_edges"):
            assert a.values[i] == pytest.approx(b.values[i], abs=1e-12)
        if name.endswith("_mean"):
            assert b.values[i] == pytest.approx(a.values[i] + 160 / 255.0,
                                                abs=1e-12)


def test_extract_rejects_small_images():
    with pytest.raises(ValueError):
        extract_features(gray(np.zeros((7, 8))))


def test_features_csv_layout():
    fv = extract_features(gray(np.zeros((8, 8))))
    csv = features_to_csv([fv, fv])
    lines = csv.strip().split("\n")
    assert lines[0].split(",") == list(feature_names())
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# solve_projection
# ---------------------------------------------------------------------------

def test_projection_identity():
    x = np.array([3.0, -1.0, 2.0])
    out = solve_projection(ProjectionSystem(matrix=np.eye(3), rhs=x))
    assert out == pytest.approx(x)


def test_projection_vandermonde_round_trip():
    nodes = np.array([1.0, 2.0, 3.0])
    z = np.vander(nodes, increasing=True).T  # rows are powers, like a moment matrix
    h = np.array([2.0, -1.0, 0.5])
    x = z @ h
    out = solve_projection(ProjectionSystem(matrix=z, rhs=x))
    assert out == pytest.approx(h, abs=1e-9)


def test_projection_duplicate_row_is_singular():
    z = np.array([[1.0, 2.0], [1.0, 2.0]])
    with pytest.raises(SingularSystemError):
        solve_projection(ProjectionSystem(matrix=z, rhs=np.array([1.0, 1.0])))


def test_projection_residual_bound_random_systems():
    rng = np.random.default_rng(33)
    for _ in range(25):
        n = int(rng.integers(2, 9))
        z = rng.normal(0, 1, (n, n))
        if np.linalg.cond(z) > 1e6:
            continue
        x = rng.normal(0, 1, n)
        h = solve_projection(ProjectionSystem(matrix=z, rhs=x))
        residual = np.abs(z @ h - x).max()
        assert residual <= 1e-8 * (1.0 + np.abs(x).max())


# ---------------------------------------------------------------------------
# cluster_and_select
# ---------------------------------------------------------------------------

def test_identical_columns_single_cluster():
    rng = np.random.default_rng(34)
    base = rng.normal(0, 1, 20)
    samples = np.column_stack([base, 2.0 * base, 0.5 * base + 0.0])
    out = cluster_and_select(samples, threshold=1.0 - 1e-9)
    assert out.clusters == ((0, 1, 2),)
    assert len(out.selected) == 1


def test_uncorrelated_columns_stay_apart():
    # orthogonal design: exact zero correlation
    a = np.array([1.0, 1.0, -1.0, -1.0])
    b = np.array([1.0, -1.0, 1.0, -1.0])
    out = cluster_and_select(np.column_stack([a, b]), threshold=0.5)
    assert out.clusters == ((0,), (1,))
    assert out.selected == (0, 1)


def test_high_threshold_no_merges():
    rng = np.random.default_rng(35)
    samples = rng.normal(0, 1, (30, 4))
    sim = np.abs(np.corrcoef(samples.T))
    np.fill_diagonal(sim, 0.0)
    theta = sim.max() + 1e-6
    out = cluster_and_select(samples, threshold=theta)
    assert len(out.clusters) == 4
    assert out.selected == (0, 1, 2, 3)


def test_zero_variance_column_rejected():
    samples = np.column_stack([np.ones(5), np.arange(5.0)])
    with pytest.raises(DegenerateFeatureError):
        cluster_and_select(samples, threshold=0.5)


def test_clusters_partition_indices():
    rng = np.random.default_rng(36)
    base = rng.normal(0, 1, (40, 2))
    samples = np.column_stack([
        base[:, 0], base[:, 0] + rng.normal(0, 0.05, 40),
        base[:, 1], base[:, 1] + rng.normal(0, 0.05, 40),
    ])
    out = cluster_and_select(samples, threshold=0.8)
    seen = sorted(i for cluster in out.clusters for i in cluster)
    assert seen == [0, 1, 2, 3]
    assert len(out.selected) == len(out.clusters)


def test_similarity_agrees_with_scipy_pearson():
    rng = np.random.default_rng(37)
    samples = rng.normal(0, 1, (25, 3))
    # clustering with threshold above 1 performs no merges; mirror the
    # similarity matrix through scipy as an independent reference
    from scenegame.features import _abs_correlation

    sim = _abs_correlation(samples)
    for i in range(3):
        for j in range(3):
            expected = abs(pearsonr(samples[:, i], samples[:, j])[0])
            assert sim[i, j] == pytest.approx(expected, abs=1e-12)


def test_cluster_order_invariance_up_to_tiebreak():
    rng = np.random.default_rng(38)
    base = rng.normal(0, 1, (50, 2))
    noise = rng.normal(0, 0.02, (50, 2))
    samples = np.column_stack([base[:, 0], base[:, 1],
                               base[:, 0] + noise[:, 0],
                               base[:, 1] + noise[:, 1]])
    out = cluster_and_select(samples, threshold=0.9)
    perm = [1, 3, 0, 2]  # columns permuted
    out_p = cluster_and_select(samples[:, perm], threshold=0.9)
    mapped = tuple(sorted(tuple(sorted(perm.index(i) for i in cluster))
                          for cluster in out.clusters))
    assert mapped == tuple(sorted(out_p.clusters))


# ---------------------------------------------------------------------------
# optimize_weights
# ---------------------------------------------------------------------------

def test_single_criterion_weight_is_one():
    scores = np.array([[0.2], [0.5], [1.0]])
    table = ScoreTable(scores=scores)
    wv, value = optimize_weights(table)
    assert wv.weights == pytest.approx([1.0])
    expected = ((scores[:, 0] - 0.2) / 0.8).sum()
    assert value == pytest.approx(expected)


def test_identical_criteria_stay_uniform():
    col = np.array([0.1, 0.4, 0.9, 0.3])
    table = ScoreTable(scores=np.column_stack([col, col]))
    wv, _ = optimize_weights(table)
    assert wv.weights == pytest.approx([0.5, 0.5])


def grid_search_best(table, step=0.01):
    return max(
        weight_objective(table, np.array([w1, 1.0 - w1]))
        for w1 in np.arange(0.0, 1.0 + 1e-12, step)
    )


def test_dominant_criterion_matches_grid():
    rng = np.random.default_rng(4)
    n = 10
    strong = rng.uniform(0.7, 0.95, n)
    weak = rng.uniform(0.2, 0.4, n)
    strong[0] = weak[0] = 1.0
    strong[1] = weak[1] = 0.0
    table = ScoreTable(scores=np.column_stack([strong, weak]))
    wv, value = optimize_weights(table)
    assert abs(wv.weights[0] - 1.0) < 0.02
    assert abs(value - grid_search_best(table)) < 1e-3


def test_weights_stay_on_simplex_and_beat_uniform():
    rng = np.random.default_rng(40)
    for seed in range(10):
        a = rng.beta(4.0, 1.5, 12)
        b = rng.beta(1.5, 4.0, 12)
        table = ScoreTable(scores=np.column_stack([a, b]))
        wv, value = optimize_weights(table)
        assert wv.weights.min() >= 0.0
        assert wv.weights.sum() == pytest.approx(1.0, abs=1e-9)
        uniform = weight_objective(table, np.full(2, 0.5))
        assert value >= uniform - 1e-12


def test_objective_invariant_under_affine_rescale():
    rng = np.random.default_rng(41)
    a = rng.beta(4.0, 1.5, 12)
    b = rng.beta(1.5, 4.0, 12)
    table = ScoreTable(scores=np.column_stack([a, b]))
    _, value = optimize_weights(table)
    rescaled = np.column_stack([3.0 * a + 10.0, 0.25 * b - 2.0])
    _, value2 = optimize_weights(ScoreTable(scores=rescaled))
    assert value2 == pytest.approx(value, abs=1e-6)


def test_zero_range_criterion_rejected():
    with pytest.raises(ValueError):
        ScoreTable(scores=np.array([[1.0, 2.0], [1.0, 3.0]]))


def test_weight_vector_validation():
    with pytest.raises(ValueError):
        WeightVector(weights=np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        WeightVector(weights=np.array([-0.1, 1.1]))


def test_simplex_projection():
    rng = np.random.default_rng(42)
    for _ in range(50):
        v = rng.normal(0, 2, int(rng.integers(1, 6)))
        w = project_to_simplex(v)
        assert w.min() >= 0.0
        assert w.sum() == pytest.approx(1.0, abs=1e-9)
    assert project_to_simplex(np.array([0.5, 0.5])) == pytest.approx([0.5, 0.5])


# ---------------------------------------------------------------------------
# qp_step
# ---------------------------------------------------------------------------

def test_qp_unconstrained_newton():
    g = np.array([1.0, -2.0, 0.5])
    sub = QpSubproblem(gradient=g, hessian=np.eye(3))
    d = qp_step(sub, damping=0.0)
    assert d == pytest.approx(-g)


def test_qp_equality_matches_kkt_closed_form():
    # minimize g.d + 0.5 d.d with 0.5 + (1,1).d = 0
    # stationarity: d = -g - nu (1,1); constraint gives nu = -0.25
    sub = QpSubproblem(gradient=np.array([1.0, 0.0]), hessian=np.eye(2),
                       eq_values=np.array([0.5]),
                       eq_grads=np.array([[1.0, 1.0]]))
    d = qp_step(sub, damping=0.0)
    assert d == pytest.approx([-0.75, 0.25])
    assert 0.5 + d.sum() == pytest.approx(0.0, abs=1e-12)


def test_qp_zero_hessian_unit_damping():
    g = np.array([2.0, -4.0])
    sub = QpSubproblem(gradient=g, hessian=np.zeros((2, 2)))
    d = qp_step(sub, damping=1.0)
    assert d == pytest.approx(-g)


def test_qp_default_damping_nearly_newton():
    g = np.array([1.0, 1.0])
    sub = QpSubproblem(gradient=g, hessian=np.eye(2))
    d = qp_step(sub)  # damping 1e-6 * trace / dim
    assert d == pytest.approx(-g, rel=1e-5)


def test_qp_inactive_inequality_ignored():
    sub = QpSubproblem(gradient=np.array([1.0, 0.0]), hessian=np.eye(2),
                       ineq_values=np.array([-10.0]),
                       ineq_grads=np.array([[1.0, 0.0]]))
    d = qp_step(sub, damping=0.0)
    assert d == pytest.approx([-1.0, 0.0])


def test_qp_violated_inequality_becomes_active():
    # unconstrained solution d = (1, 0) violates 0 + (1,0).d <= 0
    sub = QpSubproblem(gradient=np.array([-1.0, 0.0]), hessian=np.eye(2),
                       ineq_values=np.array([0.0]),
                       ineq_grads=np.array([[1.0, 0.0]]))
    d = qp_step(sub, damping=0.0)
    assert d == pytest.approx([0.0, 0.0], abs=1e-12)


def test_qp_one_pass_infeasibility_detected():
    # activating the first violated row re-violates the second one; the
    # single active-set pass reports that instead of iterating
    sub = QpSubproblem(gradient=np.array([2.0, 0.0]), hessian=np.eye(2),
                       ineq_values=np.array([-1.0, 1.5]),
                       ineq_grads=np.array([[-1.0, 0.0], [1.0, 1.0]]))
    with pytest.raises(InfeasibleConstraintsError):
        qp_step(sub, damping=0.0)


def test_qp_dependent_active_rows_are_singular():
    from scenegame.features import KktSingularError

    sub = QpSubproblem(gradient=np.array([0.0, 0.0]), hessian=np.eye(2),
                       ineq_values=np.array([1.0, 1.0]),
                       ineq_grads=np.array([[1.0, 0.0], [-1.0, 0.0]]))
    with pytest.raises(KktSingularError):
        qp_step(sub, damping=0.0)


def test_qp_not_positive_definite():
    sub = QpSubproblem(gradient=np.array([1.0, 1.0]),
                       hessian=np.diag([1.0, -1.0]))
    with pytest.raises(NotPositiveDefiniteError):
        qp_step(sub, damping=0.0)


def test_qp_descent_and_equality_satisfaction():
    rng = np.random.default_rng(43)
    for _ in range(25):
        n = int(rng.integers(2, 6))
        a = rng.normal(0, 1, (n, n))
        hess = a @ a.T + np.eye(n) * 0.5
        g = rng.normal(0, 1, n)
        eq_grads = rng.normal(0, 1, (1, n))
        eq_values = rng.normal(0, 0.1, 1)
        sub = QpSubproblem(gradient=g, hessian=hess,
                           eq_values=eq_values, eq_grads=eq_grads)
        d = qp_step(sub, damping=0.0)
        assert np.abs(eq_values + eq_grads @ d).max() < 1e-8
        homogeneous = QpSubproblem(gradient=g, hessian=hess)
        d0 = qp_step(homogeneous, damping=0.0)
        if np.linalg.norm(g) > 1e-9:
            assert g @ d0 < 0.0


def test_qp_subproblem_validation():
    with pytest.raises(ValueError):
        QpSubproblem(gradient=np.array([1.0, 0.0]),
                     hessian=np.array([[1.0, 0.5], [0.2, 1.0]]))


def test_feature_vector_validation():
    with pytest.raises(ValueError):
        FeatureVector(values=np.array([1.0, 2.0]), names=("a",))

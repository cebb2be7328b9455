"""Block image features, linear feature projection, correlation-driven feature
selection, simplex weight optimization, and the damped QP direction step.
"""

from dataclasses import dataclass

import numpy as np

WEIGHT_STEP = 0.05
WEIGHT_ITERS = 500
SINGULAR_PIVOT = 1e-12
HISTOGRAM_BINS = 16


class SingularSystemError(ValueError):
    """Elimination hit a pivot below the singularity threshold."""


class DegenerateFeatureError(ValueError):
    """A feature column has zero variance, so its correlation is undefined."""


class KktSingularError(ValueError):
    """The KKT system of the QP subproblem is singular."""


class InfeasibleConstraintsError(ValueError):
    """The linearized inequality constraints admit no solution from one
    active-set pass."""


class NotPositiveDefiniteError(ValueError):
    """The damped quadratic term is not positive definite."""


@dataclass(frozen=True)
class FeatureVector:
    """Concatenated block descriptors: per block [mean, variance, 16-bin
    histogram, edge density] over a fixed 2x2 block grid."""

    values: np.ndarray
    names: tuple

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size != len(self.names):
            raise ValueError("values and names must align")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class ProjectionSystem:
    """Square linear system matrix * solution = rhs."""

    matrix: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        r = np.asarray(self.rhs, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")
        if r.shape != (m.shape[0],):
            raise ValueError("rhs length must match the matrix")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "rhs", r)


@dataclass(frozen=True)
class FeatureClusterSet:
    """Partition of feature indices plus one representative per cluster."""

    clusters: tuple   # tuple of sorted index tuples
    threshold: float
    selected: tuple   # sorted representative indices, one per cluster

    def __post_init__(self):
        seen = [i for cluster in self.clusters for i in cluster]
        if len(seen) != len(set(seen)):
            raise ValueError("clusters must be disjoint")
        if len(self.selected) != len(self.clusters):
            raise ValueError("exactly one representative per cluster")


@dataclass(frozen=True)
class ScoreTable:
    """Sample-by-criterion scores with per-criterion ideal / anti-ideal points.

    Every retained criterion must have a strictly positive score range;
    zero-range criteria must be dropped by the caller before construction.
    """

    scores: np.ndarray       # (n_samples, n_criteria)
    ideal: np.ndarray = None      # per-criterion max, derived
    anti_ideal: np.ndarray = None  # per-criterion min, derived

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ValueError("scores must be a nonempty 2-D table")
        hi = s.max(axis=0)
        lo = s.min(axis=0)
        if np.any(hi <= lo):
            bad = int(np.argmin(hi - lo))
            raise ValueError(f"criterion {bad} has zero score range")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "ideal", hi)
        object.__setattr__(self, "anti_ideal", lo)

    @property
    def criterion_count(self):
        return self.scores.shape[1]


@dataclass(frozen=True)
class WeightVector:
    """Point on the probability simplex."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be 1-D and nonempty")
        if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", np.maximum(w, 0.0))


@dataclass(frozen=True)
class QpSubproblem:
    """Quadratic direction-finding subproblem with linearized constraints.

    minimize g.d + 0.5 d.H.d
    s.t. ineq_values + ineq_grads.d <= 0 and eq_values + eq_grads.d = 0.
    """

    gradient: np.ndarray
    hessian: np.ndarray
    ineq_values: np.ndarray = None
    ineq_grads: np.ndarray = None
    eq_values: np.ndarray = None
    eq_grads: np.ndarray = None

    def __post_init__(self):
        g = np.asarray(self.gradient, dtype=np.float64)
        h = np.asarray(self.hessian, dtype=np.float64)
        n = g.size
        if h.shape != (n, n):
            raise ValueError("hessian must be square and match the gradient")
        if np.max(np.abs(h - h.T), initial=0.0) > 1e-9:
            raise ValueError("hessian must be symmetric")
        object.__setattr__(self, "gradient", g)
        object.__setattr__(self, "hessian", h)
        for vname, gname in (("ineq_values", "ineq_grads"),
                             ("eq_values", "eq_grads")):
            vals = getattr(self, vname)
            grads = getattr(self, gname)
            if vals is None and grads is None:
                object.__setattr__(self, vname, np.zeros(0))
                object.__setattr__(self, gname, np.zeros((0, n)))
                continue
            vals = np.asarray(vals, dtype=np.float64).ravel()
            grads = np.asarray(grads, dtype=np.float64).reshape(len(vals), n)
            object.__setattr__(self, vname, vals)
            object.__setattr__(self, gname, grads)


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def feature_names() -> tuple:
    names = []
    for br in range(2):
        for bc in range(2):
            prefix = f"b{br}{bc}"
            names.append(f"{prefix}_mean")
            names.append(f"{prefix}_var")
            names.extend(f"{prefix}_hist{k:02d}" for k in range(HISTOGRAM_BINS))
            names.append(f"{prefix}_edges")
    return tuple(names)


def _block_descriptor(block: np.ndarray):
    vals = block.astype(np.float64)
    mean = vals.mean() / 255.0
    var = vals.var() / (255.0 ** 2)
    hist = np.bincount((block // (256 // HISTOGRAM_BINS)).ravel(),
                       minlength=HISTOGRAM_BINS).astype(np.float64)
    hist /= block.size
    horiz = (block[:, 1:] != block[:, :-1]).sum()
    vert = (block[1:, :] != block[:-1, :]).sum()
    pairs = block.shape[0] * (block.shape[1] - 1) + (block.shape[0] - 1) * block.shape[1]
    edges = (horiz + vert) / pairs
    return [mean, var, *hist, edges]


def extract_features(img) -> FeatureVector:
    """Deterministic 76-component descriptor over the 2x2 block grid.

    Histogram slices each sum to 1; edge density is the fraction of
    4-neighbor pairs inside the block whose intensities differ.
    """
    plane = img.plane()
    h, w = plane.shape
    if h < 8 or w < 8:
        raise ValueError(f"image must be at least 8x8, got {w}x{h}")
    h2, w2 = h // 2, w // 2
    blocks = [plane[:h2, :w2], plane[:h2, w2:], plane[h2:, :w2], plane[h2:, w2:]]
    values = []
    for block in blocks:
        values.extend(_block_descriptor(block))
    return FeatureVector(values=np.array(values), names=feature_names())


def features_to_csv(vectors) -> str:
    """One CSV row per feature vector, with a header of component names."""
    vectors = list(vectors)
    if not vectors:
        raise ValueError("need at least one feature vector")
    header = ",".join(vectors[0].names)
    rows = [",".join(repr(float(v)) for v in fv.values) for fv in vectors]
    return "\n".join([header, *rows]) + "\n"


# ---------------------------------------------------------------------------
# Linear projection solve
# ---------------------------------------------------------------------------

def solve_projection(system: ProjectionSystem) -> np.ndarray:
    """Solve the square feature-projection system by Gaussian elimination with
    partial pivoting. Pivots below 1e-12 raise SingularSystemError."""
    a = system.matrix.copy()
    b = system.rhs.copy()
    n = a.shape[0]
    for col in range(n):
        pivot_row = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[pivot_row, col]) < SINGULAR_PIVOT:
            raise SingularSystemError(f"pivot below {SINGULAR_PIVOT} at column {col}")
        if pivot_row != col:
            a[[col, pivot_row]] = a[[pivot_row, col]]
            b[[col, pivot_row]] = b[[pivot_row, col]]
        factors = a[col + 1:, col] / a[col, col]
        a[col + 1:, col:] -= factors[:, None] * a[col, col:]
        b[col + 1:] -= factors * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1:] @ x[row + 1:]) / a[row, row]
    return x


# ---------------------------------------------------------------------------
# Correlation clustering and representative selection
# ---------------------------------------------------------------------------

def _abs_correlation(samples: np.ndarray) -> np.ndarray:
    stds = samples.std(axis=0)
    if np.any(stds == 0):
        bad = int(np.argmin(stds))
        raise DegenerateFeatureError(f"feature column {bad} has zero variance")
    centered = (samples - samples.mean(axis=0)) / stds
    corr = centered.T @ centered / samples.shape[0]
    return np.minimum(np.abs(corr), 1.0)


def cluster_and_select(samples, threshold: float) -> FeatureClusterSet:
    """Agglomerative feature grouping by |Pearson correlation|.

    Cluster-to-cluster similarity is the average pairwise |correlation|;
    merging continues while the maximum similarity is at least the threshold
    (the first merge is guarded too). Each cluster contributes the feature
    with the highest within-cluster centrality (mean |correlation| with its
    own cluster), ties to the lowest index.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] < 2:
        raise ValueError("need a samples-by-features matrix with >= 2 features")
    if samples.shape[0] < 3:
        raise ValueError("need at least 3 samples")
    sim = _abs_correlation(samples)
    clusters = [[i] for i in range(samples.shape[1])]
    while len(clusters) > 1:
        best_pair = None
        best_sim = -1.0
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                pair_sim = float(np.mean(sim[np.ix_(clusters[i], clusters[j])]))
                if pair_sim > best_sim:
                    best_sim = pair_sim
                    best_pair = (i, j)
        if best_sim < threshold:
            break
        i, j = best_pair
        clusters[i] = sorted(clusters[i] + clusters[j])
        del clusters[j]
    clusters.sort(key=lambda c: c[0])

    selected = []
    for cluster in clusters:
        # Centrality: mean |correlation| with the whole cluster (self included).
        scores = [float(np.mean(sim[f, cluster])) for f in cluster]
        selected.append(cluster[int(np.argmax(scores))])
    return FeatureClusterSet(
        clusters=tuple(tuple(c) for c in clusters),
        threshold=threshold,
        selected=tuple(sorted(selected)),
    )


# ---------------------------------------------------------------------------
# Simplex weight optimization
# ---------------------------------------------------------------------------

def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, v.size + 1) > (css - 1.0))[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def weight_objective(table: ScoreTable, weights: np.ndarray) -> float:
    """Sum over samples of the weighted normalized score ratio.

    Per sample: (sum_j w_j (H_ij - min_j)) / (sum_j w_j (max_j - min_j)).
    """
    gains = (table.scores - table.anti_ideal) @ weights
    denom = float((table.ideal - table.anti_ideal) @ weights)
    return float(gains.sum() / denom)


def optimize_weights(table: ScoreTable):
    """Maximize the normalized weighted objective over the simplex.

    Projected-gradient ascent from the uniform point (fixed step 0.05,
    500 iterations), returning the best iterate seen; the uniform start is
    included, so the result never scores below uniform weights.
    Returns (WeightVector, objective value).
    """
    m = table.criterion_count
    gains = (table.scores - table.anti_ideal).sum(axis=0)  # per-criterion numerators
    ranges = table.ideal - table.anti_ideal
    w = np.full(m, 1.0 / m)
    best_w = w
    best_val = weight_objective(table, w)
    for _ in range(WEIGHT_ITERS):
        num = float(gains @ w)
        den = float(ranges @ w)
        grad = (gains * den - num * ranges) / (den * den)
        w = project_to_simplex(w + WEIGHT_STEP * grad)
        val = weight_objective(table, w)
        if val > best_val:
            best_val = val
            best_w = w
    return WeightVector(weights=best_w), best_val


# ---------------------------------------------------------------------------
# QP direction step
# ---------------------------------------------------------------------------

def default_damping(hessian: np.ndarray) -> float:
    h = np.asarray(hessian, dtype=np.float64)
    return 1e-6 * float(np.trace(h)) / h.shape[0]


def _solve_kkt(h_damped, gradient, eq_values, eq_grads):
    n = gradient.size
    k = eq_values.size
    if k == 0:
        try:
            return np.linalg.solve(h_damped, -gradient)
        except np.linalg.LinAlgError as exc:
            raise KktSingularError(str(exc)) from exc
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = h_damped
    kkt[:n, n:] = eq_grads.T
    kkt[n:, :n] = eq_grads
    rhs = np.concatenate([-gradient, -eq_values])
    try:
        solution = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise KktSingularError(str(exc)) from exc
    return solution[:n]


def qp_step(sub: QpSubproblem, damping: float = None) -> np.ndarray:
    """Direction minimizing g.d + 0.5 d.(H + damping*I).d under the linearized
    constraints.

    damping defaults to 1e-6 * trace(H) / dim; the damped matrix must be
    positive definite. Equalities are solved through the KKT system exactly;
    inequalities get one active-set pass: solve without them, add the violated
    rows as equalities, re-solve, and verify feasibility within 1e-8.
    """
    if damping is None:
        damping = default_damping(sub.hessian)
    if damping < 0:
        raise ValueError("damping must be >= 0")
    n = sub.gradient.size
    h_damped = sub.hessian + damping * np.eye(n)
    try:
        np.linalg.cholesky(h_damped)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            "hessian is not positive definite after damping"
        ) from exc

    direction = _solve_kkt(h_damped, sub.gradient, sub.eq_values, sub.eq_grads)
    if sub.ineq_values.size:
        slack = sub.ineq_values + sub.ineq_grads @ direction
        violated = slack > 1e-8
        if np.any(violated):
            eq_values = np.concatenate([sub.eq_values, sub.ineq_values[violated]])
            eq_grads = np.vstack([sub.eq_grads, sub.ineq_grads[violated]])
            direction = _solve_kkt(h_damped, sub.gradient, eq_values, eq_grads)
            slack = sub.ineq_values + sub.ineq_grads @ direction
            if np.any(slack > 1e-8):
                raise InfeasibleConstraintsError(
                    "linearized inequalities remain violated after one "
                    "active-set pass"
                )
    return direction

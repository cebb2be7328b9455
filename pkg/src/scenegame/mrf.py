"""Energy-based pixel labeling as a game between pixels.

Each pixel is a player whose strategy is its label; its payoff is the negative
of its local energy (data cost plus weighted disagreement with the 4-connected
neighbors). Sequential best response never increases the total energy, so the
dynamics terminate in a labeling where no pixel can improve unilaterally --
checked literally by nash_check. Two solvers are provided: greedy best
response (fast, local optima) and annealed random relaxation (slower, reaches
the global optimum with high probability on small instances), plus an
exhaustive oracle for verification at desk scale.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import gmm as gmm_mod
from .image import DisplacementLabelSet, Image, LabelField

EXHAUSTIVE_LIMIT = 10 ** 6


class EllipticityError(ValueError):
    """The smoothness coefficients are not elliptic for the requested margin."""


@dataclass(frozen=True)
class AnnealSchedule:
    """Geometric cooling: T = t0 * decay^(sweep // sweeps_per_temp)."""

    t0: float = 2.0
    decay: float = 0.9
    sweeps_per_temp: int = 5

    def __post_init__(self):
        if self.t0 <= 0:
            raise ValueError("t0 must be > 0")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must be strictly inside (0, 1)")
        if self.sweeps_per_temp < 1:
            raise ValueError("sweeps_per_temp must be >= 1")


@dataclass(frozen=True)
class GameConfig:
    sweep_order: str = "raster"  # 'raster' | 'checkerboard'
    max_sweeps: int = 60
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    seed: int = 0

    def __post_init__(self):
        if self.sweep_order not in ("raster", "checkerboard"):
            raise ValueError(f"unknown sweep order {self.sweep_order!r}")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")


@dataclass(frozen=True)
class SweepRecord:
    sweep: int
    energy: float
    changed: int
    temperature: float


def trace_to_csv(records) -> str:
    lines = ["sweep,energy,changed,temperature"]
    for r in records:
        lines.append(f"{r.sweep},{r.energy!r},{r.changed},{r.temperature!r}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class EnergyModel:
    """Per-pixel data costs plus a pairwise prior over the 4-neighborhood.

    Total energy: sum_p data_costs[p, x_p]
                + prior_weight * sum_edges w_edge * pair_cost[x_p, x_q].

    prior_kind 'potts' charges 1 for any disagreement; 'quadratic' charges the
    squared distance between label values (label indices by default, or
    explicit label_values such as displacement offsets). Optional edge weight
    grids modulate individual edges (defaults to 1 everywhere).
    """

    data_costs: np.ndarray           # (h, w, L) float
    prior_weight: float
    prior_kind: str = "potts"
    label_values: np.ndarray = None  # (L,) or (L, k); quadratic prior only
    edge_weights_x: np.ndarray = None  # (h, w-1); edge (r,c)-(r,c+1)
    edge_weights_y: np.ndarray = None  # (h-1, w); edge (r,c)-(r+1,c)
    pair_cost: np.ndarray = None       # derived (L, L)

    def __post_init__(self):
        dc = np.asarray(self.data_costs, dtype=np.float64)
        if dc.ndim != 3 or dc.shape[2] < 1:
            raise ValueError("data_costs must have shape (h, w, L)")
        if not np.all(np.isfinite(dc)):
            raise ValueError("data_costs must be finite")
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be >= 0")
        h, w, label_count = dc.shape
        if self.prior_kind == "potts":
            pair = 1.0 - np.eye(label_count)
        elif self.prior_kind == "quadratic":
            vals = self.label_values
            if vals is None:
                vals = np.arange(label_count, dtype=np.float64)
            vals = np.asarray(vals, dtype=np.float64)
            if vals.ndim == 1:
                vals = vals[:, None]
            if vals.shape[0] != label_count:
                raise ValueError("label_values length must match label count")
            diff = vals[:, None, :] - vals[None, :, :]
            pair = (diff ** 2).sum(axis=2)
            object.__setattr__(self, "label_values", vals)
        else:
            raise ValueError(f"unknown prior kind {self.prior_kind!r}")
        for name, shape in (("edge_weights_x", (h, w - 1)),
                            ("edge_weights_y", (h - 1, w))):
            grid = getattr(self, name)
            if grid is not None:
                grid = np.asarray(grid, dtype=np.float64)
                if grid.shape != shape:
                    raise ValueError(f"{name} must have shape {shape}")
                object.__setattr__(self, name, grid)
        object.__setattr__(self, "data_costs", dc)
        object.__setattr__(self, "pair_cost", pair)

    @property
    def height(self):
        return self.data_costs.shape[0]

    @property
    def width(self):
        return self.data_costs.shape[1]

    @property
    def label_count(self):
        return self.data_costs.shape[2]


def _check_dims(model: EnergyModel, labels: LabelField):
    if labels.height != model.height or labels.width != model.width:
        raise ValueError("label field dimensions do not match the model")
    if labels.label_count != model.label_count:
        raise ValueError("label counts do not match")


def energy_of(model: EnergyModel, labels: LabelField) -> float:
    """Total (unnormalized Gibbs) energy of a labeling."""
    _check_dims(model, labels)
    lab = labels.labels
    rows, cols = np.indices(lab.shape)
    total = float(model.data_costs[rows, cols, lab].sum())
    pair = model.pair_cost
    wx = model.edge_weights_x
    wy = model.edge_weights_y
    horiz = pair[lab[:, :-1], lab[:, 1:]]
    vert = pair[lab[:-1, :], lab[1:, :]]
    if wx is not None:
        horiz = horiz * wx
    if wy is not None:
        vert = vert * wy
    return total + model.prior_weight * float(horiz.sum() + vert.sum())


def _neighbor_table(model: EnergyModel):
    """Flat-index adjacency with edge weights, built once per solve."""
    h, w = model.height, model.width
    wx = model.edge_weights_x
    wy = model.edge_weights_y
    table = []
    for r in range(h):
        for c in range(w):
            nbrs = []
            if c > 0:
                nbrs.append((r * w + c - 1, 1.0 if wx is None else float(wx[r, c - 1])))
            if c < w - 1:
                nbrs.append((r * w + c + 1, 1.0 if wx is None else float(wx[r, c])))
            if r > 0:
                nbrs.append(((r - 1) * w + c, 1.0 if wy is None else float(wy[r - 1, c])))
            if r < h - 1:
                nbrs.append(((r + 1) * w + c, 1.0 if wy is None else float(wy[r, c])))
            table.append(nbrs)
    return table


def _order_indices(model: EnergyModel, order: str):
    h, w = model.height, model.width
    if order == "raster":
        return list(range(h * w))
    evens = [r * w + c for r in range(h) for c in range(w) if (r + c) % 2 == 0]
    odds = [r * w + c for r in range(h) for c in range(w) if (r + c) % 2 == 1]
    return evens + odds


def _local_costs(idx, flat, dc, nbr_table, pair, prior_weight):
    """Cost of each candidate label at one site given the current neighbors."""
    costs = list(dc[idx])
    if prior_weight:
        for nb, wgt in nbr_table[idx]:
            row = pair[flat[nb]]
            scale = prior_weight * wgt
            for lbl in range(len(costs)):
                costs[lbl] += scale * row[lbl]
    return costs


def _sweep_flat(flat, dc, nbr_table, pair, prior_weight, indices):
    """One sequential best-response pass, in place. Returns switch count.

    A pixel moves only on a strict local improvement, so every change strictly
    decreases the total energy; ties keep the current label, and ties between
    new labels resolve to the lowest index.
    """
    changed = 0
    label_count = len(pair)
    for idx in indices:
        costs = _local_costs(idx, flat, dc, nbr_table, pair, prior_weight)
        current = flat[idx]
        best_label = current
        best_cost = costs[current]
        for lbl in range(label_count):
            if costs[lbl] < best_cost:
                best_cost = costs[lbl]
                best_label = lbl
        if best_label != current:
            flat[idx] = best_label
            changed += 1
    return changed


def _model_lists(model: EnergyModel):
    h, w, label_count = model.data_costs.shape
    dc = model.data_costs.reshape(h * w, label_count).tolist()
    pair = model.pair_cost.tolist()
    return dc, pair


def best_response_sweep(model: EnergyModel, labels: LabelField,
                        order: str = "raster"):
    """One best-response pass over every pixel. Returns (labels, changed)."""
    _check_dims(model, labels)
    dc, pair = _model_lists(model)
    nbr_table = _neighbor_table(model)
    flat = [int(v) for v in labels.labels.ravel()]
    changed = _sweep_flat(flat, dc, nbr_table, pair, model.prior_weight,
                          _order_indices(model, order))
    out = LabelField(
        labels=np.array(flat, dtype=np.int64).reshape(model.height, model.width),
        label_count=model.label_count,
    )
    return out, changed


def solve_icm(model: EnergyModel, init: LabelField, config: GameConfig):
    """Greedy best-response dynamics to a unilateral-deviation-proof labeling.

    Fast but local: the result always passes nash_check when it terminates
    before max_sweeps, yet may sit above the global minimum energy.
    Returns (labels, [SweepRecord...]).
    """
    _check_dims(model, init)
    dc, pair = _model_lists(model)
    nbr_table = _neighbor_table(model)
    indices = _order_indices(model, config.sweep_order)
    flat = [int(v) for v in init.labels.ravel()]
    trace = []
    for sweep in range(1, config.max_sweeps + 1):
        changed = _sweep_flat(flat, dc, nbr_table, pair, model.prior_weight, indices)
        current = LabelField(
            labels=np.array(flat, dtype=np.int64).reshape(model.height, model.width),
            label_count=model.label_count,
        )
        trace.append(SweepRecord(sweep=sweep, energy=energy_of(model, current),
                                 changed=changed, temperature=0.0))
        if changed == 0:
            break
    return current, trace


def solve_anneal(model: EnergyModel, init: LabelField, config: GameConfig):
    """Annealed random relaxation (Gibbs resampling with geometric cooling).

    Each site resamples its label with probability proportional to
    exp(-local_energy / T). After the cooling sweeps, best-response passes run
    to a fixed point so the output is also unilateral-deviation-proof.
    Bit-reproducible for a fixed seed. Returns (labels, [SweepRecord...]).
    """
    _check_dims(model, init)
    dc, pair = _model_lists(model)
    nbr_table = _neighbor_table(model)
    indices = _order_indices(model, config.sweep_order)
    label_count = model.label_count
    rng = np.random.default_rng(int(config.seed) % 2 ** 63)
    schedule = config.schedule
    flat = [int(v) for v in init.labels.ravel()]
    trace = []

    def snapshot():
        return LabelField(
            labels=np.array(flat, dtype=np.int64).reshape(model.height, model.width),
            label_count=label_count,
        )

    for sweep in range(config.max_sweeps):
        temp = schedule.t0 * schedule.decay ** (sweep // schedule.sweeps_per_temp)
        changed = 0
        for idx in indices:
            costs = _local_costs(idx, flat, dc, nbr_table, pair, model.prior_weight)
            low = min(costs)
            weights = [math.exp(-(c - low) / temp) for c in costs]
            total = sum(weights)
            u = rng.random() * total
            acc = 0.0
            pick = label_count - 1
            for lbl, wgt in enumerate(weights):
                acc += wgt
                if u < acc:
                    pick = lbl
                    break
            if pick != flat[idx]:
                changed += 1
            flat[idx] = pick
        trace.append(SweepRecord(sweep=sweep + 1, energy=energy_of(model, snapshot()),
                                 changed=changed, temperature=temp))

    # Zero-temperature tail: descend to a fixed point so the advertised
    # no-unilateral-improvement postcondition holds.
    sweep = config.max_sweeps
    while True:
        sweep += 1
        changed = _sweep_flat(flat, dc, nbr_table, pair, model.prior_weight, indices)
        trace.append(SweepRecord(sweep=sweep, energy=energy_of(model, snapshot()),
                                 changed=changed, temperature=0.0))
        if changed == 0:
            break
    return snapshot(), trace


def gibbs_site_probabilities(model: EnergyModel, labels: LabelField,
                             site, temperature: float):
    """Resampling distribution of one site at the given temperature."""
    _check_dims(model, labels)
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    dc, pair = _model_lists(model)
    nbr_table = _neighbor_table(model)
    r, c = site
    idx = r * model.width + c
    flat = [int(v) for v in labels.labels.ravel()]
    costs = _local_costs(idx, flat, dc, nbr_table, pair, model.prior_weight)
    low = min(costs)
    weights = [math.exp(-(x - low) / temperature) for x in costs]
    total = sum(weights)
    return [w / total for w in weights]


def nash_check(model: EnergyModel, labels: LabelField):
    """True iff no single pixel can strictly lower the total energy alone.

    Otherwise returns the first raster-order witness ((row, col), better_label).
    Uses the same local arithmetic as the sweeps, so a terminated solve always
    passes.
    """
    _check_dims(model, labels)
    dc, pair = _model_lists(model)
    nbr_table = _neighbor_table(model)
    flat = [int(v) for v in labels.labels.ravel()]
    width = model.width
    for idx in range(len(flat)):
        costs = _local_costs(idx, flat, dc, nbr_table, pair, model.prior_weight)
        current_cost = costs[flat[idx]]
        for lbl, cost in enumerate(costs):
            if cost < current_cost:
                return False, ((idx // width, idx % width), lbl)
    return True, None


def exhaustive_oracle(model: EnergyModel):
    """Global minimizer by enumerating every labeling (lexicographic ties).

    Only feasible when label_count ** pixel_count <= 10^6; larger instances
    raise ValueError.
    """
    h, w, label_count = model.data_costs.shape
    n = h * w
    count = label_count ** n
    if count > EXHAUSTIVE_LIMIT:
        raise ValueError(
            f"instance too large: {label_count}^{n} labelings exceed {EXHAUSTIVE_LIMIT}"
        )
    idx = np.arange(count, dtype=np.int64)
    # Column p holds pixel p's label; first pixel most significant, so row
    # order is lexicographic and argmin returns the lexicographically
    # smallest minimizer. Smallest dtype keeps the table near the 10^6 cap
    # affordable.
    assign = np.empty((count, n), dtype=np.min_scalar_type(label_count - 1))
    for p in range(n):
        assign[:, p] = (idx // (label_count ** (n - 1 - p))) % label_count

    dc = model.data_costs.reshape(n, label_count)
    energies = np.zeros(count, dtype=np.float64)
    for p in range(n):
        energies += dc[p, assign[:, p]]
    pair = model.pair_cost
    wx = model.edge_weights_x
    wy = model.edge_weights_y
    for r in range(h):
        for c in range(w):
            p = r * w + c
            if c < w - 1:
                wgt = 1.0 if wx is None else float(wx[r, c])
                energies += model.prior_weight * wgt * pair[assign[:, p], assign[:, p + 1]]
            if r < h - 1:
                wgt = 1.0 if wy is None else float(wy[r, c])
                energies += model.prior_weight * wgt * pair[assign[:, p], assign[:, p + w]]
    best = int(np.argmin(energies))
    labels = LabelField(labels=assign[best].reshape(h, w), label_count=label_count)
    return labels, float(energies[best])


# ---------------------------------------------------------------------------
# Smoothness (divergence-form) operator and its ellipticity test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothnessField:
    """Per-pixel symmetric 2x2 coefficient matrices with an ellipticity margin."""

    coeffs: np.ndarray  # (h, w, 2, 2)
    epsilon: float

    def __post_init__(self):
        a = np.asarray(self.coeffs, dtype=np.float64)
        if a.ndim != 4 or a.shape[2:] != (2, 2):
            raise ValueError("coeffs must have shape (h, w, 2, 2)")
        if np.max(np.abs(a[..., 0, 1] - a[..., 1, 0])) > 1e-9:
            raise ValueError("coefficient matrices must be symmetric")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        object.__setattr__(self, "coeffs", a)

    @classmethod
    def identity(cls, height: int, width: int, epsilon: float = 1.0):
        a = np.zeros((height, width, 2, 2))
        a[..., 0, 0] = 1.0
        a[..., 1, 1] = 1.0
        return cls(coeffs=a, epsilon=epsilon)


def smallest_eigenvalues(field: SmoothnessField) -> np.ndarray:
    """Closed-form smaller eigenvalue of each symmetric 2x2 coefficient matrix."""
    a = field.coeffs
    half_trace = (a[..., 0, 0] + a[..., 1, 1]) / 2.0
    half_gap = (a[..., 0, 0] - a[..., 1, 1]) / 2.0
    return half_trace - np.sqrt(half_gap ** 2 + a[..., 0, 1] ** 2)


def ellipticity_check(field: SmoothnessField) -> bool:
    """True iff every coefficient matrix dominates epsilon times the identity."""
    return bool(np.all(smallest_eigenvalues(field) >= field.epsilon))


def smoothness_residual(field: SmoothnessField, u: np.ndarray) -> np.ndarray:
    """Central-difference divergence-form operator sum_i d_i(a_ij d_j u).

    Values are reliable at interior pixels (two pixels from each border);
    np.gradient falls back to one-sided differences at the edges. Linear in u.
    """
    if not ellipticity_check(field):
        raise EllipticityError(
            f"coefficients are not elliptic with margin {field.epsilon}"
        )
    u = np.asarray(u, dtype=np.float64)
    if u.shape != field.coeffs.shape[:2]:
        raise ValueError("field shape does not match the coefficient grid")
    a = field.coeffs
    grad_y, grad_x = np.gradient(u)
    flux_x = a[..., 0, 0] * grad_x + a[..., 0, 1] * grad_y
    flux_y = a[..., 1, 0] * grad_x + a[..., 1, 1] * grad_y
    return np.gradient(flux_x, axis=1) + np.gradient(flux_y, axis=0)


# ---------------------------------------------------------------------------
# Game builders
# ---------------------------------------------------------------------------

def build_segmentation_game(img: Image, params, prior_weight: float,
                            prior_kind: str = "potts") -> EnergyModel:
    """Labeling game whose data term is the mixture negative log-likelihood."""
    costs = gmm_mod.data_costs(img, params)
    return EnergyModel(data_costs=costs, prior_weight=prior_weight,
                       prior_kind=prior_kind)


def build_registration_game(fixed: Image, moving: Image,
                            labels: DisplacementLabelSet, prior_weight: float,
                            field: SmoothnessField) -> EnergyModel:
    """Discrete-displacement registration game.

    Data term per pixel and offset: squared intensity difference between the
    fixed image and the moving image sampled at the offset position (edge
    clamped). Neighboring displacements are coupled quadratically in offset
    space; horizontal edges are weighted by the smoothness field's xx
    coefficient, vertical edges by yy (averaged over the edge endpoints).
    """
    if fixed.channels != 1 or moving.channels != 1:
        raise ValueError("registration expects grayscale images")
    if (fixed.height, fixed.width) != (moving.height, moving.width):
        raise ValueError("fixed and moving images must have the same size")
    if field.coeffs.shape[:2] != (fixed.height, fixed.width):
        raise ValueError("smoothness field shape does not match the images")
    if not ellipticity_check(field):
        raise EllipticityError(
            f"coefficients are not elliptic with margin {field.epsilon}"
        )
    h, w = fixed.height, fixed.width
    fixed_plane = fixed.plane().astype(np.float64)
    moving_plane = moving.plane().astype(np.float64)
    rows, cols = np.indices((h, w))
    costs = np.empty((h, w, len(labels)), dtype=np.float64)
    for l, (dx, dy) in enumerate(labels.offsets):
        sample_rows = np.clip(rows + dy, 0, h - 1)
        sample_cols = np.clip(cols + dx, 0, w - 1)
        diff = fixed_plane - moving_plane[sample_rows, sample_cols]
        costs[:, :, l] = diff ** 2
    a = field.coeffs
    wx = (a[:, :-1, 0, 0] + a[:, 1:, 0, 0]) / 2.0
    wy = (a[:-1, :, 1, 1] + a[1:, :, 1, 1]) / 2.0
    offsets = np.array(labels.offsets, dtype=np.float64)
    return EnergyModel(data_costs=costs, prior_weight=prior_weight,
                       prior_kind="quadratic", label_values=offsets,
                       edge_weights_x=wx, edge_weights_y=wy)


def labels_to_image(labels: LabelField) -> Image:
    """Visualization: labels scaled onto 0..255 (label_count 1 maps to 0)."""
    if labels.label_count == 1:
        return Image(np.zeros(labels.labels.shape, dtype=np.uint8))
    scale = 255.0 / (labels.label_count - 1)
    return Image(np.rint(labels.labels * scale).astype(np.uint8))

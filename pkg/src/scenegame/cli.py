"""Command-line orchestration: enhancement, mixture fitting, labeling games,
feature extraction, classifier training, the synthetic accuracy experiment,
and keyframe sampling.

Config files are flat UTF-8 ``key = value`` text; unknown keys are fatal.
Reports are CSV with a fixed, versioned column set.
"""

import argparse
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from . import features as features_mod
from . import gmm as gmm_mod
from . import mrf, net as net_mod, preprocess
from .image import Image, LabelField, DisplacementLabelSet, gen_scene, read_pnm, write_pnm

REPORT_HEADER = "game_level,input_size,feature_complexity,noise_level,accuracy,robustness_error"

# Scene class -> planned robot action (static lookup stub; the classes are
# living_room, bathroom, bedroom, kitchen, action).
ACTION_TABLE = (
    "dock_and_wait",
    "avoid_wet_floor",
    "enter_quiet_mode",
    "assist_in_kitchen",
    "follow_user",
)


class CliError(ValueError):
    pass


@dataclass(frozen=True)
class KeyframePolicy:
    """Sampling rate for scene discrimination: one keyframe per interval."""

    fps: float = 20.0
    interval_s: float = 3.0

    def __post_init__(self):
        if self.fps <= 0 or self.interval_s <= 0:
            raise ValueError("fps and interval_s must be > 0")


def keyframe_indices(policy: KeyframePolicy, total_frames: int) -> list:
    """Frame indices 0, stride, 2*stride, ... below total_frames, with
    stride = round(fps * interval) (at least 1)."""
    if total_frames < 0:
        raise ValueError("total_frames must be >= 0")
    stride = max(1, int(math.floor(policy.fps * policy.interval_s + 0.5)))
    return list(range(0, total_frames, stride))


def label_to_action(class_id: int) -> str:
    if not 0 <= class_id < len(ACTION_TABLE):
        raise ValueError(f"class must be in 0..{len(ACTION_TABLE) - 1}, got {class_id}")
    return ACTION_TABLE[class_id]


# ---------------------------------------------------------------------------
# Config file format
# ---------------------------------------------------------------------------

def parse_config(text: str) -> dict:
    """Parse flat ``key = value`` lines; '#' lines and blanks are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"config line {lineno} is not 'key = value': {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_int_list(value: str):
    return tuple(int(v) for v in value.split(",") if v.strip())


def _parse_bool(value: str) -> bool:
    low = value.lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise CliError(f"expected on/off, got {value!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated parameters of the synthetic accuracy experiment."""

    sizes: tuple = (20,)
    noise_levels: tuple = (1,)
    images_per_class: int = 40
    trials: int = 1
    holdout: float = 0.2
    epochs: int = 12
    learning_rate: float = 0.05
    batch_size: int = 25
    margin: float = 0.5
    triplet_weight: float = 1.0
    ce_weight: float = 1.0
    feature_select: bool = False
    theta: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not self.sizes or any(s < 8 for s in self.sizes):
            raise CliError("sizes must be nonempty, each >= 8")
        if any(n not in (1, 2, 3) for n in self.noise_levels) or not self.noise_levels:
            raise CliError("noise_levels must be from 1..3")
        if self.images_per_class < 1 or self.trials < 1:
            raise CliError("images_per_class and trials must be >= 1")
        if not 0.0 < self.holdout < 1.0:
            raise CliError("holdout must be in (0, 1)")
        if self.seed < 0:
            raise CliError("seed must be >= 0")

    _PARSERS = {
        "sizes": _parse_int_list,
        "noise_levels": _parse_int_list,
        "images_per_class": int,
        "trials": int,
        "holdout": float,
        "epochs": int,
        "learning_rate": float,
        "batch_size": int,
        "margin": float,
        "triplet_weight": float,
        "ce_weight": float,
        "feature_select": _parse_bool,
        "theta": float,
        "seed": int,
    }

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        unknown = sorted(set(mapping) - set(cls._PARSERS))
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {key: cls._PARSERS[key](value) for key, value in mapping.items()}
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Experiment harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    game_level: int
    input_size: str
    feature_complexity: int
    noise_level: int
    accuracy: float
    robustness_error: str


@dataclass(frozen=True)
class ExperimentReport:
    rows: tuple
    feature_rows: tuple = ()
    failure: str = None

    def to_csv(self) -> str:
        lines = [REPORT_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.game_level},{r.input_size},{r.feature_complexity},"
                f"{r.noise_level},{r.accuracy:.4f},{r.robustness_error}"
            )
        if self.failure is not None:
            lines.append(f"# FAILED: {self.failure}")
        return "\n".join(lines) + "\n"

    def feature_csv(self) -> str:
        lines = ["input_size,noise_level,trial,selected,weights,objective"]
        lines.extend(self.feature_rows)
        return "\n".join(lines) + "\n"


def _game_level(size: int, sizes: tuple) -> int:
    ordered = sorted(set(sizes))
    return min(ordered.index(size) // 2 + 1, 5)


def _image_seed(master: int, trial: int, index: int) -> int:
    return (master * 1_000_003 + trial * 100_003 + index) % 2 ** 63


def _cell_dataset(config: ExperimentConfig, size: int, noise: int, trial: int):
    images, labels = [], []
    for class_id in range(net_mod.CLASS_COUNT):
        for i in range(config.images_per_class):
            img = gen_scene(class_id, size, noise,
                            _image_seed(config.seed, trial, i))
            images.append(preprocess.equalize(img))
            labels.append(class_id)
    return images, labels


def _split(images, labels, holdout: float, rng):
    """Seeded stratified split into (train, test).

    A class with a single image keeps it in the training side (training needs
    every class); the caller falls back to scoring on the training set when
    nothing is left to hold out.
    """
    train_idx, test_idx = [], []
    labels_arr = np.asarray(labels)
    for class_id in np.unique(labels_arr):
        members = np.flatnonzero(labels_arr == class_id)
        if members.size == 1:
            train_idx.extend(members)
            continue
        members = members[rng.permutation(members.size)]
        n_test = min(max(1, int(round(members.size * holdout))),
                     members.size - 1)
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    train_idx.sort()
    test_idx.sort()
    pick = lambda idx: ([images[i] for i in idx], [labels[i] for i in idx])
    return pick(train_idx), pick(test_idx)


def _feature_sidecar_row(train_images, config, size, noise, trial):
    matrix = np.stack([features_mod.extract_features(img).values
                       for img in train_images])
    keep = np.flatnonzero(matrix.std(axis=0) > 0)
    if keep.size < 2:
        return f"{size}*{size},{noise},{trial},,,"
    matrix = matrix[:, keep]
    chosen = features_mod.cluster_and_select(matrix, config.theta)
    selected = [int(keep[i]) for i in chosen.selected]
    columns = matrix[:, list(chosen.selected)]
    ranged = np.flatnonzero(columns.max(axis=0) > columns.min(axis=0))
    if ranged.size == 0:
        return f"{size}*{size},{noise},{trial},{';'.join(map(str, selected))},,"
    table = features_mod.ScoreTable(scores=columns[:, ranged])
    weights, objective = features_mod.optimize_weights(table)
    w_str = ";".join(f"{v:.4f}" for v in weights.weights)
    s_str = ";".join(str(selected[int(i)]) for i in ranged)
    return f"{size}*{size},{noise},{trial},{s_str},{w_str},{objective:.4f}"


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Accuracy grid over (size, noise_level, trial) cells.

    Every cell generates a seeded synthetic 5-class set, equalizes it, trains
    the default classifier, and scores the held-out split. Rows group into
    game levels (two sizes per level); each level's robustness column is the
    mean +- half-range of |accuracy - level mean|. Deterministic at the byte
    level for a fixed master seed. A stage failure flushes the rows finished
    so far with a failure marker.
    """
    cells = []
    loss_weights = net_mod.LossWeights((config.triplet_weight, config.ce_weight))
    feature_rows = []
    failure = None
    try:
        for size in config.sizes:
            for noise in config.noise_levels:
                for trial in range(config.trials):
                    images, labels = _cell_dataset(config, size, noise, trial)
                    rng = np.random.default_rng(
                        [config.seed, size, noise, trial, 7])
                    (train_x, train_y), (test_x, test_y) = _split(
                        images, labels, config.holdout, rng)
                    if not test_x:  # single image per class: score on train
                        test_x, test_y = train_x, train_y
                    network = net_mod.default_net(
                        input_size=size,
                        seed=_image_seed(config.seed, trial, size + noise))
                    train_cfg = net_mod.TrainConfig(
                        epochs=config.epochs,
                        learning_rate=config.learning_rate,
                        batch_size=config.batch_size,
                        seed=_image_seed(config.seed, trial, 13 * size + noise),
                        margin=config.margin,
                    )
                    net_mod.train(network, train_x, train_y, train_cfg, loss_weights)
                    hits = sum(
                        net_mod.predict(network, img)[0] == lbl
                        for img, lbl in zip(test_x, test_y)
                    )
                    accuracy = hits / len(test_x)
                    cells.append((size, noise, trial, accuracy))
                    if config.feature_select:
                        feature_rows.append(_feature_sidecar_row(
                            train_x, config, size, noise, trial))
    except Exception as exc:  # partial results still get flushed
        failure = f"{type(exc).__name__}: {exc}"

    by_level = {}
    for size, noise, trial, accuracy in cells:
        by_level.setdefault(_game_level(size, config.sizes), []).append(accuracy)
    robustness = {}
    for level, accs in by_level.items():
        mean_acc = sum(accs) / len(accs)
        errs = [abs(a - mean_acc) for a in accs]
        half_range = (max(errs) - min(errs)) / 2.0
        robustness[level] = f"{sum(errs) / len(errs):.2f}±{half_range:.2f}"

    rows = []
    for size, noise, trial, accuracy in sorted(cells, key=lambda c: (c[0], c[1], c[2])):
        level = _game_level(size, config.sizes)
        rows.append(ReportRow(
            game_level=level,
            input_size=f"{size}*{size}",
            feature_complexity=1,
            noise_level=noise,
            accuracy=accuracy,
            robustness_error=robustness[level],
        ))
    return ExperimentReport(rows=tuple(rows), feature_rows=tuple(feature_rows),
                            failure=failure)


# ---------------------------------------------------------------------------
# Mixture parameter (de)serialization: same key = value format as configs
# ---------------------------------------------------------------------------

def gmm_to_text(params: gmm_mod.GmmParams, trace: gmm_mod.EmTrace = None) -> str:
    lines = [
        f"components = {params.component_count}",
        "weights = " + ",".join(repr(float(v)) for v in params.weights),
        "means = " + ",".join(repr(float(v)) for v in params.means),
        "variances = " + ",".join(repr(float(v)) for v in params.variances),
    ]
    if trace is not None:
        lines.append(f"converged = {'on' if trace.converged else 'off'}")
        lines.append(f"iterations = {trace.iterations_used}")
    return "\n".join(lines) + "\n"


def gmm_from_text(text: str) -> gmm_mod.GmmParams:
    mapping = parse_config(text)
    try:
        weights = [float(v) for v in mapping["weights"].split(",")]
        means = [float(v) for v in mapping["means"].split(",")]
        variances = [float(v) for v in mapping["variances"].split(",")]
    except KeyError as exc:
        raise CliError(f"missing mixture key {exc}") from exc
    return gmm_mod.GmmParams(weights=np.array(weights), means=np.array(means),
                             variances=np.array(variances))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _read_image(path) -> Image:
    with open(path, "rb") as fh:
        return read_pnm(fh.read())


def _write_image(img: Image, path):
    with open(path, "wb") as fh:
        fh.write(write_pnm(img))


def _write_text(text: str, path):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _cmd_preprocess(args):
    img = _read_image(args.input)
    if args.method == "equalize":
        out = preprocess.equalize(img)
    elif args.method in ("lowpass", "highpass"):
        out = preprocess.dft_enhance(img, args.method, args.cutoff)
    else:
        out = preprocess.haar_enhance(img)
    _write_image(out, args.out)
    return 0


def _cmd_gmm_fit(args):
    img = _read_image(args.input)
    data = img.plane().astype(np.float64).ravel() / 255.0
    params, trace = gmm_mod.fit(data, args.components, epsilon=args.epsilon,
                                max_iters=args.max_iters, seed=args.seed)
    _write_text(gmm_to_text(params, trace), args.out)
    return 0


def _solve(model, init, args):
    config = mrf.GameConfig(max_sweeps=args.max_sweeps, seed=args.seed)
    if args.solver == "icm":
        return mrf.solve_icm(model, init, config)
    return mrf.solve_anneal(model, init, config)


def _cmd_segment(args):
    img = _read_image(args.input)
    data = img.plane().astype(np.float64).ravel() / 255.0
    params, _ = gmm_mod.fit(data, args.components, seed=args.seed)
    model = mrf.build_segmentation_game(img, params, args.prior_weight, args.prior)
    init = LabelField(labels=np.argmin(model.data_costs, axis=2),
                      label_count=model.label_count)
    labels, trace = _solve(model, init, args)
    _write_image(mrf.labels_to_image(labels), args.out)
    if args.trace:
        _write_text(mrf.trace_to_csv(trace), args.trace)
    return 0


def _cmd_register(args):
    fixed = _read_image(args.fixed)
    moving = _read_image(args.moving)
    label_set = DisplacementLabelSet.dense(args.radius)
    smooth = mrf.SmoothnessField.identity(fixed.height, fixed.width)
    model = mrf.build_registration_game(fixed, moving, label_set,
                                        args.prior_weight, smooth)
    zero_label = label_set.offsets.index((0, 0))
    init = LabelField(labels=np.full((fixed.height, fixed.width), zero_label),
                      label_count=len(label_set))
    labels, trace = _solve(model, init, args)
    _write_image(mrf.labels_to_image(labels), args.out)
    if args.trace:
        _write_text(mrf.trace_to_csv(trace), args.trace)
    return 0


def _cmd_features(args):
    vectors = [features_mod.extract_features(_read_image(path))
               for path in args.inputs]
    _write_text(features_mod.features_to_csv(vectors), args.out)
    if args.select is not None:
        matrix = np.stack([fv.values for fv in vectors])
        keep = np.flatnonzero(matrix.std(axis=0) > 0)
        chosen = features_mod.cluster_and_select(matrix[:, keep], args.select)
        indices = ";".join(str(int(keep[i])) for i in chosen.selected)
        print(f"selected = {indices}")
    return 0


def _synthetic_set(args):
    images, labels = [], []
    for class_id in range(net_mod.CLASS_COUNT):
        for i in range(args.images_per_class):
            img = gen_scene(class_id, args.size, args.noise,
                            _image_seed(args.seed, 0, i))
            images.append(preprocess.equalize(img))
            labels.append(class_id)
    return images, labels


def _cmd_train(args):
    images, labels = _synthetic_set(args)
    network = net_mod.default_net(
        input_size=args.crop if args.augment else args.size, seed=args.seed)
    config = net_mod.TrainConfig(
        epochs=args.epochs, learning_rate=args.learning_rate,
        batch_size=args.batch_size, seed=args.seed,
        augment=args.augment, crop_size=args.crop, margin=args.margin,
    )
    weights = net_mod.LossWeights((args.triplet_weight, args.ce_weight))
    _, trace = net_mod.train(network, images, labels, config, weights)
    net_mod.save_net(network, args.out)
    if args.trace:
        lines = ["epoch,loss"] + [f"{i},{v!r}" for i, v in enumerate(trace)]
        _write_text("\n".join(lines) + "\n", args.trace)
    return 0


def _cmd_eval(args):
    network = net_mod.load_net(args.model)
    images, labels = _synthetic_set(args)
    hits = sum(net_mod.predict(network, img)[0] == lbl
               for img, lbl in zip(images, labels))
    print(f"accuracy = {hits / len(images):.4f}")
    return 0


def _cmd_experiment(args):
    mapping = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            mapping = parse_config(fh.read())
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    config = ExperimentConfig.from_mapping(mapping)
    report = run_experiment(config)
    _write_text(report.to_csv(), args.out)
    if config.feature_select and args.out:
        _write_text(report.feature_csv(), args.out + ".features.csv")
    if report.failure is not None:
        print(f"ERROR: experiment failed: {report.failure}", file=sys.stderr)
        return 1
    return 0


def _cmd_keyframes(args):
    policy = KeyframePolicy(fps=args.fps, interval_s=args.interval)
    indices = keyframe_indices(policy, args.total)
    print(",".join(str(i) for i in indices))
    return 0


def _cmd_action(args):
    print(label_to_action(args.class_id))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenegame",
        description="Pixel labeling games, image enhancement, and scene "
                    "classification on synthetic data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=out_default)
        p.add_argument("--config", default=None)

    p = sub.add_parser("preprocess", help="enhance one grayscale image")
    p.add_argument("--input", required=True)
    p.add_argument("--method", required=True,
                   choices=["equalize", "lowpass", "highpass", "haar"])
    p.add_argument("--cutoff", type=float, default=0.5)
    common(p, out_default="out.pgm")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("gmm-fit", help="fit an intensity mixture to an image")
    p.add_argument("--input", required=True)
    p.add_argument("--components", type=int, required=True)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=200)
    common(p)
    p.set_defaults(func=_cmd_gmm_fit)

    p = sub.add_parser("segment", help="mixture + labeling game segmentation")
    p.add_argument("--input", required=True)
    p.add_argument("--components", type=int, required=True)
    p.add_argument("--prior-weight", type=float, default=1.0)
    p.add_argument("--prior", choices=["potts", "quadratic"], default="potts")
    p.add_argument("--solver", choices=["icm", "anneal"], default="icm")
    p.add_argument("--max-sweeps", type=int, default=60)
    p.add_argument("--trace", default=None)
    common(p, out_default="labels.pgm")
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("register", help="discrete displacement registration")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--prior-weight", type=float, default=0.5)
    p.add_argument("--solver", choices=["icm", "anneal"], default="icm")
    p.add_argument("--max-sweeps", type=int, default=60)
    p.add_argument("--trace", default=None)
    common(p, out_default="displacement.pgm")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("features", help="block feature extraction to CSV")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--select", type=float, default=None,
                   help="similarity threshold; also prints selected columns")
    common(p)
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("train", help="train the classifier on synthetic scenes")
    p.add_argument("--size", type=int, default=20)
    p.add_argument("--noise", type=int, default=1)
    p.add_argument("--images-per-class", type=int, default=40)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=25)
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--triplet-weight", type=float, default=1.0)
    p.add_argument("--ce-weight", type=float, default=1.0)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--trace", default=None)
    common(p, out_default="model.bin")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on synthetic scenes")
    p.add_argument("--model", required=True)
    p.add_argument("--size", type=int, default=20)
    p.add_argument("--noise", type=int, default=1)
    p.add_argument("--images-per-class", type=int, default=10)
    common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("experiment", help="accuracy grid report (CSV)")
    common(p)
    p.set_defaults(func=_cmd_experiment, seed=None)

    p = sub.add_parser("keyframes", help="keyframe indices for a frame count")
    p.add_argument("--fps", type=float, default=20.0)
    p.add_argument("--interval", type=float, default=3.0)
    p.add_argument("--total", type=int, required=True)
    common(p)
    p.set_defaults(func=_cmd_keyframes)

    p = sub.add_parser("action", help="scene class to planned action")
    p.add_argument("class_id", type=int)
    common(p)
    p.set_defaults(func=_cmd_action)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end wiring scenes, training, inference, and evaluation.

Verbs: synth, train, predict, eval, compare, sweep-labels, verify.
Config files are line-oriented key=value text; every hyperparameter can be
overridden by the flag of the same name. Exit codes: 0 ok, 1 verification or
evaluation failure, 2 usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import gmm, hmt, metrics, oracle
from .errors import DataError, DimError, FloodemError, InitError, IoError, SpecError
from .grid import (
    LabelSet,
    RasterScene,
    SceneSpec,
    generate_scene,
    load_labels,
    load_scene,
    sample_labels,
    save_labels,
    save_scene,
)

METHODS = ("gmm", "gmm-elev", "hmt")


@dataclass
class RunConfig:
    """Hyperparameters and I/O paths of one run."""

    method: str = "gmm"
    scene: str | None = None
    labels: str | None = None
    ratio: float | None = None
    seed: int = 0
    tol: float = 1e-5
    cutoff: float = 0.5
    rho: float = 0.99
    pi: float = 0.5
    neighborhood: int = 8
    max_iter: int = 100
    threads: int = 1
    out: str = "."


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def load_config(path: str) -> dict:
    """Parse a key=value config file; unknown keys and bad values carry line numbers."""
    casts = {
        "method": str,
        "scene": str,
        "labels": str,
        "out": str,
        "ratio": float,
        "tol": float,
        "cutoff": float,
        "rho": float,
        "pi": float,
        "seed": int,
        "neighborhood": int,
        "max_iter": int,
        "threads": int,
    }
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    values: dict = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in casts:
            raise SpecError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = casts[key](val.strip())
        except ValueError as exc:
            raise SpecError(f"{path}:{lineno}: bad value for {key}: {val.strip()!r}") from exc
    return values


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, val in load_config(args.config).items():
            setattr(cfg, key, val)
    for key in _CONFIG_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            setattr(cfg, key, flag)
    return cfg


# --- scene-spec files for synth ---

_SPEC_SCALARS = {
    "width": int,
    "height": int,
    "features": int,
    "ramp_height": float,
    "bump_amplitude": float,
    "bump_periods": float,
    "obstacle_fraction": float,
    "noise_sigma": float,
    "labels_per_class": int,
    "seed": int,
}
_SPEC_VECTORS = ("mean0", "mean1", "obstacle_mean", "var0", "var1", "obstacle_var")


def parse_scene_spec(path: str) -> SceneSpec:
    """Build a SceneSpec from a key=value file; vars may be scalar or a diagonal list."""
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read spec {path}: {exc}") from exc
    raw: dict = {}
    for lineno, text in enumerate(lines, start=1):
        line = text.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"{path}:{lineno}: expected key=value, got {text.strip()!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        try:
            if key in _SPEC_SCALARS:
                raw[key] = _SPEC_SCALARS[key](val)
            elif key in _SPEC_VECTORS:
                raw[key] = [float(p) for p in val.split(",")]
            elif key == "water_level":
                raw[key] = None if val == "median" else float(val)
            else:
                raise SpecError(f"{path}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise SpecError(f"{path}:{lineno}: bad value for {key}: {val!r}") from exc

    kwargs: dict = {}
    for src, dst in (("width", "width"), ("height", "height"), ("features", "n_features"),
                     ("ramp_height", "ramp_height"), ("bump_amplitude", "bump_amplitude"),
                     ("bump_periods", "bump_periods"), ("obstacle_fraction", "obstacle_fraction"),
                     ("noise_sigma", "noise_sigma"), ("labels_per_class", "labels_per_class"),
                     ("seed", "rng_seed")):
        if src in raw:
            kwargs[dst] = raw[src]
    if "water_level" in raw:
        kwargs["water_level"] = raw["water_level"]
    m = kwargs.get("n_features", 3)
    if "mean0" in raw or "mean1" in raw:
        if not ("mean0" in raw and "mean1" in raw):
            raise SpecError(f"{path}: mean0 and mean1 must be given together")
        kwargs["class_means"] = np.array([raw["mean0"], raw["mean1"]])
    def as_cov(entry):
        diag = entry if len(entry) > 1 else entry * m
        return np.diag(diag)
    if "var0" in raw or "var1" in raw:
        if not ("var0" in raw and "var1" in raw):
            raise SpecError(f"{path}: var0 and var1 must be given together")
        kwargs["class_covs"] = np.stack([as_cov(raw["var0"]), as_cov(raw["var1"])])
    if "obstacle_mean" in raw:
        kwargs["obstacle_mean"] = np.array(raw["obstacle_mean"])
    if "obstacle_var" in raw:
        kwargs["obstacle_cov"] = as_cov(raw["obstacle_var"])
    return SceneSpec(**kwargs)


# --- grid files: single-channel scenes holding a prediction or score plane ---


def _save_grid(values: np.ndarray, path: str) -> None:
    values = np.asarray(values, dtype=float)
    scene = RasterScene(
        width=values.shape[1], height=values.shape[0], channels=1, data=values[None]
    )
    save_scene(scene, path)


def _load_grid(path: str) -> np.ndarray:
    scene = load_scene(path)
    if scene.channels != 1:
        raise DataError(f"{path}: expected a single-channel grid, found {scene.channels} channels")
    return scene.data[0]


def _load_any_model(path: str):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read model from {path}: {exc}") from exc
    is_hmt = any(line.strip().startswith("rho=") for line in text.splitlines())
    return hmt.load_model(path) if is_hmt else gmm.load_model(path)


def _resolve_labels(scene: RasterScene, cfg: RunConfig, parser: argparse.ArgumentParser) -> LabelSet:
    if cfg.labels:
        return load_labels(cfg.labels)
    if cfg.ratio is not None:
        return sample_labels(scene, cfg.ratio, rng_seed=cfg.seed)
    parser.error("either --labels or --ratio is required")


def _train(method: str, scene: RasterScene, labels: LabelSet, cfg: RunConfig):
    if method == "gmm":
        return gmm.em_fit(scene, labels, use_elevation=False, max_iter=cfg.max_iter, tol=cfg.tol)
    if method == "gmm-elev":
        if scene.elevation_channel is None:
            raise DataError("gmm-elev needs a scene with an elevation channel")
        return gmm.em_fit(scene, labels, use_elevation=True, max_iter=cfg.max_iter, tol=cfg.tol)
    if method == "hmt":
        return hmt.em_fit(
            scene,
            labels,
            max_iter=cfg.max_iter,
            tol=cfg.tol,
            rho_init=cfg.rho,
            pi_init=cfg.pi,
            neighborhood=cfg.neighborhood,
        )
    raise SpecError(f"unknown method {method!r}")


def _gmm_use_elevation(model: gmm.GmmModel, scene: RasterScene) -> bool:
    """Recover the channel selection from the model dimension."""
    if model.dim == scene.channels:
        return True
    if scene.elevation_channel is not None and model.dim == scene.channels - 1:
        return False
    raise DimError(
        f"model dimension {model.dim} fits neither all {scene.channels} channels "
        "nor the channels without elevation"
    )


def _predict(model, scene: RasterScene, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """(class grid, flood-score grid) for either model family."""
    if isinstance(model, hmt.HmtModel):
        if scene.elevation_channel is None:
            raise DataError("tree model prediction needs a scene with an elevation channel")
        feats = scene.feature_matrix(use_elevation=False)
        if feats.shape[1] != model.dim:
            raise DimError(f"model dimension {model.dim} != {feats.shape[1]} non-elevation channels")
        tree = hmt.build_flow_tree(scene.elevation(), cfg.neighborhood)
        posteriors = hmt.e_step(model, tree, feats)
        classes = hmt.map_decode(model, tree, feats).reshape(scene.height, scene.width)
        scores = posteriors.marginal.reshape(scene.height, scene.width)
        return classes, scores
    use_elev = _gmm_use_elevation(model, scene)
    scores = gmm.score_grid(model, scene, use_elev)
    classes = (scores >= cfg.cutoff).astype(np.uint8)
    return classes, scores


def _evaluate(
    name: str,
    pred: np.ndarray,
    scores: np.ndarray,
    truth: np.ndarray,
    mask: np.ndarray | None,
    neighborhood: int,
):
    report = metrics.class_report(pred, truth, mask)
    curve = metrics.roc_auc(scores, truth, mask)
    # Salt-and-pepper is counted over the full prediction grid, not the mask.
    noise = metrics.salt_pepper_count(pred, neighborhood)
    return report, curve, noise


def _write_report_csv(path: str, class_rows, auc_rows, noise_rows) -> None:
    try:
        with open(path, "w") as fh:
            fh.write("method,class,precision,recall,f1\n")
            for row in class_rows:
                fh.write(",".join(row) + "\n")
            fh.write("method,auc\n")
            for method, auc in auc_rows:
                fh.write(f"{method},{auc:.6f}\n")
            fh.write("method,salt_pepper_count\n")
            for method, count in noise_rows:
                fh.write(f"{method},{count}\n")
    except OSError as exc:
        raise IoError(f"cannot write report to {path}: {exc}") from exc


def _out_path(cfg_out: str, name: str) -> str:
    os.makedirs(cfg_out, exist_ok=True)
    return os.path.join(cfg_out, name)


# --- verbs ---


def cmd_synth(args, parser) -> int:
    spec = parse_scene_spec(args.spec)
    if args.seed is not None:
        spec.rng_seed = args.seed
    scene, labels = generate_scene(spec)
    save_scene(scene, args.out_scene)
    save_labels(labels, args.out_labels)
    flood = float(scene.truth.mean())
    print(f"scene: {scene.width}x{scene.height}, {scene.channels} channels "
          f"(elevation channel {scene.elevation_channel})")
    print(f"class balance: flood {flood:.3f} / dry {1.0 - flood:.3f}")
    print(f"obstacle fraction: {spec.obstacle_fraction:.3f}")
    print(f"labels: {len(labels)} ({labels.class_count(0)} dry, {labels.class_count(1)} flood)")
    return 0


def cmd_train(args, parser) -> int:
    cfg = _resolve_config(args)
    if cfg.scene is None:
        parser.error("--scene is required")
    scene = load_scene(cfg.scene)
    labels = _resolve_labels(scene, cfg, parser)
    model, trace = _train(cfg.method, scene, labels, cfg)
    model_path = _out_path(cfg.out, "model.txt")
    trace_path = _out_path(cfg.out, "trace.csv")
    (hmt if isinstance(model, hmt.HmtModel) else gmm).save_model(model, model_path)
    trace.to_csv(trace_path)
    last = trace.rows[-1]
    print(f"{cfg.method}: {last.iteration} EM iterations, final loglik {last.loglik:.4f}")
    print(f"model -> {model_path}")
    print(f"trace -> {trace_path}")
    return 0


def cmd_predict(args, parser) -> int:
    cfg = _resolve_config(args)
    if cfg.scene is None:
        parser.error("--scene is required")
    model = _load_any_model(args.model)
    scene = load_scene(cfg.scene)
    classes, scores = _predict(model, scene, cfg)
    pred_path = _out_path(cfg.out, "pred.sgrid")
    score_path = _out_path(cfg.out, "score.sgrid")
    _save_grid(classes.astype(float), pred_path)
    _save_grid(scores, score_path)
    print(f"predicted flood fraction: {float(classes.mean()):.4f}")
    print(f"classes -> {pred_path}")
    print(f"scores -> {score_path}")
    return 0


def cmd_eval(args, parser) -> int:
    cfg = _resolve_config(args)
    pred = (_load_grid(args.pred) >= 0.5).astype(np.uint8)
    scores = _load_grid(args.score)
    truth_scene = load_scene(args.truth)
    if truth_scene.truth is None:
        raise DataError(f"{args.truth}: scene has no truth grid")
    mask = None
    if args.mask:
        mask = _load_grid(args.mask) != 0
    report, curve, noise = _evaluate(args.name, pred, scores, truth_scene.truth, mask, cfg.neighborhood)
    _write_report_csv(
        _out_path(cfg.out, "report.csv"),
        metrics.report_rows(args.name, report),
        [(args.name, curve.auc)],
        [(args.name, noise)],
    )
    metrics.write_roc_csv(curve, _out_path(cfg.out, f"roc_{args.name}.csv"))
    print(f"{args.name}: avg F {report.avg_f:.4f}, AUC {curve.auc:.4f}, salt-and-pepper {noise}")
    return 0


def cmd_compare(args, parser) -> int:
    cfg = _resolve_config(args)
    if cfg.scene is None:
        parser.error("--scene is required")
    scene = load_scene(cfg.scene)
    if scene.truth is None:
        raise DataError(f"{cfg.scene}: scene has no truth grid")
    labels = _resolve_labels(scene, cfg, parser)
    class_rows, auc_rows, noise_rows = [], [], []
    failures = []
    for method in METHODS:
        try:
            model, trace = _train(method, scene, labels, cfg)
            (hmt if method == "hmt" else gmm).save_model(
                model, _out_path(cfg.out, f"model_{method}.txt")
            )
            trace.to_csv(_out_path(cfg.out, f"trace_{method}.csv"))
            classes, scores = _predict(model, scene, cfg)
            _save_grid(classes.astype(float), _out_path(cfg.out, f"pred_{method}.sgrid"))
            _save_grid(scores, _out_path(cfg.out, f"score_{method}.sgrid"))
            report, curve, noise = _evaluate(
                method, classes, scores, scene.truth, None, cfg.neighborhood
            )
            class_rows += metrics.report_rows(method, report)
            auc_rows.append((method, curve.auc))
            noise_rows.append((method, noise))
            metrics.write_roc_csv(curve, _out_path(cfg.out, f"roc_{method}.csv"))
            print(f"{method}: avg F {report.avg_f:.4f}, AUC {curve.auc:.4f}, "
                  f"salt-and-pepper {noise}")
        except FloodemError as exc:
            failures.append(method)
            print(f"{method}: FAILED ({exc})", file=sys.stderr)
    _write_report_csv(_out_path(cfg.out, "compare.csv"), class_rows, auc_rows, noise_rows)
    print(f"report -> {_out_path(cfg.out, 'compare.csv')}")
    return 1 if failures else 0


def cmd_sweep_labels(args, parser) -> int:
    cfg = _resolve_config(args)
    if cfg.scene is None:
        parser.error("--scene is required")
    scene = load_scene(cfg.scene)
    if scene.truth is None:
        raise DataError(f"{cfg.scene}: scene has no truth grid")
    ratios = [float(r) for r in args.ratios.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    out_path = _out_path(cfg.out, "sweep.csv")
    try:
        fh = open(out_path, "w")
    except OSError as exc:
        raise IoError(f"cannot write sweep to {out_path}: {exc}") from exc
    with fh:
        fh.write("method,ratio,seed,avg_f,reason\n")
        for ratio in ratios:
            for seed in seeds:
                try:
                    labels = sample_labels(scene, ratio, rng_seed=seed)
                except DataError as exc:
                    for method in METHODS:
                        fh.write(f"{method},{ratio:g},{seed},nan,{exc}\n")
                    continue
                for method in METHODS:
                    try:
                        model, _ = _train(method, scene, labels, cfg)
                        classes, _ = _predict(model, scene, cfg)
                        avg_f = metrics.class_report(classes, scene.truth).avg_f
                        fh.write(f"{method},{ratio:g},{seed},{avg_f:.6f},\n")
                    except InitError as exc:
                        fh.write(f"{method},{ratio:g},{seed},nan,{exc}\n")
    print(f"sweep -> {out_path}")
    return 0


def run_verify(n_trees: int = 100, seed: int = 0, out=None) -> bool:
    """Oracle-equivalence suite; returns True iff every check passes."""
    out = out or sys.stdout
    rng = np.random.default_rng(seed)
    instances = []
    for _ in range(n_trees):
        n = int(rng.integers(2, 13))
        instances.append(oracle.random_tree_instance(rng, n))

    all_ok = True

    def emit(ok: bool, name: str, detail: str) -> None:
        nonlocal all_ok
        all_ok = all_ok and ok
        print(f"{'ok  ' if ok else 'FAIL'} {name} ({detail})", file=out)

    worst = 0.0
    for model, tree, feats in instances:
        om, op, _, _ = oracle.enumerate_joint(model, tree, feats)
        post = hmt.e_step(model, tree, feats)
        worst = max(worst, float(np.max(np.abs(post.marginal - om))))
        nonroot = np.flatnonzero(tree.parent >= 0)
        if nonroot.size:
            worst = max(worst, float(np.max(np.abs(post.pairwise[nonroot] - op[nonroot]))))
    emit(worst <= 1e-9, "tree posteriors match enumeration", f"{n_trees} trees, max err {worst:.3g}")

    worst = 0.0
    ties = 0
    exact = True
    for model, tree, feats in instances:
        _, _, oa, ov = oracle.enumerate_joint(model, tree, feats)
        dec = hmt.map_decode(model, tree, feats)
        dv = hmt.assignment_log_joint(model, tree, feats, dec)
        worst = max(worst, abs(dv - ov))
        if not np.array_equal(dec, oa):
            ties += 1
            if abs(dv - ov) > 1e-9:
                exact = False
    emit(
        worst <= 1e-9 and exact,
        "MAP decoding attains the enumeration maximum",
        f"{n_trees} trees, max value err {worst:.3g}, {ties} tie-equivalent assignments",
    )

    worst_gap = 0.0
    grid_rho = np.linspace(0.01, 0.999, 25)
    for model, tree, feats in instances[: min(25, n_trees)]:
        if not np.any(tree.parent >= 0):
            continue
        post = hmt.e_step(model, tree, feats)
        new = hmt.m_step(post, tree, feats, prev_rho=model.rho)
        q_hat = hmt.expected_complete_loglik(post, new, tree, feats)
        for r in grid_rho:
            trial = hmt.HmtModel(rho=float(r), pi1=new.pi1, components=new.components)
            gap = hmt.expected_complete_loglik(post, trial, tree, feats) - q_hat
            worst_gap = max(worst_gap, gap)
    emit(
        worst_gap <= 1e-9,
        "transition update maximizes the expected complete log likelihood",
        f"max improvement found by grid search {worst_gap:.3g}",
    )

    spec = SceneSpec(width=16, height=16, obstacle_fraction=0.2, labels_per_class=8, rng_seed=seed)
    scene, labels = generate_scene(spec)
    models: list = []
    gmm.em_fit(scene, labels, use_elevation=False, callback=lambda it, m: models.append(m))
    logliks = [oracle.gmm_loglik(m, scene, labels, use_elevation=False) for m in models]
    drops = [b - a for a, b in zip(logliks, logliks[1:]) if b < a - 1e-8]
    emit(
        not drops,
        "mixture EM log likelihood is non-decreasing",
        f"{len(logliks)} iterations, worst drop {min(drops) if drops else 0.0:.3g}",
    )
    return all_ok


def cmd_verify(args, parser) -> int:
    ok = run_verify(n_trees=args.trees, seed=args.seed)
    print("all checks passed" if ok else "verification FAILED")
    return 0 if ok else 1


# --- parser ---


def _add_run_flags(sub: argparse.ArgumentParser, *, method: bool = True) -> None:
    if method:
        sub.add_argument("--method", choices=METHODS, default=None)
    sub.add_argument("--config", default=None, help="key=value config file")
    sub.add_argument("--scene", default=None)
    sub.add_argument("--labels", default=None, help="label file (row,col,class lines)")
    sub.add_argument("--ratio", type=float, default=None, help="labeled fraction to sample")
    sub.add_argument("--seed", type=int, default=None, help="label sampling seed")
    sub.add_argument("--tol", type=float, default=None, help="convergence threshold (default 1e-5)")
    sub.add_argument("--cutoff", type=float, default=None, help="class cutoff (default 0.5)")
    sub.add_argument("--rho", type=float, default=None, help="initial transition strength (default 0.99)")
    sub.add_argument("--pi", type=float, default=None, help="initial flood prior (default 0.5)")
    sub.add_argument("--neighborhood", type=int, choices=(4, 8), default=None)
    sub.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    sub.add_argument("--threads", type=int, default=None,
                     help="worker cap; execution always follows the serial schedule")
    sub.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodem", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic scene + labels")
    p.add_argument("--spec", required=True, help="scene spec file (key=value)")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--out-scene", required=True)
    p.add_argument("--out-labels", required=True)
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="fit a model and dump its trace")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("predict", help="write class and score grids for a scene")
    p.add_argument("--model", required=True)
    _add_run_flags(p, method=False)
    p.set_defaults(func=cmd_predict)

    p = subs.add_parser("eval", help="score a prediction against truth")
    p.add_argument("--pred", required=True, help="class grid file")
    p.add_argument("--score", required=True, help="score grid file")
    p.add_argument("--truth", required=True, help="scene file carrying the truth grid")
    p.add_argument("--mask", default=None, help="single-channel grid; nonzero = evaluate")
    p.add_argument("--name", default="pred", help="method name for report rows")
    _add_run_flags(p, method=False)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("compare", help="train and evaluate all three methods side by side")
    _add_run_flags(p, method=False)
    p.set_defaults(func=cmd_compare)

    p = subs.add_parser("sweep-labels", help="avg F across label ratios and seeds")
    p.add_argument("--ratios", required=True, help="comma-separated label ratios")
    p.add_argument("--seeds", required=True, help="comma-separated sampling seeds")
    _add_run_flags(p, method=False)
    p.set_defaults(func=cmd_sweep_labels)

    p = subs.add_parser("verify", help="run the oracle-equivalence suite")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except FloodemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

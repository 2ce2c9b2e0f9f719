"""Semi-supervised Gaussian-mixture EM with hard indicators on labeled pixels.

Unlabeled pixels enter the M-step weighted by their class posterior; labeled
pixels keep 0/1 indicator weights in every iteration. Class identity is
pinned by the labeled initialization, so no post-hoc component swapping is
ever needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, FormatError, InitError, IoError
from .gaussian import GaussianParams, log_pdf, weighted_mle
from .grid import LabelSet, RasterScene


@dataclass
class GmmModel:
    """Two-class mixture: Bernoulli prior (pi1 stored, pi0 derived) + per-class Gaussians."""

    pi1: float
    components: tuple[GaussianParams, GaussianParams]

    @property
    def pi0(self) -> float:
        return 1.0 - self.pi1

    @property
    def dim(self) -> int:
        return self.components[0].dim


@dataclass
class TraceRow:
    iteration: int
    pi1: float
    mu: tuple[np.ndarray, np.ndarray]
    sigma_diag: tuple[np.ndarray, np.ndarray]
    loglik: float
    max_rel_change: float  # nan on the initial row
    rho: float | None = None


@dataclass
class EmTrace:
    """Per-iteration parameter snapshots; row 0 is the state before any update."""

    rows: list[TraceRow] = field(default_factory=list)
    has_rho: bool = False

    def logliks(self) -> list[float]:
        return [row.loglik for row in self.rows]

    def to_csv(self, path: str) -> None:
        if not self.rows:
            raise IoError("empty trace")
        dim = self.rows[0].mu[0].size
        cols = ["iter"]
        if self.has_rho:
            cols.append("rho")
        cols.append("pi1")
        for c in (0, 1):
            cols += [f"mu{c}.{k}" for k in range(dim)]
        for c in (0, 1):
            cols += [f"sig{c}.{k}" for k in range(dim)]
        cols += ["loglik", "maxrel"]
        try:
            with open(path, "w") as fh:
                fh.write(",".join(cols) + "\n")
                for row in self.rows:
                    vals: list[str] = [str(row.iteration)]
                    if self.has_rho:
                        vals.append(f"{row.rho:.17g}")
                    vals.append(f"{row.pi1:.17g}")
                    for c in (0, 1):
                        vals += [f"{v:.17g}" for v in row.mu[c]]
                    for c in (0, 1):
                        vals += [f"{v:.17g}" for v in row.sigma_diag[c]]
                    vals.append(f"{row.loglik:.17g}")
                    vals.append(f"{row.max_rel_change:.17g}")
                    fh.write(",".join(vals) + "\n")
        except OSError as exc:
            raise IoError(f"cannot write trace to {path}: {exc}") from exc


def _safe_log(p: float) -> float:
    return float(np.log(p)) if p > 0.0 else -np.inf


def class_params_from_labels(
    scene: RasterScene, labels: LabelSet, use_elevation: bool
) -> tuple[tuple[GaussianParams, GaussianParams], float]:
    """Per-class MLE Gaussians over the labeled pixels, plus the labeled class-1 fraction."""
    feats = scene.feature_matrix(use_elevation)
    flat, cls = labels.flat_indices(scene.width, scene.height)
    comps = []
    for c in (0, 1):
        pts = feats[flat[cls == c]]
        if pts.shape[0] < 2:
            raise InitError(f"class {c} has {pts.shape[0]} labeled samples, need at least 2")
        comps.append(weighted_mle(pts, np.ones(pts.shape[0])))
    return (comps[0], comps[1]), float(np.mean(cls))


def init_from_labels(scene: RasterScene, labels: LabelSet, use_elevation: bool) -> GmmModel:
    """Initialize means/covariances from the labeled pixels of each class."""
    comps, pi1 = class_params_from_labels(scene, labels, use_elevation)
    return GmmModel(pi1=pi1, components=comps)


def _joint_logs(model: GmmModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lp0 = log_pdf(model.components[0], x) + _safe_log(model.pi0)
    lp1 = log_pdf(model.components[1], x) + _safe_log(model.pi1)
    return lp0, lp1


def posterior(model: GmmModel, x: np.ndarray) -> np.ndarray | float:
    """P(y = 1 | x) via log-sum-exp; accepts a single vector or a (n, m) batch."""
    lp0, lp1 = _joint_logs(model, x)
    out = np.exp(lp1 - np.logaddexp(lp0, lp1))
    return float(out) if np.ndim(out) == 0 else out


def _max_rel_change(old: GmmModel, new: GmmModel, old_rho: float | None = None, new_rho: float | None = None) -> float:
    pairs = [(np.atleast_1d(old.pi1), np.atleast_1d(new.pi1))]
    if old_rho is not None:
        pairs.append((np.atleast_1d(old_rho), np.atleast_1d(new_rho)))
    for c in (0, 1):
        pairs.append((old.components[c].mean, new.components[c].mean))
        pairs.append((old.components[c].cov.ravel(), new.components[c].cov.ravel()))
    worst = 0.0
    for a, b in pairs:
        worst = max(worst, float(np.max(np.abs(b - a) / (np.abs(a) + 1e-12))))
    return worst


def em_fit(
    scene: RasterScene,
    labels: LabelSet,
    use_elevation: bool,
    *,
    max_iter: int = 100,
    tol: float = 1e-5,
    callback=None,
) -> tuple[GmmModel, EmTrace]:
    """Run semi-supervised EM until the max relative parameter change drops below tol.

    ``callback(iteration, model)``, when given, fires for the initial model
    (iteration 0) and after every M-step.
    """
    feats = scene.feature_matrix(use_elevation)
    n = feats.shape[0]
    flat_l, cls_l = labels.flat_indices(scene.width, scene.height)
    unlabeled = np.setdiff1d(np.arange(n), flat_l)
    indicator1 = np.zeros(n)
    indicator1[flat_l] = cls_l

    model = init_from_labels(scene, labels, use_elevation)
    trace = EmTrace()
    prev: GmmModel | None = None

    for it in range(max_iter + 1):
        lp0, lp1 = _joint_logs(model, feats)
        loglik = float(np.logaddexp(lp0[unlabeled], lp1[unlabeled]).sum())
        loglik += float(lp0[flat_l[cls_l == 0]].sum()) + float(lp1[flat_l[cls_l == 1]].sum())
        maxrel = _max_rel_change(prev, model) if prev is not None else float("nan")
        trace.rows.append(
            TraceRow(
                iteration=it,
                pi1=model.pi1,
                mu=(model.components[0].mean.copy(), model.components[1].mean.copy()),
                sigma_diag=(
                    np.diag(model.components[0].cov).copy(),
                    np.diag(model.components[1].cov).copy(),
                ),
                loglik=loglik,
                max_rel_change=maxrel,
            )
        )
        if callback is not None:
            callback(it, model)
        if prev is not None and maxrel < tol:
            break
        if it == max_iter:
            break

        w1 = indicator1.copy()
        w1[unlabeled] = np.exp(lp1[unlabeled] - np.logaddexp(lp0[unlabeled], lp1[unlabeled]))
        w0 = 1.0 - w1
        s1 = float(w1.sum())
        s0 = float(w0.sum())
        if s0 == 0.0 or s1 == 0.0:
            raise DegenerateError(f"class weight collapsed to zero at iteration {it + 1}")
        new = GmmModel(
            pi1=s1 / n,
            components=(weighted_mle(feats, w0), weighted_mle(feats, w1)),
        )
        prev, model = model, new

    return model, trace


def infer(
    model: GmmModel, scene: RasterScene, use_elevation: bool, cutoff: float = 0.5
) -> np.ndarray:
    """Per-pixel class grid: 1 wherever the flood posterior reaches the cutoff."""
    post = posterior(model, scene.feature_matrix(use_elevation))
    return (post >= cutoff).astype(np.uint8).reshape(scene.height, scene.width)


def score_grid(model: GmmModel, scene: RasterScene, use_elevation: bool) -> np.ndarray:
    """Per-pixel flood posterior as a (height, width) grid."""
    post = posterior(model, scene.feature_matrix(use_elevation))
    return np.asarray(post, dtype=float).reshape(scene.height, scene.width)


# --- model file format: one key=value per line, 17-significant-digit floats ---


def _model_lines(pi1: float, components: tuple[GaussianParams, GaussianParams]) -> list[str]:
    lines = [f"pi1={pi1:.17g}"]
    for c in (0, 1):
        g = components[c]
        for k, v in enumerate(g.mean):
            lines.append(f"mean.{c}.{k}={v:.17g}")
        for i in range(g.dim):
            for j in range(g.dim):
                lines.append(f"cov.{c}.{i}.{j}={g.cov[i, j]:.17g}")
    return lines


def _parse_model_file(path: str) -> dict[str, float]:
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read model from {path}: {exc}") from exc
    kv: dict[str, float] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, _, val = line.partition("=")
        try:
            kv[key.strip()] = float(val)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad float {val.strip()!r}") from exc
    if "pi1" not in kv:
        raise FormatError(f"{path}: missing pi1")
    return kv


def _components_from_kv(kv: dict[str, float], path: str) -> tuple[GaussianParams, GaussianParams]:
    dims = [k for k in kv if k.startswith("mean.0.")]
    if not dims:
        raise FormatError(f"{path}: no mean.0.* keys")
    m = 1 + max(int(k.rsplit(".", 1)[1]) for k in dims)
    comps = []
    for c in (0, 1):
        try:
            mean = np.array([kv[f"mean.{c}.{k}"] for k in range(m)])
            cov = np.array([[kv[f"cov.{c}.{i}.{j}"] for j in range(m)] for i in range(m)])
        except KeyError as exc:
            raise FormatError(f"{path}: missing model key {exc.args[0]}") from exc
        comps.append(GaussianParams(mean, cov))
    return comps[0], comps[1]


def save_model(model: GmmModel, path: str) -> None:
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(_model_lines(model.pi1, model.components)) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write model to {path}: {exc}") from exc


def load_model(path: str) -> GmmModel:
    kv = _parse_model_file(path)
    if "rho" in kv:
        raise FormatError(f"{path}: has a rho key; this is a tree model file")
    return GmmModel(pi1=kv["pi1"], components=_components_from_kv(kv, path))

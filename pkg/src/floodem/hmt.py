"""Structured EM over an elevation-derived flow-dependency forest.

Each pixel's parent is its lowest strictly-lower neighbor, so standing water
at a pixel implies standing water at its parent. Class transitions down the
tree follow a 2x2 table with a structural zero (a flood pixel can never sit
above a dry parent):

    P(child=0 | parent=0) = 1        P(child=0 | parent=1) = 1 - rho
    P(child=1 | parent=0) = 0        P(child=1 | parent=1) = rho

Parentless nodes carry the Bernoulli prior (pi0, pi1). Emissions are
per-class Gaussians over the non-elevation feature channels; elevation enters
only through the tree structure. Inference is exact: sum-product for
marginal/pairwise posteriors and max-sum for the MAP labeling, both run level
by level in the log domain with per-node max-shift normalization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateError, DimError, FormatError, IoError
from .gaussian import GaussianParams, log_pdf, weighted_mle
from .grid import LabelSet, RasterScene
from .gmm import (
    EmTrace,
    TraceRow,
    _components_from_kv,
    _max_rel_change,
    _model_lines,
    _parse_model_file,
    _safe_log,
    class_params_from_labels,
)

NEIGHBOR_OFFSETS = {
    4: ((-1, 0), (0, -1), (0, 1), (1, 0)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


@dataclass(eq=False)
class FlowTree:
    """Forest over pixels: parent links, their inverse, roots, and a child-first order."""

    parent: np.ndarray  # (N,) int64, -1 marks a root
    children: list[np.ndarray]
    roots: np.ndarray
    topo_order: np.ndarray  # every node appears before its parent
    _level_groups: list[np.ndarray] | None = field(default=None, repr=False)

    @classmethod
    def from_parents(cls, parent: np.ndarray) -> "FlowTree":
        parent = np.asarray(parent, dtype=np.int64).reshape(-1)
        n = parent.size
        if np.any((parent < -1) | (parent >= n)) or np.any(parent == np.arange(n)):
            raise DataError("invalid parent index")
        children: list[list[int]] = [[] for _ in range(n)]
        for node, p in enumerate(parent):
            if p >= 0:
                children[p].append(node)
        roots = np.flatnonzero(parent == -1)
        depth = np.full(n, -1, dtype=np.int64)
        stack = list(roots)
        depth[roots] = 0
        while stack:
            node = stack.pop()
            for ch in children[node]:
                depth[ch] = depth[node] + 1
                stack.append(ch)
        if np.any(depth < 0):
            raise DataError("parent links contain a cycle")
        topo = np.lexsort((np.arange(n), -depth))
        return cls(
            parent=parent,
            children=[np.array(ch, dtype=np.int64) for ch in children],
            roots=roots,
            topo_order=topo,
        )

    @property
    def n_nodes(self) -> int:
        return self.parent.size

    def level_groups(self) -> list[np.ndarray]:
        """Nodes bucketed by height above their deepest leaf; bucket k only
        depends on buckets < k, so each bucket can be processed in one shot."""
        if self._level_groups is None:
            level = np.zeros(self.n_nodes, dtype=np.int64)
            for node in self.topo_order:
                p = self.parent[node]
                if p >= 0 and level[p] <= level[node]:
                    level[p] = level[node] + 1
            order = np.lexsort((np.arange(self.n_nodes), level))
            bounds = np.searchsorted(level[order], np.arange(1, level.max() + 1))
            self._level_groups = np.split(order, bounds)
        return self._level_groups

    def validate(self) -> None:
        """Assert the structural invariants; used by tests."""
        n = self.n_nodes
        rebuilt: list[list[int]] = [[] for _ in range(n)]
        for node, p in enumerate(self.parent):
            if p >= 0:
                rebuilt[p].append(node)
        for node in range(n):
            assert np.array_equal(np.sort(self.children[node]), np.array(rebuilt[node], dtype=np.int64))
        assert np.array_equal(np.sort(self.roots), np.flatnonzero(self.parent == -1))
        pos = np.empty(n, dtype=np.int64)
        pos[self.topo_order] = np.arange(n)
        assert np.array_equal(np.sort(self.topo_order), np.arange(n))
        for node, p in enumerate(self.parent):
            if p >= 0:
                assert pos[node] < pos[p]


@dataclass
class HmtModel:
    """Transition strength rho, root prior pi1, and per-class emission Gaussians."""

    rho: float
    pi1: float
    components: tuple[GaussianParams, GaussianParams]

    @property
    def pi0(self) -> float:
        return 1.0 - self.pi1

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def log_transition(self) -> np.ndarray:
        """2x2 log table indexed [child, parent]; columns are stochastic."""
        return np.array(
            [[0.0, _safe_log(1.0 - self.rho)], [-np.inf, _safe_log(self.rho)]]
        )


@dataclass
class TreePosteriors:
    """Exact posteriors: per-node P(y=1 | X) and, for non-roots, P(y_n, y_parent | X)."""

    marginal: np.ndarray  # (N,)
    pairwise: np.ndarray  # (N, 2, 2) indexed [node, y_node, y_parent]; NaN rows at roots


def transition(rho: float, y_child: int, y_parent: int) -> float:
    """One entry of the class transition table."""
    if y_parent == 0:
        return 1.0 if y_child == 0 else 0.0
    return rho if y_child == 1 else 1.0 - rho


def build_flow_tree(elevation: np.ndarray, neighborhood: int = 8) -> FlowTree:
    """Parent = the strictly-lower neighbor of minimum elevation.

    Ties go to the smallest row-major index; pixels with no strictly-lower
    neighbor become roots (a flat plateau is a forest of singletons).
    """
    elev = np.asarray(elevation, dtype=float)
    if elev.ndim != 2:
        raise DataError("elevation must be a 2-D grid")
    if not np.all(np.isfinite(elev)):
        raise DataError("elevation contains non-finite values")
    if neighborhood not in NEIGHBOR_OFFSETS:
        raise DataError(f"neighborhood must be 4 or 8, got {neighborhood}")
    h, w = elev.shape
    flat_index = np.arange(h * w, dtype=np.int64).reshape(h, w)
    best_elev = np.full((h, w), np.inf)
    best_idx = np.full((h, w), -1, dtype=np.int64)
    # Offsets are scanned in row-major order, and only a strictly smaller
    # elevation replaces the incumbent, so equal-elevation ties keep the
    # smallest flat index automatically.
    for dr, dc in NEIGHBOR_OFFSETS[neighborhood]:
        nb_elev = np.full((h, w), np.inf)
        nb_idx = np.full((h, w), -1, dtype=np.int64)
        src_r = slice(max(dr, 0), h + min(dr, 0))
        dst_r = slice(max(-dr, 0), h + min(-dr, 0))
        src_c = slice(max(dc, 0), w + min(dc, 0))
        dst_c = slice(max(-dc, 0), w + min(-dc, 0))
        nb_elev[dst_r, dst_c] = elev[src_r, src_c]
        nb_idx[dst_r, dst_c] = flat_index[src_r, src_c]
        lower = (nb_elev < elev) & (nb_elev < best_elev)
        best_elev[lower] = nb_elev[lower]
        best_idx[lower] = nb_idx[lower]
    return FlowTree.from_parents(best_idx.ravel())


def _log_emissions(model: HmtModel, features: np.ndarray) -> np.ndarray:
    feats = np.asarray(features, dtype=float)
    if feats.ndim != 2 or feats.shape[1] != model.dim:
        raise DimError(f"features shape {feats.shape} does not match emission dimension {model.dim}")
    return np.stack(
        [log_pdf(model.components[0], feats), log_pdf(model.components[1], feats)], axis=1
    )


def _upward(model: HmtModel, tree: FlowTree, log_em: np.ndarray):
    """Leaf-to-root pass.

    Returns (u, msg, loglik) where u[n] is the max-shifted log likelihood of
    the subtree under n given y_n, msg[n, y_p] the log message n sends its
    parent, and loglik the total log evidence (all shifts telescoped back in).
    """
    parent = tree.parent
    log_t = model.log_transition()
    u = log_em.copy()
    msg = np.zeros((tree.n_nodes, 2))
    shift_total = 0.0
    for nodes in tree.level_groups():
        shift = np.max(u[nodes], axis=1)
        if not np.all(np.isfinite(shift)):
            raise DataError("contradictory clamped evidence: a node has zero likelihood in both classes")
        u[nodes] -= shift[:, None]
        shift_total += float(shift.sum())
        nr = nodes[parent[nodes] >= 0]
        if nr.size:
            to0 = np.logaddexp(log_t[0, 0] + u[nr, 0], log_t[1, 0] + u[nr, 1])
            to1 = np.logaddexp(log_t[0, 1] + u[nr, 0], log_t[1, 1] + u[nr, 1])
            msg[nr, 0] = to0
            msg[nr, 1] = to1
            np.add.at(u[:, 0], parent[nr], to0)
            np.add.at(u[:, 1], parent[nr], to1)
    roots = tree.roots
    root_z = np.logaddexp(_safe_log(model.pi0) + u[roots, 0], _safe_log(model.pi1) + u[roots, 1])
    loglik = shift_total + float(root_z.sum())
    return u, msg, loglik


def _downward(model: HmtModel, tree: FlowTree, u: np.ndarray, msg: np.ndarray):
    """Root-to-leaf pass turning upward quantities into exact posteriors."""
    n = tree.n_nodes
    parent = tree.parent
    log_t = model.log_transition()
    log_marg = np.full((n, 2), -np.inf)
    roots = tree.roots
    lr = np.stack(
        [_safe_log(model.pi0) + u[roots, 0], _safe_log(model.pi1) + u[roots, 1]], axis=1
    )
    log_marg[roots] = lr - np.logaddexp(lr[:, 0], lr[:, 1])[:, None]
    pairwise = np.full((n, 2, 2), np.nan)
    for nodes in reversed(tree.level_groups()):
        nr = nodes[parent[nodes] >= 0]
        if nr.size == 0:
            continue
        lp = log_marg[parent[nr]]  # (k, 2) over parent states
        # A -inf parent marginal forces zero mass regardless of the (possibly
        # -inf) message it would otherwise be divided by, so any nan produced
        # under it is masked.
        with np.errstate(invalid="ignore"):
            pair = lp[:, None, :] + log_t[None, :, :] + u[nr, :, None] - msg[nr, None, :]
        pair = np.where(np.isneginf(lp[:, None, :]), -np.inf, pair)
        pairwise[nr] = np.exp(pair)
        log_marg[nr] = np.logaddexp(pair[:, :, 0], pair[:, :, 1])
    return np.exp(log_marg[:, 1]), pairwise


def e_step(model: HmtModel, tree: FlowTree, features: np.ndarray) -> TreePosteriors:
    """Exact sum-product posteriors under the current parameters."""
    log_em = _log_emissions(model, features)
    if log_em.shape[0] != tree.n_nodes:
        raise DimError(f"{log_em.shape[0]} feature rows for {tree.n_nodes} tree nodes")
    u, msg, _ = _upward(model, tree, log_em)
    marginal, pairwise = _downward(model, tree, u, msg)
    return TreePosteriors(marginal=marginal, pairwise=pairwise)


def m_step(
    posteriors: TreePosteriors,
    tree: FlowTree,
    features: np.ndarray,
    prev_rho: float | None = None,
) -> HmtModel:
    """Closed-form parameter update from tree posteriors.

    rho is the expected-count MLE over non-root edges, sum E[y_parent * y_n] /
    sum E[y_parent]; when no posterior mass sits on flooded parents the update
    is undefined and the previous rho is kept (with a warning).
    """
    marg = posteriors.marginal
    nonroot = np.flatnonzero(tree.parent >= 0)
    pw = posteriors.pairwise[nonroot]
    num = float(pw[:, 1, 1].sum()) if nonroot.size else 0.0
    den = float((pw[:, 0, 1] + pw[:, 1, 1]).sum()) if nonroot.size else 0.0
    if den == 0.0:
        if prev_rho is None:
            raise DegenerateError("no posterior mass on flooded parents and no previous rho to keep")
        warnings.warn("no posterior mass on flooded parents; keeping previous rho", stacklevel=2)
        rho = prev_rho
    else:
        rho = min(num / den, 1.0)
        rho = max(rho, 1e-12)  # keep the (0, 1] contract when flood mass vanishes
    pi1 = float(marg[tree.roots].mean())
    w1 = marg
    w0 = 1.0 - marg
    return HmtModel(
        rho=rho,
        pi1=pi1,
        components=(weighted_mle(features, w0), weighted_mle(features, w1)),
    )


def expected_complete_loglik(
    posteriors: TreePosteriors, model: HmtModel, tree: FlowTree, features: np.ndarray
) -> float:
    """Posterior expectation of the complete-data log likelihood.

    Emission term over all nodes, prior term over roots, transition term over
    non-root edges; zero-probability cells contribute zero even against a
    -inf log factor.
    """
    log_em = _log_emissions(model, features)
    marg1 = posteriors.marginal
    total = float(((1.0 - marg1) * log_em[:, 0] + marg1 * log_em[:, 1]).sum())
    r1 = marg1[tree.roots]
    with np.errstate(invalid="ignore"):
        for p, logpi in ((1.0 - r1, _safe_log(model.pi0)), (r1, _safe_log(model.pi1))):
            total += float(np.where(p > 0.0, p * logpi, 0.0).sum())
        nonroot = np.flatnonzero(tree.parent >= 0)
        if nonroot.size:
            pw = posteriors.pairwise[nonroot]
            contrib = np.where(pw > 0.0, pw * model.log_transition()[None, :, :], 0.0)
            total += float(contrib.sum())
    return total


def em_fit(
    scene: RasterScene,
    labels: LabelSet,
    *,
    max_iter: int = 100,
    tol: float = 1e-5,
    rho_init: float = 0.99,
    pi_init: float = 0.5,
    neighborhood: int = 8,
    clamp_labels: bool = False,
    callback=None,
) -> tuple[HmtModel, EmTrace]:
    """Transductive EM over the whole scene.

    Labels initialize the per-class emission Gaussians and nothing else,
    unless ``clamp_labels`` pins the labeled pixels as hard evidence during
    message passing. ``callback(iteration, model)`` mirrors the GMM hook.
    """
    elevation = scene.elevation()
    features = scene.feature_matrix(use_elevation=False)
    tree = build_flow_tree(elevation, neighborhood)
    components, _ = class_params_from_labels(scene, labels, use_elevation=False)
    model = HmtModel(rho=rho_init, pi1=pi_init, components=components)

    clamp_idx = clamp_cls = None
    if clamp_labels:
        clamp_idx, clamp_cls = labels.flat_indices(scene.width, scene.height)

    trace = EmTrace(has_rho=True)
    prev: HmtModel | None = None
    for it in range(max_iter + 1):
        log_em = _log_emissions(model, features)
        if clamp_idx is not None:
            log_em[clamp_idx, 1 - clamp_cls] = -np.inf
        u, msg, loglik = _upward(model, tree, log_em)
        maxrel = (
            _max_rel_change(prev, model, old_rho=prev.rho, new_rho=model.rho)
            if prev is not None
            else float("nan")
        )
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
                rho=model.rho,
            )
        )
        if callback is not None:
            callback(it, model)
        if prev is not None and maxrel < tol:
            break
        if it == max_iter:
            break

        marginal, pairwise = _downward(model, tree, u, msg)
        posteriors = TreePosteriors(marginal=marginal, pairwise=pairwise)
        try:
            new = m_step(posteriors, tree, features, prev_rho=model.rho)
        except DegenerateError as exc:
            raise DegenerateError(f"{exc} (iteration {it + 1})") from exc
        prev, model = model, new

    return model, trace


def map_decode(model: HmtModel, tree: FlowTree, features: np.ndarray) -> np.ndarray:
    """Exact MAP labeling by max-sum with back-pointers; ties break toward dry."""
    log_em = _log_emissions(model, features)
    if log_em.shape[0] != tree.n_nodes:
        raise DimError(f"{log_em.shape[0]} feature rows for {tree.n_nodes} tree nodes")
    parent = tree.parent
    log_t = model.log_transition()
    delta = log_em.copy()
    back = np.zeros((tree.n_nodes, 2), dtype=np.int8)
    for nodes in tree.level_groups():
        delta[nodes] -= np.max(delta[nodes], axis=1)[:, None]
        nr = nodes[parent[nodes] >= 0]
        if nr.size == 0:
            continue
        cand = log_t[None, :, :] + delta[nr, :, None]  # (k, y_child, y_parent)
        back[nr] = (cand[:, 1, :] > cand[:, 0, :]).astype(np.int8)
        np.add.at(delta[:, 0], parent[nr], cand[np.arange(nr.size), back[nr, 0], 0])
        np.add.at(delta[:, 1], parent[nr], cand[np.arange(nr.size), back[nr, 1], 1])
    classes = np.zeros(tree.n_nodes, dtype=np.uint8)
    roots = tree.roots
    v0 = _safe_log(model.pi0) + delta[roots, 0]
    v1 = _safe_log(model.pi1) + delta[roots, 1]
    classes[roots] = (v1 > v0).astype(np.uint8)
    for nodes in reversed(tree.level_groups()):
        nr = nodes[parent[nodes] >= 0]
        if nr.size:
            classes[nr] = back[nr, classes[parent[nr]]]
    return classes


def assignment_log_joint(
    model: HmtModel, tree: FlowTree, features: np.ndarray, classes: np.ndarray
) -> float:
    """Log joint probability of one full class assignment."""
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    log_em = _log_emissions(model, features)
    total = float(log_em[np.arange(tree.n_nodes), classes].sum())
    log_pi = np.array([_safe_log(model.pi0), _safe_log(model.pi1)])
    total += float(log_pi[classes[tree.roots]].sum())
    nonroot = np.flatnonzero(tree.parent >= 0)
    if nonroot.size:
        log_t = model.log_transition()
        total += float(log_t[classes[nonroot], classes[tree.parent[nonroot]]].sum())
    return total


def write_tree(tree: FlowTree, path: str) -> None:
    """Debug dump: one "node_index parent_index" line per node, -1 for roots."""
    try:
        with open(path, "w") as fh:
            for node, p in enumerate(tree.parent):
                fh.write(f"{node} {p}\n")
    except OSError as exc:
        raise IoError(f"cannot write tree to {path}: {exc}") from exc


def save_model(model: HmtModel, path: str) -> None:
    lines = [f"rho={model.rho:.17g}"] + _model_lines(model.pi1, model.components)
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write model to {path}: {exc}") from exc


def load_model(path: str) -> HmtModel:
    kv = _parse_model_file(path)
    if "rho" not in kv:
        raise FormatError(f"{path}: missing rho; this is a mixture model file")
    return HmtModel(rho=kv["rho"], pi1=kv["pi1"], components=_components_from_kv(kv, path))

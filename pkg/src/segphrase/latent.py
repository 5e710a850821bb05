"""Foreground/background model learning from box supervision only.

Superpixel labels inside the box are unobserved, so training alternates:
refit the foreground mixture on currently-foreground superpixels pooled
over all instances (background likewise), then relabel every instance by
exact graph cut with superpixels outside the box clamped to background.
Refits resume from the previous round's mixtures, which makes the pooled
energy provably non-increasing across rounds; that is checked each round.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field

import numpy as np

from . import gmm
from .errors import DataError, NumericalError
from .imaging import SuperpixelGraph
from .mrf import MrfProblem, energy, min_cut_infer

CLAMP_COST = 1e6
DEFAULT_SEED_SHRINK = 0.6
_MONOTONE_TOL = 1e-6


class CollapseError(NumericalError):
    """Training degenerated to all-foreground or all-background labels."""


class DegenerateBoxError(DataError):
    """Bounding box has zero area or lies outside the image."""


@dataclass
class TrainConfig:
    k: int = 5
    max_iters: int = 10
    seed: int = 0
    lam: float = 0.05
    seed_shrink: float = DEFAULT_SEED_SHRINK


@dataclass
class TrainingInstance:
    """One training image: its superpixel graph, box, and box overlap."""

    graph: SuperpixelGraph
    box: tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open pixel range
    sp_in_box: np.ndarray           # (n,) fraction of each superpixel inside box


@dataclass
class ModelInfo:
    phrase: str = ""
    component_id: int = 0
    instances: int = 0
    iterations: int = 0
    energy_history: list[float] = field(default_factory=list)


@dataclass
class SegmentationModel:
    """Foreground/background mixture pair plus the pairwise scale."""

    theta_fg: gmm.GaussianMixture
    theta_bg: gmm.GaussianMixture
    lam: float = 0.05
    info: ModelInfo = field(default_factory=ModelInfo)

    @property
    def dim(self) -> int:
        return self.theta_fg.dim


def make_instance(graph: SuperpixelGraph, box) -> TrainingInstance:
    """Build a TrainingInstance, computing per-superpixel box overlap."""
    x0, y0, x1, y1 = (int(v) for v in box)
    smap = graph.smap
    if not (0 <= x0 < x1 <= smap.width and 0 <= y0 < y1 <= smap.height):
        raise DegenerateBoxError(f"box {box} invalid for {smap.width}x{smap.height} image")
    inside = np.zeros((smap.height, smap.width))
    inside[y0:y1, x0:x1] = 1.0
    frac = np.bincount(
        smap.labels.ravel(), weights=inside.ravel(), minlength=smap.n
    ) / graph.areas
    return TrainingInstance(graph, (x0, y0, x1, y1), frac)


def init_labels(inst: TrainingInstance, seed_shrink: float = DEFAULT_SEED_SHRINK) -> np.ndarray:
    """Geometric seeding: a center-shrunk box marks confident foreground.

    Superpixels whose centroid falls in the box shrunk by seed_shrink about
    its center are foreground; superpixels entirely outside the box are
    background; the rest are foreground iff at least half their area is
    inside the box.
    """
    if not 0.0 < seed_shrink <= 1.0:
        raise ValueError("seed_shrink must be in (0, 1]")
    x0, y0, x1, y1 = inst.box
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    hx, hy = (x1 - x0) / 2.0 * seed_shrink, (y1 - y0) / 2.0 * seed_shrink
    cent = inst.graph.centroids
    in_seed = (
        (cent[:, 0] >= cx - hx)
        & (cent[:, 0] < cx + hx)
        & (cent[:, 1] >= cy - hy)
        & (cent[:, 1] < cy + hy)
    )
    labels = np.where(in_seed, 1, 0).astype(np.int8)
    labels[(~in_seed) & (inst.sp_in_box >= 0.5)] = 1
    labels[inst.sp_in_box == 0.0] = 0
    return labels


def _build_problem(model_fg, model_bg, lam, graph, clamp_bg=None) -> MrfProblem:
    """One instance's MRF: negative log-densities as label costs."""
    unary = np.empty((graph.n, 2))
    unary[:, 1] = -gmm.log_density_many(model_fg, graph.features)
    unary[:, 0] = -gmm.log_density_many(model_bg, graph.features)
    if clamp_bg is not None and clamp_bg.any():
        unary[clamp_bg, 1] += CLAMP_COST
    weights = np.exp(-lam * graph.boundary_prob)
    return MrfProblem(graph.n, unary, graph.edges, weights)


def _pools(instances, labelings):
    fg = [i.graph.features[l == 1] for i, l in zip(instances, labelings)]
    bg = [i.graph.features[l == 0] for i, l in zip(instances, labelings)]
    return np.concatenate(fg), np.concatenate(bg)


def em_learn(instances: list[TrainingInstance], config: TrainConfig) -> SegmentationModel:
    """Alternating refit/relabel training; deterministic given the seed.

    On an all-foreground or all-background collapse the run restarts once
    from init_labels with the seed shrink halved; a second collapse raises
    CollapseError.
    """
    if not instances:
        raise ValueError("need at least one training instance")
    dims = {i.graph.features.shape[1] for i in instances}
    if len(dims) != 1:
        raise ValueError("instances must share one feature dimension")

    shrink = config.seed_shrink
    for attempt in range(2):
        try:
            return _em_run(instances, config, shrink)
        except CollapseError:
            if attempt == 1:
                raise
            shrink = shrink / 2.0
    raise AssertionError("unreachable")


def _check_pools(labelings):
    pooled = np.concatenate(labelings)
    if pooled.min() == 1:
        raise CollapseError("label collapse: every superpixel is foreground")
    if pooled.max() == 0:
        raise CollapseError("label collapse: every superpixel is background")


def _em_run(instances, config, shrink) -> SegmentationModel:
    labelings = [init_labels(inst, shrink) for inst in instances]
    _check_pools(labelings)
    clamp_masks = [inst.sp_in_box == 0.0 for inst in instances]

    theta_fg = theta_bg = None
    history: list[float] = []
    iterations = 0
    for _round in range(config.max_iters):
        fg_pool, bg_pool = _pools(instances, labelings)
        k_fg = min(config.k, len(fg_pool)) if theta_fg is None else theta_fg.k
        k_bg = min(config.k, len(bg_pool)) if theta_bg is None else theta_bg.k
        theta_fg = gmm.fit(fg_pool, k_fg, [config.seed, 0], start=theta_fg)
        theta_bg = gmm.fit(bg_pool, k_bg, [config.seed, 1], start=theta_bg)

        total = 0.0
        new_labelings = []
        for inst, clamp in zip(instances, clamp_masks):
            problem = _build_problem(theta_fg, theta_bg, config.lam, inst.graph, clamp)
            labeling = min_cut_infer(problem)
            new_labelings.append(labeling)
            total += energy(problem, labeling)
        if history and total > history[-1] + _MONOTONE_TOL:
            raise NumericalError(
                f"pooled energy increased across EM rounds: {history[-1]} -> {total}"
            )
        history.append(total)
        iterations = _round + 1
        _check_pools(new_labelings)
        if all(np.array_equal(a, b) for a, b in zip(labelings, new_labelings)):
            labelings = new_labelings
            break
        labelings = new_labelings

    if theta_fg is None:  # max_iters == 0: single fit straight from the seeding
        fg_pool, bg_pool = _pools(instances, labelings)
        theta_fg = gmm.fit(fg_pool, min(config.k, len(fg_pool)), [config.seed, 0])
        theta_bg = gmm.fit(bg_pool, min(config.k, len(bg_pool)), [config.seed, 1])

    info = ModelInfo(
        instances=len(instances), iterations=iterations, energy_history=history
    )
    return SegmentationModel(theta_fg, theta_bg, config.lam, info)


def segment_with_model(model: SegmentationModel, graph: SuperpixelGraph) -> np.ndarray:
    """One relabeling pass on a fresh graph, no box clamp."""
    if graph.features.shape[1] != model.dim:
        raise ValueError("graph feature dimension does not match model")
    problem = _build_problem(model.theta_fg, model.theta_bg, model.lam, graph)
    return min_cut_infer(problem)


def segment_instance(model: SegmentationModel, inst: TrainingInstance) -> np.ndarray:
    """Relabeling pass with the instance's outside-box background clamp."""
    if inst.graph.features.shape[1] != model.dim:
        raise ValueError("graph feature dimension does not match model")
    problem = _build_problem(
        model.theta_fg, model.theta_bg, model.lam, inst.graph, inst.sp_in_box == 0.0
    )
    return min_cut_infer(problem)


def parse_manifest(path) -> list[tuple[str, tuple[int, int, int, int]]]:
    """Plain training manifest: one 'image-path x0 y0 x1 y1' line per instance."""
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = shlex.split(line)
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 'image-path x0 y0 x1 y1'")
            try:
                box = tuple(int(v) for v in parts[1:])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer box field") from exc
            out.append((parts[0], box))
    return out

"""Deterministic geometric evaluator of human-guided projection relationships,
standing in for an external vision-language labeler.

Predicates are computed on rendered id/depth views. Footprints are recovered
per object by single-object re-rasterization, so "overlaps" means projection
overlap rather than visible-pixel overlap. Labels use conjunction across all
queried views (majority voting is available for studies). A configurable
per-view flip probability models labeler error; flips are deterministic given
(seed, query index).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, IdDepthImage, rasterize
from .scenes import render_entries
from .seeding import stream
from .world import WorldState

PREDICATES = ("overlaps", "occludes", "above_in_image", "inside_footprint", "near_in_image")
REGIONS = ("horizon",)
INSIDE_FRAC = 0.9


@dataclass(frozen=True)
class ProjectionRelation:
    predicate: str
    subject: int
    object: object                 # object id or region name
    threshold_px: float = None
    views: tuple = None            # camera names; None = every view

    def __post_init__(self):
        if self.predicate not in PREDICATES:
            raise ValueError(f"unknown predicate {self.predicate!r}")
        if self.subject == self.object:
            raise ValueError("subject and object must differ")
        if self.predicate == "near_in_image":
            if self.threshold_px is None or self.threshold_px <= 0:
                raise ValueError("near_in_image requires positive threshold_px")
        if isinstance(self.object, str) and self.object not in REGIONS:
            raise ValueError(f"unknown region {self.object!r}")
        if self.views is not None:
            object.__setattr__(self, "views", tuple(self.views))

    def to_json(self) -> dict:
        d = {"predicate": self.predicate, "subject": self.subject, "object": self.object}
        if self.threshold_px is not None:
            d["threshold_px"] = self.threshold_px
        if self.views is not None:
            d["views"] = list(self.views)
        return d

    @staticmethod
    def from_json(d: dict) -> "ProjectionRelation":
        return ProjectionRelation(
            predicate=d["predicate"],
            subject=d["subject"],
            object=d["object"],
            threshold_px=d.get("threshold_px"),
            views=tuple(d["views"]) if d.get("views") else None,
        )


@dataclass
class QueryTemplate:
    family: str
    pre_task: list
    post_task: list

    def __post_init__(self):
        if not self.pre_task or not self.post_task:
            raise ValueError("templates need both pre_task and post_task relations")

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "pre_task": [r.to_json() for r in self.pre_task],
            "post_task": [r.to_json() for r in self.post_task],
        }

    @staticmethod
    def from_json(d: dict) -> "QueryTemplate":
        return QueryTemplate(
            family=d["family"],
            pre_task=[ProjectionRelation.from_json(r) for r in d["pre_task"]],
            post_task=[ProjectionRelation.from_json(r) for r in d["post_task"]],
        )


@dataclass
class LabelRecord:
    view_count: int
    per_view: list                 # (camera name, verdict) for queried views
    label: int
    stage: str = "post"
    timestep: int = 0


@dataclass
class OracleErrorModel:
    p_flip: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_flip < 0.5):
            raise ValueError("p_flip must lie in [0, 0.5)")
        self._counter = 0

    def next_query_index(self) -> int:
        i = self._counter
        self._counter += 1
        return i


# ---------------------------------------------------------------------------
# rendered views and predicates


@dataclass
class RenderedView:
    camera: Camera
    composite: IdDepthImage
    footprints: dict               # id -> (mask bool HxW, depth HxW from single-object pass)


def render_view(world: WorldState, camera: Camera) -> RenderedView:
    entries = render_entries(world)
    composite = rasterize(entries, camera)
    footprints = {}
    for entry in entries:
        single = rasterize([entry], camera)
        footprints[entry[0]] = (single.ids > 0, single.depth)
    return RenderedView(camera=camera, composite=composite, footprints=footprints)


def _footprint(view: RenderedView, ref):
    if ref not in view.footprints:
        raise KeyError(f"no object {ref!r} in rendered scene")
    return view.footprints[ref]


def _centroid(mask: np.ndarray):
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        return None
    return float(us.mean()), float(vs.mean())


def relation_holds(view: RenderedView, rel: ProjectionRelation) -> bool:
    """Evaluate one projection relationship on one rendered view.

    Any predicate over an empty footprint is false.
    """
    if rel.predicate == "above_in_image" and isinstance(rel.object, str):
        mask_s, _ = _footprint(view, rel.subject)
        if not mask_s.any():
            return False
        horizon_row = float(view.camera.principal[1])
        return float(np.nonzero(mask_s.any(axis=1))[0].max()) < horizon_row

    mask_s, depth_s = _footprint(view, rel.subject)
    mask_o, depth_o = _footprint(view, rel.object)
    if not mask_s.any() or not mask_o.any():
        return False

    if rel.predicate == "overlaps":
        return bool((mask_s & mask_o).any())
    if rel.predicate == "occludes":
        shared = mask_s & mask_o
        n = int(shared.sum())
        if n == 0:
            return False
        nearer = int((depth_s[shared] < depth_o[shared]).sum())
        return nearer * 2 > n
    if rel.predicate == "above_in_image":
        rows_s = np.nonzero(mask_s.any(axis=1))[0]
        rows_o = np.nonzero(mask_o.any(axis=1))[0]
        return int(rows_s.max()) < int(rows_o.min())
    if rel.predicate == "inside_footprint":
        inside = int((mask_s & mask_o).sum())
        return inside >= INSIDE_FRAC * int(mask_s.sum())
    # near_in_image
    cs = _centroid(mask_s)
    co = _centroid(mask_o)
    return float(np.hypot(cs[0] - co[0], cs[1] - co[1])) <= rel.threshold_px


# ---------------------------------------------------------------------------
# multi-view labeling


def _queried_views(cameras, relations):
    out = []
    for cam in cameras:
        applicable = [r for r in relations if r.views is None or cam.name in r.views]
        if applicable:
            out.append((cam, applicable))
    return out


def evaluate_views(world: WorldState, cameras, relations, stage="post", timestep=0) -> LabelRecord:
    """Noiseless label: conjunction of per-view verdicts over queried views."""
    per_view = []
    for cam, applicable in _queried_views(cameras, relations):
        view = render_view(world, cam)
        verdict = all(relation_holds(view, r) for r in applicable)
        per_view.append((cam.name, bool(verdict)))
    label = int(all(v for _, v in per_view))
    return LabelRecord(view_count=len(per_view), per_view=per_view, label=label,
                       stage=stage, timestep=timestep)


def noisy_label(world: WorldState, cameras, relations, err: OracleErrorModel,
                query_index: int = None, stage="post", timestep=0,
                aggregation: str = "conjunction") -> LabelRecord:
    """evaluate_views with each per-view verdict independently flipped with
    probability p_flip; bit-reproducible given (seed, query index)."""
    record = evaluate_views(world, cameras, relations, stage=stage, timestep=timestep)
    if query_index is None:
        query_index = err.next_query_index()
    rng = stream(err.seed, "oracle-flip", query_index)
    draws = rng.random(len(record.per_view))
    flipped = [
        (name, (not v) if draws[i] < err.p_flip else v)
        for i, (name, v) in enumerate(record.per_view)
    ]
    record.per_view = flipped
    if aggregation == "conjunction":
        record.label = int(all(v for _, v in flipped))
    elif aggregation == "majority":
        yes = sum(1 for _, v in flipped if v)
        record.label = int(yes * 2 > len(flipped))
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    return record


def two_stage_query(pre_world: WorldState, post_world: WorldState, template: QueryTemplate,
                    cameras, err: OracleErrorModel = None, task_family: str = None,
                    timestep_pre: int = 0, timestep_post: int = 0):
    """(pre, post) label records: pre_task relations on the pre-task state,
    post_task relations on the post-task state."""
    if task_family is not None and task_family != template.family:
        raise ValueError(f"template family {template.family!r} does not match task {task_family!r}")
    if err is None:
        pre = evaluate_views(pre_world, cameras, template.pre_task, stage="pre", timestep=timestep_pre)
        post = evaluate_views(post_world, cameras, template.post_task, stage="post", timestep=timestep_post)
    else:
        pre = noisy_label(pre_world, cameras, template.pre_task, err, stage="pre", timestep=timestep_pre)
        post = noisy_label(post_world, cameras, template.post_task, err, stage="post", timestep=timestep_post)
    return pre, post


# ---------------------------------------------------------------------------
# view-count study


def view_count_study(case_generator, relations, cameras, err: OracleErrorModel,
                     trials: int, ks=(1, 2, 3, 4, 5), seed: int = 0,
                     aggregation: str = "conjunction"):
    """Accuracy of noisy multi-view labels against 3D ground truth, per view
    count. The same scenes and the same flip draws are reused across k
    (common random numbers), so accuracy differences isolate the effect of
    adding views.

    case_generator(rng) -> (world, truth_bool).
    Returns rows [(k, correct, incorrect, accuracy)].
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    # per-view verdicts depend only on the view, so render each trial once;
    # a prefix of the flip draws then reproduces noisy_label for every k
    trial_rows = []
    for i in range(trials):
        rng = stream(seed, "study-case", i)
        world, truth = case_generator(rng)
        verdicts = []
        for cam, applicable in _queried_views(cameras, relations):
            view = render_view(world, cam)
            verdicts.append((cam.name, all(relation_holds(view, r) for r in applicable)))
        draws = stream(err.seed, "oracle-flip", i).random(len(verdicts))
        flipped = [(name, (not v) if draws[j] < err.p_flip else v)
                   for j, (name, v) in enumerate(verdicts)]
        trial_rows.append((flipped, bool(truth)))

    queried_names = [cam.name for cam, _ in _queried_views(cameras, relations)]
    rows = []
    for k in ks:
        prefix = {cam.name for cam in cameras[:k]} & set(queried_names)
        correct = 0
        for flipped, truth in trial_rows:
            in_k = [v for name, v in flipped if name in prefix]
            if aggregation == "conjunction":
                label = int(all(in_k))
            else:
                label = int(sum(in_k) * 2 > len(in_k)) if in_k else 1
            correct += int(label == int(truth))
        rows.append((k, correct, trials - correct, correct / trials))
    return rows


def study_rows_to_csv(rows) -> str:
    lines = ["k,correct,incorrect,accuracy"]
    for k, c, i, acc in rows:
        lines.append(f"{k},{c},{i},{acc:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# template I/O


def save_template(template: QueryTemplate, path) -> None:
    with open(path, "w") as f:
        json.dump(template.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_template(path) -> QueryTemplate:
    with open(path) as f:
        return QueryTemplate.from_json(json.load(f))

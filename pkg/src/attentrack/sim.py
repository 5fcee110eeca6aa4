"""Synthetic sequence generator for desk-scale verification.

Scenes are scripted targets with per-target appearance signatures moving
along piecewise-linear waypoint trajectories over a cell-resolution feature
grid. Rendering paints each covered cell with the target's signature,
nearer targets overwriting farther ones, so crossings produce genuine
feature-level occlusion. Detections are the ground-truth boxes with
Gaussian jitter, dropped at a miss rate (raised while a target is mostly
occluded), plus uniform false positives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import TargetState
from .engine import EngineConfig
from .features import FeatureBackend, FrameFeatureMap, write_feature_map
from .io import SequenceMeta, write_gt, write_results, write_seqinfo
from .rng import substream

__all__ = [
    "TargetScript",
    "SceneScript",
    "SyntheticSequence",
    "SyntheticBackend",
    "make_signatures",
    "render_frame",
    "generate_sequence",
    "write_sequence",
    "standard_suite",
    "suite_config",
    "throughput_script",
    "script_to_json",
    "script_from_json",
]


@dataclass(frozen=True)
class TargetScript:
    signature: np.ndarray          # (C,) appearance signature
    waypoints: tuple               # ((frame, x, y), ...) ascending frames
    width: float
    height: float
    birth: int                     # first frame, 1-based, inclusive
    death: int                     # last frame, inclusive
    depth: int                     # larger = nearer to the camera

    def center_at(self, frame: int) -> tuple[float, float] | None:
        if not (self.birth <= frame <= self.death):
            return None
        pts = self.waypoints
        if frame <= pts[0][0]:
            return pts[0][1], pts[0][2]
        if frame >= pts[-1][0]:
            return pts[-1][1], pts[-1][2]
        for (f0, x0, y0), (f1, x1, y1) in zip(pts, pts[1:]):
            if f0 <= frame <= f1:
                u = (frame - f0) / (f1 - f0)
                return x0 + u * (x1 - x0), y0 + u * (y1 - y0)
        return None

    def box_at(self, frame: int) -> TargetState | None:
        c = self.center_at(frame)
        if c is None:
            return None
        return TargetState(c[0], c[1], self.width, self.height)


@dataclass(frozen=True)
class SceneScript:
    name: str
    frame_width: int               # grid columns (cells)
    frame_height: int              # grid rows
    n_frames: int
    channels: int
    targets: tuple
    det_sigma: float = 0.0         # detection center/size jitter, cells
    score_sigma: float = 0.0       # detection confidence noise
    miss_rate: float = 0.0
    fp_rate: float = 0.0           # expected false positives per frame
    occ_miss_rate: float = 0.0     # miss probability when mostly occluded
    occ_visibility_min: float = 0.3
    bg_noise: float = 0.02
    frame_rate: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for k, ts in enumerate(self.targets):
            hw, hh = ts.width / 2.0, ts.height / 2.0
            for (f, x, y) in ts.waypoints:
                if not (hw <= x <= self.frame_width - hw and hh <= y <= self.frame_height - hh):
                    raise ValueError(
                        f"{self.name}: target {k} waypoint ({f},{x},{y}) puts its box "
                        f"outside the {self.frame_width}x{self.frame_height} frame")
        depths = [ts.depth for ts in self.targets]
        if len(set(depths)) != len(depths):
            raise ValueError(f"{self.name}: depth order must be total")


def make_signatures(rng: np.random.Generator, n: int, channels: int,
                    max_cos: float = 0.5) -> list[np.ndarray]:
    """Random unit vectors with pairwise |cosine| below max_cos."""
    sigs: list[np.ndarray] = []
    for _ in range(n):
        for _ in range(1000):
            v = rng.normal(size=channels)
            v /= np.linalg.norm(v)
            if all(abs(float(v @ s)) < max_cos for s in sigs):
                sigs.append(v)
                break
        else:
            raise RuntimeError("could not sample a sufficiently distinct signature")
    return sigs


def _cell_range(lo: float, hi: float, n: int) -> range:
    """Grid indices whose cell centers fall inside [lo, hi)."""
    first = int(np.ceil(lo - 0.5))
    last = int(np.floor(hi - 0.5))
    return range(max(first, 0), min(last, n - 1) + 1)


def render_frame(script: SceneScript, frame: int) -> np.ndarray:
    """Pure function of (script, frame): background noise plus signatures."""
    rng = np.random.default_rng([script.seed & 0xFFFFFFFF, 0x5EED, frame])
    grid = rng.normal(0.0, script.bg_noise,
                      size=(script.frame_height, script.frame_width, script.channels))
    for ts in sorted(script.targets, key=lambda t: t.depth):
        box = ts.box_at(frame)
        if box is None:
            continue
        rows = _cell_range(box.y - box.h / 2.0, box.y + box.h / 2.0, script.frame_height)
        cols = _cell_range(box.x - box.w / 2.0, box.x + box.w / 2.0, script.frame_width)
        for r in rows:
            grid[r, cols.start:cols.stop] = ts.signature
    return grid


def visible_fraction(script: SceneScript, idx: int, frame: int) -> float:
    """Fraction of the target's covered cells not overwritten by nearer targets."""
    ts = script.targets[idx]
    box = ts.box_at(frame)
    if box is None:
        return 0.0
    rows = _cell_range(box.y - box.h / 2.0, box.y + box.h / 2.0, script.frame_height)
    cols = _cell_range(box.x - box.w / 2.0, box.x + box.w / 2.0, script.frame_width)
    total = len(rows) * len(cols)
    if total == 0:
        return 0.0
    covered = np.zeros((len(rows), len(cols)), dtype=bool)
    for other in script.targets:
        if other.depth <= ts.depth:
            continue
        ob = other.box_at(frame)
        if ob is None:
            continue
        orows = _cell_range(ob.y - ob.h / 2.0, ob.y + ob.h / 2.0, script.frame_height)
        ocols = _cell_range(ob.x - ob.w / 2.0, ob.x + ob.w / 2.0, script.frame_width)
        for ri, r in enumerate(rows):
            if r in orows:
                for ci, c in enumerate(cols):
                    if c in ocols:
                        covered[ri, ci] = True
    return 1.0 - covered.sum() / total


@dataclass
class SyntheticSequence:
    script: SceneScript
    gt: dict                        # frame -> [(id, TargetState, conf)]
    det: dict                       # frame -> [(-1, TargetState, score)]
    meta: SequenceMeta

    def frame_map(self, frame: int) -> np.ndarray:
        return render_frame(self.script, frame)


class SyntheticBackend(FeatureBackend):
    """Feature backend rendering script frames on demand (stride-1 cells)."""

    def __init__(self, script: SceneScript):
        super().__init__()
        self.script = script
        self.channels = script.channels

    def _compute(self, frame_index: int) -> FrameFeatureMap:
        return FrameFeatureMap(render_frame(self.script, int(frame_index)), stride=1.0)


def generate_sequence(script: SceneScript) -> SyntheticSequence:
    rng = substream(script.seed, f"detections:{script.name}")
    gt: dict = {}
    det: dict = {}
    sizes = [(ts.width, ts.height) for ts in script.targets]
    for frame in range(1, script.n_frames + 1):
        gt_rows = []
        det_rows = []
        for idx, ts in enumerate(script.targets):
            box = ts.box_at(frame)
            if box is None:
                continue
            gt_rows.append((idx + 1, box, 1.0))
            vis = visible_fraction(script, idx, frame)
            p_miss = script.miss_rate
            if vis < script.occ_visibility_min:
                p_miss = max(p_miss, script.occ_miss_rate)
            if rng.uniform() < p_miss:
                continue
            jx, jy, jw, jh = rng.normal(0.0, 1.0, size=4)
            j = TargetState(
                box.x + script.det_sigma * jx,
                box.y + script.det_sigma * jy,
                max(1.0, box.w + 0.5 * script.det_sigma * jw),
                max(1.0, box.h + 0.5 * script.det_sigma * jh),
            )
            score = float(np.clip(1.0 - abs(rng.normal(0.0, script.score_sigma)), 0.05, 1.0))
            det_rows.append((-1, j, score))
        n_fp = rng.poisson(script.fp_rate) if script.fp_rate > 0 else 0
        for _ in range(n_fp):
            w, h = sizes[int(rng.integers(len(sizes)))]
            w *= rng.uniform(0.7, 1.3)
            h *= rng.uniform(0.7, 1.3)
            fp = TargetState(rng.uniform(w / 2, script.frame_width - w / 2),
                             rng.uniform(h / 2, script.frame_height - h / 2),
                             w, h)
            det_rows.append((-1, fp, float(rng.uniform(0.05, 0.5))))
        if gt_rows:
            gt[frame] = gt_rows
        if det_rows:
            det[frame] = det_rows
    meta = SequenceMeta(name=script.name, frame_count=script.n_frames,
                        frame_rate=script.frame_rate, width=script.frame_width,
                        height=script.frame_height)
    return SyntheticSequence(script, gt, det, meta)


def write_sequence(seq: SyntheticSequence, out_dir) -> None:
    """Sequence directory: seqinfo.ini, gt/gt.txt, det/det.txt, feat/*.feat."""
    from pathlib import Path

    out = Path(out_dir)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    (out / "det").mkdir(parents=True, exist_ok=True)
    (out / "feat").mkdir(parents=True, exist_ok=True)
    write_seqinfo(seq.meta, out / "seqinfo.ini")
    write_gt(seq.gt, out / "gt" / "gt.txt")
    write_results(seq.det, out / "det" / "det.txt")
    for frame in range(1, seq.script.n_frames + 1):
        write_feature_map(out / "feat" / f"{frame:06d}.feat", seq.frame_map(frame))


# ---------------------------------------------------------------------------
# the fixed 20-sequence verification family
# ---------------------------------------------------------------------------

SUITE_CHANNELS = 8
SUITE_FRAME_W = 96
SUITE_FRAME_H = 72


def _crossing_pair(rng, sigs, frame_w, frame_h, n_frames, depth0):
    """Two targets sweeping horizontally through each other mid-sequence."""
    h = rng.uniform(15.0, 20.0)
    w = rng.uniform(8.0, 11.0)
    y = rng.uniform(h / 2 + 2, frame_h - h / 2 - 2)
    y2 = y + rng.uniform(-1.5, 1.5)
    y2 = float(np.clip(y2, h / 2 + 1, frame_h - h / 2 - 1))
    x_lo = w / 2 + 1
    x_hi = frame_w - w / 2 - 1
    a = TargetScript(signature=sigs[0],
                     waypoints=((1, x_lo, y), (n_frames, x_hi, y)),
                     width=w, height=h, birth=1, death=n_frames, depth=depth0)
    b = TargetScript(signature=sigs[1],
                     waypoints=((1, x_hi, y2), (n_frames, x_lo, y2)),
                     width=w, height=h, birth=1, death=n_frames, depth=depth0 + 1)
    return [a, b]


def _wanderer(rng, sig, frame_w, frame_h, n_frames, depth):
    w = rng.uniform(8.0, 11.0)
    h = rng.uniform(14.0, 20.0)
    margin_x, margin_y = w / 2 + 1, h / 2 + 1

    def pt():
        return (rng.uniform(margin_x, frame_w - margin_x),
                rng.uniform(margin_y, frame_h - margin_y))

    n_way = int(rng.integers(2, 4))
    frames = np.linspace(1, n_frames, n_way).astype(int)
    pts = tuple((int(f),) + pt() for f in frames)
    return TargetScript(signature=sig, waypoints=pts, width=w, height=h,
                        birth=1, death=n_frames, depth=depth)


def standard_suite(seed: int) -> list[SceneScript]:
    """Twenty fixed scripts: 2-6 targets, 100-300 frames, each containing at
    least one full crossing occlusion."""
    scripts = []
    target_counts = [2, 3, 4, 5, 6, 2, 3, 4, 5, 6, 2, 3, 4, 2, 3, 4, 5, 2, 3, 6]
    for k in range(20):
        rng = substream(seed, f"suite-{k}")
        n_targets = target_counts[k]
        n_frames = int(100 + (k % 5) * 25 + (40 if k == 19 else 0))
        sigs = make_signatures(rng, n_targets, SUITE_CHANNELS)
        targets = _crossing_pair(rng, sigs[:2], SUITE_FRAME_W, SUITE_FRAME_H,
                                 n_frames, depth0=1)
        for j in range(2, n_targets):
            targets.append(_wanderer(rng, sigs[j], SUITE_FRAME_W, SUITE_FRAME_H,
                                     n_frames, depth=j + 1))
        scripts.append(SceneScript(
            name=f"suite_{k:02d}",
            frame_width=SUITE_FRAME_W,
            frame_height=SUITE_FRAME_H,
            n_frames=n_frames,
            channels=SUITE_CHANNELS,
            targets=tuple(targets),
            det_sigma=0.25,
            score_sigma=0.06,
            miss_rate=0.12,
            fp_rate=0.2,
            occ_miss_rate=0.85,
            occ_visibility_min=0.35,
            bg_noise=0.05,
            frame_rate=10.0,
            seed=seed * 1000 + k,
        ))
    return scripts


def suite_config(**overrides) -> EngineConfig:
    """Engine configuration sized for the synthetic suite's cell-scale scenes."""
    base = dict(
        geom_width=7, geom_height=5, geom_channels=SUITE_CHANNELS,
        n_candidates=40, pos_count=4, neg_count=8,
        aug_jitter=8, aug_replace=2, bg_donors=3,
        iters_init=40, iters_online=2,
        lr_init=0.1, lr_online=0.005,
        history_cap=12, frame_rate=10.0,
        feature_backend="synthetic",
    )
    base.update(overrides)
    return EngineConfig(**base)


def script_to_json(script: SceneScript) -> str:
    d = {k: getattr(script, k) for k in (
        "name", "frame_width", "frame_height", "n_frames", "channels",
        "det_sigma", "score_sigma", "miss_rate", "fp_rate", "occ_miss_rate",
        "occ_visibility_min", "bg_noise", "frame_rate", "seed")}
    d["targets"] = [
        {"signature": [float(v) for v in ts.signature],
         "waypoints": [[int(f), float(x), float(y)] for f, x, y in ts.waypoints],
         "width": ts.width, "height": ts.height,
         "birth": ts.birth, "death": ts.death, "depth": ts.depth}
        for ts in script.targets
    ]
    return json.dumps(d, indent=2)


def script_from_json(text: str) -> SceneScript:
    d = json.loads(text)
    targets = tuple(
        TargetScript(
            signature=np.asarray(t["signature"], dtype=np.float64),
            waypoints=tuple((int(f), float(x), float(y)) for f, x, y in t["waypoints"]),
            width=float(t["width"]), height=float(t["height"]),
            birth=int(t["birth"]), death=int(t["death"]), depth=int(t["depth"]))
        for t in d.pop("targets")
    )
    return SceneScript(targets=targets, **d)


def throughput_script(seed: int, n_targets: int = 10, n_frames: int = 100) -> SceneScript:
    """A busy scene for the feature-sharing throughput comparison."""
    rng = substream(seed, "throughput")
    frame_w, frame_h = 120, 90
    sigs = make_signatures(rng, n_targets, SUITE_CHANNELS)
    targets = tuple(
        _wanderer(rng, sigs[j], frame_w, frame_h, n_frames, depth=j + 1)
        for j in range(n_targets)
    )
    return SceneScript(
        name="throughput",
        frame_width=frame_w, frame_height=frame_h, n_frames=n_frames,
        channels=SUITE_CHANNELS, targets=targets,
        det_sigma=0.2, score_sigma=0.05, miss_rate=0.05, fp_rate=0.0,
        occ_miss_rate=0.5, occ_visibility_min=0.3, bg_noise=0.05,
        frame_rate=10.0, seed=seed,
    )

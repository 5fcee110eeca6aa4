"""The per-frame tracking loop.

Each frame: (1) candidate states are sampled around the motion prediction
and merged with gated detections, (2) every track scores its candidates
with its own branch and keeps the argmax, refined against the nearest
detection, (3) visibility and temporal attention are computed at the
estimated states, (4) branches and motion models are updated, (5) object
management spawns, probates and terminates tracks, (6) tracked targets are
emitted.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import motion as motion_mod
from .branch import Branch
from .core import Detection, TargetState, TrackStatus, boxes_to_array, iou
from .features import FeatureBackend, FeatureGeometry, roi_pool_many
from .rng import substream

__all__ = ["EngineConfig", "ABLATION_PRESETS", "Track", "CandidateSet",
           "TrackOutput", "TrackerEngine"]

ABLATION_PRESETS = {
    "p1": dict(use_motion=False, use_spatial_attention=False, use_temporal_attention=False),
    "p2": dict(use_motion=True, use_spatial_attention=False, use_temporal_attention=False),
    "p3": dict(use_motion=True, use_spatial_attention=True, use_temporal_attention=False),
    "p4": dict(use_motion=True, use_spatial_attention=False, use_temporal_attention=True),
    "p5": dict(use_motion=True, use_spatial_attention=True, use_temporal_attention=True),
}


@dataclass(frozen=True)
class EngineConfig:
    # score and overlap thresholds
    p0: float = 0.7
    o0: float = 0.5
    alpha0: float = 0.3
    det_score_min: float = 0.25
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    new_track_cover_iou: float = 0.5
    # candidate sampling and training-sample counts
    n_candidates: int = 256
    pos_count: int = 8
    neg_count: int = 24
    aug_jitter: int = 32
    aug_replace: int = 4
    bg_donors: int = 4
    history_cap: int = 50
    # optimization
    lr_init: float = 0.1
    lr_online: float = 0.02
    iters_init: int = 50
    iters_online: int = 5
    # lifecycle timing; None derives from the frame rate
    frame_rate: float = 30.0
    t_init: int | None = None
    t_term: int | None = None
    t_gap: int | None = None
    # pooled feature geometry
    geom_width: int = 9
    geom_height: int = 21
    geom_channels: int = 64
    feature_backend: str = "precomputed"
    feature_stride: int = 4
    share_features: bool = True
    # component flags (ablation presets p1..p5 toggle these)
    use_motion: bool = True
    use_spatial_attention: bool = True
    use_temporal_attention: bool = True
    baseline_alpha: float = 0.5
    learn_temporal: bool = False
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("p0", "o0", "alpha0", "det_score_min", "pos_iou", "neg_iou",
                     "new_track_cover_iou", "baseline_alpha"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("n_candidates", "pos_count", "neg_count", "history_cap",
                     "iters_init", "iters_online"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")

    @property
    def geometry(self) -> FeatureGeometry:
        return FeatureGeometry(self.geom_width, self.geom_height, self.geom_channels)

    @property
    def t_init_frames(self) -> int:
        return self.t_init if self.t_init is not None else math.ceil(0.2 * self.frame_rate)

    @property
    def t_term_frames(self) -> int:
        return self.t_term if self.t_term is not None else math.ceil(2.0 * self.frame_rate)

    @property
    def t_gap_frames(self) -> int:
        return self.t_gap if self.t_gap is not None else math.ceil(0.3 * self.frame_rate)

    def with_ablation(self, preset: str) -> "EngineConfig":
        if preset not in ABLATION_PRESETS:
            raise ValueError(f"unknown ablation preset {preset!r}")
        return dataclasses.replace(self, **ABLATION_PRESETS[preset])

    def replace(self, **kwargs) -> "EngineConfig":
        return dataclasses.replace(self, **kwargs)


@dataclass
class Track:
    id: int
    state: TargetState
    status: TrackStatus
    branch: Branch
    motion: motion_mod.MotionState
    birth_frame: int
    last_score: float
    detected: bool = True
    last_alpha: float = 0.5


@dataclass
class CandidateSet:
    boxes: np.ndarray              # (K, 4) rows of [x, y, w, h]
    origins: list                  # "gaussian" | "predicted" | "detection"
    predicted: TargetState
    det_indices: list = field(default_factory=list)


@dataclass(frozen=True)
class TrackOutput:
    id: int
    state: TargetState
    score: float


class TrackerEngine:
    def __init__(self, config: EngineConfig, backend: FeatureBackend,
                 frame_size: tuple[float, float]):
        self.cfg = config
        self.backend = backend
        self.geom = config.geometry
        self.frame_w, self.frame_h = frame_size
        self.tracks: list[Track] = []
        self.next_id = 1
        self.frame_index = 0
        self._rng_cand = substream(config.seed, "candidate-sampling")
        self._rng_init = substream(config.seed, "init-jitter")
        self._rng_samp = substream(config.seed, "sample-collection")
        self._fmap = None
        self._frame_ref = None
        self._pool = (ThreadPoolExecutor(max_workers=config.threads)
                      if config.threads > 1 else None)

    # -- feature access -------------------------------------------------------

    def _pool_boxes(self, boxes: np.ndarray) -> np.ndarray:
        """ROI-pool boxes; in unshared mode the backbone reruns per box."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if self.cfg.share_features:
            return roi_pool_many(self._fmap, boxes, self.geom)
        h, w, c = self.geom.height, self.geom.width, self.geom.channels
        out = np.empty((len(boxes), h, w, c))
        for i in range(len(boxes)):
            fmap = self.backend.features(self._frame_ref)
            out[i] = roi_pool_many(fmap, boxes[i:i + 1], self.geom)[0]
        return out

    # -- spec operations -------------------------------------------------------

    def generate_candidates(self, track: Track, detections: list[Detection]) -> CandidateSet:
        """Gaussian samples around the prediction plus 3-sigma-gated detections."""
        cfg = self.cfg
        m = track.motion
        if cfg.use_motion:
            pred = motion_mod.predict(m, track.state)
        else:
            pred = track.state
            m.predicted_center = np.array([pred.x, pred.y])
        base = pred.as_array()
        sig = m.sigmas
        samples = self._rng_cand.normal(base, sig, size=(cfg.n_candidates, 4))
        samples[:, 2:] = np.maximum(samples[:, 2:], 1.0)
        rows = [samples, base[None, :]]
        origins = ["gaussian"] * cfg.n_candidates + ["predicted"]
        det_indices = []
        for k, det in enumerate(detections):
            delta = np.abs(det.state.as_array() - base)
            if np.all(delta < 3.0 * sig):
                rows.append(det.state.as_array()[None, :])
                origins.append("detection")
                det_indices.append(k)
        return CandidateSet(np.concatenate(rows), origins, pred, det_indices)

    def estimate_state(self, track: Track, cand: CandidateSet):
        """Score every candidate with the track's branch; argmax wins."""
        pooled = self._pool_boxes(cand.boxes)
        scores, _, _ = track.branch.forward(pooled, self.cfg.use_spatial_attention)
        best = int(np.argmax(scores))
        y = float(scores[best])
        b = cand.boxes[best]
        x_hat = TargetState(b[0], b[1], b[2], b[3])
        return x_hat, y, y >= self.cfg.p0

    def refine_state(self, x_hat: TargetState, detections: list[Detection]) -> TargetState:
        """Blend with the highest-overlap detection when the overlap beats o0."""
        if not detections:
            return x_hat
        overlaps = [iou(x_hat, d.state) for d in detections]
        k = int(np.argmax(overlaps))
        o = overlaps[k]
        if o > self.cfg.o0:
            d = detections[k].state.as_array()
            x = o * d + (1.0 - o) * x_hat.as_array()
            return TargetState(x[0], x[1], x[2], x[3])
        return x_hat

    def collect_samples(self, track: Track, x_t: TargetState):
        """Jittered positives (IoU >= pos_iou) and background negatives
        (IoU <= neg_iou) around the estimated state; negatives additionally
        include the estimated states of the other tracked targets."""
        cfg, rng = self.cfg, self._rng_samp
        pos = []
        for _ in range(cfg.pos_count):
            for _ in range(50):
                c = TargetState(
                    x_t.x + rng.uniform(-0.08, 0.08) * x_t.w,
                    x_t.y + rng.uniform(-0.08, 0.08) * x_t.h,
                    x_t.w * rng.uniform(0.95, 1.05),
                    x_t.h * rng.uniform(0.95, 1.05),
                )
                if iou(c, x_t) >= cfg.pos_iou:
                    pos.append(c)
                    break
            else:
                pos.append(x_t)
        neg = []
        for k in range(cfg.neg_count):
            placed = False
            for _ in range(50):
                if k % 2 == 0:
                    # hard negative ringing the estimated state
                    ang = rng.uniform(0.0, 2.0 * np.pi)
                    rad = rng.uniform(0.8, 2.5)
                    cx = x_t.x + rad * x_t.w * np.cos(ang)
                    cy = x_t.y + rad * x_t.h * np.sin(ang)
                else:
                    cx = rng.uniform(0.0, self.frame_w)
                    cy = rng.uniform(0.0, self.frame_h)
                c = TargetState(
                    cx, cy,
                    x_t.w * rng.uniform(0.8, 1.2),
                    x_t.h * rng.uniform(0.8, 1.2),
                )
                if (iou(c, x_t) <= cfg.neg_iou
                        and c.x + c.w * 0.25 > 0 and c.x - c.w * 0.25 < self.frame_w
                        and c.y + c.h * 0.25 > 0 and c.y - c.h * 0.25 < self.frame_h):
                    neg.append(c)
                    placed = True
                    break
            if not placed:
                # farthest corner; zero overlap for any desk-scale target
                cx = 0.0 if x_t.x > self.frame_w / 2 else self.frame_w
                cy = 0.0 if x_t.y > self.frame_h / 2 else self.frame_h
                neg.append(TargetState(cx, cy, x_t.w, x_t.h))
        for other in self.tracks:
            if other.id != track.id and other.status is TrackStatus.TRACKED:
                neg.append(other.state)
        return pos, neg

    # -- per-frame loop --------------------------------------------------------

    def step(self, frame, detections: list[Detection]) -> list[TrackOutput]:
        cfg = self.cfg
        self.frame_index += 1
        t = self.frame_index
        self._frame_ref = frame
        if cfg.share_features:
            self._fmap = self.backend.features(frame)

        # steps 1-2: candidates, estimation, refinement
        active = [tr for tr in self.tracks if tr.status is not TrackStatus.TERMINATED]
        cand_sets = [self.generate_candidates(tr, detections) for tr in active]
        if self._pool is not None and cfg.share_features:
            estimates = list(self._pool.map(
                lambda pair: self.estimate_state(pair[0], pair[1]),
                zip(active, cand_sets)))
        else:
            estimates = [self.estimate_state(tr, cs) for tr, cs in zip(active, cand_sets)]

        for tr, cs, (x_hat, y, tracked) in zip(active, cand_sets, estimates):
            tr.last_score = y
            if tracked:
                tr.state = self.refine_state(x_hat, detections)
                tr.status = TrackStatus.TRACKED
                tr.motion.untracked_streak = 0
            else:
                # coast along the prediction while untracked
                tr.state = cs.predicted
                tr.status = TrackStatus.UNTRACKED
                tr.motion.untracked_streak += 1
            if not (0.0 <= tr.state.x < self.frame_w and 0.0 <= tr.state.y < self.frame_h):
                tr.status = TrackStatus.TERMINATED

        live = [tr for tr in active if tr.status is not TrackStatus.TERMINATED]

        # step 3: visibility and temporal attention at the current states
        pooled_now = {}
        if live:
            stacked = self._pool_boxes(boxes_to_array([tr.state for tr in live]))
            for tr, phi in zip(live, stacked):
                pooled_now[tr.id] = phi
        for tr in live:
            overlaps = [iou(tr.state, o.state) for o in live if o.id != tr.id]
            o_max = max(overlaps) if overlaps else 0.0
            if cfg.use_temporal_attention:
                v = tr.branch.visibility(pooled_now[tr.id])
                ta = tr.branch.temporal_attention(float(v.mean()), o_max)
                tr.last_alpha = ta.alpha
            else:
                tr.last_alpha = cfg.baseline_alpha

        # step 4: branch and motion updates
        for tr in live:
            tracked = tr.status is TrackStatus.TRACKED
            pos_boxes, neg_boxes = self.collect_samples(tr, tr.state)
            if not tracked:
                pos_boxes = []
            pos = (self._pool_boxes(boxes_to_array(pos_boxes))
                   if pos_boxes else np.empty((0,) + self.geom_shape))
            neg = self._pool_boxes(boxes_to_array(neg_boxes))
            if len(pos) or len(tr.branch.history):
                tr.branch.update(pos, neg, tr.last_alpha, cfg.lr_online,
                                 cfg.iters_online, cfg.use_spatial_attention)
            if tracked and tr.last_alpha < cfg.alpha0:
                tr.branch.add_history(pooled_now[tr.id])
            if cfg.use_motion:
                if tracked:
                    motion_mod.update_velocity(
                        tr.motion, np.array([tr.state.x, tr.state.y]), t,
                        cfg.t_gap_frames, tr.last_alpha)
                motion_mod.update_variance(tr.motion, tr.state, tracked)

        # step 5: object management
        self.manage_objects(detections, pooled_now)

        # step 6: emit tracked targets
        out = [TrackOutput(tr.id, tr.state, tr.last_score)
               for tr in self.tracks if tr.status is TrackStatus.TRACKED]
        out.sort(key=lambda r: r.id)
        return out

    @property
    def geom_shape(self):
        return (self.geom.height, self.geom.width, self.geom.channels)

    def manage_objects(self, detections: list[Detection], pooled_now: dict) -> None:
        cfg = self.cfg
        t = self.frame_index

        # deaths: long untracked streak (center-exit already terminated in step)
        for tr in self.tracks:
            if tr.status is TrackStatus.UNTRACKED and tr.motion.untracked_streak > cfg.t_term_frames:
                tr.status = TrackStatus.TERMINATED

        # probation bookkeeping: was the track covered by a detection this frame?
        for tr in self.tracks:
            if tr.status is TrackStatus.TERMINATED:
                continue
            tr.detected = any(iou(tr.state, d.state) >= cfg.new_track_cover_iou
                              for d in detections)

        survivors = []
        for tr in self.tracks:
            if tr.status is TrackStatus.TERMINATED:
                continue
            age = t - tr.birth_frame
            if 0 < age < cfg.t_init_frames and (
                    tr.status is not TrackStatus.TRACKED or not tr.detected):
                continue  # discarded newborn
            survivors.append(tr)
        self.tracks = survivors

        # births from strong uncovered detections
        for det in detections:
            if det.score <= cfg.det_score_min:
                continue
            covered = any(iou(det.state, tr.state) >= cfg.new_track_cover_iou
                          for tr in self.tracks)
            if covered:
                continue
            self.tracks.append(self._spawn(det, pooled_now))

    def _spawn(self, det: Detection, pooled_now: dict) -> Track:
        cfg, rng = self.cfg, self._rng_init
        state = det.state
        phi0 = self._pool_boxes(state.as_array()[None, :])[0]
        donors = [pooled_now[tr.id] for tr in self.tracks if tr.id in pooled_now]
        bg_boxes = []
        for _ in range(cfg.bg_donors):
            for _ in range(50):
                c = TargetState(rng.uniform(0.0, self.frame_w),
                                rng.uniform(0.0, self.frame_h),
                                state.w, state.h)
                if iou(c, state) <= cfg.neg_iou:
                    bg_boxes.append(c)
                    break
        if bg_boxes:
            pooled_bg = self._pool_boxes(boxes_to_array(bg_boxes))
            donors.extend(pooled_bg)
        branch = Branch(self.geom, rng, history_cap=cfg.history_cap)
        branch.initialize(phi0, donors, rng, n_jitter=cfg.aug_jitter,
                          n_replace=cfg.aug_replace, iters=cfg.iters_init,
                          lr=cfg.lr_init, spatial_on=cfg.use_spatial_attention)
        m = motion_mod.MotionState.initial(state.h)
        m.history.append((self.frame_index, np.array([state.x, state.y])))
        track = Track(id=self.next_id, state=state, status=TrackStatus.TRACKED,
                      branch=branch, motion=m, birth_frame=self.frame_index,
                      last_score=det.score)
        self.next_id += 1
        return track

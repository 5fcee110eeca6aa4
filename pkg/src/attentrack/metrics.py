"""CLEAR MOT evaluation: MOTA/MOTP plus MT/ML/Frag trajectory quality.

Inputs are frame-indexed labeled boxes, ``{frame: [(id, [x, y, w, h]), ...]}``
in center+size convention. Matching carries over the previous frame's pairs
while they still overlap, then solves the remainder with the Hungarian
algorithm maximizing total IoU (matches below ``iou_min`` are rejected).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import iou_matrix

__all__ = ["TrackReport", "evaluate", "aggregate", "format_report", "report_kv"]


@dataclass
class TrackReport:
    mota: float
    motp: float
    fp: int
    fn: int
    ids: int
    frag: int
    mt_pct: float
    ml_pct: float
    gt_boxes: int
    gt_trajectories: int
    matches: int

    def counts(self) -> dict:
        return {"fp": self.fp, "fn": self.fn, "ids": self.ids, "frag": self.frag}


def _index_frames(data) -> dict:
    out = {}
    for frame, entries in data.items():
        seen = set()
        rows = []
        for label, box in entries:
            if label in seen:
                raise ValueError(f"duplicate id {label} in frame {frame}")
            seen.add(label)
            rows.append((label, np.asarray(box, dtype=np.float64)))
        out[int(frame)] = rows
    return out


def evaluate(gt: dict, hyp: dict, iou_min: float = 0.5) -> TrackReport:
    gt = _index_frames(gt)
    hyp = _index_frames(hyp)
    frames = sorted(set(gt) | set(hyp))

    fp = fn = ids = 0
    iou_sum = 0.0
    n_matches = 0
    gt_total = 0
    last_hyp: dict = {}      # gt id -> hyp id of the most recent match
    prev_pairs: dict = {}    # matches from the previous frame
    matched_frames: dict = {}
    span_frames: dict = {}
    frag: dict = {}
    in_gap: dict = {}        # gt id -> matched before and currently unmatched

    for frame in frames:
        gt_rows = gt.get(frame, [])
        hyp_rows = hyp.get(frame, [])
        gt_total += len(gt_rows)
        gt_ids = [g for g, _ in gt_rows]
        hyp_ids = [h for h, _ in hyp_rows]
        gboxes = np.array([b for _, b in gt_rows]).reshape(-1, 4)
        hboxes = np.array([b for _, b in hyp_rows]).reshape(-1, 4)
        ious = iou_matrix(gboxes, hboxes) if gt_rows and hyp_rows else np.zeros((len(gt_rows), len(hyp_rows)))

        pairs = {}
        free_g = set(range(len(gt_rows)))
        free_h = set(range(len(hyp_rows)))

        # carry over still-overlapping pairs, lower gt id first
        for g_id in sorted(prev_pairs):
            h_id = prev_pairs[g_id]
            if g_id in gt_ids and h_id in hyp_ids:
                gi, hi = gt_ids.index(g_id), hyp_ids.index(h_id)
                if gi in free_g and hi in free_h and ious[gi, hi] >= iou_min:
                    pairs[gi] = hi
                    free_g.discard(gi)
                    free_h.discard(hi)

        # Hungarian on the remainder, maximizing total IoU over valid pairs
        if free_g and free_h:
            gl, hl = sorted(free_g), sorted(free_h)
            sub = ious[np.ix_(gl, hl)]
            cost = np.where(sub >= iou_min, -sub, 1.0)
            ri, ci = linear_sum_assignment(cost)
            for r, c in zip(ri, ci):
                if sub[r, c] >= iou_min:
                    pairs[gl[r]] = hl[c]
                    free_g.discard(gl[r])
                    free_h.discard(hl[c])

        fp += len(free_h)
        fn += len(free_g)

        cur_pairs = {}
        matched_gt_ids = set()
        for gi, hi in pairs.items():
            g_id, h_id = gt_ids[gi], hyp_ids[hi]
            if g_id in last_hyp and last_hyp[g_id] != h_id:
                ids += 1
            last_hyp[g_id] = h_id
            cur_pairs[g_id] = h_id
            iou_sum += ious[gi, hi]
            n_matches += 1
            matched_gt_ids.add(g_id)

        for g_id in gt_ids:
            span_frames[g_id] = span_frames.get(g_id, 0) + 1
            if g_id in matched_gt_ids:
                matched_frames[g_id] = matched_frames.get(g_id, 0) + 1
                if in_gap.get(g_id):
                    frag[g_id] = frag.get(g_id, 0) + 1
                in_gap[g_id] = False
            elif g_id in last_hyp:
                in_gap[g_id] = True
        prev_pairs = cur_pairs

    n_traj = len(span_frames)
    mt = sum(1 for g in span_frames if matched_frames.get(g, 0) / span_frames[g] >= 0.8)
    ml = sum(1 for g in span_frames if matched_frames.get(g, 0) / span_frames[g] <= 0.2)
    return TrackReport(
        mota=1.0 - (fn + fp + ids) / max(gt_total, 1),
        motp=iou_sum / n_matches if n_matches else 0.0,
        fp=fp,
        fn=fn,
        ids=ids,
        frag=sum(frag.values()),
        mt_pct=100.0 * mt / n_traj if n_traj else 0.0,
        ml_pct=100.0 * ml / n_traj if n_traj else 0.0,
        gt_boxes=gt_total,
        gt_trajectories=n_traj,
        matches=n_matches,
    )


def aggregate(reports) -> TrackReport:
    """Pooled report: error counts summed, rates recomputed over the pool."""
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    ids = sum(r.ids for r in reports)
    frag = sum(r.frag for r in reports)
    gt_total = sum(r.gt_boxes for r in reports)
    n_matches = sum(r.matches for r in reports)
    n_traj = sum(r.gt_trajectories for r in reports)
    iou_sum = sum(r.motp * r.matches for r in reports)
    mt = sum(r.mt_pct * r.gt_trajectories / 100.0 for r in reports)
    ml = sum(r.ml_pct * r.gt_trajectories / 100.0 for r in reports)
    return TrackReport(
        mota=1.0 - (fn + fp + ids) / max(gt_total, 1),
        motp=iou_sum / n_matches if n_matches else 0.0,
        fp=fp, fn=fn, ids=ids, frag=frag,
        mt_pct=100.0 * mt / n_traj if n_traj else 0.0,
        ml_pct=100.0 * ml / n_traj if n_traj else 0.0,
        gt_boxes=gt_total, gt_trajectories=n_traj, matches=n_matches,
    )


def format_report(r: TrackReport, name: str = "") -> str:
    head = f"[{name}] " if name else ""
    return (
        f"{head}MOTA {r.mota:7.3f}  MOTP {r.motp:5.3f}  "
        f"FP {r.fp:5d}  FN {r.fn:5d}  IDS {r.ids:4d}  Frag {r.frag:4d}  "
        f"MT {r.mt_pct:5.1f}%  ML {r.ml_pct:5.1f}%"
    )


def report_kv(r: TrackReport) -> str:
    lines = [
        f"MOTA={r.mota:.6f}",
        f"MOTP={r.motp:.6f}",
        f"FP={r.fp}",
        f"FN={r.fn}",
        f"IDS={r.ids}",
        f"Frag={r.frag}",
        f"MT_pct={r.mt_pct:.3f}",
        f"ML_pct={r.ml_pct:.3f}",
        f"gt_boxes={r.gt_boxes}",
        f"gt_trajectories={r.gt_trajectories}",
    ]
    return "\n".join(lines) + "\n"

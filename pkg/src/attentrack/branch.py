"""One target's online-learned appearance branch.

A branch stacks three small sub-networks over the target's pooled feature
tensor: a visibility estimator (conv 3x7 -> 32ch -> ReLU -> FC -> sigmoid map),
a spatial attention head (locally-connected + spatial softmax over the
visibility map), and a binary classifier (conv 3x7 -> 5ch -> ReLU -> FC ->
sigmoid) applied to the attention-weighted features.  A scalar temporal
attention derived from mean visibility and inter-target overlap balances
current against historical positives in the online update loss.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import iou, TargetState
from .features import FeatureGeometry, replace_region
from . import nn

__all__ = ["Branch", "TemporalAttention", "build_augmented_set"]

VIS_CONV_CHANNELS = 32
CLS_CONV_CHANNELS = 5
KERNEL_H, KERNEL_W = 3, 7


@dataclass(frozen=True)
class TemporalAttention:
    """Occlusion indicator alpha = sigmoid(gamma*s + beta*o + b)."""

    alpha: float
    mean_visibility: float
    max_overlap: float


def _fan_in_std(fan_in: int) -> float:
    return 1.0 / np.sqrt(fan_in)


class Branch:
    """Per-target parameters plus the bounded historical positive store."""

    def __init__(self, geom: FeatureGeometry, rng: np.random.Generator,
                 history_cap: int = 50,
                 temporal_params: tuple[float, float, float] = (-1.0, 1.0, 0.0)):
        self.geom = geom
        h, w, c = geom.height, geom.width, geom.channels
        cells = h * w
        self.vis_conv = nn.Conv2D(KERNEL_H, KERNEL_W, c, VIS_CONV_CHANNELS, rng,
                                  std=_fan_in_std(KERNEL_H * KERNEL_W * c))
        self.vis_relu = nn.ReLU()
        self.vis_fc = nn.Dense(cells * VIS_CONV_CHANNELS, cells, rng,
                               std=_fan_in_std(cells * VIS_CONV_CHANNELS))
        self.vis_sig = nn.Sigmoid()
        # identity-centered so the initial attention follows the visibility map
        self.att_local = nn.LocallyConnected(h, w, rng, std=0.01)
        self.att_local.params["w"] += 1.0
        self.att_soft = nn.SpatialSoftmax()
        self.cls_conv = nn.Conv2D(KERNEL_H, KERNEL_W, c, CLS_CONV_CHANNELS, rng,
                                  std=_fan_in_std(KERNEL_H * KERNEL_W * c))
        self.cls_relu = nn.ReLU()
        self.cls_fc = nn.Dense(cells * CLS_CONV_CHANNELS, 1, rng,
                               std=_fan_in_std(cells * CLS_CONV_CHANNELS))
        self.cls_sig = nn.Sigmoid()
        # attention maps sum to 1, so attended features shrink by ~1/(H*W);
        # the classifier rescales its input by the cell count to compensate
        self._cls_scale = float(cells)
        self.gamma, self.beta, self.bias = temporal_params
        self.history: deque = deque(maxlen=history_cap)

    # -- sub-network forwards -------------------------------------------------

    @property
    def vis_layers(self):
        return [self.vis_conv, self.vis_fc]

    @property
    def cls_layers(self):
        return [self.cls_conv, self.cls_fc]

    @property
    def param_layers(self):
        return [self.vis_conv, self.vis_fc, self.att_local, self.cls_conv, self.cls_fc]

    def visibility_batch(self, phi: np.ndarray) -> np.ndarray:
        s = phi.shape[0]
        h, w = self.geom.height, self.geom.width
        z = self.vis_relu.forward(self.vis_conv.forward(phi))
        v = self.vis_sig.forward(self.vis_fc.forward(z))
        return v.reshape(s, h, w)

    def visibility(self, phi: np.ndarray) -> np.ndarray:
        """Visibility map in [0,1] for one pooled (H, W, C) tensor."""
        return self.visibility_batch(phi[None])[0]

    def spatial_attention(self, vis: np.ndarray) -> np.ndarray:
        """Attention map: locally-connected layer then spatial softmax."""
        return self.att_soft.forward(self.att_local.forward(vis))

    @staticmethod
    def attend(phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
        """Channel-wise Hadamard product of features with the attention map."""
        if phi.shape[:-1] != psi.shape:
            raise ValueError(f"attention shape {psi.shape} does not match {phi.shape}")
        return phi * psi[..., None]

    def classify_attended(self, phi_att: np.ndarray) -> float:
        """Classifier score for one already-attended (H, W, C) tensor."""
        z = self.cls_relu.forward(self.cls_conv.forward(phi_att[None] * self._cls_scale))
        return float(self.cls_sig.forward(self.cls_fc.forward(z))[0, 0])

    def forward(self, phi: np.ndarray, spatial_on: bool = True):
        """Full branch forward on a (S, H, W, C) batch.

        Returns (scores, visibility maps, attention maps). With spatial
        attention disabled the attention map is uniform.
        """
        s = phi.shape[0]
        h, w = self.geom.height, self.geom.width
        vis = self.visibility_batch(phi)
        if spatial_on:
            psi = self.att_soft.forward(self.att_local.forward(vis))
        else:
            psi = np.full((s, h, w), 1.0 / (h * w))
        phi_att = phi * psi[..., None]
        z = self.cls_relu.forward(self.cls_conv.forward(phi_att * self._cls_scale))
        p = self.cls_sig.forward(self.cls_fc.forward(z))[:, 0]
        return p, vis, psi

    def score(self, phi: np.ndarray, spatial_on: bool = True) -> float:
        return float(self.forward(phi[None], spatial_on)[0][0])

    def _backward(self, dp: np.ndarray, phi: np.ndarray, psi: np.ndarray,
                  spatial_on: bool, need_input: bool = False):
        """Backward through the last forward(); optionally returns d loss/d phi."""
        s = phi.shape[0]
        for layer in self.param_layers:
            layer.grads = {}
        dlogit = self.cls_sig.backward(dp[:, None])
        dz = self.cls_relu.backward(self.cls_fc.backward(dlogit))
        if not (spatial_on or need_input):
            self.cls_conv.backward(dz, need_input_grad=False)
            return None
        dphi_att = self.cls_conv.backward(dz) * self._cls_scale
        dphi = dphi_att * psi[..., None]
        if spatial_on:
            dpsi = (dphi_att * phi).sum(axis=3)
            dvis = self.att_local.backward(self.att_soft.backward(dpsi))
            dvlin = self.vis_sig.backward(dvis.reshape(s, -1))
            dz1 = self.vis_relu.backward(self.vis_fc.backward(dvlin))
            if need_input:
                dphi += self.vis_conv.backward(dz1)
            else:
                self.vis_conv.backward(dz1, need_input_grad=False)
        return dphi if need_input else None

    # -- temporal attention ----------------------------------------------------

    def temporal_attention(self, mean_vis: float, max_overlap: float) -> TemporalAttention:
        a = float(nn.sigmoid(self.gamma * mean_vis + self.beta * max_overlap + self.bias))
        return TemporalAttention(a, float(mean_vis), float(max_overlap))

    def add_history(self, phi: np.ndarray) -> None:
        self.history.append(np.array(phi, copy=True))

    # -- training ----------------------------------------------------------------

    def update_loss_parts(self, pos_t, neg, spatial_on: bool = True):
        """Mean cross-entropy of each loss term at the current parameters."""
        parts = {}
        if pos_t is not None and len(pos_t):
            p, _, _ = self.forward(np.asarray(pos_t), spatial_on)
            parts["pos_t"] = nn.cross_entropy(p, np.ones_like(p))
        if len(self.history):
            p, _, _ = self.forward(np.stack(list(self.history)), spatial_on)
            parts["pos_h"] = nn.cross_entropy(p, np.ones_like(p))
        if neg is not None and len(neg):
            p, _, _ = self.forward(np.asarray(neg), spatial_on)
            parts["neg"] = nn.cross_entropy(p, np.zeros_like(p))
        return parts

    def update_loss(self, pos_t, neg, alpha: float, spatial_on: bool = True) -> float:
        """Combined loss L = L_neg + (1-alpha) L_pos_current + alpha L_pos_history.

        Terms whose sample set is empty are dropped.
        """
        parts = self.update_loss_parts(pos_t, neg, spatial_on)
        loss = parts.get("neg", 0.0)
        if "pos_t" in parts:
            loss += (1.0 - alpha) * parts["pos_t"]
        if "pos_h" in parts:
            loss += alpha * parts["pos_h"]
        return loss

    def update(self, pos_t, neg, alpha: float, lr: float, iters: int,
               spatial_on: bool = True) -> float:
        """Jointly update all three sub-networks by SGD on the weighted loss.

        ``pos_t`` may be empty (target untracked); negatives are required.
        Returns the loss over the batch after the last step.
        """
        neg = np.asarray(neg, dtype=np.float64)
        if neg.ndim != 4 or len(neg) == 0:
            raise ValueError("online update requires a non-empty negative batch")
        pos_t = np.asarray(pos_t, dtype=np.float64) if pos_t is not None and len(pos_t) else None
        hist = np.stack(list(self.history)) if len(self.history) else None

        batches, targets, weights = [neg], [np.zeros(len(neg))], [np.full(len(neg), 1.0 / len(neg))]
        if pos_t is not None:
            batches.append(pos_t)
            targets.append(np.ones(len(pos_t)))
            weights.append(np.full(len(pos_t), (1.0 - alpha) / len(pos_t)))
        if hist is not None:
            batches.append(hist)
            targets.append(np.ones(len(hist)))
            weights.append(np.full(len(hist), alpha / len(hist)))
        x = np.concatenate(batches)
        t = np.concatenate(targets)
        w = np.concatenate(weights)

        loss = 0.0
        for _ in range(max(1, iters)):
            p, _, psi = self.forward(x, spatial_on)
            pc = np.clip(p, nn.CE_EPS, 1.0 - nn.CE_EPS)
            ce = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
            loss = float(np.dot(w, ce))
            dp = w * (-(t / pc) + (1.0 - t) / (1.0 - pc))
            self._backward(dp, x, psi, spatial_on)
            nn.sgd_step(self.param_layers, lr)
        return loss

    def initialize(self, phi0: np.ndarray, donors, rng: np.random.Generator,
                   n_jitter: int = 32, n_replace: int = 4, iters: int = 50,
                   lr: float = 1e-3, spatial_on: bool = True) -> None:
        """Fit a fresh branch from the initial pooled feature and donor tensors.

        Builds the augmented set (jittered copies plus donor-replaced
        variants with per-cell visibility ground truth), trains the
        visibility net with cross-entropy, then jointly trains all three
        sub-networks to separate the augmented positives from the donors.
        Seeds the history with the pristine initial sample.
        """
        donors = [np.asarray(d, dtype=np.float64) for d in donors]
        if not donors:
            raise ValueError("branch initialization requires at least one donor tensor")
        samples, vis_gt = build_augmented_set(phi0, donors, rng, self.geom,
                                              n_jitter=n_jitter, n_replace=n_replace)
        self._fit_visibility(samples, vis_gt, iters, lr)
        self._fit_classifier(samples, np.stack(donors), iters, lr, spatial_on)
        self.add_history(phi0)

    def _fit_visibility(self, samples, vis_gt, iters, lr):
        s = samples.shape[0]
        # per-sample (not per-cell) normalization so the visibility phase
        # trains at the same rate as the classifier phase
        scale = self.geom.cells
        for _ in range(max(1, iters)):
            v = self.visibility_batch(samples)
            dv = nn.cross_entropy_grad(v, vis_gt) * scale
            dvlin = self.vis_sig.backward(dv.reshape(s, -1))
            dz = self.vis_relu.backward(self.vis_fc.backward(dvlin))
            self.vis_conv.backward(dz, need_input_grad=False)
            nn.sgd_step(self.vis_layers, lr)

    def _fit_classifier(self, pos, neg, iters, lr, spatial_on):
        x = np.concatenate([pos, neg])
        t = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        w = np.concatenate([np.full(len(pos), 0.5 / len(pos)),
                            np.full(len(neg), 0.5 / len(neg))])
        for _ in range(max(1, iters)):
            p, _, psi = self.forward(x, spatial_on)
            pc = np.clip(p, nn.CE_EPS, 1.0 - nn.CE_EPS)
            dp = w * (-(t / pc) + (1.0 - t) / (1.0 - pc))
            self._backward(dp, x, psi, spatial_on)
            nn.sgd_step(self.param_layers, lr)

    def training_accuracy(self, pos, neg, spatial_on: bool = True) -> float:
        """Fraction of samples on the right side of the 0.5 threshold."""
        pp, _, _ = self.forward(np.asarray(pos), spatial_on)
        pn, _, _ = self.forward(np.asarray(neg), spatial_on)
        return float((np.sum(pp > 0.5) + np.sum(pn < 0.5)) / (len(pp) + len(pn)))

    # -- serialization ------------------------------------------------------------

    def param_items(self):
        named = {"vis_conv": self.vis_conv, "vis_fc": self.vis_fc,
                 "att_local": self.att_local, "cls_conv": self.cls_conv,
                 "cls_fc": self.cls_fc}
        out = {}
        for lname, layer in named.items():
            for pname, arr in layer.params.items():
                out[f"{lname}.{pname}"] = arr
        out["temporal"] = np.array([self.gamma, self.beta, self.bias])
        return out

    def load_param_items(self, items: dict) -> None:
        own = self.param_items()
        for key, arr in items.items():
            if key == "temporal":
                self.gamma, self.beta, self.bias = (float(v) for v in arr)
                continue
            if key not in own:
                raise KeyError(f"unknown branch parameter {key!r}")
            if own[key].shape != arr.shape:
                raise ValueError(f"{key}: shape {arr.shape} != {own[key].shape}")
            own[key][...] = arr


def _jitter_transform(rng: np.random.Generator, max_shift: float,
                      scale_lo: float, scale_hi: float, min_iou: float):
    """Unit-box jitter (dx, dy in box fractions, scale) with IoU >= min_iou."""
    for _ in range(100):
        dx = rng.uniform(-max_shift, max_shift)
        dy = rng.uniform(-max_shift, max_shift)
        s = rng.uniform(scale_lo, scale_hi)
        a = TargetState(0.5, 0.5, 1.0, 1.0)
        b = TargetState(0.5 + dx, 0.5 + dy, s, s)
        if iou(a, b) >= min_iou:
            return dx, dy, s
    return 0.0, 0.0, 1.0


def _remap_cells(phi0: np.ndarray, donor: np.ndarray, dx: float, dy: float, s: float):
    """Pooled tensor of a jittered box, approximated by cell remapping.

    Cells of the jittered sample that fall outside the original box take the
    donor's features and ground-truth visibility 0.
    """
    h, w, _ = phi0.shape
    out = np.empty_like(phi0)
    gt = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            # jittered box cell center in original-box cell coordinates
            u = (dx + 0.5 - s / 2.0) * w + (j + 0.5) * s
            v = (dy + 0.5 - s / 2.0) * h + (i + 0.5) * s
            si, sj = int(np.floor(v)), int(np.floor(u))
            if 0 <= si < h and 0 <= sj < w:
                out[i, j] = phi0[si, sj]
                gt[i, j] = 1.0
            else:
                out[i, j] = donor[i, j]
    return out, gt


def build_augmented_set(phi0: np.ndarray, donors, rng: np.random.Generator,
                        geom: FeatureGeometry, n_jitter: int = 32, n_replace: int = 4,
                        min_iou: float = 0.7, max_shift: float = 0.3,
                        scale_range: tuple[float, float] = (0.8, 1.25)):
    """Synthetic training set for visibility: samples and per-cell ground truth.

    The pristine sample carries an all-ones visibility target; jittered
    samples zero the cells that left the original box; donor-replaced strip
    variants (left/right/top/bottom, 20-50% of cells) zero the replaced
    region.
    """
    h, w = geom.height, geom.width
    donors = [np.asarray(d, dtype=np.float64) for d in donors]
    bases = [(np.asarray(phi0, dtype=np.float64), np.ones((h, w)))]
    for k in range(n_jitter):
        dx, dy, s = _jitter_transform(rng, max_shift, *scale_range, min_iou)
        donor = donors[int(rng.integers(len(donors)))]
        bases.append(_remap_cells(phi0, donor, dx, dy, s))

    samples = [b[0] for b in bases]
    targets = [b[1] for b in bases]
    sides = ("left", "right", "top", "bottom")
    for base, base_gt in bases:
        for k in range(n_replace):
            side = sides[int(rng.integers(4))]
            frac = rng.uniform(0.2, 0.5)
            if side in ("left", "right"):
                n = max(1, int(round(frac * w)))
                region = (0, h, 0, n) if side == "left" else (0, h, w - n, w)
            else:
                n = max(1, int(round(frac * h)))
                region = (0, n, 0, w) if side == "top" else (h - n, h, 0, w)
            donor = donors[int(rng.integers(len(donors)))]
            replaced, mask = replace_region(base, donor, region)
            samples.append(replaced)
            targets.append(base_gt * mask)
    return np.stack(samples), np.stack(targets)

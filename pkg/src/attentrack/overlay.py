"""Render tracking results onto frames as image files.

Image sequences (an ``img1`` directory) are drawn on directly; cell-resolution
feature sequences (a ``feat`` directory) are visualized as channel-norm
heatmaps scaled up for visibility. One PNG per frame.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

_PALETTE = [
    (230, 60, 60), (60, 160, 230), (70, 200, 90), (240, 180, 40),
    (180, 90, 220), (60, 210, 200), (240, 110, 180), (150, 150, 150),
]


def _id_color(tid: int):
    return _PALETTE[tid % len(_PALETTE)]


def render_overlays(seq_dir, results: dict, out_dir, frame_count: int,
                    scale: int = 8) -> int:
    """Write one annotated PNG per frame; returns the number written."""
    from PIL import Image, ImageDraw

    seq_dir, out_dir = Path(seq_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_dir = seq_dir / "img1"
    feat_dir = seq_dir / "feat"
    written = 0
    for frame in range(1, frame_count + 1):
        if img_dir.is_dir():
            matches = sorted(img_dir.glob(f"{frame:06d}.*"))
            if not matches:
                continue
            img = Image.open(matches[0]).convert("RGB")
            sc = 1.0
        elif feat_dir.is_dir():
            from .features import read_feature_map

            path = feat_dir / f"{frame:06d}.feat"
            if not path.exists():
                continue
            fmap = read_feature_map(path)
            heat = np.linalg.norm(fmap, axis=2)
            hi = heat.max()
            if hi > 0:
                heat = heat / hi
            gray = (heat * 255).astype(np.uint8)
            img = Image.fromarray(gray, mode="L").convert("RGB")
            img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
            sc = float(scale)
        else:
            raise FileNotFoundError(f"{seq_dir}: no img1/ or feat/ directory to render")

        draw = ImageDraw.Draw(img)
        for tid, state, _score in results.get(frame, []):
            left = (state.x - state.w / 2) * sc
            top = (state.y - state.h / 2) * sc
            right = (state.x + state.w / 2) * sc
            bottom = (state.y + state.h / 2) * sc
            color = _id_color(int(tid))
            draw.rectangle([left, top, right, bottom], outline=color, width=2)
            draw.text((left + 2, top + 2), str(int(tid)), fill=color)
        img.save(out_dir / f"{frame:06d}.png")
        written += 1
    return written

"""MOTChallenge-format files, sequence metadata, config files, checkpoints.

Result/detection rows are ``frame,id,bb_left,bb_top,bb_width,bb_height,
conf,x,y,z`` CSV; boxes convert between the files' top-left+size and the
engine's center+size at this boundary. All text I/O is UTF-8 with newline
line endings (carriage returns are tolerated on input).
"""

from __future__ import annotations

import configparser
import dataclasses
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Detection, TargetState
from .engine import EngineConfig

__all__ = [
    "SequenceMeta",
    "read_mot_boxes",
    "read_detections",
    "write_results",
    "write_gt",
    "read_seqinfo",
    "load_config",
    "config_to_text",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"ATCK"


@dataclass(frozen=True)
class SequenceMeta:
    name: str
    frame_count: int
    frame_rate: float
    width: int
    height: int

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError("frameRate must be positive")
        if self.width <= 0 or self.height <= 0 or self.frame_count <= 0:
            raise ValueError("sequence dimensions and length must be positive")


def _parse_rows(path):
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip().rstrip("\r")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 10:
                raise ValueError(f"{path}:{lineno}: expected 10 columns, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: unparsable number ({exc})") from None
            rows.append((lineno, vals))
    return rows


def _to_state(left, top, w, h) -> TargetState:
    return TargetState(left + w / 2.0, top + h / 2.0, w, h)


def read_mot_boxes(path) -> dict:
    """Generic MOT CSV: {frame: [(id, TargetState, conf), ...]}."""
    out: dict = {}
    for lineno, vals in _parse_rows(path):
        frame = int(vals[0])
        out.setdefault(frame, []).append((int(vals[1]), _to_state(*vals[2:6]), vals[6]))
    return out


def read_detections(path) -> dict:
    """Detections per frame with scores min-max normalized to [0, 1].

    A sequence whose raw scores are all equal normalizes to all-ones.
    """
    parsed = []
    for lineno, vals in _parse_rows(path):
        parsed.append((int(vals[0]), _to_state(*vals[2:6]), vals[6]))
    if not parsed:
        return {}
    scores = np.array([p[2] for p in parsed])
    lo, hi = scores.min(), scores.max()
    if hi > lo:
        norm = (scores - lo) / (hi - lo)
    else:
        norm = np.ones_like(scores)
    out: dict = {}
    for (frame, state, _), s in zip(parsed, norm):
        out.setdefault(frame, []).append(Detection(state, float(s)))
    return out


def _write_rows(rows_by_frame: dict, path, id_override=None) -> None:
    seen = set()
    lines = []
    for frame in sorted(rows_by_frame):
        entries = sorted(rows_by_frame[frame], key=lambda e: e[0])
        for tid, state, score in entries:
            key = (frame, tid)
            if tid >= 0:  # detection rows all carry id -1
                if key in seen:
                    raise ValueError(f"duplicate (frame, id) pair {key}")
                seen.add(key)
            left = state.x - state.w / 2.0
            top = state.y - state.h / 2.0
            out_id = id_override if id_override is not None else tid
            lines.append(
                f"{frame},{out_id},{left:.2f},{top:.2f},{state.w:.2f},{state.h:.2f},"
                f"{score:.2f},-1,-1,-1"
            )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines))
        if lines:
            f.write("\n")


def write_results(rows_by_frame: dict, path) -> None:
    """Rows {frame: [(id, TargetState, score), ...]}, frame-major, id-ascending."""
    _write_rows(rows_by_frame, path)


def write_gt(rows_by_frame: dict, path) -> None:
    """Ground-truth file: same layout, confidence column fixed to 1."""
    rows = {f: [(tid, s, 1.0) for tid, s, _ in entries]
            for f, entries in rows_by_frame.items()}
    _write_rows(rows, path)


def read_seqinfo(path) -> SequenceMeta:
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as exc:
        raise ValueError(f"{path}: malformed seqinfo ({exc})") from None
    if not parser.has_section("Sequence"):
        raise ValueError(f"{path}: missing [Sequence] section")
    sec = parser["Sequence"]
    try:
        return SequenceMeta(
            name=sec.get("name", Path(path).parent.name),
            frame_count=sec.getint("seqLength"),
            frame_rate=sec.getfloat("frameRate"),
            width=sec.getint("imWidth"),
            height=sec.getint("imHeight"),
        )
    except (TypeError, ValueError) as exc:
        missing = [k for k in ("seqLength", "frameRate", "imWidth", "imHeight") if k not in sec]
        if missing:
            raise ValueError(f"{path}: missing required keys {missing}") from None
        raise ValueError(f"{path}: bad seqinfo value ({exc})") from None


def write_seqinfo(meta: SequenceMeta, path) -> None:
    text = (
        "[Sequence]\n"
        f"name={meta.name}\n"
        f"frameRate={meta.frame_rate:g}\n"
        f"seqLength={meta.frame_count}\n"
        f"imWidth={meta.width}\n"
        f"imHeight={meta.height}\n"
    )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


# ---------------------------------------------------------------------------
# engine config files: flat "key = value" lines
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(EngineConfig)}


def _coerce(name: str, text: str):
    field = _CONFIG_FIELDS[name]
    text = text.strip()
    if field.type in ("bool",):
        return text.lower() in ("1", "true", "yes", "on")
    if text.lower() in ("none", ""):
        return None
    if field.type in ("int", "int | None"):
        return int(text)
    return float(text)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip().rstrip("\r")
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_FIELDS:
            warnings.warn(f"{source}:{lineno}: unknown config key {key!r}")
            continue
        values[key] = _coerce(key, val)
    return values


def load_config(path=None, **overrides) -> EngineConfig:
    """Engine config from a flat key=value file; absent file means defaults.

    Unknown keys warn and are ignored; missing keys keep their defaults.
    """
    values: dict = {}
    if path is not None and Path(path).exists():
        values = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))
    values.update(overrides)
    return EngineConfig(**values)


def config_to_text(cfg: EngineConfig) -> str:
    lines = []
    for f in dataclasses.fields(EngineConfig):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoints: config text plus per-track branch parameters, each parameter
# stored in the binary tensor format used for precomputed features
# ---------------------------------------------------------------------------

def _write_block(f, data: bytes) -> None:
    f.write(struct.pack("<i", len(data)))
    f.write(data)


def _read_block(f) -> bytes:
    (n,) = struct.unpack("<i", f.read(4))
    return f.read(n)


def _tensor_bytes(arr: np.ndarray) -> bytes:
    from .features import FEAT_MAGIC

    flat = np.ascontiguousarray(arr, dtype="<f4").reshape(1, 1, -1)
    header = struct.pack("<4i", FEAT_MAGIC, flat.shape[2], 1, 1)
    return header + flat.tobytes()


def _tensor_from_bytes(data: bytes, shape) -> np.ndarray:
    from .features import FEAT_MAGIC

    magic, w, h, c = struct.unpack("<4i", data[:16])
    if magic != FEAT_MAGIC:
        raise ValueError("bad tensor magic in checkpoint")
    flat = np.frombuffer(data[16:], dtype="<f4").astype(np.float64)
    return flat.reshape(shape)


def save_checkpoint(engine, path) -> None:
    from .core import TrackStatus

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<i", 1))
        _write_block(f, config_to_text(engine.cfg).encode())
        f.write(struct.pack("<ii", engine.frame_index, engine.next_id))
        live = [t for t in engine.tracks if t.status is not TrackStatus.TERMINATED]
        f.write(struct.pack("<i", len(live)))
        for tr in live:
            f.write(struct.pack("<iii", tr.id, tr.birth_frame,
                                tr.motion.untracked_streak))
            f.write(struct.pack("<B", 1 if tr.status is TrackStatus.TRACKED else 0))
            s = tr.state
            f.write(struct.pack("<8d", s.x, s.y, s.w, s.h,
                                tr.motion.velocity[0], tr.motion.velocity[1],
                                tr.motion.sigma_xy, tr.last_score))
            items = tr.branch.param_items()
            f.write(struct.pack("<i", len(items)))
            for name, arr in items.items():
                _write_block(f, name.encode())
                _write_block(f, ",".join(str(d) for d in arr.shape).encode())
                _write_block(f, _tensor_bytes(arr))


def load_checkpoint(path):
    """Returns (EngineConfig, frame_index, next_id, list of track snapshots).

    Each snapshot is a dict with id, birth_frame, streak, tracked, state,
    velocity, sigma_xy, last_score and the named branch parameter arrays.
    """
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (_version,) = struct.unpack("<i", f.read(4))
        cfg_text = _read_block(f).decode()
        frame_index, next_id = struct.unpack("<ii", f.read(8))
        (n_tracks,) = struct.unpack("<i", f.read(4))
        tracks = []
        for _ in range(n_tracks):
            tid, birth, streak = struct.unpack("<iii", f.read(12))
            (tracked,) = struct.unpack("<B", f.read(1))
            x, y, w, h, vx, vy, sigma_xy, score = struct.unpack("<8d", f.read(64))
            (n_params,) = struct.unpack("<i", f.read(4))
            params = {}
            for _ in range(n_params):
                name = _read_block(f).decode()
                shape = tuple(int(v) for v in _read_block(f).decode().split(",") if v)
                params[name] = _tensor_from_bytes(_read_block(f), shape)
            tracks.append(dict(id=tid, birth_frame=birth, streak=streak,
                               tracked=bool(tracked), state=(x, y, w, h),
                               velocity=(vx, vy), sigma_xy=sigma_xy,
                               last_score=score, params=params))

    cfg = EngineConfig(**parse_config_text(cfg_text, str(path)))
    return cfg, frame_index, next_id, tracks

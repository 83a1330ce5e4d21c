"""Motion clips: storage format, segmentation, DTW deduplication and features.

Clip files are UTF-8 JSON written in a canonical layout (sorted keys, one
frame per line, floats at 17 significant digits) so that write -> read ->
write reproduces the same bytes.  Each frame row is

    root_pos[3], root_quat_wxyz[4], q[12], (qd[12]), foot_contact[4]

with contacts stored as 0/1.  ``qd`` is present for every frame or none.
"""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

from .kinematics import Morphology, quat_conjugate, quat_multiply, quat_to_rotvec

FPS = 50
SOURCES = ("mocap", "video_gen", "artist", "teleop", "synthetic", "generated", "rollout", "retarget")
ANNOTATION_LAYERS = ("action_label", "scenario", "command")
FLAGS = ("raw", "synthetic")
FRAME_WIDTH = 23
FRAME_WIDTH_QD = 35
QUAT_TOL = 1e-6


class ClipFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationTriple:
    action_label: str = ""
    scenario: str = ""
    command: str = ""


@dataclass
class MotionClip:
    id: str
    root_pos: np.ndarray  # (T, 3)
    root_quat: np.ndarray  # (T, 4), w x y z
    q: np.ndarray  # (T, 12)
    contacts: np.ndarray  # (T, 4) bool
    annotations: AnnotationTriple = field(default_factory=AnnotationTriple)
    source: str = "synthetic"
    qd: np.ndarray | None = None
    flags: tuple[str, ...] = ()
    fps: int = FPS

    def __post_init__(self):
        self.root_pos = np.asarray(self.root_pos, dtype=float).reshape(-1, 3)
        self.root_quat = np.asarray(self.root_quat, dtype=float).reshape(-1, 4)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 12)
        self.contacts = np.asarray(self.contacts, dtype=bool).reshape(-1, 4)
        if self.qd is not None:
            self.qd = np.asarray(self.qd, dtype=float).reshape(-1, 12)
        self.flags = tuple(sorted(set(self.flags)))
        n = len(self.root_pos)
        lens = {len(self.root_quat), len(self.q), len(self.contacts)} | ({len(self.qd)} if self.qd is not None else set())
        if lens != {n}:
            raise ClipFormatError(f"clip {self.id!r}: per-frame arrays have different lengths")

    def __len__(self) -> int:
        return len(self.root_pos)

    @property
    def n_frames(self) -> int:
        return len(self.root_pos)

    def validate(self, morph: Morphology | None = None):
        if self.fps != FPS:
            raise ClipFormatError("fps must be 50")
        if self.n_frames < 1:
            raise ClipFormatError("clip must have at least one frame")
        if self.source not in SOURCES:
            raise ClipFormatError(f"unknown source tag {self.source!r}")
        for flag in self.flags:
            if flag not in FLAGS:
                raise ClipFormatError(f"unknown flag {flag!r}")
        arrays = [self.root_pos, self.root_quat, self.q] + ([self.qd] if self.qd is not None else [])
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ClipFormatError("clip contains non-finite values")
        norms = np.linalg.norm(self.root_quat, axis=1)
        bad = np.nonzero(np.abs(norms - 1.0) > QUAT_TOL)[0]
        if bad.size:
            raise ClipFormatError(f"frames[{bad[0]}]: quaternion norm {norms[bad[0]]:.9f} is not unit")
        a = self.annotations
        empty = [k for k in ANNOTATION_LAYERS if getattr(a, k) == ""]
        if empty and "synthetic" not in self.flags:
            raise ClipFormatError(f"annotation layer {empty[0]!r} is empty; only synthetic clips may omit text")
        if morph is not None and "raw" not in self.flags:
            lo = morph.lower - 1e-12
            hi = morph.upper + 1e-12
            viol = np.nonzero(np.any((self.q < lo) | (self.q > hi), axis=1))[0]
            if viol.size:
                raise ClipFormatError(f"frames[{viol[0]}]: joint angles outside limits (flag the clip 'raw')")

    def slice(self, start: int, end: int, clip_id: str | None = None) -> "MotionClip":
        return MotionClip(
            clip_id or f"{self.id}[{start}:{end}]",
            self.root_pos[start:end], self.root_quat[start:end], self.q[start:end],
            self.contacts[start:end], self.annotations, self.source,
            None if self.qd is None else self.qd[start:end], self.flags,
        )

    def joint_velocity(self) -> np.ndarray:
        """Finite-difference joint velocities, shape (T - 1, 12)."""
        return np.diff(self.q, axis=0) * self.fps


# -- serialization ------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % x


def clip_to_text(clip: MotionClip) -> str:
    clip.validate()
    rows = []
    for t in range(clip.n_frames):
        vals = [*clip.root_pos[t], *clip.root_quat[t], *clip.q[t]]
        if clip.qd is not None:
            vals.extend(clip.qd[t])
        row = ",".join(_fmt(v) for v in vals) + "," + ",".join("1" if c else "0" for c in clip.contacts[t])
        rows.append("    [" + row + "]")
    ann = clip.annotations
    ann_text = ",".join(f'"{k}":{json.dumps(getattr(ann, k), ensure_ascii=False)}' for k in sorted(ANNOTATION_LAYERS))
    parts = [
        '  "annotations": {' + ann_text + "}",
    ]
    if clip.flags:
        parts.append('  "flags": ' + json.dumps(list(clip.flags)))
    parts.append(f'  "fps": {clip.fps}')
    parts.append('  "frames": [\n' + ",\n".join(rows) + "\n  ]")
    parts.append('  "id": ' + json.dumps(clip.id, ensure_ascii=False))
    parts.append('  "source": ' + json.dumps(clip.source))
    return "{\n" + ",\n".join(parts) + "\n}\n"


def write_clip(clip: MotionClip, path):
    Path(path).write_text(clip_to_text(clip), encoding="utf-8")


def _frame_line(text: str, index: int) -> int | None:
    m = re.search(r'"frames"\s*:\s*\[', text)
    if m is None:
        return None
    return text.count("\n", 0, m.end()) + 2 + index


def clip_from_text(text: str, morph: Morphology | None = None) -> MotionClip:
    try:
        # parse integers as floats so "-0" keeps its sign through a round trip
        obj = json.loads(text, parse_int=float)
    except json.JSONDecodeError as e:
        raise ClipFormatError(f"line {e.lineno}: malformed JSON ({e.msg})") from None
    if not isinstance(obj, dict):
        raise ClipFormatError("top level must be an object")
    allowed = {"id", "source", "fps", "frames", "annotations", "flags"}
    unknown = set(obj) - allowed
    if unknown:
        raise ClipFormatError(f"unknown top-level key {sorted(unknown)[0]!r}")
    for key in ("id", "source", "fps", "frames", "annotations"):
        if key not in obj:
            raise ClipFormatError(f"missing top-level key {key!r}")
    if obj["fps"] != FPS:
        raise ClipFormatError("fps must be 50")
    ann = obj["annotations"]
    if not isinstance(ann, dict):
        raise ClipFormatError("annotations must be an object")
    for layer in ANNOTATION_LAYERS:
        if layer not in ann:
            raise ClipFormatError(f"missing annotation layer {layer!r}")
        if not isinstance(ann[layer], str):
            raise ClipFormatError(f"annotation layer {layer!r} must be a string")
    extra = set(ann) - set(ANNOTATION_LAYERS)
    if extra:
        raise ClipFormatError(f"unknown annotation layer {sorted(extra)[0]!r}")
    frames = obj["frames"]
    if not isinstance(frames, list) or not frames:
        raise ClipFormatError("frames must be a non-empty list")
    width = len(frames[0]) if isinstance(frames[0], list) else -1
    if width not in (FRAME_WIDTH, FRAME_WIDTH_QD):
        raise ClipFormatError(f"frames[0] (line {_frame_line(text, 0)}): expected {FRAME_WIDTH} or {FRAME_WIDTH_QD} values")
    for i, fr in enumerate(frames):
        if not isinstance(fr, list) or len(fr) != width:
            raise ClipFormatError(f"frames[{i}] (line {_frame_line(text, i)}): expected {width} values")
        for j, v in enumerate(fr):
            if not isinstance(v, float) or not math.isfinite(v):
                raise ClipFormatError(f"frames[{i}][{j}] (line {_frame_line(text, i)}): not a finite number")
    arr = np.array(frames, dtype=float)
    contacts = arr[:, -4:]
    if not np.all((contacts == 0.0) | (contacts == 1.0)):
        i = int(np.nonzero(~np.all((contacts == 0.0) | (contacts == 1.0), axis=1))[0][0])
        raise ClipFormatError(f"frames[{i}] (line {_frame_line(text, i)}): foot contacts must be 0 or 1")
    flags = obj.get("flags", [])
    if not isinstance(flags, list) or not all(isinstance(f, str) for f in flags):
        raise ClipFormatError("flags must be a list of strings")
    if not isinstance(obj["id"], str) or not isinstance(obj["source"], str):
        raise ClipFormatError("id and source must be strings")
    clip = MotionClip(
        id=obj["id"],
        root_pos=arr[:, 0:3],
        root_quat=arr[:, 3:7],
        q=arr[:, 7:19],
        qd=arr[:, 19:31] if width == FRAME_WIDTH_QD else None,
        contacts=contacts.astype(bool),
        annotations=AnnotationTriple(ann["action_label"], ann["scenario"], ann["command"]),
        source=obj["source"],
        flags=tuple(flags),
    )
    try:
        clip.validate(morph)
    except ClipFormatError as e:
        m = re.match(r"frames\[(\d+)\]", str(e))
        if m:
            raise ClipFormatError(f"{e} (line {_frame_line(text, int(m.group(1)))})") from None
        raise
    return clip


def read_clip(path, morph: Morphology | None = None) -> MotionClip:
    return clip_from_text(Path(path).read_text(encoding="utf-8"), morph)


def load_clips(paths: Iterable, morph: Morphology | None = None) -> list[MotionClip]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(read_clip(f, morph) for f in sorted(p.glob("*.json")))
        else:
            out.append(read_clip(p, morph))
    return out


# -- segmentation -------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Segment:
    clip_id: str
    start: int
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


MIN_CLIP_FRAMES = 25


def segment_clip(clip: MotionClip, window: int = 100, min_len: int = 2) -> list[Segment]:
    """Split at rising edges of the FL contact; fixed windows if fewer than 2 cycles.

    A contact at frame 0 counts as a rising edge.  Pieces shorter than
    ``min_len`` are merged into their neighbour so every segment has at least
    one velocity sample.
    """
    T = clip.n_frames
    if T < MIN_CLIP_FRAMES:
        raise ValueError(f"clip {clip.id!r} has {T} frames; segmentation needs at least {MIN_CLIP_FRAMES}")
    c = clip.contacts[:, 0]
    edges = [t for t in range(T) if c[t] and (t == 0 or not c[t - 1])]
    if len(edges) - 1 >= 2:
        bounds = sorted(set([0] + edges + [T]))
    else:
        bounds = list(range(0, T, window)) + [T]
    pieces = [[a, b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    merged: list[list[int]] = []
    for p in pieces:
        if merged and p[1] - p[0] < min_len:
            merged[-1][1] = p[1]
        elif merged and merged[-1][1] - merged[-1][0] < min_len:
            merged[-1][1] = p[1]
        else:
            merged.append(p)
    return [Segment(clip.id, a, b) for a, b in merged]


# -- dynamic time warping -----------------------------------------------------

@numba.njit(cache=True)
def _dtw_core(a, b):
    n, m = a.shape[0], b.shape[0]
    d = a.shape[1]
    cost = np.full((n + 1, m + 1), np.inf)
    length = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            s = 0.0
            for k in range(d):
                diff = a[i - 1, k] - b[j - 1, k]
                s += diff * diff
            local = math.sqrt(s)
            # lexicographic (cost, path length) minimum over the three predecessors
            bc = cost[i - 1, j - 1]
            bl = length[i - 1, j - 1]
            c2, l2 = cost[i - 1, j], length[i - 1, j]
            if c2 < bc or (c2 == bc and l2 < bl):
                bc, bl = c2, l2
            c3, l3 = cost[i, j - 1], length[i, j - 1]
            if c3 < bc or (c3 == bc and l3 < bl):
                bc, bl = c3, l3
            cost[i, j] = bc + local
            length[i, j] = bl + 1
    return cost[n, m], length[n, m]


def dtw_distance(a, b, normalize: bool = True) -> float:
    """DTW with Euclidean local cost; by default divided by the warping-path length.

    Among equal-cost paths the shortest is used, which keeps the normalized
    value symmetric in its arguments.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("DTW needs non-empty sequences")
    if a.shape[1] != b.shape[1]:
        raise ValueError("DTW sequences must have the same frame width")
    total, length = _dtw_core(np.ascontiguousarray(a), np.ascontiguousarray(b))
    return float(total / length) if normalize else float(total)


@numba.njit(cache=True)
def _pairwise(seqs_flat, offsets, width, threshold):
    n = offsets.shape[0] - 1
    pairs_i = []
    pairs_j = []
    for i in range(n):
        a = seqs_flat[offsets[i]:offsets[i + 1]].reshape(-1, width)
        for j in range(i + 1, n):
            b = seqs_flat[offsets[j]:offsets[j + 1]].reshape(-1, width)
            c, ln = _dtw_core(a, b)
            if c / ln < threshold:
                pairs_i.append(i)
                pairs_j.append(j)
    return pairs_i, pairs_j


def dtw_matrix(seqs: Sequence[np.ndarray]) -> np.ndarray:
    n = len(seqs)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = dtw_distance(seqs[i], seqs[j])
    return out


# -- deduplication ------------------------------------------------------------

@dataclass
class DedupReport:
    segments: list[Segment]
    clusters: list[list[Segment]]
    representatives: list[Segment]

    @property
    def unique_count(self) -> int:
        return len(self.clusters)

    def to_dict(self) -> dict:
        seg = lambda s: {"clip_id": s.clip_id, "start": s.start, "end": s.end}
        return {
            "unique_count": self.unique_count,
            "segment_count": len(self.segments),
            "clusters": [
                {"representative": seg(r), "members": [seg(s) for s in c]}
                for r, c in zip(self.representatives, self.clusters)
            ],
        }


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


# Mean per-step joint-velocity cost (rad/s).  Per-frame jitter of 1e-3 rad at
# 50 Hz alone costs about 0.35 between copies of the same segment, while
# unrelated gait segments sit several rad/s apart.
DEFAULT_DEDUP_THRESHOLD = 1.0


def dedup(clips: Sequence[MotionClip], threshold: float = DEFAULT_DEDUP_THRESHOLD, window: int = 100) -> DedupReport:
    """Merge segments whose normalized joint-velocity DTW distance is below ``threshold``."""
    if threshold < 0 or math.isnan(threshold):
        raise ValueError("dedup threshold must be non-negative")
    by_id = {}
    for c in clips:
        if c.id in by_id:
            raise ValueError(f"duplicate clip id {c.id!r}")
        by_id[c.id] = c
    segments = sorted(s for c in clips for s in segment_clip(c, window=window))
    vels = [np.ascontiguousarray(by_id[s.clip_id].q[s.start:s.end]) for s in segments]
    vels = [np.diff(v, axis=0) * FPS for v in vels]
    uf = _UnionFind(len(segments))
    if threshold > 0 and segments:
        offsets = np.cumsum([0] + [v.size for v in vels]).astype(np.int64)
        flat = np.concatenate([v.ravel() for v in vels])
        pi, pj = _pairwise(flat, offsets, 12, float(threshold))
        for i, j in zip(pi, pj):
            uf.union(i, j)
    groups: dict[int, list[Segment]] = {}
    for i, s in enumerate(segments):
        groups.setdefault(uf.find(i), []).append(s)
    clusters = [groups[k] for k in sorted(groups)]
    reps = [min(c, key=lambda s: (-s.length, s.clip_id, s.start)) for c in clusters]
    return DedupReport(segments, clusters, reps)


# -- features and projection --------------------------------------------------

FEATURE_NAMES = (
    [f"root_linvel_{s}_{a}" for s in ("mean", "std") for a in "xyz"]
    + [f"root_angvel_{s}_{a}" for s in ("mean", "std") for a in "xyz"]
    + [f"q{j}_{s}" for s in ("mean", "std") for j in range(12)]
    + [f"duty_{leg}" for leg in ("FL", "FR", "RL", "RR")]
)
FEATURE_DIM = 40


def root_angular_velocity(quat: np.ndarray, fps: float = FPS) -> np.ndarray:
    """Body-frame angular velocity between consecutive orientations, (T - 1, 3)."""
    rel = quat_multiply(quat_conjugate(quat[:-1]), quat[1:])
    return quat_to_rotvec(rel) * fps


def extract_features(clip: MotionClip) -> np.ndarray:
    if clip.n_frames < 2:
        raise ValueError("feature extraction needs at least 2 frames")
    lin = np.diff(clip.root_pos, axis=0) * clip.fps
    ang = root_angular_velocity(clip.root_quat, clip.fps)
    f = np.concatenate([
        lin.mean(axis=0), lin.std(axis=0),
        ang.mean(axis=0), ang.std(axis=0),
        clip.q.mean(axis=0), clip.q.std(axis=0),
        clip.contacts.mean(axis=0),
    ])
    assert f.shape == (FEATURE_DIM,)
    return f


def pca_project(features, n_components: int = 2) -> np.ndarray:
    """Project onto the leading principal axes (covariance eigendecomposition).

    Components are ordered by descending eigenvalue (stable in index for
    ties) and each axis is signed so its largest-magnitude loading is positive.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("PCA projection needs at least 3 feature vectors")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = sorted(range(len(evals)), key=lambda i: (-evals[i], i))[:n_components]
    axes = evecs[:, order]
    for k in range(axes.shape[1]):
        col = axes[:, k]
        lead = int(np.argmax(np.abs(col)))
        if col[lead] < 0:
            axes[:, k] = -col
    return Xc @ axes


def write_features_csv(path, ids: Sequence[str], feats: np.ndarray, coords: np.ndarray | None = None):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        header = ["clip_id"] + FEATURE_NAMES + (["pc1", "pc2"] if coords is not None else [])
        w.writerow(header)
        for i, cid in enumerate(ids):
            row = [cid] + [_fmt(v) for v in feats[i]]
            if coords is not None:
                row += [_fmt(v) for v in coords[i]]
            w.writerow(row)

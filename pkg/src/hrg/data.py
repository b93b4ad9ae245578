"""Feature ingestion, synthetic temporal-pattern data and episode sampling."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"HRG1"
FEATURE_VERSION = 1
SPLITS = ("train", "val", "test")


class IngestionError(ValueError):
    """A feature file or index record could not be loaded."""


class SamplingError(ValueError):
    """A split cannot supply the requested episode."""


@dataclass(frozen=True)
class FeatureSequence:
    video_id: str
    class_id: int
    frames: np.ndarray  # (T, C) float64


@dataclass
class Episode:
    way: int
    shot: int
    query_count: int
    support: list
    query: list
    support_labels: np.ndarray
    query_labels: np.ndarray
    classes: list = field(default_factory=list)

    def support_array(self) -> np.ndarray:
        return np.stack([s.frames for s in self.support])

    def query_array(self) -> np.ndarray:
        return np.stack([q.frames for q in self.query])


@dataclass
class SplitDataset:
    splits: dict          # split name -> sorted list of class ids
    sequences: dict       # class id -> list of FeatureSequence sorted by video_id
    T: int
    C: int
    templates: dict = field(default=None, repr=False, compare=False)

    def classes(self, split: str) -> list:
        return self.splits[split]

    def all_sequences(self) -> list:
        return [s for cid in sorted(self.sequences) for s in self.sequences[cid]]


# binary feature files ---------------------------------------------------------

def write_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError("frames must be a T x C matrix")
    T, C = frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, T, C))
        fh.write(frames.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise IngestionError(f"{path}: bad magic")
    version, T, C = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise IngestionError(f"{path}: unsupported version {version}")
    if T == 0 or C == 0:
        raise IngestionError(f"{path}: empty header T={T} C={C}")
    body = raw[16:]
    if len(body) != 4 * T * C:
        raise IngestionError(f"{path}: expected {T * C} float32 values, found {len(body) // 4}")
    frames = np.frombuffer(body, dtype="<f4").reshape(T, C).astype(np.float64)
    if not np.all(np.isfinite(frames)):
        raise IngestionError(f"{path}: non-finite values")
    return frames


def load_dataset(index_path) -> SplitDataset:
    """Load a JSON-lines index of feature files into a split dataset."""
    index_path = Path(index_path)
    if not index_path.exists():
        raise IngestionError(f"index file not found: {index_path}")
    root = index_path.parent
    splits = {s: set() for s in SPLITS}
    sequences: dict = {}
    shape = None
    for lineno, line in enumerate(index_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            vid, cid, split, rel = rec["video_id"], int(rec["class_id"]), rec["split"], rec["path"]
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestionError(f"{index_path}:{lineno}: malformed record ({exc})") from None
        if split not in splits:
            raise IngestionError(f"record {vid}: unknown split {split!r}")
        path = Path(rel) if Path(rel).is_absolute() else root / rel
        if not path.exists():
            raise IngestionError(f"record {vid}: feature file not found: {path}")
        try:
            frames = read_features(path)
        except IngestionError as exc:
            raise IngestionError(f"record {vid}: {exc}") from None
        if shape is None:
            shape = frames.shape
        elif frames.shape != shape:
            raise IngestionError(
                f"record {vid}: inconsistent shape T={frames.shape[0]} C={frames.shape[1]}, "
                f"expected T={shape[0]} C={shape[1]}")
        for other, members in splits.items():
            if other != split and cid in members:
                raise IngestionError(f"record {vid}: class {cid} appears in splits {other} and {split}")
        splits[split].add(cid)
        sequences.setdefault(cid, []).append(FeatureSequence(vid, cid, frames))
    if shape is None:
        raise IngestionError(f"{index_path}: no records")
    for cid in sequences:
        sequences[cid].sort(key=lambda s: s.video_id)
    return SplitDataset({s: sorted(v) for s, v in splits.items()}, sequences, *shape)


def save_dataset(dataset: SplitDataset, out_dir) -> Path:
    """Write ``dataset`` as HRG1 feature files plus ``index.jsonl``."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    split_of = {cid: s for s, cids in dataset.splits.items() for cid in cids}
    lines = []
    for seq in dataset.all_sequences():
        rel = f"features/{seq.video_id}.hrg"
        write_features(out_dir / rel, seq.frames)
        lines.append(json.dumps({"video_id": seq.video_id, "class_id": seq.class_id,
                                 "split": split_of[seq.class_id], "path": rel}))
    index = out_dir / "index.jsonl"
    index.write_text("\n".join(lines) + "\n")
    return index


# synthetic data ---------------------------------------------------------------

def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def _smooth_path(rng, T, dim, n_freq):
    # constant offset plus a few random Fourier components
    t = np.linspace(0.0, 1.0, T)
    path = np.tile(rng.standard_normal(dim), (T, 1))
    for _ in range(n_freq):
        freq = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0.0, 2 * np.pi)
        path = path + np.sin(2 * np.pi * freq * t + phase)[:, None] * (1.5 * rng.standard_normal(dim))
    return path


def _warp(rng, T, strength):
    """Random monotone map of [0, 1] onto itself, ``strength`` in [0, 1]."""
    t = np.linspace(0.0, 1.0, T)
    if strength <= 0:
        return t
    s = rng.uniform(0.0, strength)
    a = rng.uniform(-1.0, 1.0)
    # t + s*a*t*(1-t) is monotone for |s*a| <= 1
    return np.clip(t + s * a * t * (1.0 - t), 0.0, 1.0)


def resample(template: np.ndarray, times: np.ndarray) -> np.ndarray:
    T = template.shape[0]
    grid = np.linspace(0.0, 1.0, T)
    return np.stack([np.interp(times, grid, template[:, c]) for c in range(template.shape[1])], axis=1)


def gen_synthetic(num_classes: int = 15, videos_per_class: int = 20, T: int = 8, C: int = 32,
                  noise_sigma: float = 0.3, warp_strength: float = 0.25, seed: int = 42,
                  split_sizes=None, n_freq: int = 3, latent_dim: int | None = 8,
                  shared_weight: float = 0.6) -> SplitDataset:
    """Generate classes whose videos are warped, noisy copies of a smooth template.

    Templates are smooth paths in a ``latent_dim`` subspace shared by all
    classes (capped at ``C``, the full width when ``None``), blended with a path common to every
    class by ``shared_weight`` in [0, 1). ``split_sizes`` is ``(train, val,
    test)`` class counts; by default a third of the classes (rounded down) form
    the test split and the rest train.
    """
    if num_classes < 1 or videos_per_class < 1 or C < 2 or T < 2:
        raise ValueError("gen_synthetic needs num_classes>=1, videos_per_class>=1, C>=2, T>=2")
    if noise_sigma < 0 or not 0 <= warp_strength <= 1:
        raise ValueError("noise_sigma must be >= 0 and warp_strength in [0, 1]")
    if split_sizes is None:
        n_test = num_classes // 3
        split_sizes = (num_classes - n_test, 0, n_test)
    split_sizes = tuple(int(s) for s in split_sizes)
    if len(split_sizes) != 3 or sum(split_sizes) != num_classes or min(split_sizes) < 0:
        raise ValueError(f"split_sizes {split_sizes} must be three counts summing to {num_classes}")

    latent_dim = C if latent_dim is None else min(int(latent_dim), C)
    if not 1 <= latent_dim <= C or not 0.0 <= shared_weight < 1.0:
        raise ValueError("latent_dim must lie in [1, C] and shared_weight in [0, 1)")
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.standard_normal((C, latent_dim)))[0] if latent_dim < C else np.eye(C)
    shared = _unit_rows(_smooth_path(rng, T, latent_dim, n_freq))
    templates = {}
    sequences = {}
    for cid in range(num_classes):
        own = _unit_rows(_smooth_path(rng, T, latent_dim, n_freq))
        templates[cid] = _unit_rows((shared_weight * shared + (1.0 - shared_weight) * own) @ basis.T)
        videos = []
        for v in range(videos_per_class):
            frames = resample(templates[cid], _warp(rng, T, warp_strength))
            frames = _unit_rows(frames) + noise_sigma * rng.standard_normal((T, C))
            videos.append(FeatureSequence(f"c{cid:03d}_v{v:03d}", cid, _unit_rows(frames)))
        sequences[cid] = videos
    bounds = np.cumsum((0,) + split_sizes)
    splits = {name: list(range(bounds[i], bounds[i + 1])) for i, name in enumerate(SPLITS)}
    return SplitDataset(splits, sequences, T, C, templates)


# episodes ---------------------------------------------------------------------

def sample_episode(dataset: SplitDataset, split: str, N: int, K: int, L: int, rng) -> Episode:
    """Sample an N-way K-shot episode with ``L`` queries dealt round-robin over classes.

    Support is class-major and episode labels are the rank of each class in
    the sampled order.
    """
    if N < 1 or K < 1 or L < 0:
        raise SamplingError("need N >= 1, K >= 1, L >= 0")
    classes = dataset.splits[split]
    if len(classes) < N:
        raise SamplingError(f"split {split!r} has {len(classes)} classes, episode needs {N}")
    q_per_class = [L // N + (1 if i < L % N else 0) for i in range(N)]
    need = K + math.ceil(L / N)
    for cid in classes:
        if len(dataset.sequences[cid]) < need:
            raise SamplingError(f"class {cid} has {len(dataset.sequences[cid])} videos, episode needs {need}")
    picked = [classes[i] for i in rng.choice(len(classes), size=N, replace=False)]
    support, query, s_lab, q_lab = [], [], [], []
    per_class_query = []
    for label, cid in enumerate(picked):
        vids = dataset.sequences[cid]
        order = rng.permutation(len(vids))
        support += [vids[i] for i in order[:K]]
        s_lab += [label] * K
        per_class_query.append([vids[i] for i in order[K:K + q_per_class[label]]])
    for r in range(max(q_per_class, default=0)):
        for label in range(N):
            if r < len(per_class_query[label]):
                query.append(per_class_query[label][r])
                q_lab.append(label)
    return Episode(N, K, L, support, query, np.array(s_lab, dtype=np.int64), np.array(q_lab, dtype=np.int64), picked)

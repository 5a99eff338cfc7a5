"""Seeded lesion-growth simulator and the dataset pipeline around it.

Each simulated subject is a short longitudinal series of 4-channel images
with a 4-class label map (background, edema, enhancing, necrosis) observed
at sorted random times in [0, 1]. The lesion is an axis-aligned ellipse whose
semi-axes grow linearly in time, so its area is known in closed form.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

NUM_CLASSES = 4
IMAGE_CHANNELS = 4
IMAGE_SIZE = 64
MIN_TIMESTEPS = 3
MAX_TIMESTEPS = 13
MIN_CONTEXT = 2
MAX_CONTEXT = 5

# Semi-axis multipliers of the nested class regions: edema, enhancing, necrosis.
CLASS_SCALES = (1.0, 0.65, 0.35)

# Mean intensity per (channel, class); columns are background, edema,
# enhancing, necrosis. Rows loosely mimic T1, T1c, T2, FLAIR contrast.
INTENSITY_TEMPLATE = np.array(
    [
        [0.55, 0.45, 0.50, 0.20],
        [0.50, 0.45, 1.00, 0.30],
        [0.40, 0.90, 0.70, 1.00],
        [0.40, 0.95, 0.70, 0.60],
    ]
)

DEFAULT_TIME_SCALE = 365.0

CORPUS_FORMAT_VERSION = 1


class InsufficientObservationsError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class GrowthParams:
    seed: int
    num_timesteps: int = 5
    growth_rate: float = 16.0
    anisotropy: tuple[float, float] = (1.0, 1.0)
    core_onset: float = 0.5
    noise_sigma: float = 0.05
    drift: tuple[float, float] = (0.0, 0.0)
    # Lesion radius at t=0 (pixels); 0 gives semi-axes growth_rate * anisotropy * t.
    initial_radius: float = 0.0

    def validate(self) -> None:
        if not MIN_TIMESTEPS <= self.num_timesteps <= MAX_TIMESTEPS:
            raise ValueError(
                f"num_timesteps must lie in [{MIN_TIMESTEPS}, {MAX_TIMESTEPS}], "
                f"got {self.num_timesteps}"
            )
        if not self.growth_rate > 0:
            raise ValueError(f"growth_rate must be positive, got {self.growth_rate}")
        if len(self.anisotropy) != 2 or min(self.anisotropy) <= 0:
            raise ValueError(f"anisotropy must be two positive reals, got {self.anisotropy}")
        if not 0.0 <= self.core_onset <= 1.0:
            raise ValueError(f"core_onset must lie in [0, 1], got {self.core_onset}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if len(self.drift) != 2:
            raise ValueError(f"drift must be a 2-vector, got {self.drift}")
        if self.initial_radius < 0:
            raise ValueError(f"initial_radius must be non-negative, got {self.initial_radius}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["anisotropy"] = list(self.anisotropy)
        d["drift"] = list(self.drift)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GrowthParams":
        d = dict(d)
        d["anisotropy"] = tuple(d["anisotropy"])
        d["drift"] = tuple(d["drift"])
        return cls(**d)


def random_growth_params(seed: int, rng: Optional[np.random.Generator] = None) -> GrowthParams:
    """Draw a subject's growth parameters; the returned params carry `seed`."""
    rng = np.random.default_rng(seed) if rng is None else rng
    return GrowthParams(
        seed=int(seed),
        num_timesteps=int(rng.integers(MIN_TIMESTEPS, MAX_TIMESTEPS + 1)),
        growth_rate=float(rng.uniform(4.0, 16.0)),
        anisotropy=(float(rng.uniform(0.8, 1.2)), float(rng.uniform(0.8, 1.2))),
        core_onset=float(rng.uniform(0.2, 0.8)),
        noise_sigma=0.05,
        drift=(float(rng.normal(0.0, 2.0)), float(rng.normal(0.0, 2.0))),
        initial_radius=float(rng.uniform(4.0, 10.0)),
    )


@dataclass
class TimedObservation:
    image: np.ndarray  # float32 [C, H, W]
    segmentation: np.ndarray  # uint8 [H, W]
    time: float


@dataclass
class Trajectory:
    subject_id: str
    observations: list[TimedObservation]
    params: Optional[GrowthParams] = None

    def __post_init__(self):
        if len(self.observations) < MIN_TIMESTEPS:
            raise InsufficientObservationsError(
                f"{self.subject_id}: a trajectory needs at least {MIN_TIMESTEPS} "
                f"observations, got {len(self.observations)}"
            )
        times = self.times
        if np.any(np.diff(times) <= 0):
            raise ValueError(f"{self.subject_id}: observation times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def times(self) -> np.ndarray:
        return np.array([o.time for o in self.observations], dtype=np.float64)

    @property
    def images(self) -> np.ndarray:
        return np.stack([o.image for o in self.observations])

    @property
    def segmentations(self) -> np.ndarray:
        return np.stack([o.segmentation for o in self.observations])


@dataclass
class ContextTargetBatch:
    context: list[TimedObservation]
    target: list[TimedObservation]
    mode: str = "train"
    subject_id: str = ""

    @property
    def target_set(self) -> list[TimedObservation]:
        """Points the model reconstructs: context plus target when training."""
        if self.mode == "train":
            return self.context + self.target
        return list(self.target)


def days_to_time(days, time_scale: float = DEFAULT_TIME_SCALE):
    return np.asarray(days, dtype=np.float64) / time_scale


def lesion_semi_axes(params: GrowthParams, t: float) -> np.ndarray:
    radius = params.initial_radius + params.growth_rate * t
    return radius * np.asarray(params.anisotropy, dtype=np.float64)


def ellipse_mask(center, semi_axes, size: int) -> np.ndarray:
    """Pixels whose centres fall inside the axis-aligned ellipse."""
    ax, ay = semi_axes
    if ax <= 0 or ay <= 0:
        return np.zeros((size, size), dtype=bool)
    # Row index is y, column index is x.
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return ((xx - center[0]) / ax) ** 2 + ((yy - center[1]) / ay) ** 2 <= 1.0


def label_map(params: GrowthParams, center, t: float, size: int) -> np.ndarray:
    axes = lesion_semi_axes(params, t)
    seg = np.zeros((size, size), dtype=np.uint8)
    for cls, scale in enumerate(CLASS_SCALES, start=1):
        if cls == 3 and t < params.core_onset:
            continue
        seg[ellipse_mask(center, axes * scale, size)] = cls
    return seg


def _anatomy(size: int) -> np.ndarray:
    """Smooth subject-independent background: a soft disk with a mild gradient."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.hypot(xx - c, yy - c) / (0.45 * size)
    disk = 1.0 / (1.0 + np.exp((r - 1.0) * 12.0))
    return disk * (0.8 + 0.2 * (yy / size))


def _draw_schedule(params: GrowthParams, image_size: int, rng: np.random.Generator):
    times = np.sort(rng.uniform(0.0, 1.0, size=params.num_timesteps))
    while np.any(np.diff(times) <= 0):
        times = np.sort(rng.uniform(0.0, 1.0, size=params.num_timesteps))
    c = (image_size - 1) / 2.0
    center0 = c + rng.uniform(-4.0, 4.0, size=2)
    drift = np.asarray(params.drift, dtype=np.float64)
    return times, center0 + drift * times[:, None]


def lesion_schedule(params: GrowthParams, image_size: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Observation times [T] and lesion centres [T, 2] (x, y) that ``simulate_trajectory`` uses."""
    params.validate()
    return _draw_schedule(params, image_size, np.random.default_rng(params.seed))


def simulate_trajectory(
    params: GrowthParams, image_size: int = IMAGE_SIZE, subject_id: Optional[str] = None
) -> Trajectory:
    params.validate()
    rng = np.random.default_rng(params.seed)
    times, centers = _draw_schedule(params, image_size, rng)
    anatomy = _anatomy(image_size)

    observations = []
    for t, center in zip(times, centers):
        seg = label_map(params, center, float(t), image_size)
        image = INTENSITY_TEMPLATE[:, seg] * anatomy[None]
        inside = seg > 0
        image[:, inside] = INTENSITY_TEMPLATE[:, seg[inside]]
        if params.noise_sigma > 0:
            image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
        observations.append(TimedObservation(image.astype(np.float32), seg, float(t)))
    return Trajectory(subject_id or f"subject_{params.seed}", observations, params)


def normalize_trajectory(traj: Trajectory) -> Trajectory:
    images = traj.images.astype(np.float64)
    mean = images.mean(axis=(0, 2, 3), keepdims=True)
    std = images.std(axis=(0, 2, 3), keepdims=True)
    if np.any(std == 0):
        bad = np.flatnonzero(std.ravel() == 0).tolist()
        raise DegenerateInputError(f"{traj.subject_id}: zero-variance channel(s) {bad}")
    normed = ((images - mean) / std).astype(np.float32)
    obs = [
        TimedObservation(img, o.segmentation, o.time)
        for img, o in zip(normed, traj.observations)
    ]
    return Trajectory(traj.subject_id, obs, traj.params)


def sample_context_target(
    traj: Trajectory, num_context: int, mode: str, rng: np.random.Generator
) -> ContextTargetBatch:
    """Split a trajectory into context and a single target point.

    In eval mode the context is the earliest ``num_context`` observations and
    the target a random later one. In train mode a random time-ordered subset
    of ``num_context + 1`` observations is drawn; the latest is the target.
    """
    if not MIN_CONTEXT <= num_context <= MAX_CONTEXT:
        raise ValueError(
            f"num_context must lie in [{MIN_CONTEXT}, {MAX_CONTEXT}], got {num_context}"
        )
    if len(traj) < num_context + 1:
        raise InsufficientObservationsError(
            f"{traj.subject_id} has {len(traj)} observations, "
            f"needs {num_context + 1} for {num_context} context points"
        )
    obs = traj.observations
    if mode == "eval":
        j = int(rng.integers(num_context, len(traj)))
        return ContextTargetBatch(list(obs[:num_context]), [obs[j]], "eval", traj.subject_id)
    if mode == "train":
        idx = np.sort(rng.choice(len(traj), size=num_context + 1, replace=False))
        picked = [obs[i] for i in idx]
        return ContextTargetBatch(picked[:-1], picked[-1:], "train", traj.subject_id)
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


@dataclass(frozen=True)
class AugmentDraw:
    flip_h: bool = False
    flip_v: bool = False
    rot90: int = 0
    noise_sigma: float = 0.0
    noise_seed: int = 0

    @property
    def is_identity(self) -> bool:
        return not (self.flip_h or self.flip_v or self.rot90 % 4 or self.noise_sigma > 0)


def draw_augmentation(
    rng: np.random.Generator, noise_prob: float = 0.5, max_noise: float = 0.1
) -> AugmentDraw:
    noise = float(rng.uniform(0.0, max_noise)) if rng.random() < noise_prob else 0.0
    return AugmentDraw(
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
        rot90=int(rng.integers(0, 4)),
        noise_sigma=noise,
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def _spatial(a: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    if draw.flip_h:
        a = a[..., :, ::-1]
    if draw.flip_v:
        a = a[..., ::-1, :]
    if draw.rot90 % 4:
        a = np.rot90(a, k=draw.rot90, axes=(-2, -1))
    return np.ascontiguousarray(a)


def apply_augmentation(batch: ContextTargetBatch, draw: AugmentDraw) -> ContextTargetBatch:
    """Apply one draw identically to every observation of the batch."""
    if draw.is_identity:
        return batch
    noise_rng = np.random.default_rng(draw.noise_seed)

    def one(o: TimedObservation) -> TimedObservation:
        img = _spatial(o.image, draw)
        if draw.noise_sigma > 0:
            img = img + noise_rng.normal(0.0, draw.noise_sigma, size=img.shape).astype(np.float32)
        return TimedObservation(img, _spatial(o.segmentation, draw), o.time)

    return ContextTargetBatch(
        [one(o) for o in batch.context],
        [one(o) for o in batch.target],
        batch.mode,
        batch.subject_id,
    )


def augment_batch(batch: ContextTargetBatch, rng: np.random.Generator) -> ContextTargetBatch:
    if batch.mode != "train":
        raise ValueError("augmentation is only applied to training batches")
    return apply_augmentation(batch, draw_augmentation(rng))


def build_corpus(
    n_subjects: int,
    seed: int,
    split_fraction: float = 0.8,
    image_size: int = IMAGE_SIZE,
    num_timesteps: Optional[tuple[int, int]] = None,
) -> tuple[list[Trajectory], list[Trajectory]]:
    """Simulate and normalize ``n_subjects`` trajectories, split by subject."""
    if n_subjects < 2:
        raise ValueError(f"need at least 2 subjects to split, got {n_subjects}")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    rng = np.random.default_rng(seed)
    subject_seeds = rng.integers(0, 2**31 - 1, size=n_subjects)
    trajs = []
    for i, s in enumerate(subject_seeds):
        params = random_growth_params(int(s))
        if num_timesteps is not None:
            lo, hi = num_timesteps
            n = int(np.random.default_rng(int(s) + 1).integers(lo, hi + 1))
            params = dataclasses.replace(params, num_timesteps=n)
        traj = simulate_trajectory(params, image_size, subject_id=f"subj_{i:04d}")
        trajs.append(normalize_trajectory(traj))
    n_train = min(max(int(round(split_fraction * n_subjects)), 1), n_subjects - 1)
    order = rng.permutation(n_subjects)
    train = [trajs[i] for i in sorted(order[:n_train])]
    test = [trajs[i] for i in sorted(order[n_train:])]
    return train, test


# --- persistence -----------------------------------------------------------


def save_trajectory(traj: Trajectory, directory: Path, split: str = "") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{traj.subject_id}.npz"
    np.savez(
        path,
        images=traj.images,
        segmentations=traj.segmentations,
        times=traj.times,
    )
    manifest = {
        "format_version": CORPUS_FORMAT_VERSION,
        "subject_id": traj.subject_id,
        "split": split,
        "times": traj.times.tolist(),
        "seed": None if traj.params is None else traj.params.seed,
        "params": None if traj.params is None else traj.params.to_dict(),
    }
    (directory / f"{traj.subject_id}.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_trajectory(path: Path) -> Trajectory:
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != CORPUS_FORMAT_VERSION:
        raise ValueError(f"{manifest_path}: unsupported corpus format {manifest.get('format_version')}")
    with np.load(path) as z:
        images, segs, times = z["images"], z["segmentations"], z["times"]
    obs = [TimedObservation(images[i], segs[i], float(times[i])) for i in range(len(times))]
    params = manifest["params"]
    return Trajectory(
        manifest["subject_id"], obs, None if params is None else GrowthParams.from_dict(params)
    )


def save_corpus(
    directory: Path, train: Sequence[Trajectory], test: Sequence[Trajectory], meta: Optional[dict] = None
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t in train:
        save_trajectory(t, directory, "train")
    for t in test:
        save_trajectory(t, directory, "test")
    split = {
        "format_version": CORPUS_FORMAT_VERSION,
        "train": [t.subject_id for t in train],
        "test": [t.subject_id for t in test],
        **(meta or {}),
    }
    (directory / "split.json").write_text(json.dumps(split, indent=2))


def load_split_manifest(directory: Path) -> dict:
    path = Path(directory) / "split.json"
    if not path.exists():
        raise FileNotFoundError(f"no corpus split manifest at {path}")
    return json.loads(path.read_text())


def load_corpus(directory: Path, split: str) -> list[Trajectory]:
    """Load one side ('train' or 'test') of a saved corpus."""
    directory = Path(directory)
    manifest = load_split_manifest(directory)
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    leaked = set(manifest["train"]) & set(manifest["test"])
    if leaked:
        raise ValueError(f"subjects listed in both train and test: {sorted(leaked)}")
    return [load_trajectory(directory / f"{sid}.npz") for sid in manifest[split]]

"""Raster data model, binary scene I/O, and the synthetic flood-scene generator.

Scene file layout (little-endian):
    magic "SSGRID1\\0" (8 bytes)
    u32 width, u32 height, u32 channels
    u8 flags (bit0: elevation channel present, bit1: truth grid present)
    [u32 elevation_channel]                 if flag bit0
    channel-major, row-major float64 data
    [row-major u8 truth grid]               if flag bit1

Label files are plain text, one "row,col,class" per line, '#' comments allowed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, IoError, SpecError

MAGIC = b"SSGRID1\x00"
_FLAG_ELEVATION = 0x01
_FLAG_TRUTH = 0x02
_HEADER = struct.Struct("<IIIB")


@dataclass
class RasterScene:
    """Dense multi-channel float raster with optional elevation tag and truth grid."""

    width: int
    height: int
    channels: int
    data: np.ndarray  # (channels, height, width) float64
    elevation_channel: int | None = None
    truth: np.ndarray | None = None  # (height, width) uint8, 0 = dry, 1 = flood

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=float)
        expected = (self.channels, self.height, self.width)
        if self.data.size != self.channels * self.height * self.width:
            raise DataError(f"data has {self.data.size} values, expected {expected}")
        self.data = self.data.reshape(expected)
        if not np.all(np.isfinite(self.data)):
            raise DataError("scene data contains non-finite values")
        if self.elevation_channel is not None:
            if not 0 <= int(self.elevation_channel) < self.channels:
                raise DataError(
                    f"elevation channel {self.elevation_channel} out of range for {self.channels} channels"
                )
            self.elevation_channel = int(self.elevation_channel)
        if self.truth is not None:
            truth = np.ascontiguousarray(self.truth, dtype=np.uint8)
            if truth.shape != (self.height, self.width):
                raise DataError(f"truth grid shape {truth.shape} != {(self.height, self.width)}")
            if np.any(truth > 1):
                raise DataError("truth grid contains classes other than 0/1")
            self.truth = truth

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def feature_matrix(self, use_elevation: bool = True) -> np.ndarray:
        """Pixel feature vectors, one row per pixel in row-major order.

        With ``use_elevation=False`` the tagged elevation channel is dropped;
        if no channel is tagged there is nothing to drop.
        """
        if use_elevation or self.elevation_channel is None:
            chans = self.data
        else:
            keep = [c for c in range(self.channels) if c != self.elevation_channel]
            chans = self.data[keep]
        return np.ascontiguousarray(chans.reshape(chans.shape[0], -1).T)

    def elevation(self) -> np.ndarray:
        if self.elevation_channel is None:
            raise DataError("scene has no elevation channel")
        return self.data[self.elevation_channel]


@dataclass
class LabelSet:
    """Sparse supervision: (row, col, class) triples with no duplicate pixel."""

    entries: list[tuple[int, int, int]]

    def __post_init__(self) -> None:
        self.entries = [(int(r), int(c), int(y)) for r, c, y in self.entries]
        seen = set()
        for r, c, y in self.entries:
            if y not in (0, 1):
                raise DataError(f"label class {y} at ({r},{c}) is not binary")
            if (r, c) in seen:
                raise DataError(f"duplicate label for pixel ({r},{c})")
            seen.add((r, c))

    def __len__(self) -> int:
        return len(self.entries)

    def class_count(self, cls: int) -> int:
        return sum(1 for _, _, y in self.entries if y == cls)

    def flat_indices(self, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
        """(flat pixel indices, classes), bounds-checked against a grid."""
        for r, c, _ in self.entries:
            if not (0 <= r < height and 0 <= c < width):
                raise DataError(f"label pixel ({r},{c}) outside {height}x{width} grid")
        idx = np.array([r * width + c for r, c, _ in self.entries], dtype=np.int64)
        cls = np.array([y for _, _, y in self.entries], dtype=np.int64)
        return idx, cls


# Default per-class feature distributions for the generator. The obstacle
# distribution is shared by both classes and centered between them, which is
# the whole point: those pixels are indistinguishable from non-spatial
# features alone.
_DEFAULT_MEANS = ((40.0, 45.0, 50.0), (90.0, 95.0, 100.0))
_DEFAULT_STD = 15.0
_DEFAULT_OBSTACLE_STD = 12.0
_DEFAULT_NOISE_SIGMA = 6.0


@dataclass
class SceneSpec:
    """Parameters of the synthetic flood scene.

    Elevation is a diagonal ramp of height ``ramp_height`` plus a sinusoidal
    bump field of amplitude ``bump_amplitude`` (``bump_periods`` full periods
    across each axis). Truth is the sub-level set of ``water_level``; when
    ``water_level`` is None the median elevation is used. ``noise_sigma``
    models per-channel sensor error: it is added to every stored channel,
    elevation included, while truth always comes from the clean terrain.
    """

    width: int = 128
    height: int = 128
    n_features: int = 3
    ramp_height: float = 100.0
    bump_amplitude: float = 8.0
    bump_periods: float = 3.0
    water_level: float | None = None
    class_means: np.ndarray | None = None  # (2, n_features)
    class_covs: np.ndarray | None = None  # (2, n_features, n_features)
    obstacle_mean: np.ndarray | None = None
    obstacle_cov: np.ndarray | None = None
    obstacle_fraction: float = 0.0
    noise_sigma: float = _DEFAULT_NOISE_SIGMA
    labels_per_class: int = 100
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1 or self.n_features < 1:
            raise SpecError("width, height, and n_features must be positive")
        if not 0.0 <= self.obstacle_fraction <= 1.0:
            raise SpecError(f"obstacle_fraction {self.obstacle_fraction} outside [0, 1]")
        if self.noise_sigma < 0.0:
            raise SpecError("noise_sigma must be non-negative")
        if self.labels_per_class < 1:
            raise SpecError("labels_per_class must be positive")
        m = self.n_features
        if self.class_means is None:
            if m == 3:
                self.class_means = np.array(_DEFAULT_MEANS)
            else:
                lo = np.linspace(40.0, 50.0, m)
                self.class_means = np.stack([lo, lo + 50.0])
        self.class_means = np.asarray(self.class_means, dtype=float)
        if self.class_covs is None:
            self.class_covs = np.stack([np.eye(m) * _DEFAULT_STD**2] * 2)
        self.class_covs = np.asarray(self.class_covs, dtype=float)
        if self.obstacle_mean is None:
            self.obstacle_mean = self.class_means.mean(axis=0)
        self.obstacle_mean = np.asarray(self.obstacle_mean, dtype=float)
        if self.obstacle_cov is None:
            self.obstacle_cov = np.eye(m) * _DEFAULT_OBSTACLE_STD**2
        self.obstacle_cov = np.asarray(self.obstacle_cov, dtype=float)

        if self.class_means.shape != (2, m):
            raise SpecError(f"class_means shape {self.class_means.shape} != (2, {m})")
        if self.class_covs.shape != (2, m, m):
            raise SpecError(f"class_covs shape {self.class_covs.shape} != (2, {m}, {m})")
        if self.obstacle_mean.shape != (m,):
            raise SpecError(f"obstacle_mean shape {self.obstacle_mean.shape} != ({m},)")
        if self.obstacle_cov.shape != (m, m):
            raise SpecError(f"obstacle_cov shape {self.obstacle_cov.shape} != ({m}, {m})")
        for cov in (*self.class_covs, self.obstacle_cov):
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise SpecError("feature covariance is not positive definite") from exc

    def elevation_grid(self) -> np.ndarray:
        rr, cc = np.meshgrid(
            np.arange(self.height, dtype=float), np.arange(self.width, dtype=float), indexing="ij"
        )
        span = max(self.height + self.width - 2, 1)
        ramp = self.ramp_height * (rr + cc) / span
        two_pi = 2.0 * math.pi
        bumps = (
            self.bump_amplitude
            * np.sin(two_pi * self.bump_periods * rr / max(self.height - 1, 1))
            * np.sin(two_pi * self.bump_periods * cc / max(self.width - 1, 1))
        )
        return ramp + bumps


def generate_scene(spec: SceneSpec) -> tuple[RasterScene, LabelSet]:
    """Build a synthetic scene plus a balanced label draw.

    Truth depends only on the clean terrain elevation vs. the water level.
    Feature channels are per-class Gaussian draws except for the obstacle
    pixels (a fixed fraction of each class), which are re-emitted from the
    shared obstacle distribution. Sensor noise of scale ``noise_sigma`` is
    then added to every stored channel, elevation included. Labels are drawn
    uniformly from non-obstacle pixels of each class. Fully deterministic for
    a fixed ``rng_seed``.
    """
    rng = np.random.default_rng(spec.rng_seed)
    elev = spec.elevation_grid()
    if spec.water_level is None:
        level = float(np.median(elev))
    else:
        level = float(spec.water_level)
        if not elev.min() <= level <= elev.max():
            raise SpecError(
                f"water_level {level} outside elevation range [{elev.min():.3f}, {elev.max():.3f}]"
            )
    truth = (elev < level).astype(np.uint8)
    flat_truth = truth.ravel()
    n = flat_truth.size
    m = spec.n_features

    clean: list[np.ndarray] = []
    obstacles: list[np.ndarray] = []
    for cls in (0, 1):
        idx = np.flatnonzero(flat_truth == cls)
        if idx.size == 0:
            raise SpecError(f"water level leaves class {cls} empty")
        n_obs = int(round(spec.obstacle_fraction * idx.size))
        chosen = rng.choice(idx, size=n_obs, replace=False) if n_obs else np.empty(0, dtype=np.int64)
        mask = np.zeros(idx.size, dtype=bool)
        mask[np.searchsorted(idx, np.sort(chosen))] = True
        obstacles.append(idx[mask])
        clean.append(idx[~mask])

    features = np.empty((n, m))
    for cls in (0, 1):
        features[clean[cls]] = rng.multivariate_normal(
            spec.class_means[cls], spec.class_covs[cls], size=clean[cls].size
        )
    all_obstacles = np.concatenate(obstacles)
    if all_obstacles.size:
        features[all_obstacles] = rng.multivariate_normal(
            spec.obstacle_mean, spec.obstacle_cov, size=all_obstacles.size
        )

    data = np.concatenate([features.T.reshape(m, spec.height, spec.width), elev[None]], axis=0)
    if spec.noise_sigma > 0.0:
        data = data + spec.noise_sigma * rng.standard_normal(data.shape)

    entries: list[tuple[int, int, int]] = []
    for cls in (0, 1):
        if clean[cls].size < spec.labels_per_class:
            raise SpecError(
                f"class {cls} has only {clean[cls].size} non-obstacle pixels, "
                f"cannot draw {spec.labels_per_class} labels"
            )
        picks = rng.choice(clean[cls], size=spec.labels_per_class, replace=False)
        entries.extend((int(p) // spec.width, int(p) % spec.width, cls) for p in picks)

    scene = RasterScene(
        width=spec.width,
        height=spec.height,
        channels=m + 1,
        data=data,
        elevation_channel=m,
        truth=truth,
    )
    return scene, LabelSet(entries)


def sample_labels(scene: RasterScene, ratio: float, rng_seed: int) -> LabelSet:
    """Draw ceil(ratio * N) truth labels, split as evenly as possible per class.

    On an odd total, class 0 (dry) gets the extra label. If one class has too
    few truth pixels for its half, the remainder goes to the other class, so
    ratio 1.0 always labels the entire grid.
    """
    if scene.truth is None:
        raise DataError("scene has no truth grid to sample labels from")
    if not 0.0 < ratio <= 1.0:
        raise DataError(f"ratio {ratio} outside (0, 1]")
    flat = scene.truth.ravel()
    pools = [np.flatnonzero(flat == cls) for cls in (0, 1)]
    for cls, pool in enumerate(pools):
        if pool.size == 0:
            raise DataError(f"truth grid has no pixels of class {cls}")
    total = math.ceil(ratio * scene.n_pixels)
    want = [total - total // 2, total // 2]
    take = [min(want[c], pools[c].size) for c in (0, 1)]
    for c in (0, 1):  # redistribute when one class runs short
        spare = total - take[0] - take[1]
        take[c] = min(take[c] + spare, pools[c].size)

    rng = np.random.default_rng(rng_seed)
    entries: list[tuple[int, int, int]] = []
    for cls in (0, 1):
        picks = rng.choice(pools[cls], size=take[cls], replace=False)
        entries.extend((int(p) // scene.width, int(p) % scene.width, cls) for p in picks)
    return LabelSet(entries)


def save_scene(scene: RasterScene, path: str) -> None:
    """Write the bit-exact binary scene format."""
    flags = 0
    if scene.elevation_channel is not None:
        flags |= _FLAG_ELEVATION
    if scene.truth is not None:
        flags |= _FLAG_TRUTH
    blob = bytearray(MAGIC)
    blob += _HEADER.pack(scene.width, scene.height, scene.channels, flags)
    if scene.elevation_channel is not None:
        blob += struct.pack("<I", scene.elevation_channel)
    blob += np.ascontiguousarray(scene.data, dtype="<f8").tobytes()
    if scene.truth is not None:
        blob += np.ascontiguousarray(scene.truth, dtype=np.uint8).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write scene to {path}: {exc}") from exc


def load_scene(path: str) -> RasterScene:
    """Read a scene file; rejects bad magic, truncation, and trailing bytes."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read scene from {path}: {exc}") from exc
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    off = len(MAGIC)
    if len(blob) < off + _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    width, height, channels, flags = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    elevation_channel = None
    if flags & _FLAG_ELEVATION:
        if len(blob) < off + 4:
            raise FormatError(f"{path}: truncated elevation channel index")
        (elevation_channel,) = struct.unpack_from("<I", blob, off)
        off += 4
    n_data = width * height * channels
    if len(blob) < off + 8 * n_data:
        raise FormatError(f"{path}: truncated data payload")
    data = np.frombuffer(blob, dtype="<f8", count=n_data, offset=off).astype(float)
    off += 8 * n_data
    truth = None
    if flags & _FLAG_TRUTH:
        n_px = width * height
        if len(blob) < off + n_px:
            raise FormatError(f"{path}: truncated truth grid")
        truth = np.frombuffer(blob, dtype=np.uint8, count=n_px, offset=off).reshape(height, width)
        off += n_px
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return RasterScene(
        width=width,
        height=height,
        channels=channels,
        data=data,
        elevation_channel=elevation_channel,
        truth=truth,
    )


def save_labels(labels: LabelSet, path: str) -> None:
    try:
        with open(path, "w") as fh:
            for r, c, y in labels.entries:
                fh.write(f"{r},{c},{y}\n")
    except OSError as exc:
        raise IoError(f"cannot write labels to {path}: {exc}") from exc


def load_labels(path: str) -> LabelSet:
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read labels from {path}: {exc}") from exc
    entries = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'row,col,class', got {raw.strip()!r}")
        try:
            r, c, y = (int(p) for p in parts)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-integer field in {raw.strip()!r}") from exc
        entries.append((r, c, y))
    return LabelSet(entries)

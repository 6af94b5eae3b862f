"""Partially labeled datasets, mixed-batch sampling, and synthetic data.

Two datasets feed the training loop: dataset A carries person identity
labels (task T1, re-identification), dataset B carries binary attribute
labels (task T2, attribute recognition). Neither dataset has labels for
the other task. Batches mix a sub-batch from each side.

Dataset objects are immutable after construction; batch sampling is
driven by a caller-owned numpy Generator so parallel pipelines can
partition seeds explicitly.
"""

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

DATASET_A = "A"
DATASET_B = "B"
TASK_REID = "T1"
TASK_PAR = "T2"

MANIFEST_COLUMNS = ["path", "person_id", "camera_id", "attributes"]


@dataclass(frozen=True)
class Sample:
    """One image labeled for exactly one task.

    Dataset A samples carry ``person_id`` (plus ``camera_id`` for the
    retrieval protocol) and no attributes; dataset B samples carry a
    binary ``attributes`` vector and no identity.
    """

    image: np.ndarray                     # H x W x C float32 in [0, 1]
    dataset_id: str                       # DATASET_A | DATASET_B
    person_id: int | None = None
    attributes: np.ndarray | None = None  # (M,) values in {0, 1}
    camera_id: int | None = None

    def __post_init__(self):
        if self.dataset_id not in (DATASET_A, DATASET_B):
            raise ValueError(f"unknown dataset_id {self.dataset_id!r}")
        if self.image.ndim != 3:
            raise ValueError(f"image must be H x W x C, got shape {self.image.shape}")
        if self.dataset_id == DATASET_A:
            if self.person_id is None or self.attributes is not None:
                raise ValueError("dataset A samples need a person_id and no attributes")
            if self.person_id < 0:
                raise ValueError(f"person_id must be non-negative, got {self.person_id}")
        else:
            if self.attributes is None or self.person_id is not None:
                raise ValueError("dataset B samples need attributes and no person_id")
            if not np.isin(self.attributes, (0, 1)).all():
                raise ValueError("attributes must contain only 0/1 values")
        if self.camera_id is not None and self.camera_id < 0:
            raise ValueError(f"camera_id must be non-negative, got {self.camera_id}")


@dataclass(frozen=True)
class PartialDataset:
    """An ordered, immutable collection of same-side samples.

    ``num_ids`` is the size of the identity label space (0 for a T2
    dataset); every ``person_id`` lies in ``[0, num_ids)``. Subset views
    (e.g. validation splits) keep the parent's label space, so ``num_ids``
    may exceed the number of identities actually present.
    """

    samples: tuple[Sample, ...]
    task_labeled: str   # TASK_REID | TASK_PAR
    num_ids: int
    num_attributes: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.task_labeled not in (TASK_REID, TASK_PAR):
            raise ValueError(f"unknown task {self.task_labeled!r}")
        expect_side = DATASET_A if self.task_labeled == TASK_REID else DATASET_B
        for s in self.samples:
            if s.dataset_id != expect_side:
                raise ValueError(f"sample dataset_id {s.dataset_id} does not match task {self.task_labeled}")
        if self.task_labeled == TASK_REID:
            if self.num_ids < 1 or self.num_attributes != 0:
                raise ValueError("T1 dataset needs num_ids >= 1 and num_attributes == 0")
            for s in self.samples:
                if not 0 <= s.person_id < self.num_ids:
                    raise ValueError(f"person_id {s.person_id} outside [0, {self.num_ids})")
        else:
            if self.num_attributes < 1 or self.num_ids != 0:
                raise ValueError("T2 dataset needs num_attributes >= 1 and num_ids == 0")
            for s in self.samples:
                if s.attributes.shape != (self.num_attributes,):
                    raise ValueError("attribute vector length mismatch")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def person_ids(self) -> np.ndarray:
        return np.array([s.person_id for s in self.samples], dtype=np.int64)

    def camera_ids(self) -> np.ndarray:
        return np.array([-1 if s.camera_id is None else s.camera_id for s in self.samples], dtype=np.int64)

    def attributes_matrix(self) -> np.ndarray:
        return np.stack([s.attributes for s in self.samples]).astype(np.float32)


@dataclass(frozen=True)
class MixedBatch:
    """One training batch: a sub-batch from each dataset, A rows first."""

    a_samples: tuple[Sample, ...]
    b_samples: tuple[Sample, ...]

    def __post_init__(self):
        object.__setattr__(self, "a_samples", tuple(self.a_samples))
        object.__setattr__(self, "b_samples", tuple(self.b_samples))
        if any(s.dataset_id != DATASET_A for s in self.a_samples):
            raise ValueError("a_samples must all come from dataset A")
        if any(s.dataset_id != DATASET_B for s in self.b_samples):
            raise ValueError("b_samples must all come from dataset B")

    @property
    def n_a(self) -> int:
        return len(self.a_samples)

    @property
    def n_b(self) -> int:
        return len(self.b_samples)

    def __len__(self):
        return self.n_a + self.n_b

    def images(self) -> np.ndarray:
        """All batch images stacked N x H x W x C, A rows first."""
        return stack_images(self.a_samples + self.b_samples)

    def a_person_ids(self) -> np.ndarray:
        return np.array([s.person_id for s in self.a_samples], dtype=np.int64)

    def b_attributes(self) -> np.ndarray:
        return np.stack([s.attributes for s in self.b_samples]).astype(np.float32)


def stack_images(samples) -> np.ndarray:
    if not samples:
        raise ValueError("cannot stack an empty sample list")
    return np.stack([s.image for s in samples])


def load_dataset(manifest_path, image_size: tuple[int, int] | None = None,
                 data_root=None) -> PartialDataset:
    """Load a dataset from a CSV manifest.

    Header is ``path,person_id,camera_id,attributes``; exactly one of
    person_id / attributes is populated per row, and every row must be
    labeled for the same task. ``attributes`` is a string of 0/1
    characters. Image paths are resolved against ``data_root`` (argument,
    else $KA_DATA_ROOT, else the manifest's directory). Raw person ids
    are remapped to a dense ``[0, num_ids)`` range in order of first
    appearance; a blank camera_id becomes 0.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    root = Path(data_root) if data_root is not None else \
        Path(os.environ.get("KA_DATA_ROOT", manifest_path.parent))

    with open(manifest_path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise ValueError(
                f"bad manifest header {reader.fieldnames}, expected {MANIFEST_COLUMNS}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"empty dataset: {manifest_path}")

    task = None
    pid_map: dict[int, int] = {}
    attr_len = None
    samples = []
    for i, row in enumerate(rows, start=1):
        pid_str = (row["person_id"] or "").strip()
        attr_str = (row["attributes"] or "").strip()
        cam_str = (row["camera_id"] or "").strip()
        if pid_str and attr_str:
            raise ValueError(f"manifest row {i}: both person_id and attributes populated")
        if not pid_str and not attr_str:
            raise ValueError(f"manifest row {i}: neither person_id nor attributes populated")
        row_task = TASK_REID if pid_str else TASK_PAR
        if task is None:
            task = row_task
        elif row_task != task:
            raise ValueError(f"manifest row {i}: task {row_task} conflicts with {task}")

        img_path = root / row["path"]
        if not img_path.is_file():
            raise FileNotFoundError(f"manifest row {i}: image not found: {img_path}")
        img = Image.open(img_path).convert("RGB")
        if image_size is not None:
            h, w = image_size
            img = img.resize((w, h), Image.BILINEAR)
        image = np.asarray(img, dtype=np.float32) / 255.0

        if row_task == TASK_REID:
            raw_pid = int(pid_str)
            if raw_pid < 0:
                raise ValueError(f"manifest row {i}: negative person_id")
            pid = pid_map.setdefault(raw_pid, len(pid_map))
            cam = int(cam_str) if cam_str else 0
            samples.append(Sample(image, DATASET_A, person_id=pid, camera_id=cam))
        else:
            if set(attr_str) - {"0", "1"}:
                raise ValueError(f"manifest row {i}: attributes must be a 0/1 string")
            if attr_len is None:
                attr_len = len(attr_str)
            elif len(attr_str) != attr_len:
                raise ValueError(f"manifest row {i}: attribute length {len(attr_str)} != {attr_len}")
            attrs = np.array([int(c) for c in attr_str], dtype=np.uint8)
            samples.append(Sample(image, DATASET_B, attributes=attrs))

    if task == TASK_REID:
        return PartialDataset(tuple(samples), TASK_REID, num_ids=len(pid_map), num_attributes=0)
    return PartialDataset(tuple(samples), TASK_PAR, num_ids=0, num_attributes=attr_len)


# Synthetic rendering layout: a top band of per-attribute toggle slots,
# a striped "torso" block colored by the identity's latent appearance,
# a mild per-camera brightness shift, and pixel noise on top. Both
# attribute state and identity are recoverable from the pixels.
_ATTR_ON, _ATTR_OFF = 0.95, 0.05
_CAM_GAINS = (0.85, 1.0, 1.15)
_NOISE_STD = 0.05


def _render(h, w, color, phase, attrs, cam, rng):
    img = np.full((h, w, 3), 0.35, dtype=np.float64)
    # identity torso: horizontal stripes of the identity color
    r0, r1 = int(0.30 * h), int(0.95 * h)
    c0, c1 = int(0.15 * w), max(int(0.15 * w) + 1, int(0.85 * w))
    stripe_h = max(2, h // 8)
    for r in range(r0, r1):
        shade = 1.0 if ((r - r0) // stripe_h + phase) % 2 == 0 else 0.35
        img[r, c0:c1] = color * shade
    # attribute slots along the top band
    band = max(2, h // 8)
    m = len(attrs)
    for j, a in enumerate(attrs):
        s0, s1 = j * w // m, max(j * w // m + 1, (j + 1) * w // m)
        img[:band, s0:s1] = _ATTR_ON if a else _ATTR_OFF
    img *= _CAM_GAINS[cam]
    img += rng.normal(0.0, _NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_synthetic_pair(num_ids: int, num_attributes: int, samples_per_dataset: int,
                        image_size: tuple[int, int], seed: int):
    """Generate a deterministic (dataset A, dataset B) pair for desk-scale runs.

    Both datasets are rendered from one generative process: an identity
    appearance (color + stripe phase drawn per identity), a random binary
    attribute vector, and a camera index. Dataset A keeps only the
    identity/camera labels, dataset B keeps only the attribute labels.
    Identical arguments give bit-identical datasets.
    """
    h, w = image_size
    if num_ids < 2:
        raise ValueError(f"num_ids must be >= 2, got {num_ids}")
    if num_attributes < 1:
        raise ValueError(f"num_attributes must be >= 1, got {num_attributes}")
    if samples_per_dataset < 1:
        raise ValueError(f"samples_per_dataset must be >= 1, got {samples_per_dataset}")
    if h < 16 or w < 8 or w < num_attributes:
        raise ValueError(f"image_size {image_size} too small for {num_attributes} attributes")

    rng = np.random.default_rng(seed)
    palette = rng.uniform(0.25, 1.0, size=(num_ids, 3))
    phases = rng.integers(0, 4, size=num_ids)

    n = samples_per_dataset
    # every identity appears at least once so num_ids equals the distinct count
    base = np.arange(min(num_ids, n))
    extra = rng.integers(0, num_ids, size=max(0, n - num_ids))
    a_ids = rng.permutation(np.concatenate([base, extra]))
    a_cams = rng.integers(0, len(_CAM_GAINS), size=n)
    a_attrs = rng.integers(0, 2, size=(n, num_attributes))  # visible but unlabeled
    a_samples = [
        Sample(_render(h, w, palette[k], phases[k], a_attrs[i], a_cams[i], rng),
               DATASET_A, person_id=int(k), camera_id=int(a_cams[i]))
        for i, k in enumerate(a_ids)
    ]

    b_ids = rng.integers(0, num_ids, size=n)  # appearance only, never labeled
    b_cams = rng.integers(0, len(_CAM_GAINS), size=n)
    b_attrs = rng.integers(0, 2, size=(n, num_attributes))
    b_samples = [
        Sample(_render(h, w, palette[k], phases[k], b_attrs[i], b_cams[i], rng),
               DATASET_B, attributes=b_attrs[i].astype(np.uint8))
        for i, k in enumerate(b_ids)
    ]

    ds_a = PartialDataset(tuple(a_samples), TASK_REID,
                          num_ids=int(len(np.unique(a_ids))), num_attributes=0)
    ds_b = PartialDataset(tuple(b_samples), TASK_PAR, num_ids=0,
                          num_attributes=num_attributes)
    return ds_a, ds_b


def sample_batch(ds_a: PartialDataset, ds_b: PartialDataset, batch_size: int,
                 ratio_a: float, rng: np.random.Generator) -> MixedBatch:
    """Draw one mixed batch, uniformly with replacement within each dataset.

    The A side gets round(batch_size * ratio_a) rows (Python round), the
    rest come from B. Allocations of zero to either side are rejected:
    the per-side loss normalizers require non-empty sub-batches.
    """
    if len(ds_a) == 0 or len(ds_b) == 0:
        raise ValueError("cannot sample from an empty dataset")
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if not 0.0 < ratio_a < 1.0:
        raise ValueError(f"ratio_a must be in (0, 1), got {ratio_a}")
    n_a = round(batch_size * ratio_a)
    n_b = batch_size - n_a
    if n_a == 0 or n_b == 0:
        raise ValueError(f"empty sub-batch: batch_size={batch_size}, ratio_a={ratio_a}")
    idx_a = rng.integers(0, len(ds_a), size=n_a)
    idx_b = rng.integers(0, len(ds_b), size=n_b)
    return MixedBatch(tuple(ds_a[int(i)] for i in idx_a),
                      tuple(ds_b[int(i)] for i in idx_b))


def draw_samples(ds: PartialDataset, n: int, rng: np.random.Generator) -> tuple[Sample, ...]:
    """Uniform-with-replacement draw from one dataset (single-task loops)."""
    if len(ds) == 0:
        raise ValueError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(ds), size=n)
    return tuple(ds[int(i)] for i in idx)


def split_holdout(ds: PartialDataset, fraction: float, seed: int):
    """Split into (main, held) by a seeded permutation; held gets
    max(1, round(len * fraction)) samples."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(ds)
    n_held = max(1, round(n * fraction))
    if n_held >= n:
        raise ValueError(f"holdout of {n_held} leaves no training data (n={n})")
    perm = np.random.default_rng(seed).permutation(n)
    held = tuple(ds[int(i)] for i in perm[:n_held])
    main = tuple(ds[int(i)] for i in perm[n_held:])
    mk = lambda s: PartialDataset(s, ds.task_labeled, ds.num_ids, ds.num_attributes)
    return mk(main), mk(held)

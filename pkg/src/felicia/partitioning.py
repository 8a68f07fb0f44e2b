"""Bias-injection partitioners: turn one dataset into non-IID site shards.

Three bias families are supported, all deterministic given their seed:

* cluster mixing -- PCA to two components, K-means with k=2, then each of
  two sites takes ``alpha%`` of one cluster and the complement of the other
  (the second site gets the inverted fractions);
* subgroup fraction -- two equally sized sites where the first one's second
  class is ``beta`` deer-fraction biased and the second is balanced;
* fixed counts -- the first site gets an exact (class, subgroup) count
  table and the second the remainder, after a class-balanced holdout has
  been carved out.

Partitions are index sets into the source dataset; they are always pairwise
disjoint, match their descriptor counts exactly, and serialize to a JSON
artifact that reproduces bit-for-bit.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

PIXEL_SCALE = 127.5


class DegenerateDataError(ValueError):
    """Raised when clustering input has no variance to work with."""


class InsufficientPopulationError(ValueError):
    """Raised when a requested shard needs more samples than are available."""


def normalize_pixels(raw: np.ndarray) -> np.ndarray:
    """uint8 pixels [0, 255] -> float32 in [-1, 1]."""
    return (np.asarray(raw, dtype=np.float32) / PIXEL_SCALE) - 1.0


def denormalize_pixels(images: np.ndarray) -> np.ndarray:
    """float images in [-1, 1] -> uint8 pixels, rounding to nearest level."""
    raw = np.rint((np.asarray(images, dtype=np.float64) + 1.0) * PIXEL_SCALE)
    return np.clip(raw, 0, 255).astype(np.uint8)


def round_half_up(x: float) -> int:
    """0.5 always rounds up, unlike banker's rounding."""
    return int(np.floor(x + 0.5))


@dataclass
class ImageDataset:
    """Images (N, H, W, C) in [-1, 1] with class labels and optional subgroup tags.

    Subgroup tags refine classes: every subgroup must occur under exactly
    one class.
    """

    images: np.ndarray
    class_labels: np.ndarray
    subgroup_tags: Optional[np.ndarray] = None
    manifest: Optional[List[dict]] = None

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.class_labels = np.asarray(self.class_labels)
        if self.images.ndim != 4:
            raise ValueError("images must be (N, H, W, C)")
        if len(self.class_labels) != len(self.images):
            raise ValueError("class_labels must match images")
        if self.subgroup_tags is not None:
            self.subgroup_tags = np.asarray(self.subgroup_tags)
            if len(self.subgroup_tags) != len(self.images):
                raise ValueError("subgroup_tags must match images")
            for tag in np.unique(self.subgroup_tags):
                classes = np.unique(self.class_labels[self.subgroup_tags == tag])
                if len(classes) > 1:
                    raise ValueError(f"subgroup {tag!r} spans classes {classes.tolist()}")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices: np.ndarray) -> "ImageDataset":
        idx = np.asarray(indices)
        tags = None if self.subgroup_tags is None else self.subgroup_tags[idx]
        return ImageDataset(self.images[idx], self.class_labels[idx], tags)

    def classes(self) -> np.ndarray:
        return np.unique(self.class_labels)

    def subgroups_of(self, cls) -> List:
        if self.subgroup_tags is None:
            raise ValueError("dataset has no subgroup tags")
        mask = self.class_labels == cls
        return sorted(np.unique(self.subgroup_tags[mask]).tolist())


@dataclass
class ClusterSplit:
    """Two-cluster structure of one class in its 2-component projection space."""

    embedding: np.ndarray        # (N, 2) coordinates
    assignments: np.ndarray      # values in {1, 2}
    centroids: np.ndarray        # (2, 2), row k-1 = centroid of cluster k
    pca_components: np.ndarray   # (2, D) basis rows
    pca_mean: np.ndarray         # (D,)

    def cluster_indices(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == cluster)

    def project(self, images: np.ndarray) -> np.ndarray:
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return (flat - self.pca_mean) @ self.pca_components.T

    def assign(self, coords: np.ndarray) -> np.ndarray:
        """Nearest-centroid assignment (values in {1, 2})."""
        d = np.linalg.norm(coords[:, None, :] - self.centroids[None, :, :], axis=2)
        return d.argmin(axis=1) + 1


@dataclass(frozen=True)
class BiasSpec:
    """Declarative description of a non-IID split; exactly one kind is active."""

    kind: str                                   # alpha_mix | beta_subgroup | fixed_counts
    seed: int = 0
    alpha: Optional[float] = None               # percent in [0, 100]
    n_per_subset: Optional[int] = None
    beta: Optional[float] = None                # fraction in [0, 1]
    n_per_class_per_site: Optional[int] = None
    count_table: Optional[Dict[int, Dict[str, int]]] = None

    def __post_init__(self) -> None:
        kinds = ("alpha_mix", "beta_subgroup", "fixed_counts")
        if self.kind not in kinds:
            raise ValueError(f"unknown bias kind {self.kind!r}; expected one of {kinds}")
        if self.kind == "alpha_mix":
            if self.alpha is None or not (0 <= self.alpha <= 100):
                raise ValueError("alpha_mix requires alpha in [0, 100]")
            if self.n_per_subset is None or self.n_per_subset <= 0:
                raise ValueError("alpha_mix requires positive n_per_subset")
            if self.beta is not None or self.count_table is not None:
                raise ValueError("alpha_mix must not set beta/count_table")
        elif self.kind == "beta_subgroup":
            if self.beta is None or not (0.0 <= self.beta <= 1.0):
                raise ValueError("beta_subgroup requires beta in [0, 1]")
            if self.n_per_class_per_site is None or self.n_per_class_per_site <= 0:
                raise ValueError("beta_subgroup requires positive n_per_class_per_site")
            if self.alpha is not None or self.count_table is not None:
                raise ValueError("beta_subgroup must not set alpha/count_table")
        else:
            if self.count_table is None:
                raise ValueError("fixed_counts requires count_table")
            if self.alpha is not None or self.beta is not None:
                raise ValueError("fixed_counts must not set alpha/beta")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind, "seed": self.seed}
        if self.kind == "alpha_mix":
            out.update(alpha=self.alpha, n_per_subset=self.n_per_subset)
        elif self.kind == "beta_subgroup":
            out.update(beta=self.beta, n_per_class_per_site=self.n_per_class_per_site)
        else:
            out["count_table"] = {str(c): dict(v) for c, v in self.count_table.items()}
        return out

    @staticmethod
    def from_dict(d: dict) -> "BiasSpec":
        known = {"kind", "seed", "alpha", "n_per_subset", "beta",
                 "n_per_class_per_site", "count_table"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown bias keys: {sorted(unknown)}")
        d = dict(d)
        if "count_table" in d and d["count_table"] is not None:
            d["count_table"] = {int(c): {str(s): int(n) for s, n in v.items()}
                                for c, v in d["count_table"].items()}
        return BiasSpec(**d)


@dataclass
class SitePartition:
    """Per-site index sets into a dataset, plus the descriptor that made them."""

    site_indices: List[np.ndarray]
    bias: BiasSpec

    def __post_init__(self) -> None:
        self.site_indices = [np.sort(np.asarray(ix, dtype=np.int64)) for ix in self.site_indices]
        seen: set = set()
        for ix in self.site_indices:
            s = set(ix.tolist())
            if len(s) != len(ix):
                raise ValueError("duplicate index within a site shard")
            if seen & s:
                raise ValueError("site shards overlap")
            seen |= s

    @property
    def n_sites(self) -> int:
        return len(self.site_indices)

    def sizes(self) -> List[int]:
        return [len(ix) for ix in self.site_indices]


# Default fixed-count table for the skin-lesion style split: the first
# site's benign class is dominated by one subgroup (10 vs 290) while the
# cancerous class stays balanced (150 + 150), 300 images per class.
DEFAULT_LESION_COUNTS: Dict[int, Dict[str, int]] = {
    0: {"melanocytic_nevi": 10, "benign_keratosis": 290},
    1: {"melanoma": 150, "basal_cell_carcinoma": 150},
}


def _pca_2d(flat: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First two principal components via SVD with a deterministic sign rule."""
    mean = flat.mean(axis=0)
    centered = flat - mean
    if not np.any(np.abs(centered) > 1e-12):
        raise DegenerateDataError("input has zero variance; cannot cluster")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2].copy()
    if components.shape[0] < 2:
        raise DegenerateDataError("fewer than two principal directions available")
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return components, mean, centered @ components.T


def _kmeans_two(coords: np.ndarray, seed: int, max_iter: int = 300,
                tol: float = 1e-6) -> Tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k=2: farthest-pair-ish seeded init, exact means."""
    rng = np.random.default_rng(seed)
    n = len(coords)
    first = int(rng.integers(n))
    d = np.linalg.norm(coords - coords[first], axis=1)
    second = int(d.argmax())
    if second == first:
        raise DegenerateDataError("all points coincide; cannot cluster")
    centroids = coords[[first, second]].astype(np.float64).copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dists = np.linalg.norm(coords[:, None, :] - centroids[None, :, :], axis=2)
        assign = dists.argmin(axis=1)
        new_centroids = centroids.copy()
        for k in range(2):
            members = coords[assign == k]
            if len(members) == 0:
                far = int(np.linalg.norm(coords - centroids[1 - k], axis=1).argmax())
                new_centroids[k] = coords[far]
            else:
                new_centroids[k] = members.mean(axis=0)
        shift = float(np.linalg.norm(new_centroids - centroids))
        centroids = new_centroids
        if shift < tol:
            break
    dists = np.linalg.norm(coords[:, None, :] - centroids[None, :, :], axis=2)
    assign = dists.argmin(axis=1)
    return centroids, assign


def pca_kmeans_split(images: np.ndarray, seed: int) -> ClusterSplit:
    """Project one class's images to 2 principal components and 2-cluster them.

    Cluster labels are canonical: cluster 1 is the one whose centroid has
    the smaller first-component coordinate (ties broken on the second), so
    downstream alpha semantics are reproducible.
    """
    images = np.asarray(images)
    if len(images) < 2:
        raise ValueError("need at least 2 images to cluster")
    flat = images.reshape(len(images), -1).astype(np.float64)
    components, mean, embedding = _pca_2d(flat)
    centroids, assign0 = _kmeans_two(embedding, seed)
    order = sorted(range(2), key=lambda k: (centroids[k, 0], centroids[k, 1]))
    relabel = np.empty(2, dtype=np.int64)
    relabel[order[0]], relabel[order[1]] = 1, 2
    assignments = relabel[assign0]
    centroids = centroids[order]
    return ClusterSplit(embedding=embedding, assignments=assignments,
                        centroids=centroids, pca_components=components, pca_mean=mean)


def alpha_mix(split: ClusterSplit, alpha: float, n_per_subset: int, seed: int) -> SitePartition:
    """Two-site cluster-bias partition.

    Subset 1 takes ``round_half_up(alpha% * n)`` samples from cluster 1 and
    the remainder of its n from cluster 2; subset 2 uses the inverted
    fraction.  Draws are disjoint across subsets.
    """
    if not (0 <= alpha <= 100):
        raise ValueError("alpha is a percentage in [0, 100]")
    n = int(n_per_subset)
    c1 = split.cluster_indices(1)
    c2 = split.cluster_indices(2)
    take1_c1 = round_half_up(alpha / 100.0 * n)
    take2_c1 = round_half_up((100.0 - alpha) / 100.0 * n)
    need_c1 = take1_c1 + take2_c1
    need_c2 = (n - take1_c1) + (n - take2_c1)
    if need_c1 > len(c1) or need_c2 > len(c2):
        raise InsufficientPopulationError(
            f"need {need_c1} from cluster 1 (have {len(c1)}) and "
            f"{need_c2} from cluster 2 (have {len(c2)})"
        )
    rng = np.random.default_rng(seed)
    perm1 = rng.permutation(c1)
    perm2 = rng.permutation(c2)
    site1 = np.concatenate([perm1[:take1_c1], perm2[:n - take1_c1]])
    site2 = np.concatenate([perm1[take1_c1:take1_c1 + take2_c1],
                            perm2[n - take1_c1:n - take1_c1 + (n - take2_c1)]])
    bias = BiasSpec(kind="alpha_mix", alpha=float(alpha), n_per_subset=n, seed=seed)
    return SitePartition([site1, site2], bias)


def _balanced_quota(n: int, groups: Sequence) -> Dict:
    """Split n as evenly as possible over groups (remainder to the first ones)."""
    base, rem = divmod(n, len(groups))
    return {g: base + (1 if i < rem else 0) for i, g in enumerate(groups)}


def beta_subgroup_split(dataset: ImageDataset, beta: float, n_per_class_per_site: int,
                        seed: int, biased_class: int = 2,
                        biased_subgroup: str = "deer") -> SitePartition:
    """Two equal-size sites; site 1's ``biased_class`` is subgroup-skewed.

    Site 1 holds ``round_half_up(beta * n)`` samples of ``biased_subgroup``
    and fills the class with the other subgroup(s); every other (site,
    class) cell is balanced across its subgroups.  Site 2 is balanced
    everywhere.
    """
    if not (0.0 <= beta <= 1.0):
        raise ValueError("beta is a fraction in [0, 1]")
    if dataset.subgroup_tags is None:
        raise ValueError("beta split requires subgroup tags")
    n = int(n_per_class_per_site)
    rng = np.random.default_rng(seed)
    classes = dataset.classes().tolist()
    if biased_class not in classes:
        raise ValueError(f"class {biased_class} absent from dataset classes {classes}")

    demand: List[Dict] = [dict(), dict()]      # per site: subgroup -> count
    for cls in classes:
        groups = dataset.subgroups_of(cls)
        if cls == biased_class:
            if biased_subgroup not in groups:
                raise ValueError(f"subgroup {biased_subgroup!r} absent from class {cls}")
            n_biased = round_half_up(beta * n)
            others = [g for g in groups if g != biased_subgroup]
            demand[0][biased_subgroup] = n_biased
            for g, q in _balanced_quota(n - n_biased, others).items():
                demand[0][g] = q
        else:
            demand[0].update(_balanced_quota(n, groups))
        demand[1].update(_balanced_quota(n, groups))

    site_indices: List[List[int]] = [[], []]
    for cls in classes:
        for g in dataset.subgroups_of(cls):
            pool = np.flatnonzero((dataset.class_labels == cls) & (dataset.subgroup_tags == g))
            want1 = demand[0].get(g, 0)
            want2 = demand[1].get(g, 0)
            if want1 + want2 > len(pool):
                raise InsufficientPopulationError(
                    f"subgroup {g!r} has {len(pool)} samples, need {want1 + want2}")
            perm = rng.permutation(pool)
            site_indices[0].extend(perm[:want1].tolist())
            site_indices[1].extend(perm[want1:want1 + want2].tolist())

    bias = BiasSpec(kind="beta_subgroup", beta=float(beta),
                    n_per_class_per_site=n, seed=seed)
    return SitePartition([np.array(s) for s in site_indices], bias)


def lesion_fixed_split(dataset: ImageDataset, count_table: Optional[Dict[int, Dict[str, int]]] = None,
                       seed: int = 0, available: Optional[np.ndarray] = None) -> SitePartition:
    """Site 1 gets exact (class, subgroup) counts; site 2 the rest.

    ``available`` restricts the draw to a subset of dataset indices (pass
    the remainder indices after holdout carving); defaults to all rows.
    """
    if dataset.subgroup_tags is None:
        raise ValueError("fixed-count split requires subgroup tags")
    table = count_table if count_table is not None else DEFAULT_LESION_COUNTS
    pool_mask = np.zeros(len(dataset), dtype=bool)
    pool_mask[np.arange(len(dataset)) if available is None else np.asarray(available)] = True
    rng = np.random.default_rng(seed)

    site1: List[int] = []
    taken = np.zeros(len(dataset), dtype=bool)
    for cls in sorted(table):
        for subgroup in sorted(table[cls]):
            want = int(table[cls][subgroup])
            pool = np.flatnonzero(pool_mask & (dataset.class_labels == cls)
                                  & (dataset.subgroup_tags == subgroup))
            if want > len(pool):
                raise InsufficientPopulationError(
                    f"class {cls} subgroup {subgroup!r}: need {want}, have {len(pool)}")
            chosen = rng.permutation(pool)[:want]
            site1.extend(chosen.tolist())
            taken[chosen] = True
    site2 = np.flatnonzero(pool_mask & ~taken)
    bias = BiasSpec(kind="fixed_counts", count_table={int(c): dict(v) for c, v in table.items()},
                    seed=seed)
    return SitePartition([np.array(site1, dtype=np.int64), site2], bias)


def carve_holdout(dataset: ImageDataset, n_per_class: int, split_ratio: float = 0.5,
                  seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Remove ``n_per_class`` per class; split the pool into (test, validation).

    Both carved sets are class-balanced; the remainder keeps everything
    else.  Returns (test_idx, validation_idx, remainder_idx).
    """
    if not (0.0 <= split_ratio <= 1.0):
        raise ValueError("split_ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    test: List[int] = []
    val: List[int] = []
    removed = np.zeros(len(dataset), dtype=bool)
    for cls in dataset.classes():
        pool = np.flatnonzero(dataset.class_labels == cls)
        if n_per_class > len(pool):
            raise InsufficientPopulationError(
                f"class {cls} has {len(pool)} samples, holdout needs {n_per_class}")
        chosen = rng.permutation(pool)[:n_per_class]
        removed[chosen] = True
        n_test = round_half_up(split_ratio * n_per_class)
        test.extend(chosen[:n_test].tolist())
        val.extend(chosen[n_test:].tolist())
    remainder = np.flatnonzero(~removed)
    return (np.sort(np.array(test, dtype=np.int64)),
            np.sort(np.array(val, dtype=np.int64)),
            remainder)


def load_image_folder(path: str, manifest: Optional[str] = None,
                      image_size: Optional[Tuple[int, int]] = None) -> ImageDataset:
    """Load a directory of images described by a ``filename,class,subgroup`` CSV.

    Images are optionally resized to (H, W) and normalized to [-1, 1].
    """
    from PIL import Image

    manifest_path = manifest if manifest is not None else os.path.join(path, "manifest.csv")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    rows: List[dict] = []
    with open(manifest_path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"filename", "class", "subgroup"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"manifest must have columns {sorted(required)}")
        for i, row in enumerate(reader):
            rows.append(row)

    images: List[np.ndarray] = []
    labels: List[int] = []
    tags: List[str] = []
    shape = None
    for i, row in enumerate(rows):
        file_path = os.path.join(path, row["filename"])
        if not os.path.exists(file_path):
            raise FileNotFoundError(f"manifest row {i}: missing file {row['filename']!r}")
        with Image.open(file_path) as im:
            if image_size is not None:
                im = im.resize((image_size[1], image_size[0]), Image.BILINEAR)
            arr = np.asarray(im)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValueError(f"manifest row {i}: image shape {arr.shape} != {shape}")
        images.append(normalize_pixels(arr))
        labels.append(int(row["class"]))
        tags.append(row["subgroup"])
    if not images:
        raise ValueError("manifest lists no images")
    return ImageDataset(np.stack(images), np.array(labels), np.array(tags), manifest=rows)


def save_partition(path: str, partition: SitePartition) -> None:
    """Persist a partition artifact (sorted index arrays + bias + seed)."""
    payload = {
        "sites": [ix.tolist() for ix in partition.site_indices],
        "bias": partition.bias.to_dict(),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f)
    os.replace(tmp, path)


def load_partition(path: str) -> SitePartition:
    with open(path) as f:
        payload = json.load(f)
    bias = BiasSpec.from_dict(payload["bias"])
    return SitePartition([np.array(ix, dtype=np.int64) for ix in payload["sites"]], bias)

"""Synthetic paired-volume generator, normalization, augmentation, and splits.

A dataset is a set of subjects, each with two volumetric modalities driven by
a common latent factor model: shared factors appear in both modalities (at
different spatial loci), unique factors in one. Class membership is encoded
in the signs of designated shared factors, so a ground-truth shared subspace
exists and downstream joint-information claims are testable.

Volumes are stored in a small binary format (magic ``MSCV``) and datasets are
described by a JSON manifest; see ``save_dataset`` / ``load_dataset``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError

UNLABELED = -1
HOLDOUT_FOLD = -1

_MAGIC = b"MSCV"
_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatentSpec:
    """Configuration of the latent factor model behind a synthetic dataset.

    ``class_signal_dims`` index into the shared factors; the sign pattern of
    those factors determines the class. ``volume_side`` must be a power of
    two >= 16 (32 is the desk-scale default, 64 matches full-scale geometry).
    """

    shared_dim: int = 4
    unique_dim1: int = 2
    unique_dim2: int = 2
    n_classes: int = 2
    class_signal_dims: tuple[int, ...] = (0,)
    noise_sigma: float = 0.5
    volume_side: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.shared_dim < 1:
            raise ConfigurationError("shared_dim must be >= 1")
        if self.unique_dim1 < 0 or self.unique_dim2 < 0:
            raise ConfigurationError("unique dims must be >= 0")
        if self.n_classes not in (2, 3):
            raise ConfigurationError("n_classes must be 2 or 3")
        if not self.class_signal_dims:
            raise ConfigurationError("class_signal_dims must be non-empty")
        if any(d < 0 or d >= self.shared_dim for d in self.class_signal_dims):
            raise ConfigurationError(
                "class_signal_dims must index shared factors "
                f"(0..{self.shared_dim - 1})"
            )
        if 2 ** len(self.class_signal_dims) < self.n_classes:
            raise ConfigurationError(
                "need 2**len(class_signal_dims) >= n_classes to encode classes"
            )
        side = self.volume_side
        if side < 16 or side & (side - 1) != 0:
            raise ConfigurationError("volume_side must be a power of two >= 16")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")


@dataclass
class VolumePair:
    """One subject's paired modality volumes plus label (UNLABELED = -1)."""

    subject_id: str
    vol_m1: np.ndarray
    vol_m2: np.ndarray
    label: int

    def volume(self, modality: str) -> np.ndarray:
        if modality == "m1":
            return self.vol_m1
        if modality == "m2":
            return self.vol_m2
        raise ConfigurationError(f"unknown modality {modality!r}")


@dataclass
class AtlasVolume:
    """Labeled integer volume: 0 = background, 1..K = ROI ids."""

    labels: np.ndarray
    roi_names: list[str]

    def validate(self) -> None:
        ids = np.unique(self.labels)
        ids = ids[ids > 0]
        k = len(self.roi_names)
        if ids.size and (ids.min() < 1 or ids.max() > k):
            raise ConfigurationError("ROI ids must be contiguous 1..K")

    def roi_mask(self, roi_id: int) -> np.ndarray:
        return self.labels == roi_id


@dataclass
class SplitSpec:
    """Fold assignment per subject; HOLDOUT_FOLD marks hold-out subjects."""

    fold_of: dict[str, int]
    folds: int

    def validate(self) -> None:
        for sid, f in self.fold_of.items():
            if f != HOLDOUT_FOLD and not 0 <= f < self.folds:
                raise ConfigurationError(f"subject {sid} has invalid fold {f}")

    def members(self, fold: int) -> list[str]:
        return [s for s, f in self.fold_of.items() if f == fold]

    def holdout(self) -> list[str]:
        return self.members(HOLDOUT_FOLD)


@dataclass
class DatasetManifest:
    """All pairs plus split, atlas, and the generator spec that made them.

    ``latents`` holds the generating factors per subject (in-memory only,
    never serialized); useful for oracle checks against ground truth.
    """

    pairs: list[VolumePair]
    split: SplitSpec
    atlas: AtlasVolume
    generator_spec: LatentSpec
    latents: dict[str, dict] | None = None

    def pair(self, subject_id: str) -> VolumePair:
        for p in self.pairs:
            if p.subject_id == subject_id:
                return p
        raise DataError(f"missing subject {subject_id}")

    def _select(self, ids: list[str]) -> list[VolumePair]:
        wanted = set(ids)
        return [p for p in self.pairs if p.subject_id in wanted]

    def train_pairs(self, fold: int) -> list[VolumePair]:
        ids = [
            s
            for s, f in self.split.fold_of.items()
            if f not in (fold, HOLDOUT_FOLD)
        ]
        return self._select(ids)

    def val_pairs(self, fold: int) -> list[VolumePair]:
        return self._select(self.split.members(fold))

    def holdout_pairs(self) -> list[VolumePair]:
        return self._select(self.split.holdout())

    def eval_pairs(self, fold: int) -> list[VolumePair]:
        """Hold-out pairs if a hold-out set exists, else the validation fold."""
        held = self.holdout_pairs()
        return held if held else self.val_pairs(fold)


# ---------------------------------------------------------------------------
# Normalization and augmentation
# ---------------------------------------------------------------------------

def minmax_rescale(vol: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant volume maps to all zeros.

    The constant case must not abort training: augmented crops of empty
    background are legitimate inputs.
    """
    vol = np.asarray(vol)
    if not np.isfinite(vol).all():
        raise DataError("minmax_rescale: non-finite values in input")
    lo = vol.min()
    hi = vol.max()
    if hi == lo:
        return np.zeros_like(vol, dtype=np.float32)
    return ((vol - lo) / (hi - lo)).astype(np.float32)


def reflect_pad_crop(
    vol: np.ndarray, pad: int, crop: int, rng: np.random.Generator
) -> np.ndarray:
    """Reflect-pad by ``pad`` on all six faces, then take a random crop."""
    side = vol.shape[0]
    if crop > side + 2 * pad:
        raise ConfigurationError(
            f"crop {crop} exceeds padded side {side + 2 * pad}"
        )
    padded = np.pad(vol, pad, mode="reflect") if pad > 0 else vol
    span = padded.shape[0] - crop
    off = [int(rng.integers(0, span + 1)) for _ in range(3)]
    return padded[
        off[0] : off[0] + crop,
        off[1] : off[1] + crop,
        off[2] : off[2] + crop,
    ].copy()


# ---------------------------------------------------------------------------
# Stratified splitting
# ---------------------------------------------------------------------------

def stratified_split(
    labels: dict[str, int],
    folds: int = 5,
    holdout_frac: float = 0.0,
    seed: int = 0,
) -> SplitSpec:
    """Label-stratified fold assignment with an optional hold-out set.

    The hold-out subjects are drawn first (per stratum), the remainder are
    dealt round-robin into folds. UNLABELED subjects form their own stratum.
    Deterministic given ``seed``.
    """
    if folds < 1:
        raise ConfigurationError("folds must be >= 1")
    rng = np.random.default_rng(seed)
    strata: dict[int, list[str]] = {}
    for sid in sorted(labels):
        strata.setdefault(labels[sid], []).append(sid)

    fold_of: dict[str, int] = {}
    cursor = 0  # rotates across strata so global fold sizes stay balanced
    for lab in sorted(strata):
        members = list(strata[lab])
        if len(members) < folds:
            raise ConfigurationError(
                f"class {lab} has {len(members)} members, fewer than "
                f"{folds} folds"
            )
        rng.shuffle(members)
        n_hold = int(round(holdout_frac * len(members)))
        for sid in members[:n_hold]:
            fold_of[sid] = HOLDOUT_FOLD
        for sid in members[n_hold:]:
            fold_of[sid] = cursor % folds
            cursor += 1
    return SplitSpec(fold_of=fold_of, folds=folds)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

def _class_sign_pattern(label: int, n_dims: int) -> np.ndarray:
    """Signs (+1/-1) encoding ``label`` in binary over ``n_dims`` dims."""
    bits = [(label >> b) & 1 for b in range(n_dims)]
    return np.array([1.0 if b else -1.0 for b in bits])


def _draw_centers(
    rng: np.random.Generator, count: int, side: int, tries: int = 200
) -> np.ndarray:
    """Blob centers with a best-effort minimum pairwise separation."""
    margin = side / 6.0
    min_dist = side / 3.0
    centers: list[np.ndarray] = []
    for _ in range(count):
        best = None
        best_sep = -1.0
        for _ in range(tries):
            c = rng.uniform(margin, side - 1 - margin, size=3)
            sep = min(
                (np.linalg.norm(c - p) for p in centers), default=np.inf
            )
            if sep >= min_dist:
                best = c
                break
            if sep > best_sep:
                best_sep = sep
                best = c
        centers.append(best)
    return np.stack(centers)


def _blob_bases(centers: np.ndarray, side: int, sigma: float) -> np.ndarray:
    """Unit-peak Gaussian blob per center, shape (n_centers, side, side, side)."""
    grid = np.stack(
        np.meshgrid(
            np.arange(side), np.arange(side), np.arange(side), indexing="ij"
        ),
        axis=-1,
    ).astype(np.float64)
    out = np.empty((len(centers), side, side, side), dtype=np.float32)
    for i, c in enumerate(centers):
        d2 = ((grid - c) ** 2).sum(axis=-1)
        out[i] = np.exp(-d2 / (2.0 * sigma**2)).astype(np.float32)
    return out


def _build_atlas(
    centers_by_mod: dict[str, np.ndarray], side: int, sigma: float
) -> AtlasVolume:
    """One atlas covering both modalities' blob sites.

    A voxel belongs to the nearest center among those whose blob exceeds
    half its peak there (the FWHM region), so ROIs are disjoint and ids are
    contiguous 1..K.
    """
    all_centers = []
    names = []
    for mod in ("m1", "m2"):
        for i, c in enumerate(centers_by_mod[mod]):
            all_centers.append(c)
            names.append(f"{mod}_factor{i}")
    all_centers = np.stack(all_centers)
    bases = _blob_bases(all_centers, side, sigma)

    grid = np.stack(
        np.meshgrid(
            np.arange(side), np.arange(side), np.arange(side), indexing="ij"
        ),
        axis=-1,
    ).astype(np.float64)
    dist2 = np.stack(
        [((grid - c) ** 2).sum(axis=-1) for c in all_centers]
    )  # (K, side^3 grid)
    covered = bases >= 0.5
    dist2 = np.where(covered, dist2, np.inf)
    nearest = np.argmin(dist2, axis=0)
    any_cover = covered.any(axis=0)
    labels = np.where(any_cover, nearest + 1, 0).astype(np.int32)
    atlas = AtlasVolume(labels=labels, roi_names=names)
    atlas.validate()
    return atlas


def generate_dataset(
    spec: LatentSpec,
    n_subjects: int,
    folds: int = 5,
    holdout_frac: float = 0.0,
) -> DatasetManifest:
    """Draw a full synthetic dataset: pairs, split, atlas, ground truth.

    Deterministic given ``spec.seed``. Class counts are balanced within one
    subject of each other. With ``n_classes=3`` the third phenotype is
    emitted as UNLABELED: its latent signature is real but the label is
    withheld, mirroring an unlabeled "noisy" phenotype pool that 3-way
    evaluation treats as a third class.
    """
    spec.validate()
    minimum = spec.n_classes * folds
    if n_subjects < minimum:
        raise ConfigurationError(
            f"n_subjects={n_subjects} too small; need at least {minimum} "
            f"({spec.n_classes} classes x {folds} folds)"
        )

    seq = np.random.SeedSequence(spec.seed)
    rng_layout1, rng_layout2, rng_labels, rng_factors, rng_noise, split_seq = (
        seq.spawn(6)
    )
    rng_layout1 = np.random.default_rng(rng_layout1)
    rng_layout2 = np.random.default_rng(rng_layout2)
    rng_labels = np.random.default_rng(rng_labels)
    rng_factors = np.random.default_rng(rng_factors)
    rng_noise = np.random.default_rng(rng_noise)

    side = spec.volume_side
    sigma = side / 8.0
    n_factors = {
        "m1": spec.shared_dim + spec.unique_dim1,
        "m2": spec.shared_dim + spec.unique_dim2,
    }
    centers = {
        "m1": _draw_centers(rng_layout1, n_factors["m1"], side),
        "m2": _draw_centers(rng_layout2, n_factors["m2"], side),
    }
    bases = {m: _blob_bases(centers[m], side, sigma) for m in ("m1", "m2")}

    # Balanced phenotype assignment (counts differ by <= 1), then shuffled.
    phenotypes = np.array(
        [i % spec.n_classes for i in range(n_subjects)], dtype=np.int64
    )
    rng_labels.shuffle(phenotypes)

    k_sig = len(spec.class_signal_dims)
    sig_dims = np.array(spec.class_signal_dims)

    pairs: list[VolumePair] = []
    latents: dict[str, dict] = {}
    labels_for_split: dict[str, int] = {}
    for i in range(n_subjects):
        sid = f"s{i:04d}"
        pheno = int(phenotypes[i])
        shared = rng_factors.normal(size=spec.shared_dim)
        # Signal dims get a magnitude floor and a class-coded sign so the
        # pattern is linearly decodable from the factors.
        signs = _class_sign_pattern(pheno, k_sig)
        shared[sig_dims] = signs * (0.5 + np.abs(shared[sig_dims]))
        u1 = rng_factors.normal(size=spec.unique_dim1)
        u2 = rng_factors.normal(size=spec.unique_dim2)

        vols = {}
        for mod, uniq in (("m1", u1), ("m2", u2)):
            w = np.concatenate([shared, uniq]).astype(np.float32)
            vol = np.tensordot(w, bases[mod], axes=(0, 0))
            if spec.noise_sigma > 0:
                vol = vol + rng_noise.normal(
                    scale=spec.noise_sigma, size=vol.shape
                ).astype(np.float32)
            vols[mod] = minmax_rescale(vol)

        label = pheno
        if spec.n_classes == 3 and pheno == 2:
            label = UNLABELED
        pairs.append(
            VolumePair(
                subject_id=sid,
                vol_m1=vols["m1"],
                vol_m2=vols["m2"],
                label=label,
            )
        )
        labels_for_split[sid] = label
        latents[sid] = {
            "shared": shared,
            "unique_m1": u1,
            "unique_m2": u2,
            "phenotype": pheno,
        }

    split = stratified_split(
        labels_for_split,
        folds=folds,
        holdout_frac=holdout_frac,
        seed=split_seq.generate_state(1)[0],
    )
    atlas = _build_atlas(centers, side, sigma)
    return DatasetManifest(
        pairs=pairs,
        split=split,
        atlas=atlas,
        generator_spec=spec,
        latents=latents,
    )


# ---------------------------------------------------------------------------
# Binary volume format and manifest I/O
# ---------------------------------------------------------------------------

def write_volume(path: str | Path, vol: np.ndarray) -> None:
    """Write a volume: magic 'MSCV', u32 version, 3x u32 dims, f32 C-order."""
    vol = np.ascontiguousarray(vol, dtype="<f4")
    if vol.ndim != 3:
        raise DataError("volume must be 3-D")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        fh.write(struct.pack("<3I", *vol.shape))
        fh.write(vol.tobytes(order="C"))


def read_volume(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _FORMAT_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        dims = struct.unpack("<3I", fh.read(12))
        payload = fh.read()
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise DataError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def _fold_to_json(f: int):
    return "holdout" if f == HOLDOUT_FOLD else f


def _fold_from_json(v) -> int:
    return HOLDOUT_FOLD if v == "holdout" else int(v)


def save_dataset(manifest: DatasetManifest, out_dir: str | Path) -> Path:
    """Write volumes, atlas, and the JSON manifest; returns the JSON path."""
    out = Path(out_dir)
    (out / "vols").mkdir(parents=True, exist_ok=True)
    subjects = []
    for p in manifest.pairs:
        rel1 = f"vols/{p.subject_id}_m1.mscv"
        rel2 = f"vols/{p.subject_id}_m2.mscv"
        write_volume(out / rel1, p.vol_m1)
        write_volume(out / rel2, p.vol_m2)
        subjects.append(
            {
                "id": p.subject_id,
                "m1": rel1,
                "m2": rel2,
                "label": None if p.label == UNLABELED else p.label,
                "fold": _fold_to_json(manifest.split.fold_of[p.subject_id]),
            }
        )
    write_volume(out / "atlas.mscv", manifest.atlas.labels.astype(np.float32))
    spec = manifest.generator_spec
    doc = {
        "format": "mscfusion-manifest",
        "version": 1,
        "generator_spec": {
            "shared_dim": spec.shared_dim,
            "unique_dim1": spec.unique_dim1,
            "unique_dim2": spec.unique_dim2,
            "n_classes": spec.n_classes,
            "class_signal_dims": list(spec.class_signal_dims),
            "noise_sigma": spec.noise_sigma,
            "volume_side": spec.volume_side,
            "seed": spec.seed,
        },
        "folds": manifest.split.folds,
        "atlas": {"path": "atlas.mscv", "roi_names": manifest.atlas.roi_names},
        "subjects": subjects,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def load_dataset(manifest_path: str | Path) -> DatasetManifest:
    path = Path(manifest_path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != "mscfusion-manifest":
        raise DataError(f"{path}: not a dataset manifest")
    base = path.parent
    gs = doc["generator_spec"]
    spec = LatentSpec(
        shared_dim=gs["shared_dim"],
        unique_dim1=gs["unique_dim1"],
        unique_dim2=gs["unique_dim2"],
        n_classes=gs["n_classes"],
        class_signal_dims=tuple(gs["class_signal_dims"]),
        noise_sigma=gs["noise_sigma"],
        volume_side=gs["volume_side"],
        seed=gs["seed"],
    )
    pairs = []
    fold_of = {}
    missing = []
    for s in doc["subjects"]:
        p1 = base / s["m1"]
        p2 = base / s["m2"]
        if not p1.exists() or not p2.exists():
            missing.append(s["id"])
            continue
        pairs.append(
            VolumePair(
                subject_id=s["id"],
                vol_m1=read_volume(p1),
                vol_m2=read_volume(p2),
                label=UNLABELED if s["label"] is None else int(s["label"]),
            )
        )
        fold_of[s["id"]] = _fold_from_json(s["fold"])
    if missing:
        raise DataError(f"missing volumes for subjects: {', '.join(missing)}")
    atlas_labels = read_volume(base / doc["atlas"]["path"]).astype(np.int32)
    atlas = AtlasVolume(
        labels=atlas_labels, roi_names=list(doc["atlas"]["roi_names"])
    )
    split = SplitSpec(fold_of=fold_of, folds=doc["folds"])
    split.validate()
    return DatasetManifest(
        pairs=pairs, split=split, atlas=atlas, generator_spec=spec
    )

"""Dataset loading: manifests, integrity checks, model-ready features.

Volumes come off disk once and are converted straight into the arrays the
model consumes (flattened intensity patches, per-patch label fractions,
optionally rescaled label pixels for the collapsed-embedding ablation).
Splits are stacked into contiguous arrays so training batches are plain
row slices.

Class labels are resolved semantically: the manifest names its positive
class ("AD" or "at_risk") and the loader always maps it to integer 1, so
reported metrics are independent of whatever integer encoding a manifest
happens to carry.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .embed import TokenBatch, label_fractions
from .encoder import EncoderConfig
from .errors import InvalidInputError, InvariantViolationError
from .slicer import TokenLayout, token_layout, volume_patches
from .volio import SegVolume, Volume, load_volume

SPLITS = ("train", "val", "test")


def load_manifest(data_dir) -> dict:
    path = os.path.join(os.fspath(data_dir), "manifest.json")
    if not os.path.exists(path):
        raise InvalidInputError(f"no manifest.json under {data_dir}")
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"corrupt manifest: {e}") from e
    if manifest.get("format") != 1:
        raise InvalidInputError(f"unsupported manifest format {manifest.get('format')!r}")
    return manifest


def manifest_digest(manifest: dict) -> str:
    """Stable digest of the manifest content (sorted-key JSON bytes)."""
    return hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode()
    ).hexdigest()


def verify_files(data_dir, manifest: dict) -> None:
    """Re-hash every referenced file; mismatch is an invariant violation."""
    for rel, digest in manifest["files"].items():
        path = os.path.join(os.fspath(data_dir), rel)
        if not os.path.exists(path):
            raise InvalidInputError(f"manifest references missing file {rel}")
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        if h.hexdigest() != digest:
            raise InvariantViolationError(f"content hash mismatch for {rel}")


def leakage_count(manifest: dict) -> int:
    """Number of subject ids assigned to more than one split."""
    seen: dict[str, str] = {}
    leaks = 0
    for row in manifest["subjects"]:
        prev = seen.setdefault(row["id"], row["split"])
        if prev != row["split"]:
            leaks += 1
    return leaks


@dataclass
class SplitArrays:
    """Stacked features for one split; axes (subject, scan, token, ...)."""

    ids: list[str]
    mri: np.ndarray  # (n, T, N, p*p) float32
    counts: np.ndarray  # (n, T, N, K) float32
    pixels: np.ndarray | None  # (n, T, N, p*p) float32
    labels: np.ndarray  # (n,) int64, positive class == 1

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_scans(self) -> int:
        return self.mri.shape[1]

    def scan_batch(self, rows: np.ndarray, scan: int) -> TokenBatch:
        return TokenBatch(
            mri=self.mri[rows, scan],
            seg_counts=self.counts[rows, scan],
            seg_pixels=None if self.pixels is None else self.pixels[rows, scan],
            labels=self.labels[rows],
        )

    def scan_batches(self, rows: np.ndarray) -> list[TokenBatch]:
        return [self.scan_batch(rows, t) for t in range(self.n_scans)]


@dataclass
class DatasetBundle:
    manifest: dict
    digest: str
    longitudinal: bool
    layout: TokenLayout
    positive_class: str
    splits: dict[str, SplitArrays]

    def split(self, name: str) -> SplitArrays:
        if name not in self.splits:
            raise InvalidInputError(f"no {name!r} split in this dataset")
        return self.splits[name]


def _featurize(vol: Volume, seg: SegVolume, layout: TokenLayout, n_regions: int,
               with_pixels: bool):
    p = layout.patch
    mri = volume_patches(vol, layout.stride, p).reshape(-1, p * p).astype(np.float32)
    lab = volume_patches(seg, layout.stride, p).reshape(-1, p * p)
    counts = label_fractions(lab, n_regions)
    pixels = None
    if with_pixels:
        pixels = (lab.astype(np.float32) / np.float32(n_regions - 1))
    return mri, counts, pixels


def load_dataset(data_dir, cfg: EncoderConfig, *, with_pixels: bool = False,
                 verify: bool = False) -> DatasetBundle:
    """Load a generated dataset into split-stacked model-ready arrays."""
    data_dir = os.fspath(data_dir)
    manifest = load_manifest(data_dir)
    if verify:
        verify_files(data_dir, manifest)
    if leakage_count(manifest):
        raise InvariantViolationError("subject appears in more than one split")

    spec = manifest["spec"]
    if tuple(spec["dims"]) != tuple(cfg.volume_dims):
        raise InvalidInputError(
            f"model expects dims {cfg.volume_dims}, dataset has {tuple(spec['dims'])}"
        )
    if spec["n_classes"] != cfg.n_regions:
        raise InvalidInputError(
            f"model expects {cfg.n_regions} regions, dataset has {spec['n_classes']}"
        )
    layout = token_layout(cfg.volume_dims, cfg.slice_stride, cfg.patch)
    longitudinal = bool(manifest["longitudinal"])
    positive = manifest["positive_class"]
    label_key = "risk_label" if longitudinal else "label"

    by_split: dict[str, list[dict]] = {s: [] for s in SPLITS}
    for row in manifest["subjects"]:
        by_split[row["split"]].append(row)

    splits: dict[str, SplitArrays] = {}
    for split_name, rows in by_split.items():
        if not rows:
            continue
        mri_all, counts_all, pixels_all, labels, ids = [], [], [], [], []
        for row in rows:
            scans = row["scans"] if longitudinal else [row]
            per_scan = [
                _featurize(
                    _load_typed(data_dir, scan["volume"], Volume),
                    _load_typed(data_dir, scan["seg"], SegVolume),
                    layout,
                    cfg.n_regions,
                    with_pixels,
                )
                for scan in scans
            ]
            mri_all.append(np.stack([f[0] for f in per_scan]))
            counts_all.append(np.stack([f[1] for f in per_scan]))
            if with_pixels:
                pixels_all.append(np.stack([f[2] for f in per_scan]))
            labels.append(1 if row[label_key] == positive else 0)
            ids.append(row["id"])
        splits[split_name] = SplitArrays(
            ids=ids,
            mri=np.stack(mri_all),
            counts=np.stack(counts_all),
            pixels=np.stack(pixels_all) if with_pixels else None,
            labels=np.asarray(labels, dtype=np.int64),
        )

    return DatasetBundle(
        manifest=manifest,
        digest=manifest_digest(manifest),
        longitudinal=longitudinal,
        layout=layout,
        positive_class=positive,
        splits=splits,
    )


def _load_typed(data_dir, rel, expected):
    vol = load_volume(os.path.join(data_dir, rel))
    if not isinstance(vol, expected):
        raise InvalidInputError(
            f"{rel} holds a {type(vol).__name__}, expected {expected.__name__}"
        )
    return vol

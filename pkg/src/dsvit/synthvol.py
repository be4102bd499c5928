"""Seeded synthetic volumetric data: anatomy, disease geometry, cohorts.

Each subject is a nested-ellipsoid head phantom. Disease severity ``delta``
in [0, 1] dilates the ventricle radius by (1 + 0.5*delta) and thins the
cortex by (1 - 0.3*delta). Segmentations use hard region boundaries; the
intensity image blends region intensities over a sub-voxel soft boundary,
so small changes in delta move gray values even when no voxel flips its
label.

Two modes:

* ``realistic`` — intensity and segmentation both reflect delta; the binary
  class is AD iff delta > 0.5.
* ``disentangled`` — two independent fair cue bits. The intensity volume is
  rendered from the delta=0 geometry and carries only the texture cue
  (+0.15 in white matter when cue_tex); the segmentation carries only the
  geometry cue (ventricle dilation when cue_geom). Class is AD iff both
  cues are set, so neither stream alone can exceed 0.75 accuracy.

Cohorts are balanced by deterministic per-index quotas rather than by
rejection sampling; equal (spec, seed) always reproduce bit-identical data.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError
from .volio import SegVolume, Volume, save_volume

# Normalized-radius anatomy (unit = half-extent of each axis).
R_SKULL = 0.90
R_CORTEX_OUT = 0.80
CORTEX_THICK0 = 0.18
R_VENT0 = 0.30
FILLER_RING = 0.54
R_FILLER = 0.06
BLEND_W = 0.04  # soft-boundary width for intensity rendering

I_BG = 0.02
I_SKULL = 0.85
I_CORTEX = 0.55
I_WM = 0.70
I_VENT = 0.12
TEX_OFFSET = 0.15  # white-matter intensity offset carried by cue_tex
DISENT_DELTA = 0.8  # geometry severity carried by cue_geom

# Diagnosis thresholds on delta, and sampling bands kept clear of them.
NC_MAX = 0.35
MCI_MAX = 0.50
_BANDS = {"NC": (0.02, 0.33), "MCI": (0.37, 0.48), "AD": (0.52, 0.98)}
_RANK = {"NC": 0, "MCI": 1, "AD": 2}

PROGRESSION_LABELS = ("safe", "at_risk")


def diagnose(delta: float) -> str:
    if delta < NC_MAX:
        return "NC"
    if delta < MCI_MAX:
        return "MCI"
    return "AD"


@dataclass(frozen=True)
class GeneratorSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    n_classes: int = 8
    n_subjects: int = 600
    balance: float = 0.5
    noise_std: float = 0.03
    mode: str = "realistic"
    rate_range: tuple[float, float] = (-0.5, 0.7)
    master_seed: int = 0
    val_fraction: float = 1.0 / 6.0
    test_fraction: float = 1.0 / 6.0

    def __post_init__(self):
        if self.mode not in ("realistic", "disentangled"):
            raise InvalidInputError(f"unknown generator mode {self.mode!r}")
        if len(self.dims) != 3 or any(d < 16 for d in self.dims):
            raise InvalidInputError("dims must be three axes of at least 16 voxels")
        if self.n_classes < 3:
            raise InvalidInputError("need at least 3 region classes")
        if self.n_classes > 95:
            raise InvalidInputError("at most 95 region classes are supported")
        if not 0.0 < self.balance < 1.0:
            raise InvalidInputError("balance must be in (0, 1)")
        if self.rate_range[0] >= self.rate_range[1]:
            raise InvalidInputError("rate_range must be increasing")

    @property
    def split_sizes(self) -> tuple[int, int, int]:
        n_val = round(self.n_subjects * self.val_fraction)
        n_test = round(self.n_subjects * self.test_fraction)
        n_train = self.n_subjects - n_val - n_test
        if n_train <= 0:
            raise InvalidInputError("split fractions leave no training subjects")
        return n_train, n_val, n_test

    def split_of(self, index: int) -> str:
        n_train, n_val, _ = self.split_sizes
        if index < n_train:
            return "train"
        if index < n_train + n_val:
            return "val"
        return "test"

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "n_classes": self.n_classes,
            "n_subjects": self.n_subjects,
            "balance": self.balance,
            "noise_std": self.noise_std,
            "mode": self.mode,
            "rate_range": list(self.rate_range),
            "master_seed": self.master_seed,
            "val_fraction": self.val_fraction,
            "test_fraction": self.test_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown generator spec fields: {sorted(unknown)}")
        if "dims" in known:
            known["dims"] = tuple(known["dims"])
        if "rate_range" in known:
            known["rate_range"] = tuple(known["rate_range"])
        return cls(**known)


@dataclass
class Subject:
    subject_id: str
    index: int
    volume: Volume
    seg: SegVolume
    diagnosis: str
    delta: float
    cue_geom: bool
    cue_tex: bool
    label: str  # binary class: "NC" or "AD"


@dataclass
class LongitudinalRecord:
    subject_id: str
    index: int
    scans: list[tuple[Volume, SegVolume]]
    timestamps: list[float]  # months, strictly increasing
    deltas: list[float]
    diagnoses: list[str]
    future_delta: float
    future_diagnosis: str
    risk_label: str  # "at_risk" or "safe"


# -- geometry ----------------------------------------------------------------


@lru_cache(maxsize=8)
def _coords(dims: tuple[int, int, int]):
    """Per-axis normalized coordinates and the radial field, cached read-only."""
    axes = [
        (np.arange(d, dtype=np.float64) - (d - 1) / 2.0) / (d / 2.0) for d in dims
    ]
    u0 = axes[0][:, None, None]
    u1 = axes[1][None, :, None]
    u2 = axes[2][None, None, :]
    rho = np.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
    rho.setflags(write=False)
    return u0, u1, u2, rho


@lru_cache(maxsize=8)
def _filler_centers(n: int) -> tuple[tuple[float, float, float], ...]:
    """Golden-angle spiral points on the white-matter ring."""
    if n <= 0:
        return ()
    idx = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * idx / n)
    azim = np.pi * (1.0 + 5.0**0.5) * idx
    pts = FILLER_RING * np.stack(
        [np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)],
        axis=1,
    )
    return tuple(tuple(float(v) for v in p) for p in pts)


def _region_ids(n_classes: int) -> dict:
    """Label ids for the anatomy at a given class count.

    Below five classes the shell set degrades: the skull merges into the
    background and/or cortex and white matter merge into one brain region.
    """
    if n_classes >= 5:
        return {"skull": 1, "cortex": 2, "white": 3, "ventricle": 4,
                "n_fillers": n_classes - 5}
    if n_classes == 4:
        return {"skull": 1, "cortex": 2, "white": 2, "ventricle": 3, "n_fillers": 0}
    return {"skull": None, "cortex": 1, "white": 1, "ventricle": 2, "n_fillers": 0}


def ventricle_label(n_classes: int) -> int:
    return _region_ids(n_classes)["ventricle"]


def _radii(delta: float) -> tuple[float, float]:
    """(ventricle radius, cortex inner radius) after disease scaling."""
    vent = R_VENT0 * (1.0 + 0.5 * delta)
    cortex_in = R_CORTEX_OUT - CORTEX_THICK0 * (1.0 - 0.3 * delta)
    return vent, cortex_in


def _segment(dims, delta: float, n_classes: int) -> np.ndarray:
    ids = _region_ids(n_classes)
    u0, u1, u2, rho = _coords(tuple(dims))
    vent, cortex_in = _radii(delta)
    lab = np.zeros(dims, dtype=np.uint16)
    if ids["skull"] is not None:
        lab[rho < R_SKULL] = ids["skull"]
    lab[rho < R_CORTEX_OUT] = ids["cortex"]
    lab[rho < cortex_in] = ids["white"]
    for j, (c0, c1, c2) in enumerate(_filler_centers(ids["n_fillers"])):
        d = np.sqrt((u0 - c0) ** 2 + (u1 - c1) ** 2 + (u2 - c2) ** 2)
        lab[(d < R_FILLER) & (lab == ids["white"])] = 5 + j
    lab[rho < vent] = ids["ventricle"]
    return lab


def _soft_step(d: np.ndarray) -> np.ndarray:
    return np.clip(d / BLEND_W + 0.5, 0.0, 1.0)


def _render_intensity(dims, delta: float, tex_cue: bool, noise_std: float, rng,
                      n_classes: int) -> np.ndarray:
    ids = _region_ids(n_classes)
    u0, u1, u2, rho = _coords(tuple(dims))
    vent, cortex_in = _radii(delta)
    img = np.full(dims, I_BG, dtype=np.float64)
    if ids["skull"] is not None:
        img += (I_SKULL - I_BG) * _soft_step(R_SKULL - rho)
        img += (I_CORTEX - I_SKULL) * _soft_step(R_CORTEX_OUT - rho)
    else:
        img += (I_CORTEX - I_BG) * _soft_step(R_CORTEX_OUT - rho)
    if ids["white"] != ids["cortex"]:
        img += (I_WM - I_CORTEX) * _soft_step(cortex_in - rho)
        wm_inner = I_WM
    else:
        wm_inner = I_CORTEX
    img += (I_VENT - wm_inner) * _soft_step(vent - rho)
    if tex_cue:
        img += TEX_OFFSET * _soft_step(cortex_in - rho) * (1.0 - _soft_step(vent - rho))
    n_fill = ids["n_fillers"]
    for j, (c0, c1, c2) in enumerate(_filler_centers(n_fill)):
        d = np.sqrt((u0 - c0) ** 2 + (u1 - c1) ** 2 + (u2 - c2) ** 2)
        t = _soft_step(R_FILLER - d)
        fill_val = 0.35 + (0.3 * j / max(1, n_fill - 1))
        img = img * (1.0 - t) + fill_val * t
    img += rng.normal(0.0, noise_std, size=dims)
    return img.astype(np.float32)


# -- cohort quotas -----------------------------------------------------------


def _positive_by_quota(index: int, fraction: float) -> bool:
    """Deterministic Bresenham-style schedule hitting ``fraction`` exactly."""
    return int((index + 1) * fraction) > int(index * fraction)


def _cues_for_index(index: int) -> tuple[bool, bool]:
    phase = index % 4
    return phase in (1, 3), phase in (2, 3)


def _subject_rng(spec: GeneratorSpec, index: int, stream: int):
    return np.random.default_rng(
        np.random.SeedSequence((spec.master_seed, index, stream))
    )


# -- public generators -------------------------------------------------------


def generate_subject(spec: GeneratorSpec, subject_index: int, *,
                     cue_override: tuple[bool, bool] | None = None) -> Subject:
    """Render one subject. Deterministic in (spec, subject_index)."""
    if subject_index < 0:
        raise InvalidInputError("subject index must be non-negative")
    delta_rng = _subject_rng(spec, subject_index, 0)
    noise_rng = _subject_rng(spec, subject_index, 1)
    sid = f"s{subject_index:05d}"

    if spec.mode == "disentangled":
        cue_geom, cue_tex = (
            cue_override if cue_override is not None else _cues_for_index(subject_index)
        )
        delta = DISENT_DELTA if cue_geom else 0.0
        seg = SegVolume(_segment(spec.dims, delta, spec.n_classes))
        img = _render_intensity(
            spec.dims, 0.0, cue_tex, spec.noise_std, noise_rng, spec.n_classes
        )
        label = "AD" if (cue_geom and cue_tex) else "NC"
    else:
        is_ad = _positive_by_quota(subject_index, spec.balance)
        band = _BANDS["AD"] if is_ad else _BANDS["NC"]
        delta = float(delta_rng.uniform(*band))
        cue_geom = cue_tex = False
        seg = SegVolume(_segment(spec.dims, delta, spec.n_classes))
        img = _render_intensity(
            spec.dims, delta, False, spec.noise_std, noise_rng, spec.n_classes
        )
        label = "AD" if delta > 0.5 else "NC"

    return Subject(
        subject_id=sid,
        index=subject_index,
        volume=Volume(img),
        seg=seg,
        diagnosis=diagnose(delta),
        delta=delta,
        cue_geom=cue_geom,
        cue_tex=cue_tex,
        label=label,
    )


def _trajectory_targets(index: int) -> tuple[str, str, str]:
    """(risk target, diagnosis at last scan, diagnosis at the hidden next scan)."""
    at_risk = index % 2 == 1
    diag_now = "NC" if (index // 2) % 2 == 0 else "MCI"
    alt = (index // 4) % 2 == 0
    if at_risk:
        diag_next = ("MCI" if alt else "AD") if diag_now == "NC" else "AD"
    else:
        diag_next = "NC" if diag_now == "NC" else ("MCI" if alt else "NC")
    return ("at_risk" if at_risk else "safe"), diag_now, diag_next


def generate_longitudinal(spec: GeneratorSpec, subject_index: int, seq_len: int = 2, *,
                          horizon_months: float = 6.0,
                          delta0: float | None = None,
                          rate: float | None = None) -> LongitudinalRecord:
    """Render a scan sequence plus the hidden next-visit diagnosis.

    Trajectories are linear in delta: the t-th scan (1-based) carries
    clamp(delta0 + rate*(t-1)), the hidden visit carries the step after the
    last scan. The risk label compares the diagnosis at the last scan with
    the hidden visit: any rank increase is "at_risk".

    Without explicit ``delta0``/``rate`` the trajectory is drawn from
    deterministic per-index quotas that balance risk labels exactly and
    keep the last-scan diagnosis uninformative about them.
    """
    if spec.mode != "realistic":
        raise InvalidInputError("longitudinal cohorts use the realistic generator mode")
    if seq_len < 2:
        raise InvalidInputError("sequence length must be at least 2")
    if horizon_months <= 0:
        raise InvalidInputError("horizon must be positive")

    if delta0 is not None or rate is not None:
        if delta0 is None or rate is None:
            raise InvalidInputError("provide both delta0 and rate, or neither")
        deltas = [float(np.clip(delta0 + rate * t, 0.0, 1.0)) for t in range(seq_len + 1)]
    else:
        traj_rng = _subject_rng(spec, subject_index, 0)
        _, diag_now, diag_next = _trajectory_targets(subject_index)
        d_now = float(traj_rng.uniform(*_BANDS[diag_now]))
        lo, hi = _BANDS[diag_next]
        lo = max(lo, d_now + spec.rate_range[0])
        hi = min(hi, d_now + spec.rate_range[1])
        if lo >= hi:
            raise InvalidInputError(
                "rate_range cannot reach the target diagnosis band; widen rate_range"
            )
        d_next = float(traj_rng.uniform(lo, hi))
        step = d_next - d_now
        deltas = [
            float(np.clip(d_now + step * (t - (seq_len - 1)), 0.0, 1.0))
            for t in range(seq_len + 1)
        ]

    diagnoses = [diagnose(d) for d in deltas]
    risk = "at_risk" if _RANK[diagnoses[seq_len]] > _RANK[diagnoses[seq_len - 1]] else "safe"

    scans = []
    for t in range(seq_len):
        scan_rng = np.random.default_rng(
            np.random.SeedSequence((spec.master_seed, subject_index, 100 + t))
        )
        seg = SegVolume(_segment(spec.dims, deltas[t], spec.n_classes))
        img = _render_intensity(
            spec.dims, deltas[t], False, spec.noise_std, scan_rng, spec.n_classes
        )
        scans.append((Volume(img), seg))

    return LongitudinalRecord(
        subject_id=f"s{subject_index:05d}",
        index=subject_index,
        scans=scans,
        timestamps=[horizon_months * t for t in range(seq_len)],
        deltas=deltas[:seq_len],
        diagnoses=diagnoses[:seq_len],
        future_delta=deltas[seq_len],
        future_diagnosis=diagnoses[seq_len],
        risk_label=risk,
    )


# -- dataset writing ---------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_dataset(spec: GeneratorSpec, out_dir, *, longitudinal: bool = False,
                  seq_len: int = 2, horizon_months: float = 6.0) -> dict:
    """Materialize a cohort to disk and return the manifest dict.

    Writes `.dsv` volumes under ``volumes/`` and a deterministic
    ``manifest.json`` (sorted keys, relative paths, per-file sha256).
    """
    if longitudinal and spec.mode == "disentangled":
        raise InvalidInputError("longitudinal cohorts use the realistic mode")
    out_dir = os.fspath(out_dir)
    vol_dir = os.path.join(out_dir, "volumes")
    os.makedirs(vol_dir, exist_ok=True)

    subjects = []
    files: dict[str, str] = {}

    def _store(rel: str, vol) -> str:
        path = os.path.join(out_dir, rel)
        save_volume(path, vol)
        files[rel] = _sha256(path)
        return rel

    for index in range(spec.n_subjects):
        split = spec.split_of(index)
        if longitudinal:
            rec = generate_longitudinal(
                spec, index, seq_len, horizon_months=horizon_months
            )
            scan_rows = []
            for t, (img, seg) in enumerate(rec.scans):
                scan_rows.append({
                    "months": rec.timestamps[t],
                    "delta": rec.deltas[t],
                    "diagnosis": rec.diagnoses[t],
                    "volume": _store(f"volumes/{rec.subject_id}_t{t + 1}_img.dsv", img),
                    "seg": _store(f"volumes/{rec.subject_id}_t{t + 1}_seg.dsv", seg),
                })
            subjects.append({
                "id": rec.subject_id,
                "index": index,
                "split": split,
                "risk_label": rec.risk_label,
                "future_diagnosis": rec.future_diagnosis,
                "scans": scan_rows,
            })
        else:
            subj = generate_subject(spec, index)
            subjects.append({
                "id": subj.subject_id,
                "index": index,
                "split": split,
                "label": subj.label,
                "diagnosis": subj.diagnosis,
                "delta": subj.delta,
                "cue_geom": subj.cue_geom,
                "cue_tex": subj.cue_tex,
                "volume": _store(f"volumes/{subj.subject_id}_img.dsv", subj.volume),
                "seg": _store(f"volumes/{subj.subject_id}_seg.dsv", subj.seg),
            })

    manifest = {
        "format": 1,
        "spec": spec.to_dict(),
        "longitudinal": longitudinal,
        "seq_len": seq_len if longitudinal else 1,
        "horizon_months": horizon_months,
        "label_map": ({"safe": 0, "at_risk": 1} if longitudinal else {"NC": 0, "AD": 1}),
        "positive_class": "at_risk" if longitudinal else "AD",
        "subjects": subjects,
        "files": files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def rebalance_check(manifest: dict, tolerance: float = 0.02) -> dict:
    """Per-split positive-class fractions; raises nothing, returns the table.

    Longitudinal cohorts and the disentangled mode have fixed targets (0.5
    and 0.25); realistic single-timepoint cohorts follow the spec balance.
    """
    positive = manifest["positive_class"]
    key = "risk_label" if manifest["longitudinal"] else "label"
    if manifest["longitudinal"]:
        target = 0.5
    elif manifest["spec"]["mode"] == "disentangled":
        target = 0.25
    else:
        target = manifest["spec"]["balance"]
    out = {}
    for split in ("train", "val", "test"):
        rows = [s for s in manifest["subjects"] if s["split"] == split]
        if rows:
            frac = sum(1 for s in rows if s[key] == positive) / len(rows)
            out[split] = {"n": len(rows), "positive_fraction": frac, "target": target,
                          "within_tolerance": abs(frac - target) <= tolerance}
    return out

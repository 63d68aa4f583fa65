"""Cohort/volume/slice types, synthetic dual-domain phantoms, dataset I/O,
patient-level splits, b-value flattening and augmentation."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import ndimage

Zone = Literal["WG", "TZ"]
Domain = Literal["source", "target"]

DATASET_FORMAT = "dwiseg-dataset"
DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class IntegrityError(RuntimeError):
    """A dataset or checkpoint file is missing, truncated or corrupted."""


@dataclass
class SliceSample:
    image: np.ndarray
    b_value: float
    wg_mask: np.ndarray
    tz_mask: np.ndarray
    patient_id: str
    slice_index: int

    def mask(self, zone: Zone) -> np.ndarray:
        return _zone_masks(self.wg_mask, self.tz_mask, zone)


@dataclass
class PatientVolume:
    """One patient: ``images[k, j]`` is slice ``k`` at ``b_values[j]``.

    Masks are shared across b-values of the same slice.
    """

    patient_id: str
    b_values: tuple[float, ...]
    images: np.ndarray  # (n_slices, n_b, H, W) float32
    wg_masks: np.ndarray  # (n_slices, H, W) uint8
    tz_masks: np.ndarray  # (n_slices, H, W) uint8

    @property
    def n_slices(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[-2], self.images.shape[-1]

    def masks(self, zone: Zone) -> np.ndarray:
        return _zone_masks(self.wg_masks, self.tz_masks, zone)

    def prostate_slices(self, zone: Zone = "WG") -> np.ndarray:
        return np.flatnonzero(self.masks(zone).reshape(self.n_slices, -1).any(axis=1))

    def validate(self) -> None:
        n, nb, h, w = self.images.shape
        if nb != len(self.b_values):
            raise ValueError(f"{self.patient_id}: {nb} images per slice but {len(self.b_values)} b-values")
        for name, m in (("wg_masks", self.wg_masks), ("tz_masks", self.tz_masks)):
            if m.shape != (n, h, w):
                raise ValueError(f"{self.patient_id}: {name} shape {m.shape} != {(n, h, w)}")
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{self.patient_id}: {name} is not binary")
        if (self.tz_masks > self.wg_masks).any():
            raise ValueError(f"{self.patient_id}: TZ mask extends outside WG mask")

    def equals(self, other: "PatientVolume") -> bool:
        return (
            self.patient_id == other.patient_id
            and tuple(self.b_values) == tuple(other.b_values)
            and self.images.dtype == other.images.dtype
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.wg_masks, other.wg_masks)
            and np.array_equal(self.tz_masks, other.tz_masks)
        )


@dataclass
class Cohort:
    domain_tag: Domain
    patients: list[PatientVolume]
    b_values: tuple[float, ...]

    def __post_init__(self) -> None:
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ValueError("patient ids must be unique within a cohort")
        self.b_values = tuple(self.b_values)
        shapes = {p.shape for p in self.patients}
        if len(shapes) > 1:
            raise ValueError(f"patients have differing image shapes: {sorted(shapes)}")
        for p in self.patients:
            if tuple(p.b_values) != self.b_values:
                raise ValueError(f"{p.patient_id}: b-values {p.b_values} != cohort {self.b_values}")

    def __len__(self) -> int:
        return len(self.patients)

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def subset(self, patient_ids: Sequence[str]) -> "Cohort":
        by_id = {p.patient_id: p for p in self.patients}
        return Cohort(self.domain_tag, [by_id[i] for i in patient_ids], self.b_values)

    def equals(self, other: "Cohort") -> bool:
        return (
            self.domain_tag == other.domain_tag
            and self.b_values == other.b_values
            and len(self.patients) == len(other.patients)
            and all(a.equals(b) for a, b in zip(self.patients, other.patients))
        )


def _zone_masks(wg, tz, zone: Zone):
    if zone == "WG":
        return wg
    if zone == "TZ":
        return tz
    raise ValueError(f"unknown zone {zone!r}; expected 'WG' or 'TZ'")


# --------------------------------------------------------------------------
# phantom generator


@dataclass
class DomainShift:
    """Appearance change applied to target-domain phantoms."""

    blur_sigma: float = 1.0
    intensity_scale: float = 0.8
    intensity_offset: float = 0.1
    noise_sigma_target: float = 0.05
    b_values: tuple[float, ...] = (100, 400, 1000, 1600)


@dataclass
class PhantomConfig:
    n_patients: int = 24
    slices_per_patient: int = 16
    height: int = 64
    width: int = 64
    b_values: tuple[float, ...] = (0, 400, 1000, 1600)
    # ADC in mm^2/s
    adc_wg: float = 0.0016
    adc_tz: float = 0.0012
    adc_background: float = 0.0025
    # b=0 signal per tissue
    s0_wg: float = 1.0
    s0_tz: float = 0.8
    s0_background: float = 0.55
    background_texture: float = 0.25
    noise_sigma: float = 0.03
    domain_shift: DomainShift = field(default_factory=DomainShift)
    prostate_slice_fraction: float = 0.5
    # gland geometry, as fractions of the image size
    wg_semi_axes: tuple[float, float] = (0.25, 0.32)
    tz_fraction: float = 0.55
    end_scale: float = 0.6
    # per-patient variability: centre offset (fraction of image size), relative size, rotation (rad)
    center_jitter: float = 0.12
    size_jitter: float = 0.02
    max_rotation: float = 0.4
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.domain_shift, dict):
            self.domain_shift = DomainShift(**self.domain_shift)
        self.b_values = tuple(self.b_values)
        self.domain_shift.b_values = tuple(self.domain_shift.b_values)
        self.wg_semi_axes = tuple(self.wg_semi_axes)
        self.validate()

    def validate(self) -> None:
        if min(self.n_patients, self.slices_per_patient) < 0 or min(self.height, self.width) <= 0:
            raise ValueError("phantom dimensions must be positive")
        if self.slices_per_patient <= 0:
            raise ValueError("slices_per_patient must be positive")
        if not self.b_values or not self.domain_shift.b_values:
            raise ValueError("b_values must be non-empty")
        if not 0 < self.prostate_slice_fraction <= 1:
            raise ValueError("prostate_slice_fraction must lie in (0, 1]")
        sigmas = (self.noise_sigma, self.domain_shift.blur_sigma, self.domain_shift.noise_sigma_target)
        if min(sigmas) < 0:
            raise ValueError("all sigmas must be >= 0")
        if not 0 <= self.center_jitter < 0.5 or not 0 <= self.size_jitter < 1 or self.max_rotation < 0:
            raise ValueError("jitter parameters out of range")
        if not 0 < self.tz_fraction < 1:
            raise ValueError("tz_fraction must lie in (0, 1) so TZ stays strictly inside WG")

    def to_dict(self) -> dict:
        return asdict(self)


def n_prostate_slices(config: PhantomConfig) -> int:
    return max(1, math.floor(config.prostate_slice_fraction * config.slices_per_patient + 0.5))


def _ellipse(h, w, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.uint8)


def _phantom_patient(config: PhantomConfig, domain: Domain, index: int, rng: np.random.Generator) -> PatientVolume:
    h, w, n = config.height, config.width, config.slices_per_patient
    b_values = config.b_values if domain == "source" else config.domain_shift.b_values
    n_pro = n_prostate_slices(config)
    start = int(rng.integers(0, n - n_pro + 1))
    cy = h / 2 + rng.uniform(-1, 1) * config.center_jitter * h
    cx = w / 2 + rng.uniform(-1, 1) * config.center_jitter * w
    jitter = rng.uniform(1 - config.size_jitter, 1 + config.size_jitter, size=2)
    ry = config.wg_semi_axes[0] * h * jitter[0]
    rx = config.wg_semi_axes[1] * w * jitter[1]
    theta = rng.uniform(-1, 1) * config.max_rotation

    wg = np.zeros((n, h, w), np.uint8)
    tz = np.zeros((n, h, w), np.uint8)
    for k in range(n_pro):
        # small at base, widest mid-gland, small again at apex
        t = (k + 0.5) / n_pro
        scale = config.end_scale + (1 - config.end_scale) * math.sin(math.pi * t)
        wg[start + k] = _ellipse(h, w, cy, cx, ry * scale, rx * scale, theta)
        tz[start + k] = _ellipse(h, w, cy, cx, ry * scale * config.tz_fraction, rx * scale * config.tz_fraction, theta)
    tz &= wg

    images = np.empty((n, len(b_values), h, w), np.float32)
    shift = config.domain_shift
    for k in range(n):
        texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 10)
        texture /= texture.std() or 1.0
        s0 = config.s0_background * (1 + config.background_texture * texture)
        adc = np.full((h, w), config.adc_background)
        s0[wg[k] == 1] = config.s0_wg
        adc[wg[k] == 1] = config.adc_wg
        s0[tz[k] == 1] = config.s0_tz
        adc[tz[k] == 1] = config.adc_tz
        for j, b in enumerate(b_values):
            signal = s0 * np.exp(-b * adc)
            if domain == "target":
                if shift.blur_sigma > 0:
                    signal = ndimage.gaussian_filter(signal, shift.blur_sigma)
                signal = signal * shift.intensity_scale + shift.intensity_offset
                sigma = shift.noise_sigma_target
            else:
                sigma = config.noise_sigma
            if sigma > 0:
                signal = signal + rng.normal(0.0, sigma, size=(h, w))
            images[k, j] = signal
    prefix = "S" if domain == "source" else "T"
    return PatientVolume(f"{prefix}{index:04d}", tuple(b_values), images, wg, tz)


def generate_phantom_cohort(config: PhantomConfig, domain: Domain) -> Cohort:
    """Deterministic synthetic cohort for ``domain`` given ``config.rng_seed``."""
    if domain not in ("source", "target"):
        raise ValueError(f"unknown domain {domain!r}")
    config.validate()
    root = np.random.SeedSequence([config.rng_seed, 0 if domain == "source" else 1])
    children = root.spawn(config.n_patients)
    patients = [
        _phantom_patient(config, domain, i, np.random.default_rng(ss)) for i, ss in enumerate(children)
    ]
    b_values = config.b_values if domain == "source" else config.domain_shift.b_values
    return Cohort(domain, patients, tuple(b_values))


# --------------------------------------------------------------------------
# on-disk format


def _b_key(b: float) -> str:
    return f"{b:g}"


def _file_entry(path: Path, data: bytes) -> dict:
    path.write_bytes(data)
    return {"file": path.name, "sha256": hashlib.sha256(data).hexdigest(), "nbytes": len(data)}


def write_dataset(cohort: Cohort, root: str | Path) -> Path:
    """Write ``cohort`` under ``root``; returns the manifest path.

    Images are raw little-endian float32, masks raw uint8 in {0, 1}, row-major.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    h, w = cohort.patients[0].shape if cohort.patients else (0, 0)
    patients = []
    for p in cohort.patients:
        p.validate()
        pdir = root / p.patient_id
        pdir.mkdir(exist_ok=True)
        slices = []
        for k in range(p.n_slices):
            images = {
                _b_key(b): _file_entry(pdir / f"slice{k:03d}_b{_b_key(b)}.f32", p.images[k, j].astype("<f4").tobytes())
                for j, b in enumerate(p.b_values)
            }
            slices.append(
                {
                    "slice_index": k,
                    "images": images,
                    "wg_mask": _file_entry(pdir / f"slice{k:03d}_wg.u8", p.wg_masks[k].astype(np.uint8).tobytes()),
                    "tz_mask": _file_entry(pdir / f"slice{k:03d}_tz.u8", p.tz_masks[k].astype(np.uint8).tobytes()),
                }
            )
        patients.append({"patient_id": p.patient_id, "n_slices": p.n_slices, "slices": slices})
    manifest = {
        "format": DATASET_FORMAT,
        "format_version": DATASET_FORMAT_VERSION,
        "domain_tag": cohort.domain_tag,
        "b_values": list(cohort.b_values),
        "height": h,
        "width": w,
        "patients": patients,
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_raw(path: Path, entry: dict, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    """Read one raw file, verifying presence, size and checksum."""
    if not path.is_file():
        raise IntegrityError(f"missing file: {path}")
    data = path.read_bytes()
    if len(data) != entry["nbytes"] or len(data) != np.dtype(dtype).itemsize * math.prod(shape):
        raise IntegrityError(f"truncated or oversized file: {path} ({len(data)} bytes)")
    if hashlib.sha256(data).hexdigest() != entry["sha256"]:
        raise IntegrityError(f"checksum mismatch: {path}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def load_manifest(root: Path, fmt: str = DATASET_FORMAT, version: int = DATASET_FORMAT_VERSION) -> dict:
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise IntegrityError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt manifest {path}: {exc}") from None
    if manifest.get("format") != fmt:
        raise IntegrityError(f"{path}: expected format {fmt!r}, got {manifest.get('format')!r}")
    if manifest.get("format_version") != version:
        raise IntegrityError(f"{path}: unsupported format version {manifest.get('format_version')!r}")
    return manifest


def read_dataset(root: str | Path) -> Cohort:
    root = Path(root)
    m = load_manifest(root)
    h, w = m["height"], m["width"]
    b_values = tuple(m["b_values"])
    patients = []
    for pe in m["patients"]:
        pid, n = pe["patient_id"], pe["n_slices"]
        pdir = root / pid
        images = np.empty((n, len(b_values), h, w), np.float32)
        wg = np.empty((n, h, w), np.uint8)
        tz = np.empty((n, h, w), np.uint8)
        if [s["slice_index"] for s in pe["slices"]] != list(range(n)):
            raise IntegrityError(f"{pid}: slice indices are not contiguous from 0")
        for s in pe["slices"]:
            k = s["slice_index"]
            for j, b in enumerate(b_values):
                entry = s["images"][_b_key(b)]
                images[k, j] = read_raw(pdir / entry["file"], entry, "<f4", (h, w))
            wg[k] = read_raw(pdir / s["wg_mask"]["file"], s["wg_mask"], "u1", (h, w))
            tz[k] = read_raw(pdir / s["tz_mask"]["file"], s["tz_mask"], "u1", (h, w))
        vol = PatientVolume(pid, b_values, images, wg, tz)
        try:
            vol.validate()
        except ValueError as exc:
            raise IntegrityError(str(exc)) from None
        patients.append(vol)
    return Cohort(m["domain_tag"], patients, b_values)


# --------------------------------------------------------------------------
# splits


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    """Apportion ``total`` items by ``ratios`` with largest-remainder rounding."""
    if any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"invalid ratios {ratios}")
    quotas = [total * r / sum(ratios) for r in ratios]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split_cohort(
    cohort: Cohort,
    *,
    ratios: Sequence[float] | None = None,
    sizes: Sequence[int] | None = None,
    seed: int = 0,
) -> tuple[Cohort, ...]:
    """Patient-level split into disjoint cohorts, by ratios or explicit counts."""
    if (ratios is None) == (sizes is None):
        raise ValueError("give exactly one of ratios or sizes")
    n = len(cohort)
    if sizes is None:
        sizes = largest_remainder(n, ratios)
    if any(s < 0 for s in sizes) or sum(sizes) > n:
        raise ValueError(f"requested split sizes {list(sizes)} exceed cohort of {n} patients")
    order = np.random.default_rng(seed).permutation(n)
    ids = [cohort.patients[i].patient_id for i in order]
    parts, start = [], 0
    for s in sizes:
        parts.append(cohort.subset(ids[start : start + s]))
        start += s
    return tuple(parts)


def finetune_splits(
    cohort: Cohort, sizes: Sequence[int], test_size: int, seed: int = 0
) -> tuple[dict[int, Cohort], Cohort]:
    """Fixed test set plus nested fine-tune subsets drawn from the remaining pool.

    The test set depends only on ``(cohort, test_size, seed)``; subsets are
    prefixes of one permutation of the pool, so smaller sets are contained in
    larger ones.
    """
    n = len(cohort)
    if test_size < 0 or (sizes and max(sizes) + test_size > n) or test_size > n:
        raise ValueError(f"fine-tune sizes {list(sizes)} + test {test_size} exceed cohort of {n} patients")
    if any(s < 0 for s in sizes):
        raise ValueError("fine-tune sizes must be non-negative")
    order = np.random.default_rng(seed).permutation(n)
    ids = [cohort.patients[i].patient_id for i in order]
    test = cohort.subset(ids[:test_size])
    pool = ids[test_size:]
    return {s: cohort.subset(pool[:s]) for s in sizes}, test


# --------------------------------------------------------------------------
# samples


def enumerate_slices(cohort: Cohort, zone: Zone) -> list[SliceSample]:
    """Flatten every (slice, b-value) pair into an independent sample."""
    _zone_masks(None, None, zone)
    out = []
    for p in cohort.patients:
        for k in range(p.n_slices):
            for j, b in enumerate(p.b_values):
                out.append(SliceSample(p.images[k, j], b, p.wg_masks[k], p.tz_masks[k], p.patient_id, k))
    return out


def stack_samples(cohort: Cohort, zone: Zone) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`enumerate_slices`: images (N, H, W), masks (N, H, W)."""
    if not cohort.patients:
        h = w = 0
        return np.empty((0, h, w), np.float32), np.empty((0, h, w), np.uint8)
    images = np.concatenate([p.images.reshape(-1, *p.shape) for p in cohort.patients])
    masks = np.concatenate([np.repeat(p.masks(zone), len(p.b_values), axis=0) for p in cohort.patients])
    return images, masks


def _transform(arr: np.ndarray, hflip: bool, vflip: bool, angle: float, is_mask: bool) -> np.ndarray:
    if hflip:
        arr = arr[:, ::-1]
    if vflip:
        arr = arr[::-1, :]
    if angle % 90 == 0:
        arr = np.rot90(arr, int(angle // 90) % 4)
    else:
        arr = ndimage.rotate(
            arr, angle, reshape=False, order=0 if is_mask else 1, mode="constant" if is_mask else "nearest"
        )
    return np.ascontiguousarray(arr)


def draw_augmentation(rng: np.random.Generator, max_angle: float = 15.0) -> tuple[bool, bool, float]:
    hflip, vflip = (bool(v) for v in rng.random(2) < 0.5)
    return hflip, vflip, float(rng.uniform(-max_angle, max_angle))


def augment_arrays(image, masks: Sequence[np.ndarray], params: tuple[bool, bool, float]):
    hflip, vflip, angle = params
    img = _transform(image, hflip, vflip, angle, is_mask=False)
    return img, [_transform(m, hflip, vflip, angle, is_mask=True) for m in masks]


def augment_slice(
    sample: SliceSample,
    seed: int,
    *,
    hflip: bool | None = None,
    vflip: bool | None = None,
    angle: float | None = None,
    max_angle: float = 15.0,
) -> SliceSample:
    """Random flips and a small rotation, applied identically to image and masks.

    Any of ``hflip``, ``vflip``, ``angle`` may be forced. Masks are resampled
    with nearest-neighbour interpolation and stay binary.
    """
    drawn = draw_augmentation(np.random.default_rng(seed), max_angle)
    params = (
        drawn[0] if hflip is None else hflip,
        drawn[1] if vflip is None else vflip,
        drawn[2] if angle is None else angle,
    )
    img, (wg, tz) = augment_arrays(sample.image, [sample.wg_mask, sample.tz_mask], params)
    return replace(sample, image=img, wg_mask=wg, tz_mask=tz)


# --------------------------------------------------------------------------
# predicted mask volumes

MASKS_FORMAT = "dwiseg-masks"


def write_masks(masks: dict[str, np.ndarray], root: str | Path, zone: Zone) -> Path:
    """Write per-patient (n_slices, H, W) binary masks as raw uint8 files plus a manifest."""
    _zone_masks(None, None, zone)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    shapes = {m.shape[1:] for m in masks.values()}
    if len(shapes) > 1:
        raise ValueError(f"mask volumes have differing slice shapes: {sorted(shapes)}")
    h, w = shapes.pop() if shapes else (0, 0)
    patients = []
    for pid in sorted(masks):
        vol = np.asarray(masks[pid])
        if not np.isin(vol, (0, 1)).all():
            raise ValueError(f"{pid}: masks must be binary")
        pdir = root / pid
        pdir.mkdir(exist_ok=True)
        slices = [
            {"slice_index": k, "mask": _file_entry(pdir / f"slice{k:03d}_{zone.lower()}.u8", vol[k].astype(np.uint8).tobytes())}
            for k in range(vol.shape[0])
        ]
        patients.append({"patient_id": pid, "n_slices": vol.shape[0], "slices": slices})
    manifest = {
        "format": MASKS_FORMAT,
        "format_version": DATASET_FORMAT_VERSION,
        "zone": zone,
        "height": h,
        "width": w,
        "patients": patients,
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_masks(root: str | Path) -> tuple[dict[str, np.ndarray], Zone]:
    root = Path(root)
    m = load_manifest(root, MASKS_FORMAT)
    h, w = m["height"], m["width"]
    out = {}
    for pe in m["patients"]:
        vol = np.empty((pe["n_slices"], h, w), np.uint8)
        for s in pe["slices"]:
            vol[s["slice_index"]] = read_raw(root / pe["patient_id"] / s["mask"]["file"], s["mask"], "u1", (h, w))
        out[pe["patient_id"]] = vol
    return out, m["zone"]

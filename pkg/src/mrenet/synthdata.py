"""Deterministic synthetic 3D cohorts plus a portable binary volume format.

Every subject is a smooth random deformation of one shared anatomy template,
so subjects resemble each other while boundaries and voxel counts vary.  Each
of the K-1 structure categories owns several spatially separate blobs — one
per intensity sub-mode — interleaved around a ring, and adjacent categories'
sub-mode means collide, so a category is identified only by the joint
(position, intensity) combination: exactly the within-category variation a
multi-prototype classifier feeds on.  Per-subject intensity jitter and voxel
noise come on top.  One structure is deliberately tiny so a minority/majority
category split is meaningful.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from mrenet.binio import FormatError, Reader, Writer
from mrenet.tensor import ConfigError

VOLUME_MAGIC = b"MREVOL1\0"
DTYPE_CODES = {0: "<f4", 1: "u1"}
DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}

BACKGROUND_MEAN = 0.1
STRUCTURE_MEAN_RANGE = (0.3, 0.9)
# With categories spaced 0.2 apart a spread of 0.2 makes adjacent
# categories' sub-mode means coincide exactly, so intensity alone can
# never separate them.
MODE_SPREAD = 0.2           # intensity distance between adjacent sub-modes
SMALL_STRUCTURE_FRACTION = 0.012   # target voxel share of the tiny structure
WARP_SMOOTH_SIGMA = (2.0, 5.0, 5.0)   # smoothing of the displacement field
MAX_REGEN_ATTEMPTS = 8


@dataclass(frozen=True)
class CohortSpec:
    subjects: int = 7
    k: int = 5                      # categories including background
    extents: tuple[int, int, int] = (48, 48, 12)   # (H, W, D)
    modes_per_class: int = 3
    deform_sigma: float = 0.45     # displacement std in voxels
    intensity_jitter: float = 0.05
    noise_sigma: float = 0.02
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.subjects < 1:
            raise ConfigError(f"subjects must be >= 1, got {self.subjects}")
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        h, w, d = self.extents
        if h % 4 or w % 4:
            raise ConfigError(
                f"extents H and W must be divisible by 4, got ({h}, {w})")
        if d % 2:
            raise ConfigError(f"extent D must be divisible by 2, got {d}")
        if self.modes_per_class < 1:
            raise ConfigError(
                f"modes_per_class must be >= 1, got {self.modes_per_class}")
        for name in ("deform_sigma", "intensity_jitter", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"spacing must be positive, got {self.spacing}")

    @property
    def extents_dhw(self) -> tuple[int, int, int]:
        h, w, d = self.extents
        return (d, h, w)


@dataclass
class Subject:
    image: np.ndarray               # [C,D,H,W] float32
    labels: np.ndarray              # [D,H,W] uint8, categories from 1
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    name: str = ""


@dataclass(frozen=True)
class Template:
    labels: np.ndarray              # [D,H,W] uint8
    modes: np.ndarray               # [D,H,W] uint8 sub-mode index
    mode_means: np.ndarray          # [k+1, modes_per_class] intensity means


def _structure_means(k: int) -> np.ndarray:
    n = k - 1
    lo, hi = STRUCTURE_MEAN_RANGE
    if n == 1:
        return np.array([hi])
    return lo + (hi - lo) * np.arange(n) / (n - 1)


def build_template(spec: CohortSpec) -> Template:
    """Shared anatomy: every structure category owns ``modes_per_class``
    ellipsoidal blobs, one per intensity sub-mode (the last category's are
    tiny).  Slots interleave the categories around a jittered ring, so one
    category's blobs sit far apart while adjacent categories' mode means
    collide — neither position nor intensity alone identifies a category.
    Voxels are assigned by strongest-field-wins so blobs never overlap."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    d, h, w = spec.extents_dhw
    zz, yy, xx = np.mgrid[:d, :h, :w].astype(np.float64)
    n_struct = spec.k - 1
    m = spec.modes_per_class
    slots = n_struct * m

    fields = np.full((slots, d, h, w), -np.inf)
    cat_of_slot = np.empty(slots, dtype=np.int64)
    mode_of_slot = np.empty(slots, dtype=np.int64)
    small_target = SMALL_STRUCTURE_FRACTION * d * h * w / m
    for s in range(slots):
        j = s % n_struct
        cat_of_slot[s] = 2 + j
        mode_of_slot[s] = s // n_struct
        angle = 2 * math.pi * s / slots + rng.uniform(-0.3, 0.3) / m
        radius_frac = 0.34 + rng.uniform(-0.02, 0.02)
        cy = h / 2 + radius_frac * h * math.sin(angle)
        cx = w / 2 + radius_frac * w * math.cos(angle)
        cz = d / 2 + rng.uniform(-0.08, 0.08) * d
        if j == n_struct - 1 and n_struct > 1:
            # tiny structure: pick radii for the target share of voxels
            rz = max(1.5, d * 0.14)
            ryx = math.sqrt(small_target / (4.0 / 3.0 * math.pi * rz))
            ry = rx = max(1.8, ryx)
        else:
            rz = d * (0.30 + rng.uniform(-0.04, 0.04))
            ry = h * (0.16 + rng.uniform(-0.02, 0.02)) / math.sqrt(m)
            rx = w * (0.16 + rng.uniform(-0.02, 0.02)) / math.sqrt(m)
        fields[s] = 1.0 - (((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2
                           + ((xx - cx) / rx) ** 2)

    best_slot = fields.argmax(axis=0)
    inside = fields.max(axis=0) > 0.0
    labels = np.where(inside, cat_of_slot[best_slot], 1).astype(np.uint8)
    modes = np.where(inside, mode_of_slot[best_slot], 0).astype(np.uint8)

    means = np.zeros((spec.k + 1, spec.modes_per_class))
    offsets = MODE_SPREAD * (np.arange(spec.modes_per_class)
                             - (spec.modes_per_class - 1) / 2.0)
    means[1] = BACKGROUND_MEAN            # background is single-mode
    for j, base in enumerate(_structure_means(spec.k)):
        means[2 + j] = base + offsets
    return Template(labels=labels, modes=modes, mode_means=means)


def _clean_intensity(template: Template, jitter_factors: np.ndarray
                     ) -> np.ndarray:
    """Noise-free intensity on the template grid: category/sub-mode mean
    scaled by the subject's per-category jitter factor."""
    img = template.mode_means[template.labels.astype(np.int64),
                              template.modes.astype(np.int64)]
    return img * jitter_factors[template.labels.astype(np.int64)]


def _warp(clean: np.ndarray, labels: np.ndarray, displacement: np.ndarray):
    d, h, w = labels.shape
    grid = np.mgrid[:d, :h, :w].astype(np.float64)
    coords = grid + displacement
    warped_img = ndimage.map_coordinates(clean, coords, order=1,
                                         mode="nearest")
    warped_lab = ndimage.map_coordinates(labels, coords, order=0,
                                         mode="nearest")
    return warped_img, warped_lab


def _synthesize_subject(spec: CohortSpec, template: Template, index: int,
                        deform_sigma: float) -> Subject:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, index]))
    d, h, w = spec.extents_dhw
    # Draw order is fixed so dampened regeneration only rescales the warp.
    raw_field = rng.normal(size=(3, d, h, w))
    jitter_z = rng.normal(size=spec.k + 1)
    noise = rng.normal(size=(d, h, w))

    jitter_factors = 1.0 + spec.intensity_jitter * jitter_z
    clean = _clean_intensity(template, jitter_factors)
    if deform_sigma > 0.0:
        field = np.stack([
            ndimage.gaussian_filter(raw_field[a], WARP_SMOOTH_SIGMA)
            for a in range(3)])
        std = field.std()
        if std > 0:
            field *= deform_sigma / std
        image, labels = _warp(clean, template.labels, field)
    else:
        image, labels = clean.copy(), template.labels.copy()
    image = image + spec.noise_sigma * noise
    return Subject(image=image.astype(np.float32)[None],
                   labels=labels.astype(np.uint8),
                   spacing=spec.spacing, name=f"subject_{index:02d}")


def synthesize_cohort(spec: CohortSpec) -> list[Subject]:
    """Deterministic in-memory cohort. Every category is present in every
    subject; a warp that erases a structure is retried with half the
    displacement (with a warning), matching the degenerate-spec contract."""
    template = build_template(spec)
    missing = [c for c in range(1, spec.k + 1)
               if not (template.labels == c).any()]
    if missing:
        raise ConfigError(
            f"template lost categories {missing}; extents {spec.extents} "
            f"are too small for k={spec.k}")
    subjects = []
    for i in range(spec.subjects):
        sigma = spec.deform_sigma
        for attempt in range(MAX_REGEN_ATTEMPTS):
            subject = _synthesize_subject(spec, template, i, sigma)
            present = np.isin(np.arange(1, spec.k + 1), subject.labels)
            if present.all():
                break
            sigma *= 0.5
            warnings.warn(
                f"subject {i}: structure vanished under deformation; "
                f"retrying with dampened warp sigma={sigma:g}",
                RuntimeWarning, stacklevel=2)
        else:
            raise ConfigError(
                f"subject {i} still lost a category after "
                f"{MAX_REGEN_ATTEMPTS} dampened attempts")
        subjects.append(subject)
    return subjects


# -- binary volume format ----------------------------------------------------

def write_volume(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a [C,D,H,W] float32 or uint8 array as an MREVOL1 file."""
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ConfigError(f"expected [C,D,H,W] volume, got shape {arr.shape}")
    code = DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise ConfigError(
            f"unsupported dtype {arr.dtype}; use float32 or uint8")
    w = Writer()
    w.raw(VOLUME_MAGIC)
    w.u32(code)
    for n in arr.shape:
        w.u32(n)
    for s in spacing:
        w.f32(float(s))
    w.array(arr, DTYPE_CODES[code])
    Path(path).write_bytes(w.getvalue())


def read_volume(path):
    """Read an MREVOL1 file -> ([C,D,H,W] array, spacing tuple)."""
    r = Reader(Path(path).read_bytes(), label=str(path))
    r.expect_magic(VOLUME_MAGIC)
    code = r.u32()
    dtype = DTYPE_CODES.get(code)
    if dtype is None:
        raise FormatError(f"{path}: unknown dtype code {code}")
    shape = tuple(r.u32() for _ in range(4))
    spacing = tuple(r.f32() for _ in range(3))
    data = r.array(dtype, int(np.prod(shape))).reshape(shape)
    r.done()
    return data, spacing


# -- manifest ----------------------------------------------------------------

MANIFEST_NAME = "cohort.manifest"


@dataclass
class CohortManifest:
    spec: CohortSpec
    entries: list[tuple[str, str]]      # (image file, label file), relative

    def to_text(self) -> str:
        s = self.spec
        h, w, d = s.extents
        lines = [
            "mre-cohort-manifest",
            (f"  spec: subjects={s.subjects} k={s.k} extents={h}x{w}x{d} "
             f"modes-per-class={s.modes_per_class} "
             f"deform-sigma={s.deform_sigma:.17g} "
             f"intensity-jitter={s.intensity_jitter:.17g} "
             f"noise-sigma={s.noise_sigma:.17g} seed={s.seed}"),
            ("  spacing: " + " ".join(f"{v:.17g}" for v in s.spacing)),
        ]
        for img, lab in self.entries:
            lines.append(f"  subject: image={img} labels={lab}")
        return "\n".join(lines) + "\n"


def _parse_kv(chunk: str, prefix: str, line: str):
    if not chunk.startswith(prefix + "="):
        raise FormatError(f"manifest: expected '{prefix}=...' in {line!r}")
    return chunk[len(prefix) + 1:]


def parse_manifest(text: str) -> CohortManifest:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "mre-cohort-manifest":
        raise FormatError("manifest: missing 'mre-cohort-manifest' header")
    spec_line = lines[1].strip()
    if not spec_line.startswith("spec: "):
        raise FormatError(f"manifest: expected spec line, got {spec_line!r}")
    parts = spec_line[len("spec: "):].split()
    vals = dict(p.split("=", 1) for p in parts)
    h, w, d = (int(v) for v in vals["extents"].split("x"))
    spacing_line = lines[2].strip()
    if not spacing_line.startswith("spacing: "):
        raise FormatError(
            f"manifest: expected spacing line, got {spacing_line!r}")
    spacing = tuple(float(v) for v in spacing_line[len("spacing: "):].split())
    spec = CohortSpec(
        subjects=int(vals["subjects"]), k=int(vals["k"]), extents=(h, w, d),
        modes_per_class=int(vals["modes-per-class"]),
        deform_sigma=float(vals["deform-sigma"]),
        intensity_jitter=float(vals["intensity-jitter"]),
        noise_sigma=float(vals["noise-sigma"]), spacing=spacing,
        seed=int(vals["seed"]))
    entries = []
    for line in lines[3:]:
        line = line.strip()
        if not line.startswith("subject: "):
            raise FormatError(f"manifest: expected subject line, got {line!r}")
        img_part, lab_part = line[len("subject: "):].split()
        entries.append((_parse_kv(img_part, "image", line),
                        _parse_kv(lab_part, "labels", line)))
    if len(entries) != spec.subjects:
        raise FormatError(
            f"manifest: spec says {spec.subjects} subjects but "
            f"{len(entries)} are listed")
    return CohortManifest(spec=spec, entries=entries)


def generate_cohort(spec: CohortSpec, out_dir) -> CohortManifest:
    """Synthesize the cohort and write volumes plus a manifest to disk."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = synthesize_cohort(spec)
    entries = []
    for s in subjects:
        img_name = f"{s.name}.image.mrevol"
        lab_name = f"{s.name}.labels.mrevol"
        write_volume(out / img_name, s.image, s.spacing)
        write_volume(out / lab_name, s.labels[None], s.spacing)
        entries.append((img_name, lab_name))
    manifest = CohortManifest(spec=spec, entries=entries)
    (out / MANIFEST_NAME).write_text(manifest.to_text(), encoding="utf-8")
    return manifest


def load_cohort(manifest_path) -> tuple[CohortSpec, list[Subject]]:
    """Read a manifest and its volumes, validating extents against the spec."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = parse_manifest(path.read_text(encoding="utf-8"))
    base = path.parent
    d, h, w = manifest.spec.extents_dhw
    subjects = []
    for i, (img_name, lab_name) in enumerate(manifest.entries):
        image, spacing = read_volume(base / img_name)
        labels, lab_spacing = read_volume(base / lab_name)
        if image.shape[1:] != (d, h, w):
            raise FormatError(
                f"{img_name}: extents {image.shape[1:]} do not match the "
                f"manifest spec {(d, h, w)}")
        if labels.shape != (1, d, h, w):
            raise FormatError(
                f"{lab_name}: extents {labels.shape} do not match the "
                f"manifest spec {(1, d, h, w)}")
        if labels.dtype != np.uint8:
            raise FormatError(f"{lab_name}: label volumes must be uint8")
        subjects.append(Subject(
            image=image.astype(np.float32), labels=labels[0],
            spacing=spacing, name=Path(img_name).name.split(".")[0]))
    return manifest.spec, subjects

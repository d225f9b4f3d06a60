"""Synthetic ground truth: key silhouettes, marker-framed scenes, augmentations.

The *canvas* is the normalized key frame: an upright render of the key at
``px_per_mm`` with a fixed margin. A scene annotation's ``theta`` maps scene
pixels onto canvas pixels, so ``warp_image(scene, theta, *canvas_size)``
rectifies the key.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .bitting import BitMask, BittingCode, KeySpec, bitting_surface, validate_macs
from .errors import AugmentationClipsKey, EmptyDataset, KeyOutOfFrame, MacsViolation, ManifestParse
from .geometry import PerspectiveParams, apply_homography_points, homography_from_correspondences, warp_image
from .imageio import read_image, write_image, write_mask


@dataclass(frozen=True)
class RenderStyle:
    """Silhouette geometry that is not part of the key spec (mm)."""

    root_width_mm: float = 0.8
    stub_width_mm: float = 4.0
    stub_bottom_mm: float = 6.0
    stub_top_mm: float = 20.0
    margin_mm: float = 1.0

    def canvas_mm(self, spec: KeySpec) -> tuple[float, float]:
        width = 2 * self.margin_mm + self.stub_width_mm + spec.blade_length_mm
        height = 2 * self.margin_mm + max(self.stub_top_mm, spec.blade_height_mm)
        return width, height

    def canvas_size(self, spec: KeySpec, px_per_mm: float) -> tuple[int, int]:
        w, h = self.canvas_mm(spec)
        return int(round(w * px_per_mm)), int(round(h * px_per_mm))


def sample_code(rng: np.random.Generator, spec: KeySpec) -> BittingCode:
    """Random MACS-valid code: each cut drawn uniformly within reach of the previous."""
    n = spec.depth_chart.num_depths
    depths = [int(rng.integers(0, n))]
    for _ in range(spec.pin_count - 1):
        lo = max(0, depths[-1] - spec.macs)
        hi = min(n - 1, depths[-1] + spec.macs)
        depths.append(int(rng.integers(lo, hi + 1)))
    return BittingCode(tuple(depths))


def _check_code(code: BittingCode, spec: KeySpec) -> None:
    if validate_macs(code, spec):
        raise MacsViolation(f"code {code} violates MACS {spec.macs}")
    if any(d < 0 or d >= spec.depth_chart.num_depths for d in code):
        raise MacsViolation(f"code {code} has depths outside the chart")


def render_key_mask(
    code: BittingCode, spec: KeySpec, px_per_mm: float, style: RenderStyle | None = None
) -> BitMask:
    """Upright key silhouette with exact shoulder/tip keypoints.

    A pixel is foreground when its center lies inside the key outline.
    """
    if px_per_mm <= 0:
        raise ValueError("px_per_mm must be positive")
    _check_code(code, spec)
    style = style or RenderStyle()
    width, height = style.canvas_size(spec, px_per_mm)
    top_mm = style.margin_mm + max(style.stub_top_mm, spec.blade_height_mm)
    u = (np.arange(width) + 0.5) / px_per_mm - (style.margin_mm + style.stub_width_mm)
    v = top_mm - (np.arange(height) + 0.5) / px_per_mm

    in_blade = (u >= 0) & (u < spec.blade_length_mm)
    surface = bitting_surface(code, spec, u, style.root_width_mm)
    blade = (v[:, None] >= 0) & (v[:, None] < surface[None, :]) & in_blade[None, :]
    in_stub = (u >= -style.stub_width_mm) & (u < 0)
    stub = (v[:, None] >= style.stub_bottom_mm) & (v[:, None] < style.stub_top_mm) & in_stub[None, :]

    cols = np.flatnonzero(blade.any(axis=0))
    bottom = int(np.flatnonzero(blade.any(axis=1))[-1])
    keypoints = ((int(cols[0]), bottom), (int(cols[-1]), bottom))
    return BitMask(blade | stub, keypoints)


@dataclass
class SceneAnnotation:
    scene_id: str
    image: str
    box: tuple[float, float, float, float]  # x0, y0, x1, y1 in pixel-edge coordinates
    theta: PerspectiveParams
    flip: bool
    mask: str
    code: BittingCode
    corners: list[tuple[float, float]] | None
    seed: int
    px_per_mm: float
    canvas_size: tuple[int, int]
    frame: bool = True

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "image": self.image,
            "box": [float(v) for v in self.box],
            "theta": self.theta.to_list(),
            "flip": bool(self.flip),
            "mask": self.mask,
            "code": str(self.code),
            "corners": None if self.corners is None else [[float(x), float(y)] for x, y in self.corners],
            "seed": int(self.seed),
            "px_per_mm": float(self.px_per_mm),
            "canvas_size": [int(v) for v in self.canvas_size],
            "frame": bool(self.frame),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneAnnotation":
        return cls(
            scene_id=str(d["scene_id"]),
            image=str(d["image"]),
            box=tuple(float(v) for v in d["box"]),
            theta=PerspectiveParams(tuple(d["theta"])),
            flip=bool(d["flip"]),
            mask=str(d.get("mask", "")),
            code=BittingCode.parse(d["code"]),
            corners=None if d.get("corners") is None else [tuple(map(float, c)) for c in d["corners"]],
            seed=int(d["seed"]),
            px_per_mm=float(d["px_per_mm"]),
            canvas_size=tuple(int(v) for v in d["canvas_size"]),
            frame=bool(d.get("frame", True)),
        )


@dataclass(frozen=True)
class SceneConfig:
    px_per_mm: float = 27.0
    scene_size: tuple[int, int] = (1024, 1024)
    style: RenderStyle = field(default_factory=RenderStyle)
    max_rotation_deg: float = 8.0
    scale_range: tuple[float, float] = (0.95, 1.05)
    corner_jitter_px: float = 12.0
    key_tone: float = 0.78
    noise_sigma: float = 0.015
    blur_sigma: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["style"] = RenderStyle(**d.get("style", {}))
        d["scene_size"] = tuple(d.get("scene_size", (1024, 1024)))
        d["scale_range"] = tuple(d.get("scale_range", (0.95, 1.05)))
        return cls(**d)


def canonical_corners(canvas_size: tuple[int, int]) -> np.ndarray:
    w, h = canvas_size
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def key_box(mask: BitMask, theta: PerspectiveParams) -> tuple[float, float, float, float]:
    """Scene-space bounding box of the key: outer pixel corners mapped through theta^-1."""
    bits = mask.bits
    edge = bits & ~_erode4(bits)
    ys, xs = np.nonzero(edge)
    corners = np.concatenate(
        [np.column_stack((xs + dx, ys + dy)) for dx in (-0.5, 0.5) for dy in (-0.5, 0.5)]
    )
    pts = apply_homography_points(theta.inverse(), corners)
    # back to pixel-edge coordinates (pixel centers sit at integers)
    x0, y0 = pts.min(axis=0) + 0.5
    x1, y1 = pts.max(axis=0) + 0.5
    return (float(math.floor(x0)), float(math.floor(y0)), float(math.ceil(x1)), float(math.ceil(y1)))


def _erode4(bits: np.ndarray) -> np.ndarray:
    out = bits.copy()
    out[1:] &= bits[:-1]
    out[:-1] &= bits[1:]
    out[:, 1:] &= bits[:, :-1]
    out[:, :-1] &= bits[:, 1:]
    out[0] = out[-1] = False
    out[:, 0] = out[:, -1] = False
    return out


def _footprint(theta: PerspectiveParams, canvas_size, scene_size) -> tuple[int, int, int, int]:
    cw, ch = canvas_size
    edges = np.array([[-1.0, -1.0], [cw, -1.0], [cw, ch], [-1.0, ch]])
    pts = apply_homography_points(theta.inverse(), edges)
    sw, sh = scene_size
    x0 = int(np.clip(math.floor(pts[:, 0].min()) - 1, 0, sw - 1))
    y0 = int(np.clip(math.floor(pts[:, 1].min()) - 1, 0, sh - 1))
    x1 = int(np.clip(math.ceil(pts[:, 0].max()) + 2, x0 + 1, sw))
    y1 = int(np.clip(math.ceil(pts[:, 1].max()) + 2, y0 + 1, sh))
    return x0, y0, x1, y1


def _box_inside(box, size) -> bool:
    w, h = size
    return box[0] >= 0 and box[1] >= 0 and box[2] <= w and box[3] <= h


def make_background(rng: np.random.Generator, size: tuple[int, int], lo: float = 0.05, hi: float = 0.35) -> np.ndarray:
    """Smooth dark clutter: a coarse random grid, bilinearly upsampled."""
    w, h = size
    coarse = rng.uniform(lo, hi, size=(9, 9)).astype(np.float32)
    up = Image.fromarray(coarse, mode="F").resize((w, h), Image.BILINEAR)
    return np.clip(np.asarray(up, dtype=np.float64), 0.0, 1.0)


def _draw_marker(img: np.ndarray, center, half: float) -> None:
    h, w = img.shape[:2]
    cx, cy = center
    for size, value in ((half, 0.0), (0.5 * half, 1.0)):
        x0, x1 = int(math.floor(cx - size + 0.5)), int(math.floor(cx + size + 0.5))
        y0, y1 = int(math.floor(cy - size + 0.5)), int(math.floor(cy + size + 0.5))
        img[max(y0, 0) : max(min(y1, h), 0), max(x0, 0) : max(min(x1, w), 0)] = value


def compose_scene(
    mask: BitMask,
    background: np.ndarray,
    theta: PerspectiveParams,
    frame: bool,
    seed: int,
    *,
    code: BittingCode | None = None,
    px_per_mm: float = 0.0,
    scene_id: str = "scene",
    key_tone: float = 0.78,
    noise_sigma: float = 0.015,
    blur_sigma: float = 0.0,
) -> tuple[np.ndarray, SceneAnnotation]:
    """Shade the silhouette, warp it into ``background`` and optionally add markers.

    ``theta`` maps scene pixels to mask (canvas) pixels. Deterministic in ``seed``.
    """
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim == 3:
        bg = bg.mean(axis=2)
    h, w = bg.shape
    box = key_box(mask, theta)
    if not _box_inside(box, (w, h)):
        raise KeyOutOfFrame(f"key box {box} leaves the {w}x{h} background")

    rng = np.random.default_rng(seed)
    tone = key_tone + rng.normal(0.0, 0.02)
    # only the canvas footprint can receive key pixels
    x0, y0, x1, y1 = _footprint(theta, (mask.width, mask.height), (w, h))
    local = theta.inverse().then(PerspectiveParams.translation(-x0, -y0))
    alpha = warp_image(mask.bits.astype(np.float64), local, x1 - x0, y1 - y0)
    texture = tone + rng.normal(0.0, 0.02, size=alpha.shape)
    scene = bg.copy()
    scene[y0:y1, x0:x1] = alpha * texture + (1.0 - alpha) * bg[y0:y1, x0:x1]
    noise = rng.normal(0.0, noise_sigma, size=scene.shape)

    canvas_size = (mask.width, mask.height)
    corners = None
    if frame:
        corners = apply_homography_points(theta.inverse(), canonical_corners(canvas_size))
        half = max(3.0, 0.018 * min(canvas_size))
        for c in corners:
            _draw_marker(scene, c, half)
        corners = [tuple(map(float, c)) for c in corners]
    if blur_sigma > 0:
        from scipy.ndimage import gaussian_filter

        scene = gaussian_filter(scene, blur_sigma)
    scene = np.clip(scene + noise, 0.0, 1.0)

    ann = SceneAnnotation(
        scene_id=scene_id,
        image="",
        box=box,
        theta=theta,
        flip=False,
        mask="",
        code=code if code is not None else BittingCode(()),
        corners=corners,
        seed=int(seed),
        px_per_mm=float(px_per_mm),
        canvas_size=canvas_size,
        frame=bool(frame),
    )
    return scene, ann


def random_theta(
    rng: np.random.Generator,
    mask: BitMask,
    scene_size: tuple[int, int],
    config: SceneConfig,
    max_tries: int = 50,
) -> PerspectiveParams:
    """Random mild perspective placing the canvas so the key stays inside the scene."""
    cw, ch = mask.width, mask.height
    sw, sh = scene_size
    canon = canonical_corners((cw, ch))
    centered = canon - np.array([(cw - 1) / 2.0, (ch - 1) / 2.0])
    for _ in range(max_tries):
        angle = math.radians(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
        scale = rng.uniform(*config.scale_range)
        rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        pts = scale * centered @ rot.T
        pts += rng.uniform(-config.corner_jitter_px, config.corner_jitter_px, size=pts.shape)
        slack_x = max(0.0, (sw - (pts[:, 0].max() - pts[:, 0].min())) / 2.0 - 8.0)
        slack_y = max(0.0, (sh - (pts[:, 1].max() - pts[:, 1].min())) / 2.0 - 8.0)
        pts += np.array([(sw - 1) / 2.0 + rng.uniform(-slack_x, slack_x), (sh - 1) / 2.0 + rng.uniform(-slack_y, slack_y)])
        theta = homography_from_correspondences(pts, canon)
        if _box_inside(key_box(mask, theta), scene_size):
            return theta
    raise KeyOutOfFrame("could not place the key inside the scene")


def generate_scene(
    code: BittingCode,
    spec: KeySpec,
    seed: int,
    config: SceneConfig | None = None,
    *,
    frame: bool = True,
    scene_id: str = "scene",
) -> tuple[np.ndarray, SceneAnnotation, BitMask]:
    """Render, place and compose one scene. Same arguments give identical output."""
    config = config or SceneConfig()
    mask = render_key_mask(code, spec, config.px_per_mm, config.style)
    rng = np.random.default_rng(seed)
    background = make_background(rng, config.scene_size)
    theta = random_theta(rng, mask, config.scene_size, config)
    compose_seed = int(rng.integers(0, 2**31 - 1))
    img, ann = compose_scene(
        mask,
        background,
        theta,
        frame,
        compose_seed,
        code=code,
        px_per_mm=config.px_per_mm,
        scene_id=scene_id,
        key_tone=config.key_tone,
        noise_sigma=config.noise_sigma,
        blur_sigma=config.blur_sigma,
    )
    ann.seed = int(seed)
    return img, ann, mask


@dataclass(frozen=True)
class AugmentParams:
    """Zoom about the image center (zoom > 1 crops), then shift, then mirror columns."""

    scale: float = 1.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    flip: bool = False

    def transform(self, size: tuple[int, int]) -> PerspectiveParams:
        w, h = size
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        s = self.scale
        m = np.array([[s, 0.0, cx - s * cx + self.shift_x], [0.0, s, cy - s * cy + self.shift_y], [0.0, 0.0, 1.0]])
        if self.flip:
            m = np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ m
        return PerspectiveParams.from_matrix(m)


def sample_augment_params(rng: np.random.Generator, size: tuple[int, int]) -> AugmentParams:
    w, h = size
    return AugmentParams(
        scale=float(rng.uniform(0.9, 1.12)),
        shift_x=float(rng.uniform(-0.06, 0.06) * w),
        shift_y=float(rng.uniform(-0.06, 0.06) * h),
        flip=bool(rng.random() < 0.5),
    )


def _apply_augment(img: np.ndarray, ann: SceneAnnotation, params: AugmentParams) -> tuple[np.ndarray, SceneAnnotation]:
    h, w = img.shape[:2]
    a = params.transform((w, h))
    # box is in pixel-edge coordinates: shift to centers, map, shift back
    edge = apply_homography_points(a, np.array([[ann.box[0], ann.box[1]], [ann.box[2], ann.box[3]]]) - 0.5) + 0.5
    box = (
        float(edge[:, 0].min()),
        float(edge[:, 1].min()),
        float(edge[:, 0].max()),
        float(edge[:, 1].max()),
    )
    if not _box_inside(box, (w, h)):
        raise AugmentationClipsKey(f"augmented key box {box} leaves the image")

    theta = ann.theta if params == AugmentParams() else a.inverse().then(ann.theta)
    corners = ann.corners
    if corners is not None:
        corners = [tuple(map(float, c)) for c in apply_homography_points(a, corners)]
    flip = ann.flip
    if params.flip:
        # a mirrored scene would need a det < 0 theta; keep theta orientation-preserving
        # by mirroring the canvas vertically and recording that in the flip flag
        cw, ch = ann.canvas_size
        v = PerspectiveParams.from_matrix([[1.0, 0.0, 0.0], [0.0, -1.0, ch - 1.0], [0.0, 0.0, 1.0]])
        theta = theta.then(v)
        if corners is not None:
            corners = [corners[3], corners[2], corners[1], corners[0]]
        flip = not flip
    out = img if params == AugmentParams() else warp_image(img, a, w, h)
    return out, replace(ann, box=box, theta=theta, corners=corners, flip=flip)


def augment(
    img: np.ndarray,
    ann: SceneAnnotation,
    seed: int,
    params: AugmentParams | None = None,
    max_tries: int = 10,
) -> tuple[np.ndarray, SceneAnnotation]:
    """Seeded crop/scale/shift/flip; the annotation is rewritten to stay consistent."""
    if params is not None:
        return _apply_augment(img, ann, params)
    rng = np.random.default_rng(seed)
    size = (img.shape[1], img.shape[0])
    last: Exception | None = None
    for _ in range(max_tries):
        try:
            return _apply_augment(img, ann, sample_augment_params(rng, size))
        except AugmentationClipsKey as exc:
            last = exc
    raise AugmentationClipsKey(f"no valid augmentation in {max_tries} tries: {last}")


# ---------------------------------------------------------------- manifests

MANIFEST = "manifest.jsonl"


def generate_dataset(
    out_dir: str | Path,
    count: int,
    seed: int,
    spec: KeySpec | None = None,
    config: SceneConfig | None = None,
    *,
    frame: bool = True,
) -> Path:
    """Write ``count`` scenes, their canvas masks and a JSON Lines manifest."""
    spec = spec or KeySpec.default()
    config = config or SceneConfig()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    header = {
        "type": "header",
        "seed": int(seed),
        "count": int(count),
        "frame": bool(frame),
        "keyspec": spec.to_dict(),
        "scene": config.to_dict(),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(count):
        code = sample_code(rng, spec)
        scene_seed = int(rng.integers(0, 2**31 - 1))
        sid = f"scene_{i:04d}"
        img, ann, mask = generate_scene(code, spec, scene_seed, config, frame=frame, scene_id=sid)
        ann.image = f"images/{sid}.png"
        ann.mask = f"masks/{sid}.png"
        write_image(out / ann.image, img)
        write_mask(out / ann.mask, mask.bits)
        lines.append(json.dumps({"type": "scene", **ann.to_dict()}, sort_keys=True))
    path = out / MANIFEST
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@dataclass
class Manifest:
    path: Path
    header: dict
    scenes: list[SceneAnnotation]

    @property
    def root(self) -> Path:
        return self.path.parent

    @property
    def spec(self) -> KeySpec:
        return KeySpec.from_dict(self.header["keyspec"]) if "keyspec" in self.header else KeySpec.default()

    @property
    def scene_config(self) -> SceneConfig:
        return SceneConfig.from_dict(self.header["scene"]) if "scene" in self.header else SceneConfig()

    def load_image(self, ann: SceneAnnotation) -> np.ndarray:
        return read_image(self.root / ann.image)


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestParse(0, f"cannot read {path}: {exc}") from exc
    header: dict = {}
    scenes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
            if rec.get("type") == "header":
                header = rec
            else:
                scenes.append(SceneAnnotation.from_dict(rec))
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestParse(lineno, str(exc)) from exc
    if not scenes:
        raise EmptyDataset(f"{path} lists no scenes")
    return Manifest(path, header, scenes)

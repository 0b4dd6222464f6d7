"""On-disk sample layout, manifests, resizing and bucketing.

A sample lives in its own directory::

    <root>/<sample_id>/
        manifest.json  source.png  background.png
        layer_1_rgb.png  layer_1_alpha.png  ...  shadow.png

Colors and alpha are 8-bit PNG. The signed shadow residual is a 16-bit RGB
PNG storing ``round((s + 1) / 2 * 65535)``. The manifest is written last and
atomically, so a directory counts as a sample only once its manifest parses.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import cv2
import numpy as np

from .core import ForegroundLayer, LayeredSample
from .fusion import bilinear_resize

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
ROUNDTRIP_TOLERANCE = 3 / 255


class DatasetError(Exception):
    pass


class SchemaVersionError(DatasetError):
    pass


class ManifestError(DatasetError):
    """Manifest missing required fields or not valid JSON."""


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class InvariantViolation(DatasetError, ValueError):
    pass


# -- PNG codecs ----------------------------------------------------------------

def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def encode_rgb8(image: np.ndarray) -> bytes:
    q = _round_half_up(np.clip(image, 0, 1) * 255).astype(np.uint8)
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(q[:, :, ::-1]))
    if not ok:
        raise DatasetError("PNG encoding failed")
    return buf.tobytes()


def encode_gray8(mask: np.ndarray) -> bytes:
    q = _round_half_up(np.clip(mask, 0, 1) * 255).astype(np.uint8)
    ok, buf = cv2.imencode(".png", q)
    if not ok:
        raise DatasetError("PNG encoding failed")
    return buf.tobytes()


def encode_shadow16(shadow: np.ndarray) -> bytes:
    q = _round_half_up((np.clip(shadow, -1, 1) + 1.0) / 2.0 * 65535).astype(np.uint16)
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(q[:, :, ::-1]))
    if not ok:
        raise DatasetError("PNG encoding failed")
    return buf.tobytes()


def _decode(data: bytes) -> np.ndarray:
    arr = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise InvariantViolation("file is not a decodable PNG")
    return arr


def decode_rgb8(data: bytes) -> np.ndarray:
    arr = _decode(data)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise InvariantViolation(f"expected 8-bit RGB PNG, got {arr.dtype} {arr.shape}")
    return arr[:, :, 2::-1].astype(np.float64) / 255.0


def decode_gray8(data: bytes) -> np.ndarray:
    arr = _decode(data)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise InvariantViolation(f"expected 8-bit single-channel PNG, got {arr.dtype} {arr.shape}")
    return arr.astype(np.float64) / 255.0


def decode_shadow16(data: bytes) -> np.ndarray:
    arr = _decode(data)
    if arr.dtype != np.uint16 or arr.ndim != 3 or arr.shape[2] != 3:
        raise InvariantViolation(f"expected 16-bit RGB PNG, got {arr.dtype} {arr.shape}")
    return arr[:, :, ::-1].astype(np.float64) / 65535 * 2.0 - 1.0


def read_image(path) -> np.ndarray:
    """Load any 8-bit PNG/JPEG as an RGB float image."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise MissingFileError(str(path)) from exc
    arr = _decode(data)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[:, :, :3]
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr[:, :, ::-1].astype(np.float64) / scale


def write_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_rgb8(image))


# -- manifests -------------------------------------------------------------------

ASPECT_BINS = (("1:2", 1, 2), ("9:16", 9, 16), ("3:4", 3, 4), ("1:1", 1, 1), ("4:3", 4, 3), ("16:9", 16, 9), ("2:1", 2, 1))


@dataclass(frozen=True, order=True)
class BucketKey:
    aspect_bin: str
    layer_count: int

    def __str__(self):
        return f"{self.aspect_bin}/{self.layer_count}"


@dataclass
class SampleManifest:
    sample_id: str
    width: int
    height: int
    source_path: str
    background_path: str
    layers: list
    shadow_path: Optional[str] = None
    provenance: dict = field(default_factory=dict)
    bucket_key: Optional[BucketKey] = None
    schema_version: int = SCHEMA_VERSION
    path: Optional[Path] = field(default=None, compare=False)

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "sample_id": self.sample_id,
            "width": self.width,
            "height": self.height,
            "source_path": self.source_path,
            "background_path": self.background_path,
            "layers": [dict(l) for l in self.layers],
            "shadow_path": self.shadow_path,
            "provenance": self.provenance,
            "bucket_key": None if self.bucket_key is None else {
                "aspect_bin": self.bucket_key.aspect_bin,
                "layer_count": self.bucket_key.layer_count,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict, path=None) -> "SampleManifest":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        try:
            layers = [
                {"rgb_path": l["rgb_path"], "alpha_path": l["alpha_path"], "order_index": int(l["order_index"])}
                for l in d["layers"]
            ]
            bk = d.get("bucket_key")
            return cls(
                sample_id=d["sample_id"],
                width=int(d["width"]),
                height=int(d["height"]),
                source_path=d["source_path"],
                background_path=d["background_path"],
                layers=layers,
                shadow_path=d.get("shadow_path"),
                provenance=d.get("provenance") or {},
                bucket_key=None if bk is None else BucketKey(bk["aspect_bin"], int(bk["layer_count"])),
                schema_version=version,
                path=None if path is None else Path(path),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from exc


def load_manifest(path) -> SampleManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise MissingFileError(str(path)) from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    return SampleManifest.from_dict(d, path)


def aspect_bin(width: int, height: int, bins=ASPECT_BINS) -> str:
    """Nearest bin in log aspect ratio; exact ties go to the narrower bin."""
    r = math.log(width / height)
    best, best_d = None, math.inf
    for label, bw, bh in sorted(bins, key=lambda b: math.log(b[1] / b[2])):
        d = abs(r - math.log(bw / bh))
        if d < best_d - 1e-12:
            best, best_d = label, d
    return best


def bucket_key_for(width: int, height: int, layer_count: int, bins=ASPECT_BINS) -> BucketKey:
    return BucketKey(aspect_bin(width, height, bins), int(layer_count))


def bucketize(manifests: Iterable[SampleManifest], bins=ASPECT_BINS) -> dict:
    buckets: dict = {}
    for m in manifests:
        key = bucket_key_for(m.width, m.height, m.layer_count, bins)
        buckets.setdefault(key, []).append(m)
    return dict(sorted(buckets.items()))


# -- sample IO -------------------------------------------------------------------

def write_sample(sample: LayeredSample, sample_dir, provenance: Optional[dict] = None) -> SampleManifest:
    """Write a sample's PNGs, then commit its manifest atomically."""
    sample_dir = Path(sample_dir)
    if not 1 <= len(sample.layers) <= 5:
        raise InvariantViolation(f"curated samples hold 1 to 5 layers, got {len(sample.layers)}")
    h, w = sample.shape
    manifest = SampleManifest(
        sample_id=sample_dir.name,
        width=w,
        height=h,
        source_path="source.png",
        background_path="background.png",
        layers=[
            {"rgb_path": f"layer_{l.order_index}_rgb.png", "alpha_path": f"layer_{l.order_index}_alpha.png", "order_index": l.order_index}
            for l in sample.layers
        ],
        shadow_path="shadow.png" if sample.shadow is not None else None,
        provenance=provenance or {},
        bucket_key=bucket_key_for(w, h, len(sample.layers)),
        path=sample_dir / MANIFEST_NAME,
    )
    try:
        sample_dir.mkdir(parents=True, exist_ok=True)
        # an old manifest must not outlive a partial rewrite
        (sample_dir / MANIFEST_NAME).unlink(missing_ok=True)
        _write_bytes(sample_dir / manifest.source_path, encode_rgb8(sample.source))
        _write_bytes(sample_dir / manifest.background_path, encode_rgb8(sample.background))
        for layer, entry in zip(sample.layers, manifest.layers):
            _write_bytes(sample_dir / entry["rgb_path"], encode_rgb8(layer.rgb))
            _write_bytes(sample_dir / entry["alpha_path"], encode_gray8(layer.alpha))
        if sample.shadow is not None:
            _write_bytes(sample_dir / manifest.shadow_path, encode_shadow16(sample.shadow))
        tmp = sample_dir / (MANIFEST_NAME + ".tmp")
        _write_bytes(tmp, manifest.to_json().encode())
        os.replace(tmp, sample_dir / MANIFEST_NAME)
    except OSError as exc:
        (sample_dir / (MANIFEST_NAME + ".tmp")).unlink(missing_ok=True)
        raise DatasetError(f"failed writing sample {sample_dir}: {exc}") from exc
    return manifest


def _write_bytes(path: Path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def _read(sample_dir: Path, rel: str) -> bytes:
    p = sample_dir / rel
    try:
        return p.read_bytes()
    except FileNotFoundError as exc:
        raise MissingFileError(f"{p} referenced by manifest is missing") from exc


def read_sample(manifest_path, check_roundtrip: bool = True) -> LayeredSample:
    manifest = manifest_path if isinstance(manifest_path, SampleManifest) else load_manifest(manifest_path)
    if manifest.path is None:
        raise ManifestError("manifest has no location on disk")
    sample_dir = manifest.path.parent
    indices = sorted(l["order_index"] for l in manifest.layers)
    if indices != list(range(1, len(indices) + 1)):
        raise InvariantViolation(f"layer order indices {indices} are not contiguous from 1")
    source = decode_rgb8(_read(sample_dir, manifest.source_path))
    background = decode_rgb8(_read(sample_dir, manifest.background_path))
    expected = (manifest.height, manifest.width)
    layers = []
    for entry in manifest.layers:
        rgb = decode_rgb8(_read(sample_dir, entry["rgb_path"]))
        alpha = decode_gray8(_read(sample_dir, entry["alpha_path"]))
        if rgb.shape[:2] != expected or alpha.shape != expected:
            raise InvariantViolation(f"layer {entry['order_index']} dims do not match {expected}")
        layers.append(ForegroundLayer(rgb=rgb, alpha=alpha, order_index=entry["order_index"]))
    shadow = None
    if manifest.shadow_path:
        shadow = decode_shadow16(_read(sample_dir, manifest.shadow_path))
    for name, arr in (("source", source), ("background", background), ("shadow", shadow)):
        if arr is not None and arr.shape[:2] != expected:
            raise InvariantViolation(f"{name} dims {arr.shape[:2]} do not match {expected}")
    try:
        sample = LayeredSample(source=source, background=background, layers=layers, shadow=shadow)
    except ValueError as exc:
        raise InvariantViolation(str(exc)) from exc
    if check_roundtrip and shadow is not None:
        err = sample.roundtrip_error()
        if err > ROUNDTRIP_TOLERANCE:
            raise InvariantViolation(
                f"{manifest.sample_id}: composite + shadow misses source by {err:.5f} (> {ROUNDTRIP_TOLERANCE:.5f})"
            )
    return sample


def iter_manifests(root) -> list[SampleManifest]:
    """Manifests of every committed sample directly under ``root``, sorted by id.

    Directories without a parseable manifest are skipped.
    """
    out = []
    root = Path(root)
    if not root.is_dir():
        return out
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        mpath = d / MANIFEST_NAME
        if not mpath.is_file():
            continue
        try:
            out.append(load_manifest(mpath))
        except DatasetError as exc:
            logger.warning("ignoring %s: %s", d, exc)
    return out


def resize_within(image, max_side: int = 1024) -> np.ndarray:
    """Bilinear downscale so neither side exceeds ``max_side``. Never upscales."""
    if max_side < 1:
        raise ValueError("max_side must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if max(h, w) <= max_side:
        return image.copy()
    scale = max_side / max(h, w)
    nh = max(1, int(_round_half_up(np.float64(h * scale))))
    nw = max(1, int(_round_half_up(np.float64(w * scale))))
    nh, nw = min(nh, max_side), min(nw, max_side)
    return np.clip(bilinear_resize(image, nh, nw), 0.0, 1.0)

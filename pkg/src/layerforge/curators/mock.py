"""Deterministic stand-ins for the agent, editor, segmenters, embedder and verifier.

The mocks read the pixels they are given rather than looking scenes up, so
they work on any image that follows the synthetic-scene conventions:
low-saturation backgrounds that vary only along y, hard-edged saturated
objects, and optional cast shadows that darken the background.

``MockServer`` exposes the same services over loopback HTTP using the
production wire protocol, with optional fault injection.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import numpy as np
from scipy import ndimage

from ..core import ForegroundLayer, LayeredSample, composite, shadow_residual
from ..degradation import blur_boundary, dilate_alpha
from ..selector import ChromaLayoutEmbedder
from .services import (
    ServiceBundle,
    ToolEndpoints,
    b64_image,
    b64_mask,
    sample_from_wire,
    unb64_image,
)

logger = logging.getLogger(__name__)

SATURATION_THRESHOLD = 0.2
MIN_AREA_FRACTION = 0.003
WHITE_THRESHOLD = 0.98

PALETTE = (
    (0.90, 0.15, 0.15),
    (0.15, 0.55, 0.90),
    (0.95, 0.80, 0.10),
    (0.20, 0.75, 0.30),
    (0.70, 0.25, 0.85),
    (0.95, 0.50, 0.10),
)


# -- synthetic scenes -----------------------------------------------------------

@dataclass
class SyntheticScene:
    image: np.ndarray
    background: np.ndarray
    layers: list
    shadow_factor: np.ndarray  # multiplicative darkening applied to the background

    @property
    def sample(self) -> LayeredSample:
        rendered = composite(self.background, self.layers)
        return LayeredSample(self.image, self.background, self.layers, shadow_residual(self.image, rendered))


def _shape_mask(h, w, kind, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rect":
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def make_scene(seed: int, height: int = 96, width: int = 128, n_objects: int = 2, shadows: bool = True) -> SyntheticScene:
    """Random scene with non-overlapping hard-edged objects.

    Layer 1 is the largest object. The background is a vertical gradient
    between two grayish colors; each shadow is the object's silhouette shifted
    down-right, darkening the background to 70%.
    """
    rng = np.random.default_rng(seed)
    top = 0.55 + 0.2 * rng.random() + rng.uniform(-0.03, 0.03, 3)
    bottom = 0.45 + 0.2 * rng.random() + rng.uniform(-0.03, 0.03, 3)
    ramp = np.linspace(0.0, 1.0, height)[:, None, None]
    background = np.clip(top[None, None, :] * (1 - ramp) + bottom[None, None, :] * ramp, 0, 1)
    background = np.broadcast_to(background, (height, width, 3)).copy()

    colors = rng.permutation(len(PALETTE))
    occupied = np.zeros((height, width), dtype=bool)
    shapes = []
    for n in range(n_objects):
        for _ in range(200):
            ry = int(rng.integers(height // 10, height // 5))
            rx = int(rng.integers(width // 10, width // 5))
            cy = int(rng.integers(ry + 2, height - ry - 8))
            cx = int(rng.integers(rx + 2, width - rx - 8))
            kind = "rect" if rng.random() < 0.5 else "ellipse"
            m = _shape_mask(height, width, kind, cy, cx, ry, rx)
            footprint = dilate_alpha(m.astype(float), 6) > 0
            if not (footprint & occupied).any():
                occupied |= footprint
                shapes.append((m, np.array(PALETTE[colors[n]])))
                break
        else:
            raise RuntimeError(f"could not place object {n} in scene {seed}")
    shapes.sort(key=lambda s: -s[0].sum())

    factor = np.ones((height, width))
    if shadows:
        for m, _ in shapes:
            shifted = np.zeros_like(m)
            shifted[3:, 3:] = m[:-3, :-3]
            factor[shifted] = 0.7
    image = background * factor[:, :, None]
    layers = []
    for k, (m, color) in enumerate(shapes, start=1):
        rgb = np.ones((height, width, 3))
        rgb[m] = color
        layers.append(ForegroundLayer(rgb=rgb, alpha=m.astype(float), order_index=k))
    image = composite(image, layers)
    return SyntheticScene(image=image, background=background, layers=layers, shadow_factor=factor)


# -- pixel analysis ----------------------------------------------------------------

def saturation(image: np.ndarray) -> np.ndarray:
    return image.max(axis=2) - image.min(axis=2)


def find_entities(image: np.ndarray) -> list[dict]:
    """Saturated connected components, largest first."""
    h, w = image.shape[:2]
    labels, n = ndimage.label(saturation(image) > SATURATION_THRESHOLD, structure=np.ones((3, 3)))
    out = []
    for lab in range(1, n + 1):
        m = labels == lab
        area = int(m.sum())
        if area < MIN_AREA_FRACTION * h * w:
            continue
        ys, xs = np.nonzero(m)
        color = np.median(image[m], axis=0)
        out.append({
            "mask": m,
            "area": area,
            "bbox": (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1),
            "color": color,
        })
    out.sort(key=lambda e: (-e["area"], e["bbox"]))
    return out


def describe(entity: dict) -> str:
    y0, x0, y1, x1 = entity["bbox"]
    r, g, b = (int(round(c * 255)) for c in entity["color"])
    return f"entity bbox={y0},{x0},{y1},{x1} color=#{r:02x}{g:02x}{b:02x}"


_BBOX = re.compile(r"bbox=(\d+),(\d+),(\d+),(\d+)")


def _bbox_iou(a, b) -> float:
    iy = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ix = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iy * ix
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union else 0.0


def locate(image: np.ndarray, text: str) -> Optional[dict]:
    m = _BBOX.search(text or "")
    if not m:
        return None
    want = tuple(int(v) for v in m.groups())
    best, best_iou = None, 0.5
    for e in find_entities(image):
        iou = _bbox_iou(e["bbox"], want)
        if iou > best_iou:
            best, best_iou = e, iou
    return best


def row_background(image: np.ndarray, exclude: np.ndarray) -> np.ndarray:
    """Per-row median color over pixels outside ``exclude``."""
    h, w = image.shape[:2]
    est = np.empty((h, 3))
    fallback = np.median(image[~exclude], axis=0) if (~exclude).any() else np.ones(3)
    for y in range(h):
        keep = ~exclude[y]
        est[y] = np.median(image[y, keep], axis=0) if keep.any() else fallback
    return np.broadcast_to(est[:, None, :], image.shape)


# -- services -------------------------------------------------------------------------

class MockAgent:
    def detect_foreground(self, image):
        ents = find_entities(np.asarray(image))
        if not ents:
            return {"present": False, "description": ""}
        return {"present": True, "description": describe(ents[0])}

    def removal_instruction(self, image, description):
        return f"Remove the {description} together with its accessories, attached parts and cast shadow; fill in the background."

    def background_removal_instruction(self, image, description):
        return f"Keep only the {description} and its visually attached parts; replace everything else with pure white."


class MockEditor:
    """Removes or isolates the entity named by bbox in the instruction.

    Unrecognized instructions return the input unchanged.
    """

    def apply(self, image, instruction):
        image = np.asarray(image, dtype=np.float64)
        target = locate(image, instruction)
        if target is None:
            return image.copy()
        if instruction.lstrip().lower().startswith("keep"):
            out = np.ones_like(image)
            out[target["mask"]] = image[target["mask"]]
            return out
        all_sat = saturation(image) > SATURATION_THRESHOLD
        est = row_background(image, all_sat)
        region = np.zeros(image.shape[:2], dtype=bool)
        y0, x0, y1, x1 = target["bbox"]
        pad_y, pad_x = (y1 - y0) // 2 + 4, (x1 - x0) // 2 + 4
        region[max(0, y0 - pad_y) : y1 + pad_y, max(0, x0 - pad_x) : x1 + pad_x] = True
        lum, est_lum = image.mean(axis=2), est.mean(axis=2)
        others = all_sat & ~target["mask"]
        shadow = region & ~all_sat & (lum < est_lum - 0.03)
        # grow one pixel to catch edge pixels, but never into another entity
        grown = ndimage.binary_dilation(target["mask"], structure=np.ones((3, 3))) & ~others
        remove = grown | shadow
        out = image.copy()
        out[remove] = est[remove]
        return out


class ThresholdSegmenter:
    """Non-white pixels of a white-background crop; optional blur or dilation."""

    def __init__(self, mode: str = "hard"):
        if mode not in ("hard", "soft", "dilated"):
            raise ValueError(f"unknown segmenter mode {mode!r}")
        self.mode = mode

    def segment(self, image):
        m = (np.asarray(image).min(axis=2) < WHITE_THRESHOLD).astype(np.float64)
        if self.mode == "soft":
            return np.maximum(m, blur_boundary(m, 0.8)) if m.any() else m
        if self.mode == "dilated":
            return dilate_alpha(m, 1)
        return m


class RuleVerifier:
    """Accepts a sample when every layer covers a plausible share of the frame
    and the background matches the source away from the foregrounds."""

    def __init__(self, min_coverage=0.005, max_coverage=0.90, diff_threshold=0.25, max_dirty_fraction=0.005, support_threshold=0.05):
        self.min_coverage = min_coverage
        self.max_coverage = max_coverage
        self.diff_threshold = diff_threshold
        self.max_dirty_fraction = max_dirty_fraction
        self.support_threshold = support_threshold

    def verify(self, rendered, sample: LayeredSample):
        reasons = []
        for layer in sample.layers:
            cov = float(layer.alpha.mean())
            if not self.min_coverage <= cov <= self.max_coverage:
                reasons.append(f"layer {layer.order_index} alpha coverage {cov:.4f} outside [{self.min_coverage}, {self.max_coverage}]")
        rendered = np.asarray(rendered, dtype=np.float64)
        # soft matte edges blend in white by construction; judge only settled pixels
        settled = np.ones(sample.shape, dtype=bool)
        for layer in sample.layers:
            settled &= (layer.alpha < self.support_threshold) | (layer.alpha > 1 - self.support_threshold)
        bad = (np.abs(rendered - sample.source).max(axis=2) > self.diff_threshold) & settled
        off = float(bad.mean())
        if off > self.max_dirty_fraction:
            reasons.append(f"rendered composition disagrees with source on {off:.2%} of the frame")
        support = np.zeros(sample.shape, dtype=bool)
        for layer in sample.layers:
            support |= layer.alpha >= self.support_threshold
        outside = ~support
        if outside.any():
            diff = np.abs(sample.source - sample.background).max(axis=2)
            dirty = float((diff[outside] > self.diff_threshold).mean())
            if dirty > self.max_dirty_fraction:
                reasons.append(f"background differs from source on {dirty:.2%} of the frame outside foreground support")
        return {"accept": not reasons, "reasons": reasons}


def mock_services(n_segmenters: int = 3) -> ServiceBundle:
    modes = ("hard", "soft", "dilated")
    segs = [ThresholdSegmenter(modes[i % 3]) for i in range(n_segmenters)]
    return ServiceBundle(
        agent=MockAgent(),
        editor=MockEditor(),
        segmenters=segs,
        embedder=ChromaLayoutEmbedder(),
        verifier=RuleVerifier(),
        ids={
            "agent": "mock-agent",
            "editor": "mock-editor",
            "segmenters": [f"mock-segmenter-{s.mode}" for s in segs],
            "embedder": "mock-embedder-chroma8",
            "verifier": "mock-verifier-rules",
        },
    )


# -- loopback server ------------------------------------------------------------------

@dataclass
class Fault:
    """Make the first ``count`` requests to a service fail (``count < 0``: all).

    ``mode`` is ``"http500"``, ``"http503"``, ``"error"`` (structured error
    reply) or ``"drop"`` (close the connection without replying).
    """

    mode: str = "http503"
    count: int = -1


class MockServer:
    """Serves a ServiceBundle under ``/agent``, ``/editor``, ``/segmenter/<n>``,
    ``/embedder`` and ``/verifier`` on 127.0.0.1."""

    def __init__(self, services: Optional[ServiceBundle] = None, faults: Optional[dict] = None, port: int = 0):
        self.services = services or mock_services()
        self.faults = dict(faults or {})
        self.hits: dict = {}
        self.request_ids: dict = {}
        self._lock = threading.Lock()
        self._httpd = ThreadingHTTPServer(("127.0.0.1", port), self._handler())
        self._httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def endpoints(self, **kw) -> ToolEndpoints:
        b = self.base_url
        kw.setdefault("backoff", 0.01)
        kw.setdefault("timeout", 10.0)
        return ToolEndpoints(
            agent_url=f"{b}/agent",
            editor_url=f"{b}/editor",
            segmenter_urls=[f"{b}/segmenter/{i}" for i in range(len(self.services.segmenters))],
            embedder_url=f"{b}/embedder",
            verifier_url=f"{b}/verifier",
            **kw,
        )

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def dispatch(self, service: str, operation: str, body: dict) -> dict:
        s = self.services
        if service == "agent":
            img = unb64_image(body["image"])
            if operation == "detect_foreground":
                return s.agent.detect_foreground(img)
            if operation == "removal_instruction":
                return {"instruction": s.agent.removal_instruction(img, body["description"])}
            if operation == "background_removal_instruction":
                return {"instruction": s.agent.background_removal_instruction(img, body["description"])}
        elif service == "editor" and operation == "apply":
            return {"image": b64_image(s.editor.apply(unb64_image(body["image"]), body["instruction"]))}
        elif service.startswith("segmenter/") and operation == "segment":
            seg = s.segmenters[int(service.split("/", 1)[1])]
            return {"mask": b64_mask(seg.segment(unb64_image(body["image"])))}
        elif service == "embedder" and operation == "embed":
            return {"embedding": [float(v) for v in s.embedder(unb64_image(body["image"]))]}
        elif service == "verifier" and operation == "verify":
            return s.verifier.verify(unb64_image(body["rendered"]), sample_from_wire(body["sample"]))
        raise KeyError(f"unknown operation {service}/{operation}")

    def _handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                logger.debug("mock-server: " + fmt, *args)

            def _reply(self, code: int, obj: dict) -> None:
                data = json.dumps(obj).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                path = self.path.strip("/")
                service, _, operation = path.rpartition("/")
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    self._reply(400, {"status": "error", "error": {"code": "bad_request", "message": "invalid JSON"}})
                    return
                fault_key = service.split("/")[0]
                with server._lock:
                    n = server.hits.get(fault_key, 0)
                    server.hits[fault_key] = n + 1
                    server.request_ids.setdefault(fault_key, []).append(body.get("request_id"))
                    fault = server.faults.get(fault_key)
                if fault is not None and (fault.count < 0 or n < fault.count):
                    if fault.mode == "drop":
                        self.close_connection = True
                        self.connection.shutdown(2)
                        return
                    if fault.mode == "error":
                        self._reply(200, {"status": "error", "error": {"code": "injected", "message": "injected fault"}})
                        return
                    self._reply(int(fault.mode[4:]), {"status": "error", "error": {"code": "injected", "message": fault.mode}})
                    return
                try:
                    payload = server.dispatch(service, operation, body)
                except KeyError as exc:
                    self._reply(404, {"status": "error", "error": {"code": "not_found", "message": str(exc)}})
                    return
                except Exception as exc:  # surfaced to the client as a structured error
                    self._reply(200, {"status": "error", "error": {"code": "internal", "message": f"{type(exc).__name__}: {exc}"}})
                    return
                self._reply(200, {"status": "ok", "payload": payload})

        return Handler

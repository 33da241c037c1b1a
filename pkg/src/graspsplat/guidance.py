"""Score-distillation guidance behind a pluggable oracle interface.

An oracle maps (rendered image, camera, schedule step) to a per-pixel
gradient image. The mock oracle knows a reference Gaussian set and returns
the residual against its own render, an idealized prior used for desk-scale
verification; a network-backed oracle can be attached over the documented
byte-stream protocol without touching the optimization code.

Wire protocol (little-endian): a fixed 24-byte header
    magic 8s ("GSORCL01") | width u32 | height u32 | channels u32 | step u32
followed for requests by 16 float32 camera values (fx fy cx cy r00..r22
tx ty tz) and the float32 image payload (H*W*C); responses reuse the header
followed directly by the float32 gradient payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core_geometry import Camera, GaussianSet
from .errors import GuidanceUnavailableError, ShapeError
from .rasterizer import _render_backward_arrays, _render_forward_arrays, render

WIRE_MAGIC = b"GSORCL01"
WIRE_HEADER = struct.Struct("<8sIIII")


@dataclass
class GuidanceSchedule:
    """Diffusion-style step range with a tabulated weighting function."""

    t_min: int = 20
    t_max: int = 980
    weights: np.ndarray = None
    samples_per_step: int = 1

    def __post_init__(self):
        if self.weights is None:
            # descending linear ramp over 1000 tabulated steps
            self.weights = np.linspace(1.0, 0.02, 1000)
        self.weights = np.asarray(self.weights, dtype=float)
        if not (0 <= self.t_min <= self.t_max < len(self.weights)):
            raise ValueError("schedule range must lie inside the weight table")
        if np.any(self.weights[self.t_min:self.t_max + 1] <= 0):
            raise ValueError("weighting function must be positive on the range")
        if self.samples_per_step < 1:
            raise ValueError("samples_per_step must be >= 1")

    def draw(self, rng):
        t = int(rng.integers(self.t_min, self.t_max + 1))
        return t, float(self.weights[t])


class GuidanceOracle:
    """Interface: query(image, camera, t) -> gradient image of equal shape."""

    def query(self, image, camera, t):  # pragma: no cover - interface
        raise NotImplementedError


class MockOracle(GuidanceOracle):
    """Idealized prior that knows the reference object.

    Returns (rendered - render(reference, camera)) so descending along the
    gradient pulls the render toward the reference appearance from any view.
    Optional zero-mean noise of magnitude `noise_sigma` supports robustness
    tests.
    """

    def __init__(self, reference: GaussianSet, noise_sigma=0.0, rng=None):
        if len(reference) == 0:
            raise ValueError("mock oracle needs a renderable reference set")
        self.reference = reference
        self.noise_sigma = float(noise_sigma)
        self.rng = rng or np.random.default_rng(0)

    def query(self, image, camera, t):
        target = render(self.reference, camera).image
        grad = np.asarray(image, dtype=float) - target
        if self.noise_sigma > 0.0:
            grad = grad + self.rng.normal(scale=self.noise_sigma, size=grad.shape)
        return grad


class ExternalOracle(GuidanceOracle):
    """Oracle speaking the byte-stream protocol over a file-like transport."""

    def __init__(self, stream):
        self.stream = stream

    def query(self, image, camera, t):
        try:
            self.stream.write(encode_request(image, camera, t))
            self.stream.flush()
            header = _read_exact(self.stream, WIRE_HEADER.size)
            magic, w, h, c, _step = WIRE_HEADER.unpack(header)
            if magic != WIRE_MAGIC:
                raise GuidanceUnavailableError("bad oracle response magic")
            payload = _read_exact(self.stream, 4 * w * h * c)
        except GuidanceUnavailableError:
            raise
        except Exception as exc:
            raise GuidanceUnavailableError(f"oracle transport failed: {exc}") from exc
        return decode_gradient(header + payload, expect_shape=np.asarray(image).shape)


def _read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise GuidanceUnavailableError("oracle stream closed early")
        buf += chunk
    return buf


def encode_request(image, camera: Camera, t):
    image = np.asarray(image, dtype=np.float32)
    h, w, c = image.shape
    cam_vals = np.concatenate([
        [camera.fx, camera.fy, camera.cx, camera.cy],
        camera.rotation.reshape(-1), camera.translation,
    ]).astype(np.float32)
    return (WIRE_HEADER.pack(WIRE_MAGIC, w, h, c, int(t))
            + cam_vals.tobytes() + image.tobytes())


def decode_request(data):
    magic, w, h, c, t = WIRE_HEADER.unpack_from(data, 0)
    if magic != WIRE_MAGIC:
        raise GuidanceUnavailableError("bad oracle request magic")
    off = WIRE_HEADER.size
    cam = np.frombuffer(data, dtype="<f4", count=16, offset=off).astype(float)
    off += 64
    image = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=off)
    camera = Camera(fx=float(cam[0]), fy=float(cam[1]), cx=float(cam[2]), cy=float(cam[3]),
                    rotation=cam[4:13].reshape(3, 3), translation=cam[13:16],
                    width=w, height=h)
    return image.reshape(h, w, c).astype(float), camera, t


def encode_gradient(grad, t=0):
    grad = np.asarray(grad, dtype=np.float32)
    h, w, c = grad.shape
    return WIRE_HEADER.pack(WIRE_MAGIC, w, h, c, int(t)) + grad.tobytes()


def decode_gradient(data, expect_shape=None):
    magic, w, h, c, _t = WIRE_HEADER.unpack_from(data, 0)
    if magic != WIRE_MAGIC:
        raise GuidanceUnavailableError("bad oracle response magic")
    grad = np.frombuffer(data, dtype="<f4", count=h * w * c,
                         offset=WIRE_HEADER.size).reshape(h, w, c).astype(float)
    if expect_shape is not None and tuple(grad.shape) != tuple(expect_shape):
        raise ShapeError(f"oracle gradient shape {grad.shape} != {tuple(expect_shape)}")
    return grad


# ---------------------------------------------------------------------------
# virtual cameras and the guidance step
# ---------------------------------------------------------------------------

def sample_virtual_camera(center, radius, rng, size=64, near=0.01) -> Camera:
    """A camera on the view sphere: uniform azimuth, elevation in +/-60 deg,
    up-vector perturbed by at most 10 deg, looking at the given center."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=float)
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    elevation = rng.uniform(-np.pi / 3.0, np.pi / 3.0)
    direction = np.array([
        np.cos(elevation) * np.cos(azimuth),
        np.sin(elevation),
        np.cos(elevation) * np.sin(azimuth),
    ])
    eye = center + radius * direction
    tilt = rng.uniform(0.0, np.deg2rad(10.0))
    tilt_az = rng.uniform(0.0, 2.0 * np.pi)
    up = np.array([np.sin(tilt) * np.cos(tilt_az),
                   np.cos(tilt),
                   np.sin(tilt) * np.sin(tilt_az)])
    fx = float(size)
    return Camera.look_at(eye=eye, target=center, up=up, fx=fx, fy=fx,
                          cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
                          width=size, height=size, near=near)


def sds_step(emit_canonical, oracle: GuidanceOracle, schedule: GuidanceSchedule,
             rng, size=64):
    """One guidance step on the canonical object.

    `emit_canonical` is a zero-argument callable returning (arrays, backward)
    where arrays is the canonical Gaussian tuple (centers, scales, quats,
    opacities, colors) and backward maps RenderGradients to parameter
    gradients (already accumulated by the caller's closure). Returns the
    per-sample metadata list; gradient flow happens through `backward`.
    """
    meta = []
    for _ in range(schedule.samples_per_step):
        arrays, backward = emit_canonical()
        centers = arrays[0]
        center = centers.mean(axis=0)
        bound = float(np.max(np.linalg.norm(centers - center, axis=1)))
        cam = sample_virtual_camera(center, radius=2.5 * max(bound, 1e-3), rng=rng,
                                    size=size)
        t, omega = schedule.draw(rng)
        out, proj, rank = _render_forward_arrays(*arrays, cam)
        try:
            grad_img = oracle.query(out.image, cam, t)
        except GuidanceUnavailableError:
            raise
        grad_img = np.asarray(grad_img, dtype=float)
        if grad_img.shape != out.image.shape:
            raise ShapeError("oracle gradient does not match the render")
        scale = omega / schedule.samples_per_step
        grads = _render_backward_arrays(*arrays, cam, scale * grad_img,
                                        proj=proj, rank=rank)
        backward(grads)
        meta.append({"t": t, "omega": omega, "camera": cam,
                     "residual_l2": float(np.sqrt((grad_img ** 2).mean()))})
    return meta


def mock_oracle(reference: GaussianSet, noise_sigma=0.0, rng=None) -> GuidanceOracle:
    """Factory for the idealized reference-backed oracle."""
    return MockOracle(reference, noise_sigma=noise_sigma, rng=rng)

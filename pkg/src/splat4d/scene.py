"""Gaussian scene representation, cameras, frames and scene-file IO.

Gaussians are held struct-of-arrays in :class:`GaussianSet` so that the
renderer and the optimizer can work on whole parameter blocks at once.
:class:`GaussianPrimitive` is the per-splat view used for inspection and
for building small scenes by hand.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = "splat4d-scene/1"

# Parameter blocks of a GaussianSet, in serialization order.
PARAM_NAMES = (
    "mu0",
    "log_scale",
    "rotation",
    "color",
    "opacity_logit",
    "dyn_logit",
    "dmu",
    "dlogs",
    "drot",
)
DEFORM_NAMES = ("dmu", "dlogs", "drot")


class SceneFormatError(ValueError):
    """Malformed scene / camera file. ``where`` names the offending field."""

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class SceneVersionError(SceneFormatError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z), Hamilton convention


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_rotmat(q):
    """Rotation matrix of a unit quaternion; works on (..., 4)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    R = np.empty(np.shape(w) + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Unit quaternion (w >= 0) of a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q if q[0] >= 0 else -q


# ---------------------------------------------------------------------------
# domain types


@dataclass
class DeformCoeffs:
    """Polynomial deformation coefficients; row k multiplies t**(k+1)."""

    dmu: np.ndarray
    dlogs: np.ndarray
    drot: np.ndarray

    @property
    def degree(self) -> int:
        return self.dmu.shape[0]

    @classmethod
    def zeros(cls, degree: int = 2) -> "DeformCoeffs":
        if degree < 1:
            raise ValueError("deformation degree must be >= 1")
        z = np.zeros((degree, 3))
        return cls(z.copy(), z.copy(), z.copy())


@dataclass
class GaussianPrimitive:
    mu0: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity_logit: float
    dyn_logit: float
    deform: DeformCoeffs = field(default_factory=DeformCoeffs.zeros)

    @property
    def opacity(self) -> float:
        return sigmoid(self.opacity_logit)


def covariance(prim: GaussianPrimitive) -> np.ndarray:
    """World-space covariance R S S^T R^T of one primitive."""
    R = quat_to_rotmat(quat_normalize(prim.rotation))
    M = R * np.exp(np.asarray(prim.log_scale, dtype=np.float64))[None, :]
    return M @ M.T


def dyn_coeff(prim: GaussianPrimitive) -> float:
    """Dynamic-perception coefficient w in (0, 1)."""
    return sigmoid(prim.dyn_logit)


@dataclass
class GaussianSet:
    """All Gaussians of a scene as parallel arrays.

    Shapes: mu0/log_scale/color (N, 3), rotation (N, 4), opacity_logit and
    dyn_logit (N,), dmu/dlogs/drot (N, K, 3).
    """

    mu0: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity_logit: np.ndarray
    dyn_logit: np.ndarray
    dmu: np.ndarray
    dlogs: np.ndarray
    drot: np.ndarray
    version: str = FORMAT_VERSION

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))

    def __len__(self) -> int:
        return self.mu0.shape[0]

    @property
    def degree(self) -> int:
        return self.dmu.shape[1]

    @property
    def w(self) -> np.ndarray:
        return sigmoid(self.dyn_logit)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{k: v.copy() for k, v in self.params().items()}, version=self.version)

    def subset(self, indices) -> "GaussianSet":
        idx = np.asarray(indices, dtype=np.intp)
        return GaussianSet(**{k: v[idx] for k, v in self.params().items()}, version=self.version)

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mu0=self.mu0[i].copy(),
            log_scale=self.log_scale[i].copy(),
            rotation=self.rotation[i].copy(),
            color=self.color[i].copy(),
            opacity_logit=float(self.opacity_logit[i]),
            dyn_logit=float(self.dyn_logit[i]),
            deform=DeformCoeffs(self.dmu[i].copy(), self.dlogs[i].copy(), self.drot[i].copy()),
        )

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    def __iter__(self):
        return iter(self.primitives)

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive]) -> "GaussianSet":
        if not prims:
            raise ValueError("a GaussianSet needs at least one primitive")
        degrees = {p.deform.degree for p in prims}
        if len(degrees) != 1:
            raise ValueError(f"mixed deformation degrees {sorted(degrees)}")
        return cls(
            mu0=[p.mu0 for p in prims],
            log_scale=[p.log_scale for p in prims],
            rotation=[p.rotation for p in prims],
            color=[p.color for p in prims],
            opacity_logit=[p.opacity_logit for p in prims],
            dyn_logit=[p.dyn_logit for p in prims],
            dmu=[p.deform.dmu for p in prims],
            dlogs=[p.deform.dlogs for p in prims],
            drot=[p.deform.drot for p in prims],
        )

    def normalize_rotations(self) -> None:
        self.rotation /= np.linalg.norm(self.rotation, axis=1, keepdims=True)

    def covariances(self) -> np.ndarray:
        R = quat_to_rotmat(quat_normalize(self.rotation))
        M = R * np.exp(self.log_scale)[:, None, :]
        return M @ np.swapaxes(M, 1, 2)


def init_random_scene(
    n: int,
    bbox_min,
    bbox_max,
    rng: np.random.Generator,
    degree: int = 2,
) -> GaussianSet:
    """Random-uniform initialization inside an axis-aligned box.

    log_scale = ln(0.05 * extent), w = 0.5, opacity = 0.1, zero deformation.
    """
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    mu = rng.uniform(lo, hi, size=(n, 3))
    return init_from_points(mu, extent=float(np.max(hi - lo)), degree=degree)


def init_from_points(points, extent: float, degree: int = 2, colors=None) -> GaussianSet:
    """Initialize one Gaussian per point with the standard default parameters."""
    mu = np.array(points, dtype=np.float64)  # copy: the scene owns its parameters
    n = mu.shape[0]
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    col = np.full((n, 3), 0.5) if colors is None else np.array(colors, dtype=np.float64)
    z = np.zeros((n, degree, 3))
    return GaussianSet(
        mu0=mu,
        log_scale=np.full((n, 3), math.log(0.05 * extent)),
        rotation=rot,
        color=col,
        opacity_logit=np.full(n, float(logit(0.1))),
        dyn_logit=np.zeros(n),
        dmu=z,
        dlogs=z.copy(),
        drot=z.copy(),
    )


# ---------------------------------------------------------------------------
# cameras and frames


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray  # (3, 4) [R | t]
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(3, 4)
        self.validate()

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera size must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("fx, fy must be > 0")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        R = self.R
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("world_to_cam rotation block is not orthonormal")

    @property
    def R(self) -> np.ndarray:
        return self.world_to_cam[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_cam[:, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def view_dir(self, point) -> np.ndarray:
        d = np.asarray(point, dtype=np.float64) - self.center
        return d / np.linalg.norm(d)

    @classmethod
    def look_at(cls, eye, target, up, width, height, fx, fy=None, near=0.1, far=100.0) -> "Camera":
        """Pinhole camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        W = np.concatenate([R, (-R @ eye)[:, None]], axis=1)
        return cls(width, height, fx, fy if fy is not None else fx, width / 2.0, height / 2.0, W, near, far)

    def to_dict(self) -> dict:
        return {
            "width": int(self.width),
            "height": int(self.height),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "world_to_cam": [float(v) for v in self.world_to_cam.ravel()],
            "near": float(self.near),
            "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        keys = ("width", "height", "fx", "fy", "cx", "cy", "world_to_cam", "near", "far")
        for k in keys:
            if k not in d:
                raise SceneFormatError("missing field", where=f"camera.{k}")
        extra = set(d) - set(keys)
        if extra:
            raise SceneFormatError(f"unknown fields {sorted(extra)}", where="camera")
        w2c = d["world_to_cam"]
        if not isinstance(w2c, list) or len(w2c) != 12:
            raise SceneFormatError("expected 12 row-major floats", where="camera.world_to_cam")
        try:
            return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                       float(d["cx"]), float(d["cy"]), np.array(w2c, dtype=np.float64),
                       float(d["near"]), float(d["far"]))
        except ValueError as exc:
            raise SceneFormatError(str(exc), where="camera") from exc


def save_camera(cam: Camera, path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict()) + "\n")


def load_camera(path) -> Camera:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"invalid JSON at line {exc.lineno}: {exc.msg}", where=str(path)) from exc
    return Camera.from_dict(d)


@dataclass
class FrameSample:
    image: np.ndarray
    camera: Camera
    t: float
    gt_mask: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(
                f"image shape {self.image.shape} does not match camera "
                f"({self.camera.height}, {self.camera.width}, 3)"
            )
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"timestamp {self.t} outside [0, 1]")
        if self.gt_mask is not None:
            self.gt_mask = np.asarray(self.gt_mask, dtype=bool)


# ---------------------------------------------------------------------------
# scene files (JSON)


def scene_to_dict(scene: GaussianSet) -> dict:
    prims = []
    for i in range(len(scene)):
        prims.append(
            {
                "mu0": scene.mu0[i].tolist(),
                "log_scale": scene.log_scale[i].tolist(),
                "rotation": scene.rotation[i].tolist(),
                "color": scene.color[i].tolist(),
                "opacity_logit": float(scene.opacity_logit[i]),
                "dyn_logit": float(scene.dyn_logit[i]),
                "deform": {
                    "degree": scene.degree,
                    "dmu": scene.dmu[i].ravel().tolist(),
                    "dlogs": scene.dlogs[i].ravel().tolist(),
                    "drot": scene.drot[i].ravel().tolist(),
                },
            }
        )
    return {"version": scene.version, "primitives": prims}


def _vec(d: dict, key: str, n: int, where: str) -> list[float]:
    if key not in d:
        raise SceneFormatError("missing field", where=f"{where}.{key}")
    v = d[key]
    if not isinstance(v, list) or len(v) != n or not all(isinstance(x, (int, float)) for x in v):
        raise SceneFormatError(f"expected {n} numbers", where=f"{where}.{key}")
    return [float(x) for x in v]


def _num(d: dict, key: str, where: str) -> float:
    if key not in d:
        raise SceneFormatError("missing field", where=f"{where}.{key}")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SceneFormatError("expected a number", where=f"{where}.{key}")
    return float(v)


def scene_from_dict(d: dict, warnings_out: list[str] | None = None) -> GaussianSet:
    if not isinstance(d, dict):
        raise SceneFormatError("top level must be an object")
    if "version" not in d:
        raise SceneFormatError("missing field", where="version")
    if d["version"] != FORMAT_VERSION:
        raise SceneVersionError(f"unsupported version {d['version']!r} (expected {FORMAT_VERSION!r})",
                                where="version")
    if "primitives" not in d or not isinstance(d["primitives"], list):
        raise SceneFormatError("missing or non-list field", where="primitives")
    prims = []
    for i, p in enumerate(d["primitives"]):
        where = f"primitives[{i}]"
        if not isinstance(p, dict):
            raise SceneFormatError("expected an object", where=where)
        rot = np.array(_vec(p, "rotation", 4, where))
        norm = float(np.linalg.norm(rot))
        if norm == 0.0:
            raise SceneFormatError("zero quaternion", where=f"{where}.rotation")
        if abs(norm - 1.0) > 1e-6:
            msg = f"{where}.rotation: non-unit quaternion (norm {norm:.9g}) renormalized"
            warnings.warn(msg, stacklevel=2)
            if warnings_out is not None:
                warnings_out.append(msg)
            rot = rot / norm
        if "deform" not in p or not isinstance(p["deform"], dict):
            raise SceneFormatError("missing field", where=f"{where}.deform")
        df = p["deform"]
        dwhere = f"{where}.deform"
        k = int(_num(df, "degree", dwhere))
        if k < 1:
            raise SceneFormatError("degree must be >= 1", where=f"{dwhere}.degree")
        coeffs = {name: np.array(_vec(df, name, 3 * k, dwhere)).reshape(k, 3) for name in DEFORM_NAMES}
        prims.append(
            GaussianPrimitive(
                mu0=np.array(_vec(p, "mu0", 3, where)),
                log_scale=np.array(_vec(p, "log_scale", 3, where)),
                rotation=rot,
                color=np.array(_vec(p, "color", 3, where)),
                opacity_logit=_num(p, "opacity_logit", where),
                dyn_logit=_num(p, "dyn_logit", where),
                deform=DeformCoeffs(**coeffs),
            )
        )
    if not prims:
        raise SceneFormatError("scene has no primitives", where="primitives")
    try:
        return GaussianSet.from_primitives(prims)
    except ValueError as exc:
        raise SceneFormatError(str(exc), where="primitives") from exc


def save_scene(scene: GaussianSet, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")


def load_scene(path, warnings_out: list[str] | None = None) -> GaussianSet:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"invalid JSON at line {exc.lineno} col {exc.colno}: {exc.msg}",
                               where=str(path)) from exc
    return scene_from_dict(d, warnings_out)


def concat_scenes(scenes: Iterable[GaussianSet]) -> GaussianSet:
    scenes = list(scenes)
    return GaussianSet(**{k: np.concatenate([getattr(s, k) for s in scenes]) for k in PARAM_NAMES})

"""Synthetic dynamic scenes with known per-Gaussian motion labels.

A textured backdrop of static Gaussians sits behind a handful of moving
ones.  Frames are rendered with this package's renderer from exact
per-timestamp snapshots of the trajectories; the stored truth scene carries
a least-squares polynomial fit of each trajectory.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imgio import load_float, load_mask_png, save_float, save_mask_png, save_png
from .render import ContractError, render
from .scene import Camera, FrameSample, GaussianSet, load_scene, logit, save_scene

MOTIONS = ("drift", "orbit", "oscillation")
TRUTH_LOGIT = 10.0


@dataclass
class SyntheticSpec:
    n_static: int = 80
    n_dynamic: int = 20
    motions: tuple = MOTIONS  # families cycled over the dynamic Gaussians
    amplitude: float = 0.4
    n_frames: int = 24
    n_cameras: int = 2
    width: int = 128
    height: int = 128
    noise_std: float = 0.0
    seed: int = 0
    degree: int = 2
    point_jitter: float = 0.03  # std of the init point cloud around the truth means

    def validate(self) -> None:
        if self.n_static < 0 or self.n_dynamic < 0 or self.n_static + self.n_dynamic < 1:
            raise ContractError("need n_static, n_dynamic >= 0 and at least one Gaussian")
        if self.n_dynamic > 0 and not self.amplitude > 0:
            raise ContractError("dynamic Gaussians need a positive motion amplitude")
        if self.n_frames < 1 or self.n_cameras < 1:
            raise ContractError("need at least one frame and one camera")
        bad = set(self.motions) - set(MOTIONS)
        if bad or not self.motions:
            raise ContractError(f"unknown motion families {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motions"] = list(self.motions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ContractError(f"unknown spec keys {sorted(extra)}")
        d = dict(d)
        if "motions" in d:
            d["motions"] = tuple(d["motions"])
        return cls(**d)


@dataclass
class Motion:
    """Offset from the canonical mean; zero at t = 0."""

    kind: str
    amplitude: float
    axis_u: np.ndarray
    axis_v: np.ndarray
    phase: float = 0.0

    def offset(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None]
        A = self.amplitude
        if self.kind == "drift":
            return A * t * self.axis_u
        if self.kind == "orbit":
            w = 0.5 * math.pi
            return A * ((np.cos(self.phase + w * t) - math.cos(self.phase)) * self.axis_u
                        + (np.sin(self.phase + w * t) - math.sin(self.phase)) * self.axis_v)
        if self.kind == "oscillation":
            return A * np.sin(math.pi * t) * self.axis_u
        raise ContractError(f"unknown motion {self.kind!r}")


@dataclass
class SyntheticScene:
    canonical: GaussianSet  # t = 0 configuration, zero deformation
    labels: np.ndarray  # 1 = moving
    motions: list  # Motion or None per Gaussian
    cameras: list
    times: np.ndarray
    truth: GaussianSet  # polynomial fit
    points: np.ndarray  # jittered canonical means (init cloud)
    frames: list = field(default_factory=list)
    background: tuple = (0.0, 0.0, 0.0)

    def snapshot(self, t: float) -> GaussianSet:
        s = self.canonical.copy()
        for i, m in enumerate(self.motions):
            if m is not None:
                s.mu0[i] = s.mu0[i] + m.offset(t)[0]
        return s


def default_cameras(n: int, width: int, height: int) -> list[Camera]:
    cams = []
    for c in range(n):
        ang = 0.0 if n == 1 else math.radians(-12.0 + 24.0 * c / (n - 1))
        eye = (3.2 * math.sin(ang), -0.2, -3.2 * math.cos(ang))
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.3), (0.0, -1.0, 0.0), width, height,
                                   fx=1.1 * width, near=0.1, far=50.0))
    return cams


def _random_rotations(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def _tilted_rotations(rng, n, max_angle):
    # small rotations about random axes: backdrop disks keep facing the cameras
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    half = 0.5 * rng.uniform(0.0, max_angle, size=n)
    return np.column_stack([np.cos(half), np.sin(half)[:, None] * axis])


def _orthonormal_pair(rng):
    u = rng.normal(size=3)
    u[2] *= 0.3  # mostly screen-parallel motion
    u /= np.linalg.norm(u)
    v = np.cross(u, rng.normal(size=3))
    v /= np.linalg.norm(v)
    return u, v


def build_scene(spec: SyntheticSpec) -> SyntheticScene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ns, nd = spec.n_static, spec.n_dynamic
    K = spec.degree

    # backdrop: jittered grid on a slab behind the origin
    g = max(1, int(math.ceil(math.sqrt(max(ns, 1)))))
    cells = np.stack(np.meshgrid(np.arange(g), np.arange(g), indexing="ij"), -1).reshape(-1, 2)[:ns]
    span = 2.2
    xy = (cells + 0.5) / g * 2 * span - span + rng.normal(scale=0.08, size=(ns, 2))
    mu_s = np.column_stack([xy, 1.2 + rng.uniform(-0.1, 0.1, size=ns)])
    ls_s = np.log(np.column_stack([rng.uniform(0.18, 0.3, size=(ns, 2)), rng.uniform(0.03, 0.06, size=ns)]))
    col_s = rng.uniform(0.15, 0.85, size=(ns, 3))

    # moving Gaussians: small, bright, in front
    mu_d = np.column_stack([rng.uniform(-1.0, 1.0, size=(nd, 2)), rng.uniform(-0.5, 0.2, size=nd)])
    ls_d = np.log(rng.uniform(0.06, 0.12, size=(nd, 3)))
    col_d = rng.uniform(0.0, 1.0, size=(nd, 3))
    col_d[np.arange(nd), rng.integers(0, 3, size=nd)] = 1.0

    mu = np.concatenate([mu_s, mu_d])
    n = ns + nd
    canonical = GaussianSet(
        mu0=mu,
        log_scale=np.concatenate([ls_s, ls_d]),
        rotation=np.concatenate([_tilted_rotations(rng, ns, 0.3), _random_rotations(rng, nd)]),
        color=np.concatenate([col_s, col_d]),
        opacity_logit=np.full(n, float(logit(0.9))),
        dyn_logit=np.concatenate([np.full(ns, -TRUTH_LOGIT), np.full(nd, TRUTH_LOGIT)]),
        dmu=np.zeros((n, K, 3)), dlogs=np.zeros((n, K, 3)), drot=np.zeros((n, K, 3)),
    )
    motions = [None] * ns
    for j in range(nd):
        u, v = _orthonormal_pair(rng)
        kind = spec.motions[j % len(spec.motions)]
        motions.append(Motion(kind, spec.amplitude * rng.uniform(0.75, 1.25), u, v, rng.uniform(0, 2 * math.pi)))

    times = np.linspace(0.0, 1.0, spec.n_frames) if spec.n_frames > 1 else np.zeros(1)
    truth = canonical.copy()
    ts = np.linspace(0.0, 1.0, 64)
    basis = ts[:, None] ** np.arange(1, K + 1)[None, :]
    for i, m in enumerate(motions):
        if m is not None:
            truth.dmu[i] = np.linalg.lstsq(basis, m.offset(ts), rcond=None)[0]
    labels = np.concatenate([np.zeros(ns, dtype=np.int64), np.ones(nd, dtype=np.int64)])
    points = mu + rng.normal(scale=spec.point_jitter, size=mu.shape)
    cams = default_cameras(spec.n_cameras, spec.width, spec.height)
    return SyntheticScene(canonical, labels, motions, cams, times, truth, points)


def dynamic_mask(scene_t: GaussianSet, labels, camera: Camera, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Pixels where the moving-only render differs from the background by > 1/255."""
    out = render(scene_t, camera, 0.0, subset_filter=np.flatnonzero(labels), background=background)
    diff = np.abs(out.image - np.asarray(background, dtype=np.float64)).max(axis=2)
    return diff > 1.0 / 255.0


def generate(spec: SyntheticSpec) -> SyntheticScene:
    """Build the truth scene and render every (camera, timestamp) pair."""
    sc = build_scene(spec)
    rng = np.random.default_rng([spec.seed, 1])
    for k, t in enumerate(sc.times):
        snap = sc.snapshot(float(t))
        for c, cam in enumerate(sc.cameras):
            img = render(snap, cam, 0.0, background=sc.background).image
            if spec.noise_std > 0:
                img = np.clip(img + rng.normal(scale=spec.noise_std, size=img.shape), 0.0, 1.0)
            mask = dynamic_mask(snap, sc.labels, cam, sc.background)
            sc.frames.append(FrameSample(img, cam, float(t), mask, name=f"cam{c}_t{k}"))
    return sc


# ---------------------------------------------------------------------------
# dataset directories


@dataclass
class Dataset:
    frames: list
    cameras: list
    times: np.ndarray
    labels: np.ndarray | None = None
    truth: GaussianSet | None = None
    points: np.ndarray | None = None
    spec: dict | None = None

    def split(self, holdout_every: int) -> tuple[list, list]:
        """(train, held-out): timestamps with k % holdout_every == holdout_every // 2 are held out."""
        if holdout_every <= 1:
            return list(self.frames), []
        train, test = [], []
        for f in self.frames:
            k = int(f.name.split("_t")[-1])
            (test if k % holdout_every == holdout_every // 2 else train).append(f)
        return train, test


def write_dataset(sc: SyntheticScene, out, spec: SyntheticSpec | None = None) -> Path:
    out = Path(out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    for f in sc.frames:
        save_png(f.image, out / "frames" / f"{f.name}.png")
        save_float(f.image, out / "frames" / f"{f.name}.sddimg")
        save_mask_png(f.gt_mask, out / "masks" / f"{f.name}.png")
    (out / "cameras.txt").write_text("".join(json.dumps(c.to_dict()) + "\n" for c in sc.cameras))
    (out / "times.txt").write_text("".join(f"{t!r}\n" for t in sc.times.tolist()))
    (out / "labels.txt").write_text("".join(f"{int(v)}\n" for v in sc.labels))
    (out / "points.txt").write_text("".join(" ".join(repr(float(x)) for x in p) + "\n" for p in sc.points))
    save_scene(sc.truth, out / "truth_scene.json")
    if spec is not None:
        (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    return out


def _read_lines(path):
    return [ln for ln in Path(path).read_text().splitlines() if ln.strip()]


def load_dataset(root) -> Dataset:
    """Load a dataset directory; frames prefer the exact float dumps over PNGs."""
    from .imgio import load_png

    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    cameras = [Camera.from_dict(json.loads(ln)) for ln in _read_lines(root / "cameras.txt")]
    times = np.array([float(ln) for ln in _read_lines(root / "times.txt")])
    frames = []
    for k, t in enumerate(times):
        for c, cam in enumerate(cameras):
            name = f"cam{c}_t{k}"
            fdump = root / "frames" / f"{name}.sddimg"
            img = load_float(fdump) if fdump.exists() else load_png(root / "frames" / f"{name}.png")
            mpath = root / "masks" / f"{name}.png"
            mask = load_mask_png(mpath) if mpath.exists() else None
            frames.append(FrameSample(img, cam, float(t), mask, name=name))
    labels = None
    if (root / "labels.txt").exists():
        labels = np.array([int(ln) for ln in _read_lines(root / "labels.txt")])
    truth = load_scene(root / "truth_scene.json") if (root / "truth_scene.json").exists() else None
    points = None
    if (root / "points.txt").exists():
        points = np.array([[float(x) for x in ln.split()] for ln in _read_lines(root / "points.txt")])
    spec = json.loads((root / "spec.json").read_text()) if (root / "spec.json").exists() else None
    return Dataset(frames, cameras, times, labels, truth, points, spec)


def dataset_from_scene(sc: SyntheticScene) -> Dataset:
    return Dataset(list(sc.frames), sc.cameras, sc.times, sc.labels, sc.truth, sc.points)

"""Optimization loop, checkpoints, evaluation and the ablation switchboard."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import decouple
from .losses import total_loss
from .metrics import EvalReport, decoupling_score, psnr, region_psnr, ssim_metric
from .optim import Adam
from .render import ContractError, render, render_backward
from .scene import PARAM_NAMES, GaussianSet, init_from_points, init_random_scene, scene_from_dict, scene_to_dict
from .uncertainty import (
    PatchStatsExtractor,
    UncertaintyField,
    feature_residual,
    make_mask,
    optimize_sigma,
)

CKPT_MAGIC = "SDDCKPTv1"
MASK_RENDERS = ("dynamic", "static", "full")

# parameter group -> TrainConfig learning-rate field
LR_FIELDS = {
    "mu0": "lr_means",
    "log_scale": "lr_log_scale",
    "rotation": "lr_rotation",
    "color": "lr_color",
    "opacity_logit": "lr_opacity",
    "dyn_logit": "lr_dyn_logit",
    "dmu": "lr_deform",
    "dlogs": "lr_deform",
    "drot": "lr_deform",
}

# groups measured in world units
SPATIAL_GROUPS = ("mu0", "dmu")

ABLATIONS = {
    "a": dict(use_w=False, use_lbi=False, use_schedule=False, use_asg=False),
    "b": dict(use_w=True, use_lbi=False, use_schedule=False, use_asg=False),
    "c": dict(use_w=True, use_lbi=True, use_schedule=False, use_asg=False),
    "d": dict(use_w=True, use_lbi=True, use_schedule=True, use_asg=False),
    "full": dict(use_w=True, use_lbi=True, use_schedule=True, use_asg=True),
}


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient."""

    def __init__(self, step: int, term: str):
        super().__init__(f"non-finite {term} at step {step}")
        self.step = step
        self.term = term


@dataclass
class TrainConfig:
    steps: int = 30000
    schedule_rate: float = 1e-4
    tau_train: float = 0.5
    tau_d_inf: float = 0.85
    tau_s_inf: float = 0.2
    lr_means: float = 1.6e-4
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_dyn_logit: float = 5e-2
    lr_deform: float = 1.6e-4
    ssim_weight: float = 0.2
    asg_weight: float = 1.0
    lambda_prior: float = 0.5
    patch_size: int = 8
    sigma_steps: int = 20
    sigma_lr: float = 0.1
    mask_render: str = "dynamic"
    prune_opacity: float = 0.01
    prune_interval: int = 100
    seed: int = 0
    use_w: bool = True
    use_lbi: bool = True
    use_schedule: bool = True
    use_asg: bool = True
    degree: int = 2
    init: str = "points"
    holdout_every: int = 6
    background: tuple = (0.0, 0.0, 0.0)
    threads: int = 1
    scale_lr_by_extent: bool = True

    def validate(self) -> None:
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        for name in set(LR_FIELDS.values()) | {"schedule_rate", "sigma_lr"}:
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be > 0")
        if self.use_lbi and not self.use_w:
            raise ContractError("use_lbi requires use_w")
        if self.use_schedule and not self.use_lbi:
            raise ContractError("use_schedule requires use_lbi")
        if self.use_asg and not self.use_w:
            raise ContractError("use_asg requires use_w")
        if not 0.0 <= self.tau_s_inf <= self.tau_d_inf <= 1.0:
            raise ContractError("need 0 <= tau_s_inf <= tau_d_inf <= 1")
        if not 0.0 <= self.tau_train <= 1.0:
            raise ContractError("tau_train must lie in [0, 1]")
        if self.mask_render not in MASK_RENDERS:
            raise ContractError(f"mask_render must be one of {MASK_RENDERS}")
        if self.init not in ("points", "random"):
            raise ContractError("init must be 'points' or 'random'")
        if self.prune_interval < 1 or self.patch_size < 1 or self.degree < 1:
            raise ContractError("prune_interval, patch_size and degree must be >= 1")
        if self.sigma_steps < 0 or self.holdout_every < 0 or self.threads < 1:
            raise ContractError("sigma_steps, holdout_every must be >= 0 and threads >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = [float(v) for v in self.background]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        extra = sorted(set(d) - set(known))
        if extra:
            raise ContractError(f"unknown config keys {extra}")
        kw = {}
        for k, v in d.items():
            default = known[k].default
            if isinstance(default, bool):
                if not isinstance(v, bool):
                    raise ContractError(f"config key {k} must be a boolean")
            elif isinstance(default, int):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ContractError(f"config key {k} must be an integer")
            elif isinstance(default, float):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ContractError(f"config key {k} must be a number")
                v = float(v)
            elif isinstance(default, tuple):
                v = tuple(float(x) for x in v)
            kw[k] = v
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def learning_rates(self, extent: float = 1.0) -> dict:
        """Per-group rates; positional groups scale with the scene extent when enabled."""
        lrs = {k: getattr(self, v) for k, v in LR_FIELDS.items()}
        if self.scale_lr_by_extent:
            for k in SPATIAL_GROUPS:
                lrs[k] *= extent
        return lrs

    def with_ablation(self, cid: str) -> "TrainConfig":
        try:
            flags = ABLATIONS[cid]
        except KeyError:
            raise ContractError(f"unknown ablation {cid!r} (choose from {sorted(ABLATIONS)})") from None
        return replace(self, **flags)


def load_config(path) -> TrainConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(d, dict):
        raise ContractError(f"{path}: config must be an object")
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# state and checkpoints


@dataclass
class TrainState:
    scene: GaussianSet
    config: TrainConfig
    adam: Adam
    step: int = 0
    sigma: dict = field(default_factory=dict)  # frame name -> UncertaintyField
    extent: float = 1.0

    @classmethod
    def fresh(cls, scene: GaussianSet, config: TrainConfig, extent: float | None = None) -> "TrainState":
        if extent is None:
            extent = scene_extent(scene.mu0)
        shapes = {k: v.shape for k, v in scene.params().items()}
        return cls(scene, config, Adam(shapes, config.learning_rates(extent)), extent=extent)


def scene_extent(points) -> float:
    """Largest side of the axis-aligned box around ``points``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 2:
        return 1.0
    return float(np.max(pts.max(axis=0) - pts.min(axis=0))) or 1.0


def save_checkpoint(state: TrainState, path) -> None:
    """Text header line, JSON header line, then raw little-endian float64 arrays."""
    arrays = []
    for k in PARAM_NAMES:
        arrays.append((f"adam_m/{k}", state.adam.m[k]))
        arrays.append((f"adam_v/{k}", state.adam.v[k]))
    for name in sorted(state.sigma):
        arrays.append((f"log_sigma/{name}", state.sigma[name].log_sigma))
    manifest, offset = [], 0
    for name, a in arrays:
        nbytes = a.size * 8
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "step": state.step,
        "adam_t": state.adam.t,
        "extent": state.extent,
        "config": state.config.to_dict(),
        "config_digest": state.config.digest(),
        "scene": scene_to_dict(state.scene),
        "sigma_meta": {n: [f.patch_size, f.height, f.width, f.lambda_prior] for n, f in sorted(state.sigma.items())},
        "arrays": manifest,
    }
    buf = io.BytesIO()
    buf.write((CKPT_MAGIC + "\n").encode())
    buf.write((json.dumps(header, sort_keys=True) + "\n").encode())
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0 or data[:nl].decode(errors="replace") != CKPT_MAGIC:
        raise ContractError(f"{path}: not a {CKPT_MAGIC} checkpoint")
    nl2 = data.find(b"\n", nl + 1)
    try:
        header = json.loads(data[nl + 1:nl2])
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: corrupt checkpoint header: {exc.msg}") from exc
    base = nl2 + 1
    config = TrainConfig.from_dict(header["config"])
    if config.digest() != header["config_digest"]:
        raise ContractError(f"{path}: config digest mismatch")
    scene = scene_from_dict(header["scene"])
    state = TrainState.fresh(scene, config, extent=float(header["extent"]))
    state.step = int(header["step"])
    state.adam.t = int(header["adam_t"])
    for entry in header["arrays"]:
        start = base + entry["offset"]
        raw = data[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ContractError(f"{path}: truncated array {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        kind, name = entry["name"].split("/", 1)
        if kind == "adam_m":
            state.adam.m[name] = arr
        elif kind == "adam_v":
            state.adam.v[name] = arr
        elif kind == "log_sigma":
            p, h, w, lam = header["sigma_meta"][name]
            state.sigma[name] = UncertaintyField(arr, lam, p, h, w)
    return state


# ---------------------------------------------------------------------------
# training


def init_scene(dataset, config: TrainConfig) -> GaussianSet:
    """Initial scene: one Gaussian per init point, or uniform in the points' box."""
    pts = dataset.points
    if pts is None:
        raise ContractError("dataset provides no init point cloud")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = scene_extent(pts)
    if config.init == "random":
        rng = np.random.default_rng([config.seed, 7])
        return init_random_scene(len(pts), lo, hi, rng, config.degree)
    return init_from_points(pts, extent, config.degree)


def frame_order(n_frames: int, step: int, seed: int) -> int:
    """Frame index for ``step``: a fresh seeded shuffle every epoch."""
    epoch, pos = divmod(step, n_frames)
    perm = np.random.default_rng([seed, epoch]).permutation(n_frames)
    return int(perm[pos])


def compute_mask(field_: UncertaintyField, render_img, target, extractor, steps: int, lr: float):
    r = feature_residual(extractor(render_img), extractor(target))
    optimize_sigma(field_, r, steps=steps, lr=lr)
    return make_mask(field_)


def _check_finite(step: int, named: dict) -> None:
    for term, val in named.items():
        if not np.all(np.isfinite(val)):
            raise TrainingAborted(step, term)


def train_step(state: TrainState, frame, extractor=None) -> dict:
    cfg = state.config
    scene = state.scene
    s = state.step
    extractor = extractor or PatchStatsExtractor(cfg.patch_size)
    bg = cfg.background
    kw = dict(background=bg, modulate=cfg.use_w, nthreads=cfg.threads)
    full = render(scene, frame.camera, frame.t, **kw)
    dyn = sta = None
    mask = None
    if cfg.use_asg:
        part = decouple.partition(scene, decouple.TRAINING, cfg.tau_train, cfg.tau_train)
        dyn, sta = decouple.render_split(scene, frame.camera, frame.t, part, **kw)
        fld = state.sigma.get(frame.name)
        if fld is None:
            H, W = frame.image.shape[:2]
            fld = UncertaintyField.create(H, W, cfg.patch_size, cfg.lambda_prior)
            state.sigma[frame.name] = fld
        src = {"dynamic": dyn, "static": sta, "full": full}[cfg.mask_render].image
        mask = compute_mask(fld, src, frame.image, extractor, cfg.sigma_steps, cfg.sigma_lr)

    br, lg = total_loss(
        scene.dyn_logit, frame.image, full.image,
        img_static=sta.image if sta else None, img_dynamic=dyn.image if dyn else None, mask=mask, step=s,
        ssim_weight=cfg.ssim_weight, schedule_rate=cfg.schedule_rate,
        use_lbi=cfg.use_lbi, use_schedule=cfg.use_schedule, use_asg=cfg.use_asg,
        asg_weight=cfg.asg_weight,
    )
    _check_finite(s, {k: v for k, v in br.as_dict().items()})
    br.check()

    grads = render_backward(full, lg.d_full)
    if cfg.use_asg:
        render_backward(dyn, lg.d_dynamic, into=grads)
        render_backward(sta, lg.d_static, into=grads)
    grads["dyn_logit"] += lg.d_dyn_logit
    _check_finite(s, {f"gradient of {k}": v for k, v in grads.items()})

    frozen = () if cfg.use_w else ("dyn_logit",)
    state.adam.step(scene.params(), grads, frozen=frozen)
    scene.normalize_rotations()
    np.clip(scene.color, 0.0, 1.0, out=scene.color)
    state.step = s + 1
    if state.step % cfg.prune_interval == 0:
        prune(state)
    rec = {"step": s, **br.as_dict(), "psnr_train": psnr(full.image, frame.image), "frame": frame.name,
           "n_gaussians": len(scene)}
    return rec


def prune(state: TrainState) -> int:
    """Drop Gaussians with opacity below the threshold; returns the count removed."""
    keep = np.flatnonzero(state.scene.opacity >= state.config.prune_opacity)
    n = len(state.scene)
    if keep.size == n or keep.size == 0:
        return 0
    state.scene = state.scene.subset(keep)
    state.adam.keep(keep)
    return n - keep.size


def format_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def train(dataset, config: TrainConfig, state: TrainState | None = None, log=None,
          frames=None, callback=None) -> TrainState:
    """Run ``config.steps`` total steps (resuming from ``state`` if given).

    ``log`` receives one JSON line per step.  ``frames`` overrides the
    training frames (default: the dataset's non-held-out frames).
    """
    config.validate()
    if frames is None:
        frames, _ = dataset.split(config.holdout_every)
    if not frames:
        raise ContractError("no training frames")
    if state is None:
        state = TrainState.fresh(init_scene(dataset, config), config)
    while state.step < config.steps:
        frame = frames[frame_order(len(frames), state.step, config.seed)]
        rec = train_step(state, frame)
        if log is not None:
            log.write(format_record(rec) + "\n")
        if callback is not None:
            callback(state, rec)
    return state


# ---------------------------------------------------------------------------
# evaluation


def uncertainty_mask(scene: GaussianSet, frame, config: TrainConfig, steps: int = 200, extractor=None):
    """Motion mask of a frame from the trained scene (fresh sigma field)."""
    extractor = extractor or PatchStatsExtractor(config.patch_size)
    part = decouple.partition(scene, decouple.TRAINING, config.tau_train, config.tau_train)
    kw = dict(background=config.background, modulate=config.use_w)
    dyn, sta = decouple.render_split(scene, frame.camera, frame.t, part, **kw)
    src = {"dynamic": dyn.image, "static": sta.image}.get(config.mask_render)
    if src is None:
        src = render(scene, frame.camera, frame.t, **kw).image
    H, W = frame.image.shape[:2]
    fld = UncertaintyField.create(H, W, config.patch_size, config.lambda_prior)
    return compute_mask(fld, src, frame.image, extractor, steps, config.sigma_lr)


def evaluate(scene: GaussianSet, frames, config: TrainConfig, labels=None, with_mask: bool = True,
             masks_out: list | None = None) -> EvalReport:
    """Score ``frames``; predicted motion masks are appended to ``masks_out`` when given."""
    rep = EvalReport()
    inter = union = 0
    regions = []
    for f in frames:
        img = render(scene, f.camera, f.t, background=config.background, modulate=config.use_w).image
        rep.frames.append(f.name)
        rep.psnr_db.append(psnr(img, f.image))
        rep.ssim.append(ssim_metric(img, f.image))
        if f.gt_mask is not None:
            regions.append(region_psnr(img, f.image, f.gt_mask))
            if with_mask:
                m = uncertainty_mask(scene, f, config).astype(bool)
                if masks_out is not None:
                    masks_out.append(m)
                g = np.asarray(f.gt_mask, dtype=bool)
                inter += int(np.sum(m & g))
                union += int(np.sum(m | g))
    if regions:
        rep.region = {k: float(np.mean([r[k] for r in regions])) for k in regions[0]}
    if with_mask and regions:
        rep.mask_iou = 1.0 if union == 0 else inter / union
    if labels is not None and len(labels) == len(scene):
        rep.decoupling = decoupling_score(scene.w, labels, config.tau_train)
    rep.gap_mass = decouple.gap_mass(scene.w, config.tau_s_inf, config.tau_d_inf)
    return rep


def run_ablation(dataset, base_config: TrainConfig, configs=("a", "b", "c", "d", "full"), log_dir=None) -> list[dict]:
    """Train each flag configuration from the same init and evaluate on held-out frames."""
    train_frames, test_frames = dataset.split(base_config.holdout_every)
    test_frames = test_frames or train_frames
    rows = []
    for cid in configs:
        cfg = base_config.with_ablation(cid)
        log = open(Path(log_dir) / f"log_{cid}.jsonl", "w") if log_dir else None
        try:
            st = train(dataset, cfg, log=log, frames=train_frames)
        finally:
            if log:
                log.close()
        rep = evaluate(st.scene, test_frames, cfg, dataset.labels, with_mask=False)
        rows.append({"config_id": cid, "psnr": rep.psnr_mean, "ssim": rep.ssim_mean,
                     "n_gaussians": len(st.scene)})
    return rows


def format_ablation(rows: list[dict]) -> str:
    lines = [f"{'config':<8}{'PSNR(dB)':>10}{'SSIM':>9}"]
    for r in rows:
        lines.append(f"{r['config_id']:<8}{r['psnr']:>10.3f}{r['ssim']:>9.4f}")
    return "\n".join(lines)


__all__ = ["TrainConfig", "TrainState", "TrainingAborted", "train", "train_step", "evaluate", "run_ablation",
           "save_checkpoint", "load_checkpoint", "load_config", "ABLATIONS"]

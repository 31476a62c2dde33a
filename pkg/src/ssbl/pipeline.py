"""Training, inference, fusion and the interval ablation.

Direction conventions: for a target phase ``t`` the chronological neighbour is
``t - 1`` and the reverse-chronological neighbour is ``t + 1`` (both wrap
around the cycle unless the ``mirror`` boundary is requested). The motion
input for target ``t`` and neighbour ``n`` is ``ssnet(I_t, I_n)``: a field on
t's grid that pulls ``I_n`` onto it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, no_grad
from .evaluation import MetricRecord, dice, jaccard
from .networks import (
    Checkpoint,
    ParameterSet,
    SSNetConfig,
    SSSLConfig,
    cast_parameters,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
    sssl_forward,
    ssnet_forward,
)
from .objectives import MotionLossWeights, SegLossConfig, motion_loss, segmentation_loss
from .transform import compose, motion_distance_map
from .volume import LabelMask, ProbabilityMap, StudyManifest, load_manifest, load_mask, load_volume, preprocess

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class TrainingDiverged(RuntimeError):
    """A non-finite loss was met; the last good checkpoint has been written."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    train_studies: list[str] = field(default_factory=list)
    epochs_motion: int = 40
    epochs_seg: int = 30
    lr: float = 1e-4
    batch_size: int = 1
    # the literal unweighted sum lets the consistency term pin the field at zero
    loss_weights: MotionLossWeights = field(default_factory=lambda: MotionLossWeights(smooth=0.02, consist=0.1))
    seg_loss: SegLossConfig = field(default_factory=SegLossConfig)
    patch_dims: tuple[int, int, int] | None = (32, 32, 32)
    seed: int = 0
    precision: str = "f32"
    ssnet: SSNetConfig = field(default_factory=lambda: SSNetConfig(base_channels=8, depth=3))
    sssl: SSSLConfig = field(default_factory=SSSLConfig)
    clip_fraction: float = 0.005
    distance_quantile: float = 0.9
    # "ssnet" feeds frozen SS-Net fields to the segmenter, "zero" trains the no-motion baseline
    motion_source: str = "ssnet"
    field_scaling: str = "robust"
    # fraction of the motion epochs over which the consistency weight ramps up from zero
    consist_warmup: float = 0.25

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = MotionLossWeights(**self.loss_weights)
        if isinstance(self.seg_loss, dict):
            self.seg_loss = SegLossConfig(**self.seg_loss)
        if isinstance(self.ssnet, dict):
            self.ssnet = SSNetConfig(**self.ssnet)
        if isinstance(self.sssl, dict):
            self.sssl = SSSLConfig(**self.sssl)
        if self.patch_dims is not None:
            self.patch_dims = tuple(int(d) for d in self.patch_dims)
        self.train_studies = [str(s) for s in self.train_studies]
        self.validate()

    def validate(self) -> None:
        if self.epochs_motion < 0 or self.epochs_seg < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.motion_source not in ("ssnet", "zero"):
            raise ValueError("motion_source must be 'ssnet' or 'zero'")
        if self.field_scaling not in ("none", "robust", "global"):
            raise ValueError("field_scaling must be 'none', 'robust' or 'global'")
        if not 0.0 <= self.consist_warmup <= 1.0:
            raise ValueError("consist_warmup must lie in [0, 1]")
        if self.patch_dims is not None:
            if len(self.patch_dims) != 3:
                raise ValueError("patch_dims needs three extents")
            unit = 2 ** max(self.ssnet.depth, self.sssl.depth)
            if any(d % unit or d <= 0 for d in self.patch_dims):
                raise ValueError(f"patch_dims {self.patch_dims} must be positive multiples of {unit}")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """Epoch counts, learning rate and SS-Net depth of the original protocol."""
        base = dict(epochs_motion=200, epochs_seg=100, lr=1e-4, ssnet=SSNetConfig())
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["patch_dims"] = list(self.patch_dims) if self.patch_dims else None
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**doc)


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def run_manifest(command: str, config: dict, seed: int) -> dict:
    """Reproducibility record; deliberately free of timestamps and host names."""
    import scipy

    from . import __version__

    return {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": {
            "ssbl": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }


def write_run_manifest(out_dir, command: str, config: dict, seed: int) -> Path:
    path = Path(out_dir) / "run_manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(run_manifest(command, config, seed), indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class Study:
    manifest: StudyManifest
    images: list[np.ndarray]
    masks: list[np.ndarray] | None

    @property
    def study_id(self) -> str:
        return self.manifest.study_id

    @property
    def num_phases(self) -> int:
        return len(self.images)


def load_study(path, clip_fraction: float = 0.005) -> Study:
    """Load and preprocess (clip + min-max) every phase of a study."""
    manifest = load_manifest(path)
    images = [preprocess(load_volume(manifest.path(r)), clip_fraction).data for r in manifest.volumes]
    masks = None
    if manifest.masks:
        masks = [load_mask(manifest.path(r)).data for r in manifest.masks]
    return Study(manifest, images, masks)


def neighbours(t: int, num_phases: int, boundary: str = "cyclic") -> tuple[int, int]:
    """(chronological, reverse-chronological) neighbour of phase ``t``."""
    if not 0 <= t < num_phases:
        raise IndexError(f"phase {t} out of range for {num_phases} phases")
    if num_phases < 2:
        raise ValueError("need at least two phases")
    if boundary == "cyclic":
        return (t - 1) % num_phases, (t + 1) % num_phases
    if boundary == "mirror":
        prev = t - 1 if t > 0 else t + 1
        nxt = t + 1 if t < num_phases - 1 else t - 1
        return prev, nxt
    raise ValueError(f"unknown boundary mode {boundary!r}")


def adjacent_pairs(num_phases: int) -> list[tuple[int, int]]:
    """Every adjacent pair once, the cyclic pair (T-1, 0) included."""
    pairs = [(t, t + 1) for t in range(num_phases - 1)]
    if num_phases > 2:
        pairs.append((num_phases - 1, 0))
    return pairs


def _crop_origin(rng: np.random.Generator, dims, patch) -> tuple[slice, ...]:
    if patch is None:
        return (slice(None),) * 3
    out = []
    for n, p in zip(dims, patch):
        if p > n:
            raise ValueError(f"patch {patch} larger than volume {dims}")
        o = int(rng.integers(0, n - p + 1))
        out.append(slice(o, o + p))
    return tuple(out)


def _tensor(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(arr, dtype=dtype))


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

@dataclass
class Model:
    params: ParameterSet
    config: SSNetConfig | SSSLConfig
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, source) -> "Model":
        if isinstance(source, Model):
            return source
        ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
        if ckpt.config is None:
            raise ValueError("checkpoint carries no network config")
        return cls(ckpt.params, ckpt.config, ckpt.extra)

    def save(self, path) -> None:
        save_checkpoint(self.params, path, self.config, self.extra)


def _pad_to(arr: np.ndarray, unit: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    dims = arr.shape[1:]
    pad = [(-n) % unit for n in dims]
    if not any(pad):
        return arr, dims
    return np.pad(arr, [(0, 0)] + [(0, p) for p in pad], mode="edge"), dims


def predict_field(motion: Model, image_t: np.ndarray, image_n: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Frozen SS-Net inference on whole volumes; inputs are edge-padded to the
    network's divisibility unit and the output cropped back."""
    unit = 2 ** motion.config.depth
    a, dims = _pad_to(np.asarray(image_t, dtype=dtype)[None], unit)
    b, _ = _pad_to(np.asarray(image_n, dtype=dtype)[None], unit)
    params = motion.params if dtype == np.float32 else cast_parameters(motion.params, dtype)
    with no_grad():
        phi = ssnet_forward(params, Tensor(a), Tensor(b), motion.config).value
    return phi[:, :dims[0], :dims[1], :dims[2]]


def field_magnitude_scale(fields) -> float:
    """99th-percentile displacement magnitude pooled over ``fields``."""
    mags = [np.sqrt((phi.astype(np.float64) ** 2).sum(axis=0)).ravel() for phi in fields]
    return float(np.percentile(np.concatenate(mags), 99.0)) if mags else 0.0


def scale_field(phi: np.ndarray, mode: str = "robust", scale: float | None = None) -> np.ndarray:
    """Motion-branch input.

    ``robust`` divides each field by its own 99th-percentile magnitude, which
    also inflates near-still fields to full scale; ``global`` divides by one
    fixed ``scale`` taken over the training fields, so amplitude is kept.
    """
    if mode == "none":
        return phi
    if mode == "global":
        if scale is None:
            raise ValueError("global field scaling needs a scale")
        ref = float(scale)
    else:
        ref = float(np.percentile(np.sqrt((phi.astype(np.float64) ** 2).sum(axis=0)), 99.0))
    if ref <= 1e-6:
        return np.zeros_like(phi)
    return (phi / ref).astype(phi.dtype)


def motion_inputs(phi: np.ndarray | None, dims, quantile: float, scaling: str, dtype=np.float32,
                  scale: float | None = None):
    """(field input, distance map) for the segmenter; ``None`` means no motion."""
    if phi is None:
        return np.zeros((3,) + tuple(dims), dtype=dtype), np.zeros(tuple(dims), dtype=dtype)
    return (scale_field(phi, scaling, scale).astype(dtype),
            motion_distance_map(phi, quantile).astype(dtype))


def segment(seg: Model, image: np.ndarray, phi: np.ndarray | None, quantile: float = 0.9,
            scaling: str = "robust", dtype=np.float32, scale: float | None = None) -> np.ndarray:
    """Class probabilities (C, X, Y, Z) for one image and one motion field."""
    dims = image.shape
    fin, dist = motion_inputs(phi, dims, quantile, scaling, dtype, scale)
    unit = 2 ** seg.config.depth
    img, _ = _pad_to(np.asarray(image, dtype=dtype)[None], unit)
    dm, _ = _pad_to(dist[None], unit)
    ff, _ = _pad_to(fin, unit)
    params = seg.params if dtype == np.float32 else cast_parameters(seg.params, dtype)
    with no_grad():
        probs = sssl_forward(params, Tensor(img), Tensor(dm), Tensor(ff), seg.config).value
    return probs[:, :dims[0], :dims[1], :dims[2]]


# ---------------------------------------------------------------------------
# Motion training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    best_epoch: int
    checkpoint: Path | None = None


def _write_loss_log(path: Path, losses: list[float]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for e, v in enumerate(losses, start=1):
            w.writerow([e, repr(float(v))])


def _snapshot(params: ParameterSet) -> ParameterSet:
    return {k: Tensor(v.value.astype(np.float32, copy=True), requires_grad=True, name=k)
            for k, v in params.items()}


def _run_epochs(cfg: TrainConfig, params: ParameterSet, net_cfg, epochs: int, steps: Callable,
                out_dir, stem: str, extra: dict, progress: Callable[[str], None] | None,
                select_from: int = 1) -> TrainResult:
    """Shared loop: ``steps(work, state, rng)`` yields per-step losses after
    updating the parameters. The kept model is the one with the lowest mean
    epoch loss among epochs ``>= select_from`` (earlier epochs optimise a
    different objective while the loss weights ramp up)."""
    dtype = PRECISIONS[cfg.precision]
    work = cast_parameters(params, dtype) if dtype != np.float32 else params
    state = AdamState(lr=cfg.lr)
    best = _snapshot(work)
    best_loss, best_epoch, losses = math.inf, 0, []
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        vals = []
        for loss in steps(work, state, rng):
            if not math.isfinite(loss):
                model = Model(best, net_cfg, {**extra, "best_epoch": best_epoch})
                if out is not None:
                    model.save(out / stem)
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}; kept epoch {best_epoch}")
            vals.append(loss)
        mean = float(np.mean(vals)) if vals else 0.0
        losses.append(mean)
        if progress:
            progress(f"{stem} epoch {epoch}/{epochs} loss {mean:.6f}")
        if epoch >= select_from and mean < best_loss:
            best_loss, best_epoch, best = mean, epoch, _snapshot(work)
    model = Model(best, net_cfg, {**extra, "best_epoch": best_epoch, "epochs": epochs})
    ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / stem
        model.save(ckpt)
        _write_loss_log(out / f"{stem}_loss.csv", losses)
    return TrainResult(model, losses, best_epoch, ckpt)


def train_motion(cfg: TrainConfig, studies: list[Study] | None = None, out_dir=None,
                 progress: Callable[[str], None] | None = None, init: ParameterSet | None = None) -> TrainResult:
    """Unsupervised SS-Net training on every adjacent pair of every study.

    The loss is symmetric in the pair, so one step per unordered pair covers
    both orders: SS-Net runs twice (swapped inputs) and the motion loss ties
    the two directions together.
    """
    studies = studies if studies is not None else [load_study(s, cfg.clip_fraction) for s in cfg.train_studies]
    if not studies:
        raise ValueError("no training studies")
    params = init if init is not None else init_parameters(cfg.ssnet, cfg.seed)
    dtype = PRECISIONS[cfg.precision]
    jobs = [(i, a, b) for i, s in enumerate(studies) for a, b in adjacent_pairs(s.num_phases)]
    # At initialisation both directions predict the same near-zero field, so
    # the L1 consistency term penalises any motion linearly and pins the
    # network at zero. It is therefore ramped in after the photometric term
    # has produced a motion pattern.
    ramp_steps = int(round(cfg.consist_warmup * cfg.epochs_motion * len(jobs)))
    counter = {"step": 0}

    def weights() -> MotionLossWeights:
        w = cfg.loss_weights
        if counter["step"] >= ramp_steps:
            return w
        return MotionLossWeights(w.smooth, w.consist * counter["step"] / ramp_steps)

    def steps(work, state, rng):
        for j in rng.permutation(len(jobs)):
            i, a, b = jobs[j]
            st = studies[i]
            region = _crop_origin(rng, st.images[a].shape, cfg.patch_dims)
            ia = _tensor(st.images[a][region][None], dtype)
            ib = _tensor(st.images[b][region][None], dtype)
            phi_f = ssnet_forward(work, ia, ib, cfg.ssnet)
            phi_b = ssnet_forward(work, ib, ia, cfg.ssnet)
            loss = motion_loss(ia, ib, phi_f, phi_b, weights())
            counter["step"] += 1
            value = float(loss.value)
            if math.isfinite(value):
                backward(loss)
                adam_step(list(work.values()), state)
            yield value

    select_from = min(cfg.epochs_motion, math.ceil(cfg.consist_warmup * cfg.epochs_motion) + 1)
    return _run_epochs(cfg, params, cfg.ssnet, cfg.epochs_motion, steps, out_dir, "motion",
                       {"kind": "ssnet", "seed": cfg.seed}, progress, select_from)


# ---------------------------------------------------------------------------
# Segmentation training
# ---------------------------------------------------------------------------

def directional_fields(motion: Model | None, study: Study, dtype=np.float32) -> dict[tuple[int, int], np.ndarray]:
    """SS-Net fields for every (target, neighbour) pair of adjacent phases."""
    out = {}
    for a, b in adjacent_pairs(study.num_phases):
        for t, n in ((a, b), (b, a)):
            out[(t, n)] = predict_field(motion, study.images[t], study.images[n], dtype) if motion else None
    return out


def train_segmentation(cfg: TrainConfig, motion: Model | None, studies: list[Study] | None = None,
                       out_dir=None, progress: Callable[[str], None] | None = None,
                       stem: str = "seg") -> TrainResult:
    """Supervised SS-SL training with a frozen SS-Net.

    Each epoch visits every phase of every study once; even steps use the
    chronological neighbour, odd steps the reverse one. With
    ``cfg.motion_source == "zero"`` the motion inputs are zero (baseline arm).
    """
    studies = studies if studies is not None else [load_study(s, cfg.clip_fraction) for s in cfg.train_studies]
    if not studies:
        raise ValueError("no training studies")
    for st in studies:
        if st.masks is None:
            raise ValueError(f"study {st.study_id} has no masks")
    use_motion = cfg.motion_source == "ssnet"
    if use_motion and motion is None:
        raise ValueError("a motion model is required unless motion_source is 'zero'")
    dtype = PRECISIONS[cfg.precision]
    fields = [directional_fields(motion if use_motion else None, st) for st in studies]
    scale = None
    if cfg.field_scaling == "global":
        scale = field_magnitude_scale([phi for f in fields for phi in f.values() if phi is not None])
    inputs = [{key: motion_inputs(phi, st.images[0].shape, cfg.distance_quantile, cfg.field_scaling,
                                  scale=scale) for key, phi in f.items()}
              for st, f in zip(studies, fields)]
    params = init_parameters(cfg.sssl, cfg.seed + 1)
    jobs = [(i, t) for i, st in enumerate(studies) for t in range(st.num_phases)]
    counter = {"step": 0}

    def steps(work, state, rng):
        for j in rng.permutation(len(jobs)):
            i, t = jobs[j]
            st = studies[i]
            chrono, rev = neighbours(t, st.num_phases)
            n = chrono if counter["step"] % 2 == 0 else rev
            counter["step"] += 1
            fin, dist = inputs[i][(t, n)]
            region = _crop_origin(rng, st.images[t].shape, cfg.patch_dims)
            img = _tensor(st.images[t][region][None], dtype)
            dm = _tensor(dist[region][None], dtype)
            ff = _tensor(fin[(slice(None),) + region], dtype)
            probs = sssl_forward(work, img, dm, ff, cfg.sssl)
            loss = segmentation_loss(probs, st.masks[t][region], cfg.seg_loss)
            value = float(loss.value)
            if math.isfinite(value):
                backward(loss)
                adam_step(list(work.values()), state)
            yield value

    extra = {"kind": "sssl", "seed": cfg.seed, "motion_source": cfg.motion_source,
             "field_scaling": cfg.field_scaling, "field_scale": scale,
             "distance_quantile": cfg.distance_quantile}
    return _run_epochs(cfg, params, cfg.sssl, cfg.epochs_seg, steps, out_dir, stem, extra, progress)


# ---------------------------------------------------------------------------
# Inference and fusion
# ---------------------------------------------------------------------------

@dataclass
class SegOutcome:
    time_index: int
    probabilities: ProbabilityMap
    mask: LabelMask
    directional: list[ProbabilityMap]
    neighbours: tuple[int, ...]


def fuse(prob_maps: list[np.ndarray]) -> np.ndarray:
    """Per-voxel mean of the directional probability maps."""
    if not prob_maps:
        raise ValueError("nothing to fuse")
    acc = np.zeros(prob_maps[0].shape, dtype=np.float64)
    for p in prob_maps:
        acc += p
    return (acc / len(prob_maps)).astype(prob_maps[0].dtype)


def _seg_settings(seg: Model) -> tuple[float, str, float | None]:
    return (float(seg.extra.get("distance_quantile", 0.9)), seg.extra.get("field_scaling", "robust"),
            seg.extra.get("field_scale"))


def _directional(motion: Model | None, seg: Model, study: Study, t: int, n: int | None,
                 phi: np.ndarray | None = None, dtype=np.float32) -> np.ndarray:
    if phi is None and n is not None and motion is not None:
        phi = predict_field(motion, study.images[t], study.images[n], dtype)
    q, scaling, scale = _seg_settings(seg)
    return segment(seg, study.images[t], phi, q, scaling, dtype, scale)


def _outcome(t: int, maps: list[np.ndarray], nbrs: tuple[int, ...], spacing) -> SegOutcome:
    fused = fuse(maps)
    pm = ProbabilityMap(fused)
    mask = pm.argmax()
    return SegOutcome(t, pm, LabelMask(mask.data, mask.num_classes, spacing),
                      [ProbabilityMap(m) for m in maps], nbrs)


def _as_study(study) -> Study:
    return study if isinstance(study, Study) else load_study(study)


def infer_bidirectional(motion, seg, study, t: int, boundary: str = "cyclic", dtype=np.float32) -> SegOutcome:
    """Fuse the chronological and reverse-chronological predictions for phase ``t``."""
    motion, seg, study = Model.load(motion), Model.load(seg), _as_study(study)
    chrono, rev = neighbours(t, study.num_phases, boundary)
    maps = [_directional(motion, seg, study, t, chrono, dtype=dtype),
            _directional(motion, seg, study, t, rev, dtype=dtype)]
    return _outcome(t, maps, (chrono, rev), study.manifest.spacing)


def infer_single(motion, seg, study, t: int, direction: str = "chronological",
                 boundary: str = "cyclic", dtype=np.float32) -> SegOutcome:
    """One directional prediction without fusion; ``direction`` may also be
    ``"zero"`` for the no-motion input."""
    seg, study = Model.load(seg), _as_study(study)
    if direction == "zero":
        return _outcome(t, [_directional(None, seg, study, t, None, dtype=dtype)], (), study.manifest.spacing)
    motion = Model.load(motion)
    chrono, rev = neighbours(t, study.num_phases, boundary)
    if direction == "chronological":
        n = chrono
    elif direction == "reverse":
        n = rev
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return _outcome(t, [_directional(motion, seg, study, t, n, dtype=dtype)], (n,), study.manifest.spacing)


# ---------------------------------------------------------------------------
# Interval ablation
# ---------------------------------------------------------------------------

SCHEMES = ("D0", "D1", "D3", "D5")


@dataclass(frozen=True)
class AblationPlan:
    """Phase intervals whose fields are chained to link ED and ES."""

    ed: int = 1
    es: int = 5
    schemes: tuple[str, ...] = SCHEMES

    def __post_init__(self):
        if self.es - self.ed != 4:
            raise ValueError("the interval schemes need ES = ED + 4")
        unknown = set(self.schemes) - set(SCHEMES)
        if unknown:
            raise ValueError(f"unknown schemes {sorted(unknown)}")

    def waypoints(self, scheme: str) -> list[int]:
        ed = self.ed
        return {"D0": [], "D1": [ed, ed + 4], "D3": [ed, ed + 2, ed + 4],
                "D5": [ed, ed + 1, ed + 2, ed + 3, ed + 4]}[scheme]

    def intervals(self, scheme: str) -> list[tuple[int, int]]:
        w = self.waypoints(scheme)
        return list(zip(w[:-1], w[1:]))


def chain_field(step: Callable[[int, int], np.ndarray], path: list[int]) -> np.ndarray:
    """Compose ``step(t, n)`` fields along ``path`` into one field on the grid of
    ``path[0]`` that pulls phase ``path[-1]``."""
    total = step(path[0], path[1])
    for a, b in zip(path[1:-1], path[2:]):
        total = compose(total, step(a, b))
    return total


def ablation_fields(motion: Model, study: Study, plan: AblationPlan, scheme: str,
                    dtype=np.float32) -> dict[int, np.ndarray | None]:
    """Field per evaluated phase (ED and ES) under one scheme."""
    w = plan.waypoints(scheme)
    if not w:
        return {plan.ed: None, plan.es: None}
    if max(w) >= study.num_phases:
        raise ValueError(f"study {study.study_id} lacks phase {max(w)}")
    cache: dict[tuple[int, int], np.ndarray] = {}

    def step(t, n):
        if (t, n) not in cache:
            cache[(t, n)] = predict_field(motion, study.images[t], study.images[n], dtype)
        return cache[(t, n)]

    return {plan.ed: chain_field(step, w), plan.es: chain_field(step, w[::-1])}


def run_interval_ablation(plan: AblationPlan, motion, seg, study, dtype=np.float32) -> list[MetricRecord]:
    """Dice at ED and ES for each interval scheme; ``kind`` holds the scheme."""
    motion, seg, study = Model.load(motion), Model.load(seg), _as_study(study)
    if study.masks is None:
        raise ValueError(f"study {study.study_id} has no masks")
    records = []
    for scheme in plan.schemes:
        for t, phi in ablation_fields(motion, study, plan, scheme, dtype).items():
            mask = ProbabilityMap(_directional(None, seg, study, t, None, phi, dtype)).argmax().data
            records.append(MetricRecord(study.study_id, t, 1, dice(mask, study.masks[t]),
                                        jaccard(mask, study.masks[t]), None, None, None, scheme))
    return records


__all__ = [
    "AblationPlan", "Model", "SegOutcome", "Study", "TrainConfig", "TrainResult", "TrainingDiverged",
    "ablation_fields", "adjacent_pairs", "chain_field", "config_hash", "directional_fields",
    "field_magnitude_scale", "fuse",
    "infer_bidirectional", "infer_single", "load_study", "motion_inputs", "neighbours", "predict_field",
    "run_interval_ablation", "run_manifest", "scale_field", "segment", "train_motion",
    "train_segmentation", "write_run_manifest",
]

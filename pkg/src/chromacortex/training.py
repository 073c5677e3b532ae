"""Training loop: batches of drift pairs in, bucket updates out.

Every step draws scenes from a fixed synthetic pool, encodes an optic nerve
pair (t, t+dt) with fresh fixational drift, runs decode / translate /
re-encode, and applies one Adam step to every bucket followed by the
constraint projections. The loop is deterministic for a given seed; the loss
trace, checkpoints and motion-confidence rate are its outputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from chromacortex import autodiff as ad
from chromacortex import cortex as cx
from chromacortex import retina as rt
from chromacortex import spectral as sp


class TrainingError(Exception):
    pass


class DivergenceError(TrainingError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    """Pool of synthetic scenes feeding the drift-pair sampler."""

    n_scenes: int = 48
    scene_size: int = 96
    patch_count: int = 7
    smoothness: float = 0.3
    seed: int = 100


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch: int = 8
    drift_bound: int = 3
    motion_mode: str = "learned"  # or "oracle"
    motion_weight: float = 1.0
    snr: float | None = 100.0
    lr: float = 1e-3
    lr_overrides: tuple = ()  # (("C", 3e-3), ...) per-bucket learning rates
    beta1: float = 0.9
    beta2: float = 0.999
    checkpoint_every: int = 1000
    divergence_factor: float = 1e3
    seed: int = 0


class SceneStream:
    def __init__(self, cfg: StreamConfig, grid: sp.BandGrid = sp.DEFAULT_GRID):
        self.cfg = cfg
        self.scenes = [
            sp.synth_scene(
                sp.SceneRecipe(
                    size=cfg.scene_size,
                    patch_count=cfg.patch_count,
                    smoothness=cfg.smoothness,
                    seed=cfg.seed * 10_000 + i,
                ),
                grid,
            )
            for i in range(cfg.n_scenes)
        ]

    def sample_pairs(self, engine: rt.RetinaEngine, batch: int, bound: int, rng):
        """Encode a batch of (O_t, O_t+dt) with uniform drift steps."""
        max_off = engine.mosaic.max_gaze
        if max_off < bound:
            raise TrainingError("drift bound exceeds the mosaic's gaze margin")
        O_t = np.empty((batch,) + engine.mosaic.shape)
        O_dt = np.empty_like(O_t)
        deltas = np.empty((batch, 2))
        for b in range(batch):
            scene = self.scenes[rng.integers(0, len(self.scenes))]
            g0 = rng.integers(-(max_off - bound), max_off - bound + 1, size=2)
            step = rng.integers(-bound, bound + 1, size=2)
            g1 = g0 + step
            O_t[b] = engine.encode(scene, tuple(g0), rng=rng)
            O_dt[b] = engine.encode(scene, tuple(g1), rng=rng)
            deltas[b] = step
        return O_t, O_dt, deltas


@dataclass
class TrainResult:
    model: cx.CorticalModel
    loss_trace: np.ndarray  # (steps, 3): step, loss, motion confidence rate
    rate_gain: float | None = None


def _adam_groups(model: cx.CorticalModel, cfg: TrainConfig) -> dict[str, ad.AdamState]:
    overrides = dict(cfg.lr_overrides)
    groups = {}
    for bucket in ("C", "W", "P", "D", "M"):
        groups[bucket] = ad.AdamState(
            lr=overrides.get(bucket, cfg.lr), beta1=cfg.beta1, beta2=cfg.beta2
        )
    return groups


def _bucket_of(name: str) -> str:
    return name.split("_")[0] if "_" in name else name


def train_step(
    model: cx.CorticalModel,
    optim: dict[str, ad.AdamState],
    O_t: np.ndarray,
    O_dt: np.ndarray,
    true_delta: np.ndarray,
    cfg: TrainConfig,
) -> tuple[float, float, int]:
    """One forward/backward/update cycle. Returns (loss, confidence rate,
    regularizer-domination count)."""
    model.refresh_eps()
    tape = ad.Tape()
    leaves = model.leaves(tape)
    t_O = tape.const(O_t)
    t_Odt = tape.const(O_dt)

    if cfg.motion_mode == "oracle":
        delta = tape.const(true_delta)
        weights = None
        conf_rate = 1.0
    elif cfg.motion_mode == "learned":
        est = cx.estimate_motion(model, leaves, t_O, t_Odt, window=2 * cfg.drift_bound)
        delta = est.delta
        confident = est.confidence >= model.cfg.motion_conf_floor
        conf_rate = float(np.mean(confident))
        weights = confident.astype(np.float64)
        if not confident.any():
            return float("nan"), 0.0, tape.div_reg_hits  # nothing usable this step
    else:
        raise TrainingError(f"unknown motion mode {cfg.motion_mode!r}")

    loss = cx.prediction_loss(model, leaves, t_O, t_Odt, delta, weights=weights)
    if cfg.motion_mode == "learned" and cfg.motion_weight > 0:
        mloss = cx.motion_loss(model, leaves, t_O, t_Odt, delta, weights=weights)
        loss = ad.add(loss, ad.mul(mloss, tape.const(cfg.motion_weight)))

    ad.backward(loss)
    grads = model.grads_of(leaves)
    by_bucket: dict[str, dict] = {}
    for name, g in grads.items():
        by_bucket.setdefault(_bucket_of(name), {})[name] = g
    for bucket, gdict in by_bucket.items():
        ad.adam_step({k: model.params[k] for k in gdict}, gdict, optim[bucket])
    model.project_constraints()
    return float(loss.data), conf_rate, tape.div_reg_hits


def train(
    model: cx.CorticalModel,
    engine: rt.RetinaEngine,
    stream: SceneStream,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    log_every: int = 25,
) -> TrainResult:
    if cfg.steps < 1:
        raise TrainingError("steps must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    optim = _adam_groups(model, cfg)
    trace = []
    initial_loss = None
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    for step in range(1, cfg.steps + 1):
        O_t, O_dt, deltas = stream.sample_pairs(engine, cfg.batch, cfg.drift_bound, rng)
        loss, conf_rate, _ = train_step(model, optim, O_t, O_dt, deltas, cfg)
        if np.isfinite(loss):
            if initial_loss is None:
                initial_loss = loss
            if loss > cfg.divergence_factor * max(initial_loss, 1e-12):
                raise DivergenceError(
                    f"step {step}: loss {loss:.3e} exceeds "
                    f"{cfg.divergence_factor:g}x initial {initial_loss:.3e}"
                )
        if step % log_every == 0 or step == 1 or step == cfg.steps:
            trace.append((step, loss, conf_rate))
        if out_dir is not None and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
            save_checkpoint(
                out_dir / "checkpoints" / f"step_{step:07d}.ckpt1",
                model,
                optim,
                step,
                cfg,
            )

    trace = np.asarray(trace, dtype=np.float64)
    if out_dir is not None:
        write_loss_csv(out_dir / "loss.csv", trace)
    return TrainResult(model=model, loss_trace=trace)


def write_loss_csv(path: str | Path, trace: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss,motion_confidence_rate\n")
        for step, loss, conf in trace:
            fh.write(f"{int(step)},{loss:.10e},{conf:.4f}\n")


# ---------------------------------------------------------------------------
# CKPT1: versioned container with deterministic bytes
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CKPT1\x00"


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    model: cx.CorticalModel,
    optim: dict[str, ad.AdamState] | None,
    step: int,
    train_cfg: TrainConfig | None = None,
    extra: dict | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, v in model.params.items():
        arrays[f"param/{k}"] = v
    if optim is not None:
        for bucket, st in optim.items():
            for k, m in st.m.items():
                arrays[f"adam_m/{bucket}/{k}"] = m
            for k, v in st.v.items():
                arrays[f"adam_v/{bucket}/{k}"] = v
    header = {
        "version": 1,
        "step": step,
        "cortex_config": asdict(model.cfg),
        "train_config": asdict(train_cfg) if train_cfg is not None else None,
        "adam_steps": {b: st.step for b, st in (optim or {}).items()},
        "adam_lr": {b: st.lr for b, st in (optim or {}).items()},
        "extra": extra or {},
        "arrays": [
            {"name": k, "shape": list(v.shape), "dtype": str(v.dtype)}
            for k, v in sorted(arrays.items())
        ],
    }
    header["config_hash"] = config_hash(header["cortex_config"])
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for k in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path):
    raw = Path(path).read_bytes()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise TrainingError(f"{path}: bad checkpoint magic")
    off = len(_CKPT_MAGIC)
    blob_len = int.from_bytes(raw[off : off + 8], "little")
    off += 8
    header = json.loads(raw[off : off + blob_len].decode())
    off += blob_len
    arrays = {}
    for meta in header["arrays"]:
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(meta["shape"])
        arrays[meta["name"]] = arr.copy()
        off += count * 8

    cc = header["cortex_config"]
    cfg = cx.CortexConfig(
        lattice_shape=tuple(cc["lattice_shape"]),
        n_channels=cc["n_channels"],
        demosaic_layers=cc["demosaic_layers"],
        demosaic_kernel=cc["demosaic_kernel"],
        demosaic_identity=cc["demosaic_identity"],
        n_knots=cc["n_knots"],
        res_nodes=cc["res_nodes"],
        res_bound=cc["res_bound"],
        min_slope=cc["min_slope"],
        eps_w_frac=cc["eps_w_frac"],
        lowpass_sigma=cc["lowpass_sigma"],
        motion_temperature=cc["motion_temperature"],
        motion_conf_floor=cc["motion_conf_floor"],
        init_seed=cc["init_seed"],
    )
    model = cx.CorticalModel(cfg)
    for k in model.params:
        model.params[k] = arrays[f"param/{k}"].copy()
    model.refresh_eps()
    optim = {}
    for bucket, nstep in header.get("adam_steps", {}).items():
        st = ad.AdamState(lr=header["adam_lr"][bucket])
        st.step = nstep
        prefix_m = f"adam_m/{bucket}/"
        prefix_v = f"adam_v/{bucket}/"
        for name, arr in arrays.items():
            if name.startswith(prefix_m):
                st.m[name[len(prefix_m) :]] = arr.copy()
            elif name.startswith(prefix_v):
                st.v[name[len(prefix_v) :]] = arr.copy()
        optim[bucket] = st
    return model, optim, header

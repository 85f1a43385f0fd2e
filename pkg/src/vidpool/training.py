"""Mini-batch training: Adam with elementwise gradient clipping, exponential
learning-rate decay, with-replacement frame sampling, validation-loss model
selection, checkpointing, and a finite-difference gradient check harness.

All randomness is drawn from counter-based streams keyed by
(seed, purpose, step), so resuming from a checkpoint replays the exact
run an uninterrupted training would have produced.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Var
from .classifier import ClassifierHead, HeadConfig, bce_graph, head_graph, init_head, multi_hot
from .data import Dataset, VideoRecord, split_dataset
from .deeppool import AssignmentParams, PoolSpec, pooling_graph
from .metrics import gap, hit_at_1, top_predictions
from .prng import Stream, derive_seed

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_HEADER = "step,train_loss,val_loss,gap,hit1"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0002
    clip_lo: float = -1.0
    clip_hi: float = 1.0
    decay_factor: float = 0.8
    decay_every: int = 4_000_000
    frames_per_video: int = 30
    batch_size: int = 64
    max_steps: int = 200
    eval_every: int = 50
    val_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.frames_per_video < 1:
            raise ValueError("frames_per_video must be >= 1")
        if self.clip_lo >= self.clip_hi:
            raise ValueError("empty clip range")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class Model:
    """A pooling layer (or plain frame averaging) plus the classifier head."""

    pool_kind: str  # "dsgmm" | "vlad" | "avg"
    num_classes: int
    head: ClassifierHead
    spec: PoolSpec | None = None
    params: AssignmentParams | None = None

    def __post_init__(self):
        if self.pool_kind not in ("dsgmm", "vlad", "avg"):
            raise ValueError(f"unknown pool kind {self.pool_kind!r}")
        if self.pool_kind != "avg" and (self.spec is None or self.params is None):
            raise ValueError("trainable pooling needs spec and params")

    def trainable(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.pool_kind != "avg":
            for name, arr in self.params.trainable().items():
                out["pool." + name] = arr
            for name, arr in self.spec.trainable().items():
                out["pool." + name] = arr
        for name, arr in self.head.trainable().items():
            out["head." + name] = arr
        return out

    def set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values into the live parameter arrays (shapes must match)."""
        own = self.trainable()
        if set(own) != set(arrays):
            raise ValueError("parameter name mismatch")
        for name, arr in own.items():
            arr[...] = arrays[name]


def _split_leaves(leaves: dict[str, Var]) -> tuple[dict[str, Var], dict[str, Var]]:
    pool = {n[5:]: v for n, v in leaves.items() if n.startswith("pool.")}
    head = {n[5:]: v for n, v in leaves.items() if n.startswith("head.")}
    return pool, head


def batch_graph(
    model: Model, leaves: dict[str, Var], frame_list: list[np.ndarray], targets: np.ndarray
) -> tuple[Var, Var]:
    """(loss, probs) Vars for one mini-batch of per-video frame matrices."""
    pool_vars, head_vars = _split_leaves(leaves)
    codes = []
    for frames in frame_list:
        fv = Var(np.asarray(frames, dtype=np.float64))
        if model.pool_kind == "avg":
            code = ag.vmean(fv, axis=0, keepdims=True)
        else:
            code = pooling_graph(model.spec, model.params, pool_vars, fv)
        codes.append(ag.reshape(code, (1, -1)))
    x = codes[0] if len(codes) == 1 else ag.concat(codes, axis=0)
    probs = head_graph(model.head.cfg, head_vars, x)
    return bce_graph(probs, targets), probs


def predict_probs(model: Model, frames: np.ndarray) -> np.ndarray:
    """Per-label probabilities for one video, using all its frames."""
    leaves = {name: Var(arr) for name, arr in model.trainable().items()}
    dummy = np.zeros((1, model.num_classes))
    _, probs = batch_graph(model, leaves, [frames], dummy)
    return probs.value[0]


# --- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    lr: float | None = None,
) -> None:
    """One in-place Adam update; gradients are clipped before the moments."""
    state.step += 1
    t = state.step
    if lr is None:
        lr = cfg.lr
    for name in sorted(params):
        g = np.clip(grads[name], cfg.clip_lo, cfg.clip_hi)
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """lr0 * decay^floor(step / decay_every), step counted from 0."""
    return cfg.lr * cfg.decay_factor ** (step // cfg.decay_every)


def sample_frames(video: VideoRecord, count: int, stream: Stream) -> np.ndarray:
    """``count`` frames drawn with replacement."""
    idx = stream.integers(video.frames.shape[0], size=count)
    return video.frames[idx]


# --- training loop ---------------------------------------------------------


@dataclass
class Checkpoint:
    step: int
    seed: int
    params: dict[str, np.ndarray]
    adam: AdamState
    best_step: int
    best_val_loss: float | None
    best_params: dict[str, np.ndarray]
    meta: dict


@dataclass
class TrainResult:
    model: Model
    checkpoint: Checkpoint
    log_rows: list[dict]

    @property
    def best_model(self) -> Model:
        m = model_from_meta(self.checkpoint.meta)
        m.set_arrays(self.checkpoint.best_params)
        return m


def evaluate(model: Model, ds: Dataset) -> tuple[float, float, float]:
    """(mean loss, GAP, Hit@1) over a dataset, using every frame."""
    losses = []
    probs_by_video: dict[str, np.ndarray] = {}
    truth: dict[str, set[int]] = {}
    leaves = {name: Var(arr) for name, arr in model.trainable().items()}
    for video in ds.records:
        targets = multi_hot([video.labels], model.num_classes)
        loss, probs = batch_graph(model, leaves, [video.frames], targets)
        losses.append(float(loss.value))
        probs_by_video[video.id] = probs.value[0]
        truth[video.id] = set(video.labels)
    preds = top_predictions(probs_by_video, n_per_video=20)
    return float(np.mean(losses)), gap(preds, truth), hit_at_1(preds, truth)


def _snapshot(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in params.items()}


def train(
    dataset: Dataset,
    model: Model | None,
    cfg: TrainConfig,
    log_path: str | None = None,
    checkpoint_path: str | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Run (or resume) training; returns the model, final checkpoint, log.

    Model selection keeps the parameters with the lowest validation loss.
    With ``resume``, the model is rebuilt from the checkpoint and the run
    continues at the saved step, reproducing the uninterrupted run exactly.
    """
    cfg.validate()
    if not dataset.records:
        raise ValueError("empty dataset")

    if resume is not None:
        model = model_from_meta(resume.meta)
        model.set_arrays(resume.params)
        state = AdamState(
            resume.adam.step,
            _snapshot(resume.adam.m),
            _snapshot(resume.adam.v),
        )
        start_step = resume.step
        best_step = resume.best_step
        best_val_loss = resume.best_val_loss
        best_params = _snapshot(resume.best_params) if resume.best_params else {}
    elif model is None:
        raise ValueError("need a model or a checkpoint to resume from")
    else:
        state = AdamState()
        start_step = 0
        best_step = -1
        best_val_loss = None
        best_params = {}

    if cfg.val_fraction > 0:
        train_ds, val_ds = split_dataset(
            dataset, (1.0 - cfg.val_fraction, cfg.val_fraction), derive_seed(cfg.seed, "split")
        )
        if not train_ds.records or not val_ds.records:
            raise ValueError("split produced an empty train or validation set")
    else:
        train_ds = val_ds = dataset

    params = model.trainable()
    log_rows: list[dict] = []

    for step in range(start_step, cfg.max_steps):
        lr = lr_at(cfg, step)
        pick = Stream(cfg.seed, "batch", step)
        idx = pick.integers(len(train_ds.records), size=cfg.batch_size)
        sampler = Stream(cfg.seed, "frames", step)
        frame_list = []
        labels = []
        for i in idx:
            video = train_ds.records[int(i)]
            frame_list.append(sample_frames(video, cfg.frames_per_video, sampler))
            labels.append(video.labels)
        targets = multi_hot(labels, model.num_classes)

        leaves = {name: Var(arr) for name, arr in params.items()}
        loss, _ = batch_graph(model, leaves, frame_list, targets)
        ag.backward(loss)
        grads = {name: leaves[name].grad for name in params}
        adam_step(params, grads, state, cfg, lr)

        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.max_steps:
            val_loss, val_gap, val_hit1 = evaluate(model, val_ds)
            log_rows.append(
                {
                    "step": done,
                    "train_loss": float(loss.value),
                    "val_loss": val_loss,
                    "gap": val_gap,
                    "hit1": val_hit1,
                }
            )
            if best_val_loss is None or val_loss < best_val_loss:
                best_val_loss = val_loss
                best_step = done
                best_params = _snapshot(params)

    if not best_params:  # never evaluated (max_steps < eval_every edge)
        best_params = _snapshot(params)
        best_step = cfg.max_steps

    ckpt = Checkpoint(
        step=cfg.max_steps,
        seed=cfg.seed,
        params=_snapshot(params),
        adam=AdamState(state.step, _snapshot(state.m), _snapshot(state.v)),
        best_step=best_step,
        best_val_loss=best_val_loss,
        best_params=best_params,
        meta=model_meta(model),
    )
    if log_path is not None:
        write_log(log_rows, log_path)
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return TrainResult(model, ckpt, log_rows)


def write_log(rows: list[dict], path: str) -> None:
    with open(path, "w") as fh:
        fh.write(LOG_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r['step']},{r['train_loss']!r},{r['val_loss']!r},{r['gap']!r},{r['hit1']!r}\n"
            )


# --- model (de)serialization ------------------------------------------------


def model_meta(model: Model) -> dict:
    head = model.head.cfg
    meta = {
        "pool_kind": model.pool_kind,
        "num_classes": model.num_classes,
        "head": {
            "input_dim": head.input_dim,
            "num_classes": head.num_classes,
            "num_experts": head.num_experts,
            "gate_input": head.gate_input,
            "gate_output": head.gate_output,
        },
    }
    if model.pool_kind != "avg":
        meta["variant"] = model.params.variant
        meta["k"] = model.spec.k
        meta["dim"] = model.params.dim
        meta["gamma"] = model.spec.gamma
        meta["intra_norm"] = model.spec.intra_norm
        meta["final_norm"] = model.spec.final_norm
        meta["shared_anchors"] = model.spec.anchor_means is None
    return meta


def model_from_meta(meta: dict) -> Model:
    """Rebuild the model structure with zero-filled parameter arrays."""
    hc = meta["head"]
    head_cfg = HeadConfig(
        hc["input_dim"], hc["num_classes"], hc["num_experts"], hc["gate_input"], hc["gate_output"]
    )
    head = init_head(head_cfg, seed=0)
    for arr in head.trainable().values():
        arr[...] = 0.0
    if meta["pool_kind"] == "avg":
        return Model("avg", meta["num_classes"], head)
    k, d = meta["k"], meta["dim"]
    variant = meta["variant"]
    if variant == "decoupled":
        params = AssignmentParams(variant, u=np.zeros((k, d)), b=np.zeros(k))
    else:
        if variant in ("uniform_priors", "shared_spherical"):
            ls = np.zeros(())
        elif variant == "spherical":
            ls = np.zeros(k)
        elif variant == "shared_diagonal":
            ls = np.zeros(d)
        else:
            ls = np.zeros((k, d))
        logit_w = None if variant == "uniform_priors" else np.zeros(k)
        params = AssignmentParams(variant, logit_w=logit_w, means=np.zeros((k, d)), log_scale=ls)
    spec = PoolSpec(
        "dsgmm" if meta["pool_kind"] == "dsgmm" else "vlad",
        k,
        gamma=meta["gamma"],
        anchor_means=None if meta["shared_anchors"] else np.zeros((k, d)),
        intra_norm=meta["intra_norm"],
        final_norm=meta["final_norm"],
    )
    return Model(meta["pool_kind"], meta["num_classes"], head, spec, params)


# --- checkpoint file --------------------------------------------------------

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1


class CkptError(ValueError):
    """Malformed checkpoint data."""


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    groups = [
        ("params", ckpt.params),
        ("m", ckpt.adam.m),
        ("v", ckpt.adam.v),
        ("best", ckpt.best_params),
    ]
    arrays = []
    payload = bytearray()
    for group, d in groups:
        for name in sorted(d):
            arr = np.ascontiguousarray(d[name], dtype=np.float64)
            arrays.append([group, name, list(arr.shape)])
            payload.extend(arr.astype("<f8").tobytes())
    header = {
        "step": ckpt.step,
        "seed": ckpt.seed,
        "adam_step": ckpt.adam.step,
        "best_step": ckpt.best_step,
        "best_val_loss": ckpt.best_val_loss,
        "meta": ckpt.meta,
        "arrays": arrays,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CKPT_MAGIC:
        raise CkptError("bad magic: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != _CKPT_VERSION:
        raise CkptError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    off = 12 + hlen
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "m": {}, "v": {}, "best": {}}
    for group, name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(buf):
            raise CkptError("truncated checkpoint payload")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        groups[group][name] = arr
        off = end
    if off != len(buf):
        raise CkptError("trailing bytes after checkpoint payload")
    return Checkpoint(
        step=header["step"],
        seed=header["seed"],
        params=groups["params"],
        adam=AdamState(header["adam_step"], groups["m"], groups["v"]),
        best_step=header["best_step"],
        best_val_loss=header["best_val_loss"],
        best_params=groups["best"],
        meta=header["meta"],
    )


# --- gradient check ---------------------------------------------------------


def gradcheck(
    model: Model,
    seed: int = 0,
    coords_per_block: int = 20,
    batch_videos: int = 2,
    frames_per_video: int = 5,
    h: float = 1e-5,
) -> dict[str, float]:
    """Max relative error |analytic - central difference| per parameter block."""
    params = model.trainable()
    names = sorted(params)
    s = Stream(seed, "gradcheck")
    dim = model.head.cfg.input_dim if model.pool_kind == "avg" else model.params.dim
    frame_list = [s.normal((frames_per_video, dim)) for _ in range(batch_videos)]
    targets = (s.uniform((batch_videos, model.num_classes)) < 0.5).astype(np.float64)

    def build(leaf_list):
        leaves = dict(zip(names, leaf_list))
        loss, _ = batch_graph(model, leaves, frame_list, targets)
        return loss

    report: dict[str, float] = {}
    for i, name in enumerate(names):
        size = params[name].size
        take = min(coords_per_block, size)
        flat = s.spawn("coords", name).permutation(size)[:take]
        coords = [(i, int(j)) for j in flat]
        report[name] = ag.check_gradients(build, [params[n] for n in names], coords, h)
    return report

"""Training examples and the optimization loop for both model kinds."""

from __future__ import annotations

import contextlib
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import (
    EMAState,
    OptimizerState,
    adamw_step,
    clip_grad_norm,
    cosine_lr,
    ema_update,
    ema_warmup_decay,
    no_grad,
)
from .baseline import DEFAULT_SIGMA, MLPBaseline
from .cdit import FlowMapsModel, ModelConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, NonFiniteError
from .flow import TimeSampler
from .mapenc import TokenBatch, tokenize_map
from .sim import BBox, Episode, MapSnapshot, ObjectClass

MODEL_KINDS = ("flowmaps", "mlp_baseline")
METRICS_HEADER = ("step", "lr", "train_loss", "val_loss")


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 64
    cdit_blocks: int = 2
    enc_layers: int = 2
    heads: int = 4
    tokens: int = 16
    dropout: float = 0.1
    batch_size: int = 64
    iterations: int = 5000
    lr: float = 1e-4
    lr_floor: float = 0.0
    beta1: float = 0.95
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    sampler: str = "logit_normal"
    beta_a: float = 1.5
    beta_b: float = 1.0
    logit_m: float = 0.0
    logit_s: float = 1.0
    include_zero_horizon: bool = False
    val_every: int = 250
    val_examples: int = 512
    log_every: int = 50
    seed: int = 0
    model_kind: str = "flowmaps"
    sigma: float = DEFAULT_SIGMA
    dtype: str = "float32"

    def validate(self) -> None:
        positive = ("dim", "cdit_blocks", "enc_layers", "heads", "tokens", "batch_size", "iterations", "val_every",
                    "val_examples", "log_every")  # fmt: skip
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not (self.lr > 0 and 0 < self.beta1 < 1 and 0 < self.beta2 < 1 and 0 < self.ema_decay < 1):
            raise ConfigurationError("lr must be positive and beta1, beta2, ema_decay must lie in (0, 1)")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigurationError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.time_sampler()

    def time_sampler(self) -> TimeSampler:
        return TimeSampler(self.sampler, self.beta_a, self.beta_b, self.logit_m, self.logit_s)

    def model_config(self, palette_size: int, tau_max: int) -> ModelConfig:
        return ModelConfig(self.dim, self.cdit_blocks, self.enc_layers, self.heads, palette_size, tau_max, self.tokens, self.dropout)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """Embedding width 256, eight blocks on both sides, 30k iterations at lr 1e-4."""
        base = dict(dim=256, cdit_blocks=8, enc_layers=8, heads=8, iterations=30000, lr=1e-4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigurationError(f"unknown training option {key!r}")
            default = getattr(cls(), key)
            kw[key] = _coerce(raw, type(default), key)
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        text = Path(path).read_text(encoding="utf-8")
        if text.lstrip().startswith("{"):
            return cls.from_mapping(json.loads(text))
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        return cls.from_mapping(values)


def _coerce(raw, typ, key):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    try:
        if typ is bool:
            if isinstance(raw, str):
                if raw.lower() in ("1", "true", "yes", "on"):
                    return True
                if raw.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            return bool(raw)
        if typ is int:
            f = float(raw)
            if f != int(f):
                raise ValueError(raw)
            return int(f)
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"option {key!r}: cannot read {raw!r} as {typ.__name__}") from None


# --------------------------------------------------------------------------
# Examples
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingExample:
    snapshot: MapSnapshot
    query_descriptor: int
    query_class: ObjectClass
    delta_tau: int
    x1: BBox

    @property
    def tau_q(self) -> int:
        return self.snapshot.tau + self.delta_tau


def _draw_times(rng: np.random.Generator, tau_max: int, size, include_zero: bool):
    tau = rng.integers(0, tau_max, size=size)  # [0, tau_max - 1]
    span = tau_max - tau + (1 if include_zero else 0)
    dtau = np.floor(rng.random(size) * span).astype(np.int64) + (0 if include_zero else 1)
    return tau, dtau


def make_training_example(episode: Episode, rng: np.random.Generator, include_zero: bool = False) -> TrainingExample:
    if len(episode.snapshots) < 2:
        raise ConfigurationError("episode needs at least two snapshots")
    tau, dtau = _draw_times(rng, episode.tau_max, None, include_zero)
    tau, dtau = int(tau), int(dtau)
    snap = episode.snapshots[tau]
    j = int(rng.integers(len(snap.objects)))
    obj = snap.objects[j]
    target = episode.snapshots[tau + dtau].objects[j]
    return TrainingExample(snap, obj.descriptor, obj.obj_class, dtau, target.bbox)


@dataclass
class EpisodeArrays:
    """Dense per-episode arrays used for fast batch assembly."""

    descriptor: np.ndarray  # (E, S)
    kind: np.ndarray  # (E, S)
    valid: np.ndarray  # (E, S)
    bbox: np.ndarray  # (E, T, S, 4)
    obj_descriptor: np.ndarray  # (E, n_obj)
    obj_token: np.ndarray  # (n_obj,) token position of each object
    obj_index: np.ndarray  # (E, T, n_obj) pattern indices
    class_names: tuple[str, ...]
    tau_max: int

    @property
    def n_episodes(self) -> int:
        return self.descriptor.shape[0]

    @classmethod
    def build(cls, episodes: Sequence[Episode], S: int = 16) -> "EpisodeArrays":
        if not episodes:
            raise ConfigurationError("dataset is empty")
        tau_max = episodes[0].tau_max
        if any(ep.tau_max != tau_max for ep in episodes):
            raise ConfigurationError("all episodes in a dataset must share tau_max")
        names = tuple(c.name for c in episodes[0].classes)
        E, Tn = len(episodes), tau_max + 1
        desc = np.zeros((E, S), dtype=np.int64)
        kind = np.zeros((E, S), dtype=np.int64)
        valid = np.zeros((E, S), dtype=bool)
        bbox = np.zeros((E, Tn, S, 4))
        n_obj = len(names)
        obj_desc = np.zeros((E, n_obj), dtype=np.int64)
        obj_index = np.zeros((E, Tn, n_obj), dtype=np.int64)
        n_f = len(episodes[0].furniture)
        for e, ep in enumerate(episodes):
            if tuple(c.name for c in ep.classes) != names:
                raise ConfigurationError("all episodes in a dataset must list the same object classes")
            toks = tokenize_map(ep.snapshots[0], S)
            desc[e] = [t.descriptor_id for t in toks]
            kind[e] = [t.kind for t in toks]
            valid[e] = [t.valid for t in toks]
            bbox[e, :] = np.array([t.bbox for t in toks])
            obj_desc[e] = [o.descriptor for o in ep.snapshots[0].objects]
            for tau, snap in enumerate(ep.snapshots):
                for j, o in enumerate(snap.objects):
                    bbox[e, tau, n_f + j] = o.bbox.as_tuple()
                    obj_index[e, tau, j] = o.pattern_index
        return cls(desc, kind, valid, bbox, obj_desc, np.arange(n_obj) + n_f, obj_index, names, tau_max)

    def batch(self, ep, tau, dtau, obj) -> dict:
        ep, tau, dtau, obj = (np.asarray(a, dtype=np.int64) for a in (ep, tau, dtau, obj))
        tokens = TokenBatch(self.descriptor[ep], self.bbox[ep, tau], self.kind[ep], self.valid[ep])
        x1 = self.bbox[ep, tau + dtau, self.obj_token[obj]]
        return {
            "tokens": tokens,
            "tau": tau,
            "tau_q": tau + dtau,
            "delta_tau": dtau,
            "descriptor": self.obj_descriptor[ep, obj],
            "x1": x1,
            "episode": ep,
            "object": obj,
        }

    def sample_batch(self, rng: np.random.Generator, size: int, include_zero: bool = False) -> dict:
        ep = rng.integers(0, self.n_episodes, size=size)
        tau, dtau = _draw_times(rng, self.tau_max, size, include_zero)
        obj = rng.integers(0, len(self.class_names), size=size)
        return self.batch(ep, tau, dtau, obj)


def take_batch(batch: dict, idx) -> dict:
    out = {}
    for k, v in batch.items():
        out[k] = v.take(idx) if isinstance(v, TokenBatch) else v[idx]
    return out


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------


def build_model(kind: str, config: ModelConfig, rng: np.random.Generator, dtype=np.float32, sigma: float = DEFAULT_SIGMA):
    if kind == "flowmaps":
        return FlowMapsModel(config, rng, dtype)
    if kind == "mlp_baseline":
        return MLPBaseline(config, rng, dtype, sigma)
    raise ConfigurationError(f"unknown model kind {kind!r}")


@contextlib.contextmanager
def swapped_weights(model, weights: Sequence[np.ndarray]):
    """Temporarily load ``weights`` (e.g. the EMA shadow) into ``model``."""
    params = model.parameters()
    saved = [p.data for p in params]
    for p, w in zip(params, weights):
        p.data = w
    try:
        yield model
    finally:
        for p, s in zip(params, saved):
            p.data = s


@dataclass
class ValidationSet:
    batch: dict
    x0: np.ndarray
    t: np.ndarray


def make_validation_set(arrays: EpisodeArrays, config: TrainConfig) -> ValidationSet:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 0x7A1])))
    batch = arrays.sample_batch(rng, config.val_examples, config.include_zero_horizon)
    x0 = rng.standard_normal((config.val_examples, 4))
    t = config.time_sampler().sample(rng, config.val_examples)
    return ValidationSet(batch, x0, t)


def validation_loss(model, val: ValidationSet, chunk: int = 512) -> float:
    """Eval-mode loss on a fixed set, accumulated chunk by chunk."""
    n = len(val.t)
    total = 0.0
    with no_grad():
        for s in range(0, n, chunk):
            idx = np.arange(s, min(n, s + chunk))
            loss = model.loss(take_batch(val.batch, idx), val.x0[idx], val.t[idx])
            total += float(loss.data) * len(idx)
    return total / n


# --------------------------------------------------------------------------
# Loop
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    model: object
    opt: OptimizerState
    ema: EMAState
    config: TrainConfig
    step: int = 0
    ema_updates: int = 0


@dataclass
class TrainResult:
    model: object
    ema: EMAState
    metrics: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None
    seconds: float = 0.0

    def ema_model(self):
        """The model with EMA weights loaded permanently (for evaluation)."""
        for p, w in zip(self.model.parameters(), self.ema.shadow):
            p.data = w.copy()
        return self.model


def train_step(
    state: TrainState,
    batch: dict,
    x0: np.ndarray,
    t: np.ndarray,
    lr: float,
    dropout_rng: np.random.Generator | None = None,
) -> float:
    """Forward, backward, AdamW with ``lr`` and an EMA update; returns the loss."""
    model, cfg = state.model, state.config
    params = model.parameters()
    loss = model.loss(batch, x0, t, training=True, rng=dropout_rng)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value} at step {state.step} (lr={lr:.3g})")
    model.zero_grad()
    loss.backward()
    norm = clip_grad_norm(params, cfg.grad_clip)
    try:
        adamw_step(params, [p.grad for p in params], state.opt, lr)
    except NonFiniteError as exc:
        raise NonFiniteError(f"step {state.step}: {exc} (lr={lr:.3g}, grad norm={norm:.4g})") from None
    decay = ema_warmup_decay(cfg.ema_decay, state.ema_updates) if cfg.ema_warmup else cfg.ema_decay
    ema_update(state.ema, params, decay)
    state.ema_updates += 1
    state.step += 1
    return value


def checkpoint_config(config: TrainConfig, model_config: ModelConfig, palette: Sequence[str] | None = None) -> dict:
    return {
        "model_kind": config.model_kind,
        "model": model_config.to_dict(),
        "train": config.to_dict(),
        "palette": list(palette or []),
        "normalization": "boxes are (y, x, h, w) with (y, x) the center, all in unit-canvas coordinates",
        "sigma": config.sigma,
    }


def train(
    config: TrainConfig,
    train_episodes: Sequence[Episode],
    val_episodes: Sequence[Episode],
    out_dir: str | Path | None = None,
    palette: Sequence[str] | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    config.validate()
    if not train_episodes or not val_episodes:
        raise ConfigurationError("training and validation datasets must be non-empty")
    start = time.perf_counter()
    train_arr = EpisodeArrays.build(train_episodes, config.tokens)
    val_arr = EpisodeArrays.build(val_episodes, config.tokens)
    palette_size = len(palette) if palette else int(max(train_arr.descriptor.max(), train_arr.obj_descriptor.max())) + 1
    model_cfg = config.model_config(palette_size, train_arr.tau_max)

    init_seq, batch_seq, noise_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(4)
    gen = lambda seq: np.random.Generator(np.random.PCG64(seq))  # noqa: E731
    init_rng, batch_rng, noise_rng, drop_rng = gen(init_seq), gen(batch_seq), gen(noise_seq), gen(drop_seq)
    dtype = np.dtype(config.dtype).type
    model = build_model(config.model_kind, model_cfg, init_rng, dtype, config.sigma)
    params = model.parameters()
    state = TrainState(
        model,
        OptimizerState.for_params(params, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps,
                                  weight_decay=config.weight_decay),  # fmt: skip
        EMAState.for_params(params, config.ema_decay),
        config,
    )
    val = make_validation_set(val_arr, config)
    sampler = config.time_sampler()
    total = config.iterations
    metrics: list[dict] = []

    def val_now() -> float:
        with swapped_weights(model, state.ema.shadow):
            return validation_loss(model, val)

    for step in range(total):
        lr = cosine_lr(step, total, config.lr, config.lr_floor)
        val_loss = val_now() if step % config.val_every == 0 else None
        batch = train_arr.sample_batch(batch_rng, config.batch_size, config.include_zero_horizon)
        x0 = noise_rng.standard_normal((config.batch_size, 4))
        t = sampler.sample(noise_rng, config.batch_size)
        loss = train_step(state, batch, x0, t, lr, drop_rng)
        if step % config.log_every == 0 or val_loss is not None:
            row = {"step": step, "lr": lr, "train_loss": loss, "val_loss": val_loss}
            metrics.append(row)
            if progress:
                progress(row)
    final = {"step": total, "lr": cosine_lr(total, total, config.lr, config.lr_floor), "train_loss": None, "val_loss": val_now()}
    metrics.append(final)
    if progress:
        progress(final)

    result = TrainResult(model, state.ema, metrics, seconds=time.perf_counter() - start)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = out / "checkpoint.fmap"
        result.metrics_path = out / "metrics.csv"
        save_checkpoint(
            result.checkpoint_path,
            checkpoint_config(config, model_cfg, palette),
            model.state_dict(),
            dict(zip([n for n, _ in model.named_parameters()], state.ema.shadow)),
        )
        write_metrics(result.metrics_path, metrics)
    return result


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_metrics(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["step"], _fmt(r["lr"]), _fmt(r["train_loss"]), _fmt(r["val_loss"])])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {
            "step": int(r["step"]),
            "lr": float(r["lr"]),
            "train_loss": float(r["train_loss"]) if r["train_loss"] else None,
            "val_loss": float(r["val_loss"]) if r["val_loss"] else None,
        }
        for r in rows
    ]


def load_model(path: str | Path, weights: str = "ema"):
    """Rebuild a model from a checkpoint; ``weights`` is "ema" or "live"."""
    cfg, live, ema = load_checkpoint(path)
    model_cfg = ModelConfig(**cfg["model"])
    kind = cfg["model_kind"]
    dtype = np.dtype(cfg.get("train", {}).get("dtype", "float32")).type
    model = build_model(kind, model_cfg, np.random.default_rng(0), dtype, cfg.get("sigma", DEFAULT_SIGMA))
    state = ema if weights == "ema" and ema else live
    model.load_state_dict(state)
    return model, cfg


def config_with(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)

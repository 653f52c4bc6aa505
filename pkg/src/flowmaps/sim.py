"""FlowSim: procedural scenes whose objects hop between furniture anchors.

Every dynamic object follows a class-specific cyclic pattern of anchors.
At each timestamp it independently advances one anchor, stays, or skips
ahead two anchors.  Because the dynamics are a circulant Markov chain the
future-location posterior is available in closed form (`exact_posterior`),
which the evaluation code uses as ground truth.

Randomness comes from numpy's PCG64 bit generator seeded through
`numpy.random.SeedSequence`.  An episode seed spawns one stream for the
environment draw and one for the dynamics, and the dynamics stream is split
into one child stream per object so objects never share draws.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, FormatError, ParseError

FORMAT_NAME = "flowsim"
FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box; (y, x) is the center, everything in canvas units."""

    y: float
    x: float
    h: float
    w: float

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0):
            raise DomainError(f"box size must be positive, got h={self.h}, w={self.w}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.y, self.x, self.h, self.w)

    def inside_unit_canvas(self) -> bool:
        return (
            self.y - self.h / 2 >= 0.0
            and self.y + self.h / 2 <= 1.0
            and self.x - self.w / 2 >= 0.0
            and self.x + self.w / 2 <= 1.0
        )


@dataclass(frozen=True)
class FurnitureItem:
    bbox: BBox
    descriptor: int
    label: str
    anchor_id: int


@dataclass(frozen=True)
class ObjectClass:
    """A movement pattern over anchors.

    ``centers`` is resolved from the furniture layout and runs parallel to
    ``pattern``; it is what makes a pattern index turn into a location.
    """

    name: str
    pattern: tuple[int, ...]
    centers: tuple[tuple[float, float], ...]

    @property
    def K(self) -> int:
        return len(self.pattern)


@dataclass(frozen=True)
class DynamicObject:
    obj_class: ObjectClass
    descriptor: int
    label: str
    size: tuple[float, float]
    pattern_index: int

    @property
    def bbox(self) -> BBox:
        y, x = self.obj_class.centers[self.pattern_index]
        return BBox(y, x, self.size[0], self.size[1])

    @property
    def anchor_id(self) -> int:
        return self.obj_class.pattern[self.pattern_index]


@dataclass(frozen=True)
class TransitionModel:
    p_advance: float = 0.7
    p_stay: float = 0.2
    p_skip: float = 0.1

    def __post_init__(self):
        probs = (self.p_advance, self.p_stay, self.p_skip)
        if any(p < 0 or p > 1 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigurationError(f"transition probabilities must be in [0,1] and sum to 1, got {probs}")

    def matrix(self, K: int) -> np.ndarray:
        """Circulant K x K transition matrix over pattern positions."""
        T = np.zeros((K, K))
        for i in range(K):
            T[i, i] += self.p_stay
            T[i, (i + 1) % K] += self.p_advance
            T[i, (i + 2) % K] += self.p_skip
        return T


@dataclass(frozen=True)
class MapSnapshot:
    tau: int
    objects: tuple[DynamicObject, ...]
    furniture: tuple[FurnitureItem, ...]

    def find(self, class_name: str) -> DynamicObject:
        for obj in self.objects:
            if obj.obj_class.name == class_name:
                return obj
        raise DomainError(f"no object of class {class_name!r} in snapshot")


@dataclass(frozen=True)
class Episode:
    seed: int
    snapshots: tuple[MapSnapshot, ...]
    anchor_history: tuple[tuple[int, ...], ...]

    @property
    def tau_max(self) -> int:
        return len(self.snapshots) - 1

    @property
    def furniture(self) -> tuple[FurnitureItem, ...]:
        return self.snapshots[0].furniture

    @property
    def classes(self) -> tuple[ObjectClass, ...]:
        return tuple(o.obj_class for o in self.snapshots[0].objects)


@dataclass(frozen=True)
class CategoricalDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise DomainError("a categorical distribution needs a non-empty 1-d probability vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise DomainError(f"probabilities must be non-negative and sum to 1, got {p}")
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.size

    def __eq__(self, other):
        return isinstance(other, CategoricalDistribution) and np.array_equal(self.probs, other.probs)

    def total_variation(self, other: "CategoricalDistribution") -> float:
        return 0.5 * float(np.abs(self.probs - other.probs).sum())


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FurnitureSpec:
    anchor_id: int
    bbox: tuple[float, float, float, float]
    color: int
    label: str


@dataclass(frozen=True)
class ClassSpec:
    name: str
    pattern: tuple[int, ...]
    color: int
    label: str
    size: tuple[float, float]


DEFAULT_PALETTE = (
    "red", "green", "blue", "yellow", "cyan", "magenta",
    "orange", "purple", "brown", "gray", "olive", "navy",
)  # fmt: skip

# Ring of four anchors plus a top and a bottom shelf.
DEFAULT_FURNITURE = (
    FurnitureSpec(0, (0.3, 0.3, 0.16, 0.2), 8, "kitchen table"),
    FurnitureSpec(1, (0.3, 0.7, 0.16, 0.2), 9, "desk"),
    FurnitureSpec(2, (0.7, 0.7, 0.16, 0.2), 10, "sink counter"),
    FurnitureSpec(3, (0.7, 0.3, 0.16, 0.2), 11, "sofa"),
    FurnitureSpec(4, (0.1, 0.5, 0.08, 0.24), 6, "wall shelf"),
    FurnitureSpec(5, (0.9, 0.5, 0.08, 0.24), 7, "tv cabinet"),
)

# Image coordinates: y grows downward, so 0 -> 3 -> 2 -> 1 turns counterclockwise.
DEFAULT_CLASSES = (
    ClassSpec("bottle", (0, 3, 2, 1), 2, "blue bottle", (0.06, 0.03)),
    ClassSpec("fork", (0, 1, 2, 3), 0, "red fork", (0.05, 0.02)),
    ClassSpec("remote", (4, 0, 3, 5), 3, "yellow remote", (0.03, 0.06)),
)


@dataclass(frozen=True)
class EnvConfig:
    furniture: tuple[FurnitureSpec, ...] = DEFAULT_FURNITURE
    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    palette: tuple[str, ...] = DEFAULT_PALETTE

    def validate(self) -> None:
        if not self.palette:
            raise ConfigurationError("palette is empty")
        ids = [f.anchor_id for f in self.furniture]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate anchor ids in furniture layout: {ids}")
        colors = [f.color for f in self.furniture] + [c.color for c in self.classes]
        if len(set(colors)) != len(colors):
            raise ConfigurationError("every scene element needs its own palette color")
        if any(c < 0 or c >= len(self.palette) for c in colors):
            raise ConfigurationError(f"color ids must index the palette (size {len(self.palette)})")
        for f in self.furniture:
            if not BBox(*f.bbox).inside_unit_canvas():
                raise ConfigurationError(f"furniture {f.label!r} leaves the unit canvas")
        known = set(ids)
        for c in self.classes:
            if len(c.pattern) < 3:
                raise ConfigurationError(f"pattern of {c.name!r} has K={len(c.pattern)} < 3")
            missing = set(c.pattern) - known
            if missing:
                raise ConfigurationError(f"pattern of {c.name!r} references unknown anchors {sorted(missing)}")
            if min(c.size) <= 0:
                raise ConfigurationError(f"object size of {c.name!r} must be positive")

    def to_dict(self) -> dict:
        return {
            "palette": list(self.palette),
            "furniture": [
                {"anchor_id": f.anchor_id, "bbox": list(f.bbox), "color": f.color, "label": f.label}
                for f in self.furniture
            ],
            "classes": [
                {"name": c.name, "pattern": list(c.pattern), "color": c.color, "label": c.label, "size": list(c.size)}
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        return cls(
            furniture=tuple(
                FurnitureSpec(int(f["anchor_id"]), tuple(f["bbox"]), int(f["color"]), f["label"]) for f in d["furniture"]
            ),
            classes=tuple(
                ClassSpec(c["name"], tuple(c["pattern"]), int(c["color"]), c["label"], tuple(c["size"]))
                for c in d["classes"]
            ),
            palette=tuple(d["palette"]),
        )


@dataclass(frozen=True)
class Environment:
    config: EnvConfig
    furniture: tuple[FurnitureItem, ...]
    classes: tuple[ObjectClass, ...]
    objects: tuple[DynamicObject, ...] = field(default=())

    def snapshot(self, tau: int = 0) -> MapSnapshot:
        return MapSnapshot(tau, self.objects, self.furniture)


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------


def episode_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(environment stream, dynamics stream) for one episode seed."""
    env_seq, dyn_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(env_seq)), np.random.Generator(np.random.PCG64(dyn_seq))


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def _resolve_classes(config: EnvConfig) -> tuple[ObjectClass, ...]:
    centers = {f.anchor_id: (f.bbox[0], f.bbox[1]) for f in config.furniture}
    return tuple(ObjectClass(c.name, tuple(c.pattern), tuple(centers[a] for a in c.pattern)) for c in config.classes)


def generate_environment(seed: int, config: EnvConfig | None = None) -> Environment:
    """Build the scene for ``seed``: fixed layout, random starting indices."""
    config = config or EnvConfig()
    config.validate()
    env_rng, _ = episode_streams(seed)
    furniture = tuple(FurnitureItem(BBox(*f.bbox), f.color, f.label, f.anchor_id) for f in config.furniture)
    classes = _resolve_classes(config)
    objects = tuple(
        DynamicObject(cls, spec.color, spec.label, tuple(spec.size), int(env_rng.integers(cls.K)))
        for cls, spec in zip(classes, config.classes)
    )
    return Environment(config, furniture, classes, objects)


def step_offset(u: float, model: TransitionModel) -> int:
    """Map a uniform draw to a pattern offset.

    The unit interval is split as [skip | advance | stay], so u < p_skip
    skips two anchors, the next p_advance of mass advances one, and the
    remainder stays.
    """
    if u < model.p_skip:
        return 2
    if u < model.p_skip + model.p_advance:
        return 1
    return 0


def step_object(state: DynamicObject, model: TransitionModel, rng: np.random.Generator) -> DynamicObject:
    offset = step_offset(float(rng.random()), model)
    if offset == 0:
        return state
    return DynamicObject(
        state.obj_class, state.descriptor, state.label, state.size, (state.pattern_index + offset) % state.obj_class.K
    )


def rollout_episode(
    env: Environment, tau_max: int, model: TransitionModel, rng: np.random.Generator, seed: int = 0
) -> Episode:
    if tau_max < 1:
        raise DomainError(f"tau_max must be >= 1, got {tau_max}")
    streams = rng.spawn(len(env.objects))
    objects = env.objects
    snapshots = [MapSnapshot(0, objects, env.furniture)]
    for tau in range(1, tau_max + 1):
        objects = tuple(step_object(o, model, s) for o, s in zip(objects, streams))
        snapshots.append(MapSnapshot(tau, objects, env.furniture))
    history = tuple(tuple(s.objects[i].pattern_index for s in snapshots) for i in range(len(env.objects)))
    return Episode(seed, tuple(snapshots), history)


def make_episode(
    seed: int, tau_max: int = 20, model: TransitionModel | None = None, config: EnvConfig | None = None
) -> Episode:
    """Environment plus rollout, both a pure function of ``seed``."""
    env = generate_environment(seed, config)
    _, dyn_rng = episode_streams(seed)
    return rollout_episode(env, tau_max, model or TransitionModel(), dyn_rng, seed=seed)


def dataset_seeds(seed: int, count: int) -> list[int]:
    """Per-episode seeds for a dataset drawn from master ``seed``."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)] if count else []


def make_dataset(
    seed: int,
    count: int,
    tau_max: int = 20,
    model: TransitionModel | None = None,
    config: EnvConfig | None = None,
) -> list[Episode]:
    return [make_episode(s, tau_max, model, config) for s in dataset_seeds(seed, count)]


def exact_posterior(K: int, start_index: int, delta_tau: int, model: TransitionModel) -> CategoricalDistribution:
    """Distribution of the pattern index ``delta_tau`` steps after ``start_index``."""
    if K < 1:
        raise DomainError(f"K must be positive, got {K}")
    if not 0 <= start_index < K:
        raise DomainError(f"start_index {start_index} outside [0, {K})")
    if delta_tau < 0:
        raise DomainError(f"delta_tau must be >= 0, got {delta_tau}")
    T = model.matrix(K)
    p = np.zeros(K)
    p[start_index] = 1.0
    for _ in range(delta_tau):
        p = p @ T
    return CategoricalDistribution(p)


# --------------------------------------------------------------------------
# JSONL episode files
# --------------------------------------------------------------------------


def _f9(v: float) -> float:
    return float(f"{v:.9g}")


def _box(b: BBox) -> list[float]:
    return [_f9(v) for v in b.as_tuple()]


def episode_to_record(ep: Episode) -> dict:
    return {
        "seed": ep.seed,
        "furniture": [
            {"anchor_id": f.anchor_id, "bbox": _box(f.bbox), "color": f.descriptor, "label": f.label}
            for f in ep.furniture
        ],
        "classes": [{"name": c.name, "pattern": list(c.pattern)} for c in ep.classes],
        "snapshots": [
            {
                "tau": s.tau,
                "objects": [
                    {
                        "class": o.obj_class.name,
                        "color": o.descriptor,
                        "label": o.label,
                        "pattern_index": o.pattern_index,
                        "bbox": _box(o.bbox),
                    }
                    for o in s.objects
                ],
            }
            for s in ep.snapshots
        ],
    }


def episode_from_record(rec: dict) -> Episode:
    furniture = tuple(
        FurnitureItem(BBox(*f["bbox"]), int(f["color"]), f["label"], int(f["anchor_id"])) for f in rec["furniture"]
    )
    centers = {f.anchor_id: (f.bbox.y, f.bbox.x) for f in furniture}
    classes = {
        c["name"]: ObjectClass(c["name"], tuple(c["pattern"]), tuple(centers[a] for a in c["pattern"]))
        for c in rec["classes"]
    }
    snapshots = []
    for s in rec["snapshots"]:
        objects = tuple(
            DynamicObject(
                classes[o["class"]], int(o["color"]), o["label"], (o["bbox"][2], o["bbox"][3]), int(o["pattern_index"])
            )
            for o in s["objects"]
        )
        snapshots.append(MapSnapshot(int(s["tau"]), objects, furniture))
    n_obj = len(snapshots[0].objects) if snapshots else 0
    history = tuple(tuple(s.objects[i].pattern_index for s in snapshots) for i in range(n_obj))
    return Episode(int(rec["seed"]), tuple(snapshots), history)


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_episodes(episodes: Iterable[Episode], path: str | Path, header_extra: dict | None = None) -> None:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "config": header_extra or {}}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for ep in episodes:
            fh.write(_dumps(episode_to_record(ep)) + "\n")


def read_header(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        line = fh.readline()
    return _parse_header(line)


def _parse_header(line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(1, f"header is not valid JSON ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise FormatError(f"not a {FORMAT_NAME} file (header: {line.strip()[:80]!r})")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported {FORMAT_NAME} version {header.get('version')!r}, expected {FORMAT_VERSION}")
    return header


def read_episodes(path: str | Path) -> list[Episode]:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise FormatError(f"{path}: empty file, missing header line")
        _parse_header(first)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON ({exc.msg})") from None
            try:
                episodes.append(episode_from_record(rec))
            except (KeyError, TypeError, IndexError, ValueError) as exc:
                raise ParseError(lineno, f"malformed episode record ({exc!r})") from None
    return episodes


def dataset_stats(episodes: Sequence[Episode], model: TransitionModel | None = None) -> dict:
    """Class counts and observed step-offset frequencies for a dataset sidecar."""
    class_counts: dict[str, int] = {}
    offsets = np.zeros(3, dtype=np.int64)
    for ep in episodes:
        for cls, hist in zip(ep.classes, ep.anchor_history):
            class_counts[cls.name] = class_counts.get(cls.name, 0) + 1
            h = np.asarray(hist)
            d = (h[1:] - h[:-1]) % cls.K
            offsets += np.bincount(d, minlength=3)[:3]
    total = int(offsets.sum())
    freq = (offsets / total).tolist() if total else [math.nan] * 3
    stats = {
        "episodes": len(episodes),
        "class_counts": class_counts,
        "steps": total,
        "frequency": {"stay": freq[0], "advance": freq[1], "skip": freq[2]},
    }
    if model is not None:
        stats["expected"] = {"stay": model.p_stay, "advance": model.p_advance, "skip": model.p_skip}
    return stats

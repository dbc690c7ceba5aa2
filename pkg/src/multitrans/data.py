"""Synthetic multi-sensor scene generation with planted, verifiable structure.

Scenes are Gaussian noise over [frames x sensors x feature] into which class
events inject additive signature vectors on their informative sensors. The
default desk-scale taxonomy plants three kinds of structure:

* single-sensor classes with a fixed signature (detectable from one sensor);
* a cross-sensor class whose evidence is split over one audio and one video
  sensor, each half shared with a dedicated "confuser" class on the same
  sensor, so neither sensor alone separates it — the two confusers never
  overlap in time, otherwise their union would be feature-identical to the
  cross class;
* a polarity-symmetric class whose signature sign flips per event, invisible
  to any linear frame scorer but learnable by the attention model.

Remaining sensors carry pure noise. Strong (frame-level) labels come from
the construction; weak (clip-level) labels are derived from them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, GenerationError
from .model import default_modalities

DATASET_SCHEMA = "multitrans-data-v1"


@dataclass(frozen=True)
class BagLabel:
    """Clip-level multi-label indicator: which classes occur anywhere in the clip."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.int64)
        if arr.ndim != 1:
            raise ContractError(f"bag label must be a vector, got shape {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise ContractError("bag label entries must be 0 or 1")
        object.__setattr__(self, "values", arr)

    def __eq__(self, other):
        return isinstance(other, BagLabel) and np.array_equal(self.values, other.values)


def weak_label_from_strong(strong: np.ndarray) -> BagLabel:
    """Bag rule: class c is present iff any frame of column c is active."""
    g = np.asarray(strong)
    if g.ndim != 2:
        raise ContractError(f"strong label must be [frames x classes], got shape {g.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise ContractError("strong label entries must be 0 or 1")
    return BagLabel(np.any(g == 1, axis=0).astype(np.int64))


@dataclass
class FeatureClip:
    """One scene: per-frame per-sensor feature vectors plus labels."""

    features: np.ndarray  # [T, S, input_dim] float64
    modality_tags: tuple[str, ...]
    weak_label: BagLabel
    strong_label: np.ndarray | None
    clip_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ContractError(f"features must be rank 3, got shape {self.features.shape}")
        t, s, _ = self.features.shape
        if t < 1:
            raise ContractError("clip needs at least one frame")
        if s < 2:
            raise ContractError("clip needs at least two sensors")
        if len(self.modality_tags) != s:
            raise ContractError(f"{len(self.modality_tags)} modality tags for {s} sensors")
        self.modality_tags = tuple(self.modality_tags)
        if self.strong_label is not None:
            g = np.asarray(self.strong_label, dtype=np.int64)
            if g.shape != (t, self.weak_label.values.size):
                raise ContractError(
                    f"strong label shape {g.shape} does not match "
                    f"(frames, classes) = ({t}, {self.weak_label.values.size})"
                )
            self.strong_label = g
            if weak_label_from_strong(g) != self.weak_label:
                raise ContractError(
                    f"clip {self.clip_id!r}: weak label inconsistent with strong label"
                )

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def num_sensors(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ClassSpec:
    """Planted structure of one event class.

    ``sensors`` lists the informative sensors (size 1 or 2, 0-based) and
    ``signatures`` the vector injected into each, scaled by the generator's
    signal gain. ``polarity`` "symmetric" flips the injection sign per
    event. ``excludes`` names classes whose events may never overlap this
    one in time.
    """

    name: str
    sensors: tuple[int, ...]
    signatures: tuple[tuple[float, ...], ...]
    min_duration: int
    max_duration: int
    min_events: int = 0
    max_events: int = 1
    polarity: str = "fixed"
    excludes: tuple[str, ...] = ()
    amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple(int(s) for s in self.sensors))
        object.__setattr__(
            self, "signatures", tuple(tuple(float(v) for v in sig) for sig in self.signatures)
        )
        object.__setattr__(self, "excludes", tuple(self.excludes))
        if len(self.sensors) not in (1, 2):
            raise ContractError(f"class {self.name!r}: informative set must have 1 or 2 sensors")
        if len(self.signatures) != len(self.sensors):
            raise ContractError(f"class {self.name!r}: one signature per informative sensor")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ContractError(f"class {self.name!r}: bad duration range")
        if not 0 <= self.min_events <= self.max_events:
            raise ContractError(f"class {self.name!r}: bad events-per-scene range")
        if self.polarity not in ("fixed", "symmetric"):
            raise ContractError(f"class {self.name!r}: polarity must be fixed or symmetric")
        if self.amplitude <= 0:
            raise ContractError(f"class {self.name!r}: amplitude must be positive")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "sensors": list(self.sensors),
            "signatures": [list(sig) for sig in self.signatures],
            "min_duration": self.min_duration,
            "max_duration": self.max_duration,
            "min_events": self.min_events,
            "max_events": self.max_events,
            "polarity": self.polarity,
            "excludes": list(self.excludes),
            "amplitude": self.amplitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSpec":
        d = dict(d)
        d["sensors"] = tuple(d["sensors"])
        d["signatures"] = tuple(tuple(sig) for sig in d["signatures"])
        d["excludes"] = tuple(d.get("excludes", ()))
        return cls(**d)


def _unit(input_dim: int, coord: int) -> tuple[float, ...]:
    sig = [0.0] * input_dim
    sig[coord] = 1.0
    return tuple(sig)


def default_class_specs(input_dim: int = 8) -> tuple[ClassSpec, ...]:
    """Desk-scale taxonomy: two confusers, one cross-sensor class, one polarity class.

    Class names reuse office-event vocabulary but the structure is synthetic.
    "prepare" needs audio sensor 1 AND video sensor 5 together; "chat" and
    "takeout" are its per-sensor confusers and are kept temporally disjoint
    from each other; "phone" rings with a random sign, so no linear scorer
    can find it.
    """
    e0, e1, e2 = _unit(input_dim, 0), _unit(input_dim, 1), _unit(input_dim, 2)
    # every class keeps min_events = 0: scenes without the class provide the
    # negative bags without which weak-label training cannot discriminate
    return (
        ClassSpec("chat", (1,), (e0,), 8, 13, 0, 2, excludes=("takeout",)),
        ClassSpec("takeout", (5,), (e1,), 8, 13, 0, 2, excludes=("chat",)),
        # disjoint from both confusers (an overlap would add a second
        # signature bump that stays informative when one sensor is masked)
        # and slightly weaker, so a masked single-sensor view ranks its
        # frames below the confuser's rather than tied with them
        ClassSpec(
            "prepare", (1, 5), (e0, e1), 3, 5, 0, 1,
            excludes=("chat", "takeout"), amplitude=0.85,
        ),
        ClassSpec("phone", (4,), (e2,), 6, 10, 0, 2, polarity="symmetric"),
    )


@dataclass(frozen=True)
class GenConfig:
    """Generator parameters; the defaults are the tuned desk scale."""

    num_train_scenes: int = 160
    num_test_scenes: int = 40
    num_sensors: int = 6
    input_dim: int = 8
    frames_per_scene: int = 48
    noise_std: float = 1.0
    signal_gain: float = 4.5
    class_specs: tuple[ClassSpec, ...] = field(default_factory=default_class_specs)
    modalities: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_specs", tuple(self.class_specs))
        if not self.modalities:
            object.__setattr__(self, "modalities", default_modalities(self.num_sensors))
        else:
            object.__setattr__(self, "modalities", tuple(self.modalities))
        if self.num_sensors < 2:
            raise ContractError("need at least two sensors")
        if len(self.modalities) != self.num_sensors:
            raise ContractError(
                f"{len(self.modalities)} modality tags for {self.num_sensors} sensors"
            )
        if self.num_train_scenes < 1 or self.num_test_scenes < 1:
            raise ContractError("both splits need at least one scene")
        if not self.class_specs:
            raise ContractError("need at least one class")
        names = [c.name for c in self.class_specs]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate class names: {names}")
        cross_modal = False
        for spec in self.class_specs:
            for s in spec.sensors:
                if not 0 <= s < self.num_sensors:
                    raise ContractError(f"class {spec.name!r}: sensor {s} out of range")
            for sig in spec.signatures:
                if len(sig) != self.input_dim:
                    raise ContractError(
                        f"class {spec.name!r}: signature length {len(sig)} != input_dim"
                    )
            if spec.max_duration > self.frames_per_scene:
                raise ContractError(f"class {spec.name!r}: duration exceeds scene length")
            for other in spec.excludes:
                if other not in names:
                    raise ContractError(f"class {spec.name!r} excludes unknown class {other!r}")
            if len(spec.sensors) == 2:
                tags = {self.modalities[s] for s in spec.sensors}
                if len(tags) == 2:
                    cross_modal = True
        if not cross_modal:
            raise ContractError("need at least one two-sensor cross-modal class")

    @property
    def num_classes(self) -> int:
        return len(self.class_specs)

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.class_specs)

    def to_dict(self) -> dict:
        return {
            "num_train_scenes": self.num_train_scenes,
            "num_test_scenes": self.num_test_scenes,
            "num_sensors": self.num_sensors,
            "input_dim": self.input_dim,
            "frames_per_scene": self.frames_per_scene,
            "noise_std": self.noise_std,
            "signal_gain": self.signal_gain,
            "class_specs": [c.to_dict() for c in self.class_specs],
            "modalities": list(self.modalities),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "class_specs" in d:
            d["class_specs"] = tuple(ClassSpec.from_dict(c) for c in d["class_specs"])
        if "modalities" in d and d["modalities"] is not None:
            d["modalities"] = tuple(d["modalities"])
        return cls(**d)


_EVENT_RETRIES = 80
_SCENE_RETRIES = 60


def _exclusion_map(cfg: GenConfig) -> dict[str, set[str]]:
    # overlap bans are symmetric regardless of which side declared them
    banned: dict[str, set[str]] = {c.name: set(c.excludes) for c in cfg.class_specs}
    for spec in cfg.class_specs:
        for other in spec.excludes:
            banned[other].add(spec.name)
    return banned


def _place_events(cfg: GenConfig, rng) -> list[tuple[int, int, int, float]]:
    """Sample (class_idx, onset, offset, sign) events honoring overlap rules."""
    by_name: dict[str, list[tuple[int, int]]] = {c.name: [] for c in cfg.class_specs}
    banned = _exclusion_map(cfg)
    events: list[tuple[int, int, int, float]] = []
    for ci, spec in enumerate(cfg.class_specs):
        count = int(rng.integers(spec.min_events, spec.max_events + 1))
        blocked = list(by_name[spec.name])
        for other in banned[spec.name]:
            blocked += by_name[other]
        for _ in range(count):
            placed = False
            for _ in range(_EVENT_RETRIES):
                dur = int(rng.integers(spec.min_duration, spec.max_duration + 1))
                onset = int(rng.integers(0, cfg.frames_per_scene - dur + 1))
                offset = onset + dur
                if any(onset < b_off and b_on < offset for b_on, b_off in blocked):
                    continue
                sign = 1.0
                if spec.polarity == "symmetric":
                    sign = 1.0 if rng.integers(0, 2) == 1 else -1.0
                events.append((ci, onset, offset, sign))
                by_name[spec.name].append((onset, offset))
                blocked.append((onset, offset))
                placed = True
                break
            if not placed:
                raise GenerationError(
                    f"could not place an event of class {spec.name!r} "
                    f"after {_EVENT_RETRIES} attempts"
                )
    return events


def generate_scene(cfg: GenConfig, rng, clip_id: str = "scene") -> FeatureClip:
    """One scene: Gaussian noise plus the sampled events' signature injections."""
    for attempt in range(_SCENE_RETRIES):
        try:
            events = _place_events(cfg, rng)
            break
        except GenerationError:
            if attempt == _SCENE_RETRIES - 1:
                raise
    features = rng.normal(0.0, cfg.noise_std, size=(cfg.frames_per_scene, cfg.num_sensors, cfg.input_dim))
    strong = np.zeros((cfg.frames_per_scene, cfg.num_classes), dtype=np.int64)
    for ci, onset, offset, sign in events:
        spec = cfg.class_specs[ci]
        strong[onset:offset, ci] = 1
        for sensor, sig in zip(spec.sensors, spec.signatures):
            bump = sign * spec.amplitude * cfg.signal_gain * np.asarray(sig)
            features[onset:offset, sensor, :] += bump
    return FeatureClip(
        features=features,
        modality_tags=cfg.modalities,
        weak_label=weak_label_from_strong(strong),
        strong_label=strong,
        clip_id=clip_id,
    )


@dataclass
class EventDataset:
    """Disjoint train/test splits plus per-class train event counts."""

    train: list[FeatureClip]
    test: list[FeatureClip]
    class_names: tuple[str, ...]
    modalities: tuple[str, ...]
    train_event_counts: np.ndarray


def _count_events(strong: np.ndarray) -> np.ndarray:
    # an event is a maximal run of active frames in one class column
    padded = np.vstack([np.zeros((1, strong.shape[1]), dtype=np.int64), strong])
    return np.sum((padded[1:] == 1) & (padded[:-1] == 0), axis=0)


def _scene_rng(master_seed: int, split: int, index: int):
    return np.random.default_rng(np.random.SeedSequence([master_seed, split, index]))


def generate_dataset(cfg: GenConfig) -> EventDataset:
    """Seeded train/test splits; every class must have a train event."""
    train = [
        generate_scene(cfg, _scene_rng(cfg.seed, 0, i), clip_id=f"train-{i:04d}")
        for i in range(cfg.num_train_scenes)
    ]
    test = [
        generate_scene(cfg, _scene_rng(cfg.seed, 1, i), clip_id=f"test-{i:04d}")
        for i in range(cfg.num_test_scenes)
    ]
    counts = np.zeros(cfg.num_classes, dtype=np.int64)
    for clip in train:
        counts += _count_events(clip.strong_label)
    if np.any(counts == 0):
        missing = [cfg.class_names[i] for i in np.flatnonzero(counts == 0)]
        raise GenerationError(f"classes with zero training events: {missing}")
    return EventDataset(
        train=train,
        test=test,
        class_names=cfg.class_names,
        modalities=cfg.modalities,
        train_event_counts=counts,
    )


# ---------------------------------------------------------------------------
# on-disk format: one directory per split, a manifest plus raw float files


def _save_split(split_dir: Path, clips: list[FeatureClip], ds: EventDataset, counts) -> None:
    split_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in clips:
        t, s, d = clip.features.shape
        (split_dir / f"{clip.clip_id}.f64").write_bytes(clip.features.astype("<f8").tobytes())
        entries.append(
            {
                "id": clip.clip_id,
                "frames": t,
                "sensors": s,
                "input_dim": d,
                "weak_label": clip.weak_label.values.tolist(),
                "strong_label": None
                if clip.strong_label is None
                else clip.strong_label.tolist(),
            }
        )
    manifest = {
        "schema": DATASET_SCHEMA,
        "class_names": list(ds.class_names),
        "modalities": list(ds.modalities),
        "train_event_counts": None if counts is None else [int(c) for c in counts],
        "clips": entries,
    }
    (split_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def save_dataset(ds: EventDataset, root) -> None:
    root = Path(root)
    _save_split(root / "train", ds.train, ds, ds.train_event_counts)
    _save_split(root / "test", ds.test, ds, None)


def _load_split(split_dir: Path) -> tuple[list[FeatureClip], dict]:
    manifest_path = split_dir / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema") != DATASET_SCHEMA:
        raise ContractError(
            f"unsupported dataset schema {manifest.get('schema')!r}, expected {DATASET_SCHEMA!r}"
        )
    clips = []
    tags = tuple(manifest["modalities"])
    for entry in manifest["clips"]:
        shape = (entry["frames"], entry["sensors"], entry["input_dim"])
        raw = (split_dir / f"{entry['id']}.f64").read_bytes()
        features = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        strong = entry["strong_label"]
        clips.append(
            FeatureClip(
                features=features,
                modality_tags=tags,
                weak_label=BagLabel(np.asarray(entry["weak_label"])),
                strong_label=None if strong is None else np.asarray(strong, dtype=np.int64),
                clip_id=entry["id"],
            )
        )
    return clips, manifest


def load_dataset(root) -> EventDataset:
    root = Path(root)
    train, train_manifest = _load_split(root / "train")
    test, _ = _load_split(root / "test")
    counts = train_manifest.get("train_event_counts")
    if counts is None:
        raise ContractError("train manifest is missing train_event_counts")
    return EventDataset(
        train=train,
        test=test,
        class_names=tuple(train_manifest["class_names"]),
        modalities=tuple(train_manifest["modalities"]),
        train_event_counts=np.asarray(counts, dtype=np.int64),
    )

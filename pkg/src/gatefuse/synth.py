"""Synthetic multimodal QA episodes with a known informative modality.

Each modality carries a class pattern planted into one token row.  Only
the modality named by the instruction carries the answer's pattern; the
others carry a distractor pattern drawn independently of the answer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ConfigurationError

FORMAT = "gatefuse-dataset"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
FEATURES = "features.bin"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TaskSpec:
    n_modalities: int = 2
    tokens_per_modality: tuple[int, int] = (4, 8)  # inclusive range
    modality_dims: tuple[int, ...] = (16, 16)
    n_classes: int = 4
    instruction_length: tuple[int, int] = (2, 4)  # inclusive range
    noise_std: float = 0.05
    relevance_mode: str = "single"  # or "joint"
    n_filler: int = 8
    drop_prob: float = 0.0  # chance a non-informative modality is absent
    modality_ids: tuple[int, ...] | None = None  # defaults to 1..n_modalities
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens_per_modality", tuple(int(x) for x in self.tokens_per_modality))
        object.__setattr__(self, "instruction_length", tuple(int(x) for x in self.instruction_length))
        dims = tuple(int(x) for x in np.atleast_1d(self.modality_dims))
        if len(dims) == 1 and self.n_modalities > 1:
            dims = dims * self.n_modalities
        object.__setattr__(self, "modality_dims", dims)
        if self.modality_ids is not None:
            object.__setattr__(self, "modality_ids", tuple(int(x) for x in self.modality_ids))
        if self.n_modalities < 1:
            raise ConfigurationError("n_modalities must be >= 1")
        if len(dims) != self.n_modalities:
            raise ConfigurationError(f"{len(dims)} modality dims for {self.n_modalities} modalities")
        if len(self.ids) != self.n_modalities or len(set(self.ids)) != self.n_modalities:
            raise ConfigurationError(f"modality_ids {self.ids} must be {self.n_modalities} distinct ids")
        lo, hi = self.tokens_per_modality
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"tokens_per_modality range {self.tokens_per_modality} is invalid")
        lo, hi = self.instruction_length
        need = 2 if self.relevance_mode == "joint" else 1
        if not need <= lo <= hi:
            raise ConfigurationError(f"instruction_length range {self.instruction_length} is invalid")
        if self.relevance_mode not in ("single", "joint"):
            raise ConfigurationError(f"relevance_mode must be single or joint, got {self.relevance_mode!r}")
        if self.relevance_mode == "joint" and self.n_modalities < 2:
            raise ConfigurationError("joint relevance needs at least two modalities")
        if self.noise_std < 0 or self.n_classes < 2 or self.n_filler < 1 or not 0 <= self.drop_prob < 1:
            raise ConfigurationError("noise_std >= 0, n_classes >= 2, n_filler >= 1, 0 <= drop_prob < 1 required")

    @property
    def ids(self) -> tuple[int, ...]:
        return self.modality_ids if self.modality_ids is not None else tuple(range(1, self.n_modalities + 1))

    @property
    def vocab_size(self) -> int:
        """Instruction vocabulary: one naming token per modality id, then fillers."""
        return max(self.ids) + self.n_filler

    def naming_token(self, modality: int) -> int:
        return modality - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Episode:
    instruction_ids: np.ndarray
    features: dict[int, np.ndarray]  # modality id -> (T_m, d_m)
    answer: int
    informative: tuple[int, ...]
    index: int = 0

    @property
    def answer_tokens(self) -> np.ndarray:
        return np.array([self.answer], dtype=np.int64)

    @property
    def modalities(self) -> list[int]:
        return sorted(self.features)


@dataclass
class Dataset:
    spec: TaskSpec
    seed: int
    episodes: list[Episode]
    patterns: dict[int, np.ndarray]  # modality id -> (n_classes, d_m) unit rows
    name: str = "synth"
    splits: dict[str, range] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.episodes)

    def split(self, name: str) -> list[Episode]:
        r = self.splits[name]
        return self.episodes[r.start : r.stop]


def split_ranges(n: int) -> dict[str, range]:
    n_train = (8 * n) // 10
    n_val = n // 10
    return {
        "train": range(0, n_train),
        "val": range(n_train, n_train + n_val),
        "test": range(n_train + n_val, n),
    }


def class_patterns(spec: TaskSpec, seed: int) -> dict[int, np.ndarray]:
    """Unit-norm class directions per modality, orthonormal when the width allows."""
    rng = np.random.default_rng([seed, 0x5EED])
    out = {}
    for m, dim in zip(spec.ids, spec.modality_dims):
        g = rng.normal(size=(dim, spec.n_classes))
        if dim >= spec.n_classes:
            q, _ = np.linalg.qr(g)
            pats = q.T
        else:
            pats = g.T / np.linalg.norm(g.T, axis=1, keepdims=True)
        out[m] = np.ascontiguousarray(pats.astype(np.float32).astype(np.float64))
    return out


def generate_episode(spec: TaskSpec, rng: np.random.Generator, patterns: dict[int, np.ndarray],
                     index: int = 0) -> Episode:
    ids = spec.ids
    v = spec.n_classes
    if spec.relevance_mode == "single":
        informative = (ids[int(rng.integers(len(ids)))],)
        classes = {informative[0]: int(rng.integers(v))}
        answer = classes[informative[0]]
    else:
        pick = np.sort(rng.choice(len(ids), size=2, replace=False))
        informative = (ids[pick[0]], ids[pick[1]])
        classes = {m: int(rng.integers(v)) for m in informative}
        answer = (classes[informative[0]] + classes[informative[1]]) % v

    features = {}
    lo, hi = spec.tokens_per_modality
    for m, dim in zip(ids, spec.modality_dims):
        n_tok = int(rng.integers(lo, hi + 1))
        f = spec.noise_std * rng.normal(size=(n_tok, dim))
        cls = classes[m] if m in classes else int(rng.integers(v))
        row = int(rng.integers(n_tok))
        f[row] += patterns[m][cls]
        keep = m in informative or spec.drop_prob == 0 or rng.random() >= spec.drop_prob
        if keep:
            features[m] = f.astype(np.float32).astype(np.float64)

    lo, hi = spec.instruction_length
    length = int(rng.integers(lo, hi + 1))
    names = [spec.naming_token(m) for m in informative]
    filler = max(ids) + rng.integers(spec.n_filler, size=length - len(names))
    instruction = np.concatenate([np.array(names, dtype=np.int64), filler.astype(np.int64)])
    return Episode(instruction, features, int(answer), informative, index)


def generate_dataset(spec: TaskSpec, n: int, seed: int | None = None, name: str = "synth") -> Dataset:
    if n < 1:
        raise ConfigurationError("dataset size must be >= 1")
    seed = spec.seed if seed is None else int(seed)
    patterns = class_patterns(spec, seed)
    episodes = [generate_episode(spec, np.random.default_rng([seed, i]), patterns, i) for i in range(n)]
    return Dataset(spec, seed, episodes, patterns, name, split_ranges(n))


def oracle_predict(episode: Episode, patterns: dict[int, np.ndarray], spec: TaskSpec,
                   modalities: tuple[int, ...] | None = None) -> int:
    """Nearest class pattern over the rows of the given (default: informative) modalities."""
    mods = episode.informative if modalities is None else modalities
    decoded = []
    for m in mods:
        if m not in episode.features:
            return -1
        scores = episode.features[m] @ patterns[m].T  # (T, classes)
        decoded.append(int(np.unravel_index(np.argmax(scores), scores.shape)[1]))
    if spec.relevance_mode == "single" or len(decoded) == 1:
        return decoded[0]
    return sum(decoded) % spec.n_classes


# --- persistence -------------------------------------------------------------

def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    offset = 0
    chunks = []
    for ep in ds.episodes:
        shapes = {}
        for m in sorted(ep.features):
            f = ep.features[m]
            shapes[str(m)] = list(f.shape)
            chunks.append(np.ascontiguousarray(f, dtype="<f4").tobytes())
            offset += f.size
        records.append({
            "answer": ep.answer,
            "informative": list(ep.informative),
            "instruction_ids": [int(x) for x in ep.instruction_ids],
            "shapes": shapes,
        })
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "name": ds.name,
        "seed": ds.seed,
        "n": len(ds.episodes),
        "spec": ds.spec.to_dict(),
        "splits": {k: [r.start, r.stop] for k, r in ds.splits.items()},
        "patterns": {str(m): p.tolist() for m, p in sorted(ds.patterns.items())},
        "feature_file": FEATURES,
        "feature_dtype": "<f4",
        "feature_count": offset,
        "episodes": records,
    }
    (directory / FEATURES).write_bytes(b"".join(chunks))
    (directory / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError:
        raise ArtifactError(f"no dataset manifest at {directory / MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"dataset manifest {directory / MANIFEST} is not valid JSON: {exc}") from None
    if manifest.get("format") != FORMAT or manifest.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(
            f"{directory}: unsupported dataset format {manifest.get('format')!r} v{manifest.get('format_version')!r}"
        )
    try:
        raw = (directory / manifest["feature_file"]).read_bytes()
    except FileNotFoundError:
        raise ArtifactError(f"{directory}: feature file {manifest['feature_file']} is missing") from None
    if len(raw) != 4 * manifest["feature_count"]:
        raise ArtifactError(
            f"{directory}: feature file holds {len(raw)} bytes, manifest expects {4 * manifest['feature_count']}"
        )
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    episodes = []
    offset = 0
    for i, rec in enumerate(manifest["episodes"]):
        feats = {}
        for m, shape in sorted(rec["shapes"].items(), key=lambda kv: int(kv[0])):
            size = shape[0] * shape[1]
            feats[int(m)] = values[offset : offset + size].reshape(shape)
            offset += size
        episodes.append(Episode(
            np.asarray(rec["instruction_ids"], dtype=np.int64), feats, int(rec["answer"]),
            tuple(rec["informative"]), i,
        ))
    spec = TaskSpec.from_dict(manifest["spec"])
    patterns = {int(m): np.asarray(p) for m, p in manifest["patterns"].items()}
    splits = {k: range(v[0], v[1]) for k, v in manifest["splits"].items()}
    return Dataset(spec, int(manifest["seed"]), episodes, patterns, manifest.get("name", "synth"), splits)

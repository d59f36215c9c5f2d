"""Toy end-to-end model: instruction embeddings, fusion block, answer head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import multi_head_attention
from .errors import ArtifactError, ConfigurationError, InputError
from .fusion import FusionConfig, FusionResult, FusionSample, fuse, init_fusion_params
from .numerics import Tensor, ops

HEADS = ("classification", "decoder")


@dataclass(frozen=True)
class ModelConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    vocab_in: int = 10
    vocab_ans: int = 4
    head: str = "classification"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown head {self.head!r}; choose from {HEADS}")
        if self.vocab_in < 1 or self.vocab_ans < 2:
            raise ConfigurationError("vocab_in >= 1 and vocab_ans >= 2 required")

    @property
    def d(self) -> int:
        return self.fusion.d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"]["modalities"] = [list(x) for x in self.fusion.modalities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fusion = dict(d["fusion"])
        fusion["modalities"] = tuple(tuple(x) for x in fusion["modalities"])
        return cls(fusion=FusionConfig(**fusion), **{k: v for k, v in d.items() if k != "fusion"})


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0xF05E])
    d = config.d
    p = {"embed.instruction": rng.normal(0.0, 1.0 / math.sqrt(d), size=(config.vocab_in, d))}  # unit expected norm
    p.update(init_fusion_params(config.fusion, rng))
    v = config.vocab_ans
    if config.head == "classification":
        p["head.weight"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, v))
        p["head.bias"] = np.zeros(v)
    else:
        hidden = config.fusion.ffn_mult * d
        p["head.answer_embed"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(v + 1, d))  # last row: begin-of-answer
        for name in ("wq", "wk", "wv", "wo"):
            p[f"head.attn.{name}"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
        p["head.ffn.w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, hidden))
        p["head.ffn.b1"] = np.zeros(hidden)
        p["head.ffn.w2"] = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, d))
        p["head.ffn.b2"] = np.zeros(d)
        for ln in ("ln1", "ln2"):
            p[f"head.{ln}.gamma"] = np.ones(d)
            p[f"head.{ln}.beta"] = np.zeros(d)
        p["head.out.weight"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, v))
        p["head.out.bias"] = np.zeros(v)
    return float32_snapshot(p)


def float32_snapshot(params: dict) -> dict[str, np.ndarray]:
    """Copies rounded to float32 precision, so a checkpoint round trip is exact."""
    return {k: np.asarray(getattr(v, "data", v)).astype(np.float32).astype(np.float64) for k, v in params.items()}


@dataclass
class ModelOutput:
    logits: Tensor  # (B, V) classification, (B, T, V) decoder
    fusion: FusionResult


def _samples(episodes, config: ModelConfig) -> list[FusionSample]:
    samples = []
    for ep in episodes:
        ids = np.asarray(ep.instruction_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_in):
            raise InputError(f"instruction id out of range [0, {config.vocab_in}): {ids.tolist()}")
        samples.append(FusionSample(ids, [(m, ep.features[m]) for m in sorted(ep.features)]))
    return samples


def pooled_features(result: FusionResult) -> Tensor:
    """Mean over non-padding fused tokens, (B, d)."""
    vis = result.packed.visible.astype(float)
    counts = np.maximum(vis.sum(axis=1), 1.0)
    pooled = ops.segment_sum(result.output, vis[:, None, :])
    return ops.div(ops.reshape(pooled, (pooled.shape[0], -1)), counts[:, None])


def _decoder(params, result: FusionResult, prefix_ids: np.ndarray, config: ModelConfig) -> Tensor:
    """Causal attention layer over [fused tokens; answer prefix] -> logits (B, T, V)."""
    b, length, d = result.output.shape
    t = prefix_ids.shape[1]
    prefix = ops.take(params["head.answer_embed"], prefix_ids)
    seq = ops.concat([result.output, prefix], axis=1)
    visible = np.concatenate([result.packed.visible, np.ones((b, t), dtype=bool)], axis=1)
    positions = np.maximum(np.cumsum(visible, axis=1) - 1, 0)
    att = multi_head_attention(
        seq, visible, params["head.attn.wq"], params["head.attn.wk"], params["head.attn.wv"],
        params["head.attn.wo"], config.fusion.n_heads, config.fusion.rope_base, positions, causal=True,
    )
    eps = config.fusion.ln_eps
    x1 = ops.layer_norm(ops.add(seq, att.output), params["head.ln1.gamma"], params["head.ln1.beta"], eps)
    ff = ops.linear(ops.gelu(ops.linear(x1, params["head.ffn.w1"], params["head.ffn.b1"])),
                    params["head.ffn.w2"], params["head.ffn.b2"])
    x2 = ops.layer_norm(ops.add(x1, ff), params["head.ln2.gamma"], params["head.ln2.beta"], eps)
    answer_rows = ops.index(x2, (slice(None), slice(length, length + t)))
    return ops.linear(answer_rows, params["head.out.weight"], params["head.out.bias"])


def teacher_prefix(targets: np.ndarray, vocab_ans: int) -> np.ndarray:
    """Begin-of-answer token followed by all but the last target token."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    bos = np.full((targets.shape[0], 1), vocab_ans, dtype=np.int64)
    return np.concatenate([bos, targets[:, :-1]], axis=1)


def forward(params, episodes, config: ModelConfig, targets: np.ndarray | None = None) -> ModelOutput:
    """Logits for a batch of episodes.

    The decoder head uses teacher forcing on ``targets`` (B, T); they default
    to each episode's answer tokens.
    """
    result = fuse(params["embed.instruction"], _samples(episodes, config), params, config.fusion)
    if config.head == "classification":
        logits = ops.linear(pooled_features(result), params["head.weight"], params["head.bias"])
        return ModelOutput(logits, result)
    if targets is None:
        targets = np.stack([ep.answer_tokens for ep in episodes])
    targets = np.atleast_2d(targets)
    if targets.min() < 0 or targets.max() >= config.vocab_ans:
        raise InputError(f"answer id out of range [0, {config.vocab_ans})")
    return ModelOutput(_decoder(params, result, teacher_prefix(targets, config.vocab_ans), config), result)


def loss(logits, targets) -> Tensor:
    """Mean negative log-likelihood over answer positions."""
    logits = ops.as_tensor(logits)
    v = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise InputError(f"target id out of range [0, {v})")
    return ops.cross_entropy(ops.reshape(logits, (-1, v)), targets)


def episode_targets(episodes, config: ModelConfig) -> np.ndarray:
    t = np.stack([ep.answer_tokens for ep in episodes])
    return t[:, 0] if config.head == "classification" else t


def predict(params, episodes, config: ModelConfig) -> tuple[np.ndarray, FusionResult]:
    """Greedy predictions (B, T) and the fusion result (gates) for the batch."""
    if config.head == "classification":
        out = forward(params, episodes, config)
        return np.argmax(out.logits.data, axis=-1)[:, None], out.fusion
    t_ans = len(episodes[0].answer_tokens)
    result = fuse(params["embed.instruction"], _samples(episodes, config), params, config.fusion)
    generated = np.zeros((len(episodes), 0), dtype=np.int64)
    for step in range(t_ans):
        prefix = np.concatenate(
            [np.full((len(episodes), 1), config.vocab_ans, dtype=np.int64), generated], axis=1
        )
        logits = _decoder(params, result, prefix, config)
        nxt = np.argmax(logits.data[:, step, :], axis=-1)
        generated = np.concatenate([generated, nxt[:, None]], axis=1)
    return generated, result


def forward_episode(episode, params, config: ModelConfig):
    """Single-episode forward: logits (V,) or (T, V) and the gate report."""
    out = forward(params, [episode], config)
    logits = out.logits.data[0]
    return logits, out.fusion.report(0)


# --- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"GATEFUSE-CKPT\n"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, config: ModelConfig, extra: dict | None = None) -> Path:
    """Text header line (JSON) followed by little-endian float32 payloads in header order."""
    path = Path(path)
    names = sorted(params)
    fields = []
    for n in names:
        a = np.asarray(getattr(params[n], "data", params[n]))
        fields.append({"name": n, "shape": list(a.shape)})
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "<f4",
        "fields": fields,
        "config": config.to_dict(),
        "extra": extra or {},
    }
    payload = b"".join(
        np.ascontiguousarray(np.asarray(getattr(params[n], "data", params[n])), dtype="<f4").tobytes() for n in names
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload)
    return path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Parameters (float64 copies of the float32 payload) and the parsed header."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ArtifactError(f"checkpoint {path} does not exist") from None
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ArtifactError(f"{path} is not a gatefuse checkpoint")
    end = raw.find(b"\n", len(CHECKPOINT_MAGIC))
    try:
        header = json.loads(raw[len(CHECKPOINT_MAGIC) : end])
    except (json.JSONDecodeError, ValueError) as exc:
        raise ArtifactError(f"{path}: unreadable checkpoint header: {exc}") from None
    if end < 0 or header.get("format_version") != CHECKPOINT_VERSION:
        raise ArtifactError(f"{path}: unsupported checkpoint version {header.get('format_version')!r}")
    payload = raw[end + 1 :]
    need = sum(int(np.prod(f["shape"], dtype=np.int64)) for f in header["fields"])
    if len(payload) != 4 * need:
        raise ArtifactError(f"{path}: payload holds {len(payload)} bytes, header declares {4 * need} (truncated?)")
    values = np.frombuffer(payload, dtype="<f4")
    params = {}
    offset = 0
    for f in header["fields"]:
        size = int(np.prod(f["shape"], dtype=np.int64))
        params[f["name"]] = values[offset : offset + size].astype(np.float64).reshape(f["shape"])
        offset += size
    return params, header


def load_checkpoint(path, config: ModelConfig | None = None) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    """Load and check against ``config`` (default: the echoed config).

    Any missing, unexpected, or mis-shaped field raises ArtifactError naming it.
    """
    params, header = read_checkpoint(path)
    try:
        stored = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise ArtifactError(f"{path}: checkpoint config echo is invalid: {exc}") from None
    config = stored if config is None else config
    expected = {k: v.shape for k, v in init_params(config, 0).items()}
    for name, shape in expected.items():
        if name not in params:
            raise ArtifactError(f"{path}: checkpoint lacks field {name!r}")
        if params[name].shape != shape:
            raise ArtifactError(f"{path}: field {name!r} has shape {params[name].shape}, config expects {shape}")
    for name in params:
        if name not in expected:
            raise ArtifactError(f"{path}: unexpected checkpoint field {name!r}")
    return params, config, header.get("extra", {})

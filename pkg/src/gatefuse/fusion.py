"""The gated fusion block, end to end.

project -> control summaries -> unified sequence -> attention -> token and
stream gates -> residual + norm -> FFN + residual + norm -> restore
instruction and padding rows.

Parameters live in a flat ``{name: array}`` mapping so they can be watched
on a tape, updated by the optimizer, and written to a checkpoint without
conversion.  Values may be arrays or tracked tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import gating
from .attention import DEFAULT_ROPE_BASE, check_heads, multi_head_attention
from .errors import ConfigurationError, DimensionError, InputError
from .gating import GateReport, GateState, GateVariant
from .numerics import Tensor, ops
from .sequence import Layout, PackedLayout, TokenSequence, pack_layouts

LEVELS = ("concat-only", "attention-only", "attention+inner", "full")

# named configurations used by the CLI and the ablation harness
VARIANTS = {
    "full": ("full", gating.ATTENTION),
    "concat-only": ("concat-only", gating.ATTENTION),
    "attention-only": ("attention-only", gating.ATTENTION),
    "attention+inner": ("attention+inner", gating.ATTENTION),
    "no-residual": ("full", gating.NO_RESIDUAL),
    "flamingo-tanh": ("full", gating.FLAMINGO_TANH),
    "mlp-score": ("full", gating.MLP_SCORE),
    "cross-attn-score": ("full", gating.CROSS_ATTN_SCORE),
}

FusionParams = dict  # name -> array or Tensor


@dataclass(frozen=True)
class FusionConfig:
    d: int = 16
    n_heads: int = 2
    modalities: tuple[tuple[int, int], ...] = ((1, 16), (2, 16))  # (id, feature width)
    n_layers: int = 1
    gate_variant: str = gating.ATTENTION
    component_level: str = "full"
    epsilon: float = gating.EPSILON
    stream_threshold: float = gating.STREAM_THRESHOLD
    ffn_mult: int = 4
    rope_base: float = DEFAULT_ROPE_BASE
    n_control: int = 1
    control_sharing: str = "unified"  # or "specific": one base embedding per modality
    ln_eps: float = 1e-5
    allow_instruction_only: bool = True
    final_norm: bool = False  # layer norm after the FFN residual as well

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple((int(m), int(w)) for m, w in self.modalities))
        check_heads(self.d, self.n_heads)
        GateVariant(self.gate_variant)
        if self.component_level not in LEVELS:
            raise ConfigurationError(f"unknown component level {self.component_level!r}; choose from {LEVELS}")
        if self.n_layers < 1 or self.n_control < 1:
            raise ConfigurationError("n_layers and n_control must be >= 1")
        if self.control_sharing not in ("unified", "specific"):
            raise ConfigurationError(f"control_sharing must be unified or specific, got {self.control_sharing!r}")
        ids = [m for m, _ in self.modalities]
        if len(set(ids)) != len(ids) or min(ids, default=1) < 1:
            raise ConfigurationError(f"modality ids must be distinct and >= 1, got {ids}")

    @classmethod
    def for_variant(cls, name: str, **kwargs) -> "FusionConfig":
        try:
            level, kind = VARIANTS[name]
        except KeyError:
            raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
        return cls(component_level=level, gate_variant=kind, **kwargs)

    @property
    def variant(self) -> GateVariant:
        return GateVariant(self.gate_variant)

    @property
    def modality_ids(self) -> tuple[int, ...]:
        return tuple(m for m, _ in self.modalities)

    @property
    def uses_control(self) -> bool:
        return self.component_level == "full"

    @property
    def has_gates(self) -> bool:
        return self.component_level != "concat-only"

    def feature_width(self, modality: int) -> int:
        for m, w in self.modalities:
            if m == modality:
                return w
        raise ConfigurationError(f"unknown modality id {modality}; declared {self.modality_ids}")


@dataclass
class FusionSample:
    """One sample's fusion input.

    ``instruction`` rows index into the instruction source passed to
    :func:`fuse`; ``features`` is [(modality id, (T_m, d_m) array)].
    """

    instruction: np.ndarray
    features: list[tuple[int, np.ndarray]]
    system: np.ndarray | None = None


@dataclass
class FusionResult:
    output: Tensor  # (B, L, d)
    packed: PackedLayout
    gates: GateState | None
    layer_input: Tensor  # (B, L, d) input sequence of the first layer

    def report(self, b: int) -> GateReport:
        if self.gates is None:
            return GateReport()
        return self.gates.report(self.packed, b)


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def init_fusion_params(config: FusionConfig, rng: np.random.Generator, prefix: str = "fusion.") -> dict[str, np.ndarray]:
    d = config.d
    p: dict[str, np.ndarray] = {}
    for m, width in config.modalities:
        p[f"{prefix}proj.m{m}.weight"] = _glorot(rng, width, d)
        p[f"{prefix}proj.m{m}.bias"] = np.zeros(d)
    if config.component_level == "concat-only":
        return p
    if config.uses_control:
        if config.control_sharing == "unified":
            p[f"{prefix}control.base"] = rng.normal(0.0, 1.0, size=(config.n_control, d))
        else:
            for m, _ in config.modalities:
                p[f"{prefix}control.base.m{m}"] = rng.normal(0.0, 1.0, size=(config.n_control, d))
        for name in ("wq", "wk", "wv"):
            p[f"{prefix}control.{name}"] = _glorot(rng, d, d)
    hidden = config.ffn_mult * d
    for layer in range(config.n_layers):
        lp = f"{prefix}l{layer}."
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{lp}attn.{name}"] = _glorot(rng, d, d)
        p[f"{lp}ffn.w1"] = _glorot(rng, d, hidden)
        p[f"{lp}ffn.b1"] = np.zeros(hidden)
        p[f"{lp}ffn.w2"] = _glorot(rng, hidden, d)
        p[f"{lp}ffn.b2"] = np.zeros(d)
        for ln in ("ln1", "ln2") if config.final_norm else ("ln1",):
            p[f"{lp}{ln}.gamma"] = np.ones(d)
            p[f"{lp}{ln}.beta"] = np.zeros(d)
        if config.component_level == "full":
            kind = config.gate_variant
            if kind == gating.MLP_SCORE:
                p[f"{lp}mlp.w1"] = _glorot(rng, 2 * d, 2 * d)
                p[f"{lp}mlp.b1"] = np.zeros(2 * d)
                p[f"{lp}mlp.w2"] = _glorot(rng, 2 * d, 1)
                p[f"{lp}mlp.b2"] = np.zeros(1)
            elif kind == gating.FLAMINGO_TANH:
                p[f"{lp}tanh_gate"] = np.zeros(len(config.modalities))
        if config.component_level in ("attention+inner", "full") and config.gate_variant == gating.CROSS_ATTN_SCORE:
            p[f"{lp}xattn.wq"] = _glorot(rng, d, d)
            p[f"{lp}xattn.wk"] = _glorot(rng, d, d)
    return p


def project_modality(features, weight, bias=None) -> Tensor:
    """Affine map of encoder features (T, d_m) into the model width."""
    f = ops.as_tensor(features)
    w_shape = weight.shape
    if f.ndim != 2 or f.shape[1] != w_shape[0]:
        raise DimensionError(f"features of shape {f.shape} do not fit projector {tuple(w_shape)}")
    return ops.linear(f, weight, bias)


def _sub(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def fuse(instruction_source, samples: list[FusionSample], params: dict, config: FusionConfig,
         padded_length: int | None = None, prefix: str = "fusion.",
         padding_embeddings: np.ndarray | None = None) -> FusionResult:
    """Run the fusion block on a batch.

    ``instruction_source`` (N, d) holds instruction embedding rows; each
    sample's ``instruction`` indexes into it (the model passes its embedding
    table and token ids).  Sequences are right-padded to the batch maximum
    or ``padded_length``.  Padding rows are zeros unless
    ``padding_embeddings`` (B, L, d) supplies values for them.
    """
    d = config.d
    inst_src = ops.as_tensor(instruction_source)
    if inst_src.ndim != 2 or inst_src.shape[1] != d:
        raise DimensionError(f"instruction embeddings have shape {inst_src.shape}, expected (*, {d})")
    declared = set(config.modality_ids)
    for i, s in enumerate(samples):
        ids = [m for m, _ in s.features]
        for m in ids:
            if m not in declared:
                raise ConfigurationError(f"sample {i}: unknown modality id {m}; declared {sorted(declared)}")
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"sample {i}: duplicate modality ids {ids}")
        if not ids and not config.allow_instruction_only:
            raise InputError(f"sample {i} has no available modality")

    # projections: one affine map per modality over all rows in the batch
    blocks = [inst_src]
    offset = inst_src.shape[0]
    token_rows: list[dict[int, np.ndarray]] = [dict() for _ in samples]
    projected: dict[int, Tensor] = {}
    for m, width in config.modalities:
        feats = [(i, np.asarray(f, dtype=np.float64)) for i, s in enumerate(samples) for mid, f in s.features if mid == m]
        if not feats:
            continue
        for i, f in feats:
            if f.ndim != 2 or f.shape[1] != width or f.shape[0] == 0:
                raise DimensionError(f"modality {m} features have shape {f.shape}, expected (T>=1, {width})")
        stacked = np.concatenate([f for _, f in feats], axis=0)
        x = project_modality(stacked, params[f"{prefix}proj.m{m}.weight"], params[f"{prefix}proj.m{m}.bias"])
        projected[m] = x
        start = offset
        for i, f in feats:
            token_rows[i][m] = np.arange(start, start + f.shape[0])
            start += f.shape[0]
        blocks.append(x)
        offset += x.shape[0]

    # control summaries
    n_ctrl = config.n_control if config.uses_control else 0
    control_rows: list[dict[int, np.ndarray]] = [dict() for _ in samples]
    if n_ctrl:
        wq, wk, wv = (params[f"{prefix}control.{n}"] for n in ("wq", "wk", "wv"))
        for m in projected:
            members = [i for i in range(len(samples)) if m in token_rows[i]]
            local = [token_rows[i][m] - token_rows[members[0]][m][0] for i in members]
            tmax = max(len(r) for r in local)
            zero_row = projected[m].shape[0]
            x_pad = ops.concat([projected[m], ops.as_tensor(np.zeros((1, d)))], axis=0)
            idx = np.full((len(members), tmax), zero_row, dtype=np.intp)
            vis = np.zeros((len(members), tmax), dtype=bool)
            for r, rows in enumerate(local):
                idx[r, : len(rows)] = rows
                vis[r, : len(rows)] = True
            base = params[f"{prefix}control.base"] if config.control_sharing == "unified" else params[f"{prefix}control.base.m{m}"]
            summary = gating.summarize_controls(base, ops.take(x_pad, idx), vis, wq, wk, wv)
            blocks.append(ops.reshape(summary, (len(members) * n_ctrl, d)))
            for r, i in enumerate(members):
                control_rows[i][m] = np.arange(offset + r * n_ctrl, offset + (r + 1) * n_ctrl)
            offset += len(members) * n_ctrl

    system_rows: list[np.ndarray] = []
    for s in samples:
        if s.system is None:
            system_rows.append(np.zeros(0, dtype=np.intp))
            continue
        sys_arr = np.asarray(s.system, dtype=np.float64)
        if sys_arr.ndim != 2 or sys_arr.shape[1] != d:
            raise DimensionError(f"system prompt has shape {sys_arr.shape}, expected (*, {d})")
        blocks.append(ops.as_tensor(sys_arr))
        system_rows.append(np.arange(offset, offset + sys_arr.shape[0]))
        offset += sys_arr.shape[0]
    blocks.append(ops.as_tensor(np.zeros((1, d))))
    zero_index = offset

    layouts = []
    for i, s in enumerate(samples):
        present = [m for m in config.modality_ids if m in token_rows[i]]
        layouts.append(
            Layout.build(
                len(s.instruction),
                [(m, len(token_rows[i][m])) for m in present],
                system_length=len(system_rows[i]),
                n_control=n_ctrl,
            )
        )
    packed = pack_layouts(layouts, config.modality_ids, padded_length)
    index = np.full((len(samples), packed.length), zero_index, dtype=np.intp)
    for i, (s, lay) in enumerate(zip(samples, layouts)):
        parts = [system_rows[i], np.asarray(s.instruction, dtype=np.intp)]
        for m in lay.content_spans:
            if n_ctrl:
                parts.append(control_rows[i][m])
            parts.append(token_rows[i][m])
        index[i, : lay.length] = np.concatenate(parts)
    if padding_embeddings is not None:
        pad = np.asarray(padding_embeddings, dtype=np.float64)
        if pad.shape != (len(samples), packed.length, d):
            raise DimensionError(f"padding embeddings shape {pad.shape} != {(len(samples), packed.length, d)}")
        is_pad = index == zero_index
        blocks.append(ops.as_tensor(pad[is_pad]))
        index[is_pad] = np.arange(zero_index + 1, zero_index + 1 + int(is_pad.sum()))
    source = ops.concat(blocks, axis=0)
    h = ops.take(source, index)
    layer_input = h

    if config.component_level == "concat-only":
        return FusionResult(h, packed, None, layer_input)

    gates = None
    restore = packed.restore[:, :, None]
    for layer in range(config.n_layers):
        lp = _sub(params, f"{prefix}l{layer}.")
        att = multi_head_attention(
            h, packed.visible, lp["attn.wq"], lp["attn.wk"], lp["attn.wv"], lp["attn.wo"],
            config.n_heads, config.rope_base,
        )
        gates = gating.compute_gates(
            att.attn, packed, config.component_level, config.variant,
            config.epsilon, config.stream_threshold, h=h, params=lp,
        )
        gated = gating.gate_outputs(att.output, gates, packed, config.component_level, config.variant,
                                    tanh_gates=lp.get("tanh_gate"))
        x1 = ops.layer_norm(ops.add(h, gated), lp["ln1.gamma"], lp["ln1.beta"], config.ln_eps)
        ff = ops.linear(ops.gelu(ops.linear(x1, lp["ffn.w1"], lp["ffn.b1"])), lp["ffn.w2"], lp["ffn.b2"])
        x2 = ops.add(x1, ff)
        if config.final_norm:
            x2 = ops.layer_norm(x2, lp["ln2.gamma"], lp["ln2.beta"], config.ln_eps)
        h = ops.where(restore, h, x2)
    return FusionResult(h, packed, gates, layer_input)


def _as_sample(instruction_embeddings, modality_features, system_embeddings, offset: int):
    t0 = instruction_embeddings.shape[0]
    return FusionSample(np.arange(offset, offset + t0), list(modality_features), system_embeddings)


def fusion_forward_batch(batch, params: dict, config: FusionConfig, padded_length: int | None = None,
                         padding_embeddings: np.ndarray | None = None):
    """Fuse several samples at once.

    ``batch`` is a list of ``(instruction_embeddings, modality_features)`` or
    ``(instruction_embeddings, modality_features, system_embeddings)``.
    Returns one ``(TokenSequence, GateReport)`` per sample; every result is
    bit-identical to the single-sample call.
    """
    sources, samples, offset = [], [], 0
    for item in batch:
        inst, feats = item[0], item[1]
        system = item[2] if len(item) > 2 else None
        inst = ops.as_tensor(inst)
        if inst.ndim != 2 or inst.shape[1] != config.d:
            raise DimensionError(f"instruction embeddings have shape {inst.shape}, expected (T, {config.d})")
        samples.append(_as_sample(inst, feats, system, offset))
        sources.append(inst)
        offset += inst.shape[0]
    result = fuse(ops.concat(sources, axis=0), samples, params, config, padded_length,
                  padding_embeddings=padding_embeddings)
    out = []
    for b, lay in enumerate(result.packed.layouts):
        rows = ops.index(result.output, (b, slice(0, lay.length)))
        out.append((TokenSequence(rows, lay), result.report(b)))
    return out


def fusion_forward(instruction_embeddings, modality_features, params: dict, config: FusionConfig,
                   system_embeddings=None):
    """Fuse one sample; returns ``(TokenSequence, GateReport)``."""
    return fusion_forward_batch([(instruction_embeddings, modality_features, system_embeddings)], params, config)[0]

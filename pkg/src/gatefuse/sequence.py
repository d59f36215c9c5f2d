"""Unified token sequence: layout, modality indices, and the key mask.

Layout of one sample::

    [system prompt][instruction][ctrl_1][X_1] ... [ctrl_N][X_N][padding]

Modality index per position: -1 for system prompt and padding, 0 for
instruction tokens, ``m`` for the control token(s) and content tokens of
modality ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, LayoutError
from .numerics import Tensor, ops

PAD = -1
INSTRUCTION = 0


@dataclass(frozen=True)
class Layout:
    """Positions of every span in one sample; embeddings are held separately."""

    length: int
    modality_index: np.ndarray
    instruction_span: range
    control_positions: dict[int, int]
    content_spans: dict[int, range]
    system_span: range = range(0)
    n_control: int = 1

    @property
    def modalities(self) -> list[int]:
        return list(self.content_spans)

    def control_slots(self, modality: int) -> range:
        start = self.control_positions[modality]
        return range(start, start + self.n_control)

    @classmethod
    def build(
        cls,
        instruction_length: int,
        modality_lengths: list[tuple[int, int]],
        system_length: int = 0,
        n_control: int = 1,
    ) -> "Layout":
        """Layout for ``modality_lengths`` = [(modality id, n content tokens), ...].

        ``n_control`` = 0 lays modalities out without control tokens.
        """
        seen = set()
        index = [PAD] * system_length + [INSTRUCTION] * instruction_length
        pos = len(index)
        controls: dict[int, int] = {}
        spans: dict[int, range] = {}
        for mid, t in modality_lengths:
            if mid in seen:
                raise LayoutError(f"modality id {mid} appears twice")
            if mid < 1:
                raise LayoutError(f"modality ids must be >= 1, got {mid}")
            seen.add(mid)
            if n_control:
                controls[mid] = pos
            index.extend([mid] * (n_control + t))
            spans[mid] = range(pos + n_control, pos + n_control + t)
            pos += n_control + t
        return cls(
            length=pos,
            modality_index=np.asarray(index, dtype=np.int64),
            instruction_span=range(system_length, system_length + instruction_length),
            control_positions=controls,
            content_spans=spans,
            system_span=range(system_length),
            n_control=n_control,
        )


@dataclass(frozen=True)
class TokenSequence:
    embeddings: Tensor
    layout: Layout

    @property
    def modality_index(self) -> np.ndarray:
        return self.layout.modality_index

    @property
    def control_positions(self) -> dict[int, int]:
        return self.layout.control_positions

    @property
    def content_spans(self) -> dict[int, range]:
        return self.layout.content_spans

    @property
    def instruction_span(self) -> range:
        return self.layout.instruction_span

    def __len__(self) -> int:
        return self.layout.length

    def content(self, modality: int) -> np.ndarray:
        span = self.layout.content_spans[modality]
        return self.embeddings.data[span.start : span.stop]


@dataclass(frozen=True)
class AttentionMask:
    visible: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.visible)


def _shape2(x) -> tuple[int, int]:
    shape = x.shape if isinstance(x, Tensor) else np.shape(x)
    if len(shape) != 2:
        raise DimensionError(f"expected a 2-D token matrix, got shape {tuple(shape)}")
    return int(shape[0]), int(shape[1])


def assemble_sequence(
    instruction_embeddings,
    modality_tokens: list[tuple[int, object]],
    control_tokens: list | None = None,
    system_embeddings=None,
) -> TokenSequence:
    """Concatenate instruction, control, and content tokens into one sequence.

    ``control_tokens`` holds one (k, d) block per entry of ``modality_tokens``
    (k control tokens each); ``None`` omits control tokens.
    """
    instruction_length, d = _shape2(instruction_embeddings)
    n_control = 0
    if control_tokens is not None:
        if len(control_tokens) != len(modality_tokens):
            raise LayoutError(
                f"{len(control_tokens)} control tokens for {len(modality_tokens)} modalities"
            )
        n_control = _shape2(control_tokens[0])[0] if control_tokens else 1
    pieces = []
    system_length = 0
    if system_embeddings is not None:
        system_length, width = _shape2(system_embeddings)
        if width != d:
            raise DimensionError(f"system prompt width {width} != {d}")
        pieces.append(system_embeddings)
    pieces.append(instruction_embeddings)
    lengths = []
    for i, (mid, tokens) in enumerate(modality_tokens):
        t, width = _shape2(tokens)
        if width != d:
            raise DimensionError(f"modality {mid} width {width} != instruction width {d}")
        if control_tokens is not None:
            ctrl_shape = _shape2(control_tokens[i])
            if ctrl_shape != (n_control, d):
                raise DimensionError(f"control token for modality {mid} has shape {ctrl_shape}")
            pieces.append(control_tokens[i])
        pieces.append(tokens)
        lengths.append((mid, t))
    layout = Layout.build(instruction_length, lengths, system_length, n_control)
    embeddings = ops.concat([ops.as_tensor(p) for p in pieces], axis=0)
    return TokenSequence(embeddings, layout)


def build_mask(seq: TokenSequence | Layout, padded_length: int | None = None) -> AttentionMask:
    layout = seq.layout if isinstance(seq, TokenSequence) else seq
    n = layout.length if padded_length is None else padded_length
    if n < layout.length:
        raise LayoutError(f"padded length {n} shorter than sequence length {layout.length}")
    visible = np.zeros(n, dtype=bool)
    visible[: layout.length] = layout.modality_index != PAD
    return AttentionMask(visible)


@dataclass(frozen=True)
class PackedLayout:
    """Right-padded batch of layouts as dense index arrays.

    Column ``j`` of the (B, M, L) membership arrays refers to
    ``modalities[j]``, the declared modality ids.
    """

    layouts: tuple[Layout, ...]
    modalities: tuple[int, ...]
    length: int
    modality_index: np.ndarray  # (B, L), -1 at padding
    visible: np.ndarray  # (B, L) bool
    instruction: np.ndarray  # (B, L) float 0/1
    content: np.ndarray  # (B, M, L) float 0/1
    control: np.ndarray  # (B, M, L) float 0/1
    available: np.ndarray  # (B, M) bool

    @property
    def batch_size(self) -> int:
        return len(self.layouts)

    @property
    def restore(self) -> np.ndarray:
        """Positions whose fused output is replaced by the input (index 0 or -1)."""
        return self.modality_index <= INSTRUCTION

    @property
    def is_content(self) -> np.ndarray:
        return self.content.sum(axis=1) > 0

    def column(self, modality: int) -> int:
        return self.modalities.index(modality)


def pack_layouts(
    layouts: list[Layout], modalities: tuple[int, ...] | list[int], padded_length: int | None = None
) -> PackedLayout:
    modalities = tuple(modalities)
    length = max(lay.length for lay in layouts) if padded_length is None else padded_length
    b, m = len(layouts), len(modalities)
    col = {mid: j for j, mid in enumerate(modalities)}
    index = np.full((b, length), PAD, dtype=np.int64)
    instruction = np.zeros((b, length))
    content = np.zeros((b, m, length))
    control = np.zeros((b, m, length))
    available = np.zeros((b, m), dtype=bool)
    for i, lay in enumerate(layouts):
        if lay.length > length:
            raise LayoutError(f"sample {i} has length {lay.length} > padded length {length}")
        index[i, : lay.length] = lay.modality_index
        instruction[i, lay.instruction_span.start : lay.instruction_span.stop] = 1.0
        for mid, span in lay.content_spans.items():
            if mid not in col:
                raise LayoutError(f"modality {mid} is not among declared modalities {modalities}")
            j = col[mid]
            available[i, j] = True
            content[i, j, span.start : span.stop] = 1.0
            if lay.n_control:
                slots = lay.control_slots(mid)
                control[i, j, slots.start : slots.stop] = 1.0
    return PackedLayout(
        layouts=tuple(layouts),
        modalities=modalities,
        length=length,
        modality_index=index,
        visible=index != PAD,
        instruction=instruction,
        content=content,
        control=control,
        available=available,
    )

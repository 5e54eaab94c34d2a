"""Flat parameter storage split into the four codec groups.

Every model parameter lives in one contiguous float64 vector.  A
:class:`GroupLayout` records which slice belongs to which codec group and how
many bytes each element costs on the wire, which is all the communication
ledger needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import LayoutError

SEMANTIC_ENC = "semantic_enc"
CHANNEL_ENC = "channel_enc"
CHANNEL_DEC = "channel_dec"
SEMANTIC_DEC = "semantic_dec"

GROUPS: tuple[str, ...] = (SEMANTIC_ENC, CHANNEL_ENC, CHANNEL_DEC, SEMANTIC_DEC)
ALL_GROUPS: frozenset[str] = frozenset(GROUPS)
SEMANTIC_GROUPS: frozenset[str] = frozenset({SEMANTIC_ENC, SEMANTIC_DEC})
CHANNEL_GROUPS: frozenset[str] = frozenset({CHANNEL_ENC, CHANNEL_DEC})

DEFAULT_BYTES_PER_ELEMENT = 4
MEGABYTE = 1_000_000

# Module sizes reported for the Swin-based codec, in MB.
REFERENCE_GROUP_MB: dict[str, float] = {
    SEMANTIC_ENC: 55.12,
    CHANNEL_ENC: 25.07,
    CHANNEL_DEC: 25.07,
    SEMANTIC_DEC: 53.41,
}


@dataclass(frozen=True)
class GroupSpan:
    group_id: str
    offset: int
    length: int
    bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT

    @property
    def stop(self) -> int:
        return self.offset + self.length

    @property
    def nbytes(self) -> int:
        return self.length * self.bytes_per_element


@dataclass(frozen=True)
class GroupLayout:
    spans: tuple[GroupSpan, ...]

    def __post_init__(self) -> None:
        ids = [s.group_id for s in self.spans]
        if sorted(ids) != sorted(GROUPS) or len(ids) != len(GROUPS):
            raise LayoutError(f"layout must hold exactly the groups {GROUPS}, got {ids}")
        cursor = 0
        for span in sorted(self.spans, key=lambda s: s.offset):
            if span.offset != cursor or span.length < 0:
                raise LayoutError(f"group {span.group_id!r} is not contiguous at offset {cursor}")
            if span.bytes_per_element <= 0:
                raise LayoutError(f"group {span.group_id!r} has non-positive element width")
            cursor = span.stop

    @classmethod
    def from_lengths(
        cls,
        lengths: dict[str, int],
        bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT,
    ) -> GroupLayout:
        """Pack groups back to back in canonical pipeline order."""
        spans = []
        offset = 0
        for gid in GROUPS:
            n = int(lengths[gid])
            spans.append(GroupSpan(gid, offset, n, bytes_per_element))
            offset += n
        return cls(tuple(spans))

    @property
    def total_length(self) -> int:
        return sum(s.length for s in self.spans)

    def span(self, group_id: str) -> GroupSpan:
        for s in self.spans:
            if s.group_id == group_id:
                return s
        raise LayoutError(f"unknown group id {group_id!r}")

    def slice(self, group_id: str) -> slice:
        s = self.span(group_id)
        return slice(s.offset, s.stop)


def reference_layout(bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> GroupLayout:
    """Layout whose byte sizes equal the reported Swin codec module sizes.

    No vector is ever allocated for it; it only feeds the ledger.
    """
    lengths = {}
    for gid, mb in REFERENCE_GROUP_MB.items():
        nbytes = round(mb * MEGABYTE)
        if nbytes % bytes_per_element:
            raise LayoutError(f"{mb} MB is not a whole number of {bytes_per_element}-byte elements")
        lengths[gid] = nbytes // bytes_per_element
    return GroupLayout.from_lengths(lengths, bytes_per_element)


def _check_groups(group_ids: Iterable[str]) -> frozenset[str]:
    ids = frozenset(group_ids)
    unknown = ids - ALL_GROUPS
    if unknown:
        raise LayoutError(f"unknown group id(s): {sorted(unknown)}")
    return ids


class ParamVector:
    """Immutable parameter vector bound to a :class:`GroupLayout`."""

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: GroupLayout):
        arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if arr.shape[0] != layout.total_length:
            raise LayoutError(
                f"vector has {arr.shape[0]} entries but layout covers {layout.total_length}"
            )
        if not np.all(np.isfinite(arr)):
            raise LayoutError("parameter vector contains non-finite entries")
        arr.flags.writeable = False
        self.values = arr
        self.layout = layout

    @classmethod
    def zeros(cls, layout: GroupLayout) -> ParamVector:
        return cls(np.zeros(layout.total_length), layout)

    def group(self, group_id: str) -> np.ndarray:
        return self.values[self.layout.slice(group_id)]

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash((self.layout, self.values.tobytes()))

    def __repr__(self) -> str:
        return f"ParamVector(n={len(self)})"


def _require_same_layout(vectors: Sequence[ParamVector]) -> GroupLayout:
    layout = vectors[0].layout
    for v in vectors[1:]:
        if v.layout != layout:
            raise LayoutError("parameter vectors do not share one layout")
    return layout


def weighted_sum(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    if len(vectors) == 0:
        raise LayoutError("weighted_sum needs at least one vector")
    if len(vectors) != len(weights):
        raise LayoutError(f"{len(vectors)} vectors but {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise LayoutError("weights must be finite")
    layout = _require_same_layout(vectors)
    stacked = np.stack([v.values for v in vectors])
    # Summation runs in client-index order so results do not depend on scheduling.
    out = np.zeros(layout.total_length)
    for k in range(len(vectors)):
        out += w[k] * stacked[k]
    return ParamVector(out, layout)


def overwrite_groups(dst: ParamVector, src: ParamVector, group_ids: Iterable[str]) -> ParamVector:
    """Copy the listed groups from ``src`` into a copy of ``dst``."""
    ids = _check_groups(group_ids)
    layout = _require_same_layout([dst, src])
    out = dst.values.copy()
    for gid in ids:
        sl = layout.slice(gid)
        out[sl] = src.values[sl]
    return ParamVector(out, layout)


def byte_size(layout: GroupLayout, group_ids: Iterable[str]) -> int:
    ids = _check_groups(group_ids)
    return sum(layout.span(gid).nbytes for gid in ids)

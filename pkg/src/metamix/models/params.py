"""Flat parameter banks with named segments, and their checkpoint format.

Checkpoint layout: magic line, one JSON header line (spec descriptor,
feature-space digest, segment table), then the flat vector as little-endian
64-bit reals. Loading verifies the digest against the caller's feature space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

_MAGIC = b"MMXBANK1\n"


@dataclass(frozen=True)
class ParamSegment:
    name: str
    offset: int
    length: int
    shape: tuple


class ParamBank:
    """A flat float64 vector carved into disjoint named segments."""

    def __init__(self, layout, flat: np.ndarray | None = None):
        segments = []
        offset = 0
        for name, shape in layout:
            length = int(np.prod(shape)) if shape else 1
            segments.append(ParamSegment(name, offset, length, tuple(shape)))
            offset += length
        self.segments = tuple(segments)
        self._by_name = {s.name: s for s in self.segments}
        if len(self._by_name) != len(self.segments):
            raise ValueError("duplicate segment names")
        if flat is None:
            flat = np.zeros(offset, dtype=np.float64)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (offset,):
            raise ValueError(f"flat vector length {flat.shape} != layout total {offset}")
        self.flat = flat

    def __len__(self) -> int:
        return self.flat.size

    def view(self, name: str) -> np.ndarray:
        """Writable view into the flat vector, reshaped to the segment."""
        s = self._by_name[name]
        return self.flat[s.offset : s.offset + s.length].reshape(s.shape)

    def layout(self):
        return [(s.name, s.shape) for s in self.segments]

    def copy(self) -> "ParamBank":
        return ParamBank(self.layout(), self.flat.copy())

    def zeros_like(self) -> "ParamBank":
        return ParamBank(self.layout())


def save_bank(path, bank: ParamBank, descriptor: dict, fspace_digest: str) -> None:
    header = {
        "descriptor": descriptor,
        "fspace_digest": fspace_digest,
        "segments": [[s.name, s.offset, s.length, list(s.shape)] for s in bank.segments],
        "length": len(bank),
    }
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(bank.flat.astype("<f8").tobytes())


def load_bank(path, fspace_digest: str | None = None):
    """Load a checkpoint; returns (bank, descriptor). A digest mismatch is an
    error: a bank is meaningless against a different feature layout."""
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        header = json.loads(f.readline().decode("utf-8"))
        raw = f.read()
    if fspace_digest is not None and header["fspace_digest"] != fspace_digest:
        raise ValueError(
            f"{path}: checkpoint was written for a different feature space "
            f"({header['fspace_digest'][:12]}... != {fspace_digest[:12]}...)"
        )
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if flat.size != header["length"]:
        raise ValueError(f"{path}: truncated checkpoint")
    layout = [(name, tuple(shape)) for name, _off, _len, shape in header["segments"]]
    return ParamBank(layout, flat), header["descriptor"]

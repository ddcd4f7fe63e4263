"""Coverage bitmaps, corpus distillation and bug deduplication.

The instrumented target exposes a fixed-width bitmap over its declared
basic blocks via a ``/__coverage__`` side channel.  Each executed test
case is attributed the bitmap accumulated since the previous fetch.
Path identity is exact bitmap equality; distillation greedily keeps the
first test case contributing each new block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class CoverageBitmap:
    """Fixed-width bit vector over the target's declared blocks."""

    width: int
    bits: bytes

    def __post_init__(self):
        need = (self.width + 7) // 8
        if len(self.bits) != need:
            raise ValueError(
                "bitmap has %d bytes, width %d needs %d"
                % (len(self.bits), self.width, need)
            )

    @classmethod
    def empty(cls, width: int) -> "CoverageBitmap":
        return cls(width=width, bits=bytes((width + 7) // 8))

    @classmethod
    def from_indices(cls, width: int, indices) -> "CoverageBitmap":
        buf = bytearray((width + 7) // 8)
        for i in indices:
            if not 0 <= i < width:
                raise ValueError("block index %d outside width %d" % (i, width))
            buf[i // 8] |= 1 << (i % 8)
        return cls(width=width, bits=bytes(buf))

    @classmethod
    def from_hex(cls, width: int, hex_text: str) -> "CoverageBitmap":
        return cls(width=width, bits=bytes.fromhex(hex_text))

    def hex(self) -> str:
        return self.bits.hex()

    def indices(self) -> list[int]:
        out = []
        for i in range(self.width):
            if self.bits[i // 8] & (1 << (i % 8)):
                out.append(i)
        return out

    def count(self) -> int:
        return sum(bin(b).count("1") for b in self.bits)

    def _as_int(self) -> int:
        return int.from_bytes(self.bits, "little")

    def union(self, other: "CoverageBitmap") -> "CoverageBitmap":
        if other.width != self.width:
            raise ValueError("bitmap width mismatch: %d vs %d" % (self.width, other.width))
        merged = self._as_int() | other._as_int()
        return CoverageBitmap(
            width=self.width,
            bits=merged.to_bytes(len(self.bits), "little"),
        )

    __or__ = union

    def new_versus(self, accumulated: "CoverageBitmap") -> int:
        """Number of bits set in self but not in ``accumulated``."""
        fresh = self._as_int() & ~accumulated._as_int()
        return bin(fresh).count("1")

    def is_empty(self) -> bool:
        return not any(self.bits)


class CoverageAccumulator:
    """Mutable union of bitmaps plus new-path bookkeeping."""

    def __init__(self, width: int):
        self.width = width
        self._mask = 0
        self.total_new = 0

    def union_bitmap(self) -> CoverageBitmap:
        return CoverageBitmap(
            width=self.width,
            bits=self._mask.to_bytes((self.width + 7) // 8, "little"),
        )

    def is_new_path(self, bm: CoverageBitmap) -> bool:
        if bm.width != self.width:
            raise ValueError("bitmap width mismatch")
        return bool(bm._as_int() & ~self._mask)

    def add(self, bm: CoverageBitmap) -> int:
        """Fold a bitmap in; returns the number of newly covered blocks."""
        if bm.width != self.width:
            raise ValueError("bitmap width mismatch")
        fresh = bm._as_int() & ~self._mask
        self._mask |= bm._as_int()
        n = bin(fresh).count("1")
        self.total_new += n
        return n

    def count(self) -> int:
        return bin(self._mask).count("1")


@dataclass
class CorpusEntry:
    """One executed test case eligible for distillation."""

    case_id: str
    bitmap: CoverageBitmap
    payload: object = None  # opaque: seed text, sequence, path on disk ...


def distill(entries: list[CorpusEntry]) -> list[CorpusEntry]:
    """Greedy corpus minimisation: scan in order, keep every entry that
    contributes at least one block not covered by already-kept entries.
    The union of kept bitmaps always equals the union of all bitmaps."""
    if not entries:
        return []
    acc = CoverageAccumulator(entries[0].bitmap.width)
    kept = []
    for e in entries:
        if acc.add(e.bitmap) > 0:
            kept.append(e)
    return kept


@dataclass
class BugReport:
    """One deduplicated 500-class failure."""

    bitmap: CoverageBitmap
    count: int
    first_case_id: str
    statuses: list[int] = field(default_factory=list)
    transcript: str | None = None


def dedup_bugs(results) -> list[BugReport]:
    """One report per distinct coverage bitmap among bug_500 results.

    ``results`` is an iterable of objects with ``verdict``, ``bitmap``,
    ``case_id``, ``statuses`` and optionally ``transcript`` attributes.
    Reports keep the first-seen representative, in first-seen order."""
    reports: dict[bytes, BugReport] = {}
    order: list[bytes] = []
    for r in results:
        if r.verdict != "bug_500":
            continue
        if r.bitmap is None:
            raise ValueError("bug result %r has no bitmap" % (r.case_id,))
        key = r.bitmap.bits
        if key not in reports:
            reports[key] = BugReport(
                bitmap=r.bitmap,
                count=1,
                first_case_id=r.case_id,
                statuses=list(r.statuses),
                transcript=getattr(r, "transcript", None),
            )
            order.append(key)
        else:
            reports[key].count += 1
    return [reports[k] for k in order]


# --- side-channel client -------------------------------------------------

COVERAGE_PATH = "/__coverage__"
COVERAGE_RESET_PATH = "/__coverage__/reset"
COVERAGE_MANIFEST_PATH = "/__coverage__/manifest"


def fetch_manifest(cfg) -> list[str]:
    """Ordered declared-block ids from the target's manifest endpoint."""
    from .execution import http_request

    status, body = http_request(cfg, "GET", COVERAGE_MANIFEST_PATH)
    if status != 200:
        raise RuntimeError("manifest fetch failed: %s" % status)
    return json.loads(body)["blocks"]


def reset_coverage(cfg) -> None:
    from .execution import http_request

    status, _ = http_request(cfg, "POST", COVERAGE_RESET_PATH)
    if status != 200:
        raise RuntimeError("coverage reset failed: %s" % status)


def fetch_and_reset_coverage(cfg) -> CoverageBitmap:
    """Read the bitmap accumulated since the last reset, then clear it.

    The reference target serves requests strictly one connection at a
    time, so the read + clear pair is atomic with respect to any other
    traffic from this process."""
    from .execution import http_request

    status, body = http_request(cfg, "GET", COVERAGE_PATH)
    if status != 200:
        raise RuntimeError("coverage fetch failed: %s" % status)
    data = json.loads(body)
    bm = CoverageBitmap.from_hex(data["block_count"], data["bitmap"])
    reset_coverage(cfg)
    return bm

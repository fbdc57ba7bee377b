"""Frame contents: a lazily materialized view of physical memory."""

from __future__ import annotations

import numpy as np

from .rng import mix64

PAGE_SIZE = 4096
PAGE_BITS = PAGE_SIZE * 8
_WORDS = PAGE_SIZE // 8


class PhysicalMemory:
    """Page contents for every frame.

    Untouched frames hold a pseudo-random default pattern derived from
    (seed, frame). Frames written explicitly are stored as bytes; bit flips on
    default frames are kept as an XOR overlay so millions of flips stay cheap.
    """

    def __init__(self, n_frames: int, seed: int = 0):
        self.n_frames = int(n_frames)
        self._key = np.uint64((int(seed) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)
        self._pages: dict[int, bytearray] = {}
        self._overlay: dict[int, set[int]] = {}

    def _check(self, frame: int) -> None:
        if not 0 <= frame < self.n_frames:
            raise IndexError(f"frame {frame} outside 0..{self.n_frames - 1}")

    def _default_words(self, frame: int, words: np.ndarray) -> np.ndarray:
        idx = (np.uint64(frame) << np.uint64(9)) | words.astype(np.uint64)
        return mix64(idx ^ self._key)

    def default_page(self, frame: int) -> bytes:
        self._check(frame)
        return self._default_words(frame, np.arange(_WORDS)).astype("<u8").tobytes()

    def read_page(self, frame: int) -> bytes:
        self._check(frame)
        if frame in self._pages:
            return bytes(self._pages[frame])
        page = bytearray(self.default_page(frame))
        for bit in self._overlay.get(frame, ()):
            page[bit >> 3] ^= 1 << (bit & 7)
        return bytes(page)

    def write_page(self, frame: int, data: bytes) -> None:
        self._check(frame)
        if len(data) != PAGE_SIZE:
            raise ValueError(f"page data must be {PAGE_SIZE} bytes, got {len(data)}")
        self._pages[frame] = bytearray(data)
        self._overlay.pop(frame, None)

    def reset(self, frame: int) -> None:
        """Return a frame to its default pattern."""
        self._pages.pop(frame, None)
        self._overlay.pop(frame, None)

    def get_bits(self, frame: int, bits) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.int64)
        if frame in self._pages:
            raw = np.frombuffer(self._pages[frame], dtype=np.uint8)
            return (raw[bits >> 3] >> (bits & 7).astype(np.uint8)) & 1
        words = self._default_words(frame, bits >> 6)
        out = ((words >> (bits & 63).astype(np.uint64)) & np.uint64(1)).astype(np.uint8)
        flipped = self._overlay.get(frame)
        if flipped:
            for i, b in enumerate(bits.tolist()):
                if b in flipped:
                    out[i] ^= 1
        return out

    def get_bit(self, frame: int, bit: int) -> int:
        return int(self.get_bits(frame, [bit])[0])

    def toggle_bit(self, frame: int, bit: int) -> None:
        self._check(frame)
        if not 0 <= bit < PAGE_BITS:
            raise IndexError(f"page bit offset {bit} outside 0..{PAGE_BITS - 1}")
        page = self._pages.get(frame)
        if page is not None:
            page[bit >> 3] ^= 1 << (bit & 7)
            return
        flipped = self._overlay.setdefault(frame, set())
        flipped.symmetric_difference_update((bit,))
        if not flipped:
            del self._overlay[frame]

    def is_pristine(self, frame: int) -> bool:
        return frame not in self._pages and frame not in self._overlay

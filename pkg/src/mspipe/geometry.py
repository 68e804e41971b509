"""Rectangles and tracked regions in pixel coordinates."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle with top-left corner (x, y) and size (w, h)."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"empty rectangle: {self.w}x{self.h}")

    @property
    def slices(self) -> tuple[slice, slice]:
        """(row, col) slices for indexing an image array."""
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @property
    def area(self) -> int:
        return self.w * self.h

    def within(self, height: int, width: int) -> bool:
        return (
            self.x >= 0
            and self.y >= 0
            and self.x + self.w <= width
            and self.y + self.h <= height
        )

    @classmethod
    def parse(cls, text: str) -> "Rect":
        """Parse a CLI-style "x,y,w,h" rectangle."""
        parts = text.split(",")
        if len(parts) != 4:
            raise ValueError(f"expected 'x,y,w,h', got {text!r}")
        x, y, w, h = (int(p) for p in parts)
        return cls(x, y, w, h)


MIN_ROI_SIDE = 16


@dataclass(frozen=True)
class Roi:
    """Tracked region of interest: center (cx, cy) and size (w, h)."""

    cx: float
    cy: float
    w: int
    h: int

    def __post_init__(self):
        if self.w < MIN_ROI_SIDE or self.h < MIN_ROI_SIDE:
            raise ValueError(
                f"roi must be at least {MIN_ROI_SIDE}x{MIN_ROI_SIDE}, got {self.w}x{self.h}"
            )

    @property
    def rect(self) -> Rect:
        return Rect(
            int(round(self.cx - self.w / 2.0)),
            int(round(self.cy - self.h / 2.0)),
            self.w,
            self.h,
        )

    def within(self, height: int, width: int) -> bool:
        return self.rect.within(height, width)

    @classmethod
    def from_rect(cls, rect: Rect) -> "Roi":
        cx, cy = rect.center
        return cls(cx, cy, rect.w, rect.h)

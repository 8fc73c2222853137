"""HS code values: normalization, truncation and display."""

from __future__ import annotations

import enum
import re

_LEVELS = {2: "chapter", 4: "heading", 6: "subheading", 8: "national"}
_STRIP = re.compile(r"[.\s]+")


class CodeError(ValueError):
    """Raised for malformed or out-of-range HS codes."""


class Level(str, enum.Enum):
    CHAPTER = "chapter"
    HEADING = "heading"
    SUBHEADING = "subheading"
    NATIONAL = "national"


class HsCode(str):
    """A bare-digit HS code (2, 4, 6 or 8 digits).

    Subclasses ``str`` so codes serialize, hash and compare like their digit
    string. Construct from display forms with :func:`normalize_code`.
    """

    __slots__ = ()

    def __new__(cls, digits: str) -> HsCode:
        if isinstance(digits, HsCode):
            return digits
        if not isinstance(digits, str) or not digits.isascii() or not digits.isdigit():
            raise CodeError(f"HS code must be decimal digits, got {digits!r}")
        if len(digits) not in _LEVELS:
            raise CodeError(f"HS code must have 2, 4, 6 or 8 digits, got {len(digits)} in {digits!r}")
        return super().__new__(cls, digits)

    @property
    def digits(self) -> str:
        return str(self)

    @property
    def level(self) -> Level:
        return Level(_LEVELS[len(self)])

    @property
    def parent(self) -> HsCode | None:
        if len(self) == 2:
            return None
        return HsCode(self[:-2])

    @property
    def chapter(self) -> HsCode:
        return HsCode(self[:2])

    def ancestors(self) -> list[HsCode]:
        """Proper ancestors, chapter first."""
        return [HsCode(self[:n]) for n in range(2, len(self), 2)]

    def is_descendant_of(self, other: str) -> bool:
        return len(self) > len(other) and self.startswith(other)

    def render(self) -> str:
        return render_code(self)

    def __repr__(self) -> str:
        return f"HsCode({str(self)!r})"


def normalize_code(raw: str) -> HsCode:
    """Parse a display or bare code ("39.19", "3919.90", " 391990 ")."""
    if not raw or not raw.strip():
        raise CodeError("empty HS code")
    digits = _STRIP.sub("", raw)
    if not digits.isascii() or not digits.isdigit():
        raise CodeError(f"non-digit characters in HS code {raw!r}")
    if len(digits) not in _LEVELS:
        raise CodeError(f"HS code {raw!r} has {len(digits)} digits; expected 2, 4, 6 or 8")
    return HsCode(digits)


def truncate_code(code: str, digits: int) -> HsCode:
    """Prefix of ``code`` at 2, 4 or 6 digits."""
    code = HsCode(code)
    if digits not in (2, 4, 6):
        raise CodeError(f"truncation length must be 2, 4 or 6, got {digits}")
    if digits > len(code):
        raise CodeError(f"cannot truncate {code} ({len(code)} digits) to {digits} digits")
    return HsCode(code[:digits])


def render_code(code: str) -> str:
    """Dotted display form: "39", "39.19", "3919.90", "3919.9010"."""
    code = HsCode(code)
    if len(code) == 2:
        return str(code)
    if len(code) == 4:
        return f"{code[:2]}.{code[2:]}"
    return f"{code[:4]}.{code[4:]}"

"""Approximate 8-bit multipliers represented as exhaustive error maps.

An error map stores ``e(x, w) = approx(x, w) - x * w`` for every operand pair,
indexed by the raw 8-bit patterns of ``x`` (rows) and ``w`` (columns).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError

BITS = 8
SIZE = 1 << BITS
INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1
HEADER_TAG = "emap-v1"
INDEX_FILE = "index.txt"

_operands = np.arange(SIZE, dtype=np.int64)


class ErrorMapFormatError(DataFormatError):
    """Raised for malformed interchange files; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(message, offset)


class UnsupportedBitWidthError(ErrorMapFormatError):
    pass


@dataclass(frozen=True, eq=False)
class ErrorMap:
    name: str
    errors: np.ndarray
    energy_rel: float = 1.0
    signedness: str = "unsigned"
    bits: int = BITS

    def __post_init__(self):
        if self.bits != BITS:
            raise UnsupportedBitWidthError(f"only {BITS}-bit multipliers are supported, got {self.bits}")
        if self.signedness not in ("unsigned", "signed"):
            raise ValueError(f"signedness must be 'unsigned' or 'signed', got {self.signedness!r}")
        if not re.fullmatch(r"\S+", self.name):
            raise ValueError(f"multiplier name must be a non-empty token without whitespace: {self.name!r}")
        errors = np.asarray(self.errors)
        if errors.shape != (SIZE, SIZE):
            raise ValueError(f"error table must be {SIZE}x{SIZE}, got {errors.shape}")
        if errors.min() < INT32_MIN or errors.max() > INT32_MAX:
            raise ValueError("error table entries must fit in int32")
        if not np.isfinite(self.energy_rel) or self.energy_rel < 0:
            raise ValueError(f"energy_rel must be finite and >= 0, got {self.energy_rel}")
        errors = errors.astype(np.int32, copy=True)
        errors.flags.writeable = False
        object.__setattr__(self, "errors", errors)

    def __eq__(self, other):
        if not isinstance(other, ErrorMap):
            return NotImplemented
        return (
            self.name == other.name
            and self.bits == other.bits
            and self.signedness == other.signedness
            and self.energy_rel == other.energy_rel
            and np.array_equal(self.errors, other.errors)
        )

    __hash__ = object.__hash__

    @property
    def is_accurate(self) -> bool:
        return not self.errors.any()

    def apply(self, x, w):
        """Approximate product ``x * w + e(x, w)`` for operand bit patterns."""
        return apply(self, x, w)


def apply(emap: ErrorMap, x, w):
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    if np.any((x < 0) | (x >= SIZE) | (w < 0) | (w >= SIZE)):
        raise ValueError("operands must be in [0, 255]")
    exact = _exact_products(emap, x, w)
    out = exact + emap.errors[x, w].astype(np.int64)
    return out if out.ndim else int(out)


def _exact_products(emap, x, w):
    if emap.signedness == "signed":
        # two's-complement bit patterns
        x = np.where(x >= SIZE // 2, x - SIZE, x)
        w = np.where(w >= SIZE // 2, w - SIZE, w)
    return x * w


def gen_accurate() -> ErrorMap:
    return ErrorMap("accurate", np.zeros((SIZE, SIZE), dtype=np.int32), energy_rel=1.0)


def gen_truncated(t: int, energy_rel: float, name: str | None = None) -> ErrorMap:
    """Drop the ``t`` low bits of both operands: ``((x>>t) * (w>>t)) << 2t``."""
    if not isinstance(t, (int, np.integer)) or not 1 <= t <= 7:
        raise ValueError(f"truncation must be an integer in 1..7, got {t!r}")
    x = _operands[:, None]
    w = _operands[None, :]
    approx = ((x >> t) * (w >> t)) << (2 * t)
    return ErrorMap(name or f"trunc{t}", approx - x * w, energy_rel=energy_rel)


def mitchell_product(x, w):
    """Mitchell's logarithmic product on non-negative integers, computed exactly.

    With ``x = 2**k1 * (1 + f1)`` and ``w = 2**k2 * (1 + f2)`` the log-domain sum
    ``k1 + k2 + f1 + f2`` is mapped back through the piecewise-linear antilog.
    Both branches reduce to integer arithmetic, so no rounding is involved.
    """
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    safe_x = np.maximum(x, 1)
    safe_w = np.maximum(w, 1)
    k1 = np.floor(np.log2(safe_x)).astype(np.int64)
    k2 = np.floor(np.log2(safe_w)).astype(np.int64)
    p1 = np.left_shift(1, k1)
    p2 = np.left_shift(1, k2)
    # mantissa sum scaled by 2**(k1+k2)
    frac = (x - p1) * p2 + (w - p2) * p1
    carry = frac >= p1 * p2
    out = np.where(carry, 2 * frac, p1 * p2 + frac)
    return np.where((x == 0) | (w == 0), 0, out)


def gen_mitchell(energy_rel: float, name: str = "mitchell") -> ErrorMap:
    x = _operands[:, None]
    w = _operands[None, :]
    return ErrorMap(name, mitchell_product(x, w) - x * w, energy_rel=energy_rel)


# Nominal relative energies for the builtin families. Truncation keeps
# (8 - t)**2 of the 64 partial-product bits; the Mitchell figure is a rough
# log-multiplier estimate. Replace with characterized values when available.
BUILTIN_ENERGY = {
    "accurate": 1.0,
    **{f"trunc{t}": ((8 - t) / 8) ** 2 for t in range(1, 8)},
    "mitchell": 0.45,
}


def builtin(name: str, energy_rel: float | None = None) -> ErrorMap:
    energy = BUILTIN_ENERGY.get(name) if energy_rel is None else energy_rel
    if name == "accurate":
        m = gen_accurate()
        return m if energy_rel is None else ErrorMap(m.name, m.errors, energy_rel)
    if name == "mitchell":
        return gen_mitchell(energy)
    match = re.fullmatch(r"trunc([1-7])", name)
    if match:
        return gen_truncated(int(match.group(1)), energy)
    raise KeyError(f"unknown builtin multiplier {name!r}")


@dataclass
class MultiplierLibrary:
    entries: list[ErrorMap]
    source: str = "builtin"
    _by_name: dict = field(init=False, repr=False)

    def __post_init__(self):
        if not self.entries:
            raise ValueError("multiplier library is empty")
        names = [m.name for m in self.entries]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate multiplier names in library: {names}")
        if len({(m.bits, m.signedness) for m in self.entries}) != 1:
            raise ValueError("all library entries must share bit width and signedness")
        self._by_name = {m.name: m for m in self.entries}

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name: str) -> ErrorMap:
        return self._by_name[name]

    def __contains__(self, name):
        return name in self._by_name

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.entries]

    def with_accurate(self) -> MultiplierLibrary:
        """Library guaranteed to contain a zero-error multiplier (prepended if missing)."""
        if any(m.is_accurate for m in self.entries):
            return self
        acc = gen_accurate()
        if acc.name in self._by_name:
            acc = ErrorMap("accurate_ref", acc.errors, 1.0)
        return MultiplierLibrary([acc, *self.entries], self.source)


def builtin_library() -> MultiplierLibrary:
    return MultiplierLibrary([builtin(n) for n in BUILTIN_ENERGY], source="builtin")


# ---------------------------------------------------------------------------
# interchange format


def dumps_error_map(emap: ErrorMap) -> str:
    header = f"{HEADER_TAG} {emap.name} {emap.bits} {emap.signedness} {emap.energy_rel!r}\n"
    rows = "\n".join(" ".join(map(str, row)) for row in emap.errors.tolist())
    return header + rows + "\n"


def save_error_map(emap: ErrorMap, path) -> None:
    Path(path).write_text(dumps_error_map(emap), encoding="ascii")


_TOKEN = re.compile(rb"\S+")


def loads_error_map(data: bytes | str) -> ErrorMap:
    if isinstance(data, str):
        data = data.encode()
    nl = data.find(b"\n")
    header_end = len(data) if nl < 0 else nl
    try:
        header = data[:header_end].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise ErrorMapFormatError("header is not ASCII", exc.start) from None
    if len(header) != 5 or header[0] != HEADER_TAG:
        raise ErrorMapFormatError(f"expected header '{HEADER_TAG} <name> <bits> <signedness> <energy_rel>'", 0)
    _, name, bits, signedness, energy = header
    try:
        bits = int(bits)
    except ValueError:
        raise ErrorMapFormatError(f"bit width {bits!r} is not an integer", 0) from None
    if bits != BITS:
        raise UnsupportedBitWidthError(f"unsupported bit width {bits}", 0)
    if signedness not in ("unsigned", "signed"):
        raise ErrorMapFormatError(f"bad signedness {signedness!r}", 0)
    try:
        energy_rel = float(energy)
    except ValueError:
        raise ErrorMapFormatError(f"energy_rel {energy!r} is not a number", 0) from None
    if not np.isfinite(energy_rel) or energy_rel < 0:
        raise ErrorMapFormatError(f"energy_rel must be finite and >= 0, got {energy}", 0)

    body_start = header_end + 1
    tokens = [(m.start(), m.group()) for m in _TOKEN.finditer(data, body_start)]
    if len(tokens) != SIZE * SIZE:
        offset = tokens[SIZE * SIZE][0] if len(tokens) > SIZE * SIZE else len(data)
        raise ErrorMapFormatError(f"expected {SIZE * SIZE} table entries, found {len(tokens)}", offset)
    values = np.empty(SIZE * SIZE, dtype=np.int64)
    for i, (offset, tok) in enumerate(tokens):
        if not re.fullmatch(rb"[+-]?\d+", tok):
            raise ErrorMapFormatError(f"entry {i} ({tok[:20]!r}) is not an integer", offset)
        v = int(tok)
        if not INT32_MIN <= v <= INT32_MAX:
            raise ErrorMapFormatError(f"entry {i} overflows int32", offset)
        values[i] = v
    return ErrorMap(name, values.reshape(SIZE, SIZE), energy_rel=energy_rel, signedness=signedness, bits=bits)


def load_error_map(path) -> ErrorMap:
    return loads_error_map(Path(path).read_bytes())


def save_library(library: MultiplierLibrary, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    filenames = []
    for emap in library:
        fname = f"{emap.name}.emap"
        save_error_map(emap, directory / fname)
        filenames.append(fname)
    (directory / INDEX_FILE).write_text("\n".join(filenames) + "\n")
    return directory


def load_library(directory) -> MultiplierLibrary:
    directory = Path(directory)
    index = directory / INDEX_FILE
    if not index.exists():
        raise FileNotFoundError(f"library index {index} not found")
    names = [ln.strip() for ln in index.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    return MultiplierLibrary([load_error_map(directory / n) for n in names], source=str(directory))

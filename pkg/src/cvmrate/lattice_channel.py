"""Two-dimensional finite-state input channels with memory.

An ``N x N`` lattice of input symbols ``d`` is observed through a sparse
interference matrix ``S`` plus white Gaussian noise, ``y = S d + v``.  Each
output sees its own symbol with unit gain and every lattice neighbor, taken
from a fixed offset set, with gain ``alpha``.  The boundary is open: neighbors
that fall outside the lattice are simply absent.

Variables are indexed in raster (row-major) order, ``index = row * N + col``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .rng import CounterStream, derive_seed


class InvalidSpecError(ValueError):
    """A lattice, prior, or channel parameter is outside its valid range."""


class Topology(enum.Enum):
    ISI4 = "isi"
    HEX6 = "hex"

    @classmethod
    def parse(cls, text: str | Topology) -> Topology:
        if isinstance(text, Topology):
            return text
        key = str(text).strip().lower()
        for t in cls:
            if key in (t.value, t.name.lower()):
                return t
        raise InvalidSpecError(f"unknown topology {text!r} (expected 'isi' or 'hex')")


_OFFSETS = {
    Topology.ISI4: ((-1, 0), (1, 0), (0, -1), (0, 1)),
    # axial embedding of the hexagonal lattice: one diagonal pair only
    Topology.HEX6: ((-1, 0), (1, 0), (0, -1), (0, 1), (1, -1), (-1, 1)),
}


def neighbor_offsets(topology: Topology | str) -> tuple[tuple[int, int], ...]:
    """Interfering neighbor displacements ``(d_row, d_col)`` for a topology."""
    return _OFFSETS[Topology.parse(topology)]


@dataclass(frozen=True)
class LatticeSpec:
    topology: Topology
    size_n: int
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "topology", Topology.parse(self.topology))
        if int(self.size_n) != self.size_n or self.size_n < 3:
            raise InvalidSpecError(
                f"size_n must be an integer >= 3 so a 3x3 window fits, got {self.size_n}"
            )
        if not math.isfinite(self.alpha) or abs(self.alpha) > 1.0:
            raise InvalidSpecError(f"|alpha| must be <= 1, got {self.alpha}")

    @property
    def n_vars(self) -> int:
        return self.size_n * self.size_n

    def site(self, index: int) -> tuple[int, int]:
        return divmod(index, self.size_n)

    def index(self, row: int, col: int) -> int:
        return row * self.size_n + col


@dataclass(frozen=True)
class InterferenceMatrix:
    """Sparse ``N^2 x N^2`` matrix ``S`` held as CSR."""

    n_vars: int
    matrix: sp.csr_matrix = field(repr=False)

    def row(self, k: int) -> dict[int, float]:
        lo, hi = self.matrix.indptr[k], self.matrix.indptr[k + 1]
        return {int(j): float(v) for j, v in zip(self.matrix.indices[lo:hi], self.matrix.data[lo:hi])}

    def rows(self) -> list[list[tuple[int, float]]]:
        return [sorted(self.row(k).items()) for k in range(self.n_vars)]

    def support(self, k: int) -> tuple[int, ...]:
        lo, hi = self.matrix.indptr[k], self.matrix.indptr[k + 1]
        return tuple(sorted(int(j) for j in self.matrix.indices[lo:hi]))

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, x):
        return self.matrix @ x

    @classmethod
    def from_dense(cls, a) -> InterferenceMatrix:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if a.shape[0] != a.shape[1]:
            raise InvalidSpecError(f"interference matrix must be square, got {a.shape}")
        return cls(a.shape[0], sp.csr_matrix(a))


def build_interference_matrix(spec: LatticeSpec) -> InterferenceMatrix:
    n = spec.size_n
    offsets = neighbor_offsets(spec.topology)
    rows, cols, vals = [], [], []
    for r in range(n):
        for c in range(n):
            k = r * n + c
            rows.append(k)
            cols.append(k)
            vals.append(1.0)
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if 0 <= rr < n and 0 <= cc < n:
                    rows.append(k)
                    cols.append(rr * n + cc)
                    vals.append(float(spec.alpha))
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n * n, n * n))
    m.eliminate_zeros()
    m.sort_indices()
    s = InterferenceMatrix(n * n, m)
    _check_window_fit(spec, s)
    return s


def _check_window_fit(spec: LatticeSpec, s: InterferenceMatrix, window: int = 3) -> None:
    # every observation scope must fit a window x window block or the default regions cannot cover it
    for k in range(s.n_vars):
        sites = [spec.site(j) for j in s.support(k)]
        rs = [a for a, _ in sites]
        cs = [b for _, b in sites]
        if max(rs) - min(rs) >= window or max(cs) - min(cs) >= window:
            raise AssertionError(f"row {k} of S spans more than a {window}x{window} window")


def snr_to_sigma2(snr_db: float) -> float:
    """Noise variance for unit-energy symbols, ``SNR = 1 / sigma2``."""
    return 10.0 ** (-float(snr_db) / 10.0)


@dataclass(frozen=True)
class InputPrior:
    alphabet: tuple[float, ...] = (1.0, -1.0)
    probabilities: tuple[float, ...] = (0.5, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "alphabet", tuple(float(a) for a in self.alphabet))
        object.__setattr__(self, "probabilities", tuple(float(p) for p in self.probabilities))
        if len(self.alphabet) == 0 or len(self.alphabet) != len(self.probabilities):
            raise InvalidSpecError("alphabet and probabilities must be nonempty and the same length")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise InvalidSpecError("alphabet values must be distinct")
        if any(p < 0 or not math.isfinite(p) for p in self.probabilities):
            raise InvalidSpecError("probabilities must be finite and nonnegative")
        if abs(math.fsum(self.probabilities) - 1.0) > 1e-12:
            raise InvalidSpecError(f"probabilities sum to {math.fsum(self.probabilities)}, not 1")

    @classmethod
    def uniform_binary(cls) -> InputPrior:
        return cls()

    @classmethod
    def binomial(cls, users: int) -> InputPrior:
        """Sum of ``users`` equiprobable +-1 symbols: ``users + 1`` levels."""
        if users < 1:
            raise InvalidSpecError("binomial prior needs at least one user")
        values = tuple(float(users - 2 * j) for j in range(users + 1))
        probs = tuple(math.comb(users, j) / 2.0**users for j in range(users + 1))
        return cls(values, probs)

    @classmethod
    def parse(cls, text: str) -> InputPrior:
        """Parse ``binary``, ``binomial:K`` or ``v1,v2,...:p1,p2,...``."""
        t = text.strip().lower()
        if t in ("binary", "uniform", "binary-uniform"):
            return cls.uniform_binary()
        if t.startswith("binomial:"):
            return cls.binomial(int(t.split(":", 1)[1]))
        try:
            vals, probs = t.split(":")
            return cls(tuple(float(v) for v in vals.split(",")), tuple(float(p) for p in probs.split(",")))
        except ValueError as exc:
            raise InvalidSpecError(f"cannot parse prior {text!r}") from exc

    @property
    def label(self) -> str:
        if self == InputPrior.uniform_binary():
            return "binary"
        vals = ",".join(format(v, "g") for v in self.alphabet)
        probs = ",".join(format(p, ".17g") for p in self.probabilities)
        return f"{vals}:{probs}"

    @property
    def is_uniform_binary(self) -> bool:
        return sorted(self.alphabet) == [-1.0, 1.0] and self.probabilities == (0.5, 0.5)


def sample_symbols(prior: InputPrior, count: int, stream: CounterStream) -> np.ndarray:
    """I.i.d. draws from ``prior`` by inverse CDF on the stream's uniforms."""
    if count < 1:
        raise InvalidSpecError("count must be >= 1")
    cdf = np.cumsum(prior.probabilities)
    cdf[-1] = 1.0
    u = stream.uniform(count)
    idx = np.searchsorted(cdf, u, side="right")
    return np.asarray(prior.alphabet)[np.minimum(idx, len(cdf) - 1)]


def simulate_observation(s: InterferenceMatrix, symbols, sigma2: float, stream: CounterStream) -> np.ndarray:
    symbols = np.asarray(symbols, dtype=float)
    if symbols.shape != (s.n_vars,):
        raise InvalidSpecError(f"symbols have shape {symbols.shape}, expected ({s.n_vars},)")
    if not sigma2 > 0:
        raise InvalidSpecError("sigma2 must be positive")
    return s @ symbols + math.sqrt(sigma2) * stream.normal(s.n_vars)


@dataclass(frozen=True)
class ChannelRealization:
    spec: LatticeSpec
    symbols: np.ndarray = field(repr=False)
    sigma2: float
    observations: np.ndarray = field(repr=False)
    seed: int


# stream ids under a trial seed
SYMBOL_STREAM = 0
NOISE_STREAM = 1


def realize_channel(
    spec: LatticeSpec,
    sigma2: float,
    seed: int,
    prior: InputPrior | None = None,
    s: InterferenceMatrix | None = None,
) -> ChannelRealization:
    """Draw symbols and noise for one trial from two sub-streams of ``seed``.

    The noise stream produces standard normals scaled by ``sqrt(sigma2)``, so
    the same seed at different SNRs shares both the symbols and the noise shape.
    """
    prior = prior or InputPrior.uniform_binary()
    s = s or build_interference_matrix(spec)
    d = sample_symbols(prior, spec.n_vars, CounterStream(derive_seed(seed, SYMBOL_STREAM)))
    y = simulate_observation(s, d, sigma2, CounterStream(derive_seed(seed, NOISE_STREAM)))
    return ChannelRealization(spec, d, float(sigma2), y, int(seed))

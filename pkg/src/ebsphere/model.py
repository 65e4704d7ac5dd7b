"""Physical parameters, divisors and closed-form scalar formulas."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import ModeError, StabilityError, ValidationError


class Mode(str, enum.Enum):
    COMPACT_SPHERE = "compact"
    PLANAR = "planar"


class StabilityClass(str, enum.Enum):
    STABLE = "stable"
    STRICTLY_POLYSTABLE = "strictly_polystable"
    UNSTABLE = "unstable"


class _Infinity:
    """The point at infinity of P^1. Use the module-level ``INF``."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INF"

    def __reduce__(self):
        return (_Infinity, ())


INF = _Infinity()


def is_infinity(p) -> bool:
    return p is INF


@dataclass(frozen=True)
class ModelParams:
    """Constants (tau, N, alpha).

    Use :meth:`compact` for the sphere, where alpha is always derived from
    ``alpha * tau * N = 1``, and :meth:`planar` for the CHMY problem on C
    (tau = 1, alpha = a / 2).
    """

    tau: float
    N: int
    alpha: float
    mode: Mode = Mode.COMPACT_SPHERE

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if int(self.N) != self.N or self.N < 1:
            raise ValidationError(f"N must be a positive integer, got {self.N}")
        if self.mode is Mode.COMPACT_SPHERE:
            expected = 1.0 / (self.tau * self.N)
            if not math.isclose(self.alpha, expected, rel_tol=1e-14):
                raise ValidationError(
                    f"compact mode requires alpha*tau*N = 1 (alpha={self.alpha}, expected {expected})"
                )
        else:
            if not self.alpha >= 0:
                raise ValidationError("alpha must be nonnegative")
            aN = 2 * self.alpha * self.N
            if not (0 <= aN < 1):
                raise ValidationError(f"planar mode requires a*N in [0, 1), got {aN}")

    @classmethod
    def compact(cls, tau: float = 1.0, N: int = 2) -> "ModelParams":
        return cls(tau=float(tau), N=int(N), alpha=1.0 / (float(tau) * int(N)))

    @classmethod
    def planar(cls, a: float, N: int = 1) -> "ModelParams":
        return cls(tau=1.0, N=int(N), alpha=float(a) / 2.0, mode=Mode.PLANAR)

    @property
    def a(self) -> float:
        return 2.0 * self.alpha

    @property
    def half_N(self) -> int:
        if self.N % 2:
            raise ModeError(f"N must be even for the symmetric problem, got N={self.N}")
        return self.N // 2

    def require_compact(self):
        if self.mode is not Mode.COMPACT_SPHERE:
            raise ModeError("operation requires CompactSphere mode")

    def to_dict(self) -> dict:
        return {"tau": self.tau, "N": self.N, "alpha": self.alpha, "mode": self.mode.value}


def _as_point(p):
    if p is INF or (isinstance(p, str) and p.lower() in ("inf", "infinity", "oo")):
        return INF
    z = complex(p)
    if not (math.isfinite(z.real) and math.isfinite(z.imag)):
        raise ValidationError(f"finite points must be finite complex numbers, got {p!r}")
    return z


@dataclass(frozen=True)
class Divisor:
    """Zeros of the Higgs field with multiplicities; ``INF`` marks the point at infinity."""

    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        cleaned = []
        for p, m in self.entries:
            if int(m) != m or m < 1:
                raise ValidationError(f"multiplicities must be positive integers, got {m}")
            cleaned.append((_as_point(p), int(m)))
        finite = [p for p, _ in cleaned if p is not INF]
        if len(finite) != len(set(finite)) or sum(p is INF for p, _ in cleaned) > 1:
            raise ValidationError("divisor points must be pairwise distinct")
        object.__setattr__(self, "entries", tuple(cleaned))

    @classmethod
    def from_pairs(cls, pairs: Iterable) -> "Divisor":
        return cls(tuple(pairs))

    @classmethod
    def roots_of_unity(cls, N: int) -> "Divisor":
        pts = [complex(round(math.cos(2 * math.pi * k / N), 15), round(math.sin(2 * math.pi * k / N), 15))
               for k in range(N)]
        return cls(tuple((p, 1) for p in pts))

    @classmethod
    def polystable_pair(cls, half_N: int) -> "Divisor":
        """N' * 0 + N' * infinity, the divisor of z0^N' z1^N'."""
        return cls(((0j, half_N), (INF, half_N)))

    @property
    def total(self) -> int:
        return sum(m for _, m in self.entries)

    @property
    def points(self):
        return [p for p, _ in self.entries]

    @property
    def multiplicities(self):
        return [m for _, m in self.entries]

    @property
    def finite_entries(self):
        return [(p, m) for p, m in self.entries if p is not INF]

    @property
    def mult_at_infinity(self) -> int:
        return sum(m for p, m in self.entries if p is INF)

    def permuted(self, order: Sequence[int]) -> "Divisor":
        return Divisor(tuple(self.entries[i] for i in order))

    def to_records(self) -> list:
        out = []
        for p, m in self.entries:
            if p is INF:
                out.append({"infinity": True, "mult": m})
            else:
                out.append({"re": p.real, "im": p.imag, "mult": m})
        return out

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "Divisor":
        pairs = []
        for i, rec in enumerate(records):
            if not isinstance(rec, dict) or "mult" not in rec:
                raise ValidationError(f"divisor[{i}]: expected a record with 'mult'")
            if rec.get("infinity"):
                pairs.append((INF, rec["mult"]))
            else:
                try:
                    pairs.append((complex(float(rec["re"]), float(rec.get("im", 0.0))), rec["mult"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ValidationError(f"divisor[{i}]: bad finite point ({exc})") from None
        return cls(tuple(pairs))


def _check_consistent(divisor: Divisor, params: ModelParams):
    if divisor.total != params.N:
        raise ValidationError(
            f"divisor total multiplicity {divisor.total} does not match N={params.N}"
        )


def classify_divisor(divisor: Divisor, params: ModelParams) -> StabilityClass:
    _check_consistent(divisor, params)
    N = params.N
    mults = divisor.multiplicities
    if all(2 * m < N for m in mults):
        return StabilityClass.STABLE
    if len(mults) == 2 and all(2 * m == N for m in mults):
        return StabilityClass.STRICTLY_POLYSTABLE
    return StabilityClass.UNSTABLE


def admissible_lower_bound(params: ModelParams) -> float:
    """Infimum 4 pi N / tau of the volumes of solutions on P^1."""
    params.require_compact()
    return 4.0 * math.pi * params.N / params.tau


def lambda_critical(params: ModelParams) -> float:
    """1 / (N e^{2 alpha}): limit of ``lambda_of_b`` as b -> 0+."""
    params.require_compact()
    return 1.0 / (params.N * math.exp(2.0 * params.alpha))


def lambda_of_b(b: float, params: ModelParams) -> float:
    """Temper of the S^1-symmetric solution with u(0) = -b (ODE normalisation)."""
    params.require_compact()
    Np = params.half_N
    if b < 0:
        raise ValidationError("b must be positive")
    return 1.0 / (2 * Np * math.exp(2.0 * params.alpha * (b + math.exp(-b))))


# The ODE temper multiplies the cylinder metric dt^2 + dtheta^2 directly, while
# the PDE temper multiplies the Fubini-Study form, which carries the factor 2 of
# i dz ^ dzbar = 2 dx ^ dy.  Same metric <=> lambda_pde = 2 lambda_ode.
def ode_to_pde_lambda(lam_ode: float) -> float:
    return 2.0 * lam_ode


def pde_to_ode_lambda(lam_pde: float) -> float:
    return 0.5 * lam_pde


def cone_angles(divisor: Divisor, params: ModelParams) -> list:
    """Exact cone angles beta_j = 1 - 2 n_j / N (as fractions) of the limiting cone metric."""
    cls = classify_divisor(divisor, params)
    if cls is not StabilityClass.STABLE:
        raise StabilityError(f"cone angles need a stable divisor (got {cls.value})")
    return [1 - Fraction(2 * m, params.N) for m in divisor.multiplicities]


def injectivity_reference_constants(params: ModelParams) -> dict:
    """Reference values pi/sqrt((3+2 alpha tau) tau / 2) and pi/sqrt(alpha tau^2); not computed from solutions."""
    a, t = params.alpha, params.tau
    return {
        "pi_over_sqrt_3_plus_2at_tau_half": math.pi / math.sqrt((3 + 2 * a * t) * t / 2),
        "pi_over_sqrt_a_tau2": math.pi / math.sqrt(a * t * t),
    }

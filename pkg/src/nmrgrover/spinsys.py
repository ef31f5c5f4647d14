"""Physical layer: rotating-frame spin dynamics, pulses, and error channels.

Dynamics are simulated in a multiple rotating frame (one frame per
spin), so free precession drops out and only the scalar couplings
J_ij (Hz) evolve between pulses.  RF pulses are hard (instantaneous)
rotations; each carries a nominal duration, 10 us per 90 degrees by
default, that is seen only by the T2 dephasing channel and by the
cumulative-duration signal-retention reference curve.

A ``JEvolution`` op is an ideal refocused evolution: only the selected
pair's coupling acts for its duration.  ``expand_refocusing`` in the
compiler replaces it with delays and explicit 180-degree pulse pairs
(phases x, -x) so that RF error models can act on the refocusing
pulses; with perfect pulses both forms are exactly equivalent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .qcore import (
    IX,
    IY,
    IZ,
    DensityMatrix,
    embed_single_spin,
    kron_all,
)

PULSE_90_DURATION_S = 10e-6

# Five-point symmetric RF-amplitude distribution.  The spread is chosen
# so that one 90-degree pulse retains 95% of the ideal transverse
# amplitude: with weights (.1,.2,.4,.2,.1) on scales 1+k*delta,
# k=-2..2, retention = .4 + .4*cos(u) + .2*cos(2u) with u=delta*pi/2,
# and retention = 0.95 solves to cos(u) = (sqrt(8.5)-1)/2.
_RF_DELTA = (2.0 / math.pi) * math.acos((math.sqrt(8.5) - 1.0) / 2.0)
DEFAULT_RF_ENSEMBLE = (
    (1.0 - 2.0 * _RF_DELTA, 0.1),
    (1.0 - _RF_DELTA, 0.2),
    (1.0, 0.4),
    (1.0 + _RF_DELTA, 0.2),
    (1.0 + 2.0 * _RF_DELTA, 0.1),
)


@dataclass(frozen=True, eq=False)
class SpinSystemConfig:
    """Static description of the spin system and its imperfections."""

    n: int
    names: tuple[str, ...]
    j_coupling: np.ndarray  # n x n symmetric, Hz, zero diagonal
    t2: tuple[float, ...]  # seconds
    gamma_rel: tuple[float, ...]  # relative gyromagnetic ratios
    rf_ensemble: tuple[tuple[float, float], ...] = DEFAULT_RF_ENSEMBLE
    polarization: float = 1e-5
    pulse_90_duration_s: float = PULSE_90_DURATION_S

    def __post_init__(self):
        j = np.asarray(self.j_coupling, dtype=float)
        if j.shape != (self.n, self.n):
            raise ValueError(f"j_coupling must be {self.n}x{self.n}")
        if np.max(np.abs(j - j.T)) > 0:
            raise ValueError("j_coupling must be symmetric")
        if np.max(np.abs(np.diag(j))) > 0:
            raise ValueError("j_coupling diagonal must be zero")
        object.__setattr__(self, "j_coupling", j)
        if len(self.names) != self.n or len(self.t2) != self.n:
            raise ValueError("names and t2 must have one entry per spin")
        if len(self.gamma_rel) != self.n:
            raise ValueError("gamma_rel must have one entry per spin")
        if any(t <= 0 for t in self.t2):
            raise ValueError("t2 entries must be positive")
        if any(g <= 0 for g in self.gamma_rel):
            raise ValueError("gamma_rel entries must be positive")
        weights = [w for _, w in self.rf_ensemble]
        if any(w <= 0 for w in weights):
            raise ValueError("rf_ensemble weights must be positive")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ValueError("rf_ensemble weights must sum to 1")

    @classmethod
    def default(cls) -> "SpinSystemConfig":
        """H-F-C system: J_HC=224, J_HF=50, J_FC=-311 Hz; T2(C)=0.65 s."""
        j = np.array(
            [
                [0.0, 50.0, 224.0],
                [50.0, 0.0, -311.0],
                [224.0, -311.0, 0.0],
            ]
        )
        return cls(
            n=3,
            names=("H", "F", "C"),
            j_coupling=j,
            t2=(1.0, 1.0, 0.65),
            gamma_rel=(1.0, 0.94, 0.25),
        )

    def j(self, a: int, b: int) -> float:
        return float(self.j_coupling[a, b])

    @property
    def dim(self) -> int:
        return 2**self.n

    def pairs(self) -> list[tuple[int, int]]:
        return [
            (a, b)
            for a in range(self.n)
            for b in range(a + 1, self.n)
            if self.j_coupling[a, b] != 0.0
        ]


def _norm_pair(pair: Sequence[int]) -> tuple[int, int]:
    a, b = int(pair[0]), int(pair[1])
    if a == b:
        raise ValueError("coupling pair must use two distinct spins")
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class RfPulse:
    """Hard transverse pulse: rotation by angle_deg about the axis at
    phase_deg in the x-y plane (phase 0 = x, 90 = y)."""

    spin: int
    phase_deg: float
    angle_deg: float

    def __post_init__(self):
        if not -360.0 < self.angle_deg <= 360.0:
            raise ValueError(f"angle {self.angle_deg} outside (-360, 360]")
        if not 0.0 <= self.phase_deg < 360.0:
            raise ValueError(f"phase {self.phase_deg} outside [0, 360)")


@dataclass(frozen=True)
class ZRotation:
    """Virtual z rotation used as compiler IR.

    Executable exactly in error-free runs; programs destined for RF
    error models must be lowered to transverse pulses first.
    """

    spin: int
    angle_deg: float


@dataclass(frozen=True)
class JEvolution:
    """Ideal refocused evolution of one pair for fraction/|J| seconds."""

    pair: tuple[int, int]
    fraction: Fraction

    def __post_init__(self):
        object.__setattr__(self, "pair", _norm_pair(self.pair))
        frac = Fraction(self.fraction)
        if frac not in (Fraction(1, 2), Fraction(1, 4)):
            raise ValueError(f"unsupported evolution fraction {frac}")
        object.__setattr__(self, "fraction", frac)


@dataclass(frozen=True)
class Delay:
    """Free evolution under the listed active couplings."""

    duration_s: float
    active_couplings: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.duration_s < 0:
            raise ValueError("delay duration must be nonnegative")
        object.__setattr__(
            self,
            "active_couplings",
            frozenset(_norm_pair(p) for p in self.active_couplings),
        )


PulseOp = Union[RfPulse, ZRotation, JEvolution, Delay]


@dataclass(frozen=True)
class PulseProgram:
    ops: tuple[PulseOp, ...]
    n: int
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        for op in self.ops:
            spins = op_spins(op)
            if spins and max(spins) >= self.n:
                raise ValueError(f"op {op} references spin outside n={self.n}")

    def __len__(self) -> int:
        return len(self.ops)


def op_spins(op: PulseOp) -> tuple[int, ...]:
    if isinstance(op, (RfPulse, ZRotation)):
        return (op.spin,)
    if isinstance(op, JEvolution):
        return op.pair
    return tuple(sorted({s for p in op.active_couplings for s in p}))


def op_duration(op: PulseOp, cfg: SpinSystemConfig) -> float:
    if isinstance(op, RfPulse):
        return abs(op.angle_deg) / 90.0 * cfg.pulse_90_duration_s
    if isinstance(op, ZRotation):
        return 0.0
    if isinstance(op, JEvolution):
        j = cfg.j(*op.pair)
        if j == 0.0:
            raise ValueError(f"pair {op.pair} has zero coupling")
        return float(op.fraction) / abs(j)
    return op.duration_s


def program_duration(program: PulseProgram, cfg: SpinSystemConfig) -> float:
    return sum(op_duration(op, cfg) for op in program.ops)


@dataclass(frozen=True)
class ErrorModel:
    """RF-amplitude error mode plus optional T2 dephasing."""

    rf_mode: str = "none"  # none | static_ensemble | per_pulse_stochastic
    loss_per_90deg: float = 0.05
    seed: int = 0
    t2_enabled: bool = False

    def __post_init__(self):
        if self.rf_mode not in ("none", "static_ensemble", "per_pulse_stochastic"):
            raise ValueError(f"unknown rf_mode {self.rf_mode!r}")
        if not 0.0 <= self.loss_per_90deg < 0.5:
            raise ValueError("loss_per_90deg must be in [0, 0.5)")

    @classmethod
    def none(cls) -> "ErrorModel":
        return cls()

    @classmethod
    def static(cls, t2_enabled: bool = False) -> "ErrorModel":
        return cls(rf_mode="static_ensemble", t2_enabled=t2_enabled)

    @classmethod
    def stochastic(
        cls, loss_per_90deg: float = 0.05, seed: int = 0, t2_enabled: bool = False
    ) -> "ErrorModel":
        return cls(
            rf_mode="per_pulse_stochastic",
            loss_per_90deg=loss_per_90deg,
            seed=seed,
            t2_enabled=t2_enabled,
        )

    @classmethod
    def t2_only(cls) -> "ErrorModel":
        return cls(t2_enabled=True)

    def with_seed(self, seed: int) -> "ErrorModel":
        return replace(self, seed=seed)


def stochastic_sigma(loss_per_90deg: float) -> float:
    """Std dev of the Gaussian per-pulse angle-scale error.

    Chosen so the expected transverse retention of one 90-degree pulse,
    E[cos(eps*pi/2)] = exp(-(pi/2)^2 sigma^2 / 2), equals 1 - loss.
    """
    if loss_per_90deg == 0.0:
        return 0.0
    return math.sqrt(-8.0 * math.log(1.0 - loss_per_90deg)) / math.pi


def rotation_2x2(phase_deg: float, angle_deg: float, scale: float = 1.0) -> np.ndarray:
    """exp(-i * scale*angle * (Ix cos(phase) + Iy sin(phase)))."""
    theta = math.radians(angle_deg) * scale
    phi = math.radians(phase_deg)
    axis = math.cos(phi) * IX + math.sin(phi) * IY
    # axis has eigenvalues +-1/2, so the exponential has a closed form.
    return math.cos(theta / 2.0) * np.eye(2) - 2j * math.sin(theta / 2.0) * axis


def rf_propagator(
    cfg: SpinSystemConfig,
    spin: int,
    phase_deg: float,
    angle_deg: float,
    scale: float = 1.0,
) -> np.ndarray:
    if scale <= 0:
        raise ValueError("scale must be positive")
    return embed_single_spin(rotation_2x2(phase_deg, angle_deg, scale), spin, cfg.n)


def zrot_diag(n: int, spin: int, angle_deg: float) -> np.ndarray:
    """Diagonal of exp(-i*angle*Iz) embedded at ``spin``."""
    theta = math.radians(angle_deg)
    dim = 2**n
    idx = np.arange(dim)
    bit = (idx >> (n - 1 - spin)) & 1
    m = 0.5 - bit  # Iz eigenvalue: +1/2 for |0>, -1/2 for |1>
    return np.exp(-1j * theta * m)


def coupling_diag(
    cfg: SpinSystemConfig, pairs: Iterable[tuple[int, int]], duration_s: float
) -> np.ndarray:
    """Diagonal of exp(-i * 2*pi * sum_pairs J*t * Iz_a Iz_b)."""
    dim = cfg.dim
    phase = np.zeros(dim)
    idx = np.arange(dim)
    for a, b in pairs:
        a, b = _norm_pair((a, b))
        ma = 0.5 - ((idx >> (cfg.n - 1 - a)) & 1)
        mb = 0.5 - ((idx >> (cfg.n - 1 - b)) & 1)
        phase += 2.0 * math.pi * cfg.j(a, b) * duration_s * ma * mb
    return np.exp(-1j * phase)


def coupling_propagator(
    cfg: SpinSystemConfig, pair: Sequence[int], duration_s: float
) -> np.ndarray:
    return np.diag(coupling_diag(cfg, [_norm_pair(pair)], duration_s))


def dephasing_factors(cfg: SpinSystemConfig, duration_s: float) -> np.ndarray:
    """Elementwise decay factors of the product single-spin T2 channels.

    Entry (a, b) is exp(-t * sum_i [a_i != b_i] / T2_i); diagonals are 1.
    """
    dim = cfg.dim
    idx = np.arange(dim)
    rate = np.zeros((dim, dim))
    for i in range(cfg.n):
        bit = (idx >> (cfg.n - 1 - i)) & 1
        differs = bit[:, None] != bit[None, :]
        rate += differs / cfg.t2[i]
    return np.exp(-duration_s * rate)


def dephasing_channel(
    rho: DensityMatrix, cfg: SpinSystemConfig, duration_s: float
) -> DensityMatrix:
    if duration_s == 0.0:
        return rho
    return DensityMatrix(
        rho.matrix * dephasing_factors(cfg, duration_s), validate=False
    )


class _ScaleSource:
    """Per-pulse RF amplitude scale factors for one program execution."""

    def __init__(self, fixed: float = 1.0, rng: Optional[np.random.Generator] = None,
                 sigma: float = 0.0):
        self.fixed = fixed
        self.rng = rng
        self.sigma = sigma

    def next_scale(self) -> float:
        if self.rng is None:
            return self.fixed
        return self.fixed + self.sigma * float(self.rng.standard_normal())


def _execute(
    rho: np.ndarray,
    program: PulseProgram,
    cfg: SpinSystemConfig,
    scales: _ScaleSource,
    t2_enabled: bool,
) -> np.ndarray:
    deph_cache: dict[float, np.ndarray] = {}

    def dephase(mat: np.ndarray, duration: float) -> np.ndarray:
        if not t2_enabled or duration == 0.0:
            return mat
        factors = deph_cache.get(duration)
        if factors is None:
            factors = dephasing_factors(cfg, duration)
            deph_cache[duration] = factors
        return mat * factors

    for op in program.ops:
        if isinstance(op, RfPulse):
            u = rf_propagator(cfg, op.spin, op.phase_deg, op.angle_deg,
                              scales.next_scale())
            rho = u @ rho @ u.conj().T
            rho = dephase(rho, op_duration(op, cfg))
        elif isinstance(op, ZRotation):
            d = zrot_diag(cfg.n, op.spin, op.angle_deg)
            rho = (d[:, None] * rho) * d.conj()[None, :]
        elif isinstance(op, JEvolution):
            d = coupling_diag(cfg, [op.pair], op_duration(op, cfg))
            rho = (d[:, None] * rho) * d.conj()[None, :]
            rho = dephase(rho, op_duration(op, cfg))
        elif isinstance(op, Delay):
            d = coupling_diag(cfg, op.active_couplings, op.duration_s)
            rho = (d[:, None] * rho) * d.conj()[None, :]
            rho = dephase(rho, op.duration_s)
        else:
            raise TypeError(f"unknown pulse op {op!r}")
    return rho


def run_pulse_program(
    rho0: DensityMatrix,
    program: PulseProgram,
    cfg: SpinSystemConfig,
    err: ErrorModel = ErrorModel.none(),
) -> DensityMatrix:
    """Execute a pulse program under the given error model.

    Under ``static_ensemble`` the program runs once per ensemble member
    with that member's fixed RF scale and the weighted average state is
    returned (summation in ensemble order, so results are reproducible).
    Under ``per_pulse_stochastic`` each call is a single noise
    realization drawn from the model's seed; Monte Carlo averaging is
    the caller's loop over seeds.
    """
    if rho0.n != program.n:
        raise ValueError(f"state has n={rho0.n}, program has n={program.n}")
    if err.rf_mode != "none" and any(
        isinstance(op, ZRotation) for op in program.ops
    ):
        raise ValueError(
            "program contains virtual z rotations; lower it to transverse "
            "pulses before running with an RF error model"
        )
    if err.rf_mode == "static_ensemble":
        out = np.zeros_like(rho0.matrix)
        for scale, weight in cfg.rf_ensemble:
            member = _execute(
                rho0.matrix.copy(), program, cfg,
                _ScaleSource(fixed=scale), err.t2_enabled,
            )
            out = out + weight * member
        return DensityMatrix(out, validate=False)
    if err.rf_mode == "per_pulse_stochastic":
        rng = np.random.default_rng(err.seed)
        sigma = stochastic_sigma(err.loss_per_90deg)
        out = _execute(
            rho0.matrix.copy(), program, cfg,
            _ScaleSource(rng=rng, sigma=sigma), err.t2_enabled,
        )
        return DensityMatrix(out, validate=False)
    out = _execute(rho0.matrix.copy(), program, cfg, _ScaleSource(), err.t2_enabled)
    return DensityMatrix(out, validate=False)


def ensemble_signal_retention(
    err: ErrorModel, cfg: SpinSystemConfig, pulses_90_equiv: float
) -> float:
    """Predicted signal retention after a continuous RF drive equal in
    cumulative angle to ``pulses_90_equiv`` 90-degree pulses."""
    if pulses_90_equiv < 0:
        raise ValueError("pulses_90_equiv must be nonnegative")
    if err.rf_mode == "per_pulse_stochastic":
        return (1.0 - err.loss_per_90deg) ** pulses_90_equiv
    if err.rf_mode == "static_ensemble":
        theta = pulses_90_equiv * math.pi / 2.0
        return abs(
            sum(w * math.cos((s - 1.0) * theta) for s, w in cfg.rf_ensemble)
        )
    return 1.0


def static_ensemble_loss_per_90deg(cfg: SpinSystemConfig) -> float:
    """Amplitude loss of one 90-degree pulse under the static ensemble."""
    return 1.0 - sum(
        w * math.cos((s - 1.0) * math.pi / 2.0) for s, w in cfg.rf_ensemble
    )


# ---------------------------------------------------------------------------
# Flat key/value configuration files.
#
# Lines are ``key = value`` with ``#`` comments; values are scalars or
# whitespace-separated arrays.  Coupling entries use pair keys such as
# ``j.H.F``.  Unknown keys are errors.


def config_to_text(cfg: SpinSystemConfig, err: Optional[ErrorModel] = None) -> str:
    lines = [
        "# nmrgrover spin-system configuration",
        f"n = {cfg.n}",
        "names = " + " ".join(cfg.names),
    ]
    for a in range(cfg.n):
        for b in range(a + 1, cfg.n):
            lines.append(f"j.{cfg.names[a]}.{cfg.names[b]} = {cfg.j(a, b):g}")
    lines.append("t2 = " + " ".join(f"{t:g}" for t in cfg.t2))
    lines.append("gamma_rel = " + " ".join(f"{g:g}" for g in cfg.gamma_rel))
    lines.append(
        "rf_scales = " + " ".join(f"{s:.12g}" for s, _ in cfg.rf_ensemble)
    )
    lines.append(
        "rf_weights = " + " ".join(f"{w:.12g}" for _, w in cfg.rf_ensemble)
    )
    lines.append(f"polarization = {cfg.polarization:g}")
    lines.append(f"pulse_90_duration_s = {cfg.pulse_90_duration_s:g}")
    if err is not None:
        lines.append(f"err.rf_mode = {err.rf_mode}")
        lines.append(f"err.loss_per_90deg = {err.loss_per_90deg:g}")
        lines.append(f"err.seed = {err.seed}")
        lines.append(f"err.t2_enabled = {'true' if err.t2_enabled else 'false'}")
    return "\n".join(lines) + "\n"


_KNOWN_SCALAR_KEYS = {
    "n", "polarization", "pulse_90_duration_s",
    "err.rf_mode", "err.loss_per_90deg", "err.seed", "err.t2_enabled",
}
_KNOWN_ARRAY_KEYS = {"names", "t2", "gamma_rel", "rf_scales", "rf_weights"}


def parse_config_text(text: str) -> tuple[SpinSystemConfig, ErrorModel]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in entries:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value

    for key in entries:
        if key in _KNOWN_SCALAR_KEYS or key in _KNOWN_ARRAY_KEYS:
            continue
        if key.startswith("j.") and key.count(".") == 2:
            continue
        raise ValueError(f"unknown configuration key {key!r}")

    if "n" not in entries:
        raise ValueError("missing required key 'n'")
    n = int(entries["n"])
    names = tuple(entries.get("names", " ".join(f"S{i}" for i in range(n))).split())
    if len(names) != n:
        raise ValueError(f"names has {len(names)} entries, expected {n}")
    name_index = {name: i for i, name in enumerate(names)}

    j = np.zeros((n, n))
    for key, value in entries.items():
        if not key.startswith("j."):
            continue
        _, na, nb = key.split(".")
        if na not in name_index or nb not in name_index:
            raise ValueError(f"coupling key {key!r} names unknown spins")
        a, b = name_index[na], name_index[nb]
        j[a, b] = j[b, a] = float(value)

    def floats(key: str, default: Sequence[float]) -> tuple[float, ...]:
        if key not in entries:
            return tuple(default)
        values = tuple(float(x) for x in entries[key].split())
        return values

    t2 = floats("t2", (1.0,) * n)
    gamma = floats("gamma_rel", (1.0,) * n)
    scales = floats("rf_scales", [s for s, _ in DEFAULT_RF_ENSEMBLE])
    weights = floats("rf_weights", [w for _, w in DEFAULT_RF_ENSEMBLE])
    if len(scales) != len(weights):
        raise ValueError("rf_scales and rf_weights must have equal lengths")

    cfg = SpinSystemConfig(
        n=n,
        names=names,
        j_coupling=j,
        t2=t2,
        gamma_rel=gamma,
        rf_ensemble=tuple(zip(scales, weights)),
        polarization=float(entries.get("polarization", 1e-5)),
        pulse_90_duration_s=float(
            entries.get("pulse_90_duration_s", PULSE_90_DURATION_S)
        ),
    )

    t2_flag = entries.get("err.t2_enabled", "false").lower()
    if t2_flag not in ("true", "false"):
        raise ValueError("err.t2_enabled must be true or false")
    err = ErrorModel(
        rf_mode=entries.get("err.rf_mode", "none"),
        loss_per_90deg=float(entries.get("err.loss_per_90deg", 0.05)),
        seed=int(entries.get("err.seed", 0)),
        t2_enabled=t2_flag == "true",
    )
    return cfg, err

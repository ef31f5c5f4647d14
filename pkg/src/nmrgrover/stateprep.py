"""Effective pure states by temporal averaging.

The room-temperature equilibrium state is highly mixed; its traceless
part is a sum of single-spin Iz terms weighted by the relative
gyromagnetic ratios.  A handful of experiments whose circuits permute
the populations (CNOT/NOT only), combined with least-squares weights,
synthesise a state whose deviation behaves like the pure ground state.

Two schemes ship with the package: the exact seven-experiment scheme
(cyclic permutation of all non-ground populations, realised as powers
of an order-7 linear map over GF(2)) and a three-experiment default
found by a small greedy search and frozen below for reproducibility.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .qcore import DensityMatrix
from .spinsys import SpinSystemConfig
from .pulsecomp import Cnot, Gate, GateCircuit, NotGate, parse_circuit_text

NEGATIVITY_TOL = 1e-10


@dataclass(frozen=True)
class EquilibriumState:
    """Thermal populations in the high-temperature linearisation."""

    diag: np.ndarray  # 2^n populations, unit sum
    polarization: float

    def to_density(self) -> DensityMatrix:
        return DensityMatrix(np.diag(self.diag.astype(complex)), validate=False)

    def deviation_diag(self) -> np.ndarray:
        return self.diag - self.diag.sum() / self.diag.size


def equilibrium_state(cfg: SpinSystemConfig) -> EquilibriumState:
    """Populations 1/2^n + eps * sum_i gamma_i * m_i(x), m = +-1/2."""
    dim = cfg.dim
    idx = np.arange(dim)
    diag = np.full(dim, 1.0 / dim)
    for i in range(cfg.n):
        m = 0.5 - ((idx >> (cfg.n - 1 - i)) & 1)
        diag = diag + cfg.polarization * cfg.gamma_rel[i] * m
    return EquilibriumState(diag=diag, polarization=cfg.polarization)


def classical_permutation(circuit: GateCircuit) -> np.ndarray:
    """Basis-state permutation of a CNOT/NOT circuit: state x ends in
    slot perm[x].  Any other gate kind is rejected."""
    n = circuit.n
    perm = np.arange(2**n)
    for gate in circuit.gates:
        if isinstance(gate, NotGate):
            bit = n - 1 - gate.spin
            perm = perm ^ (1 << bit)
        elif isinstance(gate, Cnot):
            cbit, tbit = n - 1 - gate.control, n - 1 - gate.target
            flip = ((perm >> cbit) & 1) << tbit
            perm = perm ^ flip
        else:
            raise ValueError(f"{gate!r} is not a basis-state permutation gate")
    return perm


@dataclass(frozen=True)
class PrepExperiment:
    circuit: GateCircuit
    resulting_diag: np.ndarray


def permuted_populations(
    eq: EquilibriumState, circuit: GateCircuit
) -> PrepExperiment:
    perm = classical_permutation(circuit)
    diag = np.empty_like(eq.diag)
    diag[perm] = eq.diag
    return PrepExperiment(circuit=circuit, resulting_diag=diag)


def target_ground_deviation(cfg: SpinSystemConfig) -> np.ndarray:
    """Deviation diagonal of the effective pure ground state, scaled to
    the equilibrium polarisation so weights come out O(1)."""
    dim = cfg.dim
    scale = cfg.polarization * sum(cfg.gamma_rel) / 2.0
    target = np.full(dim, -scale / dim)
    target[0] += scale
    return target


def solve_weights(
    experiments: Sequence[PrepExperiment],
    target_diag: np.ndarray,
    rcond: float = 1e-8,
) -> tuple[np.ndarray, float, int]:
    """Least-squares weights for sum_l w_l diag_l = target over the
    deviation part (uniform background removed).

    Returns (weights, residual 2-norm, rank); rank deficiency is
    reported through the rank, not raised.  Singular directions below
    ``rcond`` (relative) are discarded so near-parallel experiment sets
    do not produce astronomical cancelling weights.
    """
    if not experiments:
        raise ValueError("need at least one experiment")
    dim = experiments[0].resulting_diag.size
    a = np.stack(
        [e.resulting_diag - e.resulting_diag.sum() / dim for e in experiments],
        axis=1,
    )
    t = np.asarray(target_diag, dtype=float)
    t = t - t.sum() / dim
    weights, _, rank, _ = np.linalg.lstsq(a, t, rcond=rcond)
    residual = float(np.linalg.norm(a @ weights - t))
    return weights, residual, int(rank)


@dataclass(frozen=True)
class PrepScheme:
    experiments: tuple[PrepExperiment, ...]
    weights: np.ndarray
    target_diag: np.ndarray
    residual: float


def build_scheme(
    cfg: SpinSystemConfig,
    circuits: Sequence[GateCircuit],
    target_diag: Optional[np.ndarray] = None,
) -> PrepScheme:
    eq = equilibrium_state(cfg)
    experiments = tuple(permuted_populations(eq, c) for c in circuits)
    target = target_ground_deviation(cfg) if target_diag is None else target_diag
    weights, residual, _ = solve_weights(experiments, target)
    return PrepScheme(experiments, weights, np.asarray(target, float), residual)


def effective_pure_state(scheme: PrepScheme) -> tuple[DensityMatrix, float]:
    """Weighted combination renormalised to unit trace, plus the
    relative standard deviation of the non-ground populations.

    Populations are measured as deviations from the uniform background
    (the quantity the experiment observes); for a perfect effective
    pure state all non-ground deviations are equal and the metric is 0.
    """
    combined = np.zeros_like(scheme.experiments[0].resulting_diag)
    for w, e in zip(scheme.weights, scheme.experiments):
        combined = combined + w * e.resulting_diag
    trace = combined.sum()
    if abs(trace) < 1e-300:
        raise ValueError("combined state has vanishing trace")
    combined = combined / trace
    if combined.min() < -NEGATIVITY_TOL:
        raise ValueError(f"combination has negative population {combined.min():.3e}")
    background = combined[1:] - 1.0 / combined.size
    mean = background.mean()
    if mean == 0.0:
        raise ValueError("combination carries no background deviation")
    metric = float(background.std() / abs(mean))
    return DensityMatrix(np.diag(combined.astype(complex)), validate=False), metric


def scheme_polarization(scheme: PrepScheme) -> float:
    """Ground-state excess of the unnormalised combination: the scale
    relating output deviation diagonals to pure-state probabilities."""
    combined = np.zeros_like(scheme.experiments[0].resulting_diag)
    for w, e in zip(scheme.weights, scheme.experiments):
        combined = combined + w * e.resulting_diag
    return float(combined[0] - combined[1:].mean())


# ---------------------------------------------------------------------------
# The exact seven-experiment scheme.
#
# An invertible linear map on three bits with characteristic polynomial
# x^3 + x + 1 has order 7 and permutes the seven non-zero states in a
# single cycle while fixing |000>.  Its powers give the seven cyclic
# population permutations, each realisable with a short CNOT circuit.

_CYCLE_MATRIX = np.array(
    [
        [0, 0, 1],
        [1, 0, 1],
        [0, 1, 0],
    ],
    dtype=np.uint8,
)


def _gf2_mat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a.astype(np.uint8) @ b.astype(np.uint8)) % 2


def synthesize_linear_circuit(matrix: np.ndarray, n: int) -> GateCircuit:
    """CNOT circuit whose bit action is x -> matrix @ x over GF(2)."""
    m = np.array(matrix, dtype=np.uint8) % 2
    if m.shape != (n, n):
        raise ValueError("matrix shape must be n x n")
    work = m.copy()
    # Reduce to identity with row operations; row t += row c is CNOT(c, t).
    ops: list[tuple[int, int]] = []
    for col in range(n):
        pivot = next(
            (r for r in range(col, n) if work[r, col]), None
        )
        if pivot is None:
            raise ValueError("matrix is singular over GF(2)")
        if pivot != col:
            # Swap rows via three additions.
            for c, t in ((pivot, col), (col, pivot), (pivot, col)):
                work[t] ^= work[c]
                ops.append((c, t))
        for r in range(n):
            if r != col and work[r, col]:
                work[r] ^= work[col]
                ops.append((col, r))
    # work = E_k ... E_1 m = I, so m = E_1 ... E_k and the time-ordered
    # gate list realising x -> m x is the ops reversed.
    gates = tuple(Cnot(c, t) for c, t in reversed(ops))
    return GateCircuit(gates, n)


def full_cycle_circuits(n: int = 3) -> list[GateCircuit]:
    """Circuits for all powers of the 7-cycle (identity included)."""
    if n != 3:
        raise ValueError("the cyclic scheme is defined for three spins")
    circuits = []
    power = np.eye(n, dtype=np.uint8)
    for _ in range(2**n - 1):
        circuits.append(synthesize_linear_circuit(power, n))
        power = _gf2_mat_mul(_CYCLE_MATRIX, power)
    return circuits


def full_cycle_scheme(cfg: SpinSystemConfig) -> PrepScheme:
    return build_scheme(cfg, full_cycle_circuits(cfg.n))


# ---------------------------------------------------------------------------
# Greedy search for a small scheme, and the frozen default.


def _candidate_circuits(n: int, max_gates: int) -> list[GateCircuit]:
    pool: list[Gate] = [NotGate(s) for s in range(n)]
    pool += [Cnot(c, t) for c in range(n) for t in range(n) if c != t]
    seen: dict[tuple[int, ...], GateCircuit] = {}
    for length in range(max_gates + 1):
        for combo in itertools.product(pool, repeat=length):
            circuit = GateCircuit(tuple(combo), n)
            key = tuple(classical_permutation(circuit))
            if key not in seen:
                seen[key] = circuit
    return list(seen.values())


def search_scheme_circuits(
    cfg: SpinSystemConfig, max_gates: int = 3
) -> list[GateCircuit]:
    """Exhaustive search for the best three-experiment scheme.

    The first experiment is the unpermuted equilibrium; the other two
    circuits (up to ``max_gates`` CNOT/NOT gates each, deduplicated by
    permutation action) are chosen jointly to minimise the background
    spread.  Combinations whose ground population does not dominate are
    rejected, so the search cannot converge on a scheme that
    uniformises the background by destroying the signal.
    """
    candidates = _candidate_circuits(cfg.n, max_gates)
    eq = equilibrium_state(cfg)
    target = target_ground_deviation(cfg)
    identity = permuted_populations(eq, GateCircuit((), cfg.n))
    experiments = [permuted_populations(eq, c) for c in candidates]
    dim = cfg.dim
    best = None
    for i in range(len(candidates)):
        for j in range(i, len(candidates)):
            weights, _, _ = solve_weights(
                [identity, experiments[i], experiments[j]], target
            )
            combined = (
                weights[0] * identity.resulting_diag
                + weights[1] * experiments[i].resulting_diag
                + weights[2] * experiments[j].resulting_diag
            )
            trace = combined.sum()
            if trace <= 1e-300:
                continue
            combined = combined / trace
            if combined[0] <= combined[1:].max():
                continue
            background = combined[1:] - 1.0 / dim
            mean = background.mean()
            if mean == 0.0:
                continue
            metric = float(background.std() / abs(mean))
            if best is None or metric < best[0] - 1e-12:
                best = (metric, (i, j))
    if best is None:
        raise RuntimeError("no admissible preparation scheme found")
    i, j = best[1]
    return [GateCircuit((), cfg.n), candidates[i], candidates[j]]


# Output of search_scheme_circuits(SpinSystemConfig.default()), frozen
# so shipped results do not silently change if the search evolves.
# Background relative spread 0.2466 (variance 6.1% of the squared mean).
DEFAULT_PREP_CIRCUIT_TEXT: tuple[str, ...] = (
    "N 3\n",
    "N 3\nCNOT 2 1\nCNOT 1 0\n",
    "N 3\nCNOT 0 1\nCNOT 2 0\nNOT 2\n",
)


def default_scheme(cfg: SpinSystemConfig) -> PrepScheme:
    circuits = [parse_circuit_text(t) for t in DEFAULT_PREP_CIRCUIT_TEXT]
    return build_scheme(cfg, circuits)


# ---------------------------------------------------------------------------
# Scheme serialisation (flat key/value, circuits in the compiler's text
# format with ';' standing for line breaks).


def scheme_to_text(scheme: PrepScheme) -> str:
    from .pulsecomp import circuit_to_text

    lines = ["# nmrgrover preparation scheme",
             f"experiments = {len(scheme.experiments)}"]
    for i, exp in enumerate(scheme.experiments):
        flat = circuit_to_text(exp.circuit).strip().replace("\n", "; ")
        lines.append(f"circuit.{i} = {flat}")
    lines.append("weights = " + " ".join(f"{w:.17g}" for w in scheme.weights))
    return "\n".join(lines) + "\n"


def parse_scheme_text(text: str, cfg: SpinSystemConfig) -> PrepScheme:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        entries[key] = value
    count = int(entries.pop("experiments"))
    weights_text = entries.pop("weights", None)
    circuits = []
    for i in range(count):
        key = f"circuit.{i}"
        if key not in entries:
            raise ValueError(f"missing {key}")
        circuits.append(parse_circuit_text(entries.pop(key).replace(";", "\n")))
    if entries:
        raise ValueError(f"unknown keys {sorted(entries)}")
    scheme = build_scheme(cfg, circuits)
    if weights_text is not None:
        weights = np.array([float(x) for x in weights_text.split()])
        if weights.size != count:
            raise ValueError("weights length does not match experiments")
        scheme = PrepScheme(
            scheme.experiments, weights, scheme.target_diag, scheme.residual
        )
    return scheme

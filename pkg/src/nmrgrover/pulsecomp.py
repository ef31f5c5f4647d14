"""Gate-to-pulse compiler with a peephole rewrite engine.

Gates expand through a library of pulse-level identities:

* z rotations as triples of transverse pulses, four equivalent forms
  (Y X Y~, Y~ X~ Y, X~ Y X, X Y~ X~, with ~ marking a -90 rotation);
  until lowering they are kept as virtual ``ZRotation`` IR ops.
* CNOT(c, t) as transverse pulses on the target around one 1/2J
  evolution plus a z rotation on the control, in four variants.  For a
  negative coupling the same patterns realise the zero-controlled NOT;
  a true CNOT then costs two extra 180-degree pulses on the control.
* controlled phase gates (controlled-V) as one 1/4J evolution plus z
  rotations; a phase of the "wrong" sign for the coupling is obtained
  by conjugating with 180-degree pulses (zero-control trick).
* the three-spin phase flip (Toffoli-phase) as two controlled-NOTs and
  three controlled phases; the spin assignment is chosen per system to
  minimise pulse count and duration.

Simplification rewrites pulse programs to a fixed point: inverse pulses
cancel, same-axis neighbours merge, z rotations commute across
couplings and other spins' pulses, and commuting pulses are put in a
canonical order to expose cancellations.  Every rule preserves the
program unitary up to a global phase.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .qcore import (
    IX,
    IY,
    IZ,
    embed_single_spin,
    global_phase_alignment,
    kron_all,
)
from .spinsys import (
    Delay,
    JEvolution,
    PulseOp,
    PulseProgram,
    RfPulse,
    SpinSystemConfig,
    ZRotation,
    coupling_diag,
    op_duration,
    op_spins,
    rotation_2x2,
    zrot_diag,
)

ANGLE_TOL = 1e-9


# ---------------------------------------------------------------------------
# Gates


@dataclass(frozen=True)
class Rot:
    spin: int
    axis: str  # x | y | z
    angle_deg: float
    variant: int = 0  # z lowering form 1..4; 0 = choose automatically

    def __post_init__(self):
        if self.axis not in ("x", "y", "z"):
            raise ValueError(f"unknown axis {self.axis!r}")


@dataclass(frozen=True)
class NotGate:
    spin: int


@dataclass(frozen=True)
class PseudoHadamard:
    """90-degree y rotation (sign +1) or its inverse (sign -1)."""

    spin: int
    sign: int = 1

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")


@dataclass(frozen=True)
class Cnot:
    control: int
    target: int
    variant: int = 1

    def __post_init__(self):
        if self.control == self.target:
            raise ValueError("control and target must differ")
        if self.variant not in (1, 2, 3, 4):
            raise ValueError("variant must be 1..4")


@dataclass(frozen=True)
class ControlledV:
    """Controlled phase e^(i*sign*v_angle) on |11> of (control, target)."""

    control: int
    target: int
    v_angle_deg: float = 90.0
    sign: int = 1

    def __post_init__(self):
        if self.control == self.target:
            raise ValueError("control and target must differ")
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if abs(self.v_angle_deg) not in (90.0, 180.0):
            raise ValueError("supported controlled-phase angles are 90 and 180")


@dataclass(frozen=True)
class ToffoliPhase:
    """Three-spin diagonal gate flipping the sign of |111>."""

    spins: tuple[int, int, int]

    def __post_init__(self):
        spins = tuple(int(s) for s in self.spins)
        if len(set(spins)) != 3:
            raise ValueError("need three distinct spins")
        object.__setattr__(self, "spins", spins)


Gate = Union[Rot, NotGate, PseudoHadamard, Cnot, ControlledV, ToffoliPhase]


@dataclass(frozen=True)
class GateCircuit:
    gates: tuple[Gate, ...]
    n: int

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        for g in self.gates:
            if max(gate_spins(g)) >= self.n:
                raise ValueError(f"gate {g} references spin outside n={self.n}")

    def __add__(self, other: "GateCircuit") -> "GateCircuit":
        if self.n != other.n:
            raise ValueError("cannot concatenate circuits of different size")
        return GateCircuit(self.gates + other.gates, self.n)


def gate_spins(gate: Gate) -> tuple[int, ...]:
    if isinstance(gate, (Rot, NotGate, PseudoHadamard)):
        return (gate.spin,)
    if isinstance(gate, (Cnot, ControlledV)):
        return (gate.control, gate.target)
    return gate.spins


# ---------------------------------------------------------------------------
# Exact gate unitaries (the defining side of equivalence checks)


def gate_unitary(gate: Gate, n: int) -> np.ndarray:
    if isinstance(gate, Rot):
        axis = {"x": IX, "y": IY, "z": IZ}[gate.axis]
        theta = math.radians(gate.angle_deg)
        op2 = (
            math.cos(theta / 2.0) * np.eye(2)
            - 2j * math.sin(theta / 2.0) * axis
        )
        return embed_single_spin(op2, gate.spin, n)
    if isinstance(gate, NotGate):
        return embed_single_spin(np.array([[0, 1], [1, 0]], dtype=complex),
                                 gate.spin, n)
    if isinstance(gate, PseudoHadamard):
        return gate_unitary(Rot(gate.spin, "y", 90.0 * gate.sign), n)
    if isinstance(gate, Cnot):
        dim = 2**n
        u = np.zeros((dim, dim), dtype=complex)
        cbit, tbit = n - 1 - gate.control, n - 1 - gate.target
        for x in range(dim):
            y = x ^ (1 << tbit) if (x >> cbit) & 1 else x
            u[y, x] = 1.0
        return u
    if isinstance(gate, ControlledV):
        dim = 2**n
        diag = np.ones(dim, dtype=complex)
        cbit, tbit = n - 1 - gate.control, n - 1 - gate.target
        phase = np.exp(1j * gate.sign * math.radians(gate.v_angle_deg))
        for x in range(dim):
            if (x >> cbit) & 1 and (x >> tbit) & 1:
                diag[x] = phase
        return np.diag(diag)
    if isinstance(gate, ToffoliPhase):
        dim = 2**n
        diag = np.ones(dim, dtype=complex)
        bits = [n - 1 - s for s in gate.spins]
        for x in range(dim):
            if all((x >> b) & 1 for b in bits):
                diag[x] = -1.0
        return np.diag(diag)
    raise TypeError(f"unknown gate {gate!r}")


def circuit_unitary(circuit: GateCircuit, n: Optional[int] = None) -> np.ndarray:
    n = circuit.n if n is None else n
    u = np.eye(2**n, dtype=complex)
    for gate in circuit.gates:
        u = gate_unitary(gate, n) @ u
    return u


# ---------------------------------------------------------------------------
# Pulse-level building blocks

# Z(theta) as transverse triples; all four forms equal exp(-i*theta*Iz).
_Z_FORMS = {
    1: lambda s, t: [RfPulse(s, 90.0, 90.0), RfPulse(s, 0.0, t), RfPulse(s, 90.0, -90.0)],
    2: lambda s, t: [RfPulse(s, 90.0, -90.0), RfPulse(s, 0.0, -t), RfPulse(s, 90.0, 90.0)],
    3: lambda s, t: [RfPulse(s, 0.0, -90.0), RfPulse(s, 90.0, t), RfPulse(s, 0.0, 90.0)],
    4: lambda s, t: [RfPulse(s, 0.0, 90.0), RfPulse(s, 90.0, -t), RfPulse(s, 0.0, -90.0)],
}


def z_triple(spin: int, angle_deg: float, variant: int) -> list[PulseOp]:
    if variant not in _Z_FORMS:
        raise ValueError("z rotation variant must be 1..4")
    return [_canon_rf(p) for p in _Z_FORMS[variant](spin, angle_deg)]


def _cnot_pattern(
    cfg: SpinSystemConfig, control: int, target: int, variant: int
) -> list[PulseOp]:
    """Transverse pattern around one 1/2J evolution.

    Realises CNOT for positive coupling and the zero-controlled NOT for
    negative coupling, exactly up to a global phase.
    """
    j = cfg.j(control, target)
    if j == 0.0:
        raise ValueError(f"spins ({control},{target}) are not coupled")
    zsign = 1.0 if j > 0 else -1.0
    s = 1.0 if variant in (1, 3) else -1.0
    tau = JEvolution((control, target), Fraction(1, 2))
    z = ZRotation(control, s * zsign * 90.0)
    if variant in (1, 2):
        return [
            RfPulse(target, 0.0, s * 90.0),
            RfPulse(target, 90.0, s * 90.0),
            tau,
            z,
            RfPulse(target, 90.0, -s * 90.0),
        ]
    return [
        RfPulse(target, 90.0, s * 90.0),
        tau,
        z,
        RfPulse(target, 90.0, -s * 90.0),
        RfPulse(target, 0.0, s * 90.0),
    ]


def _controlled_flip(
    cfg: SpinSystemConfig, control: int, target: int, variant: int
) -> tuple[list[PulseOp], bool]:
    """Natural controlled flip of a pair: (ops, flips_on_control_zero)."""
    return _cnot_pattern(cfg, control, target, variant), cfg.j(control, target) < 0


def _natural_content(cfg: SpinSystemConfig, a: int, b: int) -> int:
    """Sign of the two-spin phase content of one 1/4J evolution, in
    units of 90 degrees: +1 for negative J, -1 for positive J."""
    j = cfg.j(a, b)
    if j == 0.0:
        raise ValueError(f"spins ({a},{b}) are not coupled")
    return 1 if j < 0 else -1


def _cphase_block(
    cfg: SpinSystemConfig,
    pair: tuple[int, int],
    content_sign: int,
    conjugate_spin: Optional[int] = None,
) -> list[PulseOp]:
    """Controlled phase of +-90 degrees on a pair (one 1/4J evolution).

    If the required sign opposes the coupling's natural sign the block
    is conjugated by 180-degree pulses on ``conjugate_spin``, with a z
    rotation on the other spin absorbing the linear phase residue.
    """
    a, b = pair
    nat = _natural_content(cfg, a, b)
    tau = JEvolution(pair, Fraction(1, 4))
    if content_sign == nat:
        return [ZRotation(a, nat * 45.0), ZRotation(b, nat * 45.0), tau]
    if conjugate_spin not in pair:
        raise ValueError("conjugate_spin must be one of the pair")
    q = conjugate_spin
    r = b if q == a else a
    return [
        RfPulse(q, 0.0, 180.0),
        ZRotation(q, nat * 45.0),
        ZRotation(r, nat * 45.0),
        tau,
        RfPulse(q, 0.0, 180.0),
        ZRotation(r, -nat * 90.0),
    ]


def _cphase_half_block(
    cfg: SpinSystemConfig, pair: tuple[int, int]
) -> list[PulseOp]:
    """Controlled phase of 180 degrees (controlled-Z); sign-free."""
    a, b = pair
    nat = _natural_content(cfg, a, b)
    return [
        ZRotation(a, nat * 90.0),
        ZRotation(b, nat * 90.0),
        JEvolution(pair, Fraction(1, 2)),
    ]


# ---------------------------------------------------------------------------
# Toffoli-phase planning

_toffoli_plans: dict[tuple, tuple] = {}


def _toffoli_candidates(cfg: SpinSystemConfig, spins: tuple[int, int, int]):
    """Enumerate realisations: flip pair (p->q), spectator r, sign of
    the middle controlled phase, and zero-control conjugation choices."""
    for p, q in itertools.permutations(spins, 2):
        if cfg.j(p, q) == 0.0:
            continue
        r = next(s for s in spins if s not in (p, q))
        if cfg.j(q, r) == 0.0 or cfg.j(p, r) == 0.0:
            continue
        flips_on_zero = cfg.j(p, q) < 0
        for s_mid in (1, -1):
            if flips_on_zero:
                s_outer = s_pr = s_mid
            else:
                s_outer = s_pr = -s_mid
            slots = []
            for pair, sign in (((q, r), s_outer), ((q, r), s_mid), ((p, r), s_pr)):
                a, b = (pair[0], pair[1]) if pair[0] < pair[1] else (pair[1], pair[0])
                if _natural_content(cfg, a, b) == sign:
                    slots.append([((a, b), sign, None)])
                else:
                    slots.append(
                        [((a, b), sign, a), ((a, b), sign, b)]
                    )
            for combo in itertools.product(*slots):
                yield (p, q, r, s_mid, combo, flips_on_zero)


def _emit_toffoli(
    cfg: SpinSystemConfig, candidate: tuple
) -> list[PulseOp]:
    p, q, r, s_mid, combo, flips_on_zero = candidate
    outer, mid, last = combo
    flip, _ = _controlled_flip(cfg, p, q, variant=1)
    ops: list[PulseOp] = []
    ops += _cphase_block(cfg, outer[0], outer[1], outer[2])
    ops += flip
    ops += _cphase_block(cfg, mid[0], mid[1], mid[2])
    ops += flip
    ops += _cphase_block(cfg, last[0], last[1], last[2])
    if flips_on_zero:
        ops.append(ZRotation(r, -s_mid * 90.0))
    return ops


def _toffoli_plan(cfg: SpinSystemConfig, spins: tuple[int, int, int]) -> tuple:
    key = (
        spins,
        tuple(round(cfg.j(a, b), 9) for a in range(cfg.n) for b in range(a + 1, cfg.n)),
    )
    plan = _toffoli_plans.get(key)
    if plan is not None:
        return plan
    best = None
    for index, candidate in enumerate(_toffoli_candidates(cfg, spins)):
        ops = _emit_toffoli(cfg, candidate)
        program = PulseProgram(tuple(ops), cfg.n)
        compiled = lower_z_rotations(simplify(program), cfg)
        compiled = simplify(compiled)
        report = cost(compiled, cfg)
        score = (
            report.rf_pulse_count,
            report.pulse_90_equivalents,
            report.total_duration_s,
            index,
        )
        if best is None or score < best[0]:
            best = (score, candidate)
    if best is None:
        raise ValueError(f"no coupled realisation of a phase flip on {spins}")
    _toffoli_plans[key] = best[1]
    return best[1]


# ---------------------------------------------------------------------------
# Expansion


def _canon_rf(op: RfPulse) -> RfPulse:
    phase = op.phase_deg % 360.0
    angle = op.angle_deg % 360.0
    if phase >= 180.0:
        phase -= 180.0
        angle = -angle % 360.0
    if angle > 180.0:
        angle -= 360.0
    return RfPulse(op.spin, phase, angle)


def _expand_gate(
    gate: Gate,
    cfg: SpinSystemConfig,
    naive_cv: bool,
    variant_override: Optional[int],
) -> list[PulseOp]:
    if isinstance(gate, Rot):
        if gate.axis == "x":
            return [_canon_rf(RfPulse(gate.spin, 0.0, gate.angle_deg))]
        if gate.axis == "y":
            return [_canon_rf(RfPulse(gate.spin, 90.0, gate.angle_deg))]
        variant = variant_override or gate.variant
        if naive_cv and not variant:
            variant = 1
        if variant:
            return z_triple(gate.spin, gate.angle_deg, variant)
        return [ZRotation(gate.spin, gate.angle_deg)]
    if isinstance(gate, NotGate):
        return [RfPulse(gate.spin, 0.0, 180.0)]
    if isinstance(gate, PseudoHadamard):
        return [_canon_rf(RfPulse(gate.spin, 90.0, 90.0 * gate.sign))]
    if isinstance(gate, Cnot):
        variant = variant_override or gate.variant
        ops, flips_on_zero = _controlled_flip(cfg, gate.control, gate.target, variant)
        if flips_on_zero:
            wrap = RfPulse(gate.control, 0.0, 180.0)
            ops = [wrap] + ops + [wrap]
        return ops
    if isinstance(gate, ControlledV):
        pair = tuple(sorted((gate.control, gate.target)))
        phi = gate.sign * gate.v_angle_deg
        if naive_cv:
            return _naive_cphase(cfg, pair, phi)
        if abs(gate.v_angle_deg) == 180.0:
            return _cphase_half_block(cfg, pair)
        sign = 1 if phi > 0 else -1
        nat = _natural_content(cfg, *pair)
        conj = None if sign == nat else pair[0]
        return _cphase_block(cfg, pair, sign, conj)
    if isinstance(gate, ToffoliPhase):
        if naive_cv:
            return _naive_toffoli(cfg, gate.spins)
        return _emit_toffoli(cfg, _toffoli_plan(cfg, gate.spins))
    raise TypeError(f"unknown gate {gate!r}")


def _lower_all_z(ops: Iterable[PulseOp], variant: int = 1) -> list[PulseOp]:
    out: list[PulseOp] = []
    for op in ops:
        if isinstance(op, ZRotation):
            out += z_triple(op.spin, op.angle_deg, variant)
        else:
            out.append(op)
    return out


def _naive_cphase(
    cfg: SpinSystemConfig, pair: tuple[int, int], phi_deg: float
) -> list[PulseOp]:
    """Controlled phase from two controlled-NOTs and z rotations only."""
    i, j = pair
    flip, flips_on_zero = _controlled_flip(cfg, i, j, variant=1)
    mid_sign = 1.0 if flips_on_zero else -1.0
    ops: list[PulseOp] = [
        ZRotation(i, phi_deg / 2.0),
        ZRotation(j, phi_deg / 2.0),
        *flip,
        ZRotation(j, mid_sign * phi_deg / 2.0),
        *flip,
    ]
    return _lower_all_z(ops)


def _naive_toffoli(cfg: SpinSystemConfig, spins: tuple[int, int, int]) -> list[PulseOp]:
    """Textbook template: controlled-V(b,c), CNOT(a,b), controlled-V+(b,c),
    CNOT(a,b), controlled-V(a,c), with the controlled phases built from
    controlled-NOTs and single-spin rotations; nothing is cancelled."""
    a, b, c = spins
    flip, flips_on_zero = _controlled_flip(cfg, a, b, variant=1)
    if flips_on_zero:
        signs = (1.0, 1.0, 1.0)
        cleanup = [ZRotation(c, -90.0)]
    else:
        signs = (1.0, -1.0, 1.0)
        cleanup = []
    ops: list[PulseOp] = []
    ops += _naive_cphase(cfg, (b, c), signs[0] * 90.0)
    ops += _lower_all_z(flip)
    ops += _naive_cphase(cfg, (b, c), signs[1] * 90.0)
    ops += _lower_all_z(flip)
    ops += _naive_cphase(cfg, (a, c), signs[2] * 90.0)
    ops += _lower_all_z(cleanup)
    return ops


def expand(
    circuit: GateCircuit,
    cfg: SpinSystemConfig,
    naive_cv: bool = False,
    variants: Optional[dict[int, int]] = None,
    source: str = "",
) -> PulseProgram:
    """Expand a gate circuit into pulse IR (z rotations still virtual,
    except in naive mode where everything is lowered immediately)."""
    if circuit.n != cfg.n:
        raise ValueError(f"circuit n={circuit.n} does not match system n={cfg.n}")
    ops: list[PulseOp] = []
    for index, gate in enumerate(circuit.gates):
        override = variants.get(index) if variants else None
        ops += _expand_gate(gate, cfg, naive_cv, override)
    if naive_cv:
        ops = _lower_all_z(ops)
    return PulseProgram(tuple(ops), cfg.n, source=source)


# ---------------------------------------------------------------------------
# Rewrite rules


@dataclass
class RewriteRule:
    name: str
    apply: Callable[[list[PulseOp]], tuple[list[PulseOp], bool]]
    enabled: bool = True


def _rule_canonicalize(ops: list[PulseOp]) -> tuple[list[PulseOp], bool]:
    out: list[PulseOp] = []
    changed = False
    for op in ops:
        if isinstance(op, RfPulse):
            canon = _canon_rf(op)
            if abs(canon.angle_deg) <= ANGLE_TOL:
                changed = True
                continue
            if canon != op:
                changed = True
            out.append(canon)
        elif isinstance(op, ZRotation):
            angle = op.angle_deg % 360.0
            if angle > 180.0:
                angle -= 360.0
            if abs(angle) <= ANGLE_TOL:
                changed = True
                continue
            if angle != op.angle_deg:
                changed = True
                op = ZRotation(op.spin, angle)
            out.append(op)
        elif isinstance(op, Delay) and op.duration_s == 0.0:
            changed = True
        else:
            out.append(op)
    return out, changed


def _same_axis(a: RfPulse, b: RfPulse) -> bool:
    return a.spin == b.spin and abs(a.phase_deg - b.phase_deg) <= ANGLE_TOL


def _rule_cancel_inverse(ops: list[PulseOp]) -> tuple[list[PulseOp], bool]:
    out: list[PulseOp] = []
    changed = False
    for op in ops:
        prev = out[-1] if out else None
        if (
            isinstance(op, RfPulse)
            and isinstance(prev, RfPulse)
            and _same_axis(prev, op)
            and abs((prev.angle_deg + op.angle_deg) % 360.0) <= ANGLE_TOL
        ):
            out.pop()
            changed = True
            continue
        if (
            isinstance(op, ZRotation)
            and isinstance(prev, ZRotation)
            and prev.spin == op.spin
            and abs((prev.angle_deg + op.angle_deg) % 360.0) <= ANGLE_TOL
        ):
            out.pop()
            changed = True
            continue
        out.append(op)
    return out, changed


def _rule_merge(ops: list[PulseOp]) -> tuple[list[PulseOp], bool]:
    out: list[PulseOp] = []
    changed = False
    for op in ops:
        prev = out[-1] if out else None
        if isinstance(op, RfPulse) and isinstance(prev, RfPulse) and _same_axis(prev, op):
            merged = _canon_rf(
                RfPulse(op.spin, prev.phase_deg, prev.angle_deg + op.angle_deg)
            )
            out.pop()
            if abs(merged.angle_deg) > ANGLE_TOL:
                out.append(merged)
            changed = True
            continue
        if isinstance(op, ZRotation) and isinstance(prev, ZRotation) and prev.spin == op.spin:
            angle = (prev.angle_deg + op.angle_deg) % 360.0
            if angle > 180.0:
                angle -= 360.0
            out.pop()
            if abs(angle) > ANGLE_TOL:
                out.append(ZRotation(op.spin, angle))
            changed = True
            continue
        out.append(op)
    return out, changed


def _z_can_hop(z: ZRotation, op: PulseOp) -> bool:
    if isinstance(op, (JEvolution, Delay)):
        return True
    if isinstance(op, RfPulse):
        return op.spin != z.spin
    if isinstance(op, ZRotation):
        return op.spin != z.spin
    return False


def _rule_migrate_z(ops: list[PulseOp]) -> tuple[list[PulseOp], bool]:
    """Push z rotations as late as possible, merging along the way, then
    put each contiguous z run in spin order."""
    work = list(ops)
    for i in range(len(work) - 1, -1, -1):
        if not isinstance(work[i], ZRotation):
            continue
        j = i
        while j + 1 < len(work):
            z = work[j]
            nxt = work[j + 1]
            if isinstance(nxt, ZRotation) and nxt.spin == z.spin:
                angle = (z.angle_deg + nxt.angle_deg) % 360.0
                if angle > 180.0:
                    angle -= 360.0
                del work[j : j + 2]
                if abs(angle) > ANGLE_TOL:
                    work.insert(j, ZRotation(z.spin, angle))
                break
            if _z_can_hop(z, nxt):
                work[j], work[j + 1] = work[j + 1], work[j]
                j += 1
                continue
            break
    # canonical spin order within each z run
    out: list[PulseOp] = []
    i = 0
    while i < len(work):
        if isinstance(work[i], ZRotation):
            j = i
            while j < len(work) and isinstance(work[j], ZRotation):
                j += 1
            out.extend(sorted(work[i:j], key=lambda z: z.spin))
            i = j
        else:
            out.append(work[i])
            i += 1
    return out, out != list(ops)


def _pulses_commute(a: RfPulse, b: RfPulse) -> bool:
    return a.spin != b.spin or abs(a.phase_deg - b.phase_deg) <= ANGLE_TOL


def _rule_reorder(ops: list[PulseOp]) -> tuple[list[PulseOp], bool]:
    """Sort pairwise-commuting runs of transverse pulses by spin."""
    out = list(ops)
    changed = False
    i = 0
    while i < len(out):
        if not isinstance(out[i], RfPulse):
            i += 1
            continue
        j = i + 1
        window = [out[i]]
        while j < len(out) and isinstance(out[j], RfPulse):
            if all(_pulses_commute(out[j], w) for w in window):
                window.append(out[j])
                j += 1
            else:
                break
        order = sorted(range(len(window)), key=lambda t: (window[t].spin, t))
        reordered = [window[t] for t in order]
        if reordered != window:
            out[i:j] = reordered
            changed = True
        i = j
    return out, changed


def rule_absorb_trailing_z() -> RewriteRule:
    """Drop z rotations at the program tail.  Sound only when the
    program output is read as diagonal populations; off by default."""

    def apply(ops: list[PulseOp]) -> tuple[list[PulseOp], bool]:
        out = list(ops)
        changed = False
        while out and isinstance(out[-1], ZRotation):
            out.pop()
            changed = True
        return out, changed

    return RewriteRule("absorb_trailing_z", apply)


def default_rules() -> list[RewriteRule]:
    return [
        RewriteRule("canonicalize", _rule_canonicalize),
        RewriteRule("cancel_inverse_pairs", _rule_cancel_inverse),
        RewriteRule("merge_rotations", _rule_merge),
        RewriteRule("migrate_z", _rule_migrate_z),
        RewriteRule("reorder_commuting", _rule_reorder),
    ]


def simplify(
    program: PulseProgram,
    rules: Optional[Sequence[RewriteRule]] = None,
    max_iterations: int = 100,
) -> PulseProgram:
    """Apply rewrite rules to a fixed point (or the iteration cap)."""
    rules = default_rules() if rules is None else rules
    ops = list(program.ops)
    for _ in range(max_iterations):
        any_change = False
        for rule in rules:
            if not rule.enabled:
                continue
            ops, changed = rule.apply(ops)
            any_change = any_change or changed
        if not any_change:
            break
    return PulseProgram(tuple(ops), program.n, source=program.source)


_MERGE_RULES: Optional[list[RewriteRule]] = None


def _merge_rules() -> list[RewriteRule]:
    global _MERGE_RULES
    if _MERGE_RULES is None:
        _MERGE_RULES = [
            RewriteRule("canonicalize", _rule_canonicalize),
            RewriteRule("cancel_inverse_pairs", _rule_cancel_inverse),
            RewriteRule("merge_rotations", _rule_merge),
        ]
    return _MERGE_RULES


def lower_z_rotations(program: PulseProgram, cfg: SpinSystemConfig) -> PulseProgram:
    """Replace virtual z rotations by transverse triples, choosing the
    form that merges best with its neighbours (greedy, deterministic)."""
    ops = list(program.ops)
    while True:
        index = next(
            (i for i, op in enumerate(ops) if isinstance(op, ZRotation)), None
        )
        if index is None:
            break
        z = ops[index]
        best = None
        for variant in (1, 2, 3, 4):
            candidate = ops[:index] + z_triple(z.spin, z.angle_deg, variant) + ops[index + 1 :]
            candidate_prog = simplify(
                PulseProgram(tuple(candidate), program.n), rules=_merge_rules()
            )
            report = cost(candidate_prog, cfg)
            score = (
                report.rf_pulse_count,
                report.pulse_90_equivalents,
                len(candidate_prog.ops),
                variant,
            )
            if best is None or score < best[0]:
                best = (score, list(candidate_prog.ops))
        ops = best[1]
    return PulseProgram(tuple(ops), program.n, source=program.source)


def expand_refocusing(program: PulseProgram, cfg: SpinSystemConfig) -> PulseProgram:
    """Replace ideal pair evolutions by delays with explicit refocusing
    pulse pairs (x then -x on the spectator spin), so RF error models
    act on the refocusing pulses.  With perfect pulses the expansion is
    exactly equivalent to the ideal op."""
    all_pairs = frozenset(cfg.pairs())
    ops: list[PulseOp] = []
    for op in program.ops:
        if not isinstance(op, JEvolution):
            ops.append(op)
            continue
        spectators = [s for s in range(cfg.n) if s not in op.pair]
        spectators = [s for s in spectators if any(s in p for p in all_pairs)]
        if len(spectators) > 1:
            raise NotImplementedError(
                "explicit refocusing is implemented for up to one spectator spin"
            )
        duration = op_duration(op, cfg)
        if not spectators:
            ops.append(Delay(duration, frozenset({op.pair})))
            continue
        k = spectators[0]
        half = Delay(duration / 2.0, all_pairs)
        ops += [half, RfPulse(k, 0.0, 180.0), half, RfPulse(k, 180.0, 180.0)]
    return PulseProgram(tuple(ops), program.n, source=program.source)


# ---------------------------------------------------------------------------
# Costs, reference unitaries, equivalence


@dataclass(frozen=True)
class CostReport:
    rf_pulse_count: int
    pulse_90_equivalents: float
    j_half_count: int
    j_quarter_count: int
    total_duration_s: float

    def as_dict(self) -> dict:
        return {
            "rf_pulse_count": self.rf_pulse_count,
            "pulse_90_equivalents": self.pulse_90_equivalents,
            "j_half_count": self.j_half_count,
            "j_quarter_count": self.j_quarter_count,
            "total_duration_s": self.total_duration_s,
        }


def cost(program: PulseProgram, cfg: SpinSystemConfig) -> CostReport:
    """Pulse and evolution counts.  Virtual z rotations are charged as
    their three-pulse realisation so the report predicts physical cost
    independently of lowering."""
    rf = 0
    p90 = 0.0
    half = quarter = 0
    duration = 0.0
    for op in program.ops:
        if isinstance(op, RfPulse):
            rf += 1
            p90 += abs(op.angle_deg) / 90.0
            duration += op_duration(op, cfg)
        elif isinstance(op, ZRotation):
            rf += 3
            p90 += 2.0 + abs(op.angle_deg) / 90.0
            duration += (2.0 + abs(op.angle_deg) / 90.0) * cfg.pulse_90_duration_s
        elif isinstance(op, JEvolution):
            if op.fraction == Fraction(1, 2):
                half += 1
            else:
                quarter += 1
            duration += op_duration(op, cfg)
        elif isinstance(op, Delay):
            duration += op.duration_s
    return CostReport(rf, p90, half, quarter, duration)


def program_unitary(program: PulseProgram, cfg: SpinSystemConfig) -> np.ndarray:
    """Error-free unitary of a program (ideal propagators, scale 1)."""
    dim = 2**program.n
    u = np.eye(dim, dtype=complex)
    for op in program.ops:
        if isinstance(op, RfPulse):
            g = embed_single_spin(
                rotation_2x2(op.phase_deg, op.angle_deg), op.spin, program.n
            )
            u = g @ u
        elif isinstance(op, ZRotation):
            u = zrot_diag(program.n, op.spin, op.angle_deg)[:, None] * u
        elif isinstance(op, JEvolution):
            u = coupling_diag(cfg, [op.pair], op_duration(op, cfg))[:, None] * u
        elif isinstance(op, Delay):
            u = coupling_diag(cfg, op.active_couplings, op.duration_s)[:, None] * u
    return u


def verify_equivalence(
    a: PulseProgram,
    b: Union[PulseProgram, GateCircuit, np.ndarray],
    cfg: SpinSystemConfig,
    tol: float = 1e-9,
) -> tuple[bool, float]:
    """Check U_a = e^(i*alpha) U_b entrywise within tol."""
    ua = program_unitary(a, cfg)
    if isinstance(b, PulseProgram):
        ub = program_unitary(b, cfg)
    elif isinstance(b, GateCircuit):
        ub = circuit_unitary(b)
    else:
        ub = np.asarray(b, dtype=complex)
    if ua.shape != ub.shape:
        raise ValueError(f"dimension mismatch {ua.shape} vs {ub.shape}")
    alpha = global_phase_alignment(ua, ub)
    deviation = float(np.max(np.abs(alpha * ua - ub)))
    return deviation <= tol, deviation


# ---------------------------------------------------------------------------
# Compile pipeline and variant search


def compile_circuit(
    circuit: GateCircuit,
    cfg: SpinSystemConfig,
    simplify_program: bool = True,
    naive_cv: bool = False,
    explicit_refocus: bool = False,
    variants: Optional[dict[int, int]] = None,
    rules: Optional[Sequence[RewriteRule]] = None,
    source: str = "",
) -> PulseProgram:
    program = expand(circuit, cfg, naive_cv=naive_cv, variants=variants, source=source)
    if simplify_program and not naive_cv:
        program = simplify(program, rules=rules)
        program = lower_z_rotations(program, cfg)
        program = simplify(program, rules=rules)
    elif not naive_cv:
        program = PulseProgram(
            tuple(_lower_all_z(program.ops)), program.n, source=program.source
        )
    if explicit_refocus:
        program = expand_refocusing(program, cfg)
    return program


MAX_VARIANT_COMBINATIONS = 20000


def search_variants(
    circuit: GateCircuit,
    cfg: SpinSystemConfig,
    max_gates: int = 12,
) -> tuple[dict[int, int], PulseProgram, CostReport]:
    """Brute-force per-gate variant selection minimising compiled cost.

    Covers CNOT forms and z-rotation lowering forms; ties break toward
    the lexicographically smallest variant vector.
    """
    dims: list[tuple[int, list[int]]] = []
    for index, gate in enumerate(circuit.gates):
        if isinstance(gate, Cnot):
            dims.append((index, [1, 2, 3, 4]))
        elif isinstance(gate, Rot) and gate.axis == "z":
            dims.append((index, [1, 2, 3, 4]))
    if len(dims) > max_gates:
        raise ValueError(f"variant search limited to {max_gates} gates")
    total = 1
    for _, choices in dims:
        total *= len(choices)
    if total > MAX_VARIANT_COMBINATIONS:
        raise ValueError(f"{total} variant combinations exceed the search cap")
    best = None
    for combo in itertools.product(*(choices for _, choices in dims)):
        assignment = {index: v for (index, _), v in zip(dims, combo)}
        program = compile_circuit(circuit, cfg, variants=assignment)
        report = cost(program, cfg)
        score = (
            report.rf_pulse_count,
            report.pulse_90_equivalents,
            report.total_duration_s,
            combo,
        )
        if best is None or score < best[0]:
            best = (score, assignment, program, report)
    if best is None:
        program = compile_circuit(circuit, cfg)
        return {}, program, cost(program, cfg)
    return best[1], best[2], best[3]


# ---------------------------------------------------------------------------
# Text formats


def circuit_to_text(circuit: GateCircuit) -> str:
    lines = [f"N {circuit.n}"]
    for gate in circuit.gates:
        if isinstance(gate, Rot):
            line = f"ROT {gate.spin} {gate.axis} {gate.angle_deg:g}"
            if gate.variant:
                line += f" v={gate.variant}"
            lines.append(line)
        elif isinstance(gate, NotGate):
            lines.append(f"NOT {gate.spin}")
        elif isinstance(gate, PseudoHadamard):
            lines.append(f"PSH {gate.spin} {'+' if gate.sign > 0 else '-'}")
        elif isinstance(gate, Cnot):
            lines.append(f"CNOT {gate.control} {gate.target} v={gate.variant}")
        elif isinstance(gate, ControlledV):
            lines.append(
                f"CV {gate.control} {gate.target} {gate.v_angle_deg:g} "
                f"{'+' if gate.sign > 0 else '-'}"
            )
        elif isinstance(gate, ToffoliPhase):
            lines.append("TOFFPHASE " + " ".join(str(s) for s in gate.spins))
    return "\n".join(lines) + "\n"


class CircuitParseError(ValueError):
    pass


def parse_circuit_text(text: str, n: Optional[int] = None) -> GateCircuit:
    gates: list[Gate] = []
    declared_n = n
    max_spin = -1
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        op = tokens[0].upper()
        try:
            if op == "N":
                declared_n = int(tokens[1])
                continue
            kwargs = {}
            args = []
            for tok in tokens[1:]:
                if "=" in tok:
                    key, value = tok.split("=", 1)
                    kwargs[key] = value
                else:
                    args.append(tok)
            if op == "ROT":
                gate: Gate = Rot(
                    int(args[0]), args[1].lower(), float(args[2]),
                    variant=int(kwargs.get("v", 0)),
                )
            elif op == "NOT":
                gate = NotGate(int(args[0]))
            elif op == "PSH":
                gate = PseudoHadamard(int(args[0]), 1 if args[1] == "+" else -1)
            elif op == "CNOT":
                gate = Cnot(int(args[0]), int(args[1]), int(kwargs.get("v", 1)))
            elif op == "CV":
                sign = 1 if (len(args) < 4 or args[3] == "+") else -1
                angle = float(args[2]) if len(args) > 2 else 90.0
                gate = ControlledV(int(args[0]), int(args[1]), angle, sign)
            elif op == "TOFFPHASE":
                gate = ToffoliPhase((int(args[0]), int(args[1]), int(args[2])))
            else:
                raise ValueError(f"unknown gate {op!r}")
        except (IndexError, ValueError) as exc:
            raise CircuitParseError(f"line {lineno}: {exc}") from exc
        gates.append(gate)
        max_spin = max(max_spin, max(gate_spins(gate)))
    if declared_n is None:
        declared_n = max_spin + 1 if max_spin >= 0 else 1
    try:
        return GateCircuit(tuple(gates), declared_n)
    except ValueError as exc:
        raise CircuitParseError(str(exc)) from exc


def program_to_text(program: PulseProgram, cfg: Optional[SpinSystemConfig] = None) -> str:
    lines = []
    if program.source:
        lines.append(f"# source: {program.source}")
    lines.append(f"N {program.n}")
    for op in program.ops:
        if isinstance(op, RfPulse):
            lines.append(f"RF {op.spin} {op.phase_deg:.9g} {op.angle_deg:.9g}")
        elif isinstance(op, ZRotation):
            lines.append(f"ZROT {op.spin} {op.angle_deg:.9g}")
        elif isinstance(op, JEvolution):
            lines.append(f"JEV {op.pair[0]} {op.pair[1]} {op.fraction}")
        elif isinstance(op, Delay):
            pairs = ",".join(f"{a}-{b}" for a, b in sorted(op.active_couplings))
            lines.append(f"DELAY {op.duration_s:.12g} {pairs or 'none'}")
    return "\n".join(lines) + "\n"


def parse_program_text(text: str) -> PulseProgram:
    ops: list[PulseOp] = []
    n: Optional[int] = None
    source = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped.startswith("# source:"):
            source = stripped[len("# source:"):].strip()
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        op = tokens[0].upper()
        try:
            if op == "N":
                n = int(tokens[1])
            elif op == "RF":
                ops.append(RfPulse(int(tokens[1]), float(tokens[2]), float(tokens[3])))
            elif op == "ZROT":
                ops.append(ZRotation(int(tokens[1]), float(tokens[2])))
            elif op == "JEV":
                ops.append(
                    JEvolution((int(tokens[1]), int(tokens[2])), Fraction(tokens[3]))
                )
            elif op == "DELAY":
                pairs: frozenset[tuple[int, int]] = frozenset()
                if len(tokens) > 2 and tokens[2] != "none":
                    pairs = frozenset(
                        tuple(int(x) for x in item.split("-"))
                        for item in tokens[2].split(",")
                    )
                ops.append(Delay(float(tokens[1]), pairs))
            else:
                raise ValueError(f"unknown op {op!r}")
        except (IndexError, ValueError) as exc:
            raise CircuitParseError(f"line {lineno}: {exc}") from exc
    if n is None:
        spins = [s for op in ops for s in op_spins(op)]
        n = max(spins) + 1 if spins else 1
    return PulseProgram(tuple(ops), n, source=source)

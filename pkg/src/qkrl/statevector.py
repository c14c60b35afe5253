"""Dense statevector simulator with named little-endian registers.

Qubit ``q`` of the whole system is bit ``q`` of the basis index. A register
is a contiguous span of qubits; its value is ``(index >> start) & mask`` so the
first qubit of a register is its least significant bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import BudgetError, ContractError

MAX_QUBITS = 24
NORM_TOL = 1e-10


@dataclass(frozen=True)
class Register:
    name: str
    start: int
    size: int

    @property
    def qubits(self) -> range:
        return range(self.start, self.start + self.size)

    @property
    def dim(self) -> int:
        return 1 << self.size


class StateVector:
    """A normalized state on named registers, initialised to ``|0...0>``."""

    def __init__(self, registers: Sequence[tuple[str, int]], max_qubits: int = MAX_QUBITS):
        regs = {}
        start = 0
        for name, size in registers:
            if name in regs:
                raise ContractError(f"duplicate register name {name!r}")
            if size < 0:
                raise ContractError(f"register {name!r} has negative size")
            regs[name] = Register(name, start, int(size))
            start += int(size)
        if start > max_qubits:
            raise BudgetError(f"{start} qubits requested, cap is {max_qubits}")
        self.registers: dict[str, Register] = regs
        self.n_qubits = start
        self.amplitudes = np.zeros(1 << start, dtype=complex)
        self.amplitudes[0] = 1.0

    # -- bookkeeping -----------------------------------------------------
    def register(self, name: str) -> Register:
        try:
            return self.registers[name]
        except KeyError:
            raise ContractError(f"no register named {name!r}") from None

    def qubit(self, name: str, offset: int = 0) -> int:
        reg = self.register(name)
        if not 0 <= offset < reg.size:
            raise ContractError(f"qubit offset {offset} outside register {name!r}")
        return reg.start + offset

    def copy(self) -> "StateVector":
        out = object.__new__(StateVector)
        out.registers = dict(self.registers)
        out.n_qubits = self.n_qubits
        out.amplitudes = self.amplitudes.copy()
        return out

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def check_norm(self, tol: float = NORM_TOL) -> None:
        if abs(self.norm() - 1.0) > tol:
            raise ContractError(f"state norm drifted to {self.norm():.15f}")

    def register_values(self, name: str) -> np.ndarray:
        """Value of register ``name`` for every basis index."""
        reg = self.register(name)
        return (np.arange(self.amplitudes.size) >> reg.start) & (reg.dim - 1)

    def probabilities(self, names: str | Sequence[str] | None = None) -> np.ndarray:
        """Marginal distribution over the listed registers (joint, little-endian)."""
        p = np.abs(self.amplitudes) ** 2
        if names is None:
            return p
        if isinstance(names, str):
            names = [names]
        idx = np.zeros(p.size, dtype=np.int64)
        shift = 0
        for nm in names:
            reg = self.register(nm)
            idx |= self.register_values(nm) << shift
            shift += reg.size
        return np.bincount(idx, weights=p, minlength=1 << shift)

    def _tensor(self) -> np.ndarray:
        # axis i of the tensor is qubit n-1-i
        return self.amplitudes.reshape((2,) * self.n_qubits) if self.n_qubits else self.amplitudes

    def _axis(self, qubit: int) -> int:
        return self.n_qubits - 1 - qubit

    def _check_qubits(self, target: int, controls: Mapping[int, int]) -> None:
        if not 0 <= target < self.n_qubits:
            raise ContractError(f"target qubit {target} out of range")
        for q, b in controls.items():
            if not 0 <= q < self.n_qubits:
                raise ContractError(f"control qubit {q} out of range")
            if b not in (0, 1):
                raise ContractError(f"control value for qubit {q} must be 0 or 1")
        if target in controls:
            raise ContractError(f"target qubit {target} is also a control")

    # -- gates -------------------------------------------------------------
    def apply_single_qubit(self, target: int, matrix: np.ndarray, controls: Mapping[int, int] | None = None):
        """Apply a 2x2 unitary to ``target`` on the subspace matching ``controls``."""
        controls = dict(controls or {})
        self._check_qubits(target, controls)
        psi = self._tensor()
        sel: list = [slice(None)] * self.n_qubits
        for q, b in controls.items():
            sel[self._axis(q)] = b
        s0, s1 = list(sel), list(sel)
        s0[self._axis(target)] = 0
        s1[self._axis(target)] = 1
        a0 = psi[tuple(s0)].copy()
        a1 = psi[tuple(s1)]
        psi[tuple(s0)] = matrix[0, 0] * a0 + matrix[0, 1] * a1
        psi[tuple(s1)] = matrix[1, 0] * a0 + matrix[1, 1] * a1
        return self

    def apply_multicontrolled_ry(self, target: int, controls: Mapping[int, int] | None, angle: float):
        """R_Y(angle) = exp(-i angle Y / 2) on ``target`` where the control pattern matches."""
        c, s = np.cos(angle / 2.0), np.sin(angle / 2.0)
        return self.apply_single_qubit(target, np.array([[c, -s], [s, c]]), controls)

    def apply_multicontrolled_x(self, target: int, controls: Mapping[int, int] | None = None):
        return self.apply_single_qubit(target, np.array([[0.0, 1.0], [1.0, 0.0]]), controls)

    def apply_diagonal_phase(self, name: str, phase_fn: Callable[[np.ndarray], np.ndarray] | np.ndarray):
        """Multiply each amplitude by ``exp(i * phase_fn(b))`` with ``b`` the register value.

        ``phase_fn`` is either a vectorised callable on register values or an
        array of phases indexed by register value.
        """
        reg = self.register(name)
        vals = np.arange(reg.dim)
        phases = np.asarray(phase_fn(vals) if callable(phase_fn) else phase_fn, dtype=float)
        if phases.shape != (reg.dim,):
            raise ContractError(f"need {reg.dim} phases for register {name!r}, got {phases.shape}")
        self.amplitudes *= np.exp(1j * phases)[self.register_values(name)]
        return self

    def apply_joint_phase(self, names: Sequence[str], phases: np.ndarray):
        """Diagonal phase over the joint value of several registers (first name least significant)."""
        idx = np.zeros(self.amplitudes.size, dtype=np.int64)
        shift = 0
        for nm in names:
            idx |= self.register_values(nm) << shift
            shift += self.register(nm).size
        phases = np.asarray(phases, dtype=float).reshape(-1)
        if phases.size != 1 << shift:
            raise ContractError(f"need {1 << shift} phases, got {phases.size}")
        self.amplitudes *= np.exp(1j * phases)[idx]
        return self

    def _register_view(self, reg: Register) -> np.ndarray:
        high = 1 << (self.n_qubits - reg.start - reg.size)
        return self.amplitudes.reshape(high, reg.dim, 1 << reg.start)

    def apply_unitary(self, name: str, U: np.ndarray):
        """Apply a dense unitary on the full span of register ``name``."""
        reg = self.register(name)
        U = np.asarray(U)
        if U.shape != (reg.dim, reg.dim):
            raise ContractError(f"unitary of shape {U.shape} does not match register {name!r}")
        view = self._register_view(reg)
        self.amplitudes = np.einsum("ij,hjl->hil", U, view).reshape(-1)
        return self

    def apply_inner_product_subcircuit(self, name: str, prepA: np.ndarray, prepB: np.ndarray):
        """Apply ``prepA^dagger prepB`` on register ``name``.

        Starting from ``|0...0>`` on that span, the amplitude left on ``|0...0>``
        is ``<phi_A|phi_B>`` with ``|phi_X> = prepX |0>``.
        """
        reg = self.register(name)
        A, B = np.asarray(prepA), np.asarray(prepB)
        if A.shape != B.shape or A.shape != (reg.dim, reg.dim):
            raise ContractError("prepA and prepB must be unitaries on the register span")
        self.apply_unitary(name, B)
        return self.apply_unitary(name, A.conj().T)

    def qft(self, name: str):
        """|x> -> 2^{-k/2} sum_y exp(2 pi i x y / 2^k) |y>."""
        reg = self.register(name)
        view = self._register_view(reg)
        self.amplitudes = np.fft.ifft(view, axis=1, norm="ortho").reshape(-1)
        return self

    def inverse_qft(self, name: str):
        """|x> -> 2^{-k/2} sum_y exp(-2 pi i x y / 2^k) |y>."""
        reg = self.register(name)
        view = self._register_view(reg)
        self.amplitudes = np.fft.fft(view, axis=1, norm="ortho").reshape(-1)
        return self

    def apply_classical_function(self, inputs: Sequence[str], output: str, fn: Callable[[np.ndarray], np.ndarray]):
        """Reversible write ``|x>|y> -> |x>|y XOR fn(x)>``.

        ``fn`` receives an array of shape (len(inputs), n_basis) of input
        register values and returns the integer to XOR into ``output``.
        """
        out = self.register(output)
        vals = np.stack([self.register_values(nm) for nm in inputs]) if inputs else np.zeros((0, self.amplitudes.size), dtype=np.int64)
        f = np.asarray(fn(vals), dtype=np.int64)
        if np.any(f < 0) or np.any(f >= out.dim):
            raise ContractError(f"function value does not fit register {output!r}")
        idx = np.arange(self.amplitudes.size)
        new_idx = idx ^ (f << out.start)
        new = np.empty_like(self.amplitudes)
        new[new_idx] = self.amplitudes
        self.amplitudes = new
        return self

    # -- readout -------------------------------------------------------------
    def measure(self, name: str | Sequence[str], rng: np.random.Generator):
        """Sample the register(s), collapse, renormalize; returns (outcome, self)."""
        names = [name] if isinstance(name, str) else list(name)
        p = self.probabilities(names)
        p = p / p.sum()
        outcome = int(rng.choice(p.size, p=p))
        idx = np.zeros(self.amplitudes.size, dtype=np.int64)
        shift = 0
        for nm in names:
            idx |= self.register_values(nm) << shift
            shift += self.register(nm).size
        keep = idx == outcome
        self.amplitudes = np.where(keep, self.amplitudes, 0.0)
        self.amplitudes /= np.linalg.norm(self.amplitudes)
        return outcome, self

    def projector_expectation(self, name: str, subset: Iterable[int]) -> float:
        """Probability that register ``name`` holds a value in ``subset``."""
        subset = np.asarray(list(subset), dtype=np.int64)
        if subset.size == 0:
            return 0.0
        p = self.probabilities(name)
        if np.any(subset < 0) or np.any(subset >= p.size):
            raise ContractError("subset contains values outside the register")
        return float(p[np.unique(subset)].sum())

    def register_is_zero(self, name: str, tol: float = 1e-12) -> bool:
        return self.probabilities(name)[0] >= 1.0 - tol

    def dump(self, threshold: float = 0.0) -> str:
        """Text dump, one ``index re im`` line per amplitude above ``threshold``."""
        lines = []
        for i, a in enumerate(self.amplitudes):
            if abs(a) > threshold:
                lines.append(f"{i} {a.real:.17g} {a.imag:.17g}")
        return "\n".join(lines) + "\n"


def prepare_amplitudes(sv: StateVector, name: str, probs: np.ndarray, controls: Mapping[int, int] | None = None) -> StateVector:
    """Load ``sqrt(probs)`` into register ``name`` with a ladder of controlled R_Y gates.

    The least significant qubit is rotated first; each later qubit is rotated
    conditioned on the values already fixed, so a ``q``-qubit register uses
    ``2**q - 1`` rotations. Extra ``controls`` gate the whole ladder.
    """
    reg = sv.register(name)
    p = np.asarray(probs, dtype=float)
    if p.shape != (reg.dim,):
        raise ContractError(f"need {reg.dim} probabilities for register {name!r}")
    if np.any(p < -1e-15) or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError("probabilities must be non-negative and sum to one")
    p = np.clip(p, 0.0, None)
    base = dict(controls or {})
    for j in range(reg.size):
        step = 1 << j
        for prefix in range(step):
            # values whose low j bits equal prefix
            sub = p[prefix::step]
            total = sub.sum()
            if total <= 0.0:
                continue
            p0 = sub[0::2].sum() / total
            angle = 2.0 * np.arccos(np.sqrt(min(max(p0, 0.0), 1.0)))
            if angle == 0.0:
                continue
            ctl = dict(base)
            for b in range(j):
                ctl[reg.start + b] = (prefix >> b) & 1
            sv.apply_multicontrolled_ry(reg.start + j, ctl, angle)
    return sv


def pattern_controls(sv: StateVector, name: str, value: int) -> dict[int, int]:
    """Control dictionary selecting ``value`` on register ``name``."""
    reg = sv.register(name)
    return {reg.start + b: (value >> b) & 1 for b in range(reg.size)}

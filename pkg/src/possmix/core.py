"""Domain types, parameter containers, validation and the parameter document.

Event marks follow the model numbering: 0 is the possession start (never
stored as an event), 1..E are transient event types and E+1 is the absorbing
end-of-possession mark. Component indices are 0-based on the Python side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

PI_FLOOR = 1e-10
PARAM_FLOOR = 1e-6
STOCHASTIC_TOL = 1e-10


class ParseError(ValueError):
    """Malformed parameter document."""


class ValidationError(ValueError):
    """Parameters that break a structural invariant."""


@dataclass(frozen=True)
class PitchBounds:
    b11: float = 0.0
    b21: float = 120.0
    b12: float = 0.0
    b22: float = 80.0

    def __post_init__(self):
        if not (self.b11 < self.b21 and self.b12 < self.b22):
            raise ValidationError(f"degenerate pitch bounds {self}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.b11, self.b12])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.b21, self.b22])

    @property
    def center(self) -> tuple[float, float]:
        return ((self.b11 + self.b21) / 2.0, (self.b12 + self.b22) / 2.0)

    def contains(self, x: float, y: float) -> bool:
        return self.b11 <= x <= self.b21 and self.b12 <= y <= self.b22

    def clamp(self, x: float, y: float) -> tuple[float, float]:
        return (min(max(x, self.b11), self.b21), min(max(y, self.b12), self.b22))


class EventRecord(NamedTuple):
    mark: int
    time: float
    x: float
    y: float


@dataclass(frozen=True)
class Possession:
    """One possession: start location plus the events that follow it.

    ``events`` holds the events after the start event; times are seconds
    since the start (the start itself is at time 0) and the last event
    carries the absorbing mark.
    """

    origin: tuple[float, float]
    events: tuple[EventRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "events", tuple(EventRecord(*ev) for ev in self.events))

    @property
    def n_events(self) -> int:
        return len(self.events)

    @property
    def marks(self) -> np.ndarray:
        return np.array([ev.mark for ev in self.events], dtype=np.int64)

    @property
    def times(self) -> np.ndarray:
        return np.array([ev.time for ev in self.events], dtype=float)

    @property
    def locations(self) -> np.ndarray:
        """(M+1)x2 array; row 0 is the origin."""
        pts = [self.origin] + [(ev.x, ev.y) for ev in self.events]
        return np.array(pts, dtype=float)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(np.concatenate([[0.0], self.times]))

    @property
    def duration(self) -> float:
        return self.events[-1].time

    def check(self, n_types: int, bounds: PitchBounds | None = None) -> list[str]:
        """Return the list of broken invariants (empty when valid)."""
        problems = []
        end = n_types + 1
        if not self.events:
            return ["possession has no events"]
        marks = self.marks
        if np.any((marks < 1) | (marks > end)):
            problems.append("mark out of range")
        if marks[-1] != end:
            problems.append("last event is not the absorbing mark")
        if np.any(marks[:-1] == end):
            problems.append("absorbing mark before the last event")
        times = self.times
        if not np.all(np.isfinite(times)) or np.any(times < 0):
            problems.append("non-finite or negative time")
        elif np.any(self.dt <= 0):
            problems.append("event times not strictly increasing")
        if bounds is not None:
            for x, y in self.locations:
                if not bounds.contains(x, y):
                    problems.append("location outside pitch bounds")
                    break
        return problems


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MixtureParams:
    """All parameters of a K-component mixture over E transient event types.

    Attributes
    ----------
    pi : (K,) mixing proportions
    gamma : (K, E+1, E+1) transition matrices; row r is the previous state
        r (0 = start), column c is the next mark c+1
    rho : (K, E+1, 2) gamma (shape, scale) per component and mark
    eta : (K, 2, E+1) spatial scale per component, axis and mark
    bounds : pitch rectangle
    """

    pi: np.ndarray
    gamma: np.ndarray
    rho: np.ndarray
    eta: np.ndarray
    bounds: PitchBounds = field(default_factory=PitchBounds)

    def __post_init__(self):
        for name in ("pi", "gamma", "rho", "eta"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        K = self.pi.shape[0]
        if self.pi.ndim != 1 or K < 1:
            raise ValidationError("pi must be a non-empty vector")
        if self.gamma.ndim != 3 or self.gamma.shape[0] != K or self.gamma.shape[1] != self.gamma.shape[2]:
            raise ValidationError(f"gamma has shape {self.gamma.shape}, expected ({K}, E+1, E+1)")
        E1 = self.gamma.shape[1]
        if E1 < 2:
            raise ValidationError("need at least one transient event type")
        if self.rho.shape != (K, E1, 2):
            raise ValidationError(f"rho has shape {self.rho.shape}, expected {(K, E1, 2)}")
        if self.eta.shape != (K, 2, E1):
            raise ValidationError(f"eta has shape {self.eta.shape}, expected {(K, 2, E1)}")

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @property
    def E(self) -> int:
        return self.gamma.shape[1] - 1

    def __eq__(self, other):
        if not isinstance(other, MixtureParams):
            return NotImplemented
        return (
            self.bounds == other.bounds
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("pi", "gamma", "rho", "eta")
            )
        )

    __hash__ = None

    def replace(self, **changes) -> "MixtureParams":
        fields = dict(pi=self.pi, gamma=self.gamma, rho=self.rho, eta=self.eta, bounds=self.bounds)
        fields.update(changes)
        return MixtureParams(**fields)

    def permuted(self, order: Sequence[int]) -> "MixtureParams":
        """Relabel components so that new component j is old ``order[j]``."""
        order = np.asarray(order)
        return self.replace(pi=self.pi[order], gamma=self.gamma[order], rho=self.rho[order], eta=self.eta[order])


@dataclass(frozen=True)
class Responsibilities:
    """Posterior memberships and the weighted statistics the M-step needs.

    ``n1``, ``n_dt`` and ``n_lndt`` are (K, E+1) arrays indexed by mark-1;
    ``trans_counts`` is (K, E+1, E+1) in the same layout as the transition
    matrices.
    """

    r: np.ndarray
    n1: np.ndarray
    n_dt: np.ndarray
    n_lndt: np.ndarray
    trans_counts: np.ndarray
    loglik: float = float("nan")


@dataclass(frozen=True)
class ClusterIndicators:
    lam: np.ndarray
    kappa: np.ndarray
    zeta: np.ndarray

    @property
    def K(self) -> int:
        return self.lam.shape[0]

    def permuted(self, order) -> "ClusterIndicators":
        order = np.asarray(order)
        return ClusterIndicators(self.lam[order], self.kappa[order], self.zeta[order])


class Violation(NamedTuple):
    code: str
    message: str
    structural: bool  # True when the value is unusable, False for identifiability-only issues


# -- validation ---------------------------------------------------------------

def _reachable(adj: np.ndarray, start: int) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in np.flatnonzero(adj[u]):
            v = int(v)
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def _period(adj: np.ndarray, nodes: list[int]) -> int:
    """Period of a strongly connected set of nodes (gcd of cycle lengths)."""
    level = {nodes[0]: 0}
    queue = [nodes[0]]
    inside = set(nodes)
    g = 0
    while queue:
        u = queue.pop(0)
        for v in np.flatnonzero(adj[u]):
            v = int(v)
            if v not in inside:
                continue
            if v not in level:
                level[v] = level[u] + 1
                queue.append(v)
            else:
                g = math.gcd(g, level[u] + 1 - level[v])
    return abs(g)


def chain_violations(gamma_mat: np.ndarray, label: str = "") -> list[Violation]:
    """Structural checks on one transition matrix.

    States are numbered 0..E+1 on the full chain. The transient states 1..E
    must form one aperiodic communicating class reachable from the start,
    from which the absorbing state is reachable.
    """
    E = gamma_mat.shape[0] - 1
    n = E + 2
    adj = np.zeros((n, n), dtype=bool)
    adj[: E + 1, 1:] = gamma_mat > 0
    adj[E + 1, E + 1] = True
    out = []
    transient = list(range(1, E + 1))
    from_start = _reachable(adj, 0)
    if not set(transient) <= from_start:
        out.append(Violation("transient-class", f"{label}not every transient state is reachable from the start", False))
    reach = {e: _reachable(adj, e) for e in transient}
    if any(not set(transient) <= reach[e] for e in transient):
        out.append(Violation("transient-class", f"{label}transient states do not form a single communicating class", False))
    elif _period(adj, transient) != 1:
        out.append(Violation("aperiodic-class", f"{label}transient class is periodic", False))
    if any(E + 1 not in reach[e] for e in transient):
        out.append(Violation("transient-class", f"{label}absorbing state unreachable from some transient state", False))
    return out


def validate_params(p: MixtureParams) -> list[Violation]:
    """List every invariant or identifiability condition ``p`` breaks."""
    out: list[Violation] = []
    if np.any(~np.isfinite(p.pi)) or np.any(p.pi <= 0):
        out.append(Violation("positive-proportions", "proportions must be strictly positive", True))
    if abs(p.pi.sum() - 1.0) > STOCHASTIC_TOL:
        out.append(Violation("proportions-sum", "pi does not sum to 1", True))
    if np.any(~np.isfinite(p.gamma)) or np.any(p.gamma < 0):
        out.append(Violation("row-stochasticity", "transition entries must be non-negative", True))
    bad_rows = np.abs(p.gamma.sum(axis=2) - 1.0) > STOCHASTIC_TOL
    if np.any(bad_rows):
        k, row = np.argwhere(bad_rows)[0]
        out.append(Violation("row-stochasticity", f"component {k} row {row} does not sum to 1", True))
    if np.any(~np.isfinite(p.rho)) or np.any(p.rho <= 0):
        out.append(Violation("positive-gamma-parameters", "gamma shape/scale must be positive", True))
    if np.any(~np.isfinite(p.eta)) or np.any(p.eta <= 0):
        out.append(Violation("positive-spatial-scales", "spatial scales must be positive", True))
    if not out:
        for k in range(p.K):
            out.extend(chain_violations(p.gamma[k], label=f"component {k}: "))
    for e in range(p.E + 1):
        for k in range(p.K):
            for l in range(k + 1, p.K):
                if np.array_equal(p.rho[k, e], p.rho[l, e]):
                    out.append(Violation(
                        "distinct-gamma-parameters",
                        f"components {k} and {l} share gamma parameters for mark {e + 1}",
                        False,
                    ))
    return out


def check_structure(p: MixtureParams) -> None:
    """Raise ValidationError on the first structural violation."""
    for v in validate_params(p):
        if v.structural:
            raise ValidationError(v.message)


# -- parameter document -------------------------------------------------------

def _emit(value) -> str:
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_emit(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_emit(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"non-finite number {value} cannot be serialized")
        return format(value, ".17g")
    if value is None:
        return "null"
    return json.dumps(value)


def to_json(obj) -> str:
    """JSON text with every float written at 17 significant digits."""
    return _emit(obj)


def params_to_dict(p: MixtureParams) -> dict:
    b = p.bounds
    return {
        "K": p.K,
        "E": p.E,
        "pi": p.pi.tolist(),
        "gamma": p.gamma.tolist(),
        "rho": p.rho.tolist(),
        "eta": p.eta.tolist(),
        "bounds": [[b.b11, b.b21], [b.b12, b.b22]],
    }


def serialize_params(p: MixtureParams) -> str:
    return to_json(params_to_dict(p)) + "\n"


def _field(doc: dict, name: str, shape: tuple[int, ...]) -> np.ndarray:
    if name not in doc:
        raise ParseError(f"missing field {name}")
    try:
        a = np.array(doc[name], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"field {name} is not numeric: {exc}") from None
    if a.shape != shape:
        raise ParseError(f"field {name} has shape {a.shape}, expected {shape}")
    return a


def params_from_dict(doc: dict) -> MixtureParams:
    if not isinstance(doc, dict):
        raise ParseError("parameter document must be an object")
    for name in ("K", "E"):
        if name not in doc:
            raise ParseError(f"missing field {name}")
        if not isinstance(doc[name], int) or doc[name] < 1:
            raise ParseError(f"field {name} must be a positive integer")
    K, E = doc["K"], doc["E"]
    pi = _field(doc, "pi", (K,))
    gamma = _field(doc, "gamma", (K, E + 1, E + 1))
    rho = _field(doc, "rho", (K, E + 1, 2))
    eta = _field(doc, "eta", (K, 2, E + 1))
    b = _field(doc, "bounds", (2, 2))
    try:
        bounds = PitchBounds(b[0, 0], b[0, 1], b[1, 0], b[1, 1])
    except ValidationError as exc:
        raise ParseError(f"field bounds: {exc}") from None
    p = MixtureParams(pi, gamma, rho, eta, bounds)
    check_structure(p)
    return p


def deserialize_params(text: str) -> MixtureParams:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    return params_from_dict(doc)

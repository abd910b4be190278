from __future__ import annotations

import math
from dataclasses import dataclass, field

CERTIFIED = "certified"
EMPIRICAL = "empirical"


class NoCertificateError(ValueError):
    """No certified constant exists (unbounded box, uncertified scheme)."""


class InadmissibleQuantizerError(ValueError):
    """c_Q is not below sqrt(1/2)."""


@dataclass(frozen=True)
class TheoremConstants:
    """Lipschitz/bound constants of a split model plus derived step-size terms.

    Per-boundary tuples are indexed by boundary ``i = 0..K-2``:
    ``C_a[i]`` bounds the parameter Jacobian of stage ``i``, ``L_down[i]`` and
    ``C_down[i]`` are the gradient-Lipschitz and gradient-norm bounds of the
    loss composed with every stage after boundary ``i``. ``ell_a`` holds the
    Lipschitz constants of the stage maps in their parameters (one entry for
    K=2, K entries otherwise). ``L_a_input`` holds Lipschitz constants of each
    stage's parameter Jacobian in its input; only the K>2 bound uses it.
    """

    L_f: float
    ell_a: tuple[float, ...]
    C_a: tuple[float, ...]
    L_down: tuple[float, ...]
    C_down: tuple[float, ...]
    sigma: float
    c_Q: float
    N: int
    K: int = 2
    L_a_input: tuple[float, ...] = ()
    provenance: dict = field(default_factory=dict)
    T: int | None = None
    C: float | None = None
    C_prime: float | None = None
    C_dprime: float | None = None
    C_tilde: float | None = None
    C_1: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        for name in ("L_f", "sigma", "c_Q"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        for name in ("ell_a", "C_a", "L_down", "C_down", "L_a_input"):
            vals = tuple(float(v) for v in getattr(self, name))
            if any(not (math.isfinite(v) and v >= 0) for v in vals):
                raise ValueError(f"{name} entries must be finite and nonnegative")
            object.__setattr__(self, name, vals)
        if self.N < 1 or self.K < 2:
            raise ValueError("need N >= 1 and K >= 2")

    @property
    def certified(self) -> bool:
        return bool(self.provenance) and all(v == CERTIFIED for v in self.provenance.values())

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

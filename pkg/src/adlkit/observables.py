"""Named observables of the extended state ``(q, p, friction)``.

Names are products of monomials joined by ``*``: ``q``, ``q2`` or ``q^2``,
``p2``, ``xi2``, ``q*p``, ``q[3]`` (coordinate 3, zero-based). ``zeta`` is an
alias of ``xi``: both read the friction slot of the state. ``1`` is the
constant observable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError

_TOKEN = re.compile(r"^(q|p|xi|zeta)(?:\[(\d+)\])?(?:\^?(\d+))?$")


@dataclass(frozen=True)
class Observable:
    name: str
    fn: Callable
    # (q, p, xi) exponents for single-coordinate monomials; None if not polynomial
    exponents: Optional[tuple] = None

    def __call__(self, q, p, f):
        return self.fn(q, p, f)


def _parse_monomial(name: str):
    compact = name.replace(" ", "")
    if compact in ("1", "one", "const"):
        return [], (0, 0, 0)
    factors = []
    exps = {"q": 0, "p": 0, "xi": 0}
    indexed = False
    for tok in compact.split("*"):
        m = _TOKEN.match(tok)
        if m is None:
            # allow run-together forms like "qp" or "q2p"
            parts = re.findall(r"(q|p|xi|zeta)(\d*)", tok)
            if not parts or "".join(a + b for a, b in parts) != tok:
                raise ConfigError(f"cannot parse observable {name!r}")
            for var, power in parts:
                var = "xi" if var == "zeta" else var
                k = int(power) if power else 1
                factors.append((var, None, k))
                exps[var] += k
            continue
        var, idx, power = m.groups()
        var = "xi" if var == "zeta" else var
        k = int(power) if power else 1
        if idx is not None:
            indexed = True
        factors.append((var, None if idx is None else int(idx), k))
        exps[var] += k
    return factors, None if indexed else (exps["q"], exps["p"], exps["xi"])


def parse_observable(name) -> Observable:
    if isinstance(name, Observable):
        return name
    factors, exps = _parse_monomial(str(name))

    def fn(q, p, f, _factors=tuple(factors)):
        out = np.ones(np.shape(f))
        for var, idx, k in _factors:
            if var == "xi":
                val = f
            else:
                arr = q if var == "q" else p
                if idx is None:
                    if arr.shape[-1] != 1:
                        raise ConfigError(
                            f"observable {name!r} needs a coordinate index for n={arr.shape[-1]}"
                        )
                    val = arr[..., 0]
                else:
                    val = arr[..., idx]
            out = out * val**k
        return out

    return Observable(str(name), fn, exps)


def parse_observables(names: Sequence) -> list:
    obs = [parse_observable(n) for n in names]
    if not obs:
        raise ConfigError("at least one observable is required")
    return obs


DEFAULT_SWEEP_OBSERVABLES = ("q", "q2", "p2", "xi2")

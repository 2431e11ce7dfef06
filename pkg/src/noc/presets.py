"""Built-in problem files, ready to run with ``check preset:<name>``.

Each preset is stored as ordinary problem-file text and goes through the
same parser as user files, so the presets double as worked examples of
the format.  ``preset_notes`` reports when overridden parameters leave
the range on which a preset's analysis is known to apply; such runs are
flagged but still evaluated.
"""
from __future__ import annotations

import math

from .errors import ProblemFileError
from .problemfile import ProblemFile, parse_problem_file

__all__ = ["PRESET_NAMES", "load_preset", "preset_notes", "preset_text"]


# A two-state single-chart problem whose candidate control sits on the
# boundary of the unit disc; the bundled direction exposes a positive
# second-order value, so the expected verdict is "refuted".
_CCS126 = """\
noc 1
kind ocp
chart {
  type euclidean
  dim 2
}
grid {
  cells 1000
  horizon 0.5
}
param theta 3.0
start 1.0 0.0
dynamics {
  u2
  -y1^2 + 4*y1*u2 - theta*u1^2
}
endpoint {
  cost yT2
  equality y01 - 1
  equality y02
}
control_set {
  ball 0.0 0.0 1.0
}
control {
  0
  -1
}
direction {
  v 1 ; 0
}
"""

# A scalar linear-quadratic problem with pinned ends, written in running-
# cost form and augmented internally.  The zero-mean direction keeps the
# quadratic form negative, so the expected verdict is "consistent".
_LINEAR_LQ = """\
noc 1
kind ocpe
chart {
  type euclidean
  dim 1
}
grid {
  cells 200
  horizon 1.0
}
param pi 3.141592653589793
start 0.0
end 1.0
dynamics {
  u1
}
running_cost 0.5*u1^2
control_set {
  box -2.0 2.0
}
control {
  1
}
direction {
  v cos(2*pi*t/T)
}
"""

_PRESETS = {
    "ccs126": _CCS126,
    "linear-lq-euclid": _LINEAR_LQ,
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def preset_text(name: str) -> str:
    try:
        return _PRESETS[name]
    except KeyError:
        raise ProblemFileError(
            f"unknown preset {name!r} (available: "
            f"{', '.join(PRESET_NAMES)})") from None


def load_preset(name: str) -> ProblemFile:
    return parse_problem_file(preset_text(name))


def preset_notes(name: str | None, pf: ProblemFile) -> list[str]:
    """Range-hypothesis flags for a preset after parameter overrides."""
    notes: list[str] = []
    if name != "ccs126":
        return notes
    theta = pf.param_dict().get("theta")
    if theta is not None and not theta > 2.0:
        notes.append(f"hypothesis violation theta>2 (theta={theta!r})")
    t_max = 3.0 - math.sqrt(5.0)
    if pf.horizon is not None and not 0.0 < pf.horizon < t_max:
        notes.append(
            f"hypothesis violation 0<T<3-sqrt(5) (T={pf.horizon!r})")
    return notes

"""
Per-round trace records.

Column semantics
----------------
round             – round index t (0-based)
train_loss        – F at x_{t+1}, the model produced by round t
test_acc          – test accuracy of x_{t+1}
rolling_acc       – trailing mean of test_acc over the rolling window
grad_norm_F       – ||grad F(x_t)||
grad_norm_Ftilde  – ||grad F~(x_t)||, F~ = (F + gamma f0) / (1 + gamma)
xi_sq             – ||grad f0(x_t) - grad F(x_t)||^2
G_sq              – (1/N) sum_i ||grad f_i(x_t) - grad F(x_t)||^2
Ec_drift, E0_drift – client and server drift of round t
Ftilde            – F~(x_t)
grad_norm_f0      – ||grad f0(x_t)||
test_loss, train_acc, delta_norm, params_digest, drift_estimated – extras

Gradient diagnostics are evaluated only every ``metrics_stride`` rounds;
other rounds carry NaN, written to CSV as an empty cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Any, Dict, List

from config import ContractError

NAN = float("nan")

CSV_COLUMNS: List[str] = [
    "round", "train_loss", "test_acc", "rolling_acc", "grad_norm_F",
    "grad_norm_Ftilde", "xi_sq", "G_sq", "Ec_drift", "E0_drift", "Ftilde",
    "test_loss", "train_acc", "delta_norm", "grad_norm_f0", "params_digest",
    "drift_estimated",
]


def format_float(value: float) -> str:
    """17 significant digits; NaN becomes an empty cell."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{float(value):.17g}"


def parse_float(text: str) -> float:
    text = (text or "").strip()
    return float(text) if text else NAN


@dataclass(slots=True)
class RoundTrace:
    round: int
    train_loss: float = NAN
    test_acc: float = NAN
    rolling_acc: float = NAN
    grad_norm_F: float = NAN
    grad_norm_Ftilde: float = NAN
    xi_sq: float = NAN
    G_sq: float = NAN
    Ec_drift: float = NAN
    E0_drift: float = NAN
    Ftilde: float = NAN
    test_loss: float = NAN
    train_acc: float = NAN
    delta_norm: float = NAN
    grad_norm_f0: float = NAN
    params_digest: str = ""
    drift_estimated: bool = False

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> "RoundTrace":
        """Raise ContractError when a field lies outside its range."""
        if self.round < 0:
            raise ContractError(f"round must be non-negative, got {self.round}")
        for name in ("test_acc", "rolling_acc", "train_acc"):
            value = getattr(self, name)
            if not math.isnan(value) and not (0.0 <= value <= 1.0):
                raise ContractError(f"{name} must lie in [0, 1], got {value}")
        for name in ("grad_norm_F", "grad_norm_Ftilde", "xi_sq", "G_sq",
                     "Ec_drift", "E0_drift", "delta_norm", "grad_norm_f0"):
            value = getattr(self, name)
            if not math.isnan(value) and value < 0.0:
                raise ContractError(f"{name} must be non-negative, got {value}")
        return self

    @property
    def has_diagnostics(self) -> bool:
        return not math.isnan(self.grad_norm_Ftilde)

    # ------------------------------------------------------------------ #
    # Serialisation                                                      #
    # ------------------------------------------------------------------ #

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_row(self) -> List[str]:
        row = []
        for name in CSV_COLUMNS:
            value = getattr(self, name)
            if name == "round":
                row.append(str(value))
            elif name == "params_digest":
                row.append(value)
            elif name == "drift_estimated":
                row.append("1" if value else "0")
            else:
                row.append(format_float(value))
        return row

    @classmethod
    def from_row(cls, row: Dict[str, str]) -> "RoundTrace":
        kwargs: Dict[str, Any] = {}
        for name in CSV_COLUMNS:
            text = row.get(name, "")
            if name == "round":
                kwargs[name] = int(text)
            elif name == "params_digest":
                kwargs[name] = text or ""
            elif name == "drift_estimated":
                kwargs[name] = text.strip() == "1"
            else:
                kwargs[name] = parse_float(text)
        return cls(**kwargs)

    def summary(self) -> str:
        return (
            f"t={self.round} loss={self.train_loss:.4g} acc={self.test_acc:.4f} "
            f"roll={self.rolling_acc:.4f} |gF~|={self.grad_norm_Ftilde:.3g} "
            f"xi2={self.xi_sq:.3g} G2={self.G_sq:.3g}"
        )

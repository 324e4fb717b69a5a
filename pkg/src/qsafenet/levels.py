from __future__ import annotations

import enum


class SecurityLevel(enum.IntEnum):
    """Per-session protection mode.

    Lower numeric value means stronger / preferred: L1 > L2 > L3 > L4.
    """

    L1 = 1  # direct QKD link
    L2 = 2  # multi-hop QKD trusted relay
    L3 = 3  # QKD + PQC hybrid (one classical endpoint)
    L4 = 4  # PQC only

    def prefers_over(self, other: "SecurityLevel") -> bool:
        return self.value < other.value

    @classmethod
    def parse(cls, value: "str | int | SecurityLevel") -> "SecurityLevel":
        if isinstance(value, SecurityLevel):
            return value
        if isinstance(value, int):
            return cls(value)
        text = str(value).strip().upper().replace("LEVEL", "L").replace(" ", "").replace("_", "")
        if text.isdigit():
            return cls(int(text))
        return cls[text]

"""The inference result shared by every engine, and its JSON document form."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

CONVERGED = "converged"
MAX_ITERS = "max-iters"


@dataclass
class InferenceResult:
    method: str
    marginals: Dict[str, np.ndarray]
    status: str = CONVERGED
    iterations: int = 0
    residual: float = 0.0
    free_energy: Dict[str, float] = field(default_factory=dict)
    consistency_gap: Optional[float] = None
    soundness_residual: Optional[float] = None
    factor_beliefs: Optional[Dict[str, np.ndarray]] = None
    region_beliefs: Optional[Dict[str, np.ndarray]] = None
    diagnostics: Dict[str, object] = field(default_factory=dict)
    state: Optional[object] = field(default=None, repr=False)
    solutions: Optional[dict] = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def to_document(self) -> dict:
        doc = {
            "method": self.method,
            "status": self.status,
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "consistency_gap": None if self.consistency_gap is None else float(self.consistency_gap),
            "soundness_residual": (
                None if self.soundness_residual is None else float(self.soundness_residual)
            ),
            "free_energy": {k: float(v) for k, v in self.free_energy.items()},
            "marginals": {v: [float(x) for x in p] for v, p in self.marginals.items()},
        }
        if self.diagnostics:
            doc["diagnostics"] = self.diagnostics
        return doc

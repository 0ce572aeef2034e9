"""Cascade inference: the stage-1 threshold gates the classifier."""

from dataclasses import dataclass

import numpy as np

from core.errors import UsageError
from core.models import ModelBundle, predict_proba
from stages.reward_filter import FilterModel


@dataclass
class CascadePredictor:
    """Filtered windows get criticality 0; the rest get the classifier probability.

    ``mode`` names which stage's checkpoint supplies the classifier.
    """

    filter: FilterModel | None
    classifier: ModelBundle | None
    mode: str = "stage2"

    def _require(self) -> None:
        if self.filter is None or self.filter.epsilon is None:
            raise UsageError("cascade is missing a calibrated stage-1 filter")
        if self.classifier is None:
            raise UsageError(f"cascade is missing its {self.mode} classifier")

    def predict_with_gate(self, X) -> tuple[np.ndarray, np.ndarray]:
        """(criticality, survived-stage-1 mask)."""
        self._require()
        X = np.asarray(X)
        passed = self.filter.passes(X)
        out = np.zeros(len(X), dtype=np.float64)
        if passed.any():
            out[passed] = predict_proba(self.classifier.model, X[passed])
        return out, passed

    def predict(self, X) -> np.ndarray:
        return self.predict_with_gate(X)[0]


def predict(cascade: CascadePredictor, X) -> np.ndarray:
    return cascade.predict(X)
